//! Reverse-mode differentiation over a fixed op vocabulary.
//!
//! The model family in this crate is small and closed, so instead of a general
//! autodiff system the tape records a handful of audited ops (linear maps, row
//! normalization, softmax/log-softmax, reductions, cosine, entropy) and replays
//! them in reverse. Losses are expressed as closures that build a graph on a
//! fresh [`Tape`] from the blocks of a [`ParamTree`]; [`grad`] returns the
//! exact gradient for trainable blocks, and [`finite_diff`] provides the
//! independent central-difference oracle used throughout the test suite.

use crate::error::{Error, Result};
use crate::numcore::ops;
use crate::numcore::tensor::Tensor2;
use crate::numcore::tree::{GradTree, ParamTree};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    MatMul { a: usize, b: usize },
    MatMulTb { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    MulElem { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    AddScalar { a: usize },
    BroadcastRows { a: usize },
    MeanRows { a: usize },
    NormalizeRows { a: usize },
    Softmax { a: usize },
    LogSoftmax { a: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    Pick { a: usize, index: usize },
    Cosine { a: usize, b: usize },
    Entropy { a: usize },
}

struct Node {
    op: Op,
    value: Tensor2,
}

/// Records a forward computation for one loss evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Tape handles for every block of a registered [`ParamTree`].
pub struct TreeVars {
    entries: Vec<(String, Val, bool)>,
}

impl TreeVars {
    /// Handle for a named block; panics on unknown names (programming error,
    /// block names are static strings chosen by the model builders).
    pub fn get(&self, name: &str) -> Val {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, v, _)| *v)
            .unwrap_or_else(|| panic!("no block named `{name}` registered on tape"))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Tensor2, name: &'static str) -> Result<Val> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let id = self.nodes.len();
        self.nodes.push(Node { op, value });
        Ok(Val(id))
    }

    pub fn value(&self, v: Val) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    /// A constant (non-differentiated) input.
    pub fn constant(&mut self, t: Tensor2) -> Val {
        let id = self.nodes.len();
        self.nodes.push(Node { op: Op::Input, value: t });
        Val(id)
    }

    pub fn constant_row(&mut self, v: &[f64]) -> Result<Val> {
        Ok(self.constant(Tensor2::row_vector(v.to_vec())?))
    }

    pub fn constant_scalar(&mut self, v: f64) -> Val {
        self.constant(Tensor2::scalar(v))
    }

    /// Register every block of a tree. Trainable blocks become leaf variables
    /// that receive gradients; frozen blocks enter as constants.
    pub fn register(&mut self, params: &ParamTree) -> TreeVars {
        let entries = params
            .blocks()
            .iter()
            .map(|b| {
                let v = self.constant(b.tensor.clone());
                (b.name.clone(), v, b.trainable)
            })
            .collect();
        TreeVars { entries }
    }

    // ── op constructors ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        self.push(Op::MatMul { a: a.0, b: b.0 }, v, "matmul")
    }

    /// `a @ bᵀ` — scores a row of queries against a row-per-item table.
    pub fn matmul_tb(&mut self, a: Val, b: Val) -> Result<Val> {
        let v = self.nodes[a.0].value.matmul_tb(&self.nodes[b.0].value)?;
        self.push(Op::MatMulTb { a: a.0, b: b.0 }, v, "matmul_tb")
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        let mut v = self.nodes[a.0].value.clone();
        v.add_scaled(1.0, &self.nodes[b.0].value)?;
        self.push(Op::Add { a: a.0, b: b.0 }, v, "add")
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        let mut v = self.nodes[a.0].value.clone();
        v.add_scaled(-1.0, &self.nodes[b.0].value)?;
        self.push(Op::Sub { a: a.0, b: b.0 }, v, "sub")
    }

    pub fn mul_elem(&mut self, a: Val, b: Val) -> Result<Val> {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        if !ta.same_shape(tb) {
            return Err(Error::ShapeMismatch {
                context: "mul_elem",
                expected: format!("{:?}", ta.shape()),
                got: format!("{:?}", tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let v = Tensor2::from_vec_unchecked(ta.rows(), ta.cols(), data);
        self.push(Op::MulElem { a: a.0, b: b.0 }, v, "mul_elem")
    }

    pub fn scale(&mut self, a: Val, factor: f64) -> Result<Val> {
        let v = self.nodes[a.0].value.map(|x| x * factor);
        self.push(Op::Scale { a: a.0, factor }, v, "scale")
    }

    pub fn add_scalar(&mut self, a: Val, c: f64) -> Result<Val> {
        let v = self.nodes[a.0].value.map(|x| x + c);
        self.push(Op::AddScalar { a: a.0 }, v, "add_scalar")
    }

    /// Repeat a `1×n` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Val, rows: usize) -> Result<Val> {
        let src = &self.nodes[a.0].value;
        if src.rows() != 1 {
            return Err(Error::ShapeMismatch {
                context: "broadcast_rows",
                expected: "1×n".into(),
                got: format!("{:?}", src.shape()),
            });
        }
        let mut data = Vec::with_capacity(rows * src.cols());
        for _ in 0..rows {
            data.extend_from_slice(src.row(0));
        }
        let v = Tensor2::from_vec_unchecked(rows, src.cols(), data);
        self.push(Op::BroadcastRows { a: a.0 }, v, "broadcast_rows")
    }

    /// Column-wise mean over rows: `r×n → 1×n`.
    pub fn mean_rows(&mut self, a: Val) -> Result<Val> {
        let src = &self.nodes[a.0].value;
        let (r, n) = src.shape();
        if r == 0 {
            return Err(Error::EmptyInput("mean_rows"));
        }
        let mut out = vec![0.0; n];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(src.row(i)) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let v = Tensor2::from_vec_unchecked(1, n, out);
        self.push(Op::MeanRows { a: a.0 }, v, "mean_rows")
    }

    /// Each row scaled to unit L2 norm; zero rows are degenerate.
    pub fn normalize_rows(&mut self, a: Val) -> Result<Val> {
        let src = &self.nodes[a.0].value;
        let (r, n) = src.shape();
        let mut data = Vec::with_capacity(r * n);
        for i in 0..r {
            let row = src.row(i);
            let nrm = ops::norm(row);
            if nrm == 0.0 {
                return Err(Error::DegenerateEmbedding);
            }
            data.extend(row.iter().map(|x| x / nrm));
        }
        let v = Tensor2::from_vec_unchecked(r, n, data);
        self.push(Op::NormalizeRows { a: a.0 }, v, "normalize_rows")
    }

    pub fn softmax(&mut self, a: Val) -> Result<Val> {
        let src = &self.nodes[a.0].value;
        let (r, n) = src.shape();
        let mut data = Vec::with_capacity(r * n);
        for i in 0..r {
            data.extend(ops::softmax(src.row(i))?);
        }
        let v = Tensor2::from_vec_unchecked(r, n, data);
        self.push(Op::Softmax { a: a.0 }, v, "softmax")
    }

    pub fn log_softmax(&mut self, a: Val) -> Result<Val> {
        let src = &self.nodes[a.0].value;
        let (r, n) = src.shape();
        let mut data = Vec::with_capacity(r * n);
        for i in 0..r {
            data.extend(ops::log_softmax(src.row(i))?);
        }
        let v = Tensor2::from_vec_unchecked(r, n, data);
        self.push(Op::LogSoftmax { a: a.0 }, v, "log_softmax")
    }

    pub fn sum_all(&mut self, a: Val) -> Result<Val> {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Op::SumAll { a: a.0 }, Tensor2::scalar(s), "sum_all")
    }

    pub fn mean_all(&mut self, a: Val) -> Result<Val> {
        let t = &self.nodes[a.0].value;
        if t.is_empty() {
            return Err(Error::EmptyInput("mean_all"));
        }
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::MeanAll { a: a.0 }, Tensor2::scalar(s), "mean_all")
    }

    /// Select one entry of a `1×n` row as a `1×1` scalar.
    pub fn pick(&mut self, a: Val, index: usize) -> Result<Val> {
        let src = &self.nodes[a.0].value;
        if src.rows() != 1 {
            return Err(Error::ShapeMismatch {
                context: "pick",
                expected: "1×n".into(),
                got: format!("{:?}", src.shape()),
            });
        }
        if index >= src.cols() {
            return Err(Error::IndexOutOfRange {
                context: "pick",
                index,
                len: src.cols(),
            });
        }
        let v = Tensor2::scalar(src.data()[index]);
        self.push(Op::Pick { a: a.0, index }, v, "pick")
    }

    /// Cosine similarity of two `1×n` rows, as a `1×1` scalar.
    pub fn cosine(&mut self, a: Val, b: Val) -> Result<Val> {
        let c = ops::cosine(self.nodes[a.0].value.row(0), self.nodes[b.0].value.row(0))?;
        self.push(Op::Cosine { a: a.0, b: b.0 }, Tensor2::scalar(c), "cosine")
    }

    /// Shannon entropy of a `1×n` probability row (`0·ln 0 := 0`).
    pub fn entropy(&mut self, a: Val) -> Result<Val> {
        let src = &self.nodes[a.0].value;
        if src.rows() != 1 {
            return Err(Error::ShapeMismatch {
                context: "entropy",
                expected: "1×n".into(),
                got: format!("{:?}", src.shape()),
            });
        }
        let h = ops::entropy(src.row(0))?;
        self.push(Op::Entropy { a: a.0 }, Tensor2::scalar(h), "entropy")
    }

    /// Mean of a set of scalar values.
    pub fn mean_of(&mut self, vals: &[Val]) -> Result<Val> {
        let mut iter = vals.iter();
        let mut acc = *iter.next().ok_or(Error::EmptyInput("mean_of"))?;
        for v in iter {
            acc = self.add(acc, *v)?;
        }
        self.scale(acc, 1.0 / vals.len() as f64)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; returns one gradient per node.
    fn backward(&self, loss: Val) -> Result<Vec<Tensor2>> {
        let loss_t = &self.nodes[loss.0].value;
        if loss_t.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                context: "backward",
                expected: "scalar loss (1×1)".into(),
                got: format!("{:?}", loss_t.shape()),
            });
        }
        let mut grads: Vec<Tensor2> = self
            .nodes
            .iter()
            .map(|n| Tensor2::zeros(n.value.rows(), n.value.cols()))
            .collect();
        grads[loss.0].data_mut()[0] = 1.0;

        for idx in (0..=loss.0).rev() {
            let g = grads[idx].clone();
            if g.data().iter().all(|&x| x == 0.0) {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::MatMul { a, b } => {
                    let da = g.matmul_tb(&self.nodes[*b].value)?;
                    let db = self.nodes[*a].value.transpose().matmul(&g)?;
                    grads[*a].add_scaled(1.0, &da)?;
                    grads[*b].add_scaled(1.0, &db)?;
                }
                Op::MatMulTb { a, b } => {
                    let da = g.matmul(&self.nodes[*b].value)?;
                    let db = g.transpose().matmul(&self.nodes[*a].value)?;
                    grads[*a].add_scaled(1.0, &da)?;
                    grads[*b].add_scaled(1.0, &db)?;
                }
                Op::Add { a, b } => {
                    grads[*a].add_scaled(1.0, &g)?;
                    grads[*b].add_scaled(1.0, &g)?;
                }
                Op::Sub { a, b } => {
                    grads[*a].add_scaled(1.0, &g)?;
                    grads[*b].add_scaled(-1.0, &g)?;
                }
                Op::MulElem { a, b } => {
                    let ga = elemwise_product(&g, &self.nodes[*b].value);
                    let gb = elemwise_product(&g, &self.nodes[*a].value);
                    grads[*a].add_scaled(1.0, &ga)?;
                    grads[*b].add_scaled(1.0, &gb)?;
                }
                Op::Scale { a, factor } => {
                    grads[*a].add_scaled(*factor, &g)?;
                }
                Op::AddScalar { a } => {
                    grads[*a].add_scaled(1.0, &g)?;
                }
                Op::BroadcastRows { a } => {
                    let n = g.cols();
                    let mut col_sum = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (s, x) in col_sum.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    let da = Tensor2::from_vec(1, n, col_sum)?;
                    grads[*a].add_scaled(1.0, &da)?;
                }
                Op::MeanRows { a } => {
                    let src_rows = self.nodes[*a].value.rows();
                    let scale = 1.0 / src_rows as f64;
                    for r in 0..src_rows {
                        let row = grads[*a].row_mut(r);
                        for (d, x) in row.iter_mut().zip(g.row(0)) {
                            *d += scale * x;
                        }
                    }
                }
                Op::NormalizeRows { a } => {
                    let x = &self.nodes[*a].value;
                    let y = &self.nodes[idx].value;
                    let mut da = Tensor2::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let nrm = ops::norm(x.row(r));
                        let gy = ops::dot(g.row(r), y.row(r));
                        let drow = da.row_mut(r);
                        for ((d, gi), yi) in drow.iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *d = (gi - gy * yi) / nrm;
                        }
                    }
                    grads[*a].add_scaled(1.0, &da)?;
                }
                Op::Softmax { a } => {
                    let y = &self.nodes[idx].value;
                    let mut da = Tensor2::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let gy = ops::dot(g.row(r), y.row(r));
                        let drow = da.row_mut(r);
                        for ((d, gi), yi) in drow.iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *d = yi * (gi - gy);
                        }
                    }
                    grads[*a].add_scaled(1.0, &da)?;
                }
                Op::LogSoftmax { a } => {
                    let y = &self.nodes[idx].value;
                    let mut da = Tensor2::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let gsum: f64 = g.row(r).iter().sum();
                        let drow = da.row_mut(r);
                        for ((d, gi), yi) in drow.iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *d = gi - yi.exp() * gsum;
                        }
                    }
                    grads[*a].add_scaled(1.0, &da)?;
                }
                Op::SumAll { a } => {
                    let gv = g.data()[0];
                    for d in grads[*a].data_mut() {
                        *d += gv;
                    }
                }
                Op::MeanAll { a } => {
                    let gv = g.data()[0] / self.nodes[*a].value.len() as f64;
                    for d in grads[*a].data_mut() {
                        *d += gv;
                    }
                }
                Op::Pick { a, index } => {
                    grads[*a].data_mut()[*index] += g.data()[0];
                }
                Op::Cosine { a, b } => {
                    let u = self.nodes[*a].value.row(0);
                    let v = self.nodes[*b].value.row(0);
                    let nu = ops::norm(u);
                    let nv = ops::norm(v);
                    let c = ops::dot(u, v) / (nu * nv);
                    let gv = g.data()[0];
                    {
                        let da = grads[*a].row_mut(0);
                        for i in 0..u.len() {
                            da[i] += gv * (v[i] / (nu * nv) - c * u[i] / (nu * nu));
                        }
                    }
                    {
                        let db = grads[*b].row_mut(0);
                        for i in 0..v.len() {
                            db[i] += gv * (u[i] / (nu * nv) - c * v[i] / (nv * nv));
                        }
                    }
                }
                Op::Entropy { a } => {
                    let p = self.nodes[*a].value.row(0);
                    let gv = g.data()[0];
                    let da = grads[*a].row_mut(0);
                    for (d, &pi) in da.iter_mut().zip(p) {
                        if pi > 0.0 {
                            *d += -gv * (pi.ln() + 1.0);
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn elemwise_product(a: &Tensor2, b: &Tensor2) -> Tensor2 {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor2::from_vec(a.rows(), a.cols(), data).expect("matching shapes")
}

/// Exact reverse-mode gradient of `loss_fn` at `params` for trainable blocks.
/// Frozen blocks appear in the result as zeros.
pub fn grad<F>(loss_fn: F, params: &ParamTree) -> Result<(f64, GradTree)>
where
    F: Fn(&mut Tape, &TreeVars) -> Result<Val>,
{
    let mut tape = Tape::new();
    let vars = tape.register(params);
    let loss = loss_fn(&mut tape, &vars)?;
    let loss_value = tape.value(loss).item()?;
    let node_grads = tape.backward(loss)?;
    let mut out = GradTree::zeros_like(params);
    for (name, val, trainable) in &vars.entries {
        if *trainable {
            *out.get_mut(name).expect("congruent tree") = node_grads[val.0].clone();
        }
    }
    Ok((loss_value, out))
}

/// Forward evaluation only (no gradients).
pub fn eval<F>(loss_fn: F, params: &ParamTree) -> Result<f64>
where
    F: Fn(&mut Tape, &TreeVars) -> Result<Val>,
{
    let mut tape = Tape::new();
    let vars = tape.register(params);
    let loss = loss_fn(&mut tape, &vars)?;
    tape.value(loss).item()
}

/// Central finite-difference gradient estimate, entry by entry, for trainable
/// blocks. Independent of the reverse sweep: only forward evaluations.
pub fn finite_diff<F>(loss_fn: F, params: &ParamTree, h: f64) -> Result<GradTree>
where
    F: Fn(&mut Tape, &TreeVars) -> Result<Val>,
{
    if h <= 0.0 {
        return Err(Error::invalid("finite_diff: h must be positive"));
    }
    let mut out = GradTree::zeros_like(params);
    let names: Vec<String> = params
        .blocks()
        .iter()
        .filter(|b| b.trainable)
        .map(|b| b.name.clone())
        .collect();
    for name in names {
        let n_entries = params.require(&name)?.len();
        for i in 0..n_entries {
            let mut plus = params.clone();
            plus.get_mut(&name).expect("block exists").data_mut()[i] += h;
            let f_plus = eval(&loss_fn, &plus)?;

            let mut minus = params.clone();
            minus.get_mut(&name).expect("block exists").data_mut()[i] -= h;
            let f_minus = eval(&loss_fn, &minus)?;

            out.get_mut(&name).expect("congruent tree").data_mut()[i] =
                (f_plus - f_minus) / (2.0 * h);
        }
    }
    Ok(out)
}

/// Largest relative error between two gradient trees, with an absolute floor
/// so near-zero entries do not inflate the ratio.
pub fn max_relative_error(a: &GradTree, b: &GradTree) -> f64 {
    let mut worst: f64 = 0.0;
    for ((_, ta), (_, tb)) in a.blocks().zip(b.blocks()) {
        for (x, y) in ta.data().iter().zip(tb.data()) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}
