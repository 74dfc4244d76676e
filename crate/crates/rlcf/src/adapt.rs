//! The policy-gradient adaptation engine.
//!
//! [`reinforce_loss`] builds the surrogate `L = −(1/K) Σ R_k · log P(t_k)` on a
//! tape: rewards enter as constants, so the gradient of `L` is exactly the
//! log-derivative estimator over the K drawn candidates. The same tape serves
//! the comparison objectives ([`entropy_min_loss`], [`pseudo_label_loss`],
//! [`kd_loss`]), so one gradient engine backs every adaptation mode.
//!
//! Episode bookkeeping lives here too: [`AdamW`] (decoupled weight decay,
//! trainable blocks only), [`EpisodeState`] (pristine snapshot + optimizer,
//! reset after every sample), and [`MomentumBuffer`] (an exponentially
//! averaged shadow of adapted weights committed back every `interval`
//! samples).

use crate::error::{Error, Result};
use crate::numcore::{self, GradTree, ParamTree, Tape, Tensor2, Val};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
}

/// Adaptive-moment optimizer with decoupled weight decay.
///
/// The decay is applied to the parameters after the moment update
/// (`θ ← θ − lr·wd·θ`), never folded into the gradients. Only trainable
/// blocks move; moments are allocated per trainable block on first use.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimizerConfig,
    step_count: u64,
    moments: Vec<(String, Tensor2, Tensor2)>,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self { cfg, step_count: 0, moments: Vec::new() }
    }

    pub fn config(&self) -> OptimizerConfig {
        self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Zero all moments and the step counter.
    pub fn reset(&mut self) {
        self.step_count = 0;
        self.moments.clear();
    }

    pub fn step(&mut self, params: &mut ParamTree, grads: &GradTree) -> Result<()> {
        if !grads.congruent_with(params) {
            return Err(Error::invalid("optimizer_step: grads not congruent with params"));
        }
        for (name, g) in grads.blocks() {
            if !params.is_trainable(name) {
                continue;
            }
            if !g.all_finite() {
                return Err(Error::invalid(format!(
                    "optimizer_step: non-finite gradient in block `{name}`"
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let lr = self.cfg.lr;
        let wd = self.cfg.weight_decay;

        let names: Vec<String> = params
            .blocks()
            .iter()
            .filter(|b| b.trainable)
            .map(|b| b.name.clone())
            .collect();
        for name in names {
            let g = grads.get(&name).expect("congruent tree");
            let (m, v) = self.moments_for(&name, g.rows(), g.cols());
            let theta = params.get_mut(&name).expect("trainable block");
            for i in 0..g.len() {
                let gi = g.data()[i];
                m.data_mut()[i] = BETA1 * m.data()[i] + (1.0 - BETA1) * gi;
                v.data_mut()[i] = BETA2 * v.data()[i] + (1.0 - BETA2) * gi * gi;
                let m_hat = m.data()[i] / bc1;
                let v_hat = v.data()[i] / bc2;
                let mut x = theta.data()[i] - lr * m_hat / (v_hat.sqrt() + EPS);
                x -= lr * wd * x;
                theta.data_mut()[i] = x;
            }
        }
        Ok(())
    }

    fn moments_for(&mut self, name: &str, rows: usize, cols: usize) -> (&mut Tensor2, &mut Tensor2) {
        if !self.moments.iter().any(|(n, _, _)| n == name) {
            self.moments
                .push((name.to_string(), Tensor2::zeros(rows, cols), Tensor2::zeros(rows, cols)));
        }
        let entry = self
            .moments
            .iter_mut()
            .find(|(n, _, _)| n == name)
            .expect("just inserted");
        (&mut entry.1, &mut entry.2)
    }
}

/// Surrogate whose gradient is the policy-gradient estimator over the K drawn
/// candidates: `L = −(1/K) Σ R_k · logprob_k`, rewards held constant.
pub fn reinforce_loss(tape: &mut Tape, logprobs: &[Val], rewards: &[f64]) -> Result<Val> {
    if logprobs.len() != rewards.len() {
        return Err(Error::invalid(format!(
            "reinforce_loss: {} logprobs vs {} rewards",
            logprobs.len(),
            rewards.len()
        )));
    }
    if logprobs.is_empty() {
        return Err(Error::EmptyInput("reinforce_loss"));
    }
    let k = logprobs.len() as f64;
    let mut acc: Option<Val> = None;
    for (lp, &r) in logprobs.iter().zip(rewards) {
        let term = tape.scale(*lp, -r / k)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Marginal-entropy objective over confident views: the entropy of the mean
/// probability vector.
pub fn entropy_min_loss(tape: &mut Tape, views_probs: &[Val]) -> Result<Val> {
    if views_probs.is_empty() {
        return Err(Error::EmptyInput("entropy_min_loss"));
    }
    let mean = tape.mean_of(views_probs)?;
    tape.entropy(mean)
}

/// Negative log-probability of the teacher's top-1 class.
pub fn pseudo_label_loss(tape: &mut Tape, student_logprobs: Val, teacher_argmax: usize) -> Result<Val> {
    let picked = tape.pick(student_logprobs, teacher_argmax)?;
    tape.scale(picked, -1.0)
}

/// Temperature-scaled distillation: `T² · KL(softmax(teacher/T) ‖ softmax(student/T))`.
pub fn kd_loss(
    tape: &mut Tape,
    student_logits: Val,
    teacher_logits: &[f64],
    temperature: f64,
) -> Result<Val> {
    if temperature <= 0.0 {
        return Err(Error::invalid("kd_loss: temperature must be positive"));
    }
    let n = tape.value(student_logits).cols();
    if tape.value(student_logits).rows() != 1 || n != teacher_logits.len() {
        return Err(Error::ShapeMismatch {
            context: "kd_loss",
            expected: format!("1×{}", teacher_logits.len()),
            got: format!("{:?}", tape.value(student_logits).shape()),
        });
    }
    let scaled_teacher: Vec<f64> = teacher_logits.iter().map(|v| v / temperature).collect();
    let p_teacher = numcore::softmax(&scaled_teacher)?;
    // Σ p_t ln p_t is a constant w.r.t. the student
    let neg_teacher_entropy: f64 = p_teacher
        .iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum();
    let s_scaled = tape.scale(student_logits, 1.0 / temperature)?;
    let ls = tape.log_softmax(s_scaled)?;
    let pt = tape.constant_row(&p_teacher)?;
    let weighted = tape.mul_elem(pt, ls)?;
    let cross = tape.sum_all(weighted)?;
    let neg_cross = tape.scale(cross, -1.0)?;
    let kl = tape.add_scalar(neg_cross, neg_teacher_entropy)?;
    tape.scale(kl, temperature * temperature)
}

/// Pristine snapshot, optimizer, and step index for one adaptation episode.
#[derive(Debug, Clone)]
pub struct EpisodeState {
    pristine: ParamTree,
    opt: AdamW,
    step: usize,
}

impl EpisodeState {
    /// Snapshot `live` as the pristine state θ*.
    pub fn begin(live: &ParamTree, opt_cfg: OptimizerConfig) -> Self {
        Self { pristine: live.clone(), opt: AdamW::new(opt_cfg), step: 0 }
    }

    pub fn pristine(&self) -> &ParamTree {
        &self.pristine
    }

    /// Replace θ* (momentum-buffer commit).
    pub fn set_pristine(&mut self, tree: ParamTree) {
        self.pristine = tree;
    }

    pub fn optimizer(&mut self) -> &mut AdamW {
        &mut self.opt
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn advance(&mut self) {
        self.step += 1;
    }

    /// Restore `live` to θ* bit-exactly; zero optimizer state and step index.
    /// θ* itself is untouched. Idempotent.
    pub fn reset(&mut self, live: &mut ParamTree) -> Result<()> {
        live.reset_from(&self.pristine)?;
        self.opt.reset();
        self.step = 0;
        Ok(())
    }
}

/// Exponentially averaged shadow ξ of adapted parameters.
///
/// After each episode the adapted weights θ̄ are folded in with
/// `ξ ← m·ξ + (1−m)·θ̄`; every `interval` samples the shadow is committed as
/// the new pristine snapshot. The recurrence runs on trainable blocks only, so
/// frozen blocks stay bit-identical to the original checkpoint through any
/// number of commits.
#[derive(Debug, Clone)]
pub struct MomentumBuffer {
    shadow: ParamTree,
    m: f64,
    interval: usize,
    samples_seen: usize,
}

impl MomentumBuffer {
    pub fn new(pristine: &ParamTree, m: f64, interval: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&m) {
            return Err(Error::invalid("momentum coefficient must be in [0, 1)"));
        }
        if interval == 0 {
            return Err(Error::invalid("momentum interval must be at least 1"));
        }
        Ok(Self { shadow: pristine.clone(), m, interval, samples_seen: 0 })
    }

    pub fn shadow(&self) -> &ParamTree {
        &self.shadow
    }

    pub fn samples_seen(&self) -> usize {
        self.samples_seen
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    /// Fold one adapted tree into the shadow. Returns the new θ* when this
    /// observation lands on the commit boundary.
    pub fn observe(&mut self, theta_bar: &ParamTree) -> Result<Option<ParamTree>> {
        if !self.shadow.congruent(theta_bar) {
            return Err(Error::invalid("momentum_observe: tree not congruent with shadow"));
        }
        self.shadow
            .linear_combine_trainable(self.m, 1.0 - self.m, theta_bar)?;
        self.samples_seen += 1;
        if self.samples_seen == self.interval {
            self.samples_seen = 0;
            Ok(Some(self.shadow.clone()))
        } else {
            Ok(None)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_diff, grad, max_relative_error, TreeVars};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_block(values: Vec<f64>, trainable: bool) -> ParamTree {
        let n = values.len();
        let mut t = ParamTree::new();
        t.insert("theta", Tensor2::from_vec(1, n, values).unwrap(), trainable)
            .unwrap();
        t
    }

    #[test]
    fn reinforce_zero_rewards_zero_loss_and_grad() {
        let params = single_block(vec![0.2, -0.4, 1.0], true);
        let loss_fn = |tape: &mut Tape, vars: &TreeVars| {
            let lp = tape.log_softmax(vars.get("theta"))?;
            let l0 = tape.pick(lp, 0)?;
            let l1 = tape.pick(lp, 1)?;
            reinforce_loss(tape, &[l0, l1], &[0.0, 0.0])
        };
        let (v, g) = grad(loss_fn, &params).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.max_abs() == 0.0);
    }

    #[test]
    fn reinforce_opposite_rewards_cancel_on_identical_terms() {
        let params = single_block(vec![0.2, -0.4], true);
        let loss_fn = |tape: &mut Tape, vars: &TreeVars| {
            let lp = tape.log_softmax(vars.get("theta"))?;
            let l = tape.pick(lp, 0)?;
            reinforce_loss(tape, &[l, l], &[0.7, -0.7])
        };
        let (v, g) = grad(loss_fn, &params).unwrap();
        assert!(v.abs() < 1e-15);
        assert!(g.max_abs() < 1e-15);
    }

    #[test]
    fn reinforce_length_mismatch_is_error() {
        let params = single_block(vec![0.0, 0.0], true);
        let r = grad(
            |tape: &mut Tape, vars: &TreeVars| {
                let lp = tape.log_softmax(vars.get("theta"))?;
                let l0 = tape.pick(lp, 0)?;
                reinforce_loss(tape, &[l0], &[1.0, 2.0])
            },
            &params,
        );
        assert!(r.is_err());
    }

    #[test]
    fn reinforce_gradient_matches_finite_difference() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = ParamTree::new();
            params
                .insert("w", Tensor2::gaussian(3, 5, 0.8, &mut rng), true)
                .unwrap();
            let x = Tensor2::gaussian(1, 3, 1.0, &mut rng);
            let rewards = [0.35, -0.1, -0.25];
            let loss_fn = |tape: &mut Tape, vars: &TreeVars| {
                let xv = tape.constant(x.clone());
                let logits = tape.matmul(xv, vars.get("w"))?;
                let lp = tape.log_softmax(logits)?;
                let picks: Vec<Val> = (0..3)
                    .map(|i| tape.pick(lp, i))
                    .collect::<Result<_>>()?;
                reinforce_loss(tape, &picks, &rewards)
            };
            let (_, g) = grad(loss_fn, &params).unwrap();
            let fd = finite_diff(loss_fn, &params, 1e-4).unwrap();
            assert!(max_relative_error(&g, &fd) <= 1e-4, "seed {seed}");
        }
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let mut params = single_block(vec![1.5, -2.0], true);
        let before = params.clone();
        let grads = GradTree::zeros_like(&params);
        let mut opt = AdamW::new(OptimizerConfig { lr: 0.1, weight_decay: 0.0 });
        opt.step(&mut params, &grads).unwrap();
        assert!(params.bit_eq(&before));
    }

    #[test]
    fn adamw_converges_on_scalar_quadratic() {
        // minimize θ² from θ=3 with lr 0.1: well under 200 steps to |θ| < 1e-2
        let mut params = single_block(vec![3.0], true);
        let mut opt = AdamW::new(OptimizerConfig { lr: 0.1, weight_decay: 0.0 });
        let loss_fn = |tape: &mut Tape, vars: &TreeVars| {
            let th = vars.get("theta");
            let sq = tape.mul_elem(th, th)?;
            tape.sum_all(sq)
        };
        let mut converged_at = None;
        for step in 0..200 {
            let (_, g) = grad(loss_fn, &params).unwrap();
            opt.step(&mut params, &g).unwrap();
            if params.get("theta").unwrap().data()[0].abs() < 1e-2 {
                converged_at = Some(step);
                break;
            }
        }
        assert!(converged_at.is_some(), "did not converge in 200 steps");
    }

    #[test]
    fn adamw_never_touches_frozen_blocks() {
        let mut params = single_block(vec![1.0, 2.0], true);
        params
            .insert("frozen", Tensor2::filled(1, 2, 5.0), false)
            .unwrap();
        let frozen_before = params.get("frozen").unwrap().clone();
        let mut grads = GradTree::zeros_like(&params);
        grads.get_mut("theta").unwrap().data_mut()[0] = 1.0;
        grads.get_mut("frozen").unwrap().data_mut()[0] = 100.0;
        let mut opt = AdamW::new(OptimizerConfig { lr: 0.5, weight_decay: 0.1 });
        opt.step(&mut params, &grads).unwrap();
        assert!(params.get("frozen").unwrap().bit_eq(&frozen_before));
        assert_ne!(params.get("theta").unwrap().data()[0], 1.0);
    }

    #[test]
    fn adamw_rejects_non_finite_grad_naming_block() {
        let mut params = single_block(vec![1.0], true);
        let mut grads = GradTree::zeros_like(&params);
        grads.get_mut("theta").unwrap().data_mut()[0] = f64::NAN;
        let mut opt = AdamW::new(OptimizerConfig { lr: 0.1, weight_decay: 0.0 });
        let err = opt.step(&mut params, &grads).unwrap_err();
        assert!(err.to_string().contains("theta"));
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // zero gradient, nonzero decay: θ ← θ − lr·wd·θ exactly
        let mut params = single_block(vec![2.0], true);
        let grads = GradTree::zeros_like(&params);
        let mut opt = AdamW::new(OptimizerConfig { lr: 0.1, weight_decay: 0.5 });
        opt.step(&mut params, &grads).unwrap();
        let got = params.get("theta").unwrap().data()[0];
        assert!((got - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn episodic_reset_restores_bytes_and_is_idempotent() {
        let mut live = single_block(vec![1.0, 2.0, 3.0], true);
        let mut ep = EpisodeState::begin(&live, OptimizerConfig { lr: 0.1, weight_decay: 0.0 });
        let snapshot = ep.pristine().clone();
        live.get_mut("theta").unwrap().data_mut()[1] = -9.0;
        ep.advance();
        ep.reset(&mut live).unwrap();
        assert!(live.bit_eq(&snapshot));
        assert_eq!(ep.step_index(), 0);
        assert_eq!(ep.optimizer().step_count(), 0);
        ep.reset(&mut live).unwrap();
        assert!(live.bit_eq(&snapshot));
        assert!(ep.pristine().bit_eq(&snapshot));
    }

    #[test]
    fn momentum_single_step_and_m_zero() {
        let zero = single_block(vec![0.0, 0.0], true);
        let ones = single_block(vec![1.0, 1.0], true);
        let mut buf = MomentumBuffer::new(&zero, 0.9998, 64).unwrap();
        buf.observe(&ones).unwrap();
        for &x in buf.shadow().get("theta").unwrap().data() {
            assert!((x - 0.0002).abs() < 1e-12);
        }
        let mut buf0 = MomentumBuffer::new(&zero, 0.0, 64).unwrap();
        buf0.observe(&ones).unwrap();
        assert_eq!(buf0.shadow().get("theta").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn momentum_two_steps_closed_form() {
        let zero = single_block(vec![0.0], true);
        let ones = single_block(vec![1.0], true);
        let mut buf = MomentumBuffer::new(&zero, 0.5, 64).unwrap();
        buf.observe(&ones).unwrap();
        buf.observe(&ones).unwrap();
        assert!((buf.shadow().get("theta").unwrap().data()[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn momentum_commits_on_interval() {
        let zero = single_block(vec![0.0], true);
        let ones = single_block(vec![1.0], true);
        let mut buf = MomentumBuffer::new(&zero, 0.5, 3).unwrap();
        assert!(buf.observe(&ones).unwrap().is_none());
        assert!(buf.observe(&ones).unwrap().is_none());
        let committed = buf.observe(&ones).unwrap().expect("commit at interval");
        assert!((committed.get("theta").unwrap().data()[0] - 0.875).abs() < 1e-15);
        assert_eq!(buf.samples_seen(), 0);
    }

    #[test]
    fn momentum_shape_mismatch_is_error() {
        let zero = single_block(vec![0.0], true);
        let other = single_block(vec![0.0, 1.0], true);
        let mut buf = MomentumBuffer::new(&zero, 0.5, 3).unwrap();
        assert!(buf.observe(&other).is_err());
    }

    #[test]
    fn entropy_min_loss_values() {
        let params = single_block(vec![0.0], true);
        // single one-hot view → 0
        let v = crate::numcore::eval(
            |tape: &mut Tape, _vars: &TreeVars| {
                let p = tape.constant_row(&[1.0, 0.0, 0.0])?;
                entropy_min_loss(tape, &[p])
            },
            &params,
        )
        .unwrap();
        assert_eq!(v, 0.0);
        // uniform views → ln C
        let v = crate::numcore::eval(
            |tape: &mut Tape, _vars: &TreeVars| {
                let p1 = tape.constant_row(&[0.25; 4])?;
                let p2 = tape.constant_row(&[0.25; 4])?;
                entropy_min_loss(tape, &[p1, p2])
            },
            &params,
        )
        .unwrap();
        assert!((v - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_min_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamTree::new();
        params
            .insert("w", Tensor2::gaussian(2, 4, 0.6, &mut rng), true)
            .unwrap();
        let x1 = Tensor2::gaussian(1, 2, 1.0, &mut rng);
        let x2 = Tensor2::gaussian(1, 2, 1.0, &mut rng);
        let loss_fn = |tape: &mut Tape, vars: &TreeVars| {
            let mut probs = Vec::new();
            for x in [&x1, &x2] {
                let xv = tape.constant(x.clone());
                let logits = tape.matmul(xv, vars.get("w"))?;
                probs.push(tape.softmax(logits)?);
            }
            entropy_min_loss(tape, &probs)
        };
        let (_, g) = grad(loss_fn, &params).unwrap();
        let fd = finite_diff(loss_fn, &params, 1e-5).unwrap();
        assert!(max_relative_error(&g, &fd) <= 1e-4);
    }

    #[test]
    fn pseudo_label_loss_values_and_grad() {
        let params = single_block(vec![8.0, 0.0, 0.0], true);
        let loss_fn = |tape: &mut Tape, vars: &TreeVars| {
            let lp = tape.log_softmax(vars.get("theta"))?;
            pseudo_label_loss(tape, lp, 0)
        };
        let (v, _) = grad(loss_fn, &params).unwrap();
        assert!(v < 1e-3, "certain student should have near-zero loss, got {v}");

        let uniform = single_block(vec![0.0; 5], true);
        let v = crate::numcore::eval(
            |tape: &mut Tape, vars: &TreeVars| {
                let lp = tape.log_softmax(vars.get("theta"))?;
                pseudo_label_loss(tape, lp, 3)
            },
            &uniform,
        )
        .unwrap();
        assert!((v - 5.0f64.ln()).abs() < 1e-12);

        let mid = single_block(vec![0.4, -0.3, 1.1], true);
        let loss_fn = |tape: &mut Tape, vars: &TreeVars| {
            let lp = tape.log_softmax(vars.get("theta"))?;
            pseudo_label_loss(tape, lp, 1)
        };
        let (_, g) = grad(loss_fn, &mid).unwrap();
        let fd = finite_diff(loss_fn, &mid, 1e-5).unwrap();
        assert!(max_relative_error(&g, &fd) <= 1e-4);
    }

    #[test]
    fn kd_loss_zero_on_identical_logits_and_nonnegative() {
        let logits = vec![0.7, -0.2, 1.5];
        let params = single_block(logits.clone(), true);
        let teacher = logits.clone();
        let v = crate::numcore::eval(
            |tape: &mut Tape, vars: &TreeVars| kd_loss(tape, vars.get("theta"), &teacher, 2.0),
            &params,
        )
        .unwrap();
        assert!(v.abs() < 1e-12);

        let other_teacher = vec![1.0, 1.0, -2.0];
        let v = crate::numcore::eval(
            |tape: &mut Tape, vars: &TreeVars| {
                kd_loss(tape, vars.get("theta"), &other_teacher, 2.0)
            },
            &params,
        )
        .unwrap();
        assert!(v >= 0.0);
    }

    #[test]
    fn kd_loss_rejects_bad_temperature_and_checks_grad() {
        let params = single_block(vec![0.3, -0.5, 0.2], true);
        let teacher = vec![1.0, 0.5, -0.5];
        let r = crate::numcore::eval(
            |tape: &mut Tape, vars: &TreeVars| kd_loss(tape, vars.get("theta"), &teacher, 0.0),
            &params,
        );
        assert!(r.is_err());

        let loss_fn =
            |tape: &mut Tape, vars: &TreeVars| kd_loss(tape, vars.get("theta"), &teacher, 3.0);
        let (_, g) = grad(loss_fn, &params).unwrap();
        let fd = finite_diff(loss_fn, &params, 1e-5).unwrap();
        assert!(max_relative_error(&g, &fd) <= 1e-4);
    }
}
