//! Toy dual encoder: image branch, text branch with a learnable prompt, and
//! desk-scale contrastive pretraining.
//!
//! The encoder works directly on `d_in`-dimensional "image" vectors — there is
//! no pixel rendering, the adaptation mechanism operates entirely in embedding
//! space. The text side is a token-embedding table pooled with a learnable
//! prompt prefix and projected to the shared space: class names are frozen
//! rows of `class_table` (the mean of their attribute token embeddings), and
//! arbitrary attribute bags can be encoded for captions and retrieval queries.
//! Both the adaptable student and the frozen scorer model use this type; the
//! scorer is simply pretrained wider and on more data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapt::{AdamW, OptimizerConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numcore::{self, grad, ParamTree, Tape, Tensor2, TreeVars, Val};

pub const BLOCK_IMAGE_PROJ: &str = "image_proj";
pub const BLOCK_TEXT_PROJ: &str = "text_proj";
pub const BLOCK_PROMPT: &str = "prompt";
pub const BLOCK_CLASS_TABLE: &str = "class_table";
pub const BLOCK_TOKEN_TABLE: &str = "token_table";
pub const BLOCK_LOGIT_SCALE: &str = "logit_scale";

/// Structural hyperparameters of a [`DualEncoder`].
#[derive(Debug, Clone)]
pub struct EncoderArch {
    pub d_in: usize,
    pub d_tok: usize,
    pub d_emb: usize,
    pub prompt_len: usize,
    /// Multiplier applied to cosine similarities to form logits. The usual
    /// inference convention is 100; exposed rather than hard-coded.
    pub logit_scale: f64,
}

impl EncoderArch {
    pub fn new(d_in: usize, d_tok: usize, d_emb: usize) -> Self {
        Self { d_in, d_tok, d_emb, prompt_len: 4, logit_scale: 100.0 }
    }
}

#[derive(Debug, Clone)]
pub struct DualEncoder {
    params: ParamTree,
}

impl DualEncoder {
    /// Random projection/prompt initialization around a shared frozen token
    /// table (`attr_vocab × d_tok`). `class_attrs[c]` lists the attribute
    /// token ids of class `c`; the frozen class table is the mean of those
    /// token rows.
    pub fn init(
        arch: &EncoderArch,
        class_attrs: &[Vec<usize>],
        token_table: Tensor2,
        seed: u64,
    ) -> Result<Self> {
        if class_attrs.is_empty() {
            return Err(Error::invalid("at least one class required"));
        }
        if token_table.cols() != arch.d_tok {
            return Err(Error::ShapeMismatch {
                context: "DualEncoder::init",
                expected: format!("token table width {}", arch.d_tok),
                got: format!("{}", token_table.cols()),
            });
        }
        let attr_vocab = token_table.rows();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_tok = arch.d_tok;
        let tok_std = 1.0 / (d_tok as f64).sqrt();

        let mut class_rows = Vec::with_capacity(class_attrs.len() * d_tok);
        for attrs in class_attrs {
            if attrs.is_empty() {
                return Err(Error::invalid("class with empty attribute set"));
            }
            let mut row = vec![0.0; d_tok];
            for &a in attrs {
                if a >= attr_vocab {
                    return Err(Error::IndexOutOfRange {
                        context: "class attribute id",
                        index: a,
                        len: attr_vocab,
                    });
                }
                for (r, t) in row.iter_mut().zip(token_table.row(a)) {
                    *r += t;
                }
            }
            for r in &mut row {
                *r /= attrs.len() as f64;
            }
            class_rows.extend(row);
        }
        let class_table = Tensor2::from_vec(class_attrs.len(), d_tok, class_rows)?;

        let prompt = Tensor2::gaussian(arch.prompt_len, d_tok, tok_std, &mut rng);
        let image_proj =
            Tensor2::gaussian(arch.d_in, arch.d_emb, 1.0 / (arch.d_in as f64).sqrt(), &mut rng);
        let text_proj = Tensor2::gaussian(d_tok, arch.d_emb, tok_std, &mut rng);

        Self::from_parts(image_proj, text_proj, prompt, class_table, token_table, arch.logit_scale)
    }

    pub fn from_parts(
        image_proj: Tensor2,
        text_proj: Tensor2,
        prompt: Tensor2,
        class_table: Tensor2,
        token_table: Tensor2,
        logit_scale: f64,
    ) -> Result<Self> {
        if logit_scale <= 0.0 {
            return Err(Error::invalid("logit_scale must be positive"));
        }
        if image_proj.cols() != text_proj.cols() {
            return Err(Error::ShapeMismatch {
                context: "DualEncoder::from_parts",
                expected: format!("shared d_emb {}", image_proj.cols()),
                got: format!("text_proj cols {}", text_proj.cols()),
            });
        }
        for (name, t) in [("prompt", &prompt), ("class_table", &class_table), ("token_table", &token_table)] {
            if t.cols() != text_proj.rows() {
                return Err(Error::ShapeMismatch {
                    context: "DualEncoder::from_parts",
                    expected: format!("{name} cols == d_tok {}", text_proj.rows()),
                    got: format!("{}", t.cols()),
                });
            }
        }
        let mut params = ParamTree::new();
        params.insert(BLOCK_IMAGE_PROJ, image_proj, true)?;
        params.insert(BLOCK_TEXT_PROJ, text_proj, true)?;
        params.insert(BLOCK_PROMPT, prompt, true)?;
        params.insert(BLOCK_CLASS_TABLE, class_table, false)?;
        params.insert(BLOCK_TOKEN_TABLE, token_table, false)?;
        params.insert(BLOCK_LOGIT_SCALE, Tensor2::scalar(logit_scale), false)?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &ParamTree {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamTree {
        &mut self.params
    }

    pub fn d_in(&self) -> usize {
        self.params.get(BLOCK_IMAGE_PROJ).expect("block").rows()
    }

    pub fn d_emb(&self) -> usize {
        self.params.get(BLOCK_IMAGE_PROJ).expect("block").cols()
    }

    pub fn d_tok(&self) -> usize {
        self.params.get(BLOCK_TEXT_PROJ).expect("block").rows()
    }

    pub fn prompt_len(&self) -> usize {
        self.params.get(BLOCK_PROMPT).expect("block").rows()
    }

    pub fn n_classes(&self) -> usize {
        self.params.get(BLOCK_CLASS_TABLE).expect("block").rows()
    }

    pub fn attr_vocab(&self) -> usize {
        self.params.get(BLOCK_TOKEN_TABLE).expect("block").rows()
    }

    pub fn logit_scale(&self) -> f64 {
        self.params.get(BLOCK_LOGIT_SCALE).expect("block").data()[0]
    }

    /// Unit-norm image embedding `g(v)`.
    pub fn encode_image(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.d_in() {
            return Err(Error::ShapeMismatch {
                context: "encode_image",
                expected: format!("d_in {}", self.d_in()),
                got: format!("{}", v.len()),
            });
        }
        let row = Tensor2::row_vector(v.to_vec())?;
        let proj = row.matmul(self.params.require(BLOCK_IMAGE_PROJ)?)?;
        numcore::l2_normalize(proj.data())
    }

    /// Unit-norm embedding of `[prompt; class tokens]` through the text branch.
    pub fn encode_class_text(&self, class_id: usize) -> Result<Vec<f64>> {
        let table = self.params.require(BLOCK_CLASS_TABLE)?;
        if class_id >= table.rows() {
            return Err(Error::IndexOutOfRange {
                context: "encode_class_text",
                index: class_id,
                len: table.rows(),
            });
        }
        self.encode_pooled_token(table.row(class_id))
    }

    /// Unit-norm embedding of a bag of attribute tokens (caption words,
    /// retrieval query texts). The bag enters as the mean of its token rows,
    /// exactly how class rows are built, so a caption naming precisely the
    /// attributes of a class embeds onto that class text.
    pub fn encode_token_set(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let table = self.params.require(BLOCK_TOKEN_TABLE)?;
        let d_tok = self.d_tok();
        let mut row = vec![0.0; d_tok];
        for &id in ids {
            if id >= table.rows() {
                return Err(Error::IndexOutOfRange {
                    context: "encode_token_set",
                    index: id,
                    len: table.rows(),
                });
            }
            for (r, t) in row.iter_mut().zip(table.row(id)) {
                *r += t;
            }
        }
        if !ids.is_empty() {
            for r in &mut row {
                *r /= ids.len() as f64;
            }
        }
        self.encode_pooled_token(&row)
    }

    fn encode_pooled_token(&self, tok_row: &[f64]) -> Result<Vec<f64>> {
        let prompt = self.params.require(BLOCK_PROMPT)?;
        let lp = prompt.rows();
        let mut pooled = vec![0.0; self.d_tok()];
        for r in 0..lp {
            for (p, x) in pooled.iter_mut().zip(prompt.row(r)) {
                *p += x;
            }
        }
        for (p, t) in pooled.iter_mut().zip(tok_row) {
            *p += t;
        }
        let denom = (lp + 1) as f64;
        for p in &mut pooled {
            *p /= denom;
        }
        let proj = Tensor2::row_vector(pooled)?.matmul(self.params.require(BLOCK_TEXT_PROJ)?)?;
        numcore::l2_normalize(proj.data())
    }

    /// `logit_i = logit_scale · cos(h(t_i), g(v))` over the given class set.
    pub fn class_logits(&self, v: &[f64], class_set: &[usize]) -> Result<Vec<f64>> {
        if class_set.is_empty() {
            return Err(Error::EmptyInput("class_logits"));
        }
        let u = self.encode_image(v)?;
        let scale = self.logit_scale();
        class_set
            .iter()
            .map(|&c| {
                let h = self.encode_class_text(c)?;
                Ok(scale * numcore::dot(&u, &h))
            })
            .collect()
    }

    pub fn class_logits_all(&self, v: &[f64]) -> Result<Vec<f64>> {
        let set: Vec<usize> = (0..self.n_classes()).collect();
        self.class_logits(v, &set)
    }

    /// Zero-shot argmax prediction over all classes.
    pub fn predict(&self, v: &[f64]) -> Result<usize> {
        numcore::argmax(&self.class_logits_all(v)?)
    }

    // ── tape graph builders ─────────────────────────────────────────
    //
    // Same math as the plain methods, expressed on a tape so gradients reach
    // whichever blocks are currently trainable. Callers register this
    // encoder's tree first: `let vars = tape.register(model.params())`.

    /// `1×d_emb` unit image embedding on the tape.
    pub fn tape_image_embed(&self, tape: &mut Tape, vars: &TreeVars, v: &[f64]) -> Result<Val> {
        let row = tape.constant_row(v)?;
        let proj = tape.matmul(row, vars.get(BLOCK_IMAGE_PROJ))?;
        tape.normalize_rows(proj)
    }

    /// `C×d_emb` unit class-text embeddings on the tape.
    pub fn tape_class_embeds(&self, tape: &mut Tape, vars: &TreeVars) -> Result<Val> {
        let lp = self.prompt_len() as f64;
        let sp = tape.mean_rows(vars.get(BLOCK_PROMPT))?;
        let sp_scaled = tape.scale(sp, lp / (lp + 1.0))?;
        let b = tape.broadcast_rows(sp_scaled, self.n_classes())?;
        let ct = tape.scale(vars.get(BLOCK_CLASS_TABLE), 1.0 / (lp + 1.0))?;
        let pooled = tape.add(b, ct)?;
        let t = tape.matmul(pooled, vars.get(BLOCK_TEXT_PROJ))?;
        tape.normalize_rows(t)
    }

    /// `1×d_emb` unit embedding of a token bag on the tape.
    pub fn tape_token_set_embed(
        &self,
        tape: &mut Tape,
        vars: &TreeVars,
        ids: &[usize],
    ) -> Result<Val> {
        let table = self.params.require(BLOCK_TOKEN_TABLE)?;
        let mut row = vec![0.0; self.d_tok()];
        for &id in ids {
            if id >= table.rows() {
                return Err(Error::IndexOutOfRange {
                    context: "tape_token_set_embed",
                    index: id,
                    len: table.rows(),
                });
            }
            for (r, t) in row.iter_mut().zip(table.row(id)) {
                *r += t;
            }
        }
        if !ids.is_empty() {
            for r in &mut row {
                *r /= ids.len() as f64;
            }
        }
        let lp = self.prompt_len() as f64;
        let sp = tape.mean_rows(vars.get(BLOCK_PROMPT))?;
        let sp_scaled = tape.scale(sp, lp / (lp + 1.0))?;
        let tok = tape.constant_row(&row)?;
        let tok_scaled = tape.scale(tok, 1.0 / (lp + 1.0))?;
        let pooled = tape.add(sp_scaled, tok_scaled)?;
        let t = tape.matmul(pooled, vars.get(BLOCK_TEXT_PROJ))?;
        tape.normalize_rows(t)
    }

    /// `1×C` class logits from an image embedding and a class-embedding table
    /// already on the tape.
    pub fn tape_logits_from(&self, tape: &mut Tape, image: Val, class_embeds: Val) -> Result<Val> {
        let sims = tape.matmul_tb(image, class_embeds)?;
        tape.scale(sims, self.logit_scale())
    }

    // ── checkpointing ───────────────────────────────────────────────

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(self.params.clone());
        ckpt.set_meta("kind", "dual_encoder");
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta_str("kind")? != "dual_encoder" {
            return Err(Error::CheckpointFormat(format!(
                "expected kind dual_encoder, got {}",
                ckpt.meta_str("kind")?
            )));
        }
        for name in [
            BLOCK_IMAGE_PROJ,
            BLOCK_TEXT_PROJ,
            BLOCK_PROMPT,
            BLOCK_CLASS_TABLE,
            BLOCK_TOKEN_TABLE,
            BLOCK_LOGIT_SCALE,
        ] {
            if ckpt.params.get(name).is_none() {
                return Err(Error::CheckpointFormat(format!("missing block `{name}`")));
            }
        }
        Ok(Self { params: ckpt.params.clone() })
    }
}

/// Paired training data: raw image vectors with class labels.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct PairSet {
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn push(&mut self, image: Vec<f64>, label: usize) {
        self.images.push(image);
        self.labels.push(label);
    }
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub arch: EncoderArch,
    pub classes: usize,
    pub pairs_per_class: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Softmax temperature of the symmetric InfoNCE loss.
    pub temperature: f64,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn new(arch: EncoderArch, classes: usize, seed: u64) -> Self {
        Self {
            arch,
            classes,
            pairs_per_class: 32,
            epochs: 20,
            lr: 3e-3,
            temperature: 0.1,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: DualEncoder,
    /// Mean in-batch loss per epoch (empty when `epochs == 0`).
    pub epoch_losses: Vec<f64>,
}

/// Symmetric in-batch InfoNCE pretraining.
///
/// Each round builds a batch of one sample per class (clean diagonal targets),
/// scores images against all class texts in both directions, and averages the
/// two cross-entropies. `epochs == 0` returns the freshly initialized model.
pub fn pretrain_contrastive(
    cfg: &PretrainConfig,
    data: &PairSet,
    class_attrs: &[Vec<usize>],
    token_table: Tensor2,
) -> Result<Pretrained> {
    if cfg.classes < 2 {
        return Err(Error::invalid("pretraining needs at least 2 classes"));
    }
    if class_attrs.len() != cfg.classes {
        return Err(Error::invalid("class_attrs length must equal cfg.classes"));
    }
    let mut model = DualEncoder::init(&cfg.arch, class_attrs, token_table, cfg.seed)?;
    model.params_mut().set_trainable_exactly(&[
        BLOCK_IMAGE_PROJ,
        BLOCK_TEXT_PROJ,
        BLOCK_PROMPT,
    ])?;

    // per-class sample indices
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); cfg.classes];
    for (i, &label) in data.labels.iter().enumerate() {
        if label >= cfg.classes {
            return Err(Error::IndexOutOfRange {
                context: "pretrain label",
                index: label,
                len: cfg.classes,
            });
        }
        by_class[label].push(i);
    }
    let rounds = by_class.iter().map(Vec::len).min().unwrap_or(0);
    if rounds == 0 {
        return Err(Error::invalid("every class needs at least one training pair"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e3779b97f4a7c15));
    let mut opt = AdamW::new(OptimizerConfig { lr: cfg.lr, weight_decay: 0.0 });
    let c = cfg.classes;
    let d_in = cfg.arch.d_in;
    let inv_temp = 1.0 / cfg.temperature;

    // constant C×C identity mask for picking the diagonal of log-softmax rows
    let mut eye = Tensor2::zeros(c, c);
    for i in 0..c {
        eye.set(i, i, 1.0);
    }

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        // fresh per-class order each epoch
        let mut order: Vec<Vec<usize>> = by_class
            .iter()
            .map(|idxs| {
                let mut v = idxs.clone();
                shuffle(&mut v, &mut rng);
                v
            })
            .collect();
        let mut epoch_loss = 0.0;
        for round in 0..rounds {
            let mut batch = Vec::with_capacity(c * d_in);
            for class_order in order.iter_mut() {
                let idx = class_order[round];
                batch.extend_from_slice(&data.images[idx]);
            }
            let batch_t = Tensor2::from_vec(c, d_in, batch)?;

            let model_ref = &model;
            let eye_ref = &eye;
            let batch_ref = &batch_t;
            let loss_fn = move |tape: &mut Tape, vars: &TreeVars| {
                let imgs = tape.constant(batch_ref.clone());
                let iv = tape.matmul(imgs, vars.get(BLOCK_IMAGE_PROJ))?;
                let iu = tape.normalize_rows(iv)?;
                let h = model_ref.tape_class_embeds(tape, vars)?;
                let logits_i2t = tape.matmul_tb(iu, h)?;
                let logits_i2t = tape.scale(logits_i2t, inv_temp)?;
                let logits_t2i = tape.matmul_tb(h, iu)?;
                let logits_t2i = tape.scale(logits_t2i, inv_temp)?;
                let mask = tape.constant(eye_ref.clone());
                let ls1 = tape.log_softmax(logits_i2t)?;
                let ls2 = tape.log_softmax(logits_t2i)?;
                let d1 = tape.mul_elem(ls1, mask)?;
                let mask2 = tape.constant(eye_ref.clone());
                let d2 = tape.mul_elem(ls2, mask2)?;
                let s1 = tape.sum_all(d1)?;
                let s2 = tape.sum_all(d2)?;
                let tot = tape.add(s1, s2)?;
                tape.scale(tot, -0.5 / c as f64)
            };

            let (loss, grads) = grad(loss_fn, model.params()).map_err(|e| match e {
                Error::NonFinite { .. } => Error::PretrainDiverged { epoch },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::PretrainDiverged { epoch });
            }
            epoch_loss += loss;
            opt.step(model.params_mut(), &grads)?;
        }
        epoch_losses.push(epoch_loss / rounds as f64);
    }
    Ok(Pretrained { model, epoch_losses })
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

/// Convenience constructor for a shared token table when no benchmark is in
/// play (tests, standalone examples): i.i.d. Gaussian rows scaled to roughly
/// unit norm.
pub fn random_token_table(vocab: usize, d_tok: usize, seed: u64) -> Tensor2 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor2::gaussian(vocab, d_tok, 1.0 / (d_tok as f64).sqrt(), &mut rng)
}

/// Indices of the `k` highest scores, descending, ties broken by lower index.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::invalid(format!(
            "top_k: k={k} out of range for {} scores",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}
