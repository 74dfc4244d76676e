//! Toy autoregressive captioner: a learnable projector in front of a frozen
//! single-layer recurrent token predictor.
//!
//! Captions are sequences over a synthetic vocabulary whose words map 1:1 to
//! benchmark attribute ids (`w0, w1, ...` plus BOS/EOS), so a caption's
//! correctness against an image is computable. The image embedding is
//! projected into the decoder's hidden space (that projection is the only
//! block updated at adaptation time); each step feeds the previous token's
//! embedding through the recurrence
//!
//! ```text
//! h_t = normalize(h_{t-1} · W_rec + emb(tok_{t-1}) · W_in)
//! logits_t = h_t · W_out + b_out
//! ```
//!
//! and next-token probabilities are softmax over the whole vocabulary.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapt::{AdamW, OptimizerConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numcore::{self, grad, ParamTree, Tape, Tensor2, TreeVars, Val};

pub const BLOCK_PROJECTOR: &str = "projector";
pub const BLOCK_TOK_EMB: &str = "tok_emb";
pub const BLOCK_W_REC: &str = "w_rec";
pub const BLOCK_W_IN: &str = "w_in";
pub const BLOCK_W_OUT: &str = "w_out";
pub const BLOCK_OUT_BIAS: &str = "out_bias";

/// Decoder blocks, frozen in every adaptation mode.
pub const DECODER_BLOCKS: [&str; 5] =
    [BLOCK_TOK_EMB, BLOCK_W_REC, BLOCK_W_IN, BLOCK_W_OUT, BLOCK_OUT_BIAS];

/// One beam-search hypothesis.
#[derive(Debug, Clone)]
pub struct Beam {
    pub tokens: Vec<usize>,
    /// Exact sum of per-step log-softmax terms.
    pub logprob: f64,
    /// True when the sequence ends in EOS (rather than hitting max length).
    pub finished: bool,
}

#[derive(Debug, Clone)]
pub struct ToyCaptioner {
    params: ParamTree,
    max_len: usize,
}

impl ToyCaptioner {
    pub fn init(
        d_emb: usize,
        d_dec: usize,
        n_words: usize,
        max_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if max_len < 2 {
            return Err(Error::invalid("max_len must be at least 2 (BOS + EOS)"));
        }
        if n_words == 0 {
            return Err(Error::invalid("vocabulary needs at least one word"));
        }
        let vocab = n_words + 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dd = d_dec as f64;
        let projector = Tensor2::gaussian(d_emb, d_dec, 1.0 / (d_emb as f64).sqrt(), &mut rng);
        let tok_emb = Tensor2::gaussian(vocab, d_dec, 1.0 / dd.sqrt(), &mut rng);
        // small recurrent weights keep the pre-normalization state bounded
        let w_rec = Tensor2::gaussian(d_dec, d_dec, 0.5 / dd.sqrt(), &mut rng);
        let w_in = Tensor2::gaussian(d_dec, d_dec, 1.0 / dd.sqrt(), &mut rng);
        let w_out = Tensor2::gaussian(d_dec, vocab, 1.0, &mut rng);
        let out_bias = Tensor2::zeros(1, vocab);
        Self::from_parts(projector, tok_emb, w_rec, w_in, w_out, out_bias, max_len)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        projector: Tensor2,
        tok_emb: Tensor2,
        w_rec: Tensor2,
        w_in: Tensor2,
        w_out: Tensor2,
        out_bias: Tensor2,
        max_len: usize,
    ) -> Result<Self> {
        if max_len < 2 {
            return Err(Error::invalid("max_len must be at least 2"));
        }
        if tok_emb.rows() < 3 {
            return Err(Error::invalid("vocabulary must contain a word plus BOS/EOS"));
        }
        let d_dec = projector.cols();
        let vocab = tok_emb.rows();
        if tok_emb.cols() != d_dec
            || w_rec.shape() != (d_dec, d_dec)
            || w_in.shape() != (d_dec, d_dec)
            || w_out.shape() != (d_dec, vocab)
            || out_bias.shape() != (1, vocab)
        {
            return Err(Error::ShapeMismatch {
                context: "ToyCaptioner::from_parts",
                expected: format!("decoder blocks consistent with d_dec={d_dec}, vocab={vocab}"),
                got: "inconsistent block shapes".into(),
            });
        }
        let mut params = ParamTree::new();
        params.insert(BLOCK_PROJECTOR, projector, true)?;
        params.insert(BLOCK_TOK_EMB, tok_emb, false)?;
        params.insert(BLOCK_W_REC, w_rec, false)?;
        params.insert(BLOCK_W_IN, w_in, false)?;
        params.insert(BLOCK_W_OUT, w_out, false)?;
        params.insert(BLOCK_OUT_BIAS, out_bias, false)?;
        Ok(Self { params, max_len })
    }

    pub fn params(&self) -> &ParamTree {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamTree {
        &mut self.params
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn d_emb(&self) -> usize {
        self.params.get(BLOCK_PROJECTOR).expect("block").rows()
    }

    pub fn d_dec(&self) -> usize {
        self.params.get(BLOCK_PROJECTOR).expect("block").cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.params.get(BLOCK_TOK_EMB).expect("block").rows()
    }

    pub fn n_words(&self) -> usize {
        self.vocab_size() - 2
    }

    pub fn bos(&self) -> usize {
        self.n_words()
    }

    pub fn eos(&self) -> usize {
        self.n_words() + 1
    }

    fn check_token(&self, tok: usize) -> Result<()> {
        if tok >= self.vocab_size() {
            return Err(Error::IndexOutOfRange {
                context: "caption token",
                index: tok,
                len: self.vocab_size(),
            });
        }
        Ok(())
    }

    /// Initial hidden state from a (unit) image embedding.
    fn hidden0(&self, image_embed: &[f64]) -> Result<Vec<f64>> {
        if image_embed.len() != self.d_emb() {
            return Err(Error::ShapeMismatch {
                context: "captioner image embedding",
                expected: format!("d_emb {}", self.d_emb()),
                got: format!("{}", image_embed.len()),
            });
        }
        let row = Tensor2::row_vector(image_embed.to_vec())?;
        let h = row.matmul(self.params.require(BLOCK_PROJECTOR)?)?;
        numcore::l2_normalize(h.data())
    }

    /// One recurrence step: consumes `token`, returns next-token logits and
    /// the new hidden state.
    fn step(&self, h_prev: &[f64], token: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_token(token)?;
        let w_rec = self.params.require(BLOCK_W_REC)?;
        let w_in = self.params.require(BLOCK_W_IN)?;
        let tok_emb = self.params.require(BLOCK_TOK_EMB)?;
        let rec = Tensor2::row_vector(h_prev.to_vec())?.matmul(w_rec)?;
        let inp = Tensor2::row_vector(tok_emb.row(token).to_vec())?.matmul(w_in)?;
        let mut pre = rec;
        pre.add_scaled(1.0, &inp)?;
        let h = numcore::l2_normalize(pre.data())?;
        let logits_t = Tensor2::row_vector(h.clone())?.matmul(self.params.require(BLOCK_W_OUT)?)?;
        let bias = self.params.require(BLOCK_OUT_BIAS)?;
        let logits: Vec<f64> = logits_t
            .data()
            .iter()
            .zip(bias.row(0))
            .map(|(l, b)| l + b)
            .collect();
        Ok((logits, h))
    }

    /// Log-probability of a full token sequence `[BOS, ..., EOS]` conditioned
    /// on the projected image embedding. Sum of stepwise log-softmax terms.
    pub fn caption_logprob(&self, image_embed: &[f64], tokens: &[usize]) -> Result<f64> {
        self.validate_sequence(tokens)?;
        self.prefix_logprob(image_embed, tokens)
    }

    /// Log-probability of any decode prefix starting with BOS (no EOS
    /// requirement) — scores partial hypotheses exactly as beam search
    /// accumulates them.
    pub fn prefix_logprob(&self, image_embed: &[f64], tokens: &[usize]) -> Result<f64> {
        if tokens.is_empty() || tokens[0] != self.bos() {
            return Err(Error::invalid("prefix must start with BOS"));
        }
        let mut h = self.hidden0(image_embed)?;
        let mut total = 0.0;
        for i in 1..tokens.len() {
            let (logits, h_new) = self.step(&h, tokens[i - 1])?;
            let ls = numcore::log_softmax(&logits)?;
            total += ls[tokens[i]];
            h = h_new;
        }
        Ok(total)
    }

    fn validate_sequence(&self, tokens: &[usize]) -> Result<()> {
        for &t in tokens {
            self.check_token(t)?;
        }
        if tokens.len() < 2 || tokens[0] != self.bos() || *tokens.last().unwrap() != self.eos() {
            return Err(Error::invalid(
                "caption must be [BOS, ..., EOS] with at least the two specials",
            ));
        }
        Ok(())
    }

    /// Same log-probability as a differentiable tape value. Gradients flow
    /// only into the projector; the decoder blocks are frozen constants.
    pub fn tape_caption_logprob(
        &self,
        tape: &mut Tape,
        vars: &TreeVars,
        image_embed: &[f64],
        tokens: &[usize],
    ) -> Result<Val> {
        self.validate_sequence(tokens)?;
        if image_embed.len() != self.d_emb() {
            return Err(Error::ShapeMismatch {
                context: "captioner image embedding",
                expected: format!("d_emb {}", self.d_emb()),
                got: format!("{}", image_embed.len()),
            });
        }
        let tok_emb = self.params.require(BLOCK_TOK_EMB)?;
        let img = tape.constant_row(image_embed)?;
        let h0_pre = tape.matmul(img, vars.get(BLOCK_PROJECTOR))?;
        let mut h = tape.normalize_rows(h0_pre)?;
        let mut total: Option<Val> = None;
        for i in 1..tokens.len() {
            let rec = tape.matmul(h, vars.get(BLOCK_W_REC))?;
            let emb = tape.constant_row(tok_emb.row(tokens[i - 1]))?;
            let inp = tape.matmul(emb, vars.get(BLOCK_W_IN))?;
            let pre = tape.add(rec, inp)?;
            h = tape.normalize_rows(pre)?;
            let raw = tape.matmul(h, vars.get(BLOCK_W_OUT))?;
            let logits = tape.add(raw, vars.get(BLOCK_OUT_BIAS))?;
            let ls = tape.log_softmax(logits)?;
            let term = tape.pick(ls, tokens[i])?;
            total = Some(match total {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        Ok(total.expect("at least one step"))
    }

    /// Deterministic beam search. Every returned sequence ends in EOS or hits
    /// `max_len`; results sorted by log-probability descending, ties broken by
    /// expansion order. With `width` at least the number of reachable leaves,
    /// the result equals exhaustive enumeration.
    pub fn beam_search(
        &self,
        image_embed: &[f64],
        width: usize,
        max_len: usize,
    ) -> Result<Vec<Beam>> {
        if width < 1 {
            return Err(Error::invalid("beam width must be at least 1"));
        }
        if max_len < 2 {
            return Err(Error::invalid("max_len must be at least 2"));
        }
        struct Hyp {
            beam: Beam,
            hidden: Option<Vec<f64>>,
        }
        let h0 = self.hidden0(image_embed)?;
        let mut hyps = vec![Hyp {
            beam: Beam { tokens: vec![self.bos()], logprob: 0.0, finished: false },
            hidden: Some(h0),
        }];
        let vocab = self.vocab_size();
        let eos = self.eos();

        loop {
            let any_active = hyps
                .iter()
                .any(|h| !h.beam.finished && h.beam.tokens.len() < max_len);
            if !any_active {
                break;
            }
            // candidate: (logprob, parent index, token or vocab for carry-over)
            let mut cands: Vec<(f64, usize, usize, Option<Vec<f64>>)> = Vec::new();
            for (pi, hyp) in hyps.iter().enumerate() {
                if hyp.beam.finished || hyp.beam.tokens.len() >= max_len {
                    cands.push((hyp.beam.logprob, pi, vocab, None));
                    continue;
                }
                let h_prev = hyp.hidden.as_ref().expect("active beam has hidden state");
                let last = *hyp.beam.tokens.last().expect("non-empty");
                let (logits, h_new) = self.step(h_prev, last)?;
                let ls = numcore::log_softmax(&logits)?;
                for (tok, lp) in ls.iter().enumerate() {
                    cands.push((hyp.beam.logprob + lp, pi, tok, Some(h_new.clone())));
                }
            }
            cands.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .expect("finite logprobs")
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            cands.truncate(width);

            let mut next = Vec::with_capacity(cands.len());
            for (lp, pi, tok, hidden) in cands {
                if tok == vocab {
                    // carried-over hypothesis
                    next.push(Hyp { beam: hyps[pi].beam.clone(), hidden: None });
                } else {
                    let mut tokens = hyps[pi].beam.tokens.clone();
                    tokens.push(tok);
                    let finished = tok == eos;
                    next.push(Hyp {
                        beam: Beam { tokens, logprob: lp, finished },
                        hidden: if finished { None } else { hidden },
                    });
                }
            }
            hyps = next;
        }

        let mut beams: Vec<Beam> = hyps.into_iter().map(|h| h.beam).collect();
        // stable: equal logprobs keep expansion order
        beams.sort_by(|a, b| b.logprob.partial_cmp(&a.logprob).expect("finite"));
        Ok(beams)
    }

    /// Token ids to caption text; BOS/EOS are stripped, word ids map to `w{id}`.
    pub fn decode_to_text(&self, tokens: &[usize]) -> Result<String> {
        let mut words = Vec::new();
        for &t in tokens {
            self.check_token(t)?;
            if t == self.bos() || t == self.eos() {
                continue;
            }
            words.push(format!("w{t}"));
        }
        Ok(words.join(" "))
    }

    /// Caption text back to `[BOS, ids..., EOS]`.
    pub fn encode_text(&self, text: &str) -> Result<Vec<usize>> {
        let mut tokens = vec![self.bos()];
        for word in text.split_whitespace() {
            let id: usize = word
                .strip_prefix('w')
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::invalid(format!("unknown word `{word}`")))?;
            if id >= self.n_words() {
                return Err(Error::IndexOutOfRange {
                    context: "caption word",
                    index: id,
                    len: self.n_words(),
                });
            }
            tokens.push(id);
        }
        tokens.push(self.eos());
        Ok(tokens)
    }

    /// Word ids (attribute ids) present in a caption, deduplicated, sorted.
    pub fn caption_attributes(&self, tokens: &[usize]) -> Vec<usize> {
        let mut attrs: Vec<usize> = tokens
            .iter()
            .copied()
            .filter(|&t| t < self.n_words())
            .collect();
        attrs.sort_unstable();
        attrs.dedup();
        attrs
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(self.params.clone());
        ckpt.set_meta("kind", "captioner");
        ckpt.set_meta("max_len", self.max_len);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta_str("kind")? != "captioner" {
            return Err(Error::CheckpointFormat(format!(
                "expected kind captioner, got {}",
                ckpt.meta_str("kind")?
            )));
        }
        let max_len = ckpt.meta_usize("max_len")?;
        for name in std::iter::once(&BLOCK_PROJECTOR).chain(DECODER_BLOCKS.iter()) {
            if ckpt.params.get(name).is_none() {
                return Err(Error::CheckpointFormat(format!("missing block `{name}`")));
            }
        }
        Ok(Self { params: ckpt.params.clone(), max_len })
    }
}

#[derive(Debug, Clone)]
pub struct CaptionPretrainConfig {
    pub d_emb: usize,
    pub d_dec: usize,
    pub n_words: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Teacher-forced pretraining of the whole captioner (projector and decoder)
/// on (image embedding, token sequence) pairs. The returned model has the
/// decoder frozen and the projector trainable, ready for adaptation.
pub fn pretrain_captioner(
    cfg: &CaptionPretrainConfig,
    data: &[(Vec<f64>, Vec<usize>)],
) -> Result<(ToyCaptioner, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::EmptyInput("captioner pretraining data"));
    }
    let mut model = ToyCaptioner::init(cfg.d_emb, cfg.d_dec, cfg.n_words, cfg.max_len, cfg.seed)?;
    // decoder learns during pretraining only
    let all_blocks: Vec<&str> = std::iter::once(BLOCK_PROJECTOR)
        .chain(DECODER_BLOCKS.iter().copied())
        .filter(|b| *b != BLOCK_OUT_BIAS)
        .collect();
    model.params_mut().set_trainable_exactly(&all_blocks)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5bd1e995));
    let mut opt = AdamW::new(OptimizerConfig { lr: cfg.lr, weight_decay: 0.0 });
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let batch_size = 8usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        {
            use rand::Rng;
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
        }
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let model_ref = &model;
            let loss_fn = |tape: &mut Tape, vars: &TreeVars| {
                let mut per_sample = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let (embed, tokens) = &data[i];
                    let lp = model_ref.tape_caption_logprob(tape, vars, embed, tokens)?;
                    // mean per-token loss keeps scale independent of length
                    let steps = (tokens.len() - 1) as f64;
                    per_sample.push(tape.scale(lp, -1.0 / steps)?);
                }
                tape.mean_of(&per_sample)
            };
            let (loss, grads) = grad(loss_fn, model.params()).map_err(|e| match e {
                Error::NonFinite { .. } => Error::PretrainDiverged { epoch },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::PretrainDiverged { epoch });
            }
            epoch_loss += loss;
            n_batches += 1;
            opt.step(model.params_mut(), &grads)?;
        }
        epoch_losses.push(epoch_loss / n_batches.max(1) as f64);
    }

    model.params_mut().set_trainable_exactly(&[BLOCK_PROJECTOR])?;
    Ok((model, epoch_losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_diff, grad, max_relative_error};

    fn fixture(seed: u64) -> ToyCaptioner {
        ToyCaptioner::init(3, 4, 2, 6, seed).unwrap()
    }

    /// Decoder rigged so that at every state EOS is strongly preferred and
    /// word 0 beats word 1: a single dominant path [BOS, EOS].
    fn eos_biased_fixture() -> ToyCaptioner {
        let mut c = fixture(11);
        let vocab = c.vocab_size();
        let mut bias = Tensor2::zeros(1, vocab);
        bias.data_mut()[c.eos()] = 4.0;
        bias.data_mut()[0] = 1.0;
        // shrink the content logits so the bias dominates everywhere
        let w_out = c.params().get(BLOCK_W_OUT).unwrap().map(|v| v * 0.05);
        *c.params_mut().get_mut(BLOCK_W_OUT).unwrap() = w_out;
        *c.params_mut().get_mut(BLOCK_OUT_BIAS).unwrap() = bias;
        c
    }

    #[test]
    fn empty_body_logprob_is_single_eos_step() {
        let c = fixture(1);
        let embed = [0.3, -0.5, 0.8];
        let tokens = vec![c.bos(), c.eos()];
        let lp = c.caption_logprob(&embed, &tokens).unwrap();
        // independent stepwise recomputation
        let h0 = c.hidden0(&embed).unwrap();
        let (logits, _) = c.step(&h0, c.bos()).unwrap();
        let expect = numcore::log_softmax(&logits).unwrap()[c.eos()];
        assert!((lp - expect).abs() < 1e-12);
    }

    #[test]
    fn logprob_is_nonpositive_and_matches_stepwise_recomputation() {
        let c = fixture(2);
        let embed = [1.0, 0.2, -0.4];
        let tokens = vec![c.bos(), 0, 1, 0, c.eos()];
        let lp = c.caption_logprob(&embed, &tokens).unwrap();
        assert!(lp <= 0.0);
        // recompute independently step by step
        let mut h = c.hidden0(&embed).unwrap();
        let mut total = 0.0;
        for i in 1..tokens.len() {
            let (logits, h_new) = c.step(&h, tokens[i - 1]).unwrap();
            let p = numcore::softmax(&logits).unwrap();
            total += p[tokens[i]].ln();
            h = h_new;
        }
        assert!((lp - total).abs() < 1e-9);
    }

    #[test]
    fn out_of_vocab_token_is_error() {
        let c = fixture(3);
        let embed = [0.0, 1.0, 0.0];
        assert!(c.caption_logprob(&embed, &[c.bos(), 99, c.eos()]).is_err());
    }

    #[test]
    fn tape_logprob_matches_plain_and_gradients_stay_in_projector() {
        let c = fixture(4);
        let embed = [0.4, -0.1, 0.9];
        let tokens = vec![c.bos(), 1, 0, c.eos()];
        let plain = c.caption_logprob(&embed, &tokens).unwrap();

        let loss_fn = |tape: &mut Tape, vars: &TreeVars| {
            c.tape_caption_logprob(tape, vars, &embed, &tokens)
        };
        let (v, g) = grad(loss_fn, c.params()).unwrap();
        assert!((v - plain).abs() < 1e-12);
        for block in DECODER_BLOCKS {
            assert_eq!(g.get(block).unwrap().data().iter().filter(|x| **x != 0.0).count(), 0);
        }
        assert!(g.get(BLOCK_PROJECTOR).unwrap().data().iter().any(|x| *x != 0.0));

        let fd = finite_diff(loss_fn, c.params(), 1e-5).unwrap();
        assert!(max_relative_error(&g, &fd) <= 1e-4);
    }

    #[test]
    fn beam_width_one_equals_greedy() {
        let c = fixture(5);
        let embed = [0.7, 0.7, -0.2];
        let beams = c.beam_search(&embed, 1, 6).unwrap();
        assert_eq!(beams.len(), 1);

        // greedy rollout
        let mut h = c.hidden0(&embed).unwrap();
        let mut tokens = vec![c.bos()];
        while tokens.len() < 6 && *tokens.last().unwrap() != c.eos() {
            let (logits, h_new) = c.step(&h, *tokens.last().unwrap()).unwrap();
            tokens.push(numcore::argmax(&logits).unwrap());
            h = h_new;
        }
        assert_eq!(beams[0].tokens, tokens);
    }

    #[test]
    fn beam_rejects_zero_width() {
        let c = fixture(5);
        assert!(c.beam_search(&[0.0, 0.0, 1.0], 0, 4).is_err());
    }

    /// Exhaustive enumeration of all leaves of the decode tree, independent of
    /// the beam implementation.
    fn enumerate_leaves(c: &ToyCaptioner, embed: &[f64], max_len: usize) -> Vec<(Vec<usize>, f64)> {
        let mut leaves = Vec::new();
        let h0 = c.hidden0(embed).unwrap();
        let mut stack = vec![(vec![c.bos()], 0.0f64, h0)];
        while let Some((tokens, lp, h)) = stack.pop() {
            if *tokens.last().unwrap() == c.eos() || tokens.len() >= max_len {
                leaves.push((tokens, lp));
                continue;
            }
            let (logits, h_new) = c.step(&h, *tokens.last().unwrap()).unwrap();
            let ls = numcore::log_softmax(&logits).unwrap();
            for (tok, step_lp) in ls.iter().enumerate() {
                let mut t = tokens.clone();
                t.push(tok);
                stack.push((t, lp + step_lp, h_new.clone()));
            }
        }
        leaves.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        leaves
    }

    #[test]
    fn wide_beam_equals_exhaustive_enumeration() {
        let c = fixture(6);
        let embed = [0.2, -0.8, 0.5];
        let max_len = 3;
        let leaves = enumerate_leaves(&c, &embed, max_len);
        let beams = c.beam_search(&embed, leaves.len() + 10, max_len).unwrap();
        assert_eq!(beams.len(), leaves.len());
        for (beam, (tokens, lp)) in beams.iter().zip(&leaves) {
            assert_eq!(&beam.tokens, tokens);
            assert!((beam.logprob - lp).abs() < 1e-10);
        }
    }

    #[test]
    fn beam_rank1_is_monotone_in_width() {
        let c = fixture(7);
        let embed = [0.9, 0.1, 0.3];
        let mut prev = f64::NEG_INFINITY;
        for width in 1..6 {
            let beams = c.beam_search(&embed, width, 5).unwrap();
            assert!(beams[0].logprob >= prev - 1e-12);
            prev = beams[0].logprob;
        }
    }

    #[test]
    fn dominant_path_ranks_first() {
        let c = eos_biased_fixture();
        let beams = c.beam_search(&[0.5, 0.5, 0.5], 4, 6).unwrap();
        assert_eq!(beams[0].tokens, vec![c.bos(), c.eos()]);
        assert!(beams[0].finished);
    }

    #[test]
    fn complete_sequence_probabilities_sum_to_one() {
        // EOS-heavy decoder: unfinished mass beyond max_len is negligible.
        let c = eos_biased_fixture();
        let embed = [0.1, -0.3, 0.9];
        let max_len = 12;
        let beams = c.beam_search(&embed, 1 << 14, max_len).unwrap();
        let total: f64 = beams
            .iter()
            .filter(|b| b.finished)
            .map(|b| b.logprob.exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-6, "sum {total}");
    }

    #[test]
    fn decode_strips_specials_and_round_trips() {
        let c = fixture(8);
        let tokens = vec![c.bos(), 1, 0, c.eos()];
        assert_eq!(c.decode_to_text(&tokens).unwrap(), "w1 w0");
        assert_eq!(c.encode_text("w1 w0").unwrap(), tokens);
        assert_eq!(c.decode_to_text(&[c.bos(), c.eos()]).unwrap(), "");
        assert!(c.decode_to_text(&[42]).is_err());
    }

    #[test]
    fn pretraining_learns_attribute_captions() {
        // four "images" with distinct embeddings, captions naming one word each
        let data: Vec<(Vec<f64>, Vec<usize>)> = vec![
            (vec![1.0, 0.0, 0.0], vec![2, 0, 3]),
            (vec![0.0, 1.0, 0.0], vec![2, 1, 3]),
            (vec![-1.0, 0.0, 0.5], vec![2, 0, 3]),
            (vec![0.0, -1.0, 0.5], vec![2, 1, 3]),
        ];
        let cfg = CaptionPretrainConfig {
            d_emb: 3,
            d_dec: 8,
            n_words: 2,
            max_len: 4,
            epochs: 150,
            lr: 0.02,
            seed: 0,
        };
        let (model, losses) = pretrain_captioner(&cfg, &data).unwrap();
        assert!(losses.last().unwrap() < &0.2, "final loss {}", losses.last().unwrap());
        // decoder frozen after pretraining
        for block in DECODER_BLOCKS {
            assert!(!model.params().is_trainable(block));
        }
        assert!(model.params().is_trainable(BLOCK_PROJECTOR));
        // greedy caption for the first image names word 0
        let beams = model.beam_search(&data[0].0, 3, 4).unwrap();
        assert_eq!(beams[0].tokens, vec![2, 0, 3]);
    }
}
