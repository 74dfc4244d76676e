//! Per-sample adaptation episodes for the three tasks.
//!
//! Each episode is a deterministic function of (checkpoint, sample, seed,
//! config): snapshot the pristine weights, run the configured number of
//! adaptation steps with the configured objective, read off the prediction
//! with the adapted weights, then reset bit-exactly. Step-by-step diagnostics
//! are captured in an [`EpisodeTrace`] and serialized as one JSON line per
//! sample by the bench layer.

mod caption;
mod classify;
mod retrieve;

pub use caption::{tta_caption, CaptionResult};
pub use classify::tta_classify;
pub use retrieve::{tta_retrieve, Gallery, RetrievalQuery};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::DualEncoder;
use crate::numcore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classify,
    RetrieveT2i,
    RetrieveI2t,
    Caption,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Task::Classify),
            "retrieve_t2i" => Ok(Task::RetrieveT2i),
            "retrieve_i2t" => Ok(Task::RetrieveI2t),
            "caption" => Ok(Task::Caption),
            other => Err(Error::config(format!("unknown task `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::RetrieveT2i => "retrieve_t2i",
            Task::RetrieveI2t => "retrieve_i2t",
            Task::Caption => "caption",
        }
    }
}

/// Which parameter blocks adaptation may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMode {
    /// Learnable prompt prefix only (classification).
    Prompt,
    /// Image projection only (classification).
    Encoder,
    /// Captioner projector only.
    Projector,
}

impl TuneMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "prompt" => Ok(TuneMode::Prompt),
            "encoder" => Ok(TuneMode::Encoder),
            "projector" => Ok(TuneMode::Projector),
            other => Err(Error::config(format!("unknown mode `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TuneMode::Prompt => "prompt",
            TuneMode::Encoder => "encoder",
            TuneMode::Projector => "projector",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Rlcf,
    EntropyMin,
    PseudoLabel,
    Kd,
    None,
}

impl Objective {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rlcf" => Ok(Objective::Rlcf),
            "entropy_min" => Ok(Objective::EntropyMin),
            "pseudo_label" => Ok(Objective::PseudoLabel),
            "kd" => Ok(Objective::Kd),
            "none" => Ok(Objective::None),
            other => Err(Error::config(format!("unknown objective `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Rlcf => "rlcf",
            Objective::EntropyMin => "entropy_min",
            Objective::PseudoLabel => "pseudo_label",
            Objective::Kd => "kd",
            Objective::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MomentumConfig {
    pub enabled: bool,
    pub m: f64,
    pub interval: usize,
}

impl Default for MomentumConfig {
    fn default() -> Self {
        Self { enabled: false, m: 0.9998, interval: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TTAConfig {
    pub task: Task,
    pub mode: TuneMode,
    pub objective: Objective,
    pub steps: usize,
    /// Sampling factor: number of candidates scored per step.
    pub k: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub n_views: usize,
    /// Confidence-selection percentile in (0, 1].
    pub rho: f64,
    /// Width of the final decoding beam (captioning).
    pub beam_width: usize,
    /// Distillation temperature for the kd objective.
    pub kd_temperature: f64,
    /// Keep the raw reward when K = 1 instead of the (zero) centered one.
    pub k1_passthrough: bool,
    pub momentum: MomentumConfig,
    pub seed: u64,
}

impl TTAConfig {
    /// Classification with prompt tuning: 3 steps, K = 3, lr 7e-3, wd 5e-4,
    /// 64 views, bottom 10th percentile.
    pub fn classify_prompt(seed: u64) -> Self {
        Self {
            task: Task::Classify,
            mode: TuneMode::Prompt,
            objective: Objective::Rlcf,
            steps: 3,
            k: 3,
            lr: 7e-3,
            weight_decay: 5e-4,
            n_views: 64,
            rho: 0.1,
            beam_width: 5,
            kd_temperature: 2.0,
            k1_passthrough: true,
            momentum: MomentumConfig::default(),
            seed,
        }
    }

    /// Classification with image-encoder tuning (lr drops to 1e-5).
    pub fn classify_encoder(seed: u64) -> Self {
        Self { mode: TuneMode::Encoder, lr: 1e-5, ..Self::classify_prompt(seed) }
    }

    /// Text-to-image retrieval: 8 steps, lr 1e-6, no augmentation.
    pub fn retrieve_t2i(seed: u64) -> Self {
        Self {
            task: Task::RetrieveT2i,
            mode: TuneMode::Encoder,
            steps: 8,
            k: 12,
            lr: 1e-6,
            n_views: 1,
            ..Self::classify_prompt(seed)
        }
    }

    /// Image-to-text retrieval (larger K: several texts describe one image).
    pub fn retrieve_i2t(seed: u64) -> Self {
        Self { task: Task::RetrieveI2t, k: 16, ..Self::retrieve_t2i(seed) }
    }

    /// Captioning: 4 steps, beam width 5 for the final decode, no weight decay.
    pub fn caption(seed: u64) -> Self {
        Self {
            task: Task::Caption,
            mode: TuneMode::Projector,
            steps: 4,
            k: 6,
            lr: 5e-3,
            weight_decay: 0.0,
            n_views: 1,
            beam_width: 5,
            ..Self::classify_prompt(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::config("k must be at least 1"));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::config("rho must be in (0, 1]"));
        }
        if self.n_views < 1 {
            return Err(Error::config("n_views must be at least 1"));
        }
        if self.beam_width < 1 {
            return Err(Error::config("beam_width must be at least 1"));
        }
        if self.kd_temperature <= 0.0 {
            return Err(Error::config("kd_temperature must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum.m) {
            return Err(Error::config("momentum m must be in [0, 1)"));
        }
        if self.momentum.interval == 0 {
            return Err(Error::config("momentum interval must be at least 1"));
        }
        if self.lr <= 0.0 {
            return Err(Error::config("lr must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub selected_views: usize,
    /// Candidate labels, flattened across selected views
    /// (`c<class>` / `g<gallery idx>` / decoded caption text).
    pub candidates: Vec<String>,
    pub raw_scores: Vec<f64>,
    pub centered_rewards: Vec<f64>,
    pub loss: f64,
    /// Prediction with the weights after this step's update.
    pub prediction: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Classify {
        prediction: usize,
        /// Max softmax probability over classes (calibration input).
        confidence: f64,
        zero_shot: usize,
        /// Up to five top-scoring classes, best first.
        top5: Vec<usize>,
    },
    Retrieve {
        /// Gallery indices, best first.
        ranking: Vec<usize>,
    },
    Caption {
        tokens: Vec<usize>,
        text: String,
        /// Ensemble reward of the final caption against the image.
        reward: f64,
        /// False when no beam produced EOS within max_len.
        complete: bool,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub sample_id: u64,
    pub task: Task,
    pub objective: Objective,
    pub steps: Vec<StepTrace>,
    pub wall_ms: f64,
    pub outcome: Outcome,
}

impl EpisodeTrace {
    /// Mean raw reward at the last step minus the first step (0 when fewer
    /// than two reward-carrying steps were recorded).
    pub fn reward_gain(&self) -> f64 {
        let means: Vec<f64> = self
            .steps
            .iter()
            .filter(|s| !s.raw_scores.is_empty())
            .map(|s| numcore::mean(&s.raw_scores))
            .collect();
        match (means.first(), means.last()) {
            (Some(first), Some(last)) if means.len() >= 2 => last - first,
            _ => 0.0,
        }
    }
}

/// The parameter blocks a task/mode combination is allowed to move.
pub fn tunable_blocks(task: Task, mode: TuneMode) -> Result<&'static [&'static str]> {
    match task {
        Task::Classify => match mode {
            TuneMode::Prompt => Ok(&[crate::models::BLOCK_PROMPT]),
            TuneMode::Encoder => Ok(&[crate::models::BLOCK_IMAGE_PROJ]),
            TuneMode::Projector => {
                Err(Error::config("classification tunes `prompt` or `encoder`"))
            }
        },
        Task::RetrieveT2i => Ok(&[crate::models::BLOCK_TEXT_PROJ]),
        Task::RetrieveI2t => Ok(&[crate::models::BLOCK_IMAGE_PROJ]),
        Task::Caption => Ok(&[crate::captioner::BLOCK_PROJECTOR]),
    }
}

/// Deterministic per-episode RNG derived from the run seed and the sample id,
/// so episode outputs are independent of stream order.
pub fn episode_rng(seed: u64, sample_id: u64) -> ChaCha8Rng {
    let mut z = seed ^ sample_id.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// `n` views of an image vector. View 0 is the identity; the rest zero a
/// random quarter of the coordinates and add Gaussian jitter with
/// `σ = 0.05·‖v‖/√d`.
pub fn augment_views(v: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut views = Vec::with_capacity(n);
    views.push(v.to_vec());
    if n == 1 {
        return views;
    }
    let sigma = 0.05 * numcore::norm(v) / (v.len() as f64).sqrt();
    for _ in 1..n {
        let view: Vec<f64> = v
            .iter()
            .map(|&x| {
                let kept = if rng.gen::<f64>() < 0.25 { 0.0 } else { x };
                let noise: f64 = rng.sample(StandardNormal);
                kept + sigma * noise
            })
            .collect();
        views.push(view);
    }
    views
}

/// Indices of the `⌊rho·n⌋` (at least 1) views with the lowest prediction
/// entropy, ordered by (entropy, view index).
pub fn confidence_select(
    views: &[Vec<f64>],
    model: &DualEncoder,
    rho: f64,
) -> Result<Vec<usize>> {
    if views.is_empty() {
        return Err(Error::EmptyInput("confidence_select"));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::invalid("rho must be in (0, 1]"));
    }
    let mut entropies = Vec::with_capacity(views.len());
    for (i, view) in views.iter().enumerate() {
        let probs = numcore::softmax(&model.class_logits_all(view)?)?;
        entropies.push((numcore::entropy(&probs)?, i));
    }
    entropies.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite entropy").then(a.1.cmp(&b.1)));
    let keep = ((rho * views.len() as f64).floor() as usize).max(1);
    Ok(entropies.into_iter().take(keep).map(|(_, i)| i).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::EncoderArch;
    use crate::numcore::Tensor2;

    #[test]
    fn augment_single_view_is_identity() {
        let v = vec![1.0, -2.0, 3.0];
        let mut rng = episode_rng(0, 0);
        let views = augment_views(&v, 1, &mut rng);
        assert_eq!(views, vec![v]);
    }

    #[test]
    fn augment_is_seed_deterministic_and_keeps_view0_clean() {
        let v: Vec<f64> = (0..16).map(|i| (i as f64) * 0.21 - 1.5).collect();
        let a = augment_views(&v, 8, &mut episode_rng(3, 77));
        let b = augment_views(&v, 8, &mut episode_rng(3, 77));
        assert_eq!(a, b);
        assert_eq!(a[0], v);
        let c = augment_views(&v, 8, &mut episode_rng(3, 78));
        assert_ne!(a[1], c[1]);
    }

    #[test]
    fn augment_mean_approaches_three_quarters() {
        // law of large numbers over 10k views: E[view] = 0.75·v per coordinate
        let v = vec![2.0, -4.0, 1.0, 3.0];
        let mut rng = episode_rng(1, 1);
        let n = 10_001;
        let views = augment_views(&v, n, &mut rng);
        let mut mean = vec![0.0; v.len()];
        for view in &views[1..] {
            for (m, x) in mean.iter_mut().zip(view) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= (n - 1) as f64;
        }
        for (m, x) in mean.iter().zip(&v) {
            let expect = 0.75 * x;
            assert!(
                (m - expect).abs() < 0.02 * x.abs().max(1.0),
                "mean {m} vs {expect}"
            );
        }
    }

    fn separable_model() -> DualEncoder {
        let arch = EncoderArch::new(4, 4, 4);
        DualEncoder::init(
            &arch,
            &[vec![0], vec![1], vec![2]],
            crate::models::random_token_table(4, 4, 5),
            5,
        )
        .unwrap()
    }

    #[test]
    fn selection_counts_follow_floor_rule() {
        let model = separable_model();
        let mut rng = episode_rng(0, 9);
        let v = vec![0.5, 1.0, -0.5, 0.25];
        let views = augment_views(&v, 64, &mut rng);
        assert_eq!(confidence_select(&views, &model, 0.1).unwrap().len(), 6);
        let ten = augment_views(&v, 10, &mut rng);
        assert_eq!(confidence_select(&ten, &model, 0.1).unwrap().len(), 1);
    }

    #[test]
    fn selection_ties_break_by_view_index() {
        // identical views → identical entropies → lowest indices win
        let model = separable_model();
        let v = vec![0.5, 1.0, -0.5, 0.25];
        let views = vec![v.clone(); 7];
        let sel = confidence_select(&views, &model, 0.5).unwrap();
        assert_eq!(sel, vec![0, 1, 2]);
    }

    #[test]
    fn selection_prefers_low_entropy_views() {
        // identity image projection: views live directly in embedding space,
        // so a view equal to a class-text embedding is maximally confident
        let eye = {
            let mut t = Tensor2::zeros(4, 4);
            for i in 0..4 {
                t.set(i, i, 1.0);
            }
            t
        };
        let model = crate::models::DualEncoder::from_parts(
            eye,
            Tensor2::gaussian(5, 4, 0.5, &mut episode_rng(2, 2)),
            Tensor2::gaussian(2, 5, 0.2, &mut episode_rng(3, 3)),
            Tensor2::gaussian(3, 5, 0.8, &mut episode_rng(4, 4)),
            Tensor2::gaussian(3, 5, 0.8, &mut episode_rng(5, 5)),
            100.0,
        )
        .unwrap();
        let confident = model.encode_class_text(0).unwrap();
        let murky = {
            // equidistant from all class embeddings: their mean
            let mut acc = vec![0.0; 4];
            for c in 0..3 {
                for (a, x) in acc.iter_mut().zip(model.encode_class_text(c).unwrap()) {
                    *a += x;
                }
            }
            acc
        };
        let views = vec![murky.clone(), confident, murky];
        let sel = confidence_select(&views, &model, 0.34).unwrap();
        assert_eq!(sel, vec![1]);
    }

    #[test]
    fn config_defaults_validate() {
        for cfg in [
            TTAConfig::classify_prompt(0),
            TTAConfig::classify_encoder(0),
            TTAConfig::retrieve_t2i(0),
            TTAConfig::retrieve_i2t(0),
            TTAConfig::caption(0),
        ] {
            cfg.validate().unwrap();
        }
        let mut bad = TTAConfig::classify_prompt(0);
        bad.rho = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn episode_rng_depends_on_sample_not_order() {
        let a: u64 = episode_rng(5, 10).gen();
        let b: u64 = episode_rng(5, 10).gen();
        let c: u64 = episode_rng(5, 11).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
