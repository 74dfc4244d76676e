//! Clipped-similarity rewards, mean-baseline centering, and weighted scorer
//! ensembles.
//!
//! The reward for a candidate text `t` against an image `v` is
//! `w · max(cos(h(t), g(v)), 0)` with `w = 2.5`, computed by one or more
//! frozen scorer encoders. Raw scores are always non-negative, so each
//! adaptation step subtracts their mean across the K candidates: candidates
//! above the mean are encouraged, the rest discouraged. With K = 1 the mean
//! baseline would zero every reward, so a passthrough flag keeps the raw
//! score instead (that regime degenerates to pseudo-labeling the model's own
//! top-1).

use crate::error::{Error, Result};
use crate::models::DualEncoder;
use crate::numcore::{self, mean};

/// Multiplier of the clipped cosine similarity.
pub const SCORE_WEIGHT: f64 = 2.5;

/// The candidate text handed to a scorer.
#[derive(Debug, Clone)]
pub enum TextQuery<'a> {
    /// A benchmark class id (scored against the scorer's own class table).
    Class(usize),
    /// A bag of attribute-token ids (decoded captions, retrieval texts).
    Tokens(&'a [usize]),
}

/// A frozen scorer encoder with an ensemble weight.
#[derive(Debug, Clone)]
pub struct RewardModel {
    pub id: String,
    pub weight: f64,
    encoder: DualEncoder,
}

impl RewardModel {
    pub fn new(id: impl Into<String>, weight: f64, encoder: DualEncoder) -> Result<Self> {
        if weight <= 0.0 {
            return Err(Error::invalid("reward model weight must be positive"));
        }
        Ok(Self { id: id.into(), weight, encoder })
    }

    pub fn encoder(&self) -> &DualEncoder {
        &self.encoder
    }

    pub fn score(&self, text: &TextQuery, image: &[f64]) -> Result<f64> {
        let image_embed = self.encoder.encode_image(image)?;
        self.score_with_image_embed(text, &image_embed)
    }

    /// Score against a pre-computed unit image embedding of this scorer
    /// (the image branch runs once per sample; see [`EpisodeRewardCache`]).
    pub fn score_with_image_embed(&self, text: &TextQuery, image_embed: &[f64]) -> Result<f64> {
        let text_embed = match text {
            TextQuery::Class(c) => self.encoder.encode_class_text(*c)?,
            TextQuery::Tokens(ids) => self.encoder.encode_token_set(ids)?,
        };
        clip_score(&text_embed, image_embed)
    }
}

/// `w · max(cos, 0)` from two embeddings. Always in `[0, w]`.
pub fn clip_score(text_embed: &[f64], image_embed: &[f64]) -> Result<f64> {
    let c = numcore::cosine(text_embed, image_embed)?;
    Ok(SCORE_WEIGHT * c.max(0.0))
}

/// Weighted ensemble score: weights are normalized to sum to 1.
pub fn ensemble_score(models: &[RewardModel], text: &TextQuery, image: &[f64]) -> Result<f64> {
    if models.is_empty() {
        return Err(Error::EmptyInput("ensemble_score"));
    }
    let total: f64 = models.iter().map(|m| m.weight).sum();
    let mut acc = 0.0;
    for m in models {
        acc += (m.weight / total) * m.score(text, image)?;
    }
    Ok(acc)
}

/// Per-candidate raw scores, the baseline, and centered rewards for one step.
#[derive(Debug, Clone)]
pub struct RewardSignal {
    pub raw_scores: Vec<f64>,
    pub baseline: f64,
    pub centered: Vec<f64>,
}

/// Subtract the mean baseline. With `K == 1`, `k1_passthrough` keeps the raw
/// score; otherwise the single centered reward is zero (and so is the
/// gradient), which is the degenerate behavior the flag exists to avoid.
pub fn center_rewards(raw: &[f64], k1_passthrough: bool) -> Result<RewardSignal> {
    if raw.is_empty() {
        return Err(Error::EmptyInput("center_rewards"));
    }
    if raw.len() == 1 {
        let centered = if k1_passthrough { raw[0] } else { 0.0 };
        return Ok(RewardSignal {
            raw_scores: raw.to_vec(),
            baseline: if k1_passthrough { 0.0 } else { raw[0] },
            centered: vec![centered],
        });
    }
    let baseline = mean(raw);
    Ok(RewardSignal {
        raw_scores: raw.to_vec(),
        baseline,
        centered: raw.iter().map(|r| r - baseline).collect(),
    })
}

/// Per-episode scorer cache: each scorer's image branch runs once per sample,
/// and class-text scores are memoized across adaptation steps. Not shared
/// between episodes.
pub struct EpisodeRewardCache<'a> {
    models: &'a [RewardModel],
    weights: Vec<f64>,
    image_embeds: Vec<Vec<f64>>,
    class_scores: Vec<Option<f64>>,
}

impl<'a> EpisodeRewardCache<'a> {
    pub fn new(models: &'a [RewardModel], image: &[f64]) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::EmptyInput("reward models"));
        }
        let total: f64 = models.iter().map(|m| m.weight).sum();
        let weights = models.iter().map(|m| m.weight / total).collect();
        let image_embeds = models
            .iter()
            .map(|m| m.encoder.encode_image(image))
            .collect::<Result<Vec<_>>>()?;
        let n_classes = models[0].encoder.n_classes();
        Ok(Self { models, weights, image_embeds, class_scores: vec![None; n_classes] })
    }

    /// Ensemble score of a class candidate against the episode's image.
    pub fn class_score(&mut self, class_id: usize) -> Result<f64> {
        if class_id >= self.class_scores.len() {
            return Err(Error::IndexOutOfRange {
                context: "class_score",
                index: class_id,
                len: self.class_scores.len(),
            });
        }
        if let Some(s) = self.class_scores[class_id] {
            return Ok(s);
        }
        let mut acc = 0.0;
        for ((m, w), img) in self
            .models
            .iter()
            .zip(&self.weights)
            .zip(&self.image_embeds)
        {
            acc += w * m.score_with_image_embed(&TextQuery::Class(class_id), img)?;
        }
        self.class_scores[class_id] = Some(acc);
        Ok(acc)
    }

    /// Ensemble score of a token bag against the episode's image.
    pub fn token_score(&mut self, ids: &[usize]) -> Result<f64> {
        let mut acc = 0.0;
        for ((m, w), img) in self
            .models
            .iter()
            .zip(&self.weights)
            .zip(&self.image_embeds)
        {
            acc += w * m.score_with_image_embed(&TextQuery::Tokens(ids), img)?;
        }
        Ok(acc)
    }
}
