//! Fully test-time adaptation for captioning.
//!
//! The image is embedded once by a frozen extractor encoder. Per step, beam
//! search samples K candidate captions from the captioner, each candidate's
//! attribute bag is scored by the scorer ensemble against the image, rewards
//! are centered, and the policy-gradient surrogate over the candidates'
//! sequence log-probabilities updates the projector only. The final caption
//! is the rank-1 beam of a fresh `beam_width`-wide search after the last
//! step.

use std::time::Instant;

use crate::adapt::{reinforce_loss, EpisodeState, MomentumBuffer, OptimizerConfig};
use crate::captioner::{ToyCaptioner, BLOCK_PROJECTOR};
use crate::error::{Error, Result};
use crate::models::DualEncoder;
use crate::numcore::{self, Tape, TreeVars, Val};
use crate::pipelines::{
    episode_rng, EpisodeTrace, Objective, Outcome, StepTrace, TTAConfig, Task,
};
use crate::reward::{center_rewards, EpisodeRewardCache, RewardModel};

#[derive(Debug, Clone)]
pub struct CaptionResult {
    pub tokens: Vec<usize>,
    pub text: String,
    /// Ensemble reward of the final caption against the image.
    pub reward: f64,
    /// False when no beam reached EOS within max_len (best partial returned).
    pub complete: bool,
}

pub fn tta_caption(
    sample_id: u64,
    image: &[f64],
    extractor: &DualEncoder,
    captioner: &mut ToyCaptioner,
    scorers: &[RewardModel],
    cfg: &TTAConfig,
    momentum: Option<&mut MomentumBuffer>,
) -> Result<(CaptionResult, EpisodeTrace)> {
    cfg.validate()?;
    let started = Instant::now();
    if cfg.task != Task::Caption {
        return Err(Error::config("tta_caption requires task = caption"));
    }
    match cfg.objective {
        Objective::Rlcf | Objective::None => {}
        other => {
            return Err(Error::config(format!(
                "captioning supports objectives rlcf/none, not {}",
                other.name()
            )))
        }
    }
    captioner.params_mut().set_trainable_exactly(&[BLOCK_PROJECTOR])?;

    let embed = extractor.encode_image(image)?;
    let max_len = captioner.max_len();
    let mut ep = EpisodeState::begin(
        captioner.params(),
        OptimizerConfig { lr: cfg.lr, weight_decay: cfg.weight_decay },
    );
    let _rng = episode_rng(cfg.seed, sample_id); // candidate sampling is deterministic beam search

    let mut reward_cache = if cfg.objective == Objective::Rlcf {
        Some(EpisodeRewardCache::new(scorers, image)?)
    } else {
        None
    };

    let mut step_traces = Vec::new();
    if cfg.objective == Objective::Rlcf {
        for step in 0..cfg.steps {
            // K-wide search supplies the K candidates scored this step
            let beams = captioner.beam_search(&embed, cfg.k, max_len)?;
            let cache = reward_cache.as_mut().expect("cache built for rlcf");
            let mut raw = Vec::with_capacity(beams.len());
            let mut labels = Vec::with_capacity(beams.len());
            for beam in &beams {
                let attrs = captioner.caption_attributes(&beam.tokens);
                raw.push(cache.token_score(&attrs)?);
                labels.push(captioner.decode_to_text(&beam.tokens)?);
            }
            let sig = center_rewards(&raw, cfg.k1_passthrough)?;

            let cap_ref = &*captioner;
            let beams_ref = &beams;
            let centered_ref = &sig.centered;
            let embed_ref = &embed;
            let loss_fn = move |tape: &mut Tape, vars: &TreeVars| -> Result<Val> {
                let mut lps = Vec::with_capacity(beams_ref.len());
                for beam in beams_ref {
                    // unfinished beams are closed with EOS for the surrogate
                    let mut tokens = beam.tokens.clone();
                    if !beam.finished {
                        tokens.push(cap_ref.eos());
                    }
                    lps.push(cap_ref.tape_caption_logprob(tape, vars, embed_ref, &tokens)?);
                }
                reinforce_loss(tape, &lps, centered_ref)
            };

            let (loss, grads) = numcore::grad(loss_fn, captioner.params()).map_err(|e| match e {
                Error::NonFinite { .. } => Error::EpisodeDiverged { step },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::EpisodeDiverged { step });
            }
            ep.optimizer().step(captioner.params_mut(), &grads)?;
            ep.advance();

            let post = captioner.beam_search(&embed, cfg.beam_width, max_len)?;
            step_traces.push(StepTrace {
                step,
                selected_views: 1,
                candidates: labels,
                raw_scores: raw,
                centered_rewards: sig.centered,
                loss,
                prediction: captioner.decode_to_text(&post[0].tokens)?,
            });
        }
    }

    // final decode with the adapted projector
    let final_beams = captioner.beam_search(&embed, cfg.beam_width, max_len)?;
    let best = &final_beams[0];
    let text = captioner.decode_to_text(&best.tokens)?;
    let attrs = captioner.caption_attributes(&best.tokens);
    let reward = match reward_cache.as_mut() {
        Some(cache) => cache.token_score(&attrs)?,
        None => match EpisodeRewardCache::new(scorers, image) {
            Ok(mut cache) => cache.token_score(&attrs)?,
            Err(_) => 0.0,
        },
    };
    let result = CaptionResult {
        tokens: best.tokens.clone(),
        text: text.clone(),
        reward,
        complete: best.finished,
    };

    let theta_bar = captioner.params().clone();
    ep.reset(captioner.params_mut())?;
    if let Some(buf) = momentum {
        if let Some(new_pristine) = buf.observe(&theta_bar)? {
            captioner.params_mut().reset_from(&new_pristine)?;
        }
    }

    let trace = EpisodeTrace {
        sample_id,
        task: Task::Caption,
        objective: cfg.objective,
        steps: step_traces,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        outcome: Outcome::Caption {
            tokens: result.tokens.clone(),
            text,
            reward,
            complete: result.complete,
        },
    };
    Ok((result, trace))
}
