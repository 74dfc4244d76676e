//! Fully test-time adaptation for retrieval.
//!
//! Only the query-branch projection moves: the text projection for
//! text-to-image, the image projection for image-to-text. No augmentation is
//! applied to the query. Every step scores the whole gallery, takes the top-K
//! entries as candidates, centers their scorer rewards, and updates via the
//! policy-gradient surrogate; the returned ranking is the full argsort with
//! the adapted weights.

use std::time::Instant;

use crate::adapt::{
    entropy_min_loss, kd_loss, pseudo_label_loss, reinforce_loss, EpisodeState, MomentumBuffer,
    OptimizerConfig,
};
use crate::error::{Error, Result};
use crate::models::{self, DualEncoder};
use crate::numcore::{self, Tape, Tensor2, TreeVars, Val};
use crate::pipelines::{
    episode_rng, EpisodeTrace, Objective, Outcome, StepTrace, TTAConfig, Task,
};
use crate::reward::{center_rewards, RewardModel, TextQuery};

#[derive(Debug, Clone)]
pub enum RetrievalQuery {
    /// Attribute-token bag (text-to-image).
    Text(Vec<usize>),
    /// Raw image vector (image-to-text).
    Image(Vec<f64>),
}

#[derive(Debug, Clone)]
pub enum Gallery {
    Images(Vec<Vec<f64>>),
    Texts(Vec<Vec<usize>>),
}

impl Gallery {
    pub fn len(&self) -> usize {
        match self {
            Gallery::Images(v) => v.len(),
            Gallery::Texts(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Unit embeddings of every gallery item under `model`, one row per item.
fn gallery_embeds(model: &DualEncoder, gallery: &Gallery) -> Result<Tensor2> {
    let d = model.d_emb();
    let mut rows = Vec::with_capacity(gallery.len() * d);
    match gallery {
        Gallery::Images(items) => {
            for img in items {
                rows.extend(model.encode_image(img)?);
            }
        }
        Gallery::Texts(items) => {
            for bag in items {
                rows.extend(model.encode_token_set(bag)?);
            }
        }
    }
    Tensor2::from_vec(gallery.len(), d, rows)
}

pub fn tta_retrieve(
    sample_id: u64,
    query: &RetrievalQuery,
    gallery: &Gallery,
    student: &mut DualEncoder,
    scorers: &[RewardModel],
    cfg: &TTAConfig,
    momentum: Option<&mut MomentumBuffer>,
) -> Result<(Vec<usize>, EpisodeTrace)> {
    cfg.validate()?;
    let started = Instant::now();
    if gallery.is_empty() {
        return Err(Error::EmptyInput("retrieval gallery"));
    }
    if cfg.k > gallery.len() {
        return Err(Error::invalid(format!(
            "K={} exceeds gallery size {}",
            cfg.k,
            gallery.len()
        )));
    }
    let task = cfg.task;
    match (task, query, gallery) {
        (Task::RetrieveT2i, RetrievalQuery::Text(_), Gallery::Images(_)) => {}
        (Task::RetrieveI2t, RetrievalQuery::Image(_), Gallery::Texts(_)) => {}
        _ => {
            return Err(Error::config(
                "retrieval task/query/gallery combination is inconsistent",
            ))
        }
    }
    // query-branch projection only
    let tunable = crate::pipelines::tunable_blocks(task, cfg.mode)?;
    student.params_mut().set_trainable_exactly(tunable)?;

    let mut ep = EpisodeState::begin(
        student.params(),
        OptimizerConfig { lr: cfg.lr, weight_decay: cfg.weight_decay },
    );
    let _rng = episode_rng(cfg.seed, sample_id); // no augmentation for queries

    // gallery side is frozen for the whole episode
    let gallery_table = gallery_embeds(student, gallery)?;
    let scale = student.logit_scale();

    // scorer-side embeddings: query once, gallery items lazily
    let needs_scores = cfg.objective != Objective::None;
    let mut scorer_ctx = if needs_scores {
        Some(ScorerContext::new(scorers, query, gallery)?)
    } else {
        None
    };

    let gallery_scores = |model: &DualEncoder, table: &Tensor2| -> Result<Vec<f64>> {
        let q = match query {
            RetrievalQuery::Text(bag) => model.encode_token_set(bag)?,
            RetrievalQuery::Image(img) => model.encode_image(img)?,
        };
        Ok((0..table.rows())
            .map(|i| scale * numcore::dot(&q, table.row(i)))
            .collect())
    };

    let mut step_traces = Vec::new();
    if cfg.objective != Objective::None {
        for step in 0..cfg.steps {
            let scores = gallery_scores(student, &gallery_table)?;
            let cands = models::top_k(&scores, cfg.k)?;
            let (raw, centered) = if cfg.objective == Objective::Rlcf {
                let ctx = scorer_ctx.as_mut().expect("scorer context");
                let raw: Vec<f64> = cands
                    .iter()
                    .map(|&i| ctx.item_score(i))
                    .collect::<Result<_>>()?;
                let sig = center_rewards(&raw, cfg.k1_passthrough)?;
                (raw, sig.centered)
            } else {
                (Vec::new(), Vec::new())
            };

            let teacher_scores = match cfg.objective {
                Objective::PseudoLabel | Objective::Kd => {
                    Some(scorer_ctx.as_mut().expect("scorer context").teacher_scores()?)
                }
                _ => None,
            };

            let student_ref = &*student;
            let table_ref = &gallery_table;
            let cands_ref = &cands;
            let centered_ref = &centered;
            let objective = cfg.objective;
            let kd_t = cfg.kd_temperature;
            let teacher_ref = teacher_scores.as_deref();

            let loss_fn = move |tape: &mut Tape, vars: &TreeVars| -> Result<Val> {
                let q = match query {
                    RetrievalQuery::Text(bag) => {
                        student_ref.tape_token_set_embed(tape, vars, bag)?
                    }
                    RetrievalQuery::Image(img) => {
                        student_ref.tape_image_embed(tape, vars, img)?
                    }
                };
                let table = tape.constant(table_ref.clone());
                let sims = tape.matmul_tb(q, table)?;
                let logits = tape.scale(sims, scale)?;
                match objective {
                    Objective::Rlcf => {
                        let lp = tape.log_softmax(logits)?;
                        let picks: Vec<Val> = cands_ref
                            .iter()
                            .map(|&i| tape.pick(lp, i))
                            .collect::<Result<_>>()?;
                        reinforce_loss(tape, &picks, centered_ref)
                    }
                    Objective::EntropyMin => {
                        let p = tape.softmax(logits)?;
                        entropy_min_loss(tape, &[p])
                    }
                    Objective::PseudoLabel => {
                        let target = numcore::argmax(teacher_ref.expect("teacher"))?;
                        let lp = tape.log_softmax(logits)?;
                        pseudo_label_loss(tape, lp, target)
                    }
                    Objective::Kd => kd_loss(tape, logits, teacher_ref.expect("teacher"), kd_t),
                    Objective::None => unreachable!(),
                }
            };

            let (loss, grads) = numcore::grad(loss_fn, student.params()).map_err(|e| match e {
                Error::NonFinite { .. } => Error::EpisodeDiverged { step },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::EpisodeDiverged { step });
            }
            ep.optimizer().step(student.params_mut(), &grads)?;
            ep.advance();

            let post = gallery_scores(student, &gallery_table)?;
            let top = numcore::argmax(&post)?;
            step_traces.push(StepTrace {
                step,
                selected_views: 1,
                candidates: cands.iter().map(|i| format!("g{i}")).collect(),
                raw_scores: raw,
                centered_rewards: centered,
                loss,
                prediction: format!("g{top}"),
            });
        }
    }

    let final_scores = gallery_scores(student, &gallery_table)?;
    let ranking = models::top_k(&final_scores, final_scores.len())?;

    let theta_bar = student.params().clone();
    ep.reset(student.params_mut())?;
    if let Some(buf) = momentum {
        if let Some(new_pristine) = buf.observe(&theta_bar)? {
            student.params_mut().reset_from(&new_pristine)?;
        }
    }

    let trace = EpisodeTrace {
        sample_id,
        task,
        objective: cfg.objective,
        steps: step_traces,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        outcome: Outcome::Retrieve { ranking: ranking.clone() },
    };
    Ok((ranking, trace))
}

/// Scorer-side embeddings for one retrieval episode: the query is embedded
/// once per scorer, gallery items lazily on first use.
struct ScorerContext<'a> {
    scorers: &'a [RewardModel],
    weights: Vec<f64>,
    query_embeds: Vec<Vec<f64>>,
    /// per scorer, per gallery item
    item_embeds: Vec<Vec<Option<Vec<f64>>>>,
    gallery: &'a Gallery,
}

impl<'a> ScorerContext<'a> {
    fn new(
        scorers: &'a [RewardModel],
        query: &RetrievalQuery,
        gallery: &'a Gallery,
    ) -> Result<Self> {
        if scorers.is_empty() {
            return Err(Error::EmptyInput("reward models"));
        }
        let total: f64 = scorers.iter().map(|m| m.weight).sum();
        let weights = scorers.iter().map(|m| m.weight / total).collect();
        let query_embeds = scorers
            .iter()
            .map(|m| match query {
                RetrievalQuery::Text(bag) => m.encoder().encode_token_set(bag),
                RetrievalQuery::Image(img) => m.encoder().encode_image(img),
            })
            .collect::<Result<Vec<_>>>()?;
        let item_embeds = vec![vec![None; gallery.len()]; scorers.len()];
        Ok(Self { scorers, weights, query_embeds, item_embeds, gallery })
    }

    fn embed_item(&mut self, scorer_idx: usize, item: usize) -> Result<&[f64]> {
        if self.item_embeds[scorer_idx][item].is_none() {
            let enc = self.scorers[scorer_idx].encoder();
            let e = match self.gallery {
                Gallery::Images(items) => enc.encode_image(&items[item])?,
                Gallery::Texts(items) => enc.encode_token_set(&items[item])?,
            };
            self.item_embeds[scorer_idx][item] = Some(e);
        }
        Ok(self.item_embeds[scorer_idx][item].as_ref().expect("just filled"))
    }

    /// Weighted clipped-similarity reward of gallery item `item` vs the query.
    fn item_score(&mut self, item: usize) -> Result<f64> {
        let mut acc = 0.0;
        for si in 0..self.scorers.len() {
            let q = self.query_embeds[si].clone();
            let w = self.weights[si];
            let e = self.embed_item(si, item)?;
            acc += w * crate::reward::clip_score(e, &q)?;
        }
        Ok(acc)
    }

    /// The first scorer's raw similarity over the whole gallery (the teacher
    /// signal for pseudo-label / distillation baselines).
    fn teacher_scores(&mut self) -> Result<Vec<f64>> {
        let scale = self.scorers[0].encoder().logit_scale();
        let q = self.query_embeds[0].clone();
        (0..self.gallery.len())
            .map(|i| {
                let e = self.embed_item(0, i)?;
                Ok(scale * numcore::dot(e, &q))
            })
            .collect()
    }
}

// TextQuery is re-used by the bench layer for caption rewards; silence the
// "unused import" here where only embeddings are needed.
#[allow(unused_imports)]
use TextQuery as _;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{EncoderArch, BLOCK_IMAGE_PROJ, BLOCK_TEXT_PROJ};

    fn student() -> DualEncoder {
        let arch = EncoderArch::new(6, 6, 5);
        DualEncoder::init(
            &arch,
            &[vec![0, 1], vec![2, 3], vec![4, 5]],
            crate::models::random_token_table(10, 6, 31),
            31,
        )
        .unwrap()
    }

    fn scorer() -> RewardModel {
        let arch = EncoderArch::new(6, 8, 8);
        let enc = DualEncoder::init(
            &arch,
            &[vec![0, 1], vec![2, 3], vec![4, 5]],
            crate::models::random_token_table(10, 8, 131),
            131,
        )
        .unwrap();
        RewardModel::new("scorer", 1.0, enc).unwrap()
    }

    fn image_gallery() -> Gallery {
        Gallery::Images(vec![
            vec![0.9, 0.1, -0.2, 0.4, 0.0, 0.3],
            vec![-0.5, 0.8, 0.1, 0.0, 0.2, -0.1],
            vec![0.2, -0.3, 0.7, 0.5, -0.4, 0.1],
            vec![0.0, 0.4, -0.6, 0.2, 0.8, -0.3],
        ])
    }

    #[test]
    fn zero_steps_returns_zero_shot_ranking() {
        let mut m = student();
        let mut cfg = TTAConfig::retrieve_t2i(5);
        cfg.steps = 0;
        cfg.k = 2;
        let query = RetrievalQuery::Text(vec![0, 1]);
        let gallery = image_gallery();
        let (ranking, trace) =
            tta_retrieve(0, &query, &gallery, &mut m, &[scorer()], &cfg, None).unwrap();
        assert_eq!(ranking.len(), 4);
        assert!(trace.steps.is_empty());

        // must equal a direct scoring pass
        let table = gallery_embeds(&m, &gallery).unwrap();
        let q = m.encode_token_set(&[0, 1]).unwrap();
        let scores: Vec<f64> = (0..4).map(|i| numcore::dot(&q, table.row(i))).collect();
        assert_eq!(ranking, models::top_k(&scores, 4).unwrap());
    }

    #[test]
    fn k_beyond_gallery_is_error() {
        let mut m = student();
        let mut cfg = TTAConfig::retrieve_t2i(5);
        cfg.k = 9;
        let r = tta_retrieve(
            0,
            &RetrievalQuery::Text(vec![0]),
            &image_gallery(),
            &mut m,
            &[scorer()],
            &cfg,
            None,
        );
        assert!(r.is_err());
    }

    #[test]
    fn mismatched_direction_is_config_error() {
        let mut m = student();
        let cfg = TTAConfig::retrieve_t2i(5);
        let r = tta_retrieve(
            0,
            &RetrievalQuery::Image(vec![0.0; 6]),
            &image_gallery(),
            &mut m,
            &[scorer()],
            &cfg,
            None,
        );
        assert!(r.is_err());
    }

    #[test]
    fn non_query_branch_is_bit_identical_through_adaptation() {
        let mut m = student();
        let before = m.params().clone();
        let mut cfg = TTAConfig::retrieve_t2i(5);
        cfg.k = 3;
        cfg.steps = 4;
        cfg.lr = 1e-3; // move hard enough to notice any leak
        let (_, trace) = tta_retrieve(
            3,
            &RetrievalQuery::Text(vec![0, 1]),
            &image_gallery(),
            &mut m,
            &[scorer()],
            &cfg,
            None,
        )
        .unwrap();
        assert_eq!(trace.steps.len(), 4);
        // episodic reset restores everything bitwise
        for b in m.params().blocks() {
            assert!(b.tensor.bit_eq(before.get(&b.name).unwrap()));
        }
        // and during the episode only text_proj was trainable
        assert!(m.params().is_trainable(BLOCK_TEXT_PROJ));
        assert!(!m.params().is_trainable(BLOCK_IMAGE_PROJ));
    }

    #[test]
    fn i2t_direction_tunes_image_branch() {
        let mut m = student();
        let mut cfg = TTAConfig::retrieve_i2t(5);
        cfg.k = 2;
        cfg.steps = 1;
        let gallery = Gallery::Texts(vec![vec![0, 1], vec![2, 3], vec![4, 5]]);
        let query = RetrievalQuery::Image(vec![0.9, 0.1, -0.2, 0.4, 0.0, 0.3]);
        tta_retrieve(0, &query, &gallery, &mut m, &[scorer()], &cfg, None).unwrap();
        assert!(m.params().is_trainable(BLOCK_IMAGE_PROJ));
        assert!(!m.params().is_trainable(BLOCK_TEXT_PROJ));
    }

    #[test]
    fn rewards_center_to_zero_per_step() {
        let mut m = student();
        let mut cfg = TTAConfig::retrieve_t2i(5);
        cfg.k = 3;
        cfg.steps = 2;
        let (_, trace) = tta_retrieve(
            9,
            &RetrievalQuery::Text(vec![2, 3]),
            &image_gallery(),
            &mut m,
            &[scorer()],
            &cfg,
            None,
        )
        .unwrap();
        for st in trace.steps {
            assert!(st.centered_rewards.iter().sum::<f64>().abs() < 1e-9);
        }
    }
}
