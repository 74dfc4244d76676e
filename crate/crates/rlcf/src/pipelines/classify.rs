//! Fully test-time adaptation for zero-shot classification.
//!
//! Per step: augment the test image, keep the most confident views, take each
//! selected view's top-K classes, score them with the frozen scorer ensemble,
//! center on the mean, and update the tunable block (prompt or image
//! projection) with the policy-gradient surrogate averaged across views. The
//! final prediction is the argmax on the clean image with the adapted
//! weights; afterwards the episode resets bit-exactly.

use std::time::Instant;

use crate::adapt::{
    entropy_min_loss, kd_loss, pseudo_label_loss, reinforce_loss, EpisodeState,
    MomentumBuffer, OptimizerConfig,
};
use crate::error::{Error, Result};
use crate::models::{self, DualEncoder};
use crate::numcore::{self, Tensor2, Val};
use crate::pipelines::{
    augment_views, confidence_select, episode_rng, EpisodeTrace, Objective, Outcome, StepTrace,
    TTAConfig, Task, TuneMode,
};
use crate::reward::{center_rewards, EpisodeRewardCache, RewardModel};

pub fn tta_classify(
    sample_id: u64,
    image: &[f64],
    student: &mut DualEncoder,
    scorers: &[RewardModel],
    cfg: &TTAConfig,
    momentum: Option<&mut MomentumBuffer>,
) -> Result<(usize, EpisodeTrace)> {
    cfg.validate()?;
    let started = Instant::now();
    let n_classes = student.n_classes();
    if cfg.k > n_classes {
        return Err(Error::invalid(format!(
            "K={} exceeds the {} available classes",
            cfg.k, n_classes
        )));
    }
    let tunable = crate::pipelines::tunable_blocks(Task::Classify, cfg.mode)?;
    student.params_mut().set_trainable_exactly(tunable)?;

    let zero_shot = student.predict(image)?;
    let mut ep = EpisodeState::begin(
        student.params(),
        OptimizerConfig { lr: cfg.lr, weight_decay: cfg.weight_decay },
    );
    let mut rng = episode_rng(cfg.seed, sample_id);

    let needs_teacher = matches!(cfg.objective, Objective::PseudoLabel | Objective::Kd);
    let teacher_logits = if needs_teacher {
        let teacher = scorers
            .first()
            .ok_or(Error::EmptyInput("reward models"))?;
        Some(teacher.encoder().class_logits_all(image)?)
    } else {
        None
    };
    let mut reward_cache = if cfg.objective == Objective::Rlcf {
        Some(EpisodeRewardCache::new(scorers, image)?)
    } else {
        None
    };
    // encoder tuning never moves the text branch: class embeddings are
    // computed once per episode; prompt tuning recomputes them on the tape
    // after every update
    let h_const = match cfg.mode {
        TuneMode::Encoder => Some(class_embed_table(student)?),
        _ => None,
    };

    let mut step_traces = Vec::new();
    if cfg.objective != Objective::None {
        for step in 0..cfg.steps {
            let views = augment_views(image, cfg.n_views, &mut rng);
            let selected = confidence_select(&views, student, cfg.rho)?;

            let mut cand_labels = Vec::new();
            let mut raw_flat = Vec::new();
            let mut centered_flat = Vec::new();
            // per selected view: (view index, top-K candidates, centered rewards)
            let mut view_plans: Vec<(usize, Vec<usize>, Vec<f64>)> = Vec::new();
            if cfg.objective == Objective::Rlcf {
                let cache = reward_cache.as_mut().expect("cache built for rlcf");
                for &vi in &selected {
                    let logits = student.class_logits_all(&views[vi])?;
                    let cands = models::top_k(&logits, cfg.k)?;
                    let raw: Vec<f64> = cands
                        .iter()
                        .map(|&c| cache.class_score(c))
                        .collect::<Result<_>>()?;
                    let sig = center_rewards(&raw, cfg.k1_passthrough)?;
                    for (c, (r, ctr)) in cands.iter().zip(raw.iter().zip(&sig.centered)) {
                        cand_labels.push(format!("c{c}"));
                        raw_flat.push(*r);
                        centered_flat.push(*ctr);
                    }
                    view_plans.push((vi, cands, sig.centered));
                }
            }

            let teacher_ref = teacher_logits.as_deref();
            let views_ref = &views;
            let selected_ref = &selected;
            let plans_ref = &view_plans;
            let h_const_ref = h_const.as_ref();
            let student_ref = &*student;
            let objective = cfg.objective;
            let kd_t = cfg.kd_temperature;

            let loss_fn = move |tape: &mut crate::numcore::Tape,
                                vars: &crate::numcore::TreeVars|
                  -> Result<Val> {
                let mut per_view = Vec::new();
                match objective {
                    Objective::Rlcf => {
                        for (vi, cands, centered) in plans_ref {
                            let logits =
                                tape_view_logits(student_ref, tape, vars, &views_ref[*vi], h_const_ref)?;
                            let lp = tape.log_softmax(logits)?;
                            let picks: Vec<Val> = cands
                                .iter()
                                .map(|&c| tape.pick(lp, c))
                                .collect::<Result<_>>()?;
                            per_view.push(reinforce_loss(tape, &picks, centered)?);
                        }
                    }
                    Objective::EntropyMin => {
                        let mut probs = Vec::new();
                        for &vi in selected_ref {
                            let logits =
                                tape_view_logits(student_ref, tape, vars, &views_ref[vi], h_const_ref)?;
                            probs.push(tape.softmax(logits)?);
                        }
                        return entropy_min_loss(tape, &probs);
                    }
                    Objective::PseudoLabel => {
                        let target = numcore::argmax(teacher_ref.expect("teacher built"))?;
                        for &vi in selected_ref {
                            let logits =
                                tape_view_logits(student_ref, tape, vars, &views_ref[vi], h_const_ref)?;
                            let lp = tape.log_softmax(logits)?;
                            per_view.push(pseudo_label_loss(tape, lp, target)?);
                        }
                    }
                    Objective::Kd => {
                        let teacher = teacher_ref.expect("teacher built");
                        for &vi in selected_ref {
                            let logits =
                                tape_view_logits(student_ref, tape, vars, &views_ref[vi], h_const_ref)?;
                            per_view.push(kd_loss(tape, logits, teacher, kd_t)?);
                        }
                    }
                    Objective::None => unreachable!("loop not entered for objective none"),
                }
                tape.mean_of(&per_view)
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

            let prediction = student.predict(image)?;
            step_traces.push(StepTrace {
                step,
                selected_views: selected.len(),
                candidates: cand_labels,
                raw_scores: raw_flat,
                centered_rewards: centered_flat,
                loss,
                prediction: format!("c{prediction}"),
            });
        }
    }

    let final_logits = student.class_logits_all(image)?;
    let prediction = numcore::argmax(&final_logits)?;
    let confidence = numcore::softmax(&final_logits)?[prediction];
    let top5 = models::top_k(&final_logits, n_classes.min(5))?;

    let theta_bar = student.params().clone();
    ep.reset(student.params_mut())?;
    if let Some(buf) = momentum {
        if let Some(new_pristine) = buf.observe(&theta_bar)? {
            student.params_mut().reset_from(&new_pristine)?;
        }
    }

    let trace = EpisodeTrace {
        sample_id,
        task: Task::Classify,
        objective: cfg.objective,
        steps: step_traces,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        outcome: Outcome::Classify { prediction, confidence, zero_shot, top5 },
    };
    Ok((prediction, trace))
}

/// Class-text embedding table as a plain tensor (one unit row per class).
fn class_embed_table(model: &DualEncoder) -> Result<Tensor2> {
    let mut rows = Vec::with_capacity(model.n_classes() * model.d_emb());
    for c in 0..model.n_classes() {
        rows.extend(model.encode_class_text(c)?);
    }
    Tensor2::from_vec(model.n_classes(), model.d_emb(), rows)
}

/// `1×C` class logits for one view. With a precomputed table the image branch
/// lives on the tape (encoder tuning); otherwise the text branch does
/// (prompt tuning) and the view's image embedding enters as a constant.
fn tape_view_logits(
    model: &DualEncoder,
    tape: &mut crate::numcore::Tape,
    vars: &crate::numcore::TreeVars,
    view: &[f64],
    h_const: Option<&Tensor2>,
) -> Result<Val> {
    match h_const {
        Some(table) => {
            let u = model.tape_image_embed(tape, vars, view)?;
            let h = tape.constant(table.clone());
            model.tape_logits_from(tape, u, h)
        }
        None => {
            let u = tape.constant_row(&model.encode_image(view)?)?;
            let h = model.tape_class_embeds(tape, vars)?;
            model.tape_logits_from(tape, u, h)
        }
    }
}
