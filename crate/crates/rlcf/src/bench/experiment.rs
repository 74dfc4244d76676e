//! Experiment orchestration: asset preparation, the per-objective evaluation
//! loops, results tables, traces, and sweeps.
//!
//! Every objective in a run sees the identical sample stream (same benchmark,
//! same per-sample seeds), so rows are directly comparable. Result tables are
//! deterministic for a fixed config+seed; wall-clock numbers go to a separate
//! timing file and into the trace records.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::adapt::MomentumBuffer;
use crate::bench::config::RunConfig;
use crate::bench::gen::{gen_benchmark, ShiftBenchmark};
use crate::bench::metrics::{caption_attribute_f1, ece, recall_at_k, MetricsReport};
use crate::captioner::{pretrain_captioner, ToyCaptioner};
use crate::error::{Error, Result};
use crate::models::{pretrain_contrastive, top_k, DualEncoder};
use crate::numcore;
use crate::pipelines::{
    tta_caption, tta_classify, tta_retrieve, EpisodeTrace, Gallery, Objective, Outcome,
    RetrievalQuery, Task, TTAConfig,
};
use crate::reward::RewardModel;

/// The benchmark's shared token table as a tensor.
pub fn token_table_of(bench: &ShiftBenchmark) -> Result<crate::numcore::Tensor2> {
    let rows = bench.attr_tokens.len();
    let cols = bench.attr_tokens.first().map(Vec::len).unwrap_or(0);
    let flat: Vec<f64> = bench.attr_tokens.iter().flatten().copied().collect();
    crate::numcore::Tensor2::from_vec(rows, cols, flat)
}

pub struct Assets {
    pub bench: ShiftBenchmark,
    pub student: DualEncoder,
    pub scorers: Vec<RewardModel>,
    pub captioner: Option<ToyCaptioner>,
}

/// Generate the benchmark file for the current config.
pub fn cmd_genbench(cfg: &RunConfig) -> Result<PathBuf> {
    let path = cfg.bench_path();
    let bench = gen_benchmark(&cfg.bench_spec())?;
    bench.save(&path)?;
    Ok(path)
}

fn load_or_gen_bench(cfg: &RunConfig, allow_build: bool) -> Result<ShiftBenchmark> {
    let path = cfg.bench_path();
    if path.is_file() {
        return ShiftBenchmark::load(&path);
    }
    if allow_build {
        let bench = gen_benchmark(&cfg.bench_spec())?;
        bench.save(&path)?;
        return Ok(bench);
    }
    Err(Error::config(format!(
        "benchmark file {} not found; run `rlcf genbench` first or set pretrain_if_missing = true",
        path.display()
    )))
}

/// Pretrain student, scorer(s), and captioner checkpoints from the benchmark.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let bench = load_or_gen_bench(cfg, true)?;
    let mut written = Vec::new();

    let token_table = token_table_of(&bench)?;
    let student = pretrain_contrastive(
        &cfg.student_pretrain(),
        &bench.student_train,
        &bench.class_attrs,
        token_table.clone(),
    )?
    .model;
    let path = cfg.student_ckpt();
    student.to_checkpoint().save(&path)?;
    written.push(path);

    for i in 0..cfg.n_reward_models {
        let scorer = pretrain_contrastive(
            &cfg.scorer_pretrain(i),
            &bench.scorer_train,
            &bench.class_attrs,
            token_table.clone(),
        )?
        .model;
        let path = cfg.scorer_ckpt(i);
        scorer.to_checkpoint().save(&path)?;
        written.push(path);
    }

    // captioner consumes the student's image embeddings
    let mut cap_cfg = cfg.caption_pretrain();
    cap_cfg.n_words = bench.attr_vocab;
    if cap_cfg.max_len < cfg.attrs_per_class + 2 {
        return Err(Error::config(format!(
            "cap_max_len {} cannot fit {} attributes plus BOS/EOS",
            cap_cfg.max_len, cfg.attrs_per_class
        )));
    }
    let cap_data: Vec<(Vec<f64>, Vec<usize>)> = bench
        .student_train
        .images
        .iter()
        .zip(&bench.student_train.labels)
        .map(|(img, &label)| {
            let embed = student.encode_image(img)?;
            let mut attrs = bench.class_attrs[label].clone();
            attrs.sort_unstable();
            let mut tokens = vec![bench.attr_vocab]; // BOS
            tokens.extend(attrs);
            tokens.push(bench.attr_vocab + 1); // EOS
            Ok((embed, tokens))
        })
        .collect::<Result<_>>()?;
    let (captioner, _) = pretrain_captioner(&cap_cfg, &cap_data)?;
    let path = cfg.captioner_ckpt();
    captioner.to_checkpoint().save(&path)?;
    written.push(path);

    Ok(written)
}

/// Load everything a run needs, pretraining on the fly when allowed.
pub fn prepare(cfg: &RunConfig) -> Result<Assets> {
    let allow = cfg.pretrain_if_missing;
    let bench = load_or_gen_bench(cfg, allow)?;

    let needs_pretrain = !crate::checkpoint::Checkpoint::exists(&cfg.student_ckpt())
        || (0..cfg.n_reward_models)
            .any(|i| !crate::checkpoint::Checkpoint::exists(&cfg.scorer_ckpt(i)))
        || (cfg.task == Task::Caption
            && !crate::checkpoint::Checkpoint::exists(&cfg.captioner_ckpt()));
    if needs_pretrain {
        if !allow {
            return Err(Error::MissingCheckpoint {
                path: cfg.student_ckpt().display().to_string(),
            });
        }
        cmd_pretrain(cfg)?;
    }

    let student =
        DualEncoder::from_checkpoint(&crate::checkpoint::Checkpoint::load(&cfg.student_ckpt())?)?;
    let mut scorers = Vec::with_capacity(cfg.n_reward_models);
    for i in 0..cfg.n_reward_models {
        let enc = DualEncoder::from_checkpoint(&crate::checkpoint::Checkpoint::load(
            &cfg.scorer_ckpt(i),
        )?)?;
        scorers.push(RewardModel::new(
            format!("scorer{i}"),
            cfg.reward_weights[i],
            enc,
        )?);
    }
    let captioner = if cfg.task == Task::Caption {
        Some(ToyCaptioner::from_checkpoint(
            &crate::checkpoint::Checkpoint::load(&cfg.captioner_ckpt())?,
        )?)
    } else {
        None
    };
    Ok(Assets { bench, student, scorers, captioner })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "-".to_string(),
    }
}

fn results_row(r: &MetricsReport) -> String {
    format!(
        "{:<16} {:>7} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>12} {:>11} {:>14}\n",
        r.objective,
        r.samples,
        fmt_opt(r.top1),
        fmt_opt(r.top5),
        fmt_opt(r.ece),
        fmt_opt(r.recall_at_1),
        fmt_opt(r.recall_at_5),
        fmt_opt(r.recall_at_10),
        fmt_opt(r.mean_reward_gain),
        fmt_opt(r.caption_f1),
        fmt_opt(r.mean_caption_reward),
    )
}

fn results_header(cfg: &RunConfig) -> String {
    let mut s = format!(
        "# task={} mode={} shift={:.2} seed={} variant={} steps={} k={}\n",
        cfg.task.name(),
        cfg.mode.name(),
        cfg.shift,
        cfg.seed,
        cfg.variant.name(),
        cfg.steps,
        cfg.k
    );
    s.push_str(&format!(
        "{:<16} {:>7} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>12} {:>11} {:>14}\n",
        "objective",
        "samples",
        "top1",
        "top5",
        "ece",
        "r@1",
        "r@5",
        "r@10",
        "reward_gain",
        "caption_f1",
        "caption_reward"
    ));
    s
}

/// Run one experiment: every configured objective over the identical sample
/// stream. Writes `results.txt` (deterministic), `summary.txt`
/// (deterministic), `timing.txt`, and one JSONL trace file per objective.
/// Completed rows are flushed as they finish.
pub fn run_experiment(cfg: &RunConfig) -> Result<Vec<MetricsReport>> {
    let assets = prepare(cfg)?;
    fs::create_dir_all(cfg.out_dir.join("traces"))?;
    let results_path = cfg.out_dir.join("results.txt");
    let mut results = fs::File::create(&results_path)?;
    results.write_all(results_header(cfg).as_bytes())?;
    results.flush()?;

    let mut reports = Vec::new();
    for &objective in &cfg.objectives {
        let (report, traces) = run_objective(cfg, &assets, objective)?;
        report.check_invariants()?;
        write_traces(&cfg.out_dir.join("traces").join(format!("{}.jsonl", objective.name())), &traces)?;
        results.write_all(results_row(&report).as_bytes())?;
        results.flush()?;
        reports.push(report);
    }

    // the scorer's own zero-shot row, for student-vs-scorer comparisons
    if cfg.task == Task::Classify {
        let report = scorer_zero_shot_report(&assets)?;
        results.write_all(results_row(&report).as_bytes())?;
        results.flush()?;
        reports.push(report);
    }

    write_summary(&cfg.out_dir.join("summary.txt"), cfg, &reports)?;
    write_timing(&cfg.out_dir.join("timing.txt"), &reports)?;
    Ok(reports)
}

fn write_traces(path: &Path, traces: &[EpisodeTrace]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for t in traces {
        let line = serde_json::to_string(t)
            .map_err(|e| Error::invalid(format!("trace serialization failed: {e}")))?;
        f.write_all(line.as_bytes())?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

fn write_summary(path: &Path, cfg: &RunConfig, reports: &[MetricsReport]) -> Result<()> {
    let mut s = format!(
        "objective comparison on one sample stream (task={}, seed={})\n",
        cfg.task.name(),
        cfg.seed
    );
    let baseline = reports.iter().find(|r| r.objective == "none");
    for r in reports {
        if r.objective == "none" {
            continue;
        }
        match cfg.task {
            Task::Classify => {
                if let (Some(t), Some(b)) = (r.top1, baseline.and_then(|b| b.top1)) {
                    s.push_str(&format!(
                        "{:<16} top1 {:.4} vs zero-shot {:.4} ({:+.4})",
                        r.objective,
                        t,
                        b,
                        t - b
                    ));
                    if let (Some(e), Some(be)) = (r.ece, baseline.and_then(|b| b.ece)) {
                        s.push_str(&format!("  ece {:.4} (zero-shot {:.4})", e, be));
                    }
                    s.push('\n');
                }
            }
            Task::RetrieveT2i | Task::RetrieveI2t => {
                if let (Some(t), Some(b)) = (r.recall_at_1, baseline.and_then(|b| b.recall_at_1)) {
                    s.push_str(&format!(
                        "{:<16} r@1 {:.4} vs zero-shot {:.4} ({:+.4})\n",
                        r.objective,
                        t,
                        b,
                        t - b
                    ));
                }
            }
            Task::Caption => {
                if let (Some(t), Some(b)) = (r.caption_f1, baseline.and_then(|b| b.caption_f1)) {
                    s.push_str(&format!(
                        "{:<16} attr-f1 {:.4} vs zero-shot {:.4} ({:+.4})  reward {} (zero-shot {})\n",
                        r.objective,
                        t,
                        b,
                        t - b,
                        fmt_opt(r.mean_caption_reward),
                        fmt_opt(baseline.and_then(|b| b.mean_caption_reward)),
                    ));
                }
            }
        }
    }
    fs::write(path, s)?;
    Ok(())
}

fn write_timing(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut s = String::from("# mean wall-clock per sample (ms); not part of the result tables\n");
    for r in reports {
        s.push_str(&format!("{:<16} {:.3}\n", r.objective, r.mean_wall_ms));
    }
    fs::write(path, s)?;
    Ok(())
}

fn scorer_zero_shot_report(assets: &Assets) -> Result<MetricsReport> {
    let enc = assets.scorers[0].encoder();
    let eval = &assets.bench.target_eval;
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    let mut confs = Vec::with_capacity(eval.len());
    let mut correct = Vec::with_capacity(eval.len());
    for (img, &label) in eval.images.iter().zip(&eval.labels) {
        let logits = enc.class_logits_all(img)?;
        let pred = numcore::argmax(&logits)?;
        let t5 = top_k(&logits, logits.len().min(5))?;
        top1 += (pred == label) as usize;
        top5 += t5.contains(&label) as usize;
        confs.push(numcore::softmax(&logits)?[pred]);
        correct.push(pred == label);
    }
    let n = eval.len();
    let mut report = MetricsReport::new("scorer_zero_shot", n);
    report.top1 = Some(top1 as f64 / n as f64);
    report.top5 = Some(top5 as f64 / n as f64);
    report.ece = Some(ece(&confs, &correct, 10)?);
    Ok(report)
}

fn run_objective(
    cfg: &RunConfig,
    assets: &Assets,
    objective: Objective,
) -> Result<(MetricsReport, Vec<EpisodeTrace>)> {
    let tta = cfg.tta_config(objective);
    match cfg.task {
        Task::Classify => run_classify(&tta, assets, objective),
        Task::RetrieveT2i | Task::RetrieveI2t => run_retrieval(&tta, assets, objective),
        Task::Caption => run_caption(&tta, assets, objective),
    }
}

fn run_classify(
    tta: &TTAConfig,
    assets: &Assets,
    objective: Objective,
) -> Result<(MetricsReport, Vec<EpisodeTrace>)> {
    let eval = &assets.bench.target_eval;
    let mut student = assets.student.clone();
    // the shadow's recurrence must cover exactly the mode's tunable blocks
    student
        .params_mut()
        .set_trainable_exactly(crate::pipelines::tunable_blocks(tta.task, tta.mode)?)?;
    let mut momentum = if tta.momentum.enabled {
        Some(MomentumBuffer::new(student.params(), tta.momentum.m, tta.momentum.interval)?)
    } else {
        None
    };

    let mut traces = Vec::with_capacity(eval.len());
    let mut top1 = 0usize;
    let mut top5_hits = 0usize;
    let mut confs = Vec::with_capacity(eval.len());
    let mut correct = Vec::with_capacity(eval.len());
    for (i, (img, &label)) in eval.images.iter().zip(&eval.labels).enumerate() {
        let (pred, trace) = tta_classify(
            i as u64,
            img,
            &mut student,
            &assets.scorers,
            tta,
            momentum.as_mut(),
        )?;
        if let Outcome::Classify { confidence, ref top5, .. } = trace.outcome {
            confs.push(confidence);
            correct.push(pred == label);
            top5_hits += top5.contains(&label) as usize;
        }
        top1 += (pred == label) as usize;
        traces.push(trace);
    }
    let n = eval.len();
    let mut report = MetricsReport::new(objective.name(), n);
    report.top1 = Some(top1 as f64 / n as f64);
    report.top5 = Some(top5_hits as f64 / n as f64);
    report.ece = Some(ece(&confs, &correct, 10)?);
    report.mean_reward_gain =
        Some(numcore::mean(&traces.iter().map(|t| t.reward_gain()).collect::<Vec<_>>()));
    report.mean_wall_ms =
        numcore::mean(&traces.iter().map(|t| t.wall_ms).collect::<Vec<_>>());
    Ok((report, traces))
}

fn run_retrieval(
    tta: &TTAConfig,
    assets: &Assets,
    objective: Objective,
) -> Result<(MetricsReport, Vec<EpisodeTrace>)> {
    let set = &assets.bench.retrieval;
    let n = set.images.len();
    let gallery = match tta.task {
        Task::RetrieveT2i => Gallery::Images(set.images.clone()),
        _ => Gallery::Texts(set.captions.clone()),
    };
    let mut student = assets.student.clone();
    student
        .params_mut()
        .set_trainable_exactly(crate::pipelines::tunable_blocks(tta.task, tta.mode)?)?;
    let mut momentum = if tta.momentum.enabled {
        Some(MomentumBuffer::new(student.params(), tta.momentum.m, tta.momentum.interval)?)
    } else {
        None
    };

    let mut traces = Vec::with_capacity(n);
    let mut rankings = Vec::with_capacity(n);
    let truths: Vec<usize> = (0..n).collect();
    for i in 0..n {
        let query = match tta.task {
            Task::RetrieveT2i => RetrievalQuery::Text(set.captions[i].clone()),
            _ => RetrievalQuery::Image(set.images[i].clone()),
        };
        let (ranking, trace) = tta_retrieve(
            i as u64,
            &query,
            &gallery,
            &mut student,
            &assets.scorers,
            tta,
            momentum.as_mut(),
        )?;
        rankings.push(ranking);
        traces.push(trace);
    }
    let mut report = MetricsReport::new(objective.name(), n);
    report.recall_at_1 = Some(recall_at_k(&rankings, &truths, 1));
    report.recall_at_5 = Some(recall_at_k(&rankings, &truths, 5));
    report.recall_at_10 = Some(recall_at_k(&rankings, &truths, 10));
    report.mean_reward_gain =
        Some(numcore::mean(&traces.iter().map(|t| t.reward_gain()).collect::<Vec<_>>()));
    report.mean_wall_ms =
        numcore::mean(&traces.iter().map(|t| t.wall_ms).collect::<Vec<_>>());
    Ok((report, traces))
}

fn run_caption(
    tta: &TTAConfig,
    assets: &Assets,
    objective: Objective,
) -> Result<(MetricsReport, Vec<EpisodeTrace>)> {
    let eval = &assets.bench.caption_eval;
    let mut captioner = assets
        .captioner
        .clone()
        .ok_or_else(|| Error::config("caption task requires a captioner checkpoint"))?;
    let extractor = &assets.student;
    captioner
        .params_mut()
        .set_trainable_exactly(crate::pipelines::tunable_blocks(tta.task, tta.mode)?)?;
    let mut momentum = if tta.momentum.enabled {
        Some(MomentumBuffer::new(captioner.params(), tta.momentum.m, tta.momentum.interval)?)
    } else {
        None
    };

    let mut traces = Vec::with_capacity(eval.len());
    let mut f1s = Vec::with_capacity(eval.len());
    let mut rewards = Vec::with_capacity(eval.len());
    for (i, (img, &label)) in eval.images.iter().zip(&eval.labels).enumerate() {
        let (result, trace) = tta_caption(
            i as u64,
            img,
            extractor,
            &mut captioner,
            &assets.scorers,
            tta,
            momentum.as_mut(),
        )?;
        let attrs = captioner.caption_attributes(&result.tokens);
        f1s.push(caption_attribute_f1(&attrs, assets.bench.caption_reference(label)));
        rewards.push(result.reward);
        traces.push(trace);
    }
    let mut report = MetricsReport::new(objective.name(), eval.len());
    report.caption_f1 = Some(numcore::mean(&f1s));
    report.mean_caption_reward = Some(numcore::mean(&rewards));
    report.mean_reward_gain =
        Some(numcore::mean(&traces.iter().map(|t| t.reward_gain()).collect::<Vec<_>>()));
    report.mean_wall_ms =
        numcore::mean(&traces.iter().map(|t| t.wall_ms).collect::<Vec<_>>());
    Ok((report, traces))
}

/// Grid sweep over seed / K / steps / lr / objective; one row per
/// combination in `sweep_results.txt`, full run artifacts under
/// `sweep/combo_*/`. Multiple seeds give the report enough rows for
/// mean ± std aggregation.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<PathBuf> {
    let seeds = if cfg.sweep_seed.is_empty() { vec![cfg.seed] } else { cfg.sweep_seed.clone() };
    let ks = if cfg.sweep_k.is_empty() { vec![cfg.k] } else { cfg.sweep_k.clone() };
    let steps = if cfg.sweep_steps.is_empty() { vec![cfg.steps] } else { cfg.sweep_steps.clone() };
    let lrs = if cfg.sweep_lr.is_empty() { vec![cfg.lr] } else { cfg.sweep_lr.clone() };
    let objectives = if cfg.sweep_objective.is_empty() {
        vec![Objective::Rlcf]
    } else {
        cfg.sweep_objective.clone()
    };

    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("sweep_results.txt");
    let mut out = fs::File::create(&path)?;
    writeln!(
        out,
        "{:<6} {:<4} {:<6} {:<10} {:<14} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>11}",
        "seed", "k", "steps", "lr", "objective", "top1", "top5", "ece", "r@1", "r@10", "f1", "reward"
    )?;

    let mut combo = 0usize;
    for &seed in &seeds {
        for &k in &ks {
            for &s in &steps {
                for &lr in &lrs {
                    for &obj in &objectives {
                        let mut sub = cfg.clone();
                        sub.seed = seed;
                        sub.k = k;
                        sub.steps = s;
                        sub.lr = lr;
                        sub.objectives = vec![obj];
                        sub.out_dir = cfg.out_dir.join(format!("sweep/combo{combo:03}"));
                        fs::create_dir_all(&sub.out_dir)?;
                        let reports = run_experiment(&sub)?;
                        let r = &reports[0];
                        writeln!(
                            out,
                            "{:<6} {:<4} {:<6} {:<10} {:<14} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>11}",
                            seed,
                            k,
                            s,
                            format!("{lr:.1e}"),
                            obj.name(),
                            fmt_opt(r.top1),
                            fmt_opt(r.top5),
                            fmt_opt(r.ece),
                            fmt_opt(r.recall_at_1),
                            fmt_opt(r.recall_at_10),
                            fmt_opt(r.caption_f1),
                            fmt_opt(r.mean_caption_reward),
                        )?;
                        out.flush()?;
                        combo += 1;
                    }
                }
            }
        }
    }
    Ok(path)
}
