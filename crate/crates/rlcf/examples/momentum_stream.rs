//! Incremental learning with the momentum buffer: adapted weights from each
//! episode are folded into an exponential shadow, which is committed back as
//! the new pristine checkpoint every `interval` samples.
//!
//! ```text
//! cargo run --example momentum_stream
//! ```

use rlcf::adapt::MomentumBuffer;
use rlcf::bench::experiment::token_table_of;
use rlcf::bench::{gen_benchmark, BenchmarkSpec};
use rlcf::models::{pretrain_contrastive, EncoderArch, PretrainConfig};
use rlcf::pipelines::{tta_classify, TTAConfig};
use rlcf::reward::RewardModel;
use rlcf::Result;

fn main() -> Result<()> {
    let mut spec = BenchmarkSpec::desk_default(0);
    spec.classes = 10;
    spec.target_samples = 512;
    let bench = gen_benchmark(&spec)?;
    let table = token_table_of(&bench)?;

    let mut cfg = PretrainConfig {
        arch: EncoderArch::new(spec.d_in, spec.d_tok, 16),
        classes: spec.classes,
        pairs_per_class: spec.student_pairs_per_class,
        epochs: 25,
        lr: 3e-3,
        temperature: 0.1,
        seed: 1,
    };
    let student0 =
        pretrain_contrastive(&cfg, &bench.student_train, &bench.class_attrs, table.clone())?
            .model;
    cfg.arch.d_emb = 48;
    cfg.pairs_per_class = spec.scorer_pairs_per_class;
    cfg.seed = 2;
    let scorer = RewardModel::new(
        "scorer",
        1.0,
        pretrain_contrastive(&cfg, &bench.scorer_train, &bench.class_attrs, table)?.model,
    )?;

    let mut tta = TTAConfig::classify_prompt(0);
    tta.n_views = 16;
    tta.momentum.enabled = true;
    tta.momentum.m = 0.995; // fast shadow at this stream length
    tta.momentum.interval = 64;

    // run the same stream with and without the buffer
    for enabled in [false, true] {
        let mut student = student0.clone();
        student.params_mut().set_trainable_exactly(&["prompt"])?;
        let mut buf = if enabled {
            Some(MomentumBuffer::new(student.params(), tta.momentum.m, tta.momentum.interval)?)
        } else {
            None
        };
        let mut correct = 0usize;
        let mut commits = Vec::new();
        let mut last = student.params().clone();
        for (i, (img, &label)) in bench
            .target_eval
            .images
            .iter()
            .zip(&bench.target_eval.labels)
            .enumerate()
        {
            let (pred, _) =
                tta_classify(i as u64, img, &mut student, std::slice::from_ref(&scorer), &tta, buf.as_mut())?;
            correct += (pred == label) as usize;
            if !student.params().bit_eq(&last) {
                commits.push(i + 1);
                last = student.params().clone();
            }
        }
        let acc = correct as f64 / bench.target_eval.len() as f64;
        if enabled {
            println!("with momentum buffer:    top-1 {acc:.4}, checkpoint commits at samples {commits:?}");
        } else {
            println!("episodic only (no buffer): top-1 {acc:.4}");
        }
    }
    Ok(())
}
