//! Generate a synthetic domain-shift benchmark, contrastively pretrain the
//! small student and the wider scorer, and measure the zero-shot gap the
//! shift opens up. Checkpoints round-trip through the manifest+blob format.
//!
//! ```text
//! cargo run --example pretrain_models
//! ```

use rlcf::bench::experiment::token_table_of;
use rlcf::bench::{gen_benchmark, BenchmarkSpec};
use rlcf::checkpoint::Checkpoint;
use rlcf::models::{pretrain_contrastive, DualEncoder, EncoderArch, PairSet, PretrainConfig};
use rlcf::Result;

fn accuracy(model: &DualEncoder, set: &PairSet) -> Result<f64> {
    let mut correct = 0;
    for (img, &label) in set.images.iter().zip(&set.labels) {
        correct += (model.predict(img)? == label) as usize;
    }
    Ok(correct as f64 / set.len() as f64)
}

fn main() -> Result<()> {
    let mut spec = BenchmarkSpec::desk_default(0);
    spec.classes = 10;
    spec.target_samples = 800;
    spec.source_eval_samples = 800;
    let bench = gen_benchmark(&spec)?;
    println!(
        "benchmark: {} classes, d_in {}, shift {:.1}, {} target samples",
        spec.classes, spec.d_in, spec.shift, spec.target_samples
    );

    let token_table = token_table_of(&bench)?;

    let student_cfg = PretrainConfig {
        arch: EncoderArch::new(spec.d_in, spec.d_tok, 16),
        classes: spec.classes,
        pairs_per_class: spec.student_pairs_per_class,
        epochs: 25,
        lr: 3e-3,
        temperature: 0.1,
        seed: 1,
    };
    let student = pretrain_contrastive(
        &student_cfg,
        &bench.student_train,
        &bench.class_attrs,
        token_table.clone(),
    )?;
    println!(
        "student pretrained: d_emb {}, final epoch loss {:.4}",
        16,
        student.epoch_losses.last().unwrap()
    );

    // the scorer is wider and also saw a slice of shifted data
    let scorer_cfg = PretrainConfig {
        arch: EncoderArch::new(spec.d_in, spec.d_tok, 48),
        pairs_per_class: spec.scorer_pairs_per_class,
        seed: 2,
        ..student_cfg.clone()
    };
    let scorer = pretrain_contrastive(
        &scorer_cfg,
        &bench.scorer_train,
        &bench.class_attrs,
        token_table,
    )?;

    for (name, model) in [("student", &student.model), ("scorer ", &scorer.model)] {
        let src = accuracy(model, &bench.source_eval)?;
        let tgt = accuracy(model, &bench.target_eval)?;
        println!("{name}: source top-1 {src:.3}   shifted target top-1 {tgt:.3}");
    }

    // checkpoints are a text manifest plus a little-endian f32 blob
    let dir = std::env::temp_dir().join("rlcf_example_ckpt");
    let stem = dir.join("student");
    student.model.to_checkpoint().save(&stem)?;
    let loaded = DualEncoder::from_checkpoint(&Checkpoint::load(&stem)?)?;
    let tgt_loaded = accuracy(&loaded, &bench.target_eval)?;
    println!(
        "checkpoint round-trip at {}: target top-1 {tgt_loaded:.3} (32-bit storage)",
        stem.display()
    );
    Ok(())
}
