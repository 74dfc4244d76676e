//! One classification episode in slow motion: augment a single shifted test
//! image, keep the confident views, score each view's top-K classes with the
//! frozen scorer, and watch the policy-gradient steps move the prediction.
//!
//! ```text
//! cargo run --example adapt_classify
//! ```

use rlcf::bench::experiment::token_table_of;
use rlcf::bench::{gen_benchmark, BenchmarkSpec};
use rlcf::models::{pretrain_contrastive, EncoderArch, PretrainConfig};
use rlcf::pipelines::{tta_classify, Outcome, TTAConfig};
use rlcf::reward::RewardModel;
use rlcf::Result;

fn main() -> Result<()> {
    let mut spec = BenchmarkSpec::desk_default(0);
    spec.classes = 10;
    spec.target_samples = 400;
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
    let mut student =
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

    // find a shifted sample the student gets wrong
    let (idx, image, label) = bench
        .target_eval
        .images
        .iter()
        .zip(&bench.target_eval.labels)
        .enumerate()
        .find_map(|(i, (img, &label))| {
            (student.predict(img).unwrap() != label).then(|| (i, img.clone(), label))
        })
        .expect("some shifted sample is misclassified");
    println!(
        "sample {idx}: true class {label}, zero-shot prediction {}",
        student.predict(&image)?
    );

    let tta = TTAConfig::classify_prompt(0);
    println!(
        "adapting: {} steps, K={}, {} views, keep bottom {:.0}% by entropy, lr {}",
        tta.steps,
        tta.k,
        tta.n_views,
        tta.rho * 100.0,
        tta.lr
    );
    let (prediction, trace) =
        tta_classify(idx as u64, &image, &mut student, &[scorer], &tta, None)?;

    for step in &trace.steps {
        println!(
            "  step {}: {} views kept, loss {:+.4}, prediction {}",
            step.step, step.selected_views, step.loss, step.prediction
        );
        // first selected view's candidate set with raw and centered rewards
        for i in 0..tta.k.min(step.candidates.len()) {
            println!(
                "      candidate {:<4} reward {:.3} (centered {:+.3})",
                step.candidates[i], step.raw_scores[i], step.centered_rewards[i]
            );
        }
    }
    if let Outcome::Classify { confidence, zero_shot, .. } = trace.outcome {
        println!(
            "final prediction {prediction} (true {label}), confidence {confidence:.3}, zero-shot was {zero_shot}"
        );
    }
    println!("episode wall time: {:.1} ms; weights restored bit-exactly", trace.wall_ms);
    Ok(())
}
