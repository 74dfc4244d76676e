//! Episode semantics across sample streams: order independence, momentum
//! commit boundaries, scorer immutability, and the constructed
//! wrong-prediction fixture that separates reward feedback from entropy
//! minimization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rlcf::adapt::MomentumBuffer;
use rlcf::models::{random_token_table, DualEncoder, EncoderArch};
use rlcf::numcore::Tensor2;
use rlcf::pipelines::{tta_classify, Objective, TTAConfig};
use rlcf::reward::RewardModel;

fn student(seed: u64, logit_scale: f64) -> DualEncoder {
    let arch = EncoderArch { logit_scale, ..EncoderArch::new(6, 5, 5) };
    DualEncoder::init(
        &arch,
        &[vec![0, 1], vec![2, 3], vec![4, 5]],
        random_token_table(6, 5, seed),
        seed,
    )
    .unwrap()
}

fn scorer(seed: u64) -> RewardModel {
    let arch = EncoderArch::new(6, 8, 8);
    let enc = DualEncoder::init(
        &arch,
        &[vec![0, 1], vec![2, 3], vec![4, 5]],
        random_token_table(6, 8, seed),
        seed,
    )
    .unwrap();
    RewardModel::new("scorer", 1.0, enc).unwrap()
}

fn stream(n: usize) -> Vec<(u64, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    (0..n)
        .map(|i| (i as u64, Tensor2::gaussian(1, 6, 1.0, &mut rng).data().to_vec()))
        .collect()
}

/// Episodic mode: per-sample predictions are identical under any stream order.
#[test]
fn episodic_predictions_are_order_independent() {
    let samples = stream(50);
    let sc = scorer(40);
    let mut cfg = TTAConfig::classify_prompt(7);
    cfg.n_views = 6;

    let run_order = |order: &[usize]| -> Vec<(u64, usize)> {
        let mut m = student(11, 100.0);
        order
            .iter()
            .map(|&i| {
                let (id, img) = &samples[i];
                let (pred, _) =
                    tta_classify(*id, img, &mut m, std::slice::from_ref(&sc), &cfg, None).unwrap();
                (*id, pred)
            })
            .collect()
    };

    let forward: Vec<usize> = (0..50).collect();
    let mut reversed = forward.clone();
    reversed.reverse();
    let mut a = run_order(&forward);
    let mut b = run_order(&reversed);
    a.sort();
    b.sort();
    assert_eq!(a, b, "per-sample outputs must not depend on stream order");
}

/// With the momentum buffer, outputs may depend on order only through
/// committed checkpoint updates: before the first commit boundary they are
/// order-independent.
#[test]
fn momentum_outputs_diverge_only_after_commit() {
    let samples = stream(12);
    let sc = scorer(41);
    let mut cfg = TTAConfig::classify_prompt(9);
    cfg.n_views = 6;
    cfg.momentum.enabled = true;
    cfg.momentum.m = 0.5;
    cfg.momentum.interval = 8;

    type Preds = Vec<(u64, usize)>;
    let run_order = |order: &[usize]| -> (Preds, Preds) {
        let mut m = student(13, 100.0);
        let mut buf = MomentumBuffer::new(
            {
                m.params_mut().set_trainable_exactly(&["prompt"]).unwrap();
                m.params()
            },
            cfg.momentum.m,
            cfg.momentum.interval,
        )
        .unwrap();
        let mut pre_commit = Vec::new();
        let mut post_commit = Vec::new();
        for (pos, &i) in order.iter().enumerate() {
            let (id, img) = &samples[i];
            let (pred, _) =
                tta_classify(*id, img, &mut m, std::slice::from_ref(&sc), &cfg, Some(&mut buf))
                    .unwrap();
            if pos < 8 {
                pre_commit.push((*id, pred));
            } else {
                post_commit.push((*id, pred));
            }
        }
        (pre_commit, post_commit)
    };

    // permute only the first 8 samples (the pre-commit window)
    let forward: Vec<usize> = (0..12).collect();
    let permuted: Vec<usize> = vec![5, 2, 7, 0, 3, 6, 1, 4, 8, 9, 10, 11];
    let (mut pre_a, _) = run_order(&forward);
    let (mut pre_b, _) = run_order(&permuted);
    pre_a.sort();
    pre_b.sort();
    assert_eq!(
        pre_a, pre_b,
        "pre-commit episodes all start from the same checkpoint"
    );
}

/// Scorer parameters receive no gradient in any adaptation mode: they are
/// bit-identical after arbitrary episodes.
#[test]
fn scorer_is_never_mutated() {
    let sc = scorer(42);
    let before = sc.encoder().params().clone();
    let mut m = student(17, 100.0);
    let mut cfg = TTAConfig::classify_prompt(3);
    cfg.n_views = 6;
    for (id, img) in stream(5) {
        tta_classify(id, &img, &mut m, std::slice::from_ref(&sc), &cfg, None).unwrap();
    }
    assert!(sc.encoder().params().bit_eq(&before));
}

/// Constructed two-class fixture: the student's argmax is wrong and the
/// scorer favors the truth. Reward feedback flips the argmax within 3 steps;
/// entropy minimization on the same fixture stays stuck on the wrong class.
#[test]
fn feedback_flips_wrong_prediction_where_entropy_cannot() {
    // pinned search: a soft student (small logit scale ⇒ usable gradients)
    // and an image it misreads while the scorer reads it correctly
    let mut found = None;
    'outer: for model_seed in 0..20u64 {
        let st = student(model_seed, 8.0);
        let sc = scorer(model_seed + 500);
        let mut rng = ChaCha8Rng::seed_from_u64(999);
        for _ in 0..400 {
            let img = Tensor2::gaussian(1, 6, 1.0, &mut rng).data().to_vec();
            let true_class = sc.encoder().predict(&img).unwrap();
            let ranked = rlcf::models::top_k(&st.class_logits_all(&img).unwrap(), 2).unwrap();
            // the truth sits at the student's rank 2, so it enters the K = 2
            // candidate set; the scorer must hand it a clearly larger clipped
            // reward than the wrong class or the centered signal vanishes
            if ranked[0] != true_class && ranked[1] == true_class {
                let logits = st.class_logits_all(&img).unwrap();
                let margin = logits[ranked[0]] - logits[true_class];
                let image_embed = sc.encoder().encode_image(&img).unwrap();
                let score = |class: usize| {
                    let text = sc.encoder().encode_class_text(class).unwrap();
                    rlcf::reward::clip_score(&text, &image_embed).unwrap()
                };
                // a clear (not hairline) student margin and a decisive reward
                // gap: the interesting regime, away from coin-flip ties
                if margin > 0.15
                    && margin < 0.6
                    && score(true_class) > 0.4
                    && score(true_class) - score(ranked[0]) > 0.2
                {
                    found = Some((st, sc, img, true_class, ranked[0]));
                    break 'outer;
                }
            }
        }
    }
    let (st, sc, img, true_class, wrong) = found.expect("fixture search failed");

    let mut cfg = TTAConfig::classify_prompt(1);
    cfg.n_views = 1; // clean view only: the comparison is about the objective
    cfg.k = 2;
    cfg.steps = 3;
    cfg.lr = 0.05; // sized to the fixture's logit margin at scale 8

    let mut adapted = st.clone();
    let (pred, trace) =
        tta_classify(0, &img, &mut adapted, std::slice::from_ref(&sc), &cfg, None).unwrap();
    assert_eq!(pred, true_class, "reward feedback should flip {wrong} → {true_class}");
    assert!(trace.steps.len() <= 3);

    let mut cfg_e = cfg.clone();
    cfg_e.objective = Objective::EntropyMin;
    let mut adapted = st.clone();
    let (pred_e, _) =
        tta_classify(0, &img, &mut adapted, std::slice::from_ref(&sc), &cfg_e, None).unwrap();
    assert_eq!(
        pred_e, wrong,
        "entropy minimization sharpens the existing wrong prediction"
    );
}
