//! Tour of the gradient engine: build a small two-branch scoring model on the
//! tape, differentiate a policy-gradient surrogate, and confirm the analytic
//! gradient against central finite differences.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use rlcf::adapt::reinforce_loss;
use rlcf::models::{random_token_table, top_k, DualEncoder, EncoderArch};
use rlcf::numcore::{eval, finite_diff, grad, max_relative_error, Tape, TreeVars, Val};
use rlcf::reward::center_rewards;
use rlcf::Result;

fn main() -> Result<()> {
    // a fresh random dual encoder with 4 classes; only the prompt learns
    let arch = EncoderArch::new(6, 5, 4);
    let mut model = DualEncoder::init(
        &arch,
        &[vec![0], vec![1], vec![2], vec![3]],
        random_token_table(4, 5, 7),
        7,
    )?;
    model.params_mut().set_trainable_exactly(&["prompt"])?;

    let image = vec![0.8, -0.3, 0.5, 0.1, -0.6, 0.4];
    let logits = model.class_logits_all(&image)?;
    let candidates = top_k(&logits, 3)?;
    println!("zero-shot logits: {logits:.3?}");
    println!("top-3 candidates: {candidates:?}");

    // pretend the scorer graded the candidates; center on the mean
    let raw = [1.61, 0.42, 0.77];
    let signal = center_rewards(&raw, true)?;
    println!("raw rewards {raw:?} -> centered {:.3?}", signal.centered);

    // surrogate: L = -(1/K) Σ R_k log P(candidate_k | image)
    let model_ref = &model;
    let image_ref = &image;
    let cands = &candidates;
    let centered = &signal.centered;
    let loss_fn = move |tape: &mut Tape, vars: &TreeVars| -> Result<Val> {
        let u = model_ref.tape_image_embed(tape, vars, image_ref)?;
        let h = model_ref.tape_class_embeds(tape, vars)?;
        let logits = model_ref.tape_logits_from(tape, u, h)?;
        let lp = tape.log_softmax(logits)?;
        let picks: Vec<Val> = cands
            .iter()
            .map(|&c| tape.pick(lp, c))
            .collect::<Result<_>>()?;
        reinforce_loss(tape, &picks, centered)
    };

    let value = eval(loss_fn, model.params())?;
    let (value2, analytic) = grad(loss_fn, model.params())?;
    assert_eq!(value, value2);
    println!("surrogate loss: {value:.6}");

    let numeric = finite_diff(loss_fn, model.params(), 1e-5)?;
    let err = max_relative_error(&analytic, &numeric);
    println!("max relative error, analytic vs central differences: {err:.2e}");
    assert!(err < 1e-4);

    // frozen blocks carry exactly zero gradient
    for (name, g) in analytic.blocks() {
        let nonzero = g.data().iter().filter(|v| **v != 0.0).count();
        println!("  d/d {name:<12} -> {nonzero} nonzero entries of {}", g.len());
    }
    Ok(())
}
