//! Sweep the sampling factor K: how many candidates are scored per step.
//! K = 1 degenerates to pseudo-labeling the model's own top-1 (with the
//! passthrough reward); larger K lets negative feedback push wrong classes
//! away but dilutes the gradient.
//!
//! ```text
//! cargo run --example sweep_sampling_factor
//! ```

use rlcf::bench::{cmd_sweep, RunConfig};
use rlcf::Result;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("rlcf_example_sweep");
    let overrides: Vec<(String, String)> = [
        ("seed", "0"),
        ("classes", "12"),
        ("target_samples", "400"),
        ("source_eval_samples", "200"),
        ("n_views", "16"),
        ("sweep_k", "1,2,3,5,7"),
        ("pretrain_if_missing", "true"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .chain([
        ("out_dir".to_string(), dir.join("out").display().to_string()),
        ("bench_dir".to_string(), dir.join("bench").display().to_string()),
        ("ckpt_dir".to_string(), dir.join("ckpt").display().to_string()),
    ])
    .collect();
    let cfg = RunConfig::from_sources(None, &overrides)?;

    println!("sweeping K over {:?} on {} shifted samples ...", cfg.sweep_k, cfg.target_samples);
    let path = cmd_sweep(&cfg)?;
    print!("{}", std::fs::read_to_string(&path)?);
    println!("\nfull per-combination artifacts under {}", cfg.out_dir.join("sweep").display());
    Ok(())
}
