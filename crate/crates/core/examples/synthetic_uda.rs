//! Trains on three synthetic sessions, adapts to the fourth without labels
//! and compares against a shared batch norm.
//!
//! cargo run --release -p tmknet --example synthetic_uda

use tmknet::data::{synth_generate, SynthSpec};
use tmknet::experiment::{run_uda, RunConfig};

fn main() -> tmknet::Result<()> {
    let ds = synth_generate(&SynthSpec {
        seed: 7,
        ..SynthSpec::default()
    })?;
    let mut cfg = RunConfig {
        epochs: 12,
        batch_size: 48,
        domains_per_batch: 3,
        ..RunConfig::default()
    };
    cfg.model.stem.n_t = 16;
    cfg.model.stem.n_s = 24;
    cfg.model.backbone.n_b = 8;

    let (_, dsbn) = run_uda(&cfg, &ds)?;
    cfg.model.shared_bn = true;
    let (_, shared) = run_uda(&cfg, &ds)?;
    println!("target accuracy with DSBN      {:.3}", dsbn.target.accuracy);
    println!("target accuracy with shared BN {:.3}", shared.target.accuracy);
    Ok(())
}
