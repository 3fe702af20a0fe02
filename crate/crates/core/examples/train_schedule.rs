//! Run a short two-phase schedule (volumetric, then joint planar/volumetric)
//! on in-memory phantoms with a scaled-down model.
//!
//!     cargo run --release --example train_schedule -- /tmp/run

use dsvq::training::{run_schedule, TrainConfig};
use dsvq::volume::generate_phantom_pair;

fn main() -> dsvq::Result<()> {
    let data = (0..8)
        .map(|s| generate_phantom_pair(s, [16, 16, 16], 4))
        .collect::<dsvq::Result<Vec<_>>>()?;
    let mut cfg = TrainConfig::desk();
    cfg.steps_3d = 40;
    cfg.steps_2d = 10;
    cfg.batch_3d = 4;
    cfg.batch_2d = 8;
    cfg.encoder.channels = vec![8, 16, 16, 32];
    cfg.decoder.base_channels = 32;
    cfg.decoder.channels = vec![16, 16, 8, 8];
    cfg.quantizer.codes = 64;
    cfg.lr_start = 1e-3;
    cfg.log_every = 10;
    cfg.checkpoint_every = 0;
    let out = std::env::args().nth(1).unwrap_or_else(|| "run-example".into());
    let outcome = run_schedule(&cfg, &data, out.as_ref(), None)?;
    if let Some(last) = outcome.last {
        println!(
            "{} steps; final rec {:.4}, perplexity {:.1}; checkpoint {}",
            outcome.steps,
            last.l_rec,
            last.perplexity,
            outcome.final_checkpoint.display()
        );
    }
    Ok(())
}
