//! Save a trainer mid-run, reload it, and confirm the forward pass and the
//! continued trajectory are unchanged bit for bit.
//!
//!     cargo run --release --example checkpoint_round_trip

use dsvq::training::{load_checkpoint, TrainConfig, Trainer};
use dsvq::volume::{generate_phantom_pair, Modality};

fn main() -> dsvq::Result<()> {
    let data = (0..4)
        .map(|s| generate_phantom_pair(s, [16, 16, 16], 4))
        .collect::<dsvq::Result<Vec<_>>>()?;
    let mut cfg = TrainConfig::desk();
    cfg.steps_3d = 4;
    cfg.steps_2d = 2;
    cfg.batch_3d = 2;
    cfg.batch_2d = 4;
    cfg.encoder.channels = vec![4, 8, 8, 8];
    cfg.decoder.base_channels = 8;
    cfg.decoder.channels = vec![8, 4, 4, 2];
    cfg.quantizer.codes = 16;

    let mut trainer = Trainer::new(&cfg)?;
    for _ in 0..3 {
        trainer.step_once(&data)?;
    }
    let path = std::env::temp_dir().join("dsvq-example.nqck");
    trainer.save(&path)?;
    let mut resumed = Trainer::from_checkpoint(&load_checkpoint(&path)?, Some(&cfg))?;

    let x = data[0].vol_a.to_tensor();
    let same_forward = trainer.model.reconstruct(&x, &[Modality::A])?.data()
        == resumed.model.reconstruct(&x, &[Modality::A])?.data();
    let (a, b) = (trainer.step_once(&data)?, resumed.step_once(&data)?);
    println!("forward identical after reload: {same_forward}");
    println!("next-step loss {:.6} vs {:.6}", a.total, b.total);
    std::fs::remove_file(&path).ok();
    Ok(())
}
