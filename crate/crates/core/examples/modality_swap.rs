//! Decode one subject's anatomy with the other modality's FiLM parameters.
//!
//!     cargo run --release --example modality_swap -- runs/desk/final.nqck
//!
//! Without a checkpoint a freshly initialized model is used; its FiLM heads
//! start at the identity, so the swap equals the plain reconstruction of A.

use dsvq::model::{swap_ssim, Model};
use dsvq::training::{load_checkpoint, TrainConfig};
use dsvq::volume::{generate_phantom_pair, Modality};

fn main() -> dsvq::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => load_checkpoint(path)?.model()?,
        None => Model::new(&TrainConfig::desk().model_config(), 0)?,
    };
    let pair = generate_phantom_pair(3, [32, 48, 32], 6)?;
    let (a, b) = (pair.vol_a.to_tensor(), pair.vol_b.to_tensor());
    let recon_b = model.reconstruct(&b, &[Modality::B])?;
    // Anatomy from A, style from B: should look like B.
    let a_as_b = model.swap(&a, &b, &[Modality::B])?;
    println!("SSIM(recon B, B)  {:.4}", swap_ssim(&recon_b, &b)?);
    println!("SSIM(swap A->B, B) {:.4}", swap_ssim(&a_as_b, &b)?);
    println!("SSIM(swap A->B, A) {:.4}", swap_ssim(&a_as_b, &a)?);
    Ok(())
}
