//! Quantize random latents against an EMA codebook and watch the codebook
//! track the data.
//!
//!     cargo run --release --example vector_quantization

use dsvq::codebook::{codebook_stats, ema_update, quantize, to_vectors, Codebook};
use dsvq::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dsvq::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut cb = Codebook::new(64, 8, 0.9, 1e-5, &mut rng);
    for step in 0..20 {
        let z = Tensor::randn(&[4, 8, 2, 3, 2], 1.0, &mut rng);
        let q = quantize(&z, &cb, 0.25)?;
        let stats = codebook_stats(&q.indices, cb.codes());
        if step % 5 == 0 {
            println!(
                "step {step:>2}: loss {:.4}, usage {:.2}, perplexity {:.1}",
                q.vq_loss, stats.usage, stats.perplexity
            );
        }
        ema_update(&mut cb, &to_vectors(&z), &q.indices)?;
    }
    Ok(())
}
