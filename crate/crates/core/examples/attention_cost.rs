//! Analytic cost of full versus axis-factorized attention, with measured
//! run times of the factorized kernel.
//!
//!     cargo run --release --example attention_cost

use dsvq::attention::{attention_cost, time_factorized_attention, AttentionMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dsvq::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    println!("{:>12} {:>14} {:>18} {:>10} {:>12}", "shape", "factorized", "full", "ratio", "seconds");
    for d in [8, 16, 24, 32] {
        let shape = [d, d, d];
        let fact = attention_cost(shape, AttentionMode::Factorized);
        let full = attention_cost(shape, AttentionMode::Full);
        let secs = time_factorized_attention(shape, 4, 16, 0.2, &mut rng)?;
        println!(
            "{:>12} {fact:>14} {full:>18} {:>10.2} {secs:>12.5}",
            format!("{d}x{d}x{d}"),
            full as f64 / fact as f64
        );
    }
    Ok(())
}
