//! Generate a small paired-modality phantom dataset and inspect one subject.
//!
//!     cargo run --release --example phantom_dataset -- /tmp/phantoms

use dsvq::volume::{generate_dataset, generate_phantom_pair, DatasetSpec, Modality};

fn main() -> dsvq::Result<()> {
    let pair = generate_phantom_pair(7, [32, 48, 32], 6)?;
    println!("subject shape {:?}, attribute {}", pair.shape(), pair.attribute);
    for label in 0..=pair.labels.n_structures() {
        let mean = |m: Modality| {
            let v = pair.volume(m).data();
            let (sum, n) = pair
                .labels
                .labels()
                .iter()
                .zip(v)
                .filter(|(&l, _)| l == label)
                .fold((0.0f64, 0usize), |(s, n), (_, &x)| (s + x as f64, n + 1));
            sum / n.max(1) as f64
        };
        println!(
            "label {label}: {:>6} voxels, mean A {:.3}, mean B {:.3}",
            pair.labels.count(label),
            mean(Modality::A),
            mean(Modality::B)
        );
    }

    let out = std::env::args().nth(1).unwrap_or_else(|| "phantoms".into());
    let spec = DatasetSpec {
        n_subjects: 20,
        shape: [32, 48, 32],
        n_structures: 6,
        seed: 0,
        split_fracs: [0.8, 0.1, 0.1],
    };
    let summary = generate_dataset(&spec, &out)?;
    println!(
        "wrote {} (train/val/test {:?}, attribute imbalance {:.3})",
        summary.manifest.display(),
        summary.counts,
        summary.attribute_imbalance
    );
    Ok(())
}
