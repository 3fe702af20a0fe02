//! Score a checkpoint on a dataset split: PSNR, SSIM, Dice, probes, swaps.
//!
//!     cargo run --release --example evaluate_checkpoint -- runs/desk/final.nqck data/desk/manifest.jsonl

use dsvq::evaluation::{evaluate, EvalOptions};
use dsvq::training::load_checkpoint;
use dsvq::volume::{load_split, Split};

fn main() -> dsvq::Result<()> {
    let mut args = std::env::args().skip(1);
    let (Some(ckpt), Some(manifest)) = (args.next(), args.next()) else {
        eprintln!("usage: evaluate_checkpoint <checkpoint> <manifest.jsonl>");
        std::process::exit(2);
    };
    let model = load_checkpoint(&ckpt)?.model()?;
    let train = load_split(&manifest, Split::Train)?;
    let test = load_split(&manifest, Split::Test)?;
    let ev = evaluate(&model, &ckpt, "test", &train, &test, &EvalOptions::default())?;
    for m in &ev.report.modalities {
        println!(
            "{}: PSNR {:.2} dB, SSIM {:.4}, Dice {:?}",
            m.modality,
            m.psnr_mean,
            m.ssim_mean,
            m.dice_per_structure.iter().map(|d| format!("{d:.3}")).collect::<Vec<_>>()
        );
    }
    for s in &ev.report.swap {
        println!("swap {}->{}: L1 {:.4}, transfer {:.3}", s.source, s.target, s.swap_l1, s.modality_transfer_score);
    }
    println!("codebook usage {:.3}, perplexity {:.1}", ev.report.codebook.usage, ev.report.codebook.perplexity);
    Ok(())
}
