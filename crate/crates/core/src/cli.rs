//! Command-line front end: one subcommand per workflow. Every command writes
//! a JSON snapshot of its effective settings next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;

use crate::attention::{attention_cost, time_factorized_attention, AttentionMode};
use crate::error::{Error, Result};
use crate::evaluation::{
    encode_latents, evaluate, probe_eval, write_evaluation, EvalOptions, EvalReport, ProbeReport, REPORT_FILE,
};
use crate::model::Model;
use crate::training::{
    load_checkpoint, run_schedule, Ablation, RunStatus, TrainConfig, FINAL_CHECKPOINT_FILE, PHASE1_CHECKPOINT_FILE,
};
use crate::volume::{generate_dataset, load_split, DatasetSpec, Modality, Split};

/// Exit code for invalid input (flags, configs, data contracts).
pub const EXIT_VALIDATION: u8 = 2;
/// Exit code for failures while running.
pub const EXIT_RUNTIME: u8 = 3;
/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "NQ_SEED";

#[derive(Debug, Parser)]
#[command(name = "dsvq", version, about = "Dual-stream vector-quantized autoencoder for paired 3D volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a paired-modality phantom dataset with a subject-level split.
    GenData(GenDataArgs),
    /// Run the two-phase training schedule.
    Train(TrainArgs),
    /// Reconstruction fidelity, structure Dice and attribute probe.
    Eval(EvalArgs),
    /// Cross-modal swap study in both directions.
    Swap(EvalArgs),
    /// Linear probes on frozen anatomical latents.
    Probe(ProbeArgs),
    /// Analytic (and optionally measured) attention cost per shape.
    AttnBench(AttnBenchArgs),
    /// Train and evaluate every ablation arm over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 250)]
    pub n_subjects: usize,
    /// Volume shape as DxHxW.
    #[arg(long, default_value = "32x48x32", value_parser = parse_shape)]
    pub shape: [usize; 3],
    #[arg(long, default_value_t = 6)]
    pub n_structures: u8,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train, val and test fractions.
    #[arg(long, default_value = "0.8,0.1,0.1", value_parser = parse_fracs)]
    pub split_fracs: [f64; 3],
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// JSON config; its fields override the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long)]
    pub ablate: Option<Ablation>,
    /// Dataset manifest (overrides the config's).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub report: PathBuf,
    /// Subjects whose triptych PNGs are written, per modality (0 disables).
    #[arg(long, default_value_t = 4)]
    pub images: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct ProbeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Split the probe is scored on; it is fitted on the train split.
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub report: PathBuf,
    /// Permute the attribute labels before fitting (chance-level control).
    #[arg(long)]
    pub shuffle_labels: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct AttnBenchArgs {
    /// Shapes as DxHxW, comma separated.
    #[arg(long, default_value = "8x8x8,16x16x16,24x24x24,32x32x32", value_parser = parse_shape, value_delimiter = ',')]
    pub shapes: Vec<[usize; 3]>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also time the factorized attention kernel.
    #[arg(long)]
    pub empirical: bool,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 16)]
    pub d_k: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "ablation")]
    pub preset: String,
    /// Seeds, comma separated.
    #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Arms to run; `no-jt` reuses the full arm's end-of-phase-1 checkpoint.
    #[arg(long, default_value = "+mfilm,+cross,+adv,no-jt", value_delimiter = ',')]
    pub arms: Vec<Ablation>,
    #[arg(long, default_value = "val")]
    pub split: Split,
}

fn parse_shape(s: &str) -> std::result::Result<[usize; 3], String> {
    let dims: Vec<usize> = s
        .split(['x', 'X'])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    dims.try_into().map_err(|_| format!("shape `{s}` must be DxHxW"))
}

fn parse_fracs(s: &str) -> std::result::Result<[f64; 3], String> {
    let f: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    f.try_into().map_err(|_| format!("expected three fractions, got `{s}`"))
}

/// Parse arguments, run, and map the outcome to the exit-code contract.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Swap(a) => swap(&a),
        Command::Probe(a) => probe(&a),
        Command::AttnBench(a) => attn_bench(&a),
        Command::Ablate(a) => ablate(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Snapshot of the invocation, written next to a command's outputs.
fn snapshot(dir: &Path, command: &str, args: &impl Serialize) -> Result<()> {
    create_dir(dir)?;
    let value = serde_json::json!({ "command": command, "args": args });
    write_json(&dir.join(format!("{command}_args.json")), &value)
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Invalid(format!("{SEED_ENV}=`{s}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = DatasetSpec {
        n_subjects: a.n_subjects,
        shape: a.shape,
        n_structures: a.n_structures,
        seed: env_seed()?.unwrap_or(a.seed),
        split_fracs: a.split_fracs,
    };
    spec.validate()?;
    snapshot(&a.out, "gen-data", a)?;
    write_json(&a.out.join("dataset.json"), &spec)?;
    let summary = generate_dataset(&spec, &a.out)?;
    println!(
        "wrote {} subjects (train/val/test {:?}, attribute imbalance {:.3}) to {}",
        spec.n_subjects,
        summary.counts,
        summary.attribute_imbalance,
        summary.manifest.display()
    );
    Ok(())
}

/// Overlay the JSON object `patch` onto `base`, key by key.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Resolve the effective training config: preset, then the config file,
/// then the ablation mask, data flag and seed override.
pub fn resolve_train_config(
    preset: &str,
    config: Option<&Path>,
    ablate: Option<Ablation>,
    data: Option<&Path>,
) -> Result<TrainConfig> {
    let mut value = serde_json::to_value(TrainConfig::preset(preset)?)?;
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        merge(&mut value, patch);
    }
    let mut cfg: TrainConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(vec![format!("config: {e}")]))?;
    if let Some(arm) = ablate {
        arm.apply(&mut cfg);
    }
    if let Some(d) = data {
        cfg.manifest = Some(d.to_path_buf());
    }
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&a.preset, a.config.as_deref(), a.ablate, a.data.as_deref())?;
    let manifest = cfg
        .manifest
        .clone()
        .ok_or_else(|| Error::Config(vec!["no dataset manifest: pass --data or set `manifest`".into()]))?;
    snapshot(&a.out, "train", a)?;
    let data = load_split(&manifest, Split::Train)?;
    let outcome = run_schedule(&cfg, &data, &a.out, a.resume.as_deref())?;
    match outcome.status {
        RunStatus::AlreadyComplete => println!("complete: {} steps already done", outcome.steps),
        RunStatus::Completed => println!(
            "completed {} steps; final checkpoint {}",
            outcome.steps,
            outcome.final_checkpoint.display()
        ),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct AttnBenchRow {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub factorized_units: u128,
    pub full_units: u128,
    pub ratio: f64,
    pub seconds: Option<f64>,
}

pub fn attn_bench_rows(shapes: &[[usize; 3]], empirical: bool, heads: usize, d_k: usize) -> Result<Vec<AttnBenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(env_seed()?.unwrap_or(0));
    shapes
        .iter()
        .map(|&s| {
            if s.contains(&0) {
                return Err(Error::Invalid(format!("shape {s:?} has an empty axis")));
            }
            let fact = attention_cost(s, AttentionMode::Factorized);
            let full = attention_cost(s, AttentionMode::Full);
            let seconds = if empirical {
                Some(time_factorized_attention(s, heads, d_k, 0.2, &mut rng)?)
            } else {
                None
            };
            Ok(AttnBenchRow {
                d: s[0],
                h: s[1],
                w: s[2],
                factorized_units: fact,
                full_units: full,
                ratio: full as f64 / fact as f64,
                seconds,
            })
        })
        .collect()
}

fn attn_bench(a: &AttnBenchArgs) -> Result<()> {
    let rows = attn_bench_rows(&a.shapes, a.empirical, a.heads, a.d_k)?;
    let mut csv = String::from("D,H,W,factorized_units,full_units,ratio");
    if a.empirical {
        csv.push_str(",seconds");
    }
    csv.push('\n');
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{},{:.6}", r.d, r.h, r.w, r.factorized_units, r.full_units, r.ratio));
        if let Some(s) = r.seconds {
            csv.push_str(&format!(",{s:.6e}"));
        }
        csv.push('\n');
    }
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        snapshot(dir, "attn-bench", a)?;
    }
    fs::write(&a.out, csv).map_err(|e| Error::io(&a.out, e))?;
    print!("{}", fs::read_to_string(&a.out).map_err(|e| Error::io(&a.out, e))?);
    Ok(())
}

/// Load a checkpoint's model plus a short identifier for reports.
pub fn load_model(ckpt: &Path) -> Result<(Model, String)> {
    let c = load_checkpoint(ckpt)?;
    let name = ckpt.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let id = format!("{name}@{}#{}", c.step(), &c.manifest.config_hash[..12]);
    Ok((c.model()?, id))
}

fn eval_with(a: &EvalArgs, command: &str, opts: EvalOptions) -> Result<EvalReport> {
    snapshot(&a.report, command, a)?;
    let (model, id) = load_model(&a.ckpt)?;
    let pairs = load_split(&a.data, a.split)?;
    let train = if opts.probes || opts.swap {
        load_split(&a.data, Split::Train)?
    } else {
        Vec::new()
    };
    let ev = evaluate(&model, &id, a.split.name(), &train, &pairs, &opts)?;
    write_evaluation(&ev, &a.report)?;
    Ok(ev.report)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let r = eval_with(
        a,
        "eval",
        EvalOptions {
            probes: true,
            swap: true,
            images: a.images,
        },
    )?;
    for m in &r.modalities {
        println!(
            "{:?}: PSNR {:.2} dB  SSIM {:.4}  Dice {:.4}  attribute probe {}",
            m.modality,
            m.psnr_mean,
            m.ssim_mean,
            m.dice_mean,
            m.probe_accuracy.map_or("-".into(), |v| format!("{v:.3}"))
        );
    }
    println!(
        "codebook usage {:.3} perplexity {:.1}; report {}",
        r.codebook.usage,
        r.codebook.perplexity,
        a.report.join(REPORT_FILE).display()
    );
    Ok(())
}

fn swap(a: &EvalArgs) -> Result<()> {
    let r = eval_with(
        a,
        "swap",
        EvalOptions {
            probes: false,
            swap: true,
            images: a.images,
        },
    )?;
    for s in &r.swap {
        println!(
            "{:?}->{:?}: L1 {:.4}  SSIM {:.4} (baseline {:.4})  transfer {:.3}",
            s.source, s.target, s.swap_l1, s.swap_ssim, s.baseline_ssim, s.modality_transfer_score
        );
    }
    Ok(())
}

/// Permute labels with a seeded shuffle.
fn shuffled(labels: &mut [bool], rng: &mut ChaCha8Rng) {
    use rand::seq::SliceRandom;
    labels.shuffle(rng);
}

fn probe(a: &ProbeArgs) -> Result<()> {
    snapshot(&a.report, "probe", a)?;
    let (model, id) = load_model(&a.ckpt)?;
    let train_pairs = load_split(&a.data, Split::Train)?;
    let test_pairs = load_split(&a.data, a.split)?;
    let encode = |pairs| -> Result<[_; 2]> {
        Ok([
            encode_latents(&model, pairs, Modality::A)?,
            encode_latents(&model, pairs, Modality::B)?,
        ])
    };
    let mut train = encode(&train_pairs)?;
    let mut test = encode(&test_pairs)?;
    if a.shuffle_labels {
        let mut rng = ChaCha8Rng::seed_from_u64(env_seed()?.unwrap_or(0));
        for set in train.iter_mut().chain(test.iter_mut()) {
            shuffled(&mut set.attributes, &mut rng);
        }
    }
    let report: ProbeReport = probe_eval(&train, &test)?;
    let value = serde_json::json!({
        "checkpoint": id,
        "split": a.split.name(),
        "shuffled_labels": a.shuffle_labels,
        "probe": report,
    });
    write_json(&a.report.join("probe.json"), &value)?;
    println!(
        "attribute probe A {:.3} B {:.3}; modality probe {:.3}",
        report.attribute_a.test_accuracy, report.attribute_b.test_accuracy, report.modality.test_accuracy
    );
    Ok(())
}

/// Metrics of one ablation arm and seed.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct ArmResult {
    pub arm: Ablation,
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub modality_probe_accuracy: f64,
    pub swap_l1: f64,
}

/// Paired directional comparisons across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct AblationSummary {
    pub results: Vec<ArmResult>,
    /// Seeds where the full model's PSNR is >= the no-joint-training one's.
    pub joint_training_wins: usize,
    /// Seeds where the adversarial term lowers (or keeps) modality-probe
    /// accuracy on anatomical latents.
    pub adversarial_wins: usize,
    /// Seeds where the cross-modal term lowers swap L1.
    pub cross_wins: usize,
    pub seeds: usize,
}

impl AblationSummary {
    pub fn from_results(results: Vec<ArmResult>) -> Self {
        let mut seeds: Vec<u64> = results.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let get = |arm, seed| results.iter().find(|r| r.arm == arm && r.seed == seed);
        let count = |a: Ablation, b: Ablation, win: &dyn Fn(&ArmResult, &ArmResult) -> bool| {
            seeds
                .iter()
                .filter(|&&s| matches!((get(a, s), get(b, s)), (Some(x), Some(y)) if win(x, y)))
                .count()
        };
        let joint_training_wins = count(Ablation::Adv, Ablation::NoJointTraining, &|x, y| x.mean_psnr >= y.mean_psnr);
        let adversarial_wins = count(Ablation::Adv, Ablation::Cross, &|x, y| {
            x.modality_probe_accuracy <= y.modality_probe_accuracy
        });
        let cross_wins = count(Ablation::Cross, Ablation::MFilm, &|x, y| x.swap_l1 < y.swap_l1);
        Self {
            joint_training_wins,
            adversarial_wins,
            cross_wins,
            seeds: seeds.len(),
            results,
        }
    }
}

pub const ABLATION_SUMMARY_FILE: &str = "summary.json";

/// Train (or resume) one arm into `dir`; returns its final checkpoint.
fn train_arm(cfg: &TrainConfig, data: &[crate::volume::PairedSample], dir: &Path) -> Result<PathBuf> {
    let final_path = dir.join(FINAL_CHECKPOINT_FILE);
    if final_path.exists() {
        return Ok(final_path);
    }
    let partial = dir.join(crate::training::CHECKPOINT_FILE);
    let resume = partial.exists().then_some(partial);
    Ok(run_schedule(cfg, data, dir, resume.as_deref())?.final_checkpoint)
}

fn ablate(a: &AblateArgs) -> Result<()> {
    snapshot(&a.out, "ablate", a)?;
    let train = load_split(&a.data, Split::Train)?;
    let held = load_split(&a.data, a.split)?;
    let mut results = Vec::new();
    for &seed in &a.seeds {
        let arm_cfg = |arm: Ablation| -> Result<TrainConfig> {
            let mut cfg = TrainConfig::preset(&a.preset)?;
            arm.apply(&mut cfg);
            cfg.seed = seed;
            cfg.manifest = Some(a.data.clone());
            cfg.validate()?;
            Ok(cfg)
        };
        let seed_dir = a.out.join(format!("seed-{seed}"));
        for &arm in &a.arms {
            // The planar phase starts where the volumetric phase of the full
            // arm ends, so the no-joint-training arm is that arm's
            // end-of-phase-1 checkpoint (identical by determinism).
            let ckpt = if arm == Ablation::NoJointTraining {
                let full_dir = seed_dir.join(Ablation::Adv.name());
                train_arm(&arm_cfg(Ablation::Adv)?, &train, &full_dir)?;
                full_dir.join(PHASE1_CHECKPOINT_FILE)
            } else {
                train_arm(&arm_cfg(arm)?, &train, &seed_dir.join(arm.name()))?
            };
            let (model, id) = load_model(&ckpt)?;
            let ev = evaluate(&model, &id, a.split.name(), &train, &held, &EvalOptions::default())?;
            write_evaluation(&ev, &seed_dir.join(format!("{}-eval", arm.name())))?;
            let r = &ev.report;
            let result = ArmResult {
                arm,
                seed,
                checkpoint: ckpt,
                mean_psnr: r.mean_psnr(),
                mean_ssim: r.modalities.iter().map(|m| m.ssim_mean).sum::<f64>() / 2.0,
                modality_probe_accuracy: r.probe.as_ref().map_or(f64::NAN, |p| p.modality.test_accuracy),
                swap_l1: r.mean_swap_l1(),
            };
            eprintln!(
                "seed {seed} {:>6}: PSNR {:.2} SSIM {:.4} modality probe {:.3} swap L1 {:.4}",
                arm.name(),
                result.mean_psnr,
                result.mean_ssim,
                result.modality_probe_accuracy,
                result.swap_l1
            );
            results.push(result);
        }
    }
    let summary = AblationSummary::from_results(results);
    write_json(&a.out.join(ABLATION_SUMMARY_FILE), &summary)?;
    println!(
        "over {} seeds: joint training >= no-jt in {}, adversarial lowers modality probe in {}, cross lowers swap L1 in {}",
        summary.seeds, summary.joint_training_wins, summary.adversarial_wins, summary.cross_wins
    );
    Ok(())
}
