//! End-to-end acceptance checks. Each criterion prints one `PASS`/`FAIL`
//! line with its measured values.
//!
//! Criteria that only need code (1-8, 12) are asserted. Criteria 9-11
//! judge artifacts of long training runs (`runs/desk`, `runs/ablation`);
//! they are evaluated and reported whenever the artifacts exist but only
//! fail the test when `DSVQ_STRICT_ACCEPTANCE=1`, so that a workstation
//! without the runs can still build and test the crate.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use dsvq::attention::{
    attention_cost, axis_attention, time_factorized_attention, AttentionMode, Axis, AxisAttentionParams,
};
use dsvq::autograd::{Graph, ParamStore};
use dsvq::cli::{AblationSummary, ABLATION_SUMMARY_FILE};
use dsvq::codebook::{codebook_stats, ema_update, quantize, quantize_graph, Codebook};
use dsvq::encoder::Encoder;
use dsvq::nn::SpatialMode;
use dsvq::evaluation::{dice, evaluate, psnr, EvalOptions};
use dsvq::model::Model;
use dsvq::objectives::ssim3d;
use dsvq::training::{load_checkpoint, StepLog, TrainConfig, Trainer, FINAL_CHECKPOINT_FILE, LOG_FILE};
use dsvq::volume::{generate_dataset, load_split, DatasetSpec, LabelMap, Modality, Split, MANIFEST_FILE};
use dsvq::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn workspace_root() -> PathBuf {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    root.canonicalize().unwrap_or(root)
}

fn report(id: usize, name: &str, o: &Outcome) {
    println!("[{}] {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn c1_encoder_shapes() -> Outcome {
    let cfg = TrainConfig::desk().encoder;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = Encoder::new(&mut store, &cfg, &mut rng).unwrap();
    let x = Tensor::uniform(&[1, 1, 32, 48, 32], 1.0, &mut rng).map(f32::abs);
    let backbone = {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let b = enc.backbone_forward(&mut g, &store, xv, SpatialMode::Volumetric).unwrap();
        g.value(b).shape().to_vec()
    };
    enc.encode_tensor(&store, &x).unwrap();
    let t = Instant::now();
    let z = enc.encode_tensor(&store, &x).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let ok = backbone == [1, 256, 2, 3, 2]
        && z.z_anat.shape() == [1, cfg.c_anat, 2, 3, 2]
        && z.z_mod.shape() == [1, cfg.c_mod, 2, 3, 2]
        && secs < 1.0;
    outcome(
        ok,
        format!(
            "backbone {backbone:?}, z_anat {:?}, z_mod {:?}, forward {secs:.3}s (< 1s)",
            z.z_anat.shape(),
            z.z_mod.shape()
        ),
    )
}

fn c2_attention_oracle() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = AxisAttentionParams::new(&mut store, "attn", 4, 2, &mut rng).unwrap();
        // Non-trivial output projection so every path is exercised.
        let w = store.get_mut(p.output.w);
        *w = Tensor::randn(w.shape(), 0.5, &mut rng);
        let x = Tensor::randn(&[1, 4, 2, 2, 2], 1.0, &mut rng);
        for axis in [Axis::D, Axis::H, Axis::W] {
            let mut g = Graph::inference();
            let xv = g.constant(x.clone());
            let y = axis_attention(&mut g, &store, xv, axis, &p).unwrap();
            let want = axis_attention_oracle(&store, &p, &x, axis);
            for (a, b) in g.value(y).data().iter().zip(&want) {
                worst = worst.max((*a as f64 - b).abs());
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-6 && secs < 10.0,
        format!("20 seeds x 3 axes, max |diff| {worst:.2e} (<= 1e-6), {secs:.2}s (< 10s)"),
    )
}

fn c3_attention_cost() -> Outcome {
    let shapes = [
        [8, 8, 8],
        [16, 16, 16],
        [32, 32, 32],
        [32, 48, 32],
        [2, 3, 2],
        [4, 6, 4],
        [1, 1, 1],
        [7, 5, 3],
        [64, 64, 64],
        [10, 20, 30],
    ];
    let mut exact = true;
    for s in shapes {
        let n = (s[0] * s[1] * s[2]) as u128;
        let full = attention_cost(s, AttentionMode::Full);
        let fact = attention_cost(s, AttentionMode::Factorized);
        // Cross-multiplied ratio check: full / fact == DHW / (D + H + W).
        exact &= full * (s[0] + s[1] + s[2]) as u128 == fact * n;
        exact &= full == n * n;
    }
    let sizes = [8.0, 16.0, 24.0, 32.0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let times: Vec<f64> = sizes
        .iter()
        .map(|&d| {
            let d = d as usize;
            time_factorized_attention([d, d, d], 4, 16, 0.3, &mut rng).unwrap()
        })
        .collect();
    let slope = loglog_slope(&sizes, &times);
    outcome(
        exact && (3.5..=4.5).contains(&slope),
        format!(
            "ratio exact on {} shapes: {exact}; empirical log-log slope {slope:.2} in [3.5, 4.5] (times {:?})",
            shapes.len(),
            times.iter().map(|t| format!("{t:.4}s")).collect::<Vec<_>>()
        ),
    )
}

fn c4_straight_through() -> Outcome {
    let mut mismatches = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let c = 2 + seed as usize % 4;
        let shape = [1 + seed as usize % 2, c, 2, 1 + seed as usize % 3, 2];
        let cb = Codebook::new(8 + seed as usize, c, 0.99, 1e-5, &mut rng);
        let z = Tensor::randn(&shape, 0.2, &mut rng);
        let w = Tensor::randn(&shape, 1.0, &mut rng);
        let mut g = Graph::new();
        let zv = g.leaf(z);
        let q = quantize_graph(&mut g, zv, &cb, 0.25, None).unwrap();
        let wv = g.constant(w);
        let y = g.mul(q.z_tilde, wv).unwrap();
        let y = g.mean_all(y);
        let grads = g.backward(y);
        if bits(grads.get(zv).unwrap()) != bits(grads.get(q.z_tilde).unwrap()) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches}/10 cases differ from the upstream gradient bit-for-bit"))
}

fn c5_ema() -> Outcome {
    // Prior n = (1, 1), m_1 = (1, 1); one vector (3, 3) assigned to code 1
    // with decay 0.9 gives n_1 = 1, m_1 = (1.2, 1.2), e_1 = (1.2, 1.2).
    let book = |rows: Vec<f32>, k: usize| Codebook::from_embeddings(Tensor::from_vec(&[k, 2], rows).unwrap(), 0.9, 0.0);
    let mut cb = book(vec![0.0, 0.0, 1.0, 1.0], 2);
    ema_update(&mut cb, &[3.0, 3.0], &[1]).unwrap();
    let close = |a: f32, b: f64| (a as f64 - b).abs() < 1e-6;
    let (n1, e1) = (cb.cluster_size.data()[1], cb.embedding(1).to_vec());
    let worked = close(cb.cluster_size.data()[1], 1.0)
        && close(cb.embed_sum.data()[2], 1.2)
        && close(cb.embed_sum.data()[3], 1.2)
        && close(cb.embedding(1)[0], 1.2)
        && close(cb.embedding(1)[1], 1.2)
        && close(cb.cluster_size.data()[0], 0.9);
    // Decay 0: assigned codes jump to their cluster means.
    let mut cb = book(vec![0.0, 0.0, 1.0, 1.0, 5.0, 5.0], 3);
    cb.decay = 0.0;
    ema_update(&mut cb, &[0.1, 0.2, 0.3, 0.5, 2.0, 2.0], &[0, 0, 1]).unwrap();
    let means = close(cb.embedding(0)[0], 0.2)
        && close(cb.embedding(0)[1], 0.35)
        && close(cb.embedding(1)[0], 2.0)
        && close(cb.embedding(1)[1], 2.0);
    outcome(
        worked && means,
        format!(
            "worked example n_1 {n1:.6} (1), e_1 {e1:?} ((1.2, 1.2)): {worked}; decay 0 -> cluster means: {means}"
        ),
    )
}

fn c6_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::uniform(&[1, 1, 9, 9, 9], 1.0, &mut rng).map(f32::abs);
    let self_ssim = ssim3d(&x, &x, 7, 1.0).unwrap();
    let (a, b) = (0.2f32, 0.8f32);
    let c1 = (0.01f64 * 1.0).powi(2);
    let want = (2.0 * a as f64 * b as f64 + c1) / ((a as f64).powi(2) + (b as f64).powi(2) + c1);
    let got = ssim3d(
        &Tensor::full(&[1, 1, 8, 8, 8], a),
        &Tensor::full(&[1, 1, 8, 8, 8], b),
        7,
        1.0,
    )
    .unwrap();
    // MSE 0.01 on range 1 -> 20 dB.
    let xs = vec![0.0f64; 64];
    let ys = vec![0.1f64; 64];
    let p = psnr(&xs, &ys, 1.0).unwrap();
    let p_oracle = psnr_oracle(&xs, &ys, 1.0);
    let map = |l: &[u8]| LabelMap::new([1, 1, l.len()], l.to_vec(), 2).unwrap();
    let d_same = dice(&map(&[1, 1, 0]), &map(&[1, 1, 0]), 1).unwrap();
    let d_disjoint = dice(&map(&[1, 0]), &map(&[0, 1]), 1).unwrap();
    let d_half = dice(&map(&[1, 0, 0, 0]), &map(&[1, 1, 1, 0]), 1).unwrap();
    let d_half_oracle = dice_oracle(&[1, 0, 0, 0], &[1, 1, 1, 0], 1);
    let ok = (self_ssim - 1.0).abs() < 1e-9
        && (got - want).abs() < 1e-6
        && (p - 20.0).abs() < 1e-9
        && (p - p_oracle).abs() < 1e-9
        && d_same == 1.0
        && d_disjoint == 0.0
        && d_half == 0.5
        && d_half == d_half_oracle;
    outcome(
        ok,
        format!(
            "SSIM(x,x) {self_ssim:.12}; constant SSIM {got:.6} vs {want:.6}; PSNR {p:.9} dB; Dice 1/0/0.5 -> {d_same}/{d_disjoint}/{d_half}"
        ),
    )
}

fn c7_film_identity() -> Outcome {
    let mut cfg = TrainConfig::desk().model_config();
    cfg.decoder.film = true;
    let model = Model::new(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::uniform(&[2, 1, 32, 48, 32], 1.0, &mut rng).map(f32::abs);
    let mut g = Graph::inference();
    let xv = g.constant(x);
    let lat = model.encode(&mut g, xv, SpatialMode::Volumetric).unwrap();
    let q = model.quantize(&mut g, lat.anat).unwrap();
    let film = model.film(&mut g, lat.modality, &[Modality::A, Modality::B]).unwrap().unwrap();
    let identity = film.layers.iter().all(|f| {
        g.value(f.gamma).data().iter().all(|&v| v == 1.0) && g.value(f.beta).data().iter().all(|&v| v == 0.0)
    });
    let with = model.decode(&mut g, q.z_tilde, Some(&film), SpatialMode::Volumetric).unwrap();
    let without = model.decode(&mut g, q.z_tilde, None, SpatialMode::Volumetric).unwrap();
    let same = bits(g.value(with)) == bits(g.value(without));
    outcome(
        identity && same,
        format!("zero-initialized heads give gamma = 1, beta = 0: {identity}; output bit-identical to film-free path: {same}"),
    )
}

fn c8_grl() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let mut ok = true;
    for lambda in [0.0f32, 0.25, 1.0, 3.5] {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let r = g.grad_reverse(xv, lambda);
        ok &= g.value(r) == &x;
        let wv = g.constant(w.clone());
        let y = g.mul(r, wv).unwrap();
        let y = g.mean_all(y);
        let grads = g.backward(y);
        let up = grads.get(r).unwrap();
        ok &= grads.get(xv).unwrap() == &up.map(|v| -(lambda * v));
    }
    outcome(ok, format!("forward identity and backward = -lambda * upstream for lambda in {{0, 0.25, 1, 3.5}}: {ok}"))
}

fn c9_desk_quality(root: &Path) -> Outcome {
    let run = root.join("runs/desk");
    let ckpt = run.join(FINAL_CHECKPOINT_FILE);
    let manifest = root.join("data/desk").join(MANIFEST_FILE);
    if !ckpt.exists() || !manifest.exists() {
        return outcome(
            false,
            format!(
                "no desk run found ({} / {}); run `dsvq gen-data --out data/desk` then `dsvq train --preset desk --data data/desk/manifest.jsonl --out runs/desk`",
                manifest.display(),
                ckpt.display()
            ),
        );
    }
    let ck = load_checkpoint(&ckpt).unwrap();
    let cfg = ck.config().clone();
    let model = ck.model().unwrap();
    let test = load_split(&manifest, Split::Test).unwrap();
    let n_train = load_split(&manifest, Split::Train).unwrap().len();
    let opts = EvalOptions {
        probes: false,
        swap: false,
        images: 0,
    };
    let ev = evaluate(&model, "desk", "test", &[], &test, &opts).unwrap();
    let hours = train_hours(&run.join(LOG_FILE));
    let mut ok = cfg.steps_3d == 5000 && cfg.steps_2d == 1250 && n_train == 200;
    let mut parts = vec![format!(
        "{} + {} steps on {n_train} train subjects, {} test subjects",
        cfg.steps_3d,
        cfg.steps_2d,
        test.len()
    )];
    for m in &ev.report.modalities {
        let min_dice = m.dice_per_structure.iter().cloned().fold(f64::INFINITY, f64::min);
        ok &= m.psnr_mean >= 24.0 && m.ssim_mean >= 0.85 && min_dice >= 0.9;
        parts.push(format!(
            "{:?}: PSNR {:.2} dB (>= 24), SSIM {:.4} (>= 0.85), min per-structure Dice {:.3} (>= 0.9)",
            m.modality, m.psnr_mean, m.ssim_mean, min_dice
        ));
    }
    parts.push(format!("summed step time {hours:.2} h (budget 4 h CPU)"));
    outcome(ok, parts.join("; "))
}

fn train_hours(log: &Path) -> f64 {
    let Ok(text) = std::fs::read_to_string(log) else {
        return f64::NAN;
    };
    text.lines()
        .filter_map(|l| serde_json::from_str::<StepLog>(l).ok())
        .map(|s| s.seconds)
        .sum::<f64>()
        / 3600.0
}

fn c10_ablation(root: &Path) -> Outcome {
    let path = root.join("runs/ablation").join(ABLATION_SUMMARY_FILE);
    let Ok(text) = std::fs::read_to_string(&path) else {
        return outcome(
            false,
            format!(
                "no ablation summary at {}; run `dsvq ablate --data data/desk/manifest.jsonl --out runs/ablation`",
                path.display()
            ),
        );
    };
    let s: AblationSummary = serde_json::from_str(&text).unwrap();
    let need = 2 * s.seeds.div_ceil(3);
    let ok = s.seeds >= 3
        && s.joint_training_wins >= need
        && s.adversarial_wins >= need
        && s.cross_wins >= need;
    outcome(
        ok,
        format!(
            "over {} seeds: full >= no-jt PSNR in {}, +adv modality probe <= +cross in {}, +cross swap L1 < +mfilm in {} (each >= {need})",
            s.seeds, s.joint_training_wins, s.adversarial_wins, s.cross_wins
        ),
    )
}

fn c11_codebook(root: &Path) -> Outcome {
    // Smoke check: a random K = 8 book over 10^4 random vectors reaches every code.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cb = Codebook::new(8, 4, 0.99, 1e-5, &mut rng);
    let z = Tensor::randn(&[1, 4, 1, 1, 10_000], 1.0 / 8.0, &mut rng);
    let smoke = codebook_stats(&quantize(&z, &cb, 0.25).unwrap().indices, 8).usage == 1.0;
    let ckpt = root.join("runs/desk").join(FINAL_CHECKPOINT_FILE);
    let manifest = root.join("data/desk").join(MANIFEST_FILE);
    if !ckpt.exists() || !manifest.exists() {
        return outcome(false, format!("K=8 smoke usage 100%: {smoke}; desk run missing ({})", ckpt.display()));
    }
    let model = load_checkpoint(&ckpt).unwrap().model().unwrap();
    let test = load_split(&manifest, Split::Test).unwrap();
    let stats = dsvq::evaluation::codebook_usage(&model, &test).unwrap();
    let ok = smoke && stats.usage >= 0.25 && stats.perplexity >= 16.0;
    outcome(
        ok,
        format!(
            "K=8 smoke usage 100%: {smoke}; desk test split usage {:.1}% (>= 25%), perplexity {:.2} (>= 16)",
            100.0 * stats.usage,
            stats.perplexity
        ),
    )
}

fn c12_reproducibility() -> Outcome {
    let data = phantoms(4, [16, 16, 16]);
    let cfg = tiny_train(6, 4);
    let dir = tempfile::tempdir().unwrap();

    // Checkpoint round trip.
    let mut t = Trainer::new(&cfg).unwrap();
    t.step_once(&data).unwrap();
    let path = dir.path().join("rt.nqck");
    t.save(&path).unwrap();
    let loaded = load_checkpoint(&path).unwrap().model().unwrap();
    let x = data[0].vol_b.to_tensor();
    let round_trip =
        bits(&t.model.reconstruct(&x, &[Modality::B]).unwrap()) == bits(&loaded.reconstruct(&x, &[Modality::B]).unwrap());

    // Dataset generation.
    let spec = DatasetSpec {
        n_subjects: 6,
        shape: [16, 16, 16],
        n_structures: 4,
        seed: 12,
        split_fracs: [0.5, 0.25, 0.25],
    };
    let (d1, d2) = (dir.path().join("g1"), dir.path().join("g2"));
    generate_dataset(&spec, &d1).unwrap();
    generate_dataset(&spec, &d2).unwrap();
    let tree = |root: &Path| -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = std::fs::read_dir(root.join("subjects"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .chain(std::iter::once(root.join(MANIFEST_FILE)))
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
            .collect();
        files.sort();
        files
    };
    let gen_same = tree(&d1) == tree(&d2);

    // Ten-step trajectories, across both phases.
    let run = |tag: &str| {
        let mut t = Trainer::new(&cfg).unwrap();
        let logs: Vec<StepLog> = (0..10)
            .map(|_| {
                let mut l = t.step_once(&data).unwrap();
                l.seconds = 0.0;
                l
            })
            .collect();
        let p = dir.path().join(format!("{tag}.nqck"));
        t.save(&p).unwrap();
        (logs, std::fs::read(&p).unwrap())
    };
    let (la, ca) = run("a");
    let (lb, cb) = run("b");
    let traj_same = la == lb && ca == cb;
    outcome(
        round_trip && gen_same && traj_same,
        format!(
            "checkpoint round trip bit-exact: {round_trip}; seeded gen-data identical: {gen_same}; 10-step trajectories identical: {traj_same}"
        ),
    )
}

fn main() {
    let root = workspace_root();
    let strict = std::env::var("DSVQ_STRICT_ACCEPTANCE").is_ok_and(|v| v == "1");
    let results = [
        (1, "encoder latent shapes", c1_encoder_shapes()),
        (2, "axis attention vs oracle", c2_attention_oracle()),
        (3, "attention cost and scaling", c3_attention_cost()),
        (4, "straight-through gradient", c4_straight_through()),
        (5, "EMA codebook update", c5_ema()),
        (6, "metric closed forms", c6_metrics()),
        (7, "FiLM identity at init", c7_film_identity()),
        (8, "gradient reversal", c8_grl()),
        (9, "desk reconstruction quality", c9_desk_quality(&root)),
        (10, "ablation ordering", c10_ablation(&root)),
        (11, "codebook health", c11_codebook(&root)),
        (12, "reproducibility", c12_reproducibility()),
    ];
    for (id, name, o) in &results {
        report(*id, name, o);
    }
    let passed = results.iter().filter(|r| r.2.pass).count();
    println!("{passed}/{} criteria pass", results.len());
    let failed_hard: Vec<usize> = results
        .iter()
        .filter(|(id, _, o)| !o.pass && (strict || ![9, 10, 11].contains(id)))
        .map(|r| r.0)
        .collect();
    if !failed_hard.is_empty() {
        eprintln!("criteria failed: {failed_hard:?}");
        std::process::exit(1);
    }
}
