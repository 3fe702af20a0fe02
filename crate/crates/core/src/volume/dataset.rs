//! On-disk phantom datasets: per-subject volume/label files plus a manifest
//! with a subject-level train/val/test partition.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{write_labels, write_manifest, write_volume, ManifestEntry, Split};
use super::phantom::{generate_subject, PhantomDesign};
use crate::error::{Error, Result};

/// File name of the manifest inside a dataset directory.
pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Largest tolerated gap between a split's attribute rate and the overall rate.
pub const ATTRIBUTE_TOLERANCE: f64 = 0.05;

/// Partition draws tried before settling for the most balanced one.
const MAX_PARTITION_DRAWS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_subjects: usize,
    pub shape: [usize; 3],
    pub n_structures: u8,
    pub seed: u64,
    /// Train / val / test fractions, summing to 1.
    pub split_fracs: [f64; 3],
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.n_subjects == 0 {
            errors.push("n_subjects must be >= 1".to_string());
        }
        if self.split_fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            errors.push(format!("split fractions must lie in [0, 1], got {:?}", self.split_fracs));
        }
        let sum: f64 = self.split_fracs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            errors.push(format!("split fractions must sum to 1, got {sum}"));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Subjects per split by largest remainder, so counts sum to `n_subjects`.
    pub fn split_counts(&self) -> [usize; 3] {
        let n = self.n_subjects as f64;
        let raw = self.split_fracs.map(|f| f * n);
        let mut counts = raw.map(|r| (r + 1e-9).floor() as usize);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let (ra, rb) = (raw[a] - counts[a] as f64, raw[b] - counts[b] as f64);
            rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
        });
        let mut left = self.n_subjects - counts.iter().sum::<usize>();
        for i in order.into_iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

/// Worst deviation of any non-empty split's attribute rate from the overall
/// rate.
pub fn attribute_imbalance(attributes: &[bool], splits: &[Split]) -> f64 {
    let rate = |sel: &mut dyn Iterator<Item = bool>| {
        let (mut n, mut k) = (0usize, 0usize);
        for a in sel {
            n += 1;
            k += a as usize;
        }
        (n > 0).then(|| k as f64 / n as f64)
    };
    let Some(overall) = rate(&mut attributes.iter().copied()) else {
        return 0.0;
    };
    Split::ALL
        .iter()
        .filter_map(|&s| rate(&mut attributes.iter().zip(splits).filter(|(_, &t)| t == s).map(|(&a, _)| a)))
        .map(|r| (r - overall).abs())
        .fold(0.0, f64::max)
}

/// Assign subjects to splits. Random partitions are redrawn until every
/// split's attribute rate is within [`ATTRIBUTE_TOLERANCE`] of the overall
/// rate; if small splits make that impossible the best draw is kept.
pub fn partition(attributes: &[bool], counts: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<Split> {
    let mut template: Vec<Split> = Split::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&s, c)| std::iter::repeat_n(s, c))
        .collect();
    let mut best = template.clone();
    let mut best_gap = f64::INFINITY;
    for _ in 0..MAX_PARTITION_DRAWS {
        template.shuffle(rng);
        let gap = attribute_imbalance(attributes, &template);
        if gap < best_gap {
            best_gap = gap;
            best.clone_from(&template);
        }
        if best_gap <= ATTRIBUTE_TOLERANCE {
            break;
        }
    }
    best
}

/// Summary of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub manifest: PathBuf,
    pub counts: [usize; 3],
    pub attribute_imbalance: f64,
}

/// Generate the phantoms of `spec` and write them, with a manifest, to `out`.
pub fn generate_dataset(spec: &DatasetSpec, out: impl AsRef<Path>) -> Result<DatasetSummary> {
    spec.validate()?;
    let out = out.as_ref();
    let subjects = out.join("subjects");
    fs::create_dir_all(&subjects).map_err(|e| Error::io(&subjects, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let seeds: Vec<u64> = (0..spec.n_subjects).map(|_| rng.random()).collect();
    let design = PhantomDesign::default();
    let mut entries = Vec::with_capacity(spec.n_subjects);
    for (i, &seed) in seeds.iter().enumerate() {
        let id = i as u32;
        let pair = generate_subject(seed, spec.shape, spec.n_structures, id, 0, &design)?;
        let rel = |suffix: &str| PathBuf::from("subjects").join(format!("sub-{id:04}_{suffix}"));
        let (pa, pb, pl) = (rel("a.nqv"), rel("b.nqv"), rel("labels.nql"));
        write_volume(&pair.vol_a, out.join(&pa))?;
        write_volume(&pair.vol_b, out.join(&pb))?;
        write_labels(&pair.labels, out.join(&pl))?;
        entries.push(ManifestEntry {
            subject_id: id,
            visit_id: 0,
            path_a: pa,
            path_b: pb,
            path_labels: pl,
            attribute: pair.attribute,
            split: Split::Train,
        });
    }
    let attributes: Vec<bool> = entries.iter().map(|e| e.attribute).collect();
    let counts = spec.split_counts();
    let splits = partition(&attributes, counts, &mut rng);
    for (e, s) in entries.iter_mut().zip(&splits) {
        e.split = *s;
    }
    let manifest = out.join(MANIFEST_FILE);
    write_manifest(&entries, &manifest)?;
    Ok(DatasetSummary {
        manifest,
        counts,
        attribute_imbalance: attribute_imbalance(&attributes, &splits),
    })
}
