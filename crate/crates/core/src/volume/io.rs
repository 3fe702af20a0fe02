//! Binary volume / label files and the JSON-lines dataset manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabelMap, Modality, PairedSample, Volume};
use crate::error::{Error, Result};

pub const NQV_MAGIC: &[u8; 7] = b"NQVOL1\0";
pub const NQV_VERSION: u8 = 1;
pub const LABEL_MAGIC: &[u8; 7] = b"NQLAB1\0";
const LABEL_VERSION: u8 = 1;

const NQV_HEADER: usize = 7 + 1 + 12 + 1 + 4 + 4;
const LABEL_HEADER: usize = 7 + 1 + 12 + 1;

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(NQV_HEADER + 4 * v.len());
    buf.extend_from_slice(NQV_MAGIC);
    buf.push(NQV_VERSION);
    for n in v.shape() {
        buf.extend_from_slice(&(n as u32).to_le_bytes());
    }
    buf.push(v.modality.code());
    buf.extend_from_slice(&v.subject_id.to_le_bytes());
    buf.extend_from_slice(&v.visit_id.to_le_bytes());
    for x in v.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    write_file(path, &buf)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&bytes, path, NQV_MAGIC, NQV_VERSION, NQV_HEADER)?;
    let shape = r.dims();
    let modality = Modality::from_code(r.u8())?;
    let subject_id = r.u32();
    let visit_id = r.u32();
    let payload = r.payload(4 * shape.iter().product::<usize>())?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(shape, data, modality, subject_id, visit_id)
}

pub fn write_labels(l: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::with_capacity(LABEL_HEADER + l.labels().len());
    buf.extend_from_slice(LABEL_MAGIC);
    buf.push(LABEL_VERSION);
    for n in l.shape() {
        buf.extend_from_slice(&(n as u32).to_le_bytes());
    }
    buf.push(l.n_structures());
    buf.extend_from_slice(l.labels());
    write_file(path.as_ref(), &buf)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&bytes, path, LABEL_MAGIC, LABEL_VERSION, LABEL_HEADER)?;
    let shape = r.dims();
    let n_structures = r.u8();
    let payload = r.payload(shape.iter().product())?;
    LabelMap::new(shape, payload.to_vec(), n_structures)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Cursor over a validated header.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &Path, magic: &[u8; 7], version: u8, header: usize) -> Result<Self> {
        if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
            return Err(Error::BadMagic(path.display().to_string()));
        }
        if bytes.len() < header {
            return Err(Error::Truncated {
                expected: header,
                found: bytes.len(),
            });
        }
        if bytes[7] != version {
            return Err(Error::Version {
                found: bytes[7] as u32,
                expected: version as u32,
            });
        }
        Ok(Self { bytes, pos: 8 })
    }

    fn u8(&mut self) -> u8 {
        self.pos += 1;
        self.bytes[self.pos - 1]
    }

    fn u32(&mut self) -> u32 {
        let b = &self.bytes[self.pos..self.pos + 4];
        self.pos += 4;
        u32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }

    fn dims(&mut self) -> [usize; 3] {
        [self.u32() as usize, self.u32() as usize, self.u32() as usize]
    }

    /// The rest of the file, which must hold exactly `len` bytes.
    fn payload(&self, len: usize) -> Result<&'a [u8]> {
        let rest = &self.bytes[self.pos..];
        if rest.len() < len {
            Err(Error::Truncated {
                expected: len,
                found: rest.len(),
            })
        } else if rest.len() > len {
            Err(Error::DimMismatch {
                expected: len,
                found: rest.len(),
            })
        } else {
            Ok(rest)
        }
    }
}

/// Subject-level dataset partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// One line of the dataset manifest. Relative paths resolve against the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: u32,
    pub visit_id: u32,
    pub path_a: PathBuf,
    pub path_b: PathBuf,
    pub path_labels: PathBuf,
    pub attribute: bool,
    pub split: Split,
}

impl ManifestEntry {
    fn paths(&self, base: &Path) -> [PathBuf; 3] {
        [&self.path_a, &self.path_b, &self.path_labels].map(|p| base.join(p))
    }

    /// Load the paired sample this entry points at.
    pub fn load(&self, base: &Path) -> Result<PairedSample> {
        let [a, b, l] = self.paths(base);
        let vol_a = read_volume(a)?;
        let vol_b = read_volume(b)?;
        let labels = read_labels(l)?;
        if vol_a.subject_id != self.subject_id {
            return Err(Error::Invalid(format!(
                "manifest subject {} but volume holds {}",
                self.subject_id, vol_a.subject_id
            )));
        }
        PairedSample::new(vol_a, vol_b, labels, self.attribute, self.subject_id as u64)
    }
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e)?;
        buf.write_all(b"\n").expect("vec write");
    }
    write_file(path.as_ref(), &buf)
}

/// Parse a manifest and check that every referenced file exists.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::new();
    let mut missing = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line)?;
        missing.extend(e.paths(base).into_iter().filter(|p| !p.exists()));
        entries.push(e);
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    Ok(entries)
}

/// Load every paired sample of `split` listed in the manifest at `path`.
pub fn load_split(path: impl AsRef<Path>, split: Split) -> Result<Vec<PairedSample>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    read_manifest(path)?
        .iter()
        .filter(|e| e.split == split)
        .map(|e| e.load(base))
        .collect()
}
