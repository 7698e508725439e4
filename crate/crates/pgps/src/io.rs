//! Volume, checkpoint, fixture and report files.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use pgps_core::toynet::{NetConfig, ToyNet};
use pgps_core::{ArchitectureSpec, LabelVolume, Volume};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBEDDED_FIXTURES: &str = include_str!("../fixtures/msd_pgps_plus.json");

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    Volume::from_bytes(&read_bytes(path)?).map_err(|source| Error::Format { path: path.into(), source })
}

pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    write_bytes(path, &volume.to_bytes())
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    LabelVolume::from_bytes(&read_bytes(path)?).map_err(|source| Error::Format { path: path.into(), source })
}

pub fn write_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    write_bytes(path, &labels.to_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json { path: path.into(), source })
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, to_json_string(value).as_bytes())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_bytes(path, &csv_bytes(rows)?)
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::io("<csv>", e.into()))?;
    }
    w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))
}

pub fn read_arch_spec(path: &Path) -> Result<ArchitectureSpec> {
    read_json(path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureTask {
    pub name: String,
    pub poolings: [u8; 3],
    /// `[batch, width, height, depth]` per stage; the last row is the
    /// maximal patch.
    pub rows: Vec<[u32; 4]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureFile {
    pub tasks: Vec<FixtureTask>,
}

impl FixtureFile {
    pub fn embedded() -> Self {
        serde_json::from_str(EMBEDDED_FIXTURES).expect("embedded fixtures parse")
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

const CHECKPOINT_FORMAT: &str = "pgps-toynet";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub hidden_channels: usize,
    pub n_classes: usize,
    pub param_count: usize,
    /// `[w1, b1, w2, b2]` tensor shapes.
    pub shapes: Vec<Vec<usize>>,
    pub epoch: u32,
    pub learning_rate: f64,
    pub momentum: f64,
    pub poly_exponent: f64,
    pub init_seed: u64,
}

impl CheckpointHeader {
    pub fn new(net: &ToyNet<f32>, cfg: &NetConfig, epoch: u32, learning_rate: f64, momentum: f64) -> Self {
        let (c, k) = (net.hidden_channels(), net.n_classes());
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            dtype: "f32le".into(),
            hidden_channels: c,
            n_classes: k,
            param_count: net.param_count(),
            shapes: vec![vec![c, 1, 3, 3, 3], vec![c], vec![k, c, 3, 3, 3], vec![k]],
            epoch,
            learning_rate,
            momentum,
            poly_exponent: 0.9,
            init_seed: cfg.init_seed,
        }
    }
}

/// `u64` LE header length, JSON header, then `param_count` LE `f32`s.
pub fn checkpoint_bytes(net: &ToyNet<f32>, header: &CheckpointHeader) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + 4 * net.param_count());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in net.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ToyNet<f32>, CheckpointHeader)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("truncated header length"))?.try_into().unwrap();
    let len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| bad("header length overflows"))?;
    let json = bytes.get(8..).and_then(|b| b.get(..len)).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT || header.dtype != "f32le" {
        return Err(bad("unsupported format"));
    }
    let payload = &bytes[8 + len..];
    if payload.len() != header.param_count * 4 {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, header declares {} parameters",
            payload.len(),
            header.param_count
        )));
    }
    let params = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let net = ToyNet::from_params(header.hidden_channels, header.n_classes, params)?;
    Ok((net, header))
}

pub fn write_checkpoint(path: &Path, net: &ToyNet<f32>, header: &CheckpointHeader) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&checkpoint_bytes(net, header)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(ToyNet<f32>, CheckpointHeader)> {
    parse_checkpoint(&read_bytes(path)?)
}
