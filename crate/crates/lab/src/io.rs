//! On-disk formats: CHLM matrices and the structured-text sidecars that
//! describe datasets, feature sets and model checkpoints.
//!
//! CHLM layout: magic `CHLM`, u32 version (1), u64 rows, u64 cols, then
//! `rows * cols` little-endian f64 in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use chamferlab_core::datagen::{ExemplarSet, LabeledSet};
use chamferlab_core::diffusion::{DenoiserConfig, DenoiserModel, NoiseSchedule};
use chamferlab_core::featspace::{FeatureSet, Source};
use chamferlab_core::numkit::{Matrix, RngStream};
use serde::{Deserialize, Serialize};

use crate::config::{ScheduleFile, SCHEMA};

pub const MAGIC: &[u8; 4] = b"CHLM";
pub const VERSION: u32 = 1;

pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    ensure!(bytes.len() >= 24, "CHLM header truncated ({} bytes)", bytes.len());
    ensure!(&bytes[..4] == MAGIC, "not a CHLM file (bad magic)");
    let version = u32::from_le_bytes(bytes[4..8].try_into()?);
    ensure!(version == VERSION, "unsupported CHLM version {version}");
    let rows = u64::from_le_bytes(bytes[8..16].try_into()?) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into()?) as usize;
    let n = rows.checked_mul(cols).context("CHLM shape overflows")?;
    let payload = &bytes[24..];
    ensure!(payload.len() == 8 * n, "CHLM payload has {} bytes, header says {rows}x{cols}", payload.len());
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Matrix::from_vec(rows, cols, data)?)
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write_bytes(path, &encode_matrix(m))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .with_context(|| format!("reading {}", path.display()))?;
    decode_matrix(&bytes).with_context(|| format!("decoding {}", path.display()))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &toml::to_string(value)?)
}

pub fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    toml::from_str(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub schema: u32,
    pub rows: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub num_groups: usize,
    pub class_counts: Vec<usize>,
}

/// Writes `path` (points), `path.toml` (header) and `path.labels.csv`.
pub fn save_labeled(path: &Path, set: &LabeledSet) -> Result<()> {
    write_matrix(path, &set.points)?;
    let header = DatasetHeader {
        schema: SCHEMA,
        rows: set.len(),
        dim: set.dim(),
        num_classes: set.num_classes,
        num_groups: set.num_groups,
        class_counts: set.class_counts(),
    };
    write_toml(&sidecar(path, "toml"), &header)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "class", "group"])?;
    for i in 0..set.len() {
        let g = set.groups.as_ref().map_or(0, |g| g[i]);
        w.write_record([i.to_string(), set.classes[i].to_string(), g.to_string()])?;
    }
    write_bytes(&sidecar(path, "labels.csv"), &w.into_inner()?)
}

pub fn load_labeled(path: &Path) -> Result<LabeledSet> {
    let points = read_matrix(path)?;
    let header: DatasetHeader = read_toml(&sidecar(path, "toml"))?;
    ensure!(header.rows == points.rows() && header.dim == points.cols(), "{}: header shape disagrees with the matrix", path.display());
    let labels_path = sidecar(path, "labels.csv");
    let mut r = csv::Reader::from_path(&labels_path).with_context(|| format!("reading {}", labels_path.display()))?;
    let mut classes = Vec::with_capacity(header.rows);
    let mut groups = Vec::with_capacity(header.rows);
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        ensure!(rec.len() == 3, "{}: expected index,class,group", labels_path.display());
        ensure!(rec[0].parse::<usize>()? == i, "{}: rows out of order at {i}", labels_path.display());
        classes.push(rec[1].parse()?);
        groups.push(rec[2].parse()?);
    }
    let groups = (header.num_groups > 1).then_some(groups);
    Ok(LabeledSet::new(points, classes, groups, header.num_classes, header.num_groups)?)
}

pub fn load_exemplars(path: &Path) -> Result<ExemplarSet> {
    Ok(ExemplarSet::from_labeled(&load_labeled(path)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureHeader {
    pub schema: u32,
    /// Hex form of the 64-bit projector id.
    pub projector_id: String,
    pub source: String,
    pub rows: usize,
    pub dim: usize,
}

pub fn save_features(path: &Path, fs: &FeatureSet) -> Result<()> {
    write_matrix(path, &fs.features)?;
    let header = FeatureHeader {
        schema: SCHEMA,
        projector_id: format!("{:016x}", fs.projector_id),
        source: fs.source.name().into(),
        rows: fs.len(),
        dim: fs.dim(),
    };
    write_toml(&sidecar(path, "toml"), &header)
}

pub fn load_features(path: &Path) -> Result<FeatureSet> {
    let features = read_matrix(path)?;
    let header: FeatureHeader = read_toml(&sidecar(path, "toml"))?;
    let id = u64::from_str_radix(&header.projector_id, 16).context("projector_id must be hex")?;
    Ok(FeatureSet::new(features, id, Source::parse(&header.source)?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub schema: u32,
    pub data_dim: usize,
    pub num_classes: usize,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub class_dim: usize,
    pub steps: usize,
    pub schedule: ScheduleFile,
    /// Weight files relative to the manifest, in parameter order.
    pub params: Vec<String>,
    pub checksum: String,
}

/// Model directory: `manifest.toml` plus one CHLM file per parameter.
pub fn save_model(dir: &Path, model: &DenoiserModel, schedule: &ScheduleFile) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut names = Vec::new();
    for (i, p) in model.params().into_iter().enumerate() {
        let name = format!("param_{i:02}.chlm");
        write_matrix(&dir.join(&name), p)?;
        names.push(name);
    }
    let c = &model.config;
    let manifest = ModelManifest {
        schema: SCHEMA,
        data_dim: c.data_dim,
        num_classes: c.num_classes,
        hidden: c.hidden.clone(),
        time_dim: c.time_dim,
        class_dim: c.class_dim,
        steps: c.steps,
        schedule: schedule.clone(),
        params: names,
        checksum: format!("{:016x}", model.checksum()),
    };
    write_toml(&dir.join("manifest.toml"), &manifest)
}

pub fn load_model(dir: &Path) -> Result<(DenoiserModel, NoiseSchedule)> {
    let m: ModelManifest = read_toml(&dir.join("manifest.toml"))?;
    let mut config = DenoiserConfig::new(m.data_dim, m.num_classes, m.steps);
    config.hidden = m.hidden.clone();
    config.time_dim = m.time_dim;
    config.class_dim = m.class_dim;
    let mut model = DenoiserModel::new(config, &mut RngStream::new(0))?;
    let shapes = model.param_shapes();
    if shapes.len() != m.params.len() {
        bail!("{}: manifest lists {} weights, architecture has {}", dir.display(), m.params.len(), shapes.len());
    }
    for ((p, name), shape) in model.params_mut().into_iter().zip(&m.params).zip(shapes) {
        let w = read_matrix(&dir.join(name))?;
        ensure!(w.shape() == shape, "{name}: shape {:?}, expected {shape:?}", w.shape());
        *p = w;
    }
    let sum = format!("{:016x}", model.checksum());
    ensure!(sum == m.checksum, "{}: checksum {sum} does not match manifest {}", dir.display(), m.checksum);
    let sched = m.schedule.build(m.steps)?;
    Ok((model, sched))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_roundtrip_and_layout() {
        let m = Matrix::from_rows(&[[1.0, -2.5], [3.0, 0.125]]).unwrap();
        let bytes = encode_matrix(&m);
        assert_eq!(&bytes[..4], b"CHLM");
        assert_eq!(bytes[4..8], 1u32.to_le_bytes());
        assert_eq!(bytes[8..16], 2u64.to_le_bytes());
        assert_eq!(bytes.len(), 24 + 32);
        assert_eq!(bytes[24..32], 1.0f64.to_le_bytes());
        assert_eq!(decode_matrix(&bytes).unwrap(), m);
    }

    #[test]
    fn rejects_corrupt_files() {
        let mut bytes = encode_matrix(&Matrix::zeros(2, 2));
        assert!(decode_matrix(&bytes[..20]).is_err());
        bytes.pop();
        assert!(decode_matrix(&bytes).is_err());
        let mut bad = encode_matrix(&Matrix::zeros(1, 1));
        bad[0] = b'X';
        assert!(decode_matrix(&bad).is_err());
    }
}
