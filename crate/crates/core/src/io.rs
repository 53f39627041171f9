//! On-disk formats.
//!
//! Dataset container (little-endian):
//!
//! ```text
//! magic "DDNS" | u32 version | u8 kind (0 detection, 1 route) | u32 n_t | u64 count
//! detection record: u32 n_r | f64 rho | f64 snr_db | f64 sigma2
//!                   | y[2n_r] | H[2n_r·2n_t] row-major | x[2n_t] | u8 bits[2n_t]
//! route record:     u32 n_r | f64 sigma2 | gram[4n_t²] | u8 label | u32 be_id | u32 be_oa
//! ```
//!
//! Every dataset file `foo.bin` has a JSON sidecar `foo.json`.
//! Checkpoints are `name.bin` (magic "DDCK", u32 version, u64 count, f64 values)
//! plus a `name.json` manifest with tensor names, shapes and the model config.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::channel::{Dataset, Provenance, Sample};
use crate::ddnet::{DdNetModel, NormStats, RouteFeatures, RouteNetParams, RouteSample};
use crate::idetnet::{IDetNetConfig, IDetNetParams};
use crate::numerics::{unflatten, ParamSet, Tensor};
use crate::oampnet::{OampNetConfig, OampNetParams};

pub const FORMAT_VERSION: u32 = 1;
const DATASET_MAGIC: &[u8; 4] = b"DDNS";
const CHECKPOINT_MAGIC: &[u8; 4] = b"DDCK";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Format { path: path.to_path_buf(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Detection,
    Route,
}

/// JSON sidecar of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub kind: DatasetKind,
    pub n_t: usize,
    pub count: usize,
    pub provenance: Option<Provenance>,
    pub seed: Option<u64>,
    /// Generating configuration, free-form.
    pub config: Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json { path: path.into(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json { path: path.into(), source })
}

fn write_header<W: Write>(w: &mut W, kind: DatasetKind, n_t: usize, count: usize) -> std::io::Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    w.write_u8(match kind {
        DatasetKind::Detection => 0,
        DatasetKind::Route => 1,
    })?;
    w.write_u32::<LE>(n_t as u32)?;
    w.write_u64::<LE>(count as u64)
}

fn write_f64s<W: Write>(w: &mut W, v: &[f64]) -> std::io::Result<()> {
    v.iter().try_for_each(|&x| w.write_f64::<LE>(x))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    (0..n).map(|_| r.read_f64::<LE>()).collect()
}

/// Serializes detection samples (all with the same `N_t`).
pub fn encode_samples<W: Write>(w: &mut W, n_t: usize, samples: &[Sample]) -> std::io::Result<()> {
    write_header(w, DatasetKind::Detection, n_t, samples.len())?;
    for s in samples {
        assert_eq!(s.n_t(), n_t, "shape mismatch: mixed N_t in dataset");
        w.write_u32::<LE>(s.n_r as u32)?;
        write_f64s(w, &[s.rho, s.snr_db, s.sigma2])?;
        write_f64s(w, &s.y)?;
        write_f64s(w, s.h.data())?;
        write_f64s(w, &s.x)?;
        w.write_all(&s.bits)?;
    }
    Ok(())
}

fn read_header<R: Read>(r: &mut R, path: &Path, want: DatasetKind) -> Result<(usize, usize), IoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != DATASET_MAGIC {
        return Err(format_err(path, "not a dataset file"));
    }
    let version = r.read_u32::<LE>().map_err(io_err(path))?;
    if version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported format version {version}")));
    }
    let kind = match r.read_u8().map_err(io_err(path))? {
        0 => DatasetKind::Detection,
        1 => DatasetKind::Route,
        k => return Err(format_err(path, format!("unknown dataset kind {k}"))),
    };
    if kind != want {
        return Err(format_err(path, format!("expected a {want:?} dataset, found {kind:?}")));
    }
    let n_t = r.read_u32::<LE>().map_err(io_err(path))? as usize;
    let count = r.read_u64::<LE>().map_err(io_err(path))? as usize;
    Ok((n_t, count))
}

pub fn decode_samples<R: Read>(r: &mut R, path: &Path) -> Result<Vec<Sample>, IoError> {
    let (n_t, count) = read_header(r, path, DatasetKind::Detection)?;
    let read = |r: &mut R| -> std::io::Result<Sample> {
        let n_r = r.read_u32::<LE>()? as usize;
        let meta = read_f64s(r, 3)?;
        let y = read_f64s(r, 2 * n_r)?;
        let h = Tensor::new(2 * n_r, 2 * n_t, read_f64s(r, 4 * n_r * n_t)?);
        let x = read_f64s(r, 2 * n_t)?;
        let mut bits = vec![0u8; 2 * n_t];
        r.read_exact(&mut bits)?;
        Ok(Sample { y, h, sigma2: meta[2], x, bits, n_r, rho: meta[0], snr_db: meta[1] })
    };
    (0..count).map(|_| read(r).map_err(io_err(path))).collect()
}

/// Writes `path` and its sidecar.
pub fn write_dataset(path: &Path, dataset: &Dataset, seed: Option<u64>, config: Value) -> Result<(), IoError> {
    let n_t = dataset.samples.first().map_or(0, Sample::n_t);
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    encode_samples(&mut w, n_t, &dataset.samples).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        kind: DatasetKind::Detection,
        n_t,
        count: dataset.len(),
        provenance: Some(dataset.provenance.clone()),
        seed,
        config,
    };
    write_json(&sidecar_path(path), &manifest)
}

/// Reads a dataset; provenance comes from the sidecar when present.
pub fn read_dataset(path: &Path) -> Result<Dataset, IoError> {
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let samples = decode_samples(&mut r, path)?;
    let side = sidecar_path(path);
    let provenance = if side.exists() {
        read_json::<DatasetManifest>(&side)?.provenance
    } else {
        None
    };
    Ok(Dataset { samples, provenance: provenance.unwrap_or_else(|| Provenance::Custom(path.display().to_string())) })
}

pub fn write_route_dataset(path: &Path, n_t: usize, set: &[RouteSample], config: Value) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut body = || -> std::io::Result<()> {
        write_header(&mut w, DatasetKind::Route, n_t, set.len())?;
        for r in set {
            assert_eq!(r.features.gram.len(), 4 * n_t * n_t, "shape mismatch: route features vs N_t");
            w.write_u32::<LE>(r.features.n_r as u32)?;
            w.write_f64::<LE>(r.features.sigma2)?;
            write_f64s(&mut w, &r.features.gram)?;
            w.write_u8(r.label)?;
            w.write_u32::<LE>(r.be_id as u32)?;
            w.write_u32::<LE>(r.be_oa as u32)?;
        }
        w.flush()
    };
    body().map_err(io_err(path))?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        kind: DatasetKind::Route,
        n_t,
        count: set.len(),
        provenance: None,
        seed: None,
        config,
    };
    write_json(&sidecar_path(path), &manifest)
}

pub fn read_route_dataset(path: &Path) -> Result<Vec<RouteSample>, IoError> {
    let mut r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let (n_t, count) = read_header(&mut r, path, DatasetKind::Route)?;
    let mut read = || -> std::io::Result<RouteSample> {
        let n_r = r.read_u32::<LE>()? as usize;
        let sigma2 = r.read_f64::<LE>()?;
        let gram = read_f64s(&mut r, 4 * n_t * n_t)?;
        let label = r.read_u8()?;
        let be_id = r.read_u32::<LE>()? as usize;
        let be_oa = r.read_u32::<LE>()? as usize;
        Ok(RouteSample { features: RouteFeatures { sigma2, gram, n_r }, label, be_id, be_oa })
    };
    (0..count).map(|_| read().map_err(io_err(path))).collect()
}

/// JSON manifest of a parameter checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: String,
    pub names: Vec<String>,
    pub shapes: Vec<[usize; 2]>,
    pub config: Value,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `stem.bin` and `stem.json`.
pub fn save_checkpoint<P: ParamSet + ?Sized>(
    stem: &Path,
    model: &str,
    params: &P,
    names: Vec<String>,
    config: Value,
) -> Result<(), IoError> {
    let bin = with_ext(stem, "bin");
    let flat = params.flatten();
    let mut w = BufWriter::new(File::create(&bin).map_err(io_err(&bin))?);
    let mut body = || -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LE>(FORMAT_VERSION)?;
        w.write_u64::<LE>(flat.len() as u64)?;
        write_f64s(&mut w, &flat)?;
        w.flush()
    };
    body().map_err(io_err(&bin))?;
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        model: model.to_string(),
        names,
        shapes: params.shapes(),
        config,
    };
    write_json(&with_ext(stem, "json"), &manifest)
}

/// Reads a checkpoint and checks that its model name is `model`.
pub fn load_checkpoint(stem: &Path, model: &str) -> Result<(CheckpointManifest, Vec<Tensor>), IoError> {
    let json = with_ext(stem, "json");
    let manifest: CheckpointManifest = read_json(&json)?;
    if manifest.model != model {
        return Err(format_err(&json, format!("expected a {model} checkpoint, found {}", manifest.model)));
    }
    if manifest.format_version != FORMAT_VERSION {
        return Err(format_err(&json, format!("unsupported format version {}", manifest.format_version)));
    }
    let bin = with_ext(stem, "bin");
    let mut r = BufReader::new(File::open(&bin).map_err(io_err(&bin))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err(&bin))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format_err(&bin, "not a checkpoint file"));
    }
    let _version = r.read_u32::<LE>().map_err(io_err(&bin))?;
    let n = r.read_u64::<LE>().map_err(io_err(&bin))? as usize;
    let expected: usize = manifest.shapes.iter().map(|s| s[0] * s[1]).sum();
    if n != expected {
        return Err(format_err(&bin, format!("holds {n} values, manifest describes {expected}")));
    }
    let flat = read_f64s(&mut r, n).map_err(io_err(&bin))?;
    let tensors = unflatten(&flat, &manifest.shapes);
    Ok((manifest, tensors))
}

fn config_of<T: for<'de> Deserialize<'de>>(m: &CheckpointManifest, stem: &Path) -> Result<T, IoError> {
    serde_json::from_value(m.config.clone()).map_err(|source| IoError::Json { path: with_ext(stem, "json"), source })
}

pub fn save_idetnet(stem: &Path, params: &IDetNetParams, config: &IDetNetConfig) -> Result<(), IoError> {
    let cfg = serde_json::to_value(config).expect("config serializes");
    save_checkpoint(stem, "idetnet", params, params.names(), cfg)
}

pub fn load_idetnet(stem: &Path) -> Result<(IDetNetParams, IDetNetConfig), IoError> {
    let (m, t) = load_checkpoint(stem, "idetnet")?;
    let config: IDetNetConfig = config_of(&m, stem)?;
    if t.len() != 9 * config.k_id {
        return Err(format_err(&with_ext(stem, "json"), "tensor count does not match k_id"));
    }
    Ok((IDetNetParams::from_tensors(t), config))
}

pub fn save_oampnet(stem: &Path, params: &OampNetParams, config: &OampNetConfig) -> Result<(), IoError> {
    let cfg = serde_json::to_value(config).expect("config serializes");
    save_checkpoint(stem, "oampnet", params, params.names(), cfg)
}

pub fn load_oampnet(stem: &Path) -> Result<(OampNetParams, OampNetConfig), IoError> {
    let (m, t) = load_checkpoint(stem, "oampnet")?;
    let config: OampNetConfig = config_of(&m, stem)?;
    if t.len() != 4 * config.k_oa {
        return Err(format_err(&with_ext(stem, "json"), "tensor count does not match k_oa"));
    }
    Ok((OampNetParams { gamma: t }, config))
}

pub fn save_routenet(stem: &Path, params: &RouteNetParams, n_t: usize) -> Result<(), IoError> {
    let names = ["w1", "b1", "w2", "b2"].map(String::from).to_vec();
    save_checkpoint(stem, "routenet", params, names, serde_json::json!({ "n_t": n_t }))
}

pub fn load_routenet(stem: &Path) -> Result<RouteNetParams, IoError> {
    let (_, t) = load_checkpoint(stem, "routenet")?;
    if t.len() != 4 {
        return Err(format_err(&with_ext(stem, "json"), "RouteNet checkpoints hold four tensors"));
    }
    Ok(RouteNetParams::from_tensors(t))
}

/// Manifest of a DDNet bundle directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub idetnet: String,
    pub oampnet: String,
    pub routenet: String,
    pub norm_stats: String,
}

pub fn save_bundle(dir: &Path, model: &DdNetModel) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    save_idetnet(&dir.join("idetnet"), &model.idetnet, &model.idetnet_config)?;
    save_oampnet(&dir.join("oampnet"), &model.oampnet, &model.oampnet_config)?;
    save_routenet(&dir.join("routenet"), &model.routenet, model.idetnet_config.n_t)?;
    write_json(&dir.join("norm_stats.json"), &model.stats)?;
    let manifest = BundleManifest {
        format_version: FORMAT_VERSION,
        idetnet: "idetnet".into(),
        oampnet: "oampnet".into(),
        routenet: "routenet".into(),
        norm_stats: "norm_stats.json".into(),
    };
    write_json(&dir.join("bundle.json"), &manifest)
}

pub fn load_bundle(dir: &Path) -> Result<DdNetModel, IoError> {
    let m: BundleManifest = read_json(&dir.join("bundle.json"))?;
    let (idetnet, idetnet_config) = load_idetnet(&dir.join(&m.idetnet))?;
    let (oampnet, oampnet_config) = load_oampnet(&dir.join(&m.oampnet))?;
    let routenet = load_routenet(&dir.join(&m.routenet))?;
    let stats: NormStats = read_json(&dir.join(&m.norm_stats))?;
    if idetnet_config.n_t != oampnet_config.n_t || stats.n_t() != idetnet_config.n_t {
        return Err(format_err(dir, "bundle members were built for different N_t"));
    }
    if routenet.input_width() != crate::ddnet::input_width(idetnet_config.n_t) {
        return Err(format_err(dir, "RouteNet width does not match N_t"));
    }
    Ok(DdNetModel { idetnet_config, idetnet, oampnet_config, oampnet, routenet, stats })
}

/// Appends one JSON object per line.
pub struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self, IoError> {
        let out = BufWriter::new(File::create(path).map_err(io_err(path))?);
        Ok(Self { path: path.to_path_buf(), out })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<(), IoError> {
        let line = serde_json::to_string(record).map_err(|source| IoError::Json { path: self.path.clone(), source })?;
        writeln!(self.out, "{line}").map_err(io_err(&self.path))?;
        self.out.flush().map_err(io_err(&self.path))
    }
}
