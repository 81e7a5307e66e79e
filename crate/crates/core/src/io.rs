//! Model persistence and run configuration.
//!
//! A saved model is a directory holding `model.toml` and `weights.bin`.
//! The blob is every weight tensor, little-endian `f32`, row-major, in block
//! order and within a block in [`Block::tensors`] order. The manifest grammar:
//!
//! ```toml
//! format_version = 1
//! blob = "weights.bin"
//! blob_len = 5184          # bytes
//! sha256 = "…"             # lowercase hex digest of the blob
//! input = [3, 8, 8]        # C, H, W
//!
//! [[layers]]
//! name = "conv1"
//! kind = "factorized_conv" # conv | factorized_conv | fc | factorized_fc
//! dims = [3, 3, 3, 16]     # D, D, S, T for convs; M, N for fc
//! ranks = [3, 16]          # R3, R4; or R; absent when dense
//! stride = 1               # convs only
//! padding = 1              # convs only
//! offset = 0               # byte offset into the blob
//! length = 1504            # byte length of the layer's tensors
//! ```
//!
//! Layers are contiguous: the first offset is 0 and each next offset is the
//! previous `offset + length`; the last one ends at `blob_len`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{load_cifar, synth_dataset, CifarFormat, Dataset, Split, SynthSpec};
use crate::decomp::{ConvLayerSpec, FactorizedConv, FactorizedFc, FcLayerSpec};
use crate::error::{Error, Result};
use crate::metrics::CompressionReport;
use crate::rank_select::RankPolicy;
use crate::tensor::Tensor;
use crate::trainer::{ArchSpec, Block, Model, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "model.toml";
pub const BLOB_FILE: &str = "weights.bin";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

const KINDS: [&str; 4] = ["conv", "factorized_conv", "fc", "factorized_fc"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub name: String,
    pub kind: String,
    pub dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranks: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format_version: u32,
    pub blob: String,
    pub blob_len: u64,
    pub sha256: String,
    pub input: [usize; 3],
    pub layers: Vec<LayerRecord>,
}

fn tensor_shapes(rec: &LayerRecord) -> Result<Vec<Vec<usize>>> {
    let bad = |what: &str| Error::Manifest(format!("layer `{}`: {what}", rec.name));
    let ranks = rec.ranks.as_deref();
    let conv = rec.kind.ends_with("conv");
    if conv && rec.dims.len() != 4 || !conv && rec.dims.len() != 2 {
        return Err(bad(&format!("{} needs {} dims", rec.kind, if conv { 4 } else { 2 })));
    }
    if rec.dims.contains(&0) || ranks.is_some_and(|r| r.contains(&0)) {
        return Err(bad("dims and ranks must be positive"));
    }
    if conv != (rec.stride.is_some() && rec.padding.is_some()) {
        return Err(bad("stride and padding are required for convs and only for convs"));
    }
    let d = &rec.dims;
    Ok(match (rec.kind.as_str(), ranks) {
        ("conv", None) => vec![d.clone()],
        ("factorized_conv", Some(&[r3, r4])) => {
            vec![vec![d[2], r3], vec![d[0], d[1], r3, r4], vec![d[3], r4]]
        }
        ("fc", None) => vec![d.clone()],
        ("factorized_fc", Some(&[r])) => vec![vec![d[0], r], vec![r, d[1]]],
        (kind, _) if !KINDS.contains(&kind) => return Err(Error::UnknownKind(kind.to_string())),
        _ => return Err(bad(&format!("ranks {ranks:?} do not fit kind {}", rec.kind))),
    })
}

fn byte_len(shapes: &[Vec<usize>]) -> u64 {
    shapes.iter().map(|s| 4 * s.iter().product::<usize>() as u64).sum()
}

fn block_record(name: &str, block: &Block, offset: u64) -> LayerRecord {
    let (dims, stride, padding) = match block.conv_geometry() {
        Some((d, s, t, stride, pad)) => (vec![d, d, s, t], Some(stride), Some(pad)),
        None => {
            let (m, n) = block.fc_dims().expect("fc");
            (vec![m, n], None, None)
        }
    };
    let length = block.tensors().iter().map(|t| 4 * t.len() as u64).sum();
    LayerRecord {
        name: name.to_string(),
        kind: block.kind().to_string(),
        dims,
        ranks: block.ranks(),
        stride,
        padding,
        offset,
        length,
    }
}

/// Serialize `model` into its manifest (with checksum) and blob.
pub fn encode_model(model: &Model) -> (ModelManifest, Vec<u8>) {
    let mut blob = Vec::with_capacity(4 * model.param_count() as usize);
    let mut layers = Vec::new();
    for (block, name) in model.blocks().iter().zip(model.layer_names()) {
        layers.push(block_record(&name, block, blob.len() as u64));
        for t in block.tensors() {
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        blob: BLOB_FILE.to_string(),
        blob_len: blob.len() as u64,
        sha256: sha256_hex(&blob),
        input: model.input_shape(),
        layers,
    };
    (manifest, blob)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parse manifest text. The version is checked before any other field so a
/// newer layout reports skew rather than a parse failure.
pub fn parse_manifest(text: &str) -> Result<ModelManifest> {
    let value: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Manifest(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_integer())
        .ok_or_else(|| Error::Manifest("missing integer format_version".into()))?;
    if version != FORMAT_VERSION as i64 {
        return Err(Error::VersionSkew {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            supported: FORMAT_VERSION,
        });
    }
    if let Some(layers) = value.get("layers").and_then(|l| l.as_array()) {
        for kind in layers.iter().filter_map(|l| l.get("kind")?.as_str()) {
            if !KINDS.contains(&kind) {
                return Err(Error::UnknownKind(kind.to_string()));
            }
        }
    }
    toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))
}

pub fn render_manifest(manifest: &ModelManifest) -> String {
    toml::to_string(manifest).expect("manifest fields are TOML-representable")
}

/// Check the layout invariants; returns the tensor shapes of every layer.
pub fn check_layout(manifest: &ModelManifest) -> Result<Vec<Vec<Vec<usize>>>> {
    let mut next = 0u64;
    let mut shapes = Vec::with_capacity(manifest.layers.len());
    for rec in &manifest.layers {
        let s = tensor_shapes(rec)?;
        if rec.offset != next {
            return Err(Error::Manifest(format!(
                "layer `{}` starts at byte {}, expected {next}",
                rec.name, rec.offset
            )));
        }
        if rec.length != byte_len(&s) {
            return Err(Error::Manifest(format!(
                "layer `{}` claims {} bytes, its tensors take {}",
                rec.name,
                rec.length,
                byte_len(&s)
            )));
        }
        next += rec.length;
        shapes.push(s);
    }
    if next != manifest.blob_len {
        return Err(Error::Manifest(format!(
            "layers cover {next} bytes, blob_len is {}",
            manifest.blob_len
        )));
    }
    Ok(shapes)
}

/// Inverse of [`encode_model`]. Length is checked before the checksum.
pub fn decode_model(manifest: &ModelManifest, blob: &[u8]) -> Result<Model> {
    let shapes = check_layout(manifest)?;
    if (blob.len() as u64) < manifest.blob_len {
        return Err(Error::TruncatedBlob {
            expected: manifest.blob_len as usize,
            actual: blob.len(),
        });
    }
    let actual = sha256_hex(blob);
    if actual != manifest.sha256 {
        return Err(Error::ChecksumMismatch {
            expected: manifest.sha256.clone(),
            actual,
        });
    }
    if blob.len() as u64 != manifest.blob_len {
        return Err(Error::Manifest(format!(
            "blob has {} bytes, manifest says {}",
            blob.len(),
            manifest.blob_len
        )));
    }
    let mut blocks = Vec::with_capacity(shapes.len());
    for (rec, layer_shapes) in manifest.layers.iter().zip(shapes) {
        let mut at = rec.offset as usize;
        let mut ts = Vec::with_capacity(layer_shapes.len());
        for shape in layer_shapes {
            let n: usize = shape.iter().product();
            let data = blob[at..at + 4 * n]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            ts.push(Tensor::new(shape, data)?);
            at += 4 * n;
        }
        let mut ts = ts.into_iter();
        let mut next = || ts.next().expect("shape count matches kind");
        let (stride, padding) = (rec.stride.unwrap_or(0), rec.padding.unwrap_or(0));
        blocks.push(match rec.kind.as_str() {
            "conv" => Block::Conv(ConvLayerSpec::new(next(), stride, padding)?),
            "factorized_conv" => Block::FactorizedConv(FactorizedConv::new(next(), next(), next(), stride, padding)?),
            "fc" => Block::Fc(FcLayerSpec::new(next())?),
            _ => Block::FactorizedFc(FactorizedFc::new(next(), next())?),
        });
    }
    Model::new(manifest.input, blocks)
}

/// Write `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Blob first, so a visible manifest always describes a complete blob.
pub fn save_model(model: &Model, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let (manifest, blob) = encode_model(model);
    write_atomic(&dir.join(&manifest.blob), &blob)?;
    write_atomic(&dir.join(MANIFEST_FILE), render_manifest(&manifest).as_bytes())
}

pub fn load_manifest(dir: &Path) -> Result<ModelManifest> {
    parse_manifest(&read_text(&dir.join(MANIFEST_FILE))?)
}

pub fn load_model(dir: &Path) -> Result<Model> {
    let manifest = load_manifest(dir)?;
    let blob_name = Path::new(&manifest.blob);
    if blob_name.components().count() != 1 || blob_name.is_absolute() {
        return Err(Error::Manifest(format!("blob `{}` must be a bare file name", manifest.blob)));
    }
    decode_model(&manifest, &read(&dir.join(blob_name))?)
}

/// `report.json` plus its rendered table in `report.txt`.
pub fn save_report(report: &CompressionReport, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_atomic(&dir.join(REPORT_JSON), serde_json::to_string_pretty(report)?.as_bytes())?;
    write_atomic(&dir.join(REPORT_TEXT), report.render(false).as_bytes())
}

pub fn load_report(dir: &Path) -> Result<CompressionReport> {
    let path = dir.join(REPORT_JSON);
    serde_json::from_slice(&read(&path)?).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn parse_toml<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Architecture file: an [`ArchSpec`] in TOML.
///
/// ```toml
/// input = [3, 8, 8]
/// classes = 4
/// hidden = []
/// [[convs]]
/// out_channels = 16
/// kernel = 3
/// ```
pub fn load_arch(path: &Path) -> Result<ArchSpec> {
    parse_toml(&read_text(path)?, path)
}

/// Training file: optional `[train]`, `[policy]` and `[synth]` tables plus
/// the seed of the synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub policy: RankPolicy,
    pub synth: SynthSpec,
    pub data_seed: u64,
}


impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.policy.validate()?;
        self.synth.validate()
    }
}

pub fn parse_run_config(text: &str, path: &Path) -> Result<RunConfig> {
    let cfg: RunConfig = parse_toml(text, path)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    parse_run_config(&read_text(path)?, path)
}

/// Where samples come from: the synthetic generator or an extracted CIFAR
/// directory (or single batch file).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Synth,
    Cifar { path: PathBuf, format: CifarFormat },
}

impl DataSource {
    /// `"synth"` selects the generator; anything else is a CIFAR path.
    pub fn parse(arg: &str, cifar100: bool) -> Self {
        if arg == "synth" {
            return DataSource::Synth;
        }
        let format = if cifar100 { CifarFormat::Cifar100 } else { CifarFormat::Cifar10 };
        DataSource::Cifar {
            path: PathBuf::from(arg),
            format,
        }
    }

    /// `(train, test)`
    pub fn load(&self, cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Synth => synth_dataset(&cfg.synth, cfg.data_seed),
            DataSource::Cifar { path, format } => Ok((
                load_cifar(path, *format, Split::Train)?,
                load_cifar(path, *format, Split::Test)?,
            )),
        }
    }

    pub fn load_split(&self, cfg: &RunConfig, split: Split) -> Result<Dataset> {
        match self {
            DataSource::Synth => {
                let (train, test) = synth_dataset(&cfg.synth, cfg.data_seed)?;
                Ok(if split == Split::Train { train } else { test })
            }
            DataSource::Cifar { path, format } => load_cifar(path, *format, split),
        }
    }
}
