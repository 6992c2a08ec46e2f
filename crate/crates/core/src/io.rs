//! File formats: scenes, trajectories, model checkpoints and engine config.
//!
//! All binary formats are little-endian. Layouts (`u8`/`u32`/`u64` unsigned
//! integers, `f64` IEEE-754 doubles):
//!
//! Scene (`.spsc`):
//! ```text
//! magic      b"SPSC"
//! version    u32 = 1
//! count      u64   kernel count
//! attr_dim   u32
//! root       u64   root kernel id
//! units_len  u32, units utf-8 bytes
//! count × kernel:
//!     position   3 × f64
//!     covariance 6 × f64   upper triangle xx, xy, xz, yy, yz, zz
//!     sh_degree  u8        0..=3
//!     sh_coeffs  3·(degree+1)² × f64, basis-major, rgb interleaved
//!     opacity    f64
//! count × attributes:
//!     density    f64
//!     vector     attr_dim × f64
//! ```
//!
//! Trajectory (`.sptr`):
//! ```text
//! magic b"SPTR", version u32 = 1, kernel count u64, frame count u64,
//! dt f64, scene hash 32 bytes (SHA-256 of the scene encoding)
//! frame count × { index u64, time f64, kernel count × 3 × f64 }
//! ```
//!
//! Model checkpoint (`.spmd`):
//! ```text
//! magic b"SPMD", version u32 = 1, config_len u32, config JSON bytes,
//! layer count u32, layer count × { name_len u32, name, rows u32, cols u32 },
//! param count u64, params f64… (layers in order, row-major),
//! node scale count u32, f64…, edge scale count u32, f64…
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{Trajectory, TrajectoryFrame, DEFAULT_DT};
use crate::hierarchy::DEFAULT_RADII;
use crate::providers::features::EdgeConfig;
use crate::providers::{
    GradientProvider, IdentityProvider, LearnedProvider, ModelConfig, OscillatorParams, OscillatorProvider, PredictorModel,
    TrainingConfig,
};
use crate::splat::{GaussianKernel, MaterialAttributes, SceneTemplate, MAX_SH_DEGREE};
use crate::synth::SynthSpec;
use crate::{Error, Mat3, Result, Vec3};

pub const SCENE_MAGIC: &[u8; 4] = b"SPSC";
pub const TRAJECTORY_MAGIC: &[u8; 4] = b"SPTR";
pub const MODEL_MAGIC: &[u8; 4] = b"SPMD";
pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_UNITS: &str = "scene units (meters unless stated otherwise)";

fn malformed(record: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::MalformedRecord {
        record: record.into(),
        reason: reason.into(),
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut w = Writer(magic.to_vec());
        w.u32(FORMAT_VERSION);
        w
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn vec3(&mut self, v: &Vec3) {
        v.iter().for_each(|x| self.f64(*x));
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn open(buf: &'a [u8], magic: &'static [u8; 4], magic_name: &'static str) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != magic {
            return Err(Error::BadMagic { expected: magic_name });
        }
        let mut r = Reader { buf, at: 4 };
        let version = r.u32("header")?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(r)
    }
    fn take(&mut self, n: usize, record: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(malformed(record, "unexpected end of file"));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self, record: &str) -> Result<u8> {
        Ok(self.take(1, record)?[0])
    }
    fn u32(&mut self, record: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, record)?.try_into().unwrap()))
    }
    fn u64(&mut self, record: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, record)?.try_into().unwrap()))
    }
    fn f64(&mut self, record: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, record)?.try_into().unwrap()))
    }
    fn vec3(&mut self, record: &str) -> Result<Vec3> {
        Ok(Vec3::new(self.f64(record)?, self.f64(record)?, self.f64(record)?))
    }
    fn f64s(&mut self, n: usize, record: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| malformed(record, "length overflow"))?, record)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn bytes(&mut self, record: &str) -> Result<&'a [u8]> {
        let n = self.u32(record)? as usize;
        self.take(n, record)
    }
    /// Length prefix sanity check against the bytes left.
    fn count(&mut self, record: &str, min_item_bytes: usize) -> Result<usize> {
        let n = self.u64(record)?;
        let left = (self.buf.len() - self.at) as u64;
        if n.saturating_mul(min_item_bytes as u64) > left {
            return Err(malformed(record, format!("count {n} exceeds the remaining {left} bytes")));
        }
        Ok(n as usize)
    }
    fn finish(&self) -> Result<()> {
        if self.at != self.buf.len() {
            return Err(malformed("trailer", format!("{} unexpected trailing bytes", self.buf.len() - self.at)));
        }
        Ok(())
    }
}

fn upper(m: &Mat3) -> [f64; 6] {
    [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 1)], m[(1, 2)], m[(2, 2)]]
}

fn from_upper(u: &[f64]) -> Mat3 {
    Mat3::new(u[0], u[1], u[2], u[1], u[3], u[4], u[2], u[4], u[5])
}

/// A scene plus its units note.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFile {
    pub scene: SceneTemplate,
    pub units: String,
}

pub fn encode_scene(scene: &SceneTemplate) -> Vec<u8> {
    encode_scene_file(scene, DEFAULT_UNITS)
}

/// Covariances are written as their upper triangle.
pub fn encode_scene_file(scene: &SceneTemplate, units: &str) -> Vec<u8> {
    let mut w = Writer::new(SCENE_MAGIC);
    w.u64(scene.len() as u64);
    w.u32(scene.attribute_dim() as u32);
    w.u64(scene.root_kernel_id as u64);
    w.bytes(units.as_bytes());
    for k in &scene.kernels {
        w.vec3(&k.position);
        upper(&k.covariance).iter().for_each(|v| w.f64(*v));
        w.u8(k.sh_degree().unwrap_or(0) as u8);
        k.sh_coeffs.iter().for_each(|v| w.f64(*v));
        w.f64(k.opacity);
    }
    for a in &scene.attributes {
        w.f64(a.density);
        a.attribute_vector.iter().for_each(|v| w.f64(*v));
    }
    w.0
}

pub fn decode_scene_file(buf: &[u8]) -> Result<SceneFile> {
    let mut r = Reader::open(buf, SCENE_MAGIC, "SPSC")?;
    let n = r.count("header", 8 * 11 + 1)?;
    let dim = r.u32("header")? as usize;
    let root = r.u64("header")? as usize;
    let units = String::from_utf8(r.bytes("header")?.to_vec()).map_err(|_| malformed("header", "units note is not utf-8"))?;
    let mut kernels = Vec::with_capacity(n);
    for i in 0..n {
        let rec = format!("kernel {i}");
        let position = r.vec3(&rec)?;
        let covariance = from_upper(&r.f64s(6, &rec)?);
        let degree = r.u8(&rec)? as usize;
        if degree > MAX_SH_DEGREE {
            return Err(malformed(rec, format!("sh degree {degree} above {MAX_SH_DEGREE}")));
        }
        let sh_coeffs = r.f64s(3 * (degree + 1) * (degree + 1), &rec)?;
        let opacity = r.f64(&rec)?;
        kernels.push(GaussianKernel {
            position,
            covariance,
            sh_coeffs,
            opacity,
        });
    }
    let mut attributes = Vec::with_capacity(n);
    for i in 0..n {
        let rec = format!("attributes {i}");
        let density = r.f64(&rec)?;
        let attribute_vector = r.f64s(dim, &rec)?;
        attributes.push(MaterialAttributes {
            density,
            attribute_vector,
        });
    }
    r.finish()?;
    Ok(SceneFile {
        scene: SceneTemplate::new(kernels, attributes, root)?,
        units,
    })
}

pub fn decode_scene(buf: &[u8]) -> Result<SceneTemplate> {
    decode_scene_file(buf).map(|f| f.scene)
}

/// SHA-256 of the binary encoding.
pub fn scene_hash(scene: &SceneTemplate) -> [u8; 32] {
    Sha256::digest(encode_scene(scene)).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

/// JSON sidecar form of the scene format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneJson {
    pub format: String,
    pub version: u32,
    pub units: String,
    pub root_kernel_id: usize,
    pub kernels: Vec<KernelJson>,
    pub attributes: Vec<AttributesJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelJson {
    pub position: [f64; 3],
    /// xx, xy, xz, yy, yz, zz
    pub covariance: [f64; 6],
    pub sh_coeffs: Vec<f64>,
    pub opacity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributesJson {
    pub density: f64,
    pub attribute_vector: Vec<f64>,
}

const SCENE_JSON_FORMAT: &str = "splatsim-scene";

pub fn scene_to_json(scene: &SceneTemplate, units: &str) -> SceneJson {
    SceneJson {
        format: SCENE_JSON_FORMAT.into(),
        version: FORMAT_VERSION,
        units: units.into(),
        root_kernel_id: scene.root_kernel_id,
        kernels: scene
            .kernels
            .iter()
            .map(|k| KernelJson {
                position: k.position.into(),
                covariance: upper(&k.covariance),
                sh_coeffs: k.sh_coeffs.clone(),
                opacity: k.opacity,
            })
            .collect(),
        attributes: scene
            .attributes
            .iter()
            .map(|a| AttributesJson {
                density: a.density,
                attribute_vector: a.attribute_vector.clone(),
            })
            .collect(),
    }
}

pub fn scene_from_json(j: SceneJson) -> Result<SceneFile> {
    if j.format != SCENE_JSON_FORMAT {
        return Err(malformed("header", format!("format {:?} is not {SCENE_JSON_FORMAT:?}", j.format)));
    }
    if j.version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: j.version,
            expected: FORMAT_VERSION,
        });
    }
    let kernels = j
        .kernels
        .into_iter()
        .map(|k| GaussianKernel {
            position: k.position.into(),
            covariance: from_upper(&k.covariance),
            sh_coeffs: k.sh_coeffs,
            opacity: k.opacity,
        })
        .collect();
    let attributes = j
        .attributes
        .into_iter()
        .map(|a| MaterialAttributes {
            density: a.density,
            attribute_vector: a.attribute_vector,
        })
        .collect();
    Ok(SceneFile {
        scene: SceneTemplate::new(kernels, attributes, j.root_kernel_id)?,
        units: j.units,
    })
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn is_jsonl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("jsonl"))
}

/// Writes the binary format, or the JSON sidecar for a `.json` path.
pub fn save_scene(path: &Path, scene: &SceneTemplate) -> Result<()> {
    if is_json(path) {
        std::fs::write(path, serde_json::to_vec_pretty(&scene_to_json(scene, DEFAULT_UNITS))?)?;
    } else {
        std::fs::write(path, encode_scene(scene))?;
    }
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<SceneTemplate> {
    let buf = std::fs::read(path)?;
    if is_json(path) {
        let j: SceneJson = serde_json::from_slice(&buf)?;
        Ok(scene_from_json(j)?.scene)
    } else {
        decode_scene(&buf)
    }
}

pub fn encode_trajectory(t: &Trajectory) -> Vec<u8> {
    let mut w = Writer::new(TRAJECTORY_MAGIC);
    w.u64(t.kernel_count() as u64);
    w.u64(t.frames.len() as u64);
    w.f64(t.dt);
    w.0.extend_from_slice(&t.scene_hash);
    for f in &t.frames {
        w.u64(f.index);
        w.f64(f.time);
        f.positions.iter().for_each(|p| w.vec3(p));
    }
    w.0
}

pub fn decode_trajectory(buf: &[u8]) -> Result<Trajectory> {
    let mut r = Reader::open(buf, TRAJECTORY_MAGIC, "SPTR")?;
    let n = r.u64("header")? as usize;
    let frames_n = r.count("header", 16)?;
    let dt = r.f64("header")?;
    let scene_hash: [u8; 32] = r.take(32, "header")?.try_into().unwrap();
    let mut frames = Vec::with_capacity(frames_n);
    for i in 0..frames_n {
        let rec = format!("frame {i}");
        let index = r.u64(&rec)?;
        let time = r.f64(&rec)?;
        let flat = r.f64s(3 * n, &rec)?;
        frames.push(TrajectoryFrame {
            index,
            time,
            positions: flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
        });
    }
    r.finish()?;
    Ok(Trajectory { dt, scene_hash, frames })
}

#[derive(Serialize, Deserialize)]
struct TrajectoryHeaderJson {
    format: String,
    version: u32,
    kernel_count: usize,
    dt: f64,
    scene_hash: String,
}

#[derive(Serialize, Deserialize)]
struct FrameJson {
    index: u64,
    time: f64,
    positions: Vec<[f64; 3]>,
}

const TRAJECTORY_JSON_FORMAT: &str = "splatsim-trajectory";

/// Line-delimited JSON: a header line, then one line per frame.
pub fn trajectory_to_jsonl(t: &Trajectory) -> Result<String> {
    let mut out = serde_json::to_string(&TrajectoryHeaderJson {
        format: TRAJECTORY_JSON_FORMAT.into(),
        version: FORMAT_VERSION,
        kernel_count: t.kernel_count(),
        dt: t.dt,
        scene_hash: hex(&t.scene_hash),
    })?;
    out.push('\n');
    for f in &t.frames {
        out += &serde_json::to_string(&FrameJson {
            index: f.index,
            time: f.time,
            positions: f.positions.iter().map(|p| (*p).into()).collect(),
        })?;
        out.push('\n');
    }
    Ok(out)
}

pub fn trajectory_from_jsonl(text: &str) -> Result<Trajectory> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: TrajectoryHeaderJson = serde_json::from_str(lines.next().ok_or_else(|| malformed("header", "empty file"))?)?;
    if header.format != TRAJECTORY_JSON_FORMAT {
        return Err(malformed("header", format!("format {:?}", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: header.version,
            expected: FORMAT_VERSION,
        });
    }
    let scene_hash = unhex(&header.scene_hash).ok_or_else(|| malformed("header", "scene hash is not 64 hex digits"))?;
    let mut frames = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: FrameJson = serde_json::from_str(line).map_err(|e| malformed(format!("frame {i}"), e.to_string()))?;
        if f.positions.len() != header.kernel_count {
            return Err(malformed(
                format!("frame {i}"),
                format!("{} positions for {} kernels", f.positions.len(), header.kernel_count),
            ));
        }
        frames.push(TrajectoryFrame {
            index: f.index,
            time: f.time,
            positions: f.positions.into_iter().map(Vec3::from).collect(),
        });
    }
    Ok(Trajectory {
        dt: header.dt,
        scene_hash,
        frames,
    })
}

/// Binary, or JSONL for a `.jsonl` path.
pub fn save_trajectory(path: &Path, t: &Trajectory) -> Result<()> {
    if is_jsonl(path) {
        std::fs::write(path, trajectory_to_jsonl(t)?)?;
    } else {
        std::fs::write(path, encode_trajectory(t))?;
    }
    Ok(())
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    if is_jsonl(path) {
        trajectory_from_jsonl(&std::fs::read_to_string(path)?)
    } else {
        decode_trajectory(&std::fs::read(path)?)
    }
}

pub fn encode_model(m: &PredictorModel) -> Result<Vec<u8>> {
    let mut w = Writer::new(MODEL_MAGIC);
    w.bytes(&serde_json::to_vec(&m.config)?);
    let shapes = m.config.layer_shapes();
    w.u32(shapes.len() as u32);
    for (name, rows, cols) in &shapes {
        w.bytes(name.as_bytes());
        w.u32(*rows as u32);
        w.u32(*cols as u32);
    }
    let flat = m.flat_params();
    w.u64(flat.len() as u64);
    flat.iter().for_each(|v| w.f64(*v));
    for scale in [&m.node_scale, &m.edge_scale] {
        w.u32(scale.len() as u32);
        scale.iter().for_each(|v| w.f64(*v));
    }
    Ok(w.0)
}

pub fn decode_model(buf: &[u8]) -> Result<PredictorModel> {
    let mut r = Reader::open(buf, MODEL_MAGIC, "SPMD")?;
    let config: ModelConfig =
        serde_json::from_slice(r.bytes("config")?).map_err(|e| malformed("config", e.to_string()))?;
    let shapes = config.layer_shapes();
    let layers = r.u32("layers")? as usize;
    if layers != shapes.len() {
        return Err(malformed("layers", format!("{layers} layers, config implies {}", shapes.len())));
    }
    for (i, (name, rows, cols)) in shapes.iter().enumerate() {
        let rec = format!("layer {i}");
        let found = r.bytes(&rec)?;
        let (fr, fc) = (r.u32(&rec)? as usize, r.u32(&rec)? as usize);
        if found != name.as_bytes() || (fr, fc) != (*rows, *cols) {
            return Err(malformed(
                rec,
                format!("{} {fr}x{fc}, config implies {name} {rows}x{cols}", String::from_utf8_lossy(found)),
            ));
        }
    }
    let mut model = PredictorModel::zeros(config)?;
    let n = r.count("parameters", 8)?;
    if n != model.parameter_count() {
        return Err(malformed(
            "parameters",
            format!("{n} values for a model with {}", model.parameter_count()),
        ));
    }
    model.set_flat_params(&r.f64s(n, "parameters")?)?;
    for (name, scale) in [("node scale", &mut model.node_scale), ("edge scale", &mut model.edge_scale)] {
        let k = r.u32(name)? as usize;
        if k != scale.len() {
            return Err(malformed(name, format!("{k} values, expected {}", scale.len())));
        }
        *scale = r.f64s(k, name)?;
    }
    r.finish()?;
    Ok(model)
}

pub fn save_model(path: &Path, m: &PredictorModel) -> Result<()> {
    std::fs::write(path, encode_model(m)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<PredictorModel> {
    decode_model(&std::fs::read(path)?)
}

/// Gradient provider selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProviderConfig {
    Identity,
    Oscillator(OscillatorParams),
    Learned { checkpoint: PathBuf },
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::Identity
    }
}

impl ProviderConfig {
    /// Instantiates the provider; learned models are loaded from disk.
    pub fn build(&self) -> Result<Box<dyn GradientProvider>> {
        Ok(match self {
            ProviderConfig::Identity => Box::new(IdentityProvider),
            ProviderConfig::Oscillator(p) => Box::new(OscillatorProvider::new(*p)?),
            ProviderConfig::Learned { checkpoint } => Box::new(LearnedProvider::new(load_model(checkpoint)?)),
        })
    }
}

/// Engine configuration (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Scene file; when absent the `synthetic` scene is generated.
    pub scene: Option<PathBuf>,
    pub synthetic: SynthSpec,
    pub radii: Vec<f64>,
    pub dt: f64,
    pub sh_degree: usize,
    pub seed: u64,
    pub provider: ProviderConfig,
    pub edges: EdgeConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            scene: None,
            synthetic: SynthSpec::default(),
            radii: DEFAULT_RADII.to_vec(),
            dt: DEFAULT_DT,
            sh_degree: 0,
            seed: 0,
            provider: ProviderConfig::default(),
            edges: EdgeConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radii.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::config(format!("radii must be positive: {:?}", self.radii)));
        }
        if self.radii.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config(format!("radii must be strictly increasing: {:?}", self.radii)));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::config(format!("sh_degree {} above {MAX_SH_DEGREE}", self.sh_degree)));
        }
        if !(self.edges.material_factor > 0.0 && self.edges.deformed_factor > 0.0) {
            return Err(Error::config("edge thresholds must be positive"));
        }
        self.training.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Reads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(s) = &c.scene {
            if s.is_relative() {
                c.scene = Some(base.join(s));
            }
        }
        if let ProviderConfig::Learned { checkpoint } = &mut c.provider {
            if checkpoint.is_relative() {
                *checkpoint = base.join(&*checkpoint);
            }
        }
        Ok(c)
    }

    /// Applies `key=value` overrides. Keys are dotted paths into the TOML
    /// form (`training.epochs`); values are TOML literals, or bare strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut node = &mut root;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| Error::config(format!("override {key:?}: {part:?} is not inside a table")))?;
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), value.clone());
                    break;
                }
                node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
            }
        }
        let c: Self = root.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Uses `seed` for every random source: synthetic scene, model
    /// initialization and training.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.synthetic.seed = seed;
        self.model.seed = seed;
        self.training.seed = seed;
    }

    /// Loads or generates the scene, at the configured SH degree.
    pub fn scene(&self) -> Result<SceneTemplate> {
        let scene = match &self.scene {
            Some(p) => load_scene(p)?,
            None => crate::synth::generate_synthetic_scene(&self.synthetic)?,
        };
        if scene.kernels.iter().all(|k| k.sh_degree() == Some(self.sh_degree)) {
            Ok(scene)
        } else {
            crate::synth::with_sh_degree(scene, self.sh_degree)
        }
    }
}
