//! The complete learned model and its checkpoint file.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"AVGUARD\0"            8-byte magic
//! u32                      format version (1)
//! u64                      manifest length in bytes
//! manifest                 UTF-8 JSON, see `Manifest`
//! tensor data              f32 LE values of every manifest tensor, in order
//! ```
//!
//! Model tensors come first and are named by their module path
//! (`stack.block0.phi.conv0.weight`, ...). Training-state tensors, when
//! present, follow and are prefixed with `train.`. The model id is the
//! SHA-256 of the model config JSON followed by the model tensors' names,
//! shapes and data, so it identifies the weights independently of any
//! training state.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use avguard_nn::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inn_core::{CouplingStack, NoiseEstimator, DEFAULT_BLOCKS, DEFAULT_GROWTH};
use crate::params::{cast_module, join, Module};
use crate::sfe_localizer::FeatureExtractor;
use crate::transforms::{PackingLayout, SpectralMaps, StftParams};

const MAGIC: &[u8; 8] = b"AVGUARD\0";
const FORMAT_VERSION: u32 = 1;
pub const MODEL_VERSION: &str = "avguard-cmw-1";
pub const TRAIN_PREFIX: &str = "train.";

/// Shapes and signal parameters a model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    pub fps: u32,
    pub sample_rate: u32,
    pub window_size: usize,
    pub hop_length: usize,
    pub blocks: usize,
    pub growth: usize,
}

impl Default for ModelConfig {
    /// 256x256 frames at 25 fps with 16 kHz audio, 510/128 STFT, six blocks.
    fn default() -> Self {
        Self {
            frame_height: 256,
            frame_width: 256,
            fps: 25,
            sample_rate: 16_000,
            window_size: 510,
            hop_length: 128,
            blocks: DEFAULT_BLOCKS,
            growth: DEFAULT_GROWTH,
        }
    }
}

impl ModelConfig {
    /// Checks shapes, chunking and capacity.
    pub fn validate(&self) -> Result<()> {
        if self.frame_height == 0 || self.frame_width == 0 || self.frame_height % 4 != 0 || self.frame_width % 4 != 0 {
            return Err(Error::Dimension(format!(
                "frame size {}x{} must be a positive multiple of 4",
                self.frame_height, self.frame_width
            )));
        }
        if self.fps == 0 || self.sample_rate == 0 || self.sample_rate % self.fps != 0 {
            return Err(Error::Config(format!(
                "sample rate {} is not an integer multiple of {} fps",
                self.sample_rate, self.fps
            )));
        }
        if self.blocks == 0 || self.growth == 0 {
            return Err(Error::Config("blocks and growth must be positive".into()));
        }
        self.layout().map(|_| ())
    }

    pub fn chunk_len(&self) -> usize {
        (self.sample_rate / self.fps) as usize
    }

    pub fn plane(&self) -> (usize, usize) {
        (self.frame_height / 4, self.frame_width / 4)
    }

    pub fn stft(&self) -> StftParams {
        StftParams::new(self.window_size, self.hop_length)
    }

    pub fn layout(&self) -> Result<PackingLayout> {
        let (h, w) = self.plane();
        PackingLayout::for_chunk(self.chunk_len(), self.stft(), h, w)
    }

    pub fn timestep(&self) -> f64 {
        1.0 / self.fps as f64
    }
}

/// Coupling stack, latent estimator and feature extractor.
#[derive(Debug, Clone)]
pub struct WatermarkModel<T: Real> {
    pub config: ModelConfig,
    pub stack: CouplingStack<T>,
    pub estimator: NoiseEstimator<T>,
    pub sfe: FeatureExtractor<T>,
}

impl<T: Real> WatermarkModel<T> {
    /// Fresh model; every subnet's last layer starts at zero so the initial
    /// stack leaves frames untouched.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            config,
            stack: CouplingStack::new(config.blocks, config.growth, &mut rng)?,
            estimator: NoiseEstimator::new(config.growth, &mut rng),
            sfe: FeatureExtractor::new(&mut rng),
        })
    }

    pub fn layout(&self) -> PackingLayout {
        self.config.layout().expect("validated at construction")
    }

    pub fn spectral_maps(&self) -> SpectralMaps<T> {
        SpectralMaps::new(self.config.chunk_len(), self.layout(), self.config.plane())
            .expect("validated at construction")
    }

    pub fn cast<U: Real>(&self) -> WatermarkModel<U> {
        let mut out = WatermarkModel::<U>::new(self.config, 0).expect("same config");
        cast_module(self, &mut out);
        out
    }

    pub fn model_id(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.config).expect("config serializes"));
        self.visit("", &mut |name, t| {
            hasher.update(name.as_bytes());
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                hasher.update(v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
        });
        hex(&hasher.finalize())
    }
}

impl<T: Real> Module<T> for WatermarkModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Arc<Tensor<T>>)) {
        self.stack.visit(&join(prefix, "stack"), f);
        self.estimator.visit(&join(prefix, "estimator"), f);
        self.sfe.visit(&join(prefix, "sfe"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Arc<Tensor<T>>)) {
        self.stack.visit_mut(&join(prefix, "stack"), f);
        self.estimator.visit_mut(&join(prefix, "estimator"), f);
        self.sfe.visit_mut(&join(prefix, "sfe"), f);
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model_version: String,
    pub model_id: String,
    pub config: ModelConfig,
    /// Layout implied by `config`, recorded so files are self-describing.
    pub layout: PackingLayout,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<serde_json::Value>,
}

/// A model plus optional training state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: WatermarkModel<f32>,
    /// Free-form training metadata (iteration, configs, ...).
    pub training: Option<serde_json::Value>,
    /// Training-state tensors, stored under [`TRAIN_PREFIX`].
    pub extra: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: WatermarkModel<f32>) -> Self {
        Self { model, training: None, extra: Vec::new() }
    }

    pub fn model_id(&self) -> String {
        self.model.model_id()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Arc<Tensor<f32>>)> = Vec::new();
        self.model.visit("", &mut |name, t| tensors.push((name, t.clone())));
        for (name, t) in &self.extra {
            tensors.push((format!("{TRAIN_PREFIX}{name}"), Arc::new(t.clone())));
        }
        let manifest = Manifest {
            model_version: MODEL_VERSION.to_string(),
            model_id: self.model_id(),
            config: self.model.config,
            layout: self.model.layout(),
            tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
            training: self.training.clone(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut buf = Vec::with_capacity(json.len() + 64);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_manifest(path: &Path) -> Result<Manifest> {
        let (manifest, _) = read_parts(path, false)?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, data) = read_parts(path, true)?;
        if manifest.model_version != MODEL_VERSION {
            return Err(Error::Checkpoint(format!("unsupported model version {}", manifest.model_version)));
        }
        let mut model = WatermarkModel::<f32>::new(manifest.config, 0)
            .map_err(|e| Error::Checkpoint(format!("invalid model config: {e}")))?;
        let mut offset = 0usize;
        let mut values = Vec::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            let n: usize = entry.shape.iter().product();
            let bytes = data
                .get(offset * 4..(offset + n) * 4)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} is truncated", entry.name)))?;
            let vals = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            values.push((entry.name.clone(), Tensor::new(&entry.shape, vals)));
            offset += n;
        }
        if offset * 4 != data.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", data.len() - offset * 4)));
        }
        let mut it = values.into_iter();
        let mut problem = None;
        model.visit_mut("", &mut |name, t| {
            match it.next() {
                Some((n, v)) if n == name && v.shape() == t.shape() => *t = Arc::new(v),
                Some((n, v)) => {
                    problem.get_or_insert(format!("expected {name} {:?}, found {n} {:?}", t.shape(), v.shape()));
                }
                None => {
                    problem.get_or_insert(format!("missing tensor {name}"));
                }
            }
        });
        if let Some(p) = problem {
            return Err(Error::Checkpoint(p));
        }
        let mut extra = Vec::new();
        for (name, t) in it {
            let Some(stripped) = name.strip_prefix(TRAIN_PREFIX) else {
                return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
            };
            extra.push((stripped.to_string(), t));
        }
        let id = model.model_id();
        if id != manifest.model_id {
            return Err(Error::Checkpoint(format!("weights digest {id} does not match manifest {}", manifest.model_id)));
        }
        Ok(Self { model, training: manifest.training, extra })
    }
}

fn read_parts(path: &Path, with_data: bool) -> Result<(Manifest, Vec<u8>)> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 20];
    f.read_exact(&mut head).map_err(|_| Error::Checkpoint(format!("{} is not a checkpoint", path.display())))?;
    if &head[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(head[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {version}")));
    }
    let len = u64::from_le_bytes(head[12..20].try_into().unwrap()) as usize;
    let mut json = vec![0u8; len];
    f.read_exact(&mut json).map_err(|_| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    let mut data = Vec::new();
    if with_data {
        f.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;
    }
    Ok((manifest, data))
}
