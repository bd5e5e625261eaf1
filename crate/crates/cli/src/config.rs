//! Flat `key = value` experiment configuration.
//!
//! Every key is optional; unknown keys are rejected. Lists are written as
//! strings: boxes as `"x,y,w,h"` separated by `;`.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `dataset` | | directory of containers (train, evaluate) |
//! | `input` | | input container (embed, recover, localize, simulate) |
//! | `output` | `out` | output directory |
//! | `checkpoint` | | model checkpoint |
//! | `reference` | | original container for metrics |
//! | `recovered` | | recovered container for localize (else recovered inline) |
//! | `ground_truth` | | ground-truth JSON for localize |
//! | `donor` | | container whose audio is used for swaps (else same clip) |
//! | `seed` | 0 | seed for every random choice |
//! | `frame_height`, `frame_width` | 128 | model frame size |
//! | `fps`, `sample_rate` | 25, 8000 | stream timing |
//! | `window_size`, `hop_length` | 126, 64 | STFT of the packed audio |
//! | `blocks`, `growth` | 4, 16 | coupling blocks, dense-subnet growth |
//! | `learning_rate`, `beta1`, `beta2` | 1e-4, 0.9, 0.5 | Adam |
//! | `sfe_learning_rate` | `learning_rate` | Adam step size of the feature extractor |
//! | `iterations`, `batch_size` | 10000, 4 | schedule |
//! | `extractor_iterations` | 0 | extra steps training only the feature extractor |
//! | `checkpoint_every`, `log_every`, `validate_every` | 1000, 10, 1000 | periods (0 = end only) |
//! | `lambda_wl`, `lambda_vrl`, `lambda_arl`, `lambda_sfcl`, `tau` | 10, 0.1, 10, 1, 0.07 | loss |
//! | `mask_mode` | `region_boxes` | `none`, `random_rects`, `region_boxes` |
//! | `mask_boxes` | centred box | boxes for `region_boxes` |
//! | `mask_rect_count_min/max`, `mask_side_min/max` | 1, 3, 20, 150 | `random_rects` ranges |
//! | `synthetic` | false | train on generated clips instead of `dataset` |
//! | `n_clips`, `duration` | 12, 2.0 | generated clips and their length in seconds |
//! | `validation_clips`, `validation_duration` | 2, 5.0 | generated held-out clips |
//! | `audio_mode` | `swap` | `none`, `swap`, `substitute` |
//! | `fraction` | 0.2 | tampered share of the audio |
//! | `generator` | `noise` | `noise`, `tone`, `shuffled_speech` |
//! | `visual_mode` | `region_replace` | `none`, `region_replace`, `region_noise` |
//! | `frame_scope` | `all` | `all`, `tampered` |
//! | `region` | centred box | box corrupted by visual tampering |
//! | `threshold` | from checkpoint | localization threshold |
//! | `smoothing`, `min_run` | 3, 2 | score smoothing width, minimum interval length |

use std::path::{Path, PathBuf};

use avguard_core::model::ModelConfig;
use avguard_core::tamper_sim::{AudioTamper, FrameScope, Generator, TamperPlan, VisualTamper};
use avguard_core::training::{centered_box, LossWeights, MaskMode, MaskSpec, RegionBox, TrainConfig};
use avguard_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::datagen::ClipFormat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub recovered: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub donor: Option<PathBuf>,
    pub seed: u64,

    pub frame_height: usize,
    pub frame_width: usize,
    pub fps: u32,
    pub sample_rate: u32,
    pub window_size: usize,
    pub hop_length: usize,
    pub blocks: usize,
    pub growth: usize,

    pub learning_rate: f64,
    pub sfe_learning_rate: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub iterations: usize,
    pub extractor_iterations: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub validate_every: usize,
    pub lambda_wl: f64,
    pub lambda_vrl: f64,
    pub lambda_arl: f64,
    pub lambda_sfcl: f64,
    pub tau: f64,
    pub mask_mode: MaskMode,
    pub mask_boxes: String,
    pub mask_rect_count_min: usize,
    pub mask_rect_count_max: usize,
    pub mask_side_min: usize,
    pub mask_side_max: usize,

    pub synthetic: bool,
    pub n_clips: usize,
    pub duration: f64,
    pub validation_clips: usize,
    pub validation_duration: f64,

    pub audio_mode: AudioTamper,
    pub fraction: f64,
    pub generator: Generator,
    pub visual_mode: VisualTamper,
    pub frame_scope: FrameScope,
    pub region: String,

    pub threshold: Option<f64>,
    pub smoothing: usize,
    pub min_run: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let weights = LossWeights::default();
        let plan = TamperPlan::default();
        Self {
            dataset: None,
            input: None,
            output: PathBuf::from("out"),
            checkpoint: None,
            reference: None,
            recovered: None,
            ground_truth: None,
            donor: None,
            seed: 0,
            frame_height: 128,
            frame_width: 128,
            fps: 25,
            sample_rate: 8000,
            window_size: 126,
            hop_length: 64,
            blocks: 4,
            growth: 16,
            learning_rate: train.learning_rate,
            sfe_learning_rate: train.sfe_learning_rate,
            beta1: train.beta1,
            beta2: train.beta2,
            iterations: train.iterations,
            extractor_iterations: train.extractor_iterations,
            batch_size: train.batch_size,
            checkpoint_every: train.checkpoint_every,
            log_every: train.log_every,
            validate_every: 1000,
            lambda_wl: weights.lambda_wl,
            lambda_vrl: weights.lambda_vrl,
            lambda_arl: weights.lambda_arl,
            lambda_sfcl: weights.lambda_sfcl,
            tau: weights.tau,
            mask_mode: MaskMode::RegionBoxes,
            mask_boxes: String::new(),
            mask_rect_count_min: 1,
            mask_rect_count_max: 3,
            mask_side_min: 20,
            mask_side_max: 150,
            synthetic: false,
            n_clips: 12,
            duration: 2.0,
            validation_clips: 2,
            validation_duration: 5.0,
            audio_mode: plan.audio_mode,
            fraction: plan.fraction,
            generator: plan.generator,
            visual_mode: plan.visual_mode,
            frame_scope: plan.frame_scope,
            region: String::new(),
            threshold: None,
            smoothing: avguard_core::sfe_localizer::DEFAULT_SMOOTHING,
            min_run: avguard_core::sfe_localizer::DEFAULT_MIN_RUN,
        }
    }
}

/// Reads `key=value`; the value is TOML if it parses as such, else a bare string.
pub fn parse_override(text: &str) -> Result<(String, toml::Value)> {
    let (k, v) = text.split_once('=').ok_or_else(|| Error::Config(format!("override `{text}` is not key=value")))?;
    let (k, v) = (k.trim(), v.trim());
    let value = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

pub fn parse_boxes(text: &str) -> Result<Vec<RegionBox>> {
    text.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let v: Vec<usize> = s
                .split(',')
                .map(|p| p.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad box component in {s:?}"))))
                .collect::<Result<_>>()?;
            match v[..] {
                [x, y, w, h] => Ok((x, y, w, h)),
                _ => Err(Error::Config(format!("box {s:?} needs four values x,y,w,h"))),
            }
        })
        .collect()
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    /// `base` (if any) with `overrides` applied on top.
    pub fn with_overrides(base: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut table = match base {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                text.parse::<toml::Table>().map_err(|e| Error::Config(e.message().to_string()))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            table.insert(k.clone(), v.clone());
        }
        table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
    }

    /// `key = value` lines for every field, loadable with [`ExperimentConfig::from_str`].
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            frame_height: self.frame_height,
            frame_width: self.frame_width,
            fps: self.fps,
            sample_rate: self.sample_rate,
            window_size: self.window_size,
            hop_length: self.hop_length,
            blocks: self.blocks,
            growth: self.growth,
        }
    }

    pub fn clip_format(&self) -> ClipFormat {
        ClipFormat { frame_height: self.frame_height, frame_width: self.frame_width, fps: self.fps, sample_rate: self.sample_rate }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            sfe_learning_rate: self.sfe_learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            iterations: self.iterations,
            extractor_iterations: self.extractor_iterations,
            batch_size: self.batch_size,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            log_every: self.log_every,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_wl: self.lambda_wl,
            lambda_vrl: self.lambda_vrl,
            lambda_arl: self.lambda_arl,
            lambda_sfcl: self.lambda_sfcl,
            tau: self.tau,
        }
    }

    pub fn mask(&self) -> Result<MaskSpec> {
        let mut boxes = parse_boxes(&self.mask_boxes)?;
        if boxes.is_empty() && self.mask_mode == MaskMode::RegionBoxes {
            boxes.push(centered_box(self.frame_height, self.frame_width));
        }
        Ok(MaskSpec {
            mode: self.mask_mode,
            rect_count_range: (self.mask_rect_count_min, self.mask_rect_count_max),
            side_range: (self.mask_side_min, self.mask_side_max),
            region_boxes: boxes,
        })
    }

    pub fn plan(&self) -> Result<TamperPlan> {
        let region = match parse_boxes(&self.region)?[..] {
            [] => None,
            [b] => Some(b),
            _ => return Err(Error::Config("region takes a single box".into())),
        };
        Ok(TamperPlan {
            audio_mode: self.audio_mode,
            fraction: self.fraction,
            generator: self.generator,
            visual_mode: self.visual_mode,
            frame_scope: self.frame_scope,
            region,
            seed: self.seed,
        })
    }

    /// Checks everything that does not depend on the command being run.
    pub fn validate(&self) -> Result<()> {
        self.model().validate().map_err(|e| match e {
            Error::Capacity { .. } => e,
            other => Error::Config(other.to_string()),
        })?;
        self.train().validate()?;
        self.weights().validate()?;
        self.mask()?.validate(self.frame_height, self.frame_width).map_err(|e| Error::Config(e.to_string()))?;
        self.plan()?.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.smoothing == 0 {
            return Err(Error::Config("smoothing width must be at least 1".into()));
        }
        if !(self.duration > 0.0 && self.validation_duration > 0.0) {
            return Err(Error::Config("durations must be positive".into()));
        }
        Ok(())
    }

    /// Path-valued key that a command requires.
    pub fn require(&self, key: &str) -> Result<&Path> {
        let v = match key {
            "dataset" => &self.dataset,
            "input" => &self.input,
            "checkpoint" => &self.checkpoint,
            "reference" => &self.reference,
            "ground_truth" => &self.ground_truth,
            _ => &None,
        };
        let p = v.as_deref().ok_or_else(|| Error::Config(format!("`{key}` is required for this command")))?;
        if !p.exists() {
            return Err(match key {
                "checkpoint" => Error::Checkpoint(format!("checkpoint {} does not exist", p.display())),
                "input" | "reference" | "dataset" => Error::Container { path: p.to_path_buf(), reason: "does not exist".into() },
                _ => Error::Config(format!("`{key}` path {} does not exist", p.display())),
            });
        }
        Ok(p)
    }
}
