//! Semantic audio features and feature-space tamper scoring.
//!
//! Each chunk (one frame interval) is turned into a log-magnitude
//! spectrogram, passed through a small strided CNN, pooled and projected to
//! a unit-norm feature vector. Tampering is scored per chunk by the cosine
//! similarity between features of the received and the recovered audio.

use std::sync::Arc;

use avguard_nn::{CustomOp, Graph, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{join, uniform_init, Module};
use crate::transforms::{PackingLayout, SpectralMaps};

pub const FEATURE_DIM: usize = 32;
pub const SFE_WIDTHS: [usize; 4] = [16, 32, 64, 64];
pub const DEFAULT_SMOOTHING: usize = 3;
pub const DEFAULT_MIN_RUN: usize = 2;

const MAGNITUDE_EPS: f64 = 1e-8;
const LOG_FLOOR: f64 = 1e-3;

/// `[n, plane_slots]` packed spectra to `[n, 1, bins, frames]` values of
/// `ln(|X| + floor)`.
pub struct LogMagnitude {
    bins: usize,
    frames: usize,
}

impl LogMagnitude {
    pub fn new(layout: &PackingLayout) -> Arc<Self> {
        Arc::new(Self { bins: layout.n_fft_bins, frames: layout.n_time_frames })
    }
}

impl<T: Real> CustomOp<T> for LogMagnitude {
    fn name(&self) -> &str {
        "log_magnitude"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let x = inputs[0];
        let (n, slots) = x.dims2();
        let half = self.bins * self.frames;
        assert!(2 * half <= slots, "packed plane too small for layout");
        let (eps, floor) = (T::lit(MAGNITUDE_EPS), T::lit(LOG_FLOOR));
        let mut out = Vec::with_capacity(n * half);
        for row in x.data().chunks_exact(slots) {
            for i in 0..half {
                let (re, im) = (row[i], row[half + i]);
                out.push(((re * re + im * im + eps).sqrt() + floor).ln());
            }
        }
        Tensor::new(&[n, 1, self.bins, self.frames], out)
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let (_, slots) = x.dims2();
        let half = self.bins * self.frames;
        let (eps, floor) = (T::lit(MAGNITUDE_EPS), T::lit(LOG_FLOOR));
        let mut gx = Tensor::zeros(x.shape());
        for ((row, grow), gout) in
            x.data().chunks_exact(slots).zip(gx.data_mut().chunks_exact_mut(slots)).zip(grad.data().chunks_exact(half))
        {
            for i in 0..half {
                let (re, im) = (row[i], row[half + i]);
                let mag = (re * re + im * im + eps).sqrt();
                let k = gout[i] / ((mag + floor) * mag);
                grow[i] = k * re;
                grow[half + i] = k * im;
            }
        }
        vec![Some(gx)]
    }
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor<T: Real> {
    convs: Vec<(Arc<Tensor<T>>, Arc<Tensor<T>>)>,
    proj_weight: Arc<Tensor<T>>,
    proj_bias: Arc<Tensor<T>>,
}

impl<T: Real> FeatureExtractor<T> {
    pub fn new(rng: &mut impl Rng) -> Self {
        let mut convs = Vec::new();
        let mut cin = 1;
        for &cout in &SFE_WIDTHS {
            let fan_in = cin * 9;
            convs.push((
                Arc::new(uniform_init(&[cout, cin, 3, 3], fan_in, rng)),
                Arc::new(uniform_init(&[cout], fan_in, rng)),
            ));
            cin = cout;
        }
        Self {
            convs,
            proj_weight: Arc::new(uniform_init(&[cin, FEATURE_DIM], cin, rng)),
            proj_bias: Arc::new(uniform_init(&[FEATURE_DIM], cin, rng)),
        }
    }

    /// Features of `[n, chunk_len]` waveforms as unit rows of `[n, 32]`.
    pub fn eval(&self, g: &mut Graph<T>, maps: &SpectralMaps<T>, chunks: Var) -> Var {
        let analysis = g.constant_shared(maps.analysis.clone());
        let spectra = g.matmul(chunks, analysis);
        self.eval_spectra(g, &maps.layout, spectra)
    }

    /// Same as [`FeatureExtractor::eval`] starting from packed `[n, slots]` spectra.
    pub fn eval_spectra(&self, g: &mut Graph<T>, layout: &PackingLayout, spectra: Var) -> Var {
        let slope = T::lit(0.2);
        let mut x = g.custom(LogMagnitude::new(layout), &[spectra]);
        for (w, b) in &self.convs {
            let (w, b) = (g.bind(w), g.bind(b));
            let y = g.conv2d(x, w, b, (2, 1), (1, 1));
            x = g.leaky_relu(y, slope);
        }
        let pooled = g.spatial_mean(x);
        let w = g.bind(&self.proj_weight);
        let b = g.bind(&self.proj_bias);
        let projected = g.matmul(pooled, w);
        let projected = g.add_bias(projected, b);
        g.normalize_rows(projected)
    }
}

impl<T: Real> Module<T> for FeatureExtractor<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Arc<Tensor<T>>)) {
        for (k, (w, b)) in self.convs.iter().enumerate() {
            f(join(prefix, &format!("conv{k}.weight")), w);
            f(join(prefix, &format!("conv{k}.bias")), b);
        }
        f(join(prefix, "proj.weight"), &self.proj_weight);
        f(join(prefix, "proj.bias"), &self.proj_bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Arc<Tensor<T>>)) {
        for (k, (w, b)) in self.convs.iter_mut().enumerate() {
            f(join(prefix, &format!("conv{k}.weight")), w);
            f(join(prefix, &format!("conv{k}.bias")), b);
        }
        f(join(prefix, "proj.weight"), &mut self.proj_weight);
        f(join(prefix, "proj.bias"), &mut self.proj_bias);
    }
}

/// Unit-norm features, one row per timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub features: Tensor<f32>,
    pub timestep_duration: f64,
}

impl FeatureMap {
    pub fn timesteps(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn row(&self, t: usize) -> &[f32] {
        let c = self.channels();
        &self.features.data()[t * c..(t + 1) * c]
    }
}

/// One feature row per chunk of `audio`.
pub fn extract_features(audio: &[f32], sfe: &FeatureExtractor<f32>, maps: &SpectralMaps<f32>, timestep_duration: f64) -> Result<FeatureMap> {
    if audio.is_empty() {
        return Err(Error::Empty("no audio to extract features from".into()));
    }
    if audio.len() % maps.chunk_len != 0 {
        return Err(Error::Alignment(format!(
            "{} samples is not a multiple of the {}-sample chunk",
            audio.len(),
            maps.chunk_len
        )));
    }
    let n = audio.len() / maps.chunk_len;
    let mut g = Graph::no_grad();
    let x = g.constant(Tensor::new(&[n, maps.chunk_len], audio.to_vec()));
    let f = sfe.eval(&mut g, maps, x);
    Ok(FeatureMap { features: g.value(f).clone(), timestep_duration })
}

/// Per-timestep scores; lower means more likely tampered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TamperScoreSeries {
    pub scores: Vec<f64>,
    pub timestep_duration: f64,
}

/// Half-open `[t_start, t_end)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TamperInterval {
    pub t_start: f64,
    pub t_end: f64,
}

impl TamperInterval {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

/// Median filter with edge replication; `width` is forced odd.
pub fn median_smooth(values: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    if half == 0 || values.is_empty() {
        return values.to_vec();
    }
    let last = values.len() as isize - 1;
    let mut window = Vec::with_capacity(2 * half + 1);
    (0..values.len() as isize)
        .map(|t| {
            window.clear();
            window.extend((t - half as isize..=t + half as isize).map(|i| values[i.clamp(0, last) as usize]));
            window.sort_by(f64::total_cmp);
            window[half]
        })
        .collect()
}

pub fn similarity_scores(a: &FeatureMap, b: &FeatureMap) -> Result<TamperScoreSeries> {
    similarity_scores_with(a, b, DEFAULT_SMOOTHING)
}

/// Inner products of matching rows, then median smoothing of `smoothing` taps.
pub fn similarity_scores_with(a: &FeatureMap, b: &FeatureMap, smoothing: usize) -> Result<TamperScoreSeries> {
    if a.features.shape() != b.features.shape() {
        return Err(Error::Dimension(format!(
            "feature maps {:?} and {:?} differ",
            a.features.shape(),
            b.features.shape()
        )));
    }
    let raw: Vec<f64> = (0..a.timesteps())
        .map(|t| {
            let dot: f64 = a.row(t).iter().zip(b.row(t)).map(|(&x, &y)| x as f64 * y as f64).sum();
            dot.clamp(-1.0, 1.0)
        })
        .collect();
    Ok(TamperScoreSeries { scores: median_smooth(&raw, smoothing), timestep_duration: a.timestep_duration })
}

pub fn scores_to_intervals(scores: &TamperScoreSeries, threshold: f64) -> Vec<TamperInterval> {
    scores_to_intervals_with(scores, threshold, DEFAULT_MIN_RUN)
}

/// Timesteps scoring below `threshold` are tampered; runs of at least
/// `min_run` consecutive tampered timesteps become intervals.
pub fn scores_to_intervals_with(scores: &TamperScoreSeries, threshold: f64, min_run: usize) -> Vec<TamperInterval> {
    let dt = scores.timestep_duration;
    let mut out = Vec::new();
    let mut start = None;
    for (t, &s) in scores.scores.iter().chain(std::iter::once(&f64::INFINITY)).enumerate() {
        match (s < threshold, start) {
            (true, None) => start = Some(t),
            (false, Some(s0)) => {
                if t - s0 >= min_run.max(1) {
                    out.push(TamperInterval { t_start: s0 as f64 * dt, t_end: t as f64 * dt });
                }
                start = None;
            }
            _ => {}
        }
    }
    out
}

/// Baseline: per-chunk mean squared difference of the waveforms, mapped to
/// `1 - mse / 2` (identical chunks score 1, signals in `[-1, 1]` stay in `[-1, 1]`).
pub fn raw_waveform_scores(a: &[f32], b: &[f32], chunk_len: usize, timestep_duration: f64) -> Result<TamperScoreSeries> {
    if a.len() != b.len() {
        return Err(Error::Alignment(format!("waveforms have {} and {} samples", a.len(), b.len())));
    }
    if chunk_len == 0 || a.len() % chunk_len != 0 {
        return Err(Error::Alignment(format!("{} samples do not split into {chunk_len}-sample chunks", a.len())));
    }
    let scores = a
        .chunks_exact(chunk_len)
        .zip(b.chunks_exact(chunk_len))
        .map(|(x, y)| {
            let mse = x.iter().zip(y).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>() / chunk_len as f64;
            1.0 - mse / 2.0
        })
        .collect();
    Ok(TamperScoreSeries { scores, timestep_duration })
}

/// Localization output written by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TamperReport {
    pub scores: Vec<f64>,
    pub timestep_duration: f64,
    pub threshold: f64,
    pub intervals: Vec<TamperInterval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<crate::metrics::MetricReport>,
}
