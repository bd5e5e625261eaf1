//! Losses, masking, the feature queue and the optimization loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use avguard_nn::{Adam, AdamConfig, CustomOp, Graph, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, WatermarkModel};
use crate::params::Module;
use crate::pipeline::{embed_graph, recover_graph, AVStream, EmbedOptions, RecoverVars};
use crate::sfe_localizer::FeatureMap;
use crate::transforms::{SpectralMaps, VisualFrame};

pub const QUEUE_CAPACITY: usize = 65_536;

/// Weights of the four loss terms and the contrastive temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_wl: f64,
    pub lambda_vrl: f64,
    pub lambda_arl: f64,
    pub lambda_sfcl: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_wl: 10.0, lambda_vrl: 0.1, lambda_arl: 10.0, lambda_sfcl: 1.0, tau: 0.07 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.lambda_wl, self.lambda_vrl, self.lambda_arl, self.lambda_sfcl];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    None,
    RandomRects,
    RegionBoxes,
}

/// Pixel box `(x, y, width, height)`.
pub type RegionBox = (usize, usize, usize, usize);

/// How training masks are drawn. Mask value 1 restores the original pixel,
/// i.e. marks where the watermark is destroyed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub mode: MaskMode,
    pub rect_count_range: (usize, usize),
    pub side_range: (usize, usize),
    #[serde(default)]
    pub region_boxes: Vec<RegionBox>,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self { mode: MaskMode::RandomRects, rect_count_range: (1, 3), side_range: (20, 150), region_boxes: Vec::new() }
    }
}

impl MaskSpec {
    pub fn none() -> Self {
        Self { mode: MaskMode::None, ..Self::default() }
    }

    pub fn boxes(region_boxes: Vec<RegionBox>) -> Self {
        Self { mode: MaskMode::RegionBoxes, region_boxes, ..Self::default() }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let (c0, c1) = self.rect_count_range;
        let (s0, s1) = self.side_range;
        if c0 == 0 || c1 < c0 || s0 == 0 || s1 < s0 {
            return Err(Error::InvalidArgument(format!(
                "mask ranges must be positive and ordered: count {c0}..={c1}, side {s0}..={s1}"
            )));
        }
        for &(x, y, w, h) in &self.region_boxes {
            if w == 0 || h == 0 || x + w > width || y + h > height {
                return Err(Error::InvalidArgument(format!("box ({x}, {y}, {w}, {h}) outside {height}x{width} frame")));
            }
        }
        Ok(())
    }
}

/// The `(x, y, w, h)` box of half the frame size centred in the frame.
pub fn centered_box(height: usize, width: usize) -> RegionBox {
    (width / 4, height / 4, width / 2, height / 2)
}

fn fill_box(mask: &mut [f32], width: usize, (x, y, w, h): RegionBox) {
    for row in y..y + h {
        mask[row * width + x..row * width + x + w].fill(1.0);
    }
}

/// `[h, w]` binary mask.
pub fn gen_mask(spec: &MaskSpec, height: usize, width: usize, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    spec.validate(height, width)?;
    let mut mask = vec![0.0f32; height * width];
    match spec.mode {
        MaskMode::None => {}
        MaskMode::RegionBoxes => {
            for &b in &spec.region_boxes {
                fill_box(&mut mask, width, b);
            }
        }
        MaskMode::RandomRects => {
            let count = rng.random_range(spec.rect_count_range.0..=spec.rect_count_range.1);
            for _ in 0..count {
                let h = rng.random_range(spec.side_range.0..=spec.side_range.1).min(height);
                let w = rng.random_range(spec.side_range.0..=spec.side_range.1).min(width);
                let y = rng.random_range(0..=height - h);
                let x = rng.random_range(0..=width - w);
                fill_box(&mut mask, width, (x, y, w, h));
            }
        }
    }
    Ok(Tensor::new(&[height, width], mask))
}

/// `mask * original + (1 - mask) * watermarked`, per pixel and channel.
pub fn apply_mask(original: &VisualFrame, watermarked: &VisualFrame, mask: &Tensor<f32>) -> Result<VisualFrame> {
    let (h, w) = (original.height(), original.width());
    if watermarked.height() != h || watermarked.width() != w || mask.shape() != [h, w] {
        return Err(Error::Dimension(format!(
            "apply_mask needs matching shapes: original {h}x{w}, watermarked {}x{}, mask {:?}",
            watermarked.height(),
            watermarked.width(),
            mask.shape()
        )));
    }
    let m = mask.data();
    let pixels = original
        .pixels()
        .iter()
        .zip(watermarked.pixels())
        .enumerate()
        .map(|(i, (&o, &wm))| {
            let k = m[i % (h * w)];
            k * o + (1.0 - k) * wm
        })
        .collect();
    VisualFrame::new(h, w, pixels)
}

fn mse_checked(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("loss inputs differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Empty("loss inputs".into()));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.len() as f64)
}

fn frames_mse(a: &[VisualFrame], b: &[VisualFrame]) -> Result<f64> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.height() != y.height() || x.width() != y.width()) {
        return Err(Error::Dimension("frame sequences differ in shape".into()));
    }
    let fa: Vec<f32> = a.iter().flat_map(|f| f.pixels().iter().copied()).collect();
    let fb: Vec<f32> = b.iter().flat_map(|f| f.pixels().iter().copied()).collect();
    mse_checked(&fa, &fb)
}

/// Mean squared difference between watermarked and original frames.
pub fn loss_wl(watermarked: &[VisualFrame], original: &[VisualFrame]) -> Result<f64> {
    frames_mse(watermarked, original)
}

/// Mean squared difference between original and recovered frames.
pub fn loss_vrl(original: &[VisualFrame], recovered: &[VisualFrame]) -> Result<f64> {
    frames_mse(original, recovered)
}

/// Mean squared difference between original and recovered waveforms.
pub fn loss_arl(original: &[f32], recovered: &[f32]) -> Result<f64> {
    mse_checked(original, recovered)
}

/// FIFO memory of unit feature vectors used as extra negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureQueue {
    dim: usize,
    capacity: usize,
    storage: Vec<f32>,
    head: usize,
    len: usize,
}

impl FeatureQueue {
    pub fn new(dim: usize) -> Self {
        Self::with_capacity(dim, QUEUE_CAPACITY)
    }

    pub fn with_capacity(dim: usize, capacity: usize) -> Self {
        assert!(dim > 0 && capacity > 0);
        Self { dim, capacity, storage: Vec::new(), head: 0, len: 0 }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends rows of `[n, dim]`, normalizing each and evicting the oldest when full.
    pub fn push(&mut self, rows: &Tensor<f32>) {
        let (n, d) = rows.dims2();
        assert_eq!(d, self.dim, "feature dimension mismatch");
        for r in 0..n {
            let row = &rows.data()[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            let slot = (self.head + self.len) % self.capacity;
            if slot * d >= self.storage.len() {
                self.storage.extend(row.iter().map(|v| v / norm));
            } else {
                for (s, v) in self.storage[slot * d..(slot + 1) * d].iter_mut().zip(row) {
                    *s = v / norm;
                }
            }
            if self.len < self.capacity {
                self.len += 1;
            } else {
                self.head = (self.head + 1) % self.capacity;
            }
        }
    }

    /// Entries oldest first, as `[len, dim]`.
    pub fn contents(&self) -> Tensor<f32> {
        let d = self.dim;
        let mut data = Vec::with_capacity(self.len * d);
        for i in 0..self.len {
            let slot = (self.head + i) % self.capacity;
            data.extend_from_slice(&self.storage[slot * d..(slot + 1) * d]);
        }
        Tensor::new(&[self.len, d], data)
    }
}

/// InfoNCE summed over timesteps. Inputs `[anchors: T x C, positives: T x C]`;
/// for anchor `t` the candidates are every positive row (row `t` is the match)
/// followed by the fixed `negatives`.
pub struct InfoNce<T> {
    pub tau: f64,
    pub negatives: Arc<Tensor<T>>,
}

impl<T: Real> InfoNce<T> {
    fn softmax_rows(&self, anchors: &Tensor<T>, positives: &Tensor<T>) -> (Vec<f64>, f64) {
        let (t, c) = anchors.dims2();
        let q = self.negatives.shape()[0];
        let k = t + q;
        let candidates = |j: usize| -> &[T] {
            if j < t {
                &positives.data()[j * c..(j + 1) * c]
            } else {
                &self.negatives.data()[(j - t) * c..(j - t + 1) * c]
            }
        };
        let mut probs = vec![0.0f64; t * k];
        let mut loss = 0.0;
        for i in 0..t {
            let a = &anchors.data()[i * c..(i + 1) * c];
            let row = &mut probs[i * k..(i + 1) * k];
            for (j, r) in row.iter_mut().enumerate() {
                let dot: f64 = a.iter().zip(candidates(j)).map(|(x, y)| x.to_f64().unwrap() * y.to_f64().unwrap()).sum();
                *r = dot / self.tau;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            loss += max + z.ln() - row[i];
            for r in row.iter_mut() {
                *r = (*r - max).exp() / z;
            }
        }
        (probs, loss)
    }
}

impl<T: Real> CustomOp<T> for InfoNce<T> {
    fn name(&self) -> &str {
        "info_nce"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let (_, loss) = self.softmax_rows(inputs[0], inputs[1]);
        Tensor::scalar(T::lit(loss))
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (anchors, positives) = (inputs[0], inputs[1]);
        let (t, c) = anchors.dims2();
        let k = t + self.negatives.shape()[0];
        let (mut probs, _) = self.softmax_rows(anchors, positives);
        let scale = grad.item().to_f64().unwrap() / self.tau;
        for i in 0..t {
            probs[i * k + i] -= 1.0;
        }
        let candidate = |j: usize, m: usize| -> f64 {
            if j < t {
                positives.data()[j * c + m].to_f64().unwrap()
            } else {
                self.negatives.data()[(j - t) * c + m].to_f64().unwrap()
            }
        };
        let mut ga = vec![T::zero(); t * c];
        let mut gp = vec![T::zero(); t * c];
        for i in 0..t {
            for m in 0..c {
                let s: f64 = (0..k).map(|j| probs[i * k + j] * candidate(j, m)).sum();
                ga[i * c + m] = T::lit(s * scale);
            }
        }
        for j in 0..t {
            for m in 0..c {
                let s: f64 = (0..t).map(|i| probs[i * k + j] * anchors.data()[i * c + m].to_f64().unwrap()).sum();
                gp[j * c + m] = T::lit(s * scale);
            }
        }
        vec![Some(Tensor::new(&[t, c], ga)), Some(Tensor::new(&[t, c], gp))]
    }
}

/// Contrastive loss between original and recovered features, with queue negatives.
pub fn loss_sfcl(original: &FeatureMap, recovered: &FeatureMap, queue: &FeatureQueue, tau: f64) -> Result<f64> {
    if original.timesteps() == 0 {
        return Err(Error::Empty("feature map".into()));
    }
    if original.features.shape() != recovered.features.shape() {
        return Err(Error::Alignment(format!(
            "feature maps differ: {:?} vs {:?}",
            original.features.shape(),
            recovered.features.shape()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if original.channels() != queue.dim() {
        return Err(Error::Dimension(format!("queue holds {}-d features, maps are {}-d", queue.dim(), original.channels())));
    }
    let op = InfoNce { tau, negatives: Arc::new(queue.contents().cast::<f64>()) };
    let (_, loss) = op.softmax_rows(&original.features.cast(), &recovered.features.cast());
    Ok(loss)
}

/// One training sample: consecutive frames and chunks of one clip.
#[derive(Debug, Clone)]
pub struct TrainBatch<T> {
    /// `[n, 3, H, W]`
    pub frames: Tensor<T>,
    /// `[n, chunk_len]`
    pub chunks: Tensor<T>,
    /// `[n, 3, H, W]` restore mask (1 = original pixel).
    pub mask: Tensor<T>,
}

/// Loss nodes of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub total: Var,
    pub wl: Var,
    pub vrl: Var,
    pub arl: Var,
    pub sfcl: Var,
    /// `[n, C]` features of the recovered audio.
    pub recovered_features: Var,
}

/// Builds the weighted training objective for one batch.
pub fn objective_graph<T: Real>(
    g: &mut Graph<T>,
    model: &WatermarkModel<T>,
    maps: &SpectralMaps<T>,
    batch: &TrainBatch<T>,
    negatives: Arc<Tensor<T>>,
    weights: &LossWeights,
    opts: EmbedOptions,
) -> ObjectiveVars {
    let x = g.constant(batch.frames.clone());
    let a = g.constant(batch.chunks.clone());
    let emb = embed_graph(g, model, maps, x, a, opts);
    let rec = masked_recovery(g, model, maps, batch, emb.frames);

    let wl = g.mse(emb.frames, x);
    let vrl = g.mse(rec.frames, x);
    let arl = g.mse(rec.chunks, a);
    let f_org = model.sfe.eval(g, maps, a);
    let f_rec = model.sfe.eval(g, maps, rec.chunks);
    let sfcl = g.custom(Arc::new(InfoNce { tau: weights.tau, negatives }), &[f_org, f_rec]);

    let terms = [
        (wl, weights.lambda_wl),
        (vrl, weights.lambda_vrl),
        (arl, weights.lambda_arl),
        (sfcl, weights.lambda_sfcl),
    ];
    let mut total = g.scale(terms[0].0, T::lit(terms[0].1));
    for &(v, w) in &terms[1..] {
        let s = g.scale(v, T::lit(w));
        total = g.add(total, s);
    }
    ObjectiveVars { total, wl, vrl, arl, sfcl, recovered_features: f_rec }
}

/// Restores the masked pixels of the watermarked frames to the originals and recovers.
fn masked_recovery<T: Real>(
    g: &mut Graph<T>,
    model: &WatermarkModel<T>,
    maps: &SpectralMaps<T>,
    batch: &TrainBatch<T>,
    watermarked: Var,
) -> RecoverVars {
    let keep = g.constant(batch.mask.map(|m| T::one() - m));
    let restored = g.constant(batch.mask.zip_map(&batch.frames, |m, o| m * o));
    let kept = g.mul(keep, watermarked);
    let attacked = g.add(kept, restored);
    recover_graph(g, model, maps, attacked, None)
}

/// Gradients of `root` for every model parameter, in visit order.
pub fn parameter_gradients<T: Real>(g: &Graph<T>, model: &WatermarkModel<T>, root: Var) -> Vec<Option<Tensor<T>>> {
    let mut grads = g.backward(root);
    let mut out = Vec::new();
    model.visit("", &mut |_, p| out.push(g.bound(p).and_then(|v| grads.take(v))));
    out
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Learning rate of the spectral feature extractor; `learning_rate` when absent.
    #[serde(default)]
    pub sfe_learning_rate: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub iterations: usize,
    /// Steps after `iterations` that train only the feature extractor, on
    /// audio recovered once by the then frozen watermarking network.
    #[serde(default)]
    pub extractor_iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Checkpoint period in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Metrics log period in iterations.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            sfe_learning_rate: None,
            beta1: 0.9,
            beta2: 0.5,
            iterations: 10_000,
            extractor_iterations: 0,
            batch_size: 4,
            seed: 0,
            checkpoint_every: 1000,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.sfe_learning_rate.is_some_and(|r| !(r > 0.0)) || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("learning rate, batch size and log period must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.iterations + self.extractor_iterations
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }
}

/// Per-term loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub iteration: usize,
    pub total: f64,
    pub wl: f64,
    pub vrl: f64,
    pub arl: f64,
    pub sfcl: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainingState {
    iteration: usize,
    config: TrainConfig,
    weights: LossWeights,
    mask: MaskSpec,
    queue_capacity: usize,
    #[serde(default)]
    annotations: serde_json::Map<String, serde_json::Value>,
}

/// Model, optimizer and queue state of an ongoing run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: WatermarkModel<f32>,
    pub config: TrainConfig,
    pub weights: LossWeights,
    pub mask: MaskSpec,
    pub queue: FeatureQueue,
    pub optimizer: Adam<f32>,
    pub iteration: usize,
    /// Free-form values saved with the training state, e.g. a calibrated threshold.
    pub annotations: serde_json::Map<String, serde_json::Value>,
    maps: SpectralMaps<f32>,
    /// Per-clip audio recovered from masked frames, for extractor-only steps.
    recovered: Option<Vec<Vec<f32>>>,
}

fn check_dataset(dataset: &[AVStream], model: &WatermarkModel<f32>, batch: usize) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset".into()));
    }
    let c = &model.config;
    for (i, clip) in dataset.iter().enumerate() {
        clip.validate()?;
        if clip.fps != c.fps || clip.sample_rate != c.sample_rate {
            return Err(Error::Alignment(format!("clip {i} is {} fps / {} Hz", clip.fps, clip.sample_rate)));
        }
        if clip.len() < batch {
            return Err(Error::Empty(format!("clip {i} has {} frames, batch needs {batch}", clip.len())));
        }
        let f = &clip.frames[0];
        if f.height() != c.frame_height || f.width() != c.frame_width {
            return Err(Error::Dimension(format!(
                "clip {i} is {}x{}, model expects {}x{}",
                f.height(),
                f.width(),
                c.frame_height,
                c.frame_width
            )));
        }
    }
    Ok(())
}

impl Trainer {
    pub fn new(model: WatermarkModel<f32>, config: TrainConfig, weights: LossWeights, mask: MaskSpec) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        model.config.validate()?;
        mask.validate(model.config.frame_height, model.config.frame_width)?;
        let shapes: Vec<Vec<usize>> = model.named_shapes().into_iter().map(|(_, s)| s).collect();
        let optimizer = Adam::new(config.adam(), &shapes);
        let maps = model.spectral_maps();
        let queue = FeatureQueue::new(crate::sfe_localizer::FEATURE_DIM);
        Ok(Self { model, config, weights, mask, queue, optimizer, iteration: 0, annotations: Default::default(), maps, recovered: None })
    }

    /// RNG for one iteration; independent of how the run was interrupted.
    pub fn step_rng(&self, iteration: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(iteration as u64);
        rng
    }

    /// Draws a clip, a start frame and a mask.
    pub fn sample_batch(&self, dataset: &[AVStream], rng: &mut impl Rng) -> Result<TrainBatch<f32>> {
        let n = self.config.batch_size;
        let clip = &dataset[rng.random_range(0..dataset.len())];
        let start = rng.random_range(0..=clip.len() - n);
        let (h, w) = (self.model.config.frame_height, self.model.config.frame_width);
        let len = clip.chunk_len();
        let mut frames = Vec::with_capacity(n * 3 * h * w);
        let mut mask = Vec::with_capacity(n * 3 * h * w);
        for f in &clip.frames[start..start + n] {
            frames.extend_from_slice(f.pixels());
            let m = gen_mask(&self.mask, h, w, rng)?;
            for _ in 0..3 {
                mask.extend_from_slice(m.data());
            }
        }
        Ok(TrainBatch {
            frames: Tensor::new(&[n, 3, h, w], frames),
            chunks: Tensor::new(&[n, len], clip.audio[start * len..(start + n) * len].to_vec()),
            mask: Tensor::new(&[n, 3, h, w], mask),
        })
    }

    /// One optimization step on a freshly sampled batch.
    pub fn step(&mut self, dataset: &[AVStream]) -> Result<LossBreakdown> {
        if self.iteration == 0 {
            check_dataset(dataset, &self.model, self.config.batch_size)?;
        }
        if self.iteration >= self.config.iterations {
            return self.extractor_step(dataset);
        }
        let mut rng = self.step_rng(self.iteration);
        let batch = self.sample_batch(dataset, &mut rng)?;
        let negatives = Arc::new(self.queue.contents());
        let mut g = Graph::new();
        let vars = objective_graph(&mut g, &self.model, &self.maps, &batch, negatives, &self.weights, EmbedOptions::default());
        let value = |v: Var| g.value(v).item() as f64;
        let losses = LossBreakdown {
            iteration: self.iteration,
            total: value(vars.total),
            wl: value(vars.wl),
            vrl: value(vars.vrl),
            arl: value(vars.arl),
            sfcl: value(vars.sfcl),
        };
        for (name, v) in [("L_WL", losses.wl), ("L_VRL", losses.vrl), ("L_ARL", losses.arl), ("L_SFCL", losses.sfcl)] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("loss term {name} is {v} at iteration {}", self.iteration)));
            }
        }
        let features = g.value(vars.recovered_features).clone();
        let grads = parameter_gradients(&g, &self.model, vars.total);
        drop(g);
        self.apply(&grads);
        self.queue.push(&features);
        self.iteration += 1;
        Ok(losses)
    }

    fn apply(&mut self, grads: &[Option<Tensor<f32>>]) {
        let mut params: Vec<Tensor<f32>> = Vec::new();
        let mut rates = Vec::new();
        let (base, sfe) = (self.config.learning_rate, self.config.sfe_learning_rate.unwrap_or(self.config.learning_rate));
        self.model.visit("", &mut |name, p| {
            params.push(p.as_ref().clone());
            rates.push(if name.starts_with("sfe.") { sfe } else { base });
        });
        {
            let mut refs: Vec<&mut Tensor<f32>> = params.iter_mut().collect();
            let grad_refs: Vec<Option<&Tensor<f32>>> = grads.iter().map(|g| g.as_ref()).collect();
            self.optimizer.update_with_rates(&mut refs, &grad_refs, &rates);
        }
        let mut it = params.into_iter();
        self.model.visit_mut("", &mut |_, p| *p = Arc::new(it.next().expect("same parameter list")));
    }

    /// Audio of every clip recovered from watermarked frames with one mask per
    /// frame, as the watermarking network stands now.
    fn recover_dataset(&self, dataset: &[AVStream]) -> Vec<Vec<f32>> {
        let n = self.config.batch_size;
        let (h, w) = (self.model.config.frame_height, self.model.config.frame_width);
        dataset
            .iter()
            .enumerate()
            .map(|(c, clip)| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                rng.set_stream((1 << 40) + c as u64);
                let len = clip.chunk_len();
                let mut audio = Vec::with_capacity(clip.audio.len());
                for start in (0..clip.len()).step_by(n) {
                    let end = (start + n).min(clip.len());
                    let k = end - start;
                    let mut frames = Vec::with_capacity(k * 3 * h * w);
                    let mut mask = Vec::with_capacity(k * 3 * h * w);
                    for f in &clip.frames[start..end] {
                        frames.extend_from_slice(f.pixels());
                        let m = gen_mask(&self.mask, h, w, &mut rng).expect("mask spec was validated");
                        for _ in 0..3 {
                            mask.extend_from_slice(m.data());
                        }
                    }
                    let batch = TrainBatch {
                        frames: Tensor::new(&[k, 3, h, w], frames),
                        chunks: Tensor::new(&[k, len], clip.audio[start * len..end * len].to_vec()),
                        mask: Tensor::new(&[k, 3, h, w], mask),
                    };
                    let mut g = Graph::no_grad();
                    let x = g.constant(batch.frames.clone());
                    let a = g.constant(batch.chunks.clone());
                    let emb = embed_graph(&mut g, &self.model, &self.maps, x, a, EmbedOptions::default());
                    let rec = masked_recovery(&mut g, &self.model, &self.maps, &batch, emb.frames);
                    audio.extend_from_slice(g.value(rec.chunks).data());
                }
                audio
            })
            .collect()
    }

    /// Contrastive step on the feature extractor alone; the rest of the model is frozen.
    fn extractor_step(&mut self, dataset: &[AVStream]) -> Result<LossBreakdown> {
        if self.iteration == self.config.iterations {
            // Features queued while the watermarking network was still moving are stale.
            self.queue = FeatureQueue::with_capacity(self.queue.dim(), self.queue.capacity());
        }
        if self.recovered.is_none() {
            self.recovered = Some(self.recover_dataset(dataset));
        }
        let recovered = self.recovered.as_ref().expect("filled above");
        let mut rng = self.step_rng(self.iteration);
        let n = self.config.batch_size;
        let c = rng.random_range(0..dataset.len());
        let clip = &dataset[c];
        let start = rng.random_range(0..=clip.len() - n);
        let len = clip.chunk_len();
        let span = start * len..(start + n) * len;
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(&[n, len], clip.audio[span.clone()].to_vec()));
        let r = g.constant(Tensor::new(&[n, len], recovered[c][span].to_vec()));
        let f_org = self.model.sfe.eval(&mut g, &self.maps, a);
        let f_rec = self.model.sfe.eval(&mut g, &self.maps, r);
        let negatives = Arc::new(self.queue.contents());
        let sfcl = g.custom(Arc::new(InfoNce { tau: self.weights.tau, negatives }), &[f_org, f_rec]);
        let value = g.value(sfcl).item() as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss term L_SFCL is {value} at iteration {}", self.iteration)));
        }
        let features = g.value(f_rec).clone();
        let grads = parameter_gradients(&g, &self.model, sfcl);
        drop(g);
        self.apply(&grads);
        self.queue.push(&features);
        let losses = LossBreakdown {
            iteration: self.iteration,
            total: self.weights.lambda_sfcl * value,
            wl: 0.0,
            vrl: 0.0,
            arl: 0.0,
            sfcl: value,
        };
        self.iteration += 1;
        Ok(losses)
    }

    /// Snapshot with optimizer moments, queue and schedule state.
    pub fn checkpoint(&self) -> Checkpoint {
        let state = TrainingState {
            iteration: self.iteration,
            config: self.config,
            weights: self.weights,
            mask: self.mask.clone(),
            queue_capacity: self.queue.capacity(),
            annotations: self.annotations.clone(),
        };
        let mut extra = vec![
            ("adam.step".to_string(), Tensor::new(&[2], split_u64(self.optimizer.step))),
            ("queue".to_string(), self.queue.contents()),
        ];
        for (i, (m, v)) in self.optimizer.first.iter().zip(&self.optimizer.second).enumerate() {
            extra.push((format!("adam.m.{i}"), m.clone()));
            extra.push((format!("adam.v.{i}"), v.clone()));
        }
        Checkpoint {
            model: self.model.clone(),
            training: Some(serde_json::to_value(state).expect("state serializes")),
            extra,
        }
    }

    /// Continues a run saved by [`Trainer::checkpoint`].
    pub fn resume(checkpoint: Checkpoint) -> Result<Self> {
        let state: TrainingState = checkpoint
            .training
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint holds no training state".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::Checkpoint(format!("bad training state: {e}"))))?;
        let mut trainer = Self::new(checkpoint.model, state.config, state.weights, state.mask)?;
        trainer.iteration = state.iteration;
        trainer.annotations = state.annotations;
        trainer.queue = FeatureQueue::with_capacity(trainer.queue.dim(), state.queue_capacity);
        let mut extra: std::collections::HashMap<String, Tensor<f32>> = checkpoint.extra.into_iter().collect();
        let mut take = |name: &str| extra.remove(name).ok_or_else(|| Error::Checkpoint(format!("missing training tensor {name}")));
        trainer.optimizer.step = join_u64(take("adam.step")?.data())?;
        let queue = take("queue")?;
        if queue.len() > 0 {
            trainer.queue.push(&queue);
        }
        for i in 0..trainer.optimizer.first.len() {
            let (m, v) = (take(&format!("adam.m.{i}"))?, take(&format!("adam.v.{i}"))?);
            if m.shape() != trainer.optimizer.first[i].shape() || v.shape() != m.shape() {
                return Err(Error::Checkpoint(format!("optimizer moment {i} has the wrong shape")));
            }
            trainer.optimizer.first[i] = m;
            trainer.optimizer.second[i] = v;
        }
        Ok(trainer)
    }
}

fn split_u64(v: u64) -> Vec<f32> {
    // f32 holds integers exactly up to 2^24.
    vec![(v >> 24) as f32, (v & 0xFF_FFFF) as f32]
}

fn join_u64(d: &[f32]) -> Result<u64> {
    match d {
        [hi, lo] => Ok(((*hi as u64) << 24) | *lo as u64),
        _ => Err(Error::Checkpoint("bad optimizer step counter".into())),
    }
}

/// Where [`train`] writes its outputs.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
}

impl TrainOutput {
    pub fn in_dir(dir: &Path) -> Self {
        Self { checkpoint: dir.join("model.ckpt"), metrics_log: dir.join("metrics.jsonl") }
    }
}

/// Runs `trainer` until `trainer.config.total_iterations()`, appending averaged losses
/// to the metrics log every `log_every` steps and checkpointing periodically.
/// `on_log` may add extra fields (e.g. validation scores) to a log record.
pub fn train(
    trainer: &mut Trainer,
    dataset: &[AVStream],
    output: Option<&TrainOutput>,
    on_log: &mut dyn FnMut(&mut Trainer, &mut serde_json::Map<String, serde_json::Value>) -> Result<()>,
) -> Result<Vec<LossBreakdown>> {
    check_dataset(dataset, &trainer.model, trainer.config.batch_size)?;
    let mut log = match output {
        Some(o) => {
            if let Some(dir) = o.metrics_log.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&o.metrics_log)
                .map_err(|e| Error::io(&o.metrics_log, e))?;
            Some(f)
        }
        None => None,
    };
    let mut history = Vec::new();
    let mut window: Vec<LossBreakdown> = Vec::new();
    while trainer.iteration < trainer.config.total_iterations() {
        let losses = trainer.step(dataset)?;
        history.push(losses);
        window.push(losses);
        let done = trainer.iteration == trainer.config.total_iterations();
        if trainer.iteration % trainer.config.log_every == 0 || done {
            let n = window.len() as f64;
            let avg = |f: fn(&LossBreakdown) -> f64| window.iter().map(f).sum::<f64>() / n;
            let mut record = serde_json::Map::new();
            record.insert("iteration".into(), trainer.iteration.into());
            record.insert("total".into(), avg(|l| l.total).into());
            record.insert("wl".into(), avg(|l| l.wl).into());
            record.insert("vrl".into(), avg(|l| l.vrl).into());
            record.insert("arl".into(), avg(|l| l.arl).into());
            record.insert("sfcl".into(), avg(|l| l.sfcl).into());
            on_log(trainer, &mut record)?;
            if let (Some(f), Some(o)) = (log.as_mut(), output) {
                writeln!(f, "{}", serde_json::Value::Object(record)).map_err(|e| Error::io(&o.metrics_log, e))?;
            }
            window.clear();
        }
        let periodic = trainer.config.checkpoint_every > 0 && trainer.iteration % trainer.config.checkpoint_every == 0;
        if let Some(o) = output {
            if periodic || done {
                trainer.checkpoint().save(&o.checkpoint)?;
            }
        }
    }
    Ok(history)
}
