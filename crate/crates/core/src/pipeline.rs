//! Whole-stream embedding and recovery.
//!
//! Frames are processed in small batches, but every operation on the way is
//! per-sample (convolutions inside one frame, one matrix row per chunk), so
//! the result for frame `i` never depends on any other frame.

use std::sync::Arc;

use avguard_nn::{CustomOp, Graph, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::model::WatermarkModel;
use crate::transforms::{AudioChunk, DoubleHaar, PackingLayout, SpectralMaps, VisualFrame};

/// Frames pushed through the network at once.
pub const BATCH_FRAMES: usize = 8;

/// Audio plus the frames it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct AVStream {
    pub frames: Vec<VisualFrame>,
    pub audio: Vec<f32>,
    pub fps: u32,
    pub sample_rate: u32,
}

impl AVStream {
    pub fn new(frames: Vec<VisualFrame>, audio: Vec<f32>, fps: u32, sample_rate: u32) -> Result<Self> {
        let stream = Self { frames, audio, fps, sample_rate };
        stream.validate()?;
        Ok(stream)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fps == 0 || self.sample_rate == 0 || self.sample_rate % self.fps != 0 {
            return Err(Error::Alignment(format!(
                "sample rate {} is not an integer multiple of {} fps",
                self.sample_rate, self.fps
            )));
        }
        let expected = self.frames.len() * self.chunk_len();
        if self.audio.len() != expected {
            return Err(Error::Alignment(format!(
                "{} frames need {expected} samples, audio has {}",
                self.frames.len(),
                self.audio.len()
            )));
        }
        if let Some(first) = self.frames.first() {
            let (h, w) = (first.height(), first.width());
            if let Some(i) = self.frames.iter().position(|f| f.height() != h || f.width() != w) {
                return Err(Error::Dimension(format!("frame {i} is not {h}x{w}")));
            }
        }
        Ok(())
    }

    pub fn chunk_len(&self) -> usize {
        (self.sample_rate / self.fps) as usize
    }

    pub fn duration(&self) -> f64 {
        self.frames.len() as f64 / self.fps as f64
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// One frame and its audio chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct AVSegment {
    pub frame: VisualFrame,
    pub chunk: AudioChunk,
    pub index: usize,
}

pub fn segment_stream(stream: &AVStream) -> Result<Vec<AVSegment>> {
    stream.validate()?;
    let n = stream.chunk_len();
    Ok(stream
        .frames
        .iter()
        .zip(stream.audio.chunks_exact(n))
        .enumerate()
        .map(|(index, (frame, samples))| AVSegment {
            frame: frame.clone(),
            chunk: AudioChunk::new(samples.to_vec(), stream.sample_rate),
            index,
        })
        .collect())
}

/// Watermarked frames; the audio track is left as it was.
#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkArtifact {
    pub watermarked_frames: Vec<VisualFrame>,
    pub layout: PackingLayout,
    pub model_id: String,
}

/// Audio and frames recovered from watermarked frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    pub audio: Vec<f32>,
    pub frames: Vec<VisualFrame>,
}

/// Post-processing applied to watermarked frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedOptions {
    pub clamp: bool,
    pub quantize: bool,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self { clamp: true, quantize: true }
    }
}

impl EmbedOptions {
    /// No clamping or quantization; embedding is then exactly invertible.
    pub fn exact() -> Self {
        Self { clamp: false, quantize: false }
    }
}

/// Rounds to the nearest multiple of 1/255; the gradient passes straight through.
pub struct Quantize8;

impl<T: Real> CustomOp<T> for Quantize8 {
    fn name(&self) -> &'static str {
        "quantize8"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let levels = T::lit(255.0);
        inputs[0].map(|v| (v * levels).round() / levels)
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.clone())]
    }
}

/// Graph nodes produced by [`embed_graph`].
#[derive(Debug, Clone, Copy)]
pub struct EmbedVars {
    /// `[n, 3, H, W]` watermarked frames.
    pub frames: Var,
    /// `[n, 1, H/4, W/4]` audio-side output of the stack.
    pub audio_latent: Var,
}

/// Graph nodes produced by [`recover_graph`].
#[derive(Debug, Clone, Copy)]
pub struct RecoverVars {
    /// `[n, 3, H, W]`
    pub frames: Var,
    /// `[n, chunk_len]`
    pub chunks: Var,
    /// `[n, 1, H/4, W/4]` latent fed to the inverse stack.
    pub audio_latent: Var,
}

/// `frames: [n, 3, H, W]`, `chunks: [n, chunk_len]`.
pub fn embed_graph<T: Real>(
    g: &mut Graph<T>,
    model: &WatermarkModel<T>,
    maps: &SpectralMaps<T>,
    frames: Var,
    chunks: Var,
    opts: EmbedOptions,
) -> EmbedVars {
    let n = g.shape(frames)[0];
    let subbands = g.custom(DoubleHaar::squeeze(), &[frames]);
    let analysis = g.constant_shared(maps.analysis.clone());
    let plane = g.matmul(chunks, analysis);
    let plane = g.reshape(plane, &[n, 1, maps.plane.0, maps.plane.1]);
    let (visual, audio_latent) = model.stack.forward_graph(g, subbands, plane);
    let mut out = g.custom(DoubleHaar::unsqueeze(), &[visual]);
    if opts.clamp {
        out = g.clamp(out, T::zero(), T::one());
    }
    if opts.quantize {
        out = g.custom(Arc::new(Quantize8), &[out]);
    }
    EmbedVars { frames: out, audio_latent }
}

/// Recovers from `frames: [n, 3, H, W]`; uses the estimator unless a latent is given.
pub fn recover_graph<T: Real>(
    g: &mut Graph<T>,
    model: &WatermarkModel<T>,
    maps: &SpectralMaps<T>,
    frames: Var,
    audio_latent: Option<Var>,
) -> RecoverVars {
    let n = g.shape(frames)[0];
    let subbands = g.custom(DoubleHaar::squeeze(), &[frames]);
    let latent = match audio_latent {
        Some(v) => v,
        None => model.estimator.eval(g, subbands),
    };
    let (visual, plane) = model.stack.inverse_graph(g, subbands, latent);
    let out_frames = g.custom(DoubleHaar::unsqueeze(), &[visual]);
    let flat = g.reshape(plane, &[n, maps.plane.0 * maps.plane.1]);
    let synthesis = g.constant_shared(maps.synthesis.clone());
    let chunks = g.matmul(flat, synthesis);
    RecoverVars { frames: out_frames, chunks, audio_latent: latent }
}

fn check_frames<T: Real>(frames: &[VisualFrame], model: &WatermarkModel<T>) -> Result<()> {
    let (h, w) = (model.config.frame_height, model.config.frame_width);
    match frames.iter().position(|f| f.height() != h || f.width() != w) {
        Some(i) => Err(Error::Dimension(format!(
            "frame {i} is {}x{}, model expects {h}x{w}",
            frames[i].height(),
            frames[i].width()
        ))),
        None => Ok(()),
    }
}

fn check_stream<T: Real>(stream: &AVStream, model: &WatermarkModel<T>) -> Result<()> {
    stream.validate()?;
    model.config.validate()?;
    if stream.fps != model.config.fps || stream.sample_rate != model.config.sample_rate {
        return Err(Error::Alignment(format!(
            "stream is {} fps / {} Hz, model expects {} fps / {} Hz",
            stream.fps, stream.sample_rate, model.config.fps, model.config.sample_rate
        )));
    }
    check_frames(&stream.frames, model)
}

fn frame_batch<T: Real>(frames: &[VisualFrame]) -> Tensor<T> {
    let (h, w) = (frames[0].height(), frames[0].width());
    let mut data = Vec::with_capacity(frames.len() * 3 * h * w);
    for f in frames {
        data.extend(f.pixels().iter().map(|&v| T::lit(v as f64)));
    }
    Tensor::new(&[frames.len(), 3, h, w], data)
}

fn batch_frames<T: Real>(t: &Tensor<T>) -> Result<Vec<VisualFrame>> {
    let n = t.shape()[0];
    (0..n).map(|i| VisualFrame::from_tensor(&t.slice_outer(i, 1))).collect()
}

fn finite<T: Real>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite values in {what}")))
    }
}

/// Embeds with explicit options; also returns the `[n, 1, H/4, W/4]` audio latents.
pub fn embed_with<T: Real>(
    stream: &AVStream,
    model: &WatermarkModel<T>,
    opts: EmbedOptions,
) -> Result<(Vec<VisualFrame>, Tensor<T>)> {
    check_stream(stream, model)?;
    let maps = model.spectral_maps();
    let len = stream.chunk_len();
    let mut frames = Vec::with_capacity(stream.len());
    let mut latents = Vec::with_capacity(stream.len().div_ceil(BATCH_FRAMES));
    for (b, batch) in stream.frames.chunks(BATCH_FRAMES).enumerate() {
        let start = b * BATCH_FRAMES;
        let audio = &stream.audio[start * len..(start + batch.len()) * len];
        let mut g = Graph::no_grad();
        let x = g.constant(frame_batch(batch));
        let a = g.constant(Tensor::new(&[batch.len(), len], audio.iter().map(|&v| T::lit(v as f64)).collect()));
        let out = embed_graph(&mut g, model, &maps, x, a, opts);
        let wm = g.value(out.frames);
        finite(wm, "watermarked frames")?;
        frames.extend(batch_frames(wm)?);
        latents.push(g.value(out.audio_latent).clone());
    }
    let (ph, pw) = model.config.plane();
    let latents = if latents.is_empty() { Tensor::zeros(&[0, 1, ph, pw]) } else { Tensor::stack_outer(&latents.iter().collect::<Vec<_>>()) };
    Ok((frames, latents))
}

/// Clamped, 8-bit quantized watermarking of every frame.
pub fn embed(stream: &AVStream, model: &WatermarkModel<f32>) -> Result<WatermarkArtifact> {
    let (watermarked_frames, _) = embed_with(stream, model, EmbedOptions::default())?;
    Ok(WatermarkArtifact { watermarked_frames, layout: model.layout(), model_id: model.model_id() })
}

fn recover_impl<T: Real>(
    frames: &[VisualFrame],
    model: &WatermarkModel<T>,
    layout: &PackingLayout,
    latents: Option<&Tensor<T>>,
) -> Result<(Vec<f32>, Vec<VisualFrame>)> {
    check_frames(frames, model)?;
    if *layout != model.layout() {
        return Err(Error::LayoutMismatch(format!("{layout:?} does not match the model's {:?}", model.layout())));
    }
    if let Some(l) = latents {
        let (ph, pw) = model.config.plane();
        if l.shape() != [frames.len(), 1, ph, pw] {
            return Err(Error::Dimension(format!("latents {:?} do not match {} frames", l.shape(), frames.len())));
        }
    }
    let maps = model.spectral_maps();
    let mut audio = Vec::with_capacity(frames.len() * maps.chunk_len);
    let mut out = Vec::with_capacity(frames.len());
    for (b, batch) in frames.chunks(BATCH_FRAMES).enumerate() {
        let start = b * BATCH_FRAMES;
        let mut g = Graph::no_grad();
        let x = g.constant(frame_batch(batch));
        let latent = latents.map(|l| g.constant(l.slice_outer(start, batch.len())));
        let rec = recover_graph(&mut g, model, &maps, x, latent);
        let chunks = g.value(rec.chunks);
        finite(chunks, "recovered audio")?;
        audio.extend(chunks.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)));
        out.extend(batch_frames(g.value(rec.frames))?);
    }
    Ok((audio, out))
}

/// Recovers audio and frames using the learned latent estimate.
pub fn recover(frames: &[VisualFrame], model: &WatermarkModel<f32>, layout: &PackingLayout) -> Result<Recovery> {
    let (audio, frames) = recover_impl(frames, model, layout, None)?;
    Ok(Recovery { audio, frames })
}

/// Recovery with the true audio latents in place of the estimate.
pub fn recover_with_latents<T: Real>(
    frames: &[VisualFrame],
    model: &WatermarkModel<T>,
    latents: &Tensor<T>,
) -> Result<Recovery> {
    let (audio, frames) = recover_impl(frames, model, &model.layout(), Some(latents))?;
    Ok(Recovery { audio, frames })
}
