//! Exactly invertible rearrangements between the visual and audio domains.
//!
//! Frames are squeezed into wavelet subbands with two orthonormal Haar
//! levels (`H x W x 3 -> H/4 x W/4 x 48`). Audio chunks are turned into a
//! complex STFT whose real and imaginary parts are packed into a single
//! `H/4 x W/4` plane.
//!
//! Image-like tensors use planar `[channels, height, width]` storage (or
//! `[batch, channels, height, width]`).

use std::f64::consts::PI;
use std::sync::Arc;

use avguard_nn::{CustomOp, Real, Tensor};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Subband channels produced by [`frame_to_subbands`].
pub const SUBBAND_CHANNELS: usize = 48;

/// An RGB frame with values in `[0, 1]`, stored as three planes.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFrame {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl VisualFrame {
    /// `pixels` holds the R, G and B planes back to back.
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height % 4 != 0 || width % 4 != 0 || height == 0 || width == 0 {
            return Err(Error::Dimension(format!("frame {height}x{width} is not a positive multiple of 4")));
        }
        if pixels.len() != 3 * height * width {
            return Err(Error::Dimension(format!(
                "frame {height}x{width}x3 needs {} values, got {}",
                3 * height * width,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite pixel".into()));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; 3 * height * width])
    }

    /// From interleaved 8-bit RGB.
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(Error::Dimension(format!("expected {} rgb bytes, got {}", 3 * height * width, rgb.len())));
        }
        let hw = height * width;
        let mut pixels = vec![0.0; 3 * hw];
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                pixels[c * hw + i] = px[c] as f32 / 255.0;
            }
        }
        Self::new(height, width, pixels)
    }

    /// Interleaved 8-bit RGB, clamping to `[0, 1]` and rounding.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        let mut out = vec![0u8; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                out[3 * i + c] = quantize_u8(self.pixels[c * hw + i]);
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    /// `[3, H, W]` tensor view (copy).
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(&[3, self.height, self.width], self.pixels.clone()).cast()
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        match t.shape() {
            [3, h, w] | [1, 3, h, w] => Self::new(*h, *w, t.cast::<f32>().into_data()),
            s => Err(Error::Dimension(format!("expected a [3, H, W] frame tensor, got {s:?}"))),
        }
    }
}

pub(crate) fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Audio samples for one frame interval.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioChunk {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioChunk {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Two-level wavelet subbands of a frame: `[48, H/4, W/4]`.
///
/// Channel `16 * c + 4 * k1 + k2` holds colour `c`, first-level band `k1` and
/// second-level band `k2`, bands ordered `[LL, LH, HL, HH]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandTensor {
    data: Tensor<f32>,
}

impl SubbandTensor {
    pub fn from_tensor(data: Tensor<f32>) -> Result<Self> {
        match data.shape() {
            [SUBBAND_CHANNELS, _, _] => Ok(Self { data }),
            s => Err(Error::Dimension(format!("subbands must be [48, h, w], got {s:?}"))),
        }
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

fn squeeze_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = match *shape {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::Dimension(format!("expected [c, h, w] or [n, c, h, w], got {shape:?}"))),
    };
    Ok((n, c, h, w))
}

/// One orthonormal 2x2 Haar analysis level per channel: `[c, h, w] -> [4c, h/2, w/2]`.
///
/// Bands per input channel are `[LL, LH, HL, HH]` with
/// `LL = (a + b + c + d) / 2`, `LH = (a + b - c - d) / 2`,
/// `HL = (a - b + c - d) / 2`, `HH = (a - b - c + d) / 2` for the block
/// `[[a, b], [c, d]]`.
pub fn haar_squeeze<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = squeeze_dims(x.shape())?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!("haar squeeze needs even spatial dims, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let half = T::lit(0.5);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for s in 0..n {
        for ch in 0..c {
            let plane = &src[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
            let base = (s * c + ch) * 4 * ho * wo;
            for i in 0..ho {
                for j in 0..wo {
                    let a = plane[2 * i * w + 2 * j];
                    let b = plane[2 * i * w + 2 * j + 1];
                    let cc = plane[(2 * i + 1) * w + 2 * j];
                    let d = plane[(2 * i + 1) * w + 2 * j + 1];
                    let o = i * wo + j;
                    out[base + o] = (a + b + cc + d) * half;
                    out[base + ho * wo + o] = (a + b - cc - d) * half;
                    out[base + 2 * ho * wo + o] = (a - b + cc - d) * half;
                    out[base + 3 * ho * wo + o] = (a - b - cc + d) * half;
                }
            }
        }
    }
    let shape: Vec<usize> =
        if x.shape().len() == 3 { vec![4 * c, ho, wo] } else { vec![n, 4 * c, ho, wo] };
    Ok(Tensor::new(&shape, out))
}

/// Exact inverse of [`haar_squeeze`]: `[4c, h, w] -> [c, 2h, 2w]`.
pub fn haar_unsqueeze<T: Real>(y: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c4, h, w) = squeeze_dims(y.shape())?;
    if c4 % 4 != 0 {
        return Err(Error::Dimension(format!("haar unsqueeze needs channels divisible by 4, got {c4}")));
    }
    let c = c4 / 4;
    let (ho, wo) = (2 * h, 2 * w);
    let half = T::lit(0.5);
    let src = y.data();
    let mut out = vec![T::zero(); src.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * 4 * h * w;
            let plane = &mut out[(s * c + ch) * ho * wo..(s * c + ch + 1) * ho * wo];
            for i in 0..h {
                for j in 0..w {
                    let o = i * w + j;
                    let ll = src[base + o];
                    let lh = src[base + h * w + o];
                    let hl = src[base + 2 * h * w + o];
                    let hh = src[base + 3 * h * w + o];
                    plane[2 * i * wo + 2 * j] = (ll + lh + hl + hh) * half;
                    plane[2 * i * wo + 2 * j + 1] = (ll + lh - hl - hh) * half;
                    plane[(2 * i + 1) * wo + 2 * j] = (ll - lh + hl - hh) * half;
                    plane[(2 * i + 1) * wo + 2 * j + 1] = (ll - lh - hl + hh) * half;
                }
            }
        }
    }
    let shape: Vec<usize> = if y.shape().len() == 3 { vec![c, ho, wo] } else { vec![n, c, ho, wo] };
    Ok(Tensor::new(&shape, out))
}

/// Two Haar levels over every channel (`3 -> 12 -> 48`).
pub fn frame_to_subbands(frame: &VisualFrame) -> Result<SubbandTensor> {
    let t = frame.to_tensor::<f32>();
    SubbandTensor::from_tensor(haar_squeeze(&haar_squeeze(&t)?)?)
}

pub fn subbands_to_frame(subbands: &SubbandTensor) -> Result<VisualFrame> {
    let t = haar_unsqueeze(&haar_unsqueeze(subbands.tensor())?)?;
    VisualFrame::from_tensor(&t)
}

/// Graph op for two-level squeezing of a `[n, c, h, w]` batch. The transform
/// is orthonormal, so its adjoint (used for the gradient) is its inverse.
pub struct DoubleHaar {
    inverse: bool,
}

impl DoubleHaar {
    pub fn squeeze() -> Arc<Self> {
        Arc::new(Self { inverse: false })
    }

    pub fn unsqueeze() -> Arc<Self> {
        Arc::new(Self { inverse: true })
    }

    fn apply<T: Real>(&self, x: &Tensor<T>, inverse: bool) -> Tensor<T> {
        let r = if inverse {
            haar_unsqueeze(x).and_then(|t| haar_unsqueeze(&t))
        } else {
            haar_squeeze(x).and_then(|t| haar_squeeze(&t))
        };
        r.expect("shape validated before building the graph")
    }
}

impl<T: Real> CustomOp<T> for DoubleHaar {
    fn name(&self) -> &str {
        if self.inverse {
            "haar_unsqueeze2"
        } else {
            "haar_squeeze2"
        }
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        self.apply(inputs[0], self.inverse)
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(self.apply(grad, !self.inverse))]
    }
}

/// Order of the two halves of a packed plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RealImagOrder {
    RealThenImag,
}

/// Everything needed to unpack a plane and invert its STFT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackingLayout {
    pub n_fft_bins: usize,
    pub n_time_frames: usize,
    pub real_imag_order: RealImagOrder,
    pub pad_count: usize,
    pub window_size: usize,
    pub hop_length: usize,
}

impl PackingLayout {
    /// Layout for chunks of `chunk_len` samples packed into a `plane_h x plane_w` plane.
    pub fn for_chunk(chunk_len: usize, stft: StftParams, plane_h: usize, plane_w: usize) -> Result<Self> {
        stft.validate()?;
        stft.check_signal(chunk_len)?;
        let bins = stft.bins();
        let frames = stft.frame_count(chunk_len);
        let used = 2 * bins * frames;
        let available = plane_h * plane_w;
        if used > available {
            return Err(Error::Capacity { required: used, available });
        }
        Ok(Self {
            n_fft_bins: bins,
            n_time_frames: frames,
            real_imag_order: RealImagOrder::RealThenImag,
            pad_count: available - used,
            window_size: stft.window_size,
            hop_length: stft.hop_length,
        })
    }

    pub fn used_slots(&self) -> usize {
        2 * self.n_fft_bins * self.n_time_frames
    }

    pub fn plane_slots(&self) -> usize {
        self.used_slots() + self.pad_count
    }

    pub fn stft_params(&self) -> StftParams {
        StftParams { window_size: self.window_size, hop_length: self.hop_length }
    }
}

/// STFT analysis parameters. The window is a periodic Hann window of
/// `window_size` samples, which is also the FFT size; frames are centred
/// using reflection padding of `window_size / 2` samples on each side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftParams {
    pub window_size: usize,
    pub hop_length: usize,
}

impl StftParams {
    pub fn new(window_size: usize, hop_length: usize) -> Self {
        Self { window_size, hop_length }
    }

    pub fn bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    pub fn pad(&self) -> usize {
        self.window_size / 2
    }

    pub fn frame_count(&self, len: usize) -> usize {
        1 + (len + 2 * self.pad() - self.window_size) / self.hop_length
    }

    fn validate(&self) -> Result<()> {
        if self.window_size < 2 || self.hop_length == 0 {
            return Err(Error::InvalidArgument(format!(
                "stft window {} / hop {} must be >= 2 / >= 1",
                self.window_size, self.hop_length
            )));
        }
        Ok(())
    }

    fn check_signal(&self, len: usize) -> Result<()> {
        // reflection padding needs pad < len
        let required = self.hop_length.max(self.pad() + 1);
        if len < required {
            return Err(Error::SignalTooShort { len, required });
        }
        Ok(())
    }

    pub fn window(&self) -> Vec<f64> {
        hann(self.window_size)
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Complex one-sided spectrogram, `bins x frames`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub bins: usize,
    pub frames: usize,
    pub re: Vec<f32>,
    pub im: Vec<f32>,
    pub params: StftParams,
}

impl Spectrogram {
    pub fn zeros(bins: usize, frames: usize, params: StftParams) -> Self {
        Self { bins, frames, re: vec![0.0; bins * frames], im: vec![0.0; bins * frames], params }
    }

    pub fn at(&self, bin: usize, frame: usize) -> Complex<f32> {
        let i = bin * self.frames + frame;
        Complex::new(self.re[i], self.im[i])
    }
}

fn reflect_index(i: isize, len: usize) -> usize {
    let n = len as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Centred STFT of one chunk.
pub fn stft_chunk(chunk: &AudioChunk, params: StftParams) -> Result<Spectrogram> {
    params.validate()?;
    params.check_signal(chunk.len())?;
    let n = params.window_size;
    let bins = params.bins();
    let frames = params.frame_count(chunk.len());
    let pad = params.pad() as isize;
    let window = params.window();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut spec = Spectrogram::zeros(bins, frames, params);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for f in 0..frames {
        let start = (f * params.hop_length) as isize - pad;
        for (k, slot) in buf.iter_mut().enumerate() {
            let idx = reflect_index(start + k as isize, chunk.len());
            *slot = Complex::new(chunk.samples[idx] as f64 * window[k], 0.0);
        }
        fft.process(&mut buf);
        for b in 0..bins {
            spec.re[b * frames + f] = buf[b].re as f32;
            spec.im[b * frames + f] = buf[b].im as f32;
        }
    }
    Ok(spec)
}

/// Weighted overlap-add inverse of [`stft_chunk`].
///
/// Imaginary parts of the DC bin (and of the Nyquist bin for even windows)
/// do not contribute to a real signal and are ignored.
pub fn istft_chunk(spec: &Spectrogram, layout: &PackingLayout, out_length: usize, sample_rate: u32) -> Result<AudioChunk> {
    let params = layout.stft_params();
    params.validate()?;
    if spec.params != params || spec.bins != layout.n_fft_bins || spec.frames != layout.n_time_frames {
        return Err(Error::LayoutMismatch(format!(
            "spectrogram {}x{} (window {}, hop {}) vs layout {}x{} (window {}, hop {})",
            spec.bins,
            spec.frames,
            spec.params.window_size,
            spec.params.hop_length,
            layout.n_fft_bins,
            layout.n_time_frames,
            layout.window_size,
            layout.hop_length
        )));
    }
    if spec.bins != params.bins() {
        return Err(Error::LayoutMismatch(format!("{} bins inconsistent with window {}", spec.bins, params.window_size)));
    }
    let n = params.window_size;
    let pad = params.pad();
    let total = n + params.hop_length * (spec.frames.saturating_sub(1));
    if spec.frames == 0 || pad + out_length > total {
        return Err(Error::LayoutMismatch(format!(
            "{} frames cannot cover {out_length} samples with window {n} and hop {}",
            spec.frames, params.hop_length
        )));
    }
    let window = params.window();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut acc = vec![0.0f64; total];
    let mut norm = vec![0.0f64; total];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for f in 0..spec.frames {
        buf.fill(Complex::new(0.0, 0.0));
        for b in 0..spec.bins {
            let v = spec.at(b, f);
            let v = Complex::new(v.re as f64, v.im as f64);
            buf[b] = v;
            if b > 0 && n - b != b {
                buf[n - b] = v.conj();
            }
        }
        ifft.process(&mut buf);
        let start = f * params.hop_length;
        for k in 0..n {
            acc[start + k] += buf[k].re / n as f64 * window[k];
            norm[start + k] += window[k] * window[k];
        }
    }
    let mut samples = Vec::with_capacity(out_length);
    for i in pad..pad + out_length {
        if norm[i] < 1e-10 {
            return Err(Error::LayoutMismatch(format!(
                "window {n} with hop {} leaves sample {} uncovered",
                params.hop_length,
                i - pad
            )));
        }
        samples.push((acc[i] / norm[i]) as f32);
    }
    Ok(AudioChunk::new(samples, sample_rate))
}

/// A spectrogram packed into one image-shaped plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedAudioPlane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub layout: PackingLayout,
}

impl PackedAudioPlane {
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(&[1, self.height, self.width], self.data.clone()).cast()
    }
}

/// Real parts then imaginary parts, each row-major over `(bin, frame)`,
/// followed by zero padding.
pub fn pack_spectrogram(spec: &Spectrogram, target: (usize, usize)) -> Result<PackedAudioPlane> {
    let (h, w) = target;
    let used = 2 * spec.bins * spec.frames;
    let available = h * w;
    if used > available {
        return Err(Error::Capacity { required: used, available });
    }
    let mut data = Vec::with_capacity(available);
    data.extend_from_slice(&spec.re);
    data.extend_from_slice(&spec.im);
    data.resize(available, 0.0);
    Ok(PackedAudioPlane {
        height: h,
        width: w,
        data,
        layout: PackingLayout {
            n_fft_bins: spec.bins,
            n_time_frames: spec.frames,
            real_imag_order: RealImagOrder::RealThenImag,
            pad_count: available - used,
            window_size: spec.params.window_size,
            hop_length: spec.params.hop_length,
        },
    })
}

pub fn unpack_spectrogram(plane: &PackedAudioPlane) -> Result<Spectrogram> {
    let layout = &plane.layout;
    let slots = plane.height * plane.width;
    if layout.plane_slots() != slots || plane.data.len() != slots {
        return Err(Error::LayoutMismatch(format!(
            "layout describes {} slots ({} used + {} pad) but plane is {}x{} with {} values",
            layout.plane_slots(),
            layout.used_slots(),
            layout.pad_count,
            plane.height,
            plane.width,
            plane.data.len()
        )));
    }
    let half = layout.n_fft_bins * layout.n_time_frames;
    Ok(Spectrogram {
        bins: layout.n_fft_bins,
        frames: layout.n_time_frames,
        re: plane.data[..half].to_vec(),
        im: plane.data[half..2 * half].to_vec(),
        params: layout.stft_params(),
    })
}

/// The chunk -> plane and plane -> chunk maps as dense matrices, so the
/// audio path can run inside an autodiff graph.
///
/// Both maps are linear; rows are obtained by pushing basis vectors through
/// [`stft_chunk`]/[`pack_spectrogram`] and
/// [`unpack_spectrogram`]/[`istft_chunk`].
#[derive(Debug, Clone)]
pub struct SpectralMaps<T> {
    /// `[chunk_len, plane_slots]`
    pub analysis: Arc<Tensor<T>>,
    /// `[plane_slots, chunk_len]`
    pub synthesis: Arc<Tensor<T>>,
    pub layout: PackingLayout,
    pub chunk_len: usize,
    pub plane: (usize, usize),
}

impl<T: Real> SpectralMaps<T> {
    pub fn new(chunk_len: usize, layout: PackingLayout, plane: (usize, usize)) -> Result<Self> {
        let slots = plane.0 * plane.1;
        if layout.plane_slots() != slots {
            return Err(Error::LayoutMismatch(format!(
                "layout has {} slots, plane {}x{} has {slots}",
                layout.plane_slots(),
                plane.0,
                plane.1
            )));
        }
        let params = layout.stft_params();
        let mut analysis = vec![T::zero(); chunk_len * slots];
        for i in 0..chunk_len {
            let mut e = vec![0.0f32; chunk_len];
            e[i] = 1.0;
            let spec = stft_chunk(&AudioChunk::new(e, 0), params)?;
            let packed = pack_spectrogram(&spec, plane)?;
            if packed.layout != layout {
                return Err(Error::LayoutMismatch("chunk length does not produce the given layout".into()));
            }
            for (j, &v) in packed.data.iter().enumerate() {
                analysis[i * slots + j] = T::lit(v as f64);
            }
        }
        let mut synthesis = vec![T::zero(); slots * chunk_len];
        for j in 0..layout.used_slots() {
            let mut data = vec![0.0f32; slots];
            data[j] = 1.0;
            let plane = PackedAudioPlane { height: plane.0, width: plane.1, data, layout };
            let chunk = istft_chunk(&unpack_spectrogram(&plane)?, &layout, chunk_len, 0)?;
            for (i, &v) in chunk.samples.iter().enumerate() {
                synthesis[j * chunk_len + i] = T::lit(v as f64);
            }
        }
        Ok(Self {
            analysis: Arc::new(Tensor::new(&[chunk_len, slots], analysis)),
            synthesis: Arc::new(Tensor::new(&[slots, chunk_len], synthesis)),
            layout,
            chunk_len,
            plane,
        })
    }

    /// `[n, chunk_len] -> [n, 1, ph, pw]`
    pub fn analyze(&self, chunks: &Tensor<T>) -> Tensor<T> {
        let (n, len) = chunks.dims2();
        assert_eq!(len, self.chunk_len);
        let slots = self.plane.0 * self.plane.1;
        let mut out = Tensor::zeros(&[n, slots]);
        avguard_nn::gemm(n, len, slots, T::one(), chunks.data(), false, self.analysis.data(), false, T::zero(), out.data_mut());
        out.reshape(&[n, 1, self.plane.0, self.plane.1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Dense matrix of one Haar level on a single `h x w` plane, built from
    /// the analysis formulas: row `k * (h/2 * w/2) + p` is band `k` at block `p`.
    fn haar_matrix(h: usize, w: usize) -> Vec<Vec<f64>> {
        let signs = [[1.0, 1.0, 1.0, 1.0], [1.0, 1.0, -1.0, -1.0], [1.0, -1.0, 1.0, -1.0], [1.0, -1.0, -1.0, 1.0]];
        let (ho, wo) = (h / 2, w / 2);
        let mut m = vec![vec![0.0; h * w]; h * w];
        for (k, s) in signs.iter().enumerate() {
            for i in 0..ho {
                for j in 0..wo {
                    let row = k * ho * wo + i * wo + j;
                    let taps = [(2 * i, 2 * j), (2 * i, 2 * j + 1), (2 * i + 1, 2 * j), (2 * i + 1, 2 * j + 1)];
                    for (t, &(y, x)) in taps.iter().enumerate() {
                        m[row][y * w + x] = 0.5 * s[t];
                    }
                }
            }
        }
        m
    }

    fn apply(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
        m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    }

    #[test]
    fn constant_block_squeezes_to_ll() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0f64; 4]);
        let y = haar_squeeze(&x).unwrap();
        assert_eq!(y.shape(), &[4, 1, 1]);
        assert_eq!(y.data(), &[2.0, 0.0, 0.0, 0.0]);
        let back = haar_unsqueeze(&y).unwrap();
        assert_eq!(back.data(), &[1.0; 4]);
    }

    #[test]
    fn zeros_stay_zero() {
        let y = haar_squeeze(&Tensor::<f32>::zeros(&[3, 4, 4])).unwrap();
        assert_eq!(y.shape(), &[12, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn squeeze_matches_matrix_oracle() {
        let x = random_tensor(&[1, 4, 4], 3);
        let m = haar_matrix(4, 4);
        let want = apply(&m, x.data());
        let got = haar_squeeze(&x).unwrap();
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        // inverse is the transpose
        let mt: Vec<Vec<f64>> = (0..16).map(|c| (0..16).map(|r| m[r][c]).collect()).collect();
        let back = apply(&mt, got.data());
        let unsq = haar_unsqueeze(&got).unwrap();
        for ((a, b), c) in unsq.data().iter().zip(&back).zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_or_indivisible_dims_are_rejected() {
        assert!(matches!(haar_squeeze(&Tensor::<f32>::zeros(&[1, 3, 4])), Err(Error::Dimension(_))));
        assert!(matches!(haar_unsqueeze(&Tensor::<f32>::zeros(&[6, 2, 2])), Err(Error::Dimension(_))));
        assert!(VisualFrame::filled(6, 8, 0.0).is_err());
    }

    #[test]
    fn constant_frame_has_only_lowpass_energy() {
        let f = VisualFrame::filled(8, 8, 0.5).unwrap();
        let s = frame_to_subbands(&f).unwrap();
        assert_eq!(s.tensor().shape(), &[48, 2, 2]);
        for ch in 0..48 {
            let plane = &s.tensor().data()[ch * 4..(ch + 1) * 4];
            // two orthonormal levels scale a constant by 2 * 2
            let want = if ch % 16 == 0 { 2.0 } else { 0.0 };
            assert!(plane.iter().all(|&v| (v - want).abs() < 1e-6), "channel {ch}: {plane:?}");
        }
    }

    #[test]
    fn two_levels_match_composed_oracle() {
        let x = random_tensor(&[3, 8, 8], 9);
        let m1 = haar_matrix(8, 8);
        let m2 = haar_matrix(4, 4);
        let mut want = Vec::new();
        for c in 0..3 {
            let level1 = apply(&m1, &x.data()[c * 64..(c + 1) * 64]);
            for band in 0..4 {
                want.extend(apply(&m2, &level1[band * 16..(band + 1) * 16]));
            }
        }
        let got = haar_squeeze(&haar_squeeze(&x).unwrap()).unwrap();
        assert_eq!(got.shape(), &[48, 2, 2]);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pixels = (0..3 * 16 * 12).map(|_| rng.random::<f32>()).collect();
        let f = VisualFrame::new(16, 12, pixels).unwrap();
        let back = subbands_to_frame(&frame_to_subbands(&f).unwrap()).unwrap();
        for (a, b) in back.pixels().iter().zip(f.pixels()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn rgb8_round_trip() {
        let rgb: Vec<u8> = (0..4 * 4 * 3).map(|i| (i * 5) as u8).collect();
        let f = VisualFrame::from_rgb8(4, 4, &rgb).unwrap();
        assert_eq!(f.to_rgb8(), rgb);
    }

    fn direct_dft_bin(frame: &[f64], bin: usize) -> Complex<f64> {
        let n = frame.len();
        frame.iter().enumerate().fold(Complex::new(0.0, 0.0), |acc, (t, &v)| {
            let ang = -2.0 * PI * (bin * t) as f64 / n as f64;
            acc + Complex::new(v * ang.cos(), v * ang.sin())
        })
    }

    #[test]
    fn stft_of_silence_is_silent() {
        let spec = stft_chunk(&AudioChunk::new(vec![0.0; 640], 16000), StftParams::new(510, 128)).unwrap();
        assert_eq!(spec.bins, 256);
        assert!(spec.re.iter().chain(&spec.im).all(|&v| v == 0.0));
    }

    #[test]
    fn frame_count_matches_enumeration() {
        let params = StftParams::new(510, 128);
        // enumerate window starts inside the reflection-padded signal
        let padded = 640 + 2 * 255;
        let starts = (0..).map(|f| f * 128).take_while(|s| s + 510 <= padded).count();
        assert_eq!(starts, 6);
        let spec = stft_chunk(&AudioChunk::new(vec![0.1; 640], 16000), params).unwrap();
        assert_eq!(spec.frames, starts);
    }

    #[test]
    fn bin_centred_tone_concentrates_energy() {
        let params = StftParams::new(510, 128);
        let bin = 40;
        let samples: Vec<f32> =
            (0..640).map(|t| (2.0 * PI * bin as f64 * t as f64 / 510.0).sin() as f32 * 0.5).collect();
        let spec = stft_chunk(&AudioChunk::new(samples.clone(), 16000), params).unwrap();
        let window = params.window();
        // frames whose window lies entirely inside the chunk; edge frames see
        // reflected samples
        let interior = (0..spec.frames).filter(|f| f * 128 >= 255 && f * 128 + 255 <= 640);
        for f in interior {
            let total: f64 = (0..spec.bins).map(|b| spec.at(b, f).norm_sqr() as f64).sum();
            let near: f64 = (bin - 1..=bin + 1).map(|b| spec.at(b, f).norm_sqr() as f64).sum();
            assert!(near / total >= 0.95, "frame {f}: {}", near / total);
        }
        // interior frame 2 agrees with a direct DFT of the windowed samples
        let start = 2 * 128 - 255;
        let frame: Vec<f64> = (0..510).map(|k| samples[start + k] as f64 * window[k]).collect();
        for b in [0, bin, 100] {
            let d = direct_dft_bin(&frame, b);
            let s = spec.at(b, 2);
            assert!((d.re - s.re as f64).abs() < 1e-3 && (d.im - s.im as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn short_chunks_are_rejected() {
        let err = stft_chunk(&AudioChunk::new(vec![0.0; 100], 16000), StftParams::new(510, 128));
        assert!(matches!(err, Err(Error::SignalTooShort { .. })));
    }

    fn snr_db(a: &[f32], b: &[f32]) -> f64 {
        let s: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum();
        let n: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
        10.0 * (s / n).log10()
    }

    #[test]
    fn istft_inverts_stft() {
        let params = StftParams::new(510, 128);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<f32> = (0..640).map(|_| rng.random_range(-0.5..0.5)).collect();
        let chunk = AudioChunk::new(samples.clone(), 16000);
        let spec = stft_chunk(&chunk, params).unwrap();
        let layout = PackingLayout::for_chunk(640, params, 64, 64).unwrap();
        let back = istft_chunk(&spec, &layout, 640, 16000).unwrap();
        let err = back.samples.iter().zip(&samples).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-5, "max error {err}");

        // chirp
        let chirp: Vec<f32> = (0..640)
            .map(|t| {
                let t = t as f64 / 16000.0;
                (0.4 * (2.0 * PI * (200.0 * t + 40000.0 * t * t)).sin()) as f32
            })
            .collect();
        let spec = stft_chunk(&AudioChunk::new(chirp.clone(), 16000), params).unwrap();
        let back = istft_chunk(&spec, &layout, 640, 16000).unwrap();
        assert!(snr_db(&chirp, &back.samples) >= 60.0);

        let zero = istft_chunk(&Spectrogram::zeros(256, 6, params), &layout, 640, 16000).unwrap();
        assert!(zero.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn istft_rejects_inconsistent_layout() {
        let params = StftParams::new(510, 128);
        let layout = PackingLayout::for_chunk(640, params, 64, 64).unwrap();
        let spec = Spectrogram::zeros(256, 5, params);
        assert!(matches!(istft_chunk(&spec, &layout, 640, 16000), Err(Error::LayoutMismatch(_))));
    }

    #[test]
    fn packing_paper_defaults() {
        let params = StftParams::new(510, 128);
        let spec = stft_chunk(&AudioChunk::new(vec![0.0; 640], 16000), params).unwrap();
        let plane = pack_spectrogram(&spec, (64, 64)).unwrap();
        assert_eq!(plane.layout.used_slots(), 3072);
        assert_eq!(plane.layout.pad_count, 1024);
        assert!(plane.data.iter().all(|&v| v == 0.0));
        let err = pack_spectrogram(&spec, (32, 32)).unwrap_err();
        assert!(matches!(err, Error::Capacity { required: 3072, available: 1024 }));
    }

    #[test]
    fn hand_packed_toy_layout() {
        let params = StftParams::new(2, 1);
        let spec = Spectrogram { bins: 2, frames: 1, re: vec![1.0, 2.0], im: vec![3.0, 4.0], params };
        let plane = pack_spectrogram(&spec, (2, 3)).unwrap();
        assert_eq!(plane.data, vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
        assert_eq!(plane.layout.pad_count, 2);
        assert_eq!(unpack_spectrogram(&plane).unwrap(), spec);
        let zero = PackedAudioPlane { data: vec![0.0; 6], ..plane.clone() };
        let unpacked = unpack_spectrogram(&zero).unwrap();
        assert!(unpacked.re.iter().chain(&unpacked.im).all(|&v| v == 0.0));
        let bad = PackedAudioPlane { height: 3, width: 3, data: vec![0.0; 9], ..plane };
        assert!(matches!(unpack_spectrogram(&bad), Err(Error::LayoutMismatch(_))));
    }

    #[test]
    fn spectral_maps_agree_with_direct_path() {
        let params = StftParams::new(126, 64);
        let layout = PackingLayout::for_chunk(320, params, 32, 32).unwrap();
        assert_eq!(layout.used_slots(), 768);
        let maps = SpectralMaps::<f64>::new(320, layout, (32, 32)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<f32> = (0..320).map(|_| rng.random_range(-0.5..0.5)).collect();
        let direct = pack_spectrogram(&stft_chunk(&AudioChunk::new(samples.clone(), 8000), params).unwrap(), (32, 32))
            .unwrap();
        let x = Tensor::new(&[1, 320], samples.iter().map(|&v| v as f64).collect());
        let via = maps.analyze(&x);
        for (a, b) in via.data().iter().zip(&direct.data) {
            assert!((a - *b as f64).abs() < 1e-4);
        }
        // synthesis(analysis(x)) = x
        let mut back = vec![0.0; 320];
        avguard_nn::gemm(1, 1024, 320, 1.0, via.data(), false, maps.synthesis.data(), false, 0.0, &mut back);
        for (a, b) in back.iter().zip(&samples) {
            assert!((a - *b as f64).abs() < 1e-5);
        }
    }
}
