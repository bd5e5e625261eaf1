//! Simulated attacks with exact ground truth: audio swapping, synthetic
//! audio substitution and region corruption of frames.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::AVStream;
use crate::sfe_localizer::TamperInterval;
use crate::training::{centered_box, RegionBox};
use crate::transforms::VisualFrame;

pub const MIN_FRACTION: f64 = 0.10;
pub const MAX_FRACTION: f64 = 0.30;
pub const CROSSFADE_SECONDS: f64 = 0.005;
pub const REGION_NOISE_SIGMA: f32 = 0.05;
pub const TONE_HZ: f64 = 440.0;
/// Piece length for the shuffled-speech generator.
const SHUFFLE_PIECE_SECONDS: f64 = 0.02;
const BLUR_RADIUS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AudioTamper {
    None,
    Swap,
    Substitute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Noise,
    Tone,
    ShuffledSpeech,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualTamper {
    None,
    RegionReplace,
    RegionNoise,
}

/// Which frames a visual attack touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameScope {
    /// Every frame, like a lip-sync pass over the whole video.
    All,
    /// Only frames overlapping a tampered audio interval.
    Tampered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TamperPlan {
    pub audio_mode: AudioTamper,
    pub fraction: f64,
    pub generator: Generator,
    pub visual_mode: VisualTamper,
    pub frame_scope: FrameScope,
    /// `(x, y, w, h)`; the centred half-size box when absent.
    pub region: Option<RegionBox>,
    pub seed: u64,
}

impl Default for TamperPlan {
    fn default() -> Self {
        Self {
            audio_mode: AudioTamper::Swap,
            fraction: 0.2,
            generator: Generator::Noise,
            visual_mode: VisualTamper::RegionReplace,
            frame_scope: FrameScope::All,
            region: None,
            seed: 0,
        }
    }
}

impl TamperPlan {
    pub fn untouched() -> Self {
        Self { audio_mode: AudioTamper::None, visual_mode: VisualTamper::None, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.audio_mode != AudioTamper::None {
            check_fraction(self.fraction)?;
        }
        Ok(())
    }
}

/// What an attack changed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub tampered_intervals: Vec<TamperInterval>,
    pub tampered_frame_indices: Vec<usize>,
}

impl GroundTruth {
    /// Per-frame labels: a frame counts as tampered when at least half of
    /// its audio chunk lies inside a tampered interval.
    pub fn frame_labels(&self, frames: usize, fps: u32) -> Vec<bool> {
        let dt = 1.0 / fps as f64;
        (0..frames)
            .map(|i| {
                let (a, b) = (i as f64 * dt, (i + 1) as f64 * dt);
                let covered: f64 = self
                    .tampered_intervals
                    .iter()
                    .map(|iv| (iv.t_end.min(b) - iv.t_start.max(a)).max(0.0))
                    .sum();
                covered >= 0.5 * dt - 1e-9
            })
            .collect()
    }
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(MIN_FRACTION - 1e-12..=MAX_FRACTION + 1e-12).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "tamper fraction {fraction} outside [{MIN_FRACTION}, {MAX_FRACTION}]"
        )));
    }
    Ok(())
}

/// `(start, len)` of one contiguous interval covering `fraction` of `n` samples.
fn pick_interval(n: usize, fraction: f64, rng: &mut impl Rng) -> Result<(usize, usize)> {
    check_fraction(fraction)?;
    let len = (fraction * n as f64).round() as usize;
    if len == 0 {
        return Err(Error::SignalTooShort { len: n, required: (1.0 / fraction).ceil() as usize });
    }
    Ok((rng.random_range(0..=n - len), len))
}

/// Writes `replacement` over `audio[start..]`, fading in and out over
/// `fade` samples inside the interval so only `[start, start + len)` changes.
fn splice(audio: &mut [f32], start: usize, replacement: &[f32], fade: usize) {
    let len = replacement.len();
    let fade = fade.min(len / 2);
    for (k, &r) in replacement.iter().enumerate() {
        let edge = k.min(len - 1 - k);
        audio[start + k] = if edge < fade {
            let w = (edge + 1) as f32 / (fade + 1) as f32;
            let o = audio[start + k];
            o + w * (r - o)
        } else {
            r
        };
    }
}

fn crossfade_len(sample_rate: u32) -> usize {
    (CROSSFADE_SECONDS * sample_rate as f64).round() as usize
}

fn interval(stream: &AVStream, start: usize, len: usize) -> TamperInterval {
    let sr = stream.sample_rate as f64;
    TamperInterval { t_start: start as f64 / sr, t_end: (start + len) as f64 / sr }
}

fn frames_in(stream: &AVStream, start: usize, len: usize) -> Vec<usize> {
    let n = stream.chunk_len();
    (start / n..(start + len).div_ceil(n)).collect()
}

/// Replaces one contiguous `fraction` of the audio with a segment of `donor`.
/// With `donor = None` the segment comes from a non-overlapping part of the
/// stream itself (same speaker, different words).
pub fn swap_audio(stream: &AVStream, fraction: f64, donor: Option<&[f32]>, rng: &mut impl Rng) -> Result<(AVStream, GroundTruth)> {
    stream.validate()?;
    let n = stream.audio.len();
    let (start, len) = pick_interval(n, fraction, rng)?;
    let segment = match donor {
        Some(d) => {
            if d.len() < len {
                return Err(Error::SignalTooShort { len: d.len(), required: len });
            }
            let from = rng.random_range(0..=d.len() - len);
            d[from..from + len].to_vec()
        }
        None => {
            let offsets: Vec<usize> = (0..=n - len).filter(|&o| o + len <= start || o >= start + len).collect();
            let Some(&from) = offsets.get(rng.random_range(0..offsets.len().max(1))) else {
                return Err(Error::SignalTooShort { len: n, required: 2 * len });
            };
            stream.audio[from..from + len].to_vec()
        }
    };
    let mut out = stream.clone();
    splice(&mut out.audio, start, &segment, crossfade_len(stream.sample_rate));
    let truth = GroundTruth { tampered_intervals: vec![interval(stream, start, len)], tampered_frame_indices: frames_in(stream, start, len) };
    Ok((out, truth))
}

fn rms(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Replaces one contiguous `fraction` with a synthetic signal of the same RMS.
pub fn substitute_audio(stream: &AVStream, fraction: f64, generator: Generator, rng: &mut impl Rng) -> Result<(AVStream, GroundTruth)> {
    stream.validate()?;
    let (start, len) = pick_interval(stream.audio.len(), fraction, rng)?;
    let original = &stream.audio[start..start + len];
    let sr = stream.sample_rate as f64;
    let mut signal: Vec<f32> = match generator {
        Generator::Noise => {
            let normal = Normal::new(0.0f32, 1.0).expect("valid sigma");
            (0..len).map(|_| normal.sample(rng)).collect()
        }
        Generator::Tone => (0..len).map(|k| (2.0 * std::f64::consts::PI * TONE_HZ * k as f64 / sr).sin() as f32).collect(),
        Generator::ShuffledSpeech => {
            let piece = ((SHUFFLE_PIECE_SECONDS * sr).round() as usize).max(1);
            let mut pieces: Vec<&[f32]> = original.chunks(piece).collect();
            pieces.shuffle(rng);
            pieces.concat()
        }
    };
    let gain = rms(original) / rms(&signal).max(1e-12);
    signal.iter_mut().for_each(|v| *v = (*v as f64 * gain) as f32);
    let mut out = stream.clone();
    splice(&mut out.audio, start, &signal, crossfade_len(stream.sample_rate));
    let truth = GroundTruth { tampered_intervals: vec![interval(stream, start, len)], tampered_frame_indices: frames_in(stream, start, len) };
    Ok((out, truth))
}

fn box_blur(frame: &VisualFrame, (x0, y0, bw, bh): RegionBox) -> Vec<f32> {
    let (h, w) = (frame.height(), frame.width());
    let p = frame.pixels();
    let mut out = Vec::with_capacity(3 * bw * bh);
    for c in 0..3 {
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                let (ya, yb) = (y.saturating_sub(BLUR_RADIUS), (y + BLUR_RADIUS).min(h - 1));
                let (xa, xb) = (x.saturating_sub(BLUR_RADIUS), (x + BLUR_RADIUS).min(w - 1));
                let mut s = 0.0;
                for yy in ya..=yb {
                    for xx in xa..=xb {
                        s += p[c * h * w + yy * w + xx];
                    }
                }
                out.push(s / ((yb - ya + 1) * (xb - xa + 1)) as f32);
            }
        }
    }
    out
}

/// Corrupts the `region` box of the listed frames. `originals` supplies the
/// content for region replacement; without it the box is blurred instead.
pub fn tamper_frames(
    frames: &[VisualFrame],
    indices: &[usize],
    mode: VisualTamper,
    region: RegionBox,
    originals: Option<&[VisualFrame]>,
    rng: &mut impl Rng,
) -> Result<Vec<VisualFrame>> {
    if let Some(&i) = indices.iter().find(|&&i| i >= frames.len()) {
        return Err(Error::InvalidArgument(format!("frame index {i} out of range for {} frames", frames.len())));
    }
    if let Some(o) = originals {
        if o.len() != frames.len() {
            return Err(Error::Alignment(format!("{} originals for {} frames", o.len(), frames.len())));
        }
    }
    let mut out = frames.to_vec();
    if mode == VisualTamper::None {
        return Ok(out);
    }
    let normal = Normal::new(0.0f32, REGION_NOISE_SIGMA).expect("valid sigma");
    for &i in indices {
        let frame = &mut out[i];
        let (h, w) = (frame.height(), frame.width());
        let (x0, y0, bw, bh) = region;
        if bw == 0 || bh == 0 || x0 + bw > w || y0 + bh > h {
            return Err(Error::InvalidArgument(format!("region {region:?} outside {h}x{w} frame")));
        }
        let blurred = match (mode, originals) {
            (VisualTamper::RegionReplace, None) => Some(box_blur(&frames[i], region)),
            _ => None,
        };
        let mut k = 0;
        let pixels = frame.pixels_mut();
        for c in 0..3 {
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    let idx = c * h * w + y * w + x;
                    pixels[idx] = match (mode, originals, &blurred) {
                        (VisualTamper::RegionNoise, _, _) => (pixels[idx] + normal.sample(rng)).clamp(0.0, 1.0),
                        (_, Some(o), _) => o[i].pixels()[idx],
                        (_, None, Some(b)) => b[k],
                        _ => unreachable!(),
                    };
                    k += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Applies a whole plan with its own seeded generator.
pub fn simulate(
    stream: &AVStream,
    plan: &TamperPlan,
    originals: Option<&[VisualFrame]>,
    donor: Option<&[f32]>,
) -> Result<(AVStream, GroundTruth)> {
    plan.validate()?;
    stream.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let (mut out, mut truth) = match plan.audio_mode {
        AudioTamper::None => (stream.clone(), GroundTruth::default()),
        AudioTamper::Swap => swap_audio(stream, plan.fraction, donor, &mut rng)?,
        AudioTamper::Substitute => substitute_audio(stream, plan.fraction, plan.generator, &mut rng)?,
    };
    if plan.visual_mode != VisualTamper::None && !stream.is_empty() {
        let f = &stream.frames[0];
        let region = plan.region.unwrap_or_else(|| centered_box(f.height(), f.width()));
        let indices: Vec<usize> = match plan.frame_scope {
            FrameScope::All => (0..stream.len()).collect(),
            FrameScope::Tampered => truth.tampered_frame_indices.clone(),
        };
        out.frames = tamper_frames(&out.frames, &indices, plan.visual_mode, region, originals, &mut rng)?;
        let mut all = truth.tampered_frame_indices.clone();
        all.extend(indices);
        all.sort_unstable();
        all.dedup();
        truth.tampered_frame_indices = all;
    }
    Ok((out, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(seconds: usize, seed: u64) -> AVStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..25 * seconds)
            .map(|_| VisualFrame::new(16, 16, (0..768).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
            .collect();
        let audio = (0..25 * seconds * 320).map(|i| 0.3 * (i as f32 * 0.013).sin() + rng.random_range(-0.1..0.1)).collect();
        AVStream::new(frames, audio, 25, 8000).unwrap()
    }

    fn changed_range(a: &[f32], b: &[f32]) -> Option<(usize, usize)> {
        let first = a.iter().zip(b).position(|(x, y)| x != y)?;
        let last = a.iter().zip(b).rposition(|(x, y)| x != y)?;
        Some((first, last + 1))
    }

    #[test]
    fn swap_interval_matches_the_diff() {
        let s = stream(5, 1);
        let donor: Vec<f32> = (0..40_000).map(|i| (i as f32 * 0.07).cos() * 0.2).collect();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (t, truth) = swap_audio(&s, 0.2, Some(&donor), &mut rng).unwrap();
            let iv = truth.tampered_intervals[0];
            assert!((iv.duration() - 1.0).abs() < 1e-9);
            let (a, b) = changed_range(&s.audio, &t.audio).unwrap();
            assert_eq!(a as f64 / 8000.0, iv.t_start);
            assert_eq!(b as f64 / 8000.0, iv.t_end);
            let fade = crossfade_len(8000);
            assert_eq!(fade, 40);
            assert_eq!(&t.audio[..a], &s.audio[..a]);
            assert_eq!(&t.audio[b..], &s.audio[b..]);
        }
        assert!(swap_audio(&s, 0.2, Some(&donor[..100]), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn self_swap_uses_a_disjoint_donor_segment() {
        let s = stream(5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, truth) = swap_audio(&s, 0.3, None, &mut rng).unwrap();
        let iv = truth.tampered_intervals[0];
        let (a, b) = ((iv.t_start * 8000.0).round() as usize, (iv.t_end * 8000.0).round() as usize);
        let inner = &t.audio[a + 40..b - 40];
        let found = (0..=s.audio.len() - inner.len()).find(|&o| s.audio[o..o + inner.len()] == *inner).unwrap();
        let from = found - 40;
        assert!(from + (b - a) <= a || from >= b, "donor {from} overlaps [{a}, {b})");
    }

    #[test]
    fn fraction_bounds() {
        let s = stream(5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(swap_audio(&s, 0.10, None, &mut rng).is_ok());
        assert!(swap_audio(&s, 0.30, None, &mut rng).is_ok());
        assert!(matches!(swap_audio(&s, 0.05, None, &mut rng), Err(Error::InvalidArgument(_))));
        assert!(substitute_audio(&s, 0.31, Generator::Tone, &mut rng).is_err());
    }

    #[test]
    fn substitution_is_rms_matched() {
        let s = stream(5, 4);
        for generator in [Generator::Noise, Generator::Tone, Generator::ShuffledSpeech] {
            let (t, truth) = substitute_audio(&s, 0.1, generator, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
            let iv = truth.tampered_intervals[0];
            assert!((iv.duration() - 0.5).abs() < 1e-9);
            let (a, b) = changed_range(&s.audio, &t.audio).unwrap();
            assert_eq!((a as f64 / 8000.0, b as f64 / 8000.0), (iv.t_start, iv.t_end));
            let ratio = rms(&t.audio[a..b]) / rms(&s.audio[a..b]);
            assert!((ratio - 1.0).abs() <= 0.1, "{generator:?}: {ratio}");
        }
        let (t, truth) = substitute_audio(&s, 0.1, Generator::Tone, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let a = (truth.tampered_intervals[0].t_start * 8000.0).round() as usize;
        // A 440 Hz tone repeats every 8000/440 samples; check the zero crossing rate.
        let mid = &t.audio[a + 100..a + 3100];
        let crossings = mid.windows(2).filter(|w| (w[0] < 0.0) != (w[1] < 0.0)).count();
        assert!((crossings as f64 - 2.0 * 440.0 * 3000.0 / 8000.0).abs() <= 2.0);
    }

    #[test]
    fn frame_corruption() {
        let s = stream(1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let same = tamper_frames(&s.frames, &[], VisualTamper::RegionNoise, (0, 0, 8, 8), None, &mut rng).unwrap();
        assert_eq!(same, s.frames);
        let big: Vec<VisualFrame> = (0..2).map(|_| VisualFrame::filled(128, 128, 0.5).unwrap()).collect();
        let noisy = tamper_frames(&big, &[1], VisualTamper::RegionNoise, (32, 32, 64, 64), None, &mut rng).unwrap();
        assert_eq!(noisy[0], big[0]);
        for c in 0..3 {
            for y in 0..128 {
                for x in 0..128 {
                    let i = c * 128 * 128 + y * 128 + x;
                    let inside = (32..96).contains(&x) && (32..96).contains(&y);
                    assert_eq!(noisy[1].pixels()[i] != 0.5, inside, "({c}, {y}, {x})");
                }
            }
        }
        let originals: Vec<VisualFrame> = (0..25).map(|_| VisualFrame::filled(16, 16, 0.1).unwrap()).collect();
        let replaced = tamper_frames(&s.frames, &[3], VisualTamper::RegionReplace, (4, 4, 8, 8), Some(&originals), &mut rng).unwrap();
        let mask = Tensor::from_fn(&[16, 16], |i| if (4..12).contains(&(i % 16)) && (4..12).contains(&(i / 16)) { 1.0 } else { 0.0 });
        assert_eq!(replaced[3], crate::training::apply_mask(&originals[3], &s.frames[3], &mask).unwrap());
        let blurred = tamper_frames(&s.frames, &[0], VisualTamper::RegionReplace, (4, 4, 8, 8), None, &mut rng).unwrap();
        assert_ne!(blurred[0], s.frames[0]);
        assert!(tamper_frames(&s.frames, &[25], VisualTamper::RegionNoise, (0, 0, 4, 4), None, &mut rng).is_err());
    }

    use avguard_nn::Tensor;

    #[test]
    fn plans_are_reproducible() {
        let s = stream(5, 6);
        let plan = TamperPlan { seed: 42, ..TamperPlan::default() };
        let a = simulate(&s, &plan, None, None).unwrap();
        let b = simulate(&s, &plan, None, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.tampered_frame_indices.len(), 125);
        let (same, truth) = simulate(&s, &TamperPlan::untouched(), None, None).unwrap();
        assert_eq!(same, s);
        assert_eq!(truth, GroundTruth::default());
        let labels = a.1.frame_labels(125, 25);
        assert_eq!(labels.iter().filter(|&&l| l).count(), 25);
    }

    #[test]
    fn frame_labels_use_majority_overlap() {
        let truth = GroundTruth {
            tampered_intervals: vec![TamperInterval { t_start: 0.05, t_end: 0.13 }],
            tampered_frame_indices: vec![],
        };
        assert_eq!(truth.frame_labels(5, 25), vec![false, true, true, false, false]);
    }
}
