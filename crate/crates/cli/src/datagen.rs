//! Procedural stand-in data: textured frames with moving discs, paired with
//! harmonic, amplitude-modulated audio with a noise floor.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use avguard_core::pipeline::AVStream;
use avguard_core::transforms::VisualFrame;
use avguard_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::container::{quantize_pcm16, write_container};

pub const RMS_RANGE: (f64, f64) = (0.05, 0.5);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipFormat {
    pub frame_height: usize,
    pub frame_width: usize,
    pub fps: u32,
    pub sample_rate: u32,
}

struct Disc {
    pos: (f64, f64),
    vel: (f64, f64),
    radius: f64,
    color: [f64; 3],
}

fn frames(rng: &mut ChaCha8Rng, count: usize, h: usize, w: usize) -> Vec<VisualFrame> {
    let mut base = vec![0.0f64; 3 * h * w];
    for c in 0..3 {
        let mut waves = Vec::new();
        for _ in 0..4 {
            let (fx, fy) = (rng.random_range(0.5..4.0), rng.random_range(0.5..4.0));
            waves.push((fx, fy, rng.random_range(0.0..2.0 * PI), rng.random_range(0.05..0.15)));
        }
        let offset = rng.random_range(0.3..0.6);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 / h as f64, y as f64 / h as f64);
                let s: f64 = waves.iter().map(|(fx, fy, ph, a)| a * (2.0 * PI * (fx * u + fy * v) + ph).sin()).sum();
                base[c * h * w + y * w + x] = s + offset;
            }
        }
    }
    // 4x4-pixel grain
    let normal = Normal::new(0.0, 0.02).expect("valid sigma");
    let (gh, gw) = (h.div_ceil(4), w.div_ceil(4));
    let grain: Vec<f64> = (0..3 * gh * gw).map(|_| normal.sample(rng)).collect();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                base[c * h * w + y * w + x] += grain[c * gh * gw + (y / 4) * gw + x / 4];
            }
        }
    }
    let discs: Vec<Disc> = (0..3)
        .map(|_| Disc {
            pos: (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)),
            vel: (rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01)),
            radius: rng.random_range(0.06..0.2),
            color: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
        })
        .collect();
    (0..count)
        .map(|t| {
            let mut px = base.clone();
            for d in &discs {
                let (cy, cx) = (d.pos.0 + d.vel.0 * t as f64, d.pos.1 + d.vel.1 * t as f64);
                for y in 0..h {
                    for x in 0..w {
                        let (v, u) = (y as f64 / h as f64, x as f64 / h as f64);
                        if (v - cy).powi(2) + (u - cx).powi(2) < d.radius * d.radius {
                            for c in 0..3 {
                                px[c * h * w + y * w + x] = d.color[c] * 0.8 + 0.1;
                            }
                        }
                    }
                }
            }
            let rgb: Vec<u8> = (0..h * w)
                .flat_map(|i| {
                    let px = &px;
                    (0..3).map(move |c| (px[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8)
                })
                .collect();
            VisualFrame::from_rgb8(h, w, &rgb).expect("valid frame")
        })
        .collect()
}

fn audio(rng: &mut ChaCha8Rng, n: usize, sr: f64) -> Vec<f32> {
    let t = |k: usize| k as f64 / sr;
    let mut a = vec![0.0f64; n];
    let f0 = rng.random_range(90.0..300.0);
    let (env_rate, env_phase) = (rng.random_range(2.0..6.0), rng.random_range(0.0..6.0));
    for harmonic in 1..8 {
        let amp = rng.random_range(0.2..1.0) / harmonic as f64;
        let phase0 = rng.random_range(0.0..6.0);
        if f0 * harmonic as f64 * 1.03 >= sr / 2.0 - 200.0 {
            continue;
        }
        let mut phase = 0.0;
        for (k, v) in a.iter_mut().enumerate() {
            let f = f0 * harmonic as f64 * (1.0 + 0.03 * (2.0 * PI * 0.7 * t(k)).sin());
            phase += 2.0 * PI * f / sr;
            *v += amp * (phase + phase0).sin();
        }
    }
    for _ in 0..2 {
        let fc = rng.random_range(300.0..3000.0f64).min(sr / 2.0 - 200.0);
        let (amp, ph, rate) = (rng.random_range(0.1..0.5), rng.random_range(0.0..6.0), rng.random_range(1.0..4.0));
        for (k, v) in a.iter_mut().enumerate() {
            *v += amp * (2.0 * PI * fc * t(k) + ph).sin() * (0.5 + 0.5 * (2.0 * PI * rate * t(k)).sin());
        }
    }
    let normal = Normal::new(0.0, 1.0).expect("valid sigma");
    let white: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    let noise_rate = rng.random_range(2.0..8.0);
    for k in 0..n {
        let env = 0.5 + 0.5 * (2.0 * PI * env_rate * t(k) + env_phase).sin();
        let lo = k.saturating_sub(2);
        let hi = (k + 2).min(n);
        let smooth: f64 = white[lo..hi].iter().sum::<f64>() / 4.0;
        a[k] = a[k] * env + 0.3 * smooth * (0.5 + 0.5 * (2.0 * PI * noise_rate * t(k)).sin());
    }
    let rms = (a.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt().max(1e-12);
    let target = rng.random_range(RMS_RANGE.0..RMS_RANGE.1);
    let scaled: Vec<f32> = a.iter().map(|v| (v / rms * target).clamp(-1.0, 1.0) as f32).collect();
    quantize_pcm16(&scaled)
}

/// One clip of `frame_count` frames; 8-bit frames and PCM16-exact audio, so
/// writing it to a container and reading it back is lossless.
pub fn synthetic_clip(format: ClipFormat, frame_count: usize, seed: u64, index: u64) -> AVStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let n = frame_count * (format.sample_rate / format.fps) as usize;
    let f = frames(&mut rng, frame_count, format.frame_height, format.frame_width);
    let a = audio(&mut rng, n, format.sample_rate as f64);
    AVStream::new(f, a, format.fps, format.sample_rate).expect("consistent by construction")
}

/// Writes `n_clips` containers `clip_0000`, ... of `duration` seconds under `dir`.
pub fn gen_synthetic_dataset(dir: &Path, n_clips: usize, duration: f64, format: ClipFormat, seed: u64) -> Result<Vec<PathBuf>> {
    let frames = (duration * format.fps as f64).round() as usize;
    if n_clips == 0 || frames == 0 {
        return Err(Error::Config("clip count and duration must be positive".into()));
    }
    if format.fps == 0 || format.sample_rate % format.fps != 0 {
        return Err(Error::Config(format!("sample rate {} is not a multiple of {} fps", format.sample_rate, format.fps)));
    }
    (0..n_clips)
        .map(|i| {
            let path = dir.join(format!("clip_{i:04}"));
            write_container(&path, &synthetic_clip(format, frames, seed, i as u64), None, None)?;
            Ok(path)
        })
        .collect()
}
