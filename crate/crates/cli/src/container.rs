//! On-disk audiovisual container:
//!
//! ```text
//! <dir>/frames/000000.png ...   8-bit RGB, lossless
//! <dir>/audio.wav               PCM16 mono
//! <dir>/meta.json               sidecar, see `Sidecar`
//! ```

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use avguard_core::pipeline::AVStream;
use avguard_core::transforms::{PackingLayout, VisualFrame};
use avguard_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;
pub const FRAMES_DIR: &str = "frames";
pub const AUDIO_FILE: &str = "audio.wav";
pub const META_FILE: &str = "meta.json";
pub const FRAME_ENCODING: &str = "png-rgb8";
const PCM_SCALE: f32 = 32767.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub fps: u32,
    pub sample_rate: u32,
    pub frame_count: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub frame_encoding: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<PackingLayout>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AVContainer {
    pub stream: AVStream,
    pub sidecar: Sidecar,
}

fn container_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Container { path: path.to_path_buf(), reason: reason.into() }
}

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(FRAMES_DIR).join(format!("{index:06}.png"))
}

/// Upper bound on parallel decode/encode threads, from `AVGUARD_NUM_WORKERS`.
pub fn num_workers() -> usize {
    std::env::var("AVGUARD_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` over `0..n` on up to `num_workers()` threads; results keep index order.
fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = num_workers().min(n.max(1));
    if workers <= 1 {
        return (0..n).map(&f).collect();
    }
    let per = n.div_ceil(workers);
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || (w * per..((w + 1) * per).min(n)).map(f).collect::<Result<Vec<T>>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn write_png(path: &Path, frame: &VisualFrame) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let mut enc = png::Encoder::new(BufWriter::new(file), frame.width() as u32, frame.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| container_err(path, e.to_string()))?;
    w.write_image_data(&frame.to_rgb8()).map_err(|e| container_err(path, e.to_string()))?;
    w.finish().map_err(|e| container_err(path, e.to_string()))
}

pub fn read_png(path: &Path) -> Result<VisualFrame> {
    let file = fs::File::open(path).map_err(|e| container_err(path, format!("cannot open frame: {e}")))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| container_err(path, e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| container_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| container_err(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf[..w * h * 3].to_vec(),
        png::ColorType::Rgba => buf[..w * h * 4].chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf[..w * h].iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf[..w * h * 2].chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(container_err(path, "unexpanded palette image")),
    };
    VisualFrame::from_rgb8(h, w, &rgb).map_err(|e| container_err(path, e.to_string()))
}

pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec { channels: 1, sample_rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| container_err(path, e.to_string()))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * PCM_SCALE).round() as i16;
        w.write_sample(v).map_err(|e| container_err(path, e.to_string()))?;
    }
    w.finalize().map_err(|e| container_err(path, e.to_string()))
}

/// Samples and sample rate of a PCM16 mono file.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let r = hound::WavReader::open(path).map_err(|e| container_err(path, format!("cannot read audio: {e}")))?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(container_err(path, format!("expected PCM16 mono, found {spec:?}")));
    }
    let samples = r
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / PCM_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| container_err(path, e.to_string()))?;
    Ok((samples, spec.sample_rate))
}

/// Rounds audio to what a PCM16 round trip would return.
pub fn quantize_pcm16(samples: &[f32]) -> Vec<f32> {
    samples.iter().map(|&s| (s.clamp(-1.0, 1.0) * PCM_SCALE).round() / PCM_SCALE).collect()
}

pub fn read_sidecar(dir: &Path) -> Result<Sidecar> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| container_err(&path, format!("missing or unreadable sidecar: {e}")))?;
    let meta: Sidecar = serde_json::from_str(&text).map_err(|e| container_err(&path, format!("bad sidecar: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(container_err(&path, format!("unsupported format version {}", meta.format_version)));
    }
    if meta.frame_encoding != FRAME_ENCODING {
        return Err(container_err(&path, format!("unsupported frame encoding {}", meta.frame_encoding)));
    }
    if meta.fps == 0 || meta.sample_rate % meta.fps != 0 {
        return Err(container_err(&path, format!("sample rate {} is not a multiple of {} fps", meta.sample_rate, meta.fps)));
    }
    Ok(meta)
}

/// Reads and validates a container.
pub fn read_container(dir: &Path) -> Result<AVContainer> {
    let meta = read_sidecar(dir)?;
    let audio_path = dir.join(AUDIO_FILE);
    let (audio, sr) = read_wav(&audio_path)?;
    if sr != meta.sample_rate {
        return Err(container_err(&audio_path, format!("audio is {sr} Hz, sidecar says {}", meta.sample_rate)));
    }
    let chunk = (meta.sample_rate / meta.fps) as usize;
    if audio.len() != meta.frame_count * chunk {
        return Err(container_err(
            &audio_path,
            format!("{} samples, {} frames need {}", audio.len(), meta.frame_count, meta.frame_count * chunk),
        ));
    }
    let present = fs::read_dir(dir.join(FRAMES_DIR))
        .map_err(|e| container_err(&dir.join(FRAMES_DIR), e.to_string()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
        .count();
    if present != meta.frame_count {
        return Err(container_err(dir, format!("{present} frame files, sidecar says {}", meta.frame_count)));
    }
    let frames = par_map(meta.frame_count, |i| {
        let p = frame_path(dir, i);
        let f = read_png(&p)?;
        if f.height() != meta.frame_height || f.width() != meta.frame_width {
            return Err(container_err(&p, format!("frame is {}x{}, sidecar says {}x{}", f.height(), f.width(), meta.frame_height, meta.frame_width)));
        }
        Ok(f)
    })?;
    let stream = AVStream { frames, audio, fps: meta.fps, sample_rate: meta.sample_rate };
    stream.validate().map_err(|e| container_err(dir, e.to_string()))?;
    Ok(AVContainer { stream, sidecar: meta })
}

/// Writes `stream` as a container, replacing any previous contents of `dir`'s frames.
pub fn write_container(dir: &Path, stream: &AVStream, layout: Option<PackingLayout>, model_id: Option<String>) -> Result<Sidecar> {
    stream.validate()?;
    let frames_dir = dir.join(FRAMES_DIR);
    if frames_dir.exists() {
        fs::remove_dir_all(&frames_dir).map_err(|e| Error::Io { path: frames_dir.clone(), source: e })?;
    }
    fs::create_dir_all(&frames_dir).map_err(|e| Error::Io { path: frames_dir.clone(), source: e })?;
    par_map(stream.len(), |i| write_png(&frame_path(dir, i), &stream.frames[i]))?;
    write_wav(&dir.join(AUDIO_FILE), &stream.audio, stream.sample_rate)?;
    let (h, w) = stream.frames.first().map_or((0, 0), |f| (f.height(), f.width()));
    let meta = Sidecar {
        format_version: FORMAT_VERSION,
        fps: stream.fps,
        sample_rate: stream.sample_rate,
        frame_count: stream.len(),
        frame_height: h,
        frame_width: w,
        frame_encoding: FRAME_ENCODING.to_string(),
        layout,
        model_id,
    };
    write_json(&dir.join(META_FILE), &meta)?;
    Ok(meta)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.to_path_buf(), source: e })?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| container_err(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| container_err(path, format!("cannot read: {e}")))?;
    serde_json::from_str(&text).map_err(|e| container_err(path, format!("cannot parse: {e}")))
}

/// Container directories directly under `dir`, sorted by name.
pub fn list_containers(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| container_err(dir, format!("cannot list dataset: {e}")))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META_FILE).is_file())
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(container_err(dir, "no containers found"));
    }
    Ok(out)
}
