//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 4 and 5 evaluate the checkpoints under `models/`; regenerate them
//! with the commands in the README.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use avguard_cli::commands::{load_model, Timing, EVALUATION_STREAM};
use avguard_cli::config::ExperimentConfig;
use avguard_cli::datagen::synthetic_clip;
use avguard_cli::evaluation::{evaluate_clips, EvalSettings, EvaluationSummary};
use avguard_core::inn_core::{stack_forward, stack_inverse, CouplingStack};
use avguard_core::metrics::{auc, average_precision, interval_iou, psnr, snr, ssim};
use avguard_core::model::{ModelConfig, WatermarkModel};
use avguard_core::params::Module;
use avguard_core::pipeline::{embed_with, recover_with_latents, AVStream, EmbedOptions};
use avguard_core::sfe_localizer::{FeatureMap, TamperInterval, FEATURE_DIM};
use avguard_core::training::{loss_sfcl, objective_graph, parameter_gradients, FeatureQueue, LossWeights, TrainBatch};
use avguard_core::transforms::{
    haar_squeeze, haar_unsqueeze, istft_chunk, pack_spectrogram, stft_chunk, unpack_spectrogram, AudioChunk, StftParams,
    VisualFrame,
};
use avguard_nn::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: u64, detail: String) -> Outcome {
    check(elapsed.as_secs() < limit_s, format!("{detail}; {:.1}s of {limit_s}s", elapsed.as_secs_f64()))
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn tiny_model_config(blocks: usize) -> ModelConfig {
    ModelConfig { frame_height: 16, frame_width: 16, fps: 25, sample_rate: 75, window_size: 4, hop_length: 2, blocks, growth: 4 }
}

fn random_stream(config: &ModelConfig, frames: usize, seed: u64) -> AVStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (config.frame_height, config.frame_width);
    let frames: Vec<VisualFrame> =
        (0..frames).map(|_| VisualFrame::new(h, w, (0..3 * h * w).map(|_| rng.random_range(0.1..0.9)).collect()).unwrap()).collect();
    let audio = (0..frames.len() * config.chunk_len()).map(|_| rng.random_range(-0.5..0.5)).collect();
    AVStream::new(frames, audio, config.fps, config.sample_rate).unwrap()
}

/// Replaces the zero-initialized output layers so the stack is not trivial.
fn activate<T: avguard_nn::Real>(module: &mut impl Module<T>, rng: &mut ChaCha8Rng, scale: f64) {
    module.visit_mut("", &mut |name, p| {
        if name.contains("conv4") {
            *p = Arc::new(Tensor::from_fn(p.shape(), |_| T::lit(rng.random_range(-scale..scale))));
        }
    });
}

fn invertibility() -> Outcome {
    let mut worst_stack = 0.0f32;
    for draw in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(draw);
        let mut stack = CouplingStack::<f32>::new(1 + (draw % 3) as usize, 4, &mut rng).unwrap();
        activate(&mut stack, &mut rng, 0.3);
        let v = Tensor::from_fn(&[1, 48, 4, 4], |_| rng.random_range(-1.0..1.0));
        let a = Tensor::from_fn(&[1, 1, 4, 4], |_| rng.random_range(-1.0..1.0));
        let (v2, a2) = stack_forward(&v, &a, &stack).unwrap();
        let (v3, a3) = stack_inverse(&v2, &a2, &stack).unwrap();
        worst_stack = worst_stack.max(v3.max_abs_diff(&v)).max(a3.max_abs_diff(&a));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_dwt = 0.0f32;
    let mut worst_pack = 0.0f32;
    let mut worst_stft = 0.0f32;
    for _ in 0..20 {
        let x = Tensor::from_fn(&[2, 3, 16, 16], |_| rng.random_range(0.0..1.0));
        let y = haar_unsqueeze(&haar_unsqueeze(&haar_squeeze(&haar_squeeze(&x).unwrap()).unwrap()).unwrap()).unwrap();
        worst_dwt = worst_dwt.max(y.max_abs_diff(&x));
        let samples: Vec<f32> = (0..320).map(|_| rng.random_range(-1.0..1.0)).collect();
        let spec = stft_chunk(&AudioChunk::new(samples.clone(), 8000), StftParams::new(126, 64)).unwrap();
        let plane = pack_spectrogram(&spec, (32, 32)).unwrap();
        let back = unpack_spectrogram(&plane).unwrap();
        worst_pack = worst_pack.max(max_diff(&back.re, &spec.re)).max(max_diff(&back.im, &spec.im));
        worst_stft = worst_stft.max(max_diff(&istft_chunk(&back, &plane.layout, 320, 8000).unwrap().samples, &samples));
    }

    let config = tiny_model_config(2);
    let mut model = WatermarkModel::<f32>::new(config, 4).unwrap();
    activate(&mut model.stack, &mut ChaCha8Rng::seed_from_u64(9), 0.05);
    let stream = random_stream(&config, 10, 2);
    let (exact, latents) = embed_with(&stream, &model, EmbedOptions::exact()).unwrap();
    let oracle = recover_with_latents(&exact, &model, &latents).unwrap();
    let exact_err = max_diff(&oracle.audio, &stream.audio);
    // 8-bit frames: the recovery error must come from rounding alone.
    let (quantized, q_latents) = embed_with(&stream, &model, EmbedOptions::default()).unwrap();
    let rounding = exact
        .iter()
        .zip(&quantized)
        .map(|(a, b)| a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x.clamp(0.0, 1.0) - y).abs()).fold(0.0, f32::max))
        .fold(0.0, f32::max);
    let requantized: Vec<VisualFrame> =
        exact.iter().map(|f| VisualFrame::from_rgb8(f.height(), f.width(), &f.to_rgb8()).unwrap()).collect();
    let from_rounded = recover_with_latents(&requantized, &model, &latents).unwrap();
    let from_pipeline = recover_with_latents(&quantized, &model, &q_latents).unwrap();
    let same = max_diff(&from_rounded.audio, &from_pipeline.audio);
    let quantized_err = max_diff(&from_pipeline.audio, &stream.audio);

    check(
        worst_stack <= 1e-4 && worst_dwt <= 1e-6 && worst_pack <= 1e-6 && worst_stft <= 1e-5 && exact_err <= 1e-4
            && rounding <= 0.5 / 255.0 + 1e-6 && same <= 1e-4
            && quantized_err > 0.0 && quantized_err.is_finite(),
        format!(
            "stack {worst_stack:.2e} over 100 draws, dwt {worst_dwt:.1e}, pack {worst_pack:.1e}, stft {worst_stft:.1e}, \
             oracle latent {exact_err:.1e}, 8-bit path: rounding {rounding:.2e}, matches rounded-oracle recovery to {same:.1e}, audio error {quantized_err:.2e}"
        ),
    )
}

fn gradients() -> Outcome {
    let config = tiny_model_config(2);
    let mut model = WatermarkModel::<f64>::new(config, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    activate(&mut model, &mut rng, 0.1);
    let maps = model.spectral_maps();
    let stream = random_stream(&config, 3, 7);
    let mask: Vec<f64> = (0..3 * 3 * 256).map(|i| ((i % 16 + (i / 16) % 16) % 2) as f64).collect();
    let batch = TrainBatch {
        frames: Tensor::new(&[3, 3, 16, 16], stream.frames.iter().flat_map(|f| f.pixels().iter().map(|&v| v as f64)).collect()),
        chunks: Tensor::new(&[3, 3], stream.audio.iter().map(|&v| v as f64).collect()),
        mask: Tensor::new(&[3, 3, 16, 16], mask),
    };
    let negatives = Arc::new(Tensor::from_fn(&[5, FEATURE_DIM], |_| rng.random_range(-0.2..0.2)));
    let only = |k: usize| {
        let mut w = [0.0; 4];
        w[k] = 1.0;
        LossWeights { lambda_wl: w[0], lambda_vrl: w[1], lambda_arl: w[2], lambda_sfcl: w[3], tau: 0.07 }
    };
    let objectives = [("L_WL", only(0)), ("L_VRL", only(1)), ("L_ARL", only(2)), ("L_SFCL", only(3)), ("total", LossWeights::default())];
    let mut names = Vec::new();
    model.visit("", &mut |n, p| names.push((n, p.len())));
    let mut probes = 0;
    let mut worst = (0.0f64, String::new());
    for (label, weights) in objectives {
        let eval = |m: &WatermarkModel<f64>| {
            let mut g = Graph::no_grad();
            let v = objective_graph(&mut g, m, &maps, &batch, negatives.clone(), &weights, EmbedOptions::exact());
            g.value(v.total).item()
        };
        let mut g = Graph::new();
        let v = objective_graph(&mut g, &model, &maps, &batch, negatives.clone(), &weights, EmbedOptions::exact());
        let grads = parameter_gradients(&g, &model, v.total);
        // Probe only tensors the term actually depends on.
        let live: Vec<usize> = (0..names.len()).filter(|&k| grads[k].as_ref().is_some_and(|t| t.data().iter().any(|&x| x != 0.0))).collect();
        for _ in 0..24 {
            let k = live[rng.random_range(0..live.len())];
            let i = rng.random_range(0..names[k].1);
            let bump = |delta: f64| {
                let mut m = model.clone();
                let mut idx = 0;
                m.visit_mut("", &mut |_, p| {
                    if idx == k {
                        Arc::make_mut(p).data_mut()[i] += delta;
                    }
                    idx += 1;
                });
                eval(&m)
            };
            let numeric = (bump(1e-6) - bump(-1e-6)) / 2e-6;
            let analytic = grads[k].as_ref().map_or(0.0, |t| t.data()[i]);
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{label} {}[{i}]", names[k].0));
            }
            probes += 1;
        }
    }
    check(worst.0 <= 1e-3 && probes >= 100, format!("{probes} probes over 4 terms + total, worst relative error {:.2e} ({})", worst.0, worst.1))
}

fn oracle_iou(a: &[TamperInterval], b: &[TamperInterval]) -> f64 {
    // Exact: measure on the elementary segments between all endpoints.
    let mut cuts: Vec<f64> = a.iter().chain(b).flat_map(|i| [i.t_start, i.t_end]).collect();
    cuts.sort_by(f64::total_cmp);
    let inside = |set: &[TamperInterval], t: f64| set.iter().any(|i| i.t_start <= t && t < i.t_end);
    let (mut inter, mut union) = (0.0, 0.0);
    for w in cuts.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        let (x, y) = (inside(a, mid), inside(b, mid));
        if x && y {
            inter += w[1] - w[0];
        }
        if x || y {
            union += w[1] - w[0];
        }
    }
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

fn oracle_ap(s: &[f64], y: &[bool]) -> f64 {
    // Mean over positives of the precision at that positive's score.
    let pos: Vec<usize> = (0..s.len()).filter(|&i| y[i]).collect();
    pos.iter()
        .map(|&i| {
            let above: Vec<usize> = (0..s.len()).filter(|&j| s[j] >= s[i]).collect();
            above.iter().filter(|&&j| y[j]).count() as f64 / above.len() as f64
        })
        .sum::<f64>()
        / pos.len() as f64
}

fn oracle_auc(s: &[f64], y: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in (0..s.len()).filter(|&i| y[i]) {
        for j in (0..s.len()).filter(|&j| !y[j]) {
            pairs += 1.0;
            wins += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
        }
    }
    wins / pairs
}

fn oracle_ssim(a: &VisualFrame, b: &VisualFrame) -> f64 {
    let (h, w) = (a.height(), a.width());
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let mut total = 0.0;
    for c in 0..3 {
        let px = |f: &VisualFrame, y: usize, x: usize| f.pixels()[c * h * w + y * w + x] as f64;
        let mut acc = 0.0;
        let mut count = 0.0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let k = g[dy] * g[dx] / norm;
                        let (p, q) = (px(a, y0 + dy, x0 + dx), px(b, y0 + dy, x0 + dx));
                        mx += k * p;
                        my += k * q;
                        sxx += k * p * p;
                        syy += k * q * q;
                        sxy += k * p * q;
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                acc += ((2.0 * mx * my + c1) * (2.0 * (sxy - mx * my) + c2))
                    / ((mx * mx + my * my + c1) * (sxx - mx * mx + syy - my * my + c2));
                count += 1.0;
            }
        }
        total += acc / count;
    }
    total / 3.0
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = BTreeMap::<&str, f64>::new();
    let mut note = |k: &'static str, e: f64| {
        let w = worst.entry(k).or_insert(0.0);
        *w = w.max(e);
    };
    for _ in 0..200 {
        let n = rng.random_range(2..=32);
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
            continue;
        }
        // Coarse scores force ties.
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..8) as f64) / 8.0).collect();
        note("AP", (average_precision(&scores, &labels).unwrap() - oracle_ap(&scores, &labels)).abs());
        note("AUC", (auc(&scores, &labels).unwrap() - oracle_auc(&scores, &labels)).abs());

        let set = |rng: &mut ChaCha8Rng| {
            (0..rng.random_range(0..4))
                .map(|_| {
                    let s = rng.random_range(0.0..4.0);
                    TamperInterval { t_start: s, t_end: s + rng.random_range(0.01..1.5) }
                })
                .collect::<Vec<_>>()
        };
        let (a, b) = (set(&mut rng), set(&mut rng));
        note("IoU", (interval_iou(&a, &b) - oracle_iou(&a, &b)).abs());

        let x: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f32> = x.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
        let (sig, err) = x.iter().zip(&y).fold((0.0, 0.0), |(s, e), (&p, &q)| {
            (s + (p as f64).powi(2), e + (p as f64 - q as f64).powi(2))
        });
        note("SNR", (snr(&x, &y).unwrap() - 10.0 * (sig / err).log10()).abs());
    }
    for _ in 0..10 {
        let (h, w) = (4 * rng.random_range(3..5), 4 * rng.random_range(3..5));
        let a = VisualFrame::new(h, w, (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let b = VisualFrame::new(h, w, a.pixels().iter().map(|v| (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0)).collect()).unwrap();
        let mse = a.pixels().iter().zip(b.pixels()).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum::<f64>() / a.pixels().len() as f64;
        note("PSNR", (psnr(&a, &b).unwrap() + 10.0 * mse.log10()).abs());
        note("SSIM", (ssim(&a, &b).unwrap() - oracle_ssim(&a, &b)).abs());
    }
    let tol = |k: &str| if k == "AP" || k == "AUC" { 1e-12 } else { 1e-6 };
    let ok = worst.iter().all(|(k, v)| *v <= tol(k));
    check(ok, worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", "))
}

fn models_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

/// Number and length of held-out clips for criteria 4 and 5.
const EVAL_CLIPS: u64 = 6;
const EVAL_FRAMES: usize = 125;

struct DeskRun {
    summary: EvaluationSummary,
    timing: Option<Timing>,
}

fn desk_run(name: &str) -> std::result::Result<DeskRun, String> {
    let ckpt = models_dir().join(format!("{name}.ckpt"));
    let loaded = load_model(&ckpt).map_err(|e| format!("{name}: {e}"))?;
    let cfg = ExperimentConfig::default();
    if loaded.model.config != cfg.model() {
        return Err(format!("{name}: not a desk-config model"));
    }
    let clips: Vec<AVStream> =
        (0..EVAL_CLIPS).map(|i| synthetic_clip(cfg.clip_format(), EVAL_FRAMES, cfg.seed, EVALUATION_STREAM + i)).collect();
    let settings = EvalSettings { plan: cfg.plan().unwrap(), smoothing: cfg.smoothing, min_run: cfg.min_run };
    let (summary, _) = evaluate_clips(&loaded.model, &clips, &settings, loaded.threshold).map_err(|e| e.to_string())?;
    let timing = fs::read_to_string(models_dir().join(format!("{name}.timing.json"))).ok().and_then(|t| serde_json::from_str(&t).ok());
    Ok(DeskRun { summary, timing })
}

fn desk_training(masked: &std::result::Result<DeskRun, String>) -> Outcome {
    let run = masked.as_ref().map_err(Clone::clone)?;
    let m = run.summary.mean;
    let budget = run.timing.map_or(false, |t| t.iterations <= 10_000 && t.seconds <= 7200.0);
    let timing = run.timing.map_or("no timing record".into(), |t| format!("{} iterations in {:.0} s", t.iterations, t.seconds));
    check(
        m.snr_clean_db >= 10.0 && m.psnr_db >= 35.0 && m.ssim >= 0.95 && m.feature_auc >= 0.90 && m.feature_ap >= 0.90 && budget,
        format!(
            "(a) SNR {:.2} dB (b) PSNR {:.2} dB, SSIM {:.4} (c) AUC {:.4}, AP {:.4}; {timing}",
            m.snr_clean_db, m.psnr_db, m.ssim, m.feature_auc, m.feature_ap
        ),
    )
}

fn ablations(masked: &std::result::Result<DeskRun, String>, plain: &std::result::Result<DeskRun, String>) -> Outcome {
    let m = masked.as_ref().map_err(Clone::clone)?.summary.mean;
    let p = plain.as_ref().map_err(Clone::clone)?.summary.mean;
    let a = m.snr_tampered_db > p.snr_tampered_db && m.iou > p.iou;
    let b = m.feature_ap > m.raw_ap;
    let c = p.psnr_db > m.psnr_db;
    let mark = |ok: bool| if ok { "ok" } else { "NOT MET" };
    check(
        a && b && c,
        format!(
            "(a) corrupted-frame SNR {:.2} vs {:.2} dB, IoU {:.3} vs {:.3} {}; (b) feature AP {:.4} vs raw AP {:.4} {}; \
             (c) PSNR no-mask {:.2} vs masked {:.2} dB {}",
            m.snr_tampered_db,
            p.snr_tampered_db,
            m.iou,
            p.iou,
            mark(a),
            m.feature_ap,
            m.raw_ap,
            mark(b),
            p.psnr_db,
            m.psnr_db,
            mark(c)
        ),
    )
}

fn info_nce_closed_form() -> Outcome {
    let e = FeatureMap { features: Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]), timestep_duration: 0.04 };
    let empty = FeatureQueue::with_capacity(2, 4);
    let v = loss_sfcl(&e, &e, &empty, 1.0).map_err(|x| x.to_string())?;
    check((v - 0.6265).abs() <= 1e-4, format!("{v:.6} (expected 0.6265)"))
}

const SMOKE: &str = r#"
frame_height = 32
frame_width = 32
fps = 25
sample_rate = 400
window_size = 8
hop_length = 4
blocks = 1
growth = 2
n_clips = 3
duration = 0.8
validation_clips = 1
iterations = 3
batch_size = 2
log_every = 1
seed = 5
"#;

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "timing.json") {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn cli_pipeline(root: &Path) -> std::result::Result<(), String> {
    let cfg = root.join("smoke.toml");
    fs::write(&cfg, SMOKE).unwrap();
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let c = cfg.to_string_lossy().into_owned();
    let steps: Vec<Vec<String>> = vec![
        vec!["gen-data".into(), "--output".into(), p("data")],
        vec!["train".into(), "--dataset".into(), p("data"), "--output".into(), p("train")],
        vec!["embed".into(), "--checkpoint".into(), p("train/model.ckpt"), "--input".into(), p("data/clip_0000"), "--output".into(), p("marked")],
        vec!["simulate".into(), "--input".into(), p("marked"), "--reference".into(), p("data/clip_0000"), "--output".into(), p("attacked")],
        vec!["recover".into(), "--checkpoint".into(), p("train/model.ckpt"), "--input".into(), p("attacked"), "--reference".into(), p("data/clip_0000"), "--output".into(), p("recovered")],
        vec![
            "localize".into(), "--checkpoint".into(), p("train/model.ckpt"), "--input".into(), p("attacked"), "--recovered".into(), p("recovered"),
            "--ground-truth".into(), p("attacked/ground_truth.json"), "--output".into(), p("localized"),
        ],
        vec!["evaluate".into(), "--checkpoint".into(), p("train/model.ckpt"), "--dataset".into(), p("data"), "--output".into(), p("evaluation")],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_avguard")).arg("--config").arg(&c).args(&args).output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("`{}` exited {:?}: {}", args[0], out.status.code(), String::from_utf8_lossy(&out.stderr).trim()));
        }
    }
    Ok(())
}

fn cli_reproducibility() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cli_pipeline(a.path())?;
    cli_pipeline(b.path())?;
    let (fa, fb) = (files(a.path()), files(b.path()));
    let differing: Vec<String> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).map(|k| k.display().to_string()).collect();
    check(
        fa.len() == fb.len() && differing.is_empty(),
        format!("7 verbs exit 0 twice; {} output files compared, {} differ {:?}", fa.len(), differing.len(), differing),
    )
}

fn main() {
    let mut failures = 0;
    let mut report = |n: u32, name: &str, started: Instant, limit_s: Option<u64>, outcome: Outcome| {
        let outcome = match (outcome, limit_s) {
            (Ok(d), Some(l)) => within(started.elapsed(), l, d),
            (o, _) => o,
        };
        match outcome {
            Ok(d) => println!("criterion {n} PASS  {name}: {d}"),
            Err(d) => {
                failures += 1;
                println!("criterion {n} FAIL  {name}: {d}");
            }
        }
    };
    let t = Instant::now();
    report(1, "invertibility", t, Some(60), invertibility());
    let t = Instant::now();
    report(2, "gradients", t, Some(300), gradients());
    let t = Instant::now();
    report(3, "metric oracles", t, Some(60), metric_oracles());
    let t = Instant::now();
    let masked = desk_run("desk_mask");
    let plain = desk_run("desk_nomask");
    report(4, "desk-scale training", t, None, desk_training(&masked));
    report(5, "ablation orderings", t, None, ablations(&masked, &plain));
    let t = Instant::now();
    report(6, "InfoNCE closed form", t, None, info_nce_closed_form());
    let t = Instant::now();
    report(7, "CLI reproducibility", t, None, cli_reproducibility());
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
}
