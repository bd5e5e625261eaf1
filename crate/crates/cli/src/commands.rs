//! One function per CLI verb. Each returns a JSON summary that `main` prints.

use std::fs;
use std::path::{Path, PathBuf};

use avguard_core::metrics::{auc, average_precision, interval_iou, log_spectral_distance, snr, MetricReport};
use avguard_core::model::{Checkpoint, WatermarkModel};
use avguard_core::pipeline::{embed, recover, AVStream};
use avguard_core::sfe_localizer::{scores_to_intervals_with, TamperReport};
use avguard_core::tamper_sim::{simulate, AudioTamper, GroundTruth, VisualTamper};
use avguard_core::training::{train, TrainOutput, Trainer};
use avguard_core::{Error, Result};
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::container::{read_container, read_json, write_container, write_json, AVContainer, AUDIO_FILE, FRAMES_DIR, META_FILE};
use crate::datagen::{gen_synthetic_dataset, synthetic_clip};
use crate::evaluation::{evaluate_clips, feature_scores, likelihood, mean_frame_metric, EvalSettings, FALLBACK_THRESHOLD};

pub const WEIGHTS_FILE: &str = "weights.ckpt";
/// Wall-clock record; the only training output that differs between identical runs.
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Timing {
    pub seconds: f64,
    pub iterations: usize,
}

/// Key under which training stores the calibrated localization threshold.
pub const THRESHOLD_KEY: &str = "localization_threshold";

/// Stream indices of generated clips; disjoint ranges keep splits apart.
pub const VALIDATION_STREAM: u64 = 1 << 31;
pub const EVALUATION_STREAM: u64 = 1 << 32;

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Empty(_) | Error::UndefinedMetric(_) => 2,
        Error::Container { .. } | Error::Io { .. } | Error::Alignment(_) | Error::SignalTooShort { .. } => 3,
        Error::Capacity { .. } => 4,
        Error::Checkpoint(_) | Error::ModelMismatch(_) | Error::Dimension(_) | Error::LayoutMismatch(_) => 5,
        Error::Numeric(_) => 6,
    }
}

/// Model plus the threshold calibrated during training, if any.
pub struct LoadedModel {
    pub model: WatermarkModel<f32>,
    pub threshold: Option<f64>,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let ckpt = Checkpoint::load(path)?;
    let threshold = ckpt
        .training
        .as_ref()
        .and_then(|t| t.get("annotations")?.get(THRESHOLD_KEY)?.as_f64());
    Ok(LoadedModel { model: ckpt.model, threshold })
}

fn settings(cfg: &ExperimentConfig) -> Result<EvalSettings> {
    Ok(EvalSettings { plan: cfg.plan()?, smoothing: cfg.smoothing, min_run: cfg.min_run })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

/// The container must have been embedded by `model`.
fn check_provenance(container: &AVContainer, model: &WatermarkModel<f32>) -> Result<()> {
    let id = model.model_id();
    match &container.sidecar.model_id {
        None => return Err(Error::ModelMismatch("container carries no watermark model id".into())),
        Some(found) if *found != id => {
            return Err(Error::ModelMismatch(format!("container was embedded by model {found}, checkpoint is {id}")))
        }
        _ => {}
    }
    match &container.sidecar.layout {
        Some(l) if *l != model.layout() => Err(Error::LayoutMismatch(format!("container layout {l:?} differs from the model's"))),
        _ => Ok(()),
    }
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<Value> {
    let paths = gen_synthetic_dataset(&cfg.output, cfg.n_clips, cfg.duration, cfg.clip_format(), cfg.seed)?;
    Ok(json!({ "clips": paths }))
}

pub fn embed_cmd(cfg: &ExperimentConfig) -> Result<Value> {
    let loaded = load_model(cfg.require("checkpoint")?)?;
    let input = read_container(cfg.require("input")?)?;
    let model = &loaded.model;
    let art = embed(&input.stream, model)?;
    let out = AVStream { frames: art.watermarked_frames, ..input.stream.clone() };
    write_container(&cfg.output, &out, Some(art.layout), Some(art.model_id.clone()))?;
    // Fidelity of what was actually written (8-bit frames).
    let written = read_container(&cfg.output)?;
    let report = MetricReport {
        psnr_db: Some(mean_frame_metric(&written.stream.frames, &input.stream.frames, avguard_core::metrics::psnr)?),
        ssim: Some(mean_frame_metric(&input.stream.frames, &written.stream.frames, avguard_core::metrics::ssim)?),
        ..Default::default()
    };
    write_json(&cfg.output.join("embed_report.json"), &report)?;
    Ok(json!({ "model_id": art.model_id, "metrics": report }))
}

pub fn recover_cmd(cfg: &ExperimentConfig) -> Result<Value> {
    let loaded = load_model(cfg.require("checkpoint")?)?;
    let input = read_container(cfg.require("input")?)?;
    check_provenance(&input, &loaded.model)?;
    let rec = recover(&input.stream.frames, &loaded.model, &loaded.model.layout())?;
    let out = AVStream { frames: rec.frames, audio: rec.audio, ..input.stream.clone() };
    write_container(&cfg.output, &out, None, None)?;
    let mut report = MetricReport::default();
    if cfg.reference.is_some() {
        let reference = read_container(cfg.require("reference")?)?;
        let written = read_container(&cfg.output)?;
        report.snr_db = Some(snr(&reference.stream.audio, &written.stream.audio)?);
        report.lsd = Some(log_spectral_distance(&reference.stream.audio, &written.stream.audio, loaded.model.config.stft())?);
    }
    write_json(&cfg.output.join("recover_report.json"), &report)?;
    Ok(json!({ "metrics": report }))
}

pub fn localize_cmd(cfg: &ExperimentConfig) -> Result<Value> {
    let loaded = load_model(cfg.require("checkpoint")?)?;
    let input = read_container(cfg.require("input")?)?;
    let recovered_audio = match &cfg.recovered {
        Some(p) => read_container(p)?.stream.audio,
        None => {
            check_provenance(&input, &loaded.model)?;
            recover(&input.stream.frames, &loaded.model, &loaded.model.layout())?.audio
        }
    };
    let threshold = cfg.threshold.or(loaded.threshold).unwrap_or(FALLBACK_THRESHOLD);
    let series = feature_scores(&loaded.model, &input.stream.audio, &recovered_audio, cfg.smoothing)?;
    let intervals = scores_to_intervals_with(&series, threshold, cfg.min_run);
    let metrics = match &cfg.ground_truth {
        Some(_) => {
            let truth: GroundTruth = read_json(cfg.require("ground_truth")?)?;
            let labels = truth.frame_labels(series.scores.len(), input.stream.fps);
            let l = likelihood(&series);
            Some(MetricReport {
                iou: Some(interval_iou(&intervals, &truth.tampered_intervals)),
                ap: Some(average_precision(&l, &labels)?),
                auc: Some(auc(&l, &labels)?),
                ..Default::default()
            })
        }
        None => None,
    };
    let report = TamperReport { scores: series.scores, timestep_duration: series.timestep_duration, threshold, intervals, metrics };
    ensure_dir(&cfg.output)?;
    write_json(&cfg.output.join("report.json"), &report)?;
    Ok(json!({ "threshold": threshold, "intervals": report.intervals, "metrics": report.metrics }))
}

fn copy_container(from: &Path, to: &Path) -> Result<()> {
    let io = |path: &Path, e| Error::Io { path: path.to_path_buf(), source: e };
    let frames = to.join(FRAMES_DIR);
    if frames.exists() {
        fs::remove_dir_all(&frames).map_err(|e| io(&frames, e))?;
    }
    ensure_dir(&frames)?;
    let mut names: Vec<PathBuf> = fs::read_dir(from.join(FRAMES_DIR))
        .map_err(|e| io(from, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    names.sort();
    for src in names {
        let dst = frames.join(src.file_name().expect("directory entry has a name"));
        fs::copy(&src, &dst).map_err(|e| io(&src, e))?;
    }
    for f in [AUDIO_FILE, META_FILE] {
        fs::copy(from.join(f), to.join(f)).map_err(|e| io(&from.join(f), e))?;
    }
    Ok(())
}

pub fn simulate_cmd(cfg: &ExperimentConfig) -> Result<Value> {
    let input_dir = cfg.require("input")?;
    let input = read_container(input_dir)?;
    let plan = cfg.plan()?;
    let (truth, copied) = if plan.audio_mode == AudioTamper::None && plan.visual_mode == VisualTamper::None {
        plan.validate()?;
        ensure_dir(&cfg.output)?;
        copy_container(input_dir, &cfg.output)?;
        (GroundTruth::default(), true)
    } else {
        let originals = match &cfg.reference {
            Some(_) => Some(read_container(cfg.require("reference")?)?.stream.frames),
            None => None,
        };
        let donor = match &cfg.donor {
            Some(p) => Some(read_container(p)?.stream.audio),
            None => None,
        };
        let (out, truth) = simulate(&input.stream, &plan, originals.as_deref(), donor.as_deref())?;
        write_container(&cfg.output, &out, input.sidecar.layout.clone(), input.sidecar.model_id.clone())?;
        (truth, false)
    };
    write_json(&cfg.output.join("ground_truth.json"), &truth)?;
    Ok(json!({ "copied": copied, "ground_truth": truth }))
}

fn generated(cfg: &ExperimentConfig, count: usize, duration: f64, base: u64) -> Vec<AVStream> {
    let frames = (duration * cfg.fps as f64).round() as usize;
    (0..count as u64).map(|i| synthetic_clip(cfg.clip_format(), frames, cfg.seed, base + i)).collect()
}

fn read_dataset(dir: &Path) -> Result<Vec<AVStream>> {
    let paths = crate::container::list_containers(dir)?;
    if paths.is_empty() {
        return Err(Error::Container { path: dir.to_path_buf(), reason: "no containers in dataset".into() });
    }
    paths.iter().map(|p| read_container(p).map(|c| c.stream)).collect()
}

pub fn train_cmd(cfg: &ExperimentConfig) -> Result<Value> {
    cfg.validate()?;
    let (clips, validation) = if cfg.synthetic {
        (
            generated(cfg, cfg.n_clips, cfg.duration, 0),
            generated(cfg, cfg.validation_clips, cfg.validation_duration, VALIDATION_STREAM),
        )
    } else {
        let mut all = read_dataset(cfg.require("dataset")?)?;
        let held = if all.len() > cfg.validation_clips { cfg.validation_clips } else { 0 };
        let validation = all.split_off(all.len() - held);
        (all, validation)
    };
    let mut trainer = match &cfg.checkpoint {
        Some(_) => {
            let mut t = Trainer::resume(Checkpoint::load(cfg.require("checkpoint")?)?)?;
            t.config.iterations = cfg.iterations;
            t.config.extractor_iterations = cfg.extractor_iterations;
            t
        }
        None => Trainer::new(WatermarkModel::new(cfg.model(), cfg.seed)?, cfg.train(), cfg.weights(), cfg.mask()?)?,
    };
    ensure_dir(&cfg.output)?;
    let out = TrainOutput::in_dir(&cfg.output);
    let eval = settings(cfg)?;
    let every = cfg.validate_every;
    let total = trainer.config.total_iterations();
    let mut on_log = |t: &mut Trainer, record: &mut serde_json::Map<String, Value>| -> Result<()> {
        let due = (every > 0 && t.iteration % every == 0) || t.iteration == total;
        if validation.is_empty() || !due {
            return Ok(());
        }
        let (summary, _) = evaluate_clips(&t.model, &validation, &eval, None)?;
        let m = summary.mean;
        for (k, v) in [
            ("val_psnr_db", m.psnr_db),
            ("val_snr_clean_db", m.snr_clean_db),
            ("val_snr_tampered_db", m.snr_tampered_db),
            ("val_feature_ap", m.feature_ap),
            ("val_iou", m.iou),
            ("val_threshold", summary.threshold),
        ] {
            record.insert(k.into(), v.into());
        }
        t.annotations.insert(THRESHOLD_KEY.into(), summary.threshold.into());
        Ok(())
    };
    let started = std::time::Instant::now();
    let history = train(&mut trainer, &clips, Some(&out), &mut on_log)?;
    let elapsed = started.elapsed().as_secs_f64();
    // Inference-only copy; the full checkpoint keeps the optimizer state for resuming.
    let ckpt = trainer.checkpoint();
    Checkpoint { extra: Vec::new(), ..ckpt }.save(&cfg.output.join(WEIGHTS_FILE))?;
    let timing_path = cfg.output.join(TIMING_FILE);
    let before = match &cfg.checkpoint {
        Some(p) => p.parent().map(|d| d.join(TIMING_FILE)).filter(|t| t.exists()).map(|t| read_json::<Timing>(&t)).transpose()?,
        None => None,
    };
    let timing = Timing {
        seconds: before.map_or(0.0, |t| t.seconds) + elapsed,
        iterations: trainer.iteration,
    };
    write_json(&timing_path, &timing)?;
    Ok(json!({
        "iterations": trainer.iteration,
        "steps_run": history.len(),
        "checkpoint": out.checkpoint,
        "metrics_log": out.metrics_log,
        "threshold": trainer.annotations.get(THRESHOLD_KEY),
    }))
}

pub fn evaluate_cmd(cfg: &ExperimentConfig) -> Result<Value> {
    let loaded = load_model(cfg.require("checkpoint")?)?;
    let clips = if cfg.synthetic {
        generated(cfg, cfg.n_clips, cfg.duration, EVALUATION_STREAM)
    } else {
        read_dataset(cfg.require("dataset")?)?
    };
    let threshold = cfg.threshold.or(loaded.threshold);
    let (summary, _) = evaluate_clips(&loaded.model, &clips, &settings(cfg)?, threshold)?;
    ensure_dir(&cfg.output)?;
    write_json(&cfg.output.join("evaluation.json"), &summary)?;
    Ok(json!({ "threshold": summary.threshold, "mean": summary.mean }))
}
