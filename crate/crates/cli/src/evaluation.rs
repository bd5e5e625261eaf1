//! Embed, attack, recover and score a set of clips.

use avguard_core::metrics::{auc, average_precision, interval_iou, log_spectral_distance, psnr, snr, ssim};
use avguard_core::model::WatermarkModel;
use avguard_core::pipeline::{embed, recover, AVStream};
use avguard_core::sfe_localizer::{
    extract_features, raw_waveform_scores, scores_to_intervals_with, similarity_scores_with, TamperInterval, TamperScoreSeries,
};
use avguard_core::tamper_sim::{simulate, GroundTruth, TamperPlan};
use avguard_core::transforms::VisualFrame;
use avguard_core::Result;
use serde::{Deserialize, Serialize};

/// Threshold used when neither the config nor the checkpoint provides one.
pub const FALLBACK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub plan: TamperPlan,
    pub smoothing: usize,
    pub min_run: usize,
}

/// Scores of one attacked clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipScores {
    pub feature: TamperScoreSeries,
    pub raw: TamperScoreSeries,
    pub labels: Vec<bool>,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
    /// Recovery from untouched watermarked frames.
    pub snr_clean_db: f64,
    pub lsd_clean: f64,
    /// Recovery from the attacked frames.
    pub snr_tampered_db: f64,
    pub feature_auc: f64,
    pub feature_ap: f64,
    pub raw_auc: f64,
    pub raw_ap: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub threshold: f64,
    pub plan: TamperPlan,
    pub mean: ClipMetrics,
    pub clips: Vec<ClipMetrics>,
}

pub fn mean_frame_metric(a: &[VisualFrame], b: &[VisualFrame], f: fn(&VisualFrame, &VisualFrame) -> Result<f64>) -> Result<f64> {
    let vals = a.iter().zip(b).map(|(x, y)| f(x, y)).collect::<Result<Vec<_>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
}

/// Tamper likelihood: low similarity means tampered.
pub fn likelihood(series: &TamperScoreSeries) -> Vec<f64> {
    series.scores.iter().map(|s| -s).collect()
}

/// Feature-space similarity between the audio track under test and the recovered audio.
pub fn feature_scores(model: &WatermarkModel<f32>, audio: &[f32], recovered: &[f32], smoothing: usize) -> Result<TamperScoreSeries> {
    let maps = model.spectral_maps();
    let dt = model.config.timestep();
    let a = extract_features(audio, &model.sfe, &maps, dt)?;
    let b = extract_features(recovered, &model.sfe, &maps, dt)?;
    similarity_scores_with(&a, &b, smoothing)
}

struct ClipRun {
    metrics: ClipMetrics,
    scores: ClipScores,
}

fn run_clip(model: &WatermarkModel<f32>, clip: &AVStream, donor: Option<&[f32]>, settings: &EvalSettings, index: usize) -> Result<ClipRun> {
    let art = embed(clip, model)?;
    let wm = &art.watermarked_frames;
    let layout = model.layout();
    let clean = recover(wm, model, &layout)?;
    let marked = AVStream { frames: wm.clone(), ..clip.clone() };
    let plan = TamperPlan { seed: settings.plan.seed.wrapping_add(index as u64), ..settings.plan };
    let (attacked, truth) = simulate(&marked, &plan, Some(&clip.frames), donor)?;
    let rec = recover(&attacked.frames, model, &layout)?;
    let feature = feature_scores(model, &attacked.audio, &rec.audio, settings.smoothing)?;
    let raw = raw_waveform_scores(&attacked.audio, &rec.audio, clip.chunk_len(), model.config.timestep())?;
    let labels = truth.frame_labels(clip.len(), clip.fps);
    let metrics = ClipMetrics {
        psnr_db: mean_frame_metric(wm, &clip.frames, psnr)?,
        ssim: mean_frame_metric(&clip.frames, wm, ssim)?,
        snr_clean_db: snr(&clip.audio, &clean.audio)?,
        lsd_clean: log_spectral_distance(&clip.audio, &clean.audio, model.config.stft())?,
        snr_tampered_db: snr(&clip.audio, &rec.audio)?,
        feature_auc: auc(&likelihood(&feature), &labels)?,
        feature_ap: average_precision(&likelihood(&feature), &labels)?,
        raw_auc: auc(&likelihood(&raw), &labels)?,
        raw_ap: average_precision(&likelihood(&raw), &labels)?,
        iou: 0.0,
    };
    Ok(ClipRun { metrics, scores: ClipScores { feature, raw, labels, truth } })
}

/// Threshold maximizing mean interval IoU over the given clips.
pub fn select_threshold(clips: &[ClipScores], min_run: usize) -> f64 {
    let mut candidates: Vec<f64> = clips.iter().flat_map(|c| c.feature.scores.iter().copied()).collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    if candidates.is_empty() {
        return FALLBACK_THRESHOLD;
    }
    // Cut between neighbours so ties fall on one side.
    let mut cuts = vec![candidates[0] - 1e-6];
    cuts.extend(candidates.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    cuts.push(candidates[candidates.len() - 1] + 1e-6);
    let mut best = (f64::NEG_INFINITY, FALLBACK_THRESHOLD);
    for &t in &cuts {
        let iou: f64 = clips.iter().map(|c| clip_iou(&c.feature, &c.truth.tampered_intervals, t, min_run)).sum::<f64>() / clips.len() as f64;
        if iou > best.0 + 1e-12 {
            best = (iou, t);
        }
    }
    best.1
}

pub fn clip_iou(scores: &TamperScoreSeries, truth: &[TamperInterval], threshold: f64, min_run: usize) -> f64 {
    interval_iou(&scores_to_intervals_with(scores, threshold, min_run), truth)
}

fn mean(clips: &[ClipMetrics]) -> ClipMetrics {
    let n = clips.len().max(1) as f64;
    let avg = |f: fn(&ClipMetrics) -> f64| clips.iter().map(f).sum::<f64>() / n;
    ClipMetrics {
        psnr_db: avg(|c| c.psnr_db),
        ssim: avg(|c| c.ssim),
        snr_clean_db: avg(|c| c.snr_clean_db),
        lsd_clean: avg(|c| c.lsd_clean),
        snr_tampered_db: avg(|c| c.snr_tampered_db),
        feature_auc: avg(|c| c.feature_auc),
        feature_ap: avg(|c| c.feature_ap),
        raw_auc: avg(|c| c.raw_auc),
        raw_ap: avg(|c| c.raw_ap),
        iou: avg(|c| c.iou),
    }
}

/// Per-clip and mean metrics. Swapped audio comes from the next clip in the
/// set (the same clip when there is only one). With `threshold = None` the
/// IoU-optimal threshold on these clips is used (and reported).
pub fn evaluate_clips(
    model: &WatermarkModel<f32>,
    clips: &[AVStream],
    settings: &EvalSettings,
    threshold: Option<f64>,
) -> Result<(EvaluationSummary, Vec<ClipScores>)> {
    let runs = clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let donor = (clips.len() > 1).then(|| clips[(i + 1) % clips.len()].audio.as_slice());
            run_clip(model, c, donor, settings, i)
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<ClipScores> = runs.iter().map(|r| r.scores.clone()).collect();
    let threshold = threshold.unwrap_or_else(|| select_threshold(&scores, settings.min_run));
    let per_clip: Vec<ClipMetrics> = runs
        .iter()
        .map(|r| ClipMetrics {
            iou: clip_iou(&r.scores.feature, &r.scores.truth.tampered_intervals, threshold, settings.min_run),
            ..r.metrics
        })
        .collect();
    let summary = EvaluationSummary { threshold, plan: settings.plan, mean: mean(&per_clip), clips: per_clip };
    Ok((summary, scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(scores: Vec<f64>) -> TamperScoreSeries {
        TamperScoreSeries { scores, timestep_duration: 0.04 }
    }

    #[test]
    fn threshold_selection_finds_the_separating_cut() {
        let truth = GroundTruth {
            tampered_intervals: vec![TamperInterval { t_start: 0.08, t_end: 0.2 }],
            tampered_frame_indices: vec![2, 3, 4],
        };
        let clip = ClipScores {
            feature: series(vec![0.9, 0.8, 0.1, 0.2, 0.15, 0.85, 0.95]),
            raw: series(vec![0.0; 7]),
            labels: vec![false, false, true, true, true, false, false],
            truth,
        };
        let t = select_threshold(&[clip.clone()], 2);
        assert!(t > 0.2 && t < 0.8, "{t}");
        assert!((clip_iou(&clip.feature, &clip.truth.tampered_intervals, t, 2) - 1.0).abs() < 1e-12);
    }
}
