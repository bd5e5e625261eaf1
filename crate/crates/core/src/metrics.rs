//! Audio, visual and localization metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sfe_localizer::TamperInterval;
use crate::transforms::{stft_chunk, AudioChunk, StftParams, VisualFrame};

/// Reported instead of +inf for error-free estimates.
pub const DB_CAP: f64 = 200.0;
/// Magnitude floor for log-spectral distance, in dB.
pub const LSD_FLOOR_DB: f64 = -80.0;

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lsd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Alignment(format!("inputs have {a} and {b} elements")));
    }
    Ok(())
}

fn db_ratio(signal: f64, noise: f64) -> f64 {
    if noise == 0.0 {
        return DB_CAP;
    }
    (10.0 * (signal / noise).log10()).min(DB_CAP)
}

/// `10 log10(|ref|^2 / |ref - est|^2)`, capped at [`DB_CAP`].
pub fn snr(reference: &[f32], estimate: &[f32]) -> Result<f64> {
    same_len(reference.len(), estimate.len())?;
    let signal: f64 = reference.iter().map(|&x| (x as f64).powi(2)).sum();
    if signal == 0.0 {
        return Err(Error::UndefinedMetric("SNR against an all-zero reference".into()));
    }
    let noise: f64 = reference.iter().zip(estimate).map(|(&r, &e)| (r as f64 - e as f64).powi(2)).sum();
    Ok(db_ratio(signal, noise))
}

fn check_frames(a: &VisualFrame, b: &VisualFrame) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Dimension(format!(
            "frames {}x{} and {}x{} differ",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Peak 1.0.
pub fn psnr(reference: &VisualFrame, estimate: &VisualFrame) -> Result<f64> {
    check_frames(reference, estimate)?;
    let n = reference.pixels().len() as f64;
    let mse: f64 =
        reference.pixels().iter().zip(estimate.pixels()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / n;
    Ok(db_ratio(1.0, mse))
}

fn gaussian_taps() -> Vec<f64> {
    let raw: Vec<f64> = (0..=2 * SSIM_RADIUS)
        .map(|i| {
            let d = i as f64 - SSIM_RADIUS as f64;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' Gaussian filtering of an `h x w` plane.
fn blur_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ho, wo) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean SSIM over every 11x11 Gaussian window (sigma 1.5) lying fully inside
/// the frame, averaged over the three channels.
pub fn ssim(reference: &VisualFrame, estimate: &VisualFrame) -> Result<f64> {
    check_frames(reference, estimate)?;
    let (h, w) = (reference.height(), reference.width());
    let k = 2 * SSIM_RADIUS + 1;
    if h < k || w < k {
        return Err(Error::Dimension(format!("SSIM needs frames of at least {k}x{k}, got {h}x{w}")));
    }
    let taps = gaussian_taps();
    let hw = h * w;
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = reference.pixels()[c * hw..(c + 1) * hw].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = estimate.pixels()[c * hw..(c + 1) * hw].iter().map(|&v| v as f64).collect();
        let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
        let mx = blur_valid(&x, h, w, &taps);
        let my = blur_valid(&y, h, w, &taps);
        let sxx = blur_valid(&prod(&x, &x), h, w, &taps);
        let syy = blur_valid(&prod(&y, &y), h, w, &taps);
        let sxy = blur_valid(&prod(&x, &y), h, w, &taps);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (vx, vy, cxy) = (sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i], sxy[i] - mx[i] * my[i]);
            acc += ((2.0 * mx[i] * my[i] + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx[i] * mx[i] + my[i] * my[i] + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / 3.0)
}

/// Sorted, disjoint union of the intervals.
pub fn merge_intervals(intervals: &[TamperInterval]) -> Vec<TamperInterval> {
    let mut v: Vec<TamperInterval> = intervals.iter().copied().filter(|i| i.t_end > i.t_start).collect();
    v.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
    let mut out: Vec<TamperInterval> = Vec::with_capacity(v.len());
    for iv in v {
        match out.last_mut() {
            Some(last) if iv.t_start <= last.t_end => last.t_end = last.t_end.max(iv.t_end),
            _ => out.push(iv),
        }
    }
    out
}

fn total_length(v: &[TamperInterval]) -> f64 {
    v.iter().map(|i| i.duration()).sum()
}

/// Length of the intersection over length of the union of the two interval
/// sets. Two empty sets agree perfectly (1.0).
pub fn interval_iou(predicted: &[TamperInterval], truth: &[TamperInterval]) -> f64 {
    let p = merge_intervals(predicted);
    let t = merge_intervals(truth);
    let mut inter = 0.0;
    let (mut i, mut j) = (0, 0);
    while i < p.len() && j < t.len() {
        let lo = p[i].t_start.max(t[j].t_start);
        let hi = p[i].t_end.min(t[j].t_end);
        if hi > lo {
            inter += hi - lo;
        }
        if p[i].t_end < t[j].t_end {
            i += 1;
        } else {
            j += 1;
        }
    }
    let union = total_length(&p) + total_length(&t) - inter;
    if union <= 0.0 {
        return 1.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

fn check_ranking(scores: &[f64], labels: &[bool]) -> Result<()> {
    same_len(scores.len(), labels.len())?;
    if scores.is_empty() {
        return Err(Error::Empty("no scores to rank".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    Ok(())
}

/// Average precision of `likelihood` (higher means more likely positive):
/// the sum over distinct thresholds, in descending order, of the recall
/// increment times the precision at that threshold.
///
/// With no positive labels there is nothing to retrieve and the result is 0.
pub fn average_precision(likelihood: &[f64], labels: &[bool]) -> Result<f64> {
    check_ranking(likelihood, labels)?;
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Ok(0.0);
    }
    let mut order: Vec<usize> = (0..likelihood.len()).collect();
    order.sort_by(|&a, &b| likelihood[b].total_cmp(&likelihood[a]));
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut k = 0;
    while k < order.len() {
        let level = likelihood[order[k]];
        while k < order.len() && likelihood[order[k]] == level {
            tp += labels[order[k]] as usize;
            seen += 1;
            k += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(ap)
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half (Mann-Whitney U / (n_pos * n_neg)).
pub fn auc(likelihood: &[f64], labels: &[bool]) -> Result<f64> {
    check_ranking(likelihood, labels)?;
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("AUC needs both tampered and clean timesteps".into()));
    }
    let mut order: Vec<usize> = (0..likelihood.len()).collect();
    order.sort_by(|&a, &b| likelihood[a].total_cmp(&likelihood[b]));
    // midranks, 1-based
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < order.len() {
        let mut end = k;
        while end + 1 < order.len() && likelihood[order[end + 1]] == likelihood[order[k]] {
            end += 1;
        }
        let mid = (k + end) as f64 / 2.0 + 1.0;
        for &i in &order[k..=end] {
            if labels[i] {
                rank_sum += mid;
            }
        }
        k = end + 1;
    }
    let u = rank_sum - (positives * (positives + 1)) as f64 / 2.0;
    Ok(u / (positives * negatives) as f64)
}

fn db_spectrum(signal: &[f32], params: StftParams) -> Result<(usize, usize, Vec<f64>)> {
    let spec = stft_chunk(&AudioChunk::new(signal.to_vec(), 0), params)?;
    let floor = 10f64.powf(LSD_FLOOR_DB / 10.0);
    let db = spec
        .re
        .iter()
        .zip(&spec.im)
        .map(|(&r, &i)| 10.0 * ((r as f64).powi(2) + (i as f64).powi(2)).max(floor).log10())
        .collect();
    Ok((spec.bins, spec.frames, db))
}

/// Mean over STFT frames of the RMS (over bins) difference of the dB power
/// spectra, each floored at [`LSD_FLOOR_DB`].
pub fn log_spectral_distance(reference: &[f32], estimate: &[f32], params: StftParams) -> Result<f64> {
    same_len(reference.len(), estimate.len())?;
    let (bins, frames, a) = db_spectrum(reference, params)?;
    let (_, _, b) = db_spectrum(estimate, params)?;
    let mut total = 0.0;
    for f in 0..frames {
        let ms: f64 = (0..bins).map(|k| (a[k * frames + f] - b[k * frames + f]).powi(2)).sum::<f64>() / bins as f64;
        total += ms.sqrt();
    }
    Ok(total / frames as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn iv(a: f64, b: f64) -> TamperInterval {
        TamperInterval { t_start: a, t_end: b }
    }

    #[test]
    fn snr_cases() {
        let r: Vec<f32> = (0..100).map(|i| (i as f32 * 0.3).sin()).collect();
        assert_eq!(snr(&r, &r).unwrap(), DB_CAP);
        assert!(matches!(snr(&[0.0; 4], &[1.0; 4]), Err(Error::UndefinedMetric(_))));
        assert!(snr(&r, &r[..50]).is_err());
        for eps in [0.1f64, 0.01] {
            let est: Vec<f32> = r.iter().map(|&x| x * (1.0 + eps as f32)).collect();
            let got = snr(&r, &est).unwrap();
            assert!((got - (-20.0 * eps.log10())).abs() < 1e-4, "{got}");
        }
    }

    #[test]
    fn snr_noise_at_one_percent_power() {
        // alternating +-a noise with a^2 = 0.01 * mean(ref^2)
        let r = vec![1.0f32; 64];
        let est: Vec<f32> = r.iter().enumerate().map(|(i, &x)| x + if i % 2 == 0 { 0.1 } else { -0.1 }).collect();
        assert!((snr(&r, &est).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn snr_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r: Vec<f32> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e: Vec<f32> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..32 {
            num += (r[i] as f64) * (r[i] as f64);
            den += (r[i] as f64 - e[i] as f64) * (r[i] as f64 - e[i] as f64);
        }
        assert!((snr(&r, &e).unwrap() - 10.0 * (num / den).log10()).abs() < 1e-9);
    }

    #[test]
    fn psnr_and_ssim_basic() {
        let a = VisualFrame::filled(16, 16, 0.5).unwrap();
        let b = VisualFrame::filled(16, 16, 0.6).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), DB_CAP);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let small = VisualFrame::filled(8, 8, 0.5).unwrap();
        assert!(ssim(&small, &small).is_err());
        assert!(psnr(&a, &small).is_err());
    }

    fn ssim_oracle(a: &VisualFrame, b: &VisualFrame) -> f64 {
        let (h, w) = (a.height(), a.width());
        let k = 11;
        let g: Vec<f64> = (0..k).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
        let gs: f64 = g.iter().sum();
        let mut total = 0.0;
        for c in 0..3 {
            let px = |f: &VisualFrame, y: usize, x: usize| f.pixels()[c * h * w + y * w + x] as f64;
            let mut sum = 0.0;
            let mut count = 0;
            for y0 in 0..=h - k {
                for x0 in 0..=w - k {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let wt = g[i] * g[j] / (gs * gs);
                            let (p, q) = (px(a, y0 + i, x0 + j), px(b, y0 + i, x0 + j));
                            mx += wt * p;
                            my += wt * q;
                            sxx += wt * p * p;
                            syy += wt * q * q;
                            sxy += wt * p * q;
                        }
                    }
                    let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    let c1 = 1e-4;
                    let c2 = 9e-4;
                    sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
            total += sum / count as f64;
        }
        total / 3.0
    }

    #[test]
    fn ssim_matches_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = VisualFrame::new(16, 20, (0..3 * 320).map(|_| rng.random::<f32>()).collect()).unwrap();
        let b = VisualFrame::new(
            16,
            20,
            a.pixels().iter().map(|&p| (p + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0)).collect(),
        )
        .unwrap();
        let got = ssim(&a, &b).unwrap();
        assert!((got - ssim_oracle(&a, &b)).abs() < 1e-6);
        assert!((-1.0..=1.0).contains(&got));
    }

    #[test]
    fn iou_cases() {
        assert!((interval_iou(&[iv(0.0, 1.0)], &[iv(0.5, 1.5)]) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(interval_iou(&[iv(0.2, 0.4)], &[iv(0.2, 0.4)]), 1.0);
        assert_eq!(interval_iou(&[], &[]), 1.0);
        assert_eq!(interval_iou(&[iv(0.0, 1.0)], &[]), 0.0);
    }

    #[test]
    fn iou_matches_rasterized_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let mut draw = || {
                (0..rng.random_range(0..4))
                    .map(|_| {
                        let a = rng.random_range(0..900) as f64 / 1000.0;
                        iv(a, a + rng.random_range(1..300) as f64 / 1000.0)
                    })
                    .collect::<Vec<_>>()
            };
            let (p, t) = (draw(), draw());
            let inside = |v: &[TamperInterval], ms: usize| {
                let c = (ms as f64 + 0.5) / 1000.0;
                v.iter().any(|i| i.t_start <= c && c < i.t_end)
            };
            let (mut inter, mut union) = (0, 0);
            for ms in 0..1300 {
                let (a, b) = (inside(&p, ms), inside(&t, ms));
                inter += (a && b) as usize;
                union += (a || b) as usize;
            }
            let want = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            let got = interval_iou(&p, &t);
            assert!((got - want).abs() < 1e-6, "{p:?} {t:?}: {got} vs {want}");
            assert!((got - interval_iou(&t, &p)).abs() < 1e-12);
        }
    }

    fn auc_oracle(s: &[f64], l: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] && !l[j] {
                    den += 1.0;
                    num += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    /// Precision at each positive, averaged over positives, where tied
    /// scores are ranked together (all members of a tie group share the
    /// group's final precision).
    fn ap_oracle(s: &[f64], l: &[bool]) -> f64 {
        let pos = l.iter().filter(|&&x| x).count() as f64;
        let mut total = 0.0;
        for i in 0..s.len() {
            if !l[i] {
                continue;
            }
            let above = (0..s.len()).filter(|&j| s[j] >= s[i]).count() as f64;
            let hits = (0..s.len()).filter(|&j| s[j] >= s[i] && l[j]).count() as f64;
            total += hits / above;
        }
        total / pos
    }

    #[test]
    fn ranking_basic_cases() {
        let l = [true, true, false, false];
        assert_eq!(average_precision(&[0.9, 0.8, 0.2, 0.1], &l).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &l).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
        assert_eq!(average_precision(&[0.1, 0.2], &[true, true]).unwrap(), 1.0);
    }

    #[test]
    fn ranking_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for round in 0..200 {
            let n = rng.random_range(2..=32);
            // coarse values so ties occur
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
            let mut l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            l[0] = true;
            l[1] = false;
            let a = auc(&s, &l).unwrap();
            assert!((a - auc_oracle(&s, &l)).abs() < 1e-12, "round {round}");
            let p = average_precision(&s, &l).unwrap();
            assert!((p - ap_oracle(&s, &l)).abs() < 1e-12, "round {round}: {p} vs {}", ap_oracle(&s, &l));
            // strictly monotone transform
            let t: Vec<f64> = s.iter().map(|&v| (3.0 * v).exp() - 7.0).collect();
            assert!((auc(&t, &l).unwrap() - a).abs() < 1e-12);
        }
    }

    #[test]
    fn lsd_cases() {
        let params = StftParams::new(30, 16);
        let r: Vec<f32> = (0..200).map(|i| (i as f32 * 0.4).sin() * 0.5).collect();
        assert_eq!(log_spectral_distance(&r, &r, params).unwrap(), 0.0);
        let silent = vec![0.0f32; 200];
        let d = log_spectral_distance(&r, &silent, params).unwrap();
        assert!(d.is_finite() && d > 0.0);
        // bounded by the distance between the loudest bin and the floor
        let (_, _, db) = db_spectrum(&r, params).unwrap();
        let peak = db.iter().cloned().fold(f64::MIN, f64::max);
        assert!(d <= peak - LSD_FLOOR_DB);
    }

    #[test]
    fn lsd_matches_direct_formula() {
        let params = StftParams::new(16, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f32> = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
        // direct DFT of each reflect-padded, Hann-windowed frame
        let spectrum = |x: &[f32]| {
            let n = 16;
            let pad = 8isize;
            let frames = 1 + 48 / 8;
            let mut out = vec![vec![0.0; 9]; frames];
            for (f, row) in out.iter_mut().enumerate() {
                for (k, cell) in row.iter_mut().enumerate() {
                    let (mut re, mut im) = (0.0, 0.0);
                    for t in 0..n {
                        let mut idx = (f * 8) as isize + t as isize - pad;
                        if idx < 0 {
                            idx = -idx;
                        }
                        if idx > 47 {
                            idx = 94 - idx;
                        }
                        let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * t as f64 / n as f64).cos();
                        let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                        re += x[idx as usize] as f64 * w * ang.cos();
                        im += x[idx as usize] as f64 * w * ang.sin();
                    }
                    *cell = 10.0 * (re * re + im * im).max(1e-8).log10();
                }
            }
            out
        };
        let (sa, sb) = (spectrum(&a), spectrum(&b));
        let want: f64 = sa
            .iter()
            .zip(&sb)
            .map(|(ra, rb)| (ra.iter().zip(rb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 9.0).sqrt())
            .sum::<f64>()
            / sa.len() as f64;
        assert!((log_spectral_distance(&a, &b, params).unwrap() - want).abs() < 1e-3);
    }
}
