//! RR intervals, heart rate, time-domain HRV and premature-beat detection.

use crate::{Error, Result};

/// Default ratio below the local mean RR at which a beat counts as premature.
pub const PREMATURITY_RATIO: f64 = 0.85;
/// Number of neighbouring intervals in the local RR mean.
pub const LOCAL_WINDOW: usize = 8;

/// `rr[i] = (peaks[i+1] - peaks[i]) * 1000 / fs`, in ms.
pub fn rr_intervals(peaks: &[usize], fs: u32) -> Result<Vec<f64>> {
    if peaks.len() < 2 {
        return Err(Error::Insufficient(format!(
            "RR intervals need at least 2 beats, got {}",
            peaks.len()
        )));
    }
    Ok(peaks
        .windows(2)
        .map(|w| (w[1] as f64 - w[0] as f64) * 1000.0 / fs as f64)
        .collect())
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// `round(60000 / mean(rr))`.
pub fn heart_rate(rr: &[f64]) -> Result<u32> {
    if rr.is_empty() {
        return Err(Error::Insufficient("heart rate needs at least 1 interval".into()));
    }
    Ok(heart_rate_from_mean(mean(rr)))
}

pub fn heart_rate_from_mean(mean_rr_ms: f64) -> u32 {
    (60000.0 / mean_rr_ms).round() as u32
}

/// Quantile with linear interpolation between closest ranks.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hrv {
    pub rmssd_ms: f64,
    /// Population standard deviation.
    pub sdnn_ms: f64,
    pub rr_iqr_ms: f64,
}

pub fn hrv(rr: &[f64]) -> Result<Hrv> {
    if rr.len() < 2 {
        return Err(Error::Insufficient(format!(
            "HRV needs at least 2 intervals, got {}",
            rr.len()
        )));
    }
    let diffs: Vec<f64> = rr.windows(2).map(|w| w[1] - w[0]).collect();
    let rmssd = (diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt();
    let m = mean(rr);
    let sdnn = (rr.iter().map(|r| (r - m).powi(2)).sum::<f64>() / rr.len() as f64).sqrt();
    let mut sorted = rr.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    Ok(Hrv {
        rmssd_ms: rmssd,
        sdnn_ms: sdnn,
        rr_iqr_ms: iqr.max(0.0),
    })
}

/// Mean of up to [`LOCAL_WINDOW`] intervals centred on `j`, excluding `j`.
fn local_mean(rr: &[f64], j: usize) -> f64 {
    let half = LOCAL_WINDOW / 2;
    let lo = j.saturating_sub(half);
    let hi = (j + half + 1).min(rr.len());
    let (sum, count) = (lo..hi)
        .filter(|&k| k != j)
        .fold((0.0, 0usize), |(s, c), k| (s + rr[k], c + 1));
    sum / count as f64
}

/// 1-based indices of premature beats.
///
/// Beat `i` is premature when the interval ending at it is shorter than
/// `ratio` times the local mean and the interval after it is longer than the
/// local mean (a compensatory pause).
pub fn detect_pacs(rr: &[f64], ratio: f64) -> Result<Vec<usize>> {
    if rr.len() < 4 {
        return Err(Error::Insufficient(format!(
            "PAC detection needs at least 4 intervals, got {}",
            rr.len()
        )));
    }
    Ok((0..rr.len() - 1)
        .filter(|&j| {
            let m = local_mean(rr, j);
            rr[j] < ratio * m && rr[j + 1] > m
        })
        // Interval j (0-based) ends at beat j + 2 (1-based).
        .map(|j| j + 2)
        .collect())
}

/// Rate-corrected QT (Bazett): `qt / sqrt(rr in seconds)`.
pub fn qtc_bazett(qt_ms: f64, mean_rr_ms: f64) -> f64 {
    qt_ms / (mean_rr_ms / 1000.0).sqrt()
}
