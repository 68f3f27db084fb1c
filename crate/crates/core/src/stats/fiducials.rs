//! Window-based wave delineation around detected R peaks.
//!
//! A wave's onset/offset is the outermost point where `|x - baseline|`
//! still reaches 5% of the wave's peak magnitude, interpolated between
//! samples. The baseline of each beat is the median of its flattest samples.

use serde::{Deserialize, Serialize};

use super::rpeak::median;

const EXTENT_FRACTION: f64 = 0.05;
/// Minimum P/T magnitude accepted as a wave, in mV.
const MIN_WAVE_MV: f64 = 0.02;

/// Per-beat fiducial points as fractional sample positions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BeatFiducials {
    pub p_onset: Option<f64>,
    pub p_peak: Option<f64>,
    pub p_offset: Option<f64>,
    pub qrs_onset: Option<f64>,
    pub r_peak: usize,
    pub qrs_offset: Option<f64>,
    pub t_peak: Option<f64>,
    pub t_offset: Option<f64>,
    pub p_amp_mv: Option<f64>,
    pub qrs_amp_mv: Option<f64>,
    pub t_amp_mv: Option<f64>,
}

impl BeatFiducials {
    /// Whether present points respect
    /// `p_onset < p_offset <= qrs_onset < r_peak < qrs_offset < t_offset`.
    pub fn is_ordered(&self) -> bool {
        let r = self.r_peak as f64;
        let chain = [
            self.p_onset,
            self.p_offset,
            self.qrs_onset,
            Some(r),
            self.qrs_offset,
            self.t_offset,
        ];
        let present: Vec<f64> = chain.iter().flatten().copied().collect();
        let strict = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => a < b,
            _ => true,
        };
        present.windows(2).all(|w| w[0] <= w[1])
            && strict(self.p_onset, self.p_offset)
            && strict(self.qrs_onset, Some(r))
            && strict(Some(r), self.qrs_offset)
            && strict(self.qrs_offset, self.t_offset)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Fiducials {
    pub beats: Vec<BeatFiducials>,
}

fn ms(fs: f64, v: f64) -> usize {
    (v * fs / 1000.0).round() as usize
}

/// Walk from `start` towards `limit` (exclusive of neither) while the
/// deviation stays at or above `thr`, tolerating dips shorter than `gap`
/// samples. Returns the fractional crossing, or `None` when the wave is
/// still above threshold at the limit.
fn walk(x: &[f64], base: f64, start: usize, limit: usize, thr: f64, gap: usize, forward: bool) -> Option<f64> {
    if (forward && limit < start) || (!forward && limit > start) || start >= x.len() {
        return None;
    }
    let dev = |k: usize| (x[k] - base).abs();
    let mut last_above = start;
    let mut k = start;
    loop {
        if k == limit {
            // Still inside the wave at the boundary: extent unknown.
            if k.abs_diff(last_above) <= gap {
                return None;
            }
            break;
        }
        k = if forward { k + 1 } else { k - 1 };
        if dev(k) >= thr {
            last_above = k;
        } else if k.abs_diff(last_above) > gap {
            break;
        }
    }
    let outside = if forward { last_above + 1 } else { last_above.checked_sub(1)? };
    if outside >= x.len() {
        return None;
    }
    let (a, b) = (dev(last_above), dev(outside));
    if a <= b {
        return Some(last_above as f64);
    }
    let frac = ((a - thr) / (a - b)).clamp(0.0, 1.0);
    Some(if forward {
        last_above as f64 + frac
    } else {
        last_above as f64 - frac
    })
}

fn argmax_dev(x: &[f64], base: f64, lo: usize, hi: usize) -> Option<usize> {
    (lo..hi).max_by(|&a, &b| (x[a] - base).abs().total_cmp(&(x[b] - base).abs()))
}

/// Median of the flattest 30% of samples in `[lo, hi)`.
fn beat_baseline(x: &[f64], lo: usize, hi: usize) -> f64 {
    if hi <= lo + 2 {
        return 0.0;
    }
    let mut slopes: Vec<(f64, usize)> = (lo + 1..hi - 1)
        .map(|k| ((x[k + 1] - x[k - 1]).abs(), k))
        .collect();
    slopes.sort_by(|a, b| a.0.total_cmp(&b.0));
    let keep = (slopes.len() * 3 / 10).max(1);
    let mut vals: Vec<f64> = slopes[..keep].iter().map(|&(_, k)| x[k]).collect();
    median(&mut vals)
}

/// Delineate P, QRS and T around each R peak.
pub fn fiducials(trace: &[f64], fs: u32, r_peaks: &[usize]) -> Fiducials {
    let fsf = fs as f64;
    let n = trace.len();
    let gap = ms(fsf, 20.0);
    let mut beats: Vec<BeatFiducials> = Vec::with_capacity(r_peaks.len());
    let typical_rr = if r_peaks.len() >= 2 {
        (r_peaks[r_peaks.len() - 1] - r_peaks[0]) as f64 / (r_peaks.len() - 1) as f64
    } else {
        fsf
    };

    for (i, &r) in r_peaks.iter().enumerate() {
        if r >= n {
            continue;
        }
        let prev = i.checked_sub(1).map(|j| r_peaks[j]);
        let next = r_peaks.get(i + 1).copied();
        let half_back = prev.map_or(0.5 * typical_rr, |p| 0.5 * (r - p) as f64);
        let half_fwd = next.map_or(0.5 * typical_rr, |q| 0.5 * (q - r) as f64);
        let lo = (r as f64 - half_back).max(0.0) as usize;
        let hi = ((r as f64 + half_fwd) as usize + 1).min(n);
        let base = beat_baseline(trace, lo, hi);

        let mut b = BeatFiducials {
            r_peak: r,
            ..Default::default()
        };

        // QRS.
        let reach = ms(fsf, 60.0);
        let qlo = r.saturating_sub(reach);
        let qhi = (r + reach + 1).min(n);
        let qpeak = argmax_dev(trace, base, qlo, qhi).unwrap_or(r);
        let qmag = (trace[qpeak] - base).abs();
        if qmag <= 0.0 {
            beats.push(b);
            continue;
        }
        let qthr = EXTENT_FRACTION * qmag;
        let limit = ms(fsf, 150.0);
        b.qrs_onset = walk(trace, base, r, r.saturating_sub(limit), qthr, gap, false);
        b.qrs_offset = walk(trace, base, r, (r + limit).min(n - 1), qthr, gap, true);
        if let (Some(on), Some(off)) = (b.qrs_onset, b.qrs_offset) {
            let (a, z) = (on.ceil() as usize, (off.floor() as usize + 1).min(n));
            b.qrs_amp_mv = argmax_dev(trace, base, a, z).map(|k| trace[k] - base);
        }

        // P wave: between the previous T (or beat) and the QRS onset.
        if let Some(qon) = b.qrs_onset {
            let qon_i = qon.floor() as usize;
            let mut start = qon_i.saturating_sub(ms(fsf, 400.0));
            if let Some(prev_b) = beats.last() {
                let bound = prev_b.t_offset.unwrap_or(prev_b.r_peak as f64 + 0.5 * (r - prev_b.r_peak) as f64);
                start = start.max(bound.ceil() as usize + 1);
            }
            let end = qon_i.saturating_sub(ms(fsf, 8.0));
            if end > start + 2 {
                if let Some(pk) = argmax_dev(trace, base, start, end) {
                    let amp = trace[pk] - base;
                    let floor = MIN_WAVE_MV.max(0.04 * b.qrs_amp_mv.map_or(0.0, f64::abs));
                    if amp.abs() >= floor {
                        let thr = EXTENT_FRACTION * amp.abs();
                        let on = walk(trace, base, pk, start.saturating_sub(ms(fsf, 60.0)), thr, 0, false);
                        let off = walk(trace, base, pk, qon_i, thr, 0, true);
                        if let (Some(on), Some(off)) = (on, off) {
                            if on < off && off <= qon {
                                b.p_onset = Some(on);
                                b.p_offset = Some(off);
                                b.p_peak = Some(pk as f64);
                                b.p_amp_mv = Some(amp);
                            }
                        }
                    }
                }
            }
        }

        // T wave.
        if let Some(qoff) = b.qrs_offset {
            let start = (qoff.ceil() as usize + ms(fsf, 40.0)).min(n);
            let span_end = match next {
                Some(q) => r + ((q - r) as f64 * 0.65) as usize,
                None => n,
            };
            let end = (qoff as usize + ms(fsf, 500.0)).min(span_end).min(n);
            if end > start + 2 {
                if let Some(pk) = argmax_dev(trace, base, start, end) {
                    let amp = trace[pk] - base;
                    if amp.abs() >= MIN_WAVE_MV {
                        let thr = EXTENT_FRACTION * amp.abs();
                        let bound = match next {
                            Some(q) => q.saturating_sub(ms(fsf, 100.0)).max(pk + 1),
                            None => n - 1,
                        };
                        if let Some(off) = walk(trace, base, pk, bound.min(n - 1), thr, 0, true) {
                            b.t_offset = Some(off);
                            b.t_peak = Some(pk as f64);
                            b.t_amp_mv = Some(amp);
                        }
                    }
                }
            }
        }

        if !b.is_ordered() {
            b.p_onset = None;
            b.p_offset = None;
            b.p_peak = None;
            b.p_amp_mv = None;
            if !b.is_ordered() {
                b.t_offset = None;
                b.t_peak = None;
                b.t_amp_mv = None;
            }
        }
        beats.push(b);
    }
    Fiducials { beats }
}

/// Per-beat intervals in ms; `None` where a bounding point is absent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BeatIntervals {
    pub pr_ms: Option<f64>,
    pub p_dur_ms: Option<f64>,
    pub qrs_ms: Option<f64>,
    pub qt_ms: Option<f64>,
}

pub fn beat_intervals(b: &BeatFiducials, fs: u32) -> BeatIntervals {
    let to_ms = |d: f64| d * 1000.0 / fs as f64;
    let diff = |a: Option<f64>, z: Option<f64>| a.zip(z).map(|(a, z)| to_ms(z - a));
    BeatIntervals {
        pr_ms: diff(b.p_onset, b.qrs_onset),
        p_dur_ms: diff(b.p_onset, b.p_offset),
        qrs_ms: diff(b.qrs_onset, b.qrs_offset),
        qt_ms: diff(b.qrs_onset, b.t_offset),
    }
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, count) = values.flatten().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Beat-averaged intervals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Intervals {
    pub pr_ms: Option<f64>,
    pub p_dur_ms: Option<f64>,
    pub qrs_ms: Option<f64>,
    pub qt_ms: Option<f64>,
    pub qtc_ms: Option<f64>,
}

pub fn intervals(fid: &Fiducials, fs: u32, mean_rr_ms: Option<f64>) -> Intervals {
    let per: Vec<BeatIntervals> = fid.beats.iter().map(|b| beat_intervals(b, fs)).collect();
    let qt = mean_present(per.iter().map(|p| p.qt_ms));
    Intervals {
        pr_ms: mean_present(per.iter().map(|p| p.pr_ms)),
        p_dur_ms: mean_present(per.iter().map(|p| p.p_dur_ms)),
        qrs_ms: mean_present(per.iter().map(|p| p.qrs_ms)),
        qtc_ms: qt.zip(mean_rr_ms).map(|(qt, rr)| super::hrv::qtc_bazett(qt, rr)),
        qt_ms: qt,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Amplitudes {
    pub p_mv: Option<f64>,
    pub qrs_mv: Option<f64>,
    pub t_mv: Option<f64>,
}

/// Beat-averaged signed amplitudes.
pub fn amplitudes(fid: &Fiducials) -> Amplitudes {
    Amplitudes {
        p_mv: mean_present(fid.beats.iter().map(|b| b.p_amp_mv)),
        qrs_mv: mean_present(fid.beats.iter().map(|b| b.qrs_amp_mv)),
        t_mv: mean_present(fid.beats.iter().map(|b| b.t_amp_mv)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{synth_ecg_with_truth, Rhythm, SynthSpec, WaveParams};
    use crate::stats::detect_r_peaks;

    fn measure(spec: &SynthSpec) -> (Intervals, Amplitudes, crate::signal::SynthTruth) {
        let (rec, truth) = synth_ecg_with_truth(spec, 0).unwrap();
        let peaks = detect_r_peaks(rec.lead(0), rec.fs()).unwrap();
        let f = fiducials(rec.lead(0), rec.fs(), &peaks);
        assert!(f.beats.iter().all(|b| b.is_ordered()));
        let rr = crate::stats::rr_intervals(&peaks, rec.fs()).unwrap();
        (intervals(&f, rec.fs(), Some(crate::stats::hrv::mean(&rr))), amplitudes(&f), truth)
    }

    #[test]
    fn configured_pr_is_recovered() {
        let (iv, amp, _) = measure(&SynthSpec {
            duration_s: 20.0,
            ..Default::default()
        });
        assert!((iv.pr_ms.unwrap() - 160.0).abs() <= 12.0, "{:?}", iv);
        assert!((iv.qrs_ms.unwrap() - 90.0).abs() <= 12.0, "{:?}", iv);
        assert!((iv.qt_ms.unwrap() - 380.0).abs() <= 15.0, "{:?}", iv);
        assert!((iv.p_dur_ms.unwrap() - 100.0).abs() <= 12.0, "{:?}", iv);
        assert!((amp.qrs_mv.unwrap() - 1.0).abs() < 0.05);
        assert!((amp.p_mv.unwrap() - 0.15).abs() < 0.02);
    }

    #[test]
    fn afib_has_no_p_wave() {
        let (iv, amp, _) = measure(&SynthSpec {
            duration_s: 20.0,
            rhythm_schedule: vec![(0.0, Rhythm::Afib)],
            ..Default::default()
        });
        assert_eq!(iv.pr_ms, None);
        assert_eq!(amp.p_mv, None);
        assert!(iv.qrs_ms.is_some());
    }

    #[test]
    fn negative_lead_keeps_sign() {
        let (_, amp, _) = measure(&SynthSpec {
            leads: vec![crate::signal::LeadSpec::new("V1", WaveParams::default().scaled(-1.5))],
            ..Default::default()
        });
        assert!(amp.qrs_mv.unwrap() < -1.4);
    }

    #[test]
    fn flat_trace_yields_absent_fields() {
        let f = fiducials(&vec![0.0; 2560], 256, &[500, 1000]);
        assert!(f.beats.iter().all(|b| b.qrs_onset.is_none() && b.p_onset.is_none()));
        let iv = intervals(&f, 256, Some(1000.0));
        assert_eq!(iv, Intervals::default());
    }
}
