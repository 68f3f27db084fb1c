//! Pan-Tompkins style QRS detection: 5-15 Hz band-pass, derivative,
//! squaring, moving-window integration and adaptive thresholds with a
//! 200 ms refractory period.

use crate::preprocess::{Biquad, Sos};
use crate::{Error, Result};

const REFRACTORY_S: f64 = 0.2;
const INTEGRATION_S: f64 = 0.15;
const REFINE_S: f64 = 0.075;

fn moving_average_centered(x: &[f64], width: usize) -> Vec<f64> {
    let n = x.len();
    let half = width / 2;
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for &v in x {
        prefix.push(prefix.last().unwrap() + v);
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Sample indices of R peaks in `trace`, strictly increasing and at least
/// 200 ms apart.
pub fn detect_r_peaks(trace: &[f64], fs: u32) -> Result<Vec<usize>> {
    let fsf = fs as f64;
    if (trace.len() as f64) < 2.0 * fsf {
        return Err(Error::Insufficient(format!(
            "R-peak detection needs at least 2 s of signal, got {} samples at {fs} Hz",
            trace.len()
        )));
    }
    if fsf < 40.0 {
        return Err(Error::invalid("fs", "too low for 5-15 Hz QRS band"));
    }
    let x: Vec<f64> = trace.iter().map(|&v| if v.is_finite() { v } else { 0.0 }).collect();
    let band = Sos(vec![
        Biquad::butterworth_highpass(5.0, fsf),
        Biquad::butterworth_lowpass(15.0, fsf),
    ]);
    let filtered = band.filtfilt(&x, fs as usize);
    let n = filtered.len();
    let deriv: Vec<f64> = (0..n)
        .map(|i| {
            let at = |k: isize| filtered[(i as isize + k).clamp(0, n as isize - 1) as usize];
            (2.0 * at(2) + at(1) - at(-1) - 2.0 * at(-2)) / 8.0 * fsf
        })
        .collect();
    let squared: Vec<f64> = deriv.iter().map(|d| d * d).collect();
    let width = ((INTEGRATION_S * fsf).round() as usize).max(1);
    let mwi = moving_average_centered(&squared, width);

    let max = mwi.iter().cloned().fold(0.0, f64::max);
    if !(max > 0.0) || max < 1e-12 {
        return Ok(Vec::new());
    }

    let refractory = (REFRACTORY_S * fsf).round() as usize;
    // Candidate local maxima of the integrated signal; an endpoint counts
    // when the signal falls away from it (a complex cut by the record edge).
    let candidates: Vec<usize> = (0..n)
        .filter(|&i| (i == 0 || mwi[i] > mwi[i - 1]) && (i + 1 == n || mwi[i] >= mwi[i + 1]))
        .collect();

    let learn = (2.0 * fsf) as usize;
    let mut spki = 0.25 * mwi[..learn.min(n)].iter().cloned().fold(0.0, f64::max);
    let mut npki = 0.5 * mwi[..learn.min(n)].iter().sum::<f64>() / learn.min(n) as f64;
    let mut detections: Vec<usize> = Vec::new();
    let mut last_noise_peaks: Vec<usize> = Vec::new();
    let mut rr_avg: Option<f64> = None;

    for &c in &candidates {
        let threshold = npki + 0.25 * (spki - npki);
        let v = mwi[c];
        if v > threshold {
            if let Some(&last) = detections.last() {
                if c - last < refractory {
                    if v > mwi[last] {
                        *detections.last_mut().unwrap() = c;
                    }
                    continue;
                }
                // Searchback for a missed beat in a long gap.
                if let Some(avg) = rr_avg {
                    if (c - last) as f64 > 1.66 * avg {
                        let half_thr = 0.5 * threshold;
                        if let Some(&missed) = last_noise_peaks
                            .iter()
                            .filter(|&&p| p > last + refractory && p + refractory < c && mwi[p] > half_thr)
                            .max_by(|a, b| mwi[**a].total_cmp(&mwi[**b]))
                        {
                            detections.push(missed);
                            spki = 0.25 * mwi[missed] + 0.75 * spki;
                        }
                    }
                }
                let rr = (c - *detections.last().unwrap()) as f64;
                rr_avg = Some(rr_avg.map_or(rr, |a| 0.875 * a + 0.125 * rr));
            }
            detections.push(c);
            spki = 0.125 * v + 0.875 * spki;
            last_noise_peaks.clear();
        } else {
            npki = 0.125 * v + 0.875 * npki;
            last_noise_peaks.push(c);
        }
    }

    // Move each detection onto the dominant deflection of the raw trace.
    let reach = (REFINE_S * fsf).round() as usize;
    let mut peaks: Vec<usize> = Vec::with_capacity(detections.len());
    for d in detections {
        let lo = d.saturating_sub(2 * reach);
        let hi = (d + 2 * reach + 1).min(n);
        let base = median(&mut x[lo..hi].to_vec());
        let (wlo, whi) = (d.saturating_sub(reach), (d + reach + 1).min(n));
        let r = (wlo..whi)
            .max_by(|&a, &b| (x[a] - base).abs().total_cmp(&(x[b] - base).abs()))
            .unwrap();
        match peaks.last() {
            Some(&prev) if r <= prev || r - prev < refractory => {
                if (x[r] - base).abs() > (x[prev] - base).abs() && r > prev {
                    *peaks.last_mut().unwrap() = r;
                }
            }
            _ => peaks.push(r),
        }
    }
    Ok(peaks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{synth_ecg_with_truth, SynthSpec};

    #[test]
    fn sixty_bpm_matches_truth() {
        let (rec, truth) = synth_ecg_with_truth(&SynthSpec::default(), 0).unwrap();
        let peaks = detect_r_peaks(rec.lead(0), 256).unwrap();
        let want = truth.r_peaks();
        assert_eq!(peaks.len(), 10);
        for (p, t) in peaks.iter().zip(&want) {
            assert!(p.abs_diff(*t) <= 2, "{p} vs {t}");
        }
    }

    #[test]
    fn doubling_rate_doubles_count() {
        let slow = synth_ecg_with_truth(&SynthSpec::default(), 0).unwrap().0;
        let fast = synth_ecg_with_truth(
            &SynthSpec {
                heart_rate_bpm: 120.0,
                leads: vec![crate::signal::LeadSpec::new(
                    "II",
                    crate::signal::WaveParams {
                        qt_ms: 300.0,
                        ..Default::default()
                    },
                )],
                ..SynthSpec::default()
            },
            0,
        )
        .unwrap()
        .0;
        let a = detect_r_peaks(slow.lead(0), 256).unwrap().len();
        let b = detect_r_peaks(fast.lead(0), 256).unwrap().len();
        assert_eq!(b, 2 * a);
    }

    #[test]
    fn flat_trace_has_no_peaks() {
        assert!(detect_r_peaks(&vec![0.0; 2560], 256).unwrap().is_empty());
    }

    #[test]
    fn too_short_is_an_error() {
        assert!(matches!(detect_r_peaks(&[0.0; 300], 256), Err(Error::Insufficient(_))));
    }
}
