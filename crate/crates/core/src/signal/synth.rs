//! Deterministic synthetic ECG with exactly known fiducials.
//!
//! Every wave is a sum of Gaussian bumps. A wave's onset and offset are the
//! outermost points where the isolated wave reaches 5% of its peak magnitude;
//! the stats engine measures waves with the same definition, so the truth
//! table here is the oracle for every interval it reports.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BeatAnnotations, BeatLabel, EcgRecord, Rhythm};
use crate::{Error, Result};

/// Fraction of a wave's peak magnitude that delimits its extent.
pub const EXTENT_FRACTION: f64 = 0.05;

/// Half-extent of a unit Gaussian at [`EXTENT_FRACTION`], in sigmas.
fn gauss_half_extent() -> f64 {
    (2.0 * (1.0 / EXTENT_FRACTION).ln()).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveParams {
    pub p_amp_mv: f64,
    pub p_width_ms: f64,
    pub q_amp_mv: f64,
    pub r_amp_mv: f64,
    pub s_amp_mv: f64,
    pub qrs_width_ms: f64,
    pub t_amp_mv: f64,
    pub t_width_ms: f64,
    /// P onset to QRS onset.
    pub pr_ms: f64,
    /// QRS onset to T offset.
    pub qt_ms: f64,
}

impl Default for WaveParams {
    fn default() -> Self {
        Self {
            p_amp_mv: 0.15,
            p_width_ms: 100.0,
            q_amp_mv: -0.1,
            r_amp_mv: 1.0,
            s_amp_mv: -0.25,
            qrs_width_ms: 90.0,
            t_amp_mv: 0.3,
            t_width_ms: 160.0,
            pr_ms: 160.0,
            qt_ms: 380.0,
        }
    }
}

impl WaveParams {
    /// Every amplitude multiplied by `k` (e.g. a lead with inverted polarity).
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            p_amp_mv: self.p_amp_mv * k,
            q_amp_mv: self.q_amp_mv * k,
            r_amp_mv: self.r_amp_mv * k,
            s_amp_mv: self.s_amp_mv * k,
            t_amp_mv: self.t_amp_mv * k,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("wave_params.p_width_ms", self.p_width_ms),
            ("wave_params.qrs_width_ms", self.qrs_width_ms),
            ("wave_params.t_width_ms", self.t_width_ms),
            ("wave_params.pr_ms", self.pr_ms),
            ("wave_params.qt_ms", self.qt_ms),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(field, format!("must be positive, got {v}")));
            }
        }
        if self.pr_ms < self.p_width_ms {
            return Err(Error::invalid(
                "wave_params.pr_ms",
                "PR interval shorter than the P wave",
            ));
        }
        if self.qt_ms < self.qrs_width_ms + self.t_width_ms {
            return Err(Error::invalid(
                "wave_params.qt_ms",
                "QT shorter than QRS plus T width",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadSpec {
    pub name: String,
    pub waves: WaveParams,
}

impl LeadSpec {
    pub fn new(name: impl Into<String>, waves: WaveParams) -> Self {
        Self {
            name: name.into(),
            waves,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub duration_s: f64,
    pub fs: u32,
    pub heart_rate_bpm: f64,
    /// Standard deviation of the per-beat RR perturbation in sinus rhythm.
    pub rr_jitter_ms: f64,
    /// 1-based indices of beats made premature (with a compensatory pause).
    pub pac_positions: Vec<usize>,
    pub leads: Vec<LeadSpec>,
    /// `(start_s, rhythm)` pairs; the first must start at 0.
    pub rhythm_schedule: Vec<(f64, Rhythm)>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            duration_s: 10.0,
            fs: 256,
            heart_rate_bpm: 60.0,
            rr_jitter_ms: 0.0,
            pac_positions: Vec::new(),
            leads: vec![LeadSpec::new("II", WaveParams::default())],
            rhythm_schedule: vec![(0.0, Rhythm::Norm)],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::invalid("duration_s", "must be positive"));
        }
        if self.fs == 0 {
            return Err(Error::invalid("fs", "must be positive"));
        }
        if !(20.0..=300.0).contains(&self.heart_rate_bpm) {
            return Err(Error::invalid(
                "heart_rate_bpm",
                format!("{} outside [20, 300]", self.heart_rate_bpm),
            ));
        }
        if !(self.rr_jitter_ms >= 0.0 && self.rr_jitter_ms.is_finite()) {
            return Err(Error::invalid("rr_jitter_ms", "must be non-negative"));
        }
        if self.pac_positions.iter().any(|&p| p < 2) {
            return Err(Error::invalid(
                "pac_positions",
                "beat indices are 1-based and the first beat cannot be premature",
            ));
        }
        if self.leads.is_empty() {
            return Err(Error::invalid("leads", "at least one lead required"));
        }
        for lead in &self.leads {
            lead.waves.validate()?;
        }
        match self.rhythm_schedule.first() {
            Some((start, _)) if *start == 0.0 => {}
            _ => return Err(Error::invalid("rhythm_schedule", "must start at 0")),
        }
        if self
            .rhythm_schedule
            .windows(2)
            .any(|w| !(w[0].0 < w[1].0))
        {
            return Err(Error::invalid(
                "rhythm_schedule",
                "start times must be strictly increasing",
            ));
        }
        Ok(())
    }

    pub fn rhythm_at(&self, t_s: f64) -> Rhythm {
        self.rhythm_schedule
            .iter()
            .take_while(|(start, _)| *start <= t_s)
            .last()
            .map(|(_, r)| *r)
            .unwrap_or(Rhythm::Norm)
    }

    pub fn mean_rr_s(&self) -> f64 {
        60.0 / self.heart_rate_bpm
    }
}

/// Ground-truth extents of one wave, in fractional sample positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveTruth {
    pub onset: f64,
    pub peak: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatTruth {
    pub r_peak: usize,
    pub label: BeatLabel,
    pub premature: bool,
    /// Per lead: P wave (absent in AFIB/AFL), QRS complex and T wave.
    pub p: Vec<Option<WaveTruth>>,
    pub qrs: Vec<WaveTruth>,
    pub t: Vec<WaveTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub fs: u32,
    pub beats: Vec<BeatTruth>,
}

impl SynthTruth {
    pub fn r_peaks(&self) -> Vec<usize> {
        self.beats.iter().map(|b| b.r_peak).collect()
    }

    /// 1-based indices of premature beats.
    pub fn pac_beats(&self) -> Vec<usize> {
        self.beats
            .iter()
            .enumerate()
            .filter(|(_, b)| b.premature)
            .map(|(i, _)| i + 1)
            .collect()
    }
}

/// QRS geometry for a unit width: bump offsets/sigmas and the composite's
/// 5% extent relative to the R peak.
struct QrsShape {
    scale_ms: f64,
    onset_ms: f64,
    offset_ms: f64,
}

impl QrsShape {
    const Q_OFFSET: f64 = -0.25;
    const S_OFFSET: f64 = 0.25;
    const SIGMA: f64 = 0.1;

    fn for_params(w: &WaveParams) -> Self {
        let unit = |x: f64| {
            let g = |c: f64| (-(x - c).powi(2) / (2.0 * Self::SIGMA * Self::SIGMA)).exp();
            w.q_amp_mv * g(Self::Q_OFFSET) + w.r_amp_mv * g(0.0) + w.s_amp_mv * g(Self::S_OFFSET)
        };
        let steps = 20_000;
        let (lo, hi) = (-1.0, 1.0);
        let xs: Vec<f64> = (0..=steps)
            .map(|i| lo + (hi - lo) * i as f64 / steps as f64)
            .collect();
        let vals: Vec<f64> = xs.iter().map(|&x| unit(x).abs()).collect();
        let peak = vals.iter().cloned().fold(0.0, f64::max);
        if peak == 0.0 {
            // Flat complex: fall back to the nominal geometry.
            return Self {
                scale_ms: w.qrs_width_ms,
                onset_ms: -0.5 * w.qrs_width_ms,
                offset_ms: 0.5 * w.qrs_width_ms,
            };
        }
        let thr = EXTENT_FRACTION * peak;
        let first = vals.iter().position(|&v| v >= thr).unwrap();
        let last = vals.iter().rposition(|&v| v >= thr).unwrap();
        let (a, b) = (xs[first], xs[last]);
        let scale = w.qrs_width_ms / (b - a);
        Self {
            scale_ms: scale,
            onset_ms: a * scale,
            offset_ms: b * scale,
        }
    }
}

/// Timing of each wave relative to the R peak, in ms.
struct BeatGeometry {
    qrs: QrsShape,
    p_center_ms: f64,
    p_sigma_ms: f64,
    t_center_ms: f64,
    t_sigma_ms: f64,
}

impl BeatGeometry {
    fn new(w: &WaveParams) -> Self {
        let qrs = QrsShape::for_params(w);
        let k = gauss_half_extent();
        let qrs_on = qrs.onset_ms;
        Self {
            p_center_ms: qrs_on - w.pr_ms + 0.5 * w.p_width_ms,
            p_sigma_ms: 0.5 * w.p_width_ms / k,
            t_center_ms: qrs_on + w.qt_ms - 0.5 * w.t_width_ms,
            t_sigma_ms: 0.5 * w.t_width_ms / k,
            qrs,
        }
    }
}

fn add_bump(trace: &mut [f64], fs: f64, center_s: f64, sigma_s: f64, amp: f64) {
    if amp == 0.0 || sigma_s <= 0.0 {
        return;
    }
    let n = trace.len() as isize;
    let lo = ((center_s - 6.0 * sigma_s) * fs).floor() as isize;
    let hi = ((center_s + 6.0 * sigma_s) * fs).ceil() as isize;
    for i in lo.max(0)..=hi.min(n - 1) {
        let t = i as f64 / fs;
        let z = (t - center_s) / sigma_s;
        trace[i as usize] += amp * (-0.5 * z * z).exp();
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 in (0, 1] keeps the log finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// `count` one-second windows (`fs` samples each) cut from randomized
/// synthetic records: heart rate, wave shapes, amplitude, polarity and
/// rhythm vary per record.
pub fn random_segments(count: usize, fs: u32, seed: u64) -> Result<Vec<Vec<f64>>> {
    const PER_RECORD: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let base = WaveParams {
            qrs_width_ms: rng.gen_range(70.0..120.0),
            t_amp_mv: rng.gen_range(0.1..0.5),
            p_amp_mv: rng.gen_range(0.05..0.25),
            pr_ms: rng.gen_range(130.0..200.0),
            qt_ms: rng.gen_range(340.0..420.0),
            ..WaveParams::default()
        };
        let sign = if rng.gen_bool(0.2) { -1.0 } else { 1.0 };
        let rhythm = match rng.gen_range(0..10) {
            0 => Rhythm::Afib,
            1 => Rhythm::Afl,
            _ => Rhythm::Norm,
        };
        let spec = SynthSpec {
            duration_s: PER_RECORD as f64 + 1.0,
            fs,
            heart_rate_bpm: rng.gen_range(45.0..110.0),
            rr_jitter_ms: 20.0,
            leads: vec![LeadSpec::new("II", base.scaled(sign * rng.gen_range(0.6..1.4)))],
            rhythm_schedule: vec![(0.0, rhythm)],
            ..SynthSpec::default()
        };
        let rec = synth_ecg(&spec, rng.gen())?;
        let n = fs as usize;
        let offset = rng.gen_range(0..n);
        let lead = rec.lead(0);
        for k in 0..PER_RECORD {
            if out.len() == count {
                break;
            }
            out.push(lead[offset + k * n..offset + (k + 1) * n].to_vec());
        }
    }
    Ok(out)
}

/// Render a record from `spec`. See [`synth_ecg_with_truth`] for fiducials.
pub fn synth_ecg(spec: &SynthSpec, seed: u64) -> Result<EcgRecord> {
    synth_ecg_with_truth(spec, seed).map(|(rec, _)| rec)
}

/// Render a record from `spec` together with its fiducial truth table.
///
/// Sinus beats are spaced by the mean RR plus Gaussian jitter; AFIB beats by
/// a uniform draw in [0.7, 1.3] x mean RR with P waves suppressed; AFL beats
/// are regular with P replaced by a 5 Hz flutter wave. A beat listed in
/// `pac_positions` arrives after 0.7 x mean RR and is followed by a
/// compensatory 1.3 x mean RR pause.
pub fn synth_ecg_with_truth(spec: &SynthSpec, seed: u64) -> Result<(EcgRecord, SynthTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = spec.fs as f64;
    let n = (spec.duration_s * fs).round() as usize;
    let mean_rr = spec.mean_rr_s();
    let jitter = spec.rr_jitter_ms / 1000.0;

    // Beat times, snapped to whole samples.
    let mut beat_samples: Vec<usize> = Vec::new();
    let mut beat_rhythm: Vec<Rhythm> = Vec::new();
    let mut premature: Vec<bool> = Vec::new();
    let mut t = 0.5 * mean_rr;
    let mut pause_next = false;
    while t < spec.duration_s {
        let s = (t * fs).round() as usize;
        if s >= n {
            break;
        }
        let rhythm = spec.rhythm_at(t);
        let beat_no = beat_samples.len() + 1;
        beat_samples.push(s);
        beat_rhythm.push(rhythm);
        premature.push(rhythm == Rhythm::Norm && spec.pac_positions.contains(&beat_no));

        let next_is_pac = spec.pac_positions.contains(&(beat_no + 1));
        let rr = match rhythm {
            Rhythm::Afib => mean_rr * rng.gen_range(0.7..=1.3),
            Rhythm::Afl => mean_rr,
            Rhythm::Norm if next_is_pac => 0.7 * mean_rr,
            Rhythm::Norm if pause_next => 1.3 * mean_rr,
            Rhythm::Norm => {
                let rr = mean_rr + jitter * standard_normal(&mut rng);
                rr.max(0.3 * mean_rr)
            }
        };
        pause_next = rhythm == Rhythm::Norm && next_is_pac;
        t = s as f64 / fs + rr;
    }

    let geometry: Vec<BeatGeometry> = spec.leads.iter().map(|l| BeatGeometry::new(&l.waves)).collect();
    let mut leads = vec![vec![0.0; n]; spec.leads.len()];
    let mut beats = Vec::with_capacity(beat_samples.len());
    let k = gauss_half_extent();

    for (bi, &s) in beat_samples.iter().enumerate() {
        let r_s = s as f64 / fs;
        let rhythm = beat_rhythm[bi];
        let has_p = rhythm == Rhythm::Norm;
        let mut p_truth = Vec::with_capacity(spec.leads.len());
        let mut qrs_truth = Vec::with_capacity(spec.leads.len());
        let mut t_truth = Vec::with_capacity(spec.leads.len());
        for (li, lead) in spec.leads.iter().enumerate() {
            let w = &lead.waves;
            let g = &geometry[li];
            let trace = &mut leads[li];
            let to_sample = |ms: f64| (r_s + ms / 1000.0) * fs;

            if has_p {
                add_bump(trace, fs, r_s + g.p_center_ms / 1000.0, g.p_sigma_ms / 1000.0, w.p_amp_mv);
            }
            p_truth.push((has_p && w.p_amp_mv != 0.0).then(|| WaveTruth {
                onset: to_sample(g.p_center_ms - k * g.p_sigma_ms),
                peak: to_sample(g.p_center_ms),
                offset: to_sample(g.p_center_ms + k * g.p_sigma_ms),
            }));

            let qs = &g.qrs;
            let sigma = QrsShape::SIGMA * qs.scale_ms / 1000.0;
            add_bump(trace, fs, r_s + QrsShape::Q_OFFSET * qs.scale_ms / 1000.0, sigma, w.q_amp_mv);
            add_bump(trace, fs, r_s, sigma, w.r_amp_mv);
            add_bump(trace, fs, r_s + QrsShape::S_OFFSET * qs.scale_ms / 1000.0, sigma, w.s_amp_mv);
            qrs_truth.push(WaveTruth {
                onset: to_sample(qs.onset_ms),
                peak: s as f64,
                offset: to_sample(qs.offset_ms),
            });

            add_bump(trace, fs, r_s + g.t_center_ms / 1000.0, g.t_sigma_ms / 1000.0, w.t_amp_mv);
            t_truth.push(WaveTruth {
                onset: to_sample(g.t_center_ms - k * g.t_sigma_ms),
                peak: to_sample(g.t_center_ms),
                offset: to_sample(g.t_center_ms + k * g.t_sigma_ms),
            });
        }
        let label = if premature[bi] {
            BeatLabel::Pac
        } else {
            rhythm.beat_label()
        };
        beats.push(BeatTruth {
            r_peak: s,
            label,
            premature: premature[bi],
            p: p_truth,
            qrs: qrs_truth,
            t: t_truth,
        });
    }

    // Flutter waves over AFL stretches.
    for (i, (start, rhythm)) in spec.rhythm_schedule.iter().enumerate() {
        if *rhythm != Rhythm::Afl {
            continue;
        }
        let end = spec
            .rhythm_schedule
            .get(i + 1)
            .map(|(s, _)| *s)
            .unwrap_or(spec.duration_s);
        let (a, b) = ((start * fs).round() as usize, ((end * fs).round() as usize).min(n));
        for (li, lead) in spec.leads.iter().enumerate() {
            let amp = 0.8 * lead.waves.p_amp_mv;
            for j in a..b {
                let phase = (j as f64 / fs * 5.0).fract();
                leads[li][j] += amp * (1.0 - 2.0 * phase);
            }
        }
    }

    let names = spec.leads.iter().map(|l| l.name.clone()).collect();
    let annotations = BeatAnnotations::new(
        beats.iter().map(|b| b.r_peak).collect(),
        beats.iter().map(|b| b.label).collect(),
    )?;
    let record = EcgRecord::new(leads, names, spec.fs)?.with_annotations(annotations)?;
    Ok((record, SynthTruth { fs: spec.fs, beats }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn periodic_beats_at_sixty_bpm() {
        let spec = SynthSpec::default();
        let (rec, truth) = synth_ecg_with_truth(&spec, 1).unwrap();
        let peaks = truth.r_peaks();
        assert_eq!(peaks.len(), 10);
        assert!(peaks.windows(2).all(|w| w[1] - w[0] == 256));
        assert_eq!(rec.annotations().unwrap().positions(), &peaks[..]);
    }

    #[test]
    fn zero_amplitudes_give_flat_signal() {
        let mut spec = SynthSpec::default();
        spec.leads[0].waves = WaveParams {
            p_amp_mv: 0.0,
            q_amp_mv: 0.0,
            r_amp_mv: 0.0,
            s_amp_mv: 0.0,
            t_amp_mv: 0.0,
            ..WaveParams::default()
        };
        let rec = synth_ecg(&spec, 3).unwrap();
        assert!(rec.lead(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_rr_at_92_bpm() {
        let spec = SynthSpec {
            heart_rate_bpm: 92.0,
            ..SynthSpec::default()
        };
        let rec = synth_ecg(&spec, 0).unwrap();
        let pos = rec.annotations().unwrap().positions();
        let mean_ms = (pos[pos.len() - 1] - pos[0]) as f64 / (pos.len() - 1) as f64 * 1000.0 / 256.0;
        let exact = 60000.0 / 92.0;
        assert!((mean_ms - exact).abs() <= 0.5 * 1000.0 / 256.0, "{mean_ms}");
        assert!((mean_ms - 652.0).abs() <= 0.5 * 1000.0 / 256.0 + 0.17);
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = SynthSpec {
            rr_jitter_ms: 40.0,
            duration_s: 30.0,
            rhythm_schedule: vec![(0.0, Rhythm::Norm), (15.0, Rhythm::Afib)],
            ..SynthSpec::default()
        };
        let a = synth_ecg(&spec, 9).unwrap();
        let b = synth_ecg(&spec, 9).unwrap();
        let c = synth_ecg(&spec, 10).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn afib_suppresses_p_and_randomizes_rr() {
        let spec = SynthSpec {
            duration_s: 60.0,
            rhythm_schedule: vec![(0.0, Rhythm::Afib)],
            ..SynthSpec::default()
        };
        let (rec, truth) = synth_ecg_with_truth(&spec, 4).unwrap();
        assert!(truth.beats.iter().all(|b| b.p[0].is_none() && b.label == BeatLabel::Afib));
        let pos = rec.annotations().unwrap().positions();
        let rr: Vec<f64> = pos.windows(2).map(|w| (w[1] - w[0]) as f64 / 256.0).collect();
        assert!(rr.iter().all(|&r| (0.69..=1.31).contains(&r)));
        let spread = rr.iter().cloned().fold(f64::MIN, f64::max) - rr.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 0.3);
    }

    #[test]
    fn pac_is_early_with_compensatory_pause() {
        let spec = SynthSpec {
            duration_s: 12.0,
            pac_positions: vec![5],
            ..SynthSpec::default()
        };
        let (_, truth) = synth_ecg_with_truth(&spec, 0).unwrap();
        let p = truth.r_peaks();
        assert_eq!(p[4] - p[3], (0.7f64 * 256.0).round() as usize);
        assert_eq!(truth.pac_beats(), vec![5]);
        assert_eq!(truth.beats[4].label, BeatLabel::Pac);
        assert!(p[5] - p[4] > 256);
    }

    #[test]
    fn configured_intervals_match_truth() {
        let spec = SynthSpec::default();
        let (_, truth) = synth_ecg_with_truth(&spec, 0).unwrap();
        let b = &truth.beats[3];
        let p = b.p[0].unwrap();
        let ms = |samples: f64| samples * 1000.0 / 256.0;
        assert!((ms(b.qrs[0].onset - p.onset) - 160.0).abs() < 1e-6);
        assert!((ms(b.qrs[0].offset - b.qrs[0].onset) - 90.0).abs() < 1e-6);
        assert!((ms(b.t[0].offset - b.qrs[0].onset) - 380.0).abs() < 1e-6);
        assert!((ms(p.offset - p.onset) - 100.0).abs() < 1e-6);
    }

    #[test]
    fn validation_names_the_field() {
        let bad = SynthSpec {
            heart_rate_bpm: 10.0,
            ..SynthSpec::default()
        };
        match synth_ecg(&bad, 0) {
            Err(Error::Invalid { field, .. }) => assert_eq!(field, "heart_rate_bpm"),
            other => panic!("unexpected {other:?}"),
        }
        let bad = SynthSpec {
            rhythm_schedule: vec![(1.0, Rhythm::Norm)],
            ..SynthSpec::default()
        };
        assert!(matches!(
            synth_ecg(&bad, 0),
            Err(Error::Invalid { field: "rhythm_schedule", .. })
        ));
    }
}
