//! Clinical statistics: R peaks, RR/HRV, ectopy, intervals and amplitudes,
//! per lead and aggregated into a global report.

mod fiducials;
pub mod hrv;
mod rpeak;

use serde::{Deserialize, Serialize};

use crate::signal::EcgRecord;

pub use fiducials::{
    amplitudes, beat_intervals, fiducials, intervals, Amplitudes, BeatFiducials, BeatIntervals,
    Fiducials, Intervals,
};
pub use hrv::{
    detect_pacs, heart_rate, heart_rate_from_mean, hrv as hrv_stats, qtc_bazett, rr_intervals,
    Hrv, PREMATURITY_RATIO,
};
pub use rpeak::detect_r_peaks;

/// Upper sanity bound for any interval, in ms.
pub const MAX_INTERVAL_MS: f64 = 3000.0;

/// One set of statistics (a lead, or the global aggregate). Units are part
/// of every field name; absent values serialize as `null`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatFields {
    pub rr_intervals_ms: Vec<f64>,
    pub mean_rr_ms: Option<f64>,
    pub heart_rate_bpm: Option<u32>,
    pub rmssd_ms: Option<f64>,
    pub sdnn_ms: Option<f64>,
    pub rr_iqr_ms: Option<f64>,
    pub pac_count: usize,
    /// 1-based beat numbers.
    pub pac_beat_indices: Vec<usize>,
    pub pr_interval_ms: Option<f64>,
    pub p_duration_ms: Option<f64>,
    pub qrs_duration_ms: Option<f64>,
    pub qt_ms: Option<f64>,
    pub qtc_ms: Option<f64>,
    pub p_amplitude_mv: Option<f64>,
    pub qrs_amplitude_mv: Option<f64>,
    pub t_amplitude_mv: Option<f64>,
    pub estimated_atrial_rate_bpm: Option<u32>,
    /// Beat-wise PR and QRS durations (beat `k` at index `k - 1`).
    pub beat_pr_ms: Vec<Option<f64>>,
    pub beat_qrs_ms: Vec<Option<f64>>,
}

/// Scalar fields that participate in comparisons, in report order.
pub const SCALAR_FIELDS: [&str; 15] = [
    "mean_rr_ms",
    "heart_rate_bpm",
    "rmssd_ms",
    "sdnn_ms",
    "rr_iqr_ms",
    "pac_count",
    "pr_interval_ms",
    "p_duration_ms",
    "qrs_duration_ms",
    "qt_ms",
    "qtc_ms",
    "p_amplitude_mv",
    "qrs_amplitude_mv",
    "t_amplitude_mv",
    "estimated_atrial_rate_bpm",
];

impl StatFields {
    pub fn scalar(&self, name: &str) -> Option<f64> {
        match name {
            "mean_rr_ms" => self.mean_rr_ms,
            "heart_rate_bpm" => self.heart_rate_bpm.map(f64::from),
            "rmssd_ms" => self.rmssd_ms,
            "sdnn_ms" => self.sdnn_ms,
            "rr_iqr_ms" => self.rr_iqr_ms,
            "pac_count" => Some(self.pac_count as f64),
            "pr_interval_ms" => self.pr_interval_ms,
            "p_duration_ms" => self.p_duration_ms,
            "qrs_duration_ms" => self.qrs_duration_ms,
            "qt_ms" => self.qt_ms,
            "qtc_ms" => self.qtc_ms,
            "p_amplitude_mv" => self.p_amplitude_mv,
            "qrs_amplitude_mv" => self.qrs_amplitude_mv,
            "t_amplitude_mv" => self.t_amplitude_mv,
            "estimated_atrial_rate_bpm" => self.estimated_atrial_rate_bpm.map(f64::from),
            _ => None,
        }
    }

    /// Rhythm statistics from RR intervals alone.
    pub fn from_rr(rr: &[f64]) -> Self {
        let mut s = StatFields {
            rr_intervals_ms: rr.to_vec(),
            ..Default::default()
        };
        s.fill_rhythm();
        s
    }

    fn fill_rhythm(&mut self) {
        let rr = &self.rr_intervals_ms;
        if rr.is_empty() {
            return;
        }
        let m = hrv::mean(rr);
        self.mean_rr_ms = Some(m);
        self.heart_rate_bpm = Some(heart_rate_from_mean(m));
        if let Ok(h) = hrv::hrv(rr) {
            self.rmssd_ms = Some(h.rmssd_ms);
            self.sdnn_ms = Some(h.sdnn_ms);
            self.rr_iqr_ms = Some(h.rr_iqr_ms);
        }
        if let Ok(p) = detect_pacs(rr, PREMATURITY_RATIO) {
            self.pac_count = p.len();
            self.pac_beat_indices = p;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadReport {
    pub lead: String,
    pub r_peaks: Vec<usize>,
    pub stats: StatFields,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatReport {
    pub fs: u32,
    pub duration_s: f64,
    /// Lead the rhythm statistics of `global` come from.
    pub rhythm_lead: String,
    pub global: StatFields,
    pub leads: Vec<LeadReport>,
    pub diagnostics: Vec<String>,
}

/// Statistics for one trace.
pub fn lead_stats(trace: &[f64], fs: u32) -> (Vec<usize>, StatFields, Vec<String>) {
    let mut diagnostics = Vec::new();
    let peaks = match detect_r_peaks(trace, fs) {
        Ok(p) => p,
        Err(e) => {
            diagnostics.push(e.to_string());
            return (Vec::new(), StatFields::default(), diagnostics);
        }
    };
    let rr = rr_intervals(&peaks, fs).unwrap_or_default();
    let mut s = StatFields::from_rr(&rr);
    let fid = fiducials(trace, fs, &peaks);
    let iv = intervals(&fid, fs, s.mean_rr_ms);
    let amp = amplitudes(&fid);
    s.pr_interval_ms = iv.pr_ms;
    s.p_duration_ms = iv.p_dur_ms;
    s.qrs_duration_ms = iv.qrs_ms;
    s.qt_ms = iv.qt_ms;
    s.qtc_ms = iv.qtc_ms;
    s.p_amplitude_mv = amp.p_mv;
    s.qrs_amplitude_mv = amp.qrs_mv;
    s.t_amplitude_mv = amp.t_mv;
    let per: Vec<BeatIntervals> = fid.beats.iter().map(|b| beat_intervals(b, fs)).collect();
    s.beat_pr_ms = per.iter().map(|p| p.pr_ms).collect();
    s.beat_qrs_ms = per.iter().map(|p| p.qrs_ms).collect();

    // Atrial rate from consecutive P peaks.
    let pp: Vec<f64> = fid
        .beats
        .windows(2)
        .filter_map(|w| Some((w[1].p_peak? - w[0].p_peak?) * 1000.0 / fs as f64))
        .collect();
    if !pp.is_empty() {
        s.estimated_atrial_rate_bpm = Some(heart_rate_from_mean(hrv::mean(&pp)));
    }

    sanitize(&mut s, &mut diagnostics);
    (peaks, s, diagnostics)
}

fn sanitize(s: &mut StatFields, diagnostics: &mut Vec<String>) {
    let mut check = |name: &str, v: &mut Option<f64>| {
        if let Some(x) = *v {
            if !(0.0..MAX_INTERVAL_MS).contains(&x) {
                diagnostics.push(format!("{name} = {x:.1} ms outside [0, {MAX_INTERVAL_MS}); dropped"));
                *v = None;
            }
        }
    };
    check("pr_interval_ms", &mut s.pr_interval_ms);
    check("p_duration_ms", &mut s.p_duration_ms);
    check("qrs_duration_ms", &mut s.qrs_duration_ms);
    check("qt_ms", &mut s.qt_ms);
    check("qtc_ms", &mut s.qtc_ms);
}

fn median_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| rpeak::median(&mut v))
}

/// Per-lead statistics plus a global aggregate: rhythm statistics from
/// lead II when present (else the first lead); intervals and amplitudes are
/// medians across leads.
pub fn stat_report(record: &EcgRecord) -> StatReport {
    let fs = record.fs();
    let mut diagnostics = Vec::new();
    let leads: Vec<LeadReport> = record
        .leads()
        .iter()
        .zip(record.lead_names())
        .map(|(trace, name)| {
            let (r_peaks, stats, diag) = lead_stats(trace, fs);
            diagnostics.extend(diag.into_iter().map(|d| format!("{name}: {d}")));
            LeadReport {
                lead: name.clone(),
                r_peaks,
                stats,
            }
        })
        .collect();
    let rhythm_idx = record.lead_index("II").unwrap_or(0);
    let rhythm = &leads[rhythm_idx].stats;
    let mut global = StatFields {
        rr_intervals_ms: rhythm.rr_intervals_ms.clone(),
        mean_rr_ms: rhythm.mean_rr_ms,
        heart_rate_bpm: rhythm.heart_rate_bpm,
        rmssd_ms: rhythm.rmssd_ms,
        sdnn_ms: rhythm.sdnn_ms,
        rr_iqr_ms: rhythm.rr_iqr_ms,
        pac_count: rhythm.pac_count,
        pac_beat_indices: rhythm.pac_beat_indices.clone(),
        estimated_atrial_rate_bpm: rhythm.estimated_atrial_rate_bpm,
        beat_pr_ms: rhythm.beat_pr_ms.clone(),
        beat_qrs_ms: rhythm.beat_qrs_ms.clone(),
        ..Default::default()
    };
    let med = |f: fn(&StatFields) -> Option<f64>| median_of(leads.iter().map(|l| f(&l.stats)));
    global.pr_interval_ms = med(|s| s.pr_interval_ms);
    global.p_duration_ms = med(|s| s.p_duration_ms);
    global.qrs_duration_ms = med(|s| s.qrs_duration_ms);
    global.qt_ms = med(|s| s.qt_ms);
    global.qtc_ms = med(|s| s.qtc_ms);
    global.p_amplitude_mv = med(|s| s.p_amplitude_mv);
    global.qrs_amplitude_mv = med(|s| s.qrs_amplitude_mv);
    global.t_amplitude_mv = med(|s| s.t_amplitude_mv);

    StatReport {
        fs,
        duration_s: record.duration_s(),
        rhythm_lead: record.lead_names()[rhythm_idx].clone(),
        global,
        leads,
        diagnostics,
    }
}

impl StatReport {
    pub fn lead(&self, name: &str) -> Option<&StatFields> {
        self.leads.iter().find(|l| l.lead == name).map(|l| &l.stats)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Equal,
    AGreater,
    BGreater,
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDiff {
    pub field: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// `b - a`.
    pub diff: Option<f64>,
    pub verdict: Verdict,
}

impl FieldDiff {
    /// e.g. "b longer qrs_duration_ms", "a higher heart_rate_bpm", "equal pac_count".
    pub fn describe(&self) -> String {
        let word = if self.field.ends_with("_ms") { "longer" } else { "higher" };
        match self.verdict {
            Verdict::Equal => format!("equal {}", self.field),
            Verdict::AGreater => format!("a {word} {}", self.field),
            Verdict::BGreater => format!("b {word} {}", self.field),
            Verdict::Unavailable => format!("unavailable {}", self.field),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatDiff {
    pub fields: Vec<FieldDiff>,
}

impl StatDiff {
    pub fn get(&self, field: &str) -> Option<&FieldDiff> {
        self.fields.iter().find(|f| f.field == field)
    }
}

/// Field-by-field signed differences of the global statistics.
pub fn compare_stats(a: &StatReport, b: &StatReport) -> StatDiff {
    let fields = SCALAR_FIELDS
        .iter()
        .map(|&name| {
            let (va, vb) = (a.global.scalar(name), b.global.scalar(name));
            let diff = va.zip(vb).map(|(x, y)| y - x);
            let verdict = match diff {
                None => Verdict::Unavailable,
                Some(d) if d.abs() < 1e-9 => Verdict::Equal,
                Some(d) if d < 0.0 => Verdict::AGreater,
                Some(_) => Verdict::BGreater,
            };
            FieldDiff {
                field: name.to_string(),
                a: va,
                b: vb,
                diff,
                verdict,
            }
        })
        .collect();
    StatDiff { fields }
}
