//! Minimal preprocessing: powerline notches, a 0.3 Hz baseline high-pass,
//! resampling to 256 Hz and the flat-line/NaN exclusion rule.

mod filter;
mod resample;

use serde::{Deserialize, Serialize};

use crate::signal::EcgRecord;
use crate::{Error, Result};

pub use filter::{Biquad, Sos};
pub use resample::{output_len, resample as resample_trace};

/// Quality factor of the powerline notches.
pub const NOTCH_Q: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub highpass_cutoff_hz: f64,
    pub notch_freqs_hz: Vec<f64>,
    pub target_fs: u32,
    pub max_bad_run_s: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            highpass_cutoff_hz: 0.3,
            notch_freqs_hz: vec![50.0, 60.0],
            target_fs: 256,
            max_bad_run_s: 5.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.highpass_cutoff_hz > 0.0) {
            return Err(Error::invalid("highpass_cutoff_hz", "must be > 0"));
        }
        let max_notch = self.notch_freqs_hz.iter().cloned().fold(0.0, f64::max);
        if !(self.target_fs as f64 > 2.0 * max_notch) {
            return Err(Error::invalid(
                "target_fs",
                format!("must exceed twice the highest notch ({max_notch} Hz)"),
            ));
        }
        if self.notch_freqs_hz.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::invalid("notch_freqs_hz", "frequencies must be > 0"));
        }
        if !(self.max_bad_run_s >= 0.0) {
            return Err(Error::invalid("max_bad_run_s", "must be >= 0"));
        }
        Ok(())
    }
}

fn padlen(fs: u32) -> usize {
    fs as usize
}

/// Zero-phase second-order Butterworth high-pass on every lead.
pub fn highpass(record: &EcgRecord, cutoff_hz: f64) -> Result<EcgRecord> {
    let fs = record.fs() as f64;
    if !(cutoff_hz > 0.0) || cutoff_hz >= fs / 2.0 {
        return Err(Error::invalid(
            "cutoff_hz",
            format!("{cutoff_hz} Hz not inside (0, Nyquist = {} Hz)", fs / 2.0),
        ));
    }
    let sos = Sos(vec![Biquad::butterworth_highpass(cutoff_hz, fs)]);
    let leads = record
        .leads()
        .iter()
        .map(|l| filter::filtfilt_nan_aware(&sos, l, padlen(record.fs())))
        .collect();
    record.map_leads(leads, record.fs())
}

/// Zero-phase notch at each frequency. An empty set is the identity.
pub fn notch(record: &EcgRecord, freqs_hz: &[f64]) -> Result<EcgRecord> {
    let fs = record.fs() as f64;
    if let Some(&f) = freqs_hz.iter().find(|&&f| !(f > 0.0) || f >= fs / 2.0) {
        return Err(Error::invalid(
            "freqs_hz",
            format!("{f} Hz not inside (0, Nyquist = {} Hz)", fs / 2.0),
        ));
    }
    if freqs_hz.is_empty() {
        return Ok(record.clone());
    }
    let sos = Sos(freqs_hz.iter().map(|&f| Biquad::notch(f, NOTCH_Q, fs)).collect());
    let leads = record
        .leads()
        .iter()
        .map(|l| filter::filtfilt_nan_aware(&sos, l, padlen(record.fs())))
        .collect();
    record.map_leads(leads, record.fs())
}

/// Resample every lead to `target_fs`; output length is
/// `round(n * target_fs / fs)`. Annotations are rescaled.
pub fn resample(record: &EcgRecord, target_fs: u32) -> Result<EcgRecord> {
    if target_fs == 0 {
        return Err(Error::invalid("target_fs", "must be positive"));
    }
    if target_fs == record.fs() {
        return Ok(record.clone());
    }
    let leads = record
        .leads()
        .iter()
        .map(|l| resample_trace(l, record.fs(), target_fs))
        .collect();
    record.map_leads(leads, target_fs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BadRunKind {
    NanRun,
    ZeroRun,
    ZeroNanRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub reason: BadRunKind,
    pub lead: String,
    pub run_samples: usize,
    pub run_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CleanOutcome {
    Accepted(EcgRecord),
    Rejected(Rejection),
}

impl CleanOutcome {
    pub fn accepted(self) -> Option<EcgRecord> {
        match self {
            CleanOutcome::Accepted(r) => Some(r),
            CleanOutcome::Rejected(_) => None,
        }
    }
}

/// Longest contiguous run of exact zeros and/or NaNs in any lead that
/// exceeds `max_bad_run_s`, if any.
fn find_bad_run(record: &EcgRecord, max_bad_run_s: f64) -> Option<Rejection> {
    let fs = record.fs() as f64;
    let limit = max_bad_run_s * fs;
    for (lead, name) in record.leads().iter().zip(record.lead_names()) {
        let mut i = 0;
        let n = lead.len();
        while i < n {
            if !(lead[i].is_nan() || lead[i] == 0.0) {
                i += 1;
                continue;
            }
            let start = i;
            let (mut nan, mut zero) = (false, false);
            while i < n && (lead[i].is_nan() || lead[i] == 0.0) {
                if lead[i].is_nan() {
                    nan = true;
                } else {
                    zero = true;
                }
                i += 1;
            }
            let len = i - start;
            if len as f64 > limit {
                let reason = match (nan, zero) {
                    (true, false) => BadRunKind::NanRun,
                    (false, true) => BadRunKind::ZeroRun,
                    _ => BadRunKind::ZeroNanRun,
                };
                return Some(Rejection {
                    reason,
                    lead: name.clone(),
                    run_samples: len,
                    run_s: len as f64 / fs,
                });
            }
        }
    }
    None
}

/// Reject records with a zero/NaN run longer than `max_bad_run_s`;
/// otherwise replace remaining NaNs with zero and leave finite samples alone.
pub fn clean(record: &EcgRecord, config: &PreprocessConfig) -> CleanOutcome {
    if let Some(rej) = find_bad_run(record, config.max_bad_run_s) {
        return CleanOutcome::Rejected(rej);
    }
    if !record.leads().iter().flatten().any(|v| v.is_nan()) {
        return CleanOutcome::Accepted(record.clone());
    }
    let leads = record
        .leads()
        .iter()
        .map(|l| l.iter().map(|&v| if v.is_nan() { 0.0 } else { v }).collect())
        .collect();
    CleanOutcome::Accepted(
        record
            .map_leads(leads, record.fs())
            .expect("geometry unchanged"),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub outcome: CleanOutcome,
    /// Steps applied, in order.
    pub provenance: Vec<String>,
}

/// notch -> highpass -> resample -> clean.
///
/// The exclusion screen runs on the raw input: IIR filtering smears NaN and
/// flat-line runs, so their extent is only meaningful before filtering.
/// Remaining NaNs are zero-filled ahead of the filters. Notch frequencies at
/// or above the input Nyquist cannot be represented and are skipped.
pub fn preprocess(record: &EcgRecord, config: &PreprocessConfig) -> Result<Preprocessed> {
    config.validate()?;
    let mut provenance = vec!["screen".to_string()];
    let rec = match clean(record, config) {
        CleanOutcome::Rejected(r) => {
            return Ok(Preprocessed {
                outcome: CleanOutcome::Rejected(r),
                provenance,
            })
        }
        CleanOutcome::Accepted(r) => r,
    };
    let nyquist = rec.fs() as f64 / 2.0;
    let (freqs, skipped): (Vec<f64>, Vec<f64>) =
        config.notch_freqs_hz.iter().partition(|&&f| f < nyquist);
    let rec = notch(&rec, &freqs)?;
    provenance.push(format!("notch{freqs:?}"));
    if !skipped.is_empty() {
        provenance.push(format!("notch_skipped{skipped:?}"));
    }
    let rec = highpass(&rec, config.highpass_cutoff_hz)?;
    provenance.push(format!("highpass({})", config.highpass_cutoff_hz));
    let rec = resample(&rec, config.target_fs)?;
    provenance.push(format!("resample({})", config.target_fs));
    let outcome = clean(&rec, config);
    provenance.push("clean".to_string());
    Ok(Preprocessed {
        outcome,
        provenance,
    })
}
