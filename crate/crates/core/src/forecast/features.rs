use rayon::prelude::*;

use super::ForecastSample;
use crate::signal::EcgRecord;
use crate::stats::lead_stats;
use crate::{Error, Result};

/// Value columns followed by one missing-value flag per column.
pub const FEATURE_NAMES: [&str; 16] = [
    "mean_rr",
    "sdnn",
    "rmssd",
    "rr_iqr",
    "pac_count",
    "pr_ms",
    "p_dur_ms",
    "hr_bpm",
    "mean_rr_missing",
    "sdnn_missing",
    "rmssd_missing",
    "rr_iqr_missing",
    "pac_count_missing",
    "pr_ms_missing",
    "p_dur_ms_missing",
    "hr_bpm_missing",
];

const MIN_SPAN_S: u32 = 10;

fn rhythm_lead(record: &EcgRecord) -> usize {
    record.lead_index("II").unwrap_or(0)
}

/// Statistics of the sample's input span on lead II (or the first lead).
/// Absent values are imputed as 0 with their flag set to 1.
pub fn featurize(sample: &ForecastSample, record: &EcgRecord) -> Result<Vec<f64>> {
    if sample.window_s < MIN_SPAN_S {
        return Err(Error::Insufficient(format!(
            "input span of {} s is shorter than {MIN_SPAN_S} s",
            sample.window_s
        )));
    }
    let fs = record.fs() as usize;
    let (start, end) = (sample.t0_s as usize * fs, sample.input_end_s() as usize * fs);
    if end > record.n_samples() {
        return Err(Error::Insufficient(format!(
            "{}: input span ends at {} s, past the end of the record",
            sample.record_id,
            sample.input_end_s()
        )));
    }
    let trace = &record.lead(rhythm_lead(record))[start..end];
    let (_, s, _) = lead_stats(trace, record.fs());
    if s.rr_intervals_ms.is_empty() {
        return Err(Error::Insufficient(format!(
            "{}: no beats detected in [{}, {}) s",
            sample.record_id,
            sample.t0_s,
            sample.input_end_s()
        )));
    }
    let pac = (s.rr_intervals_ms.len() >= 4).then_some(s.pac_count as f64);
    let values = [
        s.mean_rr_ms,
        s.sdnn_ms,
        s.rmssd_ms,
        s.rr_iqr_ms,
        pac,
        s.pr_interval_ms,
        s.p_duration_ms,
        s.heart_rate_bpm.map(f64::from),
    ];
    let mut out: Vec<f64> = values.iter().map(|v| v.unwrap_or(0.0)).collect();
    out.extend(values.iter().map(|v| if v.is_some() { 0.0 } else { 1.0 }));
    Ok(out)
}

/// Fills `features` on every sample; `lookup` maps a record id to its record.
pub fn featurize_all<'a, F>(samples: &mut [ForecastSample], lookup: F) -> Result<()>
where
    F: Fn(&str) -> Option<&'a EcgRecord> + Sync,
{
    samples.par_iter_mut().try_for_each(|s| {
        let rec = lookup(&s.record_id)
            .ok_or_else(|| Error::invalid("record_id", format!("unknown record {:?}", s.record_id)))?;
        s.features = featurize(s, rec)?;
        Ok(())
    })
}
