use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::signal::{synth_ecg, EcgRecord, LeadSpec, Rhythm, SynthSpec, WaveParams};
use crate::{Error, Result};

/// Long single-lead recordings, some of which switch from sinus rhythm to
/// AFIB or AFL. Premature atrial beats become denser in the run-up to an
/// onset, so the signal that predicts a transition accumulates with window
/// length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_records: usize,
    pub duration_s: f64,
    pub fs: u32,
    /// Share of records with an arrhythmia onset.
    pub onset_share: f64,
    /// Share of onsets that are AFL rather than AFIB.
    pub afl_share: f64,
    /// Length of the run-up before an onset with raised PAC density.
    pub precursor_s: f64,
    pub pac_prob_precursor: f64,
    pub pac_prob_base: f64,
    pub rr_jitter_ms: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_records: 40,
            duration_s: 1800.0,
            fs: 100,
            onset_share: 0.6,
            afl_share: 0.35,
            precursor_s: 900.0,
            pac_prob_precursor: 0.04,
            pac_prob_base: 0.004,
            rr_jitter_ms: 25.0,
        }
    }
}

impl CorpusSpec {
    fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("onset_share", self.onset_share),
            ("afl_share", self.afl_share),
            ("pac_prob_precursor", self.pac_prob_precursor),
            ("pac_prob_base", self.pac_prob_base),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(name, format!("{p} not in [0, 1]")));
            }
        }
        if !(self.duration_s >= 60.0) {
            return Err(Error::invalid("duration_s", "must be at least 60 s"));
        }
        if !(self.precursor_s >= 0.0) {
            return Err(Error::invalid("precursor_s", "must be non-negative"));
        }
        Ok(())
    }

    fn record(&self, seed: u64) -> Result<EcgRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hr = rng.gen_range(55.0..95.0);
        let mean_rr = 60.0 / hr;
        let onset = (rng.gen::<f64>() < self.onset_share).then(|| {
            let t = rng.gen_range(0.45..0.85) * self.duration_s;
            let kind = if rng.gen::<f64>() < self.afl_share { Rhythm::Afl } else { Rhythm::Afib };
            (t.round(), kind)
        });
        let n_beats = (self.duration_s / mean_rr) as usize;
        let mut pacs = Vec::new();
        let mut last = 0usize;
        for k in 3..n_beats {
            let t = k as f64 * mean_rr;
            let p = match onset {
                Some((o, _)) if t >= o => continue,
                Some((o, _)) if t >= o - self.precursor_s => self.pac_prob_precursor,
                _ => self.pac_prob_base,
            };
            if k >= last + 4 && rng.gen::<f64>() < p {
                pacs.push(k);
                last = k;
            }
        }
        let mut schedule = vec![(0.0, Rhythm::Norm)];
        schedule.extend(onset);
        let spec = SynthSpec {
            duration_s: self.duration_s,
            fs: self.fs,
            heart_rate_bpm: hr,
            rr_jitter_ms: self.rr_jitter_ms,
            pac_positions: pacs,
            leads: vec![LeadSpec::new(
                "II",
                WaveParams {
                    pr_ms: rng.gen_range(140.0..200.0),
                    ..WaveParams::default()
                },
            )],
            rhythm_schedule: schedule,
        };
        synth_ecg(&spec, rng.gen())
    }
}

/// `(record_id, record)` pairs; ids are `syn{index:04}`.
pub fn synth_corpus(spec: &CorpusSpec, seed: u64) -> Result<Vec<(String, EcgRecord)>> {
    spec.validate()?;
    (0..spec.n_records)
        .into_par_iter()
        .map(|i| {
            let rec = spec.record(seed.wrapping_mul(1_000_003).wrapping_add(i as u64))?;
            Ok((format!("syn{i:04}"), rec))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::BeatLabel;

    #[test]
    fn corpus_is_deterministic_and_annotated() {
        let spec = CorpusSpec {
            n_records: 4,
            duration_s: 300.0,
            precursor_s: 100.0,
            onset_share: 1.0,
            ..CorpusSpec::default()
        };
        let a = synth_corpus(&spec, 7).unwrap();
        assert_eq!(a, synth_corpus(&spec, 7).unwrap());
        for (_, rec) in &a {
            let labels = rec.annotations().unwrap().labels();
            let first = labels.iter().position(|l| l.is_atrial_arrhythmia()).unwrap();
            assert!(labels[..first].iter().all(|&l| matches!(l, BeatLabel::Norm | BeatLabel::Pac)));
            assert!(labels[first..].iter().all(|l| l.is_atrial_arrhythmia()));
        }
    }
}
