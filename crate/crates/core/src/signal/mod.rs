//! ECG record model, file I/O and the synthetic generator.

mod io;
mod synth;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use io::{annotation_path, load_record, read_jsonl, save_record, write_jsonl};
pub use synth::{
    random_segments, synth_ecg, synth_ecg_with_truth, BeatTruth, LeadSpec, SynthSpec, SynthTruth, WaveParams,
    WaveTruth,
};

/// Beat classes carried by annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BeatLabel {
    Norm,
    Afib,
    Afl,
    Pac,
    Other,
}

impl BeatLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            BeatLabel::Norm => "NORM",
            BeatLabel::Afib => "AFIB",
            BeatLabel::Afl => "AFL",
            BeatLabel::Pac => "PAC",
            BeatLabel::Other => "OTHER",
        }
    }

    /// AFIB and AFL beats; everything else belongs to a sinus-driven rhythm.
    pub fn is_atrial_arrhythmia(self) -> bool {
        matches!(self, BeatLabel::Afib | BeatLabel::Afl)
    }
}

/// Underlying rhythm of a stretch of signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Rhythm {
    Norm,
    Afib,
    Afl,
}

impl Rhythm {
    pub fn beat_label(self) -> BeatLabel {
        match self {
            Rhythm::Norm => BeatLabel::Norm,
            Rhythm::Afib => BeatLabel::Afib,
            Rhythm::Afl => BeatLabel::Afl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeatAnnotations {
    positions: Vec<usize>,
    labels: Vec<BeatLabel>,
}

impl BeatAnnotations {
    pub fn new(positions: Vec<usize>, labels: Vec<BeatLabel>) -> Result<Self> {
        if positions.len() != labels.len() {
            return Err(Error::invalid(
                "beat_labels",
                format!("{} labels for {} positions", labels.len(), positions.len()),
            ));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "beat_positions",
                "positions must be strictly increasing",
            ));
        }
        Ok(Self { positions, labels })
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn labels(&self) -> &[BeatLabel] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, BeatLabel)> + '_ {
        self.positions.iter().copied().zip(self.labels.iter().copied())
    }
}

/// A multi-lead sampled waveform in millivolts.
///
/// Samples are held at `f32` precision (the on-disk precision) so that a
/// save/load round trip is the identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EcgRecord {
    leads: Vec<Vec<f64>>,
    lead_names: Vec<String>,
    fs: u32,
    annotations: Option<BeatAnnotations>,
}

impl EcgRecord {
    pub fn new(leads: Vec<Vec<f64>>, lead_names: Vec<String>, fs: u32) -> Result<Self> {
        if fs == 0 {
            return Err(Error::invalid("fs", "sampling frequency must be positive"));
        }
        if leads.is_empty() {
            return Err(Error::invalid("leads", "record needs at least one lead"));
        }
        if lead_names.len() != leads.len() {
            return Err(Error::invalid(
                "lead_names",
                format!("{} names for {} leads", lead_names.len(), leads.len()),
            ));
        }
        let n = leads[0].len();
        if leads.iter().any(|l| l.len() != n) {
            return Err(Error::invalid("leads", "all leads must have equal length"));
        }
        for (i, name) in lead_names.iter().enumerate() {
            if lead_names[..i].contains(name) {
                return Err(Error::invalid(
                    "lead_names",
                    format!("duplicate lead name {name:?}"),
                ));
            }
        }
        let leads = leads
            .into_iter()
            .map(|l| l.into_iter().map(|v| v as f32 as f64).collect())
            .collect();
        Ok(Self {
            leads,
            lead_names,
            fs,
            annotations: None,
        })
    }

    pub fn with_annotations(mut self, annotations: BeatAnnotations) -> Result<Self> {
        if let Some(&last) = annotations.positions().last() {
            if last >= self.n_samples() {
                return Err(Error::invalid(
                    "beat_positions",
                    format!("position {last} beyond record length {}", self.n_samples()),
                ));
            }
        }
        self.annotations = Some(annotations);
        Ok(self)
    }

    /// Same geometry and annotations, new sample values and rate.
    pub fn map_leads(&self, leads: Vec<Vec<f64>>, fs: u32) -> Result<Self> {
        let rec = EcgRecord::new(leads, self.lead_names.clone(), fs)?;
        match &self.annotations {
            Some(a) if fs == self.fs => rec.with_annotations(a.clone()),
            Some(a) => {
                let scale = fs as f64 / self.fs as f64;
                let n = rec.n_samples();
                let mut positions = Vec::with_capacity(a.len());
                let mut labels = Vec::with_capacity(a.len());
                for (p, l) in a.iter() {
                    let q = ((p as f64) * scale).round() as usize;
                    if q < n && positions.last().is_none_or(|&last| q > last) {
                        positions.push(q);
                        labels.push(l);
                    }
                }
                rec.with_annotations(BeatAnnotations::new(positions, labels)?)
            }
            None => Ok(rec),
        }
    }

    pub fn leads(&self) -> &[Vec<f64>] {
        &self.leads
    }

    pub fn lead(&self, i: usize) -> &[f64] {
        &self.leads[i]
    }

    pub fn lead_names(&self) -> &[String] {
        &self.lead_names
    }

    pub fn lead_index(&self, name: &str) -> Option<usize> {
        self.lead_names.iter().position(|n| n == name)
    }

    pub fn n_leads(&self) -> usize {
        self.leads.len()
    }

    pub fn n_samples(&self) -> usize {
        self.leads[0].len()
    }

    pub fn fs(&self) -> u32 {
        self.fs
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.fs as f64
    }

    pub fn annotations(&self) -> Option<&BeatAnnotations> {
        self.annotations.as_ref()
    }

    /// Samples `[start, end)` of every lead, annotations shifted accordingly.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n_samples() {
            return Err(Error::invalid(
                "slice",
                format!("[{start}, {end}) outside 0..{}", self.n_samples()),
            ));
        }
        let leads = self.leads.iter().map(|l| l[start..end].to_vec()).collect();
        let rec = EcgRecord::new(leads, self.lead_names.clone(), self.fs)?;
        match &self.annotations {
            Some(a) => {
                let (positions, labels) = a
                    .iter()
                    .filter(|(p, _)| (start..end).contains(p))
                    .map(|(p, l)| (p - start, l))
                    .unzip();
                rec.with_annotations(BeatAnnotations::new(positions, labels)?)
            }
            None => Ok(rec),
        }
    }

    /// Bitwise equality of all fields (NaN samples compare equal to themselves).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.fs == other.fs
            && self.lead_names == other.lead_names
            && self.annotations == other.annotations
            && self.leads.len() == other.leads.len()
            && self.leads.iter().zip(&other.leads).all(|(a, b)| {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl PartialEq for EcgRecord {
    fn eq(&self, other: &Self) -> bool {
        self.bit_eq(other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unequal_leads() {
        let err = EcgRecord::new(vec![vec![0.0; 3], vec![0.0; 4]], vec!["I".into(), "II".into()], 256);
        assert!(matches!(err, Err(Error::Invalid { field: "leads", .. })));
    }

    #[test]
    fn rejects_duplicate_names_and_zero_fs() {
        assert!(EcgRecord::new(vec![vec![0.0; 3]; 2], vec!["I".into(), "I".into()], 256).is_err());
        assert!(EcgRecord::new(vec![vec![0.0; 3]], vec!["I".into()], 0).is_err());
    }

    #[test]
    fn annotations_must_be_increasing_and_in_range() {
        assert!(BeatAnnotations::new(vec![3, 3], vec![BeatLabel::Norm; 2]).is_err());
        assert!(BeatAnnotations::new(vec![1], vec![]).is_err());
        let rec = EcgRecord::new(vec![vec![0.0; 10]], vec!["II".into()], 256).unwrap();
        let ann = BeatAnnotations::new(vec![2, 10], vec![BeatLabel::Norm; 2]).unwrap();
        assert!(rec.with_annotations(ann).is_err());
    }

    #[test]
    fn slice_shifts_annotations() {
        let rec = EcgRecord::new(vec![(0..20).map(f64::from).collect()], vec!["II".into()], 4)
            .unwrap()
            .with_annotations(BeatAnnotations::new(vec![2, 8, 15], vec![BeatLabel::Norm; 3]).unwrap())
            .unwrap();
        let s = rec.slice(5, 16).unwrap();
        assert_eq!(s.n_samples(), 11);
        assert_eq!(s.lead(0)[0], 5.0);
        assert_eq!(s.annotations().unwrap().positions(), &[3, 10]);
    }
}
