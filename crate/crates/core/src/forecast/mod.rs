//! Rhythm-transition forecasting benchmark: window extraction from
//! beat-annotated recordings, statistics features, feature baselines and
//! the window/horizon evaluation grid.

mod baseline;
mod corpus;
mod features;
mod grid;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::ForecastLabel;
use crate::signal::{BeatAnnotations, BeatLabel, EcgRecord};
use crate::{Error, Result};

pub use baseline::{Baseline, BaselineKind, StumpConfig};
pub use corpus::{synth_corpus, CorpusSpec};
pub use features::{featurize, featurize_all, FEATURE_NAMES};
pub use grid::{eval_grid, split_by_record, train_grid, CellBaselines, ForecastModel, GridCell, GridReport};

pub const WINDOWS_S: [u32; 6] = [10, 30, 60, 120, 300, 600];
pub const HORIZONS_S: [u32; 4] = [60, 180, 300, 600];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastTask {
    /// NORM vs ABNORMAL.
    #[default]
    Binary,
    /// NORM vs AFIB vs AFL.
    ThreeClass,
}

impl ForecastTask {
    pub fn n_classes(self) -> usize {
        match self {
            ForecastTask::Binary => 2,
            ForecastTask::ThreeClass => 3,
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            ForecastTask::Binary => &["NORM", "ABNORMAL"],
            ForecastTask::ThreeClass => &["NORM", "AFIB", "AFL"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastSpec {
    pub window_s: u32,
    pub horizon_s: u32,
    /// Defaults to half the window.
    #[serde(default)]
    pub stride_s: Option<u32>,
    /// Largest majority:minority ratio kept after balancing.
    #[serde(default = "default_ratio")]
    pub balance_ratio: f64,
}

fn default_ratio() -> f64 {
    3.0
}

impl ForecastSpec {
    pub fn new(window_s: u32, horizon_s: u32) -> Self {
        ForecastSpec {
            window_s,
            horizon_s,
            stride_s: None,
            balance_ratio: default_ratio(),
        }
    }

    pub fn stride(&self) -> u32 {
        self.stride_s.unwrap_or((self.window_s / 2).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_s == 0 || self.horizon_s == 0 {
            return Err(Error::invalid("forecast_spec", "window and horizon must be positive"));
        }
        if self.stride() == 0 {
            return Err(Error::invalid("stride_s", "must be positive"));
        }
        if !(self.balance_ratio >= 1.0) {
            return Err(Error::invalid("balance_ratio", format!("{} is below 1", self.balance_ratio)));
        }
        Ok(())
    }
}

/// Every (window, horizon) pair of the benchmark grid.
pub fn grid_specs() -> Vec<ForecastSpec> {
    WINDOWS_S
        .iter()
        .flat_map(|&w| HORIZONS_S.iter().map(move |&h| ForecastSpec::new(w, h)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSample {
    pub record_id: String,
    /// Input span `[t0, t0 + window)`, horizon `(t0 + window, t0 + window + horizon]`.
    pub t0_s: u32,
    pub window_s: u32,
    pub horizon_s: u32,
    pub label: ForecastLabel,
    /// Rhythm of the first AFIB/AFL beat in the horizon.
    pub abnormal_kind: Option<BeatLabel>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub features: Vec<f64>,
}

impl ForecastSample {
    pub fn input_end_s(&self) -> u32 {
        self.t0_s + self.window_s
    }

    /// Class index under `task`, in [`ForecastTask::class_names`] order.
    pub fn class(&self, task: ForecastTask) -> usize {
        match (task, self.abnormal_kind) {
            (_, None) => 0,
            (ForecastTask::Binary, Some(_)) => 1,
            (ForecastTask::ThreeClass, Some(BeatLabel::Afl)) => 2,
            (ForecastTask::ThreeClass, Some(_)) => 1,
        }
    }
}

/// Beats allowed in an input span: sinus beats, including premature atrial
/// ones.
pub fn is_input_beat(label: BeatLabel) -> bool {
    matches!(label, BeatLabel::Norm | BeatLabel::Pac)
}

fn beat_range(positions: &[usize], lo: usize, hi: usize, lo_inclusive: bool, hi_inclusive: bool) -> std::ops::Range<usize> {
    let a = if lo_inclusive {
        positions.partition_point(|&p| p < lo)
    } else {
        positions.partition_point(|&p| p <= lo)
    };
    let b = if hi_inclusive {
        positions.partition_point(|&p| p <= hi)
    } else {
        positions.partition_point(|&p| p < hi)
    };
    a..b.max(a)
}

/// Windows over an annotated beat sequence of `n_samples` samples at `fs`.
/// Balancing is applied per call; see [`balance`].
pub fn extract_from_annotations(
    record_id: &str,
    ann: &BeatAnnotations,
    fs: u32,
    n_samples: usize,
    spec: &ForecastSpec,
    seed: u64,
) -> Result<Vec<ForecastSample>> {
    spec.validate()?;
    let duration = n_samples as u64 / fs as u64;
    let (w, h) = (spec.window_s as u64, spec.horizon_s as u64);
    if duration < w + h {
        return Err(Error::Insufficient(format!(
            "{record_id}: {duration} s record is shorter than window {w} s + horizon {h} s"
        )));
    }
    let (pos, labels) = (ann.positions(), ann.labels());
    let fs64 = fs as usize;
    let mut out = Vec::new();
    let mut t0 = 0u64;
    while t0 + w + h <= duration {
        let start = t0 as usize * fs64;
        let end = (t0 + w) as usize * fs64;
        let input = beat_range(pos, start, end, true, false);
        if !input.is_empty() && labels[input].iter().all(|&l| is_input_beat(l)) {
            let horizon = beat_range(pos, end, (t0 + w + h) as usize * fs64, false, true);
            let kind = labels[horizon].iter().copied().find(|l| l.is_atrial_arrhythmia());
            out.push(ForecastSample {
                record_id: record_id.to_string(),
                t0_s: t0 as u32,
                window_s: spec.window_s,
                horizon_s: spec.horizon_s,
                label: if kind.is_some() { ForecastLabel::Abnormal } else { ForecastLabel::Norm },
                abnormal_kind: kind,
                features: Vec::new(),
            });
        }
        t0 += spec.stride() as u64;
    }
    balance(out, spec.balance_ratio, seed)
}

pub fn extract_samples(record_id: &str, record: &EcgRecord, spec: &ForecastSpec, seed: u64) -> Result<Vec<ForecastSample>> {
    let ann = record
        .annotations()
        .ok_or_else(|| Error::Insufficient(format!("{record_id}: record has no beat annotations")))?;
    extract_from_annotations(record_id, ann, record.fs(), record.n_samples(), spec, seed)
}

/// Downsamples the majority class (NORM vs ABNORMAL) to at most `ratio`
/// times the minority, keeping order. A single-class set is returned whole.
pub fn balance(samples: Vec<ForecastSample>, ratio: f64, seed: u64) -> Result<Vec<ForecastSample>> {
    if !(ratio >= 1.0) {
        return Err(Error::invalid("balance_ratio", format!("{ratio} is below 1")));
    }
    let abnormal = samples.iter().filter(|s| s.label == ForecastLabel::Abnormal).count();
    let normal = samples.len() - abnormal;
    let (minority, majority_label, majority) = if abnormal <= normal {
        (abnormal, ForecastLabel::Norm, normal)
    } else {
        (normal, ForecastLabel::Abnormal, abnormal)
    };
    let cap = (minority as f64 * ratio).floor() as usize;
    if minority == 0 || majority <= cap {
        return Ok(samples);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; majority];
    for i in sample(&mut rng, majority, cap) {
        keep[i] = true;
    }
    let mut k = 0;
    Ok(samples
        .into_iter()
        .filter(|s| {
            if s.label != majority_label {
                return true;
            }
            k += 1;
            keep[k - 1]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Beats every second; rhythm switches to `kind` at `onset` seconds.
    fn timeline(duration: usize, fs: u32, onset: Option<(usize, BeatLabel)>) -> (BeatAnnotations, usize) {
        let fs = fs as usize;
        let pos: Vec<usize> = (0..duration).map(|s| s * fs + fs / 2).collect();
        let labels = (0..duration)
            .map(|s| match onset {
                Some((t, k)) if s >= t => k,
                _ => BeatLabel::Norm,
            })
            .collect();
        (BeatAnnotations::new(pos, labels).unwrap(), duration * fs)
    }

    fn unbalanced(w: u32, h: u32) -> ForecastSpec {
        ForecastSpec {
            balance_ratio: f64::INFINITY,
            ..ForecastSpec::new(w, h)
        }
    }

    #[test]
    fn onset_inside_horizon() {
        let (ann, n) = timeline(1200, 100, Some((700, BeatLabel::Afib)));
        let s = extract_from_annotations("r", &ann, 100, n, &unbalanced(60, 300).with_stride(10), 0).unwrap();
        let at = |t0| s.iter().find(|x| x.t0_s == t0).unwrap();
        assert_eq!(at(400).label, ForecastLabel::Abnormal);
        assert_eq!(at(400).abnormal_kind, Some(BeatLabel::Afib));
        assert_eq!(at(100).label, ForecastLabel::Norm);
        assert!(s.iter().all(|x| x.input_end_s() <= 700));
    }

    #[test]
    fn arrhythmia_throughout_gives_nothing() {
        let (ann, n) = timeline(1000, 100, Some((0, BeatLabel::Afl)));
        assert!(extract_from_annotations("r", &ann, 100, n, &ForecastSpec::new(60, 60), 0).unwrap().is_empty());
    }

    #[test]
    fn short_record_and_missing_annotations() {
        let (ann, n) = timeline(100, 100, None);
        assert!(extract_from_annotations("r", &ann, 100, n, &ForecastSpec::new(60, 60), 0).is_err());
        let rec = EcgRecord::new(vec![vec![0.0; 1000]], vec!["II".into()], 100).unwrap();
        assert!(extract_samples("r", &rec, &ForecastSpec::new(1, 1), 0).is_err());
    }

    #[test]
    fn balancing_caps_majority_and_keeps_content() {
        let (ann, n) = timeline(3000, 50, Some((2800, BeatLabel::Afib)));
        let spec = ForecastSpec {
            stride_s: Some(10),
            ..ForecastSpec::new(30, 60)
        };
        let all = extract_from_annotations("r", &ann, 50, n, &unbalanced(30, 60).with_stride(10), 1).unwrap();
        let bal = extract_from_annotations("r", &ann, 50, n, &spec, 1).unwrap();
        let ab = bal.iter().filter(|s| s.label == ForecastLabel::Abnormal).count();
        assert_eq!(ab, all.iter().filter(|s| s.label == ForecastLabel::Abnormal).count());
        assert_eq!(bal.len() - ab, 3 * ab);
        assert!(bal.iter().all(|s| all.contains(s)));
        assert_eq!(bal, extract_from_annotations("r", &ann, 50, n, &spec, 1).unwrap());
    }

    #[test]
    fn grid_is_complete() {
        let g = grid_specs();
        assert_eq!(g.len(), 24);
        assert_eq!(g[0].stride(), 5);
    }

    #[test]
    fn three_class_index() {
        let mut s = ForecastSample {
            record_id: "r".into(),
            t0_s: 0,
            window_s: 10,
            horizon_s: 60,
            label: ForecastLabel::Abnormal,
            abnormal_kind: Some(BeatLabel::Afl),
            features: vec![],
        };
        assert_eq!((s.class(ForecastTask::Binary), s.class(ForecastTask::ThreeClass)), (1, 2));
        s.abnormal_kind = Some(BeatLabel::Afib);
        assert_eq!(s.class(ForecastTask::ThreeClass), 1);
    }

    impl ForecastSpec {
        fn with_stride(mut self, s: u32) -> Self {
            self.stride_s = Some(s);
            self
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        /// Beats at random gaps with piecewise rhythm labels and sparse PACs.
        fn annotated(fs: u32) -> impl Strategy<Value = (BeatAnnotations, usize)> {
            (
                prop::collection::vec((3usize..=15, 0u8..10), 50..400),
                prop::collection::vec((0usize..2000, 0u8..4), 0..4),
            )
                .prop_map(move |(gaps, switches)| {
                    let mut pos = Vec::new();
                    let mut t = fs as usize;
                    for (g, _) in &gaps {
                        pos.push(t);
                        t += g * fs as usize / 2;
                    }
                    let labels = pos
                        .iter()
                        .enumerate()
                        .map(|(i, &p)| {
                            let rhythm = switches
                                .iter()
                                .filter(|(at, _)| *at * fs as usize <= p)
                                .max_by_key(|(at, _)| *at)
                                .map_or(0, |(_, r)| *r);
                            match (rhythm, gaps[i].1) {
                                (1, _) => BeatLabel::Afib,
                                (2, _) => BeatLabel::Afl,
                                (3, 0) => BeatLabel::Other,
                                (_, 0) => BeatLabel::Pac,
                                _ => BeatLabel::Norm,
                            }
                        })
                        .collect();
                    (BeatAnnotations::new(pos, labels).unwrap(), t + fs as usize)
                })
        }

        /// Every stride position, judged by scanning every beat.
        fn brute_force(ann: &BeatAnnotations, fs: u32, n: usize, spec: &ForecastSpec) -> Vec<(u32, Option<BeatLabel>)> {
            let fs = fs as usize;
            let (w, h) = (spec.window_s as usize, spec.horizon_s as usize);
            let mut out = Vec::new();
            let mut t0 = 0;
            while (t0 + w + h) * fs <= n - n % fs {
                let (a, e) = (t0 * fs, (t0 + w) * fs);
                let mut any = false;
                let mut clean = true;
                let mut kind = None;
                for (p, l) in ann.iter() {
                    if a <= p && p < e {
                        any = true;
                        clean &= !matches!(l, BeatLabel::Afib | BeatLabel::Afl | BeatLabel::Other);
                    }
                    if e < p && p <= e + h * fs && kind.is_none() && matches!(l, BeatLabel::Afib | BeatLabel::Afl) {
                        kind = Some(l);
                    }
                }
                if any && clean {
                    out.push((t0 as u32, kind));
                }
                t0 += spec.stride() as usize;
            }
            out
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn labels_match_brute_force(
                (ann, n) in annotated(10),
                wi in 0usize..6,
                hi in 0usize..4,
                seed in any::<u64>(),
            ) {
                let spec = ForecastSpec::new(WINDOWS_S[wi], HORIZONS_S[hi]);
                let open = ForecastSpec { balance_ratio: f64::INFINITY, ..spec };
                match extract_from_annotations("r", &ann, 10, n, &open, seed) {
                    Err(_) => prop_assert!(n / 10 < (spec.window_s + spec.horizon_s) as usize),
                    Ok(all) => {
                        let got: Vec<(u32, Option<BeatLabel>)> = all.iter().map(|s| (s.t0_s, s.abnormal_kind)).collect();
                        prop_assert_eq!(got, brute_force(&ann, 10, n, &spec));
                        for s in &all {
                            prop_assert_eq!(s.label == ForecastLabel::Abnormal, s.abnormal_kind.is_some());
                        }
                        let bal = extract_from_annotations("r", &ann, 10, n, &spec, seed).unwrap();
                        prop_assert!(bal.iter().all(|s| all.contains(s)));
                        let ab = bal.iter().filter(|s| s.label == ForecastLabel::Abnormal).count();
                        let (lo, hi) = (ab.min(bal.len() - ab), ab.max(bal.len() - ab));
                        prop_assert!(lo == 0 || hi as f64 <= 3.0 * lo as f64);
                    }
                }
            }
        }
    }
}
