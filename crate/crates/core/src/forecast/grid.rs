use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Baseline, BaselineKind, ForecastSample, ForecastSpec, ForecastTask};
use crate::metrics::macro_f1;
use crate::{Error, Result};

/// Anything that maps a featurized sample to a class index.
pub trait ForecastModel: Sync {
    fn name(&self) -> String;
    /// `None` when the model has nothing to say for this sample's cell.
    fn predict(&self, sample: &ForecastSample) -> Option<usize>;
}

/// One baseline per (window, horizon) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellBaselines {
    pub kind: BaselineKind,
    pub task: ForecastTask,
    pub cells: Vec<((u32, u32), Baseline)>,
}

impl CellBaselines {
    pub fn get(&self, w: u32, h: u32) -> Option<&Baseline> {
        self.cells.iter().find(|(k, _)| *k == (w, h)).map(|(_, b)| b)
    }
}

impl ForecastModel for CellBaselines {
    fn name(&self) -> String {
        self.kind.as_str().to_string()
    }

    fn predict(&self, s: &ForecastSample) -> Option<usize> {
        self.get(s.window_s, s.horizon_s).map(|b| b.predict(&s.features).0)
    }
}

fn by_cell(samples: &[ForecastSample]) -> BTreeMap<(u32, u32), Vec<&ForecastSample>> {
    let mut m: BTreeMap<(u32, u32), Vec<&ForecastSample>> = BTreeMap::new();
    for s in samples {
        m.entry((s.window_s, s.horizon_s)).or_default().push(s);
    }
    m
}

/// Trains a baseline for every cell present in `train`. Cells holding a
/// single class are skipped and later reported as absent.
pub fn train_grid(kind: BaselineKind, train: &[ForecastSample], task: ForecastTask, seed: u64) -> Result<CellBaselines> {
    let mut cells = Vec::new();
    for (key, group) in by_cell(train) {
        if group.iter().any(|s| s.features.is_empty()) {
            return Err(Error::invalid("features", format!("cell w={} h={} has unfeaturized samples", key.0, key.1)));
        }
        let x: Vec<Vec<f64>> = group.iter().map(|s| s.features.clone()).collect();
        let y: Vec<usize> = group.iter().map(|s| s.class(task)).collect();
        match Baseline::train(kind, &x, &y, task.n_classes(), seed) {
            Ok(b) => cells.push((key, b)),
            Err(Error::Insufficient(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(CellBaselines { kind, task, cells })
}

/// Record-level split: every sample of a record lands on the same side.
pub fn split_by_record(samples: Vec<ForecastSample>, test_fraction: f64, seed: u64) -> Result<(Vec<ForecastSample>, Vec<ForecastSample>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid("test_fraction", format!("{test_fraction} not in [0, 1)")));
    }
    let mut ids: Vec<&str> = samples.iter().map(|s| s.record_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (ids.len() as f64 * test_fraction).round() as usize;
    let test_ids: BTreeSet<String> = ids[..n_test].iter().map(|s| s.to_string()).collect();
    Ok(samples.into_iter().partition(|s| !test_ids.contains(&s.record_id)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub model: String,
    pub window_s: u32,
    pub horizon_s: u32,
    pub n: usize,
    /// Macro-F1 in percent; `None` for an empty or unscored cell.
    pub macro_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub task: ForecastTask,
    pub cells: Vec<GridCell>,
}

impl GridReport {
    pub fn get(&self, model: &str, w: u32, h: u32) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.model == model && c.window_s == w && c.horizon_s == h)
    }

    /// Mean F1 over the scored horizons of window `w`.
    pub fn window_mean(&self, model: &str, w: u32) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.model == model && c.window_s == w)
            .filter_map(|c| c.macro_f1)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Rows keyed by (model, w), one column per horizon; absent cells print `-`.
    pub fn to_table(&self) -> String {
        let models: Vec<&str> = self.cells.iter().fold(Vec::new(), |mut v, c| {
            if !v.contains(&c.model.as_str()) {
                v.push(c.model.as_str());
            }
            v
        });
        let ws: BTreeSet<u32> = self.cells.iter().map(|c| c.window_s).collect();
        let hs: BTreeSet<u32> = self.cells.iter().map(|c| c.horizon_s).collect();
        let mut out = format!("{:<16} {:>6}", "model", "w (s)");
        for h in &hs {
            let _ = write!(out, " {:>8}", format!("h={h}"));
        }
        out.push('\n');
        for m in models {
            for &w in &ws {
                let _ = write!(out, "{m:<16} {w:>6}");
                for &h in &hs {
                    let cell = self.get(m, w, h).and_then(|c| c.macro_f1);
                    let _ = match cell {
                        Some(f) => write!(out, " {f:>8.2}"),
                        None => write!(out, " {:>8}", "-"),
                    };
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Macro-F1 of every model on every cell in `specs`, cells in parallel.
pub fn eval_grid(models: &[&dyn ForecastModel], samples: &[ForecastSample], specs: &[ForecastSpec], task: ForecastTask) -> GridReport {
    let cells = by_cell(samples);
    let jobs: Vec<(&dyn ForecastModel, &ForecastSpec)> = models.iter().flat_map(|&m| specs.iter().map(move |s| (m, s))).collect();
    let cells = jobs
        .par_iter()
        .map(|(m, spec)| {
            let group = cells.get(&(spec.window_s, spec.horizon_s)).map(Vec::as_slice).unwrap_or(&[]);
            let preds: Option<Vec<usize>> = group.iter().map(|s| m.predict(s)).collect();
            let labels: Vec<usize> = group.iter().map(|s| s.class(task)).collect();
            let f1 = preds.and_then(|p| macro_f1(&p, &labels).ok());
            GridCell {
                model: m.name(),
                window_s: spec.window_s,
                horizon_s: spec.horizon_s,
                n: group.len(),
                macro_f1: f1,
            }
        })
        .collect();
    GridReport { task, cells }
}
