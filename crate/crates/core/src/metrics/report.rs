//! File-level evaluation: join prediction and truth JSONL files by id and
//! emit a JSON metric report.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{accuracy, auroc, hamming, linear_probe, macro_f1, rmse, HammingMode, ProbeConfig};
use crate::signal::read_jsonl;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTask {
    /// `label` (single) or `labels` (set) per line.
    Classify,
    /// `label` per line; cells keyed by `window_s`/`horizon_s` when present.
    Forecast,
    /// `values`: object of named numbers per line.
    Grounding,
    /// Predictions carry `score` or `embedding`; truth carries a boolean `label`.
    Probe,
}

impl FromStr for EvalTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(EvalTask::Classify),
            "forecast" => Ok(EvalTask::Forecast),
            "grounding" => Ok(EvalTask::Grounding),
            "probe" => Ok(EvalTask::Probe),
            _ => Err(Error::invalid("task", format!("unknown task {s:?}; expected classify, forecast, grounding or probe"))),
        }
    }
}

/// Line id: `id` when present, else `record_id:t0_s:window_s:horizon_s`
/// (the forecast benchmark layout).
fn line_id(v: &Value, line: usize) -> Result<String> {
    if let Some(id) = v.get("id") {
        return Ok(match id {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        });
    }
    let parts: Option<Vec<String>> = ["record_id", "t0_s", "window_s", "horizon_s"]
        .iter()
        .map(|k| {
            v.get(*k).map(|x| match x {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            })
        })
        .collect();
    parts
        .map(|p| p.join(":"))
        .ok_or_else(|| Error::invalid("id", format!("line {line} has no id")))
}

fn keyed(rows: Vec<Value>) -> Result<(Vec<String>, HashMap<String, Value>)> {
    let mut order = Vec::with_capacity(rows.len());
    let mut map = HashMap::with_capacity(rows.len());
    for (i, v) in rows.into_iter().enumerate() {
        let id = line_id(&v, i + 1)?;
        if map.insert(id.clone(), v).is_some() {
            return Err(Error::invalid("id", format!("duplicate id {id:?}")));
        }
        order.push(id);
    }
    Ok((order, map))
}

/// Truth rows in file order, each with its prediction.
fn join(pred: Vec<Value>, truth: Vec<Value>) -> Result<Vec<(Value, Value)>> {
    let (_, mut p) = keyed(pred)?;
    let (order, mut t) = keyed(truth)?;
    if order.is_empty() {
        return Err(Error::Insufficient("truth file is empty".into()));
    }
    order
        .into_iter()
        .map(|id| {
            let pv = p.remove(&id).ok_or_else(|| Error::invalid("pred", format!("no prediction for id {id:?}")))?;
            Ok((pv, t.remove(&id).expect("id from truth")))
        })
        .collect()
}

fn field<'a>(v: &'a Value, key: &'static str) -> Result<&'a Value> {
    v.get(key).ok_or_else(|| Error::invalid(key, "missing field"))
}

fn label_str(v: &Value) -> Result<String> {
    match field(v, "label")? {
        Value::String(s) => Ok(s.clone()),
        other => Ok(other.to_string()),
    }
}

fn label_set(v: &Value) -> Result<BTreeSet<String>> {
    match field(v, "labels")? {
        Value::Array(a) => Ok(a.iter().map(|x| x.as_str().map(str::to_string).unwrap_or_else(|| x.to_string())).collect()),
        _ => Err(Error::invalid("labels", "expected a list")),
    }
}

fn classify(pairs: &[(Value, Value)]) -> Result<Value> {
    if pairs[0].1.get("labels").is_some() {
        let p: Vec<BTreeSet<String>> = pairs.iter().map(|(p, _)| label_set(p)).collect::<Result<_>>()?;
        let t: Vec<BTreeSet<String>> = pairs.iter().map(|(_, t)| label_set(t)).collect::<Result<_>>()?;
        return Ok(json!({
            "n": pairs.len(),
            "hamming": hamming(&p, &t, HammingMode::Jaccard)?,
            "exact_match": accuracy(&p, &t)?,
        }));
    }
    let p: Vec<String> = pairs.iter().map(|(p, _)| label_str(p)).collect::<Result<_>>()?;
    let t: Vec<String> = pairs.iter().map(|(_, t)| label_str(t)).collect::<Result<_>>()?;
    Ok(json!({
        "n": pairs.len(),
        "macro_f1": macro_f1(&p, &t)?,
        "accuracy": accuracy(&p, &t)?,
    }))
}

fn forecast(pairs: &[(Value, Value)]) -> Result<Value> {
    let mut report = classify(pairs)?;
    let mut cells: BTreeMap<(u64, u64), Vec<usize>> = BTreeMap::new();
    for (i, (_, t)) in pairs.iter().enumerate() {
        if let (Some(w), Some(h)) = (t.get("window_s").and_then(Value::as_u64), t.get("horizon_s").and_then(Value::as_u64)) {
            cells.entry((w, h)).or_default().push(i);
        }
    }
    let rows: Vec<Value> = cells
        .into_iter()
        .map(|((w, h), idx)| {
            let sub: Vec<(Value, Value)> = idx.iter().map(|&i| pairs[i].clone()).collect();
            let p: Vec<String> = sub.iter().map(|(p, _)| label_str(p)).collect::<Result<_>>()?;
            let t: Vec<String> = sub.iter().map(|(_, t)| label_str(t)).collect::<Result<_>>()?;
            Ok(json!({"window_s": w, "horizon_s": h, "n": idx.len(), "macro_f1": macro_f1(&p, &t)?}))
        })
        .collect::<Result<_>>()?;
    report["cells"] = Value::Array(rows);
    Ok(report)
}

fn numbers(v: &Value) -> Result<BTreeMap<String, f64>> {
    let obj = field(v, "values")?
        .as_object()
        .ok_or_else(|| Error::invalid("values", "expected an object"))?;
    Ok(obj.iter().filter_map(|(k, x)| x.as_f64().map(|f| (k.clone(), f))).collect())
}

fn grounding(pairs: &[(Value, Value)]) -> Result<Value> {
    let mut per: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut missing = 0usize;
    for (p, t) in pairs {
        let (p, t) = (numbers(p)?, numbers(t)?);
        for (k, tv) in t {
            match p.get(&k) {
                Some(&pv) => {
                    let e = per.entry(k).or_default();
                    e.0.push(pv);
                    e.1.push(tv);
                }
                None => missing += 1,
            }
        }
    }
    let mut fields = Map::new();
    for (k, (p, t)) in &per {
        fields.insert(k.clone(), json!({"n": p.len(), "rmse": rmse(p, t)?}));
    }
    Ok(json!({"n": pairs.len(), "missing_values": missing, "fields": fields}))
}

fn truth_bool(v: &Value) -> Result<bool> {
    match field(v, "label")? {
        Value::Bool(b) => Ok(*b),
        Value::Number(n) if n.as_f64() == Some(0.0) || n.as_f64() == Some(1.0) => Ok(n.as_f64() == Some(1.0)),
        _ => Err(Error::invalid("label", "expected a boolean or 0/1")),
    }
}

fn probe(pairs: &[(Value, Value)], cfg: &ProbeConfig) -> Result<Value> {
    let y: Vec<bool> = pairs.iter().map(|(_, t)| truth_bool(t)).collect::<Result<_>>()?;
    if pairs[0].0.get("embedding").is_some() {
        let x: Vec<Vec<f64>> = pairs
            .iter()
            .map(|(p, _)| {
                field(p, "embedding")?
                    .as_array()
                    .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                    .ok_or_else(|| Error::invalid("embedding", "expected a list of numbers"))
            })
            .collect::<Result<_>>()?;
        return Ok(json!({"n": pairs.len(), "auroc": linear_probe(&x, &y, cfg)?, "train_ratio": cfg.train_ratio, "seed": cfg.seed}));
    }
    let s: Vec<f64> = pairs
        .iter()
        .map(|(p, _)| field(p, "score")?.as_f64().ok_or_else(|| Error::invalid("score", "expected a number")))
        .collect::<Result<_>>()?;
    Ok(json!({"n": pairs.len(), "auroc": auroc(&s, &y)?}))
}

/// Metric report for prediction/truth rows.
pub fn evaluate_rows(task: EvalTask, pred: Vec<Value>, truth: Vec<Value>, probe_cfg: &ProbeConfig) -> Result<Value> {
    let pairs = join(pred, truth)?;
    let mut report = match task {
        EvalTask::Classify => classify(&pairs)?,
        EvalTask::Forecast => forecast(&pairs)?,
        EvalTask::Grounding => grounding(&pairs)?,
        EvalTask::Probe => probe(&pairs, probe_cfg)?,
    };
    report["task"] = serde_json::to_value(task)?;
    Ok(report)
}

pub fn evaluate_files(task: EvalTask, pred: &Path, truth: &Path, probe_cfg: &ProbeConfig) -> Result<Value> {
    evaluate_rows(task, read_jsonl(pred)?, read_jsonl(truth)?, probe_cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(s: &str) -> Vec<Value> {
        s.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    }

    #[test]
    fn classify_joins_by_id() {
        let truth = rows("{\"id\":\"a\",\"label\":\"X\"}\n{\"id\":\"b\",\"label\":\"Y\"}");
        let pred = rows("{\"id\":\"b\",\"label\":\"Y\"}\n{\"id\":\"a\",\"label\":\"X\"}");
        let r = evaluate_rows(EvalTask::Classify, pred, truth, &ProbeConfig::default()).unwrap();
        assert_eq!(r["macro_f1"], 100.0);
        assert_eq!(r["task"], "classify");
    }

    #[test]
    fn missing_prediction_is_an_error() {
        let truth = rows("{\"id\":\"a\",\"label\":\"X\"}");
        assert!(evaluate_rows(EvalTask::Classify, vec![], truth, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn multilabel_uses_hamming() {
        let truth = rows("{\"id\":1,\"labels\":[\"A\"]}");
        let pred = rows("{\"id\":1,\"labels\":[\"A\",\"B\"]}");
        let r = evaluate_rows(EvalTask::Classify, pred, truth, &ProbeConfig::default()).unwrap();
        assert_eq!(r["hamming"], 50.0);
    }

    #[test]
    fn forecast_cells_from_benchmark_rows() {
        let truth = rows(concat!(
            "{\"record_id\":\"r\",\"t0_s\":0,\"window_s\":10,\"horizon_s\":60,\"label\":\"NORM\"}\n",
            "{\"record_id\":\"r\",\"t0_s\":5,\"window_s\":10,\"horizon_s\":60,\"label\":\"ABNORMAL\"}"
        ));
        let pred = rows("{\"id\":\"r:0:10:60\",\"label\":\"NORM\"}\n{\"id\":\"r:5:10:60\",\"label\":\"NORM\"}");
        let r = evaluate_rows(EvalTask::Forecast, pred, truth, &ProbeConfig::default()).unwrap();
        assert_eq!(r["cells"][0]["n"], 2);
        // NORM F1 = 2/3, ABNORMAL F1 = 0.
        assert!((r["macro_f1"].as_f64().unwrap() - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn grounding_rmse_per_field() {
        let truth = rows("{\"id\":1,\"values\":{\"hr\":70,\"pr\":160}}\n{\"id\":2,\"values\":{\"hr\":80}}");
        let pred = rows("{\"id\":1,\"values\":{\"hr\":73}}\n{\"id\":2,\"values\":{\"hr\":76}}");
        let r = evaluate_rows(EvalTask::Grounding, pred, truth, &ProbeConfig::default()).unwrap();
        assert!((r["fields"]["hr"]["rmse"].as_f64().unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(r["missing_values"], 1);
    }

    #[test]
    fn probe_scores() {
        let truth = rows("{\"id\":1,\"label\":0}\n{\"id\":2,\"label\":0}\n{\"id\":3,\"label\":1}\n{\"id\":4,\"label\":1}");
        let pred = rows("{\"id\":1,\"score\":0.1}\n{\"id\":2,\"score\":0.4}\n{\"id\":3,\"score\":0.35}\n{\"id\":4,\"score\":0.8}");
        let r = evaluate_rows(EvalTask::Probe, pred, truth, &ProbeConfig::default()).unwrap();
        assert_eq!(r["auroc"], 0.75);
    }
}
