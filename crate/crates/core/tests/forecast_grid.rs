use std::collections::HashMap;
use std::time::Instant;

use ecglm_core::forecast::{
    eval_grid, extract_samples, featurize_all, split_by_record, synth_corpus, train_grid, BaselineKind, CorpusSpec,
    ForecastModel, ForecastSpec, ForecastTask, HORIZONS_S,
};

#[test]
fn longer_windows_forecast_better() {
    let t = Instant::now();
    let corpus = synth_corpus(&CorpusSpec::default(), 11).unwrap();
    let lookup: HashMap<&str, _> = corpus.iter().map(|(id, r)| (id.as_str(), r)).collect();
    println!("corpus {:.1}s", t.elapsed().as_secs_f64());
    let specs: Vec<ForecastSpec> = [10, 300]
        .iter()
        .flat_map(|&w| HORIZONS_S.iter().map(move |&h| ForecastSpec::new(w, h)))
        .collect();
    let mut samples = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        for (id, rec) in &corpus {
            samples.extend(extract_samples(id, rec, spec, i as u64).unwrap());
        }
    }
    featurize_all(&mut samples, |id| lookup.get(id).copied()).unwrap();
    println!("features {:.1}s ({} samples)", t.elapsed().as_secs_f64(), samples.len());
    let (train, test) = split_by_record(samples, 0.3, 5).unwrap();
    let models: Vec<_> = BaselineKind::ALL
        .iter()
        .map(|&k| train_grid(k, &train, ForecastTask::Binary, 0).unwrap())
        .collect();
    let refs: Vec<&dyn ForecastModel> = models.iter().map(|m| m as &dyn ForecastModel).collect();
    let report = eval_grid(&refs, &test, &specs, ForecastTask::Binary);
    println!("{}\n{:.1}s", report.to_table(), t.elapsed().as_secs_f64());
    for m in &models {
        let name = m.name();
        let (short, long) = (report.window_mean(&name, 10).unwrap(), report.window_mean(&name, 300).unwrap());
        assert!(long >= short, "{name}: w=300 {long:.1} < w=10 {short:.1}");
    }
}
