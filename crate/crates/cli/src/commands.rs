use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand, ValueEnum};
use serde_json::json;

use ecglm_core::datagen::{ClientConfig, LlmClient};
use ecglm_core::forecast::{
    eval_grid, extract_samples, featurize_all, grid_specs, split_by_record, synth_corpus, train_grid, BaselineKind,
    CellBaselines, ForecastModel, ForecastSample, ForecastSpec,
};
use ecglm_core::mask::{build_mask, MaskScheme};
use ecglm_core::metrics::{evaluate_files, EvalTask, ProbeConfig};
use ecglm_core::neural::checkpoint::{save_checkpoint, Dtype};
use ecglm_core::neural::gradcheck::{gradcheck_autoencoder, gradcheck_lm, gradcheck_ops};
use ecglm_core::neural::{run_ablation_with, train_autoencoder, AblationConfig};
use ecglm_core::pipeline::{load_records, run_demo, run_stage, Manifest, PipelineConfig};
use ecglm_core::preprocess::{preprocess, CleanOutcome};
use ecglm_core::signal::{
    load_record, random_segments, read_jsonl, save_record, synth_ecg, write_jsonl, EcgRecord, LeadSpec, Rhythm,
    SynthSpec, WaveParams,
};
use ecglm_core::stats::stat_report;
use ecglm_core::tokenizer::{assemble, read_sequence, segment, write_sequence, EcgBlock, Part, Role};

use crate::log::Log;
use crate::{Cli, Command};

/// Largest relative error accepted by `gradcheck`.
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Args, Debug)]
pub struct InOut {
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// JSON synthesis spec; replaces the flags below.
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 10.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 500)]
    pub fs: u32,
    #[arg(long, default_value_t = 60.0)]
    pub hr: f64,
    /// RR jitter standard deviation in ms.
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
    #[arg(long, value_delimiter = ',', default_value = "II")]
    pub leads: Vec<String>,
    /// 1-based beat numbers to make premature.
    #[arg(long, value_delimiter = ',')]
    pub pac: Vec<usize>,
    /// Rhythm schedule as `start_s:RHYTHM` pairs, e.g. `0:NORM,30:AFIB`.
    #[arg(long, value_delimiter = ',')]
    pub rhythm: Vec<String>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// Defaults to stdout.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TokenizeArgs {
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Text token ids placed before the ECG block.
    #[arg(long, value_delimiter = ',')]
    pub text: Vec<u32>,
    /// Assistant token ids placed after the ECG block.
    #[arg(long, value_delimiter = ',')]
    pub answer: Vec<u32>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MaskFormat {
    Bin,
    Pbm,
}

#[derive(Args, Debug)]
pub struct MaskArgs {
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// lead_aware, full_ecg or causal (default from config).
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long, value_enum, default_value = "bin")]
    pub format: MaskFormat,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Write the report as JSON.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainAeArgs {
    /// Directory of `.ecg` records; they are preprocessed with the config.
    #[arg(long = "in", value_name = "DIR")]
    pub input: Option<PathBuf>,
    /// Random synthetic segments added to the training set.
    #[arg(long, default_value_t = 0)]
    pub synthetic: usize,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainLmArgs {
    /// Output directory for checkpoints and the report.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Mask schemes to train (default: the config's scheme).
    #[arg(long, value_delimiter = ',')]
    pub schemes: Vec<String>,
    /// Training seeds (default: the run seed).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DatagenArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=5))]
    pub stage: u8,
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Use the offline mock instead of the configured endpoint.
    #[arg(long)]
    pub mock: bool,
}

#[derive(Subcommand, Debug)]
pub enum ForecastCmd {
    /// Extract and featurize benchmark samples.
    Build(BuildArgs),
    /// Train per-cell baselines on the benchmark's training records.
    Train(BenchTrainArgs),
    /// Score trained baselines on the held-out records.
    Eval(BenchEvalArgs),
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    /// Directory of annotated `.ecg` records.
    #[arg(long = "in", value_name = "DIR", conflicts_with = "synthetic")]
    pub input: Option<PathBuf>,
    /// Use the configured synthetic corpus.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Every window/horizon pair instead of the configured subset.
    #[arg(long)]
    pub full_grid: bool,
}

#[derive(Args, Debug)]
pub struct BenchTrainArgs {
    #[arg(long, value_name = "DIR")]
    pub bench: PathBuf,
    /// Defaults to `<bench>/models.json`.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub baselines: Vec<String>,
}

#[derive(Args, Debug)]
pub struct BenchEvalArgs {
    #[arg(long, value_name = "DIR")]
    pub bench: PathBuf,
    /// Defaults to `<bench>/models.json`.
    #[arg(long, value_name = "FILE")]
    pub models: Option<PathBuf>,
    /// Defaults to `<bench>/grid.json`.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// classify, forecast, grounding or probe.
    #[arg(long)]
    pub task: String,
    #[arg(long, value_name = "FILE")]
    pub pred: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub truth: PathBuf,
    /// Defaults to stdout.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DemoArgs {
    /// Defaults to the config's out_dir, else `demo_out`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

fn config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load_with_env(cli.global.config.as_deref())?;
    if let Some(s) = cli.global.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.global.workers {
        cfg.workers = Some(w);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest_for(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    file.with_file_name(name)
}

/// Writes `<file>.manifest.json` next to a single-file output.
fn file_manifest(cfg: &PipelineConfig, command: &str, outputs: &[&Path], summary: serde_json::Value) -> Result<()> {
    let first = outputs[0];
    let root = first.parent().unwrap_or(Path::new("."));
    let mut m = Manifest::new(command, cfg.seed, cfg.hash());
    for o in outputs {
        m.add_output(root, o)?;
    }
    m.summary = summary;
    m.write(&manifest_for(first))?;
    Ok(())
}

fn dir_manifest(cfg: &PipelineConfig, command: &str, dir: &Path, summary: serde_json::Value) -> Result<()> {
    let path = dir.join("manifest.json");
    let mut m = Manifest::new(command, cfg.seed, cfg.hash());
    m.add_tree(dir, &path)?;
    m.summary = summary;
    m.write(&path)?;
    Ok(())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn say(text: &str) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn emit(out: Option<&Path>, v: &impl serde::Serialize) -> Result<()> {
    match out {
        Some(p) => write_json(p, v),
        None => {
            say(&format!("{}\n", serde_json::to_string_pretty(v)?))
        }
    }
}

fn parse_rhythm(items: &[String]) -> Result<Vec<(f64, Rhythm)>> {
    if items.is_empty() {
        return Ok(vec![(0.0, Rhythm::Norm)]);
    }
    items
        .iter()
        .map(|s| {
            let (t, r) = s.split_once(':').with_context(|| format!("rhythm entry {s:?} is not start_s:RHYTHM"))?;
            let t: f64 = t.parse().with_context(|| format!("bad start time in {s:?}"))?;
            let r: Rhythm = serde_json::from_value(json!(r.to_ascii_uppercase()))
                .with_context(|| format!("unknown rhythm in {s:?} (NORM, AFIB, AFL)"))?;
            Ok((t, r))
        })
        .collect()
}

fn parse_scheme(s: &str) -> Result<MaskScheme> {
    Ok(s.parse::<MaskScheme>()?)
}

pub fn run(cli: Cli, log: &Log) -> Result<()> {
    let cfg = config(&cli)?;
    cfg.install(|| dispatch(&cli, &cfg, log))?
}

fn dispatch(cli: &Cli, cfg: &PipelineConfig, log: &Log) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(cfg, a),
        Command::Preprocess(a) => preprocess_cmd(cfg, a, log),
        Command::Stats(a) => {
            let rep = stat_report(&load_record(&a.input)?);
            emit(a.out.as_deref(), &rep)?;
            if let Some(o) = &a.out {
                file_manifest(cfg, "stats", &[o], json!({"input": a.input}))?;
            }
            Ok(())
        }
        Command::Tokenize(a) => tokenize(cfg, a),
        Command::Mask(a) => mask(cfg, a),
        Command::Gradcheck(a) => gradcheck(cfg, a, log),
        Command::TrainAe(a) => train_ae(cfg, a, log),
        Command::TrainLm(a) => train_lm(cfg, a, log),
        Command::Datagen(a) => datagen(cfg, a, log),
        Command::Forecastbench(c) => match c {
            ForecastCmd::Build(a) => fb_build(cfg, a, log),
            ForecastCmd::Train(a) => fb_train(cfg, a, log),
            ForecastCmd::Eval(a) => fb_eval(cfg, a),
        },
        Command::Eval(a) => {
            let task: EvalTask = a.task.parse()?;
            let probe = ProbeConfig {
                seed: cfg.seed,
                ..ProbeConfig::default()
            };
            let report = evaluate_files(task, &a.pred, &a.truth, &probe)?;
            emit(a.out.as_deref(), &report)
        }
        Command::Demo(a) => {
            let out = a
                .out
                .clone()
                .or_else(|| cfg.out_dir.clone())
                .unwrap_or_else(|| PathBuf::from("demo_out"));
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let s = run_demo(cfg, &out)?;
            log.info(&format!(
                "demo: {} records ({} rejected), {} tokens, autoencoder held-out MSE/var {:.4}, {} forecast samples",
                s.records, s.rejected, s.tokens, s.ae_heldout_ratio, s.forecast_samples
            ));
            say(&s.grid.to_table())?;
            log.info(&format!("artifacts in {}", out.display()));
            Ok(())
        }
    }
}

fn synth(cfg: &PipelineConfig, a: &SynthArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => SynthSpec {
            duration_s: a.duration,
            fs: a.fs,
            heart_rate_bpm: a.hr,
            rr_jitter_ms: a.jitter,
            pac_positions: a.pac.clone(),
            leads: a.leads.iter().map(|n| LeadSpec::new(n.clone(), WaveParams::default())).collect(),
            rhythm_schedule: parse_rhythm(&a.rhythm)?,
        },
    };
    let rec = synth_ecg(&spec, cfg.seed)?;
    save_record(&rec, &a.out)?;
    file_manifest(cfg, "synth", &[&a.out], json!({"spec": spec}))
}

fn preprocess_cmd(cfg: &PipelineConfig, a: &InOut, log: &Log) -> Result<()> {
    let p = preprocess(&load_record(&a.input)?, &cfg.preprocess)?;
    match p.outcome {
        CleanOutcome::Accepted(rec) => {
            save_record(&rec, &a.out)?;
            file_manifest(cfg, "preprocess", &[&a.out], json!({"steps": p.provenance}))?;
            say(&format!("{}\n", json!({"accepted": true, "steps": p.provenance})))?;
        }
        CleanOutcome::Rejected(r) => {
            log.warn(&format!("{} rejected: {:?} run of {} s on lead {}", a.input.display(), r.reason, r.run_s, r.lead));
            say(&format!("{}\n", json!({"accepted": false, "rejection": r, "steps": p.provenance})))?;
        }
    }
    Ok(())
}

fn tokenize(cfg: &PipelineConfig, a: &TokenizeArgs) -> Result<()> {
    let rec = load_record(&a.input)?;
    let segs = segment(&rec)?;
    let block = EcgBlock::new(rec.n_leads() as u16, segs[0].len() as u32);
    let mut parts = Vec::new();
    let mut texts = Vec::new();
    if !a.text.is_empty() {
        texts.push(a.text.clone());
        parts.push(Part::text(0));
    }
    parts.push(Part::ecg(0));
    if !a.answer.is_empty() {
        texts.push(a.answer.clone());
        parts.push(Part::text(texts.len() - 1).role(Role::Assistant));
    }
    let seq = assemble(&texts, &[block], &parts)?;
    write_sequence(&seq, &a.out)?;
    file_manifest(cfg, "tokenize", &[&a.out], json!({"tokens": seq.len(), "leads": rec.lead_names()}))
}

fn mask(cfg: &PipelineConfig, a: &MaskArgs) -> Result<()> {
    let seq = read_sequence(&a.input)?;
    let scheme = match &a.scheme {
        Some(s) => parse_scheme(s)?,
        None => cfg.mask_scheme,
    };
    let m = build_mask(&seq, scheme);
    match a.format {
        MaskFormat::Bin => m.save(&a.out)?,
        MaskFormat::Pbm => fs::write(&a.out, m.to_pbm()).with_context(|| format!("writing {}", a.out.display()))?,
    }
    file_manifest(cfg, "mask", &[&a.out], json!({"scheme": scheme, "n": m.n(), "allowed": m.count()}))
}

fn gradcheck(cfg: &PipelineConfig, a: &GradcheckArgs, log: &Log) -> Result<()> {
    let mut reports = gradcheck_ops(a.trials, cfg.seed)?;
    reports.push(gradcheck_autoencoder(a.trials.min(5).max(1), cfg.seed)?);
    reports.push(gradcheck_lm(a.trials.min(5).max(1), cfg.seed)?);
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.max_rel_err < GRADCHECK_TOL;
        say(&format!("{:<24} trials={:<3} max_rel_err={:.3e} {}\n", r.op, r.trials, r.max_rel_err, if ok { "ok" } else { "FAIL" }))?;
        if !ok {
            failed.push(r.op.clone());
        }
    }
    if let Some(o) = &a.out {
        write_json(o, &reports)?;
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    log.info(&format!("{} checks below {GRADCHECK_TOL:e}", reports.len()));
    Ok(())
}

fn train_ae(cfg: &PipelineConfig, a: &TrainAeArgs, log: &Log) -> Result<()> {
    let mut segments = Vec::new();
    if let Some(dir) = &a.input {
        for (id, rec) in load_records(dir)? {
            match preprocess(&rec, &cfg.preprocess)?.outcome {
                CleanOutcome::Accepted(r) => segments.extend(segment(&r)?.into_iter().flatten()),
                CleanOutcome::Rejected(r) => log.warn(&format!("{id}: rejected ({:?})", r.reason)),
            }
        }
    }
    segments.extend(random_segments(a.synthetic, cfg.preprocess.target_fs, cfg.seed)?);
    if segments.is_empty() {
        bail!("no training segments: pass --in DIR and/or --synthetic N");
    }
    let n_test = segments.len() / 5;
    let test = segments.split_off(segments.len() - n_test);
    let mut train = cfg.ae_train.clone();
    train.seed = cfg.seed;
    if let Some(e) = a.epochs {
        train.epochs = e;
    }
    let (ae, curve) = train_autoencoder(&segments, &cfg.ae, &train)?;
    let ratio = if test.is_empty() {
        None
    } else {
        let flat: Vec<f64> = test.iter().flatten().copied().collect();
        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
        let var = flat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / flat.len() as f64;
        Some(ae.reconstruction_mse(&test)? / var)
    };
    save_checkpoint(&a.out, "autoencoder", &serde_json::to_value(&cfg.ae)?, &ae.store, Dtype::F64)?;
    let summary = json!({"train_segments": segments.len(), "heldout_segments": test.len(), "curve": curve, "heldout_mse_over_var": ratio});
    log.info(&format!(
        "trained on {} segments; final loss {:.5}; held-out MSE/var {}",
        segments.len(),
        curve.last().copied().unwrap_or(f64::NAN),
        ratio.map_or("n/a".into(), |r| format!("{r:.4}"))
    ));
    file_manifest(cfg, "train-ae", &[&a.out], summary)
}

fn train_lm(cfg: &PipelineConfig, a: &TrainLmArgs, log: &Log) -> Result<()> {
    let mut ab = AblationConfig {
        lm: AblationConfig::default().lm,
        train: cfg.lm_train.clone(),
        ..AblationConfig::default()
    };
    ab.schemes = if a.schemes.is_empty() {
        vec![cfg.mask_scheme]
    } else {
        a.schemes.iter().map(|s| parse_scheme(s)).collect::<Result<_>>()?
    };
    ab.seeds = if a.seeds.is_empty() { vec![cfg.seed] } else { a.seeds.clone() };
    if let Some(n) = a.n_train {
        ab.n_train = n;
    }
    if let Some(n) = a.n_test {
        ab.n_test = n;
    }
    if let Some(e) = a.epochs {
        ab.train.epochs = e;
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let report = run_ablation_with(&ab, |seed, scheme, ae, lm| {
        let cfg_json = serde_json::to_value(&lm.cfg)?;
        save_checkpoint(&a.out.join(format!("lm_{}_seed{seed}.ckpt", scheme.as_str())), "tiny_lm", &cfg_json, &lm.store, Dtype::F64)?;
        save_checkpoint(&a.out.join(format!("ae_seed{seed}.ckpt")), "autoencoder", &serde_json::to_value(&ae.cfg)?, &ae.store, Dtype::F64)
    })?;
    for r in &report.results {
        log.info(&format!("{:<10} accuracy {:?} mean {:.1}%", r.scheme.as_str(), r.accuracy, r.mean));
    }
    let mut stable = serde_json::to_value(&report)?;
    stable.as_object_mut().map(|o| o.remove("elapsed_s"));
    write_json(&a.out.join("report.json"), &stable)?;
    dir_manifest(cfg, "train-lm", &a.out, json!({"config": ab}))
}

fn datagen(cfg: &PipelineConfig, a: &DatagenArgs, log: &Log) -> Result<()> {
    let records = load_records(&a.input)?;
    if records.is_empty() {
        bail!("no .ecg records in {}", a.input.display());
    }
    // Template stages never reach the client.
    let client_cfg = if a.mock || a.stage <= 3 {
        ClientConfig {
            mock: true,
            ..cfg.datagen.client.clone()
        }
    } else {
        cfg.datagen.client.clone().with_env()
    };
    let client = LlmClient::new(client_cfg)?;
    let out = run_stage(a.stage, &records, &cfg.datagen, &client, cfg.seed)?;
    write_jsonl(&a.out, &out.conversations)?;
    for s in &out.skipped {
        log.warn(&format!("skipped {s}"));
    }
    for (id, v) in &out.rejected {
        log.warn(&format!("rejected {id}: {:?} {}", v.kind, v.detail));
    }
    log.info(&format!(
        "stage {}: {} conversations kept, {} violations, {} skipped",
        a.stage,
        out.conversations.len(),
        out.rejected.len(),
        out.skipped.len()
    ));
    file_manifest(
        cfg,
        "datagen",
        &[&a.out],
        json!({"stage": a.stage, "kept": out.conversations.len(), "violations": out.rejected.len(), "skipped": out.skipped.len()}),
    )
}

fn specs(cfg: &PipelineConfig, full: bool) -> Vec<ForecastSpec> {
    if full {
        grid_specs()
            .into_iter()
            .map(|s| ForecastSpec {
                stride_s: cfg.forecast.stride_s,
                balance_ratio: cfg.forecast.balance_ratio,
                ..s
            })
            .collect()
    } else {
        cfg.forecast.specs()
    }
}

fn fb_build(cfg: &PipelineConfig, a: &BuildArgs, log: &Log) -> Result<()> {
    let records: Vec<(String, EcgRecord)> = match (&a.input, a.synthetic) {
        (Some(dir), _) => load_records(dir)?,
        (None, true) => synth_corpus(&cfg.forecast.corpus, cfg.seed)?,
        (None, false) => bail!("pass --in DIR or --synthetic"),
    };
    let specs = specs(cfg, a.full_grid);
    let lookup: HashMap<&str, &EcgRecord> = records.iter().map(|(id, r)| (id.as_str(), r)).collect();
    let mut samples = Vec::new();
    for (k, spec) in specs.iter().enumerate() {
        for (id, rec) in &records {
            match extract_samples(id, rec, spec, cfg.seed.wrapping_add(k as u64)) {
                Ok(s) => samples.extend(s),
                Err(e) => log.warn(&format!("w={} h={}: {e}", spec.window_s, spec.horizon_s)),
            }
        }
    }
    featurize_all(&mut samples, |id| lookup.get(id).copied())?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_jsonl(&a.out.join("benchmark.jsonl"), &samples)?;
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for s in &samples {
        let kind = s.abnormal_kind.map_or("NORM", |k| k.as_str());
        *counts.entry(format!("w{}_h{}", s.window_s, s.horizon_s)).or_default().entry(kind.to_string()).or_default() += 1;
    }
    log.info(&format!("{} samples over {} cells from {} records", samples.len(), counts.len(), records.len()));
    dir_manifest(
        cfg,
        "forecastbench build",
        &a.out,
        json!({"specs": specs, "seed": cfg.seed, "task": cfg.forecast.task, "class_counts": counts}),
    )
}

fn load_bench(dir: &Path) -> Result<Vec<ForecastSample>> {
    Ok(read_jsonl(&dir.join("benchmark.jsonl"))?)
}

fn fb_train(cfg: &PipelineConfig, a: &BenchTrainArgs, log: &Log) -> Result<()> {
    let samples = load_bench(&a.bench)?;
    let (train, test) = split_by_record(samples, cfg.forecast.test_fraction, cfg.seed)?;
    let kinds: Vec<BaselineKind> = if a.baselines.is_empty() {
        BaselineKind::ALL.to_vec()
    } else {
        a.baselines.iter().map(|s| s.parse()).collect::<ecglm_core::Result<_>>()?
    };
    let models: Vec<CellBaselines> = kinds
        .iter()
        .map(|&k| train_grid(k, &train, cfg.forecast.task, cfg.seed))
        .collect::<ecglm_core::Result<_>>()?;
    let mut test_records: Vec<&str> = test.iter().map(|s| s.record_id.as_str()).collect();
    test_records.sort_unstable();
    test_records.dedup();
    let out = a.out.clone().unwrap_or_else(|| a.bench.join("models.json"));
    write_json(&out, &json!({"test_records": test_records, "models": models}))?;
    log.info(&format!("trained {} baselines on {} samples; {} records held out", models.len(), train.len(), test_records.len()));
    file_manifest(cfg, "forecastbench train", &[&out], json!({"train_samples": train.len(), "test_samples": test.len()}))
}

fn fb_eval(cfg: &PipelineConfig, a: &BenchEvalArgs) -> Result<()> {
    let samples = load_bench(&a.bench)?;
    let models_path = a.models.clone().unwrap_or_else(|| a.bench.join("models.json"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&models_path).with_context(|| format!("reading {}", models_path.display()))?)?;
    let test_records: Vec<String> = serde_json::from_value(v["test_records"].clone()).context("models file lacks test_records")?;
    let models: Vec<CellBaselines> = serde_json::from_value(v["models"].clone()).context("models file lacks models")?;
    let test: Vec<ForecastSample> = samples.into_iter().filter(|s| test_records.contains(&s.record_id)).collect();
    let mut specs: Vec<ForecastSpec> = test.iter().map(|s| ForecastSpec::new(s.window_s, s.horizon_s)).collect();
    specs.sort_by_key(|s| (s.window_s, s.horizon_s));
    specs.dedup_by_key(|s| (s.window_s, s.horizon_s));
    let refs: Vec<&dyn ForecastModel> = models.iter().map(|m| m as &dyn ForecastModel).collect();
    let task = models.first().map_or(cfg.forecast.task, |m| m.task);
    let grid = eval_grid(&refs, &test, &specs, task);
    let out = a.out.clone().unwrap_or_else(|| a.bench.join("grid.json"));
    write_json(&out, &grid)?;
    say(&grid.to_table())?;
    file_manifest(cfg, "forecastbench eval", &[&out], json!({"test_samples": test.len()}))
}
