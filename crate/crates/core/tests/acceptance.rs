//! Acceptance suite. Every check prints one `[PASS]`/`[FAIL]` line; the
//! process exits non-zero if any check fails. Tolerances and budgets are the
//! constants below.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ecglm_core::datagen::{
    gen_stage2, gen_stage3, validate_conversation, ClientConfig, Grounding, LlmClient, QaFormat, Stage2Spec, TaskType,
    ViolationKind,
};
use ecglm_core::forecast::{extract_samples, grid_specs, synth_corpus, CorpusSpec};
use ecglm_core::mask::{build_mask, oracle_mask, permute_leads, permute_leads_mask_check, AttentionMask, MaskScheme};
use ecglm_core::metrics::{accuracy, auroc, hamming, macro_f1, rmse, HammingMode};
use ecglm_core::neural::gradcheck::{gradcheck_autoencoder, gradcheck_lm, gradcheck_ops};
use ecglm_core::neural::{
    run_ablation, train_autoencoder, AblationConfig, AeConfig, AeTrainConfig, LmExample, LoraConfig, TinyLm,
    TinyLmConfig,
};
use ecglm_core::pipeline::{run_demo, run_stage, DatagenConfig, PipelineConfig};
use ecglm_core::signal::{
    random_segments, synth_ecg, synth_ecg_with_truth, BeatAnnotations, BeatLabel, EcgRecord, LeadSpec, Rhythm,
    SynthSpec, WaveParams,
};
use ecglm_core::stats::hrv::heart_rate_from_mean;
use ecglm_core::stats::{stat_report, StatFields};
use ecglm_core::tokenizer::{assemble, block_token_count, EcgBlock, Part, PositionMode, Role, Token, TokenSequence};

const MASK_SEQUENCES: usize = 1000;
const MASK_BUDGET: Duration = Duration::from_secs(30);
const PERMUTATIONS: usize = 200;
const FLOW_CONFIGS: usize = 50;
const FLOW_TOL: f64 = 1e-10;
const GRAD_TRIALS: usize = 20;
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(5 * 60);
const AE_SEGMENTS: usize = 1000;
const AE_EPOCHS: usize = 30;
const AE_MAX_RATIO: f64 = 0.10;
const AE_BUDGET: Duration = Duration::from_secs(5 * 60);
const STATS_SPECS: usize = 50;
const HR_TOL_BPM: f64 = 1.0;
const RPEAK_TOL: usize = 2;
const PR_TOL_MS: f64 = 12.0;
const FORECAST_RECORDS: usize = 100;
const ABLATION_MARGIN: f64 = 20.0;
const ABLATION_BUDGET: Duration = Duration::from_secs(20 * 60);
const METRIC_TOL: f64 = 1e-9;
const RANDOM_METRIC_CASES: usize = 100;
const DEMO_BUDGET: Duration = Duration::from_secs(10 * 60);

type Check = fn() -> Result<String, String>;

fn main() {
    let checks: [(&str, Check); 13] = [
        ("mask oracle equivalence", mask_oracle),
        ("lead-permutation conjugation", lead_permutation),
        ("information flow", information_flow),
        ("gradient verification", gradients),
        ("autoencoder reconstruction", autoencoder),
        ("worked examples", worked_examples),
        ("stats oracle", stats_oracle),
        ("forecast labelling", forecast_labels),
        ("masking ablation", ablation),
        ("metric oracles", metric_oracles),
        ("token-count law", token_law),
        ("pipeline determinism", determinism),
        ("datagen validators", datagen_validators),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("[PASS] {name}: {detail} ({secs:.1} s)"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name}: {detail} ({secs:.1} s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(start: Instant, budget: Duration) -> Result<(), String> {
    let e = start.elapsed();
    ensure(e <= budget, || format!("took {:.1} s, budget {} s", e.as_secs_f64(), budget.as_secs()))
}

// ---------------------------------------------------------------- masks

/// 1-2 ECG blocks (distinct lead ids, L <= max_l, T <= max_t) shuffled
/// among up to three text parts with random roles.
fn random_sequence(rng: &mut ChaCha8Rng, max_l: usize, max_t: u32, generic_ids: bool) -> TokenSequence {
    let n_blocks = rng.gen_range(1..=2);
    let blocks: Vec<EcgBlock> = (0..n_blocks)
        .map(|_| {
            let l = rng.gen_range(1..=max_l);
            let t = rng.gen_range(1..=max_t);
            if generic_ids {
                EcgBlock::new(l as u16, t)
            } else {
                let mut ids: Vec<u16> = (1..=12).collect();
                ids.shuffle(rng);
                EcgBlock { leads: ids[..l].to_vec(), t }
            }
        })
        .collect();
    let texts: Vec<Vec<u32>> = (0..=n_blocks)
        .map(|_| (0..rng.gen_range(0..=3)).map(|_| rng.gen_range(0..20)).collect())
        .collect();
    let roles = [Role::System, Role::User, Role::Assistant];
    let mut order: Vec<Part> = (0..texts.len())
        .map(Part::text)
        .chain((0..n_blocks).map(Part::ecg))
        .map(|p| p.role(*roles.choose(rng).unwrap()))
        .collect();
    order.shuffle(rng);
    assemble(&texts, &blocks, &order).expect("valid random sequence")
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Text,
    BlockMark,
    LeadMark,
    Seg(u32),
}

/// Visibility rules evaluated pair by pair. Inside an ECG block, lead
/// scoping follows the lead span: a segment sees specials before its block,
/// the block opener, its own lead markers and same-second segments of the
/// block; a lead marker sees the prefix through the block opener, earlier
/// tokens of its own span, and all segments of its span.
fn rule_mask(seq: &TokenSequence, scheme: MaskScheme) -> Vec<Vec<bool>> {
    let toks = seq.tokens();
    let n = toks.len();
    let mut kind = Vec::with_capacity(n);
    let mut block: Vec<Option<usize>> = Vec::with_capacity(n);
    let mut span: Vec<Option<usize>> = Vec::with_capacity(n);
    let (mut cur_block, mut cur_span, mut spans) = (None, None, 0);
    for (p, t) in toks.iter().enumerate() {
        match *t {
            Token::Text { .. } => {
                kind.push(Kind::Text);
                block.push(None);
                span.push(None);
            }
            Token::EcgStart => {
                cur_block = Some(p);
                kind.push(Kind::BlockMark);
                block.push(cur_block);
                span.push(None);
            }
            Token::EcgEnd => {
                kind.push(Kind::BlockMark);
                block.push(cur_block);
                span.push(None);
                cur_block = None;
            }
            Token::LeadStart { .. } => {
                cur_span = Some(spans);
                spans += 1;
                kind.push(Kind::LeadMark);
                block.push(cur_block);
                span.push(cur_span);
            }
            Token::LeadEnd { .. } => {
                kind.push(Kind::LeadMark);
                block.push(cur_block);
                span.push(cur_span);
                cur_span = None;
            }
            Token::Seg { t, .. } => {
                kind.push(Kind::Seg(t));
                block.push(cur_block);
                span.push(cur_span);
            }
        }
    }
    let special = |k: Kind| matches!(k, Kind::BlockMark | Kind::LeadMark);
    let mut m = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            m[i][j] = match scheme {
                MaskScheme::Causal => j <= i,
                MaskScheme::FullEcg => j <= i || (block[i].is_some() && block[i] == block[j]),
                MaskScheme::LeadAware => match kind[i] {
                    Kind::Text | Kind::BlockMark => j <= i,
                    Kind::Seg(t) => {
                        let open = block[i].unwrap();
                        (special(kind[j]) && j < open)
                            || j == open
                            || (kind[j] == Kind::LeadMark && span[j] == span[i])
                            || (kind[j] == Kind::Seg(t) && block[j] == block[i])
                    }
                    Kind::LeadMark => {
                        let open = block[i].unwrap();
                        j <= open
                            || (j <= i && span[j] == span[i])
                            || (matches!(kind[j], Kind::Seg(_)) && span[j] == span[i])
                    }
                },
            };
        }
    }
    m
}

fn same(mask: &AttentionMask, rules: &[Vec<bool>]) -> Option<(usize, usize)> {
    let n = rules.len();
    if mask.n() != n {
        return Some((n, n));
    }
    (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).find(|&(i, j)| mask.get(i, j) != rules[i][j])
}

fn mask_oracle() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tokens = 0;
    for k in 0..MASK_SEQUENCES {
        let seq = random_sequence(&mut rng, 4, 5, false);
        tokens += seq.len();
        for scheme in MaskScheme::ALL {
            let built = build_mask(&seq, scheme);
            let rules = rule_mask(&seq, scheme);
            if let Some((i, j)) = same(&built, &rules) {
                return Err(format!("sequence {k}, {scheme}: build_mask differs from the rules at ({i}, {j})"));
            }
            ensure(oracle_mask(&seq, scheme) == built, || format!("sequence {k}, {scheme}: oracle_mask differs"))?;
        }
    }
    within_budget(start, MASK_BUDGET)?;
    Ok(format!("{MASK_SEQUENCES} sequences ({tokens} tokens) x 3 schemes bit-identical"))
}

fn lead_permutation() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut done = 0;
    while done < PERMUTATIONS {
        let seq = random_sequence(&mut rng, 4, 5, false);
        let layouts = seq.parse_blocks().unwrap();
        let b = rng.gen_range(0..layouts.len());
        let l = layouts[b].lead_spans.len();
        if l < 2 {
            continue;
        }
        let mut perm: Vec<usize> = (0..l).collect();
        perm.shuffle(&mut rng);
        let (permuted, map) = permute_leads(&seq, b, &perm).unwrap();
        let before = build_mask(&seq, MaskScheme::LeadAware);
        let after = build_mask(&permuted, MaskScheme::LeadAware);
        let n = seq.len();
        // P M P^T: entry (a, b) of the permuted mask is entry (map[a], map[b]).
        for x in 0..n {
            for y in 0..n {
                if after.get(x, y) != before.get(map[x], map[y]) {
                    return Err(format!("permutation {perm:?}: mismatch at ({x}, {y})"));
                }
            }
        }
        ensure(permute_leads_mask_check(&seq, b, &perm, MaskScheme::LeadAware).unwrap(), || {
            "permute_leads_mask_check disagrees".into()
        })?;
        done += 1;
    }
    // Causal counterexample: swapping two one-second leads.
    let seq = assemble(&[], &[EcgBlock::new(2, 1)], &[Part::ecg(0)]).unwrap();
    let (permuted, map) = permute_leads(&seq, 0, &[1, 0]).unwrap();
    let before = build_mask(&seq, MaskScheme::Causal);
    let after = build_mask(&permuted, MaskScheme::Causal);
    let witness = (0..seq.len())
        .flat_map(|x| (0..seq.len()).map(move |y| (x, y)))
        .find(|&(x, y)| after.get(x, y) != before.get(map[x], map[y]));
    let (x, y) = witness.ok_or("no causal counterexample found")?;
    ensure(!permute_leads_mask_check(&seq, 0, &[1, 0], MaskScheme::Causal).unwrap(), || {
        "causal scheme unexpectedly commutes with the permutation".into()
    })?;
    Ok(format!(
        "{PERMUTATIONS} random permutations conjugate exactly; causal counterexample at ({x}, {y}) of L=2, T=1 with leads swapped"
    ))
}

fn information_flow() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut pairs, mut worst) = (0usize, 0f64);
    for c in 0..FLOW_CONFIGS {
        let seq = random_sequence(&mut rng, 3, 3, true);
        let n = seq.len();
        let heads = *[1, 2].choose(&mut rng).unwrap();
        let cfg = TinyLmConfig {
            text_vocab: 20,
            generic_leads: 4,
            h_model: heads * rng.gen_range(2..=4),
            layers: if c % 2 == 0 { 1 } else { 2 },
            heads,
            ctx: n,
            mlp_mult: rng.gen_range(1..=2),
            d_latent: rng.gen_range(2..=5),
            lora: LoraConfig { rank: rng.gen_range(0..=2), ..Default::default() },
            position_mode: PositionMode::Flat,
        };
        let scheme = MaskScheme::ALL[c % 3];
        let n_seg = seq.tokens().iter().filter(|t| t.is_seg()).count();
        let latents = (0..n_seg).map(|_| (0..cfg.d_latent).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let ex = LmExample::new(seq, &cfg.vocab(), &[], latents).map_err(|e| e.to_string())?;
        let model = TinyLm::new(cfg.clone(), c as u64, true).map_err(|e| e.to_string())?;
        let mask = build_mask(&ex.seq, scheme);
        // Output i can depend on input j only through a chain of `layers`
        // attention hops; with one layer that is the mask itself.
        let mut reach: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| mask.get(i, j)).collect()).collect();
        for _ in 1..cfg.layers {
            reach = (0..n)
                .map(|i| (0..n).map(|j| (0..n).any(|k| reach[i][k] && mask.get(k, j))).collect())
                .collect();
        }
        let x0 = model.embed(&ex).map_err(|e| e.to_string())?;
        let base = model.forward_embedded(&x0, &mask).map_err(|e| e.to_string())?;
        let h = cfg.h_model;
        for j in 0..n {
            if (0..n).all(|i| reach[i][j]) {
                continue;
            }
            let mut x = x0.clone();
            for v in &mut x.data_mut()[j * h..(j + 1) * h] {
                *v += rng.gen_range(-2.0..2.0);
            }
            let out = model.forward_embedded(&x, &mask).map_err(|e| e.to_string())?;
            for i in (0..n).filter(|&i| !reach[i][j]) {
                let d = out.row(i).iter().zip(base.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst = worst.max(d);
                pairs += 1;
                if d >= FLOW_TOL {
                    return Err(format!("config {c} ({scheme}, {} layers): output {i} moved {d:e} after perturbing {j}", cfg.layers));
                }
            }
        }
    }
    ensure(pairs > 0, || "no masked-out pairs were exercised".into())?;
    Ok(format!("{FLOW_CONFIGS} configurations, {pairs} masked-out (query, key) pairs, max |delta| {worst:.1e}"))
}

fn gradients() -> Result<String, String> {
    let start = Instant::now();
    let mut reports = gradcheck_ops(GRAD_TRIALS, 4).map_err(|e| e.to_string())?;
    reports.push(gradcheck_autoencoder(GRAD_TRIALS, 4).map_err(|e| e.to_string())?);
    reports.push(gradcheck_lm(GRAD_TRIALS, 4).map_err(|e| e.to_string())?);
    let mut worst = ("", 0.0);
    for r in &reports {
        ensure(r.trials >= GRAD_TRIALS, || format!("{}: only {} trials", r.op, r.trials))?;
        ensure(r.max_rel_err < GRAD_TOL, || format!("{}: relative error {:e}", r.op, r.max_rel_err))?;
        if r.max_rel_err > worst.1 {
            worst = (r.op.as_str(), r.max_rel_err);
        }
    }
    within_budget(start, GRAD_BUDGET)?;
    Ok(format!("{} operations x {GRAD_TRIALS} trials, worst {} at {:.1e}", reports.len(), worst.0, worst.1))
}

fn variance(xs: &[Vec<f64>]) -> f64 {
    let n = xs.iter().map(Vec::len).sum::<usize>() as f64;
    let mean = xs.iter().flatten().sum::<f64>() / n;
    xs.iter().flatten().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

fn autoencoder() -> Result<String, String> {
    let start = Instant::now();
    let cfg = AeConfig::default();
    let mut segs = random_segments(AE_SEGMENTS, cfg.n as u32, 5).map_err(|e| e.to_string())?;
    let held = segs.split_off(AE_SEGMENTS * 4 / 5);
    let train = AeTrainConfig {
        epochs: AE_EPOCHS,
        seed: 5,
        ..AeTrainConfig::default()
    };
    let (ae, curve) = train_autoencoder(&segs, &cfg, &train).map_err(|e| e.to_string())?;
    let ratio = ae.reconstruction_mse(&held).map_err(|e| e.to_string())? / variance(&held);
    let one_run = start.elapsed();
    ensure(ratio < AE_MAX_RATIO, || format!("held-out MSE is {:.1}% of variance", 100.0 * ratio))?;
    ensure(one_run <= AE_BUDGET, || format!("training took {:.0} s", one_run.as_secs_f64()))?;
    let (again, curve2) = train_autoencoder(&segs, &cfg, &train).map_err(|e| e.to_string())?;
    ensure(curve == curve2 && again.store == ae.store, || "second run with the same seed differs".into())?;
    Ok(format!(
        "{} train / {} held-out segments, {AE_EPOCHS} epochs, held-out MSE {:.2}% of variance, rerun bit-identical, one run {:.0} s",
        segs.len(),
        held.len(),
        100.0 * ratio,
        one_run.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- stats

fn worked_examples() -> Result<String, String> {
    ensure(heart_rate_from_mean(819.0) == 73, || "819 ms".into())?;
    let rr15 = [648., 652., 652., 652., 652., 652., 652., 652., 648., 652., 656., 652., 652., 656., 652.];
    let s = StatFields::from_rr(&rr15);
    ensure(s.mean_rr_ms == Some(652.0) && s.heart_rate_bpm == Some(92), || format!("652 example gave {:?} / {:?}", s.mean_rr_ms, s.heart_rate_bpm))?;
    let rr = [762., 770., 590., 863., 773., 762., 770., 754., 773.];
    let s = StatFields::from_rr(&rr);
    let mean = s.mean_rr_ms.unwrap();
    ensure(mean.round() == 757.0, || format!("mean {mean}"))?;
    ensure(s.heart_rate_bpm == Some(79), || format!("rate {:?}", s.heart_rate_bpm))?;
    // The 590 ms interval (third) ends at beat 4; 863 is its pause.
    ensure(s.pac_beat_indices == vec![4], || format!("PACs at {:?}", s.pac_beat_indices))?;
    Ok("819 ms -> 73 bpm; 15 intervals averaging 652 ms -> 92 bpm; 9-interval list -> 757 ms, 79 bpm, one PAC at beat 4 (590/863)".into())
}

fn stats_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut peaks, mut pacs, mut worst_pr, mut worst_peak) = (0, 0, 0f64, 0usize);
    for k in 0..STATS_SPECS {
        let hr: f64 = rng.gen_range(50.0..110.0);
        let pr = rng.gen_range(130.0..200.0);
        let duration: f64 = rng.gen_range(12.0..30.0);
        let waves = WaveParams { pr_ms: pr, ..WaveParams::default() };
        let mut leads = vec![LeadSpec::new("II", waves.clone())];
        if rng.gen_bool(0.5) {
            leads.push(LeadSpec::new("V1", waves.scaled(-0.6)));
        }
        let rr = 60.0 / hr;
        let est_beats = ((duration - 0.5 * rr) / rr).floor() as usize;
        let mut pac_positions = Vec::new();
        let mut next = 4;
        while rng.gen_bool(0.6) {
            let p = next + rng.gen_range(0..4);
            if p + 4 > est_beats {
                break;
            }
            pac_positions.push(p);
            next = p + 6;
        }
        let spec = SynthSpec {
            duration_s: duration,
            fs: *[250, 360, 500].choose(&mut rng).unwrap(),
            heart_rate_bpm: hr,
            rr_jitter_ms: 0.0,
            pac_positions: pac_positions.clone(),
            leads,
            rhythm_schedule: vec![(0.0, Rhythm::Norm)],
        };
        let (rec, truth) = synth_ecg_with_truth(&spec, k as u64).map_err(|e| e.to_string())?;
        let rep = stat_report(&rec);
        let g = &rep.global;
        let got_hr = g.heart_rate_bpm.ok_or(format!("spec {k}: no heart rate"))? as f64;
        ensure((got_hr - hr).abs() <= HR_TOL_BPM, || format!("spec {k}: {got_hr} bpm for {hr:.2}"))?;
        let detected = &rep.leads.iter().find(|l| l.lead == rep.rhythm_lead).unwrap().r_peaks;
        let want = truth.r_peaks();
        ensure(detected.len() == want.len(), || format!("spec {k}: {} R-peaks for {} (fs {}, {} samples, hr {hr:.1}, pacs {:?}): {:?} vs {:?}", detected.len(), want.len(), spec.fs, rec.n_samples(), spec.pac_positions, detected, want))?;
        for (d, w) in detected.iter().zip(&want) {
            let e = d.abs_diff(*w);
            worst_peak = worst_peak.max(e);
            ensure(e <= RPEAK_TOL, || format!("spec {k}: R-peak {d} vs {w}"))?;
        }
        peaks += want.len();
        let got_pr = g.pr_interval_ms.ok_or(format!("spec {k}: no PR interval"))?;
        worst_pr = worst_pr.max((got_pr - pr).abs());
        ensure((got_pr - pr).abs() <= PR_TOL_MS, || format!("spec {k}: PR {got_pr:.1} for {pr:.1}"))?;
        ensure(g.pac_beat_indices == pac_positions, || format!("spec {k}: PACs {:?} for {pac_positions:?}", g.pac_beat_indices))?;
        pacs += pac_positions.len();
    }
    Ok(format!(
        "{STATS_SPECS} specs, {peaks} R-peaks (worst {worst_peak} samples), worst PR error {worst_pr:.1} ms, {pacs} PACs exact"
    ))
}

// ---------------------------------------------------------------- forecast

/// Sinus stretches with sparse premature beats, broken by AFIB, AFL and
/// unclassified episodes; some records never leave sinus rhythm.
fn annotated_record(rng: &mut ChaCha8Rng) -> EcgRecord {
    let fs = 10;
    let duration: f64 = rng.gen_range(1250.0..2400.0);
    let calm = rng.gen_bool(0.15);
    let (mut pos, mut labels) = (Vec::new(), Vec::new());
    let mut t: f64 = rng.gen_range(0.2..1.0);
    let mut rhythm = if rng.gen_bool(0.1) { BeatLabel::Afib } else { BeatLabel::Norm };
    let mut until = t + rng.gen_range(30.0..600.0);
    while t < duration {
        if t >= until {
            rhythm = if rhythm != BeatLabel::Norm || calm {
                BeatLabel::Norm
            } else {
                *[BeatLabel::Afib, BeatLabel::Afl, BeatLabel::Other].choose(rng).unwrap()
            };
            until = t + if rhythm == BeatLabel::Norm { rng.gen_range(60.0..900.0) } else { rng.gen_range(5.0..300.0) };
        }
        let (label, gap) = match rhythm {
            BeatLabel::Norm if rng.gen_bool(0.03) => (BeatLabel::Pac, rng.gen_range(0.5..0.7)),
            BeatLabel::Norm => (BeatLabel::Norm, rng.gen_range(0.7..1.1)),
            BeatLabel::Afib => (BeatLabel::Afib, rng.gen_range(0.4..1.0)),
            r => (r, rng.gen_range(0.5..0.8)),
        };
        let p = (t * fs as f64).round() as usize;
        if pos.last().is_none_or(|&q| p > q) {
            pos.push(p);
            labels.push(label);
        }
        t += gap;
    }
    let n = (duration * fs as f64) as usize;
    let keep = pos.partition_point(|&p| p < n);
    pos.truncate(keep);
    labels.truncate(keep);
    EcgRecord::new(vec![vec![0.0; n]], vec!["II".into()], fs)
        .unwrap()
        .with_annotations(BeatAnnotations::new(pos, labels).unwrap())
        .unwrap()
}

struct Truth {
    eligible: bool,
    kind: Option<BeatLabel>,
}

/// Direct scan over every beat for the window starting at `t0`.
fn brute(ann: &BeatAnnotations, fs: usize, t0: usize, w: usize, h: usize) -> Truth {
    let (a, b, c) = (t0 * fs, (t0 + w) * fs, (t0 + w + h) * fs);
    let mut input = 0;
    let mut clean = true;
    let mut kind = None;
    for (p, l) in ann.iter() {
        if p >= a && p < b {
            input += 1;
            clean &= matches!(l, BeatLabel::Norm | BeatLabel::Pac);
        }
        if p > b && p <= c && kind.is_none() && matches!(l, BeatLabel::Afib | BeatLabel::Afl) {
            kind = Some(l);
        }
    }
    Truth { eligible: input > 0 && clean, kind }
}

fn forecast_labels() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let records: Vec<EcgRecord> = (0..FORECAST_RECORDS).map(|_| annotated_record(&mut rng)).collect();
    let (mut emitted, mut abnormal, mut with_pac) = (0, 0, 0);
    for spec in grid_specs() {
        let (w, h, stride) = (spec.window_s as usize, spec.horizon_s as usize, spec.stride() as usize);
        for (r, rec) in records.iter().enumerate() {
            let id = format!("r{r}");
            let ann = rec.annotations().unwrap();
            let fs = rec.fs() as usize;
            let seconds = rec.n_samples() / fs;
            let got = extract_samples(&id, rec, &spec, r as u64).map_err(|e| format!("{id}: {e}"))?;
            let expected: BTreeMap<usize, Truth> = (0..)
                .map(|k| k * stride)
                .take_while(|t0| t0 + w + h <= seconds)
                .map(|t0| (t0, brute(ann, fs, t0, w, h)))
                .filter(|(_, t)| t.eligible)
                .collect();
            let mut seen = BTreeSet::new();
            for s in &got {
                let t0 = s.t0_s as usize;
                let truth = expected
                    .get(&t0)
                    .ok_or_else(|| format!("{id} w={w} h={h}: t0={t0} is not an eligible window"))?;
                ensure(s.abnormal_kind == truth.kind && s.label.as_str() == if truth.kind.is_some() { "ABNORMAL" } else { "NORM" }, || {
                    format!("{id} w={w} h={h} t0={t0}: {:?}/{:?}, brute force {:?}", s.label, s.abnormal_kind, truth.kind)
                })?;
                ensure(seen.insert(t0), || format!("{id}: duplicate t0 {t0}"))?;
                let (a, b) = (t0 * fs, (t0 + w) * fs);
                let input: Vec<BeatLabel> = ann.iter().filter(|&(p, _)| p >= a && p < b).map(|(_, l)| l).collect();
                ensure(input.iter().all(|&l| matches!(l, BeatLabel::Norm | BeatLabel::Pac)), || {
                    format!("{id} t0={t0}: input span holds non-sinus beats")
                })?;
                with_pac += input.contains(&BeatLabel::Pac) as usize;
            }
            let pos_all = expected.values().filter(|t| t.kind.is_some()).count();
            let neg_all = expected.len() - pos_all;
            let pos = got.iter().filter(|s| s.abnormal_kind.is_some()).count();
            let neg = got.len() - pos;
            let (min_all, maj_all, min_got, maj_got) =
                if pos_all <= neg_all { (pos_all, neg_all, pos, neg) } else { (neg_all, pos_all, neg, pos) };
            let cap = (min_all as f64 * spec.balance_ratio).floor() as usize;
            let want_maj = if min_all == 0 { maj_all } else { maj_all.min(cap) };
            ensure(min_got == min_all && maj_got == want_maj, || {
                format!("{id} w={w} h={h}: kept {min_got}/{maj_got} of {min_all}/{maj_all}")
            })?;
            emitted += got.len();
            abnormal += pos;
        }
    }
    Ok(format!(
        "{FORECAST_RECORDS} records x 24 cells: {emitted} samples ({abnormal} ABNORMAL) match brute force; 0 input spans with AFIB/AFL/other beats ({with_pac} contain premature sinus beats)"
    ))
}

fn ablation() -> Result<String, String> {
    let start = Instant::now();
    let cfg = AblationConfig {
        schemes: vec![MaskScheme::LeadAware, MaskScheme::Causal],
        ..AblationConfig::default()
    };
    let rep = run_ablation(&cfg).map_err(|e| e.to_string())?;
    let la = rep.get(MaskScheme::LeadAware).unwrap();
    let ca = rep.get(MaskScheme::Causal).unwrap();
    let detail = format!(
        "lead_aware {:?} mean {:.1}%, causal {:?} mean {:.1}%, chance {:.0}%",
        la.accuracy, la.mean, ca.accuracy, ca.mean, rep.chance
    );
    ensure(cfg.seeds.len() == 3, || "expected three seeds".into())?;
    ensure(la.mean >= ca.mean, || format!("lead_aware below causal: {detail}"))?;
    ensure(la.mean >= rep.chance + ABLATION_MARGIN, || format!("lead_aware within {ABLATION_MARGIN} points of chance: {detail}"))?;
    within_budget(start, ABLATION_BUDGET)?;
    Ok(detail)
}

// ---------------------------------------------------------------- metrics

fn brute_f1(preds: &[u8], labels: &[u8]) -> f64 {
    let classes: BTreeSet<u8> = labels.iter().copied().collect();
    let mut sum = 0.0;
    for &c in &classes {
        let tp = preds.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count() as f64;
        let pp = preds.iter().filter(|&&p| p == c).count() as f64;
        let ap = labels.iter().filter(|&&l| l == c).count() as f64;
        let precision = if pp > 0.0 { tp / pp } else { 0.0 };
        let recall = if ap > 0.0 { tp / ap } else { 0.0 };
        sum += if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    }
    100.0 * sum / classes.len() as f64
}

fn brute_auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// Per-sample Jaccard over bitmask sets, and bitwise agreement over the
/// union of all bits used.
fn brute_hamming(p: &[u8], l: &[u8]) -> (f64, f64) {
    let universe = p.iter().chain(l).fold(0u8, |a, b| a | b).count_ones() as f64;
    let mut jac = 0.0;
    let mut bit = 0.0;
    for (&a, &b) in p.iter().zip(l) {
        let union = (a | b).count_ones() as f64;
        jac += if union == 0.0 { 1.0 } else { (a & b).count_ones() as f64 / union };
        bit += if universe == 0.0 { 1.0 } else { 1.0 - (a ^ b).count_ones() as f64 / universe };
    }
    (100.0 * jac / p.len() as f64, 100.0 * bit / p.len() as f64)
}

fn to_set(mask: u8) -> BTreeSet<u8> {
    (0..8).filter(|b| mask >> b & 1 == 1).collect()
}

/// Every vector of length `n` over `0..base`.
fn all_vectors(n: usize, base: u8) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out.into_iter().flat_map(|v| (0..base).map(move |d| [v.clone(), vec![d]].concat())).collect();
    }
    out
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= METRIC_TOL
}

fn check_pair(preds: &[u8], labels: &[u8], set_bits: bool) -> Result<(), String> {
    let f1 = macro_f1(preds, labels).map_err(|e| e.to_string())?;
    ensure(close(f1, brute_f1(preds, labels)), || format!("macro-F1 {preds:?} {labels:?}"))?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let acc = accuracy(preds, labels).map_err(|e| e.to_string())?;
    ensure(close(acc, 100.0 * hits as f64 / labels.len() as f64), || format!("accuracy {preds:?} {labels:?}"))?;
    let truth: Vec<f64> = labels.iter().map(|&v| v as f64).collect();
    let pred: Vec<f64> = preds.iter().map(|&v| v as f64).collect();
    let want = (pred.iter().zip(&truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64).sqrt();
    ensure(close(rmse(&pred, &truth).map_err(|e| e.to_string())?, want), || format!("rmse {preds:?} {labels:?}"))?;
    if set_bits {
        let ps: Vec<_> = preds.iter().map(|&m| to_set(m)).collect();
        let ls: Vec<_> = labels.iter().map(|&m| to_set(m)).collect();
        let (jac, bit) = brute_hamming(preds, labels);
        ensure(close(hamming(&ps, &ls, HammingMode::Jaccard).map_err(|e| e.to_string())?, jac), || format!("hamming {preds:?} {labels:?}"))?;
        ensure(close(hamming(&ps, &ls, HammingMode::Bitwise).map_err(|e| e.to_string())?, bit), || format!("bitwise hamming {preds:?} {labels:?}"))?;
    }
    let bin: Vec<bool> = labels.iter().map(|&l| l % 2 == 1).collect();
    let scores: Vec<f64> = preds.iter().map(|&p| p as f64 * 0.25).collect();
    match (brute_auroc(&scores, &bin), auroc(&scores, &bin)) {
        (Some(w), Ok(g)) => ensure(close(w, g), || format!("auroc {scores:?} {bin:?}: {g} vs {w}")),
        (None, Err(_)) => Ok(()),
        (w, g) => Err(format!("auroc {scores:?} {bin:?}: {g:?} vs {w:?}")),
    }
}

fn metric_oracles() -> Result<String, String> {
    let ex = auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).map_err(|e| e.to_string())?;
    ensure(close(ex, 0.75), || format!("AUROC example gave {ex}"))?;
    let mut cases = 0;
    // Exhaustive: two symbols up to n = 8, three symbols (and 2-bit sets)
    // up to n = 4.
    for n in 1..=8 {
        let (base, bits) = if n <= 4 { (4, true) } else { (2, false) };
        let vs = all_vectors(n, base);
        for p in &vs {
            for l in &vs {
                check_pair(p, l, bits)?;
                cases += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..RANDOM_METRIC_CASES {
        let n = rng.gen_range(1..=20);
        let p: Vec<u8> = (0..n).map(|_| rng.gen_range(0..8)).collect();
        let l: Vec<u8> = (0..n).map(|_| rng.gen_range(0..8)).collect();
        check_pair(&p, &l, true)?;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let bin: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        if let Some(w) = brute_auroc(&scores, &bin) {
            ensure(close(w, auroc(&scores, &bin).map_err(|e| e.to_string())?), || "random auroc".into())?;
        }
        cases += 1;
    }
    Ok(format!("AUROC example 0.75; {cases} exhaustive and random inputs agree with brute force"))
}

fn token_law() -> Result<String, String> {
    let mut checked = 0;
    for l in 1..=12u16 {
        for t in 1..=600u32 {
            let seq = assemble(&[], &[EcgBlock::new(l, t)], &[Part::ecg(0)]).map_err(|e| e.to_string())?;
            let want = l as usize * (t as usize + 2) + 2;
            let segs = seq.tokens().iter().filter(|x| x.is_seg()).count();
            ensure(seq.len() == want && block_token_count(l as usize, t as usize) == want && segs == l as usize * t as usize, || {
                format!("L={l} T={t}: {} tokens, expected {want}", seq.len())
            })?;
            checked += 1;
        }
    }
    Ok(format!("all {checked} (L, T) pairs in [1,12] x [1,600]"))
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Result<String, String> {
    let cfg = PipelineConfig::default();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let start = Instant::now();
    run_demo(&cfg, a.path()).map_err(|e| e.to_string())?;
    let one = start.elapsed();
    run_demo(&cfg, b.path()).map_err(|e| e.to_string())?;
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    ensure(ta.keys().eq(tb.keys()), || "runs wrote different file sets".into())?;
    if let Some(k) = ta.keys().find(|k| ta[*k] != tb[*k]) {
        return Err(format!("{k} differs between runs"));
    }
    ensure(one <= DEMO_BUDGET, || format!("demo took {:.0} s", one.as_secs_f64()))?;
    let bytes: usize = ta.values().map(Vec::len).sum();
    Ok(format!("two runs, {} files ({bytes} bytes) byte-identical; one run {:.1} s", ta.len(), one.as_secs_f64()))
}

// ---------------------------------------------------------------- datagen

fn datagen_records(rng: &mut ChaCha8Rng) -> Vec<(String, EcgRecord)> {
    let rhythms = [
        vec![(0.0, Rhythm::Norm)],
        vec![(0.0, Rhythm::Afib)],
        vec![(0.0, Rhythm::Afl)],
        vec![(0.0, Rhythm::Norm), (12.0, Rhythm::Afib)],
    ];
    (0..16)
        .map(|k| {
            let spec = SynthSpec {
                duration_s: 30.0,
                fs: 500,
                heart_rate_bpm: rng.gen_range(50.0..110.0),
                rr_jitter_ms: rng.gen_range(0.0..30.0),
                pac_positions: if k % 3 == 0 { vec![6, 14] } else { vec![] },
                leads: vec![
                    LeadSpec::new("I", WaveParams::default().scaled(0.7)),
                    LeadSpec::new("II", WaveParams::default()),
                    LeadSpec::new("V1", WaveParams::default().scaled(-0.5)),
                ],
                rhythm_schedule: rhythms[k % rhythms.len()].clone(),
            };
            (format!("dg{k:02}"), synth_ecg(&spec, k as u64).unwrap())
        })
        .collect()
}

fn datagen_validators() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let records = datagen_records(&mut rng);
    let labels: Vec<String> = ["NORM", "AFIB", "AFL", "PAC", "LBBB"].map(String::from).to_vec();
    let reports: Vec<_> = records.iter().map(|(_, r)| stat_report(r)).collect();
    let mut items = 0;
    let mut corrupt_target = None;
    for (k, (id, _)) in records.iter().enumerate() {
        for (f, format) in [QaFormat::MultipleChoice, QaFormat::ShortAnswer].into_iter().enumerate() {
            let label = &labels[k % 3];
            let item = gen_stage2(id, label, &labels, Stage2Spec { format, n_options: 4 }, (k * 2 + f) as u64).map_err(|e| e.to_string())?;
            let v = validate_conversation(&item.to_conversation(), &Grounding::from_map(&item.grounded_values), None);
            ensure(v.is_empty(), || format!("stage 2 {id}: {v:?}"))?;
            items += 1;
        }
        for task in TaskType::ALL {
            let other = &reports[(k + 1) % reports.len()];
            let ids = [id.clone(), records[(k + 1) % records.len()].0.clone()];
            match gen_stage3(&reports[k], Some(other), task, &ids, k as u64) {
                Ok(item) => {
                    let ground = Grounding::from_map(&item.grounded_values);
                    let conv = item.to_conversation();
                    let v = validate_conversation(&conv, &ground, None);
                    ensure(v.is_empty(), || format!("stage 3 {id} {}: {v:?}", task.as_str()))?;
                    items += 1;
                    if corrupt_target.is_none() && task == TaskType::StepwiseComputation {
                        corrupt_target = Some((conv, ground));
                    }
                }
                Err(ecglm_core::Error::NotGenerable(_)) => {}
                Err(e) => return Err(e.to_string()),
            }
        }
    }
    let client = LlmClient::new(ClientConfig::mock()).map_err(|e| e.to_string())?;
    let cfg = DatagenConfig::default();
    let mut mock = 0;
    let stage4 = run_stage(4, &records, &cfg, &client, 1).map_err(|e| e.to_string())?;
    ensure(stage4.rejected.is_empty(), || format!("stage 4 violations: {:?}", stage4.rejected))?;
    mock += stage4.conversations.len();
    let corpus = synth_corpus(&CorpusSpec { n_records: 6, ..CorpusSpec::default() }, 2).map_err(|e| e.to_string())?;
    let stage5 = run_stage(5, &corpus, &cfg, &client, 1).map_err(|e| e.to_string())?;
    ensure(stage5.rejected.is_empty(), || format!("stage 5 violations: {:?}", stage5.rejected))?;
    ensure(!stage4.conversations.is_empty() && !stage5.conversations.is_empty(), || "a mock stage produced nothing".into())?;
    mock += stage5.conversations.len();

    // Nudge the first quoted number of the answer away from its true value.
    let (mut conv, ground) = corrupt_target.ok_or("no step-by-step item to corrupt")?;
    let answer = &mut conv.turns[1].value;
    let re = regex::Regex::new(r"\d{3,}").unwrap();
    let m = re.find(answer).ok_or("answer quotes no number")?;
    let bumped = (m.as_str().parse::<u64>().unwrap() + 37).to_string();
    answer.replace_range(m.range(), &bumped);
    let v = validate_conversation(&conv, &ground, None);
    ensure(
        v.iter().any(|x| matches!(x.kind, ViolationKind::NumericFidelity | ViolationKind::Arithmetic)),
        || format!("corrupted value {bumped} not caught: {v:?}"),
    )?;
    Ok(format!(
        "{items} template items and {mock} mock conversations with zero violations; corrupted value caught as {:?}",
        v[0].kind
    ))
}
