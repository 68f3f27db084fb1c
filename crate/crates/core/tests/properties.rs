//! Property tests over the public API, one group per module.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ecglm_core::datagen::{gen_stage3, validate_conversation, Grounding, TaskType};
use ecglm_core::forecast::{balance, extract_samples, is_input_beat, synth_corpus, CorpusSpec, ForecastSpec};
use ecglm_core::mask::{build_mask, oracle_mask, MaskScheme};
use ecglm_core::metrics::{auroc, macro_f1};
use ecglm_core::neural::lora::{lora_merge, lora_wrap};
use ecglm_core::neural::Tensor;
use ecglm_core::preprocess::{clean, preprocess, CleanOutcome, PreprocessConfig};
use ecglm_core::signal::{load_record, save_record, synth_ecg, LeadSpec, Rhythm, SynthSpec, WaveParams};
use ecglm_core::stats::{fiducials, stat_report};
use ecglm_core::tokenizer::{assemble, EcgBlock, Part, Role, Token, TokenSequence};

const SCHEMES: [MaskScheme; 3] = [MaskScheme::LeadAware, MaskScheme::FullEcg, MaskScheme::Causal];

fn sinus_spec(hr: f64, fs: u32, duration_s: f64, two_leads: bool, pacs: Vec<usize>) -> SynthSpec {
    let mut leads = vec![LeadSpec::new("II", WaveParams::default())];
    if two_leads {
        leads.push(LeadSpec::new("V1", WaveParams::default().scaled(-0.6)));
    }
    SynthSpec {
        duration_s,
        fs,
        heart_rate_bpm: hr,
        rr_jitter_ms: 0.0,
        pac_positions: pacs,
        leads,
        rhythm_schedule: vec![(0.0, Rhythm::Norm)],
    }
}

/// PAC beat numbers at least six beats apart, clear of both record ends.
fn pac_plan(hr: f64, duration_s: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rr = 60.0 / hr;
    let est_beats = ((duration_s - 0.5 * rr) / rr).floor() as usize;
    let mut out = Vec::new();
    let mut next = 4;
    while rng.gen_bool(0.6) {
        let p = next + rng.gen_range(0..4);
        if p + 4 > est_beats {
            break;
        }
        out.push(p);
        next = p + 6;
    }
    out
}

fn random_sequence(seed: u64) -> TokenSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_blocks = rng.gen_range(1..=2);
    let blocks: Vec<EcgBlock> = (0..n_blocks)
        .map(|_| EcgBlock::new(rng.gen_range(1..=4), rng.gen_range(1..=5)))
        .collect();
    let texts: Vec<Vec<u32>> = (0..=n_blocks)
        .map(|_| (0..rng.gen_range(0..=3)).map(|_| rng.gen_range(0..20)).collect())
        .collect();
    let roles = [Role::System, Role::User, Role::Assistant];
    let mut order: Vec<Part> = (0..texts.len())
        .map(Part::text)
        .chain((0..n_blocks).map(Part::ecg))
        .map(|p| p.role(*roles.choose(&mut rng).unwrap()))
        .collect();
    order.shuffle(&mut rng);
    assemble(&texts, &blocks, &order).unwrap()
}

// ---------------------------------------------------------------- signal

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synth_is_deterministic_and_round_trips(
        hr in 40.0f64..150.0,
        fs in prop::sample::select(vec![250u32, 360, 500]),
        two_leads in any::<bool>(),
        jitter in 0.0f64..40.0,
        seed in any::<u64>(),
    ) {
        let spec = SynthSpec { rr_jitter_ms: jitter, ..sinus_spec(hr, fs, 8.0, two_leads, vec![]) };
        let a = synth_ecg(&spec, seed).unwrap();
        let b = synth_ecg(&spec, seed).unwrap();
        prop_assert!(a.bit_eq(&b));

        prop_assert!(a.leads().iter().all(|l| l.len() == a.n_samples()));
        prop_assert_eq!(a.lead_names().len(), a.n_leads());
        let ann = a.annotations().unwrap();
        prop_assert!(ann.positions().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(ann.positions().iter().all(|&p| p < a.n_samples()));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ecg");
        save_record(&a, &path).unwrap();
        prop_assert!(load_record(&path).unwrap().bit_eq(&a));
    }
}

// ---------------------------------------------------------------- preprocess

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn preprocess_keeps_leads_and_clean_is_idempotent(
        hr in 45.0f64..120.0,
        fs in prop::sample::select(vec![250u32, 360, 500]),
        two_leads in any::<bool>(),
        nan_at in prop::option::of(0.0f64..0.9),
        seed in any::<u64>(),
    ) {
        let mut rec = synth_ecg(&sinus_spec(hr, fs, 8.0, two_leads, vec![]), seed).unwrap();
        if let Some(f) = nan_at {
            let k = (f * rec.n_samples() as f64) as usize;
            let mut leads = rec.leads().to_vec();
            leads[0][k] = f64::NAN;
            rec = rec.map_leads(leads, rec.fs()).unwrap();
        }
        let cfg = PreprocessConfig::default();
        let out = preprocess(&rec, &cfg).unwrap();
        prop_assert_eq!(&out.provenance[0], "screen");
        prop_assert_eq!(out.provenance.last().map(String::as_str), Some("clean"));
        let done = out.outcome.accepted().expect("short NaN gaps are accepted");
        prop_assert_eq!(done.lead_names(), rec.lead_names());
        prop_assert_eq!(done.fs(), cfg.target_fs);

        let once = match clean(&rec, &cfg) {
            CleanOutcome::Accepted(r) => r,
            CleanOutcome::Rejected(r) => return Err(TestCaseError::fail(format!("{r:?}"))),
        };
        let twice = clean(&once, &cfg).accepted().unwrap();
        prop_assert!(once.bit_eq(&twice));
        prop_assert!(once.leads().iter().flatten().all(|v| v.is_finite()));
    }
}

// ---------------------------------------------------------------- stats

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn report_invariants_on_sinus_records(
        hr in 50.0f64..110.0,
        fs in prop::sample::select(vec![250u32, 360, 500]),
        duration in 12.0f64..30.0,
        two_leads in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let pacs = pac_plan(hr, duration, seed);
        let rec = synth_ecg(&sinus_spec(hr, fs, duration, two_leads, pacs.clone()), seed).unwrap();
        let rep = stat_report(&rec);
        let g = &rep.global;

        prop_assert_eq!(&g.pac_beat_indices, &pacs);
        prop_assert_eq!(g.pac_count, g.pac_beat_indices.len());
        let mean = g.mean_rr_ms.unwrap();
        prop_assert_eq!(g.heart_rate_bpm, Some((60_000.0 / mean).round() as u32));
        for v in [g.rmssd_ms, g.sdnn_ms, g.rr_iqr_ms].into_iter().flatten() {
            prop_assert!(v >= 0.0);
        }
        for v in g.rr_intervals_ms.iter().chain([g.pr_interval_ms, g.qrs_duration_ms, g.qt_ms, g.qtc_ms].iter().flatten()) {
            prop_assert!((0.0..3000.0).contains(v), "{v}");
        }

        for lead in &rep.leads {
            let k = rec.lead_index(&lead.lead).unwrap();
            let fid = fiducials(rec.lead(k), rec.fs(), &lead.r_peaks);
            prop_assert!(fid.beats.iter().all(|b| b.is_ordered()));
        }
    }
}

// ---------------------------------------------------------------- mask

fn seg_at(seq: &TokenSequence, i: usize) -> Option<(u32, u32)> {
    match seq.tokens()[i] {
        Token::Seg { ecg, t, .. } => Some((ecg, t)),
        _ => None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mask_structure(seed in any::<u64>()) {
        let seq = random_sequence(seed);
        let n = seq.len();
        for scheme in SCHEMES {
            let m = build_mask(&seq, scheme);
            prop_assert_eq!(&m, &oracle_mask(&seq, scheme));
            for i in 0..n {
                prop_assert!(m.get(i, i));
                if seq.tokens()[i].is_text() {
                    prop_assert!((i + 1..n).all(|j| !m.get(i, j)));
                }
                for j in 0..n {
                    if let (Some((ei, ti)), Some((ej, tj))) = (seg_at(&seq, i), seg_at(&seq, j)) {
                        if ei != ej {
                            prop_assert!(!(m.get(i, j) && m.get(j, i)), "{scheme:?} {i} <-> {j}");
                        } else if ti == tj && scheme == MaskScheme::LeadAware {
                            prop_assert!(m.get(i, j) && m.get(j, i));
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------- neural

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lora_inert_at_init_and_merge_matches_forward(
        out in 1usize..8,
        inp in 1usize..8,
        m in 1usize..5,
        alpha in 0.5f64..16.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rng.gen_range(1..=out.min(inp));
        let w = Tensor::randn(&[out, inp], 1.0, &mut rng);
        let x = Tensor::randn(&[m, inp], 1.0, &mut rng);
        let mut ad = lora_wrap(&w, r, alpha, &mut rng).unwrap();

        prop_assert_eq!(lora_merge(&ad), w.clone());
        let y0 = ad.forward(&x);
        let plain = ad.base.clone();
        let mut expect = vec![0.0; m * out];
        for i in 0..m {
            for o in 0..out {
                expect[i * out + o] = x.row(i).iter().zip(plain.row(o)).map(|(a, b)| a * b).sum();
            }
        }
        prop_assert_eq!(y0.data(), &expect[..]);

        ad.b = Tensor::randn(&[out, r], 1.0, &mut rng);
        let y = ad.forward(&x);
        let merged = lora_merge(&ad);
        for i in 0..m {
            for o in 0..out {
                let v: f64 = x.row(i).iter().zip(merged.row(o)).map(|(a, b)| a * b).sum();
                let got = y.data()[i * out + o];
                prop_assert!((v - got).abs() <= 1e-12 * (1.0 + v.abs()), "{v} vs {got}");
            }
        }
    }
}

// ---------------------------------------------------------------- datagen

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn stage3_items_are_deterministic_and_self_consistent(
        hr_a in 50.0f64..110.0,
        hr_b in 50.0f64..110.0,
        seed in any::<u64>(),
    ) {
        let a = stat_report(&synth_ecg(&sinus_spec(hr_a, 500, 20.0, true, pac_plan(hr_a, 20.0, seed)), seed).unwrap());
        let b = stat_report(&synth_ecg(&sinus_spec(hr_b, 500, 20.0, true, vec![]), seed ^ 1).unwrap());
        let ids = ["a".to_string(), "b".to_string()];
        for task in TaskType::ALL {
            let first = gen_stage3(&a, Some(&b), task, &ids, seed);
            let again = gen_stage3(&a, Some(&b), task, &ids, seed);
            match (first, again) {
                (Ok(x), Ok(y)) => {
                    prop_assert_eq!(&x, &y);
                    let v = validate_conversation(&x.to_conversation(), &Grounding::from_map(&x.grounded_values), None);
                    prop_assert!(v.is_empty(), "{}: {v:?}", task.as_str());
                }
                (Err(x), Err(y)) => prop_assert_eq!(x.to_string(), y.to_string()),
                (x, y) => return Err(TestCaseError::fail(format!("{x:?} / {y:?}"))),
            }
        }
    }
}

// ---------------------------------------------------------------- forecast

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn forecast_inputs_clean_and_balance_only_drops(
        seed in any::<u64>(),
        window in prop::sample::select(vec![10u32, 30, 60]),
        horizon in prop::sample::select(vec![60u32, 180]),
        ratio in 1.0f64..4.0,
    ) {
        let corpus = CorpusSpec { n_records: 3, duration_s: 600.0, fs: 50, precursor_s: 200.0, ..CorpusSpec::default() };
        let spec = ForecastSpec { balance_ratio: ratio, ..ForecastSpec::new(window, horizon) };
        for (id, rec) in synth_corpus(&corpus, seed).unwrap() {
            let all = extract_samples(&id, &rec, &ForecastSpec { balance_ratio: f64::INFINITY, ..spec }, seed).unwrap();
            let ann = rec.annotations().unwrap();
            let fs = rec.fs() as f64;
            for s in &all {
                let (lo, hi) = (s.t0_s as f64, s.input_end_s() as f64);
                let clean_span = ann.iter().all(|(p, l)| !(lo..hi).contains(&(p as f64 / fs)) || is_input_beat(l));
                prop_assert!(clean_span, "{id} input span at {lo} s");
            }

            let kept = balance(all.clone(), ratio, seed).unwrap();
            let mut it = all.iter();
            prop_assert!(kept.iter().all(|k| it.any(|s| s == k)), "kept samples must be an ordered subset");
            let count = |v: &[_], abn: bool| v.iter().filter(|s: &&ecglm_core::forecast::ForecastSample| s.abnormal_kind.is_some() == abn).count();
            let (n0, n1) = (count(&all, false), count(&all, true));
            let (k0, k1) = (count(&kept, false), count(&kept, true));
            if n0.min(n1) > 0 {
                prop_assert_eq!(k0.min(k1), n0.min(n1));
                prop_assert!(k0.max(k1) as f64 <= ratio * k0.min(k1) as f64);
            } else {
                prop_assert_eq!(kept.len(), all.len());
            }
        }
    }
}

// ---------------------------------------------------------------- metrics

proptest! {
    #[test]
    fn macro_f1_ignores_label_renaming(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..30),
        perm_seed in any::<u64>(),
    ) {
        let mut perm: Vec<usize> = (0..4).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let (p, t): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let pp: Vec<usize> = p.iter().map(|&x| perm[x]).collect();
        let tt: Vec<usize> = t.iter().map(|&x| perm[x]).collect();
        let a = macro_f1(&p, &t).unwrap();
        let b = macro_f1(&pp, &tt).unwrap();
        prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn auroc_ignores_monotone_rescoring(
        v in prop::collection::vec((-5i32..5, any::<bool>()), 2..30),
    ) {
        prop_assume!(v.iter().any(|x| x.1) && v.iter().any(|x| !x.1));
        let s: Vec<f64> = v.iter().map(|x| x.0 as f64).collect();
        let y: Vec<bool> = v.iter().map(|x| x.1).collect();
        let g: Vec<f64> = s.iter().map(|x| x.powi(3) + 2.0 * x + 7.0).collect();
        let e: Vec<f64> = s.iter().map(|x| (x / 3.0).exp()).collect();
        let base = auroc(&s, &y).unwrap();
        prop_assert_eq!(base, auroc(&g, &y).unwrap());
        prop_assert_eq!(base, auroc(&e, &y).unwrap());
    }
}
