//! Acceptance gates. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Criteria run sequentially so the latency gate is
//! not disturbed by concurrent work.

mod common;

use std::cell::{Cell, RefCell};
use std::collections::BTreeSet;
use std::f64::consts::LN_2;
use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use ptrmix::backend::{
    read_trace, write_trace, Session, StepKind, SyntheticSession, SyntheticSpec, TraceSession,
};
use ptrmix::decoder::{generate, score_sequence, SamplingParams, StopReason};
use ptrmix::engine::{copy_probability, Aggregator, AttentionRow, PigConfig, StepDecoder};
use ptrmix::eval::{
    bench_step, factor_accuracy, mc_metrics, squad_f1, squad_f1_with, FactorScores, Mc3Averaging, McScores,
    Normalization,
};
use ptrmix::prob::{jsd, ProbVector};
use ptrmix::{Error, TokenId};
use rand::Rng;

use common::{oracle, random_case, rng, AGGREGATORS};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut r = rng(0x0AC1E);
    let mut decoder = StepDecoder::new();
    let mut worst = 0.0f64;
    let mut checks = 0;
    for _ in 0..1000 {
        let case = random_case(&mut r, 16, 8);
        for agg in AGGREGATORS {
            for alpha in [1.0, 100.0, 1000.0] {
                let config = case.config(alpha, agg);
                let (got, diag) = decoder.decode(&case.trace, &config).map_err(|e| e.to_string())?;
                let want = oracle(&case.trace, &config);
                for (g, w) in got.iter().zip(&want.probs) {
                    worst = worst.max((g - w).abs());
                }
                worst = worst.max((diag.copy_probability - want.copy_probability).abs());
                checks += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst <= 1e-9, || format!("max |Δ| = {worst:e} exceeds 1e-9"))?;
    ensure(secs < 10.0, || format!("took {secs:.2} s"))?;
    Ok(format!("{checks} decodes over 1000 traces, max |Δ| = {worst:.2e}, {secs:.2} s"))
}

fn distribution_invariants() -> Outcome {
    const CASES: u32 = 10_000;
    let mut runner = TestRunner::new_with_rng(
        PropConfig {
            cases: CASES,
            failure_persistence: None,
            ..PropConfig::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    );
    let strategy = (
        any::<u64>(),
        2usize..48,
        2usize..10,
        prop_oneof![Just(0.0), 0.0f64..5.0, 5.0f64..2000.0],
        0usize..3,
    );
    let decoder = RefCell::new(StepDecoder::new());
    let count = Cell::new(0u32);
    runner
        .run(&strategy, |(seed, vocab, layers, alpha, agg)| {
            count.set(count.get() + 1);
            let mut decoder = decoder.borrow_mut();
            let case = random_case(&mut rng(seed), vocab, layers);
            let config = case.config(alpha, AGGREGATORS[agg]).with_clip_max(0.5);
            let (out, diag) = decoder
                .decode(&case.trace, &config)
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let (vocab_dist, _) = decoder
                .decode(&case.trace, &config.clone().with_alpha(0.0))
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let keep = 1.0 - diag.copy_probability;
            let span = case.trace.source_span();
            let span_tokens: BTreeSet<TokenId> = case.trace.context_tokens()[span.range()]
                .iter()
                .copied()
                .filter(|t| !case.filter.contains(t))
                .collect();
            prop_assert!(out.iter().all(|&p| p >= 0.0));
            prop_assert!((out.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!((0.0..=0.5).contains(&diag.copy_probability));
            for v in 0..vocab {
                prop_assert!(out[v] >= 0.5 * vocab_dist[v], "floor violated at {}", v);
                if out[v] > keep * vocab_dist[v] {
                    prop_assert!(span_tokens.contains(&(v as TokenId)), "pointer mass on {}", v);
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let count = count.get();
    ensure(count >= CASES, || format!("only {count} cases ran"))?;
    Ok(format!("{count} property cases"))
}

fn copy_probability_behavior() -> Outcome {
    let mut r = rng(0xC0B1);
    let mut decoder = StepDecoder::new();

    // Identical layers.
    for _ in 0..200 {
        let case = random_case(&mut r, 16, 8);
        let anchor = case.trace.logits(case.anchor).unwrap().clone();
        let same = (0..8).map(|l| (l, anchor.clone())).collect();
        let (ctx, span, _, attn) = case.trace.clone().into_parts();
        let trace = ptrmix::engine::StepTrace::new(ctx, span, same, attn).unwrap();
        for agg in AGGREGATORS {
            let (_, d) = decoder.decode(&trace, &case.config(1000.0, agg)).unwrap();
            ensure(d.copy_probability == 0.0, || format!("identical layers gave p_cp {}", d.copy_probability))?;
        }
    }

    // Hand-computed divergence.
    let p = ProbVector::new(vec![1.0, 0.0]).unwrap();
    let q = ProbVector::new(vec![0.5, 0.5]).unwrap();
    let config = PigConfig::new(1, vec![0]).with_alpha(1.0);
    let hand = copy_probability(&p, std::slice::from_ref(&q), &config).unwrap();
    ensure((hand - 0.215761).abs() <= 1e-6, || format!("[1,0] vs [0.5,0.5] gave {hand}"))?;

    // Clip at α = 1000 on strongly divergent layers.
    let mut clipped = 0;
    for seed in 0..50 {
        let spec = SyntheticSpec::new(seed, 16, 8, vec![StepKind::Content]).with_jsd_floor(0.2);
        let mut session = SyntheticSession::new(spec).unwrap();
        let trace = session.next_step(Some(0)).unwrap();
        let (_, d) = decoder.decode(&trace, &PigConfig::new(7, (0..7).collect()).with_alpha(1000.0)).unwrap();
        ensure(d.copy_probability == 0.5, || format!("seed {seed}: p_cp {} not clipped", d.copy_probability))?;
        clipped += 1;
    }

    // Monotone in α.
    let alphas = [0.0, 1e-3, 0.1, 1.0, 10.0, 100.0, 500.0, 1000.0, 1e5];
    for i in 0..1000 {
        let case = random_case(&mut r, 16, 8);
        let agg = AGGREGATORS[i % 3];
        let mut prev = -1.0;
        for alpha in alphas {
            let (_, d) = decoder.decode(&case.trace, &case.config(alpha, agg)).unwrap();
            ensure(d.copy_probability >= prev, || format!("trace {i}: p_cp fell at α = {alpha}"))?;
            ensure((0.0..=0.5).contains(&d.copy_probability), || "p_cp outside [0, clip]".into())?;
            prev = d.copy_probability;
        }
    }
    Ok(format!(
        "identical → 0 exactly; hand case {hand:.6}; {clipped} clipped to 0.5; monotone over 1000 traces"
    ))
}

fn random_prob(r: &mut rand_chacha::ChaCha8Rng, n: usize, sparsity: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n)
            .map(|_| if r.random_bool(sparsity) { 0.0 } else { r.random_range(0.0..1.0) })
            .collect();
        let s: f64 = v.iter().sum();
        if s > 0.0 {
            return v.iter().map(|x| x / s).collect();
        }
    }
}

fn jsd_suite() -> Outcome {
    let mut r = rng(0x15D);
    let mut worst_asym = 0.0f64;
    let mut cases = 0;
    for _ in 0..20_000 {
        let n = r.random_range(1..64);
        let sparsity = [0.0, 0.3, 0.8][r.random_range(0..3)];
        let p = ProbVector::new(random_prob(&mut r, n, sparsity)).unwrap();
        let q = ProbVector::new(random_prob(&mut r, n, sparsity)).unwrap();
        let pq = jsd(&p, &q).unwrap();
        let qp = jsd(&q, &p).unwrap();
        worst_asym = worst_asym.max((pq - qp).abs());
        ensure((0.0..=LN_2 + 1e-12).contains(&pq), || format!("jsd {pq} out of bounds"))?;
        ensure(jsd(&p, &p).unwrap() == 0.0, || "jsd(p, p) != 0".into())?;
        let distinct = p.iter().zip(q.iter()).any(|(a, b)| (a - b).abs() > 1e-6);
        if distinct {
            ensure(pq > 0.0, || "distinct inputs gave zero divergence".into())?;
        }

        // Disjoint supports.
        let split = r.random_range(1..=n.max(2) - 1).min(n);
        if n >= 2 {
            let mut a = random_prob(&mut r, split, 0.0);
            a.resize(n, 0.0);
            let mut b = vec![0.0; split];
            b.extend(random_prob(&mut r, n - split, 0.0));
            let d = jsd(&ProbVector::new(a).unwrap(), &ProbVector::new(b).unwrap()).unwrap();
            ensure((d - LN_2).abs() <= 1e-12, || format!("disjoint supports gave {d}"))?;
        }
        cases += 1;
    }
    ensure(worst_asym <= 1e-12, || format!("asymmetry {worst_asym:e}"))?;
    Ok(format!("{cases} random pairs, max asymmetry {worst_asym:.1e}"))
}

fn metric_fixtures() -> Outcome {
    let r = mc_metrics(&[McScores::new(-1.0, vec![-1.0, -1.5], vec![-2.0, -3.0])], Mc3Averaging::Multiset)
        .map_err(|e| e.to_string())?;
    ensure(r.mc1 == 1.0 && r.mc3 == 1.0, || format!("MC1 {} MC3 {}", r.mc1, r.mc3))?;
    ensure((r.mc2 - 0.76149).abs() <= 1e-5, || format!("MC2 {}", r.mc2))?;

    let g = |s: &str| vec![s.to_string()];
    ensure(squad_f1("Paris", &g("Paris")) == 1.0, || "identity F1".into())?;
    ensure(squad_f1("London", &g("Paris")) == 0.0, || "disjoint F1".into())?;
    ensure(squad_f1("the cat sat", &g("cat sat")) == 1.0, || "article stripping F1".into())?;
    let raw = Normalization {
        strip_articles: false,
        ..Normalization::default()
    };
    let unstripped = squad_f1_with("the cat sat", &g("cat sat"), raw);
    ensure((unstripped - 0.8).abs() < 1e-15, || format!("unstripped F1 {unstripped}"))?;

    let a = McScores::new(-1.0, vec![-1.0], vec![-2.0]);
    let b = McScores::new(-5.0, vec![-5.0, -6.0, -7.0], vec![-1.0]);
    let multi = mc_metrics(&[a.clone(), b.clone()], Mc3Averaging::Multiset).unwrap().mc3;
    let per = mc_metrics(&[a, b], Mc3Averaging::PerItem).unwrap().mc3;
    ensure(multi == 0.25 && per == 0.5, || format!("MC3 multiset {multi}, per-item {per}"))?;
    Ok(format!(
        "MC1 1, MC3 1, MC2 {:.5}; F1 1/0/1 (0.8 unstripped); MC3 multiset {multi} vs per-item {per}",
        r.mc2
    ))
}

/// Items whose span holds the correct completion; distractors are random
/// sequences of the same length. Every candidate of an item is scored on the
/// same seeded trace.
fn factor_direction() -> Outcome {
    const ITEMS: u64 = 60;
    let mut r = rng(0xFAC7);
    let mut with_copy = Vec::new();
    let mut without = Vec::new();
    for seed in 0..ITEMS {
        let len = r.random_range(2..=4);
        let correct: Vec<TokenId> = (0..len).map(|_| r.random_range(0..16)).collect();
        let mut completions = vec![correct.clone()];
        for _ in 0..3 {
            completions.push((0..len).map(|_| r.random_range(0..16)).collect());
        }
        let correct_index = r.random_range(0..completions.len());
        completions.swap(0, correct_index);
        let spec = SyntheticSpec::new(seed, 16, 8, vec![StepKind::Content; len]).with_span_tokens(correct.clone());
        let score = |alpha: f64| -> Result<FactorScores, String> {
            let config = PigConfig::new(7, (0..7).collect()).with_alpha(alpha);
            let scores = completions
                .iter()
                .map(|c| {
                    let s = SyntheticSession::new(spec.clone()).map_err(|e| e.to_string())?;
                    score_sequence(s, c, &config).map(|s| s.total).map_err(|e| e.to_string())
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(FactorScores { correct_index, scores })
        };
        with_copy.push(score(500.0)?);
        without.push(score(0.0)?);
    }
    let acc_copy = factor_accuracy(&with_copy).unwrap().accuracy;
    let acc_plain = factor_accuracy(&without).unwrap().accuracy;
    ensure(acc_copy >= acc_plain, || format!("α=500 {acc_copy:.3} < α→0 {acc_plain:.3}"))?;
    Ok(format!("{ITEMS} items: α=500 accuracy {acc_copy:.3} ≥ α→0 accuracy {acc_plain:.3}"))
}

fn argmax_f32(x: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best as TokenId
}

fn plain_decoding_equivalence() -> Outcome {
    let mut r = rng(0xA76);
    let mut tokens_checked = 0;
    for seed in 0..100u64 {
        let plan: Vec<StepKind> = (0..r.random_range(4..=12))
            .map(|_| if r.random_bool(0.5) { StepKind::Content } else { StepKind::Function })
            .collect();
        let spec = SyntheticSpec::new(seed, 16, 8, plan.clone());
        let config = PigConfig::new(7, (0..7).collect()).with_alpha(0.0);
        let params = SamplingParams::greedy().with_max_new_tokens(plan.len());

        let generated = generate(SyntheticSession::new(spec.clone()).unwrap(), &config, &params)
            .map_err(|e| e.to_string())?;

        let mut plain = Vec::new();
        let mut session = SyntheticSession::new(spec.clone()).unwrap();
        for _ in 0..plan.len() {
            let step = session.next_step(None).unwrap();
            let t = argmax_f32(step.logits(7).unwrap().as_slice());
            session.advance(t).unwrap();
            plain.push(t);
        }
        ensure(generated.tokens == plain, || format!("seed {seed}: {:?} vs {plain:?}", generated.tokens))?;
        ensure(generated.stop_reason == StopReason::Length, || "unexpected stop reason".into())?;

        // Same through a recorded trace.
        let replay = TraceSession::new(read_trace(&write_trace(&spec.record(None).unwrap()).unwrap()).unwrap());
        let replayed = generate(replay, &config, &params).map_err(|e| e.to_string())?;
        ensure(replayed.tokens == plain, || format!("seed {seed}: replay diverged"))?;
        tokens_checked += plain.len();
    }
    Ok(format!("100 traces, {tokens_checked} tokens identical (live and replayed)"))
}

fn codec() -> Outcome {
    let mut r = rng(0xC0DEC);
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let plan: Vec<StepKind> = (0..r.random_range(1..6))
            .map(|_| if r.random_bool(0.5) { StepKind::Content } else { StepKind::Function })
            .collect();
        let vocab = r.random_range(2..64);
        let layers = r.random_range(1..10);
        let spec = SyntheticSpec::new(seed, vocab, layers, plan);
        let forced: Vec<TokenId> = (0..spec.steps.len()).map(|_| r.random_range(0..vocab as TokenId)).collect();
        let mut file = spec.record(if r.random_bool(0.5) { Some(&forced) } else { None }).unwrap();
        for step in &mut file.steps {
            // Weights that are not f32-representable.
            let w: Vec<f64> = (0..step.attention.len()).map(|_| r.random_range(0.0..1.0)).collect();
            step.attention = AttentionRow::new(w).unwrap();
        }
        let back = read_trace(&write_trace(&file).unwrap()).map_err(|e| e.to_string())?;
        ensure(back.header == file.header, || "header changed".into())?;
        for (a, b) in file.steps.iter().zip(&back.steps) {
            ensure(a.forced == b.forced && a.pos == b.pos, || "step framing changed".into())?;
            for (l, x) in &a.logits {
                for (u, v) in x.as_slice().iter().zip(b.logits[l].as_slice()) {
                    worst = worst.max((*u as f64 - *v as f64).abs());
                }
            }
            for (u, v) in a.attention.as_slice().iter().zip(b.attention.as_slice()) {
                worst = worst.max((u - v).abs());
            }
        }
    }
    ensure(worst <= 1e-7, || format!("round-trip error {worst:e}"))?;

    let header = r#"{"v":1,"vocab":8,"layers":[0,1,2],"anchor":2,"attn_layer":2,"prompt":[1,2,3],"span":[0,2],"meta":{"k":1}}"#;
    read_trace(header.as_bytes()).map_err(|e| format!("valid header rejected: {e}"))?;
    let corruptions = [
        ("v", r#""v":1"#, r#""v":2"#),
        ("vocab", r#""vocab":8"#, r#""vocab":0"#),
        ("layers", r#""layers":[0,1,2]"#, r#""layers":[2,1,0]"#),
        ("anchor", r#""anchor":2"#, r#""anchor":5"#),
        ("attn_layer", r#""attn_layer":2"#, r#""attn_layer":3"#),
        ("prompt", r#""prompt":[1,2,3]"#, r#""prompt":[1,9,3]"#),
        ("span", r#""span":[0,2]"#, r#""span":[2,0]"#),
        ("meta", r#""meta":{"k":1}"#, r#""meta":[1]"#),
    ];
    let mut categories = BTreeSet::new();
    for (field, from, to) in corruptions {
        let bad = header.replace(from, to);
        match read_trace(bad.as_bytes()) {
            Err(Error::Trace { line: 1, source }) => {
                ensure(source.to_string().contains(&format!("`{field}`")), || {
                    format!("{field}: error does not name the field: {source}")
                })?;
                categories.insert(source.category());
            }
            other => return Err(format!("{field} corruption not rejected as a header error: {other:?}")),
        }
    }
    ensure(categories.len() == 8, || format!("only {} distinct categories: {categories:?}", categories.len()))?;
    Ok(format!("100 files round-trip, max error {worst:.1e}; 8 corruptions → 8 distinct errors"))
}

fn performance() -> Outcome {
    let config = PigConfig::new(16, (0..16).collect()).with_aggregator(Aggregator::Max);
    let report = bench_step(&config, 32_000, 16, 1000).map_err(|e| e.to_string())?;
    let summary = format!(
        "median {:.0} µs (p99 {:.0} µs), baseline {:.1} µs, ratio ×{:.1}, isa {}",
        report.decode_step.median_us, report.decode_step.p99_us, report.baseline.median_us, report.ratio, report.isa
    );
    ensure(report.decode_step.median_us <= 1000.0, || summary.clone())?;
    Ok(summary)
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("oracle-equivalence", oracle_equivalence),
        ("distribution-invariants", distribution_invariants),
        ("copy-probability", copy_probability_behavior),
        ("jsd-suite", jsd_suite),
        ("metric-fixtures", metric_fixtures),
        ("factor-direction", factor_direction),
        ("plain-decoding-equivalence", plain_decoding_equivalence),
        ("codec", codec),
        ("performance", performance),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name}: {detail}", i + 1);
            }
        }
    }
    let _ = panic::take_hook();
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
