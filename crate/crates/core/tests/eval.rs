mod common;

use std::path::Path;

use proptest::prelude::*;
use ptrmix::backend::{read_trace, write_trace, Session, StepKind, SyntheticSpec, TraceFile, TraceSession};
use ptrmix::decoder::score_sequence;
use ptrmix::engine::PigConfig;
use ptrmix::eval::{
    bench_step, exact_match, factor_accuracy, load_factor, load_mc, load_predictions, load_qa,
    mc_metrics, squad_f1, Candidate, FactorScores, GoodSetConvention, LengthClass, Mc3Averaging,
    McScores, TraceIndex,
};
use ptrmix::{Error, TokenId};

const VOCAB: usize = 16;
const LAYERS: usize = 4;

const MC_DATA: &str = r#"{"best_query": [1, 2], "good_queries": [[1, 2], [3]], "bad_queries": [[4, 5, 6], [7]]}
{"best_query": "yes", "good_queries": [], "bad_queries": ["no", [2, 2]]}
"#;

fn text_tokens(text: &str) -> Vec<TokenId> {
    match text {
        "yes" => vec![9, 1],
        "no" => vec![8],
        other => panic!("unknown text candidate {other}"),
    }
}

fn candidate_tokens(c: &Candidate) -> Vec<TokenId> {
    match c {
        Candidate::Tokens(t) => t.clone(),
        Candidate::Text(s) => text_tokens(s),
    }
}

fn candidate_trace(item: usize, c: &Candidate) -> TraceFile {
    let tokens = candidate_tokens(c);
    let plan: Vec<StepKind> = (0..tokens.len())
        .map(|i| if (item + i) % 2 == 0 { StepKind::Content } else { StepKind::Function })
        .collect();
    let seed = 1000 * item as u64 + tokens.iter().map(|&t| t as u64).sum::<u64>();
    let mut file = SyntheticSpec::new(seed, VOCAB, LAYERS, plan).record(Some(&tokens)).unwrap();
    file.header.meta.insert("item".into(), item.into());
    file.header.meta.insert("candidate".into(), serde_json::to_value(c).unwrap());
    file
}

/// Writes one trace per `(item, candidate)` pair, with or without a manifest.
fn write_trace_dir(dir: &Path, with_manifest: bool) {
    let data = load_mc(MC_DATA).unwrap();
    let mut manifest = String::new();
    let mut n = 0;
    for (i, item) in data.items.iter().enumerate() {
        for c in item.effective_good().into_iter().chain(&item.bad_queries) {
            let name = format!("t{n:03}.pigtrace");
            n += 1;
            let mut file = candidate_trace(i, c);
            if with_manifest {
                // The manifest alone must locate the trace.
                file.header.meta.clear();
                manifest.push_str(&format!(
                    "{{\"item\": {i}, \"candidate\": {}, \"file\": \"{name}\", \"note\": 1}}\n",
                    serde_json::to_string(c).unwrap()
                ));
            }
            std::fs::write(dir.join(name), write_trace(&file).unwrap()).unwrap();
        }
    }
    if with_manifest {
        std::fs::write(dir.join("manifest.jsonl"), manifest).unwrap();
    }
}

fn config(alpha: f64) -> PigConfig {
    PigConfig::new(LAYERS - 1, (0..LAYERS - 1).collect()).with_alpha(alpha)
}

/// Log-probability of the candidate, step by step through the naive decoder.
fn oracle_score(item: usize, c: &Candidate, config: &PigConfig) -> f64 {
    // Through the codec, as the engine sees it.
    let file = read_trace(&write_trace(&candidate_trace(item, c)).unwrap()).unwrap();
    let mut session = TraceSession::new(file);
    candidate_tokens(c)
        .iter()
        .map(|&t| {
            let step = session.next_step(Some(t)).unwrap();
            common::oracle(&step, config).probs[t as usize].ln()
        })
        .sum()
}

#[test]
fn mc_over_a_trace_directory_matches_the_naive_decoder() {
    for with_manifest in [true, false] {
        let dir = tempfile::tempdir().unwrap();
        write_trace_dir(dir.path(), with_manifest);
        let index = TraceIndex::open(dir.path()).unwrap();
        assert_eq!(index.len(), 7);
        let data = load_mc(MC_DATA).unwrap();
        assert_eq!(data.convention, GoodSetConvention::Mixed);

        for alpha in [0.0, 500.0] {
            let config = config(alpha);
            let scores: Vec<McScores> = data
                .items
                .iter()
                .enumerate()
                .map(|(i, item)| {
                    McScores::score_item(item, |c| {
                        let (session, tokens) = index.load(i, c)?;
                        assert_eq!(tokens, candidate_tokens(c));
                        Ok(score_sequence(session, &tokens, &config)?.total)
                    })
                    .unwrap()
                })
                .collect();

            for (i, (item, s)) in data.items.iter().zip(&scores).enumerate() {
                let good: Vec<f64> = item.effective_good().iter().map(|c| oracle_score(i, c, &config)).collect();
                let bad: Vec<f64> = item.bad_queries.iter().map(|c| oracle_score(i, c, &config)).collect();
                for (got, want) in s.good.iter().chain(&s.bad).zip(good.iter().chain(&bad)) {
                    assert!((got - want).abs() < 1e-9, "alpha {alpha} item {i}: {got} vs {want}");
                }
            }

            // Metrics recomputed by hand from the engine scores.
            let r = mc_metrics(&scores, Mc3Averaging::Multiset).unwrap();
            let mut mc1 = 0.0;
            let mut mc2 = 0.0;
            let mut wins = 0;
            let mut total = 0;
            for s in &scores {
                let max_bad = s.bad.iter().copied().fold(f64::MIN, f64::max);
                mc1 += (s.best > max_bad) as u8 as f64;
                let g: f64 = s.good.iter().map(|x| x.exp()).sum();
                let b: f64 = s.bad.iter().map(|x| x.exp()).sum();
                mc2 += g / (g + b);
                wins += s.good.iter().filter(|&&x| x > max_bad).count();
                total += s.good.len();
            }
            assert_eq!(r.mc1, mc1 / 2.0);
            assert!((r.mc2 - mc2 / 2.0).abs() < 1e-12);
            assert_eq!(r.mc3, wins as f64 / total as f64);
        }
    }
}

#[test]
fn missing_trace_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_trace_dir(dir.path(), true);
    let index = TraceIndex::open(dir.path()).unwrap();
    let err = index.load(0, &Candidate::Tokens(vec![15])).unwrap_err();
    assert!(err.to_string().contains("no trace"), "{err}");
}

#[test]
fn malformed_manifest_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("manifest.jsonl"),
        "{\"item\": 0, \"candidate\": [1], \"file\": \"a\"}\n{\"item\": 1, \"file\": \"b\"}\n",
    )
    .unwrap();
    match TraceIndex::open(dir.path()).unwrap_err() {
        Error::Dataset { line, field, .. } => {
            assert_eq!(line, 2);
            assert!(field.ends_with("candidate"));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn dataset_errors_name_line_and_field() {
    let text = "{\"best_query\": \"a\", \"good_queries\": [], \"bad_queries\": [\"b\"]}\n\
                {\"best_query\": \"a\", \"good_queries\": [], \"bad_queries\": []}\n";
    match load_mc(text).unwrap_err() {
        Error::Dataset { line, field, .. } => assert_eq!((line, field.as_str()), (2, "bad_queries")),
        other => panic!("unexpected {other:?}"),
    }
    match load_factor("{\"prefix\": \"p\", \"completions\": [\"a\", \"b\"], \"correct_index\": 2}\n").unwrap_err() {
        Error::Dataset { line, field, .. } => assert_eq!((line, field.as_str()), (1, "correct_index")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn qa_fixture_f1_and_length_classes() {
    let long = vec!["word"; 201].join(" ");
    let qa = load_qa(&format!(
        "{{\"context\": \"Paris is in France.\", \"question\": \"Capital?\", \"answers\": [\"Paris\", \"the city of Paris\"]}}\n\
         {{\"context\": \"{long}\", \"question\": \"q\", \"answers\": [\"blue whale\"]}}\n"
    ))
    .unwrap();
    assert_eq!(qa[0].length_class, LengthClass::Short);
    assert_eq!(qa[1].length_class, LengthClass::Long);
    let preds = load_predictions("{\"prediction\": \"The city Paris\"}\n{\"prediction\": \"a whale\"}\n").unwrap();

    // "city paris" against "city of paris": P = 1, R = 2/3.
    assert!((squad_f1(&preds[0], &qa[0].answers) - 0.8).abs() < 1e-12);
    assert_eq!(exact_match(&preds[0], &qa[0].answers), 0.0);
    // "whale" against "blue whale": P = 1, R = 1/2.
    assert!((squad_f1(&preds[1], &qa[1].answers) - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(exact_match("PARIS!", &qa[0].answers), 1.0);
}

#[test]
fn factor_fixture() {
    let items = load_factor(
        "{\"prefix\": [1], \"completions\": [[2], [3], [4]], \"correct_index\": 1}\n\
         {\"prefix\": \"x\", \"completions\": [\"a\", \"b\"], \"correct_index\": 0}\n",
    )
    .unwrap();
    let table = [[-3.0, -1.0, -2.0], [-1.0, -1.0, f64::NAN]];
    let scores: Vec<FactorScores> = items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let mut k = 0;
            FactorScores::score_item(item, |_| {
                k += 1;
                Ok(table[i][k - 1])
            })
            .unwrap()
        })
        .collect();
    let r = factor_accuracy(&scores).unwrap();
    // The tie on the second item loses.
    assert_eq!(r.correct, vec![true, false]);
    assert_eq!(r.accuracy, 0.5);
}

#[test]
fn fewer_layers_bench_faster() {
    let c = PigConfig::new(1, vec![0]);
    let one = bench_step(&c, 4096, 1, 100).unwrap();
    let sixteen = bench_step(&c, 4096, 16, 100).unwrap();
    assert!(
        one.decode_step.median_us < sixteen.decode_step.median_us,
        "{} vs {}",
        one.decode_step.median_us,
        sixteen.decode_step.median_us
    );
    assert!(one.ratio >= 1.0 && sixteen.ratio >= 1.0, "{} {}", one.ratio, sixteen.ratio);
}

fn mc_scores() -> impl Strategy<Value = McScores> {
    (
        prop::collection::vec(-50.0f64..0.0, 1..5),
        prop::collection::vec(-50.0f64..0.0, 1..5),
    )
        .prop_map(|(good, bad)| McScores::new(good[0], good, bad))
}

proptest! {
    #[test]
    fn mc_metrics_ignore_item_and_candidate_order(
        items in prop::collection::vec(mc_scores(), 1..6),
        rot in 0usize..6,
    ) {
        let a = mc_metrics(&items, Mc3Averaging::Multiset).unwrap();
        let mut shuffled: Vec<McScores> = items
            .iter()
            .map(|s| {
                // Best stays first; the rest of the good set and the bad set reverse.
                let mut good = s.good.clone();
                good[1..].reverse();
                let mut bad = s.bad.clone();
                bad.reverse();
                McScores::new(s.best, good, bad)
            })
            .collect();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        let b = mc_metrics(&shuffled, Mc3Averaging::Multiset).unwrap();
        prop_assert_eq!(a.mc1, b.mc1);
        prop_assert_eq!(a.mc3, b.mc3);
        prop_assert!((a.mc2 - b.mc2).abs() < 1e-12);
    }

    #[test]
    fn raising_a_good_score_never_lowers_mc2(s in mc_scores(), which in 0usize..5, bump in 0.0f64..10.0) {
        let before = mc_metrics(&[s.clone()], Mc3Averaging::Multiset).unwrap().mc2;
        let mut up = s.clone();
        let i = which % up.good.len();
        up.good[i] += bump;
        let after = mc_metrics(&[up], Mc3Averaging::Multiset).unwrap().mc2;
        prop_assert!(after >= before - 1e-15, "{} -> {}", before, after);
        prop_assert!((0.0..=1.0).contains(&after));
    }

    #[test]
    fn token_f1_is_symmetric(a in "[a-e ,.]{0,24}", b in "[a-e ,.]{0,24}") {
        let ab = squad_f1(&a, std::slice::from_ref(&b));
        let ba = squad_f1(&b, std::slice::from_ref(&a));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
    }
}
