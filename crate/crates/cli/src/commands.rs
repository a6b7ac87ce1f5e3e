//! Subcommand pipelines. Each returns the bytes to write.

use std::path::{Path, PathBuf};

use ptrmix::backend::{write_trace, Session, StepKind, SyntheticSpec, TraceFile, TraceSession};
use ptrmix::decoder::{generate, score_sequence};
use ptrmix::engine::PigConfig;
use ptrmix::eval::{
    bench_step, exact_match, factor_accuracy, load_factor, load_mc, load_predictions, load_qa, mc_metrics,
    squad_f1, FactorScores, LengthClass, McResult, McScores, TraceIndex,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{item_seed, RunConfig, SelectMetric};
use crate::Failure;

/// Scoring runs at temperature 1 unless overridden.
const SCORING_TEMPERATURE: f64 = 1.0;

pub fn run(rc: &RunConfig) -> Result<Vec<u8>, Failure> {
    let body = match rc.command.as_str() {
        "decode" => decode(rc)?,
        "score" => score(rc)?,
        "eval-mc" => eval_mc(rc)?,
        "eval-f1" => eval_f1(rc)?,
        "eval-factor" => eval_factor(rc)?,
        "trace-synth" => return trace_synth(rc),
        "bench" => bench(rc)?,
        other => return Err(Failure::Input(format!("unknown command `{other}`"))),
    };
    report(rc, body)
}

/// Wraps a result body with the command, fingerprint and resolved config.
fn report(rc: &RunConfig, body: Value) -> Result<Vec<u8>, Failure> {
    let mut out = json!({
        "command": rc.command,
        "fingerprint": rc.fingerprint(),
        "config": rc,
    });
    let obj = out.as_object_mut().expect("object literal");
    match body {
        Value::Object(fields) => obj.extend(fields),
        other => {
            obj.insert("result".into(), other);
        }
    }
    let mut bytes = serde_json::to_vec_pretty(&out).map_err(|e| Failure::Internal(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn to_value(v: impl Serialize) -> Value {
    serde_json::to_value(v).expect("report values serialize")
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    v.as_deref().ok_or_else(|| Failure::Input(format!("missing --{flag}")))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::io(e, path))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Failure::Internal(e.to_string()))
}

/// A single file, or every `.pigtrace` in a directory by name.
fn trace_files(path: &Path) -> Result<Vec<PathBuf>, Failure> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Failure::io(e, path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pigtrace"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::Input(format!("{}: no .pigtrace files", path.display())));
    }
    Ok(files)
}

fn open_trace(path: &Path) -> Result<TraceFile, Failure> {
    TraceFile::read_path(path).map_err(|e| Failure::from(e).context(path.display()))
}

fn decode(rc: &RunConfig) -> Result<Value, Failure> {
    let files = trace_files(required(&rc.trace, "trace")?)?;
    let pool = pool(rc.jobs)?;
    let mut runs = Vec::new();
    for &alpha in &rc.alpha {
        let outputs = pool.install(|| {
            files
                .par_iter()
                .enumerate()
                .map(|(i, path)| {
                    let session = TraceSession::new(open_trace(path)?);
                    let config = rc.pig_config(session.info(), alpha, SCORING_TEMPERATURE)?;
                    let seed = item_seed(rc.seed, i as u64);
                    let result = generate(session, &config, &rc.sampling(seed))
                        .map_err(|e| Failure::from(e).context(path.display()))?;
                    Ok(json!({"trace": path, "seed": seed, "result": result}))
                })
                .collect::<Result<Vec<_>, Failure>>()
        })?;
        runs.push(json!({"alpha": alpha, "outputs": outputs}));
    }
    Ok(json!({ "runs": runs }))
}

fn score(rc: &RunConfig) -> Result<Value, Failure> {
    let path = required(&rc.trace, "trace")?;
    let file = open_trace(path)?;
    let tokens = match &rc.tokens {
        Some(t) => t.clone(),
        None => file
            .forced_tokens()
            .ok_or_else(|| Failure::Input("no --tokens and the trace is not teacher-forced".into()))?,
    };
    let mut runs = Vec::new();
    for &alpha in &rc.alpha {
        let session = TraceSession::new(file.clone());
        let config = rc.pig_config(session.info(), alpha, SCORING_TEMPERATURE)?;
        let s = score_sequence(session, &tokens, &config)?;
        runs.push(json!({"alpha": alpha, "mean": s.mean(), "score": s}));
    }
    Ok(json!({ "tokens": tokens, "runs": runs }))
}

/// Log-probability of a candidate under the trace recorded for it.
fn score_candidate(
    rc: &RunConfig,
    index: &TraceIndex,
    item: usize,
    candidate: &ptrmix::eval::Candidate,
    alpha: f64,
) -> ptrmix::Result<f64> {
    let (session, tokens) = index.load(item, candidate)?;
    let config = rc.pig_config(session.info(), alpha, SCORING_TEMPERATURE).map_err(|f| match f {
        Failure::Input(m) | Failure::Internal(m) => ptrmix::Error::InvalidArgument(m),
    })?;
    Ok(score_sequence(session, &tokens, &config)?.total)
}

fn eval_mc(rc: &RunConfig) -> Result<Value, Failure> {
    let data_path = required(&rc.data, "data")?;
    let data = load_mc(&read_text(data_path)?).map_err(|e| Failure::from(e).context(data_path.display()))?;
    let index = TraceIndex::open(required(&rc.trace_dir, "trace-dir")?)?;
    let pool = pool(rc.jobs)?;

    let mut per_alpha: Vec<Vec<McScores>> = Vec::new();
    let mut runs = Vec::new();
    for &alpha in &rc.alpha {
        let scores = pool.install(|| {
            data.items
                .par_iter()
                .enumerate()
                .map(|(i, item)| {
                    McScores::score_item(item, |c| score_candidate(rc, &index, i, c, alpha))
                        .map_err(|e| Failure::from(e).context(format!("item {i}")))
                })
                .collect::<Result<Vec<_>, Failure>>()
        })?;
        let result = mc_metrics(&scores, rc.mc3)?;
        log::info!("alpha {alpha}: mc1 {} mc2 {} mc3 {}", result.mc1, result.mc2, result.mc3);
        runs.push(json!({"alpha": alpha, "result": result}));
        per_alpha.push(scores);
    }

    let mut body = json!({ "good_set_convention": data.convention, "runs": runs });
    if rc.folds >= 2 {
        body["selection"] = select_alpha(rc, &per_alpha)?;
    }
    Ok(body)
}

fn metric(r: &McResult, m: SelectMetric) -> f64 {
    match m {
        SelectMetric::Mc1 => r.mc1,
        SelectMetric::Mc2 => r.mc2,
        SelectMetric::Mc3 => r.mc3,
    }
}

/// Item to fold, by a seeded shuffle dealt round-robin.
fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

/// For each fold, picks the α that maximizes the selection metric on the
/// other folds (first in grid order on ties) and scores the fold with it.
fn select_alpha(rc: &RunConfig, per_alpha: &[Vec<McScores>]) -> Result<Value, Failure> {
    let n = per_alpha[0].len();
    if rc.folds > n {
        return Err(Failure::Input(format!("{} folds for {n} items", rc.folds)));
    }
    let fold = fold_assignment(n, rc.folds, rc.fold_seed);
    let mut chosen = Vec::with_capacity(rc.folds);
    let mut per_fold = Vec::new();
    for f in 0..rc.folds {
        let mut best: Option<(usize, f64)> = None;
        for (a, scores) in per_alpha.iter().enumerate() {
            let train: Vec<McScores> = (0..n).filter(|&i| fold[i] != f).map(|i| scores[i].clone()).collect();
            let m = metric(&mc_metrics(&train, rc.mc3)?, rc.select);
            if best.is_none_or(|(_, b)| m > b) {
                best = Some((a, m));
            }
        }
        let (a, m) = best.expect("alpha grid is non-empty");
        chosen.push(a);
        per_fold.push(json!({
            "fold": f,
            "items": fold.iter().filter(|&&x| x == f).count(),
            "alpha": rc.alpha[a],
            "train_metric": m,
        }));
    }
    let held: Vec<McScores> = (0..n).map(|i| per_alpha[chosen[fold[i]]][i].clone()).collect();
    Ok(json!({
        "folds": rc.folds,
        "fold_seed": rc.fold_seed,
        "metric": rc.select,
        "per_fold": per_fold,
        "held_out": mc_metrics(&held, rc.mc3)?,
    }))
}

#[derive(Serialize)]
struct F1Summary {
    count: usize,
    f1: Option<f64>,
    exact_match: Option<f64>,
}

impl F1Summary {
    fn of(rows: &[(f64, f64)]) -> Self {
        let n = rows.len();
        let mean = |k: fn(&(f64, f64)) -> f64| (n > 0).then(|| rows.iter().map(k).sum::<f64>() / n as f64);
        F1Summary {
            count: n,
            f1: mean(|r| r.0),
            exact_match: mean(|r| r.1),
        }
    }
}

fn eval_f1(rc: &RunConfig) -> Result<Value, Failure> {
    let data_path = required(&rc.data, "data")?;
    let pred_path = required(&rc.predictions, "predictions")?;
    let qa = load_qa(&read_text(data_path)?).map_err(|e| Failure::from(e).context(data_path.display()))?;
    let preds =
        load_predictions(&read_text(pred_path)?).map_err(|e| Failure::from(e).context(pred_path.display()))?;
    if qa.len() != preds.len() {
        return Err(Failure::Input(format!(
            "{} predictions for {} questions",
            preds.len(),
            qa.len()
        )));
    }
    if qa.is_empty() {
        return Err(Failure::Input("QA dataset is empty".into()));
    }
    let rows: Vec<(f64, f64, LengthClass)> = qa
        .iter()
        .zip(&preds)
        .map(|(q, p)| (squad_f1(p, &q.answers), exact_match(p, &q.answers), q.length_class))
        .collect();
    let pick = |c: Option<LengthClass>| -> Vec<(f64, f64)> {
        rows.iter()
            .filter(|r| c.is_none_or(|c| r.2 == c))
            .map(|r| (r.0, r.1))
            .collect()
    };
    let items: Vec<Value> = rows
        .iter()
        .map(|(f1, em, c)| json!({"f1": f1, "exact_match": em, "length_class": c}))
        .collect();
    Ok(json!({
        "overall": F1Summary::of(&pick(None)),
        "short": F1Summary::of(&pick(Some(LengthClass::Short))),
        "long": F1Summary::of(&pick(Some(LengthClass::Long))),
        "items": items,
    }))
}

fn eval_factor(rc: &RunConfig) -> Result<Value, Failure> {
    let data_path = required(&rc.data, "data")?;
    let items = load_factor(&read_text(data_path)?).map_err(|e| Failure::from(e).context(data_path.display()))?;
    let index = TraceIndex::open(required(&rc.trace_dir, "trace-dir")?)?;
    let pool = pool(rc.jobs)?;
    let mut runs = Vec::new();
    for &alpha in &rc.alpha {
        let scores = pool.install(|| {
            items
                .par_iter()
                .enumerate()
                .map(|(i, item)| {
                    FactorScores::score_item(item, |c| score_candidate(rc, &index, i, c, alpha))
                        .map_err(|e| Failure::from(e).context(format!("item {i}")))
                })
                .collect::<Result<Vec<_>, Failure>>()
        })?;
        let result = factor_accuracy(&scores)?;
        runs.push(json!({"alpha": alpha, "result": result, "scores": scores}));
    }
    Ok(json!({ "runs": runs }))
}

fn trace_synth(rc: &RunConfig) -> Result<Vec<u8>, Failure> {
    let o = &rc.synth;
    let mut spec = SyntheticSpec::new(rc.seed, o.vocab, o.layers, StepKind::parse_plan(&o.steps)?);
    if let Some(span) = &o.span {
        spec = spec.with_span_tokens(span.clone());
    }
    if let Some(floor) = o.floor {
        spec = spec.with_jsd_floor(floor);
    }
    let file = spec.record(o.forced.as_deref())?;
    Ok(write_trace(&file)?)
}

fn bench(rc: &RunConfig) -> Result<Value, Failure> {
    let mut runs = Vec::new();
    for &alpha in &rc.alpha {
        for &layers in &rc.bench.layer_counts {
            let mut config = PigConfig::new(1, vec![0])
                .with_alpha(alpha)
                .with_aggregator(rc.agg)
                .with_clip_max(rc.clip)
                .with_temperature(rc.temperature.unwrap_or(SCORING_TEMPERATURE));
            config.seed = rc.seed;
            config.token_filter = rc.filter.iter().copied().collect();
            let r = bench_step(&config, rc.bench.vocab, layers, rc.bench.reps)?;
            log::info!(
                "alpha {alpha} |J|={layers}: median {:.1}us, ratio {:.2}",
                r.decode_step.median_us,
                r.ratio
            );
            runs.push(json!({"alpha": alpha, "report": to_value(r)}));
        }
    }
    Ok(json!({ "runs": runs }))
}
