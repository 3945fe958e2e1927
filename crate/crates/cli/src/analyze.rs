//! The end-to-end discovery pipeline.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use discovery_core::autointerp::{build_generation_prompt, classify_many, extract_exemplar_sets, generate_description, Description};
use discovery_core::bootstrap::{run_bootstrap, BootstrapConfig};
use discovery_core::data::{
    drop_degenerate, load_dictionary_file, pool_and_binarize, read_activations, split_sample, Corpus, FeatureMatrix,
};
use discovery_core::inference::{format_table, select, write_report, InferenceReport};
use discovery_core::rng::derive_seed;
use discovery_core::scoring::{format_scores, sanitize_field, score_table, EvalRow, EvalTable, ScoreRow};
use discovery_core::transform::{apply_transform, estimate_features, TransformKind};

use crate::config::{AutointerpConfig, DegenerateScope, RunConfig};

const SPLIT_KEY: u64 = 1;
const BOOTSTRAP_KEY: u64 = 2;

fn load_matrix(cfg: &RunConfig, corpus: &Corpus) -> Result<FeatureMatrix> {
    if let Some(path) = &cfg.input.activations {
        let records = read_activations(path)?;
        return Ok(pool_and_binarize(records, corpus, cfg.input.threshold)?);
    }
    let path = cfg.input.dictionary.as_ref().expect("validated input");
    Ok(load_dictionary_file(path)?.align_to(corpus)?)
}

pub fn run(cfg: &RunConfig) -> Result<()> {
    let corpus = Corpus::load(&cfg.input.corpus)?;
    let y = load_matrix(cfg, &corpus)?;
    let split = split_sample(corpus.len(), cfg.split.eval_fraction, derive_seed(cfg.seed, &[SPLIT_KEY]))?;
    log::info!("{} estimation and {} evaluation documents", split.estim.len(), split.eval.len());

    let all_rows: Vec<usize> = (0..corpus.len()).collect();
    let scope = match cfg.split.degenerate_scope {
        DegenerateScope::Estimation => &split.estim,
        DegenerateScope::Full => &all_rows,
    };
    let y = drop_degenerate(&y, scope)?;
    if !y.dropped_features().is_empty() {
        log::info!("dropped {} features with no variation on the estimation split", y.dropped_features().len());
    }
    let w = match cfg.transform.kind {
        TransformKind::HtDiffInMeans => Some(corpus.covariates()?),
        TransformKind::Mean => None,
    };
    let x = apply_transform(&y, w.as_deref(), &cfg.transform.spec(), &split.estim)?;
    let (n, p) = (x.n(), x.p());
    log::info!("k guidance: log(p n) = {:.2} for p = {p}, n = {n}", ((p * n) as f64).ln());

    let est = estimate_features(&x, cfg.bootstrap.studentize)?;
    let boot = BootstrapConfig {
        seed: derive_seed(cfg.seed, &[BOOTSTRAP_KEY, cfg.bootstrap.seed]),
        ..cfg.bootstrap
    };
    let run = run_bootstrap(&x, &est, &boot)?;
    let report = select(&est, &run, &cfg.inference)?;
    log::info!("{} of {p} features selected", report.selected.len());

    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    write_report(&report, &cfg.output_dir.join("inference.jsonl"))?;
    write(&cfg.output_dir.join("inference_table.tsv"), &format_table(&report))?;

    if let Some(ai) = &cfg.autointerp {
        let rows = autointerp(cfg, ai, &corpus, &y, &split.estim, &split.eval, &report)?;
        write(&cfg.output_dir.join("scores.tsv"), &format_scores(&rows))?;
        write(&cfg.output_dir.join("discoveries.tsv"), &discovery_table(&report, &rows))?;
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn autointerp(
    cfg: &RunConfig,
    ai: &AutointerpConfig,
    corpus: &Corpus,
    y: &FeatureMatrix,
    estim: &[usize],
    eval: &[usize],
    report: &InferenceReport,
) -> Result<Vec<ScoreRow>> {
    if report.selected.is_empty() {
        return Ok(Vec::new());
    }
    let backend = ai.backend.build()?;
    let records = read_activations(cfg.input.activations.as_ref().expect("validated input"))?;
    let exemplars = extract_exemplar_sets(records, corpus, estim, &report.selected, ai.exemplars)?;

    let mut eval_docs = Vec::new();
    let mut missing_text = Vec::new();
    for &row in eval {
        let doc = corpus.get(row);
        match &doc.text {
            Some(t) => eval_docs.push((row, doc.doc_id.clone(), t.clone())),
            None => missing_text.push(row),
        }
    }
    if !missing_text.is_empty() {
        log::warn!("{} evaluation documents have no text and count as invalid", missing_text.len());
    }
    let pairs: Vec<(String, String)> = eval_docs.iter().map(|(_, id, t)| (id.clone(), t.clone())).collect();

    let mut rows = Vec::new();
    let mut descriptions: Vec<Description> = Vec::new();
    for &feature in &report.selected {
        let prompt = build_generation_prompt(&exemplars[&feature]);
        let desc = generate_description(backend.as_ref(), &prompt, feature, ai.backend.retries)?;
        let preds = classify_many(backend.as_ref(), &desc.text, &pairs, feature, ai.backend.retries, ai.backend.max_in_flight)?;
        let j = y.position_of(feature).expect("selected feature is in the matrix");
        let mut table_rows = Vec::new();
        let mut invalid = missing_text.len();
        for ((row, doc_id, _), pred) in eval_docs.iter().zip(&preds) {
            match pred.predicted {
                Some(label) => table_rows.push(EvalRow {
                    doc_id: doc_id.clone(),
                    y_true: y.get(*row, j),
                    y_pred: label,
                }),
                None => invalid += 1,
            }
        }
        let table = EvalTable::new(feature, table_rows, invalid)?;
        let row = score_table(&table, &desc.text, ai.alpha_ci, ai.ci_method)
            .with_context(|| format!("scoring feature {feature}"))?;
        if invalid > 0 {
            log::warn!("feature {feature}: {invalid} evaluation documents without a valid label");
        }
        rows.push(row);
        descriptions.push(desc);
    }
    let mut log_text = String::new();
    for d in &descriptions {
        writeln!(log_text, "{}", serde_json::to_string(d)?)?;
    }
    write(&cfg.output_dir.join("descriptions.jsonl"), &log_text)?;
    Ok(rows)
}

/// Discoveries ranked by estimate with their descriptions and A-scores.
pub fn discovery_table(report: &InferenceReport, scores: &[ScoreRow]) -> String {
    let mut recs: Vec<_> = report.per_feature.iter().filter(|r| r.rejected).collect();
    recs.sort_by(|a, b| b.theta_hat.total_cmp(&a.theta_hat).then(a.feature_id.cmp(&b.feature_id)));
    let mut out = String::from("Feature\tEstimate\tDescription\tt-stat\tA-score\n");
    for r in recs {
        let s = scores.iter().find(|s| s.feature_id == r.feature_id);
        let desc = s.map(|s| sanitize_field(&s.description)).unwrap_or_default();
        let a = s.and_then(|s| s.accuracy.point).map(|v| format!("{v:.3}")).unwrap_or_default();
        let t = r.t_stat.map(|t| format!("{t:.2}")).unwrap_or_default();
        let _ = writeln!(out, "{}\t{:.4}\t{}\t{}\t{}", r.feature_id, r.theta_hat, desc, t, a);
    }
    out
}
