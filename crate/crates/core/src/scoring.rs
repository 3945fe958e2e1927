//! Accuracy, precision and recall of a description used as a classifier on
//! the held-out split.
//!
//! Conditional on the description, the agreement indicators are i.i.d.
//! Bernoulli, so the accuracy score is a binomial proportion. Precision and
//! recall are ratios of means sharing the true-positive numerator; their
//! delta-method variance reduces to `r (1 - r) / d` where `d` is the
//! denominator count, i.e. the binomial variance of the proportion among the
//! denominator rows.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::stats::{beta_quantile, normal_quantile};
use crate::{Error, FeatureId, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRow {
    pub doc_id: String,
    pub y_true: u8,
    pub y_pred: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTable {
    pub feature_id: FeatureId,
    pub rows: Vec<EvalRow>,
    /// Classifier outputs that could not be parsed; excluded from `rows`.
    pub invalid_count: usize,
}

impl EvalTable {
    pub fn new(feature_id: FeatureId, rows: Vec<EvalRow>, invalid_count: usize) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &rows {
            if r.y_true > 1 || r.y_pred > 1 {
                return Err(Error::Validation(format!("non-binary label for document `{}`", r.doc_id)));
            }
            if !seen.insert(r.doc_id.as_str()) {
                return Err(Error::Validation(format!("duplicate document `{}` in eval table", r.doc_id)));
            }
        }
        Ok(Self {
            feature_id,
            rows,
            invalid_count,
        })
    }

    pub fn from_labels(feature_id: FeatureId, y_true: &[u8], y_pred: &[u8]) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::Validation("label vectors differ in length".into()));
        }
        let rows = y_true
            .iter()
            .zip(y_pred)
            .enumerate()
            .map(|(i, (&t, &p))| EvalRow {
                doc_id: i.to_string(),
                y_true: t,
                y_pred: p,
            })
            .collect();
        Self::new(feature_id, rows, 0)
    }

    fn counts(&self) -> Counts {
        let mut c = Counts::default();
        for r in &self.rows {
            match (r.y_true, r.y_pred) {
                (1, 1) => c.tp += 1,
                (0, 1) => c.fp += 1,
                (1, 0) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        c
    }
}

#[derive(Default, Clone, Copy)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
    tn: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Accuracy,
    Precision,
    Recall,
}

/// Interval construction for a binomial proportion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    /// Equal-tailed Beta(x + 1/2, m - x + 1/2) interval.
    #[default]
    Jeffreys,
    /// Normal approximation `point ± z se`, clipped to [0, 1].
    Wald,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEstimate {
    pub kind: ScoreKind,
    pub point: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub m_effective: usize,
    /// Set exactly when the denominator count is zero.
    pub undefined: bool,
}

fn interval(successes: usize, trials: usize, se: f64, alpha_ci: f64, method: CiMethod) -> (f64, f64) {
    let point = successes as f64 / trials as f64;
    let (lo, hi) = match method {
        CiMethod::Wald => {
            let z = normal_quantile(1.0 - alpha_ci / 2.0);
            (point - z * se, point + z * se)
        }
        CiMethod::Jeffreys => {
            let (a, b) = (successes as f64 + 0.5, (trials - successes) as f64 + 0.5);
            let lo = if successes == 0 { 0.0 } else { beta_quantile(alpha_ci / 2.0, a, b) };
            let hi = if successes == trials { 1.0 } else { beta_quantile(1.0 - alpha_ci / 2.0, a, b) };
            (lo, hi)
        }
    };
    (lo.clamp(0.0, 1.0).min(point), hi.clamp(0.0, 1.0).max(point))
}

fn check_alpha(alpha_ci: f64) -> Result<()> {
    if alpha_ci > 0.0 && alpha_ci < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha_ci must lie in (0, 1), got {alpha_ci}")))
    }
}

/// Agreement rate between true and predicted labels.
pub fn a_score(table: &EvalTable, alpha_ci: f64, method: CiMethod) -> Result<ScoreEstimate> {
    check_alpha(alpha_ci)?;
    let m = table.rows.len();
    if m == 0 {
        return Err(Error::Validation(format!("feature {} has no valid eval rows", table.feature_id)));
    }
    let agree = table.rows.iter().filter(|r| r.y_true == r.y_pred).count();
    let point = agree as f64 / m as f64;
    if agree == 0 || agree == m {
        log::warn!("feature {}: degenerate A-score {point}; interval is clipped", table.feature_id);
    }
    let se = (point * (1.0 - point) / m as f64).sqrt();
    let (lo, hi) = interval(agree, m, se, alpha_ci, method);
    Ok(ScoreEstimate {
        kind: ScoreKind::Accuracy,
        point: Some(point),
        ci_lower: Some(lo),
        ci_upper: Some(hi),
        m_effective: m,
        undefined: false,
    })
}

/// Ratio of means `mean(num) / mean(den)` with `num ⊆ den`, and its
/// delta-method standard error from sample moments.
fn ratio_estimate(kind: ScoreKind, table: &EvalTable, num: usize, den: usize, alpha_ci: f64, method: CiMethod) -> Result<ScoreEstimate> {
    check_alpha(alpha_ci)?;
    let m = table.rows.len();
    if m == 0 {
        return Err(Error::Validation(format!("feature {} has no valid eval rows", table.feature_id)));
    }
    if den == 0 {
        return Ok(ScoreEstimate {
            kind,
            point: None,
            ci_lower: None,
            ci_upper: None,
            m_effective: m,
            undefined: true,
        });
    }
    let mf = m as f64;
    let (a, b) = (num as f64 / mf, den as f64 / mf);
    let r = num as f64 / den as f64;
    // Var(A) - 2 r Cov(A, B) + r^2 Var(B), with A = A B
    let var_a = a * (1.0 - a);
    let cov_ab = a * (1.0 - b);
    let var_b = b * (1.0 - b);
    let var = (var_a - 2.0 * r * cov_ab + r * r * var_b) / (b * b) / mf;
    let se = var.max(0.0).sqrt();
    let (lo, hi) = interval(num, den, se, alpha_ci, method);
    Ok(ScoreEstimate {
        kind,
        point: Some(r),
        ci_lower: Some(lo),
        ci_upper: Some(hi),
        m_effective: m,
        undefined: false,
    })
}

/// `TP / #(y_pred = 1)`.
pub fn p_score(table: &EvalTable, alpha_ci: f64, method: CiMethod) -> Result<ScoreEstimate> {
    let c = table.counts();
    ratio_estimate(ScoreKind::Precision, table, c.tp, c.tp + c.fp, alpha_ci, method)
}

/// `TP / #(y_true = 1)`.
pub fn r_score(table: &EvalTable, alpha_ci: f64, method: CiMethod) -> Result<ScoreEstimate> {
    let c = table.counts();
    ratio_estimate(ScoreKind::Recall, table, c.tp, c.tp + c.fn_, alpha_ci, method)
}

/// One line of the score report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub feature_id: FeatureId,
    pub description: String,
    pub accuracy: ScoreEstimate,
    pub precision: ScoreEstimate,
    pub recall: ScoreEstimate,
    pub invalid_count: usize,
}

pub fn score_table(table: &EvalTable, description: &str, alpha_ci: f64, method: CiMethod) -> Result<ScoreRow> {
    Ok(ScoreRow {
        feature_id: table.feature_id,
        description: description.to_string(),
        accuracy: a_score(table, alpha_ci, method)?,
        precision: p_score(table, alpha_ci, method)?,
        recall: r_score(table, alpha_ci, method)?,
        invalid_count: table.invalid_count,
    })
}

pub const SCORE_HEADER: &str = "feature_id\tdescription\ta_score\ta_ci_lower\ta_ci_upper\tp_score\tr_score\tm_effective";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_default()
}

/// Tabs and newlines would break the column layout.
pub fn sanitize_field(s: &str) -> String {
    s.chars().map(|c| if c == '\t' || c == '\n' || c == '\r' { ' ' } else { c }).collect()
}

pub fn format_scores(rows: &[ScoreRow]) -> String {
    let mut out = format!("{SCORE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.feature_id,
            sanitize_field(&r.description),
            fmt_opt(r.accuracy.point),
            fmt_opt(r.accuracy.ci_lower),
            fmt_opt(r.accuracy.ci_upper),
            fmt_opt(r.precision.point),
            fmt_opt(r.recall.point),
            r.accuracy.m_effective
        );
    }
    out
}

/// The subset of a score report needed downstream.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSummary {
    pub feature_id: FeatureId,
    pub description: String,
    pub a_score: Option<f64>,
    pub a_ci_lower: Option<f64>,
    pub a_ci_upper: Option<f64>,
    pub p_score: Option<f64>,
    pub r_score: Option<f64>,
    pub m_effective: usize,
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreSummary>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text, &path.display().to_string())
}

pub fn parse_scores(text: &str, file: &str) -> Result<Vec<ScoreSummary>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == SCORE_HEADER => {}
        _ => return Err(Error::parse(file, 1, "missing score header")),
    }
    let opt = |s: &str, line: usize| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::parse(file, line, format!("bad number `{s}`")))
        }
    };
    let mut out = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(Error::parse(file, ln, format!("expected 8 fields, found {}", f.len())));
        }
        out.push(ScoreSummary {
            feature_id: f[0].parse().map_err(|_| Error::parse(file, ln, "bad feature id"))?,
            description: f[1].to_string(),
            a_score: opt(f[2], ln)?,
            a_ci_lower: opt(f[3], ln)?,
            a_ci_upper: opt(f[4], ln)?,
            p_score: opt(f[5], ln)?,
            r_score: opt(f[6], ln)?,
            m_effective: f[7].parse().map_err(|_| Error::parse(file, ln, "bad m_effective"))?,
        });
    }
    Ok(out)
}
