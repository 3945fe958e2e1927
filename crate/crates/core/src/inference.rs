//! k-FWER controlling selection and simultaneous confidence intervals.
//!
//! The one-step rule rejects every testable feature whose statistic (its
//! absolute value when two-sided) strictly exceeds the bootstrap critical
//! value over the full testable set. The step-down rule repeats the test on
//! the features not yet rejected, each time taking the largest critical value
//! over `A ∪ I` for every `(k-1)`-subset `I` of the rejected set `R`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{critical_value, BootstrapRun, CriticalValue, Side, Subset};
use crate::transform::{FeatureEstimates, FeatureStatus};
use crate::{Error, FeatureId, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    OneStep,
    StepDown,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub alpha: f64,
    pub k: usize,
    pub side: Side,
    pub method: Method,
    pub max_subset_enumeration: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            k: 1,
            side: Side::TwoSided,
            method: Method::OneStep,
            max_subset_enumeration: 50_000,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.max_subset_enumeration == 0 {
            return Err(Error::Config("max_subset_enumeration must be positive".into()));
        }
        Ok(())
    }
}

/// Anything that can produce k-max critical values over feature subsets.
/// [`BootstrapRun`] is the real implementation; tests substitute fixed values.
pub trait CriticalValueSource {
    fn fingerprint(&self) -> &str;
    fn side(&self) -> Side;
    fn critical_value(&self, subset: &Subset, alpha: f64, k: usize) -> Result<CriticalValue>;
}

impl CriticalValueSource for BootstrapRun {
    fn fingerprint(&self) -> &str {
        BootstrapRun::fingerprint(self)
    }

    fn side(&self) -> Side {
        self.config().side
    }

    fn critical_value(&self, subset: &Subset, alpha: f64, k: usize) -> Result<CriticalValue> {
        critical_value(self, subset, alpha, k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub feature_id: FeatureId,
    pub theta_hat: f64,
    pub t_stat: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub rejected: bool,
    pub status: FeatureStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub config: InferenceConfig,
    pub n: usize,
    pub p: usize,
    pub studentized: bool,
    /// Rejected feature ids, ascending.
    pub selected: Vec<FeatureId>,
    /// Critical value of each executed step; the first is the one-step value.
    pub critical_values: Vec<CriticalValue>,
    pub subset_approximation: bool,
    pub per_feature: Vec<FeatureRecord>,
}

impl InferenceReport {
    pub fn record(&self, feature: FeatureId) -> Option<&FeatureRecord> {
        self.per_feature.iter().find(|r| r.feature_id == feature)
    }
}

pub fn one_step_select(est: &FeatureEstimates, run: &impl CriticalValueSource, cfg: &InferenceConfig) -> Result<InferenceReport> {
    select(est, run, &InferenceConfig { method: Method::OneStep, ..*cfg })
}

pub fn step_down_select(est: &FeatureEstimates, run: &impl CriticalValueSource, cfg: &InferenceConfig) -> Result<InferenceReport> {
    select(est, run, &InferenceConfig { method: Method::StepDown, ..*cfg })
}

/// Dispatches on `cfg.method`.
pub fn select(est: &FeatureEstimates, run: &impl CriticalValueSource, cfg: &InferenceConfig) -> Result<InferenceReport> {
    cfg.validate()?;
    if est.fingerprint != run.fingerprint() {
        return Err(Error::FingerprintMismatch {
            estimates: est.fingerprint.clone(),
            run: run.fingerprint().to_string(),
        });
    }
    if run.side() != cfg.side {
        return Err(Error::Config("bootstrap and inference disagree on sidedness".into()));
    }
    let testable = est.testable();
    if cfg.k > testable.len() {
        return Err(Error::KTooLarge {
            k: cfg.k,
            testable: testable.len(),
        });
    }
    let two_sided = cfg.side == Side::TwoSided;
    let stat = |j: usize| {
        let t = est.t_stats[j].expect("testable feature has a statistic");
        if two_sided {
            t.abs()
        } else {
            t
        }
    };

    let first = run.critical_value(&Subset::Full, cfg.alpha, cfg.k)?;
    let one_step_c = first.value;
    let mut rejected: BTreeSet<usize> = testable.iter().copied().filter(|&j| stat(j) > one_step_c).collect();
    let mut critical_values = vec![first];
    let mut approximated = false;

    if cfg.method == Method::StepDown {
        loop {
            // with fewer than k rejections the only admissible K is the full set
            if rejected.len() < cfg.k {
                break;
            }
            let remaining: Vec<usize> = testable.iter().copied().filter(|j| !rejected.contains(j)).collect();
            if remaining.is_empty() {
                break;
            }
            let r: Vec<usize> = rejected.iter().copied().collect();
            let guard = cfg.k - 1;
            let subsets: Vec<Vec<usize>> = if binomial_exceeds(r.len(), guard, cfg.max_subset_enumeration) {
                approximated = true;
                let mut by_stat = r.clone();
                by_stat.sort_by(|&a, &b| stat(b).total_cmp(&stat(a)).then(a.cmp(&b)));
                by_stat.truncate(guard);
                vec![by_stat]
            } else {
                r.iter().copied().combinations(guard).collect()
            };
            let mut best: Option<CriticalValue> = None;
            for extra in subsets {
                let mut k_set = remaining.clone();
                k_set.extend(extra);
                k_set.sort_unstable();
                let cv = run.critical_value(&Subset::Features(k_set), cfg.alpha, cfg.k)?;
                if best.as_ref().is_none_or(|b| cv.value > b.value) {
                    best = Some(cv);
                }
            }
            let step = best.expect("at least one guard subset");
            let fresh: Vec<usize> = remaining.iter().copied().filter(|&j| stat(j) > step.value).collect();
            critical_values.push(step);
            if fresh.is_empty() {
                break;
            }
            rejected.extend(fresh);
        }
    }
    if approximated {
        log::warn!("step-down guard subsets exceeded the enumeration cap; used the largest-statistic subset");
    }

    let sqrt_n = (est.n as f64).sqrt();
    let per_feature = (0..est.p())
        .map(|j| {
            let testable = est.status[j] == FeatureStatus::Testable;
            let (lo, hi) = if testable && two_sided {
                let half = if est.studentized {
                    one_step_c * (est.sigma_hat_diag[j] / est.n as f64).sqrt()
                } else {
                    one_step_c / sqrt_n
                };
                (Some(est.theta_hat[j] - half), Some(est.theta_hat[j] + half))
            } else {
                (None, None)
            };
            FeatureRecord {
                feature_id: est.feature_ids[j],
                theta_hat: est.theta_hat[j],
                t_stat: est.t_stats[j],
                ci_lower: lo,
                ci_upper: hi,
                rejected: rejected.contains(&j),
                status: est.status[j],
            }
        })
        .collect();
    let mut selected: Vec<FeatureId> = rejected.iter().map(|&j| est.feature_ids[j]).collect();
    selected.sort_unstable();

    Ok(InferenceReport {
        config: *cfg,
        n: est.n,
        p: est.p(),
        studentized: est.studentized,
        selected,
        critical_values,
        subset_approximation: approximated,
        per_feature,
    })
}

/// Whether `C(n, r)` exceeds `cap`.
fn binomial_exceeds(n: usize, r: usize, cap: u64) -> bool {
    let r = r.min(n - r.min(n));
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u128::from(cap) {
            return true;
        }
    }
    acc > u128::from(cap)
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: InferenceConfig,
    n: usize,
    p: usize,
    studentized: bool,
    selected: Vec<FeatureId>,
    critical_values: Vec<CriticalValue>,
    subset_approximation: bool,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: Header,
}

/// JSON-lines report: one header record, then one record per feature.
pub fn write_report(report: &InferenceReport, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let header = HeaderLine {
        header: Header {
            config: report.config,
            n: report.n,
            p: report.p,
            studentized: report.studentized,
            selected: report.selected.clone(),
            critical_values: report.critical_values.clone(),
            subset_approximation: report.subset_approximation,
        },
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(io)?;
    for r in &report.per_feature {
        writeln!(w, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_report(path: &Path) -> Result<InferenceReport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::parse(&name, 1, "empty report"))?
        .map_err(|e| Error::io(path, e))?;
    let header: HeaderLine =
        serde_json::from_str(&first).map_err(|e| Error::parse(&name, 1, format!("bad header: {e}")))?;
    let mut per_feature = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FeatureRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(&name, i + 2, e.to_string()))?;
        per_feature.push(rec);
    }
    let h = header.header;
    if per_feature.len() != h.p {
        return Err(Error::parse(&name, 1, format!("header declares p = {} but {} records follow", h.p, per_feature.len())));
    }
    Ok(InferenceReport {
        config: h.config,
        n: h.n,
        p: h.p,
        studentized: h.studentized,
        selected: h.selected,
        critical_values: h.critical_values,
        subset_approximation: h.subset_approximation,
        per_feature,
    })
}

/// Discoveries ranked by estimate, as `Feature\testimate\tt-stat`.
pub fn format_table(report: &InferenceReport) -> String {
    let mut rows: Vec<&FeatureRecord> = report.per_feature.iter().filter(|r| r.rejected).collect();
    rows.sort_by(|a, b| b.theta_hat.total_cmp(&a.theta_hat).then(a.feature_id.cmp(&b.feature_id)));
    let mut out = String::from("Feature\testimate\tt-stat\n");
    for r in rows {
        let t = r.t_stat.map(|t| format!("{t:.2}")).unwrap_or_default();
        let _ = writeln!(out, "{}\t{:.4}\t{}", r.feature_id, r.theta_hat, t);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bootstrap::{run_bootstrap, BootstrapConfig, FullTag, SubsetDescriptor};
    use crate::transform::{estimate_features, TransformedMatrix};
    use rand::{Rng, SeedableRng};

    struct Fixed {
        value: f64,
        fingerprint: String,
    }

    impl CriticalValueSource for Fixed {
        fn fingerprint(&self) -> &str {
            &self.fingerprint
        }
        fn side(&self) -> Side {
            Side::TwoSided
        }
        fn critical_value(&self, _: &Subset, alpha: f64, k: usize) -> Result<CriticalValue> {
            Ok(CriticalValue {
                value: self.value,
                alpha,
                k,
                subset: SubsetDescriptor::Full(FullTag::Full),
            })
        }
    }

    fn stub_estimates(t: &[f64]) -> FeatureEstimates {
        let p = t.len();
        FeatureEstimates {
            n: 100,
            feature_ids: (0..p as u32).map(FeatureId).collect(),
            theta_hat: t.iter().map(|t| t / 20.0).collect(),
            sigma_hat_diag: vec![0.25; p],
            t_stats: t.iter().map(|&t| Some(t)).collect(),
            status: vec![FeatureStatus::Testable; p],
            studentized: true,
            fingerprint: "stub".into(),
        }
    }

    #[test]
    fn one_step_with_fixed_critical_value() {
        let est = stub_estimates(&[3.0, 0.1]);
        let run = Fixed { value: 1.96, fingerprint: "stub".into() };
        let rep = one_step_select(&est, &run, &InferenceConfig::default()).unwrap();
        assert_eq!(rep.selected, vec![FeatureId(0)]);
        assert!(rep.per_feature[0].rejected && !rep.per_feature[1].rejected);
    }

    #[test]
    fn ci_arithmetic() {
        // theta 0.1, sigma 0.25, n 100, c 2.0 -> 0.1 ± 2 * 0.05
        let est = stub_estimates(&[2.0]);
        let run = Fixed { value: 2.0, fingerprint: "stub".into() };
        let rep = one_step_select(&est, &run, &InferenceConfig::default()).unwrap();
        let r = &rep.per_feature[0];
        assert!((r.ci_lower.unwrap() - 0.0).abs() < 1e-12);
        assert!((r.ci_upper.unwrap() - 0.2).abs() < 1e-12);
        // t exactly at c is not rejected
        assert!(!r.rejected);
    }

    #[test]
    fn nothing_above_threshold() {
        let est = stub_estimates(&[0.5, -1.0, 1.5]);
        let run = Fixed { value: 1.96, fingerprint: "stub".into() };
        let rep = step_down_select(&est, &run, &InferenceConfig::default()).unwrap();
        assert!(rep.selected.is_empty());
        for r in &rep.per_feature {
            assert!(r.ci_lower.unwrap() <= r.theta_hat && r.theta_hat <= r.ci_upper.unwrap());
        }
    }

    #[test]
    fn errors() {
        let est = stub_estimates(&[1.0, 2.0]);
        let bad = Fixed { value: 1.0, fingerprint: "other".into() };
        assert!(matches!(
            one_step_select(&est, &bad, &InferenceConfig::default()),
            Err(Error::FingerprintMismatch { .. })
        ));
        let run = Fixed { value: 1.0, fingerprint: "stub".into() };
        let cfg = InferenceConfig { k: 3, ..Default::default() };
        assert!(matches!(one_step_select(&est, &run, &cfg), Err(Error::KTooLarge { k: 3, testable: 2 })));
        let one = InferenceConfig { side: Side::OneSided, ..Default::default() };
        assert!(one_step_select(&est, &run, &one).is_err());
    }

    #[test]
    fn binomial_cap() {
        assert!(!binomial_exceeds(10, 3, 120));
        assert!(binomial_exceeds(10, 3, 119));
        assert!(!binomial_exceeds(5, 0, 1));
        assert!(binomial_exceeds(100_000, 4, 50_000));
    }

    fn random_fixture(n: usize, p: usize, seed: u64, effect: f64) -> TransformedMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * p)
            .map(|idx| {
                let j = idx / n;
                let q = if j < 2 { 0.3 + effect } else { 0.3 };
                f64::from(u8::from(rng.random::<f64>() < q)) - 0.3
            })
            .collect();
        TransformedMatrix::from_dense_columns(n, (0..p as u32).map(FeatureId).collect(), &data).unwrap()
    }

    #[test]
    fn step_down_contains_one_step_and_is_monotone() {
        for seed in 0..5 {
            let x = random_fixture(200, 8, seed, 0.12);
            let est = estimate_features(&x, true).unwrap();
            let run = run_bootstrap(&x, &est, &BootstrapConfig { n_draws: 300, seed, ..Default::default() }).unwrap();
            for k in 1..=3 {
                let cfg = InferenceConfig { k, ..Default::default() };
                let one = one_step_select(&est, &run, &cfg).unwrap();
                let down = step_down_select(&est, &run, &cfg).unwrap();
                assert!(one.selected.iter().all(|f| down.selected.contains(f)));
                assert_eq!(one.critical_values[0], down.critical_values[0]);
                for w in down.critical_values.windows(2) {
                    assert!(w[1].value <= w[0].value);
                }
            }
        }
    }

    #[test]
    fn report_round_trip_and_table() {
        let x = random_fixture(100, 5, 3, 0.3);
        let est = estimate_features(&x, true).unwrap();
        let run = run_bootstrap(&x, &est, &BootstrapConfig { n_draws: 200, ..Default::default() }).unwrap();
        let rep = step_down_select(&est, &run, &InferenceConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inference.jsonl");
        write_report(&rep, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let second: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        let keys: Vec<&str> = second.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expected = vec!["feature_id", "theta_hat", "t_stat", "ci_lower", "ci_upper", "rejected", "status"];
        expected.sort_unstable();
        let mut got = keys.clone();
        got.sort_unstable();
        assert_eq!(got, expected);
        assert_eq!(read_report(&path).unwrap(), rep);
        let table = format_table(&rep);
        assert!(table.starts_with("Feature\testimate\tt-stat\n"));
        assert_eq!(table.lines().count(), 1 + rep.selected.len());
    }

    #[test]
    fn permutation_equivariance() {
        let x = random_fixture(150, 6, 11, 0.2);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let ids: Vec<FeatureId> = perm.iter().map(|&j| x.feature_ids()[j]).collect();
        let data: Vec<f64> = perm.iter().flat_map(|&j| x.dense_column(j)).collect();
        let y = TransformedMatrix::from_dense_columns(150, ids, &data).unwrap();
        let cfg = InferenceConfig { k: 2, ..Default::default() };
        let bc = BootstrapConfig { n_draws: 200, ..Default::default() };
        let go = |m: &TransformedMatrix| {
            let est = estimate_features(m, true).unwrap();
            let run = run_bootstrap(m, &est, &bc).unwrap();
            step_down_select(&est, &run, &cfg).unwrap()
        };
        let (a, b) = (go(&x), go(&y));
        assert_eq!(a.selected, b.selected);
        for r in &a.per_feature {
            let s = b.record(r.feature_id).unwrap();
            assert_eq!(r.rejected, s.rejected);
            assert!((r.ci_lower.unwrap() - s.ci_lower.unwrap()).abs() < 1e-12);
        }
    }
}
