//! Synthetic data with known ground truth and Monte Carlo validation.
//!
//! Binary features come from a Gaussian copula: for document `i` and feature
//! `j` the latent `Z_ij = sqrt(rho) U_ig + sqrt(1 - rho) E_ij` (one factor `U`
//! per correlation block `g`) is thresholded at `Phi^{-1}(1 - q)`, so each
//! indicator is Bernoulli(`q`) with dependence controlled by `rho`.
//!
//! In the randomized-experiment design (`ht_diff_in_means`) the sparsity `s_j`
//! is the marginal activation probability and an effect `theta_j` splits it
//! into arm probabilities `q0 = s - pi theta` and `q1 = s + (1 - pi) theta`,
//! so `q1 - q0 = theta` and `pi q1 + (1 - pi) q0 = s`. Both potential outcomes
//! share the latent draw. In the `mean` design the indicator has probability
//! `s + theta` and is centered at `s`, so `theta` is again the estimand.
//!
//! Every random stream is keyed by `(seed, rep, purpose)`; the latent noise,
//! the block factors and the treatment assignment use separate streams so
//! that, for instance, an equicorrelated design with `rho = 0` reproduces the
//! independent design exactly.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{run_bootstrap, BootstrapConfig, Side};
use crate::data::{FeatureMatrix, Provenance};
use crate::inference::{select, InferenceConfig};
use crate::rng::{derive_seed, keyed_rng};
use crate::scoring::{a_score, p_score, r_score, CiMethod, EvalTable};
use crate::stats::{binomial_se, ks_distance, normal_quantile};
use crate::transform::{apply_transform, estimate_features, FeatureEstimates, TransformKind, TransformSpec, TransformedMatrix};
use crate::{Error, FeatureId, Result};

const STREAM_NOISE: u64 = 0;
const STREAM_FACTOR: u64 = 1;
const STREAM_ASSIGN: u64 = 2;
const KEY_BOOTSTRAP: u64 = 0xB007;
const KEY_ORACLE: u64 = 0x0AC1E;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Correlation {
    Independent,
    Equicorrelated { rho: f64 },
    Block { rho: f64, block_size: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sparsity {
    Scalar(f64),
    PerFeature(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Effect {
    pub feature: usize,
    pub size: f64,
}

fn default_pi() -> f64 {
    0.5
}

fn default_transform() -> TransformKind {
    TransformKind::HtDiffInMeans
}

fn default_correlation() -> Correlation {
    Correlation::Independent
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub n: usize,
    pub p: usize,
    pub sparsity: Sparsity,
    #[serde(default = "default_correlation")]
    pub correlation: Correlation,
    #[serde(default)]
    pub effects: Vec<Effect>,
    #[serde(default = "default_transform")]
    pub transform: TransformKind,
    #[serde(default = "default_pi")]
    pub pi: f64,
    #[serde(default)]
    pub seed: u64,
}

impl DgpSpec {
    pub fn null(n: usize, p: usize, sparsity: f64, correlation: Correlation, seed: u64) -> Self {
        Self {
            n,
            p,
            sparsity: Sparsity::Scalar(sparsity),
            correlation,
            effects: Vec::new(),
            transform: TransformKind::HtDiffInMeans,
            pi: 0.5,
            seed,
        }
    }

    /// Per-feature `(q0, q1)` activation probabilities plus the planted
    /// effect vector.
    fn probabilities(&self) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        if self.n < 2 || self.p == 0 {
            return Err(Error::Config(format!("need n >= 2 and p >= 1, got n = {}, p = {}", self.n, self.p)));
        }
        let s: Vec<f64> = match &self.sparsity {
            Sparsity::Scalar(v) => vec![*v; self.p],
            Sparsity::PerFeature(v) if v.len() == self.p => v.clone(),
            Sparsity::PerFeature(v) => {
                return Err(Error::Config(format!("{} sparsities for p = {}", v.len(), self.p)));
            }
        };
        if let Some(bad) = s.iter().find(|&&q| !(q > 0.0 && q < 1.0)) {
            return Err(Error::Config(format!("sparsity {bad} outside (0, 1)")));
        }
        match self.correlation {
            Correlation::Independent => {}
            Correlation::Equicorrelated { rho } | Correlation::Block { rho, .. } if !(0.0..1.0).contains(&rho) => {
                return Err(Error::Config(format!("correlation {rho} outside [0, 1)")));
            }
            Correlation::Block { block_size: 0, .. } => return Err(Error::Config("block size must be positive".into())),
            _ => {}
        }
        if self.transform == TransformKind::HtDiffInMeans && !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(Error::Config(format!("pi = {} outside (0, 1)", self.pi)));
        }
        if self.effects.len() >= self.p {
            return Err(Error::Config("at least one feature must be null".into()));
        }
        let mut theta = vec![0.0; self.p];
        for e in &self.effects {
            if e.feature >= self.p {
                return Err(Error::Config(format!("effect on feature {} but p = {}", e.feature, self.p)));
            }
            if theta[e.feature] != 0.0 {
                return Err(Error::Config(format!("feature {} has two effects", e.feature)));
            }
            theta[e.feature] = e.size;
        }
        let (mut q0, mut q1) = (Vec::with_capacity(self.p), Vec::with_capacity(self.p));
        for j in 0..self.p {
            let (a, b) = match self.transform {
                TransformKind::HtDiffInMeans => (s[j] - self.pi * theta[j], s[j] + (1.0 - self.pi) * theta[j]),
                TransformKind::Mean => (s[j] + theta[j], s[j] + theta[j]),
            };
            if !(a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!(
                    "effect {} on feature {j} with sparsity {} gives activation probabilities ({a}, {b}) outside (0, 1)",
                    theta[j], s[j]
                )));
            }
            q0.push(a);
            q1.push(b);
        }
        Ok((q0, q1, theta))
    }

    fn groups(&self) -> (usize, Vec<usize>, f64) {
        match self.correlation {
            Correlation::Independent => (0, vec![0; self.p], 0.0),
            Correlation::Equicorrelated { rho } => (1, vec![0; self.p], rho),
            Correlation::Block { rho, block_size } => {
                let g = self.p.div_ceil(block_size);
                (g, (0..self.p).map(|j| j / block_size).collect(), rho)
            }
        }
    }
}

/// Row generator shared by dataset simulation and the covariance oracle.
struct RowSampler {
    thresh0: Vec<f64>,
    thresh1: Vec<f64>,
    n_groups: usize,
    group: Vec<usize>,
    a: f64,
    b: f64,
    pi: f64,
    ht: bool,
    noise: ChaCha8Rng,
    factor: ChaCha8Rng,
    assign: ChaCha8Rng,
    u: Vec<f64>,
}

impl RowSampler {
    fn new(spec: &DgpSpec, q0: &[f64], q1: &[f64], seed: u64) -> Self {
        let (n_groups, group, rho) = spec.groups();
        let thr = |q: &[f64]| q.iter().map(|&q| normal_quantile(1.0 - q)).collect::<Vec<_>>();
        Self {
            thresh0: thr(q0),
            thresh1: thr(q1),
            n_groups,
            group,
            a: rho.sqrt(),
            b: (1.0 - rho).sqrt(),
            pi: spec.pi,
            ht: spec.transform == TransformKind::HtDiffInMeans,
            noise: keyed_rng(seed, STREAM_NOISE),
            factor: keyed_rng(seed, STREAM_FACTOR),
            assign: keyed_rng(seed, STREAM_ASSIGN),
            u: vec![0.0; n_groups],
        }
    }

    /// Draws one document; `on` receives the active feature indices.
    fn next_row(&mut self, on: &mut Vec<usize>) -> f64 {
        let w = if self.ht { f64::from(u8::from(self.assign.random::<f64>() < self.pi)) } else { 0.0 };
        for g in 0..self.n_groups {
            self.u[g] = self.factor.sample(StandardNormal);
        }
        let thresh = if w == 1.0 { &self.thresh1 } else { &self.thresh0 };
        on.clear();
        for (j, &t) in thresh.iter().enumerate() {
            let e: f64 = self.noise.sample(StandardNormal);
            let z = if self.n_groups == 0 { e } else { self.a * self.u[self.group[j]] + self.b * e };
            if z > t {
                on.push(j);
            }
        }
        w
    }
}

#[derive(Clone, Debug)]
pub struct SimDataset {
    pub y: FeatureMatrix,
    pub w: Vec<f64>,
    pub x: TransformedMatrix,
    /// Planted `theta_j`; zero marks a true null.
    pub theta: Vec<f64>,
}

impl SimDataset {
    pub fn is_null(&self, j: usize) -> bool {
        self.theta[j] == 0.0
    }
}

pub fn rep_seed(spec: &DgpSpec, rep: u64) -> u64 {
    derive_seed(spec.seed, &[rep])
}

/// Draws replication `rep` of `spec`; deterministic in `(spec.seed, rep)`.
pub fn simulate_dataset(spec: &DgpSpec, rep: u64) -> Result<SimDataset> {
    let (q0, q1, theta) = spec.probabilities()?;
    let mut sampler = RowSampler::new(spec, &q0, &q1, rep_seed(spec, rep));
    let mut columns: Vec<Vec<u32>> = vec![Vec::new(); spec.p];
    let mut w = Vec::with_capacity(spec.n);
    let mut on = Vec::new();
    for i in 0..spec.n {
        w.push(sampler.next_row(&mut on));
        for &j in &on {
            columns[j].push(i as u32);
        }
    }
    let y = FeatureMatrix::from_columns(
        (0..spec.n).map(|i| format!("d{i}")).collect(),
        (0..spec.p as u32).map(FeatureId).collect(),
        columns,
        Provenance::Synthetic,
    )?;
    let scope: Vec<usize> = (0..spec.n).collect();
    let x = match spec.transform {
        TransformKind::HtDiffInMeans => apply_transform(&y, Some(&w), &TransformSpec::ht(spec.pi), &scope)?,
        TransformKind::Mean => {
            let s = match &spec.sparsity {
                Sparsity::Scalar(v) => vec![*v; spec.p],
                Sparsity::PerFeature(v) => v.clone(),
            };
            let mut data = vec![0.0; spec.n * spec.p];
            for j in 0..spec.p {
                let col = &mut data[j * spec.n..(j + 1) * spec.n];
                col.iter_mut().for_each(|v| *v = -s[j]);
                for &r in y.column(j) {
                    col[r as usize] += 1.0;
                }
            }
            TransformedMatrix::from_dense_columns(spec.n, y.feature_ids().to_vec(), &data)?
        }
    };
    Ok(SimDataset { y, w, x, theta })
}

/// Bootstrap settings plus the inference configurations evaluated on each
/// replication's draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McSettings {
    pub bootstrap: BootstrapConfig,
    pub inference: Vec<InferenceConfig>,
    pub reps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub config: InferenceConfig,
    pub reps: usize,
    pub empirical_k_fwer: f64,
    /// Rejection rate of each planted effect, in `DgpSpec::effects` order.
    pub per_effect_power: Vec<f64>,
    pub mc_standard_error: f64,
    pub ks_distance: Option<f64>,
    /// Selected-set size in every replication.
    pub selected_counts: Vec<usize>,
}

struct RepOutcome {
    false_rejections: usize,
    selected: usize,
    hits: Vec<bool>,
}

fn run_rep(spec: &DgpSpec, settings: &McSettings, rep: u64) -> Result<Vec<RepOutcome>> {
    let data = simulate_dataset(spec, rep)?;
    let est = estimate_features(&data.x, settings.bootstrap.studentize)?;
    let mut out = Vec::with_capacity(settings.inference.len());
    let mut runs: Vec<(Side, crate::bootstrap::BootstrapRun)> = Vec::new();
    for cfg in &settings.inference {
        if !runs.iter().any(|(s, _)| *s == cfg.side) {
            let bc = BootstrapConfig {
                side: cfg.side,
                seed: derive_seed(rep_seed(spec, rep), &[KEY_BOOTSTRAP, settings.bootstrap.seed]),
                ..settings.bootstrap
            };
            runs.push((cfg.side, run_bootstrap(&data.x, &est, &bc)?));
        }
        let run = &runs.iter().find(|(s, _)| *s == cfg.side).expect("run built above").1;
        let report = select(&est, run, cfg)?;
        let rejected: Vec<bool> = report.per_feature.iter().map(|r| r.rejected).collect();
        out.push(RepOutcome {
            false_rejections: (0..spec.p).filter(|&j| rejected[j] && data.is_null(j)).count(),
            selected: report.selected.len(),
            hits: spec.effects.iter().map(|e| rejected[e.feature]).collect(),
        });
    }
    Ok(out)
}

/// Runs the selection pipeline on `settings.reps` replications and reports,
/// per inference configuration, the frequency of `k` or more false
/// rejections and the rejection rate of each planted effect.
pub fn estimate_k_fwer(spec: &DgpSpec, settings: &McSettings) -> Result<Vec<McResult>> {
    if settings.reps < 100 {
        return Err(Error::Config(format!("need at least 100 replications, got {}", settings.reps)));
    }
    if settings.inference.is_empty() {
        return Err(Error::Config("no inference configurations to evaluate".into()));
    }
    spec.probabilities()?;
    let per_rep: Vec<Vec<RepOutcome>> = (0..settings.reps as u64)
        .into_par_iter()
        .map(|rep| {
            run_rep(spec, settings, rep).map_err(|e| Error::Replication {
                rep,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let reps = settings.reps;
    Ok(settings
        .inference
        .iter()
        .enumerate()
        .map(|(c, cfg)| {
            let exceed = per_rep.iter().filter(|r| r[c].false_rejections >= cfg.k).count();
            let rate = exceed as f64 / reps as f64;
            let per_effect_power = (0..spec.effects.len())
                .map(|e| per_rep.iter().filter(|r| r[c].hits[e]).count() as f64 / reps as f64)
                .collect();
            McResult {
                config: *cfg,
                reps,
                empirical_k_fwer: rate,
                per_effect_power,
                mc_standard_error: binomial_se(rate, reps),
                ks_distance: None,
                selected_counts: per_rep.iter().map(|r| r[c].selected).collect(),
            }
        })
        .collect())
}

/// Population covariance of one `X` row, estimated from `draws` simulated
/// documents.
pub fn simulate_population_covariance(spec: &DgpSpec, draws: usize, seed: u64) -> Result<DMatrix<f64>> {
    let (q0, q1, _) = spec.probabilities()?;
    let p = spec.p;
    let s: Vec<f64> = match &spec.sparsity {
        Sparsity::Scalar(v) => vec![*v; p],
        Sparsity::PerFeature(v) => v.clone(),
    };
    let chunk = 50_000usize;
    let n_chunks = draws.div_ceil(chunk);
    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut sampler = RowSampler::new(spec, &q0, &q1, derive_seed(seed, &[KEY_ORACLE, c as u64]));
            let mut sum = vec![0.0; p];
            let mut cross = vec![0.0; p * p];
            let mut on = Vec::new();
            let mut x = vec![0.0; p];
            let rows = chunk.min(draws - c * chunk);
            for _ in 0..rows {
                let w = sampler.next_row(&mut on);
                match spec.transform {
                    TransformKind::HtDiffInMeans => {
                        let v = (w - spec.pi) / (spec.pi * (1.0 - spec.pi));
                        for &j in &on {
                            sum[j] += v;
                            for &l in &on {
                                cross[j * p + l] += v * v;
                            }
                        }
                    }
                    TransformKind::Mean => {
                        for j in 0..p {
                            x[j] = -s[j];
                        }
                        for &j in &on {
                            x[j] += 1.0;
                        }
                        for j in 0..p {
                            sum[j] += x[j];
                            for l in 0..p {
                                cross[j * p + l] += x[j] * x[l];
                            }
                        }
                    }
                }
            }
            (sum, cross)
        })
        .collect();
    let mut sum = vec![0.0; p];
    let mut cross = vec![0.0; p * p];
    for (s, c) in partials {
        sum.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        cross.iter_mut().zip(c).for_each(|(a, b)| *a += b);
    }
    let nf = draws as f64;
    Ok(DMatrix::from_fn(p, p, |j, l| cross[j * p + l] / nf - (sum[j] / nf) * (sum[l] / nf)))
}

/// Draws `draws` k-max statistics of `N(0, C)` where `C` is the correlation
/// matrix of `cov`.
pub fn gaussian_kmax_sample(cov: &DMatrix<f64>, k: usize, side: Side, draws: usize, seed: u64) -> Result<Vec<f64>> {
    let p = cov.nrows();
    if k == 0 || k > p {
        return Err(Error::Validation(format!("k = {k} outside 1..={p}")));
    }
    let d: Vec<f64> = (0..p).map(|j| cov[(j, j)].sqrt()).collect();
    if d.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Validation("covariance has a zero-variance coordinate".into()));
    }
    let corr = DMatrix::from_fn(p, p, |j, l| cov[(j, l)] / (d[j] * d[l]));
    let chol = corr
        .cholesky()
        .ok_or_else(|| Error::Validation("correlation matrix is not positive definite".into()))?;
    let l = chol.l();
    let chunk = 10_000usize;
    let out: Vec<Vec<f64>> = (0..draws.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let mut rng = keyed_rng(derive_seed(seed, &[c as u64]), 0);
            let rows = chunk.min(draws - c * chunk);
            let mut z = vec![0.0; p];
            let mut g = vec![0.0; p];
            let mut vals = Vec::with_capacity(rows);
            for _ in 0..rows {
                for v in z.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                for j in 0..p {
                    let mut acc = 0.0;
                    for m in 0..=j {
                        acc += l[(j, m)] * z[m];
                    }
                    g[j] = if side == Side::TwoSided { acc.abs() } else { acc };
                }
                g.sort_by(|a, b| b.total_cmp(a));
                vals.push(g[k - 1]);
            }
            vals
        })
        .collect();
    Ok(out.into_iter().flatten().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub distance: f64,
    /// Set when `n` is too small for the approximation to be meaningful; the
    /// distance is then reported without a verdict.
    pub diagnostic: bool,
}

/// Below this sample size the KS comparison is reported only.
pub const KS_MIN_N: usize = 100;

/// Kolmogorov distance between the Monte Carlo law of the studentized k-max
/// statistic and the k-max of a Gaussian vector with the population
/// correlation of `X`.
pub fn ks_distance_studentized_kmax(spec: &DgpSpec, k: usize, side: Side, reps: usize, oracle_draws: usize) -> Result<KsResult> {
    if !spec.effects.is_empty() {
        return Err(Error::Config("KS check needs an all-null design".into()));
    }
    let oracle_seed = derive_seed(spec.seed, &[KEY_ORACLE]);
    let cov = simulate_population_covariance(spec, oracle_draws, oracle_seed)?;
    let mut oracle = gaussian_kmax_sample(&cov, k, side, oracle_draws, derive_seed(oracle_seed, &[1]))?;
    let stats: Vec<Option<f64>> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| -> Result<Option<f64>> {
            let data = simulate_dataset(spec, rep)?;
            let est = estimate_features(&data.x, true)?;
            studentized_kmax(&est, k, side)
        })
        .collect::<Result<_>>()?;
    let skipped = stats.iter().filter(|s| s.is_none()).count();
    if skipped > 0 {
        log::warn!("{skipped} of {reps} replications had an untestable feature and were skipped");
    }
    let mut sample: Vec<f64> = stats.into_iter().flatten().collect();
    if sample.is_empty() {
        return Err(Error::Validation("no replication produced a studentized statistic".into()));
    }
    let diagnostic = spec.n < KS_MIN_N;
    if diagnostic {
        log::info!("n = {} is below {KS_MIN_N}; KS distance is diagnostic only", spec.n);
    }
    Ok(KsResult {
        distance: ks_distance(&mut sample, &mut oracle),
        diagnostic,
    })
}

/// `None` when some feature is untestable in this replication.
fn studentized_kmax(est: &FeatureEstimates, k: usize, side: Side) -> Result<Option<f64>> {
    let Some(t) = est
        .t_stats
        .iter()
        .map(|t| t.map(|t| if side == Side::TwoSided { t.abs() } else { t }))
        .collect::<Option<Vec<f64>>>()
    else {
        return Ok(None);
    };
    crate::bootstrap::k_max(&t, k).map(Some)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub reps: usize,
    /// Replications where the estimate was defined.
    pub defined: usize,
    pub coverage: f64,
    pub mc_standard_error: f64,
}

impl Coverage {
    fn from_counts(reps: usize, defined: usize, covered: usize) -> Self {
        let coverage = if defined == 0 { 0.0 } else { covered as f64 / defined as f64 };
        Self {
            reps,
            defined,
            coverage,
            mc_standard_error: binomial_se(coverage, defined.max(1)),
        }
    }
}

/// Coverage of the A-score interval when agreements are Bernoulli(`q`).
pub fn a_score_coverage(q: f64, m: usize, reps: usize, alpha_ci: f64, method: CiMethod, seed: u64) -> Result<Coverage> {
    let mut covered = 0;
    for rep in 0..reps as u64 {
        let mut rng = keyed_rng(derive_seed(seed, &[rep]), 0);
        let y_true: Vec<u8> = (0..m).map(|_| u8::from(rng.random::<f64>() < q)).collect();
        let table = EvalTable::from_labels(FeatureId(0), &y_true, &vec![1; m])?;
        let s = a_score(&table, alpha_ci, method)?;
        if s.ci_lower.unwrap() <= q && q <= s.ci_upper.unwrap() {
            covered += 1;
        }
    }
    Ok(Coverage::from_counts(reps, reps, covered))
}

/// Coverage of the precision and recall intervals for labels drawn with
/// `P(y_true = 1) = q_t`, `P(y_pred = 1) = q_p`, `P(both) = q_tp`.
pub fn pr_coverage(q_t: f64, q_p: f64, q_tp: f64, m: usize, reps: usize, alpha_ci: f64, method: CiMethod, seed: u64) -> Result<(Coverage, Coverage)> {
    let cells = [q_tp, q_t - q_tp, q_p - q_tp, 1.0 - q_t - q_p + q_tp];
    if cells.iter().any(|&c| c < 0.0) {
        return Err(Error::Config("inconsistent label probabilities".into()));
    }
    let (prec, rec) = (q_tp / q_p, q_tp / q_t);
    let (mut pd, mut pc, mut rd, mut rc) = (0, 0, 0, 0);
    for rep in 0..reps as u64 {
        let mut rng = keyed_rng(derive_seed(seed, &[rep]), 0);
        let (mut t, mut p) = (Vec::with_capacity(m), Vec::with_capacity(m));
        for _ in 0..m {
            let u: f64 = rng.random();
            let (a, b) = if u < cells[0] {
                (1, 1)
            } else if u < cells[0] + cells[1] {
                (1, 0)
            } else if u < cells[0] + cells[1] + cells[2] {
                (0, 1)
            } else {
                (0, 0)
            };
            t.push(a);
            p.push(b);
        }
        let table = EvalTable::from_labels(FeatureId(0), &t, &p)?;
        let ps = p_score(&table, alpha_ci, method)?;
        if !ps.undefined {
            pd += 1;
            pc += usize::from(ps.ci_lower.unwrap() <= prec && prec <= ps.ci_upper.unwrap());
        }
        let rs = r_score(&table, alpha_ci, method)?;
        if !rs.undefined {
            rd += 1;
            rc += usize::from(rs.ci_lower.unwrap() <= rec && rec <= rs.ci_upper.unwrap());
        }
    }
    Ok((Coverage::from_counts(reps, pd, pc), Coverage::from_counts(reps, rd, rc)))
}

/// One entry of a simulation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridEntry {
    pub id: String,
    pub dgp: DgpSpec,
    pub reps: usize,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    pub inference: Vec<InferenceConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub specs: Vec<GridEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub spec_id: String,
    pub result: McResult,
}

pub fn run_grid(grid: &GridConfig) -> Result<Vec<GridRow>> {
    if grid.specs.is_empty() {
        return Err(Error::Config("simulation grid has no specs".into()));
    }
    let mut rows = Vec::new();
    for entry in &grid.specs {
        log::info!("simulating spec `{}` ({} reps)", entry.id, entry.reps);
        let settings = McSettings {
            bootstrap: entry.bootstrap,
            inference: entry.inference.clone(),
            reps: entry.reps,
        };
        for result in estimate_k_fwer(&entry.dgp, &settings)? {
            rows.push(GridRow {
                spec_id: entry.id.clone(),
                result,
            });
        }
    }
    Ok(rows)
}

pub const GRID_HEADER: &str = "spec_id\talpha\tk\tmethod\treps\tempirical_k_fwer\tse\tmean_power\tpower";

pub fn format_grid(rows: &[GridRow]) -> String {
    let mut out = format!("{GRID_HEADER}\n");
    for r in rows {
        let m = &r.result;
        let mean_power = if m.per_effect_power.is_empty() {
            String::new()
        } else {
            format!("{:.4}", m.per_effect_power.iter().sum::<f64>() / m.per_effect_power.len() as f64)
        };
        let power = m.per_effect_power.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(",");
        let method = match m.config.method {
            crate::inference::Method::OneStep => "one_step",
            crate::inference::Method::StepDown => "step_down",
        };
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{}\t{}",
            r.spec_id, m.config.alpha, m.config.k, method, m.reps, m.empirical_k_fwer, m.mc_standard_error, mean_power, power
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::Method;

    #[test]
    fn marginal_rates_match_sparsity() {
        let spec = DgpSpec::null(20_000, 3, 0.1, Correlation::Independent, 4);
        let d = simulate_dataset(&spec, 0).unwrap();
        let se = binomial_se(0.1, 20_000);
        for j in 0..3 {
            let rate = d.y.column(j).len() as f64 / 20_000.0;
            assert!((rate - 0.1).abs() < 4.0 * se, "feature {j}: {rate}");
        }
    }

    #[test]
    fn rho_zero_equals_independent() {
        let a = DgpSpec::null(200, 10, 0.2, Correlation::Independent, 9);
        let b = DgpSpec {
            correlation: Correlation::Equicorrelated { rho: 0.0 },
            ..a.clone()
        };
        let (da, db) = (simulate_dataset(&a, 3).unwrap(), simulate_dataset(&b, 3).unwrap());
        assert_eq!(da.y, db.y);
        assert_eq!(da.w, db.w);
    }

    #[test]
    fn same_seed_same_data() {
        let spec = DgpSpec::null(100, 5, 0.3, Correlation::Block { rho: 0.4, block_size: 2 }, 1);
        let (a, b) = (simulate_dataset(&spec, 7).unwrap(), simulate_dataset(&spec, 7).unwrap());
        assert_eq!(a.y, b.y);
        assert_ne!(a.y, simulate_dataset(&spec, 8).unwrap().y);
    }

    #[test]
    fn equicorrelation_induces_dependence() {
        let spec = DgpSpec::null(20_000, 2, 0.3, Correlation::Equicorrelated { rho: 0.5 }, 2);
        let d = simulate_dataset(&spec, 0).unwrap();
        let both = d.y.column(0).iter().filter(|r| d.y.column(1).binary_search(r).is_ok()).count() as f64 / 20_000.0;
        assert!(both > 0.09 + 0.02, "joint rate {both}");
    }

    #[test]
    fn arm_probabilities_and_infeasible_effects() {
        let mut spec = DgpSpec::null(40_000, 2, 0.3, Correlation::Independent, 5);
        spec.effects = vec![Effect { feature: 0, size: 0.2 }];
        let d = simulate_dataset(&spec, 0).unwrap();
        let est = estimate_features(&d.x, true).unwrap();
        assert!((est.theta_hat[0] - 0.2).abs() < 0.03, "{}", est.theta_hat[0]);
        assert!(est.theta_hat[1].abs() < 0.03);
        spec.effects = vec![Effect { feature: 0, size: 0.7 }];
        assert!(simulate_dataset(&spec, 0).is_err());
        spec.effects = vec![Effect { feature: 0, size: 0.1 }, Effect { feature: 1, size: 0.1 }];
        assert!(simulate_dataset(&spec, 0).is_err());
    }

    #[test]
    fn mean_design_centers_at_sparsity() {
        let mut spec = DgpSpec::null(20_000, 2, 0.2, Correlation::Independent, 6);
        spec.transform = TransformKind::Mean;
        spec.effects = vec![Effect { feature: 1, size: 0.1 }];
        let d = simulate_dataset(&spec, 0).unwrap();
        let est = estimate_features(&d.x, true).unwrap();
        assert!(est.theta_hat[0].abs() < 0.015);
        assert!((est.theta_hat[1] - 0.1).abs() < 0.015);
    }

    #[test]
    fn population_covariance_matches_closed_form() {
        // HT with independent latents: Var X_j = s / (pi (1 - pi)), Cov = s^2 / (pi (1 - pi))
        let spec = DgpSpec::null(10, 2, 0.2, Correlation::Independent, 1);
        let cov = simulate_population_covariance(&spec, 400_000, 3).unwrap();
        assert!((cov[(0, 0)] - 0.8).abs() < 0.02, "{}", cov[(0, 0)]);
        assert!((cov[(0, 1)] - 0.16).abs() < 0.02, "{}", cov[(0, 1)]);
    }

    fn small_settings(k_values: &[usize]) -> McSettings {
        McSettings {
            bootstrap: BootstrapConfig { n_draws: 200, ..Default::default() },
            inference: k_values
                .iter()
                .map(|&k| InferenceConfig { k, method: Method::OneStep, ..Default::default() })
                .collect(),
            reps: 100,
        }
    }

    #[test]
    fn larger_k_selects_weakly_more() {
        let mut spec = DgpSpec::null(120, 30, 0.2, Correlation::Independent, 10);
        spec.effects = vec![Effect { feature: 0, size: 0.25 }, Effect { feature: 1, size: 0.2 }];
        let res = estimate_k_fwer(&spec, &small_settings(&[1, 5])).unwrap();
        for (a, b) in res[0].selected_counts.iter().zip(&res[1].selected_counts) {
            assert!(b >= a);
        }
        for r in &res {
            assert!((0.0..=1.0).contains(&r.empirical_k_fwer));
            assert_eq!(r.mc_standard_error, binomial_se(r.empirical_k_fwer, 100));
        }
    }

    #[test]
    fn strong_effect_is_found() {
        let mut sparsity = vec![0.1; 200];
        sparsity[0] = 0.3;
        let spec = DgpSpec {
            sparsity: Sparsity::PerFeature(sparsity),
            effects: vec![Effect { feature: 0, size: 0.3 }],
            ..DgpSpec::null(500, 200, 0.1, Correlation::Independent, 14)
        };
        let res = estimate_k_fwer(&spec, &small_settings(&[1])).unwrap();
        assert!(res[0].per_effect_power[0] >= 0.95, "{:?}", res[0].per_effect_power);
    }

    #[test]
    fn grid_is_deterministic_and_rejects_empty() {
        let grid = GridConfig {
            specs: vec![GridEntry {
                id: "null".into(),
                dgp: DgpSpec::null(60, 8, 0.2, Correlation::Independent, 2),
                reps: 100,
                bootstrap: BootstrapConfig { n_draws: 100, ..Default::default() },
                inference: vec![InferenceConfig::default()],
            }],
        };
        let a = format_grid(&run_grid(&grid).unwrap());
        assert_eq!(a, format_grid(&run_grid(&grid).unwrap()));
        assert!(a.starts_with(GRID_HEADER));
        assert!(run_grid(&GridConfig { specs: vec![] }).is_err());
        let too_few = McSettings { reps: 99, ..small_settings(&[1]) };
        assert!(estimate_k_fwer(&grid.specs[0].dgp, &too_few).is_err());
    }

    #[test]
    fn ks_small_n_is_diagnostic() {
        let spec = DgpSpec::null(20, 1, 0.3, Correlation::Independent, 3);
        let r = ks_distance_studentized_kmax(&spec, 1, Side::OneSided, 100, 20_000).unwrap();
        assert!(r.diagnostic);
        assert!((0.0..=1.0).contains(&r.distance));
    }

    #[test]
    fn coverage_study_runs() {
        let c = a_score_coverage(0.8, 200, 200, 0.05, CiMethod::Jeffreys, 1).unwrap();
        assert!(c.coverage > 0.85);
        let (p, r) = pr_coverage(0.4, 0.5, 0.3, 200, 200, 0.05, CiMethod::Jeffreys, 2).unwrap();
        assert!(p.coverage > 0.85 && r.coverage > 0.85);
        assert!(pr_coverage(0.2, 0.2, 0.3, 10, 10, 0.05, CiMethod::Wald, 0).is_err());
    }
}
