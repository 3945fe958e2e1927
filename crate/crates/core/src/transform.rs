//! Hypothesis transforms `X_ij = h(W_i, Y_ij)` and per-feature estimates.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::FeatureMatrix;
use crate::{Error, FeatureId, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    /// `X = Y`; tests the activation probability of each feature.
    Mean,
    /// Horvitz–Thompson difference in means, `X = (W - pi) / (pi (1 - pi)) * Y`.
    HtDiffInMeans,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PiSource {
    Fixed,
    /// Sample mean of `W` over the estimation rows.
    Estimated,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub pi: f64,
    pub pi_source: PiSource,
}

impl TransformSpec {
    pub fn mean() -> Self {
        Self {
            kind: TransformKind::Mean,
            pi: 0.5,
            pi_source: PiSource::Fixed,
        }
    }

    pub fn ht(pi: f64) -> Self {
        Self {
            kind: TransformKind::HtDiffInMeans,
            pi,
            pi_source: PiSource::Fixed,
        }
    }
}

/// Sparse column of a transformed matrix; rows absent from `rows` are zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseColumn {
    pub rows: Vec<u32>,
    pub values: Vec<f64>,
}

/// Real `n × p` matrix `X`, stored by column.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformedMatrix {
    n: usize,
    feature_ids: Vec<FeatureId>,
    columns: Vec<SparseColumn>,
}

impl TransformedMatrix {
    pub fn new(n: usize, feature_ids: Vec<FeatureId>, columns: Vec<SparseColumn>) -> Result<Self> {
        if feature_ids.len() != columns.len() {
            return Err(Error::Validation("feature id / column count mismatch".into()));
        }
        for c in &columns {
            if c.rows.len() != c.values.len()
                || c.rows.windows(2).any(|w| w[0] >= w[1])
                || c.rows.last().is_some_and(|&r| r as usize >= n)
            {
                return Err(Error::Validation("malformed sparse column".into()));
            }
            if c.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation("transformed values must be finite".into()));
            }
        }
        Ok(Self {
            n,
            feature_ids,
            columns,
        })
    }

    /// Builds from a dense column-major slice of length `n * p`.
    pub fn from_dense_columns(n: usize, feature_ids: Vec<FeatureId>, data: &[f64]) -> Result<Self> {
        let p = feature_ids.len();
        if data.len() != n * p {
            return Err(Error::Validation(format!("expected {} values, got {}", n * p, data.len())));
        }
        let columns = data
            .chunks(n.max(1))
            .take(p)
            .map(|col| {
                let mut c = SparseColumn::default();
                for (i, &v) in col.iter().enumerate() {
                    if v != 0.0 {
                        c.rows.push(i as u32);
                        c.values.push(v);
                    }
                }
                c
            })
            .collect();
        Self::new(n, feature_ids, columns)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.feature_ids.len()
    }

    pub fn feature_ids(&self) -> &[FeatureId] {
        &self.feature_ids
    }

    pub fn column(&self, j: usize) -> &SparseColumn {
        &self.columns[j]
    }

    pub fn columns(&self) -> &[SparseColumn] {
        &self.columns
    }

    pub fn dense_column(&self, j: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        let c = &self.columns[j];
        for (&r, &v) in c.rows.iter().zip(&c.values) {
            out[r as usize] = v;
        }
        out
    }

    /// SHA-256 over dimensions, feature ids and every stored entry.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n as u64).to_le_bytes());
        h.update((self.p() as u64).to_le_bytes());
        for (fid, c) in self.feature_ids.iter().zip(&self.columns) {
            h.update(fid.0.to_le_bytes());
            h.update((c.rows.len() as u64).to_le_bytes());
            for (&r, &v) in c.rows.iter().zip(&c.values) {
                h.update(r.to_le_bytes());
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Builds `X` over the rows in `scope` (renumbered `0..scope.len()`).
///
/// `w` holds one covariate per matrix row and is required for the
/// Horvitz–Thompson kind, where it must be binary.
pub fn apply_transform(
    matrix: &FeatureMatrix,
    w: Option<&[f64]>,
    spec: &TransformSpec,
    scope: &[usize],
) -> Result<TransformedMatrix> {
    if scope.is_empty() {
        return Err(Error::Validation("transform scope is empty".into()));
    }
    let n_all = matrix.n_docs();
    let mut local = vec![u32::MAX; n_all];
    for (new, &old) in scope.iter().enumerate() {
        if old >= n_all || local[old] != u32::MAX {
            return Err(Error::Validation(format!("invalid or repeated scope row {old}")));
        }
        local[old] = new as u32;
    }

    let weights: Option<Vec<f64>> = match spec.kind {
        TransformKind::Mean => None,
        TransformKind::HtDiffInMeans => {
            let w = w.ok_or_else(|| Error::Validation("HT transform needs covariate w".into()))?;
            if w.len() != n_all {
                return Err(Error::Validation(format!(
                    "{} covariates for {} documents",
                    w.len(),
                    n_all
                )));
            }
            if let Some(bad) = scope.iter().map(|&i| w[i]).find(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Validation(format!("HT transform needs binary w, found {bad}")));
            }
            let pi = match spec.pi_source {
                PiSource::Fixed => spec.pi,
                PiSource::Estimated => {
                    let treated = scope.iter().filter(|&&i| w[i] == 1.0).count();
                    if treated == 0 || treated == scope.len() {
                        return Err(Error::Validation(
                            "cannot estimate pi: w is constant on the estimation rows".into(),
                        ));
                    }
                    let pi = treated as f64 / scope.len() as f64;
                    log::warn!("using estimated treatment probability pi = {pi:.4}");
                    pi
                }
            };
            if !(pi > 0.0 && pi < 1.0) {
                return Err(Error::Config(format!("pi must lie in (0, 1), got {pi}")));
            }
            let denom = pi * (1.0 - pi);
            Some(w.iter().map(|&wi| (wi - pi) / denom).collect())
        }
    };

    let columns = matrix
        .columns()
        .iter()
        .map(|col| {
            let mut c = SparseColumn::default();
            for &r in col {
                let new = local[r as usize];
                if new == u32::MAX {
                    continue;
                }
                let v = weights.as_ref().map_or(1.0, |wt| wt[r as usize]);
                if v != 0.0 {
                    c.rows.push(new);
                    c.values.push(v);
                }
            }
            // scope order may differ from matrix order
            if c.rows.windows(2).any(|w| w[0] > w[1]) {
                let mut pairs: Vec<(u32, f64)> = c.rows.iter().copied().zip(c.values.iter().copied()).collect();
                pairs.sort_unstable_by_key(|p| p.0);
                (c.rows, c.values) = pairs.into_iter().unzip();
            }
            c
        })
        .collect();
    TransformedMatrix::new(scope.len(), matrix.feature_ids().to_vec(), columns)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureStatus {
    Testable,
    /// Zero estimated variance under studentization.
    Untestable,
}

/// Per-feature means, `1/n` variances and t-statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEstimates {
    pub n: usize,
    pub feature_ids: Vec<FeatureId>,
    pub theta_hat: Vec<f64>,
    pub sigma_hat_diag: Vec<f64>,
    /// `None` for untestable features.
    pub t_stats: Vec<Option<f64>>,
    pub status: Vec<FeatureStatus>,
    pub studentized: bool,
    pub fingerprint: String,
}

impl FeatureEstimates {
    pub fn p(&self) -> usize {
        self.feature_ids.len()
    }

    pub fn testable(&self) -> Vec<usize> {
        (0..self.p()).filter(|&j| self.status[j] == FeatureStatus::Testable).collect()
    }
}

/// Column mean and `1/n` variance of a sparse column.
pub fn column_moments(c: &SparseColumn, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean = c.values.iter().sum::<f64>() / nf;
    let ss: f64 = c.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        + (n - c.values.len()) as f64 * mean * mean;
    (mean, ss / nf)
}

/// `theta_hat[j]` is the column mean, `sigma_hat_diag[j]` the mean squared
/// deviation (divisor `n`), and the t-statistic is `sqrt(n) theta_hat` divided
/// by `sqrt(sigma_hat_diag)` when studentizing.
///
/// A studentized feature whose variance is zero relative to its scale is
/// flagged untestable rather than dropped.
pub fn estimate_features(x: &TransformedMatrix, studentize: bool) -> Result<FeatureEstimates> {
    let n = x.n();
    if n < 2 {
        return Err(Error::Validation(format!("need at least 2 rows, got {n}")));
    }
    let sqrt_n = (n as f64).sqrt();
    let p = x.p();
    let mut theta_hat = Vec::with_capacity(p);
    let mut sigma = Vec::with_capacity(p);
    let mut t_stats = Vec::with_capacity(p);
    let mut status = Vec::with_capacity(p);
    for c in x.columns() {
        let (mean, var) = column_moments(c, n);
        let scale = c.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // relative floor absorbs rounding in the mean of a constant column
        let degenerate = var <= (1e-12 * scale).powi(2);
        theta_hat.push(mean);
        sigma.push(var);
        if studentize && degenerate {
            t_stats.push(None);
            status.push(FeatureStatus::Untestable);
        } else if studentize {
            t_stats.push(Some(sqrt_n * mean / var.sqrt()));
            status.push(FeatureStatus::Testable);
        } else {
            t_stats.push(Some(sqrt_n * mean));
            status.push(FeatureStatus::Testable);
        }
    }
    Ok(FeatureEstimates {
        n,
        feature_ids: x.feature_ids().to_vec(),
        theta_hat,
        sigma_hat_diag: sigma,
        t_stats,
        status,
        studentized: studentize,
        fingerprint: x.fingerprint(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Provenance;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn single_column(rows: &[u32], n: usize) -> FeatureMatrix {
        FeatureMatrix::from_columns(
            (0..n).map(|i| i.to_string()).collect(),
            vec![FeatureId(0)],
            vec![rows.to_vec()],
            Provenance::Synthetic,
        )
        .unwrap()
    }

    #[test]
    fn ht_values() {
        let m = single_column(&[0, 1], 3);
        let w = [1.0, 0.0, 1.0];
        let x = apply_transform(&m, Some(&w), &TransformSpec::ht(0.5), &[0, 1, 2]).unwrap();
        assert_eq!(x.dense_column(0), vec![2.0, -2.0, 0.0]);
    }

    #[test]
    fn ht_rejects_nonbinary_and_degenerate_estimated_pi() {
        let m = single_column(&[0], 2);
        assert!(matches!(
            apply_transform(&m, Some(&[0.5, 1.0]), &TransformSpec::ht(0.5), &[0, 1]),
            Err(Error::Validation(_))
        ));
        let spec = TransformSpec {
            pi_source: PiSource::Estimated,
            ..TransformSpec::ht(0.5)
        };
        assert!(apply_transform(&m, Some(&[1.0, 1.0]), &spec, &[0, 1]).is_err());
        let x = apply_transform(&m, Some(&[1.0, 0.0]), &spec, &[0, 1]).unwrap();
        assert_eq!(x.dense_column(0), vec![2.0, 0.0]);
    }

    #[test]
    fn scope_restricts_rows() {
        let m = single_column(&[1, 3], 4);
        let x = apply_transform(&m, None, &TransformSpec::mean(), &[3, 0]).unwrap();
        assert_eq!(x.n(), 2);
        assert_eq!(x.dense_column(0), vec![1.0, 0.0]);
    }

    #[test]
    fn estimate_example() {
        let m = single_column(&[0, 1], 4);
        let x = apply_transform(&m, None, &TransformSpec::mean(), &[0, 1, 2, 3]).unwrap();
        let e = estimate_features(&x, true).unwrap();
        assert_eq!(e.theta_hat[0], 0.5);
        assert_eq!(e.sigma_hat_diag[0], 0.25);
        assert_eq!(e.t_stats[0], Some(2.0));
    }

    #[test]
    fn zero_and_constant_columns_are_untestable() {
        let x = TransformedMatrix::from_dense_columns(
            3,
            vec![FeatureId(0), FeatureId(1), FeatureId(2)],
            &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 3.333_333_333_333_333_5, 3.333_333_333_333_333_5, 3.333_333_333_333_333_5],
        )
        .unwrap();
        let e = estimate_features(&x, true).unwrap();
        assert_eq!(e.status, vec![FeatureStatus::Untestable; 3]);
        assert!(e.testable().is_empty());
        let raw = estimate_features(&x, false).unwrap();
        assert_eq!(raw.t_stats[1], Some(3f64.sqrt()));
    }

    #[test]
    fn column_means_match_dense_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (n, p) = (200, 50);
        let data: Vec<f64> = (0..n * p)
            .map(|_| if rng.random::<f64>() < 0.2 { rng.random_range(-3.0..3.0) } else { 0.0 })
            .collect();
        let x = TransformedMatrix::from_dense_columns(n, (0..p as u32).map(FeatureId).collect(), &data).unwrap();
        let e = estimate_features(&x, true).unwrap();
        for j in 0..p {
            let col = &data[j * n..(j + 1) * n];
            let mut s = 0.0;
            for v in col {
                s += v;
            }
            let mean = s / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!((e.theta_hat[j] - mean).abs() < 1e-12);
            assert!((e.sigma_hat_diag[j] - var).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn scale_and_sign(vals in proptest::collection::vec(-4.0f64..4.0, 5..40), c in 0.1f64..10.0) {
            let n = vals.len();
            prop_assume!(vals.iter().any(|&v| (v - vals[0]).abs() > 1e-3));
            let ids = vec![FeatureId(0), FeatureId(1), FeatureId(2)];
            let mut data = vals.clone();
            data.extend(vals.iter().map(|v| v * c));
            data.extend(vals.iter().map(|v| -v));
            let x = TransformedMatrix::from_dense_columns(n, ids, &data).unwrap();
            let e = estimate_features(&x, true).unwrap();
            let t = e.t_stats[0].unwrap();
            prop_assert!((e.theta_hat[1] - c * e.theta_hat[0]).abs() <= 1e-9 * (1.0 + e.theta_hat[0].abs() * c));
            prop_assert!((e.sigma_hat_diag[1].sqrt() - c * e.sigma_hat_diag[0].sqrt()).abs() <= 1e-9 * c * (1.0 + e.sigma_hat_diag[0].sqrt()));
            prop_assert!((e.t_stats[1].unwrap() - t).abs() <= 1e-9 * (1.0 + t.abs()));
            prop_assert_eq!(e.t_stats[2].unwrap(), -t);
        }
    }
}
