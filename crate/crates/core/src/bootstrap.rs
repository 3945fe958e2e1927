//! Gaussian multiplier bootstrap of the k-th largest coordinate.
//!
//! Draw `b` is the vector
//!
//! ```text
//! S^B_j = n^{-1/2} sum_i xi_i^(b) (X_ij - mean_j)          (raw)
//! S^B_j = n^{-1/2} sum_i xi_i^(b) (X_ij - mean_j) / sd_j   (studentized)
//! ```
//!
//! with multipliers from [`crate::rng::MultiplierStream`]. Each coordinate is
//! evaluated as `(sum_nz x_ij xi_i - mean_j sum_i xi_i) / sqrt(n) * scale_j`,
//! accumulating over the column's nonzero rows in ascending order, so a
//! coordinate has exactly one floating-point evaluation order whether the draw
//! matrix is kept in memory or regenerated, and whatever the thread count.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::MultiplierStream;
use crate::stats::upper_quantile_rank;
use crate::transform::{FeatureEstimates, FeatureStatus, TransformedMatrix};
use crate::{Error, FeatureId, Result};

/// Draws generated together; one block's multipliers stay cache resident.
const DRAW_BLOCK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    OneSided,
    TwoSided,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retention {
    /// Keep the `B × p` draw matrix.
    InMemory,
    /// Regenerate draws from their seeds for every quantile request.
    Recompute,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub n_draws: usize,
    pub seed: u64,
    pub side: Side,
    pub studentize: bool,
    pub retention: Retention,
    pub memory_budget_bytes: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            n_draws: 1000,
            seed: 0,
            side: Side::TwoSided,
            studentize: true,
            retention: Retention::InMemory,
            memory_budget_bytes: 1 << 30,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_draws < 100 {
            return Err(Error::Config(format!("need at least 100 bootstrap draws, got {}", self.n_draws)));
        }
        if self.memory_budget_bytes == 0 {
            return Err(Error::Config("memory budget must be positive".into()));
        }
        Ok(())
    }
}

/// The k-th largest value of `x`, counting ties with multiplicity.
pub fn k_max(x: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > x.len() {
        return Err(Error::Validation(format!("k = {k} outside 1..={}", x.len())));
    }
    let mut top = TopK::new(k);
    for &v in x {
        top.push(v);
    }
    Ok(top.kth())
}

/// Running k-th largest over a stream of values.
struct TopK {
    k: usize,
    // descending, at most k entries (small k) or all values (large k)
    buf: Vec<f64>,
}

impl TopK {
    const INSERTION_LIMIT: usize = 32;

    fn new(k: usize) -> Self {
        Self {
            k,
            buf: Vec::with_capacity(k.min(Self::INSERTION_LIMIT) + 1),
        }
    }

    fn clear(&mut self) {
        self.buf.clear();
    }

    #[inline]
    fn push(&mut self, v: f64) {
        if self.k > Self::INSERTION_LIMIT {
            self.buf.push(v);
            return;
        }
        if self.buf.len() == self.k {
            if v <= self.buf[self.k - 1] {
                return;
            }
            self.buf.pop();
        }
        let pos = self.buf.partition_point(|&b| b >= v);
        self.buf.insert(pos, v);
    }

    fn kth(&mut self) -> f64 {
        if self.k > Self::INSERTION_LIMIT {
            let idx = self.k - 1;
            let (_, v, _) = self.buf.select_nth_unstable_by(idx, |a, b| b.total_cmp(a));
            *v
        } else {
            self.buf[self.k - 1]
        }
    }
}

/// A feature subset `K` over which a critical value is computed. Indices are
/// feature positions (columns of the transformed matrix).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Subset {
    Full,
    Features(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SubsetDescriptor {
    Full(FullTag),
    Features(Vec<FeatureId>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FullTag {
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalValue {
    pub value: f64,
    pub alpha: f64,
    pub k: usize,
    pub subset: SubsetDescriptor,
}

#[derive(Clone, Debug)]
enum Storage {
    /// Row-major `B × coords` matrix of signed draws.
    InMemory(Vec<f64>),
    Recompute(Arc<TransformedMatrix>),
}

/// Multiplier-bootstrap draws over the testable features of one estimation
/// sample.
#[derive(Clone, Debug)]
pub struct BootstrapRun {
    config: BootstrapConfig,
    n: usize,
    feature_ids: Vec<FeatureId>,
    /// Feature positions that are bootstrap coordinates.
    coords: Vec<usize>,
    coord_of: Vec<Option<usize>>,
    means: Vec<f64>,
    scales: Vec<f64>,
    fingerprint: String,
    storage: Storage,
}

struct Kernel<'a> {
    x: &'a TransformedMatrix,
    coords: &'a [usize],
    means: &'a [f64],
    scales: &'a [f64],
    seed: u64,
    inv_sqrt_n: f64,
}

impl Kernel<'_> {
    /// Writes draws `b0..b0 + count` restricted to coordinate list `which`
    /// into `out` (row-major, `which.len()` columns).
    fn block(&self, b0: usize, count: usize, which: &[usize], out: &mut [f64]) {
        let n = self.x.n();
        let width = which.len();
        debug_assert_eq!(out.len(), count * width);
        let mut xi = vec![0.0; n * count];
        let mut sums = vec![0.0; count];
        let mut tmp = vec![0.0; n];
        for c in 0..count {
            MultiplierStream::new(self.seed, (b0 + c) as u64).fill(&mut tmp);
            let mut s = 0.0;
            for (i, &v) in tmp.iter().enumerate() {
                xi[i * count + c] = v;
                s += v;
            }
            sums[c] = s;
        }
        let mut acc = vec![0.0; count];
        for (q_out, &q) in which.iter().enumerate() {
            let col = self.x.column(self.coords[q]);
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (&r, &v) in col.rows.iter().zip(&col.values) {
                let row = &xi[r as usize * count..(r as usize + 1) * count];
                for (a, &z) in acc.iter_mut().zip(row) {
                    *a += v * z;
                }
            }
            let (mean, scale) = (self.means[q], self.scales[q]);
            for c in 0..count {
                out[c * width + q_out] = (acc[c] - mean * sums[c]) * self.inv_sqrt_n * scale;
            }
        }
    }
}

/// Generates the bootstrap draws for every testable feature of `est`.
///
/// Under [`Retention::InMemory`] the draw matrix is stored when
/// `B * p * 8` bytes fit in the budget; otherwise the run falls back to
/// recomputation with a warning.
pub fn run_bootstrap(x: &TransformedMatrix, est: &FeatureEstimates, cfg: &BootstrapConfig) -> Result<BootstrapRun> {
    cfg.validate()?;
    if est.fingerprint != x.fingerprint() {
        return Err(Error::FingerprintMismatch {
            estimates: est.fingerprint.clone(),
            run: x.fingerprint(),
        });
    }
    if cfg.studentize != est.studentized {
        return Err(Error::Config("bootstrap and estimates disagree on studentization".into()));
    }
    let coords: Vec<usize> = (0..x.p()).filter(|&j| est.status[j] == FeatureStatus::Testable).collect();
    if coords.is_empty() {
        return Err(Error::Validation("no testable features to bootstrap".into()));
    }
    let mut coord_of = vec![None; x.p()];
    for (q, &j) in coords.iter().enumerate() {
        coord_of[j] = Some(q);
    }
    let means: Vec<f64> = coords.iter().map(|&j| est.theta_hat[j]).collect();
    let scales: Vec<f64> = coords
        .iter()
        .map(|&j| if cfg.studentize { 1.0 / est.sigma_hat_diag[j].sqrt() } else { 1.0 })
        .collect();

    let mut run = BootstrapRun {
        config: *cfg,
        n: x.n(),
        feature_ids: x.feature_ids().to_vec(),
        coords,
        coord_of,
        means,
        scales,
        fingerprint: x.fingerprint(),
        storage: Storage::Recompute(Arc::new(x.clone())),
    };

    let bytes = (cfg.n_draws as u128) * (run.coords.len() as u128) * 8;
    match cfg.retention {
        Retention::Recompute => {}
        Retention::InMemory if bytes > u128::from(cfg.memory_budget_bytes) => {
            log::warn!(
                "bootstrap draw matrix needs {bytes} bytes, over the {} byte budget; recomputing draws on demand",
                cfg.memory_budget_bytes
            );
        }
        Retention::InMemory => {
            let draws = run.materialize(x);
            run.storage = Storage::InMemory(draws);
        }
    }
    Ok(run)
}

impl BootstrapRun {
    pub fn config(&self) -> &BootstrapConfig {
        &self.config
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_draws(&self) -> usize {
        self.config.n_draws
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Feature positions carried by the run, in coordinate order.
    pub fn coordinates(&self) -> &[usize] {
        &self.coords
    }

    pub fn is_in_memory(&self) -> bool {
        matches!(self.storage, Storage::InMemory(_))
    }

    fn kernel<'a>(&'a self, x: &'a TransformedMatrix) -> Kernel<'a> {
        Kernel {
            x,
            coords: &self.coords,
            means: &self.means,
            scales: &self.scales,
            seed: self.config.seed,
            inv_sqrt_n: 1.0 / (self.n as f64).sqrt(),
        }
    }

    fn materialize(&self, x: &TransformedMatrix) -> Vec<f64> {
        let width = self.coords.len();
        let all: Vec<usize> = (0..width).collect();
        let kernel = self.kernel(x);
        let mut draws = vec![0.0; self.config.n_draws * width];
        draws
            .par_chunks_mut(DRAW_BLOCK * width)
            .enumerate()
            .for_each(|(blk, out)| {
                let count = out.len() / width;
                kernel.block(blk * DRAW_BLOCK, count, &all, out);
            });
        draws
    }

    /// Signed draw `b` over all coordinates, regenerated from its seed.
    pub fn regenerate_draw(&self, x: &TransformedMatrix, b: usize) -> Vec<f64> {
        let all: Vec<usize> = (0..self.coords.len()).collect();
        let mut out = vec![0.0; all.len()];
        self.kernel(x).block(b, 1, &all, &mut out);
        out
    }

    /// Signed draw `b` as held by the run.
    pub fn draw(&self, b: usize) -> Vec<f64> {
        match &self.storage {
            Storage::InMemory(d) => {
                let w = self.coords.len();
                d[b * w..(b + 1) * w].to_vec()
            }
            Storage::Recompute(x) => self.regenerate_draw(x, b),
        }
    }

    fn resolve(&self, subset: &Subset) -> Result<Vec<usize>> {
        match subset {
            Subset::Full => Ok((0..self.coords.len()).collect()),
            Subset::Features(js) => {
                if js.is_empty() {
                    return Err(Error::Validation("critical value over an empty subset".into()));
                }
                js.iter()
                    .map(|&j| {
                        self.coord_of.get(j).copied().flatten().ok_or_else(|| {
                            Error::Validation(format!("feature position {j} is not a bootstrap coordinate"))
                        })
                    })
                    .collect()
            }
        }
    }

    /// Per-draw k-th largest coordinate over `subset` (absolute values when
    /// two-sided), in draw order.
    pub fn kmax_statistics(&self, subset: &Subset, k: usize) -> Result<Vec<f64>> {
        let which = self.resolve(subset)?;
        if k == 0 || k > which.len() {
            return Err(Error::Validation(format!("k = {k} outside 1..={} for this subset", which.len())));
        }
        let two_sided = self.config.side == Side::TwoSided;
        let fold = |v: f64| if two_sided { v.abs() } else { v };
        let b_total = self.config.n_draws;
        let mut stats = vec![0.0; b_total];
        match &self.storage {
            Storage::InMemory(d) => {
                let w = self.coords.len();
                stats.par_chunks_mut(DRAW_BLOCK).enumerate().for_each(|(blk, out)| {
                    let mut top = TopK::new(k);
                    for (c, s) in out.iter_mut().enumerate() {
                        let b = blk * DRAW_BLOCK + c;
                        let row = &d[b * w..(b + 1) * w];
                        top.clear();
                        for &q in &which {
                            top.push(fold(row[q]));
                        }
                        *s = top.kth();
                    }
                });
            }
            Storage::Recompute(x) => {
                let kernel = self.kernel(x);
                let width = which.len();
                stats.par_chunks_mut(DRAW_BLOCK).enumerate().for_each(|(blk, out)| {
                    let count = out.len();
                    let mut buf = vec![0.0; count * width];
                    kernel.block(blk * DRAW_BLOCK, count, &which, &mut buf);
                    let mut top = TopK::new(k);
                    for (c, s) in out.iter_mut().enumerate() {
                        top.clear();
                        for &v in &buf[c * width..(c + 1) * width] {
                            top.push(fold(v));
                        }
                        *s = top.kth();
                    }
                });
            }
        }
        Ok(stats)
    }

    fn descriptor(&self, subset: &Subset) -> SubsetDescriptor {
        match subset {
            Subset::Full => SubsetDescriptor::Full(FullTag::Full),
            Subset::Features(js) => {
                let mut ids: Vec<FeatureId> = js.iter().map(|&j| self.feature_ids[j]).collect();
                ids.sort_unstable();
                SubsetDescriptor::Features(ids)
            }
        }
    }

    /// Writes the `BOOT v1` cache: a text header line followed by the
    /// row-major little-endian draw matrix.
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let width = self.coords.len();
        let io = |e| Error::io(path, e);
        writeln!(
            w,
            "BOOT v1 B={} p={} seed={} hash={}",
            self.config.n_draws, width, self.config.seed, self.fingerprint
        )
        .map_err(io)?;
        for b in 0..self.config.n_draws {
            for v in self.draw(b) {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    /// Loads a cache written for the same data and configuration. Draw 0 is
    /// regenerated and must match the cached copy bit for bit.
    pub fn load_cache(path: &Path, x: &TransformedMatrix, est: &FeatureEstimates, cfg: &BootstrapConfig) -> Result<Self> {
        let recompute = BootstrapConfig {
            retention: Retention::Recompute,
            ..*cfg
        };
        let mut run = run_bootstrap(x, est, &recompute)?;
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let name = path.display().to_string();
        let mut header = Vec::new();
        loop {
            let mut byte = [0u8; 1];
            r.read_exact(&mut byte).map_err(|e| Error::io(path, e))?;
            if byte[0] == b'\n' {
                break;
            }
            header.push(byte[0]);
            if header.len() > 512 {
                return Err(Error::parse(&name, 1, "cache header too long"));
            }
        }
        let header = String::from_utf8(header).map_err(|_| Error::parse(&name, 1, "cache header is not UTF-8"))?;
        let expected = format!(
            "BOOT v1 B={} p={} seed={} hash={}",
            cfg.n_draws,
            run.coords.len(),
            cfg.seed,
            run.fingerprint
        );
        if header != expected {
            return Err(Error::parse(&name, 1, format!("cache header `{header}` does not match `{expected}`")));
        }
        let len = cfg.n_draws * run.coords.len();
        let mut bytes = vec![0u8; len * 8];
        r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::parse(&name, 1, "trailing bytes after draw matrix"));
        }
        let draws: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let fresh = run.regenerate_draw(x, 0);
        if fresh
            .iter()
            .zip(&draws[..run.coords.len()])
            .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(Error::Validation("cached draws were generated under a different configuration".into()));
        }
        run.config = *cfg;
        run.storage = Storage::InMemory(draws);
        Ok(run)
    }
}

/// Picks the conservative upper `1 - alpha` order statistic
/// (`ceil(B (1 - alpha))`-th smallest) of `stats`. Sorts in place.
pub fn upper_quantile(stats: &mut [f64], alpha: f64) -> f64 {
    stats.sort_by(f64::total_cmp);
    stats[upper_quantile_rank(stats.len(), alpha) - 1]
}

/// The bootstrap critical value `c_K(1 - alpha, k)`.
pub fn critical_value(run: &BootstrapRun, subset: &Subset, alpha: f64, k: usize) -> Result<CriticalValue> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let mut stats = run.kmax_statistics(subset, k)?;
    Ok(CriticalValue {
        value: upper_quantile(&mut stats, alpha),
        alpha,
        k,
        subset: run.descriptor(subset),
    })
}
