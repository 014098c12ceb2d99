//! Working covariance matrices `R_i` for the estimating equations.
//!
//! A [`WorkingCorrelationSpec`] is what the user asks for; parameters it
//! leaves open (an `alpha`, or the pooled residual covariance) are filled in
//! from working-independence residuals by [`WorkingCorrelationSpec::resolve`],
//! giving a concrete [`WorkingCovariance`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::{Cluster, ClusteredDataset};
use crate::error::{Error, Result};

/// Largest condition number accepted by [`invert_r`].
pub const MAX_CONDITION: f64 = 1e12;
const ALPHA_CAP: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub enum WorkingCorrelationSpec {
    Identity,
    /// Common off-diagonal correlation; `None` estimates it by moments.
    Exchangeable(Option<f64>),
    /// Correlation `alpha^|t_j - t_k|`; `None` estimates it by moments.
    TimePower(Option<f64>),
    /// Positional average of residual outer products.
    PooledResidual,
    /// One matrix per cluster, in dataset order.
    Fixed(Vec<DMatrix<f64>>),
}

impl WorkingCorrelationSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Exchangeable(_) => "exchangeable",
            Self::TimePower(_) => "time_power",
            Self::PooledResidual => "pooled",
            Self::Fixed(_) => "fixed",
        }
    }

    /// Whether resolving needs working-independence residuals.
    pub fn needs_residuals(&self) -> bool {
        matches!(
            self,
            Self::Exchangeable(None) | Self::TimePower(None) | Self::PooledResidual
        )
    }

    pub fn with_alpha(self, alpha: Option<f64>) -> Self {
        match self {
            Self::Exchangeable(_) => Self::Exchangeable(alpha),
            Self::TimePower(_) => Self::TimePower(alpha),
            other => other,
        }
    }

    pub fn resolve(&self, ds: &ClusteredDataset, residuals: Option<&ResidualSet>) -> Result<WorkingCovariance> {
        let need = || {
            residuals.ok_or_else(|| Error::Estimation(format!("`{}` correlation needs residuals", self.name())))
        };
        let m_max = ds.max_cluster_size();
        let cov = match self {
            Self::Identity => WorkingCovariance::Identity,
            Self::Exchangeable(Some(a)) => WorkingCovariance::Exchangeable(*a),
            Self::Exchangeable(None) => WorkingCovariance::Exchangeable(estimate_alpha_exchangeable(need()?, m_max)?),
            Self::TimePower(Some(a)) => WorkingCovariance::TimePower(*a),
            Self::TimePower(None) => {
                let times: Vec<Vec<f64>> = ds.clusters().iter().map(Cluster::times_or_positions).collect();
                WorkingCovariance::TimePower(estimate_alpha_moments(need()?, &times)?)
            }
            Self::PooledResidual => WorkingCovariance::Pooled(repair_pd(estimate_pooled_sigma(need()?)?)),
            Self::Fixed(ms) => WorkingCovariance::Fixed(ms.clone()),
        };
        cov.check(ds)?;
        Ok(cov)
    }
}

impl FromStr for WorkingCorrelationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" | "independence" => Ok(Self::Identity),
            "exchangeable" => Ok(Self::Exchangeable(None)),
            "time_power" | "ar1" => Ok(Self::TimePower(None)),
            "pooled" | "pooled_residual" => Ok(Self::PooledResidual),
            other => Err(Error::Config(format!(
                "unknown correlation `{other}` (expected identity|exchangeable|time_power|pooled)"
            ))),
        }
    }
}

impl fmt::Display for WorkingCorrelationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A fully specified working covariance.
#[derive(Debug, Clone, PartialEq)]
pub enum WorkingCovariance {
    Identity,
    Exchangeable(f64),
    TimePower(f64),
    Pooled(DMatrix<f64>),
    Fixed(Vec<DMatrix<f64>>),
}

impl WorkingCovariance {
    fn check(&self, ds: &ClusteredDataset) -> Result<()> {
        let m_max = ds.max_cluster_size();
        match self {
            Self::Exchangeable(a) => {
                let lo = if m_max > 1 { -1.0 / (m_max as f64 - 1.0) } else { f64::NEG_INFINITY };
                if !(*a > lo && *a < 1.0) {
                    return Err(Error::Config(format!("exchangeable alpha {a} outside ({lo}, 1)")));
                }
            }
            Self::TimePower(a) => {
                if !(*a >= 0.0 && *a < 1.0) {
                    return Err(Error::Config(format!("time-power alpha {a} outside [0, 1)")));
                }
            }
            Self::Pooled(s) => {
                if s.nrows() < m_max {
                    return Err(Error::Config(format!("pooled matrix is {0}x{0}, clusters reach {m_max}", s.nrows())));
                }
            }
            Self::Fixed(ms) => {
                if ms.len() != ds.n() {
                    return Err(Error::Config(format!("{} fixed matrices for {} clusters", ms.len(), ds.n())));
                }
                for (m, c) in ms.iter().zip(ds.clusters()) {
                    if m.nrows() != c.size() || m.ncols() != c.size() {
                        return Err(Error::Config(format!("fixed matrix for cluster `{}` has wrong size", c.id)));
                    }
                    if (m - m.transpose()).abs().max() > 0.0 {
                        return Err(Error::Config(format!("fixed matrix for cluster `{}` is not symmetric", c.id)));
                    }
                }
            }
            Self::Identity => {}
        }
        Ok(())
    }

    /// Inverse working covariance of every cluster, in dataset order.
    pub fn inverses(&self, ds: &ClusteredDataset) -> Result<Vec<DMatrix<f64>>> {
        ds.clusters()
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let r = build_r(self, i, c)?;
                invert_r(&r).map_err(|e| Error::Conditioning(format!("cluster `{}`: {e}", c.id)))
            })
            .collect()
    }
}

/// `R_i` for cluster `i`.
pub fn build_r(cov: &WorkingCovariance, i: usize, cluster: &Cluster) -> Result<DMatrix<f64>> {
    let m = cluster.size();
    let r = match cov {
        WorkingCovariance::Identity => DMatrix::identity(m, m),
        WorkingCovariance::Exchangeable(a) => DMatrix::from_fn(m, m, |j, k| if j == k { 1.0 } else { *a }),
        WorkingCovariance::TimePower(a) => {
            let t = cluster.times_or_positions();
            DMatrix::from_fn(m, m, |j, k| if j == k { 1.0 } else { a.powf((t[j] - t[k]).abs()) })
        }
        WorkingCovariance::Pooled(s) => s.view((0, 0), (m, m)).into_owned(),
        WorkingCovariance::Fixed(ms) => ms
            .get(i)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no fixed matrix for cluster `{}`", cluster.id)))?,
    };
    let min_eig = SymmetricEigen::new(r.clone()).eigenvalues.min();
    if !(min_eig > 0.0) {
        return Err(Error::Conditioning(format!(
            "working covariance of cluster `{}` is not positive definite (min eigenvalue {min_eig})",
            cluster.id
        )));
    }
    Ok(r)
}

/// Inverse of a small symmetric positive-definite matrix.
pub fn invert_r(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !r.is_square() {
        return Err(Error::Conditioning("matrix is not square".into()));
    }
    let eig = SymmetricEigen::new(r.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(Error::Conditioning(format!("eigenvalues in [{lo:e}, {hi:e}]")));
    }
    let chol = r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Conditioning("Cholesky factorization failed".into()))?;
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Per-cluster residual vectors from a working-independence fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet {
    residuals: Vec<DVector<f64>>,
}

impl ResidualSet {
    pub fn new(residuals: Vec<DVector<f64>>) -> Result<Self> {
        if residuals.is_empty() {
            return Err(Error::Estimation("empty residual set".into()));
        }
        if residuals.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::Estimation("non-finite residual".into()));
        }
        Ok(Self { residuals })
    }

    pub fn residuals(&self) -> &[DVector<f64>] {
        &self.residuals
    }

    fn max_len(&self) -> usize {
        self.residuals.iter().map(|r| r.len()).max().unwrap_or(0)
    }
}

/// Positional pooled covariance: entry `(a, b)` averages `e_a e_b` over
/// clusters long enough to have both positions.
pub fn estimate_pooled_sigma(res: &ResidualSet) -> Result<DMatrix<f64>> {
    let m = res.max_len();
    let mut sum = DMatrix::<f64>::zeros(m, m);
    let mut count = DMatrix::<f64>::zeros(m, m);
    for e in res.residuals() {
        let k = e.len();
        for a in 0..k {
            for b in 0..k {
                sum[(a, b)] += e[a] * e[b];
                count[(a, b)] += 1.0;
            }
        }
    }
    if count.iter().any(|&c| c == 0.0) {
        return Err(Error::Estimation("pooled covariance entry with no contributing cluster".into()));
    }
    Ok(sum.component_div(&count))
}

/// Shifts the spectrum so the smallest eigenvalue is at least `1e-8`.
fn repair_pd(s: DMatrix<f64>) -> DMatrix<f64> {
    let lo = SymmetricEigen::new(s.clone()).eigenvalues.min();
    if lo > 0.0 {
        s
    } else {
        let n = s.nrows();
        s + DMatrix::identity(n, n) * (1e-8 - lo)
    }
}

/// Residuals divided by their per-position root mean square.
fn standardized(res: &ResidualSet) -> Vec<Vec<f64>> {
    let m = res.max_len();
    let mut ss = vec![0.0; m];
    let mut cnt = vec![0.0; m];
    for e in res.residuals() {
        for (a, v) in e.iter().enumerate() {
            ss[a] += v * v;
            cnt[a] += 1.0;
        }
    }
    let sd: Vec<f64> = ss.iter().zip(&cnt).map(|(s, c)| (s / c).sqrt()).collect();
    res.residuals()
        .iter()
        .map(|e| e.iter().enumerate().map(|(a, v)| if sd[a] > 0.0 { v / sd[a] } else { 0.0 }).collect())
        .collect()
}

/// Moment estimate of the time-power parameter.
///
/// Standardized products are averaged per lag to give `rho(d)`; then
/// `log alpha = sum_pairs log|rho(d)| / sum_pairs d`, clipped to `[0, 0.99]`.
pub fn estimate_alpha_moments(res: &ResidualSet, times: &[Vec<f64>]) -> Result<f64> {
    if times.len() != res.residuals().len() {
        return Err(Error::Estimation("times and residuals disagree on cluster count".into()));
    }
    let z = standardized(res);
    // lag (quantized to 1e-9) -> (sum of products, pair count, lag)
    let mut lags: BTreeMap<i64, (f64, f64, f64)> = BTreeMap::new();
    for (zi, ti) in z.iter().zip(times) {
        if ti.len() != zi.len() {
            return Err(Error::Estimation("times and residuals disagree on cluster size".into()));
        }
        for a in 0..zi.len() {
            for b in a + 1..zi.len() {
                let d = (ti[a] - ti[b]).abs();
                if d == 0.0 {
                    continue;
                }
                let e = lags.entry((d * 1e9).round() as i64).or_insert((0.0, 0.0, d));
                e.0 += zi[a] * zi[b];
                e.1 += 1.0;
            }
        }
    }
    if lags.is_empty() {
        return Err(Error::Estimation("no within-cluster pairs to estimate alpha".into()));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (sum, cnt, d) in lags.values() {
        let rho = (sum / cnt).abs().max(f64::MIN_POSITIVE);
        num += cnt * rho.ln();
        den += cnt * d;
    }
    Ok((num / den).exp().clamp(0.0, ALPHA_CAP))
}

/// Moment estimate of the exchangeable correlation: mean standardized
/// product over all within-cluster pairs.
pub fn estimate_alpha_exchangeable(res: &ResidualSet, m_max: usize) -> Result<f64> {
    let z = standardized(res);
    let (mut sum, mut cnt) = (0.0, 0.0);
    for zi in &z {
        for a in 0..zi.len() {
            for b in a + 1..zi.len() {
                sum += zi[a] * zi[b];
                cnt += 1.0;
            }
        }
    }
    if cnt == 0.0 {
        return Err(Error::Estimation("no within-cluster pairs to estimate alpha".into()));
    }
    let lo = -1.0 / (m_max.max(2) as f64 - 1.0) + 1e-6;
    Ok((sum / cnt).clamp(lo, ALPHA_CAP))
}
