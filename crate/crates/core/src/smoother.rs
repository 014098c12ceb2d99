//! Local-linear kernel smoothing along a single index.
//!
//! For a fixed index vector the smoother estimates the link `g(t)`, its
//! derivative `g'(t)` and the conditional covariate mean `E[X | X^T beta = t]`
//! with the Epanechnikov kernel. All three share the weights
//!
//! ```text
//! U_k  = K_h(d_k) (S2 - d_k S1)        W_k  = U_k  / sum U
//! U~_k = K_h(d_k) (d_k S0 - S1)        W~_k = U~_k / sum U
//! S_l  = (1/N) sum_k d_k^l K_h(d_k),   d_k = X_k^T beta - t
//! ```
//!
//! Because the kernel has compact support, only observations whose index is
//! within `h` of `t` are visited; the fitted object keeps the index values
//! sorted so that window lookup is a pair of binary searches.

use crate::data::ClusteredDataset;
use crate::error::{Error, Result};

/// Epanechnikov kernel `3/4 (1 - u^2)` on `|u| <= 1`.
#[inline]
pub fn kernel_eval(u: f64) -> f64 {
    if u.abs() <= 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

/// Scaled kernel `K(u / h) / h`.
#[inline]
fn kernel_h(d: f64, h: f64) -> f64 {
    kernel_eval(d / h) / h
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmootherConfig {
    pub h: f64,
    /// When the shared weight denominator falls below `ridge_eps * N` in
    /// magnitude, that amount is added to it through a ridge on the local
    /// slope (so an isolated point gets a local-constant fit).
    pub ridge_eps: f64,
}

impl SmootherConfig {
    pub fn new(h: f64) -> Result<Self> {
        Self::with_ridge(h, 1e-10)
    }

    pub fn with_ridge(h: f64, ridge_eps: f64) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::Config(format!("bandwidth must be positive, got {h}")));
        }
        if !(ridge_eps >= 0.0) {
            return Err(Error::Config(format!("ridge must be non-negative, got {ridge_eps}")));
        }
        Ok(Self { h, ridge_eps })
    }

    /// Shift added to `s2` when the local-linear system is (near) singular:
    /// zero if `|denom| >= ridge_eps * N`, otherwise the amount that raises the
    /// shared denominator by `ridge_eps * N`. With the shift the estimate
    /// degrades toward a local constant instead of toward zero.
    #[inline]
    fn slope_ridge(&self, denom: f64, a0: f64, n: f64) -> f64 {
        let ridge = self.ridge_eps * n;
        if denom.abs() >= ridge || ridge == 0.0 {
            0.0
        } else {
            ridge / a0
        }
    }
}

/// Index values of a dataset under one `beta`, sorted for window lookup.
#[derive(Debug, Clone)]
pub struct SmootherFit<'a> {
    ds: &'a ClusteredDataset,
    beta: Vec<f64>,
    index: Vec<f64>,
    order: Vec<usize>,
    sorted: Vec<f64>,
}

impl<'a> SmootherFit<'a> {
    pub fn new(ds: &'a ClusteredDataset, beta: &[f64]) -> Result<Self> {
        if beta.len() != ds.p() {
            return Err(Error::Domain(format!("beta has length {}, expected {}", beta.len(), ds.p())));
        }
        let index = ds.index_values(beta);
        if index.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite index value".into()));
        }
        let mut order: Vec<usize> = (0..index.len()).collect();
        order.sort_by(|&a, &b| index[a].total_cmp(&index[b]).then(a.cmp(&b)));
        let sorted = order.iter().map(|&k| index[k]).collect();
        Ok(Self {
            ds,
            beta: beta.to_vec(),
            index,
            order,
            sorted,
        })
    }

    pub fn dataset(&self) -> &'a ClusteredDataset {
        self.ds
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// `X_k^T beta` in stacked observation order.
    pub fn index_values(&self) -> &[f64] {
        &self.index
    }

    /// Observations with `|X_k^T beta - t| <= h`, as positions into `order`.
    #[inline]
    fn window(&self, t: f64, h: f64) -> std::ops::Range<usize> {
        let lo = self.sorted.partition_point(|&u| u < t - h);
        let hi = self.sorted.partition_point(|&u| u <= t + h);
        lo..hi
    }

    /// Fused local-linear fit at `t`: link, derivative and (optionally) the
    /// conditional mean of every covariate, in one pass over the window.
    pub fn local(&self, t: f64, cfg: &SmootherConfig, with_cond_mean: bool) -> Result<LocalEstimate> {
        self.local_excluding(t, cfg, with_cond_mean, None)
    }

    pub(crate) fn local_excluding(
        &self,
        t: f64,
        cfg: &SmootherConfig,
        with_cond_mean: bool,
        skip: Option<usize>,
    ) -> Result<LocalEstimate> {
        let h = cfg.h;
        let p = self.ds.p();
        let y = self.ds.y();
        let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
        let (mut b0, mut b1) = (0.0, 0.0);
        let mut c0 = if with_cond_mean { vec![0.0; p] } else { Vec::new() };
        let mut c1 = c0.clone();
        for pos in self.window(t, h) {
            let k = self.order[pos];
            if Some(k) == skip {
                continue;
            }
            let d = self.sorted[pos] - t;
            let w = kernel_h(d, h);
            if w == 0.0 {
                continue;
            }
            let wd = w * d;
            a0 += w;
            a1 += wd;
            a2 += wd * d;
            b0 += w * y[k];
            b1 += wd * y[k];
            if with_cond_mean {
                for (q, &x) in self.ds.x_row(k).iter().enumerate() {
                    c0[q] += w * x;
                    c1[q] += wd * x;
                }
            }
        }
        if a0 == 0.0 {
            return Err(Error::OutOfSupport { t, h });
        }
        let n = self.index.len() as f64;
        let (s0, s1, s2) = (a0 / n, a1 / n, a2 / n);
        let shift = cfg.slope_ridge(s2 * a0 - s1 * a1, a0, n);
        let s2 = s2 + shift;
        let denom = s2 * a0 - s1 * a1;
        let g = (s2 * b0 - s1 * b1) / denom;
        let dg = (s0 * b1 - s1 * b0) / denom;
        let cond_mean = c0
            .iter()
            .zip(&c1)
            .map(|(&u0, &u1)| (s2 * u0 - s1 * u1) / denom)
            .collect();
        Ok(LocalEstimate { g, dg, cond_mean })
    }

    /// Explicit weights `(observation, W, W~)` at `t`, for inspection.
    pub fn weights(&self, t: f64, cfg: &SmootherConfig) -> Result<Vec<(usize, f64, f64)>> {
        let m = local_moments(t, self, cfg);
        if m.s0 == 0.0 {
            return Err(Error::OutOfSupport { t, h: cfg.h });
        }
        let n = self.index.len() as f64;
        let raw_denom: f64 = self
            .window(t, cfg.h)
            .map(|pos| {
                let d = self.sorted[pos] - t;
                kernel_h(d, cfg.h) * (m.s2 - d * m.s1)
            })
            .sum();
        let s2 = m.s2 + cfg.slope_ridge(raw_denom, m.s0 * n, n);
        let raw: Vec<(usize, f64, f64)> = self
            .window(t, cfg.h)
            .map(|pos| {
                let k = self.order[pos];
                let d = self.sorted[pos] - t;
                let kh = kernel_h(d, cfg.h);
                (k, kh * (s2 - d * m.s1), kh * (d * m.s0 - m.s1))
            })
            .collect();
        let denom: f64 = raw.iter().map(|r| r.1).sum();
        Ok(raw.into_iter().map(|(k, u, ut)| (k, u / denom, ut / denom)).collect())
    }

    /// Link estimates on `points` equally spaced over the observed index
    /// range. Points with no kernel mass are left out.
    pub fn link_grid(&self, cfg: &SmootherConfig, points: usize) -> Vec<LinkPoint> {
        let lo = self.sorted.first().copied().unwrap_or(0.0);
        let hi = self.sorted.last().copied().unwrap_or(0.0);
        (0..points)
            .filter_map(|i| {
                let t = if points > 1 { lo + (hi - lo) * i as f64 / (points - 1) as f64 } else { lo };
                self.local(t, cfg, false).ok().map(|e| LinkPoint { t, g: e.g, dg: e.dg })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalEstimate {
    pub g: f64,
    pub dg: f64,
    /// Empty unless requested.
    pub cond_mean: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkPoint {
    pub t: f64,
    pub g: f64,
    pub dg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub s0: f64,
    pub s1: f64,
    pub s2: f64,
}

pub fn local_moments(t: f64, fit: &SmootherFit<'_>, cfg: &SmootherConfig) -> Moments {
    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for pos in fit.window(t, cfg.h) {
        let d = fit.sorted[pos] - t;
        let w = kernel_h(d, cfg.h);
        s0 += w;
        s1 += w * d;
        s2 += w * d * d;
    }
    let n = fit.index.len() as f64;
    Moments {
        s0: s0 / n,
        s1: s1 / n,
        s2: s2 / n,
    }
}

/// `(g(t), g'(t))`.
pub fn estimate_g(t: f64, fit: &SmootherFit<'_>, cfg: &SmootherConfig) -> Result<(f64, f64)> {
    fit.local(t, cfg, false).map(|e| (e.g, e.dg))
}

/// `E[X_q | X^T beta = t]` with the same weights as the link.
pub fn estimate_cond_mean(q: usize, t: f64, fit: &SmootherFit<'_>, cfg: &SmootherConfig) -> Result<f64> {
    if q >= fit.ds.p() {
        return Err(Error::Domain(format!("covariate {q} out of range")));
    }
    fit.local(t, cfg, true).map(|e| e.cond_mean[q])
}

/// Leave-one-observation-out cross validation over a bandwidth grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub h: f64,
    /// `(h, mean squared LOO error, skipped observations)`; `None` score for
    /// excluded bandwidths.
    pub scores: Vec<(f64, Option<f64>, usize)>,
}

/// Mean squared leave-one-out prediction error at one bandwidth, with the
/// number of observations whose reduced window was empty.
pub fn cv_score(fit: &SmootherFit<'_>, h: f64) -> Result<(Option<f64>, usize)> {
    let cfg = SmootherConfig::new(h)?;
    let y = fit.ds.y();
    let mut sse = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for (k, &u) in fit.index.iter().enumerate() {
        match fit.local_excluding(u, &cfg, false, Some(k)) {
            Ok(e) => {
                let r = y[k] - e.g;
                sse += r * r;
                used += 1;
            }
            Err(Error::OutOfSupport { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(((used > 0).then(|| sse / used as f64), skipped))
}

pub fn cv_bandwidth(ds: &ClusteredDataset, beta: &[f64], grid: &[f64]) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::Bandwidth("empty bandwidth grid".into()));
    }
    if let Some(h) = grid.iter().find(|h| !(**h > 0.0) || !h.is_finite()) {
        return Err(Error::Bandwidth(format!("non-positive bandwidth {h} in grid")));
    }
    let fit = SmootherFit::new(ds, beta)?;
    let scores = grid
        .iter()
        .map(|&h| cv_score(&fit, h).map(|(s, skipped)| (h, s, skipped)))
        .collect::<Result<Vec<_>>>()?;
    let Some(min) = scores.iter().filter_map(|s| s.1).min_by(f64::total_cmp) else {
        return Err(Error::Bandwidth("every bandwidth left all observations without support".into()));
    };
    // scores equal up to rounding count as ties; the smaller h wins
    let tol = 1e-12 * (1.0 + min);
    let h = scores
        .iter()
        .filter(|s| s.1.is_some_and(|v| v <= min + tol))
        .map(|s| s.0)
        .min_by(f64::total_cmp)
        .expect("minimum is attained");
    Ok(CvResult { h, scores })
}

/// 20 log-spaced bandwidths on `[0.5, 2] * h0`, `h0 = sd(index) * n^(-1/5)`.
pub fn default_cv_grid(ds: &ClusteredDataset, beta: &[f64]) -> Vec<f64> {
    let idx = ds.index_values(beta);
    let len = idx.len() as f64;
    let mean = idx.iter().sum::<f64>() / len;
    let var = idx.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / (len - 1.0).max(1.0);
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    let h0 = sd * (ds.n() as f64).powf(-0.2);
    log_spaced(0.5 * h0, 2.0 * h0, 20)
}

pub(crate) fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Cluster;
    use nalgebra::{DMatrix, DVector};

    /// One covariate, so the index equals `x` when `beta = (1)`.
    pub(crate) fn univariate(xs: &[f64], ys: &[f64]) -> ClusteredDataset {
        let half = xs.len() / 2;
        let mk = |id: &str, a: usize, b: usize| {
            Cluster::new(
                id,
                DMatrix::from_column_slice(b - a, 1, &xs[a..b]),
                DVector::from_column_slice(&ys[a..b]),
                None,
            )
        };
        ClusteredDataset::new(vec![mk("a", 0, half), mk("b", half, xs.len())]).unwrap()
    }

    const XS: [f64; 5] = [-0.8, -0.3, 0.1, 0.4, 0.9];
    const YS: [f64; 5] = [1.2, -0.4, 0.7, 2.1, 0.3];

    #[test]
    fn kernel_values() {
        assert_eq!(kernel_eval(0.0), 0.75);
        assert_eq!(kernel_eval(1.0), 0.0);
        assert_eq!(kernel_eval(0.5), 0.5625);
        assert_eq!(kernel_eval(-1.5), 0.0);
    }

    #[test]
    fn moments_at_coincident_points() {
        let ds = univariate(&[0.3; 4], &[1.0, 2.0, 3.0, 4.0]);
        let fit = SmootherFit::new(&ds, &[1.0]).unwrap();
        let cfg = SmootherConfig::new(0.5).unwrap();
        let m = local_moments(0.3, &fit, &cfg);
        assert!((m.s0 - 0.75 / 0.5).abs() < 1e-15);
        assert_eq!(m.s1, 0.0);
        assert_eq!(m.s2, 0.0);
    }

    #[test]
    fn moments_empty_window() {
        let ds = univariate(&XS, &YS);
        let fit = SmootherFit::new(&ds, &[1.0]).unwrap();
        let cfg = SmootherConfig::new(0.2).unwrap();
        let m = local_moments(5.0, &fit, &cfg);
        assert_eq!((m.s0, m.s1, m.s2), (0.0, 0.0, 0.0));
        assert!(matches!(estimate_g(5.0, &fit, &cfg), Err(Error::OutOfSupport { .. })));
    }

    #[test]
    fn moments_match_brute_force() {
        let ds = univariate(&XS, &YS);
        let fit = SmootherFit::new(&ds, &[1.0]).unwrap();
        let cfg = SmootherConfig::new(1.0).unwrap();
        for t in [-0.5, 0.0, 0.35] {
            let m = local_moments(t, &fit, &cfg);
            let mut s = [0.0; 3];
            for &x in &XS {
                let d: f64 = x - t;
                let k = 0.75 * (1.0 - d * d).max(0.0);
                for (l, sl) in s.iter_mut().enumerate() {
                    *sl += d.powi(l as i32) * k / 5.0;
                }
            }
            assert!((m.s0 - s[0]).abs() < 1e-12);
            assert!((m.s1 - s[1]).abs() < 1e-12);
            assert!((m.s2 - s[2]).abs() < 1e-12);
        }
    }

    /// Direct weighted least squares: solve the 2x2 normal equations of
    /// `min sum (y - a - b d)^2 K_h(d)`.
    fn wls_oracle(xs: &[f64], ys: &[f64], t: f64, h: f64) -> (f64, f64) {
        let (mut m00, mut m01, mut m11, mut r0, mut r1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &y) in xs.iter().zip(ys) {
            let d = x - t;
            let u: f64 = d / h;
            let w = if u.abs() <= 1.0 { 0.75 * (1.0 - u * u) / h } else { 0.0 };
            m00 += w;
            m01 += w * d;
            m11 += w * d * d;
            r0 += w * y;
            r1 += w * d * y;
        }
        let det = m00 * m11 - m01 * m01;
        ((m11 * r0 - m01 * r1) / det, (m00 * r1 - m01 * r0) / det)
    }

    #[test]
    fn link_matches_wls_oracle() {
        let ds = univariate(&XS, &YS);
        let fit = SmootherFit::new(&ds, &[1.0]).unwrap();
        let cfg = SmootherConfig::with_ridge(1.0, 0.0).unwrap();
        let (g, dg) = estimate_g(0.0, &fit, &cfg).unwrap();
        let (a, b) = wls_oracle(&XS, &YS, 0.0, 1.0);
        assert!((g - a).abs() < 1e-12, "{g} vs {a}");
        assert!((dg - b).abs() < 1e-12, "{dg} vs {b}");
    }

    #[test]
    fn constants_are_reproduced() {
        let ds = univariate(&XS, &[2.5; 5]);
        let fit = SmootherFit::new(&ds, &[1.0]).unwrap();
        let cfg = SmootherConfig::new(0.9).unwrap();
        for t in [-0.5, 0.0, 0.5] {
            let (g, dg) = estimate_g(t, &fit, &cfg).unwrap();
            assert!((g - 2.5).abs() < 1e-9);
            assert!(dg.abs() < 1e-8);
        }
    }

    #[test]
    fn cond_mean_brute_force_and_linear() {
        // second covariate equals twice the first; beta = e1
        let xs2: Vec<f64> = XS.iter().flat_map(|&x| [x, 2.0 * x]).collect();
        let c = |id: &str, a: usize, b: usize| {
            Cluster::new(id, DMatrix::from_row_slice(b - a, 2, &xs2[2 * a..2 * b]), DVector::from_column_slice(&YS[a..b]), None)
        };
        let ds = ClusteredDataset::new(vec![c("a", 0, 2), c("b", 2, 5)]).unwrap();
        let fit = SmootherFit::new(&ds, &[1.0, 0.0]).unwrap();
        let cfg = SmootherConfig::with_ridge(1.0, 0.0).unwrap();
        for t in [-0.2, 0.1, 0.3] {
            let e = estimate_cond_mean(1, t, &fit, &cfg).unwrap();
            assert!((e - 2.0 * t).abs() < 1e-8);
            let brute: f64 = fit.weights(t, &cfg).unwrap().iter().map(|&(k, w, _)| w * ds.x_row(k)[1]).sum();
            assert!((e - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_are_local_and_normalized() {
        let ds = univariate(&XS, &YS);
        let fit = SmootherFit::new(&ds, &[1.0]).unwrap();
        let cfg = SmootherConfig::with_ridge(0.6, 0.0).unwrap();
        let w = fit.weights(0.0, &cfg).unwrap();
        let total: f64 = w.iter().map(|x| x.1).sum();
        assert!((total - 1.0).abs() < 1e-10);
        assert!(w.iter().all(|&(k, _, _)| (XS[k] - 0.0).abs() <= 0.6));
    }

    /// Leave-one-out recomputation from scratch with the WLS oracle.
    fn cv_oracle(xs: &[f64], ys: &[f64], h: f64) -> f64 {
        let mut sse = 0.0;
        for k in 0..xs.len() {
            let (xo, yo): (Vec<f64>, Vec<f64>) =
                xs.iter().zip(ys).enumerate().filter(|(i, _)| *i != k).map(|(_, (&x, &y))| (x, y)).unzip();
            let (a, _) = wls_oracle(&xo, &yo, xs[k], h);
            sse += (ys[k] - a).powi(2);
        }
        sse / xs.len() as f64
    }

    #[test]
    fn cv_matches_brute_force() {
        let xs = [-0.9, -0.7, -0.45, -0.25, 0.0, 0.2, 0.45, 0.65];
        let ys = [0.4, 0.1, 0.5, 0.9, 0.8, 1.6, 1.7, 2.6];
        let ds = univariate(&xs, &ys);
        let fit = SmootherFit::new(&ds, &[1.0]).unwrap();
        for h in [0.5, 1.0] {
            let (s, skipped) = cv_score(&fit, h).unwrap();
            assert_eq!(skipped, 0);
            let oracle = cv_oracle(&xs, &ys, h);
            assert!((s.unwrap() - oracle).abs() < 1e-9 * oracle.max(1.0), "h={h}: {s:?} vs {oracle}");
        }
        let res = cv_bandwidth(&ds, &[1.0], &[0.5, 1.0]).unwrap();
        let best = if cv_oracle(&xs, &ys, 0.5) <= cv_oracle(&xs, &ys, 1.0) { 0.5 } else { 1.0 };
        assert_eq!(res.h, best);
    }

    #[test]
    fn cv_singleton_and_linear_tie() {
        let xs: Vec<f64> = (0..12).map(|i| -1.0 + i as f64 / 6.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 + 3.0 * x).collect();
        let ds = univariate(&xs, &ys);
        assert_eq!(cv_bandwidth(&ds, &[1.0], &[0.7]).unwrap().h, 0.7);
        let res = cv_bandwidth(&ds, &[1.0], &[0.9, 0.5, 0.7]).unwrap();
        assert_eq!(res.h, 0.5);
    }

    #[test]
    fn cv_rejects_bad_grid() {
        let ds = univariate(&XS, &YS);
        assert!(cv_bandwidth(&ds, &[1.0], &[]).is_err());
        assert!(cv_bandwidth(&ds, &[1.0], &[0.5, -1.0]).is_err());
        assert!(matches!(cv_bandwidth(&ds, &[1.0], &[1e-6]), Err(Error::Bandwidth(_))));
    }

    proptest::proptest! {
        #[test]
        fn kernel_symmetric(u in -3.0f64..3.0) {
            proptest::prop_assert_eq!(kernel_eval(u), kernel_eval(-u));
            proptest::prop_assert!(kernel_eval(u) >= 0.0);
        }
    }
}
