//! Remove-one-component chart on the unit sphere.
//!
//! A unit index vector `beta` with `beta[r] > 0` is represented by the
//! `p - 1` remaining coordinates; `beta[r]` is recovered as
//! `sqrt(1 - |beta_reduced|^2)`. All indices here are 0-based.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Radius at which an iterate is considered to have left the chart.
pub const CHART_EDGE: f64 = 1.0 - 1e-10;
/// Radius an escaped iterate is pulled back to.
pub const CHART_RETREAT: f64 = 1.0 - 1e-8;

/// Unit-norm index vector together with its chart coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexParam {
    beta: Vec<f64>,
    r: usize,
    reduced: Vec<f64>,
}

impl IndexParam {
    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// Position of the removed (positive) component.
    pub fn r(&self) -> usize {
        self.r
    }

    pub fn reduced(&self) -> &[f64] {
        &self.reduced
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }

    /// Sets the listed coordinates to exact zero and renormalizes, keeping
    /// the chart. Fails if `r` itself is listed.
    pub fn with_zeros(&self, zeros: &[usize]) -> Result<Self> {
        if zeros.contains(&self.r) {
            return Err(Error::Domain("cannot zero the removed component".into()));
        }
        let mut beta = self.beta.clone();
        for &i in zeros {
            beta[i] = 0.0;
        }
        let norm = norm(&beta);
        beta.iter_mut().for_each(|b| *b /= norm);
        reduce(&beta, self.r)
    }
}

#[inline]
pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn check_r(r: usize, p: usize) -> Result<()> {
    if r >= p {
        return Err(Error::Domain(format!("removed index {r} out of range for p = {p}")));
    }
    Ok(())
}

fn radial(reduced: &[f64]) -> Result<f64> {
    let sq: f64 = reduced.iter().map(|a| a * a).sum();
    if sq >= 1.0 || !sq.is_finite() {
        return Err(Error::Domain(format!(
            "reduced index has norm {} >= 1 (outside the chart)",
            sq.sqrt()
        )));
    }
    Ok((1.0 - sq).sqrt())
}

/// Maps chart coordinates back to the sphere, inserting the positive
/// component at position `r`.
pub fn embed(reduced: &[f64], r: usize) -> Result<IndexParam> {
    let p = reduced.len() + 1;
    check_r(r, p)?;
    let br = radial(reduced)?;
    let mut beta = Vec::with_capacity(p);
    beta.extend_from_slice(&reduced[..r]);
    beta.push(br);
    beta.extend_from_slice(&reduced[r..]);
    Ok(IndexParam {
        beta,
        r,
        reduced: reduced.to_vec(),
    })
}

/// `d beta / d beta_reduced`, a `p x (p-1)` matrix.
pub fn jacobian(reduced: &[f64], r: usize) -> Result<DMatrix<f64>> {
    let p = reduced.len() + 1;
    check_r(r, p)?;
    let br = radial(reduced)?;
    let mut j = DMatrix::zeros(p, p - 1);
    for s in 0..p {
        if s < r {
            j[(s, s)] = 1.0;
        } else if s > r {
            j[(s, s - 1)] = 1.0;
        } else {
            for c in 0..p - 1 {
                j[(s, c)] = -reduced[c] / br;
            }
        }
    }
    Ok(j)
}

/// Picks the removed component as the largest `|beta_i|` (smallest index on
/// ties) and flips the sign of the whole vector so that component is positive.
pub fn choose_r(beta: &[f64]) -> Result<(usize, Vec<f64>)> {
    let mut r = 0;
    let mut best = -1.0;
    for (i, b) in beta.iter().enumerate() {
        if b.abs() > best {
            best = b.abs();
            r = i;
        }
    }
    if !(best > 0.0) {
        return Err(Error::Degenerate("index vector is zero".into()));
    }
    let s = beta[r].signum();
    Ok((r, beta.iter().map(|b| b * s).collect()))
}

/// Drops component `r` from a unit vector with `beta[r] > 0`.
pub fn reduce(beta: &[f64], r: usize) -> Result<IndexParam> {
    check_r(r, beta.len())?;
    if !(beta[r] > 0.0) {
        return Err(Error::Domain(format!("component {r} must be positive, got {}", beta[r])));
    }
    let nrm = norm(beta);
    if (nrm - 1.0).abs() > 1e-8 {
        return Err(Error::Domain(format!("index vector must have unit norm, got {nrm}")));
    }
    let reduced: Vec<f64> = beta
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != r)
        .map(|(_, &b)| b)
        .collect();
    embed(&reduced, r)
}

/// Normalizes an arbitrary nonzero vector, picks `r` and returns its chart
/// representation.
pub fn orient(beta: &[f64]) -> Result<IndexParam> {
    let nrm = norm(beta);
    if !(nrm > 0.0) || !nrm.is_finite() {
        return Err(Error::Degenerate("index vector is zero or non-finite".into()));
    }
    let unit: Vec<f64> = beta.iter().map(|b| b / nrm).collect();
    let (r, oriented) = choose_r(&unit)?;
    reduce(&oriented, r)
}

/// Pulls coordinates that reached the chart edge back inside.
/// Returns `true` when a projection happened.
pub fn project_into_chart(reduced: &mut [f64]) -> bool {
    let nrm = norm(reduced);
    if nrm >= CHART_EDGE {
        let s = CHART_RETREAT / nrm;
        reduced.iter_mut().for_each(|a| *a *= s);
        true
    } else {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn embed_origin_gives_basis_vector() {
        let ip = embed(&[0.0, 0.0], 1).unwrap();
        assert_eq!(ip.beta(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn embed_inserts_radial_component() {
        let ip = embed(&[0.6, 0.0], 1).unwrap();
        assert_abs_diff_eq!(ip.beta()[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(ip.beta()[1], 0.8, epsilon = 1e-15);
        assert_eq!(ip.beta()[2], 0.0);
    }

    #[test]
    fn embed_rejects_boundary() {
        assert!(matches!(embed(&[1.0, 0.0], 1), Err(Error::Domain(_))));
        assert!(matches!(jacobian(&[0.6, 0.8], 0), Err(Error::Domain(_))));
    }

    #[test]
    fn jacobian_closed_form() {
        let j = jacobian(&[0.6, 0.0], 1).unwrap();
        let expect = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, -0.75, 0.0, 0.0, 1.0]);
        assert!((j - expect).abs().max() < 1e-15);
    }

    #[test]
    fn jacobian_at_origin_has_zero_row() {
        let j = jacobian(&[0.0, 0.0, 0.0], 2).unwrap();
        assert!(j.row(2).iter().all(|&a| a == 0.0));
        assert_eq!(j[(0, 0)], 1.0);
        assert_eq!(j[(1, 1)], 1.0);
        assert_eq!(j[(3, 2)], 1.0);
    }

    #[test]
    fn choose_r_largest_abs_and_flip() {
        let (r, b) = choose_r(&[0.1, -0.9, 0.2]).unwrap();
        assert_eq!(r, 1);
        assert_eq!(b, vec![-0.1, 0.9, -0.2]);
    }

    #[test]
    fn choose_r_tie_takes_first() {
        assert_eq!(choose_r(&[0.5, 0.5]).unwrap().0, 0);
        assert!(choose_r(&[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn reduce_examples() {
        assert_eq!(reduce(&[0.6, 0.8, 0.0], 1).unwrap().reduced(), &[0.6, 0.0]);
        assert_eq!(reduce(&[0.0, 0.0, 1.0], 2).unwrap().reduced(), &[0.0, 0.0]);
        assert!(matches!(reduce(&[0.6, -0.8, 0.0], 1), Err(Error::Domain(_))));
    }

    #[test]
    fn projection_pulls_back_inside() {
        let mut b = vec![0.8, 0.6];
        assert!(project_into_chart(&mut b));
        assert_abs_diff_eq!(norm(&b), CHART_RETREAT, epsilon = 1e-14);
        assert!(embed(&b, 0).is_ok());
    }

    fn interior(p: usize) -> impl Strategy<Value = (Vec<f64>, usize)> {
        (proptest::collection::vec(-1.0f64..1.0, p - 1), 0..p, 0.0f64..0.95).prop_map(|(v, r, rad)| {
            let n = norm(&v).max(1e-12);
            (v.iter().map(|a| a / n * rad).collect(), r)
        })
    }

    proptest! {
        #[test]
        fn embed_has_unit_norm((b, r) in interior(5)) {
            let ip = embed(&b, r).unwrap();
            prop_assert!((norm(ip.beta()) - 1.0).abs() <= 1e-12);
            prop_assert!(ip.beta()[r] > 0.0);
        }

        #[test]
        fn reduce_embed_round_trip((b, r) in interior(6)) {
            let ip = embed(&b, r).unwrap();
            let back = embed(reduce(ip.beta(), r).unwrap().reduced(), r).unwrap();
            for (x, y) in back.beta().iter().zip(ip.beta()) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
        }
    }
}
