//! Decompositions: SVD, eigenvalues, pseudoinverse, least-squares line fit.
//!
//! SVD and the real Schur form come from `nalgebra`; everything here converts
//! at the boundary so callers only ever see [`Tensor`].

use nalgebra::linalg::{Schur, SVD};
use nalgebra::DMatrix;

use super::tensor::{dot, Tensor};
use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 10_000;

/// Relative cutoff below which a singular value counts as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexValue {
    pub re: f64,
    pub im: f64,
}

impl ComplexValue {
    pub fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    pub fn modulus(&self) -> f64 {
        self.re.hypot(self.im)
    }
}

/// Full singular value decomposition `m = U · diag(Σ) · Vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `[r × r]`, orthogonal.
    pub u: Tensor,
    /// `min(r, c)` values, non-negative and descending.
    pub sigma: Vec<f64>,
    /// `[c × c]`, orthogonal.
    pub vt: Tensor,
}

impl Svd {
    /// Number of singular values above `RANK_TOLERANCE · σ_max`.
    pub fn rank(&self) -> usize {
        let cutoff = RANK_TOLERANCE * self.sigma.first().copied().unwrap_or(0.0);
        self.sigma.iter().filter(|s| **s > cutoff && **s > 0.0).count()
    }

    pub fn reconstruct(&self) -> Tensor {
        let (r, c) = (self.u.rows(), self.vt.rows());
        let mut out = Tensor::zeros(&[r, c]);
        for (k, s) in self.sigma.iter().enumerate() {
            for i in 0..r {
                let uik = self.u.get(i, k) * s;
                if uik == 0.0 {
                    continue;
                }
                for (o, v) in out.row_mut(i).iter_mut().zip(self.vt.row(k)) {
                    *o += uik * v;
                }
            }
        }
        out
    }
}

fn to_dmatrix(m: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn require_matrix(m: &Tensor, what: &str) -> Result<()> {
    if m.shape().len() != 2 {
        return Err(Error::Shape(format!("{what}: expected a matrix, got {:?}", m.shape())));
    }
    if !m.all_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

/// Extends a set of orthonormal rows to an orthonormal basis of `R^dim`.
fn complete_basis(mut rows: Vec<Vec<f64>>, dim: usize) -> Vec<Vec<f64>> {
    let mut candidate = 0;
    while rows.len() < dim && candidate < dim {
        let mut v = vec![0.0; dim];
        v[candidate] = 1.0;
        candidate += 1;
        // Two Gram–Schmidt passes keep the completed basis orthogonal to ~1e-15.
        for _ in 0..2 {
            for b in &rows {
                let p = dot(&v, b);
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= p * bi;
                }
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            rows.push(v);
        }
    }
    rows
}

pub fn svd(m: &Tensor) -> Result<Svd> {
    require_matrix(m, "svd input")?;
    let (r, c) = (m.rows(), m.cols());
    let k = r.min(c);
    if k == 0 {
        return Ok(Svd { u: Tensor::eye(r), sigma: Vec::new(), vt: Tensor::eye(c) });
    }
    let dec = SVD::try_new(to_dmatrix(m), true, true, f64::EPSILON, MAX_ITERATIONS)
        .ok_or(Error::NoConvergence { what: "svd", iterations: MAX_ITERATIONS })?;
    let u = dec.u.as_ref().expect("requested U");
    let vt = dec.v_t.as_ref().expect("requested Vt");

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| dec.singular_values[b].total_cmp(&dec.singular_values[a]));

    let sigma: Vec<f64> = order.iter().map(|&i| dec.singular_values[i].max(0.0)).collect();
    let u_cols: Vec<Vec<f64>> =
        order.iter().map(|&i| (0..r).map(|row| u[(row, i)]).collect()).collect();
    let v_rows: Vec<Vec<f64>> =
        order.iter().map(|&i| (0..c).map(|col| vt[(i, col)]).collect()).collect();

    let u_full = complete_basis(u_cols, r);
    let v_full = complete_basis(v_rows, c);
    let u = Tensor::from_parts(vec![r, r], u_full.concat()).transpose();
    let vt = Tensor::from_parts(vec![c, c], v_full.concat());
    Ok(Svd { u, sigma, vt })
}

/// All `n` eigenvalues of a square matrix via the real Schur form.
pub fn eigenvalues(m: &Tensor) -> Result<Vec<ComplexValue>> {
    require_matrix(m, "eigenvalue input")?;
    if m.rows() != m.cols() {
        return Err(Error::Shape(format!("eigenvalues need a square matrix, got {:?}", m.shape())));
    }
    if m.rows() == 0 {
        return Ok(Vec::new());
    }
    let schur = Schur::try_new(to_dmatrix(m), f64::EPSILON, MAX_ITERATIONS)
        .ok_or(Error::NoConvergence { what: "schur decomposition", iterations: MAX_ITERATIONS })?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| ComplexValue::new(z.re, z.im))
        .collect())
}

/// Moore–Penrose pseudoinverse, dropping singular values below the rank cutoff.
pub fn pseudoinverse(m: &Tensor) -> Result<Tensor> {
    let dec = svd(m)?;
    let (r, c) = (m.rows(), m.cols());
    let rank = dec.rank();
    let mut out = Tensor::zeros(&[c, r]);
    for k in 0..rank {
        let inv = 1.0 / dec.sigma[k];
        for i in 0..c {
            let vik = dec.vt.get(k, i) * inv;
            for j in 0..r {
                let cur = out.get(i, j);
                out.set(i, j, cur + vik * dec.u.get(j, k));
            }
        }
    }
    Ok(out)
}

/// Ordinary least-squares line `y ≈ slope·x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Coefficient of determination; 0 when `y` has no variance.
    pub r2: f64,
    /// Set when every `y` is identical, which leaves `r2` undefined.
    pub zero_variance: bool,
    pub n_points: usize,
}

pub fn linear_fit(points: &[(f64, f64)]) -> Result<LinearFit> {
    if points.len() < 2 {
        return Err(Error::DegenerateFit(format!("need at least 2 points, got {}", points.len())));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (dx, dy) = (x - mean_x, y - mean_y);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("all x values are identical".into()));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let zero_variance = syy == 0.0;
    let r2 = if zero_variance {
        0.0
    } else {
        let ss_res: f64 = points
            .iter()
            .map(|&(x, y)| {
                let e = y - (slope * x + intercept);
                e * e
            })
            .sum();
        1.0 - ss_res / syy
    };
    Ok(LinearFit { slope, intercept, r2, zero_variance, n_points: points.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{sample_normal, Rng};

    fn orthogonality_error(q: &Tensor) -> f64 {
        q.matmul_tn(q).unwrap().max_abs_diff(&Tensor::eye(q.cols()))
    }

    #[test]
    fn svd_of_diagonal() {
        let d = Tensor::diag(&[3.0, 2.0]);
        let s = svd(&d).unwrap();
        assert!((s.sigma[0] - 3.0).abs() < 1e-14 && (s.sigma[1] - 2.0).abs() < 1e-14);
        for i in 0..2 {
            assert!((s.u.get(i, i).abs() - 1.0).abs() < 1e-12);
            assert!((s.vt.get(i, i).abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn svd_of_zero_matrix() {
        let s = svd(&Tensor::zeros(&[3, 2])).unwrap();
        assert!(s.sigma.iter().all(|v| *v == 0.0));
        assert_eq!(s.rank(), 0);
        assert!(orthogonality_error(&s.u) < 1e-12);
    }

    #[test]
    fn svd_reconstructs_wide_and_tall() {
        let mut rng = Rng::new(3);
        for shape in [[4, 6], [6, 4], [5, 5]] {
            let m = sample_normal(&mut rng, &shape);
            let s = svd(&m).unwrap();
            assert!(s.reconstruct().max_abs_diff(&m) < 1e-8);
            assert!(orthogonality_error(&s.u) < 1e-8);
            assert!(orthogonality_error(&s.vt.transpose()) < 1e-8);
            assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn eigenvalues_of_diagonal_and_rotation() {
        let mut ev = eigenvalues(&Tensor::diag(&[1.0, 2.0, 3.0])).unwrap();
        ev.sort_by(|a, b| a.re.total_cmp(&b.re));
        for (e, want) in ev.iter().zip([1.0, 2.0, 3.0]) {
            assert!((e.re - want).abs() < 1e-12 && e.im.abs() < 1e-12);
        }
        let rot = Tensor::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let mut ev = eigenvalues(&rot).unwrap();
        ev.sort_by(|a, b| a.im.total_cmp(&b.im));
        assert!(ev[0].re.abs() < 1e-12 && (ev[0].im + 1.0).abs() < 1e-12);
        assert!(ev[1].re.abs() < 1e-12 && (ev[1].im - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eigenvalues_rejects_rectangular() {
        assert!(eigenvalues(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn pinv_of_orthonormal_columns_is_transpose() {
        let mut rng = Rng::new(11);
        let s = svd(&sample_normal(&mut rng, &[6, 3])).unwrap();
        // first three columns of U are orthonormal
        let q = Tensor::from_parts(
            vec![6, 3],
            (0..6).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| s.u.get(i, j)).collect(),
        );
        assert!(pseudoinverse(&q).unwrap().max_abs_diff(&q.transpose()) < 1e-10);
    }

    #[test]
    fn pinv_of_invertible_is_inverse() {
        let a = Tensor::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let inv = pseudoinverse(&a).unwrap();
        assert!(a.matmul(&inv).unwrap().max_abs_diff(&Tensor::eye(2)) < 1e-12);
    }

    #[test]
    fn fit_exact_line() {
        let pts: Vec<_> = (0..10).map(|i| (i as f64, 2.3 * i as f64)).collect();
        let f = linear_fit(&pts).unwrap();
        assert!((f.slope - 2.3).abs() < 1e-12);
        assert!(f.intercept.abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_two_points() {
        let f = linear_fit(&[(0.0, 1.0), (1.0, 5.0)]).unwrap();
        assert!((f.r2 - 1.0).abs() < 1e-15);
        assert!((f.slope - 4.0).abs() < 1e-15);
    }

    #[test]
    fn fit_degenerate_x() {
        assert!(matches!(linear_fit(&[(1.0, 1.0), (1.0, 2.0)]), Err(Error::DegenerateFit(_))));
        assert!(linear_fit(&[(1.0, 1.0)]).is_err());
    }

    #[test]
    fn fit_constant_y_flags_zero_variance() {
        let f = linear_fit(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]).unwrap();
        assert!(f.zero_variance);
        assert_eq!(f.r2, 0.0);
        assert_eq!(f.slope, 0.0);
    }
}
