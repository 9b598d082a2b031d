//! Bures-Wasserstein geometry of Gaussians and of the scale space
//! `S -> S S^T` that parameterizes them.

use nalgebra::{DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::{self, check_len, check_square, Inverse, Mat, Row};

/// Relative tolerance on `|A - A^T|` for accepting a symmetric matrix.
const SYMMETRY_TOL: f64 = 1e-10;
/// Eigenvalues above `-PSD_FLOOR * max|eig|` are clipped to zero.
const PSD_FLOOR: f64 = 1e-10;

/// A symmetric positive-definite matrix with its eigendecomposition.
#[derive(Debug, Clone)]
pub struct SymmetricPd {
    matrix: Mat,
    eigenvalues: DVector<f64>,
    eigenvectors: Mat,
}

impl SymmetricPd {
    pub fn new(matrix: Mat) -> Result<Self> {
        let (eigenvalues, eigenvectors) = symmetric_eigen(&matrix, "SPD matrix")?;
        let min = eigenvalues.min();
        if !(min > 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "smallest eigenvalue {min:e}"
            )));
        }
        Ok(Self {
            matrix,
            eigenvalues,
            eigenvectors,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::new(Mat::identity(n, n)).expect("identity is SPD")
    }

    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }

    pub fn into_matrix(self) -> Mat {
        self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &Mat {
        &self.eigenvectors
    }

    /// `U f(Lambda) U^T`, symmetrized.
    pub fn map_eigenvalues(&self, f: impl Fn(f64) -> f64) -> Mat {
        spectral(&self.eigenvalues.map(f), &self.eigenvectors)
    }

    pub fn sqrt(&self) -> Mat {
        self.map_eigenvalues(f64::sqrt)
    }

    pub fn inv_sqrt(&self) -> Mat {
        self.map_eigenvalues(|l| 1.0 / l.sqrt())
    }
}

fn symmetric_eigen(m: &Mat, what: &'static str) -> Result<(DVector<f64>, Mat)> {
    check_square(m, what)?;
    if !linalg::all_finite(m.iter()) {
        return Err(Error::NonFinite { what, index: 0 });
    }
    let scale = linalg::max_abs(m).max(1.0);
    if linalg::asymmetry(m) > SYMMETRY_TOL * scale {
        return Err(Error::InvalidArgument(format!("{what} is not symmetric")));
    }
    let eig = SymmetricEigen::new(linalg::symmetrize(m));
    Ok((eig.eigenvalues, eig.eigenvectors))
}

fn spectral(values: &DVector<f64>, vectors: &Mat) -> Mat {
    let scaled = Mat::from_fn(vectors.nrows(), vectors.ncols(), |i, j| {
        vectors[(i, j)] * values[j]
    });
    linalg::symmetrize(&(scaled * vectors.transpose()))
}

/// Principal square root of a symmetric positive semidefinite matrix.
pub fn sqrtm_psd(a: &Mat) -> Result<Mat> {
    let (values, vectors) = symmetric_eigen(a, "PSD matrix")?;
    let top = values.amax();
    let floor = -PSD_FLOOR * top;
    if let Some(bad) = values.iter().find(|l| **l < floor) {
        return Err(Error::NotPositiveDefinite(format!(
            "eigenvalue {bad:e} below the PSD floor {floor:e}"
        )));
    }
    Ok(spectral(&values.map(|l| l.max(0.0).sqrt()), &vectors))
}

/// `tr(A + B - 2 (A^{1/2} B A^{1/2})^{1/2})`.
pub fn bures_distance_sq(a: &Mat, b: &Mat) -> Result<f64> {
    check_square(a, "A")?;
    check_len(b.nrows(), a.nrows(), "B")?;
    check_square(b, "B")?;
    let ra = sqrtm_psd(a)?;
    let cross = sqrtm_psd(&linalg::symmetrize(&(&ra * b * &ra)))?;
    let d = a.trace() + b.trace() - 2.0 * cross.trace();
    let tol = 1e-10 * (a.trace() + b.trace()).max(1.0);
    if d < -tol {
        return Err(Error::Domain(format!("negative squared Bures distance {d:e}")));
    }
    Ok(d.max(0.0))
}

pub fn bures_distance(a: &Mat, b: &Mat) -> Result<f64> {
    Ok(bures_distance_sq(a, b)?.sqrt())
}

/// `W2(N(mu_q, cov_q), N(mu_p, cov_p))`.
pub fn w2_gaussian(mu_q: &Row, cov_q: &Mat, mu_p: &Row, cov_p: &Mat) -> Result<f64> {
    check_len(mu_p.len(), mu_q.len(), "mean")?;
    check_len(cov_q.nrows(), mu_q.len(), "covariance")?;
    let mean_term = (mu_q - mu_p).norm_squared();
    Ok((mean_term + bures_distance_sq(cov_q, cov_p)?).sqrt())
}

/// Differential of `pi(S) = S S^T`: `X S^T + S X^T`.
pub fn dpi(s: &Mat, x: &Mat) -> Mat {
    let a = x * s.transpose();
    &a + a.transpose()
}

/// Split of a tangent vector `X` at `S` into horizontal `H S` (with `H`
/// symmetric) and vertical parts (kernel of `dpi`).
#[derive(Debug, Clone)]
pub struct TangentDecomposition {
    pub horizontal: Mat,
    pub vertical: Mat,
    pub h: Mat,
}

/// Solves `H Sigma + Sigma H = X S^T + S X^T` in the eigenbasis of
/// `Sigma = S S^T`.
pub fn horizontal_projection(s: &Mat, x: &Mat) -> Result<TangentDecomposition> {
    check_square(s, "S")?;
    check_len(x.nrows(), s.nrows(), "X")?;
    check_square(x, "X")?;
    Inverse::new(s, "S")?;
    let sigma = linalg::symmetrize(&(s * s.transpose()));
    let eig = SymmetricEigen::new(sigma);
    let u = &eig.eigenvectors;
    let c = u.transpose() * dpi(s, x) * u;
    let n = s.nrows();
    let lam = &eig.eigenvalues;
    let ht = Mat::from_fn(n, n, |i, j| c[(i, j)] / (lam[i] + lam[j]));
    let h = linalg::symmetrize(&(u * ht * u.transpose()));
    let horizontal = &h * s;
    let vertical = x - &horizontal;
    Ok(TangentDecomposition {
        horizontal,
        vertical,
        h,
    })
}

fn require_horizontal(s: &Mat, g: &Mat) -> Result<()> {
    let dec = horizontal_projection(s, g)?;
    let gn = g.norm();
    if dec.vertical.norm() > 1e-6 * gn {
        return Err(Error::InvalidArgument(format!(
            "gradient is not horizontal: vertical part {:e} vs norm {gn:e}",
            dec.vertical.norm()
        )));
    }
    Ok(())
}

/// Riemannian gradient in covariance coordinates, `dpi_S(grad_S)`.
pub fn riemannian_grad_q(s: &Mat, grad_s: &Mat) -> Result<Mat> {
    require_horizontal(s, grad_s)?;
    Ok(dpi(s, grad_s))
}

/// Bures-Wasserstein gradient `grad_S S^{-1}`.
pub fn riemannian_grad_bw(s: &Mat, grad_s: &Mat) -> Result<Mat> {
    require_horizontal(s, grad_s)?;
    Ok(grad_s * Inverse::new(s, "S")?.inverse)
}

fn require_nonsingular_spd(a: &Mat, what: &'static str) -> Result<SymmetricPd> {
    let spd = SymmetricPd::new(a.clone())?;
    if spd.eigenvalues().min() <= 1e-12 * spd.eigenvalues().max() {
        return Err(Error::Singular(what));
    }
    Ok(spd)
}

/// Optimal transport map `T = A^{-1/2} (A^{1/2} B A^{1/2})^{1/2} A^{-1/2}`
/// pushing `N(0, A)` onto `N(0, B)`.
pub fn ot_map(a: &Mat, b: &Mat) -> Result<Mat> {
    let spd = require_nonsingular_spd(a, "A")?;
    check_len(b.nrows(), a.nrows(), "B")?;
    let ra = spd.sqrt();
    let ria = spd.inv_sqrt();
    let mid = sqrtm_psd(&linalg::symmetrize(&(&ra * b * &ra)))?;
    Ok(linalg::symmetrize(&(&ria * mid * &ria)))
}

fn geodesic_factor(a: &Mat, b: &Mat, t: f64) -> Result<Mat> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t must lie in [0, 1], got {t}")));
    }
    let n = a.nrows();
    Ok(Mat::identity(n, n) * (1.0 - t) + ot_map(a, b)? * t)
}

/// `Sigma_t = M_t A M_t` with `M_t = (1 - t) I + t T`.
pub fn geodesic(a: &Mat, b: &Mat, t: f64) -> Result<Mat> {
    let m = geodesic_factor(a, b, t)?;
    Ok(linalg::symmetrize(&(&m * a * &m)))
}

/// Horizontal lift `S_t = M_t A^{1/2}` of the geodesic.
pub fn horizontal_lift_geodesic(a: &Mat, b: &Mat, t: f64) -> Result<Mat> {
    let m = geodesic_factor(a, b, t)?;
    Ok(m * SymmetricPd::new(a.clone())?.sqrt())
}

/// Frobenius length of the lifted geodesic discretized into `segments`.
pub fn lift_length(a: &Mat, b: &Mat, segments: usize) -> Result<f64> {
    if segments == 0 {
        return Err(Error::InvalidArgument("segments must be >= 1".into()));
    }
    let mut prev = horizontal_lift_geodesic(a, b, 0.0)?;
    let mut len = 0.0;
    for k in 1..=segments {
        let cur = horizontal_lift_geodesic(a, b, k as f64 / segments as f64)?;
        len += (&cur - &prev).norm();
        prev = cur;
    }
    Ok(len)
}

/// Moment fit of a particle cloud.
#[derive(Debug, Clone)]
pub struct GaussianFit {
    pub mean: Row,
    /// Unbiased covariance plus `1e-10 I`.
    pub cov: SymmetricPd,
    /// True when the raw covariance is (numerically) rank deficient.
    pub degenerate: bool,
}

pub const FIT_REGULARIZATION: f64 = 1e-10;

/// Sample mean and unbiased covariance of the rows of `positions`.
pub fn empirical_gaussian_fit(positions: &Mat) -> Result<GaussianFit> {
    let (m, n) = positions.shape();
    if m <= n {
        return Err(Error::InvalidArgument(format!(
            "need more than {n} particles to fit a {n}-dimensional Gaussian, got {m}"
        )));
    }
    if !linalg::all_finite(positions.iter()) {
        return Err(Error::NonFinite {
            what: "particle positions",
            index: 0,
        });
    }
    let mut mean = Row::zeros(n);
    for i in 0..m {
        mean += positions.row(i);
    }
    mean /= m as f64;
    let mut cov = Mat::zeros(n, n);
    for i in 0..m {
        let d = positions.row(i) - &mean;
        cov += d.transpose() * &d;
    }
    cov /= (m - 1) as f64;
    let cov = linalg::symmetrize(&cov);
    let eig = SymmetricEigen::new(cov.clone()).eigenvalues;
    let top = eig.max();
    let degenerate = top <= 0.0 || eig.min() <= FIT_REGULARIZATION * top;
    let reg = cov + Mat::identity(n, n) * FIT_REGULARIZATION;
    Ok(GaussianFit {
        mean,
        cov: SymmetricPd::new(reg)?,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::NoiseBatch;
    use crate::linalg::row_from;

    fn random_spd(seed: u64, n: usize) -> Mat {
        let z = NoiseBatch::standard(seed, 7, n, n).z;
        &z * z.transpose() + Mat::identity(n, n) * 0.3
    }

    fn diag(v: &[f64]) -> Mat {
        Mat::from_diagonal(&DVector::from_row_slice(v))
    }

    #[test]
    fn sqrtm_examples() {
        assert_eq!(sqrtm_psd(&Mat::identity(3, 3)).unwrap(), Mat::identity(3, 3));
        let r = sqrtm_psd(&diag(&[4.0, 9.0])).unwrap();
        assert!((r - diag(&[2.0, 3.0])).amax() < 1e-15);
        for seed in 0..20 {
            let a = random_spd(seed, 4);
            let r = sqrtm_psd(&a).unwrap();
            assert!((&r * &r - &a).amax() < 1e-9 * a.amax());
        }
    }

    #[test]
    fn sqrtm_rejects_indefinite() {
        assert!(sqrtm_psd(&diag(&[1.0, -0.5])).is_err());
        // tiny negative rounding is clipped
        assert!(sqrtm_psd(&diag(&[1.0, -1e-14])).is_ok());
    }

    #[test]
    fn bures_examples() {
        assert_eq!(bures_distance_sq(&diag(&[2.0, 3.0]), &diag(&[2.0, 3.0])).unwrap(), 0.0);
        assert!((bures_distance_sq(&diag(&[4.0, 1.0]), &Mat::identity(2, 2)).unwrap() - 1.0).abs() < 1e-14);
        assert!((bures_distance_sq(&Mat::identity(2, 2), &(Mat::identity(2, 2) * 4.0)).unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn w2_mean_only() {
        let c = random_spd(1, 2);
        let w = w2_gaussian(&row_from(&[4.0, 2.0]), &c, &Row::zeros(2), &c).unwrap();
        assert!((w - 20f64.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn w2_matches_quantile_coupling_in_1d() {
        // W2^2 = int_0^1 (F^-1(u) - G^-1(u))^2 du; Gaussian quantiles are
        // affine in the standard normal quantile, so integrate over z.
        let (m1, s1, m2, s2) = (0.5, 1.3, -0.2, 0.7);
        let n = 200_000;
        let (a, b) = (-12.0, 12.0);
        let h = (b - a) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let z: f64 = a + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
            acc += w * pdf * ((m1 + s1 * z) - (m2 + s2 * z)).powi(2);
        }
        let oracle = (acc * h).sqrt();
        let w = w2_gaussian(
            &row_from(&[m1]),
            &Mat::from_element(1, 1, s1 * s1),
            &row_from(&[m2]),
            &Mat::from_element(1, 1, s2 * s2),
        )
        .unwrap();
        assert!((w - oracle).abs() < 1e-2);
    }

    #[test]
    fn dpi_examples() {
        let s = random_spd(2, 3);
        assert!((dpi(&s, &s) - (&s * s.transpose()) * 2.0).amax() < 1e-12);
        let skew = Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert_eq!(dpi(&Mat::identity(2, 2), &skew), Mat::zeros(2, 2));
        let x = NoiseBatch::standard(1, 0, 3, 3).z;
        assert!(linalg::asymmetry(&dpi(&s, &x)) < 1e-14);
    }

    #[test]
    fn horizontal_round_trip() {
        for seed in 0..20 {
            let s = NoiseBatch::standard(seed, 3, 3, 3).z + Mat::identity(3, 3) * 2.0;
            let r = NoiseBatch::standard(seed, 4, 3, 3).z;
            let h = linalg::symmetrize(&r);
            let dec = horizontal_projection(&s, &(&h * &s)).unwrap();
            assert!((&dec.h - &h).amax() < 1e-10);
            assert!(dec.vertical.norm() < 1e-10 * (&h * &s).norm());
        }
    }

    #[test]
    fn identity_split_is_sym_skew() {
        let skew = Mat::from_row_slice(2, 2, &[0.0, 1.5, -1.5, 0.0]);
        let dec = horizontal_projection(&Mat::identity(2, 2), &skew).unwrap();
        assert_eq!(dec.horizontal.amax(), 0.0);
        assert_eq!(dec.vertical, skew);
    }

    #[test]
    fn decomposition_invariants() {
        for seed in 0..20 {
            let s = NoiseBatch::standard(seed, 5, 3, 3).z + Mat::identity(3, 3) * 1.5;
            let x = NoiseBatch::standard(seed, 6, 3, 3).z;
            let dec = horizontal_projection(&s, &x).unwrap();
            let scale = x.norm_squared();
            assert!((&dec.horizontal + &dec.vertical - &x).amax() < 1e-10);
            assert!(dec.horizontal.dot(&dec.vertical).abs() < 1e-8 * scale);
            assert!(dpi(&s, &dec.vertical).amax() < 1e-8);
        }
    }

    #[test]
    fn riemannian_gradients_scalar_case() {
        let s = Mat::from_element(1, 1, 2.0);
        let g = Mat::from_element(1, 1, 1.5);
        assert!((riemannian_grad_bw(&s, &g).unwrap()[(0, 0)] - 0.75).abs() < 1e-15);
        assert!((riemannian_grad_q(&s, &g).unwrap()[(0, 0)] - 6.0).abs() < 1e-15);
        let skew = Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!(riemannian_grad_bw(&Mat::identity(2, 2), &skew).is_err());
    }

    #[test]
    fn submersion_isometry() {
        for seed in 0..20 {
            let s = NoiseBatch::standard(seed, 8, 3, 3).z + Mat::identity(3, 3) * 2.0;
            let h1 = linalg::symmetrize(&NoiseBatch::standard(seed, 9, 3, 3).z);
            let h2 = linalg::symmetrize(&NoiseBatch::standard(seed, 10, 3, 3).z);
            let (x, y) = (&h1 * &s, &h2 * &s);
            let sigma = &s * s.transpose();
            let lhs = (&h2 * &sigma * &h1).trace();
            let rhs = (x.transpose() * y).trace();
            assert!((lhs - rhs).abs() < 1e-9 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn ot_map_examples() {
        let a = random_spd(3, 3);
        assert!((ot_map(&a, &a).unwrap() - Mat::identity(3, 3)).amax() < 1e-10);
        let t = ot_map(&Mat::from_element(1, 1, 1.0), &Mat::from_element(1, 1, 4.0)).unwrap();
        assert!((t[(0, 0)] - 2.0).abs() < 1e-15);
        for seed in 0..20 {
            let (a, b) = (random_spd(seed, 3), random_spd(seed + 100, 3));
            let t = ot_map(&a, &b).unwrap();
            assert!((&t * &a * t.transpose() - &b).amax() < 1e-8 * b.amax());
            assert!(SymmetricPd::new(t).is_ok());
        }
    }

    #[test]
    fn geodesic_examples() {
        let (a, b) = (random_spd(4, 2), random_spd(5, 2));
        assert_eq!(geodesic(&a, &b, 0.0).unwrap(), linalg::symmetrize(&a));
        assert!((geodesic(&a, &b, 1.0).unwrap() - &b).amax() < 1e-9 * b.amax());
        let mid = geodesic(&Mat::identity(1, 1), &Mat::from_element(1, 1, 4.0), 0.5).unwrap();
        assert!((mid[(0, 0)] - 2.25).abs() < 1e-14);
        for t in [0.0, 0.3, 0.5, 1.0] {
            assert!((geodesic(&a, &a, t).unwrap() - &a).amax() < 1e-10);
            let s = horizontal_lift_geodesic(&a, &b, t).unwrap();
            let g = geodesic(&a, &b, t).unwrap();
            assert!((&s * s.transpose() - g).amax() < 1e-9);
        }
        assert!(geodesic(&a, &b, 1.5).is_err());
    }

    #[test]
    fn lift_length_is_bures_distance() {
        for seed in 0..10 {
            let (a, b) = (random_spd(seed, 3), random_spd(seed + 50, 3));
            let len = lift_length(&a, &b, 1000).unwrap();
            let d = bures_distance(&a, &b).unwrap();
            assert!((len - d).abs() < 1e-3 * d);
        }
    }

    #[test]
    fn fit_degenerate_cloud() {
        let cloud = Mat::from_fn(10, 2, |_, j| [1.5, -2.0][j]);
        let fit = empirical_gaussian_fit(&cloud).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.mean, row_from(&[1.5, -2.0]));
        assert_eq!(fit.cov.matrix(), &(Mat::identity(2, 2) * 1e-10));
        assert!(empirical_gaussian_fit(&Mat::zeros(2, 2)).is_err());
    }

    #[test]
    fn fit_standard_normal_cloud() {
        let z = NoiseBatch::standard(12, 0, 100_000, 2).z;
        let fit = empirical_gaussian_fit(&z).unwrap();
        assert!(!fit.degenerate);
        assert!(fit.mean.amax() < 0.02);
        assert!((fit.cov.matrix() - Mat::identity(2, 2)).amax() < 0.02);
    }

    #[test]
    fn fit_affine_cloud() {
        let n = 100_000;
        let z = NoiseBatch::standard(13, 0, n, 2).z;
        let s = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 2.0]);
        let mu = row_from(&[3.0, -1.0]);
        let mut x = &z * s.transpose();
        for i in 0..n {
            let r = x.row(i) + &mu;
            x.set_row(i, &r);
        }
        let fit = empirical_gaussian_fit(&x).unwrap();
        let cov = &s * s.transpose();
        // 5 standard errors of the mean / covariance entries
        assert!((&fit.mean - &mu).amax() < 5.0 * 2.1 / (n as f64).sqrt());
        assert!((fit.cov.matrix() - &cov).amax() < 5.0 * 4.5 * 2f64.sqrt() / (n as f64).sqrt());
    }
}
