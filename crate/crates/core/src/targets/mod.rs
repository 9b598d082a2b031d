//! Target distributions `p(x)`, known up to a normalizing constant, with
//! analytic scores.

mod data;

pub use data::{load_uci_csv, parse_uci_csv, CsvOptions, Dataset, UciSplit};

use crate::error::{Error, Result};
use crate::families::{Density, GaussianFactor, GaussianParams};
use crate::linalg::{self, log_sum_exp, outer, Mat, Row};

pub trait TargetDensity: Send + Sync {
    fn dim(&self) -> usize;

    fn log_density_unnorm(&self, x: &Row) -> f64;

    /// Gradient of [`TargetDensity::log_density_unnorm`].
    fn score(&self, x: &Row) -> Row;

    /// Hessian of the log density, when the target provides one.
    fn hessian(&self, _x: &Row) -> Option<Mat> {
        None
    }

    fn has_hessian(&self) -> bool {
        false
    }

    /// `log C` with `C = ∫ exp(log_density_unnorm)`, when known.
    fn log_normalizer(&self) -> Option<f64> {
        None
    }

    /// Closed-form Gaussian view, used for analytic expectations.
    fn as_gaussian(&self) -> Option<&GaussianTarget> {
        None
    }

    fn name(&self) -> String;
}

impl<T: TargetDensity + ?Sized> TargetDensity for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_density_unnorm(&self, x: &Row) -> f64 {
        (**self).log_density_unnorm(x)
    }
    fn score(&self, x: &Row) -> Row {
        (**self).score(x)
    }
    fn hessian(&self, x: &Row) -> Option<Mat> {
        (**self).hessian(x)
    }
    fn has_hessian(&self) -> bool {
        (**self).has_hessian()
    }
    fn log_normalizer(&self) -> Option<f64> {
        (**self).log_normalizer()
    }
    fn as_gaussian(&self) -> Option<&GaussianTarget> {
        (**self).as_gaussian()
    }
    fn name(&self) -> String {
        (**self).name()
    }
}

impl<T: TargetDensity + ?Sized> TargetDensity for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_density_unnorm(&self, x: &Row) -> f64 {
        (**self).log_density_unnorm(x)
    }
    fn score(&self, x: &Row) -> Row {
        (**self).score(x)
    }
    fn hessian(&self, x: &Row) -> Option<Mat> {
        (**self).hessian(x)
    }
    fn has_hessian(&self) -> bool {
        (**self).has_hessian()
    }
    fn log_normalizer(&self) -> Option<f64> {
        (**self).log_normalizer()
    }
    fn as_gaussian(&self) -> Option<&GaussianTarget> {
        (**self).as_gaussian()
    }
    fn name(&self) -> String {
        (**self).name()
    }
}

/// Normalized Gaussian target `N(mean, cov)`.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    factor: GaussianFactor,
    cov: Mat,
    precision: Mat,
}

impl GaussianTarget {
    pub fn new(mean: Row, cov: Mat) -> Result<Self> {
        linalg::check_square(&cov, "target covariance")?;
        linalg::check_len(cov.nrows(), mean.len(), "target covariance")?;
        if linalg::asymmetry(&cov) > 1e-10 * linalg::max_abs(&cov) {
            return Err(Error::InvalidArgument(
                "target covariance is not symmetric".into(),
            ));
        }
        let chol = linalg::cholesky_lower(&cov, "target covariance")?;
        let factor = GaussianFactor::new(mean, chol)?;
        let precision = factor.precision();
        Ok(Self {
            factor,
            cov,
            precision,
        })
    }

    pub fn standard(dim: usize) -> Self {
        Self::new(Row::zeros(dim), Mat::identity(dim, dim)).expect("identity is SPD")
    }

    pub fn mean(&self) -> &Row {
        self.factor.mean()
    }

    pub fn covariance(&self) -> &Mat {
        &self.cov
    }

    pub fn precision(&self) -> &Mat {
        &self.precision
    }

    /// The target as variational parameters (mean, lower Cholesky factor).
    /// A Gaussian family at these parameters evaluates bit-identically to
    /// the target.
    pub fn as_params(&self) -> GaussianParams {
        GaussianParams {
            mean: self.factor.mean().clone(),
            scale: self.factor.scale().clone(),
        }
    }
}

impl TargetDensity for GaussianTarget {
    fn dim(&self) -> usize {
        self.factor.dim()
    }

    fn log_density_unnorm(&self, x: &Row) -> f64 {
        self.factor.log_density(x)
    }

    fn score(&self, x: &Row) -> Row {
        self.factor.score(x)
    }

    fn hessian(&self, _x: &Row) -> Option<Mat> {
        Some(-self.precision.clone())
    }

    fn has_hessian(&self) -> bool {
        true
    }

    fn log_normalizer(&self) -> Option<f64> {
        Some(0.0)
    }

    fn as_gaussian(&self) -> Option<&GaussianTarget> {
        Some(self)
    }

    fn name(&self) -> String {
        "gaussian".into()
    }
}

/// Banana-shaped density `exp(-a (x1 - mu)^2 - b (x2 - x1^2)^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RosenbrockTarget {
    pub a: f64,
    pub b: f64,
    pub mu: f64,
}

impl RosenbrockTarget {
    pub fn new(a: f64, b: f64, mu: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && mu.is_finite()) {
            return Err(Error::InvalidArgument(
                "rosenbrock needs a > 0, b > 0 and finite mu".into(),
            ));
        }
        Ok(Self { a, b, mu })
    }
}

impl Default for RosenbrockTarget {
    fn default() -> Self {
        Self {
            a: 1.0,
            b: 1.0,
            mu: 1.0,
        }
    }
}

impl TargetDensity for RosenbrockTarget {
    fn dim(&self) -> usize {
        2
    }

    fn log_density_unnorm(&self, x: &Row) -> f64 {
        let (x1, x2) = (x[0], x[1]);
        -self.a * (x1 - self.mu).powi(2) - self.b * (x2 - x1 * x1).powi(2)
    }

    fn score(&self, x: &Row) -> Row {
        let (x1, x2) = (x[0], x[1]);
        let r = x2 - x1 * x1;
        linalg::row_from(&[
            -2.0 * self.a * (x1 - self.mu) + 4.0 * self.b * x1 * r,
            -2.0 * self.b * r,
        ])
    }

    fn hessian(&self, x: &Row) -> Option<Mat> {
        let (x1, x2) = (x[0], x[1]);
        let h11 = -2.0 * self.a + 4.0 * self.b * x2 - 12.0 * self.b * x1 * x1;
        let h12 = 4.0 * self.b * x1;
        Some(Mat::from_row_slice(2, 2, &[h11, h12, h12, -2.0 * self.b]))
    }

    fn has_hessian(&self) -> bool {
        true
    }

    // ∫ exp(-b (x2 - x1^2)^2) dx2 = sqrt(pi / b) for every x1.
    fn log_normalizer(&self) -> Option<f64> {
        Some((std::f64::consts::PI / (self.a * self.b).sqrt()).ln())
    }

    fn name(&self) -> String {
        "rosenbrock".into()
    }
}

/// Normalized Gaussian mixture `sum_k w_k N_k`.
#[derive(Debug, Clone)]
pub struct MixtureTarget {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    components: Vec<GaussianTarget>,
}

impl MixtureTarget {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianTarget>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidArgument("mixture target needs components".into()));
        }
        linalg::check_len(weights.len(), components.len(), "mixture weights")?;
        let dim = components[0].dim();
        for c in &components {
            linalg::check_len(c.dim(), dim, "mixture target component")?;
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument("mixture weights must be >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            weights,
            log_weights,
            components,
        })
    }

    /// `0.4 N(-1, 0.25) + 0.3 N(0.8, 0.25) + 0.3 N(3, 0.64)` (variances).
    pub fn trimodal_1d() -> Self {
        let c = |m: f64, v: f64| {
            GaussianTarget::new(linalg::row_from(&[m]), Mat::from_element(1, 1, v))
                .expect("positive variance")
        };
        Self::new(
            vec![0.4, 0.3, 0.3],
            vec![c(-1.0, 0.25), c(0.8, 0.25), c(3.0, 0.64)],
        )
        .expect("valid mixture")
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianTarget] {
        &self.components
    }

    fn joint_log(&self, x: &Row) -> Vec<f64> {
        self.components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw + c.log_density_unnorm(x))
            .collect()
    }

    fn responsibilities(&self, x: &Row) -> Vec<f64> {
        let joint = self.joint_log(x);
        let lse = log_sum_exp(&joint);
        joint.iter().map(|j| (j - lse).exp()).collect()
    }
}

/// `log sum_k w_k N_k(x)` evaluated with a max-shift.
pub fn mixture_target_logsumexp(target: &MixtureTarget, x: &Row) -> f64 {
    log_sum_exp(&target.joint_log(x))
}

impl TargetDensity for MixtureTarget {
    fn dim(&self) -> usize {
        self.components[0].dim()
    }

    fn log_density_unnorm(&self, x: &Row) -> f64 {
        mixture_target_logsumexp(self, x)
    }

    fn score(&self, x: &Row) -> Row {
        let resp = self.responsibilities(x);
        let mut s = Row::zeros(self.dim());
        for (c, r) in self.components.iter().zip(resp) {
            s += c.score(x) * r;
        }
        s
    }

    // sum_k r_k (H_k + s_k^T s_k) - s^T s
    fn hessian(&self, x: &Row) -> Option<Mat> {
        let resp = self.responsibilities(x);
        let n = self.dim();
        let mut h = Mat::zeros(n, n);
        let mut s = Row::zeros(n);
        for (c, r) in self.components.iter().zip(resp) {
            let sk = c.score(x);
            h += (-c.precision() + outer(&sk, &sk)) * r;
            s += sk * r;
        }
        Some(h - outer(&s, &s))
    }

    fn has_hessian(&self) -> bool {
        true
    }

    fn log_normalizer(&self) -> Option<f64> {
        Some(0.0)
    }

    fn name(&self) -> String {
        "mixture".into()
    }
}

/// Bayesian logistic-regression posterior over `(weights, bias)` with an
/// isotropic Gaussian prior.
#[derive(Debug, Clone)]
pub struct LogisticPosterior {
    rows: Vec<f64>,
    n_features: usize,
    labels: Vec<f64>,
    prior_variance: f64,
}

/// `log sigma(t)` without overflow for large `|t|`.
pub fn log_sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        -(-t).exp().ln_1p()
    } else {
        t - t.exp().ln_1p()
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl LogisticPosterior {
    pub fn new(features: &Mat, labels: &[f64], prior_variance: f64) -> Result<Self> {
        linalg::check_len(labels.len(), features.nrows(), "labels")?;
        if !(prior_variance > 0.0) {
            return Err(Error::InvalidArgument("prior variance must be > 0".into()));
        }
        if labels.iter().any(|y| *y != 1.0 && *y != -1.0) {
            return Err(Error::InvalidArgument("labels must be -1 or +1".into()));
        }
        let n_features = features.ncols();
        let mut rows = Vec::with_capacity(features.len());
        for i in 0..features.nrows() {
            rows.extend(features.row(i).iter());
        }
        Ok(Self {
            rows,
            n_features,
            labels: labels.to_vec(),
            prior_variance,
        })
    }

    pub fn from_dataset(data: &Dataset, prior_variance: f64) -> Result<Self> {
        Self::new(&data.features, &data.labels, prior_variance)
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Linear predictor `x . w_feat + w_bias`.
    pub fn logit(w: &Row, features: &[f64]) -> f64 {
        let d = features.len();
        features
            .iter()
            .zip(w.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + w[d]
    }
}

impl TargetDensity for LogisticPosterior {
    fn dim(&self) -> usize {
        self.n_features + 1
    }

    fn log_density_unnorm(&self, w: &Row) -> f64 {
        let mut acc = -w.norm_squared() / (2.0 * self.prior_variance);
        for i in 0..self.n_rows() {
            acc += log_sigmoid(self.labels[i] * Self::logit(w, self.row(i)));
        }
        acc
    }

    fn score(&self, w: &Row) -> Row {
        let d = self.n_features;
        let mut g = -(w / self.prior_variance);
        for i in 0..self.n_rows() {
            let y = self.labels[i];
            let x = self.row(i);
            let c = y * sigmoid(-y * Self::logit(w, x));
            for j in 0..d {
                g[j] += c * x[j];
            }
            g[d] += c;
        }
        g
    }

    fn hessian(&self, w: &Row) -> Option<Mat> {
        let d = self.n_features;
        let mut h = -Mat::identity(d + 1, d + 1) / self.prior_variance;
        let mut xt = Row::zeros(d + 1);
        xt[d] = 1.0;
        for i in 0..self.n_rows() {
            let x = self.row(i);
            let z = Self::logit(w, x);
            let c = sigmoid(z) * sigmoid(-z);
            for j in 0..d {
                xt[j] = x[j];
            }
            h -= outer(&xt, &xt) * c;
        }
        Some(h)
    }

    fn has_hessian(&self) -> bool {
        true
    }

    fn name(&self) -> String {
        "logistic_posterior".into()
    }
}

/// `C * p(x)`: shifts the log density by `log C` and leaves the score alone.
#[derive(Debug, Clone)]
pub struct ScaledTarget<T> {
    pub inner: T,
    pub log_scale: f64,
}

impl<T: TargetDensity> TargetDensity for ScaledTarget<T> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn log_density_unnorm(&self, x: &Row) -> f64 {
        self.inner.log_density_unnorm(x) + self.log_scale
    }
    fn score(&self, x: &Row) -> Row {
        self.inner.score(x)
    }
    fn hessian(&self, x: &Row) -> Option<Mat> {
        self.inner.hessian(x)
    }
    fn has_hessian(&self) -> bool {
        self.inner.has_hessian()
    }
    fn log_normalizer(&self) -> Option<f64> {
        self.inner.log_normalizer().map(|l| l + self.log_scale)
    }
    fn as_gaussian(&self) -> Option<&GaussianTarget> {
        // The log density no longer matches the Gaussian view.
        None
    }
    fn name(&self) -> String {
        format!("scaled({})", self.inner.name())
    }
}

/// Largest relative disagreement between the analytic score and central
/// differences of the log density, `max_i |s_i - fd_i| / (1 + |s_i|)`.
pub fn score_finite_diff_check<T: TargetDensity + ?Sized>(
    target: &T,
    x: &Row,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("step h must be > 0".into()));
    }
    if !linalg::all_finite(x.iter()) {
        return Err(Error::InvalidArgument("x must be finite".into()));
    }
    let score = target.score(x);
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        let (lp, lm) = (target.log_density_unnorm(&xp), target.log_density_unnorm(&xm));
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::NonFinite {
                what: "log density at perturbed coordinate",
                index: i,
            });
        }
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max((score[i] - fd).abs() / (1.0 + score[i].abs()));
    }
    Ok(worst)
}
