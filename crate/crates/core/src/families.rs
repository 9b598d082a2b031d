//! Reparameterized variational families: full-scale Gaussian, diagonal
//! Gaussian and Gaussian mixture, plus the seeded noise batches that drive
//! every Monte Carlo estimate.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    self, check_len, check_square, log_sum_exp, mat_from_rows, mat_to_rows, Inverse, Mat, Row,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Density and score of a variational distribution at a point.
pub trait Density: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &Row) -> f64;
    fn score(&self, x: &Row) -> Row;
}

/// Standard-normal draws `z`, reproducible from `(seed, stream_id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBatch {
    pub z: Mat,
    pub seed: u64,
    pub stream_id: u64,
}

impl NoiseBatch {
    pub fn standard(seed: u64, stream_id: u64, samples: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        let mut z = Mat::zeros(samples, dim);
        for i in 0..samples {
            for j in 0..dim {
                z[(i, j)] = StandardNormal.sample(&mut rng);
            }
        }
        Self { z, seed, stream_id }
    }

    /// Wraps explicit draws (tests, shared-noise twin runs).
    pub fn from_matrix(z: Mat) -> Self {
        Self {
            z,
            seed: 0,
            stream_id: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn row(&self, i: usize) -> Row {
        self.z.row(i).into_owned()
    }
}

/// Packs a step index and a lane (component, arm, ...) into one stream id.
pub fn stream_id(step: u64, lane: u64) -> u64 {
    (step << 16) | (lane & 0xffff)
}

/// Gaussian `N(mean, S S^T)` with an unconstrained nonsingular scale `S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "GaussianJson", try_from = "GaussianJson")]
pub struct GaussianParams {
    pub mean: Row,
    pub scale: Mat,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianJson {
    mean: Vec<f64>,
    scale: Vec<Vec<f64>>,
}

impl From<GaussianParams> for GaussianJson {
    fn from(p: GaussianParams) -> Self {
        Self {
            mean: p.mean.iter().copied().collect(),
            scale: mat_to_rows(&p.scale),
        }
    }
}

impl TryFrom<GaussianJson> for GaussianParams {
    type Error = Error;
    fn try_from(j: GaussianJson) -> Result<Self> {
        GaussianParams::new(linalg::row_from(&j.mean), mat_from_rows(&j.scale)?)
    }
}

impl GaussianParams {
    pub fn new(mean: Row, scale: Mat) -> Result<Self> {
        check_square(&scale, "scale")?;
        check_len(scale.nrows(), mean.len(), "scale")?;
        Ok(Self { mean, scale })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: Row::zeros(dim),
            scale: Mat::identity(dim, dim),
        }
    }

    /// Uses the lower Cholesky factor of `cov` as the scale.
    pub fn from_mean_cov(mean: Row, cov: &Mat) -> Result<Self> {
        let scale = linalg::cholesky_lower(cov, "covariance")?;
        Self::new(mean, scale)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> Mat {
        &self.scale * self.scale.transpose()
    }

    pub fn condition_number(&self) -> f64 {
        linalg::condition_number(&self.scale)
    }

    pub fn factor(&self) -> Result<GaussianFactor> {
        GaussianFactor::new(self.mean.clone(), self.scale.clone())
    }

    /// `mean + z * S^T`.
    pub fn sample_row(&self, z: &Row) -> Row {
        &self.mean + z * self.scale.transpose()
    }

    pub fn reparameterize(&self, noise: &NoiseBatch) -> Result<Mat> {
        check_len(noise.dim(), self.dim(), "noise")?;
        let mut out = Mat::zeros(noise.len(), self.dim());
        for i in 0..noise.len() {
            out.set_row(i, &self.sample_row(&noise.row(i)));
        }
        Ok(out)
    }

    pub fn log_density(&self, x: &Row) -> Result<f64> {
        Ok(self.factor()?.log_density(x))
    }

    pub fn score(&self, x: &Row) -> Result<Row> {
        Ok(self.factor()?.score(x))
    }

    /// `-S^{-T} S^{-1}`, constant in `x`.
    pub fn hessian_log_q(&self) -> Result<Mat> {
        Ok(-self.factor()?.precision())
    }
}

/// A Gaussian with its scale inverted once, for repeated evaluation.
///
/// Both the variational family and the Gaussian target evaluate through this
/// type, so a target and a variational distribution with identical
/// `(mean, scale)` produce bit-identical log densities and scores.
#[derive(Debug, Clone)]
pub struct GaussianFactor {
    mean: Row,
    scale: Mat,
    scale_inv: Mat,
    scale_inv_t: Mat,
    log_abs_det: f64,
}

impl GaussianFactor {
    pub fn new(mean: Row, scale: Mat) -> Result<Self> {
        check_square(&scale, "scale")?;
        check_len(scale.nrows(), mean.len(), "scale")?;
        let inv = Inverse::new(&scale, "scale")?;
        let scale_inv_t = inv.inverse.transpose();
        Ok(Self {
            mean,
            scale,
            scale_inv: inv.inverse,
            scale_inv_t,
            log_abs_det: inv.log_abs_det,
        })
    }

    pub fn mean(&self) -> &Row {
        &self.mean
    }

    pub fn scale(&self) -> &Mat {
        &self.scale
    }

    pub fn scale_inv(&self) -> &Mat {
        &self.scale_inv
    }

    pub fn log_abs_det_scale(&self) -> f64 {
        self.log_abs_det
    }

    /// `(x - mean) * S^{-T}`; recovers `z` for a reparameterized sample.
    pub fn whiten(&self, x: &Row) -> Row {
        (x - &self.mean) * &self.scale_inv_t
    }

    pub fn precision(&self) -> Mat {
        &self.scale_inv_t * &self.scale_inv
    }

    pub fn covariance(&self) -> Mat {
        &self.scale * self.scale.transpose()
    }

    pub fn hessian(&self) -> Mat {
        -self.precision()
    }
}

impl Density for GaussianFactor {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, x: &Row) -> f64 {
        let z = self.whiten(x);
        -0.5 * z.norm_squared() - self.log_abs_det - 0.5 * self.dim() as f64 * LN_2PI
    }

    fn score(&self, x: &Row) -> Row {
        -(self.whiten(x) * &self.scale_inv)
    }
}

/// Mean-field Gaussian with `std = exp(log_std)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "DiagJson", try_from = "DiagJson")]
pub struct DiagGaussianParams {
    pub mean: Row,
    pub log_std: Row,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiagJson {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

impl From<DiagGaussianParams> for DiagJson {
    fn from(p: DiagGaussianParams) -> Self {
        Self {
            mean: p.mean.iter().copied().collect(),
            log_std: p.log_std.iter().copied().collect(),
        }
    }
}

impl TryFrom<DiagJson> for DiagGaussianParams {
    type Error = Error;
    fn try_from(j: DiagJson) -> Result<Self> {
        DiagGaussianParams::new(linalg::row_from(&j.mean), linalg::row_from(&j.log_std))
    }
}

impl DiagGaussianParams {
    pub fn new(mean: Row, log_std: Row) -> Result<Self> {
        check_len(log_std.len(), mean.len(), "log_std")?;
        Ok(Self { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: Row::zeros(dim),
            log_std: Row::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Row {
        self.log_std.map(f64::exp)
    }

    pub fn covariance(&self) -> Mat {
        Mat::from_diagonal(&self.std().map(|s| s * s).transpose())
    }

    pub fn sample_row(&self, z: &Row) -> Row {
        &self.mean + z.component_mul(&self.std())
    }

    pub fn reparameterize(&self, noise: &NoiseBatch) -> Result<Mat> {
        check_len(noise.dim(), self.dim(), "noise")?;
        let mut out = Mat::zeros(noise.len(), self.dim());
        for i in 0..noise.len() {
            out.set_row(i, &self.sample_row(&noise.row(i)));
        }
        Ok(out)
    }

    pub fn hessian_log_q(&self) -> Mat {
        Mat::from_diagonal(&self.log_std.map(|l| -(-2.0 * l).exp()).transpose())
    }
}

impl Density for DiagGaussianParams {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, x: &Row) -> f64 {
        let mut acc = -0.5 * self.dim() as f64 * LN_2PI;
        for j in 0..self.dim() {
            let z = (x[j] - self.mean[j]) * (-self.log_std[j]).exp();
            acc -= 0.5 * z * z + self.log_std[j];
        }
        acc
    }

    fn score(&self, x: &Row) -> Row {
        Row::from_fn(self.dim(), |_, j| {
            -(x[j] - self.mean[j]) * (-2.0 * self.log_std[j]).exp()
        })
    }
}

/// Gaussian mixture with softmax-parameterized weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "MixtureJson", try_from = "MixtureJson")]
pub struct MixtureParams {
    pub logits: DVector<f64>,
    pub components: Vec<GaussianParams>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureJson {
    logits: Vec<f64>,
    components: Vec<GaussianParams>,
}

impl From<MixtureParams> for MixtureJson {
    fn from(p: MixtureParams) -> Self {
        Self {
            logits: p.logits.iter().copied().collect(),
            components: p.components,
        }
    }
}

impl TryFrom<MixtureJson> for MixtureParams {
    type Error = Error;
    fn try_from(j: MixtureJson) -> Result<Self> {
        MixtureParams::new(DVector::from_vec(j.logits), j.components)
    }
}

impl MixtureParams {
    pub fn new(logits: DVector<f64>, components: Vec<GaussianParams>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidArgument(
                "mixture needs at least one component".into(),
            ));
        }
        check_len(logits.len(), components.len(), "logits")?;
        let dim = components[0].dim();
        for c in &components {
            check_len(c.dim(), dim, "mixture component")?;
        }
        Ok(Self { logits, components })
    }

    /// Uniform weights, identity scales, means drawn from `N(0, 4 I)`.
    pub fn random_init(k: usize, dim: usize, seed: u64) -> Result<Self> {
        let noise = NoiseBatch::standard(seed, u64::MAX, k, dim);
        let components = (0..k)
            .map(|i| GaussianParams {
                mean: noise.row(i) * 2.0,
                scale: Mat::identity(dim, dim),
            })
            .collect();
        Self::new(DVector::zeros(k), components)
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn log_weights(&self) -> DVector<f64> {
        let lse = log_sum_exp(self.logits.as_slice());
        self.logits.map(|l| l - lse)
    }

    pub fn weights(&self) -> DVector<f64> {
        self.log_weights().map(f64::exp)
    }

    pub fn factor(&self) -> Result<MixtureFactor> {
        let components = self
            .components
            .iter()
            .map(GaussianParams::factor)
            .collect::<Result<Vec<_>>>()?;
        Ok(MixtureFactor {
            log_weights: self.log_weights(),
            components,
        })
    }

    /// Reparameterized draws from component `k` only.
    pub fn component_sample(&self, k: usize, noise: &NoiseBatch) -> Result<Mat> {
        let c = self.components.get(k).ok_or_else(|| {
            Error::InvalidArgument(format!("component {k} out of range (K = {})", self.k()))
        })?;
        c.reparameterize(noise)
    }

    pub fn log_density(&self, x: &Row) -> Result<f64> {
        Ok(self.factor()?.log_density(x))
    }

    pub fn score(&self, x: &Row) -> Result<Row> {
        Ok(self.factor()?.score(x))
    }
}

#[derive(Debug, Clone)]
pub struct MixtureFactor {
    log_weights: DVector<f64>,
    components: Vec<GaussianFactor>,
}

impl MixtureFactor {
    pub fn log_weights(&self) -> &DVector<f64> {
        &self.log_weights
    }

    pub fn components(&self) -> &[GaussianFactor] {
        &self.components
    }

    /// Posterior component probabilities `m_k q_k(x) / q(x)`.
    pub fn responsibilities(&self, x: &Row) -> Vec<f64> {
        let joint = self.joint_log(x);
        let lse = log_sum_exp(&joint);
        joint.iter().map(|j| (j - lse).exp()).collect()
    }

    fn joint_log(&self, x: &Row) -> Vec<f64> {
        self.components
            .iter()
            .zip(self.log_weights.iter())
            .map(|(c, lw)| lw + c.log_density(x))
            .collect()
    }
}

impl Density for MixtureFactor {
    fn dim(&self) -> usize {
        self.components[0].dim()
    }

    fn log_density(&self, x: &Row) -> f64 {
        log_sum_exp(&self.joint_log(x))
    }

    fn score(&self, x: &Row) -> Row {
        if self.components.len() == 1 {
            return self.components[0].score(x);
        }
        let resp = self.responsibilities(x);
        let mut s = Row::zeros(self.dim());
        for (c, r) in self.components.iter().zip(resp) {
            s += c.score(x) * r;
        }
        s
    }
}

/// Any supported variational family, tagged for JSON round trips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FamilyParams {
    Gaussian(GaussianParams),
    Diag(DiagGaussianParams),
    Mixture(MixtureParams),
}

impl FamilyParams {
    pub fn dim(&self) -> usize {
        match self {
            FamilyParams::Gaussian(p) => p.dim(),
            FamilyParams::Diag(p) => p.dim(),
            FamilyParams::Mixture(p) => p.dim(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("parameters serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Mean and covariance for the single-Gaussian families.
    pub fn gaussian_moments(&self) -> Option<(Row, Mat)> {
        match self {
            FamilyParams::Gaussian(p) => Some((p.mean.clone(), p.covariance())),
            FamilyParams::Diag(p) => Some((p.mean.clone(), p.covariance())),
            FamilyParams::Mixture(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::row_from;
    use proptest::prelude::*;

    fn fd_score(d: &dyn Density, x: &Row) -> Row {
        let h = 1e-5;
        Row::from_fn(x.len(), |_, j| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            (d.log_density(&xp) - d.log_density(&xm)) / (2.0 * h)
        })
    }

    fn rel_err(a: &Row, b: &Row) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs() / (1.0 + x.abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn reparameterize_zero_noise_gives_mean() {
        let p = GaussianParams::new(row_from(&[1.0, -2.0]), Mat::identity(2, 2) * 3.0).unwrap();
        let x = p
            .reparameterize(&NoiseBatch::from_matrix(Mat::zeros(3, 2)))
            .unwrap();
        for i in 0..3 {
            assert_eq!(x.row(i).into_owned(), p.mean);
        }
    }

    #[test]
    fn reparameterize_identity_returns_noise() {
        let p = GaussianParams::standard(3);
        let noise = NoiseBatch::standard(1, 2, 5, 3);
        assert_eq!(p.reparameterize(&noise).unwrap(), noise.z);
    }

    #[test]
    fn reparameterize_hand_example() {
        let p = GaussianParams::new(
            Row::zeros(2),
            Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 2.0]),
        )
        .unwrap();
        let x = p.sample_row(&row_from(&[1.0, 1.0]));
        assert_eq!(x, row_from(&[1.0, 2.5]));
    }

    #[test]
    fn reparameterize_dimension_mismatch() {
        let p = GaussianParams::standard(2);
        let noise = NoiseBatch::standard(0, 0, 4, 3);
        assert!(matches!(
            p.reparameterize(&noise),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn standard_normal_log_density_at_origin() {
        let p = GaussianParams::standard(3);
        let ld = p.log_density(&Row::zeros(3)).unwrap();
        assert!((ld + 1.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
        assert_eq!(p.score(&Row::zeros(3)).unwrap(), Row::zeros(3));
    }

    #[test]
    fn one_dimensional_score_by_hand() {
        let p = GaussianParams::new(Row::zeros(1), Mat::from_element(1, 1, 2.0)).unwrap();
        let s = p.score(&row_from(&[2.0])).unwrap();
        assert!((s[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn singular_scale_is_rejected() {
        let p = GaussianParams::new(Row::zeros(2), Mat::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]))
            .unwrap();
        assert!(matches!(p.factor(), Err(Error::Singular(_))));
    }

    #[test]
    fn hessian_is_negative_precision() {
        let p = GaussianParams::new(
            Row::zeros(2),
            Mat::from_row_slice(2, 2, &[2.0, 0.3, -0.4, 1.0]),
        )
        .unwrap();
        let h = p.hessian_log_q().unwrap();
        let cov = p.covariance();
        assert!(linalg::max_abs(&(&h * &cov + Mat::identity(2, 2))) < 1e-12);
    }

    #[test]
    fn mixture_single_component_matches_gaussian() {
        let g = GaussianParams::new(
            row_from(&[0.3, -0.2]),
            Mat::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.7]),
        )
        .unwrap();
        let m = MixtureParams::new(DVector::from_element(1, 4.2), vec![g.clone()]).unwrap();
        let x = row_from(&[0.9, 1.1]);
        assert_eq!(m.log_density(&x).unwrap(), g.log_density(&x).unwrap());
        assert_eq!(m.score(&x).unwrap(), g.score(&x).unwrap());
    }

    #[test]
    fn mixture_symmetric_score_vanishes() {
        let comps = vec![
            GaussianParams::new(row_from(&[1.0]), Mat::identity(1, 1)).unwrap(),
            GaussianParams::new(row_from(&[-1.0]), Mat::identity(1, 1)).unwrap(),
        ];
        let m = MixtureParams::new(DVector::zeros(2), comps).unwrap();
        assert!(m.score(&row_from(&[0.0])).unwrap()[0].abs() < 1e-15);
    }

    #[test]
    fn mixture_score_matches_finite_difference() {
        let comps = vec![
            GaussianParams::new(row_from(&[-0.5]), Mat::from_element(1, 1, 0.7)).unwrap(),
            GaussianParams::new(row_from(&[1.5]), Mat::from_element(1, 1, 1.3)).unwrap(),
        ];
        let m = MixtureParams::new(DVector::from_vec(vec![0.2, -0.4]), comps).unwrap();
        let f = m.factor().unwrap();
        for x in [-2.0, -0.3, 0.4, 1.0, 2.7] {
            let x = row_from(&[x]);
            assert!(rel_err(&f.score(&x), &fd_score(&f, &x)) < 1e-6);
        }
    }

    #[test]
    fn mixture_weights_on_simplex() {
        let m = MixtureParams::random_init(5, 2, 3).unwrap();
        let mut m = m;
        m.logits = DVector::from_vec(vec![300.0, -2.0, 0.0, 1.0, 700.0]);
        let w = m.weights();
        assert!((w.sum() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn component_sample_matches_reparameterize_and_ignores_weights() {
        let mut m = MixtureParams::random_init(3, 2, 11).unwrap();
        let noise = NoiseBatch::standard(5, 1, 10, 2);
        let a = m.component_sample(1, &noise).unwrap();
        assert_eq!(a, m.components[1].reparameterize(&noise).unwrap());
        m.logits[0] += 3.7;
        let b = m.component_sample(1, &noise).unwrap();
        assert_eq!(a, b);
        assert!(m.component_sample(3, &noise).is_err());
    }

    #[test]
    fn component_sample_mean_within_clt_bound() {
        let m = MixtureParams::random_init(2, 1, 17).unwrap();
        let noise = NoiseBatch::standard(9, 0, 100_000, 1);
        let x = m.component_sample(0, &noise).unwrap();
        let mean = x.column(0).mean();
        let bound = 4.0 * 1.0 / (100_000f64).sqrt();
        assert!((mean - m.components[0].mean[0]).abs() < bound);
    }

    #[test]
    fn noise_is_reproducible() {
        let a = NoiseBatch::standard(42, 7, 20, 3);
        let b = NoiseBatch::standard(42, 7, 20, 3);
        let c = NoiseBatch::standard(42, 8, 20, 3);
        assert_eq!(a, b);
        assert_ne!(a.z, c.z);
    }

    #[test]
    fn empirical_covariance_matches_scale() {
        let s = Mat::from_row_slice(2, 2, &[1.2, 0.0, -0.6, 0.8]);
        let p = GaussianParams::new(row_from(&[1.0, 2.0]), s).unwrap();
        let n = 100_000;
        let x = p.reparameterize(&NoiseBatch::standard(3, 3, n, 2)).unwrap();
        let cov = p.covariance();
        let mean = Row::from_fn(2, |_, j| x.column(j).mean());
        for a in 0..2 {
            for b in 0..2 {
                let prods: Vec<f64> = (0..n)
                    .map(|i| (x[(i, a)] - mean[a]) * (x[(i, b)] - mean[b]))
                    .collect();
                let m = prods.iter().sum::<f64>() / n as f64;
                let var = prods.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
                let se = (var / n as f64).sqrt();
                assert!((m - cov[(a, b)]).abs() < 5.0 * se, "entry {a}{b}");
            }
        }
    }

    #[test]
    fn zero_mean_score_identity_for_mean_parameter() {
        // grad_mu log q(x) = (x - mu) Sigma^{-1} has zero expectation under q.
        let p = GaussianParams::new(
            row_from(&[0.5, -1.0]),
            Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.4, 0.6]),
        )
        .unwrap();
        let f = p.factor().unwrap();
        let n = 100_000;
        let x = p.reparameterize(&NoiseBatch::standard(8, 0, n, 2)).unwrap();
        let vals: Vec<Row> = (0..n)
            .map(|i| -f.score(&x.row(i).into_owned()))
            .collect();
        for j in 0..2 {
            let m = vals.iter().map(|v| v[j]).sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v[j] - m).powi(2)).sum::<f64>() / n as f64;
            assert!(m.abs() < 4.0 * (var / n as f64).sqrt());
        }
    }

    #[test]
    fn mixture_density_integrates_to_one() {
        let comps = vec![
            GaussianParams::new(row_from(&[-1.0]), Mat::from_element(1, 1, 0.5)).unwrap(),
            GaussianParams::new(row_from(&[2.0]), Mat::from_element(1, 1, 1.5)).unwrap(),
        ];
        let m = MixtureParams::new(DVector::from_vec(vec![0.3, -0.3]), comps)
            .unwrap()
            .factor()
            .unwrap();
        let (a, b, n) = (-15.0, 15.0, 30_000);
        let h = (b - a) / n as f64;
        let total: f64 = (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * m.log_density(&row_from(&[a + i as f64 * h])).exp()
            })
            .sum::<f64>()
            * h;
        assert!((total - 1.0).abs() < 1e-4);
    }

    #[test]
    fn diag_log_density_matches_full() {
        let d = DiagGaussianParams::new(row_from(&[0.5, -1.0]), row_from(&[0.2, -0.3])).unwrap();
        let std = d.std();
        let g = GaussianParams::new(
            d.mean.clone(),
            Mat::from_diagonal(&std.transpose()),
        )
        .unwrap();
        let x = row_from(&[1.0, 0.1]);
        assert!((d.log_density(&x) - g.log_density(&x).unwrap()).abs() < 1e-13);
        assert!((d.score(&x) - g.score(&x).unwrap()).norm() < 1e-13);
    }

    #[test]
    fn json_round_trip_mixture() {
        let p = FamilyParams::Mixture(MixtureParams::random_init(3, 2, 1).unwrap());
        let s = p.to_json();
        assert!(s.contains("\"family\":\"mixture\""));
        assert_eq!(FamilyParams::from_json(&s).unwrap(), p);
    }

    proptest! {
        #[test]
        fn gaussian_json_round_trip_exact(vals in proptest::collection::vec(-1e3f64..1e3, 6)) {
            let p = FamilyParams::Gaussian(GaussianParams::new(
                row_from(&vals[..2]),
                Mat::from_row_slice(2, 2, &vals[2..]),
            ).unwrap());
            prop_assert_eq!(FamilyParams::from_json(&p.to_json()).unwrap(), p);
        }

        #[test]
        fn gaussian_score_matches_finite_difference(
            m in proptest::collection::vec(-2.0f64..2.0, 2),
            s in proptest::collection::vec(-1.0f64..1.0, 4),
            x in proptest::collection::vec(-3.0f64..3.0, 2),
        ) {
            let scale = Mat::from_row_slice(2, 2, &s) + Mat::identity(2, 2) * 2.5;
            let f = GaussianParams::new(row_from(&m), scale).unwrap().factor().unwrap();
            let x = row_from(&x);
            prop_assert!(rel_err(&f.score(&x), &fd_score(&f, &x)) < 1e-5);
        }

        #[test]
        fn diag_score_matches_finite_difference(
            m in proptest::collection::vec(-2.0f64..2.0, 3),
            l in proptest::collection::vec(-0.5f64..0.5, 3),
            x in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let d = DiagGaussianParams::new(row_from(&m), row_from(&l)).unwrap();
            let x = row_from(&x);
            prop_assert!(rel_err(&d.score(&x), &fd_score(&d, &x)) < 1e-5);
        }
    }
}
