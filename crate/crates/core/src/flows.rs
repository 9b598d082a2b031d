//! Continuous-time dynamics: the Bures-Wasserstein ODE for Gaussians in
//! covariance and scale coordinates, forward Euler integration, Langevin
//! particles, the f-divergence probability-flow field and distillation.

use crate::divergences::FDivergence;
use crate::error::{Error, Result};
use crate::families::{stream_id, Density, FamilyParams, GaussianFactor, GaussianParams, NoiseBatch};
use crate::geometry::{empirical_gaussian_fit, GaussianFit};
use crate::gradients::{
    gaussian_closed_form_path_gradient, path_gradient, DiagGrad, GaussianGrad, GradEstimate,
    ParamGrad, PathOptions,
};
use crate::linalg::{self, check_len, outer, Mat, Row};
use crate::parallel::ordered_map;
use crate::targets::{GaussianTarget, TargetDensity};

/// Gaussian state of a flow, in covariance or scale coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum FlowState {
    Covariance { mean: Row, cov: Mat, t: f64 },
    Scale { mean: Row, scale: Mat, t: f64 },
}

impl FlowState {
    pub fn covariance_from(params: &GaussianParams) -> Self {
        FlowState::Covariance {
            mean: params.mean.clone(),
            cov: linalg::symmetrize(&params.covariance()),
            t: 0.0,
        }
    }

    pub fn scale_from(params: &GaussianParams) -> Self {
        FlowState::Scale {
            mean: params.mean.clone(),
            scale: params.scale.clone(),
            t: 0.0,
        }
    }

    pub fn mean(&self) -> &Row {
        match self {
            FlowState::Covariance { mean, .. } | FlowState::Scale { mean, .. } => mean,
        }
    }

    pub fn t(&self) -> f64 {
        match self {
            FlowState::Covariance { t, .. } | FlowState::Scale { t, .. } => *t,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean().len()
    }

    pub fn covariance(&self) -> Mat {
        match self {
            FlowState::Covariance { cov, .. } => cov.clone(),
            FlowState::Scale { scale, .. } => scale * scale.transpose(),
        }
    }

    /// Variational parameters of the state; covariance states use their
    /// lower Cholesky factor as the scale.
    pub fn to_params(&self) -> Result<GaussianParams> {
        match self {
            FlowState::Covariance { mean, cov, .. } => GaussianParams::from_mean_cov(mean.clone(), cov),
            FlowState::Scale { mean, scale, .. } => GaussianParams::new(mean.clone(), scale.clone()),
        }
    }

    fn factor(&self) -> Result<GaussianFactor> {
        self.to_params()?.factor()
    }

    pub fn to_json(&self) -> String {
        let row: Vec<f64> = self.mean().iter().copied().collect();
        let v = match self {
            FlowState::Covariance { cov, t, .. } => serde_json::json!({
                "mean": row, "cov": linalg::mat_to_rows(cov), "t": t
            }),
            FlowState::Scale { scale, t, .. } => serde_json::json!({
                "mean": row, "scale": linalg::mat_to_rows(scale), "t": t
            }),
        };
        v.to_string()
    }
}

/// How expectations under `q` are evaluated.
#[derive(Debug, Clone, Copy)]
pub enum Expectation<'a> {
    MonteCarlo(&'a NoiseBatch),
    /// Closed-form Gaussian moments; needs a Gaussian target.
    Analytic,
}

/// Time derivative of `(mean, matrix)` where the matrix is `Sigma` or `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rhs {
    pub d_mean: Row,
    pub d_matrix: Mat,
}

fn gaussian_target<'a, T: TargetDensity + ?Sized>(target: &'a T) -> Result<&'a GaussianTarget> {
    target.as_gaussian().ok_or_else(|| {
        Error::MissingCapability(format!(
            "analytic expectations need a Gaussian target, got {}",
            target.name()
        ))
    })
}

fn check_mc(noise: &NoiseBatch, dim: usize) -> Result<()> {
    if noise.is_empty() {
        return Err(Error::InvalidArgument("empty noise batch".into()));
    }
    check_len(noise.dim(), dim, "noise")
}

fn check_rhs(rhs: Rhs) -> Result<Rhs> {
    if !linalg::all_finite(rhs.d_mean.iter()) || !linalg::all_finite(rhs.d_matrix.iter()) {
        return Err(Error::NonFinite {
            what: "flow right-hand side",
            index: 0,
        });
    }
    Ok(rhs)
}

/// `E[score_p(x) - score_q(x)]` and `E[(score_p - score_q)^T (x - mean)]`
/// over samples `x = mean + z S^T` of `fac`.
fn ratio_moments<T: TargetDensity + ?Sized>(
    fac: &GaussianFactor,
    target: &T,
    noise: &NoiseBatch,
) -> Result<(Row, Mat)> {
    check_mc(noise, fac.dim())?;
    let st = fac.scale().transpose();
    let parts = ordered_map(noise.len(), |i| {
        let x = fac.mean() + noise.row(i) * &st;
        let diff = target.score(&x) - fac.score(&x);
        let a = outer(&diff, &(&x - fac.mean()));
        (diff, a)
    });
    let n = fac.dim();
    let (mut dm, mut a) = (Row::zeros(n), Mat::zeros(n, n));
    for (i, (d, ai)) in parts.into_iter().enumerate() {
        if !linalg::all_finite(d.iter()) {
            return Err(Error::NonFinite {
                what: "score at sample",
                index: i,
            });
        }
        dm += d;
        a += ai;
    }
    let inv = 1.0 / noise.len() as f64;
    Ok((dm * inv, a * inv))
}

fn analytic_mean_rhs(mean: &Row, g: &GaussianTarget) -> Row {
    -((mean - g.mean()) * g.precision())
}

/// Hessian-free covariance ODE:
/// `d mean = E[grad log(p/q)]`, `d Sigma = E[A + A^T]` with
/// `A = (grad log(p/q))^T (x - mean)`, sampling `x` through `fac`.
pub fn hessian_free_from_factor<T: TargetDensity + ?Sized>(
    fac: &GaussianFactor,
    target: &T,
    noise: &NoiseBatch,
) -> Result<Rhs> {
    let (d_mean, a) = ratio_moments(fac, target, noise)?;
    let d_matrix = &a + a.transpose();
    check_rhs(Rhs { d_mean, d_matrix })
}

fn split_covariance(state: &FlowState) -> Result<(&Row, &Mat)> {
    match state {
        FlowState::Covariance { mean, cov, .. } => Ok((mean, cov)),
        FlowState::Scale { .. } => Err(Error::InvalidArgument(
            "covariance right-hand side needs a covariance state".into(),
        )),
    }
}

pub fn bw_rhs_hessian_free<T: TargetDensity + ?Sized>(
    state: &FlowState,
    target: &T,
    exp: Expectation<'_>,
) -> Result<Rhs> {
    let (mean, cov) = split_covariance(state)?;
    match exp {
        Expectation::MonteCarlo(noise) => hessian_free_from_factor(&state.factor()?, target, noise),
        Expectation::Analytic => {
            let g = gaussian_target(target)?;
            // E[A] = I - P Sigma
            let n = mean.len();
            let a = Mat::identity(n, n) - g.precision() * cov;
            check_rhs(Rhs {
                d_mean: analytic_mean_rhs(mean, g),
                d_matrix: &a + a.transpose(),
            })
        }
    }
}

/// Hessian form: `d Sigma = 2I - Sigma E[hess V] - E[hess V] Sigma`,
/// `d mean = -E[grad V]` with `V = -log p`.
pub fn bw_rhs_hessian<T: TargetDensity + ?Sized>(
    state: &FlowState,
    target: &T,
    exp: Expectation<'_>,
) -> Result<Rhs> {
    let (mean, cov) = split_covariance(state)?;
    let n = mean.len();
    let (d_mean, ehv) = match exp {
        Expectation::Analytic => {
            let g = gaussian_target(target)?;
            (analytic_mean_rhs(mean, g), g.precision().clone())
        }
        Expectation::MonteCarlo(noise) => {
            if !target.has_hessian() {
                return Err(Error::MissingCapability(format!(
                    "target {} has no Hessian",
                    target.name()
                )));
            }
            check_mc(noise, n)?;
            let fac = state.factor()?;
            let st = fac.scale().transpose();
            let parts = ordered_map(noise.len(), |i| {
                let x = fac.mean() + noise.row(i) * &st;
                (target.score(&x), target.hessian(&x))
            });
            let (mut s, mut h) = (Row::zeros(n), Mat::zeros(n, n));
            for (si, hi) in parts {
                s += si;
                h -= hi.ok_or_else(|| Error::MissingCapability("Hessian".into()))?;
            }
            let inv = 1.0 / noise.len() as f64;
            (s * inv, h * inv)
        }
    };
    let d_matrix = Mat::identity(n, n) * 2.0 - cov * &ehv - &ehv * cov;
    check_rhs(Rhs {
        d_mean,
        d_matrix: linalg::symmetrize(&d_matrix),
    })
}

/// Sarkka form: `d Sigma = 2I - E[(grad V)^T (x - mean) + (x - mean)^T grad V]`.
pub fn sarkka_rhs<T: TargetDensity + ?Sized>(
    state: &FlowState,
    target: &T,
    exp: Expectation<'_>,
) -> Result<Rhs> {
    let (mean, cov) = split_covariance(state)?;
    let n = mean.len();
    match exp {
        Expectation::Analytic => {
            let g = gaussian_target(target)?;
            // E[(grad V)^T (x - mean)] = P Sigma
            let b = g.precision() * cov;
            check_rhs(Rhs {
                d_mean: analytic_mean_rhs(mean, g),
                d_matrix: Mat::identity(n, n) * 2.0 - (&b + b.transpose()),
            })
        }
        Expectation::MonteCarlo(noise) => {
            check_mc(noise, n)?;
            let fac = state.factor()?;
            let st = fac.scale().transpose();
            let parts = ordered_map(noise.len(), |i| {
                let x = fac.mean() + noise.row(i) * &st;
                let s = target.score(&x);
                let b = outer(&s, &(&x - fac.mean()));
                (s, b)
            });
            let (mut s, mut b) = (Row::zeros(n), Mat::zeros(n, n));
            for (si, bi) in parts {
                s += si;
                b += bi;
            }
            let inv = 1.0 / noise.len() as f64;
            let b = b * inv;
            check_rhs(Rhs {
                d_mean: s * inv,
                d_matrix: Mat::identity(n, n) * 2.0 + (&b + b.transpose()),
            })
        }
    }
}

/// Scale-space ODE `d S = E[(grad log(p/q))^T (x - mean) S^{-T}]`, the
/// negated closed-form reverse-KL path gradient.
pub fn scale_rhs<T: TargetDensity + ?Sized>(
    state: &FlowState,
    target: &T,
    exp: Expectation<'_>,
) -> Result<Rhs> {
    let FlowState::Scale { mean, scale, .. } = state else {
        return Err(Error::InvalidArgument(
            "scale right-hand side needs a scale state".into(),
        ));
    };
    let params = GaussianParams::new(mean.clone(), scale.clone())?;
    match exp {
        Expectation::MonteCarlo(noise) => {
            let est = gaussian_closed_form_path_gradient(&params, target, noise)?;
            let ParamGrad::Gaussian(g) = est.grad else {
                unreachable!("Gaussian family")
            };
            check_rhs(Rhs {
                d_mean: -g.d_mean,
                d_matrix: -g.d_scale,
            })
        }
        Expectation::Analytic => {
            let g = gaussian_target(target)?;
            let fac = params.factor()?;
            check_rhs(Rhs {
                d_mean: analytic_mean_rhs(mean, g),
                d_matrix: fac.scale_inv().transpose() - g.precision() * scale,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RhsForm {
    HessianFree,
    Hessian,
    Sarkka,
    Scale,
}

impl std::str::FromStr for RhsForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hessian_free" => Ok(RhsForm::HessianFree),
            "hessian" => Ok(RhsForm::Hessian),
            "sarkka" => Ok(RhsForm::Sarkka),
            "scale" => Ok(RhsForm::Scale),
            _ => Err(Error::InvalidArgument(format!("unknown ODE form {s:?}"))),
        }
    }
}

/// Noise used by each Euler step.
#[derive(Debug, Clone)]
pub enum NoisePolicy {
    /// A new batch per step from stream `stream_id(step, 0)`.
    Fresh { seed: u64, samples: usize },
    /// The same batch every step (twin-run tests).
    Shared(NoiseBatch),
    Analytic,
}

impl NoisePolicy {
    pub fn batch(&self, step: u64, dim: usize) -> Option<NoiseBatch> {
        match self {
            NoisePolicy::Fresh { seed, samples } => {
                Some(NoiseBatch::standard(*seed, stream_id(step, 0), *samples, dim))
            }
            NoisePolicy::Shared(b) => Some(b.clone()),
            NoisePolicy::Analytic => None,
        }
    }
}

pub fn evaluate_rhs<T: TargetDensity + ?Sized>(
    form: RhsForm,
    state: &FlowState,
    target: &T,
    exp: Expectation<'_>,
) -> Result<Rhs> {
    match form {
        RhsForm::HessianFree => bw_rhs_hessian_free(state, target, exp),
        RhsForm::Hessian => bw_rhs_hessian(state, target, exp),
        RhsForm::Sarkka => sarkka_rhs(state, target, exp),
        RhsForm::Scale => scale_rhs(state, target, exp),
    }
}

/// One forward Euler step `state + tau * rhs`; covariance states are
/// re-symmetrized and must stay positive definite.
pub fn euler_step<T: TargetDensity + ?Sized>(
    state: &FlowState,
    form: RhsForm,
    target: &T,
    tau: f64,
    noise: Option<&NoiseBatch>,
) -> Result<FlowState> {
    let exp = match noise {
        Some(b) => Expectation::MonteCarlo(b),
        None => Expectation::Analytic,
    };
    let rhs = evaluate_rhs(form, state, target, exp)?;
    Ok(match state {
        FlowState::Covariance { mean, cov, t } => {
            let cov = linalg::symmetrize(&(cov + &rhs.d_matrix * tau));
            linalg::cholesky_lower(&cov, "covariance after Euler step")?;
            FlowState::Covariance {
                mean: mean + &rhs.d_mean * tau,
                cov,
                t: t + tau,
            }
        }
        FlowState::Scale { mean, scale, t } => {
            let scale = scale + &rhs.d_matrix * tau;
            linalg::Inverse::new(&scale, "scale after Euler step")?;
            FlowState::Scale {
                mean: mean + &rhs.d_mean * tau,
                scale,
                t: t + tau,
            }
        }
    })
}

/// Integrates `steps` forward Euler steps; the returned list starts with the
/// initial state. Failures report the step index and the last good state.
pub fn forward_euler<T: TargetDensity + ?Sized>(
    state: FlowState,
    form: RhsForm,
    target: &T,
    tau: f64,
    steps: usize,
    noise: &NoisePolicy,
) -> Result<Vec<FlowState>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("step size must be > 0, got {tau}")));
    }
    let dim = state.dim();
    let mut out = Vec::with_capacity(steps + 1);
    out.push(state);
    for k in 0..steps {
        let cur = out.last().expect("non-empty");
        let batch = noise.batch(k as u64, dim);
        let next = euler_step(cur, form, target, tau, batch.as_ref()).map_err(|e| Error::Step {
            step: k,
            last_good: cur.to_json(),
            source: Box::new(e),
        })?;
        out.push(next);
    }
    Ok(out)
}

/// An ensemble of particles, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    pub positions: Mat,
    pub time: f64,
    pub seed: u64,
    pub steps_taken: u64,
}

impl ParticleCloud {
    /// `count` draws from `init`, using stream `u64::MAX - 1` of `seed`.
    pub fn sample(init: &GaussianParams, count: usize, seed: u64) -> Result<Self> {
        let noise = NoiseBatch::standard(seed, u64::MAX - 1, count, init.dim());
        Ok(Self {
            positions: init.reparameterize(&noise)?,
            time: 0.0,
            seed,
            steps_taken: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.nrows() == 0
    }

    pub fn fit(&self) -> Result<GaussianFit> {
        empirical_gaussian_fit(&self.positions)
    }
}

/// Euler-Maruyama step `x + dt score_p(x) + sqrt(2 dt) z`.
pub fn langevin_step<T: TargetDensity + ?Sized>(
    cloud: &ParticleCloud,
    target: &T,
    dt: f64,
    noise: &NoiseBatch,
) -> Result<ParticleCloud> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be > 0, got {dt}")));
    }
    check_len(noise.len(), cloud.len(), "noise rows")?;
    check_len(noise.dim(), cloud.positions.ncols(), "noise")?;
    let sd = (2.0 * dt).sqrt();
    let rows = ordered_map(cloud.len(), |i| {
        let x = cloud.positions.row(i).into_owned();
        let s = target.score(&x);
        x + s * dt + noise.z.row(i) * sd
    });
    let mut positions = Mat::zeros(cloud.len(), cloud.positions.ncols());
    for (i, r) in rows.into_iter().enumerate() {
        if !linalg::all_finite(r.iter()) {
            return Err(Error::NonFinite {
                what: "Langevin particle",
                index: i,
            });
        }
        positions.set_row(i, &r);
    }
    Ok(ParticleCloud {
        positions,
        time: cloud.time + dt,
        seed: cloud.seed,
        steps_taken: cloud.steps_taken + 1,
    })
}

/// Advances with fresh noise per step from stream `stream_id(step, 1)`.
pub fn langevin_advance<T: TargetDensity + ?Sized>(
    cloud: &ParticleCloud,
    target: &T,
    dt: f64,
) -> Result<ParticleCloud> {
    let noise = NoiseBatch::standard(
        cloud.seed,
        stream_id(cloud.steps_taken, 1),
        cloud.len(),
        cloud.positions.ncols(),
    );
    langevin_step(cloud, target, dt, &noise)
}

/// Probability-flow velocity `h'(r) r (score_p - score_q)` of the
/// f-divergence gradient flow at `x`.
pub fn f_flow_vector_field<Q, T>(x: &Row, q: &Q, target: &T, div: FDivergence) -> Result<Row>
where
    Q: Density + ?Sized,
    T: TargetDensity + ?Sized,
{
    let log_r = target.log_density_unnorm(x) - q.log_density(x);
    let w = div.path_weight_log(log_r);
    let v = (target.score(x) - q.score(x)) * w;
    if !w.is_finite() || !linalg::all_finite(v.iter()) {
        return Err(Error::NonFinite {
            what: "flow vector field",
            index: 0,
        });
    }
    Ok(v)
}

/// Distillation step: move each sample one Euler step along the flow,
/// `x' = x + tau v(x)`, freeze `x'` and differentiate
/// `0.5 E|x_theta - x'|^2` through the reparameterization.
pub fn distill_step<T: TargetDensity + ?Sized>(
    params: &FamilyParams,
    target: &T,
    div: FDivergence,
    tau: f64,
    noise: &NoiseBatch,
    opts: PathOptions,
) -> Result<(GradEstimate, Mat)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    // The per-sample velocity is minus the path-gradient integrand.
    let per = path_gradient(
        params,
        target,
        div,
        noise,
        PathOptions {
            keep_per_sample: true,
            ..opts
        },
    )?;
    let samples = per.per_sample.as_ref().expect("requested");
    let n = params.dim();
    let inv = 1.0 / noise.len() as f64;
    let mut moved = Mat::zeros(noise.len(), n);
    let grad = match params {
        FamilyParams::Gaussian(p) => {
            let mut acc = GaussianGrad::zeros(n);
            for (i, g) in samples.iter().enumerate() {
                let ParamGrad::Gaussian(g) = g else { unreachable!() };
                let x = p.sample_row(&noise.row(i));
                let moved_x = &x - &g.d_mean * tau;
                let resid = &x - &moved_x;
                acc.d_scale += outer(&resid, &noise.row(i));
                acc.d_mean += &resid;
                moved.set_row(i, &moved_x);
            }
            ParamGrad::Gaussian(GaussianGrad {
                d_mean: acc.d_mean * inv,
                d_scale: acc.d_scale * inv,
            })
        }
        FamilyParams::Diag(p) => {
            let (mut dm, mut dl) = (Row::zeros(n), Row::zeros(n));
            for (i, g) in samples.iter().enumerate() {
                let ParamGrad::Diag(g) = g else { unreachable!() };
                let x = p.sample_row(&noise.row(i));
                let moved_x = &x - &g.d_mean * tau;
                let resid = &x - &moved_x;
                dl += resid.component_mul(&(&x - &p.mean));
                dm += &resid;
                moved.set_row(i, &moved_x);
            }
            ParamGrad::Diag(DiagGrad {
                d_mean: dm * inv,
                d_log_std: dl * inv,
            })
        }
        FamilyParams::Mixture(_) => {
            return Err(Error::InvalidArgument(
                "distillation needs a Gaussian or diagonal family".into(),
            ))
        }
    };
    if !grad.all_finite() {
        return Err(Error::NonFinite {
            what: "distillation gradient",
            index: 0,
        });
    }
    Ok((
        GradEstimate {
            grad,
            per_sample: None,
            ..per
        },
        moved,
    ))
}
