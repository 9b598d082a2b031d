//! Gradient estimators for variational objectives.
//!
//! The stop-gradient contract is realized by contracting a per-sample
//! vector `g_x` against the analytic reparameterization Jacobian:
//! `d_mean += g_x`, `d_scale += g_x^T z` (full Gaussian),
//! `d_log_std += g_x * (x - mean)` (diagonal). The density ratio is always
//! evaluated against a frozen snapshot of the variational parameters.

use nalgebra::DVector;
use serde_json::{json, Value};

use crate::divergences::FDivergence;
use crate::error::{Error, Result};
use crate::families::{
    DiagGaussianParams, Density, FamilyParams, GaussianFactor, GaussianParams, MixtureParams,
    NoiseBatch,
};
use crate::linalg::{self, check_len, mat_to_rows, outer, Mat, Row};
use crate::parallel::ordered_map;
use crate::targets::{ScaledTarget, TargetDensity};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrad {
    pub d_mean: Row,
    pub d_scale: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGrad {
    pub d_mean: Row,
    pub d_log_std: Row,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureGrad {
    pub d_logits: DVector<f64>,
    pub components: Vec<GaussianGrad>,
}

/// A gradient with the same shape as the parameters it differentiates.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrad {
    Gaussian(GaussianGrad),
    Diag(DiagGrad),
    Mixture(MixtureGrad),
}

impl GaussianGrad {
    pub fn zeros(dim: usize) -> Self {
        Self {
            d_mean: Row::zeros(dim),
            d_scale: Mat::zeros(dim, dim),
        }
    }

    fn scaled(&self, c: f64) -> Self {
        Self {
            d_mean: &self.d_mean * c,
            d_scale: &self.d_scale * c,
        }
    }
}

impl ParamGrad {
    fn entries(&self) -> Vec<f64> {
        match self {
            ParamGrad::Gaussian(g) => g.d_mean.iter().chain(g.d_scale.iter()).copied().collect(),
            ParamGrad::Diag(g) => g.d_mean.iter().chain(g.d_log_std.iter()).copied().collect(),
            ParamGrad::Mixture(g) => g
                .d_logits
                .iter()
                .copied()
                .chain(
                    g.components
                        .iter()
                        .flat_map(|c| c.d_mean.iter().chain(c.d_scale.iter()).copied()),
                )
                .collect(),
        }
    }

    /// Euclidean norm over every entry.
    pub fn norm(&self) -> f64 {
        self.entries().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.entries().iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, c: f64) -> Self {
        match self {
            ParamGrad::Gaussian(g) => ParamGrad::Gaussian(g.scaled(c)),
            ParamGrad::Diag(g) => ParamGrad::Diag(DiagGrad {
                d_mean: &g.d_mean * c,
                d_log_std: &g.d_log_std * c,
            }),
            ParamGrad::Mixture(g) => ParamGrad::Mixture(MixtureGrad {
                d_logits: &g.d_logits * c,
                components: g.components.iter().map(|x| x.scaled(c)).collect(),
            }),
        }
    }

    /// `max |self - other|` over all entries; shapes must agree.
    pub fn max_abs_diff(&self, other: &ParamGrad) -> Result<f64> {
        let (a, b) = (self.entries(), other.entries());
        check_len(b.len(), a.len(), "gradient")?;
        Ok(a.iter().zip(&b).fold(0.0, |m, (x, y)| m.max((x - y).abs())))
    }

    /// One plain gradient-descent step `theta - lr * grad`.
    pub fn descend(&self, params: &FamilyParams, lr: f64) -> Result<FamilyParams> {
        let mismatch = || Error::InvalidArgument("gradient does not match the family".into());
        Ok(match (params, self) {
            (FamilyParams::Gaussian(p), ParamGrad::Gaussian(g)) => {
                FamilyParams::Gaussian(GaussianParams {
                    mean: &p.mean - &g.d_mean * lr,
                    scale: &p.scale - &g.d_scale * lr,
                })
            }
            (FamilyParams::Diag(p), ParamGrad::Diag(g)) => FamilyParams::Diag(DiagGaussianParams {
                mean: &p.mean - &g.d_mean * lr,
                log_std: &p.log_std - &g.d_log_std * lr,
            }),
            (FamilyParams::Mixture(p), ParamGrad::Mixture(g)) => {
                if g.components.len() != p.k() {
                    return Err(mismatch());
                }
                FamilyParams::Mixture(MixtureParams {
                    logits: &p.logits - &g.d_logits * lr,
                    components: p
                        .components
                        .iter()
                        .zip(&g.components)
                        .map(|(c, d)| GaussianParams {
                            mean: &c.mean - &d.d_mean * lr,
                            scale: &c.scale - &d.d_scale * lr,
                        })
                        .collect(),
                })
            }
            _ => return Err(mismatch()),
        })
    }

    pub fn to_json(&self) -> Value {
        let row = |r: &Row| r.iter().copied().collect::<Vec<f64>>();
        let gauss = |g: &GaussianGrad| json!({"d_mean": row(&g.d_mean), "d_scale": mat_to_rows(&g.d_scale)});
        match self {
            ParamGrad::Gaussian(g) => gauss(g),
            ParamGrad::Diag(g) => json!({"d_mean": row(&g.d_mean), "d_log_std": row(&g.d_log_std)}),
            ParamGrad::Mixture(g) => json!({
                "d_logits": g.d_logits.iter().copied().collect::<Vec<f64>>(),
                "components": g.components.iter().map(gauss).collect::<Vec<_>>(),
            }),
        }
    }
}

/// A Monte Carlo gradient with its provenance.
#[derive(Debug, Clone)]
pub struct GradEstimate {
    pub grad: ParamGrad,
    pub sample_count: usize,
    pub seed: u64,
    pub stream_id: u64,
    /// `max log r` subtracted before exponentiation (0 when disabled).
    pub log_r_shift: f64,
    /// Surrogate objective value when the estimator defines one.
    pub objective: Option<f64>,
    pub per_sample: Option<Vec<ParamGrad>>,
}

impl GradEstimate {
    pub fn per_sample_available(&self) -> bool {
        self.per_sample.is_some()
    }

    pub fn to_json(&self) -> Value {
        json!({
            "grad": self.grad.to_json(),
            "sample_count": self.sample_count,
            "seed": self.seed,
            "stream_id": self.stream_id,
            "log_r_shift": self.log_r_shift,
            "objective": self.objective,
            "per_sample_available": self.per_sample_available(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathOptions {
    /// Subtract `max log r` before exponentiating.
    pub ratio_shift: bool,
    pub keep_per_sample: bool,
}

impl Default for PathOptions {
    fn default() -> Self {
        Self {
            ratio_shift: true,
            keep_per_sample: false,
        }
    }
}

impl PathOptions {
    pub fn unshifted() -> Self {
        Self {
            ratio_shift: false,
            keep_per_sample: false,
        }
    }
}

/// `log r(x) = log p(x) - log q(x; theta_s)` with `theta_s` frozen.
pub struct StopGradientRatio<'a, Q: ?Sized, T: ?Sized> {
    frozen: &'a Q,
    target: &'a T,
}

impl<'a, Q: Density + ?Sized, T: TargetDensity + ?Sized> StopGradientRatio<'a, Q, T> {
    pub fn new(frozen: &'a Q, target: &'a T) -> Self {
        Self { frozen, target }
    }

    pub fn log_r(&self, x: &Row) -> f64 {
        self.target.log_density_unnorm(x) - self.frozen.log_density(x)
    }

    /// `score_p(x) - score_q(x; theta_s)`.
    pub fn grad_x_log_r(&self, x: &Row) -> Row {
        self.target.score(x) - self.frozen.score(x)
    }

    fn evaluate(&self, x: &Row, index: usize) -> Result<(f64, Row)> {
        let lp = self.target.log_density_unnorm(x);
        if !lp.is_finite() {
            return Err(Error::NonFinite {
                what: "target log density at sample",
                index,
            });
        }
        let lr = lp - self.frozen.log_density(x);
        // score_q - score_p, so that q = p gives +0 exactly.
        let neg_diff = self.frozen.score(x) - self.target.score(x);
        if !lr.is_finite() || !linalg::all_finite(neg_diff.iter()) {
            return Err(Error::NonFinite {
                what: "log ratio or score at sample",
                index,
            });
        }
        Ok((lr, neg_diff))
    }
}

/// Subtracts the largest log ratio and exponentiates; the maximum output is
/// exactly 1.
pub fn ratio_shift(log_r: &[f64]) -> Result<(Vec<f64>, f64)> {
    if log_r.is_empty() {
        return Err(Error::InvalidArgument("ratio_shift of an empty batch".into()));
    }
    if let Some(i) = log_r.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "log ratio",
            index: i,
        });
    }
    let shift = log_r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((log_r.iter().map(|v| (v - shift).exp()).collect(), shift))
}

fn shift_of(log_r: &[f64], opts: PathOptions) -> Result<f64> {
    if opts.ratio_shift {
        Ok(ratio_shift(log_r)?.1)
    } else {
        Ok(0.0)
    }
}

fn path_weights(div: FDivergence, log_r: &[f64], shift: f64) -> Result<Vec<f64>> {
    log_r
        .iter()
        .enumerate()
        .map(|(i, lr)| {
            let w = div.path_weight_log(lr - shift);
            if w.is_finite() {
                Ok(w)
            } else {
                Err(Error::Overflow(format!(
                    "h'(r) r is not finite at sample {i} (log r = {lr})"
                )))
            }
        })
        .collect()
}

fn check_noise(noise: &NoiseBatch, dim: usize) -> Result<()> {
    if noise.is_empty() {
        return Err(Error::InvalidArgument("empty noise batch".into()));
    }
    check_len(noise.dim(), dim, "noise")
}

fn finish(grad: ParamGrad, noise: &NoiseBatch, shift: f64) -> Result<GradEstimate> {
    if !grad.all_finite() {
        return Err(Error::NonFinite {
            what: "gradient",
            index: 0,
        });
    }
    Ok(GradEstimate {
        grad,
        sample_count: noise.len(),
        seed: noise.seed,
        stream_id: noise.stream_id,
        log_r_shift: shift,
        objective: None,
        per_sample: None,
    })
}

struct Sampled {
    x: Row,
    log_r: f64,
    neg_diff: Row,
}

fn sample_ratios<Q, T>(
    frozen: &Q,
    target: &T,
    noise: &NoiseBatch,
    draw: impl Fn(&Row) -> Row + Sync,
) -> Result<Vec<Sampled>>
where
    Q: Density + ?Sized,
    T: TargetDensity + ?Sized,
{
    let ratio = StopGradientRatio::new(frozen, target);
    ordered_map(noise.len(), |i| {
        let x = draw(&noise.row(i));
        let (log_r, neg_diff) = ratio.evaluate(&x, i)?;
        Ok(Sampled { x, log_r, neg_diff })
    })
    .into_iter()
    .collect()
}

/// Path-derivative gradient of `D_f(p || q)`:
/// per sample `g_x = -h'(r) r (score_p - score_q)`, contracted through the
/// reparameterization. Mixtures use [`gmm_surrogate_gradient`] with the same
/// batch for every component.
pub fn path_gradient<T: TargetDensity + ?Sized>(
    params: &FamilyParams,
    target: &T,
    div: FDivergence,
    noise: &NoiseBatch,
    opts: PathOptions,
) -> Result<GradEstimate> {
    check_noise(noise, params.dim())?;
    check_len(target.dim(), params.dim(), "target")?;
    match params {
        FamilyParams::Gaussian(p) => gaussian_path(p, target, div, noise, opts),
        FamilyParams::Diag(p) => diag_path(p, target, div, noise, opts),
        FamilyParams::Mixture(m) => {
            let batches = vec![noise.clone(); m.k()];
            gmm_surrogate_gradient(m, target, div, &batches, opts)
        }
    }
}

fn gaussian_path<T: TargetDensity + ?Sized>(
    p: &GaussianParams,
    target: &T,
    div: FDivergence,
    noise: &NoiseBatch,
    opts: PathOptions,
) -> Result<GradEstimate> {
    let fac = p.factor()?;
    let samples = sample_ratios(&fac, target, noise, |z| p.sample_row(z))?;
    let log_r: Vec<f64> = samples.iter().map(|s| s.log_r).collect();
    let shift = shift_of(&log_r, opts)?;
    let weights = path_weights(div, &log_r, shift)?;
    let n = p.dim();
    let mut acc = GaussianGrad::zeros(n);
    let mut per = opts.keep_per_sample.then(Vec::new);
    for (i, (s, w)) in samples.iter().zip(&weights).enumerate() {
        let g = &s.neg_diff * *w;
        let dz = outer(&g, &noise.row(i));
        acc.d_mean += &g;
        acc.d_scale += &dz;
        if let Some(v) = per.as_mut() {
            v.push(ParamGrad::Gaussian(GaussianGrad {
                d_mean: g,
                d_scale: dz,
            }));
        }
    }
    let mut est = finish(
        ParamGrad::Gaussian(acc.scaled(1.0 / noise.len() as f64)),
        noise,
        shift,
    )?;
    est.per_sample = per;
    Ok(est)
}

fn diag_path<T: TargetDensity + ?Sized>(
    p: &DiagGaussianParams,
    target: &T,
    div: FDivergence,
    noise: &NoiseBatch,
    opts: PathOptions,
) -> Result<GradEstimate> {
    let samples = sample_ratios(p, target, noise, |z| p.sample_row(z))?;
    let log_r: Vec<f64> = samples.iter().map(|s| s.log_r).collect();
    let shift = shift_of(&log_r, opts)?;
    let weights = path_weights(div, &log_r, shift)?;
    let n = p.dim();
    let mut d_mean = Row::zeros(n);
    let mut d_log_std = Row::zeros(n);
    let mut per = opts.keep_per_sample.then(Vec::new);
    for (s, w) in samples.iter().zip(&weights) {
        let g = &s.neg_diff * *w;
        let dl = g.component_mul(&(&s.x - &p.mean));
        d_mean += &g;
        d_log_std += &dl;
        if let Some(v) = per.as_mut() {
            v.push(ParamGrad::Diag(DiagGrad {
                d_mean: g,
                d_log_std: dl,
            }));
        }
    }
    let inv_n = 1.0 / noise.len() as f64;
    let mut est = finish(
        ParamGrad::Diag(DiagGrad {
            d_mean: d_mean * inv_n,
            d_log_std: d_log_std * inv_n,
        }),
        noise,
        shift,
    )?;
    est.per_sample = per;
    Ok(est)
}

/// The three pieces of the reparameterization gradient of
/// `KL(q || p)` on one batch: total = path + score.
#[derive(Debug, Clone)]
pub struct KlDecomposition {
    pub total: GradEstimate,
    /// Derivative through the sample path only.
    pub path: ParamGrad,
    /// Explicit `grad_theta log q(x; theta)` at fixed `x`; zero in expectation.
    pub score: ParamGrad,
}

/// Reparameterization gradient of `KL(q || p)` (Gaussian or diagonal).
pub fn reparam_gradient_kl<T: TargetDensity + ?Sized>(
    params: &FamilyParams,
    target: &T,
    noise: &NoiseBatch,
) -> Result<GradEstimate> {
    Ok(reparam_decomposition(params, target, noise)?.total)
}

pub fn reparam_decomposition<T: TargetDensity + ?Sized>(
    params: &FamilyParams,
    target: &T,
    noise: &NoiseBatch,
) -> Result<KlDecomposition> {
    check_noise(noise, params.dim())?;
    check_len(target.dim(), params.dim(), "target")?;
    let inv_n = 1.0 / noise.len() as f64;
    let (path, score) = match params {
        FamilyParams::Gaussian(p) => {
            let fac = p.factor()?;
            let samples = sample_ratios(&fac, target, noise, |z| p.sample_row(z))?;
            let n = p.dim();
            let (mut path, mut score) = (GaussianGrad::zeros(n), GaussianGrad::zeros(n));
            let eye = Mat::identity(n, n);
            for (i, s) in samples.iter().enumerate() {
                path.d_mean += &s.neg_diff;
                path.d_scale += outer(&s.neg_diff, &noise.row(i));
                let u = fac.whiten(&s.x);
                score.d_mean += &u * fac.scale_inv();
                score.d_scale += fac.scale_inv().transpose() * (outer(&u, &u) - &eye);
            }
            (
                ParamGrad::Gaussian(path.scaled(inv_n)),
                ParamGrad::Gaussian(score.scaled(inv_n)),
            )
        }
        FamilyParams::Diag(p) => {
            let samples = sample_ratios(p, target, noise, |z| p.sample_row(z))?;
            let n = p.dim();
            let std = p.std();
            let mut path = DiagGrad {
                d_mean: Row::zeros(n),
                d_log_std: Row::zeros(n),
            };
            let mut score = path.clone();
            for s in &samples {
                let centered = &s.x - &p.mean;
                path.d_mean += &s.neg_diff;
                path.d_log_std += s.neg_diff.component_mul(&centered);
                let u = centered.component_div(&std);
                score.d_mean += u.component_div(&std);
                score.d_log_std += u.map(|v| v * v - 1.0);
            }
            let scale = |g: DiagGrad| DiagGrad {
                d_mean: g.d_mean * inv_n,
                d_log_std: g.d_log_std * inv_n,
            };
            (ParamGrad::Diag(scale(path)), ParamGrad::Diag(scale(score)))
        }
        FamilyParams::Mixture(_) => {
            return Err(Error::InvalidArgument(
                "reparameterization gradient needs a Gaussian or diagonal family".into(),
            ))
        }
    };
    let total = add(&path, &score);
    Ok(KlDecomposition {
        total: finish(total, noise, 0.0)?,
        path,
        score,
    })
}

fn add(a: &ParamGrad, b: &ParamGrad) -> ParamGrad {
    match (a, b) {
        (ParamGrad::Gaussian(a), ParamGrad::Gaussian(b)) => ParamGrad::Gaussian(GaussianGrad {
            d_mean: &a.d_mean + &b.d_mean,
            d_scale: &a.d_scale + &b.d_scale,
        }),
        (ParamGrad::Diag(a), ParamGrad::Diag(b)) => ParamGrad::Diag(DiagGrad {
            d_mean: &a.d_mean + &b.d_mean,
            d_log_std: &a.d_log_std + &b.d_log_std,
        }),
        _ => unreachable!("pieces share a family"),
    }
}

/// Closed-form reverse-KL path gradient for the full Gaussian family:
/// `d_mean = -E[grad log(p/q)]`,
/// `d_scale = -E[(grad log(p/q))^T (x - mean) S^{-T}]`.
pub fn gaussian_closed_form_path_gradient<T: TargetDensity + ?Sized>(
    params: &GaussianParams,
    target: &T,
    noise: &NoiseBatch,
) -> Result<GradEstimate> {
    check_noise(noise, params.dim())?;
    check_len(target.dim(), params.dim(), "target")?;
    let fac = params.factor()?;
    let samples = sample_ratios(&fac, target, noise, |z| params.sample_row(z))?;
    let mut acc = GaussianGrad::zeros(params.dim());
    for s in &samples {
        acc.d_mean += &s.neg_diff;
        acc.d_scale += outer(&s.neg_diff, &fac.whiten(&s.x));
    }
    finish(
        ParamGrad::Gaussian(acc.scaled(1.0 / noise.len() as f64)),
        noise,
        0.0,
    )
}

/// `E[grad^2 log p]` under `q`: exact for Gaussian targets, Monte Carlo
/// otherwise.
pub fn expected_target_hessian<T: TargetDensity + ?Sized>(
    params: &GaussianParams,
    target: &T,
    noise: Option<&NoiseBatch>,
) -> Result<Mat> {
    if let Some(g) = target.as_gaussian() {
        return Ok(-g.precision());
    }
    if !target.has_hessian() {
        return Err(Error::MissingCapability(format!(
            "target {} has no Hessian",
            target.name()
        )));
    }
    let noise = noise.ok_or_else(|| {
        Error::InvalidArgument("non-Gaussian target needs a noise batch for E[hessian]".into())
    })?;
    check_noise(noise, params.dim())?;
    let hs = ordered_map(noise.len(), |i| {
        target
            .hessian(&params.sample_row(&noise.row(i)))
            .ok_or_else(|| Error::MissingCapability("Hessian".into()))
    });
    let mut acc = Mat::zeros(params.dim(), params.dim());
    for h in hs {
        acc += h?;
    }
    Ok(acc / noise.len() as f64)
}

/// `grad_S KL = -E[grad^2 log p] S - S^{-T}`.
pub fn hessian_form_scale_gradient<T: TargetDensity + ?Sized>(
    params: &GaussianParams,
    target: &T,
    noise: Option<&NoiseBatch>,
) -> Result<Mat> {
    let fac = params.factor()?;
    let eh = expected_target_hessian(params, target, noise)?;
    Ok(-(eh * &params.scale) - fac.scale_inv().transpose())
}

/// Path gradient of the mixture surrogate `L = -sum_k m_k mean_i h(r_ki)`,
/// with `x_ki` drawn from component `k` and `r` the ratio against the full
/// frozen mixture. The log-ratio shift is global across components.
pub fn gmm_surrogate_gradient<T: TargetDensity + ?Sized>(
    params: &MixtureParams,
    target: &T,
    div: FDivergence,
    batches: &[NoiseBatch],
    opts: PathOptions,
) -> Result<GradEstimate> {
    check_len(batches.len(), params.k(), "noise batches")?;
    check_len(target.dim(), params.dim(), "target")?;
    for b in batches {
        check_noise(b, params.dim())?;
    }
    let fac = params.factor()?;
    let weights = params.weights();
    let per_comp: Vec<Vec<Sampled>> = params
        .components
        .iter()
        .zip(batches)
        .map(|(c, b)| sample_ratios(&fac, target, b, |z| c.sample_row(z)))
        .collect::<Result<_>>()?;
    let all_log_r: Vec<f64> = per_comp.iter().flatten().map(|s| s.log_r).collect();
    let shift = shift_of(&all_log_r, opts)?;

    let mut ell = Vec::with_capacity(params.k());
    let mut components = Vec::with_capacity(params.k());
    for (k, samples) in per_comp.iter().enumerate() {
        let log_r: Vec<f64> = samples.iter().map(|s| s.log_r).collect();
        let w = path_weights(div, &log_r, shift)?;
        let mut acc = GaussianGrad::zeros(params.dim());
        let mut h_sum = 0.0;
        for (i, (s, wi)) in samples.iter().zip(&w).enumerate() {
            let g = &s.neg_diff * *wi;
            acc.d_scale += outer(&g, &batches[k].row(i));
            acc.d_mean += &g;
            h_sum += div.h_log(s.log_r - shift);
        }
        let inv_n = 1.0 / samples.len() as f64;
        ell.push(h_sum * inv_n);
        components.push(acc.scaled(weights[k] * inv_n));
    }
    let avg: f64 = weights.iter().zip(&ell).map(|(m, l)| m * l).sum();
    let d_logits = DVector::from_fn(params.k(), |j, _| weights[j] * (avg - ell[j]));
    let grad = ParamGrad::Mixture(MixtureGrad {
        d_logits,
        components,
    });
    if !grad.all_finite() || !avg.is_finite() {
        return Err(Error::NonFinite {
            what: "mixture gradient",
            index: 0,
        });
    }
    Ok(GradEstimate {
        grad,
        sample_count: batches.iter().map(NoiseBatch::len).sum(),
        seed: batches[0].seed,
        stream_id: batches[0].stream_id,
        log_r_shift: shift,
        objective: Some(-avg),
        per_sample: None,
    })
}

/// Compares the unshifted path gradient on `p` and on `C p`. Reverse KL must
/// agree exactly; the alpha family must scale by `C^alpha`. Returns the
/// largest deviation, relative to the scaled baseline for `alpha != 0`.
pub fn normalizer_scaling_check<T: TargetDensity + Clone>(
    div: FDivergence,
    params: &FamilyParams,
    target: &T,
    noise: &NoiseBatch,
    c: f64,
) -> Result<f64> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::InvalidArgument(format!("scale C must be > 0, got {c}")));
    }
    let alpha = div.alpha_exponent().ok_or_else(|| {
        Error::MissingCapability(format!("{div} has no normalizer scaling law"))
    })?;
    let opts = PathOptions::unshifted();
    let base = path_gradient(params, target, div, noise, opts)?;
    let scaled_target = ScaledTarget {
        inner: target.clone(),
        log_scale: c.ln(),
    };
    let scaled = path_gradient(params, &scaled_target, div, noise, opts)?;
    if alpha == 0.0 {
        return scaled.grad.max_abs_diff(&base.grad);
    }
    let expected = base.grad.scaled(c.powf(alpha));
    let denom = expected.max_abs().max(f64::MIN_POSITIVE);
    Ok(scaled.grad.max_abs_diff(&expected)? / denom)
}

/// Score-function piece for a Gaussian at fixed samples, exposed for tests
/// and diagnostics.
pub fn gaussian_score_term(fac: &GaussianFactor, xs: &Mat) -> GaussianGrad {
    let n = fac.dim();
    let eye = Mat::identity(n, n);
    let mut acc = GaussianGrad::zeros(n);
    for i in 0..xs.nrows() {
        let u = fac.whiten(&xs.row(i).into_owned());
        acc.d_mean += &u * fac.scale_inv();
        acc.d_scale += fac.scale_inv().transpose() * (outer(&u, &u) - &eye);
    }
    acc.scaled(1.0 / xs.nrows() as f64)
}
