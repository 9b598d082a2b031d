//! f-divergences `D_f(p || q) = E_q[f(p/q)]` and their surrogate functions
//! `h(r) = r f'(r) - f(r)`.
//!
//! Every estimator works with `log r`; the `*_log` evaluators below never
//! form a raw ratio that could overflow before it is needed.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::families::{Density, FamilyParams};
use crate::linalg::{Mat, Row};
use crate::targets::TargetDensity;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FDivergence {
    /// `f(r) = -log r`, i.e. `KL(q || p)`.
    ReverseKl,
    /// `f(r) = r log r`, i.e. `KL(p || q)`.
    ForwardKl,
    /// `f(r) = (r - 1)^2`.
    ChiSquared,
    /// `f(r) = (sqrt(r) - 1)^2`.
    Hellinger,
    /// `f(r) = (r^a - a r - (1 - a)) / (a (a - 1))`, `a` not 0 or 1.
    Alpha(f64),
}

impl FDivergence {
    /// Generic alpha branch. `0` and `1` are the KL limits and must be
    /// requested by name.
    pub fn alpha(a: f64) -> Result<Self> {
        if !a.is_finite() {
            return Err(Error::InvalidArgument(format!("alpha must be finite, got {a}")));
        }
        if a == 0.0 {
            return Err(Error::InvalidArgument(
                "alpha = 0 is the reverse KL limit; use reverse_kl".into(),
            ));
        }
        if a == 1.0 {
            return Err(Error::InvalidArgument(
                "alpha = 1 is the forward KL limit; use forward_kl".into(),
            ));
        }
        Ok(FDivergence::Alpha(a))
    }

    pub fn all_named() -> [FDivergence; 4] {
        [
            FDivergence::ReverseKl,
            FDivergence::ForwardKl,
            FDivergence::ChiSquared,
            FDivergence::Hellinger,
        ]
    }

    /// Exponent governing how an unknown normalizer `C` rescales the path
    /// gradient: `grad(C p) = C^alpha grad(p)`.
    pub fn alpha_exponent(&self) -> Option<f64> {
        Some(self.weight_law().1)
    }

    // h'(r) r = coef * r^exponent for every supported divergence.
    fn weight_law(&self) -> (f64, f64) {
        match *self {
            FDivergence::ReverseKl => (1.0, 0.0),
            FDivergence::ForwardKl => (1.0, 1.0),
            FDivergence::ChiSquared => (2.0, 2.0),
            FDivergence::Hellinger => (0.5, 0.5),
            FDivergence::Alpha(a) => (1.0, a),
        }
    }

    pub fn f(&self, r: f64) -> f64 {
        match *self {
            FDivergence::ReverseKl => -r.ln(),
            FDivergence::ForwardKl => {
                if r == 0.0 {
                    0.0
                } else {
                    r * r.ln()
                }
            }
            FDivergence::ChiSquared => (r - 1.0).powi(2),
            FDivergence::Hellinger => (r.sqrt() - 1.0).powi(2),
            FDivergence::Alpha(a) => (r.powf(a) - a * r - (1.0 - a)) / (a * (a - 1.0)),
        }
    }

    pub fn f_prime(&self, r: f64) -> f64 {
        match *self {
            FDivergence::ReverseKl => -1.0 / r,
            FDivergence::ForwardKl => r.ln() + 1.0,
            FDivergence::ChiSquared => 2.0 * (r - 1.0),
            FDivergence::Hellinger => 1.0 - 1.0 / r.sqrt(),
            FDivergence::Alpha(a) => (r.powf(a - 1.0) - 1.0) / (a - 1.0),
        }
    }

    pub fn f_double_prime(&self, r: f64) -> f64 {
        match *self {
            FDivergence::ReverseKl => 1.0 / (r * r),
            FDivergence::ForwardKl => 1.0 / r,
            FDivergence::ChiSquared => 2.0,
            FDivergence::Hellinger => 0.5 * r.powf(-1.5),
            FDivergence::Alpha(a) => r.powf(a - 2.0),
        }
    }

    pub fn h(&self, r: f64) -> f64 {
        match *self {
            FDivergence::ReverseKl => r.ln() - 1.0,
            FDivergence::ForwardKl => r,
            FDivergence::ChiSquared => r * r - 1.0,
            FDivergence::Hellinger => r.sqrt() - 1.0,
            FDivergence::Alpha(a) => (r.powf(a) - 1.0) / a,
        }
    }

    pub fn h_prime(&self, r: f64) -> f64 {
        match *self {
            FDivergence::ReverseKl => 1.0 / r,
            FDivergence::ForwardKl => 1.0,
            FDivergence::ChiSquared => 2.0 * r,
            FDivergence::Hellinger => 0.5 / r.sqrt(),
            FDivergence::Alpha(a) => r.powf(a - 1.0),
        }
    }

    /// `f(exp(log_r))`.
    pub fn f_log(&self, log_r: f64) -> f64 {
        match *self {
            FDivergence::ReverseKl => -log_r,
            FDivergence::ForwardKl => log_r.exp() * log_r,
            FDivergence::ChiSquared => log_r.exp_m1().powi(2),
            FDivergence::Hellinger => (0.5 * log_r).exp_m1().powi(2),
            FDivergence::Alpha(a) => {
                let r = log_r.exp();
                ((a * log_r).exp_m1() - a * (r - 1.0)) / (a * (a - 1.0))
            }
        }
    }

    /// `h(exp(log_r))`.
    pub fn h_log(&self, log_r: f64) -> f64 {
        match *self {
            FDivergence::ReverseKl => log_r - 1.0,
            FDivergence::ForwardKl => log_r.exp(),
            FDivergence::ChiSquared => (2.0 * log_r).exp_m1(),
            FDivergence::Hellinger => (0.5 * log_r).exp_m1(),
            FDivergence::Alpha(a) => (a * log_r).exp_m1() / a,
        }
    }

    /// `h'(r) * r` at `r = exp(log_r)`: the factor multiplying
    /// `grad_x log r` in the path-derivative estimator.
    pub fn path_weight_log(&self, log_r: f64) -> f64 {
        let (coef, exponent) = self.weight_law();
        if exponent == 0.0 {
            coef
        } else {
            coef * (exponent * log_r).exp()
        }
    }
}

impl fmt::Display for FDivergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FDivergence::ReverseKl => write!(f, "reverse_kl"),
            FDivergence::ForwardKl => write!(f, "forward_kl"),
            FDivergence::ChiSquared => write!(f, "chi2"),
            FDivergence::Hellinger => write!(f, "hellinger"),
            FDivergence::Alpha(a) => write!(f, "alpha:{a}"),
        }
    }
}

impl FromStr for FDivergence {
    type Err = Error;

    /// `reverse_kl`, `forward_kl`, `chi2`, `hellinger` or `alpha:<a>`;
    /// `alpha:0` and `alpha:1` resolve to the KL variants.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if let Some(a) = s.strip_prefix("alpha:") {
            let a: f64 = a
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad alpha in {s:?}")))?;
            return match a {
                a if a == 0.0 => Ok(FDivergence::ReverseKl),
                a if a == 1.0 => Ok(FDivergence::ForwardKl),
                a => FDivergence::alpha(a),
            };
        }
        match s.as_str() {
            "reverse_kl" | "rkl" | "kl" => Ok(FDivergence::ReverseKl),
            "forward_kl" | "fkl" => Ok(FDivergence::ForwardKl),
            "chi2" | "chi_squared" => Ok(FDivergence::ChiSquared),
            "hellinger" => Ok(FDivergence::Hellinger),
            _ => Err(Error::InvalidArgument(format!("unknown divergence {s:?}"))),
        }
    }
}

pub fn make_divergence(name: &str, alpha: Option<f64>) -> Result<FDivergence> {
    match (name, alpha) {
        ("alpha", Some(a)) => FDivergence::alpha(a),
        ("alpha", None) => Err(Error::InvalidArgument("alpha divergence needs a value".into())),
        (other, None) => other.parse(),
        (other, Some(_)) => Err(Error::InvalidArgument(format!(
            "{other} takes no alpha parameter"
        ))),
    }
}

/// First variation of `q -> D_f(p || q)` at density ratio `r`:
/// `f(r) - r f'(r) = -h(r)`.
pub fn first_variation(div: FDivergence, r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::Domain(format!("density ratio must be > 0, got {r}")));
    }
    Ok(div.f(r) - r * div.f_prime(r))
}

/// Monte Carlo value of `D_f(p || q)` over reparameterized draws.
///
/// Mixtures are sampled by stratification: every component reuses the batch
/// and contributes with its weight.
pub fn estimate_divergence_mc<T: TargetDensity + ?Sized>(
    div: FDivergence,
    q: &FamilyParams,
    target: &T,
    noise: &crate::families::NoiseBatch,
) -> Result<f64> {
    let log_c = target.log_normalizer().ok_or_else(|| {
        Error::MissingCapability(
            "divergence values require normalized target; gradients do not".into(),
        )
    })?;
    if noise.is_empty() {
        return Err(Error::InvalidArgument("empty noise batch".into()));
    }
    let term = |x: &Row, log_q: f64| div.f_log(target.log_density_unnorm(x) - log_c - log_q);
    let n = noise.len() as f64;
    let value = match q {
        FamilyParams::Gaussian(p) => {
            let fac = p.factor()?;
            (0..noise.len())
                .map(|i| {
                    let x = p.sample_row(&noise.row(i));
                    term(&x, fac.log_density(&x))
                })
                .sum::<f64>()
                / n
        }
        FamilyParams::Diag(p) => {
            (0..noise.len())
                .map(|i| {
                    let x = p.sample_row(&noise.row(i));
                    term(&x, p.log_density(&x))
                })
                .sum::<f64>()
                / n
        }
        FamilyParams::Mixture(m) => {
            let fac = m.factor()?;
            let w = m.weights();
            let mut total = 0.0;
            for (k, c) in m.components.iter().enumerate() {
                let part: f64 = (0..noise.len())
                    .map(|i| {
                        let x = c.sample_row(&noise.row(i));
                        term(&x, fac.log_density(&x))
                    })
                    .sum();
                total += w[k] * part / n;
            }
            total
        }
    };
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "divergence estimate",
            index: 0,
        });
    }
    Ok(value)
}

/// Closed-form `KL(N(mu_q, cov_q) || N(mu_p, cov_p))`.
pub fn gaussian_kl(mu_q: &Row, cov_q: &Mat, mu_p: &Row, cov_p: &Mat) -> Result<f64> {
    crate::linalg::check_len(mu_p.len(), mu_q.len(), "mean")?;
    crate::linalg::check_len(cov_q.nrows(), mu_q.len(), "covariance")?;
    crate::linalg::check_len(cov_p.nrows(), mu_q.len(), "covariance")?;
    let lq = crate::linalg::cholesky_lower(cov_q, "q covariance")?;
    let lp = crate::linalg::cholesky_lower(cov_p, "p covariance")?;
    let logdet = |l: &Mat| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let chol_p = cov_p.clone().cholesky().expect("checked above");
    let trace = chol_p.solve(cov_q).trace();
    let d = (mu_p - mu_q).transpose();
    let quad = d.dot(&chol_p.solve(&d));
    let n = mu_q.len() as f64;
    Ok(0.5 * (trace + quad - n + logdet(&lp) - logdet(&lq)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::{GaussianParams, NoiseBatch};
    use crate::linalg::row_from;
    use crate::targets::{GaussianTarget, RosenbrockTarget};

    fn all() -> Vec<FDivergence> {
        vec![
            FDivergence::ReverseKl,
            FDivergence::ForwardKl,
            FDivergence::ChiSquared,
            FDivergence::Hellinger,
            FDivergence::Alpha(1.5),
            FDivergence::Alpha(-0.7),
            FDivergence::Alpha(2.0),
            FDivergence::Alpha(0.3),
        ]
    }

    fn log_grid() -> Vec<f64> {
        (0..=600).map(|i| 10f64.powf(-3.0 + i as f64 * 0.01)).collect()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn table_values() {
        let rkl = FDivergence::ReverseKl;
        assert!((rkl.h(2.0) - (2f64.ln() - 1.0)).abs() < 1e-15);
        assert!((rkl.h(2.0) + 0.30685).abs() < 1e-5);
        assert_eq!(rkl.h_prime(2.0), 0.5);
        let chi = FDivergence::ChiSquared;
        assert_eq!(chi.h(3.0), 8.0);
        assert_eq!(chi.f(3.0), 4.0);
    }

    #[test]
    fn quintuple_identities_on_log_grid() {
        for d in all() {
            assert!(d.f(1.0).abs() < 1e-12, "{d}");
            assert!((d.h(1.0) - d.f_prime(1.0)).abs() < 1e-12, "{d}");
            for r in log_grid() {
                let h = r * d.f_prime(r) - d.f(r);
                assert!(rel(d.h(r), h) < 1e-9, "{d} h at {r}");
                assert!(rel(d.h_prime(r), r * d.f_double_prime(r)) < 1e-9, "{d} h' at {r}");
                assert!(d.h_prime(r) >= 0.0);
            }
        }
    }

    #[test]
    fn log_space_evaluators_agree_with_direct() {
        for d in all() {
            for r in log_grid() {
                let lr = r.ln();
                assert!(rel(d.f_log(lr), d.f(r)) < 1e-9, "{d} f at {r}");
                assert!(rel(d.h_log(lr), d.h(r)) < 1e-9, "{d} h at {r}");
                assert!(rel(d.path_weight_log(lr), d.h_prime(r) * r) < 1e-9, "{d} w at {r}");
            }
        }
    }

    #[test]
    fn log_space_avoids_overflow() {
        let w = FDivergence::Alpha(0.5).path_weight_log(1000.0);
        assert!(w.is_finite());
        assert!(FDivergence::ReverseKl.h_log(1e6).is_finite());
    }

    #[test]
    fn alpha_two_is_half_chi_squared_weight() {
        for r in log_grid() {
            let lr = r.ln();
            let a = FDivergence::Alpha(2.0).path_weight_log(lr);
            assert_eq!(FDivergence::ChiSquared.path_weight_log(lr), 2.0 * a);
        }
    }

    #[test]
    fn first_variation_values() {
        assert_eq!(first_variation(FDivergence::ReverseKl, 1.0).unwrap(), 1.0);
        assert!((first_variation(FDivergence::ForwardKl, 2.0).unwrap() + 2.0).abs() < 1e-12);
        for d in all() {
            for r in log_grid() {
                let fv = first_variation(d, r).unwrap();
                assert!((fv + d.h(r)).abs() <= 1e-12 * (1.0 + d.h(r).abs()).max(r), "{d} {r}");
            }
        }
        assert!(matches!(
            first_variation(FDivergence::ChiSquared, 0.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn parse_names_and_aliases() {
        assert_eq!("reverse_kl".parse::<FDivergence>().unwrap(), FDivergence::ReverseKl);
        assert_eq!("chi2".parse::<FDivergence>().unwrap(), FDivergence::ChiSquared);
        assert_eq!("alpha:1.5".parse::<FDivergence>().unwrap(), FDivergence::Alpha(1.5));
        assert_eq!("alpha:0".parse::<FDivergence>().unwrap(), FDivergence::ReverseKl);
        assert_eq!("alpha:1".parse::<FDivergence>().unwrap(), FDivergence::ForwardKl);
        assert!("bogus".parse::<FDivergence>().is_err());
        for d in all() {
            assert_eq!(d.to_string().parse::<FDivergence>().unwrap(), d);
        }
    }

    #[test]
    fn generic_alpha_rejects_kl_limits() {
        assert!(FDivergence::alpha(0.0).is_err());
        assert!(FDivergence::alpha(1.0).is_err());
        assert!(make_divergence("alpha", Some(1.0)).is_err());
        assert_eq!(make_divergence("alpha", Some(0.5)).unwrap(), FDivergence::Alpha(0.5));
        assert_eq!(make_divergence("hellinger", None).unwrap(), FDivergence::Hellinger);
    }

    #[test]
    fn alpha_exponents() {
        assert_eq!(FDivergence::ReverseKl.alpha_exponent(), Some(0.0));
        assert_eq!(FDivergence::ForwardKl.alpha_exponent(), Some(1.0));
        assert_eq!(FDivergence::ChiSquared.alpha_exponent(), Some(2.0));
        assert_eq!(FDivergence::Hellinger.alpha_exponent(), Some(0.5));
    }

    // Trapezoid rule for 1D Gaussian pairs; the integrands decay like
    // Gaussians so a wide uniform grid is spectrally accurate.
    fn quad(f: impl Fn(f64) -> f64) -> f64 {
        let (a, b, n) = (-30.0, 30.0, 60_000);
        let h = (b - a) / n as f64;
        (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * f(a + i as f64 * h)
            })
            .sum::<f64>()
            * h
    }

    fn npdf(x: f64, m: f64, s: f64) -> f64 {
        (-(x - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    }

    #[test]
    fn dual_representation_identity() {
        let (mq, sq, mp, sp) = (0.3, 1.2, -0.2, 0.9);
        for d in all() {
            let r = |x: f64| npdf(x, mp, sp) / npdf(x, mq, sq);
            let lhs = quad(|x| npdf(x, mp, sp) * d.f_prime(r(x)))
                - quad(|x| npdf(x, mq, sq) * (r(x) * d.f_prime(r(x)) - d.f(r(x))));
            let rhs = quad(|x| npdf(x, mq, sq) * d.f(r(x)));
            assert!((lhs - rhs).abs() < 1e-6, "{d}: {lhs} vs {rhs}");
        }
    }

    fn se_check(div: FDivergence, q: GaussianParams, target: &GaussianTarget, oracle: f64) {
        let n = 100_000;
        let noise = NoiseBatch::standard(21, 0, n, 1);
        let est = estimate_divergence_mc(div, &FamilyParams::Gaussian(q.clone()), target, &noise)
            .unwrap();
        let fac = q.factor().unwrap();
        let vals: Vec<f64> = (0..n)
            .map(|i| {
                let x = q.sample_row(&noise.row(i));
                div.f_log(target.log_density_unnorm(&x) - fac.log_density(&x))
            })
            .collect();
        let m = vals.iter().sum::<f64>() / n as f64;
        let se = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64 * n as f64)).sqrt();
        assert!((est - oracle).abs() < 3.0 * se, "{div}: {est} vs {oracle} (se {se})");
    }

    #[test]
    fn reverse_kl_estimate_matches_closed_form() {
        let target = GaussianTarget::new(row_from(&[1.0]), Mat::identity(1, 1)).unwrap();
        se_check(FDivergence::ReverseKl, GaussianParams::standard(1), &target, 0.5);
    }

    #[test]
    fn chi_squared_estimate_matches_quadrature() {
        let target = GaussianTarget::new(row_from(&[0.5]), Mat::identity(1, 1)).unwrap();
        let oracle = quad(|x| {
            let r = npdf(x, 0.5, 1.0) / npdf(x, 0.0, 1.0);
            npdf(x, 0.0, 1.0) * (r - 1.0).powi(2)
        });
        se_check(FDivergence::ChiSquared, GaussianParams::standard(1), &target, oracle);
    }

    #[test]
    fn matched_distributions_give_exact_zero() {
        let target = GaussianTarget::new(
            row_from(&[0.4, -0.1]),
            Mat::from_row_slice(2, 2, &[0.8, 0.4, 0.4, 0.8]),
        )
        .unwrap();
        let q = FamilyParams::Gaussian(target.as_params());
        for d in all() {
            for seed in 0..3 {
                let noise = NoiseBatch::standard(seed, 0, 50, 2);
                assert_eq!(estimate_divergence_mc(d, &q, &target, &noise).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn unnormalized_target_is_rejected_for_values() {
        struct Bare(RosenbrockTarget);
        impl TargetDensity for Bare {
            fn dim(&self) -> usize {
                2
            }
            fn log_density_unnorm(&self, x: &Row) -> f64 {
                self.0.log_density_unnorm(x)
            }
            fn score(&self, x: &Row) -> Row {
                self.0.score(x)
            }
            fn name(&self) -> String {
                "bare".into()
            }
        }
        let q = FamilyParams::Gaussian(GaussianParams::standard(2));
        let e = estimate_divergence_mc(
            FDivergence::ReverseKl,
            &q,
            &Bare(RosenbrockTarget::default()),
            &NoiseBatch::standard(0, 0, 4, 2),
        )
        .unwrap_err();
        assert!(e.to_string().contains("require normalized target"));
    }

    #[test]
    fn gaussian_kl_closed_form() {
        let i = Mat::identity(1, 1);
        let kl = gaussian_kl(&row_from(&[0.0]), &i, &row_from(&[1.0]), &i).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
        // q = N(0, 4), p = N(0, 1): 0.5 (4 - 1 - ln 4)
        let kl = gaussian_kl(&row_from(&[0.0]), &(i.clone() * 4.0), &row_from(&[0.0]), &i).unwrap();
        assert!((kl - 0.5 * (3.0 - 4f64.ln())).abs() < 1e-15);
    }
}
