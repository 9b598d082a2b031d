//! Run configuration: a flat JSON object with defaults for every field.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::divergences::FDivergence;
use crate::error::{Error, Result};
use crate::families::{DiagGaussianParams, FamilyParams, GaussianParams, MixtureParams};
use crate::flows::RhsForm;
use crate::linalg::{mat_from_rows, row_from, Mat};
use crate::targets::{
    load_uci_csv, CsvOptions, GaussianTarget, LogisticPosterior, MixtureTarget, RosenbrockTarget,
    TargetDensity, UciSplit,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    ReparamKl,
    Path,
    ClosedFormGaussian,
    Distill,
    OdeCovHessianFree,
    OdeCovHessian,
    OdeScale,
    Langevin,
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::ReparamKl => "reparam_kl",
            Estimator::Path => "path",
            Estimator::ClosedFormGaussian => "closed_form_gaussian",
            Estimator::Distill => "distill",
            Estimator::OdeCovHessianFree => "ode_cov_hessian_free",
            Estimator::OdeCovHessian => "ode_cov_hessian",
            Estimator::OdeScale => "ode_scale",
            Estimator::Langevin => "langevin",
        }
    }

    pub fn ode_form(&self) -> Option<RhsForm> {
        match self {
            Estimator::OdeCovHessianFree => Some(RhsForm::HessianFree),
            Estimator::OdeCovHessian => Some(RhsForm::Hessian),
            Estimator::OdeScale => Some(RhsForm::Scale),
            _ => None,
        }
    }
}

impl FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::InvalidArgument(format!("unknown estimator {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// `gaussian`, `rosenbrock`, `mixture1d`, `mixture` or `blr`.
    pub target: String,
    pub target_mean: Vec<f64>,
    pub target_cov: Vec<Vec<f64>>,
    pub rosenbrock_a: f64,
    pub rosenbrock_b: f64,
    pub rosenbrock_mu: f64,
    pub mixture_weights: Vec<f64>,
    pub mixture_means: Vec<Vec<f64>>,
    pub mixture_covs: Vec<Vec<Vec<f64>>>,
    pub dataset: Option<PathBuf>,
    pub label_column: i64,
    pub standardize: bool,
    pub split_seed: u64,
    pub test_fraction: f64,
    pub prior_variance: f64,

    /// `gaussian`, `diag` or `mixture`.
    pub family: String,
    pub components: usize,
    /// Initial mean; defaults to `(4, 2)` in 2D and zero otherwise.
    pub init_mean: Option<Vec<f64>>,
    pub init_scale: Option<Vec<Vec<f64>>>,
    pub init_log_std: Option<Vec<f64>>,

    pub divergence: String,
    pub estimator: Estimator,
    pub learning_rate: f64,
    pub mc_samples: usize,
    pub iterations: usize,
    pub seed: u64,
    pub ratio_shift: bool,
    /// Use closed-form Gaussian expectations in the ODE estimators.
    pub analytic_expectations: bool,
    /// ODE form for `flow-demo`: `hessian_free`, `hessian`, `sarkka`, `scale`.
    pub ode_form: String,

    pub out: Option<PathBuf>,
    pub record_every: usize,
    pub w2_every: usize,
    pub divergence_eval_every: usize,
    pub divergence_eval_samples: usize,
    pub particle_count: usize,

    pub eval_seeds: usize,
    pub posterior_samples: usize,
    /// `estimator:divergence` pairs trained by `run_blr`; empty means the
    /// configured estimator and divergence.
    pub blr_methods: Vec<String>,

    /// `[x_min, x_max, y_min, y_max]` for 2D density dumps.
    pub grid_box: [f64; 4],
    pub geodesic_from: Vec<Vec<f64>>,
    pub geodesic_to: Vec<Vec<f64>>,
    pub geodesic_points: usize,
}

pub const FIG_TARGET_COV: [[f64; 2]; 2] = [[0.8, 0.4], [0.4, 0.8]];

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            target: "gaussian".into(),
            target_mean: vec![0.0, 0.0],
            target_cov: FIG_TARGET_COV.iter().map(|r| r.to_vec()).collect(),
            rosenbrock_a: 1.0,
            rosenbrock_b: 1.0,
            rosenbrock_mu: 1.0,
            mixture_weights: Vec::new(),
            mixture_means: Vec::new(),
            mixture_covs: Vec::new(),
            dataset: None,
            label_column: -1,
            standardize: true,
            split_seed: 0,
            test_fraction: 0.2,
            prior_variance: 1.0,
            family: "gaussian".into(),
            components: 1,
            init_mean: None,
            init_scale: None,
            init_log_std: None,
            divergence: "reverse_kl".into(),
            estimator: Estimator::Path,
            learning_rate: 0.01,
            mc_samples: 5,
            iterations: 3000,
            seed: 0,
            ratio_shift: true,
            analytic_expectations: false,
            ode_form: "hessian_free".into(),
            out: None,
            record_every: 1,
            w2_every: 1,
            divergence_eval_every: 0,
            divergence_eval_samples: 1000,
            particle_count: 10_000,
            eval_seeds: 5,
            posterior_samples: 32,
            blr_methods: Vec::new(),
            grid_box: [-3.0, 5.0, -3.0, 12.0],
            geodesic_from: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            geodesic_to: FIG_TARGET_COV.iter().map(|r| r.to_vec()).collect(),
            geodesic_points: 101,
        }
    }
}

/// The target a configuration describes, with any loaded data split.
pub enum BuiltTarget {
    Gaussian(GaussianTarget),
    Rosenbrock(RosenbrockTarget),
    Mixture(MixtureTarget),
    Logistic {
        posterior: LogisticPosterior,
        split: Box<UciSplit>,
    },
}

impl BuiltTarget {
    pub fn density(&self) -> &dyn TargetDensity {
        match self {
            BuiltTarget::Gaussian(t) => t,
            BuiltTarget::Rosenbrock(t) => t,
            BuiltTarget::Mixture(t) => t,
            BuiltTarget::Logistic { posterior, .. } => posterior,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    /// Starting point for a CLI subcommand: `fit` and `flow-demo` use the
    /// plain defaults, `gmm-fit` the 1D mixture experiment, `blr` the
    /// logistic-regression experiment.
    pub fn preset(command: &str) -> Self {
        let base = Self::default();
        match command {
            "gmm-fit" => Self {
                target: "mixture1d".into(),
                family: "mixture".into(),
                components: 4,
                divergence: "forward_kl".into(),
                iterations: 10_000,
                learning_rate: 0.01,
                mc_samples: 20,
                w2_every: 0,
                record_every: 10,
                divergence_eval_every: 100,
                ..base
            },
            "blr" => Self {
                target: "blr".into(),
                family: "diag".into(),
                iterations: 5000,
                learning_rate: 0.01,
                mc_samples: 32,
                w2_every: 0,
                record_every: 50,
                blr_methods: vec!["reparam_kl:reverse_kl".into(), "path:reverse_kl".into()],
                ..base
            },
            _ => base,
        }
    }

    /// Overlays the keys of a JSON object onto `base`; unknown keys are
    /// rejected.
    pub fn from_json_over(base: &RunConfig, text: &str) -> Result<Self> {
        let overlay: serde_json::Value = serde_json::from_str(text)?;
        let serde_json::Value::Object(overlay) = overlay else {
            return Err(Error::InvalidArgument("config must be a JSON object".into()));
        };
        let mut merged = serde_json::to_value(base)?;
        let obj = merged.as_object_mut().expect("config is an object");
        for (k, v) in overlay {
            obj.insert(k, v);
        }
        Ok(serde_json::from_value(merged)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn divergence(&self) -> Result<FDivergence> {
        self.divergence.parse()
    }

    pub fn ode_form(&self) -> Result<RhsForm> {
        self.ode_form.parse()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be >= 1".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if self.record_every == 0 {
            return bad("record_every must be >= 1".into());
        }
        if self.components == 0 {
            return bad("components must be >= 1".into());
        }
        self.divergence()?;
        self.ode_form()?;
        let family = self.family.as_str();
        if !matches!(family, "gaussian" | "diag" | "mixture") {
            return bad(format!("unknown family {family:?}"));
        }
        match self.estimator {
            Estimator::ClosedFormGaussian if family != "gaussian" => {
                return bad("closed_form_gaussian requires the full Gaussian family".into())
            }
            Estimator::ClosedFormGaussian if self.divergence()? != FDivergence::ReverseKl => {
                return bad("closed_form_gaussian is the reverse KL gradient".into())
            }
            Estimator::ReparamKl | Estimator::Distill if family == "mixture" => {
                return bad(format!("{} needs a single Gaussian family", self.estimator.name()))
            }
            Estimator::ReparamKl if self.divergence()? != FDivergence::ReverseKl => {
                return bad("reparam_kl differentiates the reverse KL only".into())
            }
            Estimator::OdeCovHessianFree | Estimator::OdeCovHessian | Estimator::OdeScale
                if family != "gaussian" =>
            {
                return bad("ODE estimators evolve a full Gaussian state".into())
            }
            _ => {}
        }
        if self.analytic_expectations && self.target != "gaussian" {
            return bad("analytic expectations need the Gaussian target".into());
        }
        Ok(())
    }

    pub fn build_target(&self) -> Result<BuiltTarget> {
        match self.target.as_str() {
            "gaussian" => Ok(BuiltTarget::Gaussian(GaussianTarget::new(
                row_from(&self.target_mean),
                mat_from_rows(&self.target_cov)?,
            )?)),
            "rosenbrock" => Ok(BuiltTarget::Rosenbrock(RosenbrockTarget::new(
                self.rosenbrock_a,
                self.rosenbrock_b,
                self.rosenbrock_mu,
            )?)),
            "mixture1d" => Ok(BuiltTarget::Mixture(MixtureTarget::trimodal_1d())),
            "mixture" => {
                if self.mixture_means.len() != self.mixture_covs.len() {
                    return Err(Error::InvalidArgument(
                        "mixture_means and mixture_covs differ in length".into(),
                    ));
                }
                let comps = self
                    .mixture_means
                    .iter()
                    .zip(&self.mixture_covs)
                    .map(|(m, c)| GaussianTarget::new(row_from(m), mat_from_rows(c)?))
                    .collect::<Result<Vec<_>>>()?;
                Ok(BuiltTarget::Mixture(MixtureTarget::new(
                    self.mixture_weights.clone(),
                    comps,
                )?))
            }
            "blr" => {
                let path = self.dataset.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("target blr needs a dataset path".into())
                })?;
                let split = load_uci_csv(
                    path,
                    &CsvOptions {
                        label_column: self.label_column,
                        standardize: self.standardize,
                        split_seed: self.split_seed,
                        test_fraction: self.test_fraction,
                    },
                )?;
                let posterior = LogisticPosterior::from_dataset(&split.train, self.prior_variance)?;
                Ok(BuiltTarget::Logistic {
                    posterior,
                    split: Box::new(split),
                })
            }
            other => Err(Error::InvalidArgument(format!("unknown target {other:?}"))),
        }
    }

    /// Initial variational parameters for a target of dimension `dim`.
    pub fn initial_params(&self, dim: usize) -> Result<FamilyParams> {
        let mean = match &self.init_mean {
            Some(m) => row_from(m),
            None if dim == 2 && self.target == "gaussian" => row_from(&[4.0, 2.0]),
            None => crate::linalg::Row::zeros(dim),
        };
        crate::linalg::check_len(mean.len(), dim, "init_mean")?;
        match self.family.as_str() {
            "gaussian" => {
                let scale = match &self.init_scale {
                    Some(s) => mat_from_rows(s)?,
                    None => Mat::identity(dim, dim),
                };
                Ok(FamilyParams::Gaussian(GaussianParams::new(mean, scale)?))
            }
            "diag" => {
                let log_std = match &self.init_log_std {
                    Some(l) => row_from(l),
                    None => crate::linalg::Row::zeros(dim),
                };
                Ok(FamilyParams::Diag(DiagGaussianParams::new(mean, log_std)?))
            }
            "mixture" => {
                let mut m = MixtureParams::random_init(self.components, dim, self.seed)?;
                if let Some(s) = &self.init_scale {
                    let s = mat_from_rows(s)?;
                    for c in &mut m.components {
                        c.scale = s.clone();
                    }
                }
                Ok(FamilyParams::Mixture(m))
            }
            other => Err(Error::InvalidArgument(format!("unknown family {other:?}"))),
        }
    }
}
