//! The optimization loop and the experiment drivers built on it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::divergences::{estimate_divergence_mc, FDivergence};
use crate::error::{Error, Result};
use crate::families::{stream_id, Density, FamilyParams, GaussianParams, MixtureParams, NoiseBatch};
use crate::flows::{distill_step, euler_step, langevin_advance, FlowState, NoisePolicy, ParticleCloud, RhsForm};
use crate::geometry::{bures_distance, geodesic, horizontal_lift_geodesic, lift_length, w2_gaussian, SymmetricPd};
use crate::gradients::{
    gaussian_closed_form_path_gradient, gmm_surrogate_gradient, path_gradient, reparam_gradient_kl,
    GradEstimate, PathOptions,
};
use crate::linalg::{self, mat_from_rows, Mat, Row};
use crate::targets::{sigmoid, GaussianTarget, LogisticPosterior, TargetDensity};

use super::config::{BuiltTarget, Estimator, RunConfig};
use super::trajectory::{
    emit_plot_data, moment_values, param_columns, param_values, provenance, PlotData, PlotFormat,
    Trajectory, TrajectoryRow,
};

/// Stream of the fixed noise used to evaluate divergences along a run.
const EVAL_STREAM: u64 = u64::MAX - 2;
/// Streams `BLR_EVAL_STREAM - s` draw the posterior samples of evaluation seed `s`.
const BLR_EVAL_STREAM: u64 = u64::MAX - 16;

/// Per-run context shared by every estimator loop.
struct Recorder<'a> {
    cfg: &'a RunConfig,
    target: &'a dyn TargetDensity,
    div: FDivergence,
    eval_noise: Option<NoiseBatch>,
    divergence_every: usize,
}

impl<'a> Recorder<'a> {
    fn new(cfg: &'a RunConfig, target: &'a dyn TargetDensity) -> Result<Self> {
        // Without a closed-form W2 the divergence column takes its place.
        let divergence_every = match (cfg.divergence_eval_every, target.as_gaussian()) {
            (0, None) => cfg.w2_every,
            (k, _) => k,
        };
        let eval_noise = (divergence_every > 0).then(|| {
            NoiseBatch::standard(cfg.seed, EVAL_STREAM, cfg.divergence_eval_samples.max(1), target.dim())
        });
        Ok(Self {
            cfg,
            target,
            div: cfg.divergence()?,
            eval_noise,
            divergence_every,
        })
    }

    fn due(every: usize, step: usize, last: bool) -> bool {
        every > 0 && (last || step % every == 0)
    }

    fn w2(&self, step: usize, last: bool, mean: &Row, cov: &Mat) -> Result<Option<f64>> {
        match self.target.as_gaussian() {
            Some(g) if Self::due(self.cfg.w2_every, step, last) => {
                Ok(Some(w2_gaussian(mean, cov, g.mean(), g.covariance())?))
            }
            _ => Ok(None),
        }
    }

    /// `(divergence, surrogate)` on the fixed evaluation batch.
    fn divergence(&self, step: usize, last: bool, params: &FamilyParams) -> (Option<f64>, Option<f64>) {
        let Some(noise) = self.eval_noise.as_ref().filter(|_| Self::due(self.divergence_every, step, last))
        else {
            return (None, None);
        };
        if self.target.log_normalizer().is_some() {
            (estimate_divergence_mc(self.div, params, self.target, noise).ok(), None)
        } else {
            (None, surrogate_objective(self.div, params, self.target, noise).ok())
        }
    }

    fn row(
        &self,
        step: usize,
        last: bool,
        params: &FamilyParams,
        grad: Option<&GradEstimate>,
    ) -> Result<TrajectoryRow> {
        let w2 = match params.gaussian_moments() {
            Some((m, c)) => self.w2(step, last, &m, &c)?,
            None => None,
        };
        let (divergence, surrogate) = self.divergence(step, last, params);
        Ok(TrajectoryRow {
            step,
            t: step as f64 * self.cfg.learning_rate,
            params: param_values(params),
            w2_to_target: w2,
            divergence,
            surrogate,
            grad_norm: grad.map(|g| g.grad.norm()),
            log_r_shift: grad.map(|g| g.log_r_shift),
        })
    }

    fn records(&self, step: usize) -> bool {
        step % self.cfg.record_every == 0
    }
}

/// `-sum_k m_k mean_i h(r(x_ki))` with unnormalized `r` and no shift;
/// single Gaussians use one stratum.
pub fn surrogate_objective(
    div: FDivergence,
    params: &FamilyParams,
    target: &dyn TargetDensity,
    noise: &NoiseBatch,
) -> Result<f64> {
    let mean_h = |q: &dyn Density, draw: &dyn Fn(&Row) -> Row| -> f64 {
        (0..noise.len())
            .map(|i| {
                let x = draw(&noise.row(i));
                div.h_log(target.log_density_unnorm(&x) - q.log_density(&x))
            })
            .sum::<f64>()
            / noise.len() as f64
    };
    let value = match params {
        FamilyParams::Gaussian(p) => {
            let fac = p.factor()?;
            -mean_h(&fac, &|z| p.sample_row(z))
        }
        FamilyParams::Diag(p) => -mean_h(p, &|z| p.sample_row(z)),
        FamilyParams::Mixture(m) => {
            let fac = m.factor()?;
            let w = m.weights();
            -m.components
                .iter()
                .enumerate()
                .map(|(k, c)| w[k] * mean_h(&fac, &|z| c.sample_row(z)))
                .sum::<f64>()
        }
    };
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            what: "surrogate objective",
            index: 0,
        })
    }
}

fn step_error(step: usize, last_good: String) -> impl FnOnce(Error) -> Error {
    move |e| Error::Step {
        step,
        last_good,
        source: Box::new(e),
    }
}

/// Runs the configured estimator and records its trajectory.
pub fn run_vi(cfg: &RunConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let built = cfg.build_target()?;
    let target = built.density();
    let init = cfg.initial_params(target.dim())?;
    run_vi_on(cfg, target, init)
}

/// [`run_vi`] with an explicit target and starting point.
pub fn run_vi_on(cfg: &RunConfig, target: &dyn TargetDensity, init: FamilyParams) -> Result<Trajectory> {
    cfg.validate()?;
    linalg::check_len(init.dim(), target.dim(), "initial parameters")?;
    match cfg.estimator {
        Estimator::OdeCovHessianFree | Estimator::OdeCovHessian | Estimator::OdeScale => {
            let form = cfg.estimator.ode_form().expect("ODE estimator");
            run_ode(cfg, target, &gaussian_init(&init)?, form)
        }
        Estimator::Langevin => run_langevin(cfg, target, &gaussian_init(&init)?),
        _ => run_gradient_descent(cfg, target, init),
    }
}

fn gaussian_init(init: &FamilyParams) -> Result<GaussianParams> {
    match init {
        FamilyParams::Gaussian(p) => Ok(p.clone()),
        FamilyParams::Diag(p) => GaussianParams::from_mean_cov(p.mean.clone(), &p.covariance()),
        FamilyParams::Mixture(_) => Err(Error::InvalidArgument(
            "this estimator needs a single Gaussian start".into(),
        )),
    }
}

fn mixture_batches(m: &MixtureParams, seed: u64, step: usize, n: usize) -> Vec<NoiseBatch> {
    (0..m.k())
        .map(|c| NoiseBatch::standard(seed, stream_id(step as u64, c as u64), n, m.dim()))
        .collect()
}

fn gradient_at(
    cfg: &RunConfig,
    target: &dyn TargetDensity,
    div: FDivergence,
    params: &FamilyParams,
    step: usize,
) -> Result<GradEstimate> {
    let opts = PathOptions {
        ratio_shift: cfg.ratio_shift,
        ..PathOptions::default()
    };
    if let FamilyParams::Mixture(m) = params {
        let batches = mixture_batches(m, cfg.seed, step, cfg.mc_samples);
        return gmm_surrogate_gradient(m, target, div, &batches, opts);
    }
    let noise = NoiseBatch::standard(cfg.seed, stream_id(step as u64, 0), cfg.mc_samples, params.dim());
    match (cfg.estimator, params) {
        (Estimator::ReparamKl, _) => reparam_gradient_kl(params, target, &noise),
        (Estimator::ClosedFormGaussian, FamilyParams::Gaussian(p)) => {
            gaussian_closed_form_path_gradient(p, target, &noise)
        }
        (Estimator::Distill, _) => {
            Ok(distill_step(params, target, div, cfg.learning_rate, &noise, opts)?.0)
        }
        _ => path_gradient(params, target, div, &noise, opts),
    }
}

fn run_gradient_descent(cfg: &RunConfig, target: &dyn TargetDensity, init: FamilyParams) -> Result<Trajectory> {
    let rec = Recorder::new(cfg, target)?;
    let div = rec.div;
    let mut traj = Trajectory::new(cfg.estimator.name(), cfg.clone(), param_columns(&init));
    // Distillation already returns tau times the path gradient.
    let lr = match cfg.estimator {
        Estimator::Distill => 1.0,
        _ => cfg.learning_rate,
    };
    let mut params = init;
    for k in 0..cfg.iterations {
        let est = gradient_at(cfg, target, div, &params, k).map_err(step_error(k, params.to_json()))?;
        if rec.records(k) {
            traj.push(rec.row(k, false, &params, Some(&est))?)?;
        }
        params = est
            .grad
            .descend(&params, lr)
            .map_err(step_error(k, params.to_json()))?;
    }
    traj.push(rec.row(cfg.iterations, true, &params, None)?)?;
    traj.final_params = Some(params);
    Ok(traj)
}

fn ode_label(form: RhsForm) -> &'static str {
    match form {
        RhsForm::HessianFree => "ode_cov_hessian_free",
        RhsForm::Hessian => "ode_cov_hessian",
        RhsForm::Sarkka => "ode_cov_sarkka",
        RhsForm::Scale => "ode_scale",
    }
}

/// Forward Euler on the Bures-Wasserstein ODE with step `learning_rate`.
/// Monte Carlo expectations use the same per-step noise as [`run_vi`].
pub fn run_ode(
    cfg: &RunConfig,
    target: &dyn TargetDensity,
    init: &GaussianParams,
    form: RhsForm,
) -> Result<Trajectory> {
    let rec = Recorder::new(cfg, target)?;
    let tau = cfg.learning_rate;
    let policy = if cfg.analytic_expectations {
        NoisePolicy::Analytic
    } else {
        NoisePolicy::Fresh {
            seed: cfg.seed,
            samples: cfg.mc_samples,
        }
    };
    let mut state = match form {
        RhsForm::Scale => FlowState::scale_from(init),
        _ => FlowState::covariance_from(init),
    };
    let columns = param_columns(&FamilyParams::Gaussian(init.clone()));
    let mut traj = Trajectory::new(ode_label(form), cfg.clone(), columns);
    let row = |k: usize, last: bool, s: &FlowState, norm: Option<f64>| -> Result<TrajectoryRow> {
        let cov = s.covariance();
        Ok(TrajectoryRow {
            step: k,
            t: k as f64 * tau,
            params: moment_values(s.mean(), &cov),
            w2_to_target: rec.w2(k, last, s.mean(), &cov)?,
            divergence: rec
                .divergence(k, last, &FamilyParams::Gaussian(s.to_params()?))
                .0,
            surrogate: None,
            grad_norm: norm,
            log_r_shift: None,
        })
    };
    for k in 0..cfg.iterations {
        let batch = policy.batch(k as u64, state.dim());
        let next = euler_step(&state, form, target, tau, batch.as_ref())
            .map_err(step_error(k, state.to_json()))?;
        if rec.records(k) {
            let d_mean = (next.mean() - state.mean()).norm_squared();
            let d_mat = match (&next, &state) {
                (FlowState::Scale { scale: a, .. }, FlowState::Scale { scale: b, .. }) => (a - b).norm_squared(),
                _ => (next.covariance() - state.covariance()).norm_squared(),
            };
            traj.push(row(k, false, &state, Some((d_mean + d_mat).sqrt() / tau))?)?;
        }
        state = next;
    }
    traj.push(row(cfg.iterations, true, &state, None)?)?;
    traj.final_params = Some(FamilyParams::Gaussian(state.to_params()?));
    Ok(traj)
}

/// Unadjusted Langevin cloud of `particle_count` particles with
/// `dt = learning_rate`, recorded through its moment fit.
pub fn run_langevin(cfg: &RunConfig, target: &dyn TargetDensity, init: &GaussianParams) -> Result<Trajectory> {
    let rec = Recorder::new(cfg, target)?;
    let mut cloud = ParticleCloud::sample(init, cfg.particle_count, cfg.seed)?;
    let columns = param_columns(&FamilyParams::Gaussian(init.clone()));
    let mut traj = Trajectory::new("langevin", cfg.clone(), columns);
    let mut degenerate_steps = Vec::new();
    let mut record = |k: usize, last: bool, cloud: &ParticleCloud, traj: &mut Trajectory| -> Result<GaussianParams> {
        let fit = cloud.fit()?;
        if fit.degenerate {
            degenerate_steps.push(k);
        }
        let cov = fit.cov.matrix().clone();
        let params = GaussianParams::from_mean_cov(fit.mean.clone(), &cov)?;
        if last || rec.records(k) {
            traj.push(TrajectoryRow {
                step: k,
                t: k as f64 * cfg.learning_rate,
                params: moment_values(&fit.mean, &cov),
                w2_to_target: rec.w2(k, last, &fit.mean, &cov)?,
                divergence: None,
                surrogate: None,
                grad_norm: None,
                log_r_shift: None,
            })?;
        }
        Ok(params)
    };
    for k in 0..cfg.iterations {
        if rec.records(k) {
            record(k, false, &cloud, &mut traj)?;
        }
        cloud = langevin_advance(&cloud, target, cfg.learning_rate).map_err(|e| Error::Step {
            step: k,
            last_good: format!("{{\"steps_taken\":{},\"time\":{}}}", cloud.steps_taken, cloud.time),
            source: Box::new(e),
        })?;
    }
    let last = record(cfg.iterations, true, &cloud, &mut traj)?;
    if !degenerate_steps.is_empty() {
        traj.header.notes.push(format!(
            "moment fit degenerate at {} recorded steps (first {})",
            degenerate_steps.len(),
            degenerate_steps[0]
        ));
    }
    traj.final_params = Some(FamilyParams::Gaussian(last));
    Ok(traj)
}

/// The four matched runs of the flow comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowComparison {
    pub rep: Trajectory,
    pub path: Trajectory,
    pub ode: Trajectory,
    pub langevin: Trajectory,
}

impl FlowComparison {
    pub fn all(&self) -> [&Trajectory; 4] {
        [&self.rep, &self.path, &self.ode, &self.langevin]
    }

    /// W2 between the Langevin moment fit and the ODE state at every step
    /// recorded by both.
    pub fn cloud_to_ode_w2(&self) -> Result<Vec<(usize, f64)>> {
        let mut out = Vec::new();
        let mut j = 0;
        for (i, row) in self.langevin.rows.iter().enumerate() {
            while j < self.ode.rows.len() && self.ode.rows[j].step < row.step {
                j += 1;
            }
            if j < self.ode.rows.len() && self.ode.rows[j].step == row.step {
                let (ma, ca) = self.langevin.gaussian_at(i).expect("Gaussian summary");
                let (mb, cb) = self.ode.gaussian_at(j).expect("Gaussian summary");
                out.push((row.step, w2_gaussian(&ma, &ca, &mb, &cb)?));
            }
        }
        Ok(out)
    }

    /// Writes `rep`, `path`, `ode` and `langevin` files into `dir`.
    pub fn write_dir(&self, dir: &Path, format: PlotFormat) -> Result<()> {
        let ext = match format {
            PlotFormat::Csv => "csv",
            PlotFormat::Json => "json",
        };
        for (name, t) in ["rep", "path", "ode", "langevin"].iter().zip(self.all()) {
            emit_plot_data(t, &dir.join(format!("{name}.{ext}")), format)?;
        }
        Ok(())
    }
}

/// BBVI with the reparameterization and path gradients, the ODE in the
/// configured form and a Langevin cloud, all from the same start on the
/// same step grid (Langevin `dt` equals the learning rate).
pub fn run_flow_comparison(cfg: &RunConfig) -> Result<FlowComparison> {
    let base = RunConfig {
        divergence: "reverse_kl".into(),
        family: "gaussian".into(),
        ..cfg.clone()
    };
    base.validate()?;
    let built = base.build_target()?;
    let target = built.density();
    if target.as_gaussian().is_none() {
        return Err(Error::InvalidArgument("flow comparison needs a Gaussian target".into()));
    }
    let init = base.initial_params(target.dim())?;
    let with = |e: Estimator| RunConfig {
        estimator: e,
        ..base.clone()
    };
    let form = base.ode_form()?;
    let g = gaussian_init(&init)?;
    Ok(FlowComparison {
        rep: run_vi_on(&with(Estimator::ReparamKl), target, init.clone())?,
        path: run_vi_on(&with(Estimator::Path), target, init.clone())?,
        ode: run_ode(&base, target, &g, form)?,
        langevin: run_langevin(&with(Estimator::Langevin), target, &g)?,
    })
}

/// Densities of the fit and the target on a regular grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub dim: usize,
    /// Area (or length) of one grid cell.
    pub cell: f64,
    /// True when `p` is the normalized target density.
    pub normalized: bool,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl DensityGrid {
    pub fn evaluate(q: &dyn Density, target: &dyn TargetDensity, box_: [f64; 4]) -> Result<Self> {
        let log_c = target.log_normalizer();
        let p = |x: &Row| (target.log_density_unnorm(x) - log_c.unwrap_or(0.0)).exp();
        let (columns, rows, cell) = match target.dim() {
            1 => {
                let (lo, hi, n) = (-6.0, 8.0, 1000);
                let h = (hi - lo) / (n - 1) as f64;
                let rows = crate::parallel::ordered_map(n, |i| {
                    let x = Row::from_element(1, lo + h * i as f64);
                    vec![x[0], q.log_density(&x).exp(), p(&x)]
                });
                (vec!["x", "q", "p"], rows, h)
            }
            2 => {
                let n = 200;
                let hx = (box_[1] - box_[0]) / (n - 1) as f64;
                let hy = (box_[3] - box_[2]) / (n - 1) as f64;
                let rows = crate::parallel::ordered_map(n * n, |idx| {
                    let (i, j) = (idx / n, idx % n);
                    let x = linalg::row_from(&[box_[0] + hx * i as f64, box_[2] + hy * j as f64]);
                    vec![x[0], x[1], q.log_density(&x).exp(), p(&x)]
                });
                (vec!["x", "y", "q", "p"], rows, hx * hy)
            }
            d => {
                return Err(Error::InvalidArgument(format!(
                    "density grids are 1D or 2D, target has dimension {d}"
                )))
            }
        };
        Ok(Self {
            dim: target.dim(),
            cell,
            normalized: log_c.is_some(),
            columns: columns.into_iter().map(String::from).collect(),
            rows,
        })
    }

    /// Riemann-sum total variation `0.5 sum |q - p| cell`.
    pub fn total_variation(&self) -> f64 {
        let (iq, ip) = (self.dim, self.dim + 1);
        0.5 * self.rows.iter().map(|r| (r[iq] - r[ip]).abs()).sum::<f64>() * self.cell
    }
}

impl PlotData for DensityGrid {
    fn schema(&self) -> String {
        format!(
            "bwflow density grid; dim={}; cell={}; p={}; provenance={}",
            self.dim,
            self.cell,
            if self.normalized { "normalized" } else { "unnormalized" },
            provenance()
        )
    }

    fn columns(&self) -> Vec<String> {
        self.columns.clone()
    }

    fn table(&self) -> Vec<Vec<Option<f64>>> {
        self.rows.iter().map(|r| r.iter().map(|v| Some(*v)).collect()).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmFit {
    pub trajectory: Trajectory,
    pub grid: DensityGrid,
}

/// Fits a Gaussian mixture with the surrogate path gradient and evaluates
/// the result on a grid.
pub fn run_gmm_fit(cfg: &RunConfig) -> Result<GmmFit> {
    if cfg.family != "mixture" {
        return Err(Error::InvalidArgument("gmm-fit needs family \"mixture\"".into()));
    }
    let trajectory = run_vi(cfg)?;
    let built = cfg.build_target()?;
    let Some(FamilyParams::Mixture(m)) = &trajectory.final_params else {
        unreachable!("mixture run ends with mixture parameters")
    };
    let grid = DensityGrid::evaluate(&m.factor()?, built.density(), cfg.grid_box)?;
    Ok(GmmFit { trajectory, grid })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlrRow {
    pub method: String,
    pub test_accuracy_mean: f64,
    pub test_accuracy_std: f64,
    pub posterior_sample_count: usize,
    /// One accuracy per evaluation seed.
    pub accuracies: Vec<f64>,
    pub final_params: FamilyParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlrReport {
    pub provenance: String,
    pub dataset: String,
    pub train_size: usize,
    pub test_size: usize,
    pub features: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub mc_samples: usize,
    pub rows: Vec<BlrRow>,
}

impl BlrReport {
    pub fn row(&self, method: &str) -> Option<&BlrRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Parses `estimator:divergence`, e.g. `path:alpha:0.5`.
pub fn parse_method(s: &str) -> Result<(Estimator, FDivergence)> {
    let (e, d) = s
        .split_once(':')
        .ok_or_else(|| Error::InvalidArgument(format!("method {s:?} is not estimator:divergence")))?;
    Ok((e.parse()?, d.parse()?))
}

/// Test accuracy of the posterior-predictive mean over `samples` draws of
/// `q`, thresholded at 0.5.
pub fn predictive_accuracy(q: &FamilyParams, features: &Mat, labels: &[f64], noise: &NoiseBatch) -> Result<f64> {
    let FamilyParams::Diag(p) = q else {
        return Err(Error::InvalidArgument("predictive accuracy expects a diagonal Gaussian".into()));
    };
    linalg::check_len(noise.dim(), p.dim(), "posterior noise")?;
    linalg::check_len(features.ncols() + 1, p.dim(), "weights")?;
    let ws: Vec<Row> = (0..noise.len()).map(|i| p.sample_row(&noise.row(i))).collect();
    let correct = (0..labels.len())
        .filter(|&i| {
            let x: Vec<f64> = features.row(i).iter().copied().collect();
            let prob = ws.iter().map(|w| sigmoid(LogisticPosterior::logit(w, &x))).sum::<f64>() / ws.len() as f64;
            let pred = if prob > 0.5 { 1.0 } else { -1.0 };
            pred == labels[i]
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Trains a diagonal Gaussian posterior per method and reports test
/// accuracy over `eval_seeds` independent sets of posterior samples.
pub fn run_blr(cfg: &RunConfig) -> Result<BlrReport> {
    let built = cfg.build_target()?;
    let BuiltTarget::Logistic { posterior, split } = &built else {
        return Err(Error::InvalidArgument("blr needs target \"blr\" with a dataset".into()));
    };
    if cfg.eval_seeds == 0 || cfg.posterior_samples == 0 {
        return Err(Error::InvalidArgument("eval_seeds and posterior_samples must be >= 1".into()));
    }
    let methods: Vec<String> = if cfg.blr_methods.is_empty() {
        vec![format!("{}:{}", cfg.estimator.name(), cfg.divergence()?)]
    } else {
        cfg.blr_methods.clone()
    };
    let mut rows = Vec::with_capacity(methods.len());
    for method in methods {
        let (estimator, div) = parse_method(&method)?;
        let run_cfg = RunConfig {
            estimator,
            divergence: div.to_string(),
            family: "diag".into(),
            ..cfg.clone()
        };
        let init = run_cfg.initial_params(posterior.dim())?;
        let traj = run_vi_on(&run_cfg, posterior, init)?;
        let q = traj.final_params.expect("run ends with parameters");
        let accuracies = (0..cfg.eval_seeds)
            .map(|s| {
                let noise = NoiseBatch::standard(
                    cfg.seed,
                    BLR_EVAL_STREAM - s as u64,
                    cfg.posterior_samples,
                    posterior.dim(),
                );
                predictive_accuracy(&q, &split.test.features, &split.test.labels, &noise)
            })
            .collect::<Result<Vec<_>>>()?;
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let std = if accuracies.len() > 1 {
            (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        rows.push(BlrRow {
            method: format!("{estimator}:{div}", estimator = estimator.name()),
            test_accuracy_mean: mean,
            test_accuracy_std: std,
            posterior_sample_count: cfg.posterior_samples,
            accuracies,
            final_params: q,
        });
    }
    Ok(BlrReport {
        provenance: provenance(),
        dataset: cfg
            .dataset
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default(),
        train_size: split.train.len(),
        test_size: split.test.len(),
        features: split.train.features.ncols(),
        iterations: cfg.iterations,
        learning_rate: cfg.learning_rate,
        mc_samples: cfg.mc_samples,
        rows,
    })
}

/// Writes a report as pretty JSON or as CSV with one row per method.
pub fn emit_blr_report(report: &BlrReport, path: &Path, format: PlotFormat) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::new();
    match format {
        PlotFormat::Json => {
            serde_json::to_writer_pretty(&mut buf, report)?;
            buf.push(b'\n');
        }
        PlotFormat::Csv => {
            buf.extend_from_slice(
                format!(
                    "# bwflow blr report; dataset={}; train={}; test={}; features={}; iterations={}; learning_rate={}; mc_samples={}; provenance={}\n",
                    report.dataset,
                    report.train_size,
                    report.test_size,
                    report.features,
                    report.iterations,
                    report.learning_rate,
                    report.mc_samples,
                    report.provenance
                )
                .as_bytes(),
            );
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(&mut buf);
            w.write_record(["method", "test_accuracy_mean", "test_accuracy_std", "posterior_sample_count"])?;
            for r in &report.rows {
                w.write_record([
                    r.method.clone(),
                    r.test_accuracy_mean.to_string(),
                    r.test_accuracy_std.to_string(),
                    r.posterior_sample_count.to_string(),
                ])?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Samples of the Bures-Wasserstein geodesic between two covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeodesicDump {
    pub bures_distance: f64,
    /// Length of the discretized horizontal lift.
    pub lift_length: f64,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl PlotData for GeodesicDump {
    fn schema(&self) -> String {
        format!(
            "bwflow geodesic; bures_distance={}; lift_length={}; provenance={}",
            self.bures_distance,
            self.lift_length,
            provenance()
        )
    }

    fn columns(&self) -> Vec<String> {
        self.columns.clone()
    }

    fn table(&self) -> Vec<Vec<Option<f64>>> {
        self.rows.iter().map(|r| r.iter().map(|v| Some(*v)).collect()).collect()
    }
}

/// Covariances along the geodesic from `geodesic_from` to `geodesic_to`,
/// the scale-space lift at the same times and distances to both ends.
pub fn run_geodesic(cfg: &RunConfig) -> Result<GeodesicDump> {
    let a = mat_from_rows(&cfg.geodesic_from)?;
    let b = mat_from_rows(&cfg.geodesic_to)?;
    SymmetricPd::new(a.clone())?;
    SymmetricPd::new(b.clone())?;
    let n = a.nrows();
    let points = cfg.geodesic_points.max(2);
    let mut columns = vec!["t".to_string()];
    for prefix in ["cov", "lift"] {
        for i in 0..n {
            let start = if prefix == "cov" { i } else { 0 };
            columns.extend((start..n).map(|j| format!("{prefix}_{i}{j}")));
        }
    }
    columns.extend(["dist_from_start".to_string(), "dist_to_end".to_string()]);
    let mut rows = Vec::with_capacity(points);
    for k in 0..points {
        let t = k as f64 / (points - 1) as f64;
        let g = linalg::symmetrize(&geodesic(&a, &b, t)?);
        let s = horizontal_lift_geodesic(&a, &b, t)?;
        let mut row = vec![t];
        for i in 0..n {
            row.extend((i..n).map(|j| g[(i, j)]));
        }
        for i in 0..n {
            row.extend((0..n).map(|j| s[(i, j)]));
        }
        row.push(bures_distance(&a, &g)?);
        row.push(bures_distance(&g, &b)?);
        rows.push(row);
    }
    Ok(GeodesicDump {
        bures_distance: bures_distance(&a, &b)?,
        lift_length: lift_length(&a, &b, (points - 1).max(1000))?,
        columns,
        rows,
    })
}

/// Outcome of one self-check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn check(name: &str, value: f64, tolerance: f64) -> CheckResult {
    CheckResult {
        name: name.into(),
        value,
        tolerance,
        passed: value.is_finite() && value <= tolerance,
    }
}

/// Score and estimator-identity checks on small random problems.
pub fn self_check(seed: u64) -> Result<Vec<CheckResult>> {
    use crate::flows::{evaluate_rhs, Expectation};
    use crate::geometry::dpi;
    use crate::targets::{MixtureTarget, RosenbrockTarget};

    let mut out = Vec::new();
    let x = NoiseBatch::standard(seed, 0, 1, 2).row(0);
    let gauss = GaussianTarget::new(
        linalg::row_from(&[0.5, -1.0]),
        Mat::from_row_slice(2, 2, &[0.8, 0.4, 0.4, 0.8]),
    )?;
    let rosen = RosenbrockTarget::default();
    let mix1 = MixtureTarget::trimodal_1d();
    let data = NoiseBatch::standard(seed, 1, 40, 3);
    let labels: Vec<f64> = (0..40).map(|i| if data.z[(i, 0)] > 0.0 { 1.0 } else { -1.0 }).collect();
    let blr = LogisticPosterior::new(&data.z, &labels, 1.0)?;
    use crate::targets::score_finite_diff_check as fd;
    out.push(check("score_fd_gaussian", fd(&gauss, &x, 1e-5)?, 1e-6));
    out.push(check("score_fd_rosenbrock", fd(&rosen, &x, 1e-5)?, 1e-6));
    out.push(check("score_fd_mixture1d", fd(&mix1, &x.columns(0, 1).into_owned(), 1e-5)?, 1e-6));
    out.push(check(
        "score_fd_logistic",
        fd(&blr, &NoiseBatch::standard(seed, 2, 1, 4).row(0), 1e-5)?,
        1e-6,
    ));

    let q = GaussianParams::new(
        linalg::row_from(&[1.0, 0.5]),
        Mat::from_row_slice(2, 2, &[1.2, 0.0, 0.3, 0.7]),
    )?;
    let fq = FamilyParams::Gaussian(q.clone());
    let noise = NoiseBatch::standard(seed, 3, 64, 2);
    let path = path_gradient(&fq, &gauss, FDivergence::ReverseKl, &noise, PathOptions::default())?;
    let closed = gaussian_closed_form_path_gradient(&q, &gauss, &noise)?;
    let rel = |d: f64, g: &GradEstimate| d / g.grad.max_abs().max(1e-300);
    out.push(check(
        "closed_form_equals_path",
        rel(closed.grad.max_abs_diff(&path.grad)?, &path),
        1e-10,
    ));

    let tau = 0.01;
    let mut worst: f64 = 0.0;
    for div in divergences_under_test() {
        let p = path_gradient(&fq, &rosen, div, &noise, PathOptions::default())?;
        let (d, _) = distill_step(&fq, &rosen, div, tau, &noise, PathOptions::default())?;
        worst = worst.max(rel(d.grad.max_abs_diff(&p.grad.scaled(tau))?, &p) / tau);
    }
    out.push(check("distill_equals_tau_path", worst, 1e-10));

    let scale_state = FlowState::scale_from(&q);
    let cov_state = FlowState::covariance_from(&q);
    let hf = evaluate_rhs(RhsForm::HessianFree, &cov_state, &rosen, Expectation::MonteCarlo(&noise))?;
    let sc = evaluate_rhs(RhsForm::Scale, &scale_state, &rosen, Expectation::MonteCarlo(&noise))?;
    let pushed = dpi(&q.scale, &sc.d_matrix);
    out.push(check(
        "dpi_scale_rhs_equals_cov_rhs",
        (pushed - &hf.d_matrix).abs().max() / linalg::max_abs(&hf.d_matrix).max(1e-300),
        1e-10,
    ));

    let mut worst: f64 = 0.0;
    for form in [RhsForm::Hessian, RhsForm::Sarkka] {
        let a = evaluate_rhs(form, &cov_state, &gauss, Expectation::Analytic)?;
        let b = evaluate_rhs(RhsForm::HessianFree, &cov_state, &gauss, Expectation::Analytic)?;
        worst = worst.max((a.d_matrix - &b.d_matrix).abs().max() / linalg::max_abs(&b.d_matrix).max(1e-300));
    }
    out.push(check("analytic_rhs_forms_agree", worst, 1e-10));

    let at_p = FamilyParams::Gaussian(gauss.as_params());
    let mut worst: f64 = 0.0;
    for div in divergences_under_test() {
        let g = path_gradient(
            &at_p,
            &gauss,
            div,
            &noise,
            PathOptions {
                keep_per_sample: true,
                ..PathOptions::default()
            },
        )?;
        for s in g.per_sample.expect("requested") {
            worst = worst.max(s.max_abs());
        }
    }
    out.push(check("sticking_the_landing", worst, 0.0));

    let mut worst: f64 = 0.0;
    for div in divergences_under_test().into_iter().filter(|d| d.alpha_exponent().is_some()) {
        worst = worst.max(crate::gradients::normalizer_scaling_check(div, &fq, &gauss, &noise, 3.7)?);
    }
    out.push(check("normalizer_scaling", worst, 1e-10));
    Ok(out)
}

fn divergences_under_test() -> Vec<FDivergence> {
    let mut v = FDivergence::all_named().to_vec();
    v.push(FDivergence::Alpha(1.5));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergences::gaussian_kl;

    fn fig(estimator: Estimator) -> RunConfig {
        RunConfig {
            estimator,
            ..RunConfig::default()
        }
    }

    #[test]
    fn path_estimator_reaches_the_target() {
        let t = run_vi(&fig(Estimator::Path)).unwrap();
        assert_eq!(t.rows.len(), 3001);
        let w2 = t.last().unwrap().w2_to_target.unwrap();
        assert!(w2 < 1e-4, "final W2 {w2}");
    }

    #[test]
    fn starting_at_the_target_stays_put() {
        let cfg = RunConfig {
            init_mean: Some(vec![0.0, 0.0]),
            init_scale: Some(linalg::mat_to_rows(
                &GaussianTarget::new(Row::zeros(2), mat_from_rows(&RunConfig::default().target_cov).unwrap())
                    .unwrap()
                    .as_params()
                    .scale,
            )),
            iterations: 50,
            ..fig(Estimator::Path)
        };
        let t = run_vi(&cfg).unwrap();
        assert!(t.rows.iter().all(|r| r.grad_norm.map_or(true, |g| g == 0.0)));
        assert!(t.rows.iter().all(|r| r.params == t.rows[0].params));
    }

    #[test]
    fn path_and_scale_ode_share_their_trajectory() {
        let cfg = RunConfig {
            iterations: 300,
            ..fig(Estimator::Path)
        };
        let a = run_vi(&cfg).unwrap();
        let b = run_vi(&RunConfig {
            estimator: Estimator::OdeScale,
            ..cfg
        })
        .unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            let d = ra.params.iter().zip(&rb.params).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(d < 1e-10, "step {}: {d}", ra.step);
        }
    }

    #[test]
    fn closed_form_tracks_path() {
        let cfg = RunConfig {
            iterations: 300,
            ..fig(Estimator::Path)
        };
        let a = run_vi(&cfg).unwrap();
        let b = run_vi(&RunConfig {
            estimator: Estimator::ClosedFormGaussian,
            ..cfg
        })
        .unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            for (x, y) in ra.params.iter().zip(&rb.params) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn kl_decreases_almost_every_step() {
        let cfg = RunConfig {
            mc_samples: 100,
            iterations: 1000,
            ..fig(Estimator::Path)
        };
        let t = run_vi(&cfg).unwrap();
        let g = cfg.build_target().unwrap();
        let g = g.density().as_gaussian().unwrap();
        let kls: Vec<f64> = (0..t.rows.len())
            .map(|i| {
                let (m, c) = t.gaussian_at(i).unwrap();
                gaussian_kl(&m, &c, g.mean(), g.covariance()).unwrap()
            })
            .collect();
        let down = kls.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(down as f64 >= 0.95 * (kls.len() - 1) as f64, "{down}/{}", kls.len() - 1);
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = RunConfig {
            iterations: 200,
            divergence_eval_every: 50,
            ..fig(Estimator::ReparamKl)
        };
        assert_eq!(run_vi(&cfg).unwrap(), run_vi(&cfg).unwrap());
    }

    #[test]
    fn every_estimator_runs() {
        for e in [
            Estimator::ReparamKl,
            Estimator::Path,
            Estimator::ClosedFormGaussian,
            Estimator::Distill,
            Estimator::OdeCovHessianFree,
            Estimator::OdeCovHessian,
            Estimator::OdeScale,
        ] {
            let t = run_vi(&RunConfig {
                iterations: 2000,
                mc_samples: 20,
                ..fig(e)
            })
            .unwrap();
            let w2 = t.last().unwrap().w2_to_target.unwrap();
            assert!(w2 < 0.3, "{}: {w2}", e.name());
        }
        let t = run_vi(&RunConfig {
            iterations: 200,
            particle_count: 2000,
            ..fig(Estimator::Langevin)
        })
        .unwrap();
        assert_eq!(t.rows.len(), 201);
    }

    #[test]
    fn mixture_weights_stay_on_the_simplex() {
        let cfg = RunConfig {
            iterations: 300,
            record_every: 1,
            ..RunConfig::preset("gmm-fit")
        };
        let t = run_vi(&cfg).unwrap();
        for r in &t.rows {
            let w = &r.params[..4];
            assert!(w.iter().all(|v| *v >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn step_failures_report_the_step() {
        // A huge step drives the covariance indefinite in the first update.
        let cfg = RunConfig {
            learning_rate: 50.0,
            iterations: 10,
            ..fig(Estimator::OdeCovHessianFree)
        };
        match run_vi(&cfg) {
            Err(Error::Step { step, last_good, .. }) => {
                assert!(step < 10);
                assert!(last_good.contains("cov"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn geodesic_dump_endpoints() {
        let d = run_geodesic(&RunConfig {
            geodesic_points: 11,
            ..RunConfig::default()
        })
        .unwrap();
        assert_eq!(d.rows.len(), 11);
        assert!(d.rows.iter().all(|r| r.len() == d.columns.len()));
        assert!(d.rows[0][d.columns.len() - 2].abs() < 1e-12);
        assert!((d.rows[10][d.columns.len() - 2] - d.bures_distance).abs() < 1e-10);
        assert!((d.lift_length - d.bures_distance).abs() < 1e-3 * d.bures_distance);
    }

    #[test]
    fn self_checks_pass() {
        for c in self_check(0).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn method_strings() {
        assert_eq!(
            parse_method("path:alpha:0.5").unwrap(),
            (Estimator::Path, FDivergence::Alpha(0.5))
        );
        assert!(parse_method("path").is_err());
        assert!(parse_method("nope:reverse_kl").is_err());
    }
}
