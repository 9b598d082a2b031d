//! `bwflow` command-line interface.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bwflow_core::runner::{
    emit_blr_report, emit_plot_data, run_blr, run_flow_comparison, run_geodesic, run_gmm_fit, run_vi,
    self_check, write_csv, Estimator, PlotFormat, RunConfig,
};
use bwflow_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bwflow", version, about = "Variational inference as Wasserstein gradient flow")]
struct Cli {
    /// Worker threads for per-sample work (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one estimator and write its trajectory.
    Fit(Common),
    /// Reparameterization vs path gradient vs ODE vs Langevin on a Gaussian target.
    FlowDemo(Common),
    /// Fit a Gaussian mixture and dump fitted and target densities on a grid.
    GmmFit(Common),
    /// Bayesian logistic regression on a CSV dataset.
    Blr(Common),
    /// Sample the Bures-Wasserstein geodesic between two covariances.
    Geodesic(Common),
    /// Score and estimator-identity self-tests.
    Check(Common),
}

#[derive(Args, Default)]
struct Common {
    /// JSON file with `RunConfig` fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    estimator: Option<String>,
    /// `reverse_kl`, `forward_kl`, `chi2`, `hellinger` or `alpha:A`.
    #[arg(long)]
    divergence: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Dataset CSV for `blr`.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn load_config(preset: &str, c: &Common) -> Result<RunConfig, Failure> {
    let base = RunConfig::preset(preset);
    let mut cfg = match &c.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            RunConfig::from_json_over(&base, &text)?
        }
        None => base,
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = Some(o.clone());
    }
    if let Some(e) = &c.estimator {
        cfg.estimator = e.parse::<Estimator>().map_err(|e| Failure::Usage(e.to_string()))?;
        // An explicit estimator replaces the preset method list.
        cfg.blr_methods.clear();
    }
    if let Some(d) = &c.divergence {
        cfg.divergence = d.clone();
        cfg.blr_methods.clear();
    }
    if let Some(lr) = c.lr {
        cfg.learning_rate = lr;
    }
    if let Some(n) = c.samples {
        cfg.mc_samples = n;
    }
    if let Some(n) = c.steps {
        cfg.iterations = n;
    }
    if let Some(d) = &c.dataset {
        cfg.dataset = Some(d.clone());
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Fit(c) => fit(&load_config("fit", &c)?),
        Command::FlowDemo(c) => flow_demo(&load_config("flow-demo", &c)?),
        Command::GmmFit(c) => gmm_fit(&load_config("gmm-fit", &c)?),
        Command::Blr(c) => blr(&load_config("blr", &c)?),
        Command::Geodesic(c) => geodesic(&load_config("geodesic", &c)?),
        Command::Check(c) => check(&load_config("check", &c)?),
    }
}

fn stdout_csv<D: bwflow_core::runner::PlotData>(data: &D) -> Result<(), Failure> {
    let mut lock = std::io::stdout().lock();
    write_csv(data, &mut lock)?;
    lock.flush().map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}

fn fit(cfg: &RunConfig) -> Result<(), Failure> {
    let t = run_vi(cfg)?;
    let last = t.last().expect("final row");
    log::info!(
        "{}: {} steps, final w2 {:?}, divergence {:?}",
        t.header.label,
        last.step,
        last.w2_to_target,
        last.divergence
    );
    match &cfg.out {
        Some(path) => emit_plot_data(&t, path, PlotFormat::from_path(path))?,
        None => stdout_csv(&t)?,
    }
    Ok(())
}

fn flow_demo(cfg: &RunConfig) -> Result<(), Failure> {
    let fc = run_flow_comparison(cfg)?;
    let gap = fc.cloud_to_ode_w2()?.into_iter().map(|(_, w)| w).fold(0.0, f64::max);
    if let Some(dir) = &cfg.out {
        if PlotFormat::from_path(dir) == PlotFormat::Json {
            write_json(dir, &fc)?;
        } else {
            fc.write_dir(dir, PlotFormat::Csv)?;
        }
    }
    println!("run,final_w2");
    for t in fc.all() {
        println!("{},{}", t.header.label, fmt_opt(t.last().and_then(|r| r.w2_to_target)));
    }
    println!("langevin_vs_ode_max_w2,{gap}");
    Ok(())
}

fn gmm_fit(cfg: &RunConfig) -> Result<(), Failure> {
    let fit = run_gmm_fit(cfg)?;
    if let Some(dir) = &cfg.out {
        emit_plot_data(&fit.trajectory, &dir.join("trajectory.csv"), PlotFormat::Csv)?;
        emit_plot_data(&fit.grid, &dir.join("density.csv"), PlotFormat::Csv)?;
        if let Some(p) = &fit.trajectory.final_params {
            write_json(&dir.join("final_params.json"), p)?;
        }
    }
    let first = fit.trajectory.rows.first().and_then(|r| r.divergence);
    let last = fit.trajectory.last().and_then(|r| r.divergence);
    println!("grid_tv,{}", fit.grid.total_variation());
    println!("divergence_first,{}", fmt_opt(first));
    println!("divergence_final,{}", fmt_opt(last));
    Ok(())
}

fn blr(cfg: &RunConfig) -> Result<(), Failure> {
    if cfg.dataset.is_none() {
        return Err(Failure::Usage("blr needs --dataset or a config with \"dataset\"".into()));
    }
    let report = run_blr(cfg)?;
    if let Some(path) = &cfg.out {
        emit_blr_report(&report, path, PlotFormat::from_path(path))?;
    }
    println!("method,test_accuracy_mean,test_accuracy_std,posterior_samples");
    for r in &report.rows {
        println!(
            "{},{:.4},{:.4},{}",
            r.method, r.test_accuracy_mean, r.test_accuracy_std, r.posterior_sample_count
        );
    }
    Ok(())
}

fn geodesic(cfg: &RunConfig) -> Result<(), Failure> {
    let d = run_geodesic(cfg)?;
    match &cfg.out {
        Some(path) => emit_plot_data(&d, path, PlotFormat::from_path(path))?,
        None => stdout_csv(&d)?,
    }
    Ok(())
}

fn check(cfg: &RunConfig) -> Result<(), Failure> {
    let results = self_check(cfg.seed)?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{} {} (value {:e}, tolerance {:e})",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.value,
            r.tolerance
        );
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(Failure::Run(Error::Domain(format!("{failed} self-checks failed"))));
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
