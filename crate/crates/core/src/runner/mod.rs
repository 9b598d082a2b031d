//! Optimization loop, experiment drivers, configuration and output files.

pub mod config;
pub mod experiments;
pub mod trajectory;

pub use config::{BuiltTarget, Estimator, RunConfig};
pub use experiments::{
    emit_blr_report, parse_method, predictive_accuracy, run_blr, run_flow_comparison, run_geodesic,
    run_gmm_fit, run_langevin, run_ode, run_vi, run_vi_on, self_check, surrogate_objective, BlrReport,
    BlrRow, CheckResult, DensityGrid, FlowComparison, GeodesicDump, GmmFit,
};
pub use trajectory::{
    emit_plot_data, param_columns, param_values, read_csv_table, write_csv, PlotData, PlotFormat,
    Trajectory, TrajectoryHeader, TrajectoryRow,
};
