//! Error measurements against the limit surrogates, parameter sweeps with
//! repetitions, and rate fitting.

mod fit;
mod measures;
pub mod protocols;
mod sweep;

pub use fit::{fit_rate, log_log_slope, power_law_slope, RateFit, RateModel, RatePoint};
pub use measures::{
    measure_fluctuation, measure_forward_error, measure_laziness, measure_param_error,
    measure_semicomplete_gap, output_slots, ForwardError, ParamError,
};
pub use sweep::{
    aggregate, fit_sidecar_path, persist_outcome, phase_config, rate_points, read_records_csv,
    run_sweep, write_records_csv, Aggregate, Axis, ExperimentRecord, Metric, SweepOptions,
    SweepOutcome, SweepSpec, RECORD_HEADER,
};
