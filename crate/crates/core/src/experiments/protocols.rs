//! Fixed experimental setups: the figure sweeps and the smaller coupled
//! comparisons built on top of the measurements.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fit::RateModel;
use super::measures::{measure_param_error, measure_semicomplete_gap};
use super::sweep::{Axis, Metric, SweepSpec};
use crate::error::Result;
use crate::limit::{build_reference, lazy_forward, reference_side, trace_tracers, train_lazy_from, ReferenceModel};
use crate::resnet::{config_dataset, forward_pass, init_net, train, Dataset, TrainConfig};
use crate::rng::SeedPath;
use crate::tensor::rms_norm;

/// Reference grid side: `300` in fast mode, `1000` otherwise.
pub fn base_reference_side(fast: bool) -> usize {
    if fast {
        300
    } else {
        1000
    }
}

pub const DEPTH_GRID: [f64; 7] = [8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0];
pub const WIDTH_GRID: [f64; 7] = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0];

/// Output error against the reference as depth grows, `M = 1`, `D = 10`,
/// `K = 100`, ten repetitions.
pub fn depth_sweep(fast: bool, seed: u64) -> SweepSpec {
    SweepSpec {
        axis: Axis::Depth,
        grid: DEPTH_GRID.to_vec(),
        base: TrainConfig::complete_mlp(10, 8, 1, 100, seed),
        repetitions: 10,
        k: 100,
        metrics: vec![Metric::ForwardError],
        phase_alpha: None,
        reference_side: base_reference_side(fast),
        fit: Some(RateModel::DepthWidth),
    }
}

/// Output error against the reference as width grows at `L = 256`.
pub fn width_sweep(fast: bool, seed: u64) -> SweepSpec {
    SweepSpec {
        axis: Axis::Width,
        grid: WIDTH_GRID.to_vec(),
        base: TrainConfig::complete_mlp(10, 256, 1, 100, seed),
        ..depth_sweep(fast, seed)
    }
}

/// Sweep over the phase scale `alpha` at fixed `(D, L, M)`, measuring
/// `metric` at iteration `k`. The fluctuation law needs several `D` values,
/// so it is fitted on pooled sweeps rather than here.
pub fn alpha_sweep(dim: usize, depth: usize, width: usize, k: usize, alphas: &[f64], metric: Metric, seed: u64) -> SweepSpec {
    let fit = match metric {
        Metric::Laziness => Some(RateModel::Laziness),
        _ => None,
    };
    SweepSpec {
        axis: Axis::Alpha,
        grid: alphas.to_vec(),
        base: TrainConfig::complete_mlp(dim, depth, width, k, seed),
        repetitions: 10,
        k,
        metrics: vec![metric],
        phase_alpha: None,
        reference_side: 0,
        fit: if alphas.len() > fit.map_or(0, |m| m.coefficients()) { fit } else { None },
    }
}

pub const PHASE_ALPHAS: [f64; 9] = [0.0625, 0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0];

/// Mean over `seeds` seeds and the training inputs of `||h^L(x) - x||_rms`
/// for the untrained complete-regime net.
pub fn identity_gap(dim: usize, depth: usize, width: usize, seeds: usize, master: u64) -> Result<f64> {
    let base = TrainConfig::complete_mlp(dim, depth, width, 0, master);
    let data = config_dataset(&base)?;
    let per_seed: Result<Vec<f64>> = (0..seeds)
        .into_par_iter()
        .map(|r| {
            let cfg = TrainConfig {
                seed: SeedPath::new(master).repetition(r).derive_u64(),
                ..base.clone()
            };
            let net = init_net(&cfg)?;
            let mut total = 0.0;
            for x in data.inputs() {
                let h = forward_pass(&net, x, cfg.alpha)?;
                total += rms_norm(&h.output().sub(x)?)?;
            }
            Ok(total / data.len() as f64)
        })
        .collect();
    let per_seed = per_seed?;
    Ok(per_seed.iter().sum::<f64>() / seeds as f64)
}

/// Parameter coupling between a finite net and its tracers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingResult {
    pub depth: usize,
    pub seed: u64,
    pub at_zero: f64,
    pub at_k: f64,
}

/// The coupling setup: `D = 6`, `M = 1`, `K = 10`, complete-regime 2LP.
pub fn coupling_config(depth: usize, seed: u64) -> TrainConfig {
    TrainConfig::complete_mlp(6, depth, 1, 10, seed)
}

/// Reference for [`coupling_errors`], sized to resolve nets up to `max_depth`.
pub fn coupling_reference(max_depth: usize, fast: bool, master: u64) -> Result<ReferenceModel> {
    let cfg = coupling_config(max_depth, master);
    let side = reference_side(base_reference_side(fast), max_depth);
    build_reference(&cfg, &config_dataset(&cfg)?, side, side)
}

/// `max_{j,l}` parameter distance between a trained `depth x 1` net and its
/// tracers at iterations 0 and `K`.
pub fn coupling_errors(reference: &ReferenceModel, depth: usize, seed: u64) -> Result<CouplingResult> {
    let cfg = coupling_config(depth, seed);
    reference.check_resolves(depth, 1)?;
    let run = train(&cfg, reference.dataset())?;
    let tracers = trace_tracers(run.initial(), reference, cfg.steps)?;
    Ok(CouplingResult {
        depth,
        seed,
        at_zero: measure_param_error(run.initial(), &tracers[0])?.max,
        at_k: measure_param_error(run.snapshot(cfg.steps)?, &tracers[cfg.steps])?.max,
    })
}

/// The lazy setup: centered tanh 2LP with `D = 8`, `L = 256`, `M = 4`.
pub fn lazy_config(alpha: f64, seed: u64) -> TrainConfig {
    let d = 8.0f64;
    TrainConfig {
        alpha,
        sigma_u: d.sqrt(),
        sigma_v: 0.25,
        lr_u: d,
        lr_v: d,
        ..TrainConfig::complete_mlp(8, 256, 4, 20, seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LazyComparison {
    pub alpha: f64,
    pub seed: u64,
    /// RMS over units of `||Z_K - Z_0||_2`.
    pub displacement: f64,
    /// Mean over training inputs of the RMS output distance to the lazy
    /// model trained from the same `Z_0`.
    pub output_distance: f64,
}

pub fn lazy_comparison(config: &TrainConfig, data: &Dataset) -> Result<LazyComparison> {
    let run = train(config, data)?;
    let lazy = train_lazy_from(init_net(config)?, config, data)?;
    let last = run.snapshot(config.steps)?;
    let lp = lazy.params(config.steps)?;
    let mut dist = 0.0;
    for x in data.inputs() {
        let h = forward_pass(last, x, config.alpha)?;
        let g = lazy_forward(&lp, x)?;
        dist += rms_norm(&h.output().sub(g.output())?)?;
    }
    Ok(LazyComparison {
        alpha: config.alpha,
        seed: config.seed,
        displacement: measure_param_error(run.initial(), last)?.rms,
        output_distance: dist / data.len() as f64,
    })
}

/// The semi-complete setup: `D = 32`, `L = 500`, `M = 10`, `K = 20`,
/// `sigma_u = sqrt(D)`, `(lr_u, lr_v) = (D, D)` and `sigma_v = s sqrt(D)`.
pub fn semicomplete_config(scale: f64, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::complete_mlp(32, 500, 10, 20, seed);
    c.sigma_v = scale * (c.dim as f64).sqrt();
    c
}

/// Gap at iteration `K` between the run with `sigma_v = scale sqrt(D)` and
/// the run started from the same input weights with zero output weights.
pub fn semicomplete_gap(scale: f64, seed: u64) -> Result<f64> {
    let cfg = semicomplete_config(scale, seed);
    let flat = TrainConfig { sigma_v: 0.0, ..cfg.clone() };
    let data = config_dataset(&cfg)?;
    let a = train(&cfg, &data)?;
    let b = train(&flat, &data)?;
    measure_semicomplete_gap(a.snapshot(cfg.steps)?, b.snapshot(cfg.steps)?)
}
