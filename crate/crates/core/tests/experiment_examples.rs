use meanode::experiments::protocols::{coupling_errors, coupling_reference, depth_sweep};
use meanode::experiments::{
    aggregate, measure_fluctuation, measure_forward_error, measure_laziness, measure_param_error, phase_config,
    run_sweep, SweepOptions,
};
use meanode::limit::{build_reference, reference_side, trace_tracers};
use meanode::resnet::{config_dataset, forward_pass, train, TrainConfig};
use meanode::rng::SeedPath;
use meanode::tensor::State;

#[test]
fn deeper_net_is_closer_to_the_reference() {
    let cfg = TrainConfig::complete_mlp(10, 64, 1, 100, 2);
    let data = config_dataset(&cfg).unwrap();
    let side = reference_side(300, 512);
    let reference = build_reference(&cfg, &data, side, side).unwrap();
    let err = |depth: usize| {
        let c = TrainConfig { depth, ..cfg.clone() };
        let run = train(&c, &data).unwrap();
        measure_forward_error(run.snapshot(100).unwrap(), 1.0, &reference, 100, data.inputs()).unwrap().rms()
    };
    let (shallow, deep) = (err(64), err(512));
    assert!(deep < shallow, "L=512 {deep} vs L=64 {shallow}");
}

#[test]
fn error_curve_is_monotone_within_noise() {
    let outcome = run_sweep(&depth_sweep(true, 3), SweepOptions::default()).unwrap();
    let agg = aggregate(&outcome.records, |r| r.error_rms);
    for w in agg.windows(2) {
        let band = 2.0 * w[0].std.max(w[1].std);
        assert!(w[1].mean <= w[0].mean + band, "L={} -> {}: {} -> {}", w[0].value, w[1].value, w[0].mean, w[1].mean);
    }
}

#[test]
fn coupling_improves_with_depth() {
    let reference = coupling_reference(128, true, 5).unwrap();
    let short = coupling_errors(&reference, 32, 7).unwrap();
    let long = coupling_errors(&reference, 128, 7).unwrap();
    assert_eq!(short.at_zero, 0.0);
    assert_eq!(long.at_zero, 0.0);
    assert!(long.at_k < short.at_k, "{long:?} vs {short:?}");
}

#[test]
fn frozen_dynamics_stay_coupled() {
    let mut cfg = TrainConfig::complete_mlp(4, 8, 1, 4, 1);
    cfg.lr_u = 0.0;
    cfg.lr_v = 0.0;
    let data = config_dataset(&cfg).unwrap();
    let reference = build_reference(&cfg, &data, 64, 2).unwrap();
    let run = train(&cfg, &data).unwrap();
    let tracers = trace_tracers(run.initial(), &reference, 4).unwrap();
    for (k, t) in tracers.iter().enumerate() {
        assert_eq!(measure_param_error(run.initial(), t).unwrap().max, 0.0, "k={k}");
    }
    assert_eq!(measure_param_error(run.initial(), run.last()).unwrap().max, 0.0);
}

fn outputs_over_seeds(cfg: &TrainConfig, k: usize, reps: usize) -> Vec<Vec<State>> {
    let data = config_dataset(cfg).unwrap();
    (0..reps)
        .map(|r| {
            let c = TrainConfig { seed: SeedPath::new(cfg.seed).repetition(r).derive_u64(), steps: k, ..cfg.clone() };
            let net = train(&c, &data).unwrap();
            data.inputs()
                .iter()
                .map(|x| forward_pass(net.last(), x, c.alpha).unwrap().output().clone())
                .collect()
        })
        .collect()
}

#[test]
fn fluctuation_halves_when_units_quadruple() {
    let base = phase_config(&TrainConfig::complete_mlp(8, 100, 2, 10, 6), 1.0);
    let small = measure_fluctuation(&outputs_over_seeds(&base, 10, 10)).unwrap();
    let big = measure_fluctuation(&outputs_over_seeds(&TrainConfig { width: 8, ..base }, 10, 10)).unwrap();
    let ratio = small / big;
    assert!((2.0 / 1.5..=3.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn fluctuation_doubles_with_alpha() {
    let base = TrainConfig::complete_mlp(8, 100, 4, 10, 8);
    let f = |a: f64| measure_fluctuation(&outputs_over_seeds(&phase_config(&base, a), 10, 10)).unwrap();
    let ratio = f(4.0) / f(2.0);
    assert!((1.6..=2.4).contains(&ratio), "ratio {ratio}");
}

#[test]
fn complete_regime_laziness_is_dimension_free() {
    let lazy = |d: usize| {
        let c = TrainConfig::complete_mlp(d, 100, 4, 50, 9);
        let run = train(&c, &config_dataset(&c).unwrap()).unwrap();
        measure_laziness(run.initial(), run.last()).unwrap()
    };
    let ratio = lazy(8) / lazy(16);
    assert!((0.2..=5.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn training_loss_is_nearly_monotone() {
    let cfg = TrainConfig::complete_mlp(10, 64, 1, 100, 1);
    let run = train(&cfg, &config_dataset(&cfg).unwrap()).unwrap();
    let ups = run.losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(ups <= 5, "{ups} increases");
    assert!(run.losses[100] < run.losses[0]);
}
