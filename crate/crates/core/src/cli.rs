//! Command-line front end: config-driven runs, sweeps and figure data.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiments::protocols::{alpha_sweep, base_reference_side, depth_sweep, width_sweep, PHASE_ALPHAS};
use crate::experiments::{
    aggregate, fit_rate, persist_outcome, rate_points, run_sweep, Axis, ExperimentRecord, Metric,
    RateFit, RateModel, RatePoint, SweepOptions, SweepOutcome, SweepSpec,
};
use crate::limit::{build_reference, reference_side, train_lazy, ReferenceModel};
use crate::plot::{write_plot, Plot, Series};
use crate::resnet::snapshot::{write_snapshot, SnapshotSidecar};
use crate::resnet::{config_dataset, forward_pass, parse_json, train, train_with, NetParams, TrainConfig};
use crate::rng::{gaussian_sample, SeedPath};

#[derive(Debug, Parser)]
#[command(name = "meanode", version, about = "Deep ResNet training and its large-depth limits")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    /// Worker threads; 0 lets rayon decide.
    #[arg(long, global = true, env = "MEANODE_WORKERS", default_value_t = 0)]
    pub workers: usize,

    /// Use the 300 x 300 reference instead of 1000 x 1000.
    #[arg(long, global = true)]
    pub fast: bool,

    /// Master seed, overriding the config's.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Record per-run wall-clock time in sweep CSVs (breaks byte-reproducibility).
    #[arg(long, global = true)]
    pub timing: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a finite net: snapshots plus a loss CSV.
    Train,
    /// Build the large-net reference for a config.
    Reference,
    /// Run a sweep spec: record CSV, fit sidecar, plots.
    Sweep,
    /// Train the linearized model around the config's initialization.
    Lazy,
    /// Fluctuation and laziness across the phase scale grid.
    Phase,
    /// Data and plot for one figure.
    Figure {
        #[arg(value_enum)]
        tag: FigureTag,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum FigureTag {
    #[value(name = "1")]
    F1,
    #[value(name = "2a")]
    F2a,
    #[value(name = "2b")]
    F2b,
    #[value(name = "3a")]
    F3a,
    #[value(name = "3b")]
    F3b,
    #[value(name = "4a")]
    F4a,
    #[value(name = "4b")]
    F4b,
    #[value(name = "4c")]
    F4c,
}

impl FigureTag {
    fn stem(self) -> &'static str {
        match self {
            FigureTag::F1 => "fig1",
            FigureTag::F2a => "fig2a",
            FigureTag::F2b => "fig2b",
            FigureTag::F3a => "fig3a",
            FigureTag::F3b => "fig3b",
            FigureTag::F4a => "fig4a",
            FigureTag::F4b => "fig4b",
            FigureTag::F4c => "fig4c",
        }
    }
}

/// What was run, written to `manifest.json` in the output directory.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub workers: usize,
    pub fast: bool,
    pub seed: Option<u64>,
}

/// 0 ok, 1 config error, 2 divergence, 3 I/O error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        e if e.is_divergence() => 2,
        Error::Io(_) | Error::Csv(_) => 3,
        _ => 1,
    }
}

pub fn main_from_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.workers > 0 {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global();
    }
    match &cli.command {
        Command::Train => cmd_train(cli),
        Command::Reference => cmd_reference(cli),
        Command::Sweep => cmd_sweep(cli),
        Command::Lazy => cmd_lazy(cli),
        Command::Phase => cmd_phase(cli),
        Command::Figure { tag } => cmd_figure(cli, *tag),
    }
}

fn read_config_text(cli: &Cli) -> Result<Option<String>> {
    match &cli.config {
        Some(p) => Ok(Some(fs::read_to_string(p)?)),
        None => Ok(None),
    }
}

fn load_train_config(cli: &Cli) -> Result<Option<TrainConfig>> {
    let Some(text) = read_config_text(cli)? else { return Ok(None) };
    let mut cfg = TrainConfig::from_json_str(&text)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(Some(cfg))
}

fn require_train_config(cli: &Cli) -> Result<TrainConfig> {
    load_train_config(cli)?.ok_or_else(|| Error::config("--config", "this command needs a config file"))
}

/// Creates the output directory and records the manifest.
fn prepare_out(cli: &Cli, command: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cli.out)?;
    let manifest = RunManifest {
        command: command.to_string(),
        config: cli.config.clone(),
        out: cli.out.clone(),
        workers: cli.workers,
        fast: cli.fast,
        seed: cli.seed,
    };
    fs::write(cli.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(cli.out.clone())
}

fn sweep_options(cli: &Cli) -> SweepOptions {
    SweepOptions {
        workers: cli.workers,
        timing: cli.timing,
    }
}

/// `k,loss` rows, one per iterate.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["k", "loss"])?;
    for (k, l) in losses.iter().enumerate() {
        w.write_record([k.to_string(), format!("{l:e}")])?;
    }
    w.flush()?;
    Ok(())
}

fn snapshot_name(prefix: &str, k: usize) -> String {
    format!("{prefix}_{k:06}.bin")
}

fn cmd_train(cli: &Cli) -> Result<()> {
    let cfg = require_train_config(cli)?;
    let out = prepare_out(cli, "train")?;
    let data = config_dataset(&cfg)?;
    let run = train(&cfg, &data)?;
    write_loss_csv(&out.join("losses.csv"), &run.losses)?;
    for (&k, net) in &run.snapshots {
        let sidecar = SnapshotSidecar { config: cfg.clone(), iteration: k, reference: false };
        write_snapshot(&out.join(snapshot_name("snapshot", k)), net, &sidecar)?;
    }
    Ok(())
}

fn reference_for(cfg: &TrainConfig, fast: bool, max_lm: usize) -> Result<ReferenceModel> {
    let side = reference_side(base_reference_side(fast), max_lm);
    build_reference(cfg, &config_dataset(cfg)?, side, side)
}

fn cmd_reference(cli: &Cli) -> Result<()> {
    let cfg = require_train_config(cli)?;
    let out = prepare_out(cli, "reference")?;
    let reference = reference_for(&cfg, cli.fast, cfg.depth * cfg.width)?;
    write_loss_csv(&out.join("reference_losses.csv"), reference.losses())?;
    for (&k, net) in reference.snapshots() {
        let sidecar = SnapshotSidecar { config: reference.config().clone(), iteration: k, reference: true };
        write_snapshot(&out.join(snapshot_name("reference", k)), net, &sidecar)?;
    }
    Ok(())
}

fn cmd_lazy(cli: &Cli) -> Result<()> {
    let cfg = require_train_config(cli)?;
    let out = prepare_out(cli, "lazy")?;
    let data = config_dataset(&cfg)?;
    let run = train_lazy(&cfg, &data)?;
    write_loss_csv(&out.join("lazy_losses.csv"), &run.losses)?;
    let f = &run.frozen;
    for (&k, zeta) in &run.zetas {
        let net = NetParams::from_parts(*f.kind(), f.dim(), f.tokens(), f.depth(), f.width(), zeta.clone(), f.origin())?;
        let sidecar = SnapshotSidecar { config: cfg.clone(), iteration: k, reference: false };
        write_snapshot(&out.join(snapshot_name("zeta", k)), &net, &sidecar)?;
    }
    Ok(())
}

fn metric_label(m: Metric) -> &'static str {
    match m {
        Metric::ForwardError => "error",
        Metric::Fluctuation => "fluctuation",
        Metric::Laziness => "laziness",
    }
}

fn metric_value(m: Metric) -> fn(&ExperimentRecord) -> Option<f64> {
    match m {
        Metric::ForwardError => |r| r.error_rms,
        Metric::Fluctuation => |r| r.fluct_std,
        Metric::Laziness => |r| r.laziness,
    }
}

fn metric_model(m: Metric) -> RateModel {
    match m {
        Metric::ForwardError => RateModel::DepthWidth,
        Metric::Fluctuation => RateModel::Fluctuation,
        Metric::Laziness => RateModel::Laziness,
    }
}

/// Mean metric per grid value, plus the fitted curve when the fit models it.
fn sweep_plot(spec: &SweepSpec, outcome: &SweepOutcome, metric: Metric, title: &str) -> Plot {
    let agg = aggregate(&outcome.records, metric_value(metric));
    let mut plot = Plot::new(title, spec.axis.name(), metric_label(metric)).with(Series::scatter(
        "measured",
        agg.iter().map(|a| (a.value, a.mean)).collect(),
    ));
    if let Some(fit) = outcome.fit.as_ref().filter(|f| f.model == metric_model(metric)) {
        let curve = spec
            .grid
            .iter()
            .map(|&v| {
                let c = spec.point_config(v, 0);
                let p = RatePoint {
                    depth: c.depth,
                    width: c.width,
                    dim: c.dim,
                    alpha: spec.point_alpha(v).unwrap_or(c.alpha),
                    value: 0.0,
                };
                (v, fit.model.eval(&fit.coefficients, &p))
            })
            .collect();
        plot = plot.with(Series::line("fit", curve));
    }
    if spec.grid.iter().all(|&v| v > 0.0) {
        plot = plot.log_log();
    }
    plot
}

fn persist_sweep(out: &Path, stem: &str, spec: &SweepSpec, outcome: &SweepOutcome) -> Result<()> {
    persist_outcome(&out.join(format!("{stem}.csv")), outcome)?;
    for &m in &spec.metrics {
        let plot = sweep_plot(spec, outcome, m, &format!("{stem}: {} vs {}", metric_label(m), spec.axis.name()));
        if plot.to_svg().is_ok() {
            write_plot(out, &format!("{stem}_{}", metric_label(m)), &plot)?;
        }
    }
    Ok(())
}

fn cmd_sweep(cli: &Cli) -> Result<()> {
    let text = read_config_text(cli)?.ok_or_else(|| Error::config("--config", "sweep needs a spec file"))?;
    let mut spec: SweepSpec = parse_json(&text)?;
    if let Some(s) = cli.seed {
        spec.base.seed = s;
    }
    if cli.fast {
        spec.reference_side = spec.reference_side.min(base_reference_side(true));
    }
    spec.validate()?;
    let out = prepare_out(cli, "sweep")?;
    let outcome = run_sweep(&spec, sweep_options(cli))?;
    persist_sweep(&out, "sweep", &spec, &outcome)
}

/// The phase-scale sweep at a config's `(D, L, M)`, metrics taken at its last step.
pub fn phase_spec(cfg: &TrainConfig) -> SweepSpec {
    SweepSpec {
        axis: Axis::Alpha,
        grid: PHASE_ALPHAS.to_vec(),
        base: cfg.clone(),
        repetitions: 10,
        k: cfg.steps,
        metrics: vec![Metric::Fluctuation, Metric::Laziness],
        phase_alpha: None,
        reference_side: 0,
        fit: Some(RateModel::Laziness),
    }
}

fn cmd_phase(cli: &Cli) -> Result<()> {
    let cfg = require_train_config(cli)?;
    let spec = phase_spec(&cfg);
    spec.validate()?;
    let out = prepare_out(cli, "phase")?;
    let outcome = run_sweep(&spec, sweep_options(cli))?;
    persist_sweep(&out, "phase", &spec, &outcome)
}

/// Phase-diagram figure setting: `(dims, L, M, seed)`. A config overrides it
/// with its own single `D`.
pub fn figure4_setting(cfg: Option<&TrainConfig>, fast: bool, seed: u64) -> (Vec<usize>, usize, usize, u64) {
    match cfg {
        Some(c) => (vec![c.dim], c.depth, c.width, c.seed),
        None if fast => (vec![8, 32], 500, 10, seed),
        None => (vec![8, 32, 128], 1000, 10, seed),
    }
}

pub const FIG4_FLUCTUATION_K: usize = 10;
pub const FIG4_LAZINESS_K: usize = 50;

fn cmd_figure(cli: &Cli, tag: FigureTag) -> Result<()> {
    let cfg = load_train_config(cli)?;
    let seed = cli.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
    let out = prepare_out(cli, &format!("figure {}", tag.stem()))?;
    let stem = tag.stem();
    match tag {
        FigureTag::F1 => figure1(&out, cfg, cli.fast, seed),
        FigureTag::F2a | FigureTag::F2b => {
            let spec = if tag == FigureTag::F2a { depth_sweep(cli.fast, seed) } else { width_sweep(cli.fast, seed) };
            let outcome = run_sweep(&spec, sweep_options(cli))?;
            persist_outcome(&out.join(format!("{stem}.csv")), &outcome)?;
            write_plot(&out, &format!("{stem}_plot"), &sweep_plot(&spec, &outcome, Metric::ForwardError, stem))
        }
        FigureTag::F3a => {
            let base = cfg.unwrap_or_else(|| TrainConfig::complete_mlp(10, 8, 1, 100, seed));
            let reference = reference_for(&base, cli.fast, base.depth * base.width)?;
            write_loss_csv(&out.join(format!("{stem}.csv")), reference.losses())?;
            let curve = reference.losses().iter().enumerate().map(|(k, &l)| (k as f64, l)).collect();
            let mut plot = Plot::new("reference training loss", "k", "loss").with(Series::line("loss", curve));
            plot.log_y = true;
            write_plot(&out, &format!("{stem}_plot"), &plot)
        }
        FigureTag::F3b => figure3b(&out, cfg, cli.fast, seed),
        FigureTag::F4a | FigureTag::F4b => {
            let (metric, k) = if tag == FigureTag::F4a {
                (Metric::Fluctuation, FIG4_FLUCTUATION_K)
            } else {
                (Metric::Laziness, FIG4_LAZINESS_K)
            };
            let (dims, depth, width, seed) = figure4_setting(cfg.as_ref(), cli.fast, seed);
            let mut plot = Plot::new(stem, "alpha", metric_label(metric)).log_log();
            let mut pooled = Vec::new();
            for &d in &dims {
                let spec = alpha_sweep(d, depth, width, k, &PHASE_ALPHAS, metric, seed);
                let outcome = run_sweep(&spec, sweep_options(cli))?;
                persist_outcome(&out.join(format!("{stem}_D{d}.csv")), &outcome)?;
                let agg = aggregate(&outcome.records, metric_value(metric));
                plot = plot.with(Series::line(format!("D={d}"), agg.iter().map(|a| (a.value, a.mean)).collect()));
                pooled.extend(rate_points(&spec, &outcome.records, metric_model(metric)));
            }
            write_pooled_fit(&out.join(format!("{stem}.fit.json")), &pooled, metric_model(metric))?;
            write_plot(&out, &format!("{stem}_plot"), &plot)
        }
        FigureTag::F4c => figure4c(&out, cfg.as_ref(), cli.fast, seed),
    }
}

/// Fits pooled points; a design that cannot identify the law is recorded as such.
fn write_pooled_fit(path: &Path, points: &[RatePoint], model: RateModel) -> Result<()> {
    #[derive(Serialize)]
    struct Pooled<'a> {
        fit: Option<RateFit>,
        reason: Option<String>,
        points: &'a [RatePoint],
    }
    let (fit, reason) = match fit_rate(points, model) {
        Ok(f) => (Some(f), None),
        Err(e @ (Error::Degenerate | Error::Invalid(_))) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    fs::write(path, serde_json::to_string_pretty(&Pooled { fit, reason, points })?)?;
    Ok(())
}

#[derive(Serialize)]
struct Figure1Sidecar {
    projection: Vec<f64>,
    input_index: usize,
    depths: Vec<usize>,
    reference_depth: usize,
    steps: usize,
    seed: u64,
}

/// Unit vector drawn from the master seed.
pub fn projection_vector(seed: u64, dim: usize) -> Result<Vec<f64>> {
    let v = gaussian_sample(&SeedPath::new(seed).projection(0), dim, 1.0)?;
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(v.into_iter().map(|x| x / n).collect())
}

fn figure1(out: &Path, cfg: Option<TrainConfig>, fast: bool, seed: u64) -> Result<()> {
    let (base, depths) = match cfg {
        Some(c) => {
            let d = c.depth;
            (c, vec![d])
        }
        None => (TrainConfig::complete_mlp(10, 8, 1, 100, seed), vec![8, 32, 128, 512]),
    };
    let max_lm = depths.iter().max().copied().unwrap_or(1) * base.width;
    let reference = reference_for(&base, fast, max_lm)?;
    let data = reference.dataset();
    let x = data.input(0);
    let p = projection_vector(seed, base.dim * base.tokens)?;
    let project = |h: &crate::tensor::State| h.as_slice().iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
    let k = base.steps;
    let mut plot = Plot::new("forward pass, 1-D projection", "s", "projection");
    for &l in &depths {
        let c = TrainConfig { depth: l, ..base.clone() };
        let run = train(&c, data)?;
        let h = forward_pass(run.snapshot(k)?, x, c.alpha)?;
        let pts = h.states.iter().enumerate().map(|(i, s)| (i as f64 / l as f64, project(s))).collect();
        plot = plot.with(Series::line(format!("L={l}"), pts));
    }
    let r = reference.query_limit_fields(k, x, None)?.forward;
    let lr = reference.depth();
    let pts = r.states.iter().enumerate().map(|(i, s)| (i as f64 / lr as f64, project(s))).collect();
    plot = plot.with(Series::line("reference", pts));
    let sidecar = Figure1Sidecar { projection: p, input_index: 0, depths, reference_depth: lr, steps: k, seed };
    fs::write(out.join("fig1.json"), serde_json::to_string_pretty(&sidecar)?)?;
    write_plot(out, "fig1", &plot)
}

fn figure3b(out: &Path, cfg: Option<TrainConfig>, fast: bool, seed: u64) -> Result<()> {
    let mut c = cfg.unwrap_or_else(|| {
        let side = base_reference_side(fast);
        TrainConfig::complete_mlp(10, side, side, 100, seed)
    });
    c.tie_first_unit = true;
    let data = config_dataset(&c)?;
    let (depth, p) = (c.depth, c.kind().param_len(c.dim));
    // rows[l][k] holds unit 1 of layer l at iterate k
    let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(c.steps + 1); depth];
    train_with(&c, &data, |_, net, _| {
        for (l, row) in rows.iter_mut().enumerate() {
            row.push(net.unit(l, 0).to_vec());
        }
        Ok(())
    })?;
    let mut w = csv::Writer::from_path(out.join("fig3b.csv"))?;
    let mut header = vec!["layer".to_string(), "k".to_string()];
    header.extend((0..p).map(|i| format!("z{i}")));
    w.write_record(&header)?;
    for (l, row) in rows.iter().enumerate() {
        for (k, z) in row.iter().enumerate() {
            let mut rec = vec![l.to_string(), k.to_string()];
            rec.extend(z.iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    let picks: Vec<usize> = {
        let mut v: Vec<usize> = (0..5).map(|i| i * (depth - 1) / 4).collect();
        v.dedup();
        v
    };
    let (xl, yl) = if c.dim >= 2 { ("z0", "z1") } else { ("k", "z0") };
    let mut plot = Plot::new("tied unit across iterations", xl, yl);
    for &l in &picks {
        let pts = rows[l]
            .iter()
            .enumerate()
            .map(|(k, z)| if c.dim >= 2 { (z[0], z[1]) } else { (k as f64, z[0]) })
            .collect();
        plot = plot.with(Series::line(format!("layer {l}"), pts));
    }
    write_plot(out, "fig3b_plot", &plot)
}

fn figure4c(out: &Path, cfg: Option<&TrainConfig>, fast: bool, seed: u64) -> Result<()> {
    let (dims, depth, width, seed) = figure4_setting(cfg, fast, seed);
    let mut w = csv::Writer::from_path(out.join("fig4c.csv"))?;
    w.write_record(["D", "alpha", "k", "loss"])?;
    let mut plot = Plot::new("fig4c: training loss", "k", "loss");
    plot.log_y = true;
    let mut diverged = Vec::new();
    for &d in &dims {
        let spec = alpha_sweep(d, depth, width, FIG4_LAZINESS_K, &PHASE_ALPHAS, Metric::Laziness, seed);
        for &a in &PHASE_ALPHAS {
            let c = spec.point_config(a, 0);
            match train(&c, &config_dataset(&c)?) {
                Ok(run) => {
                    for (k, l) in run.losses.iter().enumerate() {
                        w.write_record([d.to_string(), format!("{a}"), k.to_string(), format!("{l:e}")])?;
                    }
                    let pts = run.losses.iter().enumerate().map(|(k, &l)| (k as f64, l)).collect();
                    plot = plot.with(Series::line(format!("D={d} alpha={a}"), pts));
                }
                Err(e) if e.is_divergence() => diverged.push((d, a)),
                Err(e) => return Err(e),
            }
        }
    }
    w.flush()?;
    if !diverged.is_empty() {
        let mut f = fs::File::create(out.join("fig4c_diverged.txt"))?;
        for (d, a) in diverged {
            writeln!(f, "D={d} alpha={a}")?;
        }
    }
    write_plot(out, "fig4c_plot", &plot)
}
