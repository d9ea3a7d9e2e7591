use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fit::{fit_rate, RateFit, RateModel, RatePoint};
use super::measures::{measure_fluctuation, measure_forward_error, measure_laziness};
use crate::blocks::BlockKind;
use crate::error::{Error, Result};
use crate::limit::{build_reference, reference_side, ReferenceModel};
use crate::resnet::{config_dataset, forward_pass, train, Dataset, TrainConfig};
use crate::rng::SeedPath;
use crate::tensor::State;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Depth,
    Width,
    Dim,
    /// Scale `alpha` of the 2LP output init `sigma_v = alpha sqrt(D)`.
    Alpha,
    /// `sigma_v` in units of `sqrt(D)`.
    SigmaV,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Depth => "L",
            Axis::Width => "M",
            Axis::Dim => "D",
            Axis::Alpha => "alpha",
            Axis::SigmaV => "sigma_v",
        }
    }
}

/// Hyperparameters of the 2LP phase diagram at scale `alpha`:
/// `sigma_u = sqrt(D)`, `sigma_v = alpha sqrt(D)`,
/// `(lr_u, lr_v) = (D min(1, alpha^-2), D)`, branch multiplier 1.
pub fn phase_config(base: &TrainConfig, alpha: f64) -> TrainConfig {
    let d = base.dim as f64;
    TrainConfig {
        alpha: 1.0,
        sigma_u: d.sqrt(),
        sigma_v: alpha * d.sqrt(),
        lr_u: d * 1f64.min(alpha.powi(-2)),
        lr_v: d,
        ..base.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ForwardError,
    Fluctuation,
    Laziness,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: Axis,
    /// Strictly increasing values of the axis.
    pub grid: Vec<f64>,
    pub base: TrainConfig,
    pub repetitions: usize,
    /// Iteration at which metrics are taken.
    pub k: usize,
    pub metrics: Vec<Metric>,
    /// Phase-diagram scale held fixed while another axis moves. When set,
    /// every point uses [`phase_config`].
    #[serde(default)]
    pub phase_alpha: Option<f64>,
    /// Base side of the square reference grid; grown to keep the size ratio.
    #[serde(default = "default_reference_side")]
    pub reference_side: usize,
    #[serde(default)]
    pub fit: Option<RateModel>,
}

fn default_reference_side() -> usize {
    1000
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::config("repetitions", "must be at least 1"));
        }
        if self.grid.is_empty() || self.grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::config("grid", "must be non-empty and strictly increasing"));
        }
        if self.grid.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("grid", "values must be finite and nonnegative"));
        }
        if matches!(self.axis, Axis::Depth | Axis::Width | Axis::Dim)
            && self.grid.iter().any(|v| v.fract() != 0.0 || *v < 1.0)
        {
            return Err(Error::config("grid", "sizes must be positive integers"));
        }
        if self.k > self.base.steps {
            return Err(Error::config("k", "comparison iteration is past the last step"));
        }
        if self.metrics.contains(&Metric::Fluctuation) && self.repetitions < 2 {
            return Err(Error::config("repetitions", "fluctuation needs at least two"));
        }
        for (i, v) in self.grid.iter().enumerate() {
            self.point_config(*v, 0)
                .validate()
                .map_err(|e| Error::config(format!("grid[{i}]"), e.to_string()))?;
        }
        Ok(())
    }

    /// Phase scale of a grid point, if the sweep lives on the phase diagram.
    pub fn point_alpha(&self, value: f64) -> Option<f64> {
        match self.axis {
            Axis::Alpha => Some(value),
            _ => self.phase_alpha,
        }
    }

    /// Master seed of repetition `r`, shared by every grid value.
    pub fn repetition_seed(&self, r: usize) -> u64 {
        SeedPath::new(self.base.seed).repetition(r).derive_u64()
    }

    pub fn point_config(&self, value: f64, r: usize) -> TrainConfig {
        let mut c = self.base.clone();
        match self.axis {
            Axis::Depth => c.depth = value as usize,
            Axis::Width => c.width = value as usize,
            Axis::Dim => c.dim = value as usize,
            Axis::Alpha => {}
            Axis::SigmaV => {
                let d = c.dim as f64;
                c.sigma_v = value * d.sqrt();
                c.lr_u = if value > 1.0 { d / (value * value) } else { d };
            }
        }
        if let Some(a) = self.point_alpha(value) {
            c = phase_config(&c, a);
        }
        c.seed = self.repetition_seed(r);
        c.snapshots = vec![0, self.k];
        c
    }
}

/// One `(grid value, repetition)` run. Metrics are absent when not requested
/// or when the run diverged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub axis: String,
    pub value: f64,
    pub repetition: usize,
    pub k: usize,
    pub error_rms: Option<f64>,
    pub error_max_layer: Option<f64>,
    /// Fluctuation across all repetitions of this grid value (repeated on
    /// each of its rows).
    pub fluct_std: Option<f64>,
    pub laziness: Option<f64>,
    pub diverged: bool,
    pub seed: u64,
    pub runtime_s: f64,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub records: Vec<ExperimentRecord>,
    pub fit: Option<RateFit>,
    /// Outputs at iteration `k` per grid index and repetition (`None` when
    /// diverged).
    pub outputs: Vec<Vec<Option<Vec<State>>>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SweepOptions {
    /// Worker threads for the job queue; `0` uses the rayon default.
    pub workers: usize,
    /// Record wall-clock time per run. Off by default so outputs are
    /// byte-reproducible.
    pub timing: bool,
}

/// Runs every grid point and repetition, reusing one reference per `D`.
pub fn run_sweep(spec: &SweepSpec, options: SweepOptions) -> Result<SweepOutcome> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers)
        .build()
        .map_err(|e| Error::Invalid(e.to_string()))?;
    pool.install(|| run_sweep_inner(spec, options))
}

fn run_sweep_inner(spec: &SweepSpec, options: SweepOptions) -> Result<SweepOutcome> {
    let configs: Vec<TrainConfig> = spec.grid.iter().map(|&v| spec.point_config(v, 0)).collect();
    let mut datasets: BTreeMap<usize, Dataset> = BTreeMap::new();
    for c in &configs {
        if let std::collections::btree_map::Entry::Vacant(e) = datasets.entry(c.dim) {
            e.insert(config_dataset(c)?);
        }
    }
    let mut references: BTreeMap<usize, ReferenceModel> = BTreeMap::new();
    if spec.metrics.contains(&Metric::ForwardError) {
        for (&dim, data) in &datasets {
            let at_dim: Vec<&TrainConfig> = configs.iter().filter(|c| c.dim == dim).collect();
            let max_lm = at_dim.iter().map(|c| c.depth * c.width).max().unwrap_or(1);
            let side = reference_side(spec.reference_side, max_lm);
            let mut base = at_dim[0].clone();
            base.seed = spec.base.seed;
            base.steps = spec.k;
            references.insert(dim, build_reference(&base, data, side, side)?);
        }
    }

    let jobs: Vec<(usize, usize)> = (0..spec.grid.len())
        .flat_map(|g| (0..spec.repetitions).map(move |r| (g, r)))
        .collect();
    let results: Vec<Result<(ExperimentRecord, Option<Vec<State>>)>> = jobs
        .par_iter()
        .map(|&(g, r)| {
            let value = spec.grid[g];
            let cfg = spec.point_config(value, r);
            let data = &datasets[&cfg.dim];
            let reference = references.get(&cfg.dim);
            run_point(spec, value, r, &cfg, data, reference, options)
        })
        .collect();

    let mut records = Vec::with_capacity(jobs.len());
    let mut outputs = vec![vec![None; spec.repetitions]; spec.grid.len()];
    for ((g, r), res) in jobs.iter().zip(results) {
        let (rec, out) = res?;
        records.push(rec);
        outputs[*g][*r] = out;
    }

    if spec.metrics.contains(&Metric::Fluctuation) {
        for (g, outs) in outputs.iter().enumerate() {
            let ok: Vec<Vec<State>> = outs.iter().flatten().cloned().collect();
            let f = if ok.len() >= 2 { Some(measure_fluctuation(&ok)?) } else { None };
            for rec in records.iter_mut().skip(g * spec.repetitions).take(spec.repetitions) {
                if !rec.diverged {
                    rec.fluct_std = f;
                }
            }
        }
    }

    let fit = match spec.fit {
        Some(model) => Some(fit_rate(&rate_points(spec, &records, model), model)?),
        None => None,
    };
    Ok(SweepOutcome {
        records,
        fit,
        outputs,
    })
}

fn run_point(
    spec: &SweepSpec,
    value: f64,
    r: usize,
    cfg: &TrainConfig,
    data: &Dataset,
    reference: Option<&ReferenceModel>,
    options: SweepOptions,
) -> Result<(ExperimentRecord, Option<Vec<State>>)> {
    let start = Instant::now();
    let mut run_cfg = cfg.clone();
    run_cfg.steps = spec.k;
    let mut rec = ExperimentRecord {
        axis: spec.axis.name().to_string(),
        value,
        repetition: r,
        k: spec.k,
        error_rms: None,
        error_max_layer: None,
        fluct_std: None,
        laziness: None,
        diverged: false,
        seed: cfg.seed,
        runtime_s: 0.0,
    };
    let run = match train(&run_cfg, data) {
        Ok(run) => run,
        Err(e) if e.is_divergence() => {
            rec.diverged = true;
            if options.timing {
                rec.runtime_s = start.elapsed().as_secs_f64();
            }
            return Ok((rec, None));
        }
        Err(e) => return Err(e),
    };
    let net = run.snapshot(spec.k)?;
    if let Some(reference) = reference {
        reference.check_resolves(cfg.depth, cfg.width)?;
        let e = measure_forward_error(net, cfg.alpha, reference, spec.k, data.inputs())?;
        rec.error_rms = Some(e.rms());
        rec.error_max_layer = Some(e.max_layer());
    }
    if spec.metrics.contains(&Metric::Laziness) && matches!(net.kind(), BlockKind::Mlp(_)) {
        rec.laziness = Some(measure_laziness(run.initial(), net)?);
    }
    let outputs = if spec.metrics.contains(&Metric::Fluctuation) {
        let outs: Result<Vec<State>> = data
            .inputs()
            .iter()
            .map(|x| forward_pass(net, x, cfg.alpha).map(|t| t.output().clone()))
            .collect();
        Some(outs?)
    } else {
        None
    };
    if options.timing {
        rec.runtime_s = start.elapsed().as_secs_f64();
    }
    Ok((rec, outputs))
}

/// Per-value means of the metric a model describes, diverged runs excluded.
pub fn rate_points(spec: &SweepSpec, records: &[ExperimentRecord], model: RateModel) -> Vec<RatePoint> {
    let metric = |r: &ExperimentRecord| match model {
        RateModel::DepthWidth => r.error_rms,
        RateModel::Fluctuation => r.fluct_std,
        RateModel::Laziness => r.laziness,
    };
    let mut points = Vec::new();
    for &value in &spec.grid {
        let vals: Vec<f64> = records
            .iter()
            .filter(|r| r.value == value && !r.diverged)
            .filter_map(metric)
            .collect();
        if vals.is_empty() {
            continue;
        }
        let cfg = spec.point_config(value, 0);
        points.push(RatePoint {
            depth: cfg.depth,
            width: cfg.width,
            dim: cfg.dim,
            alpha: spec.point_alpha(value).unwrap_or(cfg.alpha),
            value: vals.iter().sum::<f64>() / vals.len() as f64,
        });
    }
    points
}

/// Mean and sample std over repetitions of one grid value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub value: f64,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn aggregate<F>(records: &[ExperimentRecord], metric: F) -> Vec<Aggregate>
where
    F: Fn(&ExperimentRecord) -> Option<f64>,
{
    let mut by_value: Vec<(f64, Vec<f64>)> = Vec::new();
    for r in records.iter().filter(|r| !r.diverged) {
        let Some(m) = metric(r) else { continue };
        match by_value.iter_mut().find(|(v, _)| *v == r.value) {
            Some((_, vals)) => vals.push(m),
            None => by_value.push((r.value, vec![m])),
        }
    }
    by_value
        .into_iter()
        .map(|(value, vals)| {
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            Aggregate { value, mean, std, count: n }
        })
        .collect()
}

pub const RECORD_HEADER: [&str; 11] = [
    "axis",
    "value",
    "repetition",
    "k",
    "error_rms",
    "error_max_layer",
    "fluct_std",
    "laziness",
    "diverged",
    "seed",
    "runtime_s",
];

pub fn write_records_csv(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RECORD_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for r in records {
        w.write_record([
            r.axis.clone(),
            format!("{}", r.value),
            r.repetition.to_string(),
            r.k.to_string(),
            opt(r.error_rms),
            opt(r.error_max_layer),
            opt(r.fluct_std),
            opt(r.laziness),
            r.diverged.to_string(),
            r.seed.to_string(),
            format!("{}", r.runtime_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let mut rd = csv::Reader::from_path(path)?;
    let headers = rd.headers()?.clone();
    if headers.iter().ne(RECORD_HEADER) {
        return Err(Error::Invalid("unexpected CSV header".into()));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Invalid(format!("bad number {s:?}"))) };
    let opt = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s).map(Some) } };
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        out.push(ExperimentRecord {
            axis: row[0].to_string(),
            value: num(&row[1])?,
            repetition: num(&row[2])? as usize,
            k: num(&row[3])? as usize,
            error_rms: opt(&row[4])?,
            error_max_layer: opt(&row[5])?,
            fluct_std: opt(&row[6])?,
            laziness: opt(&row[7])?,
            diverged: &row[8] == "true",
            seed: row[9].parse().map_err(|_| Error::Invalid("bad seed".into()))?,
            runtime_s: num(&row[10])?,
        });
    }
    Ok(out)
}

/// `<csv>.fit.json` next to a record file.
pub fn fit_sidecar_path(csv: &Path) -> PathBuf {
    let mut name = csv.file_stem().unwrap_or_default().to_os_string();
    name.push(".fit.json");
    csv.with_file_name(name)
}

/// Writes the records and, when present, the fit sidecar.
pub fn persist_outcome(path: &Path, outcome: &SweepOutcome) -> Result<()> {
    write_records_csv(path, &outcome.records)?;
    if let Some(fit) = &outcome.fit {
        fs::write(fit_sidecar_path(path), serde_json::to_string_pretty(fit)?)?;
    }
    Ok(())
}
