use std::collections::BTreeMap;

use super::config::TrainConfig;
use super::data::Dataset;
use super::net::NetParams;
use super::pass::{batch_pass, full_gradient, BatchPass};
use crate::error::{Error, Result};

/// A parameter update driven by the full-batch gradient.
pub trait UpdateRule {
    fn apply(&mut self, net: &mut NetParams, grad: &[f64], config: &TrainConfig) -> Result<()>;
}

/// Full-batch gradient descent with per-group rates `L M lr_g / alpha^2`.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradientDescent;

impl UpdateRule for GradientDescent {
    fn apply(&mut self, net: &mut NetParams, grad: &[f64], config: &TrainConfig) -> Result<()> {
        if grad.len() != net.params().len() {
            return Err(Error::shape("gradient length differs from parameters"));
        }
        let lm = (net.depth() * net.width()) as f64;
        let base = lm / (config.alpha * config.alpha);
        let steps: Vec<f64> = net
            .unit_groups()
            .into_iter()
            .map(|g| base * config.lr(g))
            .collect();
        let p = steps.len();
        for (unit, g) in net.params_mut().chunks_exact_mut(p).zip(grad.chunks_exact(p)) {
            for ((z, gi), s) in unit.iter_mut().zip(g).zip(&steps) {
                *z -= s * gi;
            }
        }
        Ok(())
    }
}

pub fn init_net(config: &TrainConfig) -> Result<NetParams> {
    NetParams::init(
        config.kind(),
        config.dim,
        config.tokens,
        config.depth,
        config.width,
        config.scales(),
        config.seed,
        config.tie_first_unit,
    )
}

/// The synthetic training set named by `config` (`samples`, `data_seed`).
pub fn config_dataset(config: &TrainConfig) -> Result<Dataset> {
    Dataset::synthetic(config.dim, config.tokens, config.samples, config.data_seed)
}

/// One full-batch GD step on the mean training loss.
pub fn gd_step(net: &NetParams, data: &Dataset, config: &TrainConfig) -> Result<NetParams> {
    let pass = batch_pass(net, data, config.alpha)?;
    let grad = full_gradient(net, &pass, config.alpha)?;
    let mut next = net.clone();
    GradientDescent.apply(&mut next, &grad, config)?;
    if !next.params().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(next)
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub config: TrainConfig,
    /// Training loss at iterates `0..=K`.
    pub losses: Vec<f64>,
    pub snapshots: BTreeMap<usize, NetParams>,
}

impl TrainRun {
    pub fn snapshot(&self, k: usize) -> Result<&NetParams> {
        self.snapshots.get(&k).ok_or(Error::Unrecorded(k))
    }

    pub fn initial(&self) -> &NetParams {
        &self.snapshots[&0]
    }

    pub fn last(&self) -> &NetParams {
        self.snapshots.values().next_back().expect("schedule holds K")
    }
}

pub fn train(config: &TrainConfig, data: &Dataset) -> Result<TrainRun> {
    train_with(config, data, |_, _, _| Ok(()))
}

/// Trains from the config's initialization, calling `observer` with every
/// iterate `k = 0..=K` and its batch pass.
pub fn train_with<F>(config: &TrainConfig, data: &Dataset, observer: F) -> Result<TrainRun>
where
    F: FnMut(usize, &NetParams, &BatchPass) -> Result<()>,
{
    config.validate()?;
    let net = init_net(config)?;
    train_from(net, config, data, &mut GradientDescent, observer)
}

pub fn train_from<F, U>(
    mut net: NetParams,
    config: &TrainConfig,
    data: &Dataset,
    rule: &mut U,
    mut observer: F,
) -> Result<TrainRun>
where
    F: FnMut(usize, &NetParams, &BatchPass) -> Result<()>,
    U: UpdateRule,
{
    if data.dim() != net.dim() || data.tokens() != net.tokens() {
        return Err(Error::shape("dataset shape does not match the network"));
    }
    let schedule = config.snapshot_schedule();
    let mut losses = Vec::with_capacity(config.steps + 1);
    let mut snapshots = BTreeMap::new();
    let diverged = |k: usize| move |e: Error| if e.is_divergence() { Error::Divergence { iteration: k } } else { e };

    for k in 0..=config.steps {
        let pass = batch_pass(&net, data, config.alpha).map_err(diverged(k))?;
        let loss = pass.loss();
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration: k });
        }
        losses.push(loss);
        if schedule.binary_search(&k).is_ok() {
            snapshots.insert(k, net.clone());
        }
        observer(k, &net, &pass)?;
        if k < config.steps {
            let grad = full_gradient(&net, &pass, config.alpha).map_err(diverged(k))?;
            rule.apply(&mut net, &grad, config)?;
            if !net.params().iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence { iteration: k + 1 });
            }
        }
    }
    Ok(TrainRun {
        config: config.clone(),
        losses,
        snapshots,
    })
}
