use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::resnet::{
    backward_pass, forward_pass, init_net, train_from, BackwardTrace, Dataset, ForwardTrace,
    GradientDescent, NetParams, TrainConfig,
};
use crate::rng::SeedPath;
use crate::tensor::State;

/// Minimum ratio between the surrogate's `L M` and that of any net it is
/// compared against.
pub const RESOLUTION_RATIO: usize = 16;

/// Forward and backward traces of every training sample at one iteration.
#[derive(Clone, Debug)]
pub struct IterationFields {
    pub forward: Vec<ForwardTrace>,
    pub backward: Vec<BackwardTrace>,
}

/// A large ResNet trained on the same problem, standing in for the mean ODE.
/// Immutable once built.
#[derive(Clone, Debug)]
pub struct ReferenceModel {
    config: TrainConfig,
    data: Dataset,
    fields: Vec<IterationFields>,
    snapshots: BTreeMap<usize, NetParams>,
    losses: Vec<f64>,
}

/// Fields of the surrogate for one input, on its own depth grid.
#[derive(Clone, Debug)]
pub struct LimitFields {
    pub forward: ForwardTrace,
    pub backward: Option<BackwardTrace>,
}

/// The surrogate's config: `config` with the grid replaced by `(l_ref, m_ref)`
/// and an init seed derived from, but independent of, `config.seed`.
pub fn reference_config(config: &TrainConfig, l_ref: usize, m_ref: usize) -> TrainConfig {
    TrainConfig {
        depth: l_ref,
        width: m_ref,
        seed: SeedPath::new(config.seed).reference(0).derive_u64(),
        tie_first_unit: false,
        ..config.clone()
    }
}

/// Smallest square grid side `>= base` whose `side^2` resolves nets with up to
/// `max_lm` units.
pub fn reference_side(base: usize, max_lm: usize) -> usize {
    let need = ((RESOLUTION_RATIO * max_lm) as f64).sqrt().ceil() as usize;
    base.max(need)
}

/// Trains the surrogate and records the fields of every iteration.
pub fn build_reference(
    config: &TrainConfig,
    data: &Dataset,
    l_ref: usize,
    m_ref: usize,
) -> Result<ReferenceModel> {
    config.validate()?;
    let cfg = reference_config(config, l_ref, m_ref);
    cfg.validate()?;
    let reference_units = l_ref * m_ref;
    if reference_units < RESOLUTION_RATIO * config.depth * config.width {
        return Err(Error::config(
            "reference",
            format!(
                "L_ref M_ref = {reference_units} is below {RESOLUTION_RATIO} x {}",
                config.depth * config.width
            ),
        ));
    }
    build_reference_from(init_net(&cfg)?, &cfg, data)
}

/// Trains a surrogate from explicit initial weights. `config` must describe
/// the surrogate itself; no size ratio is enforced here.
pub fn build_reference_from(
    initial: NetParams,
    config: &TrainConfig,
    data: &Dataset,
) -> Result<ReferenceModel> {
    config.validate()?;
    if initial.depth() != config.depth || initial.width() != config.width {
        return Err(Error::shape("initial weights do not match the reference config"));
    }
    let cfg = config.clone();
    let mut fields = Vec::with_capacity(cfg.steps + 1);
    let run = train_from(initial, &cfg, data, &mut GradientDescent, |_, _, pass| {
        fields.push(IterationFields {
            forward: pass.forward.iter().map(ForwardTrace::states_only).collect(),
            backward: pass.backward.clone(),
        });
        Ok(())
    })?;
    Ok(ReferenceModel {
        config: cfg,
        data: data.clone(),
        fields,
        snapshots: run.snapshots,
        losses: run.losses,
    })
}

impl ReferenceModel {
    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn snapshot(&self, k: usize) -> Result<&NetParams> {
        self.snapshots.get(&k).ok_or(Error::Unrecorded(k))
    }

    pub fn snapshots(&self) -> &BTreeMap<usize, NetParams> {
        &self.snapshots
    }

    pub fn fields(&self, k: usize) -> Result<&IterationFields> {
        self.fields.get(k).ok_or(Error::Unrecorded(k))
    }

    /// Errors unless the surrogate has at least 16x the units of an
    /// `L x M` net.
    pub fn check_resolves(&self, depth: usize, width: usize) -> Result<()> {
        if self.depth() * self.width() < RESOLUTION_RATIO * depth * width {
            return Err(Error::Invalid(format!(
                "reference {}x{} is too small to resolve a {depth}x{width} net",
                self.depth(),
                self.width()
            )));
        }
        Ok(())
    }

    /// Nearest grid index to depth `s in [0, 1]`.
    pub fn grid_index(&self, s: f64) -> usize {
        let l = self.depth() as f64;
        ((s * l).round().max(0.0) as usize).min(self.depth())
    }

    /// Fields for input `x` at iteration `k`. Training inputs are served from
    /// the recorded fields, with the backward pass seeded by the loss
    /// gradient unless `w` is given. Other inputs need a parameter snapshot
    /// at `k`; their backward pass is computed only when `w` is given.
    pub fn query_limit_fields(&self, k: usize, x: &State, w: Option<&State>) -> Result<LimitFields> {
        let alpha = self.config.alpha;
        if let Some(i) = self.data.position(x) {
            let recorded = self.fields(k)?;
            let forward = recorded.forward[i].clone();
            let backward = match w {
                None => Some(recorded.backward[i].clone()),
                Some(w) => Some(backward_pass(self.snapshot(k)?, &forward, w, alpha)?),
            };
            return Ok(LimitFields { forward, backward });
        }
        let net = self.snapshot(k)?;
        let forward = forward_pass(net, x, alpha)?;
        let backward = w.map(|w| backward_pass(net, &forward, w, alpha)).transpose()?;
        Ok(LimitFields {
            forward: forward.states_only(),
            backward,
        })
    }
}
