use rayon::prelude::*;

use super::reference::ReferenceModel;
use crate::blocks::vjp_params_acc;
use crate::error::{Error, Result};
use crate::resnet::NetParams;
use crate::tensor::all_finite;

/// One tracer per unit of a finite net, started from that unit's initial
/// weights and moved by the surrogate's mean-field gradient at depth
/// `s = l / L` (0-based layer `l`).
#[derive(Clone, Debug, PartialEq)]
pub struct TracerSet {
    params: NetParams,
    iteration: usize,
}

impl TracerSet {
    /// Tracers coupled to `net`, which must be at its initialization.
    pub fn from_net(net: &NetParams) -> Self {
        Self {
            params: net.clone(),
            iteration: 0,
        }
    }

    /// Tracer weights, laid out like the finite net.
    pub fn params(&self) -> &NetParams {
        &self.params
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn len(&self) -> usize {
        self.params.units()
    }

    pub fn is_empty(&self) -> bool {
        self.params.units() == 0
    }
}

/// One GD step of every tracer under the surrogate's fields at the tracers'
/// current iteration: `z -= lr_g / (alpha n) sum_i D2 phi(h_i(s), z)^T b_i(s)`.
/// The surrogate is only read.
pub fn evolve_tracers(tracers: &TracerSet, reference: &ReferenceModel) -> Result<TracerSet> {
    let net = &tracers.params;
    let cfg = reference.config();
    if net.kind() != &cfg.kind() || net.dim() != cfg.dim || net.tokens() != cfg.tokens {
        return Err(Error::shape("tracers and reference use different blocks"));
    }
    let fields = reference.fields(tracers.iteration)?;
    let (d, t, kind) = (net.dim(), net.tokens(), *net.kind());
    let (depth, width, p) = (net.depth(), net.width(), net.unit_len());
    let n = fields.forward.len();
    let steps: Vec<f64> = net
        .unit_groups()
        .into_iter()
        .map(|g| cfg.lr(g) / (cfg.alpha * n as f64))
        .collect();

    let mut next = net.clone();
    next.params_mut()
        .par_chunks_mut(width * p)
        .enumerate()
        .for_each(|(l, chunk)| {
            let lg = reference.grid_index(l as f64 / depth as f64).min(reference.depth() - 1);
            let mut g = vec![0.0; p];
            for j in 0..width {
                let z = net.unit(l, j);
                g.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..n {
                    vjp_params_acc(
                        &kind,
                        d,
                        t,
                        fields.forward[i].states[lg].as_slice(),
                        z,
                        fields.backward[i].states[lg + 1].as_slice(),
                        1.0,
                        &mut g,
                    );
                }
                let out = &mut chunk[j * p..(j + 1) * p];
                for ((o, gi), s) in out.iter_mut().zip(&g).zip(&steps) {
                    *o -= s * gi;
                }
            }
        });
    if !all_finite(next.params()) {
        return Err(Error::Divergence {
            iteration: tracers.iteration + 1,
        });
    }
    Ok(TracerSet {
        params: next,
        iteration: tracers.iteration + 1,
    })
}

/// Tracer weights at iterations `0..=steps`, starting from `initial`.
pub fn trace_tracers(initial: &NetParams, reference: &ReferenceModel, steps: usize) -> Result<Vec<NetParams>> {
    if steps > reference.steps() {
        return Err(Error::Unrecorded(steps));
    }
    let mut set = TracerSet::from_net(initial);
    let mut out = Vec::with_capacity(steps + 1);
    out.push(set.params.clone());
    for _ in 0..steps {
        set = evolve_tracers(&set, reference)?;
        out.push(set.params.clone());
    }
    Ok(out)
}
