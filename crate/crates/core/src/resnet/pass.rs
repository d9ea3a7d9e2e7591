//! Forward recursion, backward (adjoint) recursion, and per-unit gradients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::net::NetParams;
use crate::blocks::{apply_acc, vjp_params_acc, vjp_state_acc, BlockKind};
use crate::error::{Error, Result};
use crate::tensor::{all_finite, axpy, dot, State};

/// States `h^0 .. h^L` for one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub states: Vec<State>,
    pub input_index: Option<usize>,
    /// Perceptron blocks only: `(rho(a), rho'(a))` per `(layer, unit, token)`,
    /// reused by the backward pass and the gradients.
    #[serde(skip)]
    pub(crate) activations: Vec<[f64; 2]>,
}

impl ForwardTrace {
    pub(crate) fn from_states(states: Vec<State>, input_index: Option<usize>) -> Self {
        Self {
            states,
            input_index,
            activations: Vec::new(),
        }
    }

    /// A copy without the cached activations.
    pub fn states_only(&self) -> Self {
        Self::from_states(self.states.clone(), self.input_index)
    }

    fn has_activations(&self, net: &NetParams) -> bool {
        matches!(net.kind(), BlockKind::Mlp(_)) && self.activations.len() == net.units() * net.tokens()
    }

    pub fn input(&self) -> &State {
        &self.states[0]
    }

    pub fn output(&self) -> &State {
        self.states.last().expect("trace is never empty")
    }

    pub fn depth(&self) -> usize {
        self.states.len() - 1
    }
}

/// Adjoint states `b^0 .. b^L` indexed by layer, with `b^L = w`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackwardTrace {
    pub states: Vec<State>,
}

/// Branch scale `alpha / (L M)`.
pub fn branch_scale(net: &NetParams, alpha: f64) -> f64 {
    alpha / (net.depth() * net.width()) as f64
}

/// `h^{l} = h^{l-1} + alpha/(LM) sum_j phi(h^{l-1}, z^{j,l})`.
pub fn forward_pass(net: &NetParams, x: &State, alpha: f64) -> Result<ForwardTrace> {
    x.check_shape(net.dim(), net.tokens())?;
    let (d, t, kind) = (net.dim(), net.tokens(), *net.kind());
    let c = branch_scale(net, alpha);
    let mut states = Vec::with_capacity(net.depth() + 1);
    states.push(x.clone());
    let mut activations = Vec::new();
    if let BlockKind::Mlp(_) = kind {
        activations.reserve(net.units() * t);
    }
    for l in 0..net.depth() {
        let prev = states[l].as_slice();
        let mut next = prev.to_vec();
        match kind {
            BlockKind::Mlp(act) => {
                let df = d as f64;
                for j in 0..net.width() {
                    let (u, v) = net.unit(l, j).split_at(d);
                    for tok in 0..t {
                        let r = tok * d..(tok + 1) * d;
                        let a = dot(u, &prev[r.clone()]) / df;
                        let (ra, da) = (act.eval(a), act.deriv(a));
                        activations.push([ra, da]);
                        axpy(c * ra, v, &mut next[r]);
                    }
                }
            }
            _ => {
                for j in 0..net.width() {
                    apply_acc(&kind, d, t, prev, net.unit(l, j), c, &mut next);
                }
            }
        }
        if !all_finite(&next) {
            return Err(Error::Explosion { layer: l + 1 });
        }
        states.push(State::from_raw(d, t, next));
    }
    Ok(ForwardTrace {
        states,
        input_index: None,
        activations,
    })
}

/// `b^{l-1} = b^l + alpha/(LM) sum_j D1 phi(h^{l-1}, z^{j,l})^T b^l`, `b^L = w`.
pub fn backward_pass(
    net: &NetParams,
    trace: &ForwardTrace,
    w: &State,
    alpha: f64,
) -> Result<BackwardTrace> {
    if trace.depth() != net.depth() {
        return Err(Error::shape(format!(
            "trace has depth {}, net has depth {}",
            trace.depth(),
            net.depth()
        )));
    }
    w.check_shape(net.dim(), net.tokens())?;
    if !w.is_finite() {
        return Err(Error::NonFinite);
    }
    let (d, t, kind) = (net.dim(), net.tokens(), *net.kind());
    let c = branch_scale(net, alpha);
    let depth = net.depth();
    let mut states = vec![State::zeros(d, t); depth + 1];
    states[depth] = w.clone();
    for l in (0..depth).rev() {
        let b = states[l + 1].as_slice();
        let h = trace.states[l].as_slice();
        let mut prev = b.to_vec();
        if trace.has_activations(net) {
            let df = d as f64;
            for j in 0..net.width() {
                let (u, v) = net.unit(l, j).split_at(d);
                for tok in 0..t {
                    let r = tok * d..(tok + 1) * d;
                    let [_, da] = trace.activations[(l * net.width() + j) * t + tok];
                    axpy(c * da * dot(v, &b[r.clone()]) / df, u, &mut prev[r]);
                }
            }
        } else {
            for j in 0..net.width() {
                vjp_state_acc(&kind, d, t, h, net.unit(l, j), b, c, &mut prev);
            }
        }
        if !all_finite(&prev) {
            return Err(Error::Explosion { layer: l + 1 });
        }
        states[l] = State::from_raw(d, t, prev);
    }
    Ok(BackwardTrace { states })
}

/// Gradients of one sample's loss with respect to every unit.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitGradients {
    /// `alpha/(LM) D2 phi(h^{l-1}, z^{j,l})^T b^l`, laid out like the net.
    pub raw: Vec<f64>,
    /// `LM / alpha`, the factor turning `raw` into the per-sample map `g`.
    pub rescale: f64,
}

impl UnitGradients {
    /// The rescaled per-sample gradient map `D2 phi^T b`.
    pub fn rescaled(&self) -> Vec<f64> {
        self.raw.iter().map(|g| g * self.rescale).collect()
    }
}

pub fn unit_gradients(
    net: &NetParams,
    trace: &ForwardTrace,
    backward: &BackwardTrace,
    alpha: f64,
) -> Result<UnitGradients> {
    if trace.depth() != net.depth() || backward.states.len() != trace.states.len() {
        return Err(Error::shape("forward and backward traces do not match the net"));
    }
    let (d, t, kind) = (net.dim(), net.tokens(), *net.kind());
    let c = branch_scale(net, alpha);
    let p = net.unit_len();
    let mut raw = vec![0.0; net.params().len()];
    for l in 0..net.depth() {
        for j in 0..net.width() {
            let start = (l * net.width() + j) * p;
            vjp_params_acc(
                &kind,
                d,
                t,
                trace.states[l].as_slice(),
                net.unit(l, j),
                backward.states[l + 1].as_slice(),
                c,
                &mut raw[start..start + p],
            );
        }
    }
    if !all_finite(&raw) {
        return Err(Error::NonFinite);
    }
    Ok(UnitGradients {
        raw,
        rescale: 1.0 / c,
    })
}

/// Forward and backward traces of every training sample at one iterate.
#[derive(Clone, Debug)]
pub struct BatchPass {
    pub forward: Vec<ForwardTrace>,
    pub backward: Vec<BackwardTrace>,
    pub losses: Vec<f64>,
}

impl BatchPass {
    /// Mean training loss.
    pub fn loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }

    pub fn outputs(&self) -> Vec<State> {
        self.forward.iter().map(|t| t.output().clone()).collect()
    }
}

/// Runs the forward and backward recursions for every sample, in parallel.
/// The backward pass is seeded with `grad loss_i(h^L)`.
pub fn batch_pass(net: &NetParams, data: &Dataset, alpha: f64) -> Result<BatchPass> {
    let per_sample: Vec<Result<(ForwardTrace, BackwardTrace, f64)>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let mut fwd = forward_pass(net, data.input(i), alpha)?;
            fwd.input_index = Some(i);
            let out = fwd.output();
            let loss = data.loss(i, out);
            let w = data.loss_grad(i, out);
            let bwd = backward_pass(net, &fwd, &w, alpha)?;
            Ok((fwd, bwd, loss))
        })
        .collect();
    let mut pass = BatchPass {
        forward: Vec::with_capacity(data.len()),
        backward: Vec::with_capacity(data.len()),
        losses: Vec::with_capacity(data.len()),
    };
    for r in per_sample {
        let (f, b, l) = r?;
        pass.forward.push(f);
        pass.backward.push(b);
        pass.losses.push(l);
    }
    Ok(pass)
}

/// Gradient of the mean training loss, laid out like the net. Units are
/// processed in parallel by layer; the sum over samples runs in a fixed order
/// so the result does not depend on the worker count.
pub fn full_gradient(net: &NetParams, pass: &BatchPass, alpha: f64) -> Result<Vec<f64>> {
    let (d, t, kind) = (net.dim(), net.tokens(), *net.kind());
    let n = pass.forward.len();
    let c = branch_scale(net, alpha) / n as f64;
    let p = net.unit_len();
    let width = net.width();
    let mut grad = vec![0.0; net.params().len()];
    grad.par_chunks_mut(width * p)
        .enumerate()
        .for_each(|(l, chunk)| {
            for j in 0..width {
                let z = net.unit(l, j);
                let out = &mut chunk[j * p..(j + 1) * p];
                for i in 0..n {
                    let fwd = &pass.forward[i];
                    if fwd.has_activations(net) {
                        let (_, v) = z.split_at(d);
                        let (gu, gv) = out.split_at_mut(d);
                        let (h, b) = (fwd.states[l].as_slice(), pass.backward[i].states[l + 1].as_slice());
                        for tok in 0..t {
                            let r = tok * d..(tok + 1) * d;
                            let [ra, da] = fwd.activations[(l * width + j) * t + tok];
                            axpy(c * da * dot(v, &b[r.clone()]) / d as f64, &h[r.clone()], gu);
                            axpy(c * ra, &b[r], gv);
                        }
                        continue;
                    }
                    vjp_params_acc(
                        &kind,
                        d,
                        t,
                        pass.forward[i].states[l].as_slice(),
                        z,
                        pass.backward[i].states[l + 1].as_slice(),
                        c,
                        out,
                    );
                }
            }
        });
    if !all_finite(&grad) {
        return Err(Error::NonFinite);
    }
    Ok(grad)
}

/// Mean training loss at `net`.
pub fn mean_loss(net: &NetParams, data: &Dataset, alpha: f64) -> Result<f64> {
    let losses: Result<Vec<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let fwd = forward_pass(net, data.input(i), alpha)?;
            Ok(data.loss(i, fwd.output()))
        })
        .collect();
    let losses = losses?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}
