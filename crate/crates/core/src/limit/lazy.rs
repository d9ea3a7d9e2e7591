use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::blocks::{jvp_params_acc, tangent_vjp_state_acc, vjp_params_acc};
use crate::error::{Error, Result};
use crate::resnet::{init_net, BackwardTrace, Dataset, ForwardTrace, NetParams, TrainConfig};
use crate::tensor::{all_finite, State};

/// Linearized network: frozen initial weights `Z0` plus a displacement
/// `zeta` of the same layout, with `zeta_0 = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct LazyParams {
    frozen: NetParams,
    zeta: Vec<f64>,
}

impl LazyParams {
    /// Zero displacement around `frozen`. The block family must be centered
    /// and provide tangent operators.
    pub fn new(frozen: NetParams) -> Result<Self> {
        let kind = frozen.kind();
        if !kind.is_centered() {
            return Err(Error::config(
                "block",
                "the lazy dynamics need a block with E phi(x, Z0) = 0",
            ));
        }
        if !kind.supports_tangent() {
            return Err(Error::config("block", "no tangent operators for this block"));
        }
        let zeta = vec![0.0; frozen.params().len()];
        Ok(Self { frozen, zeta })
    }

    pub fn with_zeta(frozen: NetParams, zeta: Vec<f64>) -> Result<Self> {
        let mut p = Self::new(frozen)?;
        if zeta.len() != p.zeta.len() {
            return Err(Error::shape("zeta does not match the frozen net"));
        }
        p.zeta = zeta;
        Ok(p)
    }

    pub fn frozen(&self) -> &NetParams {
        &self.frozen
    }

    pub fn zeta(&self) -> &[f64] {
        &self.zeta
    }

    pub fn zeta_mut(&mut self) -> &mut [f64] {
        &mut self.zeta
    }

    fn unit_zeta(&self, l: usize, j: usize) -> &[f64] {
        let p = self.frozen.unit_len();
        let start = (l * self.frozen.width() + j) * p;
        &self.zeta[start..start + p]
    }

    fn scale(&self) -> f64 {
        1.0 / self.frozen.units() as f64
    }
}

/// `h^{l+1} = h^l + 1/(LM) sum_j D2 phi(h^l, Z0^{j,l}) zeta^{j,l}`.
pub fn lazy_forward(p: &LazyParams, x: &State) -> Result<ForwardTrace> {
    let net = &p.frozen;
    x.check_shape(net.dim(), net.tokens())?;
    let (d, t, kind) = (net.dim(), net.tokens(), *net.kind());
    let c = p.scale();
    let mut states = Vec::with_capacity(net.depth() + 1);
    states.push(x.clone());
    for l in 0..net.depth() {
        let prev = states[l].as_slice();
        let mut next = prev.to_vec();
        for j in 0..net.width() {
            jvp_params_acc(&kind, d, t, prev, net.unit(l, j), p.unit_zeta(l, j), c, &mut next);
        }
        if !all_finite(&next) {
            return Err(Error::Explosion { layer: l + 1 });
        }
        states.push(State::new(d, t, next)?);
    }
    Ok(ForwardTrace::from_states(states, None))
}

/// Exact adjoint of [`lazy_forward`]: `b^L = w` and
/// `b^l = b^{l+1} + 1/(LM) sum_j grad_x [b^{l+1} . D2 phi(x, Z0) zeta]` at `h^l`.
pub fn lazy_backward(p: &LazyParams, trace: &ForwardTrace, w: &State) -> Result<BackwardTrace> {
    let net = &p.frozen;
    if trace.depth() != net.depth() {
        return Err(Error::shape("trace depth differs from the net"));
    }
    w.check_shape(net.dim(), net.tokens())?;
    let (d, t, kind) = (net.dim(), net.tokens(), *net.kind());
    let c = p.scale();
    let depth = net.depth();
    let mut states = vec![State::zeros(d, t); depth + 1];
    states[depth] = w.clone();
    for l in (0..depth).rev() {
        let b = states[l + 1].as_slice();
        let h = trace.states[l].as_slice();
        let mut prev = b.to_vec();
        for j in 0..net.width() {
            tangent_vjp_state_acc(&kind, d, t, h, net.unit(l, j), p.unit_zeta(l, j), b, c, &mut prev);
        }
        if !all_finite(&prev) {
            return Err(Error::Explosion { layer: l + 1 });
        }
        states[l] = State::new(d, t, prev)?;
    }
    Ok(BackwardTrace { states })
}

/// Mean training loss of the lazy model and its gradient in `zeta`.
pub fn lazy_gradient(p: &LazyParams, data: &Dataset) -> Result<(f64, Vec<f64>)> {
    let net = &p.frozen;
    let (d, t, kind) = (net.dim(), net.tokens(), *net.kind());
    let per_sample: Result<Vec<(ForwardTrace, BackwardTrace, f64)>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let fwd = lazy_forward(p, data.input(i))?;
            let loss = data.loss(i, fwd.output());
            let bwd = lazy_backward(p, &fwd, &data.loss_grad(i, fwd.output()))?;
            Ok((fwd, bwd, loss))
        })
        .collect();
    let per_sample = per_sample?;
    let n = per_sample.len();
    let c = p.scale() / n as f64;
    let (width, unit) = (net.width(), net.unit_len());
    let mut grad = vec![0.0; p.zeta.len()];
    grad.par_chunks_mut(width * unit)
        .enumerate()
        .for_each(|(l, chunk)| {
            for j in 0..width {
                let out = &mut chunk[j * unit..(j + 1) * unit];
                for (fwd, bwd, _) in &per_sample {
                    vjp_params_acc(
                        &kind,
                        d,
                        t,
                        fwd.states[l].as_slice(),
                        net.unit(l, j),
                        bwd.states[l + 1].as_slice(),
                        c,
                        out,
                    );
                }
            }
        });
    let loss = per_sample.iter().map(|s| s.2).sum::<f64>() / n as f64;
    if !all_finite(&grad) || !loss.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug)]
pub struct LazyRun {
    pub frozen: NetParams,
    /// Lazy training loss at iterates `0..=K`.
    pub losses: Vec<f64>,
    /// `zeta` at the config's snapshot schedule.
    pub zetas: BTreeMap<usize, Vec<f64>>,
}

impl LazyRun {
    pub fn params(&self, k: usize) -> Result<LazyParams> {
        let zeta = self.zetas.get(&k).ok_or(Error::Unrecorded(k))?;
        LazyParams::with_zeta(self.frozen.clone(), zeta.clone())
    }
}

/// GD on `zeta` from the config's initialization.
pub fn train_lazy(config: &TrainConfig, data: &Dataset) -> Result<LazyRun> {
    config.validate()?;
    train_lazy_from(init_net(config)?, config, data)
}

/// GD on `zeta` around `frozen`: `zeta -= lr_g / n sum_i D2 phi(h_i, Z0)^T b_i`.
pub fn train_lazy_from(frozen: NetParams, config: &TrainConfig, data: &Dataset) -> Result<LazyRun> {
    let mut p = LazyParams::new(frozen)?;
    let lm = p.frozen.units() as f64;
    let steps: Vec<f64> = p
        .frozen
        .unit_groups()
        .into_iter()
        .map(|g| lm * config.lr(g))
        .collect();
    let unit = steps.len();
    let schedule = config.snapshot_schedule();
    let mut losses = Vec::with_capacity(config.steps + 1);
    let mut zetas = BTreeMap::new();
    for k in 0..=config.steps {
        let (loss, grad) = lazy_gradient(&p, data).map_err(|e| {
            if e.is_divergence() {
                Error::Divergence { iteration: k }
            } else {
                e
            }
        })?;
        losses.push(loss);
        if schedule.binary_search(&k).is_ok() {
            zetas.insert(k, p.zeta.clone());
        }
        if k < config.steps {
            for (z, g) in p.zeta.chunks_exact_mut(unit).zip(grad.chunks_exact(unit)) {
                for ((zi, gi), s) in z.iter_mut().zip(g).zip(&steps) {
                    *zi -= s * gi;
                }
            }
        }
    }
    Ok(LazyRun {
        frozen: p.frozen,
        losses,
        zetas,
    })
}
