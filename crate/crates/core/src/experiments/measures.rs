use serde::{Deserialize, Serialize};

use crate::blocks::{BlockKind, ParamGroup};
use crate::error::{Error, Result};
use crate::limit::ReferenceModel;
use crate::resnet::{forward_pass, NetParams};
use crate::tensor::{rms_norm, State};

/// Distance of a finite net's forward pass to the reference's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardError {
    /// RMS distance of the outputs, one entry per input.
    pub per_input: Vec<f64>,
    /// Max over the finite net's layers of the RMS distance to the nearest
    /// reference layer, one entry per input.
    pub per_input_max_layer: Vec<f64>,
}

impl ForwardError {
    /// Entries pooled per input, then averaged over inputs.
    pub fn rms(&self) -> f64 {
        mean(&self.per_input)
    }

    /// All entries of all inputs pooled.
    pub fn pooled(&self) -> f64 {
        mean(&self.per_input.iter().map(|e| e * e).collect::<Vec<_>>()).sqrt()
    }

    pub fn max_layer(&self) -> f64 {
        mean(&self.per_input_max_layer)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Compares `net` (a finite net at iteration `k`) with the reference at `k`.
pub fn measure_forward_error(
    net: &NetParams,
    alpha: f64,
    reference: &ReferenceModel,
    k: usize,
    inputs: &[State],
) -> Result<ForwardError> {
    if net.dim() != reference.config().dim || net.tokens() != reference.config().tokens {
        return Err(Error::shape("net and reference differ in state shape"));
    }
    if alpha != reference.config().alpha {
        return Err(Error::Invalid("net and reference use different alpha".into()));
    }
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut per_input_max_layer = Vec::with_capacity(inputs.len());
    for x in inputs {
        let h = forward_pass(net, x, alpha)?;
        let r = reference.query_limit_fields(k, x, None)?.forward;
        per_input.push(rms_norm(&h.output().sub(r.output())?)?);
        let depth = net.depth();
        let mut worst: f64 = 0.0;
        for (l, hl) in h.states.iter().enumerate() {
            let rl = &r.states[reference.grid_index(l as f64 / depth as f64)];
            worst = worst.max(rms_norm(&hl.sub(rl)?)?);
        }
        per_input_max_layer.push(worst);
    }
    Ok(ForwardError {
        per_input,
        per_input_max_layer,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamError {
    /// `max_{j,l} ||Z^{j,l} - z^{j,l}||_2`.
    pub max: f64,
    /// Root mean of the squared unit distances.
    pub rms: f64,
}

/// Unit-wise distance between a finite net and its tracers at the same
/// iteration. Both must descend from the same initialization seed.
pub fn measure_param_error(net: &NetParams, tracers: &NetParams) -> Result<ParamError> {
    if net.origin() != tracers.origin() {
        return Err(Error::Uncoupled(format!(
            "net seed {} vs tracer seed {}",
            net.origin(),
            tracers.origin()
        )));
    }
    if !net.same_shape(tracers) {
        return Err(Error::Uncoupled("net and tracers differ in shape".into()));
    }
    let p = net.unit_len();
    let mut max: f64 = 0.0;
    let mut sq = 0.0;
    for (a, b) in net.params().chunks_exact(p).zip(tracers.params().chunks_exact(p)) {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        max = max.max(d2.sqrt());
        sq += d2;
    }
    Ok(ParamError {
        max,
        rms: (sq / net.units() as f64).sqrt(),
    })
}

/// Per-entry sample standard deviation across repetitions, averaged over
/// entries and inputs. `outputs[r][i]` is the output of repetition `r` on
/// input `i`.
pub fn measure_fluctuation(outputs: &[Vec<State>]) -> Result<f64> {
    let reps = outputs.len();
    if reps < 2 {
        return Err(Error::Invalid("fluctuation needs at least two repetitions".into()));
    }
    let n = outputs[0].len();
    if n == 0 || outputs.iter().any(|o| o.len() != n) {
        return Err(Error::shape("repetitions differ in input count"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        let len = outputs[0][i].len();
        for r in outputs {
            if !r[i].same_shape(&outputs[0][i]) {
                return Err(Error::shape("repetitions differ in output shape"));
            }
        }
        for e in 0..len {
            let vals: Vec<f64> = outputs.iter().map(|r| r[i].as_slice()[e]).collect();
            let m = mean(&vals);
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (reps - 1) as f64;
            total += var.sqrt();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `||U_k - U_0||` in RMS over every input-weight entry of a perceptron net.
pub fn measure_laziness(initial: &NetParams, later: &NetParams) -> Result<f64> {
    if !matches!(initial.kind(), BlockKind::Mlp(_)) {
        return Err(Error::config("block", "laziness is defined for perceptron blocks"));
    }
    if !initial.same_shape(later) {
        return Err(Error::shape("snapshots differ in shape"));
    }
    let d = initial.dim();
    let p = initial.unit_len();
    let mut sq = 0.0;
    for (a, b) in initial.params().chunks_exact(p).zip(later.params().chunks_exact(p)) {
        sq += a[..d].iter().zip(&b[..d]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    Ok((sq / (initial.units() * d) as f64).sqrt())
}

/// Max over layers of `sqrt(mean_j ||z^{j,l} - z~^{j,l}||_rms^2)`, the RMS
/// norm taken over the `D` entries of each weight vector.
pub fn measure_semicomplete_gap(a: &NetParams, b: &NetParams) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape("runs differ in shape"));
    }
    let (width, d) = (a.width(), a.dim() as f64);
    let mut worst: f64 = 0.0;
    for l in 0..a.depth() {
        let sq: f64 = a
            .layer(l)
            .iter()
            .zip(b.layer(l))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        worst = worst.max((sq / (width as f64 * d)).sqrt());
    }
    Ok(worst)
}

/// Slots of the output-side weights of one unit.
pub fn output_slots(kind: &BlockKind, dim: usize) -> Vec<usize> {
    kind.groups(dim)
        .into_iter()
        .filter(|(_, g)| *g == ParamGroup::Output)
        .flat_map(|(r, _)| r)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::limit::{build_reference_from, reference_config};
    use crate::resnet::{init_net, train, Dataset, TrainConfig};

    fn cfg(steps: usize, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::complete_mlp(3, 4, 2, steps, seed);
        c.samples = 3;
        c
    }

    #[test]
    fn self_comparison_is_zero() {
        let c = cfg(2, 1);
        let d = Dataset::synthetic(3, 1, 3, 0).unwrap();
        let r = build_reference_from(init_net(&c).unwrap(), &c, &d).unwrap();
        let run = train(&c, &d).unwrap();
        let e = measure_forward_error(run.snapshot(2).unwrap(), c.alpha, &r, 2, d.inputs()).unwrap();
        assert_eq!(e.rms(), 0.0);
        assert_eq!(e.max_layer(), 0.0);
    }

    #[test]
    fn identity_nets_agree_at_init() {
        let mut c = cfg(0, 1);
        c.sigma_v = 0.0;
        let d = Dataset::synthetic(3, 1, 3, 0).unwrap();
        let rc = reference_config(&c, 64, 2);
        let r = build_reference_from(init_net(&rc).unwrap(), &rc, &d).unwrap();
        let e = measure_forward_error(&init_net(&c).unwrap(), 1.0, &r, 0, d.inputs()).unwrap();
        assert_eq!(e.pooled(), 0.0);
    }

    #[test]
    fn coupling_needs_shared_seeds() {
        let a = init_net(&cfg(0, 1)).unwrap();
        let b = init_net(&cfg(0, 2)).unwrap();
        assert_eq!(measure_param_error(&a, &a.clone()).unwrap().max, 0.0);
        assert!(matches!(measure_param_error(&a, &b), Err(Error::Uncoupled(_))));
    }

    #[test]
    fn param_error_by_hand() {
        let kind = BlockKind::Mlp(crate::blocks::Activation::Tanh);
        let a = NetParams::from_parts(kind, 1, 1, 1, 2, vec![0.0, 0.0, 0.0, 0.0], 3).unwrap();
        let b = NetParams::from_parts(kind, 1, 1, 1, 2, vec![3.0, 4.0, 0.0, 0.0], 3).unwrap();
        let e = measure_param_error(&a, &b).unwrap();
        assert_eq!(e.max, 5.0);
        assert!((e.rms - (12.5f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn fluctuation_of_identical_repetitions_is_zero() {
        let x = State::vector(vec![1.0, -2.0]).unwrap();
        assert_eq!(measure_fluctuation(&[vec![x.clone()], vec![x.clone()]]).unwrap(), 0.0);
        assert!(measure_fluctuation(&[vec![x]]).is_err());
        let a = State::vector(vec![0.0, 1.0]).unwrap();
        let b = State::vector(vec![2.0, 1.0]).unwrap();
        let f = measure_fluctuation(&[vec![a], vec![b]]).unwrap();
        assert!((f - 2f64.sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn laziness_is_zero_without_input_updates() {
        let mut c = cfg(3, 1);
        c.lr_u = 0.0;
        let d = Dataset::synthetic(3, 1, 3, 0).unwrap();
        let run = train(&c, &d).unwrap();
        assert_eq!(measure_laziness(run.initial(), run.last()).unwrap(), 0.0);
        assert_eq!(measure_laziness(run.initial(), run.initial()).unwrap(), 0.0);
        assert!(run.last() != run.initial());
        let mut m = c.clone();
        m.block = crate::resnet::BlockName::MatrixPre;
        let net = init_net(&m).unwrap();
        assert!(measure_laziness(&net, &net).is_err());
    }

    #[test]
    fn gap_at_init_is_the_output_weight_scale() {
        let mut c = cfg(0, 4);
        c.dim = 16;
        c.depth = 2;
        c.width = 3;
        let a = init_net(&c).unwrap();
        let b = init_net(&TrainConfig { sigma_v: 0.0, ..c.clone() }).unwrap();
        let gap = measure_semicomplete_gap(&a, &b).unwrap();
        let slots = output_slots(a.kind(), 16);
        let mut worst: f64 = 0.0;
        for l in 0..2 {
            let mut sq = 0.0;
            for j in 0..3 {
                sq += slots.iter().map(|&s| a.unit(l, j)[s].powi(2)).sum::<f64>();
            }
            worst = worst.max((sq / (3.0 * 16.0)).sqrt());
        }
        assert!((gap - worst).abs() < 1e-14 * worst);
        assert_eq!(measure_semicomplete_gap(&b, &b).unwrap(), 0.0);
    }
}
