use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{gaussian_sample, SeedPath};
use crate::tensor::{sum_sq, State};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `||h - y||^2 / (2D)`, with gradient `(h - y) / D`.
    #[default]
    ScaledMse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: Vec<State>,
    targets: Vec<State>,
    loss: LossKind,
}

impl Dataset {
    pub fn new(inputs: Vec<State>, targets: Vec<State>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::shape("dataset needs at least one sample"));
        }
        if inputs.len() != targets.len() {
            return Err(Error::shape("inputs and targets differ in count"));
        }
        let (d, t) = (inputs[0].dim(), inputs[0].tokens());
        for s in inputs.iter().chain(&targets) {
            s.check_shape(d, t)?;
        }
        Ok(Self {
            inputs,
            targets,
            loss: LossKind::ScaledMse,
        })
    }

    /// `n` input/target pairs with iid `N(0, 1)` entries. Input `i` draws from
    /// `SeedPath(seed).input(i).slot(0)`, its target from `.slot(1)`.
    pub fn synthetic(dim: usize, tokens: usize, n: usize, seed: u64) -> Result<Self> {
        let root = SeedPath::new(seed);
        let mut inputs = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for i in 0..n {
            let p = root.input(i);
            inputs.push(State::new(dim, tokens, gaussian_sample(&p.slot(0), dim * tokens, 1.0)?)?);
            targets.push(State::new(dim, tokens, gaussian_sample(&p.slot(1), dim * tokens, 1.0)?)?);
        }
        Self::new(inputs, targets)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].dim()
    }

    pub fn tokens(&self) -> usize {
        self.inputs[0].tokens()
    }

    pub fn inputs(&self) -> &[State] {
        &self.inputs
    }

    pub fn targets(&self) -> &[State] {
        &self.targets
    }

    pub fn input(&self, i: usize) -> &State {
        &self.inputs[i]
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn loss(&self, i: usize, h: &State) -> f64 {
        let y = &self.targets[i];
        let diff: Vec<f64> = h.as_slice().iter().zip(y.as_slice()).map(|(a, b)| a - b).collect();
        sum_sq(&diff) / (2.0 * h.dim() as f64)
    }

    pub fn loss_grad(&self, i: usize, h: &State) -> State {
        let y = &self.targets[i];
        let d = h.dim() as f64;
        let g = h.as_slice().iter().zip(y.as_slice()).map(|(a, b)| (a - b) / d).collect();
        State::from_raw(h.dim(), h.tokens(), g)
    }

    /// Index of a training input equal to `x`, if any.
    pub fn position(&self, x: &State) -> Option<usize> {
        self.inputs.iter().position(|s| s == x)
    }
}
