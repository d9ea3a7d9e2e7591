use serde::{Deserialize, Serialize};

use crate::blocks::{block_init, BlockKind, InitScales, ParamGroup};
use crate::error::{Error, Result};
use crate::rng::SeedPath;

/// Weights of an `L x M` residual network, stored as one flat row-major
/// array indexed `[layer][unit][param]`.
///
/// Layers are 0-based here: layer `l` is the paper-style layer `l + 1`,
/// which reads state `h^l` and writes `h^{l+1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    kind: BlockKind,
    dim: usize,
    tokens: usize,
    depth: usize,
    width: usize,
    params: Vec<f64>,
    /// Master seed the weights were initialized from. Carried through
    /// training so coupled comparisons can check provenance.
    origin: u64,
}

impl NetParams {
    /// Draws every unit from `SeedPath(seed).layer(l+1).unit(j+1)`. With
    /// `tie_first_unit`, unit 1 of every layer uses the path `layer(0).unit(1)`.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        kind: BlockKind,
        dim: usize,
        tokens: usize,
        depth: usize,
        width: usize,
        scales: InitScales,
        seed: u64,
        tie_first_unit: bool,
    ) -> Result<Self> {
        kind.validate()?;
        if dim == 0 || tokens == 0 || depth == 0 || width == 0 {
            return Err(Error::shape("network needs D, T, L, M >= 1"));
        }
        let p = kind.param_len(dim);
        let root = SeedPath::new(seed);
        let mut params = vec![0.0; depth * width * p];
        let tied = if tie_first_unit {
            Some(block_init(&kind, dim, &root.layer(0).unit(1), scales)?)
        } else {
            None
        };
        for (idx, chunk) in params.chunks_exact_mut(p).enumerate() {
            let (l, j) = (idx / width, idx % width);
            match (&tied, j) {
                (Some(z), 0) => chunk.copy_from_slice(z),
                _ => {
                    let z = block_init(&kind, dim, &root.layer(l + 1).unit(j + 1), scales)?;
                    chunk.copy_from_slice(&z);
                }
            }
        }
        Ok(Self {
            kind,
            dim,
            tokens,
            depth,
            width,
            params,
            origin: seed,
        })
    }

    pub fn from_parts(
        kind: BlockKind,
        dim: usize,
        tokens: usize,
        depth: usize,
        width: usize,
        params: Vec<f64>,
        origin: u64,
    ) -> Result<Self> {
        kind.validate()?;
        if dim == 0 || tokens == 0 || depth == 0 || width == 0 {
            return Err(Error::shape("network needs D, T, L, M >= 1"));
        }
        let expected = depth * width * kind.param_len(dim);
        if params.len() != expected {
            return Err(Error::shape(format!(
                "parameter array has {} entries, expected {}",
                params.len(),
                expected
            )));
        }
        if !params.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self {
            kind,
            dim,
            tokens,
            depth,
            width,
            params,
            origin,
        })
    }

    pub fn kind(&self) -> &BlockKind {
        &self.kind
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn tokens(&self) -> usize {
        self.tokens
    }
    pub fn depth(&self) -> usize {
        self.depth
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn origin(&self) -> u64 {
        self.origin
    }
    pub fn unit_len(&self) -> usize {
        self.kind.param_len(self.dim)
    }
    pub fn units(&self) -> usize {
        self.depth * self.width
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn unit(&self, layer: usize, j: usize) -> &[f64] {
        let p = self.unit_len();
        let start = (layer * self.width + j) * p;
        &self.params[start..start + p]
    }

    pub fn unit_mut(&mut self, layer: usize, j: usize) -> &mut [f64] {
        let p = self.unit_len();
        let start = (layer * self.width + j) * p;
        &mut self.params[start..start + p]
    }

    /// All units of one layer, contiguous.
    pub fn layer(&self, layer: usize) -> &[f64] {
        let n = self.width * self.unit_len();
        &self.params[layer * n..(layer + 1) * n]
    }

    /// Per-coordinate group map of a single unit.
    pub fn unit_groups(&self) -> Vec<ParamGroup> {
        let mut g = vec![ParamGroup::Input; self.unit_len()];
        for (range, group) in self.kind.groups(self.dim) {
            g[range].iter_mut().for_each(|x| *x = group);
        }
        g
    }

    pub fn same_shape(&self, other: &NetParams) -> bool {
        self.kind == other.kind
            && self.dim == other.dim
            && self.tokens == other.tokens
            && self.depth == other.depth
            && self.width == other.width
    }
}
