//! Residual units `phi(x, z)` with analytic vector-Jacobian products.
//!
//! Every kind provides `phi`, the state VJP `D1 phi^T w`, the parameter VJP
//! `D2 phi^T w`, and an initializer. Perceptron and single-matrix kinds also
//! provide the tangent pair used by the lazy dynamics: the parameter JVP
//! `D2 phi . dz` and the state gradient of `w^T (D2 phi . dz)`.
//!
//! Parameter layouts (all matrices row-major):
//! - `Mlp`: `(u, v)`, `p = 2D`, `phi = v rho(u^T x / D)`
//! - `MatrixPre`: `W` (`D x D`), `phi = W rho(x)`
//! - `MatrixPost`: `W` (`D x D`), `phi = rho(W x)`
//! - `Attention`: `(W_K, W_Q, W_V, W_O)`, each `d_k x D`, `p = 4 d_k D`
//!
//! Perceptron and matrix kinds act on each token independently.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{gaussian_sample, SeedPath};
use crate::tensor::{axpy, dot, gemv_acc, gemv_t_acc, ger_acc, State};

/// Sharpness `beta` of the softplus stand-in for ReLU: `log(1 + e^{beta x}) / beta`.
pub const SOFTPLUS_SHARPNESS: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
    /// Smooth ReLU surrogate, see [`SOFTPLUS_SHARPNESS`].
    Softplus,
}

impl Activation {
    #[inline]
    pub fn eval(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Identity => a,
            Activation::Softplus => {
                let t = SOFTPLUS_SHARPNESS * a;
                (t.max(0.0) + (-t.abs()).exp().ln_1p()) / SOFTPLUS_SHARPNESS
            }
        }
    }

    #[inline]
    pub fn deriv(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = a.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
            Activation::Softplus => sigmoid(SOFTPLUS_SHARPNESS * a),
        }
    }

    #[inline]
    pub fn second_deriv(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = a.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Identity => 0.0,
            Activation::Softplus => {
                let s = sigmoid(SOFTPLUS_SHARPNESS * a);
                SOFTPLUS_SHARPNESS * s * (1.0 - s)
            }
        }
    }

    pub fn is_odd(self) -> bool {
        matches!(self, Activation::Tanh | Activation::Identity)
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Mlp(Activation),
    MatrixPre(Activation),
    MatrixPost(Activation),
    Attention { key_dim: usize },
}

/// Which learning rate / init scale a parameter slot follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Input-side weights (`u`, `W_K`, `W_Q`, `W_V`, `W` in `rho(W x)`).
    Input,
    /// Output-side weights (`v`, `W_O`, `W` in `W rho(x)`).
    Output,
}

/// Entrywise standard deviations of the two parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitScales {
    pub input: f64,
    pub output: f64,
}

impl BlockKind {
    pub fn param_len(&self, dim: usize) -> usize {
        match self {
            BlockKind::Mlp(_) => 2 * dim,
            BlockKind::MatrixPre(_) | BlockKind::MatrixPost(_) => dim * dim,
            BlockKind::Attention { key_dim } => 4 * key_dim * dim,
        }
    }

    /// Stable numeric tag used by the snapshot format.
    pub fn tag(&self) -> u64 {
        match self {
            BlockKind::Mlp(_) => 0,
            BlockKind::MatrixPre(_) => 1,
            BlockKind::MatrixPost(_) => 2,
            BlockKind::Attention { .. } => 3,
        }
    }

    pub fn groups(&self, dim: usize) -> Vec<(Range<usize>, ParamGroup)> {
        match self {
            BlockKind::Mlp(_) => vec![
                (0..dim, ParamGroup::Input),
                (dim..2 * dim, ParamGroup::Output),
            ],
            BlockKind::MatrixPre(_) => vec![(0..dim * dim, ParamGroup::Output)],
            BlockKind::MatrixPost(_) => vec![(0..dim * dim, ParamGroup::Input)],
            BlockKind::Attention { key_dim } => {
                let m = key_dim * dim;
                vec![
                    (0..m, ParamGroup::Input),
                    (m..2 * m, ParamGroup::Input),
                    (2 * m..3 * m, ParamGroup::Input),
                    (3 * m..4 * m, ParamGroup::Output),
                ]
            }
        }
    }

    /// Whether a centered init gives `E phi(x, Z0) = 0` and `E D1 phi(x, Z0) = 0`.
    pub fn is_centered(&self) -> bool {
        match self {
            BlockKind::Mlp(_) | BlockKind::MatrixPre(_) | BlockKind::Attention { .. } => true,
            BlockKind::MatrixPost(act) => act.is_odd(),
        }
    }

    pub fn supports_tangent(&self) -> bool {
        !matches!(self, BlockKind::Attention { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if let BlockKind::Attention { key_dim } = self {
            if *key_dim == 0 {
                return Err(Error::config("key_dim", "must be at least 1"));
            }
        }
        Ok(())
    }
}

fn check(kind: &BlockKind, x: &State, z: &[f64]) -> Result<()> {
    let p = kind.param_len(x.dim());
    if z.len() != p {
        return Err(Error::shape(format!(
            "unit parameters have length {}, block expects {}",
            z.len(),
            p
        )));
    }
    Ok(())
}

fn check_w(x: &State, w: &State) -> Result<()> {
    if !x.same_shape(w) {
        return Err(Error::shape(format!(
            "cotangent {}x{} does not match state {}x{}",
            w.dim(),
            w.tokens(),
            x.dim(),
            x.tokens()
        )));
    }
    Ok(())
}

fn finite_state(dim: usize, tokens: usize, data: Vec<f64>) -> Result<State> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(State::from_raw(dim, tokens, data))
    } else {
        Err(Error::NonFinite)
    }
}

/// `phi(x, z)`.
pub fn block_apply(kind: &BlockKind, x: &State, z: &[f64]) -> Result<State> {
    check(kind, x, z)?;
    let mut out = vec![0.0; x.len()];
    apply_acc(kind, x.dim(), x.tokens(), x.as_slice(), z, 1.0, &mut out);
    finite_state(x.dim(), x.tokens(), out)
}

/// `D1 phi(x, z)^T w`.
pub fn block_vjp_state(kind: &BlockKind, x: &State, z: &[f64], w: &State) -> Result<State> {
    check(kind, x, z)?;
    check_w(x, w)?;
    let mut out = vec![0.0; x.len()];
    vjp_state_acc(kind, x.dim(), x.tokens(), x.as_slice(), z, w.as_slice(), 1.0, &mut out);
    finite_state(x.dim(), x.tokens(), out)
}

/// `D2 phi(x, z)^T w`, laid out like `z`.
pub fn block_vjp_params(kind: &BlockKind, x: &State, z: &[f64], w: &State) -> Result<Vec<f64>> {
    check(kind, x, z)?;
    check_w(x, w)?;
    let mut out = vec![0.0; z.len()];
    vjp_params_acc(kind, x.dim(), x.tokens(), x.as_slice(), z, w.as_slice(), 1.0, &mut out);
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::NonFinite)
    }
}

/// `D2 phi(x, z) . dz`.
pub fn block_jvp_params(kind: &BlockKind, x: &State, z: &[f64], dz: &[f64]) -> Result<State> {
    check(kind, x, z)?;
    if dz.len() != z.len() {
        return Err(Error::shape("tangent direction length differs from parameters"));
    }
    tangent_supported(kind)?;
    let mut out = vec![0.0; x.len()];
    jvp_params_acc(kind, x.dim(), x.tokens(), x.as_slice(), z, dz, 1.0, &mut out);
    finite_state(x.dim(), x.tokens(), out)
}

/// Gradient in `x` of `w^T (D2 phi(x, z) . dz)`.
pub fn block_tangent_vjp_state(
    kind: &BlockKind,
    x: &State,
    z: &[f64],
    dz: &[f64],
    w: &State,
) -> Result<State> {
    check(kind, x, z)?;
    check_w(x, w)?;
    if dz.len() != z.len() {
        return Err(Error::shape("tangent direction length differs from parameters"));
    }
    tangent_supported(kind)?;
    let mut out = vec![0.0; x.len()];
    tangent_vjp_state_acc(
        kind,
        x.dim(),
        x.tokens(),
        x.as_slice(),
        z,
        dz,
        w.as_slice(),
        1.0,
        &mut out,
    );
    finite_state(x.dim(), x.tokens(), out)
}

fn tangent_supported(kind: &BlockKind) -> Result<()> {
    if kind.supports_tangent() {
        Ok(())
    } else {
        Err(Error::config(
            "block",
            "tangent dynamics are provided for perceptron and single-matrix blocks only",
        ))
    }
}

/// Centered Gaussian init; group `g` of the layout draws from `seed.slot(g)`.
pub fn block_init(
    kind: &BlockKind,
    dim: usize,
    seed: &SeedPath,
    scales: InitScales,
) -> Result<Vec<f64>> {
    for s in [scales.input, scales.output] {
        if !(s >= 0.0) || !s.is_finite() {
            return Err(Error::NegativeScale(s));
        }
    }
    let mut z = vec![0.0; kind.param_len(dim)];
    for (g, (range, group)) in kind.groups(dim).into_iter().enumerate() {
        let std = match group {
            ParamGroup::Input => scales.input,
            ParamGroup::Output => scales.output,
        };
        let draws = gaussian_sample(&seed.slot(g), range.len(), std)?;
        z[range].copy_from_slice(&draws);
    }
    Ok(z)
}

// ---------------------------------------------------------------------------
// Accumulating kernels. Shapes are trusted; callers validate once.

pub(crate) fn apply_acc(
    kind: &BlockKind,
    d: usize,
    t: usize,
    x: &[f64],
    z: &[f64],
    c: f64,
    out: &mut [f64],
) {
    match *kind {
        BlockKind::Mlp(act) => {
            let (u, v) = z.split_at(d);
            for tok in 0..t {
                let xt = &x[tok * d..(tok + 1) * d];
                let a = dot(u, xt) / d as f64;
                axpy(c * act.eval(a), v, &mut out[tok * d..(tok + 1) * d]);
            }
        }
        BlockKind::MatrixPre(act) => {
            let mut r = vec![0.0; d];
            for tok in 0..t {
                let xt = &x[tok * d..(tok + 1) * d];
                for (ri, &xi) in r.iter_mut().zip(xt) {
                    *ri = c * act.eval(xi);
                }
                gemv_acc(z, d, d, &r, &mut out[tok * d..(tok + 1) * d]);
            }
        }
        BlockKind::MatrixPost(act) => {
            let mut y = vec![0.0; d];
            for tok in 0..t {
                let xt = &x[tok * d..(tok + 1) * d];
                y.iter_mut().for_each(|v| *v = 0.0);
                gemv_acc(z, d, d, xt, &mut y);
                for (o, &yi) in out[tok * d..(tok + 1) * d].iter_mut().zip(&y) {
                    *o += c * act.eval(yi);
                }
            }
        }
        BlockKind::Attention { key_dim } => {
            let cache = AttentionCache::new(d, t, key_dim, x, z);
            let wo = cache.w_o(z);
            for tok in 0..t {
                let mut o = cache.o_row(tok).to_vec();
                o.iter_mut().for_each(|v| *v *= c);
                gemv_t_acc(wo, key_dim, d, &o, &mut out[tok * d..(tok + 1) * d]);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn vjp_state_acc(
    kind: &BlockKind,
    d: usize,
    t: usize,
    x: &[f64],
    z: &[f64],
    w: &[f64],
    c: f64,
    out: &mut [f64],
) {
    match *kind {
        BlockKind::Mlp(act) => {
            let (u, v) = z.split_at(d);
            let df = d as f64;
            for tok in 0..t {
                let r = tok * d..(tok + 1) * d;
                let a = dot(u, &x[r.clone()]) / df;
                let coef = c * act.deriv(a) * dot(v, &w[r.clone()]) / df;
                axpy(coef, u, &mut out[r]);
            }
        }
        BlockKind::MatrixPre(act) => {
            let mut g = vec![0.0; d];
            for tok in 0..t {
                let r = tok * d..(tok + 1) * d;
                g.iter_mut().for_each(|v| *v = 0.0);
                gemv_t_acc(z, d, d, &w[r.clone()], &mut g);
                for ((o, gi), xi) in out[r.clone()].iter_mut().zip(&g).zip(&x[r]) {
                    *o += c * act.deriv(*xi) * gi;
                }
            }
        }
        BlockKind::MatrixPost(act) => {
            let mut y = vec![0.0; d];
            for tok in 0..t {
                let r = tok * d..(tok + 1) * d;
                y.iter_mut().for_each(|v| *v = 0.0);
                gemv_acc(z, d, d, &x[r.clone()], &mut y);
                for (yi, wi) in y.iter_mut().zip(&w[r.clone()]) {
                    *yi = c * act.deriv(*yi) * wi;
                }
                gemv_t_acc(z, d, d, &y, &mut out[r]);
            }
        }
        BlockKind::Attention { key_dim } => {
            let cache = AttentionCache::new(d, t, key_dim, x, z);
            cache.backward(z, x, w, c, Some(out), None);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn vjp_params_acc(
    kind: &BlockKind,
    d: usize,
    t: usize,
    x: &[f64],
    z: &[f64],
    w: &[f64],
    c: f64,
    out: &mut [f64],
) {
    match *kind {
        BlockKind::Mlp(act) => {
            let (u, v) = z.split_at(d);
            let df = d as f64;
            let (gu, gv) = out.split_at_mut(d);
            for tok in 0..t {
                let r = tok * d..(tok + 1) * d;
                let xt = &x[r.clone()];
                let wt = &w[r];
                let a = dot(u, xt) / df;
                axpy(c * act.deriv(a) * dot(v, wt) / df, xt, gu);
                axpy(c * act.eval(a), wt, gv);
            }
        }
        BlockKind::MatrixPre(act) => {
            let mut r = vec![0.0; d];
            for tok in 0..t {
                let rg = tok * d..(tok + 1) * d;
                for (ri, xi) in r.iter_mut().zip(&x[rg.clone()]) {
                    *ri = act.eval(*xi);
                }
                ger_acc(c, &w[rg], &r, out);
            }
        }
        BlockKind::MatrixPost(act) => {
            let mut y = vec![0.0; d];
            for tok in 0..t {
                let rg = tok * d..(tok + 1) * d;
                let xt = &x[rg.clone()];
                y.iter_mut().for_each(|v| *v = 0.0);
                gemv_acc(z, d, d, xt, &mut y);
                for (yi, wi) in y.iter_mut().zip(&w[rg]) {
                    *yi = act.deriv(*yi) * wi;
                }
                ger_acc(c, &y, xt, out);
            }
        }
        BlockKind::Attention { key_dim } => {
            let cache = AttentionCache::new(d, t, key_dim, x, z);
            cache.backward(z, x, w, c, None, Some(out));
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn jvp_params_acc(
    kind: &BlockKind,
    d: usize,
    t: usize,
    x: &[f64],
    z: &[f64],
    dz: &[f64],
    c: f64,
    out: &mut [f64],
) {
    let df = d as f64;
    match *kind {
        BlockKind::Mlp(act) => {
            let (u, v) = z.split_at(d);
            let (du, dv) = dz.split_at(d);
            for tok in 0..t {
                let r = tok * d..(tok + 1) * d;
                let xt = &x[r.clone()];
                let a = dot(u, xt) / df;
                let o = &mut out[r];
                axpy(c * act.eval(a), dv, o);
                axpy(c * act.deriv(a) * dot(du, xt) / df, v, o);
            }
        }
        BlockKind::MatrixPre(act) => {
            let mut r = vec![0.0; d];
            for tok in 0..t {
                let rg = tok * d..(tok + 1) * d;
                for (ri, xi) in r.iter_mut().zip(&x[rg.clone()]) {
                    *ri = c * act.eval(*xi);
                }
                gemv_acc(dz, d, d, &r, &mut out[rg]);
            }
        }
        BlockKind::MatrixPost(act) => {
            let mut y = vec![0.0; d];
            let mut dy = vec![0.0; d];
            for tok in 0..t {
                let rg = tok * d..(tok + 1) * d;
                let xt = &x[rg.clone()];
                y.iter_mut().for_each(|v| *v = 0.0);
                dy.iter_mut().for_each(|v| *v = 0.0);
                gemv_acc(z, d, d, xt, &mut y);
                gemv_acc(dz, d, d, xt, &mut dy);
                for ((o, yi), dyi) in out[rg].iter_mut().zip(&y).zip(&dy) {
                    *o += c * act.deriv(*yi) * dyi;
                }
            }
        }
        BlockKind::Attention { .. } => unreachable!("tangent ops not provided for attention"),
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn tangent_vjp_state_acc(
    kind: &BlockKind,
    d: usize,
    t: usize,
    x: &[f64],
    z: &[f64],
    dz: &[f64],
    w: &[f64],
    c: f64,
    out: &mut [f64],
) {
    let df = d as f64;
    match *kind {
        BlockKind::Mlp(act) => {
            let (u, v) = z.split_at(d);
            let (du, dv) = dz.split_at(d);
            for tok in 0..t {
                let r = tok * d..(tok + 1) * d;
                let xt = &x[r.clone()];
                let wt = &w[r.clone()];
                let a = dot(u, xt) / df;
                let wv = dot(wt, v);
                let coef_u = (act.deriv(a) * dot(wt, dv)
                    + act.second_deriv(a) * dot(du, xt) / df * wv)
                    / df;
                let o = &mut out[r];
                axpy(c * coef_u, u, o);
                axpy(c * act.deriv(a) * wv / df, du, o);
            }
        }
        BlockKind::MatrixPre(act) => {
            let mut g = vec![0.0; d];
            for tok in 0..t {
                let rg = tok * d..(tok + 1) * d;
                g.iter_mut().for_each(|v| *v = 0.0);
                gemv_t_acc(dz, d, d, &w[rg.clone()], &mut g);
                for ((o, gi), xi) in out[rg.clone()].iter_mut().zip(&g).zip(&x[rg]) {
                    *o += c * act.deriv(*xi) * gi;
                }
            }
        }
        BlockKind::MatrixPost(act) => {
            let mut y = vec![0.0; d];
            let mut dy = vec![0.0; d];
            let mut g1 = vec![0.0; d];
            let mut g2 = vec![0.0; d];
            for tok in 0..t {
                let rg = tok * d..(tok + 1) * d;
                let xt = &x[rg.clone()];
                let wt = &w[rg.clone()];
                y.iter_mut().for_each(|v| *v = 0.0);
                dy.iter_mut().for_each(|v| *v = 0.0);
                gemv_acc(z, d, d, xt, &mut y);
                gemv_acc(dz, d, d, xt, &mut dy);
                for i in 0..d {
                    g1[i] = c * wt[i] * act.second_deriv(y[i]) * dy[i];
                    g2[i] = c * wt[i] * act.deriv(y[i]);
                }
                gemv_t_acc(z, d, d, &g1, &mut out[rg.clone()]);
                gemv_t_acc(dz, d, d, &g2, &mut out[rg]);
            }
        }
        BlockKind::Attention { .. } => unreachable!("tangent ops not provided for attention"),
    }
}

/// Forward intermediates of one attention head.
struct AttentionCache {
    d: usize,
    t: usize,
    dk: usize,
    keys: Vec<f64>,
    queries: Vec<f64>,
    values: Vec<f64>,
    /// Row-stochastic `T x T` attention weights.
    weights: Vec<f64>,
    /// Mixed values `o_t = sum_i A[t][i] v_i`, `T x d_k`.
    mixed: Vec<f64>,
}

impl AttentionCache {
    fn new(d: usize, t: usize, dk: usize, x: &[f64], z: &[f64]) -> Self {
        let m = dk * d;
        let (wk, wq, wv) = (&z[0..m], &z[m..2 * m], &z[2 * m..3 * m]);
        let mut keys = vec![0.0; t * dk];
        let mut queries = vec![0.0; t * dk];
        let mut values = vec![0.0; t * dk];
        for tok in 0..t {
            let xt = &x[tok * d..(tok + 1) * d];
            gemv_acc(wk, dk, d, xt, &mut keys[tok * dk..(tok + 1) * dk]);
            gemv_acc(wq, dk, d, xt, &mut queries[tok * dk..(tok + 1) * dk]);
            gemv_acc(wv, dk, d, xt, &mut values[tok * dk..(tok + 1) * dk]);
        }
        let scale = 1.0 / (dk as f64).sqrt();
        let mut weights = vec![0.0; t * t];
        for a in 0..t {
            let q = &queries[a * dk..(a + 1) * dk];
            let row = &mut weights[a * t..(a + 1) * t];
            for (i, ri) in row.iter_mut().enumerate() {
                *ri = scale * dot(q, &keys[i * dk..(i + 1) * dk]);
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for ri in row.iter_mut() {
                *ri = (*ri - mx).exp();
                sum += *ri;
            }
            row.iter_mut().for_each(|ri| *ri /= sum);
        }
        let mut mixed = vec![0.0; t * dk];
        for a in 0..t {
            for i in 0..t {
                let wgt = weights[a * t + i];
                axpy(wgt, &values[i * dk..(i + 1) * dk], &mut mixed[a * dk..(a + 1) * dk]);
            }
        }
        Self {
            d,
            t,
            dk,
            keys,
            queries,
            values,
            weights,
            mixed,
        }
    }

    fn w_o<'a>(&self, z: &'a [f64]) -> &'a [f64] {
        let m = self.dk * self.d;
        &z[3 * m..4 * m]
    }

    fn o_row(&self, tok: usize) -> &[f64] {
        &self.mixed[tok * self.dk..(tok + 1) * self.dk]
    }

    /// Reverse pass for cotangent `w`, scaled by `c`, accumulated into the
    /// requested outputs.
    fn backward(
        &self,
        z: &[f64],
        x: &[f64],
        w: &[f64],
        c: f64,
        state_out: Option<&mut [f64]>,
        param_out: Option<&mut [f64]>,
    ) {
        let (d, t, dk) = (self.d, self.t, self.dk);
        let m = dk * d;
        let wo = self.w_o(z);
        let scale = 1.0 / (dk as f64).sqrt();

        // g_o[t] = c W_O w_t
        let mut g_o = vec![0.0; t * dk];
        for a in 0..t {
            let mut wt = w[a * d..(a + 1) * d].to_vec();
            wt.iter_mut().for_each(|v| *v *= c);
            gemv_acc(wo, dk, d, &wt, &mut g_o[a * dk..(a + 1) * dk]);
        }
        let mut g_v = vec![0.0; t * dk];
        let mut g_s = vec![0.0; t * t];
        for a in 0..t {
            let go = &g_o[a * dk..(a + 1) * dk];
            let row = &self.weights[a * t..(a + 1) * t];
            let mut g_a = vec![0.0; t];
            for i in 0..t {
                g_a[i] = dot(go, &self.values[i * dk..(i + 1) * dk]);
                axpy(row[i], go, &mut g_v[i * dk..(i + 1) * dk]);
            }
            let mean: f64 = row.iter().zip(&g_a).map(|(p, g)| p * g).sum();
            for i in 0..t {
                g_s[a * t + i] = row[i] * (g_a[i] - mean);
            }
        }
        let mut g_q = vec![0.0; t * dk];
        let mut g_k = vec![0.0; t * dk];
        for a in 0..t {
            for i in 0..t {
                let gs = scale * g_s[a * t + i];
                axpy(gs, &self.keys[i * dk..(i + 1) * dk], &mut g_q[a * dk..(a + 1) * dk]);
                axpy(gs, &self.queries[a * dk..(a + 1) * dk], &mut g_k[i * dk..(i + 1) * dk]);
            }
        }

        if let Some(out) = param_out {
            let (gwk, rest) = out.split_at_mut(m);
            let (gwq, rest) = rest.split_at_mut(m);
            let (gwv, gwo) = rest.split_at_mut(m);
            for a in 0..t {
                let xt = &x[a * d..(a + 1) * d];
                ger_acc(1.0, &g_k[a * dk..(a + 1) * dk], xt, gwk);
                ger_acc(1.0, &g_q[a * dk..(a + 1) * dk], xt, gwq);
                ger_acc(1.0, &g_v[a * dk..(a + 1) * dk], xt, gwv);
                ger_acc(c, self.o_row(a), &w[a * d..(a + 1) * d], gwo);
            }
        }
        if let Some(out) = state_out {
            let (wk, wq, wv) = (&z[0..m], &z[m..2 * m], &z[2 * m..3 * m]);
            for a in 0..t {
                let o = &mut out[a * d..(a + 1) * d];
                gemv_t_acc(wk, dk, d, &g_k[a * dk..(a + 1) * dk], o);
                gemv_t_acc(wq, dk, d, &g_q[a * dk..(a + 1) * dk], o);
                gemv_t_acc(wv, dk, d, &g_v[a * dk..(a + 1) * dk], o);
            }
        }
    }
}
