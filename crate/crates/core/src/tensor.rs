//! Dense `D x T` states and the handful of vector kernels the recursions need.
//!
//! A [`State`] stores `T` tokens of dimension `D` contiguously, token-major:
//! token `t` occupies `data[t*D..(t+1)*D]`. Vector-valued blocks use `T = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    dim: usize,
    tokens: usize,
    data: Vec<f64>,
}

impl State {
    pub fn new(dim: usize, tokens: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || tokens == 0 {
            return Err(Error::shape(format!(
                "state needs D >= 1 and T >= 1, got D={dim}, T={tokens}"
            )));
        }
        if data.len() != dim * tokens {
            return Err(Error::shape(format!(
                "state data has {} entries, expected {}x{}",
                data.len(),
                dim,
                tokens
            )));
        }
        if !all_finite(&data) {
            return Err(Error::NonFinite);
        }
        Ok(Self { dim, tokens, data })
    }

    /// A single-token state.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let dim = data.len();
        Self::new(dim, 1, data)
    }

    pub fn zeros(dim: usize, tokens: usize) -> Self {
        assert!(dim >= 1 && tokens >= 1, "empty state");
        Self {
            dim,
            tokens,
            data: vec![0.0; dim * tokens],
        }
    }

    /// Builds a state without re-checking finiteness. Shape must already match.
    pub(crate) fn from_raw(dim: usize, tokens: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dim * tokens);
        Self { dim, tokens, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn token(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.data)
    }

    pub fn same_shape(&self, other: &State) -> bool {
        self.dim == other.dim && self.tokens == other.tokens
    }

    pub fn check_shape(&self, dim: usize, tokens: usize) -> Result<()> {
        if self.dim != dim || self.tokens != tokens {
            return Err(Error::shape(format!(
                "expected state {}x{}, got {}x{}",
                dim, tokens, self.dim, self.tokens
            )));
        }
        Ok(())
    }

    /// `self - other`, entrywise.
    pub fn sub(&self, other: &State) -> Result<State> {
        if !self.same_shape(other) {
            return Err(Error::shape("state difference of unequal shapes"));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(State::from_raw(self.dim, self.tokens, data))
    }

    pub fn scaled(&self, c: f64) -> State {
        State::from_raw(self.dim, self.tokens, self.data.iter().map(|v| c * v).collect())
    }

    pub fn dot(&self, other: &State) -> f64 {
        dot(&self.data, &other.data)
    }
}

/// RMS norm `D^{-1/2} ||x||_2`; for `T > 1` the per-token norms are averaged.
pub fn rms_norm(x: &State) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFinite);
    }
    let d = x.dim() as f64;
    let total: f64 = (0..x.tokens())
        .map(|t| (sum_sq(x.token(t)) / d).sqrt())
        .sum();
    Ok(total / x.tokens() as f64)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sum_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// `y += c * x`
#[inline]
pub fn axpy(c: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += c * xi;
    }
}

/// `y += A x` for row-major `A` of shape `rows x cols`.
#[inline]
pub fn gemv_acc(a: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(a.len(), rows * cols);
    for (r, yr) in y.iter_mut().enumerate().take(rows) {
        *yr += dot(&a[r * cols..(r + 1) * cols], x);
    }
}

/// `y += A^T x` for row-major `A` of shape `rows x cols`.
#[inline]
pub fn gemv_t_acc(a: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(a.len(), rows * cols);
    for (r, &xr) in x.iter().enumerate().take(rows) {
        axpy(xr, &a[r * cols..(r + 1) * cols], y);
    }
}

/// `A += c * u v^T` for row-major `A` of shape `u.len() x v.len()`.
#[inline]
pub fn ger_acc(c: f64, u: &[f64], v: &[f64], a: &mut [f64]) {
    let cols = v.len();
    for (r, &ur) in u.iter().enumerate() {
        axpy(c * ur, v, &mut a[r * cols..(r + 1) * cols]);
    }
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}
