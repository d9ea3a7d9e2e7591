use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rate laws fitted to sweep results.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateModel {
    /// `a / L + b / sqrt(L M)`.
    DepthWidth,
    /// `(a alpha sqrt(D) + b sqrt(D) + c) / sqrt(L M)`.
    Fluctuation,
    /// `a min(1, 1 / alpha)`.
    Laziness,
}

impl RateModel {
    pub fn coefficients(self) -> usize {
        match self {
            RateModel::DepthWidth => 2,
            RateModel::Fluctuation => 3,
            RateModel::Laziness => 1,
        }
    }

    pub fn features(self, p: &RatePoint) -> Vec<f64> {
        let lm = (p.depth * p.width) as f64;
        match self {
            RateModel::DepthWidth => vec![1.0 / p.depth as f64, 1.0 / lm.sqrt()],
            RateModel::Fluctuation => {
                let sd = (p.dim as f64).sqrt();
                vec![p.alpha * sd / lm.sqrt(), sd / lm.sqrt(), 1.0 / lm.sqrt()]
            }
            RateModel::Laziness => vec![1.0f64.min(1.0 / p.alpha)],
        }
    }

    pub fn eval(self, coefficients: &[f64], p: &RatePoint) -> f64 {
        self.features(p).iter().zip(coefficients).map(|(f, c)| f * c).sum()
    }
}

/// One observation: the architecture it came from and the measured value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub depth: usize,
    pub width: usize,
    pub dim: usize,
    pub alpha: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub model: RateModel,
    pub coefficients: Vec<f64>,
    pub residual: f64,
    pub r_squared: f64,
}

/// Nonnegative least squares of `model` on `points`, in the natural domain.
pub fn fit_rate(points: &[RatePoint], model: RateModel) -> Result<RateFit> {
    let k = model.coefficients();
    if points.len() < k + 1 {
        return Err(Error::Invalid(format!(
            "{} points cannot fit {k} coefficients",
            points.len()
        )));
    }
    if points.iter().any(|p| !p.value.is_finite()) {
        return Err(Error::NonFinite);
    }
    let rows: Vec<Vec<f64>> = points.iter().map(|p| model.features(p)).collect();
    let a = DMatrix::from_fn(points.len(), k, |i, j| rows[i][j]);
    let y = DVector::from_iterator(points.len(), points.iter().map(|p| p.value));
    let coefficients = nnls(&a, &y)?;
    let fitted = &a * DVector::from_column_slice(&coefficients);
    let residual = (&y - fitted).norm();
    let mean = y.mean();
    let total = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    let r_squared = if total > 0.0 {
        1.0 - residual * residual / total
    } else if residual == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };
    Ok(RateFit {
        model,
        coefficients,
        residual,
        r_squared,
    })
}

/// Exact NNLS by enumerating active sets; the models have at most three
/// coefficients.
fn nnls(a: &DMatrix<f64>, y: &DVector<f64>) -> Result<Vec<f64>> {
    let k = a.ncols();
    let svd = a.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= smax * 1e-12 {
        return Err(Error::Degenerate);
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << k) {
        let cols: Vec<usize> = (0..k).filter(|j| mask & (1 << j) != 0).collect();
        let sub = a.select_columns(&cols);
        let sol = sub
            .svd(true, true)
            .solve(y, 1e-14)
            .map_err(|_| Error::Degenerate)?;
        if sol.iter().any(|&c| c < 0.0) {
            continue;
        }
        let mut full = vec![0.0; k];
        for (c, &j) in sol.iter().zip(&cols) {
            full[j] = *c;
        }
        let r = (y - a * DVector::from_column_slice(&full)).norm();
        if best.as_ref().is_none_or(|(br, _)| r < *br) {
            best = Some((r, full));
        }
    }
    Ok(best.map(|(_, c)| c).unwrap_or_else(|| vec![0.0; k]))
}

/// Ordinary least-squares slope of `ys` against `xs`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Slope of `ln y` against `ln x`.
pub fn power_law_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    log_log_slope(&lx, &ly)
}
