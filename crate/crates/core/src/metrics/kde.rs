use serde::{Deserialize, Serialize};

use crate::error::{Result, RfaError};

/// Gaussian kernel density estimate with Silverman's bandwidth `1.06 * sd * n^(-1/5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kde {
    samples: Vec<f64>,
    pub bandwidth: f64,
}

impl Kde {
    pub fn fit(samples: &[f64]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(RfaError::InvalidArgument(format!("kde needs >= 2 samples, got {n}")));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(RfaError::NonFinite("kde samples"));
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        if var <= 0.0 {
            return Err(RfaError::Degenerate("degenerate sample".into()));
        }
        Ok(Kde {
            samples: samples.to_vec(),
            bandwidth: 1.06 * var.sqrt() * (n as f64).powf(-0.2),
        })
    }

    pub fn density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let norm = 1.0 / (self.samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
        norm * self
            .samples
            .iter()
            .map(|s| {
                let u = (x - s) / h;
                (-0.5 * u * u).exp()
            })
            .sum::<f64>()
    }

    pub fn evaluate(&self, grid: &[f64]) -> Vec<f64> {
        grid.iter().map(|&x| self.density(x)).collect()
    }

    /// `points` evenly spaced values from `min - 4h` to `max + 4h`.
    pub fn grid(&self, points: usize) -> Vec<f64> {
        let lo = self.samples.iter().copied().fold(f64::INFINITY, f64::min) - 4.0 * self.bandwidth;
        let hi = self.samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 4.0 * self.bandwidth;
        let step = (hi - lo) / (points.max(2) - 1) as f64;
        (0..points.max(2)).map(|i| lo + step * i as f64).collect()
    }
}

/// Density of `samples` evaluated on `grid`.
pub fn kde(samples: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    Ok(Kde::fit(samples)?.evaluate(grid))
}

/// Trapezoidal integral of `ys` over `xs`.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}
