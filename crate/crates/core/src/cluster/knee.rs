//! Cluster-count selection: knee point of the derivative of a metric-vs-k curve.
//!
//! The curve is interpolated with a natural cubic spline and sampled at every integer `k`,
//! differentiated with fourth-order central differences, min-max normalized, and the knee is the
//! sample furthest above the straight line joining the first and last normalized values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Curves with fewer points fall back to the largest single-step drop.
pub const MIN_KNEE_POINTS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KneeResult {
    pub k: usize,
    /// No usable curvature: the curve is (near) linear, constant or too short.
    pub weak: bool,
}

/// Natural cubic spline through `(x_i, y_i)`, `x` strictly increasing.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if n != y.len() || n < 2 {
            return Err(Error::invalid("spline needs at least two (x, y) pairs"));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("spline knots must be strictly increasing"));
        }
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior second derivatives.
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 0..k {
                let (h0, h1) = (x[i + 1] - x[i], x[i + 2] - x[i + 1]);
                diag[i] = 2.0 * (h0 + h1);
                upper[i] = h1;
                rhs[i] = 6.0 * ((y[i + 2] - y[i + 1]) / h1 - (y[i + 1] - y[i]) / h0);
            }
            for i in 1..k {
                let lower = x[i + 1] - x[i];
                let w = lower / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
            }
        }
        Ok(Self { x, y, m })
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        let seg = match self.x.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(i) => return self.y[i],
            Err(0) => 0,
            Err(i) if i >= n => n - 2,
            Err(i) => i - 1,
        };
        let (x0, x1) = (self.x[seg], self.x[seg + 1]);
        let h = x1 - x0;
        let (a, b) = ((x1 - t) / h, (t - x0) / h);
        a * self.y[seg]
            + b * self.y[seg + 1]
            + ((a * a * a - a) * self.m[seg] + (b * b * b - b) * self.m[seg + 1]) * h * h / 6.0
    }
}

/// First derivative of equally spaced samples: fourth-order central differences inside,
/// second-order central differences one step from each end, one-sided first differences at
/// the ends.
pub fn derivative(f: &[f64], h: f64) -> Vec<f64> {
    let n = f.len();
    (0..n)
        .map(|i| {
            if n < 2 {
                0.0
            } else if i >= 2 && i + 2 < n {
                (-f[i + 2] + 8.0 * f[i + 1] - 8.0 * f[i - 1] + f[i - 2]) / (12.0 * h)
            } else if i >= 1 && i + 1 < n {
                (f[i + 1] - f[i - 1]) / (2.0 * h)
            } else if i == 0 {
                (f[1] - f[0]) / h
            } else {
                (f[n - 1] - f[n - 2]) / h
            }
        })
        .collect()
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Knee of a metric curve given as `(k, value)` pairs with strictly increasing `k`.
pub fn knee_point(curve: &[(usize, f64)]) -> Result<KneeResult> {
    if curve.is_empty() {
        return Err(Error::invalid("knee detection needs a nonempty curve"));
    }
    if curve.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::invalid("curve k values must be strictly increasing"));
    }
    if curve.iter().any(|(_, v)| !v.is_finite()) {
        return Err(Error::invalid("curve contains non-finite values"));
    }
    let (first, last) = (curve[0].0, curve[curve.len() - 1].0);
    let mid = KneeResult {
        k: first + (last - first) / 2,
        weak: true,
    };
    if curve.len() < MIN_KNEE_POINTS {
        return Ok(largest_drop(curve));
    }

    let spline = CubicSpline::new(
        curve.iter().map(|(k, _)| *k as f64).collect(),
        curve.iter().map(|(_, v)| *v).collect(),
    )?;
    let ks: Vec<usize> = (first..=last).collect();
    let ys: Vec<f64> = ks.iter().map(|&k| spline.eval(k as f64)).collect();
    let d = derivative(&ys, 1.0);

    let (lo, hi) = min_max(&d);
    let scale = lo.abs().max(hi.abs());
    if !(hi - lo > 1e-9 * scale) {
        return Ok(mid);
    }
    let norm: Vec<f64> = d.iter().map(|v| (v - lo) / (hi - lo)).collect();
    let m = norm.len();
    let (n0, n1) = (norm[0], norm[m - 1]);
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in norm.iter().enumerate() {
        let chord = n0 + (n1 - n0) * i as f64 / (m - 1) as f64;
        let diff = v - chord;
        if diff > best.1 {
            best = (i, diff);
        }
    }
    if best.1 <= 1e-9 {
        return Ok(mid);
    }
    Ok(KneeResult {
        k: ks[best.0],
        weak: false,
    })
}

/// The `k` reached by the largest decrease between consecutive points (later step on ties).
fn largest_drop(curve: &[(usize, f64)]) -> KneeResult {
    if curve.len() == 1 {
        return KneeResult {
            k: curve[0].0,
            weak: true,
        };
    }
    let mut best = (curve[1].0, f64::NEG_INFINITY);
    for w in curve.windows(2) {
        let drop = w[0].1 - w[1].1;
        if drop >= best.1 {
            best = (w[1].0, drop);
        }
    }
    KneeResult {
        k: best.0,
        weak: true,
    }
}
