//! Monotone piecewise cubic Hermite interpolation (Fritsch–Carlson).

use crate::error::{Error, Result};

/// Knot slopes for a monotone cubic Hermite interpolant.
///
/// Interior slopes use the weighted harmonic mean of neighboring secants and
/// are zero at local extrema; end slopes use the one-sided three-point
/// formula, clipped so the interpolant stays shape preserving.
fn slopes(t: &[f64], y: &[f64]) -> Vec<f64> {
    let n = t.len();
    let h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    if n == 2 {
        return vec![delta[0], delta[0]];
    }
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        let (a, b) = (delta[k - 1], delta[k]);
        if a * b > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / a + w2 / b);
        }
    }
    d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if s.signum() != d0.signum() || d0 == 0.0 {
        0.0
    } else if d0.signum() != d1.signum() && s.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        s
    }
}

/// Precomputed interpolant for one channel.
#[derive(Debug, Clone)]
pub struct Pchip {
    t: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    pub fn new(t: &[f64], y: &[f64]) -> Result<Self> {
        if t.len() != y.len() {
            return Err(Error::Input(format!("{} times but {} values", t.len(), y.len())));
        }
        if t.len() < 2 {
            return Err(Error::Input("interpolation needs at least two samples".into()));
        }
        if t.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite sample".into()));
        }
        if let Some(w) = t.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Input(format!(
                "sample times must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self {
            t: t.to_vec(),
            y: y.to_vec(),
            d: slopes(t, y),
        })
    }

    pub fn eval(&self, q: f64) -> Result<f64> {
        let (first, last) = (self.t[0], self.t[self.t.len() - 1]);
        if !(q >= first && q <= last) {
            return Err(Error::Input(format!(
                "query {q} outside sampled range [{first}, {last}] (no extrapolation)"
            )));
        }
        // segment k with t[k] <= q < t[k+1]; the final knot uses the last segment
        let k = match self.t.binary_search_by(|v| v.partial_cmp(&q).expect("finite")) {
            Ok(i) => i.min(self.t.len() - 2),
            Err(i) => i - 1,
        };
        let h = self.t[k + 1] - self.t[k];
        let s = (q - self.t[k]) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let v = h00 * self.y[k] + h10 * h * self.d[k] + h01 * self.y[k + 1] + h11 * h * self.d[k + 1];
        // every segment is monotone in exact arithmetic; the clamp removes round-off overshoot
        let (lo, hi) = (self.y[k].min(self.y[k + 1]), self.y[k].max(self.y[k + 1]));
        Ok(v.clamp(lo, hi))
    }
}

/// Resamples `(times, values)` at `queries`.
pub fn pchip_resample(times: &[f64], values: &[f64], queries: &[f64]) -> Result<Vec<f64>> {
    let p = Pchip::new(times, values)?;
    queries.iter().map(|&q| p.eval(q)).collect()
}

/// Removes `2π` jumps so consecutive angles differ by at most `π`.
pub fn unwrap_angles(angles: &[f64]) -> Vec<f64> {
    use std::f64::consts::PI;
    let mut out = Vec::with_capacity(angles.len());
    let mut offset = 0.0;
    for (i, &a) in angles.iter().enumerate() {
        if i > 0 {
            let diff = a - angles[i - 1];
            if diff > PI {
                offset -= 2.0 * PI;
            } else if diff < -PI {
                offset += 2.0 * PI;
            }
        }
        out.push(a + offset);
    }
    out
}
