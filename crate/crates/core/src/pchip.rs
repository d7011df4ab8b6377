//! Piecewise cubic Hermite interpolation with Fritsch-Carlson slopes.
//!
//! Shape preserving: interpolated values never overshoot the bracketing
//! samples, and monotone data yields a monotone interpolant. Used for
//! tabulated open-circuit voltage curves and for resampling telemetry.

use crate::{Error, Result};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PchipCurve {
    x: Vec<f64>,
    y: Vec<f64>,
    slope: Vec<f64>,
}

impl PchipCurve {
    /// Build the interpolant; `x` must be strictly increasing and finite.
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(Error::InvalidInput(format!(
                "pchip needs >= 2 matching samples, got {} x and {} y",
                n,
                y.len()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("pchip samples must be finite".into()));
        }
        let mut h = vec![0.0; n - 1];
        let mut delta = vec![0.0; n - 1];
        for i in 0..n - 1 {
            h[i] = x[i + 1] - x[i];
            if h[i] <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "pchip abscissae must be strictly increasing (index {})",
                    i + 1
                )));
            }
            delta[i] = (y[i + 1] - y[i]) / h[i];
        }

        let mut slope = vec![0.0; n];
        if n == 2 {
            slope[0] = delta[0];
            slope[1] = delta[0];
            return Ok(Self { x, y, slope });
        }

        for i in 1..n - 1 {
            let (dl, dr) = (delta[i - 1], delta[i]);
            if dl == 0.0 || dr == 0.0 || dl.signum() != dr.signum() {
                slope[i] = 0.0;
            } else {
                // weighted harmonic mean keeps the interpolant monotone
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                slope[i] = (w1 + w2) / (w1 / dl + w2 / dr);
            }
        }
        slope[0] = edge_slope(h[0], h[1], delta[0], delta[1]);
        slope[n - 1] = edge_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        Ok(Self { x, y, slope })
    }

    pub fn knots_x(&self) -> &[f64] {
        &self.x
    }

    pub fn knots_y(&self) -> &[f64] {
        &self.y
    }

    fn interval(&self, xq: f64) -> usize {
        // rightmost interval whose left knot is <= xq, clamped to the ends
        match self.x.partition_point(|&k| k <= xq) {
            0 => 0,
            p => (p - 1).min(self.x.len() - 2),
        }
    }

    /// Interpolated value; extrapolates linearly with the edge slope.
    pub fn value(&self, xq: f64) -> f64 {
        let n = self.x.len();
        if xq <= self.x[0] {
            return self.y[0] + self.slope[0] * (xq - self.x[0]);
        }
        if xq >= self.x[n - 1] {
            return self.y[n - 1] + self.slope[n - 1] * (xq - self.x[n - 1]);
        }
        let k = self.interval(xq);
        let h = self.x[k + 1] - self.x[k];
        let t = (xq - self.x[k]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        self.y[k] * h00 + h * self.slope[k] * h10 + self.y[k + 1] * h01 + h * self.slope[k + 1] * h11
    }

    /// Derivative of the interpolant.
    pub fn derivative(&self, xq: f64) -> f64 {
        let n = self.x.len();
        if xq <= self.x[0] {
            return self.slope[0];
        }
        if xq >= self.x[n - 1] {
            return self.slope[n - 1];
        }
        let k = self.interval(xq);
        let h = self.x[k + 1] - self.x[k];
        let t = (xq - self.x[k]) / h;
        let t2 = t * t;
        let d00 = (6.0 * t2 - 6.0 * t) / h;
        let d10 = 3.0 * t2 - 4.0 * t + 1.0;
        let d01 = (-6.0 * t2 + 6.0 * t) / h;
        let d11 = 3.0 * t2 - 2.0 * t;
        self.y[k] * d00 + self.slope[k] * d10 + self.y[k + 1] * d01 + self.slope[k + 1] * d11
    }
}

fn edge_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    // one-sided three-point estimate, limited to keep the end interval monotone
    let mut s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if s.signum() != d0.signum() {
        s = 0.0;
    } else if d0.signum() != d1.signum() && s.abs() > 3.0 * d0.abs() {
        s = 3.0 * d0;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn reproduces_knots_and_linears() {
        let x: Vec<f64> = (0..10).map(|k| k as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let c = PchipCurve::new(x.clone(), y.clone()).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert_eq!(c.value(*xi), *yi);
        }
        for k in 0..90 {
            let xq = k as f64 * 0.1;
            assert_relative_eq!(c.value(xq), 2.0 * xq - 1.0, epsilon = 1e-12);
            assert_relative_eq!(c.derivative(xq), 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn no_overshoot_on_step_data() {
        let x = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let y = vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let c = PchipCurve::new(x, y).unwrap();
        for k in 0..=500 {
            let v = c.value(k as f64 * 0.01);
            assert!((-1e-12..=1.0 + 1e-12).contains(&v), "overshoot at {k}: {v}");
        }
    }

    #[test]
    fn monotone_data_gives_monotone_interpolant() {
        let x = vec![0.0, 0.1, 0.25, 0.6, 0.8, 1.0];
        let y = vec![3.2, 3.5, 3.55, 3.7, 3.9, 4.1];
        let c = PchipCurve::new(x, y).unwrap();
        let mut prev = c.value(0.0);
        for k in 1..=1000 {
            let v = c.value(k as f64 * 0.001);
            assert!(v >= prev - 1e-12);
            prev = v;
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let x = vec![0.0, 0.5, 1.2, 2.0, 3.1, 4.0];
        let y = vec![0.0, 0.4, 0.3, 1.1, 1.0, 2.0];
        let c = PchipCurve::new(x, y).unwrap();
        let h = 1e-6;
        for k in 1..40 {
            let xq = 0.05 + k as f64 * 0.09;
            let fd = (c.value(xq + h) - c.value(xq - h)) / (2.0 * h);
            assert_relative_eq!(c.derivative(xq), fd, epsilon = 1e-6, max_relative = 1e-6);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(PchipCurve::new(vec![0.0], vec![1.0]).is_err());
        assert!(PchipCurve::new(vec![0.0, 0.0], vec![1.0, 2.0]).is_err());
        assert!(PchipCurve::new(vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(PchipCurve::new(vec![0.0, f64::NAN], vec![1.0, 2.0]).is_err());
    }
}
