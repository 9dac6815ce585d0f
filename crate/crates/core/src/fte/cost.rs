use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Thresholds of the redescending cost, in units of the normalized residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustCostParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for RobustCostParams {
    fn default() -> Self {
        RobustCostParams {
            a: 3.0,
            b: 10.0,
            c: 20.0,
        }
    }
}

impl RobustCostParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.a && self.a < self.b && self.b < self.c && self.c.is_finite()) {
            return Err(Error::invalid(format!(
                "robust cost thresholds must satisfy 0 < a < b < c (got {}, {}, {})",
                self.a, self.b, self.c
            )));
        }
        Ok(())
    }

    /// Value of the linear branch at |e| = b.
    fn knee(&self) -> f64 {
        self.a * self.b - 0.5 * self.a * self.a
    }

    /// Constant value for |e| ≥ c.
    pub fn saturation(&self) -> f64 {
        self.knee() + 0.5 * self.a * (self.c - self.b)
    }
}

/// Redescending robust cost: quadratic below `a`, linear on `[a, b)`, a
/// quadratic roll-off on `[b, c)` whose slope falls from `a` to zero, and
/// constant from `c` on.
pub fn robust_cost(e: f64, p: &RobustCostParams) -> f64 {
    let x = e.abs();
    let RobustCostParams { a, b, c } = *p;
    if x < a {
        0.5 * e * e
    } else if x < b {
        a * x - 0.5 * a * a
    } else if x < c {
        let t = (c - x) / (c - b);
        p.knee() + 0.5 * a * (c - b) * (1.0 - t * t)
    } else {
        p.saturation()
    }
}

/// dC/de.
pub fn robust_cost_derivative(e: f64, p: &RobustCostParams) -> f64 {
    let x = e.abs();
    let RobustCostParams { a, b, c } = *p;
    let slope = if x < a {
        return e;
    } else if x < b {
        a
    } else if x < c {
        a * (c - x) / (c - b)
    } else {
        0.0
    };
    slope * e.signum()
}

/// IRLS weight `C'(e) / e`, taken as 1 at the origin.
pub fn robust_weight(e: f64, p: &RobustCostParams) -> f64 {
    if e.abs() < p.a {
        1.0
    } else {
        robust_cost_derivative(e, p) / e
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branch_values() {
        let p = RobustCostParams::default();
        assert_eq!(robust_cost(0.0, &p), 0.0);
        assert_eq!(robust_cost(2.0, &p), 2.0);
        assert_eq!(robust_cost(-2.0, &p), 2.0);
        // linear branch: 3·5 − 4.5
        assert_eq!(robust_cost(5.0, &p), 10.5);
        assert_eq!(robust_cost(25.0, &p), robust_cost(20.0, &p));
    }

    #[test]
    fn derivative_matches_differences() {
        let p = RobustCostParams::default();
        let h = 1e-6;
        let mut e: f64 = -30.0;
        while e < 30.0 {
            if [3.0, 10.0, 20.0].iter().all(|k: &f64| (e.abs() - k).abs() > 1e-3) {
                let fd = (robust_cost(e + h, &p) - robust_cost(e - h, &p)) / (2.0 * h);
                assert!((fd - robust_cost_derivative(e, &p)).abs() < 1e-6, "e = {e}");
            }
            e += 0.0173;
        }
    }

    #[test]
    fn weights_are_nonnegative_and_vanish_past_c() {
        let p = RobustCostParams::default();
        for e in [-25.0, -12.0, -4.0, 0.0, 1.0, 9.0, 15.0, 20.0, 40.0] {
            let w = robust_weight(e, &p);
            assert!(w >= 0.0);
            if e.abs() >= p.c {
                assert_eq!(w, 0.0);
            }
        }
    }

    #[test]
    fn rejects_unordered_thresholds() {
        let p = RobustCostParams {
            a: 3.0,
            b: 2.0,
            c: 20.0,
        };
        assert!(p.validate().is_err());
    }
}
