//! Log min-max scaling of runtimes into `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScaler {
    pub ln_ymin: f64,
    pub ln_ymax: f64,
}

impl LabelScaler {
    pub fn new(ymin: f64, ymax: f64) -> Result<Self> {
        positive(ymin)?;
        positive(ymax)?;
        let s = Self {
            ln_ymin: math::ln(ymin),
            ln_ymax: math::ln(ymax),
        };
        if !(s.ln_ymin < s.ln_ymax) {
            return Err(Error::Label(alloc::format!(
                "scaler needs ymin < ymax, got {ymin} and {ymax}"
            )));
        }
        Ok(s)
    }

    /// Fits on the minimum and maximum of `runtimes`.
    pub fn fit(runtimes: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut any = false;
        for y in runtimes {
            positive(y)?;
            lo = lo.min(y);
            hi = hi.max(y);
            any = true;
        }
        if !any {
            return Err(Error::Empty("no runtimes to fit the scaler on"));
        }
        Self::new(lo, hi)
    }

    pub fn scale_runtime(&self, y_ms: f64) -> Result<f64> {
        positive(y_ms)?;
        Ok(((math::ln(y_ms) - self.ln_ymin) / (self.ln_ymax - self.ln_ymin)).clamp(0.0, 1.0))
    }

    pub fn unscale_runtime(&self, s: f64) -> f64 {
        math::exp(self.ln_ymin + s * (self.ln_ymax - self.ln_ymin))
    }
}

fn positive(y: f64) -> Result<()> {
    if y > 0.0 && y.is_finite() {
        Ok(())
    } else {
        Err(Error::Label(alloc::format!(
            "runtime must be positive and finite, got {y}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let e2 = libm::exp(2.0);
        let s = LabelScaler::new(1.0, e2).unwrap();
        assert_eq!(s.scale_runtime(1.0).unwrap(), 0.0);
        assert_eq!(s.scale_runtime(e2).unwrap(), 1.0);
        assert!((s.scale_runtime(libm::exp(1.0)).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(s.unscale_runtime(0.0), 1.0);
        assert!((s.unscale_runtime(1.0) - e2).abs() < 1e-12);
        assert!((s.unscale_runtime(0.5) - libm::exp(1.0)).abs() < 1e-15);
    }

    #[test]
    fn clamps_and_rejects() {
        let s = LabelScaler::fit([2.0, 8.0, 4.0]).unwrap();
        assert_eq!(s.scale_runtime(1.0).unwrap(), 0.0);
        assert_eq!(s.scale_runtime(100.0).unwrap(), 1.0);
        assert!(s.scale_runtime(0.0).is_err());
        assert!(s.scale_runtime(-3.0).is_err());
        assert!(LabelScaler::fit([3.0, 3.0]).is_err());
        assert!(LabelScaler::fit(core::iter::empty()).is_err());
    }
}
