//! Promotion-time distributions and their exposure-shifted forms.

use serde::{Deserialize, Serialize};

use crate::error::{CureError, Result};

/// A lifetime distribution for the promotion time of a single pathogen,
/// measured from the moment of its exposure.
pub trait PromotionTime {
    fn survival(&self, z: f64) -> f64;

    fn pdf(&self, z: f64) -> Result<f64>;

    fn cdf(&self, z: f64) -> f64 {
        1.0 - self.survival(z)
    }

    /// `S(z)` and the hazard `f(z)/S(z)` for `z > 0`.
    fn survival_and_hazard(&self, z: f64) -> (f64, f64);

    /// Survival on the calendar scale for an exposure at `t_k`: `S(y − t_k)`
    /// when `y > t_k`, else 1.
    fn shifted_survival(&self, y: f64, t_k: f64) -> f64 {
        if y - t_k > 0.0 {
            self.survival(y - t_k)
        } else {
            1.0
        }
    }

    fn shifted_cdf(&self, y: f64, t_k: f64) -> f64 {
        if y - t_k > 0.0 {
            self.cdf(y - t_k)
        } else {
            0.0
        }
    }

    fn shifted_pdf(&self, y: f64, t_k: f64) -> f64 {
        let z = y - t_k;
        if z > 0.0 {
            let (s, h) = self.survival_and_hazard(z);
            s * h
        } else {
            0.0
        }
    }
}

/// Weibull promotion times with shape `gamma1` and scale `gamma2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullParams {
    pub gamma1: f64,
    pub gamma2: f64,
}

impl WeibullParams {
    pub fn new(gamma1: f64, gamma2: f64) -> Result<Self> {
        let p = WeibullParams { gamma1, gamma2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma1 > 0.0 && self.gamma2 > 0.0 && self.gamma1.is_finite() && self.gamma2.is_finite() {
            Ok(())
        } else {
            Err(CureError::Invalid(format!(
                "Weibull parameters must be positive, got shape {} scale {}",
                self.gamma1, self.gamma2
            )))
        }
    }

    pub fn mean(&self) -> f64 {
        self.gamma2 * statrs::function::gamma::gamma(1.0 + 1.0 / self.gamma1)
    }

    /// Shape and scale matching a given mean and variance.
    pub fn from_moments(mean: f64, variance: f64) -> Result<Self> {
        use statrs::function::gamma::gamma;
        if !(mean > 0.0 && variance > 0.0) {
            return Err(CureError::Invalid(format!(
                "moment matching needs positive mean and variance, got {mean} and {variance}"
            )));
        }
        let target = variance / (mean * mean);
        // CV² = Γ(1+2/k)/Γ(1+1/k)² − 1 is decreasing in k.
        let cv2 = |k: f64| gamma(1.0 + 2.0 / k) / gamma(1.0 + 1.0 / k).powi(2) - 1.0;
        let (mut lo, mut hi) = (0.05_f64, 100.0_f64);
        if target >= cv2(lo) {
            hi = lo;
        } else if target <= cv2(hi) {
            lo = hi;
        }
        for _ in 0..200 {
            if hi - lo < 1e-12 * hi {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if cv2(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let shape = 0.5 * (lo + hi);
        WeibullParams::new(shape, mean / gamma(1.0 + 1.0 / shape))
    }
}

impl PromotionTime for WeibullParams {
    fn survival(&self, z: f64) -> f64 {
        if z <= 0.0 {
            return 1.0;
        }
        (-(z / self.gamma2).powf(self.gamma1)).exp()
    }

    fn pdf(&self, z: f64) -> Result<f64> {
        if z < 0.0 {
            return Ok(0.0);
        }
        if z == 0.0 {
            return match self.gamma1 {
                k if k < 1.0 => Err(CureError::Singularity(format!(
                    "Weibull density is unbounded at 0 for shape {k} < 1"
                ))),
                k if k == 1.0 => Ok(1.0 / self.gamma2),
                _ => Ok(0.0),
            };
        }
        let (s, h) = self.survival_and_hazard(z);
        Ok(s * h)
    }

    fn survival_and_hazard(&self, z: f64) -> (f64, f64) {
        let u = (z / self.gamma2).powf(self.gamma1);
        ((-u).exp(), self.gamma1 * u / z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        acc * h / 3.0
    }

    #[test]
    fn exponential_special_case() {
        let p = WeibullParams::new(1.0, 1.0).unwrap();
        assert_relative_eq!(p.pdf(0.5).unwrap(), (-0.5f64).exp(), max_relative = 1e-14);
        assert_relative_eq!(p.pdf(0.0).unwrap(), 1.0);
    }

    #[test]
    fn density_at_origin() {
        assert_eq!(WeibullParams::new(2.5, 2.5).unwrap().pdf(0.0).unwrap(), 0.0);
        let err = WeibullParams::new(0.7, 1.0).unwrap().pdf(0.0).unwrap_err();
        assert!(matches!(err, CureError::Singularity(_)));
    }

    #[test]
    fn pdf_integrates_to_cdf() {
        let p = WeibullParams::new(2.5, 2.5).unwrap();
        let area = simpson(|z| p.pdf(z).unwrap(), 0.0, 2.0, 20_000);
        assert_relative_eq!(area, p.cdf(2.0), max_relative = 1e-10);
        let q = WeibullParams::new(1.5, 3.5).unwrap();
        // z = u² removes the √z behaviour of the density at the origin.
        let area = simpson(|u| 2.0 * u * q.pdf(u * u).unwrap(), 0.0, 3.1f64.sqrt(), 20_000);
        assert_relative_eq!(area, q.cdf(3.1), max_relative = 1e-9);
        assert_relative_eq!(q.survival(3.1), 1.0 - area, max_relative = 1e-9);
    }

    #[test]
    fn survival_basics() {
        let p = WeibullParams::new(1.7, 3.0).unwrap();
        assert_eq!(p.survival(0.0), 1.0);
        assert_eq!(p.cdf(0.0), 0.0);
        assert_relative_eq!(p.survival(3.0), (-1.0f64).exp(), max_relative = 1e-15);
    }

    #[test]
    fn shifted_branches() {
        let p = WeibullParams::new(2.5, 2.5).unwrap();
        assert_eq!(p.shifted_survival(2.0, 5.0), 1.0);
        assert_eq!(p.shifted_cdf(2.0, 5.0), 0.0);
        assert_eq!(p.shifted_pdf(2.0, 5.0), 0.0);
        assert_eq!(p.shifted_survival(5.0, 5.0), 1.0);
        assert_eq!(p.shifted_pdf(5.0, 5.0), 0.0);
        assert_relative_eq!(p.shifted_survival(7.0, 5.0), p.survival(2.0), max_relative = 1e-15);
        assert_relative_eq!(p.shifted_pdf(7.0, 5.0), p.pdf(2.0).unwrap(), max_relative = 1e-15);
    }

    #[test]
    fn moment_matching_recovers_parameters() {
        use statrs::function::gamma::gamma;
        for &(k, lam) in &[(2.5, 2.5), (1.5, 3.5), (0.8, 10.0), (6.0, 30.0)] {
            let m = lam * gamma(1.0 + 1.0 / k);
            let v = lam * lam * gamma(1.0 + 2.0 / k) - m * m;
            let fit = WeibullParams::from_moments(m, v).unwrap();
            assert_relative_eq!(fit.gamma1, k, max_relative = 1e-8);
            assert_relative_eq!(fit.gamma2, lam, max_relative = 1e-8);
        }
    }

    proptest::proptest! {
        #[test]
        fn shifted_survival_and_cdf_sum_to_one(y in 0.0f64..40.0, t in 0.0f64..20.0, k in 0.3f64..5.0, lam in 0.2f64..10.0) {
            let p = WeibullParams::new(k, lam).unwrap();
            proptest::prop_assert!((p.shifted_survival(y, t) + p.shifted_cdf(y, t) - 1.0).abs() < 1e-15);
        }

        #[test]
        fn shifted_survival_nonincreasing(y in 0.0f64..40.0, dy in 0.0f64..5.0, t in 0.0f64..20.0, k in 0.3f64..5.0) {
            let p = WeibullParams::new(k, 2.0).unwrap();
            proptest::prop_assert!(p.shifted_survival(y + dy, t) <= p.shifted_survival(y, t));
        }

        #[test]
        fn density_is_minus_survival_derivative(z in 0.1f64..12.0, t in 0.0f64..5.0, k in 0.5f64..4.0, lam in 0.5f64..6.0) {
            let p = WeibullParams::new(k, lam).unwrap();
            let y = t + z;
            let h = 1e-5;
            let fd = -(p.shifted_survival(y + h, t) - p.shifted_survival(y - h, t)) / (2.0 * h);
            let f = p.shifted_pdf(y, t);
            if f > 1e-4 {
                proptest::prop_assert!((fd - f).abs() <= 1e-5 * f.abs() + 1e-12, "{} vs {}", fd, f);
            }
        }
    }
}
