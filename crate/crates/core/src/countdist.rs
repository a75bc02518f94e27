//! COM-Poisson count distribution.
//!
//! `P[M = m] = θ^m / ((m!)^ν Z(θ, ν))` with `Z(θ, ν) = Σ_j θ^j / (j!)^ν`.
//! Three members have closed forms: ν = 1 (Poisson), ν = 0 with θ < 1
//! (geometric) and the ν → ∞ limit (Bernoulli). Everything else is summed
//! term by term with a scaled accumulator, so very large sums are carried in
//! log form and never overflow.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::function::factorial::ln_factorial;

use crate::error::{CureError, Result};

/// Dispersion regime of the COM-Poisson family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dispersion {
    /// Finite ν ≥ 0. ν = 0 is the geometric member and needs θ < 1.
    Finite(f64),
    /// The exact ν → ∞ limit: a Bernoulli count with `P[M = 1] = θ/(1+θ)`.
    BernoulliLimit,
}

/// Members of the family with closed-form normalizing constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecialCase {
    Poisson,
    Geometric,
    Bernoulli,
}

impl Dispersion {
    pub const POISSON: Dispersion = Dispersion::Finite(1.0);
    pub const GEOMETRIC: Dispersion = Dispersion::Finite(0.0);
    pub const BERNOULLI: Dispersion = Dispersion::BernoulliLimit;

    pub fn finite(nu: f64) -> Result<Self> {
        if nu.is_finite() && nu >= 0.0 {
            Ok(Dispersion::Finite(nu))
        } else {
            Err(CureError::Invalid(format!("dispersion ν must be finite and ≥ 0, got {nu}")))
        }
    }

    pub fn nu(&self) -> Option<f64> {
        match *self {
            Dispersion::Finite(nu) => Some(nu),
            Dispersion::BernoulliLimit => None,
        }
    }

    pub fn special_case(&self) -> Option<SpecialCase> {
        match *self {
            Dispersion::Finite(nu) if nu == 1.0 => Some(SpecialCase::Poisson),
            Dispersion::Finite(nu) if nu == 0.0 => Some(SpecialCase::Geometric),
            Dispersion::Finite(_) => None,
            Dispersion::BernoulliLimit => Some(SpecialCase::Bernoulli),
        }
    }

    /// ν as an ordering key, with the Bernoulli limit at +∞.
    pub fn sort_key(&self) -> f64 {
        self.nu().unwrap_or(f64::INFINITY)
    }

    /// Human-readable family name used in reports.
    pub fn family_name(&self) -> String {
        match self.special_case() {
            Some(SpecialCase::Poisson) => "poisson".into(),
            Some(SpecialCase::Geometric) => "geometric".into(),
            Some(SpecialCase::Bernoulli) => "bernoulli".into(),
            None => format!("com-poisson(nu={self})"),
        }
    }
}

impl fmt::Display for Dispersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dispersion::Finite(nu) => write!(f, "{nu}"),
            Dispersion::BernoulliLimit => f.write_str("inf"),
        }
    }
}

impl FromStr for Dispersion {
    type Err = CureError;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "inf" | "infinity" | "+inf" | "bernoulli" | "∞" => Ok(Dispersion::BernoulliLimit),
            "poisson" => Ok(Dispersion::POISSON),
            "geometric" => Ok(Dispersion::GEOMETRIC),
            _ => {
                let nu: f64 = t
                    .parse()
                    .map_err(|_| CureError::Invalid(format!("cannot parse dispersion `{s}`")))?;
                Dispersion::finite(nu)
            }
        }
    }
}

impl Serialize for Dispersion {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Dispersion {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(v) if v == f64::INFINITY => Ok(Dispersion::BernoulliLimit),
            Raw::Num(v) => Dispersion::finite(v).map_err(serde::de::Error::custom),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Truncation rule for the infinite sums.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeriesPolicy {
    pub rel_tol: f64,
    pub max_terms: usize,
    /// Use the Poisson/geometric/Bernoulli closed forms where they apply.
    /// Turning this off forces the term-by-term path everywhere.
    pub closed_forms: bool,
}

impl Default for SeriesPolicy {
    fn default() -> Self {
        SeriesPolicy { rel_tol: 1e-12, max_terms: 10_000, closed_forms: true }
    }
}

impl SeriesPolicy {
    pub fn series_only() -> Self {
        SeriesPolicy { closed_forms: false, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) {
            return Err(CureError::Invalid(format!("rel_tol must lie in (0, 1), got {}", self.rel_tol)));
        }
        if self.max_terms < 2 {
            return Err(CureError::Invalid("max_terms must be at least 2".into()));
        }
        Ok(())
    }
}

/// `log Z(x, ν)` and `log Σ_{j≥1} j x^j/(j!)^ν`, evaluated together.
///
/// `log_w` is `-∞` when `x = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesSums {
    pub log_z: f64,
    pub log_w: f64,
}

impl SeriesSums {
    /// `W(x)/Z(x)`, the mean count of a COM-Poisson(x, ν) variable.
    pub fn mean(&self) -> f64 {
        (self.log_w - self.log_z).exp()
    }
}

const RESCALE: f64 = 1e280;
const LN_RESCALE: f64 = 644.7238260383328; // ln(1e280)

fn check_argument(x: f64, what: &str) -> Result<()> {
    if x.is_finite() && x >= 0.0 {
        Ok(())
    } else {
        Err(CureError::Invalid(format!("{what} must be finite and ≥ 0, got {x}")))
    }
}

fn geometric_domain(x: f64) -> Result<()> {
    if x < 1.0 {
        Ok(())
    } else {
        Err(CureError::Domain(format!(
            "COM-Poisson undefined for ν = 0 and θ = {x} ≥ 1 (Z does not converge)"
        )))
    }
}

/// Evaluates `Z` and (optionally) the weighted sum `W` at argument `x`.
pub(crate) fn series_sums(x: f64, disp: Dispersion, policy: &SeriesPolicy, need_w: bool) -> Result<SeriesSums> {
    check_argument(x, "θ")?;
    if let Dispersion::Finite(nu) = disp {
        if nu == 0.0 {
            geometric_domain(x)?;
        }
    }
    if x == 0.0 {
        return Ok(SeriesSums { log_z: 0.0, log_w: f64::NEG_INFINITY });
    }
    match disp {
        // (j!)^∞ is infinite for j ≥ 2, so the series keeps only j = 0, 1.
        Dispersion::BernoulliLimit => Ok(SeriesSums { log_z: x.ln_1p(), log_w: x.ln() }),
        Dispersion::Finite(nu) if policy.closed_forms && nu == 1.0 => {
            Ok(SeriesSums { log_z: x, log_w: x.ln() + x })
        }
        Dispersion::Finite(nu) if policy.closed_forms && nu == 0.0 => {
            let l1m = (-x).ln_1p();
            Ok(SeriesSums { log_z: -l1m, log_w: x.ln() - 2.0 * l1m })
        }
        Dispersion::Finite(nu) => truncated_series(x, nu, policy, need_w),
    }
}

const POW_TABLE_LEN: usize = 512;

thread_local! {
    /// `j^{-ν}` for `j < POW_TABLE_LEN`, for the most recently used ν.
    static INV_POW: std::cell::RefCell<(u64, Vec<f64>)> = const { std::cell::RefCell::new((u64::MAX, Vec::new())) };
}

fn truncated_series(x: f64, nu: f64, policy: &SeriesPolicy, need_w: bool) -> Result<SeriesSums> {
    INV_POW.with(|cell| {
        let mut cache = cell.borrow_mut();
        if cache.0 != nu.to_bits() {
            cache.1 = (0..POW_TABLE_LEN).map(|j| (j as f64).powf(-nu)).collect();
            cache.0 = nu.to_bits();
        }
        truncated_series_with(x, nu, &cache.1, policy, need_w)
    })
}

fn truncated_series_with(x: f64, nu: f64, inv_pow: &[f64], policy: &SeriesPolicy, need_w: bool) -> Result<SeriesSums> {
    let rel_tol = policy.rel_tol;
    // a_j = x^j/(j!)^ν, built from ratios a_j/a_{j-1} = x/j^ν.
    let mut term = 1.0_f64;
    let mut z = 1.0_f64;
    // Z − 1, kept apart so that log Z stays accurate for tiny x.
    let mut z_tail = 0.0_f64;
    let mut w = 0.0_f64;
    let mut log_scale = 0.0_f64;
    let mut ratio = x; // x / 1^ν
    for j in 1..policy.max_terms {
        let jf = j as f64;
        term *= ratio;
        z += term;
        z_tail += term;
        w += jf * term;
        if z > RESCALE {
            term /= RESCALE;
            z /= RESCALE;
            w /= RESCALE;
            log_scale += LN_RESCALE;
        }
        let next = match inv_pow.get(j + 1) {
            Some(p) => x * p,
            None => x / (jf + 1.0).powf(nu),
        };
        ratio = next;
        if next < 1.0 {
            // Ratios are nonincreasing from here on, so the remaining tail is
            // bounded by a geometric series.
            let a_next = term * next;
            let tail_z = a_next / (1.0 - next);
            let z_done = tail_z <= rel_tol * z;
            let w_done = !need_w || {
                let rho = next * (jf + 2.0) / (jf + 1.0);
                rho < 1.0 && (jf + 1.0) * a_next / (1.0 - rho) <= rel_tol * w
            };
            if z_done && w_done {
                let log_z = if log_scale == 0.0 { z_tail.ln_1p() } else { z.ln() + log_scale };
                return Ok(SeriesSums { log_z, log_w: w.ln() + log_scale });
            }
        }
    }
    Err(CureError::SeriesNonConvergence { what: "COM-Poisson normalizing constant", terms: policy.max_terms })
}

/// `log Z(θ, ν)`.
pub fn log_normalizing_constant(theta: f64, disp: Dispersion, policy: &SeriesPolicy) -> Result<f64> {
    Ok(series_sums(theta, disp, policy, false)?.log_z)
}

/// `Z(θ, ν) = Σ_{j≥0} θ^j/(j!)^ν`.
pub fn normalizing_constant(theta: f64, disp: Dispersion, policy: &SeriesPolicy) -> Result<f64> {
    log_normalizing_constant(theta, disp, policy).map(f64::exp)
}

/// `P[M = m]`.
pub fn pmf(m: u64, theta: f64, disp: Dispersion, policy: &SeriesPolicy) -> Result<f64> {
    let log_z = log_normalizing_constant(theta, disp, policy)?;
    if m == 0 {
        return Ok((-log_z).exp());
    }
    if theta == 0.0 {
        return Ok(0.0);
    }
    match disp {
        Dispersion::BernoulliLimit => Ok(if m == 1 { theta / (1.0 + theta) } else { 0.0 }),
        Dispersion::Finite(nu) => {
            let log_p = m as f64 * theta.ln() - nu * ln_factorial(m) - log_z;
            Ok(log_p.exp())
        }
    }
}

/// `Σ_{j≥1} j (θs)^j/(j!)^ν`, the weighted series appearing in the
/// population density.
pub fn weighted_series(s: f64, theta: f64, disp: Dispersion, policy: &SeriesPolicy) -> Result<f64> {
    if !(0.0..=1.0).contains(&s) {
        return Err(CureError::Invalid(format!("survival argument must lie in [0, 1], got {s}")));
    }
    check_argument(theta, "θ")?;
    Ok(series_sums(theta * s, disp, policy, true)?.log_w.exp())
}

/// Draws one count by inversion of the cumulative mass function.
pub fn sample<R: Rng + ?Sized>(theta: f64, disp: Dispersion, policy: &SeriesPolicy, rng: &mut R) -> Result<u64> {
    let log_z = log_normalizing_constant(theta, disp, policy)?;
    let u: f64 = rng.random();
    let nu = match disp {
        Dispersion::BernoulliLimit => return Ok(u64::from(u < theta / (1.0 + theta))),
        Dispersion::Finite(nu) => nu,
    };
    if theta == 0.0 {
        return Ok(0);
    }
    let ln_theta = theta.ln();
    let mut log_p = -log_z;
    let mut cum = 0.0;
    for m in 0..policy.max_terms as u64 {
        cum += log_p.exp();
        if u < cum {
            return Ok(m);
        }
        log_p += ln_theta - nu * ((m + 1) as f64).ln();
        // Past the mode with all remaining mass below round-off: u fell in
        // the truncated tail.
        if cum >= 1.0 - 4.0 * f64::EPSILON {
            return Ok(m);
        }
    }
    Err(CureError::SeriesNonConvergence { what: "COM-Poisson inversion sampler", terms: policy.max_terms })
}
