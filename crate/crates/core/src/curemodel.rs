//! Population survival, density and cure rate of the multiple-exposure cure
//! model, with covariates entering through a link on the per-exposure
//! intensities.
//!
//! For exposure times `t_0 < … < t_T` with intensities `θ_k`,
//!
//! ```text
//! S_pop(y) = Π_k Z(θ_k S_k(y), ν) / Z(θ_k, ν)
//! p_0      = Π_k 1 / Z(θ_k, ν)
//! f_pop(y) = Σ_k (1/Z(θ_k)) (f_k(y)/S_k(y)) W(θ_k S_k(y)) Π_{l≠k} Z(θ_l S_l(y))/Z(θ_l)
//! ```
//!
//! where `S_k`, `f_k` are the promotion-time survival and density shifted to
//! the exposure time and `W(x) = Σ_{j≥1} j x^j/(j!)^ν`. Exposures with
//! `y ≤ t_k` contribute survival 1 and density 0.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::countdist::{series_sums, Dispersion, SeriesPolicy, SpecialCase};
use crate::error::{CureError, Result};
use crate::lifetime::{PromotionTime, WeibullParams};

/// Ordered exposure moments `t_0 < t_1 < … < t_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ExposureProfile {
    times: Vec<f64>,
}

impl ExposureProfile {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(CureError::Invalid("exposure profile is empty".into()));
        }
        if times.iter().any(|t| !t.is_finite()) || times[0] < 0.0 {
            return Err(CureError::Invalid("exposure times must be finite and start at t0 ≥ 0".into()));
        }
        if let Some(w) = times.windows(2).find(|w| w[1] <= w[0]) {
            return Err(CureError::Invalid(format!(
                "exposure times must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(ExposureProfile { times })
    }

    /// `count` daily exposures at `0, 1, …, count − 1`.
    pub fn unit(count: usize) -> Result<Self> {
        ExposureProfile::new((0..count).map(|k| k as f64).collect())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.times[0]
    }
}

impl TryFrom<Vec<f64>> for ExposureProfile {
    type Error = CureError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ExposureProfile::new(v)
    }
}

impl From<ExposureProfile> for Vec<f64> {
    fn from(p: ExposureProfile) -> Self {
        p.times
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Censored,
    Event,
}

impl Status {
    pub fn from_indicator(delta: u8) -> Result<Self> {
        match delta {
            0 => Ok(Status::Censored),
            1 => Ok(Status::Event),
            d => Err(CureError::Invalid(format!("status must be 0 or 1, got {d}"))),
        }
    }

    pub fn indicator(self) -> u8 {
        match self {
            Status::Censored => 0,
            Status::Event => 1,
        }
    }
}

/// One observed unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub time: f64,
    pub status: Status,
    pub exposures: ExposureProfile,
    pub covariates: BTreeMap<String, f64>,
}

impl Subject {
    pub fn new(
        id: impl Into<String>,
        time: f64,
        status: Status,
        exposures: ExposureProfile,
        covariates: BTreeMap<String, f64>,
    ) -> Result<Self> {
        let id = id.into();
        if !(time.is_finite() && time >= 0.0) {
            return Err(CureError::Invalid(format!("subject {id}: time must be finite and ≥ 0, got {time}")));
        }
        Ok(Subject { id, time, status, exposures, covariates })
    }

    pub fn is_event(&self) -> bool {
        self.status == Status::Event
    }
}

/// Which exposure indices a coefficient group applies to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SelectorRepr", into = "SelectorRepr")]
pub enum ExposureSelector {
    Initial,
    Subsequent,
    All,
    Indices(Vec<usize>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SelectorRepr {
    Name(String),
    Indices(Vec<usize>),
}

impl TryFrom<SelectorRepr> for ExposureSelector {
    type Error = String;
    fn try_from(r: SelectorRepr) -> std::result::Result<Self, String> {
        match r {
            SelectorRepr::Name(n) => match n.as_str() {
                "initial" => Ok(ExposureSelector::Initial),
                "subsequent" => Ok(ExposureSelector::Subsequent),
                "all" => Ok(ExposureSelector::All),
                other => Err(format!("unknown exposure selector `{other}`")),
            },
            SelectorRepr::Indices(v) => Ok(ExposureSelector::Indices(v)),
        }
    }
}

impl From<ExposureSelector> for SelectorRepr {
    fn from(s: ExposureSelector) -> Self {
        match s {
            ExposureSelector::Initial => SelectorRepr::Name("initial".into()),
            ExposureSelector::Subsequent => SelectorRepr::Name("subsequent".into()),
            ExposureSelector::All => SelectorRepr::Name("all".into()),
            ExposureSelector::Indices(v) => SelectorRepr::Indices(v),
        }
    }
}

impl ExposureSelector {
    pub fn covers(&self, k: usize) -> bool {
        match self {
            ExposureSelector::Initial => k == 0,
            ExposureSelector::Subsequent => k >= 1,
            ExposureSelector::All => true,
            ExposureSelector::Indices(v) => v.contains(&k),
        }
    }
}

/// Coefficients `β_g` (intercept first) shared by the exposures a selector picks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateGroup {
    pub exposures: ExposureSelector,
    #[serde(default)]
    pub covariates: Vec<String>,
}

impl CovariateGroup {
    pub fn coefficient_count(&self) -> usize {
        1 + self.covariates.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkFunction {
    /// `θ = exp(x'β)`.
    #[default]
    Log,
    /// `θ = 1/(1 + exp(−x'β))`, keeping θ < 1 for geometric fits.
    Logistic,
}

impl LinkFunction {
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            LinkFunction::Log => eta.exp(),
            LinkFunction::Logistic => 1.0 / (1.0 + (-eta).exp()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub groups: Vec<CovariateGroup>,
    #[serde(default)]
    pub function: LinkFunction,
}

impl LinkConfig {
    /// One coefficient set for the initial exposure, another for all later ones.
    pub fn two_group(initial: &[&str], subsequent: &[&str]) -> Self {
        let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        LinkConfig {
            groups: vec![
                CovariateGroup { exposures: ExposureSelector::Initial, covariates: names(initial) },
                CovariateGroup { exposures: ExposureSelector::Subsequent, covariates: names(subsequent) },
            ],
            function: LinkFunction::Log,
        }
    }

    /// A single intensity shared by every exposure.
    pub fn shared(covariates: &[&str]) -> Self {
        LinkConfig {
            groups: vec![CovariateGroup {
                exposures: ExposureSelector::All,
                covariates: covariates.iter().map(|s| s.to_string()).collect(),
            }],
            function: LinkFunction::Log,
        }
    }

    pub fn with_function(mut self, function: LinkFunction) -> Self {
        self.function = function;
        self
    }

    pub fn coefficient_count(&self) -> usize {
        self.groups.iter().map(CovariateGroup::coefficient_count).sum()
    }

    /// Names of the regression coefficients in `ParamVector::betas` order.
    pub fn coefficient_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.coefficient_count());
        for (g, group) in self.groups.iter().enumerate() {
            let prefix = if self.groups.len() == 1 { String::new() } else { format!("g{g}.") };
            out.push(format!("{prefix}intercept"));
            for c in &group.covariates {
                out.push(format!("{prefix}{c}"));
            }
        }
        out
    }

    /// Every covariate referenced by some group, sorted and de-duplicated.
    pub fn covariate_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.groups.iter().flat_map(|g| g.covariates.iter().cloned()).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(CureError::Invalid("link configuration has no coefficient groups".into()));
        }
        Ok(())
    }

    fn group_of(&self, k: usize, subject: &str) -> Result<usize> {
        let mut found = None;
        for (g, group) in self.groups.iter().enumerate() {
            if group.exposures.covers(k) {
                if found.is_some() {
                    return Err(CureError::Invalid(format!(
                        "subject {subject}: exposure {k} is covered by more than one coefficient group"
                    )));
                }
                found = Some(g);
            }
        }
        found.ok_or_else(|| {
            CureError::Invalid(format!("subject {subject}: exposure {k} is not covered by any coefficient group"))
        })
    }
}

/// Full parameter vector: regression coefficients and Weibull shape/scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub betas: Vec<f64>,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl ParamVector {
    pub fn new(betas: Vec<f64>, gamma1: f64, gamma2: f64) -> Result<Self> {
        WeibullParams::new(gamma1, gamma2)?;
        if betas.iter().any(|b| !b.is_finite()) {
            return Err(CureError::Invalid("regression coefficients must be finite".into()));
        }
        Ok(ParamVector { betas, gamma1, gamma2 })
    }

    pub fn lifetime(&self) -> WeibullParams {
        WeibullParams { gamma1: self.gamma1, gamma2: self.gamma2 }
    }

    pub fn len(&self) -> usize {
        self.betas.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `(β…, γ1, γ2)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.betas.clone();
        v.push(self.gamma1);
        v.push(self.gamma2);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() < 3 {
            return Err(CureError::Invalid("parameter vector needs at least one β and two γ".into()));
        }
        let n = v.len();
        ParamVector::new(v[..n - 2].to_vec(), v[n - 2], v[n - 1])
    }

    /// `(β…, ln γ1, ln γ2)`, the scale the optimizer works on.
    pub fn to_unconstrained(&self) -> Vec<f64> {
        let mut v = self.betas.clone();
        v.push(self.gamma1.ln());
        v.push(self.gamma2.ln());
        v
    }

    pub fn from_unconstrained(u: &[f64]) -> Self {
        let n = u.len();
        ParamVector { betas: u[..n - 2].to_vec(), gamma1: u[n - 2].exp(), gamma2: u[n - 1].exp() }
    }

    pub fn names(link: &LinkConfig) -> Vec<String> {
        let mut names = link.coefficient_names();
        names.push("gamma1".into());
        names.push("gamma2".into());
        names
    }

    pub fn check_against(&self, link: &LinkConfig) -> Result<()> {
        if self.betas.len() != link.coefficient_count() {
            return Err(CureError::Invalid(format!(
                "parameter vector has {} regression coefficients, link configuration needs {}",
                self.betas.len(),
                link.coefficient_count()
            )));
        }
        self.lifetime().validate()
    }
}

/// Dispersion choice of a model: fixed, or profiled over a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilySpec {
    Fixed(Dispersion),
    Profile(Vec<Dispersion>),
}

/// A fully specified model at one dispersion value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CureModel {
    pub dispersion: Dispersion,
    pub link: LinkConfig,
    #[serde(default)]
    pub series: SeriesPolicy,
}

impl CureModel {
    pub fn new(dispersion: Dispersion, link: LinkConfig) -> Self {
        CureModel { dispersion, link, series: SeriesPolicy::default() }
    }

    pub fn with_series(mut self, series: SeriesPolicy) -> Self {
        self.series = series;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: FamilySpec,
    pub link: LinkConfig,
    #[serde(default)]
    pub series: SeriesPolicy,
}

impl ModelSpec {
    pub fn fixed(dispersion: Dispersion, link: LinkConfig) -> Self {
        ModelSpec { family: FamilySpec::Fixed(dispersion), link, series: SeriesPolicy::default() }
    }

    pub fn profile(grid: Vec<Dispersion>, link: LinkConfig) -> Self {
        ModelSpec { family: FamilySpec::Profile(grid), link, series: SeriesPolicy::default() }
    }

    pub fn at(&self, dispersion: Dispersion) -> CureModel {
        CureModel { dispersion, link: self.link.clone(), series: self.series }
    }

    pub fn grid(&self) -> Vec<Dispersion> {
        match &self.family {
            FamilySpec::Fixed(d) => vec![*d],
            FamilySpec::Profile(g) => g.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.link.validate()?;
        self.series.validate()?;
        if let FamilySpec::Profile(grid) = &self.family {
            if grid.is_empty() {
                return Err(CureError::Invalid("ν-grid is empty".into()));
            }
            for (i, a) in grid.iter().enumerate() {
                if grid[..i].contains(a) {
                    return Err(CureError::Invalid(format!("ν-grid contains {a} twice")));
                }
            }
        }
        Ok(())
    }
}

/// A subject compiled against a link configuration: exposure groups and
/// design rows (intercept first) per group.
#[derive(Debug, Clone)]
pub(crate) struct SubjectDesign {
    pub y: f64,
    pub event: bool,
    pub times: Vec<f64>,
    pub group_of: Vec<usize>,
    /// Exposures per group, for the cure-rate product.
    pub group_counts: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

impl SubjectDesign {
    pub fn compile(subject: &Subject, link: &LinkConfig) -> Result<Self> {
        let n = subject.exposures.len();
        let mut group_of = Vec::with_capacity(n);
        let mut group_counts = vec![0usize; link.groups.len()];
        for k in 0..n {
            let g = link.group_of(k, &subject.id)?;
            group_of.push(g);
            group_counts[g] += 1;
        }
        let mut rows = Vec::with_capacity(link.groups.len());
        for group in &link.groups {
            let mut row = Vec::with_capacity(group.coefficient_count());
            row.push(1.0);
            for name in &group.covariates {
                let v = subject.covariates.get(name).copied().ok_or_else(|| CureError::MissingCovariate {
                    subject: subject.id.clone(),
                    name: name.clone(),
                })?;
                row.push(v);
            }
            rows.push(row);
        }
        Ok(SubjectDesign {
            y: subject.time,
            event: subject.is_event(),
            times: subject.exposures.times().to_vec(),
            group_of,
            group_counts,
            rows,
        })
    }

    /// Per-group intensities into `out`.
    pub fn group_intensities(&self, betas: &[f64], link: &LinkConfig, out: &mut Vec<f64>) -> Result<()> {
        out.clear();
        let mut offset = 0;
        for row in &self.rows {
            let eta: f64 = row.iter().zip(&betas[offset..offset + row.len()]).map(|(x, b)| x * b).sum();
            offset += row.len();
            let theta = link.function.inverse(eta);
            if !theta.is_finite() {
                return Err(CureError::Domain(format!("intensity overflow (linear predictor {eta})")));
            }
            out.push(theta);
        }
        Ok(())
    }
}

/// Log-scale per-subject quantities at one time point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Terms {
    pub log_s_pop: f64,
    pub log_p0: f64,
    /// `Σ_k log Z(θ_k S_k(y))` over all exposures, so that
    /// `1 − p_0/S_pop = −expm1(−shifted_log_z)` without cancellation.
    pub shifted_log_z: f64,
    /// `-∞` when the density is zero; `NaN` when it was not requested.
    pub log_f_pop: f64,
}

/// Evaluates the subject's terms at time `y` given per-group intensities.
pub(crate) fn subject_terms(
    design: &SubjectDesign,
    y: f64,
    thetas: &[f64],
    lifetime: &impl PromotionTime,
    disp: Dispersion,
    series: &SeriesPolicy,
    want_density: bool,
) -> Result<Terms> {
    match disp.special_case() {
        Some(case) if series.closed_forms => table_terms(case, design, y, thetas, lifetime, want_density),
        _ => generic_terms(design, y, thetas, lifetime, disp, series, want_density),
    }
}

fn generic_terms(
    design: &SubjectDesign,
    y: f64,
    thetas: &[f64],
    lifetime: &impl PromotionTime,
    disp: Dispersion,
    series: &SeriesPolicy,
    want_density: bool,
) -> Result<Terms> {
    let mut log_z_theta = [0.0f64; 8];
    let mut log_z_theta_vec = Vec::new();
    let log_zt: &mut [f64] = if thetas.len() <= 8 {
        &mut log_z_theta[..thetas.len()]
    } else {
        log_z_theta_vec.resize(thetas.len(), 0.0);
        &mut log_z_theta_vec
    };
    let mut log_p0 = 0.0;
    for (g, &theta) in thetas.iter().enumerate() {
        if design.group_counts[g] > 0 {
            log_zt[g] = series_sums(theta, disp, series, false)?.log_z;
            log_p0 -= design.group_counts[g] as f64 * log_zt[g];
        }
    }
    let mut log_s = 0.0;
    let mut shifted = 0.0;
    // Σ_k h_k W(x_k)/Z(x_k); multiplied by S_pop this equals the density
    // sum, since (1/Z(θ_k)) W(x_k) Π_{l≠k} Z(x_l)/Z(θ_l) = S_pop W(x_k)/Z(x_k).
    let mut hazard_sum = 0.0;
    for (k, &t) in design.times.iter().enumerate() {
        let z = y - t;
        let g = design.group_of[k];
        if z <= 0.0 {
            shifted += log_zt[g];
            continue;
        }
        let (s, h) = lifetime.survival_and_hazard(z);
        let sums = series_sums(thetas[g] * s, disp, series, want_density)?;
        log_s += sums.log_z - log_zt[g];
        shifted += sums.log_z;
        if want_density && s > 0.0 {
            hazard_sum += h * sums.mean();
        }
    }
    let log_f_pop = if want_density { log_s + hazard_sum.ln() } else { f64::NAN };
    Ok(Terms { log_s_pop: log_s, log_p0, shifted_log_z: shifted, log_f_pop })
}

/// Closed forms for the Poisson, Bernoulli and geometric members. The
/// density uses `f_pop = S_pop Σ_k h_k E[M | x_k]` with the closed-form
/// means `x`, `x/(1+x)` and `x/(1−x)`.
fn table_terms(
    case: SpecialCase,
    design: &SubjectDesign,
    y: f64,
    thetas: &[f64],
    lifetime: &impl PromotionTime,
    want_density: bool,
) -> Result<Terms> {
    let log_z = |x: f64| match case {
        SpecialCase::Poisson => x,
        SpecialCase::Bernoulli => x.ln_1p(),
        SpecialCase::Geometric => -(-x).ln_1p(),
    };
    let mut lz_theta = [0.0f64; 8];
    let mut lz_theta_vec = Vec::new();
    let lz_theta: &mut [f64] = if thetas.len() <= 8 {
        &mut lz_theta[..thetas.len()]
    } else {
        lz_theta_vec.resize(thetas.len(), 0.0);
        &mut lz_theta_vec
    };
    let mut log_p0 = 0.0;
    for (g, &theta) in thetas.iter().enumerate() {
        let c = design.group_counts[g] as f64;
        if c == 0.0 {
            continue;
        }
        if case == SpecialCase::Geometric && theta >= 1.0 {
            return Err(CureError::Domain(format!("geometric model needs θ < 1, got θ = {theta}")));
        }
        lz_theta[g] = log_z(theta);
        log_p0 -= c * lz_theta[g];
    }
    let mut log_s = 0.0;
    let mut shifted = 0.0;
    let mut hazard_sum = 0.0;
    for (k, &t) in design.times.iter().enumerate() {
        let g = design.group_of[k];
        let z = y - t;
        if z <= 0.0 {
            shifted += lz_theta[g];
            continue;
        }
        let (s, h) = lifetime.survival_and_hazard(z);
        let x = thetas[g] * s;
        let lz = log_z(x);
        shifted += lz;
        log_s += lz - lz_theta[g];
        if want_density && s > 0.0 {
            hazard_sum += h * match case {
                SpecialCase::Poisson => x,
                SpecialCase::Bernoulli => x / (1.0 + x),
                SpecialCase::Geometric => x / (1.0 - x),
            };
        }
    }
    let log_f_pop = if want_density { log_s + hazard_sum.ln() } else { f64::NAN };
    Ok(Terms { log_s_pop: log_s, log_p0, shifted_log_z: shifted, log_f_pop })
}

/// Long-term survival and density of the special cases, over the exposures
/// already started (`surv`, `dens` are `S_k(y)`, `f_k(y)` for those).
/// Returns `(log S_pop, log f_pop)`.
pub mod tables {
    pub fn poisson(theta: &[f64], surv: &[f64], dens: &[f64], want_density: bool) -> (f64, f64) {
        let log_s: f64 = -theta.iter().zip(surv).map(|(t, s)| t * (1.0 - s)).sum::<f64>();
        if !want_density {
            return (log_s, f64::NAN);
        }
        let lin: f64 = theta.iter().zip(dens).map(|(t, f)| t * f).sum();
        (log_s, lin.ln() + log_s)
    }

    pub fn bernoulli(theta: &[f64], surv: &[f64], dens: &[f64], want_density: bool) -> (f64, f64) {
        let factor = |l: usize| (1.0 + theta[l] * surv[l]) / (1.0 + theta[l]);
        let log_s: f64 = (0..theta.len()).map(|l| (theta[l] * surv[l]).ln_1p() - theta[l].ln_1p()).sum();
        if !want_density {
            return (log_s, f64::NAN);
        }
        let f = sum_with_others(theta.len(), |k| theta[k] / (1.0 + theta[k]) * dens[k], factor);
        (log_s, f.ln())
    }

    pub fn geometric(theta: &[f64], surv: &[f64], dens: &[f64], want_density: bool) -> (f64, f64) {
        let factor = |l: usize| (1.0 - theta[l]) / (1.0 - theta[l] * surv[l]);
        let log_s: f64 = (0..theta.len()).map(|l| (-theta[l]).ln_1p() - (-theta[l] * surv[l]).ln_1p()).sum();
        if !want_density {
            return (log_s, f64::NAN);
        }
        let f = sum_with_others(
            theta.len(),
            |k| {
                let d = 1.0 - theta[k] * surv[k];
                (1.0 - theta[k]) * theta[k] * dens[k] / (d * d)
            },
            factor,
        );
        (log_s, f.ln())
    }

    /// `Σ_k own(k) Π_{l≠k} other(l)` via prefix and suffix products.
    fn sum_with_others(n: usize, own: impl Fn(usize) -> f64, other: impl Fn(usize) -> f64) -> f64 {
        let mut suffix = vec![1.0; n + 1];
        for l in (0..n).rev() {
            suffix[l] = suffix[l + 1] * other(l);
        }
        let mut prefix = 1.0;
        let mut total = 0.0;
        for k in 0..n {
            total += own(k) * prefix * suffix[k + 1];
            prefix *= other(k);
        }
        total
    }
}

/// A dataset compiled against one model, for repeated likelihood evaluation.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub(crate) designs: Vec<SubjectDesign>,
    pub(crate) ids: Vec<String>,
    pub(crate) model: CureModel,
}

impl PreparedData {
    pub fn new(data: &[Subject], model: &CureModel) -> Result<Self> {
        model.link.validate()?;
        let designs = data.iter().map(|s| SubjectDesign::compile(s, &model.link)).collect::<Result<Vec<_>>>()?;
        Ok(PreparedData { designs, ids: data.iter().map(|s| s.id.clone()).collect(), model: model.clone() })
    }

    pub fn len(&self) -> usize {
        self.designs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.designs.is_empty()
    }

    pub fn model(&self) -> &CureModel {
        &self.model
    }

    pub fn with_dispersion(&self, dispersion: Dispersion) -> PreparedData {
        let mut p = self.clone();
        p.model.dispersion = dispersion;
        p
    }

    /// Censored subjects observed no later than their first exposure; they
    /// carry no information about the parameters.
    pub fn unexposed_censored(&self) -> Vec<String> {
        self.designs
            .iter()
            .zip(&self.ids)
            .filter(|(d, _)| !d.event && d.y <= d.times[0])
            .map(|(_, id)| id.clone())
            .collect()
    }

    /// Per-subject terms at the observed times; densities only for events.
    pub(crate) fn terms(&self, params: &ParamVector) -> Result<Vec<Terms>> {
        params.check_against(&self.model.link)?;
        let lifetime = params.lifetime();
        let mut thetas = Vec::with_capacity(self.model.link.groups.len());
        let mut out = Vec::with_capacity(self.designs.len());
        for d in &self.designs {
            d.group_intensities(&params.betas, &self.model.link, &mut thetas)?;
            out.push(subject_terms(d, d.y, &thetas, &lifetime, self.model.dispersion, &self.model.series, d.event)?);
        }
        Ok(out)
    }

    /// Observed-data log-likelihood `Σ_events log f_pop + Σ_censored log S_pop`.
    pub fn loglik(&self, params: &ParamVector) -> Result<f64> {
        let terms = self.terms(params)?;
        let mut total = 0.0;
        for ((t, d), id) in terms.iter().zip(&self.designs).zip(&self.ids) {
            if d.event {
                if !(t.log_f_pop > f64::NEG_INFINITY) {
                    return Err(CureError::ZeroDensity { subject: id.clone() });
                }
                total += t.log_f_pop;
            } else {
                total += t.log_s_pop;
            }
        }
        Ok(total)
    }

    /// Cure probability of every subject.
    pub fn cure_rates(&self, params: &ParamVector) -> Result<Vec<f64>> {
        Ok(self.terms(params)?.iter().map(|t| t.log_p0.exp()).collect())
    }
}

fn single(subject: &Subject, y: f64, params: &ParamVector, model: &CureModel, want_density: bool) -> Result<Terms> {
    params.check_against(&model.link)?;
    let design = SubjectDesign::compile(subject, &model.link)?;
    let mut thetas = Vec::new();
    design.group_intensities(&params.betas, &model.link, &mut thetas)?;
    subject_terms(&design, y, &thetas, &params.lifetime(), model.dispersion, &model.series, want_density)
}

/// Intensities `θ_{t_0}, …, θ_{t_T}` of one subject.
pub fn intensities(subject: &Subject, params: &ParamVector, link: &LinkConfig) -> Result<Vec<f64>> {
    params.check_against(link)?;
    let design = SubjectDesign::compile(subject, link)?;
    let mut thetas = Vec::new();
    design.group_intensities(&params.betas, link, &mut thetas)?;
    Ok(design.group_of.iter().map(|&g| thetas[g]).collect())
}

/// Long-term survival `S_pop(y)`.
pub fn s_pop(y: f64, subject: &Subject, params: &ParamVector, model: &CureModel) -> Result<f64> {
    Ok(single(subject, y, params, model, false)?.log_s_pop.exp())
}

/// Long-term density `f_pop(y) = −S_pop'(y)`.
pub fn f_pop(y: f64, subject: &Subject, params: &ParamVector, model: &CureModel) -> Result<f64> {
    Ok(single(subject, y, params, model, true)?.log_f_pop.exp())
}

/// Cure probability `p_0 = Π_k 1/Z(θ_k, ν)`.
pub fn cure_rate(subject: &Subject, params: &ParamVector, model: &CureModel) -> Result<f64> {
    Ok(single(subject, 0.0, params, model, false)?.log_p0.exp())
}

/// Survival of the susceptible subpopulation, `(S_pop − p_0)/(1 − p_0)`.
pub fn s1(y: f64, subject: &Subject, params: &ParamVector, model: &CureModel) -> Result<f64> {
    let t = single(subject, y, params, model, false)?;
    let p0 = t.log_p0.exp();
    let denom = -t.log_p0.exp_m1();
    if denom < 1e-12 {
        return Err(CureError::DegenerateCure);
    }
    let raw = (t.log_s_pop.exp() - p0) / denom;
    let clamped = raw.clamp(0.0, 1.0);
    if clamped != raw {
        log::debug!("subject {}: S1({y}) clamped from {raw:e} by {:e}", subject.id, (clamped - raw).abs());
    }
    Ok(clamped)
}

/// Observed-data log-likelihood of a dataset.
pub fn observed_loglik(data: &[Subject], params: &ParamVector, model: &CureModel) -> Result<f64> {
    PreparedData::new(data, model)?.loglik(params)
}
