//! Synthetic multiple-exposure cohorts and Monte Carlo studies of the
//! estimator: parameter recovery, likelihood-ratio calibration and
//! information-criterion model selection.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp, Weibull};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::countdist::{sample, Dispersion, SeriesPolicy};
use crate::curemodel::{CureModel, ExposureProfile, LinkConfig, ParamVector, PreparedData, Status, Subject};
use crate::em::{fit, profile_fit, information_criteria, EmConfig, FitResult};
use crate::error::{CureError, Result};

/// Gaps between consecutive exposures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase")]
pub enum JumpLaw {
    Unit,
    Uniform { low: f64, high: f64 },
}

impl Default for JumpLaw {
    fn default() -> Self {
        JumpLaw::Unit
    }
}

impl JumpLaw {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            JumpLaw::Unit => 1.0,
            JumpLaw::Uniform { low, high } => rng.random_range(low..high),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            JumpLaw::Unit => Ok(()),
            JumpLaw::Uniform { low, high } if low > 0.0 && high > low && high.is_finite() => Ok(()),
            JumpLaw::Uniform { low, high } => {
                Err(CureError::Invalid(format!("jump law needs 0 < low < high, got {low}, {high}")))
            }
        }
    }
}

/// Data-generating design. Covariates `x_imm` and `x_prot` are Bernoulli(½);
/// the initial exposure's intensity is `exp(β0 + β1 x_imm)` and every later
/// one's `exp(β2 + β3 x_prot)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub truth: ParamVector,
    pub nu: Dispersion,
    #[serde(default = "default_censor_rate")]
    pub censor_rate: f64,
    /// Number of exposures after the first, uniform on these integer bounds.
    #[serde(default = "default_duration")]
    pub duration: (u32, u32),
    #[serde(default)]
    pub jumps: JumpLaw,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub series: SeriesPolicy,
}

fn default_censor_rate() -> f64 {
    0.10
}

fn default_duration() -> (u32, u32) {
    (2, 30)
}

fn default_replicates() -> usize {
    200
}

impl SimConfig {
    /// Settings 1–3: (γ1, γ2, n) = (2.5, 2.5, 400), (1.5, 3.5, 400), (2.5, 2.5, 200),
    /// all with β = (0.5, −1, −3, 2).
    pub fn setting(index: u8, nu: Dispersion) -> Result<Self> {
        let (g1, g2, n) = match index {
            1 => (2.5, 2.5, 400),
            2 => (1.5, 3.5, 400),
            3 => (2.5, 2.5, 200),
            k => return Err(CureError::Invalid(format!("unknown simulation setting {k}"))),
        };
        Ok(SimConfig {
            n,
            truth: ParamVector::new(vec![0.5, -1.0, -3.0, 2.0], g1, g2)?,
            nu,
            censor_rate: default_censor_rate(),
            duration: default_duration(),
            jumps: JumpLaw::Unit,
            seed: 0,
            replicates: default_replicates(),
            series: SeriesPolicy::default(),
        })
    }

    pub fn link() -> LinkConfig {
        LinkConfig::two_group(&["x_imm"], &["x_prot"])
    }

    pub fn model(&self, nu: Dispersion) -> CureModel {
        CureModel::new(nu, Self::link()).with_series(self.series)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(CureError::Invalid("sample size must be at least 1".into()));
        }
        if self.replicates == 0 {
            return Err(CureError::Invalid("replicates must be at least 1".into()));
        }
        if !(self.censor_rate > 0.0 && self.censor_rate.is_finite()) {
            return Err(CureError::Invalid(format!("censoring rate must be positive, got {}", self.censor_rate)));
        }
        if self.duration.0 > self.duration.1 {
            return Err(CureError::Invalid(format!("duration bounds out of order: {:?}", self.duration)));
        }
        if self.truth.betas.len() != 4 {
            return Err(CureError::Invalid("simulation truth needs exactly four regression coefficients".into()));
        }
        self.truth.lifetime().validate()?;
        self.series.validate()?;
        self.jumps.validate()
    }

    /// The generator for replicate `k`; depends only on `(seed, k)`.
    pub fn rng(&self, k: usize) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(k as u64);
        rng
    }
}

/// One subject drawn by the pathogen mechanism, with its cure status.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSubject {
    pub subject: Subject,
    /// No pathogen at any exposure.
    pub cured: bool,
}

pub fn generate_subject<R: Rng + ?Sized>(config: &SimConfig, id: String, rng: &mut R) -> Result<GeneratedSubject> {
    let b = &config.truth.betas;
    let extra = rng.random_range(config.duration.0..=config.duration.1) as usize;
    let mut times = Vec::with_capacity(extra + 1);
    times.push(0.0);
    for _ in 0..extra {
        let last = *times.last().unwrap();
        times.push(last + config.jumps.draw(rng));
    }
    let x_imm = f64::from(u8::from(rng.random_bool(0.5)));
    let x_prot = f64::from(u8::from(rng.random_bool(0.5)));
    let theta0 = (b[0] + b[1] * x_imm).exp();
    let theta_k = (b[2] + b[3] * x_prot).exp();
    let promotion = Weibull::new(config.truth.gamma2, config.truth.gamma1)
        .map_err(|e| CureError::Invalid(format!("Weibull truth: {e}")))?;
    let mut event_time = f64::INFINITY;
    let mut cured = true;
    for (k, &t) in times.iter().enumerate() {
        let theta = if k == 0 { theta0 } else { theta_k };
        let m = sample(theta, config.nu, &config.series, rng)?;
        for _ in 0..m {
            cured = false;
            event_time = event_time.min(t + promotion.sample(rng));
        }
    }
    let censor: f64 = Exp::new(config.censor_rate)
        .map_err(|e| CureError::Invalid(format!("censoring law: {e}")))?
        .sample(rng);
    let (time, status) = if event_time < censor { (event_time, Status::Event) } else { (censor, Status::Censored) };
    let subject = Subject::new(
        id,
        time,
        status,
        ExposureProfile::new(times)?,
        [("x_imm".to_string(), x_imm), ("x_prot".to_string(), x_prot)].into(),
    )?;
    Ok(GeneratedSubject { subject, cured })
}

/// Replicate `k`'s dataset.
pub fn generate_dataset(config: &SimConfig, k: usize) -> Result<Vec<Subject>> {
    let mut rng = config.rng(k);
    (0..config.n).map(|i| generate_subject(config, format!("{}", i + 1), &mut rng).map(|g| g.subject)).collect()
}

/// Truth perturbed coordinate-wise by a uniform factor in `[0.85, 1.15]`.
pub fn perturbed_start<R: Rng + ?Sized>(truth: &ParamVector, rng: &mut R) -> ParamVector {
    let v: Vec<f64> = truth.to_vec().iter().map(|x| x * (1.0 + rng.random_range(-0.15..=0.15))).collect();
    ParamVector::from_slice(&v).expect("perturbation keeps γ positive")
}

fn dataset_and_start(config: &SimConfig, k: usize) -> Result<(Vec<Subject>, ParamVector)> {
    let mut rng = config.rng(k);
    let data = (0..config.n)
        .map(|i| generate_subject(config, format!("{}", i + 1), &mut rng).map(|g| g.subject))
        .collect::<Result<Vec<_>>>()?;
    let start = perturbed_start(&config.truth, &mut rng);
    Ok((data, start))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub truth: f64,
    pub estimate: f64,
    /// Mean of the per-fit standard errors.
    pub se: f64,
    pub bias: f64,
    pub rmse: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuSummary {
    pub truth: Dispersion,
    pub mean: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimStudyReport {
    pub family: String,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub parameters: Vec<ParamSummary>,
    pub nu: Option<NuSummary>,
    pub failures: Vec<ReplicateFailure>,
    /// Per-replicate estimates `(β…, γ1, γ2)` of the retained fits, in order.
    pub estimates: Vec<Vec<f64>>,
}

/// How ν is treated in a fitting study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyFamily {
    Fixed(Dispersion),
    Profile(Vec<Dispersion>),
}

/// Fits every replicate from a perturbed truth and aggregates bias, RMSE,
/// mean SE and 95% coverage. Replicates whose fit fails, does not converge
/// or has no standard errors are dropped and listed.
pub fn run_fitting_study(config: &SimConfig, family: &StudyFamily, em: &EmConfig) -> Result<SimStudyReport> {
    config.validate()?;
    let truth = config.truth.to_vec();
    let names = crate::curemodel::ParamVector::names(&SimConfig::link());
    let mut kept: Vec<FitResult> = Vec::new();
    let mut failures = Vec::new();
    for k in 0..config.replicates {
        let outcome = (|| -> Result<FitResult> {
            let (data, start) = dataset_and_start(config, k)?;
            match family {
                StudyFamily::Fixed(nu) => fit(&PreparedData::new(&data, &config.model(*nu))?, &start, em),
                StudyFamily::Profile(grid) => {
                    let first = *grid.first().ok_or_else(|| CureError::Invalid("ν-grid is empty".into()))?;
                    profile_fit(&PreparedData::new(&data, &config.model(first))?, grid, &start, em)
                }
            }
        })();
        match outcome {
            Ok(f) if !f.converged => {
                failures.push(ReplicateFailure { replicate: k, reason: format!("EM did not converge in {} iterations", f.iterations) })
            }
            Ok(f) if f.se.is_none() => failures.push(ReplicateFailure {
                replicate: k,
                reason: f.diagnostics.se_failure.clone().unwrap_or_else(|| "standard errors unavailable".into()),
            }),
            Ok(f) => kept.push(f),
            Err(e) => failures.push(ReplicateFailure { replicate: k, reason: e.to_string() }),
        }
    }
    let used = kept.len() as f64;
    let parameters = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            if kept.is_empty() {
                return ParamSummary { name: name.clone(), truth: truth[j], estimate: f64::NAN, se: f64::NAN, bias: f64::NAN, rmse: f64::NAN, coverage: f64::NAN };
            }
            let est: Vec<f64> = kept.iter().map(|f| f.params.to_vec()[j]).collect();
            let mean = est.iter().sum::<f64>() / used;
            let se = kept.iter().map(|f| f.se.as_ref().unwrap()[j]).sum::<f64>() / used;
            let mse = est.iter().map(|e| (e - truth[j]).powi(2)).sum::<f64>() / used;
            let covered = kept
                .iter()
                .filter(|f| {
                    let (lo, hi) = f.ci95.as_ref().unwrap()[j];
                    lo <= truth[j] && truth[j] <= hi
                })
                .count() as f64;
            ParamSummary {
                name: name.clone(),
                truth: truth[j],
                estimate: mean,
                se,
                bias: mean - truth[j],
                rmse: mse.sqrt(),
                coverage: covered / used,
            }
        })
        .collect();
    let nu = match family {
        StudyFamily::Profile(_) if !kept.is_empty() => {
            let picks: Vec<f64> = kept.iter().map(|f| f.nu.sort_key()).collect();
            let t = config.nu.sort_key();
            Some(NuSummary {
                truth: config.nu,
                mean: picks.iter().sum::<f64>() / used,
                rmse: (picks.iter().map(|v| (v - t).powi(2)).sum::<f64>() / used).sqrt(),
            })
        }
        _ => None,
    };
    let family_name = match family {
        StudyFamily::Fixed(nu) => nu.family_name(),
        StudyFamily::Profile(_) => "com-poisson (profiled)".into(),
    };
    Ok(SimStudyReport {
        family: family_name,
        n: config.n,
        replicates: config.replicates,
        seed: config.seed,
        parameters,
        nu,
        failures,
        estimates: kept.iter().map(|f| f.params.to_vec()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminationConfig {
    /// Candidate families; each is both a data-generating truth and a fitted model.
    pub families: Vec<Dispersion>,
    /// Further ν values entering only the profile alternative of the LRT.
    #[serde(default)]
    pub extra_alternatives: Vec<Dispersion>,
    #[serde(default = "default_level")]
    pub level: f64,
}

fn default_level() -> f64 {
    0.10
}

impl DiscriminationConfig {
    pub fn standard() -> Self {
        DiscriminationConfig {
            families: vec![Dispersion::Finite(0.5), Dispersion::POISSON, Dispersion::Finite(2.0), Dispersion::BERNOULLI],
            extra_alternatives: vec![],
            level: default_level(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(CureError::Invalid("no candidate families".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(CureError::Invalid(format!("significance level must lie in (0,1), got {}", self.level)));
        }
        Ok(())
    }
}

/// Rates indexed `[fitted][true]` in `families` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminationReport {
    pub families: Vec<Dispersion>,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub level: f64,
    pub lrt_rejection: Vec<Vec<f64>>,
    pub aic_selection: Vec<Vec<f64>>,
    pub bic_selection: Vec<Vec<f64>>,
    /// Replicates retained per true family.
    pub used: Vec<usize>,
    pub failures: Vec<(Dispersion, ReplicateFailure)>,
}

/// Fits every candidate family to every replicate of every true family; the
/// LRT alternative is the profile over candidates plus extra alternatives.
/// `base` supplies the design; its `nu` is replaced by each truth in turn.
pub fn run_discrimination(base: &SimConfig, disc: &DiscriminationConfig, em: &EmConfig) -> Result<DiscriminationReport> {
    base.validate()?;
    disc.validate()?;
    let fams = &disc.families;
    let m = fams.len();
    let mut alt_grid = fams.clone();
    for a in &disc.extra_alternatives {
        if !alt_grid.contains(a) {
            alt_grid.push(*a);
        }
    }
    let critical = ChiSquared::new(1.0).expect("one degree of freedom").inverse_cdf(1.0 - disc.level);
    let em = EmConfig { standard_errors: false, ..*em };
    let mut lrt = vec![vec![0.0; m]; m];
    let mut aic = vec![vec![0.0; m]; m];
    let mut bic = vec![vec![0.0; m]; m];
    let mut used = vec![0usize; m];
    let mut failures = Vec::new();
    for (ti, &truth) in fams.iter().enumerate() {
        let config = SimConfig { nu: truth, ..base.clone() };
        for k in 0..config.replicates {
            let outcome = (|| -> Result<Vec<FitResult>> {
                let (data, start) = dataset_and_start(&config, k)?;
                let prep = PreparedData::new(&data, &config.model(alt_grid[0]))?;
                alt_grid.iter().map(|&nu| fit(&prep.with_dispersion(nu), &start, &em)).collect()
            })();
            let fits = match outcome {
                Ok(f) => f,
                Err(e) => {
                    failures.push((truth, ReplicateFailure { replicate: k, reason: e.to_string() }));
                    continue;
                }
            };
            used[ti] += 1;
            let alt = fits.iter().map(|f| f.loglik).fold(f64::NEG_INFINITY, f64::max);
            for (fi, f) in fits[..m].iter().enumerate() {
                if (-2.0 * (f.loglik - alt)).max(0.0) > critical {
                    lrt[fi][ti] += 1.0;
                }
            }
            let pick = |crit: &dyn Fn(&FitResult) -> f64| {
                (0..m).fold(0, |best, i| if crit(&fits[i]) < crit(&fits[best]) { i } else { best })
            };
            aic[pick(&|f: &FitResult| information_criteria(f.loglik, f.p, f.n).0)][ti] += 1.0;
            bic[pick(&|f: &FitResult| information_criteria(f.loglik, f.p, f.n).1)][ti] += 1.0;
        }
    }
    for mat in [&mut lrt, &mut aic, &mut bic] {
        for row in mat.iter_mut() {
            for (ti, v) in row.iter_mut().enumerate() {
                *v = if used[ti] > 0 { *v / used[ti] as f64 } else { f64::NAN };
            }
        }
    }
    Ok(DiscriminationReport {
        families: fams.clone(),
        n: base.n,
        replicates: base.replicates,
        seed: base.seed,
        level: disc.level,
        lrt_rejection: lrt,
        aic_selection: aic,
        bic_selection: bic,
        used,
        failures,
    })
}

/// LRT rejection rates `[null][true]`.
pub fn run_lrt_study(base: &SimConfig, disc: &DiscriminationConfig, em: &EmConfig) -> Result<Vec<Vec<f64>>> {
    Ok(run_discrimination(base, disc, em)?.lrt_rejection)
}

/// AIC selection rates `[selected][true]`.
pub fn run_ic_study(base: &SimConfig, disc: &DiscriminationConfig, em: &EmConfig) -> Result<Vec<Vec<f64>>> {
    Ok(run_discrimination(base, disc, em)?.aic_selection)
}
