//! Maximum likelihood estimation by expectation–maximization, with the
//! cure indicator of each censored subject as the missing datum.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::countdist::Dispersion;
use crate::curemodel::{ParamVector, PreparedData};
use crate::error::{CureError, Result};
use crate::optim::{minimize_from_edges, SimplexConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MStepConfig {
    /// Largest initial simplex edge on the unconstrained scale, used when
    /// the simplex is axis-aligned.
    pub simplex_scale: f64,
    pub max_evals: usize,
    pub ftol: f64,
    /// Orient the initial simplex along the principal axes of the Q-function's
    /// curvature at the current iterate, with edges of about one curvature
    /// unit, falling back to axis-aligned edges when that is not positive
    /// definite.
    pub curvature_simplex: bool,
}

impl Default for MStepConfig {
    fn default() -> Self {
        MStepConfig { simplex_scale: 0.1, max_evals: 2000, ftol: 1e-8, curvature_simplex: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    /// Stop once `max_j |Δθ_j| / max(|θ_j|, 1e-8)` falls below this.
    pub tol: f64,
    /// Zero evaluates the model at the initial value without iterating.
    pub max_iter: usize,
    pub m_step: MStepConfig,
    pub standard_errors: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig { tol: 1e-3, max_iter: 500, m_step: MStepConfig::default(), standard_errors: true }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(CureError::Invalid(format!("EM tolerance must be positive, got {}", self.tol)));
        }
        if self.max_iter < 1 {
            return Err(CureError::Invalid("EM max_iter must be at least 1".into()));
        }
        let m = &self.m_step;
        if !(m.simplex_scale > 0.0) || m.max_evals == 0 || !(m.ftol >= 0.0) {
            return Err(CureError::Invalid("M-step settings need positive scale and budget".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectValue {
    pub id: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Censored subjects observed no later than their first exposure.
    pub unexposed_censored: Vec<String>,
    pub se_failure: Option<String>,
    pub objective_evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub nu: Dispersion,
    /// `None` when the fit at this value failed.
    pub loglik: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub names: Vec<String>,
    pub params: ParamVector,
    pub nu: Dispersion,
    pub loglik: f64,
    /// Free parameters, counting ν only when it was profiled.
    pub p: usize,
    pub n: usize,
    pub aic: f64,
    pub bic: f64,
    pub se: Option<Vec<f64>>,
    pub ci95: Option<Vec<(f64, f64)>>,
    pub posteriors: Vec<SubjectValue>,
    pub cure_probs: Vec<SubjectValue>,
    pub iterations: usize,
    pub converged: bool,
    /// Observed log-likelihood at the start and after every iteration.
    pub loglik_trace: Vec<f64>,
    pub profile_trace: Vec<ProfilePoint>,
    pub diagnostics: FitDiagnostics,
}

/// AIC `−2l + 2p` and BIC `−2l + p ln n`.
pub fn information_criteria(loglik: f64, p: usize, n: usize) -> (f64, f64) {
    let p = p as f64;
    (-2.0 * loglik + 2.0 * p, -2.0 * loglik + p * (n as f64).ln())
}

/// `π_i = 1 − p_{0i}/S_pop(y_i)` for every censored subject, in data order.
pub fn e_step(data: &PreparedData, params: &ParamVector) -> Result<Vec<f64>> {
    let terms = data.terms(params)?;
    Ok(terms
        .iter()
        .zip(&data.designs)
        .filter(|(_, d)| !d.event)
        .map(|(t, _)| (-(-t.shifted_log_z).exp_m1()).clamp(0.0, 1.0))
        .collect())
}

/// Expected complete-data log-likelihood given censored-subject posteriors:
/// `Σ_events log f_pop + Σ_censored [(1 − π) log p_0 + π log(S_pop − p_0)]`.
pub fn q_function(data: &PreparedData, params: &ParamVector, posteriors: &[f64]) -> Result<f64> {
    let censored = data.designs.iter().filter(|d| !d.event).count();
    if posteriors.len() != censored {
        return Err(CureError::Invalid(format!(
            "{} posteriors supplied for {censored} censored subjects",
            posteriors.len()
        )));
    }
    let terms = data.terms(params)?;
    let mut pi = posteriors.iter();
    let mut q = 0.0;
    for ((t, d), id) in terms.iter().zip(&data.designs).zip(&data.ids) {
        if d.event {
            if !(t.log_f_pop > f64::NEG_INFINITY) {
                return Err(CureError::NonPositiveLog { term: format!("f_pop of subject {id}") });
            }
            q += t.log_f_pop;
            continue;
        }
        let p = *pi.next().unwrap();
        if p < 1.0 {
            q += (1.0 - p) * t.log_p0;
        }
        if p > 0.0 {
            // (S_pop − p_0)/S_pop
            let gap = -(-t.shifted_log_z).exp_m1();
            if !(gap >= 0.0) {
                return Err(CureError::NonPositiveLog { term: format!("S_pop − p_0 of subject {id}") });
            }
            // The gap underflows only once every θ_k S_k(y) is below the
            // smallest normal number, where π is of the same negligible order.
            q += p * (t.log_s_pop + gap.max(f64::MIN_POSITIVE).ln());
        }
    }
    Ok(q)
}

/// Maximizes the Q-function over `(β, ln γ1, ln γ2)` from `start`, with
/// the given initial simplex edges or, by default, axis-aligned edges of the
/// configured scale.
pub fn m_step(
    data: &PreparedData,
    posteriors: &[f64],
    start: &ParamVector,
    config: &MStepConfig,
    edges: Option<&[Vec<f64>]>,
) -> Result<(ParamVector, usize)> {
    let u0 = start.to_unconstrained();
    let default_edges = axis_edges(&vec![config.simplex_scale; u0.len()]);
    let edges = edges.unwrap_or(&default_edges);
    let objective = |u: &[f64]| {
        if u.iter().any(|v| !v.is_finite()) || u[u.len() - 2].abs() > 30.0 || u[u.len() - 1].abs() > 30.0 {
            return f64::INFINITY;
        }
        match q_function(data, &ParamVector::from_unconstrained(u), posteriors) {
            Ok(q) => -q,
            Err(_) => f64::INFINITY,
        }
    };
    let cfg = SimplexConfig { max_evals: config.max_evals, ftol: config.ftol, restart: true };
    let min = minimize_from_edges(objective, &u0, edges, &cfg).map_err(|e| match e {
        CureError::Optimizer(_) => match q_function(data, start, posteriors) {
            Err(inner) => inner,
            Ok(_) => e,
        },
        other => other,
    })?;
    Ok((ParamVector::from_unconstrained(&min.x), min.evals))
}

fn axis_edges(steps: &[f64]) -> Vec<Vec<f64>> {
    (0..steps.len())
        .map(|j| {
            let mut e = vec![0.0; steps.len()];
            e[j] = steps[j];
            e
        })
        .collect()
}

/// Cholesky factor `L` of the negated Q-function Hessian on the
/// unconstrained scale, if it is positive definite.
fn q_curvature(data: &PreparedData, posteriors: &[f64], params: &ParamVector) -> Option<DMatrix<f64>> {
    let u = params.to_unconstrained();
    let q = |v: &[f64]| q_function(data, &ParamVector::from_unconstrained(v), posteriors);
    let h = central_hessian(q, &u, 1e-3);
    let h = h.ok()?;
    (-h).cholesky().map(|c| c.l())
}

/// Edges `scale · L^{-T} e_j`: a regular simplex of side `scale` after
/// whitening by the curvature.
fn whitened_edges(l: &DMatrix<f64>, scale: f64) -> Option<Vec<Vec<f64>>> {
    let lt_inv = l.transpose().try_inverse()?;
    Some((0..l.ncols()).map(|j| lt_inv.column(j).iter().map(|v| v * scale).collect()).collect())
}

fn relative_change(old: &[f64], new: &[f64]) -> f64 {
    old.iter().zip(new).map(|(a, b)| (b - a).abs() / a.abs().max(1e-8)).fold(0.0, f64::max)
}

/// Runs EM from `init` and assembles the fit summary.
pub fn fit(data: &PreparedData, init: &ParamVector, config: &EmConfig) -> Result<FitResult> {
    let mut params = ParamVector::new(init.betas.clone(), init.gamma1, init.gamma2)?;
    let mut loglik = data.loglik(&params)?;
    let mut trace = vec![loglik];
    let mut converged = false;
    let mut iterations = 0;
    let mut evals = 0;
    let scale = config.m_step.simplex_scale;
    let mut axis_steps = vec![scale; params.len()];
    // Size of the last move in curvature units; the first M-step uses 1.
    let mut whitened_move: Option<f64> = None;
    while iterations < config.max_iter {
        let pi = e_step(data, &params)?;
        let curvature = if config.m_step.curvature_simplex { q_curvature(data, &pi, &params) } else { None };
        if curvature.is_some() {
            evals += 1 + 2 * params.len() * params.len();
        }
        let edges = match &curvature {
            Some(l) => whitened_edges(l, whitened_move.map_or(1.0, |m| (2.0 * m).clamp(0.05, 1.0))),
            None => None,
        }
        .unwrap_or_else(|| axis_edges(&axis_steps));
        let (next, used) = m_step(data, &pi, &params, &config.m_step, Some(&edges))?;
        evals += used;
        iterations += 1;
        let (u_old, u_new) = (params.to_unconstrained(), next.to_unconstrained());
        let du: Vec<f64> = u_old.iter().zip(&u_new).map(|(a, b)| b - a).collect();
        // Later M-steps start from a simplex sized to the last move.
        axis_steps = du.iter().map(|d| (2.0 * d.abs()).clamp(0.1 * scale, scale)).collect();
        whitened_move = curvature.map(|l| (l.transpose() * nalgebra::DVector::from_column_slice(&du)).norm());
        let change = relative_change(&params.to_vec(), &next.to_vec());
        params = next;
        loglik = data.loglik(&params)?;
        trace.push(loglik);
        if change < config.tol {
            converged = true;
            break;
        }
    }
    let p = params.len();
    let mut result = summarize(data, params, loglik, p, config.standard_errors)?;
    result.iterations = iterations;
    result.converged = converged;
    result.loglik_trace = trace;
    result.diagnostics.objective_evals += evals;
    Ok(result)
}

fn summarize(data: &PreparedData, params: ParamVector, loglik: f64, p: usize, with_se: bool) -> Result<FitResult> {
    let n = data.len();
    let (aic, bic) = information_criteria(loglik, p, n);
    let mut diagnostics = FitDiagnostics { unexposed_censored: data.unexposed_censored(), ..Default::default() };
    let (se, ci95) = if with_se {
        match standard_errors(data, &params) {
            Ok(se) => {
                let est = params.to_vec();
                let ci = est.iter().zip(&se).map(|(e, s)| (e - 1.96 * s, e + 1.96 * s)).collect();
                (Some(se), Some(ci))
            }
            Err(e) => {
                diagnostics.se_failure = Some(e.to_string());
                (None, None)
            }
        }
    } else {
        (None, None)
    };
    let pi = e_step(data, &params)?;
    let censored_ids = data.designs.iter().zip(&data.ids).filter(|(d, _)| !d.event).map(|(_, id)| id.clone());
    let posteriors = censored_ids.zip(pi).map(|(id, value)| SubjectValue { id, value }).collect();
    let cure_probs =
        data.ids.iter().cloned().zip(data.cure_rates(&params)?).map(|(id, value)| SubjectValue { id, value }).collect();
    Ok(FitResult {
        names: ParamVector::names(&data.model.link),
        params,
        nu: data.model.dispersion,
        loglik,
        p,
        n,
        aic,
        bic,
        se,
        ci95,
        posteriors,
        cure_probs,
        iterations: 0,
        converged: false,
        loglik_trace: vec![],
        profile_trace: vec![],
        diagnostics,
    })
}

/// Fits at every ν in `grid` from the same start and keeps the best observed
/// log-likelihood; ν then counts as one more free parameter.
pub fn profile_fit(data: &PreparedData, grid: &[Dispersion], init: &ParamVector, config: &EmConfig) -> Result<FitResult> {
    if grid.is_empty() {
        return Err(CureError::Invalid("ν-grid is empty".into()));
    }
    let mut trace = Vec::with_capacity(grid.len());
    let mut best: Option<FitResult> = None;
    let mut last_err = None;
    for &nu in grid {
        match fit(&data.with_dispersion(nu), init, config) {
            Ok(f) => {
                trace.push(ProfilePoint { nu, loglik: Some(f.loglik), converged: f.converged, error: None });
                if best.as_ref().is_none_or(|b| f.loglik > b.loglik) {
                    best = Some(f);
                }
            }
            Err(e) => {
                trace.push(ProfilePoint { nu, loglik: None, converged: false, error: Some(e.to_string()) });
                last_err = Some(e);
            }
        }
    }
    let mut best = match best {
        Some(b) => b,
        None => return Err(last_err.expect("nonempty grid")),
    };
    best.p += 1;
    (best.aic, best.bic) = information_criteria(best.loglik, best.p, best.n);
    best.profile_trace = trace;
    Ok(best)
}

/// Standard errors from the inverse observed information, computed on the
/// `(β, ln γ)` scale and mapped back to `γ` by the delta method.
pub fn standard_errors(data: &PreparedData, params: &ParamVector) -> Result<Vec<f64>> {
    let u = params.to_unconstrained();
    let mut se = observed_information_se(|v| data.loglik(&ParamVector::from_unconstrained(v)), &u)?;
    let k = se.len();
    se[k - 2] *= params.gamma1;
    se[k - 1] *= params.gamma2;
    Ok(se)
}

/// Square roots of the diagonal of `(−∇²l)^{-1}` at `at`, with the Hessian
/// taken by central differences of step `1e-4 · max(1, |x_j|)`.
pub fn observed_information_se(loglik: impl FnMut(&[f64]) -> Result<f64>, at: &[f64]) -> Result<Vec<f64>> {
    let d = at.len();
    let info = -central_hessian(loglik, at, 1e-4)?;
    if info.iter().any(|v| !v.is_finite()) {
        return Err(CureError::NotPositiveDefinite);
    }
    let chol = info.cholesky().ok_or(CureError::NotPositiveDefinite)?;
    let inv = chol.inverse();
    (0..d)
        .map(|j| {
            let v = inv[(j, j)];
            if v > 0.0 && v.is_finite() {
                Ok(v.sqrt())
            } else {
                Err(CureError::NotPositiveDefinite)
            }
        })
        .collect()
}

/// Central-difference Hessian with steps `rel_step · max(1, |x_j|)`.
fn central_hessian(mut f: impl FnMut(&[f64]) -> Result<f64>, at: &[f64], rel_step: f64) -> Result<DMatrix<f64>> {
    let d = at.len();
    let h: Vec<f64> = at.iter().map(|x| rel_step * x.abs().max(1.0)).collect();
    let f0 = f(at)?;
    let mut x = at.to_vec();
    let mut at_offsets = |x: &mut Vec<f64>, moves: &[(usize, f64)]| {
        x.copy_from_slice(at);
        for &(j, s) in moves {
            x[j] += s * h[j];
        }
        f(x)
    };
    let mut hess = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        let fp = at_offsets(&mut x, &[(i, 1.0)])?;
        let fm = at_offsets(&mut x, &[(i, -1.0)])?;
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let fpp = at_offsets(&mut x, &[(i, 1.0), (j, 1.0)])?;
            let fpm = at_offsets(&mut x, &[(i, 1.0), (j, -1.0)])?;
            let fmp = at_offsets(&mut x, &[(i, -1.0), (j, 1.0)])?;
            let fmm = at_offsets(&mut x, &[(i, -1.0), (j, -1.0)])?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(hess)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodRatio {
    pub null_nu: Dispersion,
    pub null_loglik: f64,
    pub alt_loglik: f64,
    pub lambda: f64,
    /// Chi-square(1) tail probability; asymptotic, and not valid when the
    /// null sits on the boundary of the ν range (the Bernoulli limit).
    pub p_value: f64,
}

/// `Λ = −2(l̂_0 − l̂)`, clamped at zero, with the null fitted at fixed ν.
pub fn likelihood_ratio(
    data: &PreparedData,
    null_nu: Dispersion,
    alt: &FitResult,
    init: &ParamVector,
    config: &EmConfig,
) -> Result<LikelihoodRatio> {
    let null_loglik = match alt.profile_trace.iter().find(|p| p.nu == null_nu).and_then(|p| p.loglik) {
        Some(l) => l,
        None => fit(&data.with_dispersion(null_nu), init, &EmConfig { standard_errors: false, ..*config })?.loglik,
    };
    Ok(lrt_from_logliks(null_nu, null_loglik, alt.loglik))
}

pub fn lrt_from_logliks(null_nu: Dispersion, null_loglik: f64, alt_loglik: f64) -> LikelihoodRatio {
    let lambda = (-2.0 * (null_loglik - alt_loglik)).max(0.0);
    let p_value = ChiSquared::new(1.0).expect("one degree of freedom").sf(lambda);
    LikelihoodRatio { null_nu, null_loglik, alt_loglik, lambda, p_value }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curemodel::{cure_rate, f_pop, s_pop, CureModel, ExposureProfile, LinkConfig, Status, Subject};
    use approx::assert_relative_eq;

    fn fixture() -> Vec<Subject> {
        // Hand-built mix of events and censored times across exposure counts.
        let rows: [(f64, u8, usize, f64, f64); 10] = [
            (1.4, 1, 3, 1.0, 0.0),
            (2.9, 0, 5, 0.0, 1.0),
            (0.8, 1, 2, 1.0, 1.0),
            (6.5, 0, 8, 0.0, 0.0),
            (3.3, 1, 4, 0.0, 1.0),
            (9.0, 0, 12, 1.0, 0.0),
            (2.2, 1, 6, 1.0, 1.0),
            (4.1, 0, 3, 0.0, 1.0),
            (5.7, 1, 9, 0.0, 0.0),
            (12.0, 0, 15, 1.0, 1.0),
        ];
        rows.iter()
            .enumerate()
            .map(|(i, &(y, d, k, xi, xp))| {
                Subject::new(
                    format!("s{i}"),
                    y,
                    Status::from_indicator(d).unwrap(),
                    ExposureProfile::unit(k).unwrap(),
                    [("x_imm".to_string(), xi), ("x_prot".to_string(), xp)].into(),
                )
                .unwrap()
            })
            .collect()
    }

    fn params() -> ParamVector {
        ParamVector::new(vec![0.5, -1.0, -3.0, 2.0], 2.5, 2.5).unwrap()
    }

    fn families() -> [Dispersion; 4] {
        [Dispersion::Finite(0.5), Dispersion::POISSON, Dispersion::Finite(2.0), Dispersion::BERNOULLI]
    }

    fn model(nu: Dispersion) -> CureModel {
        CureModel::new(nu, LinkConfig::two_group(&["x_imm"], &["x_prot"]))
    }

    #[test]
    fn information_criteria_arithmetic() {
        let (aic, bic) = information_criteria(-100.0, 3, 50);
        assert_eq!(aic, 206.0);
        assert_relative_eq!(bic, 200.0 + 3.0 * 50f64.ln(), max_relative = 1e-15);
    }

    #[test]
    fn e_step_matches_product_form() {
        let data = fixture();
        for nu in families() {
            let m = model(nu);
            let prep = PreparedData::new(&data, &m).unwrap();
            let pi = e_step(&prep, &params()).unwrap();
            let censored: Vec<&Subject> = data.iter().filter(|s| !s.is_event()).collect();
            assert_eq!(pi.len(), censored.len());
            for (s, p) in censored.iter().zip(&pi) {
                // 1 − Π_k 1/Z(θ_k S_k(y)) by direct evaluation of each factor.
                let th = crate::curemodel::intensities(s, &params(), &m.link).unwrap();
                let w = params().lifetime();
                let mut prod = 1.0;
                for (k, t) in s.exposures.times().iter().enumerate() {
                    use crate::lifetime::PromotionTime;
                    let x = th[k] * w.shifted_survival(s.time, *t);
                    prod /= crate::countdist::normalizing_constant(x, nu, &crate::SeriesPolicy::series_only()).unwrap();
                }
                assert_relative_eq!(*p, 1.0 - prod, max_relative = 1e-10);
                assert!((0.0..=1.0).contains(p));
                let direct = 1.0 - cure_rate(s, &params(), &m).unwrap() / s_pop(s.time, s, &params(), &m).unwrap();
                assert_relative_eq!(*p, direct, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn e_step_trivial_values() {
        // π at y = 0 is 1 − p_0.
        let s = Subject::new("a", 0.0, Status::Censored, ExposureProfile::unit(2).unwrap(), Default::default()).unwrap();
        let m = CureModel::new(Dispersion::POISSON, LinkConfig::shared(&[]));
        // exp(−2θ) = 0.3
        let p = ParamVector::new(vec![(-(0.3f64.ln()) / 2.0).ln()], 2.5, 2.5).unwrap();
        let prep = PreparedData::new(std::slice::from_ref(&s), &m).unwrap();
        let p0 = cure_rate(&s, &p, &m).unwrap();
        assert_relative_eq!(p0, 0.3, max_relative = 1e-12);
        assert_relative_eq!(e_step(&prep, &p).unwrap()[0], 0.7, max_relative = 1e-12);
    }

    #[test]
    fn q_function_matches_term_by_term_recomputation() {
        let data = fixture();
        for nu in families() {
            let m = model(nu);
            let prep = PreparedData::new(&data, &m).unwrap();
            let prev = ParamVector::new(vec![0.3, -0.8, -2.5, 1.5], 2.0, 3.0).unwrap();
            let pi = e_step(&prep, &prev).unwrap();
            let at = params();
            let mut expect = 0.0;
            let mut it = pi.iter();
            for s in &data {
                if s.is_event() {
                    expect += f_pop(s.time, s, &at, &m).unwrap().ln();
                } else {
                    let p = it.next().unwrap();
                    let p0 = cure_rate(s, &at, &m).unwrap();
                    let sp = s_pop(s.time, s, &at, &m).unwrap();
                    expect += (1.0 - p) * p0.ln() + p * (sp - p0).ln();
                }
            }
            assert_relative_eq!(q_function(&prep, &at, &pi).unwrap(), expect, max_relative = 1e-10);
        }
    }

    #[test]
    fn q_function_trivial_cases() {
        let data: Vec<Subject> = fixture().into_iter().filter(|s| s.is_event()).collect();
        let m = model(Dispersion::POISSON);
        let prep = PreparedData::new(&data, &m).unwrap();
        assert_relative_eq!(
            q_function(&prep, &params(), &[]).unwrap(),
            prep.loglik(&params()).unwrap(),
            max_relative = 1e-14
        );
        let data = fixture();
        let prep = PreparedData::new(&data, &m).unwrap();
        let zeros = vec![0.0; 5];
        let mut expect = 0.0;
        for s in &data {
            expect += if s.is_event() {
                f_pop(s.time, s, &params(), &m).unwrap().ln()
            } else {
                cure_rate(s, &params(), &m).unwrap().ln()
            };
        }
        assert_relative_eq!(q_function(&prep, &params(), &zeros).unwrap(), expect, max_relative = 1e-12);
    }

    #[test]
    fn m_step_ascends() {
        let data = fixture();
        for nu in families() {
            let prep = PreparedData::new(&data, &model(nu)).unwrap();
            let pi = e_step(&prep, &params()).unwrap();
            let (next, _) = m_step(&prep, &pi, &params(), &MStepConfig::default(), None).unwrap();
            assert!(q_function(&prep, &next, &pi).unwrap() >= q_function(&prep, &params(), &pi).unwrap());
        }
    }

    #[test]
    fn m_step_matches_profiled_poisson_oracle() {
        use crate::lifetime::{PromotionTime, WeibullParams};
        use crate::optim::golden_section;
        // Complete data: every cure indicator known, three censored subjects cured.
        let ys = [0.4, 0.9, 1.3, 1.7, 2.2, 2.6, 3.1, 3.8, 4.4, 5.9];
        let cured = 3usize;
        let mut data: Vec<Subject> = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| Subject::new(format!("e{i}"), y, Status::Event, ExposureProfile::unit(1).unwrap(), Default::default()).unwrap())
            .collect();
        for i in 0..cured {
            data.push(Subject::new(format!("c{i}"), 8.0, Status::Censored, ExposureProfile::unit(1).unwrap(), Default::default()).unwrap());
        }
        // l(θ, γ) = Σ_events [log θ f(y) − θ F(y)] − cured·θ, so θ̂(γ) = n_1 / (Σ F(y) + cured).
        let theta_hat = |w: &WeibullParams| ys.len() as f64 / (ys.iter().map(|&y| w.cdf(y)).sum::<f64>() + cured as f64);
        let profile = |g1: f64, g2: f64| {
            let w = WeibullParams::new(g1, g2).unwrap();
            let th = theta_hat(&w);
            ys.iter().map(|&y| (th * w.pdf(y).unwrap()).ln() - th * w.cdf(y)).sum::<f64>() - cured as f64 * th
        };
        let best_g2 = |g1: f64| golden_section(|g2| -profile(g1, g2), 0.5, 20.0, 1e-10);
        let g1 = golden_section(|g1| -profile(g1, best_g2(g1)), 0.3, 6.0, 1e-10);
        let g2 = best_g2(g1);
        let w = WeibullParams::new(g1, g2).unwrap();
        let th = theta_hat(&w);

        let m = CureModel::new(Dispersion::POISSON, LinkConfig::shared(&[]));
        let prep = PreparedData::new(&data, &m).unwrap();
        let start = ParamVector::new(vec![0.5], 1.5, 3.0).unwrap();
        let cfg = MStepConfig { simplex_scale: 0.3, max_evals: 20_000, ftol: 1e-15, ..Default::default() };
        let (got, _) = m_step(&prep, &[0.0; 3], &start, &cfg, None).unwrap();
        assert!((got.betas[0] - th.ln()).abs() < 1e-4, "{} vs {}", got.betas[0], th.ln());
        assert!((got.gamma1 - g1).abs() < 1e-4, "{} vs {g1}", got.gamma1);
        assert!((got.gamma2 - g2).abs() < 1e-4, "{} vs {g2}", got.gamma2);
    }

    #[test]
    fn em_trace_nondecreasing_and_deterministic() {
        let data = fixture();
        for nu in families() {
            let prep = PreparedData::new(&data, &model(nu)).unwrap();
            let cfg = EmConfig { max_iter: 25, ..Default::default() };
            let a = fit(&prep, &params(), &cfg).unwrap();
            for w in a.loglik_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-8, "{nu}: {w:?}");
            }
            assert!(a.posteriors.iter().all(|p| (0.0..=1.0).contains(&p.value)));
            let b = fit(&prep, &params(), &cfg).unwrap();
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        }
    }

    #[test]
    fn evaluate_only_hook() {
        let prep = PreparedData::new(&fixture(), &model(Dispersion::POISSON)).unwrap();
        let r = fit(&prep, &params(), &EmConfig { max_iter: 0, standard_errors: false, ..Default::default() }).unwrap();
        assert_eq!(r.params, params());
        assert_eq!(r.iterations, 0);
        assert_eq!(r.loglik, prep.loglik(&params()).unwrap());
        assert_eq!(r.p, 6);
        assert_eq!(r.aic, -2.0 * r.loglik + 12.0);
    }

    #[test]
    fn single_point_profile_equals_fit() {
        let prep = PreparedData::new(&fixture(), &model(Dispersion::POISSON)).unwrap();
        let cfg = EmConfig { max_iter: 10, standard_errors: false, ..Default::default() };
        let f = fit(&prep, &params(), &cfg).unwrap();
        let p = profile_fit(&prep, &[Dispersion::POISSON], &params(), &cfg).unwrap();
        assert_eq!(p.params, f.params);
        assert_eq!(p.loglik, f.loglik);
        assert_eq!(p.p, f.p + 1);
        assert_eq!(p.profile_trace.len(), 1);
        let lr = likelihood_ratio(&prep, Dispersion::POISSON, &p, &params(), &cfg).unwrap();
        assert_eq!(lr.lambda, 0.0);
        assert_eq!(lr.p_value, 1.0);
    }

    #[test]
    fn profile_selects_trace_maximum() {
        let prep = PreparedData::new(&fixture(), &model(Dispersion::POISSON)).unwrap();
        let cfg = EmConfig { max_iter: 5, standard_errors: false, ..Default::default() };
        let p = profile_fit(&prep, &families(), &params(), &cfg).unwrap();
        let best = p.profile_trace.iter().filter_map(|t| t.loglik).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(p.loglik, best);
    }

    #[test]
    fn lrt_arithmetic() {
        let lr = lrt_from_logliks(Dispersion::BERNOULLI, -85.7294, -85.7124);
        assert_relative_eq!(lr.lambda, 0.034, max_relative = 1e-9);
        assert_eq!(lrt_from_logliks(Dispersion::POISSON, -10.0, -10.000001).lambda, 0.0);
        assert_relative_eq!(lrt_from_logliks(Dispersion::POISSON, 0.0, 2.7055434 / 2.0).p_value, 0.1, max_relative = 1e-6);
    }

    #[test]
    fn quadratic_standard_errors() {
        let se = observed_information_se(|x| Ok(-0.5 * x.iter().map(|v| v * v).sum::<f64>()), &[0.0, 0.3, -2.0]).unwrap();
        for s in se {
            assert_relative_eq!(s, 1.0, max_relative = 1e-6);
        }
        let se = observed_information_se(|x| Ok(-0.5 * 4.0 * x[0] * x[0]), &[0.7]).unwrap();
        assert_relative_eq!(se[0], 0.5, max_relative = 1e-6);
        let flat = observed_information_se(|x| Ok(x[0] * x[0]), &[0.0]);
        assert_eq!(flat.unwrap_err(), CureError::NotPositiveDefinite);
    }

    #[test]
    fn config_validation() {
        assert!(EmConfig::default().validate().is_ok());
        assert!(EmConfig { max_iter: 0, ..Default::default() }.validate().is_err());
        assert!(EmConfig { tol: 0.0, ..Default::default() }.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn posteriors_are_probabilities(
            b in proptest::array::uniform4(-4.0f64..1.0), g1 in 0.5f64..5.0, g2 in 0.5f64..6.0, nu_ix in 0usize..4,
        ) {
            let prep = PreparedData::new(&fixture(), &model(families()[nu_ix])).unwrap();
            let p = ParamVector::new(b.to_vec(), g1, g2).unwrap();
            for pi in e_step(&prep, &p).unwrap() {
                proptest::prop_assert!((0.0..=1.0).contains(&pi), "{}", pi);
            }
        }
    }
}
