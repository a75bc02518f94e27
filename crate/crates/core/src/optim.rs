//! Derivative-free minimization by the Nelder–Mead simplex method.
//!
//! Infeasible points are signalled by the objective returning `+∞` (or NaN,
//! treated the same way); the simplex simply never accepts them.

use crate::error::{CureError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexConfig {
    pub max_evals: usize,
    /// Stop when the spread of objective values across the simplex falls
    /// below `ftol · (1 + |f_best|)`.
    pub ftol: f64,
    /// One restart from the incumbent after the first convergence.
    pub restart: bool,
}

impl Default for SimplexConfig {
    fn default() -> Self {
        SimplexConfig { max_evals: 2000, ftol: 1e-8, restart: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Minimizes `f` from `x0` with an initial simplex spanned by `x0 + step_j e_j`.
/// The returned point is never worse than `x0`.
pub fn minimize(f: impl FnMut(&[f64]) -> f64, x0: &[f64], step: &[f64], cfg: &SimplexConfig) -> Result<Minimum> {
    let edges: Vec<Vec<f64>> = (0..step.len())
        .map(|j| {
            let mut e = vec![0.0; step.len()];
            e[j] = step[j];
            e
        })
        .collect();
    minimize_from_edges(f, x0, &edges, cfg)
}

/// As [`minimize`], with the initial simplex `x0, x0 + e_1, …, x0 + e_n`
/// for arbitrary linearly independent edges `e_j`.
pub fn minimize_from_edges(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    edges: &[Vec<f64>],
    cfg: &SimplexConfig,
) -> Result<Minimum> {
    let n = x0.len();
    if n == 0 || edges.len() != n || edges.iter().any(|e| e.len() != n) {
        return Err(CureError::Optimizer("simplex needs n edges of dimension n".into()));
    }
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let f0 = eval(x0, &mut evals);
    if !f0.is_finite() {
        return Err(CureError::Optimizer("objective is not finite at the starting point".into()));
    }
    let mut best = (x0.to_vec(), f0);
    let rounds = if cfg.restart { 2 } else { 1 };
    let mut converged = false;
    for _ in 0..rounds {
        let (x, fx, ok) = run(&mut eval, &best.0, best.1, edges, cfg, &mut evals);
        if fx <= best.1 {
            best = (x, fx);
        }
        converged = ok;
        if !ok {
            break;
        }
    }
    Ok(Minimum { x: best.0, f: best.1, evals, converged })
}

fn run(
    eval: &mut impl FnMut(&[f64], &mut usize) -> f64,
    x0: &[f64],
    f0: f64,
    edges: &[Vec<f64>],
    cfg: &SimplexConfig,
    evals: &mut usize,
) -> (Vec<f64>, f64, bool) {
    let n = x0.len();
    let nf = n as f64;
    // Dimension-adapted coefficients, which keep the method effective
    // beyond a handful of dimensions.
    let (alpha, gamma, rho, sigma) = (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf);
    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut vals: Vec<f64> = Vec::with_capacity(n + 1);
    pts.push(x0.to_vec());
    vals.push(f0);
    for e in edges {
        let mut p: Vec<f64> = x0.iter().zip(e).map(|(x, d)| x + d).collect();
        let mut v = eval(&p, evals);
        if !v.is_finite() {
            p = x0.iter().zip(e).map(|(x, d)| x - d).collect();
            v = eval(&p, evals);
        }
        pts.push(p);
        vals.push(v);
    }
    let mut order: Vec<usize> = (0..=n).collect();
    let mut centroid = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut trial2 = vec![0.0; n];
    loop {
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(a.cmp(&b)));
        let (ib, iw, is) = (order[0], order[n], order[n - 1]);
        let fb = vals[ib];
        if vals[iw] - fb <= cfg.ftol * (1.0 + fb.abs()) {
            return (pts[ib].clone(), fb, true);
        }
        if *evals >= cfg.max_evals {
            return (pts[ib].clone(), fb, false);
        }
        centroid.iter_mut().for_each(|c| *c = 0.0);
        for &i in &order[..n] {
            for (c, x) in centroid.iter_mut().zip(&pts[i]) {
                *c += x / nf;
            }
        }
        let along = |coef: f64, out: &mut Vec<f64>, worst: &[f64]| {
            for ((o, c), w) in out.iter_mut().zip(&centroid).zip(worst) {
                *o = c + coef * (c - w);
            }
        };
        along(alpha, &mut trial, &pts[iw]);
        let fr = eval(&trial, evals);
        if fr < fb {
            along(alpha * gamma, &mut trial2, &pts[iw]);
            let fe = eval(&trial2, evals);
            if fe < fr {
                pts[iw].copy_from_slice(&trial2);
                vals[iw] = fe;
            } else {
                pts[iw].copy_from_slice(&trial);
                vals[iw] = fr;
            }
            continue;
        }
        if fr < vals[is] {
            pts[iw].copy_from_slice(&trial);
            vals[iw] = fr;
            continue;
        }
        let (fc, outside) = if fr < vals[iw] {
            along(alpha * rho, &mut trial2, &pts[iw]);
            (eval(&trial2, evals), true)
        } else {
            along(-rho, &mut trial2, &pts[iw]);
            (eval(&trial2, evals), false)
        };
        if (outside && fc <= fr) || (!outside && fc < vals[iw]) {
            pts[iw].copy_from_slice(&trial2);
            vals[iw] = fc;
            continue;
        }
        let xb = pts[ib].clone();
        for &i in &order[1..] {
            for (x, b) in pts[i].iter_mut().zip(&xb) {
                *x = b + sigma * (*x - b);
            }
            vals[i] = eval(&pts[i], evals);
        }
    }
}

/// Minimizes a one-dimensional function on `[a, b]` by golden-section search.
pub fn golden_section(mut f: impl FnMut(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}
