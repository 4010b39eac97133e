//! Nonsmooth constrained optimization: quasi-Newton on an exact ℓ1 penalty.
//!
//! Minimizes (or maximizes, by negation) `f(v)` subject to inequality
//! constraints `c_i(v) ≤ 0` by driving the penalty function
//! `φ_μ(v) = μ f(v) + Σ max(c_i(v), 0)` with BFGS curvature and a weak
//! backtracking line search that tolerates the kinks of the penalty term.
//! The penalty parameter μ is reduced when the line search fails at a
//! constraint-violating point, so feasibility eventually dominates.
//! Termination uses a stationarity measure built from the minimum-norm convex
//! combination of recently observed penalty gradients, which is meaningful at
//! nonsmooth limits where a single gradient never vanishes.
//!
//! The solver is deliberately pluggable behind [`NlpProblem`]: anything that
//! produces objective/constraint values and gradients can be swapped in.

use ndarray::prelude::*;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{DampkitError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

/// One objective/constraint evaluation.
#[derive(Debug, Clone)]
pub struct NlpEval {
    pub objective: f64,
    pub gradient: Array1<f64>,
    /// Canonical `≤ 0` form.
    pub constraints: Array1<f64>,
    pub constraint_grads: Vec<Array1<f64>>,
}

/// A nonsmooth constrained problem; the evaluator must be a deterministic
/// function of `v`.
pub struct NlpProblem<'a> {
    pub dim: usize,
    pub sense: Sense,
    #[allow(clippy::type_complexity)]
    pub eval: Box<dyn Fn(&Array1<f64>) -> Result<NlpEval> + 'a>,
}

#[derive(Debug, Clone)]
pub struct NlpOptions {
    pub max_iter: usize,
    pub penalty_init: f64,
    pub stat_tol: f64,
    pub viol_tol: f64,
}

impl Default for NlpOptions {
    fn default() -> Self {
        NlpOptions {
            max_iter: 100,
            penalty_init: 1.0,
            stat_tol: 1e-6,
            viol_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OptStatus {
    Converged,
    MaxIter,
    InfeasibleStationary,
    SolverError,
}

#[derive(Debug, Clone, Serialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    /// Objective in the problem's own sense (not the internal minimization).
    pub objective: f64,
    /// Max positive constraint value.
    pub violation: f64,
    /// Accepted line-search step length.
    pub step: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OptResult {
    pub v_opt: Vec<f64>,
    pub objective_final: f64,
    /// From a fresh evaluation at `v_opt`.
    pub constraint_violation: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub history: Vec<HistoryEntry>,
    pub status: OptStatus,
}

fn violation(constraints: &Array1<f64>) -> f64 {
    constraints.iter().fold(0.0f64, |m, &c| m.max(c))
}

struct PenaltyEval {
    raw: NlpEval,
    /// Sign-adjusted objective (always minimized internally).
    fobj: f64,
    fgrad: Array1<f64>,
    phi: f64,
    phi_grad: Array1<f64>,
    viol: f64,
}

fn penalty_assemble(raw: NlpEval, sign: f64, mu: f64) -> PenaltyEval {
    let fobj = sign * raw.objective;
    let fgrad = raw.gradient.mapv(|g| sign * g);
    let mut phi = mu * fobj;
    let mut phi_grad = fgrad.mapv(|g| mu * g);
    for (i, &c) in raw.constraints.iter().enumerate() {
        if c > 0.0 {
            phi += c;
            phi_grad += &raw.constraint_grads[i];
        }
    }
    let viol = violation(&raw.constraints);
    PenaltyEval {
        fobj,
        fgrad,
        phi,
        phi_grad,
        viol,
        raw,
    }
}

/// Projection onto the probability simplex (sort-based).
fn project_simplex(a: &mut [f64]) {
    let n = a.len();
    let mut sorted = a.to_vec();
    sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let mut acc = 0.0;
    let mut theta = 0.0;
    let mut found = false;
    for (k, &s) in sorted.iter().enumerate() {
        acc += s;
        let t = (acc - 1.0) / (k + 1) as f64;
        if s - t > 0.0 {
            theta = t;
            found = true;
        } else {
            break;
        }
    }
    if !found {
        theta = (acc - 1.0) / n as f64;
    }
    for x in a.iter_mut() {
        *x = (*x - theta).max(0.0);
    }
}

/// Norm of the minimum-norm convex combination of the cached gradients,
/// computed by projected gradient descent on the simplex.
///
/// Only gradients sampled within `radius` of the current iterate count: a
/// kink certificate is meaningful only when the straddling points cluster.
fn stationarity_measure_near(
    cache: &[(Array1<f64>, Array1<f64>)],
    v: &Array1<f64>,
    radius: f64,
) -> f64 {
    let bundle: Vec<&Array1<f64>> = cache
        .iter()
        .filter(|(p, _)| {
            let d = p - v;
            d.dot(&d).sqrt() <= radius
        })
        .map(|(_, g)| g)
        .collect();
    stationarity_measure(&bundle)
}

fn stationarity_measure<G: std::borrow::Borrow<Array1<f64>>>(bundle: &[G]) -> f64 {
    if bundle.is_empty() {
        return f64::INFINITY;
    }
    let l = bundle.len();
    let gram: Vec<f64> = (0..l * l)
        .map(|ij| bundle[ij / l].borrow().dot(bundle[ij % l].borrow()))
        .collect();
    let lip = gram.iter().map(|x| x.abs()).fold(0.0f64, f64::max) * l as f64;
    if lip == 0.0 {
        return 0.0;
    }
    let mut a = vec![1.0 / l as f64; l];
    let step = 1.0 / lip;
    for _ in 0..200 {
        let mut grad = vec![0.0; l];
        for i in 0..l {
            for j in 0..l {
                grad[i] += gram[i * l + j] * a[j];
            }
        }
        for i in 0..l {
            a[i] -= 2.0 * step * grad[i];
        }
        project_simplex(&mut a);
    }
    let mut quad = 0.0;
    for i in 0..l {
        for j in 0..l {
            quad += a[i] * gram[i * l + j] * a[j];
        }
    }
    quad.max(0.0).sqrt()
}

/// Solves the problem from one starting point.
pub fn solve_nlp(p: &NlpProblem, v_init: &Array1<f64>, opts: &NlpOptions) -> Result<OptResult> {
    if v_init.len() != p.dim {
        return Err(DampkitError::DimensionMismatch(format!(
            "start has dimension {}, problem has {}",
            v_init.len(),
            p.dim
        )));
    }
    if v_init.iter().any(|x| !x.is_finite()) {
        return Err(DampkitError::InvalidArgument(
            "starting point must be finite".into(),
        ));
    }
    let sign = match p.sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    let dim = p.dim;
    let mut evaluations = 0usize;
    let mut eval_at = |v: &Array1<f64>, mu: f64| -> Result<PenaltyEval> {
        evaluations += 1;
        let raw = (p.eval)(v).map_err(|e| {
            DampkitError::Solver(format!("evaluation failed at v = {:?}: {e}", v.to_vec()))
        })?;
        Ok(penalty_assemble(raw, sign, mu))
    };

    let mut mu = opts.penalty_init;
    const MU_MIN: f64 = 1e-10;
    let bundle_cap = (2 * dim + 6).min(12);

    let mut v = v_init.clone();
    let mut cur = eval_at(&v, mu)?;
    let mut h = Array2::<f64>::eye(dim);
    let mut bundle: Vec<(Array1<f64>, Array1<f64>)> = vec![(v.clone(), cur.phi_grad.clone())];
    let mut history = Vec::new();
    let mut iterations = 0usize;
    let mut status = OptStatus::MaxIter;
    let cluster_radius = |v: &Array1<f64>| 0.5 * opts.stat_tol * (1.0 + v.dot(v).sqrt());

    while iterations < opts.max_iter {
        iterations += 1;
        // descent direction on the penalty function
        let mut dir = -h.dot(&cur.phi_grad);
        let mut slope = dir.dot(&cur.phi_grad);
        let gnorm = cur.phi_grad.dot(&cur.phi_grad).sqrt();
        let dnorm = dir.dot(&dir).sqrt();
        if !(slope < -1e-14 * gnorm * dnorm) {
            h = Array2::eye(dim);
            dir = -cur.phi_grad.clone();
            slope = -gnorm * gnorm;
        }

        // Weak Armijo backtracking, robust to kinks. Trial points where the
        // evaluator fails (e.g. an eigensolver breakdown deep in the
        // infeasible region) are treated like infinite penalty values and
        // rejected; only a failure at an accepted iterate propagates.
        let mut accepted: Option<(f64, Array1<f64>, PenaltyEval)> = None;
        if slope < 0.0 && cur.phi.is_finite() {
            let mut t = 1.0f64;
            for _ in 0..45 {
                let v_trial = &v + &dir.mapv(|d| d * t);
                if let Ok(trial) = eval_at(&v_trial, mu) {
                    if trial.phi.is_finite() && trial.phi <= cur.phi + 1e-4 * t * slope {
                        accepted = Some((t, v_trial, trial));
                        break;
                    }
                }
                t *= 0.5;
            }
        }

        match accepted {
            Some((t, v_new, new_eval)) => {
                // BFGS update on the penalty gradients
                let s = &v_new - &v;
                let yk = &new_eval.phi_grad - &cur.phi_grad;
                let sy = s.dot(&yk);
                let s_norm = s.dot(&s).sqrt();
                let y_norm = yk.dot(&yk).sqrt();
                if sy > 1e-10 * s_norm * y_norm {
                    let rho = 1.0 / sy;
                    let hy = h.dot(&yk);
                    let yhy = yk.dot(&hy);
                    // H ← (I - ρsyᵀ)H(I - ρysᵀ) + ρssᵀ
                    let mut new_h = h.clone();
                    for i in 0..dim {
                        for j in 0..dim {
                            new_h[[i, j]] += rho * rho * yhy * s[i] * s[j]
                                - rho * (s[i] * hy[j] + hy[i] * s[j])
                                + rho * s[i] * s[j];
                        }
                    }
                    h = new_h;
                }
                v = v_new;
                cur = new_eval;
                bundle.push((v.clone(), cur.phi_grad.clone()));
                if bundle.len() > bundle_cap {
                    bundle.remove(0);
                }
                history.push(HistoryEntry {
                    iteration: iterations,
                    objective: sign * cur.fobj,
                    violation: cur.viol,
                    step: t,
                });
                let stat = stationarity_measure_near(&bundle, &v, cluster_radius(&v));
                if stat <= opts.stat_tol {
                    status = if cur.viol <= opts.viol_tol {
                        OptStatus::Converged
                    } else {
                        OptStatus::InfeasibleStationary
                    };
                    break;
                }
            }
            None => {
                // line search failed: emphasize feasibility if violated,
                // otherwise report what we have
                if cur.viol > opts.viol_tol && mu > MU_MIN {
                    mu *= 0.1;
                    h = Array2::eye(dim);
                    bundle.clear();
                    cur = penalty_assemble(cur.raw.clone(), sign, mu);
                    bundle.push((v.clone(), cur.phi_grad.clone()));
                    continue;
                }
                let stat = stationarity_measure_near(&bundle, &v, cluster_radius(&v));
                status = if cur.viol > opts.viol_tol {
                    OptStatus::InfeasibleStationary
                } else if stat <= opts.stat_tol {
                    OptStatus::Converged
                } else {
                    OptStatus::MaxIter
                };
                break;
            }
        }
    }

    Ok(OptResult {
        v_opt: v.to_vec(),
        objective_final: sign * cur.fobj,
        constraint_violation: cur.viol,
        iterations,
        evaluations,
        history,
        status,
    })
}

/// Runs [`solve_nlp`] from every start (in parallel) and picks the feasible
/// result with the best objective; with no feasible result, the least
/// violating one is returned with status `InfeasibleStationary`.
pub fn multi_start<'a, F>(factory: F, starts: &[Array1<f64>], opts: &NlpOptions) -> Result<OptResult>
where
    F: Fn() -> NlpProblem<'a> + Sync,
{
    if starts.is_empty() {
        return Err(DampkitError::InvalidArgument(
            "multi_start requires at least one starting point".into(),
        ));
    }
    let results: Vec<Result<(Sense, OptResult)>> = starts
        .par_iter()
        .map(|s| {
            let p = factory();
            let r = solve_nlp(&p, s, opts)?;
            Ok((p.sense, r))
        })
        .collect();
    let mut runs = Vec::with_capacity(results.len());
    let mut sense = Sense::Minimize;
    for r in results {
        let (sns, run) = r?;
        sense = sns;
        runs.push(run);
    }
    let better = |a: &OptResult, b: &OptResult| -> bool {
        // true when a beats b
        match sense {
            Sense::Minimize => a.objective_final < b.objective_final,
            Sense::Maximize => a.objective_final > b.objective_final,
        }
    };
    let mut best_feasible: Option<OptResult> = None;
    let mut least_violating: Option<OptResult> = None;
    for run in runs {
        if run.constraint_violation <= opts.viol_tol {
            if best_feasible.as_ref().is_none_or(|b| better(&run, b)) {
                best_feasible = Some(run.clone());
            }
        }
        if least_violating
            .as_ref()
            .is_none_or(|b| run.constraint_violation < b.constraint_violation)
        {
            least_violating = Some(run);
        }
    }
    Ok(match best_feasible {
        Some(r) => r,
        None => {
            let mut r = least_violating.expect("at least one run");
            r.status = OptStatus::InfeasibleStationary;
            r
        }
    })
}
