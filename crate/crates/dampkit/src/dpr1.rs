//! Eigensolver for diagonal-plus-rank-one matrices `D + ρ u zᵀ`.
//!
//! The matrix is first rewritten in complex-symmetric form `D + ρ ẑ ẑᵀ` with
//! `S = diag(√(z_i/u_i))`, `ẑ = Su` (entries where `u_i = 0` or `z_i = 0` are
//! exact eigenvalues of `D` and are deflated beforehand). Eigenvalues are the
//! zeros of the secular function `f(λ) = 1 + ρ Σ z_i²/(d_i - λ)` and are
//! computed one at a time by a modified Rayleigh quotient iteration whose step
//! size `η` is halved whenever the iteration stops making progress, which
//! steers it to a single eigenvalue inside a cluster. Each converged
//! eigenvalue is removed by a rank-one deflation that keeps the matrix in
//! DPR1Csym form, stored implicitly as two vectors and a scalar.
//!
//! All bilinear forms are unconjugated (`xᵀx`, not `x*x`), matching the
//! complex-symmetric structure.

use ndarray::prelude::*;

use crate::error::{DampkitError, Result};
use crate::C64;

const ZERO: C64 = C64::new(0.0, 0.0);

/// General diagonal-plus-rank-one matrix `D + ρ u zᵀ` with `ρ > 0`.
#[derive(Debug, Clone)]
pub struct Dpr1 {
    pub d: Array1<C64>,
    pub u: Array1<C64>,
    pub z: Array1<C64>,
    pub rho: f64,
}

/// Complex-symmetric special case `D + ρ z zᵀ`.
///
/// `scaling` retains the diagonal of `S` from the DPR1 → DPR1Csym conversion
/// so eigenvectors can be mapped back (`W ← S⁻¹W`).
#[derive(Debug, Clone)]
pub struct Dpr1Csym {
    pub d: Array1<C64>,
    pub z: Array1<C64>,
    pub rho: f64,
    pub scaling: Option<Array1<C64>>,
}

/// Stopping and steering parameters of the MRQI loop.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Relative change `|δ/γ|` below which a shift is accepted.
    pub tol: f64,
    /// Iteration budget per step-size attempt before `η` is halved.
    pub max_inner: usize,
    /// Warm-start shifts, typically the eigenvalues of a nearby problem.
    pub initial_shifts: Option<Vec<C64>>,
    pub want_vectors: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-13,
            max_inner: 50,
            initial_shifts: None,
            want_vectors: false,
        }
    }
}

/// Smallest step size tried before giving up (2⁻²⁰).
const ETA_MIN: f64 = 1.0 / (1024.0 * 1024.0);

/// Computed spectrum of a [`Dpr1`].
#[derive(Debug, Clone)]
pub struct EigenSet {
    pub values: Array1<C64>,
    /// Eigenvectors of the original `D + ρ u zᵀ` (columns match `values`).
    pub vectors: Option<Array2<C64>>,
    /// Starting shift used per eigenvalue (bookkeeping for warm starts).
    pub shifts_used: Array1<C64>,
    /// Total MRQI iterations spent over all eigenvalues.
    pub inner_iterations: usize,
}

/// Rewrites a DPR1 matrix as a DPR1Csym with the same eigenvalues.
///
/// Returns the exact eigenpairs `(d_i, i)` for every index with `u_i = 0` or
/// `z_i = 0`; the remaining entries are compacted and transformed with
/// `S = diag(√(z_i/u_i))`, `ẑ = Su` (principal square root branch).
pub fn to_csym(a: &Dpr1) -> (Dpr1Csym, Vec<(C64, usize)>) {
    let mut exact = Vec::new();
    let mut d = Vec::new();
    let mut zhat = Vec::new();
    let mut scaling = Vec::new();
    for i in 0..a.d.len() {
        if a.u[i] == ZERO || a.z[i] == ZERO {
            exact.push((a.d[i], i));
        } else {
            let s = (a.z[i] / a.u[i]).sqrt();
            d.push(a.d[i]);
            zhat.push(s * a.u[i]);
            scaling.push(s);
        }
    }
    (
        Dpr1Csym {
            d: Array1::from(d),
            z: Array1::from(zhat),
            rho: a.rho,
            scaling: Some(Array1::from(scaling)),
        },
        exact,
    )
}

/// Secular function `f(λ) = 1 + ρ Σ z_i²/(d_i - λ)`; its zeros are the
/// eigenvalues of the DPR1Csym matrix.
pub fn secular_eval(a: &Dpr1Csym, lambda: C64) -> Result<C64> {
    let mut sum = ZERO;
    for i in 0..a.d.len() {
        let den = a.d[i] - lambda;
        if den == ZERO {
            return Err(DampkitError::Pole { index: i });
        }
        sum += a.z[i] * a.z[i] / den;
    }
    Ok(C64::new(1.0, 0.0) + a.rho * sum)
}

/// Eigenvector `(D - λI)⁻¹z` of the DPR1Csym matrix, unit 2-norm.
pub fn eigenvector(a: &Dpr1Csym, lambda: C64) -> Result<Array1<C64>> {
    let mut x = Array1::zeros(a.d.len());
    for i in 0..a.d.len() {
        let den = a.d[i] - lambda;
        if den == ZERO {
            return Err(DampkitError::Pole { index: i });
        }
        x[i] = a.z[i] / den;
    }
    let norm = x.iter().map(|c: &C64| c.norm_sqr()).sum::<f64>().sqrt();
    x.mapv_inplace(|c| c / norm);
    Ok(x)
}

/// Eigenvector for an eigenvalue that coincides with `d_k` to working
/// precision (possible when `z_k` is tiny): first-order perturbation gives
/// `w = e_k + ρ z_k Σ_{i≠k} z_i/(d_k - d_i) e_i`, accurate to O(z_k²).
pub(crate) fn pole_eigenvector(a: &Dpr1Csym, k: usize) -> Array1<C64> {
    let m = a.d.len();
    let mut w = Array1::<C64>::zeros(m);
    w[k] = C64::new(1.0, 0.0);
    let dk = a.d[k];
    for i in 0..m {
        if i == k {
            continue;
        }
        let gap = dk - a.d[i];
        if gap != ZERO {
            w[i] = a.rho * a.z[k] * a.z[i] / gap;
        }
    }
    let norm = w.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    w.mapv_inplace(|c| c / norm);
    w
}

/// Deflates an accepted eigenvalue `λ` computed via shift index `s`, producing
/// the (m-1)-dimensional DPR1Csym with the remaining spectrum:
/// `(z_d)_i = z_i √((d_i - d_s)/(d_i - λ))`.
pub fn deflate(a: &Dpr1Csym, lambda: C64, s: usize) -> Result<Dpr1Csym> {
    let m = a.d.len();
    let ds = a.d[s];
    let mut d = Vec::with_capacity(m - 1);
    let mut z = Vec::with_capacity(m - 1);
    for i in 0..m {
        if i == s {
            continue;
        }
        let den = a.d[i] - lambda;
        if den == ZERO {
            return Err(DampkitError::Pole { index: i });
        }
        d.push(a.d[i]);
        z.push(a.z[i] * ((a.d[i] - ds) / den).sqrt());
    }
    Ok(Dpr1Csym {
        d: Array1::from(d),
        z: Array1::from(z),
        rho: a.rho,
        scaling: None,
    })
}

/// Outcome of one MRQI run: accumulated shift correction and iteration count.
struct MrqiRun {
    gamma: C64,
    iterations: usize,
}

/// Modified Rayleigh quotient iteration for one eigenvalue of
/// `diag(d) + ρ z zᵀ`, started from shift `d[s] + gamma0`.
///
/// Repeats `δ ← η xᵀ(D̂ + ρzzᵀ)x / xᵀx`, `γ ← γ + δ`, `x ← (D̂ - δI)⁻¹z`, where
/// `D̂` is `D` shifted by the accumulated `d[s] + γ`. A shift is accepted once
/// the unscaled relative correction `|δ| / (η |γ|)` drops below `tol`. When
/// the relative change stops shrinking (or the per-attempt budget is spent),
/// the attempt step size is halved and the iteration restarts cold from
/// `x = e_s`, `γ = 0`; within an attempt, η is allowed to grow back toward 1
/// while the iteration keeps making progress, so damped steering in the
/// wandering phase still ends with full Rayleigh steps near the eigenvalue.
fn mrqi(
    d: &[C64],
    z: &[C64],
    rho: f64,
    s: usize,
    gamma0: C64,
    tol: f64,
    max_inner: usize,
) -> Option<MrqiRun> {
    let m = d.len();
    let ds = d[s];
    let dshift: Vec<C64> = d.iter().map(|&di| di - ds).collect();
    let mut x: Vec<C64> = vec![ZERO; m];
    let mut warm_pending = gamma0 != ZERO;
    let mut attempt_eta = 1.0f64;
    let mut total = 0usize;
    loop {
        // (re)initialize the attempt
        let mut gamma;
        if warm_pending {
            warm_pending = false;
            let mut g0 = gamma0;
            if dshift.iter().any(|&dsh| dsh == g0) {
                g0 += C64::new(1e-13 * (1.0 + g0.norm()), 0.0);
            }
            for i in 0..m {
                x[i] = z[i] / (dshift[i] - g0);
            }
            gamma = g0;
        } else {
            x.iter_mut().for_each(|xi| *xi = ZERO);
            x[s] = C64::new(1.0, 0.0);
            gamma = ZERO;
        }
        let mut eta = attempt_eta;
        let mut prev_rel = f64::INFINITY;
        let mut rel_history: Vec<f64> = Vec::with_capacity(max_inner + 1);
        let mut attempt_iters = 0usize;
        let mut accepted = None;
        loop {
            // Rayleigh quotient with unconjugated bilinear forms
            let mut den = ZERO;
            let mut xdx = ZERO;
            let mut zx = ZERO;
            for i in 0..m {
                let xi = x[i];
                let xx = xi * xi;
                den += xx;
                xdx += xx * (dshift[i] - gamma);
                zx += z[i] * xi;
            }
            let delta = C64::new(eta, 0.0) * (xdx + rho * zx * zx) / den;
            if !delta.is_finite() {
                break;
            }
            gamma += delta;
            for i in 0..m {
                x[i] = z[i] / (dshift[i] - gamma);
            }
            total += 1;
            attempt_iters += 1;
            let dn = delta.norm();
            let gn = gamma.norm();
            if dn == 0.0 || (gn > 0.0 && dn < tol * eta * gn) {
                accepted = Some(gamma);
                break;
            }
            let rel = if gn > 0.0 { dn / gn } else { f64::INFINITY };
            if rel < 0.25 * prev_rel {
                eta = (2.0 * eta).min(1.0);
            }
            prev_rel = rel;
            let k = rel_history.len();
            if attempt_iters > max_inner || (k >= 5 && rel > 0.9 * rel_history[k - 5]) {
                break;
            }
            rel_history.push(rel);
        }
        if let Some(g) = accepted {
            return Some(MrqiRun {
                gamma: g,
                iterations: total,
            });
        }
        attempt_eta *= 0.5;
        if attempt_eta < ETA_MIN {
            return None;
        }
    }
}

/// Computes all eigenvalues (and optionally eigenvectors) of a DPR1 matrix.
pub fn solve(a: &Dpr1, opts: &SolveOptions) -> Result<EigenSet> {
    let m_full = a.d.len();
    let (csym, exact) = to_csym(a);
    let kept: Vec<usize> = (0..m_full)
        .filter(|&i| a.u[i] != ZERO && a.z[i] != ZERO)
        .collect();
    let m_red = csym.d.len();

    let mut values: Vec<C64> = Vec::with_capacity(m_full);
    let mut shifts: Vec<C64> = Vec::with_capacity(m_full);
    for &(val, _) in &exact {
        values.push(val);
        shifts.push(val);
    }

    let mut work_d: Vec<C64> = csym.d.to_vec();
    let mut work_z: Vec<C64> = csym.z.to_vec();
    let warm = opts.initial_shifts.as_deref().unwrap_or(&[]);
    let mut inner_total = 0usize;

    for l in 0..m_red {
        let mlen = work_d.len();
        if mlen == 1 {
            let lam = work_d[0] + csym.rho * work_z[0] * work_z[0];
            values.push(lam);
            shifts.push(work_d[0]);
            work_d.clear();
            work_z.clear();
            break;
        }
        // shift selection: warm shift if available, else largest |d_i|
        let (s, gamma0, shift_rec) = if let Some(&sigma) = warm.get(l) {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (i, &di) in work_d.iter().enumerate() {
                let dist = (di - sigma).norm();
                if dist < best_d {
                    best_d = dist;
                    best = i;
                }
            }
            (best, sigma - work_d[best], sigma)
        } else {
            let mut best = 0usize;
            let mut best_mag = -1.0;
            for (i, &di) in work_d.iter().enumerate() {
                let mag = di.norm();
                if mag > best_mag {
                    best_mag = mag;
                    best = i;
                }
            }
            (best, ZERO, work_d[best])
        };

        let run = mrqi(
            &work_d,
            &work_z,
            csym.rho,
            s,
            gamma0,
            opts.tol,
            opts.max_inner,
        )
        .ok_or_else(|| DampkitError::NonConvergence {
            failed_at: l,
            size: m_red,
            partial: values.clone(),
        })?;
        inner_total += run.iterations;
        let lambda = work_d[s] + run.gamma;
        values.push(lambda);
        shifts.push(shift_rec);

        // deflate in place: new z_i = z_i sqrt((d_i - d_s)/(d_i - lambda))
        let ds = work_d[s];
        for i in 0..mlen {
            if i == s {
                continue;
            }
            let den = work_d[i] - lambda;
            if den == ZERO {
                return Err(DampkitError::Pole { index: i });
            }
            work_z[i] *= ((work_d[i] - ds) / den).sqrt();
        }
        work_d.swap_remove(s);
        work_z.swap_remove(s);
    }

    let vectors = if opts.want_vectors {
        Some(compute_vectors(a, &csym, &kept, &exact, &values)?)
    } else {
        None
    };

    Ok(EigenSet {
        values: Array1::from(values),
        vectors,
        shifts_used: Array1::from(shifts),
        inner_iterations: inner_total,
    })
}

/// Eigenvectors of the original DPR1, from the *undeflated* DPR1Csym via the
/// eigenvector formula and the back-map `W ← S⁻¹W`. Exact-deflated indices get
/// their vectors from the full matrix directly.
fn compute_vectors(
    a: &Dpr1,
    csym: &Dpr1Csym,
    kept: &[usize],
    exact: &[(C64, usize)],
    values: &[C64],
) -> Result<Array2<C64>> {
    let m_full = a.d.len();
    let scaling = csym.scaling.as_ref().expect("conversion keeps scaling");
    let mut w = Array2::<C64>::zeros((m_full, m_full));
    let n_exact = exact.len();
    for (col, &(lam, idx)) in exact.iter().enumerate() {
        let v = exact_pair_vector(a, lam, idx);
        w.column_mut(col).assign(&v);
    }
    for (col, &lam) in values.iter().enumerate().skip(n_exact) {
        let x = match eigenvector(csym, lam) {
            Ok(x) => x,
            // converged shift landed exactly on a diagonal entry
            Err(DampkitError::Pole { index }) => pole_eigenvector(csym, index),
            Err(e) => return Err(e),
        };
        let mut full = Array1::<C64>::zeros(m_full);
        for (i, &ki) in kept.iter().enumerate() {
            full[ki] = x[i] / scaling[i];
        }
        let norm = full.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        full.mapv_inplace(|c| c / norm);
        w.column_mut(col).assign(&full);
    }
    Ok(w)
}

/// Right eigenvector of `D + ρ u zᵀ` for the exact eigenvalue `d_idx`
/// (present because `u_idx = 0` or `z_idx = 0`).
pub(crate) fn exact_pair_vector(a: &Dpr1, lam: C64, idx: usize) -> Array1<C64> {
    let m = a.d.len();
    let mut w = Array1::<C64>::zeros(m);
    if a.z[idx] == ZERO {
        // column idx of the rank-one part vanishes: canonical vector
        w[idx] = C64::new(1.0, 0.0);
        return w;
    }
    // u_idx = 0: solve the remaining rows with z^T w = 1
    let mut sum = ZERO;
    for k in 0..m {
        if k == idx {
            continue;
        }
        let den = lam - a.d[k];
        if den == ZERO {
            // repeated diagonal entry; canonical vector is the honest fallback
            let mut e = Array1::<C64>::zeros(m);
            e[idx] = C64::new(1.0, 0.0);
            return e;
        }
        w[k] = a.rho * a.u[k] / den;
        sum += a.z[k] * w[k];
    }
    w[idx] = (C64::new(1.0, 0.0) - sum) / a.z[idx];
    let norm = w.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    w.mapv_inplace(|c| c / norm);
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn two_by_two() -> Dpr1 {
        Dpr1 {
            d: ndarray::array![c(1.0, 0.0), c(2.0, 0.0)],
            u: ndarray::array![c(1.0, 0.0), c(1.0, 0.0)],
            z: ndarray::array![c(1.0, 0.0), c(1.0, 0.0)],
            rho: 1.0,
        }
    }

    fn random_dpr1(rng: &mut ChaCha8Rng, m: usize) -> Dpr1 {
        let mut cplx = |spread: f64| c(spread * rng.random::<f64>(), spread * (rng.random::<f64>() - 0.5));
        let d = Array1::from_iter((0..m).map(|i| c(i as f64, 0.0) + cplx(2.0)));
        let u = Array1::from_iter((0..m).map(|_| cplx(1.0) + c(0.3, 0.0)));
        let z = Array1::from_iter((0..m).map(|_| cplx(1.0) + c(0.3, 0.0)));
        Dpr1 { d, u, z, rho: 0.5 + rng.random::<f64>() }
    }

    #[test]
    fn conversion_preserves_characteristic_polynomial() {
        let a = Dpr1 {
            d: ndarray::array![c(1.0, 0.0), c(2.0, 0.0)],
            u: ndarray::array![c(1.0, 0.0), c(4.0, 0.0)],
            z: ndarray::array![c(4.0, 0.0), c(1.0, 0.0)],
            rho: 1.0,
        };
        let (csym, exact) = to_csym(&a);
        assert!(exact.is_empty());
        let s = csym.scaling.as_ref().unwrap();
        assert_abs_diff_eq!(s[0].re, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s[1].re, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(csym.z[0].re, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(csym.z[1].re, 2.0, epsilon = 1e-15);
        // both have characteristic polynomial λ² - 11λ + 14
        for (d, u, z) in [(&a.d, &a.u, &a.z), (&csym.d, &csym.z, &csym.z)] {
            let tr = d[0] + d[1] + u[0] * z[0] + u[1] * z[1];
            let det = (d[0] + u[0] * z[0]) * (d[1] + u[1] * z[1]) - (u[0] * z[1]) * (u[1] * z[0]);
            assert_abs_diff_eq!(tr.re, 11.0, epsilon = 1e-12);
            assert_abs_diff_eq!(det.re, 14.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn conversion_with_equal_vectors_is_identity() {
        let a = two_by_two();
        let (csym, exact) = to_csym(&a);
        assert!(exact.is_empty());
        let s = csym.scaling.as_ref().unwrap();
        assert!(s.iter().all(|&si| (si - c(1.0, 0.0)).norm() < 1e-15));
        assert_eq!(csym.z, a.z);
    }

    #[test]
    fn conversion_deflates_zero_entries() {
        let a = Dpr1 {
            d: ndarray::array![c(1.0, 0.0), c(2.0, 0.0), c(3.0, 0.0)],
            u: ndarray::array![c(1.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)],
            z: ndarray::array![c(1.0, 0.0), c(1.0, 0.0), c(1.0, 0.0)],
            rho: 1.0,
        };
        let (csym, exact) = to_csym(&a);
        assert_eq!(exact, vec![(c(2.0, 0.0), 1)]);
        assert_eq!(csym.d.len(), 2);
    }

    #[test]
    fn secular_values() {
        let (csym, _) = to_csym(&two_by_two());
        let f0 = secular_eval(&csym, c(0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(f0.re, 2.5, epsilon = 1e-15);
        assert_abs_diff_eq!(f0.im, 0.0, epsilon = 1e-15);
        let root = c((5.0 - 5.0f64.sqrt()) / 2.0, 0.0);
        assert!(secular_eval(&csym, root).unwrap().norm() <= 1e-14);
        assert!(matches!(
            secular_eval(&csym, c(1.0, 0.0)),
            Err(DampkitError::Pole { index: 0 })
        ));
        // rho → 0 limit
        let tiny = Dpr1Csym { rho: 1e-300, ..csym.clone() };
        let f = secular_eval(&tiny, c(0.3, 0.7)).unwrap();
        assert_abs_diff_eq!(f.re, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn eigenvector_matches_direction_and_residual() {
        let (csym, _) = to_csym(&two_by_two());
        let lam = c((5.0 + 5.0f64.sqrt()) / 2.0, 0.0);
        let x = eigenvector(&csym, lam).unwrap();
        let expected = ndarray::array![
            c(1.0, 0.0) / (c(1.0, 0.0) - lam),
            c(1.0, 0.0) / (c(2.0, 0.0) - lam)
        ];
        let scale = x[0] / expected[0];
        assert!((x[1] - scale * expected[1]).norm() <= 1e-14);
        // residual against the dense matrix
        let a = oracle::dense_dpr1(csym.d.view(), csym.z.view(), csym.z.view(), csym.rho);
        let ax = a.dot(&x);
        let resid = (&ax - &x.mapv(|xi| lam * xi))
            .iter()
            .map(|c| c.norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(resid <= 1e-12, "residual {resid}");
    }

    #[test]
    fn deflation_closed_form() {
        let (csym, _) = to_csym(&two_by_two());
        let lam = c((5.0 + 5.0f64.sqrt()) / 2.0, 0.0);
        let defl = deflate(&csym, lam, 1).unwrap();
        assert_eq!(defl.d.len(), 1);
        let remaining = defl.d[0] + defl.rho * defl.z[0] * defl.z[0];
        assert_abs_diff_eq!(remaining.re, (5.0 - 5.0f64.sqrt()) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(remaining.im, 0.0, epsilon = 1e-12);

        // deflating a 1×1 yields the empty matrix
        let single = Dpr1Csym {
            d: ndarray::array![c(4.0, 0.0)],
            z: ndarray::array![c(2.0, 0.0)],
            rho: 1.0,
            scaling: None,
        };
        let empty = deflate(&single, c(8.0, 0.0), 0).unwrap();
        assert_eq!(empty.d.len(), 0);
    }

    #[test]
    fn deflation_preserves_remaining_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_dpr1(&mut rng, 8);
        let (csym, _) = to_csym(&a);
        let dense = oracle::dense_dpr1(csym.d.view(), csym.z.view(), csym.z.view(), csym.rho);
        let full: Vec<C64> = oracle::dense_complex_eigenvalues(&dense).unwrap().to_vec();
        // take one eigenvalue, deflate with the nearest shift index
        let lam = full[0];
        let s = (0..8)
            .min_by(|&i, &j| {
                (csym.d[i] - lam)
                    .norm()
                    .partial_cmp(&(csym.d[j] - lam).norm())
                    .unwrap()
            })
            .unwrap();
        let defl = deflate(&csym, lam, s).unwrap();
        let dense_d = oracle::dense_dpr1(defl.d.view(), defl.z.view(), defl.z.view(), defl.rho);
        let rest = oracle::dense_complex_eigenvalues(&dense_d).unwrap();
        let mut rebuilt = rest.to_vec();
        rebuilt.push(lam);
        let err = oracle::greedy_match_max_relative_error(&rebuilt, &full);
        assert!(err <= 1e-9, "deflation spectrum error {err}");
    }

    #[test]
    fn solve_two_by_two_closed_form() {
        let res = solve(&two_by_two(), &SolveOptions::default()).unwrap();
        let mut got: Vec<f64> = res.values.iter().map(|v| v.re).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_abs_diff_eq!(got[0], (5.0 - 5.0f64.sqrt()) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(got[1], (5.0 + 5.0f64.sqrt()) / 2.0, epsilon = 1e-12);
        assert!(res.values.iter().all(|v| v.im.abs() < 1e-12));
    }

    #[test]
    fn solve_one_by_one() {
        let a = Dpr1 {
            d: ndarray::array![c(3.0, 0.0)],
            u: ndarray::array![c(2.0, 0.0)],
            z: ndarray::array![c(1.0, 0.0)],
            rho: 2.0,
        };
        let res = solve(&a, &SolveOptions::default()).unwrap();
        assert_abs_diff_eq!(res.values[0].re, 7.0, epsilon = 1e-13);
    }

    #[test]
    fn solve_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = random_dpr1(&mut rng, 12);
        let res = solve(&a, &SolveOptions::default()).unwrap();
        let dense = oracle::dense_dpr1(a.d.view(), a.u.view(), a.z.view(), a.rho);
        let reference = oracle::dense_complex_eigenvalues(&dense).unwrap();
        let err = oracle::greedy_match_max_relative_error(&res.values.to_vec(), &reference.to_vec());
        assert!(err <= 1e-10, "oracle mismatch {err}");
    }

    #[test]
    fn solve_with_exact_deflation_and_vectors() {
        let a = Dpr1 {
            d: ndarray::array![c(1.0, 0.5), c(2.0, -0.3), c(3.0, 0.1)],
            u: ndarray::array![c(1.0, 0.0), c(0.0, 0.0), c(1.0, 0.2)],
            z: ndarray::array![c(1.0, -0.1), c(1.0, 0.0), c(1.0, 0.0)],
            rho: 1.0,
        };
        let res = solve(
            &a,
            &SolveOptions {
                want_vectors: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(res.values.iter().any(|&v| (v - c(2.0, -0.3)).norm() < 1e-14));
        let dense = oracle::dense_dpr1(a.d.view(), a.u.view(), a.z.view(), a.rho);
        let w = res.vectors.as_ref().unwrap();
        let scale = a.d.iter().map(|d| d.norm()).fold(0.0, f64::max)
            + a.rho * a.z.iter().map(|z| z.norm_sqr()).sum::<f64>();
        for (col, &lam) in res.values.iter().enumerate() {
            let wc = w.column(col);
            let awc = dense.dot(&wc);
            let resid = (&awc - &wc.mapv(|x| lam * x))
                .iter()
                .map(|c| c.norm_sqr())
                .sum::<f64>()
                .sqrt();
            assert!(resid <= 1e-10 * scale, "eigpair residual {resid}");
        }
    }

    #[test]
    fn accepted_values_satisfy_secular_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let a = random_dpr1(&mut rng, 10);
            let (csym, _) = to_csym(&a);
            let res = solve(&a, &SolveOptions::default()).unwrap();
            let znorm2 = csym.z.iter().map(|z| z.norm_sqr()).sum::<f64>();
            for &lam in res.values.iter() {
                let sep = csym.d.iter().map(|&d| (d - lam).norm()).fold(f64::INFINITY, f64::min);
                let bound = 1e-8 * (1.0 + csym.rho * znorm2 / sep);
                let f = secular_eval(&csym, lam).unwrap().norm();
                assert!(f <= bound, "secular residual {f} > bound {bound}");
            }
        }
    }

    #[test]
    fn warm_start_converges_in_few_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let a = random_dpr1(&mut rng, 10);
        let cold = solve(&a, &SolveOptions::default()).unwrap();
        let shifts: Vec<C64> = cold
            .values
            .iter()
            .map(|&v| v * (1.0 + 1e-8))
            .collect();
        let warm = solve(
            &a,
            &SolveOptions {
                initial_shifts: Some(shifts),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(
            warm.inner_iterations <= 3 * a.d.len(),
            "warm start took {} iterations",
            warm.inner_iterations
        );
        let err = oracle::greedy_match_max_relative_error(&warm.values.to_vec(), &cold.values.to_vec());
        assert!(err <= 1e-9);
    }

    #[test]
    fn clustered_diagonal_still_resolved() {
        // two diagonal entries 1e-6 apart
        let d = ndarray::array![
            c(1.0, 0.3),
            c(1.0 + 1e-6, 0.3),
            c(2.5, -0.4),
            c(4.0, 0.8),
        ];
        let u = ndarray::array![c(0.9, 0.1), c(1.1, -0.2), c(0.7, 0.4), c(1.0, 0.0)];
        let z = ndarray::array![c(1.0, 0.2), c(0.8, -0.1), c(1.2, 0.1), c(0.9, -0.3)];
        let a = Dpr1 { d, u, z, rho: 0.8 };
        let res = solve(&a, &SolveOptions::default()).unwrap();
        let dense = oracle::dense_dpr1(a.d.view(), a.u.view(), a.z.view(), a.rho);
        let reference = oracle::dense_complex_eigenvalues(&dense).unwrap();
        let err = oracle::greedy_match_max_relative_error(&res.values.to_vec(), &reference.to_vec());
        assert!(err <= 1e-6, "clustered error {err}");
    }
}
