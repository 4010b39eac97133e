//! Dense reference solvers used for validation and benchmark comparison.
//!
//! The primary oracle diagonalizes the explicit 2n×2n modal linearization
//! `A(v) = [[0, Ω], [-Ω, -(αΩ + ΦᵀG diag(v) GᵀΦ)]]` with a dense eigensolver.
//! A companion-form oracle that bypasses the modal transformation entirely is
//! also provided so the two routes can cross-check each other.

use ndarray::prelude::*;
use ndarray_linalg::{Cholesky, EigVals, UPLO};

use crate::error::{DampkitError, Result};
use crate::modal::ModalForm;
use crate::system::{assemble_damping, SystemMatrices, Viscosities};
use crate::C64;

/// Recovers `ΦᵀG` from the stored factors (`Ĝ = ΨU`, odd block rows).
fn modal_damping_geometry(mf: &ModalForm) -> Array2<f64> {
    let n = mf.n();
    let r = mf.num_dampers();
    let mut pg = Array2::zeros((n, r));
    for j in 0..r {
        let col = mf.u.column(j);
        let ghat = mf.apply_psi(col);
        for i in 0..n {
            pg[[i, j]] = ghat[2 * i + 1].re;
        }
    }
    pg
}

/// Explicit real 2n×2n linearization of the QEP in modal coordinates.
pub fn dense_linearization(mf: &ModalForm, v: &Viscosities) -> Array2<f64> {
    let n = mf.n();
    let r = mf.num_dampers();
    let pg = modal_damping_geometry(mf);
    let mut a = Array2::zeros((2 * n, 2 * n));
    for i in 0..n {
        a[[i, n + i]] = mf.omega[i];
        a[[n + i, i]] = -mf.omega[i];
        a[[n + i, n + i]] = -mf.alpha * mf.omega[i];
    }
    for j in 0..r {
        let vj = v.0[j];
        if vj == 0.0 {
            continue;
        }
        for row in 0..n {
            let pr = pg[[row, j]];
            if pr == 0.0 {
                continue;
            }
            for col in 0..n {
                a[[n + row, n + col]] -= vj * pr * pg[[col, j]];
            }
        }
    }
    a
}

/// All 2n QEP eigenvalues from a dense eigendecomposition of the
/// linearization. O(n³); this is the baseline the fast path is measured
/// against.
pub fn dense_qep_eigenvalues(mf: &ModalForm, v: &Viscosities) -> Result<Array1<C64>> {
    let a = dense_linearization(mf, v);
    Ok(a.eigvals()?)
}

/// Companion-form oracle `[[-M⁻¹C, -M⁻¹K], [I, 0]]`, entirely independent of
/// the modal transformation. Intended for small cross-checks only.
pub fn companion_qep_eigenvalues(sys: &SystemMatrices, v: &Viscosities) -> Result<Array1<C64>> {
    let n = sys.n();
    let c = assemble_damping(sys, v, None)?;
    let l = sys
        .mass()
        .cholesky(UPLO::Lower)
        .map_err(|_| DampkitError::NotPositiveDefinite("M".into()))?;
    let solve_m = |b: &Array2<f64>| {
        crate::modal::solve_upper_transpose_many(&l, &crate::modal::solve_lower_many(&l, b))
    };
    let mc = solve_m(&c);
    let mk = solve_m(sys.stiffness());
    let mut a = Array2::zeros((2 * n, 2 * n));
    for i in 0..n {
        for j in 0..n {
            a[[i, j]] = -mc[[i, j]];
            a[[i, n + j]] = -mk[[i, j]];
        }
        a[[n + i, i]] = 1.0;
    }
    Ok(a.eigvals()?)
}

/// Eigenvalues of a dense complex matrix (used as the DPR1 oracle).
pub fn dense_complex_eigenvalues(a: &Array2<C64>) -> Result<Array1<C64>> {
    Ok(a.eigvals()?)
}

/// Dense `D + ρ u zᵀ` for oracle comparisons.
pub fn dense_dpr1(d: ArrayView1<C64>, u: ArrayView1<C64>, z: ArrayView1<C64>, rho: f64) -> Array2<C64> {
    let m = d.len();
    let mut a = Array2::zeros((m, m));
    for i in 0..m {
        a[[i, i]] = d[i];
        for j in 0..m {
            a[[i, j]] += rho * u[i] * z[j];
        }
    }
    a
}

/// Pairs two computed spectra greedily: repeatedly match the globally closest
/// pair of values across the two sets and remove it.
pub fn greedy_match(a: &[C64], b: &[C64]) -> Result<Vec<(usize, usize)>> {
    if a.len() != b.len() {
        return Err(DampkitError::MatchingFailed(format!(
            "spectra have different sizes: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let m = a.len();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            pairs.push(((a[i] - b[j]).norm_sqr(), i, j));
        }
    }
    pairs.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_a = vec![false; m];
    let mut used_b = vec![false; m];
    let mut matches = Vec::with_capacity(m);
    for (_, i, j) in pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            matches.push((i, j));
            if matches.len() == m {
                break;
            }
        }
    }
    Ok(matches)
}

/// Componentwise relative error of a matched pair:
/// `max{|δ_Re|, |δ_Im|}` with each part measured relative to the reference.
///
/// A part that is negligible compared to the eigenvalue modulus (e.g. the
/// exactly-zero imaginary part of an overdamped real eigenvalue) is measured
/// against `1e-6 |λ|` instead, so round-off noise in a vanishing part does
/// not register as an O(1) relative error.
pub fn pair_relative_error(computed: C64, reference: C64) -> f64 {
    let scale = reference.norm();
    if scale == 0.0 {
        return (computed - reference).norm();
    }
    let floor = 1e-6 * scale;
    let part = |x: f64, r: f64| (x - r).abs() / r.abs().max(floor);
    part(computed.re, reference.re).max(part(computed.im, reference.im))
}

/// Per-pair relative errors after greedy matching; second argument is the
/// reference spectrum.
pub fn greedy_match_errors(computed: &[C64], reference: &[C64]) -> Result<Vec<f64>> {
    let matches = greedy_match(computed, reference)?;
    Ok(matches
        .into_iter()
        .map(|(i, j)| pair_relative_error(computed[i], reference[j]))
        .collect())
}

/// Worst matched relative error (infinity on size mismatch).
pub fn greedy_match_max_relative_error(computed: &[C64], reference: &[C64]) -> f64 {
    match greedy_match_errors(computed, reference) {
        Ok(errs) => errs.into_iter().fold(0.0, f64::max),
        Err(_) => f64::INFINITY,
    }
}

/// Median of a set of error measurements.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = s.len();
    if m % 2 == 1 {
        s[m / 2]
    } else {
        0.5 * (s[m / 2 - 1] + s[m / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modal::build_modal_form;
    use crate::system::{build_oscillator, MassProfile, OscillatorSpec};

    #[test]
    fn linearization_and_companion_agree() {
        let spec = OscillatorSpec {
            n: 4,
            mass_profile: MassProfile::LinearRamp { lo: 1.0, hi: 2.0 },
            stiffness: 3.0,
            dampers: (1, 2, 4),
        };
        let sys = build_oscillator(&spec, 0.1).unwrap();
        let mf = build_modal_form(&sys).unwrap();
        let v = Viscosities::from_slice(&[0.4, 0.9, 0.2]);
        let a = dense_qep_eigenvalues(&mf, &v).unwrap();
        let b = companion_qep_eigenvalues(&sys, &v).unwrap();
        let err = greedy_match_max_relative_error(&a.to_vec(), &b.to_vec());
        assert!(err <= 1e-10, "oracle routes disagree: {err}");
    }

    #[test]
    fn greedy_matching_is_exact_on_permutations() {
        let a = vec![C64::new(1.0, 2.0), C64::new(-3.0, 0.5), C64::new(0.0, -1.0)];
        let b = vec![a[2], a[0], a[1]];
        let matches = greedy_match(&a, &b).unwrap();
        for (i, j) in matches {
            assert_eq!(a[i], b[j]);
        }
        assert!(greedy_match(&a, &b[..2].to_vec()).is_err());
    }

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
