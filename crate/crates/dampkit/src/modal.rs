//! Offline modal reduction of the QEP.
//!
//! One O(n³) pass produces everything that does not depend on the viscosities:
//! the simultaneous diagonalization `ΦᵀMΦ = I`, `ΦᵀKΦ = Ω²`, the linearization
//! in modal coordinates, the perfect-shuffle reordering into 2×2 blocks
//! `D_i = [[0, ω_i], [-ω_i, -αω_i]]`, the per-block diagonalizers `Ψ_i`, and
//! the factors `D`, `U`, `Z` of the shifted eigenvalue problem
//! `Ã(v) = D - Σ v_j u_j z_jᵀ`, whose spectrum equals the QEP spectrum for
//! every `v`.

use ndarray::prelude::*;
use ndarray_linalg::{Cholesky, Eigh, UPLO};
use serde::{Deserialize, Serialize};

use crate::error::{DampkitError, Result};
use crate::system::SystemMatrices;
use crate::C64;

/// A 2×2 complex block together with its inverse, stored row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Block2 {
    pub m: [C64; 4],
    pub inv: [C64; 4],
}

impl Block2 {
    fn apply(&self, x0: C64, x1: C64) -> (C64, C64) {
        (self.m[0] * x0 + self.m[1] * x1, self.m[2] * x0 + self.m[3] * x1)
    }

    fn apply_inv(&self, x0: C64, x1: C64) -> (C64, C64) {
        (
            self.inv[0] * x0 + self.inv[1] * x1,
            self.inv[2] * x0 + self.inv[3] * x1,
        )
    }

    fn apply_transpose(&self, x0: C64, x1: C64) -> (C64, C64) {
        (self.m[0] * x0 + self.m[2] * x1, self.m[1] * x0 + self.m[3] * x1)
    }
}

/// Precomputed v-independent factors of the modal linearization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModalForm {
    /// Simultaneous diagonalizer: `ΦᵀMΦ = I`, `ΦᵀKΦ = Ω²`.
    pub phi: Array2<f64>,
    /// Undamped frequencies, strictly descending.
    pub omega: Array1<f64>,
    /// Per-block diagonalizers `Ψ_i` (block i covers rows `2i, 2i+1` of the
    /// shuffled coordinates).
    pub psi: Vec<Block2>,
    /// Perfect shuffle as gather indices: `shuffled[k] = stacked[shuffle[k]]`.
    pub shuffle: Vec<usize>,
    /// Diagonal of the shifted linearization (length 2n).
    pub d: Array1<C64>,
    /// Left rank-one factors, one column per damper (2n × r).
    pub u: Array2<C64>,
    /// Right rank-one factors (2n × r).
    pub z: Array2<C64>,
    /// Internal damping coefficient, copied from the system.
    pub alpha: f64,
}

/// Perfect shuffle permutation as gather indices of length `2n`:
/// applying it to a stacked vector `[x; y]` interleaves the halves.
pub fn perfect_shuffle(n: usize) -> Vec<usize> {
    let mut p = Vec::with_capacity(2 * n);
    for i in 0..n {
        p.push(i);
        p.push(n + i);
    }
    p
}

/// `out[k] = x[shuffle[k]]`: stacked → interleaved.
pub fn interleave(x: ArrayView1<C64>) -> Array1<C64> {
    let n = x.len() / 2;
    let mut out = Array1::zeros(2 * n);
    for i in 0..n {
        out[2 * i] = x[i];
        out[2 * i + 1] = x[n + i];
    }
    out
}

/// Inverse of [`interleave`]: interleaved → stacked.
pub fn deinterleave(x: ArrayView1<C64>) -> Array1<C64> {
    let n = x.len() / 2;
    let mut out = Array1::zeros(2 * n);
    for i in 0..n {
        out[i] = x[2 * i];
        out[n + i] = x[2 * i + 1];
    }
    out
}

/// Simultaneously diagonalizes the SPD pencil `(M, K)`:
/// Cholesky `M = LLᵀ`, symmetric eigendecomposition of `L⁻¹KL⁻ᵀ`, and
/// back-transform `Φ = L⁻ᵀQ`. Frequencies are returned strictly descending;
/// a repeated frequency is an error (the downstream rank-one peeling assumes
/// distinct diagonal entries).
pub fn simultaneous_diagonalize(sys: &SystemMatrices) -> Result<(Array2<f64>, Array1<f64>)> {
    let n = sys.n();
    let l = sys
        .mass()
        .cholesky(UPLO::Lower)
        .map_err(|_| DampkitError::NotPositiveDefinite("M".into()))?;
    // B = L^{-1} K L^{-T}, via two triangular solves
    let w = solve_lower_many(&l, sys.stiffness());
    let mut b = solve_lower_many(&l, &w.t().to_owned());
    // symmetrize to wash out the solve round-off
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (b[[i, j]] + b[[j, i]]);
            b[[i, j]] = s;
            b[[j, i]] = s;
        }
    }
    let (theta, q) = b
        .eigh(UPLO::Lower)
        .map_err(|e| DampkitError::Linalg(e.to_string()))?;
    if theta[0] <= 0.0 {
        return Err(DampkitError::NotPositiveDefinite("K".into()));
    }
    // eigh returns ascending; we want descending omega
    let mut phi = solve_upper_transpose_many(&l, &q);
    let omega_asc = theta.mapv(f64::sqrt);
    let mut omega = Array1::zeros(n);
    let mut phi_desc = Array2::zeros((n, n));
    for i in 0..n {
        omega[i] = omega_asc[n - 1 - i];
        phi_desc.column_mut(i).assign(&phi.column(n - 1 - i));
    }
    phi = phi_desc;
    for i in 0..n.saturating_sub(1) {
        if (omega[i] - omega[i + 1]).abs() <= 1e-12 * omega[0] {
            return Err(DampkitError::RepeatedFrequencies {
                i,
                j: i + 1,
                tol: 1e-12 * omega[0],
            });
        }
    }
    Ok((phi, omega))
}

/// Forward substitution `L X = B` for lower-triangular `L`, matrix RHS.
pub(crate) fn solve_lower_many(l: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let cols = b.ncols();
    let mut x = b.clone();
    for c in 0..cols {
        for i in 0..n {
            let mut s = x[[i, c]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    x
}

/// Back substitution `Lᵀ X = B` for lower-triangular `L`, matrix RHS.
pub(crate) fn solve_upper_transpose_many(l: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let cols = b.ncols();
    let mut x = b.clone();
    for c in 0..cols {
        for i in (0..n).rev() {
            let mut s = x[[i, c]];
            for k in (i + 1)..n {
                s -= l[[k, i]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    x
}

/// Eigenvalues and diagonalizer of `D_i = [[0, ω], [-ω, -αω]]`.
///
/// The eigenvalues are the roots of `μ² + αωμ + ω² = 0`; the eigenvector for
/// `μ` is `(ω, μ)`. Columns are normalized with the complex bilinear norm
/// when it does not vanish (it vanishes for α = 0, where the eigenvectors are
/// isotropic; the Euclidean norm is used there). Ordering: positive imaginary
/// part first; two real eigenvalues are ordered by descending real part.
fn block_eigen(omega: f64, alpha: f64, index: usize) -> Result<(C64, C64, Block2)> {
    let s = C64::new(alpha * alpha - 4.0, 0.0).sqrt();
    // most negative root first to avoid cancellation, partner via the product
    let mu_minus = C64::new(omega, 0.0) * (C64::new(-alpha, 0.0) - s) / 2.0;
    let (mu1, mu2) = if alpha == 0.0 {
        (C64::new(0.0, omega), C64::new(0.0, -omega))
    } else {
        let mu_plus = C64::new(omega * omega, 0.0) / mu_minus;
        if mu_plus.im >= mu_minus.im {
            (mu_plus, mu_minus)
        } else {
            (mu_minus, mu_plus)
        }
    };
    if (mu1 - mu2).norm() <= 1e-12 * omega {
        return Err(DampkitError::DefectiveBlock { index });
    }
    let col = |mu: C64| -> (C64, C64) {
        let w0 = C64::new(omega, 0.0);
        let bilinear = w0 * w0 + mu * mu;
        let norm = if bilinear.norm() > 1e-12 * omega * omega {
            bilinear.sqrt()
        } else {
            C64::new((omega * omega + mu.norm_sqr()).sqrt(), 0.0)
        };
        (w0 / norm, mu / norm)
    };
    let (a, c) = col(mu1);
    let (b, d) = col(mu2);
    let det = a * d - b * c;
    if det.norm() == 0.0 {
        return Err(DampkitError::DefectiveBlock { index });
    }
    let inv = [d / det, -b / det, -c / det, a / det];
    Ok((
        mu1,
        mu2,
        Block2 {
            m: [a, b, c, d],
            inv,
        },
    ))
}

/// Runs the full offline stage.
pub fn build_modal_form(sys: &SystemMatrices) -> Result<ModalForm> {
    let n = sys.n();
    let r = sys.num_dampers();
    let alpha = sys.alpha();
    let (phi, omega) = simultaneous_diagonalize(sys)?;

    let mut d = Array1::<C64>::zeros(2 * n);
    let mut psi = Vec::with_capacity(n);
    for i in 0..n {
        let (mu1, mu2, block) = block_eigen(omega[i], alpha, i)?;
        d[2 * i] = mu1;
        d[2 * i + 1] = mu2;
        psi.push(block);
    }

    // Ĝ = shuffle of [0; ΦᵀG]: block row i is (0, (ΦᵀG)_i)
    let pg = phi.t().dot(sys.damping_geometry());
    let mut u = Array2::<C64>::zeros((2 * n, r));
    let mut z = Array2::<C64>::zeros((2 * n, r));
    for i in 0..n {
        let block = &psi[i];
        for j in 0..r {
            let g = C64::new(pg[[i, j]], 0.0);
            // U = Ψ⁻¹ Ĝ
            let (u0, u1) = block.apply_inv(C64::new(0.0, 0.0), g);
            u[[2 * i, j]] = u0;
            u[[2 * i + 1, j]] = u1;
            // Z = Ψᵀ Ĝ
            let (z0, z1) = block.apply_transpose(C64::new(0.0, 0.0), g);
            z[[2 * i, j]] = z0;
            z[[2 * i + 1, j]] = z1;
        }
    }

    Ok(ModalForm {
        phi,
        omega,
        psi,
        shuffle: perfect_shuffle(n),
        d,
        u,
        z,
        alpha,
    })
}

impl ModalForm {
    pub fn n(&self) -> usize {
        self.omega.len()
    }

    pub fn num_dampers(&self) -> usize {
        self.u.ncols()
    }

    /// Applies the block-diagonal `Ψ` to a shuffled-coordinate vector.
    pub fn apply_psi(&self, x: ArrayView1<C64>) -> Array1<C64> {
        let n = self.n();
        let mut out = Array1::zeros(2 * n);
        for i in 0..n {
            let (a, b) = self.psi[i].apply(x[2 * i], x[2 * i + 1]);
            out[2 * i] = a;
            out[2 * i + 1] = b;
        }
        out
    }

    /// Applies `Ψ⁻¹`.
    pub fn apply_psi_inv(&self, x: ArrayView1<C64>) -> Array1<C64> {
        let n = self.n();
        let mut out = Array1::zeros(2 * n);
        for i in 0..n {
            let (a, b) = self.psi[i].apply_inv(x[2 * i], x[2 * i + 1]);
            out[2 * i] = a;
            out[2 * i + 1] = b;
        }
        out
    }

    /// Maps a modal-coordinate eigenvector `w` of `Ã(v)` to the QEP
    /// eigenvector `x = Φ Ω⁻¹ (PΨw)(1:n)`, normalized to unit 2-norm.
    pub fn modal_to_qep_vector(&self, w: ArrayView1<C64>) -> Array1<C64> {
        let n = self.n();
        let y = deinterleave(self.apply_psi(w).view());
        let scaled = Array1::from_iter((0..n).map(|i| y[i] / self.omega[i]));
        let mut x = crate::system::real_mat_complex_vec(&self.phi, scaled.view());
        let norm = x.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if norm > 0.0 {
            x.mapv_inplace(|c| c / norm);
        }
        x
    }

    /// Maps a QEP eigenpair `(λ, x)` into modal coordinates
    /// `w = Ψ⁻¹ Pᵀ [Ω Φ⁻¹x; λ Φ⁻¹x]`, with `Φ⁻¹ = ΦᵀM`.
    pub fn qep_to_modal_vector(
        &self,
        sys: &SystemMatrices,
        lambda: C64,
        x: ArrayView1<C64>,
    ) -> Array1<C64> {
        let n = self.n();
        let mx = crate::system::real_mat_complex_vec(sys.mass(), x);
        let q = Array1::from_iter(
            self.phi
                .t()
                .rows()
                .into_iter()
                .map(|row| row.iter().zip(mx.iter()).map(|(&p, &m)| p * m).sum::<C64>()),
        );
        let mut stacked = Array1::zeros(2 * n);
        for i in 0..n {
            stacked[i] = q[i] * self.omega[i];
            stacked[n + i] = q[i] * lambda;
        }
        self.apply_psi_inv(interleave(stacked.view()).view())
    }

    /// `C_int = M Φ (αΩ) Φᵀ M`, equivalent to the critical-damping formula.
    pub fn internal_damping(&self, sys: &SystemMatrices) -> Array2<f64> {
        let n = self.n();
        let mphi = sys.mass().dot(&self.phi);
        let mut scaled = mphi.clone();
        for i in 0..n {
            let s = self.alpha * self.omega[i];
            scaled.column_mut(i).mapv_inplace(|x| x * s);
        }
        scaled.dot(&mphi.t())
    }

    /// Dense `Ã(v) = D - U diag(v) Zᵀ` (test and oracle use only; O(n²) memory).
    pub fn assemble_shifted_dense(&self, v: &crate::system::Viscosities) -> Array2<C64> {
        let m = self.d.len();
        let r = self.num_dampers();
        let mut a = Array2::zeros((m, m));
        for i in 0..m {
            a[[i, i]] = self.d[i];
        }
        for j in 0..r {
            let vj = v.0[j];
            if vj == 0.0 {
                continue;
            }
            for row in 0..m {
                let uj = self.u[[row, j]];
                for col in 0..m {
                    a[[row, col]] -= vj * uj * self.z[[col, j]];
                }
            }
        }
        a
    }
}
