//! Online QEP eigensolver: O(n²) per viscosity vector after the offline stage.
//!
//! The modal form gives `Ã(v) = D - Σ v_j u_j z_jᵀ`. The r rank-one damper
//! terms are peeled one at a time: stage j diagonalizes the DPR1 matrix
//! `L_{j-1} - v_j ũ_j z̃_jᵀ` with the [`crate::dpr1`] solver (sign-normalized
//! so ρ > 0) and transforms the remaining columns through its eigenvector
//! basis `ξ_j`. The final diagonal `L_r` holds the QEP spectrum; eigenvectors
//! are rebuilt as `Ξ = PΨ ξ₁⋯ξ_r` and mapped back by `X = ΦΩ⁻¹Ξ(1:n,·)`, then
//! polished with one step of inverse iteration using the Sherman–Morrison–
//! Woodbury identity (diagonal solve plus an r×r system).
//!
//! In complex-symmetric form each stage basis satisfies `WᵀW = I`, so
//! `ξ_j⁻¹ = WᵀS`: applying the inverse is a structured product, no
//! factorization. One step of iterative refinement tightens the solve and a
//! residual check falls back to an explicit dense inverse for (near-)
//! defective stages, which also covers stages with exactly deflated entries.

use std::collections::BTreeMap;

use ndarray::prelude::*;

use crate::dpr1::{self, Dpr1, SolveOptions};
use crate::error::{DampkitError, Result};
use crate::modal::{deinterleave, ModalForm};
use crate::system::{assemble_damping, qep_residual_with_damping, SystemMatrices, Viscosities};
use crate::C64;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Which QEP eigenvectors to materialize (indices refer to the sorted
/// spectrum).
#[derive(Debug, Clone, Default)]
pub enum VectorRequest {
    #[default]
    None,
    All,
    Indices(Vec<usize>),
}

/// Per-stage eigenvalues of a previous solve, reused as MRQI starting shifts
/// when the viscosities change only slightly.
#[derive(Debug, Clone, Default)]
pub struct WarmCache {
    pub stages: Vec<Vec<C64>>,
}

#[derive(Debug, Clone)]
pub struct QepOptions {
    pub want_vectors: VectorRequest,
    pub warm_cache: Option<WarmCache>,
    /// Apply the SMW inverse-iteration polish to materialized vectors.
    pub refine: bool,
    pub tol: f64,
    pub max_inner: usize,
}

impl Default for QepOptions {
    fn default() -> Self {
        QepOptions {
            want_vectors: VectorRequest::None,
            warm_cache: None,
            refine: true,
            tol: 1e-13,
            max_inner: 50,
        }
    }
}

/// Spectrum (and optionally eigenvectors) of the QEP at one viscosity vector.
#[derive(Debug, Clone)]
pub struct QepSolution {
    /// All 2n eigenvalues, sorted by descending imaginary part, ties by
    /// ascending real part.
    pub values: Array1<C64>,
    /// Materialized QEP eigenvectors, keyed by sorted index.
    pub vectors: BTreeMap<usize, Array1<C64>>,
    /// Relative QEP residuals per materialized vector (same keys), when the
    /// caller filled them in.
    pub residuals: Option<BTreeMap<usize, f64>>,
    /// Per-stage eigenvalues for warm-starting the next solve.
    pub warm_cache: WarmCache,
    /// Total MRQI iterations over all stages.
    pub inner_iterations: usize,
    /// sorted index -> column in the final stage basis
    perm: Vec<usize>,
    stages: Vec<StageOp>,
    v: Viscosities,
}

/// Stage basis transform, stored implicitly where possible.
#[derive(Debug, Clone)]
enum StageOp {
    /// `v_j = 0`: the stage is skipped exactly.
    Identity,
    Structured(StageData),
    /// Fallback with explicit eigenvector matrix and inverse.
    Dense(Box<DenseStage>),
}

/// Implicit `ξ` for one stage. Coordinates deflated exactly (u and z entries
/// both zero) are identity directions; the remaining block is `S⁻¹W` with `W`
/// the complex-orthogonal eigenvector matrix of the stage's DPR1Csym:
/// `W_ki = ẑ_k / ((d_k - λ_i) ν_i)`, `ν_i² = x_iᵀx_i`. Columns `0..exact.len()`
/// of `ξ` are the canonical vectors at `exact`, columns `exact.len()..` carry
/// the reduced eigenvectors scattered over `kept`.
#[derive(Debug, Clone)]
struct StageData {
    m_full: usize,
    /// Full-coordinate indices of the identity block, in column order.
    exact: Vec<usize>,
    /// Full-coordinate indices of the reduced block, in reduced order.
    kept: Vec<usize>,
    d: Vec<C64>,
    zhat: Vec<C64>,
    scaling: Vec<C64>,
    lambdas: Vec<C64>,
    nu: Vec<C64>,
}

#[derive(Debug, Clone)]
struct DenseStage {
    xi: Array2<C64>,
    xi_inv: Array2<C64>,
}

impl StageData {
    fn m_red(&self) -> usize {
        self.d.len()
    }

    /// `ξ y`: scatter of the identity block plus `S⁻¹W y_red`.
    fn apply_xi(&self, y: &[C64]) -> Vec<C64> {
        let ne = self.exact.len();
        let mut out = vec![ZERO; self.m_full];
        for (c, &idx) in self.exact.iter().enumerate() {
            out[idx] = y[c];
        }
        let scaled: Vec<C64> = y[ne..]
            .iter()
            .zip(&self.nu)
            .map(|(&yi, &ni)| yi / ni)
            .collect();
        for (k, &ki) in self.kept.iter().enumerate() {
            let dk = self.d[k];
            let mut acc = ZERO;
            for (i, &si) in scaled.iter().enumerate() {
                acc += si / (dk - self.lambdas[i]);
            }
            out[ki] = self.zhat[k] * acc / self.scaling[k];
        }
        out
    }

    /// `Wᵀ v` on the reduced block.
    fn apply_w_t_red(&self, v: &[C64]) -> Vec<C64> {
        let mr = self.m_red();
        let scaled: Vec<C64> = v.iter().zip(&self.zhat).map(|(&vi, &zi)| vi * zi).collect();
        let mut out = vec![ZERO; mr];
        for (i, o) in out.iter_mut().enumerate() {
            let li = self.lambdas[i];
            let mut acc = ZERO;
            for (k, &sk) in scaled.iter().enumerate() {
                acc += sk / (self.d[k] - li);
            }
            *o = acc / self.nu[i];
        }
        out
    }

    /// `ξᵀ y`.
    fn apply_xi_t(&self, y: &[C64]) -> Vec<C64> {
        let ne = self.exact.len();
        let mut out = vec![ZERO; self.m_full];
        for (c, &idx) in self.exact.iter().enumerate() {
            out[c] = y[idx];
        }
        let gathered: Vec<C64> = self
            .kept
            .iter()
            .zip(&self.scaling)
            .map(|(&ki, &s)| y[ki] / s)
            .collect();
        for (i, wi) in self.apply_w_t_red(&gathered).into_iter().enumerate() {
            out[ne + i] = wi;
        }
        out
    }

    /// `ξ⁻¹u`: identity block plus `WᵀS u_red` (exact for complex-orthogonal
    /// `W`).
    fn apply_xi_inv(&self, u: &[C64]) -> Vec<C64> {
        let ne = self.exact.len();
        let mut out = vec![ZERO; self.m_full];
        for (c, &idx) in self.exact.iter().enumerate() {
            out[c] = u[idx];
        }
        let gathered: Vec<C64> = self
            .kept
            .iter()
            .zip(&self.scaling)
            .map(|(&ki, &s)| u[ki] * s)
            .collect();
        for (i, wi) in self.apply_w_t_red(&gathered).into_iter().enumerate() {
            out[ne + i] = wi;
        }
        out
    }

    /// Inverse application with iterative refinement; returns the solution
    /// and its relative forward residual `‖ξy - u‖/‖u‖`.
    fn solve_xi_refined(&self, u: &[C64]) -> (Vec<C64>, f64) {
        let mut y = self.apply_xi_inv(u);
        let unorm = norm(u);
        for _ in 0..2 {
            let fu = self.apply_xi(&y);
            let resid: Vec<C64> = u.iter().zip(&fu).map(|(&a, &b)| a - b).collect();
            let rel = norm(&resid) / unorm;
            if rel <= 1e-12 {
                return (y, rel);
            }
            let corr = self.apply_xi_inv(&resid);
            for (yi, ci) in y.iter_mut().zip(&corr) {
                *yi += ci;
            }
        }
        let fu = self.apply_xi(&y);
        let resid: Vec<C64> = u.iter().zip(&fu).map(|(&a, &b)| a - b).collect();
        (y, norm(&resid) / unorm)
    }

    /// Materializes the full `ξ` (used for whole-basis reconstruction).
    fn dense_xi(&self) -> Array2<C64> {
        let ne = self.exact.len();
        let mut xi = Array2::zeros((self.m_full, self.m_full));
        for (c, &idx) in self.exact.iter().enumerate() {
            xi[[idx, c]] = ONE;
        }
        for (i, &li) in self.lambdas.iter().enumerate() {
            let ni = self.nu[i];
            for (k, &ki) in self.kept.iter().enumerate() {
                xi[[ki, ne + i]] = self.zhat[k] / ((self.d[k] - li) * ni * self.scaling[k]);
            }
        }
        xi
    }
}

impl StageOp {
    fn apply_xi_vec(&self, y: Array1<C64>) -> Array1<C64> {
        match self {
            StageOp::Identity => y,
            StageOp::Structured(s) => Array1::from(s.apply_xi(y.as_slice().unwrap())),
            StageOp::Dense(d) => d.xi.dot(&y),
        }
    }

    fn apply_xi_mat(&self, y: Array2<C64>) -> Array2<C64> {
        match self {
            StageOp::Identity => y,
            StageOp::Structured(s) => s.dense_xi().dot(&y),
            StageOp::Dense(d) => d.xi.dot(&y),
        }
    }
}

fn norm(x: &[C64]) -> f64 {
    x.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// Stage acceptance threshold for the structured inverse; beyond this the
/// stage falls back to an explicit dense inverse.
const XI_SOLVE_TOL: f64 = 1e-8;

/// Solves the QEP at `v` through the sequence of DPR1 eigenproblems.
pub fn solve_qep(mf: &ModalForm, v: &Viscosities, opts: &QepOptions) -> Result<QepSolution> {
    let r = mf.num_dampers();
    if v.len() != r {
        return Err(DampkitError::DimensionMismatch(format!(
            "viscosity vector has length {}, expected {}",
            v.len(),
            r
        )));
    }
    let m = mf.d.len();
    let mut diag: Array1<C64> = mf.d.clone();
    let mut ucur: Vec<Array1<C64>> = (0..r).map(|j| mf.u.column(j).to_owned()).collect();
    let mut zcur: Vec<Array1<C64>> = (0..r).map(|j| mf.z.column(j).to_owned()).collect();
    let mut stages: Vec<StageOp> = Vec::with_capacity(r);
    let mut warm_out: Vec<Vec<C64>> = Vec::with_capacity(r);
    let mut inner_total = 0usize;

    for j in 0..r {
        let vj = v.0[j];
        if vj == 0.0 {
            warm_out.push(diag.to_vec());
            stages.push(StageOp::Identity);
            continue;
        }
        // A (u_k, z_k) pair whose rank-one contribution moves the eigenvalue
        // near d_k by less than a few hundred ulps makes the MRQI shift
        // collide with the diagonal; when both entries are also structurally
        // negligible, zeroing the pair deflates the coordinate exactly and
        // perturbs the rest of the spectrum only at second order.
        let unorm = ucur[j].iter().map(|c| c.norm()).fold(0.0, f64::max);
        let znorm = zcur[j].iter().map(|c| c.norm()).fold(0.0, f64::max);
        let rho_j = vj.abs();
        for k in 0..m {
            let (un, zn) = (ucur[j][k].norm(), zcur[j][k].norm());
            let displacement = rho_j * un * zn;
            let scale = diag[k].norm() + rho_j * unorm * znorm;
            if un <= 3e-7 * unorm && zn <= 3e-7 * znorm && displacement <= 1e-13 * scale {
                ucur[j][k] = ZERO;
                zcur[j][k] = ZERO;
            }
        }
        // sign normalization: L - v ũ z̃ᵀ = L + |v| (-sgn(v) ũ) z̃ᵀ
        let rho = vj.abs();
        let sgn = if vj > 0.0 { -1.0 } else { 1.0 };
        let stage_dpr1 = Dpr1 {
            d: diag.clone(),
            u: ucur[j].mapv(|x| x * sgn),
            z: zcur[j].clone(),
            rho,
        };
        let shifts = opts
            .warm_cache
            .as_ref()
            .and_then(|wc| wc.stages.get(j))
            .filter(|s| !s.is_empty())
            .cloned();
        let eig = dpr1::solve(
            &stage_dpr1,
            &SolveOptions {
                tol: opts.tol,
                max_inner: opts.max_inner,
                initial_shifts: shifts,
                want_vectors: false,
            },
        )
        .map_err(|e| DampkitError::StageFailed {
            stage: j,
            source: Box::new(e),
        })?;
        inner_total += eig.inner_iterations;

        let mut stage = build_stage(&stage_dpr1, &eig.values)?;
        // transform the remaining damper columns into the new basis
        let mut redo = true;
        while redo {
            redo = false;
            match &stage {
                StageOp::Structured(sd) => {
                    for jj in (j + 1)..r {
                        let (y, rel) = sd.solve_xi_refined(ucur[jj].as_slice().unwrap());
                        if rel > XI_SOLVE_TOL {
                            stage = dense_stage(&stage_dpr1, &eig.values)?;
                            redo = true;
                            break;
                        }
                        ucur[jj] = Array1::from(y);
                        zcur[jj] = Array1::from(sd.apply_xi_t(zcur[jj].as_slice().unwrap()));
                    }
                }
                StageOp::Dense(ds) => {
                    for jj in (j + 1)..r {
                        ucur[jj] = ds.xi_inv.dot(&ucur[jj]);
                        zcur[jj] = ds.xi.t().dot(&zcur[jj]);
                    }
                }
                StageOp::Identity => unreachable!(),
            }
        }
        diag = eig.values.clone();
        warm_out.push(eig.values.to_vec());
        stages.push(stage);
    }

    // deterministic ordering: descending imaginary part, ties ascending real
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        diag[b]
            .im
            .partial_cmp(&diag[a].im)
            .unwrap()
            .then(diag[a].re.partial_cmp(&diag[b].re).unwrap())
            .then(a.cmp(&b))
    });
    let values = Array1::from_iter(order.iter().map(|&i| diag[i]));

    let mut sol = QepSolution {
        values,
        vectors: BTreeMap::new(),
        residuals: None,
        warm_cache: WarmCache { stages: warm_out },
        inner_iterations: inner_total,
        perm: order,
        stages,
        v: v.clone(),
    };
    match &opts.want_vectors {
        VectorRequest::None => {}
        VectorRequest::All => sol.materialize_all_vectors(mf, opts.refine)?,
        VectorRequest::Indices(idx) => {
            let idx = idx.clone();
            sol.materialize_vectors(mf, &idx, opts.refine)?;
        }
    }
    Ok(sol)
}

/// Builds the structured stage transform. Entries with `u_k = z_k = 0` are
/// identity directions (exact deflation); an entry where only one of the two
/// vanishes breaks the block split and forces the dense representation, as
/// does a (near-)defective reduced block.
fn build_stage(a: &Dpr1, values: &Array1<C64>) -> Result<StageOp> {
    let m_full = a.d.len();
    let mut exact = Vec::new();
    let mut kept = Vec::new();
    for k in 0..m_full {
        let uz = (a.u[k] == ZERO, a.z[k] == ZERO);
        match uz {
            (true, true) => exact.push(k),
            (false, false) => kept.push(k),
            // one-sided zero: eigenvalue is exact but the eigenvector is not
            // canonical, so the stage does not split
            _ => return dense_stage(a, values),
        }
    }
    let ne = exact.len();
    let scaling: Vec<C64> = kept
        .iter()
        .map(|&k| (a.z[k] / a.u[k]).sqrt())
        .collect();
    let zhat: Vec<C64> = kept
        .iter()
        .zip(&scaling)
        .map(|(&k, &s)| s * a.u[k])
        .collect();
    let d: Vec<C64> = kept.iter().map(|&k| a.d[k]).collect();
    let lambdas: Vec<C64> = values.iter().skip(ne).copied().collect();
    // bilinear norms ν_i = sqrt(Σ_k ẑ_k²/(d_k - λ_i)²)
    let mr = kept.len();
    let mut nu = vec![ZERO; mr];
    let mut ok = true;
    'outer: for i in 0..mr {
        let li = lambdas[i];
        let mut bilinear = ZERO;
        let mut euclid = 0.0f64;
        for k in 0..mr {
            let den = d[k] - li;
            if den == ZERO {
                ok = false;
                break 'outer;
            }
            let x = zhat[k] / den;
            bilinear += x * x;
            euclid += x.norm_sqr();
        }
        // a quasi-null eigenvector signals near-defectiveness
        if bilinear.norm() <= 1e-12 * euclid {
            ok = false;
            break;
        }
        nu[i] = bilinear.sqrt();
    }
    if !ok {
        return dense_stage(a, values);
    }
    Ok(StageOp::Structured(StageData {
        m_full,
        exact,
        kept,
        d,
        zhat,
        scaling,
        lambdas,
        nu,
    }))
}

/// Explicit eigenvector matrix and its inverse (fallback path).
fn dense_stage(a: &Dpr1, values: &Array1<C64>) -> Result<StageOp> {
    let m = a.d.len();
    let (csym, exact) = dpr1::to_csym(a);
    let kept: Vec<usize> = (0..m)
        .filter(|&i| a.u[i] != ZERO && a.z[i] != ZERO)
        .collect();
    let scaling = csym.scaling.clone().expect("conversion keeps scaling");
    let mut xi = Array2::<C64>::zeros((m, m));
    let mut exact_left = exact.clone();
    for (col, &lam) in values.iter().enumerate() {
        if let Some(pos) = exact_left.iter().position(|&(val, _)| val == lam) {
            let (val, idx) = exact_left.swap_remove(pos);
            let w = dpr1::exact_pair_vector(a, val, idx);
            xi.column_mut(col).assign(&w);
            continue;
        }
        let x = match dpr1::eigenvector(&csym, lam) {
            Ok(x) => x,
            Err(DampkitError::Pole { index }) => dpr1::pole_eigenvector(&csym, index),
            Err(e) => return Err(e),
        };
        let mut full = Array1::<C64>::zeros(m);
        for (i, &ki) in kept.iter().enumerate() {
            full[ki] = x[i] / scaling[i];
        }
        let nrm = norm(full.as_slice().unwrap());
        full.mapv_inplace(|c| c / nrm);
        xi.column_mut(col).assign(&full);
    }
    let xi_inv = complex_lu_inverse(&xi)
        .ok_or_else(|| DampkitError::Solver("stage eigenvector matrix is singular".into()))?;
    Ok(StageOp::Dense(Box::new(DenseStage { xi, xi_inv })))
}

/// Dense complex inverse via LU with partial pivoting (fallback path only).
fn complex_lu_inverse(a: &Array2<C64>) -> Option<Array2<C64>> {
    let n = a.nrows();
    let mut lu: Vec<C64> = a.iter().copied().collect();
    let mut piv: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let mut p = col;
        let mut pmag = lu[col * n + col].norm();
        for row in (col + 1)..n {
            let mag = lu[row * n + col].norm();
            if mag > pmag {
                p = row;
                pmag = mag;
            }
        }
        if pmag == 0.0 {
            return None;
        }
        if p != col {
            for k in 0..n {
                lu.swap(col * n + k, p * n + k);
            }
            piv.swap(col, p);
        }
        let diag = lu[col * n + col];
        for row in (col + 1)..n {
            let f = lu[row * n + col] / diag;
            lu[row * n + col] = f;
            if f == ZERO {
                continue;
            }
            for k in (col + 1)..n {
                let v = lu[col * n + k];
                lu[row * n + k] -= f * v;
            }
        }
    }
    let mut inv = Array2::<C64>::zeros((n, n));
    let mut rhs = vec![ZERO; n];
    for col in 0..n {
        for (row, r) in rhs.iter_mut().enumerate() {
            *r = if piv[row] == col { ONE } else { ZERO };
        }
        for row in 1..n {
            let mut s = rhs[row];
            for k in 0..row {
                s -= lu[row * n + k] * rhs[k];
            }
            rhs[row] = s;
        }
        for row in (0..n).rev() {
            let mut s = rhs[row];
            for k in (row + 1)..n {
                s -= lu[row * n + k] * inv[[k, col]];
            }
            inv[[row, col]] = s / lu[row * n + row];
        }
    }
    Some(inv)
}

impl QepSolution {
    pub fn n(&self) -> usize {
        self.values.len() / 2
    }

    pub fn viscosities(&self) -> &Viscosities {
        &self.v
    }

    /// Spectral abscissa of this solution.
    pub fn spectral_abscissa(&self) -> f64 {
        self.values.iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Reconstructs (and caches) the QEP eigenvectors for the given sorted
    /// indices, optionally polishing each with one SMW inverse-iteration step.
    pub fn materialize_vectors(
        &mut self,
        mf: &ModalForm,
        indices: &[usize],
        refine: bool,
    ) -> Result<()> {
        let m = self.values.len();
        for &si in indices {
            if self.vectors.contains_key(&si) {
                continue;
            }
            if si >= m {
                return Err(DampkitError::InvalidArgument(format!(
                    "eigenvector index {si} out of range (2n = {m})"
                )));
            }
            let col = self.perm[si];
            let mut w = Array1::<C64>::zeros(m);
            w[col] = ONE;
            for stage in self.stages.iter().rev() {
                w = stage.apply_xi_vec(w);
            }
            if refine {
                if let Some(refined) = smw_refine_modal(mf, &self.v, self.values[si], &w) {
                    w = refined;
                }
            }
            let x = mf.modal_to_qep_vector(w.view());
            self.vectors.insert(si, x);
        }
        Ok(())
    }

    /// Whole-basis reconstruction via matrix products; for spectra where most
    /// eigenvectors are needed (accuracy benchmarks).
    pub fn materialize_all_vectors(&mut self, mf: &ModalForm, refine: bool) -> Result<()> {
        let m = self.values.len();
        let n = m / 2;
        let mut basis = Array2::<C64>::eye(m);
        for stage in self.stages.iter().rev() {
            basis = stage.apply_xi_mat(basis);
        }
        // basis columns are modal eigenvectors in final-stage order
        if refine {
            let mut lam_by_col = vec![ZERO; m];
            for si in 0..m {
                lam_by_col[self.perm[si]] = self.values[si];
            }
            for col in 0..m {
                let w = basis.column(col).to_owned();
                if let Some(refined) = smw_refine_modal(mf, &self.v, lam_by_col[col], &w) {
                    basis.column_mut(col).assign(&refined);
                }
            }
        }
        // y = PΨ w per column, keep the top block scaled by Ω⁻¹
        let mut top = Array2::<C64>::zeros((n, m));
        for col in 0..m {
            let y = deinterleave(mf.apply_psi(basis.column(col)).view());
            for i in 0..n {
                top[[i, col]] = y[i] / mf.omega[i];
            }
        }
        // X = Φ · top, via two real gemms
        let tr = top.mapv(|c| c.re);
        let ti = top.mapv(|c| c.im);
        let xr = mf.phi.dot(&tr);
        let xim = mf.phi.dot(&ti);
        for si in 0..m {
            let col = self.perm[si];
            let mut x = Array1::from_iter(
                xr.column(col)
                    .iter()
                    .zip(xim.column(col).iter())
                    .map(|(&a, &b)| C64::new(a, b)),
            );
            let nrm = norm(x.as_slice().unwrap());
            if nrm > 0.0 {
                x.mapv_inplace(|c| c / nrm);
            }
            self.vectors.insert(si, x);
        }
        Ok(())
    }

    /// Fills `residuals` for all materialized vectors using the true QEP
    /// residual (builds `C(v)` once).
    pub fn compute_residuals(&mut self, sys: &SystemMatrices, mf: &ModalForm) -> Result<()> {
        let c = assemble_damping(sys, &self.v, Some(mf))?;
        let mut out = BTreeMap::new();
        for (&si, x) in &self.vectors {
            let r = qep_residual_with_damping(
                sys.mass(),
                &c,
                sys.stiffness(),
                self.values[si],
                x.view(),
            )?;
            out.insert(si, r);
        }
        self.residuals = Some(out);
        Ok(())
    }
}

/// Modal-space residual `‖(Ã(v) - λ)w‖ / ‖w‖`, O(nr).
fn modal_residual(mf: &ModalForm, v: &Viscosities, lambda: C64, w: &Array1<C64>) -> f64 {
    let r = mf.num_dampers();
    let ztw: Vec<C64> = (0..r)
        .map(|j| {
            mf.z.column(j)
                .iter()
                .zip(w.iter())
                .map(|(&z, &wi)| z * wi)
                .sum::<C64>()
                * v.0[j]
        })
        .collect();
    let mut acc = 0.0;
    for k in 0..w.len() {
        let mut e = (mf.d[k] - lambda) * w[k];
        for j in 0..r {
            e -= mf.u[[k, j]] * ztw[j];
        }
        acc += e.norm_sqr();
    }
    acc.sqrt() / norm(w.as_slice().unwrap())
}

/// One inverse-iteration step `(Ã(v) - λI)y = w` solved with the SMW identity
/// (diagonal solve plus an r×r capacitance system). Returns the step only
/// when it does not increase the modal residual; `None` when the capacitance
/// matrix is singular or the step is worse.
fn smw_refine_modal(
    mf: &ModalForm,
    v: &Viscosities,
    lambda: C64,
    w: &Array1<C64>,
) -> Option<Array1<C64>> {
    let m = w.len();
    let r = mf.num_dampers();
    // A weakly coupled eigenvalue can equal a diagonal entry to the last bit;
    // a sub-ulp-scale complex offset keeps the diagonal factor invertible
    // while the step still contracts onto the eigenvector.
    let mut lam_eff = lambda;
    if mf.d.iter().any(|&d| d == lam_eff) {
        lam_eff += C64::new(0.0, 1e-14 * (1.0 + lambda.norm()));
        if mf.d.iter().any(|&d| d == lam_eff) {
            return None;
        }
    }
    let mut ainv_w = Array1::<C64>::zeros(m);
    for k in 0..m {
        ainv_w[k] = w[k] / (mf.d[k] - lam_eff);
    }
    // B = -U diag(v); cap = I + Zᵀ A⁻¹ B;  y = A⁻¹w - A⁻¹B cap⁻¹ Zᵀ A⁻¹ w
    let mut cap = vec![ZERO; r * r];
    let mut rhs = vec![ZERO; r];
    for jc in 0..r {
        for jr in 0..r {
            let mut acc = ZERO;
            for k in 0..m {
                acc += mf.z[[k, jr]] * mf.u[[k, jc]] / (mf.d[k] - lam_eff);
            }
            cap[jr * r + jc] = if jr == jc { ONE } else { ZERO } - v.0[jc] * acc;
        }
        let mut acc = ZERO;
        for k in 0..m {
            acc += mf.z[[k, jc]] * ainv_w[k];
        }
        rhs[jc] = acc;
    }
    let t = gauss_solve(&mut cap, &mut rhs, r)?;
    let mut y = ainv_w;
    for k in 0..m {
        let den = mf.d[k] - lam_eff;
        let mut corr = ZERO;
        for j in 0..r {
            corr += mf.u[[k, j]] * (v.0[j] * t[j]);
        }
        y[k] += corr / den;
    }
    let nrm = norm(y.as_slice().unwrap());
    if nrm == 0.0 || !nrm.is_finite() {
        return None;
    }
    y.mapv_inplace(|c| c / nrm);
    if modal_residual(mf, v, lambda, &y) <= modal_residual(mf, v, lambda, w) {
        Some(y)
    } else {
        None
    }
}

/// Gaussian elimination with partial pivoting for the small r×r capacitance
/// system (row-major `a`). `None` on a numerically singular matrix.
fn gauss_solve(a: &mut [C64], b: &mut [C64], n: usize) -> Option<Vec<C64>> {
    let scale: f64 = a.iter().map(|c| c.norm()).fold(0.0, f64::max);
    for col in 0..n {
        let mut piv = col;
        let mut piv_mag = a[col * n + col].norm();
        for row in (col + 1)..n {
            let mag = a[row * n + col].norm();
            if mag > piv_mag {
                piv = row;
                piv_mag = mag;
            }
        }
        if piv_mag <= 1e-14 * scale.max(1e-300) {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
        }
        let diag = a[col * n + col];
        for row in (col + 1)..n {
            let f = a[row * n + col] / diag;
            if f == ZERO {
                continue;
            }
            for k in col..n {
                let v = a[col * n + k];
                a[row * n + k] -= f * v;
            }
            let bv = b[col];
            b[row] -= f * bv;
        }
    }
    let mut x = vec![ZERO; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in (row + 1)..n {
            s -= a[row * n + k] * x[k];
        }
        x[row] = s / a[row * n + row];
    }
    Some(x)
}

/// Outcome of [`refine_eigenpair`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineOutcome {
    /// The polished vector reduced the QEP residual.
    Improved,
    /// The step did not help; the original vector is returned.
    KeptOriginal,
    /// The r×r capacitance matrix was singular; the original vector is
    /// returned.
    SingularCapacitance,
}

/// One step of inverse iteration on a QEP eigenpair, performed in modal
/// coordinates through the SMW identity and mapped back. The returned vector
/// never has a larger residual than the input.
pub fn refine_eigenpair(
    sys: &SystemMatrices,
    mf: &ModalForm,
    v: &Viscosities,
    lambda: C64,
    x: ArrayView1<C64>,
) -> Result<(Array1<C64>, RefineOutcome)> {
    let w = mf.qep_to_modal_vector(sys, lambda, x);
    let refined = match smw_refine_modal(mf, v, lambda, &w) {
        Some(y) => y,
        None => return Ok((x.to_owned(), RefineOutcome::SingularCapacitance)),
    };
    let x_new = mf.modal_to_qep_vector(refined.view());
    let c = assemble_damping(sys, v, Some(mf))?;
    let before = qep_residual_with_damping(sys.mass(), &c, sys.stiffness(), lambda, x)?;
    let after = qep_residual_with_damping(sys.mass(), &c, sys.stiffness(), lambda, x_new.view())?;
    if after <= before {
        Ok((x_new, RefineOutcome::Improved))
    } else {
        Ok((x.to_owned(), RefineOutcome::KeptOriginal))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modal::build_modal_form;
    use crate::oracle;
    use crate::system::{build_oscillator, MassProfile, OscillatorSpec, SystemMatrices};
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_system(alpha: f64) -> SystemMatrices {
        SystemMatrices::new(
            ndarray::array![[1.0]],
            ndarray::array![[1.0]],
            ndarray::array![[1.0]],
            alpha,
        )
        .unwrap()
    }

    #[test]
    fn undamped_single_mass() {
        let sys = scalar_system(0.0);
        let mf = build_modal_form(&sys).unwrap();
        let sol = solve_qep(&mf, &Viscosities::from_slice(&[0.0]), &QepOptions::default()).unwrap();
        assert_abs_diff_eq!(sol.values[0].im, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.values[1].im, -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.values[0].re, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn internally_damped_single_mass() {
        let sys = scalar_system(0.1);
        let mf = build_modal_form(&sys).unwrap();
        let sol = solve_qep(&mf, &Viscosities::from_slice(&[0.0]), &QepOptions::default()).unwrap();
        let im = (4.0f64 - 0.01).sqrt() / 2.0;
        assert_abs_diff_eq!(sol.values[0].re, -0.05, epsilon = 1e-13);
        assert_abs_diff_eq!(sol.values[0].im, im, epsilon = 1e-13);
        assert_abs_diff_eq!(sol.values[1].im, -im, epsilon = 1e-13);
    }

    #[test]
    fn oscillator_matches_dense_oracle_with_residuals() {
        let spec = OscillatorSpec {
            n: 5,
            mass_profile: MassProfile::LinearRamp { lo: 1.0, hi: 3.0 },
            stiffness: 5.0,
            dampers: (1, 3, 5),
        };
        let sys = build_oscillator(&spec, 0.02).unwrap();
        let mf = build_modal_form(&sys).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = Viscosities(Array1::from_iter((0..3).map(|_| 0.1 + rng.random::<f64>())));
        let mut sol = solve_qep(
            &mf,
            &v,
            &QepOptions {
                want_vectors: VectorRequest::All,
                ..Default::default()
            },
        )
        .unwrap();
        let reference = oracle::dense_qep_eigenvalues(&mf, &v).unwrap();
        let err =
            oracle::greedy_match_max_relative_error(&sol.values.to_vec(), &reference.to_vec());
        assert!(err <= 1e-8, "spectrum error {err}");

        sol.compute_residuals(&sys, &mf).unwrap();
        for (&si, &resid) in sol.residuals.as_ref().unwrap() {
            assert!(resid <= 1e-11, "residual {resid} at index {si}");
        }
    }

    #[test]
    fn conjugate_symmetry_and_stability() {
        let spec = OscillatorSpec {
            n: 8,
            mass_profile: MassProfile::Tent,
            stiffness: 2.0,
            dampers: (2, 4, 7),
        };
        let sys = build_oscillator(&spec, 0.01).unwrap();
        let mf = build_modal_form(&sys).unwrap();
        let v = Viscosities::from_slice(&[0.5, 1.0, 0.25]);
        let sol = solve_qep(&mf, &v, &QepOptions::default()).unwrap();
        assert!(sol.values.iter().all(|c| c.re < 0.0), "not stable");
        // spectrum closed under conjugation
        let conj: Vec<C64> = sol.values.iter().map(|c| c.conj()).collect();
        let err = oracle::greedy_match_max_relative_error(&conj, &sol.values.to_vec());
        assert!(err <= 1e-8, "conjugate symmetry {err}");
        // sorted by descending imaginary part
        for i in 1..sol.values.len() {
            assert!(sol.values[i - 1].im >= sol.values[i].im - 1e-15);
        }
    }

    #[test]
    fn zero_viscosity_stages_are_skipped_exactly() {
        let spec = OscillatorSpec {
            n: 6,
            mass_profile: MassProfile::LinearRamp { lo: 1.0, hi: 2.0 },
            stiffness: 3.0,
            dampers: (1, 3, 6),
        };
        let sys = build_oscillator(&spec, 0.05).unwrap();
        let mf = build_modal_form(&sys).unwrap();
        let v = Viscosities::from_slice(&[0.0, 0.7, 0.0]);
        let sol = solve_qep(&mf, &v, &QepOptions::default()).unwrap();
        assert!(matches!(sol.stages[0], StageOp::Identity));
        assert!(matches!(sol.stages[2], StageOp::Identity));
        let reference = oracle::dense_qep_eigenvalues(&mf, &v).unwrap();
        let err =
            oracle::greedy_match_max_relative_error(&sol.values.to_vec(), &reference.to_vec());
        assert!(err <= 1e-9);
    }

    #[test]
    fn rank_one_case_equals_direct_dpr1() {
        let n = 4;
        let mut g = Array2::zeros((n, 1));
        g[[1, 0]] = 1.0;
        let mut k = Array2::zeros((n, n));
        for i in 0..n {
            k[[i, i]] = 4.0;
            if i + 1 < n {
                k[[i, i + 1]] = -1.5;
                k[[i + 1, i]] = -1.5;
            }
        }
        let sys = SystemMatrices::new(Array2::eye(n), k, g, 0.03).unwrap();
        let mf = build_modal_form(&sys).unwrap();
        let v1 = 0.8;
        let sol = solve_qep(&mf, &Viscosities::from_slice(&[v1]), &QepOptions::default()).unwrap();
        let direct = dpr1::solve(
            &Dpr1 {
                d: mf.d.clone(),
                u: mf.u.column(0).mapv(|x| -x),
                z: mf.z.column(0).to_owned(),
                rho: v1,
            },
            &dpr1::SolveOptions::default(),
        )
        .unwrap();
        let err = oracle::greedy_match_max_relative_error(
            &sol.values.to_vec(),
            &direct.values.to_vec(),
        );
        assert!(err <= 1e-14, "rank-one consistency {err}");
    }

    #[test]
    fn warm_start_reduces_inner_iterations() {
        let spec = OscillatorSpec {
            n: 20,
            mass_profile: MassProfile::LinearRamp { lo: 10.0, hi: 100.0 },
            stiffness: 5.0,
            dampers: (2, 6, 10),
        };
        let sys = build_oscillator(&spec, 0.004).unwrap();
        let mf = build_modal_form(&sys).unwrap();
        let v = Viscosities::from_slice(&[0.6, 0.4, 0.9]);
        let cold = solve_qep(&mf, &v, &QepOptions::default()).unwrap();
        let v2 = Viscosities(v.0.mapv(|x| x * 1.001));
        let cold2 = solve_qep(&mf, &v2, &QepOptions::default()).unwrap();
        let warm2 = solve_qep(
            &mf,
            &v2,
            &QepOptions {
                warm_cache: Some(cold.warm_cache.clone()),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(
            warm2.inner_iterations < cold2.inner_iterations,
            "warm {} vs cold {}",
            warm2.inner_iterations,
            cold2.inner_iterations
        );
        let err = oracle::greedy_match_max_relative_error(
            &warm2.values.to_vec(),
            &cold2.values.to_vec(),
        );
        assert!(err <= 1e-9);
    }

    #[test]
    fn selective_vectors_match_batch_vectors() {
        let spec = OscillatorSpec {
            n: 7,
            mass_profile: MassProfile::LinearRamp { lo: 2.0, hi: 9.0 },
            stiffness: 4.0,
            dampers: (1, 4, 6),
        };
        let sys = build_oscillator(&spec, 0.05).unwrap();
        let mf = build_modal_form(&sys).unwrap();
        let v = Viscosities::from_slice(&[0.3, 0.2, 1.4]);
        let mut all = solve_qep(
            &mf,
            &v,
            &QepOptions {
                want_vectors: VectorRequest::All,
                ..Default::default()
            },
        )
        .unwrap();
        let mut sel = solve_qep(
            &mf,
            &v,
            &QepOptions {
                want_vectors: VectorRequest::Indices(vec![0, 5]),
                ..Default::default()
            },
        )
        .unwrap();
        all.compute_residuals(&sys, &mf).unwrap();
        sel.compute_residuals(&sys, &mf).unwrap();
        for si in [0usize, 5] {
            assert!(sel.residuals.as_ref().unwrap()[&si] <= 1e-11);
            assert!(all.residuals.as_ref().unwrap()[&si] <= 1e-11);
        }
        assert_eq!(sel.vectors.len(), 2);
    }

    #[test]
    fn refine_improves_perturbed_eigenpair() {
        let spec = OscillatorSpec {
            n: 50,
            mass_profile: MassProfile::LinearRamp { lo: 10.0, hi: 500.0 },
            stiffness: 5.0,
            dampers: (5, 20, 40),
        };
        let sys = build_oscillator(&spec, 0.004).unwrap();
        let mf = build_modal_form(&sys).unwrap();
        let v = Viscosities::from_slice(&[0.5, 0.7, 0.3]);
        let mut sol = solve_qep(
            &mf,
            &v,
            &QepOptions {
                want_vectors: VectorRequest::Indices(vec![3]),
                ..Default::default()
            },
        )
        .unwrap();
        sol.compute_residuals(&sys, &mf).unwrap();
        let lambda = sol.values[3];
        let x = sol.vectors[&3].clone();

        // exact input stays a fixed point up to residual
        let (x_same, _) = refine_eigenpair(&sys, &mf, &v, lambda, x.view()).unwrap();
        let c = assemble_damping(&sys, &v, Some(&mf)).unwrap();
        let r_same =
            qep_residual_with_damping(sys.mass(), &c, sys.stiffness(), lambda, x_same.view())
                .unwrap();
        let r_orig =
            qep_residual_with_damping(sys.mass(), &c, sys.stiffness(), lambda, x.view()).unwrap();
        assert!(r_same <= r_orig);

        // perturbed input must be repaired by at least 1e3
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noisy = Array1::from_iter(x.iter().map(|&c| {
            c + C64::new(
                1e-6 * (rng.random::<f64>() - 0.5),
                1e-6 * (rng.random::<f64>() - 0.5),
            )
        }));
        let r_noisy =
            qep_residual_with_damping(sys.mass(), &c, sys.stiffness(), lambda, noisy.view())
                .unwrap();
        let (fixed, outcome) = refine_eigenpair(&sys, &mf, &v, lambda, noisy.view()).unwrap();
        assert_eq!(outcome, RefineOutcome::Improved);
        let r_fixed =
            qep_residual_with_damping(sys.mass(), &c, sys.stiffness(), lambda, fixed.view())
                .unwrap();
        assert!(
            r_fixed * 1e3 <= r_noisy,
            "refinement only improved {r_noisy:e} -> {r_fixed:e}"
        );
    }

    #[test]
    fn refine_with_zero_viscosities_is_pure_diagonal() {
        let sys = build_oscillator(
            &OscillatorSpec {
                n: 4,
                mass_profile: MassProfile::LinearRamp { lo: 1.0, hi: 2.0 },
                stiffness: 1.0,
                dampers: (1, 2, 4),
            },
            0.1,
        )
        .unwrap();
        let mf = build_modal_form(&sys).unwrap();
        let v = Viscosities::from_slice(&[0.0, 0.0, 0.0]);
        let mut sol = solve_qep(
            &mf,
            &v,
            &QepOptions {
                want_vectors: VectorRequest::Indices(vec![1]),
                ..Default::default()
            },
        )
        .unwrap();
        sol.compute_residuals(&sys, &mf).unwrap();
        assert!(sol.residuals.as_ref().unwrap()[&1] <= 1e-12);
    }
}
