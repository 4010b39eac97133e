//! Vibrational system model `M q̈ + C(v) q̇ + K q = 0` and the n-mass
//! oscillator benchmark family.
//!
//! The damping matrix has the fixed structure `C(v) = C_int + Σ v_j g_j g_jᵀ`
//! where the internal damping is a small multiple of the critical damping,
//! `C_int = α M^{1/2} (M^{-1/2} K M^{-1/2})^{1/2} M^{1/2}`.

use std::sync::OnceLock;

use ndarray::prelude::*;
use ndarray_linalg::{Cholesky, Eigh, UPLO};
use serde::{Deserialize, Serialize};

use crate::error::{DampkitError, Result};
use crate::C64;

/// Mass, stiffness and damping geometry of a vibrational system.
///
/// Immutable after construction; the internal damping matrix is computed
/// lazily once and shared.
#[derive(Debug, Clone)]
pub struct SystemMatrices {
    n: usize,
    mass: Array2<f64>,
    stiffness: Array2<f64>,
    damping_geometry: Array2<f64>,
    alpha: f64,
    cint: OnceLock<Array2<f64>>,
}

/// Viscosity parameters of the `r` dampers.
///
/// Nonnegativity is a feasibility property, not a type constraint: optimizers
/// are allowed to probe negative values.
#[derive(Debug, Clone, PartialEq)]
pub struct Viscosities(pub Array1<f64>);

impl Viscosities {
    pub fn from_slice(v: &[f64]) -> Self {
        Viscosities(Array1::from(v.to_vec()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// All entries nonnegative (the physically admissible set).
    pub fn is_nonnegative(&self) -> bool {
        self.0.iter().all(|&v| v >= 0.0)
    }
}

impl From<Vec<f64>> for Viscosities {
    fn from(v: Vec<f64>) -> Self {
        Viscosities(Array1::from(v))
    }
}

/// Mass distribution of the n-mass oscillator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MassProfile {
    /// `m_i = lo + (hi - lo) (i-1)/(n-1)`.
    LinearRamp { lo: f64, hi: f64 },
    /// Symmetric tent `m_i = m_{n+1-i} = (2n - i)/200` for `i <= n/2`.
    Tent,
    /// Explicit list of masses (length must equal `n`).
    Explicit { values: Vec<f64> },
}

/// Benchmark instance description: an n-mass oscillator with uniform springs
/// and three dampers (one grounded at mass `j`, one connecting masses
/// `k, k+1`, one grounded at mass `l`; all indices 1-based).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OscillatorSpec {
    pub n: usize,
    pub mass_profile: MassProfile,
    pub stiffness: f64,
    /// Damper positions `(j, k, l)`, 1-based.
    pub dampers: (usize, usize, usize),
}

impl OscillatorSpec {
    pub fn masses(&self) -> Result<Vec<f64>> {
        let n = self.n;
        if n == 0 {
            return Err(DampkitError::InvalidArgument("n must be positive".into()));
        }
        let m = match &self.mass_profile {
            MassProfile::LinearRamp { lo, hi } => (1..=n)
                .map(|i| {
                    if n == 1 {
                        *lo
                    } else {
                        lo + (hi - lo) * (i - 1) as f64 / (n - 1) as f64
                    }
                })
                .collect(),
            MassProfile::Tent => (1..=n)
                .map(|i| {
                    let i = i.min(n + 1 - i); // mirror into the first half
                    (2 * n - i) as f64 / 200.0
                })
                .collect(),
            MassProfile::Explicit { values } => {
                if values.len() != n {
                    return Err(DampkitError::DimensionMismatch(format!(
                        "explicit mass profile has {} entries, expected {}",
                        values.len(),
                        n
                    )));
                }
                values.clone()
            }
        };
        if m.iter().any(|&x| x <= 0.0) {
            return Err(DampkitError::InvalidArgument(
                "masses must be positive".into(),
            ));
        }
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let (j, k, l) = self.dampers;
        let n = self.n;
        if self.stiffness <= 0.0 {
            return Err(DampkitError::InvalidArgument(
                "stiffness must be positive".into(),
            ));
        }
        if j < 1 || j > n || l < 1 || l > n || k < 1 || k + 1 > n {
            return Err(DampkitError::InvalidArgument(format!(
                "damper indices (j,k,l)=({j},{k},{l}) out of range for n={n}"
            )));
        }
        Ok(())
    }
}

impl SystemMatrices {
    /// Validates symmetry and (by attempted Cholesky factorization) positive
    /// definiteness of `M` and `K`, plus the damping geometry invariants.
    pub fn new(
        mass: Array2<f64>,
        stiffness: Array2<f64>,
        damping_geometry: Array2<f64>,
        alpha: f64,
    ) -> Result<Self> {
        let n = mass.nrows();
        if mass.ncols() != n || stiffness.nrows() != n || stiffness.ncols() != n {
            return Err(DampkitError::DimensionMismatch(
                "M and K must be square with equal size".into(),
            ));
        }
        if damping_geometry.nrows() != n {
            return Err(DampkitError::DimensionMismatch(format!(
                "G has {} rows, expected {}",
                damping_geometry.nrows(),
                n
            )));
        }
        if damping_geometry.ncols() > n {
            return Err(DampkitError::InvalidArgument(
                "G cannot have more columns than system dimension".into(),
            ));
        }
        if alpha < 0.0 {
            return Err(DampkitError::InvalidArgument(
                "internal damping coefficient must be nonnegative".into(),
            ));
        }
        check_symmetric(&mass, "M")?;
        check_symmetric(&stiffness, "K")?;
        mass.cholesky(UPLO::Lower)
            .map_err(|_| DampkitError::NotPositiveDefinite("M".into()))?;
        stiffness
            .cholesky(UPLO::Lower)
            .map_err(|_| DampkitError::NotPositiveDefinite("K".into()))?;
        for (c, col) in damping_geometry.columns().into_iter().enumerate() {
            if col.iter().all(|&x| x == 0.0) {
                return Err(DampkitError::InvalidArgument(format!(
                    "damping geometry column {c} is identically zero"
                )));
            }
        }
        Ok(SystemMatrices {
            n,
            mass,
            stiffness,
            damping_geometry,
            alpha,
            cint: OnceLock::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of dampers `r`.
    pub fn num_dampers(&self) -> usize {
        self.damping_geometry.ncols()
    }

    pub fn mass(&self) -> &Array2<f64> {
        &self.mass
    }

    pub fn stiffness(&self) -> &Array2<f64> {
        &self.stiffness
    }

    pub fn damping_geometry(&self) -> &Array2<f64> {
        &self.damping_geometry
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Critical internal damping `α M^{1/2} (M^{-1/2} K M^{-1/2})^{1/2} M^{1/2}`,
    /// computed once via two symmetric eigendecompositions and cached.
    pub fn internal_damping(&self) -> Result<&Array2<f64>> {
        if let Some(c) = self.cint.get() {
            return Ok(c);
        }
        let c = self.compute_internal_damping()?;
        let _ = self.cint.set(c);
        Ok(self.cint.get().expect("just set"))
    }

    /// Installs a precomputed internal damping matrix (used by the modal stage
    /// to avoid a second dense square root). No effect if already cached.
    pub(crate) fn install_internal_damping(&self, cint: Array2<f64>) {
        let _ = self.cint.set(cint);
    }

    fn compute_internal_damping(&self) -> Result<Array2<f64>> {
        let (lm, qm) = self
            .mass
            .eigh(UPLO::Lower)
            .map_err(|e| DampkitError::Linalg(e.to_string()))?;
        if lm.iter().any(|&x| x <= 0.0) {
            return Err(DampkitError::NotPositiveDefinite("M".into()));
        }
        let m_half = scaled_outer(&qm, &lm.mapv(f64::sqrt));
        let m_inv_half = scaled_outer(&qm, &lm.mapv(|x| 1.0 / x.sqrt()));
        let mut b = m_inv_half.dot(&self.stiffness).dot(&m_inv_half);
        symmetrize(&mut b);
        let (lb, qb) = b
            .eigh(UPLO::Lower)
            .map_err(|e| DampkitError::Linalg(e.to_string()))?;
        if lb.iter().any(|&x| x <= 0.0) {
            return Err(DampkitError::NotPositiveDefinite("M^{-1/2} K M^{-1/2}".into()));
        }
        let sqrt_b = scaled_outer(&qb, &lb.mapv(f64::sqrt));
        let mut c = m_half.dot(&sqrt_b).dot(&m_half);
        c.mapv_inplace(|x| x * self.alpha);
        symmetrize(&mut c);
        Ok(c)
    }
}

/// `Q diag(s) Qᵀ` for symmetric reconstruction.
fn scaled_outer(q: &Array2<f64>, s: &Array1<f64>) -> Array2<f64> {
    let qs = q * &s.view().insert_axis(Axis(0));
    qs.dot(&q.t())
}

fn symmetrize(a: &mut Array2<f64>) {
    let at = a.t().to_owned();
    *a += &at;
    a.mapv_inplace(|x| 0.5 * x);
}

fn check_symmetric(a: &Array2<f64>, name: &str) -> Result<()> {
    let scale = a.iter().fold(0.0f64, |m, &x| m.max(x.abs())).max(1.0);
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            if (a[[i, j]] - a[[j, i]]).abs() > 1e-12 * scale {
                return Err(DampkitError::NotPositiveDefinite(format!(
                    "{name} is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    Ok(())
}

/// Builds the n-mass oscillator: diagonal `M` from the mass profile, uniform
/// tridiagonal `K`, and `G = [e_j, e_k - e_{k+1}, e_l]`.
pub fn build_oscillator(spec: &OscillatorSpec, alpha: f64) -> Result<SystemMatrices> {
    spec.validate()?;
    let n = spec.n;
    let masses = spec.masses()?;
    let mass = Array2::from_diag(&Array1::from(masses));

    let k = spec.stiffness;
    let mut stiffness = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        stiffness[[i, i]] = 2.0 * k; // k_i + k_{i+1} with uniform springs
        if i + 1 < n {
            stiffness[[i, i + 1]] = -k;
            stiffness[[i + 1, i]] = -k;
        }
    }

    let (j, kk, l) = spec.dampers;
    let mut g = Array2::<f64>::zeros((n, 3));
    g[[j - 1, 0]] = 1.0;
    g[[kk - 1, 1]] = 1.0;
    g[[kk, 1]] = -1.0;
    g[[l - 1, 2]] = 1.0;

    SystemMatrices::new(mass, stiffness, g, alpha)
}

/// Assembles `C(v) = C_int + Σ v_j g_j g_jᵀ`.
///
/// When a modal form is available, `C_int = M Φ (αΩ) Φᵀ M` reuses the offline
/// diagonalization instead of a second dense matrix square root.
pub fn assemble_damping(
    sys: &SystemMatrices,
    v: &Viscosities,
    modal: Option<&crate::modal::ModalForm>,
) -> Result<Array2<f64>> {
    if v.len() != sys.num_dampers() {
        return Err(DampkitError::DimensionMismatch(format!(
            "viscosity vector has length {}, expected {}",
            v.len(),
            sys.num_dampers()
        )));
    }
    let cint: &Array2<f64> = match modal {
        Some(mf) => {
            if sys.cint.get().is_none() {
                sys.install_internal_damping(mf.internal_damping(sys));
            }
            sys.cint.get().expect("just installed")
        }
        None => sys.internal_damping()?,
    };
    let mut c = cint.clone();
    let g = sys.damping_geometry();
    for (jj, &vj) in v.0.iter().enumerate() {
        if vj == 0.0 {
            continue;
        }
        let gj = g.column(jj);
        for a in 0..sys.n {
            let ga = gj[a];
            if ga == 0.0 {
                continue;
            }
            for b in 0..sys.n {
                c[[a, b]] += vj * ga * gj[b];
            }
        }
    }
    Ok(c)
}

/// `M x` for complex `x` with real `M`, via two real matrix-vector products.
pub fn real_mat_complex_vec(m: &Array2<f64>, x: ArrayView1<C64>) -> Array1<C64> {
    let xr = x.mapv(|c| c.re);
    let xi = x.mapv(|c| c.im);
    let yr = m.dot(&xr);
    let yi = m.dot(&xi);
    Array1::from_iter(yr.iter().zip(yi.iter()).map(|(&a, &b)| C64::new(a, b)))
}

/// Relative QEP residual `‖(λ²M + λC(v) + K)x‖₂ / ‖x‖₂`.
pub fn qep_residual(
    sys: &SystemMatrices,
    v: &Viscosities,
    lambda: C64,
    x: ArrayView1<C64>,
) -> Result<f64> {
    let c = assemble_damping(sys, v, None)?;
    qep_residual_with_damping(sys.mass(), &c, sys.stiffness(), lambda, x)
}

/// Residual with a preassembled damping matrix; use for batches of eigenpairs
/// at the same `v` so `C(v)` is built once.
pub fn qep_residual_with_damping(
    mass: &Array2<f64>,
    damping: &Array2<f64>,
    stiffness: &Array2<f64>,
    lambda: C64,
    x: ArrayView1<C64>,
) -> Result<f64> {
    let xnorm = x.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if xnorm == 0.0 {
        return Err(DampkitError::InvalidArgument(
            "residual of the zero vector is undefined".into(),
        ));
    }
    let mx = real_mat_complex_vec(mass, x);
    let cx = real_mat_complex_vec(damping, x);
    let kx = real_mat_complex_vec(stiffness, x);
    let l2 = lambda * lambda;
    let resid = mx
        .iter()
        .zip(cx.iter())
        .zip(kx.iter())
        .map(|((&m, &c), &k)| (l2 * m + lambda * c + k).norm_sqr())
        .sum::<f64>()
        .sqrt();
    Ok(resid / xnorm)
}
