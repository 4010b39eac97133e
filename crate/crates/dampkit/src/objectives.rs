//! Frequency-weighted objective and constraint functions with analytic
//! gradients.
//!
//! Undesirable frequency bands `[ω - b, ω + b]` are geometrized as
//! axis-aligned ellipses around `η + iω`. Two optimization models are
//! provided:
//!
//! * Model 1 (fixed ellipses): minimize the spectral abscissa subject to all
//!   eigenvalues staying outside the given ellipses, stability to tolerance,
//!   and nonnegative viscosities.
//! * Model 2 (variable ellipses): maximize a weighted sum of the largest
//!   semi-major axes that keep every eigenvalue outside each band (capped at
//!   `m_j`), minus a barrier that blows up as the spectral abscissa climbs
//!   from `tol_sa` toward the ellipse shift `η`.
//!
//! Gradients use first-order eigenvalue perturbation with unconjugated
//! bilinear forms: for this class of systems the right eigenvector is also
//! the left eigenvector.

use std::collections::BTreeSet;

use ndarray::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DampkitError, Result};
use crate::modal::ModalForm;
use crate::qep::{solve_qep, QepOptions, VectorRequest, WarmCache};
use crate::system::{real_mat_complex_vec, SystemMatrices, Viscosities};
use crate::C64;

/// Semi-major axis of an ellipse spec: fixed for Model 1, free for Model 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SemiMajor {
    Fixed(f64),
    /// Serialized as the string "variable".
    Variable(VariableTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum VariableTag {
    #[serde(rename = "variable")]
    Variable,
}

pub const VARIABLE: SemiMajor = SemiMajor::Variable(VariableTag::Variable);

/// Axis-aligned ellipse `(x-η)²/a² + (y-ω)²/b² = 1` around `c = η + iω`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipseSpec {
    pub a: SemiMajor,
    /// Semi-minor axis = half bandwidth of the frequency band.
    pub b: f64,
    /// Band center frequency (imaginary part of the center).
    pub omega: f64,
    /// Real shift of the center (0 on the imaginary axis).
    #[serde(default)]
    pub eta: f64,
}

impl EllipseSpec {
    pub fn fixed(a: f64, b: f64, omega: f64) -> Self {
        EllipseSpec {
            a: SemiMajor::Fixed(a),
            b,
            omega,
            eta: 0.0,
        }
    }

    pub fn variable(b: f64, omega: f64, eta: f64) -> Self {
        EllipseSpec {
            a: VARIABLE,
            b,
            omega,
            eta,
        }
    }

    pub fn center(&self) -> C64 {
        C64::new(self.eta, self.omega)
    }

    pub fn fixed_a(&self) -> Result<f64> {
        match self.a {
            SemiMajor::Fixed(a) => Ok(a),
            SemiMajor::Variable(_) => Err(DampkitError::InvalidArgument(
                "ellipse has no fixed semi-major axis".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let SemiMajor::Fixed(a) = self.a {
            if a <= 0.0 {
                return Err(DampkitError::Config(
                    "ellipse semi-major axis must be positive".into(),
                ));
            }
        }
        if self.b <= 0.0 {
            return Err(DampkitError::Config(
                "ellipse semi-minor axis must be positive".into(),
            ));
        }
        if self.omega < 0.0 || self.eta < 0.0 {
            return Err(DampkitError::Config(
                "ellipse center must satisfy η ≥ 0, ω ≥ 0".into(),
            ));
        }
        Ok(())
    }
}

/// Continuous cubic-then-logarithmic barrier on `[y1, y2)`.
///
/// Zero up to `y1`, a cubic `τ₁(x-y1)³ + τ₂(x-y1)²` on `(y1, y]`, then
/// `-log((y2-x)/(y2-y)) + h` on `(y, y2)`, infinite beyond. Value and first
/// derivative are continuous at both junctions; `β(y1) = 0` and `β(y) = h`
/// hold exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierSpec {
    pub y1: f64,
    pub y2: f64,
    pub y: f64,
    pub h: f64,
    pub tau1: f64,
    pub tau2: f64,
}

impl BarrierSpec {
    /// Default junction `y = y1 + 3h/(3h+1) (y2-y1)`, which makes `τ₂ = 0`
    /// and the cubic monotonically increasing.
    pub fn new(y1: f64, y2: f64, h: f64) -> Result<Self> {
        if !(y1 < y2) || h <= 0.0 {
            return Err(DampkitError::Config(format!(
                "barrier requires y1 < y2 and h > 0, got y1={y1}, y2={y2}, h={h}"
            )));
        }
        let y = y1 + 3.0 * h / (3.0 * h + 1.0) * (y2 - y1);
        let q = y - y1;
        Ok(BarrierSpec {
            y1,
            y2,
            y,
            h,
            tau1: h / (q * q * q),
            tau2: 0.0,
        })
    }

    /// Arbitrary junction `y ∈ (y1, y2)` with the generic coefficients.
    pub fn with_junction(y1: f64, y2: f64, y: f64, h: f64) -> Result<Self> {
        if !(y1 < y && y < y2) || h <= 0.0 {
            return Err(DampkitError::Config(
                "barrier junction must satisfy y1 < y < y2, h > 0".into(),
            ));
        }
        let q = y - y1;
        let tau1 = ((2.0 * h + 1.0) * y - y1 - 2.0 * h * y2) / ((y2 - y) * q * q * q);
        let tau2 = (y1 + 3.0 * h * y2 - (3.0 * h + 1.0) * y) / ((y2 - y) * q * q);
        Ok(BarrierSpec {
            y1,
            y2,
            y,
            h,
            tau1,
            tau2,
        })
    }
}

/// Barrier value; `+∞` for `x ≥ y2`.
pub fn barrier(x: f64, spec: &BarrierSpec) -> f64 {
    if x <= spec.y1 {
        0.0
    } else if x <= spec.y {
        if x == spec.y {
            spec.h
        } else {
            let s = x - spec.y1;
            spec.tau1 * s * s * s + spec.tau2 * s * s
        }
    } else if x < spec.y2 {
        -((spec.y2 - x) / (spec.y2 - spec.y)).ln() + spec.h
    } else {
        f64::INFINITY
    }
}

/// Chain-rule derivative of the barrier against `f_prime`; undefined at and
/// beyond `y2`.
pub fn barrier_derivative(x: f64, f_prime: f64, spec: &BarrierSpec) -> Result<f64> {
    if x >= spec.y2 {
        return Err(DampkitError::GradientUndefined(format!(
            "barrier derivative undefined at x={x} ≥ y2={}",
            spec.y2
        )));
    }
    Ok(if x <= spec.y1 {
        0.0
    } else if x <= spec.y {
        let s = x - spec.y1;
        (3.0 * spec.tau1 * s * s + 2.0 * spec.tau2 * s) * f_prime
    } else {
        f_prime / (spec.y2 - x)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Model1,
    Model2,
}

/// Problem data for the two frequency-weighted damping models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub ellipses: Vec<EllipseSpec>,
    /// Band weights φ_j ∈ (0, 1] (Model 2).
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    /// Damping caps m_j > 0 (Model 2).
    #[serde(default)]
    pub caps: Option<Vec<f64>>,
    /// Stability tolerance; when absent the driver fills in the default rule
    /// `0.9 · min{α(v_init), α(v_zero)}`.
    #[serde(default)]
    pub tol_sa: Option<f64>,
    /// Ellipse shift η ≥ 0 shared by all Model-2 ellipses (barrier upper end).
    #[serde(default)]
    pub eta: f64,
    /// Objective prescaling.
    #[serde(default = "default_mu0")]
    pub mu0: f64,
}

fn default_mu0() -> f64 {
    1.0
}

/// Default Model-2 cap when the config does not provide one; far from active
/// at the benchmark scales.
pub const DEFAULT_CAP: f64 = 100.0;

impl ModelConfig {
    pub fn weights_or_default(&self) -> Vec<f64> {
        self.weights
            .clone()
            .unwrap_or_else(|| vec![1.0; self.ellipses.len()])
    }

    pub fn caps_or_default(&self) -> Vec<f64> {
        self.caps
            .clone()
            .unwrap_or_else(|| vec![DEFAULT_CAP; self.ellipses.len()])
    }

    pub fn validate(&self) -> Result<()> {
        if self.ellipses.is_empty() {
            return Err(DampkitError::Config("at least one ellipse is required".into()));
        }
        for e in &self.ellipses {
            e.validate()?;
        }
        if self.mu0 <= 0.0 {
            return Err(DampkitError::Config("mu0 must be positive".into()));
        }
        if let Some(t) = self.tol_sa {
            if t >= 0.0 {
                return Err(DampkitError::Config("tol_sa must be negative".into()));
            }
        }
        match self.kind {
            ModelKind::Model1 => {
                for e in &self.ellipses {
                    e.fixed_a()?;
                    if e.eta != 0.0 {
                        return Err(DampkitError::Config(
                            "Model 1 ellipses are centered on the imaginary axis".into(),
                        ));
                    }
                }
            }
            ModelKind::Model2 => {
                if self.eta < 0.0 {
                    return Err(DampkitError::Config("η must be nonnegative".into()));
                }
                for e in &self.ellipses {
                    if e.eta != self.eta {
                        return Err(DampkitError::Config(
                            "Model 2 ellipses share the single shift η".into(),
                        ));
                    }
                }
                let w = self.weights_or_default();
                let m = self.caps_or_default();
                if w.len() != self.ellipses.len() || m.len() != self.ellipses.len() {
                    return Err(DampkitError::Config(
                        "weights and caps must match the number of ellipses".into(),
                    ));
                }
                if w.iter().any(|&x| !(0.0 < x && x <= 1.0)) {
                    return Err(DampkitError::Config("weights must lie in (0, 1]".into()));
                }
                if m.iter().any(|&x| x <= 0.0) {
                    return Err(DampkitError::Config("caps must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// Maximum real part over the spectrum.
pub fn spectral_abscissa(spectrum: &[C64]) -> Result<f64> {
    if spectrum.is_empty() {
        return Err(DampkitError::EmptySpectrum);
    }
    Ok(spectrum.iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max))
}

/// Algebraic distance of a point to a fixed ellipse: < 1 inside, 1 on the
/// boundary, > 1 outside.
pub fn ellipse_distance(z: C64, e: &EllipseSpec) -> Result<f64> {
    let a = e.fixed_a()?;
    Ok(ellipse_distance_with(z, a, e.b, e.center()))
}

pub fn ellipse_distance_with(z: C64, a: f64, b: f64, c: C64) -> f64 {
    let dre = (z - c).re / a;
    let dim = (z - c).im / b;
    dre * dre + dim * dim
}

/// Result of a spectrum scan, with the minimizing indices for gradient
/// assembly and a flag for exact ties (nonsmooth points).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumDistance {
    pub value: f64,
    pub eigenvalue_index: usize,
    pub ellipse_index: usize,
    pub tie: bool,
}

/// Minimum ellipse distance over all (eigenvalue, ellipse) pairs.
///
/// Only eigenvalues with nonnegative imaginary part participate: the spectrum
/// is closed under conjugation and all ellipse centers have ω ≥ 0, so the
/// conjugate partner never attains a strictly smaller distance. Ties are
/// broken by the lowest (eigenvalue, ellipse) index pair.
pub fn spectrum_ellipse_distance(
    spectrum: &[C64],
    ellipses: &[EllipseSpec],
) -> Result<SpectrumDistance> {
    if spectrum.is_empty() || ellipses.is_empty() {
        return Err(DampkitError::EmptySpectrum);
    }
    let mut best: Option<SpectrumDistance> = None;
    for (ei, &lam) in spectrum.iter().enumerate() {
        if lam.im < 0.0 {
            continue;
        }
        for (ci, e) in ellipses.iter().enumerate() {
            let d = ellipse_distance(lam, e)?;
            match &mut best {
                None => {
                    best = Some(SpectrumDistance {
                        value: d,
                        eigenvalue_index: ei,
                        ellipse_index: ci,
                        tie: false,
                    })
                }
                Some(b) => {
                    if d < b.value {
                        b.value = d;
                        b.eigenvalue_index = ei;
                        b.ellipse_index = ci;
                        b.tie = false;
                    } else if d == b.value && (ei, ci) != (b.eigenvalue_index, b.ellipse_index) {
                        b.tie = true;
                    }
                }
            }
        }
    }
    best.ok_or(DampkitError::EmptySpectrum)
}

/// Largest semi-major axis such that `z` is not inside the variable ellipse:
/// `b |Re z - η| / sqrt(b² - (Im z - ω)²)` inside the horizontal strip,
/// `+∞` outside (including the strip endpoints).
pub fn semi_major(z: C64, e: &EllipseSpec) -> f64 {
    let dy = z.im - e.omega;
    if dy.abs() >= e.b {
        return f64::INFINITY;
    }
    e.b * (z.re - e.eta).abs() / (e.b * e.b - dy * dy).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumSemiMajor {
    pub value: f64,
    /// Minimizing eigenvalue, absent when every eigenvalue avoids the strip.
    pub eigenvalue_index: Option<usize>,
    pub tie: bool,
}

/// Minimum of [`semi_major`] over the spectrum (conjugate-half scan).
pub fn spectrum_semi_major(spectrum: &[C64], e: &EllipseSpec) -> Result<SpectrumSemiMajor> {
    if spectrum.is_empty() {
        return Err(DampkitError::EmptySpectrum);
    }
    let mut out = SpectrumSemiMajor {
        value: f64::INFINITY,
        eigenvalue_index: None,
        tie: false,
    };
    for (ei, &lam) in spectrum.iter().enumerate() {
        if lam.im < 0.0 {
            continue;
        }
        let a = semi_major(lam, e);
        if a < out.value {
            out.value = a;
            out.eigenvalue_index = Some(ei);
            out.tie = false;
        } else if a == out.value && a.is_finite() && out.eigenvalue_index != Some(ei) {
            out.tie = true;
        }
    }
    Ok(out)
}

/// First-order sensitivity of a simple eigenvalue to each viscosity:
/// `∂λ/∂v_j = -λ (g_jᵀx)² / (xᵀ(2λM + C(v))x)` with unconjugated products.
pub fn eigenvalue_gradient(
    sys: &SystemMatrices,
    v: &Viscosities,
    lambda: C64,
    x: ArrayView1<C64>,
) -> Result<Vec<C64>> {
    let r = sys.num_dampers();
    let g = sys.damping_geometry();
    let mx = real_mat_complex_vec(sys.mass(), x);
    let cint = sys.internal_damping()?;
    let mut cx = real_mat_complex_vec(cint, x);
    let mut gtx = vec![C64::new(0.0, 0.0); r];
    for j in 0..r {
        let mut acc = C64::new(0.0, 0.0);
        for k in 0..sys.n() {
            acc += g[[k, j]] * x[k];
        }
        gtx[j] = acc;
        let vj = v.0[j];
        if vj != 0.0 {
            for k in 0..sys.n() {
                cx[k] += vj * g[[k, j]] * gtx[j];
            }
        }
    }
    let xt_mx: C64 = x.iter().zip(mx.iter()).map(|(&a, &b)| a * b).sum();
    let xt_cx: C64 = x.iter().zip(cx.iter()).map(|(&a, &b)| a * b).sum();
    let denom = 2.0 * lambda * xt_mx + xt_cx;
    let scale: f64 = 2.0 * lambda.norm() * xt_mx.norm() + xt_cx.norm();
    if denom.norm() <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
        return Err(DampkitError::GradientUndefined(
            "vanishing xᵀ(2λM + C)x (defective direction)".into(),
        ));
    }
    Ok(gtx
        .iter()
        .map(|&gj| -(lambda * gj * gj) / denom)
        .collect())
}

/// Derivative of the ellipse distance along an eigenvalue path.
fn ellipse_distance_derivative(lam: C64, lam_prime: C64, a: f64, b: f64, c: C64) -> f64 {
    2.0 * ((lam - c).re * lam_prime.re / (a * a) + (lam - c).im * lam_prime.im / (b * b))
}

/// Derivative of the semi-major measure along an eigenvalue path (finite
/// branch only).
fn semi_major_derivative(lam: C64, lam_prime: C64, e: &EllipseSpec) -> f64 {
    let dy = lam.im - e.omega;
    let root = (e.b * e.b - dy * dy).sqrt();
    let dx = lam.re - e.eta;
    e.b * dx.signum() * lam_prime.re / root
        + e.b * dx.abs() * dy * lam_prime.im / (root * root * root)
}

/// One evaluation of a model at a viscosity vector: objective, constraints in
/// canonical `≤ 0` form, and their gradients.
#[derive(Debug, Clone)]
pub struct ModelEval {
    /// Prescaled objective (Model 1: to minimize; Model 2: to maximize).
    pub objective: f64,
    pub objective_grad: Array1<f64>,
    pub constraints: Array1<f64>,
    pub constraint_grads: Vec<Array1<f64>>,
    /// An argmin/argmax tie was hit exactly; the gradient of the
    /// first-indexed active branch was returned.
    pub nonsmooth: bool,
    pub spectral_abscissa: f64,
    /// `d_{Λ,ℰ}(v)` (Model 1).
    pub distance: Option<f64>,
    /// Uncapped `a_{Λ,E_j}(v)` per ellipse (Model 2).
    pub semi_major_values: Vec<f64>,
}

fn tol_sa_of(config: &ModelConfig) -> Result<f64> {
    config.tol_sa.ok_or_else(|| {
        DampkitError::Config("tol_sa is unset; apply the default rule before evaluating".into())
    })
}

/// Locates the rightmost eigenvalue among the conjugate-half representatives
/// and flags exact ties (excluding conjugacy).
fn rightmost_index(values: &[C64]) -> (usize, bool) {
    let mut best = 0;
    let mut best_re = f64::NEG_INFINITY;
    let mut tie = false;
    for (i, &lam) in values.iter().enumerate() {
        if lam.im < 0.0 {
            continue;
        }
        if lam.re > best_re {
            best_re = lam.re;
            best = i;
            tie = false;
        } else if lam.re == best_re && values[best].im != lam.im {
            tie = true;
        }
    }
    (best, tie)
}

/// Model 1 evaluation (fixed ellipses): objective `mu0 · α(v)`, constraints
/// `[1 - d_{Λ,ℰ}(v), α(v) - tol_sa, -v] ≤ 0`.
pub fn model1_eval(
    sys: &SystemMatrices,
    mf: &ModalForm,
    config: &ModelConfig,
    v: &Viscosities,
) -> Result<ModelEval> {
    model1_eval_with_cache(sys, mf, config, v, None).map(|(e, _)| e)
}

pub fn model1_eval_with_cache(
    sys: &SystemMatrices,
    mf: &ModalForm,
    config: &ModelConfig,
    v: &Viscosities,
    warm: Option<&WarmCache>,
) -> Result<(ModelEval, WarmCache)> {
    let tol_sa = tol_sa_of(config)?;
    let r = v.len();
    let mut sol = solve_qep(
        mf,
        v,
        &QepOptions {
            want_vectors: VectorRequest::None,
            warm_cache: warm.cloned(),
            ..Default::default()
        },
    )?;
    let values = sol.values.to_vec();
    let alpha = spectral_abscissa(&values)?;
    let (sa_idx, sa_tie) = rightmost_index(&values);
    let dist = spectrum_ellipse_distance(&values, &config.ellipses)?;

    let mut want: BTreeSet<usize> = BTreeSet::new();
    want.insert(sa_idx);
    want.insert(dist.eigenvalue_index);
    let want: Vec<usize> = want.into_iter().collect();
    sol.materialize_vectors(mf, &want, true)?;

    let sa_grad_c = eigenvalue_gradient(sys, v, values[sa_idx], sol.vectors[&sa_idx].view())?;
    let alpha_grad = Array1::from_iter(sa_grad_c.iter().map(|c| c.re));

    let d_lam = values[dist.eigenvalue_index];
    let d_grad_c =
        eigenvalue_gradient(sys, v, d_lam, sol.vectors[&dist.eigenvalue_index].view())?;
    let e = &config.ellipses[dist.ellipse_index];
    let (a, b, c) = (e.fixed_a()?, e.b, e.center());
    let d_grad = Array1::from_iter(
        d_grad_c
            .iter()
            .map(|&lp| ellipse_distance_derivative(d_lam, lp, a, b, c)),
    );

    // constraints: [1 - d, α - tol_sa, -v] ≤ 0
    let mut constraints = Array1::zeros(2 + r);
    constraints[0] = 1.0 - dist.value;
    constraints[1] = alpha - tol_sa;
    let mut constraint_grads = Vec::with_capacity(2 + r);
    constraint_grads.push(d_grad.mapv(|x| -x));
    constraint_grads.push(alpha_grad.clone());
    for j in 0..r {
        constraints[2 + j] = -v.0[j];
        let mut gneg = Array1::zeros(r);
        gneg[j] = -1.0;
        constraint_grads.push(gneg);
    }

    let eval = ModelEval {
        objective: config.mu0 * alpha,
        objective_grad: alpha_grad.mapv(|x| config.mu0 * x),
        constraints,
        constraint_grads,
        nonsmooth: sa_tie || dist.tie,
        spectral_abscissa: alpha,
        distance: Some(dist.value),
        semi_major_values: Vec::new(),
    };
    Ok((eval, sol.warm_cache))
}

/// Model 2 evaluation (variable ellipses): objective (to maximize)
/// `mu0 (Σ φ_j min{a_{Λ,E_j}(v), m_j} - β(α(v); tol_sa, η))`, constraints
/// `[α(v) - tol_sa, -v] ≤ 0`.
pub fn model2_eval(
    sys: &SystemMatrices,
    mf: &ModalForm,
    config: &ModelConfig,
    v: &Viscosities,
) -> Result<ModelEval> {
    model2_eval_with_cache(sys, mf, config, v, None).map(|(e, _)| e)
}

pub fn model2_eval_with_cache(
    sys: &SystemMatrices,
    mf: &ModalForm,
    config: &ModelConfig,
    v: &Viscosities,
    warm: Option<&WarmCache>,
) -> Result<(ModelEval, WarmCache)> {
    let tol_sa = tol_sa_of(config)?;
    let weights = config.weights_or_default();
    let caps = config.caps_or_default();
    let barrier_spec = BarrierSpec::new(tol_sa, config.eta, 1.0)?;
    let r = v.len();
    let k = config.ellipses.len();

    let mut sol = solve_qep(
        mf,
        v,
        &QepOptions {
            want_vectors: VectorRequest::None,
            warm_cache: warm.cloned(),
            ..Default::default()
        },
    )?;
    let values = sol.values.to_vec();
    let alpha = spectral_abscissa(&values)?;
    let (sa_idx, sa_tie) = rightmost_index(&values);

    let mut scans = Vec::with_capacity(k);
    for e in &config.ellipses {
        scans.push(spectrum_semi_major(&values, e)?);
    }

    let beta = barrier(alpha, &barrier_spec);
    let mut nonsmooth = sa_tie;
    let mut objective_sum = 0.0;
    for (j, scan) in scans.iter().enumerate() {
        objective_sum += weights[j] * scan.value.min(caps[j]);
        if scan.tie || scan.value == caps[j] {
            nonsmooth = true;
        }
    }

    let mut want: BTreeSet<usize> = BTreeSet::new();
    want.insert(sa_idx);
    for (j, scan) in scans.iter().enumerate() {
        if scan.value.is_finite() && scan.value < caps[j] {
            if let Some(ei) = scan.eigenvalue_index {
                want.insert(ei);
            }
        }
    }
    let want: Vec<usize> = want.into_iter().collect();
    sol.materialize_vectors(mf, &want, true)?;

    let sa_grad_c = eigenvalue_gradient(sys, v, values[sa_idx], sol.vectors[&sa_idx].view())?;
    let alpha_grad = Array1::from_iter(sa_grad_c.iter().map(|c| c.re));

    let mut objective_grad = Array1::<f64>::zeros(r);
    for (j, scan) in scans.iter().enumerate() {
        if !scan.value.is_finite() || scan.value >= caps[j] {
            continue; // capped or infinite: zero contribution
        }
        let ei = scan.eigenvalue_index.expect("finite scan has an argmin");
        let lam = values[ei];
        let grad_c = eigenvalue_gradient(sys, v, lam, sol.vectors[&ei].view())?;
        for jj in 0..r {
            objective_grad[jj] +=
                weights[j] * semi_major_derivative(lam, grad_c[jj], &config.ellipses[j]);
        }
    }

    let objective = if beta.is_finite() {
        let bgrad = barrier_derivative(alpha, 1.0, &barrier_spec)?;
        for jj in 0..r {
            objective_grad[jj] -= bgrad * alpha_grad[jj];
        }
        config.mu0 * (objective_sum - beta)
    } else {
        // spectral abscissa at or beyond η: the objective is -∞ and no
        // gradient exists; report zeros so line searches reject the point on
        // the value alone
        objective_grad.fill(0.0);
        f64::NEG_INFINITY
    };
    objective_grad.mapv_inplace(|x| config.mu0 * x);

    let mut constraints = Array1::zeros(1 + r);
    constraints[0] = alpha - tol_sa;
    let mut constraint_grads = Vec::with_capacity(1 + r);
    constraint_grads.push(alpha_grad);
    for j in 0..r {
        constraints[1 + j] = -v.0[j];
        let mut gneg = Array1::zeros(r);
        gneg[j] = -1.0;
        constraint_grads.push(gneg);
    }

    let eval = ModelEval {
        objective,
        objective_grad,
        constraints,
        constraint_grads,
        nonsmooth,
        spectral_abscissa: alpha,
        distance: None,
        semi_major_values: scans.iter().map(|s| s.value).collect(),
    };
    Ok((eval, sol.warm_cache))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modal::build_modal_form;
    use crate::system::{build_oscillator, MassProfile, OscillatorSpec};
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn spectral_abscissa_basics() {
        assert_eq!(
            spectral_abscissa(&[c(-1.0, 2.0), c(-1.0, -2.0), c(-0.5, 0.0)]).unwrap(),
            -0.5
        );
        assert_eq!(spectral_abscissa(&[c(0.0, 1.0), c(0.0, -1.0)]).unwrap(), 0.0);
        assert!(spectral_abscissa(&[]).is_err());
    }

    #[test]
    fn ellipse_distance_reference_points() {
        let e = EllipseSpec::fixed(1.0, 2.0, 0.0);
        assert_abs_diff_eq!(ellipse_distance(c(0.0, 0.0), &e).unwrap(), 0.0);
        assert_abs_diff_eq!(ellipse_distance(c(1.0, 0.0), &e).unwrap(), 1.0);
        assert_abs_diff_eq!(ellipse_distance(c(0.0, 2.0), &e).unwrap(), 1.0);
        let ev = EllipseSpec::variable(1.0, 0.0, 0.0);
        assert!(ellipse_distance(c(0.0, 0.0), &ev).is_err());
    }

    proptest::proptest! {
        #[test]
        fn ellipse_boundary_parameterization(theta in 0.0f64..std::f64::consts::TAU,
                                             a in 0.1f64..5.0, b in 0.1f64..5.0,
                                             omega in 0.0f64..3.0) {
            let e = EllipseSpec::fixed(a, b, omega);
            let z = e.center() + c(a * theta.cos(), b * theta.sin());
            let d = ellipse_distance(z, &e).unwrap();
            proptest::prop_assert!((d - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn semi_major_consistency(re in -4.0f64..-0.01, dy in -0.9f64..0.9,
                                  b in 0.5f64..1.5, omega in 0.0f64..2.0) {
            let e = EllipseSpec::variable(b, omega, 0.0);
            let z = c(re, omega + dy * b);
            let a_star = semi_major(z, &e);
            proptest::prop_assert!(a_star.is_finite());
            let d = ellipse_distance_with(z, a_star, b, e.center());
            proptest::prop_assert!((d - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn spectrum_distance_scan() {
        let e1 = EllipseSpec::fixed(0.5, 0.5, 1.0);
        let e2 = EllipseSpec::fixed(0.5, 0.5, 3.0);
        let spectrum = [c(-2.0, 1.0), c(-2.0, -1.0), c(-0.1, 3.1), c(-0.1, -3.1)];
        let d = spectrum_ellipse_distance(&spectrum, &[e1, e2]).unwrap();
        assert_eq!(d.eigenvalue_index, 2);
        assert_eq!(d.ellipse_index, 1);
        assert!(d.value < 1.0);
        // eigenvalue exactly at a center
        let d0 = spectrum_ellipse_distance(&[c(0.0, 1.0)], &[EllipseSpec::fixed(1.0, 1.0, 1.0)])
            .unwrap();
        assert_eq!(d0.value, 0.0);
    }

    #[test]
    fn semi_major_reference_points() {
        let e = EllipseSpec::variable(1.0, 0.0, 0.0);
        assert_abs_diff_eq!(semi_major(c(-3.0, 0.0), &e), 3.0);
        assert_abs_diff_eq!(semi_major(c(-3.0, 0.6), &e), 3.75, epsilon = 1e-14);
        assert_eq!(semi_major(c(-3.0, 1.0), &e), f64::INFINITY);
        assert_eq!(semi_major(c(-3.0, 1.7), &e), f64::INFINITY);
    }

    #[test]
    fn spectrum_semi_major_scan() {
        let e = EllipseSpec::variable(0.5, 2.0, 0.0);
        let all_outside = [c(-1.0, 0.5), c(-1.0, -0.5)];
        let s = spectrum_semi_major(&all_outside, &e).unwrap();
        assert_eq!(s.value, f64::INFINITY);
        assert_eq!(s.eigenvalue_index, None);

        let one_in = [c(-2.0, 2.0), c(-2.0, -2.0), c(-5.0, 2.1)];
        let s = spectrum_semi_major(&one_in, &e).unwrap();
        assert_abs_diff_eq!(s.value, 2.0);
        assert_eq!(s.eigenvalue_index, Some(0));
    }

    #[test]
    fn barrier_reference_values() {
        let spec = BarrierSpec::new(-0.1, 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(spec.y, -0.025, epsilon = 1e-16);
        assert_eq!(spec.tau2, 0.0);
        assert_eq!(barrier(-0.1, &spec), 0.0);
        assert_eq!(barrier(-0.2, &spec), 0.0);
        assert_eq!(barrier(-0.025, &spec), 1.0);
        assert_abs_diff_eq!(
            barrier(-0.0125, &spec),
            -(0.5f64).ln() + 1.0,
            epsilon = 1e-14
        );
        assert_eq!(barrier(0.0, &spec), f64::INFINITY);
        assert_eq!(barrier(0.5, &spec), f64::INFINITY);
    }

    #[test]
    fn barrier_junction_continuity() {
        let spec = BarrierSpec::new(-0.1, 0.0, 1.0).unwrap();
        let eps = 1e-9;
        assert!(barrier(spec.y1 + eps, &spec).abs() <= 1e-10);
        assert!((barrier(spec.y - eps, &spec) - spec.h).abs() <= 1e-7);
        assert!((barrier(spec.y + eps, &spec) - spec.h).abs() <= 1e-7);
        // derivative continuity at the junction
        let left = barrier_derivative(spec.y, 1.0, &spec).unwrap();
        let right = barrier_derivative(spec.y + 1e-300, 1.0, &spec).unwrap();
        assert_abs_diff_eq!(left, right, epsilon = 1e-10 * left.abs());
        // zero slope at y1
        assert_eq!(barrier_derivative(spec.y1, 5.0, &spec).unwrap(), 0.0);
        assert!(barrier_derivative(0.0, 1.0, &spec).is_err());
    }

    #[test]
    fn barrier_derivative_matches_finite_differences() {
        let spec = BarrierSpec::new(-0.1, 0.0, 1.0).unwrap();
        let h = 1e-8;
        for &x in &[-0.09, -0.06, -0.03, -0.026, -0.024, -0.02, -0.01, -0.005] {
            let fd = (barrier(x + h, &spec) - barrier(x - h, &spec)) / (2.0 * h);
            let an = barrier_derivative(x, 1.0, &spec).unwrap();
            assert!(
                (fd - an).abs() <= 1e-6 * an.abs().max(1.0),
                "x={x}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn barrier_monotone_on_default_junction() {
        let spec = BarrierSpec::new(-0.2, 0.1, 1.0).unwrap();
        let mut prev = 0.0;
        for i in 0..1000 {
            let x = spec.y1 + (spec.y2 - spec.y1) * (i as f64 + 0.5) / 1001.0;
            let b = barrier(x, &spec);
            assert!(b >= prev - 1e-12, "not monotone at {x}");
            prev = b;
        }
    }

    #[test]
    fn barrier_custom_junction_coefficients() {
        // generic formulas reproduce the default-junction spec
        let spec = BarrierSpec::new(-0.1, 0.0, 1.0).unwrap();
        let gen = BarrierSpec::with_junction(-0.1, 0.0, spec.y, 1.0).unwrap();
        assert_abs_diff_eq!(gen.tau1, spec.tau1, epsilon = 1e-9 * spec.tau1.abs());
        assert!(gen.tau2.abs() <= 1e-10 * spec.tau1.abs());
    }

    fn test_system(n: usize) -> (crate::system::SystemMatrices, ModalForm) {
        let spec = OscillatorSpec {
            n,
            mass_profile: MassProfile::LinearRamp { lo: 10.0, hi: 300.0 },
            stiffness: 5.0,
            dampers: (1.max(n / 10), 3 * n / 10, n / 2),
        };
        let sys = build_oscillator(&spec, 0.004).unwrap();
        let mf = build_modal_form(&sys).unwrap();
        (sys, mf)
    }

    #[test]
    fn eigenvalue_gradient_scalar_closed_form() {
        // 1-DOF: λ² + (α+v)λ + 1 = 0 gives ∂λ/∂v = -λ/(2λ + α + v)
        let sys = crate::system::SystemMatrices::new(
            ndarray::array![[1.0]],
            ndarray::array![[1.0]],
            ndarray::array![[1.0]],
            0.1,
        )
        .unwrap();
        let v = Viscosities::from_slice(&[0.3]);
        let a = 0.1 + 0.3;
        let lambda = (c(-a, 0.0) + c(a * a - 4.0, 0.0).sqrt()) / 2.0;
        let x = ndarray::array![c(1.0, 0.0)];
        let grad = eigenvalue_gradient(&sys, &v, lambda, x.view()).unwrap();
        let expected = -lambda / (2.0 * lambda + c(a, 0.0));
        assert!((grad[0] - expected).norm() <= 1e-14);
    }

    #[test]
    fn eigenvalue_gradient_matches_finite_differences() {
        let (sys, mf) = test_system(6);
        let v = Viscosities::from_slice(&[0.4, 0.8, 0.3]);
        let mut sol = solve_qep(&mf, &v, &QepOptions::default()).unwrap();
        sol.materialize_vectors(&mf, &[2], true).unwrap();
        let lam = sol.values[2];
        let grad = eigenvalue_gradient(&sys, &v, lam, sol.vectors[&2].view()).unwrap();
        for j in 0..3 {
            let h = 1e-6;
            let mut vp = v.clone();
            vp.0[j] += h;
            let mut vm = v.clone();
            vm.0[j] -= h;
            let track = |vv: &Viscosities| -> C64 {
                let s = solve_qep(&mf, vv, &QepOptions::default()).unwrap();
                *s.values
                    .iter()
                    .min_by(|a, b| (*a - lam).norm().partial_cmp(&(*b - lam).norm()).unwrap())
                    .unwrap()
            };
            let fd = (track(&vp) - track(&vm)) / (2.0 * h);
            let rel = (grad[j] - fd).norm() / fd.norm().max(1e-12);
            assert!(rel <= 1e-5, "component {j}: analytic {:?} vs fd {fd:?}", grad[j]);
        }
    }

    #[test]
    fn eigenvalue_gradient_vanishing_coupling() {
        // g_jᵀ x = 0 makes the component exactly zero
        let sys = crate::system::SystemMatrices::new(
            ndarray::Array2::eye(2),
            ndarray::array![[4.0, 0.0], [0.0, 9.0]],
            ndarray::array![[1.0], [0.0]],
            0.2,
        )
        .unwrap();
        let v = Viscosities::from_slice(&[0.0]);
        // decoupled second mode: g^T e2 = 0
        let lam = (c(-0.2 * 3.0, 0.0) + c(0.36 * 9.0 - 36.0, 0.0).sqrt()) / 2.0;
        let x = ndarray::array![c(0.0, 0.0), c(1.0, 0.0)];
        let grad = eigenvalue_gradient(&sys, &v, lam, x.view()).unwrap();
        assert_eq!(grad[0], c(0.0, 0.0));
    }

    fn fd_check(
        analytic: &Array1<f64>,
        eval: impl Fn(&Viscosities) -> f64,
        v: &Viscosities,
        tol: f64,
    ) {
        for j in 0..v.len() {
            let h = 1e-6 * v.0[j].abs().max(1.0);
            let mut vp = v.clone();
            vp.0[j] += h;
            let mut vm = v.clone();
            vm.0[j] -= h;
            let fd = (eval(&vp) - eval(&vm)) / (2.0 * h);
            let rel = (analytic[j] - fd).abs() / fd.abs().max(1e-10);
            assert!(
                rel <= tol,
                "component {j}: analytic {} vs fd {fd} (rel {rel:e})",
                analytic[j]
            );
        }
    }

    #[test]
    fn model1_gradients_match_finite_differences() {
        let (sys, mf) = test_system(10);
        let config = ModelConfig {
            kind: ModelKind::Model1,
            ellipses: vec![EllipseSpec::fixed(0.01, 0.1, 0.4)],
            weights: None,
            caps: None,
            tol_sa: Some(-1e-4),
            eta: 0.0,
            mu0: 1.0,
        };
        config.validate().unwrap();
        let v = Viscosities::from_slice(&[0.5, 0.9, 0.4]);
        let eval = model1_eval(&sys, &mf, &config, &v).unwrap();
        assert!(eval.distance.unwrap() > 0.0);
        fd_check(
            &eval.objective_grad,
            |vv| model1_eval(&sys, &mf, &config, vv).unwrap().objective,
            &v,
            1e-5,
        );
        fd_check(
            &eval.constraint_grads[0],
            |vv| model1_eval(&sys, &mf, &config, vv).unwrap().constraints[0],
            &v,
            1e-5,
        );
        fd_check(
            &eval.constraint_grads[1],
            |vv| model1_eval(&sys, &mf, &config, vv).unwrap().constraints[1],
            &v,
            1e-5,
        );
        // sign convention: v ≥ 0 satisfied means -v ≤ 0
        assert!(eval.constraints[2] < 0.0);
    }

    #[test]
    fn model2_gradients_match_finite_differences() {
        let (sys, mf) = test_system(10);
        let config = ModelConfig {
            kind: ModelKind::Model2,
            ellipses: vec![
                EllipseSpec::variable(0.05, 0.2, 0.0),
                EllipseSpec::variable(0.05, 0.5, 0.0),
            ],
            weights: Some(vec![1.0, 0.4]),
            caps: Some(vec![50.0, 50.0]),
            tol_sa: Some(-1e-4),
            eta: 0.0,
            mu0: 1.0,
        };
        config.validate().unwrap();
        let v = Viscosities::from_slice(&[0.5, 0.9, 0.4]);
        let eval = model2_eval(&sys, &mf, &config, &v).unwrap();
        assert!(eval.objective.is_finite());
        fd_check(
            &eval.objective_grad,
            |vv| model2_eval(&sys, &mf, &config, vv).unwrap().objective,
            &v,
            1e-5,
        );
        fd_check(
            &eval.constraint_grads[0],
            |vv| model2_eval(&sys, &mf, &config, vv).unwrap().constraints[0],
            &v,
            1e-5,
        );
    }

    #[test]
    fn model2_capped_objective_is_exact() {
        let (sys, mf) = test_system(8);
        // caps far below the achievable semi-major axes
        let config = ModelConfig {
            kind: ModelKind::Model2,
            ellipses: vec![EllipseSpec::variable(0.05, 0.2, 0.0)],
            weights: Some(vec![0.7]),
            caps: Some(vec![1e-6]),
            tol_sa: Some(-1e-5),
            eta: 0.0,
            mu0: 3.0,
        };
        let v = Viscosities::from_slice(&[0.5, 0.9, 0.4]);
        let eval = model2_eval(&sys, &mf, &config, &v).unwrap();
        if eval.spectral_abscissa <= -1e-5 {
            assert_abs_diff_eq!(eval.objective, 3.0 * 0.7 * 1e-6, epsilon = 1e-18);
            assert!(eval.objective_grad.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn model_config_validation() {
        let bad = ModelConfig {
            kind: ModelKind::Model1,
            ellipses: vec![EllipseSpec::variable(0.1, 1.0, 0.0)],
            weights: None,
            caps: None,
            tol_sa: Some(-0.1),
            eta: 0.0,
            mu0: 1.0,
        };
        assert!(bad.validate().is_err());
        let bad_eta = ModelConfig {
            kind: ModelKind::Model2,
            ellipses: vec![EllipseSpec::variable(0.1, 1.0, 0.5)],
            weights: None,
            caps: None,
            tol_sa: Some(-0.1),
            eta: 0.0,
            mu0: 1.0,
        };
        assert!(bad_eta.validate().is_err());
    }
}
