//! Batch drivers behind the `dampkit` CLI: offline precompute, single QEP
//! solves, scaling and accuracy benchmarks, and the end-to-end viscosity
//! optimization (offline stage, then the chosen model solved from one or
//! more starts).
//!
//! All randomness flows through a named generator: `ChaCha8Rng` seeded with
//! SHA-256 of the user seed and a per-purpose stream label, so identical
//! configurations reproduce identical artifacts byte for byte (timing columns
//! aside).

use std::cell::RefCell;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::cache;
use crate::config::{Command, DamperPlacement, RunConfig};
use crate::error::{DampkitError, Result};
use crate::modal::{build_modal_form, ModalForm};
use crate::objectives::{
    model1_eval_with_cache, model2_eval_with_cache, spectral_abscissa, ModelConfig, ModelEval,
    ModelKind, SemiMajor,
};
use crate::optimizer::{multi_start, NlpEval, NlpOptions, NlpProblem, OptResult, Sense};
use crate::oracle;
use crate::qep::{solve_qep, QepOptions, VectorRequest, WarmCache};
use crate::system::{build_oscillator, MassProfile, OscillatorSpec, SystemMatrices, Viscosities};
use crate::C64;

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct CliOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub oracle: Option<bool>,
    pub approach: Option<u8>,
    pub starts: Option<usize>,
}

pub fn apply_overrides(cfg: &mut RunConfig, ov: &CliOverrides) {
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(o) = &ov.out {
        cfg.output_dir = o.clone();
    }
    if let Some(e) = ov.oracle {
        cfg.oracle.enabled = e;
    }
    if let Some(a) = ov.approach {
        cfg.approach = Some(a);
    }
    if let Some(s) = ov.starts {
        cfg.starts = s;
    }
}

/// Named, seedable generator: ChaCha8 keyed by SHA-256(seed ‖ stream label).
pub fn rng_for(seed: u64, stream: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Benchmark viscosities `v = 0.1 + uniform[0,1)`, one 3-vector per draw.
pub fn draw_viscosities(rng: &mut ChaCha8Rng, r: usize) -> Viscosities {
    Viscosities(Array1::from_iter((0..r).map(|_| 0.1 + rng.random::<f64>())))
}

fn ensure_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_spectrum_csv(path: &Path, values: &[C64]) -> Result<()> {
    let mut out = String::from("re,im\n");
    for v in values {
        out.push_str(&format!("{:e},{:e}\n", v.re, v.im));
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn build_system(cfg: &RunConfig) -> Result<SystemMatrices> {
    build_oscillator(cfg.oscillator_required()?, cfg.alpha)
}

fn modal_for(cfg: &RunConfig, sys: &SystemMatrices) -> Result<(ModalForm, bool, PathBuf)> {
    let dir = cache::resolve_cache_dir(cfg.cache_dir.as_deref());
    let (mf, from_cache) = cache::load_or_build(&dir, sys)?;
    let path = cache::cache_path(&dir, sys);
    Ok((mf, from_cache, path))
}

/// Ramp oscillator of the scaling/accuracy experiments: masses 10 → 1000,
/// uniform springs k = 5.
pub fn benchmark_oscillator(n: usize, placement: DamperPlacement) -> OscillatorSpec {
    OscillatorSpec {
        n,
        mass_profile: MassProfile::LinearRamp { lo: 10.0, hi: 1000.0 },
        stiffness: 5.0,
        dampers: placement.indices(n),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PrecomputeReport {
    pub n: usize,
    pub key: String,
    pub cache_path: PathBuf,
    pub from_cache: bool,
    pub offline_seconds: f64,
}

pub fn run_precompute(cfg: &RunConfig) -> Result<PrecomputeReport> {
    cfg.validate(Command::Precompute)?;
    ensure_out(&cfg.output_dir)?;
    let sys = build_system(cfg)?;
    let t0 = Instant::now();
    let (_, from_cache, path) = modal_for(cfg, &sys)?;
    let report = PrecomputeReport {
        n: sys.n(),
        key: cache::cache_key(&sys),
        cache_path: path,
        from_cache,
        offline_seconds: t0.elapsed().as_secs_f64(),
    };
    write_json(&cfg.output_dir.join("precompute.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveQepReport {
    pub n: usize,
    pub v: Vec<f64>,
    pub spectral_abscissa: f64,
    pub median_residual: f64,
    pub worst_residual: f64,
    pub spectrum_path: PathBuf,
}

pub fn run_solve_qep(cfg: &RunConfig) -> Result<SolveQepReport> {
    cfg.validate(Command::SolveQep)?;
    ensure_out(&cfg.output_dir)?;
    let sys = build_system(cfg)?;
    let (mf, _, _) = modal_for(cfg, &sys)?;
    let v = Viscosities(Array1::from(
        cfg.v.clone().unwrap_or_else(|| vec![0.0; sys.num_dampers()]),
    ));
    let mut sol = solve_qep(
        &mf,
        &v,
        &QepOptions {
            want_vectors: VectorRequest::All,
            ..Default::default()
        },
    )?;
    sol.compute_residuals(&sys, &mf)?;
    let resids: Vec<f64> = sol.residuals.as_ref().unwrap().values().copied().collect();
    let spectrum_path = cfg.output_dir.join("spectrum.csv");
    write_spectrum_csv(&spectrum_path, &sol.values.to_vec())?;
    let report = SolveQepReport {
        n: sys.n(),
        v: v.0.to_vec(),
        spectral_abscissa: sol.spectral_abscissa(),
        median_residual: oracle::median(&resids),
        worst_residual: resids.iter().fold(0.0f64, |m, &x| m.max(x)),
        spectrum_path,
    };
    write_json(&cfg.output_dir.join("solve_qep.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingRow {
    pub n: usize,
    pub t_offline_s: f64,
    pub t_online_s: f64,
    pub t_oracle_s: Option<f64>,
}

/// Scaling benchmark: offline time, online time (eigenvalues plus two
/// selectively refined eigenvectors, the optimization workload), and the
/// dense-oracle time where enabled. Uses the first configured damper
/// placement.
pub fn run_bench_scaling(cfg: &RunConfig) -> Result<Vec<ScalingRow>> {
    cfg.validate(Command::BenchScaling)?;
    ensure_out(&cfg.output_dir)?;
    let placement = cfg.bench.placements[0];
    let mut rows = Vec::new();
    for &n in &cfg.bench.n_values {
        let spec = benchmark_oscillator(n, placement);
        let sys = build_oscillator(&spec, cfg.alpha)?;
        let t0 = Instant::now();
        let mf = build_modal_form(&sys)?;
        let t_offline = t0.elapsed().as_secs_f64();

        let mut rng = rng_for(cfg.seed, &format!("scaling-n{n}"));
        let v = draw_viscosities(&mut rng, sys.num_dampers());

        let mut t_online = f64::INFINITY;
        for _ in 0..cfg.bench.repetitions.max(1) {
            let t = Instant::now();
            let sol = solve_qep(
                &mf,
                &v,
                &QepOptions {
                    want_vectors: VectorRequest::Indices(vec![0, n]),
                    ..Default::default()
                },
            )?;
            t_online = t_online.min(t.elapsed().as_secs_f64());
            std::hint::black_box(&sol.values);
        }

        let t_oracle = if cfg.oracle.enabled && n <= cfg.oracle.n_max {
            let t = Instant::now();
            let vals = oracle::dense_qep_eigenvalues(&mf, &v)?;
            std::hint::black_box(&vals);
            Some(t.elapsed().as_secs_f64())
        } else {
            None
        };
        rows.push(ScalingRow {
            n,
            t_offline_s: t_offline,
            t_online_s: t_online,
            t_oracle_s: t_oracle,
        });
    }
    let mut csv = String::from("n,t_offline_s,t_online_s,t_oracle_s\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{:e},{:e},{}\n",
            row.n,
            row.t_offline_s,
            row.t_online_s,
            row.t_oracle_s.map_or("nan".into(), |t| format!("{t:e}")),
        ));
    }
    fs::write(cfg.output_dir.join("bench_scaling.csv"), csv)?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct AccuracyRow {
    pub n: usize,
    pub config: String,
    pub median_eig_err: f64,
    pub worst_eig_err: f64,
    pub median_resid: f64,
    pub worst_resid: f64,
}

/// Accuracy benchmark against the dense oracle: greedy eigenvalue matching
/// with componentwise relative errors, plus eigenpair residuals over the full
/// computed spectrum.
pub fn run_bench_accuracy(cfg: &RunConfig) -> Result<Vec<AccuracyRow>> {
    cfg.validate(Command::BenchAccuracy)?;
    ensure_out(&cfg.output_dir)?;
    let mut rows = Vec::new();
    for &n in &cfg.bench.n_values {
        for &placement in &cfg.bench.placements {
            let spec = benchmark_oscillator(n, placement);
            let sys = build_oscillator(&spec, cfg.alpha)?;
            let mf = build_modal_form(&sys)?;
            let mut rng = rng_for(cfg.seed, &format!("accuracy-n{n}-{}", placement.label()));
            let v = draw_viscosities(&mut rng, sys.num_dampers());

            let mut sol = solve_qep(
                &mf,
                &v,
                &QepOptions {
                    want_vectors: VectorRequest::All,
                    ..Default::default()
                },
            )?;
            sol.compute_residuals(&sys, &mf)?;
            let reference = oracle::dense_qep_eigenvalues(&mf, &v)?;
            let errs = oracle::greedy_match_errors(&sol.values.to_vec(), &reference.to_vec())?;
            let resids: Vec<f64> = sol.residuals.as_ref().unwrap().values().copied().collect();
            rows.push(AccuracyRow {
                n,
                config: placement.label().to_string(),
                median_eig_err: oracle::median(&errs),
                worst_eig_err: errs.iter().fold(0.0f64, |m, &x| m.max(x)),
                median_resid: oracle::median(&resids),
                worst_resid: resids.iter().fold(0.0f64, |m, &x| m.max(x)),
            });
        }
    }
    let mut csv = String::from("n,config,median_eig_err,worst_eig_err,median_resid,worst_resid\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{:e},{:e},{:e},{:e}\n",
            row.n,
            row.config,
            row.median_eig_err,
            row.worst_eig_err,
            row.median_resid,
            row.worst_resid,
        ));
    }
    fs::write(cfg.output_dir.join("bench_accuracy.csv"), csv)?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimizeReport {
    pub approach: u8,
    pub tol_sa: f64,
    pub alpha_zero: f64,
    pub alpha_init: f64,
    pub alpha_opt: f64,
    pub objective_init: f64,
    pub objective_opt: f64,
    /// `d_{Λ,ℰ}` at the optimum (Model 1).
    pub distance_opt: Option<f64>,
    /// Uncapped semi-major values at the optimum (Model 2).
    pub semi_major_opt: Vec<f64>,
    pub feasible: bool,
    pub v_init: Vec<f64>,
    pub v_opt: Vec<f64>,
    pub result: OptResult,
}

fn model_eval(
    sys: &SystemMatrices,
    mf: &ModalForm,
    model: &ModelConfig,
    v: &Viscosities,
    warm: Option<&WarmCache>,
) -> Result<(ModelEval, WarmCache)> {
    match model.kind {
        ModelKind::Model1 => model1_eval_with_cache(sys, mf, model, v, warm),
        ModelKind::Model2 => model2_eval_with_cache(sys, mf, model, v, warm),
    }
}

/// Feasibility of a point under the model's constraints, with the published
/// slacks (`d ≥ 1 - 1e-6`, `α ≤ tol_sa + 1e-10`, `v ≥ 0`).
pub fn is_feasible(model: &ModelConfig, eval: &ModelEval, v: &Viscosities) -> bool {
    let tol_sa = model.tol_sa.expect("resolved before evaluation");
    let stable = eval.spectral_abscissa <= tol_sa + 1e-10;
    let nonneg = v.is_nonnegative();
    match model.kind {
        ModelKind::Model1 => {
            stable && nonneg && eval.distance.map_or(false, |d| d >= 1.0 - 1e-6)
        }
        ModelKind::Model2 => stable && nonneg,
    }
}

/// End-to-end driver: offline stage (cached), stability-tolerance default,
/// multi-start optimization, artifact emission.
pub fn run_optimize(cfg: &RunConfig) -> Result<OptimizeReport> {
    cfg.validate(Command::Optimize)?;
    ensure_out(&cfg.output_dir)?;
    let sys = build_system(cfg)?;
    let (mf, _, _) = modal_for(cfg, &sys)?;
    let r = sys.num_dampers();

    let v_init = Viscosities(Array1::from(
        cfg.v_init.clone().unwrap_or_else(|| vec![1.0; r]),
    ));
    let v_zero = Viscosities(Array1::zeros(r));

    let sol_zero = solve_qep(&mf, &v_zero, &QepOptions::default())?;
    let sol_init = solve_qep(&mf, &v_init, &QepOptions::default())?;
    let alpha_zero = spectral_abscissa(&sol_zero.values.to_vec())?;
    let alpha_init = spectral_abscissa(&sol_init.values.to_vec())?;

    let mut model = cfg.model_required()?.clone();
    if model.tol_sa.is_none() {
        let tol = 0.9 * alpha_init.min(alpha_zero);
        if tol >= 0.0 {
            return Err(DampkitError::Config(format!(
                "cannot default tol_sa: system is not asymptotically stable at the baselines \
                 (α(v_init) = {alpha_init:e}, α(v_zero) = {alpha_zero:e})"
            )));
        }
        model.tol_sa = Some(tol);
    }
    model.validate()?;
    let tol_sa = model.tol_sa.expect("just resolved");

    let (init_eval, _) = model_eval(&sys, &mf, &model, &v_init, None)?;
    let objective_init = init_eval.objective;

    // first start is v_init; extra starts scale it log-uniformly in [1/4, 4)
    let mut starts: Vec<Array1<f64>> = vec![v_init.0.clone()];
    let mut rng = rng_for(cfg.seed, "multistart");
    for _ in 1..cfg.starts {
        let start = Array1::from_iter(v_init.0.iter().map(|&b| {
            let base = b.max(0.1);
            base * (0.25f64.ln() + rng.random::<f64>() * 16.0f64.ln()).exp()
        }));
        starts.push(start);
    }

    let sense = match model.kind {
        ModelKind::Model1 => Sense::Minimize,
        ModelKind::Model2 => Sense::Maximize,
    };
    let sys_ref = &sys;
    let mf_ref = &mf;
    let model_ref = &model;
    let factory = move || -> NlpProblem<'_> {
        let warm: RefCell<Option<WarmCache>> = RefCell::new(None);
        NlpProblem {
            dim: r,
            sense,
            eval: Box::new(move |v: &Array1<f64>| {
                let visc = Viscosities(v.clone());
                let (eval, cache) =
                    model_eval(sys_ref, mf_ref, model_ref, &visc, warm.borrow().as_ref())?;
                *warm.borrow_mut() = Some(cache);
                Ok(NlpEval {
                    objective: eval.objective,
                    gradient: eval.objective_grad,
                    constraints: eval.constraints,
                    constraint_grads: eval.constraint_grads,
                })
            }),
        }
    };
    let opts = NlpOptions::default();
    let mut best = multi_start(factory, &starts, &opts)?;

    // project round-off negatives back onto the physical set
    let v_opt = Viscosities(Array1::from_iter(
        best.v_opt.iter().map(|&x| if x < 0.0 && x > -1e-6 { 0.0 } else { x }),
    ));
    best.v_opt = v_opt.0.to_vec();

    let (opt_eval, _) = model_eval(&sys, &mf, &model, &v_opt, None)?;
    let feasible = is_feasible(&model, &opt_eval, &v_opt);
    let sol_opt = solve_qep(&mf, &v_opt, &QepOptions::default())?;

    // artifacts
    write_spectrum_csv(&cfg.output_dir.join("spectrum_vzero.csv"), &sol_zero.values.to_vec())?;
    write_spectrum_csv(&cfg.output_dir.join("spectrum_vinit.csv"), &sol_init.values.to_vec())?;
    write_spectrum_csv(&cfg.output_dir.join("spectrum_vopt.csv"), &sol_opt.values.to_vec())?;

    let mut ellipse_csv = String::from("ellipse,a,b,omega,eta\n");
    let caps = model.caps_or_default();
    for (j, e) in model.ellipses.iter().enumerate() {
        let a = match e.a {
            SemiMajor::Fixed(a) => a,
            SemiMajor::Variable(_) => opt_eval.semi_major_values[j].min(caps[j]),
        };
        ellipse_csv.push_str(&format!("{},{:e},{:e},{:e},{:e}\n", j, a, e.b, e.omega, e.eta));
    }
    fs::write(cfg.output_dir.join("ellipses.csv"), ellipse_csv)?;

    let mut history_csv = String::from("iteration,objective,violation,step\n");
    for h in &best.history {
        history_csv.push_str(&format!(
            "{},{:e},{:e},{:e}\n",
            h.iteration, h.objective, h.violation, h.step
        ));
    }
    fs::write(cfg.output_dir.join("history.csv"), history_csv)?;

    let report = OptimizeReport {
        approach: match model.kind {
            ModelKind::Model1 => 1,
            ModelKind::Model2 => 2,
        },
        tol_sa,
        alpha_zero,
        alpha_init,
        alpha_opt: opt_eval.spectral_abscissa,
        objective_init,
        objective_opt: opt_eval.objective,
        distance_opt: opt_eval.distance,
        semi_major_opt: opt_eval.semi_major_values.clone(),
        feasible,
        v_init: v_init.0.to_vec(),
        v_opt: v_opt.0.to_vec(),
        result: best,
    };
    write_json(&cfg.output_dir.join("opt_result.json"), &report)?;
    Ok(report)
}
