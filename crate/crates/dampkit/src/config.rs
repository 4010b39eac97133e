//! JSON configuration schema for the batch commands.
//!
//! One `RunConfig` document serves every subcommand; which fields are
//! required depends on the command and is validated before any computation.
//! See the repository README for the schema reference.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DampkitError, Result};
use crate::objectives::{ModelConfig, ModelKind};
use crate::system::OscillatorSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Precompute,
    SolveQep,
    BenchScaling,
    BenchAccuracy,
    Optimize,
}

/// Benchmark damper placements from the scaling/accuracy experiments:
/// fractions of `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DamperPlacement {
    A,
    B,
}

impl DamperPlacement {
    /// 1-based damper indices `(j, k, l)` for a given system size.
    pub fn indices(&self, n: usize) -> (usize, usize, usize) {
        match self {
            DamperPlacement::A => (n / 10, 3 * n / 10, 5 * n / 10),
            DamperPlacement::B => (3 * n / 10, 7 * n / 10, 9 * n / 10),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            DamperPlacement::A => "A",
            DamperPlacement::B => "B",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Dense-oracle guard: disabled above this size.
    #[serde(default = "default_oracle_n_max")]
    pub n_max: usize,
}

fn default_true() -> bool {
    true
}

fn default_oracle_n_max() -> usize {
    800
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            enabled: true,
            n_max: default_oracle_n_max(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_bench_sizes")]
    pub n_values: Vec<usize>,
    #[serde(default = "default_placements")]
    pub placements: Vec<DamperPlacement>,
    /// Online-phase repetitions; the minimum time is reported.
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
}

fn default_bench_sizes() -> Vec<usize> {
    vec![200, 400, 800]
}

fn default_placements() -> Vec<DamperPlacement> {
    vec![DamperPlacement::A, DamperPlacement::B]
}

fn default_repetitions() -> usize {
    3
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_values: default_bench_sizes(),
            placements: default_placements(),
            repetitions: default_repetitions(),
        }
    }
}

/// Top-level run configuration (the JSON document passed via `--config`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// System description; required by precompute/solve-qep/optimize
    /// (benchmarks generate their own ramp oscillators).
    #[serde(default)]
    pub oscillator: Option<OscillatorSpec>,
    pub alpha: f64,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    /// Viscosities for `solve-qep` (defaults to zeros).
    #[serde(default)]
    pub v: Option<Vec<f64>>,
    /// Optimization starting point (defaults to ones).
    #[serde(default)]
    pub v_init: Option<Vec<f64>>,
    /// Optimization approach 1 (Model 1) or 2 (Model 2); may also come from
    /// the command line.
    #[serde(default)]
    pub approach: Option<u8>,
    #[serde(default = "default_starts")]
    pub starts: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    /// Cache directory (the `DAMPKIT_CACHE_DIR` environment variable takes
    /// precedence).
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

fn default_starts() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn oscillator_required(&self) -> Result<&OscillatorSpec> {
        self.oscillator
            .as_ref()
            .ok_or_else(|| DampkitError::Config("this command requires an `oscillator` section".into()))
    }

    pub fn model_required(&self) -> Result<&ModelConfig> {
        self.model
            .as_ref()
            .ok_or_else(|| DampkitError::Config("this command requires a `model` section".into()))
    }

    /// Command-specific validation, before any computation.
    pub fn validate(&self, command: Command) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(DampkitError::Config("alpha must be nonnegative".into()));
        }
        match command {
            Command::Precompute => {
                self.oscillator_required()?;
            }
            Command::SolveQep => {
                let spec = self.oscillator_required()?;
                if let Some(v) = &self.v {
                    if v.len() != 3 {
                        return Err(DampkitError::Config(format!(
                            "v must have 3 entries for the oscillator family, got {}",
                            v.len()
                        )));
                    }
                }
                let _ = spec;
            }
            Command::BenchScaling | Command::BenchAccuracy => {
                if self.bench.n_values.is_empty() {
                    return Err(DampkitError::Config("bench.n_values must be nonempty".into()));
                }
                if self.bench.placements.is_empty() {
                    return Err(DampkitError::Config("bench.placements must be nonempty".into()));
                }
                if self.bench.n_values.iter().any(|&n| n < 10) {
                    return Err(DampkitError::Config(
                        "benchmark sizes below 10 are not meaningful".into(),
                    ));
                }
                if command == Command::BenchAccuracy {
                    if !self.oracle.enabled {
                        return Err(DampkitError::Config(
                            "bench-accuracy requires the oracle to be enabled".into(),
                        ));
                    }
                    if let Some(&n) = self
                        .bench
                        .n_values
                        .iter()
                        .find(|&&n| n > self.oracle.n_max)
                    {
                        return Err(DampkitError::Config(format!(
                            "bench-accuracy size {n} exceeds oracle.n_max = {}",
                            self.oracle.n_max
                        )));
                    }
                }
            }
            Command::Optimize => {
                self.oscillator_required()?;
                let model = self.model_required()?;
                model.validate()?;
                if let Some(a) = self.approach {
                    let expected = match a {
                        1 => ModelKind::Model1,
                        2 => ModelKind::Model2,
                        _ => {
                            return Err(DampkitError::Config(format!(
                                "approach must be 1 or 2, got {a}"
                            )))
                        }
                    };
                    if model.kind != expected {
                        return Err(DampkitError::Config(format!(
                            "approach {a} conflicts with model.kind {:?}",
                            model.kind
                        )));
                    }
                }
                if self.starts == 0 {
                    return Err(DampkitError::Config("starts must be at least 1".into()));
                }
                if let Some(v) = &self.v_init {
                    if v.len() != 3 {
                        return Err(DampkitError::Config(
                            "v_init must have 3 entries for the oscillator family".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}
