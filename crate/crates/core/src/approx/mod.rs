//! Gradient-descent low-rank approximation of weight matrices.
//!
//! `approximate` draws `A⁽⁰⁾ (r×k)` and `B⁽⁰⁾ (d×r)` from a normal
//! distribution, runs Adam on `‖W0 − BA‖²_F` under a step-decay schedule, and
//! freezes the residual `R = W0 − B⁽ᵀ⁾A⁽ᵀ⁾`. Reported losses are MSE (the
//! Frobenius objective divided by `d·k`); both are kept in the trajectory.

pub mod cache;
pub mod model;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState, GradWorkspace, StepLrSchedule};
use crate::stats::layer_stats;
use crate::tensor::{self, content_hash, derive_seed, sample, DistributionSpec, Matrix};

pub use cache::{ApproxCache, CacheEntry, CacheHit, CacheKey};
pub use model::{approximate_layer, approximate_model, LayerOutcome, LayerStatus, Manifest, ManifestLayer, ModelRun, Role, TargetFilter};

/// Default number of layers approximated concurrently.
pub const DEFAULT_CONCURRENCY: usize = 64;
pub const DEFAULT_STEPS: usize = 20_000;
pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_TRAJECTORY_STRIDE: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxConfig {
    pub rank: usize,
    pub steps: usize,
    /// `schedule.base_lr` is the learning rate.
    pub schedule: StepLrSchedule,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub init_mu: f64,
    /// `None` resolves to the global σ̄ of the targeted layers (or the
    /// layer's own σ when approximating a single matrix).
    #[serde(default)]
    pub init_sigma: Option<f64>,
    pub seed: u64,
    pub trajectory_stride: usize,
    /// Steps at which `(A, B)` snapshots are kept.
    #[serde(default)]
    pub checkpoint_steps: Vec<usize>,
}

impl Default for ApproxConfig {
    fn default() -> Self {
        ApproxConfig {
            rank: DEFAULT_RANK,
            steps: DEFAULT_STEPS,
            schedule: StepLrSchedule::default(),
            adam: AdamConfig::default(),
            init_mu: 0.0,
            init_sigma: None,
            seed: 0,
            trajectory_stride: DEFAULT_TRAJECTORY_STRIDE,
            checkpoint_steps: Vec::new(),
        }
    }
}

impl ApproxConfig {
    pub fn lr(&self) -> f64 {
        self.schedule.base_lr
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::invalid("rank must be >= 1"));
        }
        if self.trajectory_stride == 0 {
            return Err(Error::invalid("trajectory stride must be >= 1"));
        }
        if !self.init_mu.is_finite() {
            return Err(Error::invalid("init mean must be finite"));
        }
        if let Some(s) = self.init_sigma {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::invalid(format!("init sigma must be > 0, got {s}")));
            }
        }
        self.schedule.validate()
    }

    pub fn validate_for(&self, rows: usize, cols: usize) -> Result<()> {
        self.validate()?;
        check_rank(self.rank, rows, cols)
    }
}

pub(crate) fn check_rank(rank: usize, rows: usize, cols: usize) -> Result<()> {
    if rank == 0 || rank >= rows.min(cols) {
        return Err(Error::invalid(format!(
            "rank must be < min(d,k): rank {rank} for a {rows}x{cols} layer"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub frobenius_sq: f64,
    pub mse: f64,
}

/// Snapshot of the factors after `step` updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorCheckpoint {
    pub step: usize,
    pub a: Matrix,
    pub b: Matrix,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxResult {
    pub a: Matrix,
    pub b: Matrix,
    pub residual: Matrix,
    pub final_mse: f64,
    pub final_frobenius_sq: f64,
    pub trajectory: Vec<TrajectoryPoint>,
    pub checkpoints: Vec<FactorCheckpoint>,
    /// Config with `init_sigma` resolved.
    pub config: ApproxConfig,
    pub w0_hash: String,
    pub steps_executed: usize,
}

impl ApproxResult {
    pub fn checkpoint(&self, step: usize) -> Option<&FactorCheckpoint> {
        self.checkpoints.iter().find(|c| c.step == step)
    }

    /// `residual + b·a`, the weight the approximation stands for.
    pub fn reconstruct(&self) -> Result<Matrix> {
        self.residual.add(&self.b.matmul(&self.a)?)
    }
}

/// Initial factors `A⁽⁰⁾ (r×k)` and `B⁽⁰⁾ (d×r)` from `N(mu, sigma²)`, each
/// with its own seed derived from `seed`.
pub fn draw_factors(d: usize, k: usize, rank: usize, mu: f64, sigma: f64, seed: u64) -> Result<(Matrix, Matrix)> {
    let spec = DistributionSpec::Normal { mean: mu, std: sigma };
    let a = sample(&spec, rank, k, derive_seed(seed, "factor", "a"))?;
    let b = sample(&spec, d, rank, derive_seed(seed, "factor", "b"))?;
    Ok((a, b))
}

pub fn resolve_sigma(w0: &Matrix, cfg: &ApproxConfig) -> Result<f64> {
    match cfg.init_sigma {
        Some(s) => Ok(s),
        None => {
            let s = layer_stats(w0, "w0")?.sigma;
            if s > 0.0 {
                Ok(s)
            } else {
                Err(Error::invalid("weight matrix has zero spread; pass an explicit init sigma"))
            }
        }
    }
}

pub fn approximate(w0: &Matrix, cfg: &ApproxConfig) -> Result<ApproxResult> {
    let (d, k) = w0.shape();
    cfg.validate_for(d, k)?;
    let sigma = resolve_sigma(w0, cfg)?;
    let mut config = cfg.clone();
    config.init_sigma = Some(sigma);
    let r = cfg.rank;
    let n = (d * k) as f64;
    let diverged = |step: usize| Error::Diverged {
        step,
        rank: r,
        lr: cfg.lr(),
        init_sigma: sigma,
        seed: cfg.seed,
    };

    let (mut a, mut b) = draw_factors(d, k, r, cfg.init_mu, sigma, cfg.seed)?;
    let mut adam_a = AdamState::for_param(&a, cfg.adam);
    let mut adam_b = AdamState::for_param(&b, cfg.adam);
    let mut ws = GradWorkspace::new(d, k, r);
    let wanted: BTreeSet<usize> = cfg.checkpoint_steps.iter().copied().filter(|&s| s <= cfg.steps).collect();
    let mut trajectory = Vec::with_capacity(cfg.steps / cfg.trajectory_stride + 2);
    let mut checkpoints = Vec::with_capacity(wanted.len());

    for t in 0..cfg.steps {
        let objective = ws.evaluate(w0, &a, &b);
        if !objective.is_finite() {
            return Err(diverged(t));
        }
        if t % cfg.trajectory_stride == 0 {
            trajectory.push(TrajectoryPoint {
                step: t,
                frobenius_sq: objective,
                mse: objective / n,
            });
        }
        if wanted.contains(&t) {
            checkpoints.push(FactorCheckpoint {
                step: t,
                a: a.clone(),
                b: b.clone(),
                mse: objective / n,
            });
        }
        let lr = cfg.schedule.lr_at(t);
        adam_a.apply(a.data_mut(), &ws.grad_a, lr);
        adam_b.apply(b.data_mut(), &ws.grad_b, lr);
    }

    if a.data().iter().chain(b.data()).any(|v| !v.is_finite()) {
        return Err(diverged(cfg.steps));
    }
    let product = b.matmul(&a).map_err(|_| diverged(cfg.steps))?;
    let residual = w0.sub(&product).map_err(|_| diverged(cfg.steps))?;
    let final_frobenius_sq = tensor::frobenius_sq_diff(w0, &product)?;
    if !final_frobenius_sq.is_finite() {
        return Err(diverged(cfg.steps));
    }
    let final_mse = final_frobenius_sq / n;
    trajectory.push(TrajectoryPoint {
        step: cfg.steps,
        frobenius_sq: final_frobenius_sq,
        mse: final_mse,
    });
    if wanted.contains(&cfg.steps) {
        checkpoints.push(FactorCheckpoint {
            step: cfg.steps,
            a: a.clone(),
            b: b.clone(),
            mse: final_mse,
        });
    }

    Ok(ApproxResult {
        a,
        b,
        residual,
        final_mse,
        final_frobenius_sq,
        trajectory,
        checkpoints,
        config,
        w0_hash: content_hash(w0),
        steps_executed: cfg.steps,
    })
}

/// Writes `step,frobenius_sq,mse` rows.
pub fn write_trajectory_csv(path: &Path, trajectory: &[TrajectoryPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "frobenius_sq", "mse"])?;
    for p in trajectory {
        w.write_record([p.step.to_string(), p.frobenius_sq.to_string(), p.mse.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(format!("flush {}", path.display()), e))
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectoryPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["step", "frobenius_sq", "mse"] {
        return Err(Error::Format(format!("unexpected trajectory header {headers:?}")));
    }
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}
