//! Adapted linear layers: a frozen matrix plus a trainable low-rank pair.
//!
//! The effective weight is `frozen + scaling·(b·a)`. Every strategy picks
//! `frozen` so that the effective weight equals the base weight `w0` at
//! construction; strategies differ only in where `(a, b)` start.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::approx::{check_rank, draw_factors, ApproxResult};
use crate::error::{Error, Result};
use crate::tensor::{content_hash, derive_seed, matmul, matmul_nt, matmul_tn, sample, DistributionSpec, Dtype, Matrix};
use crate::wtn;

/// Standard deviation used by the wide-normal strategy unless overridden.
pub const ALPHA_SIGMA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitStrategy {
    /// `a` Kaiming-uniform, `b = 0`.
    Lora,
    /// Factors from a gradient-descent approximation of `w0`.
    #[serde(rename = "inilora")]
    IniLora,
    /// `a, b ~ N(0, sigma²)` with a wide sigma.
    #[serde(rename = "inilora-alpha")]
    IniLoraAlpha { sigma: f64 },
    /// `a, b` from Kaiming-normal.
    #[serde(rename = "inilora-beta-kn")]
    IniLoraBetaKn,
    /// `a, b` from Kaiming-uniform.
    #[serde(rename = "inilora-beta-ku")]
    IniLoraBetaKu,
    /// The raw normal draw an approximation would start from, with no steps.
    #[serde(rename = "inilora-iter0")]
    IniLoraIter0 { sigma: f64 },
}

impl InitStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            InitStrategy::Lora => "lora",
            InitStrategy::IniLora => "inilora",
            InitStrategy::IniLoraAlpha { .. } => "inilora-alpha",
            InitStrategy::IniLoraBetaKn => "inilora-beta-kn",
            InitStrategy::IniLoraBetaKu => "inilora-beta-ku",
            InitStrategy::IniLoraIter0 { .. } => "inilora-iter0",
        }
    }

    pub fn needs_approximation(&self) -> bool {
        matches!(self, InitStrategy::IniLora)
    }

    /// Parses a strategy name; `sigma_bar` fills in the iter0 sigma.
    pub fn parse(name: &str, alpha_sigma: Option<f64>, sigma_bar: f64) -> Result<Self> {
        match name {
            "lora" => Ok(InitStrategy::Lora),
            "inilora" => Ok(InitStrategy::IniLora),
            "inilora-alpha" => Ok(InitStrategy::IniLoraAlpha {
                sigma: alpha_sigma.unwrap_or(ALPHA_SIGMA),
            }),
            "inilora-beta-kn" => Ok(InitStrategy::IniLoraBetaKn),
            "inilora-beta-ku" => Ok(InitStrategy::IniLoraBetaKu),
            "inilora-iter0" => Ok(InitStrategy::IniLoraIter0 { sigma: sigma_bar }),
            _ => Err(Error::invalid(format!(
                "unknown strategy {name:?} (expected lora, inilora, inilora-alpha, inilora-beta-kn, inilora-beta-ku, inilora-iter0)"
            ))),
        }
    }
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitStrategy::IniLoraAlpha { sigma } | InitStrategy::IniLoraIter0 { sigma } => {
                write!(f, "{}(sigma={sigma})", self.name())
            }
            _ => f.write_str(self.name()),
        }
    }
}

impl FromStr for InitStrategy {
    type Err = Error;

    /// Accepts `name` or `name:sigma` for the two normal strategies.
    fn from_str(s: &str) -> Result<Self> {
        let (name, sigma) = match s.split_once(':') {
            Some((n, v)) => (
                n,
                Some(v.parse::<f64>().map_err(|_| Error::invalid(format!("bad sigma in {s:?}")))?),
            ),
            None => (s, None),
        };
        match (name, sigma) {
            ("inilora-iter0", None) => Err(Error::invalid("inilora-iter0 needs a sigma (inilora-iter0:<sigma>)")),
            ("inilora-iter0", Some(v)) => Ok(InitStrategy::IniLoraIter0 { sigma: v }),
            (n, v) => InitStrategy::parse(n, v, f64::NAN),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterInit {
    pub strategy: InitStrategy,
    pub rank: usize,
    pub seed: u64,
    pub scaling: f64,
    /// When false the frozen matrix is `w0` itself and the initial function
    /// shifts by `scaling·b·a`.
    pub keep_residual: bool,
}

impl AdapterInit {
    pub fn new(strategy: InitStrategy, rank: usize, seed: u64) -> Self {
        AdapterInit {
            strategy,
            rank,
            seed,
            scaling: 1.0,
            keep_residual: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptedLinear {
    frozen: Matrix,
    pub a: Matrix,
    pub b: Matrix,
    scaling: f64,
    strategy: InitStrategy,
    seed: u64,
    w0_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub a: Matrix,
    pub b: Matrix,
    pub x: Matrix,
}

fn validate_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("strategy sigma must be > 0, got {sigma}")))
    }
}

pub fn init_adapter(w0: &Matrix, init: &AdapterInit, approx: Option<&ApproxResult>) -> Result<AdaptedLinear> {
    let (d, k) = w0.shape();
    let r = init.rank;
    check_rank(r, d, k)?;
    if !(init.scaling.is_finite() && init.scaling > 0.0) {
        return Err(Error::invalid(format!("scaling must be > 0, got {}", init.scaling)));
    }
    let w0_hash = content_hash(w0);
    match (init.strategy.needs_approximation(), approx) {
        (true, None) => return Err(Error::invalid("inilora needs an approximation result")),
        (false, Some(_)) => {
            return Err(Error::invalid(format!(
                "{} does not take an approximation result",
                init.strategy.name()
            )))
        }
        _ => {}
    }
    let seed_a = derive_seed(init.seed, "adapter", "a");
    let seed_b = derive_seed(init.seed, "adapter", "b");

    let (a, b) = match init.strategy {
        InitStrategy::Lora => (
            sample(&DistributionSpec::KaimingUniform { fan_in: k }, r, k, seed_a)?,
            Matrix::zeros(d, r),
        ),
        InitStrategy::IniLora => {
            let approx = approx.expect("checked above");
            if approx.w0_hash != w0_hash {
                return Err(Error::StaleApproximation {
                    expected: w0_hash,
                    found: approx.w0_hash.clone(),
                });
            }
            if approx.a.rows() != r {
                return Err(Error::invalid(format!(
                    "approximation has rank {} but adapter rank is {r}",
                    approx.a.rows()
                )));
            }
            (approx.a.clone(), approx.b.clone())
        }
        InitStrategy::IniLoraAlpha { sigma } | InitStrategy::IniLoraIter0 { sigma } => {
            validate_sigma(sigma)?;
            draw_factors(d, k, r, 0.0, sigma, init.seed)?
        }
        InitStrategy::IniLoraBetaKn => (
            sample(&DistributionSpec::KaimingNormal { fan_in: k }, r, k, seed_a)?,
            sample(&DistributionSpec::KaimingNormal { fan_in: r }, d, r, seed_b)?,
        ),
        InitStrategy::IniLoraBetaKu => (
            sample(&DistributionSpec::KaimingUniform { fan_in: k }, r, k, seed_a)?,
            sample(&DistributionSpec::KaimingUniform { fan_in: r }, d, r, seed_b)?,
        ),
    };

    let frozen = if init.keep_residual {
        let delta = matmul(&b, &a)?;
        let delta = if init.scaling == 1.0 { delta } else { delta.scale(init.scaling)? };
        w0.sub(&delta)?
    } else {
        w0.clone()
    };

    Ok(AdaptedLinear {
        frozen,
        a,
        b,
        scaling: init.scaling,
        strategy: init.strategy,
        seed: init.seed,
        w0_hash,
    })
}

/// Builds an inilora adapter from an arbitrary factor pair, recomputing the
/// residual against `w0`.
pub fn adapter_from_factors(w0: &Matrix, a: Matrix, b: Matrix, seed: u64) -> Result<AdaptedLinear> {
    crate::optim::check_factor_shapes(w0, &a, &b)?;
    check_rank(a.rows(), w0.rows(), w0.cols())?;
    let frozen = w0.sub(&matmul(&b, &a)?)?;
    Ok(AdaptedLinear {
        frozen,
        a,
        b,
        scaling: 1.0,
        strategy: InitStrategy::IniLora,
        seed,
        w0_hash: content_hash(w0),
    })
}

/// Plain linear layer: `x · wᵀ`.
pub fn linear_forward(w: &Matrix, x: &Matrix) -> Result<Matrix> {
    matmul_nt(x, w)
}

impl AdaptedLinear {
    pub fn frozen(&self) -> &Matrix {
        &self.frozen
    }

    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    pub fn strategy(&self) -> InitStrategy {
        self.strategy
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn w0_hash(&self) -> &str {
        &self.w0_hash
    }

    /// `(d, k)`: output and input width.
    pub fn shape(&self) -> (usize, usize) {
        self.frozen.shape()
    }

    pub fn trainable_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `x·frozenᵀ + scaling·(x·aᵀ)·bᵀ` for `x` of shape `n×k`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let base = matmul_nt(x, &self.frozen)?;
        let low = matmul_nt(&matmul_nt(x, &self.a)?, &self.b)?;
        let low = if self.scaling == 1.0 { low } else { low.scale(self.scaling)? };
        base.add(&low)
    }

    /// Forward through the merged weight.
    pub fn forward_materialized(&self, x: &Matrix) -> Result<Matrix> {
        linear_forward(&self.merge()?, x)
    }

    /// Gradients of a loss with respect to `a`, `b` and the input, given
    /// `upstream = dL/dy`. The frozen matrix has no gradient.
    pub fn grads(&self, x: &Matrix, upstream: &Matrix) -> Result<AdapterGrads> {
        let (d, k) = self.shape();
        if x.cols() != k || upstream.cols() != d || upstream.rows() != x.rows() {
            return Err(Error::Shape {
                op: "adapter_grads (x vs upstream)",
                lhs: x.shape(),
                rhs: upstream.shape(),
            });
        }
        let s = self.scaling;
        let u = matmul_nt(x, &self.a)?; // n×r
        let gu = matmul(upstream, &self.b)?; // n×r
        let mut grad_b = matmul_tn(upstream, &u)?; // d×r
        let mut grad_a = matmul_tn(&gu, x)?; // r×k
        let mut grad_x_low = matmul(&gu, &self.a)?; // n×k
        if s != 1.0 {
            grad_b = grad_b.scale(s)?;
            grad_a = grad_a.scale(s)?;
            grad_x_low = grad_x_low.scale(s)?;
        }
        let grad_x = matmul(upstream, &self.frozen)?.add(&grad_x_low)?;
        Ok(AdapterGrads {
            a: grad_a,
            b: grad_b,
            x: grad_x,
        })
    }

    /// `frozen + scaling·b·a`.
    pub fn merge(&self) -> Result<Matrix> {
        let delta = matmul(&self.b, &self.a)?;
        let delta = if self.scaling == 1.0 { delta } else { delta.scale(self.scaling)? };
        self.frozen.add(&delta)
    }

    /// Writes `{a, b, frozen}.wtn1` and `meta.json` into `dir`.
    pub fn save(&self, dir: &Path, dtype: Dtype) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        wtn::write(&dir.join("a.wtn1"), &self.a, dtype)?;
        wtn::write(&dir.join("b.wtn1"), &self.b, dtype)?;
        wtn::write(&dir.join("frozen.wtn1"), &self.frozen, dtype)?;
        let meta = AdapterMeta {
            strategy: self.strategy,
            rank: self.rank(),
            scaling: self.scaling,
            seed: self.seed,
            w0_hash: self.w0_hash.clone(),
        };
        let path = dir.join("meta.json");
        fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("meta.json");
        let text = fs::read(&path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        let meta: AdapterMeta = serde_json::from_slice(&text)?;
        let (a, _) = wtn::read(&dir.join("a.wtn1"))?;
        let (b, _) = wtn::read(&dir.join("b.wtn1"))?;
        let (frozen, _) = wtn::read(&dir.join("frozen.wtn1"))?;
        if a.rows() != meta.rank || b.cols() != meta.rank || (b.rows(), a.cols()) != frozen.shape() {
            return Err(Error::Format(format!("adapter in {} has inconsistent shapes", dir.display())));
        }
        Ok(AdaptedLinear {
            frozen,
            a,
            b,
            scaling: meta.scaling,
            strategy: meta.strategy,
            seed: meta.seed,
            w0_hash: meta.w0_hash,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdapterMeta {
    strategy: InitStrategy,
    rank: usize,
    scaling: f64,
    seed: u64,
    w0_hash: String,
}

/// All six strategies with their default parameters.
pub fn all_strategies(sigma_bar: f64) -> [InitStrategy; 6] {
    [
        InitStrategy::Lora,
        InitStrategy::IniLora,
        InitStrategy::IniLoraAlpha { sigma: ALPHA_SIGMA },
        InitStrategy::IniLoraBetaKn,
        InitStrategy::IniLoraBetaKu,
        InitStrategy::IniLoraIter0 { sigma: sigma_bar },
    ]
}
