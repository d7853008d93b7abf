//! Fine-tuning loop: only the adapter factors (and optionally the head) move.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::task::{argmax, select_rows, Dataset, Targets};
use super::toy::{StudentNet, ToyModel, TrainLayer};
use crate::adapters::{adapter_from_factors, init_adapter, AdaptedLinear, AdapterInit, InitStrategy};
use crate::approx::{approximate, ApproxCache, ApproxConfig, ApproxResult, CacheKey};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{content_hash, derive_seed, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub strategy: InitStrategy,
    pub rank: usize,
    /// Evaluate every `eval_every` steps (plus before the first and after the last).
    pub eval_every: usize,
    #[serde(default = "one")]
    pub scaling: f64,
    #[serde(default = "yes")]
    pub keep_residual: bool,
    #[serde(default)]
    pub train_head: bool,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Pre-factorization settings for `inilora`. Rank and seed are taken from
    /// this config; an unset `init_sigma` means σ̄ of the adapted layers.
    #[serde(default)]
    pub approx: ApproxConfig,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            strategy: InitStrategy::Lora,
            rank: 8,
            eval_every: 50,
            scaling: 1.0,
            keep_residual: true,
            train_head: false,
            adam: AdamConfig::default(),
            approx: ApproxConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.rank == 0 {
            return Err(Error::invalid("rank must be >= 1"));
        }
        Ok(())
    }
}

/// Seed of the adapter (and its pre-factorization) on one layer.
pub fn adapter_seed(seed: u64, name: &str, role: &str) -> u64 {
    derive_seed(seed, name, role)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mse,
    Accuracy,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Mse => "mse",
            Metric::Accuracy => "accuracy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: String,
    pub rank: usize,
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub metric: Metric,
    /// Metric of the untouched base model on the eval split.
    pub base_metric: f64,
    /// Training loss before each update.
    pub train_loss: Vec<f64>,
    pub eval: Vec<EvalPoint>,
    pub final_metric: f64,
    pub diverged: bool,
    /// Step whose loss was not finite.
    pub diverged_at: Option<usize>,
    pub trainable_params: usize,
    pub wall_time_secs: f64,
}

impl RunReport {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.train_loss.last().copied()
    }

    /// Trailing moving average of the training loss.
    pub fn smoothed_loss(&self, window: usize) -> Vec<f64> {
        moving_average(&self.train_loss, window)
    }
}

pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        acc += x;
        if i >= window {
            acc -= xs[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Pre-factorizes every adapted layer of `model` for an `inilora` run.
pub fn approximate_adapted(model: &ToyModel, cfg: &TrainConfig) -> Result<Vec<ApproxResult>> {
    approximate_adapted_cached(model, cfg, None)
}

/// Like [`approximate_adapted`], reusing and filling `cache` when given.
pub fn approximate_adapted_cached(model: &ToyModel, cfg: &TrainConfig, cache: Option<&ApproxCache>) -> Result<Vec<ApproxResult>> {
    let sigma = match cfg.approx.init_sigma {
        Some(s) => s,
        None => model.adapted_init_params()?.sigma_bar,
    };
    let model_id = model.model_id();
    model
        .adapted()
        .iter()
        .map(|(_, l, w)| {
            let mut acfg = cfg.approx.clone();
            acfg.rank = cfg.rank;
            acfg.seed = adapter_seed(cfg.seed, &l.name, l.role.as_str());
            acfg.init_sigma = Some(sigma);
            if let Some(cache) = cache {
                let key = CacheKey::new(&content_hash(w), &acfg, sigma);
                if let Some(hit) = cache.lookup(&model_id, &l.name, &key, &acfg.checkpoint_steps)? {
                    log::debug!("cache hit for {}", l.name);
                    return Ok(hit.into_result(acfg));
                }
            }
            log::debug!("approximating {} ({} steps)", l.name, acfg.steps);
            let result = approximate(w, &acfg)?;
            if let Some(cache) = cache {
                cache.store(&model_id, &l.name, l.role, &result)?;
            }
            Ok(result)
        })
        .collect()
}

/// Builds one adapter per adapted layer. `approx` is required for `inilora`.
pub fn build_adapters(model: &ToyModel, cfg: &TrainConfig, approx: Option<&[ApproxResult]>) -> Result<Vec<AdaptedLinear>> {
    let adapted = model.adapted();
    if let Some(ap) = approx {
        if ap.len() != adapted.len() {
            return Err(Error::invalid(format!(
                "{} approximations for {} adapted layers",
                ap.len(),
                adapted.len()
            )));
        }
    }
    adapted
        .iter()
        .enumerate()
        .map(|(j, (_, l, w))| {
            let init = AdapterInit {
                strategy: cfg.strategy,
                rank: cfg.rank,
                seed: adapter_seed(cfg.seed, &l.name, l.role.as_str()),
                scaling: cfg.scaling,
                keep_residual: cfg.keep_residual,
            };
            init_adapter(w, &init, approx.map(|ap| &ap[j]))
        })
        .collect()
}

/// Adapters from explicit `(a, b)` factor pairs, residual recomputed per layer.
pub fn adapters_from_factors(model: &ToyModel, cfg: &TrainConfig, factors: &[(Matrix, Matrix)]) -> Result<Vec<AdaptedLinear>> {
    let adapted = model.adapted();
    if factors.len() != adapted.len() {
        return Err(Error::invalid("one factor pair per adapted layer is required"));
    }
    adapted
        .iter()
        .zip(factors)
        .map(|((_, l, w), (a, b))| adapter_from_factors(w, a.clone(), b.clone(), adapter_seed(cfg.seed, &l.name, l.role.as_str())))
        .collect()
}

/// Initializes adapters per `cfg.strategy` and trains them on `data`.
pub fn finetune(model: &ToyModel, data: &Dataset, cfg: &TrainConfig) -> Result<RunReport> {
    cfg.validate()?;
    let approx = if cfg.strategy.needs_approximation() {
        Some(approximate_adapted(model, cfg)?)
    } else {
        None
    };
    let adapters = build_adapters(model, cfg, approx.as_deref())?;
    train_adapters(model, data, cfg, adapters, cfg.strategy.name())
}

/// Loss and `dL/d(output)` for a batch.
fn loss_and_grad(out: &Matrix, targets: &Targets) -> Result<(f64, Matrix)> {
    match targets {
        Targets::Regression(y) => {
            let n = out.len() as f64;
            let diff = out.sub(y)?;
            let loss = diff.frobenius_sq() / n;
            Ok((loss, diff.scale(2.0 / n)?))
        }
        Targets::Classification(labels) => {
            let rows = out.rows();
            let mut grad = Vec::with_capacity(out.len());
            let mut loss = 0.0;
            for (i, &label) in labels.iter().enumerate() {
                let row = out.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                loss += z.ln() + max - row[label];
                for (c, e) in exps.iter().enumerate() {
                    let p = e / z;
                    grad.push((p - if c == label { 1.0 } else { 0.0 }) / rows as f64);
                }
            }
            // Non-finite logits fail here and are reported as divergence by the caller.
            let grad = Matrix::new(rows, out.cols(), grad).map_err(|_| Error::NonFinite("logits"))?;
            Ok((loss / rows as f64, grad))
        }
    }
}

fn metric_of(out: &Matrix, targets: &Targets) -> Result<f64> {
    match targets {
        Targets::Regression(y) => crate::tensor::mse(out, y),
        Targets::Classification(labels) => {
            let hits = labels.iter().enumerate().filter(|&(i, &l)| argmax(out.row(i)) == l).count();
            Ok(hits as f64 / labels.len() as f64)
        }
    }
}

fn metric_kind(targets: &Targets) -> Metric {
    match targets {
        Targets::Regression(_) => Metric::Mse,
        Targets::Classification(_) => Metric::Accuracy,
    }
}

/// Trains the given adapters, one per adapted layer in model order.
pub fn train_adapters(
    model: &ToyModel,
    data: &Dataset,
    cfg: &TrainConfig,
    adapters: Vec<AdaptedLinear>,
    label: &str,
) -> Result<RunReport> {
    cfg.validate()?;
    let started = Instant::now();
    let adapted_idx: Vec<usize> = model.adapted().iter().map(|(i, _, _)| *i).collect();
    if adapters.len() != adapted_idx.len() {
        return Err(Error::invalid("one adapter per adapted layer is required"));
    }
    let mut adapters = adapters.into_iter();
    let layers: Vec<TrainLayer> = model
        .weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            if adapted_idx.contains(&i) {
                TrainLayer::Adapted(adapters.next().expect("counted above"))
            } else {
                TrainLayer::Frozen(w.clone())
            }
        })
        .collect();
    let mut net = StudentNet {
        layers,
        act: model.spec.nonlinearity,
    };
    let head_idx = net.layers.len() - 1;
    let mut trainable_params: usize = net
        .layers
        .iter()
        .map(|l| match l {
            TrainLayer::Adapted(a) => a.trainable_params(),
            TrainLayer::Frozen(_) => 0,
        })
        .sum();
    if cfg.train_head {
        trainable_params += model.weights[head_idx].len();
    }

    let mut moments: Vec<(AdamState, AdamState)> = net
        .layers
        .iter()
        .filter_map(|l| match l {
            TrainLayer::Adapted(a) => Some((AdamState::for_param(&a.a, cfg.adam), AdamState::for_param(&a.b, cfg.adam))),
            TrainLayer::Frozen(_) => None,
        })
        .collect();
    let mut head_moments = AdamState::for_param(&model.weights[head_idx], cfg.adam);

    let metric = metric_kind(&data.y_eval);
    let base_metric = metric_of(&model.forward(&data.x_eval)?, &data.y_eval)?;
    let evaluate = |net: &StudentNet| -> Result<f64> { metric_of(&net.forward(&data.x_eval)?, &data.y_eval) };

    let n = data.x_train.rows();
    let batch = cfg.batch_size.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batches", "train"));
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;

    let mut report = RunReport {
        strategy: label.to_string(),
        rank: cfg.rank,
        seed: cfg.seed,
        steps: cfg.steps,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        metric,
        base_metric,
        train_loss: Vec::with_capacity(cfg.steps),
        eval: vec![EvalPoint {
            step: 0,
            value: evaluate(&net)?,
        }],
        final_metric: f64::NAN,
        diverged: false,
        diverged_at: None,
        trainable_params,
        wall_time_secs: 0.0,
    };

    for step in 0..cfg.steps {
        if cursor + batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let x = select_rows(&data.x_train, idx)?;
        let y = data.y_train.select(idx)?;

        let (inputs, out) = match net.forward_trace(&x) {
            Ok(t) => t,
            Err(Error::NonFinite(_)) | Err(Error::Invalid(_)) => {
                report.diverged = true;
                report.diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        let (loss, d_out) = match loss_and_grad(&out, &y) {
            Ok((l, g)) if l.is_finite() => (l, g),
            Ok(_) | Err(Error::NonFinite(_)) => {
                report.diverged = true;
                report.diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        report.train_loss.push(loss);

        let grads = net.backward(&inputs, &d_out, cfg.train_head)?;
        let mut update = || -> Result<()> {
            for ((i, ga, gb), (ma, mb)) in grads.adapters.iter().zip(moments.iter_mut()) {
                if let TrainLayer::Adapted(layer) = &mut net.layers[*i] {
                    ma.step(&mut layer.a, ga, cfg.lr)?;
                    mb.step(&mut layer.b, gb, cfg.lr)?;
                }
            }
            if let (Some(gh), TrainLayer::Frozen(w)) = (&grads.head, &mut net.layers[head_idx]) {
                head_moments.step(w, gh, cfg.lr)?;
            }
            Ok(())
        };
        match update() {
            Ok(()) => {}
            Err(Error::NonFinite(_)) | Err(Error::NonFiniteGradient { .. }) => {
                report.diverged = true;
                report.diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        }

        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            match evaluate(&net) {
                Ok(v) if v.is_finite() => report.eval.push(EvalPoint { step: done, value: v }),
                _ => {
                    report.diverged = true;
                    report.diverged_at = Some(done);
                    break;
                }
            }
        }
    }

    if report.diverged {
        log::warn!(
            "{label} (seed {}) diverged at step {}",
            cfg.seed,
            report.diverged_at.unwrap_or(0)
        );
    }
    report.final_metric = report.eval.last().map_or(base_metric, |p| p.value);
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(report)
}
