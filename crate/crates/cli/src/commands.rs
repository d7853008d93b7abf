use std::fs;
use std::path::{Path, PathBuf};

use inilora::adapters::{init_adapter, linear_forward, AdapterInit, InitStrategy};
use inilora::approx::model::{approximate_layer, layer_seed, model_stats, write_model};
use inilora::approx::{approximate_model, ApproxCache, ApproxConfig, LayerStatus, Manifest, Role, TargetFilter};
use inilora::harness::report::{render_summary, summarize_files, write_curves_csv, write_report, write_summary_csv, ROWS_FILE};
use inilora::harness::sweep::{sweep_approx_degree, sweep_distributions, sweep_sigma, CurvePoint, DistributionSetting, SweepConfig, SweepTable};
use inilora::harness::train::{approximate_adapted_cached, build_adapters, train_adapters};
use inilora::harness::{make_task, HeadSpec, Nonlinearity, TaskKind, TaskSpec, ToyModel, ToyModelSpec, TrainConfig};
use inilora::optim::StepLrSchedule;
use inilora::tensor::{derive_seed, sample, DistributionSpec, Dtype};
use serde::Serialize;
use serde_json::{json, Value};

use crate::settings::*;
use crate::CliError;

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("create {}: {e}", parent.display())))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::Runtime(format!("write {}: {e}", path.display())))
}

fn cache_for(cache: &Option<PathBuf>, out: &Path) -> ApproxCache {
    ApproxCache::new(cache.clone().unwrap_or_else(|| out.join("cache")))
}

fn schedule(lr: f64, step_size: usize, gamma: f64) -> StepLrSchedule {
    StepLrSchedule {
        base_lr: lr,
        step_size,
        gamma,
    }
}

/// Splits `name` or `name:sigma`.
fn strategy_parts(spec: &str) -> Result<(&str, Option<f64>), CliError> {
    match spec.split_once(':') {
        Some((name, v)) => {
            let sigma = v
                .parse::<f64>()
                .map_err(|_| CliError::Validation(format!("bad sigma in strategy {spec:?}")))?;
            Ok((name, Some(sigma)))
        }
        None => Ok((spec, None)),
    }
}

/// Resolves a strategy name; `sigma_bar` is only computed when needed.
fn resolve_strategy(spec: &str, alpha_sigma: Option<f64>, sigma_bar: impl FnOnce() -> Result<f64, CliError>) -> Result<InitStrategy, CliError> {
    let (name, explicit) = strategy_parts(spec)?;
    if name == "inilora-iter0" {
        let sigma = match explicit {
            Some(s) => s,
            None => sigma_bar()?,
        };
        return Ok(InitStrategy::IniLoraIter0 { sigma });
    }
    Ok(InitStrategy::parse(name, explicit.or(alpha_sigma), f64::NAN)?)
}

pub fn stats(s: &StatsSettings, out: &Path) -> Result<(), CliError> {
    let manifest = Manifest::load(&s.manifest)?;
    let (per_layer, global) = model_stats(&manifest, &TargetFilter::parse(&s.targets))?;
    for l in &per_layer {
        eprintln!("{:<40} mu={:+.6e} sigma={:.6e}", l.layer_name, l.mu, l.sigma);
    }
    eprintln!("mu_bar={:+.6e} sigma_bar={:.6e} over {} layers", global.mu_bar, global.sigma_bar, global.n_layers);
    let doc = json!({
        "model_id": manifest.model_id,
        "targets": s.targets,
        "per_layer": per_layer.iter().map(|l| json!({
            "name": l.layer_name,
            "mu": l.mu,
            "sigma": l.sigma,
            "elements": l.element_count,
        })).collect::<Vec<_>>(),
        "mu_bar": global.mu_bar,
        "sigma_bar": global.sigma_bar,
        "n_layers": global.n_layers,
    });
    write_json(&out.join("stats.json"), &doc)
}

pub fn approx(s: &ApproxSettings, out: &Path) -> Result<(), CliError> {
    let manifest = Manifest::load(&s.manifest)?;
    let cfg = ApproxConfig {
        rank: s.rank,
        steps: s.steps,
        schedule: schedule(s.lr, s.step_size, s.gamma),
        adam: Default::default(),
        init_mu: s.init_mu,
        init_sigma: s.init_sigma,
        seed: s.seed,
        trajectory_stride: s.trajectory_stride,
        checkpoint_steps: s.checkpoint_steps.clone(),
    };
    let cache = cache_for(&s.cache, out);
    let run = approximate_model(&manifest, &TargetFilter::parse(&s.targets), &cfg, s.concurrency, &cache)?;
    eprintln!(
        "{} layers: {} cache hits, {} optimization steps, init sigma {:.6e}",
        run.layers.len(),
        run.hits(),
        run.steps_executed(),
        run.init_sigma
    );
    // Hit/computed status stays on stderr so reruns write identical files.
    let layers: Vec<Value> = run
        .layers
        .iter()
        .map(|l| match (&l.status, &l.entry) {
            (LayerStatus::Failed { error }, _) => json!({
                "name": l.layer_name,
                "role": l.role,
                "status": "failed",
                "error": error,
            }),
            (_, Some(e)) => json!({
                "name": l.layer_name,
                "role": l.role,
                "status": "ok",
                "key_digest": e.key_digest,
                "content_digest": e.content_digest,
                "final_mse": e.final_mse,
                "dir": e.dir,
            }),
            (_, None) => json!({ "name": l.layer_name, "role": l.role, "status": "failed" }),
        })
        .collect();
    let doc = json!({
        "model_id": run.model_id,
        "init": run.init,
        "init_sigma": run.init_sigma,
        "layers": layers,
    });
    write_json(&out.join("approx.json"), &doc)?;
    if run.any_failed() {
        let names: Vec<_> = run.failed().map(|l| l.layer_name.as_str()).collect();
        return Err(CliError::Runtime(format!("approximation failed for {}", names.join(", "))));
    }
    Ok(())
}

pub fn init(s: &InitSettings, out: &Path) -> Result<(), CliError> {
    if s.layer.is_empty() {
        return Err(CliError::Validation("init needs --layer".into()));
    }
    let manifest = Manifest::load(&s.manifest)?;
    let layer = manifest
        .layers
        .iter()
        .find(|l| l.name == s.layer)
        .ok_or_else(|| CliError::Validation(format!("no layer named {:?} in {}", s.layer, s.manifest.display())))?;
    let w0 = manifest.load_layer(layer)?;
    let targets = TargetFilter::parse(&s.targets);
    let sigma_bar = || -> Result<f64, CliError> { Ok(model_stats(&manifest, &targets)?.1.sigma_bar) };
    let strategy = resolve_strategy(&s.strategy, s.alpha_sigma, sigma_bar)?;
    let seed = layer_seed(s.seed, layer);

    let approx = if strategy.needs_approximation() {
        let cfg = ApproxConfig {
            rank: s.rank,
            steps: s.approx_steps,
            schedule: schedule(s.approx_lr, s.approx_step_size, s.approx_gamma),
            seed: s.seed,
            ..Default::default()
        };
        let (status, _, result) = approximate_layer(&manifest, layer, &w0, &cfg, sigma_bar()?, &cache_for(&s.cache, out))?;
        if status == LayerStatus::Hit {
            eprintln!("{}: reused cached approximation", layer.name);
        }
        Some(result)
    } else {
        None
    };

    let init = AdapterInit {
        strategy,
        rank: s.rank,
        seed,
        scaling: s.scaling,
        keep_residual: s.keep_residual,
    };
    let adapter = init_adapter(&w0, &init, approx.as_ref())?;
    adapter.save(&out.join("adapter"), Dtype::F64)?;

    let mut probe_diff = 0.0f64;
    let mut probe_scale = 0.0f64;
    if s.probe_inputs > 0 {
        let x = sample(
            &DistributionSpec::Normal { mean: 0.0, std: 1.0 },
            s.probe_inputs,
            w0.cols(),
            derive_seed(seed, "probe", "inputs"),
        )?;
        let base = linear_forward(&w0, &x)?;
        probe_diff = adapter.forward(&x)?.max_abs_diff(&base)?;
        probe_scale = base.max_abs();
    }
    eprintln!(
        "{}: {} rank {} ({} trainable), max output change at init {:.3e}",
        layer.name,
        strategy,
        s.rank,
        adapter.trainable_params(),
        probe_diff
    );
    let doc = json!({
        "layer": layer.name,
        "role": layer.role,
        "strategy": strategy,
        "rank": s.rank,
        "seed": seed,
        "scaling": s.scaling,
        "keep_residual": s.keep_residual,
        "trainable_params": adapter.trainable_params(),
        "w0_hash": adapter.w0_hash(),
        "approx_final_mse": approx.as_ref().map(|a| a.final_mse),
        "probe_max_abs_diff": probe_diff,
        "probe_max_abs_output": probe_scale,
    });
    write_json(&out.join("init.json"), &doc)
}

fn toy_setup(toy: &ToySettings) -> Result<(ToyModel, TaskSpec), CliError> {
    let kind: TaskKind = toy.task.parse()?;
    let head = match kind {
        TaskKind::MatrixRegression => HeadSpec::Regression { outputs: toy.outputs },
        TaskKind::TokenClassification => HeadSpec::Classification { classes: toy.outputs },
    };
    let mut spec = ToyModelSpec::with_head(head, toy.model_seed);
    spec.nonlinearity = match toy.nonlinearity.as_str() {
        "tanh" => Nonlinearity::Tanh,
        "identity" => Nonlinearity::Identity,
        other => return Err(CliError::Validation(format!("unknown nonlinearity {other:?} (tanh, identity)"))),
    };
    let model = ToyModel::generate(&spec)?;
    let task = TaskSpec {
        kind,
        n_train: toy.n_train,
        n_eval: toy.n_eval,
        delta_rank: toy.delta_rank,
        delta_scale: toy.delta_scale,
        seed: toy.task_seed,
    };
    Ok((model, task))
}

fn train_config(t: &TrainingSettings, seed: u64, strategy: InitStrategy) -> TrainConfig {
    TrainConfig {
        steps: t.steps,
        batch_size: t.batch_size,
        lr: t.lr,
        seed,
        strategy,
        rank: t.rank,
        eval_every: t.eval_every,
        scaling: t.scaling,
        keep_residual: t.keep_residual,
        train_head: t.train_head,
        adam: Default::default(),
        approx: ApproxConfig {
            rank: t.rank,
            steps: t.approx_steps,
            schedule: schedule(t.approx_lr, t.approx_step_size, t.approx_gamma),
            ..Default::default()
        },
    }
}

pub fn train(s: &TrainSettings, out: &Path) -> Result<(), CliError> {
    let (model, task) = toy_setup(&s.toy)?;
    let data = make_task(&model, &task)?;
    let strategy = resolve_strategy(&s.strategy, s.alpha_sigma, || Ok(model.adapted_init_params()?.sigma_bar))?;
    let cfg = train_config(&s.training, s.seed, strategy);
    cfg.validate()?;
    let approx = if strategy.needs_approximation() {
        Some(approximate_adapted_cached(&model, &cfg, Some(&cache_for(&s.cache, out)))?)
    } else {
        None
    };
    let adapters = build_adapters(&model, &cfg, approx.as_deref())?;
    let report = train_adapters(&model, &data, &cfg, adapters, strategy.name())?;
    eprintln!(
        "{}: {} {:.6e} -> {:.6e} after {} steps ({:.1}s)",
        strategy,
        report.metric.name(),
        report.base_metric,
        report.final_metric,
        report.train_loss.len(),
        report.wall_time_secs
    );
    write_json(&out.join("run.json"), &report)?;
    let mut curves: Vec<CurvePoint> = report
        .train_loss
        .iter()
        .enumerate()
        .map(|(step, &value)| CurvePoint {
            series: format!("{}/train_loss", strategy.name()),
            step,
            value,
        })
        .collect();
    curves.extend(report.eval.iter().map(|p| CurvePoint {
        series: format!("{}/eval_{}", strategy.name(), report.metric.name()),
        step: p.step,
        value: p.value,
    }));
    write_curves_csv(&out.join("curves.csv"), &curves)?;
    if report.diverged {
        return Err(CliError::Runtime(format!(
            "training diverged at step {}",
            report.diverged_at.unwrap_or(0)
        )));
    }
    Ok(())
}

fn sweep_config(s: &SweepSettings) -> Result<SweepConfig, CliError> {
    let (model, task) = toy_setup(&s.toy)?;
    Ok(SweepConfig {
        model: model.spec,
        task,
        train: train_config(&s.training, 0, InitStrategy::Lora),
        seeds: s.seeds.clone(),
        concurrency: s.concurrency,
    })
}

/// Writes the report plus the echoed settings; returns the run directory.
fn finish_sweep(table: &SweepTable, out: &Path, command: &str, settings: &impl Serialize) -> Result<PathBuf, CliError> {
    let config = serde_json::to_value(settings).map_err(|e| CliError::Runtime(e.to_string()))?;
    let files = write_report(out, table, config)?;
    echo(&files.dir, command, settings)?;
    eprint!("{}", render_summary(&table.summary));
    eprintln!("report written to {}", files.dir.display());
    Ok(files.dir)
}

pub fn sweep_approx(s: &SweepApproxSettings, out: &Path) -> Result<PathBuf, CliError> {
    let cfg = sweep_config(&s.sweep)?;
    let table = sweep_approx_degree(&s.checkpoint_steps, &cfg, Some(&cache_for(&s.cache, out)))?;
    finish_sweep(&table, out, "sweep-approx", s)
}

pub fn sweep_sigma_cmd(s: &SweepSigmaSettings, out: &Path) -> Result<PathBuf, CliError> {
    let cfg = sweep_config(&s.sweep)?;
    let table = sweep_sigma(&s.sigmas, &cfg)?;
    finish_sweep(&table, out, "sweep-sigma", s)
}

pub fn sweep_dist(s: &SweepDistSettings, out: &Path) -> Result<PathBuf, CliError> {
    let cfg = sweep_config(&s.sweep)?;
    let specs = s
        .distributions
        .iter()
        .map(|d| d.parse::<DistributionSetting>())
        .collect::<Result<Vec<_>, _>>()?;
    let table = sweep_distributions(&specs, &cfg)?;
    finish_sweep(&table, out, "sweep-dist", s)
}

pub fn report(s: &ReportSettings, out: &Path) -> Result<(), CliError> {
    if s.inputs.is_empty() {
        return Err(CliError::Validation("report needs --inputs".into()));
    }
    let files: Vec<PathBuf> = s
        .inputs
        .iter()
        .map(|p| if p.is_dir() { p.join(ROWS_FILE) } else { p.clone() })
        .collect();
    let summary = summarize_files(&files)?;
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("create {}: {e}", out.display())))?;
    write_summary_csv(&out.join("summary.csv"), &summary)?;
    eprint!("{}", render_summary(&summary));
    Ok(())
}

pub fn make_toy(s: &MakeToySettings, out: &Path) -> Result<(), CliError> {
    if s.layers == 0 {
        return Err(CliError::Validation("--layers must be >= 1".into()));
    }
    let spec = DistributionSpec::Normal { mean: 0.0, std: s.std };
    let weights = (0..s.layers)
        .map(|i| {
            let role = if i % 2 == 0 { Role::Query } else { Role::Value };
            let name = format!("layers.{}.attn.{}", i / 2, role);
            let w = sample(&spec, s.rows, s.cols, derive_seed(s.seed, &name, role.as_str()))?;
            Ok((name, role, w))
        })
        .collect::<Result<Vec<_>, inilora::Error>>()?;
    let manifest = write_model(out, &s.model_id, &weights)?;
    eprintln!("wrote {} layers to {}", manifest.layers.len(), out.join("manifest.json").display());
    Ok(())
}
