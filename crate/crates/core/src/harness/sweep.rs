//! Sweeps over approximation degree, init scale and init distribution.
//!
//! Every sweep trains one run per (setting, seed) cell on a shared dataset.
//! Cells are independent and may run in parallel; rows come back in
//! (setting, seed) order regardless of scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::task::{make_task, Dataset, TaskSpec};
use super::toy::{ToyModel, ToyModelSpec};
use super::train::{adapters_from_factors, approximate_adapted_cached, finetune, train_adapters, RunReport, TrainConfig};
use crate::adapters::{InitStrategy, ALPHA_SIGMA};
use crate::approx::{ApproxCache, ApproxResult};
use crate::error::{Error, Result};

/// Approximation steps whose factors seed the approximation-degree sweep.
pub const DEFAULT_APPROX_CHECKPOINTS: [usize; 8] = [0, 100, 500, 1000, 2000, 4000, 10000, 20000];
pub const DEFAULT_SIGMAS: [f64; 6] = [0.0001, 0.001, 0.01, 0.1, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub model: ToyModelSpec,
    pub task: TaskSpec,
    /// Base fine-tuning config; strategy and seed are set per cell.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub concurrency: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            model: ToyModelSpec::default(),
            task: TaskSpec::default(),
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
            concurrency: 1,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("a sweep needs at least one seed"));
        }
        if self.concurrency == 0 {
            return Err(Error::invalid("concurrency must be >= 1"));
        }
        self.model.validate()?;
        self.train.validate()
    }
}

/// Init distributions compared by [`sweep_distributions`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistributionSetting {
    /// `N(0, σ̄²)`, i.e. inilora without approximation steps.
    NormalSigmaBar,
    /// `N(0, 0.5²)`.
    NormalAlpha,
    KaimingNormal,
    KaimingUniform,
    Lora,
}

impl DistributionSetting {
    pub const ALL: [DistributionSetting; 5] = [
        DistributionSetting::NormalSigmaBar,
        DistributionSetting::NormalAlpha,
        DistributionSetting::KaimingNormal,
        DistributionSetting::KaimingUniform,
        DistributionSetting::Lora,
    ];

    pub fn label(self) -> &'static str {
        match self {
            DistributionSetting::NormalSigmaBar => "normal-sigma-bar",
            DistributionSetting::NormalAlpha => "normal-0.5",
            DistributionSetting::KaimingNormal => "kaiming-normal",
            DistributionSetting::KaimingUniform => "kaiming-uniform",
            DistributionSetting::Lora => "lora",
        }
    }

    pub fn strategy(self, sigma_bar: f64) -> InitStrategy {
        match self {
            DistributionSetting::NormalSigmaBar => InitStrategy::IniLoraIter0 { sigma: sigma_bar },
            DistributionSetting::NormalAlpha => InitStrategy::IniLoraAlpha { sigma: ALPHA_SIGMA },
            DistributionSetting::KaimingNormal => InitStrategy::IniLoraBetaKn,
            DistributionSetting::KaimingUniform => InitStrategy::IniLoraBetaKu,
            DistributionSetting::Lora => InitStrategy::Lora,
        }
    }
}

impl std::str::FromStr for DistributionSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistributionSetting::ALL
            .into_iter()
            .find(|d| d.label() == s)
            .ok_or_else(|| Error::invalid(format!("unknown distribution {s:?}")))
    }
}

/// One (setting, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub experiment: String,
    pub setting: String,
    /// Numeric value of the setting (approximation step or sigma).
    pub value: Option<f64>,
    pub seed: u64,
    pub strategy: String,
    /// Mean approximation MSE over the adapted layers, when applicable.
    pub approx_mse: Option<f64>,
    pub metric: String,
    pub base_metric: f64,
    pub final_metric: f64,
    pub final_train_loss: Option<f64>,
    pub diverged: bool,
    pub trainable_params: usize,
}

/// Mean and sample standard deviation over the seeds of one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub setting: String,
    pub value: Option<f64>,
    pub runs: usize,
    pub diverged: usize,
    pub metric: String,
    pub metric_mean: f64,
    pub metric_std: f64,
    pub train_loss_mean: f64,
    pub train_loss_std: f64,
    pub approx_mse_mean: Option<f64>,
}

/// Long-format plot data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub series: String,
    pub step: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub experiment: String,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SummaryRow>,
    pub curves: Vec<CurvePoint>,
    pub runs: Vec<RunReport>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups rows by setting (first-appearance order). Diverged runs are
/// counted but left out of the statistics.
pub fn summarize(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<(&str, &str, Option<f64>, Vec<&SweepRow>)> = Vec::new();
    for row in rows {
        match groups
            .iter_mut()
            .find(|g| g.0 == row.experiment && g.1 == row.setting && g.2.map(f64::to_bits) == row.value.map(f64::to_bits))
        {
            Some(g) => g.3.push(row),
            None => groups.push((&row.experiment, &row.setting, row.value, vec![row])),
        }
    }
    groups
        .into_iter()
        .map(|(experiment, setting, value, mut members)| {
            members.sort_by(|a, b| a.seed.cmp(&b.seed).then(a.final_metric.total_cmp(&b.final_metric)));
            let ok: Vec<&&SweepRow> = members.iter().filter(|r| !r.diverged).collect();
            let metrics: Vec<f64> = ok.iter().map(|r| r.final_metric).collect();
            let losses: Vec<f64> = ok.iter().filter_map(|r| r.final_train_loss).collect();
            let approx: Vec<f64> = members.iter().filter_map(|r| r.approx_mse).collect();
            let (metric_mean, metric_std) = mean_std(&metrics);
            let (train_loss_mean, train_loss_std) = mean_std(&losses);
            SummaryRow {
                experiment: experiment.to_string(),
                setting: setting.to_string(),
                value,
                runs: members.len(),
                diverged: members.len() - ok.len(),
                metric: members[0].metric.clone(),
                metric_mean,
                metric_std,
                train_loss_mean,
                train_loss_std,
                approx_mse_mean: (!approx.is_empty()).then(|| mean_std(&approx).0),
            }
        })
        .collect()
}

struct Cell {
    setting: String,
    value: Option<f64>,
    seed: u64,
    approx_mse: Option<f64>,
    report: RunReport,
}

fn pool(concurrency: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

fn curves_for(cell: &Cell) -> Vec<CurvePoint> {
    let prefix = format!("{}/seed={}", cell.setting, cell.seed);
    let mut out: Vec<CurvePoint> = cell
        .report
        .train_loss
        .iter()
        .enumerate()
        .map(|(step, &value)| CurvePoint {
            series: format!("{prefix}/train_loss"),
            step,
            value,
        })
        .collect();
    out.extend(cell.report.eval.iter().map(|p| CurvePoint {
        series: format!("{prefix}/eval_{}", cell.report.metric.name()),
        step: p.step,
        value: p.value,
    }));
    out
}

fn assemble(experiment: &str, cells: Vec<Cell>, mut curves: Vec<CurvePoint>) -> SweepTable {
    let rows: Vec<SweepRow> = cells
        .iter()
        .map(|c| SweepRow {
            experiment: experiment.to_string(),
            setting: c.setting.clone(),
            value: c.value,
            seed: c.seed,
            strategy: c.report.strategy.clone(),
            approx_mse: c.approx_mse,
            metric: c.report.metric.name().to_string(),
            base_metric: c.report.base_metric,
            final_metric: c.report.final_metric,
            final_train_loss: c.report.final_train_loss(),
            diverged: c.report.diverged,
            trainable_params: c.report.trainable_params,
        })
        .collect();
    curves.extend(cells.iter().flat_map(curves_for));
    SweepTable {
        experiment: experiment.to_string(),
        summary: summarize(&rows),
        rows,
        curves,
        runs: cells.into_iter().map(|c| c.report).collect(),
    }
}

fn prepare(cfg: &SweepConfig) -> Result<(ToyModel, Dataset)> {
    cfg.validate()?;
    let model = ToyModel::generate(&cfg.model)?;
    let data = make_task(&model, &cfg.task)?;
    Ok((model, data))
}

/// Runs one fine-tune per (strategy, seed) with plain strategies.
fn sweep_strategies(experiment: &str, cfg: &SweepConfig, settings: &[(String, Option<f64>, InitStrategy)]) -> Result<SweepTable> {
    let (model, data) = prepare(cfg)?;
    let jobs: Vec<(usize, u64)> = (0..settings.len())
        .flat_map(|s| cfg.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let cells = pool(cfg.concurrency)?.install(|| {
        jobs.par_iter()
            .map(|&(s, seed)| {
                let (label, value, strategy) = &settings[s];
                let tcfg = TrainConfig {
                    seed,
                    strategy: *strategy,
                    ..cfg.train.clone()
                };
                log::info!("{experiment}: {label} seed {seed}");
                let report = finetune(&model, &data, &tcfg)?;
                Ok(Cell {
                    setting: label.clone(),
                    value: *value,
                    seed,
                    approx_mse: None,
                    report,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(assemble(experiment, cells, Vec::new()))
}

/// Fine-tunes from `N(0, σ²)` factors for each σ.
pub fn sweep_sigma(sigmas: &[f64], cfg: &SweepConfig) -> Result<SweepTable> {
    if sigmas.is_empty() {
        return Err(Error::invalid("sigma grid is empty"));
    }
    if let Some(bad) = sigmas.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::invalid(format!("sigma must be > 0, got {bad}")));
    }
    let settings: Vec<_> = sigmas
        .iter()
        .map(|&s| (format!("sigma={s}"), Some(s), InitStrategy::IniLoraAlpha { sigma: s }))
        .collect();
    sweep_strategies("sweep-sigma", cfg, &settings)
}

/// Fine-tunes from each init distribution.
pub fn sweep_distributions(specs: &[DistributionSetting], cfg: &SweepConfig) -> Result<SweepTable> {
    if specs.is_empty() {
        return Err(Error::invalid("distribution grid is empty"));
    }
    let sigma_bar = ToyModel::generate(&cfg.model)?.adapted_init_params()?.sigma_bar;
    let settings: Vec<_> = specs
        .iter()
        .map(|d| (d.label().to_string(), None, d.strategy(sigma_bar)))
        .collect();
    sweep_strategies("sweep-dist", cfg, &settings)
}

/// For every seed, pre-factorizes the adapted layers once, then fine-tunes
/// an inilora adapter from the factors saved at each checkpoint step.
pub fn sweep_approx_degree(checkpoints: &[usize], cfg: &SweepConfig, cache: Option<&ApproxCache>) -> Result<SweepTable> {
    if checkpoints.is_empty() {
        return Err(Error::invalid("checkpoint list is empty"));
    }
    let (model, data) = prepare(cfg)?;
    let mut steps: Vec<usize> = checkpoints.to_vec();
    steps.sort_unstable();
    steps.dedup();

    let pool = pool(cfg.concurrency)?;
    let mut approx_cfg = cfg.train.approx.clone();
    approx_cfg.checkpoint_steps = steps.clone();
    let approximations: Vec<Option<Vec<ApproxResult>>> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let tcfg = TrainConfig {
                    seed,
                    strategy: InitStrategy::IniLora,
                    approx: approx_cfg.clone(),
                    ..cfg.train.clone()
                };
                match approximate_adapted_cached(&model, &tcfg, cache) {
                    Ok(r) => Ok(Some(r)),
                    Err(e @ Error::Diverged { .. }) => {
                        log::warn!("sweep-approx: seed {seed} skipped: {e}");
                        Ok(None)
                    }
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut jobs = Vec::new();
    for &step in &steps {
        for (si, &seed) in cfg.seeds.iter().enumerate() {
            let Some(results) = &approximations[si] else { continue };
            let found: Option<Vec<_>> = results.iter().map(|r| r.checkpoint(step)).collect();
            match found {
                Some(cps) => jobs.push((step, seed, cps)),
                None => log::warn!("sweep-approx: no checkpoint at step {step} for seed {seed}; row skipped"),
            }
        }
    }

    let cells = pool.install(|| {
        jobs.par_iter()
            .map(|(step, seed, cps)| {
                let tcfg = TrainConfig {
                    seed: *seed,
                    strategy: InitStrategy::IniLora,
                    ..cfg.train.clone()
                };
                let factors: Vec<_> = cps.iter().map(|c| (c.a.clone(), c.b.clone())).collect();
                let adapters = adapters_from_factors(&model, &tcfg, &factors)?;
                log::info!("sweep-approx: step {step} seed {seed}");
                let report = train_adapters(&model, &data, &tcfg, adapters, "inilora")?;
                let approx_mse = cps.iter().map(|c| c.mse).sum::<f64>() / cps.len() as f64;
                Ok(Cell {
                    setting: format!("step={step}"),
                    value: Some(*step as f64),
                    seed: *seed,
                    approx_mse: Some(approx_mse),
                    report,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut curves = Vec::new();
    for (si, &seed) in cfg.seeds.iter().enumerate() {
        let Some(results) = &approximations[si] else { continue };
        for ((_, layer, _), r) in model.adapted().iter().zip(results) {
            curves.extend(r.trajectory.iter().map(|p| CurvePoint {
                series: format!("approx/seed={seed}/{}/mse", layer.name),
                step: p.step,
                value: p.mse,
            }));
        }
    }
    Ok(assemble("sweep-approx", cells, curves))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::ApproxConfig;

    fn quick() -> SweepConfig {
        SweepConfig {
            task: TaskSpec {
                n_train: 64,
                n_eval: 32,
                ..Default::default()
            },
            train: TrainConfig {
                steps: 20,
                eval_every: 10,
                approx: ApproxConfig {
                    steps: 300,
                    ..Default::default()
                },
                ..Default::default()
            },
            seeds: vec![3, 3, 4],
            ..Default::default()
        }
    }

    #[test]
    fn duplicate_seeds_give_identical_rows() {
        let t = sweep_sigma(&[0.01, 0.5], &quick()).unwrap();
        assert_eq!(t.rows.len(), 6);
        assert_eq!(t.rows[0], t.rows[1]);
        assert_ne!(t.rows[0], t.rows[2]);
        assert_eq!(t.summary.len(), 2);
        assert_eq!(t.summary[0].runs, 3);
    }

    #[test]
    fn step_zero_matches_iter0() {
        let cfg = quick();
        let t = sweep_approx_degree(&[0, 100, 300, 5000], &cfg, None).unwrap();
        // 5000 is past the approximation horizon and is skipped.
        assert_eq!(t.rows.len(), 3 * 3);
        let model = ToyModel::generate(&cfg.model).unwrap();
        let data = make_task(&model, &cfg.task).unwrap();
        let sigma_bar = model.adapted_init_params().unwrap().sigma_bar;
        let iter0 = finetune(
            &model,
            &data,
            &TrainConfig {
                seed: 3,
                strategy: InitStrategy::IniLoraIter0 { sigma: sigma_bar },
                ..cfg.train.clone()
            },
        )
        .unwrap();
        let row0 = &t.runs[0];
        assert_eq!(t.rows[0].setting, "step=0");
        assert_eq!(row0.train_loss, iter0.train_loss);
        assert_eq!(row0.final_metric, iter0.final_metric);
        let mse: Vec<f64> = t.rows.iter().filter(|r| r.seed == 4).map(|r| r.approx_mse.unwrap()).collect();
        assert!(mse.windows(2).all(|w| w[1] <= w[0]), "{mse:?}");
    }

    #[test]
    fn distribution_grid_labels() {
        let t = sweep_distributions(&DistributionSetting::ALL, &SweepConfig { seeds: vec![0], ..quick() }).unwrap();
        let labels: Vec<_> = t.rows.iter().map(|r| r.setting.as_str()).collect();
        assert_eq!(labels, ["normal-sigma-bar", "normal-0.5", "kaiming-normal", "kaiming-uniform", "lora"]);
        assert!(t.rows.iter().all(|r| r.trainable_params == t.rows[0].trainable_params));
    }

    #[test]
    fn diverged_runs_are_recorded_not_fatal() {
        let mut cfg = quick();
        cfg.train.lr = 1e150;
        cfg.model.nonlinearity = crate::harness::toy::Nonlinearity::Identity;
        cfg.seeds = vec![0];
        let t = sweep_sigma(&[0.5], &cfg).unwrap();
        assert!(t.rows[0].diverged);
        assert_eq!(t.summary[0].diverged, 1);
        assert!(t.summary[0].metric_mean.is_nan());
    }

    #[test]
    fn summary_is_order_independent() {
        let t = sweep_sigma(&[0.1], &SweepConfig { seeds: vec![1, 2, 5], ..quick() }).unwrap();
        let mut rows = t.rows.clone();
        rows.reverse();
        assert_eq!(summarize(&rows), t.summary);
    }

    #[test]
    fn invalid_grids_are_rejected() {
        assert!(sweep_sigma(&[], &quick()).is_err());
        assert!(sweep_sigma(&[0.0], &quick()).is_err());
        assert!(sweep_approx_degree(&[], &quick(), None).is_err());
        assert!(sweep_sigma(&[0.1], &SweepConfig { seeds: vec![], ..quick() }).is_err());
    }
}
