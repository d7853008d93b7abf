use inilora::adapters::{all_strategies, InitStrategy, ALPHA_SIGMA};
use inilora::harness::{finetune, make_task, TaskSpec, ToyModel, ToyModelSpec, TrainConfig};

/// With the default task and training settings, 50-step block means of the
/// training loss never increase, for every strategy and the first seeds.
#[test]
fn default_settings_give_monotone_smoothed_loss() {
    let model = ToyModel::generate(&ToyModelSpec::default()).unwrap();
    let data = make_task(&model, &TaskSpec::default()).unwrap();
    let sigma_bar = model.adapted_init_params().unwrap().sigma_bar;
    for seed in 0..3 {
        for strategy in all_strategies(sigma_bar) {
            let cfg = TrainConfig {
                seed,
                strategy,
                ..Default::default()
            };
            let report = finetune(&model, &data, &cfg).unwrap();
            assert!(!report.diverged);
            assert_eq!(report.train_loss.len(), cfg.steps);
            let blocks: Vec<f64> = report.train_loss.chunks(50).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
            for w in blocks.windows(2) {
                assert!(w[1] <= w[0], "{strategy} seed {seed}: {blocks:?}");
            }
            assert!(report.final_metric < report.base_metric, "{strategy} seed {seed}");
        }
    }
}

/// A teacher shift of the adapter's rank is learnable to near-zero loss.
#[test]
fn realizable_shift_is_fit() {
    let model = ToyModel::generate(&ToyModelSpec::default()).unwrap();
    let spec = TaskSpec {
        n_train: 64,
        n_eval: 64,
        delta_rank: 4,
        ..Default::default()
    };
    let data = make_task(&model, &spec).unwrap();
    for strategy in [InitStrategy::IniLoraAlpha { sigma: ALPHA_SIGMA }, InitStrategy::IniLoraBetaKu] {
        let cfg = TrainConfig {
            strategy,
            rank: 4,
            batch_size: 64,
            lr: 3e-3,
            steps: 6000,
            eval_every: 1000,
            ..Default::default()
        };
        let report = finetune(&model, &data, &cfg).unwrap();
        let last = report.final_train_loss().unwrap();
        assert!(last < 1e-4, "{strategy}: {last}");
    }
}
