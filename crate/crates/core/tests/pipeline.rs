use cfm_core::data::{evaluate_states, make_bars_dataset, make_parity_dataset, nfe_sweep};
use cfm_core::guidance::{guided_sample, GuidanceConfig, ZeroReward};
use cfm_core::io::{Checkpoint, RunConfig};
use cfm_core::losses::{LossConfig, LossKind};
use cfm_core::predictor::{OutputKind, Predictor, PredictorConfig};
use cfm_core::sampler::{sample, sample_flowmap, DiscretizeMode, SampleConfig, SamplerKind, TimeGrid};
use cfm_core::trainer::{run_training, TrainConfig, TrainState};

fn quick_train(pred: &Predictor, loss: &LossConfig, steps: u64) -> TrainState {
    let ds = make_parity_dataset(3, 2).unwrap();
    let cfg = TrainConfig { steps, batch_size: 32, lr: 3e-3, ema_decay: 0.9, log_every: steps, ..Default::default() };
    let run = run_training(TrainState::init(pred, 9), pred, &ds, loss, &cfg, |_| {}).unwrap();
    assert!(run.abort.is_none());
    run.state
}

#[test]
fn train_save_load_sample() {
    let pred = Predictor::new(PredictorConfig { positions: 3, categories: 2, width: 32, depth: 2, ..Default::default() }).unwrap();
    let state = quick_train(&pred, &LossConfig::default(), 300);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.cfm");
    Checkpoint::predictor(&pred.cfg, state.step, &state.params, &state.ema).unwrap().save(&path).unwrap();
    let (loaded, params, ema) = Checkpoint::load(&path).unwrap().to_predictor(Some(&pred.cfg)).unwrap();
    assert_eq!(params, state.params);
    assert_eq!(ema, state.ema);

    let cfg = SampleConfig { samples: 500, ..Default::default() };
    let a = sample(&pred, &state.ema, &cfg, 3).unwrap();
    let b = sample(&loaded, &ema, &cfg, 3).unwrap();
    assert_eq!(a.states, b.states);
    assert_eq!(a.soft, b.soft);

    let ds = make_parity_dataset(3, 2).unwrap();
    let rows = nfe_sweep(&pred, &ema, &ds, &[SamplerKind::Flowmap, SamplerKind::Euler, SamplerKind::Sde], &[1, 4, 16], 0.5, 2000, 1).unwrap();
    assert_eq!(rows.len(), 9);
    // Multi-step samples of a briefly trained model beat the 0.5 validity of
    // uniform guessing.
    for r in rows.iter().filter(|r| r.nfe == 16) {
        assert!(r.report.validity_rate > 0.6, "{r:?}");
    }
}

#[test]
fn naive_and_csd_objectives_train() {
    let vel = Predictor::new(PredictorConfig { positions: 3, categories: 2, width: 16, depth: 1, output: OutputKind::Velocity, ..Default::default() }).unwrap();
    let st = quick_train(&vel, &LossConfig { kind: LossKind::Naive, ..Default::default() }, 20);
    assert_eq!(st.step, 20);
    let simplex = Predictor::new(PredictorConfig { positions: 3, categories: 2, width: 16, depth: 1, ..Default::default() }).unwrap();
    let st = quick_train(&simplex, &LossConfig { kind: LossKind::Csd, uncertainty_weighting: true, ..Default::default() }, 20);
    assert_eq!(st.step, 20);
}

#[test]
fn guided_sampling_with_zero_reward_on_bars() {
    let ds = make_bars_dataset(3).unwrap();
    let pred = Predictor::new(PredictorConfig { positions: 9, categories: 2, width: 16, depth: 1, ..Default::default() }).unwrap();
    let params = pred.init_params(&mut cfm_core::rng::seeded(1));
    let cfg = GuidanceConfig { nfe: 3, particles: 5, samples: 12, ..Default::default() };
    let out = guided_sample(&pred, &params, &ZeroReward, &TimeGrid::uniform(3), &cfg, 2).unwrap();
    assert_eq!(out.output.states.len(), 12);
    assert!(out.rewards.iter().all(|&r| r == 0.0));
    assert_eq!(out.resamples, 0);
    let plain = sample_flowmap(&pred, &params, &TimeGrid::uniform(2), 10, DiscretizeMode::Categorical, 4).unwrap();
    assert!(plain.states.iter().all(|s| s.len() == 9 && s.iter().all(|&c| c < 2)));
    assert!(evaluate_states(&ds, &plain.states).is_ok());
}

#[test]
fn config_drives_a_run() {
    let cfg = RunConfig::from_toml("seed = 2\n[model]\nwidth = 8\ndepth = 1\n[train]\nsteps = 3\nbatch_size = 4\n[dataset]\nkind = \"bars\"\ngrid = 2\n").unwrap();
    let pred = Predictor::new(cfg.predictor_config().unwrap()).unwrap();
    let ds = cfg.dataset.build().unwrap();
    let run = run_training(TrainState::init(&pred, cfg.seed), &pred, &ds, &cfg.loss, &cfg.train, |_| {}).unwrap();
    assert_eq!(run.state.step, 3);
}
