use std::fs;
use std::path::{Path, PathBuf};

use cfm_core::data::{eval_model, evaluate_states, nfe_sweep, two_class_label, CategoricalDataset, EvalReport};
use cfm_core::guidance::{class_frequency, guided_sample, LogisticFit, LogisticReward, RewardModel, ZeroReward};
use cfm_core::io::{sample_records, sweep_tsv, write_atomic, write_json_lines, Checkpoint, JsonLinesWriter, RunConfig, SweepRow};
use cfm_core::losses::TdPower;
use cfm_core::predictor::{Predictor, PredictorParams};
use cfm_core::rng;
use cfm_core::sampler::{self, DiscretizeMode, SampleConfig, SamplerKind, TimeGrid};
use cfm_core::selfcheck::{run_selfcheck, SelfcheckOptions};
use cfm_core::trainer::{run_training, TrainState};
use cfm_core::CfmError;

use crate::{EvalArgs, Failure, GuideArgs, SampleArgs, SamplerArgs};

type Outcome = std::result::Result<(), Failure>;

pub const CHECKPOINT_FILE: &str = "checkpoint.cfm";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure { code: 1, message: format!("{}: {e}", path.display()) }
}

pub fn train(config: &Path, out: &Path) -> Outcome {
    let cfg = RunConfig::load(config)?;
    let pcfg = cfg.predictor_config()?;
    let predictor = Predictor::new(pcfg.clone())?;
    let ds = cfg.dataset.build()?;
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    write_atomic(&out.join(CONFIG_FILE), cfg.to_toml()?.as_bytes())?;

    let mut metrics = JsonLinesWriter::create(&out.join(METRICS_FILE))?;
    let mut write_err = None;
    let run = run_training(TrainState::init(&predictor, cfg.seed), &predictor, &ds, &cfg.loss, &cfg.train, |rec| {
        if write_err.is_none() {
            write_err = metrics.write(rec).err();
        }
    })?;
    metrics.finish()?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    if let Some(e) = run.abort {
        return Err(Failure { code: 3, message: format!("training aborted at step {}: {e}", run.state.step) });
    }
    let ck = Checkpoint::predictor(&pcfg, run.state.step, &run.state.params, &run.state.ema)?;
    ck.save(&out.join(CHECKPOINT_FILE))?;
    println!("trained {} steps, checkpoint in {}", run.state.step, out.display());
    Ok(())
}

fn load_config(explicit: Option<&Path>, checkpoint: Option<&Path>) -> std::result::Result<RunConfig, Failure> {
    let path = match (explicit, checkpoint) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(c)) => c.parent().map_or_else(|| PathBuf::from(CONFIG_FILE), |d| d.join(CONFIG_FILE)),
        (None, None) => return Err(CfmError::Config("--config is required".into()).into()),
    };
    Ok(RunConfig::load(&path)?)
}

struct Loaded {
    cfg: RunConfig,
    ds: CategoricalDataset,
    predictor: Predictor,
    params: PredictorParams,
}

fn load_model(checkpoint: &Path, config: Option<&Path>, raw: bool) -> std::result::Result<Loaded, Failure> {
    let cfg = load_config(config, Some(checkpoint))?;
    let ds = cfg.dataset.build()?;
    let as_checkpoint = |e: CfmError| match e {
        CfmError::Checkpoint(_) => Failure::from(e),
        other => Failure { code: 4, message: format!("{}: {other}", checkpoint.display()) },
    };
    let ck = Checkpoint::load(checkpoint).map_err(as_checkpoint)?;
    let (predictor, params, ema) = ck.to_predictor(Some(&cfg.predictor_config()?)).map_err(as_checkpoint)?;
    Ok(Loaded { cfg, ds, predictor, params: if raw { params } else { ema } })
}

fn sample_config(base: &SampleConfig, a: &SamplerArgs) -> std::result::Result<SampleConfig, Failure> {
    let mut s = base.clone();
    if let Some(k) = &a.sampler {
        s.sampler = k.parse::<SamplerKind>()?;
    }
    s.nfe = a.nfe.unwrap_or(s.nfe);
    s.samples = a.samples.unwrap_or(s.samples);
    s.sigma0 = a.sigma0.unwrap_or(s.sigma0);
    s.validate()?;
    Ok(s)
}

fn parse_mode(s: &str) -> std::result::Result<DiscretizeMode, Failure> {
    match s {
        "argmax" => Ok(DiscretizeMode::Argmax),
        "categorical" => Ok(DiscretizeMode::Categorical),
        _ => Err(CfmError::InvalidArgument(format!("unknown mode `{s}` (argmax, categorical)")).into()),
    }
}

pub fn sample(a: SampleArgs) -> Outcome {
    let m = load_model(&a.model.checkpoint, a.model.config.as_deref(), a.model.raw)?;
    let mut scfg = sample_config(&m.cfg.sample, &a.sampler)?;
    if let Some(mode) = &a.mode {
        scfg.mode = parse_mode(mode)?;
    }
    let seed = a.model.seed.unwrap_or(m.cfg.seed);
    let out = sampler::sample(&m.predictor, &m.params, &scfg, seed)?;
    write_json_lines(&a.out, &sample_records(&m.ds, &out.states, None))?;
    println!("wrote {} samples to {}", out.states.len(), a.out.display());
    Ok(())
}

fn print_report(report: &EvalReport, out: Option<&Path>) -> Outcome {
    let json = serde_json::to_string_pretty(report).map_err(CfmError::from)?;
    println!("{json}");
    if let Some(p) = out {
        write_atomic(p, format!("{json}\n").as_bytes())?;
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Outcome {
    if a.ground_truth {
        let cfg = load_config(a.config.as_deref(), a.checkpoint.as_deref())?;
        let ds = cfg.dataset.build()?;
        let scfg = sample_config(&cfg.sample, &a.sampler)?;
        let mut r = rng::stream(a.seed.unwrap_or(cfg.seed), rng::STREAM_DATA);
        let states = ds.sample_states(&mut r, scfg.samples);
        return print_report(&evaluate_states(&ds, &states)?, a.out.as_deref());
    }
    let Some(checkpoint) = a.checkpoint.as_deref() else {
        return Err(CfmError::InvalidArgument("--checkpoint is required unless --ground-truth is set".into()).into());
    };
    let m = load_model(checkpoint, a.config.as_deref(), a.raw)?;
    let scfg = sample_config(&m.cfg.sample, &a.sampler)?;
    let seed = a.seed.unwrap_or(m.cfg.seed);
    if a.sweep_samplers.is_empty() != a.sweep_nfes.is_empty() {
        return Err(CfmError::InvalidArgument("--sweep-samplers and --sweep-nfes go together".into()).into());
    }
    if !a.sweep_nfes.is_empty() {
        let samplers = a.sweep_samplers.iter().map(|s| s.parse::<SamplerKind>()).collect::<Result<Vec<_>, _>>()?;
        let entries = nfe_sweep(&m.predictor, &m.params, &m.ds, &samplers, &a.sweep_nfes, scfg.sigma0, scfg.samples, seed)?;
        let table = sweep_tsv(&entries.iter().map(SweepRow::from).collect::<Vec<_>>());
        print!("{table}");
        if let Some(p) = &a.out {
            write_atomic(p, table.as_bytes())?;
        }
        return Ok(());
    }
    let grid = TimeGrid::uniform(scfg.nfe);
    let report = eval_model(&m.predictor, &m.params, &m.ds, scfg.sampler, &grid, scfg.sigma0, scfg.samples, seed)?;
    print_report(&report, a.out.as_deref())
}

fn two_class_reward(ds: &CategoricalDataset) -> std::result::Result<LogisticReward, Failure> {
    Ok(LogisticReward::fit(ds, two_class_label, 2, 0, &LogisticFit::default())?)
}

pub fn fit_reward(config: &Path, out: &Path) -> Outcome {
    let cfg = RunConfig::load(config)?;
    let reward = two_class_reward(&cfg.dataset.build()?)?;
    Checkpoint::reward(&reward)?.save(out)?;
    println!("wrote reward to {}", out.display());
    Ok(())
}

pub fn guide(a: GuideArgs) -> Outcome {
    let m = load_model(&a.model.checkpoint, a.model.config.as_deref(), a.model.raw)?;
    let mut g = m.cfg.guidance.clone();
    if let Some(l) = &a.lookahead {
        g.lookahead = l.parse()?;
    }
    g.nfe = a.nfe.unwrap_or(g.nfe);
    g.particles = a.particles.unwrap_or(g.particles);
    g.samples = a.samples.unwrap_or(g.samples);
    g.validate()?;

    let reward: Box<dyn RewardModel> = match a.reward.as_str() {
        "zero" => Box::new(ZeroReward),
        "two-class" => Box::new(two_class_reward(&m.ds)?),
        path => {
            let ck = Checkpoint::load(Path::new(path)).map_err(|e| Failure { code: 4, message: format!("{path}: {e}") })?;
            let r = ck.to_reward()?;
            if (r.positions, r.categories) != (m.predictor.cfg.positions, m.predictor.cfg.categories) {
                return Err(CfmError::Checkpoint("reward and model shapes differ".into()).into());
            }
            Box::new(r)
        }
    };
    let seed = a.model.seed.unwrap_or(m.cfg.seed);
    let out = guided_sample(&m.predictor, &m.params, reward.as_ref(), &TimeGrid::uniform(g.nfe), &g, seed)?;
    let states = &out.output.states;
    write_json_lines(&a.out, &sample_records(&m.ds, states, Some(&out.rewards)))?;
    let mean = out.rewards.iter().sum::<f64>() / out.rewards.len().max(1) as f64;
    let report = evaluate_states(&m.ds, states)?;
    println!(
        "samples {} resamples {} mean_reward {mean:.6} class0 {:.6} validity {:.6}",
        states.len(),
        out.resamples,
        class_frequency(states, two_class_label, 0),
        report.validity_rate
    );
    Ok(())
}

pub fn selfcheck(seed: u64, corrupt_bound: bool) -> Outcome {
    let opts = SelfcheckOptions { seed, bound_td_power: if corrupt_bound { TdPower::Gamma } else { TdPower::GammaSq }, ..Default::default() };
    let report = run_selfcheck(&opts)?;
    for r in &report.results {
        println!("{} {:<12} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure { code: 5, message: format!("failed invariants: {}", report.failed().join(", ")) })
    }
}
