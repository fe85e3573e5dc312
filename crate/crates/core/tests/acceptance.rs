//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Trains three small parity models from scratch, so a full run takes tens of
//! minutes on one core. Exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use cfm_core::data::{empirical, eval_model, make_parity_dataset, tv_distance, two_class_label, CategoricalDataset, EvalReport};
use cfm_core::flowmap::{confinement_check, flow_map_with_dt, TimePair};
use cfm_core::guidance::{class_frequency, guided_sample, GuidanceConfig, Lookahead, LogisticFit, LogisticReward, ZeroReward};
use cfm_core::interpolant::sample_prior;
use cfm_core::io::Checkpoint;
use cfm_core::losses::{LossConfig, LossKind, TdPower, Term, TimeWeight};
use cfm_core::predictor::{Activation, Predictor, PredictorConfig, PredictorParams};
use cfm_core::rng;
use cfm_core::sampler::{flowmap_trajectory, sample_sde, DiscretizeMode, ModelField, SamplerKind, TimeGrid};
use cfm_core::selfcheck::{check_bound, check_norm_formula, gradient_fd_error, jvp_fd_error, random_batch, tangent_fd_error, teacher_is_detached, term_fixture, SelfcheckOptions};
use cfm_core::trainer::{run_training, TrainConfig, TrainState};

const SEEDS: [u64; 3] = [0, 1, 2];
const EVAL_SAMPLES: usize = 50_000;
const EVAL_SEED: u64 = 1234;

fn model_config() -> PredictorConfig {
    PredictorConfig { positions: 4, categories: 3, width: 128, depth: 3, embed_dim: 16, activation: Activation::Relu, ..Default::default() }
}

fn loss_config() -> LossConfig {
    LossConfig { kind: LossKind::Ecld, diagonal_fraction: 0.5, td_power: TdPower::Gamma, ..Default::default() }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        steps: 40_000,
        batch_size: 512,
        lr: 1e-3,
        warmup_steps: 100,
        cosine_decay: true,
        min_lr_factor: 0.1,
        log_every: 10_000,
        ..Default::default()
    }
}

struct Trained {
    seed: u64,
    predictor: Predictor,
    ema: PredictorParams,
    minutes: f64,
}

fn train(ds: &CategoricalDataset, seed: u64) -> Trained {
    let predictor = Predictor::new(model_config()).unwrap();
    let start = Instant::now();
    let run = run_training(TrainState::init(&predictor, seed), &predictor, ds, &loss_config(), &train_config(), |rec| {
        println!("  seed {seed} step {} loss {:.4} ({:.0}s)", rec.step, rec.loss.total, rec.wall_time);
    })
    .unwrap();
    assert!(run.abort.is_none(), "training aborted: {:?}", run.abort);
    Trained { seed, predictor, ema: run.state.ema, minutes: start.elapsed().as_secs_f64() / 60.0 }
}

fn eval(m: &Trained, ds: &CategoricalDataset, sampler: SamplerKind, nfe: usize) -> EvalReport {
    eval_model(&m.predictor, &m.ema, ds, sampler, &TimeGrid::uniform(nfe), 0.0, EVAL_SAMPLES, EVAL_SEED).unwrap()
}

struct Line {
    id: &'static str,
    passed: bool,
    detail: String,
}

fn report(lines: &mut Vec<Line>, id: &'static str, passed: bool, detail: String) {
    println!("{id} {} {detail}", if passed { "PASS" } else { "FAIL" });
    lines.push(Line { id, passed, detail });
}

fn spread(v: &[f64]) -> f64 {
    v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min)
}

fn ac1(lines: &mut Vec<Line>) {
    let start = Instant::now();
    let c = check_bound(&SelfcheckOptions { seed: 11, bound_draws: 1000, ..Default::default() }).unwrap();
    let secs = start.elapsed().as_secs_f64();
    report(lines, "AC-1", c.passed && secs < 120.0, format!("{} ({secs:.1}s)", c.detail));
}

fn ac2(lines: &mut Vec<Line>, models: &[Trained], ds: &CategoricalDataset) {
    let (mut valid1, mut tv4) = (Vec::new(), Vec::new());
    let mut within_budget = true;
    for m in models {
        let r1 = eval(m, ds, SamplerKind::Flowmap, 1);
        let r4 = eval(m, ds, SamplerKind::Flowmap, 4);
        println!("  seed {}: NFE 1 validity {:.4} (TV {:.4}), NFE 4 TV {:.4} (validity {:.4}), {:.1} min", m.seed, r1.validity_rate, r1.tv, r4.tv, r4.validity_rate, m.minutes);
        valid1.push(r1.validity_rate);
        tv4.push(r4.tv);
        within_budget &= m.minutes <= 30.0;
    }
    let quality = valid1.iter().all(|&v| v >= 0.90) && tv4.iter().all(|&v| v <= 0.15);
    let stable = spread(&valid1) <= 0.03 && spread(&tv4) <= 0.03;
    report(
        lines,
        "AC-2",
        quality && stable && within_budget,
        format!("NFE 1 validity {valid1:.4?} (need >= 0.90), NFE 4 TV {tv4:.4?} (need <= 0.15), seed spreads {:.4}/{:.4}", spread(&valid1), spread(&tv4)),
    );
}

fn ac3(lines: &mut Vec<Line>, m: &Trained, ds: &CategoricalDataset) {
    let mut ok = true;
    let mut detail = String::new();
    for nfe in [1, 2] {
        let (f, e) = (eval(m, ds, SamplerKind::Flowmap, nfe).tv, eval(m, ds, SamplerKind::Euler, nfe).tv);
        ok &= f <= e + 0.02;
        detail.push_str(&format!("NFE {nfe}: flowmap {f:.4} vs euler {e:.4}; "));
    }
    let euler: Vec<f64> = [2, 4, 8, 16, 32].iter().map(|&n| eval(m, ds, SamplerKind::Euler, n).tv).collect();
    let monotone = euler.windows(2).all(|w| w[1] <= w[0] + 0.02);
    detail.push_str(&format!("euler TV over 2..32 {euler:.4?}"));
    report(lines, "AC-3", ok && monotone, detail);
}

fn ac4(lines: &mut Vec<Line>, m: &Trained) {
    let mut r = rng::stream(41, 0);
    let (d, k) = (4, 3);
    let mut identity = true;
    let mut fd = 0.0f64;
    for _ in 0..50 {
        let b = random_batch(&mut r, 16, d, k, 0.95);
        let x = b.x_s();
        identity &= flow_map_with_dt(&m.predictor, &m.ema, &x, &b.s, &b.s).unwrap().x_out == x;
        fd = fd.max(tangent_fd_error(&m.predictor, &m.ema, &x, &b.s, 1e-4).unwrap());
    }
    let field = ModelField { predictor: &m.predictor, params: &m.ema };
    let (mut ok, mut knots, mut trajectories) = (0usize, 0usize, 0usize);
    for steps in [1, 2, 4, 8] {
        let x0 = sample_prior(&mut r, 2500, d, k);
        trajectories += 2500;
        flowmap_trajectory(&field, x0, &TimeGrid::uniform(steps), |a, b, s, t| {
            let tp = TimePair::new(s, t).unwrap();
            for i in 0..a.shape()[0] {
                knots += 1;
                ok += usize::from(confinement_check(&a.select_rows(&[i]), &b.select_rows(&[i]), tp));
            }
        })
        .unwrap();
    }
    report(
        lines,
        "AC-4",
        identity && fd < 1e-3 && ok == knots,
        format!("identity bit-exact: {identity}; tangent FD error {fd:.3e} at eps 1e-4; {ok}/{knots} knots confined over {trajectories} trajectories"),
    );
}

fn ac5(lines: &mut Vec<Line>, m: &Trained, ds: &CategoricalDataset) {
    let reward = LogisticReward::fit(ds, two_class_label, 2, 0, &LogisticFit::default()).unwrap();
    let cfg = GuidanceConfig { lookahead: Lookahead::Flowmap, samples: 5_000, ..Default::default() };
    let grid = TimeGrid::uniform(cfg.nfe);
    let unguided = sample_sde(&m.predictor, &m.ema, &grid, cfg.sigma0, cfg.samples, DiscretizeMode::Argmax, 77).unwrap();
    let guided = guided_sample(&m.predictor, &m.ema, &reward, &grid, &cfg, 78).unwrap();
    let base = class_frequency(&unguided.states, two_class_label, 0);
    let tilted = class_frequency(&guided.output.states, two_class_label, 0);

    let zero_cfg = GuidanceConfig { samples: EVAL_SAMPLES, ..cfg.clone() };
    let zero = guided_sample(&m.predictor, &m.ema, &ZeroReward, &grid, &zero_cfg, 79).unwrap();
    let plain = sample_sde(&m.predictor, &m.ema, &grid, cfg.sigma0, EVAL_SAMPLES, DiscretizeMode::Argmax, 80).unwrap();
    let tv = tv_distance(&empirical(&zero.output.states), &empirical(&plain.states));
    report(
        lines,
        "AC-5",
        tilted >= 2.0 * base && tv < 0.03,
        format!("class-0 frequency {tilted:.4} guided vs {base:.4} unguided ({:.2}x); zero-reward TV {tv:.4}", tilted / base),
    );
}

fn ac6(lines: &mut Vec<Line>) {
    let mut r = rng::stream(61, 0);
    let (mut grad, mut jvp) = (0.0f64, 0.0f64);
    let mut detached = true;
    for _ in 0..5 {
        for term in Term::ALL {
            for w_t in [TimeWeight::One, TimeWeight::Inv1mt, TimeWeight::Inv1mtSq] {
                for td_power in [TdPower::GammaSq, TdPower::Gamma] {
                    let (pred, params, batch) = term_fixture(term, &mut r);
                    let cfg = LossConfig { w_t, td_power, ..Default::default() };
                    grad = grad.max(gradient_fd_error(&pred, &params, &batch, term, &cfg, 8, &mut r).unwrap());
                    detached &= teacher_is_detached(&pred, &params, &batch, term, &cfg).unwrap();
                }
            }
            let (pred, params, batch) = term_fixture(Term::Csd, &mut r);
            jvp = jvp.max(jvp_fd_error(&pred, &params, &batch).unwrap());
        }
    }
    report(lines, "AC-6", grad < 1e-4 && jvp < 1e-5 && detached, format!("gradient rel error {grad:.3e}, JVP rel error {jvp:.3e}, teacher detached: {detached}"));
}

fn ac7(lines: &mut Vec<Line>) {
    let c = check_norm_formula(&SelfcheckOptions { seed: 71, norm_draws: 1_000_000, ..Default::default() }).unwrap();
    report(lines, "AC-7", c.passed, c.detail);
}

fn ac8(lines: &mut Vec<Line>, ds: &CategoricalDataset) {
    let predictor = Predictor::new(PredictorConfig { positions: 4, categories: 3, width: 32, depth: 2, ..Default::default() }).unwrap();
    let cfg = TrainConfig { steps: 200, batch_size: 64, log_every: 1000, ..Default::default() };
    let bytes = || {
        let run = run_training(TrainState::init(&predictor, 5), &predictor, ds, &loss_config(), &cfg, |_| {}).unwrap();
        Checkpoint::predictor(&predictor.cfg, run.state.step, &run.state.params, &run.state.ema).unwrap().encode().unwrap()
    };
    let (a, b) = (bytes(), bytes());
    let dir = std::env::temp_dir().join(format!("cfm-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("ck.cfm");
    let ck = Checkpoint::decode(&a).unwrap();
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let round_trip = back == ck && std::fs::read(&path).unwrap() == a;
    let _ = std::fs::remove_dir_all(&dir);
    report(lines, "AC-8", a == b && round_trip, format!("rerun identical: {}, round trip bit-exact: {round_trip} ({} bytes)", a == b, a.len()));
}

fn main() -> ExitCode {
    let ds = make_parity_dataset(4, 3).unwrap();
    let mut lines = Vec::new();
    ac1(&mut lines);
    ac6(&mut lines);
    ac7(&mut lines);
    ac8(&mut lines, &ds);

    let models: Vec<Trained> = SEEDS.iter().map(|&s| train(&ds, s)).collect();
    ac2(&mut lines, &models, &ds);
    ac3(&mut lines, &models[0], &ds);
    ac4(&mut lines, &models[0]);
    ac5(&mut lines, &models[0], &ds);

    lines.sort_by_key(|l| l.id);
    println!("\nsummary");
    for l in &lines {
        println!("{} {} {}", l.id, if l.passed { "PASS" } else { "FAIL" }, l.detail);
    }
    if lines.iter().all(|l| l.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
