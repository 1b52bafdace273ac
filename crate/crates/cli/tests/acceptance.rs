//! End-to-end acceptance checks. Each test prints one verdict line:
//!
//! `criterion N [name]: PASS|FAIL  <measured values>`
//!
//! Run with `cargo test --release -p mtlb-cli --test acceptance -- --nocapture`
//! to see the lines. Tests hold a shared lock so wall-time measurements do
//! not overlap.

use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use mtlb_cli::{cmd_eval, cmd_generate, cmd_study, load_config, Options};
use mtlb_core::graph::Graph;
use mtlb_core::metrics::{average_precision, classify_shape, min_ade, min_fde, miss_rate, EvalRecord, MatchThresholds};
use mtlb_core::model::decoder::GAUSS_PARAMS;
use mtlb_core::model::encoder::SceneTokens;
use mtlb_core::model::{gmm_head, mixture_density, Encoder, EncoderLayer, ModePrediction, ModelConfig, MotionTransformer, PredictionSet};
use mtlb_core::nn::AttentionSpec;
use mtlb_core::params::{ParamGroup, ParameterStore};
use mtlb_core::runconfig::Command;
use mtlb_core::scene::pchip::pchip_resample;
use mtlb_core::scene::{
    generate_synthetic, load_dataset, save_dataset, to_ego_frame, vectorize, Dataset, DatasetRole, EgoTransform,
    GeneratorConfig, Preset, SplitName,
};
use mtlb_core::train::{
    adamw_step, lr_at, run_experiment, save_oracle_fixture, scale_lr, training_loss, AdamWConfig, Checkpoint,
    ExperimentSpec, LrSchedule, Method, OptimizerState, PreparedData, TrainConfig,
};
use mtlb_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, name: &str, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("criterion {n} [{name}]: {tag}  {detail}");
    assert!(pass, "criterion {n} [{name}] failed: {detail}");
}

// ---------------------------------------------------------------- 1

const RATE: f64 = 10.0;
const METRIC_TOL: f64 = 1e-12;
const AP_TOL: f64 = 1e-9;
const METRIC_BUDGET: Duration = Duration::from_secs(10);

fn random_record(rng: &mut ChaCha8Rng, t: usize, k: usize) -> EvalRecord {
    let speed = rng.gen_range(0.0..15.0);
    let mut heading: f64 = rng.gen_range(-0.4..0.4);
    let mut p = [0.0f64; 2];
    let (mut gt, mut gt_heading) = (Vec::new(), Vec::new());
    for _ in 0..t {
        heading += rng.gen_range(-0.12..0.12);
        p = [p[0] + heading.cos() * speed / RATE, p[1] + heading.sin() * speed / RATE];
        gt.push(p);
        gt_heading.push(heading);
    }
    let spread = rng.gen_range(0.1..5.0);
    let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let modes = weights
        .iter()
        .map(|w| {
            let off = [rng.gen_range(-spread..spread), rng.gen_range(-spread..spread)];
            ModePrediction {
                traj: gt.iter().map(|q| [q[0] + off[0], q[1] + off[1]]).collect(),
                sigma: vec![[1.0, 1.0]; t],
                rho: vec![0.0; t],
                confidence: w / total,
            }
        })
        .collect();
    let category = classify_shape([0.0, 0.0], 0.0, gt[t - 1], gt_heading[t - 1]);
    EvalRecord {
        gt,
        gt_heading,
        speed,
        pred: PredictionSet { modes },
        category,
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Threshold table written out case by case.
fn brute_threshold(t: f64, speed: f64) -> (f64, f64) {
    let lat = match t {
        t if t <= 3.0 => 1.0,
        t if t <= 5.0 => 1.0 + 0.4 * (t - 3.0),
        t if t <= 8.0 => 1.8 + 0.4 * (t - 5.0),
        _ => 3.0,
    };
    let scale = (0.5 + 0.5 * (speed - 1.4) / (11.0 - 1.4)).clamp(0.5, 1.0);
    (2.0 * lat * scale, lat * scale)
}

fn brute_hit(r: &EvalRecord, k: usize, h: usize) -> bool {
    let (lon, lat) = brute_threshold((h + 1) as f64 / RATE, r.speed);
    let (s, c) = r.gt_heading[h].sin_cos();
    let dx = r.pred.modes[k].traj[h][0] - r.gt[h][0];
    let dy = r.pred.modes[k].traj[h][1] - r.gt[h][1];
    (c * dx + s * dy).abs() < lon && (c * dy - s * dx).abs() < lat
}

/// Precision at every rank, then the area under the running-max-from-the-right curve.
fn brute_ap(recs: &[&EvalRecord], h: usize) -> f64 {
    let mut dets: Vec<(f64, usize, usize)> = recs
        .iter()
        .enumerate()
        .flat_map(|(r, rec)| rec.pred.modes.iter().enumerate().map(move |(k, m)| (m.confidence, r, k)))
        .collect();
    dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut used = vec![false; recs.len()];
    let mut curve = Vec::new();
    let mut tp = 0usize;
    for (i, &(_, r, k)) in dets.iter().enumerate() {
        if !used[r] && brute_hit(recs[r], k, h) {
            used[r] = true;
            tp += 1;
        }
        curve.push((tp as f64 / recs.len() as f64, tp as f64 / (i + 1) as f64));
    }
    let mut area = 0.0;
    let mut prev = 0.0;
    for i in 0..curve.len() {
        if curve[i].0 > prev {
            let best = curve[i..].iter().map(|c| c.1).fold(0.0, f64::max);
            area += (curve[i].0 - prev) * best;
            prev = curve[i].0;
        }
    }
    area
}

#[test]
fn criterion_01_metric_oracles() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let th = MatchThresholds::default();
    let (mut worst_metric, mut worst_ap) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let n = rng.gen_range(1..8);
        let t = rng.gen_range(2..40);
        let k = rng.gen_range(1..7);
        let recs: Vec<EvalRecord> = (0..n).map(|_| random_record(&mut rng, t, k)).collect();
        let h = t - 1;
        for r in &recs {
            let trajs: Vec<&[[f64; 2]]> = r.pred.modes.iter().map(|m| m.traj.as_slice()).collect();
            let ade = r
                .pred
                .modes
                .iter()
                .map(|m| (0..t).map(|i| dist(m.traj[i], r.gt[i])).sum::<f64>() / t as f64)
                .fold(f64::INFINITY, f64::min);
            let fde = r.pred.modes.iter().map(|m| dist(m.traj[h], r.gt[h])).fold(f64::INFINITY, f64::min);
            worst_metric = worst_metric
                .max((min_ade(&r.gt, &trajs).unwrap() - ade).abs())
                .max((min_fde(&r.gt, &trajs).unwrap() - fde).abs());
        }
        let misses = recs.iter().filter(|r| !(0..k).any(|j| brute_hit(r, j, h))).count() as f64 / n as f64;
        worst_metric = worst_metric.max((miss_rate(&recs, h, RATE, &th).unwrap() - misses).abs());
        let all: Vec<&EvalRecord> = recs.iter().collect();
        worst_ap = worst_ap.max((average_precision(&all, h, RATE, &th).unwrap() - brute_ap(&all, h)).abs());
    }
    let took = start.elapsed();
    verdict(
        1,
        "metric oracles",
        worst_metric <= METRIC_TOL && worst_ap <= AP_TOL && took < METRIC_BUDGET,
        format!("max |err| ade/fde/miss {worst_metric:.1e} (tol {METRIC_TOL:.0e}), ap {worst_ap:.1e} (tol {AP_TOL:.0e}), {took:.2?} (budget {METRIC_BUDGET:?})"),
    );
}

// ---------------------------------------------------------------- 2

const GRAD_TOL: f64 = 1e-4;
/// First step, then smaller retries for stencils that straddle a ReLU kink.
const GRAD_STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];
/// Denominator floor of the relative error; see the note in the test body.
const GRAD_FLOOR: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(120);

fn gradient_config() -> ModelConfig {
    ModelConfig {
        dim: 16,
        heads: 2,
        encoder_layers: 2,
        decoder_layers: 2,
        modes: 4,
        output_modes: 4,
        future: 10,
        neighbors: 4,
        map_collect: 3,
        max_agents: 3,
        max_map: 5,
        map_points: 6,
        ..ModelConfig::default()
    }
}

fn loss_at(model: &MotionTransformer, sample: &mtlb_core::scene::SceneSample) -> f64 {
    let mut g = Graph::new();
    let out = model.forward(&mut g, sample).unwrap();
    let (loss, _) = training_loss(&mut g, &out, sample, &model.intentions).unwrap();
    g.value(loss).data()[0]
}

#[test]
fn criterion_02_full_model_gradients() {
    let _g = serial();
    let start = Instant::now();
    let cfg = gradient_config();
    let scenario = generate_synthetic(&GeneratorConfig {
        seed: 9,
        count: 1,
        ..GeneratorConfig::default()
    })
    .unwrap()
    .remove(0);
    let sample = vectorize(&to_ego_frame(&scenario).unwrap(), &cfg.vectorize()).unwrap();
    let agents = sample.agents.len();
    let polylines = sample.map.len();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let intentions = Tensor::new(&[4, 2], (0..8).map(|_| rng.gen_range(-10.0..40.0)).collect()).unwrap();
    let mut model = MotionTransformer::new(cfg, intentions, 21).unwrap();

    let mut g = Graph::new();
    let out = model.forward(&mut g, &sample).unwrap();
    let (loss, _) = training_loss(&mut g, &out, &sample, &model.intentions).unwrap();
    let grads = g.backward(loss).unwrap();
    g.accumulate_param_grads(&grads, &mut model.store).unwrap();
    let analytic: Vec<Vec<f64>> = model
        .store
        .entries()
        .iter()
        .map(|e| e.grad.clone().unwrap_or_else(|| vec![0.0; e.value.numel()]))
        .collect();

    // Central differences carry about 1e-8 of round-off at this loss
    // magnitude, so tiny or exactly-zero gradients are compared against
    // the floor instead of their own size. The loss is piecewise smooth
    // (ReLU), and a kink inside the stencil makes the difference quotient
    // an average of two slopes; such entries are retried with a smaller
    // step. A wrong analytic gradient fails at every step.
    let mut worst = (0.0f64, String::new());
    let mut checked = 0usize;
    let mut retried = 0usize;
    for i in 0..model.store.len() {
        for j in 0..model.store.entries()[i].value.numel() {
            let orig = model.store.entries()[i].value.data()[j];
            let a = analytic[i][j];
            let mut best = f64::INFINITY;
            for (attempt, h) in GRAD_STEPS.into_iter().enumerate() {
                model.store.entries_mut()[i].value.data_mut()[j] = orig + h;
                let up = loss_at(&model, &sample);
                model.store.entries_mut()[i].value.data_mut()[j] = orig - h;
                let down = loss_at(&model, &sample);
                model.store.entries_mut()[i].value.data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                best = best.min((a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR));
                if best < GRAD_TOL {
                    retried += usize::from(attempt > 0);
                    break;
                }
            }
            if best > worst.0 {
                worst = (best, format!("{}[{j}]", model.store.entries()[i].name));
            }
            checked += 1;
        }
    }
    let took = start.elapsed();
    verdict(
        2,
        "gradient check",
        worst.0 < GRAD_TOL && took < GRAD_BUDGET && agents == 3 && polylines == 5,
        format!(
            "{checked} parameters ({retried} retried at a smaller step), {agents} agents, {polylines} polylines, worst rel err {:.2e} at {} (tol {GRAD_TOL:.0e}), {took:.1?} (budget {GRAD_BUDGET:?})",
            worst.0, worst.1
        ),
    );
}

// ---------------------------------------------------------------- 3

const MIXTURE_SUM_TOL: f64 = 1e-9;
const QUADRATURE_TOL: f64 = 1e-3;

fn random_head(rng: &mut ChaCha8Rng, k: usize, t: usize) -> Tensor {
    let mut data = Vec::new();
    for _ in 0..k {
        for _ in 0..t {
            data.extend([
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.3..1.0),
                rng.gen_range(-0.3..1.0),
                rng.gen_range(-1.0..1.0),
            ]);
        }
        data.push(rng.gen_range(-5.0..5.0));
    }
    Tensor::new(&[k, t * GAUSS_PARAMS + 1], data).unwrap()
}

#[test]
fn criterion_03_mixture_validity() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst_sum = 0.0f64;
    for _ in 0..100 {
        let k = rng.gen_range(1..8);
        let p = gmm_head(&random_head(&mut rng, k, 10), 10).unwrap();
        worst_sum = worst_sum.max((p.modes.iter().map(|m| m.confidence).sum::<f64>() - 1.0).abs());
    }
    let p = gmm_head(&random_head(&mut rng, 4, 10), 10).unwrap();
    let step = 0.1;
    let mut integral = 0.0;
    for i in 0..1000 {
        for j in 0..1000 {
            let o = [-50.0 + (i as f64 + 0.5) * step, -50.0 + (j as f64 + 0.5) * step];
            integral += mixture_density(&p, 9, o).unwrap() * step * step;
        }
    }
    verdict(
        3,
        "mixture validity",
        worst_sum <= MIXTURE_SUM_TOL && (integral - 1.0).abs() <= QUADRATURE_TOL,
        format!(
            "max |sum c - 1| {worst_sum:.1e} (tol {MIXTURE_SUM_TOL:.0e}), integral over [-50,50]^2 {integral:.6} (tol {QUADRATURE_TOL:.0e})"
        ),
    );
}

// ---------------------------------------------------------------- 4

const ADAMW_TOL: f64 = 1e-12;

#[test]
fn criterion_04_optimizer_and_schedule() {
    let _g = serial();
    let mut store = ParameterStore::new();
    store.register("theta", Tensor::scalar(1.0), ParamGroup::Encoder).unwrap();
    let mut opt = OptimizerState::new(&store, AdamWConfig::default());
    store.accumulate_grad(store.id("theta").unwrap(), &[0.5]).unwrap();
    adamw_step(&mut store, &mut opt, 0.1).unwrap();
    let theta = store.entries()[0].value.data()[0];
    // first step: m_hat = 0.5, v_hat = 0.25, decoupled decay 0.01 * theta
    let hand = 1.0 - 0.1 * (0.5 / (0.25f64.sqrt() + 1e-8) + 0.01);
    let trace_ok = (theta - hand).abs() <= ADAMW_TOL && (theta - 0.8990).abs() < 1e-8;

    let s = LrSchedule::default();
    let plateaus = [0.0, 22.0, 24.0, 26.0, 28.0].map(|e| lr_at(&s, e).unwrap());
    let expected = [1.18e-5, 5.9e-6, 2.9e-6, 1.4e-6, 7e-7];
    let scaled = scale_lr(1e-4, 80, 1).unwrap();
    verdict(
        4,
        "optimizer and schedule",
        trace_ok && plateaus == expected && (1.11e-5..=1.19e-5).contains(&scaled),
        format!("theta1 {theta:.12} vs hand {hand:.12} (tol {ADAMW_TOL:.0e}), plateaus {plateaus:?} exact, scale_lr(1e-4, 80, 1) = {scaled:.4e} in [1.11e-5, 1.19e-5]"),
    );
}

// ---------------------------------------------------------------- 5

const FREEZE_BUDGET: Duration = Duration::from_secs(300);

fn desk_data(seed: u64, n_source: usize, n_target: usize, model: &ModelConfig) -> PreparedData {
    let make = |preset, count, s| {
        generate_synthetic(&GeneratorConfig {
            seed: s,
            preset,
            count,
            ..GeneratorConfig::default()
        })
        .unwrap()
    };
    let src = Dataset::new(DatasetRole::Source, make(Preset::SourceLike, n_source, seed), seed).unwrap();
    let tgt = Dataset::new(DatasetRole::Target, make(Preset::TargetLike, n_target, seed + 1000), seed).unwrap();
    PreparedData::new(&src, &tgt, model).unwrap()
}

fn bits(ckpt: &Checkpoint, keep: impl Fn(ParamGroup) -> bool) -> Vec<(String, Vec<u64>)> {
    ckpt.model
        .store
        .entries()
        .iter()
        .filter(|e| keep(e.group))
        .map(|e| (e.name.clone(), e.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn criterion_05_freeze_soundness() {
    let _g = serial();
    let start = Instant::now();
    let model = ModelConfig::default();
    let data = desk_data(5, 60, 30, &model);
    let train = TrainConfig {
        epochs: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let run = |method, base: Option<&Checkpoint>| {
        let spec = ExperimentSpec {
            method,
            model: model.clone(),
            train: train.clone(),
        };
        run_experiment(&spec, &data, base).unwrap().checkpoint
    };
    let sb = run(Method::SB, None);
    let fte = run(Method::FTE, Some(&sb));
    let ftd = run(Method::FTD, Some(&sb));
    let fr = run(Method::FR, Some(&sb));
    let dec = |g| g == ParamGroup::Decoder;
    let enc = |g| g == ParamGroup::Encoder;
    let pre = |g| g != ParamGroup::AuxiliaryNew;
    let fte_ok = bits(&sb, dec) == bits(&fte, dec) && bits(&sb, enc) != bits(&fte, enc);
    let ftd_ok = bits(&sb, enc) == bits(&ftd, enc) && bits(&sb, dec) != bits(&ftd, dec);
    let fr_ok = bits(&sb, pre) == bits(&fr, pre) && fr.model.store.numel_in(ParamGroup::AuxiliaryNew) > 0;
    let took = start.elapsed();
    verdict(
        5,
        "freeze soundness",
        fte_ok && ftd_ok && fr_ok && took < FREEZE_BUDGET,
        format!(
            "FTE decoder frozen {fte_ok}, FTD encoder frozen {ftd_ok}, FR pre-trained frozen {fr_ok}, {} decoder + {} encoder tensors, {took:.1?} (budget {FREEZE_BUDGET:?})",
            bits(&sb, dec).len(),
            bits(&sb, enc).len()
        ),
    );
}

// ---------------------------------------------------------------- 6

/// Fixed before the study was ever run at this seed.
const STUDY_SEED: u64 = 42;
const STAGE_RATIO_LIMIT: f64 = 0.25;
const STUDY_BUDGET: Duration = Duration::from_secs(2 * 3600);

fn generate_into(path: &Path, preset: &str, count: usize, seed: u64) {
    let o = Options {
        overrides: vec![format!("generate.preset={preset}"), format!("generate.count={count}")],
        seed: Some(seed),
        ..Options::default()
    };
    cmd_generate(&load_config(Command::Generate, &o).unwrap(), path, false).unwrap();
}

fn study_options(dir: &Path, seed: u64, extra: &[&str]) -> Options {
    let mut overrides = vec![
        format!("data.source={}", dir.join("source.bin").display()),
        format!("data.target={}", dir.join("target.bin").display()),
    ];
    overrides.extend(extra.iter().map(|s| s.to_string()));
    Options {
        overrides,
        seed: Some(seed),
        ..Options::default()
    }
}

#[test]
fn criterion_06_directional_study() {
    let _g = serial();
    let start = Instant::now();
    let dir = TempDir::new().unwrap();
    generate_into(&dir.path().join("source.bin"), "source_like", 300, STUDY_SEED);
    generate_into(&dir.path().join("target.bin"), "target_like", 100, STUDY_SEED + 1000);
    // defaults: D = 32, 10 epochs
    let cfg = load_config(Command::Study, &study_options(dir.path(), STUDY_SEED, &[])).unwrap();
    assert_eq!((cfg.model.dim, cfg.train.epochs), (32, 10));
    let s = cmd_study(&cfg, &dir.path().join("study"), false).unwrap();
    let took = start.elapsed();
    println!("{}", s.report.to_text());

    let row = |m| s.report.row(m).unwrap();
    let best_ade = s.report.rows.iter().map(|r| r.target.min_ade).fold(f64::INFINITY, f64::min);
    let best_mr = s.report.rows.iter().map(|r| r.target.miss_rate).fold(f64::INFINITY, f64::min);
    let ft = row(Method::FT);
    let sb = row(Method::SB);
    let ade_ok = ft.target.min_ade <= best_ade;
    let mr_ok = ft.target.miss_rate <= best_mr;
    let forgetting = ft.source.min_ade > sb.source.min_ade;

    let secs = |m: Method| s.stages.iter().filter(|l| l.method == m).map(|l| l.seconds).sum::<f64>();
    let sb_secs = secs(Method::SB);
    let ratios: Vec<(Method, f64)> = [Method::FT, Method::FTD, Method::FTE, Method::FR]
        .into_iter()
        .map(|m| (m, secs(m) / sb_secs))
        .collect();
    let time_ok = ratios.iter().all(|(_, r)| *r < STAGE_RATIO_LIMIT);
    let ratio_text: Vec<String> = ratios.iter().map(|(m, r)| format!("{m} {r:.3}")).collect();
    verdict(
        6,
        "directional study",
        ade_ok && mr_ok && forgetting && time_ok && took < STUDY_BUDGET,
        format!(
            "seed {STUDY_SEED}: FT target minADE {:.3} (best {best_ade:.3}) ok={ade_ok}, FT target missRate {:.3} (best {best_mr:.3}) ok={mr_ok}, \
             source minADE FT {:.3} > SB {:.3} ok={forgetting}, target-stage/SB wall time [{}] (limit {STAGE_RATIO_LIMIT}) ok={time_ok}, {took:.0?} (budget {STUDY_BUDGET:?})",
            ft.target.min_ade,
            ft.target.miss_rate,
            ft.source.min_ade,
            sb.source.min_ade,
            ratio_text.join(", ")
        ),
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_perfect_oracle() {
    let _g = serial();
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("target.bin");
    generate_into(&data, "target_like", 60, 7);
    let fixture = dir.path().join("oracle.mtlb");
    save_oracle_fixture(&fixture, 6).unwrap();
    let cfg = load_config(Command::Eval, &Options::default()).unwrap();
    let r = cmd_eval(&cfg, &fixture, &data, SplitName::Train, None, false).unwrap();
    verdict(
        7,
        "perfect oracle",
        r.map == 1.0 && r.min_ade == 0.0 && r.min_fde == 0.0 && r.miss_rate == 0.0,
        format!(
            "{} samples: mAP {}, minADE {}, minFDE {}, missRate {} (exact)",
            r.samples, r.map, r.min_ade, r.min_fde, r.miss_rate
        ),
    );
}

// ---------------------------------------------------------------- 8

const LOCALITY_TOL: f64 = 1e-12;

#[test]
fn criterion_08_full_neighborhood_is_dense() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let dim = 16;
        let n = rng.gen_range(1..20);
        let mut store = ParameterStore::new();
        let spec = AttentionSpec::new(dim, 4).unwrap();
        let layers: Vec<EncoderLayer> = (0..2)
            .map(|i| EncoderLayer::register(&mut store, &format!("e{i}"), spec, ParamGroup::Encoder, &mut rng).unwrap())
            .collect();
        let mut g = Graph::new();
        let features = g
            .input(Tensor::new(&[n, dim], (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
            .unwrap();
        let positions: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)]).collect();
        let tokens = SceneTokens {
            features,
            positions: positions.clone(),
            n_agents: 1 + n / 2,
        };
        let local = Encoder::local_self_attention(&mut g, &store, &layers, &tokens, n, dim).unwrap();
        let pos = g.constant(Tensor::new(&[n, 2], positions.into_iter().flatten().collect()).unwrap()).unwrap();
        let pe = g.sinusoidal_pe(pos, dim).unwrap();
        let mut dense = features;
        for l in &layers {
            dense = l.forward(&mut g, &store, dense, pe, None).unwrap();
        }
        worst = worst.max(g.value(local.features).max_abs_diff(g.value(dense)));
    }
    verdict(
        8,
        "locality degeneracy",
        worst <= LOCALITY_TOL,
        format!("50 instances, max |local - dense| {worst:.1e} (tol {LOCALITY_TOL:.0e})"),
    );
}

// ---------------------------------------------------------------- 9

const EGO_TOL: f64 = 1e-9;

#[test]
fn criterion_09_pipeline_round_trips() {
    let _g = serial();
    let dir = TempDir::new().unwrap();
    let scenarios = generate_synthetic(&GeneratorConfig {
        seed: 99,
        count: 40,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let ds = Dataset::new(DatasetRole::Source, scenarios, 99).unwrap();
    let path = dir.path().join("ds.bin");
    save_dataset(&path, &ds).unwrap();
    let back = load_dataset(&path).unwrap();
    let again = dir.path().join("ds2.bin");
    save_dataset(&again, &back).unwrap();
    let bytes_ok = back == ds && std::fs::read(&path).unwrap() == std::fs::read(&again).unwrap();

    let mut worst_ego = 0.0f64;
    for s in &ds.scenarios {
        let tf = EgoTransform::from_focal(s).unwrap();
        let round = tf.to_world(&tf.apply(s));
        for (a, b) in s.agents.iter().zip(&round.agents) {
            for (x, y) in a.states.iter().zip(&b.states).filter(|(x, _)| x.valid) {
                for k in 0..3 {
                    worst_ego = worst_ego.max((x.center[k] - y.center[k]).abs());
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let (mut knot_err, mut overshoot) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.gen_range(2..15);
        let dir_sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let mut t = vec![0.0];
        let mut y = vec![rng.gen_range(-10.0..10.0)];
        for _ in 1..n {
            t.push(t.last().unwrap() + rng.gen_range(0.01..1.0));
            // flat segments included
            let step = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..5.0) };
            y.push(y.last().unwrap() + dir_sign * step);
        }
        let at_knots = pchip_resample(&t, &y, &t).unwrap();
        knot_err = knot_err.max(at_knots.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let end = *t.last().unwrap();
        let q: Vec<f64> = (0..=200).map(|i| (end * i as f64 / 200.0).min(end)).collect();
        let v = pchip_resample(&t, &y, &q).unwrap();
        for (qi, vi) in q.iter().zip(&v) {
            let k = t.partition_point(|x| x <= qi).clamp(1, n - 1);
            let (lo, hi) = (y[k - 1].min(y[k]), y[k - 1].max(y[k]));
            overshoot = overshoot.max(lo - vi).max(vi - hi);
        }
    }
    verdict(
        9,
        "pipeline round trips",
        bytes_ok && worst_ego < EGO_TOL && knot_err == 0.0 && overshoot <= 0.0,
        format!(
            "dataset byte-exact {bytes_ok}, ego round trip {worst_ego:.1e} (tol {EGO_TOL:.0e}), pchip knot error {knot_err:e} (exact), max overshoot {:e} on 1000 channels",
            overshoot.max(0.0)
        ),
    );
}

// ---------------------------------------------------------------- 10

const REPORT_FILES: [&str; 4] = ["study.txt", "study.json", "total_time.csv", "target_stage_time.csv"];

#[test]
fn criterion_10_study_determinism() {
    let _g = serial();
    let dir = TempDir::new().unwrap();
    generate_into(&dir.path().join("source.bin"), "source_like", 40, 10);
    generate_into(&dir.path().join("target.bin"), "target_like", 20, 1010);
    let small = ["model.dim=16", "model.encoder_layers=1", "model.decoder_layers=1", "train.epochs=2"];
    let cfg = load_config(Command::Study, &study_options(dir.path(), 10, &small)).unwrap();
    cmd_study(&cfg, &dir.path().join("a"), false).unwrap();
    cmd_study(&cfg, &dir.path().join("b"), false).unwrap();
    let same: Vec<(&str, bool)> = REPORT_FILES
        .iter()
        .map(|f| {
            let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
            let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
            (*f, !a.is_empty() && a == b)
        })
        .collect();
    verdict(
        10,
        "study determinism",
        same.iter().all(|(_, s)| *s),
        format!("byte-identical: {same:?}"),
    );
}
