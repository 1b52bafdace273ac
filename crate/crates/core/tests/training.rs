use mtlb_core::graph::Graph;
use mtlb_core::metrics::{evaluate, MatchThresholds};
use mtlb_core::model::ModelConfig;
use mtlb_core::params::{ParamGroup, ParameterStore};
use mtlb_core::scene::{generate_synthetic, Dataset, DatasetRole, GeneratorConfig, Preset};
use mtlb_core::train::{
    adamw_step, clip_grad_norm, load_predictor, lr_at, run_experiment, save_oracle_fixture, scale_lr, training_loss,
    AdamWConfig, Checkpoint, ExperimentResult, ExperimentSpec, LrSchedule, Method, OptimizerState, PreparedData,
    TrainConfig, REFERENCE_LR,
};
use mtlb_core::{Error, Tensor};
use proptest::prelude::*;

fn small_model() -> ModelConfig {
    ModelConfig {
        dim: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        modes: 3,
        output_modes: 3,
        future: 10,
        max_agents: 4,
        max_map: 8,
        map_points: 8,
        ..ModelConfig::default()
    }
}

fn small_data(seed: u64, n_source: usize, n_target: usize) -> PreparedData {
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
    let tgt = Dataset::new(DatasetRole::Target, make(Preset::TargetLike, n_target, seed + 1), seed).unwrap();
    PreparedData::new(&src, &tgt, &small_model()).unwrap()
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn run(method: Method, data: &PreparedData, base: Option<&Checkpoint>, epochs: usize) -> ExperimentResult {
    let spec = ExperimentSpec {
        method,
        model: small_model(),
        train: train_cfg(epochs),
    };
    run_experiment(&spec, data, base).unwrap()
}

fn scalar_store(theta: f64) -> ParameterStore {
    let mut s = ParameterStore::new();
    s.register("w", Tensor::scalar(theta), ParamGroup::Encoder).unwrap();
    s
}

#[test]
fn adamw_single_step_trace() {
    let mut s = scalar_store(1.0);
    let mut opt = OptimizerState::new(&s, AdamWConfig::default());
    s.accumulate_grad(s.id("w").unwrap(), &[0.5]).unwrap();
    adamw_step(&mut s, &mut opt, 0.1).unwrap();
    let theta = s.entries()[0].value.data()[0];
    // m̂ = 0.5, v̂ = 0.25 after bias correction
    let exact = 1.0 - 0.1 * (0.5 / (0.25f64.sqrt() + 1e-8) + 0.01 * 1.0);
    assert!((theta - exact).abs() < 1e-12, "{theta} vs {exact}");
    assert!((theta - 0.8990).abs() < 1e-8);
    assert_eq!(opt.step, 1);
    assert!(s.entries()[0].grad.is_none());
}

/// Textbook Adam on one scalar, with decay term left out.
fn plain_adam(theta0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    for (t, g) in grads.iter().enumerate() {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32 + 1));
        let vh = v / (1.0 - b2.powi(t as i32 + 1));
        theta -= lr * mh / (vh.sqrt() + eps);
    }
    theta
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_decay_is_plain_adam(theta0 in -3.0f64..3.0, grads in prop::collection::vec(-2.0f64..2.0, 1..20), lr in 1e-4f64..0.1) {
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut s = scalar_store(theta0);
        let mut opt = OptimizerState::new(&s, cfg);
        for g in &grads {
            s.accumulate_grad(s.id("w").unwrap(), &[*g]).unwrap();
            adamw_step(&mut s, &mut opt, lr).unwrap();
        }
        let want = plain_adam(theta0, &grads, lr, cfg.beta1, cfg.beta2, cfg.eps);
        prop_assert!((s.entries()[0].value.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn schedule_never_increases(initial in 1e-6f64..1e-2, epochs in 1usize..40, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let s = LrSchedule::new(initial, epochs as f64).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(lr_at(&s, lo * epochs as f64).unwrap() >= lr_at(&s, hi * epochs as f64).unwrap());
        prop_assert!(lr_at(&s, hi * epochs as f64).unwrap() > 0.0);
    }
}

#[test]
fn reference_plateaus_are_exact() {
    let s = LrSchedule::default();
    let at = |e: f64| lr_at(&s, e).unwrap();
    assert_eq!([at(0.0), at(22.0), at(24.0), at(26.0), at(28.0)], REFERENCE_LR);
    assert_eq!(at(21.99), 1.18e-5);
    assert!(matches!(lr_at(&s, -0.5), Err(Error::Input(_))));
}

#[test]
fn square_root_batch_rule() {
    let lr = scale_lr(1e-4, 80, 1).unwrap();
    assert!((1.11e-5..=1.19e-5).contains(&lr), "{lr}");
    assert!((scale_lr(5e-4, 16, 64).unwrap() - 1e-3).abs() < 1e-18);
    assert_eq!(scale_lr(1e-4, 80, 80).unwrap(), 1e-4);
}

#[test]
fn loss_halves_on_a_small_overfit_set() {
    let data = small_data(21, 20, 4);
    let pool = &data.source_train;
    assert!(pool.len() >= 15);
    let mut ckpt = run(Method::SB, &data, None, 1).checkpoint;
    // restart from an untrained model with the same intentions
    let fresh = mtlb_core::model::MotionTransformer::new(small_model(), ckpt.model.intentions.clone(), 9).unwrap();
    ckpt = Checkpoint::new(fresh, AdamWConfig::default());
    let mean_loss = |ckpt: &Checkpoint| {
        pool.iter()
            .map(|s| {
                let mut g = Graph::new();
                let out = ckpt.model.forward(&mut g, s).unwrap();
                training_loss(&mut g, &out, s, &ckpt.model.intentions).unwrap().1.total
            })
            .sum::<f64>()
            / pool.len() as f64
    };
    let initial = mean_loss(&ckpt);
    for _ in 0..15 {
        for s in pool {
            let mut g = Graph::new();
            let out = ckpt.model.forward(&mut g, s).unwrap();
            let (loss, _) = training_loss(&mut g, &out, s, &ckpt.model.intentions).unwrap();
            let grads = g.backward(loss).unwrap();
            g.accumulate_param_grads(&grads, &mut ckpt.model.store).unwrap();
            clip_grad_norm(&mut ckpt.model.store, 1.0);
            adamw_step(&mut ckpt.model.store, &mut ckpt.optimizer, 2e-3).unwrap();
        }
    }
    let after = mean_loss(&ckpt);
    assert!(after < 0.5 * initial, "loss {initial} -> {after}");
}

fn tensors_of(ckpt: &Checkpoint, keep: impl Fn(ParamGroup) -> bool) -> Vec<(String, Vec<u64>)> {
    ckpt.model
        .store
        .entries()
        .iter()
        .filter(|e| keep(e.group))
        .map(|e| (e.name.clone(), e.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn frozen_tensors_stay_bit_identical() {
    let data = small_data(5, 24, 12);
    let sb = run(Method::SB, &data, None, 2).checkpoint;

    let fte = run(Method::FTE, &data, Some(&sb), 2).checkpoint;
    assert_eq!(tensors_of(&sb, |g| g == ParamGroup::Decoder), tensors_of(&fte, |g| g == ParamGroup::Decoder));
    assert_ne!(tensors_of(&sb, |g| g == ParamGroup::Encoder), tensors_of(&fte, |g| g == ParamGroup::Encoder));

    let ftd = run(Method::FTD, &data, Some(&sb), 2).checkpoint;
    assert_eq!(tensors_of(&sb, |g| g == ParamGroup::Encoder), tensors_of(&ftd, |g| g == ParamGroup::Encoder));
    assert_ne!(tensors_of(&sb, |g| g == ParamGroup::Decoder), tensors_of(&ftd, |g| g == ParamGroup::Decoder));

    let fr = run(Method::FR, &data, Some(&sb), 2).checkpoint;
    let pre = |g| g != ParamGroup::AuxiliaryNew;
    assert_eq!(tensors_of(&sb, pre), tensors_of(&fr, pre));
    assert!(fr.model.store.numel_in(ParamGroup::AuxiliaryNew) > 0);

    for (ckpt, frozen) in [(&fte, ParamGroup::Decoder), (&ftd, ParamGroup::Encoder)] {
        for (i, e) in ckpt.model.store.entries().iter().enumerate() {
            assert_eq!(e.trainable, e.group != frozen, "{}", e.name);
            if e.group == frozen {
                assert!(ckpt.optimizer.is_pristine(i), "{} has moments", e.name);
            }
        }
    }
    for (i, e) in fr.model.store.entries().iter().enumerate() {
        if e.group != ParamGroup::AuxiliaryNew {
            assert!(!e.trainable && fr.optimizer.is_pristine(i), "{}", e.name);
        }
    }

    let ft = run(Method::FT, &data, Some(&sb), 1).checkpoint;
    assert!(ft.model.store.entries().iter().all(|e| e.trainable));
}

#[test]
fn two_stage_methods_need_the_source_checkpoint() {
    let data = small_data(6, 20, 10);
    let spec = ExperimentSpec {
        method: Method::FTD,
        model: small_model(),
        train: train_cfg(1),
    };
    let err = run_experiment(&spec, &data, None).unwrap_err();
    assert!(matches!(err, Error::Config(_)) && err.to_string().contains("source"), "{err}");

    let sb = run(Method::SB, &data, None, 1).checkpoint;
    let other = ExperimentSpec {
        model: ModelConfig { dim: 12, ..small_model() },
        ..spec
    };
    assert!(matches!(run_experiment(&other, &data, Some(&sb)), Err(Error::Config(_))));
}

#[test]
fn experiments_are_deterministic() {
    let data = small_data(7, 20, 10);
    for method in [Method::TB, Method::MTL] {
        let a = run(method, &data, None, 1);
        let b = run(method, &data, None, 1);
        assert_eq!(a.source_report, b.source_report);
        assert_eq!(a.target_report, b.target_report);
        assert_eq!(a.checkpoint.encode(), b.checkpoint.encode());
        assert_eq!(a.stages[0].work, b.stages[0].work);
    }
}

#[test]
fn checkpoint_round_trip() {
    let data = small_data(8, 20, 10);
    let sb = run(Method::SB, &data, None, 1);
    let fr = run(Method::FR, &data, Some(&sb.checkpoint), 1);
    let dir = tempfile::tempdir().unwrap();
    for (name, ckpt) in [("sb.ckpt", &sb.checkpoint), ("fr.ckpt", &fr.checkpoint)] {
        let path = dir.path().join(name);
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.encode(), ckpt.encode());
        assert_eq!(back.optimizer, ckpt.optimizer);
        let loaded = load_predictor(&path).unwrap();
        let th = MatchThresholds::default();
        assert_eq!(
            evaluate(loaded.as_predictor(), &data.target_test, &th).unwrap(),
            evaluate(&ckpt.model, &data.target_test, &th).unwrap()
        );
    }
    let mut bytes = sb.checkpoint.encode();
    let n = bytes.len();
    bytes[n / 2] ^= 0xFF;
    assert!(Checkpoint::decode(&bytes).is_err());
}

#[test]
fn oracle_fixture_scores_perfectly() {
    let data = small_data(9, 10, 20);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("oracle.ckpt");
    save_oracle_fixture(&path, 6).unwrap();
    let p = load_predictor(&path).unwrap();
    assert!(p.config().is_none());
    let r = evaluate(p.as_predictor(), &data.target_test, &MatchThresholds::default()).unwrap();
    assert_eq!((r.map, r.min_ade, r.min_fde, r.miss_rate), (1.0, 0.0, 0.0, 0.0));
    assert!(Checkpoint::load(&path).is_err());
}
