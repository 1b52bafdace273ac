use mtlb_core::graph::Graph;
use mtlb_core::kmeans::{inertia, kmeans};
use mtlb_core::model::decoder::{softmax, GAUSS_PARAMS};
use mtlb_core::model::encoder::{PolylineEncoder, SceneTokens};
use mtlb_core::model::{
    dynamic_map_collect, fit_intentions, gmm_head, mixture_density, select_modes, Encoder, EncoderLayer, ModePrediction,
    ModelConfig, MotionTransformer, PredictionSet,
};
use mtlb_core::nn::{mhsa, AttentionSpec, MultiHeadAttention};
use mtlb_core::params::{ParamGroup, ParameterStore};
use mtlb_core::scene::{generate_synthetic, to_ego_frame, vectorize, GeneratorConfig, Preset, SceneSample};
use mtlb_core::train::training_loss;
use mtlb_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        dim: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 2,
        modes: 2,
        output_modes: 2,
        future: 5,
        neighbors: 4,
        map_collect: 3,
        max_agents: 3,
        max_map: 4,
        map_points: 5,
        ..ModelConfig::default()
    }
}

fn sample_for(cfg: &ModelConfig, seed: u64) -> SceneSample {
    let s = generate_synthetic(&GeneratorConfig {
        seed,
        preset: Preset::SourceLike,
        count: 1,
        ..GeneratorConfig::default()
    })
    .unwrap()
    .remove(0);
    vectorize(&to_ego_frame(&s).unwrap(), &cfg.vectorize()).unwrap()
}

fn random_intentions(k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(&[k, 2], (0..2 * k).map(|_| rng.gen_range(-20.0..40.0)).collect()).unwrap()
}

fn loss_of(model: &MotionTransformer, sample: &SceneSample) -> f64 {
    let mut g = Graph::new();
    let out = model.forward(&mut g, sample).unwrap();
    let (loss, _) = training_loss(&mut g, &out, sample, &model.intentions).unwrap();
    g.value(loss).data()[0]
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let sample = sample_for(&cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = MotionTransformer::new(cfg, random_intentions(2, &mut rng), 17).unwrap();

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

    let h = 1e-5;
    let mut worst = (0.0, String::new());
    for i in 0..model.store.len() {
        for j in 0..model.store.entries()[i].value.numel() {
            let orig = model.store.entries()[i].value.data()[j];
            model.store.entries_mut()[i].value.data_mut()[j] = orig + h;
            let up = loss_of(&model, &sample);
            model.store.entries_mut()[i].value.data_mut()[j] = orig - h;
            let down = loss_of(&model, &sample);
            model.store.entries_mut()[i].value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i][j];
            // below |g| = 1e-3 this bounds the absolute error by 1e-7, a few
            // round-off quanta of (up - down) / 2h at an untrained loss in the hundreds
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if rel > worst.0 {
                worst = (rel, format!("{}[{j}] analytic {a} numeric {numeric}", model.store.entries()[i].name));
            }
        }
    }
    assert!(worst.0 < 1e-4, "worst relative error {} at {}", worst.0, worst.1);
}

#[test]
fn attention_single_token_and_identical_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParameterStore::new();
    let spec = AttentionSpec::new(4, 1).unwrap();
    let block = MultiHeadAttention::register(&mut store, "a", spec, ParamGroup::Encoder, &mut rng).unwrap();

    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap()).unwrap();
    let (_, att) = block.forward_with_weights(&mut g, &store, x, x, x, None).unwrap();
    assert_eq!(g.attention_probs(att).unwrap(), &[1.0]);

    let mut g = Graph::new();
    let q = g.input(Tensor::new(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let kv = g.input(Tensor::new(&[2, 4], vec![0.5, -0.5, 1.0, 2.0, 0.5, -0.5, 1.0, 2.0]).unwrap()).unwrap();
    let (_, att) = block.forward_with_weights(&mut g, &store, q, kv, kv, None).unwrap();
    assert_eq!(g.attention_probs(att).unwrap(), &[0.5, 0.5]);
}

fn linear(store: &ParameterStore, name: &str, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = store.value(store.id(&format!("{name}.w")).unwrap());
    let b = store.value(store.id(&format!("{name}.b")).unwrap());
    let (fi, fo) = w.dims2().unwrap();
    x.iter()
        .map(|row| {
            (0..fo)
                .map(|o| b.data()[o] + (0..fi).map(|i| row[i] * w.at2(i, o)).sum::<f64>())
                .collect()
        })
        .collect()
}

#[test]
fn self_attention_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParameterStore::new();
    let spec = AttentionSpec::new(6, 1).unwrap();
    let block = MultiHeadAttention::register(&mut store, "a", spec, ParamGroup::Encoder, &mut rng).unwrap();
    let x: Vec<Vec<f64>> = (0..3).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();

    let mut g = Graph::new();
    let xv = g.input(Tensor::from_rows(&x).unwrap()).unwrap();
    let out = mhsa(&mut g, &store, &block, xv, xv, xv, None).unwrap();

    let (q, k, v) = (linear(&store, "a.q", &x), linear(&store, "a.k", &x), linear(&store, "a.v", &x));
    let mut mixed = Vec::new();
    for qi in &q {
        let logits: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / 6f64.sqrt()).collect();
        let w = softmax(&logits);
        mixed.push((0..6).map(|c| (0..3).map(|j| w[j] * v[j][c]).sum()).collect::<Vec<f64>>());
    }
    let want = Tensor::from_rows(&linear(&store, "a.o", &mixed)).unwrap();
    assert!(g.value(out).max_abs_diff(&want) < 1e-12);
}

fn random_tokens(g: &mut Graph, rng: &mut ChaCha8Rng, n: usize, dim: usize) -> SceneTokens {
    let features = g
        .input(Tensor::new(&[n, dim], (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
        .unwrap();
    SceneTokens {
        features,
        positions: (0..n).map(|_| [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)]).collect(),
        n_agents: 1 + n / 3,
    }
}

#[test]
fn full_neighborhood_equals_dense_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..50 {
        let dim = 8;
        let n = rng.gen_range(1..12);
        let mut store = ParameterStore::new();
        let spec = AttentionSpec::new(dim, 2).unwrap();
        let layers: Vec<EncoderLayer> = (0..2)
            .map(|i| EncoderLayer::register(&mut store, &format!("l{i}"), spec, ParamGroup::Encoder, &mut rng).unwrap())
            .collect();
        let mut g = Graph::new();
        let tokens = random_tokens(&mut g, &mut rng, n, dim);
        let local = Encoder::local_self_attention(&mut g, &store, &layers, &tokens, n, dim).unwrap();

        let pos = g
            .constant(Tensor::new(&[n, 2], tokens.positions.iter().flatten().copied().collect()).unwrap())
            .unwrap();
        let pe = g.sinusoidal_pe(pos, dim).unwrap();
        let mut x = tokens.features;
        for l in &layers {
            x = l.forward(&mut g, &store, x, pe, None).unwrap();
        }
        let diff = g.value(local.features).max_abs_diff(g.value(x));
        assert!(diff < 1e-12, "case {case}: {diff}");
    }
}

#[test]
fn polyline_pooling_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParameterStore::new();
    let enc = PolylineEncoder::register(&mut store, "p", 3, 8, vec![1.0; 3], ParamGroup::Encoder, &mut rng).unwrap();
    let pts: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();

    let pooled = |order: &[usize], mask: &[bool]| {
        let mut g = Graph::new();
        let data: Vec<f64> = order.iter().flat_map(|&i| pts[i * 3..i * 3 + 3].to_vec()).collect();
        let x = g.constant(Tensor::new(&[4, 3], data).unwrap()).unwrap();
        let out = enc.pool(&mut g, &store, x, 1, 4, mask).unwrap();
        g.value(out).clone()
    };
    let base = pooled(&[0, 1, 2, 3], &[true; 4]);
    assert_eq!(base, pooled(&[2, 0, 3, 1], &[true; 4]));

    let one = pooled(&[0, 1, 2, 3], &[false, false, true, false]);
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 3], pts[6..9].to_vec()).unwrap()).unwrap();
    let single = enc.pool(&mut g, &store, x, 1, 1, &[true]).unwrap();
    assert_eq!(&one, g.value(single));
}

#[test]
fn dense_future_keeps_map_tokens_and_trains_its_head() {
    let cfg = tiny_config();
    let sample = sample_for(&cfg, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut model = MotionTransformer::new(cfg.clone(), random_intentions(2, &mut rng), 1).unwrap();
    let mut g = Graph::new();
    let tokens = model
        .encoder()
        .encode_polylines(&mut g, &model.store, &sample.agents, &sample.map, &sample.agent_pos, &sample.map_pos)
        .unwrap();
    let enc = model.encoder().dense_future_predict(&mut g, &model.store, &tokens).unwrap();
    let na = tokens.n_agents;
    let before = g.value(tokens.features).data()[na * cfg.dim..].to_vec();
    let after = g.value(enc.tokens.features).data()[na * cfg.dim..].to_vec();
    assert_eq!(before, after);

    let out = model.forward(&mut g, &sample).unwrap();
    let (loss, _) = training_loss(&mut g, &out, &sample, &model.intentions).unwrap();
    let grads = g.backward(loss).unwrap();
    g.accumulate_param_grads(&grads, &mut model.store).unwrap();
    let id = model.store.id("enc.dense.l1.w");
    let entry = match id {
        Ok(id) => model.store.entry(id),
        Err(_) => model.store.entries().iter().find(|e| e.name.starts_with("enc.dense")).unwrap(),
    };
    assert!(entry.grad.as_ref().unwrap().iter().any(|v| *v != 0.0), "{}", entry.name);
}

#[test]
fn intention_fitting_recovers_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let means = [[0.0, 0.0], [30.0, 5.0], [10.0, -25.0]];
    let mut pts = Vec::new();
    for m in means {
        for _ in 0..200 {
            pts.push(m[0] + rng.gen_range(-0.5..0.5));
            pts.push(m[1] + rng.gen_range(-0.5..0.5));
        }
    }
    let centers = fit_intentions(&Tensor::new(&[600, 2], pts.clone()).unwrap(), 3, 1).unwrap();
    for m in means {
        let best = (0..3)
            .map(|i| (centers.at2(i, 0) - m[0]).hypot(centers.at2(i, 1) - m[1]))
            .fold(f64::INFINITY, f64::min);
        assert!(best < 0.1, "{m:?} nearest center {best}");
    }
    let single = fit_intentions(&Tensor::new(&[600, 2], pts.clone()).unwrap(), 1, 1).unwrap();
    let mean_x = pts.iter().step_by(2).sum::<f64>() / 600.0;
    assert!((single.at2(0, 0) - mean_x).abs() < 1e-9);
}

#[test]
fn kmeans_beats_random_center_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pts = Tensor::new(&[20, 2], (0..40).map(|_| rng.gen_range(-10.0..10.0)).collect()).unwrap();
    let fitted = inertia(&pts, &kmeans(&pts, 3, 42, 100).unwrap()).unwrap();
    for _ in 0..100 {
        let c = Tensor::new(&[3, 2], (0..6).map(|_| rng.gen_range(-10.0..10.0)).collect()).unwrap();
        assert!(fitted <= inertia(&pts, &c).unwrap() + 1e-12);
    }
}

#[test]
fn static_queries_are_rowwise() {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = MotionTransformer::new(ModelConfig { modes: 3, ..cfg }, random_intentions(3, &mut rng), 2).unwrap();
    let run = |it: Tensor| {
        let mut g = Graph::new();
        let v = g.constant(it).unwrap();
        let q = model.decoder().static_intention_query(&mut g, &model.store, v).unwrap();
        g.value(q).clone()
    };
    let same = run(Tensor::from_rows(&[vec![4.0, 1.0], vec![4.0, 1.0], vec![-3.0, 9.0]]).unwrap());
    assert_eq!(same.row(0), same.row(1));
    let moved = run(Tensor::from_rows(&[vec![4.0, 1.0], vec![4.0, 1.0], vec![-2.0, 9.0]]).unwrap());
    assert_eq!(same.row(0), moved.row(0));
    assert_eq!(same.row(1), moved.row(1));
    assert_ne!(same.row(2), moved.row(2));
}

#[test]
fn map_collection_matches_exhaustive_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let map: Vec<[f64; 2]> = (0..15).map(|_| [rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0)]).collect();
        let ends: Vec<[f64; 2]> = (0..4).map(|_| [rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0)]).collect();
        let got = dynamic_map_collect(&ends, &map, 5);
        for (e, sel) in ends.iter().zip(&got) {
            let mut d: Vec<(f64, usize)> =
                map.iter().enumerate().map(|(i, p)| ((p[0] - e[0]).powi(2) + (p[1] - e[1]).powi(2), i)).collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(sel, &d[..5].iter().map(|x| x.1).collect::<Vec<_>>());
        }
    }
    assert_eq!(dynamic_map_collect(&[[3.0, 3.0]], &map_line(), 1), vec![vec![3]]);
    assert_eq!(dynamic_map_collect(&[[0.0, 0.0]], &map_line(), 6)[0].len(), 6);
}

fn map_line() -> Vec<[f64; 2]> {
    (0..6).map(|i| [i as f64, i as f64]).collect()
}

fn random_head(rng: &mut ChaCha8Rng, k: usize, t: usize) -> Tensor {
    let mut data = Vec::with_capacity(k * (t * GAUSS_PARAMS + 1));
    for _ in 0..k {
        for _ in 0..t {
            data.push(rng.gen_range(-0.5..0.5));
            data.push(rng.gen_range(-0.5..0.5));
            data.push(rng.gen_range(-0.3..1.0));
            data.push(rng.gen_range(-0.3..1.0));
            data.push(rng.gen_range(-1.0..1.0));
        }
        data.push(rng.gen_range(-4.0..4.0));
    }
    Tensor::new(&[k, t * GAUSS_PARAMS + 1], data).unwrap()
}

#[test]
fn mixture_is_a_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let p = gmm_head(&random_head(&mut rng, 4, 10), 10).unwrap();
        p.validate().unwrap();
        assert!((p.modes.iter().map(|m| m.confidence).sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let p = gmm_head(&random_head(&mut rng, 3, 10), 10).unwrap();
    let step = 0.1;
    let mut total = 0.0;
    for i in 0..1000 {
        for j in 0..1000 {
            let o = [-50.0 + (i as f64 + 0.5) * step, -50.0 + (j as f64 + 0.5) * step];
            total += mixture_density(&p, 9, o).unwrap() * step * step;
        }
    }
    assert!((total - 1.0).abs() < 1e-3, "integral {total}");
}

#[test]
fn mirrored_modes_give_symmetric_density() {
    let mode = |mu: [f64; 2]| ModePrediction {
        traj: vec![mu],
        sigma: vec![[1.3, 0.7]],
        rho: vec![0.2],
        confidence: 0.5,
    };
    let p = PredictionSet {
        modes: vec![mode([2.0, -1.0]), mode([-2.0, 1.0])],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let o = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
        let a = mixture_density(&p, 0, o).unwrap();
        let b = mixture_density(&p, 0, [-o[0], -o[1]]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}

/// Greedy NMS written out directly.
fn oracle_nms(p: &PredictionSet, target: usize, radius: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.modes.len()).collect();
    order.sort_by(|&a, &b| p.modes[b].confidence.partial_cmp(&p.modes[a].confidence).unwrap().then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    let mut dropped = Vec::new();
    for i in order {
        let e = p.modes[i].traj.last().unwrap();
        let near = keep.iter().any(|&j| {
            let f = p.modes[j].traj.last().unwrap();
            ((e[0] - f[0]).powi(2) + (e[1] - f[1]).powi(2)).sqrt() < radius
        });
        if keep.len() < target {
            if near {
                dropped.push(i)
            } else {
                keep.push(i)
            }
        }
    }
    for i in dropped {
        if keep.len() < target {
            keep.push(i);
        }
    }
    keep
}

#[test]
fn mode_selection_matches_greedy_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let raw = gmm_head(&random_head(&mut rng, 10, 4), 4).unwrap();
        let sel = select_modes(&raw, 6, 2.0);
        let want = oracle_nms(&raw, 6, 2.0);
        let got: Vec<usize> = sel
            .modes
            .iter()
            .map(|m| raw.modes.iter().position(|r| r.traj == m.traj).unwrap())
            .collect();
        assert_eq!(got, want);
        assert!((sel.modes.iter().map(|m| m.confidence).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
