use mtlb_core::scene::pchip::pchip_resample;
use mtlb_core::scene::{
    generate_synthetic, to_ego_frame, vectorize, AgentType, EgoTransform, GeneratorConfig, Preset, VectorizeConfig,
};
use proptest::prelude::*;

fn generated(preset: Preset, count: usize, seed: u64) -> Vec<mtlb_core::scene::Scenario> {
    generate_synthetic(&GeneratorConfig {
        seed,
        preset,
        count,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

#[test]
fn source_type_mix_close_to_nominal() {
    let mut counts = [0usize; 3];
    let mut total = 0;
    let mut seed = 0;
    while total < 1000 {
        for s in generated(Preset::SourceLike, 50, seed) {
            for a in &s.agents {
                counts[a.kind.code() as usize - 1] += 1;
                total += 1;
            }
        }
        seed += 1;
    }
    let freq: Vec<f64> = counts.iter().map(|c| *c as f64 / total as f64).collect();
    for (f, want) in freq.iter().zip([0.70, 0.07, 0.23]) {
        assert!((f - want).abs() < 0.03, "frequencies {freq:?}");
    }
}

#[test]
fn every_generated_scenario_vectorizes() {
    let cfg = VectorizeConfig::default();
    for preset in [Preset::SourceLike, Preset::TargetLike] {
        for s in generated(preset, 60, 11) {
            let e = to_ego_frame(&s).unwrap();
            let v = vectorize(&e, &cfg).unwrap();
            assert!(v.map.len() > 0);
            assert_eq!(v.agents.data.shape()[1], 11);
            assert!(v.agents.mask_row(0).iter().all(|m| *m));
            if preset == Preset::TargetLike {
                assert!(e.agents.iter().all(|a| a.kind == AgentType::Vehicle));
            }
        }
    }
}

#[test]
fn ego_round_trip_is_tight() {
    for s in generated(Preset::SourceLike, 10, 3) {
        let tf = EgoTransform::from_focal(&s).unwrap();
        let ego = tf.apply(&s);
        let back = tf.apply(&tf.to_world(&ego));
        for (a, b) in ego.agents.iter().zip(&back.agents) {
            for (x, y) in a.states.iter().zip(&b.states) {
                for k in 0..3 {
                    assert!((x.center[k] - y.center[k]).abs() < 1e-9);
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn pchip_monotone_and_bounded(steps in prop::collection::vec((0.01f64..2.0, 0.0f64..3.0), 2..12)) {
        let mut t = vec![0.0];
        let mut y = vec![0.0];
        for (dt, dy) in &steps {
            t.push(t.last().unwrap() + dt);
            y.push(y.last().unwrap() + dy);
        }
        let last = *t.last().unwrap();
        let q: Vec<f64> = (0..=1000).map(|i| (last * i as f64 / 1000.0).min(last)).collect();
        let out = pchip_resample(&t, &y, &q).unwrap();
        for w in out.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12);
        }
        // within the bracketing knots
        for (qi, v) in q.iter().zip(&out) {
            let k = t.partition_point(|x| x <= qi).clamp(1, t.len() - 1);
            prop_assert!(*v >= y[k - 1] - 1e-12 && *v <= y[k] + 1e-12);
        }
        prop_assert_eq!(pchip_resample(&t, &y, &t).unwrap(), y);
    }

    #[test]
    fn ego_frame_preserves_distances(seed in 0u64..40) {
        let s = &generated(Preset::SourceLike, 1, seed)[0];
        let e = to_ego_frame(s).unwrap();
        let cur = s.current_index;
        let pts = |sc: &mtlb_core::scene::Scenario| -> Vec<[f64; 3]> {
            sc.agents.iter().filter(|a| a.states[cur].valid).map(|a| a.states[cur].center).collect()
        };
        let (p, q) = (pts(s), pts(&e));
        for i in 0..p.len() {
            for j in 0..p.len() {
                let d = |v: &Vec<[f64; 3]>| ((v[i][0] - v[j][0]).powi(2) + (v[i][1] - v[j][1]).powi(2)).sqrt();
                prop_assert!((d(&p) - d(&q)).abs() < 1e-9);
            }
        }
    }
}
