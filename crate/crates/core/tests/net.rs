use ostr::dirmaps::all_directional_maps;
use ostr::error::Error;
use ostr::net::*;
use ostr::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_images<T: Scalar>(n: usize, s: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * 3 * s * s).map(|_| T::from_f64(rng.gen())).collect();
    Tensor::from_vec(&[n, 3, s, s], data).unwrap()
}

fn randomize<T: Scalar>(params: &mut ParamStore<T>, name: &str, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in params.get_mut(name).unwrap().value.data_mut() {
        *v = T::from_f64(rng.gen_range(-0.5..0.5));
    }
}

#[test]
fn tiny_shapes_through_every_stage() {
    let c = NetConfig::tiny();
    let p: ParamStore<f32> = init_params(&c, 0).unwrap();
    let q = random_images::<f32>(2, 64, 1);
    let r = random_images::<f32>(2, 64, 2);
    let pyr = backbone_forward(&q, &p, &c, Mode::Train).unwrap();
    let shapes: Vec<_> = pyr.stages.iter().map(|t| t.shape().to_vec()).collect();
    assert_eq!(shapes, vec![vec![2, 16, 32, 32], vec![2, 32, 16, 16], vec![2, 64, 8, 8]]);

    let (m, _) = encode(&q, &p, &c, Mode::Train).unwrap();
    assert_eq!(m.shape(), &[2, 64, 8, 8]);
    let (s, g) = relation_forward(&m, &m, &p, &c, Mode::Train).unwrap();
    assert_eq!(s.shape(), &[2, 32, 8, 8]);
    assert_eq!(g.shape(), &[2, 32]);

    let state = model_forward(&q, &r, &p, &c, Mode::Train).unwrap();
    assert_eq!(state.output().shape(), &[2, 1, 64, 64]);
    let decoder_stages = p.names().iter().filter(|n| n.starts_with("decoder.stage") && n.ends_with(".weight")).count();
    assert_eq!(decoder_stages, 3);
}

/// Two-by-two features, one-channel branches that copy only the map channel,
/// and an identity join: output channel `i` is map `i` scaled by the two
/// inference batch-norms.
#[test]
fn dirconv_copies_hand_computed_maps() {
    let c = NetConfig {
        input_size: 4,
        backbone_stride: 2,
        backbone_channels: 8,
        dir_branch_channels: 1,
        metric_channels: 4,
        gate_reduction: 2,
        use_dirconv: true,
        use_gating: true,
        linear: false,
    };
    let mut p: ParamStore<f64> = init_params(&c, 0).unwrap();
    let maps = all_directional_maps(2, 2).unwrap();
    for m in maps.iter() {
        let w = &mut p.get_mut(&format!("encoder.dir.{}.weight", m.direction.name())).unwrap().value;
        w.fill(0.0);
        // (out 0, in 8, centre tap)
        w.data_mut()[8 * 9 + 4] = 1.0;
    }
    let join = &mut p.get_mut("encoder.join.weight").unwrap().value;
    join.fill(0.0);
    for i in 0..8 {
        join.data_mut()[(i * 8 + i) * 9 + 4] = 1.0;
    }
    let features = {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Tensor::from_vec(&[1, 8, 2, 2], (0..32).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
    };
    let out = dirconv_forward(&features, &maps, &p, &c, Mode::Infer).unwrap();
    let expected: [[f64; 4]; 8] = [
        [1.0, 0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0, 1.0],
        [1.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 1.0],
        [1.0, 0.5, 0.5, 0.0],
        [0.0, 0.5, 0.5, 1.0],
        [0.5, 1.0, 0.0, 0.5],
        [0.5, 0.0, 1.0, 0.5],
    ];
    let scale = 1.0 / (1.0 + BN_EPS);
    for (i, row) in expected.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            let got = out.data()[i * 4 + k];
            assert!((got - v * scale).abs() < 1e-12, "channel {i} pixel {k}: {got}");
        }
    }
}

#[test]
fn both_branches_share_one_encoder() {
    let c = NetConfig::tiny().with_input_size(32);
    let mut p: ParamStore<f64> = init_params(&c, 3).unwrap();
    randomize(&mut p, "decoder.head.weight", 1);
    let img = random_images::<f64>(1, 32, 4);
    let other = random_images::<f64>(1, 32, 9);
    let state = model_forward(&img, &img, &p, &c, Mode::Infer).unwrap();
    assert_eq!(state.reference_embedding(), state.query_embedding());

    // One encoder tensor moves both embeddings.
    let before = model_forward(&img, &other, &p, &c, Mode::Infer).unwrap();
    p.get_mut("encoder.stage0.down.weight").unwrap().value.data_mut()[0] += 0.3;
    let after = model_forward(&img, &other, &p, &c, Mode::Infer).unwrap();
    assert!(before.reference_embedding().max_abs_diff(after.reference_embedding()).unwrap() > 0.0);
    assert!(before.query_embedding().max_abs_diff(after.query_embedding()).unwrap() > 0.0);
    assert!(!p.names().iter().any(|n| n.contains("reference") || n.contains("query")));
}

#[test]
fn untrained_gate_is_one_half() {
    let c = NetConfig::tiny().with_input_size(32);
    let p: ParamStore<f64> = init_params(&c, 0).unwrap();
    let state = model_forward(&random_images(2, 32, 1), &random_images(2, 32, 2), &p, &c, Mode::Train).unwrap();
    assert!(state.gamma().data().iter().all(|&g| g == 0.5));
    let (l, s) = (state.local_relation(), state.scores());
    for (a, b) in l.data().iter().zip(s.data()) {
        assert_eq!(*b, 0.5 * a);
    }
    assert!(state.output().data().iter().all(|&a| a == 0.5));
}

#[test]
fn gate_stays_strictly_inside_unit_interval() {
    let c = NetConfig::tiny().with_input_size(32);
    for seed in 0..4 {
        let mut p: ParamStore<f64> = init_params(&c, seed).unwrap();
        randomize(&mut p, "metric.gate2.weight", seed);
        randomize(&mut p, "metric.gate2.bias", seed + 10);
        let state = model_forward(&random_images(2, 32, seed), &random_images(2, 32, seed + 1), &p, &c, Mode::Train).unwrap();
        let g = state.gamma();
        assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(g.data().iter().any(|&v| v != 0.5));
    }
}

#[test]
fn without_gating_scores_are_the_local_relation() {
    let c = NetConfig::tiny().with_input_size(32).with_ablation(true, false);
    let p: ParamStore<f32> = init_params(&c, 2).unwrap();
    let state = model_forward(&random_images(2, 32, 1), &random_images(2, 32, 2), &p, &c, Mode::Train).unwrap();
    assert_eq!(state.scores(), state.local_relation());
    assert!(state.gamma().data().iter().all(|&g| g == 1.0));
    assert!(!p.contains("metric.gate1.weight"));
}

#[test]
fn swapping_query_and_reference_changes_the_output() {
    let c = NetConfig::tiny().with_input_size(32);
    let mut p: ParamStore<f64> = init_params(&c, 0).unwrap();
    randomize(&mut p, "decoder.head.weight", 7);
    let (a, b) = (random_images::<f64>(1, 32, 1), random_images::<f64>(1, 32, 2));
    let ab = model_forward(&a, &b, &p, &c, Mode::Infer).unwrap();
    let ba = model_forward(&b, &a, &p, &c, Mode::Infer).unwrap();
    assert!(ab.output().max_abs_diff(ba.output()).unwrap() > 1e-6);
}

#[test]
fn gradients_are_linear_in_the_seed() {
    let c = NetConfig::tiny().with_input_size(16);
    let mut base: ParamStore<f64> = init_params(&c, 1).unwrap();
    randomize(&mut base, "decoder.head.weight", 2);
    randomize(&mut base, "metric.gate2.weight", 3);
    let (q, r) = (random_images::<f64>(2, 16, 4), random_images::<f64>(2, 16, 5));
    let state = model_forward(&q, &r, &base, &c, Mode::Train).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seed = Tensor::from_vec(&[2, 1, 16, 16], (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let mut double = seed.clone();
    double.scale(2.0);

    let (mut p1, mut p2, mut p0) = (base.clone(), base.clone(), base.clone());
    model_backward(&seed, &state, &mut p1).unwrap();
    model_backward(&double, &state, &mut p2).unwrap();
    model_backward(&Tensor::zeros(&[2, 1, 16, 16]), &state, &mut p0).unwrap();
    let mut nonzero = false;
    for ((_, a), ((_, b), (_, z))) in p1.iter().zip(p2.iter().zip(p0.iter())) {
        for ((&x, &y), &o) in a.grad.data().iter().zip(b.grad.data()).zip(z.grad.data()) {
            assert!((y - 2.0 * x).abs() <= 1e-12 * x.abs().max(1e-300));
            assert_eq!(o, 0.0);
            nonzero |= x != 0.0;
        }
    }
    assert!(nonzero);
}

#[test]
fn backward_before_forward_is_an_error() {
    let mut m: Model<f32> = Model::new(NetConfig::tiny().with_input_size(16), 0).unwrap();
    let seed = Tensor::zeros(&[1, 1, 16, 16]);
    assert!(matches!(m.backward(&seed), Err(Error::State(_))));
    m.forward(&random_images(1, 16, 0), &random_images(1, 16, 1), Mode::Train).unwrap();
    m.backward(&seed).unwrap();
    m.clear_state();
    assert!(matches!(m.backward(&seed), Err(Error::State(_))));
}

#[test]
fn blank_images_give_finite_probabilities() {
    let c = NetConfig::tiny();
    let mut p: ParamStore<f32> = init_params(&c, 0).unwrap();
    randomize(&mut p, "decoder.head.weight", 1);
    randomize(&mut p, "metric.gate2.weight", 2);
    let zeros = Tensor::zeros(&[2, 3, 64, 64]);
    for mode in [Mode::Train, Mode::Infer] {
        let state = model_forward(&zeros, &zeros, &p, &c, mode).unwrap();
        assert!(state.output().data().iter().all(|&a| a.is_finite() && a > 0.0 && a < 1.0));
    }
    let state = model_forward(&random_images(2, 64, 3), &zeros, &p, &c, Mode::Infer).unwrap();
    assert!(state.output().data().iter().all(|&a| a > 0.0 && a < 1.0));
}

#[test]
fn forward_is_deterministic() {
    let c = NetConfig::tiny();
    let mut p: ParamStore<f32> = init_params(&c, 8).unwrap();
    randomize(&mut p, "decoder.head.weight", 1);
    let (q, r) = (random_images::<f32>(3, 64, 1), random_images::<f32>(3, 64, 2));
    let a = model_forward(&q, &r, &p, &c, Mode::Train).unwrap();
    let b = model_forward(&q, &r, &p, &c, Mode::Train).unwrap();
    assert_eq!(a.output(), b.output());
}

#[test]
fn bad_inputs_are_rejected() {
    let c = NetConfig::tiny();
    let p: ParamStore<f32> = init_params(&c, 0).unwrap();
    let good = random_images::<f32>(1, 64, 0);
    let small = random_images::<f32>(1, 32, 0);
    assert!(matches!(model_forward(&small, &good, &p, &c, Mode::Train), Err(Error::Shape(_))));
    let mut bright = good.clone();
    bright.data_mut()[0] = 1.5;
    assert!(matches!(model_forward(&good, &bright, &p, &c, Mode::Train), Err(Error::InvalidArgument(_))));
    let other: ParamStore<f32> = init_params(&NetConfig::tiny().with_ablation(false, true), 0).unwrap();
    assert!(model_forward(&good, &good, &other, &c, Mode::Train).is_err());
}
