use lpsnet::autograd::{sigmoid, Var};
use lpsnet::archspec::{initial_spec, NetworkSpec, Preset, ScalingRatio};
use lpsnet::costmodel::{count_flops, CostTracer};
use lpsnet::netcore::{
    checkpoint, interact_bilateral_b, BlockKind, BlockModule, InteractionKind, InteractionModule, NetError,
    NetworkInstance, Ops,
};
use lpsnet::tensor::{resize_bilinear, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Shape, rng: &mut impl Rng) -> Tensor<f32> {
    let data = (0..shape.numel()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::from_vec(shape, data)
}

fn two_path() -> NetworkSpec {
    NetworkSpec::from_compact("depths=1,1,1,1,1;widths=4,8,16,32,32;ratios=4/8,2/8,0").unwrap()
}

#[test]
fn preset_s_stage_five_extent() {
    let report = count_flops(
        &Preset::S.spec(),
        BlockKind::Conv3x3,
        InteractionKind::BilateralB,
        19,
        (1024, 2048),
    )
    .unwrap();
    let layer = report
        .per_layer
        .iter()
        .find(|l| l.layer_id == "path1/stage5/block10/conv")
        .unwrap();
    assert_eq!(layer.out_shape, (96, 768 / 16, 1536 / 16));
}

#[test]
fn single_path_rejects_interactions() {
    let n0 = initial_spec();
    assert!(NetworkInstance::<f32>::build(&n0, BlockKind::Conv3x3, InteractionKind::None, 2, 0).is_ok());
    let err = NetworkInstance::<f32>::build(&n0, BlockKind::Conv3x3, InteractionKind::BilateralB, 2, 0).unwrap_err();
    assert!(matches!(err, NetError::SinglePathInteraction(_)));
}

#[test]
fn same_seed_same_parameters() {
    let s = two_path();
    let a = NetworkInstance::<f32>::build(&s, BlockKind::Residual, InteractionKind::AttentionA, 3, 9).unwrap();
    let b = NetworkInstance::<f32>::build(&s, BlockKind::Residual, InteractionKind::AttentionA, 3, 9).unwrap();
    let c = NetworkInstance::<f32>::build(&s, BlockKind::Residual, InteractionKind::AttentionA, 3, 10).unwrap();
    assert_eq!(a.weights, b.weights);
    assert_ne!(a.weights, c.weights);
}

#[test]
fn minimum_input_shape_and_channel_check() {
    let net = NetworkInstance::<f32>::build(&initial_spec(), BlockKind::Conv3x3, InteractionKind::None, 2, 0).unwrap();
    let y = net.forward(&Tensor::full(Shape::new(1, 3, 64, 64), 0.3)).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 2, 64, 64));
    assert!(matches!(
        net.forward(&Tensor::full(Shape::new(1, 4, 64, 64), 0.3)),
        Err(NetError::InputChannels(4))
    ));
    assert!(matches!(
        net.forward(&Tensor::full(Shape::new(1, 3, 63, 64), 0.3)),
        Err(NetError::InputTooSmall { .. })
    ));
}

#[test]
fn path_inputs_snap_to_multiples_of_sixteen() {
    let spec = NetworkSpec::from_compact("depths=1,1,1,1,1;widths=4,8,16,32,32;ratios=5/8,0,0").unwrap();
    let net = NetworkInstance::<f32>::build(&spec, BlockKind::Conv3x3, InteractionKind::None, 2, 0).unwrap();
    assert_eq!(net.arch.path_inputs(720, 960), vec![(448, 608)]);
    assert_eq!(ScalingRatio::from_eighths(1).scaled_extent16(64), 16);
}

#[test]
fn every_block_kind_runs_inside_a_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(Shape::new(1, 3, 64, 96), &mut rng);
    for kind in BlockKind::ALL {
        let net = NetworkInstance::<f32>::build(&two_path(), kind, InteractionKind::BilateralB, 5, 1).unwrap();
        let y = net.forward(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 5, 64, 96), "{kind}");
        assert!(y.is_finite(), "{kind}");
    }
}

#[test]
fn forward_shape_law_random_specs_and_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..12 {
        let depths: Vec<String> = (0..5).map(|_| rng.random_range(1..=2).to_string()).collect();
        let widths = ["4,8,16,32,32", "8,16,16,32,64", "4,16,32,32,64"][rng.random_range(0..3)];
        let ratios = ["4/8,0,0", "6/8,2/8,0", "8/8,4/8,2/8", "3/8,3/8,1/8"][rng.random_range(0..4)];
        let spec = NetworkSpec::from_compact(&format!("depths={};widths={widths};ratios={ratios}", depths.join(",")))
            .unwrap();
        let kind = InteractionKind::ALL[rng.random_range(1..InteractionKind::ALL.len())];
        let kind = if spec.num_paths() < 2 { InteractionKind::None } else { kind };
        let classes = rng.random_range(2..6);
        let net = NetworkInstance::<f32>::build(&spec, BlockKind::Conv3x3, kind, classes, 0).unwrap();
        let (h, w) = (rng.random_range(64..112), rng.random_range(64..112));
        let y = net.forward(&random(Shape::new(1, 3, h, w), &mut rng)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, classes, h, w), "{spec} {kind}");
    }
}

#[test]
fn no_non_finite_values_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let nets: Vec<NetworkInstance> = [InteractionKind::BilateralB, InteractionKind::AttentionB, InteractionKind::DirectB]
        .into_iter()
        .map(|k| NetworkInstance::build(&two_path(), BlockKind::Conv3x3, k, 2, 4).unwrap())
        .collect();
    for trial in 0..1000 {
        let scale = 10f32.powi(rng.random_range(-3..4));
        let x = random(Shape::new(1, 3, 64, 64), &mut rng).map(|v| v * scale);
        let y = nets[trial % nets.len()].forward(&x).unwrap();
        assert!(y.is_finite(), "trial {trial}");
    }
}

#[test]
fn forward_is_deterministic() {
    let net = NetworkInstance::<f32>::build(&two_path(), BlockKind::GhostModule, InteractionKind::AttentionA, 3, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(Shape::new(2, 3, 64, 64), &mut rng);
    let a = net.forward(&x).unwrap();
    let b = net.forward(&x).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn bilateral_b_adds_no_parameters() {
    for spec in [two_path(), Preset::S.spec(), Preset::L.spec()] {
        let none = NetworkInstance::<f32>::build(&spec, BlockKind::Conv3x3, InteractionKind::None, 19, 0).unwrap();
        let bb = NetworkInstance::<f32>::build(&spec, BlockKind::Conv3x3, InteractionKind::BilateralB, 19, 0).unwrap();
        assert_eq!(none.num_params(), bb.num_params());
    }
}

#[test]
fn bilateral_b_constant_and_identity() {
    let xh = Tensor::full(Shape::new(1, 32, 64, 64), 1.25f32);
    let xl = Tensor::full(Shape::new(1, 32, 16, 16), -0.5f32);
    let (h, l) = interact_bilateral_b(&xh, &xl).unwrap();
    assert!(h.data().iter().all(|&v| v == 0.75));
    assert!(l.data().iter().all(|&v| v == 0.75));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xh = random(Shape::new(1, 8, 40, 24), &mut rng);
    let zero = Tensor::zeros(Shape::new(1, 8, 10, 12));
    let (h, l) = interact_bilateral_b(&xh, &zero).unwrap();
    assert_eq!(h, xh);
    assert_eq!(l, resize_bilinear(&xh, 10, 12));
}

#[test]
fn bilateral_b_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let c = rng.random_range(1..6);
        let (hh, hw) = (rng.random_range(4..24), rng.random_range(4..24));
        let (lh, lw) = (rng.random_range(1..=hh), rng.random_range(1..=hw));
        let xh = random(Shape::new(1, c, hh, hw), &mut rng);
        let xl = random(Shape::new(1, c, lh, lw), &mut rng);
        let alpha = rng.random_range(-3.0f32..3.0);
        let (h1, l1) = interact_bilateral_b(&xh.map(|v| v * alpha), &xl.map(|v| v * alpha)).unwrap();
        let (h0, l0) = interact_bilateral_b(&xh, &xl).unwrap();
        for (a, b) in h1.data().iter().zip(h0.data()).chain(l1.data().iter().zip(l0.data())) {
            assert!((a - alpha * b).abs() <= 1e-5 * (1.0 + b.abs() * alpha.abs()), "{a} vs {}", alpha * b);
        }
    }
}

#[test]
fn interactions_reject_mismatched_inputs() {
    let xh = Tensor::<f32>::zeros(Shape::new(1, 8, 16, 16));
    let xl = Tensor::<f32>::zeros(Shape::new(1, 4, 8, 8));
    assert!(matches!(interact_bilateral_b(&xh, &xl), Err(NetError::ChannelMismatch { .. })));
    let big = Tensor::<f32>::zeros(Shape::new(1, 8, 32, 32));
    assert!(matches!(interact_bilateral_b(&xh, &big), Err(NetError::SpatialOrder { .. })));
    assert!(InteractionModule::<f32>::new(InteractionKind::None, 8, 0).is_err());
}

#[test]
fn every_variant_preserves_branch_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for kind in &InteractionKind::ALL[1..] {
        for _ in 0..10 {
            let c = rng.random_range(1..9);
            let (hh, hw) = (rng.random_range(2..20), rng.random_range(2..20));
            let (lh, lw) = (rng.random_range(1..=hh), rng.random_range(1..=hw));
            let m = InteractionModule::<f32>::new(*kind, c, 1).unwrap();
            let xh = random(Shape::new(1, c, hh, hw), &mut rng);
            let xl = random(Shape::new(1, c, lh, lw), &mut rng);
            let (h, l) = m.forward(&xh, &xl).unwrap();
            assert_eq!((h.shape(), l.shape()), (xh.shape(), xl.shape()), "{kind}");
        }
    }
}

#[test]
fn variant_parameter_ordering() {
    let p = |k| InteractionModule::<f32>::new(k, 32, 0).unwrap().num_params();
    assert_eq!(p(InteractionKind::BilateralB), 0);
    assert!(p(InteractionKind::BilateralB) < p(InteractionKind::BilateralA));
    assert!(p(InteractionKind::BilateralA) < p(InteractionKind::DirectA));
    assert!(p(InteractionKind::DirectA) <= p(InteractionKind::AttentionA));
}

#[test]
fn direct_a_with_zero_low_input_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = InteractionModule::<f32>::new(InteractionKind::DirectA, 6, 0).unwrap();
    let xh = random(Shape::new(1, 6, 16, 16), &mut rng);
    let (h, _) = m.forward(&xh, &Tensor::zeros(Shape::new(1, 6, 8, 8))).unwrap();
    assert_eq!(h, xh);
}

#[test]
fn attention_a_gate_range_and_saturation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let c = 4;
    let mut m = InteractionModule::<f32>::new(InteractionKind::AttentionA, c, 3).unwrap();
    let xh = random(Shape::new(1, c, 16, 16), &mut rng);
    let xl = random(Shape::new(1, c, 8, 8), &mut rng);

    let gate = sigmoid(&Var::constant(Tensor::from_vec(
        Shape::new(1, 1, 1, 61),
        (-30..=30).map(f64::from).collect(),
    )));
    assert!(gate.value().data().iter().all(|&g| g > 0.0 && g < 1.0));

    m.set_param("interact/attention_low/conv/weight", Tensor::zeros(Shape::new(1, c, 1, 1)))
        .unwrap();
    m.set_param("interact/attention_low/conv/bias", Tensor::full(Shape::new(1, 1, 1, 1), 100.0))
        .unwrap();
    let (h, l) = m.forward(&xh, &xl).unwrap();
    assert_eq!(h, resize_bilinear(&l, 16, 16));
}

#[test]
fn standalone_blocks_keep_shape() {
    let x = Tensor::full(Shape::new(1, 16, 20, 24), 0.1f32);
    for kind in BlockKind::ALL {
        let b = BlockModule::<f32>::new(kind, 16, 0).unwrap();
        assert_eq!(b.forward(&x).unwrap().shape(), x.shape(), "{kind}");
        let mut tracer = CostTracer::default();
        assert_eq!(b.run(&mut tracer, &x.shape()), x.shape());
        assert_eq!(
            tracer.layers.iter().map(|l| l.params).sum::<u64>(),
            b.num_params() as u64,
            "{kind}"
        );
    }
    assert!(BlockModule::<f32>::new(BlockKind::Conv3x3, 0, 0).is_err());
}

#[test]
fn aggregate_and_head_shapes() {
    let spec = NetworkSpec::from_compact("depths=1,1,1,1,1;widths=4,8,16,32,96;ratios=8/8,2/8,0").unwrap();
    let net = NetworkInstance::<f32>::build(&spec, BlockKind::Conv3x3, InteractionKind::BilateralB, 7, 0).unwrap();
    let mut tracer = CostTracer::default();
    let out = net.arch.aggregate_and_head(
        &mut tracer,
        &[Shape::new(1, 96, 64, 128), Shape::new(1, 96, 16, 32)],
    );
    assert_eq!(out, Shape::new(1, 7, 64, 128));
    let concat = tracer.layers.iter().find(|l| l.layer_id == "aggregate/concat").unwrap();
    assert_eq!(concat.out_shape, (192, 64, 128));
    assert_eq!(tracer.shape_of(&out).c, 7);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let mut net = NetworkInstance::<f32>::build(&two_path(), BlockKind::ShuffleUnit, InteractionKind::BilateralA, 3, 12)
        .unwrap();
    net.weights.buffers[0].data_mut()[0] = 0.375;
    checkpoint::save(&net, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back, net);

    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(checkpoint::load(&path).is_err());
}
