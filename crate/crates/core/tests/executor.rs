use mobiface::executor;
use mobiface::graph::{Architecture, LayerKind, NetworkBuilder, BlockSpec, MOBIFACE, MOBIFACE_INPUT};
use mobiface::tensor::Tensor;
use mobiface::weights::init_random;
use mobiface::{build_mobiface, Error, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64, n: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = MOBIFACE_INPUT;
    Tensor::from_fn(&[n, c, h, w], |_| rng.random_range(-1.0f32..1.0)).unwrap()
}

#[test]
fn zero_kernels_yield_fc_bias() {
    let net = build_mobiface();
    let mut weights = init_random(&net.weight_bindings(), 3).unwrap();
    let names: Vec<String> = weights.iter().map(|(n, _)| n.to_string()).filter(|n| n.ends_with(".weight")).collect();
    for n in names {
        let shape = weights.get(&n).unwrap().shape().to_vec();
        weights.replace(&n, Tensor::zeros(&shape).unwrap()).unwrap();
    }
    let bias = Tensor::from_fn(&[512], |i| i as f32 * 0.01 - 2.0).unwrap();
    weights.replace("fc.bias", bias.clone()).unwrap();

    let out = executor::forward(&net, &weights, &image(1, 1)).unwrap();
    assert_eq!(out.shape(), &[1, 512]);
    assert_eq!(out.data(), bias.data());
}

#[test]
fn forward_is_deterministic_and_batch_consistent() {
    let net = build_mobiface();
    let weights = init_random(&net.weight_bindings(), 11).unwrap();
    let model = Model::new(&net, &weights).unwrap();
    let x = image(2, 2);

    let a = model.forward(&x).unwrap();
    let b = model.forward(&x).unwrap();
    assert_eq!(a.shape(), &[2, 512]);
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));

    for i in 0..2 {
        let single = Tensor::stack(&[x.sample(i).unwrap()]).unwrap();
        let one = model.forward(&single).unwrap();
        let diff = one.sample(0).unwrap().max_abs_diff(&a.sample(i).unwrap()).unwrap();
        assert!(diff <= 1e-6, "sample {i}: diff {diff}");
    }
    assert!(a.data().iter().all(|v| v.is_finite()));
}

#[test]
fn input_shape_is_checked() {
    let net = build_mobiface();
    let weights = init_random(&net.weight_bindings(), 0).unwrap();
    let model = Model::new(&net, &weights).unwrap();
    let bad = Tensor::zeros(&[1, 3, 100, 100]).unwrap();
    assert!(matches!(model.forward(&bad), Err(Error::Layer { ref layer, .. }) if layer == "input"));
    assert!(model.forward(&Tensor::zeros(&[3, 112, 112]).unwrap()).is_err());
    assert_eq!(model.forward_passes(), 0);
}

#[test]
fn missing_or_misshapen_weights_name_the_layer() {
    let net = build_mobiface();
    let mut weights = init_random(&net.weight_bindings(), 0).unwrap();
    weights.replace("block03.dw.conv.weight", Tensor::zeros(&[64, 1, 5, 5]).unwrap()).unwrap();
    let err = Model::new(&net, &weights).unwrap_err();
    assert!(err.to_string().contains("block03.dw.conv"), "{err}");

    let arch = Architecture::by_name(MOBIFACE).unwrap();
    let partial = init_random(&arch.weight_bindings()[..10], 0).unwrap();
    assert!(Model::new(&net, &partial).is_err());
}

#[test]
fn small_residual_network_matches_manual_composition() {
    use mobiface::ops;

    let net = NetworkBuilder::new("tiny", [4, 6, 6])
        .blocks(BlockSpec::residual(4, 2), 1)
        .unwrap()
        .flatten_fc("fc", 5)
        .unwrap()
        .build()
        .unwrap();
    let weights = init_random(&net.weight_bindings(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::from_fn(&[1, 4, 6, 6], |_| rng.random_range(-1.0f32..1.0)).unwrap();

    let mut h = x.clone();
    let mut shortcut = None;
    for l in &net.layers {
        h = match l.kind {
            LayerKind::ResidualBegin => {
                shortcut = Some(h.clone());
                h
            }
            LayerKind::ResidualEnd => ops::residual_add(&h, shortcut.as_ref().unwrap()).unwrap(),
            LayerKind::Conv { stride, padding, bias, .. } => {
                ops::conv2d(&h, &weights.conv(&l.name, stride, padding, bias).unwrap()).unwrap()
            }
            LayerKind::DwConv { stride, padding, .. } => {
                ops::dwconv2d(&h, &weights.dwconv(&l.name, stride, padding).unwrap()).unwrap()
            }
            LayerKind::BatchNorm { epsilon, .. } => {
                ops::batchnorm(&h, &weights.batchnorm(&l.name, epsilon).unwrap()).unwrap()
            }
            LayerKind::PRelu { .. } => ops::prelu(&h, &weights.prelu(&l.name).unwrap()).unwrap(),
            LayerKind::Relu => ops::relu(&h),
            LayerKind::Flatten => ops::flatten(&h).unwrap(),
            LayerKind::Fc { .. } => ops::fully_connected_batch(&h, &weights.fc(&l.name).unwrap()).unwrap(),
        };
    }
    let out = executor::forward(&net, &weights, &x).unwrap();
    assert_eq!(out, h);
}
