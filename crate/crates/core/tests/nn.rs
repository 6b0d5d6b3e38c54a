use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pst_core::classifier::{default_layers, init_classifier, ClassifierConfig};
use pst_core::cost::{conv_output_shape, network_cost};
use pst_core::nn::{self, Shape};
use pst_core::{LayerSpec, Network, Tensor, TrainConfig};

fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(shape, (0..shape.len()).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn classifier(seed: u64) -> Network {
    init_classifier(&ClassifierConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn one_sample_is_learned() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(Shape::new(1, 64, 64), &mut rng);
    let samples = vec![(x.clone(), true); 4];
    let cfg = TrainConfig {
        learning_rate: 0.01,
        momentum: 0.9,
        epochs: 50,
        batch_size: 4,
        seed: 5,
        ..TrainConfig::default()
    };
    let out = nn::train(classifier(1), &samples, &cfg).unwrap();
    let tail = &out.losses[5..];
    assert!(
        tail.windows(2).all(|w| w[1] <= w[0]),
        "loss rose after epoch 5: {:?}",
        out.losses
    );
    assert!(*out.losses.last().unwrap() < 0.05, "{:?}", out.losses);
    assert!(out.net.predict(&x).unwrap() > 0.9);
}

#[test]
fn training_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let samples: Vec<(Tensor, bool)> = (0..12)
        .map(|k| (random_tensor(Shape::new(1, 64, 64), &mut rng), k % 2 == 0))
        .collect();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = nn::train(classifier(2), &samples, &cfg).unwrap();
    let b = nn::train(classifier(2), &samples, &cfg).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.net.params(), b.net.params());
    assert_eq!(
        a.net.predict(&samples[0].0).unwrap(),
        b.net.predict(&samples[0].0).unwrap()
    );
    let reseeded = nn::train(classifier(2), &samples, &TrainConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.net.params(), reseeded.net.params());
}

#[test]
fn predictions_stay_in_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = classifier(3);
    for _ in 0..20 {
        let scale = rng.random_range(-50.0..50.0);
        let mut x = random_tensor(Shape::new(1, 64, 64), &mut rng);
        x.data_mut().iter_mut().for_each(|v| *v *= scale);
        let p = net.predict(&x).unwrap();
        assert!((0.0..=1.0).contains(&p), "{p}");
    }
}

#[test]
fn forward_shapes_follow_the_output_size_formula() {
    let layers = vec![
        LayerSpec::conv(3, 2, 1, 4),
        LayerSpec::Relu,
        LayerSpec::max_pool(3, 2),
        LayerSpec::conv(2, 1, 0, 3),
        LayerSpec::max_pool(2, 1),
        LayerSpec::fully_connected(2),
    ];
    let input = Shape::new(2, 23, 17);
    let net = Network::init(input, layers.clone(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let (mut h, mut w) = (input.height, input.width);
    for (spec, shape) in layers.iter().zip(net.shapes()) {
        if let LayerSpec::Conv { filter, stride, padding, .. } | LayerSpec::MaxPool { filter, stride, padding } = *spec {
            (h, w) = conv_output_shape(h, w, filter, padding, stride).unwrap();
            assert_eq!((shape.height, shape.width), (h, w));
        }
    }
    let x = random_tensor(input, &mut ChaCha8Rng::seed_from_u64(7));
    let (out, _) = net.forward(&x).unwrap();
    assert_eq!(out.shape(), Shape::new(2, 1, 1));
}

#[test]
fn max_pool_routes_gradient_to_argmax() {
    let input = Shape::new(2, 6, 6);
    let net = Network::zeroed(input, vec![LayerSpec::max_pool(2, 2)]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_tensor(input, &mut rng);
    let (out, cache) = net.forward(&x).unwrap();
    let upstream = random_tensor(out.shape(), &mut rng);
    let grads = net.backward(&cache, &upstream).unwrap();
    let dx = grads.input;
    assert!((dx.sum() - upstream.sum()).abs() < 1e-12);
    for c in 0..2 {
        for oy in 0..3 {
            for ox in 0..3 {
                let block = [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(dy, dx_)| (2 * oy + dy, 2 * ox + dx_));
                let (my, mx) = *block
                    .iter()
                    .max_by(|a, b| x.at(c, a.0, a.1).total_cmp(&x.at(c, b.0, b.1)))
                    .unwrap();
                for &(y, xx) in &block {
                    let expected = if (y, xx) == (my, mx) { upstream.at(c, oy, ox) } else { 0.0 };
                    assert_eq!(dx.at(c, y, xx), expected);
                }
            }
        }
    }
}

#[test]
fn default_classifier_size() {
    let cfg = ClassifierConfig::default();
    let net = classifier(0);
    let count: usize = net.params().len();
    // 8*9+8 + 16*72+16 + 32*144+32 + 64*288+64 + 64*576+64 + 4096+1
    let by_hand = 80 + 1168 + 4640 + 18496 + 36928 + 4097;
    assert_eq!(count, by_hand);
    let cost = network_cost(&default_layers(&cfg), cfg.input_shape()).unwrap();
    assert_eq!(cost.total_params() as usize, by_hand);
    assert_eq!(by_hand, 65409);
}

#[test]
fn saved_models_reload_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    let net = classifier(12);
    net.save(&path).unwrap();
    let back = Network::load(&path).unwrap();
    assert_eq!(back.params(), net.params());
    assert_eq!(back.layers(), net.layers());
}
