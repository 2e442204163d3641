use egal::data::{Provenance, Sample, LesionKind};
use egal::model::{
    composite_loss, train, Architecture, Classifier, Head, HeadMode, PrototypeSet, SmallCnn, TrainConfig,
};
use egal::numeric::{argmax, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise_image(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[1, size, size], (0..size * size).map(|_| rng.random()).collect()).unwrap()
}

fn random_protos(seed: u64, n: usize, dim: usize) -> PrototypeSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = PrototypeSet::new();
    for k in 0..n {
        p.insert(k, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
    }
    p
}

fn sample(id: usize, image: Tensor, label: usize) -> Sample {
    Sample {
        id,
        image,
        label: Some(label),
        esm: None,
        provenance: Provenance {
            lesion: LesionKind::Disc,
            tag: None,
        },
    }
}

#[test]
fn prototypical_probabilities_ignore_a_common_translation() {
    let net = SmallCnn::new(Architecture::default(), 4).unwrap();
    let protos = random_protos(9, 3, 64);
    let img = noise_image(16, 2);
    let before = Classifier::new(net.clone(), Head::Prototypical(protos.clone())).predict_proba(&img).unwrap();

    // the embedding is affine in embed.bias, so shifting the bias moves every embedding
    let shift: Vec<f64> = (0..64).map(|i| 0.3 * (i as f64).sin() - 0.7).collect();
    let mut moved = net;
    for (b, s) in moved.param_mut("embed.bias").unwrap().data_mut().iter_mut().zip(&shift) {
        *b += s;
    }
    let mut shifted = PrototypeSet::new();
    for k in 0..3 {
        shifted.insert(k, protos.get(k).unwrap().iter().zip(&shift).map(|(c, s)| c + s).collect());
    }
    let after = Classifier::new(moved, Head::Prototypical(shifted)).predict_proba(&img).unwrap();
    for (a, b) in before.iter().zip(&after) {
        assert!((a - b).abs() < 1e-9, "{before:?} vs {after:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn predicted_class_is_the_best_scoring_class(net_seed in 0u64..1000, img_seed in 0u64..1000, proto in any::<bool>()) {
        let net = SmallCnn::new(Architecture::default(), net_seed).unwrap();
        let head = if proto { Head::Prototypical(random_protos(net_seed, 3, 64)) } else { Head::Linear };
        let c = Classifier::new(net, head);
        let img = noise_image(16, img_seed);
        let probs = c.predict_proba(&img).unwrap();
        let scores: Vec<f64> = (0..3).map(|k| c.class_score(&img, k).unwrap()).collect();
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(argmax(&probs), argmax(&scores));
        prop_assert_eq!(c.predict(&img).unwrap(), argmax(&scores));
    }
}

/// Bright blob on the left for class 0, on the right for class 1.
fn separable_toy() -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    (0..20)
        .map(|i| {
            let label = i % 2;
            let cx = if label == 0 { 4.0 } else { 11.0 };
            let cy = rng.random_range(4.0..12.0);
            let v = (0..256)
                .map(|p| {
                    let (r, c) = ((p / 16) as f64, (p % 16) as f64);
                    let d2 = (r - cy).powi(2) + (c - cx).powi(2);
                    (0.8 * (-d2 / 6.0).exp() + 0.05 * rng.random::<f64>()).clamp(0.0, 1.0)
                })
                .collect();
            sample(i, Tensor::new(&[1, 16, 16], v).unwrap(), label)
        })
        .collect()
}

#[test]
fn separable_toy_is_fit_within_fifty_epochs() {
    let data = separable_toy();
    let refs: Vec<&Sample> = data.iter().collect();
    let mut c = Classifier::new(SmallCnn::new(Architecture::with_classes(2), 1).unwrap(), Head::Linear);
    let cfg = TrainConfig {
        head: HeadMode::Linear,
        alpha: 0.0,
        epochs: 50,
        ..TrainConfig::default()
    };
    train(&mut c, &refs, &cfg).unwrap();
    let hits = data.iter().filter(|s| c.predict(&s.image).unwrap() == s.label.unwrap()).count();
    assert_eq!(hits, data.len());
}

#[test]
fn composite_total_is_cls_plus_weighted_exp() {
    assert!((0.5 + 0.10 * 0.4 - 0.54f64).abs() < 1e-15);
    let ds = egal::data::generate(&egal::data::DatasetSpec {
        image_size: 32,
        pool: 30,
        seed_set: 6,
        test: 6,
        ..Default::default()
    })
    .unwrap();
    let batch: Vec<&Sample> = ds.samples.iter().take(2).collect();
    let c = Classifier::new(SmallCnn::new(Architecture::default(), 3).unwrap(), Head::Linear);
    let cfg = TrainConfig {
        head: HeadMode::Linear,
        alpha: 0.10,
        ..TrainConfig::default()
    };
    let l = composite_loss(&c, &batch, &cfg).unwrap();
    assert!(l.exp > 0.0 && l.exp <= 1.0);
    assert!((l.total - (l.cls + 0.10 * l.exp)).abs() < 1e-12, "{l:?}");
}
