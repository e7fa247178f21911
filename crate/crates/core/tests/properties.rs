use lbp_inpaint::attention::AttentionConfig;
use lbp_inpaint::data::{MaskPolicy, SyntheticTextures};
use lbp_inpaint::image::RgbImage;
use lbp_inpaint::losses::{weighted_total, LossParts, LossTerm, LossWeights, Objective};
use lbp_inpaint::mask::{centering_mask, irregular_mask, missing_ratio, RatioBucket};
use lbp_inpaint::metrics::{l1_percent, psnr, ssim};
use lbp_inpaint::network::{
    default_attention_layer, discriminator_spec, forward_eval, generator_spec, Checkpoint,
    DiscriminatorOptions, GeneratorOptions, ModelState, NetworkSpec, Role, WidthScale,
};
use lbp_inpaint::train::{JointStage, LbpStage, TrainConfig};
use lbp_inpaint::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rgb(w: usize, h: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::new(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn centering_masks_have_square_holes(h in 1usize..80, w in 1usize..80, s in 0usize..80) {
        prop_assume!(s <= h.min(w) && s * s < h * w);
        let m = centering_mask(h, w, s).unwrap();
        prop_assert!(m.bits().iter().all(|&b| b <= 1));
        prop_assert_eq!(m.missing_count(), s * s);
        let (ratio, _) = missing_ratio(&m);
        prop_assert_eq!(ratio, (s * s) as f64 / (h * w) as f64);
    }

    #[test]
    fn irregular_masks_are_pure_and_in_band(seed in any::<u64>(), b in 0usize..4, side in 32usize..72) {
        let bucket = RatioBucket::STANDARD[b];
        let a = irregular_mask(side, side, seed, bucket).unwrap();
        let again = irregular_mask(side, side, seed, bucket).unwrap();
        prop_assert_eq!(&a, &again);
        prop_assert!(bucket.contains(missing_ratio(&a).0));
        prop_assert!(a.missing_count() < side * side);
    }

    #[test]
    fn metrics_are_symmetric(w in 11usize..20, h in 11usize..20, s1 in any::<u64>(), s2 in any::<u64>()) {
        let (a, b) = (random_rgb(w, h, s1), random_rgb(w, h, s2));
        prop_assert_eq!(l1_percent(&a, &b).unwrap(), l1_percent(&b, &a).unwrap());
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ssim(&a, &b).unwrap() <= 1.0);
        prop_assert!(l1_percent(&a, &b).unwrap() >= 0.0);
    }

    /// Residual `d` on every sample gives exactly `100 d / 255`.
    #[test]
    fn l1_follows_uniform_offsets(d in 0u8..100, seed in any::<u64>()) {
        let a = random_rgb(12, 12, seed);
        let a = RgbImage::from_fn(12, 12, |x, y| a.get(x, y).map(|v| v.min(155)));
        let b = RgbImage::from_fn(12, 12, |x, y| a.get(x, y).map(|v| v + d));
        prop_assert!((l1_percent(&a, &b).unwrap() - 100.0 * d as f64 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn generator_spec_round_trips(depth in 2usize..9, den in 0u32..4, lbp in any::<bool>(), att in any::<bool>()) {
        let role = if lbp { Role::Lbp } else { Role::Inpaint };
        let opts = GeneratorOptions {
            role,
            depth,
            width_scale: WidthScale::new(1, 1 << den).unwrap(),
            attention_layer: att.then(|| default_attention_layer(depth)),
        };
        let spec = generator_spec(&opts).unwrap();
        prop_assert_eq!(NetworkSpec::from_json(&spec.to_json()).unwrap(), spec.clone());
        let d = discriminator_spec(&DiscriminatorOptions {
            in_channels: role.out_channels(),
            depth: depth.clamp(2, 6),
            width_scale: spec.width_scale,
        }).unwrap();
        prop_assert_eq!(NetworkSpec::from_json(&d.to_json()).unwrap(), d);
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), depth in 2usize..5) {
        let spec = generator_spec(&GeneratorOptions::with_depth(
            Role::Lbp, depth, WidthScale::new(1, 16).unwrap(),
        )).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = ModelState::init(&spec, seed).unwrap();
        for (_, t) in state.iter_mut() {
            *t = Tensor::uniform(t.shape(), -1e3, 1e3, &mut rng);
        }
        let mut ck = Checkpoint::new(spec, state);
        ck.extras.insert("adam/step".into(), Tensor::scalar(seed as f64));
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(back, ck);
    }
}

fn small_generator(depth: usize) -> (NetworkSpec, ModelState) {
    let opts = GeneratorOptions {
        role: Role::Inpaint,
        depth,
        width_scale: WidthScale::new(1, 16).unwrap(),
        attention_layer: Some(default_attention_layer(depth)),
    };
    let spec = generator_spec(&opts).unwrap();
    let state = ModelState::init(&spec, 7).unwrap();
    (spec, state)
}

#[test]
fn generator_output_matches_input_resolution() {
    let (spec, state) = small_generator(3);
    let cfg = AttentionConfig {
        layer_index: 4,
        ..AttentionConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (h, w) in [(8, 8), (16, 8), (24, 40), (32, 32)] {
        let x = Tensor::uniform([1, 5, h, w], -1.0, 1.0, &mut rng);
        let m = centering_mask(h, w, 4).unwrap();
        let y = forward_eval(&spec, &state, &x, std::slice::from_ref(&m), &cfg).unwrap();
        assert_eq!(y.shape(), [1, 3, h, w]);
        assert!(y.data().iter().all(|v| v.abs() <= 1.0));
        let again = forward_eval(&spec, &state, &x, std::slice::from_ref(&m), &cfg).unwrap();
        assert_eq!(y.data(), again.data(), "forward must be deterministic");
    }
    for (h, w) in [(12, 16), (16, 20), (4, 4)] {
        let x = Tensor::zeros([1, 5, h, w]);
        let m = centering_mask(h, w, 2).unwrap();
        assert!(forward_eval(&spec, &state, &x, &[m], &cfg).is_err(), "{h}x{w}");
    }
}

#[test]
fn weighted_total_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..10.0)).collect();
        let w = LossWeights {
            multi_level: rng.random_range(0.0..2.0),
            reconstruction: rng.random_range(0.0..20.0),
            adversarial: rng.random_range(0.0..1.0),
            perceptual: rng.random_range(0.0..2.0),
            style: rng.random_range(0.0..20.0),
        };
        let mut parts = LossParts::new();
        for (term, &v) in LossTerm::ALL.iter().zip(&vals) {
            parts.insert(*term, tape.constant(Tensor::scalar(v)));
        }
        let total = weighted_total(&mut tape, &parts, &w, Objective::InpaintStage).unwrap();
        let want: f64 = LossTerm::ALL.iter().zip(&vals).map(|(t, v)| w.get(*t) * v).sum();
        assert!((tape.value(total).data()[0] - want).abs() < 1e-12 * want.max(1.0));
    }
}

fn tiny() -> (TrainConfig, SyntheticTextures) {
    let depth = 3;
    let cfg = TrainConfig {
        depth,
        width_scale: WidthScale::new(1, 16).unwrap(),
        image_size: 32,
        attention: AttentionConfig {
            layer_index: default_attention_layer(depth),
            ..AttentionConfig::default()
        },
        batch: 2,
        seed: 99,
        ..TrainConfig::default()
    };
    let data = SyntheticTextures {
        size: 32,
        seed: 3,
        mask: MaskPolicy::Centering { side: 8 },
    };
    (cfg, data)
}

#[test]
fn resumed_training_follows_the_same_trajectory() {
    let (cfg, data) = tiny();
    let dir = tempfile::tempdir().unwrap();

    let mut straight = LbpStage::new(&cfg).unwrap();
    straight.run(&data, &cfg, 4).unwrap();
    let mut resumed = LbpStage::new(&cfg).unwrap();
    resumed.run(&data, &cfg, 2).unwrap();
    resumed.save(dir.path()).unwrap();
    let mut resumed = LbpStage::load(dir.path()).unwrap();
    assert_eq!(resumed.iteration, 2);
    resumed.run(&data, &cfg, 4).unwrap();
    assert_eq!(resumed.trace.to_csv(), straight.trace.to_csv());
    assert_eq!(resumed.g1, straight.g1);
    assert_eq!(resumed.d1, straight.d1);

    let mut joint = JointStage::new(straight.g1.clone(), &cfg).unwrap();
    joint.run(&data, &cfg, 3).unwrap();
    let mut part = JointStage::new(straight.g1, &cfg).unwrap();
    part.run(&data, &cfg, 1).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    part.save(dir2.path()).unwrap();
    let mut part = JointStage::load(dir2.path()).unwrap();
    part.run(&data, &cfg, 3).unwrap();
    assert_eq!(part.trace.to_csv(), joint.trace.to_csv());
    assert_eq!(part.g2, joint.g2);
    assert!(joint
        .trace
        .rows()
        .iter()
        .all(|(_, r)| r.iter().all(|v| v.is_finite())));
}
