//! Finite-difference checks of every differentiable building block, plus a
//! small end-to-end inpainting generator under the full joint objective.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend_on_tape, AttentionConfig};
use crate::error::Result;
use crate::losses::{
    discriminator_loss, generator_adversarial_loss, multi_level_loss, perceptual_loss,
    reconstruction_loss, style_loss, weighted_total, ConvFeatureExtractor, LossParts, LossTerm,
    LossWeights, NormMode, Objective,
};
use crate::mask::{centering_mask, Mask};
use crate::network::{
    default_attention_layer, discriminator_spec, forward, generator_spec, BoundParams,
    DiscriminatorOptions, GeneratorOptions, ModelState, Role, WidthScale,
};
use crate::tensor::kernels::INSTANCE_NORM_EPS;
use crate::tensor::{grad_check_report, Activation, ConvParams, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub max_relative_error: f64,
    pub checked: usize,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

fn uniform(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Values bounded away from zero, so piecewise-linear kinks are never crossed.
fn off_kink(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("sized")
}

fn check<F>(name: &str, f: F, inputs: &[Tensor]) -> Result<SuiteResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let r = grad_check_report(f, inputs, STEP)?;
    Ok(SuiteResult {
        name: name.to_string(),
        max_relative_error: r.max_relative_error,
        checked: r.checked,
    })
}

/// Every check, in a fixed order, from one seed.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let p = ConvParams::new(3, 4, 2, 1);
    let conv_in = [
        uniform([2, 2, 6, 6], -1.0, 1.0, &mut rng),
        uniform([3, 2, 4, 4], -0.5, 0.5, &mut rng),
        uniform([1, 3, 1, 1], -0.5, 0.5, &mut rng),
    ];
    out.push(check(
        "conv2d",
        |t, v| t.conv2d(v[0], v[1], v[2], p),
        &conv_in,
    )?);
    let deconv_in = [
        uniform([2, 2, 3, 3], -1.0, 1.0, &mut rng),
        uniform([2, 3, 4, 4], -0.5, 0.5, &mut rng),
        uniform([1, 3, 1, 1], -0.5, 0.5, &mut rng),
    ];
    out.push(check(
        "conv_transpose2d",
        |t, v| t.conv_transpose2d(v[0], v[1], v[2], p),
        &deconv_in,
    )?);
    out.push(check(
        "instance_norm",
        |t, v| t.instance_norm(v[0], INSTANCE_NORM_EPS),
        &[uniform([2, 3, 4, 5], -2.0, 2.0, &mut rng)],
    )?);
    for kind in Activation::ALL {
        out.push(check(
            kind.name(),
            move |t, v| t.activation(v[0], kind),
            &[off_kink([1, 2, 4, 4], &mut rng)],
        )?);
    }

    let pair = [
        uniform([1, 2, 4, 4], -1.0, 1.0, &mut rng),
        uniform([1, 2, 4, 4], -1.0, 1.0, &mut rng),
    ];
    let pair2 = [
        uniform([1, 4, 2, 2], -1.0, 1.0, &mut rng),
        uniform([1, 4, 2, 2], -1.0, 1.0, &mut rng),
    ];
    let (gt1, gt2) = (pair[1].clone(), pair2[1].clone());
    out.push(check(
        "multi_level_loss",
        move |t, v| {
            let g1 = t.constant(gt1.clone());
            let g2 = t.constant(gt2.clone());
            multi_level_loss(t, &[v[0], v[1]], &[g1, g2], NormMode::Euclidean)
        },
        &[pair[0].clone(), pair2[0].clone()],
    )?);
    let gt = pair[1].clone();
    out.push(check(
        "reconstruction_loss",
        move |t, v| {
            let g = t.constant(gt.clone());
            reconstruction_loss(t, v[0], g, NormMode::Euclidean)
        },
        &[pair[0].clone()],
    )?);
    let probs = [
        uniform([1, 1, 3, 3], 0.05, 0.95, &mut rng),
        uniform([1, 1, 3, 3], 0.05, 0.95, &mut rng),
    ];
    out.push(check(
        "adversarial_loss (discriminator)",
        |t, v| discriminator_loss(t, v[0], v[1]),
        &probs,
    )?);
    out.push(check(
        "adversarial_loss (generator)",
        |t, v| generator_adversarial_loss(t, v[0]),
        &probs[1..],
    )?);
    let fx = ConvFeatureExtractor::random(3, &[4, 6], seed ^ 0x5eed);
    let img_out = uniform([1, 3, 8, 8], -1.0, 1.0, &mut rng);
    let img_gt = uniform([1, 3, 8, 8], -1.0, 1.0, &mut rng);
    let g = img_gt.clone();
    out.push(check(
        "perceptual_loss",
        |t, v| {
            let gv = t.constant(g.clone());
            perceptual_loss(t, v[0], gv, &fx, NormMode::Euclidean)
        },
        std::slice::from_ref(&img_out),
    )?);
    out.push(check(
        "style_loss",
        |t, v| {
            let gv = t.constant(img_gt.clone());
            style_loss(t, v[0], gv, &fx, NormMode::Euclidean)
        },
        &[img_out],
    )?);

    let mask = centering_mask(8, 8, 4)?;
    let cfg = AttentionConfig::default();
    out.push(check(
        "attend",
        |t, v| attend_on_tape(t, v[0], std::slice::from_ref(&mask), &cfg),
        &[uniform([1, 4, 8, 8], -1.0, 1.0, &mut rng)],
    )?);

    out.push(end_to_end(seed)?);
    Ok(out)
}

/// 16x16 depth-3 inpainting generator under the weighted joint objective;
/// checked with respect to its input and every parameter.
pub fn end_to_end(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe2e);
    let depth = 3;
    let width = WidthScale { num: 1, den: 32 };
    let opts = GeneratorOptions {
        role: Role::Inpaint,
        depth,
        width_scale: width,
        attention_layer: Some(default_attention_layer(depth)),
    };
    let g2 = generator_spec(&opts)?;
    let d2 = discriminator_spec(&DiscriminatorOptions {
        in_channels: 3,
        depth: 4,
        width_scale: width,
    })?;
    // Larger init than training uses, so that every layer matters.
    let mut state = ModelState::init(&g2, seed)?;
    for (_, t) in state.iter_mut() {
        *t = uniform(t.shape(), -0.3, 0.3, &mut rng);
    }
    let d_state = ModelState::init(&d2, seed ^ 1)?;
    let fx = ConvFeatureExtractor::desk_default(3);
    let mask: Mask = centering_mask(16, 16, 6)?;
    let cfg = AttentionConfig {
        layer_index: opts.attention_layer.expect("set"),
        ..AttentionConfig::default()
    };
    let weights = LossWeights::default();
    let input = uniform([1, 5, 16, 16], -1.0, 1.0, &mut rng);
    let truth = uniform([1, 3, 16, 16], -1.0, 1.0, &mut rng);
    let lbp_fixed = uniform([1, 1, 16, 16], -1.0, 1.0, &mut rng);
    let mask_plane = mask.to_tensor();
    let names: Vec<String> = state.iter().map(|(k, _)| k.clone()).collect();
    let frozen: BTreeMap<String, Tensor> =
        state.iter().map(|(k, t)| (k.clone(), t.clone())).collect();

    let mut inputs = vec![input];
    inputs.extend(state.iter().map(|(_, t)| t.clone()));
    let masks = std::slice::from_ref(&mask);

    let f = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let params = BoundParams::from_vars(names.iter().cloned().zip(v[1..].iter().copied()));
        let frozen_params = BoundParams::from_vars(
            frozen
                .iter()
                .map(|(k, x)| (k.clone(), t.constant(x.clone()))),
        );
        let d_params = d_state.bind(t, false);
        let out = forward(t, &g2, &params, v[0], masks, &cfg)?.output;
        let gt = t.constant(truth.clone());
        let lbp = t.constant(lbp_fixed.clone());
        let m = t.constant(mask_plane.clone());
        let on_out = {
            let x = t.concat(out, lbp)?;
            t.concat(x, m)?
        };
        let on_gt = {
            let x = t.concat(gt, lbp)?;
            t.concat(x, m)?
        };
        let fo = forward(t, &g2, &params, on_out, masks, &cfg)?.features;
        let fg = forward(t, &g2, &frozen_params, on_gt, masks, &cfg)?.features;
        let mut parts = LossParts::new();
        parts.insert(
            LossTerm::MultiLevel,
            multi_level_loss(t, &fo, &fg, NormMode::Euclidean)?,
        );
        parts.insert(
            LossTerm::Reconstruction,
            reconstruction_loss(t, out, gt, NormMode::Euclidean)?,
        );
        let df = forward(t, &d2, &d_params, out, &[], &cfg)?.output;
        parts.insert(LossTerm::Adversarial, generator_adversarial_loss(t, df)?);
        parts.insert(
            LossTerm::Perceptual,
            perceptual_loss(t, out, gt, &fx, NormMode::Euclidean)?,
        );
        parts.insert(
            LossTerm::Style,
            style_loss(t, out, gt, &fx, NormMode::Euclidean)?,
        );
        weighted_total(t, &parts, &weights, Objective::InpaintStage)
    };
    check("end-to-end inpainting generator (16x16)", f, &inputs)
}

/// Fixed-width table of suite results.
pub fn format_table(results: &[SuiteResult]) -> String {
    let width = results
        .iter()
        .map(|r| r.name.len())
        .max()
        .unwrap_or(9)
        .max(9);
    let mut s = format!(
        "{:<width$}  {:>10}  {:>8}  result\n",
        "primitive", "max error", "checked"
    );
    for r in results {
        s.push_str(&format!(
            "{:<width$}  {:>10.3e}  {:>8}  {}\n",
            r.name,
            r.max_relative_error,
            r.checked,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    s
}
