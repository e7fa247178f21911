//! Training objectives: feature-space multi-level loss, reconstruction,
//! adversarial, perceptual and style losses, and their weighted totals.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Activation, ConvParams, Tape, Tensor, Var};

/// Clamp applied to discriminator probabilities before taking logs.
pub const DISCRIMINATOR_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub multi_level: f64,
    pub reconstruction: f64,
    pub adversarial: f64,
    pub perceptual: f64,
    pub style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            multi_level: 0.01,
            reconstruction: 10.0,
            adversarial: 0.2,
            perceptual: 1.0,
            style: 10.0,
        }
    }
}

impl LossWeights {
    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::MultiLevel => self.multi_level,
            LossTerm::Reconstruction => self.reconstruction,
            LossTerm::Adversarial => self.adversarial,
            LossTerm::Perceptual => self.perceptual,
            LossTerm::Style => self.style,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for term in LossTerm::ALL {
            let w = self.get(term);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!(
                    "weight for {} must be >= 0",
                    term.key()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossTerm {
    MultiLevel,
    Reconstruction,
    Adversarial,
    Perceptual,
    Style,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [
        LossTerm::MultiLevel,
        LossTerm::Reconstruction,
        LossTerm::Adversarial,
        LossTerm::Perceptual,
        LossTerm::Style,
    ];

    /// Short column name used in traces.
    pub fn key(self) -> &'static str {
        match self {
            LossTerm::MultiLevel => "m",
            LossTerm::Reconstruction => "r",
            LossTerm::Adversarial => "a",
            LossTerm::Perceptual => "p",
            LossTerm::Style => "s",
        }
    }
}

/// Which objective a weighted total builds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// `m`, `r`, `a` for the LBP generator.
    LbpStage,
    /// `m`, `r`, `a`, `p`, `s` for the inpainting generator.
    InpaintStage,
}

impl Objective {
    pub fn terms(self) -> &'static [LossTerm] {
        match self {
            Objective::LbpStage => &LossTerm::ALL[..3],
            Objective::InpaintStage => &LossTerm::ALL,
        }
    }
}

/// How a feature-space distance is reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Euclidean norm of the flattened difference.
    #[default]
    Euclidean,
    /// Euclidean norm divided by `sqrt(element count)`.
    SizeNormalized,
}

/// `|a - b|` under `mode`; `b` is treated as a constant.
pub fn distance(tape: &mut Tape, a: Var, b: Var, mode: NormMode, what: &str) -> Result<Var> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::Shape {
            op: what.to_string(),
            left: sa,
            right: sb,
        });
    }
    let b = tape.detach(b);
    let diff = tape.sub(a, b)?;
    let norm = tape.norm2(diff)?;
    match mode {
        NormMode::Euclidean => Ok(norm),
        NormMode::SizeNormalized => {
            let n = tape.value(diff).len() as f64;
            tape.scale(norm, 1.0 / n.sqrt())
        }
    }
}

fn sum_scalars(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    if parts.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let weighted: Vec<(Var, f64)> = parts.iter().map(|&v| (v, 1.0)).collect();
    tape.weighted_sum(&weighted)
}

/// `sum_h |out_h - gt_h|` over aligned per-layer feature lists.
pub fn multi_level_loss(
    tape: &mut Tape,
    feats_out: &[Var],
    feats_gt: &[Var],
    mode: NormMode,
) -> Result<Var> {
    if feats_out.len() != feats_gt.len() {
        return Err(Error::Dimension {
            op: "multi_level_loss",
            axis: "layer count",
            expected: feats_out.len(),
            actual: feats_gt.len(),
        });
    }
    let mut parts = Vec::with_capacity(feats_out.len());
    for (h, (&o, &g)) in feats_out.iter().zip(feats_gt).enumerate() {
        parts.push(distance(
            tape,
            o,
            g,
            mode,
            &format!("multi_level_loss layer {}", h + 1),
        )?);
    }
    sum_scalars(tape, &parts)
}

pub fn reconstruction_loss(tape: &mut Tape, out: Var, gt: Var, mode: NormMode) -> Result<Var> {
    distance(tape, out, gt, mode, "reconstruction_loss")
}

/// `-mean(log d_real) - mean(log(1 - d_fake))`.
pub fn discriminator_loss(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<Var> {
    let real = tape.neg_mean_log(d_real, false, DISCRIMINATOR_EPS)?;
    let fake = tape.neg_mean_log(d_fake, true, DISCRIMINATOR_EPS)?;
    tape.weighted_sum(&[(real, 1.0), (fake, 1.0)])
}

/// Non-saturating generator loss `-mean(log d_fake)`.
pub fn generator_adversarial_loss(tape: &mut Tape, d_fake: Var) -> Result<Var> {
    tape.neg_mean_log(d_fake, false, DISCRIMINATOR_EPS)
}

/// `(d_loss, g_loss)` from discriminator probabilities on real and generated inputs.
pub fn adversarial_losses(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<(Var, Var)> {
    Ok((
        discriminator_loss(tape, d_real, d_fake)?,
        generator_adversarial_loss(tape, d_fake)?,
    ))
}

/// A frozen network whose intermediate activations define perceptual and
/// style distances.
pub trait FeatureExtractor {
    fn stage_names(&self) -> Vec<String>;
    /// Stage indices the losses sum over.
    fn selected(&self) -> &[usize];
    /// Activations of every stage, in order.
    fn features(&self, tape: &mut Tape, image: Var) -> Result<Vec<Var>>;

    fn selected_features(&self, tape: &mut Tape, image: Var) -> Result<Vec<Var>> {
        let all = self.features(tape, image)?;
        self.selected()
            .iter()
            .map(|&i| {
                all.get(i).copied().ok_or_else(|| {
                    Error::invalid(format!(
                        "feature stage {i} requested but extractor has {} stages",
                        all.len()
                    ))
                })
            })
            .collect()
    }
}

/// Single stage that returns its input.
#[derive(Clone, Debug, Default)]
pub struct IdentityExtractor {
    selected: Vec<usize>,
}

impl IdentityExtractor {
    pub fn new() -> Self {
        IdentityExtractor { selected: vec![0] }
    }
}

impl FeatureExtractor for IdentityExtractor {
    fn stage_names(&self) -> Vec<String> {
        vec!["identity".into()]
    }

    fn selected(&self) -> &[usize] {
        &self.selected
    }

    fn features(&self, _tape: &mut Tape, image: Var) -> Result<Vec<Var>> {
        Ok(vec![image])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvStage {
    pub name: String,
    pub params: ConvParams,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Stack of strided convolutions, each followed by ReLU, with fixed weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvFeatureExtractor {
    stages: Vec<ConvStage>,
    selected: Vec<usize>,
}

impl ConvFeatureExtractor {
    pub const DEFAULT_CHANNELS: [usize; 3] = [16, 32, 64];
    pub const DEFAULT_SEED: u64 = 0x00f1_7e25;

    /// Caller-supplied stages, e.g. converted from a pretrained model.
    pub fn from_stages(stages: Vec<ConvStage>, selected: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = selected.iter().find(|&&i| i >= stages.len()) {
            return Err(Error::invalid(format!(
                "selected stage {bad} out of range for {} stages",
                stages.len()
            )));
        }
        for s in &stages {
            s.params.validate()?;
        }
        Ok(ConvFeatureExtractor { stages, selected })
    }

    /// Randomly initialised (He-normal) frozen stack, all stages selected.
    pub fn random(in_channels: usize, channels: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = in_channels;
        let mut stages = Vec::with_capacity(channels.len());
        for (i, &c) in channels.iter().enumerate() {
            let params = ConvParams::new(c, 4, 2, 1);
            let std = (2.0 / (c_in * 16) as f64).sqrt();
            stages.push(ConvStage {
                name: format!("stage{}", i + 1),
                params,
                weight: Tensor::randn([c, c_in, 4, 4], std, &mut rng),
                bias: Tensor::zeros([1, c, 1, 1]),
            });
            c_in = c;
        }
        let selected = (0..stages.len()).collect();
        ConvFeatureExtractor { stages, selected }
    }

    /// The 16/32/64-channel stack used when no pretrained features are supplied.
    pub fn desk_default(in_channels: usize) -> Self {
        Self::random(in_channels, &Self::DEFAULT_CHANNELS, Self::DEFAULT_SEED)
    }

    pub fn stages(&self) -> &[ConvStage] {
        &self.stages
    }
}

impl FeatureExtractor for ConvFeatureExtractor {
    fn stage_names(&self) -> Vec<String> {
        self.stages.iter().map(|s| s.name.clone()).collect()
    }

    fn selected(&self) -> &[usize] {
        &self.selected
    }

    fn features(&self, tape: &mut Tape, image: Var) -> Result<Vec<Var>> {
        let mut x = image;
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let w = tape.constant(s.weight.clone());
            let b = tape.constant(s.bias.clone());
            let y = tape.conv2d(x, w, b, s.params)?;
            x = tape.activation(y, Activation::Relu)?;
            out.push(x);
        }
        Ok(out)
    }
}

/// `sum_{h in A} |phi_h(out) - phi_h(gt)|`.
pub fn perceptual_loss(
    tape: &mut Tape,
    out: Var,
    gt: Var,
    fx: &dyn FeatureExtractor,
    mode: NormMode,
) -> Result<Var> {
    let gt = tape.detach(gt);
    let fo = fx.selected_features(tape, out)?;
    let fg = fx.selected_features(tape, gt)?;
    let mut parts = Vec::with_capacity(fo.len());
    for (o, g) in fo.into_iter().zip(fg) {
        parts.push(distance(tape, o, g, mode, "perceptual_loss")?);
    }
    sum_scalars(tape, &parts)
}

/// `sum_{h in A} |G(phi_h(out)) - G(phi_h(gt))|` with `G` the channel Gram
/// matrix normalised by `C H W`.
pub fn style_loss(
    tape: &mut Tape,
    out: Var,
    gt: Var,
    fx: &dyn FeatureExtractor,
    mode: NormMode,
) -> Result<Var> {
    let gt = tape.detach(gt);
    let fo = fx.selected_features(tape, out)?;
    let fg = fx.selected_features(tape, gt)?;
    let mut parts = Vec::with_capacity(fo.len());
    for (o, g) in fo.into_iter().zip(fg) {
        let go = tape.gram(o)?;
        let gg = tape.gram(g)?;
        parts.push(distance(tape, go, gg, mode, "style_loss")?);
    }
    sum_scalars(tape, &parts)
}

/// Named scalar loss components, keyed by term.
pub type LossParts = BTreeMap<LossTerm, Var>;

/// The weighted objective. A term may be left out only when its weight is 0.
pub fn weighted_total(
    tape: &mut Tape,
    parts: &LossParts,
    weights: &LossWeights,
    objective: Objective,
) -> Result<Var> {
    let mut weighted = Vec::with_capacity(5);
    for &term in objective.terms() {
        let w = weights.get(term);
        match parts.get(&term) {
            Some(&v) => weighted.push((v, w)),
            None if w == 0.0 => {}
            None => {
                return Err(Error::invalid(format!(
                    "missing loss component '{}'",
                    term.key()
                )))
            }
        }
    }
    tape.weighted_sum(&weighted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).data()[0]
    }

    #[test]
    fn multi_level_hand_norm() {
        let mut tape = Tape::new();
        let o = tape.param(Tensor::from_vec([1, 1, 1, 2], vec![3.0, 4.0]).unwrap());
        let g = tape.constant(Tensor::zeros([1, 1, 1, 2]));
        let l = multi_level_loss(&mut tape, &[o], &[g], NormMode::Euclidean).unwrap();
        assert_eq!(scalar(&tape, l), 5.0);
    }

    #[test]
    fn multi_level_layer_mismatch() {
        let mut tape = Tape::new();
        let o = tape.param(Tensor::zeros([1, 1, 1, 2]));
        let g = tape.constant(Tensor::zeros([1, 1, 2, 1]));
        match multi_level_loss(&mut tape, &[o], &[g], NormMode::Euclidean) {
            Err(Error::Shape { op, .. }) => assert!(op.contains("layer 1")),
            other => panic!("unexpected {:?}", other.map(|v| v.index())),
        }
    }

    #[test]
    fn reconstruction_hand_norm() {
        let mut tape = Tape::new();
        let o = tape.param(Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let g = tape.constant(Tensor::zeros([1, 1, 1, 2]));
        let l = reconstruction_loss(&mut tape, o, g, NormMode::Euclidean).unwrap();
        assert!((scalar(&tape, l) - 5f64.sqrt()).abs() < 1e-15);
        let l = reconstruction_loss(&mut tape, o, g, NormMode::SizeNormalized).unwrap();
        assert!((scalar(&tape, l) - 2.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn adversarial_closed_forms() {
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::full([1, 1, 2, 2], 0.5));
        let f = tape.constant(Tensor::full([1, 1, 2, 2], 0.5));
        let (d, g) = adversarial_losses(&mut tape, r, f).unwrap();
        assert!((scalar(&tape, d) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((scalar(&tape, g) - 2f64.ln()).abs() < 1e-12);

        let r = tape.constant(Tensor::full([1, 1, 1, 1], 1.0));
        let f = tape.constant(Tensor::full([1, 1, 1, 1], 0.0));
        let (d, _) = adversarial_losses(&mut tape, r, f).unwrap();
        assert!(scalar(&tape, d) < 1e-6);
    }

    #[test]
    fn style_hand_gram() {
        // Two channels over a 1x2 map: F = I, so G = I / 4.
        let fx = IdentityExtractor::new();
        let mut tape = Tape::new();
        let o = tape.param(Tensor::from_vec([1, 2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let g = tape.constant(Tensor::zeros([1, 2, 1, 2]));
        let l = style_loss(&mut tape, o, g, &fx, NormMode::Euclidean).unwrap();
        assert!((scalar(&tape, l) - 2f64.sqrt() / 4.0).abs() < 1e-15);
    }

    #[test]
    fn identity_perceptual_is_reconstruction() {
        let fx = IdentityExtractor::new();
        let mut tape = Tape::new();
        let o = tape.param(Tensor::from_vec([1, 1, 1, 3], vec![0.3, -0.2, 0.9]).unwrap());
        let g = tape.constant(Tensor::from_vec([1, 1, 1, 3], vec![0.1, 0.5, -0.4]).unwrap());
        let p = perceptual_loss(&mut tape, o, g, &fx, NormMode::Euclidean).unwrap();
        let r = reconstruction_loss(&mut tape, o, g, NormMode::Euclidean).unwrap();
        assert_eq!(scalar(&tape, p), scalar(&tape, r));
    }

    #[test]
    fn weighted_totals_with_defaults() {
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let one = tape.constant(Tensor::scalar(1.0));
        let parts: LossParts = LossTerm::ALL.iter().map(|&t| (t, one)).collect();
        let l = weighted_total(&mut tape, &parts, &w, Objective::LbpStage).unwrap();
        assert_eq!(scalar(&tape, l), 10.21);
        let l = weighted_total(&mut tape, &parts, &w, Objective::InpaintStage).unwrap();
        assert_eq!(scalar(&tape, l), 21.21);
    }

    #[test]
    fn weighted_total_requires_weighted_terms() {
        let mut tape = Tape::new();
        let one = tape.constant(Tensor::scalar(1.0));
        let mut parts = LossParts::new();
        parts.insert(LossTerm::Reconstruction, one);
        parts.insert(LossTerm::Adversarial, one);
        let w = LossWeights::default();
        assert!(weighted_total(&mut tape, &parts, &w, Objective::LbpStage).is_err());
        let w = LossWeights {
            multi_level: 0.0,
            ..w
        };
        let l = weighted_total(&mut tape, &parts, &w, Objective::LbpStage).unwrap();
        assert_eq!(scalar(&tape, l), 10.2);
    }

    #[test]
    fn extractor_rejects_missing_stage() {
        let base = ConvFeatureExtractor::desk_default(3);
        assert!(ConvFeatureExtractor::from_stages(base.stages().to_vec(), vec![0, 3]).is_err());
    }
}
