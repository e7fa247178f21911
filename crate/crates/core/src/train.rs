//! Adam and the two adversarial training stages.
//!
//! Stage one trains the LBP generator against its discriminator. Stage two
//! chains the LBP generator into the inpainting generator and trains both
//! end to end against a second discriminator. Every iteration performs one
//! discriminator update followed by one generator update.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::attention::AttentionConfig;
use crate::data::{mix_seed, Prepared, SampleSource};
use crate::error::{Error, Result};
use crate::losses::{
    discriminator_loss, generator_adversarial_loss, multi_level_loss, perceptual_loss,
    reconstruction_loss, style_loss, weighted_total, ConvFeatureExtractor, FeatureExtractor,
    LossParts, LossTerm, LossWeights, NormMode, Objective,
};
use crate::mask::Mask;
use crate::network::{
    default_attention_layer, discriminator_spec, forward, generator_spec, BoundParams, Checkpoint,
    DiscriminatorOptions, GeneratorOptions, ModelState, NetworkSpec, Role, WidthScale,
    DISCRIMINATOR_DEPTH, FULL_DEPTH,
};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Per-parameter moment buffers and the shared step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

const ADAM_M: &str = "adam/m/";
const ADAM_V: &str = "adam/v/";
const ADAM_STEP: &str = "adam/step";
const ITERATION_BLOB: &str = "train/iteration";

impl AdamState {
    pub fn to_blobs(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("{ADAM_M}{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("{ADAM_V}{k}"), t.clone());
        }
        out.insert(ADAM_STEP.into(), Tensor::scalar(self.step as f64));
        out
    }

    pub fn from_blobs(blobs: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut st = AdamState::default();
        for (k, t) in blobs {
            if let Some(name) = k.strip_prefix(ADAM_M) {
                st.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix(ADAM_V) {
                st.v.insert(name.to_string(), t.clone());
            } else if k == ADAM_STEP {
                st.step = t.data()[0] as u64;
            }
        }
        if st.m.keys().ne(st.v.keys()) {
            return Err(Error::Checkpoint(
                "adam moment buffers do not pair up".into(),
            ));
        }
        Ok(st)
    }
}

/// Bias-corrected Adam update of every parameter. Nothing is modified when a
/// gradient is missing, mis-shaped or non-finite.
pub fn adam_step(
    params: &mut ModelState,
    grads: &BTreeMap<String, Tensor>,
    st: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no gradient for parameter {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::Shape {
                op: format!("adam_step {name}"),
                left: p.shape(),
                right: g.shape(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {name}")));
        }
        for (buf, label) in [(&st.m, "first"), (&st.v, "second")] {
            if let Some(b) = buf.get(name) {
                if b.shape() != p.shape() {
                    return Err(Error::Shape {
                        op: format!("adam_step {label} moment of {name}"),
                        left: p.shape(),
                        right: b.shape(),
                    });
                }
            }
        }
    }
    st.step += 1;
    let t = st.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m =
            st.m.entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
        let v =
            st.v.entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch: usize,
    pub iters_stage1: usize,
    pub iters_stage2: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub attention: AttentionConfig,
    /// Off builds the inpainting generator without its attention layer.
    pub attention_enabled: bool,
    /// Training is single-threaded and samples are addressed by index, so
    /// runs are always reproducible; the flag is kept for configuration
    /// compatibility.
    pub deterministic: bool,
    pub depth: usize,
    pub width_scale: WidthScale,
    pub image_size: usize,
    pub discriminator_depth: usize,
    pub norm: NormMode,
    /// Skip discriminator updates in stage two.
    pub freeze_discriminator: bool,
    /// Save every `n` iterations (0: only at the end of a run).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    /// Full-size networks on 256x256 inputs.
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch: 1,
            iters_stage1: 300,
            iters_stage2: 500,
            seed: 0,
            weights: LossWeights::default(),
            attention: AttentionConfig::default(),
            attention_enabled: true,
            deterministic: true,
            depth: FULL_DEPTH,
            width_scale: WidthScale::FULL,
            image_size: 256,
            discriminator_depth: DISCRIMINATOR_DEPTH,
            norm: NormMode::Euclidean,
            freeze_discriminator: false,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    /// Depth 5, 1/8 width, 64x64 inputs, attention at the 8x8 decoder layer.
    pub fn desk() -> Self {
        let depth = 5;
        TrainConfig {
            depth,
            width_scale: WidthScale { num: 1, den: 8 },
            image_size: 64,
            attention: AttentionConfig {
                layer_index: default_attention_layer(depth),
                ..AttentionConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    pub fn generator_options(&self, role: Role) -> GeneratorOptions {
        let attention_layer = match role {
            Role::Inpaint if self.attention_enabled => Some(self.attention.layer_index),
            _ => None,
        };
        GeneratorOptions {
            role,
            depth: self.depth,
            width_scale: self.width_scale,
            attention_layer,
        }
    }

    pub fn discriminator_options(&self, in_channels: usize) -> DiscriminatorOptions {
        DiscriminatorOptions {
            in_channels,
            depth: self.discriminator_depth,
            width_scale: self.width_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.adam.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        self.weights.validate().map_err(cfg_err)?;
        self.attention.validate().map_err(cfg_err)?;
        for role in [Role::Lbp, Role::Inpaint] {
            let spec = generator_spec(&self.generator_options(role)).map_err(cfg_err)?;
            spec.infer_shapes(self.image_size, self.image_size)
                .map_err(cfg_err)?;
        }
        for c in [1, 3] {
            discriminator_spec(&self.discriminator_options(c))
                .and_then(|d| d.infer_shapes(self.image_size, self.image_size))
                .map_err(cfg_err)?;
        }
        Ok(())
    }
}

/// A network with its parameters and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub state: ModelState,
    pub adam: AdamState,
}

impl Network {
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let state = ModelState::init(&spec, seed)?;
        Ok(Network {
            spec,
            state,
            adam: AdamState::default(),
        })
    }

    pub fn to_checkpoint(&self, iteration: usize) -> Checkpoint {
        let mut ck = Checkpoint::new(self.spec.clone(), self.state.clone());
        ck.extras = self.adam.to_blobs();
        ck.extras
            .insert(ITERATION_BLOB.into(), Tensor::scalar(iteration as f64));
        ck
    }

    /// The network and the iteration it was saved at, if recorded.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<(Self, Option<usize>)> {
        let adam = AdamState::from_blobs(&ck.extras)?;
        let iteration = ck.extras.get(ITERATION_BLOB).map(|t| t.data()[0] as usize);
        Ok((
            Network {
                spec: ck.spec,
                state: ck.state,
                adam,
            },
            iteration,
        ))
    }

    pub fn save(&self, path: &Path, iteration: usize) -> Result<()> {
        self.to_checkpoint(iteration).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Option<usize>)> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    fn masks<'a>(&self, mask: &'a Mask) -> &'a [Mask] {
        if self.spec.attention_layer().is_some() {
            std::slice::from_ref(mask)
        } else {
            &[]
        }
    }
}

/// Per-iteration loss components.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTrace {
    columns: Vec<String>,
    rows: Vec<(usize, Vec<f64>)>,
}

impl LossTrace {
    pub fn new(columns: Vec<String>) -> Self {
        LossTrace {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[(usize, Vec<f64>)] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, iteration: usize, values: Vec<f64>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::Dimension {
                op: "LossTrace::push",
                axis: "column",
                expected: self.columns.len(),
                actual: values.len(),
            });
        }
        self.rows.push((iteration, values));
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|(_, v)| v[i]).collect())
    }

    /// `iteration,<columns>` with shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration");
        for c in &self.columns {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (it, vals) in &self.rows {
            s.push_str(&it.to_string());
            for v in vals {
                s.push(',');
                s.push_str(&v.to_string());
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::invalid(format!("loss trace: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty".into()))?;
        let mut cols = header.split(',');
        if cols.next() != Some("iteration") {
            return Err(bad("first column must be 'iteration'".into()));
        }
        let mut trace = LossTrace::new(cols.map(str::to_string).collect());
        for (n, line) in lines.enumerate() {
            let mut f = line.split(',');
            let it = f
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("row {} has no iteration", n + 1)))?;
            let vals = f
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("row {}: {e}", n + 1)))?;
            trace.push(it, vals)?;
        }
        Ok(trace)
    }
}

/// Means of the first and the last `window` values.
pub fn window_means(values: &[f64], window: usize) -> Option<(f64, f64)> {
    if window == 0 || values.len() < window {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((
        mean(&values[..window]),
        mean(&values[values.len() - window..]),
    ))
}

/// A loss graph with the parameter handles of every network that took part.
pub struct StepGraph {
    pub tape: Tape,
    pub loss: Var,
    pub parts: LossParts,
    pub params: BTreeMap<&'static str, BoundParams>,
}

impl StepGraph {
    pub fn value(&self, v: Var) -> f64 {
        self.tape.value(v).data()[0]
    }
}

fn g1_input(tape: &mut Tape, p: &Prepared) -> Var {
    tape.constant(p.lbp_input())
}

/// `(image, lbp, M)` with `image` and `lbp` already on the tape.
fn g2_input(tape: &mut Tape, image: Var, lbp: Var, p: &Prepared) -> Result<Var> {
    let m = tape.constant(p.mask_plane.clone());
    let x = tape.concat(image, lbp)?;
    tape.concat(x, m)
}

fn run_g1(
    tape: &mut Tape,
    g1: &Network,
    params: &BoundParams,
    input: Var,
    cfg: &TrainConfig,
) -> Result<crate::network::ForwardOutput> {
    forward(tape, &g1.spec, params, input, &[], &cfg.attention)
}

/// `D1` on the real and generated LBP maps; only `D1` is trainable.
pub fn lbp_discriminator_graph(
    g1: &Network,
    d1: &Network,
    p: &Prepared,
    cfg: &TrainConfig,
) -> Result<StepGraph> {
    let mut tape = Tape::new();
    let gp = g1.state.bind(&mut tape, false);
    let dp = d1.state.bind(&mut tape, true);
    let x = g1_input(&mut tape, p);
    let fake = run_g1(&mut tape, g1, &gp, x, cfg)?.output;
    let fake = tape.detach(fake);
    let real = tape.constant(p.lbp_gt.clone());
    let dr = forward(&mut tape, &d1.spec, &dp, real, &[], &cfg.attention)?.output;
    let df = forward(&mut tape, &d1.spec, &dp, fake, &[], &cfg.attention)?.output;
    let loss = discriminator_loss(&mut tape, dr, df)?;
    Ok(StepGraph {
        tape,
        loss,
        parts: LossParts::new(),
        params: BTreeMap::from([("g1", gp), ("d1", dp)]),
    })
}

/// `G1` objective; only `G1` is trainable.
pub fn lbp_generator_graph(
    g1: &Network,
    d1: &Network,
    p: &Prepared,
    cfg: &TrainConfig,
) -> Result<StepGraph> {
    let mut tape = Tape::new();
    let gp = g1.state.bind(&mut tape, true);
    let dp = d1.state.bind(&mut tape, false);
    let x = g1_input(&mut tape, p);
    let lbp_out = run_g1(&mut tape, g1, &gp, x, cfg)?.output;
    let lbp_gt = tape.constant(p.lbp_gt.clone());
    let mut parts = LossParts::new();
    if cfg.weights.multi_level != 0.0 {
        let frozen = g1.state.bind(&mut tape, false);
        let m = tape.constant(p.mask_plane.clone());
        let on_out = tape.concat(lbp_out, m)?;
        let on_gt = tape.concat(lbp_gt, m)?;
        let fo = run_g1(&mut tape, g1, &gp, on_out, cfg)?.features;
        let fg = run_g1(&mut tape, g1, &frozen, on_gt, cfg)?.features;
        parts.insert(
            LossTerm::MultiLevel,
            multi_level_loss(&mut tape, &fo, &fg, cfg.norm)?,
        );
    }
    parts.insert(
        LossTerm::Reconstruction,
        reconstruction_loss(&mut tape, lbp_out, lbp_gt, cfg.norm)?,
    );
    let df = forward(&mut tape, &d1.spec, &dp, lbp_out, &[], &cfg.attention)?.output;
    parts.insert(
        LossTerm::Adversarial,
        generator_adversarial_loss(&mut tape, df)?,
    );
    let loss = weighted_total(&mut tape, &parts, &cfg.weights, Objective::LbpStage)?;
    Ok(StepGraph {
        tape,
        loss,
        parts,
        params: BTreeMap::from([("g1", gp), ("d1", dp)]),
    })
}

/// `D2` on the real and generated images; only `D2` is trainable.
pub fn joint_discriminator_graph(
    g1: &Network,
    g2: &Network,
    d2: &Network,
    p: &Prepared,
    cfg: &TrainConfig,
) -> Result<StepGraph> {
    let mut tape = Tape::new();
    let g1p = g1.state.bind(&mut tape, false);
    let g2p = g2.state.bind(&mut tape, false);
    let dp = d2.state.bind(&mut tape, true);
    let x = g1_input(&mut tape, p);
    let lbp = run_g1(&mut tape, g1, &g1p, x, cfg)?.output;
    let img = tape.constant(p.image_in.clone());
    let x2 = g2_input(&mut tape, img, lbp, p)?;
    let fake = forward(
        &mut tape,
        &g2.spec,
        &g2p,
        x2,
        g2.masks(&p.mask),
        &cfg.attention,
    )?
    .output;
    let fake = tape.detach(fake);
    let real = tape.constant(p.image_gt.clone());
    let dr = forward(&mut tape, &d2.spec, &dp, real, &[], &cfg.attention)?.output;
    let df = forward(&mut tape, &d2.spec, &dp, fake, &[], &cfg.attention)?.output;
    let loss = discriminator_loss(&mut tape, dr, df)?;
    Ok(StepGraph {
        tape,
        loss,
        parts: LossParts::new(),
        params: BTreeMap::from([("g1", g1p), ("g2", g2p), ("d2", dp)]),
    })
}

/// Joint `G1`/`G2` objective; both generators are trainable, `D2` is not.
pub fn joint_generator_graph(
    g1: &Network,
    g2: &Network,
    d2: &Network,
    extractor: &dyn FeatureExtractor,
    p: &Prepared,
    cfg: &TrainConfig,
) -> Result<StepGraph> {
    let mut tape = Tape::new();
    let g1p = g1.state.bind(&mut tape, true);
    let g2p = g2.state.bind(&mut tape, true);
    let dp = d2.state.bind(&mut tape, false);
    let masks = g2.masks(&p.mask);
    let x = g1_input(&mut tape, p);
    let lbp = run_g1(&mut tape, g1, &g1p, x, cfg)?.output;
    let img_in = tape.constant(p.image_in.clone());
    let x2 = g2_input(&mut tape, img_in, lbp, p)?;
    let out = forward(&mut tape, &g2.spec, &g2p, x2, masks, &cfg.attention)?.output;
    let gt = tape.constant(p.image_gt.clone());
    let mut parts = LossParts::new();
    if cfg.weights.multi_level != 0.0 {
        let frozen = g2.state.bind(&mut tape, false);
        let lbp_fixed = tape.detach(lbp);
        let on_out = g2_input(&mut tape, out, lbp_fixed, p)?;
        let on_gt = g2_input(&mut tape, gt, lbp_fixed, p)?;
        let fo = forward(&mut tape, &g2.spec, &g2p, on_out, masks, &cfg.attention)?.features;
        let fg = forward(&mut tape, &g2.spec, &frozen, on_gt, masks, &cfg.attention)?.features;
        parts.insert(
            LossTerm::MultiLevel,
            multi_level_loss(&mut tape, &fo, &fg, cfg.norm)?,
        );
    }
    parts.insert(
        LossTerm::Reconstruction,
        reconstruction_loss(&mut tape, out, gt, cfg.norm)?,
    );
    let df = forward(&mut tape, &d2.spec, &dp, out, &[], &cfg.attention)?.output;
    parts.insert(
        LossTerm::Adversarial,
        generator_adversarial_loss(&mut tape, df)?,
    );
    parts.insert(
        LossTerm::Perceptual,
        perceptual_loss(&mut tape, out, gt, extractor, cfg.norm)?,
    );
    parts.insert(
        LossTerm::Style,
        style_loss(&mut tape, out, gt, extractor, cfg.norm)?,
    );
    let loss = weighted_total(&mut tape, &parts, &cfg.weights, Objective::InpaintStage)?;
    Ok(StepGraph {
        tape,
        loss,
        parts,
        params: BTreeMap::from([("g1", g1p), ("g2", g2p), ("d2", dp)]),
    })
}

fn trace_columns(objective: Objective, weights: &LossWeights) -> Vec<String> {
    let mut cols = vec!["d".to_string()];
    for &t in objective.terms() {
        if t == LossTerm::MultiLevel && weights.multi_level == 0.0 {
            continue;
        }
        cols.push(t.key().to_string());
    }
    cols.push("g".to_string());
    cols
}

/// Sums of per-sample gradients and loss values over one batch.
#[derive(Default)]
struct Accumulator {
    grads: BTreeMap<&'static str, BTreeMap<String, Tensor>>,
    values: BTreeMap<String, f64>,
}

impl Accumulator {
    fn add_value(&mut self, key: &str, v: f64) {
        *self.values.entry(key.to_string()).or_insert(0.0) += v;
    }

    fn add_grads(&mut self, graph: &StepGraph, nets: &[&'static str]) {
        for &n in nets {
            let acc = self.grads.entry(n).or_default();
            for (k, g) in graph.params[n].grads(&graph.tape) {
                match acc.get_mut(&k) {
                    Some(a) => a
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b),
                    None => {
                        acc.insert(k, g);
                    }
                }
            }
        }
    }

    /// Divide everything by the batch size.
    fn finish(mut self, batch: usize) -> Self {
        let s = 1.0 / batch as f64;
        for g in self.grads.values_mut().flat_map(|m| m.values_mut()) {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        for v in self.values.values_mut() {
            *v *= s;
        }
        self
    }
}

fn record_generator(acc: &mut Accumulator, graph: &StepGraph) {
    for (t, &v) in &graph.parts {
        acc.add_value(t.key(), graph.value(v));
    }
    acc.add_value("g", graph.value(graph.loss));
}

fn abort(
    iteration: usize,
    err: Error,
    save: impl FnOnce(&Path) -> Result<()>,
    cfg: &TrainConfig,
) -> Error {
    match err {
        Error::NonFinite(what) => {
            let saved = match &cfg.checkpoint_dir {
                Some(dir) => {
                    let diag = dir.join("diagnostic");
                    match std::fs::create_dir_all(&diag)
                        .map_err(Error::from)
                        .and_then(|_| save(&diag))
                    {
                        Ok(()) => format!("; diagnostic checkpoint in {}", diag.display()),
                        Err(e) => format!("; diagnostic checkpoint failed: {e}"),
                    }
                }
                None => String::new(),
            };
            Error::Training {
                iteration,
                reason: format!("non-finite value in {what}{saved}"),
            }
        }
        other => other,
    }
}

const STAGE2_INDEX_OFFSET: u64 = 1 << 40;

pub const G1_FILE: &str = "g1.lbpi";
pub const D1_FILE: &str = "d1.lbpi";
pub const G2_FILE: &str = "g2.lbpi";
pub const D2_FILE: &str = "d2.lbpi";
pub const STAGE1_TRACE: &str = "stage1_trace.csv";
pub const STAGE2_TRACE: &str = "stage2_trace.csv";

/// Stage-one state; `iteration` counts completed iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct LbpStage {
    pub g1: Network,
    pub d1: Network,
    pub iteration: usize,
    pub trace: LossTrace,
}

impl LbpStage {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(LbpStage {
            g1: Network::init(
                generator_spec(&cfg.generator_options(Role::Lbp))?,
                mix_seed(cfg.seed, 0x6731),
            )?,
            d1: Network::init(
                discriminator_spec(&cfg.discriminator_options(1))?,
                mix_seed(cfg.seed, 0x6431),
            )?,
            iteration: 0,
            trace: LossTrace::new(trace_columns(Objective::LbpStage, &cfg.weights)),
        })
    }

    pub fn step(&mut self, data: &dyn SampleSource, cfg: &TrainConfig) -> Result<()> {
        let it = self.iteration;
        self.try_step(data, cfg)
            .map_err(|e| abort(it, e, |dir| self.save(dir), cfg))
    }

    fn try_step(&mut self, data: &dyn SampleSource, cfg: &TrainConfig) -> Result<()> {
        let samples = batch_samples(data, self.iteration, 0, cfg)?;
        let mut acc = Accumulator::default();
        for p in &samples {
            let mut g = lbp_discriminator_graph(&self.g1, &self.d1, p, cfg)?;
            g.tape.backward(g.loss)?;
            acc.add_value("d", g.value(g.loss));
            acc.add_grads(&g, &["d1"]);
        }
        let acc = acc.finish(cfg.batch);
        adam_step(
            &mut self.d1.state,
            &acc.grads["d1"],
            &mut self.d1.adam,
            &cfg.adam,
        )?;
        let d_value = acc.values["d"];

        let mut acc = Accumulator::default();
        for p in &samples {
            let mut g = lbp_generator_graph(&self.g1, &self.d1, p, cfg)?;
            g.tape.backward(g.loss)?;
            record_generator(&mut acc, &g);
            acc.add_grads(&g, &["g1"]);
        }
        let mut acc = acc.finish(cfg.batch);
        adam_step(
            &mut self.g1.state,
            &acc.grads["g1"],
            &mut self.g1.adam,
            &cfg.adam,
        )?;
        acc.values.insert("d".into(), d_value);
        self.finish_iteration(acc.values, cfg)
    }

    fn finish_iteration(&mut self, values: BTreeMap<String, f64>, cfg: &TrainConfig) -> Result<()> {
        let row = self.trace.columns().iter().map(|c| values[c]).collect();
        self.trace.push(self.iteration, row)?;
        self.iteration += 1;
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && self.iteration % cfg.checkpoint_every == 0 {
                self.save(dir)?;
            }
        }
        Ok(())
    }

    /// Step until `until` iterations have completed, then save if a
    /// checkpoint directory is configured.
    pub fn run(&mut self, data: &dyn SampleSource, cfg: &TrainConfig, until: usize) -> Result<()> {
        while self.iteration < until {
            self.step(data, cfg)?;
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            self.save(dir)?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.g1.save(&dir.join(G1_FILE), self.iteration)?;
        self.d1.save(&dir.join(D1_FILE), self.iteration)?;
        std::fs::write(dir.join(STAGE1_TRACE), self.trace.to_csv())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (g1, it) = Network::load(&dir.join(G1_FILE))?;
        let (d1, _) = Network::load(&dir.join(D1_FILE))?;
        let trace = LossTrace::from_csv(&std::fs::read_to_string(dir.join(STAGE1_TRACE))?)?;
        Ok(LbpStage {
            g1,
            d1,
            iteration: it.unwrap_or(trace.len()),
            trace,
        })
    }
}

/// Stage-two state.
#[derive(Clone, Debug, PartialEq)]
pub struct JointStage {
    pub g1: Network,
    pub g2: Network,
    pub d2: Network,
    pub iteration: usize,
    pub trace: LossTrace,
    pub extractor: ConvFeatureExtractor,
}

impl JointStage {
    /// Starts from a stage-one (or fresh) `G1` with a reset optimizer.
    pub fn new(mut g1: Network, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        g1.adam = AdamState::default();
        Ok(JointStage {
            g1,
            g2: Network::init(
                generator_spec(&cfg.generator_options(Role::Inpaint))?,
                mix_seed(cfg.seed, 0x6732),
            )?,
            d2: Network::init(
                discriminator_spec(&cfg.discriminator_options(3))?,
                mix_seed(cfg.seed, 0x6432),
            )?,
            iteration: 0,
            trace: LossTrace::new(trace_columns(Objective::InpaintStage, &cfg.weights)),
            extractor: ConvFeatureExtractor::desk_default(3),
        })
    }

    pub fn step(&mut self, data: &dyn SampleSource, cfg: &TrainConfig) -> Result<()> {
        let it = self.iteration;
        self.try_step(data, cfg)
            .map_err(|e| abort(it, e, |dir| self.save(dir), cfg))
    }

    fn try_step(&mut self, data: &dyn SampleSource, cfg: &TrainConfig) -> Result<()> {
        let samples = batch_samples(data, self.iteration, STAGE2_INDEX_OFFSET, cfg)?;
        let mut acc = Accumulator::default();
        for p in &samples {
            let mut g = joint_discriminator_graph(&self.g1, &self.g2, &self.d2, p, cfg)?;
            acc.add_value("d", g.value(g.loss));
            if !cfg.freeze_discriminator {
                g.tape.backward(g.loss)?;
                acc.add_grads(&g, &["d2"]);
            }
        }
        let acc = acc.finish(cfg.batch);
        if !cfg.freeze_discriminator {
            adam_step(
                &mut self.d2.state,
                &acc.grads["d2"],
                &mut self.d2.adam,
                &cfg.adam,
            )?;
        }
        let d_value = acc.values["d"];

        let mut acc = Accumulator::default();
        for p in &samples {
            let mut g =
                joint_generator_graph(&self.g1, &self.g2, &self.d2, &self.extractor, p, cfg)?;
            g.tape.backward(g.loss)?;
            record_generator(&mut acc, &g);
            acc.add_grads(&g, &["g1", "g2"]);
        }
        let mut acc = acc.finish(cfg.batch);
        adam_step(
            &mut self.g1.state,
            &acc.grads["g1"],
            &mut self.g1.adam,
            &cfg.adam,
        )?;
        adam_step(
            &mut self.g2.state,
            &acc.grads["g2"],
            &mut self.g2.adam,
            &cfg.adam,
        )?;
        acc.values.insert("d".into(), d_value);

        let row = self.trace.columns().iter().map(|c| acc.values[c]).collect();
        self.trace.push(self.iteration, row)?;
        self.iteration += 1;
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && self.iteration % cfg.checkpoint_every == 0 {
                self.save(dir)?;
            }
        }
        Ok(())
    }

    pub fn run(&mut self, data: &dyn SampleSource, cfg: &TrainConfig, until: usize) -> Result<()> {
        while self.iteration < until {
            self.step(data, cfg)?;
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            self.save(dir)?;
        }
        Ok(())
    }

    /// Writes `g1`, `g2`, `d2` and the stage-two trace. The stage-one files
    /// for `g1` are overwritten.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.g1.save(&dir.join(G1_FILE), self.iteration)?;
        self.g2.save(&dir.join(G2_FILE), self.iteration)?;
        self.d2.save(&dir.join(D2_FILE), self.iteration)?;
        std::fs::write(dir.join(STAGE2_TRACE), self.trace.to_csv())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (g1, _) = Network::load(&dir.join(G1_FILE))?;
        let (g2, it) = Network::load(&dir.join(G2_FILE))?;
        let (d2, _) = Network::load(&dir.join(D2_FILE))?;
        let trace = LossTrace::from_csv(&std::fs::read_to_string(dir.join(STAGE2_TRACE))?)?;
        Ok(JointStage {
            g1,
            g2,
            d2,
            iteration: it.unwrap_or(trace.len()),
            trace,
            extractor: ConvFeatureExtractor::desk_default(3),
        })
    }
}

fn batch_samples(
    data: &dyn SampleSource,
    iteration: usize,
    offset: u64,
    cfg: &TrainConfig,
) -> Result<Vec<Prepared>> {
    (0..cfg.batch)
        .map(|b| {
            let index = offset + (iteration * cfg.batch + b) as u64;
            let s = data.sample(index)?;
            if s.image.width() != cfg.image_size || s.image.height() != cfg.image_size {
                return Err(Error::invalid(format!(
                    "sample {index} is {}x{}, training expects {}x{}",
                    s.image.width(),
                    s.image.height(),
                    cfg.image_size,
                    cfg.image_size
                )));
            }
            Prepared::new(&s)
        })
        .collect()
}

pub fn train_lbp_stage(data: &dyn SampleSource, cfg: &TrainConfig) -> Result<LbpStage> {
    let mut stage = LbpStage::new(cfg)?;
    stage.run(data, cfg, cfg.iters_stage1)?;
    Ok(stage)
}

pub fn train_joint_stage(
    data: &dyn SampleSource,
    g1: Network,
    cfg: &TrainConfig,
) -> Result<JointStage> {
    let mut stage = JointStage::new(g1, cfg)?;
    stage.run(data, cfg, cfg.iters_stage2)?;
    Ok(stage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{MaskPolicy, SyntheticTextures};

    fn tiny() -> TrainConfig {
        let depth = 3;
        TrainConfig {
            depth,
            width_scale: WidthScale { num: 1, den: 16 },
            image_size: 32,
            attention: AttentionConfig {
                layer_index: default_attention_layer(depth),
                ..AttentionConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn source() -> SyntheticTextures {
        SyntheticTextures {
            size: 32,
            seed: 9,
            mask: MaskPolicy::Centering { side: 8 },
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let spec = discriminator_spec(&DiscriminatorOptions::new(
            1,
            WidthScale { num: 1, den: 16 },
        ))
        .unwrap();
        let mut state = ModelState::init(&spec, 1).unwrap();
        let before = state.clone();
        let grads = state
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        let mut st = AdamState::default();
        for _ in 0..3 {
            adam_step(&mut state, &grads, &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(state, before);
        assert_eq!(st.step, 3);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let spec = discriminator_spec(&DiscriminatorOptions::new(
            1,
            WidthScale { num: 1, den: 16 },
        ))
        .unwrap();
        let mut state = ModelState::init(&spec, 1).unwrap();
        let before = state.clone();
        let grads: BTreeMap<_, _> = state
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::full(t.shape(), -0.3)))
            .collect();
        let cfg = AdamConfig::default();
        adam_step(&mut state, &grads, &mut AdamState::default(), &cfg).unwrap();
        for (k, t) in state.iter() {
            for (a, b) in t.data().iter().zip(before.get(k).unwrap().data()) {
                let expect = cfg.lr * 0.3 / (0.3 + cfg.eps);
                assert!((a - b - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn adam_names_non_finite_parameter() {
        let spec = discriminator_spec(&DiscriminatorOptions::new(
            1,
            WidthScale { num: 1, den: 16 },
        ))
        .unwrap();
        let mut state = ModelState::init(&spec, 1).unwrap();
        let before = state.clone();
        let mut grads: BTreeMap<_, _> = state
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        grads.get_mut("layer03.conv.bias").unwrap().data_mut()[0] = f64::NAN;
        match adam_step(
            &mut state,
            &grads,
            &mut AdamState::default(),
            &AdamConfig::default(),
        ) {
            Err(Error::NonFinite(m)) => assert!(m.contains("layer03.conv.bias")),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(state, before);
    }

    #[test]
    fn zero_iterations_leave_init() {
        let mut cfg = tiny();
        cfg.iters_stage1 = 0;
        let s = train_lbp_stage(&source(), &cfg).unwrap();
        assert!(s.trace.is_empty());
        assert_eq!(s, LbpStage::new(&cfg).unwrap());
    }

    #[test]
    fn generator_loss_leaves_discriminator_alone() {
        let cfg = tiny();
        let stage = LbpStage::new(&cfg).unwrap();
        let p = Prepared::new(&source().sample(0).unwrap()).unwrap();
        let mut g = lbp_generator_graph(&stage.g1, &stage.d1, &p, &cfg).unwrap();
        g.tape.backward(g.loss).unwrap();
        assert!(g.params["d1"]
            .iter()
            .all(|(_, &v)| g.tape.grad(v).is_none()));
        assert!(g.params["g1"]
            .iter()
            .any(|(_, &v)| g.tape.grad(v).is_some()));
        let mut d = lbp_discriminator_graph(&stage.g1, &stage.d1, &p, &cfg).unwrap();
        d.tape.backward(d.loss).unwrap();
        assert!(d.params["g1"]
            .iter()
            .all(|(_, &v)| d.tape.grad(v).is_none()));
    }

    #[test]
    fn trace_columns_follow_weights() {
        let w = LossWeights::default();
        assert_eq!(
            trace_columns(Objective::LbpStage, &w),
            ["d", "m", "r", "a", "g"]
        );
        let w = LossWeights {
            multi_level: 0.0,
            ..w
        };
        assert_eq!(
            trace_columns(Objective::InpaintStage, &w),
            ["d", "r", "a", "p", "s", "g"]
        );
    }

    #[test]
    fn trace_csv_round_trip() {
        let mut t = LossTrace::new(vec!["d".into(), "r".into()]);
        t.push(0, vec![0.1 + 0.2, 1e-300]).unwrap();
        t.push(1, vec![std::f64::consts::PI, 3.0]).unwrap();
        assert_eq!(LossTrace::from_csv(&t.to_csv()).unwrap(), t);
        assert!(t.push(2, vec![1.0]).is_err());
    }

    #[test]
    fn window_means_of_ramp() {
        let v: Vec<f64> = (0..10).map(f64::from).collect();
        assert_eq!(window_means(&v, 2), Some((0.5, 8.5)));
        assert_eq!(window_means(&v, 11), None);
    }

    #[test]
    fn config_rejects_misplaced_attention() {
        let mut cfg = TrainConfig::desk();
        cfg.validate().unwrap();
        cfg.attention.layer_index = 13;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.attention_enabled = false;
        cfg.validate().unwrap();
        let mut cfg = TrainConfig::desk();
        cfg.image_size = 48;
        assert!(cfg.validate().is_err());
    }
}
