//! Dual-scope spatial attention.
//!
//! Every 1x1 feature patch inside the hole is rebuilt as a softmax-weighted
//! mean of its top-`T` cosine-similar patches from the hole itself and its
//! top-`T` from the known region. Known patches pass through untouched, and
//! all updates read the pre-update features.
//!
//! The candidate selection is piecewise constant, so it is treated as fixed
//! when differentiating; gradients flow through both the similarity weights
//! and the selected patches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::{CustomOp, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScope {
    /// Candidates from both the hole and the known region.
    Dual,
    /// Candidates from the known region only.
    KnownOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// 1-based generator layer that hosts the attention.
    pub layer_index: usize,
    pub top_count: usize,
    pub similarity_eps: f64,
    pub scope: AttentionScope,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            layer_index: 13,
            top_count: 2,
            similarity_eps: 1e-8,
            scope: AttentionScope::Dual,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_count == 0 {
            return Err(Error::invalid("attention top_count must be at least 1"));
        }
        if !(self.similarity_eps > 0.0) {
            return Err(Error::invalid("attention similarity_eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    Missing,
    Known,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchIndex {
    pub row: usize,
    pub col: usize,
    pub region: Region,
}

/// Missing/known membership of every feature position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchRegions {
    height: usize,
    width: usize,
    missing: Vec<bool>,
}

impl PatchRegions {
    pub fn new(height: usize, width: usize, missing: Vec<bool>) -> Result<Self> {
        if missing.len() != height * width {
            return Err(Error::Dimension {
                op: "PatchRegions::new",
                axis: "positions",
                expected: height * width,
                actual: missing.len(),
            });
        }
        Ok(PatchRegions {
            height,
            width,
            missing,
        })
    }

    /// Nearest-neighbour downsampling of an image-resolution mask.
    pub fn from_mask(mask: &Mask, height: usize, width: usize) -> Self {
        PatchRegions {
            height,
            width,
            missing: mask.missing_at(height, width),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_missing(&self, pos: usize) -> bool {
        self.missing[pos]
    }

    fn split(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.missing.len()).partition(|&p| self.missing[p])
    }

    fn index(&self, pos: usize) -> PatchIndex {
        PatchIndex {
            row: pos / self.width,
            col: pos % self.width,
            region: if self.missing[pos] {
                Region::Missing
            } else {
                Region::Known
            },
        }
    }
}

/// Cosine similarities of each hole patch against the hole (`intra`) and the
/// known region (`inter`), row-major with one row per hole patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub missing: Vec<PatchIndex>,
    pub known: Vec<PatchIndex>,
    pub intra: Vec<f64>,
    pub inter: Vec<f64>,
}

impl Similarity {
    pub fn intra_at(&self, j: usize, k: usize) -> f64 {
        self.intra[j * self.missing.len() + k]
    }

    pub fn inter_at(&self, j: usize, k: usize) -> f64 {
        self.inter[j * self.known.len() + k]
    }
}

/// Denominator used to normalise a patch of norm `r`; `eps` only guards
/// zero-norm patches.
fn norm_denominator(r: f64, eps: f64) -> f64 {
    if r > 0.0 {
        r
    } else {
        r + eps
    }
}

/// Unit-normalised channel vectors of sample `n`, plus their norms.
fn normalized_patches(features: &Tensor, n: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let [_, c, h, w] = features.shape();
    let hw = h * w;
    let mut unit = vec![0.0; hw * c];
    let mut norms = vec![0.0; hw];
    for p in 0..hw {
        let mut sq = 0.0;
        for ch in 0..c {
            let v = features.plane(n, ch)[p];
            sq += v * v;
        }
        let r = sq.sqrt();
        norms[p] = r;
        for ch in 0..c {
            unit[p * c + ch] = features.plane(n, ch)[p] / norm_denominator(r, eps);
        }
    }
    (unit, norms)
}

fn cosine(unit: &[f64], c: usize, a: usize, b: usize) -> f64 {
    unit[a * c..(a + 1) * c]
        .iter()
        .zip(&unit[b * c..(b + 1) * c])
        .map(|(x, y)| x * y)
        .sum()
}

fn check_regions(features: &Tensor, regions: &PatchRegions) -> Result<()> {
    if regions.height != features.height() {
        return Err(Error::Dimension {
            op: "attention",
            axis: "height",
            expected: features.height(),
            actual: regions.height,
        });
    }
    if regions.width != features.width() {
        return Err(Error::Dimension {
            op: "attention",
            axis: "width",
            expected: features.width(),
            actual: regions.width,
        });
    }
    Ok(())
}

/// Similarity matrices for sample `n` of `features`.
pub fn similarity_matrix(
    features: &Tensor,
    n: usize,
    regions: &PatchRegions,
    eps: f64,
) -> Result<Similarity> {
    check_regions(features, regions)?;
    let c = features.channels();
    let (missing, known) = regions.split();
    let (unit, _) = normalized_patches(features, n, eps);
    let mut intra = Vec::with_capacity(missing.len() * missing.len());
    let mut inter = Vec::with_capacity(missing.len() * known.len());
    for &j in &missing {
        intra.extend(missing.iter().map(|&k| cosine(&unit, c, j, k)));
        inter.extend(known.iter().map(|&k| cosine(&unit, c, j, k)));
    }
    Ok(Similarity {
        missing: missing.iter().map(|&p| regions.index(p)).collect(),
        known: known.iter().map(|&p| regions.index(p)).collect(),
        intra,
        inter,
    })
}

/// One selected source patch for a hole position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Source {
    pub position: usize,
    pub region: Region,
    pub similarity: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchUpdate {
    pub target: usize,
    pub sources: Vec<Source>,
}

/// Selected sources and softmax weights for every hole patch of every sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPlan {
    pub samples: Vec<Vec<PatchUpdate>>,
}

/// Indices of the `t` best scores; ties go to the earlier candidate.
fn top_t(scores: &[(usize, f64)], t: usize) -> Vec<(usize, f64)> {
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(t);
    ranked
}

pub fn plan(
    features: &Tensor,
    regions: &[PatchRegions],
    cfg: &AttentionConfig,
) -> Result<AttentionPlan> {
    cfg.validate()?;
    let n = features.batch();
    if regions.len() != n {
        return Err(Error::Dimension {
            op: "attention",
            axis: "batch",
            expected: n,
            actual: regions.len(),
        });
    }
    let c = features.channels();
    let mut samples = Vec::with_capacity(n);
    for (b, reg) in regions.iter().enumerate() {
        check_regions(features, reg)?;
        let (missing, known) = reg.split();
        let (unit, _) = normalized_patches(features, b, cfg.similarity_eps);
        let mut updates = Vec::with_capacity(missing.len());
        for &j in &missing {
            let mut chosen: Vec<(usize, Region, f64)> = Vec::with_capacity(2 * cfg.top_count);
            if cfg.scope == AttentionScope::Dual {
                let intra: Vec<(usize, f64)> = missing
                    .iter()
                    .filter(|&&k| k != j)
                    .map(|&k| (k, cosine(&unit, c, j, k)))
                    .collect();
                chosen.extend(
                    top_t(&intra, cfg.top_count)
                        .into_iter()
                        .map(|(k, s)| (k, Region::Missing, s)),
                );
            }
            let inter: Vec<(usize, f64)> =
                known.iter().map(|&k| (k, cosine(&unit, c, j, k))).collect();
            chosen.extend(
                top_t(&inter, cfg.top_count)
                    .into_iter()
                    .map(|(k, s)| (k, Region::Known, s)),
            );
            let z: f64 = chosen.iter().map(|(_, _, s)| s.exp()).sum();
            let sources = chosen
                .into_iter()
                .map(|(position, region, similarity)| Source {
                    position,
                    region,
                    similarity,
                    weight: similarity.exp() / z,
                })
                .collect();
            updates.push(PatchUpdate { target: j, sources });
        }
        samples.push(updates);
    }
    Ok(AttentionPlan { samples })
}

fn apply_plan(features: &Tensor, plan: &AttentionPlan) -> Tensor {
    let mut out = features.clone();
    let c = features.channels();
    for (b, updates) in plan.samples.iter().enumerate() {
        for u in updates {
            if u.sources.is_empty() {
                continue;
            }
            for ch in 0..c {
                let src = features.plane(b, ch);
                let v: f64 = u.sources.iter().map(|s| s.weight * src[s.position]).sum();
                out.plane_mut(b, ch)[u.target] = v;
            }
        }
    }
    out
}

/// Attention forward pass on plain tensors. `masks` holds one mask per
/// sample (or a single mask shared by the batch) at any resolution.
pub fn attend(features: &Tensor, masks: &[Mask], cfg: &AttentionConfig) -> Result<Tensor> {
    let regions = regions_for(features, masks)?;
    let plan = plan(features, &regions, cfg)?;
    Ok(apply_plan(features, &plan))
}

pub(crate) fn regions_for(features: &Tensor, masks: &[Mask]) -> Result<Vec<PatchRegions>> {
    let n = features.batch();
    let (h, w) = (features.height(), features.width());
    match masks.len() {
        1 => Ok(vec![PatchRegions::from_mask(&masks[0], h, w); n]),
        m if m == n => Ok(masks
            .iter()
            .map(|mk| PatchRegions::from_mask(mk, h, w))
            .collect()),
        m => Err(Error::Dimension {
            op: "attention",
            axis: "mask batch",
            expected: n,
            actual: m,
        }),
    }
}

struct AttendOp {
    plan: AttentionPlan,
    eps: f64,
}

impl CustomOp for AttendOp {
    fn name(&self) -> &'static str {
        "attend"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &Tensor,
    ) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let [_, c, h, w] = x.shape();
        let hw = h * w;
        let mut gx = grad_out.clone();
        for (b, updates) in self.plan.samples.iter().enumerate() {
            if updates.is_empty() {
                continue;
            }
            let (unit, norms) = normalized_patches(x, b, self.eps);
            let patch = |p: usize, ch: usize| x.plane(b, ch)[p];
            let mut d_unit = vec![0.0; hw * c];
            // Replaced hole positions get nothing straight through.
            for u in updates.iter().filter(|u| !u.sources.is_empty()) {
                for ch in 0..c {
                    gx.plane_mut(b, ch)[u.target] = 0.0;
                }
            }
            for u in updates.iter().filter(|u| !u.sources.is_empty()) {
                let j = u.target;
                let g: Vec<f64> = (0..c).map(|ch| grad_out.plane(b, ch)[j]).collect();
                let a: Vec<f64> = u
                    .sources
                    .iter()
                    .map(|s| (0..c).map(|ch| g[ch] * patch(s.position, ch)).sum())
                    .collect();
                let a_bar: f64 = u.sources.iter().zip(&a).map(|(s, ai)| s.weight * ai).sum();
                for (s, ai) in u.sources.iter().zip(&a) {
                    let k = s.position;
                    for ch in 0..c {
                        gx.plane_mut(b, ch)[k] += s.weight * g[ch];
                    }
                    let ds = s.weight * (ai - a_bar);
                    for ch in 0..c {
                        d_unit[j * c + ch] += ds * unit[k * c + ch];
                        d_unit[k * c + ch] += ds * unit[j * c + ch];
                    }
                }
            }
            // Back through the normalisation: (dn - <dn, u> u) / r.
            for p in 0..hw {
                let dn = &d_unit[p * c..(p + 1) * c];
                if dn.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let r = norms[p];
                let denom = norm_denominator(r, self.eps);
                let radial = if r > 0.0 {
                    (0..c).map(|ch| dn[ch] * patch(p, ch)).sum::<f64>() / (r * r * r)
                } else {
                    0.0
                };
                for ch in 0..c {
                    gx.plane_mut(b, ch)[p] += dn[ch] / denom - radial * patch(p, ch);
                }
            }
        }
        vec![Some(gx)]
    }
}

/// Records the attention layer on `tape`.
pub fn attend_on_tape(
    tape: &mut Tape,
    features: Var,
    masks: &[Mask],
    cfg: &AttentionConfig,
) -> Result<Var> {
    let x = tape.value(features);
    let regions = regions_for(x, masks)?;
    let plan = plan(x, &regions, cfg)?;
    let out = apply_plan(x, &plan);
    tape.custom(
        &[features],
        out,
        Box::new(AttendOp {
            plan,
            eps: cfg.similarity_eps,
        }),
    )
}
