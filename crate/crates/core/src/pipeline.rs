//! Inference: predict the LBP map, run the inpainting generator and paste
//! the result into the hole.

use crate::attention::AttentionConfig;
use crate::data::{Prepared, Sample};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::lbp::{decode_plane, LbpMap};
use crate::mask::Mask;
use crate::network::{forward_eval, ModelState, NetworkSpec, Role};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Inpainter {
    pub g1_spec: NetworkSpec,
    pub g1: ModelState,
    pub g2_spec: NetworkSpec,
    pub g2: ModelState,
    pub attention: AttentionConfig,
}

#[derive(Clone, Debug)]
pub struct Inpainting {
    pub lbp: LbpMap,
    /// Generator output over the whole frame.
    pub raw: RgbImage,
    /// Known pixels from the input, hole pixels from `raw`.
    pub composite: RgbImage,
}

impl Inpainter {
    pub fn new(
        g1_spec: NetworkSpec,
        g1: ModelState,
        g2_spec: NetworkSpec,
        g2: ModelState,
        attention: AttentionConfig,
    ) -> Result<Self> {
        if g1_spec.role != Some(Role::Lbp) || g2_spec.role != Some(Role::Inpaint) {
            return Err(Error::Network(
                "expected an LBP generator and an inpainting generator".into(),
            ));
        }
        g1.validate_against(&g1_spec)?;
        g2.validate_against(&g2_spec)?;
        Ok(Inpainter {
            g1_spec,
            g1,
            g2_spec,
            g2,
            attention,
        })
    }

    pub fn run(&self, image: &RgbImage, mask: &Mask) -> Result<Inpainting> {
        let p = Prepared::new(&Sample {
            image: image.clone(),
            mask: mask.clone(),
        })?;
        let lbp = forward_eval(
            &self.g1_spec,
            &self.g1,
            &p.lbp_input(),
            &[],
            &self.attention,
        )?;
        let x = Tensor::concat_channels(&p.image_in, &lbp)?;
        let x = Tensor::concat_channels(&x, &p.mask_plane)?;
        let masks = if self.g2_spec.attention_layer().is_some() {
            std::slice::from_ref(mask)
        } else {
            &[]
        };
        let out = forward_eval(&self.g2_spec, &self.g2, &x, masks, &self.attention)?;
        let raw = RgbImage::from_tensor(&out, 0)?;
        Ok(Inpainting {
            lbp: decode_plane(&lbp, 0, 0),
            composite: composite(image, &raw, mask)?,
            raw,
        })
    }
}

/// Known pixels from `known`, missing pixels from `generated`.
pub fn composite(known: &RgbImage, generated: &RgbImage, mask: &Mask) -> Result<RgbImage> {
    let (w, h) = (known.width(), known.height());
    if generated.width() != w || generated.height() != h || mask.width() != w || mask.height() != h
    {
        return Err(Error::invalid(format!(
            "composite: image {w}x{h}, generated {}x{}, mask {}x{}",
            generated.width(),
            generated.height(),
            mask.width(),
            mask.height()
        )));
    }
    Ok(RgbImage::from_fn(w, h, |x, y| {
        if mask.is_known(x, y) {
            known.get(x, y)
        } else {
            generated.get(x, y)
        }
    }))
}

/// Hole filled with the per-channel mean of the known region.
pub fn mean_fill(image: &RgbImage, mask: &Mask) -> Result<RgbImage> {
    let (mut sum, mut n) = ([0u64; 3], 0u64);
    for y in 0..image.height() {
        for x in 0..image.width() {
            if mask.is_known(x, y) {
                let px = image.get(x, y);
                for c in 0..3 {
                    sum[c] += px[c] as u64;
                }
                n += 1;
            }
        }
    }
    let mean = sum.map(|s| ((s as f64) / (n as f64)).round() as u8);
    let fill = RgbImage::from_fn(image.width(), image.height(), |_, _| mean);
    composite(image, &fill, mask)
}
