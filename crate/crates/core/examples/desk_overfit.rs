use std::time::Instant;

use lbp_inpaint::data::{MaskPolicy, Repeated, SampleSource, SyntheticTextures};
use lbp_inpaint::image::RgbImage;
use lbp_inpaint::mask::centering_mask;
use lbp_inpaint::metrics::{psnr_in, Scope};
use lbp_inpaint::pipeline::{mean_fill, Inpainter};
use lbp_inpaint::train::{train_joint_stage, train_lbp_stage, window_means, TrainConfig};

fn main() {
    let cfg = TrainConfig::desk();
    let src = SyntheticTextures {
        size: 64,
        seed: 7,
        mask: MaskPolicy::Centering { side: 16 },
    };
    let sample = src.sample(0).unwrap();
    let data = Repeated(sample.clone());
    let t = Instant::now();
    let s1 = train_lbp_stage(&data, &cfg).unwrap();
    println!(
        "stage1 {:?} r {:?}",
        t.elapsed(),
        window_means(&s1.trace.column("r").unwrap(), 50)
    );
    let t = Instant::now();
    let s2 = train_joint_stage(&data, s1.g1.clone(), &cfg).unwrap();
    println!(
        "stage2 {:?} r {:?}",
        t.elapsed(),
        window_means(&s2.trace.column("r").unwrap(), 50)
    );
    let inp = Inpainter::new(
        s2.g1.spec.clone(),
        s2.g1.state.clone(),
        s2.g2.spec.clone(),
        s2.g2.state.clone(),
        cfg.attention,
    )
    .unwrap();
    let mask = centering_mask(64, 64, 16).unwrap();
    let out = inp.run(&sample.image, &mask).unwrap();
    let base: RgbImage = mean_fill(&sample.image, &mask).unwrap();
    println!(
        "psnr {} baseline {}",
        psnr_in(&out.composite, &sample.image, Scope::Hole(&mask)).unwrap(),
        psnr_in(&base, &sample.image, Scope::Hole(&mask)).unwrap()
    );
}
