//! Two-stage refinement of a blocky coarse mask with the local backend.
//!
//!     cargo run --release --example refine_morphological

use margin_ffcl::metrics::{dsc, hausdorff, pixel_accuracy};
use margin_ffcl::patchflow::{reconstruct_coarse_mask, window_labels, Aggregation};
use margin_ffcl::phantom::{generate_sample, PhantomConfig};
use margin_ffcl::refinement::{refine, RefinementConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = PhantomConfig {
        margin_present: 1.0,
        seed: 4,
        ..PhantomConfig::default()
    };
    let refine_cfg = RefinementConfig::default();
    for i in 0..4 {
        let s = generate_sample(&cfg, i)?;
        let truth = s.mask.select(&[2, 3]);
        // Stand-in for classifier output: the lesion painted back from 64-px windows.
        let windows = window_labels(&truth, 64, 12, 0.5);
        let coarse = reconstruct_coarse_mask(&windows, truth.dims(), 64, Aggregation::default())?;
        if coarse.is_empty() {
            println!("sample {i}: empty coarse mask, skipped");
            continue;
        }
        let r = refine(&s.image, &coarse, &refine_cfg)?;
        println!(
            "sample {i}: box {:?}  DSC {:.3} -> {:.3}  HD {:.1} -> {:.1}  acc {:.4} -> {:.4}  ({:.1} + {:.1} ms)",
            r.bbox.as_array(),
            dsc(&coarse, &truth)?,
            dsc(&r.m2, &truth)?,
            hausdorff(&coarse, &truth)?,
            hausdorff(&r.m2, &truth)?,
            pixel_accuracy(&coarse, &truth)?,
            pixel_accuracy(&r.m2, &truth)?,
            r.latency_ms[0],
            r.latency_ms[1]
        );
    }
    Ok(())
}
