//! Patch extraction and reconstruction. With ground-truth window labels the
//! dense reconstruction recovers the patch-resolution truth; coarser strides
//! lose detail.
//!
//!     cargo run --release --example patch_roundtrip

use margin_ffcl::metrics::dsc;
use margin_ffcl::patchflow::{
    extract_patches, patch_quantized_truth, reconstruct_coarse_mask, window_labels, Aggregation, ClassPolicy, PatchSpec, Split,
};
use margin_ffcl::phantom::{generate_sample, PhantomConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = PhantomConfig {
        margin_present: 1.0,
        seed: 9,
        ..PhantomConfig::default()
    };
    let sample = generate_sample(&cfg, 0)?;
    let spec = PatchSpec::default();

    for split in Split::ALL {
        let patches = extract_patches(&sample.image, &sample.mask, &spec, split, ClassPolicy::Both)?;
        let pos = patches.iter().filter(|p| p.label == 1).count();
        println!("{split:?}: {} patches, {pos} positive", patches.len());
    }

    let truth = sample.mask.select(&[2, 3]);
    let agg = Aggregation::MeanVote { threshold: 0.5 };
    let quantized = patch_quantized_truth(&truth, spec.patch_size, spec.label_fraction, agg)?;
    println!("lesion {} px, patch-resolution truth {} px", truth.count_ones(), quantized.count_ones());
    for stride in [2, 4, 8, 16, 32] {
        let windows = window_labels(&truth, spec.patch_size, stride, spec.label_fraction);
        let rebuilt = reconstruct_coarse_mask(&windows, truth.dims(), spec.patch_size, agg)?;
        println!(
            "stride {stride:>2}: {:>6} windows  DSC vs quantized {:.4}  vs truth {:.4}",
            windows.len(),
            dsc(&rebuilt, &quantized)?,
            dsc(&rebuilt, &truth)?
        );
    }
    Ok(())
}
