//! Classification and segmentation metrics on synthetic scores and masks.
//!
//!     cargo run --release --example metrics_roc

use margin_ffcl::metrics::{auc, classification_report, dsc, hausdorff, roc_csv, trapezoid_area};
use margin_ffcl::raster::BinaryMask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels: Vec<bool> = (0..400).map(|i| i % 5 == 0).collect();
    let scores: Vec<f64> = labels
        .iter()
        .map(|&y| (rng.random_range(0.0..1.0f64) + if y { 0.6 } else { 0.0 }).min(1.0))
        .collect();

    let path = std::env::temp_dir().join("margin_roc.csv");
    let roc = roc_csv(&scores, &labels, &path)?;
    println!("AUC {:.4}, trapezoid area {:.4}, {} ROC points -> {}", auc(&scores, &labels)?, trapezoid_area(&roc), roc.len(), path.display());
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    for t in [0.3, 0.5, 0.7] {
        let r = classification_report(&scores, &labels, t)?;
        println!(
            "threshold {t}: accuracy {:.3} precision {} recall {} f1 {}",
            r.metrics.accuracy,
            opt(r.metrics.precision),
            opt(r.metrics.recall),
            opt(r.metrics.f1)
        );
    }

    let disk = |cy: f64, cx: f64, rad: f64| BinaryMask::from_fn(64, 64, |r, c| (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2) <= rad * rad);
    let truth = disk(32.0, 32.0, 12.0);
    for (name, pred) in [("same", disk(32.0, 32.0, 12.0)), ("shifted", disk(35.0, 30.0, 12.0)), ("smaller", disk(32.0, 32.0, 8.0))] {
        println!("{name:<8} DSC {:.4}  HD {:.2}", dsc(&pred, &truth)?, hausdorff(&pred, &truth)?);
    }
    Ok(())
}
