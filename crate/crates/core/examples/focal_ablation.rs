//! Fine-tuning the same initialisation under a grid of focal-loss settings.
//!
//!     cargo run --release --example focal_ablation

use margin_ffcl::ffcl::{finetune, predict_probabilities, FocalParams, TrainConfig};
use margin_ffcl::metrics::auc;
use margin_ffcl::model::{build_model, ModelConfig};
use margin_ffcl::patchflow::{extract_patches, ClassPolicy, NegativeStrides, PatchRecord, PatchSpec, Split};
use margin_ffcl::phantom::{generate_sample, PhantomConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = PhantomConfig {
        image_size: 256,
        tumor_radius: [36.0, 52.0],
        margin_present: 1.0,
        seed: 2,
        ..PhantomConfig::default()
    };
    let spec = PatchSpec {
        stride_positive: 16,
        stride_negative: NegativeStrides { train: 20, val: 24, test: 24 },
        ..PatchSpec::default()
    };
    let split = |range: std::ops::Range<u64>, s: Split| -> Result<Vec<PatchRecord>, Box<dyn std::error::Error>> {
        let mut out = Vec::new();
        for i in range {
            let smp = generate_sample(&cfg, i)?;
            out.extend(extract_patches(&smp.image, &smp.mask, &spec, s, ClassPolicy::Both)?);
        }
        Ok(out)
    };
    let (train, val, test) = (split(0..10, Split::Train)?, split(10..13, Split::Val)?, split(13..16, Split::Test)?);
    let xs: Vec<_> = test.iter().map(|p| &p.pixels).collect();
    let labels: Vec<bool> = test.iter().map(|p| p.label == 1).collect();

    let mcfg = ModelConfig {
        base_channels: 4,
        embedding_dim: 16,
        seed: 2,
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        epochs: 3,
        lr0: 1e-3,
        seed: 2,
        max_batches_per_epoch: Some(15),
        ..TrainConfig::default()
    };
    println!("alpha gamma  best_epoch  val_loss  test_auc");
    for alpha in [0.25, 0.5, 0.8] {
        for gamma in [0.0, 1.0, 3.0] {
            let mut m = build_model(&mcfg)?;
            let out = finetune(&mut m, &train, &val, &FocalParams { alpha, gamma }, &tcfg)?;
            let a = auc(&predict_probabilities(&m, &xs)?, &labels)?;
            println!("{alpha:<5} {gamma:<5}  {:<10}  {:.4}    {a:.4}", out.best_epoch, out.best_val_loss);
        }
    }
    Ok(())
}
