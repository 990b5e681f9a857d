//! Local and global contrastive pretraining followed by focal fine-tuning on
//! phantom patches, compared with fine-tuning alone.
//!
//!     cargo run --release --example ffcl_training

use margin_ffcl::ffcl::{finetune, predict_probabilities, pretrain_global, pretrain_local, FocalParams, TrainConfig};
use margin_ffcl::metrics::auc;
use margin_ffcl::model::{build_model, save_checkpoint, Model, ModelConfig, Stage};
use margin_ffcl::patchflow::{extract_patches, ClassPolicy, NegativeStrides, PatchRecord, PatchSpec, Split};
use margin_ffcl::phantom::{generate_sample, PhantomConfig};

fn patches(cfg: &PhantomConfig, range: std::ops::Range<u64>, split: Split) -> Result<Vec<PatchRecord>, Box<dyn std::error::Error>> {
    let spec = PatchSpec {
        stride_positive: 12,
        stride_negative: NegativeStrides { train: 16, val: 24, test: 24 },
        ..PatchSpec::default()
    };
    let mut out = Vec::new();
    for i in range {
        let s = generate_sample(cfg, i)?;
        out.extend(extract_patches(&s.image, &s.mask, &spec, split, ClassPolicy::Both)?);
    }
    Ok(out)
}

fn test_auc(model: &Model, test: &[PatchRecord]) -> Result<f64, Box<dyn std::error::Error>> {
    let xs: Vec<_> = test.iter().map(|p| &p.pixels).collect();
    let scores = predict_probabilities(model, &xs)?;
    let labels: Vec<bool> = test.iter().map(|p| p.label == 1).collect();
    Ok(auc(&scores, &labels)?)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = 0;
    let cfg = PhantomConfig {
        image_size: 256,
        tumor_radius: [36.0, 52.0],
        seed,
        ..PhantomConfig::default()
    };
    let held_out = PhantomConfig { margin_present: 1.0, ..cfg.clone() };
    let train = patches(&cfg, 0..20, Split::Train)?;
    let val = patches(&held_out, 20..25, Split::Val)?;
    let test = patches(&held_out, 25..30, Split::Test)?;
    println!("patches: {} train, {} val, {} test", train.len(), val.len(), test.len());

    let mcfg = ModelConfig {
        base_channels: 8,
        embedding_dim: 32,
        seed,
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        epochs: 5,
        lr0: 1e-3,
        seed,
        max_batches_per_epoch: Some(30),
        ..TrainConfig::default()
    };
    let pre = TrainConfig { epochs: 3, ..tcfg.clone() };
    let fp = FocalParams::default();

    let mut model = build_model(&mcfg)?;
    for stage in [pretrain_local(&mut model, &train, &pre)?, pretrain_global(&mut model, &train, &pre)?] {
        for row in &stage.rows {
            println!("{:<8} epoch {} loss {:.4} lr {:.2e}", row.stage, row.epoch, row.train_loss, row.lr);
        }
    }
    let outcome = finetune(&mut model, &train, &val, &fp, &tcfg)?;
    println!(
        "finetune: best epoch {} of {}, val loss {:.3e}",
        outcome.best_epoch, outcome.epochs_run, outcome.best_val_loss
    );

    let mut baseline = build_model(&mcfg)?;
    finetune(&mut baseline, &train, &val, &fp, &tcfg)?;
    println!(
        "test AUC: pretrained {:.4}, finetune only {:.4}",
        test_auc(&model, &test)?,
        test_auc(&baseline, &test)?
    );

    let path = std::env::temp_dir().join("margin_ffcl_example.ckpt");
    save_checkpoint(&model, Stage::Finetuned, &path)?;
    println!("checkpoint {}", path.display());
    Ok(())
}
