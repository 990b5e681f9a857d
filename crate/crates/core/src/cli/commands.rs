use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::ffcl::{finetune, predict_grid, predict_probabilities, pretrain_global, pretrain_local, TrainLog, TrainStage};
use crate::metrics::{classification_report, mask_metrics, roc_csv, SegmentationReport};
use crate::model::{build_model, load_checkpoint, save_checkpoint, Model, Stage};
use crate::patchflow::{
    extract_patches, extract_split, reconstruct_coarse_mask, window_labels, write_patch_cache, ClassPolicy, Manifest, PatchRecord,
    Split,
};
use crate::phantom::generate_dataset;
use crate::raster::{BinaryMask, GrayImage, LabelMask};
use crate::refinement::{Backend, Refiner};

use super::{AblateCmd, Cli, CliError, Command, EvalArgs, EvalCmd, PatchesCmd, PhantomCmd, PredictArgs, RefineArgs, RunConfig, StageArg, TrainArgs};

/// Contents of `predict --out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFile {
    pub checkpoint_stage: Stage,
    pub split: Split,
    pub patch_size: usize,
    pub threshold: f64,
    pub grid_stride: Option<usize>,
    pub images: Vec<ImagePredictions>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagePredictions {
    pub id: String,
    /// As listed in the manifest, relative to the manifest directory.
    pub image_path: String,
    pub height: usize,
    pub width: usize,
    pub patches: Vec<PatchPrediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchPrediction {
    pub row: usize,
    pub col: usize,
    /// Ground-truth window label for the split, when known.
    pub label: Option<u8>,
    pub prob: f64,
    pub pred: u8,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Wall-clock data lives in its own file so primary outputs stay byte-stable.
fn write_timing(dir: &Path, command: &str, start: Instant, extra: serde_json::Value) -> Result<(), CliError> {
    write_json(
        &dir.join("timing.json"),
        &json!({ "command": command, "elapsed_ms": start.elapsed().as_secs_f64() * 1e3, "detail": extra }),
    )
}

fn png_files(dir: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))? {
        let p = e?.path();
        if p.is_file() && p.extension().is_some_and(|x| x == "png") {
            let id = p.file_stem().expect("file has a name").to_string_lossy().into_owned();
            out.push((id, p));
        }
    }
    out.sort();
    Ok(out)
}

pub(super) fn dispatch(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(cli.global.config.as_deref(), &cli.global.set)?;
    match cli.command {
        Command::Phantom { action: PhantomCmd::Gen { out } } => phantom_gen(cfg, &out),
        Command::Patches {
            action: PatchesCmd::Extract { manifest, split, out },
        } => patches_extract(cfg, &manifest, split, &out),
        Command::Train(a) => train(cfg, a),
        Command::Predict(a) => predict(cfg, a),
        Command::Reconstruct(a) => reconstruct(cfg, &a.preds, &a.out),
        Command::Refine(a) => refine(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Ablate {
            action:
                AblateCmd::Focal {
                    manifest,
                    alphas,
                    gammas,
                    input,
                    out,
                },
        } => ablate_focal(cfg, &manifest, &alphas, &gammas, input.as_deref(), &out),
    }
}

fn phantom_gen(cfg: RunConfig, out: &Path) -> Result<(), CliError> {
    let t = Instant::now();
    let m = generate_dataset(&cfg.phantom, cfg.splits, out)?;
    cfg.write_effective(out)?;
    write_timing(out, "phantom gen", t, json!({ "images": m.entries.len() }))?;
    println!("wrote {} images to {}", m.entries.len(), out.display());
    Ok(())
}

fn patches_extract(cfg: RunConfig, manifest: &Path, split: Split, out: &Path) -> Result<(), CliError> {
    let t = Instant::now();
    let m = Manifest::load(manifest)?;
    let patches = extract_split(&m, &cfg.patches, split, ClassPolicy::Both)?;
    std::fs::create_dir_all(out)?;
    write_patch_cache(out.join(format!("patches-{split}.bin")), split, &patches)?;
    let positives = patches.iter().filter(|p| p.label == 1).count();
    write_json(
        &out.join(format!("patches-{split}.json")),
        &json!({ "split": split, "count": patches.len(), "positives": positives, "negatives": patches.len() - positives }),
    )?;
    cfg.write_effective(out)?;
    write_timing(out, "patches extract", t, json!({}))?;
    println!("{split}: {} patches ({positives} positive)", patches.len());
    Ok(())
}

fn load_or_build(cfg: &mut RunConfig, input: Option<&Path>) -> Result<Model, CliError> {
    match input {
        Some(p) => {
            let (m, _) = load_checkpoint(p)?;
            cfg.model = m.config.clone();
            Ok(m)
        }
        None => Ok(build_model(&cfg.model)?),
    }
}

fn split_patches(m: &Manifest, cfg: &RunConfig, split: Split, model: &Model) -> Result<Vec<PatchRecord>, CliError> {
    if m.split(split).next().is_none() {
        return Err(CliError::Data(format!("manifest has no `{split}` split")));
    }
    if cfg.patches.patch_size != model.config.input_size {
        return Err(CliError::Data(format!(
            "patch_size {} does not match the model input size {}",
            cfg.patches.patch_size, model.config.input_size
        )));
    }
    Ok(extract_split(m, &cfg.patches, split, ClassPolicy::Both)?)
}

fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<(), CliError> {
    let t = Instant::now();
    let m = Manifest::load(&a.manifest)?;
    let mut model = load_or_build(&mut cfg, a.input.as_deref())?;
    cfg.train.stage = match a.stage {
        StageArg::Local => TrainStage::Local,
        StageArg::Global => TrainStage::Global,
        StageArg::Finetune => TrainStage::Finetune,
    };
    let train = split_patches(&m, &cfg, Split::Train, &model)?;
    let (log, stage, extra): (TrainLog, Stage, serde_json::Value) = match a.stage {
        StageArg::Local => (pretrain_local(&mut model, &train, &cfg.train)?, Stage::LocalPretrained, json!({})),
        StageArg::Global => (pretrain_global(&mut model, &train, &cfg.train)?, Stage::GlobalPretrained, json!({})),
        StageArg::Finetune => {
            let val = split_patches(&m, &cfg, Split::Val, &model)?;
            let o = finetune(&mut model, &train, &val, &cfg.focal, &cfg.train)?;
            let extra = json!({ "best_epoch": o.best_epoch, "best_val_loss": o.best_val_loss, "epochs_run": o.epochs_run });
            (o.log, Stage::Finetuned, extra)
        }
    };
    let dir = parent_dir(&a.out);
    std::fs::create_dir_all(&dir)?;
    save_checkpoint(&model, stage, &a.out)?;
    log.write_csv(a.out.with_extension("log.csv"))?;
    cfg.write_effective(&dir)?;
    write_timing(&dir, "train", t, extra)?;
    println!("{stage} checkpoint written to {}", a.out.display());
    Ok(())
}

fn predict(mut cfg: RunConfig, a: PredictArgs) -> Result<(), CliError> {
    let t = Instant::now();
    let m = Manifest::load(&a.manifest)?;
    let (model, stage) = load_checkpoint(&a.ckpt)?;
    cfg.model = model.config.clone();
    if let Some(s) = a.grid_stride {
        cfg.predict.grid_stride = Some(s);
    }
    if let Some(th) = a.threshold {
        cfg.predict.threshold = th;
    }
    let threshold = cfg.predict.threshold;
    let p = model.config.input_size;
    if cfg.patches.patch_size != p {
        return Err(CliError::Data(format!("patch_size {} does not match the model input size {p}", cfg.patches.patch_size)));
    }
    if m.split(a.split).next().is_none() {
        return Err(CliError::Data(format!("manifest has no `{}` split", a.split)));
    }
    let mut images = Vec::new();
    for e in m.split(a.split) {
        let (image, mask) = m.load_entry(e)?;
        let (h, w) = image.dims();
        let patches: Vec<PatchPrediction> = match cfg.predict.grid_stride {
            Some(stride) => {
                let truth = mask.select(a.split.positive_labels());
                let labels = window_labels(&truth, p, stride, cfg.patches.label_fraction);
                predict_grid(&model, &image, stride)?
                    .into_iter()
                    .zip(labels)
                    .map(|(((row, col), prob), (origin, label))| {
                        debug_assert_eq!((row, col), origin);
                        PatchPrediction {
                            row,
                            col,
                            label: Some(label),
                            prob,
                            pred: u8::from(prob >= threshold),
                        }
                    })
                    .collect()
            }
            None => {
                let recs = extract_patches(&image, &mask, &cfg.patches, a.split, ClassPolicy::Both)?;
                let xs: Vec<_> = recs.iter().map(|r| &r.pixels).collect();
                let probs = predict_probabilities(&model, &xs)?;
                recs.iter()
                    .zip(probs)
                    .map(|(r, prob)| PatchPrediction {
                        row: r.origin.0,
                        col: r.origin.1,
                        label: Some(r.label),
                        prob,
                        pred: u8::from(prob >= threshold),
                    })
                    .collect()
            }
        };
        images.push(ImagePredictions {
            id: e.id(),
            image_path: e.image_path.clone(),
            height: h,
            width: w,
            patches,
        });
    }
    let file = PredictionFile {
        checkpoint_stage: stage,
        split: a.split,
        patch_size: p,
        threshold,
        grid_stride: cfg.predict.grid_stride,
        images,
    };
    write_json(&a.out, &file)?;
    let dir = parent_dir(&a.out);
    cfg.write_effective(&dir)?;
    let n: usize = file.images.iter().map(|i| i.patches.len()).sum();
    write_timing(&dir, "predict", t, json!({ "patches": n }))?;
    println!("{n} patch predictions written to {}", a.out.display());
    Ok(())
}

fn load_predictions(path: &Path) -> Result<PredictionFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn reconstruct(cfg: RunConfig, preds: &Path, out: &Path) -> Result<(), CliError> {
    let t = Instant::now();
    let file = load_predictions(preds)?;
    std::fs::create_dir_all(out)?;
    for img in &file.images {
        let votes: Vec<((usize, usize), u8)> = img.patches.iter().map(|p| ((p.row, p.col), p.pred)).collect();
        let mask = reconstruct_coarse_mask(&votes, (img.height, img.width), file.patch_size, cfg.predict.aggregation)?;
        mask.save_png(out.join(format!("{}.png", img.id)))?;
    }
    cfg.write_effective(out)?;
    write_timing(out, "reconstruct", t, json!({ "images": file.images.len() }))?;
    println!("{} coarse masks written to {}", file.images.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct RefineEntry {
    id: String,
    /// No prompt is sent for an empty coarse mask; it passes through unchanged.
    skipped: bool,
    bbox: Option<[usize; 4]>,
}

fn refine(mut cfg: RunConfig, a: RefineArgs) -> Result<(), CliError> {
    let t = Instant::now();
    if let Some(b) = a.backend {
        cfg.refinement.backend = Backend::from(b);
    }
    if let Some(e) = a.endpoint {
        cfg.refinement.endpoint = Some(e);
    }
    let refiner = Refiner::new(&cfg.refinement)?;
    let backend = refiner.check_backend()?;
    let masks = png_files(&a.masks)?;
    std::fs::create_dir_all(a.out.join("m1"))?;
    let results: Vec<Result<(RefineEntry, [f64; 2]), CliError>> = masks
        .par_iter()
        .map(|(id, path)| {
            let mc = BinaryMask::load_png(path)?;
            let image_path = a.images.join(format!("{id}.png"));
            let image = GrayImage::load_png(&image_path).map_err(|e| CliError::Data(format!("{}: {e}", image_path.display())))?;
            if mc.is_empty() {
                if image.dims() != mc.dims() {
                    return Err(CliError::Data(format!("{id}: image {:?} vs mask {:?}", image.dims(), mc.dims())));
                }
                mc.save_png(a.out.join(format!("{id}.png")))?;
                mc.save_png(a.out.join("m1").join(format!("{id}.png")))?;
                return Ok((RefineEntry { id: id.clone(), skipped: true, bbox: None }, [0.0; 2]));
            }
            let r = refiner.refine(&image, &mc, id)?;
            r.m2.save_png(a.out.join(format!("{id}.png")))?;
            r.m1.save_png(a.out.join("m1").join(format!("{id}.png")))?;
            Ok((
                RefineEntry {
                    id: id.clone(),
                    skipped: false,
                    bbox: Some(r.bbox.as_array()),
                },
                r.latency_ms,
            ))
        })
        .collect();
    let mut entries = Vec::new();
    let mut latency = Vec::new();
    for r in results {
        let (e, l) = r?;
        latency.push(json!({ "id": e.id, "box_ms": l[0], "mask_ms": l[1] }));
        entries.push(e);
    }
    write_json(&a.out.join("refine_report.json"), &json!({ "backend": backend, "images": entries }))?;
    cfg.write_effective(&a.out)?;
    write_timing(&a.out, "refine", t, json!({ "per_image": latency }))?;
    println!("{} masks refined with {backend} into {}", entries.len(), a.out.display());
    Ok(())
}

fn load_truth(path: &Path, labels: &[u8]) -> Result<BinaryMask, CliError> {
    match LabelMask::load_png(path) {
        Ok(m) => Ok(m.select(labels)),
        Err(_) => BinaryMask::load_png(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display()))),
    }
}

fn eval(cfg: RunConfig, a: EvalArgs) -> Result<(), CliError> {
    let t = Instant::now();
    if let Some(EvalCmd::Patches { preds, out, roc }) = a.patches {
        let file = load_predictions(&preds)?;
        let (mut scores, mut labels) = (Vec::new(), Vec::new());
        for p in file.images.iter().flat_map(|i| &i.patches) {
            if let Some(l) = p.label {
                scores.push(p.prob);
                labels.push(l == 1);
            }
        }
        let report = classification_report(&scores, &labels, file.threshold)?;
        if let Some(r) = &roc {
            if let Some(d) = r.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(d)?;
            }
            roc_csv(&scores, &labels, r)?;
        }
        write_json(&out, &report)?;
        let dir = parent_dir(&out);
        cfg.write_effective(&dir)?;
        write_timing(&dir, "eval patches", t, json!({}))?;
        match report.auc {
            Some(auc) => println!("AUC {auc:.4} over {} patches", report.n_samples),
            None => println!("single-class patch set of {} patches; AUC undefined", report.n_samples),
        }
        return Ok(());
    }
    let need = |o: Option<PathBuf>, flag: &str| o.ok_or_else(|| CliError::Usage(format!("eval needs --{flag} (or use `eval patches`)")));
    let pred = need(a.pred, "pred")?;
    let truth = need(a.truth, "truth")?;
    let out = need(a.out, "out")?;
    let mut per_image = Vec::new();
    for (id, path) in png_files(&pred)? {
        let p = BinaryMask::load_png(&path)?;
        let tpath = truth.join(format!("{id}.png"));
        if !tpath.exists() {
            return Err(CliError::Data(format!("no ground truth for `{id}` in {}", truth.display())));
        }
        let g = load_truth(&tpath, &a.labels)?;
        per_image.push(mask_metrics(id, &p, &g)?);
    }
    let report = SegmentationReport::new(per_image)?;
    write_json(&out, &report)?;
    let dir = parent_dir(&out);
    cfg.write_effective(&dir)?;
    write_timing(&dir, "eval", t, json!({}))?;
    println!("mean DSC {:.4} over {} masks", report.mean.dsc, report.per_image.len());
    Ok(())
}

fn ablate_focal(
    mut cfg: RunConfig,
    manifest: &Path,
    alphas: &[f64],
    gammas: &[f64],
    input: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let t = Instant::now();
    let m = Manifest::load(manifest)?;
    let start = load_or_build(&mut cfg, input)?;
    cfg.train.stage = TrainStage::Finetune;
    let train = split_patches(&m, &cfg, Split::Train, &start)?;
    let val = split_patches(&m, &cfg, Split::Val, &start)?;
    let test = split_patches(&m, &cfg, Split::Test, &start)?;
    let labels: Vec<bool> = test.iter().map(|p| p.label == 1).collect();
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for &alpha in alphas {
        for &gamma in gammas {
            let fp = crate::ffcl::FocalParams { alpha, gamma };
            fp.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let mut model = start.clone();
            let o = finetune(&mut model, &train, &val, &fp, &cfg.train)?;
            let xs: Vec<_> = test.iter().map(|p| &p.pixels).collect();
            let scores = predict_probabilities(&model, &xs)?;
            let report = classification_report(&scores, &labels, cfg.predict.threshold)?;
            let name = format!("roc_alpha{alpha}_gamma{gamma}.csv");
            roc_csv(&scores, &labels, out.join(&name))?;
            o.log.write_csv(out.join(format!("train_alpha{alpha}_gamma{gamma}.log.csv")))?;
            rows.push(json!({
                "alpha": alpha,
                "gamma": gamma,
                "auc": report.auc,
                "accuracy": report.metrics.accuracy,
                "best_epoch": o.best_epoch,
                "best_val_loss": o.best_val_loss,
                "roc_csv": name,
            }));
            println!("alpha {alpha} gamma {gamma}: AUC {:?}", report.auc);
        }
    }
    write_json(&out.join("ablation.json"), &json!({ "runs": rows }))?;
    cfg.write_effective(out)?;
    write_timing(out, "ablate focal", t, json!({}))?;
    Ok(())
}
