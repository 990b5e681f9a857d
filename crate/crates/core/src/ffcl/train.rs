use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::model::{block_graph, embed_graph, head_graph, names, Model};
use crate::numerics::{adam_step, cosine_anneal_lr, Graph, NumericsError, OptimizerState, ParamStore, Tensor, Var};
use crate::patchflow::{balanced_batches, grid_positions, PatchRecord};
use crate::raster::GrayImage;

use super::{focal_loss_from_logit, FfclError, FocalParams, LocalObjective, LogRow, TrainConfig, TrainLog, TrainStage};

const STREAM_LOCAL: u64 = 1;
const STREAM_GLOBAL: u64 = 2;
const STREAM_FINETUNE: u64 = 3;

fn class_indices(patches: &[PatchRecord]) -> Result<(Vec<usize>, Vec<usize>), FfclError> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, p) in patches.iter().enumerate() {
        match p.label {
            1 => pos.push(i),
            0 => neg.push(i),
            other => return Err(FfclError::Contract(format!("patch {i} has non-binary label {other}"))),
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(FfclError::SingleClass {
            positives: pos.len(),
            negatives: neg.len(),
        });
    }
    Ok((pos, neg))
}

fn check_shapes(model: &Model, patches: &[PatchRecord]) -> Result<(), FfclError> {
    let s = model.config.input_size;
    if let Some((i, p)) = patches.iter().enumerate().find(|(_, p)| p.pixels.shape() != [1, s, s]) {
        return Err(FfclError::Contract(format!(
            "patch {i} has shape {:?}, model expects [1,{s},{s}]",
            p.pixels.shape()
        )));
    }
    Ok(())
}

/// Index pair plus whether both sides share a class.
type Pair = (usize, usize, bool);

/// `batch_size/2` same-class and `batch_size/2` different-class pairs.
fn sample_pairs(rng: &mut ChaCha8Rng, pos: &[usize], neg: &[usize], batch_size: usize) -> Vec<Pair> {
    let half = batch_size / 2;
    let mut pairs = Vec::with_capacity(batch_size);
    for _ in 0..half {
        let pool = if rng.random_bool(0.5) { pos } else { neg };
        let a = pool[rng.random_range(0..pool.len())];
        let b = pool[rng.random_range(0..pool.len())];
        pairs.push((a, b, true));
    }
    for _ in 0..half {
        let a = pos[rng.random_range(0..pos.len())];
        let b = neg[rng.random_range(0..neg.len())];
        pairs.push((a, b, false));
    }
    pairs
}

fn contrastive_batches(n: usize, cfg: &TrainConfig) -> usize {
    let full = n.div_ceil(cfg.batch_size).max(1);
    cfg.max_batches_per_epoch.map_or(full, |m| full.min(m))
}

fn epoch_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64, FfclError> {
    Ok(cosine_anneal_lr(epoch, cfg.epochs, cfg.lr0, cfg.lr_min)?)
}

fn apply_update(
    opt: &mut OptimizerState,
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    stage: TrainStage,
    epoch: usize,
    step: usize,
) -> Result<(), FfclError> {
    adam_step(opt, params, grads, lr)?;
    if let Some(name) = params.first_non_finite() {
        return Err(FfclError::NonFinite {
            stage,
            epoch,
            step,
            param: name.to_string(),
        });
    }
    Ok(())
}

fn mean_of(g: &mut Graph<'_>, terms: &[Var]) -> Result<Var, NumericsError> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f32))
}

/// Runs every block on `x` with the input of each block detached, returning
/// the loss handle per block: the pooled embedding of each block (or the
/// projected embedding for the last block when requested).
fn local_embeddings<'a>(
    g: &mut Graph<'a>,
    params: &'a ParamStore,
    model: &Model,
    x: &'a Tensor,
    with_projection: bool,
) -> Result<Vec<Var>, NumericsError> {
    let n = model.config.num_blocks;
    let mut out = Vec::with_capacity(n);
    let mut input = g.input_ref(x);
    for i in 0..n {
        let h = block_graph(g, params, i, input)?;
        let mut e = g.global_avg_pool(h)?;
        if with_projection && i + 1 == n {
            let (pw, w) = params.entry(names::PROJ_WEIGHT).expect("model has projection");
            let (pb, b) = params.entry(names::PROJ_BIAS).expect("model has projection");
            let (pw, pb) = (g.param(pw, w), g.param(pb, b));
            e = g.linear(e, pw, pb)?;
        }
        out.push(e);
        if i + 1 < n {
            input = g.input(g.value(h).clone());
        }
    }
    Ok(out)
}

/// Layer-local contrastive pretraining. Each block is trained on its own
/// pooled embedding with its input held constant, so no gradient crosses a
/// block boundary. The head and projection are never touched unless
/// `local_train_projection` is set, in which case the last block's loss is
/// taken on the projected embedding.
pub fn pretrain_local(model: &mut Model, patches: &[PatchRecord], cfg: &TrainConfig) -> Result<TrainLog, FfclError> {
    cfg.validate()?;
    check_shapes(model, patches)?;
    let (pos, neg) = class_indices(patches)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_LOCAL);
    let nb = model.config.num_blocks;
    let mut opt = OptimizerState::new(cfg.lr0, cfg.epochs);
    let mut log = TrainLog::default();
    let batches = contrastive_batches(patches.len(), cfg);

    for epoch in 0..cfg.epochs {
        let lr = epoch_lr(epoch, cfg)?;
        let mut block_sums = vec![0.0f64; nb];
        for step in 0..batches {
            let pairs = sample_pairs(&mut rng, &pos, &neg, cfg.batch_size);
            let (grads, block_losses) = {
                let mut g = Graph::new();
                let params = &model.params;
                let mut per_block: Vec<Vec<Var>> = vec![Vec::new(); nb];
                for &(a, b, same) in &pairs {
                    let ea = local_embeddings(&mut g, params, model, &patches[a].pixels, cfg.local_train_projection)?;
                    let eb = local_embeddings(&mut g, params, model, &patches[b].pixels, cfg.local_train_projection)?;
                    for i in 0..nb {
                        match cfg.local_objective {
                            LocalObjective::Cosine => per_block[i].push(g.cosine_embedding_loss(ea[i], eb[i], same)?),
                            LocalObjective::Goodness => {
                                let theta = cfg.ffa.theta as f32;
                                per_block[i].push(g.goodness_logistic(ea[i], theta, patches[a].label == 1));
                                per_block[i].push(g.goodness_logistic(eb[i], theta, patches[b].label == 1));
                            }
                        }
                    }
                }
                let means: Vec<Var> = per_block.iter().map(|t| mean_of(&mut g, t)).collect::<Result<_, _>>()?;
                let block_losses: Vec<f64> = means.iter().map(|&m| f64::from(g.value(m).data()[0])).collect();
                let mut total = means[0];
                for &m in &means[1..] {
                    total = g.add(total, m)?;
                }
                (g.backward(total)?.into_named(), block_losses)
            };
            for (s, l) in block_sums.iter_mut().zip(&block_losses) {
                *s += l;
            }
            apply_update(&mut opt, &mut model.params, &grads, lr, TrainStage::Local, epoch + 1, step)?;
        }
        for (i, s) in block_sums.iter().enumerate() {
            log.rows.push(LogRow {
                epoch: epoch + 1,
                stage: format!("local.block{i}"),
                train_loss: s / batches as f64,
                val_loss: None,
                lr,
            });
        }
    }
    Ok(log)
}

/// Mean cosine loss on the final embeddings over `pairs`, recorded in `g`.
fn global_loss<'a>(
    g: &mut Graph<'a>,
    model: &'a Model,
    patches: &'a [PatchRecord],
    pairs: &[Pair],
) -> Result<Var, NumericsError> {
    let mut terms = Vec::with_capacity(pairs.len());
    for &(a, b, same) in pairs {
        let xa = g.input_ref(&patches[a].pixels);
        let ea = embed_graph(g, &model.params, &model.config, xa)?.final_embedding;
        let xb = g.input_ref(&patches[b].pixels);
        let eb = embed_graph(g, &model.params, &model.config, xb)?.final_embedding;
        terms.push(g.cosine_embedding_loss(ea, eb, same)?);
    }
    mean_of(g, &terms)
}

/// Whole-network contrastive pretraining on the projected final embeddings.
pub fn pretrain_global(model: &mut Model, patches: &[PatchRecord], cfg: &TrainConfig) -> Result<TrainLog, FfclError> {
    cfg.validate()?;
    check_shapes(model, patches)?;
    let (pos, neg) = class_indices(patches)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_GLOBAL);
    let mut opt = OptimizerState::new(cfg.lr0, cfg.epochs);
    let mut log = TrainLog::default();
    let batches = contrastive_batches(patches.len(), cfg);

    for epoch in 0..cfg.epochs {
        let lr = epoch_lr(epoch, cfg)?;
        let mut sum = 0.0;
        for step in 0..batches {
            let pairs = sample_pairs(&mut rng, &pos, &neg, cfg.batch_size);
            let (grads, loss) = {
                let mut g = Graph::new();
                let l = global_loss(&mut g, model, patches, &pairs)?;
                let loss = f64::from(g.value(l).data()[0]);
                (g.backward(l)?.into_named(), loss)
            };
            sum += loss;
            apply_update(&mut opt, &mut model.params, &grads, lr, TrainStage::Global, epoch + 1, step)?;
        }
        log.rows.push(LogRow {
            epoch: epoch + 1,
            stage: TrainStage::Global.to_string(),
            train_loss: sum / batches as f64,
            val_loss: None,
            lr,
        });
    }
    Ok(log)
}

/// Mean global contrastive loss of `model` on a fixed list of pairs.
pub fn global_probe_loss(model: &Model, patches: &[PatchRecord], pairs: &[(usize, usize, bool)]) -> Result<f64, FfclError> {
    if pairs.is_empty() {
        return Err(FfclError::Contract("probe needs at least one pair".into()));
    }
    let mut g = Graph::new();
    let l = global_loss(&mut g, model, patches, pairs)?;
    Ok(f64::from(g.value(l).data()[0]))
}

/// Outcome of [`finetune`].
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOutcome {
    pub log: TrainLog,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

fn logits(model: &Model, patches: &[PatchRecord]) -> Result<Vec<f64>, FfclError> {
    patches
        .par_iter()
        .map(|p| {
            let e = model.forward_embed(&p.pixels)?;
            Ok(f64::from(model.head_logit(&e.final_embedding)?))
        })
        .collect()
}

/// Mean focal loss over `patches`, evaluated from logits in double precision.
pub fn evaluate_focal_loss(model: &Model, patches: &[PatchRecord], fp: &FocalParams) -> Result<f64, FfclError> {
    if patches.is_empty() {
        return Err(FfclError::Config("cannot evaluate on an empty patch set".into()));
    }
    let z = logits(model, patches)?;
    Ok(z.iter().zip(patches).map(|(&z, p)| focal_loss_from_logit(z, p.label, fp)).sum::<f64>() / patches.len() as f64)
}

/// Supervised focal-loss fine-tuning of the whole network on class-balanced
/// batches, with early stopping on validation loss. The parameters of the
/// best validation epoch are restored before returning.
pub fn finetune(
    model: &mut Model,
    train: &[PatchRecord],
    val: &[PatchRecord],
    fp: &FocalParams,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome, FfclError> {
    cfg.validate()?;
    fp.validate()?;
    if val.is_empty() {
        return Err(FfclError::Config("fine-tuning needs a non-empty validation set".into()));
    }
    check_shapes(model, train)?;
    check_shapes(model, val)?;
    class_indices(train)?;
    let labels: Vec<u8> = train.iter().map(|p| p.label).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_FINETUNE);
    let mut opt = OptimizerState::new(cfg.lr0, cfg.epochs);
    let mut log = TrainLog::default();
    let (gamma, a_pos, a_neg) = (fp.gamma as f32, fp.alpha_t(1) as f32, fp.alpha_t(0) as f32);

    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let lr = epoch_lr(epoch, cfg)?;
        let mut batches = balanced_batches(&labels, cfg.batch_size, rng.random())?;
        if let Some(m) = cfg.max_batches_per_epoch {
            batches.truncate(m);
        }
        let mut sum = 0.0;
        for (step, batch) in batches.iter().enumerate() {
            let (grads, loss) = {
                let mut g = Graph::new();
                let mut terms = Vec::with_capacity(batch.len());
                for &i in batch {
                    let x = g.input_ref(&train[i].pixels);
                    let e = embed_graph(&mut g, &model.params, &model.config, x)?.final_embedding;
                    let z = head_graph(&mut g, &model.params, e)?;
                    let positive = train[i].label == 1;
                    terms.push(g.binary_focal(z, positive, if positive { a_pos } else { a_neg }, gamma)?);
                }
                let l = mean_of(&mut g, &terms)?;
                let loss = f64::from(g.value(l).data()[0]);
                (g.backward(l)?.into_named(), loss)
            };
            sum += loss;
            apply_update(&mut opt, &mut model.params, &grads, lr, TrainStage::Finetune, epoch + 1, step)?;
        }
        let val_loss = evaluate_focal_loss(model, val, fp)?;
        epochs_run = epoch + 1;
        log.rows.push(LogRow {
            epoch: epoch + 1,
            stage: TrainStage::Finetune.to_string(),
            train_loss: sum / batches.len() as f64,
            val_loss: Some(val_loss),
            lr,
        });
        if !val_loss.is_finite() {
            return Err(FfclError::NonFinite {
                stage: TrainStage::Finetune,
                epoch: epoch + 1,
                step: batches.len(),
                param: "validation loss".into(),
            });
        }
        if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            best = Some((epoch + 1, val_loss, model.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = epoch + 1 < cfg.epochs;
                break;
            }
        }
    }
    let (best_epoch, best_val_loss, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(FinetuneOutcome {
        log,
        best_epoch,
        best_val_loss,
        epochs_run,
        stopped_early,
    })
}

/// Positive-class probability and the thresholded label (`p >= threshold`).
pub fn predict_patch(model: &Model, patch: &Tensor, threshold: f64) -> Result<(f64, u8), FfclError> {
    let p = f64::from(model.forward_classify(patch)?);
    Ok((p, u8::from(p >= threshold)))
}

/// Probabilities for many patches, computed in parallel; order follows the input.
pub fn predict_probabilities(model: &Model, patches: &[&Tensor]) -> Result<Vec<f64>, FfclError> {
    patches
        .par_iter()
        .map(|p| Ok(f64::from(model.forward_classify(p)?)))
        .collect()
}

/// Probabilities for every window on a `stride` grid over `image`, keyed by
/// window origin in row-major order.
pub fn predict_grid(model: &Model, image: &GrayImage, stride: usize) -> Result<Vec<((usize, usize), f64)>, FfclError> {
    let p = model.config.input_size;
    let (h, w) = image.dims();
    let cols = grid_positions(w, p, stride);
    let origins: Vec<(usize, usize)> = grid_positions(h, p, stride)
        .into_iter()
        .flat_map(|r| cols.iter().map(move |&c| (r, c)))
        .collect();
    if origins.is_empty() {
        return Err(FfclError::Contract(format!(
            "image {h}x{w} holds no {p}x{p} window at stride {stride}"
        )));
    }
    let probs: Vec<f64> = origins
        .par_iter()
        .map(|&(r, c)| {
            let x = image.crop_tensor(r, c, p).map_err(crate::patchflow::PatchError::from)?;
            Ok(f64::from(model.forward_classify(&x)?))
        })
        .collect::<Result<_, FfclError>>()?;
    Ok(origins.into_iter().zip(probs).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use crate::patchflow::SourceRegion;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_blocks: 2,
            base_channels: 4,
            embedding_dim: 8,
            input_size: 16,
            seed: 1,
        }
    }

    /// Bright disk patches are positive, dim noise patches negative.
    fn clusters(n: usize, seed: u64) -> Vec<PatchRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|k| {
                let label = (k % 2) as u8;
                let pixels = Tensor::from_fn(&[1, 16, 16], |i| {
                    let (r, c) = ((i / 16) as f32 - 7.5, (i % 16) as f32 - 7.5);
                    let base = if label == 1 && r * r + c * c < 30.0 { 0.8 } else { 0.3 };
                    base + rng.random_range(-0.05..0.05)
                });
                PatchRecord {
                    image_id: String::new(),
                    pixels,
                    origin: (0, 0),
                    label,
                    source_region: if label == 1 { SourceRegion::Tumor } else { SourceRegion::Negative },
                }
            })
            .collect()
    }

    fn cfg(epochs: usize, lr0: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            lr0,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let data = clusters(8, 0);
        let mut m = build_model(&tiny()).unwrap();
        let before = m.params.clone();
        pretrain_local(&mut m, &data, &cfg(1, 0.0)).unwrap();
        assert_eq!(m.params, before);
        pretrain_global(&mut m, &data, &cfg(1, 0.0)).unwrap();
        assert_eq!(m.params, before);
    }

    #[test]
    fn local_touches_blocks_only() {
        let data = clusters(8, 0);
        let mut m = build_model(&tiny()).unwrap();
        let before = m.params.clone();
        let log = pretrain_local(&mut m, &data, &cfg(2, 1e-2)).unwrap();
        for n in [names::PROJ_WEIGHT, names::PROJ_BIAS, names::HEAD_WEIGHT, names::HEAD_BIAS] {
            assert_eq!(m.params.get(n), before.get(n), "{n}");
        }
        assert_ne!(m.params.get(&names::conv_weight(1, 2)), before.get(&names::conv_weight(1, 2)));
        assert_eq!(log.stage_rows("local.block1").count(), 2);
    }

    #[test]
    fn single_class_is_rejected() {
        let data: Vec<_> = clusters(8, 0).into_iter().filter(|p| p.label == 1).collect();
        let mut m = build_model(&tiny()).unwrap();
        assert!(matches!(pretrain_local(&mut m, &data, &cfg(1, 1e-3)), Err(FfclError::SingleClass { .. })));
    }

    #[test]
    fn finetune_needs_validation() {
        let data = clusters(8, 0);
        let mut m = build_model(&tiny()).unwrap();
        assert!(matches!(
            finetune(&mut m, &data, &[], &FocalParams::default(), &cfg(1, 1e-3)),
            Err(FfclError::Config(_))
        ));
    }

    #[test]
    fn finetune_restores_best_epoch() {
        let train = clusters(16, 0);
        let val = clusters(8, 1);
        let mut m = build_model(&tiny()).unwrap();
        let out = finetune(&mut m, &train, &val, &FocalParams::default(), &cfg(6, 3e-3)).unwrap();
        let min = out
            .log
            .rows
            .iter()
            .filter_map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_loss, min);
        assert_eq!(evaluate_focal_loss(&m, &val, &FocalParams::default()).unwrap(), min);
    }

    #[test]
    fn predict_patch_matches_forward_classify_and_ties_are_positive() {
        let mut m = build_model(&tiny()).unwrap();
        let x = clusters(1, 0).remove(0).pixels;
        let (p, _) = predict_patch(&m, &x, 0.5).unwrap();
        assert_eq!(p, f64::from(m.forward_classify(&x).unwrap()));
        m.params.get_mut(names::HEAD_WEIGHT).unwrap().data_mut().fill(0.0);
        assert_eq!(predict_patch(&m, &x, 0.5).unwrap(), (0.5, 1));
    }
}
