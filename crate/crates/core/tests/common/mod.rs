#![allow(dead_code)]

use std::time::Instant;

use margin_ffcl::ffcl::{finetune, predict_probabilities, pretrain_global, pretrain_local, FocalParams, TrainConfig};
use margin_ffcl::metrics::auc;
use margin_ffcl::model::{build_model, embed_graph, head_graph, Model, ModelConfig};
use margin_ffcl::numerics::{finite_difference_gradcheck, Graph, NumericsError, ParamStore, ParamSubset, Tensor, Var};
use margin_ffcl::patchflow::{extract_patches, ClassPolicy, NegativeStrides, PatchRecord, PatchSpec, Split};
use margin_ffcl::phantom::{generate_sample, PhantomConfig, PhantomSample};
use margin_ffcl::raster::BinaryMask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- gradients

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU kinks stay outside the stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn prm<'p>(g: &mut Graph<'p, f64>, p: &'p ParamStore<f64>, name: &str) -> Var {
    let (k, t) = p.entry(name).expect("parameter present");
    g.param(k, t)
}

fn store(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    for (n, t) in entries {
        p.insert(n, t).unwrap();
    }
    p
}

/// `Σ r ⊙ y` with a fixed random `r` stored as the non-trainable "r".
fn weighted_sum<'p>(g: &mut Graph<'p, f64>, p: &'p ParamStore<f64>, y: Var) -> Result<Var, NumericsError> {
    let r = g.input_ref(p.get("r").expect("weights present"));
    let m = g.mul(y, r)?;
    Ok(g.sum(m))
}

fn only(names: &[&str]) -> ParamSubset {
    ParamSubset {
        names: Some(names.iter().map(|s| s.to_string()).collect()),
        max_coords_per_tensor: None,
    }
}

pub struct GradCase {
    pub name: String,
    pub max_relative_error: f64,
    pub checked: usize,
    pub skipped_at_kinks: usize,
    pub worst: Option<(String, usize)>,
}

/// Runs a central-difference check of every differentiable primitive and of
/// a random four-block model in double precision.
pub fn gradient_suite(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<margin_ffcl::numerics::GradCheckReport, NumericsError>| {
        let r = r.unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(r.coordinates_checked > 0, "{name}: nothing checked");
        out.push(GradCase {
            name: name.to_string(),
            max_relative_error: r.max_relative_error,
            checked: r.coordinates_checked,
            skipped_at_kinks: r.skipped_at_kinks,
            worst: r.worst.clone(),
        });
    };

    for (label, cin, hw, pad, stride) in [("conv2d s1 p1", 2, 5, 1, 1), ("conv2d s2 p1", 2, 7, 1, 2), ("conv2d s2 p0", 1, 6, 0, 2)] {
        let ho = (hw + 2 * pad - 3) / stride + 1;
        let p = store(vec![
            ("x", rand_tensor(&mut rng, &[cin, hw, hw])),
            ("w", rand_tensor(&mut rng, &[3, cin, 3, 3])),
            ("b", rand_tensor(&mut rng, &[3])),
            ("r", rand_tensor(&mut rng, &[3, ho, ho])),
        ]);
        push(
            label,
            finite_difference_gradcheck(&p, &only(&["x", "w", "b"]), GRAD_STEP, move |g, p| {
                let (x, w, b) = (prm(g, p, "x"), prm(g, p, "w"), prm(g, p, "b"));
                let y = g.conv2d(x, w, b, pad, stride)?;
                weighted_sum(g, p, y)
            }),
        );
    }

    let p = store(vec![("x", away_from_zero(&mut rng, &[12])), ("r", rand_tensor(&mut rng, &[12]))]);
    push(
        "relu",
        finite_difference_gradcheck(&p, &only(&["x"]), GRAD_STEP, |g, p| {
            let x = prm(g, p, "x");
            let y = g.relu(x);
            weighted_sum(g, p, y)
        }),
    );

    let p = store(vec![
        ("a", rand_tensor(&mut rng, &[2, 3])),
        ("b", rand_tensor(&mut rng, &[2, 3])),
        ("r", rand_tensor(&mut rng, &[2, 3])),
    ]);
    push(
        "add",
        finite_difference_gradcheck(&p, &only(&["a", "b"]), GRAD_STEP, |g, p| {
            let (a, b) = (prm(g, p, "a"), prm(g, p, "b"));
            let y = g.add(a, b)?;
            weighted_sum(g, p, y)
        }),
    );
    push(
        "mul",
        finite_difference_gradcheck(&p, &only(&["a", "b"]), GRAD_STEP, |g, p| {
            let (a, b) = (prm(g, p, "a"), prm(g, p, "b"));
            let y = g.mul(a, b)?;
            weighted_sum(g, p, y)
        }),
    );
    push(
        "scale",
        finite_difference_gradcheck(&p, &only(&["a"]), GRAD_STEP, |g, p| {
            let a = prm(g, p, "a");
            let y = g.scale(a, -1.7);
            weighted_sum(g, p, y)
        }),
    );
    push(
        "sum",
        finite_difference_gradcheck(&p, &only(&["a"]), GRAD_STEP, |g, p| {
            let a = prm(g, p, "a");
            let sq = g.mul(a, a)?;
            Ok(g.sum(sq))
        }),
    );
    push(
        "mean",
        finite_difference_gradcheck(&p, &only(&["a"]), GRAD_STEP, |g, p| {
            let a = prm(g, p, "a");
            let sq = g.mul(a, a)?;
            Ok(g.mean(sq))
        }),
    );
    push(
        "sigmoid",
        finite_difference_gradcheck(&p, &only(&["a"]), GRAD_STEP, |g, p| {
            let a = prm(g, p, "a");
            let y = g.sigmoid(a);
            weighted_sum(g, p, y)
        }),
    );

    let p = store(vec![
        ("x", rand_tensor(&mut rng, &[3, 4, 4])),
        ("gamma", rand_tensor(&mut rng, &[3])),
        ("beta", rand_tensor(&mut rng, &[3])),
        ("r", rand_tensor(&mut rng, &[3, 4, 4])),
    ]);
    push(
        "channel_norm",
        finite_difference_gradcheck(&p, &only(&["x", "gamma", "beta"]), GRAD_STEP, |g, p| {
            let (x, gm, bt) = (prm(g, p, "x"), prm(g, p, "gamma"), prm(g, p, "beta"));
            let y = g.channel_norm(x, gm, bt)?;
            weighted_sum(g, p, y)
        }),
    );

    let p = store(vec![("x", rand_tensor(&mut rng, &[3, 4, 5])), ("r", rand_tensor(&mut rng, &[3]))]);
    push(
        "global_avg_pool",
        finite_difference_gradcheck(&p, &only(&["x"]), GRAD_STEP, |g, p| {
            let x = prm(g, p, "x");
            let y = g.global_avg_pool(x)?;
            weighted_sum(g, p, y)
        }),
    );

    let p = store(vec![
        ("x", rand_tensor(&mut rng, &[5])),
        ("w", rand_tensor(&mut rng, &[4, 5])),
        ("b", rand_tensor(&mut rng, &[4])),
        ("r", rand_tensor(&mut rng, &[4])),
    ]);
    push(
        "linear",
        finite_difference_gradcheck(&p, &only(&["x", "w", "b"]), GRAD_STEP, |g, p| {
            let (x, w, b) = (prm(g, p, "x"), prm(g, p, "w"), prm(g, p, "b"));
            let y = g.linear(x, w, b)?;
            weighted_sum(g, p, y)
        }),
    );

    let a = rand_tensor(&mut rng, &[6]);
    let near = a.map(|v| v + 0.3 * (v * 7.0).sin());
    let opposite = a.map(|v| -v + 0.2 * (v * 5.0).cos());
    for (label, b, same) in [
        ("cosine same-class", rand_tensor(&mut rng, &[6]), true),
        ("cosine different-class", near, false),
        ("cosine different-class clamped", opposite, false),
    ] {
        let p = store(vec![("a", a.clone()), ("b", b)]);
        push(
            label,
            finite_difference_gradcheck(&p, &only(&["a", "b"]), GRAD_STEP, move |g, p| {
                let (a, b) = (prm(g, p, "a"), prm(g, p, "b"));
                g.cosine_embedding_loss(a, b, same)
            }),
        );
    }

    for (label, z, target, alpha, gamma) in [
        ("focal positive", 0.4, true, 0.8, 3.0),
        ("focal negative", -1.3, false, 0.2, 3.0),
        ("focal as cross-entropy", 2.1, true, 1.0, 0.0),
        ("focal fractional gamma", -0.7, true, 0.8, 1.5),
    ] {
        let p = store(vec![("z", Tensor::from_vec(vec![z]))]);
        push(
            label,
            finite_difference_gradcheck(&p, &ParamSubset::all(), GRAD_STEP, move |g, p| {
                let z = prm(g, p, "z");
                g.binary_focal(z, target, alpha, gamma)
            }),
        );
    }

    let p = store(vec![("h", rand_tensor(&mut rng, &[6]))]);
    for (label, theta, target) in [("goodness positive", 1.5, true), ("goodness negative", 0.5, false)] {
        push(
            label,
            finite_difference_gradcheck(&p, &ParamSubset::all(), GRAD_STEP, move |g, p| {
                let h = prm(g, p, "h");
                Ok(g.goodness_logistic(h, theta, target))
            }),
        );
    }

    let (model, x1, x2) = random_model(&mut rng, seed);
    push(
        "four-block model",
        finite_difference_gradcheck(&model.params, &ParamSubset::all(), GRAD_STEP, |g, p| {
            let a = g.input(x1.clone());
            let b = g.input(x2.clone());
            let ea = embed_graph(g, p, &model.config, a)?;
            let eb = embed_graph(g, p, &model.config, b)?;
            let z = head_graph(g, p, ea.final_embedding)?;
            let focal = g.binary_focal(z, true, 0.8, 3.0)?;
            let cos = g.cosine_embedding_loss(ea.final_embedding, eb.final_embedding, true)?;
            let local = g.cosine_embedding_loss(ea.block_embeddings[1], eb.block_embeddings[1], true)?;
            let l = g.add(focal, cos)?;
            g.add(l, local)
        }),
    );
    out
}

/// A randomly initialised four-block model in double precision with two
/// random 32×32 inputs.
pub fn random_model(rng: &mut ChaCha8Rng, seed: u64) -> (Model<f64>, Tensor<f64>, Tensor<f64>) {
    let cfg = ModelConfig {
        num_blocks: 4,
        base_channels: 2,
        embedding_dim: 4,
        input_size: 32,
        seed,
    };
    let mut model: Model<f64> = build_model(&cfg).unwrap().cast();
    // Non-trivial norm scales and biases so every path carries gradient.
    for (_, t) in model.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let x1 = Tensor::from_fn(&[1, 32, 32], |_| rng.random_range(0.0..1.0));
    let x2 = Tensor::from_fn(&[1, 32, 32], |_| rng.random_range(0.0..1.0));
    (model, x1, x2)
}

// ---------------------------------------------------------------- oracles

/// Exhaustive pair counting: `(#{s⁺ > s⁻} + ½ #{s⁺ = s⁻}) / (P·N)`.
pub fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num2, mut p, mut n) = (0u64, 0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            p += 1;
        } else {
            n += 1;
        }
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            num2 += match scores[i].partial_cmp(&scores[j]).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    num2 as f64 / (2 * p * n) as f64
}

pub fn dsc_brute(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut i, mut sa, mut sb) = (0u64, 0u64, 0u64);
    let (h, w) = a.dims();
    for r in 0..h {
        for c in 0..w {
            let (x, y) = (a.is_set(r, c), b.is_set(r, c));
            i += u64::from(x && y);
            sa += u64::from(x);
            sb += u64::from(y);
        }
    }
    if sa + sb == 0 {
        1.0
    } else {
        2.0 * i as f64 / (sa + sb) as f64
    }
}

fn points(m: &BinaryMask) -> Vec<(i64, i64)> {
    let (h, w) = m.dims();
    (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| m.is_set(r, c))
        .map(|(r, c)| (r as i64, c as i64))
        .collect()
}

/// Symmetric Hausdorff distance over all point pairs; `None` if either set is empty.
pub fn hausdorff_brute(a: &BinaryMask, b: &BinaryMask) -> Option<f64> {
    let (pa, pb) = (points(a), points(b));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| {
        from.iter()
            .map(|&(r, c)| to.iter().map(|&(s, d)| (r - s).pow(2) + (c - d).pow(2)).min().unwrap())
            .max()
            .unwrap()
    };
    Some((directed(&pa, &pb).max(directed(&pb, &pa)) as f64).sqrt())
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let density = rng.random_range(0.0..0.6);
    BinaryMask::from_fn(h, w, |_, _| rng.random_bool(density))
}

// ---------------------------------------------------------------- phantoms

/// 256-pixel phantoms with tumors sized so both margin and no-margin
/// geometries fit.
pub fn phantom_config(seed: u64) -> PhantomConfig {
    PhantomConfig {
        image_size: 256,
        tumor_radius: [36.0, 52.0],
        contrast: 0.25,
        seed,
        ..PhantomConfig::default()
    }
}

pub fn patch_spec() -> PatchSpec {
    PatchSpec {
        stride_positive: 12,
        stride_negative: NegativeStrides {
            train: 16,
            val: 24,
            test: 24,
        },
        ..PatchSpec::default()
    }
}

/// Thirty images: 20 train, 5 val, 5 test. Val and test always carry a margin.
pub struct PhantomSet {
    pub train: Vec<PatchRecord>,
    pub val: Vec<PatchRecord>,
    pub test: Vec<PatchRecord>,
    pub test_samples: Vec<PhantomSample>,
}

pub fn phantom_set(seed: u64) -> PhantomSet {
    let cfg = phantom_config(seed);
    let with_margin = PhantomConfig {
        margin_present: 1.0,
        ..cfg.clone()
    };
    let spec = patch_spec();
    let mut set = PhantomSet {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        test_samples: Vec::new(),
    };
    for i in 0..30u64 {
        let (split, c) = match i {
            0..20 => (Split::Train, &cfg),
            20..25 => (Split::Val, &with_margin),
            _ => (Split::Test, &with_margin),
        };
        let s = generate_sample(c, i).unwrap();
        let patches = extract_patches(&s.image, &s.mask, &spec, split, ClassPolicy::Both).unwrap();
        match split {
            Split::Train => set.train.extend(patches),
            Split::Val => set.val.extend(patches),
            Split::Test => {
                set.test.extend(patches);
                set.test_samples.push(s);
            }
        }
    }
    set
}

pub fn model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        base_channels: 8,
        embedding_dim: 32,
        seed,
        ..ModelConfig::default()
    }
}

pub fn finetune_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 5,
        lr0: 1e-3,
        seed,
        max_batches_per_epoch: Some(30),
        ..TrainConfig::default()
    }
}

pub fn pretrain_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        ..finetune_config(seed)
    }
}

pub fn patch_auc(model: &Model, patches: &[PatchRecord]) -> f64 {
    let xs: Vec<_> = patches.iter().map(|p| &p.pixels).collect();
    let s = predict_probabilities(model, &xs).unwrap();
    let l: Vec<bool> = patches.iter().map(|p| p.label == 1).collect();
    auc(&s, &l).unwrap()
}

pub struct PipelineRun {
    pub pipeline: Model,
    pub pipeline_auc: f64,
    pub baseline_auc: f64,
    pub seconds: f64,
}

/// local → global → finetune against finetune-only with the same
/// fine-tuning budget, evaluated on held-out test patches.
pub fn pipeline_vs_baseline(set: &PhantomSet, seed: u64) -> PipelineRun {
    let t = Instant::now();
    let fp = FocalParams::default();
    let mut m = build_model(&model_config(seed)).unwrap();
    pretrain_local(&mut m, &set.train, &pretrain_config(seed)).unwrap();
    pretrain_global(&mut m, &set.train, &pretrain_config(seed)).unwrap();
    finetune(&mut m, &set.train, &set.val, &fp, &finetune_config(seed)).unwrap();
    let mut b = build_model(&model_config(seed)).unwrap();
    finetune(&mut b, &set.train, &set.val, &fp, &finetune_config(seed)).unwrap();
    PipelineRun {
        pipeline_auc: patch_auc(&m, &set.test),
        baseline_auc: patch_auc(&b, &set.test),
        pipeline: m,
        seconds: t.elapsed().as_secs_f64(),
    }
}

// ---------------------------------------------------------------- cli chain

pub const SMOKE_CONFIG: &str = r#"{
  "phantom": {"image_size": 256, "tumor_radius": [36, 52], "seed": 3},
  "splits": {"train": 4, "val": 2, "test": 2},
  "patches": {"stride_positive": 16, "stride_negative": {"train": 24, "val": 24, "test": 24}},
  "model": {"base_channels": 4, "embedding_dim": 16, "num_blocks": 3},
  "train": {"epochs": 2, "lr0": 0.001, "max_batches_per_epoch": 5},
  "predict": {"grid_stride": 16}
}
"#;

/// Runs the `margin` binary with `args` and returns its exit code.
pub fn margin(args: &[&str]) -> i32 {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_margin"))
        .args(args)
        .env_remove("FFCL_REFINE_ENDPOINT")
        .output()
        .expect("binary runs");
    if !out.status.success() {
        eprintln!("margin {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().unwrap_or(-1)
}

/// The whole command chain on a small phantom set under `root`, from
/// generation through refinement, evaluation and a 2×2 focal ablation.
/// Returns `(command, exit code)` per step.
pub fn run_chain(root: &std::path::Path) -> Vec<(&'static str, i32)> {
    let cfg = root.join("config.json");
    std::fs::create_dir_all(root).unwrap();
    std::fs::write(&cfg, SMOKE_CONFIG).unwrap();
    let p = |rel: &str| root.join(rel).to_str().unwrap().to_string();
    let c = p("config.json");
    let manifest = p("data/manifest.json");
    let steps: Vec<(&'static str, Vec<String>)> = vec![
        ("phantom gen", vec!["phantom".into(), "gen".into(), "--out".into(), p("data")]),
        ("patches extract", vec!["patches".into(), "extract".into(), "--manifest".into(), manifest.clone(), "--split".into(), "train".into(), "--out".into(), p("patches")]),
        ("train local", vec!["train".into(), "local".into(), "--manifest".into(), manifest.clone(), "--out".into(), p("ckpt/local.ckpt")]),
        ("train global", vec!["train".into(), "global".into(), "--manifest".into(), manifest.clone(), "--in".into(), p("ckpt/local.ckpt"), "--out".into(), p("ckpt/global.ckpt")]),
        ("train finetune", vec!["train".into(), "finetune".into(), "--manifest".into(), manifest.clone(), "--in".into(), p("ckpt/global.ckpt"), "--out".into(), p("ckpt/final.ckpt")]),
        ("predict", vec!["predict".into(), "--ckpt".into(), p("ckpt/final.ckpt"), "--manifest".into(), manifest.clone(), "--out".into(), p("pred/preds.json")]),
        ("reconstruct", vec!["reconstruct".into(), "--preds".into(), p("pred/preds.json"), "--out".into(), p("coarse")]),
        ("refine", vec!["refine".into(), "--masks".into(), p("coarse"), "--images".into(), p("data/images"), "--out".into(), p("refined")]),
        ("eval coarse", vec!["eval".into(), "--pred".into(), p("coarse"), "--truth".into(), p("data/masks"), "--out".into(), p("eval/coarse.json")]),
        ("eval refined", vec!["eval".into(), "--pred".into(), p("refined"), "--truth".into(), p("data/masks"), "--out".into(), p("eval/refined.json")]),
        ("eval patches", vec!["eval".into(), "patches".into(), "--preds".into(), p("pred/preds.json"), "--out".into(), p("eval/patches.json"), "--roc".into(), p("eval/roc.csv")]),
        ("ablate focal", vec!["ablate".into(), "focal".into(), "--manifest".into(), manifest, "--alphas".into(), "0.25,0.8".into(), "--gammas".into(), "0,3".into(), "--in".into(), p("ckpt/global.ckpt"), "--out".into(), p("ablate")]),
    ];
    steps
        .into_iter()
        .map(|(name, mut args)| {
            args.extend(["--config".to_string(), c.clone()]);
            let refs: Vec<&str> = args.iter().map(String::as_str).collect();
            (name, margin(&refs))
        })
        .collect()
}

/// Relative paths of every file under `root`, sorted.
pub fn files_under(root: &std::path::Path) -> Vec<std::path::PathBuf> {
    fn walk(dir: &std::path::Path, root: &std::path::Path, out: &mut Vec<std::path::PathBuf>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}
