//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fail.

mod common;

use std::time::Instant;

use common::*;
use margin_ffcl::ffcl::{cosine_embedding_loss, focal_loss, goodness, predict_grid, FocalParams};
use margin_ffcl::metrics::{auc, dsc, hausdorff, pixel_accuracy, read_roc_csv, trapezoid_area};
use margin_ffcl::model::Model;
use margin_ffcl::numerics::cosine_anneal_lr;
use margin_ffcl::patchflow::{patch_quantized_truth, reconstruct_coarse_mask, window_labels, Aggregation, PatchSpec};
use margin_ffcl::phantom::{generate_sample, PhantomConfig, PhantomSample};
use margin_ffcl::raster::BinaryMask;
use margin_ffcl::refinement::{refine, RefinementConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn gradient_check() -> Outcome {
    let t = Instant::now();
    let results = gradient_suite(2024);
    let secs = t.elapsed().as_secs_f64();
    let worst = results.iter().max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error)).unwrap();
    let checked: usize = results.iter().map(|c| c.checked).sum();
    let skipped: usize = results.iter().map(|c| c.skipped_at_kinks).sum();
    Outcome {
        name: "gradient suite",
        pass: worst.max_relative_error <= GRAD_TOL && secs < 120.0,
        detail: format!(
            "{} cases, {checked} coordinates ({skipped} skipped at ReLU kinks), worst {} rel err {:.2e} (tol 1e-4), {secs:.1}s (limit 120s)",
            results.len(),
            worst.name,
            worst.max_relative_error
        ),
    }
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut auc_ok = 0;
    for _ in 0..500 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..50);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        auc_ok += usize::from(auc(&scores, &labels).unwrap() == auc_pairs(&scores, &labels));
    }
    let (mut dsc_ok, mut hd_ok) = (0, 0);
    for _ in 0..500 {
        let (h, w) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let (a, b) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        dsc_ok += usize::from(dsc(&a, &b).unwrap() == dsc_brute(&a, &b));
        hd_ok += usize::from(match hausdorff_brute(&a, &b) {
            Some(v) => hausdorff(&a, &b).unwrap() == v,
            None => hausdorff(&a, &b).is_err(),
        });
    }
    let hand_auc = auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
    let a = BinaryMask::from_fn(4, 4, |r, c| r == 0 && c < 2);
    let b = BinaryMask::from_fn(4, 4, |r, c| r == 0 && (1..3).contains(&c));
    let hand_dsc = dsc(&a, &b).unwrap();
    let hand_hd = hausdorff(&BinaryMask::from_fn(5, 5, |r, c| r == 0 && c == 0), &BinaryMask::from_fn(5, 5, |r, c| r == 3 && c == 4)).unwrap();
    Outcome {
        name: "metric oracles",
        pass: auc_ok == 500 && dsc_ok == 500 && hd_ok == 500 && hand_auc == 0.75 && hand_dsc == 0.5 && hand_hd == 5.0,
        detail: format!(
            "AUC {auc_ok}/500, DSC {dsc_ok}/500, HD {hd_ok}/500 exact; hand AUC {hand_auc}, DSC {hand_dsc}, HD {hand_hd}"
        ),
    }
}

fn closed_forms() -> Outcome {
    let f = focal_loss(0.5, 1, &FocalParams { alpha: 0.8, gamma: 3.0 }).unwrap();
    let s = std::f32::consts::FRAC_1_SQRT_2;
    let c = cosine_embedding_loss(&[1.0, 0.0], &[s, s], 1, 1).unwrap();
    let g = goodness(&[1.0, 2.0, 3.0]);
    let (lr0, lr_min) = (1e-3, 1e-5);
    let mid = cosine_anneal_lr(25, 50, lr0, lr_min).unwrap();
    let pass = (f - 0.0693).abs() <= 1e-4 && (c - 0.2929).abs() <= 1e-4 && g == 14.0 && (mid - (lr0 + lr_min) / 2.0).abs() <= 1e-9;
    Outcome {
        name: "closed-form checks",
        pass,
        detail: format!("focal {f:.6}, cosine {c:.6}, goodness {g}, anneal midpoint {mid:e}"),
    }
}

fn round_trip() -> Outcome {
    let cfg = PhantomConfig {
        margin_present: 1.0,
        seed: 9,
        ..PhantomConfig::default()
    };
    let spec = PatchSpec::default();
    let agg = Aggregation::MeanVote { threshold: 0.5 };
    let truths: Vec<BinaryMask> = (0..20).map(|i| generate_sample(&cfg, i).unwrap().mask.select(&[2, 3])).collect();
    let quantized: Vec<BinaryMask> = truths
        .iter()
        .map(|t| patch_quantized_truth(t, spec.patch_size, spec.label_fraction, agg).unwrap())
        .collect();
    let at_stride = |stride: usize| -> (f64, f64) {
        let d: Vec<f64> = truths
            .iter()
            .zip(&quantized)
            .map(|(t, q)| {
                let windows = window_labels(t, spec.patch_size, stride, spec.label_fraction);
                let rebuilt = reconstruct_coarse_mask(&windows, t.dims(), spec.patch_size, agg).unwrap();
                dsc(&rebuilt, q).unwrap()
            })
            .collect();
        (d.iter().sum::<f64>() / d.len() as f64, d.iter().cloned().fold(f64::INFINITY, f64::min))
    };
    let (mean, min) = at_stride(2);
    let sweep: Vec<String> = [3, 4, 8].iter().map(|&s| format!("{s}: {:.4}", at_stride(s).0)).collect();
    let empty = quantized.iter().filter(|q| q.is_empty()).count();
    Outcome {
        name: "round trip",
        pass: mean >= 0.95,
        detail: format!(
            "20 lesion masks at stride 2: mean DSC {mean:.4} (min {min:.4}), need mean >= 0.95; {empty} empty at patch resolution; other strides {}",
            sweep.join(", ")
        ),
    }
}

fn table2(runs: &[(u64, PipelineRun)], total_secs: f64) -> Outcome {
    let n = runs.len() as f64;
    let mp = runs.iter().map(|r| r.1.pipeline_auc).sum::<f64>() / n;
    let mb = runs.iter().map(|r| r.1.baseline_auc).sum::<f64>() / n;
    let all_high = runs.iter().all(|r| r.1.pipeline_auc >= 0.90);
    let per_seed: Vec<String> = runs
        .iter()
        .map(|(s, r)| format!("seed {s}: {:.4} vs {:.4} ({:.0}s)", r.pipeline_auc, r.baseline_auc, r.seconds))
        .collect();
    Outcome {
        name: "pretraining vs finetune-only",
        pass: all_high && mp > mb && total_secs <= 900.0,
        detail: format!(
            "mean AUC {mp:.4} vs baseline {mb:.4}; {}; total {total_secs:.0}s (limit 900s)",
            per_seed.join(", ")
        ),
    }
}

fn table3(model: &Model, samples: &[PhantomSample]) -> Outcome {
    let cfg = RefinementConfig::default();
    let agg = Aggregation::MeanVote { threshold: 0.5 };
    let p = model.config.input_size;
    let (mut coarse_sum, mut refined_sum, mut worst_drop) = (0.0, 0.0, f64::NEG_INFINITY);
    let mut skipped = 0;
    for s in samples {
        let grid = predict_grid(model, &s.image, 8).unwrap();
        let votes: Vec<_> = grid.iter().map(|&(o, prob)| (o, u8::from(prob >= 0.5))).collect();
        let coarse = reconstruct_coarse_mask(&votes, s.image.dims(), p, agg).unwrap();
        let refined = if coarse.is_empty() {
            skipped += 1;
            coarse.clone()
        } else {
            refine(&s.image, &coarse, &cfg).unwrap().m2
        };
        let truth = s.mask.select(&[3]);
        coarse_sum += dsc(&coarse, &truth).unwrap();
        refined_sum += dsc(&refined, &truth).unwrap();
        worst_drop = worst_drop.max(pixel_accuracy(&coarse, &truth).unwrap() - pixel_accuracy(&refined, &truth).unwrap());
    }
    let n = samples.len() as f64;
    let (c, r) = (coarse_sum / n, refined_sum / n);
    Outcome {
        name: "refinement over coarse masks",
        pass: r - c >= 0.02 && worst_drop <= 0.01,
        detail: format!(
            "mean DSC {c:.4} -> {r:.4} ({:+.4}, need >= +0.02); worst accuracy drop {worst_drop:.4} (limit 0.01); {skipped} empty coarse masks",
            r - c
        ),
    }
}

fn focal_ablation(root: &std::path::Path, chain_ok: bool) -> Outcome {
    let read = || -> Result<(usize, usize, f64), String> {
        let text = std::fs::read_to_string(root.join("ablate/ablation.json")).map_err(|e| e.to_string())?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let runs = v["runs"].as_array().ok_or("no runs")?;
        let csvs = files_under(&root.join("ablate"))
            .iter()
            .filter(|p| p.to_string_lossy().starts_with("roc_"))
            .count();
        let mut worst = 0.0f64;
        for r in runs {
            let roc = read_roc_csv(root.join("ablate").join(r["roc_csv"].as_str().ok_or("no csv name")?)).map_err(|e| e.to_string())?;
            let a = r["auc"].as_f64().ok_or("no auc")?;
            worst = worst.max((trapezoid_area(&roc) - a).abs());
        }
        Ok((runs.len(), csvs, worst))
    };
    match read() {
        Ok((runs, csvs, worst)) => Outcome {
            name: "focal ablation harness",
            pass: chain_ok && runs == 4 && csvs == 4 && worst <= 1e-12,
            detail: format!("{runs} (alpha, gamma) runs, {csvs} ROC CSVs, max |area - AUC| {worst:.1e} (tol 1e-12)"),
        },
        Err(e) => Outcome {
            name: "focal ablation harness",
            pass: false,
            detail: e,
        },
    }
}

fn reproducibility(a: &std::path::Path, b: &std::path::Path, chains_ok: bool) -> Outcome {
    let (fa, fb) = (files_under(a), files_under(b));
    let compared: Vec<_> = fa.iter().filter(|p| p.file_name().is_some_and(|n| n != "timing.json")).collect();
    let differing: Vec<String> = compared
        .iter()
        .filter(|p| std::fs::read(a.join(p)).ok() != std::fs::read(b.join(p)).ok())
        .map(|p| p.display().to_string())
        .collect();
    let pass = chains_ok && fa == fb && differing.is_empty();
    Outcome {
        name: "reproducibility",
        pass,
        detail: if differing.is_empty() {
            format!("{} files byte-identical across two runs (timing.json excluded)", compared.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    }
}

fn latency() -> Outcome {
    let cfg = PhantomConfig {
        margin_present: 1.0,
        seed: 4,
        ..PhantomConfig::default()
    };
    let s = generate_sample(&cfg, 0).unwrap();
    let truth = s.mask.select(&[2, 3]);
    let agg = Aggregation::MeanVote { threshold: 0.5 };
    // A blocky mask of the kind strided reconstruction produces.
    let coarse = reconstruct_coarse_mask(&window_labels(&truth, 64, 12, 0.5), truth.dims(), 64, agg).unwrap();
    let rc = RefinementConfig::default();
    refine(&s.image, &coarse, &rc).unwrap();
    let mut ms: Vec<f64> = (0..15)
        .map(|_| {
            let t = Instant::now();
            refine(&s.image, &coarse, &rc).unwrap();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    ms.sort_by(f64::total_cmp);
    let median = ms[ms.len() / 2];
    Outcome {
        name: "refiner latency",
        pass: median <= 100.0,
        detail: format!("512x512: median {median:.1} ms, max {:.1} ms over 15 runs (limit 100 ms)", ms[ms.len() - 1]),
    }
}

fn main() {
    let mut outcomes = Vec::new();
    let mut report = |o: Outcome| {
        println!("{} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
        outcomes.push(o.pass);
    };
    report(gradient_check());
    report(metric_oracles());
    report(closed_forms());
    report(round_trip());

    let t = Instant::now();
    let mut runs = Vec::new();
    let mut table3_input = None;
    for seed in 0..3u64 {
        let set = phantom_set(seed);
        let run = pipeline_vs_baseline(&set, seed);
        if seed == 0 {
            table3_input = Some((run.pipeline.clone(), set.test_samples));
        }
        runs.push((seed, run));
    }
    report(table2(&runs, t.elapsed().as_secs_f64()));
    let (model, samples) = table3_input.expect("seed 0 ran");
    report(table3(&model, &samples));

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ok = |steps: Vec<(&str, i32)>| steps.iter().all(|s| s.1 == 0);
    let ok_a = ok(run_chain(&a));
    let ok_b = ok(run_chain(&b));
    report(focal_ablation(&a, ok_a));
    report(reproducibility(&a, &b, ok_a && ok_b));
    report(latency());

    let failed = outcomes.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
