//! Refinement through an HTTP segmentation bridge.
//!
//!     cargo run --release --example remote_refine -- http://127.0.0.1:8765
//!
//! The endpoint may also come from `FFCL_REFINE_ENDPOINT`.

use margin_ffcl::metrics::dsc;
use margin_ffcl::patchflow::{reconstruct_coarse_mask, window_labels, Aggregation};
use margin_ffcl::phantom::{generate_sample, PhantomConfig};
use margin_ffcl::refinement::{Backend, RefinementConfig, Refiner};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let endpoint = std::env::args().nth(1).or_else(|| std::env::var("FFCL_REFINE_ENDPOINT").ok());
    let Some(endpoint) = endpoint else {
        eprintln!("usage: remote_refine <endpoint>  (or set FFCL_REFINE_ENDPOINT)");
        std::process::exit(1);
    };
    let refiner = Refiner::new(&RefinementConfig {
        backend: Backend::Remote,
        endpoint: Some(endpoint),
        ..RefinementConfig::default()
    })?;
    match refiner.check_backend() {
        Ok(name) => println!("bridge backend: {name}"),
        Err(e) => {
            eprintln!("bridge not usable: {e}");
            std::process::exit(3);
        }
    }

    let cfg = PhantomConfig {
        margin_present: 1.0,
        seed: 4,
        ..PhantomConfig::default()
    };
    for i in 0..3 {
        let s = generate_sample(&cfg, i)?;
        let truth = s.mask.select(&[2, 3]);
        let coarse = reconstruct_coarse_mask(&window_labels(&truth, 64, 12, 0.5), truth.dims(), 64, Aggregation::default())?;
        if coarse.is_empty() {
            continue;
        }
        let r = refiner.refine(&s.image, &coarse, &format!("phantom-{i}"))?;
        println!(
            "sample {i}: DSC coarse {:.3}, box stage {:.3}, mask stage {:.3}  ({:.0} + {:.0} ms)",
            dsc(&coarse, &truth)?,
            dsc(&r.m1, &truth)?,
            dsc(&r.m2, &truth)?,
            r.latency_ms[0],
            r.latency_ms[1]
        );
    }
    Ok(())
}
