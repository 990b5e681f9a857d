//! Generates a small phantom dataset on disk and summarises its labels.
//!
//!     cargo run --release --example phantom_dataset -- [out_dir]

use margin_ffcl::patchflow::{Manifest, Split};
use margin_ffcl::phantom::{generate_dataset, PhantomConfig, SplitCounts};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("margin_phantoms"));
    let cfg = PhantomConfig {
        image_size: 256,
        tumor_radius: [36.0, 52.0],
        seed: 1,
        ..PhantomConfig::default()
    };
    let counts = SplitCounts { train: 6, val: 2, test: 2 };
    generate_dataset(&cfg, counts, &out)?;

    // Reload through the manifest, the same way the CLI does.
    let manifest = Manifest::load(out.join("manifest.json"))?;
    for split in Split::ALL {
        for e in manifest.split(split) {
            let (image, mask) = manifest.load_entry(e)?;
            let (h, w) = image.dims();
            println!(
                "{:<5} {:<10} {h}x{w}  specimen {:>6}  tumor {:>5}  margin {:>5}",
                format!("{split:?}"),
                e.id(),
                mask.count(1),
                mask.count(2),
                mask.count(3)
            );
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
