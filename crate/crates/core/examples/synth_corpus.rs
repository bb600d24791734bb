//! Synthesizes a small two-depth thin-section corpus, runs the REV analysis
//! and picks a patch size, then cuts and balances patches.
//!
//! `cargo run --release --example synth_corpus -- [out_dir]`

use std::path::PathBuf;

use poregan::dataprep::{
    assign_classes, balance_dataset, build_class_scheme, default_styles, extract_patches, rev_curve_from_masks,
    select_patch_size, synthesize_corpus, BalanceConfig, SynthConfig,
};
use poregan::raster::{porosity_of_mask, ColorThreshold, MaskPredictor, PatchRecord};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synth_out".into()));
    std::fs::create_dir_all(&out)?;

    let cfg = SynthConfig {
        n_depths: 2,
        per_depth_count: 12,
        porosity_ranges: vec![(0.08, 0.30), (0.12, 0.38)],
        width: 192,
        height: 192,
        styles: default_styles(),
        seed: 7,
    };
    let corpus = synthesize_corpus(&cfg)?;
    for s in corpus.iter().take(4) {
        s.image.save(&out.join(format!("{}.png", s.source_id)))?;
        s.mask.save(&out.join(format!("{}_mask.png", s.source_id)))?;
    }
    println!("wrote {} images ({} saved to {})", corpus.len(), 4, out.display());

    let sizes = [12, 24, 48, 96, 144];
    let mut curves = Vec::new();
    for d in 0..2 {
        let masks: Vec<_> = corpus.iter().filter(|s| s.depth.index == d).map(|s| s.mask.clone()).collect();
        let curve = rev_curve_from_masks(&masks, &sizes, 64, 0)?;
        println!("depth {d} REV sigma per size: {:?}", curve.sizes.iter().zip(&curve.std).collect::<Vec<_>>());
        curves.push(curve);
    }
    let choice = select_patch_size(&curves, 0.05)?;
    println!("patch size {} (fallback: {})", choice.size, choice.fallback);

    let seg = ColorThreshold::default();
    let mut records = Vec::new();
    for s in &corpus {
        for (k, p) in extract_patches(&s.image, 96, 48)?.into_iter().enumerate() {
            let porosity = porosity_of_mask(&seg.predict_mask(&p)?)?;
            records.push(PatchRecord {
                image: p,
                porosity,
                depth: s.depth,
                porosity_class: None,
                augmented: false,
                source_id: format!("{}_{k}", s.source_id),
            });
        }
    }
    let per_depth: Vec<Vec<f64>> =
        (0..2).map(|d| records.iter().filter(|r| r.depth.index == d).map(|r| r.porosity).collect()).collect();
    let scheme = build_class_scheme(&per_depth, 5)?;
    assign_classes(&mut records, &scheme);
    let balanced = balance_dataset(records, &scheme, &BalanceConfig { target_per_class: 12, min_class_size: 2, seed: 0 }, &seg)?;
    println!("balanced set: {} patches, {} excluded cells", balanced.records.len(), balanced.excluded.len());
    for c in &balanced.cells {
        println!("  {c:?}");
    }
    Ok(())
}
