//! Trains the toy conditional GAN for a few epochs on a balanced synthetic
//! set and writes generated patches for a sweep of target porosities.
//!
//! `cargo run --release --example cgan -- [epochs] [out_dir]`

use std::path::PathBuf;

use poregan::cgan::{train, Arch, GanSpec, GanTrainConfig};
use poregan::dataprep::{
    assign_classes, balance_dataset, build_class_scheme, default_styles, extract_patches, synthesize_corpus,
    BalanceConfig, SynthConfig,
};
use poregan::raster::{porosity_of_mask, ColorThreshold, DepthLabel, MaskPredictor, PatchRecord};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let out = PathBuf::from(std::env::args().nth(2).unwrap_or_else(|| "cgan_out".into()));
    std::fs::create_dir_all(&out)?;

    let cfg = SynthConfig {
        n_depths: 2,
        per_depth_count: 30,
        porosity_ranges: vec![(0.08, 0.30), (0.12, 0.38)],
        width: 192,
        height: 192,
        styles: default_styles(),
        seed: 1,
    };
    let seg = ColorThreshold::default();
    let mut records = Vec::new();
    for s in synthesize_corpus(&cfg)? {
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
    let scheme = build_class_scheme(&per_depth, 10)?;
    assign_classes(&mut records, &scheme);
    let balanced = balance_dataset(records, &scheme, &BalanceConfig { target_per_class: 32, min_class_size: 4, seed: 0 }, &seg)?;

    let spec = GanSpec::preset(Arch::Original, 2, true);
    let train_cfg = GanTrainConfig { epochs, ..GanTrainConfig::toy() };
    let outcome = train(&balanced.records, spec, &train_cfg, &seg, None)?;
    println!("best epoch {} probe R2 {:.3}", outcome.log.best_epoch, outcome.log.best_r2);

    for d in 0..2 {
        for phi in [0.12, 0.20, 0.28] {
            let g = outcome.best.generate(phi, DepthLabel::new(d, 2)?, 1, 42)?;
            let img = &g.images[0];
            let got = porosity_of_mask(&seg.predict_mask(img)?)?;
            img.save(&out.join(format!("d{d}_phi{phi:.2}.png")))?;
            println!("depth {d} target {phi:.2} -> measured {got:.3}{}", if g.out_of_range { " (out of range)" } else { "" });
        }
    }
    outcome.best.save(&out.join("gan.ckpt"))?;
    Ok(())
}
