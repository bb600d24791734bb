//! Dual-constraint selection: scores a pool of synthetic candidates against
//! core porosity and permeability and keeps the best match. Also shows the
//! permeability model and a real-vs-candidate statistical comparison.
//!
//! `cargo run --release --example petro_select`

use poregan::dataprep::{default_styles, synthesize_corpus, SynthConfig};
use poregan::petro::{mask_properties, permeability, select_representative, PetroTargets, Weights};
use poregan::raster::{ColorThreshold, DepthLabel};
use poregan::stats::compare;

fn main() -> poregan::Result<()> {
    for (phi, r) in [(0.10, 2.0), (0.20, 5.0), (0.30, 10.0)] {
        println!("K(phi={phi}, r={r} um) = {:.2} mD", permeability(phi, r)?);
    }

    let pixel = 2.5;
    let cfg = SynthConfig {
        n_depths: 1,
        per_depth_count: 40,
        porosity_ranges: vec![(0.10, 0.30)],
        width: 96,
        height: 96,
        styles: default_styles(),
        seed: 11,
    };
    let pool = synthesize_corpus(&cfg)?;
    let images: Vec<_> = pool.iter().map(|s| s.image.clone()).collect();
    let target = PetroTargets::new(DepthLabel::new(0, 1)?, 0.2, 50.0)?;
    let seg = ColorThreshold::default();
    let sel = select_representative(&images, &target, &seg, pixel, Weights::new(0.5, 0.5)?)?;
    println!("selected candidate {} with E = {:.4}: {:?}", sel.index, sel.score.e, sel.properties);
    let mut sorted = sel.all_errors.clone();
    sorted.sort_by(f64::total_cmp);
    println!("median pool error {:.4}", sorted[sorted.len() / 2]);

    let real = synthesize_corpus(&SynthConfig { seed: 12, ..cfg })?;
    let porosity = |v: &[poregan::dataprep::SynthImage]| -> poregan::Result<Vec<f64>> {
        v.iter().map(|s| mask_properties(&s.mask, pixel).map(|p| p.porosity)).collect()
    };
    let report = compare(&porosity(&real)?, &porosity(&pool)?)?;
    println!("porosity, real vs pool: {report:?}");
    Ok(())
}
