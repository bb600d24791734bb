//! Pore-network descriptors on analytic masks and on a synthetic section.
//!
//! `cargo run --release --example morphology`

use poregan::dataprep::{default_styles, synthesize_corpus, SynthConfig};
use poregan::morphology::analyze;
use poregan::raster::BinaryMask;

fn main() -> poregan::Result<()> {
    let pixel = 1.0;
    let disc = BinaryMask::from_fn(128, 128, |x, y| {
        let (dx, dy) = (x as f64 - 63.5, y as f64 - 63.5);
        dx * dx + dy * dy <= 30.0 * 30.0
    });
    println!("disc r=30:        {:?}", analyze(&disc, pixel)?);

    let channel = BinaryMask::from_fn(128, 128, |_, y| (56..72).contains(&y));
    println!("straight channel: {:?}", analyze(&channel, pixel)?);

    let bent = BinaryMask::from_fn(96, 96, |x, y| (x < 52 && (40..56).contains(&y)) || ((36..52).contains(&x) && y >= 40));
    println!("bent channel:     {:?}", analyze(&bent, pixel)?);

    let cfg = SynthConfig {
        n_depths: 1,
        per_depth_count: 3,
        porosity_ranges: vec![(0.15, 0.30)],
        width: 192,
        height: 192,
        styles: default_styles(),
        seed: 3,
    };
    for s in synthesize_corpus(&cfg)? {
        // 2.5 µm per pixel
        println!("{}: {:?}", s.source_id, analyze(&s.mask, 2.5)?);
    }
    Ok(())
}
