//! Trains a small U-Net on synthetic thin sections and reports held-out
//! Dice / IoU, then segments one fresh image.
//!
//! `cargo run --release --example segment`

use poregan::dataprep::{default_styles, synthesize_corpus, SynthConfig};
use poregan::segmentation::{dice_binary, segment, train_segmenter, SegTrainConfig, SegmentationNetSpec};

fn main() -> poregan::Result<()> {
    let cfg = SynthConfig {
        n_depths: 2,
        per_depth_count: 60,
        porosity_ranges: vec![(0.05, 0.35), (0.10, 0.40)],
        width: 48,
        height: 48,
        styles: default_styles(),
        seed: 1,
    };
    let data: Vec<_> = synthesize_corpus(&cfg)?.into_iter().map(|s| (s.image, s.mask)).collect();
    let train_cfg = SegTrainConfig {
        epochs: 8,
        batch_size: 4,
        learning_rate: 3e-3,
        net: SegmentationNetSpec::toy(),
        ..Default::default()
    };
    let (net, report) = train_segmenter(&data, &train_cfg)?;
    for e in &report.history {
        println!("{e:?}");
    }
    println!("test metrics: {:?}", report.metrics);

    let fresh = synthesize_corpus(&SynthConfig { per_depth_count: 1, seed: 99, ..cfg })?;
    let mask = segment(&net, &fresh[0].image)?;
    println!("dice on a fresh image: {:.4}", dice_binary(&mask, &fresh[0].mask)?);
    Ok(())
}
