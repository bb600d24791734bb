//! Two-sample comparison (KS, Welch t, Cohen's d) and R² / Spearman on
//! small hand-made samples.
//!
//! `cargo run --release --example stats`

use poregan::stats::{compare, mae, r_squared, spearman};

fn main() -> poregan::Result<()> {
    let real = [0.18, 0.21, 0.19, 0.22, 0.20, 0.23, 0.17, 0.21];
    let close = [0.19, 0.20, 0.21, 0.22, 0.18, 0.22, 0.19, 0.20];
    let shifted = [0.26, 0.28, 0.27, 0.30, 0.25, 0.29, 0.27, 0.28];
    println!("real vs close:   {:?}", compare(&real, &close)?);
    println!("real vs shifted: {:?}", compare(&real, &shifted)?);

    let target = [0.10, 0.15, 0.20, 0.25, 0.30];
    let observed = [0.11, 0.14, 0.21, 0.24, 0.31];
    println!("R2 {:.4} MAE {:.4} Spearman {:.3}", r_squared(&target, &observed)?, mae(&target, &observed)?, spearman(&target, &observed)?);
    Ok(())
}
