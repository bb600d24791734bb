//! Acceptance gate: one PASS/FAIL line per criterion. Criteria 8-10 share
//! one toy pipeline run under `CARGO_TARGET_TMPDIR`.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use poregan::cgan::{
    assemble_discriminator_input, discriminator_loss, generator_loss, parameter_count, read_conditions, Arch, GanSpec,
};
use poregan::config::PipelineConfig;
use poregan::dataprep::{
    augment, balance_dataset, bins_from_range, default_styles, rev_curve_from_masks, synthesize_image, AugmentationOp,
    BalanceConfig, PorosityClassScheme, EPOXY_RGB, MAX_LABEL_DRIFT,
};
use poregan::morphology::{analyze, average_pore_radius, specific_surface_area, tortuosity, weighted_throat_radius};
use poregan::petro::{dual_constraint_error, permeability, PetroTargets, Weights};
use poregan::pipeline::{Pipeline, Stage};
use poregan::raster::{
    porosity_of_mask, BinaryMask, ColorThreshold, ConditionVector, DepthLabel, Geometric, MaskPredictor, PatchRecord,
    RgbImage,
};
use poregan::stats::{cohens_d, ks_test, t_test, EffectBand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[path = "gan_gradcheck.rs"]
#[allow(dead_code)]
mod gradcheck;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within_budget(t: Duration, budget_s: f64) -> Result<(), String> {
    ensure(t.as_secs_f64() <= budget_s, format!("took {:.1}s, budget {budget_s}s", t.as_secs_f64()))
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn formulas() -> Check {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let phi: f64 = rng.random_range(0.0..1.0);
        let r: f64 = rng.random_range(0.0..10.0);
        // exp(x) evaluated as e^x through powf
        let oracle = 1.3049 * std::f64::consts::E.powf(1.7432 * phi * r);
        worst = worst.max(rel(permeability(phi, r).map_err(|e| e.to_string())?, oracle));

        let (pt, kt) = (rng.random_range(0.01..0.5), rng.random_range(0.5..5000.0));
        let (pc, kc) = (rng.random_range(0.0..0.6), rng.random_range(0.0..8000.0));
        let w = rng.random_range(0.0..1.0);
        let target = PetroTargets::new(DepthLabel::new(0, 1).unwrap(), pt, kt).map_err(|e| e.to_string())?;
        let e = dual_constraint_error(pc, kc, &target, Weights::new(w, 1.0 - w).unwrap()).map_err(|e| e.to_string())?;
        // common-denominator form
        let oracle = (w * (pt - pc).abs() * kt + (1.0 - w) * (kt - kc).abs() * pt) / (pt * kt);
        worst = worst.max(rel(e.e, oracle));
    }
    ensure(worst <= 1e-12, format!("worst relative error {worst:e}"))?;
    ensure(permeability(0.0, 3.7).unwrap() == 1.3049, "K(0, r) != 1.3049")?;
    let t = PetroTargets::new(DepthLabel::new(0, 1).unwrap(), 0.137, 21.4).unwrap();
    ensure(dual_constraint_error(0.137, 21.4, &t, Weights::default()).unwrap().e == 0.0, "E != 0 at perfect match")?;
    within_budget(t0.elapsed(), 1.0)?;
    Ok(format!("worst relative error {worst:.1e}"))
}

fn shapes() -> Check {
    let t0 = Instant::now();
    let counts: Vec<usize> =
        Arch::ALL.iter().map(|&a| GanSpec::preset(a, 4, false).generator.input_channels()).collect();
    ensure(counts == [517, 389, 261], format!("generator input channels {counts:?}"))?;
    let spec = GanSpec::preset(Arch::Original, 4, false);
    let c = ConditionVector::new(0.2137, DepthLabel::new(3, 4).unwrap()).unwrap();
    let x = assemble_discriminator_input(&RgbImage::filled(480, 480, [9, 99, 199]), &c, &spec.discriminator)
        .map_err(|e| e.to_string())?;
    ensure(x.shape() == [1, 8, 480, 480], format!("discriminator input {:?}", x.shape()))?;
    let plane = 480 * 480;
    for ch in 3..8 {
        let v = &x.data()[ch * plane..(ch + 1) * plane];
        ensure(v.iter().all(|&p| p == v[0]), format!("channel {ch} not spatially constant"))?;
    }
    let back = read_conditions(&x, 4).map_err(|e| e.to_string())?;
    ensure(back.depth == c.depth && back.porosity == 0.2137f32 as f64, "conditions not recovered")?;
    within_budget(t0.elapsed(), 10.0)?;
    Ok(format!("channels {counts:?}, discriminator input 480x480x8"))
}

fn parameter_bands() -> Check {
    let t0 = Instant::now();
    let mut out = Vec::new();
    for (arch, target) in [(Arch::Original, 50e6), (Arch::ModelA, 38e6), (Arch::ModelB, 25e6)] {
        let n = parameter_count(&GanSpec::preset(arch, 4, false)) as f64;
        ensure((n / target - 1.0).abs() <= 0.2, format!("{}: {n} outside +/-20% of {target}", arch.name()))?;
        out.push(format!("{} {:.1}M", arch.name(), n / 1e6));
    }
    within_budget(t0.elapsed(), 30.0)?;
    Ok(out.join(", "))
}

fn loss_analytics() -> Check {
    let t0 = Instant::now();
    let ln2 = 2f64.ln();
    let ld = discriminator_loss(&[0.5; 8], &[0.5; 8]).map_err(|e| e.to_string())?;
    let lg = generator_loss(&[0.5; 16]).map_err(|e| e.to_string())?;
    ensure((ld - 2.0 * ln2).abs() <= 1e-9, format!("L_D = {ld}"))?;
    ensure((lg - ln2).abs() <= 1e-9, format!("L_G = {lg}"))?;
    let worst = gradcheck::worst_relative_error(24);
    ensure(worst <= 1e-3, format!("gradient check worst relative error {worst:e}"))?;
    within_budget(t0.elapsed(), 120.0)?;
    Ok(format!("gradient check on 24 parameters, worst relative error {worst:.1e}"))
}

fn disc(w: usize, h: usize, cx: f64, cy: f64, r: f64) -> BinaryMask {
    BinaryMask::from_fn(w, h, |x, y| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r)
}

/// Mean shortest 8-connected path length from each inlet-face pore pixel to
/// the opposite face over the face span, averaged over percolating
/// directions; plain label-correcting relaxation.
fn relaxation_tortuosity(m: &BinaryMask) -> f64 {
    let (w, h) = (m.width(), m.height());
    let run = |source: &dyn Fn(usize, usize) -> bool, inlet: &dyn Fn(usize, usize) -> bool, span: f64| {
        let mut d = vec![f64::INFINITY; w * h];
        for y in 0..h {
            for x in 0..w {
                if m.is_pore(x, y) && source(x, y) {
                    d[y * w + x] = 0.0;
                }
            }
        }
        let mut changed = true;
        while changed {
            changed = false;
            for y in 0..h {
                for x in 0..w {
                    if !m.is_pore(x, y) {
                        continue;
                    }
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let (nx, ny) = (x as isize + dx, y as isize + dy);
                            if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                                continue;
                            }
                            let (nx, ny) = (nx as usize, ny as usize);
                            if !m.is_pore(nx, ny) {
                                continue;
                            }
                            let c = if dx != 0 && dy != 0 { 2f64.sqrt() } else { 1.0 };
                            if d[ny * w + nx] + c < d[y * w + x] - 1e-12 {
                                d[y * w + x] = d[ny * w + nx] + c;
                                changed = true;
                            }
                        }
                    }
                }
            }
        }
        let v: Vec<f64> = (0..w * h)
            .filter(|&i| inlet(i % w, i / w) && d[i].is_finite())
            .map(|i| d[i] / span)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let (hs, ws) = ((h - 1) as f64, (w - 1) as f64);
    let means: Vec<f64> = [
        run(&|_, y| y == h - 1, &|_, y| y == 0, hs),
        run(&|_, y| y == 0, &|_, y| y == h - 1, hs),
        run(&|x, _| x == w - 1, &|x, _| x == 0, ws),
        run(&|x, _| x == 0, &|x, _| x == w - 1, ws),
    ]
    .into_iter()
    .flatten()
    .collect();
    means.iter().sum::<f64>() / means.len() as f64
}

fn morphology() -> Check {
    let t0 = Instant::now();
    let e = |e: poregan::Error| e.to_string();
    let r = average_pore_radius(&disc(160, 160, 80.0, 80.0, 50.0), 1.0).map_err(e)?;
    ensure((r - 50.0).abs() <= 1.0, format!("disc radius {r}"))?;
    let channel = BinaryMask::from_fn(100, 100, |x, _| (40..60).contains(&x));
    let r = average_pore_radius(&channel, 1.0).map_err(e)?;
    ensure((r - 10.0).abs() <= 1.0, format!("channel radius {r}"))?;

    let big = disc(480, 480, 240.0, 240.0, 50.0);
    let ssa = specific_surface_area(&big, 1.0);
    let expected = 2.0 * std::f64::consts::PI * 50.0 / (480.0 * 480.0);
    ensure((ssa / expected - 1.0).abs() <= 0.03, format!("disc SSA {ssa} vs {expected}"))?;

    for half in [5usize, 10] {
        let (a, b) = (disc(200, 120, 50.0, 60.0, 30.0), disc(200, 120, 150.0, 60.0, 30.0));
        let m = BinaryMask::from_fn(200, 120, |x, y| {
            a.is_pore(x, y) || b.is_pore(x, y) || ((50..150).contains(&x) && (60 - half..60 + half).contains(&y))
        });
        let t = weighted_throat_radius(&m, 1.0).map_err(e)?;
        ensure((t - half as f64).abs() <= 1.0, format!("slit throat {t} vs {half}"))?;
    }

    let straight = BinaryMask::from_fn(64, 64, |x, _| (20..30).contains(&x));
    let ts = tortuosity(&straight).map_err(e)?;
    ensure((ts - 1.0).abs() <= 0.01, format!("straight channel tortuosity {ts}"))?;
    let bent = BinaryMask::from_fn(100, 100, |x, y| {
        ((10..20).contains(&x) && y < 60) || ((50..60).contains(&y) && (10..90).contains(&x)) || ((80..90).contains(&x) && y >= 50)
    });
    let (tb, oracle) = (tortuosity(&bent).map_err(e)?, relaxation_tortuosity(&bent));
    ensure((tb / oracle - 1.0).abs() <= 0.02, format!("bent channel tortuosity {tb} vs oracle {oracle}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let centres: Vec<(f64, f64, f64)> = (0..8)
            .map(|_| (rng.random_range(0.0..64.0), rng.random_range(0.0..56.0), rng.random_range(3.0..10.0)))
            .collect();
        let m = BinaryMask::from_fn(64, 56, |x, y| {
            centres.iter().any(|&(cx, cy, r)| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r)
        });
        let base = analyze(&m, 1.0).map_err(e)?;
        for g in Geometric::ALL {
            let s = analyze(&m.transform(g), 1.0).map_err(e)?;
            let pairs = [
                (s.porosity, base.porosity),
                (s.avg_pore_radius, base.avg_pore_radius),
                (s.specific_surface_area, base.specific_surface_area),
                (s.weighted_throat_radius, base.weighted_throat_radius),
                (s.tortuosity.unwrap_or(0.0), base.tortuosity.unwrap_or(0.0)),
            ];
            for (a, b) in pairs {
                ensure(rel(a, b) <= 0.01, format!("{g:?} changed a metric: {a} vs {b}"))?;
            }
        }
    }
    within_budget(t0.elapsed(), 120.0)?;
    Ok(format!("bent channel tortuosity {tb:.4} vs oracle {oracle:.4}"))
}

fn statistics() -> Check {
    let e = |e: poregan::Error| e.to_string();
    ensure(ks_test(&[1.0, 2.0], &[1.5, 2.5]).map_err(e)?.statistic == 0.5, "KS D for shifted pair")?;
    ensure(ks_test(&[0.0, 0.0], &[1.0, 1.0]).map_err(e)?.statistic == 1.0, "KS D for disjoint samples")?;
    ensure(ks_test(&[1.0, 2.0], &[1.0, 2.0]).map_err(e)?.statistic == 0.0, "KS D for identical samples")?;
    let t = t_test(&[0.0, 2.0], &[1.0, 3.0]).map_err(e)?;
    // pooled sd = sqrt(2), standard error = sqrt(2) * sqrt(1/2 + 1/2)
    ensure((t.statistic.abs() - 1.0 / 2f64.sqrt()).abs() <= 1e-9, format!("t = {}", t.statistic))?;
    let same = t_test(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).map_err(e)?;
    ensure(same.statistic == 0.0 && (same.p - 1.0).abs() <= 1e-9, "t on identical samples")?;
    let d = cohens_d(&[0.0, 2.0], &[1.0, 3.0]).map_err(e)?;
    ensure((d.d - 1.0 / 2f64.sqrt()).abs() <= 1e-9, format!("d = {}", d.d))?;
    let bands = [
        (0.0, EffectBand::Negligible),
        (0.19999, EffectBand::Negligible),
        (0.2, EffectBand::Small),
        (0.5, EffectBand::Medium),
        (0.79999, EffectBand::Medium),
        (0.8, EffectBand::Large),
        (2.5, EffectBand::Large),
    ];
    for (v, b) in bands {
        ensure(EffectBand::of(v) == b, format!("band of {v} is {:?}", EffectBand::of(v)))?;
    }
    Ok("KS, t and Cohen's d examples and effect bands exact".into())
}

fn patch_record(depth: usize, class: usize, i: usize) -> PatchRecord {
    let w = 12;
    let mut image = RgbImage::filled(w, w, [200, 180, 150]);
    for k in 0..(i % 5 + 3) {
        image.set_pixel(k, 0, EPOXY_RGB);
    }
    image.set_pixel(w - 1, (i / 5) % w, EPOXY_RGB);
    image.set_pixel(1, w - 2, [i as u8, (i / 256) as u8, 7]);
    let phi = porosity_of_mask(&ColorThreshold::default().predict_mask(&image).unwrap()).unwrap();
    PatchRecord {
        image,
        porosity: phi,
        depth: DepthLabel::new(depth, 2).unwrap(),
        porosity_class: Some(class),
        augmented: false,
        source_id: format!("s{depth}_{class}_{i}"),
    }
}

fn data_pipeline() -> Check {
    let t0 = Instant::now();
    let e = |e: poregan::Error| e.to_string();
    let seg = ColorThreshold::default();

    let sizes = [(0, 0, 19), (0, 1, 160), (0, 2, 40), (1, 0, 200), (1, 1, 20), (1, 2, 7)];
    let mut recs = Vec::new();
    for &(d, c, n) in &sizes {
        recs.extend((0..n).map(|i| patch_record(d, c, i)));
    }
    let scheme = PorosityClassScheme { depths: vec![bins_from_range(0.0, 1.0, 3), bins_from_range(0.0, 1.0, 3)] };
    let b = balance_dataset(recs, &scheme, &BalanceConfig::default(), &seg).map_err(e)?;
    for &(d, c, n) in &sizes {
        let got = b.records.iter().filter(|r| r.depth.index == d && r.porosity_class == Some(c)).count();
        let want = if n < 20 { 0 } else { 160 };
        ensure(got == want, format!("cell ({d},{c}) with {n} originals has {got} records, want {want}"))?;
        ensure(
            (n < 20) == b.excluded.iter().any(|x| x.depth == d && x.class == c),
            format!("cell ({d},{c}) exclusion flag wrong"),
        )?;
    }

    let s3 = bins_from_range(0.0424, 0.1142, 10);
    let (lo, hi) = s3.range(1);
    ensure(s3.classify(0.050) == Some(1) && lo <= 0.050 && 0.050 < hi, "phi 0.050 not in class 1")?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for (k, style) in default_styles().iter().enumerate() {
        let (img, mask) = synthesize_image(style, 96, 96, 0.1 + 0.05 * k as f64, &mut rng).map_err(e)?;
        let rec = PatchRecord {
            image: img,
            porosity: porosity_of_mask(&mask).map_err(e)?,
            depth: DepthLabel::new(0, 1).unwrap(),
            porosity_class: Some(0),
            augmented: false,
            source_id: format!("syn{k}"),
        };
        let ops = Geometric::ALL.into_iter().map(AugmentationOp::Geometric).chain((0..8).map(AugmentationOp::IntensityNoise));
        for op in ops {
            let a = augment(&rec, op, &seg).map_err(e)?;
            let phi = porosity_of_mask(&seg.predict_mask(&a.image).map_err(e)?).map_err(e)?;
            worst = worst.max((phi - rec.porosity).abs());
        }
    }
    ensure(worst <= MAX_LABEL_DRIFT, format!("augmentation drift {worst}"))?;

    let style = &default_styles()[0];
    let masks: Vec<BinaryMask> = (0..3)
        .map(|_| synthesize_image(style, 480, 480, 0.2, &mut rng).map(|(_, m)| m))
        .collect::<poregan::Result<_>>()
        .map_err(e)?;
    let curve = rev_curve_from_masks(&masks, &[16, 32, 64, 96, 128, 192, 256, 320], 200, 3).map_err(e)?;
    let inversions = curve.std.windows(2).filter(|w| w[1] > w[0]).count();
    ensure(inversions <= 1, format!("REV std curve {:?} has {inversions} inversions", curve.std))?;
    within_budget(t0.elapsed(), 300.0)?;
    Ok(format!("augmentation drift {worst:.4}, REV inversions {inversions}"))
}

struct ToyRun {
    pipeline: Pipeline,
    setup: Duration,
    gan_original: Duration,
}

fn toy_config(root: &PathBuf) -> PipelineConfig {
    let mut cfg = PipelineConfig::toy();
    cfg.paths.corpus = root.join("corpus");
    cfg.paths.manifests = root.join("manifests");
    cfg.paths.checkpoints = root.join("checkpoints");
    cfg.paths.reports = root.join("reports");
    cfg
}

fn toy_setup() -> Result<ToyRun, String> {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&root);
    let p = Pipeline::new(toy_config(&root)).map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    for s in [Stage::PrepSynth, Stage::SegTrain, Stage::SegEval, Stage::PrepExtract, Stage::PrepBalance] {
        p.run(s).map_err(|e| format!("{}: {e}", s.name()))?;
    }
    let setup = t0.elapsed();
    let t1 = Instant::now();
    p.run(Stage::GanTrain).map_err(|e| format!("gan-train: {e}"))?;
    Ok(ToyRun { pipeline: p, setup, gan_original: t1.elapsed() })
}

fn control_for(p: &Pipeline) -> Result<(f64, Vec<f64>), String> {
    let o = p.run(Stage::Evaluate).map_err(|e| format!("evaluate: {e}"))?;
    let r2 = o.summary["r_squared"].as_f64().ok_or("missing r_squared")?;
    let mae: Vec<f64> = serde_json::from_value(o.summary["mae_per_depth"].clone()).map_err(|e| e.to_string())?;
    Ok((r2, mae))
}

fn toy_conditioning(run: &ToyRun) -> Check {
    let p = &run.pipeline;
    let t0 = Instant::now();
    let eval = p.run(Stage::SegEval).map_err(|e| e.to_string())?;
    let dice = eval.summary["dice"].as_f64().ok_or("missing dice")?;
    let (r2, mae) = control_for(p)?;
    let total = run.setup + run.gan_original + t0.elapsed();
    let detail = format!(
        "segmenter Dice {dice:.4}, R2 {r2:.3}, MAE per depth {mae:.4?}, {:.0}s",
        total.as_secs_f64()
    );
    ensure(dice >= 0.95, format!("segmenter Dice {dice:.4} < 0.95; {detail}"))?;
    ensure(r2 >= 0.8, format!("R2 {r2:.3} < 0.8; {detail}"))?;
    ensure(mae.iter().all(|&m| m <= 0.03), format!("MAE above 0.03; {detail}"))?;
    within_budget(total, 3.0 * 3600.0)?;
    Ok(detail)
}

fn architecture_ordering(run: &ToyRun) -> Check {
    let t0 = Instant::now();
    let mut r2 = vec![control_for(&run.pipeline)?.0];
    for arch in [Arch::ModelA, Arch::ModelB] {
        let mut cfg = run.pipeline.config.clone();
        cfg.gan.arch = arch;
        let p = Pipeline::new(cfg).map_err(|e| e.to_string())?;
        p.run(Stage::GanTrain).map_err(|e| format!("gan-train {}: {e}", arch.name()))?;
        r2.push(control_for(&p)?.0);
    }
    let detail = format!("R2 original {:.3}, modelA {:.3}, modelB {:.3}", r2[0], r2[1], r2[2]);
    ensure(r2[0] >= r2[1] && r2[1] >= r2[2], format!("ordering violated: {detail}"))?;
    within_budget(t0.elapsed(), 3.0 * 3.0 * 3600.0)?;
    Ok(detail)
}

fn representativeness(run: &ToyRun) -> Check {
    let t0 = Instant::now();
    let o = run.pipeline.run(Stage::PetroReport).map_err(|e| format!("petro-report: {e}"))?;
    let rows = o.summary.as_array().ok_or("missing study rows")?;
    let mut parts = Vec::new();
    for r in rows {
        let (real, generated) = (r["real_E"].as_f64().unwrap_or(f64::NAN), r["generated_E"].as_f64().unwrap_or(f64::NAN));
        let d = &r["depth"];
        parts.push(format!("depth {d}: real {real:.4} vs generated {generated:.4}"));
        ensure(generated < real, format!("depth {d}: generated mean E {generated} not below real {real}"))?;
    }
    ensure(rows.len() == run.pipeline.config.n_depths(), "missing depths in study")?;
    within_budget(t0.elapsed(), 15.0 * 60.0)?;
    Ok(parts.join("; "))
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, r: Check| {
        match r {
            Ok(d) => println!("criterion {n}: PASS ({d})"),
            Err(d) => {
                failed += 1;
                println!("criterion {n}: FAIL ({d})");
            }
        }
    };
    report(1, formulas());
    report(2, shapes());
    report(3, parameter_bands());
    report(4, loss_analytics());
    report(5, morphology());
    report(6, statistics());
    report(7, data_pipeline());
    match toy_setup() {
        Ok(run) => {
            report(8, toy_conditioning(&run));
            report(9, architecture_ordering(&run));
            report(10, representativeness(&run));
        }
        Err(e) => {
            for n in 8..=10 {
                report(n, Err(format!("toy pipeline failed: {e}")));
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
