//! Patch extraction, REV analysis, porosity classing, balancing and the
//! synthetic thin-section corpus.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::{porosity_of_mask, BinaryMask, DepthLabel, Geometric, MaskPredictor, PatchRecord, RgbImage};

pub const DEFAULT_TARGET_PER_CLASS: usize = 160;
pub const DEFAULT_MIN_CLASS_SIZE: usize = 20;
pub const DEFAULT_SIGMA_THRESHOLD: f64 = 0.06;
pub const DEFAULT_N_CLASSES: usize = 10;
pub const DEFAULT_REV_WINDOWS: usize = 200;
pub const NOISE_AMPLITUDE: i32 = 2;
pub const MAX_LABEL_DRIFT: f64 = 0.01;

/// Top-left corners of all `side`-pixel windows on a `stride` grid that fit
/// entirely inside a `width`×`height` image, row-major.
pub fn patch_offsets(width: usize, height: usize, side: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if side == 0 || stride == 0 {
        return Err(Error::Validation("patch side and stride must be positive".into()));
    }
    if side > width || side > height {
        return Err(Error::Validation(format!("patch side {side} exceeds {width}x{height} image")));
    }
    let nx = (width - side) / stride + 1;
    let ny = (height - side) / stride + 1;
    Ok((0..ny).flat_map(|j| (0..nx).map(move |i| (i * stride, j * stride))).collect())
}

pub fn extract_patches(image: &RgbImage, side: usize, stride: usize) -> Result<Vec<RgbImage>> {
    patch_offsets(image.width(), image.height(), side, stride)?
        .into_iter()
        .map(|(x, y)| image.crop(x, y, side, side))
        .collect()
}

/// Porosity statistics of square sub-windows as a function of window size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevCurve {
    pub sizes: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub n_windows: Vec<usize>,
}

/// Summed-area table over pore pixels.
pub struct PoreIntegral {
    w: usize,
    h: usize,
    table: Vec<u64>,
}

impl PoreIntegral {
    pub fn new(mask: &BinaryMask) -> Self {
        let (w, h) = (mask.width(), mask.height());
        let mut table = vec![0u64; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0u64;
            for x in 0..w {
                row += mask.is_pore(x, y) as u64;
                table[(y + 1) * (w + 1) + x + 1] = table[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w, h, table }
    }

    pub fn window_porosity(&self, x: usize, y: usize, side: usize) -> f64 {
        let s = self.w + 1;
        let t = &self.table;
        let sum = t[(y + side) * s + x + side] + t[y * s + x] - t[y * s + x + side] - t[(y + side) * s + x];
        sum as f64 / (side * side) as f64
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

/// REV curve from already-segmented masks. Up to `max_windows` windows per
/// size per mask are drawn without replacement; all positions are used when
/// fewer exist.
pub fn rev_curve_from_masks(masks: &[BinaryMask], sizes: &[usize], max_windows: usize, seed: u64) -> Result<RevCurve> {
    if masks.len() < 2 {
        return Err(Error::Validation(format!("REV analysis needs at least 2 images, got {}", masks.len())));
    }
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let integrals: Vec<PoreIntegral> = masks.iter().map(PoreIntegral::new).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut curve = RevCurve { sizes: vec![], mean: vec![], std: vec![], n_windows: vec![] };
    for &side in &sorted {
        let mut values = Vec::new();
        for ig in &integrals {
            if side == 0 || side > ig.w || side > ig.h {
                continue;
            }
            let (nx, ny) = (ig.w - side + 1, ig.h - side + 1);
            let total = nx * ny;
            if total <= max_windows {
                for p in 0..total {
                    values.push(ig.window_porosity(p % nx, p / nx, side));
                }
            } else {
                for p in sample(&mut rng, total, max_windows) {
                    values.push(ig.window_porosity(p % nx, p / nx, side));
                }
            }
        }
        if values.is_empty() {
            log::warn!("REV size {side} exceeds every image; skipped");
            continue;
        }
        let (m, s) = mean_std(&values);
        curve.sizes.push(side);
        curve.mean.push(m);
        curve.std.push(s);
        curve.n_windows.push(values.len());
    }
    if curve.sizes.is_empty() {
        return Err(Error::Validation("no REV size fits any image".into()));
    }
    Ok(curve)
}

/// Segments each image once and computes the REV curve of its mask.
pub fn rev_analysis(
    images: &[RgbImage],
    segmenter: &dyn MaskPredictor,
    sizes: &[usize],
    max_windows: usize,
    seed: u64,
) -> Result<RevCurve> {
    if images.len() < 2 {
        return Err(Error::Validation(format!("REV analysis needs at least 2 images, got {}", images.len())));
    }
    let masks = images.iter().map(|i| segmenter.predict_mask(i)).collect::<Result<Vec<_>>>()?;
    rev_curve_from_masks(&masks, sizes, max_windows, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSizeChoice {
    pub size: usize,
    /// True when no size met the threshold and the largest was returned.
    pub fallback: bool,
}

/// Smallest size whose σ is at or below `threshold` in every depth's curve.
pub fn select_patch_size(curves: &[RevCurve], threshold: f64) -> Result<PatchSizeChoice> {
    let mut sizes: Vec<usize> = curves.iter().flat_map(|c| c.sizes.iter().copied()).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let Some(&largest) = sizes.last() else {
        return Err(Error::Validation("empty REV curve".into()));
    };
    for &s in &sizes {
        let ok = curves.iter().all(|c| match c.sizes.iter().position(|&x| x == s) {
            Some(i) => c.std[i] <= threshold,
            None => false,
        });
        if ok {
            return Ok(PatchSizeChoice { size: s, fallback: false });
        }
    }
    Ok(PatchSizeChoice { size: largest, fallback: true })
}

/// Equal-width porosity bins for one depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthBins {
    pub min: f64,
    pub max: f64,
    pub edges: Vec<f64>,
}

impl DepthBins {
    pub fn n_classes(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn width(&self) -> f64 {
        (self.max - self.min) / self.n_classes() as f64
    }

    /// Half-open bins with the last one closed; `None` outside `[min, max]`.
    pub fn classify(&self, porosity: f64) -> Option<usize> {
        if !(porosity >= self.min && porosity <= self.max) {
            return None;
        }
        let n = self.n_classes();
        let k = self.edges.partition_point(|&e| e <= porosity);
        Some(k.saturating_sub(1).min(n - 1))
    }

    pub fn range(&self, class: usize) -> (f64, f64) {
        (self.edges[class], self.edges[class + 1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PorosityClassScheme {
    pub depths: Vec<DepthBins>,
}

impl PorosityClassScheme {
    pub fn classify(&self, depth: usize, porosity: f64) -> Option<usize> {
        self.depths.get(depth)?.classify(porosity)
    }

    pub fn n_classes(&self) -> usize {
        self.depths.first().map_or(0, DepthBins::n_classes)
    }
}

/// Equal-width bins over each depth's observed porosity span.
pub fn build_class_scheme(porosities: &[Vec<f64>], n_classes: usize) -> Result<PorosityClassScheme> {
    if n_classes == 0 {
        return Err(Error::Validation("need at least one class".into()));
    }
    let mut depths = Vec::with_capacity(porosities.len());
    for (d, values) in porosities.iter().enumerate() {
        let mut distinct: Vec<f64> = values.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() < n_classes {
            return Err(Error::Validation(format!(
                "depth {d}: {} distinct porosities, need {n_classes}",
                distinct.len()
            )));
        }
        let (min, max) = (distinct[0], *distinct.last().expect("non-empty"));
        if max <= min {
            return Err(Error::Validation(format!("depth {d}: degenerate porosity range")));
        }
        depths.push(bins_from_range(min, max, n_classes));
    }
    Ok(PorosityClassScheme { depths })
}

pub fn bins_from_range(min: f64, max: f64, n_classes: usize) -> DepthBins {
    let mut edges: Vec<f64> = (0..=n_classes).map(|i| min + (max - min) * i as f64 / n_classes as f64).collect();
    edges[n_classes] = max;
    DepthBins { min, max, edges }
}

/// Transformation applied to a patch to synthesise a new training record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AugmentationOp {
    Geometric(Geometric),
    /// Integer noise in `[-2, 2]` per channel, drawn from this seed.
    IntensityNoise(u64),
}

impl AugmentationOp {
    pub fn tag(&self) -> String {
        match self {
            Self::Geometric(g) => match g {
                Geometric::HFlip => "hflip".into(),
                Geometric::VFlip => "vflip".into(),
                Geometric::Rot90 => "rot90".into(),
                Geometric::Rot180 => "rot180".into(),
                Geometric::Rot270 => "rot270".into(),
            },
            Self::IntensityNoise(s) => format!("noise{s}"),
        }
    }
}

pub fn add_intensity_noise(image: &RgbImage, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = image
        .data()
        .iter()
        .map(|&v| (v as i32 + rng.random_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE)).clamp(0, 255) as u8)
        .collect();
    let mut out = RgbImage::new(image.width(), image.height(), data).expect("same size");
    out.pixel_size = image.pixel_size;
    out
}

/// Applies `op`. Geometric ops keep the label; noisy copies are re-segmented
/// and rejected when the porosity moves by more than 0.01. A rejected noise
/// draw is retried with derived seeds before giving up.
pub fn augment(patch: &PatchRecord, op: AugmentationOp, segmenter: &dyn MaskPredictor) -> Result<PatchRecord> {
    let image = match op {
        AugmentationOp::Geometric(g) => patch.image.transform(g),
        AugmentationOp::IntensityNoise(seed) => {
            const ATTEMPTS: u64 = 3;
            let mut accepted = None;
            let mut last_drift = 0.0;
            for attempt in 0..ATTEMPTS {
                let noisy = add_intensity_noise(&patch.image, seed.wrapping_mul(ATTEMPTS).wrapping_add(attempt));
                let phi = porosity_of_mask(&segmenter.predict_mask(&noisy)?)?;
                last_drift = (phi - patch.porosity).abs();
                if last_drift <= MAX_LABEL_DRIFT {
                    accepted = Some(noisy);
                    break;
                }
            }
            accepted.ok_or_else(|| {
                Error::AugmentationRejected(format!(
                    "{}: label drift {last_drift:.4} after {ATTEMPTS} noise draws",
                    patch.source_id
                ))
            })?
        }
    };
    Ok(PatchRecord {
        image,
        porosity: patch.porosity,
        depth: patch.depth,
        porosity_class: patch.porosity_class,
        augmented: true,
        source_id: format!("{}+{}", patch.source_id, op.tag()),
    })
}

/// Sets `porosity_class` from the scheme (`None` outside the depth's span).
pub fn assign_classes(records: &mut [PatchRecord], scheme: &PorosityClassScheme) {
    for r in records {
        r.porosity_class = scheme.classify(r.depth.index, r.porosity);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceConfig {
    pub target_per_class: usize,
    pub min_class_size: usize,
    pub seed: u64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self { target_per_class: DEFAULT_TARGET_PER_CLASS, min_class_size: DEFAULT_MIN_CLASS_SIZE, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcludedCell {
    pub depth: usize,
    pub class: usize,
    pub count: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCount {
    pub depth: usize,
    pub class: usize,
    pub before: usize,
    pub after: usize,
}

pub struct Balanced {
    pub records: Vec<PatchRecord>,
    pub cells: Vec<CellCount>,
    pub excluded: Vec<ExcludedCell>,
}

fn image_digest(image: &RgbImage) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((image.width() as u64).to_le_bytes());
    h.update(image.data());
    h.finalize().into()
}

/// Brings every (depth, class) cell of the scheme to exactly
/// `target_per_class` records, excluding cells smaller than `min_class_size`.
/// Records without a class are dropped.
pub fn balance_dataset(
    records: Vec<PatchRecord>,
    scheme: &PorosityClassScheme,
    config: &BalanceConfig,
    segmenter: &dyn MaskPredictor,
) -> Result<Balanced> {
    if config.min_class_size > config.target_per_class || config.target_per_class == 0 {
        return Err(Error::Validation(format!(
            "need 0 < min_class_size <= target_per_class, got {} and {}",
            config.min_class_size, config.target_per_class
        )));
    }
    let mut cells: BTreeMap<(usize, usize), Vec<PatchRecord>> = BTreeMap::new();
    for d in 0..scheme.depths.len() {
        for c in 0..scheme.depths[d].n_classes() {
            cells.insert((d, c), Vec::new());
        }
    }
    for r in records {
        match r.porosity_class {
            Some(c) if r.depth.index < scheme.depths.len() && c < scheme.depths[r.depth.index].n_classes() => {
                cells.get_mut(&(r.depth.index, c)).expect("cell exists").push(r);
            }
            _ => log::debug!("dropping unclassified record {}", r.source_id),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::new();
    let mut counts = Vec::new();
    let mut excluded = Vec::new();
    for ((d, c), mut cell) in cells {
        let before = cell.len();
        if before < config.min_class_size {
            excluded.push(ExcludedCell {
                depth: d,
                class: c,
                count: before,
                reason: format!("{before} records < minimum {}", config.min_class_size),
            });
            counts.push(CellCount { depth: d, class: c, before, after: 0 });
            continue;
        }
        if before > config.target_per_class {
            let mut keep: Vec<usize> = sample(&mut rng, before, config.target_per_class).into_vec();
            keep.sort_unstable();
            let mut it = keep.into_iter().peekable();
            cell = cell
                .into_iter()
                .enumerate()
                .filter(|(i, _)| it.next_if_eq(i).is_some())
                .map(|(_, r)| r)
                .collect();
        } else if before < config.target_per_class {
            fill_cell(&mut cell, config.target_per_class, segmenter, &mut rng)?;
        }
        counts.push(CellCount { depth: d, class: c, before, after: cell.len() });
        out.extend(cell);
    }
    Ok(Balanced { records: out, cells: counts, excluded })
}

fn fill_cell(cell: &mut Vec<PatchRecord>, target: usize, segmenter: &dyn MaskPredictor, rng: &mut ChaCha8Rng) -> Result<()> {
    let originals = cell.len();
    let mut seen: HashSet<[u8; 32]> = cell.iter().map(|r| image_digest(&r.image)).collect();
    let mut tried: HashSet<(usize, AugmentationOp)> = HashSet::new();
    let max_attempts = 50 * target;
    let mut attempts = 0;
    while cell.len() < target {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::AugmentationRejected(format!(
                "could not reach {target} unique records from {originals} originals"
            )));
        }
        let src = rng.random_range(0..originals);
        let kind = rng.random_range(0..Geometric::ALL.len() + 1);
        let op = match Geometric::ALL.get(kind) {
            Some(&g) => AugmentationOp::Geometric(g),
            None => AugmentationOp::IntensityNoise(rng.random()),
        };
        if !tried.insert((src, op)) {
            continue;
        }
        let rec = match augment(&cell[src], op, segmenter) {
            Ok(r) => r,
            Err(Error::AugmentationRejected(msg)) => {
                log::debug!("{msg}");
                continue;
            }
            Err(e) => return Err(e),
        };
        if seen.insert(image_digest(&rec.image)) {
            cell.push(rec);
        }
    }
    Ok(())
}

/// Visual style of one synthetic depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthStyle {
    /// Gaussian smoothing σ of the pore field, pixels.
    pub corr_len: f64,
    pub matrix_rgb: [u8; 3],
    /// Weight of a coarse field that makes porosity drift across an image.
    pub trend_strength: f64,
}

pub const EPOXY_RGB: [u8; 3] = [50, 95, 205];

pub fn default_styles() -> Vec<DepthStyle> {
    vec![
        DepthStyle { corr_len: 2.0, matrix_rgb: [205, 190, 160], trend_strength: 0.6 },
        DepthStyle { corr_len: 5.0, matrix_rgb: [160, 150, 140], trend_strength: 0.6 },
        DepthStyle { corr_len: 3.0, matrix_rgb: [220, 215, 205], trend_strength: 0.6 },
        DepthStyle { corr_len: 8.0, matrix_rgb: [180, 165, 135], trend_strength: 0.6 },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_depths: usize,
    pub per_depth_count: usize,
    /// Requested porosity range per depth.
    pub porosity_ranges: Vec<(f64, f64)>,
    pub width: usize,
    pub height: usize,
    pub styles: Vec<DepthStyle>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SynthImage {
    pub image: RgbImage,
    pub mask: BinaryMask,
    pub depth: DepthLabel,
    pub requested_porosity: f64,
    pub source_id: String,
}

/// Separable Gaussian blur with wrap-around padding.
fn blur_wrap(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let wrap = |v: isize, n: usize| v.rem_euclid(n as isize) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] =
                k.iter().enumerate().map(|(i, kv)| kv * src[y * w + wrap(x as isize + i as isize - r, w)]).sum::<f64>() / norm;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] =
                k.iter().enumerate().map(|(i, kv)| kv * tmp[wrap(y as isize + i as isize - r, h) * w + x]).sum::<f64>() / norm;
        }
    }
    out
}

fn standardize(v: &mut [f64]) {
    let (m, s) = mean_std(v);
    let s = if s > 0.0 { s } else { 1.0 };
    v.iter_mut().for_each(|x| *x = (*x - m) / s);
}

fn white_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Pore mask whose porosity is within 0.005 of `porosity`: the field is
/// thresholded at a level found by bisection on the exact pore count.
pub fn threshold_to_porosity(field: &[f64], w: usize, h: usize, porosity: f64) -> Result<BinaryMask> {
    if !(porosity > 0.0 && porosity < 1.0) {
        return Err(Error::Validation(format!("requested porosity {porosity} outside (0,1)")));
    }
    let n = field.len() as f64;
    let frac = |t: f64| field.iter().filter(|&&v| v > t).count() as f64 / n;
    let (mut lo, mut hi) = field.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    lo -= 1e-9;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) > porosity {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = if (frac(lo) - porosity).abs() < (frac(hi) - porosity).abs() { lo } else { hi };
    let achieved = frac(t);
    if (achieved - porosity).abs() > 0.005 {
        return Err(Error::Validation(format!(
            "porosity {porosity} unattainable for this field (closest {achieved:.4})"
        )));
    }
    BinaryMask::new(w, h, field.iter().map(|&v| (v > t) as u8).collect())
}

/// One synthetic thin section and its exact mask.
pub fn synthesize_image(
    style: &DepthStyle,
    width: usize,
    height: usize,
    porosity: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(RgbImage, BinaryMask)> {
    let n = width * height;
    let mut field = blur_wrap(&white_noise(n, rng), width, height, style.corr_len);
    standardize(&mut field);
    if style.trend_strength > 0.0 {
        let mut trend = blur_wrap(&white_noise(n, rng), width, height, width.min(height) as f64 / 6.0);
        standardize(&mut trend);
        field.iter_mut().zip(&trend).for_each(|(f, t)| *f += style.trend_strength * t);
    }
    let mask = threshold_to_porosity(&field, width, height, porosity)?;
    let mut data = Vec::with_capacity(n * 3);
    for &m in mask.data() {
        let (base, amp) = if m == 1 { (EPOXY_RGB, 12) } else { (style.matrix_rgb, 15) };
        for c in base {
            data.push((c as i32 + rng.random_range(-amp..=amp)).clamp(0, 255) as u8);
        }
    }
    Ok((RgbImage::new(width, height, data)?, mask))
}

/// Procedural corpus: `per_depth_count` images per depth, each at a porosity
/// drawn uniformly from that depth's range.
pub fn synthesize_corpus(config: &SynthConfig) -> Result<Vec<SynthImage>> {
    let mut problems = Vec::new();
    if config.n_depths == 0 {
        problems.push("n_depths must be positive".into());
    }
    if config.styles.len() < config.n_depths {
        problems.push(format!("{} styles for {} depths", config.styles.len(), config.n_depths));
    }
    if config.porosity_ranges.len() != config.n_depths {
        problems.push(format!("{} porosity ranges for {} depths", config.porosity_ranges.len(), config.n_depths));
    }
    for &(lo, hi) in &config.porosity_ranges {
        if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
            problems.push(format!("porosity range ({lo}, {hi}) not inside (0,1)"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut out = Vec::with_capacity(config.n_depths * config.per_depth_count);
    for d in 0..config.n_depths {
        let (lo, hi) = config.porosity_ranges[d];
        for i in 0..config.per_depth_count {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ ((d as u64) << 32) ^ i as u64);
            let phi = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let (image, mask) = synthesize_image(&config.styles[d], config.width, config.height, phi, &mut rng)?;
            out.push(SynthImage {
                image,
                mask,
                depth: DepthLabel::new(d, config.n_depths)?,
                requested_porosity: phi,
                source_id: format!("d{d}_img{i}"),
            });
        }
    }
    Ok(out)
}

/// First lag at which the normalised autocovariance of the mask falls below
/// 1/e, averaged over the x and y directions.
pub fn correlation_length(mask: &BinaryMask) -> f64 {
    let (w, h) = (mask.width(), mask.height());
    let v: Vec<f64> = mask.data().iter().map(|&b| b as f64).collect();
    let (m, s) = mean_std(&v);
    if s == 0.0 {
        return 0.0;
    }
    let var = s * s;
    let limit = (-1.0f64).exp();
    let along = |dx: usize, dy: usize| -> f64 {
        let max_lag = if dx > 0 { w / 2 } else { h / 2 };
        for lag in 1..max_lag {
            let (mut acc, mut n) = (0.0, 0usize);
            for y in 0..h - lag * dy {
                for x in 0..w - lag * dx {
                    acc += (v[y * w + x] - m) * (v[(y + lag * dy) * w + x + lag * dx] - m);
                    n += 1;
                }
            }
            if acc / n as f64 / var < limit {
                return lag as f64;
            }
        }
        max_lag as f64
    };
    0.5 * (along(1, 0) + along(0, 1))
}

/// One manifest row; images live at `path` relative to the corpus root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub depth_index: usize,
    pub porosity: f64,
    /// Empty when the record has no class.
    pub class: Option<usize>,
    pub augmented: bool,
    pub source_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_depths: usize,
    pub target_per_class: usize,
    pub min_class_size: usize,
    pub pixel_size: f64,
    pub rows: Vec<ManifestRow>,
    pub cells: Vec<CellCount>,
    pub excluded: Vec<ExcludedCell>,
    pub scheme: Option<PorosityClassScheme>,
    pub config_hash: Option<String>,
}

impl DatasetManifest {
    /// Empirical (φ, depth) pairs used to condition generator updates.
    pub fn conditions(&self) -> Vec<(f64, usize)> {
        self.rows.iter().map(|r| (r.porosity, r.depth_index)).collect()
    }

    /// Observed porosity span per depth.
    pub fn porosity_ranges(&self) -> Vec<(f64, f64)> {
        let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); self.n_depths];
        for r in &self.rows {
            let e = &mut out[r.depth_index];
            *e = (e.0.min(r.porosity), e.1.max(r.porosity));
        }
        out
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// CSV with a leading `# config_hash:` comment when a hash is set.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        if let Some(h) = &self.config_hash {
            buf.extend_from_slice(format!("# config_hash: {h}\n").as_bytes());
        }
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(["path", "depth_index", "porosity", "class", "augmented", "source_id"])?;
            for r in &self.rows {
                w.write_record([
                    r.path.clone(),
                    r.depth_index.to_string(),
                    format!("{:.6}", r.porosity),
                    r.class.map_or(String::new(), |c| c.to_string()),
                    r.augmented.to_string(),
                    r.source_id.clone(),
                ])?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        write_atomic(path, &buf)
    }

    /// Loads every referenced image relative to `root`.
    pub fn load_records(&self, root: &Path) -> Result<Vec<PatchRecord>> {
        self.rows
            .iter()
            .map(|r| {
                let mut image = RgbImage::load(&root.join(&r.path))?;
                image.pixel_size = self.pixel_size;
                Ok(PatchRecord {
                    image,
                    porosity: r.porosity,
                    depth: DepthLabel::new(r.depth_index, self.n_depths)?,
                    porosity_class: r.class,
                    augmented: r.augmented,
                    source_id: r.source_id.clone(),
                })
            })
            .collect()
    }
}

/// Writes `bytes` through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes records as `depth_<i>/class_<j>/patch_<k>.png` under `root`
/// (`class_none` for unclassified records) and returns the matching rows.
pub fn write_corpus(records: &[PatchRecord], root: &Path) -> Result<Vec<ManifestRow>> {
    let mut next: BTreeMap<(usize, Option<usize>), usize> = BTreeMap::new();
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let k = next.entry((r.depth.index, r.porosity_class)).or_insert(0);
        let class_dir = r.porosity_class.map_or("class_none".to_string(), |c| format!("class_{c}"));
        let rel: PathBuf = [format!("depth_{}", r.depth.index), class_dir, format!("patch_{k}.png")].iter().collect();
        *k += 1;
        let full = root.join(&rel);
        if let Some(dir) = full.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        r.image.save(&full)?;
        rows.push(ManifestRow {
            path: rel.to_string_lossy().replace('\\', "/"),
            depth_index: r.depth.index,
            porosity: r.porosity,
            class: r.porosity_class,
            augmented: r.augmented,
            source_id: r.source_id.clone(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::ColorThreshold;
    use proptest::prelude::*;

    #[test]
    fn offsets_examples() {
        let o = patch_offsets(768, 516, 480, 96).unwrap();
        assert_eq!(o, vec![(0, 0), (96, 0), (192, 0), (288, 0)]);
        assert_eq!(patch_offsets(480, 480, 480, 7).unwrap().len(), 1);
        assert!(patch_offsets(480, 480, 512, 96).is_err());
        let img = RgbImage::filled(768, 516, [1, 2, 3]);
        let p = extract_patches(&img, 480, 96).unwrap();
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|q| q.width() == 480 && q.height() == 480));
    }

    #[test]
    fn patch_size_selection() {
        let c = RevCurve { sizes: vec![64, 128, 256, 480], mean: vec![0.2; 4], std: vec![0.10, 0.07, 0.055, 0.04], n_windows: vec![1; 4] };
        assert_eq!(select_patch_size(&[c.clone()], 0.06).unwrap(), PatchSizeChoice { size: 256, fallback: false });
        let hi = RevCurve { std: vec![0.2; 4], ..c.clone() };
        assert_eq!(select_patch_size(&[hi], 0.06).unwrap(), PatchSizeChoice { size: 480, fallback: true });
        let lo = RevCurve { std: vec![0.01; 4], ..c.clone() };
        assert_eq!(select_patch_size(&[lo.clone()], 0.06).unwrap().size, 64);
        // every depth must qualify
        assert_eq!(select_patch_size(&[lo, c], 0.06).unwrap().size, 256);
    }

    #[test]
    fn sample_three_class_one() {
        let s = bins_from_range(0.0424, 0.1142, 10);
        assert!((s.width() - 0.00718).abs() < 1e-12);
        assert_eq!(s.classify(0.0500), Some(1));
        let (lo, hi) = s.range(1);
        assert!(lo <= 0.0500 && 0.0500 < hi);
        assert_eq!(s.classify(0.1142), Some(9));
        assert_eq!(s.classify(0.0424), Some(0));
        assert_eq!(s.classify(0.2), None);
    }

    #[test]
    fn uniform_scheme() {
        let v: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let s = build_class_scheme(&[v], 10).unwrap();
        assert!((s.depths[0].width() - 0.1).abs() < 1e-12);
        assert_eq!(s.classify(0, 0.55), Some(5));
        assert_eq!(s.classify(0, 1.0), Some(9));
        assert!(build_class_scheme(&[vec![0.1; 20]], 10).is_err());
        assert!(build_class_scheme(&[vec![0.1, 0.2, 0.3]], 10).is_err());
    }

    fn record(depth: usize, class: usize, i: usize, w: usize) -> PatchRecord {
        let mut image = RgbImage::filled(w, w, [200, 180, 150]);
        // asymmetric pore pattern so every geometric op yields a new image
        for k in 0..(i % 5 + 3) {
            image.set_pixel(k, 0, EPOXY_RGB);
        }
        image.set_pixel(w - 1, (i / 5) % w, EPOXY_RGB);
        image.set_pixel(1, w - 2, [i as u8, (i / 256) as u8, 7]);
        let phi = ColorThreshold::default().predict_mask(&image).unwrap().pore_count() as f64 / (w * w) as f64;
        PatchRecord {
            image,
            porosity: phi,
            depth: DepthLabel::new(depth, 2).unwrap(),
            porosity_class: Some(class),
            augmented: false,
            source_id: format!("src{depth}_{class}_{i}"),
        }
    }

    fn two_depth_scheme() -> PorosityClassScheme {
        PorosityClassScheme { depths: vec![bins_from_range(0.0, 1.0, 3), bins_from_range(0.0, 1.0, 3)] }
    }

    #[test]
    fn balancing_counts_and_provenance() {
        let mut recs = Vec::new();
        recs.extend((0..19).map(|i| record(0, 0, i, 12)));
        recs.extend((0..160).map(|i| record(0, 1, i, 12)));
        recs.extend((0..40).map(|i| record(0, 2, i, 12)));
        recs.extend((0..200).map(|i| record(1, 0, i, 12)));
        let seg = ColorThreshold::default();
        let b = balance_dataset(recs, &two_depth_scheme(), &BalanceConfig::default(), &seg).unwrap();
        let count = |d: usize, c: usize| b.records.iter().filter(|r| r.depth.index == d && r.porosity_class == Some(c)).count();
        assert_eq!(count(0, 0), 0);
        assert_eq!(count(0, 1), 160);
        assert!(b.records.iter().filter(|r| r.depth.index == 0 && r.porosity_class == Some(1)).all(|r| !r.augmented));
        assert_eq!(count(0, 2), 160);
        let aug: Vec<&PatchRecord> =
            b.records.iter().filter(|r| r.depth.index == 0 && r.porosity_class == Some(2) && r.augmented).collect();
        assert_eq!(aug.len(), 120);
        assert!(aug.iter().all(|r| r.source_id.starts_with("src0_2_") && r.source_id.contains('+')));
        for d in 0..2 {
            for c in 0..3 {
                let cell: Vec<&PatchRecord> = b.records.iter().filter(|r| r.depth.index == d && r.porosity_class == Some(c)).collect();
                let digests: HashSet<[u8; 32]> = cell.iter().map(|r| image_digest(&r.image)).collect();
                assert_eq!(digests.len(), cell.len());
            }
        }
        assert_eq!(count(1, 0), 160);
        // excluded: the 19-record cell plus every empty cell
        assert!(b.excluded.iter().any(|e| e.depth == 0 && e.class == 0 && e.count == 19));
        assert_eq!(b.excluded.len(), 3);

        // idempotent
        let again = balance_dataset(b.records.clone(), &two_depth_scheme(), &BalanceConfig { seed: 9, ..Default::default() }, &seg).unwrap();
        assert_eq!(again.records, b.records);
    }

    #[test]
    fn augmentation_group_laws() {
        let seg = ColorThreshold::default();
        let r = record(0, 0, 3, 9);
        let h = AugmentationOp::Geometric(Geometric::HFlip);
        let twice = augment(&augment(&r, h, &seg).unwrap(), h, &seg).unwrap();
        assert_eq!(twice.image, r.image);
        let mut img = r.image.clone();
        for _ in 0..4 {
            img = img.transform(Geometric::Rot90);
        }
        assert_eq!(img, r.image);
        let noisy = augment(&r, AugmentationOp::IntensityNoise(5), &seg).unwrap();
        assert!(noisy.image.data().iter().zip(r.image.data()).all(|(a, b)| (*a as i32 - *b as i32).abs() <= 2));
        assert_eq!(noisy.source_id, format!("{}+noise5", r.source_id));
    }

    #[test]
    fn noise_drift_is_bounded_on_synthetic_patch() {
        let seg = ColorThreshold::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (img, mask) = synthesize_image(&default_styles()[0], 64, 64, 0.2, &mut rng).unwrap();
        let rec = PatchRecord {
            image: img,
            porosity: porosity_of_mask(&mask).unwrap(),
            depth: DepthLabel::new(0, 1).unwrap(),
            porosity_class: Some(0),
            augmented: false,
            source_id: "s".into(),
        };
        for seed in 0..10 {
            let a = augment(&rec, AugmentationOp::IntensityNoise(seed), &seg).unwrap();
            let phi = porosity_of_mask(&seg.predict_mask(&a.image).unwrap()).unwrap();
            assert!((phi - rec.porosity).abs() <= MAX_LABEL_DRIFT);
        }
    }

    #[test]
    fn synthetic_porosity_and_styles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, m) = synthesize_image(&default_styles()[0], 128, 128, 0.25, &mut rng).unwrap();
        assert!((porosity_of_mask(&m).unwrap() - 0.25).abs() <= 0.005);
        assert!(threshold_to_porosity(&[0.0; 16], 4, 4, 0.0).is_err());
        let cfg = SynthConfig {
            n_depths: 2,
            per_depth_count: 3,
            porosity_ranges: vec![(0.15, 0.3), (0.15, 0.3)],
            width: 128,
            height: 128,
            styles: default_styles(),
            seed: 4,
        };
        let corpus = synthesize_corpus(&cfg).unwrap();
        let mean_len = |d: usize| {
            let v: Vec<f64> = corpus.iter().filter(|s| s.depth.index == d).map(|s| correlation_length(&s.mask)).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean_len(1) >= 2.0 * mean_len(0), "{} vs {}", mean_len(1), mean_len(0));
        for s in &corpus {
            assert!((porosity_of_mask(&s.mask).unwrap() - s.requested_porosity).abs() <= 0.005);
            // the colour rule recovers the generating mask exactly
            assert_eq!(ColorThreshold::default().predict_mask(&s.image).unwrap(), s.mask);
        }
        let bad = SynthConfig { porosity_ranges: vec![(0.0, 0.3), (0.1, 0.2)], ..cfg };
        assert!(matches!(synthesize_corpus(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn rev_on_checkerboard_is_flat() {
        let m = BinaryMask::from_fn(256, 256, |x, y| (x / 4 + y / 4) % 2 == 0);
        let c = rev_curve_from_masks(&[m.clone(), m], &[64, 96, 128, 192], 200, 0).unwrap();
        assert!(c.std.iter().all(|&s| s <= 0.01));
        assert!(rev_curve_from_masks(&[], &[64], 200, 0).is_err());
    }

    #[test]
    fn rev_skips_oversized_windows() {
        let m = BinaryMask::zeros(50, 50);
        let c = rev_curve_from_masks(&[m.clone(), m], &[16, 64], 10, 0).unwrap();
        assert_eq!(c.sizes, vec![16]);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<PatchRecord> = (0..3).map(|i| record(i % 2, i, i, 8)).collect();
        let rows = write_corpus(&recs, dir.path()).unwrap();
        assert_eq!(rows[0].path, "depth_0/class_0/patch_0.png");
        let m = DatasetManifest {
            n_depths: 2,
            target_per_class: 160,
            min_class_size: 20,
            pixel_size: 1.0,
            rows,
            cells: vec![],
            excluded: vec![],
            scheme: None,
            config_hash: Some("abc".into()),
        };
        m.write_json(&dir.path().join("manifest.json")).unwrap();
        m.write_csv(&dir.path().join("manifest.csv")).unwrap();
        let back = DatasetManifest::read_json(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(back, m);
        let loaded = back.load_records(dir.path()).unwrap();
        assert_eq!(loaded[2].image, recs[2].image);
        let csv = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        assert!(csv.starts_with("# config_hash: abc\npath,depth_index,porosity,class,augmented,source_id\n"));
    }

    proptest! {
        #[test]
        fn classes_partition_the_span(lo in 0.0f64..0.5, span in 0.01f64..0.5, n in 1usize..15) {
            let b = bins_from_range(lo, lo + span, n);
            let mut prev = 0;
            for i in 0..=10_000 {
                let phi = (lo + span * (i as f64 / 10_000.0)).min(b.max);
                let c = b.classify(phi).unwrap();
                let (a, z) = b.range(c);
                prop_assert!(a <= phi && (phi < z || (c == n - 1 && phi <= z)));
                prop_assert!(c >= prev);
                prev = c;
            }
            prop_assert_eq!(b.classify(lo + span), Some(n - 1));
        }

        #[test]
        fn geometric_ops_preserve_mask_porosity(bits in proptest::collection::vec(0u8..2, 70)) {
            let m = BinaryMask::new(10, 7, bits).unwrap();
            for g in Geometric::ALL {
                prop_assert_eq!(porosity_of_mask(&m.transform(g)).unwrap(), porosity_of_mask(&m).unwrap());
            }
        }
    }
}
