//! Porosity-permeability estimation, dual-constraint scoring and the
//! porosity-control and representativeness reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::weighted_throat_radius;
use crate::raster::{porosity_of_mask, BinaryMask, ConditionVector, DepthLabel, MaskPredictor, RgbImage};
use crate::stats::{mae, r_squared};

/// Prefactor of the exponential porosity-throat permeability model, mD.
pub const PERM_PREFACTOR: f64 = 1.3049;
/// Exponent coefficient applied to `φ · R_th` (R_th in µm).
pub const PERM_EXPONENT: f64 = 1.7432;

/// Smallest real cohort accepted by [`representativeness_study`].
pub const MIN_REAL_COHORT: usize = 10;
/// Smallest candidate pool accepted by [`representativeness_study`].
pub const MIN_CANDIDATES: usize = 100;

/// `K = 1.3049 · exp(1.7432 · φ · R_th)` in millidarcy.
pub fn permeability(porosity: f64, throat_radius_um: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&porosity) || !(throat_radius_um >= 0.0) || !throat_radius_um.is_finite() {
        return Err(Error::Validation(format!(
            "permeability needs φ in [0,1] and R_th >= 0, got φ={porosity}, R_th={throat_radius_um}"
        )));
    }
    Ok(PERM_PREFACTOR * (PERM_EXPONENT * porosity * throat_radius_um).exp())
}

/// Throat radius that reproduces `k` at porosity `φ` under [`permeability`].
pub fn implied_throat_radius(porosity: f64, k: f64) -> Result<f64> {
    if !(porosity > 0.0) || !(k >= PERM_PREFACTOR) {
        return Err(Error::Validation(format!(
            "no non-negative throat radius gives K={k} at φ={porosity}"
        )));
    }
    Ok((k / PERM_PREFACTOR).ln() / (PERM_EXPONENT * porosity))
}

/// Core-measured targets for one depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PetroTargets {
    pub depth: DepthLabel,
    pub core_porosity: f64,
    /// mD
    pub core_permeability: f64,
}

impl PetroTargets {
    pub fn new(depth: DepthLabel, core_porosity: f64, core_permeability: f64) -> Result<Self> {
        if !(core_porosity > 0.0 && core_porosity < 1.0) || !(core_permeability > 0.0) {
            return Err(Error::Validation(format!(
                "targets need φ in (0,1) and K > 0, got φ={core_porosity}, K={core_permeability}"
            )));
        }
        Ok(Self { depth, core_porosity, core_permeability })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub porosity: f64,
    pub permeability: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self { porosity: 0.5, permeability: 0.5 }
    }
}

impl Weights {
    pub fn new(porosity: f64, permeability: f64) -> Result<Self> {
        if porosity < 0.0 || permeability < 0.0 || ((porosity + permeability) - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "weights must be non-negative and sum to 1, got {porosity} + {permeability}"
            )));
        }
        Ok(Self { porosity, permeability })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualConstraintScore {
    pub e: f64,
    pub porosity_term: f64,
    pub permeability_term: f64,
    pub weights: Weights,
}

/// `E = w_φ |φ_t − φ_c| / φ_t + w_K |K_t − K_c| / K_t`.
pub fn dual_constraint_error(
    porosity: f64,
    permeability: f64,
    target: &PetroTargets,
    weights: Weights,
) -> Result<DualConstraintScore> {
    if !(target.core_porosity > 0.0) || !(target.core_permeability > 0.0) {
        return Err(Error::Validation("dual-constraint targets must be positive".into()));
    }
    let weights = Weights::new(weights.porosity, weights.permeability)?;
    let porosity_term = (target.core_porosity - porosity).abs() / target.core_porosity;
    let permeability_term = (target.core_permeability - permeability).abs() / target.core_permeability;
    Ok(DualConstraintScore {
        e: weights.porosity * porosity_term + weights.permeability * permeability_term,
        porosity_term,
        permeability_term,
        weights,
    })
}

/// Measured porosity, throat radius and derived permeability of one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RockProperties {
    pub porosity: f64,
    /// µm
    pub throat_radius: f64,
    /// mD
    pub permeability: f64,
}

pub fn mask_properties(mask: &BinaryMask, pixel_size: f64) -> Result<RockProperties> {
    let porosity = porosity_of_mask(mask)?;
    // a pore-free image has no throats; K collapses to the prefactor
    let throat_radius = if porosity > 0.0 { weighted_throat_radius(mask, pixel_size)? } else { 0.0 };
    Ok(RockProperties { porosity, throat_radius, permeability: permeability(porosity, throat_radius)? })
}

pub fn image_properties(image: &RgbImage, segmenter: &dyn MaskPredictor, pixel_size: f64) -> Result<RockProperties> {
    mask_properties(&segmenter.predict_mask(image)?, pixel_size)
}

/// Index of the smallest value; the first one wins ties.
pub fn argmin_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v < values[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub score: DualConstraintScore,
    pub properties: RockProperties,
    pub all_errors: Vec<f64>,
}

/// Scores every candidate against `target` and returns the minimum-error one.
pub fn select_representative(
    candidates: &[RgbImage],
    target: &PetroTargets,
    segmenter: &dyn MaskPredictor,
    pixel_size: f64,
    weights: Weights,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::Validation("no candidates to select from".into()));
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for c in candidates {
        let p = image_properties(c, segmenter, pixel_size)?;
        scored.push((dual_constraint_error(p.porosity, p.permeability, target, weights)?, p));
    }
    let all_errors: Vec<f64> = scored.iter().map(|(s, _)| s.e).collect();
    let index = argmin_first(&all_errors).expect("non-empty");
    let (score, properties) = scored[index];
    Ok(Selection { index, score, properties, all_errors })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub depth: usize,
    pub target: f64,
    pub observed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PorosityControlReport {
    /// Fit of measured against requested porosity about the identity line.
    pub r_squared: f64,
    pub r_squared_rounded: f64,
    /// `None` for depths without probes.
    pub mae_per_depth: Vec<Option<f64>>,
    pub points: Vec<ScatterPoint>,
}

/// `n` probe conditions split across depths and spread evenly over each
/// depth's porosity range.
pub fn probe_grid(ranges: &[(f64, f64)], n: usize) -> Result<Vec<ConditionVector>> {
    let nd = ranges.len();
    if nd == 0 {
        return Err(Error::Validation("probe grid needs at least one depth".into()));
    }
    let mut out = Vec::with_capacity(n);
    for d in 0..nd {
        let count = n / nd + usize::from(d < n % nd);
        let (lo, hi) = ranges[d];
        for i in 0..count {
            let phi = lo + (hi - lo) * (i as f64 + 0.5) / count as f64;
            out.push(ConditionVector::new(phi, DepthLabel::new(d, nd)?)?);
        }
    }
    Ok(out)
}

/// Generates one image per probe, measures its porosity with `segmenter`,
/// and scores the agreement.
pub fn porosity_control_report(
    mut generate: impl FnMut(&ConditionVector, usize) -> Result<RgbImage>,
    segmenter: &dyn MaskPredictor,
    probes: &[ConditionVector],
) -> Result<PorosityControlReport> {
    let n_depths = probes.first().map_or(0, |p| p.depth.n_depths);
    let mut points = Vec::with_capacity(probes.len());
    for (i, c) in probes.iter().enumerate() {
        let img = generate(c, i)?;
        let observed = porosity_of_mask(&segmenter.predict_mask(&img)?)?;
        points.push(ScatterPoint { depth: c.depth.index, target: c.porosity, observed });
    }
    let targets: Vec<f64> = points.iter().map(|p| p.target).collect();
    let observed: Vec<f64> = points.iter().map(|p| p.observed).collect();
    let r2 = r_squared(&targets, &observed)?;
    let mae_per_depth = (0..n_depths)
        .map(|d| {
            let (t, o): (Vec<f64>, Vec<f64>) =
                points.iter().filter(|p| p.depth == d).map(|p| (p.target, p.observed)).unzip();
            mae(&t, &o).ok()
        })
        .collect();
    Ok(PorosityControlReport {
        r_squared: r2,
        r_squared_rounded: (r2 * 100.0).round() / 100.0,
        mae_per_depth,
        points,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub properties: Vec<RockProperties>,
    pub errors: Vec<f64>,
    pub mean_porosity: f64,
    pub mean_permeability: f64,
    /// Mean of the per-image errors.
    pub mean_error: f64,
}

impl Cohort {
    fn from_scored(scored: Vec<(RockProperties, f64)>) -> Self {
        let n = scored.len() as f64;
        let mean = |f: &dyn Fn(&(RockProperties, f64)) -> f64| scored.iter().map(f).sum::<f64>() / n;
        Self {
            mean_porosity: mean(&|s| s.0.porosity),
            mean_permeability: mean(&|s| s.0.permeability),
            mean_error: mean(&|s| s.1),
            properties: scored.iter().map(|s| s.0).collect(),
            errors: scored.iter().map(|s| s.1).collect(),
        }
    }
}

/// One depth's comparison: random real sub-images against dual-constraint
/// selected generated images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub target: PetroTargets,
    pub real: Cohort,
    pub generated: Cohort,
    /// Every candidate's score, for histograms.
    pub candidates: Cohort,
}

/// Per depth: scores the real sub-images, then splits the generated
/// candidates into pools of `pool_size` and keeps the best image of each pool.
pub fn representativeness_study(
    real: &[Vec<RgbImage>],
    candidates: &[Vec<RgbImage>],
    targets: &[PetroTargets],
    segmenter: &dyn MaskPredictor,
    pixel_size: f64,
    weights: Weights,
    pool_size: usize,
) -> Result<Vec<StudyRow>> {
    let mut problems = Vec::new();
    if real.len() != targets.len() || candidates.len() != targets.len() {
        problems.push(format!(
            "{} targets but {} real and {} generated cohorts",
            targets.len(),
            real.len(),
            candidates.len()
        ));
    }
    if pool_size == 0 {
        problems.push("pool size must be positive".into());
    }
    for (d, (r, c)) in real.iter().zip(candidates).enumerate() {
        if r.len() < MIN_REAL_COHORT {
            problems.push(format!("depth {d}: {} real sub-images, need {MIN_REAL_COHORT}", r.len()));
        }
        if c.len() < MIN_CANDIDATES.max(pool_size) {
            problems.push(format!(
                "depth {d}: {} generated candidates, need {}",
                c.len(),
                MIN_CANDIDATES.max(pool_size)
            ));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let score = |img: &RgbImage, t: &PetroTargets| -> Result<(RockProperties, f64)> {
        let p = image_properties(img, segmenter, pixel_size)?;
        Ok((p, dual_constraint_error(p.porosity, p.permeability, t, weights)?.e))
    };
    let mut rows = Vec::with_capacity(targets.len());
    for ((t, r), c) in targets.iter().zip(real).zip(candidates) {
        let real_scored = r.iter().map(|img| score(img, t)).collect::<Result<Vec<_>>>()?;
        let cand_scored = c.iter().map(|img| score(img, t)).collect::<Result<Vec<_>>>()?;
        let selected = cand_scored
            .chunks(pool_size)
            .filter(|pool| pool.len() == pool_size)
            .map(|pool| {
                let errs: Vec<f64> = pool.iter().map(|s| s.1).collect();
                pool[argmin_first(&errs).expect("non-empty pool")]
            })
            .collect();
        rows.push(StudyRow {
            target: *t,
            real: Cohort::from_scored(real_scored),
            generated: Cohort::from_scored(selected),
            candidates: Cohort::from_scored(cand_scored),
        });
    }
    Ok(rows)
}
