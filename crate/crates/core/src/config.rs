//! Pipeline configuration: TOML loading, validation and the normalized dump.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cgan::{Arch, GanTrainConfig};
use crate::dataprep::{
    default_styles, DepthStyle, DEFAULT_MIN_CLASS_SIZE, DEFAULT_N_CLASSES, DEFAULT_REV_WINDOWS, DEFAULT_SIGMA_THRESHOLD,
    DEFAULT_TARGET_PER_CLASS,
};
use crate::error::{Error, Result};
use crate::petro::Weights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub manifests: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "work/corpus".into(),
            manifests: "work/manifests".into(),
            checkpoints: "work/checkpoints".into(),
            reports: "work/reports".into(),
        }
    }
}

/// One row of the depth table. Core values left out are derived from the
/// synthetic corpus itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthEntry {
    pub index: usize,
    pub depth_m: f64,
    pub core_porosity: Option<f64>,
    /// mD
    pub core_permeability: Option<f64>,
}

fn default_depths() -> Vec<DepthEntry> {
    [(1879.50, 0.1573, 33.64), (1881.90, 0.2477, 181.44), (1918.50, 0.1058, 13.39), (1943.50, 0.1332, 12.09)]
        .iter()
        .enumerate()
        .map(|(index, &(depth_m, phi, k))| DepthEntry {
            index,
            depth_m,
            core_porosity: Some(phi),
            core_permeability: Some(k),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub per_depth_count: usize,
    pub width: usize,
    pub height: usize,
    /// Requested porosity range per depth (at least one per depth).
    pub porosity_ranges: Vec<(f64, f64)>,
    pub styles: Vec<DepthStyle>,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            per_depth_count: 40,
            width: 1440,
            height: 960,
            porosity_ranges: vec![(0.08, 0.26), (0.12, 0.38), (0.05, 0.18), (0.06, 0.22)],
            styles: default_styles(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Fixed patch side; when absent the REV analysis chooses it.
    pub patch_size: Option<usize>,
    /// Extraction stride; defaults to the patch side (non-overlapping).
    pub stride: Option<usize>,
    pub n_classes: usize,
    pub target_per_class: usize,
    pub min_class_size: usize,
    pub sigma_threshold: f64,
    pub rev_sizes: Vec<usize>,
    pub rev_windows: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            patch_size: None,
            stride: None,
            n_classes: DEFAULT_N_CLASSES,
            target_per_class: DEFAULT_TARGET_PER_CLASS,
            min_class_size: DEFAULT_MIN_CLASS_SIZE,
            sigma_threshold: DEFAULT_SIGMA_THRESHOLD,
            rev_sizes: vec![60, 120, 240, 360, 480, 600, 720],
            rev_windows: DEFAULT_REV_WINDOWS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub dice_weight: f64,
    pub bce_weight: f64,
    /// Side of the training crops cut from corpus images.
    pub patch_size: usize,
    /// Crops taken per corpus image.
    pub crops_per_image: usize,
    pub base_filters: usize,
}

impl Default for SegSection {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            learning_rate: 3e-3,
            final_learning_rate: 3e-4,
            val_fraction: 0.15,
            test_fraction: 0.15,
            dice_weight: 0.5,
            bce_weight: 0.5,
            patch_size: 480,
            crops_per_image: 4,
            base_filters: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanSection {
    pub arch: Arch,
    pub toy: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub checkpoint_every: usize,
}

impl Default for GanSection {
    fn default() -> Self {
        let g = GanTrainConfig::default();
        Self {
            arch: Arch::Original,
            toy: false,
            epochs: g.epochs,
            batch_size: g.batch_size,
            lr_start: g.lr_start,
            lr_end: g.lr_end,
            beta1: g.beta1,
            beta2: g.beta2,
            checkpoint_every: g.checkpoint_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PetroSection {
    pub w_phi: f64,
    pub w_k: f64,
    pub n_candidates: usize,
    /// Candidates per selection pool in the representativeness study.
    pub pool_size: usize,
    pub real_subimages: usize,
    pub probes: usize,
    /// Images per depth and cohort in the morphology comparison.
    pub morph_samples: usize,
}

impl Default for PetroSection {
    fn default() -> Self {
        Self {
            w_phi: 0.5,
            w_k: 0.5,
            n_candidates: 1000,
            pool_size: 100,
            real_subimages: 50,
            probes: 100,
            morph_samples: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// µm per pixel.
    pub pixel_size: f64,
    pub paths: Paths,
    pub depths: Vec<DepthEntry>,
    pub synth: SynthSection,
    pub data: DataSection,
    pub segmentation: SegSection,
    pub gan: GanSection,
    pub petro: PetroSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pixel_size: 1.0,
            paths: Paths::default(),
            depths: default_depths(),
            synth: SynthSection::default(),
            data: DataSection::default(),
            segmentation: SegSection::default(),
            gan: GanSection::default(),
            petro: PetroSection::default(),
        }
    }
}

/// Why each default has the value it has; echoed by [`PipelineConfig::dump`].
pub const DEFAULT_RATIONALE: &[(&str, &str)] = &[
    ("data.target_per_class", "160 images per porosity class after balancing"),
    ("data.min_class_size", "classes with fewer than 20 original patches are excluded"),
    ("data.sigma_threshold", "patch size is the smallest window whose porosity std falls below 0.06"),
    ("data.n_classes", "10 equal-width porosity classes per depth"),
    ("petro.w_phi / petro.w_k", "porosity and permeability weigh equally in the dual-constraint error"),
    ("gan.epochs", "200 training epochs"),
    ("gan.batch_size", "16 samples per step: 8 real + 8 generated for the discriminator"),
    ("gan.lr_start / gan.lr_end", "Adam (0.5, 0.999) with learning rate decaying from 2e-4 to 2e-6"),
    ("segmentation.dice_weight / bce_weight", "equal Dice and BCE weighting"),
    ("depths", "four sampled depths with core porosity and permeability"),
];

impl PipelineConfig {
    /// Desk-scale preset: two synthetic depths, 96-pixel patches, toy networks.
    pub fn toy() -> Self {
        let depths = (0..2)
            .map(|index| DepthEntry { index, depth_m: 1000.0 + 10.0 * index as f64, core_porosity: None, core_permeability: None })
            .collect();
        Self {
            depths,
            synth: SynthSection {
                per_depth_count: 60,
                width: 192,
                height: 192,
                porosity_ranges: vec![(0.08, 0.30), (0.12, 0.38)],
                ..SynthSection::default()
            },
            data: DataSection {
                patch_size: Some(96),
                stride: Some(48),
                target_per_class: 64,
                min_class_size: 4,
                rev_sizes: vec![12, 24, 48, 96, 144, 192],
                ..DataSection::default()
            },
            segmentation: SegSection { patch_size: 48, base_filters: 8, crops_per_image: 4, ..SegSection::default() },
            gan: GanSection { toy: true, epochs: 30, ..GanSection::default() },
            petro: PetroSection { n_candidates: 500, morph_samples: 20, ..PetroSection::default() },
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn n_depths(&self) -> usize {
        self.depths.len()
    }

    /// Collects every problem instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.depths.is_empty() {
            p.push("depth table is empty".to_string());
        }
        for (i, d) in self.depths.iter().enumerate() {
            if d.index != i {
                p.push(format!("depth table indices must be contiguous from 0; row {i} has index {}", d.index));
            }
            if let Some(phi) = d.core_porosity {
                if !(phi > 0.0 && phi < 1.0) {
                    p.push(format!("depth {i}: core_porosity {phi} outside (0,1)"));
                }
            }
            if let Some(k) = d.core_permeability {
                if !(k > 0.0) {
                    p.push(format!("depth {i}: core_permeability must be positive"));
                }
            }
        }
        if !(self.pixel_size > 0.0) {
            p.push("pixel_size must be positive".into());
        }
        let n = self.n_depths();
        if self.synth.porosity_ranges.len() < n {
            p.push(format!("synth.porosity_ranges has {} entries for {n} depths", self.synth.porosity_ranges.len()));
        }
        if self.synth.styles.len() < n {
            p.push(format!("synth.styles has {} entries for {n} depths", self.synth.styles.len()));
        }
        for &(lo, hi) in &self.synth.porosity_ranges {
            if !(lo > 0.0 && lo <= hi && hi < 1.0) {
                p.push(format!("synth porosity range ({lo}, {hi}) must satisfy 0 < lo <= hi < 1"));
            }
        }
        if self.synth.per_depth_count == 0 {
            p.push("synth.per_depth_count must be positive".into());
        }
        let d = &self.data;
        if d.n_classes == 0 {
            p.push("data.n_classes must be positive".into());
        }
        if d.target_per_class == 0 || d.min_class_size > d.target_per_class {
            p.push(format!(
                "need 0 < data.min_class_size <= data.target_per_class, got {} and {}",
                d.min_class_size, d.target_per_class
            ));
        }
        if !(d.sigma_threshold > 0.0) {
            p.push("data.sigma_threshold must be positive".into());
        }
        if let Some(ps) = d.patch_size {
            if ps > self.synth.width.min(self.synth.height) {
                p.push(format!("data.patch_size {ps} exceeds the corpus image size"));
            }
        }
        if d.patch_size.is_none() && d.rev_sizes.is_empty() {
            p.push("either data.patch_size or data.rev_sizes is required".into());
        }
        if d.stride == Some(0) {
            p.push("data.stride must be positive".into());
        }
        let s = &self.segmentation;
        if (s.dice_weight + s.bce_weight - 1.0).abs() > 1e-9 {
            p.push(format!("segmentation dice_weight + bce_weight must equal 1, got {}", s.dice_weight + s.bce_weight));
        }
        if s.patch_size % 16 != 0 || s.patch_size == 0 {
            p.push("segmentation.patch_size must be a positive multiple of 16".into());
        }
        if s.patch_size > self.synth.width.min(self.synth.height) {
            p.push("segmentation.patch_size exceeds the corpus image size".into());
        }
        if s.epochs == 0 || s.batch_size == 0 || s.crops_per_image == 0 || s.base_filters == 0 {
            p.push("segmentation epochs, batch_size, crops_per_image and base_filters must be positive".into());
        }
        let g = &self.gan;
        if g.batch_size % 2 != 0 || g.batch_size < 2 {
            p.push(format!("gan.batch_size must be even (m/2 real + m/2 generated), got {}", g.batch_size));
        }
        if g.epochs == 0 || g.checkpoint_every == 0 {
            p.push("gan.epochs and gan.checkpoint_every must be positive".into());
        }
        if !(g.lr_start > g.lr_end && g.lr_end > 0.0) {
            p.push("gan learning rate must decay from lr_start to a positive lr_end".into());
        }
        if !(0.0..1.0).contains(&g.beta1) || !(0.0..1.0).contains(&g.beta2) {
            p.push("gan Adam betas must lie in [0, 1)".into());
        }
        let patch = d.patch_size.unwrap_or(if g.toy { 96 } else { 480 });
        let expect = if g.toy { 96 } else { 480 };
        if d.patch_size.is_some() && patch != expect {
            p.push(format!("data.patch_size {patch} does not match the {expect}-pixel GAN preset"));
        }
        let pe = &self.petro;
        if let Err(Error::Validation(m)) = Weights::new(pe.w_phi, pe.w_k) {
            p.push(format!("petro weights: {m}"));
        }
        if pe.pool_size == 0 || pe.n_candidates < pe.pool_size {
            p.push("petro.n_candidates must be at least one pool (petro.pool_size)".into());
        }
        if pe.real_subimages == 0 || pe.probes == 0 || pe.morph_samples < 2 {
            p.push("petro.real_subimages and petro.probes must be positive, petro.morph_samples >= 2".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn weights(&self) -> Result<Weights> {
        Weights::new(self.petro.w_phi, self.petro.w_k)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn gan_train_config(&self) -> GanTrainConfig {
        let g = &self.gan;
        GanTrainConfig {
            epochs: g.epochs,
            batch_size: g.batch_size,
            beta1: g.beta1,
            beta2: g.beta2,
            lr_start: g.lr_start,
            lr_end: g.lr_end,
            seed: self.seed,
            checkpoint_every: g.checkpoint_every,
            ..GanTrainConfig::default()
        }
    }

    /// Normalized TOML with every default's rationale as leading comments.
    pub fn dump(&self) -> String {
        let mut out = format!("# config_hash: {}\n# defaults:\n", self.hash());
        for (key, why) in DEFAULT_RATIONALE {
            out.push_str(&format!("#   {key}: {why}\n"));
        }
        out.push_str(&toml::to_string_pretty(self).expect("config serializes"));
        out
    }
}
