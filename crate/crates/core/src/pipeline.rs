//! Stage orchestration: every stage reads its prerequisites from disk, writes
//! its artifacts atomically and appends to the run log.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cgan::{self, Gan, GanSpec};
use crate::config::PipelineConfig;
use crate::dataprep::{
    assign_classes, balance_dataset, build_class_scheme, extract_patches, patch_offsets, rev_curve_from_masks,
    select_patch_size, synthesize_corpus, write_atomic, write_corpus, BalanceConfig, DatasetManifest, ManifestRow,
    PatchSizeChoice, RevCurve, SynthConfig,
};
use crate::error::{Error, Result};
use crate::morphology::analyze;
use crate::petro::{
    dual_constraint_error, image_properties, mask_properties, porosity_control_report, probe_grid,
    representativeness_study, PetroTargets, PorosityControlReport, StudyRow,
};
use crate::plots::{bar_chart, histogram_overlay, line_chart, save_svg, scatter_identity, Series};
use crate::raster::{porosity_of_mask, BinaryMask, DepthLabel, MaskPredictor, PatchRecord, RgbImage};
use crate::segmentation::{evaluate, train_segmenter, SegTrainConfig, SegmentationNetSpec, UNet};
use crate::stats::{compare, StatsReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    PrepSynth,
    SegTrain,
    SegEval,
    PrepRev,
    PrepExtract,
    PrepBalance,
    GanTrain,
    Evaluate,
    MorphAnalyze,
    PetroScore,
    PetroSelect,
    PetroReport,
}

impl Stage {
    /// Execution order of a full run.
    pub const ORDER: [Stage; 12] = [
        Stage::PrepSynth,
        Stage::SegTrain,
        Stage::SegEval,
        Stage::PrepRev,
        Stage::PrepExtract,
        Stage::PrepBalance,
        Stage::GanTrain,
        Stage::Evaluate,
        Stage::MorphAnalyze,
        Stage::PetroScore,
        Stage::PetroSelect,
        Stage::PetroReport,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::PrepSynth => "prep-synth",
            Stage::SegTrain => "seg-train",
            Stage::SegEval => "seg-eval",
            Stage::PrepRev => "prep-rev",
            Stage::PrepExtract => "prep-extract",
            Stage::PrepBalance => "prep-balance",
            Stage::GanTrain => "gan-train",
            Stage::Evaluate => "evaluate",
            Stage::MorphAnalyze => "morph-analyze",
            Stage::PetroScore => "petro-score",
            Stage::PetroSelect => "petro-select",
            Stage::PetroReport => "petro-report",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ORDER.into_iter().find(|st| st.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ORDER.iter().map(|s| s.name()).collect();
            Error::Validation(format!("unknown stage {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: String,
    pub artifacts: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusSource {
    pub path: String,
    pub mask_path: String,
    pub depth_index: usize,
    pub requested_porosity: f64,
    pub porosity: f64,
    pub source_id: String,
}

/// Whole-image properties averaged per depth; stand-in core measurements
/// for depths without tabulated values.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BulkTarget {
    pub depth_index: usize,
    pub porosity: f64,
    pub throat_radius: f64,
    pub permeability: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub config_hash: String,
    pub n_depths: usize,
    pub pixel_size: f64,
    pub sources: Vec<CorpusSource>,
    pub bulk: Vec<BulkTarget>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RevReport {
    pub config_hash: String,
    pub curves: Vec<RevCurve>,
    pub choice: PatchSizeChoice,
    pub threshold: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MorphRow {
    pub depth: usize,
    pub metric: String,
    pub n_real: usize,
    pub n_generated: usize,
    pub real_mean: f64,
    pub generated_mean: f64,
    pub stats: Option<StatsReport>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CandidateScore {
    pub depth: usize,
    pub candidate: usize,
    pub seed: u64,
    pub porosity: f64,
    pub throat_radius: f64,
    pub permeability: f64,
    pub error: f64,
}

struct Corpus {
    index: CorpusIndex,
    images: Vec<RgbImage>,
    masks: Vec<BinaryMask>,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub hash: String,
}

fn missing(stage: &str, path: &Path) -> Error {
    Error::MissingPrerequisite { stage: stage.to_string(), artifact: path.display().to_string() }
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(missing(stage, path))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs one stage by name with the given configuration.
pub fn run_stage(name: &str, config: &PipelineConfig) -> Result<StageOutcome> {
    Pipeline::new(config.clone())?.run(Stage::parse(name)?)
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        Ok(Self { config, hash })
    }

    fn seed(&self, salt: u64) -> u64 {
        self.config.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }

    fn reports(&self) -> &Path {
        &self.config.paths.reports
    }

    pub fn corpus_index_path(&self) -> PathBuf {
        self.config.paths.corpus.join("corpus.json")
    }

    pub fn patches_index_path(&self) -> PathBuf {
        self.config.paths.manifests.join("patches.json")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.config.paths.manifests.join("manifest.json")
    }

    pub fn segmenter_path(&self) -> PathBuf {
        self.config.paths.checkpoints.join("segmenter.ckpt")
    }

    pub fn gan_path(&self) -> PathBuf {
        self.config.paths.checkpoints.join(format!("gan_{}.ckpt", self.config.gan.arch.name()))
    }

    fn patches_root(&self) -> PathBuf {
        self.config.paths.corpus.join("patches")
    }

    fn dataset_root(&self) -> PathBuf {
        self.config.paths.corpus.join("dataset")
    }

    fn arch(&self) -> &'static str {
        self.config.gan.arch.name()
    }

    fn gan_image_size(&self) -> usize {
        if self.config.gan.toy {
            96
        } else {
            480
        }
    }

    fn write_json(&self, path: &Path, value: &impl Serialize) -> Result<PathBuf> {
        let mut v = serde_json::to_value(value)?;
        if let Some(obj) = v.as_object_mut() {
            obj.insert("config_hash".into(), self.hash.clone().into());
        } else {
            v = serde_json::json!({ "config_hash": self.hash, "data": v });
        }
        write_atomic(path, serde_json::to_string_pretty(&v)?.as_bytes())?;
        Ok(path.to_path_buf())
    }

    fn write_csv(&self, path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
        let mut buf = format!("# config_hash: {}\n", self.hash).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(header)?;
            for r in rows {
                w.write_record(r)?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        write_atomic(path, &buf)?;
        Ok(path.to_path_buf())
    }

    fn write_svg(&self, path: &Path, svg: &str) -> Result<PathBuf> {
        save_svg(path, svg, Some(&self.hash))?;
        Ok(path.to_path_buf())
    }

    fn append_run_log(&self, stage: &str, started: Instant, result: &Result<StageOutcome>) -> Result<()> {
        let path = self.reports().join("run_log.jsonl");
        let mut text = fs::read_to_string(&path).unwrap_or_default();
        let entry = serde_json::json!({
            "stage": stage,
            "config_hash": self.hash,
            "seed": self.config.seed,
            "version": format!("poregan {}{}", env!("CARGO_PKG_VERSION"),
                option_env!("POREGAN_GIT_REV").map(|r| format!("-g{r}")).unwrap_or_default()),
            "wall_clock_s": started.elapsed().as_secs_f64(),
            "status": if result.is_ok() { "ok" } else { "error" },
            "error": result.as_ref().err().map(|e| e.to_string()),
            "artifacts": result.as_ref().ok().map(|o| o.artifacts.clone()),
        });
        text.push_str(&serde_json::to_string(&entry)?);
        text.push('\n');
        write_atomic(&path, text.as_bytes())
    }

    fn logged(&self, stage: &str, f: impl FnOnce() -> Result<StageOutcome>) -> Result<StageOutcome> {
        let started = Instant::now();
        log::info!("stage {stage} (config {})", &self.hash[..12]);
        let result = f();
        self.append_run_log(stage, started, &result)?;
        result
    }

    pub fn run(&self, stage: Stage) -> Result<StageOutcome> {
        self.logged(stage.name(), || match stage {
            Stage::PrepSynth => self.prep_synth(),
            Stage::SegTrain => self.seg_train(),
            Stage::SegEval => self.seg_eval(),
            Stage::PrepRev => self.prep_rev(),
            Stage::PrepExtract => self.prep_extract(),
            Stage::PrepBalance => self.prep_balance(),
            Stage::GanTrain => self.gan_train(),
            Stage::Evaluate => self.evaluate(),
            Stage::MorphAnalyze => self.morph_analyze(),
            Stage::PetroScore => self.petro_score(),
            Stage::PetroSelect => self.petro_select(),
            Stage::PetroReport => self.petro_report(),
        })
    }

    pub fn run_all(&self) -> Result<Vec<StageOutcome>> {
        Stage::ORDER.iter().map(|&s| self.run(s)).collect()
    }

    fn outcome(&self, stage: Stage, artifacts: Vec<PathBuf>, summary: serde_json::Value) -> StageOutcome {
        StageOutcome { stage: stage.name().into(), artifacts, summary }
    }

    // ---- loaders ----

    fn load_corpus(&self) -> Result<Corpus> {
        let p = self.corpus_index_path();
        require(&p, "prep-synth")?;
        let index: CorpusIndex = serde_json::from_str(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
        let root = &self.config.paths.corpus;
        let mut images = Vec::new();
        let mut masks = Vec::new();
        for s in &index.sources {
            let mut img = RgbImage::load(&root.join(&s.path))?;
            img.pixel_size = index.pixel_size;
            images.push(img);
            masks.push(BinaryMask::load(&root.join(&s.mask_path))?);
        }
        Ok(Corpus { index, images, masks })
    }

    pub fn load_segmenter(&self) -> Result<UNet> {
        let p = self.segmenter_path();
        require(&p, "seg-train")?;
        UNet::load(&p)
    }

    pub fn load_gan(&self) -> Result<Gan> {
        let p = self.gan_path();
        require(&p, "gan-train")?;
        Gan::load(&p)
    }

    fn targets(&self, corpus: &CorpusIndex) -> Result<Vec<PetroTargets>> {
        let n = self.config.n_depths();
        self.config
            .depths
            .iter()
            .map(|d| {
                let bulk = corpus.bulk.get(d.index);
                let phi = d.core_porosity.or(bulk.map(|b| b.porosity));
                let k = d.core_permeability.or(bulk.map(|b| b.permeability));
                match (phi, k) {
                    (Some(phi), Some(k)) => PetroTargets::new(DepthLabel::new(d.index, n)?, phi, k),
                    _ => Err(Error::Validation(format!("no core targets for depth {}", d.index))),
                }
            })
            .collect()
    }

    // ---- data preparation ----

    fn prep_synth(&self) -> Result<StageOutcome> {
        let c = &self.config;
        let n = c.n_depths();
        let sc = SynthConfig {
            n_depths: n,
            per_depth_count: c.synth.per_depth_count,
            porosity_ranges: c.synth.porosity_ranges[..n].to_vec(),
            width: c.synth.width,
            height: c.synth.height,
            styles: c.synth.styles[..n].to_vec(),
            seed: self.seed(1),
        };
        let corpus = synthesize_corpus(&sc)?;
        let root = &c.paths.corpus;
        let mut sources = Vec::new();
        let mut per_depth: BTreeMap<usize, Vec<(f64, f64, f64)>> = BTreeMap::new();
        for (i, s) in corpus.iter().enumerate() {
            let d = s.depth.index;
            let path = format!("depth_{d}/src_{i}.png");
            let mask_path = format!("depth_{d}/src_{i}_mask.png");
            s.image.save(&root.join(&path))?;
            s.mask.save(&root.join(&mask_path))?;
            let props = mask_properties(&s.mask, c.pixel_size)?;
            per_depth.entry(d).or_default().push((props.porosity, props.throat_radius, props.permeability));
            sources.push(CorpusSource {
                path,
                mask_path,
                depth_index: d,
                requested_porosity: s.requested_porosity,
                porosity: props.porosity,
                source_id: s.source_id.clone(),
            });
        }
        let bulk = per_depth
            .into_iter()
            .map(|(d, v)| BulkTarget {
                depth_index: d,
                porosity: v.iter().map(|x| x.0).sum::<f64>() / v.len() as f64,
                throat_radius: v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64,
                permeability: v.iter().map(|x| x.2).sum::<f64>() / v.len() as f64,
            })
            .collect::<Vec<_>>();
        let index = CorpusIndex { config_hash: self.hash.clone(), n_depths: n, pixel_size: c.pixel_size, sources, bulk };
        let p = self.write_json(&self.corpus_index_path(), &index)?;
        Ok(self.outcome(Stage::PrepSynth, vec![p], serde_json::json!({ "images": corpus.len(), "bulk": index.bulk })))
    }

    fn seg_crops(&self, corpus: &Corpus, salt: u64) -> Result<Vec<(RgbImage, BinaryMask)>> {
        let side = self.config.segmentation.patch_size;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed(salt));
        let mut out = Vec::new();
        for (img, mask) in corpus.images.iter().zip(&corpus.masks) {
            for _ in 0..self.config.segmentation.crops_per_image {
                let x = rng.random_range(0..=img.width() - side);
                let y = rng.random_range(0..=img.height() - side);
                out.push((img.crop(x, y, side, side)?, mask.crop(x, y, side, side)?));
            }
        }
        Ok(out)
    }

    fn seg_train(&self) -> Result<StageOutcome> {
        let corpus = self.load_corpus()?;
        let data = self.seg_crops(&corpus, 2)?;
        let s = &self.config.segmentation;
        let cfg = SegTrainConfig {
            dice_weight: s.dice_weight,
            bce_weight: s.bce_weight,
            epochs: s.epochs,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
            final_learning_rate: s.final_learning_rate,
            val_fraction: s.val_fraction,
            test_fraction: s.test_fraction,
            seed: self.seed(3),
            net: SegmentationNetSpec { base_filters: s.base_filters, tile: self.gan_image_size(), ..Default::default() },
        };
        let (mut net, report) = train_segmenter(&data, &cfg)?;
        net.tag = self.hash.clone();
        net.save(&self.segmenter_path())?;
        let r = self.reports();
        let rows: Vec<Vec<String>> = report
            .history
            .iter()
            .map(|e| vec![e.epoch.to_string(), e.train_loss.to_string(), e.val_loss.to_string()])
            .collect();
        let svg = line_chart(
            "segmenter hybrid loss",
            "epoch",
            "loss",
            &[
                Series { name: "train", points: report.history.iter().map(|e| (e.epoch as f64, e.train_loss)).collect() },
                Series { name: "validation", points: report.history.iter().map(|e| (e.epoch as f64, e.val_loss)).collect() },
            ],
        )?;
        let artifacts = vec![
            self.segmenter_path(),
            self.write_json(&r.join("seg_metrics.json"), &report)?,
            self.write_csv(&r.join("seg_history.csv"), &["epoch", "train_loss", "val_loss"], &rows)?,
            self.write_svg(&r.join("seg_loss.svg"), &svg)?,
        ];
        Ok(self.outcome(Stage::SegTrain, artifacts, serde_json::to_value(report.metrics)?))
    }

    fn seg_eval(&self) -> Result<StageOutcome> {
        let net = self.load_segmenter()?;
        let corpus = self.load_corpus()?;
        let data = self.seg_crops(&corpus, 4)?;
        let metrics = evaluate(&net, &data)?;
        let p = self.write_json(&self.reports().join("seg_eval.json"), &metrics)?;
        Ok(self.outcome(Stage::SegEval, vec![p], serde_json::to_value(metrics)?))
    }

    /// Segments one image file and writes the mask as PNG.
    pub fn seg_apply(&self, input: &Path, output: &Path) -> Result<StageOutcome> {
        self.logged("seg-apply", || {
            let net = self.load_segmenter()?;
            let img = RgbImage::load(input)?;
            let mask = net.predict_mask(&img)?;
            mask.save(output)?;
            let phi = porosity_of_mask(&mask)?;
            Ok(StageOutcome {
                stage: "seg-apply".into(),
                artifacts: vec![output.to_path_buf()],
                summary: serde_json::json!({ "porosity": phi }),
            })
        })
    }

    fn prep_rev(&self) -> Result<StageOutcome> {
        let corpus = self.load_corpus()?;
        let n = self.config.n_depths();
        let min_side = corpus.images.iter().map(|i| i.width().min(i.height())).min().unwrap_or(0);
        let sizes: Vec<usize> = self.config.data.rev_sizes.iter().copied().filter(|&s| s <= min_side).collect();
        let mut curves = Vec::new();
        for d in 0..n {
            let masks: Vec<BinaryMask> = corpus
                .index
                .sources
                .iter()
                .zip(&corpus.masks)
                .filter(|(s, _)| s.depth_index == d)
                .map(|(_, m)| m.clone())
                .collect();
            curves.push(rev_curve_from_masks(&masks, &sizes, self.config.data.rev_windows, self.seed(5 + d as u64))?);
        }
        let choice = select_patch_size(&curves, self.config.data.sigma_threshold)?;
        let report = RevReport { config_hash: self.hash.clone(), curves, choice, threshold: self.config.data.sigma_threshold };
        let r = self.reports();
        let mut rows = Vec::new();
        for (d, c) in report.curves.iter().enumerate() {
            for i in 0..c.sizes.len() {
                rows.push(vec![d.to_string(), c.sizes[i].to_string(), c.mean[i].to_string(), c.std[i].to_string()]);
            }
        }
        let series: Vec<Series> = report
            .curves
            .iter()
            .enumerate()
            .map(|(d, c)| Series {
                name: ["depth 0", "depth 1", "depth 2", "depth 3", "depth 4", "depth 5"][d.min(5)],
                points: c.sizes.iter().zip(&c.std).map(|(&s, &v)| (s as f64, v)).collect(),
            })
            .collect();
        let svg = line_chart("porosity std vs window size", "window side (px)", "std of porosity", &series)?;
        let artifacts = vec![
            self.write_json(&r.join("rev.json"), &report)?,
            self.write_csv(&r.join("rev.csv"), &["depth", "size", "mean", "std"], &rows)?,
            self.write_svg(&r.join("rev.svg"), &svg)?,
        ];
        Ok(self.outcome(Stage::PrepRev, artifacts, serde_json::to_value(report.choice)?))
    }

    fn patch_size(&self) -> Result<usize> {
        if let Some(s) = self.config.data.patch_size {
            return Ok(s);
        }
        let p = self.reports().join("rev.json");
        require(&p, "prep-rev")?;
        let rev: RevReport = serde_json::from_str(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
        Ok(rev.choice.size)
    }

    fn prep_extract(&self) -> Result<StageOutcome> {
        let corpus = self.load_corpus()?;
        let seg = self.load_segmenter()?;
        let side = self.patch_size()?;
        let stride = self.config.data.stride.unwrap_or(side);
        let root = self.patches_root();
        if root.exists() {
            fs::remove_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        }
        let n = self.config.n_depths();
        let mut rows = Vec::new();
        let mut counters = vec![0usize; n];
        for (src, img) in corpus.index.sources.iter().zip(&corpus.images) {
            let offsets = patch_offsets(img.width(), img.height(), side, stride)?;
            for ((x, y), patch) in offsets.into_iter().zip(extract_patches(img, side, stride)?) {
                let phi = porosity_of_mask(&seg.predict_mask(&patch)?)?;
                let d = src.depth_index;
                let rel = format!("depth_{d}/patch_{}.png", counters[d]);
                counters[d] += 1;
                patch.save(&root.join(&rel))?;
                rows.push(ManifestRow {
                    path: rel,
                    depth_index: d,
                    porosity: phi,
                    class: None,
                    augmented: false,
                    source_id: format!("{}@{x},{y}", src.source_id),
                });
            }
        }
        let manifest = DatasetManifest {
            n_depths: n,
            target_per_class: self.config.data.target_per_class,
            min_class_size: self.config.data.min_class_size,
            pixel_size: self.config.pixel_size,
            rows,
            cells: vec![],
            excluded: vec![],
            scheme: None,
            config_hash: Some(self.hash.clone()),
        };
        manifest.write_json(&self.patches_index_path())?;
        let csv = self.config.paths.manifests.join("patches.csv");
        manifest.write_csv(&csv)?;
        Ok(self.outcome(
            Stage::PrepExtract,
            vec![self.patches_index_path(), csv],
            serde_json::json!({ "patch_size": side, "stride": stride, "patches_per_depth": counters }),
        ))
    }

    fn load_patch_records(&self) -> Result<Vec<PatchRecord>> {
        let p = self.patches_index_path();
        require(&p, "prep-extract")?;
        DatasetManifest::read_json(&p)?.load_records(&self.patches_root())
    }

    fn prep_balance(&self) -> Result<StageOutcome> {
        let mut records = self.load_patch_records()?;
        let seg = self.load_segmenter()?;
        let n = self.config.n_depths();
        let porosities: Vec<Vec<f64>> =
            (0..n).map(|d| records.iter().filter(|r| r.depth.index == d).map(|r| r.porosity).collect()).collect();
        let scheme = build_class_scheme(&porosities, self.config.data.n_classes)?;
        assign_classes(&mut records, &scheme);
        let cfg = BalanceConfig {
            target_per_class: self.config.data.target_per_class,
            min_class_size: self.config.data.min_class_size,
            seed: self.seed(6),
        };
        let balanced = balance_dataset(records, &scheme, &cfg, &seg)?;
        let root = self.dataset_root();
        if root.exists() {
            fs::remove_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        }
        let rows = write_corpus(&balanced.records, &root)?;
        let manifest = DatasetManifest {
            n_depths: n,
            target_per_class: cfg.target_per_class,
            min_class_size: cfg.min_class_size,
            pixel_size: self.config.pixel_size,
            rows,
            cells: balanced.cells.clone(),
            excluded: balanced.excluded.clone(),
            scheme: Some(scheme.clone()),
            config_hash: Some(self.hash.clone()),
        };
        manifest.write_json(&self.manifest_path())?;
        let csv = self.config.paths.manifests.join("manifest.csv");
        manifest.write_csv(&csv)?;
        let cell_rows: Vec<Vec<String>> = balanced
            .cells
            .iter()
            .map(|c| {
                let (lo, hi) = scheme.depths[c.depth].range(c.class);
                vec![
                    c.depth.to_string(),
                    c.class.to_string(),
                    format!("{lo:.4}"),
                    format!("{hi:.4}"),
                    c.before.to_string(),
                    c.after.to_string(),
                ]
            })
            .collect();
        let classes = self.write_csv(
            &self.reports().join("classes.csv"),
            &["depth", "class", "porosity_lo", "porosity_hi", "before", "after"],
            &cell_rows,
        )?;
        Ok(self.outcome(
            Stage::PrepBalance,
            vec![self.manifest_path(), csv, classes],
            serde_json::json!({ "records": balanced.records.len(), "excluded_cells": balanced.excluded.len() }),
        ))
    }

    // ---- generative model ----

    fn gan_train(&self) -> Result<StageOutcome> {
        let mp = self.manifest_path();
        require(&mp, "prep-balance")?;
        let manifest = DatasetManifest::read_json(&mp)?;
        let records = manifest.load_records(&self.dataset_root())?;
        let seg = self.load_segmenter()?;
        let spec = GanSpec::preset(self.config.gan.arch, self.config.n_depths(), self.config.gan.toy);
        if let Some(r) = records.first() {
            if r.image.width() != spec.discriminator.image_hw {
                return Err(Error::Dimension(format!(
                    "dataset patches are {} px but the {} preset needs {}",
                    r.image.width(),
                    if spec.toy { "toy" } else { "full" },
                    spec.discriminator.image_hw
                )));
            }
        }
        let mut cfg = self.config.gan_train_config();
        cfg.tag = self.hash.clone();
        let dir = self.config.paths.checkpoints.join(format!("gan_{}", self.arch()));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let out = cgan::train(&records, spec, &cfg, &seg, Some(&dir))?;
        out.best.save(&self.gan_path())?;
        let log = &out.log;
        let r = self.reports();
        let a = self.arch();
        let loss_svg = line_chart(
            "adversarial losses",
            "epoch",
            "loss",
            &[
                Series { name: "generator", points: log.epochs.iter().map(|e| (e.epoch as f64, e.loss_g)).collect() },
                Series { name: "discriminator", points: log.epochs.iter().map(|e| (e.epoch as f64, e.loss_d)).collect() },
            ],
        )?;
        let names = ["depth 0", "depth 1", "depth 2", "depth 3", "depth 4", "depth 5"];
        let mut tracking = Vec::new();
        for d in 0..self.config.n_depths() {
            tracking.push(Series {
                name: names[d.min(5)],
                points: log.epochs.iter().map(|e| (e.epoch as f64, e.probe_porosity[d])).collect(),
            });
        }
        let track_svg = line_chart("generated porosity at the mid-range probe", "epoch", "porosity", &tracking)?;
        let csv = r.join(format!("training_log_{a}.csv"));
        log.write_csv(&csv, Some(&format!("config_hash: {}", self.hash)))?;
        let artifacts = vec![
            self.gan_path(),
            csv,
            self.write_json(&r.join(format!("training_log_{a}.json")), log)?,
            self.write_svg(&r.join(format!("loss_{a}.svg")), &loss_svg)?,
            self.write_svg(&r.join(format!("porosity_tracking_{a}.svg")), &track_svg)?,
        ];
        Ok(self.outcome(
            Stage::GanTrain,
            artifacts,
            serde_json::json!({ "best_epoch": log.best_epoch, "best_probe_r2": log.best_r2 }),
        ))
    }

    /// Porosity-control evaluation over a probe grid spanning each depth's
    /// trained range.
    pub fn porosity_control(&self, gan: &Gan, seg: &dyn MaskPredictor) -> Result<PorosityControlReport> {
        let probes = probe_grid(&gan.trained_ranges, self.config.petro.probes)?;
        let base = self.seed(7);
        porosity_control_report(
            |c, i| Ok(gan.generate(c.porosity, c.depth, 1, base ^ i as u64)?.images.remove(0)),
            seg,
            &probes,
        )
    }

    fn evaluate(&self) -> Result<StageOutcome> {
        let gan = self.load_gan()?;
        let seg = self.load_segmenter()?;
        let report = self.porosity_control(&gan, &seg)?;
        let r = self.reports();
        let a = self.arch();
        let rows: Vec<Vec<String>> = report
            .points
            .iter()
            .map(|p| vec![p.depth.to_string(), p.target.to_string(), p.observed.to_string()])
            .collect();
        let groups: Vec<Series> = (0..self.config.n_depths())
            .map(|d| Series {
                name: ["depth 0", "depth 1", "depth 2", "depth 3", "depth 4", "depth 5"][d.min(5)],
                points: report.points.iter().filter(|p| p.depth == d).map(|p| (p.target, p.observed)).collect(),
            })
            .collect();
        let svg = scatter_identity(
            &format!("porosity control, R2 = {:.2}", report.r_squared),
            "target porosity",
            "measured porosity",
            &groups,
        )?;
        let artifacts = vec![
            self.write_json(&r.join(format!("porosity_control_{a}.json")), &report)?,
            self.write_csv(&r.join(format!("porosity_control_{a}.csv")), &["depth", "target", "observed"], &rows)?,
            self.write_svg(&r.join(format!("porosity_control_{a}.svg")), &svg)?,
        ];
        Ok(self.outcome(
            Stage::Evaluate,
            artifacts,
            serde_json::json!({ "r_squared": report.r_squared, "mae_per_depth": report.mae_per_depth }),
        ))
    }

    /// Generates `n` images at (φ, depth) into `out_dir`.
    pub fn gan_generate(&self, phi: f64, depth: usize, n: usize, seed: u64, out_dir: &Path) -> Result<StageOutcome> {
        self.logged("gan-generate", || {
            let gan = self.load_gan()?;
            let label = DepthLabel::new(depth, self.config.n_depths())?;
            let g = gan.generate(phi, label, n, seed)?;
            let mut artifacts = Vec::new();
            for (i, img) in g.images.iter().enumerate() {
                let p = out_dir.join(format!("gen_d{depth}_phi{phi:.3}_s{seed}_{i}.png"));
                img.save(&p)?;
                artifacts.push(p);
            }
            let meta = serde_json::json!({
                "porosity": phi, "depth": depth, "n": n, "seed": seed, "out_of_range": g.out_of_range,
                "trained_range": gan.trained_ranges[depth],
            });
            artifacts.push(self.write_json(&out_dir.join("generated.json"), &meta)?);
            Ok(StageOutcome { stage: "gan-generate".into(), artifacts, summary: meta })
        })
    }

    // ---- validation ----

    fn morph_analyze(&self) -> Result<StageOutcome> {
        let gan = self.load_gan()?;
        let seg = self.load_segmenter()?;
        let records = self.load_patch_records()?;
        let px = self.config.pixel_size;
        let k = self.config.petro.morph_samples;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed(8));
        let metric_names = ["avg_pore_radius", "specific_surface_area", "tortuosity"];
        let mut rows = Vec::new();
        let mut artifacts = Vec::new();
        for d in 0..self.config.n_depths() {
            let mut pool: Vec<&PatchRecord> = records.iter().filter(|r| r.depth.index == d).collect();
            pool.shuffle(&mut rng);
            pool.truncate(k);
            let (lo, hi) = gan.trained_ranges[d];
            let label = DepthLabel::new(d, self.config.n_depths())?;
            let mut real: [Vec<f64>; 3] = Default::default();
            let mut generated: [Vec<f64>; 3] = Default::default();
            for (i, r) in pool.iter().enumerate() {
                let fake = gan.generate(r.porosity.clamp(lo, hi), label, 1, self.seed(9) ^ ((d as u64) << 20) ^ i as u64)?;
                for (img, sink) in [(&r.image, &mut real), (&fake.images[0], &mut generated)] {
                    let mask = seg.predict_mask(img)?;
                    match analyze(&mask, px) {
                        Ok(s) => {
                            sink[0].push(s.avg_pore_radius);
                            sink[1].push(s.specific_surface_area);
                            if let Some(t) = s.tortuosity {
                                sink[2].push(t);
                            }
                        }
                        Err(e) => log::warn!("skipping image in morphology comparison: {e}"),
                    }
                }
            }
            for (m, name) in metric_names.iter().enumerate() {
                let (a, b) = (&real[m], &generated[m]);
                let (stats, note) = match compare(a, b) {
                    Ok(s) => (Some(s), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                let safe_mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { mean(v) };
                rows.push(MorphRow {
                    depth: d,
                    metric: name.to_string(),
                    n_real: a.len(),
                    n_generated: b.len(),
                    real_mean: safe_mean(a),
                    generated_mean: safe_mean(b),
                    stats,
                    note,
                });
                if !a.is_empty() && !b.is_empty() {
                    let svg = histogram_overlay(&format!("{name}, depth {d}"), name, &[("real", a), ("generated", b)], 12)?;
                    artifacts.push(self.write_svg(&self.reports().join(format!("morph_{name}_d{d}.svg")), &svg)?);
                }
            }
        }
        let csv_rows: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                let s = r.stats.as_ref();
                vec![
                    r.depth.to_string(),
                    r.metric.clone(),
                    r.n_real.to_string(),
                    r.n_generated.to_string(),
                    r.real_mean.to_string(),
                    r.generated_mean.to_string(),
                    s.map_or(String::new(), |s| s.ks.statistic.to_string()),
                    s.map_or(String::new(), |s| format!("{}{}", s.ks.p, s.ks_marker)),
                    s.map_or(String::new(), |s| s.t.statistic.to_string()),
                    s.map_or(String::new(), |s| format!("{}{}", s.t.p, s.t_marker)),
                    s.map_or(String::new(), |s| s.effect.d.to_string()),
                    s.map_or(String::new(), |s| s.effect.band.as_str().to_string()),
                ]
            })
            .collect();
        let r = self.reports();
        artifacts.insert(0, self.write_json(&r.join("morphology.json"), &serde_json::json!({ "rows": rows }))?);
        artifacts.insert(
            1,
            self.write_csv(
                &r.join("morphology.csv"),
                &["depth", "metric", "n_real", "n_generated", "real_mean", "generated_mean", "ks_d", "ks_p", "t", "t_p", "cohens_d", "effect"],
                &csv_rows,
            )?,
        );
        Ok(self.outcome(Stage::MorphAnalyze, artifacts, serde_json::json!({ "rows": rows.len() })))
    }

    /// Pore-network statistics for mask files, written as `<stem>.json/.csv`
    /// under `out`.
    pub fn morph_masks(&self, masks: &[PathBuf], out: &Path) -> Result<StageOutcome> {
        self.logged("morph-analyze", || {
            let mut rows = Vec::new();
            let mut json = Vec::new();
            for p in masks {
                let s = analyze(&BinaryMask::load(p)?, self.config.pixel_size)?;
                rows.push(vec![
                    p.display().to_string(),
                    s.porosity.to_string(),
                    s.avg_pore_radius.to_string(),
                    s.specific_surface_area.to_string(),
                    s.tortuosity.map_or(String::new(), |t| t.to_string()),
                    s.weighted_throat_radius.to_string(),
                ]);
                json.push(serde_json::json!({ "path": p, "stats": s }));
            }
            let artifacts = vec![
                self.write_json(&out.join("mask_stats.json"), &serde_json::json!({ "rows": json }))?,
                self.write_csv(
                    &out.join("mask_stats.csv"),
                    &["path", "porosity", "avg_pore_radius_um", "ssa_per_um", "tortuosity", "throat_radius_um"],
                    &rows,
                )?,
            ];
            Ok(StageOutcome { stage: "morph-analyze".into(), artifacts, summary: serde_json::json!({ "masks": rows.len() }) })
        })
    }

    fn candidate_seed(&self, depth: usize, i: usize) -> u64 {
        self.seed(10) ^ ((depth as u64) << 32) ^ i as u64
    }

    fn generate_candidates(&self, gan: &Gan, target: &PetroTargets) -> Result<Vec<RgbImage>> {
        let d = target.depth.index;
        (0..self.config.petro.n_candidates)
            .map(|i| Ok(gan.generate(target.core_porosity, target.depth, 1, self.candidate_seed(d, i))?.images.remove(0)))
            .collect()
    }

    fn petro_score(&self) -> Result<StageOutcome> {
        let gan = self.load_gan()?;
        let seg = self.load_segmenter()?;
        let corpus = self.load_corpus()?;
        let targets = self.targets(&corpus.index)?;
        let weights = self.config.weights()?;
        let mut scores = Vec::new();
        for t in &targets {
            let d = t.depth.index;
            for (i, img) in self.generate_candidates(&gan, t)?.iter().enumerate() {
                let p = image_properties(img, &seg, self.config.pixel_size)?;
                let e = dual_constraint_error(p.porosity, p.permeability, t, weights)?;
                scores.push(CandidateScore {
                    depth: d,
                    candidate: i,
                    seed: self.candidate_seed(d, i),
                    porosity: p.porosity,
                    throat_radius: p.throat_radius,
                    permeability: p.permeability,
                    error: e.e,
                });
            }
        }
        let r = self.reports();
        let rows: Vec<Vec<String>> = scores
            .iter()
            .map(|s| {
                vec![
                    s.depth.to_string(),
                    s.candidate.to_string(),
                    s.seed.to_string(),
                    s.porosity.to_string(),
                    s.throat_radius.to_string(),
                    s.permeability.to_string(),
                    s.error.to_string(),
                ]
            })
            .collect();
        let artifacts = vec![
            self.write_json(&r.join("petro_scores.json"), &serde_json::json!({ "targets": targets, "scores": scores }))?,
            self.write_csv(
                &r.join("petro_scores.csv"),
                &["depth", "candidate", "seed", "porosity", "throat_radius_um", "permeability_md", "error"],
                &rows,
            )?,
        ];
        Ok(self.outcome(Stage::PetroScore, artifacts, serde_json::json!({ "candidates": scores.len() })))
    }

    fn petro_select(&self) -> Result<StageOutcome> {
        let p = self.reports().join("petro_scores.json");
        require(&p, "petro-score")?;
        let gan = self.load_gan()?;
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
        let targets: Vec<PetroTargets> = serde_json::from_value(v["targets"].clone())?;
        let scores: Vec<CandidateScore> = serde_json::from_value(v["scores"].clone())?;
        let mut selected = Vec::new();
        let mut artifacts = Vec::new();
        for t in &targets {
            let d = t.depth.index;
            let mine: Vec<&CandidateScore> = scores.iter().filter(|s| s.depth == d).collect();
            let errors: Vec<f64> = mine.iter().map(|s| s.error).collect();
            let Some(best) = crate::petro::argmin_first(&errors).map(|i| mine[i]) else {
                return Err(Error::Validation(format!("no candidates scored for depth {d}")));
            };
            let img = gan.generate(t.core_porosity, t.depth, 1, best.seed)?.images.remove(0);
            let path = self.reports().join(format!("representative_d{d}.png"));
            img.save(&path)?;
            artifacts.push(path);
            selected.push(serde_json::json!({ "target": t, "selected": best }));
        }
        artifacts.insert(0, self.write_json(&self.reports().join("selection.json"), &serde_json::json!({ "selected": selected }))?);
        Ok(self.outcome(Stage::PetroSelect, artifacts, serde_json::json!({ "depths": selected.len() })))
    }

    /// Random real sub-images of patch size, `count` per depth.
    pub fn real_subimages(&self, count: usize) -> Result<Vec<Vec<RgbImage>>> {
        let corpus = self.load_corpus()?;
        let side = self.gan_image_size();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed(11));
        let mut out = Vec::new();
        for d in 0..self.config.n_depths() {
            let imgs: Vec<&RgbImage> = corpus
                .index
                .sources
                .iter()
                .zip(&corpus.images)
                .filter(|(s, _)| s.depth_index == d)
                .map(|(_, i)| i)
                .collect();
            let mut v = Vec::with_capacity(count);
            for _ in 0..count {
                let img = imgs[rng.random_range(0..imgs.len())];
                let x = rng.random_range(0..=img.width() - side);
                let y = rng.random_range(0..=img.height() - side);
                v.push(img.crop(x, y, side, side)?);
            }
            out.push(v);
        }
        Ok(out)
    }

    /// Real sub-images against pool-selected generated images, per depth.
    pub fn study(&self, gan: &Gan, seg: &dyn MaskPredictor) -> Result<Vec<StudyRow>> {
        let corpus = self.load_corpus()?;
        let targets = self.targets(&corpus.index)?;
        let real = self.real_subimages(self.config.petro.real_subimages)?;
        let candidates = targets.iter().map(|t| self.generate_candidates(gan, t)).collect::<Result<Vec<_>>>()?;
        representativeness_study(
            &real,
            &candidates,
            &targets,
            seg,
            self.config.pixel_size,
            self.config.weights()?,
            self.config.petro.pool_size,
        )
    }

    fn petro_report(&self) -> Result<StageOutcome> {
        let gan = self.load_gan()?;
        let seg = self.load_segmenter()?;
        let rows = self.study(&gan, &seg)?;
        let r = self.reports();
        let csv_rows: Vec<Vec<String>> = rows
            .iter()
            .map(|s| {
                vec![
                    s.target.depth.index.to_string(),
                    s.target.core_porosity.to_string(),
                    s.target.core_permeability.to_string(),
                    s.real.mean_porosity.to_string(),
                    s.real.mean_permeability.to_string(),
                    s.real.mean_error.to_string(),
                    s.generated.mean_porosity.to_string(),
                    s.generated.mean_permeability.to_string(),
                    s.generated.mean_error.to_string(),
                ]
            })
            .collect();
        let cats: Vec<String> = rows.iter().map(|s| format!("depth {}", s.target.depth.index)).collect();
        let bars = bar_chart(
            "mean dual-constraint error",
            "E",
            &cats,
            &[
                ("real sub-images", rows.iter().map(|s| s.real.mean_error).collect()),
                ("selected generated", rows.iter().map(|s| s.generated.mean_error).collect()),
            ],
        )?;
        let mut artifacts = vec![
            self.write_json(&r.join("representativeness.json"), &serde_json::json!({ "rows": rows }))?,
            self.write_csv(
                &r.join("representativeness.csv"),
                &[
                    "depth",
                    "core_porosity",
                    "core_permeability_md",
                    "real_porosity",
                    "real_permeability_md",
                    "real_error",
                    "generated_porosity",
                    "generated_permeability_md",
                    "generated_error",
                ],
                &csv_rows,
            )?,
            self.write_svg(&r.join("representativeness.svg"), &bars)?,
        ];
        for s in &rows {
            let d = s.target.depth.index;
            let svg = histogram_overlay(
                &format!("dual-constraint error, depth {d}"),
                "E",
                &[("real sub-images", &s.real.errors), ("all candidates", &s.candidates.errors)],
                15,
            )?;
            artifacts.push(self.write_svg(&r.join(format!("error_hist_d{d}.svg")), &svg)?);
        }
        let summary: Vec<serde_json::Value> = rows
            .iter()
            .map(|s| serde_json::json!({ "depth": s.target.depth.index, "real_E": s.real.mean_error, "generated_E": s.generated.mean_error }))
            .collect();
        Ok(self.outcome(Stage::PetroReport, artifacts, serde_json::Value::Array(summary)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ORDER {
            assert_eq!(Stage::parse(s.name()).unwrap(), s);
        }
        assert!(Stage::parse("nope").is_err());
    }

    #[test]
    fn evaluate_without_generator_names_gan_train() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::toy();
        cfg.paths.corpus = dir.path().join("corpus");
        cfg.paths.manifests = dir.path().join("manifests");
        cfg.paths.checkpoints = dir.path().join("ckpt");
        cfg.paths.reports = dir.path().join("reports");
        let err = run_stage("evaluate", &cfg).unwrap_err();
        assert!(matches!(&err, Error::MissingPrerequisite { stage, .. } if stage == "gan-train"), "{err}");
        assert_eq!(err.exit_code(), 3);
        let log = fs::read_to_string(dir.path().join("reports/run_log.jsonl")).unwrap();
        assert!(log.contains(&cfg.hash()));
    }
}
