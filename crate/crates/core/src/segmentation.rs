//! Attention U-Net pore/solid segmenter with deep supervision and a hybrid
//! Dice + BCE loss.

use std::path::Path;

use poregan_nn::{avg_pool2, sigmoid, Adam, Graph, ParamId, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::raster::{porosity_of_mask, to_network_domain, BinaryMask, MaskPredictor, RgbImage};

pub const DICE_EPS: f64 = 1e-6;
pub const PROB_CLAMP: f64 = 1e-7;

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::Validation(format!("prediction has {a} values, truth has {b}")));
    }
    Ok(())
}

/// Soft Dice `2 Σ p t / (Σ p + Σ t + ε)`.
pub fn dice_coefficient(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    let inter: f64 = pred.iter().zip(truth).map(|(p, t)| p * t).sum();
    let s: f64 = pred.iter().sum::<f64>() + truth.iter().sum::<f64>();
    Ok(2.0 * inter / (s + DICE_EPS))
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred.len(), truth.len())?;
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// `w_dice · (1 − dice) + w_bce · BCE` with the default equal weights.
pub fn hybrid_loss(pred: &[f64], truth: &[f64]) -> Result<f64> {
    weighted_hybrid_loss(pred, truth, 0.5, 0.5)
}

pub fn weighted_hybrid_loss(pred: &[f64], truth: &[f64], dice_weight: f64, bce_weight: f64) -> Result<f64> {
    Ok(dice_weight * (1.0 - dice_coefficient(pred, truth)?) + bce_weight * bce(pred, truth)?)
}

/// Loss and its gradient with respect to the logits `z`, where `p = σ(z)`.
pub fn hybrid_loss_logits(logits: &[f64], truth: &[f64], dice_weight: f64, bce_weight: f64) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let p: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let inter: f64 = p.iter().zip(truth).map(|(a, b)| a * b).sum();
    let s = p.iter().sum::<f64>() + truth.iter().sum::<f64>() + DICE_EPS;
    let dice = 2.0 * inter / s;
    let mut loss_bce = 0.0;
    let grad = p
        .iter()
        .zip(truth)
        .map(|(&pi, &t)| {
            let pc = pi.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            loss_bce -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
            let d_dice = 2.0 * t / s - 2.0 * inter / (s * s);
            bce_weight * (pi - t) / n - dice_weight * d_dice * pi * (1.0 - pi)
        })
        .collect();
    (dice_weight * (1.0 - dice) + bce_weight * loss_bce / n, grad)
}

fn counts(pred: &BinaryMask, truth: &BinaryMask) -> Result<(f64, f64, f64)> {
    if pred.width() != truth.width() || pred.height() != truth.height() {
        return Err(Error::Validation(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height()
        )));
    }
    let inter = pred.data().iter().zip(truth.data()).filter(|(a, b)| **a == 1 && **b == 1).count();
    Ok((inter as f64, pred.pore_count() as f64, truth.pore_count() as f64))
}

/// Exact Dice of two binary masks; two empty masks agree perfectly.
pub fn dice_binary(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    let (i, p, t) = counts(pred, truth)?;
    Ok(if p + t == 0.0 { 1.0 } else { 2.0 * i / (p + t) })
}

/// Exact intersection over union; two empty masks agree perfectly.
pub fn iou(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    let (i, p, t) = counts(pred, truth)?;
    Ok(if p + t == 0.0 { 1.0 } else { i / (p + t - i) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationNetSpec {
    /// Number of 2x downsampling stages.
    pub depth: usize,
    pub base_filters: usize,
    pub attention_gates: bool,
    pub deep_supervision: bool,
    /// Main head first, then auxiliary heads from coarse to fine.
    pub head_weights: Vec<f64>,
    /// Largest square processed in one pass; larger inputs are tiled.
    pub tile: usize,
}

impl Default for SegmentationNetSpec {
    fn default() -> Self {
        Self {
            depth: 4,
            base_filters: 32,
            attention_gates: true,
            deep_supervision: true,
            head_weights: vec![1.0, 0.3, 0.2],
            tile: 480,
        }
    }
}

impl SegmentationNetSpec {
    /// Reduced widths for desk-scale runs on small patches.
    pub fn toy() -> Self {
        Self { base_filters: 8, tile: 96, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.depth == 0 || self.base_filters == 0 {
            p.push("U-Net depth and base_filters must be positive".to_string());
        }
        if self.deep_supervision && (self.head_weights.len() != 3 || self.depth < 2) {
            p.push("deep supervision needs three head weights and depth >= 2".into());
        }
        if self.tile % (1 << self.depth) != 0 {
            p.push(format!("tile {} must be divisible by {}", self.tile, 1 << self.depth));
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct DoubleConv {
    a: Conv,
    b: Conv,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    wx: Conv,
    wg: Conv,
    psi: Conv,
}

#[derive(Clone, Copy, Debug)]
struct DecStage {
    up: Conv,
    att: Option<Attention>,
    conv: DoubleConv,
}

/// Trained or untrained attention U-Net.
#[derive(Clone, Debug)]
pub struct UNet {
    pub spec: SegmentationNetSpec,
    store: ParamStore<f32>,
    enc: Vec<DoubleConv>,
    mid: DoubleConv,
    dec: Vec<DecStage>,
    head: Conv,
    aux: Vec<Conv>,
    /// Opaque run identifier stored in checkpoints.
    pub tag: String,
    trained: bool,
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let limit = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-limit..limit) as f32)
}

struct Builder<'a> {
    store: &'a mut ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let w = self.store.add(format!("{name}.w"), he_uniform(&[cout, cin, k, k], cin * k * k, &mut self.rng));
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv { w, b }
    }

    fn conv_t(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let w = self.store.add(format!("{name}.w"), he_uniform(&[cin, cout, k, k], cin, &mut self.rng));
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv { w, b }
    }

    fn double(&mut self, name: &str, cin: usize, cout: usize) -> DoubleConv {
        DoubleConv { a: self.conv(&format!("{name}.0"), cin, cout, 3), b: self.conv(&format!("{name}.1"), cout, cout, 3) }
    }
}

struct Outputs {
    main: Var,
    aux: Vec<Var>,
}

impl UNet {
    pub fn new(spec: SegmentationNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
        let f = spec.base_filters;
        let widths: Vec<usize> = (0..spec.depth).map(|i| f << i).collect();
        let mut enc = Vec::new();
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            enc.push(b.double(&format!("enc{i}"), cin, w));
            cin = w;
        }
        let bottom = f << spec.depth;
        let mid = b.double("mid", cin, bottom);
        let mut dec = Vec::new();
        let mut cur = bottom;
        for (i, &skip) in widths.iter().enumerate().rev() {
            let name = format!("dec{i}");
            let up = b.conv_t(&format!("{name}.up"), cur, skip, 2);
            let att = spec.attention_gates.then(|| {
                let inter = (skip / 2).max(1);
                Attention {
                    wx: b.conv(&format!("{name}.att.x"), skip, inter, 1),
                    wg: b.conv(&format!("{name}.att.g"), skip, inter, 1),
                    psi: b.conv(&format!("{name}.att.psi"), inter, 1, 1),
                }
            });
            let conv = b.double(&format!("{name}.conv"), 2 * skip, skip);
            dec.push(DecStage { up, att, conv });
            cur = skip;
        }
        let head = b.conv("head", f, 1, 1);
        let aux = if spec.deep_supervision {
            vec![b.conv("aux0", widths[spec.depth - 1], 1, 1), b.conv("aux1", widths[spec.depth - 2], 1, 1)]
        } else {
            vec![]
        };
        Ok(Self { spec, store, enc, mid, dec, head, aux, tag: String::new(), trained: false })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    fn conv<'p>(&'p self, g: &mut Graph<'p, f32>, x: Var, c: Conv, pad: usize, train: bool) -> Var {
        let w = g.param(&self.store, c.w, train);
        let b = g.param(&self.store, c.b, train);
        g.conv2d(x, w, b, 1, pad)
    }

    fn double<'p>(&'p self, g: &mut Graph<'p, f32>, x: Var, d: DoubleConv, train: bool) -> Var {
        let h = self.conv(g, x, d.a, 1, train);
        let h = g.relu(h);
        let h = self.conv(g, h, d.b, 1, train);
        g.relu(h)
    }

    fn forward<'p>(&'p self, g: &mut Graph<'p, f32>, x: Var, train: bool) -> Outputs {
        let mut skips = Vec::new();
        let mut h = x;
        for &stage in &self.enc {
            let s = self.double(g, h, stage, train);
            skips.push(s);
            h = g.max_pool2(s);
        }
        h = self.double(g, h, self.mid, train);
        let mut aux = Vec::new();
        for (i, st) in self.dec.iter().enumerate() {
            let w = g.param(&self.store, st.up.w, train);
            let b = g.param(&self.store, st.up.b, train);
            let up = g.conv_transpose2d(h, w, b, 2, 0, 0);
            let skip = skips[self.enc.len() - 1 - i];
            let gated = match st.att {
                Some(a) => {
                    let sx = self.conv(g, skip, a.wx, 0, train);
                    let sg = self.conv(g, up, a.wg, 0, train);
                    let s = g.add(sx, sg);
                    let s = g.relu(s);
                    let s = self.conv(g, s, a.psi, 0, train);
                    let alpha = g.sigmoid(s);
                    g.gate(skip, alpha)
                }
                None => skip,
            };
            let cat = g.concat_channels(gated, up);
            h = self.double(g, cat, st.conv, train);
            if i < self.aux.len() {
                aux.push(self.conv(g, h, self.aux[i], 0, train));
            }
        }
        Outputs { main: self.conv(g, h, self.head, 0, train), aux }
    }

    /// Pore probabilities for an image whose sides are multiples of
    /// `2^depth`, batched as `[n, 3, h, w]`.
    fn probabilities(&self, batch: Tensor<f32>) -> Vec<f32> {
        let mut g = Graph::new();
        let x = g.input(batch);
        let out = self.forward(&mut g, x, false);
        g.value(out.main).data().iter().map(|&z| sigmoid(z)).collect()
    }

    /// Per-pixel pore probability for an image of any size. Small inputs are
    /// reflect-padded, large ones tiled; pixels are never resampled.
    pub fn predict_prob(&self, image: &RgbImage) -> Result<Vec<f32>> {
        if !self.trained {
            return Err(Error::State("segmenter has not been trained or loaded".into()));
        }
        let (w, h) = (image.width(), image.height());
        let tile = self.spec.tile;
        let mut out = vec![0f32; w * h];
        let starts = |n: usize| -> Vec<usize> {
            if n <= tile {
                return vec![0];
            }
            let mut v: Vec<usize> = (0..n - tile).step_by(tile).collect();
            v.push(n - tile);
            v
        };
        for &y0 in &starts(h) {
            for &x0 in &starts(w) {
                let (tw, th) = (tile.min(w), tile.min(h));
                let crop = image.crop(x0, y0, tw, th)?;
                let m = 1 << self.spec.depth;
                let (pw, ph) = (tw.div_ceil(m) * m, th.div_ceil(m) * m);
                let padded = reflect_pad(&crop, pw, ph);
                let probs = self.probabilities(to_network_domain(&padded).reshape(&[1, 3, ph, pw]));
                for y in 0..th {
                    for x in 0..tw {
                        out[(y0 + y) * w + x0 + x] = probs[y * pw + x];
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if !self.trained {
            return Err(Error::State("refusing to save an untrained segmenter".into()));
        }
        let header = serde_json::json!({
            "kind": "unet",
            "spec": self.spec,
            "shapes": self.store.shapes(),
            "tag": self.tag,
        });
        let mut blob = Vec::new();
        self.store.write_blob(&mut blob);
        checkpoint::write(path, &header, &[blob])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, blobs) = checkpoint::read(path)?;
        if header["kind"] != "unet" || blobs.len() != 1 {
            return Err(Error::Checkpoint(format!("{} is not a segmenter checkpoint", path.display())));
        }
        let spec: SegmentationNetSpec = serde_json::from_value(header["spec"].clone())?;
        let mut net = Self::new(spec, 0)?;
        let used = net.store.read_blob(&blobs[0])?;
        if used != blobs[0].len() {
            return Err(Error::Checkpoint("parameter blob size does not match the spec".into()));
        }
        net.tag = header["tag"].as_str().unwrap_or_default().to_string();
        net.trained = true;
        Ok(net)
    }
}

/// Mirror-pads `image` on the right and bottom to `w`×`h`.
fn reflect_pad(image: &RgbImage, w: usize, h: usize) -> RgbImage {
    if image.width() == w && image.height() == h {
        return image.clone();
    }
    let fold = |i: usize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let r = i % period;
        if r < n {
            r
        } else {
            period - r
        }
    };
    let mut out = RgbImage::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(x, y, image.pixel(fold(x, image.width()), fold(y, image.height())));
        }
    }
    out.pixel_size = image.pixel_size;
    out
}

impl MaskPredictor for UNet {
    fn predict_mask(&self, image: &RgbImage) -> Result<BinaryMask> {
        let p = self.predict_prob(image)?;
        BinaryMask::new(image.width(), image.height(), p.iter().map(|&v| (v > 0.5) as u8).collect())
    }
}

/// Convenience wrapper returning the predicted mask.
pub fn segment(model: &UNet, image: &RgbImage) -> Result<BinaryMask> {
    model.predict_mask(image)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegTrainConfig {
    pub dice_weight: f64,
    pub bce_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    pub net: SegmentationNetSpec,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            dice_weight: 0.5,
            bce_weight: 0.5,
            epochs: 20,
            batch_size: 4,
            learning_rate: 1e-3,
            final_learning_rate: 1e-4,
            val_fraction: 0.15,
            test_fraction: 0.15,
            seed: 0,
            net: SegmentationNetSpec::default(),
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if (self.dice_weight + self.bce_weight - 1.0).abs() > 1e-9 || self.dice_weight < 0.0 || self.bce_weight < 0.0 {
            p.push(format!("dice_weight + bce_weight must equal 1, got {} + {}", self.dice_weight, self.bce_weight));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            p.push("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.final_learning_rate > 0.0) {
            p.push("learning rates must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.test_fraction > 0.0 && self.val_fraction + self.test_fraction < 1.0) {
            p.push("val/test fractions must be positive and leave a training split".into());
        }
        if let Err(Error::Config(mut more)) = self.net.validate() {
            p.append(&mut more);
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    /// Mean over images.
    pub dice: f64,
    pub dice_std: f64,
    pub iou: f64,
    pub accuracy: f64,
    pub porosity_mae: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub metrics: SegMetrics,
    pub history: Vec<SegEpoch>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

type Sample = (RgbImage, BinaryMask);

fn batch_tensors(items: &[&Sample]) -> (Tensor<f32>, Tensor<f32>) {
    let x = Tensor::stack(&items.iter().map(|(img, _)| to_network_domain(img)).collect::<Vec<_>>(), false);
    let (w, h) = (items[0].1.width(), items[0].1.height());
    let t = Tensor::stack(
        &items
            .iter()
            .map(|(_, m)| Tensor::new(&[1, h, w], m.data().iter().map(|&v| v as f32).collect()))
            .collect::<Vec<_>>(),
        false,
    );
    (x, t)
}

/// Deep-supervised hybrid loss and the logit seeds for every head.
fn supervised_loss(
    net: &UNet,
    g: &Graph<'_, f32>,
    out: &Outputs,
    target: &Tensor<f32>,
    cfg: &SegTrainConfig,
) -> (f64, Vec<(Var, Tensor<f32>)>) {
    let weights: Vec<f64> = if net.aux.is_empty() { vec![1.0] } else { net.spec.head_weights.clone() };
    let total: f64 = weights.iter().sum();
    let mut heads = vec![out.main];
    heads.extend(&out.aux);
    let mut loss = 0.0;
    let mut seeds = Vec::new();
    for (k, (&v, &wk)) in heads.iter().zip(&weights).enumerate() {
        let shape = g.shape(v).to_vec();
        // aux head k sits at 1/2^(depth - k) of full resolution
        let mut t = target.clone();
        if k > 0 {
            for _ in 0..net.spec.depth - k {
                t = avg_pool2(&t);
            }
        }
        debug_assert_eq!(t.shape(), &shape[..]);
        let z: Vec<f64> = g.value(v).data().iter().map(|&x| x as f64).collect();
        let tt: Vec<f64> = t.data().iter().map(|&x| x as f64).collect();
        let (l, grad) = hybrid_loss_logits(&z, &tt, cfg.dice_weight, cfg.bce_weight);
        let scale = wk / total;
        loss += scale * l;
        seeds.push((v, Tensor::new(&shape, grad.iter().map(|&d| (d * scale) as f32).collect())));
    }
    (loss, seeds)
}

fn eval_loss(net: &UNet, data: &[Sample], cfg: &SegTrainConfig) -> f64 {
    let mut total = 0.0;
    for chunk in data.chunks(cfg.batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, t) = batch_tensors(&refs);
        let mut g = Graph::new();
        let xv = g.input(x);
        let out = net.forward(&mut g, xv, false);
        total += supervised_loss(net, &g, &out, &t, cfg).0 * chunk.len() as f64;
    }
    total / data.len() as f64
}

fn check_samples(data: &[Sample], m: usize) -> Result<()> {
    let (w, h) = (data[0].0.width(), data[0].0.height());
    for (img, mask) in data {
        if img.width() != w || img.height() != h || mask.width() != w || mask.height() != h {
            return Err(Error::Dimension("segmentation samples must share one size with aligned masks".into()));
        }
    }
    if w % m != 0 || h % m != 0 {
        return Err(Error::Dimension(format!("training patches must be multiples of {m} pixels, got {w}x{h}")));
    }
    Ok(())
}

/// Fits a segmenter on `train`, keeping the parameters with the lowest
/// validation loss.
pub fn fit(train: &[Sample], val: &[Sample], cfg: &SegTrainConfig) -> Result<(UNet, Vec<SegEpoch>, usize)> {
    cfg.validate()?;
    if train.len() < 2 || val.len() < 2 {
        return Err(Error::Config(vec![format!(
            "need at least 2 training and 2 validation samples, got {} and {}",
            train.len(),
            val.len()
        )]));
    }
    check_samples(train, 1 << cfg.net.depth)?;
    check_samples(val, 1 << cfg.net.depth)?;
    let mut net = UNet::new(cfg.net.clone(), cfg.seed)?;
    let mut adam = Adam::new(&net.store, 0.9, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e6);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, ParamStore<f32>, usize)> = None;
    for epoch in 1..=cfg.epochs {
        let frac = if cfg.epochs > 1 { (epoch - 1) as f64 / (cfg.epochs - 1) as f64 } else { 0.0 };
        let lr = cfg.learning_rate + (cfg.final_learning_rate - cfg.learning_rate) * frac;
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, t) = batch_tensors(&refs);
            let grads = {
                let mut g = Graph::new();
                let xv = g.input(x);
                let out = net.forward(&mut g, xv, true);
                let (loss, seeds) = supervised_loss(&net, &g, &out, &t, cfg);
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        stage: "seg-train",
                        index: epoch,
                        detail: format!("training loss {loss}"),
                        last_checkpoint: None,
                    });
                }
                train_loss += loss * chunk.len() as f64;
                g.backward_multi(seeds).for_store(&net.store)
            };
            adam.step(&mut net.store, &grads, lr);
        }
        let val_loss = eval_loss(&net, val, cfg);
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                stage: "seg-train",
                index: epoch,
                detail: format!("validation loss {val_loss}"),
                last_checkpoint: None,
            });
        }
        log::info!("seg epoch {epoch}: train {:.4} val {val_loss:.4}", train_loss / train.len() as f64);
        history.push(SegEpoch { epoch, train_loss: train_loss / train.len() as f64, val_loss });
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, net.store.clone(), epoch));
        }
    }
    let (_, store, best_epoch) = best.expect("at least one epoch");
    net.store = store;
    net.trained = true;
    Ok((net, history, best_epoch))
}

/// Mean per-image Dice, IoU, accuracy and porosity error.
pub fn evaluate(model: &dyn MaskPredictor, data: &[Sample]) -> Result<SegMetrics> {
    if data.is_empty() {
        return Err(Error::Config(vec!["empty evaluation split".into()]));
    }
    let (mut dices, mut ious, mut accs, mut errs) = (vec![], vec![], vec![], vec![]);
    for (img, truth) in data {
        let pred = model.predict_mask(img)?;
        dices.push(dice_binary(&pred, truth)?);
        ious.push(iou(&pred, truth)?);
        let agree = pred.data().iter().zip(truth.data()).filter(|(a, b)| a == b).count();
        accs.push(agree as f64 / truth.data().len() as f64);
        errs.push((porosity_of_mask(&pred)? - porosity_of_mask(truth)?).abs());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let md = mean(&dices);
    Ok(SegMetrics {
        dice: md,
        dice_std: (dices.iter().map(|d| (d - md).powi(2)).sum::<f64>() / dices.len() as f64).sqrt(),
        iou: mean(&ious),
        accuracy: mean(&accs),
        porosity_mae: mean(&errs),
    })
}

/// Shuffles and splits `dataset` into train/validation/test, trains, and
/// reports metrics on the held-out test split.
pub fn train_segmenter(dataset: &[Sample], cfg: &SegTrainConfig) -> Result<(UNet, SegReport)> {
    cfg.validate()?;
    let n = dataset.len();
    let n_val = (n as f64 * cfg.val_fraction).round() as usize;
    let n_test = (n as f64 * cfg.test_fraction).round() as usize;
    let n_train = n.saturating_sub(n_val + n_test);
    if n_train < 2 || n_val < 2 || n_test < 2 {
        return Err(Error::Config(vec![format!(
            "{n} samples give train/val/test = {n_train}/{n_val}/{n_test}; each split needs at least 2"
        )]));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let pick = |r: &[usize]| r.iter().map(|&i| dataset[i].clone()).collect::<Vec<_>>();
    let (train, val, test) = (pick(&idx[..n_train]), pick(&idx[n_train..n_train + n_val]), pick(&idx[n_train + n_val..]));
    let (net, history, best_epoch) = fit(&train, &val, cfg)?;
    let metrics = evaluate(&net, &test)?;
    Ok((net, SegReport { metrics, history, best_epoch, n_train, n_val, n_test }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn dice_examples() {
        let t: Vec<f64> = (0..100).map(|i| (i < 30) as u8 as f64).collect();
        assert!((dice_coefficient(&t, &t).unwrap() - 1.0).abs() < 1e-4);
        let disjoint: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
        assert!(dice_coefficient(&disjoint, &t).unwrap().abs() < 1e-4);
        // truth plus an equal-area false region: 2·30 / (60 + 30)
        let over: Vec<f64> = (0..100).map(|i| (i < 60) as u8 as f64).collect();
        assert!((dice_coefficient(&over, &t).unwrap() - 2.0 / 3.0).abs() < 1e-3);
        assert!(dice_coefficient(&over, &t[..50]).is_err());
    }

    #[test]
    fn hybrid_examples() {
        let p = vec![0.5; 64];
        let t = vec![1.0; 64];
        let l = hybrid_loss(&p, &t).unwrap();
        let expect = 0.5 * (1.0 - 2.0 * 0.5 / 1.5) + 0.5 * 2f64.ln();
        assert!((l - expect).abs() < 1e-6);
        assert!((l - 0.5132).abs() < 1e-4);
        let exact: Vec<f64> = (0..64).map(|i| (i % 3 == 0) as u8 as f64).collect();
        assert!(hybrid_loss(&exact, &exact).unwrap() <= 1e-3);
    }

    #[test]
    fn hybrid_loss_never_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let n = rng.random_range(1..40);
            let p: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let t: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
            assert!(hybrid_loss(&p, &t).unwrap() >= 0.0);
        }
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z: Vec<f64> = (0..30).map(|_| rng.random_range(-3.0..3.0)).collect();
        let t: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let (l0, g) = hybrid_loss_logits(&z, &t, 0.5, 0.5);
        let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        assert!((l0 - hybrid_loss(&p, &t).unwrap()).abs() < 1e-12);
        for i in 0..z.len() {
            let mut a = z.clone();
            a[i] += 1e-6;
            let mut b = z.clone();
            b[i] -= 1e-6;
            let fd = (hybrid_loss_logits(&a, &t, 0.5, 0.5).0 - hybrid_loss_logits(&b, &t, 0.5, 0.5).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn shapes_follow_input() {
        let spec = SegmentationNetSpec { base_filters: 4, tile: 32, ..SegmentationNetSpec::default() };
        let mut net = UNet::new(spec, 0).unwrap();
        let img = RgbImage::filled(40, 21, [10, 20, 30]);
        assert!(matches!(net.predict_mask(&img), Err(Error::State(_))));
        net.trained = true;
        let m = net.predict_mask(&img).unwrap();
        assert_eq!((m.width(), m.height()), (40, 21));
    }

    #[test]
    fn split_constraints() {
        let img = RgbImage::filled(16, 16, [0, 0, 0]);
        let data = vec![(img, BinaryMask::zeros(16, 16))];
        assert!(matches!(train_segmenter(&data, &SegTrainConfig::default()), Err(Error::Config(_))));
        let bad = SegTrainConfig { dice_weight: 0.7, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn reflect_pad_mirrors() {
        let mut img = RgbImage::filled(3, 1, [0, 0, 0]);
        img.set_pixel(1, 0, [1, 1, 1]);
        img.set_pixel(2, 0, [2, 2, 2]);
        let p = reflect_pad(&img, 6, 2);
        let row: Vec<u8> = (0..6).map(|x| p.pixel(x, 1)[0]).collect();
        assert_eq!(row, vec![0, 1, 2, 1, 0, 1]);
    }

    proptest! {
        #[test]
        fn dice_iou_identity(bits in proptest::collection::vec((0u8..2, 0u8..2), 1..80)) {
            let n = bits.len();
            let a = BinaryMask::new(n, 1, bits.iter().map(|b| b.0).collect()).unwrap();
            let b = BinaryMask::new(n, 1, bits.iter().map(|b| b.1).collect()).unwrap();
            let d = dice_binary(&a, &b).unwrap();
            let j = iou(&a, &b).unwrap();
            prop_assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-9);
            prop_assert!(j <= d + 1e-12);
        }
    }
}
