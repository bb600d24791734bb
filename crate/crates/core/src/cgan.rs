//! Multi-conditional GAN: architecture presets, conditioning assembly,
//! adversarial losses and the training loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use poregan_nn::{glorot_uniform, sigmoid, Adam, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::petro::probe_grid;
use crate::raster::{
    from_network_domain, porosity_of_mask, to_network_domain, ConditionVector, DepthLabel, MaskPredictor, PatchRecord,
    RgbImage,
};
use crate::stats::r_squared;

pub const LATENT_DIM: usize = 100;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const SCORE_CLAMP: f64 = 1e-7;
pub const BN_EPS: f64 = 1e-3;
/// Weight of the old value in the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Original,
    #[serde(rename = "modelA")]
    ModelA,
    #[serde(rename = "modelB")]
    ModelB,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Original, Arch::ModelA, Arch::ModelB];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Original => "original",
            Arch::ModelA => "modelA",
            Arch::ModelB => "modelB",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Arch::Original),
            "modelA" | "modela" | "A" => Ok(Arch::ModelA),
            "modelB" | "modelb" | "B" => Ok(Arch::ModelB),
            _ => Err(Error::Validation(format!("unknown architecture {s:?} (original|modelA|modelB)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub latent_dim: usize,
    pub n_depths: usize,
    pub base_hw: usize,
    pub dense_channels: usize,
    pub blocks: Vec<BlockSpec>,
}

impl GeneratorSpec {
    pub fn input_channels(&self) -> usize {
        self.dense_channels + self.n_depths + 1
    }

    pub fn output_hw(&self) -> usize {
        self.blocks.iter().fold(self.base_hw, |hw, b| hw * b.stride)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub image_hw: usize,
    pub n_depths: usize,
    pub filters: Vec<usize>,
    pub kernels: Vec<usize>,
    pub dropout: f64,
}

impl DiscriminatorSpec {
    pub fn input_channels(&self) -> usize {
        3 + self.n_depths + 1
    }

    fn final_hw(&self) -> usize {
        self.image_hw >> self.filters.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanSpec {
    pub arch: Arch,
    pub toy: bool,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
}

fn blocks(channels: &[usize], strides: &[usize]) -> Vec<BlockSpec> {
    let n = channels.len();
    channels
        .iter()
        .zip(strides)
        .enumerate()
        .map(|(i, (&c, &s))| BlockSpec { out_channels: c, kernel: if i + 2 >= n { 5 } else { 3 }, stride: s })
        .collect()
}

impl GanSpec {
    /// Full-size (480×480) or toy (96×96, channels ÷4) preset.
    pub fn preset(arch: Arch, n_depths: usize, toy: bool) -> Self {
        let (dense, gen_ch, strides, disc): (usize, Vec<usize>, Vec<usize>, Vec<usize>) = match arch {
            Arch::Original => (512, vec![256, 128, 64, 32, 3], vec![1, 2, 2, 2, 2], vec![64, 128, 256, 256, 256]),
            Arch::ModelA => (384, vec![256, 128, 96, 64, 32, 3], vec![1, 1, 2, 2, 2, 2], vec![56, 112, 224, 224, 224]),
            Arch::ModelB => (256, vec![192, 96, 48, 24, 3], vec![1, 2, 2, 2, 2], vec![48, 96, 192, 192, 192]),
        };
        let div = |c: usize| if toy && c != 3 { c / 4 } else { c };
        let base_hw = if toy { 6 } else { 30 };
        let gen_ch: Vec<usize> = gen_ch.into_iter().map(div).collect();
        Self {
            arch,
            toy,
            generator: GeneratorSpec {
                latent_dim: LATENT_DIM,
                n_depths,
                base_hw,
                dense_channels: div(dense),
                blocks: blocks(&gen_ch, &strides),
            },
            discriminator: DiscriminatorSpec {
                image_hw: base_hw * 16,
                n_depths,
                kernels: vec![5, 5, 3, 3, 3],
                filters: disc.into_iter().map(div).collect(),
                dropout: 0.3,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.generator;
        let d = &self.discriminator;
        let mut p = Vec::new();
        if g.n_depths == 0 || g.n_depths != d.n_depths {
            p.push("generator and discriminator need the same positive n_depths".into());
        }
        if g.blocks.last().map(|b| b.out_channels) != Some(3) {
            p.push("last generator block must output 3 channels".into());
        }
        for b in &g.blocks {
            if !(b.stride == 1 || b.stride == 2) || b.kernel % 2 == 0 {
                p.push(format!("unsupported block {b:?}: odd kernels with stride 1 or 2 only"));
            }
        }
        if g.output_hw() != d.image_hw {
            p.push(format!("generator emits {} px but discriminator expects {}", g.output_hw(), d.image_hw));
        }
        if d.filters.len() != d.kernels.len() || d.filters.is_empty() {
            p.push("discriminator filters and kernels must pair up".into());
        }
        if d.image_hw % (1 << d.filters.len()) != 0 {
            p.push("discriminator input must halve cleanly at every block".into());
        }
        if !(0.0..1.0).contains(&d.dropout) {
            p.push("dropout must lie in [0, 1)".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Trainable scalars of the generator + discriminator pair.
pub fn parameter_count(spec: &GanSpec) -> usize {
    let g = &spec.generator;
    let hw2 = g.base_hw * g.base_hw;
    // batch norm: scale, shift, running mean and variance per channel
    let mut n = g.latent_dim * hw2 * g.dense_channels + hw2 * g.dense_channels + 4 * hw2 * g.dense_channels;
    let mut cin = g.input_channels();
    for (i, b) in g.blocks.iter().enumerate() {
        n += cin * b.out_channels * b.kernel * b.kernel + b.out_channels;
        if i + 1 < g.blocks.len() {
            n += 4 * b.out_channels;
        }
        cin = b.out_channels;
    }
    let d = &spec.discriminator;
    let mut cin = d.input_channels();
    for (&f, &k) in d.filters.iter().zip(&d.kernels) {
        n += cin * f * k * k + f;
        cin = f;
    }
    n + d.final_hw() * d.final_hw() * cin + 1
}

/// Per-sample condition planes `[n, n_depths + 1, hw, hw]`: one-hot depth
/// channels followed by the porosity channel.
pub fn condition_planes<T: Scalar>(conds: &[ConditionVector], n_depths: usize, hw: usize) -> Result<Tensor<T>> {
    let plane = hw * hw;
    let mut data = Vec::with_capacity(conds.len() * (n_depths + 1) * plane);
    for c in conds {
        if c.depth.n_depths != n_depths {
            return Err(Error::Validation(format!(
                "condition has {} depths, model expects {n_depths}",
                c.depth.n_depths
            )));
        }
        for v in c.depth_one_hot().into_iter().map(f64::from).chain([c.porosity]) {
            data.extend(std::iter::repeat_n(T::lit(v), plane));
        }
    }
    Ok(Tensor::new(&[conds.len(), n_depths + 1, hw, hw], data))
}

/// Recovers the condition from the trailing `n_depths + 1` channels of an
/// assembled input `[1, C, h, w]`, checking that each plane is constant.
pub fn read_conditions(input: &Tensor<f32>, n_depths: usize) -> Result<ConditionVector> {
    let (n, c, h, w) = input.dims4();
    if n != 1 || c < n_depths + 1 {
        return Err(Error::Dimension(format!("cannot read conditions from shape {:?}", input.shape())));
    }
    let plane = h * w;
    let mut vals = Vec::new();
    for ch in c - n_depths - 1..c {
        let p = &input.data()[ch * plane..(ch + 1) * plane];
        if p.iter().any(|&v| v != p[0]) {
            return Err(Error::Validation(format!("condition channel {ch} is not spatially constant")));
        }
        vals.push(p[0] as f64);
    }
    let phi = vals.pop().expect("porosity channel");
    if vals.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation("depth channels are not one-hot".into()));
    }
    let depth = crate::raster::depth_from_one_hot(&vals.iter().map(|&v| v as u8).collect::<Vec<_>>())?;
    ConditionVector::new(phi, depth)
}

/// Image channels followed by the replicated condition channels.
pub fn assemble_discriminator_input(image: &RgbImage, c: &ConditionVector, spec: &DiscriminatorSpec) -> Result<Tensor<f32>> {
    if image.width() != spec.image_hw || image.height() != spec.image_hw {
        return Err(Error::Validation(format!(
            "discriminator expects {0}x{0} images, got {1}x{2}",
            spec.image_hw,
            image.width(),
            image.height()
        )));
    }
    let img = to_network_domain(image);
    let cond = condition_planes::<f32>(std::slice::from_ref(c), spec.n_depths, spec.image_hw)?;
    let mut data = img.data().to_vec();
    data.extend_from_slice(cond.data());
    Ok(Tensor::new(&[1, spec.input_channels(), spec.image_hw, spec.image_hw], data))
}

fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len() as f64;
    v.sum::<f64>() / n
}

/// `−mean log D(real) − mean log(1 − D(fake))` on clamped scores.
pub fn discriminator_loss(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(Error::Validation("discriminator loss needs real and fake scores".into()));
    }
    Ok(-mean(real_scores.iter().map(|&s| clamp_score(s).ln()))
        - mean(fake_scores.iter().map(|&s| (1.0 - clamp_score(s)).ln())))
}

/// Non-saturating `−mean log D(G(z))` on clamped scores.
pub fn generator_loss(fake_scores: &[f64]) -> Result<f64> {
    if fake_scores.is_empty() {
        return Err(Error::Validation("generator loss needs fake scores".into()));
    }
    Ok(-mean(fake_scores.iter().map(|&s| clamp_score(s).ln())))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `−log σ(l)` averaged, with its gradient in `l`. Used on logits so that
/// training never sees a clamped (flat) region.
fn nll_real(logits: &[f64]) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    (logits.iter().map(|&l| softplus(-l)).sum::<f64>() / n, logits.iter().map(|&l| (sigmoid(l) - 1.0) / n).collect())
}

/// `−log(1 − σ(l))` averaged, with its gradient in `l`.
fn nll_fake(logits: &[f64]) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    (logits.iter().map(|&l| softplus(l)).sum::<f64>() / n, logits.iter().map(|&l| sigmoid(l) / n).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanTrainConfig {
    pub epochs: usize,
    /// m: each step sees m/2 real + m/2 fake, then m generator samples.
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Porosity targets per depth tracked after every epoch.
    pub probe_targets: usize,
    pub probe_samples: usize,
    /// Copied into every checkpoint.
    #[serde(default)]
    pub tag: String,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            beta1: 0.5,
            beta2: 0.999,
            lr_start: 2.0e-4,
            lr_end: 2.0e-6,
            seed: 0,
            checkpoint_every: 10,
            probe_targets: 5,
            probe_samples: 2,
            tag: String::new(),
        }
    }
}

impl GanTrainConfig {
    pub fn toy() -> Self {
        Self { epochs: 30, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.epochs == 0 {
            p.push("epochs must be positive".to_string());
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            p.push(format!("batch_size must be even and >= 2 (m/2 real + m/2 fake), got {}", self.batch_size));
        }
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            p.push("learning rate must decay from lr_start to a positive lr_end".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            p.push("Adam betas must lie in [0, 1)".into());
        }
        if self.checkpoint_every == 0 || self.probe_targets == 0 || self.probe_samples == 0 {
            p.push("checkpoint_every, probe_targets and probe_samples must be positive".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Linear decay from `lr_start` at epoch 0 to `lr_end` at `epochs`.
pub fn lr_schedule(epoch: usize, config: &GanTrainConfig) -> Result<f64> {
    if epoch > config.epochs {
        return Err(Error::Validation(format!("epoch {epoch} outside 0..={}", config.epochs)));
    }
    let t = epoch as f64 / config.epochs as f64;
    Ok(config.lr_start + (config.lr_end - config.lr_start) * t)
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

fn layer<T: Scalar>(store: &mut ParamStore<T>, name: &str, w: Tensor<T>, n_out: usize) -> Layer {
    Layer { w: store.add(format!("{name}.w"), w), b: store.add(format!("{name}.b"), Tensor::zeros(&[n_out])) }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

fn norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Norm {
    Norm {
        gamma: store.add(format!("{name}.gamma"), Tensor::new(&[c], vec![T::one(); c])),
        beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
        mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[c])),
        var: store.add(format!("{name}.running_var"), Tensor::new(&[c], vec![T::one(); c])),
    }
}

#[derive(Clone, Debug)]
pub struct Generator<T: Scalar> {
    pub spec: GeneratorSpec,
    pub store: ParamStore<T>,
    dense: Layer,
    blocks: Vec<Layer>,
    /// Dense output first, then every block but the last.
    norms: Vec<Norm>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(spec: GeneratorSpec, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let hw2 = spec.base_hw * spec.base_hw;
        let n_dense = spec.dense_channels * hw2;
        let dense = layer(
            &mut store,
            "g.dense",
            glorot_uniform(&[n_dense, spec.latent_dim], spec.latent_dim, n_dense, rng),
            n_dense,
        );
        let mut norms = vec![norm(&mut store, "g.dense.bn", n_dense)];
        let mut cin = spec.input_channels();
        let mut blocks = Vec::new();
        for (i, b) in spec.blocks.iter().enumerate() {
            let k2 = b.kernel * b.kernel;
            let w = glorot_uniform(&[cin, b.out_channels, b.kernel, b.kernel], cin * k2, b.out_channels * k2, rng);
            blocks.push(layer(&mut store, &format!("g.block{i}"), w, b.out_channels));
            if i + 1 < spec.blocks.len() {
                norms.push(norm(&mut store, &format!("g.block{i}.bn"), b.out_channels));
            }
            cin = b.out_channels;
        }
        Self { spec, store, dense, blocks, norms }
    }

    /// Batch statistics in training, running statistics otherwise.
    fn normalize<'p>(&'p self, g: &mut Graph<'p, T>, h: Var, k: usize, train: bool, bn: &mut Vec<Var>) -> Var {
        let n = &self.norms[k];
        let gamma = g.param(&self.store, n.gamma, train);
        let beta = g.param(&self.store, n.beta, train);
        if train {
            let v = g.batch_norm(h, gamma, beta, BN_EPS, None);
            bn.push(v);
            v
        } else {
            let running = (self.store.get(n.mean).data(), self.store.get(n.var).data());
            g.batch_norm(h, gamma, beta, BN_EPS, Some(running))
        }
    }

    fn base<'p>(&'p self, g: &mut Graph<'p, T>, z: Tensor<T>, cond: Tensor<T>, train: bool, bn: &mut Vec<Var>) -> Var {
        let n = z.shape()[0];
        let s = &self.spec;
        let zv = g.input(z);
        let w = g.param(&self.store, self.dense.w, train);
        let b = g.param(&self.store, self.dense.b, train);
        let h = g.linear(zv, w, b);
        let h = self.normalize(g, h, 0, train, bn);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = g.reshape(h, &[n, s.dense_channels, s.base_hw, s.base_hw]);
        let c = g.input(cond);
        g.concat_channels(h, c)
    }

    /// Generated images `[n, 3, H, W]` in the network domain.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p, T>, z: Tensor<T>, cond: Tensor<T>, train: bool) -> Var {
        self.forward_with_norms(g, z, cond, train).0
    }

    /// As [`Generator::forward`], also returning the batch-norm nodes (empty
    /// unless `train`) for [`Generator::update_running_stats`].
    pub fn forward_with_norms<'p>(
        &'p self,
        g: &mut Graph<'p, T>,
        z: Tensor<T>,
        cond: Tensor<T>,
        train: bool,
    ) -> (Var, Vec<Var>) {
        let mut bn = Vec::new();
        let mut h = self.base(g, z, cond, train, &mut bn);
        let last = self.blocks.len() - 1;
        for (i, (l, b)) in self.blocks.iter().zip(&self.spec.blocks).enumerate() {
            let w = g.param(&self.store, l.w, train);
            let bias = g.param(&self.store, l.b, train);
            let pad = b.kernel / 2;
            h = g.conv_transpose2d(h, w, bias, b.stride, pad, b.stride - 1);
            h = if i == last {
                g.tanh(h)
            } else {
                let h = self.normalize(g, h, i + 1, train, &mut bn);
                g.leaky_relu(h, LEAKY_SLOPE)
            };
        }
        (h, bn)
    }

    /// Folds batch statistics (in `forward_with_norms` order) into the
    /// running averages.
    pub fn update_running_stats(&mut self, stats: &[(Vec<T>, Vec<T>)]) {
        let (keep, take) = (T::lit(BN_MOMENTUM), T::lit(1.0 - BN_MOMENTUM));
        for (n, (mean, var)) in self.norms.iter().zip(stats) {
            for (r, &b) in self.store.get_mut(n.mean).data_mut().iter_mut().zip(mean) {
                *r = keep * *r + take * b;
            }
            for (r, &b) in self.store.get_mut(n.var).data_mut().iter_mut().zip(var) {
                *r = keep * *r + take * b;
            }
        }
    }
}

fn norm_stats<T: Scalar>(g: &Graph<'_, T>, bn: &[Var]) -> Vec<(Vec<T>, Vec<T>)> {
    bn.iter()
        .map(|&v| {
            let (m, s) = g.batch_norm_stats(v).expect("batch-norm node");
            (m.to_vec(), s.to_vec())
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Discriminator<T: Scalar> {
    pub spec: DiscriminatorSpec,
    pub store: ParamStore<T>,
    convs: Vec<Layer>,
    dense: Layer,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(spec: DiscriminatorSpec, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let mut cin = spec.input_channels();
        let mut convs = Vec::new();
        for (i, (&f, &k)) in spec.filters.iter().zip(&spec.kernels).enumerate() {
            let w = glorot_uniform(&[f, cin, k, k], cin * k * k, f * k * k, rng);
            convs.push(layer(&mut store, &format!("d.conv{i}"), w, f));
            cin = f;
        }
        let flat = spec.final_hw() * spec.final_hw() * cin;
        let dense = layer(&mut store, "d.dense", glorot_uniform(&[1, flat], flat, 1, rng), 1);
        Self { spec, store, convs, dense }
    }

    /// Logits `[n, 1]`; dropout is applied only when an rng is supplied.
    pub fn forward<'p>(
        &'p self,
        g: &mut Graph<'p, T>,
        image: Var,
        cond: Tensor<T>,
        train: bool,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let n = g.shape(image)[0];
        let c = g.input(cond);
        let mut h = g.concat_channels(image, c);
        for (l, &k) in self.convs.iter().zip(&self.spec.kernels) {
            let w = g.param(&self.store, l.w, train);
            let b = g.param(&self.store, l.b, train);
            h = g.conv2d(h, w, b, 2, k / 2);
            h = g.leaky_relu(h, LEAKY_SLOPE);
            if let Some(rng) = dropout.as_deref_mut() {
                h = g.dropout(h, self.spec.dropout, rng);
            }
        }
        let flat: usize = g.shape(h)[1..].iter().product();
        let h = g.reshape(h, &[n, flat]);
        let w = g.param(&self.store, self.dense.w, train);
        let b = g.param(&self.store, self.dense.b, train);
        g.linear(h, w, b)
    }
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
}

fn seed_tensor<T: Scalar>(shape: &[usize], g: &[f64]) -> Tensor<T> {
    Tensor::new(shape, g.iter().map(|&v| T::lit(v)).collect())
}

pub fn sample_latent<T: Scalar>(n: usize, dim: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(&[n, dim], |_| T::lit(rng.random::<f64>()))
}

/// Generator loss and parameter gradients for fixed latents and conditions
/// (the discriminator is frozen, dropout off).
pub fn generator_loss_and_grads<T: Scalar>(
    gen: &Generator<T>,
    disc: &Discriminator<T>,
    z: Tensor<T>,
    conds: &[ConditionVector],
) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let gs = &gen.spec;
    let mut g = Graph::new();
    let cg = condition_planes(conds, gs.n_depths, gs.base_hw)?;
    let cd = condition_planes(conds, gs.n_depths, disc.spec.image_hw)?;
    let img = gen.forward(&mut g, z, cg, true);
    let logits = disc.forward(&mut g, img, cd, false, None);
    let (loss, grad) = nll_real(&to_f64(g.value(logits)));
    let grads = g.backward(logits, seed_tensor(g.shape(logits), &grad)).for_store(&gen.store);
    Ok((loss, grads))
}

/// Generator, discriminator and the training ranges they were fitted on.
#[derive(Clone, Debug)]
pub struct Gan {
    pub spec: GanSpec,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    /// Porosity range seen in training, per depth.
    pub trained_ranges: Vec<(f64, f64)>,
    /// Opaque run identifier (the pipeline's config hash) stored in checkpoints.
    pub tag: String,
    trained: bool,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub images: Vec<RgbImage>,
    /// The requested porosity lies outside the depth's training range.
    pub out_of_range: bool,
}

impl Gan {
    pub fn new(spec: GanSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = Generator::new(spec.generator.clone(), &mut rng);
        let discriminator = Discriminator::new(spec.discriminator.clone(), &mut rng);
        let trained_ranges = vec![(0.0, 1.0); spec.generator.n_depths];
        Ok(Self { spec, generator, discriminator, trained_ranges, tag: String::new(), trained: false })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn parameter_count(&self) -> usize {
        self.generator.store.num_scalars() + self.discriminator.store.num_scalars()
    }

    /// Dense-projected noise concatenated with replicated conditions,
    /// `[1, dense + n_depths + 1, base, base]`.
    pub fn assemble_generator_input(&self, z: &[f64], c: &ConditionVector) -> Result<Tensor<f32>> {
        let s = &self.spec.generator;
        if z.len() != s.latent_dim {
            return Err(Error::Validation(format!("latent vector has {} entries, expected {}", z.len(), s.latent_dim)));
        }
        let zt = Tensor::new(&[1, s.latent_dim], z.iter().map(|&v| v as f32).collect());
        let cond = condition_planes(std::slice::from_ref(c), s.n_depths, s.base_hw)?;
        let mut g = Graph::new();
        let v = self.generator.base(&mut g, zt, cond, false, &mut Vec::new());
        Ok(g.value(v).clone())
    }

    /// Network-domain batch `[n, 3, H, W]` for the given latents and conditions.
    pub fn generate_tensor(&self, z: Tensor<f32>, conds: &[ConditionVector]) -> Result<Tensor<f32>> {
        let s = &self.spec.generator;
        let cond = condition_planes(conds, s.n_depths, s.base_hw)?;
        let mut g = Graph::new();
        let v = self.generator.forward(&mut g, z, cond, false);
        Ok(g.value(v).clone())
    }

    /// `n` images at porosity `phi` and depth `depth`, reproducible per seed.
    pub fn generate(&self, phi: f64, depth: DepthLabel, n: usize, seed: u64) -> Result<Generated> {
        if !self.trained {
            return Err(Error::State("generator has not been trained or loaded".into()));
        }
        let c = ConditionVector::new(phi, depth)?;
        let (lo, hi) = *self
            .trained_ranges
            .get(depth.index)
            .ok_or_else(|| Error::Validation(format!("depth {} not in model", depth.index)))?;
        let out_of_range = phi < lo - 1e-9 || phi > hi + 1e-9;
        if out_of_range {
            log::warn!("porosity {phi} outside trained range [{lo}, {hi}] for depth {}", depth.index);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::with_capacity(n);
        // small chunks bound memory at full scale
        let mut left = n;
        while left > 0 {
            let k = left.min(8);
            let z = sample_latent(k, self.spec.generator.latent_dim, &mut rng);
            let batch = self.generate_tensor(z, &vec![c; k])?;
            for i in 0..k {
                let t = Tensor::new(&batch.shape()[1..], batch.sample(i).to_vec());
                images.push(from_network_domain(&t)?);
            }
            left -= k;
        }
        Ok(Generated { images, out_of_range })
    }

    fn header(&self, extra: serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "kind": "gan",
            "spec": self.spec,
            "trained_ranges": self.trained_ranges,
            "tag": self.tag,
            "extra": extra,
        })
    }

    /// Generator-only checkpoint, enough for generation.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut gb = Vec::new();
        self.generator.store.write_blob(&mut gb);
        let mut db = Vec::new();
        self.discriminator.store.write_blob(&mut db);
        checkpoint::write(path, &self.header(serde_json::Value::Null), &[gb, db])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, blobs) = checkpoint::read(path)?;
        let mut gan = Self::from_header(&header, path)?;
        gan.read_params(&blobs, path)?;
        gan.trained = true;
        Ok(gan)
    }

    fn from_header(header: &serde_json::Value, path: &Path) -> Result<Self> {
        if header["kind"] != "gan" {
            return Err(Error::Checkpoint(format!("{} is not a GAN checkpoint", path.display())));
        }
        let spec: GanSpec = serde_json::from_value(header["spec"].clone())?;
        let mut gan = Self::new(spec, 0)?;
        gan.trained_ranges = serde_json::from_value(header["trained_ranges"].clone())?;
        gan.tag = header["tag"].as_str().unwrap_or_default().to_string();
        Ok(gan)
    }

    fn read_params(&mut self, blobs: &[Vec<u8>], path: &Path) -> Result<()> {
        if blobs.len() < 2 {
            return Err(Error::Checkpoint(format!("{}: missing parameter blobs", path.display())));
        }
        for (store_len, used) in [
            (blobs[0].len(), self.generator.store.read_blob(&blobs[0])?),
            (blobs[1].len(), self.discriminator.store.read_blob(&blobs[1])?),
        ] {
            if store_len != used {
                return Err(Error::Checkpoint(format!("{}: parameter blob does not match spec", path.display())));
            }
        }
        Ok(())
    }
}

/// Optimizer state carried between steps.
pub struct TrainState {
    pub adam_g: Adam<f32>,
    pub adam_d: Adam<f32>,
    pub step: usize,
}

impl TrainState {
    pub fn new(gan: &Gan, config: &GanTrainConfig) -> Self {
        Self {
            adam_g: Adam::new(&gan.generator.store, config.beta1, config.beta2),
            adam_d: Adam::new(&gan.discriminator.store, config.beta1, config.beta2),
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub loss_d: f64,
    pub loss_g: f64,
    pub real_seen: usize,
    pub fake_seen: usize,
    pub generator_samples: usize,
}

/// One discriminator update on `real` (m/2 records) plus as many fakes with
/// matching conditions, then one generator update on m fresh samples whose
/// conditions are drawn from `condition_pool`.
pub fn train_step(
    gan: &mut Gan,
    state: &mut TrainState,
    real: &[&PatchRecord],
    condition_pool: &[ConditionVector],
    config: &GanTrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    let half = config.batch_size / 2;
    if real.len() != half || condition_pool.is_empty() {
        return Err(Error::Validation(format!(
            "train_step needs {half} real records and a condition pool, got {}",
            real.len()
        )));
    }
    let gs = gan.spec.generator.clone();
    let hw = gan.spec.discriminator.image_hw;
    let real_conds: Vec<ConditionVector> = real
        .iter()
        .map(|r| ConditionVector::new(r.porosity, r.depth))
        .collect::<Result<_>>()?;
    for r in real {
        if r.image.width() != hw || r.image.height() != hw {
            return Err(Error::Dimension(format!("training patch is {}x{}, model expects {hw}", r.image.width(), r.image.height())));
        }
    }
    state.step += 1;
    let step = state.step;
    let diverged = |what: &str, v: f64| Error::Divergence {
        stage: "gan-train",
        index: step,
        detail: format!("{what} = {v}"),
        last_checkpoint: None,
    };

    // discriminator update
    let z = sample_latent(half, gs.latent_dim, rng);
    let fake = {
        let mut g = Graph::new();
        let cg = condition_planes(&real_conds, gs.n_depths, gs.base_hw)?;
        let v = gan.generator.forward(&mut g, z, cg, true);
        g.value(v).clone()
    };
    let real_t = Tensor::stack(&real.iter().map(|r| to_network_domain(&r.image)).collect::<Vec<_>>(), false);
    let images = Tensor::stack(&[real_t, fake], true);
    let mut conds = real_conds.clone();
    conds.extend_from_slice(&real_conds);
    let cond_d = condition_planes(&conds, gs.n_depths, hw)?;
    let (loss_d, grads_d) = {
        let mut g = Graph::new();
        let x = g.input(images);
        let logits = gan.discriminator.forward(&mut g, x, cond_d, true, Some(rng));
        let l = to_f64(g.value(logits));
        let (lr_, gr) = nll_real(&l[..half]);
        let (lf, gf) = nll_fake(&l[half..]);
        let seed: Vec<f64> = gr.into_iter().chain(gf).collect();
        let grads = g.backward(logits, seed_tensor(g.shape(logits), &seed)).for_store(&gan.discriminator.store);
        (lr_ + lf, grads)
    };
    if !loss_d.is_finite() {
        return Err(diverged("L_D", loss_d));
    }
    state.adam_d.step(&mut gan.discriminator.store, &grads_d, lr);

    // generator update
    let m = config.batch_size;
    let gen_conds: Vec<ConditionVector> = (0..m).map(|_| condition_pool[rng.random_range(0..condition_pool.len())]).collect();
    let z = sample_latent(m, gs.latent_dim, rng);
    let (loss_g, grads_g, stats) = {
        let mut g = Graph::new();
        let cg = condition_planes(&gen_conds, gs.n_depths, gs.base_hw)?;
        let cd = condition_planes(&gen_conds, gs.n_depths, hw)?;
        let (img, bn) = gan.generator.forward_with_norms(&mut g, z, cg, true);
        let logits = gan.discriminator.forward(&mut g, img, cd, false, Some(rng));
        let (l, grad) = nll_real(&to_f64(g.value(logits)));
        let grads = g.backward(logits, seed_tensor(g.shape(logits), &grad)).for_store(&gan.generator.store);
        (l, grads, norm_stats(&g, &bn))
    };
    if !loss_g.is_finite() {
        return Err(diverged("L_G", loss_g));
    }
    state.adam_g.step(&mut gan.generator.store, &grads_g, lr);
    gan.generator.update_running_stats(&stats);
    Ok(StepLosses { loss_d, loss_g, real_seen: half, fake_seen: half, generator_samples: m })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub loss_g: f64,
    pub loss_d: f64,
    pub lr: f64,
    /// Per depth: the fixed probe target and the mean measured porosity there.
    pub probe_target: Vec<f64>,
    pub probe_porosity: Vec<f64>,
    /// Porosity-control R² over the epoch's probe grid.
    pub probe_r2: f64,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_r2: f64,
}

impl TrainingLog {
    pub fn write_csv(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        let n_depths = self.epochs.first().map_or(0, |e| e.probe_target.len());
        let mut head: Vec<String> = ["epoch", "loss_g", "loss_d", "lr", "probe_r2", "wall_clock_s"].map(String::from).to_vec();
        for d in 0..n_depths {
            head.push(format!("probe_target_d{d}"));
            head.push(format!("probe_porosity_d{d}"));
        }
        w.write_record(&head)?;
        for e in &self.epochs {
            let mut row = vec![
                e.epoch.to_string(),
                e.loss_g.to_string(),
                e.loss_d.to_string(),
                e.lr.to_string(),
                e.probe_r2.to_string(),
                format!("{:.3}", e.wall_clock_s),
            ];
            for (t, p) in e.probe_target.iter().zip(&e.probe_porosity) {
                row.push(t.to_string());
                row.push(p.to_string());
            }
            w.write_record(&row)?;
        }
        let mut bytes = comment.map(|c| format!("# {c}\n").into_bytes()).unwrap_or_default();
        bytes.extend(w.into_inner().map_err(|e| Error::Validation(e.to_string()))?);
        crate::dataprep::write_atomic(path, &bytes)
    }
}

/// Porosity of each generated image as seen by `seg`.
pub fn measure_porosity(seg: &dyn MaskPredictor, images: &[RgbImage]) -> Result<Vec<f64>> {
    images.iter().map(|img| porosity_of_mask(&seg.predict_mask(img)?)).collect()
}

struct Probe {
    grid: Vec<ConditionVector>,
    mid: Vec<f64>,
}

fn probe_plan(ranges: &[(f64, f64)], config: &GanTrainConfig) -> Result<Probe> {
    let grid = probe_grid(ranges, config.probe_targets * ranges.len())?;
    let mid = ranges.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
    Ok(Probe { grid, mid })
}

fn run_probes(gan: &Gan, seg: &dyn MaskPredictor, probe: &Probe, config: &GanTrainConfig) -> Result<(f64, Vec<f64>)> {
    let mut targets = Vec::new();
    let mut observed = Vec::new();
    for (i, c) in probe.grid.iter().enumerate() {
        let imgs = gan.generate(c.porosity, c.depth, config.probe_samples, config.seed ^ (0x9e37 + i as u64))?.images;
        for p in measure_porosity(seg, &imgs)? {
            targets.push(c.porosity);
            observed.push(p);
        }
    }
    let r2 = r_squared(&targets, &observed).unwrap_or(f64::NEG_INFINITY);
    let n_depths = probe.mid.len();
    let mut at_mid = Vec::with_capacity(n_depths);
    for (d, &phi) in probe.mid.iter().enumerate() {
        let imgs = gan
            .generate(phi, DepthLabel::new(d, n_depths)?, config.probe_samples * 2, config.seed ^ 0x51ed ^ d as u64)?
            .images;
        let p = measure_porosity(seg, &imgs)?;
        at_mid.push(p.iter().sum::<f64>() / p.len() as f64);
    }
    Ok((r2, at_mid))
}

/// Per-depth min/max labelled porosity.
pub fn porosity_ranges(records: &[PatchRecord], n_depths: usize) -> Result<Vec<(f64, f64)>> {
    let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); n_depths];
    for r in records {
        let e = out
            .get_mut(r.depth.index)
            .ok_or_else(|| Error::Validation(format!("record depth {} >= {n_depths}", r.depth.index)))?;
        e.0 = e.0.min(r.porosity);
        e.1 = e.1.max(r.porosity);
    }
    if let Some(d) = out.iter().position(|e| !e.0.is_finite()) {
        return Err(Error::Validation(format!("no training records for depth {d}")));
    }
    Ok(out)
}

pub struct TrainOutcome {
    /// Generator with the best probe R² (the final one when probes never improve).
    pub best: Gan,
    pub last: Gan,
    pub log: TrainingLog,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(epoch as u64 + 1);
    r.next_u64()
}

const LATEST: &str = "gan_latest.ckpt";
pub const BEST: &str = "gan_best.ckpt";

fn save_training(path: &Path, gan: &Gan, best: &Gan, state: &TrainState, log: &TrainingLog, config: &GanTrainConfig) -> Result<()> {
    let mut blobs = vec![Vec::new(); 5];
    gan.generator.store.write_blob(&mut blobs[0]);
    gan.discriminator.store.write_blob(&mut blobs[1]);
    state.adam_g.write_blob(&mut blobs[2]);
    state.adam_d.write_blob(&mut blobs[3]);
    best.generator.store.write_blob(&mut blobs[4]);
    let extra = serde_json::json!({ "config": config, "log": log, "step": state.step });
    checkpoint::write(path, &gan.header(extra), &blobs)
}

fn load_training(path: &Path, config: &GanTrainConfig) -> Result<(Gan, Gan, TrainState, TrainingLog)> {
    let (header, blobs) = checkpoint::read(path)?;
    let mut gan = Gan::from_header(&header, path)?;
    if blobs.len() != 5 {
        return Err(Error::Checkpoint(format!("{} is not a resumable training checkpoint", path.display())));
    }
    gan.read_params(&blobs, path)?;
    let mut state = TrainState::new(&gan, config);
    state.adam_g.read_blob(&blobs[2])?;
    state.adam_d.read_blob(&blobs[3])?;
    state.step = serde_json::from_value(header["extra"]["step"].clone())?;
    let log: TrainingLog = serde_json::from_value(header["extra"]["log"].clone())?;
    let mut best = gan.clone();
    best.generator.store.read_blob(&blobs[4])?;
    gan.trained = true;
    best.trained = true;
    Ok((gan, best, state, log))
}

/// Trains over all depths jointly. With `checkpoint_dir`, writes a resumable
/// checkpoint every `checkpoint_every` epochs plus the best-R² generator, and
/// resumes from the latest one when present.
pub fn train(
    records: &[PatchRecord],
    spec: GanSpec,
    config: &GanTrainConfig,
    monitor: &dyn MaskPredictor,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    spec.validate()?;
    let n_depths = spec.generator.n_depths;
    if records.len() < config.batch_size / 2 {
        return Err(Error::Config(vec![format!(
            "{} training records cannot fill half a batch of {}",
            records.len(),
            config.batch_size
        )]));
    }
    let ranges = porosity_ranges(records, n_depths)?;
    let pool: Vec<ConditionVector> = records
        .iter()
        .map(|r| ConditionVector::new(r.porosity, r.depth))
        .collect::<Result<_>>()?;
    let probe = probe_plan(&ranges, config)?;

    let latest = checkpoint_dir.map(|d| d.join(LATEST));
    let (mut gan, mut best, mut state, mut log) = match latest.as_deref().filter(|p| p.exists()) {
        Some(p) => {
            log::info!("resuming from {}", p.display());
            let (g, b, s, l) = load_training(p, config)?;
            if g.spec != spec {
                return Err(Error::Checkpoint(format!("{} was trained with a different spec", p.display())));
            }
            (g, b, s, l)
        }
        None => {
            let mut g = Gan::new(spec, config.seed)?;
            g.trained_ranges = ranges.clone();
            g.trained = true;
            let s = TrainState::new(&g, config);
            (g.clone(), g, s, TrainingLog { best_r2: f64::NEG_INFINITY, ..Default::default() })
        }
    };
    gan.trained_ranges = ranges.clone();
    best.trained_ranges = ranges;
    gan.tag = config.tag.clone();
    best.tag = config.tag.clone();
    let mut last_ckpt: Option<PathBuf> = latest.clone().filter(|p| p.exists());
    let half = config.batch_size / 2;
    let start = Instant::now();

    for epoch in log.epochs.len()..config.epochs {
        let lr = lr_schedule(epoch, config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(config.seed, epoch));
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum_d, mut sum_g, mut steps) = (0.0, 0.0, 0);
        for chunk in order.chunks_exact(half) {
            let real: Vec<&PatchRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let l = train_step(&mut gan, &mut state, &real, &pool, config, lr, &mut rng).map_err(|e| match e {
                Error::Divergence { stage, index, detail, .. } => {
                    Error::Divergence { stage, index, detail, last_checkpoint: last_ckpt.clone() }
                }
                other => other,
            })?;
            sum_d += l.loss_d;
            sum_g += l.loss_g;
            steps += 1;
        }
        let (r2, at_mid) = run_probes(&gan, monitor, &probe, config)?;
        let e = EpochLog {
            epoch: epoch + 1,
            loss_g: sum_g / steps as f64,
            loss_d: sum_d / steps as f64,
            lr,
            probe_target: probe.mid.clone(),
            probe_porosity: at_mid,
            probe_r2: r2,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {}: L_G {:.4} L_D {:.4} probe R2 {:.3} porosity@mid {:?}",
            e.epoch,
            e.loss_g,
            e.loss_d,
            r2,
            e.probe_porosity
        );
        log.epochs.push(e);
        if r2 > log.best_r2 || log.best_epoch == 0 {
            log.best_r2 = r2;
            log.best_epoch = epoch + 1;
            best = gan.clone();
            if let Some(dir) = checkpoint_dir {
                best.save(&dir.join(BEST))?;
            }
        }
        if let Some(dir) = checkpoint_dir {
            if (epoch + 1) % config.checkpoint_every == 0 || epoch + 1 == config.epochs {
                let p = dir.join(format!("gan_epoch{:04}.ckpt", epoch + 1));
                save_training(&p, &gan, &best, &state, &log, config)?;
                std::fs::copy(&p, dir.join(LATEST)).map_err(|e| Error::io(&p, e))?;
                last_ckpt = Some(p);
            }
        }
    }
    Ok(TrainOutcome { best, last: gan, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::ColorThreshold;

    #[test]
    fn channel_counts() {
        assert_eq!(GanSpec::preset(Arch::Original, 4, false).generator.input_channels(), 517);
        assert_eq!(GanSpec::preset(Arch::ModelA, 4, false).generator.input_channels(), 389);
        assert_eq!(GanSpec::preset(Arch::ModelB, 4, false).generator.input_channels(), 261);
        for arch in Arch::ALL {
            for toy in [false, true] {
                let s = GanSpec::preset(arch, 4, toy);
                s.validate().unwrap();
                assert_eq!(s.discriminator.input_channels(), 8);
                assert_eq!(s.generator.output_hw(), if toy { 96 } else { 480 });
            }
        }
    }

    #[test]
    fn analytic_count_matches_instantiated_toy() {
        for arch in Arch::ALL {
            let spec = GanSpec::preset(arch, 2, true);
            let gan = Gan::new(spec.clone(), 1).unwrap();
            assert_eq!(gan.parameter_count(), parameter_count(&spec));
        }
    }

    #[test]
    fn full_scale_counts_in_band() {
        for (arch, target) in [(Arch::Original, 50e6), (Arch::ModelA, 38e6), (Arch::ModelB, 25e6)] {
            let n = parameter_count(&GanSpec::preset(arch, 4, false)) as f64;
            assert!((n / target - 1.0).abs() <= 0.2, "{arch:?}: {n}");
        }
    }

    #[test]
    fn loss_examples() {
        let ln2 = 2f64.ln();
        assert!(discriminator_loss(&[1.0 - 1e-7; 4], &[1e-7; 4]).unwrap() <= 1e-5);
        assert!((discriminator_loss(&[0.5; 4], &[0.5; 4]).unwrap() - 2.0 * ln2).abs() < 1e-12);
        assert!(discriminator_loss(&[1e-7; 4], &[0.5; 4]).unwrap() >= 15.0);
        assert!(generator_loss(&[1.0 - 1e-7; 3]).unwrap() < 1e-6);
        assert!((generator_loss(&[0.5; 3]).unwrap() - ln2).abs() < 1e-12);
        assert!((generator_loss(&[(-1f64).exp(); 3]).unwrap() - 1.0).abs() < 1e-12);
        assert!(generator_loss(&[]).is_err());
        assert!(discriminator_loss(&[], &[0.5]).is_err());
    }

    #[test]
    fn logit_losses_match_score_losses() {
        for l in [-3.0, -0.5, 0.0, 0.7, 4.0] {
            let s = sigmoid(l);
            assert!((nll_real(&[l]).0 - generator_loss(&[s]).unwrap()).abs() < 1e-9);
            assert!((nll_real(&[l]).0 + nll_fake(&[l]).0 - discriminator_loss(&[s], &[s]).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn schedule_examples() {
        let c = GanTrainConfig::default();
        assert_eq!(lr_schedule(0, &c).unwrap(), 2.0e-4);
        assert!((lr_schedule(200, &c).unwrap() - 2.0e-6).abs() < 1e-18);
        assert!((lr_schedule(100, &c).unwrap() - 1.01e-4).abs() < 1e-15);
        assert!(lr_schedule(201, &c).is_err());
        for e in 0..200 {
            assert!(lr_schedule(e + 1, &c).unwrap() < lr_schedule(e, &c).unwrap());
        }
    }

    #[test]
    fn config_rejects_odd_batch() {
        let c = GanTrainConfig { batch_size: 15, ..Default::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn assembled_inputs_round_trip() {
        let gan = Gan::new(GanSpec::preset(Arch::ModelB, 4, true), 3).unwrap();
        let c = ConditionVector::new(0.137, DepthLabel::new(2, 4).unwrap()).unwrap();
        let z = vec![0.5; LATENT_DIM];
        let x = gan.assemble_generator_input(&z, &c).unwrap();
        assert_eq!(x.shape(), &[1, 64 + 5, 6, 6]);
        let back = read_conditions(&x, 4).unwrap();
        assert_eq!(back.depth, c.depth);
        assert_eq!(back.porosity, 0.137f32 as f64);
        assert!(gan.assemble_generator_input(&z[..99], &c).is_err());

        let img = RgbImage::filled(96, 96, [10, 200, 30]);
        let d = assemble_discriminator_input(&img, &c, &gan.spec.discriminator).unwrap();
        assert_eq!(d.shape(), &[1, 8, 96, 96]);
        assert_eq!(read_conditions(&d, 4).unwrap().depth, c.depth);
        assert!(assemble_discriminator_input(&RgbImage::filled(90, 96, [0, 0, 0]), &c, &gan.spec.discriminator).is_err());
    }

    fn toy_records(n: usize) -> Vec<PatchRecord> {
        (0..n)
            .map(|i| {
                let phi = 0.1 + 0.02 * (i % 10) as f64;
                let mut img = RgbImage::filled(96, 96, [200, 190, 160]);
                for k in 0..(phi * 96.0) as usize {
                    for y in 0..96 {
                        img.set_pixel(k, y, crate::dataprep::EPOXY_RGB);
                    }
                }
                PatchRecord {
                    image: img,
                    porosity: phi,
                    depth: DepthLabel::new(i % 2, 2).unwrap(),
                    porosity_class: None,
                    augmented: false,
                    source_id: format!("t{i}"),
                }
            })
            .collect()
    }

    #[test]
    fn step_is_deterministic_and_sized() {
        let recs = toy_records(8);
        let refs: Vec<&PatchRecord> = recs.iter().collect();
        let pool: Vec<ConditionVector> = recs.iter().map(|r| ConditionVector::new(r.porosity, r.depth).unwrap()).collect();
        let cfg = GanTrainConfig::toy();
        let run = || {
            let mut gan = Gan::new(GanSpec::preset(Arch::ModelB, 2, true), 5).unwrap();
            let mut st = TrainState::new(&gan, &cfg);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            train_step(&mut gan, &mut st, &refs, &pool, &cfg, 2e-4, &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.loss_d.to_bits(), b.loss_d.to_bits());
        assert_eq!(a.loss_g.to_bits(), b.loss_g.to_bits());
        assert_eq!((a.real_seen, a.fake_seen, a.generator_samples), (8, 8, 16));
    }

    #[test]
    fn generate_contract() {
        let mut gan = Gan::new(GanSpec::preset(Arch::ModelB, 2, true), 1).unwrap();
        let d = DepthLabel::new(0, 2).unwrap();
        assert!(matches!(gan.generate(0.2, d, 1, 0), Err(Error::State(_))));
        gan.trained = true;
        gan.trained_ranges = vec![(0.1, 0.3); 2];
        let a = gan.generate(0.2, d, 3, 7).unwrap();
        assert_eq!(a.images.len(), 3);
        assert!(!a.out_of_range);
        assert_eq!(a.images[0].width(), 96);
        assert_eq!(a.images, gan.generate(0.2, d, 3, 7).unwrap().images);
        assert!(gan.generate(0.5, d, 1, 7).unwrap().out_of_range);
    }

    #[test]
    fn short_training_resumes_identically() {
        let recs = toy_records(16);
        let cfg = GanTrainConfig { epochs: 3, checkpoint_every: 1, probe_targets: 2, probe_samples: 1, ..GanTrainConfig::toy() };
        let spec = GanSpec::preset(Arch::ModelB, 2, true);
        let seg = ColorThreshold::default();
        let full = train(&recs, spec.clone(), &cfg, &seg, None).unwrap();
        assert_eq!(full.log.epochs.len(), 3);
        assert!(full.log.epochs.iter().all(|e| e.loss_d.is_finite() && e.loss_g.is_finite()));

        let dir = tempfile::tempdir().unwrap();
        let two = GanTrainConfig { epochs: 3, ..cfg.clone() };
        // stop after two epochs by training a 2-epoch prefix with the same schedule
        let partial = train_prefix(&recs, spec.clone(), &two, &seg, dir.path(), 2);
        assert_eq!(partial, 2);
        let resumed = train(&recs, spec, &two, &seg, Some(dir.path())).unwrap();
        let a: Vec<(u64, u64)> = full.log.epochs.iter().map(|e| (e.loss_g.to_bits(), e.loss_d.to_bits())).collect();
        let b: Vec<(u64, u64)> = resumed.log.epochs.iter().map(|e| (e.loss_g.to_bits(), e.loss_d.to_bits())).collect();
        assert_eq!(a, b);
        assert!(Gan::load(&dir.path().join(BEST)).unwrap().is_trained());
    }

    /// Runs `train` with checkpoints, then deletes the checkpoints after
    /// `stop` epochs so the next call resumes from there.
    fn train_prefix(recs: &[PatchRecord], spec: GanSpec, cfg: &GanTrainConfig, seg: &dyn MaskPredictor, dir: &Path, stop: usize) -> usize {
        train(recs, spec, cfg, seg, Some(dir)).unwrap();
        let keep = dir.join(format!("gan_epoch{stop:04}.ckpt"));
        std::fs::copy(&keep, dir.join(LATEST)).unwrap();
        let (_, _, _, log) = load_training(&dir.join(LATEST), cfg).unwrap();
        log.epochs.len()
    }
}
