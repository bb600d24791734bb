//! Image, mask and conditioning types shared by every stage.

use std::path::Path;

use poregan_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default physical resolution when none is configured.
pub const DEFAULT_PIXEL_SIZE_UM: f64 = 1.0;

/// 8-bit RGB image in storage domain, interleaved row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
    /// Micrometres per pixel.
    pub pixel_size: f64,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension("image must be non-empty".into()));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "{}x{} RGB image needs {} bytes, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
            pixel_size: DEFAULT_PIXEL_SIZE_UM,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, data).expect("non-empty fill")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Axis-aligned window; fails when it does not fit.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Dimension(format!(
                "window {w}x{h}@({x0},{y0}) outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[row..row + w * 3]);
        }
        Ok(Self {
            width: w,
            height: h,
            data,
            pixel_size: self.pixel_size,
        })
    }

    pub fn transform(&self, t: Geometric) -> Self {
        let (data, w, h) = permute(&self.data, self.width, self.height, 3, t);
        Self {
            width: w,
            height: h,
            data,
            pixel_size: self.pixel_size,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer size checked at construction");
        ensure_parent(path)?;
        buf.save(path)?;
        Ok(())
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

/// Pore (1) / solid (0) mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{width}x{height} mask needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Validation(format!("mask value {v} not in {{0,1}}")));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn is_pore(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, pore: bool) {
        self.data[y * self.width + x] = pore as u8;
    }

    pub fn pore_count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Dimension(format!(
                "window {w}x{h}@({x0},{y0}) outside {}x{} mask",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(Self { width: w, height: h, data })
    }

    pub fn transform(&self, t: Geometric) -> Self {
        let (data, width, height) = permute(&self.data, self.width, self.height, 1, t);
        Self { width, height, data }
    }

    /// Reads a single-channel image; any non-zero value is pore.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| (v > 127) as u8).collect();
        Self::new(w as usize, h as usize, data)
    }

    /// Writes {0,1} as {0,255}.
    pub fn save(&self, path: &Path) -> Result<()> {
        let raw = self.data.iter().map(|&v| v * 255).collect();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer size checked at construction");
        ensure_parent(path)?;
        buf.save(path)?;
        Ok(())
    }
}

/// Exact pixel permutations used for augmentation and invariance checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometric {
    HFlip,
    VFlip,
    /// Counter-clockwise quarter turn.
    Rot90,
    Rot180,
    Rot270,
}

impl Geometric {
    pub const ALL: [Geometric; 5] = [
        Geometric::HFlip,
        Geometric::VFlip,
        Geometric::Rot90,
        Geometric::Rot180,
        Geometric::Rot270,
    ];
}

fn permute<T: Copy>(src: &[T], w: usize, h: usize, ch: usize, t: Geometric) -> (Vec<T>, usize, usize) {
    let (ow, oh) = match t {
        Geometric::Rot90 | Geometric::Rot270 => (h, w),
        _ => (w, h),
    };
    let mut out = Vec::with_capacity(src.len());
    for oy in 0..oh {
        for ox in 0..ow {
            let (sx, sy) = match t {
                Geometric::HFlip => (w - 1 - ox, oy),
                Geometric::VFlip => (ox, h - 1 - oy),
                Geometric::Rot180 => (w - 1 - ox, h - 1 - oy),
                Geometric::Rot90 => (w - 1 - oy, ox),
                Geometric::Rot270 => (oy, h - 1 - ox),
            };
            let i = (sy * w + sx) * ch;
            out.extend_from_slice(&src[i..i + ch]);
        }
    }
    (out, ow, oh)
}

/// Fraction of pore pixels.
pub fn porosity_of_mask(mask: &BinaryMask) -> Result<f64> {
    if mask.data.is_empty() {
        return Err(Error::Dimension("porosity of an empty mask".into()));
    }
    Ok(mask.pore_count() as f64 / mask.data.len() as f64)
}

/// Categorical depth index in `[0, n_depths)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DepthLabel {
    pub index: usize,
    pub n_depths: usize,
}

impl DepthLabel {
    pub fn new(index: usize, n_depths: usize) -> Result<Self> {
        if index >= n_depths {
            return Err(Error::Validation(format!(
                "depth index {index} out of range for {n_depths} depths"
            )));
        }
        Ok(Self { index, n_depths })
    }
}

/// One-hot encoding of a depth label.
pub fn one_hot_depth(label: DepthLabel) -> Result<Vec<u8>> {
    if label.index >= label.n_depths {
        return Err(Error::Validation(format!(
            "depth index {} out of range for {} depths",
            label.index, label.n_depths
        )));
    }
    let mut v = vec![0; label.n_depths];
    v[label.index] = 1;
    Ok(v)
}

/// Inverse of [`one_hot_depth`]; rejects vectors that are not one-hot.
pub fn depth_from_one_hot(v: &[u8]) -> Result<DepthLabel> {
    let ones: Vec<usize> = v.iter().enumerate().filter(|(_, &b)| b == 1).map(|(i, _)| i).collect();
    if ones.len() != 1 || v.iter().any(|&b| b > 1) {
        return Err(Error::Validation(format!("{v:?} is not one-hot")));
    }
    DepthLabel::new(ones[0], v.len())
}

/// Conditioning pair fed to both networks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionVector {
    pub porosity: f64,
    pub depth: DepthLabel,
}

impl ConditionVector {
    pub fn new(porosity: f64, depth: DepthLabel) -> Result<Self> {
        if !(0.0..=1.0).contains(&porosity) {
            return Err(Error::Validation(format!("porosity {porosity} outside [0,1]")));
        }
        DepthLabel::new(depth.index, depth.n_depths)?;
        Ok(Self { porosity, depth })
    }

    pub fn depth_one_hot(&self) -> Vec<u8> {
        one_hot_depth(self.depth).expect("validated at construction")
    }
}

/// One training patch and its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub image: RgbImage,
    pub porosity: f64,
    pub depth: DepthLabel,
    /// `None` when the patch falls in an excluded class cell.
    pub porosity_class: Option<usize>,
    pub augmented: bool,
    pub source_id: String,
}

/// Anything that turns an RGB image into a pore/solid mask of the same size.
pub trait MaskPredictor {
    fn predict_mask(&self, image: &RgbImage) -> Result<BinaryMask>;
}

/// Classical blue-epoxy rule: a pixel is pore when its blue channel exceeds
/// both red and green by more than `margin`.
#[derive(Clone, Copy, Debug)]
pub struct ColorThreshold {
    pub margin: i32,
}

impl Default for ColorThreshold {
    fn default() -> Self {
        Self { margin: 50 }
    }
}

impl MaskPredictor for ColorThreshold {
    fn predict_mask(&self, image: &RgbImage) -> Result<BinaryMask> {
        let data = image
            .data()
            .chunks_exact(3)
            .map(|p| {
                let (r, g, b) = (p[0] as i32, p[1] as i32, p[2] as i32);
                (b - r.max(g) > self.margin) as u8
            })
            .collect();
        BinaryMask::new(image.width(), image.height(), data)
    }
}

/// Storage value in `[0,255]` to network value in `[-1,1]`.
pub fn storage_to_network(v: f64) -> Result<f64> {
    if !(0.0..=255.0).contains(&v) {
        return Err(Error::Validation(format!("storage value {v} outside [0,255]")));
    }
    Ok(v / 127.5 - 1.0)
}

/// Network value in `[-1,1]` to storage value, clipped to `[0,255]`.
pub fn network_to_storage(v: f64) -> Result<f64> {
    if !(-1.0 - 1e-6..=1.0 + 1e-6).contains(&v) || v.is_nan() {
        return Err(Error::Validation(format!("network value {v} outside [-1,1]")));
    }
    Ok(((v + 1.0) * 127.5).clamp(0.0, 255.0))
}

/// Image as a `[3, h, w]` tensor in network domain.
pub fn to_network_domain(image: &RgbImage) -> Tensor<f32> {
    let (w, h) = (image.width, image.height);
    let mut out = vec![0f32; 3 * w * h];
    for (p, px) in image.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * w * h + p] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::new(&[3, h, w], out)
}

/// Inverse of [`to_network_domain`], rounding to the nearest storage level.
pub fn from_network_domain(t: &Tensor<f32>) -> Result<RgbImage> {
    let shape = t.shape();
    let (c, h, w) = match *shape {
        [c, h, w] => (c, h, w),
        [1, c, h, w] => (c, h, w),
        _ => return Err(Error::Dimension(format!("expected [3,h,w] tensor, got {shape:?}"))),
    };
    if c != 3 {
        return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
    }
    let d = t.data();
    let mut data = vec![0u8; 3 * w * h];
    for p in 0..w * h {
        for ch in 0..3 {
            data[p * 3 + ch] = network_to_storage(d[ch * w * h + p] as f64)?.round() as u8;
        }
    }
    RgbImage::new(w, h, data)
}
