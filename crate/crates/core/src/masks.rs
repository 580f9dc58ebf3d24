//! Alpha masks for the pasted target face: sigmoid-shaped continuous masks,
//! Gaussian-blurred binary masks and a heuristic automatic face mask.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::raster::{to_grayscale, RasterImage};
use crate::{Error, Result};

/// Per-pixel transparency in `[0, 1]`: 0 keeps the base pixel, 1 takes the overlay pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaMask(RasterImage);

impl AlphaMask {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        RasterImage::new(width, height, 1, values).map(Self)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self(RasterImage::filled(width, height, 1, value))
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        Self(RasterImage::from_fn(width, height, 1, |x, y, _| f(x, y)))
    }

    /// Wraps a single-channel image.
    pub fn from_image(img: RasterImage) -> Result<Self> {
        if img.channels() != 1 {
            return Err(Error::invalid(format!(
                "alpha mask needs one channel, got {}",
                img.channels()
            )));
        }
        Ok(Self(img))
    }

    pub fn as_image(&self) -> &RasterImage {
        &self.0
    }

    pub fn into_image(self) -> RasterImage {
        self.0
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.0.get(x, y, 0)
    }

    pub fn is_binary(&self) -> bool {
        self.values().iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Pointwise product with another mask of the same size.
    pub fn multiply(&self, other: &AlphaMask) -> Result<AlphaMask> {
        if (self.width(), self.height()) != (other.width(), other.height()) {
            return Err(Error::invalid("mask dimension mismatch"));
        }
        let values = self.values().iter().zip(other.values()).map(|(a, b)| a * b).collect();
        AlphaMask::new(self.width(), self.height(), values)
    }
}

/// Bias and slope of the sigmoid reshaping `sigmoid((m - bias) * slope)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskShapeParams {
    pub bias: f64,
    pub slope: f64,
}

impl MaskShapeParams {
    pub const BIAS_RANGE: (f64, f64) = (0.0, 1.0);
    pub const SLOPE_RANGE: (f64, f64) = (5.0, 40.0);

    pub fn new(bias: f64, slope: f64) -> Result<Self> {
        let p = Self { bias, slope };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (b0, b1) = Self::BIAS_RANGE;
        let (w0, w1) = Self::SLOPE_RANGE;
        if !(b0..=b1).contains(&self.bias) || !(w0..=w1).contains(&self.slope) {
            return Err(Error::invalid(format!(
                "mask shape (b={}, w={}) outside b in [{b0}, {b1}], w in [{w0}, {w1}]",
                self.bias, self.slope
            )));
        }
        Ok(())
    }
}

pub const BLUR_SIGMA_RANGE: (f64, f64) = (0.0, 20.0);

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Reshapes a continuous mask pixel-wise with `sigmoid((m - b) * w)`.
pub fn sigmoid_mask(m: &AlphaMask, params: MaskShapeParams) -> AlphaMask {
    let values = m
        .values()
        .iter()
        .map(|&v| sigmoid((v - params.bias) * params.slope))
        .collect();
    AlphaMask::new(m.width(), m.height(), values).expect("sigmoid output lies in [0, 1]")
}

/// Normalized 1-d Gaussian kernel of radius `ceil(3 sigma)`.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable convolution of a row-major plane with clamp-to-edge boundaries.
pub(crate) fn convolve_clamped(plane: &[f64], width: usize, height: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..width {
            tmp[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * row[clamp(x as i64 + k as i64 - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clamp(y as i64 + k as i64 - r, height) * width + x])
                .sum();
        }
    }
    out
}

/// Softens a binary mask with a Gaussian of standard deviation `sigma` pixels.
pub fn blur_mask(m: &AlphaMask, sigma: f64) -> Result<AlphaMask> {
    let (s0, s1) = BLUR_SIGMA_RANGE;
    if !(s0..=s1).contains(&sigma) {
        return Err(Error::invalid(format!("blur sigma {sigma} outside [{s0}, {s1}]")));
    }
    if !m.is_binary() {
        return Err(Error::invalid("blur_mask expects a binary mask"));
    }
    if sigma == 0.0 {
        return Ok(m.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let out = convolve_clamped(m.values(), m.width(), m.height(), &kernel);
    AlphaMask::new(
        m.width(),
        m.height(),
        out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    )
}

/// Pixel band accepted as "face" by [`auto_mask`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoMaskConfig {
    pub min_luma: f64,
    pub max_luma: f64,
    /// Upper bound on `max(R,G,B) - min(R,G,B)`.
    pub max_chroma: f64,
    /// Lower bound on `R - B`; skin is warm. Ignored for grayscale input.
    pub min_warmth: f64,
    pub closing_radius: usize,
    /// Components smaller than this fraction of the image trigger the ellipse fallback.
    pub min_fraction: f64,
}

impl Default for AutoMaskConfig {
    fn default() -> Self {
        Self {
            min_luma: 0.4,
            max_luma: 1.0,
            max_chroma: 0.6,
            min_warmth: 0.1,
            closing_radius: 2,
            min_fraction: 0.05,
        }
    }
}

/// Heuristic binary face mask: the largest 4-connected blob of in-band pixels,
/// morphologically closed with interior holes filled. Falls back to a centred
/// ellipse spanning 40% of the width and 55% of the height.
pub fn auto_mask(img: &RasterImage) -> AlphaMask {
    auto_mask_with(img, &AutoMaskConfig::default())
}

pub fn auto_mask_with(img: &RasterImage, cfg: &AutoMaskConfig) -> AlphaMask {
    let (w, h) = (img.width(), img.height());
    let luma = to_grayscale(img).expect("RasterImage has 1 or 3 channels");
    let c = img.channels();
    let band: Vec<bool> = (0..w * h)
        .map(|i| {
            let l = luma.data()[i];
            let px = &img.data()[i * c..(i + 1) * c];
            let hi = px.iter().cloned().fold(f64::MIN, f64::max);
            let lo = px.iter().cloned().fold(f64::MAX, f64::min);
            let warm = c == 1 || px[0] - px[2] >= cfg.min_warmth;
            l >= cfg.min_luma && l <= cfg.max_luma && hi - lo <= cfg.max_chroma && warm
        })
        .collect();

    let component = largest_component(&band, w, h);
    let size = component.iter().filter(|&&b| b).count();
    if (size as f64) < cfg.min_fraction * (w * h) as f64 {
        return fallback_ellipse(w, h);
    }
    let closed = erode(&dilate(&component, w, h, cfg.closing_radius), w, h, cfg.closing_radius);
    let filled = fill_holes(&closed, w, h);
    AlphaMask::from_fn(w, h, |x, y| if filled[y * w + x] { 1.0 } else { 0.0 })
}

fn fallback_ellipse(w: usize, h: usize) -> AlphaMask {
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (ax, ay) = (0.2 * w as f64, 0.275 * h as f64);
    AlphaMask::from_fn(w, h, |x, y| {
        let dx = (x as f64 + 0.5 - cx) / ax;
        let dy = (y as f64 + 0.5 - cy) / ay;
        if dx * dx + dy * dy <= 1.0 {
            1.0
        } else {
            0.0
        }
    })
}

fn neighbours(i: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (i % w, i / w);
    let mut n = [usize::MAX; 4];
    if x > 0 {
        n[0] = i - 1;
    }
    if x + 1 < w {
        n[1] = i + 1;
    }
    if y > 0 {
        n[2] = i - w;
    }
    if y + 1 < h {
        n[3] = i + w;
    }
    n.into_iter().filter(|&j| j != usize::MAX)
}

fn largest_component(band: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut label = vec![0u32; band.len()];
    let mut best = (0u32, 0usize);
    let mut next = 1u32;
    let mut queue = VecDeque::new();
    for start in 0..band.len() {
        if !band[start] || label[start] != 0 {
            continue;
        }
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            for j in neighbours(i, w, h) {
                if band[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
        next += 1;
    }
    label.iter().map(|&l| best.1 > 0 && l == best.0).collect()
}

fn morph(mask: &[bool], w: usize, h: usize, r: usize, dilate: bool) -> Vec<bool> {
    let r = r as i64;
    let mut out = vec![false; mask.len()];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut hit = !dilate;
            'win: for dy in -r..=r {
                for dx in -r..=r {
                    if dx * dx + dy * dy > r * r {
                        continue;
                    }
                    let (nx, ny) = (x + dx, y + dy);
                    // Outside the image counts as background for dilation and
                    // as foreground for erosion, so closing never eats the border.
                    let v = if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        !dilate
                    } else {
                        mask[(ny * w as i64 + nx) as usize]
                    };
                    if dilate && v {
                        hit = true;
                        break 'win;
                    }
                    if !dilate && !v {
                        hit = false;
                        break 'win;
                    }
                }
            }
            out[(y * w as i64 + x) as usize] = hit;
        }
    }
    out
}

fn dilate(mask: &[bool], w: usize, h: usize, r: usize) -> Vec<bool> {
    morph(mask, w, h, r, true)
}

fn erode(mask: &[bool], w: usize, h: usize, r: usize) -> Vec<bool> {
    morph(mask, w, h, r, false)
}

/// Marks background reachable from the border; everything else is foreground.
fn fill_holes(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut outside = vec![false; mask.len()];
    let mut queue = VecDeque::new();
    for i in 0..mask.len() {
        let (x, y) = (i % w, i / w);
        if (x == 0 || y == 0 || x + 1 == w || y + 1 == h) && !mask[i] {
            outside[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for j in neighbours(i, w, h) {
            if !mask[j] && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        }
    }
    outside.iter().map(|&o| !o).collect()
}

/// Path of the mask for `class_id` inside a mask directory.
pub fn mask_path(dir: &Path, class_id: usize) -> PathBuf {
    dir.join(format!("mask_{class_id}.png"))
}

/// Loads a grayscale PNG mask and checks it matches `expected` `(width, height)`.
pub fn load_mask(path: impl AsRef<Path>, expected: (usize, usize)) -> Result<AlphaMask> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::Config(format!("mask file {} not found", path.display())));
    }
    let img = RasterImage::read_png(path)?;
    if (img.width(), img.height()) != expected {
        return Err(Error::Config(format!(
            "mask {} is {}x{}, expected {}x{}",
            path.display(),
            img.width(),
            img.height(),
            expected.0,
            expected.1
        )));
    }
    AlphaMask::from_image(to_grayscale(&img)?)
}
