use super::image::clamp01;
use super::RasterImage;
use crate::{Error, Result};

/// A fixed bilinear resampling operator between two single-channel grids.
///
/// Every output pixel is a convex combination of (at most) four input pixels.
/// The operator is linear, so it can be applied to gradients in transpose.
#[derive(Clone, Debug)]
pub struct BilinearMap {
    in_width: usize,
    in_height: usize,
    out_width: usize,
    out_height: usize,
    taps: Vec<[(u32, f64); 4]>,
}

impl BilinearMap {
    /// Builds the operator from an inverse mapping: output pixel `(x, y)` samples
    /// the input at pixel-centre coordinates `inverse(x, y)`. Samples outside
    /// the input are clamped to the nearest edge.
    pub fn from_inverse(
        in_width: usize,
        in_height: usize,
        out_width: usize,
        out_height: usize,
        inverse: impl Fn(usize, usize) -> (f64, f64),
    ) -> Self {
        let mut taps = Vec::with_capacity(out_width * out_height);
        for y in 0..out_height {
            for x in 0..out_width {
                let (u, v) = inverse(x, y);
                taps.push(bilinear_taps(in_width, in_height, u, v));
            }
        }
        Self {
            in_width,
            in_height,
            out_width,
            out_height,
            taps,
        }
    }

    /// Resampling of a `in_width × in_height` grid onto `out_width × out_height`
    /// with pixel centres aligned by the dimension ratio.
    pub fn resize(in_width: usize, in_height: usize, out_width: usize, out_height: usize) -> Self {
        let rx = in_width as f64 / out_width as f64;
        let ry = in_height as f64 / out_height as f64;
        Self::from_inverse(in_width, in_height, out_width, out_height, |x, y| {
            ((x as f64 + 0.5) * rx - 0.5, (y as f64 + 0.5) * ry - 0.5)
        })
    }

    pub fn in_dims(&self) -> (usize, usize) {
        (self.in_width, self.in_height)
    }

    pub fn out_dims(&self) -> (usize, usize) {
        (self.out_width, self.out_height)
    }

    pub fn apply(&self, plane: &[f64]) -> Vec<f64> {
        debug_assert_eq!(plane.len(), self.in_width * self.in_height);
        self.taps
            .iter()
            .map(|t| t.iter().map(|&(i, w)| w * plane[i as usize]).sum())
            .collect()
    }

    /// Adjoint of [`apply`](Self::apply): scatters output-space values back onto the input grid.
    pub fn apply_transpose(&self, out: &[f64]) -> Vec<f64> {
        debug_assert_eq!(out.len(), self.out_width * self.out_height);
        let mut acc = vec![0.0; self.in_width * self.in_height];
        for (t, &g) in self.taps.iter().zip(out) {
            for &(i, w) in t {
                acc[i as usize] += w * g;
            }
        }
        acc
    }

    /// Applies the operator to every channel of `img`.
    pub fn apply_image(&self, img: &RasterImage) -> RasterImage {
        assert_eq!((img.width(), img.height()), (self.in_width, self.in_height));
        let c = img.channels();
        let src = img.data();
        let mut data = Vec::with_capacity(self.taps.len() * c);
        for t in &self.taps {
            for ch in 0..c {
                let v: f64 = t.iter().map(|&(i, w)| w * src[i as usize * c + ch]).sum();
                data.push(clamp01(v));
            }
        }
        RasterImage::new(self.out_width, self.out_height, c, data).expect("dimensions are consistent")
    }
}

fn bilinear_taps(w: usize, h: usize, u: f64, v: f64) -> [(u32, f64); 4] {
    let clamp_coord = |p: f64, n: usize| p.clamp(0.0, (n - 1) as f64);
    let u = clamp_coord(u, w);
    let v = clamp_coord(v, h);
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let idx = |x: usize, y: usize| (y * w + x) as u32;
    [
        (idx(x0, y0), (1.0 - fx) * (1.0 - fy)),
        (idx(x1, y0), fx * (1.0 - fy)),
        (idx(x0, y1), (1.0 - fx) * fy),
        (idx(x1, y1), fx * fy),
    ]
}

/// Resamples `img` to exactly `width × height`.
pub fn resize_to(img: &RasterImage, width: usize, height: usize) -> Result<RasterImage> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!("resize target {width}x{height} is empty")));
    }
    if (width, height) == (img.width(), img.height()) {
        return Ok(img.clone());
    }
    Ok(BilinearMap::resize(img.width(), img.height(), width, height).apply_image(img))
}

/// Scales `img` by `(sx, sy)`; output dimensions are `round(dim × factor)`.
pub fn resize_bilinear(img: &RasterImage, sx: f64, sy: f64) -> Result<RasterImage> {
    if !(sx > 0.0 && sy > 0.0 && sx.is_finite() && sy.is_finite()) {
        return Err(Error::invalid(format!("scale factors must be positive, got ({sx}, {sy})")));
    }
    let w = (img.width() as f64 * sx).round() as usize;
    let h = (img.height() as f64 * sy).round() as usize;
    if w == 0 || h == 0 {
        return Err(Error::invalid(format!(
            "scale ({sx}, {sy}) collapses {}x{} to an empty image",
            img.width(),
            img.height()
        )));
    }
    resize_to(img, w, h)
}

/// Rotates `img` about its centre by `theta` degrees (positive is counter-clockwise
/// as displayed). The canvas grows to bound the rotated rectangle; the returned
/// single-channel validity mask is 1 where the output samples the source and 0
/// in the uncovered corners.
pub fn rotate_bilinear(img: &RasterImage, theta: f64) -> (RasterImage, RasterImage) {
    let (w, h) = (img.width(), img.height());
    if theta == 0.0 {
        return (img.clone(), RasterImage::filled(w, h, 1, 1.0));
    }
    let (s, c) = theta.to_radians().sin_cos();
    let wf = w as f64;
    let hf = h as f64;
    let out_w = ((wf * c.abs() + hf * s.abs()) - 1e-9).ceil().max(1.0) as usize;
    let out_h = ((wf * s.abs() + hf * c.abs()) - 1e-9).ceil().max(1.0) as usize;
    let (ocx, ocy) = (out_w as f64 / 2.0, out_h as f64 / 2.0);
    let inverse = |x: usize, y: usize| {
        let dx = x as f64 + 0.5 - ocx;
        let dy = y as f64 + 0.5 - ocy;
        (c * dx - s * dy + wf / 2.0 - 0.5, s * dx + c * dy + hf / 2.0 - 0.5)
    };
    let map = BilinearMap::from_inverse(w, h, out_w, out_h, inverse);
    let rotated = map.apply_image(img);
    let eps = 1e-9;
    let validity = RasterImage::from_fn(out_w, out_h, 1, |x, y, _| {
        let (u, v) = inverse(x, y);
        let inside = u >= -0.5 - eps && u <= wf - 0.5 + eps && v >= -0.5 - eps && v <= hf - 0.5 + eps;
        if inside {
            1.0
        } else {
            0.0
        }
    });
    (rotated, validity)
}
