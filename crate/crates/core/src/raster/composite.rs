use serde::{Deserialize, Serialize};

use super::RasterImage;
use crate::masks::AlphaMask;
use crate::{Error, Result};

/// Centre of a pasted overlay in base-image pixel coordinates. May lie outside
/// the base so that part of the overlay is cropped away.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub cx: f64,
    pub cy: f64,
}

impl Placement {
    pub fn new(cx: f64, cy: f64) -> Self {
        Self { cx, cy }
    }

    /// Whether the centre lies in the extended range that keeps at least half
    /// of the overlay on each axis inside the base.
    pub fn within_crop_allowance(&self, base: (usize, usize), overlay: (usize, usize)) -> bool {
        let (bw, bh) = (base.0 as f64, base.1 as f64);
        let (ow, oh) = (overlay.0 as f64 / 2.0, overlay.1 as f64 / 2.0);
        (-ow..=bw + ow).contains(&self.cx) && (-oh..=bh + oh).contains(&self.cy)
    }

    /// Integer top-left offset of an overlay of the given size; the only place
    /// where the real-valued centre is rounded.
    pub fn top_left(&self, overlay_width: usize, overlay_height: usize) -> (i64, i64) {
        (
            (self.cx - overlay_width as f64 / 2.0).round() as i64,
            (self.cy - overlay_height as f64 / 2.0).round() as i64,
        )
    }
}

/// Alpha-composites `overlay` onto `base` centred at `place`.
///
/// `out = (1 - a) * base + a * overlay` on the overlapping rectangle; parts of
/// the overlay that fall outside `base` are dropped.
pub fn paste(
    base: &RasterImage,
    overlay: &RasterImage,
    alpha: &AlphaMask,
    place: Placement,
) -> Result<RasterImage> {
    if (alpha.width(), alpha.height()) != (overlay.width(), overlay.height()) {
        return Err(Error::invalid(format!(
            "alpha {}x{} does not match overlay {}x{}",
            alpha.width(),
            alpha.height(),
            overlay.width(),
            overlay.height()
        )));
    }
    if overlay.channels() != base.channels() {
        return Err(Error::invalid(format!(
            "overlay has {} channels, base has {}",
            overlay.channels(),
            base.channels()
        )));
    }
    let c = base.channels();
    let (bw, bh) = (base.width() as i64, base.height() as i64);
    let (ow, oh) = (overlay.width(), overlay.height());
    let (ox, oy) = place.top_left(ow, oh);

    let mut data = base.data().to_vec();
    let ov = overlay.data();
    let a = alpha.values();
    let qx0 = (-ox).max(0) as usize;
    let qx1 = ((bw - ox).min(ow as i64)).max(0) as usize;
    let qy0 = (-oy).max(0) as usize;
    let qy1 = ((bh - oy).min(oh as i64)).max(0) as usize;
    for qy in qy0..qy1 {
        let py = (oy + qy as i64) as usize;
        for qx in qx0..qx1 {
            let px = (ox + qx as i64) as usize;
            let alpha_q = a[qy * ow + qx];
            if alpha_q == 0.0 {
                continue;
            }
            let p = (py * bw as usize + px) * c;
            let q = (qy * ow + qx) * c;
            for ch in 0..c {
                let b = data[p + ch];
                let o = ov[q + ch];
                let v = (1.0 - alpha_q) * b + alpha_q * o;
                data[p + ch] = v.clamp(b.min(o), b.max(o));
            }
        }
    }
    RasterImage::new(base.width(), base.height(), c, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pattern(w: usize, h: usize, phase: usize) -> RasterImage {
        RasterImage::from_fn(w, h, 3, |x, y, c| ((x * 5 + y * 3 + c + phase) % 11) as f64 / 10.0)
    }

    #[test]
    fn transparent_paste_is_identity() {
        let base = pattern(10, 8, 0);
        let ov = pattern(4, 4, 3);
        let alpha = AlphaMask::filled(4, 4, 0.0);
        assert_eq!(paste(&base, &ov, &alpha, Placement::new(5.0, 4.0)).unwrap(), base);
    }

    #[test]
    fn opaque_paste_replaces_rectangle() {
        let base = pattern(10, 8, 0);
        let ov = pattern(4, 2, 3);
        let alpha = AlphaMask::filled(4, 2, 1.0);
        let out = paste(&base, &ov, &alpha, Placement::new(5.0, 4.0)).unwrap();
        // top-left = (5 - 2, 4 - 1) = (3, 3)
        for y in 0..8 {
            for x in 0..10 {
                for c in 0..3 {
                    let inside = (3..7).contains(&x) && (3..5).contains(&y);
                    let expected = if inside { ov.get(x - 3, y - 3, c) } else { base.get(x, y, c) };
                    assert_eq!(out.get(x, y, c), expected);
                }
            }
        }
    }

    #[test]
    fn left_edge_placement_keeps_right_half() {
        let base = RasterImage::filled(20, 10, 3, 0.0);
        let ov = RasterImage::filled(8, 6, 3, 1.0);
        let alpha = AlphaMask::filled(8, 6, 1.0);
        let affected = |cx: f64| {
            let out = paste(&base, &ov, &alpha, Placement::new(cx, 5.0)).unwrap();
            (0..20).filter(|&x| (0..10).any(|y| out.get(x, y, 0) > 0.0)).count()
        };
        // Centre on the left border: half of the overlay columns survive.
        assert_eq!(affected(0.0), 4);
        // Centre at the lower bound of the allowance: the overlay is fully off-canvas.
        assert_eq!(affected(-4.0), 0);
        assert!(Placement::new(-4.0, 5.0).within_crop_allowance((20, 10), (8, 6)));
        assert!(!Placement::new(-4.5, 5.0).within_crop_allowance((20, 10), (8, 6)));
    }

    #[test]
    fn alpha_dimension_mismatch_is_rejected() {
        let base = pattern(10, 8, 0);
        let ov = pattern(4, 4, 1);
        let alpha = AlphaMask::filled(3, 4, 1.0);
        assert!(matches!(
            paste(&base, &ov, &alpha, Placement::new(0.0, 0.0)),
            Err(Error::InvalidParameter(_))
        ));
    }

    proptest! {
        #[test]
        fn zero_alpha_is_identity_everywhere(cx in -20.0f64..40.0, cy in -20.0f64..40.0) {
            let base = pattern(16, 12, 2);
            let ov = pattern(9, 7, 5);
            let alpha = AlphaMask::filled(9, 7, 0.0);
            prop_assert_eq!(paste(&base, &ov, &alpha, Placement::new(cx, cy)).unwrap(), base);
        }

        #[test]
        fn output_is_convex_combination(
            cx in -10.0f64..26.0, cy in -10.0f64..22.0, seed in 0usize..500,
        ) {
            let base = pattern(16, 12, seed);
            let ov = pattern(9, 7, seed * 7 + 1);
            let alpha = AlphaMask::from_fn(9, 7, |x, y| ((x * 13 + y * 7 + seed) % 10) as f64 / 9.0);
            let out = paste(&base, &ov, &alpha, Placement::new(cx, cy)).unwrap();
            let (ox, oy) = Placement::new(cx, cy).top_left(9, 7);
            for y in 0..12 {
                for x in 0..16 {
                    let qx = x as i64 - ox;
                    let qy = y as i64 - oy;
                    for c in 0..3 {
                        let b = base.get(x, y, c);
                        let v = out.get(x, y, c);
                        prop_assert!((0.0..=1.0).contains(&v));
                        if (0..9).contains(&qx) && (0..7).contains(&qy) {
                            let o = ov.get(qx as usize, qy as usize, c);
                            prop_assert!(v >= b.min(o) && v <= b.max(o));
                        } else {
                            prop_assert_eq!(v, b);
                        }
                    }
                }
            }
        }
    }
}
