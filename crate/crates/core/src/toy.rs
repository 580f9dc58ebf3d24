//! Deterministic synthetic portraits standing in for the ten reference faces,
//! together with default continuous masks and face bounding boxes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::masks::{convolve_clamped, gaussian_kernel, AlphaMask};
use crate::oracle::{FaceSet, NUM_CLASSES};
use crate::raster::RasterImage;

pub const TOY_SIZE: usize = 128;

/// Crop boxes extend this factor beyond the face ellipse radii.
const BOX_MARGIN: f64 = 1.3;

/// Gaussian softening applied to the rendered portraits, in pixels.
const SOFTNESS: f64 = 6.0;

/// Additional vertical softening on top of `SOFTNESS`.
const EXTRA_VERTICAL_SOFTNESS: f64 = 8.0;

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

/// A generated face set with its companion data.
#[derive(Clone, Debug)]
pub struct ToyFaces {
    pub faces: FaceSet,
    pub manual_masks: Vec<AlphaMask>,
    pub face_boxes: Vec<CropBox>,
}

type Rgb = [f64; 3];

const LIGHT_SKIN: Rgb = [0.93, 0.77, 0.65];
const DARK_SKIN: Rgb = [0.64, 0.46, 0.35];
/// Facial hair is drawn dark regardless of hair colour so it reads on every skin tone.
const FACIAL_HAIR: Rgb = [0.16, 0.11, 0.08];

const HAIR: [Rgb; 6] = [
    [0.08, 0.06, 0.05],
    [0.24, 0.15, 0.08],
    [0.33, 0.21, 0.11],
    [0.15, 0.15, 0.16],
    [0.38, 0.19, 0.09],
    [0.20, 0.12, 0.10],
];

const IRIS: [Rgb; 4] = [
    [0.20, 0.12, 0.06],
    [0.15, 0.30, 0.55],
    [0.20, 0.40, 0.25],
    [0.10, 0.10, 0.10],
];

/// Binary appearance traits. Classes receive distinct even-weight
/// combinations, so any two classes differ in at least two traits.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Look {
    fringe: bool,
    tinted_glasses: bool,
    beard: bool,
    moustache: bool,
    dark_skin: bool,
}

impl Look {
    fn from_bits(bits: u8) -> Self {
        Self {
            fringe: bits & 1 != 0,
            tinted_glasses: bits & 2 != 0,
            beard: bits & 4 != 0,
            moustache: bits & 8 != 0,
            dark_skin: bits & 16 != 0,
        }
    }
}

fn looks(rng: &mut ChaCha8Rng) -> Vec<Look> {
    let mut codes: Vec<u8> = (0..32u8).filter(|b| b.count_ones() % 2 == 0).collect();
    for i in (1..codes.len()).rev() {
        codes.swap(i, rng.random_range(0..=i));
    }
    codes.truncate(NUM_CLASSES);
    codes.into_iter().map(Look::from_bits).collect()
}

#[derive(Clone, Debug)]
struct Portrait {
    skin: Rgb,
    hair: Rgb,
    iris: Rgb,
    lip: Rgb,
    face_c: (f64, f64),
    face_r: (f64, f64),
    hair_c: (f64, f64),
    hair_r: (f64, f64),
    fringe_y: f64,
    fringe_wave: f64,
    eye_y: f64,
    eye_dx: f64,
    eye_r: (f64, f64),
    brow_gap: f64,
    brow_thick: f64,
    brow_tilt: f64,
    nose_len: f64,
    mouth_y: f64,
    mouth_hw: f64,
    mouth_thick: f64,
    mouth_curve: f64,
    glasses: bool,
    tinted: bool,
    beard: bool,
    moustache: bool,
}

fn ellipse(p: (f64, f64), c: (f64, f64), r: (f64, f64)) -> f64 {
    let dx = (p.0 - c.0) / r.0;
    let dy = (p.1 - c.1) / r.1;
    dx * dx + dy * dy
}

fn scale(c: Rgb, f: f64) -> Rgb {
    [c[0] * f, c[1] * f, c[2] * f]
}

impl Portrait {
    fn sample(rng: &mut ChaCha8Rng, look: Look) -> Self {
        let base = if look.dark_skin { DARK_SKIN } else { LIGHT_SKIN };
        let tone = rng.random_range(-0.03..0.03);
        let skin = base.map(|c| c + tone);
        let face_c = (64.0 + rng.random_range(-2.0..2.0), 68.0 + rng.random_range(-2.0..2.0));
        let face_r = (rng.random_range(38.0..42.0), rng.random_range(46.0..50.0));
        let hair_r = (face_r.0 + 5.0, face_r.1 * 0.87);
        let eye_y = face_c.1 - rng.random_range(3.0..12.0);
        let er = rng.random_range(3.5..6.0);
        Self {
            skin,
            hair: HAIR[rng.random_range(0..HAIR.len())],
            iris: IRIS[rng.random_range(0..IRIS.len())],
            lip: [
                rng.random_range(0.55..0.8),
                rng.random_range(0.18..0.32),
                rng.random_range(0.2..0.32),
            ],
            face_c,
            face_r,
            hair_c: (face_c.0, face_c.1 - face_r.1 * 0.35),
            hair_r,
            fringe_y: face_c.1 - face_r.1 + if look.fringe { 30.0 } else { 6.0 } + rng.random_range(-2.0..2.0),
            fringe_wave: rng.random_range(0.0..6.0),
            eye_y,
            eye_dx: rng.random_range(10.0..16.0),
            eye_r: (er, er * rng.random_range(0.5..0.8)),
            brow_gap: rng.random_range(5.0..9.0),
            brow_thick: rng.random_range(1.5..3.5),
            brow_tilt: rng.random_range(-0.3..0.3),
            nose_len: rng.random_range(8.0..16.0),
            mouth_y: face_c.1 + rng.random_range(14.0..22.0),
            mouth_hw: rng.random_range(6.0..13.0),
            mouth_thick: rng.random_range(1.5..4.0),
            mouth_curve: rng.random_range(-0.06..0.06),
            glasses: look.tinted_glasses,
            tinted: look.tinted_glasses,
            beard: look.beard,
            moustache: look.moustache,
        }
    }

    fn in_face(&self, p: (f64, f64)) -> bool {
        ellipse(p, self.face_c, self.face_r) <= 1.0
    }

    fn color(&self, p: (f64, f64)) -> Rgb {
        let (x, y) = p;
        let size = TOY_SIZE as f64;
        let t = y / size;
        let mut col = [0.40 - 0.08 * t, 0.44 - 0.08 * t, 0.52 - 0.06 * t];

        // neck
        if (x - self.face_c.0).abs() < self.face_r.0 * 0.45 && y > self.face_c.1 {
            col = scale(self.skin, 0.85);
        }
        if ellipse(p, self.hair_c, self.hair_r) <= 1.0 {
            col = self.hair;
        }
        if !self.in_face(p) {
            return col;
        }
        col = self.skin;
        // shading toward the contour
        let r = ellipse(p, self.face_c, self.face_r);
        col = scale(col, 1.0 - 0.12 * r * r);

        let fringe = self.fringe_y + self.fringe_wave * ((x - self.face_c.0) * 0.25).sin();
        if y < fringe {
            return self.hair;
        }
        if self.beard && y > self.mouth_y + 3.0 && r > 0.12 {
            col = FACIAL_HAIR;
        }
        if self.moustache && y > self.mouth_y - 9.0 && y < self.mouth_y - 1.0 && (x - self.face_c.0).abs() < self.mouth_hw + 6.0 {
            col = FACIAL_HAIR;
        }

        for side in [-1.0, 1.0] {
            let ec = (self.face_c.0 + side * self.eye_dx, self.eye_y);
            // brow
            let by = self.eye_y - self.brow_gap + side * self.brow_tilt * (x - ec.0);
            if (x - ec.0).abs() < self.eye_r.0 + 2.5 && (y - by).abs() < self.brow_thick / 2.0 {
                col = self.hair;
            }
            let e = ellipse(p, ec, self.eye_r);
            if e <= 1.0 {
                col = [0.95, 0.95, 0.93];
                if ellipse(p, ec, (self.eye_r.1, self.eye_r.1)) <= 1.0 {
                    col = self.iris;
                }
                if ellipse(p, ec, (self.eye_r.1 * 0.45, self.eye_r.1 * 0.45)) <= 1.0 {
                    col = [0.02, 0.02, 0.02];
                }
            }
            if self.glasses {
                let g = ellipse(p, ec, (self.eye_r.0 + 6.0, self.eye_r.0 + 4.5));
                if (0.7..=1.0).contains(&g) || (self.tinted && g < 0.7) {
                    col = [0.05, 0.05, 0.06];
                }
            }
        }
        if self.glasses && (y - self.eye_y).abs() < 0.8 && (x - self.face_c.0).abs() < self.eye_dx - self.eye_r.0 - 3.0 {
            col = [0.05, 0.05, 0.06];
        }

        // nose
        let nose_top = self.eye_y + 2.0;
        if y > nose_top && y < nose_top + self.nose_len {
            let half = 1.0 + (y - nose_top) / self.nose_len * 3.0;
            if (x - self.face_c.0).abs() < half && (x - self.face_c.0) > half - 1.5 {
                col = scale(self.skin, 0.72);
            }
        }
        // mouth
        let dx = x - self.face_c.0;
        if dx.abs() < self.mouth_hw {
            let my = self.mouth_y + self.mouth_curve * dx * dx;
            if (y - my).abs() < self.mouth_thick / 2.0 {
                col = self.lip;
            }
        }
        col
    }

    fn mask_value(&self, p: (f64, f64)) -> f64 {
        let r = ellipse(p, self.face_c, (self.face_r.0 * 0.97, self.face_r.1 * 0.97));
        if r > 1.0 {
            return if ellipse(p, self.hair_c, self.hair_r) <= 1.0 { 0.7 } else { 0.0 };
        }
        let (x, y) = p;
        let mut v: f64 = 0.8;
        let eye_band = (y - (self.eye_y - self.brow_gap / 2.0)).abs() < self.brow_gap / 2.0 + self.eye_r.1 + 3.0
            && (x - self.face_c.0).abs() < self.eye_dx + self.eye_r.0 + 4.0;
        if eye_band {
            v = v.max(0.95);
        }
        if (x - self.face_c.0).abs() < 5.0 && y > self.eye_y && y < self.eye_y + self.nose_len + 4.0 {
            v = v.max(0.88);
        }
        if (x - self.face_c.0).abs() < self.mouth_hw + 3.0 && (y - self.mouth_y).abs() < self.mouth_thick + 4.0 {
            v = v.max(0.92);
        }
        v
    }

    /// Face ellipse bounds widened by a detector-style margin.
    fn bounding_box(&self) -> CropBox {
        let n = TOY_SIZE as f64;
        let (rx, ry) = (self.face_r.0 * BOX_MARGIN, self.face_r.1 * BOX_MARGIN);
        let x0 = (self.face_c.0 - rx).floor().max(0.0);
        let y0 = (self.face_c.1 - ry).floor().max(0.0);
        let x1 = (self.face_c.0 + rx).ceil().min(n);
        let y1 = (self.face_c.1 + ry).ceil().min(n);
        CropBox {
            x: x0 as usize,
            y: y0 as usize,
            width: (x1 - x0) as usize,
            height: (y1 - y0) as usize,
        }
    }
}

/// Supersampled rasterization of `f` over the toy canvas.
fn rasterize<const C: usize>(f: impl Fn((f64, f64)) -> [f64; C]) -> Vec<[f64; C]> {
    const SS: usize = 3;
    let mut out = Vec::with_capacity(TOY_SIZE * TOY_SIZE);
    for y in 0..TOY_SIZE {
        for x in 0..TOY_SIZE {
            let mut acc = [0.0; C];
            for sy in 0..SS {
                for sx in 0..SS {
                    let p = (
                        x as f64 + (sx as f64 + 0.5) / SS as f64,
                        y as f64 + (sy as f64 + 0.5) / SS as f64,
                    );
                    let v = f(p);
                    for c in 0..C {
                        acc[c] += v[c];
                    }
                }
            }
            out.push(acc.map(|a| a / (SS * SS) as f64));
        }
    }
    out
}

fn vertical_blur(plane: &[f64], kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let n = TOY_SIZE as i64;
    let mut out = vec![0.0; plane.len()];
    for y in 0..n {
        for x in 0..n {
            out[(y * n + x) as usize] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * plane[((y + k as i64 - r).clamp(0, n - 1) * n + x) as usize])
                .sum();
        }
    }
    out
}

/// Generates the ten portraits for `seed`. Images and masks are quantized to
/// 8 bits so they survive a PNG round trip unchanged.
pub fn generate(seed: u64) -> ToyFaces {
    let mut palette_rng = ChaCha8Rng::seed_from_u64(seed);
    let traits = looks(&mut palette_rng);
    let mut images = Vec::with_capacity(NUM_CLASSES);
    let mut masks = Vec::with_capacity(NUM_CLASSES);
    let mut boxes = Vec::with_capacity(NUM_CLASSES);
    for (class, &look) in traits.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(class as u64 + 1));
        let portrait = Portrait::sample(&mut rng, look);
        let pixels = rasterize(|p| portrait.color(p));
        let kernel = gaussian_kernel(SOFTNESS);
        let tall = gaussian_kernel(EXTRA_VERTICAL_SOFTNESS);
        let planes: Vec<Vec<f64>> = (0..3)
            .map(|c| {
                let plane: Vec<f64> = pixels.iter().map(|px| px[c]).collect();
                vertical_blur(&convolve_clamped(&plane, TOY_SIZE, TOY_SIZE, &kernel), &tall)
            })
            .collect();
        let image = RasterImage::from_planes(TOY_SIZE, TOY_SIZE, &planes).expect("valid toy image");
        images.push(image.quantize());
        let mask = rasterize(|p| [portrait.mask_value(p)]);
        let mask = RasterImage::new(TOY_SIZE, TOY_SIZE, 1, mask.iter().map(|v| v[0]).collect())
            .expect("valid toy mask")
            .quantize();
        masks.push(AlphaMask::from_image(mask).expect("single channel"));
        boxes.push(portrait.bounding_box());
    }
    ToyFaces {
        faces: FaceSet::new(images).expect("ten equally sized faces"),
        manual_masks: masks,
        face_boxes: boxes,
    }
}
