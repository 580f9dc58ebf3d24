//! Image representation, bilinear geometric transforms and alpha compositing.

mod composite;
mod image;
mod transform;

pub use self::composite::{paste, Placement};
pub use self::image::RasterImage;
pub use self::transform::{resize_bilinear, resize_to, rotate_bilinear, BilinearMap};

/// ITU-R BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Convert an RGB image to single-channel luma; grayscale input is returned as is.
pub fn to_grayscale(img: &RasterImage) -> crate::Result<RasterImage> {
    match img.channels() {
        1 => Ok(img.clone()),
        3 => {
            let data = img
                .data()
                .chunks_exact(3)
                .map(|px| {
                    let l = LUMA_WEIGHTS[0] * px[0] + LUMA_WEIGHTS[1] * px[1] + LUMA_WEIGHTS[2] * px[2];
                    l.clamp(0.0, 1.0)
                })
                .collect();
            RasterImage::new(img.width(), img.height(), 1, data)
        }
        c => Err(crate::Error::invalid(format!(
            "grayscale conversion needs 1 or 3 channels, got {c}"
        ))),
    }
}
