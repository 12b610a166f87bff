//! Train-time augmentation of `[3, H, W]` images: horizontal flip and
//! random erasing.

use rand::Rng;

use crate::tensor::Tensor;

pub const FLIP_P: f64 = 0.5;
pub const ERASE_P: f64 = 0.5;
pub const ERASE_AREA: (f64, f64) = (0.02, 0.4);
pub const ERASE_ASPECT: (f64, f64) = (0.3, 3.33);
const ERASE_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip: bool,
    pub erase: bool,
    /// Per-channel erasing value, the dataset mean.
    pub fill: [f32; 3],
}

/// Rectangle `[y, y + h) × [x, x + w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

pub fn flip_horizontal(img: &mut Tensor<f32>) {
    let w = img.shape()[2];
    for row in img.data_mut().chunks_mut(w) {
        row.reverse();
    }
}

pub fn erase(img: &mut Tensor<f32>, r: Rect, fill: [f32; 3]) {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let data = img.data_mut();
    for (c, &v) in fill.iter().enumerate() {
        for y in r.y..r.y + r.h {
            data[(c * h + y) * w + r.x..][..r.w].fill(v);
        }
    }
}

/// Draw an erasing rectangle with area ratio in [`ERASE_AREA`] and aspect
/// (height / width) log-uniform in [`ERASE_ASPECT`] that fits inside the
/// image; `None` if no draw fits.
pub fn sample_erase_rect<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Option<Rect> {
    let area = (h * w) as f64;
    let (la, lb) = (ERASE_ASPECT.0.ln(), ERASE_ASPECT.1.ln());
    for _ in 0..ERASE_ATTEMPTS {
        let target = area * rng.gen_range(ERASE_AREA.0..=ERASE_AREA.1);
        let aspect = rng.gen_range(la..=lb).exp();
        let rh = (target * aspect).sqrt().round() as usize;
        let rw = (target / aspect).sqrt().round() as usize;
        if rh >= 1 && rw >= 1 && rh < h && rw < w {
            let y = rng.gen_range(0..=h - rh);
            let x = rng.gen_range(0..=w - rw);
            return Some(Rect { y, x, h: rh, w: rw });
        }
    }
    None
}

/// Apply the enabled augmentations in place. Draw order is fixed: the flip
/// coin, the erase coin, then the rectangle.
pub fn augment<R: Rng + ?Sized>(img: &mut Tensor<f32>, rng: &mut R, cfg: &AugmentConfig) {
    if cfg.flip && rng.gen_bool(FLIP_P) {
        flip_horizontal(img);
    }
    if cfg.erase && rng.gen_bool(ERASE_P) {
        let (h, w) = (img.shape()[1], img.shape()[2]);
        if let Some(r) = sample_erase_rect(h, w, rng) {
            erase(img, r, cfg.fill);
        }
    }
}
