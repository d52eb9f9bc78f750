use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAX_ROTATION_DEGREES: f64 = 10.0;

/// Mirrors every channel left to right.
pub fn hflip<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let (_, _, w) = image.chw().expect("C×H×W image");
    let mut out = image.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

/// Rotation about the image centre with nearest-neighbour sampling; source
/// coordinates outside the image are clamped to the nearest edge pixel.
pub fn rotate_nearest<T: Scalar>(image: &Tensor<T>, degrees: f64) -> Tensor<T> {
    let (c, h, w) = image.chw().expect("C×H×W image");
    if degrees == 0.0 {
        return image.clone();
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let src = image.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                // inverse map: rotate the output offset by -angle
                let sy = (cos * dy - sin * dx + cy).round().clamp(0.0, (h - 1) as f64) as usize;
                let sx = (sin * dy + cos * dx + cx).round().clamp(0.0, (w - 1) as f64) as usize;
                out.push(src[(ch * h + sy) * w + sx]);
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("same shape")
}

/// Horizontal flip with probability 0.5, then a rotation drawn uniformly from
/// `[-10°, 10°]`.
pub fn augment<T: Scalar, R: Rng + ?Sized>(image: &Tensor<T>, rng: &mut R) -> Tensor<T> {
    let flip = rng.random_bool(0.5);
    let angle = rng.random_range(-MAX_ROTATION_DEGREES..=MAX_ROTATION_DEGREES);
    let base = if flip { hflip(image) } else { image.clone() };
    rotate_nearest(&base, angle)
}
