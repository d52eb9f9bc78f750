//! Datasets: the synthetic region-pattern generator, CelebA attribute files,
//! augmentation and the binary sample container.

mod augment;
mod celeba;
mod store;
mod synthetic;

pub use augment::{augment, hflip, rotate_nearest, MAX_ROTATION_DEGREES};
pub use celeba::{load_celeba_attributes, parse_celeba_attributes, CelebaAttributes};
pub use store::{load_dataset, save_dataset, SAMPLES_FILE, SPEC_FILE};
pub use synthetic::{generate_range, generate_synthetic, Pattern, PatternKind, Rect, SyntheticSpec};

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor<T>,
    /// One binary label per attribute.
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub spec: SyntheticSpec,
    pub samples: Vec<Sample<T>>,
}

impl<T> Dataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
