//! Synthetic stand-in for face images.
//!
//! The image is cut into a 3×3 grid of tiles and group `g` owns tile `g` in
//! row-major order. Inside its tile a group reserves one square-grid slot per
//! member attribute (in attribute-index order). A positive label draws the
//! attribute's pattern into its slot; a negative label leaves the slot at the
//! background level. Attribute `i` uses the colour mask `MASKS[i % 7]` and the
//! pattern kind `i / 7`, so every attribute in a 42-attribute budget has a
//! distinct look. Gaussian noise is added last and pixels are clipped to
//! `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::grouping::AttributeGrouping;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// RGB bitmasks, bit 0 = channel 0.
const MASKS: [u8; 7] = [0b001, 0b010, 0b100, 0b011, 0b101, 0b110, 0b111];
const KINDS: [PatternKind; 6] = [
    PatternKind::Solid,
    PatternKind::RowStripes,
    PatternKind::ColumnStripes,
    PatternKind::Checker,
    PatternKind::OddRowStripes,
    PatternKind::OddColumnStripes,
];
const GRID: usize = 3;
const MIN_SLOT: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternKind {
    Solid,
    RowStripes,
    ColumnStripes,
    Checker,
    OddRowStripes,
    OddColumnStripes,
}

impl PatternKind {
    fn lit(self, r: usize, c: usize) -> bool {
        match self {
            PatternKind::Solid => true,
            PatternKind::RowStripes => r.is_multiple_of(2),
            PatternKind::ColumnStripes => c.is_multiple_of(2),
            PatternKind::Checker => (r + c).is_multiple_of(2),
            PatternKind::OddRowStripes => r % 2 == 1,
            PatternKind::OddColumnStripes => c % 2 == 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pattern {
    pub channels: u8,
    pub kind: PatternKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    /// Bernoulli rate of every label.
    pub positive_rate: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
    pub background: f64,
    pub foreground: f64,
    pub grouping: AttributeGrouping,
}

impl SyntheticSpec {
    pub fn new(grouping: AttributeGrouping) -> Self {
        Self {
            height: 32,
            width: 32,
            positive_rate: 0.5,
            noise: 0.05,
            seed: 0,
            background: 0.1,
            foreground: 0.9,
            grouping,
        }
    }

    /// Eight attributes in two groups of four.
    pub fn desk_default() -> Self {
        let names = |p: &str| (0..4).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        let grouping = AttributeGrouping::from_groups(
            None,
            vec![("Upper".into(), names("upper_")), ("Lower".into(), names("lower_"))],
        )
        .expect("static grouping");
        Self::new(grouping)
    }

    pub fn load(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [3, self.height, self.width]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        let g = self.grouping.num_groups();
        if g > GRID * GRID {
            return bad(format!("{g} groups exceed the {} image tiles", GRID * GRID));
        }
        let k = self.grouping.num_attributes();
        if k > MASKS.len() * KINDS.len() {
            return bad(format!("{k} attributes exceed the {} distinct patterns", MASKS.len() * KINDS.len()));
        }
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return bad(format!("positive rate {} outside [0, 1]", self.positive_rate));
        }
        if !(self.noise >= 0.0) {
            return bad(format!("noise level {} must be >= 0", self.noise));
        }
        if !(0.0 <= self.background && self.background < self.foreground && self.foreground <= 1.0) {
            return bad("need 0 <= background < foreground <= 1".into());
        }
        for (gi, size) in self.grouping.group_sizes().into_iter().enumerate() {
            let side = grid_side(size);
            let tile = self.tile(gi);
            if tile.height / side < MIN_SLOT || tile.width / side < MIN_SLOT {
                return bad(format!(
                    "group {} needs {size} slots but its {}×{} tile fits only {}-pixel slots",
                    self.grouping.groups()[gi],
                    tile.height,
                    tile.width,
                    (tile.height / side).min(tile.width / side)
                ));
            }
        }
        Ok(())
    }

    /// Tile owned by group `g`.
    pub fn tile(&self, g: usize) -> Rect {
        let th = self.height / GRID;
        let tw = self.width / GRID;
        Rect {
            top: (g / GRID) * th,
            left: (g % GRID) * tw,
            height: th,
            width: tw,
        }
    }

    /// Slot of attribute `i` inside its group's tile.
    pub fn slot(&self, attr: usize) -> Result<Rect> {
        let g = self.grouping.group_of(attr)?;
        let members: Vec<usize> = self.grouping.members(g).collect();
        let pos = members.iter().position(|&m| m == attr).expect("member of own group");
        let side = grid_side(members.len());
        let tile = self.tile(g);
        let (sh, sw) = (tile.height / side, tile.width / side);
        Ok(Rect {
            top: tile.top + (pos / side) * sh,
            left: tile.left + (pos % side) * sw,
            height: sh,
            width: sw,
        })
    }

    pub fn pattern(attr: usize) -> Pattern {
        Pattern {
            channels: MASKS[attr % MASKS.len()],
            kind: KINDS[(attr / MASKS.len()) % KINDS.len()],
        }
    }

    /// Noise-free rendering of a label vector.
    pub fn render<T: Scalar>(&self, labels: &[u8]) -> Result<Tensor<T>> {
        if labels.len() != self.grouping.num_attributes() {
            return Err(Error::Shape(format!(
                "{} labels for {} attributes",
                labels.len(),
                self.grouping.num_attributes()
            )));
        }
        let (h, w) = (self.height, self.width);
        let mut img = Tensor::full(&[3, h, w], T::lit(self.background));
        let fg = T::lit(self.foreground);
        let data = img.data_mut();
        for (attr, _) in labels.iter().enumerate().filter(|(_, &y)| y == 1) {
            let slot = self.slot(attr)?;
            let pat = Self::pattern(attr);
            for r in 0..slot.height {
                for c in 0..slot.width {
                    if !pat.kind.lit(r, c) {
                        continue;
                    }
                    for ch in (0..3).filter(|ch| pat.channels & (1 << ch) != 0) {
                        data[(ch * h + slot.top + r) * w + slot.left + c] = fg;
                    }
                }
            }
        }
        Ok(img)
    }

    /// Sample `index` of the stream defined by this spec's seed.
    pub fn sample<T: Scalar>(&self, index: u64) -> Result<Sample<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let labels: Vec<u8> = (0..self.grouping.num_attributes())
            .map(|_| u8::from(rng.random::<f64>() < self.positive_rate))
            .collect();
        let mut image = self.render::<f64>(&labels)?;
        if self.noise > 0.0 {
            let normal = Normal::new(0.0, self.noise).map_err(|e| Error::Validation(e.to_string()))?;
            for v in image.data_mut() {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        Ok(Sample {
            image: image.cast(),
            labels,
        })
    }
}

fn grid_side(n: usize) -> usize {
    let mut s = 1;
    while s * s < n {
        s += 1;
    }
    s
}

/// `n` samples starting at stream index 0.
pub fn generate_synthetic<T: Scalar>(spec: &SyntheticSpec, n: usize) -> Result<Dataset<T>> {
    generate_range(spec, 0, n)
}

/// Samples with stream indices `start .. start + n`. Each sample derives its
/// randomness from `(seed, index)` alone, so output is independent of the
/// worker count.
pub fn generate_range<T: Scalar>(spec: &SyntheticSpec, start: u64, n: usize) -> Result<Dataset<T>> {
    if n == 0 {
        return Err(Error::Precondition("dataset size must be at least 1".into()));
    }
    spec.validate()?;
    let samples = (0..n as u64)
        .into_par_iter()
        .map(|i| spec.sample(start + i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}
