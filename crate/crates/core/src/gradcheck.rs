//! Central-difference gradient certification.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Gradients, ParamId, ParamSet};

/// Floor of the relative-error denominator.
pub const DENOMINATOR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Coordinates to sample; every coordinate is checked when the model has fewer.
    pub coordinates: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coordinates: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: Vec<CoordinateCheck>,
    /// `(parameter, index)` pairs whose stencil crossed a kink.
    pub skipped: Vec<(String, usize)>,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.checked
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

/// Compares `analytic` against `(f(p + h) - f(p - h)) / 2h` on a sample of
/// coordinates. At least one coordinate of every parameter tensor is included.
pub fn finite_diff_gradcheck<T, F>(
    loss: F,
    params: &ParamSet<T>,
    analytic: &Gradients<T>,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    T: Scalar,
    F: Fn(&ParamSet<T>) -> Result<T>,
{
    finite_diff_gradcheck_piecewise(|p| Ok((loss(p)?, Vec::new())), params, analytic, opts)
}

/// As [`finite_diff_gradcheck`] for piecewise-smooth losses. `loss` also
/// returns its activation pattern (see [`Tape::relu_pattern`](crate::tape::Tape::relu_pattern));
/// a coordinate whose `p ± h` patterns differ straddles a kink, where the
/// central difference is not a derivative estimate. Such coordinates are
/// listed in `skipped` and replaced by fresh ones until the requested count
/// is checked.
pub fn finite_diff_gradcheck_piecewise<T, F>(
    loss: F,
    params: &ParamSet<T>,
    analytic: &Gradients<T>,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    T: Scalar,
    F: Fn(&ParamSet<T>) -> Result<(T, Vec<bool>)>,
{
    if !(opts.step > 0.0) {
        return Err(Error::Precondition("finite-difference step must be positive".into()));
    }
    let primary = sample_coordinates(params, opts.coordinates, opts.seed);
    let target = primary.len();
    let mut reserve = reserve_coordinates(params, &primary, opts.seed);
    let dense = analytic.dense(params);
    let h = T::lit(opts.step);
    let mut work = params.clone();
    let mut checked = Vec::with_capacity(target);
    let mut skipped = Vec::new();
    let mut queue = primary.into_iter();
    loop {
        let next = match queue.next() {
            Some(c) => Some(c),
            None if checked.len() < target => reserve.pop(),
            None => None,
        };
        let Some((id, index)) = next else { break };
        let original = work.get(id).data()[index];
        work.get_mut(id).data_mut()[index] = original + h;
        let (plus, plus_pattern) = loss(&work)?;
        work.get_mut(id).data_mut()[index] = original - h;
        let (minus, minus_pattern) = loss(&work)?;
        work.get_mut(id).data_mut()[index] = original;
        let (plus, minus) = (finite(plus)?, finite(minus)?);
        if plus_pattern != minus_pattern {
            skipped.push((params.names()[id.0].clone(), index));
            continue;
        }

        let numeric = ((plus - minus) / (h + h)).to_f64_lossy();
        let a = dense[id.0].data()[index].to_f64_lossy();
        checked.push(CoordinateCheck {
            param: params.names()[id.0].clone(),
            index,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    let max_rel_error = checked.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        max_rel_error,
        checked,
        skipped,
    })
}

fn finite<T: Scalar>(v: T) -> Result<T> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Evaluation(format!("loss evaluated to {v}")))
    }
}

fn sample_coordinates<T: Scalar>(params: &ParamSet<T>, wanted: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let offsets: Vec<usize> = params
        .tensors()
        .iter()
        .scan(0, |acc, t| {
            let start = *acc;
            *acc += t.numel();
            Some(start)
        })
        .collect();
    let total = params.total_len();
    let locate = |flat: usize| {
        let tensor = offsets.partition_point(|&o| o <= flat) - 1;
        (ParamId(tensor), flat - offsets[tensor])
    };
    if total <= wanted {
        return (0..total).map(locate).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat: Vec<usize> = sample(&mut rng, total, wanted).into_iter().collect();
    for (i, t) in params.tensors().iter().enumerate() {
        let range = offsets[i]..offsets[i] + t.numel();
        if !flat.iter().any(|f| range.contains(f)) {
            flat.push(offsets[i] + rand::Rng::random_range(&mut rng, 0..t.numel()));
        }
    }
    flat.sort_unstable();
    flat.into_iter().map(locate).collect()
}

/// Unsampled coordinates in random order, consumed from the back.
fn reserve_coordinates<T: Scalar>(params: &ParamSet<T>, taken: &[(ParamId, usize)], seed: u64) -> Vec<(ParamId, usize)> {
    let mut all: Vec<(ParamId, usize)> = params
        .tensors()
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (ParamId(i), j)))
        .filter(|c| !taken.contains(c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    all.shuffle(&mut rng);
    all
}
