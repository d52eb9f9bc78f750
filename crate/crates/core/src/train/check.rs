use crate::data::generate_range;
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_gradcheck_piecewise, GradcheckOptions, GradcheckReport};
use crate::losses::loss_on_tape;
use crate::model::{Mode, Model};
use crate::tape::{Gradients, ParamSet, Tape};

use super::{derive_seed, DataSource, TrainConfig};

/// Maximum relative error a certified model may show.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Checks the full training objective (forward, focal, divergence penalty,
/// dropout in train mode, non-uniform λ) of `config`'s model against central
/// differences on at least `coordinates` parameter coordinates. Coordinates
/// whose stencil flips a ReLU are replaced, not checked.
pub fn model_gradcheck(config: &TrainConfig, seed: u64, step: f64, coordinates: usize) -> Result<GradcheckReport> {
    config.validate()?;
    let DataSource::Synthetic { spec, .. } = &config.data else {
        return Err(Error::Config("gradcheck needs a synthetic data section".into()));
    };
    let mut spec = spec.clone();
    spec.seed = derive_seed(seed, &[spec.seed]);
    let batch = generate_range::<f64>(&spec, 0, config.batch_size)?;
    let model = Model::new(config.model.clone(), spec.grouping.clone())?;
    let params: ParamSet<f64> = model.init_params(seed);
    let k = model.grouping().num_attributes();
    // Distinct weights summing to K, as DWS would produce mid-training.
    let lambda: Vec<f64> = (0..k).map(|i| 0.5 + i as f64 / (k - 1).max(1) as f64).collect();
    let scale = 1.0 / batch.len() as f64;

    let objective = |p: &ParamSet<f64>, grads: bool| -> Result<(f64, Vec<bool>, Option<Gradients<f64>>)> {
        let mut value = 0.0;
        let mut pattern = Vec::new();
        let mut acc = grads.then(|| Gradients::zeros_like(p));
        for (i, s) in batch.samples.iter().enumerate() {
            let mut tape = Tape::with_params(p);
            let x = tape.constant(s.image.clone());
            let mode = Mode::Train {
                dropout_seed: derive_seed(seed, &[i as u64]),
            };
            let vars = model.forward_on_tape(&mut tape, x, mode)?;
            let loss = loss_on_tape(&mut tape, &vars, &s.labels, &lambda, &config.loss, scale)?;
            value += tape.value(loss.total).data()[0];
            pattern.extend(tape.relu_pattern());
            if let Some(acc) = acc.as_mut() {
                acc.accumulate(&tape.backward(loss.total)?, 1.0)?;
            }
        }
        Ok((value, pattern, acc))
    };
    let (_, _, analytic) = objective(&params, true)?;
    let analytic = analytic.expect("requested");
    let opts = GradcheckOptions {
        step,
        coordinates,
        seed,
    };
    finite_diff_gradcheck_piecewise(
        |p| objective(p, false).map(|(v, pattern, _)| (v, pattern)),
        &params,
        &analytic,
        &opts,
    )
}
