//! SGD training with per-epoch dynamic task weighting, evaluation, output
//! files, the model gradient check and the parameter audit.

mod audit;
mod check;
mod config;
mod metrics;

pub use audit::params_audit;
pub use check::{model_gradcheck, GRADCHECK_TOLERANCE};
pub use config::{DataSource, LossSource, TrainConfig};
pub use metrics::{
    accuracy_from_predictions, evaluate, predict_class, read_jsonl, write_jsonl, EvalReport, MetricsRecord,
};

use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{augment, generate_range, load_dataset, Dataset};
use crate::dws::{format_replay, TaskLossHistory};
use crate::error::{shape_err, Error, Result};
use crate::losses::{focal_loss, loss_on_tape};
use crate::model::{Mode, Model};
use crate::persist::save_model;
use crate::scalar::Scalar;
use crate::tape::{Gradients, ParamSet, Tape};
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MODEL_FILE: &str = "model.bin";
/// Per-task epoch losses in the replay format read by `dws-sim`.
pub const TASK_LOSSES_FILE: &str = "task_losses.txt";

/// `p ← p − lr · g` for every parameter.
pub fn sgd_step<T: Scalar>(params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: T) -> Result<()> {
    if grads.len() != params.len() {
        return shape_err(format!("{} gradients for {} parameters", grads.len(), params.len()));
    }
    for (p, g) in params.tensors_mut().iter_mut().zip(grads) {
        p.add_scaled(g, -lr)?;
    }
    Ok(())
}

/// SplitMix64 finaliser folded over `parts`; derives independent stream seeds.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_DROPOUT: u64 = 3;
const TAG_AUGMENT: u64 = 4;

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Model,
    pub params: ParamSet<T>,
    pub metrics: Vec<MetricsRecord>,
    /// Epoch-mean per-task losses that fed the weighting.
    pub history: TaskLossHistory<f64>,
}

impl<T: Scalar> TrainOutcome<T> {
    /// Writes `metrics.jsonl`, `model.bin` and `task_losses.txt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(fs::File::create(dir.join(METRICS_FILE))?);
        write_jsonl(&mut w, &self.metrics)?;
        drop(w);
        save_model(dir.join(MODEL_FILE), &self.model, &self.params)?;
        fs::write(dir.join(TASK_LOSSES_FILE), format_replay(&self.history))?;
        Ok(())
    }
}

/// Training split and optional held-out split named by the config.
pub fn load_data<T: Scalar>(config: &TrainConfig) -> Result<(Dataset<T>, Option<Dataset<T>>)> {
    match &config.data {
        DataSource::Synthetic { train, test, spec } => {
            let tr = generate_range(spec, 0, *train)?;
            let te = if *test > 0 {
                Some(generate_range(spec, *train as u64, *test)?)
            } else {
                None
            };
            Ok((tr, te))
        }
        DataSource::Persisted { train, test } => {
            let tr = load_dataset(train)?;
            let te = test.as_ref().map(load_dataset).transpose()?;
            Ok((tr, te))
        }
    }
}

pub fn train<T: Scalar>(config: &TrainConfig) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let (tr, te) = load_data(config)?;
    train_on(config, &tr, te.as_ref())
}

struct SampleResult<T> {
    grads: Gradients<T>,
    focal: Vec<f64>,
    penalty: f64,
    objective: f64,
}

fn param_norms<T: Scalar>(params: &ParamSet<T>) -> String {
    params
        .iter()
        .map(|(n, t)| format!("{n}={:.4e}", t.norm().to_f64_lossy()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Mean focal loss per task over `data`, eval mode.
fn dataset_task_losses<T: Scalar>(
    model: &Model,
    params: &ParamSet<T>,
    data: &Dataset<T>,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    let rows = data
        .samples
        .par_iter()
        .map(|s| {
            let out = model.forward(params, &s.image, Mode::Eval)?;
            let f = focal_loss(&out.probs, &s.labels, &config.loss)?;
            Ok(f.per_task.iter().map(|v| v.to_f64_lossy()).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_rows(&rows))
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; rows.first().map_or(0, Vec::len)];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    let n = rows.len() as f64;
    acc.iter().map(|a| a / n).collect()
}

/// Trains on `train`; accuracy is reported on `test` when given, else on `train`.
pub fn train_on<T: Scalar>(
    config: &TrainConfig,
    train: &Dataset<T>,
    test: Option<&Dataset<T>>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let model = Model::new(config.model.clone(), train.spec.grouping.clone())?;
    let k = model.grouping().num_attributes();
    let mut params: ParamSet<T> = model.init_params(derive_seed(config.seed, &[TAG_INIT]));
    let mut history = TaskLossHistory::<f64>::new(k);
    let mut metrics = Vec::with_capacity(config.epochs);
    let lr = T::lit(config.learning_rate);
    let started = Instant::now();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        let lambda64 = config.weighting.weights(&history, epoch)?;
        let lambda: Vec<T> = lambda64.iter().map(|&l| T::lit(l)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_SHUFFLE, epoch as u64]));
        order.shuffle(&mut rng);

        let mut focal_sum = vec![0.0f64; k];
        let mut penalty_sum = 0.0;
        let mut objective_sum = 0.0;
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            let scale = T::lit(1.0 / batch.len() as f64);
            let results = batch
                .par_iter()
                .map(|&idx| {
                    let sample = &train.samples[idx];
                    let tags = [epoch as u64, idx as u64];
                    let image = if config.augment {
                        let mut arng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[TAG_AUGMENT, tags[0], tags[1]]));
                        augment(&sample.image, &mut arng)
                    } else {
                        sample.image.clone()
                    };
                    let mut tape = Tape::with_params(&params);
                    let x = tape.constant(image);
                    let mode = Mode::Train {
                        dropout_seed: derive_seed(config.seed, &[TAG_DROPOUT, tags[0], tags[1]]),
                    };
                    let vars = model.forward_on_tape(&mut tape, x, mode)?;
                    let loss = loss_on_tape(&mut tape, &vars, &sample.labels, &lambda, &config.loss, scale)?;
                    let grads = tape.backward(loss.total)?;
                    Ok(SampleResult {
                        grads,
                        focal: loss.focal.iter().map(|&v| tape.value(v).data()[0].to_f64_lossy()).collect(),
                        penalty: loss.penalty.map_or(0.0, |p| tape.value(p).data()[0].to_f64_lossy()),
                        objective: tape.value(loss.total).data()[0].to_f64_lossy() / scale.to_f64_lossy(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;

            // Reduce in batch order so the sum does not depend on the thread count.
            let mut grads = Gradients::zeros_like(&params);
            for r in &results {
                if !r.objective.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_no,
                        norms: param_norms(&params),
                    });
                }
                grads.accumulate(&r.grads, T::one())?;
                for (a, v) in focal_sum.iter_mut().zip(&r.focal) {
                    *a += v;
                }
                penalty_sum += r.penalty;
                objective_sum += r.objective;
            }
            let dense = grads.dense(&params);
            sgd_step(&mut params, &dense, lr)?;
        }

        let n = train.len() as f64;
        let train_losses: Vec<f64> = focal_sum
            .iter()
            // An all-zero mean would stall the descent ratio; keep it representable.
            .map(|s| (s / n).max(f64::MIN_POSITIVE))
            .collect();
        let weighting_losses = match (config.weighting_losses, test) {
            (LossSource::Test, Some(te)) => dataset_task_losses(&model, &params, te, config)?
                .into_iter()
                .map(|v| v.max(f64::MIN_POSITIVE))
                .collect(),
            (LossSource::Test, None) => {
                return Err(Error::Config("test-loss weighting needs a test split".into()))
            }
            (LossSource::Train, _) => train_losses.clone(),
        };
        history.push(weighting_losses)?;

        let report = evaluate(&model, &params, test.unwrap_or(train))?;
        let record = MetricsRecord {
            epoch,
            task_losses: train_losses,
            lambda: lambda64,
            penalty: penalty_sum / n,
            total_loss: objective_sum / n,
            accuracy: report.per_attribute,
            mean_accuracy: report.mean,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.6} penalty {:.6} mean accuracy {:.4} ({:.1}s)",
            record.total_loss,
            record.penalty,
            record.mean_accuracy,
            record.seconds
        );
        metrics.push(record);
    }

    Ok(TrainOutcome {
        model,
        params,
        metrics,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;
    use crate::dws::Strategy;
    use crate::grouping::AttributeGrouping;

    #[test]
    fn sgd_examples() {
        let mut p = ParamSet::new(vec![("w".into(), Tensor::scalar(1.0f64))]).unwrap();
        sgd_step(&mut p, &[Tensor::scalar(2.0)], 0.001).unwrap();
        assert_eq!(p.tensors()[0].data()[0], 0.998);
        sgd_step(&mut p, &[Tensor::scalar(0.0)], 0.001).unwrap();
        assert_eq!(p.tensors()[0].data()[0], 0.998);
        assert!(sgd_step(&mut p, &[Tensor::zeros(&[2])], 0.1).is_err());
        assert!(sgd_step(&mut p, &[], 0.1).is_err());
    }

    #[test]
    fn sgd_quadratic_bowl() {
        let mut p = ParamSet::new(vec![("w".into(), Tensor::scalar(1.0f64))]).unwrap();
        for _ in 0..50 {
            let mut tape = Tape::with_params(&p);
            let w = tape.param_named("w").unwrap();
            let sq = tape.mul(w, w).unwrap();
            let g = tape.backward(sq).unwrap().dense(&p);
            sgd_step(&mut p, &g, 0.1).unwrap();
        }
        let w = p.tensors()[0].data()[0];
        assert!((w - 0.8f64.powi(50)).abs() < 1e-15);
        assert!(w.abs() < 1e-4);
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(0, &[1, 2]);
        assert_eq!(a, derive_seed(0, &[1, 2]));
        assert_ne!(a, derive_seed(0, &[2, 1]));
        assert_ne!(a, derive_seed(1, &[1, 2]));
    }

    fn small_config(epochs: usize) -> TrainConfig {
        let mut cfg = TrainConfig::tiny();
        cfg.epochs = epochs;
        cfg.batch_size = 4;
        cfg.learning_rate = 0.05;
        if let DataSource::Synthetic { train, test, .. } = &mut cfg.data {
            *train = 16;
            *test = 8;
        }
        cfg
    }

    #[test]
    fn first_epoch_weights_are_ones() {
        let out = train::<f64>(&small_config(1)).unwrap();
        assert_eq!(out.metrics.len(), 1);
        assert!(out.metrics[0].lambda.iter().all(|&l| l == 1.0));
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = small_config(3);
        let a = train::<f64>(&cfg).unwrap();
        let b = train::<f64>(&cfg).unwrap();
        let strip = |m: &[MetricsRecord]| m.iter().map(MetricsRecord::without_timing).collect::<Vec<_>>();
        assert_eq!(strip(&a.metrics), strip(&b.metrics));
        assert_eq!(a.params.tensors(), b.params.tensors());
        let mut other = cfg.clone();
        other.seed = 1;
        let c = train::<f64>(&other).unwrap();
        assert_ne!(a.params.tensors(), c.params.tensors());
    }

    #[test]
    fn logged_weights_replay_from_history() {
        let out = train::<f64>(&small_config(4)).unwrap();
        let cfg = small_config(4).weighting;
        for rec in &out.metrics {
            assert_eq!(cfg.weights(&out.history, rec.epoch).unwrap(), rec.lambda);
            let sum: f64 = rec.lambda.iter().sum();
            assert!((sum - 6.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_noise_loss_decreases() {
        let mut cfg = small_config(6);
        if let DataSource::Synthetic { spec, .. } = &mut cfg.data {
            spec.noise = 0.0;
        }
        let out = train::<f64>(&cfg).unwrap();
        assert!(out.metrics.last().unwrap().total_loss < out.metrics[0].total_loss);
    }

    #[test]
    fn uniform_and_f32_paths_run() {
        let mut cfg = small_config(2);
        cfg.weighting.strategy = Strategy::Uniform;
        let out = train::<f32>(&cfg).unwrap();
        assert!(out.metrics.iter().all(|r| r.lambda.iter().all(|&l| l == 1.0)));
        for r in &out.metrics {
            assert!(r.accuracy.iter().all(|a| (0.0..=1.0).contains(a)));
        }
    }

    #[test]
    fn diverging_run_reports_batch() {
        let mut cfg = small_config(2);
        cfg.learning_rate = 1e30;
        match train::<f64>(&cfg) {
            Err(Error::NonFiniteLoss { norms, .. }) => assert!(norms.contains("head.0.weight")),
            other => panic!("expected non-finite loss, got {:?}", other.map(|o| o.metrics)),
        }
    }

    #[test]
    fn evaluation_ignores_order() {
        let cfg = small_config(1);
        let out = train::<f64>(&cfg).unwrap();
        let (_, test) = load_data::<f64>(&cfg).unwrap();
        let mut test = test.unwrap();
        let a = evaluate(&out.model, &out.params, &test).unwrap();
        test.samples.reverse();
        let b = evaluate(&out.model, &out.params, &test).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_heads_predict_negative_class() {
        let grouping = AttributeGrouping::from_groups(
            None,
            vec![("G".into(), vec!["a".into(), "b".into()])],
        )
        .unwrap();
        let mut spec = SyntheticSpec::new(grouping.clone());
        spec.height = 16;
        spec.width = 16;
        let data = generate_range::<f64>(&spec, 0, 200).unwrap();
        let model = Model::new(crate::model::ModelConfig::tiny(), grouping).unwrap();
        let mut params: ParamSet<f64> = model.init_params(3);
        for (i, name) in params.names().to_vec().iter().enumerate() {
            if name.starts_with("head.") {
                params.tensors_mut()[i] = Tensor::zeros(params.tensors()[i].shape());
            }
        }
        let report = evaluate(&model, &params, &data).unwrap();
        for (a, acc) in report.per_attribute.iter().enumerate() {
            let negatives = data.samples.iter().filter(|s| s.labels[a] == 0).count();
            assert_eq!(*acc, negatives as f64 / 200.0);
        }
    }

    #[test]
    fn outputs_written() {
        let out = train::<f64>(&small_config(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        out.write(dir.path()).unwrap();
        let back = read_jsonl(std::io::BufReader::new(fs::File::open(dir.path().join(METRICS_FILE)).unwrap())).unwrap();
        assert_eq!(back, out.metrics);
        let replay = crate::dws::parse_replay(&fs::read_to_string(dir.path().join(TASK_LOSSES_FILE)).unwrap()).unwrap();
        assert_eq!(replay, out.history);
        let (_, params) = crate::persist::load_model::<f64>(dir.path().join(MODEL_FILE)).unwrap();
        assert_eq!(params.tensors(), out.params.tensors());
    }
}
