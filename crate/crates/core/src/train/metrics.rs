use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::scalar::Scalar;
use crate::tape::ParamSet;

/// One row of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Epoch-mean focal loss per attribute, before weighting.
    pub task_losses: Vec<f64>,
    pub lambda: Vec<f64>,
    pub penalty: f64,
    pub total_loss: f64,
    pub accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    /// Wall clock; the only field that is not a function of config and seed.
    pub seconds: f64,
}

impl MetricsRecord {
    /// Copy with the wall-clock field cleared.
    pub fn without_timing(&self) -> Self {
        Self {
            seconds: 0.0,
            ..self.clone()
        }
    }
}

pub fn write_jsonl(w: &mut impl Write, records: &[MetricsRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(r: impl BufRead) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_attribute: Vec<f64>,
    pub mean: f64,
}

/// Class 1 only when it is strictly more probable; ties go to class 0.
pub fn predict_class<T: Scalar>(p: &[T; 2]) -> u8 {
    u8::from(p[1] > p[0])
}

/// Per-attribute accuracy of labels against predicted classes.
pub fn accuracy_from_predictions(predictions: &[Vec<u8>], labels: &[Vec<u8>]) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty dataset".into()));
    }
    let k = labels[0].len();
    let mut correct = vec![0usize; k];
    for (p, y) in predictions.iter().zip(labels) {
        if p.len() != k || y.len() != k {
            return Err(Error::Shape(format!("row of {} predictions / {} labels, expected {k}", p.len(), y.len())));
        }
        for ((c, a), b) in correct.iter_mut().zip(p).zip(y) {
            *c += usize::from(a == b);
        }
    }
    let n = predictions.len() as f64;
    let per_attribute: Vec<f64> = correct.iter().map(|&c| c as f64 / n).collect();
    let mean = per_attribute.iter().sum::<f64>() / k as f64;
    Ok(EvalReport { per_attribute, mean })
}

/// Eval-mode argmax accuracy per attribute and their unweighted mean.
pub fn evaluate<T: Scalar>(model: &Model, params: &ParamSet<T>, data: &Dataset<T>) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty dataset".into()));
    }
    let k = model.grouping().num_attributes();
    if let Some(s) = data.samples.iter().find(|s| s.labels.len() != k) {
        return Err(Error::Shape(format!("sample with {} labels for {k} attributes", s.labels.len())));
    }
    let predictions = data
        .samples
        .par_iter()
        .map(|s| {
            let out = model.forward(params, &s.image, Mode::Eval)?;
            Ok(out.probs.iter().map(predict_class).collect())
        })
        .collect::<Result<Vec<Vec<u8>>>>()?;
    let labels: Vec<Vec<u8>> = data.samples.iter().map(|s| s.labels.clone()).collect();
    accuracy_from_predictions(&predictions, &labels)
}
