//! Epoch-level task weighting from per-task loss histories.
//!
//! * `dws`: `λ_i(e) = K/(1+β) · (ε_i/Σε + β · L_i/ΣL)` with `ε_i = L_i(e−1)/L_i(e−2)`
//! * `dwa`: `λ_i(e) = K · softmax(ε/T)_i`
//! * `uniform`: `λ_i = 1`
//!
//! Epochs are 1-indexed. Weights at epoch 1 are all ones; at epoch 2 the
//! descent ratios are taken as 1 because `L(0)` does not exist.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Dws,
    Dwa,
    Uniform,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Dws => "dws",
            Strategy::Dwa => "dwa",
            Strategy::Uniform => "uniform",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dws" => Ok(Strategy::Dws),
            "dwa" => Ok(Strategy::Dwa),
            "uniform" => Ok(Strategy::Uniform),
            other => Err(Error::Config(format!("unknown weighting strategy {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightingConfig {
    pub strategy: Strategy,
    /// Loss-scale mix of `dws`.
    pub beta: f64,
    /// Softmax temperature of `dwa`.
    pub temperature: f64,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Dws,
            beta: 0.5,
            temperature: 2.0,
        }
    }
}

impl WeightingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta {} must be finite and >= 0", self.beta)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        Ok(())
    }

    /// Weights for epoch `e` under the configured strategy.
    pub fn weights<T: Scalar>(&self, history: &TaskLossHistory<T>, e: usize) -> Result<Vec<T>> {
        match self.strategy {
            Strategy::Dws => dws_weights(history, e, T::lit(self.beta)),
            Strategy::Dwa => dwa_weights(history, e, T::lit(self.temperature)),
            Strategy::Uniform => uniform_weights(history, e),
        }
    }
}

/// Per-task losses of consecutive epochs, starting at epoch 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLossHistory<T> {
    tasks: usize,
    epochs: Vec<Vec<T>>,
}

impl<T: Scalar> TaskLossHistory<T> {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            epochs: Vec::new(),
        }
    }

    pub fn from_epochs(epochs: Vec<Vec<T>>) -> Result<Self> {
        let tasks = epochs
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Validation("empty loss history".into()))?;
        let mut h = Self::new(tasks);
        for row in epochs {
            h.push(row)?;
        }
        Ok(h)
    }

    /// Appends the next epoch. Losses must be finite and strictly positive.
    pub fn push(&mut self, losses: Vec<T>) -> Result<()> {
        if losses.len() != self.tasks {
            return Err(Error::Validation(format!(
                "{} losses for {} tasks",
                losses.len(),
                self.tasks
            )));
        }
        if let Some((i, v)) = losses
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > T::zero()) || !v.is_finite())
        {
            return Err(Error::Validation(format!(
                "loss of task {i} at epoch {} is {v}; losses must be positive",
                self.epochs.len() + 1
            )));
        }
        self.epochs.push(losses);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    /// Number of recorded epochs.
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// Losses of epoch `e` (1-indexed).
    pub fn epoch(&self, e: usize) -> Result<&[T]> {
        e.checked_sub(1)
            .and_then(|i| self.epochs.get(i))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Precondition(format!("epoch {e} not in history of {} epochs", self.epochs.len())))
    }

    /// Multiplies every loss by `c`.
    pub fn scaled(&self, c: T) -> Result<Self> {
        Self::from_epochs(
            self.epochs
                .iter()
                .map(|row| row.iter().map(|&v| v * c).collect())
                .collect(),
        )
    }

    fn require(&self, e: usize) -> Result<()> {
        if e == 0 {
            return Err(Error::Precondition("epochs are numbered from 1".into()));
        }
        if self.epochs.len() < e - 1 {
            return Err(Error::Precondition(format!(
                "weights for epoch {e} need {} recorded epochs, history has {}",
                e - 1,
                self.epochs.len()
            )));
        }
        Ok(())
    }
}

/// `ε_i(e−1) = L_i(e−1) / L_i(e−2)`, all ones at `e = 2`.
pub fn relative_descent<T: Scalar>(history: &TaskLossHistory<T>, e: usize) -> Result<Vec<T>> {
    if e < 2 {
        return Err(Error::Precondition(format!("relative descent needs e >= 2, got {e}")));
    }
    history.require(e)?;
    if e == 2 {
        return Ok(vec![T::one(); history.tasks]);
    }
    let prev = history.epoch(e - 1)?;
    let before = history.epoch(e - 2)?;
    prev.iter()
        .zip(before)
        .map(|(&a, &b)| {
            if b == T::zero() {
                Err(Error::Validation("zero loss in descent denominator".into()))
            } else {
                Ok(a / b)
            }
        })
        .collect()
}

pub fn uniform_weights<T: Scalar>(history: &TaskLossHistory<T>, e: usize) -> Result<Vec<T>> {
    history.require(e)?;
    Ok(vec![T::one(); history.tasks])
}

pub fn dws_weights<T: Scalar>(history: &TaskLossHistory<T>, e: usize, beta: T) -> Result<Vec<T>> {
    history.require(e)?;
    if e == 1 {
        return Ok(vec![T::one(); history.tasks]);
    }
    let eps = relative_descent(history, e)?;
    let losses = history.epoch(e - 1)?;
    let eps_sum: T = eps.iter().copied().sum();
    let loss_sum: T = losses.iter().copied().sum();
    let k = T::from_usize_lossy(history.tasks);
    let lead = k / (T::one() + beta);
    Ok(eps
        .iter()
        .zip(losses)
        .map(|(&d, &l)| lead * (d / eps_sum + beta * l / loss_sum))
        .collect())
}

pub fn dwa_weights<T: Scalar>(history: &TaskLossHistory<T>, e: usize, temperature: T) -> Result<Vec<T>> {
    history.require(e)?;
    if e <= 2 {
        return Ok(vec![T::one(); history.tasks]);
    }
    let eps = relative_descent(history, e)?;
    let max = eps.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = eps.iter().map(|&d| ((d - max) / temperature).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let k = T::from_usize_lossy(history.tasks);
    Ok(exps.iter().map(|&x| k * x / total).collect())
}

/// Parses a replay file: one line per epoch, whitespace-separated positive
/// losses, `#` starts a comment.
pub fn parse_replay(text: &str) -> Result<TaskLossHistory<f64>> {
    let mut history: Option<TaskLossHistory<f64>> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let values = content
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("not a number: {tok:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let h = history.get_or_insert_with(|| TaskLossHistory::new(values.len()));
        h.push(values).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
    }
    history.ok_or(Error::Parse {
        line: 0,
        message: "replay file contains no epochs".into(),
    })
}

pub fn format_replay(history: &TaskLossHistory<f64>) -> String {
    let mut out = String::from("# per-task mean training loss, one epoch per line\n");
    for row in &history.epochs {
        let line: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Losses `L_i(e) = initial_i · rate_i^(e−1)` for `epochs` epochs.
pub fn geometric_trajectory(initial: &[f64], rate: &[f64], epochs: usize) -> Result<TaskLossHistory<f64>> {
    if initial.len() != rate.len() {
        return Err(Error::Validation("initial losses and rates differ in length".into()));
    }
    TaskLossHistory::from_epochs(
        (0..epochs)
            .map(|e| initial.iter().zip(rate).map(|(&l, &r)| l * r.powi(e as i32)).collect())
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRow {
    pub epoch: usize,
    pub strategy: Strategy,
    /// Task index, or `None` for the per-epoch sum row.
    pub task: Option<usize>,
    pub lambda: f64,
    pub loss: f64,
    pub weighted_loss: f64,
}

/// Weights every recorded epoch under each strategy as a trainer would have.
pub fn simulate_weighting(
    history: &TaskLossHistory<f64>,
    strategies: &[Strategy],
    beta: f64,
    temperature: f64,
) -> Result<Vec<SimRow>> {
    if history.len() < 3 {
        return Err(Error::Precondition(format!(
            "simulation needs at least 3 epochs, got {}",
            history.len()
        )));
    }
    let mut rows = Vec::new();
    for e in 1..=history.len() {
        let losses = history.epoch(e)?;
        for &strategy in strategies {
            let cfg = WeightingConfig {
                strategy,
                beta,
                temperature,
            };
            cfg.validate()?;
            let lambda = cfg.weights(history, e)?;
            let mut sum = (0.0, 0.0, 0.0);
            for (i, (&w, &l)) in lambda.iter().zip(losses).enumerate() {
                rows.push(SimRow {
                    epoch: e,
                    strategy,
                    task: Some(i),
                    lambda: w,
                    loss: l,
                    weighted_loss: w * l,
                });
                sum = (sum.0 + w, sum.1 + l, sum.2 + w * l);
            }
            rows.push(SimRow {
                epoch: e,
                strategy,
                task: None,
                lambda: sum.0,
                loss: sum.1,
                weighted_loss: sum.2,
            });
        }
    }
    Ok(rows)
}

pub const TABLE_HEADER: &str = "epoch,strategy,task,lambda,loss,weighted_loss";

/// CSV table; per-epoch sum rows use the task label `sum`. Floats are written
/// in shortest round-trip form.
pub fn format_table(rows: &[SimRow]) -> String {
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for r in rows {
        let task = r.task.map_or_else(|| "sum".to_string(), |t| t.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch,
            r.strategy.name(),
            task,
            r.lambda,
            r.loss,
            r.weighted_loss
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Strategy;
    use proptest::prelude::{prop, prop_assert, proptest};

    fn hist(rows: &[&[f64]]) -> TaskLossHistory<f64> {
        TaskLossHistory::from_epochs(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn descent_examples() {
        let h = hist(&[&[2.0], &[1.0]]);
        assert_eq!(relative_descent(&h, 3).unwrap(), vec![0.5]);
        let c = hist(&[&[0.7, 0.2], &[0.7, 0.2]]);
        assert_eq!(relative_descent(&c, 3).unwrap(), vec![1.0, 1.0]);
        assert_eq!(relative_descent(&c, 2).unwrap(), vec![1.0, 1.0]);
        assert!(matches!(relative_descent(&c, 1), Err(Error::Precondition(_))));
        assert!(matches!(relative_descent(&c, 4), Err(Error::Precondition(_))));
    }

    #[test]
    fn dws_examples() {
        let h = hist(&[&[2.0, 1.0], &[1.0, 1.0]]);
        let l = dws_weights(&h, 3, 0.5).unwrap();
        assert!((l[0] - 7.0 / 9.0).abs() < 1e-12);
        assert!((l[1] - 11.0 / 9.0).abs() < 1e-12);

        let empty = TaskLossHistory::<f64>::new(4);
        assert_eq!(dws_weights(&empty, 1, 0.5).unwrap(), vec![1.0; 4]);
        assert!(dws_weights(&empty, 2, 0.5).is_err());

        let flat = hist(&[&[0.3; 5], &[0.3; 5], &[0.3; 5]]);
        for e in 1..=4 {
            for w in dws_weights(&flat, e, 0.5).unwrap() {
                assert!((w - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dwa_examples() {
        let h = hist(&[&[2.0, 1.0], &[1.0, 1.0]]);
        let l = dwa_weights(&h, 3, 2.0).unwrap();
        let (a, b) = (0.25f64.exp(), 0.5f64.exp());
        assert!((l[0] - 2.0 * a / (a + b)).abs() < 1e-12);
        assert!((l[0] - 0.8756).abs() < 1e-4);
        assert!((l[1] - 1.1244).abs() < 1e-4);
        let same = hist(&[&[4.0, 2.0], &[2.0, 1.0]]);
        assert_eq!(dwa_weights(&same, 3, 2.0).unwrap(), vec![1.0, 1.0]);
        assert_eq!(dwa_weights(&same, 2, 2.0).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn larger_loss_gets_more_weight_under_dws_only() {
        let h = geometric_trajectory(&[2.0, 1.0], &[0.8, 0.8], 6).unwrap();
        let rows = simulate_weighting(&h, &[Strategy::Dws, Strategy::Dwa, Strategy::Uniform], 0.5, 2.0).unwrap();
        for r in rows.iter().filter(|r| r.epoch >= 2 && r.task.is_some()) {
            match (r.strategy, r.task) {
                (Strategy::Dws, Some(0)) => assert!(r.lambda > 1.0),
                (Strategy::Dws, Some(1)) => assert!(r.lambda < 1.0),
                (_, _) => assert!((r.lambda - 1.0).abs() < 1e-12),
            }
        }
    }

    #[test]
    fn replay_parsing() {
        let h = parse_replay("# header\n1.0 2.0\n\n0.5 1.5 # trailing\n0.25 1.0\n").unwrap();
        assert_eq!(h.len(), 3);
        assert_eq!(h.epoch(2).unwrap(), &[0.5, 1.5]);
        let bad = parse_replay("1.0 2.0\n1.0 x\n");
        assert!(matches!(bad, Err(Error::Parse { line: 2, .. })));
        let short = parse_replay("1.0 2.0\n\n1.0\n");
        assert!(matches!(short, Err(Error::Parse { line: 3, .. })));
        let neg = parse_replay("1.0 -2.0\n");
        assert!(matches!(neg, Err(Error::Parse { line: 1, .. })));
        assert!(parse_replay("# nothing\n").is_err());
        assert_eq!(parse_replay(&format_replay(&h)).unwrap(), h);
    }

    #[test]
    fn simulation_needs_three_epochs() {
        let h = hist(&[&[1.0], &[0.5]]);
        assert!(simulate_weighting(&h, &[Strategy::Dws], 0.5, 2.0).is_err());
    }

    #[test]
    fn table_format() {
        let h = hist(&[&[1.0, 2.0], &[0.5, 1.0], &[0.25, 1.0]]);
        let rows = simulate_weighting(&h, &[Strategy::Uniform], 0.5, 2.0).unwrap();
        let table = format_table(&rows);
        let mut lines = table.lines();
        assert_eq!(lines.next(), Some(TABLE_HEADER));
        assert_eq!(lines.next(), Some("1,uniform,0,1,1,1"));
        assert_eq!(lines.next(), Some("1,uniform,1,1,2,2"));
        assert_eq!(lines.next(), Some("1,uniform,sum,2,3,3"));
    }

    fn positive_history() -> impl proptest::strategy::Strategy<Value = TaskLossHistory<f64>> {
        (2usize..12, 2usize..6).prop_flat_map(|(k, e)| {
            prop::collection::vec(prop::collection::vec(0.01f64..10.0, k), e)
                .prop_map(|rows| TaskLossHistory::from_epochs(rows).unwrap())
        })
    }
    use proptest::strategy::Strategy as Strategy_;

    proptest! {
        #[test]
        fn dws_sums_to_k(h in positive_history(), beta in 0.0f64..5.0) {
            for e in 1..=h.len() + 1 {
                let l = dws_weights(&h, e, beta).unwrap();
                let s: f64 = l.iter().sum();
                prop_assert!((s - h.tasks() as f64).abs() < 1e-9);
                prop_assert!(l.iter().all(|&w| w > 0.0));
            }
        }

        #[test]
        fn dwa_sums_to_k(h in positive_history(), t in 0.1f64..5.0) {
            let e = h.len() + 1;
            let s: f64 = dwa_weights(&h, e, t).unwrap().iter().sum();
            prop_assert!((s - h.tasks() as f64).abs() < 1e-9);
        }

        #[test]
        fn dws_scale_invariant(h in positive_history(), c in 0.01f64..100.0, beta in 0.0f64..3.0) {
            let scaled = h.scaled(c).unwrap();
            let e = h.len() + 1;
            let a = dws_weights(&h, e, beta).unwrap();
            let b = dws_weights(&scaled, e, beta).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn dws_monotone_in_loss(losses in prop::collection::vec(0.1f64..5.0, 3..8), beta in 0.05f64..3.0) {
            // equal descent ratios; higher last-epoch loss → higher weight
            let prev: Vec<f64> = losses.iter().map(|l| l * 2.0).collect();
            let h = TaskLossHistory::from_epochs(vec![prev, losses.clone()]).unwrap();
            let w = dws_weights(&h, 3, beta).unwrap();
            for i in 0..losses.len() {
                for j in 0..losses.len() {
                    if losses[i] > losses[j] {
                        prop_assert!(w[i] > w[j]);
                    }
                }
            }
        }

        #[test]
        fn dws_monotone_in_descent(ratios in prop::collection::vec(0.2f64..2.0, 3..8), beta in 0.0f64..3.0) {
            // equal last-epoch losses; slower descent → higher weight
            let last = vec![1.0; ratios.len()];
            let prev: Vec<f64> = ratios.iter().map(|r| 1.0 / r).collect();
            let h = TaskLossHistory::from_epochs(vec![prev, last]).unwrap();
            let w = dws_weights(&h, 3, beta).unwrap();
            for i in 0..ratios.len() {
                for j in 0..ratios.len() {
                    if ratios[i] > ratios[j] * (1.0 + 1e-9) {
                        prop_assert!(w[i] > w[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn beta_limits() {
        let h = hist(&[&[2.0, 1.0, 4.0], &[1.0, 0.9, 1.0]]);
        let eps = relative_descent(&h, 3).unwrap();
        let eps_sum: f64 = eps.iter().sum();
        let pure_eps: Vec<f64> = eps.iter().map(|d| 3.0 * d / eps_sum).collect();
        for (w, e) in dws_weights(&h, 3, 0.0).unwrap().iter().zip(&pure_eps) {
            assert!((w - e).abs() < 1e-15);
        }
        let loss_sum = 2.9;
        let big = dws_weights(&h, 3, 1e6).unwrap();
        for (w, l) in big.iter().zip([1.0, 0.9, 1.0]) {
            assert!((w - 3.0 * l / loss_sum).abs() < 1e-4);
        }
    }
}
