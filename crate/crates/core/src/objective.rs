//! The penalized search objective and the evaluator contract.
//!
//! The score of a sample is `eps_loss * l_sc + eps_lat * penalty(T)`, where
//! `l_sc` averages the loss over a set of dropout rates emulating packet
//! loss at the split boundary, and the penalty is the latency excess over
//! the threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latency::{penalty_ms, LatencyEval, LatencyModel};
use crate::space::{self, ArchSample, SearchSpaceSpec};

/// Weights, threshold, and the dropout-rate set of the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub eps_loss: f64,
    pub eps_lat: f64,
    pub t_th_ms: f64,
    /// Rates averaged by `l_sc`.
    pub dropout_rates: Vec<f64>,
    /// Single rate used by the weight-training approximation.
    pub train_dropout_rate: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            eps_loss: 1.0,
            eps_lat: 1.0,
            t_th_ms: 30.0,
            dropout_rates: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            train_dropout_rate: 0.5,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_loss >= 0.0) || !(self.eps_lat >= 0.0) {
            return Err(Error::config("objective.eps", "weights must be >= 0"));
        }
        if !self.t_th_ms.is_finite() {
            return Err(Error::config("objective.t_th_ms", "must be finite"));
        }
        if self.dropout_rates.is_empty() {
            return Err(Error::config("objective.dropout_rates", "must be non-empty"));
        }
        for &p in self
            .dropout_rates
            .iter()
            .chain(std::iter::once(&self.train_dropout_rate))
        {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(
                    "objective.dropout_rates",
                    format!("rate {p} outside [0, 1)"),
                ));
            }
        }
        Ok(())
    }
}

/// Shared batch index and base seed for one evaluation. All dropout-rate
/// evaluations inside a single `l_sc` call reuse the same context, so the
/// rate is the only varying factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCtx {
    pub batch: u64,
    pub seed: u64,
}

/// Produces a loss for (sample, dropout rate) over frozen weights. The same
/// (sample, rate, context) must always return the same loss, and evaluation
/// must be safe to call concurrently.
pub trait Evaluator: Sync {
    fn eval_loss(&self, sample: &ArchSample, rate: f64, ctx: &EvalCtx) -> Result<f64>;
}

/// Dropout-averaged loss: mean of `eval_loss` over the rate set.
pub fn l_sc(
    evaluator: &dyn Evaluator,
    sample: &ArchSample,
    rates: &[f64],
    ctx: &EvalCtx,
) -> Result<f64> {
    if rates.is_empty() {
        return Err(Error::config("dropout_rates", "must be non-empty"));
    }
    let mut total = 0.0;
    for &rate in rates {
        total += evaluator.eval_loss(sample, rate, ctx)?;
    }
    Ok(total / rates.len() as f64)
}

/// The four components of one objective evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub loss: f64,
    pub latency: LatencyEval,
    pub penalty_ms: f64,
    pub combined: f64,
}

/// Full objective of one sample: dropout-averaged loss plus the weighted
/// latency penalty.
pub fn objective(
    evaluator: &dyn Evaluator,
    sample: &ArchSample,
    latency_model: &LatencyModel,
    space: &SearchSpaceSpec,
    config: &ObjectiveConfig,
    ctx: &EvalCtx,
) -> Result<ObjectiveBreakdown> {
    let loss = l_sc(evaluator, sample, &config.dropout_rates, ctx)?;
    let latency = latency_model.end_to_end(sample, space)?;
    let penalty = penalty_ms(latency.total_ms, config.t_th_ms);
    Ok(ObjectiveBreakdown {
        loss,
        latency,
        penalty_ms: penalty,
        combined: config.eps_loss * loss + config.eps_lat * penalty,
    })
}

/// How the surrogate's loss degrades with the drop rate: `g(p) = scale * p^power`,
/// zero at p = 0 and non-decreasing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationCurve {
    pub scale: f64,
    pub power: f64,
}

impl DegradationCurve {
    pub fn apply(&self, rate: f64) -> f64 {
        if rate == 0.0 {
            0.0
        } else {
            self.scale * rate.powf(self.power)
        }
    }
}

/// How sensitive a sample is to element drops at its split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SensitivityModel {
    /// All samples equally sensitive.
    Constant { value: f64 },
    /// Narrow boundaries are more fragile: `scale / n_h`.
    InverseIntermediate { scale: f64 },
}

/// Declarative definition of a tabular surrogate, loaded from JSON. Scores
/// are synthetic stand-ins for trained accuracy, factorized per layer so
/// that exhaustive enumeration can verify them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularSpec {
    /// One score per (layer, candidate), added into the base loss.
    pub layer_scores: Vec<Vec<f64>>,
    /// One score per split position.
    pub split_scores: Vec<f64>,
    pub degradation: DegradationCurve,
    pub sensitivity: SensitivityModel,
}

impl TabularSpec {
    pub fn from_json(text: &str) -> Result<TabularSpec> {
        Ok(serde_json::from_str(text)?)
    }
}

/// A deterministic table-backed evaluator:
/// `loss(sample, p) = base(sample) + g(p) * sensitivity(sample)` with
/// `base = sum of per-layer scores + split score`.
#[derive(Debug, Clone)]
pub struct TabularEvaluator {
    space: SearchSpaceSpec,
    spec: TabularSpec,
}

impl TabularEvaluator {
    pub fn new(space: SearchSpaceSpec, spec: TabularSpec) -> Result<TabularEvaluator> {
        if spec.layer_scores.len() != space.layers.len() {
            return Err(Error::config(
                "tabular.layer_scores",
                format!(
                    "{} rows for {} layers",
                    spec.layer_scores.len(),
                    space.layers.len()
                ),
            ));
        }
        for (index, (scores, layer)) in spec.layer_scores.iter().zip(&space.layers).enumerate() {
            if scores.len() != layer.candidates.len() {
                return Err(Error::config(
                    format!("tabular.layer_scores[{index}]"),
                    format!(
                        "{} scores for {} candidates",
                        scores.len(),
                        layer.candidates.len()
                    ),
                ));
            }
        }
        if spec.split_scores.len() != space.split_candidates.len() {
            return Err(Error::config(
                "tabular.split_scores",
                format!(
                    "{} scores for {} split candidates",
                    spec.split_scores.len(),
                    space.split_candidates.len()
                ),
            ));
        }
        if spec.degradation.scale < 0.0 || spec.degradation.power <= 0.0 {
            return Err(Error::config(
                "tabular.degradation",
                "scale must be >= 0 and power > 0",
            ));
        }
        Ok(TabularEvaluator { space, spec })
    }

    pub fn base_loss(&self, sample: &ArchSample) -> Result<f64> {
        self.space.validate_sample(sample)?;
        let mut base = self.spec.split_scores[sample.split_index()];
        for (scores, &choice) in self.spec.layer_scores.iter().zip(sample.layer_choices()) {
            base += scores[choice];
        }
        Ok(base)
    }

    fn sensitivity(&self, sample: &ArchSample) -> Result<f64> {
        match self.spec.sensitivity {
            SensitivityModel::Constant { value } => Ok(value),
            SensitivityModel::InverseIntermediate { scale } => {
                let n = space::intermediate_size(sample, &self.space)?;
                Ok(scale / n as f64)
            }
        }
    }
}

impl Evaluator for TabularEvaluator {
    fn eval_loss(&self, sample: &ArchSample, rate: f64, _ctx: &EvalCtx) -> Result<f64> {
        Ok(self.base_loss(sample)? + self.spec.degradation.apply(rate) * self.sensitivity(sample)?)
    }
}

/// Test/diagnostic wrapper that counts objective-level evaluations.
pub struct CountingEvaluator<'a> {
    inner: &'a dyn Evaluator,
    calls: std::sync::atomic::AtomicU64,
}

impl<'a> CountingEvaluator<'a> {
    pub fn new(inner: &'a dyn Evaluator) -> Self {
        CountingEvaluator {
            inner,
            calls: std::sync::atomic::AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(std::sync::atomic::Ordering::Relaxed)
    }
}

impl Evaluator for CountingEvaluator<'_> {
    fn eval_loss(&self, sample: &ArchSample, rate: f64, ctx: &EvalCtx) -> Result<f64> {
        self.calls
            .fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.inner.eval_loss(sample, rate, ctx)
    }
}
