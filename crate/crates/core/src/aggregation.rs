//! Frame-to-clip pooling: max, mean, decision-level attention and the
//! global weighted average over a localization map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// `T x K` per-frame presence probabilities with their frame duration.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameProbMatrix {
    probs: Tensor,
    frame_duration: f64,
}

impl FrameProbMatrix {
    pub fn new(probs: Tensor, frame_duration: f64) -> Result<Self> {
        probs.expect_rank(2, "frame probabilities")?;
        if probs.shape()[0] == 0 || probs.shape()[1] == 0 {
            return Err(Error::Validation(
                "frame matrix needs T >= 1 and K >= 1".into(),
            ));
        }
        if let Some(v) = probs.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!(
                "frame probability {v} outside [0, 1]"
            )));
        }
        if !(frame_duration > 0.0 && frame_duration.is_finite()) {
            return Err(Error::Validation(format!(
                "frame duration must be positive, got {frame_duration}"
            )));
        }
        Ok(Self {
            probs,
            frame_duration,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], frame_duration: f64) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?, frame_duration)
    }

    pub fn frames(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn frame_duration(&self) -> f64 {
        self.frame_duration
    }

    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.probs.at2(t, k)
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.frames()).map(|t| self.get(t, k)).collect()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.probs
    }

    pub fn duration(&self) -> f64 {
        self.frames() as f64 * self.frame_duration
    }
}

/// Length-`K` clip-level presence probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipProbVector(Vec<f64>);

impl ClipProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!(
                "clip probability {v} outside [0, 1]"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `T x K` non-negative frame weights. Columns are normalized over time
/// by the aggregator.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights(Tensor);

impl AttentionWeights {
    pub fn new(weights: Tensor) -> Result<Self> {
        weights.expect_rank(2, "attention weights")?;
        if let Some(v) = weights
            .data()
            .iter()
            .find(|v| !(v.is_finite() && **v >= 0.0))
        {
            return Err(Error::Validation(format!(
                "attention weight {v} is not a finite non-negative value"
            )));
        }
        Ok(Self(weights))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    /// Weights from linear scores via a softmax over time per class.
    pub fn from_scores(scores: &Tensor) -> Result<Self> {
        Self::new(crate::tensor::softmax(scores, 0)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMethod {
    Max,
    Avg,
    Attention,
}

impl std::str::FromStr for AggregationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Self::Max),
            "avg" | "mean" => Ok(Self::Avg),
            "attention" => Ok(Self::Attention),
            other => Err(Error::Argument(format!(
                "unknown aggregation '{other}' (expected max, avg or attention)"
            ))),
        }
    }
}

fn column_sums(w: &Tensor) -> Vec<f64> {
    let (t, k) = (w.shape()[0], w.shape()[1]);
    (0..k).map(|c| (0..t).map(|r| w.at2(r, c)).sum()).collect()
}

/// Weighted mean over time per class, `sum_t O_tk Z_tk / sum_t Z_tk`.
fn weighted_mean(frames: &FrameProbMatrix, weights: &Tensor) -> Result<ClipProbVector> {
    if weights.shape() != frames.tensor().shape() {
        return Err(Error::dim(format!(
            "weights {:?} do not match frames {:?}",
            weights.shape(),
            frames.tensor().shape()
        )));
    }
    let sums = column_sums(weights);
    let mut out = Vec::with_capacity(frames.classes());
    for (k, &total) in sums.iter().enumerate() {
        if !(total > 0.0) {
            return Err(Error::DegenerateWeights(format!(
                "class {k} has zero total weight"
            )));
        }
        let num: f64 = (0..frames.frames())
            .map(|t| frames.get(t, k) * weights.at2(t, k))
            .sum();
        out.push((num / total).clamp(0.0, 1.0));
    }
    ClipProbVector::new(out)
}

pub fn aggregate(
    frames: &FrameProbMatrix,
    method: AggregationMethod,
    weights: Option<&AttentionWeights>,
) -> Result<ClipProbVector> {
    let (t, k) = (frames.frames(), frames.classes());
    match method {
        AggregationMethod::Max => ClipProbVector::new(
            (0..k)
                .map(|c| (0..t).map(|r| frames.get(r, c)).fold(0.0, f64::max))
                .collect(),
        ),
        AggregationMethod::Avg => ClipProbVector::new(
            (0..k)
                .map(|c| ((0..t).map(|r| frames.get(r, c)).sum::<f64>() / t as f64).clamp(0.0, 1.0))
                .collect(),
        ),
        AggregationMethod::Attention => {
            let w = weights
                .ok_or_else(|| Error::Argument("attention aggregation requires weights".into()))?;
            weighted_mean(frames, w.tensor())
        }
    }
}

/// Clip output from frame probabilities `O` and positive localization
/// weights `Z`: `O'' = sum_t O(t) Z(t) / sum_t Z(t)` per class.
pub fn global_weighted_average(
    frames: &FrameProbMatrix,
    loc: &AttentionWeights,
) -> Result<ClipProbVector> {
    weighted_mean(frames, loc.tensor())
}

/// Tape form of [`aggregate`] over a `T x K` frame variable. For
/// attention, `scores` are linear per-frame scores normalized by a
/// softmax over time.
pub fn aggregate_on(
    tape: &mut Tape,
    frames: Var,
    method: AggregationMethod,
    scores: Option<Var>,
) -> Result<Var> {
    match method {
        AggregationMethod::Max => tape.max_axis(frames, 0),
        AggregationMethod::Avg => tape.mean_axis(frames, 0),
        AggregationMethod::Attention => {
            let s = scores
                .ok_or_else(|| Error::Argument("attention aggregation requires weights".into()))?;
            let p = tape.softmax(s, 0)?;
            let weighted = tape.mul(frames, p)?;
            tape.sum_axis(weighted, 0)
        }
    }
}

/// Tape form of [`global_weighted_average`].
pub fn global_weighted_average_on(tape: &mut Tape, frames: Var, loc: Var) -> Result<Var> {
    let num = tape.mul(frames, loc)?;
    let num = tape.sum_axis(num, 0)?;
    let den = tape.sum_axis(loc, 0)?;
    tape.div(num, den)
}
