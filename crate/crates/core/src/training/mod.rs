//! Weak-label training at desk scale.

mod adam;
mod loss;
mod mixup;
mod model;
mod sampler;
mod synth;
mod trainer;

pub use adam::{AdamState, BETA1, BETA2, EPSILON};
pub use loss::{bce_clip_loss, bce_segment_loss, split_segments, CLAMP_EPS};
pub use mixup::{mixup, mixup_with_lambda, sample_lambda};
pub use model::{Model, ModelConfig, ModelKind, Prediction};
pub use sampler::{balanced_batch_sampler, BalancedSampler, MAX_CLASS_RATIO};
pub use synth::{synth_dataset, Dataset, SyntheticClip, SyntheticDatasetSpec};
pub use trainer::{
    clip_map, dataset_loss, frame_map, frame_prior_baseline, predict_dataset, train_toy, EpochLog,
    PlateauSchedule, Regime, StepLog, TrainConfig, TrainOutcome,
};

use crate::error::{Error, Result};

/// Clip id to weak tags over `K` classes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelSet {
    ids: Vec<String>,
    tags: Vec<Vec<bool>>,
}

impl LabelSet {
    pub fn new(entries: Vec<(String, Vec<bool>)>) -> Result<Self> {
        let k = entries.first().map_or(0, |e| e.1.len());
        let mut ids = Vec::with_capacity(entries.len());
        let mut tags = Vec::with_capacity(entries.len());
        for (id, t) in entries {
            if t.len() != k {
                return Err(Error::dim(format!(
                    "clip '{id}' has {} tags, expected {k}",
                    t.len()
                )));
            }
            if ids.contains(&id) {
                return Err(Error::Validation(format!("duplicate clip id '{id}'")));
            }
            ids.push(id);
            tags.push(t);
        }
        Ok(Self { ids, tags })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.tags.first().map_or(0, Vec::len)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn tags(&self) -> &[Vec<bool>] {
        &self.tags
    }

    pub fn get(&self, id: &str) -> Option<&[bool]> {
        self.ids
            .iter()
            .position(|i| i == id)
            .map(|p| self.tags[p].as_slice())
    }

    /// Tags as 0/1 targets.
    pub fn targets(&self, index: usize) -> Vec<f64> {
        self.tags[index].iter().map(|&t| t as u8 as f64).collect()
    }
}
