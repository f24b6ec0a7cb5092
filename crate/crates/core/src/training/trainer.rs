use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::slice_rows;
use super::{
    bce_clip_loss, bce_segment_loss, mixup_with_lambda, sample_lambda, split_segments, AdamState,
    BalancedSampler, Dataset, Model, ModelConfig, Prediction, CLAMP_EPS,
};
use crate::aggregation::ClipProbVector;
use crate::blocks::ParamVars;
use crate::error::{Error, Result};
use crate::metrics::{mean_average_precision, MeanAp};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Whole clips against their weak tags.
    ClipWise,
    /// Fixed windows of `frames` frames, each inheriting the clip's tags.
    SegmentWise { frames: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Beta parameter for mixup; `None` disables it.
    pub mixup_alpha: Option<f64>,
    /// Draw batches from the class-balanced sampler instead of shuffling.
    pub balanced: bool,
    /// Learning-rate factor applied when the monitored loss has not
    /// improved for `patience` epochs.
    pub lr_decay: f64,
    pub patience: usize,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            regime: Regime::ClipWise,
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            mixup_alpha: None,
            balanced: false,
            lr_decay: 0.9,
            patience: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(
                "learning rate must be a non-negative number".into(),
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(
                "learning-rate decay must lie in (0, 1]".into(),
            ));
        }
        if let Regime::SegmentWise { frames: 0 } = self.regime {
            return Err(Error::Config(
                "segment length must be at least one frame".into(),
            ));
        }
        if let Some(a) = self.mixup_alpha {
            if !(a > 0.0) {
                return Err(Error::Config("mixup alpha must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub learning_rate: f64,
}

/// Loss over the whole training set after `epoch` epochs (0 = before
/// training).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub validation_loss: Option<f64>,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric(reason) => Error::Training { step, reason },
        other => other,
    }
}

/// Predictions of `model` for every clip, honouring the training regime.
pub fn predict_dataset(model: &Model, data: &Dataset, regime: Regime) -> Result<Vec<Prediction>> {
    data.clips
        .iter()
        .map(|c| match regime {
            Regime::ClipWise => model.predict(&c.features, data.frame_duration),
            Regime::SegmentWise { frames } => {
                model.predict_segmented(&c.features, data.frame_duration, frames)
            }
        })
        .collect()
}

/// Summed BCE of `model` on `data` under `regime`.
pub fn dataset_loss(model: &Model, data: &Dataset, regime: Regime) -> Result<f64> {
    let labels = data.labels();
    match regime {
        Regime::ClipWise => {
            let preds = predict_dataset(model, data, regime)?;
            let clips: Vec<ClipProbVector> = preds.into_iter().map(|p| p.clip).collect();
            bce_clip_loss(&clips, &labels)
        }
        Regime::SegmentWise { frames } => {
            let mut segments = Vec::with_capacity(data.len());
            for c in &data.clips {
                let mut per = Vec::new();
                for r in split_segments(c.features.shape()[0], frames)? {
                    let seg = slice_rows(&c.features, r)?;
                    per.push(model.predict(&seg, data.frame_duration)?.clip);
                }
                segments.push(per);
            }
            bce_segment_loss(&segments, &labels)
        }
    }
}

/// Clip-level mAP against the weak tags.
pub fn clip_map(model: &Model, data: &Dataset, regime: Regime) -> Result<MeanAp> {
    let preds = predict_dataset(model, data, regime)?;
    let scores: Vec<Vec<f64>> = preds.iter().map(|p| p.clip.values().to_vec()).collect();
    let labels: Vec<Vec<bool>> = data.clips.iter().map(|c| c.tags.clone()).collect();
    mean_average_precision(&scores, &labels)
}

/// Frame-level mAP against the strong events, pooling every frame of
/// every clip.
pub fn frame_map(model: &Model, data: &Dataset, regime: Regime) -> Result<MeanAp> {
    let preds = predict_dataset(model, data, regime)?;
    let k = data.classes();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (p, clip) in preds.iter().zip(&data.clips) {
        let active: Vec<Vec<bool>> = (0..k)
            .map(|c| clip.frame_activity(c, data.frame_duration))
            .collect();
        for t in 0..p.frames.frames() {
            scores.push((0..k).map(|c| p.frames.get(t, c)).collect());
            labels.push((0..k).map(|c| active[c][t]).collect());
        }
    }
    mean_average_precision(&scores, &labels)
}

/// Expected frame-level mAP of a scorer that knows only the class priors:
/// the mean over classes of the fraction of active frames.
pub fn frame_prior_baseline(data: &Dataset) -> f64 {
    let k = data.classes();
    let mut active = vec![0usize; k];
    let mut total = 0usize;
    for clip in &data.clips {
        total += clip.features.shape()[0];
        for (c, a) in active.iter_mut().enumerate() {
            *a += clip
                .frame_activity(c, data.frame_duration)
                .iter()
                .filter(|&&x| x)
                .count();
        }
    }
    let rates: Vec<f64> = active
        .iter()
        .filter(|&&a| a > 0)
        .map(|&a| a as f64 / total.max(1) as f64)
        .collect();
    if rates.is_empty() {
        0.0
    } else {
        rates.iter().sum::<f64>() / rates.len() as f64
    }
}

/// Multiplies the learning rate by `decay` whenever the monitored loss
/// has gone `patience` epochs without a new best.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauSchedule {
    pub decay: f64,
    pub patience: usize,
    best: f64,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(decay: f64, patience: usize, initial: f64) -> Self {
        Self {
            decay,
            patience,
            best: initial,
            stale: 0,
        }
    }

    /// Feeds one epoch's loss and returns the (possibly reduced) rate.
    pub fn observe(&mut self, loss: f64, learning_rate: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
            return learning_rate;
        }
        self.stale += 1;
        if self.stale >= self.patience.max(1) {
            self.stale = 0;
            learning_rate * self.decay
        } else {
            learning_rate
        }
    }
}

/// One training example after optional mixing.
struct Example {
    x: Tensor,
    y: Tensor,
}

fn batch_examples(
    data: &Dataset,
    batch: &[usize],
    mixup_alpha: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Example>> {
    let targets =
        |i: usize| -> Vec<f64> { data.clips[i].tags.iter().map(|&t| t as u8 as f64).collect() };
    let mut out = Vec::with_capacity(batch.len());
    for &i in batch {
        let x1 = &data.clips[i].features;
        let y1 = targets(i);
        let (x, y) = match mixup_alpha {
            Some(alpha) => {
                let j = batch[rng.random_range(0..batch.len())];
                let lambda = sample_lambda(alpha, rng)?;
                mixup_with_lambda(x1, &y1, &data.clips[j].features, &targets(j), lambda)?
            }
            None => (x1.clone(), y1),
        };
        out.push(Example {
            x,
            y: Tensor::vector(y),
        });
    }
    Ok(out)
}

fn batch_loss(
    model: &Model,
    tape: &mut Tape,
    examples: &[Example],
    regime: Regime,
) -> Result<(Var, ParamVars)> {
    let vars = model.params.register(tape);
    let mut total: Option<Var> = None;
    for ex in examples {
        let windows = match regime {
            Regime::ClipWise => vec![0..ex.x.shape()[0]],
            Regime::SegmentWise { frames } => split_segments(ex.x.shape()[0], frames)?,
        };
        for r in windows {
            let x = if r.len() == ex.x.shape()[0] {
                ex.x.clone()
            } else {
                slice_rows(&ex.x, r)?
            };
            let (_, clip) = model.forward_on(tape, &vars, &x)?;
            let l = tape.bce(clip, &ex.y, CLAMP_EPS)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
    }
    let total = total.ok_or_else(|| Error::Config("empty batch".into()))?;
    Ok((total, vars))
}

/// Trains a fresh model on `train`. Everything is derived from
/// `config.seed`, so equal inputs give bit-identical outcomes. The
/// learning-rate plateau schedule watches `validation` when given and the
/// training loss otherwise.
pub fn train_toy(
    train: &Dataset,
    validation: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if train.classes() != config.model.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model {}",
            train.classes(),
            config.model.classes
        )));
    }
    let mut model = Model::init(config.model, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut sampler = if config.balanced {
        Some(BalancedSampler::new(
            &train.labels(),
            config.batch_size,
            config.seed.wrapping_add(2),
        )?)
    } else {
        None
    };
    let mut adam = AdamState::new(model.params.num_scalars(), config.learning_rate);
    let mut history = Vec::with_capacity(config.epochs + 1);
    let mut steps = Vec::new();

    let evaluate = |model: &Model, epoch: usize, lr: f64| -> Result<EpochLog> {
        let step = epoch;
        let loss = dataset_loss(model, train, config.regime).map_err(diverged(step))?;
        let validation_loss = validation
            .map(|v| dataset_loss(model, v, config.regime))
            .transpose()
            .map_err(diverged(step))?;
        Ok(EpochLog {
            epoch,
            loss,
            validation_loss,
            learning_rate: lr,
        })
    };
    let initial = evaluate(&model, 0, adam.learning_rate)?;
    let mut schedule = PlateauSchedule::new(
        config.lr_decay,
        config.patience,
        initial.validation_loss.unwrap_or(initial.loss),
    );
    history.push(initial);
    let batches_per_epoch = train.len().div_ceil(config.batch_size);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for b in 0..batches_per_epoch {
            let step = steps.len() + 1;
            let batch: Vec<usize> = match sampler.as_mut() {
                Some(s) => s.next_batch(),
                None => order
                    .chunks(config.batch_size)
                    .nth(b)
                    .unwrap_or_default()
                    .to_vec(),
            };
            let examples = batch_examples(train, &batch, config.mixup_alpha, &mut rng)?;
            let mut tape = Tape::new();
            let (loss, vars) =
                batch_loss(&model, &mut tape, &examples, config.regime).map_err(diverged(step))?;
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: "loss is not finite".into(),
                });
            }
            let grads = tape.backward(loss).map_err(diverged(step))?;
            let mut flat = Vec::with_capacity(model.params.num_scalars());
            for &v in vars.vars() {
                flat.extend_from_slice(grads.get(v).data());
            }
            let mut params = model.params.flatten();
            adam.step(&mut params, &flat).map_err(diverged(step))?;
            model.params.assign_flat(&params)?;
            steps.push(StepLog {
                step,
                loss: loss_value,
                learning_rate: adam.learning_rate,
            });
        }
        let log = evaluate(&model, epoch, adam.learning_rate)?;
        let monitored = log.validation_loss.unwrap_or(log.loss);
        history.push(log);
        adam.learning_rate = schedule.observe(monitored, adam.learning_rate);
    }
    Ok(TrainOutcome {
        model,
        history,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::AggregationMethod;
    use crate::training::{synth_dataset, ModelKind, SyntheticDatasetSpec};

    fn tiny() -> Dataset {
        synth_dataset(&SyntheticDatasetSpec {
            classes: 2,
            clips_per_class: 4,
            frames: 16,
            bins_per_class: 2,
            min_event_frames: 3,
            max_event_frames: 8,
            ..Default::default()
        })
        .unwrap()
    }

    fn config(kind: ModelKind) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 0.01,
            ..TrainConfig::new(ModelConfig::new(kind, 2, 4, AggregationMethod::Attention))
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let data = tiny();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            ..config(ModelKind::CnnTransformer)
        };
        let out = train_toy(&data, None, &cfg).unwrap();
        assert_eq!(out.model, Model::init(cfg.model, cfg.seed).unwrap());
        assert_eq!(out.history.len(), 2);
        assert_eq!(out.history[0].loss, out.history[1].loss);
    }

    #[test]
    fn deterministic_history() {
        let data = tiny();
        let cfg = TrainConfig {
            mixup_alpha: Some(1.0),
            balanced: true,
            ..config(ModelKind::CnnGlu)
        };
        let a = train_toy(&data, None, &cfg).unwrap();
        let b = train_toy(&data, None, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.model, b.model);
        assert_eq!(a.steps.len(), 3 * 2);
    }

    #[test]
    fn loss_decreases() {
        let data = tiny();
        let cfg = TrainConfig {
            epochs: 15,
            ..config(ModelKind::CnnTransformer)
        };
        let out = train_toy(&data, None, &cfg).unwrap();
        assert!(out.history.iter().all(|h| h.loss.is_finite()));
        let first = out.history.first().unwrap().loss;
        let last = out.history.last().unwrap().loss;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn segment_wise_regime_runs() {
        let data = tiny();
        let (train, valid) = data.split(4).unwrap();
        let cfg = TrainConfig {
            regime: Regime::SegmentWise { frames: 8 },
            ..config(ModelKind::InceptionAttention(1))
        };
        let out = train_toy(&train, Some(&valid), &cfg).unwrap();
        assert!(out.history.iter().all(|h| h.validation_loss.is_some()));
        let preds = predict_dataset(&out.model, &valid, cfg.regime).unwrap();
        assert_eq!(preds[0].frames.frames(), 16);
    }

    #[test]
    fn plateau_schedule() {
        let mut s = PlateauSchedule::new(0.9, 5, 10.0);
        let mut lr = 1e-3;
        for loss in [9.0, 8.0, 8.5, 8.5, 8.5, 8.5] {
            lr = s.observe(loss, lr);
            assert_eq!(lr, 1e-3);
        }
        lr = s.observe(8.0, lr);
        assert_eq!(lr, 1e-3 * 0.9);
        lr = s.observe(7.0, lr);
        assert_eq!(lr, 1e-3 * 0.9);
    }

    #[test]
    fn divergence_reports_step() {
        let data = tiny();
        let cfg = TrainConfig {
            learning_rate: 1e300,
            epochs: 3,
            ..config(ModelKind::CnnGlu)
        };
        match train_toy(&data, None, &cfg) {
            Err(Error::Training { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.history)),
        }
    }

    #[test]
    fn prior_baseline_is_mean_activity() {
        let data = tiny();
        let base = frame_prior_baseline(&data);
        assert!(base > 0.0 && base < 1.0);
        let mut manual = 0.0;
        for k in 0..2 {
            let (mut on, mut all) = (0, 0);
            for c in &data.clips {
                let a = c.frame_activity(k, data.frame_duration);
                on += a.iter().filter(|&&x| x).count();
                all += a.len();
            }
            manual += on as f64 / all as f64 / 2.0;
        }
        assert!((base - manual).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = config(ModelKind::CnnGlu);
        cfg.batch_size = 0;
        assert!(train_toy(&tiny(), None, &cfg).is_err());
        let mut cfg = config(ModelKind::CnnGlu);
        cfg.model.classes = 3;
        assert!(matches!(
            train_toy(&tiny(), None, &cfg),
            Err(Error::Config(_))
        ));
    }
}
