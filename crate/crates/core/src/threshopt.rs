//! Tuning of the decision thresholds against a non-differentiable
//! detection metric, using forward-difference gradients and Adam.

use serde::{Deserialize, Serialize};

use crate::aggregation::{ClipProbVector, FrameProbMatrix};
use crate::decoding::{decode_events, predict_tags, EventList, ThresholdSet};
use crate::error::{Error, Result};
use crate::metrics::{segment_stats, tag_stats, ClipDurations, SegmentStats};
use crate::training::AdamState;

pub const DEFAULT_DELTA: f64 = 0.05;
pub const DEFAULT_ITERATIONS: usize = 100;
pub const DEFAULT_LEARNING_RATE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Minimizes `-F1` (micro).
    F1,
    /// Minimizes the error rate.
    Er,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Clip tags from `mu`.
    At,
    /// Segment-gridded events from the full decoder.
    Sed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// All `3K` thresholds against the configured task.
    Joint,
    /// First `mu` against tagging, then `tau_high`/`tau_low` against the
    /// configured task with `mu` fixed.
    TwoPass,
}

macro_rules! from_str_lower {
    ($ty:ty, $($name:literal => $val:expr),+) => {
        impl std::str::FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($val),)+
                    other => Err(Error::Argument(format!(
                        "unknown {} '{other}' (expected {})",
                        stringify!($ty).to_lowercase(),
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
    };
}

from_str_lower!(Metric, "f1" => Metric::F1, "er" => Metric::Er);
from_str_lower!(Task, "at" => Task::At, "sed" => Task::Sed);
from_str_lower!(Mode, "joint" => Mode::Joint, "two-pass" => Mode::TwoPass);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub metric: Metric,
    pub task: Task,
    /// Segment length in seconds for the detection task.
    pub segment: f64,
    /// Forward-difference step.
    pub delta: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub mode: Mode,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self {
            metric: Metric::F1,
            task: Task::Sed,
            segment: 1.0,
            delta: DEFAULT_DELTA,
            iterations: DEFAULT_ITERATIONS,
            learning_rate: DEFAULT_LEARNING_RATE,
            mode: Mode::Joint,
        }
    }
}

impl ObjectiveSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Argument(format!(
                "delta must be positive, got {}",
                self.delta
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Argument(
                "iteration budget must be at least 1".into(),
            ));
        }
        if !(self.segment > 0.0 && self.segment.is_finite()) {
            return Err(Error::Argument(format!(
                "segment length must be positive, got {}",
                self.segment
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// Model output for one validation clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipPrediction {
    pub id: String,
    pub frames: FrameProbMatrix,
    pub clip: ClipProbVector,
    pub duration: f64,
}

/// Predictions and references the objective is computed over.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSet {
    predictions: Vec<ClipPrediction>,
    reference_tags: Vec<Vec<bool>>,
    reference_events: EventList,
    durations: ClipDurations,
    classes: usize,
}

impl ValidationSet {
    /// `reference_tags[i]` belongs to `predictions[i]`.
    pub fn new(
        predictions: Vec<ClipPrediction>,
        reference_tags: Vec<Vec<bool>>,
        reference_events: EventList,
    ) -> Result<Self> {
        let first = predictions
            .first()
            .ok_or_else(|| Error::Objective("validation set is empty".into()))?;
        let classes = first.clip.len();
        if reference_tags.len() != predictions.len() {
            return Err(Error::dim(format!(
                "{} predictions but {} tag rows",
                predictions.len(),
                reference_tags.len()
            )));
        }
        let mut durations = ClipDurations::new();
        for (p, t) in predictions.iter().zip(&reference_tags) {
            if p.clip.len() != classes || p.frames.classes() != classes || t.len() != classes {
                return Err(Error::dim(format!(
                    "clip '{}' disagrees on the number of classes ({classes})",
                    p.id
                )));
            }
            if !(p.duration > 0.0 && p.duration.is_finite()) {
                return Err(Error::Validation(format!(
                    "clip '{}' has invalid duration {}",
                    p.id, p.duration
                )));
            }
            if durations.insert(p.id.clone(), p.duration).is_some() {
                return Err(Error::Validation(format!("duplicate clip id '{}'", p.id)));
            }
        }
        if let Some(e) = reference_events
            .events()
            .iter()
            .find(|e| e.class >= classes)
        {
            return Err(Error::Validation(format!(
                "reference event class {} outside {classes} classes",
                e.class
            )));
        }
        Ok(Self {
            predictions,
            reference_tags,
            reference_events,
            durations,
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn predictions(&self) -> &[ClipPrediction] {
        &self.predictions
    }

    /// Tagging counts at `thresholds`, one row per clip.
    pub fn tag_stats(&self, thresholds: &ThresholdSet) -> Result<SegmentStats> {
        let predicted = self
            .predictions
            .iter()
            .map(|p| predict_tags(&p.clip, thresholds))
            .collect::<Result<Vec<_>>>()?;
        tag_stats(&self.reference_tags, &predicted)
    }

    pub fn decode(&self, thresholds: &ThresholdSet) -> Result<EventList> {
        let lists = self
            .predictions
            .iter()
            .map(|p| decode_events(&p.id, &p.frames, &p.clip, thresholds))
            .collect::<Result<Vec<_>>>()?;
        EventList::merged(lists)
    }

    /// Segment counts of the decoded events at `thresholds`.
    pub fn segment_stats(&self, thresholds: &ThresholdSet, segment: f64) -> Result<SegmentStats> {
        let predicted = self.decode(thresholds)?;
        segment_stats(
            &self.reference_events,
            &predicted,
            segment,
            &self.durations,
            self.classes,
        )
    }
}

/// `J(thresholds)`: `-F1` or ER of the decoded validation set.
pub fn evaluate_objective(
    thresholds: &ThresholdSet,
    spec: &ObjectiveSpec,
    data: &ValidationSet,
) -> Result<f64> {
    objective_for(thresholds, spec.metric, spec.task, spec.segment, data)
}

fn objective_for(
    thresholds: &ThresholdSet,
    metric: Metric,
    task: Task,
    segment: f64,
    data: &ValidationSet,
) -> Result<f64> {
    let stats = match task {
        Task::At => data.tag_stats(thresholds)?,
        Task::Sed => data.segment_stats(thresholds, segment)?,
    };
    let j = match metric {
        Metric::F1 => -stats.micro().f1,
        Metric::Er => stats.error_rate().map_err(|e| match e {
            Error::UndefinedMetric(m) => Error::Objective(m),
            other => other,
        })?,
    };
    if !j.is_finite() {
        return Err(Error::Objective(format!("objective evaluated to {j}")));
    }
    Ok(j)
}

/// Objective value at `thresholds` and its forward-difference gradient
/// over the flat `[mu, tau_high, tau_low]` vector. Coordinates with
/// `active[i] == false` get a zero entry without being evaluated.
/// Perturbed thresholds are projected onto the valid region before
/// evaluation.
fn forward_gradient(
    thresholds: &ThresholdSet,
    delta: f64,
    active: &[bool],
    j: &dyn Fn(&ThresholdSet) -> Result<f64>,
) -> Result<(f64, Vec<f64>)> {
    let base = j(thresholds)?;
    let theta = thresholds.to_vec();
    let mut grad = vec![0.0; theta.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        if !active[i] {
            continue;
        }
        let mut probe = theta.clone();
        probe[i] += delta;
        let shifted = ThresholdSet::from_vec_projected(&probe)?;
        *g = (j(&shifted)? - base) / delta;
    }
    Ok((base, grad))
}

/// Forward-difference gradient of the objective over all `3K` thresholds,
/// with `J(thresholds)` evaluated once and shared by every coordinate.
pub fn numerical_gradient(
    spec: &ObjectiveSpec,
    data: &ValidationSet,
    thresholds: &ThresholdSet,
) -> Result<Vec<f64>> {
    spec.validate()?;
    check_size(thresholds, data)?;
    let active = vec![true; 3 * thresholds.len()];
    let j = |t: &ThresholdSet| evaluate_objective(t, spec, data);
    forward_gradient(thresholds, spec.delta, &active, &j).map(|(_, g)| g)
}

fn check_size(thresholds: &ThresholdSet, data: &ValidationSet) -> Result<()> {
    if thresholds.len() != data.classes() {
        return Err(Error::dim(format!(
            "{} threshold triples for {} classes",
            thresholds.len(),
            data.classes()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Global iteration number, counting across passes.
    pub iteration: usize,
    pub pass: usize,
    pub objective: f64,
    pub thresholds: ThresholdSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub thresholds: ThresholdSet,
    pub objective: f64,
    pub initial_objective: f64,
    pub trace: Vec<TraceEntry>,
}

struct Pass {
    metric: Metric,
    task: Task,
    active: Vec<bool>,
}

fn run_pass(
    spec: &ObjectiveSpec,
    data: &ValidationSet,
    pass: &Pass,
    pass_index: usize,
    init: &ThresholdSet,
    trace: &mut Vec<TraceEntry>,
) -> Result<(ThresholdSet, f64)> {
    let j = |t: &ThresholdSet| objective_for(t, pass.metric, pass.task, spec.segment, data);
    let mut adam = AdamState::new(pass.active.len(), spec.learning_rate);
    let mut current = init.clone();
    let mut best: Option<(ThresholdSet, f64)> = None;
    let offset = trace.len();
    for it in 0..=spec.iterations {
        let iteration = offset + it;
        let failed = |e: Error| Error::Optimization {
            iteration,
            reason: e.to_string(),
        };
        // the last round only scores the final iterate
        let (value, grad) = if it < spec.iterations {
            forward_gradient(&current, spec.delta, &pass.active, &j).map_err(failed)?
        } else {
            (j(&current).map_err(failed)?, Vec::new())
        };
        trace.push(TraceEntry {
            iteration,
            pass: pass_index,
            objective: value,
            thresholds: current.clone(),
        });
        if best.as_ref().is_none_or(|(_, b)| value < *b) {
            best = Some((current.clone(), value));
        }
        if it == spec.iterations {
            break;
        }
        let mut theta = current.to_vec();
        adam.step(&mut theta, &grad).map_err(failed)?;
        current = ThresholdSet::from_vec_projected(&theta).map_err(failed)?;
    }
    Ok(best.unwrap_or_else(|| unreachable!("at least one iteration is scored")))
}

/// Adam on forward-difference gradients, projecting after every step.
/// Returns the best thresholds seen (the initial ones included), so the
/// result never scores worse than `init` under `spec`.
pub fn optimize_thresholds(
    spec: &ObjectiveSpec,
    data: &ValidationSet,
    init: &ThresholdSet,
) -> Result<OptimizationResult> {
    spec.validate()?;
    check_size(init, data)?;
    for c in init.classes() {
        c.validate()?;
    }
    let k = init.len();
    let initial_objective =
        evaluate_objective(init, spec, data).map_err(|e| Error::Optimization {
            iteration: 0,
            reason: e.to_string(),
        })?;
    let mask = |keep: [bool; 3]| -> Vec<bool> { (0..k).flat_map(|_| keep).collect() };
    let passes = match spec.mode {
        Mode::Joint => vec![Pass {
            metric: spec.metric,
            task: spec.task,
            active: mask([true; 3]),
        }],
        Mode::TwoPass => vec![
            Pass {
                metric: spec.metric,
                task: Task::At,
                active: mask([true, false, false]),
            },
            Pass {
                metric: spec.metric,
                task: spec.task,
                active: mask([false, true, true]),
            },
        ],
    };
    let mut trace = Vec::new();
    let mut current = init.clone();
    for (i, pass) in passes.iter().enumerate() {
        current = run_pass(spec, data, pass, i, &current, &mut trace)?.0;
    }
    let mut objective = evaluate_objective(&current, spec, data)?;
    // a tagging pass can trade away detection quality
    if objective > initial_objective {
        current = init.clone();
        objective = initial_objective;
    }
    Ok(OptimizationResult {
        thresholds: current,
        objective,
        initial_objective,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::Event;
    use crate::tensor::Tensor;

    fn clip(id: &str, frames: Vec<Vec<f64>>, clip: Vec<f64>) -> ClipPrediction {
        let duration = frames.len() as f64;
        ClipPrediction {
            id: id.into(),
            frames: FrameProbMatrix::from_rows(&frames, 1.0).unwrap(),
            clip: ClipProbVector::new(clip).unwrap(),
            duration,
        }
    }

    /// One class; two clips, the first with an event over frames 1..3.
    fn separable() -> ValidationSet {
        let a = clip(
            "a",
            vec![vec![0.0], vec![0.9], vec![0.8], vec![0.0]],
            vec![0.9],
        );
        let b = clip("b", vec![vec![0.0]; 4], vec![0.05]);
        let events = EventList::new(vec![Event::new("a", 0, 1.0, 3.0).unwrap()]).unwrap();
        ValidationSet::new(vec![a, b], vec![vec![true], vec![false]], events).unwrap()
    }

    #[test]
    fn perfect_predictions_score_minus_one() {
        let data = separable();
        let spec = ObjectiveSpec::default();
        for t in [0.5, 0.7, 0.2] {
            let th = ThresholdSet::uniform(1, t, t, 0.1).unwrap();
            assert_eq!(evaluate_objective(&th, &spec, &data).unwrap(), -1.0);
            let at = ObjectiveSpec {
                task: Task::At,
                ..spec
            };
            assert_eq!(evaluate_objective(&th, &at, &data).unwrap(), -1.0);
        }
    }

    #[test]
    fn empty_prediction_error_rate_is_one() {
        let data = separable();
        let spec = ObjectiveSpec {
            metric: Metric::Er,
            ..Default::default()
        };
        let th = ThresholdSet::uniform(1, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(evaluate_objective(&th, &spec, &data).unwrap(), 1.0);
    }

    #[test]
    fn error_rate_without_reference_is_objective_error() {
        let a = clip("a", vec![vec![0.2]; 3], vec![0.2]);
        let data = ValidationSet::new(vec![a], vec![vec![false]], EventList::default()).unwrap();
        let spec = ObjectiveSpec {
            metric: Metric::Er,
            ..Default::default()
        };
        let r = evaluate_objective(&ThresholdSet::defaults(1), &spec, &data);
        assert!(matches!(r, Err(Error::Objective(_))));
    }

    #[test]
    fn objective_matches_hand_composition() {
        // two classes, three frames; class 1 has a spurious detection
        let a = clip(
            "a",
            vec![vec![0.6, 0.05], vec![0.2, 0.7], vec![0.05, 0.2]],
            vec![0.6, 0.7],
        );
        let events = EventList::new(vec![Event::new("a", 0, 0.0, 2.0).unwrap()]).unwrap();
        let data = ValidationSet::new(vec![a], vec![vec![true, false]], events).unwrap();
        let th = ThresholdSet::defaults(2);
        // class 0 decodes to [0, 2), class 1 to [1, 3)
        // segments: s0 ref {0} pred {0}; s1 ref {0} pred {0,1}; s2 ref {} pred {1}
        // tp = 2, fp = 2, fn = 0 -> F1 = 2/3; ER = (0 + 0 + 2) / 2 = 1
        let f1 = evaluate_objective(&th, &ObjectiveSpec::default(), &data).unwrap();
        assert!((f1 + 2.0 / 3.0).abs() < 1e-12);
        let er = ObjectiveSpec {
            metric: Metric::Er,
            ..Default::default()
        };
        assert_eq!(evaluate_objective(&th, &er, &data).unwrap(), 1.0);
    }

    #[test]
    fn gradient_is_zero_on_flat_region() {
        let data = separable();
        let spec = ObjectiveSpec::default();
        let th = ThresholdSet::uniform(1, 0.5, 0.5, 0.3).unwrap();
        let g = numerical_gradient(&spec, &data, &th).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn gradient_jumps_when_crossing_a_prediction() {
        let a = clip("a", vec![vec![0.6]], vec![0.6]);
        let b = clip("b", vec![vec![0.0]], vec![0.0]);
        let data = ValidationSet::new(
            vec![a, b],
            vec![vec![true], vec![false]],
            EventList::default(),
        )
        .unwrap();
        let spec = ObjectiveSpec {
            task: Task::At,
            delta: 0.05,
            ..Default::default()
        };
        let at = |mu: f64| ThresholdSet::uniform(1, mu, 0.3, 0.1).unwrap();
        assert_eq!(numerical_gradient(&spec, &data, &at(0.5)).unwrap()[0], 0.0);
        // mu = 0.58 -> 0.63 loses the only true positive: J goes -1 -> 0
        let g = numerical_gradient(&spec, &data, &at(0.58)).unwrap();
        assert!((g[0] - 1.0 / 0.05).abs() < 1e-9);
        assert_eq!(g.len(), 3);
    }

    #[test]
    fn gradient_length_is_three_k() {
        let a = clip("a", vec![vec![0.3, 0.2, 0.9]; 2], vec![0.3, 0.2, 0.9]);
        let data = ValidationSet::new(vec![a], vec![vec![true, false, true]], EventList::default())
            .unwrap();
        let spec = ObjectiveSpec {
            task: Task::At,
            ..Default::default()
        };
        let g = numerical_gradient(&spec, &data, &ThresholdSet::defaults(3)).unwrap();
        assert_eq!(g.len(), 9);
    }

    #[test]
    fn zero_learning_rate_keeps_thresholds() {
        let data = separable();
        let spec = ObjectiveSpec {
            learning_rate: 0.0,
            iterations: 5,
            ..Default::default()
        };
        let init = ThresholdSet::uniform(1, 0.95, 0.3, 0.1).unwrap();
        let r = optimize_thresholds(&spec, &data, &init).unwrap();
        assert_eq!(r.thresholds, init);
        assert_eq!(r.trace.len(), 6);
        assert!(r.trace.iter().all(|t| t.objective == r.initial_objective));
    }

    #[test]
    fn optimal_init_is_kept() {
        let data = separable();
        let spec = ObjectiveSpec::default();
        let init = ThresholdSet::defaults(1);
        let r = optimize_thresholds(&spec, &data, &init).unwrap();
        assert_eq!(r.objective, -1.0);
        assert_eq!(r.objective, r.initial_objective);
        assert_eq!(
            evaluate_objective(&r.thresholds, &spec, &data).unwrap(),
            r.objective
        );
    }

    #[test]
    fn raises_a_too_low_tag_threshold() {
        // the negative clip scores 0.3: mu must rise above it, starting
        // close enough for the forward difference to see the crossing
        let a = clip("a", vec![vec![0.9]], vec![0.9]);
        let b = clip("b", vec![vec![0.3]], vec![0.3]);
        let data = ValidationSet::new(
            vec![a, b],
            vec![vec![true], vec![false]],
            EventList::default(),
        )
        .unwrap();
        for mode in [Mode::Joint, Mode::TwoPass] {
            let spec = ObjectiveSpec {
                task: Task::At,
                mode,
                ..Default::default()
            };
            let init = ThresholdSet::uniform(1, 0.27, 0.3, 0.1).unwrap();
            let r = optimize_thresholds(&spec, &data, &init).unwrap();
            assert!(r.initial_objective > -1.0);
            assert_eq!(r.objective, -1.0, "{mode:?}");
            assert!(r.thresholds.class(0).mu > 0.3);
            r.thresholds.class(0).validate().unwrap();
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let data = separable();
        let th = ThresholdSet::defaults(1);
        for spec in [
            ObjectiveSpec {
                delta: 0.0,
                ..Default::default()
            },
            ObjectiveSpec {
                iterations: 0,
                ..Default::default()
            },
            ObjectiveSpec {
                segment: -1.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                optimize_thresholds(&spec, &data, &th),
                Err(Error::Argument(_))
            ));
        }
        assert!(
            optimize_thresholds(&ObjectiveSpec::default(), &data, &ThresholdSet::defaults(2))
                .is_err()
        );
        assert!("f2".parse::<Metric>().is_err());
        assert_eq!("SED".parse::<Task>().unwrap(), Task::Sed);
        assert_eq!("two-pass".parse::<Mode>().unwrap(), Mode::TwoPass);
    }

    #[test]
    fn empty_set_rejected() {
        assert!(matches!(
            ValidationSet::new(vec![], vec![], EventList::default()),
            Err(Error::Objective(_))
        ));
        let a = ClipPrediction {
            id: "a".into(),
            frames: FrameProbMatrix::new(Tensor::zeros(&[2, 1]), 1.0).unwrap(),
            clip: ClipProbVector::new(vec![0.0]).unwrap(),
            duration: 2.0,
        };
        assert!(ValidationSet::new(
            vec![a.clone(), a],
            vec![vec![true]; 2],
            EventList::default()
        )
        .is_err());
    }
}
