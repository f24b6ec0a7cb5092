//! Thresholding of clip and frame probabilities into tags and events.
//!
//! Every comparison is `>=`: a tag fires when `F(X)_k >= mu_k`, a frame
//! seeds an event when `f >= tau_high` and extends it while `f >= tau_low`.

use serde::{Deserialize, Serialize};

use crate::aggregation::{ClipProbVector, FrameProbMatrix};
use crate::error::{Error, Result};

/// Thresholds of one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassThresholds {
    pub mu: f64,
    pub tau_high: f64,
    pub tau_low: f64,
}

pub const DEFAULT_MU: f64 = 0.5;
pub const DEFAULT_TAU_HIGH: f64 = 0.3;
pub const DEFAULT_TAU_LOW: f64 = 0.1;

impl Default for ClassThresholds {
    fn default() -> Self {
        Self {
            mu: DEFAULT_MU,
            tau_high: DEFAULT_TAU_HIGH,
            tau_low: DEFAULT_TAU_LOW,
        }
    }
}

impl ClassThresholds {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.mu) && unit(self.tau_high) && unit(self.tau_low)) {
            return Err(Error::Validation(format!(
                "thresholds {self:?} must lie in [0, 1]"
            )));
        }
        if self.tau_low > self.tau_high {
            return Err(Error::Validation(format!(
                "tau_low {} exceeds tau_high {}",
                self.tau_low, self.tau_high
            )));
        }
        Ok(())
    }

    /// Clamps into `[0, 1]` and lowers `tau_low` to `tau_high` if needed.
    pub fn projected(self) -> Self {
        let clamp = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        let tau_high = clamp(self.tau_high);
        Self {
            mu: clamp(self.mu),
            tau_high,
            tau_low: clamp(self.tau_low).min(tau_high),
        }
    }
}

/// Per-class `(mu, tau_high, tau_low)` for `K` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet(Vec<ClassThresholds>);

impl ThresholdSet {
    pub fn new(classes: Vec<ClassThresholds>) -> Result<Self> {
        for c in &classes {
            c.validate()?;
        }
        Ok(Self(classes))
    }

    pub fn uniform(k: usize, mu: f64, tau_high: f64, tau_low: f64) -> Result<Self> {
        Self::new(vec![
            ClassThresholds {
                mu,
                tau_high,
                tau_low
            };
            k
        ])
    }

    /// `mu = 0.5`, `tau_high = 0.3`, `tau_low = 0.1` for every class.
    pub fn defaults(k: usize) -> Self {
        Self(vec![ClassThresholds::default(); k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn class(&self, k: usize) -> &ClassThresholds {
        &self.0[k]
    }

    pub fn classes(&self) -> &[ClassThresholds] {
        &self.0
    }

    /// Flat `3K` vector `[mu_0, high_0, low_0, mu_1, ...]`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.0
            .iter()
            .flat_map(|c| [c.mu, c.tau_high, c.tau_low])
            .collect()
    }

    /// Inverse of [`ThresholdSet::to_vec`], projecting every class onto
    /// the valid region.
    pub fn from_vec_projected(values: &[f64]) -> Result<Self> {
        if values.len() % 3 != 0 {
            return Err(Error::dim(format!(
                "threshold vector length {} is not a multiple of 3",
                values.len()
            )));
        }
        Ok(Self(
            values
                .chunks(3)
                .map(|c| {
                    ClassThresholds {
                        mu: c[0],
                        tau_high: c[1],
                        tau_low: c[2],
                    }
                    .projected()
                })
                .collect(),
        ))
    }
}

/// A detected or reference event. `onset < offset`, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub clip_id: String,
    pub class: usize,
    pub onset: f64,
    pub offset: f64,
}

impl Event {
    pub fn new(clip_id: impl Into<String>, class: usize, onset: f64, offset: f64) -> Result<Self> {
        if !(onset.is_finite() && offset.is_finite() && onset >= 0.0 && onset < offset) {
            return Err(Error::Validation(format!(
                "event [{onset}, {offset}) needs 0 <= onset < offset"
            )));
        }
        Ok(Self {
            clip_id: clip_id.into(),
            class,
            onset,
            offset,
        })
    }
}

/// Events sorted by (clip, class, onset); events of one (clip, class) never
/// overlap.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EventList(Vec<Event>);

impl EventList {
    pub fn new(mut events: Vec<Event>) -> Result<Self> {
        events.sort_by(|a, b| {
            (a.clip_id.as_str(), a.class)
                .cmp(&(b.clip_id.as_str(), b.class))
                .then(a.onset.total_cmp(&b.onset))
        });
        for pair in events.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.clip_id == b.clip_id && a.class == b.class && b.onset < a.offset {
                return Err(Error::Validation(format!(
                    "overlapping events for clip '{}' class {}: [{}, {}) and [{}, {})",
                    a.clip_id, a.class, a.onset, a.offset, b.onset, b.offset
                )));
            }
        }
        Ok(Self(events))
    }

    pub fn events(&self) -> &[Event] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn for_clip<'a>(&'a self, clip_id: &'a str) -> impl Iterator<Item = &'a Event> + 'a {
        self.0.iter().filter(move |e| e.clip_id == clip_id)
    }

    /// Concatenates per-clip lists.
    pub fn merged(lists: impl IntoIterator<Item = EventList>) -> Result<Self> {
        Self::new(lists.into_iter().flat_map(|l| l.0).collect())
    }
}

/// Post-processing applied after hysteresis decoding. Both steps are off
/// by default.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DecodeOptions {
    /// Joins events of one class separated by a gap shorter than this.
    pub fill_gap: f64,
    /// Drops events shorter than this (after gap filling).
    pub min_duration: f64,
}

pub fn predict_tags(clip: &ClipProbVector, thresholds: &ThresholdSet) -> Result<Vec<bool>> {
    check_classes(clip.len(), thresholds)?;
    Ok(clip
        .values()
        .iter()
        .zip(thresholds.classes())
        .map(|(&p, t)| p >= t.mu)
        .collect())
}

fn check_classes(k: usize, thresholds: &ThresholdSet) -> Result<()> {
    if k != thresholds.len() {
        return Err(Error::dim(format!(
            "{k} classes but {} threshold triples",
            thresholds.len()
        )));
    }
    Ok(())
}

/// Frame runs `[start, end)` of one class found by seeding at every frame
/// `>= tau_high` and expanding both ways while frames stay `>= tau_low`.
pub fn hysteresis_runs(probs: &[f64], tau_high: f64, tau_low: f64) -> Vec<(usize, usize)> {
    let n = probs.len();
    let mut active = vec![false; n];
    for m in 0..n {
        if probs[m] < tau_high || active[m] {
            continue;
        }
        let mut left = m;
        while left > 0 && probs[left - 1] >= tau_low {
            left -= 1;
        }
        let mut right = m;
        while right + 1 < n && probs[right + 1] >= tau_low {
            right += 1;
        }
        active[left..=right].iter_mut().for_each(|a| *a = true);
    }
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &a) in active.iter().chain(std::iter::once(&false)).enumerate() {
        match (a, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    runs
}

/// Tags the clip, then decodes events for every tagged class.
pub fn decode_events(
    clip_id: &str,
    frames: &FrameProbMatrix,
    clip: &ClipProbVector,
    thresholds: &ThresholdSet,
) -> Result<EventList> {
    decode_events_with(clip_id, frames, clip, thresholds, &DecodeOptions::default())
}

pub fn decode_events_with(
    clip_id: &str,
    frames: &FrameProbMatrix,
    clip: &ClipProbVector,
    thresholds: &ThresholdSet,
    options: &DecodeOptions,
) -> Result<EventList> {
    check_classes(frames.classes(), thresholds)?;
    let tags = predict_tags(clip, thresholds)?;
    let dt = frames.frame_duration();
    let mut events = Vec::new();
    for (k, &tagged) in tags.iter().enumerate() {
        if !tagged {
            continue;
        }
        let t = thresholds.class(k);
        let mut spans: Vec<(f64, f64)> = hysteresis_runs(&frames.column(k), t.tau_high, t.tau_low)
            .into_iter()
            .map(|(s, e)| (s as f64 * dt, e as f64 * dt))
            .collect();
        if options.fill_gap > 0.0 {
            let mut joined: Vec<(f64, f64)> = Vec::with_capacity(spans.len());
            for span in spans {
                match joined.last_mut() {
                    Some(last) if span.0 - last.1 < options.fill_gap => last.1 = span.1,
                    _ => joined.push(span),
                }
            }
            spans = joined;
        }
        for (on, off) in spans {
            if off - on >= options.min_duration {
                events.push(Event::new(clip_id, k, on, off)?);
            }
        }
    }
    EventList::new(events)
}

/// Number of `segment`-second segments covering `duration`, the final
/// partial segment included.
pub fn segment_count(duration: f64, segment: f64) -> usize {
    let n = (duration / segment - 1e-9).ceil();
    n.max(0.0) as usize
}

/// `segments x classes` activity of one clip: a cell is set when any
/// event of that class overlaps the segment by a positive amount.
pub fn events_to_segment_grid<'a>(
    events: impl IntoIterator<Item = &'a Event>,
    classes: usize,
    segment: f64,
    clip_duration: f64,
) -> Result<Vec<Vec<bool>>> {
    if !(segment > 0.0 && segment.is_finite()) {
        return Err(Error::Argument(format!(
            "segment length must be positive, got {segment}"
        )));
    }
    if !(clip_duration >= 0.0 && clip_duration.is_finite()) {
        return Err(Error::Validation(format!(
            "invalid clip duration {clip_duration}"
        )));
    }
    let n = segment_count(clip_duration, segment);
    let mut grid = vec![vec![false; classes]; n];
    for e in events {
        if e.class >= classes {
            return Err(Error::Validation(format!(
                "event class {} outside {classes} classes",
                e.class
            )));
        }
        if e.onset < 0.0 || e.offset > clip_duration + 1e-9 {
            return Err(Error::Validation(format!(
                "event [{}, {}) of clip '{}' lies outside the clip duration {clip_duration}",
                e.onset, e.offset, e.clip_id
            )));
        }
        for (s, row) in grid.iter_mut().enumerate() {
            let (lo, hi) = (s as f64 * segment, (s + 1) as f64 * segment);
            if e.onset < hi && e.offset > lo {
                row[e.class] = true;
            }
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single_class(probs: &[f64], dt: f64) -> FrameProbMatrix {
        let rows: Vec<Vec<f64>> = probs.iter().map(|&p| vec![p]).collect();
        FrameProbMatrix::from_rows(&rows, dt).unwrap()
    }

    fn clip(v: &[f64]) -> ClipProbVector {
        ClipProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn tags() {
        let t = ThresholdSet::uniform(2, 0.5, 0.3, 0.1).unwrap();
        assert_eq!(
            predict_tags(&clip(&[0.6, 0.4]), &t).unwrap(),
            vec![true, false]
        );
        let zero = ThresholdSet::uniform(1, 0.0, 0.3, 0.1).unwrap();
        assert_eq!(predict_tags(&clip(&[0.0]), &zero).unwrap(), vec![true]);
        assert_eq!(
            predict_tags(&clip(&[0.5]), &ThresholdSet::defaults(1)).unwrap(),
            vec![true]
        );
        assert!(ThresholdSet::uniform(1, 1.01, 0.3, 0.1).is_err());
        assert!(predict_tags(&clip(&[0.5, 0.5]), &ThresholdSet::defaults(1)).is_err());
    }

    #[test]
    fn threshold_invariants() {
        assert!(ThresholdSet::uniform(1, 0.5, 0.2, 0.3).is_err());
        let p = ThresholdSet::from_vec_projected(&[1.4, 0.2, 0.3, -0.1, 0.5, 0.4]).unwrap();
        assert_eq!(p.class(0).mu, 1.0);
        assert_eq!(p.class(0).tau_low, 0.2);
        assert_eq!(p.class(1).mu, 0.0);
        assert_eq!(p.to_vec(), vec![1.0, 0.2, 0.2, 0.0, 0.5, 0.4]);
    }

    #[test]
    fn hand_trace() {
        let f = single_class(&[0.05, 0.2, 0.35, 0.25, 0.15, 0.05], 1.0);
        let ev = decode_events("c", &f, &clip(&[0.9]), &ThresholdSet::defaults(1)).unwrap();
        assert_eq!(ev.events(), &[Event::new("c", 0, 1.0, 5.0).unwrap()]);
    }

    #[test]
    fn below_low_gives_nothing_even_when_tagged() {
        let f = single_class(&[0.05, 0.02, 0.09], 1.0);
        let ev = decode_events("c", &f, &clip(&[0.99]), &ThresholdSet::defaults(1)).unwrap();
        assert!(ev.is_empty());
    }

    #[test]
    fn untagged_class_gives_nothing() {
        let f = single_class(&[0.9, 0.9], 1.0);
        let ev = decode_events("c", &f, &clip(&[0.2]), &ThresholdSet::defaults(1)).unwrap();
        assert!(ev.is_empty());
    }

    #[test]
    fn two_seeds_one_event() {
        let f = single_class(&[0.0, 0.5, 0.2, 0.6, 0.15, 0.0], 0.5);
        let ev = decode_events("c", &f, &clip(&[1.0]), &ThresholdSet::defaults(1)).unwrap();
        assert_eq!(ev.events(), &[Event::new("c", 0, 0.5, 2.5).unwrap()]);
    }

    #[test]
    fn dip_below_low_splits() {
        let f = single_class(&[0.5, 0.05, 0.5], 1.0);
        let ev = decode_events("c", &f, &clip(&[1.0]), &ThresholdSet::defaults(1)).unwrap();
        assert_eq!(ev.len(), 2);
    }

    #[test]
    fn post_processing_options() {
        let f = single_class(&[0.5, 0.05, 0.5, 0.0, 0.0, 0.0, 0.4, 0.0], 1.0);
        let t = ThresholdSet::defaults(1);
        let c = clip(&[1.0]);
        let joined = decode_events_with(
            "c",
            &f,
            &c,
            &t,
            &DecodeOptions {
                fill_gap: 1.5,
                min_duration: 0.0,
            },
        )
        .unwrap();
        assert_eq!(joined.len(), 2);
        assert_eq!(joined.events()[0].offset, 3.0);
        let long_only = decode_events_with(
            "c",
            &f,
            &c,
            &t,
            &DecodeOptions {
                fill_gap: 1.5,
                min_duration: 2.0,
            },
        )
        .unwrap();
        assert_eq!(long_only.len(), 1);
    }

    #[test]
    fn grid_overlap_rule() {
        let e = Event::new("c", 0, 0.5, 1.5).unwrap();
        let g = events_to_segment_grid([&e], 1, 1.0, 10.0).unwrap();
        assert_eq!(g.len(), 10);
        let active: Vec<usize> = (0..10).filter(|&s| g[s][0]).collect();
        assert_eq!(active, vec![0, 1]);

        let empty = events_to_segment_grid(std::iter::empty(), 2, 1.0, 10.0).unwrap();
        assert!(empty.iter().flatten().all(|&v| !v));

        // touching a boundary is not an overlap
        let e = Event::new("c", 0, 1.0, 2.0).unwrap();
        let g = events_to_segment_grid([&e], 1, 1.0, 3.0).unwrap();
        assert_eq!(g, vec![vec![false], vec![true], vec![false]]);
    }

    #[test]
    fn grid_partial_segment_and_errors() {
        assert_eq!(segment_count(10.0, 1.0), 10);
        assert_eq!(segment_count(10.5, 1.0), 11);
        assert_eq!(segment_count(0.3, 1.0), 1);
        let e = Event::new("c", 0, 9.0, 10.5).unwrap();
        let g = events_to_segment_grid([&e], 1, 1.0, 10.5).unwrap();
        assert!(g[10][0]);
        assert!(events_to_segment_grid([&e], 1, 1.0, 10.0).is_err());
        assert!(events_to_segment_grid([&e], 1, 0.0, 11.0).is_err());
        let wrong_class = Event::new("c", 3, 0.0, 1.0).unwrap();
        assert!(events_to_segment_grid([&wrong_class], 2, 1.0, 10.0).is_err());
    }

    #[test]
    fn full_clip_event_fills_its_column() {
        let e = Event::new("c", 1, 0.0, 7.3).unwrap();
        let g = events_to_segment_grid([&e], 2, 1.0, 7.3).unwrap();
        assert!(g.iter().all(|row| row[1] && !row[0]));
    }

    #[test]
    fn event_list_rejects_overlap() {
        let a = Event::new("c", 0, 0.0, 2.0).unwrap();
        let b = Event::new("c", 0, 1.0, 3.0).unwrap();
        assert!(EventList::new(vec![a.clone(), b]).is_err());
        let other_class = Event::new("c", 1, 1.0, 3.0).unwrap();
        assert!(EventList::new(vec![other_class, a]).is_ok());
        assert!(Event::new("c", 0, 2.0, 2.0).is_err());
    }

    fn probs_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..=1.0, 1..40)
    }

    proptest! {
        #[test]
        fn event_frames_respect_thresholds(
            probs in probs_strategy(), a in 0.0f64..=1.0, b in 0.0f64..=1.0
        ) {
            let (low, high) = if a <= b { (a, b) } else { (b, a) };
            for (s, e) in hysteresis_runs(&probs, high, low) {
                prop_assert!(probs[s..e].iter().all(|&p| p >= low));
                prop_assert!(probs[s..e].iter().any(|&p| p >= high));
            }
        }

        #[test]
        fn trailing_quiet_frames_change_nothing(
            probs in probs_strategy(), extra in 1usize..10
        ) {
            let t = ThresholdSet::uniform(1, 0.0, 0.3, 0.1).unwrap();
            let c = clip(&[1.0]);
            let base = decode_events("c", &single_class(&probs, 1.0), &c, &t).unwrap();
            let mut longer = probs.clone();
            longer.extend(std::iter::repeat(0.05).take(extra));
            let more = decode_events("c", &single_class(&longer, 1.0), &c, &t).unwrap();
            prop_assert_eq!(base, more);
        }

        #[test]
        fn raising_high_never_adds_events(
            probs in probs_strategy(), low in 0.0f64..0.5, h1 in 0.5f64..=1.0, dh in 0.0f64..0.5
        ) {
            let h2 = (h1 + dh).min(1.0);
            let r1 = hysteresis_runs(&probs, h1, low);
            let r2 = hysteresis_runs(&probs, h2, low);
            prop_assert!(r2.len() <= r1.len());
            for run in &r2 {
                prop_assert!(r1.contains(run));
            }
        }
    }
}
