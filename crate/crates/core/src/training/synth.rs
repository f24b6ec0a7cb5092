use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LabelSet;
use crate::decoding::{Event, EventList};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Recipe for a synthetic weakly labelled set. Class `k` lights up its own
/// band of `bins_per_class` feature bins for the duration of its event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub classes: usize,
    pub clips_per_class: usize,
    pub frames: usize,
    pub bins_per_class: usize,
    pub frame_duration: f64,
    pub seed: u64,
    /// Event lengths are uniform over `min_event_frames..=max_event_frames`.
    pub min_event_frames: usize,
    pub max_event_frames: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Chance that each non-primary class also occurs in a clip.
    pub extra_event_prob: f64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            clips_per_class: 50,
            frames: 80,
            bins_per_class: 2,
            frame_duration: 0.125,
            seed: 0,
            min_event_frames: 8,
            max_event_frames: 32,
            noise: 0.3,
            extra_event_prob: 0.25,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.classes == 0 || self.clips_per_class == 0 || self.frames == 0 {
            return bad("classes, clips per class and frames must be positive");
        }
        if self.bins_per_class == 0 {
            return bad("bins per class must be positive");
        }
        if !(self.frame_duration > 0.0 && self.frame_duration.is_finite()) {
            return bad("frame duration must be positive");
        }
        if self.min_event_frames == 0
            || self.min_event_frames > self.max_event_frames
            || self.max_event_frames > self.frames
        {
            return bad("event length range must satisfy 1 <= min <= max <= frames");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise level must be a non-negative number");
        }
        if !(0.0..=1.0).contains(&self.extra_event_prob) {
            return bad("extra event probability must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.classes * self.bins_per_class
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClip {
    pub id: String,
    /// `T x F` features.
    pub features: Tensor,
    pub tags: Vec<bool>,
    pub events: Vec<Event>,
}

impl SyntheticClip {
    pub fn duration(&self, frame_duration: f64) -> f64 {
        self.features.shape()[0] as f64 * frame_duration
    }

    /// Per-frame activity of class `k` from the strong events.
    pub fn frame_activity(&self, k: usize, frame_duration: f64) -> Vec<bool> {
        let t = self.features.shape()[0];
        (0..t)
            .map(|f| {
                let mid = (f as f64 + 0.5) * frame_duration;
                self.events
                    .iter()
                    .any(|e| e.class == k && e.onset <= mid && mid < e.offset)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub clips: Vec<SyntheticClip>,
    pub frame_duration: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> LabelSet {
        // ids are unique and tag lengths agree by construction
        LabelSet::new(
            self.clips
                .iter()
                .map(|c| (c.id.clone(), c.tags.clone()))
                .collect(),
        )
        .expect("dataset labels are consistent")
    }

    pub fn events(&self) -> Result<EventList> {
        EventList::new(self.clips.iter().flat_map(|c| c.events.clone()).collect())
    }

    /// Deterministic split: every `every`-th clip (counting from 0) goes to
    /// the held-out part.
    pub fn split(&self, every: usize) -> Result<(Dataset, Dataset)> {
        if every < 2 {
            return Err(Error::Argument("split interval must be at least 2".into()));
        }
        let part = |keep: bool| Dataset {
            class_names: self.class_names.clone(),
            clips: self
                .clips
                .iter()
                .enumerate()
                .filter(|(i, _)| (i % every == 0) != keep)
                .map(|(_, c)| c.clone())
                .collect(),
            frame_duration: self.frame_duration,
        };
        Ok((part(true), part(false)))
    }
}

/// Builds the dataset described by `spec`; identical specs give identical
/// datasets.
pub fn synth_dataset(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let (t, f, k) = (spec.frames, spec.bins(), spec.classes);
    let fd = spec.frame_duration;
    let n = k * spec.clips_per_class;
    let mut clips = Vec::with_capacity(n);
    for i in 0..n {
        let primary = i % k;
        let tags: Vec<bool> = (0..k)
            .map(|c| c == primary || rng.random_bool(spec.extra_event_prob))
            .collect();
        let mut data = vec![0.0; t * f];
        let mut events = Vec::new();
        let id = format!("clip{i:04}");
        for (c, _) in tags.iter().enumerate().filter(|(_, &p)| p) {
            let len = rng.random_range(spec.min_event_frames..=spec.max_event_frames);
            let onset = rng.random_range(0..=t - len);
            for frame in onset..onset + len {
                let row = &mut data[frame * f..(frame + 1) * f];
                for v in &mut row[c * spec.bins_per_class..(c + 1) * spec.bins_per_class] {
                    *v = 1.0;
                }
            }
            events.push(Event::new(
                id.clone(),
                c,
                onset as f64 * fd,
                (onset + len) as f64 * fd,
            )?);
        }
        if spec.noise > 0.0 {
            for v in &mut data {
                *v += noise.sample(&mut rng);
            }
        }
        clips.push(SyntheticClip {
            id,
            features: Tensor::new(vec![t, f], data)?,
            tags,
            events,
        });
    }
    Ok(Dataset {
        class_names: (0..k).map(|c| format!("class{c}")).collect(),
        clips,
        frame_duration: fd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(spec: SyntheticDatasetSpec) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec { noise: 0.0, ..spec }
    }

    #[test]
    fn silent_outside_events() {
        let spec = quiet(SyntheticDatasetSpec {
            classes: 1,
            clips_per_class: 5,
            extra_event_prob: 0.0,
            ..Default::default()
        });
        let ds = synth_dataset(&spec).unwrap();
        for clip in &ds.clips {
            assert_eq!(clip.events.len(), 1);
            let active = clip.frame_activity(0, ds.frame_duration);
            for (frame, row) in clip.features.rows().iter().enumerate() {
                let energy: f64 = row.iter().map(|v| v * v).sum();
                if active[frame] {
                    assert_eq!(energy, spec.bins_per_class as f64);
                } else {
                    assert_eq!(energy, 0.0);
                }
            }
        }
    }

    #[test]
    fn tags_match_events() {
        let ds = synth_dataset(&SyntheticDatasetSpec::default()).unwrap();
        assert_eq!(ds.len(), 200);
        for clip in &ds.clips {
            for k in 0..ds.classes() {
                let has = clip.events.iter().any(|e| e.class == k);
                assert_eq!(clip.tags[k], has);
            }
        }
    }

    #[test]
    fn reproducible() {
        let spec = SyntheticDatasetSpec::default();
        assert_eq!(synth_dataset(&spec).unwrap(), synth_dataset(&spec).unwrap());
        let other = SyntheticDatasetSpec { seed: 1, ..spec };
        assert_ne!(
            synth_dataset(&SyntheticDatasetSpec::default()).unwrap(),
            synth_dataset(&other).unwrap()
        );
    }

    #[test]
    fn durations_follow_spec() {
        let spec = quiet(SyntheticDatasetSpec {
            classes: 1,
            clips_per_class: 1000,
            extra_event_prob: 0.0,
            ..Default::default()
        });
        let ds = synth_dataset(&spec).unwrap();
        let lens: Vec<f64> = ds
            .clips
            .iter()
            .map(|c| (c.events[0].offset - c.events[0].onset) / ds.frame_duration)
            .collect();
        let mean = lens.iter().sum::<f64>() / lens.len() as f64;
        let expect = (spec.min_event_frames + spec.max_event_frames) as f64 / 2.0;
        assert!((mean - expect).abs() / expect < 0.05, "{mean} vs {expect}");
        // uniform over 25 values: each length has mass 1/25
        let short = lens.iter().filter(|&&l| l < 14.0).count() as f64 / 1000.0;
        assert!((short - 6.0 / 25.0).abs() < 0.05, "{short}");
        assert!(lens.iter().all(|&l| (8.0..=32.0).contains(&l.round())));
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let ds = synth_dataset(&SyntheticDatasetSpec::default()).unwrap();
        let (train, held) = ds.split(5).unwrap();
        assert_eq!(train.len() + held.len(), ds.len());
        assert_eq!(held.len(), 40);
        assert!(held
            .clips
            .iter()
            .all(|c| !train.clips.iter().any(|d| d.id == c.id)));
        assert!(ds.split(1).is_err());
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SyntheticDatasetSpec {
                classes: 0,
                ..Default::default()
            },
            SyntheticDatasetSpec {
                min_event_frames: 0,
                ..Default::default()
            },
            SyntheticDatasetSpec {
                max_event_frames: 100,
                ..Default::default()
            },
            SyntheticDatasetSpec {
                noise: -1.0,
                ..Default::default()
            },
            SyntheticDatasetSpec {
                extra_event_prob: 2.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(synth_dataset(&spec), Err(Error::Config(_))));
        }
    }
}
