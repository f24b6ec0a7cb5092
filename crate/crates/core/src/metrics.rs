//! Precision/recall/F1, non-interpolated average precision, and the
//! segment-based error rate and F1.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decoding::{events_to_segment_grid, EventList};
use crate::error::{Error, Result};

/// Clip id to duration in seconds.
pub type ClipDurations = BTreeMap<String, f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Zero denominators yield 0.
pub fn precision_recall_f1(tp: usize, fp: usize, fn_: usize) -> Prf {
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Prf {
        precision,
        recall,
        f1: ratio(2.0 * precision * recall, precision + recall),
    }
}

/// Mean over positives of the precision at each positive's rank. Scores
/// are ranked descending; ties keep their original order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs a positive label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / positives as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanAp {
    pub map: f64,
    /// `None` for classes without a positive label.
    pub per_class: Vec<Option<f64>>,
}

impl MeanAp {
    pub fn excluded(&self) -> Vec<usize> {
        (0..self.per_class.len())
            .filter(|&k| self.per_class[k].is_none())
            .collect()
    }
}

/// mAP over the columns of `items x classes` score and label matrices.
/// Classes without positives are left out of the mean.
pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<MeanAp> {
    if scores.len() != labels.len() {
        return Err(Error::dim("score and label matrices differ in rows"));
    }
    let k = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != k) || labels.iter().any(|r| r.len() != k) {
        return Err(Error::dim("ragged score or label matrix"));
    }
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[c]).collect();
        per_class.push(match average_precision(&s, &l) {
            Ok(ap) => Some(ap),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        });
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric(
            "no class has a positive label".into(),
        ));
    }
    Ok(MeanAp {
        map: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Counts of one time segment across all classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SegmentCounts {
    /// Reference-active classes.
    pub n: usize,
    pub s: usize,
    pub d: usize,
    pub i: usize,
}

impl SegmentCounts {
    /// `S = min(FN, FP)`, `D = max(0, FN - FP)`, `I = max(0, FP - FN)`.
    pub fn from_errors(n: usize, fn_: usize, fp: usize) -> Self {
        Self {
            n,
            s: fn_.min(fp),
            d: fn_.saturating_sub(fp),
            i: fp.saturating_sub(fn_),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SegmentStats {
    pub segments: Vec<SegmentCounts>,
    pub per_class: Vec<ClassCounts>,
}

impl SegmentStats {
    pub fn new(classes: usize) -> Self {
        Self {
            segments: Vec::new(),
            per_class: vec![ClassCounts::default(); classes],
        }
    }

    /// Adds one segment given reference and predicted class activity.
    pub fn push(&mut self, reference: &[bool], predicted: &[bool]) -> Result<()> {
        if reference.len() != self.per_class.len() || predicted.len() != self.per_class.len() {
            return Err(Error::dim(format!(
                "segment rows of {} and {} classes, expected {}",
                reference.len(),
                predicted.len(),
                self.per_class.len()
            )));
        }
        let (mut n, mut fn_, mut fp) = (0, 0, 0);
        for ((&r, &p), c) in reference.iter().zip(predicted).zip(&mut self.per_class) {
            n += r as usize;
            match (r, p) {
                (true, true) => c.tp += 1,
                (true, false) => {
                    c.fn_ += 1;
                    fn_ += 1;
                }
                (false, true) => {
                    c.fp += 1;
                    fp += 1;
                }
                (false, false) => {}
            }
        }
        self.segments.push(SegmentCounts::from_errors(n, fn_, fp));
        Ok(())
    }

    pub fn totals(&self) -> SegmentCounts {
        self.segments
            .iter()
            .fold(SegmentCounts::default(), |a, s| SegmentCounts {
                n: a.n + s.n,
                s: a.s + s.s,
                d: a.d + s.d,
                i: a.i + s.i,
            })
    }

    pub fn pooled(&self) -> ClassCounts {
        self.per_class
            .iter()
            .fold(ClassCounts::default(), |a, c| ClassCounts {
                tp: a.tp + c.tp,
                fp: a.fp + c.fp,
                fn_: a.fn_ + c.fn_,
            })
    }

    /// `(S + D + I) / N` over all segments.
    pub fn error_rate(&self) -> Result<f64> {
        let t = self.totals();
        if t.n == 0 {
            return Err(Error::UndefinedMetric(
                "error rate undefined: reference has no active segment".into(),
            ));
        }
        Ok((t.s + t.d + t.i) as f64 / t.n as f64)
    }

    /// P/R/F1 from TP/FP/FN pooled over segments and classes.
    pub fn micro(&self) -> Prf {
        let c = self.pooled();
        precision_recall_f1(c.tp, c.fp, c.fn_)
    }

    pub fn class_prf(&self) -> Vec<Prf> {
        self.per_class
            .iter()
            .map(|c| precision_recall_f1(c.tp, c.fp, c.fn_))
            .collect()
    }

    /// Mean of per-class F1.
    pub fn macro_f1(&self) -> f64 {
        let prf = self.class_prf();
        if prf.is_empty() {
            return 0.0;
        }
        prf.iter().map(|p| p.f1).sum::<f64>() / prf.len() as f64
    }
}

/// Grids both lists per clip and accumulates segment counts over every
/// clip in `durations`.
pub fn segment_stats(
    reference: &EventList,
    predicted: &EventList,
    segment: f64,
    durations: &ClipDurations,
    classes: usize,
) -> Result<SegmentStats> {
    for e in reference.events().iter().chain(predicted.events()) {
        if !durations.contains_key(&e.clip_id) {
            return Err(Error::Validation(format!(
                "event for clip '{}' without a known duration",
                e.clip_id
            )));
        }
    }
    let mut stats = SegmentStats::new(classes);
    for (clip, &duration) in durations {
        let r = events_to_segment_grid(reference.for_clip(clip), classes, segment, duration)?;
        let p = events_to_segment_grid(predicted.for_clip(clip), classes, segment, duration)?;
        for (rr, pr) in r.iter().zip(&p) {
            stats.push(rr, pr)?;
        }
    }
    Ok(stats)
}

pub fn segment_error_rate(
    reference: &EventList,
    predicted: &EventList,
    segment: f64,
    durations: &ClipDurations,
    classes: usize,
) -> Result<(f64, SegmentStats)> {
    let stats = segment_stats(reference, predicted, segment, durations, classes)?;
    Ok((stats.error_rate()?, stats))
}

pub fn segment_f1_micro(
    reference: &EventList,
    predicted: &EventList,
    segment: f64,
    durations: &ClipDurations,
    classes: usize,
) -> Result<f64> {
    Ok(
        segment_stats(reference, predicted, segment, durations, classes)?
            .micro()
            .f1,
    )
}

/// Clip-level tag counts, one "segment" per clip.
pub fn tag_stats(reference: &[Vec<bool>], predicted: &[Vec<bool>]) -> Result<SegmentStats> {
    if reference.len() != predicted.len() {
        return Err(Error::dim(format!(
            "{} reference clips, {} predicted",
            reference.len(),
            predicted.len()
        )));
    }
    let k = reference.first().map_or(0, Vec::len);
    let mut stats = SegmentStats::new(k);
    for (r, p) in reference.iter().zip(predicted) {
        stats.push(r, p)?;
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    #[serde(flatten)]
    pub counts: ClassCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap: Option<f64>,
}

/// Per-class table plus micro/macro summary of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub task: String,
    pub segment_length: Option<f64>,
    pub classes: Vec<ClassReport>,
    pub micro: Prf,
    pub macro_f1: f64,
    pub error_rate: Option<f64>,
    pub totals: SegmentCounts,
    pub map: Option<f64>,
}

impl EvaluationReport {
    pub fn from_stats(
        task: &str,
        segment_length: Option<f64>,
        names: &[String],
        stats: &SegmentStats,
        ap: Option<&MeanAp>,
    ) -> Self {
        let classes = names
            .iter()
            .zip(&stats.per_class)
            .zip(stats.class_prf())
            .enumerate()
            .map(|(k, ((name, counts), prf))| ClassReport {
                name: name.clone(),
                counts: *counts,
                precision: prf.precision,
                recall: prf.recall,
                f1: prf.f1,
                ap: ap.and_then(|m| m.per_class.get(k).copied().flatten()),
            })
            .collect();
        Self {
            task: task.to_string(),
            segment_length,
            classes,
            micro: stats.micro(),
            macro_f1: stats.macro_f1(),
            error_rate: stats.error_rate().ok(),
            totals: stats.totals(),
            map: ap.map(|m| m.map),
        }
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "task: {}", self.task);
        if let Some(s) = self.segment_length {
            let _ = writeln!(out, "segment length: {s:.3} s");
        }
        let width = self
            .classes
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let _ = writeln!(
            out,
            "{:<width$}  {:>6} {:>6} {:>6}  {:>9} {:>9} {:>9} {:>9}",
            "class", "tp", "fp", "fn", "precision", "recall", "f1", "ap"
        );
        for c in &self.classes {
            let ap = c.ap.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
            let _ = writeln!(
                out,
                "{:<width$}  {:>6} {:>6} {:>6}  {:>9.3} {:>9.3} {:>9.3} {:>9}",
                c.name, c.counts.tp, c.counts.fp, c.counts.fn_, c.precision, c.recall, c.f1, ap
            );
        }
        let _ = writeln!(
            out,
            "micro: P={:.3} R={:.3} F1={:.3}",
            self.micro.precision, self.micro.recall, self.micro.f1
        );
        let _ = writeln!(out, "macro: F1={:.3}", self.macro_f1);
        match self.error_rate {
            Some(er) => {
                let _ = writeln!(
                    out,
                    "ER={er:.3} (S={} D={} I={} N={})",
                    self.totals.s, self.totals.d, self.totals.i, self.totals.n
                );
            }
            None => {
                let _ = writeln!(out, "ER=undefined (N=0)");
            }
        }
        if let Some(m) = self.map {
            let _ = writeln!(out, "mAP={m:.3}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::Event;
    use proptest::prelude::*;

    fn durations(clips: &[(&str, f64)]) -> ClipDurations {
        clips.iter().map(|(c, d)| (c.to_string(), *d)).collect()
    }

    fn events(list: &[(&str, usize, f64, f64)]) -> EventList {
        EventList::new(
            list.iter()
                .map(|&(c, k, on, off)| Event::new(c, k, on, off).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn prf_cases() {
        let p = precision_recall_f1(3, 1, 3);
        assert_eq!((p.precision, p.recall), (0.75, 0.5));
        assert!((p.f1 - 0.6).abs() < 1e-15);
        let z = precision_recall_f1(0, 0, 0);
        assert_eq!((z.precision, z.recall, z.f1), (0.0, 0.0, 0.0));
        let eq = precision_recall_f1(2, 2, 2);
        assert_eq!(eq.f1, eq.precision);
    }

    #[test]
    fn ap_cases() {
        let ap = average_precision(&[0.9, 0.8, 0.1], &[true, false, true]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(
            average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(),
            1.0
        );
        assert!(matches!(
            average_precision(&[0.3], &[false]),
            Err(Error::UndefinedMetric(_))
        ));
        // ties keep the original order
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]).unwrap(), 1.0);
    }

    #[test]
    fn map_skips_classes_without_positives() {
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.7]];
        let labels = vec![vec![true, false], vec![false, false]];
        let m = mean_average_precision(&scores, &labels).unwrap();
        assert_eq!(m.map, 1.0);
        assert_eq!(m.excluded(), vec![1]);
        let none = vec![vec![false, false]; 2];
        assert!(mean_average_precision(&scores, &none).is_err());
    }

    #[test]
    fn er_identity_and_empty_prediction() {
        let r = events(&[("a", 0, 0.0, 2.5), ("a", 1, 4.0, 6.0), ("b", 0, 1.0, 3.0)]);
        let d = durations(&[("a", 10.0), ("b", 10.0)]);
        let (er, stats) = segment_error_rate(&r, &r, 1.0, &d, 2).unwrap();
        assert_eq!(er, 0.0);
        assert_eq!(stats.micro().f1, 1.0);
        let (er, _) = segment_error_rate(&r, &EventList::default(), 1.0, &d, 2).unwrap();
        assert_eq!(er, 1.0);
        assert_eq!(
            segment_f1_micro(&r, &EventList::default(), 1.0, &d, 2).unwrap(),
            0.0
        );
    }

    #[test]
    fn er_substitution_hand_case() {
        let r = events(&[("a", 0, 0.0, 1.0), ("a", 1, 0.0, 1.0)]);
        let p = events(&[("a", 0, 0.0, 1.0), ("a", 2, 0.0, 1.0)]);
        let d = durations(&[("a", 1.0)]);
        let (er, stats) = segment_error_rate(&r, &p, 1.0, &d, 3).unwrap();
        assert_eq!(er, 0.5);
        assert_eq!(
            stats.totals(),
            SegmentCounts {
                n: 2,
                s: 1,
                d: 0,
                i: 0
            }
        );
    }

    #[test]
    fn er_can_exceed_one_and_needs_reference() {
        let r = events(&[("a", 0, 0.0, 1.0)]);
        let p = events(&[("a", 0, 1.0, 4.0), ("a", 1, 0.0, 4.0)]);
        let d = durations(&[("a", 4.0)]);
        let (er, _) = segment_error_rate(&r, &p, 1.0, &d, 2).unwrap();
        assert!(er > 1.0);
        assert!(matches!(
            segment_error_rate(&EventList::default(), &p, 1.0, &d, 2),
            Err(Error::UndefinedMetric(_))
        ));
        let stray = events(&[("zzz", 0, 0.0, 1.0)]);
        assert!(segment_stats(&r, &stray, 1.0, &d, 2).is_err());
    }

    #[test]
    fn report_renders_every_class() {
        let r = events(&[("a", 0, 0.0, 2.0)]);
        let p = events(&[("a", 0, 1.0, 3.0)]);
        let d = durations(&[("a", 4.0)]);
        let stats = segment_stats(&r, &p, 1.0, &d, 2).unwrap();
        let names = vec!["Car".to_string(), "Train horn".to_string()];
        let rep = EvaluationReport::from_stats("sed", Some(1.0), &names, &stats, None);
        let text = rep.render_text();
        assert!(text.contains("Train horn"));
        assert!(text.contains("ER=1.000"));
        let json = serde_json::to_string(&rep).unwrap();
        let back: EvaluationReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
    }

    proptest! {
        #[test]
        fn sdi_balance(rows in prop::collection::vec(
            (prop::collection::vec(any::<bool>(), 4), prop::collection::vec(any::<bool>(), 4)), 1..30)
        ) {
            let mut stats = SegmentStats::new(4);
            for (r, p) in &rows {
                stats.push(r, p).unwrap();
            }
            let t = stats.totals();
            let pooled = stats.pooled();
            prop_assert_eq!(t.s + t.d, pooled.fn_);
            prop_assert_eq!(t.s + t.i, pooled.fp);
            if let Ok(er) = stats.error_rate() {
                prop_assert!(er >= 0.0);
                let identical = rows.iter().all(|(r, p)| r == p);
                prop_assert_eq!(er == 0.0, identical);
            }
            let mean: f64 = stats.class_prf().iter().map(|p| p.f1).sum::<f64>() / 4.0;
            prop_assert!((stats.macro_f1() - mean).abs() < 1e-15);
        }

        #[test]
        fn ap_invariant_under_monotone_transform(
            pairs in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..40)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(labels.iter().any(|&l| l));
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(
                average_precision(&scores, &labels).unwrap(),
                average_precision(&warped, &labels).unwrap()
            );
        }
    }
}
