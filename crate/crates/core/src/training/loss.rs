use std::ops::Range;

use super::LabelSet;
use crate::aggregation::ClipProbVector;
use crate::error::{Error, Result};
use crate::tensor::bce_value;

/// Predictions are clamped to `[CLAMP_EPS, 1 - CLAMP_EPS]` before the log.
pub const CLAMP_EPS: f64 = 1e-7;

/// Binary cross-entropy summed over clips and classes.
pub fn bce_clip_loss(preds: &[ClipProbVector], targets: &LabelSet) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::dim(format!(
            "{} predictions for {} labelled clips",
            preds.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (i, p) in preds.iter().enumerate() {
        total += clip_term(p, &targets.targets(i))?;
    }
    Ok(total)
}

fn clip_term(pred: &ClipProbVector, target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dim(format!(
            "prediction over {} classes, target over {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(bce_value(pred.values(), target, CLAMP_EPS))
}

/// Segment-wise loss: every segment of clip `n` inherits clip `n`'s tags.
/// `segments[n]` holds the segment predictions of clip `n`.
pub fn bce_segment_loss(segments: &[Vec<ClipProbVector>], targets: &LabelSet) -> Result<f64> {
    if segments.len() != targets.len() {
        return Err(Error::dim(format!(
            "segments for {} clips, labels for {}",
            segments.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (i, clip) in segments.iter().enumerate() {
        let t = targets.targets(i);
        for seg in clip {
            total += clip_term(seg, &t)?;
        }
    }
    Ok(total)
}

/// Consecutive frame windows of `segment_frames`; the last may be shorter.
pub fn split_segments(frames: usize, segment_frames: usize) -> Result<Vec<Range<usize>>> {
    if segment_frames == 0 {
        return Err(Error::Argument(
            "segment length must be at least one frame".into(),
        ));
    }
    Ok((0..frames)
        .step_by(segment_frames)
        .map(|s| s..(s + segment_frames).min(frames))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(tags: &[&[bool]]) -> LabelSet {
        LabelSet::new(
            tags.iter()
                .enumerate()
                .map(|(i, t)| (format!("c{i}"), t.to_vec()))
                .collect(),
        )
        .unwrap()
    }

    fn p(v: &[f64]) -> ClipProbVector {
        ClipProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_near_zero() {
        let l = labels(&[&[true, false], &[false, true]]);
        let loss = bce_clip_loss(&[p(&[1.0, 0.0]), p(&[0.0, 1.0])], &l).unwrap();
        let floor = 4.0 * -(1.0f64 - 1e-7).ln();
        assert!((loss - floor).abs() < 1e-15);
        assert!(loss < 1e-6);
    }

    #[test]
    fn half_predictions() {
        let l = labels(&[&[true, false, true], &[false, false, true]]);
        let loss = bce_clip_loss(&[p(&[0.5; 3]), p(&[0.5; 3])], &l).unwrap();
        assert!((loss - 6.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_entry() {
        let l = labels(&[&[true]]);
        let loss = bce_clip_loss(&[p(&[0.9])], &l).unwrap();
        assert!((loss - 0.105_360_515_657_826_3).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let l = labels(&[&[true, false]]);
        assert!(bce_clip_loss(&[p(&[0.5])], &l).is_err());
        assert!(bce_clip_loss(&[], &l).is_err());
    }

    #[test]
    fn segment_loss_reduces_to_clip_loss() {
        let l = labels(&[&[true, false], &[false, true]]);
        let preds = [p(&[0.8, 0.3]), p(&[0.1, 0.6])];
        let clip = bce_clip_loss(&preds, &l).unwrap();
        let one: Vec<Vec<ClipProbVector>> = preds.iter().map(|x| vec![x.clone()]).collect();
        assert_eq!(bce_segment_loss(&one, &l).unwrap(), clip);
        let two: Vec<Vec<ClipProbVector>> =
            preds.iter().map(|x| vec![x.clone(), x.clone()]).collect();
        assert!((bce_segment_loss(&two, &l).unwrap() - 2.0 * clip).abs() < 1e-12);
    }

    #[test]
    fn segment_loss_mixed_case() {
        let l = labels(&[&[true, false]]);
        let segs = vec![vec![p(&[0.9, 0.2]), p(&[0.4, 0.5])]];
        let expect = -(0.9f64.ln() + 0.8f64.ln() + 0.4f64.ln() + 0.5f64.ln());
        assert!((bce_segment_loss(&segs, &l).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn segments_cover_all_frames() {
        let s = split_segments(10, 4).unwrap();
        assert_eq!(s, vec![0..4, 4..8, 8..10]);
        assert!(split_segments(10, 0).is_err());
    }
}
