//! WebAssembly bindings for the browser demo. Every operation takes the
//! same CSV text the command line reads and returns CSV or report text.

use wasm_bindgen::prelude::*;

use wsed_core::aggregation::{aggregate, AggregationMethod};
use wsed_core::decoding::{
    decode_events_with, ClassThresholds, DecodeOptions, EventList, ThresholdSet,
};
use wsed_core::io::{self, ClassRegistry, ClipTable, FrameTable};
use wsed_core::metrics::{segment_stats, ClipDurations, EvaluationReport};
use wsed_core::{Error, Result};

fn frames(text: &str) -> Result<FrameTable> {
    io::parse_frame_table(text, "frames")
}

/// Pools every clip in a frame table to clip probabilities. `weights` is
/// a second frame table of attention scores, ignored unless `method` is
/// `attention`.
pub fn aggregate_text(frames_csv: &str, method: &str, weights_csv: &str) -> Result<String> {
    let method: AggregationMethod = method.parse()?;
    let table = frames(frames_csv)?;
    let weights = if method == AggregationMethod::Attention {
        let w = frames(weights_csv)?;
        if w.classes != table.classes {
            return Err(Error::Validation("weights have different classes".into()));
        }
        Some(w.to_weights()?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for (id, m) in table.to_probs(1.0)? {
        let w = match &weights {
            Some(ws) => Some(
                ws.iter()
                    .find(|(c, _)| *c == id)
                    .map(|(_, w)| w)
                    .ok_or_else(|| Error::Validation(format!("no weights for clip '{id}'")))?,
            ),
            None => None,
        };
        let clip = aggregate(&m, method, w)?;
        rows.push((id, clip));
    }
    io::render_clip_probs(&ClipTable::from_probs(&table.classes, &rows))
}

/// Decodes events with one threshold triple shared by all classes. Clip
/// probabilities are max-pooled from the frames.
pub fn decode_text(
    frames_csv: &str,
    frame_duration: f64,
    mu: f64,
    tau_high: f64,
    tau_low: f64,
) -> Result<String> {
    let table = frames(frames_csv)?;
    let registry = ClassRegistry::new(table.classes.clone())?;
    let t = ClassThresholds {
        mu,
        tau_high,
        tau_low,
    };
    let thresholds = ThresholdSet::new(vec![t; registry.len()])?;
    let mut lists = Vec::new();
    for (id, m) in table.to_probs(frame_duration)? {
        let clip = aggregate(&m, AggregationMethod::Max, None)?;
        lists.push(decode_events_with(
            &id,
            &m,
            &clip,
            &thresholds,
            &DecodeOptions::default(),
        )?);
    }
    io::render_events(&io::EventTable::from_events(
        &EventList::merged(lists)?,
        &registry,
    )?)
}

/// Segment-based scores of predicted against reference events. Every
/// clip that appears in either table is `clip_duration` seconds long.
pub fn evaluate_text(
    reference_csv: &str,
    predicted_csv: &str,
    segment: f64,
    clip_duration: f64,
) -> Result<String> {
    let reference = io::parse_events(reference_csv, "reference")?;
    let predicted = io::parse_events(predicted_csv, "predicted")?;
    let mut names: Vec<String> = Vec::new();
    for n in reference
        .class_names()
        .into_iter()
        .chain(predicted.class_names())
    {
        if !names.contains(&n) {
            names.push(n);
        }
    }
    let registry = ClassRegistry::new(names.clone())?;
    let reference = reference.to_event_list(&registry)?;
    let predicted = predicted.to_event_list(&registry)?;
    let mut durations = ClipDurations::new();
    for e in reference.events().iter().chain(predicted.events()) {
        durations.insert(e.clip_id.clone(), clip_duration);
    }
    let stats = segment_stats(&reference, &predicted, segment, &durations, registry.len())?;
    Ok(EvaluationReport::from_stats("sed", Some(segment), &names, &stats, None).render_text())
}

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn aggregate_clips(
    frames_csv: &str,
    method: &str,
    weights_csv: &str,
) -> std::result::Result<String, JsError> {
    js(aggregate_text(frames_csv, method, weights_csv))
}

#[wasm_bindgen]
pub fn decode_events(
    frames_csv: &str,
    frame_duration: f64,
    mu: f64,
    tau_high: f64,
    tau_low: f64,
) -> std::result::Result<String, JsError> {
    js(decode_text(
        frames_csv,
        frame_duration,
        mu,
        tau_high,
        tau_low,
    ))
}

#[wasm_bindgen]
pub fn evaluate_events(
    reference_csv: &str,
    predicted_csv: &str,
    segment: f64,
    clip_duration: f64,
) -> std::result::Result<String, JsError> {
    js(evaluate_text(
        reference_csv,
        predicted_csv,
        segment,
        clip_duration,
    ))
}
