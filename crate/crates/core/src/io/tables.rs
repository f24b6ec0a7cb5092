use std::fmt::Write as _;

use super::ClassRegistry;
use super::{check_name, fmt_f64, numbered_lines, parse_error, parse_f64, parse_usize};
use crate::aggregation::{AttentionWeights, ClipProbVector, FrameProbMatrix};
use crate::decoding::{Event, EventList};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn header_classes(line: (usize, &str), lead: &[&str], path: &str) -> Result<Vec<String>> {
    let (n, l) = line;
    let fields: Vec<&str> = l.split(',').collect();
    if fields.len() <= lead.len() || fields[..lead.len()] != *lead {
        return Err(parse_error(
            path,
            n,
            format!("header must be '{},<class...>'", lead.join(",")),
        ));
    }
    let names: Vec<String> = fields[lead.len()..].iter().map(|s| s.to_string()).collect();
    ClassRegistry::new(names.clone()).map_err(|e| parse_error(path, n, e.to_string()))?;
    Ok(names)
}

fn check_width(fields: &[&str], width: usize, path: &str, n: usize) -> Result<()> {
    if fields.len() != width {
        return Err(parse_error(
            path,
            n,
            format!("expected {width} fields, got {}", fields.len()),
        ));
    }
    Ok(())
}

/// Per-frame values for several clips under one class header
/// `clip_id,frame_idx,<class...>`. Used for frame probabilities and for
/// attention weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameTable {
    pub classes: Vec<String>,
    /// Clip id and its `T x K` rows, in file order.
    pub clips: Vec<(String, Vec<Vec<f64>>)>,
}

impl FrameTable {
    pub fn from_probs(classes: &[String], clips: &[(String, FrameProbMatrix)]) -> Self {
        Self {
            classes: classes.to_vec(),
            clips: clips
                .iter()
                .map(|(id, m)| (id.clone(), m.tensor().rows()))
                .collect(),
        }
    }

    /// Frame probabilities; values outside `[0, 1]` are validation errors.
    pub fn to_probs(&self, frame_duration: f64) -> Result<Vec<(String, FrameProbMatrix)>> {
        self.clips
            .iter()
            .map(|(id, rows)| {
                FrameProbMatrix::from_rows(rows, frame_duration)
                    .map(|m| (id.clone(), m))
                    .map_err(|e| Error::Validation(format!("clip '{id}': {e}")))
            })
            .collect()
    }

    pub fn to_weights(&self) -> Result<Vec<(String, AttentionWeights)>> {
        self.clips
            .iter()
            .map(|(id, rows)| {
                AttentionWeights::from_rows(rows)
                    .map(|w| (id.clone(), w))
                    .map_err(|e| Error::Validation(format!("clip '{id}': {e}")))
            })
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<&[Vec<f64>]> {
        self.clips
            .iter()
            .find(|(c, _)| c == id)
            .map(|(_, r)| r.as_slice())
    }
}

pub fn render_frame_table(table: &FrameTable) -> Result<String> {
    ClassRegistry::new(table.classes.clone())?;
    let mut out = format!("clip_id,frame_idx,{}\n", table.classes.join(","));
    for (i, (id, rows)) in table.clips.iter().enumerate() {
        check_name("clip id", id)?;
        if table.clips[..i].iter().any(|(c, _)| c == id) {
            return Err(Error::Validation(format!("duplicate clip id '{id}'")));
        }
        if rows.is_empty() {
            return Err(Error::Validation(format!("clip '{id}' has no frames")));
        }
        for (t, row) in rows.iter().enumerate() {
            if row.len() != table.classes.len() || row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "clip '{id}' frame {t} is malformed"
                )));
            }
            let values: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
            let _ = writeln!(out, "{id},{t},{}", values.join(","));
        }
    }
    Ok(out)
}

pub fn parse_frame_table(text: &str, path: &str) -> Result<FrameTable> {
    let lines = numbered_lines(text, path)?;
    let classes = header_classes(lines[0], &["clip_id", "frame_idx"], path)?;
    let width = classes.len() + 2;
    let mut clips: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for &(n, l) in &lines[1..] {
        let fields: Vec<&str> = l.split(',').collect();
        check_width(&fields, width, path, n)?;
        let id = fields[0];
        check_name("clip id", id).map_err(|e| parse_error(path, n, e.to_string()))?;
        let frame = parse_usize(fields[1], path, n)?;
        let continuing = clips.last().is_some_and(|(c, _)| c == id);
        if !continuing {
            if clips.iter().any(|(c, _)| c == id) {
                return Err(parse_error(
                    path,
                    n,
                    format!("rows of clip '{id}' are not contiguous"),
                ));
            }
            clips.push((id.to_string(), Vec::new()));
        }
        let rows = &mut clips.last_mut().unwrap_or_else(|| unreachable!()).1;
        if frame != rows.len() {
            return Err(parse_error(
                path,
                n,
                format!("expected frame {} of clip '{id}', got {frame}", rows.len()),
            ));
        }
        let values = fields[2..]
            .iter()
            .map(|f| parse_f64(f, path, n))
            .collect::<Result<Vec<_>>>()?;
        rows.push(values);
    }
    Ok(FrameTable { classes, clips })
}

/// One row of values per clip under the header `clip_id,<class...>`.
/// Holds clip probabilities or 0/1 weak labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClipTable {
    pub classes: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl ClipTable {
    pub fn from_probs(classes: &[String], rows: &[(String, ClipProbVector)]) -> Self {
        Self {
            classes: classes.to_vec(),
            rows: rows
                .iter()
                .map(|(id, p)| (id.clone(), p.values().to_vec()))
                .collect(),
        }
    }

    pub fn from_tags(classes: &[String], rows: &[(String, Vec<bool>)]) -> Self {
        Self {
            classes: classes.to_vec(),
            rows: rows
                .iter()
                .map(|(id, t)| (id.clone(), t.iter().map(|&b| b as u8 as f64).collect()))
                .collect(),
        }
    }

    pub fn to_probs(&self) -> Result<Vec<(String, ClipProbVector)>> {
        self.rows
            .iter()
            .map(|(id, v)| ClipProbVector::new(v.clone()).map(|p| (id.clone(), p)))
            .collect()
    }

    pub fn to_tags(&self) -> Vec<(String, Vec<bool>)> {
        self.rows
            .iter()
            .map(|(id, v)| (id.clone(), v.iter().map(|&x| x == 1.0).collect()))
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.rows
            .iter()
            .find(|(c, _)| c == id)
            .map(|(_, r)| r.as_slice())
    }
}

fn render_clip_table(table: &ClipTable, check: impl Fn(f64) -> bool, what: &str) -> Result<String> {
    ClassRegistry::new(table.classes.clone())?;
    let mut out = format!("clip_id,{}\n", table.classes.join(","));
    for (i, (id, row)) in table.rows.iter().enumerate() {
        check_name("clip id", id)?;
        if table.rows[..i].iter().any(|(c, _)| c == id) {
            return Err(Error::Validation(format!("duplicate clip id '{id}'")));
        }
        if row.len() != table.classes.len() {
            return Err(Error::Validation(format!(
                "clip '{id}' has {} values",
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|&&v| !check(v)) {
            return Err(Error::Validation(format!(
                "clip '{id}': {v} is not a valid {what}"
            )));
        }
        let values: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        let _ = writeln!(out, "{id},{}", values.join(","));
    }
    Ok(out)
}

fn parse_clip_table(
    text: &str,
    path: &str,
    field: impl Fn(&str, usize) -> Result<f64>,
) -> Result<ClipTable> {
    let lines = numbered_lines(text, path)?;
    let classes = header_classes(lines[0], &["clip_id"], path)?;
    let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
    for &(n, l) in &lines[1..] {
        let fields: Vec<&str> = l.split(',').collect();
        check_width(&fields, classes.len() + 1, path, n)?;
        let id = fields[0];
        check_name("clip id", id).map_err(|e| parse_error(path, n, e.to_string()))?;
        if rows.iter().any(|(c, _)| c == id) {
            return Err(parse_error(path, n, format!("duplicate clip id '{id}'")));
        }
        let values = fields[1..]
            .iter()
            .map(|f| field(f, n))
            .collect::<Result<Vec<_>>>()?;
        rows.push((id.to_string(), values));
    }
    Ok(ClipTable { classes, rows })
}

pub fn render_clip_probs(table: &ClipTable) -> Result<String> {
    render_clip_table(table, |v| (0.0..=1.0).contains(&v), "probability")
}

/// Clip probabilities; values outside `[0, 1]` are validation errors.
pub fn parse_clip_probs(text: &str, path: &str) -> Result<ClipTable> {
    parse_clip_table(text, path, |f, n| {
        let v = parse_f64(f, path, n)?;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Validation(format!(
                "{path}:{n}: probability {v} outside [0, 1]"
            )));
        }
        Ok(v)
    })
}

pub fn render_weak_labels(table: &ClipTable) -> Result<String> {
    render_clip_table(table, |v| v == 0.0 || v == 1.0, "tag")
}

/// Weak labels; every value is `0` or `1`.
pub fn parse_weak_labels(text: &str, path: &str) -> Result<ClipTable> {
    parse_clip_table(text, path, |f, n| match f {
        "0" => Ok(0.0),
        "1" => Ok(1.0),
        other => Err(parse_error(path, n, format!("tag '{other}' is not 0 or 1"))),
    })
}

/// An event row with its class still given by name.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRow {
    pub clip_id: String,
    pub class_name: String,
    pub onset: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventTable {
    pub rows: Vec<EventRow>,
}

impl EventTable {
    pub fn from_events(events: &EventList, registry: &ClassRegistry) -> Result<Self> {
        let rows = events
            .events()
            .iter()
            .map(|e| {
                if e.class >= registry.len() {
                    return Err(Error::Registry(format!("class index {}", e.class)));
                }
                Ok(EventRow {
                    clip_id: e.clip_id.clone(),
                    class_name: registry.name(e.class).to_string(),
                    onset: e.onset,
                    offset: e.offset,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    /// Resolves class names; an unknown name is a registry error.
    pub fn to_event_list(&self, registry: &ClassRegistry) -> Result<EventList> {
        let events = self
            .rows
            .iter()
            .map(|r| {
                Event::new(
                    r.clip_id.clone(),
                    registry.index(&r.class_name)?,
                    r.onset,
                    r.offset,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        EventList::new(events)
    }

    /// Class names in order of first appearance.
    pub fn class_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.class_name) {
                names.push(r.class_name.clone());
            }
        }
        names
    }
}

fn fmt_time(v: f64) -> String {
    format!("{v:.3}")
}

pub fn render_events(table: &EventTable) -> Result<String> {
    let mut out = String::from("clip_id,class_name,onset_sec,offset_sec\n");
    for r in &table.rows {
        check_name("clip id", &r.clip_id)?;
        check_name("class name", &r.class_name)?;
        let (on, off) = (fmt_time(r.onset), fmt_time(r.offset));
        let rounded_empty = off.parse::<f64>().ok() <= on.parse::<f64>().ok();
        if !(r.onset >= 0.0 && r.offset.is_finite()) || rounded_empty {
            return Err(Error::Validation(format!(
                "event {}/{} has invalid span [{on}, {off})",
                r.clip_id, r.class_name
            )));
        }
        let _ = writeln!(out, "{},{},{on},{off}", r.clip_id, r.class_name);
    }
    Ok(out)
}

fn parse_time(field: &str, path: &str, line: usize) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| parse_error(path, line, format!("'{field}' is not a time")))?;
    if !v.is_finite() || fmt_time(v) != field {
        return Err(parse_error(
            path,
            line,
            format!("time '{field}' must have exactly three decimals"),
        ));
    }
    Ok(v)
}

pub fn parse_events(text: &str, path: &str) -> Result<EventTable> {
    let lines = numbered_lines(text, path)?;
    let (n0, header) = lines[0];
    if header != "clip_id,class_name,onset_sec,offset_sec" {
        return Err(parse_error(
            path,
            n0,
            "header must be 'clip_id,class_name,onset_sec,offset_sec'",
        ));
    }
    let mut rows = Vec::with_capacity(lines.len() - 1);
    for &(n, l) in &lines[1..] {
        let fields: Vec<&str> = l.split(',').collect();
        check_width(&fields, 4, path, n)?;
        for (kind, f) in [("clip id", fields[0]), ("class name", fields[1])] {
            check_name(kind, f).map_err(|e| parse_error(path, n, e.to_string()))?;
        }
        let onset = parse_time(fields[2], path, n)?;
        let offset = parse_time(fields[3], path, n)?;
        if onset < 0.0 || offset <= onset {
            return Err(Error::Validation(format!(
                "{path}:{n}: event span [{onset}, {offset}) is empty or negative"
            )));
        }
        rows.push(EventRow {
            clip_id: fields[0].to_string(),
            class_name: fields[1].to_string(),
            onset,
            offset,
        });
    }
    Ok(EventTable { rows })
}

/// `T x F` features: header `frame_idx,bin0,...`, one row per frame.
pub fn render_features(features: &Tensor) -> Result<String> {
    features.expect_rank(2, "feature matrix")?;
    let (t, f) = (features.shape()[0], features.shape()[1]);
    if t == 0 || f == 0 || !features.is_finite() {
        return Err(Error::Validation(
            "feature matrix must be non-empty and finite".into(),
        ));
    }
    let bins: Vec<String> = (0..f).map(|b| format!("bin{b}")).collect();
    let mut out = format!("frame_idx,{}\n", bins.join(","));
    for (i, row) in features.rows().iter().enumerate() {
        let values: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        let _ = writeln!(out, "{i},{}", values.join(","));
    }
    Ok(out)
}

pub fn parse_features(text: &str, path: &str) -> Result<Tensor> {
    let lines = numbered_lines(text, path)?;
    let (n0, header) = lines[0];
    let fields: Vec<&str> = header.split(',').collect();
    let bins = fields.len() - 1;
    let expected: Vec<String> = std::iter::once("frame_idx".to_string())
        .chain((0..bins).map(|b| format!("bin{b}")))
        .collect();
    if bins == 0 || fields != expected {
        return Err(parse_error(
            path,
            n0,
            "header must be 'frame_idx,bin0,bin1,...'",
        ));
    }
    if lines.len() < 2 {
        return Err(parse_error(path, n0, "no frames"));
    }
    let mut data = Vec::with_capacity((lines.len() - 1) * bins);
    for (i, &(n, l)) in lines[1..].iter().enumerate() {
        let fields: Vec<&str> = l.split(',').collect();
        check_width(&fields, bins + 1, path, n)?;
        if parse_usize(fields[0], path, n)? != i {
            return Err(parse_error(path, n, format!("expected frame {i}")));
        }
        for f in &fields[1..] {
            data.push(parse_f64(f, path, n)?);
        }
    }
    Tensor::new(vec![lines.len() - 1, bins], data)
}
