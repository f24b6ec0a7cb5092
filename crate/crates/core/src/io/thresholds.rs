use std::fmt::Write as _;

use super::{check_name, fmt_f64, numbered_lines, parse_error, parse_f64, ClassRegistry};
use crate::decoding::{ClassThresholds, ThresholdSet};
use crate::error::{Error, Result};

pub const THRESHOLDS_VERSION: u32 = 1;
const HEADER: &str = "name,mu,tau_high,tau_low";

/// Named per-class thresholds:
///
/// ```text
/// version: 1
/// name,mu,tau_high,tau_low
/// Car,0.5,0.3,0.1
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdFile {
    pub entries: Vec<(String, ClassThresholds)>,
}

impl ThresholdFile {
    pub fn from_set(set: &ThresholdSet, registry: &ClassRegistry) -> Result<Self> {
        if set.len() != registry.len() {
            return Err(Error::dim(format!(
                "{} threshold triples for {} classes",
                set.len(),
                registry.len()
            )));
        }
        Ok(Self {
            entries: registry
                .names()
                .iter()
                .cloned()
                .zip(set.classes().iter().copied())
                .collect(),
        })
    }

    /// Orders the entries by `registry`. Every class needs an entry and
    /// every entry needs a known class.
    pub fn to_set(&self, registry: &ClassRegistry) -> Result<ThresholdSet> {
        let mut slots: Vec<Option<ClassThresholds>> = vec![None; registry.len()];
        for (name, t) in &self.entries {
            slots[registry.index(name)?] = Some(*t);
        }
        let classes = slots
            .into_iter()
            .enumerate()
            .map(|(k, s)| {
                s.ok_or_else(|| {
                    Error::Validation(format!("no thresholds for class '{}'", registry.name(k)))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ThresholdSet::new(classes)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }
}

pub fn render_thresholds(file: &ThresholdFile) -> Result<String> {
    let mut out = format!("version: {THRESHOLDS_VERSION}\n{HEADER}\n");
    for (i, (name, t)) in file.entries.iter().enumerate() {
        check_name("class name", name)?;
        if file.entries[..i].iter().any(|(n, _)| n == name) {
            return Err(Error::Validation(format!("duplicate class '{name}'")));
        }
        t.validate()?;
        let _ = writeln!(
            out,
            "{name},{},{},{}",
            fmt_f64(t.mu),
            fmt_f64(t.tau_high),
            fmt_f64(t.tau_low)
        );
    }
    Ok(out)
}

/// Reads a threshold file; values outside `[0, 1]` or `tau_low >
/// tau_high` are validation errors.
pub fn parse_thresholds(text: &str, path: &str) -> Result<ThresholdFile> {
    let lines = numbered_lines(text, path)?;
    let version = format!("version: {THRESHOLDS_VERSION}");
    if lines[0].1 != version {
        return Err(parse_error(path, 1, format!("expected '{version}'")));
    }
    match lines.get(1) {
        Some(&(_, l)) if l == HEADER => {}
        _ => return Err(parse_error(path, 2, format!("expected header '{HEADER}'"))),
    }
    let mut entries: Vec<(String, ClassThresholds)> = Vec::new();
    for &(n, l) in &lines[2..] {
        let fields: Vec<&str> = l.split(',').collect();
        if fields.len() != 4 {
            return Err(parse_error(
                path,
                n,
                format!("expected 4 fields, got {}", fields.len()),
            ));
        }
        let name = fields[0];
        check_name("class name", name).map_err(|e| parse_error(path, n, e.to_string()))?;
        if entries.iter().any(|(x, _)| x == name) {
            return Err(parse_error(path, n, format!("duplicate class '{name}'")));
        }
        let t = ClassThresholds {
            mu: parse_f64(fields[1], path, n)?,
            tau_high: parse_f64(fields[2], path, n)?,
            tau_low: parse_f64(fields[3], path, n)?,
        };
        t.validate()
            .map_err(|e| Error::Validation(format!("{path}:{n}: {e}")))?;
        entries.push((name.to_string(), t));
    }
    Ok(ThresholdFile { entries })
}
