//! Text formats for manifests, features, probability tables, labels,
//! events, thresholds, model parameters and training logs.
//!
//! Every writer produces canonical text that its reader maps back to the
//! same value; writing that value again reproduces the text byte for
//! byte. Numbers use the shortest decimal that round-trips, except event
//! times, which carry three decimals. Readers report malformed input as
//! [`Error::Parse`] with a 1-based line number.

mod logs;
mod manifest;
mod params;
mod tables;
mod thresholds;

use std::path::Path;

pub use logs::{render_epoch_log, render_step_log, render_trace};
pub use manifest::{ClassRegistry, Manifest, ManifestClip, MANIFEST_VERSION};
pub use params::{parse_model, render_model, PARAMS_VERSION};
pub use tables::{
    parse_clip_probs, parse_events, parse_features, parse_frame_table, parse_weak_labels,
    render_clip_probs, render_events, render_features, render_frame_table, render_weak_labels,
    ClipTable, EventRow, EventTable, FrameTable,
};
pub use thresholds::{parse_thresholds, render_thresholds, ThresholdFile, THRESHOLDS_VERSION};

use crate::error::{Error, Result};

/// Shortest decimal that parses back to exactly `v`.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        // keep -0 and 0 on the same canonical text
        return "0".into();
    }
    format!("{v}")
}

pub(crate) fn parse_error(path: &str, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        reason: reason.into(),
    }
}

/// A finite number in the canonical form [`fmt_f64`] writes.
pub(crate) fn parse_f64(field: &str, path: &str, line: usize) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| parse_error(path, line, format!("'{field}' is not a number")))?;
    if !v.is_finite() {
        return Err(parse_error(path, line, format!("'{field}' is not finite")));
    }
    if fmt_f64(v) != field {
        return Err(parse_error(
            path,
            line,
            format!(
                "'{field}' is not in canonical form (expected '{}')",
                fmt_f64(v)
            ),
        ));
    }
    Ok(v)
}

pub(crate) fn parse_usize(field: &str, path: &str, line: usize) -> Result<usize> {
    let v: usize = field
        .parse()
        .map_err(|_| parse_error(path, line, format!("'{field}' is not an index")))?;
    if v.to_string() != field {
        return Err(parse_error(
            path,
            line,
            format!("'{field}' is not canonical"),
        ));
    }
    Ok(v)
}

/// Identifiers (clip ids, class names) are non-empty, have no outer
/// whitespace and avoid the delimiters `,` and `;`.
pub(crate) fn check_name(kind: &str, s: &str) -> Result<()> {
    let ok = !s.is_empty()
        && s.trim() == s
        && !s.contains([',', ';', '\n', '\r'])
        && !s.starts_with("- ");
    if ok {
        Ok(())
    } else {
        Err(Error::Validation(format!("invalid {kind} '{s}'")))
    }
}

/// Splits `text` into numbered lines. Every line must end with `\n` and
/// none may be empty.
pub(crate) fn numbered_lines<'a>(text: &'a str, path: &str) -> Result<Vec<(usize, &'a str)>> {
    if text.is_empty() {
        return Err(parse_error(path, 1, "file is empty"));
    }
    if !text.ends_with('\n') {
        let n = text.lines().count();
        return Err(parse_error(path, n, "missing final newline"));
    }
    let mut out = Vec::new();
    for (i, line) in text[..text.len() - 1].split('\n').enumerate() {
        if line.is_empty() {
            return Err(parse_error(path, i + 1, "empty line"));
        }
        if line.contains('\r') {
            return Err(parse_error(path, i + 1, "carriage return in line"));
        }
        out.push((i + 1, line));
    }
    Ok(out)
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::InvalidData => parse_error(&path.display().to_string(), 0, "not UTF-8"),
        _ => Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        )),
    })
}

/// Writes through a temporary file in the target directory and renames
/// it into place, so a failed run leaves no partial file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
