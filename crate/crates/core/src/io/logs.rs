use std::fmt::Write as _;

use super::fmt_f64;
use crate::threshopt::TraceEntry;
use crate::training::{EpochLog, StepLog};

/// `step,loss,learning_rate` rows.
pub fn render_step_log(steps: &[StepLog]) -> String {
    let mut out = String::from("step,loss,learning_rate\n");
    for s in steps {
        let _ = writeln!(
            out,
            "{},{},{}",
            s.step,
            fmt_f64(s.loss),
            fmt_f64(s.learning_rate)
        );
    }
    out
}

/// `epoch,loss,validation_loss,learning_rate` rows; a missing
/// validation loss is an empty field.
pub fn render_epoch_log(epochs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss,validation_loss,learning_rate\n");
    for e in epochs {
        let v = e.validation_loss.map(fmt_f64).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{v},{}",
            e.epoch,
            fmt_f64(e.loss),
            fmt_f64(e.learning_rate)
        );
    }
    out
}

/// `iteration,pass,objective` followed by `mu`, `tau_high`, `tau_low`
/// columns for every class.
pub fn render_trace(trace: &[TraceEntry], class_names: &[String]) -> String {
    let mut out = String::from("iteration,pass,objective");
    for n in class_names {
        let _ = write!(out, ",{n}:mu,{n}:tau_high,{n}:tau_low");
    }
    out.push('\n');
    for e in trace {
        let _ = write!(out, "{},{},{}", e.iteration, e.pass, fmt_f64(e.objective));
        for v in e.thresholds.to_vec() {
            let _ = write!(out, ",{}", fmt_f64(v));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::ThresholdSet;

    #[test]
    fn step_log_rows() {
        let s = [StepLog {
            step: 1,
            loss: 0.5,
            learning_rate: 0.001,
        }];
        assert_eq!(
            render_step_log(&s),
            "step,loss,learning_rate\n1,0.5,0.001\n"
        );
    }

    #[test]
    fn trace_columns() {
        let t = [TraceEntry {
            iteration: 0,
            pass: 0,
            objective: -0.5,
            thresholds: ThresholdSet::defaults(1),
        }];
        assert_eq!(
            render_trace(&t, &["Car".into()]),
            "iteration,pass,objective,Car:mu,Car:tau_high,Car:tau_low\n0,0,-0.5,0.5,0.3,0.1\n"
        );
    }
}
