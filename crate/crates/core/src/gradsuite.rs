//! Finite-difference checks of every differentiable block on small
//! random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aggregation::{aggregate_on, global_weighted_average_on, AggregationMethod};
use crate::blocks::{
    glu_on, inception_attention_on, init_inception, transformer_encoder_on, GluBlockParams,
    GluVars, InceptionAttentionConfig, InceptionBranch, InceptionBranchVars, PreOp,
    TransformerLayerParams, TransformerOptions, TransformerVars,
};
use crate::error::{Error, Result};
use crate::tensor::{grad_check, GradCheckReport, Tensor, Var};
use crate::training::CLAMP_EPS;

/// Largest size of any tensor dimension in a suite instance.
pub const MAX_DIM: usize = 8;
/// Central-difference step. Smaller steps drown entries near 1e-6 in
/// rounding noise from the summed outputs; larger ones add truncation
/// error.
pub const DEFAULT_DELTA: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 20;

pub const BLOCKS: [&str; 7] = [
    "glu",
    "inception-attention",
    "transformer",
    "attention-aggregation",
    "global-weighted-average",
    "bce-clip",
    "bce-segment",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockReport {
    pub block: String,
    pub instances: usize,
    pub max_relative_error: f64,
    /// Instance index with the largest error.
    pub worst_instance: usize,
    /// Gradient entry behind the largest error.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn dim(r: &mut ChaCha8Rng, lo: usize) -> usize {
    r.random_range(lo..=MAX_DIM)
}

fn targets(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| if r.random_bool(0.5) { 1.0 } else { 0.0 })
}

fn glu_instance(r: &mut ChaCha8Rng, delta: f64) -> Result<GradCheckReport> {
    let (c_in, c_out) = (dim(r, 1), dim(r, 1));
    let (t, f) = (dim(r, 2), dim(r, 2));
    let kernel = (r.random_range(1..=3), r.random_range(1..=3));
    let x = random(&[c_in, t, f], r);
    let p = GluBlockParams::init(c_in, c_out, kernel, r);
    grad_check(
        |tape, v| {
            let y = glu_on(
                tape,
                v[0],
                GluVars {
                    w: v[1],
                    v: v[2],
                    b: v[3],
                    c: v[4],
                },
            )?;
            tape.sigmoid(y)
        },
        &[x, p.w, p.v, p.b, p.c],
        delta,
    )
}

/// The v1 branch layout (1x1, 3x3, 5x5, pool then 1x1) with a small
/// filter count per branch, plus a reduced branch.
fn inception_instance(r: &mut ChaCha8Rng, delta: f64) -> Result<GradCheckReport> {
    let c_in = dim(r, 1);
    let (t, f) = (dim(r, 2), dim(r, 2));
    let mut branches: Vec<InceptionBranch> = [
        (1, PreOp::None),
        (3, PreOp::None),
        (5, PreOp::None),
        (1, PreOp::AvgPool2x2),
        (3, PreOp::Conv1x1),
    ]
    .into_iter()
    .map(|(k, pre_op)| InceptionBranch {
        kernel: (k, k),
        filters: 1,
        pre_op,
    })
    .collect();
    for b in &mut branches {
        b.filters = r.random_range(1..=2);
    }
    let budget = branches.iter().map(|b| b.filters).sum();
    let cfg = InceptionAttentionConfig::custom(branches, budget)?;
    let params = init_inception(c_in, &cfg, r)?;
    let mut inputs = vec![random(&[c_in, t, f], r)];
    for p in &params {
        inputs.extend([
            p.glu.w.clone(),
            p.glu.v.clone(),
            p.glu.b.clone(),
            p.glu.c.clone(),
        ]);
        if let Some((k, b)) = &p.reduce {
            inputs.extend([k.clone(), b.clone()]);
        }
    }
    grad_check(
        |tape, v| {
            let mut idx = 1;
            let mut vars = Vec::with_capacity(cfg.branches.len());
            for b in &cfg.branches {
                let glu = GluVars {
                    w: v[idx],
                    v: v[idx + 1],
                    b: v[idx + 2],
                    c: v[idx + 3],
                };
                idx += 4;
                let reduce = if b.pre_op == PreOp::Conv1x1 {
                    idx += 2;
                    Some((v[idx - 2], v[idx - 1]))
                } else {
                    None
                };
                vars.push(InceptionBranchVars { reduce, glu });
            }
            let y = inception_attention_on(tape, v[0], &cfg, &vars)?;
            tape.sigmoid(y)
        },
        &inputs,
        delta,
    )
}

fn transformer_instance(r: &mut ChaCha8Rng, delta: f64) -> Result<GradCheckReport> {
    let options = TransformerOptions {
        residual: r.random_bool(0.5),
        layer_norm: r.random_bool(0.5),
    };
    let (t, c, d_k) = (dim(r, 1), dim(r, 2), dim(r, 1));
    let d_v = if options.residual { c } else { dim(r, 2) };
    let x = random(&[t, c], r);
    let p = TransformerLayerParams::init(c, d_k, d_v, r);
    grad_check(
        |tape, v| {
            let (h, _) = transformer_encoder_on(
                tape,
                v[0],
                TransformerVars {
                    w_q: v[1],
                    w_k: v[2],
                    w_v: v[3],
                },
                options,
            )?;
            tape.sigmoid(h)
        },
        &[x, p.w_q, p.w_k, p.w_v],
        delta,
    )
}

/// Frame logits and scores are leaves; frames pass through a sigmoid so
/// they stay probabilities.
fn attention_instance(r: &mut ChaCha8Rng, delta: f64) -> Result<GradCheckReport> {
    let (t, k) = (dim(r, 1), dim(r, 1));
    let y = targets(&[k], r);
    grad_check(
        |tape, v| {
            let frames = tape.sigmoid(v[0])?;
            let clip = aggregate_on(tape, frames, AggregationMethod::Attention, Some(v[1]))?;
            tape.bce(clip, &y, CLAMP_EPS)
        },
        &[random(&[t, k], r), random(&[t, k], r)],
        delta,
    )
}

fn gwa_instance(r: &mut ChaCha8Rng, delta: f64) -> Result<GradCheckReport> {
    let (t, k) = (dim(r, 1), dim(r, 1));
    let y = targets(&[k], r);
    grad_check(
        |tape, v| {
            let frames = tape.sigmoid(v[0])?;
            let loc = tape.exp(v[1])?;
            let clip = global_weighted_average_on(tape, frames, loc)?;
            tape.bce(clip, &y, CLAMP_EPS)
        },
        &[random(&[t, k], r), random(&[t, k], r)],
        delta,
    )
}

fn bce_clip_instance(r: &mut ChaCha8Rng, delta: f64) -> Result<GradCheckReport> {
    let (n, k) = (dim(r, 1), dim(r, 1));
    let y = targets(&[n, k], r);
    grad_check(
        |tape, v| {
            let p = tape.sigmoid(v[0])?;
            tape.bce(p, &y, CLAMP_EPS)
        },
        &[random(&[n, k], r)],
        delta,
    )
}

/// Every segment of a clip is scored against the clip's tags.
fn bce_segment_instance(r: &mut ChaCha8Rng, delta: f64) -> Result<GradCheckReport> {
    let (m, k) = (dim(r, 1), dim(r, 1));
    let y = targets(&[k], r);
    let inputs: Vec<Tensor> = (0..m).map(|_| random(&[k], r)).collect();
    grad_check(
        |tape, v| {
            let mut total: Option<Var> = None;
            for &s in v {
                let p = tape.sigmoid(s)?;
                let l = tape.bce(p, &y, CLAMP_EPS)?;
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            total.ok_or_else(|| Error::Argument("no segments".into()))
        },
        &inputs,
        delta,
    )
}

fn check_block(block: &str, r: &mut ChaCha8Rng, delta: f64) -> Result<GradCheckReport> {
    match block {
        "glu" => glu_instance(r, delta),
        "inception-attention" => inception_instance(r, delta),
        "transformer" => transformer_instance(r, delta),
        "attention-aggregation" => attention_instance(r, delta),
        "global-weighted-average" => gwa_instance(r, delta),
        "bce-clip" => bce_clip_instance(r, delta),
        "bce-segment" => bce_segment_instance(r, delta),
        other => Err(Error::Argument(format!("unknown block '{other}'"))),
    }
}

/// Runs `instances` seeded random checks of each block in `blocks`
/// (all of [`BLOCKS`] when empty).
pub fn gradient_suite(
    blocks: &[String],
    instances: usize,
    seed: u64,
    delta: f64,
) -> Result<Vec<BlockReport>> {
    if instances == 0 {
        return Err(Error::Argument("need at least one instance".into()));
    }
    let names: Vec<String> = if blocks.is_empty() {
        BLOCKS.iter().map(|s| s.to_string()).collect()
    } else {
        blocks.to_vec()
    };
    let mut out = Vec::with_capacity(names.len());
    for name in &names {
        // seeded by the block's fixed position, so a subset run sees the
        // same instances as the full suite
        let b = BLOCKS.iter().position(|x| x == name).ok_or_else(|| {
            Error::Argument(format!(
                "unknown block '{name}' (expected one of {})",
                BLOCKS.join(", ")
            ))
        })?;
        let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 * b as u64));
        let mut report = BlockReport {
            block: name.clone(),
            instances,
            max_relative_error: 0.0,
            worst_instance: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for i in 0..instances {
            let rep = check_block(name, &mut r, delta)?;
            if rep.max_relative_error > report.max_relative_error {
                report.max_relative_error = rep.max_relative_error;
                report.worst_instance = i;
                report.worst_analytic = rep.analytic;
                report.worst_numeric = rep.numeric;
            }
        }
        out.push(report);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_block_passes_a_few_instances() {
        for rep in gradient_suite(&[], 3, 5, DEFAULT_DELTA).unwrap() {
            assert!(rep.max_relative_error < 1e-4, "{rep:?}");
        }
    }

    #[test]
    fn subset_runs_see_the_same_instances() {
        let all = gradient_suite(&[], 2, 9, DEFAULT_DELTA).unwrap();
        let one = gradient_suite(&["transformer".into()], 2, 9, DEFAULT_DELTA).unwrap();
        assert_eq!(one[0], all[2]);
    }

    #[test]
    fn unknown_block_is_an_argument_error() {
        let e = gradient_suite(&["lstm".into()], 1, 0, DEFAULT_DELTA).unwrap_err();
        assert!(matches!(e, Error::Argument(_)));
        assert!(gradient_suite(&[], 0, 0, DEFAULT_DELTA).is_err());
    }
}
