//! Neural building blocks: gated convolutions, inception-attention,
//! a single-head transformer encoder layer and the two frame-level heads.
//!
//! Each block has a tape-level form (`*_on`) used for training and a pure
//! `*_forward` wrapper that evaluates it once.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Padding, PoolMode, Tape, Tensor, Var};

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

/// Tape handles for every tensor of a [`ParamSet`], in the same order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl ParamVars {
    #[cfg(test)]
    pub(crate) fn from_parts(names: Vec<String>, vars: Vec<Var>) -> Self {
        Self { names, vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::dim(format!(
                "flat parameter vector has {} values, expected {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        for (_, t) in &mut self.entries {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            names: self.entries.iter().map(|(n, _)| n.clone()).collect(),
            vars: self
                .entries
                .iter()
                .map(|(_, t)| tape.leaf(t.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamSet) {
        for (n, t) in other.entries {
            self.insert(n, t);
        }
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// Kernels `w`, `v` (`C_out x C_in x kh x kw`) and biases `b`, `c` of a
/// gated convolution `(w*x + b) . sigmoid(v*x + c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GluBlockParams {
    pub w: Tensor,
    pub v: Tensor,
    pub b: Tensor,
    pub c: Tensor,
}

impl GluBlockParams {
    pub fn new(w: Tensor, v: Tensor, b: Tensor, c: Tensor) -> Result<Self> {
        w.expect_rank(4, "GLU kernel")?;
        w.expect_same_shape(&v, "GLU kernels W and V")?;
        let c_out = w.shape()[0];
        if b.len() != c_out || c.len() != c_out {
            return Err(Error::dim(format!(
                "GLU biases must have {c_out} entries, got {} and {}",
                b.len(),
                c.len()
            )));
        }
        Ok(Self { w, v, b, c })
    }

    pub fn init<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let shape = [c_out, c_in, kernel.0, kernel.1];
        let fan_in = c_in * kernel.0 * kernel.1;
        Self {
            w: init_uniform(&shape, fan_in, rng),
            v: init_uniform(&shape, fan_in, rng),
            b: init_uniform(&[c_out], fan_in, rng),
            c: init_uniform(&[c_out], fan_in, rng),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn insert_into(&self, set: &mut ParamSet, prefix: &str) {
        set.insert(format!("{prefix}.w"), self.w.clone());
        set.insert(format!("{prefix}.v"), self.v.clone());
        set.insert(format!("{prefix}.b"), self.b.clone());
        set.insert(format!("{prefix}.c"), self.c.clone());
    }

    pub fn from_set(set: &ParamSet, prefix: &str) -> Result<Self> {
        let get = |s: &str| {
            set.get(&format!("{prefix}.{s}"))
                .cloned()
                .ok_or_else(|| Error::Config(format!("missing parameter '{prefix}.{s}'")))
        };
        Self::new(get("w")?, get("v")?, get("b")?, get("c")?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GluVars {
    pub w: Var,
    pub v: Var,
    pub b: Var,
    pub c: Var,
}

impl GluVars {
    pub fn lookup(vars: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(Self {
            w: vars.get(&format!("{prefix}.w"))?,
            v: vars.get(&format!("{prefix}.v"))?,
            b: vars.get(&format!("{prefix}.b"))?,
            c: vars.get(&format!("{prefix}.c"))?,
        })
    }

    pub fn register(p: &GluBlockParams, tape: &mut Tape) -> Self {
        Self {
            w: tape.leaf(p.w.clone()),
            v: tape.leaf(p.v.clone()),
            b: tape.leaf(p.b.clone()),
            c: tape.leaf(p.c.clone()),
        }
    }
}

/// Gated convolution on a `C x T x F` input with same padding.
pub fn glu_on(tape: &mut Tape, x: Var, p: GluVars) -> Result<Var> {
    let lin = tape.conv2d(x, p.w, Padding::Same)?;
    let lin = tape.add_bias(lin, p.b, 0)?;
    let gate = tape.conv2d(x, p.v, Padding::Same)?;
    let gate = tape.add_bias(gate, p.c, 0)?;
    let gate = tape.sigmoid(gate)?;
    tape.mul(lin, gate)
}

pub fn glu_forward(x: &Tensor, params: &GluBlockParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let p = GluVars::register(params, &mut tape);
    let y = glu_on(&mut tape, xv, p)?;
    Ok(tape.value(y).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreOp {
    None,
    /// Linear 1x1 convolution down to the branch's filter count.
    Conv1x1,
    /// 2x2 average pooling with stride 1 (size preserving).
    AvgPool2x2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InceptionBranch {
    pub kernel: (usize, usize),
    pub filters: usize,
    pub pre_op: PreOp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InceptionVariant {
    V1,
    V2,
    V3,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InceptionAttentionConfig {
    pub variant: InceptionVariant,
    pub branches: Vec<InceptionBranch>,
    pub budget: usize,
}

pub const DEFAULT_FILTER_BUDGET: usize = 64;

impl InceptionAttentionConfig {
    fn branch(kernel: usize, filters: usize, pre_op: PreOp) -> InceptionBranch {
        InceptionBranch {
            kernel: (kernel, kernel),
            filters,
            pre_op,
        }
    }

    /// 1x1:16, 3x3:32, 5x5:8, pool then 1x1:8.
    pub fn v1() -> Self {
        use PreOp::*;
        Self {
            variant: InceptionVariant::V1,
            branches: vec![
                Self::branch(1, 16, None),
                Self::branch(3, 32, None),
                Self::branch(5, 8, None),
                Self::branch(1, 8, AvgPool2x2),
            ],
            budget: DEFAULT_FILTER_BUDGET,
        }
    }

    /// v1 with 8 of the 3x3 filters moved to a 15x15 branch.
    pub fn v2() -> Self {
        use PreOp::*;
        Self {
            variant: InceptionVariant::V2,
            branches: vec![
                Self::branch(1, 16, None),
                Self::branch(3, 24, None),
                Self::branch(5, 8, None),
                Self::branch(15, 8, None),
                Self::branch(1, 8, AvgPool2x2),
            ],
            budget: DEFAULT_FILTER_BUDGET,
        }
    }

    /// v2 with a further 8 of the 3x3 filters moved to a 25x25 branch.
    pub fn v3() -> Self {
        use PreOp::*;
        Self {
            variant: InceptionVariant::V3,
            branches: vec![
                Self::branch(1, 16, None),
                Self::branch(3, 16, None),
                Self::branch(5, 8, None),
                Self::branch(15, 8, None),
                Self::branch(25, 8, None),
                Self::branch(1, 8, AvgPool2x2),
            ],
            budget: DEFAULT_FILTER_BUDGET,
        }
    }

    pub fn custom(branches: Vec<InceptionBranch>, budget: usize) -> Result<Self> {
        let cfg = Self {
            variant: InceptionVariant::Custom,
            branches,
            budget,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Config(
                "inception block needs at least one branch".into(),
            ));
        }
        let total: usize = self.branches.iter().map(|b| b.filters).sum();
        if total != self.budget {
            return Err(Error::Config(format!(
                "inception branch filters sum to {total}, budget is {}",
                self.budget
            )));
        }
        if self
            .branches
            .iter()
            .any(|b| b.filters == 0 || b.kernel.0 == 0 || b.kernel.1 == 0)
        {
            return Err(Error::Config(
                "inception branch with zero filters or kernel".into(),
            ));
        }
        Ok(())
    }
}

/// Parameters of one inception branch: the optional 1x1 reduction
/// (`kernel`, `bias`) and the gated convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct InceptionBranchParams {
    pub reduce: Option<(Tensor, Tensor)>,
    pub glu: GluBlockParams,
}

impl InceptionBranchParams {
    pub fn init<R: Rng + ?Sized>(c_in: usize, branch: &InceptionBranch, rng: &mut R) -> Self {
        let (reduce, glu_in) = match branch.pre_op {
            PreOp::Conv1x1 => {
                let k = init_uniform(&[branch.filters, c_in, 1, 1], c_in, rng);
                let b = init_uniform(&[branch.filters], c_in, rng);
                (Some((k, b)), branch.filters)
            }
            _ => (None, c_in),
        };
        Self {
            reduce,
            glu: GluBlockParams::init(glu_in, branch.filters, branch.kernel, rng),
        }
    }

    pub fn insert_into(&self, set: &mut ParamSet, prefix: &str) {
        if let Some((k, b)) = &self.reduce {
            set.insert(format!("{prefix}.reduce.k"), k.clone());
            set.insert(format!("{prefix}.reduce.b"), b.clone());
        }
        self.glu.insert_into(set, &format!("{prefix}.glu"));
    }
}

pub fn init_inception<R: Rng + ?Sized>(
    c_in: usize,
    config: &InceptionAttentionConfig,
    rng: &mut R,
) -> Result<Vec<InceptionBranchParams>> {
    config.validate()?;
    Ok(config
        .branches
        .iter()
        .map(|b| InceptionBranchParams::init(c_in, b, rng))
        .collect())
}

/// Tape handles for one branch.
#[derive(Debug, Clone, Copy)]
pub struct InceptionBranchVars {
    pub reduce: Option<(Var, Var)>,
    pub glu: GluVars,
}

impl InceptionBranchVars {
    pub fn lookup(vars: &ParamVars, prefix: &str, branch: &InceptionBranch) -> Result<Self> {
        let reduce = match branch.pre_op {
            PreOp::Conv1x1 => Some((
                vars.get(&format!("{prefix}.reduce.k"))?,
                vars.get(&format!("{prefix}.reduce.b"))?,
            )),
            _ => None,
        };
        Ok(Self {
            reduce,
            glu: GluVars::lookup(vars, &format!("{prefix}.glu"))?,
        })
    }
}

pub fn inception_attention_on(
    tape: &mut Tape,
    x: Var,
    config: &InceptionAttentionConfig,
    branches: &[InceptionBranchVars],
) -> Result<Var> {
    config.validate()?;
    if branches.len() != config.branches.len() {
        return Err(Error::Config(format!(
            "{} branch parameter sets for {} configured branches",
            branches.len(),
            config.branches.len()
        )));
    }
    let mut outs = Vec::with_capacity(branches.len());
    for (cfg, p) in config.branches.iter().zip(branches) {
        let mut h = x;
        match cfg.pre_op {
            PreOp::None => {}
            PreOp::AvgPool2x2 => h = tape.avg_pool2d(h, (2, 2), PoolMode::Same)?,
            PreOp::Conv1x1 => {
                let (k, b) = p
                    .reduce
                    .ok_or_else(|| Error::Config("1x1 pre-op without reduction weights".into()))?;
                h = tape.conv2d(h, k, Padding::Same)?;
                h = tape.add_bias(h, b, 0)?;
            }
        }
        let y = glu_on(tape, h, p.glu)?;
        if tape.value(y).shape()[0] != cfg.filters {
            return Err(Error::Config(format!(
                "branch produced {} channels, configured {}",
                tape.value(y).shape()[0],
                cfg.filters
            )));
        }
        outs.push(y);
    }
    tape.concat(&outs, 0)
}

pub fn inception_attention_forward(
    x: &Tensor,
    config: &InceptionAttentionConfig,
    params: &[InceptionBranchParams],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let vars: Vec<InceptionBranchVars> = params
        .iter()
        .map(|p| InceptionBranchVars {
            reduce: p
                .reduce
                .as_ref()
                .map(|(k, b)| (tape.leaf(k.clone()), tape.leaf(b.clone()))),
            glu: GluVars::register(&p.glu, &mut tape),
        })
        .collect();
    let y = inception_attention_on(&mut tape, xv, config, &vars)?;
    Ok(tape.value(y).clone())
}

/// Projections of a single-head self-attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayerParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

/// Optional wrapping of the attention output; both off by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TransformerOptions {
    /// Adds the layer input to the output (requires `d_v == C`).
    pub residual: bool,
    /// Row-wise normalization of the (possibly residual) output.
    pub layer_norm: bool,
}

impl TransformerLayerParams {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Result<Self> {
        for (m, name) in [(&w_q, "W_Q"), (&w_k, "W_K"), (&w_v, "W_V")] {
            m.expect_rank(2, name)?;
        }
        if w_q.shape() != w_k.shape() {
            return Err(Error::dim(format!(
                "W_Q {:?} and W_K {:?} must share shape",
                w_q.shape(),
                w_k.shape()
            )));
        }
        if w_v.shape()[0] != w_q.shape()[0] {
            return Err(Error::dim("W_V input dimension differs from W_Q"));
        }
        Ok(Self { w_q, w_k, w_v })
    }

    pub fn init<R: Rng + ?Sized>(c: usize, d_k: usize, d_v: usize, rng: &mut R) -> Self {
        Self {
            w_q: init_uniform(&[c, d_k], c, rng),
            w_k: init_uniform(&[c, d_k], c, rng),
            w_v: init_uniform(&[c, d_v], c, rng),
        }
    }

    pub fn d_k(&self) -> usize {
        self.w_q.shape()[1]
    }

    pub fn insert_into(&self, set: &mut ParamSet, prefix: &str) {
        set.insert(format!("{prefix}.w_q"), self.w_q.clone());
        set.insert(format!("{prefix}.w_k"), self.w_k.clone());
        set.insert(format!("{prefix}.w_v"), self.w_v.clone());
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TransformerVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

impl TransformerVars {
    pub fn lookup(vars: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(Self {
            w_q: vars.get(&format!("{prefix}.w_q"))?,
            w_k: vars.get(&format!("{prefix}.w_k"))?,
            w_v: vars.get(&format!("{prefix}.w_v"))?,
        })
    }

    pub fn register(p: &TransformerLayerParams, tape: &mut Tape) -> Self {
        Self {
            w_q: tape.leaf(p.w_q.clone()),
            w_k: tape.leaf(p.w_k.clone()),
            w_v: tape.leaf(p.w_v.clone()),
        }
    }
}

/// `softmax(Q K^T / sqrt(d_k)) V` for a `T x C` input. Returns the output
/// and the `T x T` attention matrix.
pub fn transformer_encoder_on(
    tape: &mut Tape,
    x: Var,
    p: TransformerVars,
    options: TransformerOptions,
) -> Result<(Var, Var)> {
    let d_k = tape.value(p.w_q).shape()[1];
    let q = tape.matmul(x, p.w_q)?;
    let k = tape.matmul(x, p.w_k)?;
    let v = tape.matmul(x, p.w_v)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d_k as f64).sqrt())?;
    let attn = tape.softmax(scores, 1)?;
    let mut h = tape.matmul(attn, v)?;
    if options.residual {
        h = tape.add(h, x)?;
    }
    if options.layer_norm {
        h = tape.layer_norm(h)?;
    }
    Ok((h, attn))
}

pub fn transformer_encoder_forward(x: &Tensor, params: &TransformerLayerParams) -> Result<Tensor> {
    transformer_encoder_with(x, params, TransformerOptions::default()).map(|(h, _)| h)
}

/// Output and attention matrix with explicit options.
pub fn transformer_encoder_with(
    x: &Tensor,
    params: &TransformerLayerParams,
    options: TransformerOptions,
) -> Result<(Tensor, Tensor)> {
    x.expect_rank(2, "transformer input")?;
    if x.shape()[1] != params.w_q.shape()[0] {
        return Err(Error::dim(format!(
            "transformer input {:?} does not match W_Q {:?}",
            x.shape(),
            params.w_q.shape()
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let p = TransformerVars::register(params, &mut tape);
    let (h, a) = transformer_encoder_on(&mut tape, xv, p, options)?;
    Ok((tape.value(h).clone(), tape.value(a).clone()))
}

/// Frame-wise classification head (`w`, `b`) and localization head
/// (`loc_w`, `loc_b`), both mapping `C` features to `K` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w: Tensor,
    pub b: Tensor,
    pub loc_w: Tensor,
    pub loc_b: Tensor,
}

impl HeadParams {
    pub fn init<R: Rng + ?Sized>(c: usize, k: usize, rng: &mut R) -> Self {
        Self {
            w: init_uniform(&[c, k], c, rng),
            b: init_uniform(&[k], c, rng),
            loc_w: init_uniform(&[c, k], c, rng),
            loc_b: init_uniform(&[k], c, rng),
        }
    }

    pub fn zeros(c: usize, k: usize) -> Self {
        Self {
            w: Tensor::zeros(&[c, k]),
            b: Tensor::zeros(&[k]),
            loc_w: Tensor::zeros(&[c, k]),
            loc_b: Tensor::zeros(&[k]),
        }
    }

    pub fn classes(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn insert_into(&self, set: &mut ParamSet, prefix: &str) {
        set.insert(format!("{prefix}.w"), self.w.clone());
        set.insert(format!("{prefix}.b"), self.b.clone());
        set.insert(format!("{prefix}.loc_w"), self.loc_w.clone());
        set.insert(format!("{prefix}.loc_b"), self.loc_b.clone());
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w: Var,
    pub b: Var,
    pub loc_w: Var,
    pub loc_b: Var,
}

impl HeadVars {
    pub fn lookup(vars: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(Self {
            w: vars.get(&format!("{prefix}.w"))?,
            b: vars.get(&format!("{prefix}.b"))?,
            loc_w: vars.get(&format!("{prefix}.loc_w"))?,
            loc_b: vars.get(&format!("{prefix}.loc_b"))?,
        })
    }

    pub fn register(p: &HeadParams, tape: &mut Tape) -> Self {
        Self {
            w: tape.leaf(p.w.clone()),
            b: tape.leaf(p.b.clone()),
            loc_w: tape.leaf(p.loc_w.clone()),
            loc_b: tape.leaf(p.loc_b.clone()),
        }
    }
}

fn linear_on(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b, 1)
}

/// `sigmoid(features W + b)`: `T x K` presence probabilities.
pub fn framewise_head_on(tape: &mut Tape, features: Var, p: HeadVars) -> Result<Var> {
    let z = linear_on(tape, features, p.w, p.b)?;
    tape.sigmoid(z)
}

/// Linear localization logits `features W_loc + b_loc` (`T x K`).
pub fn localization_logits_on(tape: &mut Tape, features: Var, p: HeadVars) -> Result<Var> {
    linear_on(tape, features, p.loc_w, p.loc_b)
}

/// `exp(features W_loc + b_loc)`: strictly positive `T x K` weights,
/// normalized over time by the aggregator.
pub fn localization_head_on(tape: &mut Tape, features: Var, p: HeadVars) -> Result<Var> {
    let z = localization_logits_on(tape, features, p)?;
    tape.exp(z)
}

fn check_head_input(features: &Tensor, params: &HeadParams) -> Result<()> {
    features.expect_rank(2, "head input")?;
    if features.shape()[1] != params.w.shape()[0] {
        return Err(Error::dim(format!(
            "head input {:?} does not match weights {:?}",
            features.shape(),
            params.w.shape()
        )));
    }
    Ok(())
}

pub fn framewise_head(features: &Tensor, params: &HeadParams) -> Result<Tensor> {
    check_head_input(features, params)?;
    let mut tape = Tape::new();
    let x = tape.leaf(features.clone());
    let p = HeadVars::register(params, &mut tape);
    let y = framewise_head_on(&mut tape, x, p)?;
    Ok(tape.value(y).clone())
}

pub fn localization_head(features: &Tensor, params: &HeadParams) -> Result<Tensor> {
    check_head_input(features, params)?;
    let mut tape = Tape::new();
    let x = tape.leaf(features.clone());
    let p = HeadVars::register(params, &mut tape);
    let y = localization_head_on(&mut tape, x, p)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d, grad_check, matmul, softmax};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn glu_zero_gate_halves_linear_branch() {
        let mut r = rng(1);
        let x = random(&[2, 5, 4], &mut r);
        let mut p = GluBlockParams::init(2, 3, (3, 3), &mut r);
        p.v = Tensor::zeros(p.v.shape());
        p.c = Tensor::zeros(&[3]);
        let y = glu_forward(&x, &p).unwrap();
        let lin = conv2d(&x, &p.w, Padding::Same).unwrap();
        for (i, (&yv, &lv)) in y.data().iter().zip(lin.data()).enumerate() {
            let b = p.b.data()[i / 20];
            assert!((yv - 0.5 * (lv + b)).abs() < 1e-12);
        }
    }

    #[test]
    fn glu_saturated_gate_passes_linear_branch() {
        let mut r = rng(2);
        let x = random(&[1, 4, 4], &mut r);
        let mut p = GluBlockParams::init(1, 2, (3, 3), &mut r);
        p.c = Tensor::full(&[2], 1e3);
        let y = glu_forward(&x, &p).unwrap();
        let lin = conv2d(&x, &p.w, Padding::Same).unwrap();
        for (i, (&yv, &lv)) in y.data().iter().zip(lin.data()).enumerate() {
            assert!((yv - (lv + p.b.data()[i / 16])).abs() < 1e-12);
        }
    }

    #[test]
    fn glu_1x1_matches_elementwise_oracle() {
        let mut r = rng(3);
        let x = random(&[1, 4, 4], &mut r);
        let p = GluBlockParams::init(1, 1, (1, 1), &mut r);
        let y = glu_forward(&x, &p).unwrap();
        let (w, v, b, c) = (p.w.data()[0], p.v.data()[0], p.b.data()[0], p.c.data()[0]);
        for (&xv, &yv) in x.data().iter().zip(y.data()) {
            let gate = 1.0 / (1.0 + (-(v * xv + c)).exp());
            assert!((yv - (w * xv + b) * gate).abs() < 1e-12);
        }
    }

    #[test]
    fn glu_magnitude_bounded_by_linear_branch() {
        let mut r = rng(4);
        let x = random(&[2, 6, 6], &mut r);
        let mut p = GluBlockParams::init(2, 4, (3, 3), &mut r);
        p.v = p.v.map(|v| v * 10.0);
        let y = glu_forward(&x, &p).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let w = tape.leaf(p.w.clone());
        let b = tape.leaf(p.b.clone());
        let lin = tape.conv2d(xv, w, Padding::Same).unwrap();
        let lin = tape.add_bias(lin, b, 0).unwrap();
        for (yv, lv) in y.data().iter().zip(tape.value(lin).data()) {
            assert!(yv.abs() <= lv.abs());
        }
    }

    #[test]
    fn glu_channel_mismatch() {
        let mut r = rng(5);
        let p = GluBlockParams::init(3, 2, (3, 3), &mut r);
        assert!(glu_forward(&Tensor::zeros(&[2, 4, 4]), &p).is_err());
        assert!(
            GluBlockParams::new(p.w.clone(), p.v.clone(), Tensor::zeros(&[3]), p.c.clone())
                .is_err()
        );
    }

    #[test]
    fn glu_gradients() {
        let mut r = rng(6);
        let x = random(&[2, 5, 4], &mut r);
        let p = GluBlockParams::init(2, 3, (3, 3), &mut r);
        let rep = grad_check(
            |t, v| {
                let y = glu_on(
                    t,
                    v[0],
                    GluVars {
                        w: v[1],
                        v: v[2],
                        b: v[3],
                        c: v[4],
                    },
                )?;
                let y2 = t.mul(y, y)?;
                t.sum(y2)
            },
            &[x, p.w, p.v, p.b, p.c],
            1e-4,
        )
        .unwrap();
        assert!(rep.max_relative_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn degenerate_inception_equals_glu() {
        let mut r = rng(7);
        let x = random(&[2, 6, 5], &mut r);
        let cfg = InceptionAttentionConfig::custom(
            vec![InceptionBranch {
                kernel: (3, 3),
                filters: 64,
                pre_op: PreOp::None,
            }],
            64,
        )
        .unwrap();
        let params = init_inception(2, &cfg, &mut r).unwrap();
        let y = inception_attention_forward(&x, &cfg, &params).unwrap();
        assert_eq!(y, glu_forward(&x, &params[0].glu).unwrap());
    }

    #[test]
    fn inception_variants_keep_budget_and_size() {
        let mut r = rng(8);
        let x = random(&[1, 8, 6], &mut r);
        for cfg in [
            InceptionAttentionConfig::v1(),
            InceptionAttentionConfig::v2(),
            InceptionAttentionConfig::v3(),
        ] {
            let params = init_inception(1, &cfg, &mut r).unwrap();
            let y = inception_attention_forward(&x, &cfg, &params).unwrap();
            assert_eq!(y.shape(), &[64, 8, 6], "{:?}", cfg.variant);
        }
    }

    #[test]
    fn inception_concatenates_branches() {
        let mut r = rng(9);
        let x = random(&[2, 5, 5], &mut r);
        let branches = vec![
            InceptionBranch {
                kernel: (3, 3),
                filters: 32,
                pre_op: PreOp::None,
            },
            InceptionBranch {
                kernel: (1, 1),
                filters: 32,
                pre_op: PreOp::Conv1x1,
            },
        ];
        let cfg = InceptionAttentionConfig::custom(branches, 64).unwrap();
        let params = init_inception(2, &cfg, &mut r).unwrap();
        let y = inception_attention_forward(&x, &cfg, &params).unwrap();
        let first = glu_forward(&x, &params[0].glu).unwrap();
        let (k, b) = params[1].reduce.clone().unwrap();
        let reduced = conv2d(&x, &k, Padding::Same).unwrap();
        let reduced = Tensor::from_fn(reduced.shape(), |i| reduced.data()[i] + b.data()[i / 25]);
        let second = glu_forward(&reduced, &params[1].glu).unwrap();
        let stacked: Vec<f64> = first.data().iter().chain(second.data()).copied().collect();
        assert_eq!(y.data(), stacked.as_slice());
    }

    #[test]
    fn inception_budget_violation() {
        let err = InceptionAttentionConfig::custom(
            vec![InceptionBranch {
                kernel: (3, 3),
                filters: 60,
                pre_op: PreOp::None,
            }],
            64,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn inception_gradients() {
        let mut r = rng(10);
        let x = random(&[1, 4, 4], &mut r);
        let branches = vec![
            InceptionBranch {
                kernel: (3, 3),
                filters: 2,
                pre_op: PreOp::None,
            },
            InceptionBranch {
                kernel: (1, 1),
                filters: 1,
                pre_op: PreOp::AvgPool2x2,
            },
            InceptionBranch {
                kernel: (2, 2),
                filters: 1,
                pre_op: PreOp::Conv1x1,
            },
        ];
        let cfg = InceptionAttentionConfig::custom(branches, 4).unwrap();
        let params = init_inception(1, &cfg, &mut r).unwrap();
        let mut inputs = vec![x];
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
        let rep = grad_check(
            |t, v| {
                let mut idx = 1;
                let mut vars = Vec::new();
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
                let y = inception_attention_on(t, v[0], &cfg, &vars)?;
                let y = t.sigmoid(y)?;
                t.sum(y)
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(rep.max_relative_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn transformer_single_frame() {
        let mut r = rng(11);
        let p = TransformerLayerParams::init(3, 2, 2, &mut r);
        let x = random(&[1, 3], &mut r);
        let (h, a) = transformer_encoder_with(&x, &p, TransformerOptions::default()).unwrap();
        assert_eq!(a.data(), &[1.0]);
        let v = matmul(&x, &p.w_v).unwrap();
        assert_eq!(h, v);
    }

    #[test]
    fn transformer_duplicate_rows() {
        let mut r = rng(12);
        let p = TransformerLayerParams::init(3, 2, 2, &mut r);
        let row = vec![0.3, -0.7, 0.1];
        let x = Tensor::from_rows(&[row.clone(), vec![0.5, 0.5, 0.5], row]).unwrap();
        let h = transformer_encoder_forward(&x, &p).unwrap();
        assert_eq!(h.rows()[0], h.rows()[2]);
    }

    #[test]
    fn transformer_matches_direct_formula() {
        let mut r = rng(13);
        let p = TransformerLayerParams::init(3, 2, 2, &mut r);
        let x = random(&[4, 3], &mut r);
        let h = transformer_encoder_forward(&x, &p).unwrap();

        // direct evaluation with explicit loops
        let proj = |w: &Tensor| -> Vec<Vec<f64>> {
            (0..4)
                .map(|t| {
                    (0..2)
                        .map(|j| (0..3).map(|c| x.at2(t, c) * w.at2(c, j)).sum())
                        .collect()
                })
                .collect()
        };
        let (q, k, v) = (proj(&p.w_q), proj(&p.w_k), proj(&p.w_v));
        for t in 0..4 {
            let scores: Vec<f64> = (0..4)
                .map(|s| (q[t][0] * k[s][0] + q[t][1] * k[s][1]) / 2f64.sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..2 {
                let expect: f64 = (0..4).map(|s| scores[s].exp() / z * v[s][j]).sum();
                assert!((h.at2(t, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transformer_attention_rows_sum_to_one_under_scaling() {
        let mut r = rng(14);
        let p = TransformerLayerParams::init(4, 3, 3, &mut r);
        let x = random(&[6, 4], &mut r);
        for scale in [1.0, 10.0, 100.0] {
            let xs = x.map(|v| v * scale);
            let (h, a) = transformer_encoder_with(&xs, &p, TransformerOptions::default()).unwrap();
            assert!(h.is_finite());
            for row in a.rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn transformer_dimension_mismatch() {
        let mut r = rng(15);
        let p = TransformerLayerParams::init(3, 2, 2, &mut r);
        assert!(transformer_encoder_forward(&Tensor::zeros(&[4, 5]), &p).is_err());
        let bad = TransformerLayerParams::new(
            Tensor::zeros(&[3, 2]),
            Tensor::zeros(&[3, 4]),
            Tensor::zeros(&[3, 2]),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn transformer_gradients_with_options() {
        let mut r = rng(16);
        let x = random(&[5, 3], &mut r);
        let p = TransformerLayerParams::init(3, 2, 3, &mut r);
        for options in [
            TransformerOptions::default(),
            TransformerOptions {
                residual: true,
                layer_norm: true,
            },
        ] {
            let rep = grad_check(
                |t, v| {
                    let (h, _) = transformer_encoder_on(
                        t,
                        v[0],
                        TransformerVars {
                            w_q: v[1],
                            w_k: v[2],
                            w_v: v[3],
                        },
                        options,
                    )?;
                    let h = t.sigmoid(h)?;
                    t.sum(h)
                },
                &[x.clone(), p.w_q.clone(), p.w_k.clone(), p.w_v.clone()],
                1e-4,
            )
            .unwrap();
            assert!(rep.max_relative_error < 1e-4, "{options:?}: {rep:?}");
        }
    }

    #[test]
    fn framewise_head_values() {
        let y = framewise_head(&Tensor::zeros(&[3, 2]), &HeadParams::zeros(2, 4)).unwrap();
        assert_eq!(y.shape(), &[3, 4]);
        assert!(y.data().iter().all(|&v| v == 0.5));

        let mut r = rng(17);
        let p = HeadParams::init(3, 2, &mut r);
        let x = random(&[1, 3], &mut r);
        let y = framewise_head(&x, &p).unwrap();
        for k in 0..2 {
            let z: f64 = (0..3).map(|c| x.data()[c] * p.w.at2(c, k)).sum::<f64>() + p.b.data()[k];
            assert!((y.data()[k] - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
        }
        for t in 1..6 {
            let y = framewise_head(&random(&[t, 3], &mut r), &p).unwrap();
            assert_eq!(y.shape(), &[t, 2]);
        }
        assert!(framewise_head(&Tensor::zeros(&[2, 4]), &p).is_err());
    }

    #[test]
    fn localization_head_positive_and_symmetric() {
        let mut r = rng(18);
        let p = HeadParams::init(3, 2, &mut r);
        let row = vec![0.2, -0.4, 0.9];
        let x = Tensor::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let z = localization_head(&x, &p).unwrap();
        assert!(z.data().iter().all(|&v| v > 0.0));
        let norm = softmax(&z.map(f64::ln), 0).unwrap();
        for v in norm.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn localization_dominant_frame() {
        let mut p = HeadParams::zeros(1, 1);
        p.loc_w = Tensor::full(&[1, 1], 2.0);
        let x = Tensor::from_rows(&[vec![1.5], vec![-0.5]]).unwrap();
        let z = localization_head(&x, &p).unwrap();
        let share = z.data()[0] / z.sum();
        // exp(3) / (exp(3) + exp(-1))
        assert!((share - 0.98201379).abs() < 1e-8);
        assert!(share > 0.5);
    }

    #[test]
    fn heads_gradients() {
        let mut r = rng(19);
        let x = random(&[4, 3], &mut r);
        let p = HeadParams::init(3, 2, &mut r);
        let rep = grad_check(
            |t, v| {
                let hv = HeadVars {
                    w: v[1],
                    b: v[2],
                    loc_w: v[3],
                    loc_b: v[4],
                };
                let o = framewise_head_on(t, v[0], hv)?;
                let z = localization_head_on(t, v[0], hv)?;
                let y = t.mul(o, z)?;
                t.sum(y)
            },
            &[x, p.w, p.b, p.loc_w, p.loc_b],
            1e-4,
        )
        .unwrap();
        assert!(rep.max_relative_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn param_set_flatten_round_trip() {
        let mut r = rng(20);
        let mut set = ParamSet::new();
        GluBlockParams::init(1, 2, (3, 3), &mut r).insert_into(&mut set, "g");
        HeadParams::init(2, 3, &mut r).insert_into(&mut set, "head");
        let flat = set.flatten();
        assert_eq!(flat.len(), set.num_scalars());
        let mut other = set.clone();
        other.assign_flat(&vec![0.0; flat.len()]).unwrap();
        other.assign_flat(&flat).unwrap();
        assert_eq!(other, set);
        assert!(other.assign_flat(&[1.0]).is_err());
        assert!(GluBlockParams::from_set(&set, "g").is_ok());
        assert!(GluBlockParams::from_set(&set, "nope").is_err());
    }
}
