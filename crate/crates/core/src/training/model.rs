use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate_on, AggregationMethod, ClipProbVector, FrameProbMatrix};
use crate::blocks::{
    framewise_head_on, glu_on, init_inception, localization_logits_on, transformer_encoder_on,
    GluBlockParams, GluVars, HeadParams, HeadVars, InceptionAttentionConfig, InceptionBranchVars,
    ParamSet, ParamVars, TransformerLayerParams, TransformerOptions, TransformerVars,
};
use crate::error::{Error, Result};
use crate::tensor::{PoolMode, Tape, Tensor, Var};

const FIRST_FILTERS: usize = 16;
const SECOND_FILTERS: usize = 32;

/// Toy architectures. All of them keep the full time resolution and pool
/// only along frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Two gated-conv blocks and one transformer layer.
    CnnTransformer,
    /// Two gated-conv blocks.
    CnnGlu,
    /// A gated-conv block followed by an inception-attention block
    /// (`1`, `2` or `3` selects the branch layout).
    InceptionAttention(u8),
}

impl ModelKind {
    fn inception(self) -> Result<Option<InceptionAttentionConfig>> {
        match self {
            ModelKind::InceptionAttention(1) => Ok(Some(InceptionAttentionConfig::v1())),
            ModelKind::InceptionAttention(2) => Ok(Some(InceptionAttentionConfig::v2())),
            ModelKind::InceptionAttention(3) => Ok(Some(InceptionAttentionConfig::v3())),
            ModelKind::InceptionAttention(v) => Err(Error::Config(format!(
                "unknown inception-attention variant {v}"
            ))),
            _ => Ok(None),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn-transformer" => Ok(Self::CnnTransformer),
            "cnn-glu" => Ok(Self::CnnGlu),
            "inception-v1" => Ok(Self::InceptionAttention(1)),
            "inception-v2" => Ok(Self::InceptionAttention(2)),
            "inception-v3" => Ok(Self::InceptionAttention(3)),
            other => Err(Error::Argument(format!(
                "unknown model '{other}' (expected cnn-transformer, cnn-glu or inception-v1..v3)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub classes: usize,
    /// Feature bins per frame.
    pub bins: usize,
    pub aggregation: AggregationMethod,
}

impl ModelConfig {
    pub fn new(
        kind: ModelKind,
        classes: usize,
        bins: usize,
        aggregation: AggregationMethod,
    ) -> Self {
        Self {
            kind,
            classes,
            bins,
            aggregation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.bins == 0 {
            return Err(Error::Config(
                "model needs at least one class and one bin".into(),
            ));
        }
        self.kind.inception().map(|_| ())
    }

    fn feature_channels(&self) -> usize {
        match self.kind {
            ModelKind::InceptionAttention(_) => crate::blocks::DEFAULT_FILTER_BUDGET,
            _ => SECOND_FILTERS,
        }
    }
}

/// Frame-level and clip-level outputs for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub frames: FrameProbMatrix,
    pub clip: ClipProbVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        GluBlockParams::init(1, FIRST_FILTERS, (3, 3), &mut rng).insert_into(&mut params, "conv1");
        match config.kind.inception()? {
            Some(cfg) => {
                for (i, b) in init_inception(FIRST_FILTERS, &cfg, &mut rng)?
                    .iter()
                    .enumerate()
                {
                    b.insert_into(&mut params, &format!("incep.{i}"));
                }
            }
            None => GluBlockParams::init(FIRST_FILTERS, SECOND_FILTERS, (3, 3), &mut rng)
                .insert_into(&mut params, "conv2"),
        }
        let c = config.feature_channels();
        if config.kind == ModelKind::CnnTransformer {
            TransformerLayerParams::init(c, c, c, &mut rng).insert_into(&mut params, "attn");
        }
        HeadParams::init(c, config.classes, &mut rng).insert_into(&mut params, "head");
        Ok(Self { config, params })
    }

    /// Wraps existing parameters, checking that every tensor is present.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let expected = Self::init(config, 0)?;
        for (name, t) in expected.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Config(format!(
                        "parameter '{name}' has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("missing parameter '{name}'"))),
            }
        }
        if params.len() != expected.params.len() {
            return Err(Error::Config("unexpected extra parameters".into()));
        }
        // keep the canonical order so flattening is stable
        let mut ordered = ParamSet::new();
        for (name, _) in expected.params.iter() {
            ordered.insert(
                name,
                params.get(name).cloned().unwrap_or_else(|| unreachable!()),
            );
        }
        Ok(Self {
            config,
            params: ordered,
        })
    }

    /// Records the forward pass of one `T x F` clip. Returns the `T x K`
    /// frame probabilities and the length-`K` clip probabilities.
    pub fn forward_on(&self, tape: &mut Tape, vars: &ParamVars, x: &Tensor) -> Result<(Var, Var)> {
        x.expect_rank(2, "model input")?;
        let (t, f) = (x.shape()[0], x.shape()[1]);
        if f != self.config.bins || t == 0 {
            return Err(Error::dim(format!(
                "model expects T x {} features, got {:?}",
                self.config.bins,
                x.shape()
            )));
        }
        let input = tape.leaf(x.reshape(&[1, t, f])?);
        let mut h = glu_on(tape, input, GluVars::lookup(vars, "conv1")?)?;
        if f >= 2 {
            h = tape.avg_pool2d(h, (1, 2), PoolMode::Truncate)?;
        }
        h = match self.config.kind.inception()? {
            Some(cfg) => {
                let branches = cfg
                    .branches
                    .iter()
                    .enumerate()
                    .map(|(i, b)| InceptionBranchVars::lookup(vars, &format!("incep.{i}"), b))
                    .collect::<Result<Vec<_>>>()?;
                crate::blocks::inception_attention_on(tape, h, &cfg, &branches)?
            }
            None => glu_on(tape, h, GluVars::lookup(vars, "conv2")?)?,
        };
        if tape.value(h).shape()[2] >= 2 {
            h = tape.avg_pool2d(h, (1, 2), PoolMode::Truncate)?;
        }
        // C x T x F' -> T x C
        let pooled = tape.mean_axis(h, 2)?;
        let mut feats = tape.transpose(pooled)?;
        if self.config.kind == ModelKind::CnnTransformer {
            let p = TransformerVars::lookup(vars, "attn")?;
            feats = transformer_encoder_on(tape, feats, p, TransformerOptions::default())?.0;
        }
        let head = HeadVars::lookup(vars, "head")?;
        let frames = framewise_head_on(tape, feats, head)?;
        let scores = match self.config.aggregation {
            AggregationMethod::Attention => Some(localization_logits_on(tape, feats, head)?),
            _ => None,
        };
        let clip = aggregate_on(tape, frames, self.config.aggregation, scores)?;
        Ok((frames, clip))
    }

    pub fn predict(&self, x: &Tensor, frame_duration: f64) -> Result<Prediction> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape);
        let (frames, clip) = self.forward_on(&mut tape, &vars, x)?;
        Ok(Prediction {
            frames: FrameProbMatrix::new(tape.value(frames).clone(), frame_duration)?,
            clip: ClipProbVector::new(tape.value(clip).data().to_vec())?,
        })
    }

    /// Prediction when the model was trained on segments of
    /// `segment_frames`: every frame takes its segment's probability and
    /// the clip takes the maximum over segments.
    pub fn predict_segmented(
        &self,
        x: &Tensor,
        frame_duration: f64,
        segment_frames: usize,
    ) -> Result<Prediction> {
        let k = self.config.classes;
        let t = x.shape()[0];
        let mut frames = Vec::with_capacity(t * k);
        let mut clip = vec![0.0f64; k];
        for r in super::split_segments(t, segment_frames)? {
            let seg = slice_rows(x, r.clone())?;
            let p = self.predict(&seg, frame_duration)?.clip;
            for _ in r {
                frames.extend_from_slice(p.values());
            }
            for (c, v) in clip.iter_mut().zip(p.values()) {
                *c = c.max(*v);
            }
        }
        Ok(Prediction {
            frames: FrameProbMatrix::new(Tensor::new(vec![t, k], frames)?, frame_duration)?,
            clip: ClipProbVector::new(clip)?,
        })
    }
}

/// Rows `range` of a 2-D tensor.
pub(crate) fn slice_rows(x: &Tensor, range: std::ops::Range<usize>) -> Result<Tensor> {
    let w = x.shape()[1];
    Tensor::new(
        vec![range.len(), w],
        x.data()[range.start * w..range.end * w].to_vec(),
    )
}
