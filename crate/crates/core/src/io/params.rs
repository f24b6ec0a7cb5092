use serde::{Deserialize, Serialize};

use crate::blocks::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::{Model, ModelConfig};

pub const PARAMS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    version: u32,
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

/// JSON document `{version, config, params: [{name, shape, values}]}`.
pub fn render_model(model: &Model) -> Result<String> {
    let doc = ModelDocument {
        version: PARAMS_VERSION,
        config: model.config,
        params: model
            .params
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Validation(format!("cannot serialize model: {e}")))?;
    text.push('\n');
    Ok(text)
}

pub fn parse_model(text: &str, path: &str) -> Result<Model> {
    let doc: ModelDocument = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_string(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    if doc.version != PARAMS_VERSION {
        return Err(Error::Parse {
            path: path.to_string(),
            line: 1,
            reason: format!("unsupported parameter version {}", doc.version),
        });
    }
    let mut set = ParamSet::new();
    for p in doc.params {
        if set.get(&p.name).is_some() {
            return Err(Error::Validation(format!(
                "duplicate parameter '{}'",
                p.name
            )));
        }
        let t = Tensor::new(p.shape, p.values)
            .map_err(|e| Error::Validation(format!("parameter '{}': {e}", p.name)))?;
        set.insert(p.name, t);
    }
    Model::from_params(doc.config, set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::AggregationMethod;
    use crate::training::ModelKind;

    #[test]
    fn round_trip_is_exact() {
        let cfg = ModelConfig::new(
            ModelKind::CnnTransformer,
            3,
            4,
            AggregationMethod::Attention,
        );
        let m = Model::init(cfg, 9).unwrap();
        let text = render_model(&m).unwrap();
        let back = parse_model(&text, "p").unwrap();
        assert_eq!(back, m);
        assert_eq!(render_model(&back).unwrap(), text);
    }

    #[test]
    fn malformed_documents() {
        assert!(matches!(parse_model("{", "p"), Err(Error::Parse { .. })));
        let cfg = ModelConfig::new(ModelKind::CnnGlu, 2, 4, AggregationMethod::Max);
        let text = render_model(&Model::init(cfg, 0).unwrap()).unwrap();
        let bumped = text.replacen("\"version\": 1", "\"version\": 2", 1);
        assert!(matches!(
            parse_model(&bumped, "p"),
            Err(Error::Parse { .. })
        ));
        let wrong = text.replacen("\"classes\": 2", "\"classes\": 5", 1);
        assert!(matches!(parse_model(&wrong, "p"), Err(Error::Config(_))));
    }
}
