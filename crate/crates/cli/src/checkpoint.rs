//! Model checkpoints as JSON with parameter data in base64 little-endian
//! `f64`, so values round-trip bit for bit.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use iceot_core::nn::{Model, ModelSpec};
use iceot_core::train::Scaling;
use iceot_core::{ParamSet, Parameter, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const FORMAT: &str = "iceot-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub non_negative: bool,
    pub data: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub spec: ModelSpec,
    pub scaling: Option<Scaling>,
    pub params: Vec<ParamRecord>,
}

fn encode(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(s: &str) -> CliResult<Vec<f64>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| CliError::Config(format!("bad checkpoint data: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(CliError::Config("checkpoint data is not a whole number of f64".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

impl Checkpoint {
    pub fn new(model: &Model, scaling: Option<&Scaling>) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            spec: model.spec().clone(),
            scaling: scaling.cloned(),
            params: model
                .params()
                .iter()
                .map(|p| ParamRecord {
                    name: p.name().into(),
                    shape: p.value().shape().to_vec(),
                    non_negative: p.non_negative(),
                    data: encode(p.value().data()),
                })
                .collect(),
        }
    }

    pub fn model(&self) -> CliResult<Model> {
        if self.format != FORMAT {
            return Err(CliError::Config(format!("unsupported checkpoint format `{}`", self.format)));
        }
        let mut set = ParamSet::new();
        for r in &self.params {
            let t = Tensor::new(r.shape.clone(), decode(&r.data)?)?;
            set.push(Parameter::new(r.name.clone(), t, r.non_negative))?;
        }
        Ok(Model::from_params(self.spec.clone(), set)?)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("checkpoint {}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use iceot_core::nn::Architecture;

    #[test]
    fn round_trip_is_bit_exact() {
        for arch in Architecture::ALL {
            let mut spec = ModelSpec::new(arch, 3, 2, 4);
            spec.model_dim = 8;
            spec.ff_dim = 8;
            let m = Model::init(spec, 5).unwrap();
            let scaling = Scaling::identity(3, 2);
            let ck = Checkpoint::new(&m, Some(&scaling));
            let back: Checkpoint = serde_json::from_str(&ck.to_json()).unwrap();
            let m2 = back.model().unwrap();
            assert_eq!(back.scaling.as_ref(), Some(&scaling));
            for (a, b) in m.params().iter().zip(m2.params().iter()) {
                assert_eq!(a.name(), b.name());
                assert_eq!(a.non_negative(), b.non_negative());
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a.value()), bits(b.value()));
            }
        }
    }

    #[test]
    fn corrupt_payload_is_rejected() {
        let m = Model::init(ModelSpec::new(Architecture::Icfnn, 2, 1, 1), 0).unwrap();
        let mut ck = Checkpoint::new(&m, None);
        ck.params[0].data = STANDARD.encode([1u8, 2, 3]);
        assert!(ck.model().is_err());
        ck.format = "other".into();
        assert!(ck.model().is_err());
    }
}
