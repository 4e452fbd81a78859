//! Model zoo: the input-convex encoder-only transformer and the recurrent
//! and feed-forward input-convex models it is compared with, plus the
//! unconstrained transformer and LSTM baselines.
//!
//! All forwards take a batch of sequences laid out as a `[B·T, d_in]`
//! matrix (sample-major, time-minor) and return `[B, d_out]`.

mod eot;
mod icfnn;
mod iceot;
mod iclstm;
mod icrnn;
pub mod layers;
mod lstm;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamSet, Parameter};
use crate::rng::{self, ChaCha8Rng};
use crate::tensor::Tensor;

pub use iceot::{convex_multihead_attention, iceot_block, iceot_forward};
pub use iclstm::iclstm_cell;
pub use layers::{convex_r_softmax, expand_input, positional_encoding};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    IcEot,
    IcLstm,
    Eot,
    Lstm,
    Icfnn,
    Icrnn,
}

impl Architecture {
    pub const ALL: [Architecture; 6] = [
        Architecture::IcEot,
        Architecture::IcLstm,
        Architecture::Eot,
        Architecture::Lstm,
        Architecture::Icfnn,
        Architecture::Icrnn,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Architecture::IcEot => "ic-eot",
            Architecture::IcLstm => "ic-lstm",
            Architecture::Eot => "eot",
            Architecture::Lstm => "lstm",
            Architecture::Icfnn => "icfnn",
            Architecture::Icrnn => "icrnn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let norm: String = s
            .chars()
            .filter(|c| *c != '-' && *c != '_')
            .flat_map(char::to_lowercase)
            .collect();
        Some(match norm.as_str() {
            "iceot" => Architecture::IcEot,
            "iclstm" => Architecture::IcLstm,
            "eot" => Architecture::Eot,
            "lstm" => Architecture::Lstm,
            "icfnn" => Architecture::Icfnn,
            "icrnn" => Architecture::Icrnn,
            _ => return None,
        })
    }

    /// Whether the architecture is convex in its input by construction.
    pub fn input_convex(self) -> bool {
        !matches!(self, Architecture::Eot | Architecture::Lstm)
    }

    /// Whether the model consumes the expanded input `[x, −x]`.
    pub fn uses_expanded_input(self) -> bool {
        matches!(
            self,
            Architecture::IcEot | Architecture::IcLstm | Architecture::Icrnn
        )
    }
}

/// Architecture selector and hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    /// Token width for the transformers, hidden width for the recurrent and
    /// feed-forward models.
    pub model_dim: usize,
    pub ff_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    /// Threshold of the convex-r-softmax. It cancels between numerator and
    /// denominator, so it has no effect on the weights.
    pub r: f64,
    pub tau: f64,
    pub output_dim: usize,
    pub sequence_length: usize,
}

impl ModelSpec {
    /// Default hyperparameters for an architecture: one layer, width 64 with
    /// a 128-wide feed-forward and a single head for the transformers, width
    /// 128 for the LSTMs.
    pub fn new(
        architecture: Architecture,
        input_dim: usize,
        output_dim: usize,
        sequence_length: usize,
    ) -> Self {
        let (model_dim, num_layers) = match architecture {
            Architecture::IcEot | Architecture::Eot => (64, 1),
            Architecture::IcLstm | Architecture::Lstm => (128, 1),
            Architecture::Icfnn => (64, 2),
            Architecture::Icrnn => (64, 1),
        };
        ModelSpec {
            architecture,
            input_dim,
            model_dim,
            ff_dim: 128,
            num_heads: 1,
            num_layers,
            r: 0.0,
            tau: 1.0,
            output_dim,
            sequence_length,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.output_dim == 0 || self.model_dim == 0 {
            return bad(format!("dimensions must be positive: {self:?}"));
        }
        if self.sequence_length == 0 {
            return bad("sequence_length must be ≥ 1".into());
        }
        if self.num_layers == 0 {
            return bad("num_layers must be ≥ 1".into());
        }
        if self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !self.r.is_finite() {
            return bad("r must be finite".into());
        }
        if matches!(self.architecture, Architecture::IcEot | Architecture::Eot) && self.ff_dim == 0
        {
            return bad("ff_dim must be positive".into());
        }
        if self.architecture == Architecture::Icrnn && self.num_layers != 1 {
            return bad("ICRNN supports a single layer".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// `U(0, 2/fan_in)`: mean-preserving for non-negative signals.
    NonNeg,
    /// `U(−1/√fan_in, 1/√fan_in)`.
    Signed,
    Zeros,
    Ones,
    /// Negated positional encoding of the last position, so the last token
    /// enters the first block without the constant offset.
    CancelLastPosition,
}

/// One entry of an architecture's parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub non_negative: bool,
    pub(crate) init: Init,
}

/// Unconstrained slot.
pub(crate) fn free(name: String, shape: &[usize], init: Init) -> ParamSlot {
    ParamSlot {
        name,
        shape: shape.to_vec(),
        non_negative: false,
        init,
    }
}

/// Slot carrying the `≥ 0` constraint.
pub(crate) fn nonneg(name: String, shape: &[usize], init: Init) -> ParamSlot {
    ParamSlot {
        name,
        shape: shape.to_vec(),
        non_negative: true,
        init,
    }
}

/// Ordered parameter layout for a spec: names, shapes and constraints.
pub fn param_layout(spec: &ModelSpec) -> Vec<ParamSlot> {
    match spec.architecture {
        Architecture::IcEot => iceot::layout(spec),
        Architecture::IcLstm => iclstm::layout(spec),
        Architecture::Eot => eot::layout(spec),
        Architecture::Lstm => lstm::layout(spec),
        Architecture::Icfnn => icfnn::layout(spec),
        Architecture::Icrnn => icrnn::layout(spec),
    }
}

/// Number of trainable scalars for a spec.
pub fn param_count(spec: &ModelSpec) -> usize {
    param_layout(spec)
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

fn init_tensor(rng: &mut ChaCha8Rng, s: &ParamSlot, spec: &ModelSpec) -> Tensor {
    let fan_in = s.shape[0] as f64;
    match s.init {
        Init::NonNeg => rng::uniform_tensor(rng, &s.shape, 0.0, 2.0 / fan_in),
        Init::Signed => {
            let a = 1.0 / libm::sqrt(fan_in);
            rng::uniform_tensor(rng, &s.shape, -a, a)
        }
        Init::Zeros => Tensor::zeros(&s.shape),
        Init::Ones => Tensor::full(&s.shape, 1.0),
        Init::CancelLastPosition => {
            let t = spec.sequence_length;
            let pe = layers::positional_encoding(t, spec.model_dim);
            Tensor::from_vec(pe.row(t - 1).iter().map(|v| -v).collect())
        }
    }
}

/// Parameters of one model bound into a graph.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParameter(name.into()))
    }
}

/// A spec together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: ParamSet,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::seeded(seed);
        let mut params = ParamSet::new();
        for s in param_layout(&spec) {
            let t = init_tensor(&mut rng, &s, &spec);
            params.push(Parameter::new(s.name, t, s.non_negative))?;
        }
        Ok(Model { spec, params })
    }

    /// Wraps existing parameters, checking names, shapes and flags against
    /// the layout that `spec` implies.
    pub fn from_params(spec: ModelSpec, params: ParamSet) -> Result<Self> {
        spec.validate()?;
        let layout = param_layout(&spec);
        if layout.len() != params.len() {
            let extra: Vec<&str> = params
                .iter()
                .map(Parameter::name)
                .filter(|n| !layout.iter().any(|s| s.name == *n))
                .collect();
            if let Some(n) = extra.first() {
                return Err(Error::Contract(format!("unexpected parameter `{n}`")));
            }
        }
        for s in &layout {
            let p = params.get(&s.name)?;
            if p.value().shape() != s.shape.as_slice() {
                return Err(Error::shape("parameter", &s.shape, p.value().shape()));
            }
            if p.non_negative() != s.non_negative {
                return Err(Error::Contract(format!(
                    "parameter `{}` has non_negative = {}, expected {}",
                    s.name,
                    p.non_negative(),
                    s.non_negative
                )));
            }
        }
        Ok(Model { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelSpec, ParamSet) {
        (self.spec, self.params)
    }

    /// Registers every parameter in `g`. Fails if a constrained parameter
    /// holds a negative entry.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        self.params.check_constraints()?;
        let mut vars = BTreeMap::new();
        for p in self.params.iter() {
            vars.insert(p.name().into(), g.param(p, trainable)?);
        }
        Ok(Bound { vars })
    }

    /// Batched forward: `x` is `[batch·T, d_in]`, the result `[batch, d_out]`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var, batch: usize) -> Result<Var> {
        let s = &self.spec;
        let want = [batch * s.sequence_length, s.input_dim];
        if g.shape(x) != want {
            return Err(Error::shape("forward input", g.shape(x), &want));
        }
        if self.spec.architecture.uses_expanded_input() {
            let xhat = layers::expand(g, x)?;
            return self.forward_expanded(g, b, xhat, batch);
        }
        match s.architecture {
            Architecture::Eot => eot::forward(g, b, s, x, batch),
            Architecture::Lstm => lstm::forward(g, b, s, x, batch),
            Architecture::Icfnn => icfnn::forward(g, b, s, x, batch),
            _ => unreachable!(),
        }
    }

    /// Forward from an already expanded `[batch·T, 2·d_in]` input. Only for
    /// architectures that expand their input.
    pub fn forward_expanded(
        &self,
        g: &mut Graph,
        b: &Bound,
        xhat: Var,
        batch: usize,
    ) -> Result<Var> {
        let s = &self.spec;
        let want = [batch * s.sequence_length, 2 * s.input_dim];
        if g.shape(xhat) != want {
            return Err(Error::shape("expanded input", g.shape(xhat), &want));
        }
        match s.architecture {
            Architecture::IcEot => iceot::forward_expanded(g, b, s, xhat, batch),
            Architecture::IcLstm => iclstm::forward_expanded(g, b, s, xhat, batch),
            Architecture::Icrnn => icrnn::forward_expanded(g, b, s, xhat, batch),
            a => Err(Error::Contract(format!(
                "{} does not take an expanded input",
                a.label()
            ))),
        }
    }

    /// Forward for a batch held in a tensor, without gradients.
    pub fn predict_batch(&self, x: &Tensor, batch: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &b, xv, batch)?;
        Ok(g.value(y).clone())
    }

    /// Forward for one `[T, d_in]` sequence.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.predict_batch(x, 1)?.into_data())
    }

    /// Forward for one expanded `[T, 2·d_in]` sequence.
    pub fn predict_expanded(&self, xhat: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let xv = g.constant(xhat.clone());
        let y = self.forward_expanded(&mut g, &b, xv, 1)?;
        Ok(g.value(y).clone().into_data())
    }
}

/// Indices of the last time step of every sequence in a `[B·T, ·]` batch.
pub(crate) fn last_rows(batch: usize, seq: usize) -> Vec<usize> {
    (0..batch).map(|b| b * seq + seq - 1).collect()
}

/// Indices of time step `t` of every sequence in a `[B·T, ·]` batch.
pub(crate) fn step_rows(batch: usize, seq: usize, t: usize) -> Vec<usize> {
    (0..batch).map(|b| b * seq + t).collect()
}

pub(crate) fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_specs_follow_table_defaults() {
        let s = ModelSpec::new(Architecture::IcEot, 15, 11, 12);
        assert_eq!((s.num_layers, s.model_dim, s.ff_dim, s.num_heads), (1, 64, 128, 1));
        let s = ModelSpec::new(Architecture::IcLstm, 15, 11, 12);
        assert_eq!((s.num_layers, s.model_dim), (1, 128));
        assert_eq!((s.r, s.tau), (0.0, 1.0));
    }

    #[test]
    fn spec_validation() {
        let mut s = ModelSpec::new(Architecture::IcEot, 2, 1, 1);
        s.num_heads = 3;
        assert!(s.validate().is_err());
        s.num_heads = 2;
        s.validate().unwrap();
        s.tau = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn parameter_count_ordering() {
        let c = |a| param_count(&ModelSpec::new(a, 15, 11, 12));
        let (ic, eot, lstm) = (
            c(Architecture::IcEot),
            c(Architecture::Eot),
            c(Architecture::Lstm),
        );
        assert!(ic < eot && eot < lstm, "{ic} {eot} {lstm}");
    }

    #[test]
    fn init_respects_constraints_and_is_deterministic() {
        for a in Architecture::ALL {
            let spec = ModelSpec::new(a, 3, 2, 4);
            let m = Model::init(spec.clone(), 5).unwrap();
            m.params().check_constraints().unwrap();
            assert_eq!(m, Model::init(spec, 5).unwrap());
        }
    }

    #[test]
    fn from_params_rejects_wrong_layout() {
        let spec = ModelSpec::new(Architecture::IcEot, 3, 2, 4);
        let m = Model::init(spec.clone(), 1).unwrap();
        let (_, mut params) = m.into_parts();
        *params.get_mut("out.w").unwrap() =
            Parameter::new("out.w", Tensor::zeros(&[3, 3]), true);
        assert!(matches!(
            Model::from_params(spec.clone(), params),
            Err(Error::Shape { .. })
        ));
        let mut other = ParamSet::new();
        other.push(Parameter::new("x", Tensor::scalar(0.0), false)).unwrap();
        assert!(Model::from_params(spec, other).is_err());
    }

    #[test]
    fn negative_constrained_weight_is_rejected_at_bind() {
        let spec = ModelSpec::new(Architecture::IcEot, 2, 1, 3);
        let mut m = Model::init(spec, 2).unwrap();
        m.params_mut().get_mut("block0.wx").unwrap().value_mut().data_mut()[0] = -0.1;
        let mut g = Graph::new();
        assert!(matches!(
            m.bind(&mut g, false),
            Err(Error::NonNegativity { .. })
        ));
    }

    #[test]
    fn forward_checks_sequence_length() {
        let spec = ModelSpec::new(Architecture::IcLstm, 2, 1, 3);
        let m = Model::init(spec, 2).unwrap();
        assert!(m.predict(&Tensor::zeros(&[4, 2])).is_err());
        assert_eq!(m.predict(&Tensor::zeros(&[3, 2])).unwrap().len(), 1);
    }

    #[test]
    fn architecture_names_roundtrip() {
        for a in Architecture::ALL {
            assert_eq!(Architecture::parse(a.label()), Some(a));
        }
        assert_eq!(Architecture::parse("IC_EoT"), Some(Architecture::IcEot));
        assert_eq!(Architecture::parse("gru"), None);
    }
}
