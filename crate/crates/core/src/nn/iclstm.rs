//! Input-convex LSTM: one shared pre-activation per step, separated into
//! gates by non-negative diagonal scalings, with rectifier activations.

use alloc::format;
use alloc::vec::Vec;

use super::{free, layers, linear, nonneg, step_rows, Architecture, Bound, Init, Model, ModelSpec, ParamSlot};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub(crate) fn layout(spec: &ModelSpec) -> Vec<ParamSlot> {
    let h = spec.model_dim;
    let mut v = Vec::new();
    for l in 0..spec.num_layers {
        let n = |s: &str| format!("iclstm.l{l}.{s}");
        let input = if l == 0 { 2 * spec.input_dim } else { h };
        v.push(nonneg(n("wx"), &[input, h], Init::NonNeg));
        v.push(nonneg(n("wh"), &[h, h], Init::NonNeg));
        for gate in ["f", "i", "o", "c"] {
            v.push(nonneg(n(&format!("d{gate}")), &[h], Init::Ones));
        }
        for gate in ["f", "i", "o", "c"] {
            v.push(free(n(&format!("b{gate}")), &[h], Init::Zeros));
        }
    }
    v.push(nonneg("out.w".into(), &[h, spec.output_dim], Init::NonNeg));
    v.push(free("out.b".into(), &[spec.output_dim], Init::Zeros));
    v
}

/// One cell step given the already projected input `x̂ₜ·W⁽ˣ⁾`. `None`
/// states are zero.
pub(crate) fn cell(
    g: &mut Graph,
    b: &Bound,
    layer: usize,
    xw: Var,
    h_prev: Option<Var>,
    c_prev: Option<Var>,
) -> Result<(Var, Var)> {
    let n = |s: &str| format!("iclstm.l{layer}.{s}");
    let pre = match h_prev {
        Some(h) => {
            let hw = g.matmul(h, b.get(&n("wh"))?)?;
            g.add(xw, hw)?
        }
        None => xw,
    };
    let gate = |g: &mut Graph, name: &str| -> Result<Var> {
        let s = g.mul(pre, b.get(&n(&format!("d{name}")))?)?;
        let s = g.add(s, b.get(&n(&format!("b{name}")))?)?;
        Ok(g.relu(s))
    };
    let i = gate(g, "i")?;
    let o = gate(g, "o")?;
    let cand = gate(g, "c")?;
    let write = g.mul(i, cand)?;
    let c = match c_prev {
        Some(c_prev) => {
            let f = gate(g, "f")?;
            let keep = g.mul(f, c_prev)?;
            g.add(keep, write)?
        }
        None => write,
    };
    let act = g.relu(c);
    let h = g.mul(o, act)?;
    Ok((h, c))
}

pub(crate) fn forward_expanded(
    g: &mut Graph,
    b: &Bound,
    spec: &ModelSpec,
    xhat: Var,
    batch: usize,
) -> Result<Var> {
    let t_len = spec.sequence_length;
    // Per-step inputs of the current layer, each [B, width].
    let mut inputs: Vec<Var> = Vec::new();
    let mut last = None;
    for l in 0..spec.num_layers {
        let wx = b.get(&format!("iclstm.l{l}.wx"))?;
        let projected: Vec<Var> = if l == 0 {
            let all = g.matmul(xhat, wx)?;
            (0..t_len)
                .map(|t| g.gather_rows(all, &step_rows(batch, t_len, t)))
                .collect::<Result<_>>()?
        } else {
            inputs
                .iter()
                .map(|&x| g.matmul(x, wx))
                .collect::<Result<_>>()?
        };
        let (mut h, mut c) = (None, None);
        let mut outs = Vec::with_capacity(t_len);
        for xw in projected {
            let (hn, cn) = cell(g, b, l, xw, h, c)?;
            (h, c) = (Some(hn), Some(cn));
            outs.push(hn);
        }
        last = h;
        inputs = outs;
    }
    let h = last.expect("at least one layer and step");
    linear(g, h, b.get("out.w")?, Some(b.get("out.b")?))
}

/// One first-layer IC-LSTM step for a single sample: `x_t` is `[1, d_in]`,
/// the states `[1, hidden]`. Returns `(h_t, c_t)`.
pub fn iclstm_cell(
    x_t: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
    model: &Model,
) -> Result<(Tensor, Tensor)> {
    if model.spec().architecture != Architecture::IcLstm {
        return Err(Error::Contract("expected an IC-LSTM model".into()));
    }
    let mut g = Graph::new();
    let b = model.bind(&mut g, false)?;
    let x = g.constant(x_t.clone());
    let xhat = layers::expand(&mut g, x)?;
    let xw = g.matmul(xhat, b.get("iclstm.l0.wx")?)?;
    let hp = g.constant(h_prev.clone());
    let cp = g.constant(c_prev.clone());
    let (h, c) = cell(&mut g, &b, 0, xw, Some(hp), Some(cp))?;
    Ok((g.value(h).clone(), g.value(c).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use std::vec;
    use std::vec::Vec as StdVec;

    fn model(seed: u64) -> Model {
        let mut s = ModelSpec::new(Architecture::IcLstm, 2, 1, 2);
        s.model_dim = 3;
        Model::init(s, seed).unwrap()
    }

    fn relu(v: f64) -> f64 {
        v.max(0.0)
    }

    /// Scalar-loop evaluation of the gate equations for one step.
    fn cell_oracle(m: &Model, x: &[f64], h: &[f64], c: &[f64]) -> (StdVec<f64>, StdVec<f64>) {
        let p = |n: &str| m.params().get(&format!("iclstm.l0.{n}")).unwrap().value().clone();
        let (wx, wh) = (p("wx"), p("wh"));
        let hd = h.len();
        let xhat: StdVec<f64> = x.iter().copied().chain(x.iter().map(|v| -v)).collect();
        let pre: StdVec<f64> = (0..hd)
            .map(|j| {
                (0..xhat.len()).map(|k| xhat[k] * wx.at2(k, j)).sum::<f64>()
                    + (0..hd).map(|k| h[k] * wh.at2(k, j)).sum::<f64>()
            })
            .collect();
        let gate = |name: &str| -> StdVec<f64> {
            let (d, b) = (p(&format!("d{name}")), p(&format!("b{name}")));
            (0..hd).map(|j| relu(d.data()[j] * pre[j] + b.data()[j])).collect()
        };
        let (f, i, o, cc) = (gate("f"), gate("i"), gate("o"), gate("c"));
        let c_new: StdVec<f64> = (0..hd).map(|j| f[j] * c[j] + i[j] * cc[j]).collect();
        let h_new: StdVec<f64> = (0..hd).map(|j| o[j] * relu(c_new[j])).collect();
        (h_new, c_new)
    }

    #[test]
    fn zero_weights_zero_state() {
        let mut m = model(1);
        for p in m.params_mut().iter_mut() {
            p.value_mut().data_mut().fill(0.0);
        }
        let x = Tensor::from_rows(&[vec![0.7, -0.3]]).unwrap();
        let (h, c) = iclstm_cell(&x, &Tensor::full(&[1, 3], 0.5), &Tensor::full(&[1, 3], 0.5), &m)
            .unwrap();
        assert!(h.data().iter().chain(c.data()).all(|v| *v == 0.0));
    }

    #[test]
    fn forget_one_input_zero_passes_cell_through() {
        let mut m = model(2);
        for name in ["df", "di"] {
            m.params_mut().get_mut(&format!("iclstm.l0.{name}")).unwrap().value_mut().data_mut().fill(0.0);
        }
        m.params_mut().get_mut("iclstm.l0.bf").unwrap().value_mut().data_mut().fill(1.0);
        m.params_mut().get_mut("iclstm.l0.bi").unwrap().value_mut().data_mut().fill(0.0);
        let x = Tensor::from_rows(&[vec![0.2, 0.9]]).unwrap();
        let c_prev = Tensor::from_rows(&[vec![0.3, -1.2, 4.0]]).unwrap();
        let (_, c) = iclstm_cell(&x, &Tensor::full(&[1, 3], 0.1), &c_prev, &m).unwrap();
        assert_eq!(c, c_prev);
    }

    #[test]
    fn cell_matches_scalar_loop_oracle() {
        let mut m = model(3);
        let mut r = rng::seeded(4);
        for gate in ["bf", "bi", "bo", "bc"] {
            *m.params_mut().get_mut(&format!("iclstm.l0.{gate}")).unwrap().value_mut() =
                rng::uniform_tensor(&mut r, &[3], -0.5, 0.5);
        }
        let x = rng::uniform_tensor(&mut r, &[1, 2], -1.0, 1.0);
        let h = rng::uniform_tensor(&mut r, &[1, 3], 0.0, 1.0);
        let c = rng::uniform_tensor(&mut r, &[1, 3], -1.0, 1.0);
        let (hn, cn) = iclstm_cell(&x, &h, &c, &m).unwrap();
        let (ho, co) = cell_oracle(&m, x.data(), h.data(), c.data());
        for j in 0..3 {
            assert!((hn.data()[j] - ho[j]).abs() < 1e-12);
            assert!((cn.data()[j] - co[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn two_step_forward_matches_oracle() {
        let m = model(5);
        let mut r = rng::seeded(6);
        let x = rng::uniform_tensor(&mut r, &[2, 2], -1.0, 1.0);
        let (mut h, mut c) = (vec![0.0; 3], vec![0.0; 3]);
        for t in 0..2 {
            (h, c) = cell_oracle(&m, x.row(t), &h, &c);
        }
        let w = m.params().get("out.w").unwrap().value().clone();
        let b = m.params().get("out.b").unwrap().value().data()[0];
        let want: f64 = (0..3).map(|j| h[j] * w.at2(j, 0)).sum::<f64>() + b;
        let got = m.predict(&x).unwrap()[0];
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn negative_constrained_weight_is_an_error() {
        let mut m = model(7);
        m.params_mut().get_mut("iclstm.l0.wh").unwrap().value_mut().data_mut()[2] = -1.0;
        let x = Tensor::zeros(&[1, 2]);
        let s = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            iclstm_cell(&x, &s, &s, &m),
            Err(Error::NonNegativity { .. })
        ));
    }
}
