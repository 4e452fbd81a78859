//! Input-convex encoder-only transformer.
//!
//! expanded input → non-negative embedding → + positional table →
//! L × [convex attention + residual, non-negative FFN + residual] →
//! last token → non-negative output projection. No normalisation anywhere.

use alloc::format;
use alloc::vec::Vec;

use super::layers::{self, attention};
use super::{free, last_rows, linear, nonneg, Architecture, Bound, Init, Model, ModelSpec, ParamSlot};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub(crate) fn layout(spec: &ModelSpec) -> Vec<ParamSlot> {
    let (d, dm, dff, o) = (spec.input_dim, spec.model_dim, spec.ff_dim, spec.output_dim);
    let mut v = alloc::vec![
        nonneg("embed.w".into(), &[2 * d, dm], Init::NonNeg),
        free("embed.b".into(), &[dm], Init::CancelLastPosition),
    ];
    for l in 0..spec.num_layers {
        let n = |s: &str| format!("block{l}.{s}");
        v.push(nonneg(n("wx"), &[dm, dm], Init::NonNeg));
        v.push(nonneg(n("dq"), &[dm], Init::Ones));
        v.push(nonneg(n("dk"), &[dm], Init::Ones));
        v.push(nonneg(n("dv"), &[dm], Init::Ones));
        v.push(nonneg(n("w1"), &[dm, dff], Init::NonNeg));
        v.push(free(n("b1"), &[dff], Init::Zeros));
        v.push(nonneg(n("w2"), &[dff, dm], Init::NonNeg));
        v.push(free(n("b2"), &[dm], Init::Zeros));
    }
    v.push(nonneg("out.w".into(), &[dm, o], Init::NonNeg));
    v.push(free("out.b".into(), &[o], Init::Zeros));
    v
}

/// Shared non-negative projection, diagonal Q/K/V scalings and
/// convex-r-softmax attention over `[B·T, d_model]`. With `last_only` the
/// queries, and so the result, are restricted to the last token of each
/// sequence.
pub(crate) fn attention_layer(
    g: &mut Graph,
    b: &Bound,
    spec: &ModelSpec,
    layer: usize,
    x: Var,
    batch: usize,
    last_only: bool,
) -> Result<Var> {
    let n = |s: &str| format!("block{layer}.{s}");
    let t = spec.sequence_length;
    let xp = g.matmul(x, b.get(&n("wx"))?)?;
    let k = g.mul(xp, b.get(&n("dk"))?)?;
    let v = g.mul(xp, b.get(&n("dv"))?)?;
    let (xq, queries) = if last_only && t > 1 {
        (g.gather_rows(xp, &last_rows(batch, t))?, 1)
    } else {
        (xp, t)
    };
    let q = g.mul(xq, b.get(&n("dq"))?)?;
    attention(g, q, k, v, batch, t, queries, spec.num_heads, spec.r, spec.tau, 1.0)
}

/// One block. With `last_only` the result is `[B, d_model]` and holds only
/// each sequence's last token.
pub(crate) fn block(
    g: &mut Graph,
    b: &Bound,
    spec: &ModelSpec,
    layer: usize,
    x: Var,
    batch: usize,
    last_only: bool,
) -> Result<Var> {
    let n = |s: &str| format!("block{layer}.{s}");
    let a = attention_layer(g, b, spec, layer, x, batch, last_only)?;
    let res = if last_only && spec.sequence_length > 1 {
        g.gather_rows(x, &last_rows(batch, spec.sequence_length))?
    } else {
        x
    };
    let x1 = g.add(res, a)?;
    let h = linear(g, x1, b.get(&n("w1"))?, Some(b.get(&n("b1"))?))?;
    let h = g.relu(h);
    let f = linear(g, h, b.get(&n("w2"))?, Some(b.get(&n("b2"))?))?;
    g.add(x1, f)
}

pub(crate) fn forward_expanded(
    g: &mut Graph,
    b: &Bound,
    spec: &ModelSpec,
    xhat: Var,
    batch: usize,
) -> Result<Var> {
    let e = linear(g, xhat, b.get("embed.w")?, Some(b.get("embed.b")?))?;
    let pe = g.constant(layers::positional_batch(
        batch,
        spec.sequence_length,
        spec.model_dim,
    ));
    let mut h = g.add(e, pe)?;
    for l in 0..spec.num_layers {
        h = block(g, b, spec, l, h, batch, l + 1 == spec.num_layers)?;
    }
    linear(g, h, b.get("out.w")?, Some(b.get("out.b")?))
}

fn require(model: &Model) -> Result<()> {
    if model.spec().architecture != Architecture::IcEot {
        return Err(Error::Contract(format!(
            "expected an IC-EoT model, got {}",
            model.spec().architecture.label()
        )));
    }
    Ok(())
}

fn token_op(
    x: &Tensor,
    model: &Model,
    f: impl FnOnce(&mut Graph, &Bound, Var) -> Result<Var>,
) -> Result<Tensor> {
    require(model)?;
    let s = model.spec();
    if x.shape() != [s.sequence_length, s.model_dim] {
        return Err(Error::shape(
            "token input",
            x.shape(),
            &[s.sequence_length, s.model_dim],
        ));
    }
    let mut g = Graph::new();
    let b = model.bind(&mut g, false)?;
    let xv = g.constant(x.clone());
    let y = f(&mut g, &b, xv)?;
    Ok(g.value(y).clone())
}

/// Convex multi-head attention of block `layer` applied to one `[T, d_model]`
/// token matrix.
pub fn convex_multihead_attention(x: &Tensor, model: &Model, layer: usize) -> Result<Tensor> {
    token_op(x, model, |g, b, xv| {
        attention_layer(g, b, model.spec(), layer, xv, 1, false)
    })
}

/// One IC-EoT block applied to a `[T, d_model]` token matrix.
pub fn iceot_block(x: &Tensor, model: &Model, layer: usize) -> Result<Tensor> {
    token_op(x, model, |g, b, xv| block(g, b, model.spec(), layer, xv, 1, false))
}

/// One-step-ahead prediction from a `[T, d_in]` history.
pub fn iceot_forward(x_seq: &Tensor, model: &Model) -> Result<Vec<f64>> {
    require(model)?;
    model.predict(x_seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use std::vec;
    use std::vec::Vec as StdVec;

    fn spec(t: usize, dm: usize, heads: usize) -> ModelSpec {
        let mut s = ModelSpec::new(Architecture::IcEot, 2, 1, t);
        s.model_dim = dm;
        s.ff_dim = 6;
        s.num_heads = heads;
        s
    }

    fn zero_model(s: ModelSpec) -> Model {
        let mut m = Model::init(s, 0).unwrap();
        for p in m.params_mut().iter_mut() {
            p.value_mut().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        m
    }

    /// Direct evaluation of the attention equations with scalar loops.
    fn attention_oracle(x: &Tensor, m: &Model, layer: usize) -> StdVec<StdVec<f64>> {
        let s = m.spec();
        let (t, d, h) = (s.sequence_length, s.model_dim, s.num_heads);
        let p = |n: &str| m.params().get(&format!("block{layer}.{n}")).unwrap().value().clone();
        let (wx, dq, dk, dv) = (p("wx"), p("dq"), p("dk"), p("dv"));
        let mut xp = vec![vec![0.0; d]; t];
        for i in 0..t {
            for j in 0..d {
                for k in 0..d {
                    xp[i][j] += x.at2(i, k) * wx.at2(k, j);
                }
            }
        }
        let dh = d / h;
        let mut out = vec![vec![0.0; d]; t];
        for head in 0..h {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..t {
                let z: StdVec<f64> = (0..t)
                    .map(|j| {
                        cols.clone()
                            .map(|c| xp[i][c] * dq.data()[c] * xp[j][c] * dk.data()[c])
                            .sum::<f64>()
                    })
                    .collect();
                let e: StdVec<f64> = z.iter().map(|v| ((v - s.r) / s.tau).exp()).collect();
                let den: f64 = e.iter().sum();
                for j in 0..t {
                    for c in cols.clone() {
                        out[i][c] += e[j] / den * xp[j][c] * dv.data()[c];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn single_token_attention_returns_values() {
        let m = Model::init(spec(1, 4, 1), 3).unwrap();
        let mut r = rng::seeded(1);
        let x = rng::uniform_tensor(&mut r, &[1, 4], -1.0, 1.0);
        let a = convex_multihead_attention(&x, &m, 0).unwrap();
        let want = attention_oracle(&x, &m, 0);
        for c in 0..4 {
            assert!((a.at2(0, c) - want[0][c]).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_query_scaling_gives_uniform_attention() {
        let mut m = Model::init(spec(3, 4, 1), 3).unwrap();
        m.params_mut().get_mut("block0.dq").unwrap().value_mut().data_mut().fill(0.0);
        let mut r = rng::seeded(2);
        let x = rng::uniform_tensor(&mut r, &[3, 4], -1.0, 1.0);
        let a = convex_multihead_attention(&x, &m, 0).unwrap();
        // uniform weights: every output row is the mean of the value rows
        let wx = m.params().get("block0.wx").unwrap().value().clone();
        let dv = m.params().get("block0.dv").unwrap().value().clone();
        for c in 0..4 {
            let mut mean = 0.0;
            for j in 0..3 {
                let xp: f64 = (0..4).map(|k| x.at2(j, k) * wx.at2(k, c)).sum();
                mean += xp * dv.data()[c] / 3.0;
            }
            for i in 0..3 {
                assert!((a.at2(i, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_scalar_loop_oracle() {
        for heads in [1, 2] {
            let m = Model::init(spec(3, 4, heads), 11).unwrap();
            let mut r = rng::seeded(12);
            let x = rng::uniform_tensor(&mut r, &[3, 4], -1.0, 1.0);
            let a = convex_multihead_attention(&x, &m, 0).unwrap();
            let want = attention_oracle(&x, &m, 0);
            for i in 0..3 {
                for c in 0..4 {
                    assert!((a.at2(i, c) - want[i][c]).abs() < 1e-12, "heads={heads}");
                }
            }
        }
    }

    #[test]
    fn zero_parameters_leave_block_as_identity() {
        let m = zero_model(spec(3, 4, 1));
        let mut r = rng::seeded(5);
        let x = rng::uniform_tensor(&mut r, &[3, 4], -1.0, 1.0);
        let y = iceot_block(&x, &m, 0).unwrap();
        assert_eq!(y, x);
        let z = iceot_block(&Tensor::zeros(&[3, 4]), &Model::init(spec(3, 4, 1), 1).unwrap(), 0)
            .unwrap();
        assert!(z.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn block_is_composition_of_sub_ops() {
        let m = Model::init(spec(3, 4, 2), 21).unwrap();
        let mut r = rng::seeded(22);
        let x = rng::uniform_tensor(&mut r, &[3, 4], -1.0, 1.0);
        let a = convex_multihead_attention(&x, &m, 0).unwrap();
        let p = |n: &str| m.params().get(n).unwrap().value().clone();
        let (w1, b1, w2, b2) = (p("block0.w1"), p("block0.b1"), p("block0.w2"), p("block0.b2"));
        let y = iceot_block(&x, &m, 0).unwrap();
        for i in 0..3 {
            let x1: StdVec<f64> = (0..4).map(|c| x.at2(i, c) + a.at2(i, c)).collect();
            let h: StdVec<f64> = (0..6)
                .map(|j| {
                    let v: f64 = (0..4).map(|c| x1[c] * w1.at2(c, j)).sum::<f64>() + b1.data()[j];
                    v.max(0.0)
                })
                .collect();
            for c in 0..4 {
                let f: f64 = (0..6).map(|j| h[j] * w2.at2(j, c)).sum::<f64>() + b2.data()[c];
                assert!((y.at2(i, c) - (x1[c] + f)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_model_outputs_zero() {
        let m = zero_model(spec(3, 4, 1));
        let mut r = rng::seeded(6);
        let x = rng::uniform_tensor(&mut r, &[3, 2], -1.0, 1.0);
        assert_eq!(iceot_forward(&x, &m).unwrap(), vec![0.0]);
    }

    #[test]
    fn doubling_nonnegative_half_does_not_decrease_output() {
        let mut s = spec(4, 8, 1);
        s.output_dim = 3;
        let m = Model::init(s, 8).unwrap();
        let mut r = rng::seeded(9);
        for _ in 0..20 {
            let x = rng::uniform_tensor(&mut r, &[4, 2], 0.0, 1.0);
            // −x half masked to zero
            let mut xhat = Tensor::zeros(&[4, 4]);
            let mut xhat2 = Tensor::zeros(&[4, 4]);
            for i in 0..4 {
                for c in 0..2 {
                    xhat.data_mut()[i * 4 + c] = x.at2(i, c);
                    xhat2.data_mut()[i * 4 + c] = 2.0 * x.at2(i, c);
                }
            }
            let y1 = m.predict_expanded(&xhat).unwrap();
            let y2 = m.predict_expanded(&xhat2).unwrap();
            for (a, b) in y1.iter().zip(&y2) {
                assert!(b + 1e-12 >= *a);
            }
        }
    }

    #[test]
    fn wrong_architecture_is_rejected() {
        let m = Model::init(ModelSpec::new(Architecture::IcLstm, 2, 1, 3), 0).unwrap();
        assert!(iceot_forward(&Tensor::zeros(&[3, 2]), &m).is_err());
    }
}
