//! Standard LSTM baseline with sigmoid/tanh gates and unconstrained weights.

use alloc::format;
use alloc::vec::Vec;

use super::{free, linear, step_rows, Bound, Init, ModelSpec, ParamSlot};
use crate::error::Result;
use crate::graph::{Graph, Var};

pub(crate) fn layout(spec: &ModelSpec) -> Vec<ParamSlot> {
    let h = spec.model_dim;
    let mut v = Vec::new();
    for l in 0..spec.num_layers {
        let n = |s: &str| format!("lstm.l{l}.{s}");
        let input = if l == 0 { spec.input_dim } else { h };
        v.push(free(n("wx"), &[input, 4 * h], Init::Signed));
        v.push(free(n("wh"), &[h, 4 * h], Init::Signed));
        v.push(free(n("b"), &[4 * h], Init::Zeros));
    }
    v.push(free("out.w".into(), &[h, spec.output_dim], Init::Signed));
    v.push(free("out.b".into(), &[spec.output_dim], Init::Zeros));
    v
}

pub(crate) fn forward(
    g: &mut Graph,
    b: &Bound,
    spec: &ModelSpec,
    x: Var,
    batch: usize,
) -> Result<Var> {
    let t_len = spec.sequence_length;
    let hd = spec.model_dim;
    let mut inputs: Vec<Var> = Vec::new();
    let mut last = None;
    for l in 0..spec.num_layers {
        let n = |s: &str| format!("lstm.l{l}.{s}");
        let wx = b.get(&n("wx"))?;
        let projected: Vec<Var> = if l == 0 {
            let all = g.matmul(x, wx)?;
            (0..t_len)
                .map(|t| g.gather_rows(all, &step_rows(batch, t_len, t)))
                .collect::<Result<_>>()?
        } else {
            inputs
                .iter()
                .map(|&v| g.matmul(v, wx))
                .collect::<Result<_>>()?
        };
        let (mut h, mut c): (Option<Var>, Option<Var>) = (None, None);
        let mut outs = Vec::with_capacity(t_len);
        for xw in projected {
            // zero initial state contributes nothing
            let pre = match h {
                Some(h) => {
                    let hw = g.matmul(h, b.get(&n("wh"))?)?;
                    g.add(xw, hw)?
                }
                None => xw,
            };
            let pre = g.add(pre, b.get(&n("b"))?)?;
            let i = g.slice_cols(pre, 0, hd)?;
            let i = g.sigmoid(i);
            let cand = g.slice_cols(pre, 2 * hd, hd)?;
            let cand = g.tanh(cand);
            let o = g.slice_cols(pre, 3 * hd, hd)?;
            let o = g.sigmoid(o);
            let write = g.mul(i, cand)?;
            let cn = match c {
                Some(c) => {
                    let f = g.slice_cols(pre, hd, hd)?;
                    let f = g.sigmoid(f);
                    let keep = g.mul(f, c)?;
                    g.add(keep, write)?
                }
                None => write,
            };
            let tc = g.tanh(cn);
            let hn = g.mul(o, tc)?;
            (h, c) = (Some(hn), Some(cn));
            outs.push(hn);
        }
        last = h;
        inputs = outs;
    }
    let h = last.expect("at least one layer");
    linear(g, h, b.get("out.w")?, Some(b.get("out.b")?))
}

#[cfg(test)]
mod tests {
    use super::super::{Architecture, Model};
    use super::*;
    use crate::rng;
    use std::vec;

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    #[test]
    fn two_step_two_unit_matches_oracle() {
        let mut s = ModelSpec::new(Architecture::Lstm, 1, 1, 2);
        s.model_dim = 2;
        let m = Model::init(s, 3).unwrap();
        let mut r = rng::seeded(4);
        let x = rng::uniform_tensor(&mut r, &[2, 1], -1.0, 1.0);
        let p = |n: &str| m.params().get(n).unwrap().value().clone();
        let (wx, wh, bb) = (p("lstm.l0.wx"), p("lstm.l0.wh"), p("lstm.l0.b"));
        let (mut h, mut c) = (vec![0.0; 2], vec![0.0; 2]);
        for t in 0..2 {
            let pre: std::vec::Vec<f64> = (0..8)
                .map(|j| {
                    x.at2(t, 0) * wx.at2(0, j)
                        + (0..2).map(|k| h[k] * wh.at2(k, j)).sum::<f64>()
                        + bb.data()[j]
                })
                .collect();
            for j in 0..2 {
                let (i, f, cc, o) = (sig(pre[j]), sig(pre[2 + j]), pre[4 + j].tanh(), sig(pre[6 + j]));
                c[j] = f * c[j] + i * cc;
                h[j] = o * c[j].tanh();
            }
        }
        let want = (0..2).map(|k| h[k] * p("out.w").at2(k, 0)).sum::<f64>() + p("out.b").data()[0];
        assert!((m.predict(&x).unwrap()[0] - want).abs() < 1e-12);
    }
}
