//! Standard encoder-only transformer baseline: unconstrained projections,
//! scaled softmax attention, post-residual layer normalisation.

use alloc::format;
use alloc::vec::Vec;

use super::layers::{self, attention};
use super::{free, last_rows, linear, Bound, Init, ModelSpec, ParamSlot};
use crate::error::Result;
use crate::graph::{Graph, Var};

const LN_EPS: f64 = 1e-5;

pub(crate) fn layout(spec: &ModelSpec) -> Vec<ParamSlot> {
    let (d, dm, dff, o) = (spec.input_dim, spec.model_dim, spec.ff_dim, spec.output_dim);
    let mut v = alloc::vec![
        free("embed.w".into(), &[d, dm], Init::Signed),
        free("embed.b".into(), &[dm], Init::Zeros),
    ];
    for l in 0..spec.num_layers {
        let n = |s: &str| format!("block{l}.{s}");
        for p in ["q", "k", "v", "o"] {
            v.push(free(n(&format!("w{p}")), &[dm, dm], Init::Signed));
            v.push(free(n(&format!("b{p}")), &[dm], Init::Zeros));
        }
        v.push(free(n("ln1.g"), &[dm], Init::Ones));
        v.push(free(n("ln1.b"), &[dm], Init::Zeros));
        v.push(free(n("w1"), &[dm, dff], Init::Signed));
        v.push(free(n("b1"), &[dff], Init::Zeros));
        v.push(free(n("w2"), &[dff, dm], Init::Signed));
        v.push(free(n("b2"), &[dm], Init::Zeros));
        v.push(free(n("ln2.g"), &[dm], Init::Ones));
        v.push(free(n("ln2.b"), &[dm], Init::Zeros));
    }
    v.push(free("out.w".into(), &[dm, o], Init::Signed));
    v.push(free("out.b".into(), &[o], Init::Zeros));
    v
}

fn norm(g: &mut Graph, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS)?;
    let n = g.mul(n, b.get(&format!("{prefix}.g"))?)?;
    g.add(n, b.get(&format!("{prefix}.b"))?)
}

pub(crate) fn forward(
    g: &mut Graph,
    b: &Bound,
    spec: &ModelSpec,
    x: Var,
    batch: usize,
) -> Result<Var> {
    forward_with(g, b, spec, x, batch, true)
}

fn forward_with(
    g: &mut Graph,
    b: &Bound,
    spec: &ModelSpec,
    x: Var,
    batch: usize,
    prune: bool,
) -> Result<Var> {
    let t = spec.sequence_length;
    let e = linear(g, x, b.get("embed.w")?, Some(b.get("embed.b")?))?;
    let pe = g.constant(layers::positional_batch(batch, t, spec.model_dim));
    let mut h = g.add(e, pe)?;
    let dh = spec.model_dim / spec.num_heads;
    for l in 0..spec.num_layers {
        let n = |s: &str| format!("block{l}.{s}");
        // only the last token of the final block reaches the output
        let last_only = prune && l + 1 == spec.num_layers && t > 1;
        let (hq, queries) = if last_only {
            (g.gather_rows(h, &last_rows(batch, t))?, 1)
        } else {
            (h, t)
        };
        let q = linear(g, hq, b.get(&n("wq"))?, Some(b.get(&n("bq"))?))?;
        let k = linear(g, h, b.get(&n("wk"))?, Some(b.get(&n("bk"))?))?;
        let v = linear(g, h, b.get(&n("wv"))?, Some(b.get(&n("bv"))?))?;
        let a = attention(
            g,
            q,
            k,
            v,
            batch,
            t,
            queries,
            spec.num_heads,
            0.0,
            1.0,
            1.0 / libm::sqrt(dh as f64),
        )?;
        let a = linear(g, a, b.get(&n("wo"))?, Some(b.get(&n("bo"))?))?;
        let x1 = g.add(hq, a)?;
        let x1 = norm(g, b, x1, &n("ln1"))?;
        let f = linear(g, x1, b.get(&n("w1"))?, Some(b.get(&n("b1"))?))?;
        let f = g.relu(f);
        let f = linear(g, f, b.get(&n("w2"))?, Some(b.get(&n("b2"))?))?;
        let x2 = g.add(x1, f)?;
        h = norm(g, b, x2, &n("ln2"))?;
    }
    if !prune && t > 1 {
        h = g.gather_rows(h, &last_rows(batch, t))?;
    }
    linear(g, h, b.get("out.w")?, Some(b.get("out.b")?))
}
