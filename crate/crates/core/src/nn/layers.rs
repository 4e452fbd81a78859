//! Parameter-free building blocks shared by the transformer variants.

use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Row-wise `[x, −x]`.
pub fn expand_input(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(2 * x.len());
    for i in 0..r {
        let row = x.row(i);
        out.extend_from_slice(row);
        out.extend(row.iter().map(|v| -v));
    }
    Tensor::new(alloc::vec![r, 2 * c], out).expect("shape is consistent")
}

pub(crate) fn expand(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.neg(x);
    g.concat_cols(&[x, n])
}

/// Sinusoidal position table: `sin(t / 10000^(2i/d))` in even columns and
/// the matching cosine in odd ones.
pub fn positional_encoding(len: usize, d_model: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, d_model]);
    let data = t.data_mut();
    for pos in 0..len {
        for i in (0..d_model).step_by(2) {
            let freq = libm::pow(10000.0, i as f64 / d_model as f64);
            let angle = pos as f64 / freq;
            data[pos * d_model + i] = libm::sin(angle);
            if i + 1 < d_model {
                data[pos * d_model + i + 1] = libm::cos(angle);
            }
        }
    }
    t
}

/// Position table repeated for every sequence of a `[B·T, d]` batch.
pub(crate) fn positional_batch(batch: usize, len: usize, d_model: usize) -> Tensor {
    let pe = positional_encoding(len, d_model);
    let mut data = Vec::with_capacity(batch * pe.len());
    for _ in 0..batch {
        data.extend_from_slice(pe.data());
    }
    Tensor::new(alloc::vec![batch * len, d_model], data).expect("shape is consistent")
}

/// Convex-r-softmax over the last axis: `exp((z − r)/τ) / Σ exp((z − r)/τ)`.
pub fn convex_r_softmax(z: &Tensor, r: f64, tau: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(z.clone());
    let y = g.softmax(v, r, tau)?;
    Ok(g.value(y).clone())
}

/// Scaled dot-product attention over `heads` column groups of `[B·T, d]`
/// query, key and value matrices. No causal mask.
#[allow(clippy::too_many_arguments)]
/// Softmax attention of `queries` trailing query rows per sequence against
/// all `seq` keys. `q` is `[B·queries, d]`, `k` and `v` are `[B·seq, d]`.
pub(crate) fn attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    seq: usize,
    queries: usize,
    heads: usize,
    r: f64,
    tau: f64,
    score_scale: f64,
) -> Result<Var> {
    if seq == 1 && queries == 1 {
        // a single key receives weight exactly 1
        return Ok(v);
    }
    let d = g.shape(q)[1];
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let q3 = g.reshape(qh, &[batch, queries, dh])?;
        let k3 = g.reshape(kh, &[batch, seq, dh])?;
        let v3 = g.reshape(vh, &[batch, seq, dh])?;
        let mut scores = g.batch_matmul(q3, k3, true)?;
        if score_scale != 1.0 {
            scores = g.scale(scores, score_scale);
        }
        let a = g.softmax(scores, r, tau)?;
        let o = g.batch_matmul(a, v3, false)?;
        outs.push(g.reshape(o, &[batch * queries, dh])?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expand_examples() {
        let x = Tensor::from_rows(&[alloc::vec![1.0, 2.0]]).unwrap();
        assert_eq!(expand_input(&x).data(), &[1.0, 2.0, -1.0, -2.0]);
        let z = Tensor::zeros(&[1, 3]);
        let e = expand_input(&z);
        assert_eq!(e.shape(), &[1, 6]);
        assert!(e.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn expand_negates_second_half() {
        let mut rng = crate::rng::seeded(4);
        let x = crate::rng::uniform_tensor(&mut rng, &[5, 3], -2.0, 2.0);
        let e = expand_input(&x);
        for r in 0..5 {
            for c in 0..3 {
                assert_eq!(e.at2(r, c), x.at2(r, c));
                assert_eq!(e.at2(r, c + 3), -x.at2(r, c));
            }
        }
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(3, 6);
        for c in 0..6 {
            assert_eq!(pe.at2(0, c), if c % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!((pe.at2(1, 0) - 0.8415).abs() < 1e-4);
    }

    #[test]
    fn positional_encoding_matches_scalar_loop() {
        let (t, d) = (4, 8);
        let pe = positional_encoding(t, d);
        for pos in 0..t {
            for col in 0..d {
                let i2 = (col / 2 * 2) as f64;
                let angle = pos as f64 / 10000f64.powf(i2 / d as f64);
                let want = if col % 2 == 0 { angle.sin() } else { angle.cos() };
                assert!((pe.at2(pos, col) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let z = Tensor::from_vec(alloc::vec![0.0, 0.0]);
        assert_eq!(convex_r_softmax(&z, 3.0, 1.0).unwrap().data(), &[0.5, 0.5]);
        let z = Tensor::from_vec(alloc::vec![1.0, 0.0]);
        let y0 = convex_r_softmax(&z, 0.0, 1.0).unwrap();
        let e = core::f64::consts::E;
        assert!((y0.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((y0.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((y0.data()[0] - 0.73106).abs() < 1e-5);
        // The threshold cancels between numerator and denominator.
        let y7 = convex_r_softmax(&z, 7.0, 1.0).unwrap();
        assert!(y0.max_abs_diff(&y7) < 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_inputs() {
        let z = Tensor::from_vec(alloc::vec![f64::NAN, 0.0]);
        assert!(convex_r_softmax(&z, 0.0, 1.0).is_err());
        let z = Tensor::from_vec(alloc::vec![1.0, 0.0]);
        assert!(convex_r_softmax(&z, 0.0, 0.0).is_err());
    }
}
