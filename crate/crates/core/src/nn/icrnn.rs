//! Input-convex RNN over the expanded input:
//! `hₜ = relu(U ûₜ + W hₜ₋₁ + D₂ ûₜ₋₁ + b_h)`,
//! `y = V h_T + D₁ h_{T−1} + D₃ û_T + b_y`.

use alloc::vec::Vec;

use super::{free, nonneg, step_rows, Bound, Init, ModelSpec, ParamSlot};
use crate::error::Result;
use crate::graph::{Graph, Var};

pub(crate) fn layout(spec: &ModelSpec) -> Vec<ParamSlot> {
    let (u, h, o) = (2 * spec.input_dim, spec.model_dim, spec.output_dim);
    alloc::vec![
        nonneg("icrnn.U".into(), &[u, h], Init::NonNeg),
        nonneg("icrnn.W".into(), &[h, h], Init::NonNeg),
        nonneg("icrnn.D2".into(), &[u, h], Init::NonNeg),
        free("icrnn.bh".into(), &[h], Init::Zeros),
        nonneg("icrnn.V".into(), &[h, o], Init::NonNeg),
        nonneg("icrnn.D1".into(), &[h, o], Init::NonNeg),
        nonneg("icrnn.D3".into(), &[u, o], Init::NonNeg),
        free("icrnn.by".into(), &[o], Init::Zeros),
    ]
}

pub(crate) fn forward_expanded(
    g: &mut Graph,
    b: &Bound,
    spec: &ModelSpec,
    xhat: Var,
    batch: usize,
) -> Result<Var> {
    let t_len = spec.sequence_length;
    let uu = g.matmul(xhat, b.get("icrnn.U")?)?;
    let du = g.matmul(xhat, b.get("icrnn.D2")?)?;
    let bh = b.get("icrnn.bh")?;
    let mut h_prev: Option<Var> = None;
    let mut h: Option<Var> = None;
    for t in 0..t_len {
        let mut pre = g.gather_rows(uu, &step_rows(batch, t_len, t))?;
        if let Some(hv) = h {
            let wh = g.matmul(hv, b.get("icrnn.W")?)?;
            pre = g.add(pre, wh)?;
            let d = g.gather_rows(du, &step_rows(batch, t_len, t - 1))?;
            pre = g.add(pre, d)?;
        }
        pre = g.add(pre, bh)?;
        h_prev = h;
        h = Some(g.relu(pre));
    }
    let h = h.expect("at least one step");
    let last = g.gather_rows(xhat, &step_rows(batch, t_len, t_len - 1))?;
    let mut y = g.matmul(h, b.get("icrnn.V")?)?;
    // h₀ = 0, so the D₁ term vanishes for single-step inputs
    if let Some(hp) = h_prev {
        let dh = g.matmul(hp, b.get("icrnn.D1")?)?;
        y = g.add(y, dh)?;
    }
    let dx = g.matmul(last, b.get("icrnn.D3")?)?;
    let y = g.add(y, dx)?;
    g.add(y, b.get("icrnn.by")?)
}

#[cfg(test)]
mod tests {
    use super::super::{Architecture, Model};
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;
    use std::vec;
    use std::vec::Vec as StdVec;

    fn model(seed: u64) -> Model {
        let mut s = ModelSpec::new(Architecture::Icrnn, 1, 2, 2);
        s.model_dim = 2;
        Model::init(s, seed).unwrap()
    }

    #[test]
    fn zero_weights_give_activation_of_zero() {
        let mut m = model(0);
        for p in m.params_mut().iter_mut() {
            p.value_mut().data_mut().fill(0.0);
        }
        let y = m.predict(&Tensor::from_rows(&[vec![0.4], vec![-2.0]]).unwrap()).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn two_step_matches_oracle() {
        let mut m = model(1);
        let mut r = rng::seeded(2);
        for n in ["icrnn.bh", "icrnn.by"] {
            *m.params_mut().get_mut(n).unwrap().value_mut() =
                rng::uniform_tensor(&mut r, &[2], -0.3, 0.3);
        }
        let x = rng::uniform_tensor(&mut r, &[2, 1], -1.0, 1.0);
        let p = |n: &str| m.params().get(n).unwrap().value().clone();
        let (u, w, d2, bh) = (p("icrnn.U"), p("icrnn.W"), p("icrnn.D2"), p("icrnn.bh"));
        let (v, d1, d3, by) = (p("icrnn.V"), p("icrnn.D1"), p("icrnn.D3"), p("icrnn.by"));
        let uhat = |t: usize| [x.at2(t, 0), -x.at2(t, 0)];
        let mv = |m: &Tensor, v: &[f64], j: usize| -> f64 {
            (0..v.len()).map(|k| v[k] * m.at2(k, j)).sum()
        };
        let mut hs: StdVec<StdVec<f64>> = vec![vec![0.0; 2]];
        for t in 0..2 {
            let hp = hs.last().unwrap().clone();
            let up: [f64; 2] = if t == 0 { [0.0, 0.0] } else { uhat(t - 1) };
            let h: StdVec<f64> = (0..2)
                .map(|j| {
                    (mv(&u, &uhat(t), j) + mv(&w, &hp, j) + mv(&d2, &up, j) + bh.data()[j]).max(0.0)
                })
                .collect();
            hs.push(h);
        }
        let y: StdVec<f64> = (0..2)
            .map(|j| mv(&v, &hs[2], j) + mv(&d1, &hs[1], j) + mv(&d3, &uhat(1), j) + by.data()[j])
            .collect();
        let got = m.predict(&x).unwrap();
        for j in 0..2 {
            assert!((got[j] - y[j]).abs() < 1e-12);
        }
    }
}
