//! Input-convex feed-forward network over the flattened input sequence:
//! `z_{i+1} = relu(W_z zᵢ + W_y y + bᵢ)`, `z₀ = 0`, with an affine read-out
//! `W_z z_L + W_y y + b`. Only the `W_z` paths are constrained.

use alloc::format;
use alloc::vec::Vec;

use super::{free, nonneg, Bound, Init, ModelSpec, ParamSlot};
use crate::error::Result;
use crate::graph::{Graph, Var};

pub(crate) fn layout(spec: &ModelSpec) -> Vec<ParamSlot> {
    let y = spec.sequence_length * spec.input_dim;
    let h = spec.model_dim;
    let mut v = Vec::new();
    for i in 0..spec.num_layers {
        let n = |s: &str| format!("icfnn.l{i}.{s}");
        if i > 0 {
            v.push(nonneg(n("wz"), &[h, h], Init::NonNeg));
        }
        v.push(free(n("wy"), &[y, h], Init::Signed));
        v.push(free(n("b"), &[h], Init::Zeros));
    }
    v.push(nonneg("out.wz".into(), &[h, spec.output_dim], Init::NonNeg));
    v.push(free("out.wy".into(), &[y, spec.output_dim], Init::Signed));
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
    let y = g.reshape(x, &[batch, spec.sequence_length * spec.input_dim])?;
    let mut z: Option<Var> = None;
    for i in 0..spec.num_layers {
        let n = |s: &str| format!("icfnn.l{i}.{s}");
        let mut pre = g.matmul(y, b.get(&n("wy"))?)?;
        if let Some(z) = z {
            let zz = g.matmul(z, b.get(&n("wz"))?)?;
            pre = g.add(pre, zz)?;
        }
        pre = g.add(pre, b.get(&n("b"))?)?;
        z = Some(g.relu(pre));
    }
    let z = z.expect("at least one layer");
    let a = g.matmul(z, b.get("out.wz")?)?;
    let c = g.matmul(y, b.get("out.wy")?)?;
    let out = g.add(a, c)?;
    g.add(out, b.get("out.b")?)
}

#[cfg(test)]
mod tests {
    use super::super::{Architecture, Model};
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;

    #[test]
    fn first_layer_is_rectified_input_map() {
        let mut s = ModelSpec::new(Architecture::Icfnn, 2, 1, 1);
        s.model_dim = 3;
        s.num_layers = 1;
        let m = Model::init(s, 4).unwrap();
        let mut r = rng::seeded(1);
        let y = rng::uniform_tensor(&mut r, &[1, 2], -1.0, 1.0);
        let mut g = Graph::new();
        let b = m.bind(&mut g, false).unwrap();
        let yv = g.constant(y.clone());
        let wy = m.params().get("icfnn.l0.wy").unwrap().value().clone();
        // z₁ = g(W_y y) with zero bias
        let pre = g.matmul(yv, b.get("icfnn.l0.wy").unwrap()).unwrap();
        let z1 = g.relu(pre);
        for j in 0..3 {
            let want = (y.data()[0] * wy.at2(0, j) + y.data()[1] * wy.at2(1, j)).max(0.0);
            assert!((g.value(z1).data()[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn two_step_two_unit_matches_oracle() {
        let mut s = ModelSpec::new(Architecture::Icfnn, 1, 1, 2);
        s.model_dim = 2;
        s.num_layers = 2;
        let mut m = Model::init(s, 9).unwrap();
        let mut r = rng::seeded(10);
        for n in ["icfnn.l0.b", "icfnn.l1.b"] {
            *m.params_mut().get_mut(n).unwrap().value_mut() =
                rng::uniform_tensor(&mut r, &[2], -0.2, 0.2);
        }
        let x = rng::uniform_tensor(&mut r, &[2, 1], -1.0, 1.0);
        let p = |n: &str| m.params().get(n).unwrap().value().clone();
        let y = [x.data()[0], x.data()[1]];
        let lin = |w: &Tensor, v: &[f64], j: usize| -> f64 {
            (0..v.len()).map(|k| v[k] * w.at2(k, j)).sum()
        };
        let z1: [f64; 2] = core::array::from_fn(|j| {
            (lin(&p("icfnn.l0.wy"), &y, j) + p("icfnn.l0.b").data()[j]).max(0.0)
        });
        let z2: [f64; 2] = core::array::from_fn(|j| {
            (lin(&p("icfnn.l1.wz"), &z1, j) + lin(&p("icfnn.l1.wy"), &y, j)
                + p("icfnn.l1.b").data()[j])
                .max(0.0)
        });
        let want = lin(&p("out.wz"), &z2, 0) + lin(&p("out.wy"), &y, 0) + p("out.b").data()[0];
        assert!((m.predict(&x).unwrap()[0] - want).abs() < 1e-12);
    }
}
