//! Central finite-difference oracle for the autodiff engine.

use alloc::format;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Builds a scalar-valued graph on top of an input leaf.
pub type ScalarFn<'a> = dyn Fn(&mut Graph, Var) -> Result<Var> + 'a;

fn eval(f: &ScalarFn<'_>, x: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&mut g, v)?;
    let y = g.value(out);
    if y.len() != 1 {
        return Err(Error::Contract(format!(
            "finite-difference check needs a scalar function, got shape {:?}",
            y.shape()
        )));
    }
    let y = y.data()[0];
    if !y.is_finite() {
        return Err(Error::Numeric(format!("function value {y} is not finite")));
    }
    Ok(y)
}

/// Analytic gradient of `f` at `x`.
pub fn analytic_gradient(f: &ScalarFn<'_>, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let out = f(&mut g, v)?;
    let grads = g.backward(out)?;
    Ok(grads
        .wrt(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// Central-difference gradient `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`.
pub fn central_gradient(f: &ScalarFn<'_>, x: &Tensor, h: f64) -> Result<Tensor> {
    let mut out = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let x0 = x.data()[i];
        probe.data_mut()[i] = x0 + h;
        let up = eval(f, &probe)?;
        probe.data_mut()[i] = x0 - h;
        let down = eval(f, &probe)?;
        probe.data_mut()[i] = x0;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// `maxᵢ |analyticᵢ − centralᵢ| / (|centralᵢ| + 1e-8)`.
pub fn finite_diff_check(f: &ScalarFn<'_>, x: &Tensor, h: f64) -> Result<f64> {
    let a = analytic_gradient(f, x)?;
    let c = central_gradient(f, x, h)?;
    Ok(relative_error(&a, &c))
}

pub fn relative_error(analytic: &Tensor, central: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(central.data())
        .map(|(a, c)| libm::fabs(a - c) / (libm::fabs(*c) + 1e-8))
        .fold(0.0, f64::max)
}
