//! Dense tensors, reverse-mode differentiation and small complex algebra.

pub mod complex;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use complex::{hermitian_solve, ComplexMatrix};
pub use graph::{CustomOp, Graph, Var};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;

use crate::error::Result;
use crate::scalar::Real;

/// Central finite-difference check of `f` at `x`: returns the largest
/// relative error between the analytic and numeric gradients, measured
/// against `max(|analytic|, |numeric|, floor)`.
pub fn gradient_check<R: Real>(x: &Tensor<R>, step: R, floor: R, f: impl Fn(&mut Graph<R>, Var) -> Result<Var>) -> Result<R> {
    let mut g = Graph::new();
    let xv = g.input(&x.clone().with_requires_grad(true));
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g.grad(xv).map(<[R]>::to_vec).unwrap_or_else(|| vec![R::zero(); x.len()]);
    let eval = |t: Tensor<R>| -> Result<R> {
        let mut g = Graph::new();
        let v = g.input(&t);
        let l = f(&mut g, v)?;
        Ok(g.item(l))
    };
    let mut worst = R::zero();
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (step + step);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
