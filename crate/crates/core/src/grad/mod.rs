//! Reverse-mode gradients for the scalar expressions built by the flow,
//! density and estimator code.
//!
//! Model code is written once against [`Ctx`]. Running it with [`Eval`]
//! computes plain `f64` values; running it with a [`Tape`] records every
//! primitive so that [`Tape::backward`] can return gradients with respect to
//! the entries of a [`ParamTree`].

mod check;
mod params;
mod tape;

use std::sync::Arc;

pub use check::{check_grad, grad_check, relative_error, GradCheck};
pub use params::{ParamEntry, ParamTree};
pub use tape::{backward, Op, Tape, Var};

/// Slope of the leaky-relu activation on the negative half-line.
pub const LEAKY_SLOPE: f64 = 0.01;

/// A black-box scalar function with an analytic gradient.
///
/// Used to splice target log-densities into a tape as a single node.
pub trait ScalarFunction: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;

    /// Writes the gradient into `grad` and returns the value.
    fn value_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

/// Arithmetic context: either direct evaluation or tape recording.
pub trait Ctx {
    type V: Copy;

    fn constant(&mut self, x: f64) -> Self::V;
    /// Flat parameter `index` of `params`.
    fn param(&mut self, params: &ParamTree, index: usize) -> Self::V;
    fn value(&self, v: Self::V) -> f64;

    fn add(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn sub(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn mul(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn neg(&mut self, a: Self::V) -> Self::V;
    fn scale(&mut self, a: Self::V, c: f64) -> Self::V;
    fn shift(&mut self, a: Self::V, c: f64) -> Self::V;
    fn exp(&mut self, a: Self::V) -> Self::V;
    fn log(&mut self, a: Self::V) -> Self::V;
    fn tanh(&mut self, a: Self::V) -> Self::V;
    fn leaky_relu(&mut self, a: Self::V) -> Self::V;
    /// `log(1 + e^a)`.
    fn softplus(&mut self, a: Self::V) -> Self::V;
    /// `log(1 - e^a)` for `a <= 0`.
    fn log1mexp(&mut self, a: Self::V) -> Self::V;
    /// `min(a, c)`; at `a == c` the derivative is 1.
    fn min_const(&mut self, a: Self::V, c: f64) -> Self::V;
    fn sum(&mut self, xs: &[Self::V]) -> Self::V;
    /// One row of a matrix-vector product with parameter weights:
    /// `params[bias] + sum_i params[w_start + i] * x[i]`.
    fn linear(&mut self, params: &ParamTree, w_start: usize, bias: usize, x: &[Self::V]) -> Self::V;
    fn external(&mut self, f: &Arc<dyn ScalarFunction>, args: &[Self::V]) -> Self::V;
}

/// Plain `f64` evaluation.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eval;

impl Ctx for Eval {
    type V = f64;

    fn constant(&mut self, x: f64) -> f64 {
        x
    }
    fn param(&mut self, params: &ParamTree, index: usize) -> f64 {
        params.as_slice()[index]
    }
    fn value(&self, v: f64) -> f64 {
        v
    }
    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        a - b
    }
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }
    fn neg(&mut self, a: f64) -> f64 {
        -a
    }
    fn scale(&mut self, a: f64, c: f64) -> f64 {
        a * c
    }
    fn shift(&mut self, a: f64, c: f64) -> f64 {
        a + c
    }
    fn exp(&mut self, a: f64) -> f64 {
        a.exp()
    }
    fn log(&mut self, a: f64) -> f64 {
        a.ln()
    }
    fn tanh(&mut self, a: f64) -> f64 {
        a.tanh()
    }
    fn leaky_relu(&mut self, a: f64) -> f64 {
        leaky_relu(a)
    }
    fn softplus(&mut self, a: f64) -> f64 {
        softplus(a)
    }
    fn log1mexp(&mut self, a: f64) -> f64 {
        log1mexp(a)
    }
    fn min_const(&mut self, a: f64, c: f64) -> f64 {
        a.min(c)
    }
    fn sum(&mut self, xs: &[f64]) -> f64 {
        xs.iter().sum()
    }
    fn linear(&mut self, params: &ParamTree, w_start: usize, bias: usize, x: &[f64]) -> f64 {
        let p = params.as_slice();
        let w = &p[w_start..w_start + x.len()];
        p[bias] + w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
    }
    fn external(&mut self, f: &Arc<dyn ScalarFunction>, args: &[f64]) -> f64 {
        f.value(args)
    }
}

pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log1mexp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// Numerically stable `log(sum(exp(xs)))`; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
