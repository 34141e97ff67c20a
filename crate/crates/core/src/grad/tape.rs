use std::sync::Arc;

use super::{leaky_relu, log1mexp, sigmoid, softplus, Ctx, ParamTree, ScalarFunction, LEAKY_SLOPE};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Primitive operations. Arguments always precede the node that uses them.
#[derive(Clone, Copy, Debug)]
pub enum Op {
    Const,
    /// Leaf for flat parameter `node index`.
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Shift(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    LeakyRelu(Var),
    Softplus(Var),
    Log1mExp(Var),
    MinConst(Var, f64),
    Sum { start: u32, len: u32 },
    Linear { w_start: u32, bias: u32, start: u32, len: u32 },
    External { func: u32, start: u32, len: u32 },
}

/// Linear record of a scalar computation over a [`ParamTree`].
///
/// Nodes `0..n_params` are the parameter leaves, in flat order. Sampled noise
/// and discrete draws enter as constants, so replaying the tape at other
/// parameter values keeps them fixed.
pub struct Tape {
    n_params: usize,
    ops: Vec<Op>,
    values: Vec<f64>,
    args: Vec<Var>,
    partials: Vec<f64>,
    funcs: Vec<Arc<dyn ScalarFunction>>,
    output: Option<Var>,
    adjoints: Vec<f64>,
    scratch: Vec<f64>,
    fault: Option<(usize, f64)>,
}

impl Tape {
    pub fn new(params: &ParamTree) -> Self {
        let mut tape = Self {
            n_params: 0,
            ops: Vec::new(),
            values: Vec::new(),
            args: Vec::new(),
            partials: Vec::new(),
            funcs: Vec::new(),
            output: None,
            adjoints: Vec::new(),
            scratch: Vec::new(),
            fault: None,
        };
        tape.reset(params);
        tape
    }

    /// Clears all recorded nodes, keeping allocations.
    pub fn reset(&mut self, params: &ParamTree) {
        self.ops.clear();
        self.values.clear();
        self.args.clear();
        self.partials.clear();
        self.funcs.clear();
        self.output = None;
        self.fault = None;
        self.n_params = params.total_dim();
        self.ops.resize(self.n_params, Op::Param);
        self.values.extend_from_slice(params.as_slice());
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn set_output(&mut self, v: Var) {
        self.output = Some(v);
    }

    pub fn output(&self) -> Option<Var> {
        self.output
    }

    pub fn output_value(&self) -> Option<f64> {
        self.output.map(|v| self.values[v.index()])
    }

    /// Test fixture: scales the adjoint flowing out of `node` by `factor`
    /// during the reverse sweep, producing a deliberately wrong gradient.
    #[doc(hidden)]
    pub fn inject_adjoint_fault(&mut self, node: Var, factor: f64) {
        self.fault = Some((node.index(), factor));
    }

    fn push(&mut self, op: Op, value: f64) -> Var {
        let id = self.ops.len() as u32;
        self.ops.push(op);
        self.values.push(value);
        Var(id)
    }

    fn push_args(&mut self, xs: &[Var]) -> (u32, u32) {
        let start = self.args.len() as u32;
        self.args.extend_from_slice(xs);
        self.partials.resize(self.args.len(), 0.0);
        (start, xs.len() as u32)
    }

    fn func_index(&mut self, f: &Arc<dyn ScalarFunction>) -> u32 {
        if let Some(i) = self.funcs.iter().rposition(|g| Arc::ptr_eq(g, f)) {
            return i as u32;
        }
        self.funcs.push(Arc::clone(f));
        (self.funcs.len() - 1) as u32
    }

    fn eval_op(&mut self, id: usize) -> f64 {
        let v = |x: Var| self.values[x.index()];
        match self.ops[id] {
            Op::Const | Op::Param => self.values[id],
            Op::Add(a, b) => v(a) + v(b),
            Op::Sub(a, b) => v(a) - v(b),
            Op::Mul(a, b) => v(a) * v(b),
            Op::Neg(a) => -v(a),
            Op::Scale(a, c) => v(a) * c,
            Op::Shift(a, c) => v(a) + c,
            Op::Exp(a) => v(a).exp(),
            Op::Log(a) => v(a).ln(),
            Op::Tanh(a) => v(a).tanh(),
            Op::LeakyRelu(a) => leaky_relu(v(a)),
            Op::Softplus(a) => softplus(v(a)),
            Op::Log1mExp(a) => log1mexp(v(a)),
            Op::MinConst(a, c) => v(a).min(c),
            Op::Sum { start, len } => {
                let (s, n) = (start as usize, len as usize);
                self.args[s..s + n].iter().map(|x| self.values[x.index()]).sum()
            }
            Op::Linear { w_start, bias, start, len } => {
                let (s, n, w) = (start as usize, len as usize, w_start as usize);
                let mut acc = self.values[bias as usize];
                for i in 0..n {
                    acc += self.values[w + i] * self.values[self.args[s + i].index()];
                }
                acc
            }
            Op::External { func, start, len } => {
                let (s, n) = (start as usize, len as usize);
                self.scratch.clear();
                for i in 0..n {
                    let x = self.values[self.args[s + i].index()];
                    self.scratch.push(x);
                }
                self.funcs[func as usize].value_and_grad(&self.scratch, &mut self.partials[s..s + n])
            }
        }
    }

    fn record(&mut self, op: Op) -> Var {
        let id = self.ops.len();
        self.ops.push(op);
        self.values.push(0.0);
        let value = self.eval_op(id);
        self.values[id] = value;
        Var(id as u32)
    }

    /// Re-evaluates every node at new parameter values (same layout) and
    /// returns the output value.
    pub fn replay(&mut self, params: &ParamTree) -> Result<f64> {
        if params.total_dim() != self.n_params {
            return Err(Error::Shape(format!(
                "tape recorded over {} parameters, got {}",
                self.n_params,
                params.total_dim()
            )));
        }
        self.values[..self.n_params].copy_from_slice(params.as_slice());
        for id in self.n_params..self.ops.len() {
            let value = self.eval_op(id);
            self.values[id] = value;
        }
        self.output_value()
            .ok_or_else(|| Error::Shape("tape has no output".into()))
    }

    fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                node: Some(i),
                detail: format!("{:?} evaluated to {}", self.ops[i], self.values[i]),
            });
        }
        Ok(())
    }

    /// Adds `weight * d(output)/d(param)` into `grad` (flat layout).
    pub fn accumulate_gradient(&mut self, grad: &mut [f64], weight: f64) -> Result<()> {
        let out = self
            .output
            .ok_or_else(|| Error::Shape("tape has no output".into()))?;
        if grad.len() != self.n_params {
            return Err(Error::Shape(format!(
                "gradient buffer has {} slots, tape has {} parameters",
                grad.len(),
                self.n_params
            )));
        }
        self.check_finite()?;
        let mut adj = std::mem::take(&mut self.adjoints);
        adj.clear();
        adj.resize(self.ops.len(), 0.0);
        adj[out.index()] = 1.0;
        let val = &self.values;
        for id in (self.n_params..=out.index()).rev() {
            let mut g = adj[id];
            if let Some((node, factor)) = self.fault {
                if node == id {
                    g *= factor;
                }
            }
            if g == 0.0 {
                continue;
            }
            match self.ops[id] {
                Op::Const | Op::Param => {}
                Op::Add(a, b) => {
                    adj[a.index()] += g;
                    adj[b.index()] += g;
                }
                Op::Sub(a, b) => {
                    adj[a.index()] += g;
                    adj[b.index()] -= g;
                }
                Op::Mul(a, b) => {
                    adj[a.index()] += g * val[b.index()];
                    adj[b.index()] += g * val[a.index()];
                }
                Op::Neg(a) => adj[a.index()] -= g,
                Op::Scale(a, c) => adj[a.index()] += g * c,
                Op::Shift(a, _) => adj[a.index()] += g,
                Op::Exp(a) => adj[a.index()] += g * val[id],
                Op::Log(a) => adj[a.index()] += g / val[a.index()],
                Op::Tanh(a) => adj[a.index()] += g * (1.0 - val[id] * val[id]),
                Op::LeakyRelu(a) => {
                    let d = if val[a.index()] > 0.0 { 1.0 } else { LEAKY_SLOPE };
                    adj[a.index()] += g * d;
                }
                Op::Softplus(a) => adj[a.index()] += g * sigmoid(val[a.index()]),
                Op::Log1mExp(a) => adj[a.index()] -= g / (-val[a.index()]).exp_m1(),
                Op::MinConst(a, c) => {
                    if val[a.index()] <= c {
                        adj[a.index()] += g;
                    }
                }
                Op::Sum { start, len } => {
                    for x in &self.args[start as usize..(start + len) as usize] {
                        adj[x.index()] += g;
                    }
                }
                Op::Linear { w_start, bias, start, len } => {
                    let (s, n, w) = (start as usize, len as usize, w_start as usize);
                    adj[bias as usize] += g;
                    for i in 0..n {
                        let x = self.args[s + i].index();
                        adj[w + i] += g * val[x];
                        adj[x] += g * val[w + i];
                    }
                }
                Op::External { start, len, .. } => {
                    let (s, n) = (start as usize, len as usize);
                    for i in 0..n {
                        adj[self.args[s + i].index()] += g * self.partials[s + i];
                    }
                }
            }
        }
        if let Some(i) = adj[..self.n_params].iter().position(|v| !v.is_finite()) {
            self.adjoints = adj;
            return Err(Error::Numerical {
                node: Some(i),
                detail: "non-finite adjoint".into(),
            });
        }
        for (g, a) in grad.iter_mut().zip(&adj[..self.n_params]) {
            *g += weight * a;
        }
        self.adjoints = adj;
        Ok(())
    }

    /// Gradient of the output with respect to every parameter.
    pub fn gradient(&mut self, params: &ParamTree) -> Result<ParamTree> {
        let mut flat = vec![0.0; self.n_params];
        self.accumulate_gradient(&mut flat, 1.0)?;
        params.unflatten(&flat)
    }
}

/// Gradient tree of `tape`'s output with the layout of `params`.
pub fn backward(tape: &mut Tape, params: &ParamTree) -> Result<ParamTree> {
    if params.total_dim() != tape.n_params() {
        return Err(Error::Shape("parameter tree does not match tape".into()));
    }
    tape.gradient(params)
}

impl Ctx for Tape {
    type V = Var;

    fn constant(&mut self, x: f64) -> Var {
        self.push(Op::Const, x)
    }
    fn param(&mut self, _params: &ParamTree, index: usize) -> Var {
        debug_assert!(index < self.n_params);
        Var(index as u32)
    }
    fn value(&self, v: Var) -> f64 {
        self.values[v.index()]
    }
    fn add(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::Add(a, b))
    }
    fn sub(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::Sub(a, b))
    }
    fn mul(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::Mul(a, b))
    }
    fn neg(&mut self, a: Var) -> Var {
        self.record(Op::Neg(a))
    }
    fn scale(&mut self, a: Var, c: f64) -> Var {
        self.record(Op::Scale(a, c))
    }
    fn shift(&mut self, a: Var, c: f64) -> Var {
        self.record(Op::Shift(a, c))
    }
    fn exp(&mut self, a: Var) -> Var {
        self.record(Op::Exp(a))
    }
    fn log(&mut self, a: Var) -> Var {
        self.record(Op::Log(a))
    }
    fn tanh(&mut self, a: Var) -> Var {
        self.record(Op::Tanh(a))
    }
    fn leaky_relu(&mut self, a: Var) -> Var {
        self.record(Op::LeakyRelu(a))
    }
    fn softplus(&mut self, a: Var) -> Var {
        self.record(Op::Softplus(a))
    }
    fn log1mexp(&mut self, a: Var) -> Var {
        self.record(Op::Log1mExp(a))
    }
    fn min_const(&mut self, a: Var, c: f64) -> Var {
        self.record(Op::MinConst(a, c))
    }
    fn sum(&mut self, xs: &[Var]) -> Var {
        let (start, len) = self.push_args(xs);
        self.record(Op::Sum { start, len })
    }
    fn linear(&mut self, _params: &ParamTree, w_start: usize, bias: usize, x: &[Var]) -> Var {
        debug_assert!(w_start + x.len() <= self.n_params && bias < self.n_params);
        let (start, len) = self.push_args(x);
        self.record(Op::Linear {
            w_start: w_start as u32,
            bias: bias as u32,
            start,
            len,
        })
    }
    fn external(&mut self, f: &Arc<dyn ScalarFunction>, args: &[Var]) -> Var {
        let func = self.func_index(f);
        let (start, len) = self.push_args(args);
        self.record(Op::External { func, start, len })
    }
}
