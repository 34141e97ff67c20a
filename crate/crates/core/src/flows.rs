//! Invertible proposal maps: affine coupling blocks (RNVP, and LN-NVP when
//! the nets also see innovation noise), elementwise affine maps, and the
//! K-step stacks built from them.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Ctx, ParamTree};

/// Two-layer perceptron stored as offsets into a [`ParamTree`].
///
/// `w1` is `hidden x in_dim` and `w2` is `out_dim x hidden`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

impl Mlp {
    fn register<R: Rng + ?Sized>(
        params: &mut ParamTree,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w1_init = (0..hidden * in_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let w1 = params.insert(&format!("{prefix}.w1"), &[hidden, in_dim], w1_init)?;
        let b1 = params.insert(&format!("{prefix}.b1"), &[hidden], vec![0.0; hidden])?;
        // zero output layer: the block starts as the identity
        let w2 = params.insert(&format!("{prefix}.w2"), &[out_dim, hidden], vec![0.0; out_dim * hidden])?;
        let b2 = params.insert(&format!("{prefix}.b2"), &[out_dim], vec![0.0; out_dim])?;
        Ok(Self {
            in_dim,
            hidden,
            out_dim,
            w1,
            b1,
            w2,
            b2,
        })
    }

    fn eval<C: Ctx>(&self, ctx: &mut C, params: &ParamTree, x: &[C::V], tanh_out: bool) -> Vec<C::V> {
        let h: Vec<C::V> = (0..self.hidden)
            .map(|j| {
                let pre = ctx.linear(params, self.w1 + j * self.in_dim, self.b1 + j, x);
                ctx.leaky_relu(pre)
            })
            .collect();
        (0..self.out_dim)
            .map(|i| {
                let o = ctx.linear(params, self.w2 + i * self.hidden, self.b2 + i, &h);
                if tanh_out {
                    ctx.tanh(o)
                } else {
                    o
                }
            })
            .collect()
    }
}

/// Affine coupling block: coordinates in the mask pass through and
/// condition the scale `s` (tanh head) and shift `t` (linear head) applied
/// to the rest. With `noise_dim > 0` the nets also read the innovation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnvpBlock {
    pub dim: usize,
    pub mask: Vec<bool>,
    pub noise_dim: usize,
    pub s_net: Mlp,
    pub t_net: Mlp,
    fixed: Vec<usize>,
    free: Vec<usize>,
}

impl RnvpBlock {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamTree,
        prefix: &str,
        mask: Vec<bool>,
        hidden: usize,
        noise_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fixed: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let free: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
        if fixed.is_empty() || free.is_empty() {
            return Err(Error::Shape(format!("mask {mask:?} must be nonempty and proper")));
        }
        if hidden == 0 {
            return Err(Error::Shape("hidden width must be positive".into()));
        }
        let in_dim = fixed.len() + noise_dim;
        let s_net = Mlp::register(params, &format!("{prefix}.s"), in_dim, hidden, free.len(), rng)?;
        let t_net = Mlp::register(params, &format!("{prefix}.t"), in_dim, hidden, free.len(), rng)?;
        Ok(Self {
            dim: mask.len(),
            mask,
            noise_dim,
            s_net,
            t_net,
            fixed,
            free,
        })
    }

    fn nets<C: Ctx>(&self, ctx: &mut C, params: &ParamTree, z: &[C::V], u: &[f64]) -> (Vec<C::V>, Vec<C::V>) {
        let mut x: Vec<C::V> = self.fixed.iter().map(|&i| z[i]).collect();
        x.extend(u.iter().map(|&n| ctx.constant(n)));
        let s = self.s_net.eval(ctx, params, &x, true);
        let t = self.t_net.eval(ctx, params, &x, false);
        (s, t)
    }

    fn check(&self, z_len: usize, u_len: usize) -> Result<()> {
        if z_len != self.dim {
            return Err(Error::Shape(format!("block expects dimension {}, got {z_len}", self.dim)));
        }
        if u_len != self.noise_dim {
            return Err(Error::Shape(format!("block expects noise of length {}, got {u_len}", self.noise_dim)));
        }
        Ok(())
    }

    pub fn forward<C: Ctx>(&self, ctx: &mut C, params: &ParamTree, z: &[C::V], u: &[f64]) -> Result<(Vec<C::V>, C::V)> {
        self.check(z.len(), u.len())?;
        let (s, t) = self.nets(ctx, params, z, u);
        let mut out = z.to_vec();
        for (j, &i) in self.free.iter().enumerate() {
            let e = ctx.exp(s[j]);
            let scaled = ctx.mul(z[i], e);
            out[i] = ctx.add(scaled, t[j]);
        }
        let log_jac = ctx.sum(&s);
        Ok((out, log_jac))
    }

    pub fn inverse<C: Ctx>(&self, ctx: &mut C, params: &ParamTree, z: &[C::V], u: &[f64]) -> Result<(Vec<C::V>, C::V)> {
        self.check(z.len(), u.len())?;
        let (s, t) = self.nets(ctx, params, z, u);
        let mut out = z.to_vec();
        for (j, &i) in self.free.iter().enumerate() {
            let centered = ctx.sub(z[i], t[j]);
            let ns = ctx.neg(s[j]);
            let e = ctx.exp(ns);
            out[i] = ctx.mul(centered, e);
        }
        let total = ctx.sum(&s);
        Ok((out, ctx.neg(total)))
    }
}

/// Elementwise `z ⊙ exp(s) + t` with free parameters `s`, `t`.
///
/// Used where a coupling mask cannot exist (one dimension) and for small
/// hand-checkable flows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineBlock {
    pub dim: usize,
    pub s: usize,
    pub t: usize,
}

impl AffineBlock {
    pub fn new(params: &mut ParamTree, prefix: &str, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("affine block needs dim >= 1".into()));
        }
        let s = params.insert(&format!("{prefix}.s"), &[dim], vec![0.0; dim])?;
        let t = params.insert(&format!("{prefix}.t"), &[dim], vec![0.0; dim])?;
        Ok(Self { dim, s, t })
    }

    fn check(&self, z_len: usize) -> Result<()> {
        if z_len != self.dim {
            return Err(Error::Shape(format!("block expects dimension {}, got {z_len}", self.dim)));
        }
        Ok(())
    }

    pub fn forward<C: Ctx>(&self, ctx: &mut C, params: &ParamTree, z: &[C::V]) -> Result<(Vec<C::V>, C::V)> {
        self.check(z.len())?;
        let mut out = Vec::with_capacity(self.dim);
        let mut s_all = Vec::with_capacity(self.dim);
        for (i, &zi) in z.iter().enumerate() {
            let s = ctx.param(params, self.s + i);
            let t = ctx.param(params, self.t + i);
            let e = ctx.exp(s);
            let scaled = ctx.mul(zi, e);
            out.push(ctx.add(scaled, t));
            s_all.push(s);
        }
        let log_jac = ctx.sum(&s_all);
        Ok((out, log_jac))
    }

    pub fn inverse<C: Ctx>(&self, ctx: &mut C, params: &ParamTree, z: &[C::V]) -> Result<(Vec<C::V>, C::V)> {
        self.check(z.len())?;
        let mut out = Vec::with_capacity(self.dim);
        let mut s_all = Vec::with_capacity(self.dim);
        for (i, &zi) in z.iter().enumerate() {
            let s = ctx.param(params, self.s + i);
            let t = ctx.param(params, self.t + i);
            let centered = ctx.sub(zi, t);
            let ns = ctx.neg(s);
            let e = ctx.exp(ns);
            out.push(ctx.mul(centered, e));
            s_all.push(s);
        }
        let total = ctx.sum(&s_all);
        Ok((out, ctx.neg(total)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    Rnvp(RnvpBlock),
    Affine(AffineBlock),
}

impl Transform {
    pub fn dim(&self) -> usize {
        match self {
            Transform::Rnvp(b) => b.dim,
            Transform::Affine(b) => b.dim,
        }
    }

    pub fn forward<C: Ctx>(&self, ctx: &mut C, params: &ParamTree, z: &[C::V], u: &[f64]) -> Result<(Vec<C::V>, C::V)> {
        match self {
            Transform::Rnvp(b) => b.forward(ctx, params, z, u),
            Transform::Affine(b) => b.forward(ctx, params, z),
        }
    }

    pub fn inverse<C: Ctx>(&self, ctx: &mut C, params: &ParamTree, z: &[C::V], u: &[f64]) -> Result<(Vec<C::V>, C::V)> {
        match self {
            Transform::Rnvp(b) => b.inverse(ctx, params, z, u),
            Transform::Affine(b) => b.inverse(ctx, params, z),
        }
    }
}

/// One kernel's proposal map: a composition of blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowStep {
    pub blocks: Vec<Transform>,
}

impl FlowStep {
    /// `T^v(z)` for `v = +1` (forward) or `v = -1` (inverse), with its
    /// log-Jacobian.
    pub fn apply<C: Ctx>(
        &self,
        ctx: &mut C,
        params: &ParamTree,
        z: &[C::V],
        v: i8,
        u: &[f64],
    ) -> Result<(Vec<C::V>, C::V)> {
        let mut cur = z.to_vec();
        let mut parts = Vec::with_capacity(self.blocks.len());
        if v >= 0 {
            for b in &self.blocks {
                let (next, lj) = b.forward(ctx, params, &cur, u)?;
                cur = next;
                parts.push(lj);
            }
        } else {
            for b in self.blocks.iter().rev() {
                let (next, lj) = b.inverse(ctx, params, &cur, u)?;
                cur = next;
                parts.push(lj);
            }
        }
        let log_jac = if parts.len() == 1 { parts[0] } else { ctx.sum(&parts) };
        Ok((cur, log_jac))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Rnvp,
    Affine,
}

/// Shape of a flow stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub dim: usize,
    pub steps: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub kind: BlockKind,
    /// One parameter set reused by every step.
    pub shared: bool,
    /// Nets read a `dim`-sized innovation per step.
    pub noisy: bool,
}

impl FlowSpec {
    /// Default width: 4 hidden units in two dimensions, `2D` otherwise.
    pub fn default_hidden(dim: usize) -> usize {
        if dim == 2 {
            4
        } else {
            2 * dim
        }
    }
}

/// K proposal maps, either with per-step parameters or one shared set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowStack {
    pub dim: usize,
    pub noise_dim: usize,
    pub shared: bool,
    pub steps: Vec<FlowStep>,
}

fn half_mask(dim: usize, parity: usize) -> Vec<bool> {
    let half = dim / 2;
    (0..dim).map(|i| (i < half) == (parity % 2 == 0)).collect()
}

impl FlowStack {
    pub fn build<R: Rng + ?Sized>(params: &mut ParamTree, spec: &FlowSpec, rng: &mut R) -> Result<Self> {
        if spec.dim == 0 {
            return Err(Error::Shape("flow dimension must be positive".into()));
        }
        if spec.steps == 0 || spec.blocks == 0 {
            return Err(Error::Config("a flow stack needs K >= 1 and B >= 1".into()));
        }
        if spec.kind == BlockKind::Rnvp && spec.dim < 2 {
            return Err(Error::Config("coupling blocks need dim >= 2; use affine blocks".into()));
        }
        let noise_dim = if spec.noisy && spec.kind == BlockKind::Rnvp { spec.dim } else { 0 };
        let make_step = |params: &mut ParamTree, tag: &str, rng: &mut R| -> Result<FlowStep> {
            let blocks = (0..spec.blocks)
                .map(|b| {
                    let prefix = format!("flow.{tag}.{b}");
                    match spec.kind {
                        BlockKind::Rnvp => RnvpBlock::new(params, &prefix, half_mask(spec.dim, b), spec.hidden, noise_dim, rng)
                            .map(Transform::Rnvp),
                        BlockKind::Affine => AffineBlock::new(params, &prefix, spec.dim).map(Transform::Affine),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(FlowStep { blocks })
        };
        let steps = if spec.shared {
            let step = make_step(params, "shared", rng)?;
            vec![step; spec.steps]
        } else {
            (0..spec.steps)
                .map(|k| make_step(params, &k.to_string(), rng))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self {
            dim: spec.dim,
            noise_dim,
            shared: spec.shared,
            steps,
        })
    }

    /// Stack with no steps: the variational law is the prior itself.
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            noise_dim: 0,
            shared: false,
            steps: Vec::new(),
        }
    }

    pub fn from_steps(dim: usize, noise_dim: usize, shared: bool, steps: Vec<FlowStep>) -> Self {
        Self {
            dim,
            noise_dim,
            shared,
            steps,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Step `k` (0-based) of the stack.
    pub fn step(&self, k: usize) -> &FlowStep {
        &self.steps[k]
    }
}

/// Result of pushing a point through a signed, accepted sequence of steps.
#[derive(Clone, Debug)]
pub struct StackOutput<V> {
    pub z: Vec<V>,
    pub log_jac: V,
    pub states: Vec<Vec<V>>,
}

/// `z_k = T_k^{v_k a_k}(z_{k-1})`: rejected steps are the identity.
pub fn stack_apply<C: Ctx>(
    ctx: &mut C,
    params: &ParamTree,
    stack: &FlowStack,
    z0: &[C::V],
    a: &[bool],
    v: &[i8],
    u: &[Vec<f64>],
) -> Result<StackOutput<C::V>> {
    let k = stack.len();
    if a.len() != k || v.len() != k || u.len() != k {
        return Err(Error::Shape(format!(
            "stack has {k} steps; got {} accept bits, {} directions, {} innovations",
            a.len(),
            v.len(),
            u.len()
        )));
    }
    if z0.len() != stack.dim {
        return Err(Error::Shape(format!("stack expects dimension {}, got {}", stack.dim, z0.len())));
    }
    let mut states = vec![z0.to_vec()];
    let mut log_jac = ctx.constant(0.0);
    let mut cur = z0.to_vec();
    for i in 0..k {
        if a[i] {
            let (next, lj) = stack.steps[i].apply(ctx, params, &cur, v[i], &u[i])?;
            log_jac = ctx.add(log_jac, lj);
            cur = next;
        }
        states.push(cur.clone());
    }
    Ok(StackOutput { z: cur, log_jac, states })
}

/// Overwrites every parameter whose name starts with `prefix` with
/// `N(0, scale²)` draws. Gives non-trivial flows for tests and diagnostics.
pub fn randomize_params<R: Rng + ?Sized>(params: &mut ParamTree, prefix: &str, scale: f64, rng: &mut R) {
    let names: Vec<String> = params
        .entries()
        .iter()
        .filter(|e| e.name.starts_with(prefix))
        .map(|e| e.name.clone())
        .collect();
    for name in names {
        if let Some(slot) = params.get_mut(&name) {
            for x in slot.iter_mut() {
                *x = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

/// Standard-normal innovations, one `noise_dim` vector per step.
pub fn draw_innovations<R: Rng + ?Sized>(stack: &FlowStack, rng: &mut R) -> Vec<Vec<f64>> {
    (0..stack.len())
        .map(|_| (0..stack.noise_dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{check_grad, Eval, Tape};
    use crate::rng;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn single_block(dim: usize, noise: bool, seed: u64) -> (ParamTree, RnvpBlock, Vec<f64>) {
        let mut r = rng::stream(seed, 0, 0);
        let mut params = ParamTree::new();
        let mask = (0..dim).map(|i| i % 2 == (seed as usize % 2)).collect::<Vec<_>>();
        let mask = if mask.iter().all(|&m| m) || mask.iter().all(|&m| !m) {
            half_mask(dim, 0)
        } else {
            mask
        };
        let noise_dim = if noise { dim } else { 0 };
        let block = RnvpBlock::new(&mut params, "b", mask, 3, noise_dim, &mut r).unwrap();
        randomize_params(&mut params, "b", 0.7, &mut r);
        let u = (0..noise_dim).map(|_| r.sample(StandardNormal)).collect();
        (params, block, u)
    }

    fn constant_block() -> (ParamTree, RnvpBlock) {
        // s ≡ ln 2 and t ≡ 0.5 via zero hidden weights and output biases
        let mut r = rng::stream(0, 0, 0);
        let mut params = ParamTree::new();
        let block = RnvpBlock::new(&mut params, "c", vec![true, false], 2, 0, &mut r).unwrap();
        params.get_mut("c.s.w1").unwrap().fill(0.0);
        params.get_mut("c.t.w1").unwrap().fill(0.0);
        params.get_mut("c.s.b2").unwrap()[0] = 2f64.ln().atanh();
        params.get_mut("c.t.b2").unwrap()[0] = 0.5;
        (params, block)
    }

    #[test]
    fn identity_at_init() {
        let mut r = rng::stream(1, 0, 0);
        let mut params = ParamTree::new();
        let block = RnvpBlock::new(&mut params, "b", vec![true, false, false], 4, 0, &mut r).unwrap();
        let z = [0.3, -1.0, 2.5];
        let (out, lj) = block.forward(&mut Eval, &params, &z, &[]).unwrap();
        assert_eq!(out, z.to_vec());
        assert_eq!(lj, 0.0);
        let (back, lj) = block.inverse(&mut Eval, &params, &z, &[]).unwrap();
        assert_eq!(back, z.to_vec());
        assert_eq!(lj, 0.0);
    }

    #[test]
    fn constant_net_example() {
        let (params, block) = constant_block();
        let (out, lj) = block.forward(&mut Eval, &params, &[1.0, 1.0], &[]).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-15 && (out[1] - 2.5).abs() < 1e-12);
        assert!((lj - 2f64.ln()).abs() < 1e-12);
        let (back, lj) = block.inverse(&mut Eval, &params, &[1.0, 2.5], &[]).unwrap();
        assert!((back[1] - 1.0).abs() < 1e-12);
        assert!((lj + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let (params, block) = constant_block();
        assert!(matches!(block.forward(&mut Eval, &params, &[1.0], &[]), Err(Error::Shape(_))));
        assert!(matches!(block.forward(&mut Eval, &params, &[1.0, 1.0], &[0.1]), Err(Error::Shape(_))));
        let mut p = ParamTree::new();
        let mut r = rng::stream(0, 0, 0);
        assert!(RnvpBlock::new(&mut p, "x", vec![true, true], 2, 0, &mut r).is_err());
        assert!(RnvpBlock::new(&mut p, "y", vec![false, false], 2, 0, &mut r).is_err());
    }

    fn log_abs_det_fd(f: &dyn Fn(&[f64]) -> Vec<f64>, z: &[f64]) -> f64 {
        let d = z.len();
        let h = 1e-6;
        let mut jac = nalgebra::DMatrix::zeros(d, d);
        for j in 0..d {
            let mut zp = z.to_vec();
            let mut zm = z.to_vec();
            zp[j] += h;
            zm[j] -= h;
            let (fp, fm) = (f(&zp), f(&zm));
            for i in 0..d {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        jac.determinant().abs().ln()
    }

    #[test]
    fn log_jacobian_matches_finite_differences() {
        for seed in 0..50u64 {
            let dim = 2 + (seed as usize % 5);
            let (params, block, u) = single_block(dim, seed % 3 == 0, seed);
            let mut r = rng::stream(seed, 1, 0);
            let z: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
            let (_, lj) = block.forward(&mut Eval, &params, &z, &u).unwrap();
            let f = |x: &[f64]| block.forward(&mut Eval, &params, x, &u).unwrap().0;
            let fd = log_abs_det_fd(&f, &z);
            let rel = (lj.exp() - fd.exp()).abs() / fd.exp();
            assert!(rel <= 1e-5, "seed {seed}: {lj} vs {fd}");
        }
    }

    #[test]
    fn log_jacobian_tape_gradient() {
        let (params, block, u) = single_block(4, true, 7);
        let mut tape = Tape::new(&params);
        let z: Vec<_> = [0.2, -0.4, 1.1, 0.6].iter().map(|&c| tape.constant(c)).collect();
        let (_, lj) = block.forward(&mut tape, &params, &z, &u).unwrap();
        tape.set_output(lj);
        assert!(check_grad(&mut tape, &params, 1e-5).unwrap() <= 1e-5);
    }

    #[test]
    fn complementary_masks_move_every_coordinate() {
        let mut r = rng::stream(5, 0, 0);
        let mut params = ParamTree::new();
        let spec = FlowSpec {
            dim: 5,
            steps: 1,
            blocks: 2,
            hidden: 4,
            kind: BlockKind::Rnvp,
            shared: false,
            noisy: false,
        };
        let stack = FlowStack::build(&mut params, &spec, &mut r).unwrap();
        randomize_params(&mut params, "flow", 0.5, &mut r);
        let z = [0.1, 0.2, 0.3, 0.4, 0.5];
        let (out, _) = stack.step(0).apply(&mut Eval, &params, &z, 1, &[]).unwrap();
        assert!(out.iter().zip(&z).all(|(a, b)| a != b));
    }

    #[test]
    fn stack_sharing_and_errors() {
        let mut r = rng::stream(2, 0, 0);
        let mut params = ParamTree::new();
        let mut spec = FlowSpec {
            dim: 2,
            steps: 3,
            blocks: 2,
            hidden: 4,
            kind: BlockKind::Rnvp,
            shared: true,
            noisy: true,
        };
        let shared = FlowStack::build(&mut params, &spec, &mut r).unwrap();
        assert_eq!(shared.noise_dim, 2);
        assert_eq!(shared.step(0), shared.step(2));
        let n_shared = params.total_dim();
        spec.shared = false;
        spec.noisy = false;
        let mut p2 = ParamTree::new();
        FlowStack::build(&mut p2, &spec, &mut r).unwrap();
        assert_eq!(p2.total_dim(), 3 * (n_shared - 2 * 2 * 2 * 4));
        spec.steps = 0;
        assert!(FlowStack::build(&mut ParamTree::new(), &spec, &mut r).is_err());
        spec.steps = 1;
        spec.dim = 1;
        assert!(FlowStack::build(&mut ParamTree::new(), &spec, &mut r).is_err());
    }

    fn random_stack(seed: u64, dim: usize, k: usize, noisy: bool) -> (ParamTree, FlowStack, Vec<Vec<f64>>) {
        let mut r = rng::stream(seed, 0, 0);
        let mut params = ParamTree::new();
        let spec = FlowSpec {
            dim,
            steps: k,
            blocks: 2,
            hidden: 3,
            kind: BlockKind::Rnvp,
            shared: noisy,
            noisy,
        };
        let stack = FlowStack::build(&mut params, &spec, &mut r).unwrap();
        randomize_params(&mut params, "flow", 0.6, &mut r);
        let u = draw_innovations(&stack, &mut r);
        (params, stack, u)
    }

    #[test]
    fn stack_apply_examples() {
        let (params, stack, u) = random_stack(3, 2, 3, true);
        let z0 = [0.4, -0.9];
        let out = stack_apply(&mut Eval, &params, &stack, &z0, &[false; 3], &[1, -1, 1], &u).unwrap();
        assert_eq!(out.z, z0.to_vec());
        assert_eq!(out.log_jac, 0.0);
        assert_eq!(out.states.len(), 4);

        let (params, stack, u) = random_stack(4, 2, 1, false);
        let out = stack_apply(&mut Eval, &params, &stack, &z0, &[true], &[-1], &u).unwrap();
        let (inv, lj) = stack.step(0).apply(&mut Eval, &params, &z0, -1, &u[0]).unwrap();
        assert_eq!(out.z, inv);
        assert_eq!(out.log_jac, lj);
        assert!(stack_apply(&mut Eval, &params, &stack, &z0, &[true, true], &[1, 1], &u).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn block_roundtrip(seed in 0u64..10_000, dim in 2usize..7, noise: bool,
                           z in proptest::collection::vec(-3.0f64..3.0, 6)) {
            let (params, block, u) = single_block(dim, noise, seed);
            let z = &z[..dim];
            let (y, lf) = block.forward(&mut Eval, &params, z, &u).unwrap();
            let (back, li) = block.inverse(&mut Eval, &params, &y, &u).unwrap();
            let err = back.iter().zip(z).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            prop_assert!(err <= 1e-9);
            prop_assert!((lf + li).abs() <= 1e-9);
        }

        #[test]
        fn stack_reverse_recovers_start(seed in 0u64..10_000, k in 1usize..5, noisy: bool,
                                        bits in proptest::collection::vec(any::<(bool, bool)>(), 4),
                                        z in proptest::collection::vec(-2.0f64..2.0, 3)) {
            let (params, stack, u) = random_stack(seed, 3, k, noisy);
            let a: Vec<bool> = bits[..k].iter().map(|b| b.0).collect();
            let v: Vec<i8> = bits[..k].iter().map(|b| if b.1 { 1 } else { -1 }).collect();
            let out = stack_apply(&mut Eval, &params, &stack, &z, &a, &v, &u).unwrap();
            // reverse order, flipped directions
            let rev = FlowStack::from_steps(3, stack.noise_dim, stack.shared, stack.steps.iter().rev().cloned().collect());
            let ra: Vec<bool> = a.iter().rev().copied().collect();
            let rv: Vec<i8> = v.iter().rev().map(|x| -x).collect();
            let ru: Vec<Vec<f64>> = u.iter().rev().cloned().collect();
            let back = stack_apply(&mut Eval, &params, &rev, &out.z, &ra, &rv, &ru).unwrap();
            let err = back.z.iter().zip(&z).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            prop_assert!(err <= 1e-8);
            prop_assert!((out.log_jac + back.log_jac).abs() <= 1e-8);
        }
    }
}
