//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every value computed during one forward pass. Operations
//! append a node and return a [`Var`] handle; [`Tape::backward`] replays the
//! nodes in reverse exactly once and leaves `∂loss/∂leaf` on every leaf that
//! was registered with `requires_grad`. Tapes are rebuilt for every training
//! step.

use crate::error::{shape_err, Error, Result};
use crate::fastmath::{self, avx2_dispatch};
use crate::ssm::scan::{self, CoeffLayout, ScanInputs, ScanKernel, ZohForm};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Softplus,
    Exp,
    Sigmoid,
}

#[derive(Debug)]
struct ScanNode {
    u: Var,
    delta: Var,
    a_log: Var,
    b: Var,
    b_layout: CoeffLayout,
    c: Var,
    c_layout: CoeffLayout,
    d_skip: Var,
    form: ZohForm,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale { x: Var, k: f64 },
    Unary { x: Var, kind: Activation },
    Conv { x: Var, kernel: Var, bias: Var },
    LayerNorm { x: Var, gain: Var, shift: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Flip(Var),
    BroadcastRows { v: Var },
    Sum(Var),
    Mse { pred: Var, target: Var },
    Scan(Box<ScanNode>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::Unary { kind, .. } => match kind {
                Activation::Silu => "silu",
                Activation::Softplus => "softplus",
                Activation::Exp => "exp",
                Activation::Sigmoid => "sigmoid",
            },
            Op::Conv { .. } => "depthwise_causal_conv1d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Flip(..) => "flip_time",
            Op::BroadcastRows { .. } => "broadcast_rows",
            Op::Sum(..) => "sum",
            Op::Mse { .. } => "mse",
            Op::Scan(..) => "selective_scan",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation; see the module docs.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    recording: bool,
    check_finite: bool,
    kernel: ScanKernel,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[inline(always)]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + fastmath::exp(-v))
}

#[inline(always)]
pub fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

#[inline(always)]
pub fn softplus(v: f64) -> f64 {
    v.max(0.0) + fastmath::ln_1p_unit(fastmath::exp(-v.abs()))
}

#[inline(always)]
fn activate_all_impl(kind: Activation, x: &[f64]) -> Vec<f64> {
    match kind {
        Activation::Silu => x.iter().map(|v| silu(*v)).collect(),
        Activation::Softplus => x.iter().map(|v| softplus(*v)).collect(),
        Activation::Exp => x.iter().map(|v| fastmath::exp(*v)).collect(),
        Activation::Sigmoid => x.iter().map(|v| sigmoid(*v)).collect(),
    }
}

avx2_dispatch! {
    fn activate_all(kind: Activation, x: &[f64]) -> Vec<f64> => activate_all_impl
}

/// `gx += g ⊙ f'(x)`.
#[inline(always)]
fn activate_backward_impl(kind: Activation, x: &[f64], y: &[f64], g: &[f64], gx: &mut [f64]) {
    let n = gx.len();
    let (x, y, g) = (&x[..n], &y[..n], &g[..n]);
    match kind {
        Activation::Silu => (0..n).for_each(|i| gx[i] += g[i] * activate_grad(Activation::Silu, x[i], y[i])),
        Activation::Softplus => {
            (0..n).for_each(|i| gx[i] += g[i] * activate_grad(Activation::Softplus, x[i], y[i]))
        }
        Activation::Exp => (0..n).for_each(|i| gx[i] += g[i] * y[i]),
        Activation::Sigmoid => (0..n).for_each(|i| gx[i] += g[i] * y[i] * (1.0 - y[i])),
    }
}

avx2_dispatch! {
    fn activate_backward(kind: Activation, x: &[f64], y: &[f64], g: &[f64], gx: &mut [f64]) -> () => activate_backward_impl
}

/// Derivative of the activation at input `v` with output `y`.
#[inline(always)]
fn activate_grad(kind: Activation, v: f64, y: f64) -> f64 {
    match kind {
        Activation::Silu => {
            let s = sigmoid(v);
            s * (1.0 + v * (1.0 - s))
        }
        Activation::Softplus => sigmoid(v),
        Activation::Exp => y,
        Activation::Sigmoid => y * (1.0 - y),
    }
}

/// `c (+)= op(a) · op(b)` for row-major `m×k` and `k×n` operands, where
/// `op` optionally transposes the stored matrix.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths cover m*k, k*n and m*n elements with the strides above.
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<MatDims> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || rb < 2 {
        return shape_err(format!("matmul needs rank ≥ 2, got {:?} and {:?}", a.shape(), b.shape()));
    }
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (kb, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if k != kb {
        return shape_err(format!("matmul inner dims differ: {:?} × {:?}", a.shape(), b.shape()));
    }
    let batch: usize = a.shape()[..ra - 2].iter().product();
    let b_shared = rb == 2;
    if !b_shared && b.shape()[..rb - 2] != a.shape()[..ra - 2] {
        return shape_err(format!("matmul batch dims differ: {:?} × {:?}", a.shape(), b.shape()));
    }
    Ok(MatDims {
        batch,
        m,
        k,
        n,
        b_shared,
    })
}

/// `[T, D]` view of a tensor of rank ≥ 1 (rank-1 tensors are a single row).
fn td(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    /// A tape that records operations for a later [`Tape::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
            check_finite: cfg!(debug_assertions),
            kernel: ScanKernel::Sequential,
        }
    }

    /// A tape that only evaluates; nothing requires gradients.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    /// Scan kernel used by [`Tape::selective_scan`].
    pub fn with_kernel(mut self, kernel: ScanKernel) -> Self {
        self.kernel = kernel;
        self
    }

    /// Toggle the per-op NaN/Inf check (on by default in debug builds).
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn kernel(&self) -> ScanKernel {
        self.kernel
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Register a leaf. Gradients are kept only for `requires_grad` leaves.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.recording,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Tape::backward`] call with respect to `v`.
    ///
    /// `None` for values that do not require gradients. A `requires_grad`
    /// value that the loss does not depend on gets a zero gradient.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad || self.grads.is_empty() {
            return None;
        }
        let data = self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; node.value.numel()]);
        Some(Tensor::from_parts(node.value.shape().to_vec(), data))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let MatDims {
            batch,
            m,
            k,
            n,
            b_shared,
        } = matmul_dims(av, bv)?;
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let bs = if b_shared { 0 } else { i * k * n };
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[bs..bs + k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut shape = av.shape()[..av.rank() - 2].to_vec();
        shape.extend([m, n]);
        self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b }, &[a, b])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// `x[.., j] + bias[j]` for every row of `x`; `bias` is `[D]` or `[1, D]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.numel() != xv.cols() || bv.rows() != 1 {
            return shape_err(format!("bias {:?} for input {:?}", bv.shape(), xv.shape()));
        }
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(value, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * k).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(value, Op::Scale { x, k }, &[x])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let xv = self.value(x);
        let data = activate_all(kind, xv.data());
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(value, Op::Unary { x, kind }, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Silu)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Exp)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Per-channel causal convolution: `y[t,d] = bias[d] + Σ_k kernel[k,d]·x[t−(K−1)+k, d]`
    /// with zeros left of the sequence start.
    pub fn depthwise_causal_conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        let [t_len, d] = *xv.shape() else {
            return shape_err(format!("conv input must be [T, D], got {:?}", xv.shape()));
        };
        let [taps, kd] = *kv.shape() else {
            return shape_err(format!("conv kernel must be [K, D], got {:?}", kv.shape()));
        };
        if kd != d || bv.shape() != [d] {
            return shape_err(format!(
                "conv channels: input {:?}, kernel {:?}, bias {:?}",
                xv.shape(),
                kv.shape(),
                bv.shape()
            ));
        }
        let (xs, ks) = (xv.data(), kv.data());
        let mut out = Vec::with_capacity(t_len * d);
        for t in 0..t_len {
            out.extend_from_slice(bv.data());
            let row = &mut out[t * d..];
            for k in 0..taps {
                let Some(src) = (t + k + 1).checked_sub(taps) else {
                    continue;
                };
                let xr = &xs[src * d..(src + 1) * d];
                let kr = &ks[k * d..(k + 1) * d];
                for c in 0..d {
                    row[c] += kr[c] * xr[c];
                }
            }
        }
        let value = Tensor::from_parts(vec![t_len, d], out);
        self.push(value, Op::Conv { x, kernel, bias }, &[x, kernel, bias])
    }

    /// Normalize each row to zero mean / unit (population) variance, then
    /// apply `gain` and `shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (xv, gv, sv) = (self.value(x), self.value(gain), self.value(shift));
        let (rows, d) = td(xv);
        if gv.shape() != [d] || sv.shape() != [d] {
            return shape_err(format!(
                "layer_norm affine {:?}/{:?} for width {d}",
                gv.shape(),
                sv.shape()
            ));
        }
        let mut out = vec![0.0; rows * d];
        let mut means = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            rstd[r] = rs;
            for c in 0..d {
                out[r * d + c] = (row[c] - mean) * rs * gv.data()[c] + sv.data()[c];
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                shift,
                mean: means,
                rstd,
            },
            &[x, gain, shift],
        )
    }

    /// Reverse the order of rows (time axis).
    pub fn flip_time(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = td(xv);
        let mut out = Vec::with_capacity(rows * d);
        for r in (0..rows).rev() {
            out.extend_from_slice(xv.row(r));
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(value, Op::Flip(x), &[x])
    }

    /// Repeat a `[D]` vector into `[rows, D]`.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let vv = self.value(v);
        if vv.rank() != 1 || rows == 0 {
            return shape_err(format!("broadcast_rows of {:?} to {rows} rows", vv.shape()));
        }
        let d = vv.numel();
        let mut out = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            out.extend_from_slice(vv.data());
        }
        self.push(Tensor::from_parts(vec![rows, d], out), Op::BroadcastRows { v }, &[v])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let (pv, tv) = (self.value(pred), self.value(target));
        let n = pv.numel() as f64;
        let s = pv
            .data()
            .iter()
            .zip(tv.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        self.push(Tensor::scalar(s), Op::Mse { pred, target }, &[pred, target])
    }

    /// Fused ZOH discretization and diagonal scan with skip connection.
    ///
    /// `u`, `delta`: `[T, D]`; `a_log`: `[D, N]` storing `log(−A)`;
    /// `b`, `c` follow their layouts; `d_skip`: `[D]`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a_log: Var,
        b: Var,
        b_layout: CoeffLayout,
        c: Var,
        c_layout: CoeffLayout,
        d_skip: Var,
        form: ZohForm,
    ) -> Result<Var> {
        let a = neg_exp(self.value(a_log));
        let inputs = ScanInputs {
            u: self.value(u),
            delta: self.value(delta),
            a: &a,
            b: self.value(b),
            b_layout,
            c: self.value(c),
            c_layout,
            d_skip: self.value(d_skip),
            form,
        };
        let y = scan::fused_forward(&inputs, self.kernel)?;
        let node = ScanNode {
            u,
            delta,
            a_log,
            b,
            b_layout,
            c,
            c_layout,
            d_skip,
            form,
        };
        self.push(y, Op::Scan(Box::new(node)), &[u, delta, a_log, b, c, d_skip])
    }

    /// Populate gradients of the scalar `loss` with respect to every value
    /// that requires them. Gradients from a previous call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        contrib(slot);
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let MatDims {
                    batch,
                    m,
                    k,
                    n,
                    b_shared,
                } = matmul_dims(av, bv)?;
                self.accumulate(grads, *a, |ga| {
                    for i in 0..batch {
                        let bs = if b_shared { 0 } else { i * k * n };
                        // dA = dC · Bᵀ
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bv.data()[bs..bs + k * n],
                            true,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..batch {
                        let bs = if b_shared { 0 } else { i * k * n };
                        // dB = Aᵀ · dC
                        gemm(
                            k,
                            m,
                            n,
                            &av.data()[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut gb[bs..bs + k * n],
                            true,
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |gv| add_into(gv, g));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                let c = self.value(*bias).numel();
                self.accumulate(grads, *bias, |gb| {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale { x, k } => {
                self.accumulate(grads, *x, |gx| {
                    for i in 0..g.len() {
                        gx[i] += k * g[i];
                    }
                });
            }
            Op::Unary { x, kind } => {
                let (xv, yv) = (self.value(*x).data(), node.value.data());
                self.accumulate(grads, *x, |gx| activate_backward(*kind, xv, yv, g, gx));
            }
            Op::Conv { x, kernel, bias } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let (t_len, d) = td(xv);
                let taps = kv.shape()[0];
                let (xs, ks) = (xv.data(), kv.data());
                self.accumulate(grads, *x, |gx| {
                    for t in 0..t_len {
                        for k in 0..taps {
                            let Some(src) = (t + k + 1).checked_sub(taps) else {
                                continue;
                            };
                            for c in 0..d {
                                gx[src * d + c] += g[t * d + c] * ks[k * d + c];
                            }
                        }
                    }
                });
                self.accumulate(grads, *kernel, |gk| {
                    for t in 0..t_len {
                        for k in 0..taps {
                            let Some(src) = (t + k + 1).checked_sub(taps) else {
                                continue;
                            };
                            for c in 0..d {
                                gk[k * d + c] += g[t * d + c] * xs[src * d + c];
                            }
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                mean,
                rstd,
            } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let (rows, d) = td(xv);
                let gd = gv.data();
                let xs = xv.data();
                let xhat: Vec<f64> = (0..xs.len())
                    .map(|i| (xs[i] - mean[i / d]) * rstd[i / d])
                    .collect();
                self.accumulate(grads, *gain, |gg| {
                    for i in 0..g.len() {
                        gg[i % d] += g[i] * xhat[i];
                    }
                });
                self.accumulate(grads, *shift, |gs| {
                    for row in g.chunks(d) {
                        add_into(gs, row);
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..d {
                            let gh = gr[c] * gd[c];
                            m1 += gh;
                            m2 += gh * xr[c];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for c in 0..d {
                            gx[r * d + c] += rstd[r] * (gr[c] * gd[c] - m1 - xr[c] * m2);
                        }
                    }
                });
            }
            Op::Flip(x) => {
                let (rows, d) = td(self.value(*x));
                self.accumulate(grads, *x, |gx| {
                    for r in 0..rows {
                        let src = &g[(rows - 1 - r) * d..(rows - r) * d];
                        add_into(&mut gx[r * d..(r + 1) * d], src);
                    }
                });
            }
            Op::BroadcastRows { v } => {
                let d = self.value(*v).numel();
                self.accumulate(grads, *v, |gv| {
                    for row in g.chunks(d) {
                        add_into(gv, row);
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |gx| {
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                });
            }
            Op::Mse { pred, target } => {
                let (pv, tv) = (self.value(*pred).data(), self.value(*target).data());
                let k = 2.0 * g[0] / pv.len() as f64;
                self.accumulate(grads, *pred, |gp| {
                    for i in 0..pv.len() {
                        gp[i] += k * (pv[i] - tv[i]);
                    }
                });
                self.accumulate(grads, *target, |gt| {
                    for i in 0..pv.len() {
                        gt[i] -= k * (pv[i] - tv[i]);
                    }
                });
            }
            Op::Scan(sn) => {
                let a = neg_exp(self.value(sn.a_log));
                let inputs = ScanInputs {
                    u: self.value(sn.u),
                    delta: self.value(sn.delta),
                    a: &a,
                    b: self.value(sn.b),
                    b_layout: sn.b_layout,
                    c: self.value(sn.c),
                    c_layout: sn.c_layout,
                    d_skip: self.value(sn.d_skip),
                    form: sn.form,
                };
                let sg = scan::fused_backward(&inputs, g)?;
                self.accumulate(grads, sn.u, |gu| add_into(gu, &sg.u));
                self.accumulate(grads, sn.delta, |gd| add_into(gd, &sg.delta));
                self.accumulate(grads, sn.a_log, |ga| {
                    // A = −exp(a_log) ⇒ dA/da_log = A
                    for i in 0..ga.len() {
                        ga[i] += sg.a[i] * a.data()[i];
                    }
                });
                self.accumulate(grads, sn.b, |gb| add_into(gb, &sg.b));
                self.accumulate(grads, sn.c, |gc| add_into(gc, &sg.c));
                self.accumulate(grads, sn.d_skip, |gs| add_into(gs, &sg.d_skip));
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `A = −exp(a_log)` elementwise.
pub(crate) fn neg_exp(a_log: &Tensor) -> Tensor {
    let data = a_log.data().iter().map(|v| -v.exp()).collect();
    Tensor::from_parts(a_log.shape().to_vec(), data)
}
