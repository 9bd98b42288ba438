//! Diagonal state-space layers.
//!
//! [`SelectiveSsmParams`] is the input-dependent (S6) layer: the step size,
//! input matrix and output matrix are computed from the sequence itself.
//! [`FixedSsmParams`] is the time-invariant (S4-style) layer used for the
//! selectivity ablation. Both share the discretization and scan kernels in
//! [`scan`].

pub mod scan;

use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{softplus, Tape, Var};
use crate::tensor::Tensor;

pub use scan::{
    discretize, scan_parallel, scan_sequential, CoeffLayout, Discretized, ScanKernel, ZohForm,
};

/// Shape of one state-space layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsmShape {
    /// Number of independent channels `D`.
    pub channels: usize,
    /// State size `N` per channel.
    pub state: usize,
}

impl SsmShape {
    /// Rank of the low-rank step-size projection.
    pub fn dt_rank(&self) -> usize {
        (self.channels / 16).max(1)
    }
}

const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 1e-1;

/// `A_{d,n} = −(n+1)`, stored as `log(n+1)`.
fn init_a_log(shape: SsmShape) -> Tensor {
    let data = (0..shape.channels)
        .flat_map(|_| (0..shape.state).map(|n| ((n + 1) as f64).ln()))
        .collect();
    Tensor::from_parts(vec![shape.channels, shape.state], data)
}

/// Step sizes log-uniform in `[DT_MIN, DT_MAX]`.
fn init_dt(channels: usize, rng: &mut Rng) -> Vec<f64> {
    (0..channels)
        .map(|_| (rng.uniform_range(DT_MIN.ln(), DT_MAX.ln())).exp())
        .collect()
}

/// Parameters of the selective layer.
///
/// `Δ(x) = softplus(x·W_down·W_up + dt_bias)`, `B(x) = x·W_B`, `C(x) = x·W_C`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelectiveSsmParams {
    pub shape: SsmShape,
    /// `[D, N]`, `log(−A)`.
    pub a_log: ParamId,
    /// `[D, N]`.
    pub w_b: ParamId,
    /// `[D, N]`.
    pub w_c: ParamId,
    /// `[D, r]`.
    pub w_dt_down: ParamId,
    /// `[r, D]`.
    pub w_dt_up: ParamId,
    /// `[D]`.
    pub dt_bias: ParamId,
    /// `[D]`.
    pub d_skip: ParamId,
}

impl SelectiveSsmParams {
    pub fn init(store: &mut ParamStore, prefix: &str, shape: SsmShape, rng: &mut Rng) -> Result<Self> {
        let (d, n, r) = (shape.channels, shape.state, shape.dt_rank());
        let proj_std = 1.0 / (d as f64).sqrt();
        let up_bound = 1.0 / (r as f64).sqrt();
        // inverse softplus of the initial step sizes
        let dt_bias = init_dt(d, rng)
            .into_iter()
            .map(|dt| dt + (-(-dt).exp_m1()).ln())
            .collect();
        Ok(Self {
            shape,
            a_log: store.add(format!("{prefix}.a_log"), init_a_log(shape)),
            w_b: store.add(format!("{prefix}.w_b"), Tensor::randn(&[d, n], rng, 0.0, proj_std)?),
            w_c: store.add(format!("{prefix}.w_c"), Tensor::randn(&[d, n], rng, 0.0, proj_std)?),
            w_dt_down: store.add(
                format!("{prefix}.w_dt_down"),
                Tensor::randn(&[d, r], rng, 0.0, proj_std)?,
            ),
            w_dt_up: store.add(
                format!("{prefix}.w_dt_up"),
                Tensor::uniform(&[r, d], rng, -up_bound, up_bound)?,
            ),
            dt_bias: store.add(format!("{prefix}.dt_bias"), Tensor::from_vec(&[d], dt_bias)?),
            d_skip: store.add(format!("{prefix}.d_skip"), Tensor::full(&[d], 1.0)?),
        })
    }
}

/// Parameters of the time-invariant layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FixedSsmParams {
    pub shape: SsmShape,
    /// `[D, N]`, `log(−A)`.
    pub a_log: ParamId,
    /// `[D, N]`.
    pub b: ParamId,
    /// `[D, N]`.
    pub c: ParamId,
    /// `[D]`, `log Δ`.
    pub dt_log: ParamId,
    /// `[D]`.
    pub d_skip: ParamId,
}

impl FixedSsmParams {
    pub fn init(store: &mut ParamStore, prefix: &str, shape: SsmShape, rng: &mut Rng) -> Result<Self> {
        let (d, n) = (shape.channels, shape.state);
        let std = 1.0 / (n as f64).sqrt();
        let dt_log = init_dt(d, rng).into_iter().map(f64::ln).collect();
        Ok(Self {
            shape,
            a_log: store.add(format!("{prefix}.a_log"), init_a_log(shape)),
            b: store.add(format!("{prefix}.b"), Tensor::randn(&[d, n], rng, 0.0, std)?),
            c: store.add(format!("{prefix}.c"), Tensor::randn(&[d, n], rng, 0.0, std)?),
            dt_log: store.add(format!("{prefix}.dt_log"), Tensor::from_vec(&[d], dt_log)?),
            d_skip: store.add(format!("{prefix}.d_skip"), Tensor::full(&[d], 1.0)?),
        })
    }
}

/// Either flavour of state-space layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsmParams {
    Selective(SelectiveSsmParams),
    Fixed(FixedSsmParams),
}

impl SsmParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        shape: SsmShape,
        selective: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(if selective {
            Self::Selective(SelectiveSsmParams::init(store, prefix, shape, rng)?)
        } else {
            Self::Fixed(FixedSsmParams::init(store, prefix, shape, rng)?)
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, form: ZohForm) -> Result<Var> {
        match self {
            Self::Selective(p) => s6_forward(tape, bound, x, p, form),
            Self::Fixed(p) => s4_forward(tape, bound, x, p, form),
        }
    }
}

/// Selective layer on a `[T, D]` sequence.
pub fn s6_forward(
    tape: &mut Tape,
    bound: &Bound,
    x: Var,
    p: &SelectiveSsmParams,
    form: ZohForm,
) -> Result<Var> {
    let low = tape.matmul(x, bound.var(p.w_dt_down))?;
    let raw = tape.matmul(low, bound.var(p.w_dt_up))?;
    let shifted = tape.add_bias(raw, bound.var(p.dt_bias))?;
    let delta = tape.softplus(shifted)?;
    let b = tape.matmul(x, bound.var(p.w_b))?;
    let c = tape.matmul(x, bound.var(p.w_c))?;
    tape.selective_scan(
        x,
        delta,
        bound.var(p.a_log),
        b,
        CoeffLayout::PerStep,
        c,
        CoeffLayout::PerStep,
        bound.var(p.d_skip),
        form,
    )
}

/// Time-invariant layer on a `[T, D]` sequence.
pub fn s4_forward(
    tape: &mut Tape,
    bound: &Bound,
    x: Var,
    p: &FixedSsmParams,
    form: ZohForm,
) -> Result<Var> {
    let rows = tape.value(x).rows();
    let dt = tape.exp(bound.var(p.dt_log))?;
    let delta = tape.broadcast_rows(dt, rows)?;
    tape.selective_scan(
        x,
        delta,
        bound.var(p.a_log),
        bound.var(p.b),
        CoeffLayout::PerChannel,
        bound.var(p.c),
        CoeffLayout::PerChannel,
        bound.var(p.d_skip),
        form,
    )
}

/// Evaluate either layer on a plain tensor without recording gradients.
pub fn ssm_eval(
    store: &ParamStore,
    p: &SsmParams,
    x: &Tensor,
    kernel: ScanKernel,
    form: ZohForm,
) -> Result<Tensor> {
    let mut tape = Tape::no_grad().with_kernel(kernel);
    let bound = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let y = p.forward(&mut tape, &bound, xv, form)?;
    Ok(tape.value(y).clone())
}

/// Step sizes a selective layer would produce for a zero input-projection.
pub fn resting_step_sizes(store: &ParamStore, p: &SelectiveSsmParams) -> Vec<f64> {
    store.get(p.dt_bias).data().iter().map(|b| softplus(*b)).collect()
}
