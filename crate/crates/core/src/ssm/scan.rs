//! Zero-order-hold discretization and the two scan kernels for the diagonal
//! linear recurrence
//!
//! ```text
//! h_t = Ā_t ⊙ h_{t-1} + B̄_t x_t,     y_t = ⟨C_t, h_t⟩ + D x_t,     h_0 = 0
//! ```
//!
//! evaluated independently for every channel `d` over a state of size `N`.
//! All per-step tensors are laid out `[T, D, N]` with the state index fastest.

use rayon::prelude::*;

use crate::error::{param_err, shape_err, Result};
use crate::fastmath::{avx2_dispatch, expm1};
use crate::tensor::Tensor;

/// Below this |ΔA| the input coefficient is evaluated by its Taylor series.
pub const SERIES_THRESHOLD: f64 = 1e-6;

/// Threshold under which `(e^z - 1)/z` and its derivative use series
/// expansions in the adjoint, where `Ā - 1` would lose digits.
const GRAD_SERIES_THRESHOLD: f64 = 1e-3;

/// How the input matrix is discretized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ZohForm {
    /// `B̄ = (ΔA)⁻¹ (exp(ΔA) − 1) ΔB`.
    #[default]
    Exact,
    /// `B̄ = exp(ΔA)⁻¹ (exp(ΔA) − 1) ΔB`, kept for comparison runs.
    InverseExp,
}

impl std::str::FromStr for ZohForm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "exact" => Ok(Self::Exact),
            "inverse_exp" => Ok(Self::InverseExp),
            other => Err(format!("unknown discretization `{other}`")),
        }
    }
}

impl std::fmt::Display for ZohForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Exact => "exact",
            Self::InverseExp => "inverse_exp",
        })
    }
}

/// Layout of the `B` / `C` coefficients handed to the kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoeffLayout {
    /// `[T, N]` (or `[N]`, constant in time), shared by every channel.
    PerStep,
    /// `[D, N]`, one fixed row per channel, constant in time.
    PerChannel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScanKernel {
    #[default]
    Sequential,
    Parallel,
}

impl std::str::FromStr for ScanKernel {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sequential" => Ok(Self::Sequential),
            "parallel" => Ok(Self::Parallel),
            other => Err(format!("unknown scan kernel `{other}`")),
        }
    }
}

impl std::fmt::Display for ScanKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sequential => "sequential",
            Self::Parallel => "parallel",
        })
    }
}

/// Discrete transition and input coefficients, both `[T, D, N]`.
#[derive(Clone, Debug)]
pub struct Discretized {
    pub abar: Tensor,
    pub bbar: Tensor,
}

/// `(Ā, κ)` for one diagonal entry, with `B̄ = κ·B`.
#[inline]
pub fn zoh(dt: f64, a: f64, form: ZohForm) -> (f64, f64) {
    zoh_inv(dt, a, 1.0 / a, form)
}

/// [`zoh`] with `1/A` supplied by the caller.
#[inline(always)]
fn zoh_inv(dt: f64, a: f64, inv_a: f64, form: ZohForm) -> (f64, f64) {
    let z = dt * a;
    match form {
        ZohForm::Exact => {
            let em1 = expm1(z);
            // Δ(e^z − 1)/z = (e^z − 1)/A
            let kappa = if z.abs() < SERIES_THRESHOLD {
                dt * (1.0 + z * (0.5 + z / 6.0))
            } else {
                em1 * inv_a
            };
            (1.0 + em1, kappa)
        }
        ZohForm::InverseExp => {
            let em1 = expm1(z);
            // exp(z)^{-1} (exp(z) - 1) = 1 - exp(-z) = -expm1(-z)
            (1.0 + em1, -dt * expm1(-z))
        }
    }
}

/// Discretize one `(t, d)` row of `N` states into `abar` and `bbar`.
#[inline(always)]
fn discretize_row(
    dt: f64,
    a: &[f64],
    inv_a: &[f64],
    b: &[f64],
    form: ZohForm,
    abar: &mut [f64],
    bbar: &mut [f64],
) {
    let n = abar.len();
    let (a, inv_a, b, bbar) = (&a[..n], &inv_a[..n], &b[..n], &mut bbar[..n]);
    match form {
        // same arithmetic as `zoh_inv`, written branch-free so it vectorizes
        ZohForm::Exact => {
            for s in 0..n {
                let z = dt * a[s];
                let em1 = expm1(z);
                let series = dt * (1.0 + z * (0.5 + z / 6.0));
                let kappa = if z.abs() < SERIES_THRESHOLD { series } else { em1 * inv_a[s] };
                abar[s] = 1.0 + em1;
                bbar[s] = kappa * b[s];
            }
        }
        ZohForm::InverseExp => {
            for s in 0..n {
                let (ab, kappa) = zoh_inv(dt, a[s], inv_a[s], form);
                abar[s] = ab;
                bbar[s] = kappa * b[s];
            }
        }
    }
}

/// `(κ, ∂κ/∂Δ, ∂κ/∂A)` given the already computed `Ā` and `1/A`.
#[inline(always)]
fn zoh_grads(dt: f64, a: f64, inv_a: f64, abar: f64, form: ZohForm) -> (f64, f64, f64) {
    let z = dt * a;
    match form {
        ZohForm::Exact => {
            let em1 = abar - 1.0;
            let small = z.abs() < GRAD_SERIES_THRESHOLD;
            let phi = 1.0 + z * (0.5 + z * (1.0 / 6.0 + z * (1.0 / 24.0 + z / 120.0)));
            let dphi = 0.5 + z * (1.0 / 3.0 + z * (0.125 + z * (1.0 / 30.0 + z / 144.0)));
            // Δφ(ΔA) = (e^z − 1)/A and Δ²φ'(ΔA) = (z·e^z − (e^z − 1))/A²
            let kappa = if small { dt * phi } else { em1 * inv_a };
            let dk_da = if small { dt * dt * dphi } else { (z * abar - em1) * inv_a * inv_a };
            // d(Δφ(ΔA))/dΔ = φ + zφ' = e^z
            (kappa, abar, dk_da)
        }
        ZohForm::InverseExp => {
            let inv = 1.0 / abar;
            (dt * (1.0 - inv), (1.0 - inv) + z * inv, dt * dt * inv)
        }
    }
}

/// Strided read-only view resolving `(t, d, n)` to a flat index.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    t_stride: usize,
    d_stride: usize,
}

impl View<'_> {
    #[inline]
    fn base(&self, t: usize, d: usize) -> usize {
        t * self.t_stride + d * self.d_stride
    }
}

fn coeff_view<'a>(
    c: &'a Tensor,
    layout: CoeffLayout,
    t_len: usize,
    d: usize,
    n: usize,
    what: &str,
) -> Result<View<'a>> {
    let shape = c.shape();
    match layout {
        CoeffLayout::PerStep => match shape {
            [sn] if *sn == n => Ok(View {
                data: c.data(),
                t_stride: 0,
                d_stride: 0,
            }),
            [st, sn] if *st == t_len && *sn == n => Ok(View {
                data: c.data(),
                t_stride: n,
                d_stride: 0,
            }),
            _ => shape_err(format!("{what}: expected [{t_len}, {n}] or [{n}], got {shape:?}")),
        },
        CoeffLayout::PerChannel => {
            if shape != [d, n] {
                return shape_err(format!("{what}: expected [{d}, {n}], got {shape:?}"));
            }
            Ok(View {
                data: c.data(),
                t_stride: 0,
                d_stride: n,
            })
        }
    }
}

avx2_dispatch! {
    /// ZOH discretization of a diagonal-per-channel state matrix `A: [D, N]`.
    ///
    /// `delta` is `[T, D]` (or `[D]`, constant in time); `b` follows `b_layout`.
    pub fn discretize(a: &Tensor, b: &Tensor, b_layout: CoeffLayout, delta: &Tensor, form: ZohForm) -> Result<Discretized>
        => discretize_impl
}

#[inline(always)]
fn discretize_impl(
    a: &Tensor,
    b: &Tensor,
    b_layout: CoeffLayout,
    delta: &Tensor,
    form: ZohForm,
) -> Result<Discretized> {
    let [d, n] = *a.shape() else {
        return shape_err(format!("A must be [D, N], got {:?}", a.shape()));
    };
    let (t_len, dt_stride) = match *delta.shape() {
        [t, dd] if dd == d => (t, d),
        [dd] if dd == d => {
            let t = match (b_layout, b.shape()) {
                (CoeffLayout::PerStep, [t, _]) => *t,
                _ => 1,
            };
            (t, 0)
        }
        _ => return shape_err(format!("delta must be [T, {d}] or [{d}], got {:?}", delta.shape())),
    };
    if let Some(bad) = delta.data().iter().find(|v| !(**v > 0.0)) {
        return param_err(format!("time step must be positive, got {bad}"));
    }
    let bv = coeff_view(b, b_layout, t_len, d, n, "B")?;
    let mut abar = vec![0.0; t_len * d * n];
    let mut bbar = vec![0.0; t_len * d * n];
    let dts = delta.data();
    let av = a.data();
    let inv: Vec<f64> = av.iter().map(|v| 1.0 / v).collect();
    for t in 0..t_len {
        for ch in 0..d {
            let dt = dts[t * dt_stride + ch];
            let base = (t * d + ch) * n;
            let bb = bv.base(t, ch);
            let lanes = ch * n..(ch + 1) * n;
            discretize_row(
                dt,
                &av[lanes.clone()],
                &inv[lanes],
                &bv.data[bb..bb + n],
                form,
                &mut abar[base..base + n],
                &mut bbar[base..base + n],
            );
        }
    }
    Ok(Discretized {
        abar: Tensor::from_parts(vec![t_len, d, n], abar),
        bbar: Tensor::from_parts(vec![t_len, d, n], bbar),
    })
}

struct ScanDims {
    t: usize,
    d: usize,
    n: usize,
}

fn check_scan_inputs(
    abar: &Tensor,
    bbar: &Tensor,
    x: &Tensor,
    d_skip: &Tensor,
) -> Result<ScanDims> {
    let [t, d, n] = *abar.shape() else {
        return shape_err(format!("Ā must be [T, D, N], got {:?}", abar.shape()));
    };
    if bbar.shape() != abar.shape() {
        return shape_err(format!("B̄ {:?} does not match Ā {:?}", bbar.shape(), abar.shape()));
    }
    if x.shape() != [t, d] {
        return shape_err(format!("x must be [{t}, {d}], got {:?}", x.shape()));
    }
    if d_skip.shape() != [d] {
        return shape_err(format!("D_skip must be [{d}], got {:?}", d_skip.shape()));
    }
    Ok(ScanDims { t, d, n })
}

avx2_dispatch! {
    /// Reference recurrence, one time step after another.
    pub fn scan_sequential(
        abar: &Tensor,
        bbar: &Tensor,
        c: &Tensor,
        c_layout: CoeffLayout,
        x: &Tensor,
        d_skip: &Tensor,
    ) -> Result<Tensor> => scan_sequential_impl
}

#[inline(always)]
fn scan_sequential_impl(
    abar: &Tensor,
    bbar: &Tensor,
    c: &Tensor,
    c_layout: CoeffLayout,
    x: &Tensor,
    d_skip: &Tensor,
) -> Result<Tensor> {
    let ScanDims { t: t_len, d, n } = check_scan_inputs(abar, bbar, x, d_skip)?;
    let cv = coeff_view(c, c_layout, t_len, d, n, "C")?;
    let (av, bv, xv, dv) = (abar.data(), bbar.data(), x.data(), d_skip.data());
    let mut h = vec![0.0; d * n];
    let mut y = vec![0.0; t_len * d];
    for t in 0..t_len {
        for ch in 0..d {
            let xt = xv[t * d + ch];
            let base = (t * d + ch) * n;
            let cb = cv.base(t, ch);
            let hs = &mut h[ch * n..(ch + 1) * n];
            let mut acc = 0.0;
            for s in 0..n {
                hs[s] = av[base + s] * hs[s] + bv[base + s] * xt;
                acc += cv.data[cb + s] * hs[s];
            }
            y[t * d + ch] = acc + dv[ch] * xt;
        }
    }
    Ok(Tensor::from_parts(vec![t_len, d], y))
}

/// Minimum number of lane-updates handed to one rayon task.
const PAR_GRAIN: usize = 1 << 14;

/// Lane-updates per block of the blocked scan (64 KiB per array), small
/// enough for a block of `a` and `b` to stay in cache between passes.
const SCAN_BLOCK: usize = 1 << 13;

/// Inclusive scan of `h ↦ a·h + b` inside one block, starting from `h = 0`.
/// Row `i` of `b` becomes the state after row `i`; row `i` of `a` becomes the
/// product of the block's transitions up to `i`.
fn local_scan(a: &mut [f64], b: &mut [f64], lanes: usize) {
    for r in 1..a.len() / lanes {
        let (a_prev, a_cur) = a.split_at_mut(r * lanes);
        let (b_prev, b_cur) = b.split_at_mut(r * lanes);
        let p = (r - 1) * lanes;
        for i in 0..lanes {
            b_cur[i] += a_cur[i] * b_prev[p + i];
            a_cur[i] *= a_prev[p + i];
        }
    }
}

/// Inclusive associative scan over time of the affine maps `h ↦ a·h + b`,
/// blocked: every block is scanned on its own, the blocks' exit states are
/// chained left to right, then each block is offset by the state entering it.
/// Afterwards row `t` of `b` holds `h_t`. `O(T)` work in two streaming
/// passes; the block size depends only on the lane count, so results are
/// identical from run to run regardless of thread count.
pub(crate) fn affine_scan_in_place(a: &mut [f64], b: &mut [f64], t_len: usize, lanes: usize) {
    debug_assert_eq!(a.len(), t_len * lanes);
    if t_len == 0 {
        return;
    }
    let rows = (SCAN_BLOCK / lanes).max(1);
    let block = rows * lanes;
    let min_len = (PAR_GRAIN / block).max(1);
    a.par_chunks_mut(block)
        .zip(b.par_chunks_mut(block))
        .with_min_len(min_len)
        .for_each(|(ca, cb)| local_scan(ca, cb, lanes));

    // state entering block k
    let n_blocks = t_len.div_ceil(rows);
    let mut entry = vec![0.0; n_blocks * lanes];
    for k in 1..n_blocks {
        let last = (k * rows - 1) * lanes;
        let (done, next) = entry.split_at_mut(k * lanes);
        let prev = &done[(k - 1) * lanes..];
        for i in 0..lanes {
            next[i] = a[last + i] * prev[i] + b[last + i];
        }
    }

    a.par_chunks(block)
        .zip(b.par_chunks_mut(block))
        .zip(entry.par_chunks(lanes))
        .skip(1)
        .with_min_len(min_len)
        .for_each(|((ca, cb), h0)| {
            for (ra, rb) in ca.chunks(lanes).zip(cb.chunks_mut(lanes)) {
                for i in 0..lanes {
                    rb[i] += ra[i] * h0[i];
                }
            }
        });
}

/// Parallel-scan kernel; agrees with [`scan_sequential`] up to floating-point
/// reassociation.
pub fn scan_parallel(
    abar: &Tensor,
    bbar: &Tensor,
    c: &Tensor,
    c_layout: CoeffLayout,
    x: &Tensor,
    d_skip: &Tensor,
) -> Result<Tensor> {
    let ScanDims { t: t_len, d, n } = check_scan_inputs(abar, bbar, x, d_skip)?;
    let cv = coeff_view(c, c_layout, t_len, d, n, "C")?;
    let lanes = d * n;
    let mut a = abar.data().to_vec();
    let mut b = bbar.data().to_vec();
    let xv = x.data();
    b.par_chunks_mut(lanes)
        .with_min_len((PAR_GRAIN / lanes).max(1))
        .enumerate()
        .for_each(|(t, row)| {
            for ch in 0..d {
                let xt = xv[t * d + ch];
                for v in &mut row[ch * n..(ch + 1) * n] {
                    *v *= xt;
                }
            }
        });
    affine_scan_in_place(&mut a, &mut b, t_len, lanes);
    let dv = d_skip.data();
    let mut y = vec![0.0; t_len * d];
    y.par_chunks_mut(d)
        .with_min_len((PAR_GRAIN / lanes).max(1))
        .enumerate()
        .for_each(|(t, yrow)| {
            for ch in 0..d {
                let cb = cv.base(t, ch);
                let hs = &b[(t * d + ch) * n..(t * d + ch + 1) * n];
                let acc: f64 = hs.iter().zip(&cv.data[cb..cb + n]).map(|(h, c)| h * c).sum();
                yrow[ch] = acc + dv[ch] * xv[t * d + ch];
            }
        });
    Ok(Tensor::from_parts(vec![t_len, d], y))
}

pub fn scan(
    kernel: ScanKernel,
    abar: &Tensor,
    bbar: &Tensor,
    c: &Tensor,
    c_layout: CoeffLayout,
    x: &Tensor,
    d_skip: &Tensor,
) -> Result<Tensor> {
    match kernel {
        ScanKernel::Sequential => scan_sequential(abar, bbar, c, c_layout, x, d_skip),
        ScanKernel::Parallel => scan_parallel(abar, bbar, c, c_layout, x, d_skip),
    }
}

/// Inputs of the fused discretize-and-scan used by the tape.
pub(crate) struct ScanInputs<'a> {
    pub u: &'a Tensor,
    /// `[T, D]`, strictly positive.
    pub delta: &'a Tensor,
    /// Continuous diagonal state matrix `[D, N]`.
    pub a: &'a Tensor,
    pub b: &'a Tensor,
    pub b_layout: CoeffLayout,
    pub c: &'a Tensor,
    pub c_layout: CoeffLayout,
    pub d_skip: &'a Tensor,
    pub form: ZohForm,
}

pub(crate) fn fused_forward(inp: &ScanInputs<'_>, kernel: ScanKernel) -> Result<Tensor> {
    if inp.delta.shape() != inp.u.shape() {
        return shape_err(format!(
            "delta {:?} must match input {:?}",
            inp.delta.shape(),
            inp.u.shape()
        ));
    }
    let f = Fused::new(inp)?;
    match kernel {
        ScanKernel::Sequential => {
            let mut h = vec![0.0; f.d * f.n];
            let mut y = vec![0.0; f.t_len * f.d];
            fused_rows(&f, 0, f.t_len, &mut h, Some(&mut y), None);
            Ok(Tensor::from_parts(vec![f.t_len, f.d], y))
        }
        ScanKernel::Parallel => Ok(fused_blocked(&f)),
    }
}

/// Checked operands of the fused discretize-and-scan.
struct Fused<'a> {
    t_len: usize,
    d: usize,
    n: usize,
    a: &'a [f64],
    inv_a: Vec<f64>,
    u: &'a [f64],
    delta: &'a [f64],
    d_skip: &'a [f64],
    b: View<'a>,
    c: View<'a>,
    form: ZohForm,
}

impl<'a> Fused<'a> {
    fn new(inp: &ScanInputs<'a>) -> Result<Self> {
        let [t_len, d] = *inp.u.shape() else {
            return shape_err(format!("input must be [T, D], got {:?}", inp.u.shape()));
        };
        let [da, n] = *inp.a.shape() else {
            return shape_err(format!("A must be [D, N], got {:?}", inp.a.shape()));
        };
        if da != d {
            return shape_err(format!("A has {da} channels, input has {d}"));
        }
        if inp.d_skip.shape() != [d] {
            return shape_err(format!("D_skip must be [{d}], got {:?}", inp.d_skip.shape()));
        }
        if let Some(bad) = inp.delta.data().iter().find(|v| !(**v > 0.0)) {
            return param_err(format!("time step must be positive, got {bad}"));
        }
        Ok(Self {
            t_len,
            d,
            n,
            a: inp.a.data(),
            inv_a: inp.a.data().iter().map(|v| 1.0 / v).collect(),
            u: inp.u.data(),
            delta: inp.delta.data(),
            d_skip: inp.d_skip.data(),
            b: coeff_view(inp.b, inp.b_layout, t_len, d, n, "B")?,
            c: coeff_view(inp.c, inp.c_layout, t_len, d, n, "C")?,
            form: inp.form,
        })
    }
}

avx2_dispatch! {
    /// Advance the state `h` over time steps `t0..t1`, discretizing one row at
    /// a time. Writes the outputs of those steps into `y` when given and
    /// multiplies their transitions into `prod` when given. Bitwise identical
    /// to [`discretize`] followed by [`scan_sequential`] over the same rows.
    fn fused_rows<'a>(
        f: &Fused<'a>,
        t0: usize,
        t1: usize,
        h: &mut [f64],
        y: Option<&mut [f64]>,
        prod: Option<&mut [f64]>,
    ) -> () => fused_rows_impl
}

#[inline(always)]
fn fused_rows_impl(f: &Fused<'_>, t0: usize, t1: usize, h: &mut [f64], mut y: Option<&mut [f64]>, mut prod: Option<&mut [f64]>) {
    let (d, n) = (f.d, f.n);
    let (mut abar, mut bbar) = (vec![0.0; n], vec![0.0; n]);
    for t in t0..t1 {
        for ch in 0..d {
            let xt = f.u[t * d + ch];
            let bb = f.b.base(t, ch);
            let lanes = ch * n..(ch + 1) * n;
            discretize_row(
                f.delta[t * d + ch],
                &f.a[lanes.clone()],
                &f.inv_a[lanes.clone()],
                &f.b.data[bb..bb + n],
                f.form,
                &mut abar,
                &mut bbar,
            );
            if let Some(p) = prod.as_deref_mut() {
                for (p, a) in p[lanes.clone()].iter_mut().zip(&abar) {
                    *p *= a;
                }
            }
            let hs = &mut h[lanes];
            match y.as_deref_mut() {
                Some(y) => {
                    let cb = f.c.base(t, ch);
                    let mut acc = 0.0;
                    for s in 0..n {
                        hs[s] = abar[s] * hs[s] + bbar[s] * xt;
                        acc += f.c.data[cb + s] * hs[s];
                    }
                    y[(t - t0) * d + ch] = acc + f.d_skip[ch] * xt;
                }
                None => {
                    for s in 0..n {
                        hs[s] = abar[s] * hs[s] + bbar[s] * xt;
                    }
                }
            }
        }
    }
}

/// Blocked parallel form of the fused recurrence: every block of time steps
/// is run from a zero state to get its exit state and transition product,
/// the exit states are chained into each block's entry state, then every
/// block is run again from its entry state to produce outputs. Memory stays
/// `O(T·D)`; the block size depends only on the lane count.
fn fused_blocked(f: &Fused<'_>) -> Tensor {
    let (t_len, d) = (f.t_len, f.d);
    let lanes = d * f.n;
    let rows = (SCAN_BLOCK / lanes).max(1);
    let n_blocks = t_len.div_ceil(rows);
    let min_len = (PAR_GRAIN / (rows * lanes)).max(1);
    let mut exit = vec![0.0; n_blocks * lanes];
    let mut prod = vec![1.0; n_blocks * lanes];
    exit.par_chunks_mut(lanes)
        .zip(prod.par_chunks_mut(lanes))
        .enumerate()
        .with_min_len(min_len)
        .for_each(|(k, (h, p))| fused_rows(f, k * rows, ((k + 1) * rows).min(t_len), h, None, Some(p)));
    let mut entry = vec![0.0; n_blocks * lanes];
    for k in 1..n_blocks {
        let (done, next) = entry.split_at_mut(k * lanes);
        let prev = &done[(k - 1) * lanes..];
        let (e, p) = (&exit[(k - 1) * lanes..k * lanes], &prod[(k - 1) * lanes..k * lanes]);
        for i in 0..lanes {
            next[i] = p[i] * prev[i] + e[i];
        }
    }
    let mut y = vec![0.0; t_len * d];
    y.par_chunks_mut(rows * d)
        .zip(entry.par_chunks_mut(lanes))
        .enumerate()
        .with_min_len(min_len)
        .for_each(|(k, (yb, h))| fused_rows(f, k * rows, ((k + 1) * rows).min(t_len), h, Some(yb), None));
    Tensor::from_parts(vec![t_len, d], y)
}

pub(crate) struct ScanGrads {
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d_skip: Vec<f64>,
}

avx2_dispatch! {
    /// Reverse-mode adjoint of [`fused_forward`] given `∂L/∂y`.
    ///
    /// States are recomputed rather than stored on the tape.
    pub(crate) fn fused_backward(inp: &ScanInputs<'_>, gy: &[f64]) -> Result<ScanGrads> => fused_backward_impl
}

#[inline(always)]
fn fused_backward_impl(inp: &ScanInputs<'_>, gy: &[f64]) -> Result<ScanGrads> {
    let [t_len, d] = *inp.u.shape() else {
        return shape_err(format!("input must be [T, D], got {:?}", inp.u.shape()));
    };
    let [_, n] = *inp.a.shape() else {
        return shape_err(format!("A must be [D, N], got {:?}", inp.a.shape()));
    };
    let bv = coeff_view(inp.b, inp.b_layout, t_len, d, n, "B")?;
    let cv = coeff_view(inp.c, inp.c_layout, t_len, d, n, "C")?;
    let (uv, dtv, amat, dv) = (inp.u.data(), inp.delta.data(), inp.a.data(), inp.d_skip.data());
    let inv: Vec<f64> = amat.iter().map(|v| 1.0 / v).collect();

    // replay the forward pass, keeping Ā and the states
    let mut av = vec![0.0; t_len * d * n];
    let mut hs = vec![0.0; t_len * d * n];
    let mut bbar = vec![0.0; n];
    let zeros = vec![0.0; n];
    for t in 0..t_len {
        for ch in 0..d {
            let base = (t * d + ch) * n;
            let bb = bv.base(t, ch);
            let lanes = ch * n..(ch + 1) * n;
            discretize_row(
                dtv[t * d + ch],
                &amat[lanes.clone()],
                &inv[lanes],
                &bv.data[bb..bb + n],
                inp.form,
                &mut av[base..base + n],
                &mut bbar,
            );
            let xt = uv[t * d + ch];
            let (before, rest) = hs.split_at_mut(base);
            let prev = if t > 0 { &before[base - d * n..base - d * n + n] } else { &zeros[..] };
            let (arow, hrow) = (&av[base..base + n], &mut rest[..n]);
            for s in 0..n {
                hrow[s] = arow[s] * prev[s] + bbar[s] * xt;
            }
        }
    }

    let mut g = ScanGrads {
        u: vec![0.0; t_len * d],
        delta: vec![0.0; t_len * d],
        a: vec![0.0; d * n],
        b: vec![0.0; inp.b.numel()],
        c: vec![0.0; inp.c.numel()],
        d_skip: vec![0.0; d],
    };
    let mut gh = vec![0.0; d * n];
    // per-state terms of the two row reductions, summed in a fixed order
    let (mut terms_u, mut terms_dt) = (vec![0.0; n], vec![0.0; n]);
    for t in (0..t_len).rev() {
        for ch in 0..d {
            let gyt = gy[t * d + ch];
            let xt = uv[t * d + ch];
            let dt = dtv[t * d + ch];
            let base = (t * d + ch) * n;
            let bb = bv.base(t, ch);
            let cb = cv.base(t, ch);
            g.d_skip[ch] += gyt * xt;
            let prev = if t > 0 { &hs[base - d * n..base - d * n + n] } else { &zeros[..] };
            let lanes = ch * n..(ch + 1) * n;
            let (gh, amat, inv) = (&mut gh[lanes.clone()], &amat[lanes.clone()], &inv[lanes.clone()]);
            let ga = &mut g.a[lanes];
            let (gb, bco) = (&mut g.b[bb..bb + n], &bv.data[bb..bb + n]);
            let (gc, cco) = (&mut g.c[cb..cb + n], &cv.data[cb..cb + n]);
            let (hrow, arow) = (&hs[base..base + n], &av[base..base + n]);
            for s in 0..n {
                let ghv = gh[s] + gyt * cco[s];
                gc[s] += gyt * hrow[s];
                let abar = arow[s];
                let g_abar = ghv * prev[s];
                let g_bbar = ghv * xt;
                gh[s] = ghv * abar;
                let a = amat[s];
                let (kappa, dk_ddt, dk_da) = zoh_grads(dt, a, inv[s], abar, inp.form);
                terms_dt[s] = g_abar * abar * a + g_bbar * bco[s] * dk_ddt;
                ga[s] += g_abar * abar * dt + g_bbar * bco[s] * dk_da;
                gb[s] += g_bbar * kappa;
                terms_u[s] = ghv * (kappa * bco[s]);
            }
            g.u[t * d + ch] = terms_u.iter().fold(gyt * dv[ch], |acc, v| acc + v);
            g.delta[t * d + ch] = terms_dt.iter().fold(0.0, |acc, v| acc + v);
        }
    }
    Ok(g)
}
