//! The denoising generator: bidirectional selective state-space layers
//! stacked into pre-norm residual blocks, conditioned on zero-padded
//! observed features and the diffusion timestep.

pub mod checkpoint;

use crate::error::{param_err, shape_err, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::ssm::{ScanKernel, SsmParams, SsmShape, ZohForm};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

/// Width of the depthwise causal convolution in front of each scan.
pub const CONV_WIDTH: usize = 3;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub n_blocks: usize,
    pub model_dim: usize,
    pub state_size: usize,
    /// Channel expansion inside each bidirectional layer.
    pub expand: usize,
    pub n_classes: usize,
    pub feat_dim: usize,
    /// The last `bidirectional_blocks` blocks also run a right-to-left branch.
    pub bidirectional_blocks: usize,
    pub share_branch_weights: bool,
    /// `false` swaps every selective layer for a time-invariant one.
    pub selective: bool,
    /// Largest diffusion timestep the embedding accepts.
    pub max_timestep: usize,
    pub zoh: ZohForm,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_blocks: 15,
            model_dim: 64,
            state_size: 16,
            expand: 2,
            n_classes: 8,
            feat_dim: 16,
            bidirectional_blocks: 15,
            share_branch_weights: false,
            selective: true,
            max_timestep: 1000,
            zoh: ZohForm::Exact,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || !self.model_dim.is_multiple_of(2) {
            return param_err(format!("model_dim must be even and positive, got {}", self.model_dim));
        }
        if self.expand != 2 {
            return param_err(format!("expand must be 2, got {}", self.expand));
        }
        if self.state_size == 0 || self.n_classes == 0 || self.feat_dim == 0 {
            return param_err("state_size, n_classes and feat_dim must be positive");
        }
        if self.bidirectional_blocks > self.n_blocks {
            return param_err(format!(
                "bidirectional_blocks {} exceeds n_blocks {}",
                self.bidirectional_blocks, self.n_blocks
            ));
        }
        if self.max_timestep == 0 {
            return param_err("max_timestep must be positive");
        }
        Ok(())
    }

    /// Whether block `b` (0-based) carries a backward branch.
    pub fn is_bidirectional(&self, b: usize) -> bool {
        b + self.bidirectional_blocks >= self.n_blocks
    }

    fn inner_dim(&self) -> usize {
        self.expand * self.model_dim
    }
}

/// Convolution and state-space layer of one scan direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchParams {
    /// `[CONV_WIDTH, 2·d_m]`.
    pub conv_kernel: ParamId,
    /// `[2·d_m]`.
    pub conv_bias: ParamId,
    pub ssm: SsmParams,
}

impl BranchParams {
    fn init(store: &mut ParamStore, prefix: &str, cfg: &GeneratorConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.inner_dim();
        let std = 1.0 / (CONV_WIDTH as f64).sqrt();
        let shape = SsmShape { channels: d, state: cfg.state_size };
        Ok(Self {
            conv_kernel: store.add(format!("{prefix}.conv.w"), Tensor::randn(&[CONV_WIDTH, d], rng, 0.0, std)?),
            conv_bias: store.add(format!("{prefix}.conv.b"), Tensor::zeros(&[d])?),
            ssm: SsmParams::init(store, &format!("{prefix}.ssm"), shape, cfg.selective, rng)?,
        })
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, form: ZohForm) -> Result<Var> {
        let h = tape.depthwise_causal_conv1d(x, bound.var(self.conv_kernel), bound.var(self.conv_bias))?;
        let h = tape.silu(h)?;
        self.ssm.forward(tape, bound, h, form)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BsslParams {
    /// `[d_m, 2·d_m]`.
    pub in_proj_main: ParamId,
    /// `[d_m, 2·d_m]`.
    pub in_proj_res: ParamId,
    pub fwd: BranchParams,
    /// Absent on unidirectional blocks; equal to `fwd` when weights are shared.
    pub bwd: Option<BranchParams>,
    /// `[2·d_m, d_m]`.
    pub out_proj: ParamId,
}

impl BsslParams {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &GeneratorConfig,
        bidirectional: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (dm, di) = (cfg.model_dim, cfg.inner_dim());
        let in_main = linear(store, &format!("{prefix}.in_main"), dm, di, rng)?;
        let in_res = linear(store, &format!("{prefix}.in_res"), dm, di, rng)?;
        let fwd = BranchParams::init(store, &format!("{prefix}.fwd"), cfg, rng)?;
        let bwd = match (bidirectional, cfg.share_branch_weights) {
            (false, _) => None,
            (true, true) => Some(fwd),
            (true, false) => Some(BranchParams::init(store, &format!("{prefix}.bwd"), cfg, rng)?),
        };
        let out_proj = linear(store, &format!("{prefix}.out"), di, dm, rng)?;
        Ok(Self { in_proj_main: in_main, in_proj_res: in_res, fwd, bwd, out_proj })
    }

    /// The same layer with its two scan directions exchanged.
    pub fn swapped(&self) -> Self {
        match self.bwd {
            Some(b) => Self { fwd: b, bwd: Some(self.fwd), ..*self },
            None => *self,
        }
    }
}

/// `out_proj(W⊙R + B⊙R)` with `R = SiLU(x·W_res)`, `W` the left-to-right
/// branch and `B` the time-reversed right-to-left branch.
pub fn bssl_forward(tape: &mut Tape, bound: &Bound, x: Var, p: &BsslParams, form: ZohForm) -> Result<Var> {
    let main = tape.matmul(x, bound.var(p.in_proj_main))?;
    let res = tape.matmul(x, bound.var(p.in_proj_res))?;
    let r = tape.silu(res)?;
    let w = p.fwd.forward(tape, bound, main, form)?;
    let mut mixed = tape.mul(w, r)?;
    if let Some(bwd) = &p.bwd {
        let flipped = tape.flip_time(main)?;
        let b = bwd.forward(tape, bound, flipped, form)?;
        let b = tape.flip_time(b)?;
        let br = tape.mul(b, r)?;
        mixed = tape.add(mixed, br)?;
    }
    tape.matmul(mixed, bound.var(p.out_proj))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockParams {
    pub ln_gain: ParamId,
    pub ln_shift: ParamId,
    pub bssl: BsslParams,
    /// `[d_m, 2·d_m]`.
    pub ff_in_w: ParamId,
    pub ff_in_b: ParamId,
    /// `[2·d_m, d_m]`.
    pub ff_out_w: ParamId,
    pub ff_out_b: ParamId,
}

impl BlockParams {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &GeneratorConfig,
        bidirectional: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (dm, di) = (cfg.model_dim, cfg.inner_dim());
        Ok(Self {
            ln_gain: store.add(format!("{prefix}.ln.gain"), Tensor::full(&[dm], 1.0)?),
            ln_shift: store.add(format!("{prefix}.ln.shift"), Tensor::zeros(&[dm])?),
            bssl: BsslParams::init(store, &format!("{prefix}.bssl"), cfg, bidirectional, rng)?,
            ff_in_w: linear(store, &format!("{prefix}.ff.w1"), dm, di, rng)?,
            ff_in_b: store.add(format!("{prefix}.ff.b1"), Tensor::zeros(&[di])?),
            ff_out_w: linear(store, &format!("{prefix}.ff.w2"), di, dm, rng)?,
            ff_out_b: store.add(format!("{prefix}.ff.b2"), Tensor::zeros(&[dm])?),
        })
    }
}

/// `x + FF(BSSL(LN(x)))`.
pub fn manta_block_forward(
    tape: &mut Tape,
    bound: &Bound,
    x: Var,
    p: &BlockParams,
    form: ZohForm,
) -> Result<Var> {
    let h = tape.layer_norm(x, bound.var(p.ln_gain), bound.var(p.ln_shift), LN_EPS)?;
    let h = bssl_forward(tape, bound, h, &p.bssl, form)?;
    let h = tape.matmul(h, bound.var(p.ff_in_w))?;
    let h = tape.add_bias(h, bound.var(p.ff_in_b))?;
    let h = tape.silu(h)?;
    let h = tape.matmul(h, bound.var(p.ff_out_w))?;
    let h = tape.add_bias(h, bound.var(p.ff_out_b))?;
    tape.add(x, h)
}

/// Interleaved `sin(t·ω_i), cos(t·ω_i)` with `ω_i = 10000^(−2i/d_m)`.
pub fn sinusoid(t: usize, max_timestep: usize, dim: usize) -> Result<Tensor> {
    if t > max_timestep {
        return param_err(format!("timestep {t} outside [0, {max_timestep}]"));
    }
    if dim == 0 || !dim.is_multiple_of(2) {
        return param_err(format!("embedding width must be even, got {dim}"));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let omega = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        let phase = t as f64 * omega;
        out.push(phase.sin());
        out.push(phase.cos());
    }
    Tensor::from_vec(&[dim], out)
}

/// Zero-pad `[P, n_d]` observed features with `future` empty rows.
pub fn build_condition(features: &Tensor, future: usize) -> Result<Tensor> {
    if features.rank() != 2 {
        return shape_err(format!("features must be [P, n_d], got {:?}", features.shape()));
    }
    let (p, nd) = (features.rows(), features.cols());
    let mut data = features.data().to_vec();
    data.resize((p + future) * nd, 0.0);
    Tensor::from_vec(&[p + future, nd], data)
}

fn linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<ParamId> {
    let std = 1.0 / (fan_in as f64).sqrt();
    Ok(store.add(name, Tensor::randn(&[fan_in, fan_out], rng, 0.0, std)?))
}

/// Anything that maps `(Y_t, t, X)` to a clean-label estimate.
pub trait Denoiser {
    fn n_classes(&self) -> usize;
    fn denoise(&self, y_t: &Tensor, t: usize, x: &Tensor) -> Result<Tensor>;
}

/// Parameter handles of the whole generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorParams {
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub emb_w1: ParamId,
    pub emb_b1: ParamId,
    pub emb_w2: ParamId,
    pub emb_b2: ParamId,
    pub blocks: Vec<BlockParams>,
    pub head_w1: ParamId,
    pub head_b1: ParamId,
    pub head_w2: ParamId,
    pub head_b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    store: ParamStore,
    params: GeneratorParams,
    kernel: ScanKernel,
}

impl Generator {
    pub fn new(config: GeneratorConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (dm, nin) = (config.model_dim, config.n_classes + config.feat_dim);
        let s = &mut store;
        let in_w = linear(s, "in.w", nin, dm, rng)?;
        let in_b = s.add("in.b", Tensor::zeros(&[dm])?);
        let emb_w1 = linear(s, "emb.w1", dm, dm, rng)?;
        let emb_b1 = s.add("emb.b1", Tensor::zeros(&[dm])?);
        let emb_w2 = linear(s, "emb.w2", dm, dm, rng)?;
        let emb_b2 = s.add("emb.b2", Tensor::zeros(&[dm])?);
        let blocks = (0..config.n_blocks)
            .map(|b| BlockParams::init(s, &format!("blocks.{b}"), &config, config.is_bidirectional(b), rng))
            .collect::<Result<Vec<_>>>()?;
        let head_w1 = linear(s, "head.w1", dm, dm, rng)?;
        let head_b1 = s.add("head.b1", Tensor::zeros(&[dm])?);
        let head_w2 = linear(s, "head.w2", dm, config.n_classes, rng)?;
        let head_b2 = s.add("head.b2", Tensor::zeros(&[config.n_classes])?);
        let params = GeneratorParams {
            in_w,
            in_b,
            emb_w1,
            emb_b1,
            emb_w2,
            emb_b2,
            blocks,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
        };
        Ok(Self { config, store, params, kernel: ScanKernel::Sequential })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &GeneratorParams {
        &self.params
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Scan kernel used by [`Denoiser::denoise`].
    pub fn with_kernel(mut self, kernel: ScanKernel) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn kernel(&self) -> ScanKernel {
        self.kernel
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Learned timestep embedding `[1, d_m]`.
    pub fn timestep_embedding(&self, tape: &mut Tape, bound: &Bound, t: usize) -> Result<Var> {
        let p = &self.params;
        let raw = sinusoid(t, self.config.max_timestep, self.config.model_dim)?;
        let raw = tape.constant(raw.reshape(&[1, self.config.model_dim])?);
        let h = tape.matmul(raw, bound.var(p.emb_w1))?;
        let h = tape.add_bias(h, bound.var(p.emb_b1))?;
        let h = tape.silu(h)?;
        let h = tape.matmul(h, bound.var(p.emb_w2))?;
        tape.add_bias(h, bound.var(p.emb_b2))
    }

    /// `[L, n_c]` reconstruction of the clean labels from `Y_t` `[L, n_c]`
    /// and the conditioning `X` `[L, n_d]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, y_t: &Tensor, t: usize, x: &Tensor) -> Result<Var> {
        let cfg = &self.config;
        if y_t.rank() != 2 || y_t.cols() != cfg.n_classes {
            return shape_err(format!("Y_t must be [L, {}], got {:?}", cfg.n_classes, y_t.shape()));
        }
        if x.rank() != 2 || x.cols() != cfg.feat_dim {
            return shape_err(format!("X must be [L, {}], got {:?}", cfg.feat_dim, x.shape()));
        }
        if y_t.rows() != x.rows() {
            return shape_err(format!("Y_t has {} rows but X has {}", y_t.rows(), x.rows()));
        }
        let p = &self.params;
        let input = tape.constant(Tensor::concat_cols(&[y_t, x])?);
        let h = tape.matmul(input, bound.var(p.in_w))?;
        let h = tape.add_bias(h, bound.var(p.in_b))?;
        let emb = self.timestep_embedding(tape, bound, t)?;
        let mut h = tape.add_bias(h, emb)?;
        for block in &p.blocks {
            h = manta_block_forward(tape, bound, h, block, cfg.zoh)?;
        }
        let h = tape.matmul(h, bound.var(p.head_w1))?;
        let h = tape.add_bias(h, bound.var(p.head_b1))?;
        let h = tape.silu(h)?;
        let h = tape.matmul(h, bound.var(p.head_w2))?;
        tape.add_bias(h, bound.var(p.head_b2))
    }
}

impl Denoiser for Generator {
    fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    fn denoise(&self, y_t: &Tensor, t: usize, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::no_grad().with_kernel(self.kernel);
        let bound = self.store.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, y_t, t, x)?;
        Ok(tape.value(out).clone())
    }
}
