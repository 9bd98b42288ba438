//! Gaussian diffusion over scaled one-hot label sequences: noise schedules,
//! the forward process, the clean-target reconstruction loss and the
//! deterministic DDIM sampler.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{param_err, shape_err, Error, Result};
use crate::network::{Denoiser, Generator};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

impl FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            other => Err(format!("unknown schedule `{other}` (expected cosine or linear)")),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::Linear => "linear",
        })
    }
}

/// Cumulative signal coefficients `ᾱ_0 = 1 > ᾱ_1 > … > ᾱ_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;
const LINEAR_BETA: (f64, f64) = (1e-4, 0.02);

impl DiffusionSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 1 {
            return param_err("diffusion needs at least one step");
        }
        let alpha_bar = match kind {
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let u = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                let f0 = f(0);
                (0..=steps).map(|t| f(t) / f0).collect()
            }
            ScheduleKind::Linear => {
                let (lo, hi) = LINEAR_BETA;
                let mut acc = 1.0;
                let mut out = vec![1.0];
                for i in 1..=steps {
                    let beta = if steps == 1 {
                        lo
                    } else {
                        lo + (hi - lo) * (i - 1) as f64 / (steps - 1) as f64
                    };
                    acc *= 1.0 - beta;
                    out.push(acc);
                }
                out
            }
        };
        Ok(Self { kind, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::InvalidParameter(format!("timestep {t} outside [0, {}]", self.steps())))
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `[L, n_c]` with `+scale` at each label and `−scale` elsewhere.
pub fn encode_labels(labels: &[usize], n_classes: usize, scale: f64) -> Result<Tensor> {
    if labels.is_empty() {
        return shape_err("cannot encode an empty label sequence");
    }
    let mut data = vec![-scale; labels.len() * n_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(Error::InvalidLabel { label: l, n_classes });
        }
        data[i * n_classes + l] = scale;
    }
    Tensor::from_vec(&[labels.len(), n_classes], data)
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn decode_labels(y: &Tensor) -> Vec<usize> {
    (0..y.rows())
        .map(|r| {
            let row = y.row(r);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// `Y_t = √ᾱ_t·Y_0 + √(1−ᾱ_t)·ε`.
pub fn forward_noise(y0: &Tensor, t: usize, eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    if eps.shape() != y0.shape() {
        return shape_err(format!("noise {:?} must match Y_0 {:?}", eps.shape(), y0.shape()));
    }
    let ab = sched.alpha_bar(t)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = y0.data().iter().zip(eps.data()).map(|(y, e)| sa * y + sn * e).collect();
    Tensor::from_vec(y0.shape(), data)
}

/// One training pair: clean encoded labels and conditioning, both `[L, ·]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub y0: Tensor,
    pub x: Tensor,
}

/// Mean over the batch of the per-example squared reconstruction error
/// (itself averaged over frames and classes), and its gradient for every
/// parameter of `gen`. Examples are processed in order so the result is
/// reproducible bit for bit.
pub fn training_step(
    gen: &Generator,
    batch: &[TrainExample],
    sched: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return param_err("empty training batch");
    }
    let mut grads: Vec<Tensor> = gen
        .store()
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let w = 1.0 / batch.len() as f64;
    for ex in batch {
        let t = rng.int_inclusive(1, sched.steps());
        let eps = Tensor::randn(ex.y0.shape(), rng, 0.0, 1.0)?;
        let y_t = forward_noise(&ex.y0, t, &eps, sched)?;
        let mut tape = Tape::new().with_kernel(gen.kernel());
        let bound = gen.store().bind(&mut tape);
        let pred = gen.forward(&mut tape, &bound, &y_t, t, &ex.x)?;
        let target = tape.constant(ex.y0.clone());
        let loss = tape.mse(pred, target)?;
        let lv = tape.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        total += w * lv;
        tape.backward(loss)?;
        for (id, acc) in gen.store().ids().zip(grads.iter_mut()) {
            if let Some(g) = tape.grad(bound.var(id)) {
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += w * v;
                }
            }
        }
    }
    Ok((total, grads))
}

/// Descending timesteps `τ_D = T > … > τ_0 = 0`, `τ_i = round(i·T/D)`.
pub fn ddim_timesteps(steps: usize, total: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > total {
        return param_err(format!("sampling steps {steps} must be in [1, {total}]"));
    }
    Ok((0..=steps).rev().map(|i| (2 * i * total + steps) / (2 * steps)).collect())
}

/// Deterministic DDIM from `Y_T ~ N(0, I)` drawn from `rng`, clamping each
/// clean estimate to `[−scale, scale]`. Returns the final clean estimate.
pub fn ddim_sample<M: Denoiser + ?Sized>(
    model: &M,
    x: &Tensor,
    steps: usize,
    sched: &DiffusionSchedule,
    scale: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    let taus = ddim_timesteps(steps, sched.steps())?;
    let mut y = Tensor::randn(&[x.rows(), model.n_classes()], rng, 0.0, 1.0)?;
    let mut x0 = y.clone();
    for pair in taus.windows(2) {
        let (t, next) = (pair[0], pair[1]);
        x0 = model.denoise(&y, t, x)?;
        x0.data_mut().iter_mut().for_each(|v| *v = v.clamp(-scale, scale));
        let (ab, ab_next) = (sched.alpha_bar(t)?, sched.alpha_bar(next)?);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (sa_next, sn_next) = (ab_next.sqrt(), (1.0 - ab_next).sqrt());
        for (yv, x0v) in y.data_mut().iter_mut().zip(x0.data()) {
            let eps = (*yv - sa * x0v) / sn;
            *yv = sa_next * x0v + sn_next * eps;
        }
    }
    if !x0.is_finite() {
        return Err(Error::NonFinite("ddim_sample"));
    }
    Ok(x0)
}

/// `samples` independent DDIM chains; chain `s` draws its start noise from
/// `Rng::new(seed).split(s)`, so the result does not depend on scheduling.
pub fn sample_many<M: Denoiser + Sync + ?Sized>(
    model: &M,
    x: &Tensor,
    samples: usize,
    steps: usize,
    sched: &DiffusionSchedule,
    scale: f64,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let root = Rng::new(seed);
    (0..samples)
        .into_par_iter()
        .map(|s| ddim_sample(model, x, steps, sched, scale, &mut root.split(s as u64)))
        .collect()
}
