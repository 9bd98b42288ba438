//! Central finite differences, used as the independent oracle for every
//! reverse-mode gradient in the crate.

use crate::error::Result;
use crate::network::Generator;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i` of `x`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = vec![0.0; x.numel()];
    for (i, g) in out.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        *g = (up - down) / (2.0 * h);
    }
    Tensor::from_vec(x.shape(), out)
}

/// Floor on the denominator of [`relative_error`].
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Worst relative error between two gradient tensors, with its flat index.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> (f64, usize) {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| relative_error(*a, *b))
        .enumerate()
        .fold((0.0, 0), |(best, bi), (i, e)| if e > best { (e, i) } else { (best, bi) })
}

/// Worst finite-difference disagreement for one named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare reverse-mode gradients of `sum(w ⊙ G(Y_t, t, X))` for random
/// `Y_t`, `X`, `w` of `len` frames against central differences with step
/// `h`, for every parameter of `gen`.
pub fn check_generator(gen: &Generator, len: usize, t: usize, h: f64, seed: u64) -> Result<Vec<ParamCheck>> {
    let cfg = gen.config();
    let mut rng = Rng::new(seed);
    let y = Tensor::randn(&[len, cfg.n_classes], &mut rng, 0.0, 1.0)?;
    let x = Tensor::randn(&[len, cfg.feat_dim], &mut rng, 0.0, 1.0)?;
    let w = Tensor::randn(&[len, cfg.n_classes], &mut rng, 0.0, 1.0)?;
    let loss_of = |g: &Generator, grad: bool| -> Result<(f64, Tape, crate::Bound)> {
        let mut tape = Tape::new().with_kernel(g.kernel());
        let bound = g.store().bind(&mut tape);
        let out = g.forward(&mut tape, &bound, &y, t, &x)?;
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv)?;
        let loss = tape.sum(prod)?;
        let v = tape.value(loss).item()?;
        if grad {
            tape.backward(loss)?;
        }
        Ok((v, tape, bound))
    };
    let (_, tape, bound) = loss_of(gen, true)?;
    let mut probe = gen.clone();
    let mut out = Vec::with_capacity(gen.store().len());
    for id in gen.store().ids() {
        let analytic = match tape.grad(bound.var(id)) {
            Some(g) => g,
            None => Tensor::zeros(gen.store().get(id).shape())?,
        };
        let numeric = finite_difference_gradient(
            |v| {
                *probe.store_mut().get_mut(id) = v.clone();
                Ok(loss_of(&probe, false)?.0)
            },
            gen.store().get(id),
            h,
        )?;
        *probe.store_mut().get_mut(id) = gen.store().get(id).clone();
        let (err, at) = max_relative_error(&analytic, &numeric);
        out.push(ParamCheck {
            name: gen.store().name(id).to_string(),
            max_rel_err: err,
            analytic: analytic.data()[at],
            numeric: numeric.data()[at],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::from_vec(&[3], vec![0.3, -2.0, 5.0]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.data().iter().sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_for_quadratics() {
        let x = Tensor::scalar(3.0);
        let g = finite_difference_gradient(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }
}
