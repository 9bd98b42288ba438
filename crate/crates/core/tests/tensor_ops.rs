use manta_core::gradcheck::{finite_difference_gradient, max_relative_error};
use manta_core::ssm::{CoeffLayout, ZohForm};
use manta_core::{Result, Rng, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-3;

/// Reverse-mode vs central differences for `sum(op(inputs) ⊙ W)` with a
/// random weight `W`, for every input.
fn check_op<F>(name: &str, inputs: &[Tensor], rng: &mut Rng, op: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor], w: &Tensor| -> Result<(f64, Tape, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = op(&mut tape, &vars)?;
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv)?;
        let loss = tape.sum(prod)?;
        let value = tape.value(loss).item()?;
        tape.backward(loss)?;
        Ok((value, tape, vars))
    };
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let out = op(&mut tape, &vars).unwrap();
        tape.value(out).shape().to_vec()
    };
    let w = Tensor::randn(&out_shape, rng, 0.0, 1.0).unwrap();
    let (_, tape, vars) = eval(inputs, &w).unwrap();

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap();
        let numeric = finite_difference_gradient(
            |x| {
                let mut xs = inputs.to_vec();
                xs[i] = x.clone();
                Ok(eval(&xs, &w)?.0)
            },
            &inputs[i],
            H,
        )
        .unwrap();
        let (err, at) = max_relative_error(&analytic, &numeric);
        assert!(
            err <= TOL,
            "{name}: input {i} element {at}: analytic {} vs numeric {} (rel {err:.2e})",
            analytic.data()[at],
            numeric.data()[at]
        );
        worst = worst.max(err);
    }
    worst
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, rng, 0.0, 1.0).unwrap()
}

fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, rng, 0.05, 1.5).unwrap()
}

const INSTANCES: u64 = 20;

#[test]
fn matmul_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(seed);
        let inputs = [randn(&mut rng, &[3, 4]), randn(&mut rng, &[4, 2])];
        let err = check_op("matmul", &inputs, &mut rng, |t, v| t.matmul(v[0], v[1]));
        assert!(err <= 1e-6, "matmul rel err {err}");
    }
}

#[test]
fn batched_matmul_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(100 + seed);
        let inputs = [randn(&mut rng, &[2, 3, 4]), randn(&mut rng, &[4, 2])];
        check_op("bmm-shared", &inputs, &mut rng, |t, v| t.matmul(v[0], v[1]));
        let inputs = [randn(&mut rng, &[2, 3, 4]), randn(&mut rng, &[2, 4, 5])];
        check_op("bmm", &inputs, &mut rng, |t, v| t.matmul(v[0], v[1]));
    }
}

#[test]
fn elementwise_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(200 + seed);
        let inputs = [randn(&mut rng, &[4, 3]), randn(&mut rng, &[4, 3])];
        check_op("add", &inputs, &mut rng, |t, v| t.add(v[0], v[1]));
        check_op("mul", &inputs, &mut rng, |t, v| t.mul(v[0], v[1]));
        check_op("scale", &inputs[..1], &mut rng, |t, v| t.scale(v[0], -1.7));
        let bias_in = [randn(&mut rng, &[5, 3]), randn(&mut rng, &[3])];
        check_op("add_bias", &bias_in, &mut rng, |t, v| t.add_bias(v[0], v[1]));
        check_op("broadcast", &bias_in[1..], &mut rng, |t, v| t.broadcast_rows(v[0], 4));
        check_op("flip", &inputs[..1], &mut rng, |t, v| t.flip_time(v[0]));
    }
}

#[test]
fn activation_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(300 + seed);
        let x = [Tensor::randn(&[6, 2], &mut rng, 0.0, 2.0).unwrap()];
        check_op("silu", &x, &mut rng, |t, v| t.silu(v[0]));
        check_op("softplus", &x, &mut rng, |t, v| t.softplus(v[0]));
        check_op("exp", &x, &mut rng, |t, v| t.exp(v[0]));
        check_op("sigmoid", &x, &mut rng, |t, v| t.sigmoid(v[0]));
    }
}

#[test]
fn exp_gradient_at_one_is_e() {
    let x = Tensor::scalar(1.0);
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let y = tape.exp(v).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    let g = tape.grad(v).unwrap().data()[0];
    let fd = finite_difference_gradient(|t| Ok(t.data()[0].exp()), &x, H).unwrap();
    assert!((g - std::f64::consts::E).abs() < 1e-15);
    assert!((fd.data()[0] - g).abs() / g < 1e-9);
}

#[test]
fn conv_and_norm_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(400 + seed);
        let conv_in = [
            randn(&mut rng, &[7, 3]),
            randn(&mut rng, &[3, 3]),
            randn(&mut rng, &[3]),
        ];
        check_op("conv", &conv_in, &mut rng, |t, v| {
            t.depthwise_causal_conv1d(v[0], v[1], v[2])
        });
        let ln_in = [
            randn(&mut rng, &[5, 4]),
            randn(&mut rng, &[4]),
            randn(&mut rng, &[4]),
        ];
        check_op("layer_norm", &ln_in, &mut rng, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5));
    }
}

#[test]
fn mse_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(500 + seed);
        let inputs = [randn(&mut rng, &[3, 2]), randn(&mut rng, &[3, 2])];
        check_op("mse", &inputs, &mut rng, |t, v| t.mse(v[0], v[1]));
    }
}

#[test]
fn selective_scan_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = Rng::new(600 + seed);
        let (t_len, d, n) = (6, 3, 4);
        for (layout, form) in [
            (CoeffLayout::PerStep, ZohForm::Exact),
            (CoeffLayout::PerChannel, ZohForm::Exact),
            (CoeffLayout::PerStep, ZohForm::InverseExp),
        ] {
            let coeff_shape = match layout {
                CoeffLayout::PerStep => [t_len, n],
                CoeffLayout::PerChannel => [d, n],
            };
            let inputs = [
                randn(&mut rng, &[t_len, d]),
                positive(&mut rng, &[t_len, d]),
                Tensor::randn(&[d, n], &mut rng, 0.0, 0.7).unwrap(),
                randn(&mut rng, &coeff_shape),
                randn(&mut rng, &coeff_shape),
                randn(&mut rng, &[d]),
            ];
            check_op("selective_scan", &inputs, &mut rng, |t, v| {
                t.selective_scan(v[0], v[1], v[2], v[3], layout, v[4], layout, v[5], form)
            });
        }
    }
}

#[test]
fn selective_scan_gradients_near_series_branch() {
    // tiny steps exercise the series expansions of the adjoint
    let mut rng = Rng::new(77);
    let inputs = [
        randn(&mut rng, &[5, 2]),
        Tensor::uniform(&[5, 2], &mut rng, 1e-4, 3e-4).unwrap(),
        Tensor::randn(&[2, 3], &mut rng, 0.0, 0.5).unwrap(),
        randn(&mut rng, &[5, 3]),
        randn(&mut rng, &[5, 3]),
        randn(&mut rng, &[2]),
    ];
    check_op("scan-small-dt", &inputs, &mut rng, |t, v| {
        t.selective_scan(
            v[0],
            v[1],
            v[2],
            v[3],
            CoeffLayout::PerStep,
            v[4],
            CoeffLayout::PerStep,
            v[5],
            ZohForm::Exact,
        )
    });
}

#[test]
fn conv_matches_direct_summation() {
    let mut rng = Rng::new(5);
    let (t_len, d, k) = (5, 2, 3);
    let x = randn(&mut rng, &[t_len, d]);
    let w = randn(&mut rng, &[k, d]);
    let b = randn(&mut rng, &[d]);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.depthwise_causal_conv1d(xv, wv, bv).unwrap();
    for t in 0..t_len {
        for c in 0..d {
            let mut acc = b.data()[c];
            for j in 0..k {
                // tap j looks back k-1-j steps
                let lag = k - 1 - j;
                if t >= lag {
                    acc += w.data()[j * d + c] * x.data()[(t - lag) * d + c];
                }
            }
            assert!((tape.value(y).data()[t * d + c] - acc).abs() <= 1e-12);
        }
    }
}

#[test]
fn conv_is_causal() {
    let mut rng = Rng::new(9);
    let x = randn(&mut rng, &[10, 3]);
    let w = randn(&mut rng, &[3, 3]);
    let b = randn(&mut rng, &[3]);
    let run = |x: &Tensor| {
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.depthwise_causal_conv1d(xv, wv, bv).unwrap();
        tape.value(y).clone()
    };
    let base = run(&x);
    for t in 0..10 {
        let mut x2 = x.clone();
        for c in 0..3 {
            x2.data_mut()[t * 3 + c] += 5.0;
        }
        let y2 = run(&x2);
        assert_eq!(&base.data()[..t * 3], &y2.data()[..t * 3]);
    }
}

#[test]
fn layer_norm_statistics() {
    let mut rng = Rng::new(3);
    let x = Tensor::randn(&[8, 16], &mut rng, 2.0, 3.0).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::full(&[16], 1.0).unwrap());
    let s = tape.constant(Tensor::zeros(&[16]).unwrap());
    let y = tape.layer_norm(xv, g, s, 0.0).unwrap();
    for r in 0..8 {
        let row = tape.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() <= 1e-9);
        assert!((var - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn ops_are_bitwise_deterministic() {
    let run = || {
        let mut rng = Rng::new(42);
        let mut tape = Tape::new();
        let x = tape.param(randn(&mut rng, &[6, 4]));
        let w = tape.param(randn(&mut rng, &[4, 4]));
        let y = tape.matmul(x, w).unwrap();
        let y = tape.silu(y).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        (tape.value(y).clone(), tape.grad(w).unwrap())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}
