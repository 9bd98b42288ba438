use manta_core::gradcheck::{finite_difference_gradient, max_relative_error};
use manta_core::network::{
    bssl_forward, manta_block_forward, sinusoid, Denoiser, Generator, GeneratorConfig,
};
use manta_core::ssm::ZohForm;
use manta_core::{Rng, Tape, Tensor};

fn config(blocks: usize, bidir: usize, dm: usize) -> GeneratorConfig {
    GeneratorConfig {
        n_blocks: blocks,
        model_dim: dm,
        state_size: 4,
        n_classes: 5,
        feat_dim: 3,
        bidirectional_blocks: bidir,
        ..GeneratorConfig::default()
    }
}

fn flip_rows(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let data = (0..r).rev().flat_map(|i| x.data()[i * c..(i + 1) * c].to_vec()).collect();
    Tensor::from_vec(&[r, c], data).unwrap()
}

#[test]
fn bssl_preserves_shape() {
    let g = Generator::new(config(1, 1, 8), &mut Rng::new(1)).unwrap();
    let p = g.params().blocks[0].bssl;
    for t_len in [1, 7, 128] {
        let x = Tensor::randn(&[t_len, 8], &mut Rng::new(t_len as u64), 0.0, 1.0).unwrap();
        let mut tape = Tape::no_grad();
        let bound = g.store().bind(&mut tape);
        let xv = tape.constant(x);
        let y = bssl_forward(&mut tape, &bound, xv, &p, ZohForm::Exact).unwrap();
        assert_eq!(tape.value(y).shape(), &[t_len, 8]);
    }
}

#[test]
fn bssl_zero_input_gives_zero_output() {
    let g = Generator::new(config(1, 1, 8), &mut Rng::new(2)).unwrap();
    let p = g.params().blocks[0].bssl;
    let mut tape = Tape::no_grad();
    let bound = g.store().bind(&mut tape);
    let xv = tape.constant(Tensor::zeros(&[6, 8]).unwrap());
    let y = bssl_forward(&mut tape, &bound, xv, &p, ZohForm::Exact).unwrap();
    assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn swapping_branches_commutes_with_time_reversal() {
    for seed in 0..10 {
        for selective in [true, false] {
            let cfg = GeneratorConfig { selective, ..config(1, 1, 8) };
            let g = Generator::new(cfg, &mut Rng::new(seed)).unwrap();
            let p = g.params().blocks[0].bssl;
            let x = Tensor::randn(&[13, 8], &mut Rng::new(100 + seed), 0.0, 1.0).unwrap();
            let run = |p, x: Tensor| {
                let mut tape = Tape::no_grad();
                let bound = g.store().bind(&mut tape);
                let xv = tape.constant(x);
                let y = bssl_forward(&mut tape, &bound, xv, &p, ZohForm::Exact).unwrap();
                tape.value(y).clone()
            };
            let direct = flip_rows(&run(p, x.clone()));
            let swapped = run(p.swapped(), flip_rows(&x));
            assert!(direct.max_abs_diff(&swapped).unwrap() <= 1e-10);
        }
    }
}

#[test]
fn unidirectional_generator_is_causal() {
    let g = Generator::new(config(3, 0, 8), &mut Rng::new(3)).unwrap();
    let mut rng = Rng::new(4);
    let y = Tensor::randn(&[12, 5], &mut rng, 0.0, 1.0).unwrap();
    let x = Tensor::randn(&[12, 3], &mut rng, 0.0, 1.0).unwrap();
    let base = g.denoise(&y, 17, &x).unwrap();
    for pos in 0..12 {
        let (mut y2, mut x2) = (y.clone(), x.clone());
        y2.data_mut()[pos * 5 + 1] += 3.0;
        x2.data_mut()[pos * 3] -= 2.0;
        let out = g.denoise(&y2, 17, &x2).unwrap();
        assert_eq!(&out.data()[..pos * 5], &base.data()[..pos * 5], "position {pos}");
        assert_ne!(&out.data()[pos * 5..(pos + 1) * 5], &base.data()[pos * 5..(pos + 1) * 5]);
    }
}

#[test]
fn bidirectional_generator_sees_the_future() {
    let g = Generator::new(config(2, 1, 8), &mut Rng::new(3)).unwrap();
    let mut rng = Rng::new(4);
    let y = Tensor::randn(&[8, 5], &mut rng, 0.0, 1.0).unwrap();
    let x = Tensor::randn(&[8, 3], &mut rng, 0.0, 1.0).unwrap();
    let base = g.denoise(&y, 5, &x).unwrap();
    let mut x2 = x.clone();
    x2.data_mut()[7 * 3] += 1.0;
    let out = g.denoise(&y, 5, &x2).unwrap();
    assert_ne!(&out.data()[..5], &base.data()[..5]);
}

#[test]
fn zeroed_feed_forward_output_is_identity() {
    let mut g = Generator::new(config(2, 2, 8), &mut Rng::new(5)).unwrap();
    let block = g.params().blocks[1];
    for id in [block.ff_out_w, block.ff_out_b] {
        g.store_mut().get_mut(id).data_mut().fill(0.0);
    }
    let x = Tensor::randn(&[9, 8], &mut Rng::new(6), 0.0, 1.0).unwrap();
    let mut tape = Tape::no_grad();
    let bound = g.store().bind(&mut tape);
    let xv = tape.constant(x.clone());
    let y = manta_block_forward(&mut tape, &bound, xv, &block, ZohForm::Exact).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn stacked_blocks_preserve_shape() {
    let g = Generator::new(config(4, 2, 8), &mut Rng::new(7)).unwrap();
    let mut tape = Tape::no_grad();
    let bound = g.store().bind(&mut tape);
    let mut h = tape.constant(Tensor::randn(&[10, 8], &mut Rng::new(8), 0.0, 1.0).unwrap());
    for b in &g.params().blocks {
        h = manta_block_forward(&mut tape, &bound, h, b, ZohForm::Exact).unwrap();
        assert_eq!(tape.value(h).shape(), &[10, 8]);
    }
}

#[test]
fn raw_timestep_encodings_are_distinct() {
    let codes: Vec<Vec<f64>> = (0..=1000).map(|t| sinusoid(t, 1000, 64).unwrap().into_data()).collect();
    for i in 0..codes.len() {
        for j in i + 1..codes.len() {
            let d: f64 = codes[i].iter().zip(&codes[j]).map(|(a, b)| (a - b).abs()).sum();
            assert!(d > 1e-6, "t={i} and t={j} collide");
        }
    }
}

#[test]
fn timestep_embedding_at_zero_is_mlp_of_alternating_pattern() {
    let g = Generator::new(config(0, 0, 8), &mut Rng::new(9)).unwrap();
    let p = g.params();
    let mut tape = Tape::no_grad();
    let bound = g.store().bind(&mut tape);
    let e = g.timestep_embedding(&mut tape, &bound, 0).unwrap();
    let emb = tape.value(e).clone();
    let again = g.timestep_embedding(&mut tape, &bound, 0).unwrap();
    assert_eq!(tape.value(again), &emb);
    // hand evaluation of the two-layer MLP on [0,1,0,1,...]
    let raw: Vec<f64> = (0..8).map(|i| (i % 2) as f64).collect();
    let w1 = g.store().get(p.emb_w1);
    let w2 = g.store().get(p.emb_w2);
    let hidden: Vec<f64> = (0..8)
        .map(|j| {
            let z: f64 = (0..8).map(|i| raw[i] * w1.data()[i * 8 + j]).sum::<f64>() + g.store().get(p.emb_b1).data()[j];
            z / (1.0 + (-z).exp())
        })
        .collect();
    for j in 0..8 {
        let z: f64 = (0..8).map(|i| hidden[i] * w2.data()[i * 8 + j]).sum::<f64>() + g.store().get(p.emb_b2).data()[j];
        assert!((z - emb.data()[j]).abs() <= 1e-12);
    }
    assert!(g.timestep_embedding(&mut tape, &bound, 1001).is_err());
}

#[test]
fn generator_output_shape_and_purity() {
    let cfg = GeneratorConfig { n_classes: 5, ..config(2, 2, 8) };
    let g = Generator::new(cfg, &mut Rng::new(10)).unwrap();
    let mut rng = Rng::new(11);
    let y = Tensor::randn(&[50, 5], &mut rng, 0.0, 1.0).unwrap();
    let x = Tensor::randn(&[50, 3], &mut rng, 0.0, 1.0).unwrap();
    let a = g.denoise(&y, 300, &x).unwrap();
    assert_eq!(a.shape(), &[50, 5]);
    assert_eq!(a, g.denoise(&y, 300, &x).unwrap());
}

#[test]
fn zero_blocks_is_head_of_projection() {
    let g = Generator::new(config(0, 0, 8), &mut Rng::new(12)).unwrap();
    let mut rng = Rng::new(13);
    let y = Tensor::randn(&[4, 5], &mut rng, 0.0, 1.0).unwrap();
    let x = Tensor::randn(&[4, 3], &mut rng, 0.0, 1.0).unwrap();
    let out = g.denoise(&y, 3, &x).unwrap();
    assert!(out.is_finite());
    assert_eq!(out.shape(), &[4, 5]);
}

#[test]
fn sharing_branches_reduces_parameters() {
    let separate = Generator::new(config(3, 3, 8), &mut Rng::new(14)).unwrap();
    let shared_cfg = GeneratorConfig { share_branch_weights: true, ..config(3, 3, 8) };
    let shared = Generator::new(shared_cfg, &mut Rng::new(14)).unwrap();
    assert!(shared.num_parameters() < separate.num_parameters());
    let mut rng = Rng::new(15);
    let y = Tensor::randn(&[6, 5], &mut rng, 0.0, 1.0).unwrap();
    let x = Tensor::randn(&[6, 3], &mut rng, 0.0, 1.0).unwrap();
    assert_eq!(
        shared.denoise(&y, 1, &x).unwrap().shape(),
        separate.denoise(&y, 1, &x).unwrap().shape()
    );
}

#[test]
fn generator_gradients_match_finite_differences() {
    for (selective, share) in [(true, false), (false, true)] {
        let cfg = GeneratorConfig { selective, share_branch_weights: share, ..config(2, 1, 16) };
        let g = Generator::new(cfg, &mut Rng::new(16)).unwrap();
        let mut rng = Rng::new(17);
        let y = Tensor::randn(&[5, 5], &mut rng, 0.0, 1.0).unwrap();
        let x = Tensor::randn(&[5, 3], &mut rng, 0.0, 1.0).unwrap();
        let w = Tensor::randn(&[5, 5], &mut rng, 0.0, 1.0).unwrap();
        let loss_of = |g: &Generator| -> (f64, Tape, manta_core::Bound) {
            let mut tape = Tape::new();
            let bound = g.store().bind(&mut tape);
            let out = g.forward(&mut tape, &bound, &y, 40, &x).unwrap();
            let wv = tape.constant(w.clone());
            let prod = tape.mul(out, wv).unwrap();
            let loss = tape.sum(prod).unwrap();
            let v = tape.value(loss).item().unwrap();
            tape.backward(loss).unwrap();
            (v, tape, bound)
        };
        let (_, tape, bound) = loss_of(&g);
        for id in g.store().ids() {
            let analytic = tape.grad(bound.var(id)).unwrap();
            let numeric = finite_difference_gradient(
                |t| {
                    let mut g2 = g.clone();
                    *g2.store_mut().get_mut(id) = t.clone();
                    Ok(loss_of(&g2).0)
                },
                g.store().get(id),
                1e-5,
            )
            .unwrap();
            let (err, at) = max_relative_error(&analytic, &numeric);
            assert!(
                err <= 1e-3,
                "{}[{at}]: analytic {} numeric {} rel {err:.2e}",
                g.store().name(id),
                analytic.data()[at],
                numeric.data()[at]
            );
        }
    }
}
