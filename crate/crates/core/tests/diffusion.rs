use std::sync::atomic::{AtomicUsize, Ordering};

use manta_core::diffusion::{
    ddim_sample, decode_labels, encode_labels, forward_noise, sample_many, training_step,
    DiffusionSchedule, ScheduleKind, TrainExample,
};
use manta_core::network::{Denoiser, Generator, GeneratorConfig};
use manta_core::optim::{adam_update, AdamConfig, AdamState};
use manta_core::{Result, Rng, Tensor};

/// Always answers with the same clean sequence and counts its calls.
struct Fixed {
    y: Tensor,
    calls: AtomicUsize,
}

impl Fixed {
    fn new(y: Tensor) -> Self {
        Self { y, calls: AtomicUsize::new(0) }
    }
}

impl Denoiser for Fixed {
    fn n_classes(&self) -> usize {
        self.y.cols()
    }

    fn denoise(&self, _y_t: &Tensor, _t: usize, _x: &Tensor) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(self.y.clone())
    }
}

/// Returns a fixed affine function of its noisy input, so different start
/// noise gives different samples.
struct Echo;

impl Denoiser for Echo {
    fn n_classes(&self) -> usize {
        3
    }

    fn denoise(&self, y_t: &Tensor, _t: usize, _x: &Tensor) -> Result<Tensor> {
        let data = y_t.data().iter().map(|v| 0.5 * v).collect();
        Tensor::from_vec(y_t.shape(), data)
    }
}

fn random_labels(rng: &mut Rng, len: usize, n_c: usize) -> Vec<usize> {
    (0..len).map(|_| rng.int_inclusive(0, n_c - 1)).collect()
}

#[test]
fn schedules_have_unit_start_and_decrease() {
    for steps in [4, 100, 1000] {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            let s = DiffusionSchedule::new(steps, kind).unwrap();
            let ab = s.alpha_bars();
            assert_eq!(ab.len(), steps + 1);
            assert_eq!(ab[0], 1.0);
            assert!(ab.windows(2).all(|w| w[1] < w[0]), "{kind} T={steps}");
            assert!(ab.iter().all(|v| *v > 0.0));
        }
        let cos = DiffusionSchedule::new(steps, ScheduleKind::Cosine).unwrap();
        assert!(cos.alpha_bar(steps).unwrap() < 1e-3);
    }
    let lin = DiffusionSchedule::new(1000, ScheduleKind::Linear).unwrap();
    assert!(lin.alpha_bar(1000).unwrap() < 1e-3);
}

#[test]
fn labels_roundtrip() {
    let mut rng = Rng::new(1);
    for _ in 0..50 {
        let labels = random_labels(&mut rng, 40, 7);
        let y = encode_labels(&labels, 7, 1.0).unwrap();
        assert_eq!(decode_labels(&y), labels);
        for r in 0..40 {
            assert_eq!(y.row(r).iter().filter(|v| **v == 1.0).count(), 1);
            assert_eq!(y.row(r).iter().filter(|v| **v == -1.0).count(), 6);
        }
    }
}

#[test]
fn noising_at_zero_is_identity() {
    let s = DiffusionSchedule::new(1000, ScheduleKind::Cosine).unwrap();
    let mut rng = Rng::new(2);
    let y0 = encode_labels(&random_labels(&mut rng, 30, 5), 5, 1.0).unwrap();
    let eps = Tensor::randn(&[30, 5], &mut rng, 0.0, 1.0).unwrap();
    assert_eq!(forward_noise(&y0, 0, &eps, &s).unwrap(), y0);
    let zero = Tensor::zeros(&[30, 5]).unwrap();
    let ab = s.alpha_bar(400).unwrap();
    let quiet = forward_noise(&y0, 400, &zero, &s).unwrap();
    for (q, y) in quiet.data().iter().zip(y0.data()) {
        assert_eq!(*q, ab.sqrt() * y);
    }
}

#[test]
fn noising_moments() {
    let s = DiffusionSchedule::new(1000, ScheduleKind::Cosine).unwrap();
    let mut rng = Rng::new(3);
    let y0 = Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap();
    let n = 10_000;
    for t in [1, 250, 500, 999] {
        let ab = s.alpha_bar(t).unwrap();
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let eps = Tensor::randn(&[1, 2], &mut rng, 0.0, 1.0).unwrap();
            let y = forward_noise(&y0, t, &eps, &s).unwrap();
            for j in 0..2 {
                sum[j] += y.data()[j];
                sq[j] += y.data()[j] * y.data()[j];
            }
        }
        let var_true = 1.0 - ab;
        for j in 0..2 {
            let mean = sum[j] / n as f64;
            let var = sq[j] / n as f64 - mean * mean;
            let mean_true = ab.sqrt() * y0.data()[j];
            assert!((mean - mean_true).abs() <= 3.0 * (var_true / n as f64).sqrt(), "t={t}");
            // standard error of the sample variance of a normal: σ²·√(2/n)
            assert!((var - var_true).abs() <= 3.0 * var_true * (2.0 / n as f64).sqrt(), "t={t}");
        }
    }
}

#[test]
fn oracle_denoiser_reconstructs_at_any_step_count() {
    for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
        let s = DiffusionSchedule::new(1000, kind).unwrap();
        let mut rng = Rng::new(4);
        let y0 = encode_labels(&random_labels(&mut rng, 25, 6), 6, 1.0).unwrap();
        let oracle = Fixed::new(y0.clone());
        let x = Tensor::zeros(&[25, 2]).unwrap();
        for d in [1, 2, 7, 10, 50, 333, 1000] {
            let out = ddim_sample(&oracle, &x, d, &s, 1.0, &mut Rng::new(d as u64)).unwrap();
            assert!(out.max_abs_diff(&y0).unwrap() <= 1e-9, "D={d}");
        }
    }
}

#[test]
fn constant_prediction_is_a_fixed_point() {
    let s = DiffusionSchedule::new(1000, ScheduleKind::Cosine).unwrap();
    let mut rng = Rng::new(5);
    let target = Tensor::uniform(&[12, 4], &mut rng, -0.9, 0.9).unwrap();
    let model = Fixed::new(target.clone());
    let x = Tensor::zeros(&[12, 3]).unwrap();
    for d in [1, 3, 20, 50] {
        let out = ddim_sample(&model, &x, d, &s, 1.0, &mut Rng::new(7)).unwrap();
        assert!(out.max_abs_diff(&target).unwrap() <= 1e-12);
    }
}

#[test]
fn single_step_is_one_clamped_call() {
    let s = DiffusionSchedule::new(1000, ScheduleKind::Cosine).unwrap();
    let mut rng = Rng::new(6);
    let wild = Tensor::randn(&[9, 4], &mut rng, 0.0, 3.0).unwrap();
    let model = Fixed::new(wild.clone());
    let x = Tensor::zeros(&[9, 2]).unwrap();
    let out = ddim_sample(&model, &x, 1, &s, 1.0, &mut Rng::new(8)).unwrap();
    assert_eq!(model.calls.load(Ordering::Relaxed), 1);
    let clamped: Vec<f64> = wild.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    assert_eq!(out.data(), &clamped[..]);

    let counter = Fixed::new(Tensor::zeros(&[9, 4]).unwrap());
    ddim_sample(&counter, &x, 50, &s, 1.0, &mut Rng::new(8)).unwrap();
    assert_eq!(counter.calls.load(Ordering::Relaxed), 50);
}

#[test]
fn single_step_feeds_start_noise_at_final_timestep() {
    let s = DiffusionSchedule::new(1000, ScheduleKind::Cosine).unwrap();
    let x = Tensor::zeros(&[6, 1]).unwrap();
    let out = ddim_sample(&Echo, &x, 1, &s, 1.0, &mut Rng::new(9)).unwrap();
    let start = Tensor::randn(&[6, 3], &mut Rng::new(9), 0.0, 1.0).unwrap();
    let want: Vec<f64> = start.data().iter().map(|v| (0.5 * v).clamp(-1.0, 1.0)).collect();
    assert_eq!(out.data(), &want[..]);
}

#[test]
fn sampling_is_seeded() {
    let s = DiffusionSchedule::new(100, ScheduleKind::Cosine).unwrap();
    let x = Tensor::zeros(&[10, 1]).unwrap();
    let a = sample_many(&Echo, &x, 4, 10, &s, 1.0, 21).unwrap();
    let b = sample_many(&Echo, &x, 4, 10, &s, 1.0, 21).unwrap();
    assert_eq!(a, b);
    let c = sample_many(&Echo, &x, 4, 10, &s, 1.0, 22).unwrap();
    assert_ne!(a, c);
    for i in 0..4 {
        for j in i + 1..4 {
            assert_ne!(a[i], a[j]);
        }
    }
    let one = sample_many(&Echo, &x, 1, 10, &s, 1.0, 21).unwrap();
    let direct = ddim_sample(&Echo, &x, 10, &s, 1.0, &mut Rng::new(21).split(0)).unwrap();
    assert_eq!(one, vec![direct]);
    // growing the pool keeps the earlier chains unchanged
    let more = sample_many(&Echo, &x, 6, 10, &s, 1.0, 21).unwrap();
    assert_eq!(&more[..4], &a[..]);
}

#[test]
fn step_count_above_schedule_rejected() {
    let s = DiffusionSchedule::new(10, ScheduleKind::Cosine).unwrap();
    let x = Tensor::zeros(&[3, 1]).unwrap();
    assert!(ddim_sample(&Echo, &x, 11, &s, 1.0, &mut Rng::new(0)).is_err());
}

fn tiny_generator(seed: u64) -> Generator {
    let cfg = GeneratorConfig {
        n_blocks: 2,
        model_dim: 16,
        state_size: 4,
        n_classes: 4,
        feat_dim: 3,
        bidirectional_blocks: 2,
        ..GeneratorConfig::default()
    };
    Generator::new(cfg, &mut Rng::new(seed)).unwrap()
}

#[test]
fn training_loss_is_nonnegative_and_deterministic() {
    let s = DiffusionSchedule::new(1000, ScheduleKind::Cosine).unwrap();
    let g = tiny_generator(1);
    let mut rng = Rng::new(2);
    let batch: Vec<TrainExample> = (0..3)
        .map(|_| TrainExample {
            y0: encode_labels(&random_labels(&mut rng, 15, 4), 4, 1.0).unwrap(),
            x: Tensor::randn(&[15, 3], &mut rng, 0.0, 1.0).unwrap(),
        })
        .collect();
    let (l1, g1) = training_step(&g, &batch, &s, &mut Rng::new(3)).unwrap();
    let (l2, g2) = training_step(&g, &batch, &s, &mut Rng::new(3)).unwrap();
    assert!(l1 >= 0.0);
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
    assert_eq!(g1.len(), g.store().len());
}

#[test]
fn overfits_a_single_episode() {
    let s = DiffusionSchedule::new(1000, ScheduleKind::Cosine).unwrap();
    let mut g = tiny_generator(4);
    let mut rng = Rng::new(5);
    let labels: Vec<usize> = [0; 8].into_iter().chain([2; 10]).chain([1; 7]).chain([3; 5]).collect();
    let ex = TrainExample {
        y0: encode_labels(&labels, 4, 1.0).unwrap(),
        x: Tensor::randn(&[labels.len(), 3], &mut rng, 0.0, 1.0).unwrap(),
    };
    let batch = vec![ex];
    let cfg = AdamConfig { lr: 3e-3, ..AdamConfig::default() };
    let mut state = AdamState::default();
    let mut recent = Vec::new();
    for step in 0..2000 {
        let (loss, grads) = training_step(&g, &batch, &s, &mut rng).unwrap();
        adam_update(g.store_mut().tensors_mut(), &grads, &mut state, &cfg).unwrap();
        if step >= 1900 {
            recent.push(loss);
        }
    }
    let mean = recent.iter().sum::<f64>() / recent.len() as f64;
    assert!(mean < 0.01, "late training loss {mean}");
}
