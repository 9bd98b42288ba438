use std::io::Cursor;

use manta_core::data::*;
use manta_core::error::Error;
use manta_core::tensor::Tensor;
use proptest::prelude::*;

#[test]
fn default_grammar_is_valid_and_sized() {
    let spec = GrammarSpec::default();
    spec.validate().unwrap();
    let eps = grammar_generate(&spec, 300, 1).unwrap();
    let mut counts = Vec::new();
    for e in &eps {
        assert!((200..=600).contains(&e.len()));
        assert_eq!(e.features.shape(), &[e.len(), 16]);
        counts.push(e.segments().len());
    }
    let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    assert!(*counts.iter().min().unwrap() >= 2, "{counts:?}");
    assert!(*counts.iter().max().unwrap() <= 12, "{counts:?}");
    assert!((3.0..=10.0).contains(&mean), "mean segments {mean}");
}

#[test]
fn segments_partition_each_episode() {
    let mut spec = GrammarSpec::default();
    // self-loops make consecutive draws of one class, which must merge
    for (c, row) in spec.transition.iter_mut().enumerate() {
        row.iter_mut().for_each(|p| *p *= 0.5);
        row[c] += 0.5;
    }
    for e in grammar_generate(&spec, 100, 3).unwrap() {
        let segs = e.segments();
        assert_eq!(segs.iter().map(|s| s.2).sum::<usize>(), e.len());
        for w in segs.windows(2) {
            assert_ne!(w[0].0, w[1].0);
            assert_eq!(w[0].1 + w[0].2, w[1].1);
        }
        for i in 1..e.len() {
            let boundary = segs.iter().any(|s| s.1 == i);
            assert_eq!(boundary, e.labels[i] != e.labels[i - 1]);
        }
    }
}

#[test]
fn identity_transitions_give_single_class_episodes() {
    let mut spec = GrammarSpec::default();
    for (c, row) in spec.transition.iter_mut().enumerate() {
        row.iter_mut().for_each(|p| *p = 0.0);
        row[c] = 1.0;
    }
    for e in grammar_generate(&spec, 50, 5).unwrap() {
        assert_eq!(e.segments().len(), 1);
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let spec = GrammarSpec::default();
    assert_eq!(grammar_generate(&spec, 20, 13).unwrap(), grammar_generate(&spec, 20, 13).unwrap());
    assert_ne!(grammar_generate(&spec, 20, 13).unwrap(), grammar_generate(&spec, 20, 14).unwrap());
    let long = grammar_generate(&spec, 20, 13).unwrap();
    assert_eq!(grammar_generate(&spec, 5, 13).unwrap()[..], long[..5]);
}

/// Least-squares linear classifier on one-hot targets, solved through the
/// normal equations with a bias column.
fn linear_probe_accuracy(x: &[Vec<f64>], y: &[usize], n_c: usize) -> f64 {
    let d = x[0].len() + 1;
    let row = |v: &Vec<f64>| v.iter().copied().chain(std::iter::once(1.0)).collect::<Vec<_>>();
    let mut xtx = vec![vec![0.0; d]; d];
    let mut xty = vec![vec![0.0; n_c]; d];
    for (v, &l) in x.iter().zip(y) {
        let r = row(v);
        for i in 0..d {
            for j in 0..d {
                xtx[i][j] += r[i] * r[j];
            }
            xty[i][l] += r[i];
        }
    }
    for (i, r) in xtx.iter_mut().enumerate() {
        r[i] += 1e-9;
    }
    // Gauss-Jordan with partial pivoting on [XᵀX | XᵀY]
    let mut m: Vec<Vec<f64>> = xtx.into_iter().zip(xty).map(|(a, b)| a.into_iter().chain(b).collect()).collect();
    for col in 0..d {
        let piv = (col..d).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap();
        m.swap(col, piv);
        let p = m[col][col];
        m[col].iter_mut().for_each(|v| *v /= p);
        for r in 0..d {
            if r != col {
                let f = m[r][col];
                let pivot_row = m[col].clone();
                m[r].iter_mut().zip(pivot_row).for_each(|(v, pv)| *v -= f * pv);
            }
        }
    }
    let w: Vec<&[f64]> = m.iter().map(|r| &r[d..]).collect();
    let correct = x
        .iter()
        .zip(y)
        .filter(|(v, &l)| {
            let r = row(v);
            let scores: Vec<f64> = (0..n_c).map(|c| (0..d).map(|i| r[i] * w[i][c]).sum()).collect();
            let best = (0..n_c).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
            best == l
        })
        .count();
    correct as f64 / y.len() as f64
}

#[test]
fn noiseless_features_are_linearly_separable() {
    let spec = GrammarSpec { feature_noise: 0.0, ..GrammarSpec::default() };
    let eps = grammar_generate(&spec, 10, 2).unwrap();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for e in &eps {
        for (i, &l) in e.labels.iter().enumerate() {
            let row = e.features.data()[i * 16..(i + 1) * 16].to_vec();
            assert_eq!(row, spec.prototypes.data()[l * 16..(l + 1) * 16]);
            x.push(row);
            y.push(l);
        }
    }
    assert_eq!(linear_probe_accuracy(&x, &y, 8), 1.0);
}

#[test]
fn recipe_grammar_remembers_the_opening() {
    let spec = GrammarSpec::recipes(3, 16).unwrap();
    assert_eq!(spec.n_classes, 7);
    for e in grammar_generate(&spec, 100, 4).unwrap() {
        let segs = e.segments();
        for w in segs.windows(3) {
            if w[1].0 == 3 && w[0].0 < 3 {
                assert_eq!(w[2].0, 4 + w[0].0);
            }
        }
    }
}

#[test]
fn episode_roundtrip_is_bit_exact_on_1000_episodes() {
    let spec = GrammarSpec { n_frames: (1, 60), ..GrammarSpec::default() };
    let dir = tempfile::tempdir().unwrap();
    for e in grammar_generate(&spec, 1000, 21).unwrap() {
        let path = dir.path().join(format!("{}.mntae", e.id));
        save_episode(&path, &e).unwrap();
        let back = load_episode(&path).unwrap();
        assert_eq!(back.labels, e.labels);
        assert_eq!(back.id, e.id);
        assert_eq!(back.n_classes, e.n_classes);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.features), bits(&e.features));
    }
}

fn encoded(e: &Episode) -> Vec<u8> {
    let mut buf = Vec::new();
    write_episode(&mut buf, e).unwrap();
    buf
}

#[test]
fn layout_matches_documented_format() {
    let e = Episode::new("x", 3, vec![2, 0], Tensor::from_vec(&[2, 1], vec![1.5, -0.25]).unwrap()).unwrap();
    let mut want = b"MNTAE".to_vec();
    for v in [1u32, 2, 3, 1, 2, 0] {
        want.extend_from_slice(&v.to_le_bytes());
    }
    want.extend_from_slice(&1.5f64.to_le_bytes());
    want.extend_from_slice(&(-0.25f64).to_le_bytes());
    assert_eq!(encoded(&e), want);
}

#[test]
fn corrupt_files_are_reported_with_offsets() {
    let e = grammar_generate(&GrammarSpec::default(), 1, 0).unwrap().remove(0);
    let buf = encoded(&e);
    for cut in [0, 3, 7, 12, 21, 30, buf.len() - 1] {
        match read_episode(Cursor::new(&buf[..cut]), "t") {
            Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64, "cut {cut} offset {offset}"),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(read_episode(Cursor::new(&bad), "t"), Err(Error::Format { offset: 0, .. })));
    let mut bad = buf.clone();
    bad[5] = 2;
    assert!(matches!(read_episode(Cursor::new(&bad), "t"), Err(Error::Format { .. })));
    let mut bad = buf.clone();
    bad[21..25].copy_from_slice(&99u32.to_le_bytes());
    assert!(matches!(read_episode(Cursor::new(&bad), "t"), Err(Error::Format { offset: 21, .. })));
    let mut long = buf;
    long.push(0);
    assert!(matches!(read_episode(Cursor::new(&long), "t"), Err(Error::Format { .. })));
}

#[test]
fn header_only_file_is_invalid_shape() {
    let mut buf = b"MNTAE".to_vec();
    for v in [1u32, 0, 8, 16] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    assert!(matches!(read_episode(Cursor::new(&buf), "t"), Err(Error::InvalidShape(_))));
}

#[test]
fn corpus_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = GrammarSpec::default();
    let counts = [(Split::Train, 4), (Split::Val, 2), (Split::Test, 3)];
    let manifest = write_corpus(dir.path(), &spec, counts, 7).unwrap();
    let entries = read_manifest(&manifest).unwrap();
    assert_eq!(entries.len(), 9);
    let text = std::fs::read_to_string(&manifest).unwrap();
    assert!(text.lines().all(|l| l.split('\t').count() == 2));
    let train = load_split(&manifest, Split::Train).unwrap();
    let test = load_split(&manifest, Split::Test).unwrap();
    assert_eq!((train.len(), test.len()), (4, 3));
    assert_ne!(train[0].labels, test[0].labels);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn window_is_pure_and_consistent(seed in 0u64..1000, ai in 0usize..2, bi in 0usize..4) {
        let alpha = [0.2, 0.3][ai];
        let beta = [0.1, 0.2, 0.3, 0.5][bi];
        let e = grammar_generate(&GrammarSpec::default(), 1, seed).unwrap().remove(0);
        let before = e.clone();
        let w = window(&e, alpha, beta).unwrap();
        prop_assert_eq!(&e, &before);
        prop_assert_eq!(&w, &window(&e, alpha, beta).unwrap());
        let n = e.len();
        prop_assert_eq!(w.observed_len, (alpha * n as f64 + 1e-9).floor() as usize);
        prop_assert!(w.observed_len + w.future_len <= n);
        prop_assert_eq!(&w.target_labels[..], &e.labels[..w.observed_len + w.future_len]);
        prop_assert_eq!(w.observed.data(), &e.features.data()[..w.observed_len * 16]);
    }
}
