use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectra_numerics::{grad_check, GradCheckConfig, Graph, NumericsError, Padding, ParamStore, Tensor, MASKED};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn matmul_by_identity_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 4]);
    let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let va = g.constant(a.clone()).unwrap();
    let vi = g.constant(eye).unwrap();
    let out = g.matmul(va, vi).unwrap();
    assert_eq!(g.value(out), &a);
}

#[test]
fn gelu_at_zero_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 1])).unwrap();
    let y = g.gelu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0]);
}

#[test]
fn softmax_of_uniform_logits_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 4], 0.7)).unwrap();
    let y = g.softmax(x, None).unwrap();
    assert_eq!(g.value(y).data(), &[0.25; 4]);
}

#[test]
fn masked_softmax_zeroes_masked_entries() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 0.5, 0.5, 9.0]).unwrap()).unwrap();
    let mask = Tensor::from_f64(&[2, 3], &[0.0, 0.0, MASKED, 0.0, 0.0, MASKED]).unwrap();
    let y = g.softmax(x, Some(&mask)).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[2], 0.0);
    assert_eq!(v[5], 0.0);
    assert!((v[3] - 0.5).abs() < 1e-15);
    let full = Tensor::full(&[2, 3], MASKED);
    assert!(g.softmax(x, Some(&full)).is_err());
}

#[test]
fn cross_entropy_of_uniform_logits_is_ln4() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 4])).unwrap();
    let l = g.cross_entropy(x, &[2]).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    assert!((g.value(l).item() - 1.386294).abs() < 1e-6);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[4, 5])).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![4, 5]
        }
    );
    assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 5]"));
    assert!(g.add(a, b).is_err());
}

#[test]
fn non_finite_results_are_errors() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::full(&[1, 2], 1e30)).unwrap();
    let err = g.mul(a, a).unwrap_err();
    assert_eq!(err, NumericsError::NonFinite { op: "mul" });
    assert!(g.constant(Tensor::full(&[1], f32::NAN)).is_err());
}

#[test]
fn layer_norm_of_constant_row_is_the_shift() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[2, 5], 3.25)).unwrap();
    let gamma = g.constant(Tensor::full(&[5], 2.0)).unwrap();
    let beta = g.constant(Tensor::from_f64(&[5], &[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap()).unwrap();
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert_eq!(g.value(y).row(1), &[0.1, 0.2, 0.3, 0.4, 0.5]);
}

#[test]
fn conv_output_lengths_follow_padding_mode() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[23, 2])).unwrap();
    let w = g.constant(Tensor::zeros(&[4, 1, 5])).unwrap();
    let valid = g.conv1d(x, w, None, 3, 2, Padding::Valid).unwrap();
    assert_eq!(g.shape(valid), &[(23 - 5) / 3 + 1, 4]);
    let same = g.conv1d(x, w, None, 1, 2, Padding::Same).unwrap();
    assert_eq!(g.shape(same), &[23, 4]);
    let short = g.constant(Tensor::zeros(&[4, 2])).unwrap();
    assert!(g.conv1d(short, w, None, 1, 2, Padding::Valid).is_err());
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (len, cin, cout, k, stride, groups) = (11, 4, 6, 3, 2, 2);
    let x = random(&mut rng, &[len, cin]);
    let w = random(&mut rng, &[cout, cin / groups, k]);
    let b = random(&mut rng, &[cout]);
    let mut g = Graph::new();
    let (vx, vw, vb) = (g.constant(x.clone()).unwrap(), g.constant(w.clone()).unwrap(), g.constant(b.clone()).unwrap());
    let y = g.conv1d(vx, vw, Some(vb), stride, groups, Padding::Valid).unwrap();
    let out_len = (len - k) / stride + 1;
    for t in 0..out_len {
        for o in 0..cout {
            let grp = o / (cout / groups);
            let mut acc = b.data()[o];
            for c in 0..cin / groups {
                for kk in 0..k {
                    acc += w.data()[(o * (cin / groups) + c) * k + kk] * x.data()[(t * stride + kk) * cin + grp * (cin / groups) + c];
                }
            }
            assert!((g.value(y).data()[t * cout + o] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn sum_of_squares_gradient_is_2v() {
    let mut store = ParamStore::<f64>::new();
    let v = store.add("v", Tensor::from_f64(&[3], &[0.5, -1.25, 2.0]).unwrap());
    let report = grad_check(
        &mut store,
        |g, s| {
            let x = g.param(s, v);
            let sq = g.mul(x, x)?;
            g.sum(sq)
        },
        GradCheckConfig::default(),
    )
    .unwrap();
    assert_eq!(store.get(v).grad.data(), &[1.0, -2.5, 4.0]);
    assert!(report.max_relative_error < 1e-8, "{report:?}");
}

#[test]
fn grad_check_rejects_non_finite_loss() {
    let mut store = ParamStore::<f64>::new();
    let v = store.add("v", Tensor::from_f64(&[1, 1], &[1e200]).unwrap());
    let res = grad_check(
        &mut store,
        |g, s| {
            let x = g.param(s, v);
            let sq = g.mul(x, x)?;
            g.sum(sq)
        },
        GradCheckConfig::default(),
    );
    assert!(res.is_err());
}

/// Every differentiable op, checked against central differences on random
/// inputs at 64-bit precision.
#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", random(&mut rng, &[3, 4]));
    let b = store.add("b", random(&mut rng, &[4, 5]));
    let c = store.add("c", random(&mut rng, &[3, 4]));
    let bias = store.add("bias", random(&mut rng, &[4]));
    let gamma = store.add("gamma", random(&mut rng, &[4]));
    let beta = store.add("beta", random(&mut rng, &[4]));
    let table = store.add("table", random(&mut rng, &[6, 4]));
    let wave = store.add("wave", random(&mut rng, &[13, 4]));
    let kern = store.add("kern", random(&mut rng, &[6, 2, 3]));
    let kb = store.add("kb", random(&mut rng, &[6]));
    let target = random(&mut rng, &[3, 5]);
    let mask = Tensor::from_f64(&[3, 5], &[0.0, 0.0, MASKED, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, MASKED, 0.0, MASKED, 0.0, 0.0, 0.0]).unwrap();

    let report = grad_check(
        &mut store,
        |g, s| {
            let (va, vb, vc) = (g.param(s, a), g.param(s, b), g.param(s, c));
            let sum = g.add(va, vc)?;
            let diff = g.sub(va, vc)?;
            let prod = g.mul(sum, diff)?;
            let vbias = g.param(s, bias);
            let biased = g.add_row(prod, vbias)?;
            let (vg, vbeta) = (g.param(s, gamma), g.param(s, beta));
            let normed = g.layer_norm(biased, vg, vbeta, 1e-5)?;
            let act = g.gelu(normed)?;
            let logits = g.matmul(act, vb)?;
            let probs = g.softmax(logits, Some(&mask))?;
            let l1 = g.mse(probs, &target)?;
            let l2 = g.cross_entropy(logits, &[0, 3, 4])?;
            let vt = g.param(s, table);
            let emb = g.gather_rows(vt, &[5, 0, 5, 2])?;
            let tr = g.transpose(emb)?;
            let tr2 = g.matmul(tr, emb)?;
            let l3 = g.mae(tr2, &Tensor::full(&[4, 4], 0.01))?;
            let (vw, vk, vkb) = (g.param(s, wave), g.param(s, kern), g.param(s, kb));
            let conv = g.conv1d(vw, vk, Some(vkb), 2, 2, Padding::Valid)?;
            let conv_same = g.conv1d(vw, vk, None, 1, 2, Padding::Same)?;
            let part = g.slice_rows(conv, 1, 3)?;
            let part = g.slice_cols(part, 1, 4)?;
            let cols = g.slice_cols(conv_same, 2, 3)?;
            let stacked = g.concat_rows(&[part, emb])?;
            let sliced = g.slice_cols(stacked, 0, 4)?;
            let cat = g.concat_cols(&[sliced, sliced])?;
            let l4 = g.mean(cat)?;
            let sq = g.mul(cols, cols)?;
            let l5 = g.sum(sq)?;
            let l5 = g.scale(l5, 0.05)?;
            let total = g.add(l1, l2)?;
            let total = g.add(total, l3)?;
            let total = g.add(total, l4)?;
            g.add(total, l5)
        },
        GradCheckConfig::default(),
    )
    .unwrap();
    for p in &report.per_param {
        assert!(p.max_relative_error < 1e-4, "{p:?}");
    }
}

#[test]
fn forward_is_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_fn(&[8, 16], |_| rng.random_range(-1.0..1.0))).unwrap();
        let b = g.constant(Tensor::from_fn(&[16, 8], |_| rng.random_range(-1.0..1.0))).unwrap();
        let m = g.matmul(a, b).unwrap();
        let s = g.softmax(m, None).unwrap();
        g.value(s).clone()
    };
    let (x, y) = (run(), run());
    assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

proptest! {
    #[test]
    fn valid_conv_length_matches_stepwise_count(len in 1usize..200, kernel in 1usize..9, stride in 1usize..6) {
        // count window positions one by one
        let mut count = 0;
        let mut start = 0;
        while start + kernel <= len {
            count += 1;
            start += stride;
        }
        let got = Padding::Valid.output_len(len, kernel, stride);
        if count == 0 {
            prop_assert_eq!(got, None);
        } else {
            prop_assert_eq!(got, Some(count));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[rows, cols], |_| rng.random_range(-5.0..5.0))).unwrap();
        let y = g.softmax(x, None).unwrap();
        for r in 0..rows {
            let s: f64 = g.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
