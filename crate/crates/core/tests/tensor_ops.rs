mod common;

use cham::graph::Graph;
use cham::params::{Init, ParamSink};
use cham::{Error, ParamStore64, Tensor};
use common::randn;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn matmul_small_cases() {
    let mut g = Graph::<f64>::new();
    let id = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = g.constant(t(&[2, 2], &[2.0, -3.0, 5.0, 7.0]));
    let y = g.matmul(id, m).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, -3.0, 5.0, 7.0]);

    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let y = g.matmul(a, b).unwrap();
    assert_eq!(g.value(y).data(), &[11.0]);

    let bad = g.constant(t(&[3, 1], &[0.0; 3]));
    assert!(matches!(g.matmul(a, bad), Err(Error::Shape { .. })));
}

#[test]
fn matmul_matches_triple_loop() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let (a, b) = (randn(&[3, 4], &mut r), randn(&[4, 2], &mut r));
        let mut g = Graph::<f64>::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = g.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
                assert!((g.value(y).data()[i * 2 + j] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv2d_time_lengths() {
    let mut r = rng(1);
    for stride in 1..=5 {
        for len in 1..=100 {
            let mut g = Graph::<f64>::new();
            let x = g.constant(randn(&[1, len, 3, 1], &mut r));
            let w = g.constant(randn(&[3, 3, 1, 2], &mut r));
            let y = g.conv2d(x, w, stride).unwrap();
            assert_eq!(g.shape(y), &[1, len.div_ceil(stride), 3, 2]);
        }
    }
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![1, 30, 4, 1]));
    let w = g.constant(Tensor::zeros(vec![3, 3, 1, 1]));
    assert_eq!(g.conv2d(x, w, 3).map(|y| g.shape(y)[1]).unwrap(), 10);
    let x = g.constant(Tensor::zeros(vec![1, 31, 4, 1]));
    assert_eq!(g.conv2d(x, w, 3).map(|y| g.shape(y)[1]).unwrap(), 11);
    let empty = g.constant(Tensor::zeros(vec![1, 0, 4, 1]));
    assert!(matches!(g.conv2d(empty, w, 1), Err(Error::EmptyInput(_))));
}

#[test]
fn pointwise_conv2d_mixes_channels_only() {
    let mut r = rng(2);
    let x = randn(&[2, 5, 3, 2], &mut r);
    // swap the two channels
    let mut g = Graph::<f64>::new();
    let vx = g.constant(x.clone());
    let w = g.constant(t(&[1, 1, 2, 2], &[0.0, 1.0, 1.0, 0.0]));
    let y = g.conv2d(vx, w, 1).unwrap();
    for (out, inp) in g.value(y).data().chunks(2).zip(x.data().chunks(2)) {
        assert_eq!(out, &[inp[1], inp[0]]);
    }
}

#[test]
fn transposed_conv_lengths_and_identity() {
    let mut r = rng(3);
    for stride in 1..=5 {
        for len in 1..=100 {
            let mut g = Graph::<f64>::new();
            let x = g.constant(randn(&[1, len, 2], &mut r));
            let w = g.constant(randn(&[stride, 2, 3], &mut r));
            let y = g.transposed_conv1d(x, w, stride).unwrap();
            assert_eq!(g.shape(y), &[1, len * stride, 3]);
        }
    }
    let x = randn(&[2, 4, 3], &mut r);
    let mut g = Graph::<f64>::new();
    let vx = g.constant(x.clone());
    let eye = g.constant(t(&[1, 3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    let y = g.transposed_conv1d(vx, eye, 1).unwrap();
    assert_eq!(g.value(y).data(), x.data());

    let k2 = g.constant(Tensor::zeros(vec![2, 3, 3]));
    assert!(matches!(g.transposed_conv1d(vx, k2, 3), Err(Error::Config(_))));
}

#[test]
fn transposed_conv_kernel_gradient_in_64_bit() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let inputs = [randn(&[2, 4, 3], &mut r), randn(&[3, 3, 2], &mut r)];
        let report = cham::gradcheck::check_inputs(&inputs, 1e-5, 1e-4, |g, v| {
            let y = g.transposed_conv1d(v[0], v[1], 3)?;
            let y = g.tanh(y);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}

fn sliding_window(x: &Tensor<f64>, w: &Tensor<f64>) -> Vec<f64> {
    let (b, len, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[0];
    let left = (k - 1) / 2;
    let mut out = vec![0.0; b * len * c];
    for bi in 0..b {
        for ti in 0..len {
            for ci in 0..c {
                let mut acc = 0.0;
                for j in 0..k {
                    let src = ti as isize + j as isize - left as isize;
                    if (0..len as isize).contains(&src) {
                        acc += w.data()[j * c + ci] * x.data()[(bi * len + src as usize) * c + ci];
                    }
                }
                out[(bi * len + ti) * c + ci] = acc;
            }
        }
    }
    out
}

#[test]
fn depthwise_conv_matches_sliding_window() {
    for (seed, k) in [1usize, 2, 3, 6, 8, 16, 32].into_iter().enumerate() {
        let mut r = rng(seed as u64);
        let x = randn(&[2, 20, 3], &mut r);
        let w = randn(&[k, 3], &mut r);
        let mut g = Graph::<f64>::new();
        let (vx, vw) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.depthwise_conv1d(vx, vw).unwrap();
        assert_eq!(g.shape(y), &[2, 20, 3], "k={k}");
        let oracle = sliding_window(&x, &w);
        for (a, b) in g.value(y).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "k={k}");
        }
    }
}

#[test]
fn depthwise_delta_kernel_is_identity() {
    let x = randn(&[1, 9, 4], &mut rng(4));
    for k in [3, 8] {
        let mut w = Tensor::zeros(vec![k, 4]);
        let centre = (k - 1) / 2;
        w.data_mut()[centre * 4..centre * 4 + 4].fill(1.0);
        let mut g = Graph::<f64>::new();
        let (vx, vw) = (g.constant(x.clone()), g.constant(w));
        let y = g.depthwise_conv1d(vx, vw).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }
}

#[test]
fn elementwise_spot_values() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let s = g.softmax(z);
    for &p in g.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let sw = g.swish(z);
    assert_eq!(g.value(sw).data(), &[0.0, 0.0, 0.0]);
    let x = g.constant(t(&[4], &[-2.0, -0.5, 0.5, 3.0]));
    let sw = g.swish(x);
    for (y, x) in g.value(sw).data().iter().zip([-2.0f64, -0.5, 0.5, 3.0]) {
        assert!((y - x / (1.0 + (-x).exp())).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_standardises_each_vector() {
    let x = randn(&[4, 7, 16], &mut rng(5));
    let mut g = Graph::<f64>::new();
    let v = g.constant(x.scale_for_test(3.0, 2.0));
    let y = g.layer_norm(v, 0.0);
    for row in g.value(y).data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-10);
    }
}

trait ScaleForTest {
    fn scale_for_test(&self, a: f64, b: f64) -> Self;
}

impl ScaleForTest for Tensor<f64> {
    fn scale_for_test(&self, a: f64, b: f64) -> Self {
        Tensor::new(self.shape().to_vec(), self.data().iter().map(|v| a * v + b).collect()).unwrap()
    }
}

#[test]
fn dropout_is_identity_in_eval_and_scaled_in_training() {
    let x = randn(&[50, 40], &mut rng(6));
    let mut g = Graph::<f64>::new();
    let v = g.constant(x.clone());
    let y = g.dropout(v, 0.3).unwrap();
    assert_eq!(g.value(y).data(), x.data());

    let mut g = Graph::training(rng(7));
    let v = g.constant(x.clone());
    let y = g.dropout(v, 0.3).unwrap();
    let mut dropped = 0;
    for (out, inp) in g.value(y).data().iter().zip(x.data()) {
        if *out == 0.0 {
            dropped += 1;
        } else {
            assert!((out - inp / 0.7).abs() < 1e-12);
        }
    }
    let frac = dropped as f64 / 2000.0;
    assert!((frac - 0.3).abs() < 0.05, "dropped {frac}");
}

#[test]
fn backward_basics() {
    let x = t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, -1.5]);
    let mut g = Graph::<f64>::new();
    let v = g.leaf(x.clone(), true);
    let s = g.sum(v);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(v).unwrap(), &[1.0; 6]);

    let mut g = Graph::<f64>::new();
    let v = g.leaf(x.clone(), true);
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    let twice: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(grads.get(v).unwrap(), &twice[..]);

    assert!(matches!(g.backward(sq), Err(Error::Contract(_))));
}

#[test]
fn shared_parameter_accumulates_both_uses() {
    let mut store = ParamStore64::new(3);
    let w = store.declare("w", &[3, 3], Init::Normal(1.0)).unwrap();
    let inputs = [randn(&[2, 3], &mut rng(8)), randn(&[2, 3], &mut rng(9))];
    let branch = |g: &mut Graph<f64>, store: &ParamStore64, x: &Tensor<f64>| {
        let wv = g.param(store, w);
        let xv = g.constant(x.clone());
        let y = g.matmul(xv, wv).unwrap();
        let y = g.tanh(y);
        g.sum(y)
    };

    let mut g = Graph::<f64>::new();
    let a = branch(&mut g, &store, &inputs[0]);
    let b = branch(&mut g, &store, &inputs[1]);
    let total = g.add(a, b).unwrap();
    let grads = g.backward(total).unwrap();
    store.zero_grads();
    store.accumulate(&g, &grads);
    let together = store.grad(w).to_vec();

    let mut separate = vec![0.0; 9];
    for x in &inputs {
        let mut g = Graph::<f64>::new();
        let l = branch(&mut g, &store, x);
        let grads = g.backward(l).unwrap();
        store.zero_grads();
        store.accumulate(&g, &grads);
        for (s, v) in separate.iter_mut().zip(store.grad(w)) {
            *s += v;
        }
    }
    for (a, b) in together.iter().zip(&separate) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn lstm_without_recurrence_is_framewise() {
    let gx = randn(&[2, 6, 12], &mut rng(10));
    let mut g = Graph::<f64>::new();
    let vx = g.constant(gx.clone());
    let u = g.constant(Tensor::zeros(vec![3, 12]));
    let fwd = g.lstm(vx, u, &[6, 4], false).unwrap();
    // with u = 0 the forward cell carries c_{t-1} only through the forget gate
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    for b in 0..2 {
        let len = [6, 4][b];
        let mut c = [0.0; 3];
        for ti in 0..6 {
            for j in 0..3 {
                let gate = &gx.data()[(b * 6 + ti) * 12..(b * 6 + ti + 1) * 12];
                let out = g.value(fwd).data()[(b * 6 + ti) * 3 + j];
                if ti >= len {
                    assert_eq!(out, 0.0);
                    continue;
                }
                c[j] = sig(gate[3 + j]) * c[j] + sig(gate[j]) * gate[6 + j].tanh();
                let h = sig(gate[9 + j]) * c[j].tanh();
                assert!((out - h).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn assert_finite_flags_inf() {
    assert!(Tensor::<f64>::zeros(vec![3]).assert_finite("z").is_ok());
    let bad = t(&[2], &[1.0, f64::INFINITY]);
    assert!(matches!(bad.assert_finite("bad"), Err(Error::NonFinite { index: 1, .. })));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_offsets(
        rows in proptest::collection::vec(proptest::collection::vec(-30.0f64..30.0, 5), 1..6),
        offset in -100.0f64..100.0,
    ) {
        let n = rows.len();
        let flat: Vec<f64> = rows.concat();
        let shifted: Vec<f64> = flat.iter().map(|v| v + offset).collect();
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[n, 5], &flat));
        let b = g.constant(t(&[n, 5], &shifted));
        let (sa, sb) = (g.softmax(a), g.softmax(b));
        for (ra, rb) in g.value(sa).data().chunks(5).zip(g.value(sb).data().chunks(5)) {
            prop_assert!((ra.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            for (x, y) in ra.iter().zip(rb) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conv_then_transposed_conv_restores_length(len in 1usize..120, factor in 1usize..6) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, len, 2, 1]));
        let w = g.constant(Tensor::zeros(vec![3, 3, 1, 1]));
        let y = g.conv2d(x, w, factor).unwrap();
        let down = g.shape(y)[1];
        let z = g.reshape(y, [1, down, 2]).unwrap();
        let k = g.constant(Tensor::zeros(vec![factor, 2, 2]));
        let up = g.transposed_conv1d(z, k, factor).unwrap();
        let cropped = g.crop_time(up, len).unwrap();
        prop_assert_eq!(g.shape(cropped)[1], len);
    }
}
