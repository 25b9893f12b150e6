use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_gradients;
use super::*;
use crate::error::Error;

const STEP: f64 = 1e-3;
const PRIMITIVE_TOL: f64 = 1e-4;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weigh(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = randn(&mut rng, g.shape(x));
    let w = g.constant(w);
    let y = g.mul(x, w).unwrap();
    g.sum(y)
}

fn assert_grad<F>(inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> crate::Result<Var>,
{
    let check = check_gradients(inputs, STEP, f).unwrap();
    let err = check.max_relative_error();
    assert!(err < PRIMITIVE_TOL, "relative error {err} ({check:?})");
}

#[test]
fn matmul_identity_and_projector() {
    let mut g = Graph::<f64>::new();
    let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let out = g.matmul(i2, m).unwrap();
    assert_eq!(g.data(out), &[1.0, 2.0, 3.0, 4.0]);

    let p = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
    let m = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let out = g.matmul(p, m).unwrap();
    assert_eq!(g.data(out), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, Error::Shape { .. }));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[4, 2]);
    assert_grad(&[a, b], |g, v| {
        let o = g.matmul(v[0], v[1])?;
        Ok(g.sum(o))
    });
}

#[test]
fn softmax_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[4], &[0.0; 4]));
    let y = g.softmax(x, 0).unwrap();
    for &p in g.data(y) {
        assert!((p - 0.25).abs() < 1e-12);
    }
    let x = g.constant(t(&[2], &[1000.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    assert!((g.data(y)[0] - 1.0).abs() < 1e-12);
    assert!(g.data(y)[1] < 1e-300 || g.data(y)[1] == 0.0);
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = randn(&mut rng, &[5]);
    assert_grad(&[x], |g, v| {
        let y = g.softmax(v[0], 0)?;
        Ok(weigh(g, y, 20))
    });
    let x = randn(&mut rng, &[3, 4, 2]);
    assert_grad(&[x], |g, v| {
        let y = g.softmax(v[0], 1)?;
        Ok(weigh(g, y, 21))
    });
}

#[test]
fn log_softmax_values_and_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 1000.0, 0.0, -1000.0]));
    let y = g.log_softmax(x).unwrap();
    let z = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
    for (a, b) in g.data(y)[..3].iter().zip([1.0 - z, 2.0 - z, 3.0 - z]) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(g.data(y)[3], 0.0);
    assert!(g.data(y).iter().all(|v| v.is_finite()));
    // A single-element row is exactly zero.
    let one = g.constant(t(&[1, 1], &[7.5]));
    let l = g.log_softmax(one).unwrap();
    assert_eq!(g.data(l), &[0.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(25);
    assert_grad(&[randn(&mut rng, &[3, 4])], |g, v| {
        let y = g.log_softmax(v[0])?;
        Ok(weigh(g, y, 26))
    });
}

#[test]
fn cross_entropy_values() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros(&[1, 4]));
    let l = g.cross_entropy(z, &[2]).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

    let z = g.constant(t(&[1, 2], &[10.0, -10.0]));
    let l = g.cross_entropy(z, &[0]).unwrap();
    assert!(g.value(l).item() < 1e-8);
}

#[test]
fn cross_entropy_rejects_out_of_range_label() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros(&[2, 3]));
    match g.cross_entropy(z, &[0, 3]) {
        Err(Error::Label { index, label, classes }) => {
            assert_eq!((index, label, classes), (1, 3, 3));
        }
        other => panic!("expected label error, got {other:?}"),
    }
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = randn(&mut rng, &[2, 3]);
    assert_grad(&[z], |g, v| g.cross_entropy(v[0], &[2, 0]));
}

#[test]
fn cosine_values() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let c = g.cosine_similarity(a, a).unwrap();
    assert!((g.value(c).item() - 1.0).abs() < 1e-12);
    let b = g.constant(t(&[3], &[2.0, -1.0, 0.0]));
    let c = g.cosine_similarity(a, b).unwrap();
    assert!(g.value(c).item().abs() < 1e-12);
    assert_eq!(g.degenerate_inputs(), 0);
}

#[test]
fn cosine_zero_norm_is_clamped_and_flagged() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::zeros(&[3]));
    let b = g.constant(t(&[3], &[1.0, 0.0, 0.0]));
    let c = g.cosine_similarity(a, b).unwrap();
    assert_eq!(g.value(c).item(), 0.0);
    assert_eq!(g.degenerate_inputs(), 1);
    g.backward(c).unwrap();
    assert!(g.grad(a).unwrap().iter().all(|x| x.is_finite()));
}

#[test]
fn cosine_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = randn(&mut rng, &[6]);
    let b = randn(&mut rng, &[6]);
    assert_grad(&[a, b], |g, v| g.cosine_similarity(v[0], v[1]));
    let a = randn(&mut rng, &[3, 5]);
    let b = randn(&mut rng, &[3, 5]);
    assert_grad(&[a, b], |g, v| {
        let c = g.cosine_similarity(v[0], v[1])?;
        Ok(weigh(g, c, 40))
    });
}

#[test]
fn backward_of_sum_and_mean_square() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f64));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let m = g.mean(sq);
    g.backward(m).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn backward_is_additive_and_zero_grad_resets() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::<f64>::new();
    let a = g.param(randn(&mut rng, &[3, 4]));
    let b = g.param(randn(&mut rng, &[4, 2]));
    let o = g.matmul(a, b).unwrap();
    let o = g.gelu(o);
    let l = g.mean(o);
    g.backward(l).unwrap();
    let once = g.grad(a).unwrap().to_vec();
    g.backward(l).unwrap();
    let twice = g.grad(a).unwrap().to_vec();
    for (x, y) in once.iter().zip(&twice) {
        assert_eq!(2.0 * x, *y);
    }
    g.zero_grad();
    assert!(g.grad(a).is_none());
}

#[test]
fn stop_gradient_keeps_value_and_blocks_flow() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[3], &[1.0, -2.0, 3.0]));
    let d = g.stop_gradient(x);
    assert_eq!(g.data(d), g.data(x));
    let y = g.mul(d, d).unwrap();
    let s = g.sum(y);
    let s2 = g.sum(x);
    let total = g.add(s, s2).unwrap();
    g.backward(total).unwrap();
    // Only the direct path contributes.
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn elementwise_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = randn(&mut rng, &[2, 3]);
    let b = randn(&mut rng, &[2, 3]);
    assert_grad(&[a.clone(), b.clone()], |g, v| {
        let y = g.add(v[0], v[1])?;
        Ok(weigh(g, y, 60))
    });
    assert_grad(&[a.clone(), b.clone()], |g, v| {
        let y = g.sub(v[0], v[1])?;
        Ok(weigh(g, y, 61))
    });
    assert_grad(&[a.clone(), b.clone()], |g, v| {
        let y = g.mul(v[0], v[1])?;
        Ok(weigh(g, y, 62))
    });
    assert_grad(&[a.clone()], |g, v| {
        let y = g.scale(v[0], -2.5);
        let y = g.add_scalar(y, 0.3);
        Ok(weigh(g, y, 63))
    });
    assert_grad(&[a.clone()], |g, v| {
        let y = g.exp(v[0]);
        Ok(weigh(g, y, 64))
    });
    let pos = Tensor::from_fn(&[2, 3], |i| 0.5 + i as f64 * 0.3);
    assert_grad(&[pos], |g, v| {
        let y = g.log(v[0]);
        Ok(weigh(g, y, 65))
    });
    // Keep inputs away from the kink at zero.
    let away = Tensor::from_fn(&[2, 3], |i| if i % 2 == 0 { 0.4 + i as f64 } else { -0.7 - i as f64 });
    assert_grad(&[away], |g, v| {
        let y = g.relu(v[0]);
        Ok(weigh(g, y, 66))
    });
    assert_grad(&[a.clone()], |g, v| {
        let y = g.gelu(v[0]);
        Ok(weigh(g, y, 67))
    });
}

#[test]
fn structural_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[2, 4]);
    let row = randn(&mut rng, &[4]);
    assert_grad(&[a.clone(), row], |g, v| {
        let y = g.add_row(v[0], v[1])?;
        Ok(weigh(g, y, 70))
    });
    assert_grad(&[a.clone()], |g, v| {
        let y = g.transpose(v[0])?;
        Ok(weigh(g, y, 71))
    });
    assert_grad(&[a.clone()], |g, v| {
        let y = g.reshape(v[0], &[2, 6])?;
        Ok(weigh(g, y, 72))
    });
    assert_grad(&[a.clone(), b.clone()], |g, v| {
        let y = g.concat(&[v[0], v[1], v[0]], 0)?;
        Ok(weigh(g, y, 73))
    });
    let c = randn(&mut rng, &[3, 2]);
    assert_grad(&[a.clone(), c], |g, v| {
        let y = g.concat(&[v[0], v[1]], 1)?;
        Ok(weigh(g, y, 74))
    });
    assert_grad(&[a.clone()], |g, v| {
        let y = g.slice(v[0], 1, 1, 2)?;
        Ok(weigh(g, y, 75))
    });
    assert_grad(&[a.clone()], |g, v| {
        let y = g.gather(v[0], &[2, 0, 2])?;
        Ok(weigh(g, y, 76))
    });
    assert_grad(&[a.clone()], |g, v| {
        let y = g.sum_axis(v[0], 0)?;
        Ok(weigh(g, y, 77))
    });
    assert_grad(&[a.clone()], |g, v| {
        let y = g.sum_axis(v[0], 1)?;
        Ok(weigh(g, y, 78))
    });
    assert_grad(&[a.clone()], |g, v| {
        let s = g.sum(v[0]);
        let m = g.mean(v[0]);
        let m = g.scale(m, 3.0);
        g.mul(s, m)
    });
}

#[test]
fn normalization_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = randn(&mut rng, &[3, 5]);
    let gamma = randn(&mut rng, &[5]);
    let beta = randn(&mut rng, &[5]);
    assert_grad(&[x.clone(), gamma, beta], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2])?;
        Ok(weigh(g, y, 80))
    });
    assert_grad(&[x], |g, v| {
        let y = g.l2_normalize(v[0])?;
        Ok(weigh(g, y, 81))
    });
}

#[test]
fn l2_normalize_gives_unit_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::<f64>::new();
    let x = g.constant(randn(&mut rng, &[4, 7]));
    let y = g.l2_normalize(x).unwrap();
    for row in g.data(y).chunks(7) {
        let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

/// Multi-head attention spelled out with slice / matmul / softmax / concat.
fn composed_attention(g: &mut Graph<f64>, qkv: Var, batch: usize, heads: usize) -> Var {
    let shape = g.shape(qkv).to_vec();
    let (t, d) = (shape[0] / batch, shape[1] / 3);
    let dh = d / heads;
    let mut per_seq = Vec::new();
    for b in 0..batch {
        let r = g.slice(qkv, 0, b * t, t).unwrap();
        let mut outs = Vec::new();
        for h in 0..heads {
            let q = g.slice(r, 1, h * dh, dh).unwrap();
            let k = g.slice(r, 1, d + h * dh, dh).unwrap();
            let v = g.slice(r, 1, 2 * d + h * dh, dh).unwrap();
            let kt = g.transpose(k).unwrap();
            let s = g.matmul(q, kt).unwrap();
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let a = g.softmax(s, 1).unwrap();
            outs.push(g.matmul(a, v).unwrap());
        }
        per_seq.push(g.concat(&outs, 1).unwrap());
    }
    g.concat(&per_seq, 0).unwrap()
}

#[test]
fn fused_attention_matches_composed_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = randn(&mut rng, &[2 * 5, 3 * 6]);
    let mut g = Graph::<f64>::new();
    let a = g.param(x.clone());
    let fused = g.attention(a, 2, 3).unwrap();
    let l1 = weigh(&mut g, fused, 22);
    g.backward(l1).unwrap();
    let ga = g.grad(a).unwrap().to_vec();

    let mut h = Graph::<f64>::new();
    let b = h.param(x);
    let composed = composed_attention(&mut h, b, 2, 3);
    let l2 = weigh(&mut h, composed, 22);
    h.backward(l2).unwrap();
    for (u, v) in g.data(fused).iter().zip(h.data(composed)) {
        assert!((u - v).abs() < 1e-12);
    }
    for (u, v) in ga.iter().zip(h.grad(b).unwrap()) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn fused_attention_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = randn(&mut rng, &[3 * 4, 3 * 4]);
    assert_grad(&[x], |g, v| {
        let o = g.attention(v[0], 3, 2)?;
        Ok(weigh(g, o, 24))
    });
}

#[test]
fn attention_rejects_bad_layout() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[7, 12]));
    assert!(matches!(g.attention(x, 2, 2), Err(Error::Shape { .. })));
    assert!(matches!(g.attention(x, 7, 5), Err(Error::Shape { .. })));
}

#[test]
fn f32_and_f64_paths_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = randn(&mut rng, &[4, 6]);
    let b = randn(&mut rng, &[6, 3]);
    let run64 = {
        let mut g = Graph::<f64>::new();
        let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
        let o = g.matmul(x, y).unwrap();
        let o = g.softmax(o, 1).unwrap();
        g.data(o).to_vec()
    };
    let run32 = {
        let mut g = Graph::<f32>::new();
        let (x, y) = (g.constant(a.cast()), g.constant(b.cast()));
        let o = g.matmul(x, y).unwrap();
        let o = g.softmax(o, 1).unwrap();
        g.data(o).to_vec()
    };
    for (x, y) in run64.iter().zip(&run32) {
        assert!((x - *y as f64).abs() < 1e-5);
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f32..50.0, 1..40), cols in 1usize..8) {
        let rows = values.len() / cols;
        prop_assume!(rows > 0);
        let data = values[..rows * cols].to_vec();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[rows, cols], data).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for row in g.data(y).chunks(cols) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn two_backward_passes_double_the_gradient(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::new();
        let x = g.param(randn(&mut rng, &[2, 3]));
        let w = g.constant(randn(&mut rng, &[3, 3]));
        let h = g.matmul(x, w).unwrap();
        let h = g.softmax(h, 1).unwrap();
        let l = g.cross_entropy(h, &[0, 2]).unwrap();
        g.backward(l).unwrap();
        let once = g.grad(x).unwrap().to_vec();
        g.backward(l).unwrap();
        for (a, b) in once.iter().zip(g.grad(x).unwrap()) {
            prop_assert_eq!(2.0 * a, *b);
        }
    }
}
