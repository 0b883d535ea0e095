//! Reverse-mode gradients against central finite differences.

use msl::loss::LossWeights;
use msl::masking::Mask;
use msl::model::{Architecture, ModelParams};
use msl::numerics::{grad_check, relative_error, Graph, Tensor, Var};
use msl::training::msl_gradients;
use msl::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
const ELEMENTWISE_TOL: f64 = 1e-6;
const COMPOSITE_TOL: f64 = 1e-4;

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values in `[0.2, 1.5]` with random signs, so nothing sits on the ReLU kink.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.2..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(w * y)` with fixed random `w`, so every element gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(random(g.value(y).shape(), seed, -1.0, 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check(name: &str, x: &Tensor, tol: f64, f: impl Fn(&mut Graph, Var) -> Result<Var>) {
    let r = grad_check(f, x, EPS).unwrap();
    assert!(
        r.max_rel_error < tol,
        "{name}: relative error {:e} at {} (analytic {}, numeric {})",
        r.max_rel_error,
        r.worst_index,
        r.analytic[r.worst_index],
        r.numeric[r.worst_index]
    );
}

#[test]
fn elementwise_ops() {
    let x = away_from_zero(&[3, 4], 1);
    let other = away_from_zero(&[3, 4], 2);
    check("add", &x, ELEMENTWISE_TOL, |g, x| {
        let c = g.constant(other.clone());
        let y = g.add(x, c)?;
        weighted_sum(g, y, 10)
    });
    check("sub", &x, ELEMENTWISE_TOL, |g, x| {
        let c = g.constant(other.clone());
        let y = g.sub(c, x)?;
        weighted_sum(g, y, 11)
    });
    check("mul", &x, ELEMENTWISE_TOL, |g, x| {
        let c = g.constant(other.clone());
        let y = g.mul(x, c)?;
        weighted_sum(g, y, 12)
    });
    check("scale", &x, ELEMENTWISE_TOL, |g, x| {
        let y = g.scale(x, -2.5);
        weighted_sum(g, y, 13)
    });
    check("square", &x, ELEMENTWISE_TOL, |g, x| {
        let y = g.square(x);
        weighted_sum(g, y, 14)
    });
    check("sigmoid", &x, ELEMENTWISE_TOL, |g, x| {
        let y = g.sigmoid(x);
        weighted_sum(g, y, 15)
    });
    check("relu", &x, ELEMENTWISE_TOL, |g, x| {
        let y = g.relu(x);
        weighted_sum(g, y, 16)
    });
    check("mean", &x, ELEMENTWISE_TOL, |g, x| {
        let y = g.square(x);
        Ok(g.mean(y))
    });
}

#[test]
fn same_var_on_both_sides() {
    let x = away_from_zero(&[5], 3);
    check("x*x", &x, ELEMENTWISE_TOL, |g, x| {
        let y = g.mul(x, x)?;
        weighted_sum(g, y, 20)
    });
    check("x-x", &x, ELEMENTWISE_TOL, |g, x| {
        let y = g.sub(x, x)?;
        let z = g.add(y, x)?;
        weighted_sum(g, z, 21)
    });
}

#[test]
fn conv2d_all_inputs() {
    for (stride, padding) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let x = random(&[2, 3, 7, 6], 30, -1.0, 1.0);
        let k = random(&[4, 3, 3, 3], 31, -0.5, 0.5);
        let b = random(&[4], 32, -0.5, 0.5);
        let label = format!("conv2d stride={stride} pad={padding}");
        check(&format!("{label} d/dx"), &x, COMPOSITE_TOL, |g, x| {
            let (kv, bv) = (g.constant(k.clone()), g.constant(b.clone()));
            let y = g.conv2d(x, kv, bv, stride, padding)?;
            weighted_sum(g, y, 33)
        });
        check(&format!("{label} d/dkernel"), &k, COMPOSITE_TOL, |g, kv| {
            let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
            let y = g.conv2d(xv, kv, bv, stride, padding)?;
            weighted_sum(g, y, 33)
        });
        check(&format!("{label} d/dbias"), &b, COMPOSITE_TOL, |g, bv| {
            let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
            let y = g.conv2d(xv, kv, bv, stride, padding)?;
            weighted_sum(g, y, 33)
        });
    }
}

#[test]
fn linear_and_pool() {
    let x = random(&[4, 5], 40, -1.0, 1.0);
    let w = random(&[3, 5], 41, -1.0, 1.0);
    let b = random(&[3], 42, -1.0, 1.0);
    check("linear d/dx", &x, COMPOSITE_TOL, |g, xv| {
        let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
        let y = g.linear(xv, wv, bv)?;
        weighted_sum(g, y, 43)
    });
    check("linear d/dw", &w, COMPOSITE_TOL, |g, wv| {
        let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
        let y = g.linear(xv, wv, bv)?;
        weighted_sum(g, y, 43)
    });
    check("linear d/db", &b, COMPOSITE_TOL, |g, bv| {
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.linear(xv, wv, bv)?;
        weighted_sum(g, y, 43)
    });
    let feat = random(&[2, 3, 4, 5], 44, -1.0, 1.0);
    check("global_avg_pool", &feat, COMPOSITE_TOL, |g, f| {
        let y = g.global_avg_pool(f)?;
        weighted_sum(g, y, 45)
    });
}

#[test]
fn bce_with_logits_and_sigmoid_chain() {
    let z = random(&[3, 4], 50, -3.0, 3.0);
    let target = Tensor::from_fn(vec![3, 4], |i| (i % 3 == 0) as u8 as f64);
    check("bce_with_logits", &z, COMPOSITE_TOL, |g, z| g.bce_with_logits(z, &target));
    // Squared error on sigmoid probabilities, chaining sigmoid into sub/square/mean.
    check("bce o sigmoid", &z, COMPOSITE_TOL, |g, z| {
        let p = g.sigmoid(z);
        let t = g.constant(target.clone());
        let d = g.sub(p, t)?;
        let sq = g.square(d);
        Ok(g.mean(sq))
    });
}

#[test]
fn conv_relu_pool_linear_bce_chain() {
    let x = random(&[2, 3, 8, 8], 60, 0.0, 1.0);
    let k = random(&[4, 3, 3, 3], 61, -0.5, 0.5);
    let target = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    check("composite d/dkernel", &k, COMPOSITE_TOL, |g, kv| {
        let xv = g.constant(x.clone());
        let bv = g.constant(Tensor::full(vec![4], 0.05));
        let c = g.conv2d(xv, kv, bv, 2, 1)?;
        let r = g.relu(c);
        let p = g.global_avg_pool(r)?;
        let w = g.constant(random(&[2, 4], 62, -1.0, 1.0));
        let b = g.constant(Tensor::zeros(vec![2]));
        let z = g.linear(p, w, b)?;
        g.bce_with_logits(z, &target)
    });
}

fn tiny_arch() -> Architecture {
    Architecture {
        in_channels: 3,
        height: 8,
        width: 8,
        widths: vec![2, 3],
        kernel_sizes: vec![3, 3],
        strides: vec![1, 2],
        num_classes: 2,
    }
}

fn loss_of(params: &ModelParams, images: &Tensor, labels: &Tensor, masks: &[&Mask], w: &LossWeights) -> f64 {
    msl_gradients(params, images, labels, Some(masks), w).unwrap().0.total
}

#[test]
fn full_dual_branch_objective_against_finite_differences() {
    let arch = tiny_arch();
    let mut params = ModelParams::init(&arch, 7).unwrap();
    // Zero biases would put masked (all-zero) patches exactly on the ReLU kink.
    for (i, t) in params.tensors_mut().enumerate().filter(|(_, t)| t.shape().len() == 1) {
        *t = random(t.shape(), 80 + i as u64, 0.1, 0.3);
    }
    let images = random(&[2, 3, 8, 8], 70, 0.0, 1.0);
    let labels = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
    let grid_a: Vec<u8> = (0..64).map(|i| u8::from(i % 5 != 0 && i < 40)).collect();
    let grid_b: Vec<u8> = (0..64).map(|i| u8::from(i % 3 == 0)).collect();
    let ma = Mask::from_grid(8, 8, grid_a).unwrap();
    let mb = Mask::from_grid(8, 8, grid_b).unwrap();
    let masks = [&ma, &mb];
    let w = LossWeights::default();
    let (_, analytic) = msl_gradients(&params, &images, &labels, Some(&masks), &w).unwrap();

    let mut worst = 0.0f64;
    for (t, (name, tensor)) in params.iter().enumerate() {
        for i in 0..tensor.len() {
            let bump = |delta: f64| {
                let mut p = params.clone();
                p.get_mut(name).unwrap().data_mut()[i] += delta;
                loss_of(&p, &images, &labels, &masks, &w)
            };
            let numeric = (bump(EPS) - bump(-EPS)) / (2.0 * EPS);
            let a = analytic[t].data()[i];
            // Entries whose true gradient is exactly zero are compared absolutely.
            let err = if a.abs().max(numeric.abs()) < 1e-9 {
                (a - numeric).abs()
            } else {
                relative_error(a, numeric)
            };
            worst = worst.max(err);
            assert!(err < COMPOSITE_TOL, "{name}[{i}]: analytic {a}, numeric {numeric}");
        }
    }
    assert!(worst < COMPOSITE_TOL);
}

#[test]
fn leaf_gradients_accumulate_until_zeroed() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
    let y = g.square(x);
    let s = g.sum(y);
    g.backward(s).unwrap();
    let once = g.grad(x).unwrap().clone();
    g.backward(s).unwrap();
    let twice = g.grad(x).unwrap().clone();
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
    g.zero_grad();
    assert!(g.grad(x).map_or(true, |t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(vec![2]));
    let y = g.square(x);
    assert!(g.backward(y).is_err());
}

proptest! {
    #[test]
    fn sigmoid_symmetry(v in -40.0f64..40.0) {
        let s = msl::numerics::sigmoid(&Tensor::new(vec![2], vec![v, -v]).unwrap());
        prop_assert!((s.data()[0] + s.data()[1] - 1.0).abs() < 1e-15);
        prop_assert!(s.data()[0] > 0.0 && s.data()[0] <= 1.0);
    }

    #[test]
    fn elementwise_gradients_hold_anywhere(vals in prop::collection::vec(0.05f64..3.0, 1..8), seed in 0u64..1000) {
        let x = Tensor::new(vec![vals.len()], vals).unwrap();
        let r = grad_check(|g, x| {
            let s = g.sigmoid(x);
            let q = g.square(x);
            let y = g.mul(s, q)?;
            weighted_sum(g, y, seed)
        }, &x, EPS).unwrap();
        prop_assert!(r.max_rel_error < ELEMENTWISE_TOL, "rel {}", r.max_rel_error);
    }
}
