//! Finite-difference sweeps over every differentiable op and over the full
//! two-branch objective, reporting the worst error of each.

use msl::loss::LossWeights;
use msl::masking::Mask;
use msl::model::{Architecture, ModelParams};
use msl::numerics::{grad_check, relative_error, Graph, Tensor, Var};
use msl::training::msl_gradients;
use msl::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-6;
pub const ELEMENTWISE_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-4;

pub struct OpCheck {
    pub name: &'static str,
    pub tol: f64,
    pub worst: f64,
}

pub fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Magnitudes in `[0.2, 1.5]` with random signs, clear of the ReLU kink.
pub fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
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

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(random(g.value(y).shape(), seed, -1.0, 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn run(name: &'static str, tol: f64, x: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) -> OpCheck {
    let worst = grad_check(f, x, EPS).unwrap().max_rel_error;
    OpCheck { name, tol, worst }
}

pub fn op_checks() -> Vec<OpCheck> {
    let x = away_from_zero(&[3, 4], 1);
    let other = away_from_zero(&[3, 4], 2);
    let mut out = vec![
        run("add", ELEMENTWISE_TOL, &x, |g, x| {
            let c = g.constant(other.clone());
            let y = g.add(x, c)?;
            weighted_sum(g, y, 3)
        }),
        run("sub", ELEMENTWISE_TOL, &x, |g, x| {
            let c = g.constant(other.clone());
            let y = g.sub(c, x)?;
            weighted_sum(g, y, 3)
        }),
        run("mul", ELEMENTWISE_TOL, &x, |g, x| {
            let c = g.constant(other.clone());
            let y = g.mul(x, c)?;
            weighted_sum(g, y, 3)
        }),
        run("scale", ELEMENTWISE_TOL, &x, |g, x| {
            let y = g.scale(x, -2.5);
            weighted_sum(g, y, 3)
        }),
        run("square", ELEMENTWISE_TOL, &x, |g, x| {
            let y = g.square(x);
            weighted_sum(g, y, 3)
        }),
        run("sigmoid", ELEMENTWISE_TOL, &x, |g, x| {
            let y = g.sigmoid(x);
            weighted_sum(g, y, 3)
        }),
        run("relu", ELEMENTWISE_TOL, &x, |g, x| {
            let y = g.relu(x);
            weighted_sum(g, y, 3)
        }),
        run("mean", ELEMENTWISE_TOL, &x, |g, x| {
            let y = g.square(x);
            Ok(g.mean(y))
        }),
    ];

    let img = random(&[2, 3, 7, 7], 10, -1.0, 1.0);
    let k = random(&[4, 3, 3, 3], 11, -0.5, 0.5);
    let b = random(&[4], 12, -0.1, 0.1);
    out.push(run("conv2d input", COMPOSITE_TOL, &img, |g, x| {
        let (kv, bv) = (g.constant(k.clone()), g.constant(b.clone()));
        let y = g.conv2d(x, kv, bv, 2, 1)?;
        weighted_sum(g, y, 13)
    }));
    out.push(run("conv2d kernel", COMPOSITE_TOL, &k, |g, kv| {
        let (xv, bv) = (g.constant(img.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, kv, bv, 2, 1)?;
        weighted_sum(g, y, 13)
    }));
    out.push(run("conv2d bias", COMPOSITE_TOL, &b, |g, bv| {
        let (xv, kv) = (g.constant(img.clone()), g.constant(k.clone()));
        let y = g.conv2d(xv, kv, bv, 2, 1)?;
        weighted_sum(g, y, 13)
    }));

    let feats = random(&[3, 5], 20, -1.0, 1.0);
    let w = random(&[4, 5], 21, -1.0, 1.0);
    let lb = random(&[4], 22, -0.2, 0.2);
    out.push(run("linear input", COMPOSITE_TOL, &feats, |g, xv| {
        let (wv, bv) = (g.constant(w.clone()), g.constant(lb.clone()));
        let y = g.linear(xv, wv, bv)?;
        weighted_sum(g, y, 23)
    }));
    out.push(run("linear weight", COMPOSITE_TOL, &w, |g, wv| {
        let (xv, bv) = (g.constant(feats.clone()), g.constant(lb.clone()));
        let y = g.linear(xv, wv, bv)?;
        weighted_sum(g, y, 23)
    }));
    out.push(run("linear bias", COMPOSITE_TOL, &lb, |g, bv| {
        let (xv, wv) = (g.constant(feats.clone()), g.constant(w.clone()));
        let y = g.linear(xv, wv, bv)?;
        weighted_sum(g, y, 23)
    }));
    out.push(run("global_avg_pool", COMPOSITE_TOL, &random(&[2, 3, 4, 5], 30, -1.0, 1.0), |g, f| {
        let y = g.global_avg_pool(f)?;
        weighted_sum(g, y, 31)
    }));

    let z = random(&[4, 3], 40, -3.0, 3.0);
    let target = Tensor::new(vec![4, 3], vec![1., 0., 1., 0., 0., 1., 1., 1., 0., 0., 1., 0.]).unwrap();
    out.push(run("bce_with_logits", COMPOSITE_TOL, &z, |g, z| g.bce_with_logits(z, &target)));
    out
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

/// Worst error between analytic and central-difference gradients of the
/// weighted two-branch objective, over every parameter of a tiny network.
pub fn dual_branch_worst() -> f64 {
    let arch = tiny_arch();
    let mut params = ModelParams::init(&arch, 7).unwrap();
    // Zero biases would put masked (all-zero) patches exactly on the ReLU kink.
    for (i, t) in params.tensors_mut().enumerate().filter(|(_, t)| t.shape().len() == 1) {
        *t = random(t.shape(), 80 + i as u64, 0.1, 0.3);
    }
    let images = random(&[2, 3, 8, 8], 70, 0.0, 1.0);
    let labels = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
    let ma = Mask::from_grid(8, 8, (0..64).map(|i| u8::from(i % 5 != 0 && i < 40)).collect()).unwrap();
    let mb = Mask::from_grid(8, 8, (0..64).map(|i| u8::from(i % 3 == 0)).collect()).unwrap();
    let masks = [&ma, &mb];
    let w = LossWeights::default();
    let loss = |p: &ModelParams| msl_gradients(p, &images, &labels, Some(&masks), &w).unwrap().0.total;
    let (_, analytic) = msl_gradients(&params, &images, &labels, Some(&masks), &w).unwrap();

    let mut worst = 0.0f64;
    for (t, (name, tensor)) in params.iter().enumerate() {
        for i in 0..tensor.len() {
            let bump = |delta: f64| {
                let mut p = params.clone();
                p.get_mut(name).unwrap().data_mut()[i] += delta;
                loss(&p)
            };
            let numeric = (bump(EPS) - bump(-EPS)) / (2.0 * EPS);
            let a = analytic[t].data()[i];
            let err = if a.abs().max(numeric.abs()) < 1e-9 {
                (a - numeric).abs()
            } else {
                relative_error(a, numeric)
            };
            worst = worst.max(err);
        }
    }
    worst
}
