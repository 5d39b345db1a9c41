//! Finite-difference oracle for every autodiff op: central differences with
//! h = 1e-5 against the reverse-mode gradients, over randomized cases.

use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use unient_core::autodiff::{Graph, Var};
use unient_core::tensor::Tensor;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const CASES_PER_OP: u64 = 20;

fn rng_for(case: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xBEEF ^ case.wrapping_mul(0x9E3779B97F4A7C15))
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero, for kinked ops.
fn rand_vec_away_from_zero(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.random_range(0.05..scale);
            if rng.random_range(0..2) == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// A builder maps the flat input under test to a scalar loss node,
/// constructing any constants it needs deterministically.
type LossBuilder = dyn Fn(&mut Graph, Var) -> Var;

fn loss_value(build: &LossBuilder, shape: &[usize], x: &[f64]) -> f64 {
    let mut g = Graph::new();
    let leaf = g.leaf(Tensor::new(shape.to_vec(), x.to_vec()).unwrap(), false);
    let loss = build(&mut g, leaf);
    g.value(loss).data()[0]
}

fn autodiff_grad(build: &LossBuilder, shape: &[usize], x: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let leaf = g.leaf(Tensor::new(shape.to_vec(), x.to_vec()).unwrap(), true);
    let loss = build(&mut g, leaf);
    g.backward(loss).unwrap();
    g.grad(leaf).unwrap().data().to_vec()
}

fn finite_diff_grad(build: &LossBuilder, shape: &[usize], x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut xp = x.to_vec();
            xp[i] += H;
            let mut xm = x.to_vec();
            xm[i] -= H;
            (loss_value(build, shape, &xp) - loss_value(build, shape, &xm)) / (2.0 * H)
        })
        .collect()
}

fn check(op: &str, case: u64, build: &LossBuilder, shape: &[usize], x: &[f64]) {
    let ad = autodiff_grad(build, shape, x);
    let fd = finite_diff_grad(build, shape, x);
    for (i, (&a, &f)) in ad.iter().zip(&fd).enumerate() {
        let rel = (a - f).abs() / f.abs().max(1.0);
        assert!(
            rel < REL_TOL,
            "{op} case {case} entry {i}: ad {a} vs fd {f} (rel {rel})"
        );
    }
}

/// Random constant weights make the downstream loss sensitive to every
/// output entry.
fn weighted_sum(g: &mut Graph, out: Var, rng: &mut ChaCha8Rng) -> Var {
    let shape = g.value(out).shape().to_vec();
    let n = g.value(out).numel();
    let w = g.constant(Tensor::new(shape, rand_vec(rng, n, -1.0, 1.0)).unwrap());
    let prod = g.elementwise_mul(out, w).unwrap();
    g.sum(prod).unwrap()
}

#[test]
fn gradcheck_matmul_lhs_and_rhs() {
    for case in 0..CASES_PER_OP {
        let mut rng = rng_for(case);
        let (m, k, n) = (3, 4, 2);
        let a = rand_vec(&mut rng, m * k, -2.0, 2.0);
        let b = rand_vec(&mut rng, k * n, -2.0, 2.0);

        let b_c = b.clone();
        let build_a: Box<LossBuilder> = Box::new(move |g, leaf| {
            let bv = g.constant(Tensor::new(vec![k, n], b_c.clone()).unwrap());
            let out = g.matmul(leaf, bv).unwrap();
            let mut wrng = rng_for(case ^ 0xA);
            weighted_sum(g, out, &mut wrng)
        });
        check("matmul(lhs)", case, &build_a, &[m, k], &a);

        let a_c = a.clone();
        let build_b: Box<LossBuilder> = Box::new(move |g, leaf| {
            let av = g.constant(Tensor::new(vec![m, k], a_c.clone()).unwrap());
            let out = g.matmul(av, leaf).unwrap();
            let mut wrng = rng_for(case ^ 0xB);
            weighted_sum(g, out, &mut wrng)
        });
        check("matmul(rhs)", case, &build_b, &[k, n], &b);
    }
}

#[test]
fn gradcheck_add_and_add_bias() {
    for case in 0..CASES_PER_OP {
        let mut rng = rng_for(case ^ 0x11);
        let (m, n) = (3, 4);
        let x = rand_vec(&mut rng, m * n, -2.0, 2.0);
        let other = rand_vec(&mut rng, m * n, -2.0, 2.0);
        let bias = rand_vec(&mut rng, n, -1.0, 1.0);

        let oc = other.clone();
        let build_add: Box<LossBuilder> = Box::new(move |g, leaf| {
            let o = g.constant(Tensor::new(vec![m, n], oc.clone()).unwrap());
            let out = g.add(leaf, o).unwrap();
            let mut wrng = rng_for(case ^ 0x12);
            weighted_sum(g, out, &mut wrng)
        });
        check("add", case, &build_add, &[m, n], &x);

        let xc = x.clone();
        let build_bias: Box<LossBuilder> = Box::new(move |g, leaf| {
            let xv = g.constant(Tensor::new(vec![m, n], xc.clone()).unwrap());
            let out = g.add_bias(xv, leaf).unwrap();
            let mut wrng = rng_for(case ^ 0x13);
            weighted_sum(g, out, &mut wrng)
        });
        check("add_bias(b)", case, &build_bias, &[n], &bias);
    }
}

#[test]
fn gradcheck_relu() {
    for case in 0..CASES_PER_OP {
        let mut rng = rng_for(case ^ 0x21);
        let (m, n) = (3, 5);
        let x = rand_vec_away_from_zero(&mut rng, m * n, 2.0);
        let build: Box<LossBuilder> = Box::new(move |g, leaf| {
            let out = g.relu(leaf).unwrap();
            let mut wrng = rng_for(case ^ 0x22);
            weighted_sum(g, out, &mut wrng)
        });
        check("relu", case, &build, &[m, n], &x);
    }
}

#[test]
fn gradcheck_batchnorm_train_x_gamma_beta() {
    for case in 0..CASES_PER_OP {
        let mut rng = rng_for(case ^ 0x31);
        let (m, n) = (5, 3);
        let x = rand_vec(&mut rng, m * n, -2.0, 2.0);
        let gamma = rand_vec(&mut rng, n, 0.5, 1.5);
        let beta = rand_vec(&mut rng, n, -0.5, 0.5);

        let (gc, bc) = (gamma.clone(), beta.clone());
        let build_x: Box<LossBuilder> = Box::new(move |g, leaf| {
            let gv = g.leaf(Tensor::new(vec![n], gc.clone()).unwrap(), false);
            let bv = g.leaf(Tensor::new(vec![n], bc.clone()).unwrap(), false);
            let out = g.batchnorm_train(leaf, gv, bv).unwrap();
            let mut wrng = rng_for(case ^ 0x32);
            weighted_sum(g, out, &mut wrng)
        });
        check("batchnorm_train(x)", case, &build_x, &[m, n], &x);

        let (xc, bc) = (x.clone(), beta.clone());
        let build_gamma: Box<LossBuilder> = Box::new(move |g, leaf| {
            let xv = g.constant(Tensor::new(vec![m, n], xc.clone()).unwrap());
            let bv = g.constant(Tensor::new(vec![n], bc.clone()).unwrap());
            let out = g.batchnorm_train(xv, leaf, bv).unwrap();
            let mut wrng = rng_for(case ^ 0x33);
            weighted_sum(g, out, &mut wrng)
        });
        check("batchnorm_train(gamma)", case, &build_gamma, &[n], &gamma);

        let (xc, gc) = (x.clone(), gamma.clone());
        let build_beta: Box<LossBuilder> = Box::new(move |g, leaf| {
            let xv = g.constant(Tensor::new(vec![m, n], xc.clone()).unwrap());
            let gv = g.constant(Tensor::new(vec![n], gc.clone()).unwrap());
            let out = g.batchnorm_train(xv, gv, leaf).unwrap();
            let mut wrng = rng_for(case ^ 0x34);
            weighted_sum(g, out, &mut wrng)
        });
        check("batchnorm_train(beta)", case, &build_beta, &[n], &beta);
    }
}

#[test]
fn gradcheck_batchnorm_eval() {
    for case in 0..CASES_PER_OP {
        let mut rng = rng_for(case ^ 0x41);
        let (m, n) = (4, 3);
        let x = rand_vec(&mut rng, m * n, -2.0, 2.0);
        let gamma = rand_vec(&mut rng, n, 0.5, 1.5);
        let beta = rand_vec(&mut rng, n, -0.5, 0.5);
        let rm = rand_vec(&mut rng, n, -0.5, 0.5);
        let rv = rand_vec(&mut rng, n, 0.5, 2.0);

        let (gc, bc, rmc, rvc) = (gamma.clone(), beta.clone(), rm.clone(), rv.clone());
        let build_x: Box<LossBuilder> = Box::new(move |g, leaf| {
            let gv = g.constant(Tensor::new(vec![n], gc.clone()).unwrap());
            let bv = g.constant(Tensor::new(vec![n], bc.clone()).unwrap());
            let out = g.batchnorm_eval(leaf, gv, bv, &rmc, &rvc).unwrap();
            let mut wrng = rng_for(case ^ 0x42);
            weighted_sum(g, out, &mut wrng)
        });
        check("batchnorm_eval(x)", case, &build_x, &[m, n], &x);

        let (xc, bc, rmc, rvc) = (x.clone(), beta.clone(), rm.clone(), rv.clone());
        let build_gamma: Box<LossBuilder> = Box::new(move |g, leaf| {
            let xv = g.constant(Tensor::new(vec![m, n], xc.clone()).unwrap());
            let bv = g.constant(Tensor::new(vec![n], bc.clone()).unwrap());
            let out = g.batchnorm_eval(xv, leaf, bv, &rmc, &rvc).unwrap();
            let mut wrng = rng_for(case ^ 0x43);
            weighted_sum(g, out, &mut wrng)
        });
        check("batchnorm_eval(gamma)", case, &build_gamma, &[n], &gamma);
    }
}

#[test]
fn gradcheck_softmax_rows() {
    for case in 0..CASES_PER_OP {
        let mut rng = rng_for(case ^ 0x51);
        let (m, n) = (3, 6);
        let z = rand_vec(&mut rng, m * n, -2.0, 2.0);
        let build: Box<LossBuilder> = Box::new(move |g, leaf| {
            let out = g.softmax_rows(leaf).unwrap();
            let mut wrng = rng_for(case ^ 0x52);
            weighted_sum(g, out, &mut wrng)
        });
        check("softmax_rows", case, &build, &[m, n], &z);
    }
}

#[test]
fn gradcheck_log() {
    for case in 0..CASES_PER_OP {
        let mut rng = rng_for(case ^ 0x61);
        let (m, n) = (2, 5);
        let x = rand_vec(&mut rng, m * n, 0.1, 3.0);
        let build: Box<LossBuilder> = Box::new(move |g, leaf| {
            let out = g.log(leaf).unwrap();
            let mut wrng = rng_for(case ^ 0x62);
            weighted_sum(g, out, &mut wrng)
        });
        check("log", case, &build, &[m, n], &x);
    }
}

#[test]
fn gradcheck_mul_scalar_sum_mean_rows() {
    for case in 0..CASES_PER_OP {
        let mut rng = rng_for(case ^ 0x71);
        let (m, n) = (4, 3);
        let x = rand_vec(&mut rng, m * n, -2.0, 2.0);
        let c = rng.random_range(-3.0..3.0);

        let build_scalar: Box<LossBuilder> = Box::new(move |g, leaf| {
            let out = g.mul_scalar(leaf, c).unwrap();
            let mut wrng = rng_for(case ^ 0x72);
            weighted_sum(g, out, &mut wrng)
        });
        check("mul_scalar", case, &build_scalar, &[m, n], &x);

        let build_sum: Box<LossBuilder> = Box::new(move |g, leaf| {
            // sum is already scalar; square it through elementwise_mul so
            // the gradient is non-constant.
            let s = g.sum(leaf).unwrap();
            let sq = g.elementwise_mul(s, s).unwrap();
            g.mul_scalar(sq, 0.5).unwrap()
        });
        check("sum", case, &build_sum, &[m, n], &x);

        let build_mean: Box<LossBuilder> = Box::new(move |g, leaf| {
            let out = g.mean_rows(leaf).unwrap();
            let mut wrng = rng_for(case ^ 0x73);
            weighted_sum(g, out, &mut wrng)
        });
        check("mean_rows", case, &build_mean, &[m, n], &x);
    }
}

#[test]
fn gradcheck_elementwise_mul() {
    for case in 0..CASES_PER_OP {
        let mut rng = rng_for(case ^ 0x81);
        let (m, n) = (3, 4);
        let x = rand_vec(&mut rng, m * n, -2.0, 2.0);
        let other = rand_vec(&mut rng, m * n, -2.0, 2.0);
        let oc = other.clone();
        let build: Box<LossBuilder> = Box::new(move |g, leaf| {
            let o = g.constant(Tensor::new(vec![m, n], oc.clone()).unwrap());
            let out = g.elementwise_mul(leaf, o).unwrap();
            let mut wrng = rng_for(case ^ 0x82);
            weighted_sum(g, out, &mut wrng)
        });
        check("elementwise_mul", case, &build, &[m, n], &x);

        // Both inputs the same leaf (grad accumulates).
        let build_sq: Box<LossBuilder> = Box::new(move |g, leaf| {
            let out = g.elementwise_mul(leaf, leaf).unwrap();
            let mut wrng = rng_for(case ^ 0x83);
            weighted_sum(g, out, &mut wrng)
        });
        check("elementwise_mul(shared)", case, &build_sq, &[m, n], &x);
    }
}

#[test]
fn gradcheck_composite_entropy_objective() {
    // Full stack: matmul -> bias -> batchnorm -> relu -> matmul -> softmax
    // -> entropy, the same composition the adaptation loss uses.
    for case in 0..CASES_PER_OP {
        let mut rng = rng_for(case ^ 0x91);
        let (m, d, h, c) = (4, 3, 5, 3);
        let x = rand_vec(&mut rng, m * d, -1.5, 1.5);
        let w1 = rand_vec(&mut rng, d * h, -1.0, 1.0);
        let w2 = rand_vec(&mut rng, h * c, -1.0, 1.0);
        let gamma = rand_vec(&mut rng, h, 0.5, 1.5);
        let beta = rand_vec(&mut rng, h, -0.5, 0.5);

        let (w1c, w2c, bc) = (w1.clone(), w2.clone(), beta.clone());
        let xc = x.clone();
        let build_gamma: Box<LossBuilder> = Box::new(move |g, leaf| {
            let xv = g.constant(Tensor::new(vec![m, d], xc.clone()).unwrap());
            let w1v = g.constant(Tensor::new(vec![d, h], w1c.clone()).unwrap());
            let w2v = g.constant(Tensor::new(vec![h, c], w2c.clone()).unwrap());
            let bv = g.constant(Tensor::new(vec![h], bc.clone()).unwrap());
            let pre = g.matmul(xv, w1v).unwrap();
            let bn = g.batchnorm_train(pre, leaf, bv).unwrap();
            let act = g.relu(bn).unwrap();
            let logits = g.matmul(act, w2v).unwrap();
            let probs = g.softmax_rows(logits).unwrap();
            let lp = g.log(probs).unwrap();
            let plp = g.elementwise_mul(probs, lp).unwrap();
            let s = g.sum(plp).unwrap();
            g.mul_scalar(s, -1.0 / m as f64).unwrap()
        });
        check("composite(gamma)", case, &build_gamma, &[h], &gamma);
    }
}

#[test]
fn gradcheck_runtime_budget() {
    // The full battery above must be cheap; spot-check wall time for one
    // sweep of every op family.
    let start = std::time::Instant::now();
    gradcheck_sweep_once();
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 10.0,
        "gradient sweep took {elapsed:?}"
    );
}

fn gradcheck_sweep_once() {
    let mut rng = rng_for(7777);
    let (m, n) = (4, 3);
    let x = rand_vec(&mut rng, m * n, -2.0, 2.0);
    let build: Box<LossBuilder> = Box::new(move |g, leaf| {
        let sm = g.softmax_rows(leaf).unwrap();
        let lg = g.log(sm).unwrap();
        let pl = g.elementwise_mul(sm, lg).unwrap();
        let s = g.sum(pl).unwrap();
        g.mul_scalar(s, -1.0).unwrap()
    });
    check("sweep", 7777, &build, &[m, n], &x);
}
