//! Shared oracles for the integration suites: central finite differences,
//! well-separated random tensors (keeps max/relu kinks away from the
//! perturbation radius), and small stats helpers.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sib::autodiff::{DiffValue, Graph};
use sib::tensor::Tensor;

pub const FD_H: f64 = 1e-5;

/// Relative error with a small floor so near-zero gradients are compared
/// absolutely (central differences carry ~1e-10 absolute noise at h=1e-5).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Random tensor whose entries are pairwise separated by at least `gap` and
/// bounded away from zero by `gap`; safe for relu/abs/max under FD probing.
pub fn separated_tensor(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let slots = (2.0 / gap) as usize;
    assert!(slots > 4 * n, "gap too coarse for {n} elements");
    let mut picks: Vec<usize> = Vec::with_capacity(n);
    while picks.len() < n {
        let c = rng.random_range(0..slots);
        let v = -1.0 + (c as f64 + 0.5) * gap;
        if v.abs() < gap {
            continue;
        }
        if !picks.contains(&c) {
            picks.push(c);
        }
    }
    let data: Vec<f64> = picks.iter().map(|&c| -1.0 + (c as f64 + 0.5) * gap).collect();
    Tensor::new(shape, data).unwrap()
}

/// Builder signature for FD checks: given a graph and leaf values, produce a
/// scalar output.
pub type ScalarBuild = dyn Fn(&Graph, &[DiffValue]) -> sib::Result<DiffValue>;

fn eval_scalar(build: &ScalarBuild, inputs: &[Tensor]) -> f64 {
    let g = Graph::new();
    let leaves: Vec<DiffValue> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    build(&g, &leaves).unwrap().value().item()
}

/// Central-difference gradient check of a scalar function of several tensor
/// inputs. Returns the worst relative error over all input elements.
pub fn fd_gradcheck(build: &ScalarBuild, inputs: &[Tensor]) -> f64 {
    let g = Graph::new();
    let leaves: Vec<DiffValue> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&g, &leaves).unwrap();
    assert_eq!(out.value().numel(), 1, "fd_gradcheck needs a scalar output");
    let refs: Vec<&DiffValue> = leaves.iter().collect();
    let grads = g.backward(&out, &refs, false).unwrap();

    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let ad = grads[i].grad.value();
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i] = perturb(t, j, FD_H);
            let mut minus = inputs.to_vec();
            minus[i] = perturb(t, j, -FD_H);
            let fd = (eval_scalar(build, &plus) - eval_scalar(build, &minus)) / (2.0 * FD_H);
            worst = worst.max(rel_err(ad.data()[j], fd));
        }
    }
    worst
}

pub fn perturb(t: &Tensor, flat: usize, delta: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[flat] += delta;
    Tensor::new(t.shape(), data).unwrap()
}

/// Weighted sum of a tensor against fixed weights; the standard scalarizer
/// that exercises every output component of a primitive.
pub fn weighted_sum(g: &Graph, v: &DiffValue, weights: &Tensor) -> sib::Result<DiffValue> {
    let w = g.constant(weights.clone());
    g.sum_all(&g.mul(v, &w)?)
}

// ---------------------------------------------------------------------------
// Primitive gradcheck sweep (used by both the gradcheck suite and the
// acceptance criterion)
// ---------------------------------------------------------------------------

pub struct SweepResult {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
}

/// Runs `cases` random finite-difference checks for every differentiable
/// primitive and reports the worst relative error per primitive.
pub fn primitive_gradcheck_sweep(cases: usize, seed: u64) -> Vec<SweepResult> {
    let mut out = Vec::new();
    let mut push = |name: &'static str,
                    f: &mut dyn FnMut(&mut ChaCha8Rng) -> f64| {
        let mut r = rng(seed ^ (name.len() as u64) ^ name.as_bytes()[0] as u64);
        let mut worst = 0.0f64;
        for _ in 0..cases {
            worst = worst.max(f(&mut r));
        }
        out.push(SweepResult { name, cases, max_rel_err: worst });
    };

    // Elementwise binary with broadcasting.
    push("add", &mut |r| {
        let a = rand_tensor(r, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(r, &[4], -1.0, 1.0);
        let w = rand_tensor(r, &[3, 4], -1.0, 1.0);
        fd_gradcheck(&move |g, l| weighted_sum(g, &g.add(&l[0], &l[1])?, &w), &[a, b])
    });
    push("sub", &mut |r| {
        let a = rand_tensor(r, &[2, 3], -1.0, 1.0);
        let b = rand_tensor(r, &[2, 1], -1.0, 1.0);
        let w = rand_tensor(r, &[2, 3], -1.0, 1.0);
        fd_gradcheck(&move |g, l| weighted_sum(g, &g.sub(&l[0], &l[1])?, &w), &[a, b])
    });
    push("mul", &mut |r| {
        let a = rand_tensor(r, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(r, &[3, 4], -1.0, 1.0);
        let w = rand_tensor(r, &[3, 4], -1.0, 1.0);
        fd_gradcheck(&move |g, l| weighted_sum(g, &g.mul(&l[0], &l[1])?, &w), &[a, b])
    });
    push("div", &mut |r| {
        let a = rand_tensor(r, &[3, 3], -1.0, 1.0);
        let bsign = if r.random_range(0..2) == 0 { -1.0 } else { 1.0 };
        let b = rand_tensor(r, &[3, 3], 0.4, 1.5).scale(bsign);
        let w = rand_tensor(r, &[3, 3], -1.0, 1.0);
        fd_gradcheck(&move |g, l| weighted_sum(g, &g.div(&l[0], &l[1])?, &w), &[a, b])
    });
    push("neg", &mut |r| {
        let a = rand_tensor(r, &[5], -1.0, 1.0);
        let w = rand_tensor(r, &[5], -1.0, 1.0);
        fd_gradcheck(&move |g, l| weighted_sum(g, &g.neg(&l[0])?, &w), &[a])
    });
    push("relu", &mut |r| {
        let a = separated_tensor(r, &[4, 3], 1e-3);
        let w = rand_tensor(r, &[4, 3], -1.0, 1.0);
        fd_gradcheck(&move |g, l| weighted_sum(g, &g.relu(&l[0])?, &w), &[a])
    });
    push("sigmoid", &mut |r| {
        let a = rand_tensor(r, &[6], -3.0, 3.0);
        let w = rand_tensor(r, &[6], -1.0, 1.0);
        fd_gradcheck(&move |g, l| weighted_sum(g, &g.sigmoid(&l[0])?, &w), &[a])
    });
    push("exp", &mut |r| {
        let a = rand_tensor(r, &[6], -1.5, 1.5);
        let w = rand_tensor(r, &[6], -1.0, 1.0);
        fd_gradcheck(&move |g, l| weighted_sum(g, &g.exp(&l[0])?, &w), &[a])
    });
    push("log", &mut |r| {
        let a = rand_tensor(r, &[6], 0.3, 2.0);
        let w = rand_tensor(r, &[6], -1.0, 1.0);
        fd_gradcheck(&move |g, l| weighted_sum(g, &g.log(&l[0])?, &w), &[a])
    });
    push("abs", &mut |r| {
        let a = separated_tensor(r, &[6], 1e-3);
        let w = rand_tensor(r, &[6], -1.0, 1.0);
        fd_gradcheck(&move |g, l| weighted_sum(g, &g.abs(&l[0])?, &w), &[a])
    });
    push("sqrt", &mut |r| {
        let a = rand_tensor(r, &[6], 0.3, 2.0);
        let w = rand_tensor(r, &[6], -1.0, 1.0);
        fd_gradcheck(&move |g, l| weighted_sum(g, &g.sqrt(&l[0])?, &w), &[a])
    });
    push("matmul", &mut |r| {
        let a = rand_tensor(r, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(r, &[4, 2], -1.0, 1.0);
        let w = rand_tensor(r, &[3, 2], -1.0, 1.0);
        fd_gradcheck(&move |g, l| weighted_sum(g, &g.matmul(&l[0], &l[1])?, &w), &[a, b])
    });
    push("transpose", &mut |r| {
        let a = rand_tensor(r, &[3, 4], -1.0, 1.0);
        let w = rand_tensor(r, &[4, 3], -1.0, 1.0);
        fd_gradcheck(&move |g, l| weighted_sum(g, &g.transpose(&l[0])?, &w), &[a])
    });
    push("reshape", &mut |r| {
        let a = rand_tensor(r, &[2, 6], -1.0, 1.0);
        let w = rand_tensor(r, &[3, 4], -1.0, 1.0);
        fd_gradcheck(&move |g, l| weighted_sum(g, &g.reshape(&l[0], &[3, 4])?, &w), &[a])
    });
    push("broadcast_to", &mut |r| {
        let a = rand_tensor(r, &[1, 4], -1.0, 1.0);
        let w = rand_tensor(r, &[3, 4], -1.0, 1.0);
        fd_gradcheck(&move |g, l| weighted_sum(g, &g.broadcast_to(&l[0], &[3, 4])?, &w), &[a])
    });
    push("sum", &mut |r| {
        let a = rand_tensor(r, &[3, 4, 2], -1.0, 1.0);
        let w = rand_tensor(r, &[3, 2], -1.0, 1.0);
        fd_gradcheck(&move |g, l| weighted_sum(g, &g.sum(&l[0], &[1], false)?, &w), &[a])
    });
    push("mean", &mut |r| {
        let a = rand_tensor(r, &[3, 4], -1.0, 1.0);
        let w = rand_tensor(r, &[1, 4], -1.0, 1.0);
        fd_gradcheck(&move |g, l| weighted_sum(g, &g.mean(&l[0], &[0], true)?, &w), &[a])
    });
    push("max", &mut |r| {
        let a = separated_tensor(r, &[3, 4], 1e-3);
        let w = rand_tensor(r, &[3], -1.0, 1.0);
        fd_gradcheck(&move |g, l| weighted_sum(g, &g.max(&l[0], &[1], false)?, &w), &[a])
    });
    push("min", &mut |r| {
        let a = separated_tensor(r, &[3, 4], 1e-3);
        let w = rand_tensor(r, &[4], -1.0, 1.0);
        fd_gradcheck(&move |g, l| weighted_sum(g, &g.min(&l[0], &[0], false)?, &w), &[a])
    });
    push("softmax", &mut |r| {
        let tau = [0.5, 1.0, 2.0][r.random_range(0..3)];
        let a = rand_tensor(r, &[2, 5], -2.0, 2.0);
        let w = rand_tensor(r, &[2, 5], -1.0, 1.0);
        fd_gradcheck(&move |g, l| weighted_sum(g, &g.softmax(&l[0], tau)?, &w), &[a])
    });
    push("concat", &mut |r| {
        let a = rand_tensor(r, &[2, 2], -1.0, 1.0);
        let b = rand_tensor(r, &[2, 3], -1.0, 1.0);
        let w = rand_tensor(r, &[2, 5], -1.0, 1.0);
        fd_gradcheck(
            &move |g, l| weighted_sum(g, &g.concat(&[&l[0], &l[1]], 1)?, &w),
            &[a, b],
        )
    });
    push("slice", &mut |r| {
        let a = rand_tensor(r, &[3, 5], -1.0, 1.0);
        let w = rand_tensor(r, &[3, 2], -1.0, 1.0);
        fd_gradcheck(&move |g, l| weighted_sum(g, &g.slice(&l[0], 1, 1, 2)?, &w), &[a])
    });
    push("conv2d", &mut |r| {
        let (stride, pad) = [(1, 1), (1, 0), (2, 1)][r.random_range(0..3)];
        let x = rand_tensor(r, &[2, 2, 5, 5], -1.0, 1.0);
        let k = rand_tensor(r, &[3, 2, 3, 3], -1.0, 1.0);
        let (oh, ow) = sib::autodiff::kernels::conv2d_out_hw(5, 5, 3, 3, stride, pad);
        let w = rand_tensor(r, &[2, 3, oh, ow], -1.0, 1.0);
        fd_gradcheck(
            &move |g, l| weighted_sum(g, &g.conv2d(&l[0], &l[1], stride, pad)?, &w),
            &[x, k],
        )
    });
    push("avg_pool2d", &mut |r| {
        let x = rand_tensor(r, &[2, 2, 4, 4], -1.0, 1.0);
        let w = rand_tensor(r, &[2, 2, 2, 2], -1.0, 1.0);
        fd_gradcheck(&move |g, l| weighted_sum(g, &g.avg_pool2d(&l[0], 2, 2)?, &w), &[x])
    });
    push("max_pool2d", &mut |r| {
        let x = separated_tensor(r, &[1, 2, 4, 4], 1e-3);
        let w = rand_tensor(r, &[1, 2, 2, 2], -1.0, 1.0);
        fd_gradcheck(&move |g, l| weighted_sum(g, &g.max_pool2d(&l[0], 2, 2)?, &w), &[x])
    });
    push("gaussian_blur3", &mut |r| {
        let x = rand_tensor(r, &[2, 5, 5], -1.0, 1.0);
        let w = rand_tensor(r, &[2, 5, 5], -1.0, 1.0);
        fd_gradcheck(&move |g, l| weighted_sum(g, &g.gaussian_blur3(&l[0])?, &w), &[x])
    });

    out
}

// ---------------------------------------------------------------------------
// Stats helpers
// ---------------------------------------------------------------------------

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut r = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(ry.iter()) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}
