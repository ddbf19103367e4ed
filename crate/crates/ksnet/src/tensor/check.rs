//! Finite-difference verification of analytic gradients.
//!
//! Central differences are the independent oracle for every backward
//! kernel: each audit evaluates the kernel's forward under a fixed random
//! linear readout and compares the analytic input gradients against
//! `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`, coordinate by coordinate.
//! Everything here runs in f64.

use super::kernels as k;
use super::Tensor;
use crate::rng::{stream, SplitMix64};

/// Default probe step for the 64-bit checks.
pub const DEFAULT_EPS: f64 = 1e-4;

/// Maximum relative error between an analytic gradient and central
/// differences of `f` around `x`. The denominator is
/// `max(|fd|, |analytic|, 1e-8)` per coordinate.
pub fn finite_diff_max_rel_err(
    f: &mut dyn FnMut(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    eps: f64,
) -> f64 {
    assert_eq!(x.shape(), analytic.shape(), "gradient shape mismatch");
    let mut probe = x.clone();
    let mut worst: f64 = 0.0;
    for i in 0..probe.numel() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + eps;
        let fp = f(&probe);
        probe.as_mut_slice()[i] = orig - eps;
        let fm = f(&probe);
        probe.as_mut_slice()[i] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        let a = analytic.as_slice()[i];
        let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

/// Result of one kernel audit.
#[derive(Debug, Clone)]
pub struct KernelCheck {
    pub kernel: &'static str,
    pub max_rel_err: f64,
}

fn rand_tensor(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.range_f64(lo, hi)).collect()).expect("sized")
}

/// `f(y) = sum(readout * y)`: turns any kernel output into a scalar while
/// keeping the upstream gradient equal to `readout`.
fn weighted_sum(y: &Tensor<f64>, readout: &Tensor<f64>) -> f64 {
    y.as_slice()
        .iter()
        .zip(readout.as_slice())
        .map(|(&a, &b)| a * b)
        .sum()
}

struct Audit {
    rng: SplitMix64,
    eps: f64,
    results: Vec<KernelCheck>,
}

impl Audit {
    fn record(&mut self, kernel: &'static str, err: f64) {
        match self.results.iter_mut().find(|c| c.kernel == kernel) {
            Some(c) => c.max_rel_err = c.max_rel_err.max(err),
            None => self.results.push(KernelCheck {
                kernel,
                max_rel_err: err,
            }),
        }
    }
}

/// Run central-difference checks for every kernel in the catalog against
/// its analytic backward, over `instances` random instances each. Returns
/// the worst relative error per kernel.
pub fn kernel_gradient_audit(seed: u64, instances: usize) -> Vec<KernelCheck> {
    let mut audit = Audit {
        rng: stream(seed, "kernel-audit"),
        eps: DEFAULT_EPS,
        results: Vec::new(),
    };
    for _ in 0..instances {
        check_patch_conv(&mut audit);
        check_depthwise_conv(&mut audit);
        check_pointwise_conv(&mut audit);
        check_gelu(&mut audit);
        check_norm_train(&mut audit);
        check_norm_eval(&mut audit);
        check_add_scale(&mut audit);
        check_global_avg_pool(&mut audit);
        check_affine(&mut audit);
        check_softmax_ce(&mut audit);
        check_permute_pixels(&mut audit);
    }
    audit.results
}

fn check_patch_conv(a: &mut Audit) {
    let x = rand_tensor(&mut a.rng, &[2, 3, 4, 4], -1.0, 1.0);
    let w = rand_tensor(&mut a.rng, &[4, 3, 2, 2], -0.7, 0.7);
    let b = rand_tensor(&mut a.rng, &[4], -0.3, 0.3);
    let readout = rand_tensor(&mut a.rng, &[2, 4, 2, 2], -1.0, 1.0);
    let (dx, dw, db) = k::patch_conv_backward(&readout, &x, &w, (true, true, true));
    let ex = finite_diff_max_rel_err(
        &mut |p| weighted_sum(&k::patch_conv_forward(p, &w, &b), &readout),
        &x,
        &dx.unwrap(),
        a.eps,
    );
    let ew = finite_diff_max_rel_err(
        &mut |p| weighted_sum(&k::patch_conv_forward(&x, p, &b), &readout),
        &w,
        &dw.unwrap(),
        a.eps,
    );
    let eb = finite_diff_max_rel_err(
        &mut |p| weighted_sum(&k::patch_conv_forward(&x, &w, p), &readout),
        &b,
        &db.unwrap(),
        a.eps,
    );
    a.record("patch_conv", ex.max(ew).max(eb));
}

fn check_depthwise_conv(a: &mut Audit) {
    let x = rand_tensor(&mut a.rng, &[2, 4, 5, 5], -1.0, 1.0);
    let w = rand_tensor(&mut a.rng, &[4, 3, 3], -0.7, 0.7);
    let b = rand_tensor(&mut a.rng, &[4], -0.3, 0.3);
    let readout = rand_tensor(&mut a.rng, &[2, 4, 5, 5], -1.0, 1.0);
    let (dx, dw, db) = k::depthwise_conv_backward(&readout, &x, &w, (true, true, true));
    let ex = finite_diff_max_rel_err(
        &mut |p| weighted_sum(&k::depthwise_conv_forward(p, &w, &b), &readout),
        &x,
        &dx.unwrap(),
        a.eps,
    );
    let ew = finite_diff_max_rel_err(
        &mut |p| weighted_sum(&k::depthwise_conv_forward(&x, p, &b), &readout),
        &w,
        &dw.unwrap(),
        a.eps,
    );
    let eb = finite_diff_max_rel_err(
        &mut |p| weighted_sum(&k::depthwise_conv_forward(&x, &w, p), &readout),
        &b,
        &db.unwrap(),
        a.eps,
    );
    a.record("depthwise_conv", ex.max(ew).max(eb));
}

fn check_pointwise_conv(a: &mut Audit) {
    let x = rand_tensor(&mut a.rng, &[2, 3, 4, 4], -1.0, 1.0);
    let w = rand_tensor(&mut a.rng, &[5, 3], -0.7, 0.7);
    let b = rand_tensor(&mut a.rng, &[5], -0.3, 0.3);
    let readout = rand_tensor(&mut a.rng, &[2, 5, 4, 4], -1.0, 1.0);
    let (dx, dw, db) = k::pointwise_conv_backward(&readout, &x, &w, (true, true, true));
    let ex = finite_diff_max_rel_err(
        &mut |p| weighted_sum(&k::pointwise_conv_forward(p, &w, &b), &readout),
        &x,
        &dx.unwrap(),
        a.eps,
    );
    let ew = finite_diff_max_rel_err(
        &mut |p| weighted_sum(&k::pointwise_conv_forward(&x, p, &b), &readout),
        &w,
        &dw.unwrap(),
        a.eps,
    );
    let eb = finite_diff_max_rel_err(
        &mut |p| weighted_sum(&k::pointwise_conv_forward(&x, &w, p), &readout),
        &b,
        &db.unwrap(),
        a.eps,
    );
    a.record("pointwise_conv", ex.max(ew).max(eb));
}

fn check_gelu(a: &mut Audit) {
    let x = rand_tensor(&mut a.rng, &[3, 7], -3.0, 3.0);
    let readout = rand_tensor(&mut a.rng, &[3, 7], -1.0, 1.0);
    let dx = k::gelu_backward(&readout, &x);
    let e = finite_diff_max_rel_err(
        &mut |p| weighted_sum(&k::gelu_forward(p), &readout),
        &x,
        &dx,
        a.eps,
    );
    a.record("gelu", e);
}

fn check_norm_train(a: &mut Audit) {
    let x = rand_tensor(&mut a.rng, &[3, 4, 3, 3], -1.0, 1.0);
    let gamma = rand_tensor(&mut a.rng, &[4], 0.5, 1.5);
    let beta = rand_tensor(&mut a.rng, &[4], -0.5, 0.5);
    let readout = rand_tensor(&mut a.rng, &[3, 4, 3, 3], -1.0, 1.0);
    let forward = |x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>| {
        let stats = k::batch_stats(x, super::tape::NORM_EPS);
        k::batch_norm_apply(x, &stats.mean, &stats.inv_std, gamma, beta)
    };
    let stats = k::batch_stats(&x, super::tape::NORM_EPS);
    let (dx, dg, db) =
        k::batch_norm_train_backward(&readout, &x, &stats.mean, &stats.inv_std, &gamma, (true, true, true));
    let ex = finite_diff_max_rel_err(
        &mut |p| weighted_sum(&forward(p, &gamma, &beta), &readout),
        &x,
        &dx.unwrap(),
        a.eps,
    );
    let eg = finite_diff_max_rel_err(
        &mut |p| weighted_sum(&forward(&x, p, &beta), &readout),
        &gamma,
        &dg.unwrap(),
        a.eps,
    );
    let eb = finite_diff_max_rel_err(
        &mut |p| weighted_sum(&forward(&x, &gamma, p), &readout),
        &beta,
        &db.unwrap(),
        a.eps,
    );
    a.record("norm_train", ex.max(eg).max(eb));
}

fn check_norm_eval(a: &mut Audit) {
    let x = rand_tensor(&mut a.rng, &[3, 4, 3, 3], -1.0, 1.0);
    let gamma = rand_tensor(&mut a.rng, &[4], 0.5, 1.5);
    let beta = rand_tensor(&mut a.rng, &[4], -0.5, 0.5);
    let rm = rand_tensor(&mut a.rng, &[4], -0.4, 0.4);
    let rv = rand_tensor(&mut a.rng, &[4], 0.3, 1.2);
    let inv_std = rv.map(|v| 1.0 / (v + super::tape::NORM_EPS).sqrt());
    let readout = rand_tensor(&mut a.rng, &[3, 4, 3, 3], -1.0, 1.0);
    let (dx, dg, db) =
        k::batch_norm_eval_backward(&readout, &x, &rm, &inv_std, &gamma, (true, true, true));
    let ex = finite_diff_max_rel_err(
        &mut |p| weighted_sum(&k::batch_norm_apply(p, &rm, &inv_std, &gamma, &beta), &readout),
        &x,
        &dx.unwrap(),
        a.eps,
    );
    let eg = finite_diff_max_rel_err(
        &mut |p| weighted_sum(&k::batch_norm_apply(&x, &rm, &inv_std, p, &beta), &readout),
        &gamma,
        &dg.unwrap(),
        a.eps,
    );
    let eb = finite_diff_max_rel_err(
        &mut |p| weighted_sum(&k::batch_norm_apply(&x, &rm, &inv_std, &gamma, p), &readout),
        &beta,
        &db.unwrap(),
        a.eps,
    );
    a.record("norm_eval", ex.max(eg).max(eb));
}

fn check_add_scale(a: &mut Audit) {
    // y = s * (x + r): d/dx = s * readout, verified through the composition.
    let x = rand_tensor(&mut a.rng, &[2, 3, 2, 2], -1.0, 1.0);
    let r = rand_tensor(&mut a.rng, &[2, 3, 2, 2], -1.0, 1.0);
    let readout = rand_tensor(&mut a.rng, &[2, 3, 2, 2], -1.0, 1.0);
    let s = 0.75;
    let analytic = readout.map(|v| v * s);
    let e = finite_diff_max_rel_err(
        &mut |p| weighted_sum(&k::add_forward(p, &r).map(|v| v * s), &readout),
        &x,
        &analytic,
        a.eps,
    );
    a.record("add_scale", e);
}

fn check_global_avg_pool(a: &mut Audit) {
    let x = rand_tensor(&mut a.rng, &[2, 4, 3, 3], -1.0, 1.0);
    let readout = rand_tensor(&mut a.rng, &[2, 4], -1.0, 1.0);
    let dx = k::global_avg_pool_backward(&readout, x.shape());
    let e = finite_diff_max_rel_err(
        &mut |p| weighted_sum(&k::global_avg_pool_forward(p), &readout),
        &x,
        &dx,
        a.eps,
    );
    a.record("global_avg_pool", e);
}

fn check_affine(a: &mut Audit) {
    let x = rand_tensor(&mut a.rng, &[3, 5], -1.0, 1.0);
    let w = rand_tensor(&mut a.rng, &[4, 5], -0.7, 0.7);
    let b = rand_tensor(&mut a.rng, &[4], -0.3, 0.3);
    let readout = rand_tensor(&mut a.rng, &[3, 4], -1.0, 1.0);
    let (dx, dw, db) = k::affine_backward(&readout, &x, &w, (true, true, true));
    let ex = finite_diff_max_rel_err(
        &mut |p| weighted_sum(&k::affine_forward(p, &w, &b), &readout),
        &x,
        &dx.unwrap(),
        a.eps,
    );
    let ew = finite_diff_max_rel_err(
        &mut |p| weighted_sum(&k::affine_forward(&x, p, &b), &readout),
        &w,
        &dw.unwrap(),
        a.eps,
    );
    let eb = finite_diff_max_rel_err(
        &mut |p| weighted_sum(&k::affine_forward(&x, &w, p), &readout),
        &b,
        &db.unwrap(),
        a.eps,
    );
    a.record("affine", ex.max(ew).max(eb));
}

fn check_softmax_ce(a: &mut Audit) {
    let logits = rand_tensor(&mut a.rng, &[4, 6], -2.0, 2.0);
    let labels: Vec<usize> = (0..4).map(|_| a.rng.below(6) as usize).collect();
    let ce = k::softmax_cross_entropy_forward(&logits, &labels);
    let dl = k::softmax_cross_entropy_backward(1.0, &ce.probs, &labels);
    let e = finite_diff_max_rel_err(
        &mut |p| k::softmax_cross_entropy_forward(p, &labels).loss,
        &logits,
        &dl,
        a.eps,
    );
    a.record("softmax_cross_entropy", e);
}

fn check_permute_pixels(a: &mut Audit) {
    use crate::transform::{permute_planes, BlockPermutation, SecretKey};
    let key = SecretKey(a.rng.next_u64());
    let perm = BlockPermutation::derive(key, 2);
    let x = rand_tensor(&mut a.rng, &[1, 3, 4, 4], -1.0, 1.0);
    let readout = rand_tensor(&mut a.rng, &[1, 3, 4, 4], -1.0, 1.0);
    let apply = |x: &Tensor<f64>| {
        let mut data = vec![0.0; x.numel()];
        permute_planes(x.as_slice(), &mut data, 4, 4, 2, perm.entries());
        Tensor::from_vec(x.shape(), data).expect("sized")
    };
    let mut analytic = Tensor::<f64>::zeros(x.shape());
    permute_planes(
        readout.as_slice(),
        analytic.as_mut_slice(),
        4,
        4,
        2,
        perm.inverse_entries(),
    );
    let e = finite_diff_max_rel_err(&mut |p| weighted_sum(&apply(p), &readout), &x, &analytic, a.eps);
    a.record("permute_pixels", e);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        // f(x) = 0.5 * ||x||^2 has gradient x.
        let x = Tensor::from_vec(&[4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let analytic = x.clone();
        let err = finite_diff_max_rel_err(
            &mut |p| 0.5 * p.as_slice().iter().map(|v| v * v).sum::<f64>(),
            &x,
            &analytic,
            1e-4,
        );
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let analytic = Tensor::zeros(&[3]);
        let err = finite_diff_max_rel_err(&mut |_| 42.0, &x, &analytic, 1e-4);
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn every_kernel_passes_the_gradient_audit() {
        for check in kernel_gradient_audit(0xAD17, 5) {
            assert!(
                check.max_rel_err < 1e-4,
                "{} failed the finite-difference audit: {}",
                check.kernel,
                check.max_rel_err
            );
        }
    }
}
