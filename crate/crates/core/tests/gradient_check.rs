//! Manual gradients against central finite differences, evaluated in f64.

use a3dfdg::segmodel::{loss_and_grad_with, loss_with, param_count, relu_pattern_with, SegModel};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-2;
/// Gradient entries with both values below this are treated as zero.
const ABS_FLOOR: f64 = 1e-6;

fn instance(seed: u64, classes: usize) -> (Vec<f64>, Array4<f32>, Array4<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<f64> = SegModel::init(classes, seed).params().iter().map(|&p| p as f64).collect();
    // intensities spread across the input window so activations are O(1)
    let x = Array4::from_shape_fn((2, 6, 6, 6), |_| rng.random_range(-300.0f32..400.0));
    let y = Array4::from_shape_fn((2, 6, 6, 6), |_| rng.random_range(0..classes as u8));
    (params, x, y)
}

fn relative_error(a: f64, b: f64) -> f64 {
    if a.abs() < ABS_FLOOR && b.abs() < ABS_FLOOR {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs())
}

/// Worst relative error over `coords` random coordinates of one instance.
///
/// A coordinate whose perturbation flips a ReLU is redrawn: the loss is not
/// differentiable across the kink and the difference quotient is meaningless there.
pub fn worst_fd_error(seed: u64, classes: usize, coords: usize) -> f64 {
    let (params, x, y) = instance(seed, classes);
    let (_, grad) = loss_and_grad_with(&params, classes, x.view(), y.view()).unwrap();
    let pattern = relu_pattern_with(&params, classes, x.view()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFD);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut drawn = 0;
    while checked < coords {
        drawn += 1;
        assert!(drawn < 100 * coords, "too many kink crossings");
        let i = rng.random_range(0..param_count(classes));
        let mut p = params.clone();
        p[i] = params[i] + STEP;
        let up = loss_with(&p, classes, x.view(), y.view()).unwrap().total;
        let up_stable = relu_pattern_with(&p, classes, x.view()).unwrap() == pattern;
        p[i] = params[i] - STEP;
        let down = loss_with(&p, classes, x.view(), y.view()).unwrap().total;
        let down_stable = relu_pattern_with(&p, classes, x.view()).unwrap() == pattern;
        if !(up_stable && down_stable) {
            continue;
        }
        let fd = (up - down) / (2.0 * STEP);
        worst = worst.max(relative_error(grad[i], fd));
        checked += 1;
    }
    worst
}

#[test]
fn gradient_matches_finite_differences() {
    for seed in 0..10 {
        let e = worst_fd_error(seed, 6, 50);
        assert!(e <= TOL, "seed {seed}: worst relative error {e}");
    }
}

#[test]
fn f32_and_f64_gradients_agree() {
    let (params, x, y) = instance(11, 6);
    let p32: Vec<f32> = params.iter().map(|&p| p as f32).collect();
    let (l32, g32) = loss_and_grad_with(&p32, 6, x.view(), y.view()).unwrap();
    let (l64, g64) = loss_and_grad_with(&params, 6, x.view(), y.view()).unwrap();
    assert!((l32.total - l64.total).abs() < 1e-5);
    let scale = g64.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    for (a, b) in g32.iter().zip(&g64) {
        assert!((*a as f64 - b).abs() <= 1e-4 * scale);
    }
}
