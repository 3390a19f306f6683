//! Central finite-difference check of the analytic parameter gradients.

use ndarray::Array2;

use super::mlp::{masked_mse, Mlp};

/// One network input with its regression target.
#[derive(Debug, Clone)]
pub struct GradSample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

fn loss_at(net: &Mlp, sample: &GradSample) -> f64 {
    let x = Array2::from_shape_vec((1, sample.input.len()), sample.input.clone()).expect("row");
    let y = Array2::from_shape_vec((1, sample.target.len()), sample.target.clone()).expect("row");
    let pred = net.forward_batch(x.view()).expect("input width");
    masked_mse(&pred, &y, &Array2::ones(y.raw_dim())).0
}

fn analytic_gradient(net: &Mlp, sample: &GradSample) -> Vec<f64> {
    let x = Array2::from_shape_vec((1, sample.input.len()), sample.input.clone()).expect("row");
    let y = Array2::from_shape_vec((1, sample.target.len()), sample.target.clone()).expect("row");
    let cache = net.forward_cached(x.view()).expect("input width");
    let (_, d_out) = masked_mse(cache.prediction(), &y, &Array2::ones(y.raw_dim()));
    net.backward(&cache, &d_out).to_flat()
}

/// Max relative error between backprop and central differences over the
/// parameters in `indices`. Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(net: &Mlp, sample: &GradSample, h: f64, indices: &[usize]) -> f64 {
    grad_check_with(net, sample, h, indices, &analytic_gradient(net, sample))
}

/// [`grad_check`] against a caller-supplied flat gradient.
pub fn grad_check_with(net: &Mlp, sample: &GradSample, h: f64, indices: &[usize], analytic: &[f64]) -> f64 {
    assert!(h > 0.0, "finite-difference step must be positive");
    let base = net.params_flat();
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for &i in indices {
        let mut params = base.clone();
        params[i] = base[i] + h;
        probe.set_params_flat(&params).expect("same size");
        let plus = loss_at(&probe, sample);
        params[i] = base[i] - h;
        probe.set_params_flat(&params).expect("same size");
        let minus = loss_at(&probe, sample);
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}
