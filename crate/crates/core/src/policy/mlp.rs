//! Dense feed-forward network with hand-written backprop.
//!
//! Weights are stored `(out_dim, in_dim)`; batches are `(batch, features)`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// No nonlinearity; the whole network is affine.
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    activation: Activation,
}

/// Activations of every layer for one forward pass; `outputs[0]` is the input.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    outputs: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn prediction(&self) -> &Array2<f64> {
        self.outputs.last().expect("cache holds at least the input")
    }
}

/// Parameter gradients, one `(weight, bias)` pair per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|(w, b)| w.iter().chain(b.iter()).map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in &mut self.layers {
            w.mapv_inplace(|g| g * factor);
            b.mapv_inplace(|g| g * factor);
        }
    }
}

impl Mlp {
    /// Xavier-uniform weights, zero biases. `sizes = [input, hidden.., output]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::ArchitectureMismatch(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|io| {
                let (n_in, n_out) = (io[0], io[1]);
                let limit = (6.0 / (n_in + n_out) as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((n_out, n_in), || rng.random_range(-limit..limit));
                Dense { weight, bias: Array1::zeros(n_out) }
            })
            .collect();
        Ok(Self { layers, activation })
    }

    /// All-zero parameters.
    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::ArchitectureMismatch(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|io| Dense {
                weight: Array2::zeros((io[1], io[0])),
                bias: Array1::zeros(io[1]),
            })
            .collect();
        Ok(Self { layers, activation })
    }

    /// Gaussian-perturbed parameters, used to move test networks off the
    /// symmetric initialization.
    pub fn jitter<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        for layer in &mut self.layers {
            layer.weight.mapv_inplace(|w| w + scale * { let z: f64 = StandardNormal.sample(rng); z });
            layer.bias.mapv_inplace(|b| b + scale * { let z: f64 = StandardNormal.sample(rng); z });
        }
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::out_dim)
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::out_dim))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: self.param_count(),
                found: params.len(),
            });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = params[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    pub fn param(&self, index: usize) -> f64 {
        self.params_flat()[index]
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "network input",
                expected: self.input_dim(),
                found: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.outputs.pop().expect("non-empty"))
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        self.check_input(&x)?;
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(x.to_owned());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = outputs[i].dot(&layer.weight.t());
            z += &layer.bias;
            if i < last {
                let act = self.activation;
                z.mapv_inplace(|v| act.apply(v));
            }
            outputs.push(z);
        }
        Ok(ForwardCache { outputs })
    }

    /// Backpropagates `d_out = dL/d(prediction)` through a cached pass.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Array2<f64>) -> Gradients {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut delta = d_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.outputs[i];
            let gw = delta.t().dot(input);
            let gb = delta.sum_axis(Axis(0));
            layers.push((gw, gb));
            if i > 0 {
                let mut back = delta.dot(&layer.weight);
                let act = self.activation;
                back.zip_mut_with(input, |d, &a| *d *= act.derivative_from_output(a));
                delta = back;
            }
        }
        layers.reverse();
        Gradients { layers }
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }
}

/// Masked mean-squared error averaged per sample, then over the batch.
/// Returns the loss and `dL/d(prediction)`.
pub fn masked_mse(pred: &Array2<f64>, target: &Array2<f64>, mask: &Array2<f64>) -> (f64, Array2<f64>) {
    let batch = pred.nrows() as f64;
    let mut grad = Array2::zeros(pred.raw_dim());
    let mut loss = 0.0;
    for (((p, t), m), mut g) in pred
        .rows()
        .into_iter()
        .zip(target.rows())
        .zip(mask.rows())
        .zip(grad.rows_mut())
    {
        let weight: f64 = m.sum();
        if weight == 0.0 {
            continue;
        }
        let mut sample = 0.0;
        for (((&p, &t), &m), g) in p.iter().zip(t.iter()).zip(m.iter()).zip(g.iter_mut()) {
            let r = p - t;
            sample += m * r * r;
            *g = 2.0 * m * r / (weight * batch);
        }
        loss += sample / weight;
    }
    (loss / batch, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[4, 8, 3], Activation::Tanh).unwrap();
        let out = net.forward_batch(Array2::from_elem((2, 4), 0.7).view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flat_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[3, 5, 2], Activation::Tanh, &mut rng).unwrap();
        let flat = net.params_flat();
        assert_eq!(flat.len(), 3 * 5 + 5 + 5 * 2 + 2);
        let mut other = Mlp::zeros(&[3, 5, 2], Activation::Tanh).unwrap();
        other.set_params_flat(&flat).unwrap();
        assert_eq!(other, net);
        assert!(other.set_params_flat(&flat[1..]).is_err());
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let net = Mlp::zeros(&[3, 2], Activation::Identity).unwrap();
        assert!(net.forward_batch(Array2::zeros((1, 4)).view()).is_err());
    }

    #[test]
    fn masked_mse_ignores_masked_entries() {
        let pred = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 10.0]).unwrap();
        let target = Array2::zeros((1, 3));
        let mask = Array2::from_shape_vec((1, 3), vec![1.0, 1.0, 0.0]).unwrap();
        let (loss, grad) = masked_mse(&pred, &target, &mask);
        assert_eq!(loss, 2.5);
        assert_eq!(grad[[0, 2]], 0.0);
        assert_eq!(grad[[0, 0]], 1.0);
    }
}
