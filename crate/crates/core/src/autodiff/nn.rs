use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};

/// Dense feedforward network: tanh on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    layer_sizes: Vec<usize>,
    /// `weights[l]` is `layer_sizes[l+1] x layer_sizes[l]`, row-major.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// A network whose parameters live on a tape as leaves.
#[derive(Debug, Clone)]
pub struct BoundNetwork {
    layer_sizes: Vec<usize>,
    weights: Vec<Var>,
    biases: Vec<Var>,
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::config(format!(
            "a network needs at least an input and an output layer, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.iter().any(|&n| n == 0) {
        return Err(Error::config(format!(
            "layer sizes must be positive, got {layer_sizes:?}"
        )));
    }
    Ok(())
}

impl NetworkParams {
    /// Glorot-uniform weights on `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]`,
    /// zero biases. Deterministic in `seed`.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(NetworkParams {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        Ok(NetworkParams {
            layer_sizes: layer_sizes.to_vec(),
            weights: layer_sizes.windows(2).map(|p| vec![0.0; p[0] * p[1]]).collect(),
            biases: layer_sizes.windows(2).map(|p| vec![0.0; p[1]]).collect(),
        })
    }

    /// Builds a network from explicit per-layer weights and biases.
    pub fn from_parts(
        layer_sizes: &[usize],
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let layers = layer_sizes.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::config("one weight matrix and bias per layer"));
        }
        for (l, pair) in layer_sizes.windows(2).enumerate() {
            if weights[l].len() != pair[0] * pair[1] || biases[l].len() != pair[1] {
                return Err(Error::config(format!("layer {l} has the wrong shape")));
            }
        }
        let net = NetworkParams {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        };
        if !net.is_finite() {
            return Err(Error::config("network parameters must be finite"));
        }
        Ok(net)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        &self.biases[layer]
    }

    pub fn num_params(&self) -> usize {
        self.buffers().map(|b| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.buffers().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// All parameter buffers in a fixed order (layer by layer, weights first).
    pub fn buffers(&self) -> impl Iterator<Item = &[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
    }

    /// Plain evaluation on one input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = Matrix::row_vector(input.to_vec());
        Ok(self.forward_batch(&x)?.into_vec())
    }

    /// Plain evaluation on a batch, one sample per row.
    pub fn forward_batch(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.input_width() {
            return Err(Error::config(format!(
                "network expects {} inputs, got {}",
                self.input_width(),
                input.cols()
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(input.clone());
        let out = bound.forward(&mut tape, x);
        Ok(tape.value(out).clone())
    }

    /// Records the parameters as tape leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundNetwork {
        let mut weights = Vec::with_capacity(self.weights.len());
        let mut biases = Vec::with_capacity(self.biases.len());
        for (l, pair) in self.layer_sizes.windows(2).enumerate() {
            weights.push(tape.leaf(Matrix::from_vec(pair[1], pair[0], self.weights[l].clone())));
            biases.push(tape.leaf(Matrix::row_vector(self.biases[l].clone())));
        }
        BoundNetwork {
            layer_sizes: self.layer_sizes.clone(),
            weights,
            biases,
        }
    }
}

impl BoundNetwork {
    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Taped forward pass. `x` must be `batch x input_width`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let layers = self.weights.len();
        let mut h = x;
        for l in 0..layers {
            h = tape.affine(h, self.weights[l], self.biases[l]);
            if l + 1 < layers {
                h = tape.tanh(h);
            }
        }
        h
    }

    /// Gradient of the loss with respect to this network, shaped like its parameters.
    pub fn gradients(&self, grads: &Gradients) -> NetworkParams {
        NetworkParams {
            layer_sizes: self.layer_sizes.clone(),
            weights: self.weights.iter().map(|&w| grads.get(w).into_vec()).collect(),
            biases: self.biases.iter().map(|&b| grads.get(b).into_vec()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_sizes_are_config_errors() {
        assert!(matches!(NetworkParams::init(&[3], 0), Err(Error::Config(_))));
        assert!(matches!(NetworkParams::init(&[3, 0, 1], 0), Err(Error::Config(_))));
    }

    #[test]
    fn biases_start_at_zero() {
        let net = NetworkParams::init(&[1, 1], 7).unwrap();
        assert_eq!(net.bias(0), &[0.0]);
    }

    #[test]
    fn init_is_deterministic() {
        let a = NetworkParams::init(&[11, 21, 21, 21, 10], 3).unwrap();
        let b = NetworkParams::init(&[11, 21, 21, 21, 10], 3).unwrap();
        let c = NetworkParams::init(&[11, 21, 21, 21, 10], 4).unwrap();
        let bits = |n: &NetworkParams| -> Vec<u64> {
            n.buffers().flat_map(|b| b.iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let sizes = [11, 21, 21, 21, 10];
        let net = NetworkParams::init(&sizes, 12345).unwrap();
        for (l, pair) in sizes.windows(2).enumerate() {
            let glorot = (6.0 / (pair[0] + pair[1]) as f64).sqrt();
            let loose = 6.0 / (pair[0] as f64).sqrt();
            for &w in net.weights(l) {
                assert!(w.abs() <= glorot && w.abs() <= loose);
            }
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = NetworkParams::zeros(&[3, 5, 5, 2]).unwrap();
        assert_eq!(net.forward(&[0.3, -1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_affine_layer() {
        let net = NetworkParams::from_parts(&[2, 1], vec![vec![1.0, 1.0]], vec![vec![0.0]]).unwrap();
        assert_eq!(net.forward(&[3.0, 4.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn one_hidden_tanh_layer() {
        let net = NetworkParams::from_parts(
            &[1, 1, 1],
            vec![vec![1.0], vec![1.0]],
            vec![vec![0.0], vec![0.0]],
        )
        .unwrap();
        let out = net.forward(&[2.0]).unwrap()[0];
        assert!((out - 0.964_027_580_075_816_9).abs() < 1e-15);
    }

    #[test]
    fn wrong_input_width_is_config_error() {
        let net = NetworkParams::init(&[2, 3, 1], 0).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Config(_))));
    }
}
