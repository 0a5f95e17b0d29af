use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Activation, DiffError};

/// One affine map followed by a pointwise activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`, row-major.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// A fixed-architecture fully connected network.
///
/// Construction goes through [`Network::init`] or [`Network::from_layers`],
/// both of which check that layer dimensions chain and every parameter is
/// finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    /// Builds a network with `dims.len() - 1` layers. Hidden layers use
    /// `hidden`, the last one `output`.
    ///
    /// Weights are uniform in `[-s, s]` with `s = sqrt(1 / fan_in)`; biases
    /// start at zero. The same seed always yields the same parameters.
    pub fn init(dims: &[usize], hidden: Activation, output: Activation, seed: u64) -> Result<Self, DiffError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(DiffError::InvalidDims(dims.to_vec()));
        }
        hidden.validate()?;
        output.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let s = (1.0 / fan_in as f64).sqrt();
                let weights = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-s..=s));
                Layer { weights, bias: Array1::zeros(fan_out), activation: if i + 1 == count { output } else { hidden } }
            })
            .collect();
        Ok(Network { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, DiffError> {
        if layers.is_empty() {
            return Err(DiffError::InvalidDims(vec![]));
        }
        for (i, layer) in layers.iter().enumerate() {
            layer.activation.validate()?;
            if layer.bias.len() != layer.output_dim() || layer.input_dim() == 0 || layer.output_dim() == 0 {
                return Err(DiffError::LayerShape { layer: i });
            }
            if i > 0 && layers[i - 1].output_dim() != layer.input_dim() {
                return Err(DiffError::LayerShape { layer: i });
            }
            if layer.weights.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(DiffError::NonFiniteParameter { layer: i });
            }
        }
        Ok(Network { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access for optimizers. Callers must keep shapes intact.
    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(Layer::output_dim)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    fn check_input(&self, got: usize) -> Result<(), DiffError> {
        if got != self.input_dim() {
            return Err(DiffError::DimensionMismatch { expected: self.input_dim(), got });
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>, DiffError> {
        let x2 = x.insert_axis(Axis(0));
        Ok(self.forward_batch(x2)?.row(0).to_owned())
    }

    /// Evaluates every row of `xs` (one input per row).
    pub fn forward_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>, DiffError> {
        self.check_input(xs.ncols())?;
        let mut h = xs.to_owned();
        for layer in &self.layers {
            let mut z = h.dot(&layer.weights.t());
            z += &layer.bias;
            let act = layer.activation;
            z.mapv_inplace(|v| act.apply(v));
            h = z;
        }
        Ok(h)
    }

    /// Pre-activations of every layer for every row, mostly useful for
    /// locating points near activation seams.
    pub fn pre_activations_batch(&self, xs: ArrayView2<f64>) -> Result<Vec<Array2<f64>>, DiffError> {
        self.check_input(xs.ncols())?;
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = xs.to_owned();
        for layer in &self.layers {
            let mut z = h.dot(&layer.weights.t());
            z += &layer.bias;
            let act = layer.activation;
            h = z.mapv(|v| act.apply(v));
            out.push(z);
        }
        Ok(out)
    }

    /// Gradient of a scalar-output network with respect to its input.
    pub fn input_gradient(&self, x: ArrayView1<f64>) -> Result<Array1<f64>, DiffError> {
        let (_, g) = self.value_and_input_gradient_batch(x.insert_axis(Axis(0)))?;
        Ok(g.row(0).to_owned())
    }

    /// Values (`rows × 1`) and input gradients (`rows × in`) of a scalar
    /// network, computed by the layerwise chain rule.
    pub fn value_and_input_gradient_batch(&self, xs: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>), DiffError> {
        if self.output_dim() != 1 {
            return Err(DiffError::NotScalar(self.output_dim()));
        }
        self.check_input(xs.ncols())?;
        let mut h = xs.to_owned();
        let mut slopes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut z = h.dot(&layer.weights.t());
            z += &layer.bias;
            let act = layer.activation;
            slopes.push(z.mapv(|v| act.derivative(v)));
            z.mapv_inplace(|v| act.apply(v));
            h = z;
        }
        let mut g = slopes.pop().expect("at least one layer");
        for (layer, slope) in self.layers.iter().rev().zip(std::iter::once(None).chain(slopes.iter().rev().map(Some))) {
            if let Some(s) = slope {
                g *= s;
            }
            g = g.dot(&layer.weights);
        }
        Ok((h, g))
    }
}
