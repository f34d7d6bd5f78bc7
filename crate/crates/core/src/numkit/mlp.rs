//! Multi-layer perceptron with an explicit tape for exact backpropagation.

use super::matrix::{matmul, Matrix};
use super::{NumError, Result};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative evaluated at the pre-activation value (0 at the ReLU kink).
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// One dense layer: `y = act(x W + b)` with `W` of shape in x out.
#[derive(Clone, Debug)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// A chain of dense layers with matching dimensions.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Record of one forward pass, consumed by [`Mlp::backward`].
#[derive(Debug)]
pub struct MlpTape {
    /// Input to each layer (first entry is the network input).
    layer_inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre_activations: Vec<Matrix>,
}

/// Per-layer parameter gradients matching an [`Mlp`]'s structure.
#[derive(Clone, Debug)]
pub struct MlpGrads {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl MlpGrads {
    pub fn add_assign(&mut self, other: &MlpGrads) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(NumError::StructureMismatch("layer count".into()));
        }
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.add_assign(ow)?;
            for (x, y) in b.iter_mut().zip(ob) {
                *x += y;
            }
        }
        Ok(())
    }
}

impl Mlp {
    /// Builds a network from layer dimensions `dims[0] -> dims[1] -> ...` with
    /// the given activation per layer. Weights use Glorot-uniform init from
    /// the supplied generator; biases start at zero.
    pub fn new<R: Rng>(dims: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(NumError::InvalidArgument(
                "an MLP needs at least one layer".into(),
            ));
        }
        if activations.len() != dims.len() - 1 {
            return Err(NumError::StructureMismatch(format!(
                "{} activations for {} layers",
                activations.len(),
                dims.len() - 1
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(NumError::InvalidArgument("zero layer dimension".into()));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(pair, &act)| Layer {
                weight: Matrix::glorot(pair[0], pair[1], rng),
                bias: vec![0.0; pair[1]],
                activation: act,
            })
            .collect();
        Ok(Mlp { layers })
    }

    /// Single hidden layer shape used by the retrieval projections:
    /// `in -> hidden (relu) -> out (identity)`.
    pub fn projection<R: Rng>(
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Mlp::new(
            &[in_dim, hidden, out_dim],
            &[Activation::Relu, Activation::Identity],
            rng,
        )
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NumError::InvalidArgument("empty layer list".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].weight.cols() != pair[1].weight.rows() {
                return Err(NumError::Dim(format!(
                    "layer chain break: out {} vs in {}",
                    pair[0].weight.cols(),
                    pair[1].weight.rows()
                )));
            }
        }
        for layer in &layers {
            if layer.bias.len() != layer.weight.cols() {
                return Err(NumError::Dim("bias length vs weight cols".into()));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().weight.cols()
    }

    /// Forward pass; the returned tape captures everything needed for an
    /// exact gradient computation.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, MlpTape)> {
        if x.cols() != self.in_dim() {
            return Err(NumError::Dim(format!(
                "input cols {} != first-layer input dim {}",
                x.cols(),
                self.in_dim()
            )));
        }
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            layer_inputs.push(cur.clone());
            let mut pre = matmul(&cur, &layer.weight)?;
            for i in 0..pre.rows() {
                let row = pre.row_mut(i);
                for (v, b) in row.iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            pre_activations.push(pre.clone());
            cur = pre.map(|v| layer.activation.apply(v));
        }
        Ok((
            cur,
            MlpTape {
                layer_inputs,
                pre_activations,
            },
        ))
    }

    /// Convenience forward without keeping the tape.
    pub fn eval(&self, x: &Matrix) -> Result<Matrix> {
        self.forward(x).map(|(y, _)| y)
    }

    /// Exact gradients of the forward map recorded in `tape`.
    ///
    /// Returns the gradient with respect to the input and the per-layer
    /// parameter gradients.
    pub fn backward(&self, tape: &MlpTape, grad_out: &Matrix) -> Result<(Matrix, MlpGrads)> {
        if tape.layer_inputs.len() != self.layers.len() {
            return Err(NumError::TapeMismatch);
        }
        let last = self.layers.len() - 1;
        if grad_out.rows() != tape.pre_activations[last].rows()
            || grad_out.cols() != self.out_dim()
            || tape.layer_inputs[0].cols() != self.in_dim()
        {
            return Err(NumError::TapeMismatch);
        }
        let mut grads: Vec<(Matrix, Vec<f64>)> = self
            .layers
            .iter()
            .map(|l| {
                (
                    Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    vec![0.0; l.bias.len()],
                )
            })
            .collect();
        let mut grad = grad_out.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let pre = &tape.pre_activations[idx];
            if pre.cols() != layer.weight.cols() {
                return Err(NumError::TapeMismatch);
            }
            // d pre = d out * act'(pre)
            let mut dpre = grad;
            for i in 0..dpre.rows() {
                for j in 0..dpre.cols() {
                    let d = layer.activation.derivative(pre.at(i, j));
                    dpre.set(i, j, dpre.at(i, j) * d);
                }
            }
            let x = &tape.layer_inputs[idx];
            grads[idx].0 = matmul(&x.transpose(), &dpre)?;
            for i in 0..dpre.rows() {
                for (b, &v) in grads[idx].1.iter_mut().zip(dpre.row(i)) {
                    *b += v;
                }
            }
            grad = matmul(&dpre, &layer.weight.transpose())?;
        }
        Ok((grad, MlpGrads { layers: grads }))
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        Matrix::zeros(l.weight.rows(), l.weight.cols()),
                        vec![0.0; l.bias.len()],
                    )
                })
                .collect(),
        }
    }
}
