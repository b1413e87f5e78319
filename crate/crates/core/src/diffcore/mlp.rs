use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{ParamId, ParamStore, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Softplus,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

/// Feed-forward network whose weights live in a [`ParamStore`].
///
/// Weights are `[in, out]` and inputs are row batches `[n, in]`. A positive
/// `output_floor` is added after the final activation (used by scale heads).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpNet {
    pub name: String,
    pub widths: Vec<usize>,
    pub layers: Vec<Layer>,
    pub output_floor: f64,
}

impl MlpNet {
    /// Glorot-uniform weights, zero biases. `widths` includes input and output.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("network {name}: bad widths {widths:?}")));
        }
        if hidden == Activation::Softmax {
            return Err(Error::Config(format!("network {name}: softmax is only allowed as the final activation")));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
            let weight = store.insert(format!("{name}.{i}.weight"), Tensor::new(fan_in, fan_out, w)?);
            let bias = store.insert(format!("{name}.{i}.bias"), Tensor::zeros(1, fan_out));
            let activation = if i + 2 == widths.len() { output } else { hidden };
            layers.push(Layer {
                weight,
                bias,
                activation,
            });
        }
        Ok(Self {
            name: name.to_string(),
            widths: widths.to_vec(),
            layers,
            output_floor: 0.0,
        })
    }

    pub fn with_output_floor(mut self, floor: f64) -> Self {
        self.output_floor = floor;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    pub fn final_layer(&self) -> &Layer {
        self.layers.last().expect("at least one layer")
    }

    /// Records the forward pass. When `trainable` is false the weights enter
    /// the tape as constants and receive no gradient.
    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var, trainable: bool) -> Result<Var> {
        let [_, cols] = tape.shape(x);
        if cols != self.input_dim() {
            return Err(Error::Shape {
                op: "MlpNet::forward",
                left: tape.shape(x),
                right: [self.input_dim(), self.widths[1]],
            });
        }
        let mut h = x;
        for layer in &self.layers {
            let (w, b) = if trainable {
                (tape.param(store, layer.weight), tape.param(store, layer.bias))
            } else {
                (tape.frozen(store, layer.weight), tape.frozen(store, layer.bias))
            };
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = match layer.activation {
                Activation::Identity => z,
                Activation::Relu => tape.relu(z),
                Activation::Sigmoid => tape.sigmoid(z),
                Activation::Softplus => tape.softplus(z),
                Activation::Softmax => tape.softmax_rows(z),
            };
        }
        if self.output_floor != 0.0 {
            h = tape.add_scalar(h, self.output_floor);
        }
        Ok(h)
    }

    /// Forward pass without gradient recording.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(store, &mut tape, xv, false)?;
        Ok(tape.value(out).clone())
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }

    pub fn zero_final_layer(&self, store: &mut ParamStore) {
        let last = self.final_layer();
        store.get_mut(last.weight).data_mut().fill(0.0);
        store.get_mut(last.bias).data_mut().fill(0.0);
    }

    /// Copies every layer whose weight shape matches the same-index layer of
    /// `src`. Returns the number of layers copied.
    pub fn copy_matching_layers(&self, store: &mut ParamStore, src: &MlpNet, src_store: &ParamStore) -> usize {
        let mut copied = 0;
        for (dst, s) in self.layers.iter().zip(&src.layers) {
            if store.get(dst.weight).shape() == src_store.get(s.weight).shape() {
                *store.get_mut(dst.weight) = src_store.get(s.weight).clone();
                *store.get_mut(dst.bias) = src_store.get(s.bias).clone();
                copied += 1;
            }
        }
        copied
    }
}
