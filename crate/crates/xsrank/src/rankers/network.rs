use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numkernel::{Parameterized, Result, Tape, Tensor, TensorId};
use crate::rng::StreamKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

/// Two hidden layers of equal width feeding a scalar output:
/// `input -> w -> w -> 1`, dropout after each hidden activation in
/// training mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkParams {
    pub activation: Activation,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    w3: Tensor,
    b3: Tensor,
}

/// Tape-resident handles for one training/evaluation pass.
pub struct StagedNetwork {
    pub activation: Activation,
    pub ids: [TensorId; 6],
}

impl NetworkParams {
    /// Seeded uniform fan-in initialization: weights in ±1/sqrt(fan_in),
    /// biases zero.
    pub fn init(input_dim: usize, width: usize, activation: Activation, key: StreamKey) -> Self {
        let mut rng = key.rng();
        let mut uniform = |rows: usize, cols: usize| -> Tensor {
            let bound = 1.0 / (rows as f64).sqrt();
            let values: Vec<f64> = (0..rows * cols)
                .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound)
                .collect();
            Tensor::matrix(rows, cols, values).expect("finite init")
        };
        NetworkParams {
            activation,
            w1: uniform(input_dim, width),
            b1: Tensor::zeros(vec![width]),
            w2: uniform(width, width),
            b2: Tensor::zeros(vec![width]),
            w3: uniform(width, 1),
            b3: Tensor::zeros(vec![1]),
        }
    }

    pub fn zeros(input_dim: usize, width: usize, activation: Activation) -> Self {
        NetworkParams {
            activation,
            w1: Tensor::zeros(vec![input_dim, width]),
            b1: Tensor::zeros(vec![width]),
            w2: Tensor::zeros(vec![width, width]),
            b2: Tensor::zeros(vec![width]),
            w3: Tensor::zeros(vec![width, 1]),
            b3: Tensor::zeros(vec![1]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.w1.shape()[1]
    }

    /// Register all parameters as tape leaves.
    pub fn stage(&self, tape: &mut Tape) -> StagedNetwork {
        StagedNetwork {
            activation: self.activation,
            ids: [
                tape.leaf(self.w1.clone()),
                tape.leaf(self.b1.clone()),
                tape.leaf(self.w2.clone()),
                tape.leaf(self.b2.clone()),
                tape.leaf(self.w3.clone()),
                tape.leaf(self.b3.clone()),
            ],
        }
    }
}

impl Parameterized for NetworkParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }
}

impl StagedNetwork {
    fn activate(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        match self.activation {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
        }
    }

    /// Forward pass over an m×input snapshot, producing a length-m score
    /// vector. Dropout applies only in training mode.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: TensorId,
        dropout_rate: f64,
        rng: &mut ChaCha8Rng,
        training: bool,
    ) -> Result<TensorId> {
        let [w1, b1, w2, b2, w3, b3] = self.ids;
        let m = tape.value(x).dims2().0;
        let h1 = tape.matmul(x, w1)?;
        let h1 = tape.add_row(h1, b1)?;
        let h1 = self.activate(tape, h1)?;
        let h1 = tape.dropout(h1, dropout_rate, rng, training)?;
        let h2 = tape.matmul(h1, w2)?;
        let h2 = tape.add_row(h2, b2)?;
        let h2 = self.activate(tape, h2)?;
        let h2 = tape.dropout(h2, dropout_rate, rng, training)?;
        let out = tape.matmul(h2, w3)?;
        let out = tape.add_row(out, b3)?;
        tape.reshape(out, vec![m])
    }

    pub fn forward_eval(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let mut unused = StreamKey::root(0).rng();
        self.forward(tape, x, 0.0, &mut unused, false)
    }
}
