//! Three-layer perceptron used as discriminator trunk and mapping layer.

use rand_chacha::ChaCha8Rng;

use super::param::Param;
use super::tape::{Tape, Var};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// `act3(W3 act2(W2 act1(W1 x + b1) + b2) + b3)` with weights stored as
/// `(in, out)` matrices applied on the right of row vectors.
#[derive(Debug, Clone)]
pub struct Mlp3 {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
    pub w3: Param,
    pub b3: Param,
    pub acts: [Activation; 3],
}

impl Mlp3 {
    /// Build with seeded uniform init. `dims = [input, hidden1, hidden2, output]`.
    pub fn new(prefix: &str, dims: [usize; 4], acts: [Activation; 3], rng: &mut ChaCha8Rng) -> Self {
        let p = |s: &str| format!("{prefix}.{s}");
        Self {
            w1: Param::uniform(p("w1"), vec![dims[0], dims[1]], dims[0], rng),
            b1: Param::zeros(p("b1"), vec![dims[1]]),
            w2: Param::uniform(p("w2"), vec![dims[1], dims[2]], dims[1], rng),
            b2: Param::zeros(p("b2"), vec![dims[2]]),
            w3: Param::uniform(p("w3"), vec![dims[2], dims[3]], dims[2], rng),
            b3: Param::zeros(p("b3"), vec![dims[3]]),
            acts,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape[0]
    }

    pub fn output_dim(&self) -> usize {
        self.w3.shape[1]
    }

    /// Forward pass. Accepts `(n, d)` input or a rank-1 `(d)` vector, which
    /// is treated as a single row and returned rank-1.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, NnError> {
        let in_shape = tape.shape(x).to_vec();
        let rank1 = in_shape.len() == 1;
        let d = *in_shape.last().unwrap();
        if d != self.input_dim() {
            return Err(NnError::Shape {
                context: "mlp input vs w1 rows".into(),
                left: d,
                right: self.input_dim(),
            });
        }
        let mut h = if rank1 {
            tape.reshape(x, vec![1, d])?
        } else {
            x
        };
        let layers = [
            (&self.w1, &self.b1, self.acts[0]),
            (&self.w2, &self.b2, self.acts[1]),
            (&self.w3, &self.b3, self.acts[2]),
        ];
        for (w, b, act) in layers {
            let wv = tape.param(w);
            let bv = tape.param(b);
            let z = tape.matmul(h, wv)?;
            let z = tape.add_row(z, bv)?;
            h = act.apply(tape, z);
        }
        if rank1 {
            let out = self.output_dim();
            h = tape.reshape(h, vec![out])?;
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
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
