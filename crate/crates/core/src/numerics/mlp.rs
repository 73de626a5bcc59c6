use crate::error::{dim_err, Result};
use crate::params::{join, ParamRole, ParamVars, Parameterized};

use super::{Rng, Tape, Tensor, Var};

/// Two-layer perceptron `W2 · relu(W1 · x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2 {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp2 {
    /// Weights uniform in `±sqrt(1/fan_in)`, biases zero.
    pub fn new(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut Rng) -> Self {
        Self {
            w1: ParamRole::Weight { fan_in: d_in }.init(&[d_hidden, d_in], rng),
            b1: Tensor::zeros(&[d_hidden]),
            w2: ParamRole::Weight { fan_in: d_hidden }.init(&[d_out, d_hidden], rng),
            b2: Tensor::zeros(&[d_out]),
        }
    }

    pub fn zeros(d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[d_hidden, d_in]),
            b1: Tensor::zeros(&[d_hidden]),
            w2: Tensor::zeros(&[d_out, d_hidden]),
            b2: Tensor::zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w2.shape()[0]
    }

    fn check(&self) -> Result<()> {
        let (h, o) = (self.d_hidden(), self.d_out());
        if self.b1.shape() != [h] || self.w2.shape() != [o, h] || self.b2.shape() != [o] {
            return Err(dim_err!(
                "mlp2: inconsistent parameter shapes w1 {:?} b1 {:?} w2 {:?} b2 {:?}",
                self.w1.shape(),
                self.b1.shape(),
                self.w2.shape(),
                self.b2.shape()
            ));
        }
        Ok(())
    }

    /// Plain evaluation on a 1-D input.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, self, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &pv, "", xv)?;
        Ok(tape.value(out).clone())
    }

    /// Apply to a 1-D input `[d_in]` or row-wise to `[R, d_in]`.
    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
        self.check()?;
        let shape = tape.value(x).shape().to_vec();
        let rows = match shape.as_slice() {
            [d] if *d == self.d_in() => tape.reshape(x, &[1, *d])?,
            [_, d] if *d == self.d_in() => x,
            _ => {
                return Err(dim_err!(
                    "mlp2: input {shape:?} does not match width {}",
                    self.d_in()
                ))
            }
        };
        let w1 = pv.get(&join(prefix, "w1"))?;
        let b1 = pv.get(&join(prefix, "b1"))?;
        let w2 = pv.get(&join(prefix, "w2"))?;
        let b2 = pv.get(&join(prefix, "b2"))?;
        let w1t = tape.transpose(w1)?;
        let h = tape.matmul(rows, w1t)?;
        let h = tape.add_row_bias(h, b1)?;
        let h = tape.relu(h);
        let w2t = tape.transpose(w2)?;
        let o = tape.matmul(h, w2t)?;
        let o = tape.add_row_bias(o, b2)?;
        if shape.len() == 1 {
            tape.reshape(o, &[self.d_out()])
        } else {
            Ok(o)
        }
    }
}

impl Parameterized for Mlp2 {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Tensor)) {
        f(&join(prefix, "w1"), ParamRole::Weight { fan_in: self.d_in() }, &self.w1);
        f(&join(prefix, "b1"), ParamRole::Bias, &self.b1);
        f(&join(prefix, "w2"), ParamRole::Weight { fan_in: self.d_hidden() }, &self.w2);
        f(&join(prefix, "b2"), ParamRole::Bias, &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Tensor)) {
        let (din, dh) = (self.d_in(), self.d_hidden());
        f(&join(prefix, "w1"), ParamRole::Weight { fan_in: din }, &mut self.w1);
        f(&join(prefix, "b1"), ParamRole::Bias, &mut self.b1);
        f(&join(prefix, "w2"), ParamRole::Weight { fan_in: dh }, &mut self.w2);
        f(&join(prefix, "b2"), ParamRole::Bias, &mut self.b2);
    }
}
