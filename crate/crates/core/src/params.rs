//! Named parameter traversal and binding onto a tape.
//!
//! Every learnable component exposes its tensors through [`Parameterized`]
//! under dotted hierarchical names (`decoder.1.attn.q.weight`). Forward
//! passes look their parameters up by the same names in a [`ParamVars`]
//! table, which keeps training, probing, checkpointing and gradient checks
//! on a single traversal order.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tape, Tensor, Var};

/// How a parameter is initialised and reset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Dense or convolution weight; drawn uniform in `±sqrt(1/fan_in)`.
    Weight { fan_in: usize },
    /// Additive bias; reset to zero.
    Bias,
    /// Per-parameter embedding rows; drawn uniform in `[-1, 1]` and then
    /// row-normalised.
    Embedding,
    /// Attention temperature; reset to `1.0`.
    Temperature,
}

impl ParamRole {
    /// Overwrite `t` with a fresh draw from this role's distribution.
    pub fn reset(self, t: &mut Tensor, rng: &mut Rng) {
        match self {
            ParamRole::Weight { fan_in } => {
                let bound = (1.0 / fan_in as f64).sqrt();
                for v in t.data_mut() {
                    *v = rng.uniform(-bound, bound);
                }
            }
            ParamRole::Bias => t.data_mut().iter_mut().for_each(|v| *v = 0.0),
            ParamRole::Temperature => t.data_mut().iter_mut().for_each(|v| *v = 1.0),
            ParamRole::Embedding => {
                let width = *t.shape().last().expect("embedding rank >= 1");
                for row in t.data_mut().chunks_mut(width) {
                    loop {
                        for v in row.iter_mut() {
                            *v = rng.uniform(-1.0, 1.0);
                        }
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm >= 1e-8 {
                            row.iter_mut().for_each(|v| *v /= norm);
                            break;
                        }
                    }
                }
            }
        }
    }

    pub fn init(self, shape: &[usize], rng: &mut Rng) -> Tensor {
        let mut t = Tensor::zeros(shape);
        self.reset(&mut t, rng);
        t
    }
}

/// Joins a prefix and a local name with a dot.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub trait Parameterized {
    /// Visit every parameter in a fixed order.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Tensor));

    /// Mutable counterpart of [`visit`](Self::visit); same order.
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Tensor));

    fn named_params(&self) -> Vec<(String, ParamRole, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, r, t| out.push((n.to_string(), r, t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, t| n += t.len());
        n
    }

    /// Replace all parameters, in visit order.
    fn load_params(&mut self, values: &[Tensor]) -> Result<()> {
        let mut idx = 0;
        let mut err = None;
        self.visit_mut("", &mut |name, _, t| {
            match values.get(idx) {
                Some(v) if v.shape() == t.shape() => *t = v.clone(),
                Some(v) if err.is_none() => {
                    err = Some(Error::Dimension(format!(
                        "{name}: expected {:?}, got {:?}",
                        t.shape(),
                        v.shape()
                    )))
                }
                None if err.is_none() => {
                    err = Some(Error::Contract(format!("missing value for {name}")))
                }
                _ => {}
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if idx != values.len() {
            return Err(Error::Contract(format!(
                "expected {idx} parameter tensors, got {}",
                values.len()
            )));
        }
        Ok(())
    }
}

/// Parameter name to tape variable lookup for one forward pass.
#[derive(Debug, Default, Clone)]
pub struct ParamVars {
    vars: HashMap<String, Var>,
    order: Vec<Var>,
}

impl ParamVars {
    /// Register every parameter of `module` on `tape`, as tracked leaves when
    /// `tracked` is set and as constants otherwise.
    pub fn bind<M: Parameterized + ?Sized>(tape: &mut Tape, module: &M, tracked: bool) -> Self {
        let mut pv = ParamVars::default();
        module.visit("", &mut |name, _, t| {
            let v = if tracked {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            };
            pv.vars.insert(name.to_string(), v);
            pv.order.push(v);
        });
        pv
    }

    /// Associate already-registered variables with the module's names, in
    /// visit order.
    pub fn from_vars<M: Parameterized + ?Sized>(module: &M, vars: &[Var]) -> Result<Self> {
        let mut pv = ParamVars::default();
        let mut idx = 0;
        module.visit("", &mut |name, _, _| {
            if let Some(&v) = vars.get(idx) {
                pv.vars.insert(name.to_string(), v);
                pv.order.push(v);
            }
            idx += 1;
        });
        if idx != vars.len() {
            return Err(Error::Contract(format!(
                "module has {idx} parameters, {} variables supplied",
                vars.len()
            )));
        }
        Ok(pv)
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unbound parameter {name}")))
    }

    /// Variables in visit order.
    pub fn ordered(&self) -> &[Var] {
        &self.order
    }
}
