//! Candidate-weighting dynamic convolution.
//!
//! `K` candidate kernels are mixed by `π = softmax(mlp(pool(x)))` and the
//! mixed kernel is applied as an ordinary convolution. This is the
//! mechanism whose candidates tend to collapse onto near-identical kernels.

use crate::error::{dim_err, Error, Result};
use crate::numerics::{ops, Mlp2, Rng, Tape, Tensor, Var};
use crate::params::{join, ParamRole, ParamVars, Parameterized};

pub const DEFAULT_CANDIDATES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicConv {
    candidates: Tensor,
    att_mlp: Mlp2,
}

impl DynamicConv {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, num_candidates: usize, rng: &mut Rng) -> Result<Self> {
        if num_candidates == 0 {
            return Err(Error::Config("dynamic convolution needs K >= 1".into()));
        }
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size {kernel} must be odd")));
        }
        let fan_in = c_in * kernel * kernel;
        Ok(Self {
            candidates: ParamRole::Weight { fan_in }
                .init(&[num_candidates, c_out, c_in, kernel, kernel], rng),
            att_mlp: Mlp2::new(c_in, c_in, num_candidates, rng),
        })
    }

    /// `candidates` is `[K, C_out, C_in, D_k, D_k]`; `att_mlp` maps
    /// `C_in -> K`.
    pub fn from_parts(candidates: Tensor, att_mlp: Mlp2) -> Result<Self> {
        let s = candidates.shape();
        if s.len() != 5 || s[3] != s[4] || s[3].is_multiple_of(2) {
            return Err(dim_err!("candidates must be [K, C_out, C_in, k, k], got {s:?}"));
        }
        if att_mlp.d_in() != s[2] || att_mlp.d_out() != s[0] {
            return Err(dim_err!(
                "attention MLP {} -> {} for candidates {s:?}",
                att_mlp.d_in(),
                att_mlp.d_out()
            ));
        }
        Ok(Self { candidates, att_mlp })
    }

    pub fn num_candidates(&self) -> usize {
        self.candidates.shape()[0]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        let s = self.candidates.shape();
        [s[1], s[2], s[3], s[4]]
    }

    pub fn candidates(&self) -> &Tensor {
        &self.candidates
    }

    pub fn candidate(&self, k: usize) -> Tensor {
        let shape = self.kernel_shape();
        let m: usize = shape.iter().product();
        Tensor::new(&shape, self.candidates.data()[k * m..(k + 1) * m].to_vec()).expect("candidate shape")
    }

    pub fn att_mlp(&self) -> &Mlp2 {
        &self.att_mlp
    }

    pub fn att_mlp_mut(&mut self) -> &mut Mlp2 {
        &mut self.att_mlp
    }

    fn eval<T>(&self, x: &Tensor, f: impl FnOnce(&mut Tape, &ParamVars, Var) -> Result<T>) -> Result<T> {
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, self, false);
        let xv = tape.constant(x.clone());
        f(&mut tape, &pv, xv)
    }

    /// Candidate weights `π` for input `x`.
    pub fn attention(&self, x: &Tensor) -> Result<Tensor> {
        self.eval(x, |t, pv, xv| {
            let pi = self.attention_on(t, pv, "", xv)?;
            Ok(t.value(pi).clone())
        })
    }

    /// Mixed kernel `Σ_k π_k · candidate_k` for input `x`.
    pub fn effective_kernel(&self, x: &Tensor) -> Result<Tensor> {
        self.eval(x, |t, pv, xv| {
            let w = self.effective_kernel_on(t, pv, "", xv)?;
            Ok(t.value(w).clone())
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.eval(x, |t, pv, xv| {
            let y = self.forward_on(t, pv, "", xv)?;
            Ok(t.value(y).clone())
        })
    }

    pub fn attention_on(&self, tape: &mut Tape, pv: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
        let s = tape.value(x).shape();
        if s.len() != 3 || s[0] != self.att_mlp.d_in() {
            return Err(dim_err!(
                "dynamic conv: input {s:?} for {} input channels",
                self.att_mlp.d_in()
            ));
        }
        let pooled = tape.global_avg_pool(x)?;
        let logits = self.att_mlp.forward(tape, pv, &join(prefix, "att_mlp"), pooled)?;
        tape.softmax(logits)
    }

    pub fn effective_kernel_on(&self, tape: &mut Tape, pv: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
        let pi = self.attention_on(tape, pv, prefix, x)?;
        let k = self.num_candidates();
        let shape = self.kernel_shape();
        let m: usize = shape.iter().product();
        let pi_row = tape.reshape(pi, &[1, k])?;
        let cands = pv.get(&join(prefix, "candidates"))?;
        let flat = tape.reshape(cands, &[k, m])?;
        let mixed = tape.matmul(pi_row, flat)?;
        tape.reshape(mixed, &shape)
    }

    pub fn forward_on(&self, tape: &mut Tape, pv: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
        let w = self.effective_kernel_on(tape, pv, prefix, x)?;
        tape.conv2d(x, w)
    }

    /// Pairwise cosine similarity of the flattened candidates.
    pub fn candidate_similarity(&self) -> Result<Tensor> {
        let k = self.num_candidates();
        let m = self.candidates.len() / k;
        let rows: Vec<&[f64]> = self.candidates.data().chunks(m).collect();
        let norms: Vec<f64> = rows
            .iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        if let Some(index) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::DegenerateCandidate { index });
        }
        Ok(Tensor::from_fn(&[k, k], |idx| {
            let (i, j) = (idx / k, idx % k);
            let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
            (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
        }))
    }

    /// Across-input variation of the effective kernel; see
    /// [`parameter_variation`](crate::pog::parameter_variation).
    pub fn degradation_score(&self, inputs: &[Tensor]) -> Result<f64> {
        if inputs.len() < 2 {
            return Err(Error::Contract(format!(
                "degradation_score needs at least 2 inputs, got {}",
                inputs.len()
            )));
        }
        let kernels = inputs
            .iter()
            .map(|x| self.effective_kernel(x))
            .collect::<Result<Vec<_>>>()?;
        crate::pog::parameter_variation(&kernels)
    }

    /// Convolve with every candidate separately and mix the outputs with `π`.
    /// Equal to [`forward`](Self::forward) by linearity; kept for checks.
    pub fn forward_by_outputs(&self, x: &Tensor) -> Result<Tensor> {
        let pi = self.attention(x)?;
        let mut acc: Option<Tensor> = None;
        for (k, &p) in pi.data().iter().enumerate() {
            let y = ops::conv2d(x, &self.candidate(k))?.map(|v| v * p);
            acc = Some(match acc {
                None => y,
                Some(a) => Tensor::from_fn(a.shape(), |i| a.data()[i] + y.data()[i]),
            });
        }
        Ok(acc.expect("K >= 1"))
    }
}

impl Parameterized for DynamicConv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Tensor)) {
        let [_, ci, k, _] = self.kernel_shape();
        f(&join(prefix, "candidates"), ParamRole::Weight { fan_in: ci * k * k }, &self.candidates);
        self.att_mlp.visit(&join(prefix, "att_mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Tensor)) {
        let [_, ci, k, _] = self.kernel_shape();
        f(&join(prefix, "candidates"), ParamRole::Weight { fan_in: ci * k * k }, &mut self.candidates);
        self.att_mlp.visit_mut(&join(prefix, "att_mlp"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_t(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn single_candidate_is_static_conv() {
        let mut rng = Rng::new(50);
        let dc = DynamicConv::new(2, 3, 3, 1, &mut rng).unwrap();
        let x = rand_t(&[2, 5, 5], &mut rng);
        let y = dc.forward(&x).unwrap();
        let reference = ops::conv2d(&x, &dc.candidate(0)).unwrap();
        assert!(y.max_abs_diff(&reference) < 1e-15);
    }

    #[test]
    fn one_hot_attention_selects_candidate() {
        let mut rng = Rng::new(51);
        let mut dc = DynamicConv::new(2, 2, 3, 3, &mut rng).unwrap();
        let mlp = dc.att_mlp_mut();
        mlp.w1 = Tensor::zeros(mlp.w1.shape());
        mlp.w2 = Tensor::zeros(mlp.w2.shape());
        mlp.b2 = Tensor::new(&[3], vec![-800.0, 800.0, -800.0]).unwrap();
        let x = rand_t(&[2, 4, 4], &mut rng);
        let y = dc.forward(&x).unwrap();
        let reference = ops::conv2d(&x, &dc.candidate(1)).unwrap();
        assert!(y.max_abs_diff(&reference) < 1e-12);
    }

    #[test]
    fn linear_in_candidates() {
        let mut rng = Rng::new(52);
        for _ in 0..10 {
            let dc = DynamicConv::new(3, 2, 3, 3, &mut rng).unwrap();
            let x = rand_t(&[3, 6, 5], &mut rng);
            let a = dc.forward(&x).unwrap();
            let b = dc.forward_by_outputs(&x).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-10);
        }
    }

    #[test]
    fn similarity_cases() {
        let mut rng = Rng::new(53);
        let cand = rand_t(&[1, 2, 2, 1, 1], &mut rng);
        let dup = Tensor::new(&[3, 2, 2, 1, 1], cand.data().repeat(3)).unwrap();
        let dc = DynamicConv::from_parts(dup, Mlp2::new(2, 2, 3, &mut rng)).unwrap();
        let s = dc.candidate_similarity().unwrap();
        assert!(s.data().iter().all(|v| (v - 1.0).abs() < 1e-12));

        let ortho = Tensor::new(&[2, 1, 2, 1, 1], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let dc = DynamicConv::from_parts(ortho, Mlp2::new(2, 2, 2, &mut rng)).unwrap();
        let s = dc.candidate_similarity().unwrap();
        assert!(s.at(&[0, 1]).abs() < 1e-12 && s.at(&[1, 0]).abs() < 1e-12);
        assert!((s.at(&[0, 0]) - 1.0).abs() < 1e-12);

        let zero = Tensor::new(&[2, 1, 1, 1, 1], vec![1.0, 0.0]).unwrap();
        let dc = DynamicConv::from_parts(zero, Mlp2::new(1, 1, 2, &mut rng)).unwrap();
        assert!(matches!(
            dc.candidate_similarity(),
            Err(Error::DegenerateCandidate { index: 1 })
        ));
    }

    #[test]
    fn similarity_matches_direct_computation() {
        let mut rng = Rng::new(54);
        let dc = DynamicConv::new(2, 3, 3, 4, &mut rng).unwrap();
        let s = dc.candidate_similarity().unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let (a, b) = (dc.candidate(i), dc.candidate(j));
                let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
                let expected = dot / (a.norm() * b.norm());
                assert!((s.at(&[i, j]) - expected).abs() < 1e-14);
                assert!((s.at(&[i, j]) - s.at(&[j, i])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn degradation_score_zero_iff_attention_is_blind() {
        let mut rng = Rng::new(57);
        let mut dc = DynamicConv::new(3, 2, 3, 4, &mut rng).unwrap();
        let inputs: Vec<Tensor> = (0..6).map(|_| rand_t(&[3, 5, 5], &mut rng)).collect();
        assert!(dc.degradation_score(&inputs).unwrap() > 1e-6);
        *dc.att_mlp_mut() = Mlp2::zeros(3, 3, 4);
        assert!(dc.degradation_score(&inputs).unwrap().abs() < 1e-12);
        assert!(dc.degradation_score(&inputs[..1]).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut rng = Rng::new(55);
        assert!(DynamicConv::new(2, 2, 3, 0, &mut rng).is_err());
        let dc = DynamicConv::new(2, 2, 3, 2, &mut rng).unwrap();
        assert!(matches!(dc.forward(&Tensor::zeros(&[3, 4, 4])), Err(Error::Dimension(_))));
    }
}
