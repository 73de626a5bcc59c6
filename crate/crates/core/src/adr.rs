//! Attention reallocation over concatenated `Q`, `K`, `V` features.
//!
//! `f_in = concat(Q, K, V)` passes through a residual bottleneck whose two
//! convolution kernels are generated from `f_in` itself:
//!
//! ```text
//! f_out = f_in + conv(relu(conv(f_in, P1)), P2)
//! ```
//!
//! with `P1: D_c -> D_m` and `P2: D_m -> D_c` channels, `D_m < D_c`.
//! Splitting `f_out` back into three parts gives the reallocated `Q*, K*, V*`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tape, Tensor, Var};
use crate::params::{join, ParamRole, ParamVars, Parameterized};
use crate::pog::{PogGenerator, PogRecord, TargetShape};

pub const DEFAULT_BOTTLENECK: usize = 4;
pub const DEFAULT_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdrRecord {
    #[serde(rename = "D_c")]
    pub d_c: usize,
    #[serde(rename = "D_m")]
    pub d_m: usize,
    #[serde(rename = "D_k")]
    pub d_k: usize,
    pub gen1: PogRecord,
    pub gen2: PogRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdrBlock {
    gen1: PogGenerator,
    gen2: PogGenerator,
    d_c: usize,
    d_m: usize,
    d_k: usize,
}

impl AdrBlock {
    /// Random block over `d_c` concatenated channels.
    pub fn new(d_c: usize, d_m: usize, d_k: usize, embed_dim: usize, rng: &mut Rng) -> Result<Self> {
        if d_m == 0 || d_m >= d_c {
            return Err(Error::Config(format!(
                "bottleneck width D_m = {d_m} must satisfy 0 < D_m < D_c = {d_c}"
            )));
        }
        if !d_c.is_multiple_of(3) {
            return Err(Error::Config(format!(
                "D_c = {d_c} is not a concatenation of three equal parts"
            )));
        }
        let gen1 = PogGenerator::new(TargetShape::new(d_c, d_m, d_k), d_c, embed_dim, rng)?;
        let gen2 = PogGenerator::new(TargetShape::new(d_m, d_c, d_k), d_c, embed_dim, rng)?;
        Ok(Self {
            gen1,
            gen2,
            d_c,
            d_m,
            d_k,
        })
    }

    pub fn from_generators(gen1: PogGenerator, gen2: PogGenerator) -> Result<Self> {
        let (t1, t2) = (gen1.target(), gen2.target());
        let consistent = t1.c_out == t2.c_in
            && t1.c_in == t2.c_out
            && t1.kernel == t2.kernel
            && gen1.cond_channels() == t1.c_in
            && gen2.cond_channels() == t1.c_in;
        if !consistent {
            return Err(Error::Config(format!(
                "generator targets {t1:?} and {t2:?} do not form a bottleneck"
            )));
        }
        if t1.c_out >= t1.c_in || t1.c_in % 3 != 0 {
            return Err(Error::Config(format!(
                "invalid bottleneck {} -> {}",
                t1.c_in, t1.c_out
            )));
        }
        Ok(Self {
            d_c: t1.c_in,
            d_m: t1.c_out,
            d_k: t1.kernel,
            gen1,
            gen2,
        })
    }

    pub fn d_c(&self) -> usize {
        self.d_c
    }

    pub fn d_m(&self) -> usize {
        self.d_m
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    pub fn gen1(&self) -> &PogGenerator {
        &self.gen1
    }

    pub fn gen2(&self) -> &PogGenerator {
        &self.gen2
    }

    pub fn gen1_mut(&mut self) -> &mut PogGenerator {
        &mut self.gen1
    }

    pub fn gen2_mut(&mut self) -> &mut PogGenerator {
        &mut self.gen2
    }

    pub fn record(&self) -> AdrRecord {
        AdrRecord {
            d_c: self.d_c,
            d_m: self.d_m,
            d_k: self.d_k,
            gen1: self.gen1.record(),
            gen2: self.gen2.record(),
        }
    }

    /// Zero the output layers of both decoders, turning the block into the
    /// identity map.
    pub fn zero_decoders(&mut self) {
        for g in [&mut self.gen1, &mut self.gen2] {
            let mlp = g.decode_mlp_mut();
            mlp.w2 = Tensor::zeros(mlp.w2.shape());
            mlp.b2 = Tensor::zeros(mlp.b2.shape());
        }
    }

    pub fn freeze(&mut self) -> Result<()> {
        self.gen1.freeze()?;
        self.gen2.freeze()
    }

    pub fn is_frozen(&self) -> bool {
        self.gen1.is_frozen() && self.gen2.is_frozen()
    }

    /// Both generated kernels `(P1, P2)` for `f_in`.
    pub fn kernels(&self, f_in: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.gen1.generate(f_in)?, self.gen2.generate(f_in)?))
    }

    pub fn reallocate(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, self, false);
        let (qv, kv, vv) = (
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
        );
        let (qs, ks, vs) = self.reallocate_on(&mut tape, &pv, "", qv, kv, vv)?;
        Ok((
            tape.value(qs).clone(),
            tape.value(ks).clone(),
            tape.value(vs).clone(),
        ))
    }

    pub fn reallocate_on(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        prefix: &str,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<(Var, Var, Var)> {
        let shape = tape.value(q).shape().to_vec();
        if tape.value(k).shape() != shape.as_slice() || tape.value(v).shape() != shape.as_slice() {
            return Err(Error::Config("Q, K and V must share a shape".into()));
        }
        if shape.len() != 3 || 3 * shape[0] != self.d_c {
            return Err(Error::Config(format!(
                "attention features {shape:?} do not concatenate to D_c = {}",
                self.d_c
            )));
        }
        let f_in = tape.concat_channels(&[q, k, v])?;
        let p1 = self.gen1.generate_on(tape, pv, &join(prefix, "gen1"), f_in)?;
        let p2 = self.gen2.generate_on(tape, pv, &join(prefix, "gen2"), f_in)?;
        let squeezed = tape.conv2d(f_in, p1)?;
        let squeezed = tape.relu(squeezed);
        let branch = tape.conv2d(squeezed, p2)?;
        let f_out = tape.add(f_in, branch)?;
        let d = shape[0];
        let parts = tape.split_channels(f_out, &[d, d, d])?;
        Ok((parts[0], parts[1], parts[2]))
    }
}

impl Parameterized for AdrBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Tensor)) {
        self.gen1.visit(&join(prefix, "gen1"), f);
        self.gen2.visit(&join(prefix, "gen2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Tensor)) {
        self.gen1.visit_mut(&join(prefix, "gen1"), f);
        self.gen2.visit_mut(&join(prefix, "gen2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{matmul, Mlp2};

    fn rand_t(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn zero_decoders_are_identity() {
        let mut rng = Rng::new(40);
        let mut block = AdrBlock::new(12, 4, 3, 8, &mut rng).unwrap();
        block.zero_decoders();
        let (q, k, v) = (
            rand_t(&[4, 8, 8], &mut rng),
            rand_t(&[4, 8, 8], &mut rng),
            rand_t(&[4, 8, 8], &mut rng),
        );
        let (qs, ks, vs) = block.reallocate(&q, &k, &v).unwrap();
        assert!(qs.bit_eq(&q) && ks.bit_eq(&k) && vs.bit_eq(&v));
    }

    #[test]
    fn shapes_are_preserved() {
        let mut rng = Rng::new(41);
        let block = AdrBlock::new(12, 4, 3, 8, &mut rng).unwrap();
        let q = rand_t(&[4, 8, 8], &mut rng);
        let (qs, ks, vs) = block.reallocate(&q, &q, &q).unwrap();
        for t in [qs, ks, vs] {
            assert_eq!(t.shape(), &[4, 8, 8]);
        }
    }

    #[test]
    fn configuration_errors() {
        let mut rng = Rng::new(42);
        assert!(matches!(AdrBlock::new(12, 12, 3, 8, &mut rng), Err(Error::Config(_))));
        assert!(matches!(AdrBlock::new(10, 4, 3, 8, &mut rng), Err(Error::Config(_))));
        let block = AdrBlock::new(12, 4, 3, 8, &mut rng).unwrap();
        let q = rand_t(&[3, 4, 4], &mut rng);
        assert!(matches!(block.reallocate(&q, &q, &q), Err(Error::Config(_))));
    }

    #[test]
    fn pointwise_case_matches_matrix_form() {
        let mut rng = Rng::new(43);
        let block = AdrBlock::new(3, 1, 1, 4, &mut rng).unwrap();
        let (q, k, v) = (
            rand_t(&[1, 2, 2], &mut rng),
            rand_t(&[1, 2, 2], &mut rng),
            rand_t(&[1, 2, 2], &mut rng),
        );
        let f_in = crate::numerics::concat_channels(&[&q, &k, &v]).unwrap();
        let (p1, p2) = block.kernels(&f_in).unwrap();
        // A 1x1 convolution is a channel-mixing matmul on [C, H*W].
        let x = f_in.reshape(&[3, 4]).unwrap();
        let m1 = p1.reshape(&[1, 3]).unwrap();
        let m2 = p2.reshape(&[3, 1]).unwrap();
        let hidden = matmul(&m1, &x).unwrap().map(|v| v.max(0.0));
        let branch = matmul(&m2, &hidden).unwrap();
        let expected = Tensor::from_fn(&[3, 4], |i| x.data()[i] + branch.data()[i]);

        let (qs, ks, vs) = block.reallocate(&q, &k, &v).unwrap();
        let got = crate::numerics::concat_channels(&[&qs, &ks, &vs]).unwrap();
        assert!(got.reshape(&[3, 4]).unwrap().max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn from_generators_checks_consistency() {
        let mut rng = Rng::new(44);
        let g1 = PogGenerator::new(TargetShape::new(6, 2, 3), 6, 4, &mut rng).unwrap();
        let g2 = PogGenerator::new(TargetShape::new(2, 6, 3), 6, 4, &mut rng).unwrap();
        assert!(AdrBlock::from_generators(g1.clone(), g2.clone()).is_ok());
        let bad = PogGenerator::from_parts(
            TargetShape::new(3, 6, 3),
            Tensor::full(&[162, 4], 0.5),
            Mlp2::new(6, 6, 4, &mut rng),
            Mlp2::new(4, 4, 1, &mut rng),
        )
        .unwrap();
        assert!(AdrBlock::from_generators(g1, bad).is_err());
    }
}
