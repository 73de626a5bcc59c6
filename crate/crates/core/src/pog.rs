//! Orthogonal parameter generation.
//!
//! Each generated scalar owns a learned embedding row `e_i`. Normalising
//! the row gives `n_i`, and the Householder reflector `b_i = I - 2 n_i n_iᵀ`
//! supplies an orthonormal basis of the embedding space. An input-dependent
//! weight vector `W` on the simplex mixes the basis columns into the
//! specific embedding `s_i = Σ_j w_j b_{i,j}`, which a row-wise MLP decodes
//! into the parameter value.
//!
//! Because `b_i` is symmetric, `Σ_j w_j b_{i,j} = b_i W = W - 2<n_i, W> n_i`,
//! so generation never materialises the `N·D_e²` basis tensor.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{ops, Mlp2, Rng, Tape, Tensor, Var};
use crate::params::{join, ParamRole, ParamVars, Parameterized};

/// Minimum row norm accepted by [`normalize_embeddings`].
pub const MIN_EMBEDDING_NORM: f64 = 1e-8;
/// Default embedding width.
pub const DEFAULT_EMBED_DIM: usize = 64;

/// Shape of the convolution kernel a generator produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetShape {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl TargetShape {
    pub fn new(c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self { c_in, c_out, kernel }
    }

    /// Number of generated scalars `N = C_in · C_out · D_k²`.
    pub fn count(&self) -> usize {
        self.c_in * self.c_out * self.kernel * self.kernel
    }

    /// `[C_out, C_in, D_k, D_k]`.
    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kernel, self.kernel]
    }
}

/// Row-normalised embeddings `N_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedEmbeddings(Tensor);

impl NormalizedEmbeddings {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, i: usize) -> Tensor {
        let d = self.dim();
        Tensor::new(&[d], self.0.data()[i * d..(i + 1) * d].to_vec()).expect("row shape")
    }
}

/// One materialised reflector `I - 2 n nᵀ`; used by tests and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix(Tensor);

impl BasisMatrix {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Basis vector `b_{i,j}`, the `j`-th column.
    pub fn column(&self, j: usize) -> Tensor {
        let d = self.0.shape()[0];
        Tensor::from_fn(&[d], |r| self.0.data()[r * d + j])
    }
}

fn check_rows(e: &Tensor) -> Result<()> {
    if e.rank() != 2 {
        return Err(dim_err!("embeddings must be [N, D_e], got {:?}", e.shape()));
    }
    let d = e.shape()[1];
    for (row, chunk) in e.data().chunks(d).enumerate() {
        let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm >= MIN_EMBEDDING_NORM) {
            return Err(Error::DegenerateEmbedding { row, norm });
        }
    }
    Ok(())
}

/// `n_i = e_i / ‖e_i‖₂` for every row.
pub fn normalize_embeddings(e: &Tensor) -> Result<NormalizedEmbeddings> {
    let mut tape = Tape::new();
    let v = tape.constant(e.clone());
    let n = normalize_embeddings_on(&mut tape, v)?;
    Ok(NormalizedEmbeddings(tape.value(n).clone()))
}

/// Differentiable row normalisation; rejects rows with norm below
/// [`MIN_EMBEDDING_NORM`].
pub fn normalize_embeddings_on(tape: &mut Tape, e: Var) -> Result<Var> {
    check_rows(tape.value(e))?;
    tape.normalize_rows(e, 0.0)
}

/// Householder reflector `I - 2 n nᵀ` for a unit vector `n`.
pub fn build_basis(n: &Tensor) -> Result<BasisMatrix> {
    if n.rank() != 1 {
        return Err(dim_err!("build_basis: expected a vector, got {:?}", n.shape()));
    }
    let norm = n.norm();
    if (norm - 1.0).abs() > 1e-10 {
        return Err(Error::Contract(format!(
            "build_basis: input norm {norm} is not 1"
        )));
    }
    let d = n.len();
    let nd = n.data();
    Ok(BasisMatrix(Tensor::from_fn(&[d, d], |idx| {
        let (r, c) = (idx / d, idx % d);
        let id = if r == c { 1.0 } else { 0.0 };
        id - 2.0 * nd[r] * nd[c]
    })))
}

/// Simplex weights `softmax(M_θ3(pool(f_in)))`.
pub fn compute_weights(f_in: &Tensor, weight_mlp: &Mlp2) -> Result<Tensor> {
    if f_in.rank() != 3 || f_in.shape()[0] != weight_mlp.d_in() {
        return Err(dim_err!(
            "compute_weights: features {:?} for a {}-channel weight MLP",
            f_in.shape(),
            weight_mlp.d_in()
        ));
    }
    let pooled = ops::global_avg_pool(f_in)?;
    ops::softmax(&weight_mlp.apply(&pooled)?)
}

/// Specific embeddings `s_i = W - 2<n_i, W> n_i`, one row per parameter.
pub fn specific_embedding(normed: &NormalizedEmbeddings, weights: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let n = tape.constant(normed.0.clone());
    let w = tape.constant(weights.clone());
    let s = tape.householder_reflect(n, w)?;
    Ok(tape.value(s).clone())
}

/// Serializable description of a generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PogRecord {
    pub target_shape: TargetShape,
    #[serde(rename = "D_e")]
    pub embed_dim: usize,
    pub cond_channels: usize,
    pub frozen: bool,
}

/// Generates one convolution kernel per conditioning input.
#[derive(Debug, Clone, PartialEq)]
pub struct PogGenerator {
    embeddings: Tensor,
    weight_mlp: Mlp2,
    decode_mlp: Mlp2,
    target: TargetShape,
    frozen: bool,
    cache: Option<NormalizedEmbeddings>,
}

impl PogGenerator {
    /// Random generator conditioned on `cond_channels`-channel features.
    ///
    /// Embedding rows start as unit vectors; the weight MLP maps
    /// `D_c -> D_c -> D_e`, the decoder `D_e -> D_e -> 1`.
    pub fn new(
        target: TargetShape,
        cond_channels: usize,
        embed_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::validate(target, cond_channels, embed_dim)?;
        Ok(Self {
            embeddings: ParamRole::Embedding.init(&[target.count(), embed_dim], rng),
            weight_mlp: Mlp2::new(cond_channels, cond_channels, embed_dim, rng),
            decode_mlp: Mlp2::new(embed_dim, embed_dim, 1, rng),
            target,
            frozen: false,
            cache: None,
        })
    }

    fn validate(target: TargetShape, cond_channels: usize, embed_dim: usize) -> Result<()> {
        if embed_dim < 2 {
            return Err(Error::Config(format!("D_e must be >= 2, got {embed_dim}")));
        }
        if target.kernel.is_multiple_of(2) || target.count() == 0 || cond_channels == 0 {
            return Err(Error::Config(format!(
                "invalid generator target {target:?} with {cond_channels} conditioning channels"
            )));
        }
        Ok(())
    }

    /// Build from explicit parts. `embeddings` must be `[N, D_e]`.
    pub fn from_parts(
        target: TargetShape,
        embeddings: Tensor,
        weight_mlp: Mlp2,
        decode_mlp: Mlp2,
    ) -> Result<Self> {
        let embed_dim = *embeddings.shape().last().unwrap_or(&0);
        Self::validate(target, weight_mlp.d_in(), embed_dim)?;
        if embeddings.shape() != [target.count(), embed_dim] {
            return Err(dim_err!(
                "embeddings {:?} for {} parameters",
                embeddings.shape(),
                target.count()
            ));
        }
        if weight_mlp.d_out() != embed_dim || decode_mlp.d_in() != embed_dim || decode_mlp.d_out() != 1
        {
            return Err(dim_err!("generator MLP widths disagree with D_e = {embed_dim}"));
        }
        Ok(Self {
            embeddings,
            weight_mlp,
            decode_mlp,
            target,
            frozen: false,
            cache: None,
        })
    }

    pub fn target(&self) -> TargetShape {
        self.target
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn cond_channels(&self) -> usize {
        self.weight_mlp.d_in()
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn weight_mlp(&self) -> &Mlp2 {
        &self.weight_mlp
    }

    pub fn weight_mlp_mut(&mut self) -> &mut Mlp2 {
        &mut self.weight_mlp
    }

    pub fn decode_mlp(&self) -> &Mlp2 {
        &self.decode_mlp
    }

    pub fn decode_mlp_mut(&mut self) -> &mut Mlp2 {
        &mut self.decode_mlp
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn record(&self) -> PogRecord {
        PogRecord {
            target_shape: self.target,
            embed_dim: self.embed_dim(),
            cond_channels: self.cond_channels(),
            frozen: self.frozen,
        }
    }

    /// Fix the basis: cache `N_p` and stop gradients to the embeddings.
    pub fn freeze(&mut self) -> Result<()> {
        self.cache = Some(normalize_embeddings(&self.embeddings)?);
        self.frozen = true;
        Ok(())
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
        self.cache = None;
    }

    /// Normalised embeddings currently in effect.
    pub fn normalized(&self) -> Result<NormalizedEmbeddings> {
        match &self.cache {
            Some(c) if self.frozen => Ok(c.clone()),
            _ => normalize_embeddings(&self.embeddings),
        }
    }

    /// Kernel `[C_out, C_in, D_k, D_k]` for conditioning features `f_in`.
    pub fn generate(&self, f_in: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, self, false);
        let x = tape.constant(f_in.clone());
        let p = self.generate_on(&mut tape, &pv, "", x)?;
        Ok(tape.value(p).clone())
    }

    /// Differentiable generation with parameters looked up under `prefix`.
    pub fn generate_on(&self, tape: &mut Tape, pv: &ParamVars, prefix: &str, f_in: Var) -> Result<Var> {
        let fs = tape.value(f_in).shape();
        if fs.len() != 3 || fs[0] != self.cond_channels() {
            return Err(dim_err!(
                "generate: features {fs:?} for a generator conditioned on {} channels",
                self.cond_channels()
            ));
        }
        let normed = match (&self.cache, self.frozen) {
            (Some(c), true) => tape.constant(c.0.clone()),
            _ => {
                let e = pv.get(&join(prefix, "embeddings"))?;
                normalize_embeddings_on(tape, e)?
            }
        };
        let pooled = tape.global_avg_pool(f_in)?;
        let logits = self
            .weight_mlp
            .forward(tape, pv, &join(prefix, "weight_mlp"), pooled)?;
        let weights = tape.softmax(logits)?;
        let specific = tape.householder_reflect(normed, weights)?;
        let decoded = self
            .decode_mlp
            .forward(tape, pv, &join(prefix, "decode_mlp"), specific)?;
        tape.reshape(decoded, &self.target.kernel_shape())
    }
}

impl Parameterized for PogGenerator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Tensor)) {
        f(&join(prefix, "embeddings"), ParamRole::Embedding, &self.embeddings);
        self.weight_mlp.visit(&join(prefix, "weight_mlp"), f);
        self.decode_mlp.visit(&join(prefix, "decode_mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Tensor)) {
        f(&join(prefix, "embeddings"), ParamRole::Embedding, &mut self.embeddings);
        self.weight_mlp.visit_mut(&join(prefix, "weight_mlp"), f);
        self.decode_mlp.visit_mut(&join(prefix, "decode_mlp"), f);
        if self.frozen {
            // Embeddings may have been rewritten; a failed refresh leaves the
            // cache empty so the next generate() reports the bad row.
            self.cache = normalize_embeddings(&self.embeddings).ok();
        }
    }
}

/// Across-input variability of generated parameters.
///
/// Mean over parameter positions of the population standard deviation
/// across samples, divided by the mean absolute value plus `1e-12`. Zero
/// means every sample produced the same parameters.
pub fn parameter_variation(samples: &[Tensor]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Contract(format!(
            "parameter variation needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let shape = samples[0].shape();
    if samples.iter().any(|s| s.shape() != shape) {
        return Err(dim_err!("parameter variation: samples differ in shape"));
    }
    let k = samples.len() as f64;
    let n = samples[0].len();
    let mut std_total = 0.0;
    let mut abs_total = 0.0;
    for t in 0..n {
        let mean = samples.iter().map(|s| s.data()[t]).sum::<f64>() / k;
        let var = samples
            .iter()
            .map(|s| (s.data()[t] - mean).powi(2))
            .sum::<f64>()
            / k;
        std_total += var.sqrt();
        abs_total += samples.iter().map(|s| s.data()[t].abs()).sum::<f64>() / k;
    }
    Ok((std_total / n as f64) / (abs_total / n as f64 + 1e-12))
}

/// [`parameter_variation`] of a generator's output over `inputs`.
pub fn degradation_score(gen: &PogGenerator, inputs: &[Tensor]) -> Result<f64> {
    if inputs.len() < 2 {
        return Err(Error::Contract(format!(
            "degradation_score needs at least 2 inputs, got {}",
            inputs.len()
        )));
    }
    let generated = inputs
        .iter()
        .map(|x| gen.generate(x))
        .collect::<Result<Vec<_>>>()?;
    parameter_variation(&generated)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_t(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn normalize_examples() {
        let e = Tensor::new(&[2, 2], vec![3.0, 4.0, 0.6, 0.8]).unwrap();
        let n = normalize_embeddings(&e).unwrap();
        assert!((n.tensor().data()[0] - 0.6).abs() < 1e-15);
        assert!((n.tensor().data()[1] - 0.8).abs() < 1e-15);
        assert!(n.row(1).max_abs_diff(&Tensor::new(&[2], vec![0.6, 0.8]).unwrap()) < 1e-15);
    }

    #[test]
    fn normalize_random_rows_are_unit() {
        let mut rng = Rng::new(31);
        let e = rand_t(&[40, 7], &mut rng);
        let n = normalize_embeddings(&e).unwrap();
        for i in 0..40 {
            assert!((n.row(i).norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let e = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1e-9]).unwrap();
        assert!(matches!(
            normalize_embeddings(&e),
            Err(Error::DegenerateEmbedding { row: 1, .. })
        ));
    }

    #[test]
    fn basis_examples() {
        let b = build_basis(&Tensor::new(&[2], vec![1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(b.tensor().data(), &[-1.0, 0.0, 0.0, 1.0]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let b = build_basis(&Tensor::new(&[2], vec![h, h]).unwrap()).unwrap();
        let expected = Tensor::new(&[2, 2], vec![0.0, -1.0, -1.0, 0.0]).unwrap();
        assert!(b.tensor().max_abs_diff(&expected) < 1e-15);
        assert!(build_basis(&Tensor::new(&[2], vec![1.0, 1.0]).unwrap()).is_err());
    }

    #[test]
    fn specific_embedding_examples() {
        let n = NormalizedEmbeddings(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let one_hot = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
        assert_eq!(specific_embedding(&n, &one_hot).unwrap().data(), &[-1.0, 0.0]);
        let half = Tensor::new(&[2], vec![0.5, 0.5]).unwrap();
        assert_eq!(specific_embedding(&n, &half).unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn zero_weight_mlp_gives_uniform_weights() {
        let mut rng = Rng::new(5);
        let x = rand_t(&[3, 4, 4], &mut rng);
        let w = compute_weights(&x, &Mlp2::zeros(3, 3, 8)).unwrap();
        assert!(w.data().iter().all(|&v| (v - 0.125).abs() < 1e-15));
        assert!(compute_weights(&rand_t(&[2, 4, 4], &mut rng), &Mlp2::zeros(3, 3, 8)).is_err());
    }

    #[test]
    fn weights_on_simplex_and_input_dependent() {
        let mut rng = Rng::new(6);
        let mlp = Mlp2::new(4, 4, 16, &mut rng);
        let a = compute_weights(&rand_t(&[4, 5, 5], &mut rng), &mlp).unwrap();
        let b = compute_weights(&rand_t(&[4, 5, 5], &mut rng), &mlp).unwrap();
        assert!((a.sum() - 1.0).abs() < 1e-12);
        assert!(a.data().iter().all(|&v| v >= 0.0));
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn zero_decoder_output_layer_gives_zero_kernel() {
        let mut rng = Rng::new(7);
        let mut g = PogGenerator::new(TargetShape::new(3, 2, 3), 5, 8, &mut rng).unwrap();
        g.decode_mlp_mut().w2 = Tensor::zeros(&[1, 8]);
        g.decode_mlp_mut().b2 = Tensor::zeros(&[1]);
        let p = g.generate(&rand_t(&[5, 4, 4], &mut rng)).unwrap();
        assert_eq!(p.shape(), &[2, 3, 3, 3]);
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generate_rejects_wrong_channels() {
        let mut rng = Rng::new(8);
        let g = PogGenerator::new(TargetShape::new(3, 2, 1), 5, 4, &mut rng).unwrap();
        assert!(matches!(g.generate(&Tensor::zeros(&[4, 2, 2])), Err(Error::Dimension(_))));
        assert!(PogGenerator::new(TargetShape::new(3, 2, 1), 5, 1, &mut rng).is_err());
    }

    #[test]
    fn freezing_keeps_output_and_tracks_resets() {
        let mut rng = Rng::new(9);
        let mut g = PogGenerator::new(TargetShape::new(2, 2, 3), 3, 6, &mut rng).unwrap();
        let x = rand_t(&[3, 4, 4], &mut rng);
        let before = g.generate(&x).unwrap();
        g.freeze().unwrap();
        assert!(g.is_frozen());
        assert!(g.generate(&x).unwrap().bit_eq(&before));
        let mut r2 = Rng::new(99);
        g.visit_mut("", &mut |_, role, t| role.reset(t, &mut r2));
        let direct = {
            let mut h = g.clone();
            h.unfreeze();
            h.generate(&x).unwrap()
        };
        assert!(g.generate(&x).unwrap().bit_eq(&direct));
    }

    #[test]
    fn degradation_score_contract() {
        let mut rng = Rng::new(10);
        let g = PogGenerator::new(TargetShape::new(2, 2, 1), 3, 4, &mut rng).unwrap();
        let x = rand_t(&[3, 4, 4], &mut rng);
        assert!(degradation_score(&g, std::slice::from_ref(&x)).is_err());
        let same = degradation_score(&g, &[x.clone(), x.clone(), x]).unwrap();
        assert!(same.abs() < 1e-12);
    }

    #[test]
    fn variation_matches_brute_force() {
        let mut rng = Rng::new(12);
        let samples: Vec<Tensor> = (0..5).map(|_| rand_t(&[2, 3], &mut rng)).collect();
        let mut stds = Vec::new();
        let mut abs_means = Vec::new();
        for t in 0..6 {
            let vals: Vec<f64> = samples.iter().map(|s| s.data()[t]).collect();
            let m = vals.iter().sum::<f64>() / 5.0;
            stds.push((vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 5.0).sqrt());
            abs_means.push(vals.iter().map(|v| v.abs()).sum::<f64>() / 5.0);
        }
        let expected =
            (stds.iter().sum::<f64>() / 6.0) / (abs_means.iter().sum::<f64>() / 6.0 + 1e-12);
        assert!((parameter_variation(&samples).unwrap() - expected).abs() < 1e-14);
    }
}
