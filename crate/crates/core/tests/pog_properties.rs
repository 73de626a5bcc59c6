//! Orthogonal basis, closed-form embedding and generator properties.

mod common;

use common::{cases, lu_det, max_abs, naive_matmul, nearby, rand_t, smooth_verdict, unit_vector};
use proptest::prelude::*;
use redlab::numerics::gradcheck::{finite_diff_check, DEFAULT_EPS};
use redlab::numerics::{ops, softmax, GradCheckReport, Mlp2};
use redlab::pog::{
    build_basis, compute_weights, degradation_score, normalize_embeddings, specific_embedding,
    PogGenerator, TargetShape,
};
use redlab::{ParamVars, Parameterized, Rng, Tensor};

fn transpose(m: &Tensor) -> Tensor {
    ops::transpose(m).unwrap()
}

fn minus_identity(m: &Tensor) -> Tensor {
    let d = m.shape()[0];
    Tensor::from_fn(m.shape(), |i| m.data()[i] - if i / d == i % d { 1.0 } else { 0.0 })
}

#[test]
fn householder_bases_are_orthogonal_symmetric_involutory() {
    for d in [2usize, 4, 16, 64] {
        for seed in 0..50u64 {
            let mut rng = Rng::new(seed * 1000 + d as u64);
            let b = build_basis(&unit_vector(d, &mut rng)).unwrap().tensor().clone();
            let bt = transpose(&b);
            assert!(max_abs(&minus_identity(&naive_matmul(&bt, &b))) < 1e-10);
            assert!(b.max_abs_diff(&bt) < 1e-12);
            assert!(max_abs(&minus_identity(&naive_matmul(&b, &b))) < 1e-10);
        }
    }
}

#[test]
fn householder_determinant_is_minus_one() {
    for seed in 0..20 {
        let mut rng = Rng::new(seed);
        let b = build_basis(&unit_vector(16, &mut rng)).unwrap();
        assert!((lu_det(b.tensor()) + 1.0).abs() < 1e-8);
    }
}

#[test]
fn build_basis_rejects_non_unit_input() {
    assert!(build_basis(&Tensor::new(&[2], vec![1.0, 1.0]).unwrap()).is_err());
}

/// `Σ_j w_j b_{i,j}` with every basis materialised.
fn materialised_embeddings(normed: &Tensor, w: &Tensor) -> Tensor {
    let (n, d) = (normed.shape()[0], normed.shape()[1]);
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let row = Tensor::new(&[d], normed.data()[i * d..(i + 1) * d].to_vec()).unwrap();
        let basis = build_basis(&row).unwrap();
        for j in 0..d {
            let col = basis.column(j);
            for r in 0..d {
                let v = out.at(&[i, r]) + w.data()[j] * col.data()[r];
                out.set(&[i, r], v);
            }
        }
    }
    out
}

#[test]
fn closed_form_matches_materialised_bases_and_preserves_norm() {
    let mut rng = Rng::new(7);
    for _ in 0..100 {
        let d = rng.int_inclusive(2, 16);
        let n = rng.int_inclusive(1, 6);
        let normed = normalize_embeddings(&rand_t(&[n, d], -1.0, 1.0, &mut rng)).unwrap();
        let w = softmax(&rand_t(&[d], -3.0, 3.0, &mut rng)).unwrap();
        let closed = specific_embedding(&normed, &w).unwrap();
        assert!(closed.max_abs_diff(&materialised_embeddings(normed.tensor(), &w)) < 1e-12);
        let wn = w.norm();
        let sq: f64 = w.data().iter().map(|v| v * v).sum();
        for row in closed.data().chunks(d) {
            let rn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((rn - wn).abs() < 1e-10);
            assert!((rn * rn - sq).abs() < 1e-10);
        }
    }
}

fn mlp_ref(m: &Mlp2, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = (0..m.d_hidden())
        .map(|r| {
            let s: f64 = (0..m.d_in()).map(|c| m.w1.at(&[r, c]) * x[c]).sum();
            (s + m.b1.data()[r]).max(0.0)
        })
        .collect();
    (0..m.d_out())
        .map(|r| (0..m.d_hidden()).map(|c| m.w2.at(&[r, c]) * h[c]).sum::<f64>() + m.b2.data()[r])
        .collect()
}

#[test]
fn generate_matches_hand_composition() {
    let mut rng = Rng::new(8);
    let mut gen = PogGenerator::new(TargetShape::new(2, 2, 1), 3, 4, &mut rng).unwrap();
    gen.weight_mlp_mut().b1 = rand_t(&[3], -0.3, 0.3, &mut rng);
    gen.decode_mlp_mut().b2 = rand_t(&[1], -0.3, 0.3, &mut rng);
    let f = rand_t(&[3, 2, 2], -1.0, 1.0, &mut rng);

    let pooled: Vec<f64> = f.data().chunks(4).map(|c| c.iter().sum::<f64>() / 4.0).collect();
    let logits = mlp_ref(gen.weight_mlp(), &pooled);
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
    let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp() / z).collect();
    let mut expected = Vec::new();
    for e in gen.embeddings().data().chunks(4) {
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n: Vec<f64> = e.iter().map(|v| v / norm).collect();
        let s: Vec<f64> = (0..4)
            .map(|r| {
                (0..4)
                    .map(|j| {
                        let b = if r == j { 1.0 } else { 0.0 } - 2.0 * n[r] * n[j];
                        w[j] * b
                    })
                    .sum()
            })
            .collect();
        expected.push(mlp_ref(gen.decode_mlp(), &s)[0]);
    }
    let p = gen.generate(&f).unwrap();
    assert_eq!(p.shape(), &[2, 2, 1, 1]);
    let expected = Tensor::new(&[2, 2, 1, 1], expected).unwrap();
    assert!(p.max_abs_diff(&expected) < 1e-12);
}

#[test]
fn zero_weight_mlp_gives_uniform_weights() {
    let f = Tensor::full(&[3, 2, 2], 0.7);
    let w = compute_weights(&f, &Mlp2::zeros(3, 3, 5)).unwrap();
    assert!(w.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
}

fn inputs(n: usize, c: usize, rng: &mut Rng) -> Vec<Tensor> {
    (0..n).map(|_| rand_t(&[c, 4, 4], -1.0, 1.0, rng)).collect()
}

#[test]
fn degradation_score_detects_input_blind_generators() {
    let mut rng = Rng::new(9);
    let mut gen = PogGenerator::new(TargetShape::new(6, 2, 3), 6, 16, &mut rng).unwrap();
    let xs = inputs(8, 6, &mut rng);
    assert!(degradation_score(&gen, &xs).unwrap() > 1e-6);
    let same = vec![xs[0].clone(); 4];
    assert!(degradation_score(&gen, &same).unwrap().abs() < 1e-12);
    *gen.weight_mlp_mut() = Mlp2::zeros(6, 6, 16);
    assert!(degradation_score(&gen, &xs).unwrap().abs() < 1e-12);
}

fn generator_gradcheck(seed: u64, embed_dim: usize) -> GradCheckReport {
    let mut rng = Rng::new(seed);
    let mut gen = PogGenerator::new(TargetShape::new(2, 3, 3), 4, embed_dim, &mut rng).unwrap();
    gen.weight_mlp_mut().b1 = rand_t(&[4], -0.2, 0.2, &mut rng);
    gen.decode_mlp_mut().b1 = rand_t(&[embed_dim], -0.2, 0.2, &mut rng);
    let f = rand_t(&[4, 3, 3], -1.0, 1.0, &mut rng);
    let target = nearby(&gen.generate(&f).unwrap(), 0.01, &mut rng);
    let params: Vec<Tensor> = gen.named_params().into_iter().map(|(_, _, t)| t).collect();
    let report = finite_diff_check(
        |tape, vars| {
            let pv = ParamVars::from_vars(&gen, vars)?;
            let x = tape.constant(f.clone());
            let p = gen.generate_on(tape, &pv, "", x)?;
            let r = tape.constant(target.clone());
            tape.mse(p, r)
        },
        &params,
        DEFAULT_EPS,
    )
    .unwrap();
    assert_eq!(report.checked, gen.param_count());
    report
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(cases(20)))]

    #[test]
    fn generator_gradients_match_finite_differences(seed in any::<u64>(), d in prop::sample::select(vec![2usize, 4, 8])) {
        let verdict = smooth_verdict(&generator_gradcheck(seed, d), 1e-4);
        prop_assert!(verdict.is_ok(), "{:?}", verdict);
    }

    #[test]
    fn distinct_inputs_give_distinct_weights(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let m = Mlp2::new(5, 5, 8, &mut rng);
        let a = compute_weights(&rand_t(&[5, 3, 3], -1.0, 1.0, &mut rng), &m).unwrap();
        let b = compute_weights(&rand_t(&[5, 3, 3], -1.0, 1.0, &mut rng), &m).unwrap();
        prop_assert!(a.max_abs_diff(&b) > 0.0);
        prop_assert!((a.sum() - 1.0).abs() < 1e-12);
    }
}
