#![allow(dead_code)]

use redlab::model::Enhancer;
use redlab::numerics::child_seed;
use redlab::numerics::GradCheckReport;
use redlab::{ParamRole, ParamVars, Parameterized, Result, Rng, Tape, Tensor, Var};

pub fn rand_t(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
}

pub fn unit_vector(d: usize, rng: &mut Rng) -> Tensor {
    let v = Tensor::from_fn(&[d], |_| rng.normal());
    let n = v.norm();
    v.map(|x| x / n)
}

/// `Σ_ij |a_ij|` style infinity norm of a matrix difference.
pub fn max_abs(a: &Tensor) -> f64 {
    a.data().iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::from_fn(&[m, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        (0..k).map(|p| a.at(&[i, p]) * b.at(&[p, j])).sum()
    })
}

/// Zero-padded same convolution written as plain loops.
pub fn naive_conv(x: &Tensor, k: &Tensor) -> Tensor {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kk) = (k.shape()[0], k.shape()[2]);
    let r = (kk / 2) as isize;
    let mut out = Tensor::zeros(&[co, h, w]);
    for o in 0..co {
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut acc = 0.0;
                for c in 0..ci {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (sy, sx) = (y + dy, xx + dx);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += x.at(&[c, sy as usize, sx as usize])
                                * k.at(&[o, c, (dy + r) as usize, (dx + r) as usize]);
                        }
                    }
                }
                out.set(&[o, y as usize, xx as usize], acc);
            }
        }
    }
    out
}

/// Two convolution blocks over single-channel images:
/// `conv(relu(conv(x, w1) + b1), w2) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoBlock {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl TwoBlock {
    pub fn new(rng: &mut Rng) -> Self {
        Self {
            w1: rand_t(&[2, 1, 3, 3], -0.5, 0.5, rng),
            b1: rand_t(&[2], -0.1, 0.1, rng),
            w2: rand_t(&[1, 2, 3, 3], -0.5, 0.5, rng),
            b2: rand_t(&[1], -0.1, 0.1, rng),
        }
    }

    /// Loop-only forward pass.
    pub fn brute_forward(&self, x: &Tensor) -> Tensor {
        let h = naive_conv(x, &self.w1);
        let hw = x.shape()[1] * x.shape()[2];
        let h = Tensor::from_fn(h.shape(), |i| (h.data()[i] + self.b1.data()[i / hw]).max(0.0));
        let y = naive_conv(&h, &self.w2);
        y.map(|v| v + self.b2.data()[0])
    }
}

impl Parameterized for TwoBlock {
    fn visit(&self, _: &str, f: &mut dyn FnMut(&str, ParamRole, &Tensor)) {
        f("block1.weight", ParamRole::Weight { fan_in: 9 }, &self.w1);
        f("block1.bias", ParamRole::Bias, &self.b1);
        f("block2.weight", ParamRole::Weight { fan_in: 18 }, &self.w2);
        f("block2.bias", ParamRole::Bias, &self.b2);
    }

    fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Tensor)) {
        f("block1.weight", ParamRole::Weight { fan_in: 9 }, &mut self.w1);
        f("block1.bias", ParamRole::Bias, &mut self.b1);
        f("block2.weight", ParamRole::Weight { fan_in: 18 }, &mut self.w2);
        f("block2.bias", ParamRole::Bias, &mut self.b2);
    }
}

impl Enhancer for TwoBlock {
    fn forward_on(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Result<Var> {
        let h = tape.conv2d(x, pv.get("block1.weight")?)?;
        let h = tape.add_channel_bias(h, pv.get("block1.bias")?)?;
        let h = tape.relu(h);
        let y = tape.conv2d(h, pv.get("block2.weight")?)?;
        tape.add_channel_bias(y, pv.get("block2.bias")?)
    }
}

/// Independent DMR: explicit reset of block `i` with the stream seeded by
/// `child_seed(seed, i)`, loop forward, explicit log-MSE, explicit mean.
pub fn brute_force_dmr(model: &TwoBlock, blocks: &[usize], images: &[Tensor], seed: u64, i_max: f64) -> f64 {
    let mut total = 0.0;
    for (i, &block) in blocks.iter().enumerate() {
        let mut rng = Rng::new(child_seed(seed, i as u64));
        let mut probed = model.clone();
        let (w, b, fan_in) = if block == 1 {
            (&mut probed.w1, &mut probed.b1, 9.0)
        } else {
            (&mut probed.w2, &mut probed.b2, 18.0)
        };
        let bound = (1.0f64 / fan_in).sqrt();
        for v in w.data_mut() {
            *v = rng.uniform(-bound, bound);
        }
        for v in b.data_mut() {
            *v = 0.0;
        }
        for x in images {
            let y0 = model.brute_forward(x);
            let y1 = probed.brute_forward(x);
            let n = y0.len() as f64;
            let mse: f64 = y0.data().iter().zip(y1.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
            let term = if mse == 0.0 { 100.0 } else { (10.0 * (i_max * i_max / mse).log10()).min(100.0) };
            total += term;
        }
    }
    total / (blocks.len() * images.len()) as f64
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn lu_det(m: &Tensor) -> f64 {
    let n = m.shape()[0];
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| m.at(&[i, j])).collect()).collect();
    let mut det = 1.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap())
            .unwrap();
        if a[piv][col] == 0.0 {
            return 0.0;
        }
        if piv != col {
            a.swap(piv, col);
            det = -det;
        }
        det *= a[col][col];
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    det
}

/// Every coordinate whose probes stayed on one smooth piece is within
/// `tol`, and at most 5% of coordinates straddle a kink.
pub fn smooth_verdict(report: &GradCheckReport, tol: f64) -> std::result::Result<(), String> {
    let bad: Vec<_> = report.smooth_failures(tol).collect();
    if !bad.is_empty() {
        return Err(format!("{} smooth coordinates above {tol}: {:?}", bad.len(), &bad[..bad.len().min(3)]));
    }
    if report.kink_crossings() * 20 > report.checked {
        return Err(format!("{} of {} probes straddle a kink", report.kink_crossings(), report.checked));
    }
    Ok(())
}

/// Largest relative error over coordinates that stayed on one smooth piece.
pub fn smooth_max_error(report: &GradCheckReport) -> f64 {
    report
        .entries
        .iter()
        .filter(|m| !m.crosses_kink)
        .map(|m| m.rel_error())
        .fold(0.0, f64::max)
}

/// `y + delta * U[-1, 1]` elementwise: a reference close to `y`.
pub fn nearby(y: &Tensor, delta: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(y.shape(), |i| y.data()[i] + delta * rng.uniform(-1.0, 1.0))
}

/// Case count for property tests; `PROPTEST_CASES` overrides `default`.
pub fn cases(default: u32) -> u32 {
    std::env::var("PROPTEST_CASES")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}
