//! Reverse-mode differentiation over a linear operation record.
//!
//! Every operation evaluates eagerly, stores its output on the tape and
//! remembers its inputs. Node ids are tape indices, so inputs always precede
//! the nodes that consume them and a reverse sweep is a valid topological
//! order. Gradients accumulate additively when a node feeds several
//! consumers.

use crate::error::{dim_err, Error, Result};

use super::ops::{self, expect_rank};
use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Reshape(Var),
    Transpose(Var),
    Matmul(Var, Var),
    Conv2d(Var, Var),
    AddChannelBias(Var, Var),
    AddRowBias(Var, Var),
    SoftmaxRows(Var),
    NormalizeRows { x: Var, norms: Vec<f64>, eps: f64 },
    GlobalAvgPool(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    Mse(Var, Var),
    L1(Var, Var),
    Sum(Var),
    Householder(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Operation record for one evaluation context.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    macs: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count of every convolution and matrix product
    /// recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Branch taken by every non-smooth element op (relu, clamp, l1), in
    /// recording order. Two evaluations of the same graph with equal
    /// patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<i8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => out.extend(self.value(*a).data().iter().map(|&x| i8::from(x > 0.0))),
                Op::Clamp(a, lo, hi) => out.extend(self.value(*a).data().iter().map(|&x| {
                    if x < *lo {
                        -1
                    } else if x > *hi {
                        1
                    } else {
                        0
                    }
                })),
                Op::L1(a, b) => out.extend(
                    self.value(*a)
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(x, y)| (x - y).partial_cmp(&0.0).map_or(0, |o| o as i8)),
                ),
                _ => {}
            }
        }
        out
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        debug_assert!(value.is_finite() || !tracked, "non-finite value on tape");
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.push(value, op, tracked)
    }

    /// Tracked leaf: receives a gradient on [`backward`](Self::backward).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim_err!("{what}: shapes {sa:?} and {sb:?}"));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push_op(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push_op(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push_op(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push_op(v, Op::Scale(a, c), &[a])
    }

    /// Multiply every element of `a` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(dim_err!("mul_scalar: factor has shape {:?}", self.value(s).shape()));
        }
        let c = self.value(s).item();
        let v = self.value(a).map(|x| x * c);
        Ok(self.push_op(v, Op::MulScalar(a, s), &[a, s]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push_op(v, Op::Relu(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push_op(v, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push_op(v, Op::Reshape(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = ops::transpose(self.value(a))?;
        Ok(self.push_op(v, Op::Transpose(a), &[a]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = ops::matmul_dims(self.value(a), self.value(b))?;
        self.macs += (m * k * n) as u64;
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push_op(v, Op::Matmul(a, b), &[a, b]))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (ci, h, w, co, k) = ops::conv_dims(self.value(x), self.value(kernel))?;
        self.macs += (ci * h * w * co * k * k) as u64;
        let v = ops::conv2d(self.value(x), self.value(kernel))?;
        Ok(self.push_op(v, Op::Conv2d(x, kernel), &[x, kernel]))
    }

    /// `x[c,h,w] + b[c]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        expect_rank(tx, 3, "add_channel_bias")?;
        if tb.shape() != [tx.shape()[0]] {
            return Err(dim_err!(
                "add_channel_bias: bias {:?} for input {:?}",
                tb.shape(),
                tx.shape()
            ));
        }
        let plane = tx.shape()[1] * tx.shape()[2];
        let bd = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i / plane])
            .collect();
        let v = Tensor::new(tx.shape(), data)?;
        Ok(self.push_op(v, Op::AddChannelBias(x, b), &[x, b]))
    }

    /// `x[r,c] + b[c]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        expect_rank(tx, 2, "add_row_bias")?;
        if tb.shape() != [tx.shape()[1]] {
            return Err(dim_err!(
                "add_row_bias: bias {:?} for input {:?}",
                tb.shape(),
                tx.shape()
            ));
        }
        let cols = tx.shape()[1];
        let bd = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % cols])
            .collect();
        let v = Tensor::new(tx.shape(), data)?;
        Ok(self.push_op(v, Op::AddRowBias(x, b), &[x, b]))
    }

    /// Softmax of a 1-D tensor, or of every row of a 2-D tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.is_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let cols = match t.rank() {
            1 | 2 => *t.shape().last().expect("rank >= 1"),
            _ => return Err(dim_err!("softmax: rank {} unsupported", t.rank())),
        };
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(cols) {
            ops::softmax_row(row);
        }
        let v = Tensor::new(t.shape(), data)?;
        Ok(self.push_op(v, Op::SoftmaxRows(a), &[a]))
    }

    /// Divide each row of a 2-D tensor by `max(‖row‖₂, eps)`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        expect_rank(t, 2, "normalize_rows")?;
        let cols = t.shape()[1];
        let norms: Vec<f64> = t
            .data()
            .chunks(cols)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v / norms[i / cols].max(eps))
            .collect();
        let v = Tensor::new(t.shape(), data)?;
        Ok(self.push_op(v, Op::NormalizeRows { x: a, norms, eps }, &[a]))
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let v = ops::global_avg_pool(self.value(a))?;
        Ok(self.push_op(v, Op::GlobalAvgPool(a), &[a]))
    }

    /// Average over non-overlapping 2×2 windows of `[C,H,W]` with even H, W.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        expect_rank(t, 3, "avg_pool2")?;
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(dim_err!("avg_pool2: odd spatial dims {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let d = t.data();
        let v = Tensor::from_fn(&[c, oh, ow], |idx| {
            let (ch, rem) = (idx / (oh * ow), idx % (oh * ow));
            let (y, x) = (2 * (rem / ow), 2 * (rem % ow));
            let base = ch * h * w;
            (d[base + y * w + x]
                + d[base + y * w + x + 1]
                + d[base + (y + 1) * w + x]
                + d[base + (y + 1) * w + x + 1])
                * 0.25
        });
        Ok(self.push_op(v, Op::AvgPool2(a), &[a]))
    }

    /// Nearest-neighbour 2× upsampling of `[C,H,W]`.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        expect_rank(t, 3, "upsample2")?;
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let d = t.data();
        let v = Tensor::from_fn(&[c, oh, ow], |idx| {
            let (ch, rem) = (idx / (oh * ow), idx % (oh * ow));
            d[ch * h * w + (rem / ow / 2) * w + (rem % ow) / 2]
        });
        Ok(self.push_op(v, Op::Upsample2(a), &[a]))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat_channels(&refs)?;
        Ok(self.push_op(v, Op::Concat(parts.to_vec()), parts))
    }

    /// Channels `start..start+len` of a `[C,H,W]` tensor.
    pub fn narrow_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        expect_rank(t, 3, "narrow_channels")?;
        if len == 0 || start + len > t.shape()[0] {
            return Err(dim_err!(
                "narrow_channels: {start}..{} out of {} channels",
                start + len,
                t.shape()[0]
            ));
        }
        let plane = t.shape()[1] * t.shape()[2];
        let v = Tensor::new(
            &[len, t.shape()[1], t.shape()[2]],
            t.data()[start * plane..(start + len) * plane].to_vec(),
        )?;
        Ok(self.push_op(v, Op::Narrow { x: a, start }, &[a]))
    }

    pub fn split_channels(&mut self, a: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        expect_rank(self.value(a), 3, "split_channels")?;
        if total != self.value(a).shape()[0] {
            return Err(dim_err!(
                "split_channels: sizes {sizes:?} do not sum to {}",
                self.value(a).shape()[0]
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow_channels(a, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::mse(self.value(a), self.value(b))?;
        Ok(self.push_op(Tensor::scalar(v), Op::Mse(a, b), &[a, b]))
    }

    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::l1(self.value(a), self.value(b))?;
        Ok(self.push_op(Tensor::scalar(v), Op::L1(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push_op(v, Op::Sum(a), &[a])
    }

    /// Householder reflection of `w` by every unit row of `normed`:
    /// row `i` of the result is `w - 2<n_i, w> n_i`.
    pub fn householder_reflect(&mut self, normed: Var, w: Var) -> Result<Var> {
        let (tn, tw) = (self.value(normed), self.value(w));
        expect_rank(tn, 2, "householder_reflect rows")?;
        let d = tn.shape()[1];
        if tw.shape() != [d] {
            return Err(dim_err!(
                "householder_reflect: weights {:?} for rows of width {d}",
                tw.shape()
            ));
        }
        let wd = tw.data();
        let mut out = Vec::with_capacity(tn.len());
        for row in tn.data().chunks(d) {
            let dot: f64 = row.iter().zip(wd).map(|(a, b)| a * b).sum();
            out.extend(row.iter().zip(wd).map(|(n, wj)| wj - 2.0 * dot * n));
        }
        let v = Tensor::new(tn.shape(), out)?;
        self.macs += (2 * v.len()) as u64;
        Ok(self.push_op(v, Op::Householder(normed, w), &[normed, w]))
    }

    /// Populate gradients of `loss` with respect to every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop(idx, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to `v`; zeros when
    /// `v` did not influence the loss.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.value(v).shape();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    fn backprop(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        // Accumulate into an input's gradient buffer when it is tracked.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].tracked {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        let add_scaled = |buf: &mut [f64], src: &[f64], c: f64| {
            for (b, s) in buf.iter_mut().zip(src) {
                *b += c * s;
            }
        };
        let out = &nodes[idx].value;
        match &nodes[idx].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_scaled(buf, g, 1.0));
                acc(*b, &mut |buf| add_scaled(buf, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_scaled(buf, g, 1.0));
                acc(*b, &mut |buf| add_scaled(buf, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |buf| {
                    for ((d, gv), y) in buf.iter_mut().zip(g).zip(tb) {
                        *d += gv * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((d, gv), x) in buf.iter_mut().zip(g).zip(ta) {
                        *d += gv * x;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |buf| add_scaled(buf, g, *c)),
            Op::MulScalar(a, s) => {
                let c = val(*s).item();
                let ta = val(*a).data();
                acc(*a, &mut |buf| add_scaled(buf, g, c));
                acc(*s, &mut |buf| {
                    buf[0] += g.iter().zip(ta).map(|(gv, x)| gv * x).sum::<f64>();
                });
            }
            Op::Relu(a) => acc(*a, &mut |buf| {
                for ((d, gv), y) in buf.iter_mut().zip(g).zip(out.data()) {
                    if *y > 0.0 {
                        *d += gv;
                    }
                }
            }),
            Op::Clamp(a, lo, hi) => {
                let ta = val(*a).data();
                acc(*a, &mut |buf| {
                    for ((d, gv), x) in buf.iter_mut().zip(g).zip(ta) {
                        if *x > *lo && *x < *hi {
                            *d += gv;
                        }
                    }
                })
            }
            Op::Reshape(a) => acc(*a, &mut |buf| add_scaled(buf, g, 1.0)),
            Op::Transpose(a) => {
                let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                acc(*a, &mut |buf| {
                    // out[j,i] = a[i,j]
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[j * m + i];
                        }
                    }
                })
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(*a, &mut |buf| ops::matmul_nt_into(g, tb.data(), buf, m, n, k));
                acc(*b, &mut |buf| ops::matmul_tn_into(ta.data(), g, buf, m, k, n));
            }
            Op::Conv2d(x, kern) => {
                let (tx, tk) = (val(*x), val(*kern));
                let (ci, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (co, k) = (tk.shape()[0], tk.shape()[2]);
                acc(*x, &mut |buf| {
                    ops::conv2d_backward(tx.data(), tk.data(), g, Some(buf), None, ci, h, w, co, k)
                });
                acc(*kern, &mut |buf| {
                    ops::conv2d_backward(tx.data(), tk.data(), g, None, Some(buf), ci, h, w, co, k)
                });
            }
            Op::AddChannelBias(x, b) => {
                let plane = out.shape()[1] * out.shape()[2];
                acc(*x, &mut |buf| add_scaled(buf, g, 1.0));
                acc(*b, &mut |buf| {
                    for (c, d) in buf.iter_mut().enumerate() {
                        *d += g[c * plane..(c + 1) * plane].iter().sum::<f64>();
                    }
                });
            }
            Op::AddRowBias(x, b) => {
                let cols = out.shape()[1];
                acc(*x, &mut |buf| add_scaled(buf, g, 1.0));
                acc(*b, &mut |buf| {
                    for row in g.chunks(cols) {
                        add_scaled(buf, row, 1.0);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let cols = *out.shape().last().expect("rank >= 1");
                acc(*a, &mut |buf| {
                    for ((drow, grow), yrow) in buf
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(out.data().chunks(cols))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(gv, y)| gv * y).sum();
                        for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gv - dot);
                        }
                    }
                })
            }
            Op::NormalizeRows { x, norms, eps } => {
                let cols = out.shape()[1];
                acc(*x, &mut |buf| {
                    for (r, ((drow, grow), yrow)) in buf
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(out.data().chunks(cols))
                        .enumerate()
                    {
                        let n = norms[r];
                        if n >= *eps {
                            let dot: f64 = grow.iter().zip(yrow).map(|(gv, y)| gv * y).sum();
                            for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += (gv - y * dot) / n;
                            }
                        } else {
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += gv / eps;
                            }
                        }
                    }
                })
            }
            Op::GlobalAvgPool(a) => {
                let s = val(*a).shape();
                let plane = s[1] * s[2];
                acc(*a, &mut |buf| {
                    for (i, d) in buf.iter_mut().enumerate() {
                        *d += g[i / plane] / plane as f64;
                    }
                })
            }
            Op::AvgPool2(a) => {
                let s = val(*a).shape();
                let (h, w) = (s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                acc(*a, &mut |buf| {
                    for (i, d) in buf.iter_mut().enumerate() {
                        let (c, rem) = (i / (h * w), i % (h * w));
                        let (y, x) = (rem / w / 2, (rem % w) / 2);
                        *d += 0.25 * g[c * oh * ow + y * ow + x];
                    }
                })
            }
            Op::Upsample2(a) => {
                let s = val(*a).shape();
                let (h, w) = (s[1], s[2]);
                let (oh, ow) = (2 * h, 2 * w);
                acc(*a, &mut |buf| {
                    for (i, gv) in g.iter().enumerate() {
                        let (c, rem) = (i / (oh * ow), i % (oh * ow));
                        buf[c * h * w + (rem / ow / 2) * w + (rem % ow) / 2] += gv;
                    }
                })
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = val(*p).len();
                    let slice = &g[start..start + n];
                    acc(*p, &mut |buf| add_scaled(buf, slice, 1.0));
                    start += n;
                }
            }
            Op::Narrow { x, start } => {
                let s = val(*x).shape();
                let offset = start * s[1] * s[2];
                acc(*x, &mut |buf| add_scaled(&mut buf[offset..offset + g.len()], g, 1.0));
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let c = 2.0 * g[0] / ta.len() as f64;
                acc(*a, &mut |buf| {
                    for ((d, x), y) in buf.iter_mut().zip(ta).zip(tb) {
                        *d += c * (x - y);
                    }
                });
                acc(*b, &mut |buf| {
                    for ((d, x), y) in buf.iter_mut().zip(ta).zip(tb) {
                        *d -= c * (x - y);
                    }
                });
            }
            Op::L1(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let c = g[0] / ta.len() as f64;
                let sign = |x: f64, y: f64| {
                    if x > y {
                        1.0
                    } else if x < y {
                        -1.0
                    } else {
                        0.0
                    }
                };
                acc(*a, &mut |buf| {
                    for ((d, x), y) in buf.iter_mut().zip(ta).zip(tb) {
                        *d += c * sign(*x, *y);
                    }
                });
                acc(*b, &mut |buf| {
                    for ((d, x), y) in buf.iter_mut().zip(ta).zip(tb) {
                        *d -= c * sign(*x, *y);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |buf| buf.iter_mut().for_each(|d| *d += g[0])),
            Op::Householder(normed, w) => {
                let (tn, tw) = (val(*normed), val(*w));
                let d = tw.len();
                let wd = tw.data();
                let rows = tn.data().chunks(d).zip(g.chunks(d));
                acc(*w, &mut |buf| {
                    for (n, gi) in rows.clone() {
                        let ng: f64 = n.iter().zip(gi).map(|(a, b)| a * b).sum();
                        for ((b, gv), nv) in buf.iter_mut().zip(gi).zip(n) {
                            *b += gv - 2.0 * ng * nv;
                        }
                    }
                });
                acc(*normed, &mut |buf| {
                    for ((drow, n), gi) in buf.chunks_mut(d).zip(tn.data().chunks(d)).zip(g.chunks(d)) {
                        let ng: f64 = n.iter().zip(gi).map(|(a, b)| a * b).sum();
                        let nw: f64 = n.iter().zip(wd).map(|(a, b)| a * b).sum();
                        for ((dv, gv), wv) in drow.iter_mut().zip(gi).zip(wd) {
                            *dv -= 2.0 * (nw * gv + ng * wv);
                        }
                    }
                });
            }
        }
    }
}
