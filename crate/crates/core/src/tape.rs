//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass eagerly; calling
//! [`Tape::backward`] walks the recording in reverse and accumulates
//! gradients. Parameter leaves are tagged with an opaque key so the owner
//! can pull their gradients out afterwards (see `nn::ParamStore`).
//!
//! All ops treat values as 2-D arrays; scalars are 1x1.

use ndarray::{s, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Clamp floor used by `ln_one_minus`, keeping successive softmax masks
/// finite when a round concentrates all mass on one index.
const LN_ONE_MINUS_FLOOR: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    Max(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    LnOneMinus(Var),
    PowConst(Var, f64),
    Abs(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    MeanRows(Var),
    SumAll(Var),
    Transpose(Var),
    SubMaxDetached(Var),
    AddConstArr(Var),
    MulConstArr(Var, Array2<f64>),
    StSelect {
        cand: Var,
        weights: Var,
        hard: Vec<usize>,
    },
}

struct Node {
    value: Array2<f64>,
    grad: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: Vec<(usize, Var)>,
}

const LN_EPS: f64 = 1e-5;

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.dim(), (1, 1));
        self.nodes[v.0].value[(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let grad = Array2::zeros(value.raw_dim());
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter leaf, deduplicated by `key`: repeat calls with the same key
    /// return the original node so gradients accumulate in one place.
    pub fn param(&mut self, key: usize, value: &Array2<f64>) -> Var {
        if let Some(&(_, v)) = self.param_leaves.iter().find(|(k, _)| *k == key) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf);
        self.param_leaves.push((key, v));
        v
    }

    /// `(key, gradient)` for every parameter leaf touched by this tape.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &Array2<f64>)> {
        self.param_leaves
            .iter()
            .map(move |&(k, v)| (k, &self.nodes[v.0].grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.affine(b, -1.0, 0.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(value, Op::Div(a, b))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::Zip::from(&self.nodes[a.0].value)
            .and(&self.nodes[b.0].value)
            .map_collect(|&x, &y| x.min(y));
        self.push(value, Op::Min(a, b))
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::Zip::from(&self.nodes[a.0].value)
            .and(&self.nodes[b.0].value)
            .map_collect(|&x, &y| x.max(y));
        self.push(value, Op::Max(a, b))
    }

    /// `a (n x d) + row (1 x d)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.nodes[row.0].value.nrows(), 1);
        let value = &self.nodes[a.0].value + &self.nodes[row.0].value.row(0);
        self.push(value, Op::AddRow(a, row))
    }

    /// `a (n x d) * row (1 x d)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.nodes[row.0].value.nrows(), 1);
        let value = &self.nodes[a.0].value * &self.nodes[row.0].value.row(0);
        self.push(value, Op::MulRow(a, row))
    }

    /// Elementwise `k * x + b`.
    pub fn affine(&mut self, a: Var, k: f64, b: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| k * x + b);
        self.push(value, Op::Affine(a, k))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(gelu_scalar);
        self.push(value, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(sigmoid_scalar);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(softplus_scalar);
        self.push(value, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    /// Natural log; caller guarantees positive inputs.
    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::ln);
        self.push(value, Op::Ln(a))
    }

    /// `ln(max(1 - x, 1e-12))`, the accumulated-mask primitive of the
    /// relaxed top-m rounds. The clamp keeps saturated rounds finite.
    pub fn ln_one_minus(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0]
            .value
            .mapv(|x| (1.0 - x).max(LN_ONE_MINUS_FLOOR).ln());
        self.push(value, Op::LnOneMinus(a))
    }

    /// `x^p` for non-negative inputs.
    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.powf(p));
        self.push(value, Op::PowConst(a, p))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::abs);
        self.push(value, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization (no learnable gain/bias; compose those
    /// with `mul_row` / `add_row`).
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let d = x.ncols() as f64;
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let denom = (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) / denom);
        }
        self.push(value, Op::LayerNormRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[a.0]
            .value
            .slice(s![start..start + len, ..])
            .to_owned();
        self.push(value, Op::SliceRows(a, start, len))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[a.0]
            .value
            .slice(s![.., start..start + len])
            .to_owned();
        self.push(value, Op::SliceCols(a, start, len))
    }

    /// Column means: `n x d -> 1 x d`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let n = x.nrows() as f64;
        let value = (x.sum_axis(Axis(0)) / n).insert_axis(Axis(0));
        self.push(value, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.sum();
        self.push(Array2::from_elem((1, 1), total), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.affine(s, 1.0 / n, 0.0)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    /// `x - max(x)` with the max treated as a constant (exact for
    /// log-sum-exp stabilization).
    pub fn sub_max_detached(&mut self, a: Var) -> Var {
        let m = self.nodes[a.0]
            .value
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let value = self.nodes[a.0].value.mapv(|x| x - m);
        self.push(value, Op::SubMaxDetached(a))
    }

    /// Add a constant array (same shape). No gradient flows to the constant.
    pub fn add_const(&mut self, a: Var, c: &Array2<f64>) -> Var {
        let value = &self.nodes[a.0].value + c;
        self.push(value, Op::AddConstArr(a))
    }

    /// Multiply by a constant array (same shape).
    pub fn mul_const(&mut self, a: Var, c: &Array2<f64>) -> Var {
        let value = &self.nodes[a.0].value * c;
        self.push(value, Op::MulConstArr(a, c.clone()))
    }

    /// Stable log-sum-exp over all entries: `1x1`.
    pub fn logsumexp_all(&mut self, a: Var) -> Var {
        let m = self.nodes[a.0]
            .value
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let shifted = self.sub_max_detached(a);
        let e = self.exp(shifted);
        let total = self.sum_all(e);
        let l = self.ln(total);
        self.affine(l, 1.0, m)
    }

    /// Straight-through selection: forward gathers the `hard` rows of
    /// `cand`; backward pretends the output was `weights . cand`.
    pub fn st_select(&mut self, cand: Var, weights: Var, hard: &[usize]) -> Var {
        let c = &self.nodes[cand.0].value;
        let d = c.ncols();
        let mut value = Array2::zeros((hard.len(), d));
        for (r, &i) in hard.iter().enumerate() {
            value.row_mut(r).assign(&c.row(i));
        }
        self.push(
            value,
            Op::StSelect {
                cand,
                weights,
                hard: hard.to_vec(),
            },
        )
    }

    /// Seed `d(loss)/d(loss) = 1` and sweep the tape in reverse.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.nodes[loss.0].value.dim(),
            (1, 1),
            "backward starts from a scalar"
        );
        self.nodes[loss.0].grad[(0, 0)] = 1.0;
        for i in (0..=loss.0).rev() {
            // Split off the current node so we can mutate earlier grads.
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let g = &node.grad;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&before[a.0].value, &before[b.0].value);
                    let da = g.dot(&bv.t());
                    let db = av.t().dot(g);
                    before[a.0].grad += &da;
                    before[b.0].grad += &db;
                }
                Op::Add(a, b) => {
                    before[a.0].grad += g;
                    before[b.0].grad += g;
                }
                Op::Mul(a, b) => {
                    let da = g * &before[b.0].value;
                    let db = g * &before[a.0].value;
                    before[a.0].grad += &da;
                    before[b.0].grad += &db;
                }
                Op::Div(a, b) => {
                    let bv = &before[b.0].value;
                    let da = g / bv;
                    let db = -(g * &before[a.0].value) / (bv * bv);
                    before[a.0].grad += &da;
                    before[b.0].grad += &db;
                }
                Op::Min(a, b) => {
                    let (av, bv) = (&before[a.0].value, &before[b.0].value);
                    let mask = ndarray::Zip::from(av)
                        .and(bv)
                        .map_collect(|&x, &y| if x <= y { 1.0 } else { 0.0 });
                    let da = g * &mask;
                    let db = g * &mask.mapv(|m| 1.0 - m);
                    before[a.0].grad += &da;
                    before[b.0].grad += &db;
                }
                Op::Max(a, b) => {
                    let (av, bv) = (&before[a.0].value, &before[b.0].value);
                    let mask = ndarray::Zip::from(av)
                        .and(bv)
                        .map_collect(|&x, &y| if x >= y { 1.0 } else { 0.0 });
                    let da = g * &mask;
                    let db = g * &mask.mapv(|m| 1.0 - m);
                    before[a.0].grad += &da;
                    before[b.0].grad += &db;
                }
                Op::AddRow(a, row) => {
                    before[a.0].grad += g;
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    before[row.0].grad += &dr;
                }
                Op::MulRow(a, row) => {
                    let rv = &before[row.0].value;
                    let da = g * &rv.row(0);
                    let dr = (g * &before[a.0].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    before[a.0].grad += &da;
                    before[row.0].grad += &dr;
                }
                Op::Affine(a, k) => {
                    let da = g.mapv(|x| x * k);
                    before[a.0].grad += &da;
                }
                Op::Gelu(a) => {
                    let da = g * &before[a.0].value.mapv(gelu_grad_scalar);
                    before[a.0].grad += &da;
                }
                Op::Sigmoid(a) => {
                    let da = g * &node.value.mapv(|y| y * (1.0 - y));
                    before[a.0].grad += &da;
                }
                Op::Softplus(a) => {
                    let da = g * &before[a.0].value.mapv(sigmoid_scalar);
                    before[a.0].grad += &da;
                }
                Op::Exp(a) => {
                    let da = g * &node.value;
                    before[a.0].grad += &da;
                }
                Op::Ln(a) => {
                    let da = g / &before[a.0].value;
                    before[a.0].grad += &da;
                }
                Op::LnOneMinus(a) => {
                    let da = g * &before[a.0].value.mapv(|x| {
                        if 1.0 - x > LN_ONE_MINUS_FLOOR {
                            -1.0 / (1.0 - x)
                        } else {
                            0.0
                        }
                    });
                    before[a.0].grad += &da;
                }
                Op::PowConst(a, p) => {
                    let da = g * &before[a.0].value.mapv(|x| p * x.powf(p - 1.0));
                    before[a.0].grad += &da;
                }
                Op::Abs(a) => {
                    let da = g * &before[a.0].value.mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    before[a.0].grad += &da;
                }
                Op::Relu(a) => {
                    let da = g * &before[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    before[a.0].grad += &da;
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Array2::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(&y, &g)| y * g).sum();
                        for c in 0..y.ncols() {
                            da[(r, c)] = yr[c] * (gr[c] - dot);
                        }
                    }
                    before[a.0].grad += &da;
                }
                Op::LayerNormRows(a) => {
                    let x = &before[a.0].value;
                    let y = &node.value;
                    let d = x.ncols() as f64;
                    let mut da = Array2::zeros(x.raw_dim());
                    for r in 0..x.nrows() {
                        let xr = x.row(r);
                        let mean = xr.sum() / d;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                        let denom = (var + LN_EPS).sqrt();
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let g_mean = gr.sum() / d;
                        let gy_mean = gr
                            .iter()
                            .zip(yr.iter())
                            .map(|(&g, &y)| g * y)
                            .sum::<f64>()
                            / d;
                        for c in 0..x.ncols() {
                            da[(r, c)] = (gr[c] - g_mean - yr[c] * gy_mean) / denom;
                        }
                    }
                    before[a.0].grad += &da;
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = before[p.0].value.nrows();
                        let gp = g.slice(s![start..start + n, ..]);
                        before[p.0].grad += &gp;
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let c = before[p.0].value.ncols();
                        let gp = g.slice(s![.., start..start + c]);
                        before[p.0].grad += &gp;
                        start += c;
                    }
                }
                Op::SliceRows(a, start, len) => {
                    let mut target = before[a.0].grad.slice_mut(s![*start..*start + *len, ..]);
                    target += g;
                }
                Op::SliceCols(a, start, len) => {
                    let mut target = before[a.0].grad.slice_mut(s![.., *start..*start + *len]);
                    target += g;
                }
                Op::MeanRows(a) => {
                    let n = before[a.0].value.nrows() as f64;
                    let da = g.row(0).mapv(|x| x / n);
                    for mut row in before[a.0].grad.rows_mut() {
                        row += &da;
                    }
                }
                Op::SumAll(a) => {
                    let gd = g[(0, 0)];
                    before[a.0].grad.mapv_inplace(|x| x + gd);
                }
                Op::Transpose(a) => {
                    let da = g.t();
                    before[a.0].grad += &da;
                }
                Op::SubMaxDetached(a) | Op::AddConstArr(a) => {
                    before[a.0].grad += g;
                }
                Op::MulConstArr(a, c) => {
                    let da = g * c;
                    before[a.0].grad += &da;
                }
                Op::StSelect {
                    cand,
                    weights,
                    hard,
                } => {
                    // Backward of out = weights . cand, regardless of the
                    // hard forward values.
                    let w = &before[weights.0].value;
                    let cv = &before[cand.0].value;
                    let dc = w.t().dot(g);
                    let dw = g.dot(&cv.t());
                    before[cand.0].grad += &dc;
                    before[weights.0].grad += &dw;
                    debug_assert_eq!(hard.len(), g.nrows());
                }
            }
        }
    }
}

/// Finite-difference helpers used by gradient-fidelity tests. The checks in
/// module tests and the acceptance suite perturb raw values through these
/// and never touch the tape internals.
pub mod check {
    /// Central finite difference of a scalar function at `x[i]`.
    pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, eps: f64) -> f64 {
        (f(x + eps) - f(x - eps)) / (2.0 * eps)
    }

    /// Relative error with an absolute floor for near-zero pairs.
    pub fn rel_err(a: f64, b: f64) -> f64 {
        let denom = a.abs().max(b.abs());
        if denom < 1e-7 {
            0.0
        } else {
            (a - b).abs() / denom
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.5..1.5))
    }

    /// FD-check d(sum of op(x) * probe)/dx for one input of an op builder.
    fn check_unary(
        name: &str,
        build: impl Fn(&mut Tape, Var) -> Var,
        x0: Array2<f64>,
        tol: f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe = rand_mat(&mut rng, 1, 1)[(0, 0)];
        let loss_of = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let y = build(&mut t, v);
            let s = t.sum_all(y);
            t.scalar(s) * probe
        };
        let mut t = Tape::new();
        let v = t.constant(x0.clone());
        let y = build(&mut t, v);
        let s0 = t.sum_all(y);
        let scaled = t.affine(s0, probe, 0.0);
        t.backward(scaled);
        let analytic = t.grad(v).clone();
        for i in 0..x0.nrows() {
            for j in 0..x0.ncols() {
                let mut xp = x0.clone();
                let fd = check::central_diff(
                    |v| {
                        xp[(i, j)] = v;
                        loss_of(&xp)
                    },
                    x0[(i, j)],
                    1e-5,
                );
                let err = check::rel_err(analytic[(i, j)], fd);
                assert!(
                    err < tol,
                    "{name}: grad mismatch at ({i},{j}): analytic {} fd {fd}",
                    analytic[(i, j)]
                );
            }
        }
    }

    #[test]
    fn unary_op_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_mat(&mut rng, 3, 4);
        check_unary("gelu", |t, v| t.gelu(v), x.clone(), 1e-6);
        check_unary("sigmoid", |t, v| t.sigmoid(v), x.clone(), 1e-6);
        check_unary("softplus", |t, v| t.softplus(v), x.clone(), 1e-6);
        check_unary("exp", |t, v| t.exp(v), x.clone(), 1e-6);
        check_unary("softmax", |t, v| t.softmax_rows(v), x.clone(), 1e-6);
        check_unary("layernorm", |t, v| t.layer_norm_rows(v), x.clone(), 1e-5);
        check_unary("affine", |t, v| t.affine(v, -2.5, 1.0), x.clone(), 1e-6);
        check_unary("mean_rows", |t, v| t.mean_rows(v), x.clone(), 1e-6);
        check_unary("transpose", |t, v| t.transpose(v), x.clone(), 1e-6);
        check_unary("slice", |t, v| t.slice_rows(v, 1, 2), x.clone(), 1e-6);
        check_unary("slice_cols", |t, v| t.slice_cols(v, 1, 2), x.clone(), 1e-6);
        check_unary("lse", |t, v| t.logsumexp_all(v), x.clone(), 1e-6);
        let pos = x.mapv(|v| v.abs() + 0.3);
        check_unary("ln", |t, v| t.ln(v), pos.clone(), 1e-6);
        check_unary("pow", |t, v| t.pow_const(v, 2.0), pos.clone(), 1e-6);
        let frac = x.mapv(|v| 0.4 + 0.2 * v.tanh());
        check_unary("ln_one_minus", |t, v| t.ln_one_minus(v), frac, 1e-6);
        // Keep away from the |x| kink.
        let shifted = x.mapv(|v| if v >= 0.0 { v + 0.5 } else { v - 0.5 });
        check_unary("abs", |t, v| t.abs(v), shifted.clone(), 1e-6);
        check_unary("relu", |t, v| t.relu(v), shifted, 1e-6);
    }

    #[test]
    fn binary_op_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a0 = rand_mat(&mut rng, 3, 4);
        let b0 = rand_mat(&mut rng, 3, 4).mapv(|v| v + if v >= 0.0 { 2.0 } else { -2.0 });
        let row0 = rand_mat(&mut rng, 1, 4);
        let m0 = rand_mat(&mut rng, 4, 2);

        // For each builder, check gradients w.r.t. the first argument by FD.
        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, Var, Var) -> Var>, Array2<f64>)> = vec![
            ("add", Box::new(|t: &mut Tape, a, b| t.add(a, b)), b0.clone()),
            ("mul", Box::new(|t: &mut Tape, a, b| t.mul(a, b)), b0.clone()),
            ("div", Box::new(|t: &mut Tape, a, b| t.div(a, b)), b0.clone()),
            ("min", Box::new(|t: &mut Tape, a, b| t.min(a, b)), b0.clone()),
            ("max", Box::new(|t: &mut Tape, a, b| t.max(a, b)), b0.clone()),
            (
                "add_row",
                Box::new(|t: &mut Tape, a, b| t.add_row(a, b)),
                row0.clone(),
            ),
            (
                "mul_row",
                Box::new(|t: &mut Tape, a, b| t.mul_row(a, b)),
                row0.clone(),
            ),
            (
                "matmul",
                Box::new(|t: &mut Tape, a, b| t.matmul(a, b)),
                m0.clone(),
            ),
        ];
        for (name, build, second) in cases {
            for side in 0..2 {
                let loss_of = |a: &Array2<f64>, b: &Array2<f64>| {
                    let mut t = Tape::new();
                    let va = t.constant(a.clone());
                    let vb = t.constant(b.clone());
                    let y = build(&mut t, va, vb);
                    let s = t.sum_all(y);
                    t.scalar(s)
                };
                let mut t = Tape::new();
                let va = t.constant(a0.clone());
                let vb = t.constant(second.clone());
                let y = build(&mut t, va, vb);
                let s = t.sum_all(y);
                t.backward(s);
                let (target, base) = if side == 0 {
                    (t.grad(va).clone(), a0.clone())
                } else {
                    (t.grad(vb).clone(), second.clone())
                };
                for i in 0..base.nrows() {
                    for j in 0..base.ncols() {
                        let mut pert = base.clone();
                        let fd = check::central_diff(
                            |v| {
                                pert[(i, j)] = v;
                                if side == 0 {
                                    loss_of(&pert, &second)
                                } else {
                                    loss_of(&a0, &pert)
                                }
                            },
                            base[(i, j)],
                            1e-5,
                        );
                        let err = check::rel_err(target[(i, j)], fd);
                        assert!(err < 1e-5, "{name} side {side} at ({i},{j})");
                    }
                }
            }
        }
    }

    #[test]
    fn concat_and_st_select_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = rand_mat(&mut rng, 2, 3);
        let b = rand_mat(&mut rng, 1, 3);
        let mut t = Tape::new();
        let va = t.constant(a.clone());
        let vb = t.constant(b.clone());
        let c = t.concat_rows(&[va, vb]);
        let weight = t.constant(arr2(&[[1.0, 2.0, 3.0]]));
        let prod = t.mul_row(c, weight);
        let s = t.sum_all(prod);
        t.backward(s);
        assert_eq!(t.grad(va).nrows(), 2);
        assert_eq!(t.grad(vb)[(0, 1)], 2.0);

        // Straight-through: forward gathers rows, backward uses weights.
        let cand = rand_mat(&mut rng, 4, 3);
        let w = rand_mat(&mut rng, 2, 4).mapv(f64::abs);
        let mut t = Tape::new();
        let vc = t.constant(cand.clone());
        let vw = t.constant(w.clone());
        let sel = t.st_select(vc, vw, &[3, 1]);
        assert_eq!(t.value(sel).row(0), cand.row(3));
        assert_eq!(t.value(sel).row(1), cand.row(1));
        let s = t.sum_all(sel);
        t.backward(s);
        let ones = Array2::<f64>::ones((2, 3));
        let expect_dc = w.t().dot(&ones);
        let expect_dw = ones.dot(&cand.t());
        assert!((&expect_dc - t.grad(vc)).iter().all(|v| v.abs() < 1e-12));
        assert!((&expect_dw - t.grad(vw)).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn param_leaves_deduplicate() {
        let w = arr2(&[[2.0_f64]]);
        let mut t = Tape::new();
        let v1 = t.param(5, &w);
        let v2 = t.param(5, &w);
        assert_eq!(v1, v2);
        let doubled = t.add(v1, v2);
        let s = t.sum_all(doubled);
        t.backward(s);
        let grads: Vec<_> = t.param_grads().collect();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1[(0, 0)], 2.0);
    }
}
