//! Tape-based reverse-mode differentiation over 2-D `f64` tensors.
//!
//! A [`Graph`] borrows the parameter tensors, records every operation in
//! evaluation order and replays the tape backwards in [`Graph::backward`].
//! Scalars are `1×1` tensors.

use ndarray::{s, Array2, Axis, Zip};

pub type Tensor = Array2<f64>;

/// Numerical floor for probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

fn log_floor() -> f64 {
    PROB_FLOOR.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Param(usize),
    Const,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gather(Var, Vec<u32>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Nll(Var, Vec<u32>),
    BiKl(Var, Var),
    LinComb(Vec<(Var, f64)>),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(i)) => &self.params[*i],
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for parameter `index`; repeated calls return the same node.
    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(index),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[index] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Adds the `1×m` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        self.push(out, Op::Scale(a, factor))
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Tensor) -> Var {
        let out = self.value(a) * &mask;
        self.push(out, Op::MulConst(a, mask))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise softmax. With `causal`, entry (i, j) for j > i is excluded.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let mut out = self.value(a).clone();
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let limit = if causal { i + 1 } else { row.len() };
            let max = row
                .iter()
                .take(limit)
                .fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut sum = 0.0;
            for (j, x) in row.iter_mut().enumerate() {
                if j < limit {
                    *x = (*x - max).exp();
                    sum += *x;
                } else {
                    *x = 0.0;
                }
            }
            row.mapv_inplace(|x| x / sum);
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(out, Op::LogSoftmax(a))
    }

    /// Row-wise layer normalization with `1×d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.axis_iter_mut(Axis(0)) {
            let mean = row.sum() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Selects rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros((ids.len(), t.ncols()));
        for (mut row, &id) in out.axis_iter_mut(Axis(0)).zip(ids) {
            row.assign(&t.row(id as usize));
        }
        self.push(out, Op::Gather(table, ids.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + width]).to_owned();
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Σᵢ −max(logp[i, targets[i]], ln 1e-12), a scalar.
    pub fn nll_sum(&mut self, logp: Var, targets: &[u32]) -> Var {
        let lp = self.value(logp);
        assert_eq!(lp.nrows(), targets.len(), "one target per row");
        let floor = log_floor();
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -lp[[i, t as usize]].max(floor))
            .sum();
        self.push(
            Tensor::from_elem((1, 1), total),
            Op::Nll(logp, targets.to_vec()),
        )
    }

    /// Σ over rows of D_KL(P‖Q) + D_KL(Q‖P) from log-probabilities, a scalar.
    /// The ½ of the symmetric divergence is left to the caller.
    pub fn bikl_sum(&mut self, logp: Var, logq: Var) -> Var {
        let floor = log_floor();
        let total = Zip::from(self.value(logp))
            .and(self.value(logq))
            .fold(0.0, |acc, &lp, &lq| {
                let (cp, cq) = (lp.max(floor), lq.max(floor));
                acc + (lp.exp() - lq.exp()) * (cp - cq)
            });
        self.push(Tensor::from_elem((1, 1), total), Op::BiKl(logp, logq))
    }

    /// Σ cᵢ·xᵢ over scalar nodes.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, c)| c * self.scalar(v)).sum();
        self.push(
            Tensor::from_elem((1, 1), total),
            Op::LinComb(terms.to_vec()),
        )
    }

    /// Back-propagates from the scalar `root`, adding `d root / d param`
    /// into `param_grads` (one slot per parameter, allocated on demand).
    pub fn backward(&self, root: Var, param_grads: &mut [Option<Tensor>]) {
        assert_eq!(param_grads.len(), self.params.len());
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::ones((1, 1)));
        let floor = log_floor();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Param(p) => accumulate(&mut param_grads[*p], g),
                Op::Const => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], g.clone());
                    accumulate(&mut grads[a.0], g);
                }
                Op::AddRow(a, b) => {
                    accumulate(&mut grads[b.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads[a.0], g);
                }
                Op::Scale(a, factor) => accumulate(&mut grads[a.0], g * *factor),
                Op::MulConst(a, mask) => accumulate(&mut grads[a.0], g * mask),
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        *gv *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut ga = g;
                    for (mut grow, yrow) in ga.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                        let dot: f64 = grow.iter().zip(yrow.iter()).map(|(g, y)| g * y).sum();
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|gv, &yv| *gv = yv * (*gv - dot));
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LogSoftmax(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut ga = g;
                    for (mut grow, yrow) in ga.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                        let total = grow.sum();
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|gv, &yv| *gv -= yv.exp() * total);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gain_v = self.value(*gain);
                    accumulate(
                        &mut grads[gain.0],
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    accumulate(&mut grads[bias.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let mut dx = &g * gain_v;
                    let d = dx.ncols() as f64;
                    for ((mut row, xh), &is) in dx
                        .axis_iter_mut(Axis(0))
                        .zip(xhat.axis_iter(Axis(0)))
                        .zip(inv_std)
                    {
                        let sum: f64 = row.sum();
                        let dot: f64 = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut row)
                            .and(&xh)
                            .for_each(|v, &h| *v = is / d * (d * *v - sum - h * dot));
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Gather(table, ids) => {
                    let slot = &mut grads[table.0];
                    let gt =
                        slot.get_or_insert_with(|| Tensor::zeros(self.value(*table).raw_dim()));
                    for (row, &id) in g.axis_iter(Axis(0)).zip(ids) {
                        let mut dst = gt.row_mut(id as usize);
                        dst += &row;
                    }
                }
                Op::SliceCols(a, start) => {
                    let slot = &mut grads[a.0];
                    let ga = slot.get_or_insert_with(|| Tensor::zeros(self.value(*a).raw_dim()));
                    let mut dst = ga.slice_mut(s![.., *start..*start + g.ncols()]);
                    dst += &g;
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        accumulate(
                            &mut grads[p.0],
                            g.slice(s![.., offset..offset + w]).to_owned(),
                        );
                        offset += w;
                    }
                }
                Op::Nll(logp, targets) => {
                    let lp = self.value(*logp);
                    let gs = g[[0, 0]];
                    let slot = &mut grads[logp.0];
                    let gl = slot.get_or_insert_with(|| Tensor::zeros(lp.raw_dim()));
                    for (i, &t) in targets.iter().enumerate() {
                        if lp[[i, t as usize]] > floor {
                            gl[[i, t as usize]] -= gs;
                        }
                    }
                }
                Op::BiKl(lp, lq) => {
                    let gs = g[[0, 0]];
                    let (vp, vq) = (self.value(*lp), self.value(*lq));
                    let mut gp = Tensor::zeros(vp.raw_dim());
                    let mut gq = Tensor::zeros(vq.raw_dim());
                    Zip::from(&mut gp)
                        .and(&mut gq)
                        .and(vp)
                        .and(vq)
                        .for_each(|dp, dq, &a, &b| {
                            let (p, q) = (a.exp(), b.exp());
                            let (ca, cb) = (a.max(floor), b.max(floor));
                            let ia = if a > floor { 1.0 } else { 0.0 };
                            let ib = if b > floor { 1.0 } else { 0.0 };
                            *dp = gs * (p * (ca - cb) + (p - q) * ia);
                            *dq = gs * (-q * (ca - cb) + (q - p) * ib);
                        });
                    accumulate(&mut grads[lp.0], gp);
                    accumulate(&mut grads[lq.0], gq);
                }
                Op::LinComb(terms) => {
                    for &(v, c) in terms {
                        accumulate(&mut grads[v.0], Tensor::from_elem((1, 1), c * g[[0, 0]]));
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}
