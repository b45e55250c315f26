//! A small reverse-mode tape over [`Mat`] values.
//!
//! Parameters are borrowed from the caller and never copied into the tape;
//! their gradients are accumulated straight into a caller-owned buffer.

use std::rc::Rc;

use crate::tensor::{self, Mat};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Constant,
    Param(usize),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    MulConst(NodeId, Mat),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Mat, inv_std: Vec<f64> },
    Gelu(NodeId),
    Softmax { x: NodeId },
    GatherRows { table: NodeId, idx: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    ScaleByElem { x: NodeId, s: NodeId, idx: usize },
    AddGatherBias { x: NodeId, table: NodeId, idx: Rc<Vec<Option<usize>>>, col: usize },
    CrossEntropy { logits: NodeId, targets: Vec<u32>, smoothing: f64, weight: f64, probs: Mat },
    Sum(Vec<NodeId>),
}

struct Node {
    op: Op,
    value: Option<Mat>,
    needs_grad: bool,
}

pub struct Graph<'a> {
    params: &'a [Mat],
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a [Mat]) -> Self {
        Self { params, nodes: Vec::new(), param_nodes: vec![None; params.len()] }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        match (&self.nodes[id].value, &self.nodes[id].op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => &self.params[*p],
            _ => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).data[0]
    }

    fn push(&mut self, op: Op, value: Mat, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { op, value: Some(value), needs_grad });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, m: Mat) -> NodeId {
        self.nodes.push(Node { op: Op::Constant, value: Some(m), needs_grad: false });
        self.nodes.len() - 1
    }

    pub fn param(&mut self, p: usize) -> NodeId {
        if let Some(id) = self.param_nodes[p] {
            return id;
        }
        self.nodes.push(Node { op: Op::Param(p), value: None, needs_grad: true });
        let id = self.nodes.len() - 1;
        self.param_nodes[p] = Some(id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::matmul(self.value(a), self.value(b));
        self.push(Op::MatMul(a, b), v, &[a, b])
    }

    /// `a @ b^T`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::matmul_t(self.value(a), self.value(b));
        self.push(Op::MatMulT(a, b), v, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(Op::Add(a, b), v, &[a, b])
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let r = self.value(row);
        assert_eq!((r.rows, r.cols), (1, v.cols), "add_row shape");
        for i in 0..v.rows {
            tensor::axpy(1.0, &r.data, v.row_mut(i));
        }
        self.push(Op::AddRow(a, row), v, &[a, row])
    }

    /// `x @ w + b`
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.scale_assign(s);
        self.push(Op::Scale(a, s), v, &[a])
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: NodeId, m: Mat) -> NodeId {
        let mut v = self.value(a).clone();
        assert_eq!(v.shape(), m.shape(), "mul_const shape");
        v.data.iter_mut().zip(&m.data).for_each(|(x, k)| *x *= k);
        self.push(Op::MulConst(a, m), v, &[a])
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        assert_eq!((g.len(), b.len()), (xv.cols, xv.cols), "layer_norm shape");
        let n = xv.cols as f64;
        let mut xhat = Mat::zeros(xv.rows, xv.cols);
        let mut out = Mat::zeros(xv.rows, xv.cols);
        let mut inv_std = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            let o = out.row_mut(r);
            for c in 0..o.len() {
                o[c] = xh[c] * g.data[c] + b.data[c];
            }
        }
        self.push(Op::LayerNorm { x, gain, bias, xhat, inv_std }, out, &[x, gain, bias])
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|z| *z = gelu(*z));
        self.push(Op::Gelu(x), v, &[x])
    }

    /// Row softmax; entries flagged in `mask` (row-major, `true` = blocked)
    /// are treated as `-inf`.
    pub fn softmax(&mut self, x: NodeId, mask: Option<Rc<Vec<bool>>>) -> NodeId {
        let mut v = self.value(x).clone();
        if let Some(m) = &mask {
            assert_eq!(m.len(), v.len(), "softmax mask shape");
            v.data.iter_mut().zip(m.iter()).for_each(|(z, &blocked)| {
                if blocked {
                    *z = f64::NEG_INFINITY;
                }
            });
        }
        for r in 0..v.rows {
            tensor::softmax_in_place(v.row_mut(r));
        }
        self.push(Op::Softmax { x }, v, &[x])
    }

    pub fn gather_rows(&mut self, table: NodeId, idx: Vec<usize>) -> NodeId {
        let t = self.value(table);
        let mut v = Mat::zeros(idx.len(), t.cols);
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).copy_from_slice(t.row(i));
        }
        self.push(Op::GatherRows { table, idx }, v, &[table])
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        if parts.len() == 1 {
            return parts[0];
        }
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows width");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        let inputs = parts.clone();
        self.push(Op::ConcatRows(parts), Mat::from_vec(rows, cols, data), &inputs)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        assert!(start + len <= xv.cols, "slice_cols range");
        let mut v = Mat::zeros(xv.rows, len);
        for r in 0..xv.rows {
            v.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols { x, start }, v, &[x])
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in &parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols height");
            for r in 0..rows {
                v.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        let inputs = parts.clone();
        self.push(Op::ConcatCols(parts), v, &inputs)
    }

    /// Multiplies `x` by the scalar `s[idx]` (row-major index into `s`).
    pub fn scale_by_elem(&mut self, x: NodeId, s: NodeId, idx: usize) -> NodeId {
        let k = self.value(s).data[idx];
        let mut v = self.value(x).clone();
        v.scale_assign(k);
        self.push(Op::ScaleByElem { x, s, idx }, v, &[x, s])
    }

    /// Adds `table[idx[i*m+j], col]` to entry `(i, j)`; `None` adds nothing.
    pub fn add_gather_bias(
        &mut self,
        x: NodeId,
        table: NodeId,
        idx: Rc<Vec<Option<usize>>>,
        col: usize,
    ) -> NodeId {
        let mut v = self.value(x).clone();
        assert_eq!(idx.len(), v.len(), "bias index shape");
        let t = self.value(table);
        for (z, i) in v.data.iter_mut().zip(idx.iter()) {
            if let Some(i) = i {
                *z += t.at(*i, col);
            }
        }
        self.push(Op::AddGatherBias { x, table, idx, col }, v, &[x, table])
    }

    /// `weight * sum_t [(1-s) * nll(target_t) + s * mean_v nll(v)]`, as a 1x1 node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<u32>, smoothing: f64, weight: f64) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len(), "one target per logit row");
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let lse = tensor::log_sum_exp(row);
            let nll_t = lse - row[t as usize];
            let mean_nll = lse - row.iter().sum::<f64>() / row.len() as f64;
            total += (1.0 - smoothing) * nll_t + smoothing * mean_nll;
            tensor::softmax_in_place(probs.row_mut(r));
        }
        let v = Mat::from_vec(1, 1, vec![weight * total]);
        self.push(Op::CrossEntropy { logits, targets, smoothing, weight, probs }, v, &[logits])
    }

    pub fn sum(&mut self, parts: Vec<NodeId>) -> NodeId {
        let (r, c) = self.value(parts[0]).shape();
        let mut v = Mat::zeros(r, c);
        for &p in &parts {
            v.add_assign(self.value(p));
        }
        let inputs = parts.clone();
        self.push(Op::Sum(parts), v, &inputs)
    }

    /// Back-propagates from the scalar `root`, adding `d root / d param` into `param_grads`.
    pub fn backward(&self, root: NodeId, param_grads: &mut [Mat]) {
        assert_eq!(param_grads.len(), self.params.len(), "one gradient buffer per parameter");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Mat::filled(1, 1, 1.0));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let mut sink = Sink { nodes: &self.nodes, grads: &mut grads, param_grads };
            self.backward_node(id, &g, &mut sink);
        }
    }

    fn backward_node(&self, id: NodeId, g: &Mat, sink: &mut Sink<'_>) {
        match &self.nodes[id].op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if let Some(ga) = sink.slot(*a) {
                    tensor::matmul_t_acc(g, self.value(*b), ga);
                }
                if let Some(gb) = sink.slot(*b) {
                    tensor::t_matmul_acc(self.value(*a), g, gb);
                }
            }
            Op::MatMulT(a, b) => {
                if let Some(ga) = sink.slot(*a) {
                    tensor::matmul_acc(g, self.value(*b), ga);
                }
                if let Some(gb) = sink.slot(*b) {
                    tensor::t_matmul_acc(g, self.value(*a), gb);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = sink.slot(*a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = sink.slot(*b) {
                    gb.add_assign(g);
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = sink.slot(*a) {
                    ga.add_assign(g);
                }
                if let Some(gr) = sink.slot(*row) {
                    for r in 0..g.rows {
                        tensor::axpy(1.0, g.row(r), &mut gr.data);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = sink.slot(*a) {
                    tensor::axpy(*s, &g.data, &mut ga.data);
                }
            }
            Op::MulConst(a, m) => {
                if let Some(ga) = sink.slot(*a) {
                    for ((o, gi), k) in ga.data.iter_mut().zip(&g.data).zip(&m.data) {
                        *o += gi * k;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = self.value(*gain).data.clone();
                if let Some(gg) = sink.slot(*gain) {
                    for r in 0..g.rows {
                        for ((o, gi), h) in gg.data.iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += gi * h;
                        }
                    }
                }
                if let Some(gb) = sink.slot(*bias) {
                    for r in 0..g.rows {
                        tensor::axpy(1.0, g.row(r), &mut gb.data);
                    }
                }
                if let Some(gx) = sink.slot(*x) {
                    let n = g.cols as f64;
                    let mut dyg = vec![0.0; g.cols];
                    for r in 0..g.rows {
                        let (gr, hr) = (g.row(r), xhat.row(r));
                        for c in 0..g.cols {
                            dyg[c] = gr[c] * gv[c];
                        }
                        let mean_dyg = dyg.iter().sum::<f64>() / n;
                        let mean_dyg_h = tensor::dot(&dyg, hr) / n;
                        let out = gx.row_mut(r);
                        for c in 0..g.cols {
                            out[c] += inv_std[r] * (dyg[c] - mean_dyg - hr[c] * mean_dyg_h);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = sink.slot(*x) {
                    for ((o, gi), z) in gx.data.iter_mut().zip(&g.data).zip(&xv.data) {
                        *o += gi * gelu_grad(*z);
                    }
                }
            }
            Op::Softmax { x } => {
                let y = self.value(id);
                if let Some(gx) = sink.slot(*x) {
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let s = tensor::dot(yr, gr);
                        let out = gx.row_mut(r);
                        for c in 0..y.cols {
                            out[c] += yr[c] * (gr[c] - s);
                        }
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                if let Some(gt) = sink.slot(*table) {
                    for (r, &i) in idx.iter().enumerate() {
                        tensor::axpy(1.0, g.row(r), gt.row_mut(i));
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = sink.slot(p) {
                        tensor::axpy(1.0, &g.data[off..off + n], &mut gp.data);
                    }
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                if let Some(gx) = sink.slot(*x) {
                    for r in 0..g.rows {
                        tensor::axpy(1.0, g.row(r), &mut gx.row_mut(r)[*start..*start + g.cols]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols;
                    if let Some(gp) = sink.slot(p) {
                        for r in 0..g.rows {
                            tensor::axpy(1.0, &g.row(r)[off..off + w], gp.row_mut(r));
                        }
                    }
                    off += w;
                }
            }
            Op::ScaleByElem { x, s, idx } => {
                let k = self.value(*s).data[*idx];
                if let Some(gx) = sink.slot(*x) {
                    tensor::axpy(k, &g.data, &mut gx.data);
                }
                if let Some(gs) = sink.slot(*s) {
                    gs.data[*idx] += tensor::dot(&g.data, &self.value(*x).data);
                }
            }
            Op::AddGatherBias { x, table, idx, col } => {
                if let Some(gx) = sink.slot(*x) {
                    gx.add_assign(g);
                }
                if let Some(gt) = sink.slot(*table) {
                    for (gi, i) in g.data.iter().zip(idx.iter()) {
                        if let Some(i) = i {
                            *gt.at_mut(*i, *col) += gi;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, smoothing, weight, probs } => {
                let up = g.data[0] * weight;
                if let Some(gl) = sink.slot(*logits) {
                    let uniform = smoothing / probs.cols as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        let out = gl.row_mut(r);
                        for (o, p) in out.iter_mut().zip(probs.row(r)) {
                            *o += up * (p - uniform);
                        }
                        out[t as usize] -= up * (1.0 - smoothing);
                    }
                }
            }
            Op::Sum(parts) => {
                for &p in parts {
                    if let Some(gp) = sink.slot(p) {
                        gp.add_assign(g);
                    }
                }
            }
        }
    }
}

struct Sink<'s> {
    nodes: &'s [Node],
    grads: &'s mut [Option<Mat>],
    param_grads: &'s mut [Mat],
}

impl Sink<'_> {
    /// Gradient accumulator for `id`, or `None` when nothing upstream needs it.
    fn slot(&mut self, id: NodeId) -> Option<&mut Mat> {
        let node = &self.nodes[id];
        if !node.needs_grad {
            return None;
        }
        if let Op::Param(p) = node.op {
            return Some(&mut self.param_grads[p]);
        }
        let shape = node.value.as_ref().map(Mat::shape).expect("non-parameter nodes own a value");
        Some(self.grads[id].get_or_insert_with(|| Mat::zeros(shape.0, shape.1)))
    }
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of `build` over every parameter entry.
    fn check(params: Vec<Mat>, build: impl Fn(&mut Graph) -> NodeId) {
        let mut grads: Vec<Mat> = params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
        {
            let mut g = Graph::new(&params);
            let root = build(&mut g);
            g.backward(root, &mut grads);
        }
        let h = 1e-6;
        let mut work = params.clone();
        for p in 0..params.len() {
            for i in 0..params[p].len() {
                let orig = work[p].data[i];
                work[p].data[i] = orig + h;
                let plus = {
                    let mut g = Graph::new(&work);
                    let r = build(&mut g);
                    g.scalar(r)
                };
                work[p].data[i] = orig - h;
                let minus = {
                    let mut g = Graph::new(&work);
                    let r = build(&mut g);
                    g.scalar(r)
                };
                work[p].data[i] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let analytic = grads[p].data[i];
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-5 || (analytic - numeric).abs() < 1e-9,
                    "param {p} entry {i}: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }

    fn sum_all(g: &mut Graph, x: NodeId) -> NodeId {
        let (r, c) = g.value(x).shape();
        // Weighted sum so that the gradient is not uniform.
        let w = Mat::from_vec(c, 1, (0..c).map(|i| 0.3 + 0.1 * i as f64).collect());
        let wn = g.constant(w);
        let col = g.matmul(x, wn);
        let ones = g.constant(Mat::filled(1, r, 1.0));
        g.matmul(ones, col)
    }

    #[test]
    fn matmul_family_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2), random(&mut rng, 1, 2), random(&mut rng, 5, 4)];
        check(params, |g| {
            let a = g.param(0);
            let b = g.param(1);
            let bias = g.param(2);
            let y = g.linear(a, b, bias);
            let c = g.param(3);
            let z = g.matmul_t(a, c);
            let s1 = sum_all(g, y);
            let s2 = sum_all(g, z);
            g.sum(vec![s1, s2])
        });
    }

    #[test]
    fn layer_norm_gelu_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = vec![random(&mut rng, 3, 5), random(&mut rng, 1, 5), random(&mut rng, 1, 5)];
        let mask = Rc::new((0..15).map(|i| i % 5 == 4 && i < 10).collect::<Vec<_>>());
        check(params, move |g| {
            let x = g.param(0);
            let (gain, bias) = (g.param(1), g.param(2));
            let ln = g.layer_norm(x, gain, bias);
            let act = g.gelu(ln);
            let sm = g.softmax(act, Some(mask.clone()));
            sum_all(g, sm)
        });
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![random(&mut rng, 6, 4), random(&mut rng, 1, 3), random(&mut rng, 5, 2), random(&mut rng, 2, 4)];
        let idx = Rc::new(vec![Some(0), None, Some(4), Some(2), Some(2), None, Some(1), Some(3), None]);
        check(params, move |g| {
            let table = g.param(0);
            let rows = g.gather_rows(table, vec![5, 1, 1]);
            let other = g.param(3);
            let stacked = g.concat_rows(vec![rows, other]);
            let left = g.slice_cols(stacked, 0, 3);
            let right = g.slice_cols(stacked, 3, 1);
            let gamma = g.param(1);
            let scaled = g.scale_by_elem(left, gamma, 2);
            let joined = g.concat_cols(vec![right, scaled]);
            let sq = g.matmul_t(joined, joined);
            let top = g.slice_cols(sq, 0, 3);
            let top3 = g.gather_rows(top, vec![0, 1, 2]);
            let bias_table = g.param(2);
            let biased = g.add_gather_bias(top3, bias_table, idx.clone(), 1);
            let dropped = g.mul_const(biased, Mat::from_vec(3, 3, vec![2.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.5, 1.0, 1.0]));
            let sc = g.scale(dropped, 0.7);
            sum_all(g, sc)
        });
    }

    #[test]
    fn cross_entropy_gradients_with_smoothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = vec![random(&mut rng, 3, 6)];
        check(params, |g| {
            let l = g.param(0);
            g.cross_entropy(l, vec![1, 5, 0], 0.1, 0.5)
        });
    }

    #[test]
    fn cross_entropy_value_matches_hand_arithmetic() {
        let params = vec![Mat::from_vec(1, 3, vec![1.0, 0.0, 0.0])];
        let mut g = Graph::new(&params);
        let l = g.param(0);
        let loss = g.cross_entropy(l, vec![0], 0.0, 1.0);
        let expected = (1f64.exp() + 2.0).ln() - 1.0;
        assert!((g.scalar(loss) - expected).abs() < 1e-15);
    }
}
