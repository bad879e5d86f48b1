//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op eagerly: values are computed when the op is
//! pushed, and [`Graph::backward`] walks the tape in reverse accumulating
//! adjoints. Parameters enter the tape through [`Graph::bind`] and receive
//! their gradients back in the originating [`ParameterSet`].

use std::collections::BTreeMap;

use super::kernels::{col2im3, gemm, im2col3, maxpool2, View};
use super::loss::{bce_grad, bce_loss, log_sum_exp, sigmoid};
use super::{NnError, ParameterSet, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(String),
    Conv2d { x: Var, w: Var, b: Var },
    /// `argmax` holds, per pooled output, the winning offset within its image's conv map.
    ConvReluPool { x: Var, w: Var, b: Var, argmax: Vec<u32> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    OneMinus(Var),
    Scale(Var, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, offset: usize },
    ConcatCols(Vec<Var>),
    Embedding { table: Var, ids: Vec<usize> },
    RowDot(Var, Var),
    RowSelect { mask: Vec<bool>, a: Var, b: Var },
    Bce { p: Var, labels: Vec<f64> },
    SoftmaxCe { logits: Var, targets: Vec<Option<usize>> },
    Sum(Var),
    Mean(Var),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Graph leaves for the parameters of one [`ParameterSet`].
#[derive(Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var, NnError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NnError::MissingParam(name.to_string()))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, expected: &[usize], actual: &[usize]) -> NnError {
    NnError::Shape {
        op,
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Constant (non-differentiable) leaf.
    pub fn input(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var, NnError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(shape_err("input", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, Op::Input, false))
    }

    /// Puts every tensor of `params` on the tape. Tensors flagged
    /// `requires_grad` become differentiable leaves.
    pub fn bind(&mut self, params: &ParameterSet) -> Bound {
        let mut vars = BTreeMap::new();
        for (name, t) in params.iter() {
            let op = if t.requires_grad() {
                Op::Param(name.clone())
            } else {
                Op::Input
            };
            let v = self.push(t.shape().to_vec(), t.data().to_vec(), op, t.requires_grad());
            vars.insert(name.clone(), v);
        }
        Bound { vars }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), NnError> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, &[0, 0], s)),
        }
    }

    fn dims4(&self, v: Var, op: &'static str) -> Result<[usize; 4], NnError> {
        match self.shape(v) {
            [a, b, c, d] => Ok([*a, *b, *c, *d]),
            s => Err(shape_err(op, &[0, 0, 0, 0], s)),
        }
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    /// `x: [B, Cin, H, W]`, `w: [Cout, Cin, 3, 3]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let [bsz, cin, h, wd] = self.dims4(x, "conv2d")?;
        let [cout, wcin, kh, kw] = self.dims4(w, "conv2d")?;
        if wcin != cin || kh != 3 || kw != 3 {
            return Err(shape_err("conv2d", &[cout, cin, 3, 3], self.shape(w)));
        }
        if self.shape(b) != [cout] {
            return Err(shape_err("conv2d", &[cout], self.shape(b)));
        }
        let hw = h * wd;
        let k = cin * 9;
        let mut out = vec![0.0; bsz * cout * hw];
        let mut cols = vec![0.0; k * hw];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = self.value(b);
            for bi in 0..bsz {
                im2col3(&xv[bi * cin * hw..(bi + 1) * cin * hw], cin, h, wd, &mut cols);
                let o = &mut out[bi * cout * hw..(bi + 1) * cout * hw];
                conv_image(wv, bv, &cols, cout, k, hw, o);
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(vec![bsz, cout, h, wd], out, Op::Conv2d { x, w, b }, needs))
    }

    /// Fused `max_pool2(relu(conv2d(x, w, b)))`. Works one image at a time so
    /// the full-resolution activations never leave cache; backward recomputes
    /// them from the input.
    pub fn conv_relu_pool(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let [bsz, cin, h, wd] = self.dims4(x, "conv_relu_pool")?;
        let [cout, wcin, kh, kw] = self.dims4(w, "conv_relu_pool")?;
        if wcin != cin || kh != 3 || kw != 3 {
            return Err(shape_err("conv_relu_pool", &[cout, cin, 3, 3], self.shape(w)));
        }
        if self.shape(b) != [cout] {
            return Err(shape_err("conv_relu_pool", &[cout], self.shape(b)));
        }
        if h % 2 != 0 || wd % 2 != 0 {
            return Err(shape_err("conv_relu_pool", &[bsz, cin, h + h % 2, wd + wd % 2], &[bsz, cin, h, wd]));
        }
        let hw = h * wd;
        let k = cin * 9;
        let pooled = cout * (h / 2) * (wd / 2);
        let mut out = Vec::with_capacity(bsz * pooled);
        let mut argmax = Vec::with_capacity(bsz * pooled);
        let mut cols = vec![0.0; k * hw];
        let mut conv = vec![0.0; cout * hw];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let bv = self.value(b);
            for bi in 0..bsz {
                im2col3(&xv[bi * cin * hw..(bi + 1) * cin * hw], cin, h, wd, &mut cols);
                conv_image(wv, bv, &cols, cout, k, hw, &mut conv);
                let (vals, arg) = maxpool2(&conv, cout, h, wd);
                out.extend(vals.into_iter().map(|v| v.max(0.0)));
                argmax.extend(arg.into_iter().map(|a| a as u32));
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let shape = vec![bsz, cout, h / 2, wd / 2];
        Ok(self.push(shape, out, Op::ConvReluPool { x, w, b, argmax }, needs))
    }

    /// 2x2 max pooling with stride 2 over `[B, C, H, W]`.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var, NnError> {
        let [bsz, c, h, w] = self.dims4(x, "max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("max_pool2", &[bsz, c, h + h % 2, w + w % 2], &[bsz, c, h, w]));
        }
        let (out, argmax) = maxpool2(self.value(x), bsz * c, h, w);
        let needs = self.needs(x);
        Ok(self.push(vec![bsz, c, h / 2, w / 2], out, Op::MaxPool2 { x, argmax }, needs))
    }

    /// Max over all spatial positions: `[B, C, H, W]` -> `[B, C]`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var, NnError> {
        let [bsz, c, h, w] = self.dims4(x, "global_max_pool")?;
        let hw = h * w;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(bsz * c);
        let mut argmax = Vec::with_capacity(bsz * c);
        for (m, plane) in xv.chunks_exact(hw).enumerate() {
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate().skip(1) {
                if v > plane[best] {
                    best = i;
                }
            }
            out.push(plane[best]);
            argmax.push(m * hw + best);
        }
        let needs = self.needs(x);
        // Same scatter-to-winner backward as 2x2 pooling.
        Ok(self.push(vec![bsz, c], out, Op::MaxPool2 { x, argmax }, needs))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(shape, value, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 - v, Op::OneMinus(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, value, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", &[k, n], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, View::rows(self.value(a), k), View::rows(self.value(b), n), 0.0, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), needs))
    }

    /// Adds a `[n]` bias to every row of `[m, n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NnError> {
        let (m, n) = self.dims2(x, "add_bias")?;
        if self.shape(b) != [n] {
            return Err(shape_err("add_bias", &[n], self.shape(b)));
        }
        let bv = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::AddBias(x, b), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", shape, self.shape(x)));
        }
        let value = self.value(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), needs))
    }

    /// Columns `start..start + len` of a `[m, n]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start + len > n {
            return Err(shape_err("slice_cols", &[m, start + len], &[m, n]));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for row in xv.chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(vec![m, len], out, Op::SliceCols { x, start }, needs))
    }

    /// Leading-dimension slice `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(shape_err("slice_rows", &[start + len], &shape));
        }
        let row: usize = shape[1..].iter().product();
        let out = self.value(x)[start * row..(start + len) * row].to_vec();
        let mut new_shape = shape;
        new_shape[0] = len;
        let needs = self.needs(x);
        Ok(self.push(new_shape, out, Op::SliceRows { x, offset: start * row }, needs))
    }

    /// Concatenates `[m, n_i]` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let Some(&first) = parts.first() else {
            return Err(NnError::Config("concat_cols of nothing".into()));
        };
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_cols")?;
            if pm != m {
                return Err(shape_err("concat_cols", &[m, pn], &[pm, pn]));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Row lookup into a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NnError> {
        let (vocab, dim) = self.dims2(table, "embedding")?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(NnError::Token { id, vocab });
            }
            out.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        let needs = self.needs(table);
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(vec![ids.len(), dim], out, op, needs))
    }

    /// Row-wise dot product of two `[m, n]` matrices, giving `[m]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (m, n) = self.dims2(a, "row_dot")?;
        if self.shape(b) != [m, n] {
            return Err(shape_err("row_dot", &[m, n], self.shape(b)));
        }
        let out = self
            .value(a)
            .chunks(n)
            .zip(self.value(b).chunks(n))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m], out, Op::RowDot(a, b), needs))
    }

    /// Row `i` of the result comes from `a` when `mask[i]`, else from `b`.
    pub fn row_select(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var, NnError> {
        let (m, n) = self.dims2(a, "row_select")?;
        if self.shape(b) != [m, n] || mask.len() != m {
            return Err(shape_err("row_select", &[m, n], self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m * n);
        for (i, &take_a) in mask.iter().enumerate() {
            let src = if take_a { av } else { bv };
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let needs = self.needs(a) || self.needs(b);
        let op = Op::RowSelect {
            mask: mask.to_vec(),
            a,
            b,
        };
        Ok(self.push(vec![m, n], out, op, needs))
    }

    /// Mean binary cross-entropy of probabilities `p` against `labels`.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var, NnError> {
        let pv = self.value(p);
        if pv.len() != labels.len() || labels.is_empty() {
            return Err(shape_err("bce", &[pv.len()], &[labels.len()]));
        }
        let loss =
            pv.iter().zip(labels).map(|(&q, &y)| bce_loss(q, y)).sum::<f64>() / labels.len() as f64;
        let needs = self.needs(p);
        let op = Op::Bce {
            p,
            labels: labels.to_vec(),
        };
        Ok(self.push(vec![1], vec![loss], op, needs))
    }

    /// Summed token cross-entropy of `[m, v]` logits; rows whose target is
    /// `None` are masked out.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
    ) -> Result<Var, NnError> {
        let (m, v) = self.dims2(logits, "softmax_cross_entropy")?;
        if targets.len() != m {
            return Err(shape_err("softmax_cross_entropy", &[m], &[targets.len()]));
        }
        let lv = self.value(logits);
        let mut loss = 0.0;
        for (row, t) in lv.chunks(v).zip(targets) {
            if let Some(t) = *t {
                if t >= v {
                    return Err(NnError::Token { id: t, vocab: v });
                }
                loss += log_sum_exp(row) - row[t];
            }
        }
        let needs = self.needs(logits);
        let op = Op::SoftmaxCe {
            logits,
            targets: targets.to_vec(),
        };
        Ok(self.push(vec![1], vec![loss], op, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let needs = self.needs(x);
        self.push(vec![1], vec![s], Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let needs = self.needs(x);
        self.push(vec![1], vec![s], Op::Mean(x), needs)
    }

    /// Back-propagates from the scalar `loss` and stores the gradient of
    /// every bound parameter in `params` (zeros for parameters off the path).
    pub fn backward(&self, loss: Var, params: &mut ParameterSet) -> Result<(), NnError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err("backward", &[1], self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if let Op::Param(name) = &node.op {
                let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                params.get_mut(name)?.set_grad(g)?;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(())
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { x, w, b } => {
                let dims = self.conv_dims(*x, node);
                let per_image = dims.cout * dims.hw;
                self.conv_backward(dims, *x, *w, *b, grads, |bi, dconv| {
                    dconv.copy_from_slice(&g[bi * per_image..(bi + 1) * per_image]);
                });
            }
            Op::ConvReluPool { x, w, b, argmax } => {
                let dims = self.conv_dims(*x, node);
                let pooled = node.value.len() / dims.bsz;
                self.conv_backward(dims, *x, *w, *b, grads, |bi, dconv| {
                    dconv.fill(0.0);
                    let range = bi * pooled..(bi + 1) * pooled;
                    for ((gi, yi), &a) in g[range.clone()].iter().zip(&y[range.clone()]).zip(&argmax[range]) {
                        if *yi > 0.0 {
                            dconv[a as usize] += gi;
                        }
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (gi, &src) in g.iter().zip(argmax) {
                        dx[src] += gi;
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                        if *yi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::OneMinus(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi);
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * c);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, gi)| *d += sign * gi);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = self.slot(grads, *a) {
                    gemm(m, n, k, View::rows(g, n), View::transposed(bv, n), 1.0, da);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(k, m, n, View::transposed(av, k), View::rows(g, n), 1.0, db);
                }
            }
            Op::AddBias(x, b) => {
                let n = self.shape(*b)[0];
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
                if let Some(db) = self.slot(grads, *b) {
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, gi)| *d += gi);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.shape(*x)[1];
                let len = node.shape[1];
                if let Some(dx) = self.slot(grads, *x) {
                    for (drow, grow) in dx.chunks_mut(n).zip(g.chunks(len)) {
                        drow[*start..start + len]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, gi)| *d += gi);
                    }
                }
            }
            Op::SliceRows { x, offset } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx[*offset..offset + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, gi)| *d += gi);
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.shape[0];
                let total = node.shape[1];
                let mut col = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if let Some(dp) = self.slot(grads, p) {
                        for i in 0..m {
                            dp[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(&g[i * total + col..i * total + col + w])
                                .for_each(|(d, gi)| *d += gi);
                        }
                    }
                    col += w;
                }
            }
            Op::Embedding { table, ids } => {
                let dim = node.shape[1];
                if let Some(dt) = self.slot(grads, *table) {
                    for (row, &id) in g.chunks(dim).zip(ids) {
                        dt[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(d, gi)| *d += gi);
                    }
                }
            }
            Op::RowDot(a, b) => {
                let n = self.shape(*a)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = self.slot(grads, *a) {
                    for ((drow, brow), gi) in da.chunks_mut(n).zip(bv.chunks(n)).zip(g) {
                        drow.iter_mut().zip(brow).for_each(|(d, bj)| *d += gi * bj);
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((drow, arow), gi) in db.chunks_mut(n).zip(av.chunks(n)).zip(g) {
                        drow.iter_mut().zip(arow).for_each(|(d, aj)| *d += gi * aj);
                    }
                }
            }
            Op::RowSelect { mask, a, b } => {
                let n = node.shape[1];
                for (target, want) in [(*a, true), (*b, false)] {
                    if let Some(dt) = self.slot(grads, target) {
                        for (i, &take_a) in mask.iter().enumerate() {
                            if take_a == want {
                                dt[i * n..(i + 1) * n]
                                    .iter_mut()
                                    .zip(&g[i * n..(i + 1) * n])
                                    .for_each(|(d, gi)| *d += gi);
                            }
                        }
                    }
                }
            }
            Op::Bce { p, labels } => {
                let pv = self.value(*p);
                let scale = g[0] / labels.len() as f64;
                if let Some(dp) = self.slot(grads, *p) {
                    for ((d, &q), &yl) in dp.iter_mut().zip(pv).zip(labels) {
                        *d += scale * bce_grad(q, yl);
                    }
                }
            }
            Op::SoftmaxCe { logits, targets } => {
                let v = self.shape(*logits)[1];
                let lv = self.value(*logits);
                if let Some(dl) = self.slot(grads, *logits) {
                    for ((drow, row), t) in dl.chunks_mut(v).zip(lv.chunks(v)).zip(targets) {
                        let Some(t) = *t else { continue };
                        let lse = log_sum_exp(row);
                        for (j, (d, l)) in drow.iter_mut().zip(row).enumerate() {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            *d += g[0] * ((l - lse).exp() - onehot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let s = g[0] / dx.len().max(1) as f64;
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
        }
    }

    fn conv_dims(&self, x: Var, node: &Node) -> ConvDims {
        let xs = self.shape(x);
        ConvDims {
            bsz: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: node.shape[1],
            hw: xs[2] * xs[3],
        }
    }

    /// Shared conv backward. `fill_dconv(bi, buf)` writes the gradient with
    /// respect to image `bi`'s pre-activation conv map into `buf`.
    fn conv_backward(
        &self,
        d: ConvDims,
        x: Var,
        w: Var,
        b: Var,
        grads: &mut [Option<Vec<f64>>],
        mut fill_dconv: impl FnMut(usize, &mut [f64]),
    ) {
        let ConvDims { bsz, cin, h, w: wd, cout, hw } = d;
        let k = cin * 9;
        let (xv, wv) = (self.value(x), self.value(w));
        let (need_w, need_b, need_x) = (self.needs(w), self.needs(b), self.needs(x));
        let mut dconv = vec![0.0; cout * hw];
        let mut cols = vec![0.0; if need_w { k * hw } else { 0 }];
        let mut dcols = vec![0.0; if need_x { k * hw } else { 0 }];
        let mut dw_acc = vec![0.0; if need_w { cout * k } else { 0 }];
        let mut db_acc = vec![0.0; if need_b { cout } else { 0 }];
        let mut dx_acc = vec![0.0; if need_x { bsz * cin * hw } else { 0 }];
        for bi in 0..bsz {
            fill_dconv(bi, &mut dconv);
            if need_b {
                for (acc, row) in db_acc.iter_mut().zip(dconv.chunks(hw)) {
                    *acc += row.iter().sum::<f64>();
                }
            }
            if need_w {
                im2col3(&xv[bi * cin * hw..(bi + 1) * cin * hw], cin, h, wd, &mut cols);
                gemm(cout, hw, k, View::rows(&dconv, hw), View::transposed(&cols, hw), 1.0, &mut dw_acc);
            }
            if need_x {
                gemm(k, cout, hw, View::transposed(wv, k), View::rows(&dconv, hw), 0.0, &mut dcols);
                col2im3(&dcols, cin, h, wd, &mut dx_acc[bi * cin * hw..(bi + 1) * cin * hw]);
            }
        }
        for (v, acc) in [(w, dw_acc), (b, db_acc), (x, dx_acc)] {
            if let Some(slot) = self.slot(grads, v) {
                slot.iter_mut().zip(&acc).for_each(|(s, a)| *s += a);
            }
        }
    }
}

#[derive(Clone, Copy)]
struct ConvDims {
    bsz: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    hw: usize,
}

/// `out[cout, hw] = bias + w[cout, k] * cols[k, hw]` for one image.
fn conv_image(w: &[f64], bias: &[f64], cols: &[f64], cout: usize, k: usize, hw: usize, out: &mut [f64]) {
    for (co, chunk) in out.chunks_mut(hw).enumerate() {
        chunk.fill(bias[co]);
    }
    gemm(cout, k, hw, View::rows(w, k), View::rows(cols, hw), 1.0, out);
}
