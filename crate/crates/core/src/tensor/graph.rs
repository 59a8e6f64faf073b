use super::kernels::{mm, mm_nt, mm_tn};
use super::{dims2, gelu_scalar, normal_cdf, Element, Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulNt,
    Transpose,
    Add,
    AddRow,
    Mul,
    Scale,
    Sum,
    Gelu,
    LayerNorm,
    Softmax,
    GatherRows,
    ConcatRows,
    SliceRows,
    SliceCols,
    ConcatCols,
    CrossEntropy,
}

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: F },
    Sum { a: Var },
    Gelu { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    Softmax { a: Var },
    GatherRows { table: Var, ids: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<F>, count: usize },
}

impl<F> Op<F> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::MatMulNt { .. } => OpKind::MatMulNt,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Add { .. } => OpKind::Add,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::ConcatRows { .. } => OpKind::ConcatRows,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols { .. } => OpKind::ConcatCols,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::MatMulNt { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::AddRow { a, row } => vec![*a, *row],
            Op::Transpose { a }
            | Op::Scale { a, .. }
            | Op::Sum { a }
            | Op::Gelu { a }
            | Op::Softmax { a, .. }
            | Op::SliceRows { a, .. }
            | Op::SliceCols { a, .. } => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::GatherRows { table, .. } => vec![*table],
            Op::ConcatRows { parts } | Op::ConcatCols { parts } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Append-only tape of tensor operations.
///
/// Nodes are recorded in creation order, which is a topological order, so
/// backward is a single reverse sweep.
pub struct Graph<F: Element = f32> {
    nodes: Vec<Node<F>>,
    backward_done: bool,
    fault: Option<OpKind>,
}

impl<F: Element> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
            fault: None,
        }
    }

    /// Test hook: every backward of `kind` doubles its incoming gradient.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf; its `requires_grad` flag is taken from the tensor.
    pub fn leaf(&mut self, mut t: Tensor<F>) -> Var {
        t.set_grad(None);
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, name: &'static str, shape: &[usize], data: Vec<F>, op: Op<F>) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = op.inputs().iter().any(|&v| self.requires_grad(v));
        let value = Tensor::new(shape, data)?.with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn d2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        dims2(op, self.value(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.d2("matmul", a)?;
        let (k2, n) = self.d2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        mm(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        self.push("matmul", &[m, n], out, Op::MatMul { a, b })
    }

    /// `a·bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.d2("matmul_nt", a)?;
        let (n, k2) = self.d2("matmul_nt", b)?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        mm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        self.push("matmul_nt", &[m, n], out, Op::MatMulNt { a, b })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.d2("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", &[c, r], out, Op::Transpose { a })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("add", &shape, out, Op::Add { a, b })
    }

    /// Broadcast-add a length-`C` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if self.value(row).numel() != c {
            return Err(shape_err("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let out = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % c])
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("add_row", &shape, out, Op::AddRow { a, row })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", &shape, out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = F::of(factor);
        let out = self.value(a).data().iter().map(|&x| x * f).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", &shape, out, Op::Scale { a, factor: f })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: F = self.value(a).data().iter().copied().sum();
        self.push("sum", &[1], vec![s], Op::Sum { a })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).data().iter().map(|&x| gelu_scalar(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push("gelu", &shape, out, Op::Gelu { a })
    }

    /// Row-wise normalisation over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let d = self.value(x).cols();
        if self.value(gain).numel() != d {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        if self.value(bias).numel() != d {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(bias)));
        }
        let rows = self.value(x).rows();
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let inv_d = F::of(1.0 / d as f64);
        let eps = F::of(eps);
        let mut xhat = vec![F::zero(); rows * d];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); rows * d];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push("layer_norm", &shape, out, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    /// Row-wise softmax. With `causal`, row `i` only covers columns `0..=i`
    /// and every later column is exactly zero.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Result<Var> {
        let (r, c) = self.d2("softmax", a)?;
        let src = self.value(a).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let width = if causal { (i + 1).min(c) } else { c };
            let row = &src[i * c..i * c + width];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out[i * c + j] = e;
                z += e;
            }
            for v in &mut out[i * c..i * c + width] {
                *v /= z;
            }
        }
        self.push("softmax", &[r, c], out, Op::Softmax { a })
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.d2("gather_rows", table)?;
        if ids.is_empty() {
            return Err(TensorError::Contract("gather_rows needs at least one id".into()));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index { index: id, bound: v });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        self.push("gather_rows", &[ids.len(), d], out, Op::GatherRows { table, ids: ids.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows needs at least one part".into()))?;
        let (_, c) = self.d2("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.d2("concat_rows", p)?;
            if pc != c {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        self.push("concat_rows", &[rows, c], out, Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.d2("slice_rows", a)?;
        if start >= end || end > r {
            return Err(TensorError::Index { index: end, bound: r });
        }
        let out = self.value(a).data()[start * c..end * c].to_vec();
        self.push("slice_rows", &[end - start, c], out, Op::SliceRows { a, start })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.d2("slice_cols", a)?;
        if start >= end || end > c {
            return Err(TensorError::Index { index: end, bound: c });
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        self.push("slice_cols", &[r, w], out, Op::SliceCols { a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols needs at least one part".into()))?;
        let (r, _) = self.d2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.d2("concat_cols", p)?;
            if pr != r {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push("concat_cols", &[r, total], out, Op::ConcatCols { parts: parts.to_vec() })
    }

    /// Mean of `-log softmax(logits)[t, target[t]]` over rows where `mask[t]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.d2("softmax_cross_entropy", logits)?;
        if targets.len() != t || mask.len() != t {
            return Err(shape_err("softmax_cross_entropy", self.shape(logits), &[targets.len(), mask.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(TensorError::Index { index: bad, bound: v });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyLoss);
        }
        let src = self.value(logits).data();
        let mut probs = vec![F::zero(); t * v];
        let mut total = F::zero();
        for r in 0..t {
            if !mask[r] {
                continue;
            }
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[r * v + j] = e;
                z += e;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p /= z;
            }
            total += z.ln() + max - row[targets[r]];
        }
        let loss = total / F::of(count as f64);
        self.push(
            "softmax_cross_entropy",
            &[1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        )
    }

    /// Clear every gradient buffer so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.set_grad(None);
        }
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every requires-grad node reachable from `loss` ends up with a grad
    /// buffer; nodes that do not require grad never get one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut reach = vec![false; loss.0 + 1];
        reach[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if reach[i] {
                for v in self.nodes[i].op.inputs() {
                    reach[v.0] = true;
                }
            }
        }
        for (i, &r) in reach.iter().enumerate() {
            let t = &mut self.nodes[i].value;
            if r && t.requires_grad() {
                let n = t.numel();
                t.set_grad(Some(vec![F::zero(); n]));
            }
        }
        if !self.requires_grad(loss) {
            self.backward_done = true;
            return Ok(());
        }
        self.nodes[loss.0].value.set_grad(Some(vec![F::one()]));

        for i in (0..=loss.0).rev() {
            if !reach[i] || !self.nodes[i].value.requires_grad() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let mut gout = self.nodes[i].value.take_grad().expect("allocated above");
            if self.fault == Some(self.nodes[i].op.kind()) {
                for g in &mut gout {
                    *g *= F::of(2.0);
                }
            }
            self.backprop_node(i, &gout);
            self.nodes[i].value.set_grad(Some(gout));
        }
        self.backward_done = true;
        Ok(())
    }

    /// Run `f` on the grad buffer of `v` (if it requires grad) with shared
    /// access to the rest of the graph.
    fn acc(&mut self, v: Var, f: impl FnOnce(&Self, &mut [F])) {
        if !self.nodes[v.0].value.requires_grad() {
            return;
        }
        let mut g = match self.nodes[v.0].value.take_grad() {
            Some(g) => g,
            None => return,
        };
        f(self, &mut g);
        self.nodes[v.0].value.set_grad(Some(g));
    }

    fn backprop_node(&mut self, i: usize, gout: &[F]) {
        // Temporarily move the op out so its saved buffers can be read while
        // input gradients are mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let out_shape = self.nodes[i].value.shape().to_vec();
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = dims2("matmul", self.value(*a)).unwrap();
                let n = out_shape[1];
                let (a, b) = (*a, *b);
                self.acc(a, |g, ga| mm_nt(m, n, k, gout, g.value(b).data(), ga, true));
                self.acc(b, |g, gb| mm_tn(k, m, n, g.value(a).data(), gout, gb, true));
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = dims2("matmul_nt", self.value(*a)).unwrap();
                let n = out_shape[1];
                let (a, b) = (*a, *b);
                self.acc(a, |g, ga| mm(m, n, k, gout, g.value(b).data(), ga, true));
                self.acc(b, |g, gb| mm_tn(n, m, k, gout, g.value(a).data(), gb, true));
            }
            Op::Transpose { a } => {
                let (c, r) = (out_shape[0], out_shape[1]);
                self.acc(*a, |_, ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += gout[j * r + i];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    self.acc(v, |_, ga| {
                        for (x, &y) in ga.iter_mut().zip(gout) {
                            *x += y;
                        }
                    });
                }
            }
            Op::AddRow { a, row } => {
                self.acc(*a, |_, ga| {
                    for (x, &y) in ga.iter_mut().zip(gout) {
                        *x += y;
                    }
                });
                let c = *out_shape.last().unwrap();
                self.acc(*row, |_, gr| {
                    for (idx, &y) in gout.iter().enumerate() {
                        gr[idx % c] += y;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                self.acc(a, |g, ga| {
                    for ((x, &y), &bv) in ga.iter_mut().zip(gout).zip(g.value(b).data()) {
                        *x += y * bv;
                    }
                });
                self.acc(b, |g, gb| {
                    for ((x, &y), &av) in gb.iter_mut().zip(gout).zip(g.value(a).data()) {
                        *x += y * av;
                    }
                });
            }
            Op::Scale { a, factor } => {
                let f = *factor;
                self.acc(*a, |_, ga| {
                    for (x, &y) in ga.iter_mut().zip(gout) {
                        *x += y * f;
                    }
                });
            }
            Op::Sum { a } => {
                let s = gout[0];
                self.acc(*a, |_, ga| {
                    for x in ga.iter_mut() {
                        *x += s;
                    }
                });
            }
            Op::Gelu { a } => {
                let a = *a;
                let inv_sqrt_2pi = F::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                self.acc(a, |g, ga| {
                    for ((x, &y), &v) in ga.iter_mut().zip(gout).zip(g.value(a).data()) {
                        let pdf = (-(v * v) * F::of(0.5)).exp() * inv_sqrt_2pi;
                        *x += y * (normal_cdf(v) + v * pdf);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = *out_shape.last().unwrap();
                let rows = gout.len() / d;
                let gain_v = self.value(*gain).data().to_vec();
                self.acc(*gain, |_, gg| {
                    for (idx, &y) in gout.iter().enumerate() {
                        gg[idx % d] += y * xhat[idx];
                    }
                });
                self.acc(*bias, |_, gb| {
                    for (idx, &y) in gout.iter().enumerate() {
                        gb[idx % d] += y;
                    }
                });
                let inv_d = F::of(1.0 / d as f64);
                self.acc(*x, |_, gx| {
                    let mut dxhat = vec![F::zero(); d];
                    for r in 0..rows {
                        let mut mean_dxhat = F::zero();
                        let mut mean_dxhat_xhat = F::zero();
                        for j in 0..d {
                            let v = gout[r * d + j] * gain_v[j];
                            dxhat[j] = v;
                            mean_dxhat += v;
                            mean_dxhat_xhat += v * xhat[r * d + j];
                        }
                        mean_dxhat *= inv_d;
                        mean_dxhat_xhat *= inv_d;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxhat[j] - mean_dxhat - xhat[r * d + j] * mean_dxhat_xhat);
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                let (r, c) = (out_shape[0], out_shape[1]);
                let y = self.nodes[i].value.data().to_vec();
                self.acc(*a, |_, ga| {
                    for row in 0..r {
                        let ys = &y[row * c..(row + 1) * c];
                        let gs = &gout[row * c..(row + 1) * c];
                        let dot: F = ys.iter().zip(gs).map(|(&p, &q)| p * q).sum();
                        for j in 0..c {
                            ga[row * c + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let d = out_shape[1];
                self.acc(*table, |_, gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += gout[r * d + j];
                        }
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc(p, |_, gp| {
                        for (x, &y) in gp.iter_mut().zip(&gout[offset..offset + n]) {
                            *x += y;
                        }
                    });
                    offset += n;
                }
            }
            Op::SliceRows { a, start } => {
                let c = out_shape[1];
                let off = start * c;
                self.acc(*a, |_, ga| {
                    for (x, &y) in ga[off..off + gout.len()].iter_mut().zip(gout) {
                        *x += y;
                    }
                });
            }
            Op::SliceCols { a, start } => {
                let (r, w) = (out_shape[0], out_shape[1]);
                let c = self.value(*a).cols();
                let start = *start;
                self.acc(*a, |_, ga| {
                    for i in 0..r {
                        for j in 0..w {
                            ga[i * c + start + j] += gout[i * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let (r, total) = (out_shape[0], out_shape[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(p, |_, gp| {
                        for i in 0..r {
                            for j in 0..w {
                                gp[i * w + j] += gout[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::CrossEntropy { logits, targets, mask, probs, count } => {
                let v = self.value(*logits).cols();
                let scale = gout[0] / F::of(*count as f64);
                self.acc(*logits, |_, gl| {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..v {
                            gl[r * v + j] += scale * probs[r * v + j];
                        }
                        gl[r * v + targets[r]] -= scale;
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::eye(2));
        let x = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let y = g.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let ix = g.matmul(i, x).unwrap();
        assert_eq!(g.value(ix).data(), &[1., 2., 3., 4.]);
        let xy = g.matmul(x, y).unwrap();
        assert_eq!(g.value(xy).data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[2, 2], &[1., 2., 3., 4.]));
        let s = g.sum(w).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1., 1., 1., 1.]);
    }

    #[test]
    fn square_sum_grad_is_two_w() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[2, 2], &[1., 2., 3., 4.]));
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2., 4., 6., 8.]);
    }

    #[test]
    fn second_backward_without_reset_errors() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[2], &[1., 2.]));
        let s = g.sum(w).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.backward(s), Err(TensorError::BackwardTwice));
        g.reset_grads();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1., 1.]);
    }

    #[test]
    fn non_scalar_backward_is_contract_error() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[2], &[1., 2.]));
        assert!(matches!(g.backward(w), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn frozen_leaves_never_get_grad_buffers() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[2, 2], &[1., 2., 3., 4.]));
        let c = g.constant(t(&[2, 2], &[1., 1., 1., 1.]));
        let p = g.matmul(w, c).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(w).is_some());
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn gelu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0.0, 10.0, 1.0]));
        let y = g.gelu(x).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-6);
        // 1·Φ(1), Φ(1) = 0.8413447460685429
        assert!((v[2] - 0.841_345).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 4], &[5., 5., 5., 5.]));
        let gain = g.constant(Tensor::full(&[4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-9));

        let x = g.constant(t(&[1, 2], &[1., 3.]));
        let gain = g.constant(Tensor::full(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);

        let bad = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.layer_norm(x, bad, bias, 1e-5), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[3, 8]));
        let l = g.softmax_cross_entropy(z, &[0, 3, 7], &[true; 3]).unwrap();
        assert!((g.value(l).data()[0] - 8f64.ln()).abs() < 1e-12);

        let mut logits = vec![0.0; 8];
        logits[5] = 1e4;
        let z = g.constant(t(&[1, 8], &logits));
        let l = g.softmax_cross_entropy(z, &[5], &[true]).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-9);

        let z = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let l = g.softmax_cross_entropy(z, &[0], &[true]).unwrap();
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((g.value(l).data()[0] - want).abs() < 1e-12);
        assert!((want - 0.31326).abs() < 1e-5);

        assert_eq!(g.softmax_cross_entropy(z, &[0], &[false]), Err(TensorError::EmptyLoss));
        assert!(matches!(
            g.softmax_cross_entropy(z, &[2], &[true]),
            Err(TensorError::Index { index: 2, bound: 2 })
        ));
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(t(&[2, 2], &[1.0, 5.0, 1.0, 1.0]));
        let p = g.softmax_rows(s, true).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn non_finite_forward_is_error() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::full(&[1], f32::MAX));
        assert_eq!(g.scale(a, 10.0), Err(TensorError::NonFinite("scale")));
    }
}
