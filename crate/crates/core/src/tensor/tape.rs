//! Append-only operation tape for reverse-mode differentiation.
//!
//! A forward pass records one node per primitive; `backward` consumes the
//! tape and replays it in reverse, accumulating vector-Jacobian products.
//! Gradient accumulation walks nodes in reverse index order, so a
//! single-threaded run is bit-reproducible.

use super::{matmul, matmul_nt, matmul_tn, Real, Tensor};

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    /// `[r, c] + [1, c]`, the broadcast needed for biases and row offsets.
    AddRow(Var, Var),
    /// `[m, k] @ [k, n]`
    Matmul(Var, Var),
    /// `[m, k] @ [n, k]^T`
    MatmulNT(Var, Var),
    Square(Var),
    Sqrt(Var),
    /// Softmax over the last axis.
    Softmax(Var),
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
    /// `out[i, :] = in[rows[i], :]` over the first axis.
    GatherRows(Var, Vec<usize>),
    /// `out.flat[i] = in.flat[idx[i]]`, arbitrary re-indexing.
    GatherFlat(Var, Vec<usize>),
    /// Mean over rows of `logsumexp(row) - row[target]`; logits `[n, K]`.
    CrossEntropy(Var, Vec<usize>),
}

struct Node<S: Real> {
    op: Op,
    value: Tensor<S>,
    needs_grad: bool,
}

/// Per-variable gradients produced by [`Tape::backward`].
pub struct Gradients<S: Real> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0].take()
    }
}

pub struct Tape<S: Real = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes, leaves included. Deterministic for a given
    /// architecture and input shapes; backs the per-iteration memory claim.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Bind a leaf, honoring `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor<S>) -> Var {
        let needs = tensor.requires_grad;
        self.push(Op::Leaf, tensor.clone(), needs)
    }

    /// Bind a constant leaf (no gradient).
    pub fn input(&mut self, tensor: &Tensor<S>) -> Var {
        self.push(Op::Leaf, tensor.clone(), false)
    }

    /// Bind a differentiable leaf.
    pub fn param(&mut self, tensor: &Tensor<S>) -> Var {
        self.push(Op::Leaf, tensor.clone(), true)
    }

    fn push(&mut self, op: Op, value: Tensor<S>, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite tape value");
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), value, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), value, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).mul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), value, ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cs = S::from_f64(c);
        let value = self.value(a).map(|v| v + cs);
        let ng = self.needs(a);
        self.push(Op::AddScalar(a), value, ng)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let ng = self.needs(a);
        self.push(Op::MulScalar(a, c), value, ng)
    }

    /// `[r, c] + [1, c]` (or `[c]`) broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let cols = *av.shape().last().expect("add_row on empty shape");
        assert_eq!(bv.numel(), cols, "add_row: row length mismatch");
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            for (d, &r) in chunk.iter_mut().zip(bv.data().iter()) {
                *d = *d + r;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::AddRow(a, b), value, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape().len(), 2, "matmul lhs must be 2-D");
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be 2-D");
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims: {k} vs {k2}");
        let mut out = vec![S::zero(); m * n];
        matmul(av.data(), bv.data(), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Matmul(a, b), Tensor::new(vec![m, n], out), ng)
    }

    /// `a @ b^T` with `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (n, k2) = (bv.shape()[0], bv.shape()[1]);
        assert_eq!(k, k2, "matmul_nt inner dims: {k} vs {k2}");
        let mut out = vec![S::zero(); m * n];
        matmul_nt(av.data(), bv.data(), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatmulNT(a, b), Tensor::new(vec![m, n], out), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        let ng = self.needs(a);
        self.push(Op::Square(a), value, ng)
    }

    /// Elementwise square root; inputs must be positive for a finite gradient.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.sqrt());
        let ng = self.needs(a);
        self.push(Op::Sqrt(a), value, ng)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = *av.shape().last().expect("softmax on empty shape");
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            let mut max = row[0];
            for &v in row.iter() {
                if v > max {
                    max = v;
                }
            }
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = S::one() / sum;
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(Op::Softmax(a), value, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = S::zero();
        for &v in self.value(a).data() {
            acc += v;
        }
        let ng = self.needs(a);
        self.push(Op::SumAll(a), Tensor::new(vec![1], vec![acc]), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let mut acc = S::zero();
        for &v in self.value(a).data() {
            acc += v;
        }
        let value = Tensor::new(vec![1], vec![acc / S::from_f64(n as f64)]);
        let ng = self.needs(a);
        self.push(Op::MeanAll(a), value, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape);
        let ng = self.needs(a);
        self.push(Op::Reshape(a), value, ng)
    }

    /// Gather rows over the first axis. Backward scatter-adds, so a row
    /// gathered k times receives the sum of its k output gradients.
    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let av = self.value(a);
        let r = av.shape()[0];
        let stride = av.numel() / r;
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &src in &rows {
            assert!(src < r, "gather_rows: row {src} out of {r}");
            data.extend_from_slice(&av.data()[src * stride..(src + 1) * stride]);
        }
        let mut shape = av.shape().to_vec();
        shape[0] = rows.len();
        let ng = self.needs(a);
        self.push(Op::GatherRows(a, rows), Tensor::new(shape, data), ng)
    }

    /// Gather arbitrary elements of the flattened input into `out_shape`.
    pub fn gather_flat(&mut self, a: Var, idx: Vec<usize>, out_shape: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(out_shape.iter().product::<usize>(), idx.len());
        let src = av.data();
        let data: Vec<S> = idx.iter().map(|&i| src[i]).collect();
        let ng = self.needs(a);
        self.push(Op::GatherFlat(a, idx), Tensor::new(out_shape.to_vec(), data), ng)
    }

    /// Cross-entropy with logits `[n, K]`, mean over the n rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape().len(), 2, "cross_entropy expects [n, K] logits");
        let (n, k) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(targets.len(), n, "one target per logits row");
        let mut acc = S::zero();
        for (row, &y) in lv.data().chunks(k).zip(targets.iter()) {
            assert!(y < k, "target {y} out of {k} classes");
            let mut max = row[0];
            for &v in row.iter() {
                if v > max {
                    max = v;
                }
            }
            let mut sum = S::zero();
            for &v in row.iter() {
                sum += (v - max).exp();
            }
            acc += max + sum.ln() - row[y];
        }
        let value = Tensor::new(vec![1], vec![acc / S::from_f64(n as f64)]);
        let ng = self.needs(logits);
        self.push(Op::CrossEntropy(logits, targets), value, ng)
    }

    /// Reverse sweep from a scalar root. Consumes the tape: one backward
    /// per forward pass.
    pub fn backward(self, root: Var) -> Gradients<S> {
        assert_eq!(
            self.nodes[root.0].value.numel(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(vec![1], vec![S::one()]));

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, id: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let accumulate = |grads: &mut [Option<Tensor<S>>], v: Var, delta: Tensor<S>| {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data().iter()) {
                        *e += *d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let wants = |v: Var| self.nodes[v.0].needs_grad;

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.mul(self.value(*b)));
                }
                if wants(*b) {
                    accumulate(grads, *b, g.mul(self.value(*a)));
                }
            }
            Op::AddScalar(a) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
            }
            Op::MulScalar(a, c) => {
                if wants(*a) {
                    accumulate(grads, *a, g.scale(*c));
                }
            }
            Op::AddRow(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*b) {
                    let bv = self.value(*b);
                    let cols = bv.numel();
                    let mut db = vec![S::zero(); cols];
                    for chunk in g.data().chunks(cols) {
                        for (d, &gv) in db.iter_mut().zip(chunk.iter()) {
                            *d += gv;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db));
                }
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if wants(*a) {
                    // dA = g @ B^T
                    let mut da = vec![S::zero(); m * k];
                    matmul_nt(g.data(), bv.data(), &mut da, m, n, k);
                    accumulate(grads, *a, Tensor::new(vec![m, k], da));
                }
                if wants(*b) {
                    // dB = A^T @ g
                    let mut db = vec![S::zero(); k * n];
                    matmul_tn(av.data(), g.data(), &mut db, m, k, n);
                    accumulate(grads, *b, Tensor::new(vec![k, n], db));
                }
            }
            Op::MatmulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[0];
                if wants(*a) {
                    // dA = g @ B
                    let mut da = vec![S::zero(); m * k];
                    matmul(g.data(), bv.data(), &mut da, m, n, k);
                    accumulate(grads, *a, Tensor::new(vec![m, k], da));
                }
                if wants(*b) {
                    // dB = g^T @ A
                    let mut db = vec![S::zero(); n * k];
                    matmul_tn(g.data(), av.data(), &mut db, m, n, k);
                    accumulate(grads, *b, Tensor::new(vec![n, k], db));
                }
            }
            Op::Square(a) => {
                if wants(*a) {
                    let two = S::from_f64(2.0);
                    let av = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(av.data().iter())
                        .map(|(&gv, &xv)| gv * two * xv)
                        .collect();
                    accumulate(grads, *a, Tensor::new(av.shape().to_vec(), data));
                }
            }
            Op::Sqrt(a) => {
                if wants(*a) {
                    let half = S::from_f64(0.5);
                    let yv = &self.nodes[id].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(yv.data().iter())
                        .map(|(&gv, &y)| gv * half / y)
                        .collect();
                    accumulate(grads, *a, Tensor::new(yv.shape().to_vec(), data));
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let yv = &self.nodes[id].value;
                    let cols = *yv.shape().last().unwrap();
                    let mut data = vec![S::zero(); yv.numel()];
                    for ((drow, grow), yrow) in data
                        .chunks_mut(cols)
                        .zip(g.data().chunks(cols))
                        .zip(yv.data().chunks(cols))
                    {
                        let mut dot = S::zero();
                        for (&gv, &yv) in grow.iter().zip(yrow.iter()) {
                            dot += gv * yv;
                        }
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow.iter()).zip(yrow.iter()) {
                            *d = yv * (gv - dot);
                        }
                    }
                    accumulate(grads, *a, Tensor::new(yv.shape().to_vec(), data));
                }
            }
            Op::SumAll(a) => {
                if wants(*a) {
                    let av = self.value(*a);
                    let gv = g.data()[0];
                    accumulate(
                        grads,
                        *a,
                        Tensor::new(av.shape().to_vec(), vec![gv; av.numel()]),
                    );
                }
            }
            Op::MeanAll(a) => {
                if wants(*a) {
                    let av = self.value(*a);
                    let gv = g.data()[0] / S::from_f64(av.numel() as f64);
                    accumulate(
                        grads,
                        *a,
                        Tensor::new(av.shape().to_vec(), vec![gv; av.numel()]),
                    );
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    let av = self.value(*a);
                    accumulate(grads, *a, g.clone().reshape(av.shape()));
                }
            }
            Op::GatherRows(a, rows) => {
                if wants(*a) {
                    let av = self.value(*a);
                    let stride = av.numel() / av.shape()[0];
                    let mut da = vec![S::zero(); av.numel()];
                    for (i, &src) in rows.iter().enumerate() {
                        let from = &g.data()[i * stride..(i + 1) * stride];
                        let to = &mut da[src * stride..(src + 1) * stride];
                        for (t, &f) in to.iter_mut().zip(from.iter()) {
                            *t += f;
                        }
                    }
                    accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da));
                }
            }
            Op::GatherFlat(a, idx) => {
                if wants(*a) {
                    let av = self.value(*a);
                    let mut da = vec![S::zero(); av.numel()];
                    for (i, &src) in idx.iter().enumerate() {
                        da[src] += g.data()[i];
                    }
                    accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da));
                }
            }
            Op::CrossEntropy(logits, targets) => {
                if wants(*logits) {
                    let lv = self.value(*logits);
                    let (n, k) = (lv.shape()[0], lv.shape()[1]);
                    let scale = g.data()[0] / S::from_f64(n as f64);
                    let mut dl = vec![S::zero(); n * k];
                    for (r, (row, &y)) in lv.data().chunks(k).zip(targets.iter()).enumerate() {
                        let mut max = row[0];
                        for &v in row.iter() {
                            if v > max {
                                max = v;
                            }
                        }
                        let mut sum = S::zero();
                        let drow = &mut dl[r * k..(r + 1) * k];
                        for (d, &v) in drow.iter_mut().zip(row.iter()) {
                            *d = (v - max).exp();
                            sum += *d;
                        }
                        let inv = S::one() / sum;
                        for d in drow.iter_mut() {
                            *d = *d * inv;
                        }
                        drow[y] -= S::one();
                        for d in drow.iter_mut() {
                            *d = *d * scale;
                        }
                    }
                    accumulate(grads, *logits, Tensor::new(vec![n, k], dl));
                }
            }
        }
    }
}
