//! Append-only autodiff graph.
//!
//! Nodes are evaluated eagerly as they are built, so a [`Graph`] is both the
//! computation and its tape. `backward` walks the arena in reverse creation
//! order — inputs always precede consumers — and accumulates gradients for
//! every tracked node. Graphs are confined to one thread; parameters enter
//! as shared [`Arc<Tensor>`] leaves so many graphs on many threads can read
//! the same weights without copying.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::{kernels, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul,
    Add,
    AddRow,
    Mul,
    Scale(f32),
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    LayerNorm,
    Gelu,
    Embed { ids: Arc<Vec<u32>> },
    Concat { axis: usize },
    Slice { start: [usize; 2], end: [usize; 2] },
    Reshape,
    Transpose,
    Rope { table: Arc<kernels::RopeTable> },
    Attention {
        table: Arc<kernels::RopeTable>,
        n_heads: usize,
        scale: f32,
    },
    Sum,
    Mean,
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    inputs: Vec<usize>,
    track: bool,
    /// Saved forward statistics (layer norm keeps `(mean, rstd)` per row).
    aux: Option<Vec<f32>>,
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    grad_enabled: bool,
}

impl Graph {
    /// Graph that records backward information.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Forward-only graph: values are computed, the tape is not kept.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<usize>, aux: Option<Vec<f32>>) -> Var {
        self.push_arc(Arc::new(value), op, inputs, aux)
    }

    fn push_arc(
        &mut self,
        value: Arc<Tensor>,
        op: Op,
        inputs: Vec<usize>,
        aux: Option<Vec<f32>>,
    ) -> Var {
        let track = self.grad_enabled && inputs.iter().any(|&i| self.nodes[i].track);
        let (op, inputs, aux) = if self.grad_enabled {
            (op, inputs, aux)
        } else {
            (Op::Leaf, Vec::new(), None)
        };
        self.nodes.push(Node {
            value,
            op,
            inputs,
            track,
            aux,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; gradients never flow into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, Vec::new(), None)
    }

    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.push_arc(t, Op::Leaf, Vec::new(), None)
    }

    /// Trainable leaf sharing storage with the caller.
    pub fn param(&mut self, t: Arc<Tensor>) -> Var {
        let v = self.push_arc(t, Op::Leaf, Vec::new(), None);
        self.nodes[v.0].track = self.grad_enabled;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_shared(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    /// Gradient buffer of `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads[v.0].take()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rank2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::Rank {
                op,
                shape: other.to_vec(),
            }),
        }
    }

    // ------------------------------------------------------------------
    // Operations
    // ------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, ka) = self.rank2(a, "matmul")?;
        let (kb, n) = self.rank2(b, "matmul")?;
        if ka != kb {
            return Err(TensorError::Mismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            ka,
            n,
            &mut out,
        );
        let t = Tensor::from_vec(vec![m, n], out).expect("matmul shape");
        Ok(self.push(t, Op::Matmul, vec![a.0, b.0], None))
    }

    /// Elementwise add, or row-broadcast add when `b` is rank 1 and matches
    /// the trailing dimension of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa == sb {
            let mut out = self.nodes[a.0].value.data().to_vec();
            for (o, &v) in out.iter_mut().zip(self.nodes[b.0].value.data()) {
                *o += v;
            }
            let t = Tensor::from_vec(sa, out).expect("add shape");
            return Ok(self.push(t, Op::Add, vec![a.0, b.0], None));
        }
        if sb.len() == 1 && sa.last() == sb.last() && sa.len() == 2 {
            let cols = sb[0];
            let mut out = self.nodes[a.0].value.data().to_vec();
            let bd = self.nodes[b.0].value.data();
            for row in out.chunks_mut(cols) {
                for (o, &v) in row.iter_mut().zip(bd) {
                    *o += v;
                }
            }
            let t = Tensor::from_vec(sa, out).expect("add_row shape");
            return Ok(self.push(t, Op::AddRow, vec![a.0, b.0], None));
        }
        Err(TensorError::Mismatch {
            op: "add",
            lhs: sa,
            rhs: sb,
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Mismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = self.nodes[a.0].value.data().to_vec();
        for (o, &v) in out.iter_mut().zip(self.nodes[b.0].value.data()) {
            *o *= v;
        }
        let t = Tensor::from_vec(self.shape(a).to_vec(), out).expect("mul shape");
        Ok(self.push(t, Op::Mul, vec![a.0, b.0], None))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let mut out = self.nodes[a.0].value.data().to_vec();
        for o in out.iter_mut() {
            *o *= c;
        }
        let t = Tensor::from_vec(self.shape(a).to_vec(), out).expect("scale shape");
        self.push(t, Op::Scale(c), vec![a.0], None)
    }

    fn strides_for_axis(
        &self,
        v: Var,
        axis: usize,
        op: &'static str,
    ) -> Result<(usize, usize, usize, usize), TensorError> {
        match (self.shape(v), axis) {
            ([n], 0) => Ok((1, *n, *n, 1)),
            ([r, c], 1) => Ok((*r, *c, *c, 1)),
            ([r, c], 0) => Ok((*c, *r, 1, *c)),
            (shape, _) => Err(TensorError::Axis {
                op,
                axis,
                shape: shape.to_vec(),
            }),
        }
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (groups, len, bs, es) = self.strides_for_axis(a, axis, "softmax")?;
        let x = self.nodes[a.0].value.data();
        let mut out = vec![0.0; x.len()];
        kernels::softmax_strided(x, &mut out, groups, len, bs, es);
        let t = Tensor::from_vec(self.shape(a).to_vec(), out).expect("softmax shape");
        Ok(self.push(t, Op::Softmax { axis }, vec![a.0], None))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (groups, len, bs, es) = self.strides_for_axis(a, axis, "log_softmax")?;
        let x = self.nodes[a.0].value.data();
        let mut out = vec![0.0; x.len()];
        kernels::log_softmax_strided(x, &mut out, groups, len, bs, es);
        let t = Tensor::from_vec(self.shape(a).to_vec(), out).expect("log_softmax shape");
        Ok(self.push(t, Op::LogSoftmax { axis }, vec![a.0], None))
    }

    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<Var, TensorError> {
        let (rows, cols) = self.rank2(x, "layer_norm")?;
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(TensorError::Mismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let mut out = vec![0.0; rows * cols];
        let mut aux = Vec::new();
        kernels::layer_norm_rows(
            self.nodes[x.0].value.data(),
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
            eps,
            rows,
            cols,
            &mut out,
            &mut aux,
        );
        let t = Tensor::from_vec(vec![rows, cols], out).expect("layer_norm shape");
        Ok(self.push(t, Op::LayerNorm, vec![x.0, gamma.0, beta.0], Some(aux)))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f32> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| kernels::gelu(x))
            .collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), out).expect("gelu shape");
        self.push(t, Op::Gelu, vec![a.0], None)
    }

    /// Rows of `table` selected by `ids`.
    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Result<Var, TensorError> {
        let (vocab, dim) = self.rank2(table, "embed")?;
        let mut out = Vec::with_capacity(ids.len() * dim);
        let td = self.nodes[table.0].value.data();
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(TensorError::BadTokenId {
                    id: id as u32,
                    vocab,
                });
            }
            out.extend_from_slice(&td[id * dim..(id + 1) * dim]);
        }
        let t = Tensor::from_vec(vec![ids.len(), dim], out).expect("embed shape");
        Ok(self.push(
            t,
            Op::Embed {
                ids: Arc::new(ids.to_vec()),
            },
            vec![table.0],
            None,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() || axis > 1 {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                shape: Vec::new(),
            });
        }
        let (r0, c0) = self.rank2(parts[0], "concat")?;
        let (mut rows, mut cols) = (r0, c0);
        for &p in &parts[1..] {
            let (r, c) = self.rank2(p, "concat")?;
            match axis {
                0 if c == c0 => rows += r,
                1 if r == r0 => cols += c,
                _ => {
                    return Err(TensorError::Mismatch {
                        op: "concat",
                        lhs: vec![r0, c0],
                        rhs: vec![r, c],
                    })
                }
            }
        }
        let mut out = vec![0.0; rows * cols];
        if axis == 0 {
            let mut off = 0;
            for &p in parts {
                let d = self.nodes[p.0].value.data();
                out[off..off + d.len()].copy_from_slice(d);
                off += d.len();
            }
        } else {
            let mut col_off = 0;
            for &p in parts {
                let (r, c) = self.rank2(p, "concat")?;
                let d = self.nodes[p.0].value.data();
                for i in 0..r {
                    out[i * cols + col_off..i * cols + col_off + c]
                        .copy_from_slice(&d[i * c..(i + 1) * c]);
                }
                col_off += c;
            }
        }
        let t = Tensor::from_vec(vec![rows, cols], out).expect("concat shape");
        Ok(self.push(
            t,
            Op::Concat { axis },
            parts.iter().map(|v| v.0).collect(),
            None,
        ))
    }

    pub fn slice(
        &mut self,
        a: Var,
        start: [usize; 2],
        end: [usize; 2],
    ) -> Result<Var, TensorError> {
        let (rows, cols) = self.rank2(a, "slice")?;
        if start[0] > end[0] || start[1] > end[1] || end[0] > rows || end[1] > cols {
            return Err(TensorError::SliceBounds {
                start: start.to_vec(),
                end: end.to_vec(),
                shape: vec![rows, cols],
            });
        }
        let (nr, nc) = (end[0] - start[0], end[1] - start[1]);
        let d = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(nr * nc);
        for i in start[0]..end[0] {
            out.extend_from_slice(&d[i * cols + start[1]..i * cols + end[1]]);
        }
        let t = Tensor::from_vec(vec![nr, nc], out).expect("slice shape");
        Ok(self.push(t, Op::Slice { start, end }, vec![a.0], None))
    }

    pub fn reshape(&mut self, a: Var, new_shape: Vec<usize>) -> Result<Var, TensorError> {
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[a.0].value.numel() {
            return Err(TensorError::ShapeData {
                shape: new_shape,
                data_len: self.nodes[a.0].value.numel(),
            });
        }
        let t = Tensor::from_vec(new_shape, self.nodes[a.0].value.data().to_vec())
            .expect("reshape shape");
        Ok(self.push(t, Op::Reshape, vec![a.0], None))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (rows, cols) = self.rank2(a, "transpose")?;
        let d = self.nodes[a.0].value.data();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = d[i * cols + j];
            }
        }
        let t = Tensor::from_vec(vec![cols, rows], out).expect("transpose shape");
        Ok(self.push(t, Op::Transpose, vec![a.0], None))
    }

    /// Rotary rotation of each row by its position.
    pub fn rope(&mut self, a: Var, positions: &[i64], base: f32) -> Result<Var, TensorError> {
        let (_, dim) = self.rank2(a, "rope")?;
        if dim % 2 != 0 {
            return Err(TensorError::OddRotaryDim { dim });
        }
        let table = Arc::new(kernels::RopeTable::new(positions, dim, base));
        self.rope_with_table(a, table)
    }

    /// Rotary rotation with a precomputed table, shared across the many
    /// query/key rotations of one forward pass.
    pub fn rope_with_table(
        &mut self,
        a: Var,
        table: Arc<kernels::RopeTable>,
    ) -> Result<Var, TensorError> {
        let (rows, dim) = self.rank2(a, "rope")?;
        if dim % 2 != 0 {
            return Err(TensorError::OddRotaryDim { dim });
        }
        if table.positions.len() != rows || table.half * 2 != dim {
            return Err(TensorError::Mismatch {
                op: "rope",
                lhs: vec![rows, dim],
                rhs: vec![table.positions.len(), table.half * 2],
            });
        }
        let mut out = vec![0.0; rows * dim];
        table.rotate_rows(self.nodes[a.0].value.data(), false, &mut out);
        let t = Tensor::from_vec(vec![rows, dim], out).expect("rope shape");
        Ok(self.push(t, Op::Rope { table }, vec![a.0], None))
    }

    /// Fused multi-head rotary attention over packed `[p, d]` projections.
    ///
    /// Heads live in consecutive `d / n_heads` column blocks. `mask` is a
    /// constant `[p, p]` additive mask; gradients never flow into it.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Var,
        table: Arc<kernels::RopeTable>,
        n_heads: usize,
        scale: f32,
    ) -> Result<Var, TensorError> {
        let (p, d) = self.rank2(q, "attention")?;
        for other in [k, v] {
            if self.shape(other) != [p, d] {
                return Err(TensorError::Mismatch {
                    op: "attention",
                    lhs: vec![p, d],
                    rhs: self.shape(other).to_vec(),
                });
            }
        }
        if self.shape(mask) != [p, p] {
            return Err(TensorError::Mismatch {
                op: "attention",
                lhs: vec![p, p],
                rhs: self.shape(mask).to_vec(),
            });
        }
        if n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0 {
            return Err(TensorError::OddRotaryDim { dim: d });
        }
        if table.positions.len() != p || table.half * 2 != d / n_heads {
            return Err(TensorError::Mismatch {
                op: "attention",
                lhs: vec![p, d / n_heads],
                rhs: vec![table.positions.len(), table.half * 2],
            });
        }
        debug_assert!(!self.nodes[mask.0].track, "attention masks are constants");
        let mut out = vec![0.0; p * d];
        let mut aux = if self.grad_enabled {
            Some(Vec::new())
        } else {
            None
        };
        kernels::attention_forward(
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
            self.nodes[mask.0].value.data(),
            &table,
            n_heads,
            scale,
            &mut out,
            aux.as_mut(),
        );
        let t = Tensor::from_vec(vec![p, d], out).expect("attention shape");
        Ok(self.push(
            t,
            Op::Attention {
                table,
                n_heads,
                scale,
            },
            vec![q.0, k.0, v.0, mask.0],
            aux,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f32 = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum, vec![a.0], None)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel().max(1);
        let s: f32 = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s / n as f32), Op::Mean, vec![a.0], None)
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Populates gradients for every
    /// tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if !self.grad_enabled {
            return Err(TensorError::GradDisabled);
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        if !self.nodes[loss.0].track {
            return Ok(()); // nothing trainable feeds the loss
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].track || self.grads[idx].is_none() {
                continue;
            }
            let g = if matches!(self.nodes[idx].op, Op::Leaf) {
                continue; // leaves keep their accumulated gradient
            } else {
                self.grads[idx].take().expect("checked above")
            };
            self.propagate(idx, &g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, idx: usize) -> &mut Vec<f32> {
        let n = self.nodes[idx].value.numel();
        self.grads[idx].get_or_insert_with(|| vec![0.0; n])
    }

    fn tracked(&self, idx: usize) -> bool {
        self.nodes[idx].track
    }

    fn propagate(&mut self, idx: usize, g: &[f32]) {
        // Clone the small bits we need up front to sidestep borrow conflicts.
        let inputs = self.nodes[idx].inputs.clone();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = {
                    let s = self.nodes[a].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b].value.shape()[1];
                if self.tracked(a) {
                    let bval = Arc::clone(&self.nodes[b].value);
                    kernels::matmul_nt(g, bval.data(), m, n, k, self.grad_buf(a));
                }
                if self.tracked(b) {
                    let aval = Arc::clone(&self.nodes[a].value);
                    kernels::matmul_tn(aval.data(), g, m, k, n, self.grad_buf(b));
                }
            }
            Op::Add => {
                for &input in &inputs {
                    if self.tracked(input) {
                        for (o, &v) in self.grad_buf(input).iter_mut().zip(g) {
                            *o += v;
                        }
                    }
                }
            }
            Op::AddRow => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.tracked(a) {
                    for (o, &v) in self.grad_buf(a).iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if self.tracked(b) {
                    let cols = self.nodes[b].value.numel();
                    let buf = self.grad_buf(b);
                    for row in g.chunks(cols) {
                        for (o, &v) in buf.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.tracked(a) {
                    let bval = Arc::clone(&self.nodes[b].value);
                    for ((o, &gv), &bv) in self.grad_buf(a).iter_mut().zip(g).zip(bval.data()) {
                        *o += gv * bv;
                    }
                }
                if self.tracked(b) {
                    let aval = Arc::clone(&self.nodes[a].value);
                    for ((o, &gv), &av) in self.grad_buf(b).iter_mut().zip(g).zip(aval.data()) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale(c) => {
                let c = *c;
                let a = inputs[0];
                if self.tracked(a) {
                    for (o, &v) in self.grad_buf(a).iter_mut().zip(g) {
                        *o += c * v;
                    }
                }
            }
            Op::Softmax { axis } => {
                let axis = *axis;
                let a = inputs[0];
                if self.tracked(a) {
                    let y = Arc::clone(&self.nodes[idx].value);
                    let (groups, len, bs, es) = self
                        .strides_for_axis(Var(idx), axis, "softmax")
                        .expect("validated in forward");
                    let buf = self.grad_buf(a);
                    let yd = y.data();
                    for grp in 0..groups {
                        let base = grp * bs;
                        let mut s = 0.0f32;
                        for e in 0..len {
                            let i = base + e * es;
                            s += g[i] * yd[i];
                        }
                        for e in 0..len {
                            let i = base + e * es;
                            buf[i] += yd[i] * (g[i] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax { axis } => {
                let axis = *axis;
                let a = inputs[0];
                if self.tracked(a) {
                    let y = Arc::clone(&self.nodes[idx].value);
                    let (groups, len, bs, es) = self
                        .strides_for_axis(Var(idx), axis, "log_softmax")
                        .expect("validated in forward");
                    let buf = self.grad_buf(a);
                    let yd = y.data();
                    for grp in 0..groups {
                        let base = grp * bs;
                        let mut gsum = 0.0f32;
                        for e in 0..len {
                            gsum += g[base + e * es];
                        }
                        for e in 0..len {
                            let i = base + e * es;
                            buf[i] += g[i] - crate::mathf::expf(yd[i]) * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm => {
                let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
                let xv = Arc::clone(&self.nodes[x].value);
                let gv = Arc::clone(&self.nodes[gamma].value);
                let aux = self.nodes[idx].aux.clone().expect("layer_norm aux");
                let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
                let xd = xv.data();
                let gd = gv.data();
                if self.tracked(beta) {
                    let buf = self.grad_buf(beta);
                    for r in 0..rows {
                        for c in 0..cols {
                            buf[c] += g[r * cols + c];
                        }
                    }
                }
                if self.tracked(gamma) {
                    let buf = self.grad_buf(gamma);
                    for r in 0..rows {
                        let (mean, rstd) = (aux[2 * r], aux[2 * r + 1]);
                        for c in 0..cols {
                            let xhat = (xd[r * cols + c] - mean) * rstd;
                            buf[c] += g[r * cols + c] * xhat;
                        }
                    }
                }
                if self.tracked(x) {
                    let buf = self.grad_buf(x);
                    for r in 0..rows {
                        let (mean, rstd) = (aux[2 * r], aux[2 * r + 1]);
                        let mut sum_dxhat = 0.0f32;
                        let mut sum_dxhat_xhat = 0.0f32;
                        for c in 0..cols {
                            let i = r * cols + c;
                            let xhat = (xd[i] - mean) * rstd;
                            let dxhat = g[i] * gd[c];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let inv_n = 1.0 / cols as f32;
                        for c in 0..cols {
                            let i = r * cols + c;
                            let xhat = (xd[i] - mean) * rstd;
                            let dxhat = g[i] * gd[c];
                            buf[i] += rstd
                                * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                        }
                    }
                }
            }
            Op::Gelu => {
                let a = inputs[0];
                if self.tracked(a) {
                    let xv = Arc::clone(&self.nodes[a].value);
                    for ((o, &gv), &x) in self.grad_buf(a).iter_mut().zip(g).zip(xv.data()) {
                        *o += gv * kernels::gelu_grad(x);
                    }
                }
            }
            Op::Embed { ids } => {
                let ids = Arc::clone(ids);
                let table = inputs[0];
                if self.tracked(table) {
                    let dim = self.nodes[table].value.shape()[1];
                    let buf = self.grad_buf(table);
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut buf[id as usize * dim..(id as usize + 1) * dim];
                        for (o, &v) in dst.iter_mut().zip(&g[row * dim..(row + 1) * dim]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Concat { axis } => {
                let axis = *axis;
                let total_cols = self.nodes[idx].value.shape()[1];
                let mut row_off = 0usize;
                let mut col_off = 0usize;
                for &p in &inputs {
                    let (r, c) = (self.nodes[p].value.shape()[0], self.nodes[p].value.shape()[1]);
                    if self.tracked(p) {
                        let buf = self.grad_buf(p);
                        if axis == 0 {
                            let start = row_off * total_cols;
                            for (o, &v) in buf.iter_mut().zip(&g[start..start + r * c]) {
                                *o += v;
                            }
                        } else {
                            for i in 0..r {
                                let src = &g[i * total_cols + col_off..i * total_cols + col_off + c];
                                for (o, &v) in buf[i * c..(i + 1) * c].iter_mut().zip(src) {
                                    *o += v;
                                }
                            }
                        }
                    }
                    row_off += r;
                    col_off += c;
                }
            }
            Op::Slice { start, end } => {
                let (start, end) = (*start, *end);
                let a = inputs[0];
                if self.tracked(a) {
                    let cols = self.nodes[a].value.shape()[1];
                    let nc = end[1] - start[1];
                    let buf = self.grad_buf(a);
                    for (gi, i) in (start[0]..end[0]).enumerate() {
                        let dst = &mut buf[i * cols + start[1]..i * cols + end[1]];
                        for (o, &v) in dst.iter_mut().zip(&g[gi * nc..(gi + 1) * nc]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Reshape => {
                let a = inputs[0];
                if self.tracked(a) {
                    for (o, &v) in self.grad_buf(a).iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::Transpose => {
                let a = inputs[0];
                if self.tracked(a) {
                    let (rows, cols) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                    let buf = self.grad_buf(a);
                    // g has shape [cols, rows]
                    for i in 0..cols {
                        for j in 0..rows {
                            buf[j * cols + i] += g[i * rows + j];
                        }
                    }
                }
            }
            Op::Rope { table } => {
                let table = Arc::clone(table);
                let a = inputs[0];
                if self.tracked(a) {
                    let mut tmp = vec![0.0; g.len()];
                    table.rotate_rows(g, true, &mut tmp);
                    for (o, v) in self.grad_buf(a).iter_mut().zip(tmp) {
                        *o += v;
                    }
                }
            }
            Op::Attention {
                table,
                n_heads,
                scale,
            } => {
                let table = Arc::clone(table);
                let (n_heads, scale) = (*n_heads, *scale);
                let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
                let aux = self.nodes[idx].aux.clone().expect("attention aux");
                let vval = Arc::clone(&self.nodes[v].value);
                let n = vval.numel();
                let mut dq = vec![0.0f32; n];
                let mut dk = vec![0.0f32; n];
                let mut dv = vec![0.0f32; n];
                kernels::attention_backward(
                    g,
                    vval.data(),
                    &table,
                    n_heads,
                    scale,
                    &aux,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                for (input, grad) in [(q, dq), (k, dk), (v, dv)] {
                    if self.tracked(input) {
                        for (o, &x) in self.grad_buf(input).iter_mut().zip(&grad) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Sum => {
                let a = inputs[0];
                if self.tracked(a) {
                    let gv = g[0];
                    for o in self.grad_buf(a).iter_mut() {
                        *o += gv;
                    }
                }
            }
            Op::Mean => {
                let a = inputs[0];
                if self.tracked(a) {
                    let n = self.nodes[a].value.numel().max(1);
                    let gv = g[0] / n as f32;
                    for o in self.grad_buf(a).iter_mut() {
                        *o += gv;
                    }
                }
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Arc::new(tensor(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn constant_branch_gets_no_grad() {
        let mut g = Graph::new();
        let x = g.param(Arc::new(tensor(vec![3], vec![1.0, 2.0, 3.0])));
        let frozen = g.constant(tensor(vec![3], vec![4.0, 5.0, 6.0]));
        let prod = g.mul(x, frozen).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 5.0, 6.0]);
        assert!(g.grad(frozen).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Arc::new(tensor(vec![2], vec![1.0, 2.0])));
        let y = g.scale(x, 2.0);
        let err = g.backward(y).unwrap_err();
        assert!(matches!(err, TensorError::NotScalar { .. }));
    }

    #[test]
    fn backward_disabled_in_inference_graphs() {
        let mut g = Graph::inference();
        let x = g.param(Arc::new(tensor(vec![1], vec![2.0])));
        let y = g.sum(x);
        assert!(matches!(g.backward(y), Err(TensorError::GradDisabled)));
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(tensor(vec![2, 3], vec![0.0; 6]));
        let b = g.constant(tensor(vec![4, 2], vec![0.0; 8]));
        match g.matmul(a, b) {
            Err(TensorError::Mismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_known_gradient() {
        // loss = sum(A @ B); dA = rowsum(B) broadcast, dB = colsum(A).
        let mut g = Graph::new();
        let a = g.param(Arc::new(tensor(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])));
        let b = g.param(Arc::new(tensor(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0])));
        let y = g.matmul(a, b).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g.grad(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn inference_graph_values_match_grad_graph() {
        let build = |g: &mut Graph| {
            let x = g.param(Arc::new(tensor(vec![2, 4], (0..8).map(|i| i as f32 * 0.21 - 0.7).collect())));
            let w = g.param(Arc::new(tensor(vec![4, 3], (0..12).map(|i| i as f32 * 0.1 - 0.5).collect())));
            let h = g.matmul(x, w).unwrap();
            let a = g.gelu(h);
            g.softmax(a, 1).unwrap()
        };
        let mut g1 = Graph::new();
        let y1 = build(&mut g1);
        let mut g2 = Graph::inference();
        let y2 = build(&mut g2);
        assert_eq!(g1.value(y1).data(), g2.value(y2).data());
    }
}
