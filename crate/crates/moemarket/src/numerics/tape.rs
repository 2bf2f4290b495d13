use crate::numerics::tensor::{log_sum_exp, matmul_acc, matmul_into, Tensor};
use crate::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

const RMS_EPS: f64 = 1e-8;

enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    AddRow { a: usize, bias: usize },
    Scale { a: usize, c: f64 },
    Mul { a: usize, b: usize },
    Relu { a: usize },
    RmsNorm { a: usize },
    SoftmaxRows { a: usize },
    CausalSoftmaxRows { a: usize },
    GatherRows { a: usize, rows: Vec<usize> },
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    ScatterAddScaled { src: usize, gates: usize, rows: Vec<usize> },
    TopKSoftmax { logits: usize, picks: Vec<Vec<usize>> },
    GatherEntries { a: usize, coords: Vec<(usize, usize)> },
    MeanCrossEntropy { logits: usize, targets: Vec<usize>, probs: Tensor, losses: Vec<f64> },
}

/// Wengert-list gradient tape over matrix-valued operations.
///
/// Node ids are created in topological order by construction, so the backward
/// pass is a single reverse sweep over the node list. Gradients of tensors
/// never touched by the sweep stay exactly zero.
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    requires: Vec<bool>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { ops: Vec::new(), values: Vec::new(), requires: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, requires: bool, op: Op) -> TensorId {
        let id = self.values.len();
        self.values.push(value);
        self.requires.push(requires);
        self.grads.push(None);
        self.ops.push(op);
        TensorId(id)
    }

    /// Differentiable leaf (a model parameter).
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, true, Op::Leaf)
    }

    /// Non-differentiable leaf (inputs, frozen weights during eval).
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.values[id.0]
    }

    /// Gradient of `id` after `backward`; `None` if the node never received one.
    pub fn grad(&self, id: TensorId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Per-token losses cached by a `mean_cross_entropy` node.
    pub fn per_token_losses(&self, id: TensorId) -> &[f64] {
        match &self.ops[id.0] {
            Op::MeanCrossEntropy { losses, .. } => losses,
            _ => panic!("per_token_losses on a non-cross-entropy node"),
        }
    }

    fn requires_any(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.requires[i])
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ar, ac) = self.values[a.0].shape();
        let (br, bc) = self.values[b.0].shape();
        assert_eq!(ac, br, "configuration error: matmul {}x{} times {}x{}", ar, ac, br, bc);
        let mut out = Tensor::zeros(ar, bc);
        matmul_into(&self.values[a.0], &self.values[b.0], &mut out);
        let req = self.requires_any(&[a.0, b.0]);
        self.push(out, req, Op::MatMul { a: a.0, b: b.0 })
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let out = self.values[a.0].transpose();
        let req = self.requires[a.0];
        self.push(out, req, Op::Transpose { a: a.0 })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let va = &self.values[a.0];
        let vb = &self.values[b.0];
        assert_eq!(va.shape(), vb.shape(), "configuration error: add shape mismatch");
        let mut out = va.clone();
        for (o, x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o += x;
        }
        let req = self.requires_any(&[a.0, b.0]);
        self.push(out, req, Op::Add { a: a.0, b: b.0 })
    }

    /// Broadcast a `1xn` bias over every row of an `mxn` matrix.
    pub fn add_row(&mut self, a: TensorId, bias: TensorId) -> TensorId {
        let va = &self.values[a.0];
        let vb = &self.values[bias.0];
        assert_eq!(vb.rows(), 1, "configuration error: bias must be a row vector");
        assert_eq!(va.cols(), vb.cols(), "configuration error: bias width mismatch");
        let mut out = va.clone();
        let n = vb.cols();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for c in 0..n {
                row[c] += vb.data()[c];
            }
        }
        let req = self.requires_any(&[a.0, bias.0]);
        self.push(out, req, Op::AddRow { a: a.0, bias: bias.0 })
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let mut out = self.values[a.0].clone();
        for v in out.data_mut() {
            *v *= c;
        }
        let req = self.requires[a.0];
        self.push(out, req, Op::Scale { a: a.0, c })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let va = &self.values[a.0];
        let vb = &self.values[b.0];
        assert_eq!(va.shape(), vb.shape(), "configuration error: mul shape mismatch");
        let mut out = va.clone();
        for (o, x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o *= x;
        }
        let req = self.requires_any(&[a.0, b.0]);
        self.push(out, req, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let mut out = self.values[a.0].clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let req = self.requires[a.0];
        self.push(out, req, Op::Relu { a: a.0 })
    }

    /// Row-wise RMS normalization (parameter-free): `y = x / sqrt(mean(x^2) + eps)`.
    pub fn rms_norm(&mut self, a: TensorId) -> TensorId {
        let va = &self.values[a.0];
        let (rows, cols) = va.shape();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let x = va.row(r);
            let ms = x.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            for (o, &v) in out.row_mut(r).iter_mut().zip(x) {
                *o = v * inv;
            }
        }
        let req = self.requires[a.0];
        self.push(out, req, Op::RmsNorm { a: a.0 })
    }

    pub fn softmax_rows(&mut self, a: TensorId) -> TensorId {
        let va = &self.values[a.0];
        let (rows, cols) = va.shape();
        assert!(cols >= 1, "configuration error: softmax on empty rows");
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            softmax_row_into(va.row(r), out.row_mut(r));
        }
        let req = self.requires[a.0];
        self.push(out, req, Op::SoftmaxRows { a: a.0 })
    }

    /// Softmax over columns `0..=r` of row `r`; the rest of the row is zero.
    pub fn causal_softmax_rows(&mut self, a: TensorId) -> TensorId {
        let va = &self.values[a.0];
        let (rows, cols) = va.shape();
        assert_eq!(rows, cols, "configuration error: causal softmax needs a square matrix");
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            softmax_row_into(&va.row(r)[..=r], &mut out.row_mut(r)[..=r]);
        }
        let req = self.requires[a.0];
        self.push(out, req, Op::CausalSoftmaxRows { a: a.0 })
    }

    /// Select rows by index (embedding lookup and expert dispatch).
    pub fn gather_rows(&mut self, a: TensorId, rows: Vec<usize>) -> TensorId {
        let va = &self.values[a.0];
        let cols = va.cols();
        let mut out = Tensor::zeros(rows.len(), cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(va.row(r));
        }
        let req = self.requires[a.0];
        self.push(out, req, Op::GatherRows { a: a.0, rows })
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let va = &self.values[a.0];
        let cols = va.cols();
        let mut out = Tensor::zeros(len, cols);
        for i in 0..len {
            out.row_mut(i).copy_from_slice(va.row(start + i));
        }
        let req = self.requires[a.0];
        self.push(out, req, Op::SliceRows { a: a.0, start })
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let va = &self.values[a.0];
        let rows = va.rows();
        let mut out = Tensor::zeros(rows, len);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        let req = self.requires[a.0];
        self.push(out, req, Op::SliceCols { a: a.0, start })
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "configuration error: concat of nothing");
        let cols = self.values[parts[0].0].cols();
        let rows: usize = parts.iter().map(|p| self.values[p.0].rows()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            let vp = &self.values[p.0];
            assert_eq!(vp.cols(), cols, "configuration error: concat_rows width mismatch");
            for r in 0..vp.rows() {
                out.row_mut(at + r).copy_from_slice(vp.row(r));
            }
            at += vp.rows();
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let req = self.requires_any(&ids);
        self.push(out, req, Op::ConcatRows { parts: ids })
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "configuration error: concat of nothing");
        let rows = self.values[parts[0].0].rows();
        let cols: usize = parts.iter().map(|p| self.values[p.0].cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            let vp = &self.values[p.0];
            assert_eq!(vp.rows(), rows, "configuration error: concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[at..at + vp.cols()].copy_from_slice(vp.row(r));
            }
            at += vp.cols();
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let req = self.requires_any(&ids);
        self.push(out, req, Op::ConcatCols { parts: ids })
    }

    /// `out[rows[i]] += gates[i] * src[i]` into a fresh `out_rows x d` matrix.
    pub fn scatter_add_scaled(
        &mut self,
        src: TensorId,
        gates: TensorId,
        rows: Vec<usize>,
        out_rows: usize,
    ) -> TensorId {
        let vs = &self.values[src.0];
        let vg = &self.values[gates.0];
        assert_eq!(vg.cols(), 1, "configuration error: gates must be a column vector");
        assert_eq!(vg.rows(), rows.len(), "configuration error: gates/rows length mismatch");
        assert_eq!(vs.rows(), rows.len(), "configuration error: src/rows length mismatch");
        let mut out = Tensor::zeros(out_rows, vs.cols());
        for (i, &r) in rows.iter().enumerate() {
            let g = vg.data()[i];
            let src_row = vs.row(i);
            for (o, &x) in out.row_mut(r).iter_mut().zip(src_row) {
                *o += g * x;
            }
        }
        let req = self.requires_any(&[src.0, gates.0]);
        self.push(out, req, Op::ScatterAddScaled { src: src.0, gates: gates.0, rows })
    }

    /// Renormalized top-k gates: per row, softmax over the k selected logits.
    ///
    /// Only the selected logit entries participate, so gradients to every
    /// unselected column are exactly zero by construction.
    pub fn topk_softmax(&mut self, logits: TensorId, picks: Vec<Vec<usize>>) -> TensorId {
        let vl = &self.values[logits.0];
        assert_eq!(vl.rows(), picks.len(), "configuration error: picks per row required");
        let k = picks.first().map_or(0, Vec::len);
        assert!(k >= 1, "configuration error: empty pick list");
        let mut out = Tensor::zeros(picks.len(), k);
        let mut sel = vec![0.0; k];
        for (r, pick) in picks.iter().enumerate() {
            assert_eq!(pick.len(), k, "configuration error: ragged pick lists");
            let row = vl.row(r);
            for (s, &c) in sel.iter_mut().zip(pick) {
                *s = row[c];
            }
            softmax_row_into(&sel, out.row_mut(r));
        }
        let req = self.requires[logits.0];
        self.push(out, req, Op::TopKSoftmax { logits: logits.0, picks })
    }

    /// Pick scalar entries `(row, col)` into an `nx1` column.
    pub fn gather_entries(&mut self, a: TensorId, coords: Vec<(usize, usize)>) -> TensorId {
        let va = &self.values[a.0];
        let mut out = Tensor::zeros(coords.len(), 1);
        for (i, &(r, c)) in coords.iter().enumerate() {
            out.data_mut()[i] = va.get(r, c);
        }
        let req = self.requires[a.0];
        self.push(out, req, Op::GatherEntries { a: a.0, coords })
    }

    /// Mean softmax cross-entropy over rows; caches per-row losses.
    pub fn mean_cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> TensorId {
        let vl = &self.values[logits.0];
        let (rows, cols) = vl.shape();
        assert_eq!(rows, targets.len(), "configuration error: one target per row");
        let mut probs = Tensor::zeros(rows, cols);
        let mut losses = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vl.row(r);
            assert!(targets[r] < cols, "configuration error: target out of vocab");
            let lse = log_sum_exp(row);
            losses.push(lse - row[targets[r]]);
            for (p, &z) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
        }
        let mean = losses.iter().sum::<f64>() / rows as f64;
        let req = self.requires[logits.0];
        let op = Op::MeanCrossEntropy { logits: logits.0, targets: targets.to_vec(), probs, losses };
        self.push(Tensor::scalar(mean), req, op)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep seeding `d root / d root = 1`.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if root.0 >= self.values.len() {
            return Err(Error::Usage("backward root is not on this tape".into()));
        }
        if self.values[root.0].len() != 1 {
            return Err(Error::Usage("backward root must be a scalar".into()));
        }
        self.grads[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            if self.grads[id].is_none() || !self.requires[id] {
                continue;
            }
            let g = self.grads[id].take().expect("checked above");
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    /// Borrow or lazily create the gradient buffer for node `id`.
    fn grad_buf(&mut self, id: usize) -> &mut Tensor {
        let shape = self.values[id].shape();
        self.grads[id].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
    }

    fn propagate(&mut self, id: usize, g: &Tensor) {
        match &self.ops[id] {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                if self.requires[a] {
                    // da += g @ b^T
                    let bt = self.values[b].clone();
                    let buf = self.grad_buf(a);
                    matmul_acc(g.view(), bt.view().reversed_axes(), buf);
                }
                if self.requires[b] {
                    // db += a^T @ g
                    let at = self.values[a].clone();
                    let buf = self.grad_buf(b);
                    matmul_acc(at.view().reversed_axes(), g.view(), buf);
                }
            }
            Op::Transpose { a } => {
                let a = *a;
                if self.requires[a] {
                    let gt = g.transpose();
                    let buf = self.grad_buf(a);
                    for (o, &x) in buf.data_mut().iter_mut().zip(gt.data()) {
                        *o += x;
                    }
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                for id in [a, b] {
                    if self.requires[id] {
                        let buf = self.grad_buf(id);
                        for (o, &x) in buf.data_mut().iter_mut().zip(g.data()) {
                            *o += x;
                        }
                    }
                }
            }
            Op::AddRow { a, bias } => {
                let (a, bias) = (*a, *bias);
                if self.requires[a] {
                    let buf = self.grad_buf(a);
                    for (o, &x) in buf.data_mut().iter_mut().zip(g.data()) {
                        *o += x;
                    }
                }
                if self.requires[bias] {
                    let (rows, cols) = g.shape();
                    let buf = self.grad_buf(bias);
                    for r in 0..rows {
                        for c in 0..cols {
                            buf.data_mut()[c] += g.get(r, c);
                        }
                    }
                }
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                if self.requires[a] {
                    let buf = self.grad_buf(a);
                    for (o, &x) in buf.data_mut().iter_mut().zip(g.data()) {
                        *o += c * x;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.requires[a] {
                    let vb = self.values[b].clone();
                    let buf = self.grad_buf(a);
                    for ((o, &x), &y) in buf.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *o += x * y;
                    }
                }
                if self.requires[b] {
                    let va = self.values[a].clone();
                    let buf = self.grad_buf(b);
                    for ((o, &x), &y) in buf.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += x * y;
                    }
                }
            }
            Op::Relu { a } => {
                let a = *a;
                if self.requires[a] {
                    let va = self.values[a].clone();
                    let buf = self.grad_buf(a);
                    for ((o, &x), &v) in buf.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        if v > 0.0 {
                            *o += x;
                        }
                    }
                }
            }
            Op::RmsNorm { a } => {
                let a = *a;
                if self.requires[a] {
                    let va = self.values[a].clone();
                    let (rows, cols) = va.shape();
                    let n = cols as f64;
                    let buf = self.grad_buf(a);
                    for r in 0..rows {
                        let x = va.row(r);
                        let ms = x.iter().map(|v| v * v).sum::<f64>() / n;
                        let inv = 1.0 / (ms + RMS_EPS).sqrt();
                        let gx: f64 = g.row(r).iter().zip(x).map(|(gi, xi)| gi * xi).sum();
                        let coef = inv.powi(3) * gx / n;
                        for ((o, &gi), &xi) in buf.row_mut(r).iter_mut().zip(g.row(r)).zip(x) {
                            *o += inv * gi - coef * xi;
                        }
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                let a = *a;
                if self.requires[a] {
                    let p = self.values[id].clone();
                    let buf = self.grad_buf(a);
                    for r in 0..p.rows() {
                        softmax_backward_row(p.row(r), g.row(r), buf.row_mut(r));
                    }
                }
            }
            Op::CausalSoftmaxRows { a } => {
                let a = *a;
                if self.requires[a] {
                    let p = self.values[id].clone();
                    let buf = self.grad_buf(a);
                    for r in 0..p.rows() {
                        softmax_backward_row(
                            &p.row(r)[..=r],
                            &g.row(r)[..=r],
                            &mut buf.row_mut(r)[..=r],
                        );
                    }
                }
            }
            Op::GatherRows { a, rows } => {
                let a = *a;
                if self.requires[a] {
                    let rows = rows.clone();
                    let buf = self.grad_buf(a);
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, &x) in buf.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::SliceRows { a, start } => {
                let (a, start) = (*a, *start);
                if self.requires[a] {
                    let buf = self.grad_buf(a);
                    for i in 0..g.rows() {
                        for (o, &x) in buf.row_mut(start + i).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::SliceCols { a, start } => {
                let (a, start) = (*a, *start);
                if self.requires[a] {
                    let len = g.cols();
                    let buf = self.grad_buf(a);
                    for r in 0..g.rows() {
                        let dst = &mut buf.row_mut(r)[start..start + len];
                        for (o, &x) in dst.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut at = 0;
                for p in parts {
                    let rows = self.values[p].rows();
                    if self.requires[p] {
                        let buf = self.grad_buf(p);
                        for r in 0..rows {
                            for (o, &x) in buf.row_mut(r).iter_mut().zip(g.row(at + r)) {
                                *o += x;
                            }
                        }
                    }
                    at += rows;
                }
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let mut at = 0;
                for p in parts {
                    let cols = self.values[p].cols();
                    if self.requires[p] {
                        let buf = self.grad_buf(p);
                        for r in 0..buf.rows() {
                            let src = &g.row(r)[at..at + cols];
                            for (o, &x) in buf.row_mut(r).iter_mut().zip(src) {
                                *o += x;
                            }
                        }
                    }
                    at += cols;
                }
            }
            Op::ScatterAddScaled { src, gates, rows } => {
                let (src, gates) = (*src, *gates);
                let rows = rows.clone();
                if self.requires[src] {
                    let vg = self.values[gates].clone();
                    let buf = self.grad_buf(src);
                    for (i, &r) in rows.iter().enumerate() {
                        let gv = vg.data()[i];
                        for (o, &x) in buf.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += gv * x;
                        }
                    }
                }
                if self.requires[gates] {
                    let vs = self.values[src].clone();
                    let buf = self.grad_buf(gates);
                    for (i, &r) in rows.iter().enumerate() {
                        let dot: f64 = g.row(r).iter().zip(vs.row(i)).map(|(a, b)| a * b).sum();
                        buf.data_mut()[i] += dot;
                    }
                }
            }
            Op::TopKSoftmax { logits, picks } => {
                let logits = *logits;
                if self.requires[logits] {
                    let picks = picks.clone();
                    let p = self.values[id].clone();
                    let buf = self.grad_buf(logits);
                    for (r, pick) in picks.iter().enumerate() {
                        let pr = p.row(r);
                        let gr = g.row(r);
                        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, &c) in pick.iter().enumerate() {
                            buf.row_mut(r)[c] += pr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::GatherEntries { a, coords } => {
                let a = *a;
                if self.requires[a] {
                    let coords = coords.clone();
                    let buf = self.grad_buf(a);
                    for (i, (r, c)) in coords.into_iter().enumerate() {
                        let cols = buf.cols();
                        buf.data_mut()[r * cols + c] += g.data()[i];
                    }
                }
            }
            Op::MeanCrossEntropy { logits, targets, probs, .. } => {
                let logits = *logits;
                if self.requires[logits] {
                    // d/dz = (p - onehot(target)) * g / rows
                    let scale = g.item() / targets.len() as f64;
                    let targets = targets.clone();
                    let probs = probs.clone();
                    let buf = self.grad_buf(logits);
                    for r in 0..probs.rows() {
                        for (o, &p) in buf.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *o += p * scale;
                        }
                        buf.row_mut(r)[targets[r]] -= scale;
                    }
                }
            }
        }
    }
}

fn softmax_row_into(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

/// `dz = p * (g - <g, p>)` over one (possibly masked) row.
fn softmax_backward_row(p: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &pi), &gi) in out.iter_mut().zip(p).zip(g) {
        *o += pi * (gi - dot);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_square() {
        // f(x) = x^2 at x = 3 -> df/dx = 6
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_constant_leaves_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(c, c);
        tape.backward(y).unwrap();
        assert!(tape.grad(x).is_none());
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn backward_root_must_be_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn backward_root_must_be_on_tape() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = tape.mul(x, x);
        tape.backward(y).unwrap();
        let mut other = Tape::new();
        let bogus = TensorId(17);
        assert!(matches!(other.backward(bogus), Err(crate::Error::Usage(_))));
    }

    /// Central finite differences on a leaf, rebuilding the graph per probe.
    fn finite_diff<F>(base: &Tensor, build: F) -> Tensor
    where
        F: Fn(&Tensor) -> f64,
    {
        let h = 1e-5;
        let mut out = Tensor::zeros(base.rows(), base.cols());
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[i] += h;
            let mut minus = base.clone();
            minus.data_mut()[i] -= h;
            out.data_mut()[i] = (build(&plus) - build(&minus)) / (2.0 * h);
        }
        out
    }

    fn assert_close(got: &Tensor, want: &Tensor) {
        for (a, b) in got.data().iter().zip(want.data()) {
            let tol = 1e-8f64.max(1e-3 * a.abs().max(b.abs()));
            assert!((a - b).abs() <= tol, "gradient mismatch: {} vs {}", a, b);
        }
    }

    #[test]
    fn backward_matmul_cross_entropy_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a0 = Tensor::randn(3, 3, 1.0, &mut rng);
        let b0 = Tensor::randn(3, 3, 1.0, &mut rng);
        let targets: Vec<usize> = (0..3).map(|_| rng.gen_range(0..3)).collect();

        let run = |a: &Tensor, b: &Tensor| -> (f64, Option<Tensor>, Option<Tensor>) {
            let mut tape = Tape::new();
            let ia = tape.leaf(a.clone());
            let ib = tape.leaf(b.clone());
            let prod = tape.matmul(ia, ib);
            let act = tape.relu(prod);
            let loss = tape.mean_cross_entropy(act, &targets);
            let v = tape.value(loss).item();
            tape.backward(loss).unwrap();
            (v, tape.grad(ia).cloned(), tape.grad(ib).cloned())
        };

        let (_, ga, gb) = run(&a0, &b0);
        let fa = finite_diff(&a0, |a| run(a, &b0).0);
        let fb = finite_diff(&b0, |b| run(&a0, b).0);
        assert_close(&ga.unwrap(), &fa);
        assert_close(&gb.unwrap(), &fb);
    }

    #[test]
    fn replay_is_bit_identical() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::randn(4, 4, 0.5, &mut rng));
            let w = tape.leaf(Tensor::randn(4, 4, 0.5, &mut rng));
            let h = tape.matmul(x, w);
            let n = tape.rms_norm(h);
            let s = tape.causal_softmax_rows(n);
            let loss = tape.mean_cross_entropy(s, &[0, 1, 2, 3]);
            tape.backward(loss).unwrap();
            (tape.value(loss).item(), tape.grad(w).cloned().unwrap())
        };
        let (l1, g1) = build();
        let (l2, g2) = build();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }

    #[test]
    fn topk_softmax_gates_sum_to_one_and_ignore_unselected() {
        let mut tape = Tape::new();
        let logits = tape
            .leaf(Tensor::from_vec(2, 4, vec![1.0, 2.0, 3.0, 4.0, 0.5, 0.4, 0.3, 0.2]).unwrap());
        let picks = vec![vec![3, 2], vec![0, 1]];
        let gates = tape.topk_softmax(logits, picks);
        for r in 0..2 {
            let row = tape.value(gates).row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // reduce the first gate of each row to a scalar and backpropagate
        let col = tape.gather_entries(gates, vec![(0, 0), (1, 0)]);
        let ones_row = tape.constant(Tensor::filled(1, 2, 1.0));
        let total = tape.matmul(ones_row, col);
        tape.backward(total).unwrap();
        let dl = tape.grad(logits).unwrap();
        // row 0 selected columns {3, 2}: gradient lands only there
        assert_eq!(dl.get(0, 0), 0.0);
        assert_eq!(dl.get(0, 1), 0.0);
        assert!(dl.get(0, 2) != 0.0 && dl.get(0, 3) != 0.0);
        // row 1 selected columns {0, 1}
        assert_eq!(dl.get(1, 2), 0.0);
        assert_eq!(dl.get(1, 3), 0.0);
    }

    #[test]
    fn scatter_add_scaled_routes_gradients() {
        let mut tape = Tape::new();
        let src = tape.leaf(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let gates = tape.leaf(Tensor::from_vec(2, 1, vec![0.25, 0.75]).unwrap());
        let out = tape.scatter_add_scaled(src, gates, vec![2, 0], 3);
        let v = tape.value(out);
        assert_eq!(v.row(2), &[0.25, 0.5]);
        assert_eq!(v.row(0), &[2.25, 3.0]);
        assert_eq!(v.row(1), &[0.0, 0.0]);

        let flat = tape.constant(Tensor::filled(1, 3, 1.0));
        let colsum = tape.matmul(flat, out); // 1x2
        let onecol = tape.constant(Tensor::filled(2, 1, 1.0));
        let total = tape.matmul(colsum, onecol);
        tape.backward(total).unwrap();
        // d total / d src[i] = gates[i]
        let ds = tape.grad(src).unwrap();
        assert_eq!(ds.row(0), &[0.25, 0.25]);
        assert_eq!(ds.row(1), &[0.75, 0.75]);
        // d total / d gates[i] = sum(src[i])
        let dg = tape.grad(gates).unwrap();
        assert_eq!(dg.data(), &[3.0, 7.0]);
    }
}
