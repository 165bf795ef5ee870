use super::{lit, matmul_accum, matmul_at_accum, matmul_bt_accum, Element, Tensor, TensorError};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op<E> {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    AddRowBroadcast { a: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: E },
    Gelu { a: NodeId },
    SoftmaxRows { a: NodeId, mask: Option<Vec<bool>> },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: E },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize, len: usize },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    GatherRows { a: NodeId, indices: Vec<usize> },
    MeanRows { a: NodeId },
    SumAll { a: NodeId },
    CrossEntropy { logits: NodeId, target: usize },
    SoftCrossEntropy { logits: NodeId, targets: Vec<E>, inv_temp: E },
    CoxLoss { risks: NodeId, times: Vec<f64>, events: Vec<bool> },
}

struct Node<E> {
    value: Tensor<E>,
    grad: Option<Vec<E>>,
    requires_grad: bool,
    op: Op<E>,
}

/// Reverse-mode tape. Nodes are appended in topological order by
/// construction; `backward` walks them in reverse.
pub struct Graph<E> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, requires_grad: bool, op: Op<E>) -> NodeId {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Register a tensor as a graph input. Gradients are tracked (and
    /// accumulated across `backward` calls) iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[E]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn has_grad_buffer(&self, id: NodeId) -> bool {
        self.nodes[id.0].grad.is_some()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn dims2(&self, id: NodeId) -> (usize, usize) {
        let t = self.value(id);
        (t.rows(), t.cols())
    }

    // ---- op constructors (forward is computed eagerly) ----

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![E::zero(); m * n];
        matmul_accum(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.dims2(a);
        let src = self.value(a).data();
        let mut out = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, rg, Op::Transpose { a }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Add { a, b }))
    }

    /// Add a `[d]` bias vector to every row of `[n,d]`.
    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (n, d) = self.dims2(a);
        if self.value(bias).numel() != d {
            return Err(TensorError::ShapeMismatch(format!(
                "bias len {} vs row width {}",
                self.value(bias).numel(),
                d
            )));
        }
        let bv = self.value(bias).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for r in 0..n {
            for j in 0..d {
                data[r * d + j] = data[r * d + j] + bv[j];
            }
        }
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::AddRowBroadcast { a, bias }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch("elementwise mul".into()));
        }
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, factor: E) -> NodeId {
        let data: Vec<E> = self.value(a).data().iter().map(|&x| x * factor).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, rg, Op::Scale { a, factor })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<E> = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, rg, Op::Gelu { a })
    }

    /// Row-wise softmax. When `mask` is given (length = column count),
    /// columns with `false` get weight exactly zero.
    pub fn softmax_rows(
        &mut self,
        a: NodeId,
        mask: Option<&[bool]>,
    ) -> Result<NodeId, TensorError> {
        let (n, d) = self.dims2(a);
        if let Some(m) = mask {
            if m.len() != d {
                return Err(TensorError::ShapeMismatch(format!(
                    "softmax mask len {} vs {} columns",
                    m.len(),
                    d
                )));
            }
            if !m.iter().any(|&v| v) {
                return Err(TensorError::ShapeMismatch("softmax mask excludes all columns".into()));
            }
        }
        let src = self.value(a).data();
        let mut out = vec![E::zero(); n * d];
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            softmax_row(row, mask, &mut out[r * d..(r + 1) * d]);
        }
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::SoftmaxRows { a, mask: mask.map(|m| m.to_vec()) },
        ))
    }

    /// Last-axis layer norm with affine parameters (`gamma`, `beta` are `[d]`).
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: E,
    ) -> Result<NodeId, TensorError> {
        let (n, d) = self.dims2(x);
        if d < 2 {
            return Err(TensorError::ShapeMismatch("layer norm needs width >= 2".into()));
        }
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(TensorError::ShapeMismatch("layer norm affine params".into()));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = vec![E::zero(); n * d];
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let (mu, var) = mean_var(row);
            let inv = (var + eps).sqrt().recip();
            for j in 0..d {
                out[r * d + j] = (row[j] - mu) * inv * g[j] + b[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Stack rank-2 parts with equal column counts on the row axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch("concat of zero parts".into()));
        }
        let d = self.dims2(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p);
            if c != d {
                return Err(TensorError::ShapeMismatch("concat_rows column mismatch".into()));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, d], data)?,
            rg,
            Op::ConcatRows { parts: parts.to_vec() },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch("concat of zero parts".into()));
        }
        let n = self.dims2(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims2(p).1).collect();
        for &p in parts {
            if self.dims2(p).0 != n {
                return Err(TensorError::ShapeMismatch("concat_cols row mismatch".into()));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![E::zero(); n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..n {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![n, total], data)?,
            rg,
            Op::ConcatCols { parts: parts.to_vec() },
        ))
    }

    pub fn slice_rows(
        &mut self,
        a: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let (n, d) = self.dims2(a);
        if start + len > n {
            return Err(TensorError::ShapeMismatch("slice_rows out of range".into()));
        }
        let data = self.value(a).data()[start * d..(start + len) * d].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![len, d], data)?, rg, Op::SliceRows { a, start, len }))
    }

    pub fn slice_cols(
        &mut self,
        a: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let (n, d) = self.dims2(a);
        if start + len > d {
            return Err(TensorError::ShapeMismatch("slice_cols out of range".into()));
        }
        let src = self.value(a).data();
        let mut data = vec![E::zero(); n * len];
        for r in 0..n {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, len], data)?, rg, Op::SliceCols { a, start, len }))
    }

    /// Select rows by index (duplicates allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, TensorError> {
        let (n, d) = self.dims2(a);
        if indices.iter().any(|&i| i >= n) {
            return Err(TensorError::ShapeMismatch("gather_rows index out of range".into()));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![indices.len(), d], data)?,
            rg,
            Op::GatherRows { a, indices: indices.to_vec() },
        ))
    }

    /// Mean over rows: `[n,d] -> [1,d]`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (n, d) = self.dims2(a);
        if n == 0 {
            return Err(TensorError::ShapeMismatch("mean over zero rows".into()));
        }
        let src = self.value(a).data();
        let inv = lit::<E>(1.0 / n as f64);
        let mut out = vec![E::zero(); d];
        for r in 0..n {
            for j in 0..d {
                out[j] = out[j] + src[r * d + j];
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![1, d], out)?, rg, Op::MeanRows { a }))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: E = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::SumAll { a })
    }

    /// Cross-entropy of a single logit row against a hard target index.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId, TensorError> {
        let t = self.value(logits);
        if t.rows() != 1 || target >= t.cols() {
            return Err(TensorError::ShapeMismatch(format!(
                "cross_entropy: logits {:?}, target {}",
                t.shape(),
                target
            )));
        }
        let row = t.data();
        let lse = log_sum_exp(row);
        let loss = lse - row[target];
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), rg, Op::CrossEntropy { logits, target }))
    }

    /// `-sum(targets * log_softmax(logits * inv_temp))` for one logit row,
    /// with constant soft targets.
    pub fn soft_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[E],
        inv_temp: E,
    ) -> Result<NodeId, TensorError> {
        let t = self.value(logits);
        if t.rows() != 1 || t.cols() != targets.len() {
            return Err(TensorError::ShapeMismatch("soft_cross_entropy target length".into()));
        }
        let scaled: Vec<E> = t.data().iter().map(|&x| x * inv_temp).collect();
        let lse = log_sum_exp(&scaled);
        let mut loss = E::zero();
        for (j, &tj) in targets.iter().enumerate() {
            loss = loss - tj * (scaled[j] - lse);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftCrossEntropy { logits, targets: targets.to_vec(), inv_temp },
        ))
    }

    /// Negative Cox partial log-likelihood with Breslow tie handling.
    /// `risks` holds one risk score per sample (any shape, numel = n).
    pub fn cox_loss(
        &mut self,
        risks: NodeId,
        times: &[f64],
        events: &[bool],
    ) -> Result<NodeId, TensorError> {
        let n = self.value(risks).numel();
        if times.len() != n || events.len() != n {
            return Err(TensorError::ShapeMismatch("cox_loss batch length".into()));
        }
        if !events.iter().any(|&e| e) {
            return Err(TensorError::NoEventsInBatch);
        }
        let r = self.value(risks).data();
        let loss = cox_neg_log_likelihood(r, times, events);
        let rg = self.rg(risks);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CoxLoss { risks, times: times.to_vec(), events: events.to_vec() },
        ))
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Leaf gradients accumulate across
    /// calls; intermediate buffers are fresh per call.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.value.all_finite() {
                return Err(TensorError::NaNInGraph(i));
            }
        }
        let mut local: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        local[loss.0] = Some(vec![E::one()]);

        for idx in (0..=loss.0).rev() {
            let g = match local[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut local);
            // accumulate into persistent buffer
            let node = &mut self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                let buf = node
                    .grad
                    .get_or_insert_with(|| vec![E::zero(); node.value.numel()]);
                for (b, gv) in buf.iter_mut().zip(&g) {
                    *b = *b + *gv;
                }
            }
        }
        Ok(())
    }

    fn accum(&self, local: &mut [Option<Vec<E>>], id: NodeId, contrib: &[E]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let buf = local[id.0]
            .get_or_insert_with(|| vec![E::zero(); self.nodes[id.0].value.numel()]);
        for (b, &c) in buf.iter_mut().zip(contrib) {
            *b = *b + c;
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, idx: usize, g: &[E], local: &mut Vec<Option<Vec<E>>>) {
        // Ops are matched by value of their stored metadata; parent values are
        // read through immutable borrows scoped per arm.
        enum Contrib<E> {
            One(NodeId, Vec<E>),
            Two(NodeId, Vec<E>, NodeId, Vec<E>),
            Many(Vec<(NodeId, Vec<E>)>),
        }
        let contrib: Contrib<E> = match &self.nodes[idx].op {
            Op::Leaf => return,
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.dims2(a);
                let n = self.dims2(b).1;
                let mut ga = vec![E::zero(); m * k];
                let mut gb = vec![E::zero(); k * n];
                // dA = G * B^T ; dB = A^T * G
                matmul_bt_accum(g, self.value(b).data(), &mut ga, m, n, k);
                matmul_at_accum(self.value(a).data(), g, &mut gb, m, k, n);
                Contrib::Two(a, ga, b, gb)
            }
            Op::Transpose { a } => {
                let a = *a;
                let (m, n) = self.dims2(a);
                let mut ga = vec![E::zero(); m * n];
                for i in 0..n {
                    for j in 0..m {
                        ga[j * n + i] = g[i * m + j];
                    }
                }
                Contrib::One(a, ga)
            }
            Op::Add { a, b } => Contrib::Two(*a, g.to_vec(), *b, g.to_vec()),
            Op::AddRowBroadcast { a, bias } => {
                let (a, bias) = (*a, *bias);
                let (n, d) = self.dims2(a);
                let mut gbias = vec![E::zero(); d];
                for r in 0..n {
                    for j in 0..d {
                        gbias[j] = gbias[j] + g[r * d + j];
                    }
                }
                Contrib::Two(a, g.to_vec(), bias, gbias)
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let ga: Vec<E> =
                    g.iter().zip(self.value(b).data()).map(|(&gv, &bv)| gv * bv).collect();
                let gb: Vec<E> =
                    g.iter().zip(self.value(a).data()).map(|(&gv, &av)| gv * av).collect();
                Contrib::Two(a, ga, b, gb)
            }
            Op::Scale { a, factor } => {
                let f = *factor;
                Contrib::One(*a, g.iter().map(|&gv| gv * f).collect())
            }
            Op::Gelu { a } => {
                let a = *a;
                let ga: Vec<E> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| gelu_grad(x) * gv)
                    .collect();
                Contrib::One(a, ga)
            }
            Op::SoftmaxRows { a, mask } => {
                let a = *a;
                let mask = mask.clone();
                let (n, d) = self.dims2(a);
                let p = self.nodes[idx].value.data();
                let mut ga = vec![E::zero(); n * d];
                for r in 0..n {
                    let pr = &p[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut dot = E::zero();
                    for j in 0..d {
                        dot = dot + pr[j] * gr[j];
                    }
                    for j in 0..d {
                        let keep = mask.as_ref().map_or(true, |m| m[j]);
                        if keep {
                            ga[r * d + j] = pr[j] * (gr[j] - dot);
                        }
                    }
                }
                Contrib::One(a, ga)
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let (n, d) = self.dims2(x);
                let src = self.value(x).data();
                let gm = self.value(gamma).data();
                let inv_d = lit::<E>(1.0 / d as f64);
                let mut gx = vec![E::zero(); n * d];
                let mut ggamma = vec![E::zero(); d];
                let mut gbeta = vec![E::zero(); d];
                for r in 0..n {
                    let row = &src[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let (mu, var) = mean_var(row);
                    let inv = (var + eps).sqrt().recip();
                    // xhat and dxhat
                    let mut sum_dxhat = E::zero();
                    let mut sum_dxhat_xhat = E::zero();
                    let mut xhat = vec![E::zero(); d];
                    let mut dxhat = vec![E::zero(); d];
                    for j in 0..d {
                        xhat[j] = (row[j] - mu) * inv;
                        dxhat[j] = gr[j] * gm[j];
                        sum_dxhat = sum_dxhat + dxhat[j];
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat[j] * xhat[j];
                        ggamma[j] = ggamma[j] + gr[j] * xhat[j];
                        gbeta[j] = gbeta[j] + gr[j];
                    }
                    for j in 0..d {
                        gx[r * d + j] = inv
                            * (dxhat[j]
                                - inv_d * sum_dxhat
                                - xhat[j] * inv_d * sum_dxhat_xhat);
                    }
                }
                Contrib::Many(vec![(x, gx), (gamma, ggamma), (beta, gbeta)])
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut out = Vec::new();
                let mut off = 0;
                for p in parts {
                    let (r, c) = self.dims2(p);
                    out.push((p, g[off..off + r * c].to_vec()));
                    off += r * c;
                }
                Contrib::Many(out)
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let n = self.dims2(parts[0]).0;
                let total: usize = parts.iter().map(|&p| self.dims2(p).1).sum();
                let mut out = Vec::new();
                let mut off = 0;
                for p in parts {
                    let w = self.dims2(p).1;
                    let mut gp = vec![E::zero(); n * w];
                    for r in 0..n {
                        gp[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    out.push((p, gp));
                    off += w;
                }
                Contrib::Many(out)
            }
            Op::SliceRows { a, start, len } => {
                let (a, start, len) = (*a, *start, *len);
                let (n, d) = self.dims2(a);
                let mut ga = vec![E::zero(); n * d];
                ga[start * d..(start + len) * d].copy_from_slice(g);
                Contrib::One(a, ga)
            }
            Op::SliceCols { a, start, len } => {
                let (a, start, len) = (*a, *start, *len);
                let (n, d) = self.dims2(a);
                let mut ga = vec![E::zero(); n * d];
                for r in 0..n {
                    ga[r * d + start..r * d + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                Contrib::One(a, ga)
            }
            Op::GatherRows { a, indices } => {
                let a = *a;
                let indices = indices.clone();
                let (n, d) = self.dims2(a);
                let mut ga = vec![E::zero(); n * d];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        ga[i * d + j] = ga[i * d + j] + g[r * d + j];
                    }
                }
                Contrib::One(a, ga)
            }
            Op::MeanRows { a } => {
                let a = *a;
                let (n, d) = self.dims2(a);
                let inv = lit::<E>(1.0 / n as f64);
                let mut ga = vec![E::zero(); n * d];
                for r in 0..n {
                    for j in 0..d {
                        ga[r * d + j] = g[j] * inv;
                    }
                }
                Contrib::One(a, ga)
            }
            Op::SumAll { a } => {
                let a = *a;
                let n = self.value(a).numel();
                Contrib::One(a, vec![g[0]; n])
            }
            Op::CrossEntropy { logits, target } => {
                let (logits, target) = (*logits, *target);
                let row = self.value(logits).data();
                let mut p = vec![E::zero(); row.len()];
                softmax_row(row, None, &mut p);
                let mut ga = p;
                ga[target] = ga[target] - E::one();
                for v in &mut ga {
                    *v = *v * g[0];
                }
                Contrib::One(logits, ga)
            }
            Op::SoftCrossEntropy { logits, targets, inv_temp } => {
                let logits = *logits;
                let targets = targets.clone();
                let it = *inv_temp;
                let scaled: Vec<E> =
                    self.value(logits).data().iter().map(|&x| x * it).collect();
                let mut p = vec![E::zero(); scaled.len()];
                softmax_row(&scaled, None, &mut p);
                let tsum: E = targets.iter().copied().sum();
                let ga: Vec<E> = p
                    .iter()
                    .zip(&targets)
                    .map(|(&pj, &tj)| it * (pj * tsum - tj) * g[0])
                    .collect();
                Contrib::One(logits, ga)
            }
            Op::CoxLoss { risks, times, events } => {
                let risks = *risks;
                let (times, events) = (times.clone(), events.clone());
                let r = self.value(risks).data();
                let ga = cox_gradient(r, &times, &events, g[0]);
                Contrib::One(risks, ga)
            }
        };
        match contrib {
            Contrib::One(a, ga) => self.accum(local, a, &ga),
            Contrib::Two(a, ga, b, gb) => {
                self.accum(local, a, &ga);
                self.accum(local, b, &gb);
            }
            Contrib::Many(parts) => {
                for (p, gp) in parts {
                    self.accum(local, p, &gp);
                }
            }
        }
    }
}

// ---- scalar kernels ----

fn gelu<E: Element>(x: E) -> E {
    // tanh approximation (standard ViT MLP activation)
    let c = lit::<E>(0.7978845608028654); // sqrt(2/pi)
    let k = lit::<E>(0.044715);
    let half = lit::<E>(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (E::one() + u.tanh())
}

fn gelu_grad<E: Element>(x: E) -> E {
    let c = lit::<E>(0.7978845608028654);
    let k = lit::<E>(0.044715);
    let half = lit::<E>(0.5);
    let three = lit::<E>(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (E::one() + three * k * x * x);
    half * (E::one() + t) + half * x * (E::one() - t * t) * du
}

fn mean_var<E: Element>(row: &[E]) -> (E, E) {
    let n = lit::<E>(row.len() as f64);
    let mut mu = E::zero();
    for &v in row {
        mu = mu + v;
    }
    mu = mu / n;
    let mut var = E::zero();
    for &v in row {
        var = var + (v - mu) * (v - mu);
    }
    (mu, var / n)
}

fn softmax_row<E: Element>(row: &[E], mask: Option<&[bool]>, out: &mut [E]) {
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    let mut mx = E::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if keep(j) && v > mx {
            mx = v;
        }
    }
    let mut sum = E::zero();
    for (j, &v) in row.iter().enumerate() {
        if keep(j) {
            let e = (v - mx).exp();
            out[j] = e;
            sum = sum + e;
        } else {
            out[j] = E::zero();
        }
    }
    for v in out.iter_mut() {
        *v = *v / sum;
    }
}

fn log_sum_exp<E: Element>(row: &[E]) -> E {
    let mx = row.iter().copied().fold(E::neg_infinity(), E::max);
    let mut sum = E::zero();
    for &v in row {
        sum = sum + (v - mx).exp();
    }
    mx + sum.ln()
}

/// `-sum_{i: event} (r_i - log sum_{j: t_j >= t_i} exp(r_j))`.
/// Tied event times share the full risk set (Breslow).
fn cox_neg_log_likelihood<E: Element>(risks: &[E], times: &[f64], events: &[bool]) -> E {
    let mx = risks.iter().copied().fold(E::neg_infinity(), E::max);
    let mut loss = E::zero();
    for i in 0..risks.len() {
        if !events[i] {
            continue;
        }
        let mut denom = E::zero();
        for j in 0..risks.len() {
            if times[j] >= times[i] {
                denom = denom + (risks[j] - mx).exp();
            }
        }
        loss = loss - (risks[i] - (mx + denom.ln()));
    }
    loss
}

/// d(neg partial ll)/d(r_k) = -[k event] + sum_{i event, t_k >= t_i} exp(r_k) / D_i.
fn cox_gradient<E: Element>(risks: &[E], times: &[f64], events: &[bool], upstream: E) -> Vec<E> {
    let n = risks.len();
    let mx = risks.iter().copied().fold(E::neg_infinity(), E::max);
    let mut grad = vec![E::zero(); n];
    for i in 0..n {
        if !events[i] {
            continue;
        }
        let mut denom = E::zero();
        for j in 0..n {
            if times[j] >= times[i] {
                denom = denom + (risks[j] - mx).exp();
            }
        }
        grad[i] = grad[i] - E::one();
        for j in 0..n {
            if times[j] >= times[i] {
                grad[j] = grad[j] + (risks[j] - mx).exp() / denom;
            }
        }
    }
    for v in &mut grad {
        *v = *v * upstream;
    }
    grad
}
