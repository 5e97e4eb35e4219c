//! Reverse-mode autodiff over dense tensors.
//!
//! A `Graph` records one forward pass as a flat tape of nodes; construction
//! order is already topological, so `backward` walks the tape in reverse and
//! dispatches per-op vector-Jacobian products. Parameters enter the tape as
//! leaves copied out of a `ParamStore` and their gradients are written back
//! with `write_grads_to` after the backward pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::store::ParamStore;
use crate::numerics::tensor::Tensor;

pub type NodeId = usize;

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;
pub const LAYERNORM_EPS: f64 = 1e-5;

enum Op<F: Scalar> {
    Leaf { param: Option<String> },
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Bmm(NodeId, NodeId),
    SwapAxes(NodeId, usize, usize),
    Reshape(NodeId),
    Scale(NodeId, F),
    Gelu(NodeId),
    SoftmaxLast(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<F>, inv_std: Vec<F> },
    DepthwiseConv1d { x: NodeId, w: NodeId },
    Dropout { x: NodeId, mask: Vec<F> },
    Embedding { table: NodeId, ids: Vec<usize> },
    SelectFirst(NodeId),
    Mse(NodeId, NodeId),
    MaskedCe { logits: NodeId, targets: Vec<usize>, mask: Vec<bool> },
    KlMasked { p: NodeId, q: NodeId, mask: Vec<bool> },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    grad: Option<Vec<F>>,
    needs_grad: bool,
    op: Op<F>,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    /// Dropout is active only in training mode; eval graphs are RNG-free.
    pub train: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), train: false }
    }

    pub fn training() -> Self {
        Self { nodes: Vec::new(), train: true }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, needs_grad: bool, op: Op<F>) -> NodeId {
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Insert a constant input (no gradient tracking).
    pub fn input(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, false, Op::Leaf { param: None })
    }

    /// Insert a leaf that participates in backward.
    pub fn leaf(&mut self, value: Tensor<F>, needs_grad: bool) -> NodeId {
        self.push(value, needs_grad, Op::Leaf { param: None })
    }

    /// Copy a parameter out of the store; its gradient is routed back to the
    /// store by `write_grads_to`.
    pub fn param(&mut self, store: &ParamStore<F>, path: &str) -> Result<NodeId> {
        let tensor = store.get(path)?.clone();
        let needs = tensor.requires_grad;
        Ok(self.push(tensor, needs, Op::Leaf { param: Some(path.to_string()) }))
    }

    // ---- elementwise and structural ops ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<F> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| *x + *y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Add(a, b)))
    }

    /// Broadcast a rank-1 bias over the last axis.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        let h = *xs.last().ok_or_else(|| Error::Shape("add_bias on rank-0".into()))?;
        if bs != [h] {
            return Err(Error::Shape(format!("bias shape {bs:?} vs last axis {h}")));
        }
        let bias = self.nodes[b].value.data().to_vec();
        let data: Vec<F> = self.nodes[x]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| *v + bias[i % h])
            .collect();
        let value = Tensor::new(xs, data)?;
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(value, needs, Op::AddBias(x, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> NodeId {
        let data: Vec<F> = self.nodes[x].value.data().iter().map(|v| *v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, needs, Op::Scale(x, c))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.nodes[x].value.clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::Reshape(x)))
    }

    pub fn swap_axes(&mut self, x: NodeId, a: usize, b: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if a >= shape.len() || b >= shape.len() {
            return Err(Error::Shape(format!("swap_axes({a},{b}) on rank {}", shape.len())));
        }
        let value = permute_swap(&self.nodes[x].value, a, b);
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::SwapAxes(x, a, b)))
    }

    // ---- linear algebra ----

    /// `x[..., K] . w[K, N]`, flattening leading axes of `x`.
    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(Error::Shape(format!("matmul weight must be rank 2, got {ws:?}")));
        }
        let k = *xs.last().ok_or_else(|| Error::Shape("matmul on rank-0 input".into()))?;
        if k != ws[0] {
            return Err(Error::Shape(format!("matmul inner dims {k} vs {}", ws[0])));
        }
        let n = ws[1];
        let m: usize = xs[..xs.len() - 1].iter().product();
        let mut out = vec![F::zero(); m * n];
        unsafe {
            F::gemm(
                m,
                k,
                n,
                F::one(),
                self.nodes[x].value.data().as_ptr(),
                k as isize,
                1,
                self.nodes[w].value.data().as_ptr(),
                n as isize,
                1,
                F::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let mut out_shape = xs[..xs.len() - 1].to_vec();
        out_shape.push(n);
        let value = Tensor::new(out_shape, out)?;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(value, needs, Op::Matmul(x, w)))
    }

    /// Batched matmul: `a[..., M, K] . b[..., K, N]` with equal leading axes.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::Shape(format!("bmm: {sa:?} vs {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::Shape(format!("bmm inner dims {k} vs {k2}")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![F::zero(); batch * m * n];
        let pa = self.nodes[a].value.data();
        let pb = self.nodes[b].value.data();
        for i in 0..batch {
            unsafe {
                F::gemm(
                    m,
                    k,
                    n,
                    F::one(),
                    pa[i * m * k..].as_ptr(),
                    k as isize,
                    1,
                    pb[i * k * n..].as_ptr(),
                    n as isize,
                    1,
                    F::zero(),
                    out[i * m * n..].as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let value = Tensor::new(out_shape, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Bmm(a, b)))
    }

    // ---- nonlinearities ----

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<F> = self.nodes[x]
            .value
            .data()
            .iter()
            .map(|v| {
                let xv = v.to_f64();
                let u = GELU_C * (xv + GELU_A * xv * xv * xv);
                F::from_f64(0.5 * xv * (1.0 + u.tanh()))
            })
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, needs, Op::Gelu(x))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let h = *shape.last().ok_or_else(|| Error::Shape("softmax on rank-0".into()))?;
        let mut data = self.nodes[x].value.data().to_vec();
        for row in data.chunks_mut(h) {
            softmax_row(row);
        }
        let value = Tensor::new(shape, data)?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::SoftmaxLast(x)))
    }

    /// Per-position normalization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let h = *shape.last().ok_or_else(|| Error::Shape("layer_norm on rank-0".into()))?;
        if h < 1 {
            return Err(Error::Shape("layer_norm needs a non-empty last axis".into()));
        }
        if self.shape(gain) != [h] || self.shape(bias) != [h] {
            return Err(Error::Shape(format!(
                "layer_norm affine shapes {:?}/{:?} vs last axis {h}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let rows = self.nodes[x].value.numel() / h;
        let eps = F::from_f64(LAYERNORM_EPS);
        let hf = F::from_f64(h as f64);
        let mut xhat = vec![F::zero(); rows * h];
        let mut inv_std = vec![F::zero(); rows];
        let mut out = vec![F::zero(); rows * h];
        let g = self.nodes[gain].value.data().to_vec();
        let b = self.nodes[bias].value.data().to_vec();
        let xd = self.nodes[x].value.data();
        for r in 0..rows {
            let row = &xd[r * h..(r + 1) * h];
            let mean = row.iter().fold(F::zero(), |acc, v| acc + *v) / hf;
            let var = row
                .iter()
                .fold(F::zero(), |acc, v| acc + (*v - mean) * (*v - mean))
                / hf;
            let istd = F::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..h {
                let xh = (row[j] - mean) * istd;
                xhat[r * h + j] = xh;
                out[r * h + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(value, needs, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// Depthwise 1-D convolution along the sequence axis with same-length
    /// zero padding. `x[B, S, H]`, `w[K, H]`, odd `K`.
    pub fn depthwise_conv1d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 2 {
            return Err(Error::Shape(format!("depthwise_conv1d: x {xs:?}, w {ws:?}")));
        }
        let (bsz, s, h) = (xs[0], xs[1], xs[2]);
        let (k, wh) = (ws[0], ws[1]);
        if wh != h {
            return Err(Error::Shape(format!("depthwise channels {wh} vs input {h}")));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("depthwise kernel must be odd, got {k}")));
        }
        let pad = (k - 1) / 2;
        let xd = self.nodes[x].value.data();
        let wd = self.nodes[w].value.data();
        let mut out = vec![F::zero(); bsz * s * h];
        for b in 0..bsz {
            for t in 0..s {
                for kk in 0..k {
                    let src = t as isize + kk as isize - pad as isize;
                    if src < 0 || src >= s as isize {
                        continue;
                    }
                    let src = src as usize;
                    let xrow = &xd[(b * s + src) * h..(b * s + src + 1) * h];
                    let wrow = &wd[kk * h..(kk + 1) * h];
                    let orow = &mut out[(b * s + t) * h..(b * s + t + 1) * h];
                    for c in 0..h {
                        orow[c] += wrow[c] * xrow[c];
                    }
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(value, needs, Op::DepthwiseConv1d { x, w }))
    }

    /// Inverted-scale dropout; identity when the graph is in eval mode.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut ChaCha8Rng) -> NodeId {
        if !self.train || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let scale = F::from_f64(1.0 / keep);
        let mask: Vec<F> = (0..self.nodes[x].value.numel())
            .map(|_| if rng.gen_range(0.0..1.0) < keep { scale } else { F::zero() })
            .collect();
        let data: Vec<F> = self.nodes[x]
            .value
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| *v * *m)
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, needs, Op::Dropout { x, mask })
    }

    /// Row gather: `table[V, E]` indexed by `ids` reshaped to `[B, S, E]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize], batch: usize, seq: usize) -> Result<NodeId> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::Shape(format!("embedding table must be rank 2, got {ts:?}")));
        }
        if ids.len() != batch * seq {
            return Err(Error::Shape(format!(
                "ids length {} vs batch*seq {}",
                ids.len(),
                batch * seq
            )));
        }
        let (v, e) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Lookup(format!("token id {bad} outside table of {v} rows")));
        }
        let td = self.nodes[table].value.data();
        let mut out = vec![F::zero(); ids.len() * e];
        for (pos, &id) in ids.iter().enumerate() {
            out[pos * e..(pos + 1) * e].copy_from_slice(&td[id * e..(id + 1) * e]);
        }
        let value = Tensor::new(vec![batch, seq, e], out)?;
        let needs = self.needs(table);
        Ok(self.push(value, needs, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// First-position pooling: `x[B, S, H] -> [B, H]`.
    pub fn select_first(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::Shape(format!("select_first expects rank 3, got {xs:?}")));
        }
        let (b, s, h) = (xs[0], xs[1], xs[2]);
        let xd = self.nodes[x].value.data();
        let mut out = vec![F::zero(); b * h];
        for i in 0..b {
            out[i * h..(i + 1) * h].copy_from_slice(&xd[i * s * h..i * s * h + h]);
        }
        let value = Tensor::new(vec![b, h], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, needs, Op::SelectFirst(x)))
    }

    // ---- losses (scalar outputs) ----

    /// Mean of squared element differences.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mse: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let n = self.nodes[a].value.numel();
        let nf = F::from_f64(n as f64);
        let sum = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .fold(F::zero(), |acc, (x, y)| {
                let d = *x - *y;
                acc + d * d
            });
        let value = Tensor::scalar(sum / nf);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Mse(a, b)))
    }

    /// Mean cross-entropy over masked rows of `logits[..., V]`. `targets` and
    /// `mask` are indexed by flattened row; unmasked targets are ignored.
    pub fn masked_ce(&mut self, logits: NodeId, targets: &[usize], mask: &[bool]) -> Result<NodeId> {
        let shape = self.shape(logits).to_vec();
        let v = *shape.last().ok_or_else(|| Error::Shape("masked_ce on rank-0".into()))?;
        let rows = self.nodes[logits].value.numel() / v;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Shape(format!(
                "masked_ce: {rows} rows vs {} targets / {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let m = mask.iter().filter(|&&b| b).count();
        if m == 0 {
            return Err(Error::State("masked_ce: empty mask".into()));
        }
        for (r, &t) in targets.iter().enumerate() {
            if mask[r] && t >= v {
                return Err(Error::Lookup(format!("target id {t} outside vocab of {v}")));
            }
        }
        let ld = self.nodes[logits].value.data();
        let mut total = F::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = &ld[r * v..(r + 1) * v];
            total = total - log_softmax_at(row, targets[r]);
        }
        let value = Tensor::scalar(total / F::from_f64(m as f64));
        let needs = self.needs(logits);
        Ok(self.push(
            value,
            needs,
            Op::MaskedCe { logits, targets: targets.to_vec(), mask: mask.to_vec() },
        ))
    }

    /// Mean over masked rows of `KL(softmax(p) || softmax(q))`.
    pub fn kl_masked(&mut self, p: NodeId, q: NodeId, mask: &[bool]) -> Result<NodeId> {
        if self.shape(p) != self.shape(q) {
            return Err(Error::Shape(format!(
                "kl_masked: {:?} vs {:?}",
                self.shape(p),
                self.shape(q)
            )));
        }
        let shape = self.shape(p).to_vec();
        let v = *shape.last().ok_or_else(|| Error::Shape("kl_masked on rank-0".into()))?;
        let rows = self.nodes[p].value.numel() / v;
        if mask.len() != rows {
            return Err(Error::Shape(format!(
                "kl_masked: {rows} rows vs {} mask entries",
                mask.len()
            )));
        }
        let m = mask.iter().filter(|&&b| b).count();
        if m == 0 {
            return Err(Error::State("kl_masked: empty mask".into()));
        }
        let pd = self.nodes[p].value.data();
        let qd = self.nodes[q].value.data();
        let mut total = F::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let prow = &pd[r * v..(r + 1) * v];
            let qrow = &qd[r * v..(r + 1) * v];
            total = total + kl_row(prow, qrow);
        }
        let value = Tensor::scalar(total / F::from_f64(m as f64));
        let needs = self.needs(p) || self.needs(q);
        Ok(self.push(value, needs, Op::KlMasked { p, q, mask: mask.to_vec() }))
    }

    // ---- backward ----

    /// Reverse pass seeded with d(loss) = 1. `loss` must be scalar.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward target must be scalar, got {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss].value.is_finite() {
            return Err(Error::NonFinite("loss is not finite".into()));
        }
        self.nodes[loss].grad = Some(vec![F::one()]);
        for id in (0..=loss).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            self.backprop_node(id)?;
        }
        Ok(())
    }

    fn take_grad(&mut self, id: NodeId) -> Vec<F> {
        self.nodes[id].grad.clone().expect("grad present")
    }

    fn add_grad(&mut self, id: NodeId, delta: &[F]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let n = self.nodes[id].value.numel();
        let grad = self.nodes[id].grad.get_or_insert_with(|| vec![F::zero(); n]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    fn backprop_node(&mut self, id: NodeId) -> Result<()> {
        let dy = self.take_grad(id);
        // Plain enum dispatch; each arm implements the op's VJP.
        match &self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, &dy);
                self.add_grad(b, &dy);
            }
            Op::AddBias(x, b) => {
                let (x, b) = (*x, *b);
                let h = self.nodes[b].value.numel();
                self.add_grad(x, &dy);
                if self.needs(b) {
                    let mut db = vec![F::zero(); h];
                    for (i, g) in dy.iter().enumerate() {
                        db[i % h] += *g;
                    }
                    self.add_grad(b, &db);
                }
            }
            Op::Scale(x, c) => {
                let (x, c) = (*x, *c);
                let dx: Vec<F> = dy.iter().map(|g| *g * c).collect();
                self.add_grad(x, &dx);
            }
            Op::Reshape(x) => {
                let x = *x;
                self.add_grad(x, &dy);
            }
            Op::SwapAxes(x, a, b) => {
                let (x, a, b) = (*x, *a, *b);
                let dy_t = Tensor::new(self.shape(id).to_vec(), dy).expect("shape");
                let dx = permute_swap(&dy_t, a, b);
                self.add_grad(x, dx.data());
            }
            Op::Matmul(x, w) => {
                let (x, w) = (*x, *w);
                let xs = self.shape(x).to_vec();
                let ws = self.shape(w).to_vec();
                let k = ws[0];
                let n = ws[1];
                let m: usize = xs[..xs.len() - 1].iter().product();
                if self.needs(x) {
                    // dx = dy . w^T
                    let mut dx = vec![F::zero(); m * k];
                    unsafe {
                        F::gemm(
                            m,
                            n,
                            k,
                            F::one(),
                            dy.as_ptr(),
                            n as isize,
                            1,
                            self.nodes[w].value.data().as_ptr(),
                            1,
                            n as isize,
                            F::zero(),
                            dx.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                    self.add_grad(x, &dx);
                }
                if self.needs(w) {
                    // dw = x^T . dy
                    let mut dw = vec![F::zero(); k * n];
                    unsafe {
                        F::gemm(
                            k,
                            m,
                            n,
                            F::one(),
                            self.nodes[x].value.data().as_ptr(),
                            1,
                            k as isize,
                            dy.as_ptr(),
                            n as isize,
                            1,
                            F::zero(),
                            dw.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                    self.add_grad(w, &dw);
                }
            }
            Op::Bmm(a, b) => {
                let (a, b) = (*a, *b);
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                if self.needs(a) {
                    let mut da = vec![F::zero(); batch * m * k];
                    let pb = self.nodes[b].value.data();
                    for i in 0..batch {
                        unsafe {
                            F::gemm(
                                m,
                                n,
                                k,
                                F::one(),
                                dy[i * m * n..].as_ptr(),
                                n as isize,
                                1,
                                pb[i * k * n..].as_ptr(),
                                1,
                                n as isize,
                                F::zero(),
                                da[i * m * k..].as_mut_ptr(),
                                k as isize,
                                1,
                            );
                        }
                    }
                    self.add_grad(a, &da);
                }
                if self.needs(b) {
                    let mut db = vec![F::zero(); batch * k * n];
                    let pa = self.nodes[a].value.data();
                    for i in 0..batch {
                        unsafe {
                            F::gemm(
                                k,
                                m,
                                n,
                                F::one(),
                                pa[i * m * k..].as_ptr(),
                                1,
                                k as isize,
                                dy[i * m * n..].as_ptr(),
                                n as isize,
                                1,
                                F::zero(),
                                db[i * k * n..].as_mut_ptr(),
                                n as isize,
                                1,
                            );
                        }
                    }
                    self.add_grad(b, &db);
                }
            }
            Op::Gelu(x) => {
                let x = *x;
                let dx: Vec<F> = self.nodes[x]
                    .value
                    .data()
                    .iter()
                    .zip(&dy)
                    .map(|(v, g)| {
                        let xv = v.to_f64();
                        let u = GELU_C * (xv + GELU_A * xv * xv * xv);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * xv * xv);
                        let d = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du;
                        F::from_f64(d) * *g
                    })
                    .collect();
                self.add_grad(x, &dx);
            }
            Op::SoftmaxLast(x) => {
                let x = *x;
                let shape = self.shape(id).to_vec();
                let h = *shape.last().expect("rank >= 1");
                let y = self.nodes[id].value.data().to_vec();
                let mut dx = vec![F::zero(); y.len()];
                for r in 0..y.len() / h {
                    let yr = &y[r * h..(r + 1) * h];
                    let gr = &dy[r * h..(r + 1) * h];
                    let dot = yr
                        .iter()
                        .zip(gr)
                        .fold(F::zero(), |acc, (a, b)| acc + *a * *b);
                    for j in 0..h {
                        dx[r * h + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let xhat = xhat.clone();
                let inv_std = inv_std.clone();
                let h = self.nodes[gain].value.numel();
                let rows = xhat.len() / h;
                let hf = F::from_f64(h as f64);
                let g = self.nodes[gain].value.data().to_vec();
                if self.needs(gain) {
                    let mut dg = vec![F::zero(); h];
                    for r in 0..rows {
                        for j in 0..h {
                            dg[j] += dy[r * h + j] * xhat[r * h + j];
                        }
                    }
                    self.add_grad(gain, &dg);
                }
                if self.needs(bias) {
                    let mut db = vec![F::zero(); h];
                    for r in 0..rows {
                        for j in 0..h {
                            db[j] += dy[r * h + j];
                        }
                    }
                    self.add_grad(bias, &db);
                }
                if self.needs(x) {
                    let mut dx = vec![F::zero(); rows * h];
                    for r in 0..rows {
                        let mut sum_dxhat = F::zero();
                        let mut sum_dxhat_xhat = F::zero();
                        for j in 0..h {
                            let dxh = dy[r * h + j] * g[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat[r * h + j];
                        }
                        for j in 0..h {
                            let dxh = dy[r * h + j] * g[j];
                            dx[r * h + j] = inv_std[r]
                                * (dxh - sum_dxhat / hf - xhat[r * h + j] * sum_dxhat_xhat / hf);
                        }
                    }
                    self.add_grad(x, &dx);
                }
            }
            Op::DepthwiseConv1d { x, w } => {
                let (x, w) = (*x, *w);
                let xs = self.shape(x).to_vec();
                let ws = self.shape(w).to_vec();
                let (bsz, s, h) = (xs[0], xs[1], xs[2]);
                let k = ws[0];
                let pad = (k - 1) / 2;
                if self.needs(w) {
                    let xd = self.nodes[x].value.data();
                    let mut dw = vec![F::zero(); k * h];
                    for b in 0..bsz {
                        for t in 0..s {
                            for kk in 0..k {
                                let src = t as isize + kk as isize - pad as isize;
                                if src < 0 || src >= s as isize {
                                    continue;
                                }
                                let src = src as usize;
                                for c in 0..h {
                                    dw[kk * h + c] +=
                                        dy[(b * s + t) * h + c] * xd[(b * s + src) * h + c];
                                }
                            }
                        }
                    }
                    self.add_grad(w, &dw);
                }
                if self.needs(x) {
                    let wd = self.nodes[w].value.data();
                    let mut dx = vec![F::zero(); bsz * s * h];
                    for b in 0..bsz {
                        for t in 0..s {
                            for kk in 0..k {
                                let src = t as isize + kk as isize - pad as isize;
                                if src < 0 || src >= s as isize {
                                    continue;
                                }
                                let src = src as usize;
                                for c in 0..h {
                                    dx[(b * s + src) * h + c] +=
                                        wd[kk * h + c] * dy[(b * s + t) * h + c];
                                }
                            }
                        }
                    }
                    self.add_grad(x, &dx);
                }
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let dx: Vec<F> = dy.iter().zip(mask.clone().iter()).map(|(g, m)| *g * *m).collect();
                self.add_grad(x, &dx);
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let e = self.shape(table)[1];
                let v = self.shape(table)[0];
                let mut dt = vec![F::zero(); v * e];
                for (pos, &idx) in ids.iter().enumerate() {
                    for c in 0..e {
                        dt[idx * e + c] += dy[pos * e + c];
                    }
                }
                self.add_grad(table, &dt);
            }
            Op::SelectFirst(x) => {
                let x = *x;
                let xs = self.shape(x).to_vec();
                let (b, s, h) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![F::zero(); b * s * h];
                for i in 0..b {
                    dx[i * s * h..i * s * h + h].copy_from_slice(&dy[i * h..(i + 1) * h]);
                }
                self.add_grad(x, &dx);
            }
            Op::Mse(a, b) => {
                let (a, b) = (*a, *b);
                let n = self.nodes[a].value.numel();
                let c = dy[0] * F::from_f64(2.0 / n as f64);
                let diffs: Vec<F> = self.nodes[a]
                    .value
                    .data()
                    .iter()
                    .zip(self.nodes[b].value.data())
                    .map(|(x, y)| (*x - *y) * c)
                    .collect();
                self.add_grad(a, &diffs);
                if self.needs(b) {
                    let neg: Vec<F> = diffs.iter().map(|d| -*d).collect();
                    self.add_grad(b, &neg);
                }
            }
            Op::MaskedCe { logits, targets, mask } => {
                let logits = *logits;
                let targets = targets.clone();
                let mask = mask.clone();
                let shape = self.shape(logits).to_vec();
                let v = *shape.last().expect("rank >= 1");
                let rows = self.nodes[logits].value.numel() / v;
                let m = mask.iter().filter(|&&b| b).count();
                let c = dy[0] / F::from_f64(m as f64);
                let ld = self.nodes[logits].value.data().to_vec();
                let mut dl = vec![F::zero(); rows * v];
                for r in 0..rows {
                    if !mask[r] {
                        continue;
                    }
                    let mut probs = ld[r * v..(r + 1) * v].to_vec();
                    softmax_row(&mut probs);
                    for j in 0..v {
                        let target = if j == targets[r] { F::one() } else { F::zero() };
                        dl[r * v + j] = (probs[j] - target) * c;
                    }
                }
                self.add_grad(logits, &dl);
            }
            Op::KlMasked { p, q, mask } => {
                let (p, q) = (*p, *q);
                let mask = mask.clone();
                let shape = self.shape(p).to_vec();
                let v = *shape.last().expect("rank >= 1");
                let rows = self.nodes[p].value.numel() / v;
                let m = mask.iter().filter(|&&b| b).count();
                let c = dy[0] / F::from_f64(m as f64);
                let pd = self.nodes[p].value.data().to_vec();
                let qd = self.nodes[q].value.data().to_vec();
                let needs_p = self.needs(p);
                let needs_q = self.needs(q);
                let mut dp = vec![F::zero(); rows * v];
                let mut dq = vec![F::zero(); rows * v];
                for r in 0..rows {
                    if !mask[r] {
                        continue;
                    }
                    let mut pp = pd[r * v..(r + 1) * v].to_vec();
                    let mut qp = qd[r * v..(r + 1) * v].to_vec();
                    let lp = log_softmax_row(&mut pp);
                    let lq = log_softmax_row(&mut qp);
                    if needs_q {
                        for j in 0..v {
                            dq[r * v + j] = (qp[j] - pp[j]) * c;
                        }
                    }
                    if needs_p {
                        let kl = (0..v).fold(F::zero(), |acc, j| acc + pp[j] * (lp[j] - lq[j]));
                        for j in 0..v {
                            dp[r * v + j] = pp[j] * ((lp[j] - lq[j]) - kl) * c;
                        }
                    }
                }
                if needs_p {
                    self.add_grad(p, &dp);
                }
                if needs_q {
                    self.add_grad(q, &dq);
                }
            }
        }
        Ok(())
    }

    /// Accumulate leaf gradients into their backing store parameters. Returns
    /// the touched parameter paths in tape order.
    pub fn write_grads_to(&self, store: &mut ParamStore<F>) -> Result<Vec<String>> {
        let mut touched = Vec::new();
        for node in &self.nodes {
            if let Op::Leaf { param: Some(path) } = &node.op {
                if let Some(grad) = &node.grad {
                    if grad.iter().any(|g| !g.is_finite()) {
                        return Err(Error::NonFinite(format!("gradient for {path}")));
                    }
                    store.get_mut(path)?.accumulate_grad(grad)?;
                    touched.push(path.clone());
                }
            }
        }
        Ok(touched)
    }
}

fn softmax_row<F: Scalar>(row: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |a, b| a.max(*b));
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// In place: slice becomes softmax probabilities; returns the log-softmax.
fn log_softmax_row<F: Scalar>(row: &mut [F]) -> Vec<F> {
    let max = row.iter().fold(F::neg_infinity(), |a, b| a.max(*b));
    let log_z = row
        .iter()
        .fold(F::zero(), |acc, v| acc + (*v - max).exp())
        .ln()
        + max;
    let logs: Vec<F> = row.iter().map(|v| *v - log_z).collect();
    for (v, l) in row.iter_mut().zip(&logs) {
        *v = l.exp();
    }
    logs
}

fn log_softmax_at<F: Scalar>(row: &[F], idx: usize) -> F {
    let max = row.iter().fold(F::neg_infinity(), |a, b| a.max(*b));
    let log_z = row
        .iter()
        .fold(F::zero(), |acc, v| acc + (*v - max).exp())
        .ln()
        + max;
    row[idx] - log_z
}

fn kl_row<F: Scalar>(p_logits: &[F], q_logits: &[F]) -> F {
    let mut p = p_logits.to_vec();
    let mut q = q_logits.to_vec();
    let lp = log_softmax_row(&mut p);
    let lq = log_softmax_row(&mut q);
    (0..p.len()).fold(F::zero(), |acc, j| acc + p[j] * (lp[j] - lq[j]))
}

fn permute_swap<F: Scalar>(t: &Tensor<F>, a: usize, b: usize) -> Tensor<F> {
    if a == b {
        return t.clone();
    }
    let shape = t.shape();
    let rank = shape.len();
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    }
    let mut data = vec![F::zero(); t.numel()];
    let src = t.data();
    let mut idx = vec![0usize; rank];
    for (flat, value) in src.iter().enumerate() {
        let mut rem = flat;
        for i in 0..rank {
            idx[i] = rem / in_strides[i];
            rem %= in_strides[i];
        }
        idx.swap(a, b);
        let dst: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        data[dst] = *value;
    }
    Tensor::new(out_shape, data).expect("permutation preserves numel")
}
