//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in creation order, which is already a topological order,
//! so `backward` is a single reverse sweep over the tape.

use rand::Rng;

use super::array::{split_axis, strides, Array, Element};
use super::TensorError;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddBias { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, T),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Gather { table: Var, ids: Vec<usize> },
    Dropout { x: Var, keep: Vec<T> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    MaskedFill { x: Var, mask: Vec<bool> },
    Concat { parts: Vec<Var>, axis: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, smoothing: T, probs: Vec<T> },
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A computation tape. Build one per forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Array<T>>>,
    backward_done: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(!value.data().iter().any(|v| v.is_nan()), "NaN produced by op #{}", self.nodes.len());
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&Array<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Array<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Drops every node created after the graph had `len` nodes. Vars from
    /// the dropped range become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.truncate(len);
    }

    /// Clears gradients so `backward` may be called again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    // ---- forward ops -------------------------------------------------------

    /// `a[..., k] · b[k, n]`, or `a · bᵀ` with `b[n, k]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 {
            return Err(TensorError::shapes("matmul", &sa, &sb));
        }
        let k = *sa.last().unwrap();
        let (bk, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != bk {
            return Err(TensorError::shapes("matmul", &sa, &sb));
        }
        let m = self.value(a).len() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), trans_b, &mut out, false);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Array::from_vec(&shape, out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    /// Batched `[B, m, k] · [B, k, n]` (or `[B, n, k]ᵀ` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(TensorError::shapes("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (bk, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != bk {
            return Err(TensorError::shapes("bmm", &sa, &sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Array::from_vec(&[batch, m, n], out)?, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Array::from_vec(&shape, data)?, Op::Add(a, b), rg))
    }

    /// Adds a `[d]` bias along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(TensorError::shapes("add_bias", &sx, &sb));
        }
        let d = sb[0];
        let bv = self.value(bias).data();
        let data: Vec<T> = self.value(x).data().iter().enumerate().map(|(i, v)| *v + bv[i % d]).collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Array::from_vec(&sx, data)?, Op::AddBias { x, bias }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Array::from_vec(&shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|e| *e * factor).collect();
        let out = Array::from_vec(v.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// Softmax along `axis`. Rows that are entirely `-inf` produce zeros.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.check_axis("softmax", x, axis)?;
        let data = softmax_along(self.value(x).data(), &shape, axis);
        let rg = self.rg(x);
        Ok(self.push(Array::from_vec(&shape, data)?, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.check_axis("log_softmax", x, axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for r in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + r;
                let max = (0..n).map(|i| src[idx(i)]).fold(T::neg_infinity(), T::max);
                let lse = max + (0..n).map(|i| (src[idx(i)] - max).exp()).sum::<T>().ln();
                for i in 0..n {
                    out[idx(i)] = src[idx(i)] - lse;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Array::from_vec(&shape, out)?, Op::LogSoftmax { x, axis }, rg))
    }

    /// Layer normalisation over the last axis followed by `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| TensorError::shapes("layer_norm", &sx, &[]))?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::shapes("layer_norm", &sx, self.shape(p)));
            }
        }
        let rows = self.value(x).len() / d.max(1);
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let dn = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * g[i] + b[i];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Array::from_vec(&sx, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|e| gelu(*e)).collect();
        let out = Array::from_vec(v.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Rows of `table[V, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(TensorError::shapes("embedding_gather", &st, &[ids.len()]));
        }
        let (rows, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index { index: bad, bound: rows });
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(Array::from_vec(&[ids.len(), d], out)?, Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    /// Inverted dropout; the identity when `train` is off or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R, train: bool) -> Var {
        if !train || p <= 0.0 {
            return x;
        }
        let keep_scale = T::from_f64_lossy(1.0 / (1.0 - p));
        let v = self.value(x);
        let keep: Vec<T> = (0..v.len()).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep_scale }).collect();
        let data = zip_map(v.data(), &keep, |a, k| a * k);
        let out = Array::from_vec(v.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x, keep }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::shapes("permute", &sx, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let data = permute_data(self.value(x).data(), &sx, perm);
        let rg = self.rg(x);
        Ok(self.push(Array::from_vec(&out_shape, data)?, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::shapes("transpose", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Replaces entries where `mask` is true by `value`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: T) -> Result<Var, TensorError> {
        let v = self.value(x);
        if mask.len() != v.len() {
            return Err(TensorError::shapes("masked_fill", v.shape(), &[mask.len()]));
        }
        let data = v.data().iter().zip(mask).map(|(e, m)| if *m { value } else { *e }).collect();
        let out = Array::from_vec(v.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaskedFill { x, mask: mask.to_vec() }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first =
            parts.first().map(|p| self.shape(*p).to_vec()).ok_or_else(|| TensorError::shapes("concat", &[], &[]))?;
        if axis >= first.len() {
            return Err(TensorError::shapes("concat", &first, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::shapes("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = self.shape(*p)[axis];
                let src = self.value(*p).data();
                out.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Array::from_vec(&shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Array::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::from_usize(v.len().max(1)).unwrap();
        let s = v.data().iter().copied().sum::<T>() / n;
        let rg = self.rg(x);
        self.push(Array::scalar(s), Op::Mean(x), rg)
    }

    /// Summed (not averaged) cross-entropy of `logits[N, V]` against `labels`.
    ///
    /// With smoothing `ε` the target distribution puts `1-ε` on the label and
    /// spreads `ε` uniformly over the remaining `V-1` classes.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: T) -> Result<Var, TensorError> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(TensorError::shapes("cross_entropy", &sl, &[labels.len()]));
        }
        let (rows, v) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= v) {
            return Err(TensorError::Index { index: bad, bound: v });
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); src.len()];
        let off = if v > 1 { smoothing / T::from_usize(v - 1).unwrap() } else { T::zero() };
        let on = T::one() - smoothing;
        let mut total = T::zero();
        for r in 0..rows {
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z = row.iter().map(|x| (*x - max).exp()).sum::<T>();
            let lse = max + z.ln();
            let mut loss = T::zero();
            for (i, x) in row.iter().enumerate() {
                let logp = *x - lse;
                probs[r * v + i] = logp.exp();
                let q = if i == labels[r] { on } else { off };
                if q > T::zero() {
                    loss = loss - q * logp;
                }
            }
            total = total + loss;
        }
        let rg = self.rg(logits);
        Ok(self.push(Array::scalar(total), Op::CrossEntropy { logits, labels: labels.to_vec(), smoothing, probs }, rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Array::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Array<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn accumulate_data(&mut self, v: Var, data: Vec<T>) {
        let shape = self.shape(v).to_vec();
        self.accumulate(v, Array::from_vec(&shape, data).expect("grad shape"));
    }

    fn propagate(&mut self, i: usize, g: &Array<T>) {
        let gd = g.data();
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let sa = self.shape(a).to_vec();
                let k = *sa.last().unwrap();
                let m = self.value(a).len() / k.max(1);
                let n = *g.shape().last().unwrap();
                if self.rg(a) {
                    // dA = dC · Bᵀ   (or dC · B when B was transposed)
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, gd, false, self.value(b).data(), !trans_b, &mut da, false);
                    self.accumulate_data(a, da);
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); k * n];
                    if trans_b {
                        // dB[n,k] = dCᵀ · A
                        T::gemm(n, m, k, gd, true, self.value(a).data(), false, &mut db, false);
                    } else {
                        // dB[k,n] = Aᵀ · dC
                        T::gemm(k, m, n, self.value(a).data(), true, gd, false, &mut db, false);
                    }
                    self.accumulate_data(b, db);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let sa = self.shape(a).to_vec();
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = g.shape()[2];
                if self.rg(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    let bv = self.value(b).data();
                    for t in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            &gd[t * m * n..(t + 1) * m * n],
                            false,
                            &bv[t * k * n..(t + 1) * k * n],
                            !trans_b,
                            &mut da[t * m * k..(t + 1) * m * k],
                            false,
                        );
                    }
                    self.accumulate_data(a, da);
                }
                if self.rg(b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    let av = self.value(a).data();
                    for t in 0..batch {
                        let gs = &gd[t * m * n..(t + 1) * m * n];
                        let as_ = &av[t * m * k..(t + 1) * m * k];
                        let out = &mut db[t * k * n..(t + 1) * k * n];
                        if trans_b {
                            T::gemm(n, m, k, gs, true, as_, false, out, false);
                        } else {
                            T::gemm(k, m, n, as_, true, gs, false, out, false);
                        }
                    }
                    self.accumulate_data(b, db);
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let d = self.shape(bias)[0];
                if self.rg(bias) {
                    let mut db = vec![T::zero(); d];
                    for (i, v) in gd.iter().enumerate() {
                        db[i % d] = db[i % d] + *v;
                    }
                    self.accumulate_data(bias, db);
                }
                self.accumulate(x, g.clone());
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let da = zip_map(gd, self.value(b).data(), |x, y| x * y);
                    self.accumulate_data(a, da);
                }
                if self.rg(b) {
                    let db = zip_map(gd, self.value(a).data(), |x, y| x * y);
                    self.accumulate_data(b, db);
                }
            }
            Op::Scale(x, f) => {
                let (x, f) = (*x, *f);
                let dx = gd.iter().map(|v| *v * f).collect();
                self.accumulate_data(x, dx);
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let y = self.nodes[i].value.data();
                let (outer, n, inner) = split_axis(g.shape(), axis);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + r;
                        let dot = (0..n).map(|j| gd[idx(j)] * y[idx(j)]).sum::<T>();
                        for j in 0..n {
                            dx[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate_data(x, dx);
            }
            Op::LogSoftmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let y = self.nodes[i].value.data();
                let (outer, n, inner) = split_axis(g.shape(), axis);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + r;
                        let gsum = (0..n).map(|j| gd[idx(j)]).sum::<T>();
                        for j in 0..n {
                            dx[idx(j)] = gd[idx(j)] - y[idx(j)].exp() * gsum;
                        }
                    }
                }
                self.accumulate_data(x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = self.shape(gamma)[0];
                let rows = rstd.len();
                let gv = self.value(gamma).data();
                let dn = T::from_usize(d).unwrap();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = vec![T::zero(); rows * d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_h = T::zero();
                    for j in 0..d {
                        dgamma[j] = dgamma[j] + gr[j] * hr[j];
                        dbeta[j] = dbeta[j] + gr[j];
                        dxhat[j] = gr[j] * gv[j];
                        mean_dxhat = mean_dxhat + dxhat[j];
                        mean_dxhat_h = mean_dxhat_h + dxhat[j] * hr[j];
                    }
                    mean_dxhat = mean_dxhat / dn;
                    mean_dxhat_h = mean_dxhat_h / dn;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (dxhat[j] - mean_dxhat - hr[j] * mean_dxhat_h);
                    }
                }
                if self.rg(x) {
                    self.accumulate_data(x, dx);
                }
                if self.rg(gamma) {
                    self.accumulate_data(gamma, dgamma);
                }
                if self.rg(beta) {
                    self.accumulate_data(beta, dbeta);
                }
            }
            Op::Gelu(x) => {
                let x = *x;
                let dx = zip_map(gd, self.value(x).data(), |gv, xv| gv * gelu_grad(xv));
                self.accumulate_data(x, dx);
            }
            Op::Gather { table, ids } => {
                let table = *table;
                let d = self.shape(table)[1];
                let mut dt = vec![T::zero(); self.value(table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] = dt[id * d + j] + gd[r * d + j];
                    }
                }
                self.accumulate_data(table, dt);
            }
            Op::Dropout { x, keep } => {
                let x = *x;
                let dx = zip_map(gd, keep, |a, b| a * b);
                self.accumulate_data(x, dx);
            }
            Op::Reshape(x) => {
                let x = *x;
                self.accumulate_data(x, gd.to_vec());
            }
            Op::Permute { x, perm } => {
                let x = *x;
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let dx = permute_data(gd, g.shape(), &inverse);
                self.accumulate_data(x, dx);
            }
            Op::MaskedFill { x, mask } => {
                let x = *x;
                let dx = gd.iter().zip(mask).map(|(v, m)| if *m { T::zero() } else { *v }).collect();
                self.accumulate_data(x, dx);
            }
            Op::Concat { parts, axis } => {
                let (parts, axis) = (parts.clone(), *axis);
                let (outer, total, inner) = split_axis(g.shape(), axis);
                let mut offset = 0;
                for p in parts {
                    let n = self.shape(p)[axis];
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            dp.extend_from_slice(&gd[start..start + n * inner]);
                        }
                        self.accumulate_data(p, dp);
                    }
                    offset += n;
                }
            }
            Op::Sum(x) => {
                let x = *x;
                let n = self.value(x).len();
                self.accumulate_data(x, vec![gd[0]; n]);
            }
            Op::Mean(x) => {
                let x = *x;
                let n = self.value(x).len();
                let v = gd[0] / T::from_usize(n.max(1)).unwrap();
                self.accumulate_data(x, vec![v; n]);
            }
            Op::CrossEntropy { logits, labels, smoothing, probs } => {
                let logits = *logits;
                let v = self.shape(logits)[1];
                let off = if v > 1 { *smoothing / T::from_usize(v - 1).unwrap() } else { T::zero() };
                let on = T::one() - *smoothing;
                let up = gd[0];
                let mut dl = Vec::with_capacity(probs.len());
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..v {
                        let q = if j == label { on } else { off };
                        dl.push((probs[r * v + j] - q) * up);
                    }
                }
                self.accumulate_data(logits, dl);
            }
        }
        self.nodes[i].op = op;
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shapes(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<Vec<usize>, TensorError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::shapes(op, &s, &[axis]));
        }
        Ok(s)
    }
}

fn zip_map<T: Copy>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

pub(crate) fn softmax_along<T: Element>(src: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for r in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + r;
            let max = (0..n).map(|i| src[idx(i)]).fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                continue;
            }
            let mut z = T::zero();
            for i in 0..n {
                let e = (src[idx(i)] - max).exp();
                out[idx(i)] = e;
                z = z + e;
            }
            for i in 0..n {
                out[idx(i)] = out[idx(i)] / z;
            }
        }
    }
    out
}

fn permute_data<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() || rank == 0 {
        out.extend_from_slice(src);
        return out;
    }
    let inner = out_shape[rank - 1];
    let step = in_strides[perm[rank - 1]];
    let mut idx = vec![0usize; rank - 1];
    for _ in 0..src.len() / inner {
        let base: usize = (0..rank - 1).map(|i| idx[i] * in_strides[perm[i]]).sum();
        if step == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| src[base + j * step]));
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Element>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}
