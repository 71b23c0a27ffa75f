use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{gemm, Param, Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Which named parameters receive gradients when bound to a tape.
#[derive(Clone, Debug, Default)]
pub enum Learnable {
    #[default]
    None,
    All,
    Set(Arc<HashSet<String>>),
}

impl Learnable {
    pub fn contains(&self, name: &str) -> bool {
        match self {
            Learnable::None => false,
            Learnable::All => true,
            Learnable::Set(set) => set.contains(name),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add { a: usize, b: usize },
    AddRow { a: usize, bias: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, s: f64 },
    MaskMul { a: usize, mask: Vec<f64> },
    SoftmaxRows { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { a: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    Gather { a: usize, index: Arc<Vec<usize>> },
    Reshape { a: usize },
    Sum { a: usize },
    NormalizeRows { a: usize, norms: Vec<f64> },
    ArcMargin { cos: usize, label: usize, margin: f64, linear: bool },
    CrossEntropy { logits: usize, label: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: Vec<(usize, Tensor)>,
    params: Vec<(String, Tensor)>,
}

impl Gradients {
    /// Gradient of a leaf that was created with `requires_grad`.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.iter().find(|(i, _)| *i == var.idx).map(|(_, g)| g)
    }

    /// Gradients of bound learnable parameters, in binding order. A parameter
    /// bound more than once appears once with its contributions summed.
    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(String, Tensor)> {
        self.params
    }
}

/// Operation record for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the list is topologically
/// sorted by construction. [`Tape::backward`] walks it once in reverse and
/// then clears the tape; every `Var` issued before the clear becomes detached.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    learnable: Learnable,
    bound: Vec<(String, usize)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const C: f64 = 0.044_715;
    let inner = K * (x + C * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = K * (1.0 + 3.0 * C * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

impl Tape {
    /// A tape on which no parameter is learnable (inference).
    pub fn new() -> Self {
        Self::with_learnable(Learnable::None)
    }

    pub fn with_learnable(learnable: Learnable) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            learnable,
            bound: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Outstanding `Var`s become detached.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.bound.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::Detached);
        }
        Ok(v.idx)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(self.val(self.idx(v)?))
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.nodes[self.idx(v)?].requires_grad)
    }

    fn push(&mut self, value: Tensor, inputs: &[usize], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push_shared(Arc::new(value), requires_grad, op)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a named parameter as a leaf; it requires grad iff the tape's
    /// learnable set contains its name.
    pub fn param(&mut self, p: &Param) -> Var {
        let learn = self.learnable.contains(p.name());
        let v = self.push_shared(p.shared(), learn, Op::Leaf);
        if learn {
            self.bound.push((p.name().to_string(), v.idx));
        }
        v
    }

    fn matmul_general(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (self.val(ia), self.val(ib));
        let (ar, ac) = av.dims2()?;
        let (br, bc) = bv.dims2()?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(av.data(), ta, bv.data(), tb, &mut out, m, k, n, 1.0, 0.0);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, &[ia, ib], Op::MatMul { a: ia, b: ib, ta, tb }))
    }

    /// `a · b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false, false)
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = self.val(ia).add(self.val(ib))?;
        Ok(self.push(value, &[ia, ib], Op::Add { a: ia, b: ib }))
    }

    /// Adds a length-`c` bias to every row of an `[r×c]` tensor.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let (av, bv) = (self.val(ia), self.val(ib));
        let (_, c) = av.dims2()?;
        if bv.len() != c {
            return Err(shape_err("add_row", av, bv));
        }
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(av.shape(), out)?;
        Ok(self.push(value, &[ia, ib], Op::AddRow { a: ia, bias: ib }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (self.val(ia), self.val(ib));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av, bv));
        }
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape(), out)?;
        Ok(self.push(value, &[ia, ib], Op::Mul { a: ia, b: ib }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.val(ia).scale(s);
        Ok(self.push(value, &[ia], Op::Scale { a: ia, s }))
    }

    /// Elementwise product with a constant mask (used by dropout).
    pub fn mask_mul(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let ia = self.idx(a)?;
        let av = self.val(ia);
        if mask.len() != av.len() {
            return Err(TensorError::Invalid(format!(
                "mask of length {} for tensor {:?}",
                mask.len(),
                av.shape()
            )));
        }
        let out = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(av.shape(), out)?;
        Ok(self.push(value, &[ia], Op::MaskMul { a: ia, mask }))
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let av = self.val(ia);
        let (_, c) = av.dims2()?;
        if !av.is_finite() {
            return Err(TensorError::NonFinite("softmax_rows"));
        }
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(av.shape(), out)?;
        Ok(self.push(value, &[ia], Op::SoftmaxRows { a: ia }))
    }

    /// Standardises each vector along the last dimension (eps = 1e-5) and
    /// applies the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (xv, gv, bv) = (self.val(ix), self.val(ig), self.val(ib));
        let c = *xv.shape().last().ok_or(TensorError::Rank {
            op: "layer_norm",
            expected: 1,
            got: vec![],
        })?;
        if gv.len() != c || bv.len() != c {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            value,
            &[ix, ig, ib],
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.val(ia).map(|x| gelu_parts(x).0);
        Ok(self.push(value, &[ia], Op::Gelu { a: ia }))
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let first = self.val(*idx.first().ok_or_else(|| {
            TensorError::Invalid("concat_rows of nothing".into())
        })?);
        let (_, c) = first.dims2()?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &i in &idx {
            let v = self.val(i);
            let (r, c2) = v.dims2()?;
            if c2 != c {
                return Err(shape_err("concat_rows", first, v));
            }
            rows += r;
            out.extend_from_slice(v.data());
        }
        let value = Tensor::new(&[rows, c], out)?;
        Ok(self.push(value, &idx, Op::ConcatRows { parts: idx.clone() }))
    }

    /// Joins rank-2 tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let first = self.val(*idx.first().ok_or_else(|| {
            TensorError::Invalid("concat_cols of nothing".into())
        })?);
        let (r, _) = first.dims2()?;
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let v = self.val(i);
            let (r2, c) = v.dims2()?;
            if r2 != r {
                return Err(shape_err("concat_cols", first, v));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for (&i, &w) in idx.iter().zip(&widths) {
            let v = self.val(i);
            for row in 0..r {
                out[row * total + offset..row * total + offset + w]
                    .copy_from_slice(&v.data()[row * w..(row + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::new(&[r, total], out)?;
        Ok(self.push(value, &idx, Op::ConcatCols { parts: idx.clone() }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let av = self.val(ia);
        let (r, c) = av.dims2()?;
        if start + len > r {
            return Err(TensorError::OutOfBounds {
                op: "slice_rows",
                start,
                end: start + len,
                extent: r,
            });
        }
        let value = Tensor::new(&[len, c], av.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(value, &[ia], Op::SliceRows { a: ia, start }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let av = self.val(ia);
        let (r, c) = av.dims2()?;
        if start + len > c {
            return Err(TensorError::OutOfBounds {
                op: "slice_cols",
                start,
                end: start + len,
                extent: c,
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&av.data()[row * c + start..row * c + start + len]);
        }
        let value = Tensor::new(&[r, len], out)?;
        Ok(self.push(value, &[ia], Op::SliceCols { a: ia, start }))
    }

    /// `out.flat[i] = a.flat[index[i]]`, shaped as `shape`.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let av = self.val(ia);
        if let Some(&bad) = index.iter().find(|&&i| i >= av.len()) {
            return Err(TensorError::OutOfBounds {
                op: "gather",
                start: bad,
                end: bad + 1,
                extent: av.len(),
            });
        }
        let out = index.iter().map(|&i| av.data()[i]).collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, &[ia], Op::Gather { a: ia, index }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.val(ia).clone().reshape(shape)?;
        Ok(self.push(value, &[ia], Op::Reshape { a: ia }))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = Tensor::scalar(self.val(ia).sum());
        Ok(self.push(value, &[ia], Op::Sum { a: ia }))
    }

    /// Scales every row to unit L2 norm. Rows with zero norm are rejected.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let av = self.val(ia);
        let (_, c) = av.dims2()?;
        let mut out = av.data().to_vec();
        let mut norms = Vec::with_capacity(av.len() / c.max(1));
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(TensorError::Invalid("cannot normalise a zero-norm row".into()));
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let value = Tensor::new(av.shape(), out)?;
        Ok(self.push(value, &[ia], Op::NormalizeRows { a: ia, norms }))
    }

    /// Replaces the cosine at `label` in a `[1×K]` row by `cos(θ + m)`.
    ///
    /// When `θ + m` would pass π the margin function stops being monotone in
    /// θ, so beyond `cos θ <= cos(π − m)` the target logit becomes
    /// `cos θ − m·sin(π − m)` instead.
    pub fn arc_margin(&mut self, cos: Var, label: usize, margin: f64) -> Result<Var> {
        let ic = self.idx(cos)?;
        let cv = self.val(ic);
        if label >= cv.len() {
            return Err(TensorError::OutOfBounds {
                op: "arc_margin",
                start: label,
                end: label + 1,
                extent: cv.len(),
            });
        }
        let c = cv.data()[label];
        let threshold = (std::f64::consts::PI - margin).cos();
        let linear = c <= threshold;
        let target = if linear {
            c - margin * (std::f64::consts::PI - margin).sin()
        } else {
            let s = (1.0 - c * c).max(0.0).sqrt();
            c * margin.cos() - s * margin.sin()
        };
        let mut out = cv.clone();
        out.data_mut()[label] = target;
        Ok(self.push(
            out,
            &[ic],
            Op::ArcMargin {
                cos: ic,
                label,
                margin,
                linear,
            },
        ))
    }

    /// `-log softmax(logits)[label]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let il = self.idx(logits)?;
        let lv = self.val(il);
        if label >= lv.len() {
            return Err(TensorError::OutOfBounds {
                op: "cross_entropy",
                start: label,
                end: label + 1,
                extent: lv.len(),
            });
        }
        if !lv.is_finite() {
            return Err(TensorError::NonFinite("cross_entropy"));
        }
        let max = lv.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = lv.data().iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let loss = total.ln() + max - lv.data()[label];
        let probs = exps.iter().map(|e| e / total).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            &[il],
            Op::CrossEntropy {
                logits: il,
                label,
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every leaf
    /// that requires one and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        if self.val(il).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.val(il).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; il + 1];
        let mut out = Gradients::default();
        if self.nodes[il].requires_grad {
            grads[il] = Some(Tensor::ones(self.val(il).shape()));
        }
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, g, &mut grads, &mut out.leaves)?;
        }
        for (name, idx) in &self.bound {
            let Some(pos) = out.leaves.iter().position(|(i, _)| i == idx) else {
                continue;
            };
            let g = out.leaves[pos].1.clone();
            match out.params.iter_mut().find(|(n, _)| n == name) {
                Some((_, acc)) => acc.add_assign(&g),
                None => out.params.push((name.clone(), g)),
            }
        }
        self.reset();
        Ok(out)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        leaves: &mut Vec<(usize, Tensor)>,
    ) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => leaves.push((i, g)),
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.val(a), self.val(b));
                let (m, n) = g.dims2()?;
                let k = if ta { av.shape()[0] } else { av.shape()[1] };
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    if ta {
                        // stored k×m: op(B)·gᵀ
                        gemm(bv.data(), tb, g.data(), true, &mut da, k, n, m, 1.0, 0.0);
                    } else {
                        gemm(g.data(), false, bv.data(), !tb, &mut da, m, n, k, 1.0, 0.0);
                    }
                    accumulate(grads, a, Tensor::new(av.shape(), da)?);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    if tb {
                        // stored n×k: gᵀ·op(A)
                        gemm(g.data(), true, av.data(), ta, &mut db, n, m, k, 1.0, 0.0);
                    } else {
                        gemm(av.data(), !ta, g.data(), false, &mut db, k, m, n, 1.0, 0.0);
                    }
                    accumulate(grads, b, Tensor::new(bv.shape(), db)?);
                }
            }
            &Op::Add { a, b } => {
                if self.needs(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.needs(b) {
                    accumulate(grads, b, g);
                }
            }
            &Op::AddRow { a, bias } => {
                if self.needs(bias) {
                    let bshape = self.val(bias).shape().to_vec();
                    let c = self.val(bias).len();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, bias, Tensor::new(&bshape, db)?);
                }
                if self.needs(a) {
                    accumulate(grads, a, g);
                }
            }
            &Op::Mul { a, b } => {
                if self.needs(a) {
                    let d = g.data().iter().zip(self.val(b).data()).map(|(x, y)| x * y);
                    accumulate(grads, a, Tensor::new(g.shape(), d.collect())?);
                }
                if self.needs(b) {
                    let d = g.data().iter().zip(self.val(a).data()).map(|(x, y)| x * y);
                    accumulate(grads, b, Tensor::new(g.shape(), d.collect())?);
                }
            }
            &Op::Scale { a, s } => {
                if self.needs(a) {
                    accumulate(grads, a, g.scale(s));
                }
            }
            Op::MaskMul { a, mask } => {
                if self.needs(*a) {
                    let d = g.data().iter().zip(mask).map(|(x, m)| x * m).collect();
                    accumulate(grads, *a, Tensor::new(g.shape(), d)?);
                }
            }
            &Op::SoftmaxRows { a } => {
                if self.needs(a) {
                    let y = &node.value;
                    let c = *y.shape().last().unwrap_or(&1);
                    let mut d = vec![0.0; y.len()];
                    for ((dr, yr), gr) in d
                        .chunks_mut(c)
                        .zip(y.data().chunks(c))
                        .zip(g.data().chunks(c))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(grads, a, Tensor::new(y.shape(), d)?);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.val(*gamma);
                let c = gv.len();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (gr, hr) in g.data().chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    if self.needs(*gamma) {
                        accumulate(grads, *gamma, Tensor::new(gv.shape(), dg)?);
                    }
                    if self.needs(*beta) {
                        accumulate(grads, *beta, Tensor::new(self.val(*beta).shape(), db)?);
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let cf = c as f64;
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g.data()[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut sum_gh = 0.0;
                        let mut sum_ghx = 0.0;
                        for j in 0..c {
                            let gh = gr[j] * gv.data()[j];
                            sum_gh += gh;
                            sum_ghx += gh * hr[j];
                        }
                        for j in 0..c {
                            let gh = gr[j] * gv.data()[j];
                            dx[r * c + j] = rs / cf * (cf * gh - sum_gh - hr[j] * sum_ghx);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(g.shape(), dx)?);
                }
            }
            &Op::Gelu { a } => {
                if self.needs(a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(self.val(a).data())
                        .map(|(gv, &x)| gv * gelu_parts(x).1)
                        .collect();
                    accumulate(grads, a, Tensor::new(g.shape(), d)?);
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.val(p).len();
                    if self.needs(p) {
                        let d = g.data()[offset..offset + len].to_vec();
                        accumulate(grads, p, Tensor::new(self.val(p).shape(), d)?);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols { parts } => {
                let (r, total) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.val(p).shape()[1];
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(r * w);
                        for row in 0..r {
                            d.extend_from_slice(
                                &g.data()[row * total + offset..row * total + offset + w],
                            );
                        }
                        accumulate(grads, p, Tensor::new(&[r, w], d)?);
                    }
                    offset += w;
                }
            }
            &Op::SliceRows { a, start } => {
                if self.needs(a) {
                    let av = self.val(a);
                    let c = av.shape()[1];
                    let mut d = vec![0.0; av.len()];
                    d[start * c..start * c + g.len()].copy_from_slice(g.data());
                    accumulate(grads, a, Tensor::new(av.shape(), d)?);
                }
            }
            &Op::SliceCols { a, start } => {
                if self.needs(a) {
                    let av = self.val(a);
                    let (r, c) = av.dims2()?;
                    let w = g.shape()[1];
                    let mut d = vec![0.0; av.len()];
                    for row in 0..r {
                        d[row * c + start..row * c + start + w]
                            .copy_from_slice(&g.data()[row * w..(row + 1) * w]);
                    }
                    accumulate(grads, a, Tensor::new(av.shape(), d)?);
                }
            }
            Op::Gather { a, index } => {
                if self.needs(*a) {
                    let av = self.val(*a);
                    let mut d = vec![0.0; av.len()];
                    for (gv, &j) in g.data().iter().zip(index.iter()) {
                        d[j] += gv;
                    }
                    accumulate(grads, *a, Tensor::new(av.shape(), d)?);
                }
            }
            &Op::Reshape { a } => {
                if self.needs(a) {
                    accumulate(grads, a, g.reshape(self.val(a).shape())?);
                }
            }
            &Op::Sum { a } => {
                if self.needs(a) {
                    accumulate(grads, a, Tensor::full(self.val(a).shape(), g.item()));
                }
            }
            Op::NormalizeRows { a, norms } => {
                if self.needs(*a) {
                    let y = &node.value;
                    let c = y.shape()[1];
                    let mut d = vec![0.0; y.len()];
                    for (r, n) in norms.iter().enumerate() {
                        let yr = &y.data()[r * c..(r + 1) * c];
                        let gr = &g.data()[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            d[r * c + j] = (gr[j] - yr[j] * dot) / n;
                        }
                    }
                    accumulate(grads, *a, Tensor::new(y.shape(), d)?);
                }
            }
            &Op::ArcMargin {
                cos,
                label,
                margin,
                linear,
            } => {
                if self.needs(cos) {
                    let c = self.val(cos).data()[label];
                    let slope = if linear {
                        1.0
                    } else {
                        let s = (1.0 - c * c).max(1e-300).sqrt();
                        margin.cos() + margin.sin() * c / s
                    };
                    let mut d = g.clone();
                    d.data_mut()[label] *= slope;
                    accumulate(grads, cos, d);
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                if self.needs(*logits) {
                    let scale = g.item();
                    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    d[*label] -= scale;
                    accumulate(grads, *logits, Tensor::new(self.val(*logits).shape(), d)?);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap(), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_sum_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let data = vec![1.0, -2.0, 3.0];
        let x = tape.leaf(Tensor::new(&[1, 3], data.clone()).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        let want: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap().data(), &want[..]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn detached_variables_rejected() {
        let mut other = Tape::new();
        let foreign = other.leaf(Tensor::scalar(1.0), true);
        let mut tape = Tape::new();
        assert_eq!(tape.backward(foreign).unwrap_err(), TensorError::Detached);

        let x = tape.leaf(Tensor::new(&[1, 1], vec![2.0]).unwrap(), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        // backward clears the tape
        assert!(tape.is_empty());
        assert_eq!(tape.sum(x).unwrap_err(), TensorError::Detached);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::eye(2), false);
        let b = tape.leaf(Tensor::ones(&[2, 2]), true);
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).is_none());
        assert!(g.get(b).is_some());
    }

    #[test]
    fn softmax_closed_form_and_shift_invariance() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2], vec![0.0, 3f64.ln()]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y).unwrap().data().to_vec();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);

        let row = vec![0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = row.iter().map(|v| v + 17.0).collect();
        let a = tape.constant(Tensor::new(&[1, 4], row).unwrap());
        let b = tape.constant(Tensor::new(&[1, 4], shifted).unwrap());
        let ya = tape.softmax_rows(a).unwrap();
        let yb = tape.softmax_rows(b).unwrap();
        let diff = tape.value(ya).unwrap().max_abs_diff(tape.value(yb).unwrap());
        assert!(diff < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2], vec![f64::NAN, 0.0]).unwrap());
        assert_eq!(
            tape.softmax_rows(x).unwrap_err(),
            TensorError::NonFinite("softmax_rows")
        );
    }

    #[test]
    fn shared_param_gradients_are_summed() {
        let p = Param::new("w", Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let mut tape = Tape::with_learnable(Learnable::All);
        let a = tape.param(&p);
        let b = tape.param(&p);
        let s = tape.add(a, b).unwrap();
        let s = tape.sum(s).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.params().len(), 1);
        assert_eq!(g.params()[0].1.data(), &[2.0, 2.0]);
    }
}
