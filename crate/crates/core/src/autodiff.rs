//! Define-by-run reverse-mode differentiation.
//!
//! Every forward operation appends a node to a [`Tape`]; [`Tape::backward`]
//! walks the nodes in reverse insertion order (which is a topological order
//! by construction) and accumulates vector-Jacobian products. Parameters
//! live in a [`ParamStore`] and enter a tape either as trainable leaves or as
//! frozen constants; frozen networks therefore never receive gradient.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};
use crate::tensor::{gemm, log_sum_exp, softmax_row_into, Tensor};

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

/// Named parameter tensors of one network.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            index: self.index.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        assert_eq!(tensor.rank(), 2, "parameter {name} must be a matrix");
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Overwrite a parameter, keeping its shape.
    pub fn set(&mut self, id: usize, tensor: Tensor) -> Result<()> {
        if tensor.shape() != self.tensors[id].shape() {
            bail!(
                Shape,
                "parameter {} has shape {:?}, got {:?}",
                self.names[id],
                self.tensors[id].shape(),
                tensor.shape()
            );
        }
        self.tensors[id] = tensor;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// How a store's parameters enter a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Trainable,
    Frozen,
}

/// A parameter store bound to a tape mode.
#[derive(Clone, Copy)]
pub struct Bound<'a> {
    pub store: &'a ParamStore,
    pub mode: Mode,
}

impl<'a> Bound<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self { store, mode: Mode::Trainable }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self { store, mode: Mode::Frozen }
    }

    pub fn var(&self, tape: &mut Tape, id: usize) -> Var {
        tape.param(self.store, id, self.mode == Mode::Trainable)
    }
}

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param { uid: u64, id: usize },
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    Affine { a: Var, mul: f32 },
    Gelu(Var),
    Sigmoid(Var),
    LogClamp { a: Var, floor: f32 },
    Softmax(Var),
    CausalSoftmax(Var),
    LayerNorm { a: Var, inv_std: Vec<f32> },
    Gather { table: Var, ids: Vec<u32> },
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RepeatRows(Var),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<u32>, probs: Vec<f32> },
    SoftCrossEntropy { logits: Var, teacher: Vec<f32>, probs: Vec<f32> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param { .. } => "param",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::MulRow { .. } => "mul_row",
            Op::Affine { .. } => "affine",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogClamp { .. } => "log",
            Op::Softmax(_) => "softmax",
            Op::CausalSoftmax(_) => "causal_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::RepeatRows(_) => "repeat_rows",
            Op::MeanRows(_) => "mean_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SoftCrossEntropy { .. } => "soft_cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of trainable parameters, keyed by store.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<(u64, usize), Tensor>,
}

impl Gradients {
    pub fn get(&self, store: &ParamStore, id: usize) -> Option<&Tensor> {
        self.by_param.get(&(store.uid(), id))
    }

    /// Gradient for every parameter of `store`; unreachable or frozen
    /// parameters read as zeros.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        (0..store.len())
            .map(|id| match self.get(store, id) {
                Some(g) => g.clone(),
                None => Tensor::zeros(store.get(id).shape()),
            })
            .collect()
    }

    /// Largest absolute gradient entry over the store.
    pub fn max_abs(&self, store: &ParamStore) -> f32 {
        (0..store.len())
            .filter_map(|id| self.get(store, id))
            .flat_map(|g| g.data().iter().map(|v| v.abs()))
            .fold(0.0, f32::max)
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
    consumed: bool,
    non_finite: Option<&'static str>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    t.dims2().expect("tape tensors are matrices")
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), consumed: false, non_finite: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        dims(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First operation that produced a NaN or infinity, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some(op) => Err(Error::NonFinite(op.to_string())),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = Some(op.name());
        }
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input (never receives gradient).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        if value.rank() != 2 {
            bail!(Shape, "tape values are matrices, got {:?}", value.shape());
        }
        Ok(self.push(value, Op::Leaf, false))
    }

    /// Trainable free-standing leaf; its gradient is read with
    /// [`Tape::backward_vars`].
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        if value.rank() != 2 {
            bail!(Shape, "tape values are matrices, got {:?}", value.shape());
        }
        Ok(self.push(value, Op::Leaf, true))
    }

    pub fn param(&mut self, store: &ParamStore, id: usize, trainable: bool) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let value = store.get(id).clone();
        let op = if trainable { Op::Param { uid: key.0, id } } else { Op::Leaf };
        let v = self.push(value, op, trainable);
        self.params.insert(key, v);
        v
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            bail!(Shape, "matmul inner dims disagree: [{m}×{k}] · [{kb}×{n}]");
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), trans_b, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_rows(m, n, out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::from_rows(n, m, out).unwrap(), Op::Transpose(a), rg)
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            bail!(Shape, "{}: shapes {:?} and {:?} differ", op.name(), self.shape(a), self.shape(b));
        }
        let (m, n) = self.shape(a);
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_rows(m, n, out)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(
        &mut self,
        a: Var,
        row: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(row) != (1, n) {
            bail!(Shape, "{}: row {:?} does not broadcast over [{m}×{n}]", op.name(), self.shape(row));
        }
        let r = self.value(row).data();
        let out: Vec<f32> = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| f(x, y)))
            .collect();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::from_rows(m, n, out)?, op, rg))
    }

    /// `a + row` with `row: [1×n]` broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, |x, y| x + y, Op::AddRow { a, row })
    }

    /// `a ⊙ row` with `row: [1×n]` broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, |x, y| x * y, Op::MulRow { a, row })
    }

    /// `mul · a + add`.
    pub fn affine(&mut self, a: Var, mul: f32, add: f32) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).data().iter().map(|&x| mul * x + add).collect();
        let rg = self.rg(a);
        self.push(Tensor::from_rows(m, n, out).unwrap(), Op::Affine { a, mul }, rg)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        self.affine(a, s, 0.0)
    }

    fn map(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let (m, n) = self.shape(a);
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(Tensor::from_rows(m, n, out).unwrap(), op, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(max(a, floor))`; the gradient is zero where the floor binds.
    pub fn log_clamped(&mut self, a: Var, floor: f32) -> Var {
        self.map(a, |x| x.max(floor).ln(), Op::LogClamp { a, floor })
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut out = vec![0.0; m * n];
        for (row, o) in self.value(a).data().chunks(n).zip(out.chunks_mut(n)) {
            softmax_row_into(row, o);
        }
        let rg = self.rg(a);
        self.push(Tensor::from_rows(m, n, out).unwrap(), Op::Softmax(a), rg)
    }

    /// Row-wise softmax of a square score matrix where row `t` only sees
    /// columns `0..=t`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if m != n {
            bail!(Shape, "causal_softmax needs square scores, got [{m}×{n}]");
        }
        let mut out = vec![0.0; m * n];
        let src = self.value(a).data();
        for t in 0..m {
            softmax_row_into(&src[t * n..t * n + t + 1], &mut out[t * n..t * n + t + 1]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_rows(m, n, out)?, Op::CausalSoftmax(a), rg))
    }

    /// Per-row normalisation `(x − μ)/√(σ² + ε)` without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f32) -> Var {
        let (m, n) = self.shape(a);
        let mut out = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for (r, (row, o)) in self.value(a).data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / n as f32;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (oo, &x) in o.iter_mut().zip(row) {
                *oo = (x - mean) * is;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::from_rows(m, n, out).unwrap(), Op::LayerNorm { a, inv_std }, rg)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, n) = self.shape(table);
        if ids.is_empty() {
            bail!(Shape, "gather with no indices");
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                bail!(Index, "row {id} out of range for table with {v} rows");
            }
            out.extend_from_slice(&src[id * n..(id + 1) * n]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_rows(ids.len(), n, out)?,
            Op::Gather { table, ids: ids.to_vec() },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if len == 0 || start + len > n {
            bail!(Shape, "column slice {start}..{} out of range for {n}", start + len);
        }
        let out: Vec<f32> = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_rows(m, len, out)?, Op::SliceCols { a, start }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if len == 0 || start + len > m {
            bail!(Shape, "row slice {start}..{} out of range for {m}", start + len);
        }
        let out = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_rows(len, n, out)?, Op::SliceRows { a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else { bail!(Shape, "concat of nothing") };
        let m = self.shape(first).0;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            if pm != m {
                bail!(Shape, "concat_cols row counts differ: {m} vs {pm}");
            }
            total += pn;
        }
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_rows(m, total, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else { bail!(Shape, "concat of nothing") };
        let n = self.shape(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            if pn != n {
                bail!(Shape, "concat_rows column counts differ: {n} vs {pn}");
            }
            rows += pm;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_rows(rows, n, out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Broadcast a `[1×n]` row into `[times×n]`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if m != 1 || times == 0 {
            bail!(Shape, "repeat_rows expects a single row and times ≥ 1");
        }
        let row = self.value(a).data().to_vec();
        let out = row.iter().copied().cycle().take(times * n).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_rows(times, n, out)?, Op::RepeatRows(a), rg))
    }

    /// Column means: `[m×n] → [1×n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks(n) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = 1.0 / m as f32;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(a);
        self.push(Tensor::row(out), Op::MeanRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f32>() / t.numel() as f32;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean over rows of `−log softmax(logits_t)[target_t]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let (t, v) = self.shape(logits);
        if targets.len() != t {
            bail!(Shape, "{} targets for {t} logit rows", targets.len());
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0f32;
        for (r, &y) in targets.iter().enumerate() {
            let y = y as usize;
            if y >= v {
                bail!(Index, "target {y} outside vocabulary of {v}");
            }
            let row = &src[r * v..(r + 1) * v];
            loss += log_sum_exp(row) - row[y];
            softmax_row_into(row, &mut probs[r * v..(r + 1) * v]);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / t as f32),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Mean over rows of `−Σ_v teacher[t,v] · log softmax(student)[t,v]`.
    /// The teacher is a constant distribution.
    pub fn soft_cross_entropy(&mut self, teacher: &Tensor, student_logits: Var) -> Result<Var> {
        let (t, v) = self.shape(student_logits);
        if teacher.dims2()? != (t, v) {
            bail!(Shape, "teacher {:?} vs student [{t}×{v}]", teacher.shape());
        }
        for (r, row) in teacher.data().chunks(v).enumerate() {
            let s: f32 = row.iter().sum();
            if (s - 1.0).abs() > 1e-4 || row.iter().any(|&p| p < 0.0) {
                bail!(Contract, "teacher row {r} is not a distribution (sum {s})");
            }
        }
        let src = self.value(student_logits).data();
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0f32;
        for r in 0..t {
            let row = &src[r * v..(r + 1) * v];
            let lse = log_sum_exp(row);
            let trow = &teacher.data()[r * v..(r + 1) * v];
            loss += trow.iter().zip(row).map(|(&p, &x)| p * (lse - x)).sum::<f32>();
            softmax_row_into(row, &mut probs[r * v..(r + 1) * v]);
        }
        let rg = self.rg(student_logits);
        Ok(self.push(
            Tensor::scalar(loss / t as f32),
            Op::SoftCrossEntropy {
                logits: student_logits,
                teacher: teacher.data().to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. A tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let grads = self.sweep(loss)?;
        let mut by_param = HashMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Param { uid, id }) = (g, &self.nodes[i].op) {
                let (m, n) = dims(&self.nodes[i].value);
                by_param.insert((*uid, *id), Tensor::from_rows(m, n, g)?);
            }
        }
        Ok(Gradients { by_param })
    }

    /// Like [`Tape::backward`] but returns the gradients of arbitrary nodes,
    /// e.g. trainable leaves created with [`Tape::leaf`].
    pub fn backward_vars(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let mut grads = self.sweep(loss)?;
        wrt.iter()
            .map(|&v| {
                let (m, n) = self.shape(v);
                let g = grads[v.0].take().unwrap_or_else(|| vec![0.0; m * n]);
                Tensor::from_rows(m, n, g)
            })
            .collect()
    }

    fn sweep(&mut self, loss: Var) -> Result<Vec<Option<Vec<f32>>>> {
        if self.consumed {
            bail!(Usage, "backward already ran on this tape");
        }
        if self.value(loss).numel() != 1 {
            bail!(Usage, "backward needs a scalar loss, got {:?}", self.value(loss).shape());
        }
        self.check_finite()?;
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Param { .. } | Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let val = node.value.data();
        let (om, on) = dims(&node.value);
        let nodes = &self.nodes;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = dims(&nodes[a.0].value);
                let n = on;
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if rg(*a) {
                    // dA = dC · op(B)ᵀ
                    acc(*a, &mut |ga| gemm(m, n, k, g, false, bv, !*trans_b, ga, true));
                }
                if rg(*b) {
                    if *trans_b {
                        // B is n×k: dB = dCᵀ · A
                        acc(*b, &mut |gb| gemm(n, m, k, g, true, av, false, gb, true));
                    } else {
                        // dB = Aᵀ · dC
                        acc(*b, &mut |gb| gemm(k, m, n, av, true, g, false, gb, true));
                    }
                }
            }
            Op::Transpose(a) => acc(*a, &mut |ga| {
                // a is on×om
                for r in 0..om {
                    for c in 0..on {
                        ga[c * om + r] += g[r * on + c];
                    }
                }
            }),
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(*a, &mut |ga| {
                    for ((x, gg), y) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gg * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gg), y) in gb.iter_mut().zip(g).zip(av) {
                        *x += gg * y;
                    }
                });
            }
            Op::AddRow { a, row } => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*row, &mut |gr| {
                    for grow in g.chunks(on) {
                        add_into(gr, grow);
                    }
                });
            }
            Op::MulRow { a, row } => {
                let av = nodes[a.0].value.data();
                let rv = nodes[row.0].value.data();
                acc(*a, &mut |ga| {
                    for (gachunk, gchunk) in ga.chunks_mut(on).zip(g.chunks(on)) {
                        for ((x, gg), r) in gachunk.iter_mut().zip(gchunk).zip(rv) {
                            *x += gg * r;
                        }
                    }
                });
                acc(*row, &mut |gr| {
                    for (achunk, gchunk) in av.chunks(on).zip(g.chunks(on)) {
                        for ((x, gg), a) in gr.iter_mut().zip(gchunk).zip(achunk) {
                            *x += gg * a;
                        }
                    }
                });
            }
            Op::Affine { a, mul } => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(x, gg)| *x += mul * gg);
            }),
            Op::Gelu(a) => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for ((x, gg), &inp) in ga.iter_mut().zip(g).zip(av) {
                        *x += gg * gelu_grad(inp);
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((x, gg), y) in ga.iter_mut().zip(g).zip(val) {
                    *x += gg * y * (1.0 - y);
                }
            }),
            Op::LogClamp { a, floor } => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |ga| {
                    for ((x, gg), &inp) in ga.iter_mut().zip(g).zip(av) {
                        if inp > *floor {
                            *x += gg / inp;
                        }
                    }
                });
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => acc(*a, &mut |ga| {
                for ((gachunk, gchunk), ychunk) in
                    ga.chunks_mut(on).zip(g.chunks(on)).zip(val.chunks(on))
                {
                    let dot: f32 = gchunk.iter().zip(ychunk).map(|(x, y)| x * y).sum();
                    for ((x, gg), y) in gachunk.iter_mut().zip(gchunk).zip(ychunk) {
                        *x += y * (gg - dot);
                    }
                }
            }),
            Op::LayerNorm { a, inv_std } => acc(*a, &mut |ga| {
                let nf = on as f32;
                for (r, ((gachunk, gchunk), xhat)) in
                    ga.chunks_mut(on).zip(g.chunks(on)).zip(val.chunks(on)).enumerate()
                {
                    let mean_g: f32 = gchunk.iter().sum::<f32>() / nf;
                    let mean_gx: f32 =
                        gchunk.iter().zip(xhat).map(|(x, y)| x * y).sum::<f32>() / nf;
                    for ((x, gg), xh) in gachunk.iter_mut().zip(gchunk).zip(xhat) {
                        *x += inv_std[r] * (gg - mean_g - xh * mean_gx);
                    }
                }
            }),
            Op::Gather { table, ids } => acc(*table, &mut |gt| {
                for (r, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    add_into(&mut gt[id * on..(id + 1) * on], &g[r * on..(r + 1) * on]);
                }
            }),
            Op::SliceCols { a, start } => {
                let an = dims(&nodes[a.0].value).1;
                acc(*a, &mut |ga| {
                    for (r, gchunk) in g.chunks(on).enumerate() {
                        add_into(&mut ga[r * an + start..r * an + start + on], gchunk);
                    }
                });
            }
            Op::SliceRows { a, start } => acc(*a, &mut |ga| {
                add_into(&mut ga[start * on..(start + om) * on], g);
            }),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pn = dims(&nodes[p.0].value).1;
                    acc(p, &mut |gp| {
                        for r in 0..om {
                            add_into(
                                &mut gp[r * pn..(r + 1) * pn],
                                &g[r * on + offset..r * on + offset + pn],
                            );
                        }
                    });
                    offset += pn;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::RepeatRows(a) => acc(*a, &mut |ga| {
                for gchunk in g.chunks(on) {
                    add_into(ga, gchunk);
                }
            }),
            Op::MeanRows(a) => {
                let m = dims(&nodes[a.0].value).0;
                let inv = 1.0 / m as f32;
                acc(*a, &mut |ga| {
                    for gachunk in ga.chunks_mut(on) {
                        for (x, gg) in gachunk.iter_mut().zip(g) {
                            *x += gg * inv;
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.numel() as f32;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = dims(&nodes[logits.0].value).1;
                let scale = g[0] / targets.len() as f32;
                acc(*logits, &mut |gl| {
                    for (r, &y) in targets.iter().enumerate() {
                        let row = &mut gl[r * v..(r + 1) * v];
                        for (x, p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *x += scale * p;
                        }
                        row[y as usize] -= scale;
                    }
                });
            }
            Op::SoftCrossEntropy { logits, teacher, probs } => {
                let t = dims(&nodes[logits.0].value).0;
                let scale = g[0] / t as f32;
                acc(*logits, &mut |gl| {
                    for ((x, p), q) in gl.iter_mut().zip(probs).zip(teacher) {
                        *x += scale * (p - q);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f32 = 0.797_884_6; // √(2/π)

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
