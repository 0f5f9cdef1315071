//! Reverse-mode autodiff tape over tensors.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; [`backward`]
//! walks it once in reverse and accumulates gradients. Tapes are rebuilt per
//! forward pass and are not shared across threads (the handle is an `Rc`).
//! Gradients for embedding tables reached only through row gathers stay
//! sparse ([`Grad::Rows`]) so a batch never materializes dense table-sized
//! buffers per instance.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::conv::{self, ConvBackend};
use crate::fft::FftPlan;
use crate::tensor::{matmul_nt, matmul_tn, Tensor, TensorError};

/// Predictions are clamped to [EPS, 1 - EPS] inside the cross-entropy op so
/// the loss stays finite at hard 0/1 outputs.
const BCE_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    SoftmaxLast {
        x: usize,
        temperature: f64,
    },
    GatherRows {
        table: usize,
        rows: Rc<Vec<Option<usize>>>,
    },
    StackRows(Rc<Vec<usize>>),
    StackAxis1(Rc<Vec<usize>>),
    MeanRowsMasked {
        x: usize,
        mask: Rc<Vec<bool>>,
        count: usize,
    },
    Sum(usize),
    AddRowBroadcast {
        mat: usize,
        vec: usize,
    },
    Interact {
        hs: usize,
        ht: usize,
        pairs: Rc<Vec<(u32, u32)>>,
        backend: ConvBackend,
    },
    Bce {
        pred: usize,
        label: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recording tape; cloning shares the underlying node list.
#[derive(Clone, Debug)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one tensor-valued node on a tape.
#[derive(Clone, Debug)]
pub struct Var {
    tape: Tape,
    idx: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    /// Number of recorded nodes.
    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Inserts an input node. Leaves are the only nodes whose gradients are
    /// meaningful to extract after [`backward`].
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self.clone(),
            idx: nodes.len() - 1,
        }
    }

    fn value_of(&self, idx: usize) -> Tensor {
        self.nodes.borrow()[idx].value.clone()
    }

    fn same_tape(&self, other: &Tape) -> Result<(), TensorError> {
        if Rc::ptr_eq(&self.nodes, &other.nodes) {
            Ok(())
        } else {
            Err(TensorError::TapeMismatch)
        }
    }

    /// Stacks k rank-1 tensors of equal length n into a [k, n] matrix.
    pub fn stack_rows(&self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Empty { op: "stack_rows" });
        }
        let first_shape = parts[0].shape();
        if first_shape.len() != 1 {
            return Err(TensorError::RankMismatch {
                op: "stack_rows",
                expected: 1,
                shape: first_shape,
            });
        }
        let n = first_shape[0];
        let mut data = Vec::with_capacity(parts.len() * n);
        let mut idxs = Vec::with_capacity(parts.len());
        for p in parts {
            self.same_tape(&p.tape)?;
            let v = p.value();
            if v.shape() != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    left: vec![n],
                    right: v.shape().to_vec(),
                });
            }
            data.extend_from_slice(v.data());
            idxs.push(p.idx);
        }
        Ok(self.push(
            Tensor::from_parts(vec![parts.len(), n], data),
            Op::StackRows(Rc::new(idxs)),
        ))
    }

    /// Stacks I matrices of shape [L, E] into an [L, I, E] tensor, so that
    /// out[l, i, :] is row l of the i-th part.
    pub fn stack_axis1(&self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Empty { op: "stack_axis1" });
        }
        let first_shape = parts[0].shape();
        if first_shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "stack_axis1",
                expected: 2,
                shape: first_shape,
            });
        }
        let (l, e) = (first_shape[0], first_shape[1]);
        let i_len = parts.len();
        let mut idxs = Vec::with_capacity(i_len);
        let mut values = Vec::with_capacity(i_len);
        for p in parts {
            self.same_tape(&p.tape)?;
            let v = p.value();
            if v.shape() != [l, e] {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_axis1",
                    left: vec![l, e],
                    right: v.shape().to_vec(),
                });
            }
            idxs.push(p.idx);
            values.push(v);
        }
        let mut data = vec![0.0; l * i_len * e];
        for (i, v) in values.iter().enumerate() {
            let vd = v.data();
            for row in 0..l {
                let dst = (row * i_len + i) * e;
                data[dst..dst + e].copy_from_slice(&vd[row * e..(row + 1) * e]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![l, i_len, e], data),
            Op::StackAxis1(Rc::new(idxs)),
        ))
    }

    /// Gathers rows of a rank-2 table into a new matrix. `None` entries
    /// yield all-zero rows that receive no gradient; this is how padded walk
    /// positions are kept exactly zero through training.
    pub fn gather_rows(&self, table: &Var, rows: &[Option<usize>]) -> Result<Var, TensorError> {
        self.same_tape(&table.tape)?;
        let t = table.value();
        if t.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "gather_rows",
                expected: 2,
                shape: t.shape().to_vec(),
            });
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; rows.len() * c];
        for (out_row, src) in rows.iter().enumerate() {
            if let Some(s) = *src {
                if s >= r {
                    return Err(TensorError::RowOutOfBounds {
                        op: "gather_rows",
                        index: s,
                        rows: r,
                    });
                }
                data[out_row * c..(out_row + 1) * c].copy_from_slice(&t.data()[s * c..(s + 1) * c]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), c], data),
            Op::GatherRows {
                table: table.idx,
                rows: Rc::new(rows.to_vec()),
            },
        ))
    }

    /// Channel-wise linear convolution of two stacked walk tensors.
    ///
    /// `hs` is [L_s, I_s, E], `ht` is [L_t, I_t, E]; for every pair
    /// (l_s, l_t) in `pairs` and every channel c, the output row is the
    /// length I_s + I_t - 1 convolution of hs[l_s, :, c] with ht[l_t, :, c].
    /// Output shape: [pairs.len(), I_s + I_t - 1, E].
    pub fn interact(
        &self,
        hs: &Var,
        ht: &Var,
        pairs: &[(u32, u32)],
        backend: ConvBackend,
    ) -> Result<Var, TensorError> {
        self.same_tape(&hs.tape)?;
        self.same_tape(&ht.tape)?;
        let s = hs.value();
        let t = ht.value();
        for v in [&s, &t] {
            if v.rank() != 3 {
                return Err(TensorError::RankMismatch {
                    op: "interact",
                    expected: 3,
                    shape: v.shape().to_vec(),
                });
            }
            if v.is_empty() {
                return Err(TensorError::Empty { op: "interact" });
            }
        }
        let (ls, is_len, e) = (s.shape()[0], s.shape()[1], s.shape()[2]);
        let (lt, it_len, e2) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        if e != e2 {
            return Err(TensorError::ShapeMismatch {
                op: "interact",
                left: s.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        if pairs.is_empty() {
            return Err(TensorError::Empty { op: "interact pairs" });
        }
        for &(a, b) in pairs {
            if a as usize >= ls {
                return Err(TensorError::RowOutOfBounds {
                    op: "interact",
                    index: a as usize,
                    rows: ls,
                });
            }
            if b as usize >= lt {
                return Err(TensorError::RowOutOfBounds {
                    op: "interact",
                    index: b as usize,
                    rows: lt,
                });
            }
        }
        let n_out = conv::conv_output_len(is_len, it_len);
        let plan = match backend {
            ConvBackend::Fft => Some(FftPlan::new(n_out.next_power_of_two()).expect("power of two")),
            ConvBackend::Naive => None,
        };
        let (sd, td) = (s.data(), t.data());
        let mut out = vec![0.0; pairs.len() * n_out * e];
        let mut xs = vec![0.0; is_len];
        let mut ys = vec![0.0; it_len];
        for (p, &(pls, plt)) in pairs.iter().enumerate() {
            let (pls, plt) = (pls as usize, plt as usize);
            for c in 0..e {
                for (a, slot) in xs.iter_mut().enumerate() {
                    *slot = sd[(pls * is_len + a) * e + c];
                }
                for (b, slot) in ys.iter_mut().enumerate() {
                    *slot = td[(plt * it_len + b) * e + c];
                }
                let z = match &plan {
                    Some(plan) => conv::conv1d_fft_with_plan(&xs, &ys, plan),
                    None => conv::conv1d_naive(&xs, &ys),
                }
                .expect("validated conv inputs");
                for (n, &zv) in z.iter().enumerate() {
                    out[(p * n_out + n) * e + c] = zv;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![pairs.len(), n_out, e], out),
            Op::Interact {
                hs: hs.idx,
                ht: ht.idx,
                pairs: Rc::new(pairs.to_vec()),
                backend,
            },
        ))
    }
}

impl Var {
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.idx)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn add(&self, other: &Var) -> Result<Var, TensorError> {
        self.tape.same_tape(&other.tape)?;
        let v = self.value().add(&other.value())?;
        Ok(self.tape.push(v, Op::Add(self.idx, other.idx)))
    }

    pub fn mul(&self, other: &Var) -> Result<Var, TensorError> {
        self.tape.same_tape(&other.tape)?;
        let v = self.value().mul(&other.value())?;
        Ok(self.tape.push(v, Op::Mul(self.idx, other.idx)))
    }

    pub fn scale(&self, c: f64) -> Var {
        let v = self.value().scale(c);
        self.tape.push(v, Op::Scale(self.idx, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let v = self.value().add_scalar(c);
        self.tape.push(v, Op::AddScalar(self.idx))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var, TensorError> {
        self.tape.same_tape(&other.tape)?;
        let v = self.value().matmul(&other.value())?;
        Ok(self.tape.push(v, Op::MatMul(self.idx, other.idx)))
    }

    pub fn transpose(&self) -> Result<Var, TensorError> {
        let v = self.value().transpose()?;
        Ok(self.tape.push(v, Op::Transpose(self.idx)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.value().reshape(shape)?;
        Ok(self.tape.push(v, Op::Reshape(self.idx)))
    }

    pub fn tanh(&self) -> Var {
        let v = self.value().map(f64::tanh);
        self.tape.push(v, Op::Tanh(self.idx))
    }

    /// ReLU; the subgradient at exactly zero is taken as 0.
    pub fn relu(&self) -> Var {
        let v = self.value().map(|x| if x > 0.0 { x } else { 0.0 });
        self.tape.push(v, Op::Relu(self.idx))
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        self.tape.push(v, Op::Sigmoid(self.idx))
    }

    /// Temperature-scaled softmax over the last axis. An optional mask (one
    /// flag per last-axis position) excludes positions: they get exactly 0
    /// and the rest renormalize over the survivors.
    pub fn softmax_last(&self, temperature: f64, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let v = self.value();
        if v.rank() == 0 || v.is_empty() {
            return Err(TensorError::Empty { op: "softmax_last" });
        }
        let n = *v.shape().last().expect("rank checked");
        if let Some(m) = mask {
            if m.len() != n {
                return Err(TensorError::MaskLength {
                    op: "softmax_last",
                    mask: m.len(),
                    dim: n,
                });
            }
        }
        let mut out = vec![0.0; v.len()];
        for (row_out, row_in) in out.chunks_mut(n).zip(v.data().chunks(n)) {
            let sm = softmax_temp(row_in, temperature, mask)?;
            row_out.copy_from_slice(&sm);
        }
        Ok(self.tape.push(
            Tensor::from_parts(v.shape().to_vec(), out),
            Op::SoftmaxLast {
                x: self.idx,
                temperature,
            },
        ))
    }

    /// Mean over unmasked rows of a [m, n] matrix, giving [n].
    pub fn mean_rows_masked(&self, mask: &[bool]) -> Result<Var, TensorError> {
        let v = self.value();
        if v.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "mean_rows_masked",
                expected: 2,
                shape: v.shape().to_vec(),
            });
        }
        let (m, n) = (v.shape()[0], v.shape()[1]);
        if mask.len() != m {
            return Err(TensorError::MaskLength {
                op: "mean_rows_masked",
                mask: mask.len(),
                dim: m,
            });
        }
        let count = mask.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(TensorError::AllMasked);
        }
        let mut acc = vec![0.0; n];
        for (row, &keep) in mask.iter().enumerate() {
            if keep {
                for (j, slot) in acc.iter_mut().enumerate() {
                    *slot += v.data()[row * n + j];
                }
            }
        }
        let inv = 1.0 / count as f64;
        for slot in acc.iter_mut() {
            *slot *= inv;
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![n], acc),
            Op::MeanRowsMasked {
                x: self.idx,
                mask: Rc::new(mask.to_vec()),
                count,
            },
        ))
    }

    /// Mean over all rows.
    pub fn mean_rows(&self) -> Result<Var, TensorError> {
        let m = self.value().shape().first().copied().unwrap_or(0);
        self.mean_rows_masked(&vec![true; m])
    }

    /// Sum of all elements, as a [1] scalar.
    pub fn sum(&self) -> Var {
        let v = self.value();
        let s = v.sum();
        self.tape.push(Tensor::from_parts(vec![1], vec![s]), Op::Sum(self.idx))
    }

    /// Adds a [n] vector to every row of a [m, n] matrix.
    pub fn add_row_broadcast(&self, vec: &Var) -> Result<Var, TensorError> {
        self.tape.same_tape(&vec.tape)?;
        let m_t = self.value();
        let v_t = vec.value();
        if m_t.rank() != 2 || v_t.rank() != 1 || m_t.shape()[1] != v_t.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_broadcast",
                left: m_t.shape().to_vec(),
                right: v_t.shape().to_vec(),
            });
        }
        let n = v_t.shape()[0];
        let mut data = m_t.data().to_vec();
        for row in data.chunks_mut(n) {
            for (slot, &b) in row.iter_mut().zip(v_t.data()) {
                *slot += b;
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(m_t.shape().to_vec(), data),
            Op::AddRowBroadcast {
                mat: self.idx,
                vec: vec.idx,
            },
        ))
    }

    /// Binary cross-entropy of a [1] prediction against a 0/1 label, with
    /// the prediction clamped away from {0, 1} so the loss stays finite.
    pub fn bce(&self, label: f64) -> Result<Var, TensorError> {
        if label != 0.0 && label != 1.0 {
            return Err(TensorError::BadLabel(label));
        }
        let p = self.value().item()?;
        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let loss = -(label * pc.ln() + (1.0 - label) * (1.0 - pc).ln());
        Ok(self.tape.push(
            Tensor::from_parts(vec![1], vec![loss]),
            Op::Bce {
                pred: self.idx,
                label,
            },
        ))
    }
}

/// Temperature-scaled, max-stabilized softmax over a slice. Masked-out
/// positions get exactly 0; the remainder normalize to 1. Errors when the
/// mask excludes everything.
pub fn softmax_temp(
    xs: &[f64],
    temperature: f64,
    mask: Option<&[bool]>,
) -> Result<Vec<f64>, TensorError> {
    assert!(
        temperature > 0.0 && temperature.is_finite(),
        "softmax temperature must be positive and finite, got {temperature}"
    );
    if xs.is_empty() {
        return Err(TensorError::Empty { op: "softmax_temp" });
    }
    if let Some(m) = mask {
        if m.len() != xs.len() {
            return Err(TensorError::MaskLength {
                op: "softmax_temp",
                mask: m.len(),
                dim: xs.len(),
            });
        }
    }
    let keep = |i: usize| mask.map_or(true, |m| m[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, &x) in xs.iter().enumerate() {
        if keep(i) && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(TensorError::AllMasked);
    }
    let mut out = vec![0.0; xs.len()];
    let mut sum = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        if keep(i) {
            let e = ((x - max) / temperature).exp();
            out[i] = e;
            sum += e;
        }
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
    Ok(out)
}

/// Per-node gradient: dense, or sparse rows for tables reached via gathers.
#[derive(Debug, Clone)]
pub enum Grad {
    Dense(Tensor),
    Rows(BTreeMap<usize, Vec<f64>>),
}

/// Gradients of one scalar loss with respect to every reachable node.
#[derive(Debug)]
pub struct Gradients {
    tape_id: usize,
    grads: Vec<Option<Grad>>,
}

impl Gradients {
    /// Gradient for a node, if it was reached by the backward walk.
    pub fn get(&self, var: &Var) -> Option<&Grad> {
        debug_assert_eq!(self.tape_id, Rc::as_ptr(&var.tape.nodes) as usize);
        self.grads.get(var.idx).and_then(|g| g.as_ref())
    }

    /// Moves a gradient out (cheaper than cloning for large tensors).
    pub fn take(&mut self, var: &Var) -> Option<Grad> {
        debug_assert_eq!(self.tape_id, Rc::as_ptr(&var.tape.nodes) as usize);
        self.grads.get_mut(var.idx).and_then(|g| g.take())
    }

    /// Gradient densified to the node's own shape (zeros where untouched).
    pub fn dense(&self, var: &Var) -> Option<Tensor> {
        let shape = var.shape();
        self.get(var).map(|g| match g {
            Grad::Dense(t) => t.clone(),
            Grad::Rows(rows) => {
                let cols = shape[1];
                let mut data = vec![0.0; shape.iter().product()];
                for (r, row) in rows {
                    for (j, &v) in row.iter().enumerate() {
                        data[r * cols + j] += v;
                    }
                }
                Tensor::from_parts(shape.clone(), data)
            }
        })
    }
}

/// Runs reverse accumulation from a [1]-shaped loss node.
pub fn backward(loss: &Var) -> Result<Gradients, TensorError> {
    let loss_val = loss.value();
    if loss_val.shape() != [1] {
        return Err(TensorError::NotScalar {
            op: "backward",
            shape: loss_val.shape().to_vec(),
        });
    }
    let nodes = loss.tape.nodes.borrow();
    let mut grads: Vec<Option<Grad>> = (0..nodes.len()).map(|_| None).collect();
    grads[loss.idx] = Some(Grad::Dense(Tensor::from_parts(vec![1], vec![1.0])));

    for idx in (0..=loss.idx).rev() {
        let Some(grad) = grads[idx].take() else {
            continue;
        };
        let g = match &grad {
            Grad::Dense(t) => t.clone(),
            // Only gather targets accumulate sparse rows, and gathers are
            // leaves' consumers; a sparse grad never needs further pushing.
            Grad::Rows(_) => {
                grads[idx] = Some(grad);
                continue;
            }
        };
        let node = &nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc_dense(&mut grads, *a, g.clone());
                acc_dense(&mut grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let va = nodes[*a].value.clone();
                let vb = nodes[*b].value.clone();
                acc_dense(&mut grads, *a, g.mul(&vb).expect("shape"));
                acc_dense(&mut grads, *b, g.mul(&va).expect("shape"));
            }
            Op::Scale(a, c) => acc_dense(&mut grads, *a, g.scale(*c)),
            Op::AddScalar(a) => acc_dense(&mut grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let va = &nodes[*a].value;
                let vb = &nodes[*b].value;
                acc_dense(&mut grads, *a, matmul_nt(&g, vb));
                acc_dense(&mut grads, *b, matmul_tn(va, &g));
            }
            Op::Transpose(a) => {
                acc_dense(&mut grads, *a, g.transpose().expect("rank 2"));
            }
            Op::Reshape(a) => {
                let shape = nodes[*a].value.shape().to_vec();
                acc_dense(&mut grads, *a, g.reshape(&shape).expect("same count"));
            }
            Op::Tanh(a) => {
                let d = node.value.map(|t| 1.0 - t * t);
                acc_dense(&mut grads, *a, g.mul(&d).expect("shape"));
            }
            Op::Relu(a) => {
                let d = node.value.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                acc_dense(&mut grads, *a, g.mul(&d).expect("shape"));
            }
            Op::Sigmoid(a) => {
                let d = node.value.map(|s| s * (1.0 - s));
                acc_dense(&mut grads, *a, g.mul(&d).expect("shape"));
            }
            Op::SoftmaxLast { x, temperature } => {
                // dx_j = (alpha_j / T) * (g_j - sum_k g_k alpha_k); masked
                // positions have alpha_j = 0 and so get exactly 0.
                let alpha = &node.value;
                let n = *alpha.shape().last().expect("nonempty");
                let mut dx = vec![0.0; alpha.len()];
                for ((dx_row, a_row), g_row) in dx
                    .chunks_mut(n)
                    .zip(alpha.data().chunks(n))
                    .zip(g.data().chunks(n))
                {
                    let dot: f64 = a_row.iter().zip(g_row).map(|(a, gg)| a * gg).sum();
                    for j in 0..n {
                        dx_row[j] = a_row[j] / temperature * (g_row[j] - dot);
                    }
                }
                acc_dense(
                    &mut grads,
                    *x,
                    Tensor::from_parts(alpha.shape().to_vec(), dx),
                );
            }
            Op::GatherRows { table, rows } => {
                let c = node.value.shape()[1];
                for (out_row, src) in rows.iter().enumerate() {
                    if let Some(s) = *src {
                        acc_rows(&mut grads, *table, s, &g.data()[out_row * c..(out_row + 1) * c]);
                    }
                }
            }
            Op::StackRows(parts) => {
                let n = node.value.shape()[1];
                for (row, &part) in parts.iter().enumerate() {
                    let slice = g.data()[row * n..(row + 1) * n].to_vec();
                    acc_dense(&mut grads, part, Tensor::from_parts(vec![n], slice));
                }
            }
            Op::StackAxis1(parts) => {
                let shape = node.value.shape();
                let (l, i_len, e) = (shape[0], shape[1], shape[2]);
                for (i, &part) in parts.iter().enumerate() {
                    let mut slice = vec![0.0; l * e];
                    for row in 0..l {
                        let src = (row * i_len + i) * e;
                        slice[row * e..(row + 1) * e].copy_from_slice(&g.data()[src..src + e]);
                    }
                    acc_dense(&mut grads, part, Tensor::from_parts(vec![l, e], slice));
                }
            }
            Op::MeanRowsMasked { x, mask, count } => {
                let n = node.value.shape()[0];
                let m = mask.len();
                let inv = 1.0 / *count as f64;
                let mut dx = vec![0.0; m * n];
                for (row, &keep) in mask.iter().enumerate() {
                    if keep {
                        for j in 0..n {
                            dx[row * n + j] = g.data()[j] * inv;
                        }
                    }
                }
                acc_dense(&mut grads, *x, Tensor::from_parts(vec![m, n], dx));
            }
            Op::Sum(a) => {
                let va = &nodes[*a].value;
                let gv = g.data()[0];
                acc_dense(
                    &mut grads,
                    *a,
                    Tensor::from_parts(va.shape().to_vec(), vec![gv; va.len()]),
                );
            }
            Op::AddRowBroadcast { mat, vec } => {
                acc_dense(&mut grads, *mat, g.clone());
                let n = nodes[*vec].value.shape()[0];
                let mut col = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (slot, &v) in col.iter_mut().zip(row) {
                        *slot += v;
                    }
                }
                acc_dense(&mut grads, *vec, Tensor::from_parts(vec![n], col));
            }
            Op::Interact {
                hs,
                ht,
                pairs,
                backend,
            } => {
                let s = &nodes[*hs].value;
                let t = &nodes[*ht].value;
                let (is_len, e) = (s.shape()[1], s.shape()[2]);
                let it_len = t.shape()[1];
                let n_out = conv::conv_output_len(is_len, it_len);
                // Correlation via FFT convolves the N-long slot gradient with
                // a reversed input, so the plan must cover that longer product.
                let plan = match backend {
                    ConvBackend::Fft => Some(
                        FftPlan::new(
                            conv::conv_output_len(n_out, is_len.max(it_len)).next_power_of_two(),
                        )
                        .expect("power of two"),
                    ),
                    ConvBackend::Naive => None,
                };
                let mut dhs = vec![0.0; s.len()];
                let mut dht = vec![0.0; t.len()];
                let mut gz = vec![0.0; n_out];
                let mut xs = vec![0.0; is_len];
                let mut ys = vec![0.0; it_len];
                for (p, &(pls, plt)) in pairs.iter().enumerate() {
                    let (pls, plt) = (pls as usize, plt as usize);
                    for c in 0..e {
                        for (n, slot) in gz.iter_mut().enumerate() {
                            *slot = g.data()[(p * n_out + n) * e + c];
                        }
                        for (a, slot) in xs.iter_mut().enumerate() {
                            *slot = s.data()[(pls * is_len + a) * e + c];
                        }
                        for (b, slot) in ys.iter_mut().enumerate() {
                            *slot = t.data()[(plt * it_len + b) * e + c];
                        }
                        let (dxs, dys) = match &plan {
                            Some(plan) => (
                                conv::correlate_fft_with_plan(&gz, &ys, plan).expect("valid"),
                                conv::correlate_fft_with_plan(&gz, &xs, plan).expect("valid"),
                            ),
                            None => (
                                conv::correlate_naive(&gz, &ys).expect("valid"),
                                conv::correlate_naive(&gz, &xs).expect("valid"),
                            ),
                        };
                        for (a, &v) in dxs.iter().enumerate() {
                            dhs[(pls * is_len + a) * e + c] += v;
                        }
                        for (b, &v) in dys.iter().enumerate() {
                            dht[(plt * it_len + b) * e + c] += v;
                        }
                    }
                }
                acc_dense(&mut grads, *hs, Tensor::from_parts(s.shape().to_vec(), dhs));
                acc_dense(&mut grads, *ht, Tensor::from_parts(t.shape().to_vec(), dht));
            }
            Op::Bce { pred, label } => {
                let p = nodes[*pred].value.data()[0].clamp(BCE_EPS, 1.0 - BCE_EPS);
                let d = (p - label) / (p * (1.0 - p));
                acc_dense(
                    &mut grads,
                    *pred,
                    Tensor::from_parts(vec![1], vec![g.data()[0] * d]),
                );
            }
        }
        grads[idx] = Some(grad);
    }

    Ok(Gradients {
        tape_id: Rc::as_ptr(&loss.tape.nodes) as usize,
        grads,
    })
}

fn acc_dense(grads: &mut [Option<Grad>], idx: usize, contribution: Tensor) {
    match &mut grads[idx] {
        slot @ None => *slot = Some(Grad::Dense(contribution)),
        Some(Grad::Dense(existing)) => {
            *existing = existing.add(&contribution).expect("matching grad shapes");
        }
        Some(Grad::Rows(rows)) => {
            // A table was also used densely; fold the sparse rows in.
            let cols = contribution.shape()[1];
            let mut data = contribution.data().to_vec();
            for (r, row) in rows.iter() {
                for (j, &v) in row.iter().enumerate() {
                    data[r * cols + j] += v;
                }
            }
            grads[idx] = Some(Grad::Dense(Tensor::from_parts(
                contribution.shape().to_vec(),
                data,
            )));
        }
    }
}

fn acc_rows(grads: &mut [Option<Grad>], idx: usize, row: usize, contribution: &[f64]) {
    match &mut grads[idx] {
        slot @ None => {
            let mut rows = BTreeMap::new();
            rows.insert(row, contribution.to_vec());
            *slot = Some(Grad::Rows(rows));
        }
        Some(Grad::Rows(rows)) => {
            match rows.entry(row) {
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(contribution.to_vec());
                }
                std::collections::btree_map::Entry::Occupied(mut e) => {
                    for (slot, &v) in e.get_mut().iter_mut().zip(contribution) {
                        *slot += v;
                    }
                }
            }
        }
        Some(Grad::Dense(existing)) => {
            let cols = existing.shape()[1];
            let mut data = existing.data().to_vec();
            for (j, &v) in contribution.iter().enumerate() {
                data[row * cols + j] += v;
            }
            *existing = Tensor::from_parts(existing.shape().to_vec(), data);
        }
    }
}
