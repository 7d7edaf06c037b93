//! Reverse-mode differentiation on a Wengert tape.
//!
//! Operations are recorded define-by-run: every [`Var`] op appends one node
//! holding the op kind, input node ids, and the output value. Nodes are in
//! topological order by construction, so [`Tape::backward`] is a single
//! reverse sweep that visits each node exactly once.
//!
//! A tape is single-owner (`Rc`, not `Arc`): it must not be shared across
//! threads. Parallel work happens *inside* primitive kernels or across
//! independent tapes.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::tensor::Tensor;

/// Boolean validity mask over batched sequences: `rows × cols`,
/// `true` = real position, `false` = padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "Mask::new",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(Mask { rows, cols, data })
    }

    /// Mask with every position valid.
    pub fn full(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            data: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn count_unmasked(&self, row: usize) -> usize {
        self.row(row).iter().filter(|&&m| m).count()
    }
}

enum Op {
    Leaf,
    /// C = A·B (or A·Bᵀ when `nt`).
    Matmul {
        a: usize,
        b: usize,
        nt: bool,
    },
    /// Grouped matrix product over the leading dimension; `broadcast_a`
    /// reuses one 2-D `a` for every group.
    Bmm {
        a: usize,
        b: usize,
        nt: bool,
        broadcast_a: bool,
    },
    AddElem {
        a: usize,
        b: usize,
    },
    AddBias {
        a: usize,
        bias: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    /// Elementwise product with a constant (non-differentiated) factor.
    MulConst {
        a: usize,
        factor: Tensor,
    },
    Gather {
        table: usize,
        ids: Arc<Vec<usize>>,
    },
    SelectRows {
        a: usize,
        rows: Arc<Vec<usize>>,
    },
    SplitHeads {
        a: usize,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        a: usize,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    Reshape {
        a: usize,
    },
    SoftmaxRows {
        a: usize,
        mask: Arc<Mask>,
        rows_per_group: usize,
        tau: f64,
    },
    LayerNorm {
        a: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    Sigmoid {
        a: usize,
    },
    Tanh {
        a: usize,
    },
    Relu {
        a: usize,
    },
    Gelu {
        a: usize,
    },
    BceWithLogits {
        logits: usize,
        targets: Tensor,
    },
    MeanAll {
        a: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Recording tape. Cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a value recorded on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an input tensor (parameter or data) as a differentiable leaf.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    fn push(&self, op: Op, value: Tensor) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { op, value });
        Var {
            tape: self.clone(),
            id,
        }
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.inner.borrow().nodes[id].value.clone()
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every node
    /// that influences the loss; leaves not on a path to the loss get none.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if !Rc::ptr_eq(&self.inner, &loss.tape.inner) {
            return Err(Error::Validation {
                op: "backward",
                msg: "loss recorded on a different tape".into(),
            });
        }
        let inner = self.inner.borrow();
        let loss_node = &inner.nodes[loss.id];
        if !loss_node.value.is_scalar() {
            return Err(Error::Validation {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", loss_node.value.shape()),
            });
        }
        if !loss_node.value.item().is_finite() {
            return Err(Error::Numeric {
                context: "backward".into(),
                msg: format!("loss is not finite: {}", loss_node.value.item()),
            });
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(dy) = grads[id].take() else {
                continue;
            };
            backward_node(&inner, id, &dy, &mut grads);
            grads[id] = Some(dy);
        }

        let tensors = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|data| {
                    Tensor::new(inner.nodes[id].value.shape().to_vec(), data)
                        .expect("gradient shape mirrors value shape")
                })
            })
            .collect();
        Ok(Gradients { grads: tensors })
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a recorded var, if it participates.
    pub fn wrt(&self, var: &Var) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient as a tensor, zeros when the var does not reach the loss.
    pub fn wrt_or_zeros(&self, var: &Var) -> Tensor {
        self.wrt(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()))
    }
}

impl Var {
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    fn same_tape(&self, other: &Var, op: &'static str) -> Result<()> {
        if Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            Ok(())
        } else {
            Err(Error::Validation {
                op,
                msg: "operands recorded on different tapes".into(),
            })
        }
    }

    /// C[m,n] = self[m,k] · rhs[k,n]
    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        self.same_tape(rhs, "matmul")?;
        let a = self.value();
        let b = rhs.value();
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        };
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut c = vec![0.0; m * n];
        kernels::mm_nn(&mut c, a.data(), b.data(), m, k, n);
        Ok(self.tape.push(
            Op::Matmul {
                a: self.id,
                b: rhs.id,
                nt: false,
            },
            Tensor::new(vec![m, n], c)?,
        ))
    }

    /// C[m,n] = self[m,k] · rhs[n,k]ᵀ
    pub fn matmul_nt(&self, rhs: &Var) -> Result<Var> {
        self.same_tape(rhs, "matmul_nt")?;
        let a = self.value();
        let b = rhs.value();
        let (&[m, k], &[n, k2]) = (a.shape(), b.shape()) else {
            return Err(Error::Dimension {
                op: "matmul_nt",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        };
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut c = vec![0.0; m * n];
        kernels::mm_nt(&mut c, a.data(), b.data(), m, k, n);
        Ok(self.tape.push(
            Op::Matmul {
                a: self.id,
                b: rhs.id,
                nt: true,
            },
            Tensor::new(vec![m, n], c)?,
        ))
    }

    /// Grouped product: self[G,m,k] · rhs[G,k,n] → [G,m,n]
    pub fn bmm(&self, rhs: &Var) -> Result<Var> {
        self.bmm_impl(rhs, false, false)
    }

    /// Grouped product with transposed rhs: self[G,m,k] · rhs[G,n,k]ᵀ → [G,m,n]
    pub fn bmm_nt(&self, rhs: &Var) -> Result<Var> {
        self.bmm_impl(rhs, true, false)
    }

    /// One query matrix against every group: self[m,k] · rhs[G,n,k]ᵀ → [G,m,n]
    pub fn bmm_broadcast_nt(&self, rhs: &Var) -> Result<Var> {
        self.bmm_impl(rhs, true, true)
    }

    fn bmm_impl(&self, rhs: &Var, nt: bool, broadcast_a: bool) -> Result<Var> {
        self.same_tape(rhs, "bmm")?;
        let a = self.value();
        let b = rhs.value();
        let bs = b.shape();
        if bs.len() != 3 {
            return Err(Error::Dimension {
                op: "bmm",
                lhs: a.shape().to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let groups = bs[0];
        let (m, k) = if broadcast_a {
            let s = a.shape();
            if s.len() != 2 {
                return Err(Error::Dimension {
                    op: "bmm",
                    lhs: s.to_vec(),
                    rhs: bs.to_vec(),
                });
            }
            (s[0], s[1])
        } else {
            let s = a.shape();
            if s.len() != 3 || s[0] != groups {
                return Err(Error::Dimension {
                    op: "bmm",
                    lhs: s.to_vec(),
                    rhs: bs.to_vec(),
                });
            }
            (s[1], s[2])
        };
        let (bk, n) = if nt { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if bk != k {
            return Err(Error::Dimension {
                op: "bmm",
                lhs: a.shape().to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let mut c = vec![0.0; groups * m * n];
        for g in 0..groups {
            let ag = if broadcast_a {
                a.data()
            } else {
                &a.data()[g * m * k..(g + 1) * m * k]
            };
            let bg = &b.data()[g * bs[1] * bs[2]..(g + 1) * bs[1] * bs[2]];
            let cg = &mut c[g * m * n..(g + 1) * m * n];
            if nt {
                kernels::mm_nt(cg, ag, bg, m, k, n);
            } else {
                kernels::mm_nn(cg, ag, bg, m, k, n);
            }
        }
        Ok(self.tape.push(
            Op::Bmm {
                a: self.id,
                b: rhs.id,
                nt,
                broadcast_a,
            },
            Tensor::new(vec![groups, m, n], c)?,
        ))
    }

    pub fn add(&self, rhs: &Var) -> Result<Var> {
        self.same_tape(rhs, "add")?;
        let a = self.value();
        let b = rhs.value();
        if a.shape() != b.shape() {
            return Err(Error::Dimension {
                op: "add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.tape.push(
            Op::AddElem {
                a: self.id,
                b: rhs.id,
            },
            Tensor::new(a.shape().to_vec(), data)?,
        ))
    }

    /// Broadcast-add a 1-D bias over the last dimension.
    pub fn add_bias(&self, bias: &Var) -> Result<Var> {
        self.same_tape(bias, "add_bias")?;
        let a = self.value();
        let b = bias.value();
        let d = *a.shape().last().unwrap_or(&0);
        if b.shape().len() != 1 || b.shape()[0] != d {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(d) {
            for (x, y) in row.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        Ok(self.tape.push(
            Op::AddBias {
                a: self.id,
                bias: bias.id,
            },
            Tensor::new(a.shape().to_vec(), data)?,
        ))
    }

    pub fn scale(&self, c: f64) -> Var {
        let v = self.value().map(|x| x * c);
        self.tape.push(Op::Scale { a: self.id, c }, v)
    }

    /// Elementwise product with a constant tensor (no gradient to the factor).
    pub fn mul_const(&self, factor: &Tensor) -> Result<Var> {
        let a = self.value();
        if a.shape() != factor.shape() {
            return Err(Error::Dimension {
                op: "mul_const",
                lhs: a.shape().to_vec(),
                rhs: factor.shape().to_vec(),
            });
        }
        let data = a
            .data()
            .iter()
            .zip(factor.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(
            Op::MulConst {
                a: self.id,
                factor: factor.clone(),
            },
            value,
        ))
    }

    /// Row lookup into a 2-D table: ids index rows, output is [len(ids), d].
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var> {
        let t = self.value();
        let &[rows, d] = t.shape() else {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        };
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::Range {
                op: "gather_rows",
                msg: format!("row id {bad} out of range for table with {rows} rows"),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(t.row(id));
        }
        Ok(self.tape.push(
            Op::Gather {
                table: self.id,
                ids: Arc::new(ids.to_vec()),
            },
            Tensor::new(vec![ids.len(), d], data)?,
        ))
    }

    /// Select rows of a 2-D tensor by index (used to pull out CLS rows).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Var> {
        let t = self.value();
        let &[nrows, d] = t.shape() else {
            return Err(Error::Dimension {
                op: "select_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        };
        if let Some(&bad) = rows.iter().find(|&&r| r >= nrows) {
            return Err(Error::Range {
                op: "select_rows",
                msg: format!("row {bad} out of range for {nrows} rows"),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        Ok(self.tape.push(
            Op::SelectRows {
                a: self.id,
                rows: Arc::new(rows.to_vec()),
            },
            Tensor::new(vec![rows.len(), d], data)?,
        ))
    }

    /// [B·S, H·dh] → [B·H, S, dh]: regroup per-position rows into per-head
    /// sequence blocks for attention.
    pub fn split_heads(&self, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let t = self.value();
        let &[rows, d] = t.shape() else {
            return Err(Error::Dimension {
                op: "split_heads",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        };
        if rows != batch * seq || d % heads != 0 {
            return Err(Error::Dimension {
                op: "split_heads",
                lhs: vec![rows, d],
                rhs: vec![batch, seq, heads],
            });
        }
        let dh = d / heads;
        let mut data = vec![0.0; rows * d];
        let src = t.data();
        for b in 0..batch {
            for h in 0..heads {
                for s in 0..seq {
                    let from = (b * seq + s) * d + h * dh;
                    let to = ((b * heads + h) * seq + s) * dh;
                    data[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        Ok(self.tape.push(
            Op::SplitHeads {
                a: self.id,
                batch,
                seq,
                heads,
            },
            Tensor::new(vec![batch * heads, seq, dh], data)?,
        ))
    }

    /// Inverse of [`Var::split_heads`]: [B·H, S, dh] → [B·S, H·dh].
    pub fn merge_heads(&self, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let t = self.value();
        let shape = t.shape().to_vec();
        if shape.len() != 3 || shape[0] != batch * heads || shape[1] != seq {
            return Err(Error::Dimension {
                op: "merge_heads",
                lhs: shape,
                rhs: vec![batch, seq, heads],
            });
        }
        let dh = shape[2];
        let d = heads * dh;
        let mut data = vec![0.0; batch * seq * d];
        let src = t.data();
        for b in 0..batch {
            for h in 0..heads {
                for s in 0..seq {
                    let from = ((b * heads + h) * seq + s) * dh;
                    let to = (b * seq + s) * d + h * dh;
                    data[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        Ok(self.tape.push(
            Op::MergeHeads {
                a: self.id,
                batch,
                seq,
                heads,
            },
            Tensor::new(vec![batch * seq, d], data)?,
        ))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var> {
        let v = self.value().reshaped(shape)?;
        Ok(self.tape.push(Op::Reshape { a: self.id }, v))
    }

    /// Masked softmax with temperature over the last dimension.
    ///
    /// The flattened leading dimensions form rows; consecutive blocks of
    /// `rows / mask.rows()` rows share one mask row. Masked positions are
    /// excluded from the normalization and come out exactly 0.
    pub fn softmax_masked(&self, mask: &Mask, tau: f64) -> Result<Var> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Domain {
                op: "softmax_masked",
                msg: format!("temperature must be a positive finite number, got {tau}"),
            });
        }
        let t = self.value();
        let cols = *t.shape().last().unwrap_or(&0);
        if cols != mask.cols() || cols == 0 {
            return Err(Error::Dimension {
                op: "softmax_masked",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.rows(), mask.cols()],
            });
        }
        let rows = t.numel() / cols;
        if mask.rows() == 0 || rows % mask.rows() != 0 {
            return Err(Error::Dimension {
                op: "softmax_masked",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.rows(), mask.cols()],
            });
        }
        for g in 0..mask.rows() {
            if mask.count_unmasked(g) == 0 {
                return Err(Error::Degenerate {
                    op: "softmax_masked",
                    msg: format!("mask row {g} has no unmasked position"),
                });
            }
        }
        let rows_per_group = rows / mask.rows();
        let mut out = vec![0.0; t.numel()];
        {
            let src = t.data();
            let mask_ref = &mask;
            crate::parallel::for_each_chunk_mut(&mut out, cols, |r, orow| {
                kernels::softmax_row(
                    orow,
                    &src[r * cols..(r + 1) * cols],
                    mask_ref.row(r / rows_per_group),
                    tau,
                );
            });
        }
        Ok(self.tape.push(
            Op::SoftmaxRows {
                a: self.id,
                mask: Arc::new(mask.clone()),
                rows_per_group,
                tau,
            },
            Tensor::new(t.shape().to_vec(), out)?,
        ))
    }

    /// Per-row standardization over the last dimension followed by an affine
    /// transform with `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        self.same_tape(gain, "layer_norm")?;
        self.same_tape(bias, "layer_norm")?;
        let x = self.value();
        let g = gain.value();
        let b = bias.value();
        let d = *x.shape().last().unwrap_or(&0);
        if g.shape() != [d] || b.shape() != [d] || d == 0 {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; x.numel()];
        {
            let src = x.data();
            let gd = g.data();
            let bd = b.data();
            crate::parallel::for_each_chunk_mut(&mut out, d, |r, orow| {
                kernels::layer_norm_row(orow, &src[r * d..(r + 1) * d], gd, bd, eps);
            });
        }
        Ok(self.tape.push(
            Op::LayerNorm {
                a: self.id,
                gain: gain.id,
                bias: bias.id,
                eps,
            },
            Tensor::new(x.shape().to_vec(), out)?,
        ))
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.value().map(kernels::sigmoid);
        self.tape.push(Op::Sigmoid { a: self.id }, v)
    }

    pub fn tanh_act(&self) -> Var {
        let v = self.value().map(f64::tanh);
        self.tape.push(Op::Tanh { a: self.id }, v)
    }

    pub fn relu(&self) -> Var {
        let v = self.value().map(|x| if x > 0.0 { x } else { 0.0 });
        self.tape.push(Op::Relu { a: self.id }, v)
    }

    pub fn gelu(&self) -> Var {
        let v = self.value().map(kernels::gelu);
        self.tape.push(Op::Gelu { a: self.id }, v)
    }

    /// Mean binary cross entropy between these logits and {0,1} targets,
    /// computed in the fused softplus form: mean(softplus(z) − y·z).
    pub fn bce_with_logits(&self, targets: &Tensor) -> Result<Var> {
        let z = self.value();
        if z.numel() != targets.numel() {
            return Err(Error::Dimension {
                op: "bce_with_logits",
                lhs: z.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        if let Some(&bad) = targets.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Validation {
                op: "bce_with_logits",
                msg: format!("targets must be 0 or 1, got {bad}"),
            });
        }
        let n = z.numel() as f64;
        let total: f64 = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&zi, &yi)| kernels::softplus(zi) - yi * zi)
            .sum();
        Ok(self.tape.push(
            Op::BceWithLogits {
                logits: self.id,
                targets: targets.clone(),
            },
            Tensor::scalar(total / n),
        ))
    }

    /// Mean over every element, as a scalar.
    pub fn mean_all(&self) -> Var {
        let t = self.value();
        let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.tape.push(Op::MeanAll { a: self.id }, Tensor::scalar(mean))
    }
}

fn backward_node(inner: &TapeInner, id: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let acc = |grads: &mut [Option<Vec<f64>>], target: usize, f: &mut dyn FnMut(&mut [f64])| {
        let numel = inner.nodes[target].value.numel();
        let buf = grads[target].get_or_insert_with(|| vec![0.0; numel]);
        f(buf);
    };

    match &inner.nodes[id].op {
        Op::Leaf => {}
        Op::Matmul { a, b, nt } => {
            let av = &inner.nodes[*a].value;
            let bv = &inner.nodes[*b].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = inner.nodes[id].value.shape()[1];
            if *nt {
                // C = A·Bᵀ, B is [n,k]
                acc(grads, *a, &mut |da| {
                    kernels::mm_nn(da, dy, bv.data(), m, n, k)
                });
                acc(grads, *b, &mut |db| {
                    kernels::mm_tn(db, dy, av.data(), m, n, k)
                });
            } else {
                // C = A·B, B is [k,n]
                acc(grads, *a, &mut |da| {
                    kernels::mm_nt(da, dy, bv.data(), m, n, k)
                });
                acc(grads, *b, &mut |db| {
                    kernels::mm_tn(db, av.data(), dy, m, k, n)
                });
            }
        }
        Op::Bmm {
            a,
            b,
            nt,
            broadcast_a,
        } => {
            let av = &inner.nodes[*a].value;
            let bv = &inner.nodes[*b].value;
            let cs = inner.nodes[id].value.shape().to_vec();
            let (groups, m, n) = (cs[0], cs[1], cs[2]);
            let k = if *broadcast_a {
                av.shape()[1]
            } else {
                av.shape()[2]
            };
            let bstride = bv.shape()[1] * bv.shape()[2];
            for g in 0..groups {
                let dyg = &dy[g * m * n..(g + 1) * m * n];
                let bg = &bv.data()[g * bstride..(g + 1) * bstride];
                let a_range = if *broadcast_a {
                    0..m * k
                } else {
                    g * m * k..(g + 1) * m * k
                };
                let ag: Vec<f64> = av.data()[a_range.clone()].to_vec();
                acc(grads, *a, &mut |da| {
                    let dag = &mut da[a_range.clone()];
                    if *nt {
                        kernels::mm_nn(dag, dyg, bg, m, n, k);
                    } else {
                        kernels::mm_nt(dag, dyg, bg, m, n, k);
                    }
                });
                acc(grads, *b, &mut |db| {
                    let dbg = &mut db[g * bstride..(g + 1) * bstride];
                    if *nt {
                        kernels::mm_tn(dbg, dyg, &ag, m, n, k);
                    } else {
                        kernels::mm_tn(dbg, &ag, dyg, m, k, n);
                    }
                });
            }
        }
        Op::AddElem { a, b } => {
            acc(grads, *a, &mut |da| {
                for (g, d) in da.iter_mut().zip(dy) {
                    *g += d;
                }
            });
            acc(grads, *b, &mut |db| {
                for (g, d) in db.iter_mut().zip(dy) {
                    *g += d;
                }
            });
        }
        Op::AddBias { a, bias } => {
            let d = inner.nodes[*bias].value.numel();
            acc(grads, *a, &mut |da| {
                for (g, v) in da.iter_mut().zip(dy) {
                    *g += v;
                }
            });
            acc(grads, *bias, &mut |db| {
                for row in dy.chunks(d) {
                    for (g, v) in db.iter_mut().zip(row) {
                        *g += v;
                    }
                }
            });
        }
        Op::Scale { a, c } => {
            acc(grads, *a, &mut |da| {
                for (g, d) in da.iter_mut().zip(dy) {
                    *g += c * d;
                }
            });
        }
        Op::MulConst { a, factor } => {
            acc(grads, *a, &mut |da| {
                for ((g, d), f) in da.iter_mut().zip(dy).zip(factor.data()) {
                    *g += d * f;
                }
            });
        }
        Op::Gather { table, ids } => {
            let d = inner.nodes[*table].value.shape()[1];
            acc(grads, *table, &mut |dt| {
                for (r, &id) in ids.iter().enumerate() {
                    let src = &dy[r * d..(r + 1) * d];
                    let dst = &mut dt[id * d..(id + 1) * d];
                    for (g, v) in dst.iter_mut().zip(src) {
                        *g += v;
                    }
                }
            });
        }
        Op::SelectRows { a, rows } => {
            let d = inner.nodes[*a].value.shape()[1];
            acc(grads, *a, &mut |da| {
                for (r, &row) in rows.iter().enumerate() {
                    let src = &dy[r * d..(r + 1) * d];
                    let dst = &mut da[row * d..(row + 1) * d];
                    for (g, v) in dst.iter_mut().zip(src) {
                        *g += v;
                    }
                }
            });
        }
        Op::SplitHeads {
            a,
            batch,
            seq,
            heads,
        } => {
            let d = inner.nodes[*a].value.shape()[1];
            let dh = d / heads;
            acc(grads, *a, &mut |da| {
                for b in 0..*batch {
                    for h in 0..*heads {
                        for s in 0..*seq {
                            let from = ((b * heads + h) * seq + s) * dh;
                            let to = (b * seq + s) * d + h * dh;
                            for c in 0..dh {
                                da[to + c] += dy[from + c];
                            }
                        }
                    }
                }
            });
        }
        Op::MergeHeads {
            a,
            batch,
            seq,
            heads,
        } => {
            let dh = inner.nodes[*a].value.shape()[2];
            let d = heads * dh;
            acc(grads, *a, &mut |da| {
                for b in 0..*batch {
                    for h in 0..*heads {
                        for s in 0..*seq {
                            let from = (b * seq + s) * d + h * dh;
                            let to = ((b * heads + h) * seq + s) * dh;
                            for c in 0..dh {
                                da[to + c] += dy[from + c];
                            }
                        }
                    }
                }
            });
        }
        Op::Reshape { a } => {
            acc(grads, *a, &mut |da| {
                for (g, d) in da.iter_mut().zip(dy) {
                    *g += d;
                }
            });
        }
        Op::SoftmaxRows {
            a,
            mask,
            rows_per_group,
            tau,
        } => {
            let y = &inner.nodes[id].value;
            let cols = mask.cols();
            acc(grads, *a, &mut |da| {
                for r in 0..y.numel() / cols {
                    kernels::softmax_row_backward(
                        &mut da[r * cols..(r + 1) * cols],
                        &y.data()[r * cols..(r + 1) * cols],
                        &dy[r * cols..(r + 1) * cols],
                        mask.row(r / rows_per_group),
                        *tau,
                    );
                }
            });
        }
        Op::LayerNorm { a, gain, bias, eps } => {
            let x = &inner.nodes[*a].value;
            let g = &inner.nodes[*gain].value;
            let d = g.numel();
            let rows = x.numel() / d;
            // dgain/dbias are accumulated across rows, so compute all three
            // gradient pieces in one pass into scratch buffers first.
            let mut dx = vec![0.0; x.numel()];
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for r in 0..rows {
                kernels::layer_norm_row_backward(
                    &mut dx[r * d..(r + 1) * d],
                    &mut dgain,
                    &mut dbias,
                    &x.data()[r * d..(r + 1) * d],
                    g.data(),
                    &dy[r * d..(r + 1) * d],
                    *eps,
                );
            }
            acc(grads, *a, &mut |da| {
                for (g, v) in da.iter_mut().zip(&dx) {
                    *g += v;
                }
            });
            acc(grads, *gain, &mut |dg| {
                for (g, v) in dg.iter_mut().zip(&dgain) {
                    *g += v;
                }
            });
            acc(grads, *bias, &mut |db| {
                for (g, v) in db.iter_mut().zip(&dbias) {
                    *g += v;
                }
            });
        }
        Op::Sigmoid { a } => {
            let y = &inner.nodes[id].value;
            acc(grads, *a, &mut |da| {
                for ((g, d), &s) in da.iter_mut().zip(dy).zip(y.data()) {
                    *g += d * s * (1.0 - s);
                }
            });
        }
        Op::Tanh { a } => {
            let y = &inner.nodes[id].value;
            acc(grads, *a, &mut |da| {
                for ((g, d), &t) in da.iter_mut().zip(dy).zip(y.data()) {
                    *g += d * (1.0 - t * t);
                }
            });
        }
        Op::Relu { a } => {
            let x = &inner.nodes[*a].value;
            acc(grads, *a, &mut |da| {
                for ((g, d), &v) in da.iter_mut().zip(dy).zip(x.data()) {
                    if v > 0.0 {
                        *g += d;
                    }
                }
            });
        }
        Op::Gelu { a } => {
            let x = &inner.nodes[*a].value;
            acc(grads, *a, &mut |da| {
                for ((g, d), &v) in da.iter_mut().zip(dy).zip(x.data()) {
                    *g += d * kernels::gelu_grad(v);
                }
            });
        }
        Op::BceWithLogits { logits, targets } => {
            let z = &inner.nodes[*logits].value;
            let n = z.numel() as f64;
            let upstream = dy[0];
            acc(grads, *logits, &mut |dz| {
                for ((g, &zi), &yi) in dz.iter_mut().zip(z.data()).zip(targets.data()) {
                    *g += upstream * (kernels::sigmoid(zi) - yi) / n;
                }
            });
        }
        Op::MeanAll { a } => {
            let n = inner.nodes[*a].value.numel() as f64;
            let upstream = dy[0];
            acc(grads, *a, &mut |da| {
                for g in da.iter_mut() {
                    *g += upstream / n;
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar_dot() {
        let tape = Tape::new();
        let eye = tape.leaf(tensor2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.leaf(tensor2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let c = eye.matmul(&m).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.leaf(tensor2(1, 2, &[1.0, 2.0]));
        let b = tape.leaf(tensor2(2, 1, &[3.0, 4.0]));
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.value().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![4, 5]));
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn softmax_basic_values() {
        let tape = Tape::new();
        // equal scores over 5 unmasked columns -> uniform 0.2
        let s = tape.leaf(tensor2(1, 5, &[3.0; 5]));
        let y = s.softmax_masked(&Mask::full(1, 5), 2.7).unwrap();
        for &v in y.value().data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        // [0, ln 3] at tau=1 -> [0.25, 0.75]
        let s = tape.leaf(tensor2(1, 2, &[0.0, 3.0f64.ln()]));
        let y = s.softmax_masked(&Mask::full(1, 2), 1.0).unwrap();
        assert!((y.value().data()[0] - 0.25).abs() < 1e-12);
        assert!((y.value().data()[1] - 0.75).abs() < 1e-12);
        // low temperature concentrates on the max
        let s = tape.leaf(tensor2(1, 3, &[1.0, 2.0, 3.0]));
        let y = s.softmax_masked(&Mask::full(1, 3), 0.01).unwrap();
        assert!(y.value().data()[2] >= 1.0 - 1e-10);
    }

    #[test]
    fn softmax_rejects_bad_tau_and_all_masked() {
        let tape = Tape::new();
        let s = tape.leaf(tensor2(1, 3, &[1.0, 2.0, 3.0]));
        assert!(matches!(
            s.softmax_masked(&Mask::full(1, 3), 0.0),
            Err(Error::Domain { .. })
        ));
        assert!(matches!(
            s.softmax_masked(&Mask::full(1, 3), -1.0),
            Err(Error::Domain { .. })
        ));
        let all_masked = Mask::new(1, 3, vec![false; 3]).unwrap();
        assert!(matches!(
            s.softmax_masked(&all_masked, 1.0),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn softmax_masked_positions_are_exactly_zero_and_rows_sum_to_one() {
        let tape = Tape::new();
        let s = tape.leaf(tensor2(3, 4, &[
            1.0, -2.0, 0.5, 9.0, //
            0.0, 0.0, 0.0, 0.0, //
            -5.0, 3.0, 2.0, 1.0,
        ]));
        let mask = Mask::new(1, 4, vec![true, true, true, false]).unwrap();
        let y = s.softmax_masked(&mask, 0.7).unwrap();
        let v = y.value();
        for r in 0..3 {
            assert_eq!(v.get2(r, 3), 0.0);
            let sum: f64 = (0..4).map(|c| v.get2(r, c)).sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for c in 0..4 {
                assert!((0.0..=1.0).contains(&v.get2(r, c)));
            }
        }
    }

    #[test]
    fn softmax_tends_to_uniform_at_high_temperature() {
        let tape = Tape::new();
        let s = tape.leaf(tensor2(1, 4, &[0.3, -1.2, 5.0, 2.2]));
        let mask = Mask::new(1, 4, vec![true, true, false, true]).unwrap();
        let y = s.softmax_masked(&mask, 1e6).unwrap();
        let third = 1.0 / 3.0;
        for c in [0usize, 1, 3] {
            assert!((y.value().get2(0, c) - third).abs() <= 1e-5);
        }
    }

    #[test]
    fn bce_values() {
        let tape = Tape::new();
        // zero logits -> ln 2 regardless of targets
        let z = tape.leaf(Tensor::zeros(vec![4]));
        let y = Tensor::new(vec![4], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let loss = z.bce_with_logits(&y).unwrap();
        assert!((loss.value().item() - 2.0f64.ln()).abs() < 1e-15);

        // saturated correct prediction: tiny loss, no overflow
        let z = tape.leaf(Tensor::new(vec![1], vec![50.0]).unwrap());
        let y = Tensor::new(vec![1], vec![1.0]).unwrap();
        let loss = z.bce_with_logits(&y).unwrap();
        assert!(loss.value().item() <= 1e-20);
        assert!(loss.value().item() >= 0.0);

        // length mismatch
        let z = tape.leaf(Tensor::zeros(vec![3]));
        let y = Tensor::zeros(vec![4]);
        assert!(matches!(
            z.bce_with_logits(&y),
            Err(Error::Dimension { .. })
        ));

        // non-binary target
        let z = tape.leaf(Tensor::zeros(vec![2]));
        let y = Tensor::new(vec![2], vec![0.5, 1.0]).unwrap();
        assert!(matches!(
            z.bce_with_logits(&y),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn bce_fused_matches_naive_formula_at_moderate_logits() {
        let mut rng = crate::numerics::rng::Rng::new(77);
        let l = 7;
        let z: Vec<f64> = (0..l).map(|_| rng.normal() * 3.0).collect();
        let y: Vec<f64> = (0..l).map(|_| f64::from(rng.below(2) as u32)).collect();
        let naive = -z
            .iter()
            .zip(&y)
            .map(|(&zi, &yi)| {
                let p = 1.0 / (1.0 + (-zi).exp());
                yi * p.ln() + (1.0 - yi) * (1.0 - p).ln()
            })
            .sum::<f64>()
            / l as f64;
        let tape = Tape::new();
        let zv = tape.leaf(Tensor::new(vec![l], z).unwrap());
        let loss = zv
            .bce_with_logits(&Tensor::new(vec![l], y).unwrap())
            .unwrap();
        assert!((loss.value().item() - naive).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_matches_closed_form() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::new(vec![3], vec![0.0, 100.0, -1.3]).unwrap());
        let s = z.sigmoid();
        let v = s.value();
        assert_eq!(v.data()[0], 0.5);
        assert!((v.data()[1] - 1.0).abs() < 1e-15);
        assert!((v.data()[2] - 1.0 / (1.0 + 1.3f64.exp())).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_closed_forms() {
        let tape = Tape::new();
        let eps = 1e-5;
        // constant row -> bias
        let x = tape.leaf(tensor2(1, 3, &[4.0, 4.0, 4.0]));
        let gain = tape.leaf(Tensor::new(vec![3], vec![2.0, 3.0, 4.0]).unwrap());
        let bias = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.5, 9.0]).unwrap());
        let y = x.layer_norm(&gain, &bias, eps).unwrap();
        let b = bias.value();
        for (o, e) in y.value().data().iter().zip(b.data()) {
            assert!((o - e).abs() < 1e-12);
        }
        // [1,3] with unit gain, zero bias -> ±1 shrunk by the eps correction
        let x = tape.leaf(tensor2(1, 2, &[1.0, 3.0]));
        let gain = tape.leaf(Tensor::full(vec![2], 1.0));
        let bias = tape.leaf(Tensor::zeros(vec![2]));
        let y = x.layer_norm(&gain, &bias, eps).unwrap();
        let expect = 1.0 / (1.0 + eps).sqrt();
        assert!((y.value().data()[0] + expect).abs() < 1e-14);
        assert!((y.value().data()[1] - expect).abs() < 1e-14);
    }

    #[test]
    fn backward_of_simple_chain_matches_hand_derivation() {
        // f = mean(sigmoid(A·x)) with tiny fixed numbers
        let tape = Tape::new();
        let a = tape.leaf(tensor2(2, 2, &[1.0, -1.0, 0.5, 2.0]));
        let x = tape.leaf(tensor2(2, 1, &[0.3, -0.2]));
        let y = a.matmul(&x).unwrap().sigmoid().mean_all();
        let grads = tape.backward(&y).unwrap();
        let gx = grads.wrt(&x).unwrap();
        // hand: z = [0.5, -0.25]; dz_i = s_i(1-s_i)/2; dx = Aᵀ dz
        let s0 = kernels::sigmoid(0.5);
        let s1 = kernels::sigmoid(-0.25);
        let dz0 = s0 * (1.0 - s0) / 2.0;
        let dz1 = s1 * (1.0 - s1) / 2.0;
        let want = [dz0 + 0.5 * dz1, -dz0 + 2.0 * dz1];
        assert!((gx.data()[0] - want[0]).abs() < 1e-14);
        assert!((gx.data()[1] - want[1]).abs() < 1e-14);
    }

    #[test]
    fn backward_requires_scalar_finite_loss() {
        let tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            tape.backward(&v),
            Err(Error::Validation { .. })
        ));
        let inf = tape.leaf(Tensor::scalar(f64::INFINITY));
        assert!(matches!(tape.backward(&inf), Err(Error::Numeric { .. })));
    }

    #[test]
    fn split_and_merge_heads_round_trip() {
        let (batch, seq, heads, dh) = (2, 3, 2, 2);
        let d = heads * dh;
        let tape = Tape::new();
        let data: Vec<f64> = (0..batch * seq * d).map(|x| x as f64).collect();
        let x = tape.leaf(Tensor::new(vec![batch * seq, d], data.clone()).unwrap());
        let split = x.split_heads(batch, seq, heads).unwrap();
        assert_eq!(split.shape(), vec![batch * heads, seq, dh]);
        // b=0,h=1,s=2 block is the second half of row (0,2)
        assert_eq!(split.value().get3(1, 2, 0), x.value().get2(2, 2));
        let merged = split.merge_heads(batch, seq, heads).unwrap();
        assert_eq!(merged.value().data(), &data[..]);
    }
}
