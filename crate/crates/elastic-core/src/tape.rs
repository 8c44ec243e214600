//! Dense 2-D tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation eagerly: issuing an op computes the
//! result immediately and appends a node. [`Tape::backward`] replays the
//! record in reverse, accumulating gradients into each node that requires
//! them. The op set is deliberately small — matrix product, same-shape (or
//! scalar-broadcast) elementwise ops, activations, row-wise normalisations,
//! slicing/concatenation, and a straight-through rounding op — and every
//! model in the crate is composed from it, so one finite-difference suite
//! covers the whole training stack.
//!
//! Parameters live outside the tape in [`ParamTensor`]s. Recording a
//! parameter copies the top-left sub-block onto the tape and remembers a
//! caller-chosen slot id; after `backward`, [`Tape::fold_param_grads`]
//! hands the block gradients back in record order so the caller can
//! scatter-add them into the full-size accumulators. That gather/scatter
//! pair is what lets arbitrarily sliced submodels share one weight store.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;

/// Handle to a node recorded on a tape. Only meaningful for the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One recorded tensor: row-major values plus an optional gradient buffer
/// of identical shape. `grad` is `Some` exactly when `requires_grad` held
/// during the last backward sweep.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    fn new(rows: usize, cols: usize, data: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Tensor {
            rows,
            cols,
            data,
            grad: None,
            requires_grad,
        }
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

/// A trainable tensor living outside any tape, with a persistent gradient
/// accumulator the optimiser consumes. `grad` always has the same length
/// as `data`; entries never touched by a backward pass stay exactly zero,
/// which downstream code uses to tell "absent from the submodel" apart
/// from "present with zero gradient" only where that distinction is safe.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ParamTensor {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
            grad: vec![T::zero(); rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, v: T) -> Self {
        ParamTensor {
            rows,
            cols,
            data: vec![v; rows * cols],
            grad: vec![T::zero(); rows * cols],
        }
    }

    /// Centred Gaussian init with the given standard deviation.
    pub fn normal<R: rand::Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| T::lit(crate::rng::standard_normal(rng) * std))
            .collect();
        ParamTensor {
            rows,
            cols,
            data,
            grad: vec![T::zero(); rows * cols],
        }
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grad {
            *g = T::zero();
        }
    }
}

/// Backward metadata for one recorded node. Variants stash exactly what
/// their backward rule needs and nothing else.
enum Op<T> {
    /// Independent input (constant or differentiable leaf).
    Leaf,
    /// Top-left block gathered from a [`ParamTensor`]; `slot` is the
    /// caller's id for the source tensor.
    Param { slot: usize },
    Matmul { a: Var, b: Var },
    /// Elementwise add; operands share a shape or one side is 1×1.
    Add { a: Var, b: Var },
    /// Elementwise multiply; same broadcast rule as `Add`.
    Mul { a: Var, b: Var },
    Scale { a: Var, k: T },
    Gelu { a: Var },
    Sigmoid { a: Var },
    /// `max(x, lo)`; gradient passes only where `x > lo`.
    ClampMin { a: Var, lo: T },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    SoftmaxRows { a: Var },
    Transpose { a: Var },
    Reshape { a: Var },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    /// Mean negative log-likelihood of row logits against integer labels.
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    /// Forward: hard threshold of the soft input. Backward: identity into
    /// the soft input, i.e. the estimator that pretends rounding is linear.
    StraightThrough { soft: Var },
}

/// Eager reverse-mode tape. One tape per training step; drop it afterwards.
pub struct Tape<T> {
    nodes: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0]
    }

    /// Gradient of a node, if the last backward sweep produced one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, t: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(t);
        self.ops.push(op);
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- inputs -----------------------------------------------------------

    /// Non-differentiable input.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::Dim {
                op: "constant",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(Tensor::new(rows, cols, data, false), Op::Leaf))
    }

    /// Differentiable input that is not tied to a parameter slot (used by
    /// tests and one-off probes).
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::Dim {
                op: "leaf",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(Tensor::new(rows, cols, data, true), Op::Leaf))
    }

    /// Record the top-left `rows × cols` block of a parameter tensor.
    /// The block is copied; after `backward`, its gradient is retrievable
    /// via [`Tape::fold_param_grads`] under the given slot id.
    pub fn param_block(
        &mut self,
        slot: usize,
        p: &ParamTensor<T>,
        rows: usize,
        cols: usize,
    ) -> Result<Var> {
        if rows > p.rows || cols > p.cols || rows == 0 || cols == 0 {
            return Err(Error::Dim {
                op: "param_block",
                lhs: vec![rows, cols],
                rhs: vec![p.rows, p.cols],
            });
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            data.extend_from_slice(&p.data[i * p.cols..i * p.cols + cols]);
        }
        Ok(self.push(Tensor::new(rows, cols, data, true), Op::Param { slot }))
    }

    // ---- ops --------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let (br, bc) = (self.nodes[b.0].rows, self.nodes[b.0].cols);
        if ac != br {
            return Err(Error::Dim {
                op: "matmul",
                lhs: vec![ar, ac],
                rhs: vec![br, bc],
            });
        }
        let data = kernels::matmul(&self.nodes[a.0].data, &self.nodes[b.0].data, ar, ac, bc);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(ar, bc, data, req), Op::Matmul { a, b }))
    }

    fn ew_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ar, ac) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
        let (br, bc) = (self.nodes[b.0].rows, self.nodes[b.0].cols);
        let a_scalar = ar == 1 && ac == 1;
        let b_scalar = br == 1 && bc == 1;
        if (ar, ac) == (br, bc) || a_scalar || b_scalar {
            Ok((ar.max(br), ac.max(bc)))
        } else {
            Err(Error::Dim {
                op,
                lhs: vec![ar, ac],
                rhs: vec![br, bc],
            })
        }
    }

    /// Elementwise sum. Shapes must match, or one operand is 1×1 and is
    /// broadcast against the other.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.ew_shapes("add", a, b)?;
        let (av, bv) = (&self.nodes[a.0], &self.nodes[b.0]);
        let data: Vec<T> = if av.numel() == 1 {
            let s = av.data[0];
            bv.data.iter().map(|&x| s + x).collect()
        } else if bv.numel() == 1 {
            let s = bv.data[0];
            av.data.iter().map(|&x| x + s).collect()
        } else {
            av.data.iter().zip(&bv.data).map(|(&x, &y)| x + y).collect()
        };
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(rows, cols, data, req), Op::Add { a, b }))
    }

    /// Elementwise (Hadamard) product, same broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.ew_shapes("mul", a, b)?;
        let (av, bv) = (&self.nodes[a.0], &self.nodes[b.0]);
        let data: Vec<T> = if av.numel() == 1 {
            let s = av.data[0];
            bv.data.iter().map(|&x| s * x).collect()
        } else if bv.numel() == 1 {
            let s = bv.data[0];
            av.data.iter().map(|&x| x * s).collect()
        } else {
            av.data.iter().zip(&bv.data).map(|(&x, &y)| x * y).collect()
        };
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(rows, cols, data, req), Op::Mul { a, b }))
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let k = T::lit(k);
        let src = &self.nodes[a.0];
        let data: Vec<T> = src.data.iter().map(|&x| x * k).collect();
        let t = Tensor::new(src.rows, src.cols, data, src.requires_grad);
        self.push(t, Op::Scale { a, k })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0];
        let data: Vec<T> = src.data.iter().map(|&x| kernels::gelu_val(x)).collect();
        let t = Tensor::new(src.rows, src.cols, data, src.requires_grad);
        self.push(t, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0];
        let data: Vec<T> = src.data.iter().map(|&x| kernels::sigmoid_val(x)).collect();
        let t = Tensor::new(src.rows, src.cols, data, src.requires_grad);
        self.push(t, Op::Sigmoid { a })
    }

    /// Elementwise `max(x, lo)`.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let lo = T::lit(lo);
        let src = &self.nodes[a.0];
        let data: Vec<T> = src.data.iter().map(|&x| x.max(lo)).collect();
        let t = Tensor::new(src.rows, src.cols, data, src.requires_grad);
        self.push(t, Op::ClampMin { a, lo })
    }

    /// Row-wise layer normalisation; `gamma`/`beta` are 1×C and broadcast
    /// over rows.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = (self.nodes[x.0].rows, self.nodes[x.0].cols);
        for (name, v) in [("layernorm gamma", gamma), ("layernorm beta", beta)] {
            let t = &self.nodes[v.0];
            if t.rows != 1 || t.cols != cols {
                return Err(Error::Dim {
                    op: name,
                    lhs: vec![rows, cols],
                    rhs: vec![t.rows, t.cols],
                });
            }
        }
        let (y, xhat, inv_std) = kernels::layernorm_rows(
            &self.nodes[x.0].data,
            &self.nodes[gamma.0].data,
            &self.nodes[beta.0].data,
            T::lit(eps),
            rows,
            cols,
        );
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            Tensor::new(rows, cols, y, req),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0];
        let data = kernels::softmax_rows(&src.data, src.rows, src.cols);
        let t = Tensor::new(src.rows, src.cols, data, src.requires_grad);
        self.push(t, Op::SoftmaxRows { a })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0];
        let data = kernels::transpose(&src.data, src.rows, src.cols);
        let t = Tensor::new(src.cols, src.rows, data, src.requires_grad);
        self.push(t, Op::Transpose { a })
    }

    /// Reinterpret the buffer with a new shape of identical element count.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let src = &self.nodes[a.0];
        if rows * cols != src.numel() {
            return Err(Error::Dim {
                op: "reshape",
                lhs: vec![src.rows, src.cols],
                rhs: vec![rows, cols],
            });
        }
        let t = Tensor::new(rows, cols, src.data.clone(), src.requires_grad);
        Ok(self.push(t, Op::Reshape { a }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = &self.nodes[a.0];
        if start + len > src.rows || len == 0 {
            return Err(Error::Dim {
                op: "slice_rows",
                lhs: vec![src.rows, src.cols],
                rhs: vec![start, len],
            });
        }
        let cols = src.cols;
        let data = src.data[start * cols..(start + len) * cols].to_vec();
        let t = Tensor::new(len, cols, data, src.requires_grad);
        Ok(self.push(t, Op::SliceRows { a, start }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = &self.nodes[a.0];
        if start + len > src.cols || len == 0 {
            return Err(Error::Dim {
                op: "slice_cols",
                lhs: vec![src.rows, src.cols],
                rhs: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(src.rows * len);
        for i in 0..src.rows {
            data.extend_from_slice(&src.data[i * src.cols + start..i * src.cols + start + len]);
        }
        let t = Tensor::new(src.rows, len, data, src.requires_grad);
        Ok(self.push(t, Op::SliceCols { a, start }))
    }

    /// Stack parts vertically; all must share a column count. Parts may
    /// repeat the same `Var` (used to tile broadcast rows).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Input("concat_rows: no parts".into()));
        }
        let cols = self.nodes[parts[0].0].cols;
        let mut rows = 0;
        let mut req = false;
        for &p in parts {
            let t = &self.nodes[p.0];
            if t.cols != cols {
                return Err(Error::Dim {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: vec![t.rows, t.cols],
                });
            }
            rows += t.rows;
            req |= t.requires_grad;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        Ok(self.push(
            Tensor::new(rows, cols, data, req),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Stack parts horizontally; all must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Input("concat_cols: no parts".into()));
        }
        let rows = self.nodes[parts[0].0].rows;
        let mut cols = 0;
        let mut req = false;
        for &p in parts {
            let t = &self.nodes[p.0];
            if t.rows != rows {
                return Err(Error::Dim {
                    op: "concat_cols",
                    lhs: vec![rows, cols],
                    rhs: vec![t.rows, t.cols],
                });
            }
            cols += t.cols;
            req |= t.requires_grad;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let t = &self.nodes[p.0];
                data.extend_from_slice(&t.data[i * t.cols..(i + 1) * t.cols]);
            }
        }
        Ok(self.push(
            Tensor::new(rows, cols, data, req),
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Broadcast a 1×C row to R×C by repetition.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let parts = vec![a; times];
        self.concat_rows(&parts)
    }

    /// Sum of all entries, as a 1×1 node (a matmul against ones, so no
    /// dedicated reduction op is needed).
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].numel();
        let flat = self.reshape(a, 1, n)?;
        let ones = self.constant(n, 1, vec![T::one(); n])?;
        self.matmul(flat, ones)
    }

    /// Mean cross-entropy between row logits and integer class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let src = &self.nodes[logits.0];
        if labels.len() != src.rows {
            return Err(Error::Dim {
                op: "cross_entropy",
                lhs: vec![src.rows, src.cols],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= src.cols) {
            return Err(Error::Input(alloc::format!(
                "cross_entropy: label {bad} out of range for {} classes",
                src.cols
            )));
        }
        let (loss, probs) = kernels::cross_entropy(&src.data, labels, src.rows, src.cols);
        let req = src.requires_grad;
        Ok(self.push(
            Tensor::new(1, 1, vec![loss], req),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Hard-threshold the soft gates at `threshold`, with identity backward
    /// into the soft input.
    pub fn straight_through(&mut self, soft: Var, threshold: f64) -> Var {
        let th = T::lit(threshold);
        let src = &self.nodes[soft.0];
        let data: Vec<T> = src
            .data
            .iter()
            .map(|&x| if x > th { T::one() } else { T::zero() })
            .collect();
        let t = Tensor::new(src.rows, src.cols, data, src.requires_grad);
        self.push(t, Op::StraightThrough { soft })
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a 1×1 loss node. Allocates zeroed gradients for
    /// every `requires_grad` node, seeds the loss with 1, then applies each
    /// backward rule in reverse record order. Deterministic: same record,
    /// same gradients, bit for bit.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = &self.nodes[loss.0];
        if lt.rows != 1 || lt.cols != 1 {
            return Err(Error::Dim {
                op: "backward",
                lhs: vec![lt.rows, lt.cols],
                rhs: vec![1, 1],
            });
        }
        if !lt.requires_grad {
            return Err(Error::Input(
                "backward: loss does not depend on any differentiable input".into(),
            ));
        }
        for n in &mut self.nodes {
            n.grad = if n.requires_grad {
                Some(vec![T::zero(); n.numel()])
            } else {
                None
            };
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = T::one();

        for idx in (0..self.ops.len()).rev() {
            // Take the output gradient out of the node so input gradients
            // can be written without aliasing; restored at the end.
            let Some(gout) = self.nodes[idx].grad.take() else {
                continue;
            };
            let (orows, ocols) = (self.nodes[idx].rows, self.nodes[idx].cols);
            match &self.ops[idx] {
                Op::Leaf | Op::Param { .. } => {}
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let n = ocols;
                    if self.requires(a) {
                        let da = kernels::matmul_nt(&gout, &self.nodes[b.0].data, m, n, k);
                        add_into(self.nodes[a.0].grad.as_mut().unwrap(), &da);
                    }
                    if self.requires(b) {
                        let db = kernels::matmul_tn(&self.nodes[a.0].data, &gout, m, k, n);
                        add_into(self.nodes[b.0].grad.as_mut().unwrap(), &db);
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    for v in [a, b] {
                        if !self.requires(v) {
                            continue;
                        }
                        if self.nodes[v.0].numel() == 1 && orows * ocols != 1 {
                            let s: T = gout.iter().copied().sum();
                            self.nodes[v.0].grad.as_mut().unwrap()[0] += s;
                        } else {
                            add_into(self.nodes[v.0].grad.as_mut().unwrap(), &gout);
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    for (v, other) in [(a, b), (b, a)] {
                        if !self.requires(v) {
                            continue;
                        }
                        let vn = self.nodes[v.0].numel();
                        if vn == 1 && orows * ocols != 1 {
                            // d(scalar) = Σ g ⊙ other
                            let s: T = gout
                                .iter()
                                .zip(&self.nodes[other.0].data)
                                .map(|(&g, &o)| g * o)
                                .sum();
                            self.nodes[v.0].grad.as_mut().unwrap()[0] += s;
                        } else if self.nodes[other.0].numel() == 1 {
                            let o = self.nodes[other.0].data[0];
                            let gv: Vec<T> = gout.iter().map(|&g| g * o).collect();
                            add_into(self.nodes[v.0].grad.as_mut().unwrap(), &gv);
                        } else {
                            let gv: Vec<T> = gout
                                .iter()
                                .zip(&self.nodes[other.0].data)
                                .map(|(&g, &o)| g * o)
                                .collect();
                            add_into(self.nodes[v.0].grad.as_mut().unwrap(), &gv);
                        }
                    }
                }
                Op::Scale { a, k } => {
                    let (a, k) = (*a, *k);
                    if self.requires(a) {
                        let gv: Vec<T> = gout.iter().map(|&g| g * k).collect();
                        add_into(self.nodes[a.0].grad.as_mut().unwrap(), &gv);
                    }
                }
                Op::Gelu { a } => {
                    let a = *a;
                    if self.requires(a) {
                        let gv: Vec<T> = gout
                            .iter()
                            .zip(&self.nodes[a.0].data)
                            .map(|(&g, &x)| g * kernels::gelu_grad(x))
                            .collect();
                        add_into(self.nodes[a.0].grad.as_mut().unwrap(), &gv);
                    }
                }
                Op::Sigmoid { a } => {
                    let a = *a;
                    if self.requires(a) {
                        let gv: Vec<T> = gout
                            .iter()
                            .zip(&self.nodes[idx].data)
                            .map(|(&g, &y)| g * y * (T::one() - y))
                            .collect();
                        add_into(self.nodes[a.0].grad.as_mut().unwrap(), &gv);
                    }
                }
                Op::ClampMin { a, lo } => {
                    let (a, lo) = (*a, *lo);
                    if self.requires(a) {
                        let gv: Vec<T> = gout
                            .iter()
                            .zip(&self.nodes[a.0].data)
                            .map(|(&g, &x)| if x > lo { g } else { T::zero() })
                            .collect();
                        add_into(self.nodes[a.0].grad.as_mut().unwrap(), &gv);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let cols = ocols;
                    let cn = T::from_usize(cols).unwrap();
                    let gdat = self.nodes[gamma.0].data.clone();
                    let xhat = xhat.clone();
                    let inv_std = inv_std.clone();
                    if self.requires(beta) {
                        let gb = self.nodes[beta.0].grad.as_mut().unwrap();
                        for i in 0..orows {
                            for j in 0..cols {
                                gb[j] += gout[i * cols + j];
                            }
                        }
                    }
                    if self.requires(gamma) {
                        let gg = self.nodes[gamma.0].grad.as_mut().unwrap();
                        for i in 0..orows {
                            for j in 0..cols {
                                gg[j] += gout[i * cols + j] * xhat[i * cols + j];
                            }
                        }
                    }
                    if self.requires(x) {
                        let gx = self.nodes[x.0].grad.as_mut().unwrap();
                        for i in 0..orows {
                            let grow = &gout[i * cols..(i + 1) * cols];
                            let hrow = &xhat[i * cols..(i + 1) * cols];
                            let mut sum_dh = T::zero();
                            let mut sum_dh_h = T::zero();
                            for j in 0..cols {
                                let dh = grow[j] * gdat[j];
                                sum_dh += dh;
                                sum_dh_h += dh * hrow[j];
                            }
                            let inv = inv_std[i];
                            for j in 0..cols {
                                let dh = grow[j] * gdat[j];
                                gx[i * cols + j] +=
                                    inv * (dh - (sum_dh + hrow[j] * sum_dh_h) / cn);
                            }
                        }
                    }
                }
                Op::SoftmaxRows { a } => {
                    let a = *a;
                    if self.requires(a) {
                        let y = self.nodes[idx].data.clone();
                        let ga = self.nodes[a.0].grad.as_mut().unwrap();
                        for i in 0..orows {
                            let yr = &y[i * ocols..(i + 1) * ocols];
                            let gr = &gout[i * ocols..(i + 1) * ocols];
                            let dot: T = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                            for j in 0..ocols {
                                ga[i * ocols + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::Transpose { a } => {
                    let a = *a;
                    if self.requires(a) {
                        let gt = kernels::transpose(&gout, orows, ocols);
                        add_into(self.nodes[a.0].grad.as_mut().unwrap(), &gt);
                    }
                }
                Op::Reshape { a } => {
                    let a = *a;
                    if self.requires(a) {
                        add_into(self.nodes[a.0].grad.as_mut().unwrap(), &gout);
                    }
                }
                Op::SliceRows { a, start } => {
                    let (a, start) = (*a, *start);
                    if self.requires(a) {
                        let cols = ocols;
                        let ga = self.nodes[a.0].grad.as_mut().unwrap();
                        for i in 0..orows {
                            for j in 0..cols {
                                ga[(start + i) * cols + j] += gout[i * cols + j];
                            }
                        }
                    }
                }
                Op::SliceCols { a, start } => {
                    let (a, start) = (*a, *start);
                    if self.requires(a) {
                        let scols = self.nodes[a.0].cols;
                        let ga = self.nodes[a.0].grad.as_mut().unwrap();
                        for i in 0..orows {
                            for j in 0..ocols {
                                ga[i * scols + start + j] += gout[i * ocols + j];
                            }
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let parts = parts.clone();
                    let mut row = 0;
                    for p in parts {
                        let prows = self.nodes[p.0].rows;
                        if self.requires(p) {
                            let seg = &gout[row * ocols..(row + prows) * ocols];
                            add_into(self.nodes[p.0].grad.as_mut().unwrap(), seg);
                        }
                        row += prows;
                    }
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let mut col = 0;
                    for p in parts {
                        let pcols = self.nodes[p.0].cols;
                        if self.requires(p) {
                            let gp = self.nodes[p.0].grad.as_mut().unwrap();
                            for i in 0..orows {
                                for j in 0..pcols {
                                    gp[i * pcols + j] += gout[i * ocols + col + j];
                                }
                            }
                        }
                        col += pcols;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let logits = *logits;
                    if self.requires(logits) {
                        let labels = labels.clone();
                        let probs = probs.clone();
                        let rows = self.nodes[logits.0].rows;
                        let cols = self.nodes[logits.0].cols;
                        let g = gout[0] / T::from_usize(rows).unwrap();
                        let gl = self.nodes[logits.0].grad.as_mut().unwrap();
                        for i in 0..rows {
                            for j in 0..cols {
                                let ind = if labels[i] == j { T::one() } else { T::zero() };
                                gl[i * cols + j] += g * (probs[i * cols + j] - ind);
                            }
                        }
                    }
                }
                Op::StraightThrough { soft } => {
                    let soft = *soft;
                    if self.requires(soft) {
                        add_into(self.nodes[soft.0].grad.as_mut().unwrap(), &gout);
                    }
                }
            }
            self.nodes[idx].grad = Some(gout);
        }
        Ok(())
    }

    /// Hand back parameter-block gradients in record order. The callback
    /// receives `(slot, rows, cols, grad)` with `grad` row-major over the
    /// recorded block; the caller scatter-adds it into its full tensors.
    pub fn fold_param_grads(&self, mut f: impl FnMut(usize, usize, usize, &[T])) {
        for (idx, op) in self.ops.iter().enumerate() {
            if let Op::Param { slot } = op {
                if let Some(g) = self.nodes[idx].grad.as_deref() {
                    let n = &self.nodes[idx];
                    f(*slot, n.rows, n.cols, g);
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
