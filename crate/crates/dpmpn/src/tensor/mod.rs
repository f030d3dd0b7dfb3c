//! Dense f32 tensors with a reverse-mode differentiation tape.
//!
//! The op set is deliberately small: matrix products, a few elementwise
//! functions, explicit concat/gather/scatter (no implicit broadcasting
//! beyond scalars), and the segment reductions that graph aggregation and
//! per-source softmax need. Every op records enough on the tape to run the
//! reverse pass exactly once, in reverse recording order.

pub mod optim;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Dense row-major f32 tensor. Cloning is cheap (shared storage).
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f32>>,
    node: Option<usize>,
}

impl Tensor {
    /// An untracked constant; gradients never flow into it.
    pub fn constant(data: Vec<f32>, shape: &[usize]) -> Tensor {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length must match shape"
        );
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(data),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(vec![0.0; shape.iter().product()], shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self) -> f32 {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    fn rows_width(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (self.shape[0], 1),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("expected rank 1 or 2 tensor"),
        }
    }
}

/// Saved input reference: where to send gradients plus the forward value.
#[derive(Clone)]
struct Arg {
    node: Option<usize>,
    data: Rc<Vec<f32>>,
}

impl Arg {
    fn of(t: &Tensor) -> Arg {
        Arg {
            node: t.node,
            data: Rc::clone(&t.data),
        }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Arg,
        b: Arg,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Arg,
        b: Arg,
    },
    Mul {
        a: Arg,
        b: Arg,
    },
    Scale {
        a: Arg,
        c: f32,
    },
    LeakyRelu {
        a: Arg,
        slope: f32,
    },
    Tanh {
        a: Arg,
        out: Rc<Vec<f32>>,
    },
    ConcatCols {
        parts: Vec<Arg>,
        widths: Vec<usize>,
        rows: usize,
    },
    GatherRows {
        a: Arg,
        idx: Rc<Vec<usize>>,
        width: usize,
    },
    ScatterRows {
        a: Arg,
        pos: Rc<Vec<usize>>,
        width: usize,
    },
    SegmentSum {
        a: Arg,
        ids: Rc<Vec<usize>>,
        width: usize,
    },
    SegmentSoftmax {
        a: Arg,
        ids: Rc<Vec<usize>>,
        out: Rc<Vec<f32>>,
    },
    SumAll {
        a: Arg,
        len: usize,
    },
    RowSum {
        a: Arg,
        width: usize,
    },
    ScaleRows {
        a: Arg,
        s: Arg,
        width: usize,
    },
    AddBias {
        a: Arg,
        b: Arg,
        width: usize,
    },
    DivScalar {
        a: Arg,
        s: Arg,
    },
    NegLogClamped {
        a: Arg,
        eps: f32,
    },
}

struct Node {
    op: Op,
    len: usize,
}

/// Recording tape. One tape per forward/backward pass; single-threaded.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], keyed by tape node.
pub struct Gradients {
    by_node: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a tracked tensor, if it participated.
    pub fn get(&self, t: &Tensor) -> Option<&[f32]> {
        let node = t.node?;
        self.by_node.get(node)?.as_deref()
    }

    /// Gradient for a leaf; zeros when the leaf did not participate.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f32> {
        match self.get(t) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.len()],
        }
    }
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, op: Op, len: usize) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, len });
        nodes.len() - 1
    }

    fn result(
        &self,
        data: Vec<f32>,
        shape: Vec<usize>,
        tracked: bool,
        op: impl FnOnce() -> Op,
    ) -> Tensor {
        let node = if tracked {
            Some(self.push(op(), data.len()))
        } else {
            None
        };
        Tensor {
            shape,
            data: Rc::new(data),
            node,
        }
    }

    /// A tracked leaf; its gradient is available after `backward`.
    pub fn leaf(&self, data: Vec<f32>, shape: &[usize]) -> Tensor {
        assert_eq!(data.len(), shape.iter().product::<usize>());
        let node = self.push(Op::Leaf, data.len());
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(data),
            node: Some(node),
        }
    }

    /// `a[m,k] . b[k,n] -> [m,n]`
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
            return Err(shape_err(format!(
                "matmul: incompatible shapes {:?} x {:?}",
                a.shape, b.shape
            )));
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let arow = &a.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b.data[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let tracked = a.node.is_some() || b.node.is_some();
        Ok(self.result(out, vec![m, n], tracked, || Op::MatMul {
            a: Arg::of(a),
            b: Arg::of(b),
            m,
            k,
            n,
        }))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(shape_err(format!(
                "add: shape mismatch {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        let out: Vec<f32> = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(x, y)| x + y)
            .collect();
        let tracked = a.node.is_some() || b.node.is_some();
        Ok(self.result(out, a.shape.clone(), tracked, || Op::Add {
            a: Arg::of(a),
            b: Arg::of(b),
        }))
    }

    /// Elementwise (Hadamard) product of same-shape tensors.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(shape_err(format!(
                "mul: shape mismatch {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        let out: Vec<f32> = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(x, y)| x * y)
            .collect();
        let tracked = a.node.is_some() || b.node.is_some();
        Ok(self.result(out, a.shape.clone(), tracked, || Op::Mul {
            a: Arg::of(a),
            b: Arg::of(b),
        }))
    }

    /// Multiply by a compile-time scalar constant.
    pub fn scale(&self, a: &Tensor, c: f32) -> Tensor {
        let out: Vec<f32> = a.data.iter().map(|x| x * c).collect();
        self.result(out, a.shape.clone(), a.node.is_some(), || Op::Scale {
            a: Arg::of(a),
            c,
        })
    }

    pub fn leaky_relu(&self, a: &Tensor, slope: f32) -> Tensor {
        let out: Vec<f32> = a
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        self.result(out, a.shape.clone(), a.node.is_some(), || Op::LeakyRelu {
            a: Arg::of(a),
            slope,
        })
    }

    pub fn tanh(&self, a: &Tensor) -> Tensor {
        let out: Vec<f32> = a.data.iter().map(|x| x.tanh()).collect();
        let out = Rc::new(out);
        let shape = a.shape.clone();
        let node = if a.node.is_some() {
            Some(self.push(
                Op::Tanh {
                    a: Arg::of(a),
                    out: Rc::clone(&out),
                },
                out.len(),
            ))
        } else {
            None
        };
        Tensor {
            shape,
            data: out,
            node,
        }
    }

    /// Concatenate matrices along the column axis; all parts share a row count.
    pub fn concat_cols(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols: no parts"));
        }
        let rows = parts[0].rows_width().0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, w) = p.rows_width();
            if r != rows {
                return Err(shape_err(format!(
                    "concat_cols: row mismatch {r} vs {rows}"
                )));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0f32; rows * total];
        for i in 0..rows {
            let mut off = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                out[i * total + off..i * total + off + w]
                    .copy_from_slice(&p.data[i * w..(i + 1) * w]);
                off += w;
            }
        }
        let tracked = parts.iter().any(|p| p.node.is_some());
        Ok(
            self.result(out, vec![rows, total], tracked, || Op::ConcatCols {
                parts: parts.iter().map(|p| Arg::of(p)).collect(),
                widths,
                rows,
            }),
        )
    }

    /// Select rows by index (duplicates allowed); gradients scatter-add back.
    pub fn gather_rows(&self, a: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let (rows, width) = a.rows_width();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape_err(format!(
                "gather_rows: index {bad} out of range {rows}"
            )));
        }
        let mut out = vec![0.0f32; idx.len() * width];
        for (o, &i) in idx.iter().enumerate() {
            out[o * width..(o + 1) * width].copy_from_slice(&a.data[i * width..(i + 1) * width]);
        }
        let shape = if a.shape.len() == 1 {
            vec![idx.len()]
        } else {
            vec![idx.len(), width]
        };
        let idx = Rc::new(idx.to_vec());
        Ok(
            self.result(out, shape, a.node.is_some(), || Op::GatherRows {
                a: Arg::of(a),
                idx,
                width,
            }),
        )
    }

    /// Place row `i` of `a` at row `pos[i]` of an otherwise-zero output with
    /// `n_rows` rows. Positions must be distinct.
    pub fn scatter_rows(&self, a: &Tensor, pos: &[usize], n_rows: usize) -> Result<Tensor> {
        let (rows, width) = a.rows_width();
        if pos.len() != rows {
            return Err(shape_err(format!(
                "scatter_rows: {} positions for {} rows",
                pos.len(),
                rows
            )));
        }
        if let Some(&bad) = pos.iter().find(|&&p| p >= n_rows) {
            return Err(shape_err(format!(
                "scatter_rows: position {bad} out of range {n_rows}"
            )));
        }
        let mut out = vec![0.0f32; n_rows * width];
        for (i, &p) in pos.iter().enumerate() {
            out[p * width..(p + 1) * width].copy_from_slice(&a.data[i * width..(i + 1) * width]);
        }
        let shape = if a.shape.len() == 1 {
            vec![n_rows]
        } else {
            vec![n_rows, width]
        };
        let pos = Rc::new(pos.to_vec());
        Ok(
            self.result(out, shape, a.node.is_some(), || Op::ScatterRows {
                a: Arg::of(a),
                pos,
                width,
            }),
        )
    }

    /// Row `s` of the output is the sum of input rows with `ids[e] == s`;
    /// segments with no members are zero rows.
    pub fn segment_sum(&self, a: &Tensor, ids: &[usize], n_segments: usize) -> Result<Tensor> {
        let (rows, width) = a.rows_width();
        if ids.len() != rows {
            return Err(shape_err(format!(
                "segment_sum: {} ids for {} rows",
                ids.len(),
                rows
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n_segments) {
            return Err(shape_err(format!(
                "segment_sum: segment id {bad} out of range {n_segments}"
            )));
        }
        let mut out = vec![0.0f32; n_segments * width];
        for (e, &s) in ids.iter().enumerate() {
            let dst = &mut out[s * width..(s + 1) * width];
            let src = &a.data[e * width..(e + 1) * width];
            for (d, v) in dst.iter_mut().zip(src) {
                *d += v;
            }
        }
        let shape = if a.shape.len() == 1 {
            vec![n_segments]
        } else {
            vec![n_segments, width]
        };
        let ids = Rc::new(ids.to_vec());
        Ok(
            self.result(out, shape, a.node.is_some(), || Op::SegmentSum {
                a: Arg::of(a),
                ids,
                width,
            }),
        )
    }

    /// Softmax within each segment of a score vector, with per-segment max
    /// subtraction. Every segment in `0..n_segments` must be non-empty.
    pub fn segment_softmax(&self, a: &Tensor, ids: &[usize], n_segments: usize) -> Result<Tensor> {
        if a.shape.len() != 1 {
            return Err(shape_err("segment_softmax: expected rank-1 scores"));
        }
        if ids.len() != a.len() {
            return Err(shape_err(format!(
                "segment_softmax: {} ids for {} scores",
                ids.len(),
                a.len()
            )));
        }
        let mut maxes = vec![f32::NEG_INFINITY; n_segments];
        for (e, &s) in ids.iter().enumerate() {
            if s >= n_segments {
                return Err(shape_err(format!(
                    "segment_softmax: segment id {s} out of range {n_segments}"
                )));
            }
            maxes[s] = maxes[s].max(a.data[e]);
        }
        if maxes.iter().any(|m| m.is_infinite()) {
            return Err(shape_err("segment_softmax: empty segment"));
        }
        let mut out: Vec<f32> = ids
            .iter()
            .zip(a.data.iter())
            .map(|(&s, &x)| (x - maxes[s]).exp())
            .collect();
        let mut sums = vec![0.0f32; n_segments];
        for (e, &s) in ids.iter().enumerate() {
            sums[s] += out[e];
        }
        for (e, &s) in ids.iter().enumerate() {
            out[e] /= sums[s];
        }
        let out = Rc::new(out);
        let shape = a.shape.clone();
        let node = if a.node.is_some() {
            let op = Op::SegmentSoftmax {
                a: Arg::of(a),
                ids: Rc::new(ids.to_vec()),
                out: Rc::clone(&out),
            };
            Some(self.push(op, out.len()))
        } else {
            None
        };
        Ok(Tensor {
            shape,
            data: out,
            node,
        })
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&self, a: &Tensor) -> Tensor {
        let s: f32 = a.data.iter().sum();
        let len = a.len();
        self.result(vec![s], vec![1], a.node.is_some(), || Op::SumAll {
            a: Arg::of(a),
            len,
        })
    }

    /// Per-row sum of a matrix: `[n,d] -> [n]`.
    pub fn row_sum(&self, a: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 2 {
            return Err(shape_err("row_sum: expected rank-2 input"));
        }
        let (rows, width) = a.rows_width();
        let out: Vec<f32> = (0..rows)
            .map(|i| a.data[i * width..(i + 1) * width].iter().sum())
            .collect();
        Ok(
            self.result(out, vec![rows], a.node.is_some(), || Op::RowSum {
                a: Arg::of(a),
                width,
            }),
        )
    }

    /// Scale row `i` of `a` by `s[i]`.
    pub fn scale_rows(&self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        let (rows, width) = a.rows_width();
        if s.shape.len() != 1 || s.len() != rows {
            return Err(shape_err(format!(
                "scale_rows: scale shape {:?} for {} rows",
                s.shape, rows
            )));
        }
        let mut out = vec![0.0f32; rows * width];
        for i in 0..rows {
            let f = s.data[i];
            for j in 0..width {
                out[i * width + j] = a.data[i * width + j] * f;
            }
        }
        let tracked = a.node.is_some() || s.node.is_some();
        Ok(
            self.result(out, a.shape.clone(), tracked, || Op::ScaleRows {
                a: Arg::of(a),
                s: Arg::of(s),
                width,
            }),
        )
    }

    /// Add a `[d]` bias vector to every row of an `[n,d]` matrix.
    pub fn add_bias(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (rows, width) = a.rows_width();
        if b.shape.len() != 1 || b.len() != width {
            return Err(shape_err(format!(
                "add_bias: bias shape {:?} for width {}",
                b.shape, width
            )));
        }
        let mut out = vec![0.0f32; rows * width];
        for i in 0..rows {
            for j in 0..width {
                out[i * width + j] = a.data[i * width + j] + b.data[j];
            }
        }
        let tracked = a.node.is_some() || b.node.is_some();
        Ok(self.result(out, a.shape.clone(), tracked, || Op::AddBias {
            a: Arg::of(a),
            b: Arg::of(b),
            width,
        }))
    }

    /// Divide every element by a `[1]` scalar tensor.
    pub fn div_scalar(&self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        if s.len() != 1 {
            return Err(shape_err("div_scalar: divisor must be a scalar tensor"));
        }
        let d = s.data[0];
        let out: Vec<f32> = a.data.iter().map(|x| x / d).collect();
        let tracked = a.node.is_some() || s.node.is_some();
        Ok(
            self.result(out, a.shape.clone(), tracked, || Op::DivScalar {
                a: Arg::of(a),
                s: Arg::of(s),
            }),
        )
    }

    /// `-ln(max(x, eps))` of a `[1]` tensor. Below the floor the value is the
    /// constant `-ln(eps)` and the gradient is zero.
    pub fn neg_log_clamped(&self, a: &Tensor, eps: f32) -> Result<Tensor> {
        if a.len() != 1 {
            return Err(shape_err("neg_log_clamped: expected scalar input"));
        }
        let out = -(a.data[0].max(eps)).ln();
        Ok(
            self.result(vec![out], vec![1], a.node.is_some(), || Op::NegLogClamped {
                a: Arg::of(a),
                eps,
            }),
        )
    }

    /// Reverse pass from a scalar loss. Every tracked leaf recorded before
    /// the loss gets a gradient; leaves that did not participate get zeros.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let root = loss
            .node
            .ok_or_else(|| Error::Numeric("backward: loss is not on the tape".into()))?;
        if loss.len() != 1 {
            return Err(Error::Numeric("backward: loss must be scalar".into()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            apply_backward(&nodes[id].op, &g, &mut grads);
            grads[id] = Some(g);
        }
        // Leaves that never received flow report zeros.
        for (id, node) in nodes.iter().enumerate().take(root + 1) {
            if matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(vec![0.0; node.len]);
            }
        }
        Ok(Gradients { by_node: grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], arg: &Arg, add: impl FnOnce(&mut [f32])) {
    let Some(node) = arg.node else { return };
    let buf = grads[node].get_or_insert_with(|| vec![0.0; arg.data.len()]);
    add(buf);
}

fn apply_backward(op: &Op, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            accumulate(grads, a, |ga| {
                // dA = dOut . B^T
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * b.data[p * n + j];
                        }
                        ga[i * k + p] += acc;
                    }
                }
            });
            accumulate(grads, b, |gb| {
                // dB = A^T . dOut
                for i in 0..m {
                    for p in 0..k {
                        let av = a.data[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[p * n + j] += av * g[i * n + j];
                        }
                    }
                }
            });
        }
        Op::Add { a, b } => {
            accumulate(grads, a, |ga| {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            });
            accumulate(grads, b, |gb| {
                for (x, y) in gb.iter_mut().zip(g) {
                    *x += y;
                }
            });
        }
        Op::Mul { a, b } => {
            accumulate(grads, a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * b.data[i];
                }
            });
            accumulate(grads, b, |gb| {
                for i in 0..g.len() {
                    gb[i] += g[i] * a.data[i];
                }
            });
        }
        Op::Scale { a, c } => {
            accumulate(grads, a, |ga| {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += c * y;
                }
            });
        }
        Op::LeakyRelu { a, slope } => {
            accumulate(grads, a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * if a.data[i] > 0.0 { 1.0 } else { *slope };
                }
            });
        }
        Op::Tanh { a, out } => {
            accumulate(grads, a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            });
        }
        Op::ConcatCols {
            parts,
            widths,
            rows,
        } => {
            let total: usize = widths.iter().sum();
            let mut off = 0;
            for (part, &w) in parts.iter().zip(widths) {
                accumulate(grads, part, |gp| {
                    for i in 0..*rows {
                        for j in 0..w {
                            gp[i * w + j] += g[i * total + off + j];
                        }
                    }
                });
                off += w;
            }
        }
        Op::GatherRows { a, idx, width } => {
            accumulate(grads, a, |ga| {
                for (o, &i) in idx.iter().enumerate() {
                    for j in 0..*width {
                        ga[i * width + j] += g[o * width + j];
                    }
                }
            });
        }
        Op::ScatterRows { a, pos, width } => {
            accumulate(grads, a, |ga| {
                for (i, &p) in pos.iter().enumerate() {
                    for j in 0..*width {
                        ga[i * width + j] += g[p * width + j];
                    }
                }
            });
        }
        Op::SegmentSum { a, ids, width } => {
            accumulate(grads, a, |ga| {
                for (e, &s) in ids.iter().enumerate() {
                    for j in 0..*width {
                        ga[e * width + j] += g[s * width + j];
                    }
                }
            });
        }
        Op::SegmentSoftmax { a, ids, out } => {
            accumulate(grads, a, |ga| {
                let n_segments = ids.iter().copied().max().map_or(0, |m| m + 1);
                let mut dots = vec![0.0f32; n_segments];
                for (e, &s) in ids.iter().enumerate() {
                    dots[s] += g[e] * out[e];
                }
                for (e, &s) in ids.iter().enumerate() {
                    ga[e] += out[e] * (g[e] - dots[s]);
                }
            });
        }
        Op::SumAll { a, len } => {
            accumulate(grads, a, |ga| {
                for x in ga.iter_mut().take(*len) {
                    *x += g[0];
                }
            });
        }
        Op::RowSum { a, width } => {
            accumulate(grads, a, |ga| {
                for (i, &gi) in g.iter().enumerate() {
                    for j in 0..*width {
                        ga[i * width + j] += gi;
                    }
                }
            });
        }
        Op::ScaleRows { a, s, width } => {
            let rows = s.data.len();
            accumulate(grads, a, |ga| {
                for i in 0..rows {
                    for j in 0..*width {
                        ga[i * width + j] += g[i * width + j] * s.data[i];
                    }
                }
            });
            accumulate(grads, s, |gs| {
                for i in 0..rows {
                    let mut acc = 0.0;
                    for j in 0..*width {
                        acc += g[i * width + j] * a.data[i * width + j];
                    }
                    gs[i] += acc;
                }
            });
        }
        Op::AddBias { a, b, width } => {
            accumulate(grads, a, |ga| {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            });
            accumulate(grads, b, |gb| {
                for (e, &gv) in g.iter().enumerate() {
                    gb[e % width] += gv;
                }
            });
        }
        Op::DivScalar { a, s } => {
            let d = s.data[0];
            accumulate(grads, a, |ga| {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y / d;
                }
            });
            accumulate(grads, s, |gs| {
                let mut acc = 0.0;
                for (i, &gv) in g.iter().enumerate() {
                    acc += gv * a.data[i];
                }
                gs[0] += -acc / (d * d);
            });
        }
        Op::NegLogClamped { a, eps } => {
            let x = a.data[0];
            if x > *eps {
                accumulate(grads, a, |ga| {
                    ga[0] += -g[0] / x;
                });
            }
        }
    }
}
