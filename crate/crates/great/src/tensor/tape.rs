//! Recording tape for reverse-mode differentiation.
//!
//! Every primitive pushes one node holding its output values and enough
//! cached state to replay the operation backwards. [`Tape::backward`] seeds
//! the scalar loss with gradient 1 and walks the nodes in reverse, adding
//! each contribution into the input gradients, so fan-out accumulates
//! correctly. A tape is built per step and dropped afterwards.

use rand::Rng;

use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
///
/// Ids are only meaningful for the tape that issued them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Variance floor added inside batch normalization.
pub const BATCHNORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    /// a: m×k, b: k×n.
    MatMul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        x: TensorId,
        c: f64,
    },
    Abs {
        x: TensorId,
    },
    Relu {
        x: TensorId,
    },
    Sum {
        x: TensorId,
    },
    SumRows {
        x: TensorId,
        rows: usize,
        cols: usize,
    },
    /// Fixed (non-differentiated) weights over a vector.
    WeightedSum {
        x: TensorId,
        weights: Vec<f64>,
    },
    GatherRows {
        x: TensorId,
        rows: Vec<usize>,
        cols: usize,
    },
    /// Bias broadcast over all leading dimensions.
    AddBias {
        x: TensorId,
        b: TensorId,
        last: usize,
    },
    Reshape {
        x: TensorId,
    },
    /// Mask entries are 0 or 1/(1-rate).
    Dropout {
        x: TensorId,
        mask: Vec<f64>,
    },
    BatchNormTrain {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        rows: usize,
        cols: usize,
    },
    BatchNormEval {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        rows: usize,
        cols: usize,
    },
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        n: usize,
        h: usize,
        w: usize,
        cin: usize,
        kh: usize,
        kw: usize,
        cout: usize,
    },
    MaxPool2d {
        x: TensorId,
        /// Flat index into the input for each output element.
        argmax: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
        probs: Vec<f64>,
        rows: usize,
        cols: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Forward-pass recorder; see the module docs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, requires_grad: bool) -> TensorId {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            shape,
            values,
            op,
            requires_grad,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.node(*id).requires_grad)
    }

    /// Records an input value. Gradients flow back into it iff `requires_grad`.
    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<TensorId> {
        if numel(&shape) != values.len() {
            return Err(Error::Dimension {
                op: "leaf",
                msg: format!(
                    "shape {:?} implies {} values, got {}",
                    shape,
                    numel(&shape),
                    values.len()
                ),
            });
        }
        Ok(self.push(shape, values, Op::Leaf, requires_grad))
    }

    /// Records a tensor as an input, keeping its `requires_grad` flag.
    pub fn leaf_tensor(&mut self, t: &Tensor) -> TensorId {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Constant input; gradients never flow into it.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<TensorId> {
        self.leaf(shape, values, false)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.node(id).values
    }

    /// Scalar value of a rank-0 node.
    pub fn scalar_value(&self, id: TensorId) -> Result<f64> {
        let node = self.node(id);
        if node.values.len() == 1 {
            Ok(node.values[0])
        } else {
            Err(Error::Contract(format!(
                "expected scalar node, got shape {:?}",
                node.shape
            )))
        }
    }

    /// Gradient accumulated by the latest [`Tape::backward`] call.
    ///
    /// `None` when the node does not require gradients or backward has not
    /// reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Copies a node out of the tape as a plain tensor (values only).
    pub fn detach(&self, id: TensorId) -> Tensor {
        let node = self.node(id);
        Tensor::from_vec(node.shape.clone(), node.values.clone())
            .expect("tape nodes hold consistent shapes")
    }

    /// Matrix product of an m×k and a k×n node.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = &self.node(a).values;
        let bv = &self.node(b).values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += aip * b;
                }
            }
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Elementwise sum of two same-shape nodes.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .node(a)
            .values
            .iter()
            .zip(&self.node(b).values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(shape, out, Op::Add { a, b }, rg))
    }

    /// Elementwise difference of two same-shape nodes.
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let out: Vec<f64> = self
            .node(a)
            .values
            .iter()
            .zip(&self.node(b).values)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(shape, out, Op::Sub { a, b }, rg))
    }

    /// Elementwise product of two same-shape nodes.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .node(a)
            .values
            .iter()
            .zip(&self.node(b).values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(shape, out, Op::Mul { a, b }, rg))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.node(x).values.iter().map(|v| c * v).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.node(x).requires_grad;
        self.push(shape, out, Op::Scale { x, c }, rg)
    }

    /// Elementwise absolute value; subgradient 0 at 0.
    pub fn abs(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.node(x).values.iter().map(|v| v.abs()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.node(x).requires_grad;
        self.push(shape, out, Op::Abs { x }, rg)
    }

    /// Elementwise max(0, x); subgradient 0 at 0.
    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.node(x).values.iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.node(x).requires_grad;
        self.push(shape, out, Op::Relu { x }, rg)
    }

    /// Sum of all elements, as a rank-0 node.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let total: f64 = self.node(x).values.iter().sum();
        let rg = self.node(x).requires_grad;
        self.push(Vec::new(), vec![total], Op::Sum { x }, rg)
    }

    /// Row sums of an m×d node, as a length-m vector.
    pub fn sum_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension {
                op: "sum_rows",
                msg: format!("expected a 2-D node, got shape {shape:?}"),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let v = &self.node(x).values;
        let out: Vec<f64> = (0..rows).map(|i| v[i * cols..(i + 1) * cols].iter().sum()).collect();
        let rg = self.node(x).requires_grad;
        Ok(self.push(vec![rows], out, Op::SumRows { x, rows, cols }, rg))
    }

    /// Dot product of a length-m vector node with fixed weights.
    pub fn weighted_sum(&mut self, x: TensorId, weights: &[f64]) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 1 || shape[0] != weights.len() {
            return Err(Error::Dimension {
                op: "weighted_sum",
                msg: format!(
                    "expected a length-{} vector, got shape {shape:?}",
                    weights.len()
                ),
            });
        }
        let total: f64 = self
            .node(x)
            .values
            .iter()
            .zip(weights)
            .map(|(v, w)| v * w)
            .sum();
        let rg = self.node(x).requires_grad;
        Ok(self.push(
            Vec::new(),
            vec![total],
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Selects rows (repeats allowed) of a 2-D node; backward scatter-adds.
    pub fn gather_rows(&mut self, x: TensorId, rows: &[usize]) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension {
                op: "gather_rows",
                msg: format!("expected a 2-D node, got shape {shape:?}"),
            });
        }
        let (m, d) = (shape[0], shape[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Index(format!(
                "gather_rows: row {bad} out of range for {m} rows"
            )));
        }
        let v = &self.node(x).values;
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&v[r * d..(r + 1) * d]);
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(
            vec![rows.len(), d],
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
                cols: d,
            },
            rg,
        ))
    }

    /// Adds a length-d bias across the trailing dimension of `x`.
    pub fn add_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        let last = *xs.last().unwrap_or(&0);
        if bs.len() != 1 || xs.is_empty() || last != bs[0] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: xs,
                rhs: bs,
            });
        }
        let xv = &self.node(x).values;
        let bv = &self.node(b).values;
        let out: Vec<f64> = xv
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % last])
            .collect();
        let rg = self.needs_grad(&[x, b]);
        Ok(self.push(xs, out, Op::AddBias { x, b, last }, rg))
    }

    /// Reinterprets a node under a new shape with the same element count.
    pub fn reshape(&mut self, x: TensorId, new_shape: Vec<usize>) -> Result<TensorId> {
        let old = self.shape(x).to_vec();
        if numel(&old) != numel(&new_shape) {
            return Err(Error::Dimension {
                op: "reshape",
                msg: format!("cannot reshape {old:?} into {new_shape:?}"),
            });
        }
        let values = self.node(x).values.clone();
        let rg = self.node(x).requires_grad;
        Ok(self.push(new_shape, values, Op::Reshape { x }, rg))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors by 1/(1-rate). `rate == 0` is the identity and
    /// draws nothing from the generator.
    pub fn dropout<R: Rng>(&mut self, x: TensorId, rate: f64, rng: &mut R) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        let n = self.node(x).values.len();
        let mask: Vec<f64> = if rate == 0.0 {
            vec![1.0; n]
        } else {
            let keep = 1.0 / (1.0 - rate);
            (0..n)
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect()
        };
        let out: Vec<f64> = self
            .node(x)
            .values
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.node(x).requires_grad;
        Ok(self.push(shape, out, Op::Dropout { x, mask }, rg))
    }

    fn batchnorm_shapes(
        &self,
        op: &'static str,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<(usize, usize)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::Dimension {
                op: "batch_norm",
                msg: format!("{op} expects a 2-D input, got shape {xs:?}"),
            });
        }
        let (rows, cols) = (xs[0], xs[1]);
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = self.shape(id);
            if s != [cols] {
                return Err(Error::Dimension {
                    op: "batch_norm",
                    msg: format!("{op}: {name} must have shape [{cols}], got {s:?}"),
                });
            }
        }
        Ok((rows, cols))
    }

    /// Batch normalization over rows of a 2-D node using batch statistics.
    ///
    /// Returns the output node plus the biased per-feature batch mean and
    /// variance so the caller can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<(TensorId, Vec<f64>, Vec<f64>)> {
        let (rows, cols) = self.batchnorm_shapes("batch_norm_train", x, gamma, beta)?;
        let xv = &self.node(x).values;
        let mut mean = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                mean[j] += xv[i * cols + j];
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                let d = xv[i * cols + j] - mean[j];
                var[j] += d * d;
            }
        }
        for v in &mut var {
            *v /= rows as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                xhat[i * cols + j] = (xv[i * cols + j] - mean[j]) * inv_std[j];
            }
        }
        let gv = &self.node(gamma).values;
        let bv = &self.node(beta).values;
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(idx, h)| gv[idx % cols] * h + bv[idx % cols])
            .collect();
        let rg = self.needs_grad(&[x, gamma, beta]);
        let id = self.push(
            vec![rows, cols],
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                rows,
                cols,
            },
            rg,
        );
        Ok((id, mean, var))
    }

    /// Batch normalization using fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<TensorId> {
        let (rows, cols) = self.batchnorm_shapes("batch_norm_eval", x, gamma, beta)?;
        if running_mean.len() != cols || running_var.len() != cols {
            return Err(Error::Dimension {
                op: "batch_norm",
                msg: format!(
                    "batch_norm_eval: running stats must have length {cols}, got {} and {}",
                    running_mean.len(),
                    running_var.len()
                ),
            });
        }
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt())
            .collect();
        let xv = &self.node(x).values;
        let mut xhat = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                xhat[i * cols + j] = (xv[i * cols + j] - running_mean[j]) * inv_std[j];
            }
        }
        let gv = &self.node(gamma).values;
        let bv = &self.node(beta).values;
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(idx, h)| gv[idx % cols] * h + bv[idx % cols])
            .collect();
        let rg = self.needs_grad(&[x, gamma, beta]);
        Ok(self.push(
            vec![rows, cols],
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                rows,
                cols,
            },
            rg,
        ))
    }

    /// Valid, stride-1 2-D convolution.
    ///
    /// `input` is n×h×w×c (channels last), `kernel` is kh×kw×cin×cout.
    pub fn conv2d(&mut self, input: TensorId, kernel: TensorId) -> Result<TensorId> {
        let is = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if is.len() != 4 || ks.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: is,
                rhs: ks,
            });
        }
        let (n, h, w, cin) = (is[0], is[1], is[2], is[3]);
        let (kh, kw, kcin, cout) = (ks[0], ks[1], ks[2], ks[3]);
        if kcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: is,
                rhs: ks,
            });
        }
        if kh > h || kw > w {
            return Err(Error::Dimension {
                op: "conv2d",
                msg: format!("kernel {kh}x{kw} larger than input {h}x{w}"),
            });
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let iv = &self.node(input).values;
        let kv = &self.node(kernel).values;
        let mut out = vec![0.0; n * oh * ow * cout];
        let in_idx = |b: usize, i: usize, j: usize, c: usize| ((b * h + i) * w + j) * cin + c;
        let k_idx = |ki: usize, kj: usize, ci: usize, co: usize| ((ki * kw + kj) * cin + ci) * cout + co;
        for b in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    let base = ((b * oh + i) * ow + j) * cout;
                    for ki in 0..kh {
                        for kj in 0..kw {
                            for ci in 0..cin {
                                let x = iv[in_idx(b, i + ki, j + kj, ci)];
                                if x == 0.0 {
                                    continue;
                                }
                                for co in 0..cout {
                                    out[base + co] += x * kv[k_idx(ki, kj, ci, co)];
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.needs_grad(&[input, kernel]);
        Ok(self.push(
            vec![n, oh, ow, cout],
            out,
            Op::Conv2d {
                input,
                kernel,
                n,
                h,
                w,
                cin,
                kh,
                kw,
                cout,
            },
            rg,
        ))
    }

    /// Non-overlapping max pooling with a q×q window (stride q).
    ///
    /// Ties go to the first maximum in row-major window order.
    pub fn max_pool2d(&mut self, x: TensorId, window: usize) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Dimension {
                op: "max_pool2d",
                msg: format!("expected an n*h*w*c node, got shape {xs:?}"),
            });
        }
        if window == 0 {
            return Err(Error::Dimension {
                op: "max_pool2d",
                msg: "window must be positive".into(),
            });
        }
        let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        if h % window != 0 || w % window != 0 {
            return Err(Error::Dimension {
                op: "max_pool2d",
                msg: format!("window {window} does not divide input {h}x{w}"),
            });
        }
        let (oh, ow) = (h / window, w / window);
        let xv = &self.node(x).values;
        let idx = |b: usize, i: usize, j: usize, ch: usize| ((b * h + i) * w + j) * c + ch;
        let mut out = vec![0.0; n * oh * ow * c];
        let mut argmax = vec![0usize; n * oh * ow * c];
        for b in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for di in 0..window {
                            for dj in 0..window {
                                let src = idx(b, i * window + di, j * window + dj, ch);
                                if xv[src] > best {
                                    best = xv[src];
                                    best_idx = src;
                                }
                            }
                        }
                        let dst = ((b * oh + i) * ow + j) * c + ch;
                        out[dst] = best;
                        argmax[dst] = best_idx;
                    }
                }
            }
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(vec![n, oh, ow, c], out, Op::MaxPool2d { x, argmax }, rg))
    }

    /// Row-wise softmax cross-entropy, averaged over rows.
    ///
    /// Logits are n×c, labels are class indices. The softmax is stabilized by
    /// subtracting each row's maximum.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                msg: format!("expected 2-D logits, got shape {shape:?}"),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        if labels.len() != rows {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                msg: format!("{rows} logit rows but {} labels", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {cols} classes"
            )));
        }
        let lv = &self.node(logits).values;
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for i in 0..rows {
            let row = &lv[i * cols..(i + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * cols + j] = e;
                denom += e;
            }
            for j in 0..cols {
                probs[i * cols + j] /= denom;
            }
            loss -= probs[i * cols + labels[i]].ln();
        }
        loss /= rows as f64;
        let rg = self.node(logits).requires_grad;
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                rows,
                cols,
            },
            rg,
        ))
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], id: TensorId, len: usize) -> &mut Vec<f64> {
        grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Runs reverse-mode accumulation from a scalar loss node.
    ///
    /// Clears any gradients from a previous call; every reachable node with
    /// `requires_grad` ends up with a gradient buffer readable via
    /// [`Tape::grad`].
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.node(loss).values.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_backward(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn apply_backward(&mut self, idx: usize, g: &[f64]) {
        // Inputs always precede outputs, so split at idx: everything the op
        // reads lives in `head`, gradients to write live in `grads`.
        let (head, tail) = self.nodes.split_at_mut(idx);
        let node = &tail[0];
        let grads = &mut self.grads;
        let rg = |id: TensorId| head[id.0].requires_grad;
        let val = |id: TensorId| -> &[f64] { &head[id.0].values };
        let len = |id: TensorId| head[id.0].values.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if rg(*a) {
                    let bv = val(*b).to_vec();
                    let ga = Self::accumulate(grads, *a, m * k);
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] += acc;
                        }
                    }
                }
                if rg(*b) {
                    let av = val(*a).to_vec();
                    let gb = Self::accumulate(grads, *b, k * n);
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += av[i * k + p] * g[i * n + j];
                            }
                            gb[p * n + j] += acc;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if rg(id) {
                        let ga = Self::accumulate(grads, id, g.len());
                        for (d, s) in ga.iter_mut().zip(g) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if rg(*a) {
                    let ga = Self::accumulate(grads, *a, g.len());
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if rg(*b) {
                    let gb = Self::accumulate(grads, *b, g.len());
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul { a, b } => {
                if rg(*a) {
                    let bv = val(*b).to_vec();
                    let ga = Self::accumulate(grads, *a, g.len());
                    for ((d, s), v) in ga.iter_mut().zip(g).zip(&bv) {
                        *d += s * v;
                    }
                }
                if rg(*b) {
                    let av = val(*a).to_vec();
                    let gb = Self::accumulate(grads, *b, g.len());
                    for ((d, s), v) in gb.iter_mut().zip(g).zip(&av) {
                        *d += s * v;
                    }
                }
            }
            Op::Scale { x, c } => {
                if rg(*x) {
                    let c = *c;
                    let gx = Self::accumulate(grads, *x, g.len());
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d += c * s;
                    }
                }
            }
            Op::Abs { x } => {
                if rg(*x) {
                    let xv = val(*x).to_vec();
                    let gx = Self::accumulate(grads, *x, g.len());
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(&xv) {
                        *d += s * if *v > 0.0 {
                            1.0
                        } else if *v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                }
            }
            Op::Relu { x } => {
                if rg(*x) {
                    let xv = val(*x).to_vec();
                    let gx = Self::accumulate(grads, *x, g.len());
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(&xv) {
                        if *v > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if rg(*x) {
                    let n = len(*x);
                    let gx = Self::accumulate(grads, *x, n);
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::SumRows { x, rows, cols } => {
                if rg(*x) {
                    let (rows, cols) = (*rows, *cols);
                    let gx = Self::accumulate(grads, *x, rows * cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            gx[i * cols + j] += g[i];
                        }
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if rg(*x) {
                    let weights = weights.clone();
                    let gx = Self::accumulate(grads, *x, weights.len());
                    for (d, w) in gx.iter_mut().zip(&weights) {
                        *d += g[0] * w;
                    }
                }
            }
            Op::GatherRows { x, rows, cols } => {
                if rg(*x) {
                    let (rows, cols) = (rows.clone(), *cols);
                    let n = len(*x);
                    let gx = Self::accumulate(grads, *x, n);
                    for (out_i, &src) in rows.iter().enumerate() {
                        for j in 0..cols {
                            gx[src * cols + j] += g[out_i * cols + j];
                        }
                    }
                }
            }
            Op::AddBias { x, b, last } => {
                let last = *last;
                if rg(*x) {
                    let gx = Self::accumulate(grads, *x, g.len());
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if rg(*b) {
                    let gb = Self::accumulate(grads, *b, last);
                    for (i, s) in g.iter().enumerate() {
                        gb[i % last] += s;
                    }
                }
            }
            Op::Reshape { x } => {
                if rg(*x) {
                    let gx = Self::accumulate(grads, *x, g.len());
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if rg(*x) {
                    let mask = mask.clone();
                    let gx = Self::accumulate(grads, *x, g.len());
                    for ((d, s), m) in gx.iter_mut().zip(g).zip(&mask) {
                        *d += s * m;
                    }
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                rows,
                cols,
            } => {
                let (rows, cols) = (*rows, *cols);
                let xhat = xhat.clone();
                let inv_std = inv_std.clone();
                let gv = val(*gamma).to_vec();
                if rg(*beta) {
                    let gb = Self::accumulate(grads, *beta, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            gb[j] += g[i * cols + j];
                        }
                    }
                }
                if rg(*gamma) {
                    let gg = Self::accumulate(grads, *gamma, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            gg[j] += g[i * cols + j] * xhat[i * cols + j];
                        }
                    }
                }
                if rg(*x) {
                    // dxhat = g * gamma; dx derives from mean and variance
                    // both depending on x.
                    let mut sum_dxhat = vec![0.0; cols];
                    let mut sum_dxhat_xhat = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            let dxh = g[i * cols + j] * gv[j];
                            sum_dxhat[j] += dxh;
                            sum_dxhat_xhat[j] += dxh * xhat[i * cols + j];
                        }
                    }
                    let n = rows as f64;
                    let gx = Self::accumulate(grads, *x, rows * cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            let dxh = g[i * cols + j] * gv[j];
                            gx[i * cols + j] += inv_std[j] / n
                                * (n * dxh - sum_dxhat[j] - xhat[i * cols + j] * sum_dxhat_xhat[j]);
                        }
                    }
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                rows,
                cols,
            } => {
                let (rows, cols) = (*rows, *cols);
                let xhat = xhat.clone();
                let inv_std = inv_std.clone();
                let gv = val(*gamma).to_vec();
                if rg(*beta) {
                    let gb = Self::accumulate(grads, *beta, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            gb[j] += g[i * cols + j];
                        }
                    }
                }
                if rg(*gamma) {
                    let gg = Self::accumulate(grads, *gamma, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            gg[j] += g[i * cols + j] * xhat[i * cols + j];
                        }
                    }
                }
                if rg(*x) {
                    let gx = Self::accumulate(grads, *x, rows * cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            gx[i * cols + j] += g[i * cols + j] * gv[j] * inv_std[j];
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                n,
                h,
                w,
                cin,
                kh,
                kw,
                cout,
            } => {
                let (n, h, w, cin, kh, kw, cout) = (*n, *h, *w, *cin, *kh, *kw, *cout);
                let (oh, ow) = (h - kh + 1, w - kw + 1);
                let in_idx = |b: usize, i: usize, j: usize, c: usize| ((b * h + i) * w + j) * cin + c;
                let k_idx =
                    |ki: usize, kj: usize, ci: usize, co: usize| ((ki * kw + kj) * cin + ci) * cout + co;
                if rg(*input) {
                    let kv = val(*kernel).to_vec();
                    let gi = Self::accumulate(grads, *input, n * h * w * cin);
                    for b in 0..n {
                        for i in 0..oh {
                            for j in 0..ow {
                                let base = ((b * oh + i) * ow + j) * cout;
                                for ki in 0..kh {
                                    for kj in 0..kw {
                                        for ci in 0..cin {
                                            let mut acc = 0.0;
                                            for co in 0..cout {
                                                acc += g[base + co] * kv[k_idx(ki, kj, ci, co)];
                                            }
                                            gi[in_idx(b, i + ki, j + kj, ci)] += acc;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if rg(*kernel) {
                    let iv = val(*input).to_vec();
                    let gk = Self::accumulate(grads, *kernel, kh * kw * cin * cout);
                    for b in 0..n {
                        for i in 0..oh {
                            for j in 0..ow {
                                let base = ((b * oh + i) * ow + j) * cout;
                                for ki in 0..kh {
                                    for kj in 0..kw {
                                        for ci in 0..cin {
                                            let x = iv[in_idx(b, i + ki, j + kj, ci)];
                                            if x == 0.0 {
                                                continue;
                                            }
                                            for co in 0..cout {
                                                gk[k_idx(ki, kj, ci, co)] += x * g[base + co];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if rg(*x) {
                    let argmax = argmax.clone();
                    let n = len(*x);
                    let gx = Self::accumulate(grads, *x, n);
                    for (out_i, &src) in argmax.iter().enumerate() {
                        gx[src] += g[out_i];
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
                rows,
                cols,
            } => {
                if rg(*logits) {
                    let (rows, cols) = (*rows, *cols);
                    let labels = labels.clone();
                    let probs = probs.clone();
                    let scale = g[0] / rows as f64;
                    let gl = Self::accumulate(grads, *logits, rows * cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            let indicator = if labels[i] == j { 1.0 } else { 0.0 };
                            gl[i * cols + j] += scale * (probs[i * cols + j] - indicator);
                        }
                    }
                }
            }
        }
    }
}
