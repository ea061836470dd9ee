//! Reverse-mode gradient tape over a closed set of primitives.
//!
//! A [`Tape`] evaluates each primitive eagerly and records it. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse, applying
//! the hand-derived adjoint of every primitive. Accumulation order is the
//! reverse of recording order, so gradients are bit-reproducible.
//!
//! ```
//! use dbvae::tape::{ParamId, Tape};
//! use dbvae::Tensor;
//!
//! let w = Tensor::scalar(3.0);
//! let mut tape = Tape::new();
//! let wv = tape.param(ParamId(0), &w);
//! let sq = tape.square(wv);
//! let loss = tape.mean(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.param(ParamId(0)).data(), &[6.0]);
//! ```

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Identifies a trainable tensor across tapes and optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        stride: usize,
        padding: usize,
    },
    TransposedConv2d {
        x: Var,
        k: Var,
        b: Var,
        stride: usize,
        padding: usize,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Square(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Reparameterize {
        mu: Var,
        logvar: Var,
        eps: Tensor,
    },
    Mean(Var),
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
    },
    KlDivergence {
        mu: Var,
        logvar: Var,
    },
    MeanSquaredError {
        a: Var,
        b: Var,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

/// Ordered record of primitive applications. Parameters are borrowed, not copied.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: HashMap<ParamId, Var>,
}

fn scalar_node(v: f64) -> Cow<'static, Tensor> {
    Cow::Owned(Tensor::scalar(v))
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a non-trainable input. Its gradient is still available via
    /// [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf)
    }

    /// Records a borrowed non-trainable input.
    pub fn input_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf)
    }

    /// Registers a trainable tensor. Registering the same id twice returns the
    /// same node, so each parameter owns exactly one gradient slot.
    pub fn param(&mut self, id: ParamId, t: &'a Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(Cow::Borrowed(t), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(k), self.value(b), stride, padding)?;
        Ok(self.push(
            Cow::Owned(out),
            Op::Conv2d {
                x,
                k,
                b,
                stride,
                padding,
            },
        ))
    }

    pub fn transposed_conv2d(
        &mut self,
        x: Var,
        k: Var,
        b: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out =
            ops::transposed_conv2d(self.value(x), self.value(k), self.value(b), stride, padding)?;
        Ok(self.push(
            Cow::Owned(out),
            Op::TransposedConv2d {
                x,
                k,
                b,
                stride,
                padding,
            },
        ))
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::dense(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Cow::Owned(out), Op::Dense { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(Cow::Owned(out), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = ops::leaky_relu(self.value(x), slope);
        self.push(Cow::Owned(out), Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        self.push(Cow::Owned(out), Op::Sigmoid(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(Cow::Owned(out), Op::Square(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Cow::Owned(out), Op::Reshape(x)))
    }

    /// Columns `start..start + len` of a `[N, D]` node.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        let (n, d) = match *src.shape() {
            [n, d] => (n, d),
            ref s => return Err(Error::shape("slice_cols", format!("need [N,D], got {s:?}"))),
        };
        if start + len > d {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} exceed width {d}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let out = Tensor::new([n, len], data)?;
        Ok(self.push(Cow::Owned(out), Op::SliceCols { x, start }))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if src.ndim() == 0 || rows.iter().any(|&r| r >= src.dim(0)) {
            return Err(Error::shape(
                "gather_rows",
                format!("row index out of range for {:?}", src.shape()),
            ));
        }
        let out = src.gather_rows(rows);
        Ok(self.push(
            Cow::Owned(out),
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// `z = mu + exp(logvar / 2) * eps`, with `eps` treated as a constant.
    pub fn reparameterize(&mut self, mu: Var, logvar: Var, eps: Tensor) -> Result<Var> {
        let (m, lv) = (self.value(mu), self.value(logvar));
        if m.shape() != lv.shape() || m.shape() != eps.shape() {
            return Err(Error::shape(
                "reparameterize",
                format!(
                    "mu {:?}, logvar {:?}, eps {:?}",
                    m.shape(),
                    lv.shape(),
                    eps.shape()
                ),
            ));
        }
        let data = m
            .data()
            .iter()
            .zip(lv.data())
            .zip(eps.data())
            .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
            .collect();
        let out = Tensor::new(m.shape(), data)?;
        Ok(self.push(Cow::Owned(out), Op::Reparameterize { mu, logvar, eps }))
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = if t.is_empty() {
            0.0
        } else {
            t.sum() / t.len() as f64
        };
        self.push(scalar_node(v), Op::Mean(x))
    }

    /// Mean binary cross-entropy of `logits` against `labels` in {0, 1},
    /// evaluated as `max(l, 0) - l*y + ln(1 + exp(-|l|))`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let l = self.value(logits);
        if l.len() != labels.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits vs {} labels", l.len(), labels.len()),
            ));
        }
        let v = if labels.is_empty() {
            0.0
        } else {
            l.data()
                .iter()
                .zip(labels)
                .map(|(&l, &y)| l.max(0.0) - l * y + (-l.abs()).exp().ln_1p())
                .sum::<f64>()
                / labels.len() as f64
        };
        Ok(self.push(
            scalar_node(v),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// KL divergence of `N(mu, exp(logvar))` from `N(0, I)`, summed over the
    /// latent axis and averaged over rows.
    pub fn kl_divergence(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        let (m, lv) = (self.value(mu), self.value(logvar));
        if m.shape() != lv.shape() || m.ndim() != 2 {
            return Err(Error::shape(
                "kl_divergence",
                format!("mu {:?} vs logvar {:?}", m.shape(), lv.shape()),
            ));
        }
        let n = m.dim(0);
        let v = if n == 0 {
            0.0
        } else {
            0.5 * m
                .data()
                .iter()
                .zip(lv.data())
                .map(|(&m, &lv)| lv.exp() + m * m - 1.0 - lv)
                .sum::<f64>()
                / n as f64
        };
        Ok(self.push(scalar_node(v), Op::KlDivergence { mu, logvar }))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let v = if ta.is_empty() {
            0.0
        } else {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / ta.len() as f64
        };
        Ok(self.push(scalar_node(v), Op::MeanSquaredError { a, b }))
    }

    /// `sum_i w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            total += w * self.value(v).item()?;
        }
        Ok(self.push(scalar_node(total), Op::WeightedSum(terms.to_vec())))
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "output must be a single element, got {:?}",
                    self.value(output).shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param => unreachable!(),
                Op::Conv2d {
                    x,
                    k,
                    b,
                    stride,
                    padding,
                } => {
                    let (dx, dk, db) = ops::conv2d_backward(
                        self.value(*x),
                        self.value(*k),
                        *stride,
                        *padding,
                        &g,
                    )?;
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *b, db);
                }
                Op::TransposedConv2d {
                    x,
                    k,
                    b,
                    stride,
                    padding,
                } => {
                    let (dx, dk, db) = ops::transposed_conv2d_backward(
                        self.value(*x),
                        self.value(*k),
                        *stride,
                        *padding,
                        &g,
                    )?;
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *b, db);
                }
                Op::Dense { x, w, b } => {
                    let (dx, dw, db) = ops::dense_backward(self.value(*x), self.value(*w), &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::Relu(x) => {
                    let d = zip_map(self.value(*x), &g, |v, g| if v > 0.0 { g } else { 0.0 });
                    acc(&mut grads, *x, d);
                }
                Op::LeakyRelu(x, slope) => {
                    let d =
                        zip_map(self.value(*x), &g, |v, g| if v > 0.0 { g } else { slope * g });
                    acc(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let d = zip_map(&node.value, &g, |s, g| g * s * (1.0 - s));
                    acc(&mut grads, *x, d);
                }
                Op::Square(x) => {
                    let d = zip_map(self.value(*x), &g, |v, g| 2.0 * v * g);
                    acc(&mut grads, *x, d);
                }
                Op::Reshape(x) => {
                    let d = g.reshape(self.value(*x).shape())?;
                    acc(&mut grads, *x, d);
                }
                Op::SliceCols { x, start } => {
                    let src = self.value(*x);
                    let (n, d, len) = (src.dim(0), src.dim(1), g.dim(1));
                    let mut dx = Tensor::zeros([n, d]);
                    for r in 0..n {
                        dx.data_mut()[r * d + start..r * d + start + len]
                            .copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::GatherRows { x, rows } => {
                    let src = self.value(*x);
                    let stride = src.row_len();
                    let mut dx = Tensor::zeros(src.shape());
                    for (j, &r) in rows.iter().enumerate() {
                        let dst = &mut dx.data_mut()[r * stride..(r + 1) * stride];
                        for (a, b) in dst.iter_mut().zip(g.row(j)) {
                            *a += b;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Reparameterize { mu, logvar, eps } => {
                    let lv = self.value(*logvar);
                    let dlv = Tensor::from_fn(lv.shape(), |i| {
                        g.data()[i] * 0.5 * (0.5 * lv.data()[i]).exp() * eps.data()[i]
                    });
                    acc(&mut grads, *mu, g);
                    acc(&mut grads, *logvar, dlv);
                }
                Op::Mean(x) => {
                    let t = self.value(*x);
                    let s = g.data()[0] / t.len().max(1) as f64;
                    acc(&mut grads, *x, Tensor::full(t.shape(), s));
                }
                Op::BceWithLogits { logits, labels } => {
                    let l = self.value(*logits);
                    let s = g.data()[0] / labels.len().max(1) as f64;
                    let d = Tensor::from_fn(l.shape(), |i| {
                        s * (ops::sigmoid_scalar(l.data()[i]) - labels[i])
                    });
                    acc(&mut grads, *logits, d);
                }
                Op::KlDivergence { mu, logvar } => {
                    let (m, lv) = (self.value(*mu), self.value(*logvar));
                    let s = g.data()[0] / m.dim(0).max(1) as f64;
                    let dm = m.map(|v| s * v);
                    let dlv = lv.map(|v| s * 0.5 * (v.exp() - 1.0));
                    acc(&mut grads, *mu, dm);
                    acc(&mut grads, *logvar, dlv);
                }
                Op::MeanSquaredError { a, b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let s = 2.0 * g.data()[0] / ta.len().max(1) as f64;
                    let da = zip_map(ta, tb, |x, y| s * (x - y));
                    let db = da.map(|v| -v);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        acc(&mut grads, v, Tensor::scalar(w * g.data()[0]));
                    }
                }
            }
        }

        let mut params = BTreeMap::new();
        for (&id, &v) in &self.params {
            let g = grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
            params.insert(id, g);
        }
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_fn(a.shape(), |i| f(a.data()[i], b.data()[i]))
}

/// Result of a reverse pass.
///
/// Every registered parameter has an entry; parameters the output does not
/// depend on get a zero tensor rather than an error.
#[derive(Debug)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a registered parameter.
    ///
    /// # Panics
    /// If `id` was never registered on the tape.
    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[&id]
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }

    /// Gradient with respect to a non-parameter leaf, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }
}
