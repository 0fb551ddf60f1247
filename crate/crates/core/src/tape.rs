//! Wengert tape: records primitive operations during the forward pass and
//! replays them in reverse to accumulate gradients.
//!
//! The tape owns every intermediate value. Nodes are appended in execution
//! order, so the recorded list is topologically sorted by construction and one
//! backward pass visits each node exactly once, last to first.

use crate::error::{CtxError, Result};
use crate::ops::{self, Reduction};
use crate::optim::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Rec<T: Scalar> {
    Input,
    Param(String),
    Conv2d { x: usize, w: usize, b: usize, stride: usize, pad: usize },
    MaxPool { x: usize, arg: Vec<usize> },
    Bilinear { x: usize },
    Linear { x: usize, w: usize, b: usize },
    Relu { x: usize },
    Xent { x: usize, targets: Vec<usize>, reduction: Reduction, probs: Tensor<T> },
    ChwToRows { x: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    ConcatCols { a: usize, b: usize },
    ConcatChannels { xs: Vec<usize> },
    Pad2d { x: usize, top: usize, left: usize },
    Reshape { x: usize },
    Add { a: usize, b: usize },
    Scale { x: usize, c: T },
    SumAll { x: usize },
}

pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    recs: Vec<Rec<T>>,
}

/// Per-node gradients from one backward pass, addressable by [`Var`].
pub struct Grads<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn wrt(&self, v: Var) -> &Tensor<T> {
        &self.grads[v.0]
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), recs: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    fn push(&mut self, value: Tensor<T>, rec: Rec<T>) -> Var {
        self.values.push(value);
        self.recs.push(rec);
        Var(self.values.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Rec::Input)
    }

    /// Leaf holding a copy of a named parameter; backward adds its gradient
    /// into whichever store owns the name.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let t = store
            .value(name)
            .ok_or_else(|| CtxError::InvalidArgument(format!("unknown parameter {name}")))?
            .clone();
        Ok(self.push(t, Rec::Param(name.to_string())))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv2d_forward(&self.values[x.0], &self.values[w.0], &self.values[b.0], stride, pad)?;
        Ok(self.push(y, Rec::Conv2d { x: x.0, w: w.0, b: b.0, stride, pad }))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (y, arg) = ops::max_pool2d_forward(&self.values[x.0], k, stride, pad)?;
        Ok(self.push(y, Rec::MaxPool { x: x.0, arg }))
    }

    pub fn bilinear_resize(&mut self, x: Var, h2: usize, w2: usize) -> Result<Var> {
        let y = ops::bilinear_forward(&self.values[x.0], h2, w2)?;
        Ok(self.push(y, Rec::Bilinear { x: x.0 }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::linear_forward(&self.values[x.0], &self.values[w.0], &self.values[b.0])?;
        Ok(self.push(y, Rec::Linear { x: x.0, w: w.0, b: b.0 }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu_forward(&self.values[x.0]);
        self.push(y, Rec::Relu { x: x.0 })
    }

    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize], reduction: Reduction) -> Result<Var> {
        let (loss, probs) = ops::softmax_xent_forward(&self.values[logits.0], targets, reduction)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Rec::Xent { x: logits.0, targets: targets.to_vec(), reduction, probs },
        ))
    }

    pub fn chw_to_rows(&mut self, x: Var) -> Var {
        let y = ops::chw_to_rows_forward(&self.values[x.0]);
        self.push(y, Rec::ChwToRows { x: x.0 })
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let y = ops::gather_rows_forward(&self.values[x.0], idx)?;
        Ok(self.push(y, Rec::GatherRows { x: x.0, idx: idx.to_vec() }))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_cols_forward(&self.values[a.0], &self.values[b.0])?;
        Ok(self.push(y, Rec::ConcatCols { a: a.0, b: b.0 }))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = xs.iter().map(|v| &self.values[v.0]).collect();
        let y = ops::concat_channels_forward(&refs)?;
        Ok(self.push(y, Rec::ConcatChannels { xs: xs.iter().map(|v| v.0).collect() }))
    }

    pub fn pad2d(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize, value: T) -> Var {
        let y = ops::pad2d_forward(&self.values[x.0], top, bottom, left, right, value);
        self.push(y, Rec::Pad2d { x: x.0, top, left })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let y = self.values[x.0].reshaped(shape)?;
        Ok(self.push(y, Rec::Reshape { x: x.0 }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(CtxError::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        let mut y = self.values[a.0].clone();
        y.add_assign(&self.values[b.0]);
        Ok(self.push(y, Rec::Add { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let y = self.values[x.0].map(|v| v * c);
        self.push(y, Rec::Scale { x: x.0, c })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.values[x.0].data().iter().cloned().sum();
        self.push(Tensor::scalar(s), Rec::SumAll { x: x.0 })
    }

    /// Reverse pass from a scalar root. Parameter gradients are accumulated
    /// additively into the owning store; a second call without zeroing grads
    /// doubles them.
    pub fn backward(&self, root: Var, seed: T, stores: &mut [&mut ParamStore<T>]) -> Result<Grads<T>> {
        if self.values[root.0].len() != 1 {
            return Err(CtxError::InvalidArgument(format!(
                "backward: root must be scalar, got shape {:?}",
                self.values[root.0].shape()
            )));
        }
        let mut grads: Vec<Tensor<T>> =
            self.values.iter().map(|v| Tensor::zeros(v.shape().to_vec())).collect();
        grads[root.0].data_mut()[0] = seed;

        for i in (0..self.values.len()).rev() {
            // Split so the node's own grad can be read while inputs are written.
            let g = std::mem::replace(&mut grads[i], Tensor::zeros(vec![1]));
            match &self.recs[i] {
                Rec::Input | Rec::Param(_) => {}
                Rec::Conv2d { x, w, b, stride, pad } => {
                    let (gx, gw, gb) =
                        ops::conv2d_backward(&self.values[*x], &self.values[*w], &g, *stride, *pad);
                    grads[*x].add_assign(&gx);
                    grads[*w].add_assign(&gw);
                    grads[*b].add_assign(&gb);
                }
                Rec::MaxPool { x, arg } => {
                    let gx = ops::max_pool2d_backward(self.values[*x].shape(), arg, &g);
                    grads[*x].add_assign(&gx);
                }
                Rec::Bilinear { x } => {
                    let gx = ops::bilinear_backward(self.values[*x].shape(), &g);
                    grads[*x].add_assign(&gx);
                }
                Rec::Linear { x, w, b } => {
                    let (gx, gw, gb) = ops::linear_backward(&self.values[*x], &self.values[*w], &g);
                    grads[*x].add_assign(&gx);
                    grads[*w].add_assign(&gw);
                    grads[*b].add_assign(&gb);
                }
                Rec::Relu { x } => {
                    let gx = ops::relu_backward(&self.values[*x], &g);
                    grads[*x].add_assign(&gx);
                }
                Rec::Xent { x, targets, reduction, probs } => {
                    let gx = ops::softmax_xent_backward(probs, targets, *reduction, g.item());
                    grads[*x].add_assign(&gx);
                }
                Rec::ChwToRows { x } => {
                    let gx = ops::chw_to_rows_backward(self.values[*x].shape(), &g);
                    grads[*x].add_assign(&gx);
                }
                Rec::GatherRows { x, idx } => {
                    let gx = ops::gather_rows_backward(self.values[*x].shape(), idx, &g);
                    grads[*x].add_assign(&gx);
                }
                Rec::ConcatCols { a, b } => {
                    let (da, db) = (self.values[*a].shape()[1], self.values[*b].shape()[1]);
                    let (ga, gb) = ops::concat_cols_backward(da, db, &g);
                    grads[*a].add_assign(&ga);
                    grads[*b].add_assign(&gb);
                }
                Rec::ConcatChannels { xs } => {
                    let shapes: Vec<Vec<usize>> =
                        xs.iter().map(|&x| self.values[x].shape().to_vec()).collect();
                    let parts = ops::concat_channels_backward(&shapes, &g);
                    for (&x, gx) in xs.iter().zip(parts) {
                        grads[x].add_assign(&gx);
                    }
                }
                Rec::Pad2d { x, top, left } => {
                    let gx = ops::pad2d_backward(self.values[*x].shape(), *top, *left, &g);
                    grads[*x].add_assign(&gx);
                }
                Rec::Reshape { x } => {
                    let gx = g.reshaped(self.values[*x].shape().to_vec()).unwrap();
                    grads[*x].add_assign(&gx);
                }
                Rec::Add { a, b } => {
                    grads[*a].add_assign(&g);
                    grads[*b].add_assign(&g);
                }
                Rec::Scale { x, c } => {
                    let gx = g.map(|v| v * *c);
                    grads[*x].add_assign(&gx);
                }
                Rec::SumAll { x } => {
                    let gv = g.item();
                    for v in grads[*x].data_mut() {
                        *v += gv;
                    }
                }
            }
            grads[i] = g;
        }

        for (i, rec) in self.recs.iter().enumerate() {
            if let Rec::Param(name) = rec {
                let mut placed = false;
                for store in stores.iter_mut() {
                    if store.accumulate_grad(name, &grads[i]) {
                        placed = true;
                        break;
                    }
                }
                if !placed && !stores.is_empty() {
                    return Err(CtxError::InvalidArgument(format!(
                        "backward: no store owns parameter {name}"
                    )));
                }
            }
        }
        Ok(Grads { grads })
    }
}
