//! Tape-based reverse-mode differentiation over a small, fixed set of
//! matrix operations.
//!
//! Values are recorded in execution order, so a single reverse sweep over
//! the tape visits every node after all of its consumers.

use super::tensor::{gemm, Tensor};
use super::NumericError;

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-10;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    /// `(m × k)(k × n)`.
    Matmul,
    /// Elementwise sum of two equally shaped tensors.
    Add,
    /// `(m × n) + (1 × n)`, the row broadcast over every row.
    AddBias,
    Scale(f64),
    Relu,
    RowSoftmax,
    /// Inputs `(x, gain, offset)`; each row of `x` is normalized to zero
    /// mean and unit (population) variance, then scaled and shifted.
    LayerNorm,
    ConcatRows,
    SliceRows { start: usize, end: usize },
    /// Inputs `(prediction, target)`; mean of squared residuals as `1 × 1`.
    MseLoss,
    Transpose,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::AddBias => "add-bias-broadcast",
            OpKind::Scale(_) => "scale-by-constant",
            OpKind::Relu => "relu",
            OpKind::RowSoftmax => "row-softmax",
            OpKind::LayerNorm => "layer-norm",
            OpKind::ConcatRows => "concat-rows",
            OpKind::SliceRows { .. } => "slice-rows",
            OpKind::MseLoss => "mse-loss",
            OpKind::Transpose => "transpose",
        }
    }
}

enum Saved {
    Nothing,
    LayerNorm {
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

struct Record {
    kind: Option<OpKind>,
    inputs: Vec<NodeId>,
    saved: Saved,
    trainable: bool,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    records: Vec<Record>,
}

/// Gradients of a scalar with respect to the trainable leaves of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records a constant. Constants never receive gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, None, Vec::new(), Saved::Nothing, false)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, None, Vec::new(), Saved::Nothing, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Input node ids of a recorded operation (empty for leaves).
    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.records[id.0].inputs
    }

    fn push(
        &mut self,
        value: Tensor,
        kind: Option<OpKind>,
        inputs: Vec<NodeId>,
        saved: Saved,
        trainable: bool,
    ) -> NodeId {
        let requires_grad = trainable || inputs.iter().any(|i| self.records[i.0].requires_grad);
        self.values.push(value);
        self.records.push(Record {
            kind,
            inputs,
            saved,
            trainable,
            requires_grad,
        });
        NodeId(self.records.len() - 1)
    }

    fn dim_error(&self, kind: OpKind, inputs: &[NodeId]) -> NumericError {
        NumericError::Dimension {
            op: kind.name(),
            shapes: inputs
                .iter()
                .map(|i| self.values[i.0].shape().to_vec())
                .collect(),
        }
    }

    /// Evaluates `kind` on recorded inputs and appends the result.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId, NumericError> {
        let arity_ok = match kind {
            OpKind::Matmul | OpKind::Add | OpKind::AddBias | OpKind::MseLoss => inputs.len() == 2,
            OpKind::LayerNorm => inputs.len() == 3,
            OpKind::ConcatRows => !inputs.is_empty(),
            _ => inputs.len() == 1,
        };
        if !arity_ok || inputs.iter().any(|i| !self.values[i.0].is_matrix()) {
            return Err(self.dim_error(kind, inputs));
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|i| &self.values[i.0]).collect();
        let mut saved = Saved::Nothing;
        let out = match kind {
            OpKind::Matmul => {
                let (a, b) = (vals[0], vals[1]);
                if a.cols() != b.rows() {
                    return Err(self.dim_error(kind, inputs));
                }
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
                Tensor::matrix(m, n, out)?
            }
            OpKind::Add => {
                let (a, b) = (vals[0], vals[1]);
                if a.shape() != b.shape() {
                    return Err(self.dim_error(kind, inputs));
                }
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            OpKind::AddBias => {
                let (a, b) = (vals[0], vals[1]);
                if b.rows() != 1 || b.cols() != a.cols() {
                    return Err(self.dim_error(kind, inputs));
                }
                let mut out = a.clone();
                if a.cols() > 0 {
                    for row in out.data_mut().chunks_mut(a.cols()) {
                        row.iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
                    }
                }
                out
            }
            OpKind::Scale(c) => vals[0].map(|v| v * c),
            OpKind::Relu => vals[0].map(|v| v.max(0.0)),
            OpKind::RowSoftmax => {
                let mut out = vals[0].clone();
                let cols = out.cols();
                if cols > 0 {
                    for row in out.data_mut().chunks_mut(cols) {
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut total = 0.0;
                        for v in row.iter_mut() {
                            *v = (*v - max).exp();
                            total += *v;
                        }
                        row.iter_mut().for_each(|v| *v /= total);
                    }
                }
                out
            }
            OpKind::LayerNorm => {
                let (x, gain, offset) = (vals[0], vals[1], vals[2]);
                let cols = x.cols();
                if gain.rows() != 1 || gain.cols() != cols || offset.shape() != gain.shape() {
                    return Err(self.dim_error(kind, inputs));
                }
                let mut normalized = vec![0.0; x.len()];
                let mut inv_std = Vec::with_capacity(x.rows());
                let mut out = vec![0.0; x.len()];
                for r in 0..x.rows() {
                    let row = x.row(r);
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    inv_std.push(inv);
                    for c in 0..cols {
                        let n = (row[c] - mean) * inv;
                        normalized[r * cols + c] = n;
                        out[r * cols + c] = n * gain.data()[c] + offset.data()[c];
                    }
                }
                saved = Saved::LayerNorm {
                    normalized,
                    inv_std,
                };
                Tensor::matrix(x.rows(), cols, out)?
            }
            OpKind::ConcatRows => {
                let cols = vals[0].cols();
                if vals.iter().any(|v| v.cols() != cols) {
                    return Err(self.dim_error(kind, inputs));
                }
                Tensor::vstack(&vals)?
            }
            OpKind::SliceRows { start, end } => {
                let x = vals[0];
                if start > end || end > x.rows() {
                    return Err(self.dim_error(kind, inputs));
                }
                let c = x.cols();
                Tensor::matrix(end - start, c, x.data()[start * c..end * c].to_vec())?
            }
            OpKind::MseLoss => {
                let (p, t) = (vals[0], vals[1]);
                if p.shape() != t.shape() || p.is_empty() {
                    return Err(self.dim_error(kind, inputs));
                }
                let sq: f64 = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                Tensor::scalar(sq / p.len() as f64)
            }
            OpKind::Transpose => vals[0].transpose(),
        };
        Ok(self.push(out, Some(kind), inputs.to_vec(), saved, false))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        self.apply(OpKind::Matmul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, NumericError> {
        self.apply(OpKind::AddBias, &[x, bias])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, NumericError> {
        self.apply(OpKind::Scale(c), &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, NumericError> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, NumericError> {
        self.apply(OpKind::RowSoftmax, &[x])
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        offset: NodeId,
    ) -> Result<NodeId, NumericError> {
        self.apply(OpKind::LayerNorm, &[x, gain, offset])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericError> {
        self.apply(OpKind::ConcatRows, parts)
    }

    pub fn slice_rows(
        &mut self,
        x: NodeId,
        start: usize,
        end: usize,
    ) -> Result<NodeId, NumericError> {
        self.apply(OpKind::SliceRows { start, end }, &[x])
    }

    pub fn mse_loss(&mut self, prediction: NodeId, target: NodeId) -> Result<NodeId, NumericError> {
        self.apply(OpKind::MseLoss, &[prediction, target])
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, NumericError> {
        self.apply(OpKind::Transpose, &[x])
    }

    /// Reverse sweep from a scalar node. Only trainable leaves keep their
    /// gradient in the result.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NumericError> {
        let loss_value = &self.values[loss.0];
        if loss_value.len() != 1 {
            return Err(NumericError::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut kept: Vec<Option<Tensor>> = vec![None; self.records.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let record = &self.records[id];
            let Some(kind) = record.kind else {
                if record.trainable {
                    kept[id] = Some(Tensor::new(self.values[id].shape().to_vec(), g)?);
                }
                continue;
            };
            self.propagate(id, kind, record, &g, &mut grads);
        }
        Ok(Gradients { grads: kept })
    }

    fn propagate(
        &self,
        id: usize,
        kind: OpKind,
        record: &Record,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let inputs = &record.inputs;
        let wants = |i: usize| self.records[inputs[i].0].requires_grad;
        // Inputs may repeat (e.g. `add(x, x)`), so each input is accumulated
        // through its own short-lived borrow.
        macro_rules! acc {
            ($i:expr) => {
                self.grad_slot(grads, inputs[$i])
            };
        }
        match kind {
            OpKind::Matmul => {
                let (a, b) = (&self.values[inputs[0].0], &self.values[inputs[1].0]);
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                if wants(0) {
                    let da = acc!(0);
                    gemm(m, n, k, g, false, b.data(), true, 1.0, da);
                }
                if wants(1) {
                    let db = acc!(1);
                    gemm(k, m, n, a.data(), true, g, false, 1.0, db);
                }
            }
            OpKind::Add => {
                for i in 0..2 {
                    if wants(i) {
                        acc!(i).iter_mut().zip(g).for_each(|(d, v)| *d += v);
                    }
                }
            }
            OpKind::AddBias => {
                if wants(0) {
                    acc!(0).iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if wants(1) {
                    let db = acc!(1);
                    let cols = db.len();
                    if cols > 0 {
                        for row in g.chunks(cols) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                    }
                }
            }
            OpKind::Scale(c) => {
                if wants(0) {
                    acc!(0).iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
                }
            }
            OpKind::Relu => {
                if wants(0) {
                    let x = self.values[inputs[0].0].data();
                    acc!(0)
                        .iter_mut()
                        .zip(g)
                        .zip(x)
                        .for_each(|((d, v), xv)| {
                            if *xv > 0.0 {
                                *d += v
                            }
                        });
                }
            }
            OpKind::RowSoftmax => {
                if wants(0) {
                    let out = &self.values[id];
                    let cols = out.cols();
                    let dx = acc!(0);
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            dx[r * cols + c] += y[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            OpKind::LayerNorm => {
                let Saved::LayerNorm {
                    normalized,
                    inv_std,
                } = &record.saved
                else {
                    unreachable!("layer-norm record without saved statistics")
                };
                let x = &self.values[inputs[0].0];
                let gain = self.values[inputs[1].0].data();
                let (rows, cols) = (x.rows(), x.cols());
                if wants(1) {
                    let dg = acc!(1);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += g[r * cols + c] * normalized[r * cols + c];
                        }
                    }
                }
                if wants(2) {
                    let db = acc!(2);
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                }
                if wants(0) {
                    let dx = acc!(0);
                    let inv_n = 1.0 / cols as f64;
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let nrow = &normalized[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0;
                        let mut mean_dn = 0.0;
                        for c in 0..cols {
                            dxhat[c] = g[r * cols + c] * gain[c];
                            mean_d += dxhat[c];
                            mean_dn += dxhat[c] * nrow[c];
                        }
                        mean_d *= inv_n;
                        mean_dn *= inv_n;
                        for c in 0..cols {
                            dx[r * cols + c] +=
                                inv_std[r] * (dxhat[c] - mean_d - nrow[c] * mean_dn);
                        }
                    }
                }
            }
            OpKind::ConcatRows => {
                let mut offset = 0;
                for i in 0..inputs.len() {
                    let len = self.values[inputs[i].0].len();
                    if wants(i) {
                        acc!(i)
                            .iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(d, v)| *d += v);
                    }
                    offset += len;
                }
            }
            OpKind::SliceRows { start, .. } => {
                if wants(0) {
                    let cols = self.values[inputs[0].0].cols();
                    let dx = acc!(0);
                    dx[start * cols..start * cols + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, v)| *d += v);
                }
            }
            OpKind::MseLoss => {
                let p = self.values[inputs[0].0].data();
                let t = self.values[inputs[1].0].data();
                let k = 2.0 * g[0] / p.len() as f64;
                if wants(0) {
                    acc!(0)
                        .iter_mut()
                        .zip(p.iter().zip(t))
                        .for_each(|(d, (a, b))| *d += k * (a - b));
                }
                if wants(1) {
                    acc!(1)
                        .iter_mut()
                        .zip(p.iter().zip(t))
                        .for_each(|(d, (a, b))| *d -= k * (a - b));
                }
            }
            OpKind::Transpose => {
                if wants(0) {
                    let x = &self.values[inputs[0].0];
                    let (r, c) = (x.rows(), x.cols());
                    let dx = acc!(0);
                    // g is c × r
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
        }
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], id: NodeId) -> &'a mut Vec<f64> {
        let len = self.values[id.0].len();
        grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let a = tape.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let out = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(out).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn softmax_of_equal_scores_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn mse_of_unit_residual() {
        let mut tape = Tape::new();
        let target = tape.constant(Tensor::row_vector(vec![1.0, 0.0]));
        let pred = tape.constant(Tensor::row_vector(vec![0.0, 0.0]));
        let l = tape.mse_loss(target, pred).unwrap();
        assert_eq!(tape.value(l).data(), &[0.5]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let zero = tape.constant(Tensor::scalar(0.0));
        let l = tape.mse_loss(x, zero).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
        assert!(g.get(zero).is_none());
    }

    #[test]
    fn linear_map_gradient_is_input() {
        // L = (x·W − c)² with residual 0.5, so dL/dy = 1 and dL/dW = xᵀ.
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![1.0, 1.0]));
        let w = tape.param(Tensor::matrix(2, 1, vec![0.25, -0.75]).unwrap());
        let y = tape.matmul(x, w).unwrap();
        let target = tape.constant(Tensor::scalar(-1.0));
        let l = tape.mse_loss(y, target).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row_vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(NumericError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn repeated_input_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.add(x, x).unwrap();
        let zero = tape.constant(Tensor::scalar(0.0));
        let l = tape.mse_loss(y, zero).unwrap();
        // L = (2x)^2 → dL/dx = 8x = 16
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[16.0]);
    }
}
