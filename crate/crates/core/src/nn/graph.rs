//! A small eager reverse-mode tape over dense 2-D `f64` arrays.
//!
//! Values are computed when an op is recorded; `backward` walks the tape in
//! reverse and accumulates gradients into parameter leaves. The op set is
//! exactly what the transformer blocks and the CTC/CE losses need, nothing
//! more general.

use crate::ctc::{ctc_gradient_wrt_logits, forward_backward, LabelSequence, LogProbMatrix};
use crate::error::{Error, Result};
use indexmap::IndexMap;
use ndarray::{Array1, Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op {
    Input,
    Param,
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    AddRow(TensorId, TensorId),
    Scale(TensorId, f64),
    Relu(TensorId),
    SoftmaxRows(TensorId),
    LogSoftmaxRows(TensorId),
    LayerNormRows {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
    },
    Embedding {
        weight: TensorId,
        tokens: Vec<usize>,
    },
    SliceCols {
        x: TensorId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<TensorId>),
    PairStack(TensorId),
    Dropout {
        x: TensorId,
        mask: Array2<f64>,
    },
    RowReplace {
        x: TensorId,
        rows: Vec<usize>,
    },
    /// 1x1 loss `-log P_CTC(target)`, gradient cached at forward time.
    CtcLoss {
        logits: TensorId,
        grad: Array2<f64>,
    },
    /// 1x1 label-smoothed cross-entropy averaged over rows, gradient cached.
    LabelSmoothedCe {
        logits: TensorId,
        grad: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-6;

pub struct Graph {
    nodes: Vec<Node>,
    /// Parameter leaves are deduplicated by name so gradients accumulate.
    param_ids: IndexMap<String, TensorId>,
    grads: Vec<Option<Array2<f64>>>,
    pub training: bool,
}

impl Graph {
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            param_ids: IndexMap::new(),
            grads: Vec::new(),
            training,
        }
    }

    pub fn value(&self, id: TensorId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> TensorId {
        debug_assert!(
            !value.iter().any(|v| v.is_nan()),
            "NaN produced by graph op"
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn input(&mut self, value: Array2<f64>) -> TensorId {
        self.push(value, Op::Input, false)
    }

    /// Constant leaf that may contain -inf (attention masks).
    pub fn constant(&mut self, value: Array2<f64>) -> TensorId {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: false,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Parameter leaf; repeated fetches of the same name share one node.
    pub fn param(&mut self, name: &str, value: &Array2<f64>) -> TensorId {
        if let Some(&id) = self.param_ids.get(name) {
            return id;
        }
        let id = self.push(value.clone(), Op::Param, true);
        self.param_ids.insert(name.to_string(), id);
        id
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let value = self.nodes[a.0].value.t().to_owned();
        let ng = self.needs(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Add a 1xC row vector to every row of `a`.
    pub fn add_row(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let row = self.nodes[b.0].value.row(0).to_owned();
        let value = &self.nodes[a.0].value + &row;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::AddRow(a, b), ng)
    }

    pub fn scale(&mut self, a: TensorId, k: f64) -> TensorId {
        let value = self.nodes[a.0].value.mapv(|v| v * k);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let value = self.nodes[a.0].value.mapv(|v| v.max(0.0));
        let ng = self.needs(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: TensorId) -> TensorId {
        let value = softmax_rows(&self.nodes[a.0].value);
        let ng = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: TensorId) -> TensorId {
        let mut value = self.nodes[a.0].value.clone();
        for mut row in value.rows_mut() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - z);
        }
        let ng = self.needs(a);
        self.push(value, Op::LogSoftmaxRows(a), ng)
    }

    pub fn layer_norm_rows(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> TensorId {
        let xv = &self.nodes[x.0].value;
        let g = self.nodes[gain.0].value.row(0).to_owned();
        let b = self.nodes[bias.0].value.row(0).to_owned();
        let mut value = xv.clone();
        for mut row in value.rows_mut() {
            let mean = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
            let sd = (var + LN_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) / sd * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(value, Op::LayerNormRows { x, gain, bias }, ng)
    }

    pub fn embedding(&mut self, weight: TensorId, tokens: &[usize]) -> Result<TensorId> {
        let w = &self.nodes[weight.0].value;
        let (rows, cols) = w.dim();
        if let Some(&t) = tokens.iter().find(|&&t| t >= rows) {
            return Err(Error::InvalidInput(format!(
                "token {t} out of range for embedding of {rows} rows"
            )));
        }
        let mut value = Array2::zeros((tokens.len(), cols));
        for (i, &t) in tokens.iter().enumerate() {
            value.row_mut(i).assign(&w.row(t));
        }
        let ng = self.needs(weight);
        Ok(self.push(
            value,
            Op::Embedding {
                weight,
                tokens: tokens.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> TensorId {
        let value = self.nodes[x.0]
            .value
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        let ng = self.needs(x);
        self.push(value, Op::SliceCols { x, start, len }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat shape mismatch");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Stack consecutive frame pairs: `T0 x d -> ceil(T0/2) x 2d`, zero
    /// padding a missing last frame.
    pub fn pair_stack(&mut self, x: TensorId) -> TensorId {
        let xv = &self.nodes[x.0].value;
        let (t0, d) = xv.dim();
        let t = t0.div_ceil(2);
        let mut value = Array2::zeros((t, 2 * d));
        for i in 0..t0 {
            let (r, off) = (i / 2, (i % 2) * d);
            value
                .slice_mut(ndarray::s![r, off..off + d])
                .assign(&xv.row(i));
        }
        let ng = self.needs(x);
        self.push(value, Op::PairStack(x), ng)
    }

    /// Inverted dropout; identity in evaluation mode.
    pub fn dropout(&mut self, x: TensorId, rate: f64, rng: &mut impl rand::Rng) -> TensorId {
        if !self.training || rate == 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mask = Array2::from_shape_fn(self.shape(x), |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let value = &self.nodes[x.0].value * &mask;
        let ng = self.needs(x);
        self.push(value, Op::Dropout { x, mask }, ng)
    }

    /// Replace selected rows with constant rows; replaced rows pass no
    /// gradient.
    pub fn row_replace(&mut self, x: TensorId, replacements: &[(usize, Array1<f64>)]) -> TensorId {
        let mut value = self.nodes[x.0].value.clone();
        let mut rows = Vec::with_capacity(replacements.len());
        for (r, new_row) in replacements {
            value.row_mut(*r).assign(new_row);
            rows.push(*r);
        }
        let ng = self.needs(x);
        self.push(value, Op::RowReplace { x, rows }, ng)
    }

    /// CTC loss `-log P(target | softmax(logits))` as a 1x1 node.
    pub fn ctc_loss(&mut self, logits: TensorId, target: &LabelSequence) -> Result<TensorId> {
        let logits_v = &self.nodes[logits.0].value;
        let probs = LogProbMatrix::from_logits(logits_v)?;
        let log_z = forward_backward(&probs, target)?.log_z;
        let grad = ctc_gradient_wrt_logits(logits_v, target)?;
        let value = Array2::from_elem((1, 1), -log_z);
        let ng = self.needs(logits);
        Ok(self.push(value, Op::CtcLoss { logits, grad }, ng))
    }

    /// Label-smoothed cross-entropy, averaged over rows, as a 1x1 node.
    pub fn label_smoothed_ce(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        epsilon: f64,
    ) -> Result<TensorId> {
        let logits_v = &self.nodes[logits.0].value;
        let (rows, classes) = logits_v.dim();
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::InvalidInput(format!(
                "label smoothing epsilon {epsilon} outside [0, 1)"
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::InvalidInput(format!(
                "target {t} out of range for {classes} classes"
            )));
        }
        let log_probs = LogProbMatrix::from_logits(logits_v)?;
        let lp = log_probs.values();
        let uniform = epsilon / classes as f64;
        let mut loss = 0.0;
        let mut grad = lp.mapv(f64::exp);
        for (i, &t) in targets.iter().enumerate() {
            loss -= (1.0 - epsilon) * lp[[i, t]];
            for j in 0..classes {
                loss -= uniform * lp[[i, j]];
                grad[[i, j]] -= uniform;
            }
            grad[[i, t]] -= 1.0 - epsilon;
        }
        let n = rows as f64;
        grad.mapv_inplace(|v| v / n);
        let value = Array2::from_elem((1, 1), loss / n);
        let ng = self.needs(logits);
        Ok(self.push(value, Op::LabelSmoothedCe { logits, grad }, ng))
    }

    pub fn scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.shape(id), (1, 1));
        self.nodes[id.0].value[[0, 0]]
    }

    /// Reverse pass from a 1x1 loss node.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Usage("backward requires a 1x1 loss node".into()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            for (id, delta) in self.node_deltas(i, &g) {
                self.accumulate(id, delta);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, delta: Array2<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    /// Input-gradient contributions of node `i` given its output gradient.
    fn node_deltas(&self, i: usize, g: &Array2<f64>) -> Vec<(TensorId, Array2<f64>)> {
        match &self.nodes[i].op {
            Op::Input | Op::Param => Vec::new(),
            Op::MatMul(a, b) => {
                let da = g.dot(&self.nodes[b.0].value.t());
                let db = self.nodes[a.0].value.t().dot(g);
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(a) => vec![(*a, g.t().to_owned())],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(a, b) => {
                let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![(*a, g.clone()), (*b, db)]
            }
            Op::Scale(a, k) => vec![(*a, g.mapv(|v| v * k))],
            Op::Relu(a) => {
                let mask = self.nodes[a.0]
                    .value
                    .mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                vec![(*a, g * &mask)]
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut dx = g * y;
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = drow.sum();
                    for (d, &yv) in drow.iter_mut().zip(yrow.iter()) {
                        *d -= dot * yv;
                    }
                }
                vec![(*a, dx)]
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.nodes[i].value; // log-probs
                let mut dx = g.clone();
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let gsum: f64 = drow.sum();
                    for (d, &lv) in drow.iter_mut().zip(yrow.iter()) {
                        *d -= gsum * lv.exp();
                    }
                }
                vec![(*a, dx)]
            }
            Op::LayerNormRows { x, gain, bias } => {
                let xv = &self.nodes[x.0].value;
                let gv = self.nodes[gain.0].value.row(0).to_owned();
                let (rows, cols) = xv.dim();
                let nf = cols as f64;
                let mut dx = Array2::zeros((rows, cols));
                let mut dgain = Array2::zeros((1, cols));
                let mut dbias = Array2::zeros((1, cols));
                for r in 0..rows {
                    let row = xv.row(r);
                    let mean = row.mean().unwrap();
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
                    let sd = (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) / sd).collect();
                    let grow = g.row(r);
                    let dxhat: Vec<f64> =
                        grow.iter().zip(gv.iter()).map(|(gr, gn)| gr * gn).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / nf;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / nf;
                    for c in 0..cols {
                        dx[[r, c]] = (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat) / sd;
                        dgain[[0, c]] += grow[c] * xhat[c];
                        dbias[[0, c]] += grow[c];
                    }
                }
                vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
            }
            Op::Embedding { weight, tokens } => {
                let (rows, cols) = self.nodes[weight.0].value.dim();
                let mut dw = Array2::zeros((rows, cols));
                for (r, &t) in tokens.iter().enumerate() {
                    let mut target = dw.row_mut(t);
                    target += &g.row(r);
                }
                vec![(*weight, dw)]
            }
            Op::SliceCols { x, start, len } => {
                let (rows, cols) = self.nodes[x.0].value.dim();
                let mut dx = Array2::zeros((rows, cols));
                dx.slice_mut(ndarray::s![.., *start..*start + *len]).assign(g);
                vec![(*x, dx)]
            }
            Op::ConcatCols(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.ncols();
                    out.push((*p, g.slice(ndarray::s![.., offset..offset + w]).to_owned()));
                    offset += w;
                }
                out
            }
            Op::PairStack(x) => {
                let (t0, d) = self.nodes[x.0].value.dim();
                let mut dx = Array2::zeros((t0, d));
                for r in 0..t0 {
                    let (row, off) = (r / 2, (r % 2) * d);
                    dx.row_mut(r)
                        .assign(&g.slice(ndarray::s![row, off..off + d]));
                }
                vec![(*x, dx)]
            }
            Op::Dropout { x, mask } => vec![(*x, g * mask)],
            Op::RowReplace { x, rows } => {
                let mut dx = g.clone();
                for &r in rows {
                    dx.row_mut(r).fill(0.0);
                }
                vec![(*x, dx)]
            }
            Op::CtcLoss { logits, grad } | Op::LabelSmoothedCe { logits, grad } => {
                vec![(*logits, grad.mapv(|v| v * g[[0, 0]]))]
            }
        }
    }

    pub fn grad(&self, id: TensorId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Accumulated parameter gradients by name, in parameter fetch order.
    pub fn param_grads(&self) -> IndexMap<String, Array2<f64>> {
        let mut out = IndexMap::new();
        for (name, id) in &self.param_ids {
            let shape = self.nodes[id.0].value.dim();
            let g = self
                .grads
                .get(id.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Array2::zeros(shape));
            out.insert(name.clone(), g);
        }
        out
    }
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}
