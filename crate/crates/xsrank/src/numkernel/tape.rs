use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::math::{sigmoid, softmax, softplus};
use super::{shape_err, KernelError, Result, Tensor};

/// Handle to a tensor recorded on a [`Tape`]. Ids are tape-scoped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// One recorded operation: the inputs it consumed plus whatever the
/// backward pass needs. Values saved at record time are never mutated,
/// so replaying a tape is deterministic.
#[derive(Debug, Clone)]
enum Record {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Transpose {
        a: TensorId,
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
        a: TensorId,
        c: f64,
    },
    AddRow {
        a: TensorId,
        v: TensorId,
    },
    Tanh {
        a: TensorId,
    },
    Relu {
        a: TensorId,
    },
    SoftmaxRows {
        a: TensorId,
    },
    LayerNormRows {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        // per-row (mean, 1/sqrt(var+eps)) saved from the forward pass
        stats: Vec<(f64, f64)>,
    },
    Dropout {
        a: TensorId,
        // 0.0 for dropped entries, 1/(1-rate) for survivors
        mask: Vec<f64>,
    },
    Sum {
        a: TensorId,
    },
    MeanAll {
        a: TensorId,
    },
    Reshape {
        a: TensorId,
    },
    SliceCols {
        a: TensorId,
        start: usize,
        width: usize,
    },
    ConcatCols {
        parts: Vec<TensorId>,
    },
    PairwiseLogistic {
        s: TensorId,
        labels: Vec<f64>,
    },
    ListNet {
        s: TensorId,
        labels: Vec<f64>,
    },
    ListMle {
        s: TensorId,
        // permutation sorting labels descending, ties by index
        perm: Vec<usize>,
    },
    Mse {
        s: TensorId,
        targets: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    record: Record,
}

/// Reverse-mode gradient tape.
///
/// Records are appended in execution order, so every input id precedes the
/// node that consumes it and `backward` can replay the tape once, back to
/// front. A tape has a single owner; independent tapes may run concurrently.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf tensor (trainable parameter or input data).
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, Record::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, record: Record) -> TensorId {
        debug_assert!(value.values().iter().all(|v| v.is_finite()));
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { value, record });
        id
    }

    fn check(&self, op: &'static str, id: TensorId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(KernelError::Usage(format!("{op}: id not on this tape")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check("matmul", a)?;
        self.check("matmul", b)?;
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += aip * bv[p * n + j];
                }
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Record::Matmul { a, b }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        self.check("transpose", a)?;
        let (m, n) = self.value(a).dims2();
        let av = self.value(a).values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let value = Tensor::matrix(n, m, out)?;
        Ok(self.push(value, Record::Transpose { a }))
    }

    fn elementwise(
        &mut self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        record: Record,
    ) -> Result<TensorId> {
        self.check(op, a)?;
        self.check(op, b)?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let vals: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), vals)?;
        Ok(self.push(value, record))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("add", a, b, |x, y| x + y, Record::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("sub", a, b, |x, y| x - y, Record::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("mul", a, b, |x, y| x * y, Record::Mul { a, b })
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        self.check("scale", a)?;
        let vals: Vec<f64> = self.value(a).values().iter().map(|&x| x * c).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), vals)?;
        Ok(self.push(value, Record::Scale { a, c }))
    }

    /// Broadcast-add a length-n vector to every row of an m×n tensor.
    pub fn add_row(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        self.check("add_row", a)?;
        self.check("add_row", v)?;
        let (m, n) = self.value(a).dims2();
        if self.value(v).len() != n {
            return Err(shape_err(
                "add_row",
                format!("rows of width {n}, bias of length {}", self.value(v).len()),
            ));
        }
        let av = self.value(a).values();
        let vv = self.value(v).values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = av[i * n + j] + vv[j];
            }
        }
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(value, Record::AddRow { a, v }))
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        self.check("tanh", a)?;
        let vals: Vec<f64> = self.value(a).values().iter().map(|x| x.tanh()).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), vals)?;
        Ok(self.push(value, Record::Tanh { a }))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        self.check("relu", a)?;
        let vals: Vec<f64> = self.value(a).values().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), vals)?;
        Ok(self.push(value, Record::Relu { a }))
    }

    /// Row-wise softmax with max-subtraction; a vector is one row.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        self.check("softmax", a)?;
        let (m, n) = self.value(a).dims2();
        let av = self.value(a).values();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(softmax(&av[i * n..(i + 1) * n]));
        }
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        Ok(self.push(value, Record::SoftmaxRows { a }))
    }

    /// Per-row layer normalization with population variance:
    /// `(x - mean) / sqrt(var + eps) * gain + bias`.
    pub fn layer_norm_rows(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        self.check("layer_norm", x)?;
        self.check("layer_norm", gain)?;
        self.check("layer_norm", bias)?;
        if eps < 0.0 {
            return Err(KernelError::Config("layer_norm: eps must be >= 0".into()));
        }
        let (m, n) = self.value(x).dims2();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "row width {n}, gain {}, bias {}",
                    self.value(gain).len(),
                    self.value(bias).len()
                ),
            ));
        }
        let xv = self.value(x).values();
        let gv = self.value(gain).values();
        let bv = self.value(bias).values();
        let mut out = vec![0.0; m * n];
        let mut stats = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            stats.push((mean, inv));
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv * gv[j] + bv[j];
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Record::LayerNormRows {
                x,
                gain,
                bias,
                stats,
            },
        ))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by 1/(1-rate); in
    /// evaluation mode (or rate 0) the input id is returned unchanged.
    pub fn dropout(
        &mut self,
        a: TensorId,
        rate: f64,
        rng: &mut ChaCha8Rng,
        training: bool,
    ) -> Result<TensorId> {
        self.check("dropout", a)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(KernelError::Config(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let vals: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), vals)?;
        Ok(self.push(value, Record::Dropout { a, mask }))
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        self.check("sum", a)?;
        let s = self.value(a).values().iter().sum();
        Ok(self.push(Tensor::scalar(s), Record::Sum { a }))
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        self.check("mean", a)?;
        let n = self.value(a).len() as f64;
        let s = self.value(a).values().iter().sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(s), Record::MeanAll { a }))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        self.check("reshape", a)?;
        let value = Tensor::new(shape, self.value(a).values().to_vec())?;
        Ok(self.push(value, Record::Reshape { a }))
    }

    /// Columns `[start, start+width)` of an m×n tensor.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, width: usize) -> Result<TensorId> {
        self.check("slice_cols", a)?;
        let (m, n) = self.value(a).dims2();
        if start + width > n || width == 0 {
            return Err(shape_err(
                "slice_cols",
                format!("cols [{start}, {}) of width-{n} tensor", start + width),
            ));
        }
        let av = self.value(a).values();
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&av[i * n + start..i * n + start + width]);
        }
        let value = Tensor::matrix(m, width, out)?;
        Ok(self.push(value, Record::SliceCols { a, start, width }))
    }

    /// Concatenate same-height tensors along columns.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no parts"));
        }
        for &p in parts {
            self.check("concat_cols", p)?;
        }
        let m = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (mi, ni) = self.value(p).dims2();
                if mi != m {
                    0
                } else {
                    ni
                }
            })
            .collect();
        if widths.iter().any(|&w| w == 0) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = self.value(p).values();
                out.extend_from_slice(&pv[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::matrix(m, total, out)?;
        Ok(self.push(
            value,
            Record::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Σ over ordered pairs with `y_i > y_j` of `log(1 + exp(s_j - s_i))`.
    pub fn pairwise_logistic(&mut self, s: TensorId, labels: &[f64]) -> Result<TensorId> {
        self.check("pairwise_logistic", s)?;
        let sv = self.value(s).values();
        if sv.len() != labels.len() {
            return Err(shape_err(
                "pairwise_logistic",
                format!("{} scores, {} labels", sv.len(), labels.len()),
            ));
        }
        let mut loss = 0.0;
        for i in 0..sv.len() {
            for j in 0..sv.len() {
                if labels[i] > labels[j] {
                    loss += softplus(sv[j] - sv[i]);
                }
            }
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Record::PairwiseLogistic {
                s,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Cross-entropy between `softmax(labels)` and `softmax(scores)`.
    pub fn listnet(&mut self, s: TensorId, labels: &[f64]) -> Result<TensorId> {
        self.check("listnet", s)?;
        let sv = self.value(s).values();
        if sv.len() != labels.len() {
            return Err(shape_err(
                "listnet",
                format!("{} scores, {} labels", sv.len(), labels.len()),
            ));
        }
        let p = softmax(labels);
        let q = softmax(sv);
        let loss = -p
            .iter()
            .zip(&q)
            .map(|(&pi, &qi)| pi * qi.ln())
            .sum::<f64>();
        Ok(self.push(
            Tensor::scalar(loss),
            Record::ListNet {
                s,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Negative log Plackett-Luce likelihood of the permutation sorting
    /// `labels` descending (ties broken by item index).
    pub fn listmle(&mut self, s: TensorId, labels: &[f64]) -> Result<TensorId> {
        self.check("listmle", s)?;
        let sv = self.value(s).values();
        if sv.len() != labels.len() {
            return Err(shape_err(
                "listmle",
                format!("{} scores, {} labels", sv.len(), labels.len()),
            ));
        }
        let perm = descending_permutation(labels);
        let loss = listmle_forward(sv, &perm);
        Ok(self.push(Tensor::scalar(loss), Record::ListMle { s, perm }))
    }

    /// Mean squared error against fixed targets.
    pub fn mse(&mut self, s: TensorId, targets: &[f64]) -> Result<TensorId> {
        self.check("mse", s)?;
        let sv = self.value(s).values();
        if sv.len() != targets.len() {
            return Err(shape_err(
                "mse",
                format!("{} scores, {} targets", sv.len(), targets.len()),
            ));
        }
        let n = sv.len() as f64;
        let loss = sv
            .iter()
            .zip(targets)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Record::Mse {
                s,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Accumulate reverse-mode gradients from a scalar loss back to every
    /// node. Each record is visited exactly once, in reverse order.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(KernelError::Usage("backward: loss not on tape".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(shape_err("backward", "loss must be scalar"));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[loss.0][0] = 1.0;

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            // Split the gradient buffer so the output slot can be read while
            // input slots are written.
            let (head, tail) = grads.split_at_mut(idx);
            let g_out: &[f64] = &tail[0];
            if g_out.iter().all(|&g| g == 0.0) {
                continue;
            }
            match &node.record {
                Record::Leaf => {}
                Record::Matmul { a, b } => {
                    let (m, k) = self.nodes[a.0].value.dims2();
                    let n = self.nodes[b.0].value.dims2().1;
                    let av = self.nodes[a.0].value.values();
                    let bv = self.nodes[b.0].value.values();
                    // dA = dC * B^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g_out[i * n + j] * bv[p * n + j];
                            }
                            head[a.0][i * k + p] += acc;
                        }
                    }
                    // dB = A^T * dC
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += av[i * k + p] * g_out[i * n + j];
                            }
                            head[b.0][p * n + j] += acc;
                        }
                    }
                }
                Record::Transpose { a } => {
                    let (m, n) = self.nodes[a.0].value.dims2();
                    for i in 0..m {
                        for j in 0..n {
                            head[a.0][i * n + j] += g_out[j * m + i];
                        }
                    }
                }
                Record::Add { a, b } => {
                    accumulate(&mut head[a.0], g_out, 1.0);
                    accumulate(&mut head[b.0], g_out, 1.0);
                }
                Record::Sub { a, b } => {
                    accumulate(&mut head[a.0], g_out, 1.0);
                    accumulate(&mut head[b.0], g_out, -1.0);
                }
                Record::Mul { a, b } => {
                    let av: Vec<f64> = self.nodes[a.0].value.values().to_vec();
                    let bv: Vec<f64> = self.nodes[b.0].value.values().to_vec();
                    for (i, &g) in g_out.iter().enumerate() {
                        head[a.0][i] += g * bv[i];
                    }
                    for (i, &g) in g_out.iter().enumerate() {
                        head[b.0][i] += g * av[i];
                    }
                }
                Record::Scale { a, c } => {
                    accumulate(&mut head[a.0], g_out, *c);
                }
                Record::AddRow { a, v } => {
                    let (m, n) = self.nodes[a.0].value.dims2();
                    accumulate(&mut head[a.0], g_out, 1.0);
                    for i in 0..m {
                        for j in 0..n {
                            head[v.0][j] += g_out[i * n + j];
                        }
                    }
                }
                Record::Tanh { a } => {
                    let yv = node.value.values();
                    for (i, &g) in g_out.iter().enumerate() {
                        head[a.0][i] += g * (1.0 - yv[i] * yv[i]);
                    }
                }
                Record::Relu { a } => {
                    let xv = self.nodes[a.0].value.values();
                    for (i, &g) in g_out.iter().enumerate() {
                        if xv[i] > 0.0 {
                            head[a.0][i] += g;
                        }
                    }
                }
                Record::SoftmaxRows { a } => {
                    let (m, n) = node.value.dims2();
                    let yv = node.value.values();
                    for i in 0..m {
                        let row_y = &yv[i * n..(i + 1) * n];
                        let row_g = &g_out[i * n..(i + 1) * n];
                        let dot: f64 = row_y.iter().zip(row_g).map(|(&y, &g)| y * g).sum();
                        for j in 0..n {
                            head[a.0][i * n + j] += row_y[j] * (row_g[j] - dot);
                        }
                    }
                }
                Record::LayerNormRows {
                    x,
                    gain,
                    bias,
                    stats,
                } => {
                    let (m, n) = self.nodes[x.0].value.dims2();
                    let xv = self.nodes[x.0].value.values();
                    let gv = self.nodes[gain.0].value.values();
                    for i in 0..m {
                        let (mean, inv) = stats[i];
                        let row_x = &xv[i * n..(i + 1) * n];
                        let row_g = &g_out[i * n..(i + 1) * n];
                        // dy = dL/dx̂, with x̂ the normalized row
                        let mut mean_dy = 0.0;
                        let mut mean_dy_xhat = 0.0;
                        for j in 0..n {
                            let xhat = (row_x[j] - mean) * inv;
                            let dy = row_g[j] * gv[j];
                            mean_dy += dy;
                            mean_dy_xhat += dy * xhat;
                            head[gain.0][j] += row_g[j] * xhat;
                            head[bias.0][j] += row_g[j];
                        }
                        mean_dy /= n as f64;
                        mean_dy_xhat /= n as f64;
                        for j in 0..n {
                            let xhat = (row_x[j] - mean) * inv;
                            let dy = row_g[j] * gv[j];
                            head[x.0][i * n + j] += inv * (dy - mean_dy - xhat * mean_dy_xhat);
                        }
                    }
                }
                Record::Dropout { a, mask } => {
                    for (i, &g) in g_out.iter().enumerate() {
                        head[a.0][i] += g * mask[i];
                    }
                }
                Record::Sum { a } => {
                    let g = g_out[0];
                    for slot in head[a.0].iter_mut() {
                        *slot += g;
                    }
                }
                Record::MeanAll { a } => {
                    let n = head[a.0].len() as f64;
                    let g = g_out[0] / n;
                    for slot in head[a.0].iter_mut() {
                        *slot += g;
                    }
                }
                Record::Reshape { a } => {
                    accumulate(&mut head[a.0], g_out, 1.0);
                }
                Record::SliceCols { a, start, width } => {
                    let (m, n) = self.nodes[a.0].value.dims2();
                    for i in 0..m {
                        for j in 0..*width {
                            head[a.0][i * n + start + j] += g_out[i * width + j];
                        }
                    }
                }
                Record::ConcatCols { parts } => {
                    let m = node.value.dims2().0;
                    let total = node.value.dims2().1;
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].value.dims2().1;
                        for i in 0..m {
                            for j in 0..w {
                                head[p.0][i * w + j] += g_out[i * total + offset + j];
                            }
                        }
                        offset += w;
                    }
                }
                Record::PairwiseLogistic { s, labels } => {
                    let sv = self.nodes[s.0].value.values();
                    let g = g_out[0];
                    for i in 0..sv.len() {
                        for j in 0..sv.len() {
                            if labels[i] > labels[j] {
                                let sig = sigmoid(sv[j] - sv[i]);
                                head[s.0][j] += g * sig;
                                head[s.0][i] -= g * sig;
                            }
                        }
                    }
                }
                Record::ListNet { s, labels } => {
                    let sv = self.nodes[s.0].value.values();
                    let p = softmax(labels);
                    let q = softmax(sv);
                    let g = g_out[0];
                    for i in 0..sv.len() {
                        head[s.0][i] += g * (q[i] - p[i]);
                    }
                }
                Record::ListMle { s, perm } => {
                    let sv = self.nodes[s.0].value.values();
                    let g = g_out[0];
                    let n = perm.len();
                    // suffix log-sum-exp over the permuted scores
                    let mut lse = vec![0.0; n];
                    let mut running = f64::NEG_INFINITY;
                    for k in (0..n).rev() {
                        let s_k = sv[perm[k]];
                        running = log_add_exp(running, s_k);
                        lse[k] = running;
                    }
                    for k in 0..n {
                        head[s.0][perm[k]] -= g;
                        for &item in perm.iter().skip(k) {
                            head[s.0][item] += g * (sv[item] - lse[k]).exp();
                        }
                    }
                }
                Record::Mse { s, targets } => {
                    let sv = self.nodes[s.0].value.values();
                    let n = sv.len() as f64;
                    let g = g_out[0];
                    for i in 0..sv.len() {
                        head[s.0][i] += g * 2.0 * (sv[i] - targets[i]) / n;
                    }
                }
            }
        }

        let shapes: Vec<Vec<usize>> = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients per tape node, indexed by [`TensorId`].
pub struct Gradients {
    grads: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn tensor(&self, id: TensorId) -> Tensor {
        Tensor::new(self.shapes[id.0].clone(), self.grads[id.0].clone())
            .expect("gradient matches node shape")
    }
}

fn accumulate(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s * factor;
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Indices sorting `labels` descending; ties keep ascending index order.
pub(crate) fn descending_permutation(labels: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.sort_by(|&i, &j| {
        labels[j]
            .partial_cmp(&labels[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    idx
}

pub(crate) fn listmle_forward(scores: &[f64], perm: &[usize]) -> f64 {
    let n = perm.len();
    let mut loss = 0.0;
    let mut running = f64::NEG_INFINITY;
    let mut lse = vec![0.0; n];
    for k in (0..n).rev() {
        running = log_add_exp(running, scores[perm[k]]);
        lse[k] = running;
    }
    for k in 0..n {
        loss += lse[k] - scores[perm[k]];
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tape_with(values: Vec<f64>, shape: Vec<usize>) -> (Tape, TensorId) {
        let mut t = Tape::new();
        let id = t.leaf(Tensor::new(shape, values).unwrap());
        (t, id)
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(3, 3, vec![1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap());
        let eye = t.leaf(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let c = t.matmul(a, eye).unwrap();
        assert_eq!(t.value(c).values(), t.value(a).values());
    }

    #[test]
    fn matmul_scalar_case() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let b = t.leaf(Tensor::matrix(1, 1, vec![3.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).values(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() - 0.5).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() - 0.5).collect();
        let mut reference = vec![0.0; 4 * 2];
        for i in 0..4 {
            for j in 0..2 {
                for p in 0..3 {
                    reference[i * 2 + j] += a[i * 3 + p] * b[p * 2 + j];
                }
            }
        }
        let mut t = Tape::new();
        let ta = t.leaf(Tensor::matrix(4, 3, a).unwrap());
        let tb = t.leaf(Tensor::matrix(3, 2, b).unwrap());
        let c = t.matmul(ta, tb).unwrap();
        for (got, want) in t.value(c).values().iter().zip(&reference) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_dimension_mismatch_errors() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = t.leaf(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        assert!(matches!(t.matmul(a, b), Err(KernelError::Shape { .. })));
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let (mut t, v) = tape_with(vec![5.0, 5.0, 5.0], vec![3]);
        let s = t.softmax_rows(v).unwrap();
        for &x in t.value(s).values() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }

        let (mut t, v) = tape_with(vec![0.0, 2f64.ln()], vec![2]);
        let s = t.softmax_rows(v).unwrap();
        assert!((t.value(s).values()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((t.value(s).values()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance_and_normalization() {
        let xs = vec![0.3, -1.2, 4.0, 2.2];
        let (mut t, v) = tape_with(xs.clone(), vec![4]);
        let s = t.softmax_rows(v).unwrap();
        let sum: f64 = t.value(s).values().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);

        let shifted: Vec<f64> = xs.iter().map(|x| x + 123.456).collect();
        let (mut t2, v2) = tape_with(shifted, vec![4]);
        let s2 = t2.softmax_rows(v2).unwrap();
        for (a, b) in t.value(s).values().iter().zip(t2.value(s2).values()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn layer_norm_hand_cases() {
        // already normalized
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, -1.0]).unwrap());
        let g = t.leaf(Tensor::vector(vec![1.0, 1.0]).unwrap());
        let b = t.leaf(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let y = t.layer_norm_rows(x, g, b, 1e-12).unwrap();
        assert!((t.value(y).values()[0] - 1.0).abs() < 1e-6);
        assert!((t.value(y).values()[1] + 1.0).abs() < 1e-6);

        // constant row collapses to zero
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![4.0, 4.0, 4.0]).unwrap());
        let g = t.leaf(Tensor::vector(vec![1.0; 3]).unwrap());
        let b = t.leaf(Tensor::vector(vec![0.0; 3]).unwrap());
        let y = t.layer_norm_rows(x, g, b, 1e-6).unwrap();
        for &v in t.value(y).values() {
            assert_eq!(v, 0.0);
        }

        // hand computation: mean 2, population variance 8/3
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0, 2.0, 4.0]).unwrap());
        let g = t.leaf(Tensor::vector(vec![1.0; 3]).unwrap());
        let b = t.leaf(Tensor::vector(vec![0.0; 3]).unwrap());
        let y = t.layer_norm_rows(x, g, b, 0.0).unwrap();
        let want = (1.5f64).sqrt();
        assert!((t.value(y).values()[0] + want).abs() < 1e-12);
        assert!(t.value(y).values()[1].abs() < 1e-12);
        assert!((t.value(y).values()[2] - want).abs() < 1e-12);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut t, x) = tape_with(vec![1.0; 8], vec![8]);
        // rate 0 and eval mode are identities (same id back)
        assert_eq!(t.dropout(x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(t.dropout(x, 0.7, &mut rng, false).unwrap(), x);
        assert!(t.dropout(x, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let n = 100_000;
        let (mut t, x) = tape_with(vec![1.0; n], vec![n]);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let y = t.dropout(x, 0.5, &mut rng, true).unwrap();
        let mean: f64 = t.value(y).values().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn backward_sum_gives_ones() {
        let (mut t, x) = tape_with(vec![1.0, 2.0, 3.0], vec![3]);
        let loss = t.sum(x).unwrap();
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(x), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_at_three() {
        let (mut t, x) = tape_with(vec![3.0], vec![1]);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq).unwrap();
        let grads = t.backward(loss).unwrap();
        assert!((grads.get(x)[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_loss() {
        let (t, x) = tape_with(vec![1.0, 2.0], vec![2]);
        assert!(matches!(t.backward(x), Err(KernelError::Shape { .. })));
        let empty = Tape::new();
        assert!(matches!(empty.backward(x), Err(KernelError::Usage(_))));
    }

    #[test]
    fn identical_tapes_give_bit_identical_gradients() {
        let build = || {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::matrix(2, 2, vec![0.4, -0.2, 1.1, 0.8]).unwrap());
            let w = t.leaf(Tensor::matrix(2, 2, vec![0.5, 0.1, -0.7, 0.9]).unwrap());
            let h = t.matmul(x, w).unwrap();
            let a = t.tanh(h).unwrap();
            let loss = t.sum(a).unwrap();
            let g = t.backward(loss).unwrap();
            (g.get(x).to_vec(), g.get(w).to_vec())
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn listmle_permutation_tie_break() {
        assert_eq!(descending_permutation(&[1.0, 3.0, 3.0, 0.0]), vec![1, 2, 0, 3]);
    }
}
