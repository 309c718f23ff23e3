//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op appends a node
//! holding its output value and enough bookkeeping to run its adjoint. Calling
//! [`Graph::backward`] walks the tape once in reverse; a graph can be
//! differentiated only once.
//!
//! Every forward op checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] naming the op.

use super::tensor::{Tensor, NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    MatMulT { a: Var, b: Var },
    Conv2d { x: Var, k: Var, stride: usize },
    ChannelBias { x: Var, b: Var },
    GlobalAvgPool { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var, axis: usize },
    StraightThroughStep { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Sum { x: Var },
    L2NormalizeRows { x: Var },
    ConcatRows { a: Var, b: Var },
    GatherRows { x: Var, rows: Vec<usize> },
    OffDiagonalCrossEntropy { sim: Var, positives: Vec<usize> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// The differentiation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    differentiated: bool,
}

/// Result of [`Graph::backward`]: one adjoint per node reachable from the seed.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the seed with respect to `v`; zeros when `v` does not
    /// influence the seed.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn is_connected(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input (parameter or data). Gradients are reported for leaves
    /// like for any other node.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push("leaf", value, Op::Leaf)
    }

    /// `x·W + b` for `x: N×d_in`, `W: d_in×d_out`, `b: d_out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, d_in) = self.value(x).dims2("affine")?;
        let (w_in, d_out) = self.value(w).dims2("affine")?;
        if w_in != d_in {
            return Err(Error::dim(
                "affine",
                format!("x is {n}×{d_in} but W is {w_in}×{d_out}"),
            ));
        }
        if self.shape(b) != [d_out] {
            return Err(Error::dim(
                "affine",
                format!("bias shape {:?}, expected [{d_out}]", self.shape(b)),
            ));
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; n * d_out];
        for r in 0..n {
            let orow = &mut out[r * d_out..(r + 1) * d_out];
            orow.copy_from_slice(bd);
            for i in 0..d_in {
                let xv = xd[r * d_in + i];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wd[i * d_out..(i + 1) * d_out];
                for (o, wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        let value = Tensor::new(vec![n, d_out], out)?;
        self.push("affine", value, Op::Affine { x, w, b })
    }

    /// `a·bᵀ` for `a: N×d`, `b: M×d`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims2("matmul_t")?;
        let (m, d2) = self.value(b).dims2("matmul_t")?;
        if d != d2 {
            return Err(Error::dim("matmul_t", format!("{n}×{d} vs {m}×{d2}")));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ar = &ad[i * d..(i + 1) * d];
            for j in 0..m {
                let br = &bd[j * d..(j + 1) * d];
                out[i * m + j] = ar.iter().zip(br).map(|(p, q)| p * q).sum();
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        self.push("matmul_t", value, Op::MatMulT { a, b })
    }

    /// Valid (unpadded) cross-correlation. `x: N×C×H×W`, `k: F×C×kh×kw`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        let (n, c, h, w) = self.value(x).dims4("conv2d")?;
        let (f, kc, kh, kw) = self.value(k).dims4("conv2d")?;
        if kc != c {
            return Err(Error::dim(
                "conv2d",
                format!("input has {c} channels, kernel expects {kc}"),
            ));
        }
        if kh > h || kw > w {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}×{kw} larger than input {h}×{w}"),
            ));
        }
        let ho = (h - kh) / stride + 1;
        let wo = (w - kw) / stride + 1;
        let xd = self.value(x).data();
        let kd = self.value(k).data();
        let mut out = vec![0.0; n * f * ho * wo];
        for ni in 0..n {
            for fi in 0..f {
                let obase = (ni * f + fi) * ho * wo;
                let oplane = &mut out[obase..obase + ho * wo];
                for ci in 0..c {
                    let xbase = (ni * c + ci) * h * w;
                    let xplane = &xd[xbase..xbase + h * w];
                    let kbase = ((fi * c + ci) * kh) * kw;
                    for i in 0..kh {
                        for j in 0..kw {
                            let kv = kd[kbase + i * kw + j];
                            for oy in 0..ho {
                                let xrow = &xplane[(oy * stride + i) * w + j..];
                                let orow = &mut oplane[oy * wo..(oy + 1) * wo];
                                if stride == 1 {
                                    for (o, xv) in orow.iter_mut().zip(xrow) {
                                        *o += kv * xv;
                                    }
                                } else {
                                    for (ox, o) in orow.iter_mut().enumerate() {
                                        *o += kv * xrow[ox * stride];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, f, ho, wo], out)?;
        self.push("conv2d", value, Op::Conv2d { x, k, stride })
    }

    /// Adds `b[c]` to every spatial position of channel `c`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("channel_bias")?;
        if self.shape(b) != [c] {
            return Err(Error::dim(
                "channel_bias",
                format!("bias shape {:?} for {c} channels", self.shape(b)),
            ));
        }
        let bd = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (plane_idx, plane) in out.chunks_mut(h * w).enumerate() {
            let bv = bd[plane_idx % c];
            plane.iter_mut().for_each(|v| *v += bv);
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push("channel_bias", value, Op::ChannelBias { x, b })
    }

    /// `N×C×H×W → N×C` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("global_avg_pool")?;
        let area = (h * w) as f64;
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / area)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push("relu", value, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid { x })
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |t: usize| (o * len + t) * inner + i;
                let max = (0..len).map(|t| xd[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for t in 0..len {
                    let e = (xd[idx(t)] - max).exp();
                    out[idx(t)] = e;
                    total += e;
                }
                for t in 0..len {
                    out[idx(t)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push("softmax", value, Op::Softmax { x, axis })
    }

    /// Forward: `1` where `x ≥ 0.5`, else `0`. Backward: identity
    /// (straight-through estimator).
    pub fn straight_through_step(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        self.push("straight_through_step", value, Op::StraightThroughStep { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let bd = self.value(b).data();
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(bd)
            .map(|(p, q)| p + q)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push("add", value, Op::Add { a, b })
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let bd = self.value(b).data();
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(bd)
            .map(|(p, q)| p * q)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push("mul", value, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push("scale", value, Op::Scale { x, factor })
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum { x })
    }

    /// Row-wise unit normalization of a matrix (a vector is one row).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = *t.shape().last().unwrap_or(&1);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let norm = super::tensor::l2_norm(row);
            if norm <= NORM_EPS {
                return Err(Error::Degenerate {
                    op: "l2_normalize",
                    norm,
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("l2_normalize", value, Op::L2NormalizeRows { x })
    }

    /// Stacks `a: N×d` on top of `b: M×d`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims2("concat_rows")?;
        let (m, d2) = self.value(b).dims2("concat_rows")?;
        if d != d2 {
            return Err(Error::dim("concat_rows", format!("{n}×{d} vs {m}×{d2}")));
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let value = Tensor::new(vec![n + m, d], out)?;
        self.push("concat_rows", value, Op::ConcatRows { a, b })
    }

    /// Selects rows of a matrix, in the given order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.value(x).dims2("gather_rows")?;
        if rows.is_empty() {
            return Err(Error::dim("gather_rows", "empty row selection"));
        }
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::dim("gather_rows", format!("row {r} of {n}")));
            }
            out.extend_from_slice(self.value(x).row(r));
        }
        let value = Tensor::new(vec![rows.len(), d], out)?;
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Mean over rows `i` of `−s[i, p(i)] + log Σ_{k≠i} exp s[i, k]` for a
    /// square score matrix `s` and positive index `p(i) ≠ i`.
    pub fn off_diagonal_cross_entropy(&mut self, sim: Var, positives: &[usize]) -> Result<Var> {
        let (r, c) = self.value(sim).dims2("off_diagonal_cross_entropy")?;
        if r != c || positives.len() != r {
            return Err(Error::dim(
                "off_diagonal_cross_entropy",
                format!("{r}×{c} scores with {} positives", positives.len()),
            ));
        }
        if r < 2 {
            return Err(Error::InsufficientBatch(format!("{r} views")));
        }
        for (i, &p) in positives.iter().enumerate() {
            if p >= r || p == i {
                return Err(Error::Contract(format!("invalid positive {p} for row {i}")));
            }
        }
        let s = self.value(sim);
        let mut total = 0.0;
        for (i, &p) in positives.iter().enumerate() {
            let row = s.row(i);
            total += off_diagonal_logsumexp(row, i) - row[p];
        }
        let value = Tensor::scalar(total / r as f64);
        self.push(
            "off_diagonal_cross_entropy",
            value,
            Op::OffDiagonalCrossEntropy {
                sim,
                positives: positives.to_vec(),
            },
        )
    }

    /// Mean negative log-softmax of the labelled class, `logits: N×C`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.value(logits).dims2("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{n} rows, {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!("label {bad} outside [0, {c})")));
        }
        let t = self.value(logits);
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let row = t.row(i);
                logsumexp(row) - row[l]
            })
            .sum();
        let value = Tensor::scalar(total / n as f64);
        self.push(
            "softmax_cross_entropy",
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`. Fails if the graph was already
    /// differentiated or the seed is not a single value.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.differentiated {
            return Err(Error::Contract(
                "backward called twice on the same graph".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward seed must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.differentiated = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::Affine { x, w, b } => {
                let (n, d_in) = self.value(x).dims2("affine").unwrap();
                let d_out = self.shape(b)[0];
                let xd = self.value(x).data();
                let wd = self.value(w).data();
                let mut dx = vec![0.0; n * d_in];
                let mut dw = vec![0.0; d_in * d_out];
                let mut db = vec![0.0; d_out];
                for r in 0..n {
                    let grow = &gd[r * d_out..(r + 1) * d_out];
                    for (acc_b, gv) in db.iter_mut().zip(grow) {
                        *acc_b += gv;
                    }
                    for i in 0..d_in {
                        let wrow = &wd[i * d_out..(i + 1) * d_out];
                        dx[r * d_in + i] = wrow.iter().zip(grow).map(|(p, q)| p * q).sum();
                        let xv = xd[r * d_in + i];
                        if xv != 0.0 {
                            let dwrow = &mut dw[i * d_out..(i + 1) * d_out];
                            for (dwv, gv) in dwrow.iter_mut().zip(grow) {
                                *dwv += xv * gv;
                            }
                        }
                    }
                }
                acc(x, Tensor::new(vec![n, d_in], dx).unwrap());
                acc(w, Tensor::new(vec![d_in, d_out], dw).unwrap());
                acc(b, Tensor::new(vec![d_out], db).unwrap());
            }
            &Op::MatMulT { a, b } => {
                let (n, d) = self.value(a).dims2("matmul_t").unwrap();
                let (m, _) = self.value(b).dims2("matmul_t").unwrap();
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                let mut da = vec![0.0; n * d];
                let mut dbm = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let gv = gd[i * m + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            da[i * d + t] += gv * bd[j * d + t];
                            dbm[j * d + t] += gv * ad[i * d + t];
                        }
                    }
                }
                acc(a, Tensor::new(vec![n, d], da).unwrap());
                acc(b, Tensor::new(vec![m, d], dbm).unwrap());
            }
            &Op::Conv2d { x, k, stride } => {
                let (n, c, h, w) = self.value(x).dims4("conv2d").unwrap();
                let (f, _, kh, kw) = self.value(k).dims4("conv2d").unwrap();
                let ho = (h - kh) / stride + 1;
                let wo = (w - kw) / stride + 1;
                let xd = self.value(x).data();
                let kd = self.value(k).data();
                let mut dx = vec![0.0; xd.len()];
                let mut dk = vec![0.0; kd.len()];
                for ni in 0..n {
                    for fi in 0..f {
                        let gbase = (ni * f + fi) * ho * wo;
                        let gplane = &gd[gbase..gbase + ho * wo];
                        for ci in 0..c {
                            let xbase = (ni * c + ci) * h * w;
                            let kbase = ((fi * c + ci) * kh) * kw;
                            for i in 0..kh {
                                for j in 0..kw {
                                    let kv = kd[kbase + i * kw + j];
                                    let mut dkv = 0.0;
                                    for oy in 0..ho {
                                        let off = xbase + (oy * stride + i) * w + j;
                                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                                        for (ox, gv) in grow.iter().enumerate() {
                                            let xi = off + ox * stride;
                                            dkv += gv * xd[xi];
                                            dx[xi] += gv * kv;
                                        }
                                    }
                                    dk[kbase + i * kw + j] += dkv;
                                }
                            }
                        }
                    }
                }
                acc(x, Tensor::new(vec![n, c, h, w], dx).unwrap());
                acc(k, Tensor::new(self.shape(k).to_vec(), dk).unwrap());
            }
            &Op::ChannelBias { x, b } => {
                let (_, c, h, w) = self.value(x).dims4("channel_bias").unwrap();
                let mut db = vec![0.0; c];
                for (plane_idx, plane) in gd.chunks(h * w).enumerate() {
                    db[plane_idx % c] += plane.iter().sum::<f64>();
                }
                acc(x, g.clone());
                acc(b, Tensor::new(vec![c], db).unwrap());
            }
            &Op::GlobalAvgPool { x } => {
                let (n, c, h, w) = self.value(x).dims4("global_avg_pool").unwrap();
                let area = (h * w) as f64;
                let mut dx = Vec::with_capacity(n * c * h * w);
                for &gv in gd {
                    dx.extend(std::iter::repeat_n(gv / area, h * w));
                }
                acc(x, Tensor::new(vec![n, c, h, w], dx).unwrap());
            }
            &Op::Relu { x } => {
                let xd = self.value(x).data();
                let dx = xd
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                acc(x, Tensor::new(g.shape().to_vec(), dx).unwrap());
            }
            &Op::Sigmoid { x } => {
                let yd = self.nodes[idx].value.data();
                let dx = yd.iter().zip(gd).map(|(&y, &gv)| gv * y * (1.0 - y)).collect();
                acc(x, Tensor::new(g.shape().to_vec(), dx).unwrap());
            }
            &Op::Softmax { x, axis } => {
                let shape = g.shape().to_vec();
                let (outer, len, inner) = axis_split(&shape, axis);
                let yd = self.nodes[idx].value.data();
                let mut dx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let ix = |t: usize| (o * len + t) * inner + i;
                        let dot: f64 = (0..len).map(|t| yd[ix(t)] * gd[ix(t)]).sum();
                        for t in 0..len {
                            dx[ix(t)] = yd[ix(t)] * (gd[ix(t)] - dot);
                        }
                    }
                }
                acc(x, Tensor::new(shape, dx).unwrap());
            }
            &Op::StraightThroughStep { x } => acc(x, g.clone()),
            &Op::Add { a, b } => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            &Op::Mul { a, b } => {
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                let da = bd.iter().zip(gd).map(|(p, q)| p * q).collect();
                let dbv = ad.iter().zip(gd).map(|(p, q)| p * q).collect();
                acc(a, Tensor::new(g.shape().to_vec(), da).unwrap());
                acc(b, Tensor::new(g.shape().to_vec(), dbv).unwrap());
            }
            &Op::Scale { x, factor } => acc(x, g.map(|v| v * factor)),
            &Op::Sum { x } => acc(x, Tensor::filled(self.shape(x), gd[0])),
            &Op::L2NormalizeRows { x } => {
                let xt = self.value(x);
                let cols = *xt.shape().last().unwrap_or(&1);
                let yd = self.nodes[idx].value.data();
                let mut dx = vec![0.0; yd.len()];
                for ((xr, yr), (gr, dr)) in xt
                    .data()
                    .chunks(cols)
                    .zip(yd.chunks(cols))
                    .zip(gd.chunks(cols).zip(dx.chunks_mut(cols)))
                {
                    let norm = super::tensor::l2_norm(xr);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for t in 0..cols {
                        dr[t] = (gr[t] - yr[t] * dot) / norm;
                    }
                }
                acc(x, Tensor::new(xt.shape().to_vec(), dx).unwrap());
            }
            &Op::ConcatRows { a, b } => {
                let split = self.value(a).len();
                acc(a, Tensor::new(self.shape(a).to_vec(), gd[..split].to_vec()).unwrap());
                acc(b, Tensor::new(self.shape(b).to_vec(), gd[split..].to_vec()).unwrap());
            }
            Op::GatherRows { x, rows } => {
                let x = *x;
                let (_, d) = self.value(x).dims2("gather_rows").unwrap();
                let mut dx = Tensor::zeros(self.shape(x));
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut dx.data_mut()[r * d..(r + 1) * d];
                    for (o, gv) in dst.iter_mut().zip(&gd[k * d..(k + 1) * d]) {
                        *o += gv;
                    }
                }
                acc(x, dx);
            }
            Op::OffDiagonalCrossEntropy { sim, positives } => {
                let sim = *sim;
                let s = self.value(sim);
                let r = positives.len();
                let scale = gd[0] / r as f64;
                let mut ds = vec![0.0; r * r];
                for (i, &p) in positives.iter().enumerate() {
                    let row = s.row(i);
                    let lse = off_diagonal_logsumexp(row, i);
                    for k in 0..r {
                        if k != i {
                            ds[i * r + k] = scale * (row[k] - lse).exp();
                        }
                    }
                    ds[i * r + p] -= scale;
                }
                acc(sim, Tensor::new(vec![r, r], ds).unwrap());
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let logits = *logits;
                let t = self.value(logits);
                let (n, c) = t.dims2("softmax_cross_entropy").unwrap();
                let scale = gd[0] / n as f64;
                let mut dl = vec![0.0; n * c];
                for (i, &l) in labels.iter().enumerate() {
                    let row = t.row(i);
                    let lse = logsumexp(row);
                    for k in 0..c {
                        dl[i * c + k] = scale * (row[k] - lse).exp();
                    }
                    dl[i * c + l] -= scale;
                }
                acc(logits, Tensor::new(vec![n, c], dl).unwrap());
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn off_diagonal_logsumexp(row: &[f64], skip: usize) -> f64 {
    let max = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != skip)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = row
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != skip)
        .map(|(_, v)| (v - max).exp())
        .sum();
    max + total.ln()
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
