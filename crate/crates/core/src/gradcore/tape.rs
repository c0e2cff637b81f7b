//! Define-by-run reverse-mode tape over dense tensors.
//!
//! Operations append nodes to a Wengert list during the forward pass; the
//! node insertion order is a topological order of the graph, so the backward
//! sweep walks the list once in reverse, accumulating vector-Jacobian
//! products into the gradients of every leaf that requires them.
//!
//! A tape is single-threaded; distinct tapes on distinct samples may run
//! concurrently. Matrix products go through `matrixmultiply`.

use crate::error::{Error, Result};
use crate::gradcore::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// y = W·x + b, x rank 1 `[in]` or rank 2 `[in, p]` (bias broadcast over p)
    Dense { w: NodeId, x: NodeId, b: NodeId },
    /// same-padded stride-1 cross-correlation, x `[ci,h,w]`, k `[co,ci,k,k]`
    Conv2d { x: NodeId, k: NodeId },
    /// y[c,·,·] = x[c,·,·] + b[c]
    ChannelBias { x: NodeId, b: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    /// 2x2 mean pooling, halves spatial extents
    AvgPool2 { x: NodeId },
    /// 2x nearest-neighbour upsampling
    Upsample2 { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    /// sum of squared entries (squared L2 norm), scalar output
    SqSum { x: NodeId },
    /// per-instance normalization across features with learned scale/shift
    FeatureNorm { x: NodeId, gain: NodeId, shift: NodeId },
    /// channel Gram matrix of `[c,h,w]`, normalized by c·h·w
    Gram { x: NodeId },
    Reshape { x: NodeId },
}

const NORM_EPS: f64 = 1e-5;

pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    /// leaf-level requires_grad flags
    requires: Vec<bool>,
    /// true when a node lies on a path from a requires_grad leaf
    needs: Vec<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            vals: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            needs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.vals[id.0]
    }

    /// Gradient of the last `backward` root with respect to `id`, if any
    /// was accumulated (leaves only; interior gradients are dropped).
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let needs = match op {
            Op::Leaf => requires_grad,
            _ => self.op_inputs(&op).iter().any(|p| self.needs[p.0]),
        };
        self.ops.push(op);
        self.vals.push(value);
        self.grads.push(None);
        self.requires.push(requires_grad);
        self.needs.push(needs);
        NodeId(self.ops.len() - 1)
    }

    fn op_inputs(&self, op: &Op) -> Vec<NodeId> {
        match *op {
            Op::Leaf => vec![],
            Op::Dense { w, x, b } => vec![w, x, b],
            Op::Conv2d { x, k } => vec![x, k],
            Op::ChannelBias { x, b } => vec![x, b],
            Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::AvgPool2 { x }
            | Op::Upsample2 { x }
            | Op::Scale { x, .. }
            | Op::SqSum { x }
            | Op::Gram { x }
            | Op::Reshape { x } => vec![x],
            Op::Add { a, b } | Op::Sub { a, b } => vec![a, b],
            Op::FeatureNorm { x, gain, shift } => vec![x, gain, shift],
        }
    }

    fn emit(&mut self, op: Op, data: Vec<f64>, shape: Vec<usize>, name: &'static str) -> Result<NodeId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Ok(self.push(op, Tensor::prechecked(shape, data), false))
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn dense(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (ws, xs, bs) = (
            self.vals[w.0].shape().to_vec(),
            self.vals[x.0].shape().to_vec(),
            self.vals[b.0].shape().to_vec(),
        );
        if ws.len() != 2 || bs.len() != 1 || ws[0] != bs[0] {
            return Err(Error::shape("dense", format!("W {ws:?} vs b {bs:?}")));
        }
        let (rows, cols) = (ws[0], ws[1]);
        let p = match xs.as_slice() {
            [n] if *n == cols => 1,
            [n, p] if *n == cols => *p,
            _ => {
                return Err(Error::shape(
                    "dense",
                    format!("x {xs:?} does not conform to W {ws:?}"),
                ))
            }
        };
        let mut out = vec![0.0; rows * p];
        dgemm(
            rows,
            cols,
            p,
            self.vals[w.0].data(),
            false,
            self.vals[x.0].data(),
            false,
            0.0,
            &mut out,
        );
        let bias = self.vals[b.0].data();
        for r in 0..rows {
            let row = &mut out[r * p..(r + 1) * p];
            let bv = bias[r];
            for v in row {
                *v += bv;
            }
        }
        let shape = if xs.len() == 1 { vec![rows] } else { vec![rows, p] };
        self.emit(Op::Dense { w, x, b }, out, shape, "dense")
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId) -> Result<NodeId> {
        let xs = self.vals[x.0].shape().to_vec();
        let ks = self.vals[k.0].shape().to_vec();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("x {xs:?} (want rank 3), k {ks:?} (want rank 4)"),
            ));
        }
        let (ci, h, w) = (xs[0], xs[1], xs[2]);
        let (co, kci, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kci != ci {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {ci} vs kernel channels {kci}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} must be square and odd")));
        }
        let cols = im2col(self.vals[x.0].data(), ci, h, w, kh);
        let mut out = vec![0.0; co * h * w];
        dgemm(
            co,
            ci * kh * kh,
            h * w,
            self.vals[k.0].data(),
            false,
            &cols,
            false,
            0.0,
            &mut out,
        );
        self.emit(Op::Conv2d { x, k }, out, vec![co, h, w], "conv2d")
    }

    pub fn channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.vals[x.0].shape().to_vec();
        let bs = self.vals[b.0].shape().to_vec();
        if xs.len() != 3 || bs.len() != 1 || bs[0] != xs[0] {
            return Err(Error::shape(
                "channel_bias",
                format!("x {xs:?} vs b {bs:?}"),
            ));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let mut out = self.vals[x.0].data().to_vec();
        let bias = self.vals[b.0].data();
        for cc in 0..c {
            let bv = bias[cc];
            for v in &mut out[cc * h * w..(cc + 1) * h * w] {
                *v += bv;
            }
        }
        self.emit(Op::ChannelBias { x, b }, out, xs, "channel_bias")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.vals[x.0].shape().to_vec();
        let out: Vec<f64> = self.vals[x.0].data().iter().map(|&v| v.max(0.0)).collect();
        self.emit(Op::Relu { x }, out, shape, "relu")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.vals[x.0].shape().to_vec();
        let out: Vec<f64> = self
            .vals[x.0]
            .data()
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        self.emit(Op::Sigmoid { x }, out, shape, "sigmoid")
    }

    pub fn avgpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.vals[x.0].shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("avgpool2", format!("x {xs:?} (want rank 3)")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "avgpool2",
                format!("odd spatial extents {h}x{w}"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.vals[x.0].data();
        let mut out = vec![0.0; c * oh * ow];
        for cc in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let base = cc * h * w + 2 * i * w + 2 * j;
                    out[cc * oh * ow + i * ow + j] =
                        0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
                }
            }
        }
        self.emit(Op::AvgPool2 { x }, out, vec![c, oh, ow], "avgpool2")
    }

    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.vals[x.0].shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("upsample2", format!("x {xs:?} (want rank 3)")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.vals[x.0].data();
        let mut out = vec![0.0; c * oh * ow];
        for cc in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    out[cc * oh * ow + i * ow + j] = src[cc * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        self.emit(Op::Upsample2 { x }, out, vec![c, oh, ow], "upsample2")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("sub", a, b, |x, y| x - y)
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        if self.vals[a.0].shape() != self.vals[b.0].shape() {
            return Err(Error::shape(
                name,
                format!(
                    "{:?} vs {:?}",
                    self.vals[a.0].shape(),
                    self.vals[b.0].shape()
                ),
            ));
        }
        let shape = self.vals[a.0].shape().to_vec();
        let out: Vec<f64> = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let op = if name == "add" { Op::Add { a, b } } else { Op::Sub { a, b } };
        self.emit(op, out, shape, name)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let shape = self.vals[x.0].shape().to_vec();
        let out: Vec<f64> = self.vals[x.0].data().iter().map(|&v| c * v).collect();
        self.emit(Op::Scale { x, c }, out, shape, "scale")
    }

    pub fn sq_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.vals[x.0].data().iter().map(|&v| v * v).sum();
        self.emit(Op::SqSum { x }, vec![s], vec![1], "sq_sum")
    }

    /// Normalizes each instance (column) across its features (rows), then
    /// applies a per-feature affine pair. Rank-1 input is a single instance.
    pub fn feature_norm(&mut self, x: NodeId, gain: NodeId, shift: NodeId) -> Result<NodeId> {
        let xs = self.vals[x.0].shape().to_vec();
        let (f, p) = match xs.as_slice() {
            [f] => (*f, 1),
            [f, p] => (*f, *p),
            _ => return Err(Error::shape("feature_norm", format!("x {xs:?}"))),
        };
        let gs = self.vals[gain.0].shape().to_vec();
        let ss = self.vals[shift.0].shape().to_vec();
        if gs != [f] || ss != [f] {
            return Err(Error::shape(
                "feature_norm",
                format!("affine {gs:?}/{ss:?} vs {f} features"),
            ));
        }
        let src = self.vals[x.0].data();
        let g = self.vals[gain.0].data();
        let b = self.vals[shift.0].data();
        let (mean, inv_sd) = instance_stats(src, f, p);
        let mut out = vec![0.0; f * p];
        for i in 0..f {
            let (gi, bi) = (g[i], b[i]);
            let row = &src[i * p..(i + 1) * p];
            let dst = &mut out[i * p..(i + 1) * p];
            for j in 0..p {
                dst[j] = gi * (row[j] - mean[j]) * inv_sd[j] + bi;
            }
        }
        self.emit(Op::FeatureNorm { x, gain, shift }, out, xs, "feature_norm")
    }

    /// g[i][j] = Σ_p F_i(p)·F_j(p) / (c·h·w)
    pub fn gram(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.vals[x.0].shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("gram", format!("x {xs:?} (want rank 3)")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let out = gram_matrix(self.vals[x.0].data(), c, h * w);
        self.emit(Op::Gram { x }, out, vec![c, c], "gram")
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.vals[x.0].numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.vals[x.0].shape()),
            ));
        }
        let out = self.vals[x.0].data().to_vec();
        self.emit(Op::Reshape { x }, out, shape.to_vec(), "reshape")
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. After it returns, every
    /// requires_grad leaf holds dRoot/dLeaf; non-trainable leaves are
    /// untouched. Gradients of interior nodes are freed as soon as they
    /// have been consumed.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.vals[root.0].numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.vals[root.0].shape()),
            ));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.needs[root.0] {
            return Ok(());
        }
        self.grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.needs[i] || matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            self.dispatch(i, &gy)?;
        }
        Ok(())
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], add: impl FnOnce(&mut [f64])) {
        let slot = grads[id.0].get_or_insert_with(|| Tensor::zeros(shape));
        add(slot.data_mut());
    }

    fn dispatch(&mut self, i: usize, gy: &Tensor) -> Result<()> {
        let op = self.ops[i].clone();
        match op {
            Op::Leaf => {}
            Op::Dense { w, x, b } => {
                let ws = self.vals[w.0].shape().to_vec();
                let (rows, cols) = (ws[0], ws[1]);
                let xs = self.vals[x.0].shape().to_vec();
                let p = if xs.len() == 1 { 1 } else { xs[1] };
                if self.needs[w.0] {
                    let xv = self.vals[x.0].data();
                    let gyd = gy.data();
                    Self::accumulate(&mut self.grads, w, &ws, |gw| {
                        // dW += dY · Xᵀ
                        dgemm(rows, p, cols, gyd, false, xv, true, 1.0, gw);
                    });
                }
                if self.needs[b.0] {
                    let gyd = gy.data();
                    Self::accumulate(&mut self.grads, b, &[rows], |gb| {
                        for r in 0..rows {
                            let mut s = 0.0;
                            for j in 0..p {
                                s += gyd[r * p + j];
                            }
                            gb[r] += s;
                        }
                    });
                }
                if self.needs[x.0] {
                    let wv = self.vals[w.0].data();
                    let gyd = gy.data();
                    Self::accumulate(&mut self.grads, x, &xs, |gx| {
                        // dX += Wᵀ · dY
                        dgemm(cols, rows, p, wv, true, gyd, false, 1.0, gx);
                    });
                }
            }
            Op::Conv2d { x, k } => {
                let xs = self.vals[x.0].shape().to_vec();
                let ks = self.vals[k.0].shape().to_vec();
                let (ci, h, w) = (xs[0], xs[1], xs[2]);
                let (co, kk) = (ks[0], ks[2]);
                let patch = ci * kk * kk;
                // columns are recomputed rather than cached on the node
                let cols = im2col(self.vals[x.0].data(), ci, h, w, kk);
                if self.needs[k.0] {
                    let gyd = gy.data();
                    Self::accumulate(&mut self.grads, k, &ks, |gk| {
                        dgemm(co, h * w, patch, gyd, false, &cols, true, 1.0, gk);
                    });
                }
                if self.needs[x.0] {
                    let mut gcols = vec![0.0; patch * h * w];
                    dgemm(
                        patch,
                        co,
                        h * w,
                        self.vals[k.0].data(),
                        true,
                        gy.data(),
                        false,
                        0.0,
                        &mut gcols,
                    );
                    Self::accumulate(&mut self.grads, x, &xs, |gx| {
                        col2im(&gcols, ci, h, w, kk, gx);
                    });
                }
            }
            Op::ChannelBias { x, b } => {
                let xs = self.vals[x.0].shape().to_vec();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                if self.needs[x.0] {
                    let gyd = gy.data();
                    Self::accumulate(&mut self.grads, x, &xs, |gx| {
                        for (g, &d) in gx.iter_mut().zip(gyd) {
                            *g += d;
                        }
                    });
                }
                if self.needs[b.0] {
                    let gyd = gy.data();
                    Self::accumulate(&mut self.grads, b, &[c], |gb| {
                        for cc in 0..c {
                            gb[cc] += gyd[cc * h * w..(cc + 1) * h * w].iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Relu { x } => {
                if self.needs[x.0] {
                    let xs = self.vals[x.0].shape().to_vec();
                    let xv = self.vals[x.0].data();
                    let gyd = gy.data();
                    Self::accumulate(&mut self.grads, x, &xs, |gx| {
                        for i in 0..gx.len() {
                            if xv[i] > 0.0 {
                                gx[i] += gyd[i];
                            }
                        }
                    });
                }
            }
            Op::Sigmoid { x } => {
                if self.needs[x.0] {
                    let xs = self.vals[x.0].shape().to_vec();
                    let yv = self.vals[i].data();
                    let gyd = gy.data();
                    Self::accumulate(&mut self.grads, x, &xs, |gx| {
                        for idx in 0..gx.len() {
                            let s = yv[idx];
                            gx[idx] += gyd[idx] * s * (1.0 - s);
                        }
                    });
                }
            }
            Op::AvgPool2 { x } => {
                if self.needs[x.0] {
                    let xs = self.vals[x.0].shape().to_vec();
                    let (c, h, w) = (xs[0], xs[1], xs[2]);
                    let (oh, ow) = (h / 2, w / 2);
                    let gyd = gy.data();
                    Self::accumulate(&mut self.grads, x, &xs, |gx| {
                        for cc in 0..c {
                            for ii in 0..oh {
                                for jj in 0..ow {
                                    let d = 0.25 * gyd[cc * oh * ow + ii * ow + jj];
                                    let base = cc * h * w + 2 * ii * w + 2 * jj;
                                    gx[base] += d;
                                    gx[base + 1] += d;
                                    gx[base + w] += d;
                                    gx[base + w + 1] += d;
                                }
                            }
                        }
                    });
                }
            }
            Op::Upsample2 { x } => {
                if self.needs[x.0] {
                    let xs = self.vals[x.0].shape().to_vec();
                    let (c, h, w) = (xs[0], xs[1], xs[2]);
                    let (oh, ow) = (2 * h, 2 * w);
                    let gyd = gy.data();
                    Self::accumulate(&mut self.grads, x, &xs, |gx| {
                        for cc in 0..c {
                            for ii in 0..oh {
                                for jj in 0..ow {
                                    gx[cc * h * w + (ii / 2) * w + jj / 2] +=
                                        gyd[cc * oh * ow + ii * ow + jj];
                                }
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for side in [a, b] {
                    if self.needs[side.0] {
                        let shape = self.vals[side.0].shape().to_vec();
                        let gyd = gy.data();
                        Self::accumulate(&mut self.grads, side, &shape, |g| {
                            for (gv, &d) in g.iter_mut().zip(gyd) {
                                *gv += d;
                            }
                        });
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.needs[a.0] {
                    let shape = self.vals[a.0].shape().to_vec();
                    let gyd = gy.data();
                    Self::accumulate(&mut self.grads, a, &shape, |g| {
                        for (gv, &d) in g.iter_mut().zip(gyd) {
                            *gv += d;
                        }
                    });
                }
                if self.needs[b.0] {
                    let shape = self.vals[b.0].shape().to_vec();
                    let gyd = gy.data();
                    Self::accumulate(&mut self.grads, b, &shape, |g| {
                        for (gv, &d) in g.iter_mut().zip(gyd) {
                            *gv -= d;
                        }
                    });
                }
            }
            Op::Scale { x, c } => {
                if self.needs[x.0] {
                    let shape = self.vals[x.0].shape().to_vec();
                    let gyd = gy.data();
                    Self::accumulate(&mut self.grads, x, &shape, |g| {
                        for (gv, &d) in g.iter_mut().zip(gyd) {
                            *gv += c * d;
                        }
                    });
                }
            }
            Op::SqSum { x } => {
                if self.needs[x.0] {
                    let shape = self.vals[x.0].shape().to_vec();
                    let xv = self.vals[x.0].data();
                    let d = gy.data()[0];
                    Self::accumulate(&mut self.grads, x, &shape, |g| {
                        for (gv, &v) in g.iter_mut().zip(xv) {
                            *gv += 2.0 * v * d;
                        }
                    });
                }
            }
            Op::FeatureNorm { x, gain, shift } => {
                self.backward_feature_norm(x, gain, shift, gy);
            }
            Op::Gram { x } => {
                if self.needs[x.0] {
                    let xs = self.vals[x.0].shape().to_vec();
                    let (c, h, w) = (xs[0], xs[1], xs[2]);
                    let hw = h * w;
                    let n = (c * hw) as f64;
                    let gyd = gy.data();
                    // dF = (dG + dGᵀ)·F / n
                    let mut sym = vec![0.0; c * c];
                    for a in 0..c {
                        for bcol in 0..c {
                            sym[a * c + bcol] = gyd[a * c + bcol] + gyd[bcol * c + a];
                        }
                    }
                    let fv = self.vals[x.0].data();
                    let mut df = vec![0.0; c * hw];
                    dgemm(c, c, hw, &sym, false, fv, false, 0.0, &mut df);
                    Self::accumulate(&mut self.grads, x, &xs, |gx| {
                        for (gv, &d) in gx.iter_mut().zip(&df) {
                            *gv += d / n;
                        }
                    });
                }
            }
            Op::Reshape { x } => {
                if self.needs[x.0] {
                    let shape = self.vals[x.0].shape().to_vec();
                    let gyd = gy.data();
                    Self::accumulate(&mut self.grads, x, &shape, |g| {
                        for (gv, &d) in g.iter_mut().zip(gyd) {
                            *gv += d;
                        }
                    });
                }
            }
        }
        Ok(())
    }

    fn backward_feature_norm(&mut self, x: NodeId, gain: NodeId, shift: NodeId, gy: &Tensor) {
        let xs = self.vals[x.0].shape().to_vec();
        let (f, p) = match xs.as_slice() {
            [f] => (*f, 1),
            [f, p] => (*f, *p),
            _ => unreachable!("validated at emit"),
        };
        let src = self.vals[x.0].data();
        let g = self.vals[gain.0].data();
        let gyd = gy.data();
        // statistics recomputed from the saved input, all row-major sweeps
        let (mean, inv_sd) = instance_stats(src, f, p);
        let mut xhat = vec![0.0; f * p];
        for i in 0..f {
            let row = &src[i * p..(i + 1) * p];
            let dst = &mut xhat[i * p..(i + 1) * p];
            for j in 0..p {
                dst[j] = (row[j] - mean[j]) * inv_sd[j];
            }
        }
        if self.needs[gain.0] {
            Self::accumulate(&mut self.grads, gain, &[f], |gg| {
                for i in 0..f {
                    let mut s = 0.0;
                    for j in 0..p {
                        s += gyd[i * p + j] * xhat[i * p + j];
                    }
                    gg[i] += s;
                }
            });
        }
        if self.needs[shift.0] {
            Self::accumulate(&mut self.grads, shift, &[f], |gb| {
                for i in 0..f {
                    gb[i] += gyd[i * p..(i + 1) * p].iter().sum::<f64>();
                }
            });
        }
        if self.needs[x.0] {
            let mut m1 = vec![0.0; p];
            let mut m2 = vec![0.0; p];
            for i in 0..f {
                let gi = g[i];
                let gyr = &gyd[i * p..(i + 1) * p];
                let xhr = &xhat[i * p..(i + 1) * p];
                for j in 0..p {
                    let dxh = gyr[j] * gi;
                    m1[j] += dxh;
                    m2[j] += dxh * xhr[j];
                }
            }
            let inv_f = 1.0 / f as f64;
            for j in 0..p {
                m1[j] *= inv_f;
                m2[j] *= inv_f;
            }
            Self::accumulate(&mut self.grads, x, &xs, |gx| {
                for i in 0..f {
                    let gi = g[i];
                    let gyr = &gyd[i * p..(i + 1) * p];
                    let xhr = &xhat[i * p..(i + 1) * p];
                    let dst = &mut gx[i * p..(i + 1) * p];
                    for j in 0..p {
                        let dxh = gyr[j] * gi;
                        dst[j] += (dxh - m1[j] - xhr[j] * m2[j]) * inv_sd[j];
                    }
                }
            });
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-instance (column) mean and reciprocal standard deviation of an
/// `[f, p]` block, computed with row-major sweeps.
fn instance_stats(src: &[f64], f: usize, p: usize) -> (Vec<f64>, Vec<f64>) {
    let inv_f = 1.0 / f as f64;
    let mut mean = vec![0.0; p];
    for i in 0..f {
        let row = &src[i * p..(i + 1) * p];
        for j in 0..p {
            mean[j] += row[j];
        }
    }
    for m in &mut mean {
        *m *= inv_f;
    }
    let mut var = vec![0.0; p];
    for i in 0..f {
        let row = &src[i * p..(i + 1) * p];
        for j in 0..p {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    let inv_sd: Vec<f64> = var
        .iter()
        .map(|&v| 1.0 / (v * inv_f + NORM_EPS).sqrt())
        .collect();
    (mean, inv_sd)
}

/// Standalone Gram computation shared with the non-tape evaluation path.
pub fn gram_matrix(data: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * c];
    dgemm(c, hw, c, data, false, data, true, 0.0, &mut out);
    let n = (c * hw) as f64;
    for v in &mut out {
        *v /= n;
    }
    out
}

/// `c = a·b + beta·c` over row-major buffers; a transposed flag means the
/// buffer holds the matrix with swapped dims.
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(src: &[f64], ci: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let mut cols = vec![0.0; ci * k * k * h * w];
    for cc in 0..ci {
        for di in 0..k {
            for dj in 0..k {
                let row = ((cc * k + di) * k + dj) * h * w;
                for y in 0..h {
                    let sy = (y + di) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = cc * h * w + sy as usize * w;
                    let dst_row = row + y * w;
                    for x in 0..w {
                        let sx = (x + dj) as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            cols[dst_row + x] = src[src_row + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(gcols: &[f64], ci: usize, h: usize, w: usize, k: usize, gx: &mut [f64]) {
    let pad = k / 2;
    for cc in 0..ci {
        for di in 0..k {
            for dj in 0..k {
                let row = ((cc * k + di) * k + dj) * h * w;
                for y in 0..h {
                    let sy = (y + di) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = cc * h * w + sy as usize * w;
                    let src_row = row + y * w;
                    for x in 0..w {
                        let sx = (x + dj) as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            gx[dst_row + sx as usize] += gcols[src_row + x];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dense_identity() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), true);
        let x = tape.constant(t(&[2], &[3.0, 5.0]));
        let b = tape.leaf(t(&[2], &[0.0, 0.0]), true);
        let y = tape.dense(w, x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0]);
    }

    #[test]
    fn dense_scalar_chain_rule() {
        // W=[[2]], b=[1], x=[3] -> 7; d/dx=2, d/dW=3, d/db=1
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[1, 1], &[2.0]), true);
        let x = tape.leaf(t(&[1], &[3.0]), true);
        let b = tape.leaf(t(&[1], &[1.0]), true);
        let y = tape.dense(w, x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0]);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0]);
        assert_eq!(tape.grad(w).unwrap().data(), &[3.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0]);
    }

    #[test]
    fn dense_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2, 3], &[0.0; 6]), true);
        let x = tape.constant(t(&[2], &[0.0; 2]));
        let b = tape.leaf(t(&[2], &[0.0; 2]), true);
        assert!(tape.dense(w, x, b).is_err());
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, k).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn conv_box_sum_interior() {
        // 3x3 all-ones kernel over a constant-1 image: interior pixel sums 9
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 5, 5], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, k).unwrap();
        let v = tape.value(y);
        assert_eq!(v.data()[2 * 5 + 2], 9.0);
        // corner sees only a 2x2 neighbourhood
        assert_eq!(v.data()[0], 4.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(tape.conv2d(x, k).is_err());
    }

    #[test]
    fn relu_forward_and_mask() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sq_sum(y).unwrap();
        tape.backward(s).unwrap();
        // gradient mask zeroes the non-positive entries
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 4.0]);
    }

    #[test]
    fn sq_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[3.0, 4.0]), true);
        let y = tape.sq_sum(x).unwrap();
        assert_eq!(tape.value(y).item(), Some(25.0));
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0, 8.0]);
    }

    #[test]
    fn avgpool_mean_of_four() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 3.0, 5.0, 7.0]));
        let y = tape.avgpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn avgpool_rejects_odd_extents() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4]));
        assert!(tape.avgpool2(x).is_err());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.scale(x, 2.0).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn constant_root_leaves_gradients_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = tape.constant(t(&[2], &[5.0, 5.0]));
        let s = tape.sq_sum(c).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn square_of_scalar() {
        // L = x^2 at x=3 -> dL/dx = 6
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[3.0]), true);
        let y = tape.sq_sum(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn shared_leaf_accumulates() {
        // y = x + x => dy/dx = 2
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[4.0]), true);
        let y = tape.add(x, x).unwrap();
        let s = tape.sq_sum(y).unwrap();
        tape.backward(s).unwrap();
        // d(2x)^2/dx = 8x = 32
        assert_eq!(tape.grad(x).unwrap().data(), &[32.0]);
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let up = tape.upsample2(x).unwrap();
        let down = tape.avgpool2(up).unwrap();
        assert_eq!(tape.value(down).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn gram_zero_map_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 2, 2]));
        let g = tape.gram(x).unwrap();
        assert!(tape.value(g).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gram_constant_single_channel() {
        // 1 channel, 2x2 of ones: g = 4 / (1*4) = 1
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 2], 1.0));
        let g = tape.gram(x).unwrap();
        assert_eq!(tape.value(g).data(), &[1.0]);
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[1e308]), true);
        assert!(matches!(
            tape.sq_sum(x),
            Err(Error::NonFinite { op: "sq_sum" })
        ));
    }

    #[test]
    fn feature_norm_affine_identity_stats() {
        // gain 1 / shift 0 normalizes each column to zero mean, unit-ish var
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let s = tape.constant(Tensor::zeros(&[4]));
        let y = tape.feature_norm(x, g, s).unwrap();
        let v = tape.value(y).data();
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }
}
