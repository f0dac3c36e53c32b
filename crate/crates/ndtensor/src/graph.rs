//! Tape-based reverse-mode autodiff over the fixed operator set the codec
//! needs. Ops evaluate eagerly; `backward` walks the tape in reverse
//! creation order. One `Graph` is single-threaded; distinct graphs are
//! independent and may run on distinct threads.

use crate::conv::{
    conv2d_backward, conv2d_forward, deconv2d_backward, deconv2d_forward, pad2d_backward,
    pad2d_forward, ConvSpec, DeconvSpec, PadSpec,
};
use crate::density::{factorized_bin_backward, factorized_bin_forward, ChainRefs};
use crate::error::TensorError;
use crate::gdn::{gdn_backward, gdn_forward, GdnParams};
use crate::scalar;
use crate::tensor::{dims4, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

const LN2: f64 = std::f64::consts::LN_2;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, spec: ConvSpec },
    Deconv2d { x: NodeId, w: NodeId, b: Option<NodeId>, spec: DeconvSpec },
    Pad2d { x: NodeId, pad: PadSpec },
    Gelu { x: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Softplus { x: NodeId },
    Square { x: NodeId },
    Scale { x: NodeId, c: f64 },
    AddScalar { x: NodeId },
    ClampMin { x: NodeId, min: f64 },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    MeanAll { x: NodeId },
    SumAll { x: NodeId },
    NegLog2 { x: NodeId },
    Concat { xs: Vec<NodeId>, axis: usize },
    SliceAxis { x: NodeId, axis: usize, start: usize, len: usize },
    UpsampleNearest { x: NodeId, fh: usize, fw: usize },
    GlobalAvgPool { x: NodeId },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    ScaleChannels { x: NodeId, s: NodeId },
    Gdn { x: NodeId, beta_r: NodeId, gamma_r: NodeId, inverse: bool },
    GaussianBin { x: NodeId, mu: NodeId, sigma: NodeId },
    FactorizedBin { x: NodeId, params: [NodeId; 10] },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Graph {
        Graph {
            nodes: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced by {op:?}"
        );
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input; gradients do not flow into it.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, false, Op::Leaf)
    }

    /// Trainable leaf; `grad` is populated by `backward`.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(t, true, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- elementwise ----

    fn unary(
        &mut self,
        x: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> NodeId {
        let v = self.nodes[x.0].value.map(f);
        let rg = self.rg(x);
        self.push(v, rg, op)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, scalar::gelu, Op::Gelu { x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, scalar::sigmoid, Op::Sigmoid { x })
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(x, scalar::softplus, Op::Softplus { x })
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v * v, Op::Square { x })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |v| v * c, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |v| v + c, Op::AddScalar { x })
    }

    pub fn clamp_min(&mut self, x: NodeId, min: f64) -> NodeId {
        self.unary(x, |v| v.max(min), Op::ClampMin { x, min })
    }

    /// y_i = -log2(x_i); errors if any x_i <= 0.
    pub fn neg_log2(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        if self.nodes[x.0].value.data().iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Numeric {
                what: "neg_log2 requires strictly positive input".to_string(),
            });
        }
        Ok(self.unary(x, |v| -v.ln() / LN2, Op::NegLog2 { x }))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !va.same_shape(vb) {
            return Err(TensorError::BadShape {
                what: format!("elementwise op on {:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let v = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, rg, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    // ---- reductions ----

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.data();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), rg, Op::MeanAll { x })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].value.data().iter().sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::SumAll { x })
    }

    // ---- structural ----

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::BadShape {
                what: "concat of zero tensors".to_string(),
            });
        }
        let first = self.nodes[xs[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::BadShape {
                what: format!("concat axis {axis} out of range for rank {}", first.len()),
            });
        }
        let mut axis_total = 0;
        for &x in xs {
            let s = self.nodes[x.0].value.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(ax, (a, b))| ax != axis && a != b)
            {
                return Err(TensorError::BadShape {
                    what: format!("concat of incompatible shapes {s:?} vs {first:?}"),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Tensor::zeros(&out_shape);
        let row = axis_total * inner;
        let mut offset = 0;
        for &x in xs {
            let v = &self.nodes[x.0].value;
            let ext = v.shape()[axis];
            for o in 0..outer {
                let src = &v.data()[o * ext * inner..(o + 1) * ext * inner];
                let dst_off = o * row + offset * inner;
                out.data_mut()[dst_off..dst_off + ext * inner].copy_from_slice(src);
            }
            offset += ext;
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(
            out,
            rg,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice_axis(
        &mut self,
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(TensorError::BadShape {
                what: format!("slice [{start}, {start}+{len}) on axis {axis} of {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = Tensor::zeros(&out_shape);
        let v = &self.nodes[x.0].value;
        for o in 0..outer {
            let src = o * shape[axis] * inner + start * inner;
            let dst = o * len * inner;
            out.data_mut()[dst..dst + len * inner]
                .copy_from_slice(&v.data()[src..src + len * inner]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            rg,
            Op::SliceAxis {
                x,
                axis,
                start,
                len,
            },
        ))
    }

    pub fn upsample_nearest(
        &mut self,
        x: NodeId,
        (fh, fw): (usize, usize),
    ) -> Result<NodeId, TensorError> {
        if fh == 0 || fw == 0 {
            return Err(TensorError::BadParameter {
                what: "upsample factor must be >= 1".to_string(),
            });
        }
        let (n, c, h, w) = dims4(&self.nodes[x.0].value)?;
        let mut out = Tensor::zeros(&[n, c, h * fh, w * fw]);
        {
            let v = self.nodes[x.0].value.data();
            let o = out.data_mut();
            let ow = w * fw;
            for nc in 0..n * c {
                for i in 0..h {
                    for j in 0..w {
                        let s = v[nc * h * w + i * w + j];
                        for di in 0..fh {
                            let base = nc * h * fh * ow + (i * fh + di) * ow + j * fw;
                            for dj in 0..fw {
                                o[base + dj] = s;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::UpsampleNearest { x, fh, fw }))
    }

    pub fn pad2d(&mut self, x: NodeId, pad: PadSpec) -> Result<NodeId, TensorError> {
        let v = pad2d_forward(&self.nodes[x.0].value, &pad)?;
        let rg = self.rg(x);
        Ok(self.push(v, rg, Op::Pad2d { x, pad }))
    }

    // ---- linear algebra / conv ----

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: &ConvSpec,
    ) -> Result<NodeId, TensorError> {
        let v = conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            b.map(|b| &self.nodes[b.0].value),
            spec,
        )?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(v, rg, Op::Conv2d { x, w, b, spec: *spec }))
    }

    pub fn deconv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: &DeconvSpec,
    ) -> Result<NodeId, TensorError> {
        let v = deconv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            b.map(|b| &self.nodes[b.0].value),
            spec,
        )?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(v, rg, Op::Deconv2d { x, w, b, spec: *spec }))
    }

    /// x: [N,K], w: [M,K], b: [M] -> [N,M]
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (xs, ws, bs) = (
            self.nodes[x.0].value.shape().to_vec(),
            self.nodes[w.0].value.shape().to_vec(),
            self.nodes[b.0].value.shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(TensorError::BadShape {
                what: format!("linear shapes x{xs:?} w{ws:?} b{bs:?}"),
            });
        }
        let (n, k, m) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[n, m]);
        for (ni, row) in out.data_mut().chunks_mut(m).enumerate() {
            row.copy_from_slice(self.nodes[b.0].value.data());
            let _ = ni;
        }
        unsafe {
            matrixmultiply::dgemm(
                n,
                k,
                m,
                1.0,
                self.nodes[x.0].value.data().as_ptr(),
                k as isize,
                1,
                self.nodes[w.0].value.data().as_ptr(),
                1,
                k as isize,
                1.0,
                out.data_mut().as_mut_ptr(),
                m as isize,
                1,
            );
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, rg, Op::Linear { x, w, b }))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let (n, c, h, w) = dims4(&self.nodes[x.0].value)?;
        let hw = (h * w) as f64;
        let mut out = Tensor::zeros(&[n, c]);
        for nc in 0..n * c {
            out.data_mut()[nc] = self.nodes[x.0].value.data()[nc * h * w..(nc + 1) * h * w]
                .iter()
                .sum::<f64>()
                / hw;
        }
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::GlobalAvgPool { x }))
    }

    /// x: [N,C,H,W] scaled per-channel by s: [N,C].
    pub fn scale_channels(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, TensorError> {
        let (n, c, h, w) = dims4(&self.nodes[x.0].value)?;
        if self.nodes[s.0].value.shape() != [n, c] {
            return Err(TensorError::BadShape {
                what: format!(
                    "scale_channels s shape {:?}, expected [{n},{c}]",
                    self.nodes[s.0].value.shape()
                ),
            });
        }
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for nc in 0..n * c {
            let sv = self.nodes[s.0].value.data()[nc];
            let src = &self.nodes[x.0].value.data()[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out.data_mut()[nc * h * w..(nc + 1) * h * w];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v * sv;
            }
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, rg, Op::ScaleChannels { x, s }))
    }

    /// Squeeze-excitation channel attention: x scaled per channel by
    /// sigmoid(w2 . relu(w1 . globalavg(x) + b1) + b2).
    pub fn channel_attention(
        &mut self,
        x: NodeId,
        w1: NodeId,
        b1: NodeId,
        w2: NodeId,
        b2: NodeId,
    ) -> Result<NodeId, TensorError> {
        let pooled = self.global_avg_pool(x)?;
        let hidden = self.linear(pooled, w1, b1)?;
        let hidden = self.relu(hidden);
        let logits = self.linear(hidden, w2, b2)?;
        let gates = self.sigmoid(logits);
        self.scale_channels(x, gates)
    }

    pub fn gdn(
        &mut self,
        x: NodeId,
        beta_r: NodeId,
        gamma_r: NodeId,
        inverse: bool,
    ) -> Result<NodeId, TensorError> {
        let params = GdnParams {
            beta_r: self.nodes[beta_r.0].value.clone(),
            gamma_r: self.nodes[gamma_r.0].value.clone(),
        };
        let v = gdn_forward(&self.nodes[x.0].value, &params, inverse)?;
        let rg = self.rg(x) || self.rg(beta_r) || self.rg(gamma_r);
        Ok(self.push(
            v,
            rg,
            Op::Gdn {
                x,
                beta_r,
                gamma_r,
                inverse,
            },
        ))
    }

    /// Per-element unit-bin Gaussian likelihood
    /// p = Phi((x - mu + 1/2)/sigma) - Phi((x - mu - 1/2)/sigma).
    pub fn gaussian_bin(
        &mut self,
        x: NodeId,
        mu: NodeId,
        sigma: NodeId,
    ) -> Result<NodeId, TensorError> {
        let (vx, vm, vs) = (
            &self.nodes[x.0].value,
            &self.nodes[mu.0].value,
            &self.nodes[sigma.0].value,
        );
        if !vx.same_shape(vm) || !vx.same_shape(vs) {
            return Err(TensorError::BadShape {
                what: format!(
                    "gaussian_bin shapes {:?}/{:?}/{:?}",
                    vx.shape(),
                    vm.shape(),
                    vs.shape()
                ),
            });
        }
        if vs.data().iter().any(|&s| !(s > 0.0)) {
            return Err(TensorError::BadParameter {
                what: "gaussian_bin requires sigma > 0".to_string(),
            });
        }
        let mut out = Tensor::zeros(vx.shape());
        for i in 0..vx.numel() {
            let (xv, mv, sv) = (vx.data()[i], vm.data()[i], vs.data()[i]);
            out.data_mut()[i] =
                scalar::norm_interval((xv - mv - 0.5) / sv, (xv - mv + 0.5) / sv);
        }
        let rg = self.rg(x) || self.rg(mu) || self.rg(sigma);
        Ok(self.push(out, rg, Op::GaussianBin { x, mu, sigma }))
    }

    /// Per-element unit-bin likelihood under the per-channel monotone CDF
    /// chain; `params` in canonical order (see [`crate::density`]).
    pub fn factorized_bin(
        &mut self,
        x: NodeId,
        params: [NodeId; 10],
    ) -> Result<NodeId, TensorError> {
        let tensors: Vec<&Tensor> = params.iter().map(|p| &self.nodes[p.0].value).collect();
        let refs = ChainRefs::from_slice(&tensors);
        let v = factorized_bin_forward(&self.nodes[x.0].value, &refs)?;
        let rg = self.rg(x) || params.iter().any(|&p| self.rg(p));
        Ok(self.push(v, rg, Op::FactorizedBin { x, params }))
    }

    /// Total code length estimate in bits: sum(-log2 p), with p floored at
    /// 1e-12 for numeric stability of the training path.
    pub fn bits_estimate(&mut self, likelihoods: NodeId) -> Result<NodeId, TensorError> {
        let clamped = self.clamp_min(likelihoods, 1e-12);
        let nl = self.neg_log2(clamped)?;
        Ok(self.sum_all(nl))
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean_all(sq))
    }

    // ---- backward ----

    fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
        match slot {
            Some(g) => {
                debug_assert!(g.same_shape(&delta));
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            None => *slot = Some(delta),
        }
    }

    /// Reverse-mode sweep from a scalar root. Fills `grad` on every
    /// gradient-requiring node reachable from the root.
    pub fn backward(&mut self, root: NodeId) -> Result<(), TensorError> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(TensorError::BadState {
                what: format!(
                    "backward root must be scalar, got {:?}",
                    self.nodes[root.0].value.shape()
                ),
            });
        }
        if !self.nodes[root.0].requires_grad {
            return Err(TensorError::BadState {
                what: "backward root does not depend on any parameter".to_string(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.dispatch_backward(id, &g, &mut grads)?;
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn dispatch_backward(
        &self,
        id: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), TensorError> {
        let node = &self.nodes[id];
        // Local shorthand: only accumulate into inputs that need gradients.
        macro_rules! acc {
            ($nid:expr, $delta:expr) => {
                if self.nodes[$nid.0].requires_grad {
                    Self::accumulate(&mut grads[$nid.0], $delta);
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let (dx, dw, db) = conv2d_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    spec,
                    g,
                )?;
                acc!(x, dx);
                acc!(w, dw);
                if let Some(b) = b {
                    acc!(b, db);
                }
            }
            Op::Deconv2d { x, w, b, spec } => {
                let (dx, dw, db) = deconv2d_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    spec,
                    g,
                )?;
                acc!(x, dx);
                acc!(w, dw);
                if let Some(b) = b {
                    acc!(b, db);
                }
            }
            Op::Pad2d { x, pad } => {
                acc!(x, pad2d_backward(self.nodes[x.0].value.shape(), pad, g));
            }
            Op::Gelu { x } => {
                let xv = &self.nodes[x.0].value;
                let mut dx = Tensor::zeros(xv.shape());
                for i in 0..xv.numel() {
                    dx.data_mut()[i] = g.data()[i] * scalar::gelu_grad(xv.data()[i]);
                }
                acc!(x, dx);
            }
            Op::Relu { x } => {
                let xv = &self.nodes[x.0].value;
                let mut dx = Tensor::zeros(xv.shape());
                for i in 0..xv.numel() {
                    dx.data_mut()[i] = if xv.data()[i] > 0.0 { g.data()[i] } else { 0.0 };
                }
                acc!(x, dx);
            }
            Op::Sigmoid { x } => {
                let yv = &node.value;
                let mut dx = Tensor::zeros(yv.shape());
                for i in 0..yv.numel() {
                    let y = yv.data()[i];
                    dx.data_mut()[i] = g.data()[i] * y * (1.0 - y);
                }
                acc!(x, dx);
            }
            Op::Softplus { x } => {
                let xv = &self.nodes[x.0].value;
                let mut dx = Tensor::zeros(xv.shape());
                for i in 0..xv.numel() {
                    dx.data_mut()[i] = g.data()[i] * scalar::softplus_grad(xv.data()[i]);
                }
                acc!(x, dx);
            }
            Op::Square { x } => {
                let xv = &self.nodes[x.0].value;
                let mut dx = Tensor::zeros(xv.shape());
                for i in 0..xv.numel() {
                    dx.data_mut()[i] = 2.0 * xv.data()[i] * g.data()[i];
                }
                acc!(x, dx);
            }
            Op::Scale { x, c } => {
                acc!(x, g.map(|v| v * c));
            }
            Op::AddScalar { x } => {
                acc!(x, g.clone());
            }
            Op::ClampMin { x, min } => {
                let xv = &self.nodes[x.0].value;
                let mut dx = Tensor::zeros(xv.shape());
                for i in 0..xv.numel() {
                    dx.data_mut()[i] = if xv.data()[i] >= *min { g.data()[i] } else { 0.0 };
                }
                acc!(x, dx);
            }
            Op::Add { a, b } => {
                acc!(a, g.clone());
                acc!(b, g.clone());
            }
            Op::Sub { a, b } => {
                acc!(a, g.clone());
                acc!(b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.nodes[a.0].requires_grad {
                    let mut da = Tensor::zeros(va.shape());
                    for i in 0..va.numel() {
                        da.data_mut()[i] = g.data()[i] * vb.data()[i];
                    }
                    Self::accumulate(&mut grads[a.0], da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = Tensor::zeros(vb.shape());
                    for i in 0..vb.numel() {
                        db.data_mut()[i] = g.data()[i] * va.data()[i];
                    }
                    Self::accumulate(&mut grads[b.0], db);
                }
            }
            Op::MeanAll { x } => {
                let xv = &self.nodes[x.0].value;
                let gv = g.data()[0] / xv.numel() as f64;
                acc!(x, Tensor::full(xv.shape(), gv));
            }
            Op::SumAll { x } => {
                let xv = &self.nodes[x.0].value;
                acc!(x, Tensor::full(xv.shape(), g.data()[0]));
            }
            Op::NegLog2 { x } => {
                let xv = &self.nodes[x.0].value;
                let mut dx = Tensor::zeros(xv.shape());
                for i in 0..xv.numel() {
                    dx.data_mut()[i] = -g.data()[i] / (xv.data()[i] * LN2);
                }
                acc!(x, dx);
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &x in xs {
                    let xshape = self.nodes[x.0].value.shape();
                    let ext = xshape[*axis];
                    if self.nodes[x.0].requires_grad {
                        let mut dx = Tensor::zeros(xshape);
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * ext * inner;
                            dx.data_mut()[dst..dst + ext * inner]
                                .copy_from_slice(&g.data()[src..src + ext * inner]);
                        }
                        Self::accumulate(&mut grads[x.0], dx);
                    }
                    offset += ext;
                }
            }
            Op::SliceAxis {
                x,
                axis,
                start,
                len,
            } => {
                let xshape = self.nodes[x.0].value.shape();
                let outer: usize = xshape[..*axis].iter().product();
                let inner: usize = xshape[*axis + 1..].iter().product();
                let total = xshape[*axis];
                let mut dx = Tensor::zeros(xshape);
                for o in 0..outer {
                    let dst = o * total * inner + start * inner;
                    let src = o * len * inner;
                    dx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[src..src + len * inner]);
                }
                acc!(x, dx);
            }
            Op::UpsampleNearest { x, fh, fw } => {
                let (n, c, h, w) = dims4(&self.nodes[x.0].value)?;
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let ow = w * fw;
                for nc in 0..n * c {
                    for i in 0..h {
                        for j in 0..w {
                            let mut s = 0.0;
                            for di in 0..*fh {
                                let base = nc * h * fh * ow + (i * fh + di) * ow + j * fw;
                                for dj in 0..*fw {
                                    s += g.data()[base + dj];
                                }
                            }
                            dx.data_mut()[nc * h * w + i * w + j] = s;
                        }
                    }
                }
                acc!(x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let (n, c, h, w) = dims4(&self.nodes[x.0].value)?;
                let hw = (h * w) as f64;
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                for nc in 0..n * c {
                    let gv = g.data()[nc] / hw;
                    for v in &mut dx.data_mut()[nc * h * w..(nc + 1) * h * w] {
                        *v = gv;
                    }
                }
                acc!(x, dx);
            }
            Op::Linear { x, w, b } => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                let (n, k) = (xv.shape()[0], xv.shape()[1]);
                let m = wv.shape()[0];
                if self.nodes[x.0].requires_grad {
                    // dx[n,k] = g[n,m] * w[m,k]
                    let mut dx = Tensor::zeros(&[n, k]);
                    unsafe {
                        matrixmultiply::dgemm(
                            n, m, k, 1.0,
                            g.data().as_ptr(), m as isize, 1,
                            wv.data().as_ptr(), k as isize, 1,
                            0.0,
                            dx.data_mut().as_mut_ptr(), k as isize, 1,
                        );
                    }
                    Self::accumulate(&mut grads[x.0], dx);
                }
                if self.nodes[w.0].requires_grad {
                    // dw[m,k] = g^T[m,n] * x[n,k]
                    let mut dw = Tensor::zeros(&[m, k]);
                    unsafe {
                        matrixmultiply::dgemm(
                            m, n, k, 1.0,
                            g.data().as_ptr(), 1, m as isize,
                            xv.data().as_ptr(), k as isize, 1,
                            0.0,
                            dw.data_mut().as_mut_ptr(), k as isize, 1,
                        );
                    }
                    Self::accumulate(&mut grads[w.0], dw);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = Tensor::zeros(&[m]);
                    for row in g.data().chunks(m) {
                        for (d, &v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    Self::accumulate(&mut grads[b.0], db);
                }
            }
            Op::ScaleChannels { x, s } => {
                let xv = &self.nodes[x.0].value;
                let sv = &self.nodes[s.0].value;
                let (n, c, h, w) = dims4(xv)?;
                if self.nodes[x.0].requires_grad {
                    let mut dx = Tensor::zeros(xv.shape());
                    for nc in 0..n * c {
                        let scale = sv.data()[nc];
                        for i in 0..h * w {
                            dx.data_mut()[nc * h * w + i] = g.data()[nc * h * w + i] * scale;
                        }
                    }
                    Self::accumulate(&mut grads[x.0], dx);
                }
                if self.nodes[s.0].requires_grad {
                    let mut ds = Tensor::zeros(&[n, c]);
                    for nc in 0..n * c {
                        let mut acc = 0.0;
                        for i in 0..h * w {
                            acc += g.data()[nc * h * w + i] * xv.data()[nc * h * w + i];
                        }
                        ds.data_mut()[nc] = acc;
                    }
                    Self::accumulate(&mut grads[s.0], ds);
                }
            }
            Op::Gdn {
                x,
                beta_r,
                gamma_r,
                inverse,
            } => {
                let params = GdnParams {
                    beta_r: self.nodes[beta_r.0].value.clone(),
                    gamma_r: self.nodes[gamma_r.0].value.clone(),
                };
                let (dx, dbr, dgr) =
                    gdn_backward(&self.nodes[x.0].value, &params, *inverse, g)?;
                acc!(x, dx);
                acc!(beta_r, dbr);
                acc!(gamma_r, dgr);
            }
            Op::GaussianBin { x, mu, sigma } => {
                let (xv, mv, sv) = (
                    &self.nodes[x.0].value,
                    &self.nodes[mu.0].value,
                    &self.nodes[sigma.0].value,
                );
                let mut dx = Tensor::zeros(xv.shape());
                let mut dmu = Tensor::zeros(xv.shape());
                let mut dsg = Tensor::zeros(xv.shape());
                for i in 0..xv.numel() {
                    let s = sv.data()[i];
                    let z1 = (xv.data()[i] - mv.data()[i] + 0.5) / s;
                    let z0 = (xv.data()[i] - mv.data()[i] - 0.5) / s;
                    let p1 = scalar::norm_pdf(z1);
                    let p0 = scalar::norm_pdf(z0);
                    let gv = g.data()[i];
                    dx.data_mut()[i] = gv * (p1 - p0) / s;
                    dmu.data_mut()[i] = -gv * (p1 - p0) / s;
                    dsg.data_mut()[i] = -gv * (z1 * p1 - z0 * p0) / s;
                }
                acc!(x, dx);
                acc!(mu, dmu);
                acc!(sigma, dsg);
            }
            Op::FactorizedBin { x, params } => {
                let tensors: Vec<&Tensor> =
                    params.iter().map(|p| &self.nodes[p.0].value).collect();
                let refs = ChainRefs::from_slice(&tensors);
                let (dx, dparams) =
                    factorized_bin_backward(&self.nodes[x.0].value, &refs, g)?;
                acc!(x, dx);
                for (pid, dp) in params.iter().zip(dparams.into_iter()) {
                    acc!(pid, dp);
                }
            }
        }
        Ok(())
    }
}
