//! Operation-tape reverse-mode autodiff.
//!
//! A [`Graph`] owns every tensor produced during one forward pass. Forward
//! methods validate shapes, compute the result eagerly, and append an
//! operation record holding the input node ids plus whatever the backward
//! rule needs (e.g. pooling argmax indices). The record is topological by
//! construction: inputs always precede their consumers. `backward` sweeps
//! the record once, in reverse, accumulating gradients additively so that a
//! node used by several consumers receives the sum of all path gradients.
//!
//! Gradient recording is exclusive to one graph (one model instance) at a
//! time; graphs themselves are independent, so pure inference may run in
//! parallel across separate `Graph` values.

use crate::error::{Error, Result};
use crate::tensor::conv::{self, ConvDims};
use crate::tensor::{strides_of, Tensor};

/// Handle to a node in one specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBcast { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    MulBcast { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Affine { x: NodeId, scale: f64 },
    Matmul { a: NodeId, b: NodeId },
    Bmm { a: NodeId, b: NodeId },
    Permute { x: NodeId, axes: Vec<usize> },
    Reshape { x: NodeId },
    ConcatChannels { a: NodeId, b: NodeId },
    SoftmaxLastDim { x: NodeId },
    LayerNormLastDim { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    MeanAll { x: NodeId },
    SumPerSample { x: NodeId },
    MaxPool2d { x: NodeId, argmax: Vec<usize> },
    GlobalAvgPool { x: NodeId },
    GlobalMaxPool { x: NodeId, argmax: Vec<usize> },
    ChannelMean { x: NodeId },
    ChannelMax { x: NodeId, argmax: Vec<usize> },
    UpsampleNearest2x { x: NodeId },
    Pad2d { x: NodeId, pad: usize },
    BceWithLogits { logits: NodeId, targets: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward computation with reverse-mode differentiation.
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Graph that records values only; every node is treated as constant and
    /// `backward` is unavailable. Used for evaluation passes.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> NodeId {
        debug_assert!(
            value.data().iter().all(|v| v.is_finite()),
            "non-finite value produced by forward op"
        );
        value.grad = None;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad
    }

    fn out_requires(&self, inputs: &[NodeId]) -> bool {
        self.grad_enabled && inputs.iter().any(|&i| self.requires(i))
    }

    pub fn leaf(&mut self, mut t: Tensor) -> NodeId {
        t.requires_grad = t.requires_grad && self.grad_enabled;
        self.push(t, Op::Leaf)
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<NodeId> {
        Ok(self.leaf(Tensor::new(data, shape)?))
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    /// Bind a named parameter as a leaf. Binding the same name twice returns
    /// the original node so every use shares one leaf and gradient
    /// accumulation over reuse is automatic.
    pub fn param(&mut self, name: &str, t: &Tensor) -> NodeId {
        if let Some(&(_, id)) = self.params.iter().find(|(n, _)| n == name) {
            return id;
        }
        let id = self.leaf(t.clone());
        self.params.push((name.to_string(), id));
        id
    }

    pub fn param_bindings(&self) -> &[(String, NodeId)] {
        &self.params
    }

    pub fn param_grad(&self, name: &str) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|&(_, id)| self.grad(id))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    /// Count of leaves currently marked as requiring gradients.
    pub fn trainable_leaf_elements(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf) && n.value.requires_grad)
            .map(|n| n.value.numel())
            .sum()
    }

    // ---- elementwise ----------------------------------------------------

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let mut out = Tensor::new(data, v.shape()).unwrap();
        out.requires_grad = self.out_requires(&[x]);
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| sigmoid_scalar(a)).collect();
        let mut out = Tensor::new(data, v.shape()).unwrap();
        out.requires_grad = self.out_requires(&[x]);
        self.push(out, Op::Sigmoid { x })
    }

    /// `scale * x + shift` with compile-time constants.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| scale * a + shift).collect();
        let mut out = Tensor::new(data, v.shape()).unwrap();
        out.requires_grad = self.out_requires(&[x]);
        self.push(out, Op::Affine { x, scale })
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dimension(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let mut out = Tensor::new(data, self.shape(a))?;
        out.requires_grad = self.out_requires(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        let mut out = Tensor::new(data, self.shape(a))?;
        out.requires_grad = self.out_requires(&[a, b]);
        Ok(self.push(out, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let mut out = Tensor::new(data, self.shape(a))?;
        out.requires_grad = self.out_requires(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "div")?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x / y);
        let mut out = Tensor::new(data, self.shape(a))?;
        out.requires_grad = self.out_requires(&[a, b]);
        Ok(self.push(out, Op::Div { a, b }))
    }

    fn check_bcast(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == sb.len()
            && sa.iter().zip(sb).all(|(&da, &db)| db == da || db == 1);
        if !ok {
            return Err(Error::dimension(format!(
                "{what}: cannot broadcast {sb:?} over {sa:?}"
            )));
        }
        Ok(())
    }

    /// `a + broadcast(b)`; `b` must have the same rank with each dim either
    /// matching `a` or equal to 1 (bias-add style broadcasting only).
    pub fn add_bcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_bcast(a, b, "add_bcast")?;
        let data = bcast_zip(self.data(a), self.shape(a), self.data(b), self.shape(b), |x, y| x + y);
        let mut out = Tensor::new(data, self.shape(a))?;
        out.requires_grad = self.out_requires(&[a, b]);
        Ok(self.push(out, Op::AddBcast { a, b }))
    }

    /// `a * broadcast(b)` with the same broadcast rule as [`Self::add_bcast`].
    pub fn mul_bcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_bcast(a, b, "mul_bcast")?;
        let data = bcast_zip(self.data(a), self.shape(a), self.data(b), self.shape(b), |x, y| x * y);
        let mut out = Tensor::new(data, self.shape(a))?;
        out.requires_grad = self.out_requires(&[a, b]);
        Ok(self.push(out, Op::MulBcast { a, b }))
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dimension(format!("matmul: {sa:?} @ {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        conv::gemm(m, k, n, self.data(a), self.data(b), &mut data, 0.0);
        let mut out = Tensor::new(data, &[m, n])?;
        out.requires_grad = self.out_requires(&[a, b]);
        Ok(self.push(out, Op::Matmul { a, b }))
    }

    /// Batched matmul `[B,m,k] @ [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dimension(format!("bmm: {sa:?} @ {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![0.0; bs * m * n];
        for i in 0..bs {
            conv::gemm(
                m,
                k,
                n,
                &self.data(a)[i * m * k..(i + 1) * m * k],
                &self.data(b)[i * k * n..(i + 1) * k * n],
                &mut data[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let mut out = Tensor::new(data, &[bs, m, n])?;
        out.requires_grad = self.out_requires(&[a, b]);
        Ok(self.push(out, Op::Bmm { a, b }))
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dimension(format!(
                "permute: axes {axes:?} invalid for shape {shape:?}"
            )));
        }
        let (data, new_shape) = permute_data(self.data(x), shape, axes);
        let mut out = Tensor::new(data, &new_shape)?;
        out.requires_grad = self.out_requires(&[x]);
        Ok(self.push(out, Op::Permute { x, axes: axes.to_vec() }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::dimension(format!(
                "reshape: {:?} -> {shape:?}",
                self.shape(x)
            )));
        }
        let mut out = Tensor::new(self.data(x).to_vec(), shape)?;
        out.requires_grad = self.out_requires(&[x]);
        Ok(self.push(out, Op::Reshape { x }))
    }

    // ---- convolution and friends ------------------------------------------

    /// 2-D cross-correlation over NCHW input with OIHW weights. Odd kernel
    /// sizes only; output spatial size `(H + 2p - k)/s + 1`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::dimension(format!("conv2d: input {sx:?}, weight {sw:?}")));
        }
        let (n, cin, h, wdt) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, wc, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if wc != cin {
            return Err(Error::dimension(format!(
                "conv2d: input has {cin} channels, weight expects {wc}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::dimension(format!("conv2d: kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::dimension("conv2d: stride must be >= 1".to_string()));
        }
        let ho = conv::conv_out_size(h, kh, stride, padding)
            .ok_or_else(|| Error::dimension(format!("conv2d: kernel {kh} larger than padded input {h}")))?;
        let wo = conv::conv_out_size(wdt, kw, stride, padding)
            .ok_or_else(|| Error::dimension(format!("conv2d: kernel {kw} larger than padded input {wdt}")))?;
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::dimension(format!(
                    "conv2d: bias shape {:?}, expected [{cout}]",
                    self.shape(b)
                )));
            }
        }
        let dims = ConvDims { n, cin, h, w: wdt, cout, kh, kw, stride, padding, ho, wo };
        let data = conv::conv2d_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), &dims);
        let inputs: Vec<NodeId> = [Some(x), Some(w), b].into_iter().flatten().collect();
        let mut out = Tensor::new(data, &[n, cout, ho, wo])?;
        out.requires_grad = self.out_requires(&inputs);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, padding }))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(Error::dimension(format!("concat_channels: {sa:?} vs {sb:?}")));
        }
        let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            data.extend_from_slice(&self.data(a)[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&self.data(b)[i * cb * hw..(i + 1) * cb * hw]);
        }
        let mut out = Tensor::new(data, &[n, ca + cb, sa[2], sa[3]])?;
        out.requires_grad = self.out_requires(&[a, b]);
        Ok(self.push(out, Op::ConcatChannels { a, b }))
    }

    // ---- normalization / attention helpers --------------------------------

    pub fn softmax_lastdim(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::dimension("softmax: scalar input".to_string()))?;
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let mut out = Tensor::new(data, &shape)?;
        out.requires_grad = self.out_requires(&[x]);
        Ok(self.push(out, Op::SoftmaxLastDim { x }))
    }

    /// Layer normalization over the final dimension with learnable scale and
    /// shift vectors of length `D`.
    pub fn layernorm_lastdim(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        const EPS: f64 = 1e-5;
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::dimension("layernorm: scalar input".to_string()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dimension(format!(
                "layernorm: scale/shift must be [{d}], got {:?}/{:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let gd = self.data(gamma).to_vec();
        let bd = self.data(beta).to_vec();
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * gd[j] + bd[j];
            }
        }
        let mut out = Tensor::new(data, &shape)?;
        out.requires_grad = self.out_requires(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNormLastDim { x, gamma, beta, eps: EPS }))
    }

    // ---- reductions --------------------------------------------------------

    /// Mean over every element, yielding a `[1]` scalar node.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let mut out = Tensor::scalar(m);
        out.requires_grad = self.out_requires(&[x]);
        self.push(out, Op::MeanAll { x })
    }

    /// Sum everything except the leading (batch) dimension: `[N,...] -> [N]`.
    pub fn sum_per_sample(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            return Err(Error::dimension(format!("sum_per_sample: shape {shape:?}")));
        }
        let n = shape[0];
        let per = self.value(x).numel() / n;
        let data: Vec<f64> = (0..n)
            .map(|i| self.data(x)[i * per..(i + 1) * per].iter().sum())
            .collect();
        let mut out = Tensor::new(data, &[n])?;
        out.requires_grad = self.out_requires(&[x]);
        Ok(self.push(out, Op::SumPerSample { x }))
    }

    // ---- pooling / resampling ----------------------------------------------

    fn check_nchw(&self, x: NodeId, what: &str) -> Result<[usize; 4]> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::dimension(format!("{what}: expected NCHW, got {s:?}")));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// 2x2 max pooling with stride 2. Gradient routes to the argmax element;
    /// ties break to the first element in row-major scan order.
    pub fn max_pool2d(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.check_nchw(x, "max_pool2d")?;
        if h < 2 || w < 2 {
            return Err(Error::dimension(format!("max_pool2d: input {h}x{w} too small")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.data(x);
        let mut data = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; n * c * ho * wo];
        for nc in 0..n * c {
            let plane = &src[nc * h * w..(nc + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best_idx = (2 * oy) * w + 2 * ox;
                    let mut best = plane[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                    let o = nc * ho * wo + oy * wo + ox;
                    data[o] = best;
                    argmax[o] = nc * h * w + best_idx;
                }
            }
        }
        let mut out = Tensor::new(data, &[n, c, ho, wo])?;
        out.requires_grad = self.out_requires(&[x]);
        Ok(self.push(out, Op::MaxPool2d { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.check_nchw(x, "global_avg_pool")?;
        let src = self.data(x);
        let data: Vec<f64> = (0..n * c)
            .map(|nc| src[nc * h * w..(nc + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let mut out = Tensor::new(data, &[n, c, 1, 1])?;
        out.requires_grad = self.out_requires(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool { x }))
    }

    pub fn global_max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.check_nchw(x, "global_max_pool")?;
        let src = self.data(x);
        let mut data = vec![0.0; n * c];
        let mut argmax = vec![0usize; n * c];
        for nc in 0..n * c {
            let plane = &src[nc * h * w..(nc + 1) * h * w];
            let mut best = plane[0];
            let mut best_idx = 0;
            for (i, &v) in plane.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_idx = i;
                }
            }
            data[nc] = best;
            argmax[nc] = nc * h * w + best_idx;
        }
        let mut out = Tensor::new(data, &[n, c, 1, 1])?;
        out.requires_grad = self.out_requires(&[x]);
        Ok(self.push(out, Op::GlobalMaxPool { x, argmax }))
    }

    /// Mean over the channel axis: `[N,C,H,W] -> [N,1,H,W]`.
    pub fn channel_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.check_nchw(x, "channel_mean")?;
        let src = self.data(x);
        let hw = h * w;
        let mut data = vec![0.0; n * hw];
        for ni in 0..n {
            for ci in 0..c {
                let plane = &src[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                for (o, &v) in data[ni * hw..(ni + 1) * hw].iter_mut().zip(plane) {
                    *o += v;
                }
            }
            for o in &mut data[ni * hw..(ni + 1) * hw] {
                *o /= c as f64;
            }
        }
        let mut out = Tensor::new(data, &[n, 1, h, w])?;
        out.requires_grad = self.out_requires(&[x]);
        Ok(self.push(out, Op::ChannelMean { x }))
    }

    /// Max over the channel axis: `[N,C,H,W] -> [N,1,H,W]`; ties route the
    /// gradient to the lowest channel index.
    pub fn channel_max(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.check_nchw(x, "channel_max")?;
        let src = self.data(x);
        let hw = h * w;
        let mut data = vec![0.0; n * hw];
        let mut argmax = vec![0usize; n * hw];
        for ni in 0..n {
            for p in 0..hw {
                let mut best = src[ni * c * hw + p];
                let mut best_c = 0usize;
                for ci in 1..c {
                    let v = src[(ni * c + ci) * hw + p];
                    if v > best {
                        best = v;
                        best_c = ci;
                    }
                }
                data[ni * hw + p] = best;
                argmax[ni * hw + p] = (ni * c + best_c) * hw + p;
            }
        }
        let mut out = Tensor::new(data, &[n, 1, h, w])?;
        out.requires_grad = self.out_requires(&[x]);
        Ok(self.push(out, Op::ChannelMax { x, argmax }))
    }

    pub fn upsample_nearest2x(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.check_nchw(x, "upsample_nearest2x")?;
        let src = self.data(x);
        let mut data = vec![0.0; n * c * 4 * h * w];
        let (h2, w2) = (2 * h, 2 * w);
        for nc in 0..n * c {
            let plane = &src[nc * h * w..(nc + 1) * h * w];
            let dst = &mut data[nc * h2 * w2..(nc + 1) * h2 * w2];
            for y in 0..h2 {
                for x2 in 0..w2 {
                    dst[y * w2 + x2] = plane[(y / 2) * w + x2 / 2];
                }
            }
        }
        let mut out = Tensor::new(data, &[n, c, h2, w2])?;
        out.requires_grad = self.out_requires(&[x]);
        Ok(self.push(out, Op::UpsampleNearest2x { x }))
    }

    /// Zero-pad the two spatial dimensions by `pad` on every side.
    pub fn pad2d(&mut self, x: NodeId, pad: usize) -> Result<NodeId> {
        let [n, c, h, w] = self.check_nchw(x, "pad2d")?;
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let src = self.data(x);
        let mut data = vec![0.0; n * c * hp * wp];
        for nc in 0..n * c {
            let plane = &src[nc * h * w..(nc + 1) * h * w];
            let dst = &mut data[nc * hp * wp..(nc + 1) * hp * wp];
            for y in 0..h {
                let drow = (y + pad) * wp + pad;
                dst[drow..drow + w].copy_from_slice(&plane[y * w..(y + 1) * w]);
            }
        }
        let mut out = Tensor::new(data, &[n, c, hp, wp])?;
        out.requires_grad = self.out_requires(&[x]);
        Ok(self.push(out, Op::Pad2d { x, pad }))
    }

    // ---- losses -------------------------------------------------------------

    /// Mean binary cross-entropy from logits, computed in the overflow-safe
    /// form `max(z,0) - z*y + ln(1 + exp(-|z|))`. Targets must be a constant
    /// {0,1} node of the same shape.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        self.binary_same_shape(logits, targets, "bce_with_logits")?;
        if self.value(targets).requires_grad {
            return Err(Error::contract(
                "bce_with_logits: targets must not require gradients".to_string(),
            ));
        }
        let z = self.data(logits);
        let y = self.data(targets);
        let total: f64 = z
            .iter()
            .zip(y)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let mut out = Tensor::scalar(total / z.len() as f64);
        out.requires_grad = self.out_requires(&[logits]);
        Ok(self.push(out, Op::BceWithLogits { logits, targets }))
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse sweep seeding `d(loss)/d(loss) = 1`. The loss must be scalar.
    /// Afterwards every node that received a gradient (in particular every
    /// `requires_grad` leaf) exposes it through [`Self::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::contract("backward on an inference graph".to_string()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].value.requires_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value.grad = g;
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, add: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].value.requires_grad {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[id.0].value.numel()]);
        }
        add(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Relu { x } => {
                let xd = self.data(*x);
                self.accumulate(grads, *x, |dst| {
                    for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(xd) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                let s = self.data(NodeId(i));
                self.accumulate(grads, *x, |dst| {
                    for ((d, &gv), &sv) in dst.iter_mut().zip(g).zip(s) {
                        *d += gv * sv * (1.0 - sv);
                    }
                });
            }
            Op::Affine { x, scale } => {
                let scale = *scale;
                self.accumulate(grads, *x, |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv * scale;
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |dst| add_into(dst, g));
                self.accumulate(grads, *b, |dst| add_into(dst, g));
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |dst| add_into(dst, g));
                self.accumulate(grads, *b, |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |dst| {
                    for ((d, &gv), &bv) in dst.iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                });
                self.accumulate(grads, *b, |dst| {
                    for ((d, &gv), &av) in dst.iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                });
            }
            Op::Div { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |dst| {
                    for ((d, &gv), &bv) in dst.iter_mut().zip(g).zip(bd) {
                        *d += gv / bv;
                    }
                });
                self.accumulate(grads, *b, |dst| {
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d -= g[j] * ad[j] / (bd[j] * bd[j]);
                    }
                });
            }
            Op::AddBcast { a, b } => {
                self.accumulate(grads, *a, |dst| add_into(dst, g));
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                self.accumulate(grads, *b, |dst| {
                    bcast_reduce_into(g, &sa, &sb, dst, |_, _| 1.0);
                });
            }
            Op::MulBcast { a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |dst| {
                    let bstr = bcast_strides(&sa, &sb);
                    for_each_coord(&sa, |flat, coords| {
                        let bi: usize = coords.iter().zip(&bstr).map(|(c, s)| c * s).sum();
                        dst[flat] += g[flat] * bd[bi];
                    });
                });
                self.accumulate(grads, *b, |dst| {
                    bcast_reduce_into(g, &sa, &sb, dst, |flat, _| ad[flat]);
                });
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n2 = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |dst| conv::gemm_bt(m, n2, k, g, bd, dst, 1.0));
                self.accumulate(grads, *b, |dst| conv::gemm_at(k, m, n2, ad, g, dst, 1.0));
            }
            Op::Bmm { a, b } => {
                let (bs, m, k) = (self.shape(*a)[0], self.shape(*a)[1], self.shape(*a)[2]);
                let n2 = self.shape(*b)[2];
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |dst| {
                    for i in 0..bs {
                        conv::gemm_bt(
                            m, n2, k,
                            &g[i * m * n2..(i + 1) * m * n2],
                            &bd[i * k * n2..(i + 1) * k * n2],
                            &mut dst[i * m * k..(i + 1) * m * k],
                            1.0,
                        );
                    }
                });
                self.accumulate(grads, *b, |dst| {
                    for i in 0..bs {
                        conv::gemm_at(
                            k, m, n2,
                            &ad[i * m * k..(i + 1) * m * k],
                            &g[i * m * n2..(i + 1) * m * n2],
                            &mut dst[i * k * n2..(i + 1) * k * n2],
                            1.0,
                        );
                    }
                });
            }
            Op::Permute { x, axes } => {
                let out_shape = self.shape(NodeId(i));
                let inverse = inverse_axes(axes);
                let (gin, _) = permute_data(g, out_shape, &inverse);
                self.accumulate(grads, *x, |dst| add_into(dst, &gin));
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, |dst| add_into(dst, g));
            }
            Op::Conv2d { x, w, b, stride, padding } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let so = self.shape(NodeId(i));
                let dims = ConvDims {
                    n: sx[0], cin: sx[1], h: sx[2], w: sx[3],
                    cout: sw[0], kh: sw[2], kw: sw[3],
                    stride: *stride, padding: *padding,
                    ho: so[2], wo: so[3],
                };
                let gr = conv::conv2d_backward(self.data(*x), self.data(*w), b.is_some(), g, &dims);
                self.accumulate(grads, *x, |dst| add_into(dst, &gr.dx));
                self.accumulate(grads, *w, |dst| add_into(dst, &gr.dw));
                if let (Some(b), Some(db)) = (b, gr.db) {
                    self.accumulate(grads, *b, |dst| add_into(dst, &db));
                }
            }
            Op::ConcatChannels { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                let ct = ca + cb;
                self.accumulate(grads, *a, |dst| {
                    for i2 in 0..n {
                        add_into(
                            &mut dst[i2 * ca * hw..(i2 + 1) * ca * hw],
                            &g[i2 * ct * hw..i2 * ct * hw + ca * hw],
                        );
                    }
                });
                self.accumulate(grads, *b, |dst| {
                    for i2 in 0..n {
                        add_into(
                            &mut dst[i2 * cb * hw..(i2 + 1) * cb * hw],
                            &g[i2 * ct * hw + ca * hw..(i2 + 1) * ct * hw],
                        );
                    }
                });
            }
            Op::SoftmaxLastDim { x } => {
                let s = self.data(NodeId(i));
                let d = *self.shape(NodeId(i)).last().unwrap();
                self.accumulate(grads, *x, |dst| {
                    for ((drow, grow), srow) in dst.chunks_mut(d).zip(g.chunks(d)).zip(s.chunks(d)) {
                        let dot: f64 = grow.iter().zip(srow).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            drow[j] += srow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNormLastDim { x, gamma, beta, eps } => {
                let d = *self.shape(*x).last().unwrap();
                let xd = self.data(*x);
                let gd = self.data(*gamma);
                let eps = *eps;
                // per-row statistics recomputed from the stored input
                let rows = xd.len() / d;
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; xd.len()];
                for r in 0..rows {
                    let xr = &xd[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mean = xr.iter().sum::<f64>() / d as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                        let dxh = gr[j] * gd[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat[j];
                    }
                    let df = d as f64;
                    for j in 0..d {
                        let dxh = gr[j] * gd[j];
                        dx[r * d + j] = inv / df * (df * dxh - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.accumulate(grads, *x, |dst| add_into(dst, &dx));
                self.accumulate(grads, *gamma, |dst| add_into(dst, &dgamma));
                self.accumulate(grads, *beta, |dst| add_into(dst, &dbeta));
            }
            Op::MeanAll { x } => {
                let numel = self.value(*x).numel() as f64;
                let gv = g[0] / numel;
                self.accumulate(grads, *x, |dst| {
                    for d in dst.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::SumPerSample { x } => {
                let n = self.shape(*x)[0];
                let per = self.value(*x).numel() / n;
                self.accumulate(grads, *x, |dst| {
                    for s in 0..n {
                        for d in &mut dst[s * per..(s + 1) * per] {
                            *d += g[s];
                        }
                    }
                });
            }
            Op::MaxPool2d { x, argmax } | Op::GlobalMaxPool { x, argmax } | Op::ChannelMax { x, argmax } => {
                self.accumulate(grads, *x, |dst| {
                    for (&src_idx, &gv) in argmax.iter().zip(g) {
                        dst[src_idx] += gv;
                    }
                });
            }
            Op::GlobalAvgPool { x } => {
                let s = self.shape(*x);
                let (hw, nc) = (s[2] * s[3], s[0] * s[1]);
                self.accumulate(grads, *x, |dst| {
                    for i2 in 0..nc {
                        let gv = g[i2] / hw as f64;
                        for d in &mut dst[i2 * hw..(i2 + 1) * hw] {
                            *d += gv;
                        }
                    }
                });
            }
            Op::ChannelMean { x } => {
                let s = self.shape(*x);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                self.accumulate(grads, *x, |dst| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let dstp = &mut dst[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                            for (d, &gv) in dstp.iter_mut().zip(&g[ni * hw..(ni + 1) * hw]) {
                                *d += gv / c as f64;
                            }
                        }
                    }
                });
            }
            Op::UpsampleNearest2x { x } => {
                let s = self.shape(*x);
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (h2, w2) = (2 * h, 2 * w);
                self.accumulate(grads, *x, |dst| {
                    for i2 in 0..nc {
                        let gpl = &g[i2 * h2 * w2..(i2 + 1) * h2 * w2];
                        let dpl = &mut dst[i2 * h * w..(i2 + 1) * h * w];
                        for y in 0..h2 {
                            for x2 in 0..w2 {
                                dpl[(y / 2) * w + x2 / 2] += gpl[y * w2 + x2];
                            }
                        }
                    }
                });
            }
            Op::Pad2d { x, pad } => {
                let s = self.shape(*x);
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                let pad = *pad;
                self.accumulate(grads, *x, |dst| {
                    for i2 in 0..nc {
                        let gpl = &g[i2 * hp * wp..(i2 + 1) * hp * wp];
                        let dpl = &mut dst[i2 * h * w..(i2 + 1) * h * w];
                        for y in 0..h {
                            let grow = (y + pad) * wp + pad;
                            add_into(&mut dpl[y * w..(y + 1) * w], &gpl[grow..grow + w]);
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.data(*logits);
                let y = self.data(*targets);
                let scale = g[0] / z.len() as f64;
                self.accumulate(grads, *logits, |dst| {
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d += scale * (sigmoid_scalar(z[j]) - y[j]);
                    }
                });
            }
        }
    }

    #[cfg(test)]
    pub(crate) fn push_raw_for_test(&mut self, value: Tensor, wrong_input: NodeId) -> NodeId {
        // test hook: forward data with a mismatched backward rule
        self.push(value, Op::Relu { x: wrong_input })
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Strides into the broadcast operand: 0 wherever its dim is 1.
fn bcast_strides(a_shape: &[usize], b_shape: &[usize]) -> Vec<usize> {
    let bs = strides_of(b_shape);
    b_shape
        .iter()
        .zip(&bs)
        .zip(a_shape)
        .map(|((&bd, &st), &ad)| if bd == ad { st } else { 0 })
        .collect()
}

fn for_each_coord(shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let numel: usize = shape.iter().product();
    let mut coords = vec![0usize; shape.len()];
    for flat in 0..numel {
        f(flat, &coords);
        for d in (0..shape.len()).rev() {
            coords[d] += 1;
            if coords[d] < shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
}

fn bcast_zip(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let bstr = bcast_strides(a_shape, b_shape);
    let mut out = vec![0.0; a.len()];
    for_each_coord(a_shape, |flat, coords| {
        let bi: usize = coords.iter().zip(&bstr).map(|(c, s)| c * s).sum();
        out[flat] = f(a[flat], b[bi]);
    });
    out
}

/// Reduce a full-shape gradient onto the broadcast operand, scaling each
/// element by `weight(flat, b_index)` (1 for add, `a[flat]` for mul).
fn bcast_reduce_into(
    g: &[f64],
    a_shape: &[usize],
    b_shape: &[usize],
    dst: &mut [f64],
    weight: impl Fn(usize, usize) -> f64,
) {
    let bstr = bcast_strides(a_shape, b_shape);
    for_each_coord(a_shape, |flat, coords| {
        let bi: usize = coords.iter().zip(&bstr).map(|(c, s)| c * s).sum();
        dst[bi] += g[flat] * weight(flat, bi);
    });
}

fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides_of(shape);
    let mut out = vec![0.0; data.len()];
    for_each_coord(&new_shape, |flat, coords| {
        let src: usize = coords
            .iter()
            .zip(axes)
            .map(|(&c, &a)| c * in_strides[a])
            .sum();
        out[flat] = data[src];
    });
    (out, new_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, data: Vec<f64>, shape: &[usize]) -> NodeId {
        g.leaf(Tensor::new(data, shape).unwrap().with_grad())
    }

    #[test]
    fn conv_all_ones_center_is_nine() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1.0; 9], &[1, 1, 3, 3]);
        let w = leaf(&mut g, vec![1.0; 9], &[1, 1, 3, 3]);
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert_eq!(g.data(y)[4], 9.0);
        // corners only overlap a 2x2 window
        assert_eq!(g.data(y)[0], 4.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = leaf(&mut g, (0..12).map(|v| v as f64).collect(), &[1, 3, 2, 2]);
        let w = {
            // identity over 3 channels: w[o][c] = delta(o,c)
            let mut wd = vec![0.0; 9];
            wd[0] = 1.0;
            wd[4] = 1.0;
            wd[8] = 1.0;
            leaf(&mut g, wd, &[3, 3, 1, 1])
        };
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.data(y), g.data(NodeId(0)));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![0.0; 16], &[1, 4, 2, 2]);
        let w = leaf(&mut g, vec![0.0; 9], &[1, 1, 3, 3]);
        assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![0.0], &[1]);
        let y = g.sigmoid(x);
        assert_eq!(g.data(y), &[0.5]);
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![0.0, 0.0, 0.0], &[1, 3]);
        let y = g.softmax_lastdim(x).unwrap();
        for &v in g.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn upsample_nearest_replicates() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let y = g.upsample_nearest2x(x).unwrap();
        assert_eq!(
            g.data(y),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1.0, 2.0, 3.0], &[1, 3]);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_per_sample(sq).unwrap();
        let loss = g.mean_all(s);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_sigmoid_times_constant() {
        // loss = sigmoid(w) * 4 at w=0 -> dloss/dw = 0.25 * 4 = 1
        let mut g = Graph::new();
        let w = leaf(&mut g, vec![0.0], &[1]);
        let s = g.sigmoid(w);
        let loss0 = g.affine(s, 4.0, 0.0);
        let loss = g.mean_all(loss0);
        g.backward(loss).unwrap();
        assert!((g.grad(w).unwrap()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_nonscalar_loss() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1.0, 2.0], &[2, 1]);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        // f(x) = x*x + 3x uses x three times; compare against duplicated leaves
        let build_shared = |xval: f64| {
            let mut g = Graph::new();
            let x = leaf(&mut g, vec![xval], &[1, 1]);
            let xx = g.mul(x, x).unwrap();
            let tx = g.affine(x, 3.0, 0.0);
            let s = g.add(xx, tx).unwrap();
            let loss = g.mean_all(s);
            g.backward(loss).unwrap();
            g.grad(x).unwrap()[0]
        };
        let build_split = |xval: f64| {
            let mut g = Graph::new();
            let x1 = leaf(&mut g, vec![xval], &[1, 1]);
            let x2 = leaf(&mut g, vec![xval], &[1, 1]);
            let x3 = leaf(&mut g, vec![xval], &[1, 1]);
            let xx = g.mul(x1, x2).unwrap();
            let tx = g.affine(x3, 3.0, 0.0);
            let s = g.add(xx, tx).unwrap();
            let loss = g.mean_all(s);
            g.backward(loss).unwrap();
            g.grad(x1).unwrap()[0] + g.grad(x2).unwrap()[0] + g.grad(x3).unwrap()[0]
        };
        let a = build_shared(1.7);
        let b = build_split(1.7);
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        assert!((a - (2.0 * 1.7 + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn max_pool_tie_routes_to_first() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![5.0, 5.0, 5.0, 5.0], &[1, 1, 2, 2]);
        let y = g.max_pool2d(x).unwrap();
        let loss = g.mean_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn param_binding_is_deduplicated() {
        let mut g = Graph::new();
        let t = Tensor::new(vec![2.0], &[1]).unwrap().with_grad();
        let a = g.param("w", &t);
        let b = g.param("w", &t);
        assert_eq!(a, b);
        assert_eq!(g.param_bindings().len(), 1);
    }

    #[test]
    fn bce_matches_ln2_at_zero_logit() {
        let mut g = Graph::new();
        let z = leaf(&mut g, vec![0.0, 0.0], &[1, 2]);
        let y = g.constant(vec![0.0, 1.0], &[1, 2]).unwrap();
        let loss = g.bce_with_logits(z, y).unwrap();
        assert!((g.data(loss)[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_stable_at_large_logits() {
        let mut g = Graph::new();
        let z = leaf(&mut g, vec![50.0], &[1, 1]);
        let y = g.constant(vec![1.0], &[1, 1]).unwrap();
        let loss = g.bce_with_logits(z, y).unwrap();
        let v = g.data(loss)[0];
        assert!(v.is_finite() && v < 1e-20, "loss {v}");
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::new();
        let x = leaf(&mut g, (0..24).map(|v| v as f64).collect(), &[2, 3, 4]);
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.data(back), g.data(x));
    }

    #[test]
    fn inference_graph_refuses_backward() {
        let mut g = Graph::inference();
        let x = g.leaf(Tensor::scalar(1.0).with_grad());
        assert!(!g.value(x).requires_grad);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }
}
