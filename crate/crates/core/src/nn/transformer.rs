//! Pre-norm transformer block with an optional bottleneck adapter between
//! the attention and MLP sublayers.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, Module, Param};
use crate::tensor::{Graph, NodeId};

/// Residual bottleneck adapter `x + up(relu(down(x)))`.
///
/// The up-projection starts at zero, so a freshly constructed adapter is the
/// identity map and inserting it leaves the host network's function
/// unchanged until training moves it.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
    dim: usize,
}

impl Adapter {
    pub fn new(name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = dim.div_ceil(4);
        let down = Linear::new(&format!("{name}.down"), dim, hidden, Init::He, rng);
        let up = Linear::new(&format!("{name}.up"), hidden, dim, Init::Zero, rng);
        Adapter { down, up, dim }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.dim) {
            return Err(Error::dimension(format!(
                "adapter dim {} vs input {shape:?}",
                self.dim
            )));
        }
        let rows = g.value(x).numel() / self.dim;
        let flat = g.reshape(x, &[rows, self.dim])?;
        let h = self.down.forward(g, flat)?;
        let h = g.relu(h);
        let h = self.up.forward(g, h)?;
        let h = g.reshape(h, &shape)?;
        g.add(x, h)
    }
}

impl Module for Adapter {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.down.visit_params(f);
        self.up.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.down.visit_params_mut(f);
        self.up.visit_params_mut(f);
    }
}

/// Multi-head self-attention over `[N, T, d]` token tensors.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "attention dim {dim} must be divisible by heads {heads}"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(&format!("{name}.wq"), dim, dim, Init::Scaled, rng),
            wk: Linear::new(&format!("{name}.wk"), dim, dim, Init::Scaled, rng),
            wv: Linear::new(&format!("{name}.wv"), dim, dim, Init::Scaled, rng),
            wo: Linear::new(&format!("{name}.wo"), dim, dim, Init::Scaled, rng),
            heads,
            dim,
        })
    }

    /// Project `[N,T,d]` through a linear layer and split into
    /// `[N*heads, T, d/heads]`.
    fn project_heads(&self, g: &mut Graph, x: NodeId, lin: &Linear, n: usize, t: usize) -> Result<NodeId> {
        let dh = self.dim / self.heads;
        let flat = g.reshape(x, &[n * t, self.dim])?;
        let p = lin.forward(g, flat)?;
        let p = g.reshape(p, &[n, t, self.heads, dh])?;
        let p = g.permute(p, &[0, 2, 1, 3])?;
        g.reshape(p, &[n * self.heads, t, dh])
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::dimension(format!(
                "attention expects [N,T,{}], got {shape:?}",
                self.dim
            )));
        }
        let (n, t) = (shape[0], shape[1]);
        let dh = self.dim / self.heads;
        let q = self.project_heads(g, x, &self.wq, n, t)?;
        let k = self.project_heads(g, x, &self.wk, n, t)?;
        let v = self.project_heads(g, x, &self.wv, n, t)?;

        let kt = g.permute(k, &[0, 2, 1])?;
        let scores = g.bmm(q, kt)?;
        let scores = g.affine(scores, 1.0 / (dh as f64).sqrt(), 0.0);
        let attn = g.softmax_lastdim(scores)?;
        let ctx = g.bmm(attn, v)?;

        let ctx = g.reshape(ctx, &[n, self.heads, t, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[n * t, self.dim])?;
        let out = self.wo.forward(g, ctx)?;
        g.reshape(out, &[n, t, self.dim])
    }
}

impl Module for MultiHeadAttention {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.wq.visit_params(f);
        self.wk.visit_params(f);
        self.wv.visit_params(f);
        self.wo.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.wq.visit_params_mut(f);
        self.wk.visit_params_mut(f);
        self.wv.visit_params_mut(f);
        self.wo.visit_params_mut(f);
    }
}

/// Pre-norm block: `y = x + MHSA(LN(x))`, optional adapter on `y`, then
/// `out = z + MLP(LN(z))` with a 4x hidden width.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub adapter: Option<Adapter>,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    dim: usize,
}

impl TransformerBlock {
    pub fn new(
        name: &str,
        dim: usize,
        heads: usize,
        with_adapter: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(&format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), dim, heads, rng)?,
            adapter: with_adapter.then(|| Adapter::new(&format!("{name}.adapter"), dim, rng)),
            ln2: LayerNorm::new(&format!("{name}.ln2"), dim),
            fc1: Linear::new(&format!("{name}.mlp.fc1"), dim, 4 * dim, Init::He, rng),
            fc2: Linear::new(&format!("{name}.mlp.fc2"), 4 * dim, dim, Init::Scaled, rng),
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, adapter_enabled: bool) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        let (n, t) = (shape[0], shape[1]);

        let normed = self.ln1.forward(g, x)?;
        let attn = self.attn.forward(g, normed)?;
        let y = g.add(x, attn)?;

        let z = match (&self.adapter, adapter_enabled) {
            (Some(a), true) => a.forward(g, y)?,
            _ => y,
        };

        let normed2 = self.ln2.forward(g, z)?;
        let flat = g.reshape(normed2, &[n * t, self.dim])?;
        let h = self.fc1.forward(g, flat)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, h)?;
        let mlp = g.reshape(h, &[n, t, self.dim])?;
        g.add(z, mlp)
    }
}

impl Module for TransformerBlock {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.ln1.visit_params(f);
        self.attn.visit_params(f);
        if let Some(a) = &self.adapter {
            a.visit_params(f);
        }
        self.ln2.visit_params(f);
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.ln1.visit_params_mut(f);
        self.attn.visit_params_mut(f);
        if let Some(a) = &mut self.adapter {
            a.visit_params_mut(f);
        }
        self.ln2.visit_params_mut(f);
        self.fc1.visit_params_mut(f);
        self.fc2.visit_params_mut(f);
    }
}
