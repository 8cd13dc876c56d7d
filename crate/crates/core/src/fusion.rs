//! Attention-enhanced feature fusion.
//!
//! The block aligns the convolutional-branch channels to the decoder
//! stream, derives a shared spatial weight map as the mean of four sigmoid
//! attention heads over the concatenated streams, floors that map with a
//! learnable bias `b = sigmoid(beta)` via `W_adj = W_attn*(1-b) + b`, and
//! blends the two streams convexly: `W_adj*F_dec + (1-W_adj)*F_branch`.
//! Larger `b` therefore pushes the mix toward the decoder stream, and the
//! output always lies elementwise between the two inputs.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, Module, Param};
use crate::tensor::graph::sigmoid_scalar;
use crate::tensor::{Graph, NodeId, Tensor};

/// How decoder activations combine with the pyramid features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    AtteFfb,
    Add,
    None,
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FusionMode::AtteFfb => write!(f, "atteffb"),
            FusionMode::Add => write!(f, "add"),
            FusionMode::None => write!(f, "none"),
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "atteffb" => Ok(FusionMode::AtteFfb),
            "add" => Ok(FusionMode::Add),
            "none" => Ok(FusionMode::None),
            other => Err(Error::config(format!(
                "unknown fusion mode '{other}' (expected atteffb|add|none)"
            ))),
        }
    }
}

pub const ATTENTION_HEADS: usize = 4;

#[derive(Clone, Debug)]
pub struct AtteFfb {
    pub align: Conv2d,      // 1x1, branch channels -> decoder channels
    pub heads: Vec<Conv2d>, // four 3x3 convs, 2*C2 -> 1
    pub beta: Param,        // unconstrained scalar, b = sigmoid(beta)
    c2: usize,
}

impl AtteFfb {
    pub fn new(name: &str, c_branch: usize, c_decoder: usize, rng: &mut ChaCha8Rng) -> Self {
        let align = Conv2d::new(&format!("{name}.align"), c_branch, c_decoder, 1, 1, 0, Init::Scaled, rng);
        let heads = (0..ATTENTION_HEADS)
            .map(|k| {
                Conv2d::new(&format!("{name}.head{}", k + 1), 2 * c_decoder, 1, 3, 1, 1, Init::Scaled, rng)
            })
            .collect();
        AtteFfb {
            align,
            heads,
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[1]), true),
            c2: c_decoder,
        }
    }

    /// Channel alignment of the branch stream (1x1 conv).
    pub fn align(&self, g: &mut Graph, f_branch_ori: NodeId) -> Result<NodeId> {
        self.align.forward(g, f_branch_ori)
    }

    /// Mean of the four sigmoid head maps over `concat(f_branch, f_dec)`,
    /// shape `[N,1,H,W]` with values in [0,1].
    pub fn attention_weight(&self, g: &mut Graph, f_branch: NodeId, f_dec: NodeId) -> Result<NodeId> {
        if g.shape(f_branch) != g.shape(f_dec) {
            return Err(Error::dimension(format!(
                "attention_weight: {:?} vs {:?}",
                g.shape(f_branch),
                g.shape(f_dec)
            )));
        }
        let cat = g.concat_channels(f_branch, f_dec)?;
        let mut acc: Option<NodeId> = None;
        for head in &self.heads {
            let s = head.forward(g, cat)?;
            let s = g.sigmoid(s);
            acc = Some(match acc {
                Some(a) => g.add(a, s)?,
                None => s,
            });
        }
        Ok(g.affine(acc.unwrap(), 1.0 / ATTENTION_HEADS as f64, 0.0))
    }

    /// Current bias value `b = sigmoid(beta)`.
    pub fn bias_value(&self) -> f64 {
        sigmoid_scalar(self.beta.value.data()[0])
    }

    /// Full four-step fusion of the decoder stream with the (unaligned)
    /// branch stream.
    pub fn fuse(&self, g: &mut Graph, f_dec: NodeId, f_branch_ori: NodeId) -> Result<NodeId> {
        let sd = g.shape(f_dec).to_vec();
        let sb = g.shape(f_branch_ori);
        if sd.len() != 4 || sb.len() != 4 || sd[0] != sb[0] || sd[2] != sb[2] || sd[3] != sb[3] {
            return Err(Error::dimension(format!(
                "fuse: decoder {sd:?} vs branch {sb:?} spatial mismatch"
            )));
        }
        if sd[1] != self.c2 || sb[1] != self.align.in_channels() {
            return Err(Error::dimension(format!(
                "fuse: configured for {} -> {} channels, got branch {} / decoder {}",
                self.align.in_channels(),
                self.c2,
                sb[1],
                sd[1]
            )));
        }
        let f_branch = self.align(g, f_branch_ori)?;
        let w_attn = self.attention_weight(g, f_branch, f_dec)?;
        let beta = self.beta.bind(g);
        let b = g.sigmoid(beta);
        let w_adj = adjust_weight(g, w_attn, b)?;
        fuse(g, f_dec, f_branch, w_adj)
    }
}

impl Module for AtteFfb {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.align.visit_params(f);
        for h in &self.heads {
            h.visit_params(f);
        }
        f(&self.beta);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.align.visit_params_mut(f);
        for h in &mut self.heads {
            h.visit_params_mut(f);
        }
        f(&mut self.beta);
    }
}

/// `W_adj = W_attn * (1 - b) + b` for a scalar node `b` in (0,1); the result
/// is floored at `b` elementwise.
pub fn adjust_weight(g: &mut Graph, w_attn: NodeId, b: NodeId) -> Result<NodeId> {
    if g.value(b).numel() != 1 {
        return Err(Error::dimension("adjust_weight: b must be scalar".to_string()));
    }
    let rank = g.shape(w_attn).len();
    let ones = vec![1usize; rank];
    let b4 = g.reshape(b, &ones)?;
    let one_minus_b = g.affine(b4, -1.0, 1.0);
    let scaled = g.mul_bcast(w_attn, one_minus_b)?;
    g.add_bcast(scaled, b4)
}

/// Convex blend `W_adj ⊙ f_dec + (1 - W_adj) ⊙ f_branch`; the weight map is
/// broadcast over channels.
pub fn fuse(g: &mut Graph, f_dec: NodeId, f_branch: NodeId, w_adj: NodeId) -> Result<NodeId> {
    if g.shape(f_dec) != g.shape(f_branch) {
        return Err(Error::dimension(format!(
            "fuse: {:?} vs {:?}",
            g.shape(f_dec),
            g.shape(f_branch)
        )));
    }
    let a = g.mul_bcast(f_dec, w_adj)?;
    let inv = g.affine(w_adj, -1.0, 1.0);
    let b = g.mul_bcast(f_branch, inv)?;
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_all_params;
    use rand::SeedableRng;

    fn map(g: &mut Graph, shape: &[usize], seed: usize) -> NodeId {
        g.leaf(Tensor::from_fn(shape, |i| {
            (((i + seed) * 2654435761) % 1000) as f64 / 500.0 - 1.0
        }))
    }

    #[test]
    fn zero_heads_give_half_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut ffb = AtteFfb::new("fusion", 8, 8, &mut rng);
        zero_all_params(&mut ffb);
        let mut g = Graph::new();
        let a = map(&mut g, &[2, 8, 4, 4], 0);
        let b = map(&mut g, &[2, 8, 4, 4], 7);
        let w = ffb.attention_weight(&mut g, a, b).unwrap();
        assert!(g.data(w).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn adjust_weight_matches_hand_value() {
        // W_attn = 0.5, b = 0.2 -> 0.5*0.8 + 0.2 = 0.6
        let mut g = Graph::new();
        let w = g.leaf(Tensor::full(&[1, 1, 2, 2], 0.5));
        let b = g.scalar(0.2);
        let adj = adjust_weight(&mut g, w, b).unwrap();
        for &v in g.data(adj) {
            assert!((v - 0.6).abs() < 1e-15);
        }
    }

    #[test]
    fn adjust_weight_endpoints() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64 / 3.0));
        let b0 = g.scalar(0.0);
        let same = adjust_weight(&mut g, w, b0).unwrap();
        assert_eq!(g.data(same), g.data(w));
        let b1 = g.scalar(1.0);
        let ones = adjust_weight(&mut g, w, b1).unwrap();
        for &v in g.data(ones) {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn fuse_endpoints_and_equal_inputs() {
        let mut g = Graph::new();
        let fd = map(&mut g, &[1, 3, 2, 2], 1);
        let fb = map(&mut g, &[1, 3, 2, 2], 9);
        let w1 = g.leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
        let out1 = fuse(&mut g, fd, fb, w1).unwrap();
        assert_eq!(g.data(out1), g.data(fd));
        let w0 = g.leaf(Tensor::full(&[1, 1, 2, 2], 0.0));
        let out0 = fuse(&mut g, fd, fb, w0).unwrap();
        assert_eq!(g.data(out0), g.data(fb));

        // identical streams are a fixed point for any weight
        let wr = map(&mut g, &[1, 1, 2, 2], 3);
        let wr = g.sigmoid(wr);
        let out = fuse(&mut g, fd, fd, wr).unwrap();
        for (a, b) in g.data(out).iter().zip(g.data(fd)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn bias_stays_in_open_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut ffb = AtteFfb::new("fusion", 4, 4, &mut rng);
        for beta in [-30.0, -1.0, 0.0, 2.5, 30.0] {
            ffb.beta.value = Tensor::scalar(beta);
            ffb.beta.value.requires_grad = true;
            let b = ffb.bias_value();
            assert!(b > 0.0 && b < 1.0, "b={b} at beta={beta}");
        }
    }
}
