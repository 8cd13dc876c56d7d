//! Learned building blocks and parameter plumbing.
//!
//! Every block owns its parameters as [`Param`] values with dotted-path
//! names (e.g. `cbrnet.stage2.conv1.weight`). Binding a parameter into a
//! [`Graph`] is idempotent per name, so a weight used in several places
//! contributes one leaf whose gradient accumulates over all uses.

mod cbam;
mod residual;
mod transformer;

pub use cbam::{reduction_for, Cbam};
pub use residual::ResidualBlock;
pub use transformer::{Adapter, MultiHeadAttention, TransformerBlock};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Graph, NodeId, Tensor};

/// Named parameter tensor. `value.requires_grad` doubles as the trainable
/// flag: frozen parameters and fixed buffers set it to false.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, mut value: Tensor, trainable: bool) -> Self {
        value.requires_grad = trainable;
        value.grad = None;
        Param {
            name: name.into(),
            value,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> NodeId {
        g.param(&self.name, &self.value)
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn trainable(&self) -> bool {
        self.value.requires_grad
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.value.requires_grad = trainable;
    }
}

/// Parameter traversal in a fixed, construction-defined order.
pub trait Module {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push((p.name.clone(), p.value.clone())));
        out
    }

    fn trainable_param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| {
            if p.trainable() {
                n += p.numel();
            }
        });
        n
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }
}

/// Weight initialization families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// N(0, sqrt(2/fan_in)) for ReLU-followed weights.
    He,
    /// N(0, sqrt(1/fan_in)) for linear/attention projections.
    Scaled,
    Zero,
}

pub fn init_weights(shape: &[usize], fan_in: usize, init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        Init::Zero => Tensor::zeros(shape),
        Init::He => sample_normal(shape, (2.0 / fan_in as f64).sqrt(), rng),
        Init::Scaled => sample_normal(shape, (1.0 / fan_in as f64).sqrt(), rng),
    }
}

pub fn sample_normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std must be positive");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

pub fn sample_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// 2-D convolution layer (NCHW, OIHW weights).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = init_weights(&[cout, cin, kernel, kernel], fan_in, init, rng);
        Conv2d {
            weight: Param::new(format!("{name}.weight"), weight, true),
            bias: Some(Param::new(format!("{name}.bias"), Tensor::zeros(&[cout]), true)),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = self.weight.bind(g);
        let b = self.bias.as_ref().map(|b| b.bind(g));
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}

impl Module for Conv2d {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Fully connected layer over the last dimension of a 2-D input
/// (`[rows, in] -> [rows, out]`).
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param, // [in, out]
    pub bias: Param,   // [out]
}

impl Linear {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, init: Init, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Param::new(
                format!("{name}.weight"),
                init_weights(&[fan_in, fan_out], fan_in, init, rng),
                true,
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[fan_out]), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = self.weight.bind(g);
        let b = self.bias.bind(g);
        let out = g.matmul(x, w)?;
        let fan_out = self.bias.value.numel();
        let b2 = g.reshape(b, &[1, fan_out])?;
        g.add_bcast(out, b2)
    }
}

impl Module for Linear {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Layer norm over the final dimension with learnable scale/shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), true),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[dim]), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let gamma = self.gamma.bind(g);
        let beta = self.beta.bind(g);
        g.layernorm_lastdim(x, gamma, beta)
    }
}

impl Module for LayerNorm {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Set every parameter of a module to zero (test and ablation helper).
pub fn zero_all_params(m: &mut dyn Module) {
    m.visit_params_mut(&mut |p| {
        let shape = p.value.shape().to_vec();
        let trainable = p.trainable();
        p.value = Tensor::zeros(&shape);
        p.value.requires_grad = trainable;
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_forward_matches_manual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::new("fc", 2, 3, Init::Scaled, &mut rng);
        lin.weight.value = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        lin.bias.value = Tensor::new(vec![0.5, -0.5, 1.0], &[3]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, 1.0], &[1, 2]).unwrap();
        let y = lin.forward(&mut g, x).unwrap();
        assert_eq!(g.data(y), &[5.5, 6.5, 10.0]);
    }

    #[test]
    fn param_names_carry_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new("enc.stage1.conv1", 3, 8, 3, 1, 1, Init::He, &mut rng);
        let names: Vec<String> = conv.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["enc.stage1.conv1.weight", "enc.stage1.conv1.bias"]);
    }

    #[test]
    fn trainable_count_excludes_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::new("fc", 4, 4, Init::Scaled, &mut rng);
        assert_eq!(lin.trainable_param_count(), 20);
        lin.weight.set_trainable(false);
        assert_eq!(lin.trainable_param_count(), 4);
        assert_eq!(lin.param_count(), 20);
    }
}
