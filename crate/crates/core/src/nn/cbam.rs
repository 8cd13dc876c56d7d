//! Convolutional block attention: channel gate from shared-MLP pooled
//! descriptors, then a 7x7 spatial gate over the [avg, max] channel maps.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, Linear, Module, Param};
use crate::tensor::{Graph, NodeId};

/// Reduction ratio: 8 for wide maps, 4 under 8 channels, clamped to the
/// channel count so a hidden width of at least one always exists.
pub fn reduction_for(channels: usize) -> usize {
    if channels >= 8 {
        8
    } else if channels >= 4 {
        4
    } else {
        channels
    }
}

#[derive(Clone, Debug)]
pub struct Cbam {
    pub fc1: Linear,
    pub fc2: Linear,
    pub spatial: Conv2d,
    channels: usize,
}

impl Cbam {
    pub fn new(name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let r = reduction_for(channels);
        if channels % r != 0 {
            return Err(Error::config(format!(
                "cbam: {channels} channels not divisible by reduction {r}"
            )));
        }
        let hidden = channels / r;
        Ok(Cbam {
            fc1: Linear::new(&format!("{name}.mlp.fc1"), channels, hidden, Init::He, rng),
            fc2: Linear::new(&format!("{name}.mlp.fc2"), hidden, channels, Init::Scaled, rng),
            spatial: Conv2d::new(&format!("{name}.spatial"), 2, 1, 7, 1, 3, Init::Scaled, rng),
            channels,
        })
    }

    /// Shared MLP applied to a pooled `[N,C,1,1]` descriptor.
    fn mlp(&self, g: &mut Graph, pooled: NodeId) -> Result<NodeId> {
        let n = g.shape(pooled)[0];
        let flat = g.reshape(pooled, &[n, self.channels])?;
        let h = self.fc1.forward(g, flat)?;
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }

    /// `x' = x ⊙ Mc(x); out = x' ⊙ Ms(x')` with both gates strictly inside
    /// (0,1) by the sigmoid parametrization.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::dimension(format!(
                "cbam configured for {} channels, input {shape:?}",
                self.channels
            )));
        }
        let n = shape[0];

        // channel gate
        let avg = g.global_avg_pool(x)?;
        let mx = g.global_max_pool(x)?;
        let a = self.mlp(g, avg)?;
        let m = self.mlp(g, mx)?;
        let summed = g.add(a, m)?;
        let mc = g.sigmoid(summed);
        let mc = g.reshape(mc, &[n, self.channels, 1, 1])?;
        let xp = g.mul_bcast(x, mc)?;

        // spatial gate
        let am = g.channel_mean(xp)?;
        let amx = g.channel_max(xp)?;
        let cat = g.concat_channels(am, amx)?;
        let sconv = self.spatial.forward(g, cat)?;
        let ms = g.sigmoid(sconv);
        g.mul_bcast(xp, ms)
    }
}

impl Module for Cbam {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
        self.spatial.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.fc1.visit_params_mut(f);
        self.fc2.visit_params_mut(f);
        self.spatial.visit_params_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_all_params;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn zero_init_gates_quarter_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cbam = Cbam::new("c", 8, &mut rng).unwrap();
        zero_all_params(&mut cbam);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 8, 5, 5], |i| (i as f64 * 0.37).sin()));
        let y = cbam.forward(&mut g, x).unwrap();
        for (a, b) in g.data(x).iter().zip(g.data(y)) {
            assert!((a / 4.0 - b).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_input_gate_uses_doubled_mlp_output() {
        // avg and max descriptors coincide on a constant map, so the channel
        // gate is sigmoid(2 * MLP(c-vector)).
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cbam = Cbam::new("c", 4, &mut rng).unwrap();
        let c = 0.7;
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 4, 3, 3], c));
        let avg = g.global_avg_pool(x).unwrap();
        let mlp_out = cbam.mlp(&mut g, avg).unwrap();
        let expected: Vec<f64> = g
            .data(mlp_out)
            .iter()
            .map(|&v| 1.0 / (1.0 + (-2.0 * v).exp()))
            .collect();

        let mut g2 = Graph::new();
        let x2 = g2.leaf(Tensor::full(&[1, 4, 3, 3], c));
        let avg2 = g2.global_avg_pool(x2).unwrap();
        let mx2 = g2.global_max_pool(x2).unwrap();
        let a = cbam.mlp(&mut g2, avg2).unwrap();
        let m = cbam.mlp(&mut g2, mx2).unwrap();
        let s = g2.add(a, m).unwrap();
        let gate = g2.sigmoid(s);
        for (e, v) in expected.iter().zip(g2.data(gate)) {
            assert!((e - v).abs() < 1e-14);
        }
    }

    #[test]
    fn gates_stay_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cbam = Cbam::new("c", 8, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[1, 8, 4, 4], |i| ((i * 31 % 17) as f64 - 8.0) * 0.9));
        let y = cbam.forward(&mut g, x).unwrap();
        // gated twice, so |out| < |x| strictly wherever x != 0
        for (a, b) in g.data(x).iter().zip(g.data(y)) {
            if *a != 0.0 {
                assert!(b.abs() < a.abs());
            }
        }
    }

    #[test]
    fn rejects_indivisible_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert!(Cbam::new("c", 6, &mut rng).is_err());
        assert!(Cbam::new("c", 12, &mut rng).is_err());
        assert!(Cbam::new("c", 2, &mut rng).is_ok());
    }
}
