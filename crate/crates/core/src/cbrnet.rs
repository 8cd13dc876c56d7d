//! Four-stage convolutional side branch producing the hierarchical feature
//! pyramid used for skip fusion, plus the stride-2 alignment of its deepest
//! map down to the global-feature resolution.
//!
//! For a configured width `c` and input `[N,3,H,W]` the stages emit
//! `[c/4,H,W]`, `[c/2,H/2,W/2]`, `[c,H/4,W/4]`, `[2c,H/8,W/8]`; each stage
//! is a residual block followed by CBAM, and every stage output is taken
//! after its attention module.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Cbam, Conv2d, Init, Module, Param, ResidualBlock};
use crate::tensor::{Graph, NodeId};

/// Stage outputs (post-CBAM) in one graph.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub f1: NodeId,
    pub f2: NodeId,
    pub f3: NodeId,
    pub f4: NodeId,
}

#[derive(Clone, Debug)]
struct Stage {
    res: ResidualBlock,
    cbam: Cbam,
}

#[derive(Clone, Debug)]
pub struct CbrNet {
    stages: Vec<Stage>,
    align4: Conv2d,
    width: usize,
}

impl CbrNet {
    /// `width` is the backbone feature width `c`; it must be divisible by 4
    /// and yield CBAM-compatible stage widths (powers-of-two multiples do).
    pub fn new(name: &str, width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if width % 4 != 0 {
            return Err(Error::config(format!(
                "cbrnet width {width} must be divisible by 4"
            )));
        }
        let plan: [(usize, usize, usize); 4] = [
            (3, width / 4, 1),
            (width / 4, width / 2, 2),
            (width / 2, width, 2),
            (width, 2 * width, 2),
        ];
        let mut stages = Vec::with_capacity(4);
        for (i, &(cin, cout, stride)) in plan.iter().enumerate() {
            let sname = format!("{name}.stage{}", i + 1);
            stages.push(Stage {
                res: ResidualBlock::new(&format!("{sname}.res"), cin, cout, stride, rng)?,
                cbam: Cbam::new(&format!("{sname}.cbam"), cout, rng)?,
            });
        }
        let align4 = Conv2d::new(&format!("{name}.align4"), 2 * width, width, 3, 2, 1, Init::He, rng);
        Ok(CbrNet { stages, align4, width })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn forward(&self, g: &mut Graph, image: NodeId) -> Result<FeaturePyramid> {
        let shape = g.shape(image);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::dimension(format!(
                "cbrnet expects [N,3,H,W], got {shape:?}"
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % 8 != 0 || w % 8 != 0 || h < 16 || w < 16 {
            return Err(Error::dimension(format!(
                "cbrnet input {h}x{w} must be >= 16 and divisible by 8"
            )));
        }
        let mut outs = Vec::with_capacity(4);
        let mut x = image;
        for stage in &self.stages {
            let r = stage.res.forward(g, x)?;
            x = stage.cbam.forward(g, r)?;
            outs.push(x);
        }
        Ok(FeaturePyramid {
            f1: outs[0],
            f2: outs[1],
            f3: outs[2],
            f4: outs[3],
        })
    }

    /// Map Feature 4 `[N,2c,H/8,W/8]` to the global-feature grid
    /// `[N,c,H/16,W/16]` with a stride-2 3x3 convolution.
    pub fn align_feature4(&self, g: &mut Graph, f4: NodeId) -> Result<NodeId> {
        let shape = g.shape(f4);
        if shape.len() != 4 || shape[1] != 2 * self.width {
            return Err(Error::dimension(format!(
                "align_feature4 expects [N,{},H,W], got {shape:?}",
                2 * self.width
            )));
        }
        if shape[2] % 2 != 0 || shape[3] % 2 != 0 {
            return Err(Error::dimension(format!(
                "align_feature4 needs even spatial size, got {}x{}",
                shape[2], shape[3]
            )));
        }
        self.align4.forward(g, f4)
    }
}

impl Module for CbrNet {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for s in &self.stages {
            s.res.visit_params(f);
            s.cbam.visit_params(f);
        }
        self.align4.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for s in &mut self.stages {
            s.res.visit_params_mut(f);
            s.cbam.visit_params_mut(f);
        }
        self.align4.visit_params_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_all_params;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn run(width: usize, n: usize, h: usize, w: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = CbrNet::new("cbrnet", width, &mut rng).unwrap();
        let mut g = Graph::new();
        let img = g.leaf(Tensor::zeros(&[n, 3, h, w]));
        let p = net.forward(&mut g, img).unwrap();
        let a = net.align_feature4(&mut g, p.f4).unwrap();
        [p.f1, p.f2, p.f3, p.f4, a]
            .iter()
            .map(|&id| g.shape(id).to_vec())
            .collect()
    }

    #[test]
    fn pyramid_shapes_at_default_width() {
        let shapes = run(64, 2, 64, 64);
        assert_eq!(shapes[0], vec![2, 16, 64, 64]);
        assert_eq!(shapes[1], vec![2, 32, 32, 32]);
        assert_eq!(shapes[2], vec![2, 64, 16, 16]);
        assert_eq!(shapes[3], vec![2, 128, 8, 8]);
        assert_eq!(shapes[4], vec![2, 64, 4, 4]);
    }

    #[test]
    fn pyramid_shapes_at_minimal_size() {
        let shapes = run(8, 1, 16, 16);
        assert_eq!(shapes[0], vec![1, 2, 16, 16]);
        assert_eq!(shapes[1], vec![1, 4, 8, 8]);
        assert_eq!(shapes[2], vec![1, 8, 4, 4]);
        assert_eq!(shapes[3], vec![1, 16, 2, 2]);
        assert_eq!(shapes[4], vec![1, 8, 1, 1]);
    }

    #[test]
    fn zero_image_with_zero_params_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut net = CbrNet::new("cbrnet", 16, &mut rng).unwrap();
        zero_all_params(&mut net);
        let mut g = Graph::new();
        let img = g.leaf(Tensor::zeros(&[1, 3, 16, 16]));
        let p = net.forward(&mut g, img).unwrap();
        for id in [p.f1, p.f2, p.f3, p.f4] {
            assert!(g.data(id).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let net = CbrNet::new("cbrnet", 16, &mut rng).unwrap();
        let mut g = Graph::new();
        let img = g.leaf(Tensor::zeros(&[1, 3, 20, 16]));
        assert!(matches!(net.forward(&mut g, img), Err(Error::Dimension(_))));
    }
}
