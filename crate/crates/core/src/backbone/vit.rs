//! Miniature ViT encoder: non-overlapping patch embedding, learned
//! positional embedding, a stack of transformer blocks with adapter slots,
//! and a 1x1 neck projecting tokens back to a `[N, c, H/16, W/16]` global
//! feature map.

use rand_chacha::ChaCha8Rng;

use crate::backbone::PATCH_SIZE;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, Linear, Module, Param, TransformerBlock};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Clone, Debug)]
pub struct ViTMini {
    /// Linear map from one flattened 3xPxP patch to a d-dim token; exactly
    /// the non-overlapping PxP stride-P convolution.
    pub patch: Linear,
    pub pos: Param,
    pub blocks: Vec<TransformerBlock>,
    pub neck: Conv2d,
    h: usize,
    w: usize,
    dim: usize,
}

impl ViTMini {
    /// Build an encoder for inputs of exactly `h x w` pixels (both divisible
    /// by the patch size); the positional table is sized to that grid.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        h: usize,
        w: usize,
        dim: usize,
        out_channels: usize,
        depth: usize,
        heads: usize,
        with_adapters: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if h % PATCH_SIZE != 0 || w % PATCH_SIZE != 0 {
            return Err(Error::config(format!(
                "vit input {h}x{w} must be divisible by patch size {PATCH_SIZE}"
            )));
        }
        if depth == 0 {
            return Err(Error::config("vit depth must be >= 1".to_string()));
        }
        let tokens = (h / PATCH_SIZE) * (w / PATCH_SIZE);
        let patch = Linear::new(
            &format!("{name}.patch"),
            3 * PATCH_SIZE * PATCH_SIZE,
            dim,
            Init::Scaled,
            rng,
        );
        let mut blocks = Vec::with_capacity(depth);
        for i in 0..depth {
            blocks.push(TransformerBlock::new(
                &format!("{name}.block{}", i + 1),
                dim,
                heads,
                with_adapters,
                rng,
            )?);
        }
        let neck = Conv2d::new(&format!("{name}.neck"), dim, out_channels, 1, 1, 0, Init::Scaled, rng);
        Ok(ViTMini {
            patch,
            pos: Param::new(format!("{name}.pos"), Tensor::zeros(&[tokens, dim]), true),
            blocks,
            neck,
            h,
            w,
            dim,
        })
    }

    pub fn token_count(&self) -> usize {
        (self.h / PATCH_SIZE) * (self.w / PATCH_SIZE)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h / PATCH_SIZE, self.w / PATCH_SIZE)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Patchify, add positions, run the block stack (adapters active only
    /// when both constructed and enabled), project to the feature width.
    pub fn encode(&self, g: &mut Graph, image: NodeId, adapters_enabled: bool) -> Result<NodeId> {
        let shape = g.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::dimension(format!("vit expects [N,3,H,W], got {shape:?}")));
        }
        if shape[2] != self.h || shape[3] != self.w {
            return Err(Error::dimension(format!(
                "vit built for {}x{}, got {}x{}",
                self.h, self.w, shape[2], shape[3]
            )));
        }
        let n = shape[0];
        let (gh, gw) = self.grid();
        let t = gh * gw;
        let p = PATCH_SIZE;

        // [N,3,H,W] -> [N,3,gh,P,gw,P] -> [N,gh,gw,3,P,P] -> [N*T, 3*P*P]
        let x = g.reshape(image, &[n, 3, gh, p, gw, p])?;
        let x = g.permute(x, &[0, 2, 4, 1, 3, 5])?;
        let x = g.reshape(x, &[n * t, 3 * p * p])?;
        let tok = self.patch.forward(g, x)?;
        let tok = g.reshape(tok, &[n, t, self.dim])?;

        let pos = self.pos.bind(g);
        let pos = g.reshape(pos, &[1, t, self.dim])?;
        let mut x = g.add_bcast(tok, pos)?;
        for blk in &self.blocks {
            x = blk.forward(g, x, adapters_enabled)?;
        }
        let x = g.reshape(x, &[n, gh, gw, self.dim])?;
        let x = g.permute(x, &[0, 3, 1, 2])?;
        self.neck.forward(g, x)
    }
}

impl Module for ViTMini {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.patch.visit_params(f);
        f(&self.pos);
        for b in &self.blocks {
            b.visit_params(f);
        }
        self.neck.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.patch.visit_params_mut(f);
        f(&mut self.pos);
        for b in &mut self.blocks {
            b.visit_params_mut(f);
        }
        self.neck.visit_params_mut(f);
    }
}
