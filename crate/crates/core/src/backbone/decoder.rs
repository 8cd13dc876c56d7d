//! Upsampling mask decoder with prompt cross-attention and per-scale fusion
//! slots.
//!
//! The decoder ingests the global feature at H/16, optionally deep-fuses it
//! with the aligned Feature 4, attends from image tokens to the two prompt
//! tokens, then runs four nearest-2x + conv + ReLU stages with the channel
//! plan `c -> c -> c/2 -> c/4 -> c/8` while fusing Features 3/2/1 at the
//! stages that reach H/4, H/2 and H. A 1x1 head emits one logit channel.

use rand_chacha::ChaCha8Rng;

use crate::cbrnet::FeaturePyramid;
use crate::error::{Error, Result};
use crate::fusion::{AtteFfb, FusionMode};
use crate::nn::{Conv2d, Init, LayerNorm, Linear, Module, Param};
use crate::tensor::{Graph, NodeId};

/// Per-mode fusion machinery owned by the decoder.
#[derive(Clone, Debug)]
pub enum FusionSites {
    /// One independent attention-fusion block per site: deep (H/16) plus the
    /// three skip scales, each with its own bias.
    AtteFfb { deep: AtteFfb, skips: Vec<AtteFfb> },
    /// Channel-aligning 1x1 convs for the three skip scales; the deep merge
    /// is a plain elementwise add (channels already match).
    Add { aligns: Vec<Conv2d> },
    /// No fusion: the pyramid is ignored entirely.
    None,
}

impl FusionSites {
    pub fn mode(&self) -> FusionMode {
        match self {
            FusionSites::AtteFfb { .. } => FusionMode::AtteFfb,
            FusionSites::Add { .. } => FusionMode::Add,
            FusionSites::None => FusionMode::None,
        }
    }

    /// Trained bias values per fusion site (AtteFfb mode only).
    pub fn bias_values(&self) -> Vec<(String, f64)> {
        match self {
            FusionSites::AtteFfb { deep, skips } => {
                let mut out = vec![("deep".to_string(), deep.bias_value())];
                for (i, s) in skips.iter().enumerate() {
                    out.push((format!("f{}", 3 - i), s.bias_value()));
                }
                out
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub cross_ln: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ups: Vec<Conv2d>,
    pub head: Conv2d,
    pub fusion: FusionSites,
    c: usize,
    prompt_dim: usize,
}

impl MaskDecoder {
    /// `c` is the decoder entry width (= global feature channels, divisible
    /// by 8); `prompt_dim` the prompt token width; `cbr_width` the
    /// CBR branch width used to size the skip alignments.
    pub fn new(
        name: &str,
        c: usize,
        prompt_dim: usize,
        fusion_mode: FusionMode,
        cbr_width: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if c % 8 != 0 {
            return Err(Error::config(format!("decoder width {c} must be divisible by 8")));
        }
        // stage output channels at H/8, H/4, H/2, H
        let widths = [c, c, c / 2, c / 4, c / 8];
        let mut ups = Vec::with_capacity(4);
        for i in 0..4 {
            ups.push(Conv2d::new(
                &format!("{name}.up{}.conv", i + 1),
                widths[i],
                widths[i + 1],
                3,
                1,
                1,
                Init::He,
                rng,
            ));
        }
        let fusion = match fusion_mode {
            FusionMode::None => FusionSites::None,
            mode => {
                let cw = cbr_width.ok_or_else(|| {
                    Error::config("fusion enabled but no branch width given".to_string())
                })?;
                // pyramid channels paired with the decoder widths at H/4, H/2, H
                let pairs = [(cw, widths[2]), (cw / 2, widths[3]), (cw / 4, widths[4])];
                match mode {
                    FusionMode::AtteFfb => FusionSites::AtteFfb {
                        deep: AtteFfb::new(&format!("{name}.fusion.deep"), cw, c, rng),
                        skips: pairs
                            .iter()
                            .enumerate()
                            .map(|(i, &(c1, c2))| {
                                AtteFfb::new(&format!("{name}.fusion.f{}", 3 - i), c1, c2, rng)
                            })
                            .collect(),
                    },
                    FusionMode::Add => FusionSites::Add {
                        aligns: pairs
                            .iter()
                            .enumerate()
                            .map(|(i, &(c1, c2))| {
                                Conv2d::new(
                                    &format!("{name}.fusion.f{}.align", 3 - i),
                                    c1,
                                    c2,
                                    1,
                                    1,
                                    0,
                                    Init::Scaled,
                                    rng,
                                )
                            })
                            .collect(),
                    },
                    FusionMode::None => unreachable!(),
                }
            }
        };
        Ok(MaskDecoder {
            cross_ln: LayerNorm::new(&format!("{name}.cross.ln"), c),
            wq: Linear::new(&format!("{name}.cross.wq"), c, c, Init::Scaled, rng),
            wk: Linear::new(&format!("{name}.cross.wk"), prompt_dim, c, Init::Scaled, rng),
            wv: Linear::new(&format!("{name}.cross.wv"), prompt_dim, c, Init::Scaled, rng),
            wo: Linear::new(&format!("{name}.cross.wo"), c, c, Init::Scaled, rng),
            head: Conv2d::new(&format!("{name}.head"), c / 8, 1, 1, 1, 0, Init::Scaled, rng),
            ups,
            fusion,
            c,
            prompt_dim,
        })
    }

    /// Single-head cross-attention: image tokens query the two prompt tokens.
    fn cross_attention(&self, g: &mut Graph, feat: NodeId, prompt: NodeId) -> Result<NodeId> {
        let s = g.shape(feat).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let t = h * w;
        let tokens = g.permute(feat, &[0, 2, 3, 1])?;
        let tokens = g.reshape(tokens, &[n, t, c])?;

        let normed = self.cross_ln.forward(g, tokens)?;
        let qf = g.reshape(normed, &[n * t, c])?;
        let q = self.wq.forward(g, qf)?;
        let q = g.reshape(q, &[n, t, c])?;

        let pf = g.reshape(prompt, &[n * 2, self.prompt_dim])?;
        let k = self.wk.forward(g, pf)?;
        let k = g.reshape(k, &[n, 2, c])?;
        let v = self.wv.forward(g, pf)?;
        let v = g.reshape(v, &[n, 2, c])?;

        let kt = g.permute(k, &[0, 2, 1])?;
        let scores = g.bmm(q, kt)?;
        let scores = g.affine(scores, 1.0 / (c as f64).sqrt(), 0.0);
        let attn = g.softmax_lastdim(scores)?;
        let ctx = g.bmm(attn, v)?;
        let ctx = g.reshape(ctx, &[n * t, c])?;
        let out = self.wo.forward(g, ctx)?;
        let out = g.reshape(out, &[n, t, c])?;

        let updated = g.add(tokens, out)?;
        let updated = g.reshape(updated, &[n, h, w, c])?;
        g.permute(updated, &[0, 3, 1, 2])
    }

    fn fuse_skip(&self, g: &mut Graph, site: usize, x: NodeId, skip: NodeId) -> Result<NodeId> {
        match &self.fusion {
            FusionSites::AtteFfb { skips, .. } => skips[site].fuse(g, x, skip),
            FusionSites::Add { aligns } => {
                let aligned = aligns[site].forward(g, skip)?;
                g.add(x, aligned)
            }
            FusionSites::None => Ok(x),
        }
    }

    /// Decode logits `[N,1,H,W]`. `f4_aligned` and `pyramid` are required
    /// whenever fusion is enabled and ignored entirely when it is `None`.
    pub fn forward(
        &self,
        g: &mut Graph,
        global_feat: NodeId,
        f4_aligned: Option<NodeId>,
        pyramid: Option<&FeaturePyramid>,
        prompt: NodeId,
    ) -> Result<NodeId> {
        let s = g.shape(global_feat);
        if s.len() != 4 || s[1] != self.c {
            return Err(Error::dimension(format!(
                "decoder expects [N,{},h,w] global feature, got {s:?}",
                self.c
            )));
        }
        let sp = g.shape(prompt);
        if sp != [s[0], 2, self.prompt_dim] {
            return Err(Error::dimension(format!(
                "prompt shape {sp:?}, expected [{},2,{}]",
                s[0], self.prompt_dim
            )));
        }

        let mut x = match &self.fusion {
            FusionSites::None => global_feat,
            sites => {
                let f4 = f4_aligned.ok_or_else(|| {
                    Error::contract("fusion enabled but aligned Feature 4 missing".to_string())
                })?;
                match sites {
                    FusionSites::AtteFfb { deep, .. } => deep.fuse(g, global_feat, f4)?,
                    FusionSites::Add { .. } => g.add(global_feat, f4)?,
                    FusionSites::None => unreachable!(),
                }
            }
        };

        x = self.cross_attention(g, x, prompt)?;

        let skips: Option<[NodeId; 3]> = match (&self.fusion, pyramid) {
            (FusionSites::None, _) => None,
            (_, Some(p)) => Some([p.f3, p.f2, p.f1]),
            (_, None) => {
                return Err(Error::contract("fusion enabled but pyramid missing".to_string()))
            }
        };

        for (i, conv) in self.ups.iter().enumerate() {
            let up = g.upsample_nearest2x(x)?;
            let c = conv.forward(g, up)?;
            x = g.relu(c);
            // stages 2..4 land on H/4, H/2, H where the skips fuse
            if i >= 1 {
                if let Some(sk) = &skips {
                    x = self.fuse_skip(g, i - 1, x, sk[i - 1])?;
                }
            }
        }
        self.head.forward(g, x)
    }
}

impl Module for MaskDecoder {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.cross_ln.visit_params(f);
        self.wq.visit_params(f);
        self.wk.visit_params(f);
        self.wv.visit_params(f);
        self.wo.visit_params(f);
        for u in &self.ups {
            u.visit_params(f);
        }
        self.head.visit_params(f);
        match &self.fusion {
            FusionSites::AtteFfb { deep, skips } => {
                deep.visit_params(f);
                for s in skips {
                    s.visit_params(f);
                }
            }
            FusionSites::Add { aligns } => {
                for a in aligns {
                    a.visit_params(f);
                }
            }
            FusionSites::None => {}
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.cross_ln.visit_params_mut(f);
        self.wq.visit_params_mut(f);
        self.wk.visit_params_mut(f);
        self.wv.visit_params_mut(f);
        self.wo.visit_params_mut(f);
        for u in &mut self.ups {
            u.visit_params_mut(f);
        }
        self.head.visit_params_mut(f);
        match &mut self.fusion {
            FusionSites::AtteFfb { deep, skips } => {
                deep.visit_params_mut(f);
                for s in skips {
                    s.visit_params_mut(f);
                }
            }
            FusionSites::Add { aligns } => {
                for a in aligns {
                    a.visit_params_mut(f);
                }
            }
            FusionSites::None => {}
        }
    }
}
