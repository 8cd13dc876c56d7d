//! Full segmentation model: parallel CBR branch + ViT encoder, box-prompt
//! encoder, and the fusing mask decoder.

use crate::backbone::{BoxPrompt, MaskDecoder, PromptEncoder, ViTMini, PATCH_SIZE};
use crate::cbrnet::{CbrNet, FeaturePyramid};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::rng::{rng_for, TAG_INIT};
use crate::tensor::{Graph, NodeId, Tensor};

pub struct SegModel {
    pub config: ModelConfig,
    pub cbrnet: Option<CbrNet>,
    pub vit: ViTMini,
    pub prompt: PromptEncoder,
    pub decoder: MaskDecoder,
    h: usize,
    w: usize,
}

/// Intermediate activations exposed for tests and diagnostics.
pub struct ForwardTrace {
    pub pyramid: Option<FeaturePyramid>,
    pub f4_aligned: Option<NodeId>,
    pub global_feat: NodeId,
    pub logits: NodeId,
}

impl SegModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        Self::with_input_size(config, config.s, config.s)
    }

    /// Build for a rectangular input; `config.s` is ignored for sizing but
    /// every other knob applies.
    pub fn with_input_size(config: &ModelConfig, h: usize, w: usize) -> Result<Self> {
        config.validate()?;
        if h % PATCH_SIZE != 0 || w % PATCH_SIZE != 0 || h < 16 || w < 16 {
            return Err(Error::config(format!(
                "input {h}x{w} must be >=16 and divisible by {PATCH_SIZE}"
            )));
        }
        let mut rng = rng_for(config.seed, &[TAG_INIT]);
        let cbrnet = if config.cbrnet_enabled {
            Some(CbrNet::new("cbrnet", config.c, &mut rng)?)
        } else {
            None
        };
        let vit = ViTMini::new(
            "vit",
            h,
            w,
            config.d,
            config.c,
            config.l,
            config.heads,
            config.adapter_enabled,
            &mut rng,
        )?;
        let prompt = PromptEncoder::new("prompt", config.d, &mut rng)?;
        let decoder = MaskDecoder::new(
            "decoder",
            config.c,
            config.d,
            config.fusion_mode,
            cbrnet.as_ref().map(|c| c.width()),
            &mut rng,
        )?;
        let mut model = SegModel {
            config: config.clone(),
            cbrnet,
            vit,
            prompt,
            decoder,
            h,
            w,
        };
        if config.freeze_backbone {
            model.freeze_vit_trunk();
        }
        Ok(model)
    }

    /// Freeze the ViT trunk, keeping adapters trainable (the lightweight
    /// fine-tuning regime).
    pub fn freeze_vit_trunk(&mut self) {
        self.vit.visit_params_mut(&mut |p: &mut Param| {
            if !p.name.contains(".adapter.") {
                p.set_trainable(false);
            }
        });
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn forward(&self, g: &mut Graph, images: &Tensor, boxes: &[BoxPrompt]) -> Result<NodeId> {
        Ok(self
            .forward_traced(g, images, boxes, self.config.adapter_enabled)?
            .logits)
    }

    /// Forward with an explicit adapter switch and full trace.
    pub fn forward_traced(
        &self,
        g: &mut Graph,
        images: &Tensor,
        boxes: &[BoxPrompt],
        adapters_enabled: bool,
    ) -> Result<ForwardTrace> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.h || shape[3] != self.w {
            return Err(Error::dimension(format!(
                "model expects [N,3,{},{}], got {shape:?}",
                self.h, self.w
            )));
        }
        if boxes.len() != shape[0] {
            return Err(Error::dimension(format!(
                "{} boxes for batch of {}",
                boxes.len(),
                shape[0]
            )));
        }
        let img = g.leaf(images.clone());

        let (pyramid, f4_aligned) = match &self.cbrnet {
            Some(cbr) => {
                let p = cbr.forward(g, img)?;
                let a = cbr.align_feature4(g, p.f4)?;
                (Some(p), Some(a))
            }
            None => (None, None),
        };
        let global_feat = self.vit.encode(g, img, adapters_enabled)?;
        let prompt = self.prompt.embed_boxes(g, boxes, self.w, self.h)?;
        let logits = self
            .decoder
            .forward(g, global_feat, f4_aligned, pyramid.as_ref(), prompt)?;
        Ok(ForwardTrace {
            pyramid,
            f4_aligned,
            global_feat,
            logits,
        })
    }
}

impl Module for SegModel {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        if let Some(c) = &self.cbrnet {
            c.visit_params(f);
        }
        self.vit.visit_params(f);
        self.prompt.visit_params(f);
        self.decoder.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(c) = &mut self.cbrnet {
            c.visit_params_mut(f);
        }
        self.vit.visit_params_mut(f);
        self.prompt.visit_params_mut(f);
        self.decoder.visit_params_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionMode;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            s: 32,
            c: 16,
            d: 32,
            l: 2,
            heads: 4,
            ..Default::default()
        }
    }

    fn test_image(n: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[n, 3, h, w], |i| ((i * 31 % 97) as f64) / 97.0)
    }

    #[test]
    fn logits_shape_matches_input() {
        let model = SegModel::new(&tiny_config()).unwrap();
        let mut g = Graph::new();
        let img = test_image(2, 32, 32);
        let boxes = vec![BoxPrompt::new(4, 4, 20, 24); 2];
        let logits = model.forward(&mut g, &img, &boxes).unwrap();
        assert_eq!(g.shape(logits), &[2, 1, 32, 32]);
    }

    #[test]
    fn fusion_none_never_builds_branch() {
        let cfg = ModelConfig {
            cbrnet_enabled: false,
            fusion_mode: FusionMode::None,
            ..tiny_config()
        };
        let model = SegModel::new(&cfg).unwrap();
        assert!(model.cbrnet.is_none());
        let mut g = Graph::new();
        let img = test_image(1, 32, 32);
        let logits = model.forward(&mut g, &img, &[BoxPrompt::new(0, 0, 32, 32)]).unwrap();
        assert_eq!(g.shape(logits), &[1, 1, 32, 32]);
    }

    #[test]
    fn distinct_boxes_change_logits() {
        let model = SegModel::new(&tiny_config()).unwrap();
        let img = test_image(1, 32, 32);
        let run = |b: BoxPrompt| {
            let mut g = Graph::new();
            let l = model.forward(&mut g, &img, &[b]).unwrap();
            g.data(l).to_vec()
        };
        let a = run(BoxPrompt::new(2, 2, 12, 12));
        let b = run(BoxPrompt::new(14, 14, 30, 30));
        let max_delta = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_delta > 0.0, "box prompt must influence the logits");
    }

    #[test]
    fn freezing_trunk_keeps_adapters_trainable() {
        let mut cfg = tiny_config();
        cfg.freeze_backbone = true;
        let model = SegModel::new(&cfg).unwrap();
        let mut frozen = 0;
        let mut adapter_trainable = 0;
        model.vit.visit_params(&mut |p: &Param| {
            if p.name.contains(".adapter.") {
                assert!(p.trainable());
                adapter_trainable += 1;
            } else {
                assert!(!p.trainable());
                frozen += 1;
            }
        });
        assert!(frozen > 0 && adapter_trainable > 0);
    }
}
