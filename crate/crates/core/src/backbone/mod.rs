//! Image encoder, box-prompt encoder, and upsampling mask decoder.

mod decoder;
mod prompt;
mod vit;

pub use decoder::MaskDecoder;
pub use prompt::{BoxPrompt, PromptEncoder};
pub use vit::ViTMini;

/// Patch size shared by the encoder and every /16 resolution contract.
pub const PATCH_SIZE: usize = 16;
