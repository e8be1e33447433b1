//! The multimodal title generator: a post-LN transformer encoder over
//! `[CLS] frames text [SEP] title`, with frame positions embedded by a linear
//! projection of their features and an LM head at `[MASK]` positions.

pub mod backward;
pub mod checkpoint;
mod config;
pub mod forward;
pub mod gradcheck;
pub mod input;
pub mod optim;
mod params;
pub mod train;

use ndarray::Array2;

pub use config::ModelConfig;
pub use forward::{
    embed, encoder_forward, lm_head, log_softmax, predict, training_loss, Dropout,
    EncoderActivations, ForwardPass,
};
pub use input::{build_attention_mask, Ablation, Source, TokenizedInput};
pub use params::{LayerParams, Parameters};

use crate::data_io::FrameFeatures;
use crate::error::Result;

/// Forward and backward for one input. Accumulates `scale * d(sum CE)/dθ`
/// into `grads` and returns the summed (unscaled) cross entropy.
pub fn accumulate_gradients(
    input: &TokenizedInput,
    frames: Option<&FrameFeatures>,
    params: &Parameters,
    config: &ModelConfig,
    dropout: Option<Dropout<'_>>,
    scale: f64,
    grads: &mut Parameters,
) -> Result<f64> {
    let x = embed(input, frames, params)?;
    let mask = build_attention_mask(input);
    let pass = encoder_forward(x, &mask, params, config, dropout)?;
    let hidden = pass.activations.last_hidden();
    let head = lm_head(forward::masked_rows(hidden, input), params, config);
    let (loss, mut dlogits) = forward::cross_entropy_sum(&head.logits, &input.targets)?;
    dlogits *= scale;
    let d_rows = backward::lm_head_backward(&head, &dlogits, params, grads);
    let mut d_hidden = Array2::<f64>::zeros(hidden.raw_dim());
    for (r, &p) in input.masked.iter().enumerate() {
        let mut row = d_hidden.row_mut(p);
        row += &d_rows.row(r);
    }
    let dx = backward::encoder_backward(&pass, d_hidden, params, config, grads);
    backward::embed_backward(input, frames, &dx, grads);
    Ok(loss)
}

/// Summed cross entropy without gradients (eval mode).
pub fn loss_sum(
    input: &TokenizedInput,
    frames: Option<&FrameFeatures>,
    params: &Parameters,
    config: &ModelConfig,
    dropout: Option<Dropout<'_>>,
) -> Result<f64> {
    let x = embed(input, frames, params)?;
    let mask = build_attention_mask(input);
    let pass = encoder_forward(x, &mask, params, config, dropout)?;
    let head = lm_head(forward::masked_rows(pass.activations.last_hidden(), input), params, config);
    Ok(forward::cross_entropy_sum(&head.logits, &input.targets)?.0)
}
