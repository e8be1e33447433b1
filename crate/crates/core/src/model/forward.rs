//! Forward pass: embeddings, the encoder stack with attention capture, the LM
//! head and the masked-position loss.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, RngCore};

use crate::data_io::FrameFeatures;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters, TokenizedInput};

/// Dropout source for a training pass; `None` means eval mode.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut dyn RngCore,
}

impl Dropout<'_> {
    fn mask(&mut self, rows: usize, cols: usize) -> Option<Array2<f64>> {
        if self.rate <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.rate);
        let rate = self.rate;
        let rng = &mut *self.rng;
        Some(Array2::from_shape_simple_fn((rows, cols), || {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        }))
    }
}

fn maybe_mask(dropout: &mut Option<Dropout<'_>>, rows: usize, cols: usize) -> Option<Array2<f64>> {
    dropout.as_mut().and_then(|d| d.mask(rows, cols))
}

pub(crate) struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub(crate) fn layer_norm(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
    eps: f64,
) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / d;
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let xhat = &centered * &inv_std.view().insert_axis(Axis(1));
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, inv_std })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row softmax of `scores + mask`; entries under `-inf` come out exactly 0.
pub(crate) fn masked_softmax(scores: &Array2<f64>, mask: &Array2<f64>) -> Array2<f64> {
    let mut out = scores + mask;
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = if *v == f64::NEG_INFINITY { 0.0 } else { (*v - max).exp() };
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Per-layer outputs `O_0..O_n` and post-softmax, pre-dropout attention
/// probabilities per layer and head.
#[derive(Debug, Clone)]
pub struct EncoderActivations {
    pub outputs: Vec<Array2<f64>>,
    pub attention: Vec<Vec<Array2<f64>>>,
}

impl EncoderActivations {
    pub fn last_hidden(&self) -> &Array2<f64> {
        self.outputs.last().expect("at least O_0")
    }
}

pub(crate) struct LayerCache {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub attn_drop: Vec<Option<Array2<f64>>>,
    pub ctx: Array2<f64>,
    pub attn_out_drop: Option<Array2<f64>>,
    pub ln1: LnCache,
    pub h1: Array2<f64>,
    pub u: Array2<f64>,
    pub g: Array2<f64>,
    pub ffn_drop: Option<Array2<f64>>,
    pub ln2: LnCache,
}

/// Everything the backward pass needs.
pub struct ForwardPass {
    pub activations: EncoderActivations,
    pub(crate) embed_drop: Option<Array2<f64>>,
    pub(crate) layers: Vec<LayerCache>,
}

/// Sum of token-or-frame, position and segment embeddings.
pub fn embed(
    input: &TokenizedInput,
    frames: Option<&FrameFeatures>,
    params: &Parameters,
) -> Result<Array2<f64>> {
    let n = input.len();
    let d = params.tok_emb.ncols();
    let n_frames = frames.map_or(0, FrameFeatures::len);
    if n_frames != input.frames.len() {
        return Err(Error::Shape(format!(
            "input has {} frame positions but {n_frames} frames were given",
            input.frames.len()
        )));
    }
    if n > params.pos_emb.nrows() {
        return Err(Error::Shape(format!(
            "sequence length {n} exceeds position table {}",
            params.pos_emb.nrows()
        )));
    }
    let mut x = Array2::<f64>::zeros((n, d));
    if let Some(f) = frames {
        if f.dim() != params.frame_w.nrows() {
            return Err(Error::Shape(format!(
                "frame dim {} does not match projection {}",
                f.dim(),
                params.frame_w.nrows()
            )));
        }
        let fm = f.matrix().mapv(f64::from);
        let proj = fm.dot(&params.frame_w) + &params.frame_b;
        x.slice_mut(s![input.frames.clone(), ..]).assign(&proj);
    }
    for p in 0..n {
        let mut row = x.row_mut(p);
        if !input.frames.contains(&p) {
            let id = input.ids[p] as usize;
            if id >= params.tok_emb.nrows() {
                return Err(Error::TokenOutOfRange {
                    id: id as u32,
                    size: params.tok_emb.nrows(),
                });
            }
            row += &params.tok_emb.row(id);
        }
        row += &params.pos_emb.row(p);
        row += &params.seg_emb.row(input.segments[p] as usize);
    }
    Ok(x)
}

fn head_cols(h: usize, dh: usize) -> ndarray::SliceInfo<[ndarray::SliceInfoElem; 2], ndarray::Ix2, ndarray::Ix2> {
    s![.., h * dh..(h + 1) * dh]
}

/// Runs the encoder stack. `dropout` is `Some` only in training mode.
pub fn encoder_forward(
    x: Array2<f64>,
    mask: &Array2<f64>,
    params: &Parameters,
    config: &ModelConfig,
    mut dropout: Option<Dropout<'_>>,
) -> Result<ForwardPass> {
    let n = x.nrows();
    let d = config.hidden;
    if x.ncols() != d || mask.dim() != (n, n) {
        return Err(Error::Shape(format!(
            "encoder input {:?} / mask {:?} inconsistent with hidden {d}",
            x.dim(),
            mask.dim()
        )));
    }
    let heads = config.heads;
    let dh = config.head_dim();
    let scale = config.attention_scale();
    let eps = config.layer_norm_eps;

    let embed_drop = maybe_mask(&mut dropout, n, d);
    let x0 = match &embed_drop {
        Some(m) => &x * m,
        None => x,
    };
    let mut outputs = vec![x0];
    let mut attention = Vec::with_capacity(config.layers);
    let mut caches = Vec::with_capacity(config.layers);

    for lp in &params.layers {
        let xin = outputs.last().unwrap();
        let q = xin.dot(&lp.wq) + &lp.bq;
        let k = xin.dot(&lp.wk) + &lp.bk;
        let v = xin.dot(&lp.wv) + &lp.bv;
        let mut ctx = Array2::<f64>::zeros((n, d));
        let mut probs = Vec::with_capacity(heads);
        let mut attn_drop = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = q.slice(head_cols(h, dh));
            let kh = k.slice(head_cols(h, dh));
            let vh = v.slice(head_cols(h, dh));
            let scores = qh.dot(&kh.t()) * scale;
            let p = masked_softmax(&scores, mask);
            let dm = maybe_mask(&mut dropout, n, n);
            let c = match &dm {
                Some(m) => (&p * m).dot(&vh),
                None => p.dot(&vh),
            };
            ctx.slice_mut(head_cols(h, dh)).assign(&c);
            probs.push(p);
            attn_drop.push(dm);
        }
        let mut attn_out = ctx.dot(&lp.wo) + &lp.bo;
        let attn_out_drop = maybe_mask(&mut dropout, n, d);
        if let Some(m) = &attn_out_drop {
            attn_out *= m;
        }
        let (h1, ln1) = layer_norm(&(xin + &attn_out), &lp.ln1_g, &lp.ln1_b, eps);
        let u = h1.dot(&lp.w1) + &lp.b1;
        let g = u.mapv(gelu);
        let mut ffn = g.dot(&lp.w2) + &lp.b2;
        let ffn_drop = maybe_mask(&mut dropout, n, d);
        if let Some(m) = &ffn_drop {
            ffn *= m;
        }
        let (out, ln2) = layer_norm(&(&h1 + &ffn), &lp.ln2_g, &lp.ln2_b, eps);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite encoder activations".into()));
        }
        outputs.push(out);
        attention.push(probs);
        caches.push(LayerCache {
            q,
            k,
            v,
            attn_drop,
            ctx,
            attn_out_drop,
            ln1,
            h1,
            u,
            g,
            ffn_drop,
            ln2,
        });
    }
    Ok(ForwardPass {
        activations: EncoderActivations { outputs, attention },
        embed_drop,
        layers: caches,
    })
}

pub(crate) struct HeadCache {
    pub rows: Array2<f64>,
    pub z1: Array2<f64>,
    pub ln: LnCache,
    pub normed: Array2<f64>,
}

/// LM head output at the given hidden rows.
pub struct HeadOutput {
    pub logits: Array2<f64>,
    pub(crate) cache: HeadCache,
}

/// `Dense2(LN(GELU(Dense1(h))))`, one logit row per input row.
pub fn lm_head(rows: Array2<f64>, params: &Parameters, config: &ModelConfig) -> HeadOutput {
    let z1 = rows.dot(&params.head_w) + &params.head_b;
    let g = z1.mapv(gelu);
    let (normed, ln) = layer_norm(&g, &params.head_ln_g, &params.head_ln_b, config.layer_norm_eps);
    let logits = match &params.out_w {
        Some(w) => normed.dot(w),
        None => normed.dot(&params.tok_emb.t()),
    } + &params.out_b;
    HeadOutput {
        logits,
        cache: HeadCache {
            rows,
            z1,
            ln,
            normed,
        },
    }
}

fn log_softmax_row(row: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.mapv(|v| v - lse)
}

/// Log-softmax of every row.
pub fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for (mut dst, src) in out.rows_mut().into_iter().zip(logits.rows()) {
        dst.assign(&log_softmax_row(src));
    }
    out
}

/// Mean token cross entropy over masked positions.
pub fn training_loss(logits: &Array2<f64>, targets: &[u32]) -> Result<f64> {
    let (sum, _) = cross_entropy_sum(logits, targets)?;
    Ok(sum / targets.len() as f64)
}

/// Summed cross entropy and its gradient with respect to `logits`.
pub fn cross_entropy_sum(logits: &Array2<f64>, targets: &[u32]) -> Result<(f64, Array2<f64>)> {
    if targets.is_empty() {
        return Err(Error::NothingToPredict);
    }
    if logits.nrows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    let logp = log_softmax(logits);
    let mut grad = logp.mapv(f64::exp);
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let t = t as usize;
        if t >= logits.ncols() {
            return Err(Error::TokenOutOfRange {
                id: t as u32,
                size: logits.ncols(),
            });
        }
        loss -= logp[[r, t]];
        grad[[r, t]] -= 1.0;
    }
    Ok((loss, grad))
}

/// Hidden rows at the masked positions of `input`.
pub fn masked_rows(hidden: &Array2<f64>, input: &TokenizedInput) -> Array2<f64> {
    hidden.select(Axis(0), &input.masked)
}

/// Eval-mode forward through embeddings, encoder and LM head at the masked
/// positions.
pub fn predict(
    input: &TokenizedInput,
    frames: Option<&FrameFeatures>,
    params: &Parameters,
    config: &ModelConfig,
) -> Result<(EncoderActivations, Array2<f64>)> {
    let x = embed(input, frames, params)?;
    let mask = crate::model::build_attention_mask(input);
    let pass = encoder_forward(x, &mask, params, config, None)?;
    let rows = masked_rows(pass.activations.last_hidden(), input);
    let out = lm_head(rows, params, config);
    Ok((pass.activations, out.logits))
}
