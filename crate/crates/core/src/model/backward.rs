//! Reverse-mode gradients for the forward pass in [`super::forward`].

use ndarray::{s, Array1, Array2, Axis};

use crate::data_io::FrameFeatures;
use crate::model::forward::{gelu_grad, HeadOutput, LnCache};
use crate::model::{ForwardPass, ModelConfig, Parameters, TokenizedInput};

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    *dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let d = dy.ncols() as f64;
    let sum_dxhat = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
    let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
    let inner = &dxhat * d - &sum_dxhat - &(&cache.xhat * &sum_dxhat_xhat);
    inner * &(cache.inv_std.view().insert_axis(Axis(1)).mapv(|v| v / d))
}

/// Backpropagates `dlogits` through the LM head, accumulating into `grads`.
/// Returns the gradient with respect to the head's input rows.
pub fn lm_head_backward(
    head: &HeadOutput,
    dlogits: &Array2<f64>,
    params: &Parameters,
    grads: &mut Parameters,
) -> Array2<f64> {
    let c = &head.cache;
    grads.out_b += &dlogits.sum_axis(Axis(0));
    let dnormed = match (&params.out_w, &mut grads.out_w) {
        (Some(w), Some(gw)) => {
            *gw += &c.normed.t().dot(dlogits);
            dlogits.dot(&w.t())
        }
        _ => {
            grads.tok_emb += &dlogits.t().dot(&c.normed);
            dlogits.dot(&params.tok_emb)
        }
    };
    let dg = layer_norm_backward(
        &dnormed,
        &c.ln,
        &params.head_ln_g,
        &mut grads.head_ln_g,
        &mut grads.head_ln_b,
    );
    let dz1 = dg * &c.z1.mapv(gelu_grad);
    grads.head_w += &c.rows.t().dot(&dz1);
    grads.head_b += &dz1.sum_axis(Axis(0));
    dz1.dot(&params.head_w.t())
}

/// Backpropagates through the encoder stack. `d_out` is the gradient with
/// respect to the final layer output; returns the gradient with respect to
/// the (pre-dropout) embedding sum.
pub fn encoder_backward(
    pass: &ForwardPass,
    mut d_out: Array2<f64>,
    params: &Parameters,
    config: &ModelConfig,
    grads: &mut Parameters,
) -> Array2<f64> {
    let heads = config.heads;
    let dh = config.head_dim();
    let scale = config.attention_scale();
    let acts = &pass.activations;

    for (i, (lp, c)) in params.layers.iter().zip(&pass.layers).enumerate().rev() {
        let gl = &mut grads.layers[i];
        let xin = &acts.outputs[i];

        // out = LN2(h1 + ffn)
        let d_sum2 = layer_norm_backward(&d_out, &c.ln2, &lp.ln2_g, &mut gl.ln2_g, &mut gl.ln2_b);
        let mut d_ffn = d_sum2.clone();
        if let Some(m) = &c.ffn_drop {
            d_ffn *= m;
        }
        gl.w2 += &c.g.t().dot(&d_ffn);
        gl.b2 += &d_ffn.sum_axis(Axis(0));
        let dg = d_ffn.dot(&lp.w2.t());
        let du = dg * &c.u.mapv(gelu_grad);
        gl.w1 += &c.h1.t().dot(&du);
        gl.b1 += &du.sum_axis(Axis(0));
        let dh1 = d_sum2 + du.dot(&lp.w1.t());

        // h1 = LN1(xin + attn_out)
        let d_sum1 = layer_norm_backward(&dh1, &c.ln1, &lp.ln1_g, &mut gl.ln1_g, &mut gl.ln1_b);
        let mut d_attn = d_sum1.clone();
        if let Some(m) = &c.attn_out_drop {
            d_attn *= m;
        }
        gl.wo += &c.ctx.t().dot(&d_attn);
        gl.bo += &d_attn.sum_axis(Axis(0));
        let d_ctx = d_attn.dot(&lp.wo.t());

        let mut dq = Array2::<f64>::zeros(c.q.raw_dim());
        let mut dk = Array2::<f64>::zeros(c.k.raw_dim());
        let mut dv = Array2::<f64>::zeros(c.v.raw_dim());
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &acts.attention[i][h];
            let d_ctx_h = d_ctx.slice(cols);
            let (pd, d_p) = match &c.attn_drop[h] {
                Some(m) => {
                    let pd = p * m;
                    let d_pd = d_ctx_h.dot(&c.v.slice(cols).t());
                    (pd, d_pd * m)
                }
                None => (p.clone(), d_ctx_h.dot(&c.v.slice(cols).t())),
            };
            dv.slice_mut(cols).assign(&pd.t().dot(&d_ctx_h));
            // softmax: dS = P * (dP - rowsum(dP * P))
            let row_dot = (&d_p * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = (d_p - &row_dot) * p * scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        gl.wq += &xin.t().dot(&dq);
        gl.bq += &dq.sum_axis(Axis(0));
        gl.wk += &xin.t().dot(&dk);
        gl.bk += &dk.sum_axis(Axis(0));
        gl.wv += &xin.t().dot(&dv);
        gl.bv += &dv.sum_axis(Axis(0));
        d_out = d_sum1 + dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
    }
    if let Some(m) = &pass.embed_drop {
        d_out *= m;
    }
    d_out
}

/// Scatters the embedding-sum gradient into the embedding tables.
pub fn embed_backward(
    input: &TokenizedInput,
    frames: Option<&FrameFeatures>,
    dx: &Array2<f64>,
    grads: &mut Parameters,
) {
    for p in 0..input.len() {
        let row = dx.row(p);
        if !input.frames.contains(&p) {
            let mut t = grads.tok_emb.row_mut(input.ids[p] as usize);
            t += &row;
        }
        let mut pos = grads.pos_emb.row_mut(p);
        pos += &row;
        let mut seg = grads.seg_emb.row_mut(input.segments[p] as usize);
        seg += &row;
    }
    if let Some(f) = frames {
        let d_frames = dx.slice(s![input.frames.clone(), ..]);
        let fm = f.matrix().mapv(f64::from);
        grads.frame_w += &fm.t().dot(&d_frames);
        grads.frame_b += &d_frames.sum_axis(Axis(0));
    }
}
