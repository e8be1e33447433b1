//! Step-wise mask-predict decoding (greedy and beam) and cover selection by
//! attention argmax over frame positions.

use std::cmp::Ordering;
use std::ops::Range;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::input::{assemble_decode, assemble_with_masks, title_region};
use crate::model::{log_softmax, predict, EncoderActivations, ModelConfig, Parameters, Source, TokenizedInput};
use crate::tokenization::Vocab;

/// Which encoder layer(s) attention is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerPolicy {
    Last,
    Index(usize),
    MeanAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadPolicy {
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionPolicy {
    pub layer: LayerPolicy,
    pub heads: HeadPolicy,
}

impl Default for AttentionPolicy {
    fn default() -> Self {
        AttentionPolicy {
            layer: LayerPolicy::Last,
            heads: HeadPolicy::Mean,
        }
    }
}

impl AttentionPolicy {
    /// Aggregated attention row of query position `row` over all positions.
    pub fn row(&self, acts: &EncoderActivations, row: usize) -> Vec<f64> {
        let layers: Vec<usize> = match self.layer {
            LayerPolicy::Last => vec![acts.attention.len() - 1],
            LayerPolicy::Index(i) => vec![i.min(acts.attention.len() - 1)],
            LayerPolicy::MeanAll => (0..acts.attention.len()).collect(),
        };
        let width = acts.attention[0][0].ncols();
        let mut out = vec![0.0; width];
        for &l in &layers {
            let heads = &acts.attention[l];
            for (k, slot) in out.iter_mut().enumerate() {
                let vals = heads.iter().map(|h| h[[row, k]]);
                *slot += match self.heads {
                    HeadPolicy::Mean => vals.sum::<f64>() / heads.len() as f64,
                    HeadPolicy::Max => vals.fold(0.0, f64::max),
                };
            }
        }
        let n = layers.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Array1<f64>,
    /// Aggregated attention of the `[MASK]` position over the source
    /// positions (`[CLS]`, frames, text, `[SEP]`).
    pub attention: Vec<f64>,
    /// Same aggregation for the `[CLS]` row.
    pub cls_attention: Vec<f64>,
}

/// Logits and source attention at the single trailing `[MASK]`.
pub fn decode_step(
    params: &Parameters,
    config: &ModelConfig,
    vocab: &Vocab,
    input: &TokenizedInput,
    source: &Source<'_>,
    policy: AttentionPolicy,
) -> Result<StepOutput> {
    let mask = vocab.specials().mask;
    let count = input.title.clone().filter(|&p| input.ids[p] == mask).count();
    if count != 1 || input.ids.last() != Some(&mask) || input.title.is_empty() {
        return Err(Error::MaskCount(count));
    }
    let mut single = input.clone();
    single.masked = vec![input.len() - 1];
    let (acts, logits) = predict(&single, source.frames, params, config)?;
    let src = input.source_len();
    let full = policy.row(&acts, input.len() - 1);
    let cls = policy.row(&acts, 0);
    Ok(StepOutput {
        logits: logits.row(0).to_owned(),
        attention: full[..src].to_vec(),
        cls_attention: cls[..src].to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Generated title ids, without the end marker.
    pub tokens: Vec<u32>,
    /// One source-attention vector per generated token.
    pub step_attention: Vec<Vec<f64>>,
    /// Sum of per-step log-probabilities, end marker included.
    pub log_prob: f64,
    pub cls_attention: Vec<f64>,
    pub frames: Range<usize>,
    pub text: Range<usize>,
    pub cover_index: Option<usize>,
}

impl GenerationResult {
    fn finish(mut self) -> Self {
        self.cover_index = select_cover(&self);
        self
    }

    /// Per-frame attention summed over generated tokens.
    pub fn frame_scores(&self) -> Vec<f64> {
        let mut scores = vec![0.0; self.frames.len()];
        for step in &self.step_attention {
            for (s, p) in scores.iter_mut().zip(self.frames.clone()) {
                *s += step[p];
            }
        }
        scores
    }
}

/// Index of the maximum, ties to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Frame with the highest summed attention from generated tokens; with no
/// generated tokens, the frame the `[CLS]` row attends to most.
pub fn select_cover(result: &GenerationResult) -> Option<usize> {
    if result.frames.is_empty() {
        return None;
    }
    if result.step_attention.is_empty() {
        let cls: Vec<f64> = result.frames.clone().map(|p| result.cls_attention[p]).collect();
        return argmax(&cls);
    }
    argmax(&result.frame_scores())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum DecodeMode {
    Greedy,
    Beam { width: usize },
}

impl Default for DecodeMode {
    fn default() -> Self {
        DecodeMode::Beam { width: 5 }
    }
}

/// Decoding over one parameter set. `[MASK]` is never emitted, but reported
/// log-probabilities are taken over the full vocabulary.
#[derive(Clone, Copy)]
pub struct Decoder<'a> {
    pub params: &'a Parameters,
    pub config: &'a ModelConfig,
    pub vocab: &'a Vocab,
    pub policy: AttentionPolicy,
    /// Exponent of the length normalization `score / len^alpha`; 0 disables it.
    pub length_penalty: f64,
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    log_prob: f64,
    attention: Vec<Vec<f64>>,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a Parameters, config: &'a ModelConfig, vocab: &'a Vocab) -> Self {
        Decoder {
            params,
            config,
            vocab,
            policy: AttentionPolicy::default(),
            length_penalty: 0.0,
        }
    }

    pub fn with_policy(mut self, policy: AttentionPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn decode(&self, source: &Source<'_>, mode: DecodeMode) -> Result<GenerationResult> {
        match mode {
            DecodeMode::Greedy => self.greedy(source),
            DecodeMode::Beam { width } => self.beam(source, width),
        }
    }

    fn step(&self, source: &Source<'_>, generated: &[u32]) -> Result<(TokenizedInput, StepOutput)> {
        let input = assemble_decode(source, generated, self.vocab, self.config)?;
        let out = decode_step(self.params, self.config, self.vocab, &input, source, self.policy)?;
        Ok((input, out))
    }

    fn is_end(&self, token: u32) -> bool {
        self.config.title_end_token && token == self.vocab.specials().sep
    }

    pub fn greedy(&self, source: &Source<'_>) -> Result<GenerationResult> {
        let mut tokens = Vec::new();
        let mut attention = Vec::new();
        let mut log_prob = 0.0;
        let mut layout = None;
        let mut cls_attention = Vec::new();
        for _ in 0..self.config.max_title_len {
            let (input, out) = self.step(source, &tokens)?;
            if layout.is_none() {
                layout = Some((input.frames.clone(), input.text.clone()));
                cls_attention = out.cls_attention.clone();
            }
            let logp = log_softmax(&out.logits.insert_axis(ndarray::Axis(0)));
            let row: Vec<f64> = logp.row(0).to_vec();
            let mut choice = row.clone();
            choice[self.vocab.specials().mask as usize] = f64::NEG_INFINITY;
            let best = argmax(&choice).expect("non-empty vocabulary");
            log_prob += row[best];
            if self.is_end(best as u32) {
                break;
            }
            tokens.push(best as u32);
            attention.push(out.attention);
        }
        let (frames, text) = layout.expect("max_title_len >= 1");
        Ok(GenerationResult {
            tokens,
            step_attention: attention,
            log_prob,
            cls_attention,
            frames,
            text,
            cover_index: None,
        }
        .finish())
    }

    fn score(&self, h: &Hypothesis) -> f64 {
        if self.length_penalty == 0.0 {
            h.log_prob
        } else {
            h.log_prob / (h.tokens.len().max(1) as f64).powf(self.length_penalty)
        }
    }

    fn compare(&self, a: &Hypothesis, b: &Hypothesis) -> Ordering {
        // best first; equal scores prefer the lexicographically smaller sequence
        self.score(b)
            .total_cmp(&self.score(a))
            .then_with(|| a.tokens.cmp(&b.tokens))
    }

    /// Beam search over [`decode_step`]. Hypotheses ending in the end marker
    /// or reaching capacity retire into a finished pool.
    pub fn beam(&self, source: &Source<'_>, width: usize) -> Result<GenerationResult> {
        let width = width.max(1);
        let mut live = vec![Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            attention: Vec::new(),
        }];
        let mut finished: Vec<Hypothesis> = Vec::new();
        let mut layout = None;
        let mut cls_attention = Vec::new();

        for depth in 0..self.config.max_title_len {
            // (parent, token, log_prob); only the survivors are materialized
            let mut candidates: Vec<(usize, u32, f64)> = Vec::new();
            let mut step_attention = Vec::with_capacity(live.len());
            for (hi, h) in live.iter().enumerate() {
                let (input, out) = self.step(source, &h.tokens)?;
                if layout.is_none() {
                    layout = Some((input.frames.clone(), input.text.clone()));
                    cls_attention = out.cls_attention.clone();
                }
                let logp = log_softmax(&out.logits.insert_axis(ndarray::Axis(0)));
                let mask = self.vocab.specials().mask as usize;
                for (t, &lp) in logp.row(0).iter().enumerate() {
                    if t != mask {
                        candidates.push((hi, t as u32, h.log_prob + lp));
                    }
                }
                step_attention.push(out.attention);
            }
            let materialize = |&(hi, t, lp): &(usize, u32, f64)| {
                let parent: &Hypothesis = &live[hi];
                let mut tokens = parent.tokens.clone();
                tokens.push(t);
                let mut attention = parent.attention.clone();
                attention.push(step_attention[hi].clone());
                Hypothesis {
                    tokens,
                    log_prob: lp,
                    attention,
                }
            };
            let mut ranked: Vec<Hypothesis> = if self.length_penalty == 0.0 {
                // prefix order equals full-sequence order when parents share a length
                candidates.sort_by(|a, b| {
                    b.2.total_cmp(&a.2)
                        .then_with(|| live[a.0].tokens.cmp(&live[b.0].tokens))
                        .then_with(|| a.1.cmp(&b.1))
                });
                candidates.iter().take(width).map(materialize).collect()
            } else {
                let mut all: Vec<Hypothesis> = candidates.iter().map(materialize).collect();
                all.sort_by(|a, b| self.compare(a, b));
                all.truncate(width);
                all
            };
            ranked.sort_by(|a, b| self.compare(a, b));
            let at_capacity = depth + 1 == self.config.max_title_len;
            live.clear();
            for c in ranked {
                if at_capacity || self.is_end(*c.tokens.last().unwrap()) {
                    finished.push(c);
                } else {
                    live.push(c);
                }
            }
            if live.is_empty() {
                break;
            }
            // scores only decrease without length normalization
            if self.length_penalty == 0.0 {
                let best_done = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
                let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
                if best_done > best_live {
                    break;
                }
            }
        }
        finished.extend(live);
        finished.sort_by(|a, b| self.compare(a, b));
        let mut best = finished.into_iter().next().expect("at least one hypothesis");
        if best.tokens.last().is_some_and(|&t| self.is_end(t)) {
            best.tokens.pop();
            best.attention.pop();
        }
        let (frames, text) = layout.expect("max_title_len >= 1");
        Ok(GenerationResult {
            tokens: best.tokens,
            step_attention: best.attention,
            log_prob: best.log_prob,
            cls_attention,
            frames,
            text,
            cover_index: None,
        }
        .finish())
    }

    /// Attention recorded while feeding the gold title one position at a
    /// time, as if it had been generated.
    pub fn teacher_forced(&self, source: &Source<'_>, title: &str) -> Result<GenerationResult> {
        let region = title_region(self.vocab, self.config, title);
        let body: Vec<u32> = region
            .iter()
            .copied()
            .filter(|&t| !self.is_end(t))
            .collect();
        let mut attention = Vec::with_capacity(body.len());
        let mut log_prob = 0.0;
        let mut layout = None;
        let mut cls_attention = Vec::new();
        for j in 0..region.len() {
            let (input, out) = self.step(source, &region[..j])?;
            if layout.is_none() {
                layout = Some((input.frames.clone(), input.text.clone()));
                cls_attention = out.cls_attention.clone();
            }
            let logp = log_softmax(&out.logits.insert_axis(ndarray::Axis(0)));
            log_prob += logp[[0, region[j] as usize]];
            if j < body.len() {
                attention.push(out.attention);
            }
        }
        let (frames, text) = match layout {
            Some(l) => l,
            None => {
                let input = assemble_with_masks(source, "", self.vocab, self.config, &[])?;
                (input.frames, input.text)
            }
        };
        Ok(GenerationResult {
            tokens: body,
            step_attention: attention,
            log_prob,
            cls_attention,
            frames,
            text,
            cover_index: None,
        }
        .finish())
    }
}
