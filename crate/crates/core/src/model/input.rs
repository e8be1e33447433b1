//! Input layout: `[CLS] frames text [SEP] title`, and the unified
//! source/target attention mask.

use std::ops::Range;

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::data_io::{FrameFeatures, Sample};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tokenization::Vocab;

/// Input-span removal used for modality ablations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_text: bool,
    pub no_visual: bool,
}

impl Ablation {
    pub fn validate(&self) -> Result<()> {
        if self.no_text && self.no_visual {
            return Err(Error::Config(
                "--no-text and --no-visual together leave nothing to attend".into(),
            ));
        }
        Ok(())
    }
}

/// Source side of one sample: encoded text and the frames that fill the
/// virtual-token positions.
#[derive(Debug, Clone)]
pub struct Source<'a> {
    pub text_ids: Vec<u32>,
    pub frames: Option<&'a FrameFeatures>,
}

impl<'a> Source<'a> {
    pub fn from_sample(
        sample: &'a Sample,
        vocab: &Vocab,
        config: &ModelConfig,
        ablation: Ablation,
    ) -> Self {
        let text_ids = if ablation.no_text {
            Vec::new()
        } else {
            vocab.encode(&sample.text(&config.text_separator))
        };
        let frames = (!ablation.no_visual).then_some(&sample.frames);
        Source { text_ids, frames }
    }

    pub fn n_frames(&self) -> usize {
        self.frames.map_or(0, FrameFeatures::len)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedInput {
    pub ids: Vec<u32>,
    /// 0 for `[CLS]`, frames, text and `[SEP]`; 1 for the title region.
    pub segments: Vec<u8>,
    pub frames: Range<usize>,
    pub text: Range<usize>,
    pub title: Range<usize>,
    /// Positions holding `[MASK]`, ascending.
    pub masked: Vec<usize>,
    /// Gold ids at `masked` (empty when decoding).
    pub targets: Vec<u32>,
}

impl TokenizedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of source positions: `[CLS]`, frames, text and `[SEP]`.
    pub fn source_len(&self) -> usize {
        self.title.start
    }

    pub fn is_source(&self, pos: usize) -> bool {
        pos < self.title.start
    }
}

/// Text tokens that fit next to `n_frames` frames and a full title region.
pub fn text_budget(config: &ModelConfig, n_frames: usize) -> Result<usize> {
    let fixed = 2 + n_frames + config.max_title_len;
    if fixed > config.max_len {
        return Err(Error::Shape(format!(
            "{n_frames} frames plus a {}-token title region exceed max_len {}",
            config.max_title_len, config.max_len
        )));
    }
    Ok(config.max_len - fixed)
}

/// Lays out `[CLS] frames text [SEP] title_region`, truncating the text from
/// the right to the budget.
pub fn layout(
    vocab: &Vocab,
    config: &ModelConfig,
    n_frames: usize,
    text_ids: &[u32],
    title_region: &[u32],
) -> Result<TokenizedInput> {
    if title_region.len() > config.max_title_len {
        return Err(Error::Shape(format!(
            "title region of {} exceeds max_title_len {}",
            title_region.len(),
            config.max_title_len
        )));
    }
    let budget = text_budget(config, n_frames)?;
    let text_ids = &text_ids[..text_ids.len().min(budget)];
    let sp = vocab.specials();

    let n = 2 + n_frames + text_ids.len() + title_region.len();
    let mut ids = Vec::with_capacity(n);
    ids.push(sp.cls);
    ids.extend(std::iter::repeat_n(sp.pad, n_frames));
    ids.extend_from_slice(text_ids);
    ids.push(sp.sep);
    let title_start = ids.len();
    ids.extend_from_slice(title_region);

    let mut segments = vec![0u8; title_start];
    segments.resize(n, 1);

    let frames = 1..1 + n_frames;
    let text = frames.end..frames.end + text_ids.len();
    let masked = (title_start..n).filter(|&p| ids[p] == sp.mask).collect();
    Ok(TokenizedInput {
        ids,
        segments,
        frames,
        text,
        title: title_start..n,
        masked,
        targets: Vec::new(),
    })
}

/// Number of title positions masked in training: `ceil(fraction * m)`,
/// at least one, capped by `max_masked`.
pub fn masked_count(config: &ModelConfig, title_len: usize) -> usize {
    if title_len == 0 {
        return 0;
    }
    let raw = (config.mask_fraction * title_len as f64 - 1e-9).ceil() as usize;
    raw.clamp(1, config.max_masked).min(title_len)
}

/// Gold title region: title tokens truncated to capacity, then the end marker.
pub fn title_region(vocab: &Vocab, config: &ModelConfig, title: &str) -> Vec<u32> {
    let mut ids = vocab.encode(title);
    let cap = config.max_title_len - usize::from(config.title_end_token);
    if ids.len() > cap {
        log::warn!("title truncated from {} to {cap} tokens", ids.len());
        ids.truncate(cap);
    }
    if config.title_end_token {
        ids.push(vocab.specials().sep);
    }
    ids
}

/// Training input: a seeded random subset of title positions replaced by `[MASK]`.
pub fn assemble_train<R: Rng + ?Sized>(
    source: &Source<'_>,
    title: &str,
    vocab: &Vocab,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<TokenizedInput> {
    let region = title_region(vocab, config, title);
    let mut input = layout(vocab, config, source.n_frames(), &source.text_ids, &region)?;
    let m = input.title.len();
    let mut picks = sample_indices(rng, m, masked_count(config, m)).into_vec();
    picks.sort_unstable();
    let mask = vocab.specials().mask;
    input.masked = picks.iter().map(|&i| input.title.start + i).collect();
    input.targets = input.masked.iter().map(|&p| input.ids[p]).collect();
    for &p in &input.masked {
        input.ids[p] = mask;
    }
    Ok(input)
}

/// Training input with every title position masked in turn is too costly;
/// this variant masks exactly the given title offsets (used for deterministic
/// validation loss and teacher-forced attention).
pub fn assemble_with_masks(
    source: &Source<'_>,
    title: &str,
    vocab: &Vocab,
    config: &ModelConfig,
    offsets: &[usize],
) -> Result<TokenizedInput> {
    let region = title_region(vocab, config, title);
    let mut input = layout(vocab, config, source.n_frames(), &source.text_ids, &region)?;
    let mask = vocab.specials().mask;
    let mut offsets: Vec<usize> = offsets
        .iter()
        .copied()
        .filter(|&o| o < input.title.len())
        .collect();
    offsets.sort_unstable();
    offsets.dedup();
    input.masked = offsets.iter().map(|&o| input.title.start + o).collect();
    input.targets = input.masked.iter().map(|&p| input.ids[p]).collect();
    for &p in &input.masked {
        input.ids[p] = mask;
    }
    Ok(input)
}

/// Decoding input: generated-so-far tokens followed by one `[MASK]`.
pub fn assemble_decode(
    source: &Source<'_>,
    generated: &[u32],
    vocab: &Vocab,
    config: &ModelConfig,
) -> Result<TokenizedInput> {
    let mut region = generated.to_vec();
    region.push(vocab.specials().mask);
    layout(vocab, config, source.n_frames(), &source.text_ids, &region)
}

/// Additive mask over `{0, -inf}`: source positions see every source
/// position and no title position; title position `q` sees every source
/// position and title positions `<= q`.
pub fn build_attention_mask(input: &TokenizedInput) -> Array2<f64> {
    let n = input.len();
    Array2::from_shape_fn((n, n), |(q, k)| {
        let allowed = if input.is_source(q) {
            input.is_source(k)
        } else {
            input.is_source(k) || k <= q
        };
        if allowed {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
}
