//! Attention-driven data refinement: key sentences, key frames and sample
//! filtering, plus the retraining loop.

use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data_io::{DatasetManifest, Sample};
use crate::decoding::{argmax, AttentionPolicy, DecodeMode, Decoder, GenerationResult};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, parallel_map, rouge_l, RougeUnit};
use crate::model::train::{train, Schedule, TrainOutcome};
use crate::model::{Ablation, ModelConfig, Parameters, Source};
use crate::tokenization::{segment_sentences, sentences, SentenceSpan, Vocab};

/// Generated-token by source-position attention.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionMatrix {
    /// `m' x (1 + L + n + 1)`.
    pub matrix: Array2<f64>,
    pub frames: Range<usize>,
    pub text: Range<usize>,
    pub policy: AttentionPolicy,
}

impl CrossAttentionMatrix {
    pub fn tokens(&self) -> usize {
        self.matrix.nrows()
    }
}

pub fn cross_attention(result: &GenerationResult, policy: AttentionPolicy) -> Result<CrossAttentionMatrix> {
    let rows = result.step_attention.len();
    if rows == 0 {
        return Err(Error::NoTokensToAttend);
    }
    let width = result.step_attention[0].len();
    if result.step_attention.iter().any(|r| r.len() != width) {
        return Err(Error::Shape("attention rows differ in length".into()));
    }
    let matrix = Array2::from_shape_fn((rows, width), |(i, j)| result.step_attention[i][j]);
    Ok(CrossAttentionMatrix {
        matrix,
        frames: result.frames.clone(),
        text: result.text.clone(),
        policy,
    })
}

/// Sentence index receiving each token's vote: the sentence holding the text
/// position the token attends to most.
pub fn sentence_votes(attn: &CrossAttentionMatrix, spans: &[SentenceSpan]) -> Vec<Option<usize>> {
    attn.matrix
        .rows()
        .into_iter()
        .map(|row| {
            let text: Vec<f64> = attn.text.clone().map(|p| row[p]).collect();
            let offset = argmax(&text)?;
            spans.iter().position(|s| s.tokens.contains(&offset))
        })
        .collect()
}

/// Top `u` sentences by vote count, in text order. Ties go to the lower index.
pub fn select_sentences(attn: &CrossAttentionMatrix, spans: &[SentenceSpan], u: usize) -> Vec<usize> {
    if attn.text.is_empty() || spans.is_empty() {
        return Vec::new();
    }
    let mut counts = vec![0usize; spans.len()];
    for s in sentence_votes(attn, spans).into_iter().flatten() {
        counts[s] += 1;
    }
    top_in_order(spans.len(), u, |a, b| counts[b].cmp(&counts[a]))
}

/// Per-frame weight: each token's frame attention renormalized to one, then
/// summed over tokens.
pub fn frame_weights(attn: &CrossAttentionMatrix) -> Vec<f64> {
    let mut weights = vec![0.0; attn.frames.len()];
    for row in attn.matrix.rows() {
        let total: f64 = attn.frames.clone().map(|p| row[p]).sum();
        if total <= 0.0 {
            continue;
        }
        for (w, p) in weights.iter_mut().zip(attn.frames.clone()) {
            *w += row[p] / total;
        }
    }
    weights
}

/// Indices of the `v` largest weights in temporal order.
pub fn select_frames(weights: &[f64], v: usize) -> Vec<usize> {
    top_in_order(weights.len(), v, |a, b| weights[b].total_cmp(&weights[a]))
}

fn top_in_order<F>(n: usize, k: usize, rank: F) -> Vec<usize>
where
    F: Fn(usize, usize) -> std::cmp::Ordering,
{
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| rank(a, b).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Rouge-L F1 of generated ids against the gold title.
pub fn score_sample(vocab: &Vocab, generated: &[u32], gold: &str) -> Result<f64> {
    let hyp = vocab.content_ids(generated);
    Ok(rouge_l(&hyp, &vocab.encode(gold))?.f1)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<String>,
    pub dropped: Vec<String>,
}

/// Keeps the top `keep` fraction by score (`ceil(keep * N)` samples, plus any
/// tied with the last one). Both lists follow input order.
pub fn filter_samples(scores: &[(String, f64)], keep: f64) -> FilterOutcome {
    let n = scores.len();
    let target = ((keep * n as f64) - 1e-9).ceil().clamp(0.0, n as f64) as usize;
    let mut sorted: Vec<f64> = scores.iter().map(|(_, s)| *s).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut out = FilterOutcome::default();
    if target == 0 {
        out.dropped = scores.iter().map(|(id, _)| id.clone()).collect();
        return out;
    }
    let cut = sorted[target - 1];
    for (id, s) in scores {
        if *s >= cut {
            out.kept.push(id.clone());
        } else {
            out.dropped.push(id.clone());
        }
    }
    out
}

/// Sample reduced to the selected sentences and frames. Refined text goes
/// to `asr` with `ocr` cleared; the cover index follows its frame or is
/// dropped with it.
pub fn rebuild_sample(
    sample: &Sample,
    sentence_idx: &[usize],
    frame_idx: &[usize],
    vocab: &Vocab,
    separator: &str,
) -> Result<Sample> {
    let text = sample.text(separator);
    let pieces = sentences(vocab, &text);
    let n_frames = sample.frames.len();
    if let Some(&bad) = sentence_idx.iter().find(|&&i| i >= pieces.len()) {
        return Err(Error::Sample {
            id: sample.id.clone(),
            message: format!("sentence index {bad} out of {}", pieces.len()),
        });
    }
    if let Some(&bad) = frame_idx.iter().find(|&&i| i >= n_frames) {
        return Err(Error::Sample {
            id: sample.id.clone(),
            message: format!("frame index {bad} out of {n_frames}"),
        });
    }
    let all_sentences = (0..pieces.len()).all(|i| sentence_idx.contains(&i));
    let all_frames = (0..n_frames).all(|i| frame_idx.contains(&i));
    let mut out = sample.clone();
    if !all_sentences {
        let mut idx = sentence_idx.to_vec();
        idx.sort_unstable();
        idx.dedup();
        out.asr = idx
            .iter()
            .map(|&i| pieces[i].0.trim())
            .collect::<Vec<_>>()
            .join(" ");
        out.ocr.clear();
    }
    if !all_frames {
        let mut idx = frame_idx.to_vec();
        idx.sort_unstable();
        idx.dedup();
        out.frames = sample.frames.select_rows(&idx)?;
        out.cover_index = sample
            .cover_index
            .and_then(|c| idx.iter().position(|&f| f == c));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinementConfig {
    /// Sentences kept per sample.
    pub u: usize,
    /// Frames kept per sample.
    pub v: usize,
    /// Fraction of samples kept by Rouge-L rank.
    pub keep: f64,
    pub iterations: usize,
    pub beam_width: usize,
    pub policy: AttentionPolicy,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            u: 3,
            v: 3,
            keep: 0.8,
            iterations: 1,
            beam_width: 5,
            policy: AttentionPolicy::default(),
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.u == 0 || self.v == 0 || self.iterations == 0 || self.beam_width == 0 {
            return Err(Error::Config("u, v, iterations and beam width must be at least 1".into()));
        }
        if !(self.keep > 0.0 && self.keep <= 1.0) {
            return Err(Error::Config(format!("keep fraction {} not in (0, 1]", self.keep)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRefinement {
    pub id: String,
    pub title: String,
    pub rouge_l: f64,
    pub sentences: Vec<usize>,
    pub frames: Vec<usize>,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValScores {
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub train_size: usize,
    pub kept_ids: Vec<String>,
    pub dropped_ids: Vec<String>,
    pub per_sample: Vec<SampleRefinement>,
    pub val_scores: Option<ValScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    pub iterations: Vec<IterationReport>,
    pub best_iteration: usize,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    /// Parameters from the iteration with the best validation mean F1
    /// (the last one without validation data).
    pub params: Parameters,
    pub report: RefinementReport,
    /// Training data after the final refinement pass.
    pub refined: DatasetManifest,
    /// Training set produced by each iteration; the last equals `refined`.
    pub stages: Vec<DatasetManifest>,
    pub trainings: Vec<TrainOutcome>,
}

/// Generation, selection and scoring for one sample.
pub fn refine_sample(
    decoder: &Decoder<'_>,
    sample: &Sample,
    refine: &RefinementConfig,
) -> Result<(Sample, SampleRefinement)> {
    let vocab = decoder.vocab;
    let config = decoder.config;
    let source = Source::from_sample(sample, vocab, config, Ablation::default());
    let result = decoder.decode(&source, DecodeMode::Beam { width: refine.beam_width })?;
    let rouge = score_sample(vocab, &result.tokens, &sample.title)?;
    let text = sample.text(&config.text_separator);
    let (sent_idx, frame_idx) = match cross_attention(&result, refine.policy) {
        Ok(attn) => {
            let spans: Vec<SentenceSpan> = segment_sentences(vocab, &text)
                .into_iter()
                .filter(|s| s.tokens.start < attn.text.len())
                .collect();
            let frames = select_frames(&frame_weights(&attn), refine.v);
            (select_sentences(&attn, &spans, refine.u), frames)
        }
        // nothing generated: keep the leading sentences and frames
        Err(Error::NoTokensToAttend) => (
            (0..sentences(vocab, &text).len().min(refine.u)).collect(),
            (0..sample.frames.len().min(refine.v)).collect(),
        ),
        Err(e) => return Err(e),
    };
    let rebuilt = rebuild_sample(sample, &sent_idx, &frame_idx, vocab, &config.text_separator)?;
    let title = vocab.decode(&vocab.content_ids(&result.tokens))?;
    Ok((
        rebuilt,
        SampleRefinement {
            id: sample.id.clone(),
            title,
            rouge_l: rouge,
            sentences: sent_idx,
            frames: frame_idx,
            kept: false,
        },
    ))
}

/// One refinement pass over `data` with a trained model.
pub fn refine_pass(
    decoder: &Decoder<'_>,
    data: &DatasetManifest,
    refine: &RefinementConfig,
    threads: usize,
) -> Result<(DatasetManifest, Vec<SampleRefinement>, FilterOutcome)> {
    let results = parallel_map(&data.samples, threads, |s| refine_sample(decoder, s, refine))?;
    let scores: Vec<(String, f64)> = results.iter().map(|(_, r)| (r.id.clone(), r.rouge_l)).collect();
    let filter = filter_samples(&scores, refine.keep);
    if filter.kept.is_empty() {
        return Err(Error::EmptyFilteredSet);
    }
    let mut kept = Vec::with_capacity(filter.kept.len());
    let mut per_sample = Vec::with_capacity(results.len());
    let mut k = filter.kept.iter().peekable();
    for (sample, mut r) in results {
        if k.peek().is_some_and(|id| **id == r.id) {
            k.next();
            r.kept = true;
            kept.push(sample);
        }
        per_sample.push(r);
    }
    Ok((DatasetManifest::new(data.split, kept)?, per_sample, filter))
}

/// Train, refine, retrain from scratch on the refined set; repeated
/// `iterations` times.
#[allow(clippy::too_many_arguments)]
pub fn refine_loop(
    train_set: &DatasetManifest,
    valid_set: Option<&DatasetManifest>,
    vocab: &Vocab,
    config: &ModelConfig,
    schedule: &Schedule,
    refine: &RefinementConfig,
    threads: usize,
) -> Result<RefineOutcome> {
    refine.validate()?;
    let mut data = train_set.clone();
    let mut reports = Vec::new();
    let mut trainings = Vec::new();
    let mut stages = Vec::new();
    let mut best: Option<(usize, f64, Parameters)> = None;
    for iteration in 0..refine.iterations {
        let outcome = train(&data, valid_set, vocab, config, schedule, Ablation::default())?;
        let decoder = Decoder::new(&outcome.params, config, vocab).with_policy(refine.policy);
        let val_scores = match valid_set.filter(|v| !v.is_empty()) {
            Some(valid) => {
                let r = evaluate_model(
                    &decoder,
                    valid,
                    DecodeMode::Beam { width: refine.beam_width },
                    Ablation::default(),
                    RougeUnit::Token,
                    threads,
                )?;
                Some(ValScores { r1: r.r1, r2: r.r2, rl: r.rl })
            }
            None => None,
        };
        let score = val_scores
            .as_ref()
            .map_or(f64::NEG_INFINITY, |v| (v.r1 + v.r2 + v.rl) / 3.0);
        let (refined, per_sample, filter) = refine_pass(&decoder, &data, refine, threads)?;
        log::info!(
            "refinement iteration {iteration}: kept {} of {}",
            filter.kept.len(),
            data.len()
        );
        reports.push(IterationReport {
            iteration,
            train_size: data.len(),
            kept_ids: filter.kept,
            dropped_ids: filter.dropped,
            per_sample,
            val_scores,
        });
        if best.as_ref().is_none_or(|(_, b, _)| score > *b || valid_set.is_none()) {
            best = Some((iteration, score, outcome.params.clone()));
        }
        trainings.push(outcome);
        stages.push(refined.clone());
        data = refined;
    }
    let (best_iteration, _, params) = best.expect("at least one iteration");
    Ok(RefineOutcome {
        params,
        report: RefinementReport {
            iterations: reports,
            best_iteration,
        },
        refined: data,
        stages,
        trainings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::FrameFeatures;
    use crate::tokenization::{CLS, MASK, PAD, SEP, UNK};
    use ndarray::array;

    fn attn(matrix: Array2<f64>, frames: Range<usize>, text: Range<usize>) -> CrossAttentionMatrix {
        CrossAttentionMatrix {
            matrix,
            frames,
            text,
            policy: AttentionPolicy::default(),
        }
    }

    #[test]
    fn majority_vote() {
        // [CLS] f f t0 t1 t2 [SEP]; spans {t0}, {t1}, {t2}
        let spans: Vec<SentenceSpan> = (0..3)
            .map(|i| SentenceSpan {
                index: i,
                tokens: i..i + 1,
            })
            .collect();
        let m = array![
            [0.0, 0.0, 0.0, 0.1, 0.2, 0.7, 0.0],
            [0.0, 0.0, 0.0, 0.1, 0.1, 0.8, 0.0],
            [0.0, 0.0, 0.0, 0.9, 0.1, 0.0, 0.0],
        ];
        let a = attn(m, 1..3, 3..6);
        assert_eq!(select_sentences(&a, &spans, 1), vec![2]);
        assert_eq!(select_sentences(&a, &spans, 2), vec![0, 2]);
        assert_eq!(select_sentences(&a, &spans[..1], 3), vec![0]);
    }

    #[test]
    fn frame_weight_cases() {
        let a = attn(array![[0.5, 0.0, 0.0, 0.0, 0.0, 0.5]], 1..6, 6..6);
        assert_eq!(frame_weights(&a), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        let u = attn(Array2::from_elem((3, 5), 0.2), 1..5, 5..5);
        for w in frame_weights(&u) {
            assert!((w - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_selection_order_and_ties() {
        assert_eq!(select_frames(&[3.0, 1.0, 2.0], 2), vec![0, 2]);
        assert_eq!(select_frames(&[1.0, 1.0, 1.0], 2), vec![0, 1]);
        assert_eq!(select_frames(&[1.0, 2.0], 5), vec![0, 1]);
    }

    #[test]
    fn filter_rank_cut() {
        let scores = vec![("a".to_string(), 0.9), ("b".to_string(), 0.5), ("c".to_string(), 0.1)];
        let f = filter_samples(&scores, 2.0 / 3.0);
        assert_eq!(f.kept, vec!["a", "b"]);
        assert_eq!(f.dropped, vec!["c"]);
        assert_eq!(filter_samples(&scores, 1.0).kept.len(), 3);
        let tied = vec![("a".to_string(), 0.5), ("b".to_string(), 0.5), ("c".to_string(), 0.5)];
        assert_eq!(filter_samples(&tied, 0.3).kept.len(), 3);
    }

    #[test]
    fn empty_generation_has_no_matrix() {
        let r = GenerationResult {
            tokens: vec![],
            step_attention: vec![],
            log_prob: 0.0,
            cls_attention: vec![],
            frames: 1..2,
            text: 2..2,
            cover_index: None,
        };
        assert!(matches!(
            cross_attention(&r, AttentionPolicy::default()),
            Err(Error::NoTokensToAttend)
        ));
    }

    fn sample() -> (Sample, Vocab) {
        let vocab = Vocab::from_tokens([PAD, UNK, CLS, SEP, MASK, "a", "b", "c", "d", "."]).unwrap();
        let frames = FrameFeatures::new(Array2::from_shape_fn((4, 2), |(i, j)| (i * 2 + j) as f32)).unwrap();
        let s = Sample {
            id: "x".into(),
            asr: "a b. c. d a.".into(),
            ocr: String::new(),
            title: "a b".into(),
            frames,
            cover_index: Some(2),
        };
        (s, vocab)
    }

    #[test]
    fn rebuild_identity_and_subsets() {
        let (s, vocab) = sample();
        assert_eq!(rebuild_sample(&s, &[0, 1, 2], &[0, 1, 2, 3], &vocab, " ").unwrap(), s);
        let r = rebuild_sample(&s, &[1], &[2, 0], &vocab, " ").unwrap();
        assert_eq!(r.asr, "c.");
        assert_eq!(r.frames.len(), 2);
        assert_eq!(r.frames.matrix().row(1).to_vec(), vec![4.0, 5.0]);
        assert_eq!(r.cover_index, Some(1));
        assert_eq!(r.title, s.title);
        let r = rebuild_sample(&s, &[2, 0], &[3], &vocab, " ").unwrap();
        assert_eq!(r.asr, "a b. d a.");
        assert_eq!(r.cover_index, None);
        assert!(rebuild_sample(&s, &[3], &[0], &vocab, " ").is_err());
    }
}
