//! Rouge-1/2/L F1, the Lead-3 baseline and corpus-level evaluation.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::data_io::{DatasetManifest, Sample};
use crate::decoding::{DecodeMode, Decoder};
use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig, Parameters, Source};
use crate::tokenization::{split_sentences, Vocab};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrecisionRecall {
    fn from_counts(overlap: usize, hyp: usize, reference: usize) -> Self {
        let precision = if hyp == 0 { 0.0 } else { overlap as f64 / hyp as f64 };
        let recall = if reference == 0 { 0.0 } else { overlap as f64 / reference as f64 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        PrecisionRecall {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub r1: PrecisionRecall,
    pub r2: PrecisionRecall,
    pub rl: PrecisionRecall,
}

impl RougeScores {
    pub fn mean_f1(&self) -> f64 {
        (self.r1.f1 + self.r2.f1 + self.rl.f1) / 3.0
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Rouge-N with clipped n-gram overlap.
pub fn rouge_n<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize) -> Result<PrecisionRecall> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let overlap: usize = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    let hyp_total = hyp.len().saturating_sub(n - 1);
    let ref_total = reference.len().saturating_sub(n - 1);
    Ok(PrecisionRecall::from_counts(overlap, hyp_total, ref_total))
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(hyp: &[T], reference: &[T]) -> Result<PrecisionRecall> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(PrecisionRecall::from_counts(lcs_len(hyp, reference), hyp.len(), reference.len()))
}

pub fn rouge<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> Result<RougeScores> {
    Ok(RougeScores {
        r1: rouge_n(hyp, reference, 1)?,
        r2: rouge_n(hyp, reference, 2)?,
        rl: rouge_l(hyp, reference)?,
    })
}

/// Unit Rouge is counted over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RougeUnit {
    /// Model tokenizer tokens.
    #[default]
    Token,
    /// Non-whitespace characters of the decoded strings.
    Char,
}

/// Rouge between two strings in the given unit.
pub fn rouge_text(vocab: &Vocab, hyp: &str, reference: &str, unit: RougeUnit) -> Result<RougeScores> {
    match unit {
        RougeUnit::Token => rouge(&vocab.encode(hyp), &vocab.encode(reference)),
        RougeUnit::Char => {
            let chars = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<Vec<_>>();
            rouge(&chars(hyp), &chars(reference))
        }
    }
}

/// First three sentences of `text`.
pub fn lead3(text: &str) -> String {
    split_sentences(text)
        .into_iter()
        .filter(|s| !s.trim().is_empty())
        .take(3)
        .collect::<String>()
        .trim()
        .to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub hypothesis: String,
    pub scores: RougeScores,
}

/// Mean F1 per metric plus per-sample detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_samples: usize,
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
    pub per_sample: Vec<SampleScore>,
}

impl EvaluationReport {
    pub fn from_scores(per_sample: Vec<SampleScore>) -> Self {
        let n = per_sample.len();
        let mean = |f: fn(&RougeScores) -> f64| {
            if n == 0 {
                0.0
            } else {
                per_sample.iter().map(|s| f(&s.scores)).sum::<f64>() / n as f64
            }
        };
        EvaluationReport {
            n_samples: n,
            r1: mean(|s| s.r1.f1),
            r2: mean(|s| s.r2.f1),
            rl: mean(|s| s.rl.f1),
            per_sample,
        }
    }

    pub fn mean_f1(&self) -> f64 {
        (self.r1 + self.r2 + self.rl) / 3.0
    }
}

/// Scores `(id, hypothesis)` pairs against the manifest's gold titles.
pub fn evaluate_hypotheses(
    manifest: &DatasetManifest,
    hypotheses: &[(String, String)],
    vocab: &Vocab,
    unit: RougeUnit,
) -> Result<EvaluationReport> {
    let gold: HashMap<&str, &Sample> = manifest.samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut per_sample = Vec::with_capacity(hypotheses.len());
    for (id, hyp) in hypotheses {
        let sample = gold.get(id.as_str()).ok_or_else(|| Error::Sample {
            id: id.clone(),
            message: "not in manifest".into(),
        })?;
        per_sample.push(SampleScore {
            id: id.clone(),
            hypothesis: hyp.clone(),
            scores: rouge_text(vocab, hyp, &sample.title, unit)?,
        });
    }
    Ok(EvaluationReport::from_scores(per_sample))
}

/// Lead-3 baseline over a manifest.
pub fn evaluate_lead3(
    manifest: &DatasetManifest,
    vocab: &Vocab,
    config: &ModelConfig,
    unit: RougeUnit,
) -> Result<EvaluationReport> {
    let hyps: Vec<(String, String)> = manifest
        .samples
        .iter()
        .map(|s| (s.id.clone(), lead3(&s.text(&config.text_separator))))
        .collect();
    evaluate_hypotheses(manifest, &hyps, vocab, unit)
}

/// Maps `f` over `items` on `threads` workers; output order follows input order.
pub fn parallel_map<T, U, F>(items: &[T], threads: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync,
{
    if threads <= 1 {
        return items.iter().map(f).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

/// Decodes every sample and scores it against its gold title.
pub fn evaluate_model(
    decoder: &Decoder<'_>,
    manifest: &DatasetManifest,
    mode: DecodeMode,
    ablation: Ablation,
    unit: RougeUnit,
    threads: usize,
) -> Result<EvaluationReport> {
    ablation.validate()?;
    let per_sample = parallel_map(&manifest.samples, threads, |s| {
        let source = Source::from_sample(s, decoder.vocab, decoder.config, ablation);
        let result = decoder.decode(&source, mode)?;
        let hyp_ids = decoder.vocab.content_ids(&result.tokens);
        let hypothesis = decoder.vocab.decode(&hyp_ids)?;
        let scores = match unit {
            RougeUnit::Token => rouge(&hyp_ids, &decoder.vocab.encode(&s.title))?,
            RougeUnit::Char => rouge_text(decoder.vocab, &hypothesis, &s.title, unit)?,
        };
        Ok(SampleScore {
            id: s.id.clone(),
            hypothesis,
            scores,
        })
    })?;
    Ok(EvaluationReport::from_scores(per_sample))
}

/// Convenience wrapper building a default decoder.
pub fn evaluate(
    params: &Parameters,
    manifest: &DatasetManifest,
    vocab: &Vocab,
    config: &ModelConfig,
    mode: DecodeMode,
) -> Result<EvaluationReport> {
    let decoder = Decoder::new(params, config, vocab);
    evaluate_model(&decoder, manifest, mode, Ablation::default(), RougeUnit::Token, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn worked_example() {
        let hyp = ["a", "b", "c"];
        let reference = ["a", "b", "d"];
        let r1 = rouge_n(&hyp, &reference, 1).unwrap();
        assert_abs_diff_eq!(r1.precision, 2.0 / 3.0);
        assert_abs_diff_eq!(r1.recall, 2.0 / 3.0);
        assert_abs_diff_eq!(r1.f1, 2.0 / 3.0, epsilon = 1e-12);
        let r2 = rouge_n(&hyp, &reference, 2).unwrap();
        assert_abs_diff_eq!(r2.f1, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn lcs_example() {
        let r = rouge_l(&["a", "c"], &["a", "b", "c"]).unwrap();
        assert_abs_diff_eq!(r.precision, 1.0);
        assert_abs_diff_eq!(r.recall, 2.0 / 3.0);
        assert_abs_diff_eq!(r.f1, 0.8, epsilon = 1e-12);
        assert_eq!(lcs_len(&[1, 2, 3], &[3, 2, 1]), 1);
    }

    #[test]
    fn identity_and_disjoint() {
        let s = rouge(&[1, 2, 3], &[1, 2, 3]).unwrap();
        assert_eq!((s.r1.f1, s.r2.f1, s.rl.f1), (1.0, 1.0, 1.0));
        let s = rouge(&[4, 5], &[1, 2, 3]).unwrap();
        assert_eq!((s.r1.f1, s.r2.f1, s.rl.f1), (0.0, 0.0, 0.0));
        let s = rouge::<u32>(&[], &[1]).unwrap();
        assert_eq!(s.r1, PrecisionRecall::default());
        assert!(matches!(rouge::<u32>(&[1], &[]), Err(Error::EmptyReference)));
    }

    #[test]
    fn clipping() {
        let r = rouge_n(&["a", "a", "a"], &["a", "b"], 1).unwrap();
        assert_abs_diff_eq!(r.precision, 1.0 / 3.0);
        assert_abs_diff_eq!(r.recall, 0.5);
    }

    #[test]
    fn lead3_cases() {
        assert_eq!(lead3(""), "");
        assert_eq!(lead3("one. two."), "one. two.");
        assert_eq!(lead3("a. b. c. d. e."), "a. b. c.");
    }

    #[test]
    fn report_means() {
        let mk = |f: f64| SampleScore {
            id: String::new(),
            hypothesis: String::new(),
            scores: RougeScores {
                r1: PrecisionRecall { precision: f, recall: f, f1: f },
                r2: PrecisionRecall { precision: f, recall: f, f1: f },
                rl: PrecisionRecall { precision: f, recall: f, f1: f },
            },
        };
        let r = EvaluationReport::from_scores(vec![mk(1.0), mk(0.0)]);
        assert_eq!((r.r1, r.r2, r.rl), (0.5, 0.5, 0.5));
    }
}
