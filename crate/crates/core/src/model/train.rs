//! Masked-title training with AdamW, linear warmup/decay, and best-epoch
//! selection on validation Rouge.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::DatasetManifest;
use crate::decoding::{DecodeMode, Decoder};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, RougeUnit};
use crate::model::input::{assemble_train, assemble_with_masks, masked_count};
use crate::model::optim::{AdamW, LinearSchedule};
use crate::model::{accumulate_gradients, loss_sum, Ablation, Dropout, ModelConfig, Parameters, Source};
use crate::tokenization::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; off when `None`.
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-5,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
            seed: 0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("invalid learning rate or warmup fraction".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Step,
    Epoch,
}

/// One training-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub kind: RecordKind,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_rouge: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch, rounded to storage precision.
    pub params: Parameters,
    pub log: Vec<LogRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_rouge: Option<f64>,
    /// Set when training stopped on a non-finite loss; `params` then holds
    /// the last finite state.
    pub aborted: Option<String>,
}

/// Per-sample stream seeds so masks differ by epoch yet reproduce across runs.
fn stream_seed(seed: u64, epoch: u64, id: &str) -> u64 {
    // FNV-1a over the id, mixed with seed and epoch
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

const DROPOUT_STREAM: u64 = 0x64726f70;
const SHUFFLE_STREAM: u64 = 0x73687566;

/// Mean validation cross entropy with a fixed mask per sample.
pub fn validation_loss(
    params: &Parameters,
    manifest: &DatasetManifest,
    vocab: &Vocab,
    config: &ModelConfig,
    ablation: Ablation,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in &manifest.samples {
        let source = Source::from_sample(s, vocab, config, ablation);
        let region = crate::model::input::title_region(vocab, config, &s.title).len();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(0, u64::MAX, &s.id));
        let mut offsets =
            rand::seq::index::sample(&mut rng, region, masked_count(config, region)).into_vec();
        offsets.sort_unstable();
        let input = assemble_with_masks(&source, &s.title, vocab, config, &offsets)?;
        sum += loss_sum(&input, source.frames, params, config, None)?;
        count += input.targets.len();
    }
    Ok(sum / count.max(1) as f64)
}

pub fn train(
    train_set: &DatasetManifest,
    valid_set: Option<&DatasetManifest>,
    vocab: &Vocab,
    config: &ModelConfig,
    schedule: &Schedule,
    ablation: Ablation,
) -> Result<TrainOutcome> {
    config.validate()?;
    schedule.validate()?;
    ablation.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    if vocab.len() != config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens, config expects {}",
            vocab.len(),
            config.vocab_size
        )));
    }

    let mut params = Parameters::init(config, &mut ChaCha8Rng::seed_from_u64(schedule.seed));
    let mut opt = AdamW::new(
        &params,
        schedule.beta1,
        schedule.beta2,
        schedule.eps,
        schedule.weight_decay,
    );
    let mut drop_rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ DROPOUT_STREAM);
    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(schedule.batch_size);
    let lr_schedule = LinearSchedule::new(
        schedule.learning_rate,
        schedule.warmup_fraction,
        steps_per_epoch * schedule.epochs,
    );

    let mut log = Vec::new();
    let mut step = 0usize;
    let mut best: Option<(usize, f64, Parameters)> = None;
    let mut aborted = None;

    'epochs: for epoch in 0..schedule.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(
            schedule.seed ^ SHUFFLE_STREAM ^ (epoch as u64).wrapping_mul(0x9e37_79b9),
        ));
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in order.chunks(schedule.batch_size) {
            let mut inputs = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &train_set.samples[i];
                let source = Source::from_sample(s, vocab, config, ablation);
                let mut mask_rng =
                    ChaCha8Rng::seed_from_u64(stream_seed(schedule.seed, epoch as u64, &s.id));
                let input = assemble_train(&source, &s.title, vocab, config, &mut mask_rng)?;
                inputs.push((source, input));
            }
            let total: usize = inputs.iter().map(|(_, i)| i.targets.len()).sum();
            let scale = 1.0 / total as f64;
            let mut grads = params.zeros_like();
            let mut batch_loss = 0.0;
            for (source, input) in &inputs {
                let dropout = Some(Dropout {
                    rate: config.dropout,
                    rng: &mut drop_rng,
                });
                match accumulate_gradients(input, source.frames, &params, config, dropout, scale, &mut grads) {
                    Ok(l) => batch_loss += l,
                    Err(Error::Divergence(m)) => {
                        aborted = Some(m);
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                }
            }
            let loss = batch_loss / total as f64;
            if !loss.is_finite() || !grads.is_finite() {
                aborted = Some(format!("non-finite loss at step {step}"));
                break 'epochs;
            }
            if let Some(max_norm) = schedule.max_grad_norm {
                let norm = grads.global_norm();
                if norm > max_norm {
                    let g = grads.clone();
                    grads.add_scaled(&g, max_norm / norm - 1.0);
                }
            }
            let lr = lr_schedule.lr(step);
            opt.step(&mut params, &grads, lr);
            step += 1;
            epoch_loss += batch_loss;
            epoch_tokens += total;
            log.push(LogRecord {
                kind: RecordKind::Step,
                epoch,
                step,
                loss,
                lr,
                val_rouge: None,
                val_loss: None,
            });
        }
        if !params.is_finite() {
            aborted = Some(format!("non-finite parameters after epoch {epoch}"));
            break;
        }

        let (val_rouge, val_loss) = match valid_set.filter(|v| !v.is_empty()) {
            Some(valid) => {
                let decoder = Decoder::new(&params, config, vocab);
                let report =
                    evaluate_model(&decoder, valid, DecodeMode::Greedy, ablation, RougeUnit::Token, 1)?;
                let vl = validation_loss(&params, valid, vocab, config, ablation)?;
                (Some(report.mean_f1()), Some(vl))
            }
            None => (None, None),
        };
        let score = val_rouge.unwrap_or(f64::NEG_INFINITY);
        log::info!(
            "epoch {epoch}: loss {:.4} val_rouge {:?} val_loss {:?}",
            epoch_loss / epoch_tokens.max(1) as f64,
            val_rouge,
            val_loss
        );
        log.push(LogRecord {
            kind: RecordKind::Epoch,
            epoch,
            step,
            loss: epoch_loss / epoch_tokens.max(1) as f64,
            lr: lr_schedule.lr(step),
            val_rouge,
            val_loss,
        });
        let improves = match &best {
            None => true,
            Some((_, b, _)) => score > *b || (val_rouge.is_none()),
        };
        if improves {
            best = Some((epoch, score, params.clone()));
        }
    }

    let (best_epoch, best_val_rouge, mut out) = match best {
        Some((e, s, p)) => (Some(e), s.is_finite().then_some(s), p),
        None => (None, None, params),
    };
    out.round_to_f32();
    Ok(TrainOutcome {
        params: out,
        log,
        best_epoch,
        best_val_rouge,
        aborted,
    })
}
