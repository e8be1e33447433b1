#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ndarray::Array1;
use tcr_core::data_io::FrameFeatures;
use tcr_core::decoding::{decode_step, AttentionPolicy};
use tcr_core::model::input::{assemble_decode, layout, masked_count};
use tcr_core::model::{log_softmax, ModelConfig, Parameters, Source, TokenizedInput};
use tcr_core::tokenization::{Vocab, CLS, MASK, PAD, SEP, UNK};

/// Vocabulary of the five specials plus `n - 5` filler words.
pub fn filler_vocab(n: usize) -> Vocab {
    let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP, MASK].iter().map(|s| s.to_string()).collect();
    for i in 0..n.saturating_sub(5) {
        tokens.push(format!("w{i}"));
    }
    Vocab::from_tokens(tokens).unwrap()
}

pub fn random_frames(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> FrameFeatures {
    FrameFeatures::new(Array2::from_shape_simple_fn((frames, dim), || rng.sample(StandardNormal))).unwrap()
}

/// Random parameters with a larger spread than the default init so that
/// attention patterns are far from uniform.
pub fn random_params(config: &ModelConfig, seed: u64, std: f64) -> Parameters {
    let cfg = ModelConfig {
        init_std: std,
        ..config.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Parameters::init(&cfg, &mut rng);
    // perturb gains/biases away from 1/0 so their gradients are exercised
    p.for_each_mut(|_, mut t| {
        if t.ndim() == 1 {
            t.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
        }
    });
    p
}

/// Random layout with random title ids; every title position is a prediction row.
pub fn random_layout(rng: &mut ChaCha8Rng, vocab: &Vocab, config: &ModelConfig) -> (TokenizedInput, FrameFeatures) {
    let n_frames = rng.random_range(1..=6);
    let n_text = rng.random_range(0..=20);
    let n_title = rng.random_range(1..=config.max_title_len);
    let v = vocab.len() as u32;
    let text: Vec<u32> = (0..n_text).map(|_| rng.random_range(5..v)).collect();
    let title: Vec<u32> = (0..n_title).map(|_| rng.random_range(4..v)).collect();
    let mut input = layout(vocab, config, n_frames, &text, &title).unwrap();
    input.masked = input.title.clone().collect();
    input.targets = input.masked.iter().map(|&p| input.ids[p]).collect();
    (input, random_frames(rng, n_frames, config.frame_dim))
}

pub fn step_logp(p: &Parameters, c: &ModelConfig, vocab: &Vocab, source: &Source<'_>, prefix: &[u32]) -> Array1<f64> {
    let input = assemble_decode(source, prefix, vocab, c).unwrap();
    let out = decode_step(p, c, vocab, &input, source, AttentionPolicy::default()).unwrap();
    log_softmax(&out.logits.insert_axis(ndarray::Axis(0))).row(0).to_owned()
}

/// Every complete title (ended by `[SEP]` or at capacity) with its score.
pub fn enumerate(
    p: &Parameters,
    c: &ModelConfig,
    vocab: &Vocab,
    source: &Source<'_>,
    prefix: Vec<u32>,
    score: f64,
    out: &mut Vec<(Vec<u32>, f64)>,
) {
    let logp = step_logp(p, c, vocab, source, &prefix);
    let sp = vocab.specials();
    for t in 0..vocab.len() as u32 {
        if t == sp.mask {
            continue;
        }
        let mut seq = prefix.clone();
        seq.push(t);
        let s = score + logp[t as usize];
        if t == sp.sep || seq.len() == c.max_title_len {
            out.push((seq, s));
        } else {
            enumerate(p, c, vocab, source, seq, s, out);
        }
    }
}

/// Clipped n-gram overlap by explicit position pairing.
pub fn ngram_oracle(h: &[u8], r: &[u8], n: usize) -> (usize, usize, usize) {
    let grams = |s: &[u8]| -> Vec<Vec<u8>> {
        if s.len() < n {
            Vec::new()
        } else {
            (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
        }
    };
    let (hg, rg) = (grams(h), grams(r));
    let mut used = vec![false; rg.len()];
    let mut overlap = 0;
    for g in &hg {
        if let Some(j) = (0..rg.len()).find(|&j| !used[j] && rg[j] == *g) {
            used[j] = true;
            overlap += 1;
        }
    }
    (overlap, hg.len(), rg.len())
}

pub fn is_subsequence(sub: &[u8], s: &[u8]) -> bool {
    let mut it = s.iter();
    sub.iter().all(|c| it.any(|x| x == c))
}

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn lcs_oracle(a: &[u8], b: &[u8]) -> usize {
    (0u32..1 << a.len())
        .filter_map(|bits| {
            let sub: Vec<u8> = (0..a.len()).filter(|i| bits >> i & 1 == 1).map(|i| a[i]).collect();
            is_subsequence(&sub, b).then_some(sub.len())
        })
        .max()
        .unwrap_or(0)
}

pub fn f1(overlap: usize, h: usize, r: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / h as f64;
    let q = overlap as f64 / r as f64;
    2.0 * p * q / (p + q)
}

/// Two 48-position inputs on the tiny config with random masked title slots.
pub fn tiny_batch(seed: u64) -> (ModelConfig, Vec<(TokenizedInput, FrameFeatures)>) {
    let vocab = filler_vocab(64);
    let config = ModelConfig::tiny(64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = Vec::new();
    for _ in 0..2 {
        let frames = random_frames(&mut rng, 6, config.frame_dim);
        // 1 + 6 + 32 + 1 + 8 = 48 positions
        let text: Vec<u32> = (0..32).map(|_| rng.random_range(5..64)).collect();
        let mut title: Vec<u32> = (0..7).map(|_| rng.random_range(5..64)).collect();
        title.push(vocab.specials().sep);
        let mut input = layout(&vocab, &config, 6, &text, &title).unwrap();
        assert_eq!(input.len(), 48);
        let k = masked_count(&config, 8).max(3);
        let mut offs: Vec<usize> = rand::seq::index::sample(&mut rng, 8, k).into_vec();
        offs.sort();
        input.masked = offs.iter().map(|o| input.title.start + o).collect();
        input.targets = input.masked.iter().map(|&p| input.ids[p]).collect();
        for &p in &input.masked {
            input.ids[p] = vocab.specials().mask;
        }
        batch.push((input, frames));
    }
    (config, batch)
}
