mod common;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{enumerate, filler_vocab, random_frames, random_params, step_logp};
use tcr_core::data_io::FrameFeatures;
use tcr_core::decoding::{decode_step, select_cover, AttentionPolicy, DecodeMode, Decoder};
use tcr_core::model::input::assemble_decode;
use tcr_core::model::{ModelConfig, Parameters, Source};

fn small_source(rng: &mut ChaCha8Rng, vocab_len: u32, dim: usize) -> (Vec<u32>, FrameFeatures) {
    let text: Vec<u32> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..vocab_len)).collect();
    (text, random_frames(rng, 3, dim))
}

#[test]
fn beam_of_one_is_greedy() {
    let vocab = filler_vocab(20);
    let config = ModelConfig::tiny(20);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for m in 0..50 {
        let params = random_params(&config, m, 0.4);
        let (text, frames) = small_source(&mut rng, 20, config.frame_dim);
        let source = Source {
            text_ids: text,
            frames: Some(&frames),
        };
        let d = Decoder::new(&params, &config, &vocab);
        let g = d.greedy(&source).unwrap();
        let b = d.beam(&source, 1).unwrap();
        assert_eq!(g.tokens, b.tokens, "model {m}");
        assert!((g.log_prob - b.log_prob).abs() < 1e-9);
        assert_eq!(g.cover_index, b.cover_index);
    }
}

#[test]
fn exhaustive_beam_finds_the_best_sequence() {
    let vocab = filler_vocab(5);
    let config = ModelConfig {
        max_title_len: 3,
        ..ModelConfig::tiny(5)
    };
    let sep = vocab.specials().sep;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for m in 0..20 {
        let params = random_params(&config, 100 + m, 0.5);
        let (text, frames) = small_source(&mut rng, 5, config.frame_dim);
        let source = Source {
            text_ids: text,
            frames: Some(&frames),
        };
        let mut all = Vec::new();
        enumerate(&params, &config, &vocab, &source, Vec::new(), 0.0, &mut all);
        let (mut best, score) = all
            .into_iter()
            .min_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)))
            .unwrap();
        if best.last() == Some(&sep) {
            best.pop();
        }
        let r = Decoder::new(&params, &config, &vocab).beam(&source, 125).unwrap();
        assert_eq!(r.tokens, best, "model {m}");
        assert!((r.log_prob - score).abs() < 1e-9);
    }
}

#[test]
fn reported_log_prob_matches_replay() {
    let vocab = filler_vocab(20);
    let config = ModelConfig::tiny(20);
    let sep = vocab.specials().sep;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for m in 0..10 {
        let params = random_params(&config, 200 + m, 0.4);
        let (text, frames) = small_source(&mut rng, 20, config.frame_dim);
        let source = Source {
            text_ids: text,
            frames: Some(&frames),
        };
        for mode in [DecodeMode::Greedy, DecodeMode::Beam { width: 5 }] {
            let r = Decoder::new(&params, &config, &vocab).decode(&source, mode).unwrap();
            let mut total = 0.0;
            for j in 0..r.tokens.len() {
                total += step_logp(&params, &config, &vocab, &source, &r.tokens[..j])[r.tokens[j] as usize];
            }
            if r.tokens.len() < config.max_title_len {
                total += step_logp(&params, &config, &vocab, &source, &r.tokens)[sep as usize];
            }
            assert!((r.log_prob - total).abs() < 1e-9, "{mode:?}");
            assert_eq!(r.step_attention.len(), r.tokens.len());
        }
    }
}

#[test]
fn permuting_frames_permutes_the_cover() {
    let vocab = filler_vocab(20);
    let config = ModelConfig::tiny(20);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for m in 0..20 {
        let mut params = random_params(&config, 300 + m, 0.4);
        params.pos_emb.fill(0.0);
        let text: Vec<u32> = (0..4).map(|_| rng.random_range(5..20)).collect();
        let frames = random_frames(&mut rng, 6, config.frame_dim);
        let mut perm: Vec<usize> = (0..6).collect();
        for i in (1..6).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted = frames.select_rows(&perm).unwrap();
        let d = Decoder::new(&params, &config, &vocab);
        let a = d
            .greedy(&Source {
                text_ids: text.clone(),
                frames: Some(&frames),
            })
            .unwrap();
        let b = d
            .greedy(&Source {
                text_ids: text,
                frames: Some(&permuted),
            })
            .unwrap();
        assert_eq!(a.tokens, b.tokens);
        if a.tokens.is_empty() {
            continue;
        }
        assert_eq!(perm[b.cover_index.unwrap()], a.cover_index.unwrap(), "model {m}");
        assert_eq!(select_cover(&b), b.cover_index);
    }
}

/// One layer with all mixing weights zero: each position's output is the
/// layer norm of its position embedding, and the head reads it back as a token.
fn forced_model(vocab_len: usize, script: &[(usize, u32)]) -> (ModelConfig, Parameters) {
    let config = ModelConfig {
        layers: 1,
        heads: 1,
        hidden: vocab_len,
        frame_dim: 2,
        max_len: 24,
        vocab_size: vocab_len,
        max_title_len: 6,
        ..Default::default()
    };
    let mut p = Parameters::init(&config, &mut ChaCha8Rng::seed_from_u64(0));
    p.tok_emb.fill(0.0);
    p.seg_emb.fill(0.0);
    p.pos_emb.fill(0.0);
    p.frame_w.fill(0.0);
    let l = &mut p.layers[0];
    for w in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1, &mut l.w2] {
        w.fill(0.0);
    }
    for &(pos, tok) in script {
        p.pos_emb[[pos, tok as usize]] = 3.0;
    }
    p.head_w = Array2::eye(vocab_len);
    p.out_w = Some(Array2::eye(vocab_len));
    (config, p)
}

#[test]
fn greedy_follows_hand_built_logits() {
    let vocab = filler_vocab(10);
    let sep = vocab.specials().sep;
    let frames = FrameFeatures::zeros(1, 2).unwrap();
    let source = Source {
        text_ids: vec![5, 6],
        frames: Some(&frames),
    };
    // title starts after [CLS], one frame, two text tokens and [SEP]
    let start = 5;
    let want = [7u32, 9, 5];
    let mut script: Vec<(usize, u32)> = want.iter().enumerate().map(|(j, &t)| (start + j, t)).collect();
    script.push((start + want.len(), sep));
    let (config, params) = forced_model(10, &script);
    let d = Decoder::new(&params, &config, &vocab);
    assert_eq!(d.greedy(&source).unwrap().tokens, want);
    assert_eq!(d.beam(&source, 5).unwrap().tokens, want);

    let (config, params) = forced_model(10, &[]);
    let params = Parameters {
        out_b: Array1::from_shape_fn(10, |i| if i as u32 == sep { 5.0 } else { 0.0 }),
        ..params
    };
    let d = Decoder::new(&params, &config, &vocab);
    let r = d.greedy(&source).unwrap();
    assert!(r.tokens.is_empty());
    assert!(r.cover_index.is_some());
}

#[test]
fn decode_step_is_deterministic_and_rejects_bad_masks() {
    let vocab = filler_vocab(20);
    let config = ModelConfig::tiny(20);
    let params = random_params(&config, 9, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (text, frames) = small_source(&mut rng, 20, config.frame_dim);
    let source = Source {
        text_ids: text,
        frames: Some(&frames),
    };
    let input = assemble_decode(&source, &[7], &vocab, &config).unwrap();
    let policy = AttentionPolicy::default();
    let a = decode_step(&params, &config, &vocab, &input, &source, policy).unwrap();
    let b = decode_step(&params, &config, &vocab, &input, &source, policy).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.attention.len(), input.source_len());
    let mass: f64 = a.attention.iter().sum();
    assert!(mass <= 1.0 + 1e-12 && a.attention.iter().all(|&v| v >= 0.0));

    let mask = vocab.specials().mask;
    let two = assemble_decode(&source, &[mask], &vocab, &config).unwrap();
    assert!(decode_step(&params, &config, &vocab, &two, &source, policy).is_err());
    let mut none = input.clone();
    *none.ids.last_mut().unwrap() = 7;
    assert!(decode_step(&params, &config, &vocab, &none, &source, policy).is_err());
}
