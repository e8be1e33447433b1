use std::collections::HashMap;

mod common;

use proptest::prelude::*;

use common::{f1, lcs_oracle, ngram_oracle};

use tcr_core::metrics::{lcs_len, rouge, rouge_l, rouge_n};
use tcr_core::tokenization::{normalize, segment_sentences, split_sentences, Vocab};

const WORDS: &[&str] = &["ab", "abc", "ba", "cab", "b", "ca", "bb", "cc", "a"];

fn vocab() -> Vocab {
    let corpus: Vec<String> = WORDS.iter().map(|w| format!("{w} {w}. x! y? z;")).collect();
    Vocab::build(&corpus, 200).unwrap()
}

fn sentence() -> impl Strategy<Value = String> {
    let word = prop::sample::select(WORDS);
    let sep = prop::sample::select(&[" ", "  ", "\t", ". ", "! ", "? ", ";\n"][..]);
    prop::collection::vec((word, sep), 0..12)
        .prop_map(|parts| parts.into_iter().map(|(w, s)| format!("{w}{s}")).collect())
}

proptest! {
    #[test]
    fn encode_decode_round_trip(text in sentence()) {
        let v = vocab();
        let ids = v.encode(&text);
        prop_assert!(!ids.contains(&v.specials().unk));
        prop_assert_eq!(v.decode(&ids).unwrap(), normalize(&text));
    }

    #[test]
    fn sentence_spans_tile_the_encoding(text in sentence()) {
        let v = vocab();
        let n = v.encode(&text).len();
        let spans = segment_sentences(&v, &text);
        let mut next = 0;
        for (i, s) in spans.iter().enumerate() {
            prop_assert_eq!(s.index, i);
            prop_assert_eq!(s.tokens.start, next);
            prop_assert!(s.tokens.end > s.tokens.start);
            next = s.tokens.end;
        }
        prop_assert_eq!(next, n);
        prop_assert_eq!(split_sentences(&text).concat(), text);
    }

    #[test]
    fn rouge_matches_brute_force(
        h in prop::collection::vec(0u8..4, 0..=8),
        r in prop::collection::vec(0u8..4, 1..=8),
    ) {
        for n in [1, 2] {
            let (o, hn, rn) = ngram_oracle(&h, &r, n);
            let got = rouge_n(&h, &r, n).unwrap();
            prop_assert_eq!(got.f1, f1(o, hn, rn));
        }
        let l = lcs_oracle(&h, &r);
        prop_assert_eq!(lcs_len(&h, &r), l);
        prop_assert_eq!(rouge_l(&h, &r).unwrap().f1, f1(l, h.len(), r.len()));
    }

    #[test]
    fn rouge_f1_is_symmetric_and_bounded(
        h in prop::collection::vec(0u8..5, 1..=10),
        r in prop::collection::vec(0u8..5, 1..=10),
    ) {
        let a = rouge(&h, &r).unwrap();
        let b = rouge(&r, &h).unwrap();
        for (x, y) in [(a.r1, b.r1), (a.r2, b.r2), (a.rl, b.rl)] {
            prop_assert!((x.f1 - y.f1).abs() < 1e-12);
            prop_assert!((x.precision - y.recall).abs() < 1e-12);
            for v in [x.precision, x.recall, x.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        prop_assert_eq!(rouge(&h, &h).unwrap().rl.f1, 1.0);
    }
}

#[test]
fn vocab_build_keeps_most_frequent_word() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let pool: Vec<String> = (0..50).map(|i| format!("w{i:02}x")).collect();
    let corpus: Vec<String> = (0..1000)
        .map(|_| {
            (0..6)
                .map(|_| pool[rng.random_range(0..50usize).min(rng.random_range(0..50usize))].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in &corpus {
        for w in s.split(' ') {
            *counts.entry(w).or_default() += 1;
        }
    }
    let top = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).unwrap().0;
    let v = Vocab::build(&corpus, 64).unwrap();
    assert_eq!(v.len(), 64);
    assert!(v.id(top).is_some());
    assert_eq!(Vocab::build(&corpus, 64).unwrap().tokens(), v.tokens());
}
