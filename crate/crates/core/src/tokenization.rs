//! Vocabulary construction, WordPiece-style encoding, and sentence segmentation.
//!
//! Text is first split into units: whitespace separates units, every
//! punctuation mark is a unit of its own, and every CJK ideograph is a unit of
//! its own. Each unit is then matched greedily, longest piece first, against
//! the vocabulary; pieces after the first carry the `##` continuation marker.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

pub const CONTINUATION: &str = "##";

const SPECIAL_TOKENS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

/// Ids of the special tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Specials {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
}

impl Specials {
    pub fn contains(&self, id: u32) -> bool {
        id == self.pad || id == self.unk || id == self.cls || id == self.sep || id == self.mask
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    specials: Specials,
}

impl Vocab {
    /// Builds a vocabulary from an explicit token list; line order is id order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::InvalidVocab(format!("empty token at id {i}")));
            }
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::InvalidVocab(format!("duplicate token {tok:?}")));
            }
        }
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::InvalidVocab(format!("missing special token {name}")))
        };
        let specials = Specials {
            pad: lookup(PAD)?,
            unk: lookup(UNK)?,
            cls: lookup(CLS)?,
            sep: lookup(SEP)?,
            mask: lookup(MASK)?,
        };
        if specials.pad != 0 {
            return Err(Error::InvalidVocab("[PAD] must have id 0".into()));
        }
        Ok(Vocab {
            tokens,
            index,
            specials,
        })
    }

    /// Builds a vocabulary of at most `target_size` entries from a corpus.
    ///
    /// Whole units are ranked first by frequency, then single-character
    /// pieces (word-initial and `##` continuation) fill the remaining slots so
    /// that unseen words can still be spelled out. Ties break lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Self> {
        if target_size < SPECIAL_TOKENS.len() + 1 {
            return Err(Error::VocabTooSmall(target_size));
        }
        let mut units: HashMap<String, usize> = HashMap::new();
        let mut chars: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for unit in pre_tokenize(text.as_ref()) {
                *units.entry(unit.to_string()).or_default() += 1;
                for (i, c) in unit.chars().enumerate() {
                    let piece = if i == 0 {
                        c.to_string()
                    } else {
                        format!("{CONTINUATION}{c}")
                    };
                    *chars.entry(piece).or_default() += 1;
                }
            }
        }
        if units.is_empty() {
            return Err(Error::EmptyCorpus);
        }

        let ranked = |counts: HashMap<String, usize>| {
            let mut v: Vec<(String, usize)> = counts.into_iter().collect();
            v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            v.into_iter().map(|(tok, _)| tok)
        };

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for tok in ranked(units).chain(ranked(chars)) {
            if tokens.len() >= target_size {
                break;
            }
            if seen.insert(tok.clone()) {
                tokens.push(tok);
            }
        }
        Vocab::from_tokens(tokens)
    }

    /// Reads a vocabulary file: UTF-8, one token per line, line number = id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Vocab::from_tokens(text.lines())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Greedy longest-match-first encoding. Never fails; unmatched characters
    /// become `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for unit in pre_tokenize(text) {
            self.encode_unit(unit, &mut ids);
        }
        ids
    }

    fn encode_unit(&self, unit: &str, out: &mut Vec<u32>) {
        let bounds: Vec<usize> = unit
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(unit.len()))
            .collect();
        let mut start = 0;
        let mut piece = String::new();
        while start + 1 < bounds.len() {
            let mut matched = None;
            for end in (start + 1..bounds.len()).rev() {
                piece.clear();
                if start > 0 {
                    piece.push_str(CONTINUATION);
                }
                piece.push_str(&unit[bounds[start]..bounds[end]]);
                if let Some(&id) = self.index.get(piece.as_str()) {
                    matched = Some((id, end));
                    break;
                }
            }
            match matched {
                Some((id, end)) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    out.push(self.specials.unk);
                    start += 1;
                }
            }
        }
    }

    /// Inverse of [`Vocab::encode`] up to whitespace normalization. Drops
    /// `[PAD]`, `[CLS]`, `[SEP]` and `[MASK]`.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let sp = self.specials;
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::TokenOutOfRange {
                id,
                size: self.len(),
            })?;
            if id == sp.pad || id == sp.cls || id == sp.sep || id == sp.mask {
                continue;
            }
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !rest.is_empty() && !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        Ok(out)
    }

    /// Ids of `text` restricted to what [`Vocab::decode`] would keep; used as
    /// the token sequence for Rouge scoring.
    pub fn content_ids(&self, ids: &[u32]) -> Vec<u32> {
        let sp = self.specials;
        ids.iter()
            .copied()
            .filter(|&id| id != sp.pad && id != sp.cls && id != sp.sep && id != sp.mask)
            .collect()
    }
}

/// A sentence over the encoded text: its index and its half-open token range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceSpan {
    pub index: usize,
    pub tokens: Range<usize>,
}

/// Splits `text` into sentence substrings whose concatenation is `text`.
///
/// A sentence ends after a terminal punctuation mark or a newline; whitespace
/// following the boundary belongs to the next sentence.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if is_sentence_terminator(c) {
            let end = i + c.len_utf8();
            out.push(&text[start..end]);
            start = end;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

/// Sentences of `text` that contain at least one token, paired with their
/// token spans. Spans are ordered, disjoint and cover `0..vocab.encode(text).len()`.
pub fn sentences<'a>(vocab: &Vocab, text: &'a str) -> Vec<(&'a str, SentenceSpan)> {
    let mut out = Vec::new();
    let mut offset = 0;
    for piece in split_sentences(text) {
        let n = vocab.encode(piece).len();
        if n == 0 {
            continue;
        }
        let index = out.len();
        out.push((
            piece,
            SentenceSpan {
                index,
                tokens: offset..offset + n,
            },
        ));
        offset += n;
    }
    out
}

/// Sentence spans over the encoded `text`.
pub fn segment_sentences(vocab: &Vocab, text: &str) -> Vec<SentenceSpan> {
    sentences(vocab, text).into_iter().map(|(_, s)| s).collect()
}

/// Whitespace-normalized form: units joined by single spaces.
pub fn normalize(text: &str) -> String {
    pre_tokenize(text).join(" ")
}

pub fn is_sentence_terminator(c: char) -> bool {
    matches!(c, '。' | '！' | '？' | '!' | '?' | '.' | ';' | '\n')
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c as u32,
            0x2000..=0x206F | 0x3000..=0x303F | 0xFF01..=0xFF0F | 0xFF1A..=0xFF20
            | 0xFF3B..=0xFF40 | 0xFF5B..=0xFF65)
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0x20000..=0x2A6DF | 0x2A700..=0x2B73F
        | 0x2B740..=0x2B81F | 0x2B820..=0x2CEAF | 0xF900..=0xFAFF | 0x2F800..=0x2FA1F)
}

/// Splits text into matching units (see module docs).
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut units = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                units.push(&text[s..i]);
            }
        } else if is_punctuation(c) || is_cjk(c) {
            if let Some(s) = start.take() {
                units.push(&text[s..i]);
            }
            units.push(&text[i..i + c.len_utf8()]);
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        units.push(&text[s..]);
    }
    units
}
