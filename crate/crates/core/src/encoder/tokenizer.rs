use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::DEFAULT_LANGUAGES;
use crate::error::{Error, Result};

pub const START_TOKEN: u32 = 0;
pub const END_TOKEN: u32 = 1;
pub const DEFAULT_VOCAB_SIZE: usize = 8192;

/// Word-level hashing tokenizer with one id block per language.
///
/// Ids `0` and `1` are `<s>` and `</s>`; ids `2..vocab_size` are split into
/// equal blocks, one per language, and a word maps into its language's block
/// by FNV-1a hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab_size: usize,
    languages: Vec<String>,
}

/// Content-token ranges per segment, in document order.
///
/// Ranges index the full token sequence (so the first content token is 1)
/// and never include `<s>` or `</s>`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SpanMap {
    spans: Vec<Range<usize>>,
}

impl SpanMap {
    pub fn new(spans: Vec<Range<usize>>) -> Self {
        Self { spans }
    }

    pub fn spans(&self) -> &[Range<usize>] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Span of 1-based `position`.
    pub fn span(&self, position: usize) -> Result<Range<usize>> {
        position
            .checked_sub(1)
            .and_then(|i| self.spans.get(i))
            .cloned()
            .ok_or(Error::InvalidPosition {
                position,
                n: self.spans.len(),
            })
    }

    pub fn content_tokens(&self) -> usize {
        self.spans.iter().map(ExactSizeIterator::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedDocument {
    pub ids: Vec<u32>,
    pub span_map: SpanMap,
}

impl TokenizedDocument {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl Tokenizer {
    pub fn new(vocab_size: usize, languages: Vec<String>) -> Result<Self> {
        if languages.is_empty() {
            return Err(Error::EmptyLanguages);
        }
        if vocab_size < 2 + languages.len() {
            return Err(Error::InvalidArgument(format!(
                "vocab size {vocab_size} too small for {} languages",
                languages.len()
            )));
        }
        if vocab_size > u32::MAX as usize {
            return Err(Error::InvalidArgument("vocab size exceeds u32".into()));
        }
        Ok(Self { vocab_size, languages })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    fn block(&self, language: &str) -> Result<Range<u32>> {
        let li = self
            .languages
            .iter()
            .position(|l| l == language)
            .ok_or_else(|| Error::UnknownLanguage(language.to_string()))?;
        let size = (self.vocab_size - 2) / self.languages.len();
        let start = 2 + li * size;
        Ok(start as u32..(start + size) as u32)
    }

    pub fn token_id(&self, word: &str, language: &str) -> Result<u32> {
        let block = self.block(language)?;
        let width = u64::from(block.end - block.start);
        Ok(block.start + (fnv1a(word.as_bytes()) % width) as u32)
    }

    /// Tokenizes `(text, language)` segments into `<s> … </s>`.
    pub fn tokenize(&self, segments: &[(&str, &str)]) -> Result<TokenizedDocument> {
        if segments.is_empty() {
            return Err(Error::EmptyText);
        }
        let mut ids = vec![START_TOKEN];
        let mut spans = Vec::with_capacity(segments.len());
        for &(text, language) in segments {
            let start = ids.len();
            for word in text.split_whitespace() {
                ids.push(self.token_id(word, language)?);
            }
            if ids.len() == start {
                return Err(Error::EmptyText);
            }
            spans.push(start..ids.len());
        }
        ids.push(END_TOKEN);
        Ok(TokenizedDocument {
            ids,
            span_map: SpanMap::new(spans),
        })
    }
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self {
            vocab_size: DEFAULT_VOCAB_SIZE,
            languages: DEFAULT_LANGUAGES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_segment_example() {
        let tok = Tokenizer::default();
        let doc = tok.tokenize(&[("a b", "en"), ("c", "en")]).unwrap();
        assert_eq!(doc.ids.len(), 5);
        assert_eq!(doc.ids[0], START_TOKEN);
        assert_eq!(doc.ids[4], END_TOKEN);
        assert_eq!(doc.ids[1], tok.token_id("a", "en").unwrap());
        assert_eq!(doc.ids[3], tok.token_id("c", "en").unwrap());
        assert_eq!(doc.span_map.spans(), &[1..3, 3..4]);
        assert_eq!(doc.span_map.span(2).unwrap(), 3..4);
        assert!(doc.span_map.span(3).is_err());
        assert!(doc.span_map.span(0).is_err());
    }

    #[test]
    fn empty_segment_rejected() {
        let tok = Tokenizer::default();
        assert!(matches!(tok.tokenize(&[("", "en")]), Err(Error::EmptyText)));
        assert!(matches!(tok.tokenize(&[("a", "en"), ("  ", "en")]), Err(Error::EmptyText)));
        assert!(matches!(tok.tokenize(&[]), Err(Error::EmptyText)));
    }

    #[test]
    fn deterministic_and_language_blocked() {
        let tok = Tokenizer::default();
        let a = tok.tokenize(&[("x y z", "de")]).unwrap();
        let b = tok.tokenize(&[("x y z", "de")]).unwrap();
        assert_eq!(a, b);
        let en = tok.token_id("x", "en").unwrap();
        let de = tok.token_id("x", "de").unwrap();
        assert_ne!(en, de);
        assert!(tok.block("en").unwrap().contains(&en));
        assert!(tok.block("de").unwrap().contains(&de));
        assert!(matches!(tok.token_id("x", "fr"), Err(Error::UnknownLanguage(_))));
    }

    #[test]
    fn spans_cover_content() {
        let tok = Tokenizer::default();
        let doc = tok.tokenize(&[("a b c", "en"), ("d", "zh"), ("e f", "hi")]).unwrap();
        assert_eq!(doc.span_map.content_tokens(), doc.len() - 2);
        let spans = doc.span_map.spans();
        assert!(spans.windows(2).all(|w| w[0].end == w[1].start));
        assert_eq!(spans[0].start, 1);
        assert_eq!(spans.last().unwrap().end, doc.len() - 1);
    }
}
