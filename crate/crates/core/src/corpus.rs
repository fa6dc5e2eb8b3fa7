//! Segments, segment sets and permutation-controlled documents.
//!
//! A document is the space-joined concatenation of one segment set in one
//! order. Positions only ever swap segments that share a language, so every
//! document follows its instance's language configuration: monolingual sets
//! permute freely, mixed sets keep the lead segment at position 1.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LANGUAGES: [&str; 6] = ["en", "zh", "de", "it", "ko", "hi"];
pub const DEFAULT_MAX_DOC_TOKENS: usize = 8192;
pub const JOINER: &str = " ";
/// Synthetic word forms per language.
pub const WORDS_PER_LANGUAGE: usize = 600;
const TOPIC_WORDS: usize = 40;
const TOPIC_WORD_SHARE: f64 = 0.6;
/// Loader warning threshold on the length ratio to the English segment of a topic.
pub const LENGTH_RATIO_TOLERANCE: f64 = 0.7;

/// Number of whitespace-separated tokens.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    pub language: String,
    pub topic: String,
    pub text: String,
    pub token_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBand {
    pub min: usize,
    pub max: usize,
}

impl LengthBand {
    pub fn new(min: usize, max: usize) -> Result<Self> {
        if min == 0 || max < min {
            return Err(Error::InvalidArgument(format!("invalid length band ({min}, {max})")));
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, len: usize) -> bool {
        (self.min..=self.max).contains(&len)
    }
}

/// Immutable collection of segments with unique ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    segments: Vec<Segment>,
}

impl Corpus {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &segments {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn in_language<'a>(&'a self, language: &'a str) -> impl Iterator<Item = &'a Segment> + 'a {
        self.segments.iter().filter(move |s| s.language == language)
    }

    pub fn get(&self, id: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.id == id)
    }

    /// Writes the corpus as JSONL records `{id, language, topic, text}`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.segments {
            let rec = CorpusRecord {
                id: s.id.clone(),
                language: s.language.clone(),
                topic: s.topic.clone(),
                text: s.text.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusRecord {
    id: String,
    language: String,
    topic: String,
    text: String,
}

/// Synthetic comparable corpus: `segments_per_language` topics, one segment per
/// (topic, language).
///
/// Each language draws from its own word forms (`{lang}{index}`), so segments
/// of different languages share no tokens. Segments of one topic favour the
/// same word indices across languages.
pub fn generate_synthetic_corpus(
    seed: u64,
    languages: &[String],
    segments_per_language: usize,
    band: LengthBand,
) -> Result<Corpus> {
    if languages.is_empty() {
        return Err(Error::EmptyLanguages);
    }
    if segments_per_language == 0 {
        return Err(Error::InvalidArgument("zero segments requested".into()));
    }
    let band = LengthBand::new(band.min, band.max)?;
    if languages.iter().collect::<HashSet<_>>().len() != languages.len() {
        return Err(Error::InvalidArgument("duplicate language tag".into()));
    }
    let mut segments = Vec::with_capacity(languages.len() * segments_per_language);
    for topic in 0..segments_per_language {
        let mut topic_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, topic as u64, 0));
        let topic_words: Vec<usize> = (0..TOPIC_WORDS)
            .map(|_| topic_rng.random_range(0..WORDS_PER_LANGUAGE))
            .collect();
        for (li, lang) in languages.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, topic as u64, li as u64 + 1));
            let len = rng.random_range(band.min..=band.max);
            let text = (0..len)
                .map(|_| {
                    let idx = if rng.random_bool(TOPIC_WORD_SHARE) {
                        topic_words[rng.random_range(0..TOPIC_WORDS)]
                    } else {
                        rng.random_range(0..WORDS_PER_LANGUAGE)
                    };
                    format!("{lang}{idx}")
                })
                .join(" ");
            segments.push(Segment {
                id: format!("{lang}-{topic:04}"),
                language: lang.clone(),
                topic: format!("topic-{topic:04}"),
                text,
                token_count: len,
            });
        }
    }
    Corpus::new(segments)
}

/// SplitMix-style seed derivation so sub-streams stay independent.
pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Outcome of [`load_corpus`]: the corpus plus non-fatal length warnings.
#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub corpus: Corpus,
    pub warnings: Vec<String>,
}

/// Reads a JSONL corpus, rejecting malformed records, duplicate ids and
/// languages outside `languages`.
pub fn load_corpus(path: impl AsRef<Path>, languages: &[String]) -> Result<LoadedCorpus> {
    let reader = BufReader::new(File::open(path.as_ref())?);
    let mut segments = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if rec.id.is_empty() {
            return Err(Error::MalformedRecord {
                line: i + 1,
                reason: "empty id".into(),
            });
        }
        if !languages.contains(&rec.language) {
            return Err(Error::UnknownLanguage(rec.language));
        }
        let token_count = count_tokens(&rec.text);
        if token_count == 0 {
            return Err(Error::MalformedRecord {
                line: i + 1,
                reason: "empty text".into(),
            });
        }
        segments.push(Segment {
            id: rec.id,
            language: rec.language,
            topic: rec.topic,
            text: rec.text,
            token_count,
        });
    }
    let corpus = Corpus::new(segments)?;
    let warnings = length_ratio_warnings(&corpus);
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(LoadedCorpus { corpus, warnings })
}

fn length_ratio_warnings(corpus: &Corpus) -> Vec<String> {
    let mut by_topic: BTreeMap<&str, Vec<&Segment>> = BTreeMap::new();
    for s in corpus.segments() {
        by_topic.entry(&s.topic).or_default().push(s);
    }
    let mut out = Vec::new();
    for (topic, segs) in by_topic {
        let Some(en) = segs.iter().find(|s| s.language == "en") else {
            continue;
        };
        for s in segs.iter().filter(|s| s.language != "en") {
            let ratio = s.token_count as f64 / en.token_count as f64;
            if (ratio - 1.0).abs() > LENGTH_RATIO_TOLERANCE {
                out.push(format!(
                    "topic {topic}: segment {} has {} tokens vs {} for en ({:.0}% off)",
                    s.id,
                    s.token_count,
                    en.token_count,
                    (ratio - 1.0).abs() * 100.0
                ));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigKind {
    Monolingual,
    Mixed,
}

/// Language tag per document position.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LanguageConfig {
    pub kind: ConfigKind,
    pub per_position: Vec<String>,
}

impl LanguageConfig {
    pub fn monolingual(language: &str, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be >= 1".into()));
        }
        Ok(Self {
            kind: ConfigKind::Monolingual,
            per_position: vec![language.to_string(); n],
        })
    }

    pub fn mixed(lead: &str, later: &str, n: usize) -> Result<Self> {
        if lead == later {
            return Err(Error::InvalidArgument("mixed config needs lead != later".into()));
        }
        if n < 2 {
            return Err(Error::InvalidArgument("mixed config needs n >= 2".into()));
        }
        let mut per_position = vec![later.to_string(); n];
        per_position[0] = lead.to_string();
        Ok(Self {
            kind: ConfigKind::Mixed,
            per_position,
        })
    }

    pub fn n(&self) -> usize {
        self.per_position.len()
    }

    /// `mono-en` or `mixed-de-en` (lead, then later).
    pub fn id(&self) -> String {
        match self.kind {
            ConfigKind::Monolingual => format!("mono-{}", self.per_position[0]),
            ConfigKind::Mixed => format!("mixed-{}-{}", self.per_position[0], self.per_position[1]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.per_position.first() else {
            return Err(Error::InvalidArgument("empty language config".into()));
        };
        match self.kind {
            ConfigKind::Monolingual if self.per_position.iter().any(|l| l != first) => Err(
                Error::InvalidArgument("monolingual config with differing tags".into()),
            ),
            ConfigKind::Mixed => {
                let rest = &self.per_position[1..];
                if rest.is_empty() || rest.iter().any(|l| l != &rest[0]) || &rest[0] == first {
                    Err(Error::InvalidArgument(
                        "mixed config must be (lead, later, ..., later) with lead != later".into(),
                    ))
                } else {
                    Ok(())
                }
            }
            ConfigKind::Monolingual => Ok(()),
        }
    }
}

impl fmt::Display for LanguageConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

/// `n` distinct segments in canonical order (languages follow the config).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSet {
    pub id: String,
    pub segments: Vec<Segment>,
}

impl SegmentSet {
    pub fn n(&self) -> usize {
        self.segments.len()
    }

    /// Groups of canonical indices that may trade positions (same language).
    fn exchange_classes(&self) -> Vec<Vec<usize>> {
        let mut classes: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, s) in self.segments.iter().enumerate() {
            match classes.iter_mut().find(|(l, _)| *l == s.language) {
                Some((_, idx)) => idx.push(i),
                None => classes.push((s.language.clone(), vec![i])),
            }
        }
        classes.into_iter().map(|(_, idx)| idx).collect()
    }
}

/// Draws `set_count` segment sets. Segments are not reused across sets.
pub fn build_segment_sets(
    corpus: &Corpus,
    config: &LanguageConfig,
    set_count: usize,
    seed: u64,
) -> Result<Vec<SegmentSet>> {
    config.validate()?;
    let n = config.n();
    let mut need: BTreeMap<&str, usize> = BTreeMap::new();
    for l in &config.per_position {
        *need.entry(l.as_str()).or_default() += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, n as u64, 0x5e7));
    let mut pools: BTreeMap<&str, Vec<&Segment>> = BTreeMap::new();
    for (&lang, &per_set) in &need {
        let mut pool: Vec<&Segment> = corpus.in_language(lang).collect();
        let required = per_set * set_count;
        if pool.len() < required {
            return Err(Error::InsufficientSegments(format!(
                "{set_count} sets of n={n} ({}) need {required} `{lang}` segments, corpus has {}",
                config.id(),
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        pools.insert(lang, pool);
    }
    let mut cursors: BTreeMap<&str, usize> = BTreeMap::new();
    let sets = (0..set_count)
        .map(|k| {
            let segments = config
                .per_position
                .iter()
                .map(|l| {
                    let cur = cursors.entry(l.as_str()).or_default();
                    let seg = pools[l.as_str()][*cur].clone();
                    *cur += 1;
                    seg
                })
                .collect();
            SegmentSet {
                id: format!("n{n}-{}-set{k:03}", config.id()),
                segments,
            }
        })
        .collect();
    Ok(sets)
}

/// How many orderings of each segment set to emit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PermutationCount {
    #[default]
    All,
    Sample(usize),
}

/// Byte range of one segment inside a document's text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentPart {
    pub segment_id: String,
    pub language: String,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentSpec {
    pub segment_set_id: String,
    /// `permutation[pos]` is the canonical index of the segment at 0-based position `pos`.
    pub permutation: Vec<usize>,
    pub permutation_id: String,
    pub text: String,
    /// Content tokens plus `<s>` and `</s>`.
    pub token_count: usize,
    pub parts: Vec<DocumentPart>,
}

impl DocumentSpec {
    pub fn n(&self) -> usize {
        self.permutation.len()
    }

    /// Segment texts in document order.
    pub fn segment_texts(&self) -> impl Iterator<Item = &str> {
        self.parts.iter().map(|p| &self.text[p.range.clone()])
    }

    /// `(text, language)` pairs in document order, as the tokenizer expects.
    pub fn tokenizer_parts(&self) -> Vec<(&str, &str)> {
        self.parts
            .iter()
            .map(|p| (&self.text[p.range.clone()], p.language.as_str()))
            .collect()
    }

    pub fn from_order(set: &SegmentSet, order: &[usize], max_doc_tokens: usize) -> Result<Self> {
        let mut text = String::new();
        let mut parts = Vec::with_capacity(order.len());
        for (pos, &idx) in order.iter().enumerate() {
            let seg = &set.segments[idx];
            if pos > 0 {
                text.push_str(JOINER);
            }
            let start = text.len();
            text.push_str(&seg.text);
            parts.push(DocumentPart {
                segment_id: seg.id.clone(),
                language: seg.language.clone(),
                range: start..text.len(),
            });
        }
        let token_count = order.iter().map(|&i| set.segments[i].token_count).sum::<usize>() + 2;
        if token_count > max_doc_tokens {
            return Err(Error::OversizedDocument {
                set_id: set.id.clone(),
                tokens: token_count,
                limit: max_doc_tokens,
            });
        }
        Ok(Self {
            segment_set_id: set.id.clone(),
            permutation: order.to_vec(),
            permutation_id: permutation_id(order),
            text,
            token_count,
            parts,
        })
    }
}

/// `p` followed by the 1-based canonical indices in document order, e.g. `p3-1-2`.
pub fn permutation_id(order: &[usize]) -> String {
    format!("p{}", order.iter().map(|i| i + 1).join("-"))
}

pub fn factorial(n: usize) -> usize {
    (1..=n).product()
}

/// Orderings per set under full enumeration: the product of the factorials
/// of the same-language position classes.
pub fn full_permutation_count(config: &LanguageConfig) -> usize {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in &config.per_position {
        *counts.entry(l).or_default() += 1;
    }
    counts.values().map(|&c| factorial(c)).product()
}

/// Total documents produced by enumerating every set.
pub fn document_count(config: &LanguageConfig, sets: usize, count: PermutationCount) -> usize {
    match count {
        PermutationCount::All => sets * full_permutation_count(config),
        PermutationCount::Sample(k) => sets * k,
    }
}

/// All admissible orderings, lexicographic in the arrangement.
fn all_orders(set: &SegmentSet) -> Vec<Vec<usize>> {
    let n = set.n();
    let classes = set.exchange_classes();
    let class_perms: Vec<Vec<Vec<usize>>> = classes
        .iter()
        .map(|c| c.iter().copied().permutations(c.len()).collect())
        .collect();
    let mut orders: Vec<Vec<usize>> = class_perms
        .iter()
        .multi_cartesian_product()
        .map(|choice| {
            let mut order = vec![0; n];
            for (class, perm) in classes.iter().zip(choice) {
                for (&slot, &seg) in class.iter().zip(perm) {
                    order[slot] = seg;
                }
            }
            order
        })
        .collect();
    orders.sort();
    orders
}

/// Position-balanced sample: `k / m` random arrangements of the exchangeable
/// block (size `m`), each taken with all `m` cyclic rotations.
///
/// Rotations of one arrangement are distinct, and arrangements are drawn with
/// their first element pinned, so no two emitted orders coincide.
fn balanced_orders(set: &SegmentSet, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = set.n();
    let classes = set.exchange_classes();
    let movable: Vec<&Vec<usize>> = classes.iter().filter(|c| c.len() > 1).collect();
    let unbalanceable = |reason: &str| Error::Unbalanceable {
        requested: k,
        n,
        reason: reason.into(),
    };
    let block = match movable.as_slice() {
        [] => return if k == 1 { Ok(vec![(0..n).collect()]) } else { Err(unbalanceable("nothing to permute")) },
        [one] => *one,
        _ => return Err(unbalanceable("more than one exchangeable language block")),
    };
    let m = block.len();
    if k == 0 || !k.is_multiple_of(m) {
        return Err(unbalanceable("sample size must be a positive multiple of the block size"));
    }
    if k > factorial(m) {
        return Err(unbalanceable("sample size exceeds the number of orderings"));
    }
    let base_count = k / m;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Arrangements with block[0] first, one per rotation class.
    let mut reps: Vec<Vec<usize>> = if factorial(m - 1) <= 50_000 {
        let mut all: Vec<Vec<usize>> = block[1..]
            .iter()
            .copied()
            .permutations(m - 1)
            .map(|rest| std::iter::once(block[0]).chain(rest).collect())
            .collect();
        all.shuffle(&mut rng);
        all.truncate(base_count);
        all
    } else {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(base_count);
        while out.len() < base_count {
            let mut rest = block[1..].to_vec();
            rest.shuffle(&mut rng);
            let rep: Vec<usize> = std::iter::once(block[0]).chain(rest).collect();
            if seen.insert(rep.clone()) {
                out.push(rep);
            }
        }
        out
    };
    reps.sort();
    let base: Vec<usize> = (0..n).collect();
    let mut orders = Vec::with_capacity(k);
    for rep in &reps {
        for r in 0..m {
            let mut order = base.clone();
            for (j, &slot) in block.iter().enumerate() {
                order[slot] = rep[(j + r) % m];
            }
            orders.push(order);
        }
    }
    Ok(orders)
}

/// Documents for one segment set: every admissible ordering, or a
/// position-balanced sample of `k` orderings.
pub fn enumerate_documents(
    set: &SegmentSet,
    count: PermutationCount,
    seed: u64,
    max_doc_tokens: usize,
) -> Result<Vec<DocumentSpec>> {
    if set.segments.is_empty() {
        return Err(Error::EmptyInput(format!("segment set {}", set.id)));
    }
    let orders = match count {
        PermutationCount::All => all_orders(set),
        PermutationCount::Sample(k) if k == full_permutation_count_of(set) => all_orders(set),
        PermutationCount::Sample(k) => balanced_orders(set, k, mix_seed(seed, k as u64, 0xba1))?,
    };
    orders
        .iter()
        .map(|o| DocumentSpec::from_order(set, o, max_doc_tokens))
        .collect()
}

fn full_permutation_count_of(set: &SegmentSet) -> usize {
    set.exchange_classes().iter().map(|c| factorial(c.len())).product()
}

/// One (n, language configuration) combination with its documents.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentInstance {
    pub n: usize,
    pub language_config: LanguageConfig,
    pub segment_sets: Vec<SegmentSet>,
    pub documents: Vec<DocumentSpec>,
    pub seed: u64,
}

impl ExperimentInstance {
    pub fn id(&self) -> String {
        format!("n{}-{}", self.n, self.language_config.id())
    }

    pub fn segment_set(&self, id: &str) -> Option<&SegmentSet> {
        self.segment_sets.iter().find(|s| s.id == id)
    }

    pub fn build(
        corpus: &Corpus,
        language_config: LanguageConfig,
        set_count: usize,
        permutations: PermutationCount,
        seed: u64,
        max_doc_tokens: usize,
    ) -> Result<Self> {
        let segment_sets = build_segment_sets(corpus, &language_config, set_count, seed)?;
        let mut documents = Vec::new();
        for (k, set) in segment_sets.iter().enumerate() {
            documents.extend(enumerate_documents(
                set,
                permutations,
                mix_seed(seed, k as u64, 0xd0c),
                max_doc_tokens,
            )?);
        }
        Ok(Self {
            n: language_config.n(),
            language_config,
            segment_sets,
            documents,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn langs(tags: &[&str]) -> Vec<String> {
        tags.iter().map(|s| s.to_string()).collect()
    }

    fn corpus(per_lang: usize) -> Corpus {
        generate_synthetic_corpus(7, &langs(&["en", "de"]), per_lang, LengthBand::new(40, 80).unwrap()).unwrap()
    }

    fn tally(docs: &[DocumentSpec], n: usize) -> Vec<Vec<usize>> {
        let mut t = vec![vec![0; n]; n];
        for d in docs {
            for (pos, &seg) in d.permutation.iter().enumerate() {
                t[seg][pos] += 1;
            }
        }
        t
    }

    #[test]
    fn synthetic_counts_and_band() {
        let c = corpus(10);
        assert_eq!(c.len(), 20);
        assert_eq!(c.in_language("en").count(), 10);
        assert!(c.segments().iter().all(|s| (40..=80).contains(&s.token_count)));
        assert!(c.segments().iter().all(|s| count_tokens(&s.text) == s.token_count));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        corpus(5).write_jsonl(&mut a).unwrap();
        corpus(5).write_jsonl(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_degenerate_band() {
        let c = generate_synthetic_corpus(7, &langs(&["en"]), 1, LengthBand { min: 5, max: 5 }).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.segments()[0].token_count, 5);
    }

    #[test]
    fn synthetic_languages_share_no_tokens() {
        let c = corpus(6);
        let en: HashSet<&str> = c.in_language("en").flat_map(|s| s.text.split(' ')).collect();
        let de: HashSet<&str> = c.in_language("de").flat_map(|s| s.text.split(' ')).collect();
        assert!(en.is_disjoint(&de));
    }

    #[test]
    fn synthetic_errors() {
        let band = LengthBand { min: 5, max: 8 };
        assert!(matches!(generate_synthetic_corpus(1, &[], 3, band), Err(Error::EmptyLanguages)));
        assert!(generate_synthetic_corpus(1, &langs(&["en"]), 0, band).is_err());
        assert!(generate_synthetic_corpus(1, &langs(&["en"]), 1, LengthBand { min: 0, max: 3 }).is_err());
        assert!(generate_synthetic_corpus(1, &langs(&["en"]), 1, LengthBand { min: 9, max: 3 }).is_err());
    }

    #[test]
    fn monolingual_sets() {
        let c = corpus(10);
        let cfg = LanguageConfig::monolingual("en", 3).unwrap();
        let sets = build_segment_sets(&c, &cfg, 2, 1).unwrap();
        assert_eq!(sets.len(), 2);
        for s in &sets {
            assert_eq!(s.n(), 3);
            assert!(s.segments.iter().all(|x| x.language == "en"));
            assert_eq!(s.segments.iter().map(|x| &x.id).collect::<HashSet<_>>().len(), 3);
        }
    }

    #[test]
    fn mixed_sets_follow_config() {
        let c = corpus(10);
        let cfg = LanguageConfig::mixed("de", "en", 4).unwrap();
        let sets = build_segment_sets(&c, &cfg, 2, 1).unwrap();
        for s in &sets {
            assert_eq!(s.segments[0].language, "de");
            assert!(s.segments[1..].iter().all(|x| x.language == "en"));
        }
    }

    #[test]
    fn insufficient_segments() {
        let c = generate_synthetic_corpus(1, &langs(&["en"]), 3, LengthBand { min: 5, max: 8 }).unwrap();
        let cfg = LanguageConfig::monolingual("en", 4).unwrap();
        assert!(matches!(
            build_segment_sets(&c, &cfg, 5, 1),
            Err(Error::InsufficientSegments(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(LanguageConfig::mixed("en", "en", 3).is_err());
        let bad = LanguageConfig {
            kind: ConfigKind::Monolingual,
            per_position: langs(&["en", "de"]),
        };
        assert!(bad.validate().is_err());
        assert_eq!(LanguageConfig::mixed("de", "en", 3).unwrap().id(), "mixed-de-en");
    }

    #[test]
    fn full_enumeration_n3() {
        let c = corpus(10);
        let cfg = LanguageConfig::monolingual("en", 3).unwrap();
        let set = &build_segment_sets(&c, &cfg, 1, 1).unwrap()[0];
        let docs = enumerate_documents(set, PermutationCount::All, 0, DEFAULT_MAX_DOC_TOKENS).unwrap();
        assert_eq!(docs.len(), 6);
        assert_eq!(docs.iter().map(|d| &d.permutation_id).collect::<HashSet<_>>().len(), 6);
        assert_eq!(docs[0].permutation_id, "p1-2-3");
        assert!(tally(&docs, 3).iter().flatten().all(|&c| c == 2));
    }

    #[test]
    fn balanced_sample_n4() {
        let c = corpus(10);
        let cfg = LanguageConfig::monolingual("en", 4).unwrap();
        let set = &build_segment_sets(&c, &cfg, 1, 1).unwrap()[0];
        let docs = enumerate_documents(set, PermutationCount::Sample(8), 3, DEFAULT_MAX_DOC_TOKENS).unwrap();
        assert_eq!(docs.len(), 8);
        assert_eq!(docs.iter().map(|d| &d.permutation).collect::<HashSet<_>>().len(), 8);
        assert!(tally(&docs, 4).iter().flatten().all(|&c| c == 2));
    }

    #[test]
    fn unbalanceable_samples() {
        let c = corpus(10);
        let cfg = LanguageConfig::monolingual("en", 4).unwrap();
        let set = &build_segment_sets(&c, &cfg, 1, 1).unwrap()[0];
        for k in [0, 6, 28] {
            assert!(matches!(
                enumerate_documents(set, PermutationCount::Sample(k), 3, DEFAULT_MAX_DOC_TOKENS),
                Err(Error::Unbalanceable { .. })
            ));
        }
        // k = n! falls back to full enumeration.
        assert_eq!(
            enumerate_documents(set, PermutationCount::Sample(24), 3, DEFAULT_MAX_DOC_TOKENS).unwrap().len(),
            24
        );
    }

    #[test]
    fn mixed_enumeration_keeps_lead_first() {
        let c = corpus(10);
        let cfg = LanguageConfig::mixed("de", "en", 4).unwrap();
        let set = &build_segment_sets(&c, &cfg, 1, 1).unwrap()[0];
        let docs = enumerate_documents(set, PermutationCount::All, 0, DEFAULT_MAX_DOC_TOKENS).unwrap();
        assert_eq!(docs.len(), 6);
        assert_eq!(document_count(&cfg, 1, PermutationCount::All), 6);
        assert!(docs.iter().all(|d| d.permutation[0] == 0 && d.parts[0].language == "de"));
        let sampled = enumerate_documents(set, PermutationCount::Sample(3), 0, DEFAULT_MAX_DOC_TOKENS).unwrap();
        let t = tally(&sampled, 4);
        assert!((1..4).all(|seg| (1..4).all(|pos| t[seg][pos] == 1)));
    }

    #[test]
    fn oversized_document_names_set() {
        let c = corpus(10);
        let cfg = LanguageConfig::monolingual("en", 3).unwrap();
        let set = &build_segment_sets(&c, &cfg, 1, 1).unwrap()[0];
        match enumerate_documents(set, PermutationCount::All, 0, 50) {
            Err(Error::OversizedDocument { set_id, .. }) => assert_eq!(set_id, set.id),
            other => panic!("expected oversized error, got {other:?}"),
        }
    }

    #[test]
    fn document_text_round_trip() {
        let c = corpus(10);
        let cfg = LanguageConfig::monolingual("en", 3).unwrap();
        let set = &build_segment_sets(&c, &cfg, 1, 1).unwrap()[0];
        for d in enumerate_documents(set, PermutationCount::All, 0, DEFAULT_MAX_DOC_TOKENS).unwrap() {
            let texts: Vec<&str> = d.segment_texts().collect();
            for (t, &idx) in texts.iter().zip(&d.permutation) {
                assert_eq!(*t, set.segments[idx].text);
            }
            assert_eq!(texts.join(JOINER), d.text);
            assert_eq!(count_tokens(&d.text) + 2, d.token_count);
        }
    }

    #[test]
    fn large_scale_counts() {
        let mono3 = LanguageConfig::monolingual("en", 3).unwrap();
        assert_eq!(document_count(&mono3, 167, PermutationCount::All), 1002);
        let mono4 = LanguageConfig::monolingual("en", 4).unwrap();
        assert_eq!(document_count(&mono4, 42, PermutationCount::All), 1008);
        let mono5 = LanguageConfig::monolingual("en", 5).unwrap();
        assert_eq!(document_count(&mono5, 9, PermutationCount::All), 1080);
        let mono6 = LanguageConfig::monolingual("en", 6).unwrap();
        assert_eq!(document_count(&mono6, 14, PermutationCount::All), 10080);
    }

    #[test]
    fn loader_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let en_de = langs(&["en", "de"]);
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"language\":\"en\",\"topic\":\"t\",\"text\":\"x y z w v u t s r q\"}\n\
             {\"id\":\"b\",\"language\":\"de\",\"topic\":\"t\",\"text\":\"x y\"}\n",
        )
        .unwrap();
        let loaded = load_corpus(&path, &en_de).unwrap();
        assert_eq!(loaded.corpus.len(), 2);
        assert_eq!(loaded.warnings.len(), 1);

        std::fs::write(
            &path,
            "{\"id\":\"a\",\"language\":\"en\",\"topic\":\"t\",\"text\":\"x\"}\n\
             {\"id\":\"a\",\"language\":\"de\",\"topic\":\"t\",\"text\":\"y\"}\n",
        )
        .unwrap();
        assert!(matches!(load_corpus(&path, &en_de), Err(Error::DuplicateId(_))));

        std::fs::write(&path, "{\"id\":\"a\",\"language\":\"fr\",\"topic\":\"t\",\"text\":\"x\"}\n").unwrap();
        assert!(matches!(load_corpus(&path, &en_de), Err(Error::UnknownLanguage(_))));

        std::fs::write(&path, "{\"id\":\"a\",\"language\":\"en\"}\n").unwrap();
        assert!(matches!(
            load_corpus(&path, &en_de),
            Err(Error::MalformedRecord { line: 1, .. })
        ));
    }

    #[test]
    fn written_corpus_loads_back() {
        let c = corpus(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        c.write_jsonl(File::create(&path).unwrap()).unwrap();
        assert_eq!(load_corpus(&path, &langs(&["en", "de"])).unwrap().corpus, c);
    }
}
