//! Feature extraction for both towers.
//!
//! Mentions contribute four text features (span, five tokens of left and
//! right context, the containing sentence with the span replaced by a
//! placeholder). Entities contribute title, first paragraph and their raw
//! category names. Text features are embedded as averaged unigrams and
//! bigrams; n-grams outside the vocabulary fall into shared hash buckets.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::corpus::{AnnotatedDocument, Anchor, EntityRecord, MentionExample};
use crate::{Error, Result};

pub const PAD: &str = "<pad>";
pub const PLACEHOLDER: &str = "<mention>";
pub const PAD_ID: u32 = 0;
pub const PLACEHOLDER_ID: u32 = 1;
/// Tokens taken on each side of a mention span.
pub const CONTEXT_WINDOW: usize = 5;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a 64-bit over a sequence of byte slices, as if concatenated.
pub fn fnv1a64_parts(parts: &[&[u8]]) -> u64 {
    let mut hash = FNV_OFFSET;
    for part in parts {
        for &byte in *part {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(FNV_PRIME);
        }
    }
    hash
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_parts(&[bytes])
}

/// Lowercases, splits on whitespace and strips non-alphanumeric characters
/// from both ends of every token. Tokens that end up empty are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|raw| raw.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|tok| !tok.is_empty())
        .map(|tok| tok.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Ngram<'a> {
    Unigram(&'a str),
    Bigram(&'a str, &'a str),
}

impl Ngram<'_> {
    /// Canonical key: the token itself, or both tokens joined by one space.
    /// Tokens never contain whitespace, so the two key spaces are disjoint.
    pub fn key(&self) -> String {
        match self {
            Ngram::Unigram(t) => t.to_string(),
            Ngram::Bigram(a, b) => {
                let mut s = String::with_capacity(a.len() + b.len() + 1);
                s.push_str(a);
                s.push(' ');
                s.push_str(b);
                s
            }
        }
    }

    pub fn hash(&self) -> u64 {
        match self {
            Ngram::Unigram(t) => fnv1a64(t.as_bytes()),
            Ngram::Bigram(a, b) => fnv1a64_parts(&[a.as_bytes(), b" ", b.as_bytes()]),
        }
    }

    fn touches_pad(&self) -> bool {
        match self {
            Ngram::Unigram(t) => *t == PAD,
            Ngram::Bigram(a, b) => *a == PAD || *b == PAD,
        }
    }
}

pub fn extract_ngrams<S: AsRef<str>>(tokens: &[S]) -> (Vec<Ngram<'_>>, Vec<Ngram<'_>>) {
    let unigrams = tokens.iter().map(|t| Ngram::Unigram(t.as_ref())).collect();
    let bigrams = tokens
        .windows(2)
        .map(|w| Ngram::Bigram(w[0].as_ref(), w[1].as_ref()))
        .collect();
    (unigrams, bigrams)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TextFeature {
    pub tokens: Vec<String>,
}

impl TextFeature {
    pub fn new(tokens: Vec<String>) -> Self {
        Self { tokens }
    }
}

impl<S: AsRef<str>> From<&[S]> for TextFeature {
    fn from(tokens: &[S]) -> Self {
        Self::new(tokens.iter().map(|t| t.as_ref().to_string()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MentionFeatures {
    pub span: TextFeature,
    pub left_context: TextFeature,
    pub right_context: TextFeature,
    pub sentence: TextFeature,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityFeatures {
    pub title: TextFeature,
    pub paragraph: TextFeature,
    pub categories: Vec<String>,
}

/// Fixed ids for the most frequent n-grams plus hash buckets for the rest.
///
/// Ids `0` and `1` are reserved for [`PAD`] and [`PLACEHOLDER`]. Learned
/// n-grams take ids `2..vocab_size()`; everything else maps into
/// `vocab_size()..vocab_size() + oov_buckets`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NgramVocabulary {
    unigram_ids: BTreeMap<String, u32>,
    bigram_ids: BTreeMap<String, u32>,
    oov_buckets: u64,
}

impl NgramVocabulary {
    /// A vocabulary holding only the reserved tokens.
    pub fn reserved_only(oov_buckets: u64) -> Result<Self> {
        Self::from_entries(core::iter::empty::<(String, u32)>(), oov_buckets)
    }

    /// Rebuilds a vocabulary from `(key, id)` entries, where bigram keys are
    /// two tokens separated by a single space. Reserved tokens are added if
    /// missing; ids must then form the contiguous range `0..len`.
    pub fn from_entries<I, S>(entries: I, oov_buckets: u64) -> Result<Self>
    where
        I: IntoIterator<Item = (S, u32)>,
        S: Into<String>,
    {
        if oov_buckets == 0 {
            return Err(Error::InvalidConfig("oov_buckets must be positive".into()));
        }
        let mut unigram_ids = BTreeMap::new();
        let mut bigram_ids = BTreeMap::new();
        unigram_ids.insert(PAD.to_string(), PAD_ID);
        unigram_ids.insert(PLACEHOLDER.to_string(), PLACEHOLDER_ID);
        for (key, id) in entries {
            let key = key.into();
            let target = if key.contains(' ') {
                &mut bigram_ids
            } else {
                &mut unigram_ids
            };
            if let Some(prev) = target.insert(key.clone(), id) {
                if prev != id {
                    return Err(Error::InvalidConfig(alloc::format!(
                        "vocabulary entry {key:?} has conflicting ids {prev} and {id}"
                    )));
                }
            }
        }
        let vocab = Self {
            unigram_ids,
            bigram_ids,
            oov_buckets,
        };
        let mut seen: Vec<bool> = alloc::vec![false; vocab.vocab_size()];
        for (_, id) in vocab.entries() {
            match seen.get_mut(id as usize) {
                Some(slot) if !*slot => *slot = true,
                _ => {
                    return Err(Error::InvalidConfig(alloc::format!(
                        "vocabulary ids are not a permutation of 0..{}",
                        vocab.vocab_size()
                    )))
                }
            }
        }
        Ok(vocab)
    }

    /// Number of fixed ids, reserved tokens included.
    pub fn vocab_size(&self) -> usize {
        self.unigram_ids.len() + self.bigram_ids.len()
    }

    pub fn oov_buckets(&self) -> u64 {
        self.oov_buckets
    }

    /// Total id space: fixed ids plus buckets.
    pub fn id_space(&self) -> usize {
        self.vocab_size() + self.oov_buckets as usize
    }

    /// All fixed entries, unigrams first, each group in key order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, u32)> {
        self.unigram_ids
            .iter()
            .chain(self.bigram_ids.iter())
            .map(|(k, &v)| (k.as_str(), v))
    }

    pub fn fixed_id(&self, ngram: &Ngram<'_>) -> Option<u32> {
        match ngram {
            Ngram::Unigram(t) => self.unigram_ids.get(*t).copied(),
            Ngram::Bigram(..) => self.bigram_ids.get(ngram.key().as_str()).copied(),
        }
    }

    pub fn ngram_id(&self, ngram: &Ngram<'_>) -> u32 {
        match self.fixed_id(ngram) {
            Some(id) => id,
            None => (self.vocab_size() as u64 + ngram.hash() % self.oov_buckets) as u32,
        }
    }
}

/// Free-function form of [`NgramVocabulary::ngram_id`].
pub fn ngram_id(ngram: &Ngram<'_>, vocab: &NgramVocabulary) -> u32 {
    vocab.ngram_id(ngram)
}

/// Builds a vocabulary from the `max_vocab` most frequent unigrams and
/// bigrams over `texts`. Ties go to the lexicographically smaller key.
/// Reserved tokens are never counted and n-grams touching padding are
/// skipped.
pub fn build_vocabulary<'a, I>(texts: I, max_vocab: usize, oov_buckets: u64) -> Result<NgramVocabulary>
where
    I: IntoIterator<Item = &'a [String]>,
{
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for tokens in texts {
        let (unigrams, bigrams) = extract_ngrams(tokens);
        for ngram in unigrams.iter().chain(bigrams.iter()) {
            if ngram.touches_pad() || *ngram == Ngram::Unigram(PLACEHOLDER) {
                continue;
            }
            *counts.entry(ngram.key()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    // BTreeMap order is already lexicographic; a stable sort keeps it for ties.
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    let entries = ranked
        .into_iter()
        .take(max_vocab)
        .enumerate()
        .map(|(i, (key, _))| (key, i as u32 + 2));
    NgramVocabulary::from_entries(entries, oov_buckets)
}

/// Vocabulary over the text features of training mentions and every entity.
pub fn build_corpus_vocabulary(
    train: &[MentionExample],
    entities: &[EntityRecord],
    max_vocab: usize,
    oov_buckets: u64,
) -> Result<NgramVocabulary> {
    let entity_features: Vec<EntityFeatures> = entities.iter().map(entity_features).collect();
    let mention_texts = train.iter().flat_map(|ex| {
        let f = &ex.features;
        [
            f.span.tokens.as_slice(),
            f.left_context.tokens.as_slice(),
            f.right_context.tokens.as_slice(),
            f.sentence.tokens.as_slice(),
        ]
    });
    let entity_texts = entity_features
        .iter()
        .flat_map(|f| [f.title.tokens.as_slice(), f.paragraph.tokens.as_slice()]);
    build_vocabulary(mention_texts.chain(entity_texts), max_vocab, oov_buckets)
}

/// A text feature resolved to n-gram ids, with padding removed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EncodedText {
    pub unigrams: Vec<u32>,
    pub bigrams: Vec<u32>,
}

pub fn encode_text(feature: &TextFeature, vocab: &NgramVocabulary) -> EncodedText {
    let (unigrams, bigrams) = extract_ngrams(&feature.tokens);
    let resolve = |list: Vec<Ngram<'_>>| -> Vec<u32> {
        list.iter()
            .filter(|n| !n.touches_pad())
            .map(|n| vocab.ngram_id(n))
            .collect()
    };
    EncodedText {
        unigrams: resolve(unigrams),
        bigrams: resolve(bigrams),
    }
}

/// Builds the four mention-side text features for one anchor.
pub fn mention_features(doc: &AnnotatedDocument, anchor: &Anchor) -> Result<MentionFeatures> {
    let sentence = doc.containing_sentence(anchor)?;
    let tokens = &doc.tokens;
    let (start, end) = (anchor.start, anchor.end);

    let mut left: Vec<String> = Vec::with_capacity(CONTEXT_WINDOW);
    let left_begin = start.saturating_sub(CONTEXT_WINDOW);
    left.extend((0..CONTEXT_WINDOW - (start - left_begin)).map(|_| PAD.to_string()));
    left.extend(tokens[left_begin..start].iter().cloned());

    let right_end = (end + CONTEXT_WINDOW).min(tokens.len());
    let mut right: Vec<String> = tokens[end..right_end].to_vec();
    right.resize(CONTEXT_WINDOW, PAD.to_string());

    let mut sent: Vec<String> = Vec::with_capacity(sentence.1 - sentence.0);
    sent.extend(tokens[sentence.0..start].iter().cloned());
    sent.push(PLACEHOLDER.to_string());
    sent.extend(tokens[end..sentence.1].iter().cloned());

    Ok(MentionFeatures {
        span: TextFeature::new(tokens[start..end].to_vec()),
        left_context: TextFeature::new(left),
        right_context: TextFeature::new(right),
        sentence: TextFeature::new(sent),
    })
}

/// Title and paragraph are tokenized; categories stay verbatim.
pub fn entity_features(record: &EntityRecord) -> EntityFeatures {
    EntityFeatures {
        title: TextFeature::new(tokenize(&record.title)),
        paragraph: TextFeature::new(tokenize(&record.paragraph)),
        categories: record.categories.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn strings(tokens: &[&str]) -> Vec<String> {
        tokens.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn tokenize_rules() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("The Cat, sat."), strings(&["the", "cat", "sat"]));
        assert_eq!(
            tokenize("AC Milan's forward"),
            strings(&["ac", "milan's", "forward"])
        );
        assert_eq!(tokenize("  -- (1999)  "), strings(&["1999"]));
    }

    #[test]
    fn ngram_extraction() {
        let (u, b) = extract_ngrams(&["a"]);
        assert_eq!(u, vec![Ngram::Unigram("a")]);
        assert!(b.is_empty());
        let (u, b) = extract_ngrams(&["the", "cat", "sat"]);
        assert_eq!(u.len(), 3);
        assert_eq!(
            b,
            vec![Ngram::Bigram("the", "cat"), Ngram::Bigram("cat", "sat")]
        );
        let empty: [&str; 0] = [];
        let (u, b) = extract_ngrams(&empty);
        assert!(u.is_empty() && b.is_empty());
    }

    /// Byte-at-a-time FNV-1a written independently of `fnv1a64_parts`.
    fn reference_fnv(bytes: &[u8]) -> u64 {
        let mut h: u64 = 14695981039346656037;
        for b in bytes {
            h = (h ^ *b as u64).wrapping_mul(1099511628211);
        }
        h
    }

    #[test]
    fn fnv_known_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn oov_ids_hash_into_buckets() {
        let vocab = NgramVocabulary::from_entries([(String::from("the"), 17u32)].into_iter().chain(
            (2..17).map(|i| (alloc::format!("w{i}"), i)),
        ), 8)
        .unwrap();
        assert_eq!(vocab.vocab_size(), 18);
        assert_eq!(vocab.ngram_id(&Ngram::Unigram("the")), 17);

        let id = vocab.ngram_id(&Ngram::Unigram("zzyzx"));
        assert_eq!(id as u64, 18 + reference_fnv(b"zzyzx") % 8);

        let bigram = Ngram::Bigram("zzy", "zx");
        let first = vocab.ngram_id(&bigram);
        assert_eq!(first, vocab.ngram_id(&bigram));
        assert!((18..26).contains(&first));
        assert_eq!(first as u64, 18 + reference_fnv(b"zzy zx") % 8);
    }

    #[test]
    fn vocabulary_rejects_gaps() {
        assert!(NgramVocabulary::from_entries([("a", 5u32)], 4).is_err());
        assert!(NgramVocabulary::reserved_only(0).is_err());
    }

    #[test]
    fn vocabulary_frequency_and_ties() {
        let texts = [strings(&["the", "cat"]), strings(&["the", "dog"])];
        let vocab = build_vocabulary(texts.iter().map(|t| t.as_slice()), 1, 16).unwrap();
        assert_eq!(vocab.fixed_id(&Ngram::Unigram("the")), Some(2));
        assert_eq!(vocab.fixed_id(&Ngram::Unigram("cat")), None);

        let ties = [strings(&["ab"]), strings(&["aa"])];
        let vocab = build_vocabulary(ties.iter().map(|t| t.as_slice()), 1, 16).unwrap();
        assert_eq!(vocab.fixed_id(&Ngram::Unigram("aa")), Some(2));
        assert_eq!(vocab.fixed_id(&Ngram::Unigram("ab")), None);

        let vocab = build_vocabulary(texts.iter().map(|t| t.as_slice()), 0, 16).unwrap();
        assert_eq!(vocab.vocab_size(), 2);
        assert!(vocab.ngram_id(&Ngram::Unigram("the")) >= 2);
    }

    #[test]
    fn reserved_tokens_are_not_counted() {
        let texts = [strings(&[PAD, PAD, PLACEHOLDER, "x"])];
        let vocab = build_vocabulary(texts.iter().map(|t| t.as_slice()), 10, 4).unwrap();
        let keys: Vec<&str> = vocab.entries().map(|(k, _)| k).collect();
        assert!(keys.contains(&"x"));
        assert!(keys.contains(&"<mention> x"));
        assert_eq!(vocab.vocab_size(), 4);
    }

    #[test]
    fn encode_text_drops_padding() {
        let vocab = NgramVocabulary::reserved_only(32).unwrap();
        let plain = encode_text(&TextFeature::from(&["a", "b"][..]), &vocab);
        let padded = encode_text(&TextFeature::from(&[PAD, "a", "b", PAD, PAD][..]), &vocab);
        assert_eq!(plain, padded);
        let only_pad = encode_text(&TextFeature::from(&[PAD, PAD][..]), &vocab);
        assert_eq!(only_pad, EncodedText::default());
    }

    #[test]
    fn entity_feature_rules() {
        let record = EntityRecord {
            entity_id: "Q1".into(),
            title: "Jorge Costa".into(),
            paragraph: String::new(),
            categories: vec![],
        };
        let f = entity_features(&record);
        assert_eq!(f.title.tokens, strings(&["jorge", "costa"]));
        assert!(f.paragraph.tokens.is_empty());
        assert!(f.categories.is_empty());

        let record = EntityRecord {
            categories: vec!["Portuguese footballers".into()],
            ..record
        };
        let f = entity_features(&record);
        assert_eq!(f.categories, vec!["Portuguese footballers".to_string()]);
        assert_eq!(f, entity_features(&record));
    }
}
