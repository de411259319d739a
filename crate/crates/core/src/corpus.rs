//! Entity catalogs, annotated documents, train/heldout splits and the
//! synthetic corpus generator.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::{mention_features, MentionFeatures};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityRecord {
    pub entity_id: String,
    pub title: String,
    pub paragraph: String,
    pub categories: Vec<String>,
}

impl EntityRecord {
    pub fn validate(&self) -> Result<()> {
        if self.entity_id.is_empty() {
            return Err(Error::InvalidEntity("empty entity id".into()));
        }
        if self.title.trim().is_empty() {
            return Err(Error::InvalidEntity(format!(
                "entity {:?} has an empty title",
                self.entity_id
            )));
        }
        Ok(())
    }
}

/// Ordered set of entity records with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntityCatalog {
    records: Vec<EntityRecord>,
    positions: BTreeMap<String, usize>,
}

impl EntityCatalog {
    pub fn new(records: Vec<EntityRecord>) -> Result<Self> {
        let mut catalog = Self::default();
        for record in records {
            catalog.push(record)?;
        }
        Ok(catalog)
    }

    pub fn push(&mut self, record: EntityRecord) -> Result<()> {
        record.validate()?;
        if self.positions.contains_key(&record.entity_id) {
            return Err(Error::DuplicateEntity(record.entity_id));
        }
        self.positions
            .insert(record.entity_id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EntityRecord] {
        &self.records
    }

    pub fn position(&self, entity_id: &str) -> Option<usize> {
        self.positions.get(entity_id).copied()
    }

    pub fn get(&self, entity_id: &str) -> Option<&EntityRecord> {
        self.position(entity_id).map(|i| &self.records[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.entity_id.as_str())
    }
}

/// Half-open token range linked to a gold entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Anchor {
    pub start: usize,
    pub end: usize,
    pub entity_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedDocument {
    pub doc_id: String,
    pub tokens: Vec<String>,
    /// Half-open token ranges, sorted and non-overlapping.
    pub sentences: Vec<(usize, usize)>,
    pub anchors: Vec<Anchor>,
}

impl AnnotatedDocument {
    pub fn validate(&self) -> Result<()> {
        let len = self.tokens.len();
        let mut prev_end = 0;
        for &(start, end) in &self.sentences {
            if start >= end || end > len || start < prev_end {
                return Err(Error::InvalidSentence {
                    doc_id: self.doc_id.clone(),
                    start,
                    end,
                });
            }
            prev_end = end;
        }
        for anchor in &self.anchors {
            self.containing_sentence(anchor)?;
        }
        Ok(())
    }

    /// The single sentence range that holds `anchor`.
    pub fn containing_sentence(&self, anchor: &Anchor) -> Result<(usize, usize)> {
        let len = self.tokens.len();
        if anchor.start >= anchor.end || anchor.end > len {
            return Err(Error::AnchorOutOfRange {
                doc_id: self.doc_id.clone(),
                start: anchor.start,
                end: anchor.end,
                len,
            });
        }
        self.sentences
            .iter()
            .copied()
            .find(|&(s, e)| s <= anchor.start && anchor.end <= e)
            .ok_or_else(|| Error::AnchorCrossesSentence {
                doc_id: self.doc_id.clone(),
                start: anchor.start,
                end: anchor.end,
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MentionExample {
    pub mention_id: String,
    pub features: MentionFeatures,
    pub gold_entity_id: String,
}

/// Turns every anchor into a training example; mention ids are
/// `"{doc_id}#{anchor_index}"`.
pub fn mention_examples(
    docs: &[AnnotatedDocument],
    catalog: &EntityCatalog,
) -> Result<Vec<MentionExample>> {
    let mut out = Vec::new();
    for doc in docs {
        for (i, anchor) in doc.anchors.iter().enumerate() {
            if catalog.position(&anchor.entity_id).is_none() {
                return Err(Error::UnknownEntity(anchor.entity_id.clone()));
            }
            out.push(MentionExample {
                mention_id: format!("{}#{}", doc.doc_id, i),
                features: mention_features(doc, anchor)?,
                gold_entity_id: anchor.entity_id.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<MentionExample>,
    pub heldout: Vec<MentionExample>,
    pub holdout_fraction: f64,
}

/// Seeded shuffle followed by a cut. The heldout side gets
/// `round(fraction * n)` examples, at least one and at most `n - 1`.
pub fn split_examples(
    mut examples: Vec<MentionExample>,
    holdout_fraction: f64,
    seed: u64,
) -> Result<CorpusSplit> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::InvalidFraction(holdout_fraction));
    }
    let total = examples.len();
    if total < 2 {
        return Err(Error::TooFewExamples {
            needed: 2,
            got: total,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    examples.shuffle(&mut rng);
    let heldout_len = (libm::round(holdout_fraction * total as f64) as usize).clamp(1, total - 1);
    let heldout = examples.split_off(total - heldout_len);
    Ok(CorpusSplit {
        train: examples,
        heldout,
        holdout_fraction,
    })
}

/// Shape of a synthetic corpus.
///
/// Entities are grouped into surname families. A mention is either the full
/// name (unique) or, with probability `ambiguous_fraction`, the bare surname,
/// which every member of the family shares. Only the context words, drawn
/// from each entity's private topic vocabulary, tell family members apart.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub entities: usize,
    pub families: usize,
    pub topic_vocab: usize,
    pub mentions_per_entity: usize,
    pub ambiguous_fraction: f64,
    /// Private topic words placed in each mention's sentence.
    pub topic_words_per_mention: usize,
    /// Words from a pool shared by the whole family, placed in each
    /// mention's sentence. They carry no disambiguating signal.
    pub family_words_per_mention: usize,
    pub anchors_per_document: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            entities: 200,
            families: 40,
            topic_vocab: 6,
            mentions_per_entity: 20,
            ambiguous_fraction: 0.6,
            topic_words_per_mention: 3,
            family_words_per_mention: 0,
            anchors_per_document: 4,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.entities == 0 {
            return bad("synthetic corpus needs at least one entity");
        }
        if self.mentions_per_entity == 0 {
            return bad("synthetic corpus needs at least one mention per entity");
        }
        if self.families == 0 || self.families > self.entities {
            return bad("families must be in 1..=entities");
        }
        if self.topic_vocab == 0 {
            return bad("topic_vocab must be positive");
        }
        if self.topic_words_per_mention > self.topic_vocab {
            return bad("topic_words_per_mention exceeds topic_vocab");
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction) {
            return bad("ambiguous_fraction must be in [0, 1]");
        }
        if self.anchors_per_document == 0 {
            return bad("anchors_per_document must be positive");
        }
        Ok(())
    }
}

const FILLER: &[&str] = &[
    "the", "of", "and", "in", "to", "a", "was", "for", "on", "with", "as", "by", "at", "from",
    "his", "her", "has", "had", "after", "during", "their", "this", "that", "also", "which",
    "later", "when", "where", "who", "new", "first", "season", "said", "year", "into", "over",
];
const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "ch", "dr",
    "gl", "kr", "pl", "st", "tr", "sh",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou", "ei"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "l", "m"];
const FAMILY_POOL: usize = 8;
const FRAMES: usize = 8;

/// Draws pronounceable words that never repeat within one corpus.
struct WordMill {
    used: BTreeSet<String>,
}

impl WordMill {
    fn new() -> Self {
        Self {
            used: FILLER.iter().map(|w| w.to_string()).collect(),
        }
    }

    fn fresh(&mut self, rng: &mut ChaCha8Rng, syllables: usize) -> String {
        loop {
            let mut word = String::new();
            for _ in 0..syllables {
                word.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
                word.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
            }
            word.push_str(CODAS[rng.gen_range(0..CODAS.len())]);
            if self.used.insert(word.clone()) {
                return word;
            }
        }
    }
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Deterministic corpus of ambiguous mentions; see [`SyntheticConfig`].
/// Entity `i` has id `Q{i+1}` and belongs to family `i % families`.
pub fn generate_synthetic(
    config: &SyntheticConfig,
    seed: u64,
) -> Result<(EntityCatalog, Vec<AnnotatedDocument>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mill = WordMill::new();

    let surnames: Vec<String> = (0..config.families)
        .map(|_| mill.fresh(&mut rng, 2))
        .collect();
    let family_pools: Vec<Vec<String>> = (0..config.families)
        .map(|_| (0..FAMILY_POOL).map(|_| mill.fresh(&mut rng, 3)).collect())
        .collect();
    let domains: Vec<String> = (0..config.entities.div_ceil(10))
        .map(|_| mill.fresh(&mut rng, 3))
        .collect();

    struct Person {
        first: String,
        family: usize,
        topics: Vec<String>,
    }
    let mut people = Vec::with_capacity(config.entities);
    let mut records = Vec::with_capacity(config.entities);
    for i in 0..config.entities {
        let family = i % config.families;
        let first = mill.fresh(&mut rng, 2);
        let topics: Vec<String> = (0..config.topic_vocab)
            .map(|_| mill.fresh(&mut rng, 3))
            .collect();
        let surname = &surnames[family];
        let title = format!("{} {}", capitalize(&first), capitalize(surname));
        let domain = &domains[i / 10];
        let paragraph = format!(
            "{title} is a {domain} figure known for {}.",
            topics.join(", ")
        );
        records.push(EntityRecord {
            entity_id: format!("Q{}", i + 1),
            title,
            paragraph,
            categories: alloc::vec![
                format!("{} people", capitalize(domain)),
                format!("{} family", capitalize(surname)),
            ],
        });
        people.push(Person {
            first,
            family,
            topics,
        });
    }
    let mut family_size = alloc::vec![0usize; config.families];
    for p in &people {
        family_size[p.family] += 1;
    }

    // Filler words come from a few fixed frames so that the filler
    // pattern of a sentence cannot identify it.
    let frames: Vec<Vec<String>> = (0..FRAMES)
        .map(|_| {
            (0..10)
                .map(|_| FILLER[rng.gen_range(0..FILLER.len())].to_string())
                .collect()
        })
        .collect();

    let mut order: Vec<usize> = (0..config.entities)
        .flat_map(|e| core::iter::repeat_n(e, config.mentions_per_entity))
        .collect();
    order.shuffle(&mut rng);

    let mut docs = Vec::new();
    for (d, chunk) in order.chunks(config.anchors_per_document).enumerate() {
        let mut tokens: Vec<String> = Vec::new();
        let mut sentences = Vec::new();
        let mut anchors = Vec::new();
        for &entity in chunk {
            let person = &people[entity];
            let ambiguous = family_size[person.family] > 1
                && rng.gen_bool(config.ambiguous_fraction);
            let span: Vec<String> = if ambiguous {
                alloc::vec![surnames[person.family].clone()]
            } else {
                alloc::vec![person.first.clone(), surnames[person.family].clone()]
            };

            // topic words travel as one phrase: "about t1 and t2"
            let mut phrase = vec![String::from("about")];
            for (k, t) in person
                .topics
                .choose_multiple(&mut rng, config.topic_words_per_mention)
                .enumerate()
            {
                if k > 0 {
                    phrase.push(String::from("and"));
                }
                phrase.push(t.clone());
            }
            let mut pieces: Vec<Vec<String>> = Vec::new();
            if config.topic_words_per_mention > 0 {
                pieces.push(phrase);
            }
            let pool = &family_pools[person.family];
            for _ in 0..config.family_words_per_mention {
                pieces.push(vec![pool[rng.gen_range(0..pool.len())].clone()]);
            }
            let filler_count = 10usize.saturating_sub(pieces.len() + config.topic_words_per_mention).max(4);
            let frame = &frames[rng.gen_range(0..frames.len())];
            let mut context: Vec<String> = frame.iter().take(filler_count).cloned().collect();
            for piece in pieces {
                let at = rng.gen_range(0..=context.len());
                context.splice(at..at, piece);
            }
            let cut = rng.gen_range(1..context.len());

            let start = tokens.len();
            tokens.extend(context[..cut].iter().cloned());
            let span_start = tokens.len();
            tokens.extend(span);
            let span_end = tokens.len();
            tokens.extend(context[cut..].iter().cloned());
            sentences.push((start, tokens.len()));
            anchors.push(Anchor {
                start: span_start,
                end: span_end,
                entity_id: records[entity].entity_id.clone(),
            });
        }
        docs.push(AnnotatedDocument {
            doc_id: format!("doc{d:05}"),
            tokens,
            sentences,
            anchors,
        });
    }
    Ok((EntityCatalog::new(records)?, docs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{PAD, PLACEHOLDER};
    use alloc::vec;

    fn record(id: &str) -> EntityRecord {
        EntityRecord {
            entity_id: id.into(),
            title: format!("Title {id}"),
            paragraph: String::new(),
            categories: vec![],
        }
    }

    fn doc(n: usize, sentences: Vec<(usize, usize)>, anchors: Vec<(usize, usize)>) -> AnnotatedDocument {
        AnnotatedDocument {
            doc_id: "d".into(),
            tokens: (0..n).map(|i| format!("t{i}")).collect(),
            sentences,
            anchors: anchors
                .into_iter()
                .map(|(start, end)| Anchor {
                    start,
                    end,
                    entity_id: "Q1".into(),
                })
                .collect(),
        }
    }

    fn example(i: usize) -> MentionExample {
        let d = doc(3, vec![(0, 3)], vec![(1, 2)]);
        MentionExample {
            mention_id: format!("m{i}"),
            features: mention_features(&d, &d.anchors[0]).unwrap(),
            gold_entity_id: format!("Q{i}"),
        }
    }

    #[test]
    fn catalog_rejects_duplicates() {
        assert!(EntityCatalog::new(vec![]).unwrap().is_empty());
        let c = EntityCatalog::new(vec![record("A"), record("B"), record("C")]).unwrap();
        assert_eq!(c.ids().collect::<Vec<_>>(), ["A", "B", "C"]);
        let err = EntityCatalog::new(vec![record("Q1"), record("Q1")]).unwrap_err();
        assert_eq!(err, Error::DuplicateEntity("Q1".into()));
        let mut untitled = record("Q2");
        untitled.title = " ".into();
        assert!(EntityCatalog::new(vec![untitled]).is_err());
    }

    #[test]
    fn anchor_validation() {
        assert!(doc(7, vec![(0, 7)], vec![(3, 4)]).validate().is_ok());
        assert!(matches!(
            doc(7, vec![(0, 7)], vec![(6, 9)]).validate(),
            Err(Error::AnchorOutOfRange { .. })
        ));
        assert!(matches!(
            doc(7, vec![(0, 4), (4, 7)], vec![(3, 5)]).validate(),
            Err(Error::AnchorCrossesSentence { .. })
        ));
        assert!(matches!(
            doc(7, vec![(0, 4), (3, 7)], vec![]).validate(),
            Err(Error::InvalidSentence { .. })
        ));
    }

    #[test]
    fn context_windows_and_placeholder() {
        let d = doc(12, vec![(0, 12)], vec![(5, 6), (0, 1)]);
        let f = mention_features(&d, &d.anchors[0]).unwrap();
        assert_eq!(f.left_context.tokens, d.tokens[0..5]);
        assert_eq!(f.right_context.tokens, d.tokens[6..11]);

        let f = mention_features(&d, &d.anchors[1]).unwrap();
        assert!(f.left_context.tokens.iter().all(|t| t == PAD));
        assert_eq!(f.left_context.tokens.len(), 5);

        let costa = AnnotatedDocument {
            doc_id: "c".into(),
            tokens: ["costa", "has", "not", "played"].iter().map(|s| s.to_string()).collect(),
            sentences: vec![(0, 4)],
            anchors: vec![Anchor { start: 0, end: 1, entity_id: "Q1".into() }],
        };
        let f = mention_features(&costa, &costa.anchors[0]).unwrap();
        assert_eq!(f.sentence.tokens, [PLACEHOLDER, "has", "not", "played"]);
        assert_eq!(f.span.tokens, ["costa"]);
        assert_eq!(f.right_context.tokens, ["has", "not", "played", PAD, PAD]);
    }

    #[test]
    fn split_sizes() {
        let ex: Vec<_> = (0..1000).map(example).collect();
        let s = split_examples(ex, 0.001, 3).unwrap();
        assert_eq!((s.train.len(), s.heldout.len()), (999, 1));

        let ex: Vec<_> = (0..10).map(example).collect();
        let s = split_examples(ex.clone(), 0.2, 3).unwrap();
        assert_eq!(s.heldout.len(), 2);
        assert!(s.heldout.iter().all(|h| !s.train.contains(h)));
        assert_eq!(s, split_examples(ex.clone(), 0.2, 3).unwrap());

        assert_eq!(
            split_examples(ex.clone(), 1.0, 0).unwrap_err(),
            Error::InvalidFraction(1.0)
        );
        assert!(split_examples(ex.clone(), 0.0, 0).is_err());
        assert!(split_examples(vec![example(0)], 0.5, 0).is_err());
    }

    #[test]
    fn synthetic_shape() {
        let cfg = SyntheticConfig {
            entities: 200,
            families: 40,
            mentions_per_entity: 20,
            ..SyntheticConfig::default()
        };
        let (catalog, docs) = generate_synthetic(&cfg, 7).unwrap();
        assert_eq!(catalog.len(), 200);
        assert_eq!(docs.iter().map(|d| d.anchors.len()).sum::<usize>(), 4000);
        for d in &docs {
            d.validate().unwrap();
        }
        for r in catalog.records() {
            assert!(!r.paragraph.is_empty() && !r.categories.is_empty());
        }
        assert_eq!(generate_synthetic(&cfg, 7).unwrap(), (catalog, docs));
    }

    #[test]
    fn two_entity_family_shares_surname() {
        let cfg = SyntheticConfig {
            entities: 2,
            families: 1,
            mentions_per_entity: 5,
            ..SyntheticConfig::default()
        };
        let (catalog, _) = generate_synthetic(&cfg, 1).unwrap();
        let titles: Vec<Vec<String>> = catalog
            .records()
            .iter()
            .map(|r| crate::features::tokenize(&r.title))
            .collect();
        assert_eq!(titles[0][1], titles[1][1]);
        let topics = |r: &EntityRecord| -> BTreeSet<String> {
            let para = crate::features::tokenize(&r.paragraph);
            let at = para.iter().position(|t| t == "for").unwrap();
            para[at + 1..].iter().cloned().collect()
        };
        let (a, b) = (topics(&catalog.records()[0]), topics(&catalog.records()[1]));
        assert_eq!(a.len(), cfg.topic_vocab);
        assert!(a.is_disjoint(&b));
    }

    #[test]
    fn synthetic_rejects_empty_configs() {
        let zero = SyntheticConfig { entities: 0, ..SyntheticConfig::default() };
        assert!(generate_synthetic(&zero, 0).is_err());
        let zero = SyntheticConfig { mentions_per_entity: 0, ..SyntheticConfig::default() };
        assert!(generate_synthetic(&zero, 0).is_err());
    }
}
