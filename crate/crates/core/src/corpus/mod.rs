//! Term pairs, parallel corpora, deterministic splitting and the synthetic
//! keyword-stacked title generator.

pub mod lexicon;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An aligned bilingual domain term.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermPair {
    pub source: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl TermPair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        TermPair {
            source: source.into(),
            target: target.into(),
            category: None,
        }
    }

    pub fn with_category(mut self, category: impl Into<String>) -> Self {
        self.category = Some(category.into());
        self
    }
}

/// One source title and its reference translation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelExample {
    pub id: String,
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    File,
}

/// An ordered, non-empty collection of parallel examples with unique ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    examples: Vec<ParallelExample>,
    provenance: Provenance,
}

impl Corpus {
    pub fn new(examples: Vec<ParallelExample>, provenance: Provenance) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyInput("corpus".into()));
        }
        for ex in &examples {
            validate_text(&ex.source, "source")?;
            validate_text(&ex.target, "target")?;
        }
        let duplicates = duplicate_ids(&examples);
        if !duplicates.is_empty() {
            return Err(Error::DuplicateIds(duplicates));
        }
        Ok(Corpus {
            examples,
            provenance,
        })
    }

    pub fn examples(&self) -> &[ParallelExample] {
        &self.examples
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.source.as_str())
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.target.as_str())
    }

    /// Serializes as JSON Lines in corpus order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(ex).expect("example serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_jsonl().as_bytes())
    }
}

fn duplicate_ids(examples: &[ParallelExample]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut dups = Vec::new();
    for ex in examples {
        if !seen.insert(ex.id.as_str()) && !dups.contains(&ex.id) {
            dups.push(ex.id.clone());
        }
    }
    dups
}

fn validate_text(text: &str, field: &str) -> Result<()> {
    if text.trim().is_empty() {
        return Err(Error::InvalidArgument(format!("`{field}` is empty")));
    }
    if text.chars().any(char::is_control) {
        return Err(Error::InvalidArgument(format!(
            "`{field}` contains control characters: {text:?}"
        )));
    }
    Ok(())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses each non-blank line of a JSONL file, reporting 1-based line numbers.
fn parse_jsonl<T: for<'de> Deserialize<'de>>(
    path: &Path,
    mut check: impl FnMut(&T) -> Result<()>,
) -> Result<Vec<T>> {
    let text = read_file(path)?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let record: T = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        check(&record).map_err(|e| parse_err(e.to_string()))?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::EmptyInput(path.display().to_string()));
    }
    Ok(records)
}

pub fn load_term_pairs(path: impl AsRef<Path>) -> Result<Vec<TermPair>> {
    parse_jsonl(path.as_ref(), |p: &TermPair| {
        validate_text(&p.source, "source")?;
        validate_text(&p.target, "target")
    })
}

pub fn term_pairs_to_jsonl(pairs: &[TermPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p).expect("term pair serializes"));
        out.push('\n');
    }
    out
}

pub fn write_term_pairs(pairs: &[TermPair], path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), term_pairs_to_jsonl(pairs).as_bytes())
}

#[derive(Deserialize)]
struct ParallelRecord {
    #[serde(default)]
    id: Option<String>,
    source: String,
    target: String,
}

/// Loads a parallel corpus. Records without an `id` get their 0-based
/// record index as id.
pub fn load_parallel_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let records = parse_jsonl(path.as_ref(), |r: &ParallelRecord| {
        validate_text(&r.source, "source")?;
        validate_text(&r.target, "target")
    })?;
    let examples = records
        .into_iter()
        .enumerate()
        .map(|(i, r)| ParallelExample {
            id: r.id.unwrap_or_else(|| i.to_string()),
            source: r.source,
            target: r.target,
        })
        .collect();
    Corpus::new(examples, Provenance::File)
}

/// Seeded uniform shuffle followed by a prefix cut: the first part has
/// `train_count` examples, the second the rest.
pub fn split_corpus(corpus: &Corpus, train_count: usize, seed: u64) -> Result<(Corpus, Corpus)> {
    let n = corpus.len();
    if train_count == 0 || train_count >= n {
        return Err(Error::InvalidArgument(format!(
            "train_count must lie in 1..{n} (exclusive upper bound), got {train_count}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| -> Vec<ParallelExample> {
        idx.iter().map(|&i| corpus.examples[i].clone()).collect()
    };
    let (train, test) = order.split_at(train_count);
    Ok((
        Corpus {
            examples: pick(train),
            provenance: corpus.provenance,
        },
        Corpus {
            examples: pick(test),
            provenance: corpus.provenance,
        },
    ))
}

/// Stage-one training data: every term pair becomes a bare (source, target)
/// example.
pub fn term_pairs_as_corpus(pairs: &[TermPair]) -> Result<Corpus> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("term pairs".into()));
    }
    let examples = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| ParallelExample {
            id: format!("term-{i}"),
            source: p.source.clone(),
            target: p.target.clone(),
        })
        .collect();
    Corpus::new(examples, Provenance::File)
}

/// A non-term keyword with its aligned translation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordPair {
    pub source: String,
    pub target: String,
}

impl WordPair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        WordPair {
            source: source.into(),
            target: target.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub term_lexicon: Vec<TermPair>,
    pub filler_lexicon: Vec<WordPair>,
    /// Inclusive range of keywords per title.
    pub stack_length_range: (usize, usize),
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.stack_length_range;
        if lo < 2 || hi < lo {
            return Err(Error::InvalidArgument(format!(
                "stack_length_range must satisfy 2 <= lo <= hi, got ({lo}, {hi})"
            )));
        }
        if self.term_lexicon.is_empty() || self.filler_lexicon.is_empty() {
            return Err(Error::InvalidArgument(
                "generator lexicons must be non-empty".into(),
            ));
        }
        let sides = self
            .term_lexicon
            .iter()
            .map(|t| (&t.source, &t.target))
            .chain(self.filler_lexicon.iter().map(|w| (&w.source, &w.target)));
        for (source, target) in sides {
            validate_text(source, "source")?;
            validate_text(target, "target")?;
            if source.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!(
                    "generator keyword sources must be single tokens, got {source:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let spec: GeneratorSpec = serde_json::from_str(&read_file(path.as_ref())?)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Emits `count` keyword-stacked titles. Each title draws k keywords
/// uniformly from the union of both lexicons and joins source and target
/// sides with single spaces in the same order.
pub fn generate_synthetic_corpus(spec: &GeneratorSpec, count: usize) -> Result<Corpus> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    spec.validate()?;
    let entries: Vec<(&str, &str)> = spec
        .term_lexicon
        .iter()
        .map(|t| (t.source.as_str(), t.target.as_str()))
        .chain(
            spec.filler_lexicon
                .iter()
                .map(|w| (w.source.as_str(), w.target.as_str())),
        )
        .collect();
    let (lo, hi) = spec.stack_length_range;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = count.to_string().len().max(5);
    let examples = (0..count)
        .map(|i| {
            let k = rng.gen_range(lo..=hi);
            let mut src = Vec::with_capacity(k);
            let mut tgt = Vec::with_capacity(k);
            for _ in 0..k {
                let (s, t) = entries[rng.gen_range(0..entries.len())];
                src.push(s);
                tgt.push(t);
            }
            ParallelExample {
                id: format!("syn-{i:0width$}"),
                source: src.join(" "),
                target: tgt.join(" "),
            }
        })
        .collect();
    Corpus::new(examples, Provenance::Synthetic)
}

/// Number of occurrences of each distinct character across `texts`.
pub fn char_counts<'a>(texts: impl IntoIterator<Item = &'a str>) -> HashMap<char, usize> {
    let mut counts = HashMap::new();
    for text in texts {
        for c in text.chars() {
            *counts.entry(c).or_insert(0) += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::NamedTempFile;

    fn write_tmp(content: &str) -> NamedTempFile {
        let mut f = NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn ex(id: &str, s: &str, t: &str) -> ParallelExample {
        ParallelExample {
            id: id.into(),
            source: s.into(),
            target: t.into(),
        }
    }

    #[test]
    fn loads_term_pairs_in_order() {
        let f = write_tmp(
            "{\"source\":\"猫\",\"target\":\"Cat\"}\n\
             {\"source\":\"帐篷\",\"target\":\"Tent\",\"category\":\"home\"}\n\
             {\"source\":\"一件代发\",\"target\":\"One Piece Drop Shipping\"}\n",
        );
        let pairs = load_term_pairs(f.path()).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[0], TermPair::new("猫", "Cat"));
        assert_eq!(pairs[1].category.as_deref(), Some("home"));
        assert_eq!(
            pairs[2],
            TermPair::new("一件代发", "One Piece Drop Shipping")
        );
    }

    #[test]
    fn missing_target_reports_line() {
        let f = write_tmp("{\"source\":\"a\",\"target\":\"b\"}\n{\"source\":\"c\"}\n");
        match load_term_pairs(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = write_tmp("");
        assert!(matches!(
            load_term_pairs(f.path()),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            load_parallel_corpus(f.path()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn control_characters_rejected() {
        let f = write_tmp("{\"source\":\"a\\u0007\",\"target\":\"b\"}\n");
        assert!(matches!(
            load_term_pairs(f.path()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn parallel_corpus_assigns_ids() {
        let f = write_tmp(
            "{\"source\":\"猫\",\"target\":\"Cat\"}\n{\"id\":\"x\",\"source\":\"狗\",\"target\":\"Dog\"}\n",
        );
        let c = load_parallel_corpus(f.path()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.provenance(), Provenance::File);
        assert_eq!(c.examples()[0].id, "0");
        assert_eq!(c.examples()[1].id, "x");
    }

    #[test]
    fn duplicate_ids_are_named() {
        let mut lines = String::new();
        for i in 1..=10 {
            let id = if i == 4 || i == 9 {
                "t1".to_string()
            } else {
                format!("u{i}")
            };
            lines.push_str(&format!(
                "{{\"id\":\"{id}\",\"source\":\"s\",\"target\":\"t\"}}\n"
            ));
        }
        let f = write_tmp(&lines);
        match load_parallel_corpus(f.path()) {
            Err(Error::DuplicateIds(ids)) => assert_eq!(ids, vec!["t1".to_string()]),
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    fn numbered(n: usize) -> Corpus {
        let examples = (0..n).map(|i| ex(&format!("e{i}"), "源", "src")).collect();
        Corpus::new(examples, Provenance::File).unwrap()
    }

    #[test]
    fn split_sizes_and_bounds() {
        let (a, b) = split_corpus(&numbered(7000), 5000, 1).unwrap();
        assert_eq!((a.len(), b.len()), (5000, 2000));
        assert!(split_corpus(&numbered(10), 10, 1).is_err());
        assert!(split_corpus(&numbered(10), 0, 1).is_err());
    }

    #[test]
    fn split_is_deterministic() {
        let c = numbered(50);
        assert_eq!(
            split_corpus(&c, 30, 9).unwrap(),
            split_corpus(&c, 30, 9).unwrap()
        );
        assert_ne!(
            split_corpus(&c, 30, 9).unwrap().0,
            split_corpus(&c, 30, 10).unwrap().0
        );
    }

    fn cat_tent_spec(seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            term_lexicon: vec![TermPair::new("猫", "Cat")],
            filler_lexicon: vec![WordPair::new("帐篷", "Tent")],
            stack_length_range: (2, 2),
            seed,
        }
    }

    #[test]
    fn generator_aligns_by_construction() {
        let c = generate_synthetic_corpus(&cat_tent_spec(3), 20).unwrap();
        assert_eq!(c.provenance(), Provenance::Synthetic);
        for e in c.examples() {
            let expected: Vec<&str> = e
                .source
                .split(' ')
                .map(|k| if k == "猫" { "Cat" } else { "Tent" })
                .collect();
            assert_eq!(e.target, expected.join(" "));
        }
        assert!(c
            .examples()
            .iter()
            .any(|e| e.source == "猫 帐篷" && e.target == "Cat Tent"));
    }

    #[test]
    fn generator_rejects_bad_input() {
        assert!(generate_synthetic_corpus(&cat_tent_spec(1), 0).is_err());
        let mut spec = cat_tent_spec(1);
        spec.stack_length_range = (1, 3);
        assert!(generate_synthetic_corpus(&spec, 1).is_err());
    }

    #[test]
    fn generator_is_byte_identical_across_runs() {
        let spec = lexicon::domain_generator(&lexicon::domain_terms(200, 5), 11);
        let a = generate_synthetic_corpus(&spec, 500).unwrap().to_jsonl();
        let b = generate_synthetic_corpus(&spec, 500).unwrap().to_jsonl();
        assert_eq!(a, b);
    }

    #[test]
    fn term_pairs_become_examples() {
        let c = term_pairs_as_corpus(&[TermPair::new("鸡", "chicken")]).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.examples()[0].source, "鸡");
        assert_eq!(c.examples()[0].target, "chicken");
        assert!(term_pairs_as_corpus(&[]).is_err());
        let many: Vec<TermPair> = (0..20000)
            .map(|i| TermPair::new(format!("词{i}"), format!("w{i}")))
            .collect();
        assert_eq!(term_pairs_as_corpus(&many).unwrap().len(), 20000);
    }

    proptest! {
        #[test]
        fn split_partitions_ids(n in 2usize..60, frac in 0.01f64..0.99, seed in any::<u64>()) {
            let c = numbered(n);
            let k = ((n as f64 * frac) as usize).clamp(1, n - 1);
            let (a, b) = split_corpus(&c, k, seed).unwrap();
            let ids_a: HashSet<_> = a.examples().iter().map(|e| e.id.clone()).collect();
            let ids_b: HashSet<_> = b.examples().iter().map(|e| e.id.clone()).collect();
            prop_assert!(ids_a.is_disjoint(&ids_b));
            let all: HashSet<_> = c.examples().iter().map(|e| e.id.clone()).collect();
            prop_assert_eq!(ids_a.union(&ids_b).cloned().collect::<HashSet<_>>(), all);
        }

        #[test]
        fn load_serialize_load_is_identity(
            rows in prop::collection::vec(("[a-z猫狗 ]{0,6}[a-z猫狗]", "[A-Za-z' ]{0,8}[A-Za-z]"), 1..8)
        ) {
            let examples: Vec<_> = rows.iter().enumerate()
                .map(|(i, (s, t))| ex(&format!("r{i}"), s, t)).collect();
            let c = Corpus::new(examples, Provenance::File).unwrap();
            let f = write_tmp(&c.to_jsonl());
            let loaded = load_parallel_corpus(f.path()).unwrap();
            prop_assert_eq!(loaded.to_jsonl(), c.to_jsonl());
        }
    }
}
