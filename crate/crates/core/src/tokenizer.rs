//! Character-based byte-pair-encoding tokenizer with vocabulary expansion.
//!
//! Base symbols are Unicode scalar values. Text is pre-split into chunks of
//! the form `<whitespace*><non-whitespace+>`; merges never cross chunk
//! boundaries, so decoding is plain concatenation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_file, write_file};
use crate::error::{Error, Result};

pub const UNK_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const PAD_ID: u32 = 3;

const SPECIALS: [&str; 4] = ["<unk>", "<s>", "</s>", "<pad>"];

/// Surface form of the unknown token in decoded text.
pub const UNK_MARKER: &str = "⟨unk⟩";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    merges: Vec<(String, String)>,
    merge_ranks: HashMap<(String, String), usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OovReport {
    pub total_symbols: usize,
    pub unk_symbols: usize,
    pub rate: f64,
    pub sample_unknowns: Vec<String>,
}

fn chunks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_ws = true;
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if ws && !prev_ws {
            out.push(&text[start..i]);
            start = i;
        }
        prev_ws = ws;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

fn is_special(token: &str) -> bool {
    SPECIALS.contains(&token)
}

impl Tokenizer {
    fn with_base(chars: impl IntoIterator<Item = char>) -> Self {
        let mut tok = Tokenizer {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
            merges: Vec::new(),
            merge_ranks: HashMap::new(),
        };
        for s in SPECIALS {
            tok.push_token(s.to_string());
        }
        for c in chars {
            let s = c.to_string();
            if !tok.token_to_id.contains_key(&s) {
                tok.push_token(s);
            }
        }
        tok
    }

    fn push_token(&mut self, token: String) -> u32 {
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
        id
    }

    fn push_merge(&mut self, pair: (String, String)) {
        self.merge_ranks.insert(pair.clone(), self.merges.len());
        self.merges.push(pair);
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn contains_char(&self, c: char) -> bool {
        let mut buf = [0u8; 4];
        self.token_to_id
            .contains_key(c.encode_utf8(&mut buf) as &str)
    }

    /// Encodes text by applying merges in training order. Characters with
    /// no vocabulary entry become [`UNK_ID`] and never take part in merges.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for chunk in chunks(text) {
            // `None` marks an unknown character.
            let mut symbols: Vec<Option<String>> = chunk
                .chars()
                .map(|c| Some(c.to_string()).filter(|s| self.token_to_id.contains_key(s)))
                .collect();
            loop {
                let best = symbols
                    .windows(2)
                    .enumerate()
                    .filter_map(|(i, w)| match (&w[0], &w[1]) {
                        (Some(a), Some(b)) => self
                            .merge_ranks
                            .get(&(a.clone(), b.clone()))
                            .map(|&rank| (rank, i)),
                        _ => None,
                    })
                    .min();
                let Some((rank, _)) = best else { break };
                let (a, b) = &self.merges[rank];
                let mut merged = Vec::with_capacity(symbols.len());
                let mut i = 0;
                while i < symbols.len() {
                    if i + 1 < symbols.len()
                        && symbols[i].as_ref() == Some(a)
                        && symbols[i + 1].as_ref() == Some(b)
                    {
                        merged.push(Some(format!("{a}{b}")));
                        i += 2;
                    } else {
                        merged.push(symbols[i].take());
                        i += 1;
                    }
                }
                symbols = merged;
            }
            ids.extend(symbols.iter().map(|s| match s {
                Some(tok) => self.token_to_id[tok],
                None => UNK_ID,
            }));
        }
        ids
    }

    /// Concatenates token surface forms. Unknown renders as [`UNK_MARKER`];
    /// the other special tokens render as nothing.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let token = self.token(id).ok_or(Error::TokenOutOfRange {
                id,
                vocab_size: self.vocab_size(),
            })?;
            match id {
                UNK_ID => out.push_str(UNK_MARKER),
                BOS_ID | EOS_ID | PAD_ID => {}
                _ => out.push_str(token),
            }
        }
        Ok(out)
    }

    /// Appends characters missing from the vocabulary with fresh ids.
    /// Existing ids and merges are untouched.
    pub fn expand_vocabulary<S: AsRef<str>>(&self, new_chars: &[S]) -> Result<Tokenizer> {
        let mut out = self.clone();
        for entry in new_chars {
            let entry = entry.as_ref();
            if entry.chars().count() != 1 {
                return Err(Error::InvalidArgument(format!(
                    "expansion entries must be single characters, got {entry:?}"
                )));
            }
            if !out.token_to_id.contains_key(entry) {
                out.push_token(entry.to_string());
            }
        }
        Ok(out)
    }

    pub fn oov_report<'a>(&self, texts: impl IntoIterator<Item = &'a str>) -> OovReport {
        let mut total = 0;
        let mut unk = 0;
        let mut sample = Vec::new();
        for text in texts {
            for c in text.chars() {
                total += 1;
                if !self.contains_char(c) {
                    unk += 1;
                    let s = c.to_string();
                    if sample.len() < 20 && !sample.contains(&s) {
                        sample.push(s);
                    }
                }
            }
        }
        OovReport {
            total_symbols: total,
            unk_symbols: unk,
            rate: unk as f64 / total.max(1) as f64,
            sample_unknowns: sample,
        }
    }

    pub fn to_json(&self, metadata: Option<&serde_json::Value>) -> String {
        let file = TokenizerFile {
            specials: Specials {
                unk: SPECIALS[0].into(),
                bos: SPECIALS[1].into(),
                eos: SPECIALS[2].into(),
                pad: SPECIALS[3].into(),
            },
            vocab: self
                .token_to_id
                .iter()
                .map(|(k, &v)| (k.clone(), v))
                .collect(),
            merges: self.merges.clone(),
            metadata: metadata.cloned(),
        };
        serde_json::to_string_pretty(&file).expect("tokenizer serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>, metadata: Option<&serde_json::Value>) -> Result<()> {
        write_file(path.as_ref(), self.to_json(metadata).as_bytes())
    }

    pub fn from_json(text: &str) -> Result<Tokenizer> {
        let file: TokenizerFile = serde_json::from_str(text)?;
        let bad = |m: String| Error::InvalidArgument(format!("tokenizer file: {m}"));
        let specials = [
            &file.specials.unk,
            &file.specials.bos,
            &file.specials.eos,
            &file.specials.pad,
        ];
        let n = file.vocab.len();
        let mut id_to_token = vec![None; n];
        for (token, &id) in &file.vocab {
            let slot = id_to_token
                .get_mut(id as usize)
                .ok_or_else(|| bad(format!("id {id} is not dense in 0..{n}")))?;
            if slot.is_some() {
                return Err(bad(format!("id {id} assigned twice")));
            }
            *slot = Some(token.clone());
        }
        let id_to_token: Vec<String> = id_to_token.into_iter().map(Option::unwrap).collect();
        for (i, s) in specials.iter().enumerate() {
            if id_to_token.get(i) != Some(*s) || s.as_str() != SPECIALS[i] {
                return Err(bad(format!("special token {s:?} must have id {i}")));
            }
        }
        let mut tok = Tokenizer {
            token_to_id: file.vocab.into_iter().collect(),
            id_to_token,
            merges: Vec::new(),
            merge_ranks: HashMap::new(),
        };
        for (a, b) in file.merges {
            for part in [&a, &b] {
                if !tok.token_to_id.contains_key(part) {
                    return Err(bad(format!("merge references unknown symbol {part:?}")));
                }
            }
            if !tok.token_to_id.contains_key(&format!("{a}{b}")) {
                return Err(bad(format!("merge result {a}{b:?} missing from vocab")));
            }
            tok.push_merge((a, b));
        }
        Ok(tok)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tokenizer> {
        Tokenizer::from_json(&read_file(path.as_ref())?)
    }
}

#[derive(Serialize, Deserialize)]
struct Specials {
    unk: String,
    bos: String,
    eos: String,
    pad: String,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    specials: Specials,
    vocab: BTreeMap<String, u32>,
    merges: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata: Option<serde_json::Value>,
}

/// Greedy BPE training: merge the most frequent adjacent pair until the
/// vocabulary reaches `target_vocab_size` or no pair occurs at least twice.
/// Ties go to the lexicographically smallest pair.
pub fn train_bpe<S: AsRef<str>>(corpus_texts: &[S], target_vocab_size: usize) -> Result<Tokenizer> {
    let mut chunk_counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut base: Vec<char> = Vec::new();
    let mut seen = HashSet::new();
    for text in corpus_texts {
        for chunk in chunks(text.as_ref()) {
            *chunk_counts.entry(chunk).or_insert(0) += 1;
            for c in chunk.chars() {
                if seen.insert(c) {
                    base.push(c);
                }
            }
        }
    }
    if chunk_counts.is_empty() {
        return Err(Error::EmptyInput("BPE training corpus".into()));
    }
    base.sort_unstable();
    if target_vocab_size <= base.len() + SPECIALS.len() {
        return Err(Error::InvalidArgument(format!(
            "target vocabulary size {target_vocab_size} must exceed {} base characters + {} specials",
            base.len(),
            SPECIALS.len()
        )));
    }

    let mut tok = Tokenizer::with_base(base);
    let mut words: Vec<(Vec<String>, usize)> = chunk_counts
        .into_iter()
        .map(|(chunk, n)| (chunk.chars().map(String::from).collect(), n))
        .collect();

    while tok.vocab_size() < target_vocab_size {
        let mut pair_counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (symbols, n) in &words {
            for w in symbols.windows(2) {
                *pair_counts.entry((&w[0], &w[1])).or_insert(0) += n;
            }
        }
        let best = pair_counts
            .into_iter()
            .filter(|&((a, b), n)| n >= 2 && !is_special(&format!("{a}{b}")))
            .min_by(|(p, n), (q, m)| m.cmp(n).then_with(|| p.cmp(q)));
        let Some(((a, b), _)) = best else { break };
        let (a, b) = (a.to_string(), b.to_string());
        let merged = format!("{a}{b}");

        for (symbols, _) in &mut words {
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i] == a && symbols[i + 1] == b {
                    symbols[i] = merged.clone();
                    symbols.remove(i + 1);
                }
                i += 1;
            }
        }
        if !tok.token_to_id.contains_key(&merged) {
            tok.push_token(merged);
        }
        tok.push_merge((a, b));
    }
    Ok(tok)
}
