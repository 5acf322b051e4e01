//! Corpus BLEU with 13a tokenization and exponential smoothing, and
//! ROUGE-1/2/L F-measures.
//!
//! BLEU is case-sensitive. ROUGE lowercases after 13a tokenization and is
//! averaged over examples. Reports use the 0–100 scale.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;

fn rules() -> &'static [(Regex, &'static str); 4] {
    static RULES: OnceLock<[(Regex, &'static str); 4]> = OnceLock::new();
    RULES.get_or_init(|| {
        [
            (Regex::new(r"([\{-~\[-` -&\(-\+:-@/])").unwrap(), " $1 "),
            (Regex::new(r"([^0-9])([\.,])").unwrap(), "$1 $2 "),
            (Regex::new(r"([\.,])([^0-9])").unwrap(), " $1 $2"),
            (Regex::new(r"([0-9])(-)").unwrap(), "$1 $2 "),
        ]
    })
}

/// The 13a ("mteval-v13a") tokenization: split punctuation and symbols off
/// words, keep periods and commas inside numbers, collapse whitespace.
pub fn tokenize_13a(text: &str) -> Vec<String> {
    let mut line = text
        .replace("<skipped>", "")
        .replace("-\n", "")
        .replace('\n', " ");
    if line.contains('&') {
        line = line
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let mut line = format!(" {line} ");
    for (re, rep) in rules() {
        line = re.replace_all(&line, *rep).into_owned();
    }
    line.split_whitespace().map(String::from).collect()
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            let key: Vec<&str> = w.iter().map(AsRef::as_ref).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// Size of the multiset intersection of the n-grams of `hyp` and `reference`.
fn clipped_overlap<T: AsRef<str>>(hyp: &[T], reference: &[T], n: usize) -> usize {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    h.iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub score: f64,
    pub ngram_precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn check_aligned(hyps: usize, refs: usize) -> Result<()> {
    if hyps != refs {
        return Err(Error::InvalidArgument(format!(
            "{hyps} hypotheses but {refs} references"
        )));
    }
    if hyps == 0 {
        return Err(Error::EmptyInput("hypothesis set".into()));
    }
    Ok(())
}

/// Corpus-level 4-gram BLEU. Clipped n-gram matches and totals are summed
/// over the corpus first. A zero match count at order n is replaced by
/// `1 / (2^k · total_n)`, k counting the zero orders so far; an order with no
/// hypothesis n-grams at all yields precision 0 and therefore score 0.
pub fn corpus_bleu<S: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[S],
    references: &[R],
) -> Result<BleuReport> {
    check_aligned(hypotheses.len(), references.len())?;
    let mut correct = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let h = tokenize_13a(h.as_ref());
        let r = tokenize_13a(r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            correct[n - 1] += clipped_overlap(&h, &r, n);
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }

    let mut precisions = [0.0; MAX_ORDER];
    let mut smooth = 1.0;
    for n in 0..MAX_ORDER {
        if total[n] == 0 {
            break;
        }
        precisions[n] = if correct[n] == 0 {
            smooth *= 2.0;
            1.0 / (smooth * total[n] as f64)
        } else {
            correct[n] as f64 / total[n] as f64
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if correct[0] == 0 || precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport {
        score,
        ngram_precisions: precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrfScore {
    fn from_counts(overlap: usize, hyp: usize, reference: usize) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(overlap, hyp);
        let recall = ratio(overlap, reference);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        PrfScore {
            precision,
            recall,
            f1,
        }
    }
}

fn rouge_tokens(text: &str) -> Vec<String> {
    tokenize_13a(text)
        .into_iter()
        .map(|t| t.to_lowercase())
        .collect()
}

/// ROUGE-N over token lists.
pub fn rouge_n_tokens<T: AsRef<str>>(hyp: &[T], reference: &[T], n: usize) -> PrfScore {
    let overlap = clipped_overlap(hyp, reference, n);
    let count = |t: &[T]| t.len().saturating_sub(n - 1);
    PrfScore::from_counts(overlap, count(hyp), count(reference))
}

pub fn rouge_n(hypothesis: &str, reference: &str, n: usize) -> Result<PrfScore> {
    if !(1..=2).contains(&n) {
        return Err(Error::InvalidArgument(format!(
            "ROUGE-N supports n in {{1, 2}}, got {n}"
        )));
    }
    Ok(rouge_n_tokens(
        &rouge_tokens(hypothesis),
        &rouge_tokens(reference),
        n,
    ))
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens<T: PartialEq>(hyp: &[T], reference: &[T]) -> PrfScore {
    PrfScore::from_counts(lcs_len(hyp, reference), hyp.len(), reference.len())
}

pub fn rouge_l(hypothesis: &str, reference: &str) -> PrfScore {
    rouge_l_tokens(&rouge_tokens(hypothesis), &rouge_tokens(reference))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RougeReport {
    pub rouge1: PrfScore,
    pub rouge2: PrfScore,
    pub rouge_l: PrfScore,
}

/// ROUGE-1, ROUGE-2 and ROUGE-L of one hypothesis.
pub fn rouge(hypothesis: &str, reference: &str) -> RougeReport {
    let h = rouge_tokens(hypothesis);
    let r = rouge_tokens(reference);
    RougeReport {
        rouge1: rouge_n_tokens(&h, &r, 1),
        rouge2: rouge_n_tokens(&h, &r, 2),
        rouge_l: rouge_l_tokens(&h, &r),
    }
}

/// Scores in the column order SacreBLEU, ROUGE-1, ROUGE-2, ROUGE-L, all
/// on 0–100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub sacrebleu: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub bp: f64,
    pub precisions: [f64; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
    pub config: MetricConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub bleu_tokenizer: String,
    pub bleu_smoothing: String,
    pub bleu_lowercase: bool,
    pub rouge_tokenizer: String,
    pub rouge_lowercase: bool,
    pub rouge_aggregation: String,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            bleu_tokenizer: "13a".into(),
            bleu_smoothing: "exp".into(),
            bleu_lowercase: false,
            rouge_tokenizer: "13a".into(),
            rouge_lowercase: true,
            rouge_aggregation: "mean-of-examples".into(),
        }
    }
}

impl EvaluationReport {
    /// The four headline scores, formatted to two decimals.
    pub fn summary_line(&self) -> String {
        format!(
            "SacreBLEU {:.2}  ROUGE-1 {:.2}  ROUGE-2 {:.2}  ROUGE-L {:.2}",
            self.sacrebleu, self.rouge1, self.rouge2, self.rouge_l
        )
    }
}

pub fn evaluate_corpus<S: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[S],
    references: &[R],
) -> Result<EvaluationReport> {
    let bleu = corpus_bleu(hypotheses, references)?;
    let n = hypotheses.len() as f64;
    let (mut r1, mut r2, mut rl) = (0.0, 0.0, 0.0);
    for (h, r) in hypotheses.iter().zip(references) {
        let scores = rouge(h.as_ref(), r.as_ref());
        r1 += scores.rouge1.f1;
        r2 += scores.rouge2.f1;
        rl += scores.rouge_l.f1;
    }
    Ok(EvaluationReport {
        sacrebleu: bleu.score,
        rouge1: 100.0 * r1 / n,
        rouge2: 100.0 * r2 / n,
        rouge_l: 100.0 * rl / n,
        bp: bleu.brevity_penalty,
        precisions: bleu.ngram_precisions.map(|p| 100.0 * p),
        hyp_len: bleu.hyp_len,
        ref_len: bleu.ref_len,
        config: MetricConfig::default(),
    })
}
