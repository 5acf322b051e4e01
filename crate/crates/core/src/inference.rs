//! Batch translation and test-set scoring.

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TermPair};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_corpus, EvaluationReport};
use crate::model::ModelParameters;
use crate::tokenizer::{Tokenizer, EOS_ID};
use crate::training::{run_pipeline, StagePlan, TrainConfig};

/// Output budget for a source of `src_len` tokens: twice the source plus a
/// small constant, within the model's positional range.
pub fn decode_budget(src_len: usize, max_seq_len: usize) -> usize {
    (2 * src_len + 10).min(max_seq_len - 1)
}

/// Model and tokenizer must agree on the vocabulary size exactly.
pub fn check_vocab(model: &ModelParameters, tokenizer: &Tokenizer) -> Result<()> {
    if tokenizer.vocab_size() != model.config().vocab_size {
        return Err(Error::VocabMismatch {
            checkpoint: model.config().vocab_size,
            tokenizer: tokenizer.vocab_size(),
        });
    }
    Ok(())
}

/// Greedy translation of one source string, trimmed at both ends.
pub fn translate(model: &ModelParameters, tokenizer: &Tokenizer, source: &str) -> Result<String> {
    check_vocab(model, tokenizer)?;
    let max_seq_len = model.config().max_seq_len;
    let mut src = tokenizer.encode(source);
    src.truncate(max_seq_len - 1);
    src.push(EOS_ID);
    let out = model.greedy_decode(&src, decode_budget(src.len(), max_seq_len))?;
    Ok(tokenizer.decode(&out)?.trim().to_string())
}

pub fn translate_all<S: AsRef<str>>(
    model: &ModelParameters,
    tokenizer: &Tokenizer,
    sources: &[S],
) -> Result<Vec<String>> {
    sources
        .iter()
        .map(|s| translate(model, tokenizer, s.as_ref()))
        .collect()
}

/// Translates every source of `test` and scores against its targets.
pub fn evaluate_model(
    model: &ModelParameters,
    tokenizer: &Tokenizer,
    test: &Corpus,
) -> Result<EvaluationReport> {
    let sources: Vec<&str> = test.sources().collect();
    let references: Vec<&str> = test.targets().collect();
    let hypotheses = translate_all(model, tokenizer, &sources)?;
    evaluate_corpus(&hypotheses, &references)
}

/// Scores of one ablation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: String,
    pub plan: StagePlan,
    pub vocab_size: usize,
    pub test_oov_rate: f64,
    pub report: EvaluationReport,
}

/// Runs rows A to D from the same base model and scores each on `test`.
pub fn run_ablation(
    base_model: &ModelParameters,
    base_tokenizer: &Tokenizer,
    term_pairs: &[TermPair],
    train: &Corpus,
    test: &Corpus,
    config: &TrainConfig,
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::new();
    for (row, plan) in StagePlan::ablation_rows() {
        let run = run_pipeline(
            base_model.clone(),
            base_tokenizer.clone(),
            term_pairs,
            train,
            &plan,
            config,
            |_, _, _| Ok(()),
        )?;
        let report = evaluate_model(&run.model, &run.tokenizer, test)?;
        out.push(AblationResult {
            row: row.to_string(),
            plan,
            vocab_size: run.tokenizer.vocab_size(),
            test_oov_rate: run.tokenizer.oov_report(test.sources()).rate,
            report,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_is_capped() {
        assert_eq!(decode_budget(3, 128), 16);
        assert_eq!(decode_budget(100, 128), 127);
    }
}
