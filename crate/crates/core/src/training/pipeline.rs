use serde::{Deserialize, Serialize};

use super::loss::LossBreakdown;
use super::stage::{run_stage, StageSpec, StepLog};
use super::{mix_seed, StagePlan, TrainConfig};
use crate::corpus::{char_counts, term_pairs_as_corpus, Corpus, TermPair};
use crate::error::Result;
use crate::model::{EmbeddingInit, ModelParameters};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub name: String,
    pub use_sse: bool,
    pub epochs: usize,
    pub examples: usize,
    pub steps: usize,
    pub final_loss: Option<LossBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub plan: StagePlan,
    pub train_config: TrainConfig,
    pub vocab_size_before: usize,
    pub vocab_size_after: usize,
    pub added_characters: usize,
    pub stages: Vec<StageSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub model: ModelParameters,
    pub tokenizer: Tokenizer,
    pub report: PipelineReport,
    pub logs: Vec<StepLog>,
}

/// Characters of `texts` missing from `tokenizer`, most frequent first
/// (ties by code point).
pub fn expansion_chars<'a>(
    tokenizer: &Tokenizer,
    texts: impl IntoIterator<Item = &'a str>,
) -> Vec<String> {
    let mut counts: Vec<(char, usize)> = char_counts(texts)
        .into_iter()
        .filter(|&(c, _)| !tokenizer.contains_char(c))
        .collect();
    counts.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    counts.into_iter().map(|(c, _)| c.to_string()).collect()
}

/// Both sides of the term pairs and the parallel corpus.
pub fn adaptation_texts<'a>(
    term_pairs: &'a [TermPair],
    parallel: &'a Corpus,
) -> impl Iterator<Item = &'a str> {
    term_pairs
        .iter()
        .flat_map(|p| [p.source.as_str(), p.target.as_str()])
        .chain(parallel.sources())
        .chain(parallel.targets())
}

/// Adapts a general model in order: optional vocabulary expansion with
/// embedding growth, optional term-pair stage, optional parallel-corpus
/// stage. `on_stage` sees the model after each training stage.
pub fn run_pipeline(
    base_model: ModelParameters,
    base_tokenizer: Tokenizer,
    term_pairs: &[TermPair],
    parallel_train: &Corpus,
    plan: &StagePlan,
    config: &TrainConfig,
    mut on_stage: impl FnMut(&str, &ModelParameters, &Tokenizer) -> Result<()>,
) -> Result<PipelineOutput> {
    plan.validate()?;
    config.validate()?;
    let vocab_size_before = base_tokenizer.vocab_size();
    let mut model = base_model;
    let mut tokenizer = base_tokenizer;

    if plan.expand_vocab {
        let chars = expansion_chars(&tokenizer, adaptation_texts(term_pairs, parallel_train));
        tokenizer = tokenizer.expand_vocabulary(&chars)?;
        let target = tokenizer.vocab_size().max(model.config().vocab_size);
        model = model.resize_embeddings(
            target,
            EmbeddingInit::MeanInit,
            mix_seed(&[config.seed, 0xE5]),
        )?;
    }

    let mut stages = Vec::new();
    let mut logs = Vec::new();
    let mut run =
        |name: &str, corpus: &Corpus, epochs: usize, use_sse: bool, model: ModelParameters| {
            let spec = StageSpec {
                name: name.to_string(),
                epochs,
                use_sse: use_sse && config.sse_enabled,
            };
            let (model, stage_logs) = run_stage(model, &tokenizer, corpus, config, &spec)?;
            on_stage(name, &model, &tokenizer)?;
            stages.push(StageSummary {
                name: spec.name,
                use_sse: spec.use_sse,
                epochs,
                examples: corpus.len(),
                steps: stage_logs.len(),
                final_loss: stage_logs.last().map(StepLog::losses),
            });
            logs.extend(stage_logs);
            Ok::<_, crate::Error>(model)
        };

    if plan.stage1_term_pairs {
        let corpus = term_pairs_as_corpus(term_pairs)?;
        model = run(
            "stage1",
            &corpus,
            config.epochs_stage1,
            plan.sse_stage1,
            model,
        )?;
    }
    if plan.stage2_parallel {
        model = run(
            "stage2",
            parallel_train,
            config.epochs_stage2,
            plan.sse_stage2,
            model,
        )?;
    }

    let report = PipelineReport {
        plan: *plan,
        train_config: config.clone(),
        vocab_size_before,
        vocab_size_after: tokenizer.vocab_size(),
        added_characters: tokenizer.vocab_size() - vocab_size_before,
        stages,
    };
    Ok(PipelineOutput {
        model,
        tokenizer,
        report,
        logs,
    })
}
