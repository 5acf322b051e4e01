//! Training objective, optimizer and the two-stage adaptation pipeline.

mod adam;
mod loss;
mod pipeline;
mod stage;

pub use adam::{adam_step, AdamState};
pub use loss::{ce_loss_dual, ce_loss_single, kl_bidirectional, total_loss, LossBreakdown};
pub use pipeline::{
    adaptation_texts, expansion_chars, run_pipeline, PipelineOutput, PipelineReport, StageSummary,
};
pub use stage::{encode_example, mean_token_ce, run_stage, EncodedExample, StageSpec, StepLog};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    /// Weight of the bidirectional KL term.
    pub alpha: f64,
    /// Master switch for dual-pass training; per-stage flags live in
    /// [`StagePlan`].
    pub sse_enabled: bool,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 5e-5,
            dropout_rate: 0.1,
            alpha: 0.05,
            sse_enabled: true,
            epochs_stage1: 3,
            epochs_stage2: 5,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            problems.push(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            problems.push(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            problems.push(format!("alpha must be nonnegative, got {}", self.alpha));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }
}

/// Which adaptation steps run: vocabulary expansion (EV), the term-pair
/// stage (TP), the parallel-corpus stage (PC) and the KL term per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StagePlan {
    pub expand_vocab: bool,
    pub stage1_term_pairs: bool,
    pub stage2_parallel: bool,
    pub sse_stage1: bool,
    pub sse_stage2: bool,
}

impl Default for StagePlan {
    fn default() -> Self {
        StagePlan::row_d()
    }
}

impl StagePlan {
    /// The untuned base model.
    pub fn row_a() -> Self {
        StagePlan {
            expand_vocab: false,
            stage1_term_pairs: false,
            stage2_parallel: false,
            sse_stage1: false,
            sse_stage2: false,
        }
    }

    /// Parallel-corpus fine-tuning only.
    pub fn row_b() -> Self {
        StagePlan {
            stage2_parallel: true,
            ..StagePlan::row_a()
        }
    }

    /// Expansion plus both stages, cross-entropy only.
    pub fn row_c() -> Self {
        StagePlan {
            expand_vocab: true,
            stage1_term_pairs: true,
            stage2_parallel: true,
            sse_stage1: false,
            sse_stage2: false,
        }
    }

    /// Everything, with the KL term in both stages.
    pub fn row_d() -> Self {
        StagePlan {
            sse_stage1: true,
            sse_stage2: true,
            ..StagePlan::row_c()
        }
    }

    pub fn ablation_rows() -> [(&'static str, StagePlan); 4] {
        [
            ("A", StagePlan::row_a()),
            ("B", StagePlan::row_b()),
            ("C", StagePlan::row_c()),
            ("D", StagePlan::row_d()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.sse_stage1 && !self.stage1_term_pairs {
            return Err(Error::InvalidArgument(
                "sse_stage1 requires stage1_term_pairs".into(),
            ));
        }
        if self.sse_stage2 && !self.stage2_parallel {
            return Err(Error::InvalidArgument(
                "sse_stage2 requires stage2_parallel".into(),
            ));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer folded over `parts`; derives independent
/// sub-seeds from structured keys.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}
