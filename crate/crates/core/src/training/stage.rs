use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::loss::LossBreakdown;
use super::{mix_seed, TrainConfig};
use crate::autograd::{Graph, Tensor};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{dual_seeds, DropoutPlan, ModelParameters};
use crate::tokenizer::{Tokenizer, BOS_ID, EOS_ID};

/// One training step's losses, serialized as a training-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: String,
    pub step: usize,
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
    pub lr: f64,
}

impl StepLog {
    pub fn losses(&self) -> LossBreakdown {
        LossBreakdown {
            ce: self.ce,
            kl: self.kl,
            total: self.total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub epochs: usize,
    pub use_sse: bool,
}

/// Teacher-forcing view of one example: the decoder reads `tgt_in`
/// (`<s> y`) and is scored against `tgt_out` (`y </s>`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub src: Vec<u32>,
    pub tgt_in: Vec<u32>,
    pub tgt_out: Vec<u32>,
}

/// Encodes a pair, truncating each side to `max_seq_len`.
pub fn encode_example(
    tok: &Tokenizer,
    source: &str,
    target: &str,
    max_seq_len: usize,
) -> EncodedExample {
    let mut src = tok.encode(source);
    src.truncate(max_seq_len - 1);
    src.push(EOS_ID);
    let body = tok.encode(target);
    let mut tgt_in = Vec::with_capacity(body.len() + 1);
    tgt_in.push(BOS_ID);
    tgt_in.extend_from_slice(&body);
    let mut tgt_out = body;
    tgt_out.push(EOS_ID);
    tgt_in.truncate(max_seq_len);
    tgt_out.truncate(max_seq_len);
    EncodedExample {
        src,
        tgt_in,
        tgt_out,
    }
}

fn encode_corpus(tok: &Tokenizer, corpus: &Corpus, max_seq_len: usize) -> Vec<EncodedExample> {
    corpus
        .examples()
        .iter()
        .map(|e| encode_example(tok, &e.source, &e.target, max_seq_len))
        .collect()
}

struct ExampleTerms {
    /// Sum of negative log-likelihoods (averaged over the two passes).
    nll: f64,
    /// ½ Σ (KL(P₁‖P₂) + KL(P₂‖P₁)) over positions.
    kl: f64,
}

/// Records one example's contribution to the batch objective and
/// back-propagates `scale ×` it into `grads`.
fn example_step(
    model: &ModelParameters,
    ex: &EncodedExample,
    use_sse: bool,
    alpha: f64,
    seed: u64,
    scale: f64,
    grads: &mut [Option<Tensor>],
) -> Result<ExampleTerms> {
    let mut g = Graph::new(model.tensors());
    if use_sse {
        let (s1, s2) = dual_seeds(seed);
        let lp1 = model.log_probs_graph(&mut g, &ex.src, &ex.tgt_in, DropoutPlan::on(s1))?;
        let lp2 = model.log_probs_graph(&mut g, &ex.src, &ex.tgt_in, DropoutPlan::on(s2))?;
        let nll1 = g.nll_sum(lp1, &ex.tgt_out);
        let nll2 = g.nll_sum(lp2, &ex.tgt_out);
        let kl = g.bikl_sum(lp1, lp2);
        let root = g.lin_comb(&[
            (nll1, 0.5 * scale),
            (nll2, 0.5 * scale),
            (kl, 0.5 * alpha * scale),
        ]);
        g.backward(root, grads);
        Ok(ExampleTerms {
            nll: 0.5 * (g.scalar(nll1) + g.scalar(nll2)),
            kl: 0.5 * g.scalar(kl),
        })
    } else {
        let lp = model.log_probs_graph(&mut g, &ex.src, &ex.tgt_in, DropoutPlan::on(seed))?;
        let nll = g.nll_sum(lp, &ex.tgt_out);
        let root = g.scale(nll, scale);
        g.backward(root, grads);
        Ok(ExampleTerms {
            nll: g.scalar(nll),
            kl: 0.0,
        })
    }
}

fn stage_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

/// Fine-tunes `model` on `corpus` for `stage.epochs` epochs of shuffled
/// mini-batches. Every batch minimizes the per-token cross-entropy, plus
/// `alpha ×` the bidirectional KL between two dropout passes when
/// `stage.use_sse` is set, followed by one Adam step.
pub fn run_stage(
    model: ModelParameters,
    tokenizer: &Tokenizer,
    corpus: &Corpus,
    config: &TrainConfig,
    stage: &StageSpec,
) -> Result<(ModelParameters, Vec<StepLog>)> {
    config.validate()?;
    if corpus.is_empty() || stage.epochs == 0 {
        return Err(Error::EmptyInput(format!(
            "stage `{}` has no batches",
            stage.name
        )));
    }
    if tokenizer.vocab_size() > model.config().vocab_size {
        return Err(Error::VocabMismatch {
            checkpoint: model.config().vocab_size,
            tokenizer: tokenizer.vocab_size(),
        });
    }
    let mut model = model.with_dropout(config.dropout_rate)?;
    let data = encode_corpus(tokenizer, corpus, model.config().max_seq_len);
    let alpha = if stage.use_sse { config.alpha } else { 0.0 };
    let key = stage_key(&stage.name);
    let mut state = AdamState::new(&model);
    let mut logs = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..stage.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[
            config.seed,
            key,
            epoch as u64,
        ])));
        for batch in order.chunks(config.batch_size) {
            let step = logs.len();
            let tokens: usize = batch.iter().map(|&i| data[i].tgt_out.len()).sum();
            let scale = 1.0 / tokens as f64;
            let mut grads: Vec<Option<Tensor>> = vec![None; model.tensors().len()];
            let (mut nll, mut kl) = (0.0, 0.0);
            for (pos, &i) in batch.iter().enumerate() {
                let seed = mix_seed(&[config.seed, key, step as u64, pos as u64]);
                let terms = example_step(
                    &model,
                    &data[i],
                    stage.use_sse,
                    alpha,
                    seed,
                    scale,
                    &mut grads,
                )?;
                nll += terms.nll;
                kl += terms.kl;
            }
            adam_step(&mut model, &grads, &mut state, config)?;
            let (ce, kl) = (nll * scale, kl * scale);
            logs.push(StepLog {
                stage: stage.name.clone(),
                step,
                ce,
                kl,
                total: ce + alpha * kl,
                lr: config.learning_rate,
            });
        }
    }
    Ok((model, logs))
}

/// Per-token cross-entropy of `corpus` under `model` with dropout off.
pub fn mean_token_ce(
    model: &ModelParameters,
    tokenizer: &Tokenizer,
    corpus: &Corpus,
) -> Result<f64> {
    let data = encode_corpus(tokenizer, corpus, model.config().max_seq_len);
    let (mut nll, mut tokens) = (0.0, 0usize);
    for ex in &data {
        let mut g = Graph::new(model.tensors());
        let lp = model.log_probs_graph(&mut g, &ex.src, &ex.tgt_in, DropoutPlan::off())?;
        let v = g.nll_sum(lp, &ex.tgt_out);
        nll += g.scalar(v);
        tokens += ex.tgt_out.len();
    }
    Ok(nll / tokens as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ParallelExample, Provenance};
    use crate::model::ModelConfig;
    use crate::tokenizer::train_bpe;

    fn copy_corpus() -> Corpus {
        let words = ["ab", "ba", "abc", "cab", "bca", "cc"];
        let examples = words
            .iter()
            .enumerate()
            .map(|(i, w)| ParallelExample {
                id: i.to_string(),
                source: w.to_string(),
                target: w.to_string(),
            })
            .collect();
        Corpus::new(examples, Provenance::Synthetic).unwrap()
    }

    fn setup() -> (ModelParameters, Tokenizer) {
        let tok = train_bpe(&["abc"], 8).unwrap();
        let config = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers_enc: 1,
            n_layers_dec: 1,
            ffn_dim: 32,
            dropout_rate: 0.1,
            max_seq_len: 16,
            vocab_size: tok.vocab_size(),
        };
        (ModelParameters::init(&config, 3).unwrap(), tok)
    }

    fn spec(epochs: usize, use_sse: bool) -> StageSpec {
        StageSpec {
            name: "test".into(),
            epochs,
            use_sse,
        }
    }

    #[test]
    fn encoding_layout() {
        let (_, tok) = setup();
        let e = encode_example(&tok, "ab", "ba", 16);
        assert_eq!(e.src.last(), Some(&EOS_ID));
        assert_eq!(e.tgt_in[0], BOS_ID);
        assert_eq!(&e.tgt_in[1..], &e.tgt_out[..e.tgt_out.len() - 1]);
        let long = encode_example(&tok, &"a".repeat(40), &"b".repeat(40), 16);
        assert_eq!(
            (long.src.len(), long.tgt_in.len(), long.tgt_out.len()),
            (16, 16, 16)
        );
    }

    #[test]
    fn zero_epochs_is_an_error() {
        let (m, tok) = setup();
        assert!(run_stage(
            m,
            &tok,
            &copy_corpus(),
            &TrainConfig::default(),
            &spec(0, false)
        )
        .is_err());
    }

    #[test]
    fn training_lowers_ce() {
        let (m, tok) = setup();
        let config = TrainConfig {
            batch_size: 3,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        };
        let corpus = copy_corpus();
        let before = mean_token_ce(&m, &tok, &corpus).unwrap();
        let (m, logs) = run_stage(m, &tok, &corpus, &config, &spec(30, true)).unwrap();
        assert_eq!(logs.len(), 60);
        assert!(logs
            .iter()
            .all(|l| l.kl >= 0.0 && (l.total - (l.ce + 0.05 * l.kl)).abs() < 1e-15));
        assert!(logs.last().unwrap().ce < logs[0].ce);
        assert!(mean_token_ce(&m, &tok, &corpus).unwrap() < before);
    }

    #[test]
    fn dropout_zero_gives_zero_kl() {
        let (m, tok) = setup();
        let config = TrainConfig {
            batch_size: 2,
            learning_rate: 1e-3,
            dropout_rate: 0.0,
            ..TrainConfig::default()
        };
        let (_, logs) = run_stage(m, &tok, &copy_corpus(), &config, &spec(2, true)).unwrap();
        assert!(logs.iter().all(|l| l.kl == 0.0 && l.total == l.ce));
    }

    #[test]
    fn stage_is_deterministic() {
        let (m, tok) = setup();
        let config = TrainConfig {
            batch_size: 4,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let a = run_stage(m.clone(), &tok, &copy_corpus(), &config, &spec(3, true)).unwrap();
        let b = run_stage(m, &tok, &copy_corpus(), &config, &spec(3, true)).unwrap();
        assert_eq!(a, b);
    }
}
