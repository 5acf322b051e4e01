use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use super::config::{Checks, LoadedConfig};
use super::records::{join_by_id, read_records, records_to_jsonl, TextRecord};
use super::{
    CliError, EvaluateArgs, ExpandVocabArgs, GenerateCorpusArgs, PipelineArgs, Preset,
    PretrainArgs, TrainTokenizerArgs, TranslateArgs,
};
use crate::corpus::lexicon::{domain_generator, domain_terms, general_generator};
use crate::corpus::{
    generate_synthetic_corpus, load_parallel_corpus, load_term_pairs, split_corpus, write_file,
    write_term_pairs, GeneratorSpec,
};
use crate::error::{Error, Result};
use crate::inference::{check_vocab, evaluate_model, translate_all};
use crate::metrics::{evaluate_corpus, EvaluationReport};
use crate::model::{load_checkpoint, save_checkpoint, EmbeddingInit, ModelParameters};
use crate::tokenizer::{train_bpe, Tokenizer};
use crate::training::{
    expansion_chars, mix_seed, run_pipeline, run_stage, StagePlan, StageSpec, StepLog, TrainConfig,
};

type CmdResult = std::result::Result<(), CliError>;

fn provenance(cfg: &LoadedConfig, command: &str) -> Value {
    json!({
        "command": command,
        "seed": cfg.config.seed,
        "config_hash": cfg.hash(),
    })
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

fn write_output(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    write_file(path, text.as_bytes())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_output(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Formats without embedded metadata get a `<file>.meta.json` next to them.
fn write_sidecar(path: &Path, meta: &Value) -> Result<()> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    write_json(&path.with_file_name(name), meta)
}

fn write_logs(path: &Path, logs: &[StepLog]) -> Result<()> {
    let text: String = logs
        .iter()
        .map(|l| serde_json::to_string(l).expect("log serializes") + "\n")
        .collect();
    write_output(path, &text)
}

fn with_provenance(value: &impl Serialize, meta: Value) -> Result<Value> {
    let mut v = serde_json::to_value(value)?;
    if let Value::Object(map) = &mut v {
        map.insert("provenance".into(), meta);
    }
    Ok(v)
}

pub(super) fn train_tokenizer(cfg: &LoadedConfig, a: TrainTokenizerArgs) -> CmdResult {
    let p = &cfg.config.paths;
    let mut checks = Checks::default();
    let fallback = cfg
        .resolve_opt(&p.general_corpus)
        .or(cfg.resolve_opt(&p.parallel_corpus));
    let corpus = checks.path("corpus", a.corpus, fallback, true);
    let out = checks.path(
        "tokenizer output (--out)",
        a.out,
        cfg.resolve_opt(&p.tokenizer),
        false,
    );
    checks.finish()?;

    let corpus = load_parallel_corpus(&corpus)?;
    let texts: Vec<&str> = corpus.sources().chain(corpus.targets()).collect();
    let vocab_size = a.vocab_size.unwrap_or(cfg.config.tokenizer_vocab_size);
    let tok = train_bpe(&texts, vocab_size)?;
    ensure_parent(&out)?;
    tok.save(&out, Some(&provenance(cfg, "train-tokenizer")))?;
    println!(
        "wrote {} ({} tokens, {} merges)",
        out.display(),
        tok.vocab_size(),
        tok.merges().len()
    );
    Ok(())
}

pub(super) fn expand_vocab(cfg: &LoadedConfig, a: ExpandVocabArgs) -> CmdResult {
    let p = &cfg.config.paths;
    let mut checks = Checks::default();
    let tok_path = checks.path(
        "tokenizer",
        a.tokenizer,
        cfg.resolve_opt(&p.tokenizer),
        true,
    );
    let corpus = a.corpus.or(cfg.resolve_opt(&p.parallel_corpus));
    let terms = a.term_pairs.or(cfg.resolve_opt(&p.term_pairs));
    if corpus.is_none() && terms.is_none() {
        checks.push("expand-vocab needs --corpus or --term-pairs");
    }
    for f in corpus.iter().chain(&terms).chain(&a.checkpoint) {
        if !f.is_file() {
            checks.push(format!("input not found: {}", f.display()));
        }
    }
    checks.finish()?;

    let tok = Tokenizer::load(&tok_path)?;
    let corpus = corpus.map(load_parallel_corpus).transpose()?;
    let terms = terms.map(load_term_pairs).transpose()?.unwrap_or_default();
    let mut texts: Vec<&str> = terms
        .iter()
        .flat_map(|t| [t.source.as_str(), t.target.as_str()])
        .collect();
    if let Some(c) = &corpus {
        texts.extend(c.sources().chain(c.targets()));
    }
    let chars = expansion_chars(&tok, texts);
    let expanded = tok.expand_vocabulary(&chars)?;
    let meta = provenance(cfg, "expand-vocab");
    ensure_parent(&a.out)?;
    expanded.save(&a.out, Some(&meta))?;
    println!(
        "added {} characters: {} -> {} tokens",
        chars.len(),
        tok.vocab_size(),
        expanded.vocab_size()
    );

    if let (Some(ck), Some(ck_out)) = (a.checkpoint, a.checkpoint_out) {
        let (model, _) = load_checkpoint(&ck)?;
        check_vocab(&model, &tok)?;
        let resized = model.resize_embeddings(
            expanded.vocab_size(),
            EmbeddingInit::MeanInit,
            mix_seed(&[cfg.config.seed, 0xE5]),
        )?;
        ensure_parent(&ck_out)?;
        save_checkpoint(&resized, &ck_out, &meta)?;
        println!("wrote {}", ck_out.display());
    }
    Ok(())
}

pub(super) fn generate_corpus(
    cfg: &LoadedConfig,
    a: GenerateCorpusArgs,
    seed_flag: Option<u64>,
) -> CmdResult {
    let seed = cfg.config.seed;
    let mut checks = Checks::default();
    if a.preset.is_none() && a.spec.is_none() {
        checks.push("generate-corpus needs --preset or --spec");
    }
    if let Some(s) = &a.spec {
        if !s.is_file() {
            checks.push(format!("generator spec not found: {}", s.display()));
        }
    }
    if let Some(k) = a.test_count {
        if k == 0 || k >= a.count {
            checks.push(format!("--test-count must lie in 1..{}, got {k}", a.count));
        }
    }
    if a.terms_out.is_some() && a.preset != Some(Preset::Domain) {
        checks.push("--terms-out applies to the domain preset only");
    }
    checks.finish()?;

    let spec = match (a.preset, &a.spec) {
        (Some(Preset::General), _) => general_generator(seed),
        (Some(Preset::Domain), _) => {
            let terms = domain_terms(a.term_count, seed);
            if let Some(out) = &a.terms_out {
                ensure_parent(out)?;
                write_term_pairs(&terms, out)?;
                write_sidecar(out, &provenance(cfg, "generate-corpus"))?;
            }
            domain_generator(&terms, mix_seed(&[seed, 1]))
        }
        (None, Some(path)) => {
            let mut spec = GeneratorSpec::load(path)?;
            if seed_flag.is_some() {
                spec.seed = seed;
            }
            spec
        }
        (None, None) => unreachable!("checked above"),
    };
    let corpus = generate_synthetic_corpus(&spec, a.count)?;
    let meta = provenance(cfg, "generate-corpus");
    let (train, test) = match (a.test_count, &a.test_out) {
        (Some(k), Some(test_out)) => {
            let (train, test) = split_corpus(&corpus, a.count - k, mix_seed(&[seed, 2]))?;
            write_output(test_out, &test.to_jsonl())?;
            write_sidecar(test_out, &meta)?;
            (train, Some(test))
        }
        _ => (corpus, None),
    };
    write_output(&a.out, &train.to_jsonl())?;
    write_sidecar(&a.out, &meta)?;
    match test {
        Some(t) => println!("wrote {} train and {} test titles", train.len(), t.len()),
        None => println!("wrote {} titles", train.len()),
    }
    Ok(())
}

pub(super) fn pretrain(cfg: &LoadedConfig, a: PretrainArgs) -> CmdResult {
    let p = &cfg.config.paths;
    let mut checks = Checks::new(cfg.problems());
    let corpus = checks.path("corpus", a.corpus, cfg.resolve_opt(&p.general_corpus), true);
    let tok_path = checks.path(
        "tokenizer",
        a.tokenizer,
        cfg.resolve_opt(&p.tokenizer),
        true,
    );
    let out = checks.path(
        "checkpoint output (--out)",
        a.out,
        cfg.resolve_opt(&p.base_checkpoint),
        false,
    );
    let epochs = a.epochs.unwrap_or(cfg.config.pretrain_epochs);
    if epochs == 0 {
        checks.push("pretrain epochs must be at least 1");
    }
    checks.finish()?;

    let tok = Tokenizer::load(&tok_path)?;
    let corpus = load_parallel_corpus(&corpus)?;
    let mut model_config = cfg.config.model.clone();
    model_config.vocab_size = tok.vocab_size();
    let model = ModelParameters::init(&model_config, mix_seed(&[cfg.config.seed, 0x1417]))?;
    let spec = StageSpec {
        name: "pretrain".into(),
        epochs,
        use_sse: false,
    };
    let (model, logs) = run_stage(model, &tok, &corpus, &cfg.config.train, &spec)?;
    ensure_parent(&out)?;
    save_checkpoint(&model, &out, &provenance(cfg, "pretrain"))?;
    write_logs(&cfg.resolve(&p.reports).join("pretrain_log.jsonl"), &logs)?;
    let last = logs.last().expect("at least one step");
    println!(
        "wrote {} ({} steps, final ce {:.4})",
        out.display(),
        logs.len(),
        last.ce
    );
    Ok(())
}

#[derive(Serialize)]
struct AblationRow<'a> {
    row: &'a str,
    plan: StagePlan,
    #[serde(flatten)]
    report: &'a EvaluationReport,
}

pub(super) fn pipeline(mut cfg: LoadedConfig, a: PipelineArgs) -> CmdResult {
    {
        let plan = &mut cfg.config.plan;
        if a.no_ev {
            plan.expand_vocab = false;
        }
        if a.no_tp {
            plan.stage1_term_pairs = false;
            plan.sse_stage1 = false;
        }
        if a.no_pc {
            plan.stage2_parallel = false;
            plan.sse_stage2 = false;
        }
        if a.no_sse {
            plan.sse_stage1 = false;
            plan.sse_stage2 = false;
        }
    }
    let p = cfg.config.paths.clone();
    let mut checks = Checks::new(cfg.problems());
    let tok_path = checks.path("paths.tokenizer", None, cfg.resolve_opt(&p.tokenizer), true);
    let ck_path = checks.path(
        "paths.base_checkpoint",
        None,
        cfg.resolve_opt(&p.base_checkpoint),
        true,
    );
    let terms_path = checks.path(
        "paths.term_pairs",
        None,
        cfg.resolve_opt(&p.term_pairs),
        true,
    );
    let train_path = checks.path(
        "paths.parallel_corpus",
        None,
        cfg.resolve_opt(&p.parallel_corpus),
        true,
    );
    let test_path = match cfg.resolve_opt(&p.test_corpus) {
        Some(t) => Some(checks.path("paths.test_corpus", Some(t), None, true)),
        None if a.ablate => {
            checks.push("--ablate needs paths.test_corpus");
            None
        }
        None => None,
    };
    checks.finish()?;

    let tok = Tokenizer::load(&tok_path)?;
    let (base, _) = load_checkpoint(&ck_path)?;
    check_vocab(&base, &tok)?;
    let terms = load_term_pairs(&terms_path)?;
    let train = load_parallel_corpus(&train_path)?;
    let test = test_path.map(load_parallel_corpus).transpose()?;
    let ck_dir = cfg.resolve(&p.checkpoints);
    let report_dir = cfg.resolve(&p.reports);
    let meta = provenance(&cfg, "pipeline");
    let job = Job {
        base: &base,
        tok: &tok,
        terms: &terms,
        train: &train,
        test: test.as_ref(),
        config: &cfg.config.train,
        meta: &meta,
    };

    if !a.ablate {
        let eval = job.run(&cfg.config.plan, &ck_dir, &report_dir, &p.checkpoints)?;
        if let Some(e) = eval {
            println!("{}", e.summary_line());
        }
        return Ok(());
    }
    let mut rows = Vec::new();
    for (row, plan) in StagePlan::ablation_rows() {
        let sub = format!("row-{row}");
        let eval = job
            .run(
                &plan,
                &ck_dir.join(&sub),
                &report_dir.join(&sub),
                &p.checkpoints.join(&sub),
            )?
            .expect("test set present");
        println!("row {row}  {}", eval.summary_line());
        rows.push((row, plan, eval));
    }
    let table: Vec<AblationRow> = rows
        .iter()
        .map(|(row, plan, report)| AblationRow {
            row,
            plan: *plan,
            report,
        })
        .collect();
    write_json(
        &report_dir.join("ablation.json"),
        &json!({ "provenance": meta, "rows": table }),
    )?;
    Ok(())
}

struct Job<'a> {
    base: &'a ModelParameters,
    tok: &'a Tokenizer,
    terms: &'a [crate::corpus::TermPair],
    train: &'a crate::corpus::Corpus,
    test: Option<&'a crate::corpus::Corpus>,
    config: &'a TrainConfig,
    meta: &'a Value,
}

impl Job<'_> {
    /// One pipeline run: stage checkpoints, adapted tokenizer, final
    /// checkpoint, step log and report, plus test scores when available.
    /// `ck_label` is how the report names the checkpoint directory.
    fn run(
        &self,
        plan: &StagePlan,
        ck_dir: &Path,
        report_dir: &Path,
        ck_label: &Path,
    ) -> Result<Option<EvaluationReport>> {
        fs::create_dir_all(ck_dir).map_err(|e| Error::io(ck_dir, e))?;
        let out = run_pipeline(
            self.base.clone(),
            self.tok.clone(),
            self.terms,
            self.train,
            plan,
            self.config,
            |name, model, _| save_checkpoint(model, ck_dir.join(format!("{name}.ckpt")), self.meta),
        )?;
        out.tokenizer
            .save(ck_dir.join("tokenizer.json"), Some(self.meta))?;
        save_checkpoint(&out.model, ck_dir.join("final.ckpt"), self.meta)?;
        write_logs(&report_dir.join("train_log.jsonl"), &out.logs)?;
        let evaluation = self
            .test
            .map(|t| evaluate_model(&out.model, &out.tokenizer, t))
            .transpose()?;
        let mut files: Vec<String> = out
            .report
            .stages
            .iter()
            .map(|s| format!("{}.ckpt", s.name))
            .collect();
        files.extend(["final.ckpt".to_string(), "tokenizer.json".to_string()]);
        let artifacts: Vec<String> = files
            .iter()
            .map(|f| ck_label.join(f).display().to_string())
            .collect();
        let report = json!({
            "provenance": self.meta,
            "pipeline": out.report,
            "artifacts": artifacts,
            "evaluation": evaluation,
        });
        write_json(&report_dir.join("pipeline_report.json"), &report)?;
        Ok(evaluation)
    }
}

pub(super) fn translate(cfg: &LoadedConfig, a: TranslateArgs) -> CmdResult {
    let p = &cfg.config.paths;
    let ck_dir = cfg.resolve(&p.checkpoints);
    let mut checks = Checks::default();
    let ck = checks.path(
        "checkpoint",
        a.checkpoint,
        Some(ck_dir.join("final.ckpt")),
        true,
    );
    let tok_path = checks.path(
        "tokenizer",
        a.tokenizer,
        Some(ck_dir.join("tokenizer.json")),
        true,
    );
    let input = checks.path("input", a.input, cfg.resolve_opt(&p.test_corpus), true);
    let out = checks.path(
        "output",
        a.out,
        Some(cfg.resolve(&p.reports).join("translations.jsonl")),
        false,
    );
    checks.finish()?;

    let (model, _) = load_checkpoint(&ck)?;
    let tok = Tokenizer::load(&tok_path)?;
    check_vocab(&model, &tok)?;
    let records = read_records(&input, &["source", "text"])?;
    let sources: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    let outputs = translate_all(&model, &tok, &sources)?;
    let translated: Vec<TextRecord> = records
        .iter()
        .zip(outputs)
        .map(|(r, text)| TextRecord {
            id: r.id.clone(),
            text,
        })
        .collect();
    write_output(&out, &records_to_jsonl(&translated))?;
    let mut meta = provenance(cfg, "translate");
    meta["count"] = json!(translated.len());
    write_sidecar(&out, &meta)?;
    println!(
        "translated {} lines into {}",
        translated.len(),
        out.display()
    );
    Ok(())
}

pub(super) fn evaluate(cfg: &LoadedConfig, a: EvaluateArgs) -> CmdResult {
    let p = &cfg.config.paths;
    let report_dir = cfg.resolve(&p.reports);
    let mut checks = Checks::default();
    let hyp = checks.path(
        "hypotheses",
        a.hyp,
        Some(report_dir.join("translations.jsonl")),
        true,
    );
    let reference = checks.path(
        "references",
        a.reference,
        cfg.resolve_opt(&p.test_corpus),
        true,
    );
    let out: PathBuf = a.out.unwrap_or_else(|| report_dir.join("eval.json"));
    checks.finish()?;

    let hyps = read_records(&hyp, &["text"])?;
    let refs = read_records(&reference, &["target", "text"])?;
    let (hyps, refs) = join_by_id(hyps, refs)?;
    let report = evaluate_corpus(&hyps, &refs)?;
    write_json(
        &out,
        &with_provenance(&report, provenance(cfg, "evaluate"))?,
    )?;
    println!("{}", report.summary_line());
    Ok(())
}
