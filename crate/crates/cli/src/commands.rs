use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use candle_core::DType;
use clap::Args;
use cocite::checkpoint::{Checkpoint, TrainingState};
use cocite::encoder::{Activation, Encoder, InitScheme, ModelConfig, Vocabulary};
use cocite::eval::{evaluate_scored, score_pairs, tfidf_baseline, EvalMode};
use cocite::moe::{extend_model, parameter_count, Granularity, LayerSelection, MoeConfig, RoutingStrategy};
use cocite::pipeline::{
    build_dataset, ingest, read_pairs, write_dataset, write_records, Corpus, NegativeScope, Split, SplitConfig,
    CORPUS_FILE,
};
use cocite::synthetic::{generate, SyntheticConfig};
use cocite::train::{training_loop, Scheduler, TrainConfig, Trainer};
use cocite::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{config_error, data_dir, parse_enum, required, snapshot_beside, write_snapshot, SNAPSHOT_FILE};

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct BuildDatasetArgs {
    /// JSON-lines paper records.
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Output directory; defaults to $COCITE_DATA_DIR.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub recent_year: Option<i32>,
    #[arg(long)]
    pub valid_fraction: Option<f64>,
    #[arg(long)]
    pub min_citations: Option<u64>,
    /// `same_domain` or `any_domain`.
    #[arg(long)]
    pub negative_scope: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn build_dataset_cmd(args: &BuildDatasetArgs) -> Result<()> {
    let records = required(&args.records, "records")?;
    let out = data_dir(&args.out_dir)?;
    let defaults = SplitConfig::default();
    let cfg = SplitConfig {
        recent_year: args.recent_year.unwrap_or(defaults.recent_year),
        valid_fraction: args.valid_fraction.unwrap_or(defaults.valid_fraction),
        min_citations: args.min_citations.unwrap_or(defaults.min_citations),
        negative_scope: match &args.negative_scope {
            Some(s) => parse_enum::<NegativeScope>(s, "negative scope")?,
            None => defaults.negative_scope,
        },
    };
    cfg.validate()?;
    let seed = args.seed.unwrap_or(0);
    let (graph, report) = ingest(&records)?;
    for r in &report.rejected {
        eprintln!("skipped line {}: {}", r.line, r.reason);
    }
    let (dataset, stats) = build_dataset(&graph, &cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_dataset(&out, &dataset, &stats, &Corpus::from_graph(&graph))?;
    let resolved = BuildDatasetArgs {
        records: Some(records),
        out_dir: Some(out.clone()),
        recent_year: Some(cfg.recent_year),
        valid_fraction: Some(cfg.valid_fraction),
        min_citations: Some(cfg.min_citations),
        negative_scope: Some(serde_json::to_value(cfg.negative_scope)?.as_str().unwrap_or_default().to_string()),
        seed: Some(seed),
    };
    write_snapshot(&out.join(SNAPSHOT_FILE), "build-dataset", &resolved)?;
    println!(
        "{} papers ({} accepted, {} rejected), {} distinct co-cited pairs",
        graph.len(),
        report.accepted,
        report.rejected.len(),
        stats.distinct_pairs
    );
    println!(
        "train {} / valid {} / test {} pairs written to {}",
        dataset.train.len(),
        dataset.valid.len(),
        dataset.test.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct GenerateCorpusArgs {
    /// Output JSON-lines records file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated domain names.
    #[arg(long, value_delimiter = ',')]
    pub domains: Option<Vec<String>>,
    #[arg(long)]
    pub papers_per_domain: Option<usize>,
    #[arg(long)]
    pub clusters_per_domain: Option<usize>,
    #[arg(long)]
    pub words_per_cluster: Option<usize>,
    #[arg(long)]
    pub topic_words_per_abstract: Option<usize>,
    #[arg(long)]
    pub references_per_paper: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub conflicting_facets: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn generate_corpus_cmd(args: &GenerateCorpusArgs) -> Result<()> {
    let out = required(&args.out, "out")?;
    let d = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        domains: args.domains.clone().unwrap_or(d.domains),
        papers_per_domain: args.papers_per_domain.unwrap_or(d.papers_per_domain),
        clusters_per_domain: args.clusters_per_domain.unwrap_or(d.clusters_per_domain),
        words_per_cluster: args.words_per_cluster.unwrap_or(d.words_per_cluster),
        topic_words_per_abstract: args.topic_words_per_abstract.unwrap_or(d.topic_words_per_abstract),
        references_per_paper: args.references_per_paper.unwrap_or(d.references_per_paper),
        conflicting_facets: args.conflicting_facets.unwrap_or(d.conflicting_facets),
        seed: args.seed.unwrap_or(d.seed),
        ..d
    };
    let corpus = generate(&cfg)?;
    write_records(&out, &corpus.records)?;
    write_snapshot(&snapshot_beside(&out), "generate-corpus", &cfg)?;
    println!("{} records written to {}", corpus.records.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ExtendArgs {
    /// Checkpoint of the dense model to extend.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of experts; defaults to one per registered domain.
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// `enforced`, `router_ce` or `mutual_info`.
    #[arg(long)]
    pub strategy: Option<String>,
    /// `sentence` or `token`.
    #[arg(long)]
    pub granularity: Option<String>,
    /// Comma-separated block indices; all blocks when absent.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Extend only the middle block.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub middle_layer: Option<bool>,
    #[arg(long)]
    pub mi_weight: Option<f64>,
    /// Seed for the router weights.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn extend_cmd(args: &ExtendArgs) -> Result<()> {
    let base_path = required(&args.base, "base")?;
    let out = required(&args.out, "out")?;
    let base = Checkpoint::load(&base_path)?.to_model()?;
    let domains: Vec<String> = base.vocab().domains().map(str::to_string).collect();
    let blocks = base.config().num_blocks;
    let middle = args.middle_layer.unwrap_or(false);
    let layers = match (&args.layers, middle) {
        (Some(_), true) => return Err(config_error("--layers and --middle-layer are exclusive")),
        (Some(l), false) => l.clone(),
        (None, true) => LayerSelection::Middle.resolve(blocks),
        (None, false) => LayerSelection::All.resolve(blocks),
    };
    let mut cfg = MoeConfig::enforced(&domains, layers);
    if let Some(e) = args.experts {
        cfg.num_experts = e;
    }
    if let Some(k) = args.top_k {
        cfg.top_k = k;
    }
    if let Some(s) = &args.strategy {
        cfg.strategy = parse_enum::<RoutingStrategy>(s, "routing strategy")?;
    }
    if let Some(g) = &args.granularity {
        cfg.granularity = parse_enum::<Granularity>(g, "granularity")?;
    }
    if let Some(w) = args.mi_weight {
        cfg.mi_loss_weight = w;
    }
    if cfg.strategy == RoutingStrategy::Enforced && cfg.num_experts < domains.len() {
        return Err(config_error(format!(
            "enforced routing needs one expert per domain ({} domains, {} experts)",
            domains.len(),
            cfg.num_experts
        )));
    }
    // With fewer experts than domains the router targets wrap around.
    for e in cfg.domain_experts.values_mut() {
        *e %= cfg.num_experts.max(1);
    }
    let seed = args.seed.unwrap_or(0);
    let model = extend_model(&base, &cfg, seed)?;
    Checkpoint::from_model(&model)?.save(&out)?;

    let before = parameter_count(base.config(), None);
    let after = parameter_count(model.config(), Some(&cfg));
    println!("base:     stored {:>10}  effective {:>10}", before.stored, before.active);
    println!("extended: stored {:>10}  effective {:>10}", after.stored, after.active);
    println!(
        "          gate branch {}  routers {}  extended blocks {:?}",
        after.gate_branch, after.routers, cfg.extended_layers
    );
    let resolved = ExtendArgs {
        base: Some(base_path),
        out: Some(out.clone()),
        experts: Some(cfg.num_experts),
        top_k: Some(cfg.top_k),
        strategy: Some(enum_name(&cfg.strategy)?),
        granularity: Some(enum_name(&cfg.granularity)?),
        layers: Some(cfg.extended_layers.clone()),
        middle_layer: Some(false),
        mi_weight: Some(cfg.mi_loss_weight),
        seed: Some(seed),
    };
    write_snapshot(&snapshot_beside(&out), "extend", &resolved)?;
    Ok(())
}

fn enum_name<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_value(v)?.as_str().unwrap_or_default().to_string())
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainArgs {
    /// Directory written by build-dataset; defaults to $COCITE_DATA_DIR.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue the step count and temperature stored in the checkpoint.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub resume: Option<bool>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub intermediate_dim: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// `gelu` or `relu`.
    #[arg(long)]
    pub activation: Option<String>,
    #[arg(long)]
    pub max_vocab: Option<usize>,
    /// Replace `[CLS]` with the pair's domain token.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub domain_tokens: Option<bool>,
    /// `f32` or `f64`.
    #[arg(long)]
    pub dtype: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// `one_cycle` or `cosine`.
    #[arg(long)]
    pub scheduler: Option<String>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub validate_every: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub router_ce_weight: Option<f64>,
    #[arg(long)]
    pub mi_weight: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const REPORT_FILE: &str = "report.json";

fn dtype(name: &str) -> Result<DType> {
    match name {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(config_error(format!("unknown dtype `{other}` (use f32 or f64)"))),
    }
}

pub fn train_cmd(args: &TrainArgs) -> Result<()> {
    let data = data_dir(&args.data_dir)?;
    let out = required(&args.out_dir, "out-dir")?;
    let corpus = Corpus::load(&data.join(CORPUS_FILE))?;
    let train = read_pairs(&data.join(Split::Train.file_name()))?;
    let valid = read_pairs(&data.join(Split::Valid.file_name()))?;
    let mut domains: Vec<String> = train.iter().chain(&valid).map(|p| p.domain.clone()).collect();
    domains.sort();
    domains.dedup();

    let d = TrainConfig::default();
    let cfg = TrainConfig {
        batch_size: args.batch_size.unwrap_or(d.batch_size),
        learning_rate: args.learning_rate.unwrap_or(d.learning_rate),
        scheduler: match &args.scheduler {
            Some(s) => parse_enum::<Scheduler>(s, "scheduler")?,
            None => d.scheduler,
        },
        warmup_steps: args.warmup_steps.unwrap_or(d.warmup_steps),
        max_epochs: args.epochs.unwrap_or(d.max_epochs),
        validate_every: args.validate_every.unwrap_or(d.validate_every),
        patience: args.patience.unwrap_or(d.patience),
        router_ce_weight: args.router_ce_weight.unwrap_or(d.router_ce_weight),
        mi_weight: args.mi_weight.unwrap_or(d.mi_weight),
        weight_decay: args.weight_decay.unwrap_or(d.weight_decay),
        seed: args.seed.unwrap_or(d.seed),
        ..d
    };
    cfg.validate()?;
    let resume = args.resume.unwrap_or(false);
    let precision = dtype(args.dtype.as_deref().unwrap_or("f32"))?;
    let mut resolved = args.clone();
    resolved.data_dir = Some(data.clone());

    let mut trainer = match &args.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let mut model = ckpt.to_model()?.to_dtype(precision)?;
            if let Some(flag) = args.domain_tokens {
                model.set_use_domain_tokens(flag);
            }
            for dom in &domains {
                if !model.vocab().has_domain(dom) {
                    return Err(Error::UnknownDomain(format!(
                        "{dom} (the checkpoint has no token for this dataset domain)"
                    ))
                    .into());
                }
            }
            match (resume, ckpt.meta.training.as_ref(), ckpt.temperature()?) {
                (true, Some(state), Some(temp)) => Trainer::resume(model, temp, state.step, cfg.clone())?,
                (true, _, _) => return Err(config_error("--resume needs a checkpoint with training state")),
                (false, _, _) => Trainer::new(model, cfg.clone())?,
            }
        }
        None => {
            if resume {
                return Err(config_error("--resume needs --checkpoint"));
            }
            let vocab = Vocabulary::build(
                corpus.entries().iter().map(|e| e.abstract_text.as_str()),
                &domains,
                args.max_vocab.unwrap_or(30_000),
            )?;
            let hidden = args.hidden_dim.unwrap_or(32);
            let model_cfg = ModelConfig {
                vocab_size: vocab.len(),
                hidden_dim: hidden,
                intermediate_dim: args.intermediate_dim.unwrap_or(2 * hidden),
                num_blocks: args.blocks.unwrap_or(2),
                num_heads: args.heads.unwrap_or(4),
                max_seq_len: args.max_seq_len.unwrap_or(64),
                activation: match &args.activation {
                    Some(a) => parse_enum::<Activation>(a, "activation")?,
                    None => Activation::Gelu,
                },
            };
            let mut model = Encoder::new(model_cfg.clone(), vocab, InitScheme::new(cfg.seed), precision)?;
            model.set_use_domain_tokens(args.domain_tokens.unwrap_or(true));
            resolved.hidden_dim = Some(model_cfg.hidden_dim);
            resolved.intermediate_dim = Some(model_cfg.intermediate_dim);
            resolved.blocks = Some(model_cfg.num_blocks);
            resolved.heads = Some(model_cfg.num_heads);
            resolved.max_seq_len = Some(model_cfg.max_seq_len);
            resolved.activation = Some(enum_name(&model_cfg.activation)?);
            resolved.max_vocab = Some(args.max_vocab.unwrap_or(30_000));
            Trainer::new(model, cfg.clone())?
        }
    };
    resolved.domain_tokens = Some(trainer.model().use_domain_tokens());
    resolved.dtype = Some(if precision == DType::F64 { "f64" } else { "f32" }.into());
    resolved.batch_size = Some(cfg.batch_size);
    resolved.learning_rate = Some(cfg.learning_rate);
    resolved.scheduler = Some(enum_name(&cfg.scheduler)?);
    resolved.warmup_steps = Some(cfg.warmup_steps);
    resolved.epochs = Some(cfg.max_epochs);
    resolved.validate_every = Some(cfg.validate_every);
    resolved.patience = Some(cfg.patience);
    resolved.router_ce_weight = Some(cfg.router_ce_weight);
    resolved.mi_weight = Some(cfg.mi_weight);
    resolved.weight_decay = Some(cfg.weight_decay);
    resolved.seed = Some(cfg.seed);
    resolved.resume = Some(resume);

    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_snapshot(&out.join(SNAPSHOT_FILE), "train", &resolved)?;
    let history_path = out.join(HISTORY_FILE);
    let mut history = std::io::BufWriter::new(
        std::fs::File::create(&history_path).with_context(|| format!("creating {}", history_path.display()))?,
    );
    let outcome = training_loop(&mut trainer, &corpus, &train, &valid, &mut |rec| {
        serde_json::to_writer(&mut history, rec)?;
        history
            .write_all(b"\n")
            .map_err(|e| Error::Data(format!("writing history: {e}")))?;
        Ok(())
    })?;
    history.flush()?;

    let state = TrainingState {
        step: outcome.best_step,
        best_f1max: Some(outcome.best_f1max),
        config: Some(cfg),
    };
    Checkpoint::from_model(trainer.model())?
        .with_training(trainer.temperature(), state)
        .save(&out.join(BEST_CHECKPOINT))?;
    std::fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&outcome.best_report)?)?;
    println!("{}", outcome.best_report.table("trained"));
    println!(
        "best mean-domain F1max {:.4} at step {}{}",
        outcome.best_f1max,
        outcome.best_step,
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct EvaluateArgs {
    /// A checkpoint path, or `tfidf` for the baseline.
    #[arg(long)]
    pub model: Option<String>,
    /// Pair file to score, e.g. `pairs.valid`.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Abstracts; defaults to `corpus.jsonl` next to the pair file.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// `validation` or `test`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Report JSON output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional JSON-lines output with the similarity of every pair.
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

pub fn evaluate_cmd(args: &EvaluateArgs) -> Result<()> {
    let reference = required(&args.model, "model")?;
    let pairs_path = required(&args.pairs, "pairs")?;
    let out = required(&args.out, "out")?;
    let mode = parse_enum::<EvalMode>(args.mode.as_deref().unwrap_or("validation"), "mode")?;
    let corpus_path = match &args.corpus {
        Some(p) => p.clone(),
        None => pairs_path.parent().unwrap_or(Path::new(".")).join(CORPUS_FILE),
    };
    let corpus = Corpus::load(&corpus_path)?;
    let pairs = read_pairs(&pairs_path)?;
    let (label, scored) = if reference == "tfidf" {
        ("TF-IDF".to_string(), tfidf_baseline(&corpus, &pairs)?)
    } else {
        let path = Path::new(&reference);
        if !path.is_file() {
            return Err(config_error(format!("unknown model reference `{reference}` (not `tfidf` nor a checkpoint file)")));
        }
        let model = Checkpoint::load(path)?.to_model()?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or(reference.clone());
        (name, score_pairs(&model, &corpus, &pairs, 64)?)
    };
    let report = evaluate_scored(&scored, mode)?;
    std::fs::write(&out, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", out.display()))?;
    if let Some(path) = &args.scores {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for p in &scored {
            serde_json::to_writer(&mut w, p)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    let mut resolved = args.clone();
    resolved.corpus = Some(corpus_path);
    resolved.mode = Some(enum_name(&mode)?);
    write_snapshot(&snapshot_beside(&out), "evaluate", &resolved)?;
    print!("{}", report.table(&label));
    Ok(())
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Text file with one abstract per line.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Domain of every abstract in the file.
    #[arg(long)]
    pub domain: Option<String>,
    /// Output: one JSON array per input line.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn embed_cmd(args: &EmbedArgs) -> Result<()> {
    let ckpt = required(&args.checkpoint, "checkpoint")?;
    let input = required(&args.input, "input")?;
    let domain = required(&args.domain, "domain")?;
    let out = required(&args.out, "out")?;
    let model = Checkpoint::load(&ckpt)?.to_model()?;
    if !model.vocab().has_domain(&domain) {
        return Err(Error::UnknownDomain(domain).into());
    }
    let file = std::fs::File::open(&input).map_err(|e| Error::Data(format!("{}: {e}", input.display())))?;
    let lines: Vec<String> = std::io::BufReader::new(file).lines().collect::<std::io::Result<_>>()?;
    let texts: Vec<&str> = lines.iter().map(String::as_str).collect();
    let domains = vec![Some(domain.as_str()); texts.len()];
    let vectors = if texts.is_empty() { Vec::new() } else { model.embed_texts(&texts, &domains, 64)? };
    let mut w = std::io::BufWriter::new(std::fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?);
    for v in &vectors {
        serde_json::to_writer(&mut w, v)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    write_snapshot(&snapshot_beside(&out), "embed", args)?;
    println!("{} vectors of length {} written to {}", vectors.len(), model.hidden_dim(), out.display());
    Ok(())
}
