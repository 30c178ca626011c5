use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use vemfuse_cli::{
    dataset_digests, exit, exit_code, run_dir, sha256_bytes, CliError, FileDigest, RunConfig,
    RunManifest,
};
use vemfuse_core::checks::{detachment_suite, gradient_suite};
use vemfuse_core::densify::{densify, DensifyStats};
use vemfuse_core::eval::{
    dump_topk, evaluate, evaluate_text, ranks_jsonl, EvalOptions, Split, StructScorer, TiePolicy,
};
use vemfuse_core::kg::{
    augment_inverse, degree_stats, load_dataset, relation_jaccard, sparsify, write_text,
    write_triples, DatasetPaths,
};
use vemfuse_core::losses::elbo_diagnostic;
use vemfuse_core::losses::FusionConfig;
use vemfuse_core::rng::SeedStream;
use vemfuse_core::structure::StructModel;
use vemfuse_core::text::{build_vocab, TextModel};
use vemfuse_core::trainer::{
    fuse, load_structure, load_text, pretrain_structure, pretrain_text, save_structure, save_text,
    ModelKind, RunLog, TrainData,
};
use vemfuse_core::{KnowledgeGraph, TripleSplit};

#[derive(Parser)]
#[command(
    name = "vemfuse",
    version,
    about = "Structure/text fusion for sparse knowledge-graph completion"
)]
struct Cli {
    /// Root under which run directories are created.
    #[arg(long, global = true, env = "VEMFUSE_RUN_DIR")]
    run_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, validate and optionally sparsify a dataset; write the bundle and stats.
    Prepare(PrepareArgs),
    /// Supervised pre-training of one model.
    Pretrain(PretrainArgs),
    /// Alternating E/M fusion of a pretrained pair.
    Fuse(FuseArgs),
    /// Filtered ranking evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Densification statistics for a model pair.
    DensifyStats(DensifyArgs),
    /// ELBO decomposition, gradient and detachment self-checks.
    Diag(DiagArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Exact run directory (overrides the run root).
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Run name under the run root.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    data: PathBuf,
    /// Keep this fraction of the training triples.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    run: RunArgs,
}

/// Config file plus the flags that override it.
#[derive(Args)]
struct ConfigArgs {
    /// JSON with optional `train`, `fusion`, `structure`, `text` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    lr_struct: Option<f64>,
    #[arg(long)]
    lr_text: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Pre-training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Fusion rounds (one E-step and one M-step each).
    #[arg(long)]
    fusion_epochs: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    tie_policy: Option<Policy>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    alpha_t: Option<f64>,
    #[arg(long)]
    alpha_s: Option<f64>,
    #[arg(long)]
    beta_t: Option<f64>,
    #[arg(long)]
    beta_s: Option<f64>,
    /// Generated queries per batch.
    #[arg(long = "num-queries")]
    n: Option<usize>,
    /// Neighbour triples per generated query.
    #[arg(long = "neighbors")]
    m: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Random,
    Expected,
}

impl From<Policy> for TiePolicy {
    fn from(p: Policy) -> Self {
        match p {
            Policy::Random => TiePolicy::Random,
            Policy::Expected => TiePolicy::Expected,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Fb15k237_20,
    Wn18rr,
    Cn100k,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Structure,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Dev,
    Test,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: Kind,
    /// Start from this checkpoint stem instead of a fresh initialization.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    data: PathBuf,
    /// Structure checkpoint stem.
    #[arg(long)]
    structure: PathBuf,
    /// Text checkpoint stem.
    #[arg(long)]
    text: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, value_enum, default_value = "random")]
    tie_policy: Policy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Print and write the best k predictions per tail query.
    #[arg(long)]
    dump_topk: Option<usize>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct DensifyArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    structure: PathBuf,
    #[arg(long)]
    text: PathBuf,
    /// Densified batches to draw.
    #[arg(long, default_value_t = 10)]
    batches: usize,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct DiagArgs {
    /// Dataset directory whose test queries are the unobserved ones.
    #[arg(long, default_value = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/tiny"))]
    fixture: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    run: RunArgs,
}

/// Where the current run writes, for the failure dump.
#[derive(Default)]
struct Ctx {
    run_root: Option<PathBuf>,
    dir: Option<PathBuf>,
}

impl Ctx {
    /// Fresh run directory; an existing run is never overwritten, a numeric
    /// suffix is added instead.
    fn open(&mut self, run: &RunArgs, default_name: &str) -> Result<PathBuf> {
        let base = run_dir(
            run.run_dir.as_deref(),
            self.run_root.as_deref(),
            run.name.as_deref().unwrap_or(default_name),
        );
        let mut dir = base.clone();
        let mut i = 1;
        while dir.join(vemfuse_cli::MANIFEST_FILE).exists() {
            dir = PathBuf::from(format!("{}-{i}", base.display()));
            i += 1;
        }
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        self.dir = Some(dir.clone());
        Ok(dir)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut ctx = Ctx {
        run_root: cli.run_root.clone(),
        dir: None,
    };
    let result = match cli.command {
        Command::Prepare(a) => cmd_prepare(&mut ctx, a),
        Command::Pretrain(a) => cmd_pretrain(&mut ctx, a),
        Command::Fuse(a) => cmd_fuse(&mut ctx, a),
        Command::Eval(a) => cmd_eval(&mut ctx, a),
        Command::DensifyStats(a) => cmd_densify_stats(&mut ctx, a),
        Command::Diag(a) => cmd_diag(&mut ctx, a),
    };
    match result {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e:#}");
            if let Some(dir) = &ctx.dir {
                let dump = json!({
                    "error": format!("{e:#}"),
                    "exit_code": code,
                    "run_log": "runlog.jsonl",
                });
                let _ = fs::write(
                    dir.join("failure.json"),
                    serde_json::to_string_pretty(&dump).unwrap(),
                );
            }
            ExitCode::from(code as u8)
        }
    }
}

fn args_vec() -> Vec<String> {
    std::env::args().collect()
}

fn resolve_config(a: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = a.preset {
        cfg.fusion = match p {
            Preset::Fb15k237_20 => FusionConfig::fb15k237_20(),
            Preset::Wn18rr => FusionConfig::wn18rr(),
            Preset::Cn100k => FusionConfig::cn100k(),
        };
    }
    let t = &mut cfg.train;
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(t.seed, a.seed);
    set!(t.workers, a.workers);
    set!(t.lr_struct, a.lr_struct);
    set!(t.lr_text, a.lr_text);
    set!(t.batch_size, a.batch_size);
    set!(t.pretrain_epochs, a.epochs);
    set!(t.fusion_epochs, a.fusion_epochs);
    set!(t.eval_every, a.eval_every);
    set!(t.label_smoothing, a.label_smoothing);
    set!(t.tie_policy, a.tie_policy.map(TiePolicy::from));
    let f = &mut cfg.fusion;
    set!(f.alpha_t, a.alpha_t);
    set!(f.alpha_s, a.alpha_s);
    set!(f.beta_t, a.beta_t);
    set!(f.beta_s, a.beta_s);
    set!(f.n, a.n);
    set!(f.m, a.m);
    cfg.validate()
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    Ok(cfg)
}

struct Loaded {
    graph: KnowledgeGraph,
    split: TripleSplit,
    /// Digest over the dataset file digests.
    fingerprint: String,
    files: Vec<FileDigest>,
}

fn load(dir: &Path) -> Result<Loaded> {
    let paths = DatasetPaths::in_dir(dir);
    if !paths.train.exists() {
        return Err(CliError::Invalid(format!("{} not found", paths.train.display())).into());
    }
    let (g, s, _) = load_dataset(&paths).with_context(|| format!("loading {}", dir.display()))?;
    let (graph, split) = augment_inverse(&g, &s)?;
    let files = dataset_digests(dir)?;
    let joined: String = files.iter().map(|f| f.sha256.as_str()).collect();
    Ok(Loaded {
        graph,
        split,
        fingerprint: sha256_bytes(joined.as_bytes()),
        files,
    })
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn checkpoint_json(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

fn require_checkpoint(stem: &Path) -> Result<serde_json::Value> {
    let path = checkpoint_json(stem);
    if !path.exists() || !stem.with_extension("bin").exists() {
        return Err(CliError::MissingCheckpoint(stem.to_path_buf()).into());
    }
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path)?)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    Ok(v["meta"].clone())
}

fn checkpoint_digests(stem: &Path) -> Result<Vec<FileDigest>> {
    let mut out = vec![
        FileDigest::of(&stem.with_extension("bin"))?,
        FileDigest::of(&checkpoint_json(stem))?,
    ];
    let mut vocab = stem.as_os_str().to_owned();
    vocab.push(".vocab.tsv");
    let vocab = PathBuf::from(vocab);
    if vocab.exists() {
        out.push(FileDigest::of(&vocab)?);
    }
    Ok(out)
}

/// Refuses a checkpoint trained on a different dataset.
fn check_dataset(meta: &serde_json::Value, data: &Loaded, stem: &Path) -> Result<()> {
    match meta["extra"]["dataset"].as_str() {
        Some(fp) if fp != data.fingerprint => Err(CliError::Invalid(format!(
            "{} was trained on a different dataset",
            stem.display()
        ))
        .into()),
        _ => Ok(()),
    }
}

fn kind_of(meta: &serde_json::Value) -> Result<ModelKind> {
    serde_json::from_value(meta["kind"].clone())
        .map_err(|_| CliError::Invalid("checkpoint manifest has no model kind".into()).into())
}

fn cmd_prepare(ctx: &mut Ctx, a: PrepareArgs) -> Result<()> {
    let name = match a.fraction {
        Some(f) => format!("prepare-f{f}-s{}", a.seed),
        None => "prepare".to_string(),
    };
    let dir = ctx.open(&a.run, &name)?;
    let paths = DatasetPaths::in_dir(&a.data);
    if !paths.train.exists() {
        return Err(CliError::Invalid(format!("{} not found", paths.train.display())).into());
    }
    let (graph, split, report) = load_dataset(&paths)?;
    let split = match a.fraction {
        Some(f) => sparsify(&split, f, a.seed)?,
        None => split,
    };
    let graph = graph.with_train(&split.train)?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command: "prepare".into(),
        args: args_vec(),
        seed: a.seed,
        config: RunConfig::default(),
        dataset_dir: Some(a.data.clone()),
        dataset_files: dataset_digests(&a.data)?,
        inputs: Vec::new(),
        artifacts: [
            "train.tsv",
            "valid.tsv",
            "test.tsv",
            "entity_text.tsv",
            "relation_text.tsv",
            "stats.json",
            "relation_jaccard.csv",
        ]
        .map(String::from)
        .to_vec(),
    };
    manifest.write_new(&dir)?;
    write_triples(&dir.join("train.tsv"), &graph, &split.train)?;
    write_triples(&dir.join("valid.tsv"), &graph, &split.valid)?;
    write_triples(&dir.join("test.tsv"), &graph, &split.test)?;
    write_text(&dir, &graph)?;
    let (aug, aug_split) = augment_inverse(&graph, &split)?;
    let jac = relation_jaccard(&graph);
    let names: Vec<String> = (0..graph.num_base_relations())
        .map(|r| graph.relation_name(r))
        .collect();
    fs::write(dir.join("relation_jaccard.csv"), jac.to_csv(&names))?;
    let stats = json!({
        "fraction": a.fraction,
        "seed": a.seed,
        "entities": graph.num_entities(),
        "relations": graph.num_base_relations(),
        "train": split.train.len(),
        "valid": split.valid.len(),
        "test": split.test.len(),
        "train_with_inverses": aug_split.train.len(),
        "relations_with_inverses": aug.num_relations(),
        "degree": degree_stats(&graph),
        "relation_jaccard_off_diagonal_mean": jac.off_diagonal_mean(),
        "load_report": report,
    });
    write_json(&dir.join("stats.json"), &stats)?;
    println!(
        "{}",
        json!({"bundle": dir, "train": split.train.len(), "valid": split.valid.len(), "test": split.test.len()})
    );
    Ok(())
}

fn new_manifest(
    command: &str,
    cfg: &RunConfig,
    data: &Path,
    loaded: &Loaded,
    inputs: Vec<FileDigest>,
    artifacts: &[&str],
) -> RunManifest {
    RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        args: args_vec(),
        seed: cfg.train.seed,
        config: cfg.clone(),
        dataset_dir: Some(data.to_path_buf()),
        dataset_files: loaded.files.clone(),
        inputs,
        artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
    }
}

fn cmd_pretrain(ctx: &mut Ctx, a: PretrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg)?;
    let data = load(&a.data)?;
    let resume_meta = a.resume.as_deref().map(require_checkpoint).transpose()?;
    let (kind_name, stem_name) = match a.model {
        Kind::Structure => ("structure", "structure"),
        Kind::Text => ("text", "text"),
    };
    let dir = ctx.open(&a.run, &format!("pretrain-{kind_name}-s{}", cfg.train.seed))?;
    let inputs = match &a.resume {
        Some(s) => checkpoint_digests(s)?,
        None => Vec::new(),
    };
    new_manifest(
        &format!("pretrain {kind_name}"),
        &cfg,
        &a.data,
        &data,
        inputs,
        &[
            &format!("{stem_name}.bin"),
            &format!("{stem_name}.json"),
            "runlog.jsonl",
            "outcome.json",
        ],
    )
    .write_new(&dir)?;
    if let (Some(meta), Some(stem)) = (&resume_meta, &a.resume) {
        check_dataset(meta, &data, stem)?;
    }
    let fingerprint = data.fingerprint.clone();
    let td = TrainData::new(data.graph, data.split)?;
    let mut log = RunLog::to_file(&dir.join("runlog.jsonl"))?;
    let init = SeedStream::new(cfg.train.seed).child("init");
    let extra = json!({"dataset": fingerprint, "seed": cfg.train.seed});
    let stem = dir.join(stem_name);
    let outcome = match a.model {
        Kind::Structure => {
            let mut p = match &a.resume {
                Some(s) => load_structure(s)?.0,
                None => StructModel::<f32>::new(
                    cfg.structure.clone(),
                    td.graph.num_entities(),
                    td.graph.num_relations(),
                    &mut init.rng("structure"),
                )?,
            };
            let o = pretrain_structure(&mut p, &td, &cfg.train, &mut log)?;
            save_structure(&stem, &p, extra)?;
            o
        }
        Kind::Text => {
            let mut q = match &a.resume {
                Some(s) => load_text(s, td.graph.text())?.0,
                None => {
                    let vocab = Arc::new(build_vocab(td.graph.text(), cfg.text.min_count));
                    TextModel::<f32>::new(
                        cfg.text.clone(),
                        vocab,
                        td.graph.text(),
                        td.graph.num_entities(),
                        &mut init.rng("text"),
                    )?
                }
            };
            let o = pretrain_text(&mut q, &td, &cfg.train, &mut log)?;
            save_text(&stem, &q, extra)?;
            o
        }
    };
    write_json(&dir.join("outcome.json"), &outcome)?;
    println!("{}", json!({"checkpoint": stem, "outcome": outcome}));
    Ok(())
}

fn load_pair(
    data: &Loaded,
    structure: &Path,
    text: &Path,
) -> Result<(StructModel<f32>, TextModel<f32>)> {
    let ms = require_checkpoint(structure)?;
    let mt = require_checkpoint(text)?;
    check_dataset(&ms, data, structure)?;
    check_dataset(&mt, data, text)?;
    let p = load_structure(structure)?.0;
    let q = load_text(text, data.graph.text())?.0;
    let ne = data.graph.num_entities();
    if p.num_entities() != ne || q.num_entities() != ne {
        bail!(CliError::Invalid(format!(
            "checkpoints cover {} / {} entities, the dataset has {ne}",
            p.num_entities(),
            q.num_entities()
        )));
    }
    Ok((p, q))
}

fn cmd_fuse(ctx: &mut Ctx, a: FuseArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg)?;
    let data = load(&a.data)?;
    let (mut p, mut q) = load_pair(&data, &a.structure, &a.text)?;
    let dir = ctx.open(&a.run, &format!("fuse-s{}", cfg.train.seed))?;
    let mut inputs = checkpoint_digests(&a.structure)?;
    inputs.extend(checkpoint_digests(&a.text)?);
    new_manifest(
        "fuse",
        &cfg,
        &a.data,
        &data,
        inputs,
        &[
            "structure.bin",
            "structure.json",
            "text.bin",
            "text.json",
            "text.vocab.tsv",
            "runlog.jsonl",
            "outcome.json",
        ],
    )
    .write_new(&dir)?;
    let extra = json!({"dataset": data.fingerprint, "seed": cfg.train.seed, "fused": true});
    let td = TrainData::new(data.graph, data.split)?;
    let mut log = RunLog::to_file(&dir.join("runlog.jsonl"))?;
    let out = fuse(&mut p, &mut q, &td, &cfg.fusion, &cfg.train, &mut log)?;
    save_structure(&dir.join("structure"), &p, extra.clone())?;
    save_text(&dir.join("text"), &q, extra)?;
    let chosen = match out.chosen {
        ModelKind::Structure => "structure",
        ModelKind::Text => "text",
    };
    let summary = json!({
        "chosen": out.chosen,
        "chosen_checkpoint": dir.join(chosen),
        "dev_structure": out.dev_structure,
        "dev_text": out.dev_text,
        "rounds": out.rounds,
    });
    write_json(&dir.join("outcome.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn cmd_eval(ctx: &mut Ctx, a: EvalArgs) -> Result<()> {
    let meta = require_checkpoint(&a.checkpoint)?;
    let kind = kind_of(&meta)?;
    let data = load(&a.data)?;
    check_dataset(&meta, &data, &a.checkpoint)?;
    let (split, split_name) = match a.split {
        SplitArg::Dev => (Split::Dev, "dev"),
        SplitArg::Test => (Split::Test, "test"),
    };
    let policy = TiePolicy::from(a.tie_policy);
    let stem_name = a
        .checkpoint
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let dir = ctx.open(
        &a.run,
        &format!("eval-{stem_name}-{split_name}-s{}", a.seed),
    )?;
    let mut cfg = RunConfig::default();
    cfg.train.seed = a.seed;
    cfg.train.tie_policy = policy;
    cfg.train.workers = a.workers;
    let mut artifacts = vec!["metrics.json", "ranks.jsonl"];
    if a.dump_topk.is_some() {
        artifacts.push("topk.tsv");
    }
    new_manifest(
        "eval",
        &cfg,
        &a.data,
        &data,
        checkpoint_digests(&a.checkpoint)?,
        &artifacts,
    )
    .write_new(&dir)?;
    let opts = EvalOptions {
        policy,
        seed: a.seed,
        limit: None,
        top_k: 0,
        workers: a.workers,
    };
    let g = &data.graph;
    let gold_queries: Vec<((usize, usize), Option<usize>)> = match split {
        Split::Dev => &data.split.valid,
        Split::Test => &data.split.test,
    }
    .iter()
    .filter(|t| t.relation < g.num_base_relations())
    .map(|t| ((t.head, t.relation), Some(t.tail)))
    .collect();
    let (queries, gold): (Vec<_>, Vec<_>) = gold_queries.into_iter().unzip();
    let (metrics, ranks, topk) = match kind {
        ModelKind::Structure => {
            let p = load_structure(&a.checkpoint)?.0;
            let scorer = StructScorer::new(&p, g)?;
            let (m, r) = evaluate(&scorer, g, &data.split, split, &opts)?;
            let t = match a.dump_topk {
                Some(k) => Some(dump_topk(&scorer, &queries, &gold, k)?),
                None => None,
            };
            (m, r, t)
        }
        ModelKind::Text => {
            let q = load_text(&a.checkpoint, g.text())?.0;
            let (m, r) = evaluate_text(&q, g, &data.split, split, &opts)?;
            let t = match a.dump_topk {
                Some(k) => Some(dump_topk(&q, &queries, &gold, k)?),
                None => None,
            };
            (m, r, t)
        }
    };
    let text = metrics.to_json();
    fs::write(dir.join("metrics.json"), format!("{text}\n"))?;
    fs::write(dir.join("ranks.jsonl"), ranks_jsonl(&ranks))?;
    println!("{text}");
    if let Some(rows) = topk {
        let mut out = String::from("head\trelation\tgold\tgold_rank\tpredictions\n");
        for r in &rows {
            let preds: Vec<String> = r
                .candidates
                .iter()
                .map(|&(e, s)| format!("{} ({s:.3})", g.entity_name(e)))
                .collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                g.entity_name(r.query.0),
                g.relation_name(r.query.1),
                r.gold
                    .map(|e| g.entity_name(e).to_string())
                    .unwrap_or_default(),
                r.gold_rank.map(|x| x.to_string()).unwrap_or_default(),
                preds.join(", ")
            ));
        }
        fs::write(dir.join("topk.tsv"), &out)?;
        print!("{out}");
    }
    Ok(())
}

fn cmd_densify_stats(ctx: &mut Ctx, a: DensifyArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg)?;
    let data = load(&a.data)?;
    let (p, q) = load_pair(&data, &a.structure, &a.text)?;
    let dir = ctx.open(&a.run, &format!("densify-stats-s{}", cfg.train.seed))?;
    let mut inputs = checkpoint_digests(&a.structure)?;
    inputs.extend(checkpoint_digests(&a.text)?);
    new_manifest(
        "densify-stats",
        &cfg,
        &a.data,
        &data,
        inputs,
        &["densify_stats.json"],
    )
    .write_new(&dir)?;
    let g = &data.graph;
    let base_hash = g.fingerprint();
    let stream = SeedStream::new(cfg.train.seed).child("densify-stats");
    let mut total = DensifyStats::default();
    let mut per_batch = Vec::with_capacity(a.batches);
    let mut observed_queries = 0usize;
    let mut overlay_in_graph = 0usize;
    for i in 0..a.batches {
        let d = densify(g, &p, &q, &cfg.fusion, stream.index(i as u64))?;
        observed_queries += d
            .queries
            .iter()
            .filter(|x| !g.tails(x.head, x.relation).is_empty())
            .count();
        overlay_in_graph += d.overlay.edges.iter().filter(|t| g.contains(t)).count();
        if g.fingerprint() != base_hash {
            bail!("base graph changed during densification");
        }
        total.merge(&d.stats);
        per_batch.push(d.stats);
    }
    let report = json!({
        "batches": a.batches,
        "total": total,
        "generated_queries_observed_in_train": observed_queries,
        "overlay_edges_in_train": overlay_in_graph,
        "base_graph_fingerprint": format!("{base_hash:016x}"),
        "per_batch": per_batch,
    });
    write_json(&dir.join("densify_stats.json"), &report)?;
    println!(
        "{}",
        json!({"total": total, "generated_queries_observed_in_train": observed_queries})
    );
    Ok(())
}

fn cmd_diag(ctx: &mut Ctx, a: DiagArgs) -> Result<()> {
    let data = load(&a.fixture)?;
    let dir = ctx.open(&a.run, &format!("diag-s{}", a.seed))?;
    let mut cfg = RunConfig::default();
    cfg.train.seed = a.seed;
    new_manifest("diag", &cfg, &a.fixture, &data, Vec::new(), &["diag.json"]).write_new(&dir)?;
    let g = &data.graph;
    let observed: Vec<_> = data.split.train.clone();
    let unobserved: Vec<(usize, usize)> = data
        .split
        .test
        .iter()
        .filter(|t| t.relation < g.num_base_relations())
        .map(|t| (t.head, t.relation))
        .collect();
    let init = SeedStream::new(a.seed).child("diag");
    let p = StructModel::<f64>::new(
        vemfuse_core::structure::StructConfig {
            dim: 8,
            ..Default::default()
        },
        g.num_entities(),
        g.num_relations(),
        &mut init.rng("structure"),
    )?;
    let vocab = Arc::new(build_vocab(g.text(), 1));
    let q = TextModel::<f64>::new(
        vemfuse_core::text::TextConfig {
            dim: 8,
            ..Default::default()
        },
        vocab,
        g.text(),
        g.num_entities(),
        &mut init.rng("text"),
    )?;
    let elbo = elbo_diagnostic(g, &observed, &unobserved, &p, &q)?;
    let grads = gradient_suite(a.seed)?;
    let detach = detachment_suite(a.seed)?;
    let elbo_ok = elbo.residual < 1e-8 && elbo.identity_error < 1e-10;
    let grads_ok = grads.iter().all(|l| l.max_rel_error < 1e-4);
    let detach_ok = detach.iter().all(|l| l.teacher_nonzero == 0);
    let report = json!({
        "elbo": elbo,
        "gradients": grads,
        "detachment": detach,
        "pass": {"elbo": elbo_ok, "gradients": grads_ok, "detachment": detach_ok},
    });
    write_json(&dir.join("diag.json"), &report)?;
    println!(
        "elbo residual {:.3e} identity {:.3e}; gradcheck worst {:.3e} over {} objectives; detachment {}",
        elbo.residual,
        elbo.identity_error,
        grads.iter().map(|l| l.max_rel_error).fold(0.0, f64::max),
        grads.len(),
        if detach_ok { "clean" } else { "LEAKS" }
    );
    if !(elbo_ok && grads_ok && detach_ok) {
        bail!(CliError::CheckFailed(format!(
            "elbo {elbo_ok}, gradients {grads_ok}, detachment {detach_ok}"
        )));
    }
    Ok(())
}
