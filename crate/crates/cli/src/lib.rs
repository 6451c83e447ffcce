//! `mtgrec` command-line driver. Each subcommand runs one pipeline stage
//! and writes its artifacts into the run directory.

pub mod config;
pub mod synth;

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mtgrec_core::curriculum::{finetune_and_select, pretrain_curriculum, EpochRecord, TrainingRunRecord};
use mtgrec_core::data::{load_interactions_with, Dataset, Pair};
use mtgrec_core::embeddings::{apply_whitening, fit_whitening, SemanticEmbeddingMatrix, DEFAULT_WHITENING_EPS};
use mtgrec_core::evaluation::evaluate_full;
use mtgrec_core::family::{interval_report, select_family, write_diff_csv, TokenizerFamily};
use mtgrec_core::influence::{write_audit_jsonl, write_influence_csv, InfluenceRow};
use mtgrec_core::recommender::ModelParams;
use mtgrec_core::rqvae::{snapshot_checkpoint, TokenizerCheckpoint, TokenizerTrainer};
use mtgrec_core::seed;

use config::{Overrides, RunConfig};

pub const TOKENIZER_DIR: &str = "tokenizers";
pub const FAMILY_MANIFEST: &str = "family.txt";
pub const PRETRAINED_MODEL: &str = "models/pretrained.mtgm";
pub const FINETUNED_MODEL: &str = "models/finetuned.mtgm";
pub const RUN_RECORD: &str = "run_record.json";
pub const EPOCH_LOG: &str = "record.jsonl";
pub const REPORT_JSON: &str = "report.json";

/// An input file or directory that does not exist.
#[derive(Debug)]
pub struct MissingInput(pub PathBuf);

impl std::fmt::Display for MissingInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "missing input: {}", self.0.display())
    }
}

impl std::error::Error for MissingInput {}

#[derive(Parser, Debug)]
#[command(name = "mtgrec", version, about = "Multi-identifier generative recommendation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Directory holding every artifact (default `run`).
    #[arg(long, global = true, value_name = "PATH")]
    run_dir: Option<PathBuf>,
    /// Override any config key, e.g. `--set curriculum.tau=0.3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write a synthetic interaction log and item embeddings.
    SynthData,
    /// Train the item tokenizer and keep its last checkpoints.
    TrainTokenizer,
    /// Select the tokenizer family from the kept checkpoints.
    SnapshotFamily,
    /// Curriculum pre-training over the family.
    Pretrain,
    /// Fine-tune per tokenizer and keep the best model.
    Finetune,
    /// Full-ranking evaluation on the test split.
    Evaluate,
    /// Per-stage influence scores and sampling probabilities.
    InfluenceReport,
    /// Identifier changes between family members.
    DiffReport,
}

/// Parses `args` (program name first), runs the stage and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let config = RunConfig::resolve(&Overrides {
        config: cli.config.clone(),
        seed: cli.seed,
        run_dir: cli.run_dir.clone(),
        set: cli.set.clone(),
    })?;
    eprintln!("mtgrec {:?}: seed {}", cli.command, config.seed);
    eprintln!("resolved config:\n{}", config.dump());
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build()?;
    pool.install(|| run_stage(cli.command, &config))
}

fn run_stage(command: Command, config: &RunConfig) -> Result<()> {
    let dir = &config.paths.run_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), config.dump())?;
    match command {
        Command::SynthData => synth_data(config),
        Command::TrainTokenizer => train_tokenizer(config),
        Command::SnapshotFamily => snapshot_family(config),
        Command::Pretrain => pretrain(config),
        Command::Finetune => finetune(config),
        Command::Evaluate => evaluate(config),
        Command::InfluenceReport => influence_report(config),
        Command::DiffReport => diff_report(config),
    }
}

fn require(path: &Path) -> Result<PathBuf> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(MissingInput(path.to_path_buf()).into())
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let path = require(&config.paths.resolve(&config.paths.data))?;
    Ok(load_interactions_with(&path, config.data.min_count)?)
}

fn load_family(config: &RunConfig) -> Result<TokenizerFamily> {
    let path = require(&config.paths.run_dir.join(FAMILY_MANIFEST))?;
    Ok(TokenizerFamily::load_manifest(&path)?)
}

fn load_record(config: &RunConfig) -> Result<TrainingRunRecord> {
    let path = require(&config.paths.run_dir.join(RUN_RECORD))?;
    Ok(serde_json::from_str(&fs::read_to_string(&path)?)
        .with_context(|| format!("parsing {}", path.display()))?)
}

fn save_record(config: &RunConfig, record: &TrainingRunRecord) -> Result<()> {
    let path = config.paths.run_dir.join(RUN_RECORD);
    fs::write(&path, serde_json::to_string_pretty(record)?)?;
    Ok(())
}

fn write_epochs(path: &Path, epochs: &[EpochRecord], append: bool) -> Result<()> {
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    let mut out = BufWriter::new(file);
    for e in epochs {
        serde_json::to_writer(&mut out, e)?;
        writeln!(out)?;
    }
    Ok(())
}

fn synth_data(config: &RunConfig) -> Result<()> {
    let records = synth::synth_records(&config.synth, config.seed)?;
    let dataset = Dataset::from_records(records, config.data.min_count)?;
    let embeddings = synth::synth_item_embeddings(&config.synth, &dataset, config.seed)?;
    let data_path = config.paths.resolve(&config.paths.data);
    let mut out = create(&data_path)?;
    dataset.write_tsv(&mut out)?;
    out.flush()?;
    let emb_path = config.paths.resolve(&config.paths.embeddings);
    if let Some(parent) = emb_path.parent() {
        fs::create_dir_all(parent)?;
    }
    embeddings.save(&emb_path)?;
    eprintln!(
        "wrote {} users over {} items to {} and {}",
        dataset.sequences.len(),
        dataset.catalog.len(),
        data_path.display(),
        emb_path.display()
    );
    Ok(())
}

fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(TOKENIZER_DIR).join(format!("epoch_{epoch:06}.mtgt"))
}

fn train_tokenizer(config: &RunConfig) -> Result<()> {
    let block = &config.rqvae;
    if block.epochs == 0 || block.keep_last == 0 {
        bail!("rqvae.epochs and rqvae.keep_last must be positive");
    }
    let dataset = load_dataset(config)?;
    let emb_path = require(&config.paths.resolve(&config.paths.embeddings))?;
    let embeddings = SemanticEmbeddingMatrix::load(&emb_path)?;
    embeddings.check_catalog_size(dataset.catalog.len())?;
    let out_dim = if block.whiten_dim == 0 { embeddings.dim() } else { block.whiten_dim };
    let whitening = fit_whitening(&embeddings, out_dim, DEFAULT_WHITENING_EPS)?;
    let whitened = apply_whitening(&whitening, &embeddings)?;

    let rq = block.rqvae_config();
    rq.validate()?;
    let mut trainer = TokenizerTrainer::new(rq, &whitened, block.batch_size, seed::derive(config.seed, "rqvae"))?;
    let dir = &config.paths.run_dir;
    let ckpt_dir = dir.join(TOKENIZER_DIR);
    if ckpt_dir.exists() {
        fs::remove_dir_all(&ckpt_dir)?;
    }
    fs::create_dir_all(&ckpt_dir)?;
    let mut log = create(&dir.join("tokenizer_record.jsonl"))?;
    let first_kept = block.epochs.saturating_sub(block.keep_last) + 1;
    for epoch in 1..=block.epochs {
        let loss = trainer.train_epoch(&whitened, block.lr)?;
        writeln!(
            log,
            "{}",
            serde_json::json!({"epoch": epoch, "recon": loss.recon, "rq": loss.rq, "total": loss.total})
        )?;
        if epoch >= first_kept {
            snapshot_checkpoint(&trainer.params, &whitened, epoch)?.save(&checkpoint_path(dir, epoch))?;
        }
    }
    log.flush()?;
    eprintln!(
        "kept checkpoints {first_kept}..={} in {}",
        block.epochs,
        ckpt_dir.display()
    );
    Ok(())
}

fn snapshot_family(config: &RunConfig) -> Result<()> {
    let dir = &config.paths.run_dir;
    let ckpt_dir = require(&dir.join(TOKENIZER_DIR))?;
    let mut paths: Vec<PathBuf> = fs::read_dir(&ckpt_dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "mtgt"));
    paths.sort();
    let all = paths
        .iter()
        .map(|p| TokenizerCheckpoint::load(p))
        .collect::<mtgrec_core::Result<Vec<_>>>()?;
    let family = select_family(all, config.family.n)?;
    let members: Vec<(usize, PathBuf)> = family
        .checkpoints()
        .iter()
        .map(|c| (c.epoch, Path::new(TOKENIZER_DIR).join(format!("epoch_{:06}.mtgt", c.epoch))))
        .collect();
    TokenizerFamily::write_manifest(&dir.join(FAMILY_MANIFEST), &members)?;
    eprintln!(
        "family of {} tokenizers, epochs {}..={}",
        family.len(),
        family.get(0).epoch,
        family.final_epoch()
    );
    Ok(())
}

fn pretrain(config: &RunConfig) -> Result<()> {
    let dataset = load_dataset(config)?;
    let family = load_family(config)?;
    let bundles = dataset.splits(config.data.max_len)?;
    let (params, record) = pretrain_curriculum(&family, &bundles, &config.model, &config.curriculum)?;
    let dir = &config.paths.run_dir;
    let model_path = dir.join(PRETRAINED_MODEL);
    fs::create_dir_all(model_path.parent().expect("has parent"))?;
    params.save(&model_path)?;
    write_epochs(&dir.join(EPOCH_LOG), &record.epochs, false)?;
    save_record(config, &record)?;
    write_influence_files(dir, &record)?;
    if record.single_tokenizer {
        eprintln!("single tokenizer: influence updates skipped");
    }
    eprintln!(
        "pre-training done, final loss {}",
        record.epochs.last().map_or(f64::NAN, |e| e.mean_loss)
    );
    Ok(())
}

fn finetune(config: &RunConfig) -> Result<()> {
    let dataset = load_dataset(config)?;
    let family = load_family(config)?;
    let dir = &config.paths.run_dir;
    let pretrained = ModelParams::load(&require(&dir.join(PRETRAINED_MODEL))?)?;
    let mut record = load_record(config)?;
    record.finetune.clear();
    record.epochs.retain(|e| e.phase == "pretrain");
    record.chosen = None;
    let bundles = dataset.splits(config.data.max_len)?;
    let before = record.epochs.len();
    let (best, chosen) =
        finetune_and_select(&pretrained, &family, &bundles, &config.curriculum, &config.eval, &mut record)?;
    best.save(&dir.join(FINETUNED_MODEL))?;
    write_epochs(&dir.join(EPOCH_LOG), &record.epochs[before..], true)?;
    save_record(config, &record)?;
    eprintln!(
        "selected tokenizer {chosen} (epoch {})",
        family.get(chosen).epoch
    );
    Ok(())
}

fn evaluate(config: &RunConfig) -> Result<()> {
    config.eval.validate()?;
    let dataset = load_dataset(config)?;
    let family = load_family(config)?;
    let dir = &config.paths.run_dir;
    let model = ModelParams::load(&require(&dir.join(FINETUNED_MODEL))?)?;
    let record = load_record(config)?;
    let chosen = record.chosen.context("run record has no selected tokenizer; run finetune first")?;
    if chosen >= family.len() {
        bail!("selected tokenizer {chosen} is outside the family of {}", family.len());
    }
    let tests: Vec<Pair> = dataset
        .splits(config.data.max_len)?
        .into_iter()
        .map(|b| b.test_pair)
        .collect();
    let groups = dataset
        .training_catalog()?
        .popularity_groups(&config.eval.popularity_boundaries)?;
    let report = evaluate_full(&model, family.get(chosen), &tests, Some(groups.as_slice()), &config.eval)?;
    fs::write(dir.join(REPORT_JSON), serde_json::to_string_pretty(&report.to_json())? + "\n")?;
    let text = report.to_text();
    fs::write(dir.join("report.txt"), &text)?;
    let mut csv = create(&dir.join("groups.csv"))?;
    report.write_group_csv(&mut csv)?;
    csv.flush()?;
    print!("{text}");
    Ok(())
}

fn influence_rows(record: &TrainingRunRecord) -> Vec<InfluenceRow> {
    let mut rows = Vec::new();
    for stage in &record.stages {
        for (i, &epoch) in record.tokenizer_epochs.iter().enumerate() {
            rows.push(InfluenceRow {
                stage: stage.stage,
                tokenizer_epoch: epoch,
                score: stage.scores[i],
                cumulative: stage.cumulative[i],
                probability: stage.distribution.probs[i],
            });
        }
    }
    rows
}

fn write_influence_files(dir: &Path, record: &TrainingRunRecord) -> Result<()> {
    let mut csv = create(&dir.join("influence.csv"))?;
    write_influence_csv(&influence_rows(record), &mut csv)?;
    csv.flush()?;
    let mut audit = create(&dir.join("audit.jsonl"))?;
    write_audit_jsonl(&record.audits, &mut audit)?;
    audit.flush()?;
    Ok(())
}

fn influence_report(config: &RunConfig) -> Result<()> {
    let record = load_record(config)?;
    write_influence_files(&config.paths.run_dir, &record)?;
    if record.single_tokenizer {
        println!("single-tokenizer run: no influence stages");
    }
    write_influence_csv(&influence_rows(&record), std::io::stdout().lock())?;
    Ok(())
}

fn diff_report(config: &RunConfig) -> Result<()> {
    let family = load_family(config)?;
    let rows = interval_report(&family)?;
    let mut csv = create(&config.paths.run_dir.join("diff.csv"))?;
    write_diff_csv(&rows, &mut csv)?;
    csv.flush()?;
    write_diff_csv(&rows, std::io::stdout().lock())?;
    Ok(())
}
