//! Command implementations behind the `textrec` binary: ingest, split,
//! train, recommend, evaluate, compare.
//!
//! Every command is idempotent given identical inputs and seed, writes only
//! inside its output directory, and leaves a `manifest.json` there recording
//! the config snapshot, input content hashes, artifact versions, and the
//! seed. Manifests carry no timestamps, so identical runs produce identical
//! manifests.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::canonical_json_line;
use crate::decode::{
    build_eval_prompt, build_trie, read_predictions, recommend_for_users, write_predictions,
};
use crate::error::{Error, Result};
use crate::ingest::{
    build_sequences, compute_stats, parse_amazon, parse_movielens, read_bundle,
    read_sequences_file, split_with_options, train_popularity, write_bundle, write_split_file,
    ParseMode, ParsedDataset, SplitOptions,
};
use crate::metrics::{compare_reports, evaluate_split, MetricsReport, UserPrediction};
use crate::model::ModelConfig;
use crate::tokenizer::{train_tokenizer, TokenizerModel};
use crate::train::{fit_with_epoch_limit, load_params, prepare_corpus_texts, TrainConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOKENIZER_FILE: &str = "tokenizer.json";
pub const STATS_FILE: &str = "stats.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const COMPARISON_JSON: &str = "comparison.json";
pub const COMPARISON_TEXT: &str = "comparison.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Movielens,
    Amazon,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "movielens" => Ok(DatasetKind::Movielens),
            "amazon" => Ok(DatasetKind::Amazon),
            other => Err(Error::config(format!(
                "unknown dataset kind '{other}' (expected movielens or amazon)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub kind: Option<DatasetKind>,
    pub ratings: Option<PathBuf>,
    pub movies: Option<PathBuf>,
    pub reviews: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    pub min_sequence_length: usize,
    pub sliding_window: bool,
    pub strict: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: None,
            ratings: None,
            movies: None,
            reviews: None,
            metadata: None,
            min_sequence_length: 3,
            sliding_window: false,
            strict: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub k: usize,
    pub beam_width: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        // beam width max(2k, 20) for the default k
        DecodeConfig {
            k: 10,
            beam_width: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig { vocab_size: 8192 }
    }
}

/// The full run configuration: a TOML file with flat sections mirroring the
/// component configs. Command-line flags override file values.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub tokenizer: TokenizerConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = match path {
            None => RunConfig::default(),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                toml::from_str(&text)
                    .map_err(|e| Error::config(format!("{}: {e}", path.display())))?
            }
        };
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> RunConfig {
        if let Some(seed) = seed {
            self.seed = seed;
            self.train.seed = seed;
        }
        self
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = std::io::BufReader::new(file);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = reader.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("sha256:{}", hex::encode(hasher.finalize())))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: &'a RunConfig,
    inputs: BTreeMap<String, String>,
    seed: u64,
    artifact_versions: BTreeMap<&'static str, u32>,
}

fn artifact_versions() -> BTreeMap<&'static str, u32> {
    [
        ("bundle", 1),
        ("tokenizer", 1),
        ("checkpoint", 1),
        ("predictions", 1),
        ("report", 1),
    ]
    .into_iter()
    .collect()
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    config: &RunConfig,
    inputs: &[&Path],
) -> Result<()> {
    let mut hashes = BTreeMap::new();
    for path in inputs {
        hashes.insert(path.display().to_string(), sha256_file(path)?);
    }
    let manifest = Manifest {
        command,
        config,
        inputs: hashes,
        seed: config.seed,
        artifact_versions: artifact_versions(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    std::fs::write(&path, canonical_json_line(&manifest)? + "\n").map_err(|e| Error::io(&path, e))
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::config(format!(
            "input file does not exist: {}",
            path.display()
        )));
    }
    Ok(())
}

fn ensure_out_dir(out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))
}

fn open_input(path: &Path) -> Result<std::io::BufReader<std::fs::File>> {
    require_file(path)?;
    Ok(std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| Error::io(path, e))?,
    ))
}

#[derive(Serialize)]
struct StatsDoc {
    num_users: usize,
    num_items: usize,
    num_interactions: usize,
    catalog_size: usize,
    dropped_short_users: u64,
    dropped_unknown_item: u64,
    skipped_malformed: u64,
    title_collisions: usize,
}

/// Parse the raw dataset, build sequences, split leave-one-out, and write the
/// canonical bundle plus `stats.json`.
pub fn cmd_ingest(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let kind = config
        .data
        .kind
        .ok_or_else(|| Error::config("ingest: dataset kind is required (movielens or amazon)"))?;
    let mode = if config.data.strict {
        ParseMode::Strict
    } else {
        ParseMode::Lenient
    };
    let (parsed, inputs): (ParsedDataset, Vec<PathBuf>) = match kind {
        DatasetKind::Movielens => {
            let ratings = config
                .data
                .ratings
                .clone()
                .ok_or_else(|| Error::config("ingest: --ratings is required for movielens"))?;
            let movies = config
                .data
                .movies
                .clone()
                .ok_or_else(|| Error::config("ingest: --movies is required for movielens"))?;
            let parsed = parse_movielens(open_input(&ratings)?, open_input(&movies)?, mode)?;
            (parsed, vec![ratings, movies])
        }
        DatasetKind::Amazon => {
            let reviews = config
                .data
                .reviews
                .clone()
                .ok_or_else(|| Error::config("ingest: --reviews is required for amazon"))?;
            let metadata = config
                .data
                .metadata
                .clone()
                .ok_or_else(|| Error::config("ingest: --metadata is required for amazon"))?;
            let parsed = parse_amazon(open_input(&reviews)?, open_input(&metadata)?, mode)?;
            (parsed, vec![reviews, metadata])
        }
    };

    let (sequences, dropped_short) =
        build_sequences(&parsed.interactions, config.data.min_sequence_length)?;
    let split = split_with_options(
        &sequences,
        SplitOptions {
            sliding_window: config.data.sliding_window,
        },
    )?;
    ensure_out_dir(out_dir)?;
    write_bundle(out_dir, &parsed.catalog, &sequences, &split)?;

    let stats = compute_stats(&sequences, &parsed.catalog);
    let doc = StatsDoc {
        num_users: stats.num_users,
        num_items: stats.num_items,
        num_interactions: stats.num_interactions,
        catalog_size: parsed.catalog.len(),
        dropped_short_users: dropped_short,
        dropped_unknown_item: parsed.report.dropped_unknown_item,
        skipped_malformed: parsed.report.skipped_malformed,
        title_collisions: parsed.catalog.title_collisions().len(),
    };
    let stats_path = out_dir.join(STATS_FILE);
    std::fs::write(&stats_path, canonical_json_line(&doc)? + "\n")
        .map_err(|e| Error::io(&stats_path, e))?;
    log::info!(
        "ingested {} users, {} items, {} interactions",
        stats.num_users,
        stats.num_items,
        stats.num_interactions
    );

    let input_refs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    write_manifest(out_dir, "ingest", config, &input_refs)
}

/// Re-split an existing sequences file (for example with sliding windows
/// toggled) into a fresh `split.jsonl`.
pub fn cmd_split(config: &RunConfig, sequences_path: &Path, out_dir: &Path) -> Result<()> {
    require_file(sequences_path)?;
    let sequences = read_sequences_file(sequences_path)?;
    let split = split_with_options(
        &sequences,
        SplitOptions {
            sliding_window: config.data.sliding_window,
        },
    )?;
    ensure_out_dir(out_dir)?;
    write_split_file(&out_dir.join(crate::ingest::SPLIT_FILE), &split)?;
    write_manifest(out_dir, "split", config, &[sequences_path])
}

fn bundle_inputs(bundle_dir: &Path) -> Vec<PathBuf> {
    [
        crate::ingest::CATALOG_FILE,
        crate::ingest::SEQUENCES_FILE,
        crate::ingest::SPLIT_FILE,
    ]
    .iter()
    .map(|f| bundle_dir.join(f))
    .collect()
}

/// Train the tokenizer (unless one already exists in the output directory)
/// and fit the model, writing checkpoints and the training log.
pub fn cmd_train(
    config: &RunConfig,
    bundle_dir: &Path,
    out_dir: &Path,
    resume: bool,
    epoch_limit: Option<u64>,
) -> Result<()> {
    let inputs = bundle_inputs(bundle_dir);
    for input in &inputs {
        require_file(input)?;
    }
    let (catalog, _sequences, split) = read_bundle(bundle_dir)?;
    ensure_out_dir(out_dir)?;

    let tokenizer_path = out_dir.join(TOKENIZER_FILE);
    let tokenizer = if resume && tokenizer_path.exists() {
        TokenizerModel::load(&tokenizer_path)?
    } else {
        let corpus = prepare_corpus_texts(&split, &catalog, config.seed)?;
        let target = config.tokenizer.vocab_size.min(config.model.vocab_size);
        let tokenizer = train_tokenizer(&corpus, target)?;
        tokenizer.save(&tokenizer_path)?;
        tokenizer
    };
    log::info!("tokenizer vocabulary: {} ids", tokenizer.vocab_size());

    let mut model_cfg = config.model.clone();
    if model_cfg.vocab_size < tokenizer.vocab_size() {
        return Err(Error::config(format!(
            "model vocab_size {} is smaller than the tokenizer vocabulary {}",
            model_cfg.vocab_size,
            tokenizer.vocab_size()
        )));
    }
    // Shrink the embedding table to the ids that can actually occur.
    model_cfg.vocab_size = tokenizer.vocab_size();

    let outcome = fit_with_epoch_limit::<f32>(
        &split,
        &catalog,
        &tokenizer,
        &model_cfg,
        &config.train,
        out_dir,
        resume,
        epoch_limit,
    )?;
    log::info!(
        "trained {} steps; best validation loss {:.4}",
        outcome.final_step,
        outcome.best_valid_loss
    );

    let input_refs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    write_manifest(out_dir, "train", config, &input_refs)
}

/// Generate constrained top-k recommendations for every user in the chosen
/// split role and write the predictions file.
pub fn cmd_recommend(
    config: &RunConfig,
    bundle_dir: &Path,
    model_dir: &Path,
    out_dir: &Path,
    use_valid_split: bool,
) -> Result<()> {
    let mut inputs = bundle_inputs(bundle_dir);
    let checkpoint = model_dir.join(crate::train::BEST_CHECKPOINT);
    let tokenizer_path = model_dir.join(TOKENIZER_FILE);
    inputs.push(checkpoint.clone());
    inputs.push(tokenizer_path.clone());
    for input in &inputs {
        require_file(input)?;
    }

    let (catalog, sequences, split) = read_bundle(bundle_dir)?;
    let tokenizer = TokenizerModel::load(&tokenizer_path)?;
    let (model_cfg, params) = load_params::<f32>(&checkpoint)?;
    let popularity = train_popularity(&sequences);
    let trie = build_trie(&catalog, &tokenizer, &popularity)?;

    let examples = if use_valid_split { &split.valid } else { &split.test };
    let mut prompts = Vec::with_capacity(examples.len());
    for example in examples {
        prompts.push((
            example.user_id.clone(),
            build_eval_prompt(example, &catalog, &tokenizer, &model_cfg, &trie)?,
        ));
    }
    let predictions = recommend_for_users(
        &params,
        &model_cfg,
        &tokenizer,
        &trie,
        &prompts,
        config.decode.k,
        config.decode.beam_width,
    )?;
    let short = predictions
        .iter()
        .filter(|(_, list)| list.entries.len() < config.decode.k)
        .count();
    if short > 0 {
        log::warn!("{short} users received fewer than k={} items", config.decode.k);
    }

    ensure_out_dir(out_dir)?;
    write_predictions(&out_dir.join(PREDICTIONS_FILE), &predictions)?;
    let input_refs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    write_manifest(out_dir, "recommend", config, &input_refs)
}

fn render_report_text(report: &MetricsReport) -> String {
    let mut text = format!(
        "dataset: {}  model: {}  users: {}\n",
        report.dataset, report.model, report.num_users
    );
    for (k, value) in &report.hr {
        text.push_str(&format!("HR@{k:<6} {value:.4}\n"));
    }
    for (k, value) in &report.ndcg {
        text.push_str(&format!("NDCG@{k:<4} {value:.4}\n"));
    }
    text
}

/// Score a predictions file against the bundle's test split.
pub fn cmd_evaluate(
    config: &RunConfig,
    predictions_path: &Path,
    bundle_dir: &Path,
    out_dir: &Path,
    ks: &[usize],
    dataset_name: &str,
    model_name: &str,
) -> Result<()> {
    let mut inputs = bundle_inputs(bundle_dir);
    inputs.push(predictions_path.to_path_buf());
    for input in &inputs {
        require_file(input)?;
    }
    let (_, _, split) = read_bundle(bundle_dir)?;
    let predictions: Vec<UserPrediction> = read_predictions(predictions_path)?
        .into_iter()
        .map(|(user_id, list)| UserPrediction {
            user_id,
            items: list.entries.into_iter().map(|(id, _)| id).collect(),
        })
        .collect();
    let mut report = evaluate_split(&predictions, &split.test, ks)?;
    report.dataset = dataset_name.to_string();
    report.model = model_name.to_string();

    ensure_out_dir(out_dir)?;
    let json_path = out_dir.join(REPORT_JSON);
    std::fs::write(&json_path, canonical_json_line(&report)? + "\n")
        .map_err(|e| Error::io(&json_path, e))?;
    let text_path = out_dir.join(REPORT_TEXT);
    std::fs::write(&text_path, render_report_text(&report))
        .map_err(|e| Error::io(&text_path, e))?;
    println!("{}", render_report_text(&report));

    let input_refs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    write_manifest(out_dir, "evaluate", config, &input_refs)
}

/// Side-by-side comparison of several report files.
pub fn cmd_compare(config: &RunConfig, report_paths: &[PathBuf], out_dir: &Path) -> Result<()> {
    if report_paths.is_empty() {
        return Err(Error::config("compare: at least one report file is required"));
    }
    let mut reports = Vec::new();
    for path in report_paths {
        require_file(path)?;
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: MetricsReport = serde_json::from_str(text.trim())?;
        let name = if report.model.is_empty() {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string())
        } else {
            report.model.clone()
        };
        reports.push((name, report));
    }
    let (table, json) = compare_reports(&reports)?;

    ensure_out_dir(out_dir)?;
    let text_path = out_dir.join(COMPARISON_TEXT);
    std::fs::write(&text_path, &table).map_err(|e| Error::io(&text_path, e))?;
    let json_path = out_dir.join(COMPARISON_JSON);
    std::fs::write(&json_path, canonical_json_line(&json)? + "\n")
        .map_err(|e| Error::io(&json_path, e))?;
    println!("{table}");

    let input_refs: Vec<&Path> = report_paths.iter().map(|p| p.as_path()).collect();
    write_manifest(out_dir, "compare", config, &input_refs)
}
