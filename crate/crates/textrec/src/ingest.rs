//! Dataset ingestion: raw MovieLens/Amazon dumps to a catalog, chronological
//! user sequences, and the leave-one-out train/valid/test split.
//!
//! All ratings count as implicit interactions regardless of value, and
//! interactions whose item has no catalog title are dropped (the whole
//! pipeline is defined over item names). Parsing runs in strict mode
//! (malformed row aborts) or lenient mode (skip and count).

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::canonical_json_line;
use crate::error::{Error, Result};

/// One raw user-item interaction event.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
    pub rating: Option<f32>,
}

/// Immutable map from item id to display title; the text vocabulary of
/// recommendation. Titles are whitespace-normalized but never case-folded,
/// because they are the generation target and must round-trip exactly.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    entries: BTreeMap<String, String>,
}

/// Trim surrounding whitespace and collapse internal whitespace runs to a
/// single space.
pub fn normalize_title(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert an item. The title is normalized; empty titles and duplicate
    /// ids are rejected.
    pub fn insert(&mut self, item_id: impl Into<String>, raw_title: &str) -> Result<()> {
        let item_id = item_id.into();
        if item_id.is_empty() {
            return Err(Error::data("catalog: empty item id"));
        }
        let title = normalize_title(raw_title);
        if title.is_empty() {
            return Err(Error::data(format!(
                "catalog: item '{item_id}' has an empty title"
            )));
        }
        if self.entries.contains_key(&item_id) {
            return Err(Error::data(format!("catalog: duplicate item id '{item_id}'")));
        }
        self.entries.insert(item_id, title);
        Ok(())
    }

    pub fn get(&self, item_id: &str) -> Option<&str> {
        self.entries.get(item_id).map(|s| s.as_str())
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.entries.contains_key(item_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Iterate entries in item-id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Distinct item ids sharing an identical normalized title. Both ids are
    /// retained in the catalog; generation resolves the title to one id via
    /// training popularity (see [`train_popularity`]).
    pub fn title_collisions(&self) -> Vec<(String, Vec<String>)> {
        let mut by_title: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (id, title) in &self.entries {
            by_title.entry(title).or_default().push(id);
        }
        by_title
            .into_iter()
            .filter(|(_, ids)| ids.len() > 1)
            .map(|(title, ids)| {
                (
                    title.to_string(),
                    ids.into_iter().map(|s| s.to_string()).collect(),
                )
            })
            .collect()
    }
}

/// Abort on the first malformed row, or skip and count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    Strict,
    #[default]
    Lenient,
}

/// Counters for rows that did not make it into the output.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    /// Malformed rows skipped in lenient mode.
    pub skipped_malformed: u64,
    /// Interactions dropped because their item has no catalog title.
    pub dropped_unknown_item: u64,
}

/// Parser output: catalog, interactions in file order, and drop counters.
#[derive(Debug)]
pub struct ParsedDataset {
    pub catalog: Catalog,
    pub interactions: Vec<Interaction>,
    pub report: IngestReport,
}

fn row_error(path: &str, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

struct RowFailure(String);

fn handle_row_failure(
    mode: ParseMode,
    report: &mut IngestReport,
    path: &str,
    line: u64,
    failure: RowFailure,
) -> Result<()> {
    match mode {
        ParseMode::Strict => Err(row_error(path, line, failure.0)),
        ParseMode::Lenient => {
            report.skipped_malformed += 1;
            Ok(())
        }
    }
}

fn check_csv_header(
    reader: &mut csv::Reader<impl Read>,
    expected: &[&str],
    path: &str,
) -> Result<()> {
    let headers = reader
        .headers()
        .map_err(|e| row_error(path, 1, format!("unreadable header: {e}")))?;
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(row_error(
            path,
            1,
            format!("missing or wrong header: expected {expected:?}, got {got:?}"),
        ));
    }
    Ok(())
}

fn parse_rating(field: &str) -> std::result::Result<f32, RowFailure> {
    let rating: f32 = field
        .parse()
        .map_err(|_| RowFailure(format!("unparseable rating '{field}'")))?;
    if !(0.5..=5.0).contains(&rating) {
        return Err(RowFailure(format!("rating {rating} outside [0.5, 5.0]")));
    }
    Ok(rating)
}

fn parse_timestamp(field: &str) -> std::result::Result<i64, RowFailure> {
    let ts: i64 = field
        .trim()
        .parse()
        .map_err(|_| RowFailure(format!("unparseable timestamp '{field}'")))?;
    if ts < 0 {
        return Err(RowFailure(format!("negative timestamp {ts}")));
    }
    Ok(ts)
}

/// Parse MovieLens `ratings.csv` + `movies.csv` streams.
///
/// Ratings rows are `userId,movieId,rating,timestamp`; movies rows are
/// `movieId,title,genres` with RFC 4180 quoting; one header row each.
/// Interactions referencing a movie id absent from the movies file are
/// dropped and counted.
pub fn parse_movielens<R: Read, M: Read>(
    ratings: R,
    movies: M,
    mode: ParseMode,
) -> Result<ParsedDataset> {
    let mut report = IngestReport::default();
    let mut catalog = Catalog::new();

    let mut movies_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(movies);
    check_csv_header(&mut movies_reader, &["movieId", "title", "genres"], "movies")?;
    for record in movies_reader.records() {
        let record = record.map_err(|e| row_error("movies", 0, format!("csv: {e}")))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let outcome = (|| -> std::result::Result<(), RowFailure> {
            if record.len() != 3 {
                return Err(RowFailure(format!("expected 3 fields, got {}", record.len())));
            }
            let movie_id = record.get(0).unwrap_or("").trim();
            let title = record.get(1).unwrap_or("");
            if movie_id.is_empty() {
                return Err(RowFailure("empty movieId".to_string()));
            }
            if normalize_title(title).is_empty() {
                return Err(RowFailure(format!("movie '{movie_id}' has an empty title")));
            }
            catalog
                .insert(movie_id, title)
                .map_err(|e| RowFailure(e.to_string()))
        })();
        if let Err(failure) = outcome {
            handle_row_failure(mode, &mut report, "movies", line, failure)?;
        }
    }

    let mut interactions = Vec::new();
    let mut ratings_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(ratings);
    check_csv_header(
        &mut ratings_reader,
        &["userId", "movieId", "rating", "timestamp"],
        "ratings",
    )?;
    for record in ratings_reader.records() {
        let record = record.map_err(|e| row_error("ratings", 0, format!("csv: {e}")))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let outcome = (|| -> std::result::Result<Option<Interaction>, RowFailure> {
            if record.len() != 4 {
                return Err(RowFailure(format!("expected 4 fields, got {}", record.len())));
            }
            let user_id = record.get(0).unwrap_or("").trim();
            let movie_id = record.get(1).unwrap_or("").trim();
            if user_id.is_empty() || movie_id.is_empty() {
                return Err(RowFailure("empty userId or movieId".to_string()));
            }
            let rating = parse_rating(record.get(2).unwrap_or(""))?;
            let timestamp = parse_timestamp(record.get(3).unwrap_or(""))?;
            Ok(Some(Interaction {
                user_id: user_id.to_string(),
                item_id: movie_id.to_string(),
                timestamp,
                rating: Some(rating),
            }))
        })();
        match outcome {
            Ok(Some(interaction)) => {
                if catalog.contains(&interaction.item_id) {
                    interactions.push(interaction);
                } else {
                    report.dropped_unknown_item += 1;
                }
            }
            Ok(None) => {}
            Err(failure) => handle_row_failure(mode, &mut report, "ratings", line, failure)?,
        }
    }

    Ok(ParsedDataset {
        catalog,
        interactions,
        report,
    })
}

#[derive(Deserialize)]
struct AmazonReview {
    #[serde(rename = "reviewerID")]
    reviewer_id: String,
    asin: String,
    #[serde(rename = "unixReviewTime")]
    unix_review_time: i64,
    overall: f32,
}

#[derive(Deserialize)]
struct AmazonMeta {
    asin: String,
    #[serde(default)]
    title: Option<String>,
}

/// Parse Amazon review + metadata JSON-lines streams.
///
/// Reviews carry `reviewerID`, `asin`, `unixReviewTime`, `overall`; metadata
/// carries `asin`, `title`. Items without a usable title are excluded from
/// the catalog and their interactions dropped and counted.
pub fn parse_amazon<R: Read, M: Read>(
    reviews: R,
    metadata: M,
    mode: ParseMode,
) -> Result<ParsedDataset> {
    let mut report = IngestReport::default();
    let mut catalog = Catalog::new();

    for (idx, line) in BufReader::new(metadata).lines().enumerate() {
        let line_no = (idx + 1) as u64;
        let line = line.map_err(|e| row_error("metadata", line_no, format!("read: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let outcome = (|| -> std::result::Result<(), RowFailure> {
            let meta: AmazonMeta = serde_json::from_str(&line)
                .map_err(|e| RowFailure(format!("invalid json: {e}")))?;
            let title = meta.title.unwrap_or_default();
            if normalize_title(&title).is_empty() {
                // No title means the item never enters the catalog; its
                // reviews are counted as dropped below.
                return Ok(());
            }
            if catalog.contains(&meta.asin) {
                return Err(RowFailure(format!("duplicate metadata for asin '{}'", meta.asin)));
            }
            catalog
                .insert(meta.asin, &title)
                .map_err(|e| RowFailure(e.to_string()))
        })();
        if let Err(failure) = outcome {
            handle_row_failure(mode, &mut report, "metadata", line_no, failure)?;
        }
    }

    let mut interactions = Vec::new();
    for (idx, line) in BufReader::new(reviews).lines().enumerate() {
        let line_no = (idx + 1) as u64;
        let line = line.map_err(|e| row_error("reviews", line_no, format!("read: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let outcome = (|| -> std::result::Result<Interaction, RowFailure> {
            let review: AmazonReview = serde_json::from_str(&line)
                .map_err(|e| RowFailure(format!("invalid json: {e}")))?;
            if review.reviewer_id.is_empty() || review.asin.is_empty() {
                return Err(RowFailure("empty reviewerID or asin".to_string()));
            }
            if review.unix_review_time < 0 {
                return Err(RowFailure(format!(
                    "negative timestamp {}",
                    review.unix_review_time
                )));
            }
            if !(0.5..=5.0).contains(&review.overall) {
                return Err(RowFailure(format!("rating {} outside [0.5, 5.0]", review.overall)));
            }
            Ok(Interaction {
                user_id: review.reviewer_id,
                item_id: review.asin,
                timestamp: review.unix_review_time,
                rating: Some(review.overall),
            })
        })();
        match outcome {
            Ok(interaction) => {
                if catalog.contains(&interaction.item_id) {
                    interactions.push(interaction);
                } else {
                    report.dropped_unknown_item += 1;
                }
            }
            Err(failure) => handle_row_failure(mode, &mut report, "reviews", line_no, failure)?,
        }
    }

    Ok(ParsedDataset {
        catalog,
        interactions,
        report,
    })
}

/// One user's chronologically ordered item ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: String,
    pub items: Vec<String>,
}

/// Group interactions per user and sort by timestamp ascending with a stable
/// tie-break on input order. Users with fewer than `min_length` interactions
/// are discarded and counted. Output is ordered by user id.
pub fn build_sequences(
    interactions: &[Interaction],
    min_length: usize,
) -> Result<(Vec<UserSequence>, u64)> {
    if min_length < 3 {
        return Err(Error::config(format!(
            "min_length must be >= 3 (leave-one-out needs train/valid/test), got {min_length}"
        )));
    }
    let mut per_user: BTreeMap<&str, Vec<(i64, usize)>> = BTreeMap::new();
    for (idx, interaction) in interactions.iter().enumerate() {
        per_user
            .entry(interaction.user_id.as_str())
            .or_default()
            .push((interaction.timestamp, idx));
    }
    let mut sequences = Vec::new();
    let mut dropped_users = 0u64;
    for (user_id, mut events) in per_user {
        if events.len() < min_length {
            dropped_users += 1;
            continue;
        }
        events.sort_by_key(|&(ts, _)| ts); // stable: ties keep input order
        sequences.push(UserSequence {
            user_id: user_id.to_string(),
            items: events
                .into_iter()
                .map(|(_, idx)| interactions[idx].item_id.clone())
                .collect(),
        });
    }
    Ok((sequences, dropped_users))
}

/// One supervised example: predict `target` from `history`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitExample {
    pub user_id: String,
    pub history: Vec<String>,
    pub target: String,
}

/// Leave-one-out split: per user the most recent item is the test target and
/// the second-most recent the validation target; training examples are drawn
/// only from earlier items.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LeaveOneOutSplit {
    pub train: Vec<SplitExample>,
    pub valid: Vec<SplitExample>,
    pub test: Vec<SplitExample>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SplitOptions {
    /// Emit one training example per prefix (targets at positions 2..=n-2)
    /// instead of the single longest-history example.
    pub sliding_window: bool,
}

pub fn split_leave_one_out(sequences: &[UserSequence]) -> Result<LeaveOneOutSplit> {
    split_with_options(sequences, SplitOptions::default())
}

pub fn split_with_options(
    sequences: &[UserSequence],
    options: SplitOptions,
) -> Result<LeaveOneOutSplit> {
    let mut split = LeaveOneOutSplit::default();
    for seq in sequences {
        let n = seq.items.len();
        if n < 3 {
            return Err(Error::data(format!(
                "split: user '{}' has {} items; leave-one-out needs at least 3",
                seq.user_id, n
            )));
        }
        split.test.push(SplitExample {
            user_id: seq.user_id.clone(),
            history: seq.items[..n - 1].to_vec(),
            target: seq.items[n - 1].clone(),
        });
        split.valid.push(SplitExample {
            user_id: seq.user_id.clone(),
            history: seq.items[..n - 2].to_vec(),
            target: seq.items[n - 2].clone(),
        });
        if n >= 4 {
            if options.sliding_window {
                // Targets at positions 2..=n-2 (1-based), each with the full
                // preceding prefix as history.
                for t in 1..=n - 3 {
                    split.train.push(SplitExample {
                        user_id: seq.user_id.clone(),
                        history: seq.items[..t].to_vec(),
                        target: seq.items[t].clone(),
                    });
                }
            } else {
                split.train.push(SplitExample {
                    user_id: seq.user_id.clone(),
                    history: seq.items[..n - 3].to_vec(),
                    target: seq.items[n - 3].clone(),
                });
            }
        }
    }
    Ok(split)
}

/// Item occurrence counts over the training-visible region (everything except
/// each user's last two items). Constrained decoding uses these to resolve a
/// duplicated title to one item id.
pub fn train_popularity(sequences: &[UserSequence]) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for seq in sequences {
        let n = seq.items.len();
        for item in &seq.items[..n.saturating_sub(2)] {
            *counts.entry(item.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Basic dataset statistics over kept sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_users: usize,
    pub num_items: usize,
    pub num_interactions: usize,
}

/// Count users, distinct items appearing in kept interactions, and total
/// kept interactions.
pub fn compute_stats(sequences: &[UserSequence], _catalog: &Catalog) -> DatasetStats {
    let mut items: HashSet<&str> = HashSet::new();
    let mut interactions = 0usize;
    for seq in sequences {
        interactions += seq.items.len();
        for item in &seq.items {
            items.insert(item);
        }
    }
    DatasetStats {
        num_users: sequences.len(),
        num_items: items.len(),
        num_interactions: interactions,
    }
}

// ---------------------------------------------------------------------------
// Dataset bundle serialization: three JSON-lines files with sorted keys and
// LF newlines, so identical inputs produce byte-identical bundles.
// ---------------------------------------------------------------------------

pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const SEQUENCES_FILE: &str = "sequences.jsonl";
pub const SPLIT_FILE: &str = "split.jsonl";

#[derive(Serialize, Deserialize)]
struct CatalogRow {
    item_id: String,
    title: String,
}

#[derive(Serialize, Deserialize)]
struct SplitRow {
    user_id: String,
    role: String,
    history: Vec<String>,
    target: String,
}

fn create_file(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufWriter::new(file))
}

fn write_line(out: &mut impl Write, path: &Path, line: &str) -> Result<()> {
    out.write_all(line.as_bytes())
        .and_then(|_| out.write_all(b"\n"))
        .map_err(|e| Error::io(path, e))
}

/// Write `catalog.jsonl`, `sequences.jsonl`, and `split.jsonl` into `dir`.
pub fn write_bundle(
    dir: &Path,
    catalog: &Catalog,
    sequences: &[UserSequence],
    split: &LeaveOneOutSplit,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let path = dir.join(CATALOG_FILE);
    let mut out = create_file(&path)?;
    for (item_id, title) in catalog.iter() {
        let row = CatalogRow {
            item_id: item_id.to_string(),
            title: title.to_string(),
        };
        write_line(&mut out, &path, &canonical_json_line(&row)?)?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(SEQUENCES_FILE);
    let mut out = create_file(&path)?;
    for seq in sequences {
        write_line(&mut out, &path, &canonical_json_line(seq)?)?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;

    write_split_file(&dir.join(SPLIT_FILE), split)
}

/// Write one split file in the bundle layout.
pub fn write_split_file(path: &Path, split: &LeaveOneOutSplit) -> Result<()> {
    let mut out = create_file(path)?;
    for (role, examples) in [
        ("train", &split.train),
        ("valid", &split.valid),
        ("test", &split.test),
    ] {
        for ex in examples {
            let row = SplitRow {
                user_id: ex.user_id.clone(),
                role: role.to_string(),
                history: ex.history.clone(),
                target: ex.target.clone(),
            };
            write_line(&mut out, path, &canonical_json_line(&row)?)?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Read a `sequences.jsonl` file on its own.
pub fn read_sequences_file(path: &Path) -> Result<Vec<UserSequence>> {
    let mut sequences = Vec::new();
    for (idx, line) in read_lines(path)?.iter().enumerate() {
        let seq: UserSequence = serde_json::from_str(line).map_err(|e| {
            row_error(&path.display().to_string(), (idx + 1) as u64, e.to_string())
        })?;
        sequences.push(seq);
    }
    Ok(sequences)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

/// Read a bundle written by [`write_bundle`].
pub fn read_bundle(dir: &Path) -> Result<(Catalog, Vec<UserSequence>, LeaveOneOutSplit)> {
    let path = dir.join(CATALOG_FILE);
    let mut catalog = Catalog::new();
    for (idx, line) in read_lines(&path)?.iter().enumerate() {
        let row: CatalogRow = serde_json::from_str(line).map_err(|e| {
            row_error(&path.display().to_string(), (idx + 1) as u64, e.to_string())
        })?;
        catalog.insert(row.item_id, &row.title)?;
    }

    let sequences = read_sequences_file(&dir.join(SEQUENCES_FILE))?;

    let path = dir.join(SPLIT_FILE);
    let mut split = LeaveOneOutSplit::default();
    for (idx, line) in read_lines(&path)?.iter().enumerate() {
        let row: SplitRow = serde_json::from_str(line).map_err(|e| {
            row_error(&path.display().to_string(), (idx + 1) as u64, e.to_string())
        })?;
        let example = SplitExample {
            user_id: row.user_id,
            history: row.history,
            target: row.target,
        };
        match row.role.as_str() {
            "train" => split.train.push(example),
            "valid" => split.valid.push(example),
            "test" => split.test.push(example),
            other => {
                return Err(row_error(
                    &path.display().to_string(),
                    (idx + 1) as u64,
                    format!("unknown role '{other}'"),
                ))
            }
        }
    }
    Ok((catalog, sequences, split))
}
