//! Data pipeline: raw interaction logs to padded training batches.
//!
//! Dense item ids start at 1; id 0 is the pad/mask token everywhere. User
//! sequences are time-ordered with file order breaking timestamp ties, which
//! keeps the whole pipeline deterministic for a given input file.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GritError, Result};

const CACHE_TAG: &str = "grit-dataset-v1";
/// Minimum interactions per user and per item after filtering.
const CORE: usize = 5;
/// Fraction of malformed lines tolerated before the load aborts.
const MAX_SKIP_FRACTION: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
    /// Malformed lines skipped during parsing.
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    /// Tab-separated `user item rating timestamp` rows, no header.
    Ml100k,
    /// Comma-separated with a header naming `user_id`, `item_id`,
    /// `timestamp`; extra columns are ignored.
    Csv,
}

impl LogFormat {
    pub fn parse_name(name: &str) -> Result<LogFormat> {
        match name {
            "ml100k" => Ok(LogFormat::Ml100k),
            "csv" => Ok(LogFormat::Csv),
            other => Err(GritError::Config(format!(
                "unknown log format {other:?}; expected ml100k or csv"
            ))),
        }
    }
}

/// Reads an interaction log, skipping malformed lines. More than 1% malformed
/// lines is treated as the wrong file and aborts with the first offenders.
pub fn load_log(path: &Path, format: LogFormat) -> Result<InteractionLog> {
    let file = File::open(path).map_err(|e| GritError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut bad_lines: Vec<usize> = Vec::new();
    let mut total = 0usize;

    let mut field_of = [usize::MAX; 3]; // user, item, timestamp columns
    let (sep, has_header) = match format {
        LogFormat::Ml100k => ('\t', false),
        LogFormat::Csv => (',', true),
    };
    if format == LogFormat::Ml100k {
        field_of = [0, 1, 3];
    }

    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| GritError::io(path, e))?;
        let lineno = idx + 1;
        if idx == 0 && has_header {
            let cols: Vec<&str> = line.split(sep).map(str::trim).collect();
            for (want, slot) in [("user_id", 0), ("item_id", 1), ("timestamp", 2)] {
                match cols.iter().position(|c| *c == want) {
                    Some(p) => field_of[slot] = p,
                    None => {
                        return Err(GritError::Parse {
                            path: path.to_path_buf(),
                            message: format!("header is missing the {want:?} column"),
                        })
                    }
                }
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let fields: Vec<&str> = line.split(sep).map(str::trim).collect();
        let needed = field_of.iter().max().unwrap() + 1;
        if fields.len() < needed {
            bad_lines.push(lineno);
            continue;
        }
        let user = fields[field_of[0]];
        let item = fields[field_of[1]];
        let ts = fields[field_of[2]].parse::<i64>();
        match (user.is_empty(), item.is_empty(), ts) {
            (false, false, Ok(timestamp)) => records.push(Interaction {
                user: user.to_string(),
                item: item.to_string(),
                timestamp,
            }),
            _ => bad_lines.push(lineno),
        }
    }

    if total > 0 && bad_lines.len() as f64 > MAX_SKIP_FRACTION * total as f64 {
        let shown: Vec<String> = bad_lines.iter().take(10).map(|l| l.to_string()).collect();
        return Err(GritError::Parse {
            path: path.to_path_buf(),
            message: format!(
                "{} of {} lines malformed (> {:.0}%); first offenders at lines {}",
                bad_lines.len(),
                total,
                MAX_SKIP_FRACTION * 100.0,
                shown.join(", ")
            ),
        });
    }
    Ok(InteractionLog { records, skipped: bad_lines.len() })
}

/// Preprocessed dataset with dense ids. `users[u]` and `items[i - 1]` recover
/// the raw identifiers; item id 0 is reserved for padding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub users: Vec<String>,
    pub items: Vec<String>,
    /// Per-user, time-ordered dense item ids.
    pub sequences: Vec<Vec<u32>>,
}

impl Dataset {
    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn item_count(&self) -> usize {
        self.items.len()
    }

    pub fn interaction_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Fraction of the user-item matrix that is empty.
    pub fn sparsity(&self) -> f64 {
        let cells = self.user_count() as f64 * self.item_count() as f64;
        if cells == 0.0 {
            return 1.0;
        }
        1.0 - self.interaction_count() as f64 / cells
    }

    pub fn user_index(&self, raw: &str) -> Option<usize> {
        self.users.iter().position(|u| u == raw)
    }

    /// Sparsity as a percentage truncated (not rounded) to two decimals,
    /// the convention recommender papers use in their dataset tables.
    pub fn sparsity_display(&self) -> String {
        let truncated = (self.sparsity() * 10_000.0).floor() / 100.0;
        format!("{truncated:.2}%")
    }
}

/// Repeatedly removes users and items with fewer than five interactions until
/// none remain, then re-indexes densely (first-appearance order) and sorts
/// each user's events by timestamp, file order breaking ties.
pub fn five_core_filter(log: &InteractionLog) -> Result<Dataset> {
    if log.records.is_empty() {
        return Err(GritError::Data("interaction log is empty".into()));
    }
    let mut alive: Vec<bool> = vec![true; log.records.len()];
    loop {
        let mut user_count = std::collections::HashMap::<&str, usize>::new();
        let mut item_count = std::collections::HashMap::<&str, usize>::new();
        for (rec, &a) in log.records.iter().zip(&alive) {
            if a {
                *user_count.entry(rec.user.as_str()).or_insert(0) += 1;
                *item_count.entry(rec.item.as_str()).or_insert(0) += 1;
            }
        }
        let mut changed = false;
        for (rec, a) in log.records.iter().zip(alive.iter_mut()) {
            if *a
                && (user_count[rec.user.as_str()] < CORE || item_count[rec.item.as_str()] < CORE)
            {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut users: Vec<String> = Vec::new();
    let mut items: Vec<String> = Vec::new();
    let mut user_of = std::collections::HashMap::<&str, usize>::new();
    let mut item_of = std::collections::HashMap::<&str, u32>::new();
    // (user, timestamp, file order, item) per surviving record.
    let mut events: Vec<(usize, i64, usize, u32)> = Vec::new();
    for (idx, (rec, &a)) in log.records.iter().zip(&alive).enumerate() {
        if !a {
            continue;
        }
        let u = *user_of.entry(rec.user.as_str()).or_insert_with(|| {
            users.push(rec.user.clone());
            users.len() - 1
        });
        let i = *item_of.entry(rec.item.as_str()).or_insert_with(|| {
            items.push(rec.item.clone());
            items.len() as u32 // ids start at 1; 0 is pad
        });
        events.push((u, rec.timestamp, idx, i));
    }
    if users.is_empty() {
        return Err(GritError::Data(
            "no users or items survive five-core filtering".into(),
        ));
    }
    events.sort_unstable_by_key(|&(u, ts, idx, _)| (u, ts, idx));
    let mut sequences = vec![Vec::new(); users.len()];
    for (u, _, _, i) in events {
        sequences[u].push(i);
    }
    Ok(Dataset { users, items, sequences })
}

/// Leave-one-out split: last item is the test target, second-to-last the
/// validation target, the rest the training sequence.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub dataset: Dataset,
    pub train: Vec<Vec<u32>>,
    pub valid: Vec<u32>,
    pub test: Vec<u32>,
}

pub fn leave_one_out_split(dataset: Dataset) -> Result<SplitDataset> {
    let short: Vec<&String> = dataset
        .sequences
        .iter()
        .zip(&dataset.users)
        .filter(|(s, _)| s.len() < 3)
        .map(|(_, u)| u)
        .take(10)
        .collect();
    if !short.is_empty() {
        return Err(GritError::Data(format!(
            "leave-one-out needs >= 3 interactions per user; offenders: {}",
            short.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    let mut train = Vec::with_capacity(dataset.sequences.len());
    let mut valid = Vec::with_capacity(dataset.sequences.len());
    let mut test = Vec::with_capacity(dataset.sequences.len());
    for seq in &dataset.sequences {
        let n = seq.len();
        train.push(seq[..n - 2].to_vec());
        valid.push(seq[n - 2]);
        test.push(seq[n - 1]);
    }
    Ok(SplitDataset { dataset, train, valid, test })
}

/// One training row: a window of a user's training sequence plus next-item
/// targets and the items that precede the window (for candidate banning).
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkRow {
    pub items: Vec<u32>,
    /// Next item within the training sequence, 0 where there is none.
    pub targets: Vec<u32>,
    /// Items before this window in the user's training sequence.
    pub prefix: Vec<u32>,
}

/// Splits each training sequence into non-overlapping windows anchored at the
/// sequence end, so only the earliest window can come up short. Rows are
/// emitted earliest window first.
pub fn chunk_training_rows(train: &[Vec<u32>], max_len: usize) -> Vec<ChunkRow> {
    assert!(max_len > 0, "chunking needs max_len >= 1");
    let mut rows = Vec::new();
    for seq in train {
        if seq.is_empty() {
            continue;
        }
        let mut starts: Vec<usize> = Vec::new();
        let mut end = seq.len();
        while end > 0 {
            let start = end.saturating_sub(max_len);
            starts.push(start);
            end = start;
        }
        starts.reverse();
        for (si, &start) in starts.iter().enumerate() {
            let stop = if si + 1 < starts.len() { starts[si + 1] } else { seq.len() };
            let items = seq[start..stop].to_vec();
            let targets = (start..stop)
                .map(|p| if p + 1 < seq.len() { seq[p + 1] } else { 0 })
                .collect();
            rows.push(ChunkRow { items, targets, prefix: seq[..start].to_vec() });
        }
    }
    rows
}

/// A left-padded batch of training rows. Flat buffers are row-major
/// `(rows, max_len)`; `mask` is true at real positions.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub rows: usize,
    pub max_len: usize,
    pub items: Vec<u32>,
    pub mask: Vec<bool>,
    pub targets: Vec<u32>,
    /// Per row, the items preceding its window in the original sequence.
    pub prefixes: Vec<Vec<u32>>,
}

/// Chunks, shuffles, and packs the training split into batches. The same
/// `shuffle_seed` yields a bitwise-identical stream.
pub fn make_batches(
    split: &SplitDataset,
    max_len: usize,
    batch_size: usize,
    shuffle_seed: u64,
) -> Vec<SequenceBatch> {
    assert!(batch_size > 0, "batching needs batch_size >= 1");
    let rows = chunk_training_rows(&split.train, max_len);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    order.shuffle(&mut rng);

    let mut batches = Vec::new();
    for group in order.chunks(batch_size) {
        let b = group.len();
        let mut batch = SequenceBatch {
            rows: b,
            max_len,
            items: vec![0; b * max_len],
            mask: vec![false; b * max_len],
            targets: vec![0; b * max_len],
            prefixes: Vec::with_capacity(b),
        };
        for (r, &row_idx) in group.iter().enumerate() {
            let row = &rows[row_idx];
            let pad = max_len - row.items.len();
            for (p, (&it, &tg)) in row.items.iter().zip(&row.targets).enumerate() {
                batch.items[r * max_len + pad + p] = it;
                batch.mask[r * max_len + pad + p] = true;
                batch.targets[r * max_len + pad + p] = tg;
            }
            batch.prefixes.push(row.prefix.clone());
        }
        batches.push(batch);
    }
    batches
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalPhase {
    /// Context is the training sequence; target is the validation item.
    Validation,
    /// Context is training plus validation item; target is the test item.
    Test,
}

/// One evaluation row per user, in dense user order.
#[derive(Debug, Clone)]
pub struct EvalBatch {
    pub rows: usize,
    pub max_len: usize,
    pub items: Vec<u32>,
    pub mask: Vec<bool>,
    /// Dense user index per row.
    pub users: Vec<usize>,
    /// Ground-truth item per row.
    pub targets: Vec<u32>,
    /// Full (untruncated) context per row, for history-excluded ranking.
    pub histories: Vec<Vec<u32>>,
}

pub fn eval_batches(
    split: &SplitDataset,
    phase: EvalPhase,
    max_len: usize,
    batch_size: usize,
) -> Vec<EvalBatch> {
    assert!(batch_size > 0, "batching needs batch_size >= 1");
    let users = split.train.len();
    let mut batches = Vec::new();
    let mut u = 0;
    while u < users {
        let b = batch_size.min(users - u);
        let mut batch = EvalBatch {
            rows: b,
            max_len,
            items: vec![0; b * max_len],
            mask: vec![false; b * max_len],
            users: Vec::with_capacity(b),
            targets: Vec::with_capacity(b),
            histories: Vec::with_capacity(b),
        };
        for r in 0..b {
            let user = u + r;
            let mut context = split.train[user].clone();
            let target = match phase {
                EvalPhase::Validation => split.valid[user],
                EvalPhase::Test => {
                    context.push(split.valid[user]);
                    split.test[user]
                }
            };
            let keep = context.len().min(max_len);
            let tail = &context[context.len() - keep..];
            let pad = max_len - keep;
            for (p, &it) in tail.iter().enumerate() {
                batch.items[r * max_len + pad + p] = it;
                batch.mask[r * max_len + pad + p] = true;
            }
            batch.users.push(user);
            batch.targets.push(target);
            batch.histories.push(context);
        }
        u += b;
        batches.push(batch);
    }
    batches
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    format: String,
    users: Vec<String>,
    items: Vec<String>,
    sequences: Vec<Vec<u32>>,
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| GritError::io(path, e))?;
    let cache = CacheFile {
        format: CACHE_TAG.to_string(),
        users: dataset.users.clone(),
        items: dataset.items.clone(),
        sequences: dataset.sequences.clone(),
    };
    serde_json::to_writer(BufWriter::new(file), &cache)
        .map_err(|e| GritError::Data(format!("cannot write dataset cache: {e}")))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| GritError::io(path, e))?;
    let cache: CacheFile = serde_json::from_reader(BufReader::new(file)).map_err(|e| {
        GritError::Parse {
            path: path.to_path_buf(),
            message: format!("not a dataset cache: {e}"),
        }
    })?;
    if cache.format != CACHE_TAG {
        return Err(GritError::Parse {
            path: path.to_path_buf(),
            message: format!(
                "dataset cache tag {:?} does not match expected {CACHE_TAG:?}",
                cache.format
            ),
        });
    }
    let ds = Dataset { users: cache.users, items: cache.items, sequences: cache.sequences };
    for (u, seq) in ds.sequences.iter().enumerate() {
        for &it in seq {
            if it == 0 || it as usize > ds.items.len() {
                return Err(GritError::Parse {
                    path: path.to_path_buf(),
                    message: format!("cache row {u} holds out-of-range item id {it}"),
                });
            }
        }
    }
    Ok(ds)
}
