//! Interaction-log ingestion and dataset preparation.
//!
//! Raw logs are tab-separated `user<TAB>item<TAB>timestamp` lines. Items with
//! fewer than `min_item_count` interactions and sequences shorter than
//! `min_seq_len` are removed, iterating the two filters to a fixed point
//! since each can re-trigger the other. Surviving histories are windowed into
//! fixed-length, left-padded next-item examples and split 8:1:1 after a
//! global chronological sort of the targets.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// One row of the raw log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

/// Dense item vocabulary with popularity counts. The padding index is `V`,
/// one past the densely assigned range `[0, V)`.
#[derive(Debug, Clone)]
pub struct ItemCorpus {
    items: Vec<String>,
    index_of: HashMap<String, u32>,
    popularity: Vec<u64>,
    embedding_dim: usize,
}

impl ItemCorpus {
    pub fn vocab_size(&self) -> usize {
        self.items.len()
    }

    pub fn pad_index(&self) -> u32 {
        self.items.len() as u32
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn item_id(&self, index: u32) -> &str {
        &self.items[index as usize]
    }

    pub fn index(&self, item: &str) -> Option<u32> {
        self.index_of.get(item).copied()
    }

    pub fn popularity(&self) -> &[u64] {
        &self.popularity
    }
}

/// Fixed-length training example: `history` holds exactly `L` indices,
/// left-padded with the pad index; `target` is the next item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceExample {
    pub history: Vec<u32>,
    pub target: u32,
    pub timestamp: i64,
    pub user_ord: u32,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<SequenceExample>,
    pub valid: Vec<SequenceExample>,
    pub test: Vec<SequenceExample>,
}

/// A user's surviving interactions, chronologically sorted.
#[derive(Debug, Clone)]
pub struct UserHistory {
    pub user: String,
    /// (item index, timestamp) pairs.
    pub items: Vec<(u32, i64)>,
}

/// Reads a TSV interaction log in file order, no filtering. An empty file is
/// an empty list, not an error.
pub fn ingest(path: &Path) -> Result<Vec<Interaction>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        let mut fields = line.split('\t');
        let (user, item, ts) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some(u), Some(it), Some(ts), None) => (u, it, ts),
            _ => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected 3 tab-separated fields, got `{line}`"),
                })
            }
        };
        let timestamp: i64 = ts.parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("invalid timestamp `{ts}`"),
        })?;
        out.push(Interaction {
            user: user.to_string(),
            item: item.to_string(),
            timestamp,
        });
    }
    Ok(out)
}

/// Applies item-count and sequence-length filtering to a fixed point, then
/// builds the dense corpus (indices in first-appearance order) and per-user
/// chronological histories.
pub fn filter_and_build(
    raw: &[Interaction],
    min_item_count: usize,
    min_seq_len: usize,
    embedding_dim: usize,
) -> Result<(ItemCorpus, Vec<UserHistory>)> {
    assert!(min_item_count >= 1 && min_seq_len >= 1);
    let mut alive = vec![true; raw.len()];
    loop {
        let mut changed = false;
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for (i, r) in raw.iter().enumerate() {
            if alive[i] {
                *item_counts.entry(r.item.as_str()).or_default() += 1;
            }
        }
        for (i, r) in raw.iter().enumerate() {
            if alive[i] && item_counts[r.item.as_str()] < min_item_count {
                alive[i] = false;
                changed = true;
            }
        }
        let mut user_lens: HashMap<&str, usize> = HashMap::new();
        for (i, r) in raw.iter().enumerate() {
            if alive[i] {
                *user_lens.entry(r.user.as_str()).or_default() += 1;
            }
        }
        for (i, r) in raw.iter().enumerate() {
            if alive[i] && user_lens[r.user.as_str()] < min_seq_len {
                alive[i] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    if !alive.iter().any(|&a| a) {
        return Err(Error::EmptyCorpus);
    }

    let mut items = Vec::new();
    let mut index_of: HashMap<String, u32> = HashMap::new();
    let mut popularity = Vec::new();
    let mut user_order: Vec<String> = Vec::new();
    let mut user_items: HashMap<String, Vec<(u32, i64)>> = HashMap::new();

    for (i, r) in raw.iter().enumerate() {
        if !alive[i] {
            continue;
        }
        let idx = *index_of.entry(r.item.clone()).or_insert_with(|| {
            items.push(r.item.clone());
            popularity.push(0);
            (items.len() - 1) as u32
        });
        popularity[idx as usize] += 1;
        if !user_items.contains_key(&r.user) {
            user_order.push(r.user.clone());
        }
        user_items
            .entry(r.user.clone())
            .or_default()
            .push((idx, r.timestamp));
    }

    let histories = user_order
        .into_iter()
        .map(|user| {
            let mut items = user_items.remove(&user).unwrap();
            items.sort_by_key(|&(_, ts)| ts); // stable: file order breaks ties
            UserHistory { user, items }
        })
        .collect();

    Ok((
        ItemCorpus {
            items,
            index_of,
            popularity,
            embedding_dim,
        },
        histories,
    ))
}

/// Emits one example per position `n >= min_seq_len - 1`: the preceding
/// `min(n, l)` items left-padded to `l`, with item `n` as the target. The
/// target never appears inside its own window.
pub fn window_and_pad(
    history: &[(u32, i64)],
    l: usize,
    min_seq_len: usize,
    pad_index: u32,
    user_ord: u32,
) -> Vec<SequenceExample> {
    assert!(history.len() >= min_seq_len, "windowing needs >= min_seq_len items");
    let mut out = Vec::new();
    for n in (min_seq_len - 1)..history.len() {
        let take = n.min(l);
        let mut window = vec![pad_index; l - take];
        window.extend(history[n - take..n].iter().map(|&(idx, _)| idx));
        out.push(SequenceExample {
            history: window,
            target: history[n].0,
            timestamp: history[n].1,
            user_ord,
        });
    }
    out
}

/// First 80% train, next 10% validation, last 10% test; validation and test
/// sizes floored, remainder to train. Input must already be in target
/// chronological order.
pub fn chronological_split(examples: Vec<SequenceExample>) -> Result<DatasetSplit> {
    let n = examples.len();
    if n < 10 {
        return Err(Error::SplitTooSmall { min: 10, got: n });
    }
    let n_valid = n / 10;
    let n_test = n / 10;
    let n_train = n - n_valid - n_test;
    let mut examples = examples;
    let test = examples.split_off(n_train + n_valid);
    let valid = examples.split_off(n_train);
    Ok(DatasetSplit {
        train: examples,
        valid,
        test,
    })
}

/// Full preparation pipeline: filter, window every history, sort all
/// examples by target timestamp (stable), split 8:1:1.
pub fn build_dataset(
    raw: &[Interaction],
    l: usize,
    min_item_count: usize,
    min_seq_len: usize,
    embedding_dim: usize,
) -> Result<(ItemCorpus, Vec<UserHistory>, DatasetSplit)> {
    let (corpus, histories) = filter_and_build(raw, min_item_count, min_seq_len, embedding_dim)?;
    let mut examples = Vec::new();
    for (u, h) in histories.iter().enumerate() {
        examples.extend(window_and_pad(
            &h.items,
            l,
            min_seq_len,
            corpus.pad_index(),
            u as u32,
        ));
    }
    examples.sort_by_key(|e| e.timestamp);
    let split = chronological_split(examples)?;
    Ok((corpus, histories, split))
}

// ---------------------------------------------------------------------------
// Persistence: corpus table and split files.
// ---------------------------------------------------------------------------

/// Writes `corpus.tsv` (`item<TAB>index<TAB>count`).
pub fn write_corpus(dir: &Path, corpus: &ItemCorpus) -> Result<()> {
    let path = dir.join("corpus.tsv");
    let mut buf = String::new();
    for (i, item) in corpus.items.iter().enumerate() {
        buf.push_str(&format!("{item}\t{i}\t{}\n", corpus.popularity[i]));
    }
    fs::write(&path, buf).map_err(|e| Error::io(&path, e))
}

pub fn read_corpus(dir: &Path, embedding_dim: usize) -> Result<ItemCorpus> {
    let path = dir.join("corpus.tsv");
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut items = Vec::new();
    let mut popularity = Vec::new();
    let mut index_of = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                msg: "corpus.tsv expects item, index, count".into(),
            });
        }
        let idx: u32 = fields[1].parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("bad index `{}`", fields[1]),
        })?;
        if idx as usize != i {
            return Err(Error::Parse {
                line: i + 1,
                msg: "corpus indices must be dense and in order".into(),
            });
        }
        let count: u64 = fields[2].parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("bad count `{}`", fields[2]),
        })?;
        index_of.insert(fields[0].to_string(), idx);
        items.push(fields[0].to_string());
        popularity.push(count);
    }
    Ok(ItemCorpus {
        items,
        index_of,
        popularity,
        embedding_dim,
    })
}

/// Writes one split as `user<TAB>target<TAB>timestamp<TAB>history`, where
/// `history` is the comma-joined item ids of the non-pad window entries.
pub fn write_split_file(
    path: &Path,
    examples: &[SequenceExample],
    corpus: &ItemCorpus,
    users: &[String],
) -> Result<()> {
    let mut out = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let pad = corpus.pad_index();
    let mut buf = String::new();
    for e in examples {
        let hist: Vec<&str> = e
            .history
            .iter()
            .filter(|&&h| h != pad)
            .map(|&h| corpus.item_id(h))
            .collect();
        buf.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            users[e.user_ord as usize],
            corpus.item_id(e.target),
            e.timestamp,
            hist.join(",")
        ));
    }
    out.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_splits(
    dir: &Path,
    split: &DatasetSplit,
    corpus: &ItemCorpus,
    users: &[String],
) -> Result<()> {
    write_split_file(&dir.join("train.tsv"), &split.train, corpus, users)?;
    write_split_file(&dir.join("valid.tsv"), &split.valid, corpus, users)?;
    write_split_file(&dir.join("test.tsv"), &split.test, corpus, users)
}

fn read_split_file(
    path: &Path,
    corpus: &ItemCorpus,
    l: usize,
    users: &mut Vec<String>,
    user_ords: &mut HashMap<String, u32>,
) -> Result<Vec<SequenceExample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: i + 1,
                msg: "split file expects user, target, timestamp, history".into(),
            });
        }
        let lookup = |item: &str| {
            corpus.index(item).ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("item `{item}` not in corpus"),
            })
        };
        let target = lookup(fields[1])?;
        let timestamp: i64 = fields[2].parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("bad timestamp `{}`", fields[2]),
        })?;
        let hist_ids: Vec<u32> = if fields[3].is_empty() {
            Vec::new()
        } else {
            fields[3]
                .split(',')
                .map(lookup)
                .collect::<Result<Vec<u32>>>()?
        };
        if hist_ids.len() > l {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("history longer than L={l}"),
            });
        }
        let mut history = vec![corpus.pad_index(); l - hist_ids.len()];
        history.extend(hist_ids);
        let user = fields[0].to_string();
        let next_ord = users.len() as u32;
        let ord = *user_ords.entry(user.clone()).or_insert_with(|| {
            users.push(user);
            next_ord
        });
        out.push(SequenceExample {
            history,
            target,
            timestamp,
            user_ord: ord,
        });
    }
    Ok(out)
}

pub fn read_splits(dir: &Path, corpus: &ItemCorpus, l: usize) -> Result<(DatasetSplit, Vec<String>)> {
    let mut users = Vec::new();
    let mut ords = HashMap::new();
    let train = read_split_file(&dir.join("train.tsv"), corpus, l, &mut users, &mut ords)?;
    let valid = read_split_file(&dir.join("valid.tsv"), corpus, l, &mut users, &mut ords)?;
    let test = read_split_file(&dir.join("test.tsv"), corpus, l, &mut users, &mut ords)?;
    Ok((DatasetSplit { train, valid, test }, users))
}
