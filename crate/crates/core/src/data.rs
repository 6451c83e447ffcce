//! Interaction logs, item catalogs and leave-one-out splits.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Minimum number of interactions a user and an item both need to survive filtering.
pub const MIN_INTERACTIONS: usize = 5;

/// Default number of most recent items kept in a history.
pub const DEFAULT_MAX_LEN: usize = 20;

/// Items with their popularity. Dense indices follow ascending `item_id` order,
/// so ranking by dense index is ranking by identifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemCatalog {
    entries: Vec<(String, u64)>,
    index: HashMap<String, usize>,
}

impl ItemCatalog {
    /// Builds a catalog from `(item_id, count)` pairs in any order.
    pub fn new(mut entries: Vec<(String, u64)>) -> Result<Self> {
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (id, _)) in entries.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate item id {id}")));
            }
        }
        Ok(Self { entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn item_id(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    pub fn popularity(&self, index: usize) -> u64 {
        self.entries[index].1
    }

    pub fn counts(&self) -> Vec<u64> {
        self.entries.iter().map(|(_, c)| *c).collect()
    }

    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    pub fn entries(&self) -> &[(String, u64)] {
        &self.entries
    }

    /// Same items, popularity replaced by `counts` (aligned with dense indices).
    pub fn with_counts(&self, counts: &[u64]) -> Result<Self> {
        if counts.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: counts.len(),
            });
        }
        let entries = self
            .entries
            .iter()
            .zip(counts)
            .map(|((id, _), &c)| (id.clone(), c))
            .collect();
        Ok(Self {
            entries,
            index: self.index.clone(),
        })
    }

    pub fn popularity_groups(&self, boundaries: &[u64]) -> Result<Vec<usize>> {
        popularity_groups(&self.counts(), boundaries)
    }
}

/// One user's chronological interactions, as dense catalog indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionSequence {
    pub user_id: String,
    pub items: Vec<usize>,
}

/// A history and the item that followed it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub history: Vec<usize>,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitBundle {
    pub train_pairs: Vec<Pair>,
    pub validation_pair: Pair,
    pub test_pair: Pair,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub sequences: Vec<InteractionSequence>,
    pub catalog: ItemCatalog,
}

/// Raw `(user_id, [item_id])` record before filtering.
pub type RawRecord = (String, Vec<String>);

pub fn parse_interactions(reader: impl Read) -> Result<Vec<RawRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let (user, items) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: lineno,
            message: "expected `user_id<TAB>item,item,...`".into(),
        })?;
        if user.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: "empty user id".into(),
            });
        }
        let items: Vec<String> = items.split(',').map(|s| s.trim().to_string()).collect();
        if items.iter().any(String::is_empty) {
            return Err(Error::Parse {
                line: lineno,
                message: "empty item id".into(),
            });
        }
        if !seen.insert(user.to_string()) {
            return Err(Error::Parse {
                line: lineno,
                message: format!("duplicate user id {user}"),
            });
        }
        records.push((user.to_string(), items));
    }
    Ok(records)
}

/// Drops users and items with fewer than `min_count` interactions, repeating
/// until neither filter removes anything.
pub fn filter_to_fixpoint(mut records: Vec<RawRecord>, min_count: usize) -> Vec<RawRecord> {
    loop {
        let before: usize = records.iter().map(|(_, items)| items.len()).sum();
        let users_before = records.len();
        records.retain(|(_, items)| items.len() >= min_count);

        let mut counts: HashMap<&str, usize> = HashMap::new();
        for (_, items) in &records {
            for item in items {
                *counts.entry(item.as_str()).or_default() += 1;
            }
        }
        let rare: HashSet<String> = counts
            .into_iter()
            .filter(|&(_, c)| c < min_count)
            .map(|(id, _)| id.to_string())
            .collect();
        for (_, items) in &mut records {
            items.retain(|item| !rare.contains(item));
        }
        records.retain(|(_, items)| items.len() >= min_count);

        let after: usize = records.iter().map(|(_, items)| items.len()).sum();
        if after == before && records.len() == users_before {
            return records;
        }
    }
}

impl Dataset {
    pub fn from_records(records: Vec<RawRecord>, min_count: usize) -> Result<Self> {
        let records = filter_to_fixpoint(records, min_count);
        if records.is_empty() {
            return Err(Error::EmptyDataset { min_count });
        }
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for (_, items) in &records {
            for item in items {
                *counts.entry(item.as_str()).or_default() += 1;
            }
        }
        let catalog = ItemCatalog::new(
            counts
                .into_iter()
                .map(|(id, c)| (id.to_string(), c))
                .collect(),
        )?;
        let sequences = records
            .iter()
            .map(|(user, items)| InteractionSequence {
                user_id: user.clone(),
                items: items
                    .iter()
                    .map(|id| catalog.index_of(id).expect("filtered item in catalog"))
                    .collect(),
            })
            .collect();
        Ok(Self { sequences, catalog })
    }

    /// Leave-one-out splits for every user, in file order.
    pub fn splits(&self, max_len: usize) -> Result<Vec<SplitBundle>> {
        self.sequences
            .iter()
            .map(|s| leave_one_out_split(s, max_len))
            .collect()
    }

    /// Catalog whose popularity counts only cover the training portion of
    /// each sequence (everything before the validation target).
    pub fn training_catalog(&self) -> Result<ItemCatalog> {
        let mut counts = vec![0u64; self.catalog.len()];
        for seq in &self.sequences {
            let end = seq.items.len().saturating_sub(2);
            for &item in &seq.items[..end] {
                counts[item] += 1;
            }
        }
        self.catalog.with_counts(&counts)
    }

    pub fn write_tsv(&self, mut out: impl Write) -> std::io::Result<()> {
        for seq in &self.sequences {
            let ids: Vec<&str> = seq.items.iter().map(|&i| self.catalog.item_id(i)).collect();
            writeln!(out, "{}\t{}", seq.user_id, ids.join(","))?;
        }
        Ok(())
    }
}

pub fn load_interactions(path: &Path) -> Result<Dataset> {
    load_interactions_with(path, MIN_INTERACTIONS)
}

pub fn load_interactions_with(path: &Path, min_count: usize) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_records(parse_interactions(file)?, min_count)
}

fn truncated(items: &[usize], max_len: usize) -> Vec<usize> {
    items[items.len().saturating_sub(max_len)..].to_vec()
}

pub fn leave_one_out_split(seq: &InteractionSequence, max_len: usize) -> Result<SplitBundle> {
    let n = seq.items.len();
    if n < MIN_INTERACTIONS {
        return Err(Error::SequenceTooShort {
            len: n,
            min: MIN_INTERACTIONS,
        });
    }
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be positive".into()));
    }
    let items = &seq.items;
    let pair = |j: usize| Pair {
        history: truncated(&items[..j], max_len),
        target: items[j],
    };
    Ok(SplitBundle {
        train_pairs: (1..n - 2).map(pair).collect(),
        validation_pair: pair(n - 2),
        test_pair: pair(n - 1),
    })
}

/// Group index per item: group `g` holds counts in `[boundaries[g-1], boundaries[g])`,
/// the first group everything below `boundaries[0]`, the last everything from the
/// final boundary up.
pub fn popularity_groups(counts: &[u64], boundaries: &[u64]) -> Result<Vec<usize>> {
    if boundaries.is_empty() {
        return Err(Error::InvalidArgument("popularity boundaries are empty".into()));
    }
    if boundaries[0] == 0 || boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "popularity boundaries must be positive and strictly ascending".into(),
        ));
    }
    Ok(counts
        .iter()
        .map(|c| boundaries.partition_point(|b| b <= c))
        .collect())
}
