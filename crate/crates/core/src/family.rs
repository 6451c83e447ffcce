//! Families of tokenizers taken from consecutive training epochs, sequence
//! tokenization under any member, and identifier-difference diagnostics.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rqvae::TokenizerCheckpoint;

pub const MANIFEST_HEADER: &str = "MTGF 1";

/// Token list naming one item: `H` semantic tokens then one collision token.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Identifier(Vec<u32>);

impl Identifier {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn semantic(&self) -> &[u32] {
        &self.0[..self.0.len() - 1]
    }

    pub fn collision(&self) -> u32 {
        self.0[self.0.len() - 1]
    }
}

impl fmt::Display for Identifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl FromStr for Identifier {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',')
            .map(|t| t.trim().parse::<u32>())
            .collect::<Result<Vec<_>, _>>()
            .map(Identifier)
    }
}

/// Checkpoints of consecutive epochs `N-n+1 … N` sharing one token space.
#[derive(Clone, Debug)]
pub struct TokenizerFamily {
    checkpoints: Vec<TokenizerCheckpoint>,
}

impl TokenizerFamily {
    pub fn new(checkpoints: Vec<TokenizerCheckpoint>) -> Result<Self> {
        let first = checkpoints
            .first()
            .ok_or_else(|| Error::InvalidArgument("tokenizer family is empty".into()))?;
        for pair in checkpoints.windows(2) {
            if pair[1].epoch != pair[0].epoch + 1 {
                return Err(Error::InvalidArgument(format!(
                    "family epochs must be consecutive, found {} then {}",
                    pair[0].epoch, pair[1].epoch
                )));
            }
        }
        for c in &checkpoints {
            if (c.levels, c.codebook_size, c.collision_capacity, c.num_items())
                != (
                    first.levels,
                    first.codebook_size,
                    first.collision_capacity,
                    first.num_items(),
                )
            {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint of epoch {} does not share the family's token space",
                    c.epoch
                )));
            }
        }
        Ok(Self { checkpoints })
    }

    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    pub fn get(&self, i: usize) -> &TokenizerCheckpoint {
        &self.checkpoints[i]
    }

    pub fn checkpoints(&self) -> &[TokenizerCheckpoint] {
        &self.checkpoints
    }

    pub fn levels(&self) -> usize {
        self.checkpoints[0].levels
    }

    pub fn codebook_size(&self) -> usize {
        self.checkpoints[0].codebook_size
    }

    pub fn collision_capacity(&self) -> usize {
        self.checkpoints[0].collision_capacity
    }

    pub fn num_items(&self) -> usize {
        self.checkpoints[0].num_items()
    }

    pub fn final_epoch(&self) -> usize {
        self.checkpoints.last().expect("non-empty").epoch
    }

    /// Writes the manifest: a header line, then `epoch<TAB>path` per member.
    pub fn write_manifest(path: &Path, members: &[(usize, PathBuf)]) -> Result<()> {
        let mut text = format!("{MANIFEST_HEADER}\n");
        for (epoch, member) in members {
            text.push_str(&format!("{epoch}\t{}\n", member.display()));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest, resolving relative member paths against its directory.
    pub fn read_manifest(path: &Path) -> Result<Vec<(usize, PathBuf)>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Format(format!(
                "{} does not start with `{MANIFEST_HEADER}`",
                path.display()
            )));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        lines
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, line)| {
                let bad = || Error::Parse {
                    line: i + 2,
                    message: "expected `epoch<TAB>path`".into(),
                };
                let (epoch, member) = line.split_once('\t').ok_or_else(bad)?;
                let epoch = epoch.parse().map_err(|_| bad())?;
                let member = PathBuf::from(member);
                let member = if member.is_relative() {
                    base.join(member)
                } else {
                    member
                };
                Ok((epoch, member))
            })
            .collect()
    }

    pub fn load_manifest(path: &Path) -> Result<Self> {
        let members = Self::read_manifest(path)?;
        let checkpoints = members
            .iter()
            .map(|(epoch, p)| {
                let c = TokenizerCheckpoint::load(p)?;
                if c.epoch != *epoch {
                    return Err(Error::Format(format!(
                        "{} holds epoch {}, manifest says {epoch}",
                        p.display(),
                        c.epoch
                    )));
                }
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(checkpoints)
    }
}

/// The last `n` checkpoints by epoch.
pub fn select_family(mut all: Vec<TokenizerCheckpoint>, n: usize) -> Result<TokenizerFamily> {
    if n == 0 || n > all.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {n} tokenizers from {} checkpoints",
            all.len()
        )));
    }
    all.sort_by_key(|c| c.epoch);
    let tail = all.split_off(all.len() - n);
    TokenizerFamily::new(tail)
}

/// History and target tokenized by family member `tokenizer_index`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequencePair {
    /// Concatenated identifiers of the history items.
    pub x: Vec<u32>,
    pub y: Identifier,
    pub tokenizer_index: usize,
}

pub fn tokenize_pair(
    tokenizer: &TokenizerCheckpoint,
    tokenizer_index: usize,
    history: &[usize],
    target: usize,
) -> Result<TokenSequencePair> {
    Ok(TokenSequencePair {
        x: tokenize_history(tokenizer, history)?,
        y: tokenizer
            .identifier(target)
            .ok_or(Error::UnknownItem(target))?
            .clone(),
        tokenizer_index,
    })
}

/// Concatenated identifiers of `history` under `tokenizer`.
pub fn tokenize_history(tokenizer: &TokenizerCheckpoint, history: &[usize]) -> Result<Vec<u32>> {
    if history.is_empty() {
        return Err(Error::InvalidArgument("history must not be empty".into()));
    }
    let mut x = Vec::with_capacity(history.len() * (tokenizer.levels + 1));
    for &item in history {
        x.extend_from_slice(tokenizer.identifier(item).ok_or(Error::UnknownItem(item))?.tokens());
    }
    Ok(x)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct DiffStats {
    /// Fraction of items whose level-1 token differs.
    pub first_change_rate: f64,
    /// Fraction of items with any differing semantic token.
    pub any_change_rate: f64,
}

/// Compares the semantic tokens of two tokenizers over the same catalog.
/// Collision tokens are not compared.
pub fn diff_stats(a: &TokenizerCheckpoint, b: &TokenizerCheckpoint) -> Result<DiffStats> {
    if a.num_items() != b.num_items() || a.levels != b.levels {
        return Err(Error::InvalidArgument(format!(
            "tokenizers cover different catalogs ({} vs {} items)",
            a.num_items(),
            b.num_items()
        )));
    }
    let n = a.num_items();
    if n == 0 {
        return Err(Error::InvalidArgument("empty catalog".into()));
    }
    let (mut first, mut any) = (0usize, 0usize);
    for (x, y) in a.identifiers().iter().zip(b.identifiers()) {
        if x.semantic()[0] != y.semantic()[0] {
            first += 1;
        }
        if x.semantic() != y.semantic() {
            any += 1;
        }
    }
    Ok(DiffStats {
        first_change_rate: first as f64 / n as f64,
        any_change_rate: any as f64 / n as f64,
    })
}

/// Mean diff statistics over every member pair at each epoch interval `1..n`.
pub fn interval_report(family: &TokenizerFamily) -> Result<Vec<(usize, DiffStats)>> {
    let n = family.len();
    let mut rows = Vec::new();
    for interval in 1..n {
        let mut first = 0.0;
        let mut any = 0.0;
        let pairs = n - interval;
        for i in 0..pairs {
            let s = diff_stats(family.get(i), family.get(i + interval))?;
            first += s.first_change_rate;
            any += s.any_change_rate;
        }
        rows.push((
            interval,
            DiffStats {
                first_change_rate: first / pairs as f64,
                any_change_rate: any / pairs as f64,
            },
        ));
    }
    Ok(rows)
}

/// CSV `interval,first_change_rate,any_change_rate` behind a comment line
/// noting that collision tokens are excluded.
pub fn write_diff_csv(rows: &[(usize, DiffStats)], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "# semantic tokens only; collision token excluded")?;
    writeln!(out, "interval,first_change_rate,any_change_rate")?;
    for (interval, s) in rows {
        writeln!(
            out,
            "{interval},{},{}",
            crate::report::sig6(s.first_change_rate),
            crate::report::sig6(s.any_change_rate)
        )?;
    }
    Ok(())
}
