use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::binio::Cursor;
use crate::error::{Error, Result};
use crate::family::Identifier;

pub const TOKENIZER_MAGIC: &[u8; 4] = b"MTGT";
pub const TOKENIZER_VERSION: u32 = 1;

/// Frozen tokenizer of one training epoch: codebooks plus the identifier of
/// every catalog item.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerCheckpoint {
    pub epoch: usize,
    pub levels: usize,
    pub codebook_size: usize,
    pub collision_capacity: usize,
    pub codebooks: Vec<Array2<f64>>,
    identifiers: Vec<Identifier>,
    inverse: HashMap<Identifier, usize>,
}

impl TokenizerCheckpoint {
    pub fn new(
        epoch: usize,
        levels: usize,
        codebook_size: usize,
        collision_capacity: usize,
        codebooks: Vec<Array2<f64>>,
        identifiers: Vec<Identifier>,
    ) -> Result<Self> {
        if codebooks.len() != levels {
            return Err(Error::DimensionMismatch {
                expected: levels,
                got: codebooks.len(),
            });
        }
        let mut inverse = HashMap::with_capacity(identifiers.len());
        for (item, id) in identifiers.iter().enumerate() {
            if id.len() != levels + 1 {
                return Err(Error::Format(format!(
                    "identifier of item {item} has {} tokens, expected {}",
                    id.len(),
                    levels + 1
                )));
            }
            let semantic_ok = id.semantic().iter().all(|&c| (c as usize) < codebook_size);
            if !semantic_ok || id.collision() as usize >= collision_capacity {
                return Err(Error::Format(format!(
                    "identifier of item {item} is out of range: {id}"
                )));
            }
            if inverse.insert(id.clone(), item).is_some() {
                return Err(Error::Format(format!("identifier {id} is not unique")));
            }
        }
        Ok(Self {
            epoch,
            levels,
            codebook_size,
            collision_capacity,
            codebooks,
            identifiers,
            inverse,
        })
    }

    pub fn num_items(&self) -> usize {
        self.identifiers.len()
    }

    pub fn identifiers(&self) -> &[Identifier] {
        &self.identifiers
    }

    pub fn identifier(&self, item: usize) -> Option<&Identifier> {
        self.identifiers.get(item)
    }

    pub fn item_of(&self, id: &Identifier) -> Option<usize> {
        self.inverse.get(id).copied()
    }

    pub fn codebook_dim(&self) -> usize {
        self.codebooks.first().map_or(0, |c| c.ncols())
    }

    /// `MTGT`, version, epoch, then `levels, codebook_size, codebook_dim,
    /// collision_capacity, item_count` (all u32 LE), the codebooks as f64 LE,
    /// and a trailing text section of `dense_index<TAB>c1,c2,...` lines.
    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(TOKENIZER_MAGIC)?;
        for v in [
            TOKENIZER_VERSION,
            self.epoch as u32,
            self.levels as u32,
            self.codebook_size as u32,
            self.codebook_dim() as u32,
            self.collision_capacity as u32,
            self.identifiers.len() as u32,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        for book in &self.codebooks {
            for v in book.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        for (item, id) in self.identifiers.iter().enumerate() {
            writeln!(out, "{item}\t{id}")?;
        }
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Format(e.to_string()))?;
        let mut cursor = Cursor::new(&bytes);
        if cursor.take(4)? != TOKENIZER_MAGIC {
            return Err(Error::Format("tokenizer file lacks MTGT magic".into()));
        }
        let version = cursor.u32()?;
        if version != TOKENIZER_VERSION {
            return Err(Error::Format(format!("unsupported tokenizer version {version}")));
        }
        let epoch = cursor.u32()? as usize;
        let levels = cursor.u32()? as usize;
        let codebook_size = cursor.u32()? as usize;
        let dim = cursor.u32()? as usize;
        let capacity = cursor.u32()? as usize;
        let items = cursor.u32()? as usize;
        let mut codebooks = Vec::with_capacity(levels);
        for _ in 0..levels {
            let mut values = Vec::with_capacity(codebook_size * dim);
            for _ in 0..codebook_size * dim {
                values.push(cursor.f64()?);
            }
            codebooks.push(
                Array2::from_shape_vec((codebook_size, dim), values)
                    .map_err(|e| Error::Format(e.to_string()))?,
            );
        }
        let text = std::str::from_utf8(cursor.rest())
            .map_err(|e| Error::Format(format!("identifier section: {e}")))?;
        let mut identifiers = vec![None; items];
        for (lineno, line) in text.lines().enumerate() {
            let bad = |msg: &str| Error::Parse {
                line: lineno + 1,
                message: msg.to_string(),
            };
            let (index, tokens) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            let index: usize = index.parse().map_err(|_| bad("bad item index"))?;
            let id: Identifier = tokens.parse().map_err(|_| bad("bad identifier"))?;
            let slot = identifiers
                .get_mut(index)
                .ok_or_else(|| bad("item index out of range"))?;
            *slot = Some(id);
        }
        let identifiers = identifiers
            .into_iter()
            .enumerate()
            .map(|(i, id)| id.ok_or(Error::UnknownItem(i)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(epoch, levels, codebook_size, capacity, codebooks, identifiers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        self.write_to(&mut out)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
