use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{layout, ModelConfig, ModelParams, Vocabulary};
use crate::binio::Cursor;
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::tape::Mat;

pub const MODEL_MAGIC: &[u8; 4] = b"MTGM";
pub const MODEL_VERSION: u32 = 1;

impl ModelParams {
    /// `MTGM`, version, config block, then every tensor as
    /// `name_len u32, name, rows u32, cols u32, f64 LE values`.
    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(MODEL_MAGIC)?;
        let c = &self.config;
        let v = &self.vocab;
        for x in [
            MODEL_VERSION,
            c.d_model as u32,
            c.d_inner as u32,
            c.heads as u32,
            c.layers as u32,
            c.max_positions as u32,
            c.activation.code(),
            v.levels as u32,
            v.codebook_size as u32,
            v.collision_capacity as u32,
        ] {
            out.write_all(&x.to_le_bytes())?;
        }
        out.write_all(&c.dropout.to_le_bytes())?;
        out.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for ((name, _), t) in layout(c, v).iter().zip(&self.tensors) {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(t.nrows() as u32).to_le_bytes())?;
            out.write_all(&(t.ncols() as u32).to_le_bytes())?;
            for x in t.iter() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Format(e.to_string()))?;
        let mut cur = Cursor::new(&bytes);
        if cur.take(4)? != MODEL_MAGIC {
            return Err(Error::Format("model file lacks MTGM magic".into()));
        }
        let version = cur.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let mut u = || cur.u32().map(|x| x as usize);
        let (d_model, d_inner, heads, layers, max_positions) = (u()?, u()?, u()?, u()?, u()?);
        let activation = Activation::from_code(u()? as u32)
            .ok_or_else(|| Error::Format("unknown activation code".into()))?;
        let vocab = Vocabulary::new(u()?, u()?, u()?)?;
        let config = ModelConfig {
            d_model,
            d_inner,
            heads,
            layers,
            dropout: cur.f64()?,
            max_positions,
            activation,
        };
        config.validate()?;
        let expected = layout(&config, &vocab);
        let count = cur.u32()? as usize;
        if count != expected.len() {
            return Err(Error::Format(format!(
                "model file holds {count} tensors, config needs {}",
                expected.len()
            )));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, shape) in &expected {
            let len = cur.u32()? as usize;
            let found = std::str::from_utf8(cur.take(len)?)
                .map_err(|e| Error::Format(e.to_string()))?;
            let (rows, cols) = (cur.u32()? as usize, cur.u32()? as usize);
            if found != name || (rows, cols) != *shape {
                return Err(Error::Format(format!(
                    "tensor {found} {rows}x{cols} does not match expected {name} {shape:?}"
                )));
            }
            let mut values = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                values.push(cur.f64()?);
            }
            tensors.push(Mat::from_shape_vec((rows, cols), values).expect("shape checked"));
        }
        if !cur.rest().is_empty() {
            return Err(Error::Format("trailing bytes after model tensors".into()));
        }
        Self::from_parts(config, vocab, tensors)
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
