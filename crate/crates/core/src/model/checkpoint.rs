//! Binary checkpoint container, all integers little-endian:
//!
//! ```text
//! "TPRN" | version u32 | image_size, patch_size, embed_dim, num_heads,
//!   depth, mlp_ratio, num_classes: u32 | seed u64
//! param_count u32, then per parameter:
//!   name_len u32 | name utf-8 | ndim u32 | dims u32 x ndim | values f32 x numel
//! group_count u32, then per group:
//!   layer_number u32 | is_skip u8 | bit_count u32 | mask bits, LSB-first,
//!   ceil(bit_count / 8) bytes
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{VisionTransformer, ViTConfig};
use crate::error::{bail, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TPRN";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn write_checkpoint(model: &VisionTransformer, mut w: impl Write) -> Result<()> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        cfg.image_size,
        cfg.patch_size,
        cfg.embed_dim,
        cfg.num_heads,
        cfg.depth,
        cfg.mlp_ratio,
        cfg.num_classes,
    ] {
        put_u32(&mut out, v)?;
    }
    out.extend_from_slice(&cfg.seed.to_le_bytes());

    let names = model.param_names();
    let tensors = model.tensors();
    put_u32(&mut out, tensors.len())?;
    for (name, t) in names.iter().zip(tensors) {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    put_u32(&mut out, model.num_groups())?;
    for g in model.groups() {
        put_u32(&mut out, g.layer_number())?;
        out.push(g.is_skip as u8);
        put_u32(&mut out, g.mask().len())?;
        let mut bytes = vec![0u8; g.mask().len().div_ceil(8)];
        for (i, &bit) in g.mask().iter().enumerate() {
            if bit {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&bytes);
    }
    w.write_all(&out).map_err(|e| Error::io("<checkpoint stream>", e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            bail!(Format, "checkpoint truncated at byte {}", self.pos);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint(mut r: impl Read) -> Result<VisionTransformer> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("<checkpoint stream>", e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        bail!(Format, "not a checkpoint (bad magic)");
    }
    let version = c.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        bail!(Format, "unsupported checkpoint version {version}");
    }
    let config = ViTConfig {
        image_size: c.u32()?,
        patch_size: c.u32()?,
        embed_dim: c.u32()?,
        num_heads: c.u32()?,
        depth: c.u32()?,
        mlp_ratio: c.u32()?,
        num_classes: c.u32()?,
        seed: c.u64()?,
    };
    let mut model = VisionTransformer::new(config).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;

    let expected = model.param_names();
    let count = c.u32()?;
    if count != expected.len() {
        bail!(Format, "checkpoint has {count} parameters, model expects {}", expected.len());
    }
    for (i, want) in expected.iter().enumerate() {
        let len = c.u32()?;
        let name = std::str::from_utf8(c.take(len)?).map_err(|_| Error::Format("parameter name is not utf-8".into()))?;
        if name != want {
            bail!(Format, "parameter {i} is {name:?}, expected {want:?}");
        }
        let ndim = c.u32()?;
        let shape = (0..ndim).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = c.take(numel.checked_mul(4).ok_or_else(|| Error::Format("parameter too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        model.set_param(i, data, &shape)?;
    }

    let groups = c.u32()?;
    if groups != model.num_groups() {
        bail!(Format, "checkpoint has {groups} groups, model expects {}", model.num_groups());
    }
    for expected_number in 0..groups {
        let number = c.u32()?;
        if number != expected_number {
            bail!(Format, "group record {expected_number} carries layer_number {number}");
        }
        let skip = match c.take(1)?[0] {
            0 => false,
            1 => true,
            b => bail!(Format, "bad is_skip byte {b}"),
        };
        let bits = c.u32()?;
        let group = model.group_mut(number)?;
        if bits != group.weight().numel() {
            bail!(Format, "group {number} mask has {bits} bits for {} weights", group.weight().numel());
        }
        let raw = c.take(bits.div_ceil(8))?;
        let mask: Vec<bool> = (0..bits).map(|i| raw[i / 8] >> (i % 8) & 1 == 1).collect();
        if group.weight().data().iter().zip(&mask).any(|(&w, &m)| !m && w != 0.0) {
            bail!(Format, "group {number} has nonzero weights under its mask");
        }
        group.mask = mask;
        group.is_skip = skip;
    }
    if c.pos != bytes.len() {
        bail!(Format, "{} trailing bytes after checkpoint", bytes.len() - c.pos);
    }
    Ok(model)
}

pub fn save_checkpoint(model: &VisionTransformer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(model, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<VisionTransformer> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}
