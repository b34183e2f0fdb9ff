//! Little-endian binary checkpoint.
//!
//! ```text
//! magic   b"ICFL"
//! version u32
//! config  u32 length, UTF-8 key = value text
//! count   u32
//! tensor  u32 name length, name, u32 rank, rank x u32 extents, f32 payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::backbone::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: [u8; 4] = *b"ICFL";
pub const VERSION: u32 = 1;
const MAX_NAME: u32 = 4096;
const MAX_RANK: u32 = 8;
const MAX_CONFIG: u32 = 1 << 20;

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} {n} does not fit in u32")))
}

pub fn write<W: Write>(model: &Model, mut out: W) -> Result<()> {
    out.write_all(&MAGIC)?;
    out.write_u32::<LE>(VERSION)?;
    let cfg = model.config().to_text();
    out.write_u32::<LE>(len_u32(cfg.len(), "config length")?)?;
    out.write_all(cfg.as_bytes())?;
    let store = model.store();
    out.write_u32::<LE>(len_u32(store.len(), "tensor count")?)?;
    for (name, t) in store.iter() {
        out.write_u32::<LE>(len_u32(name.len(), "name length")?)?;
        out.write_all(name.as_bytes())?;
        out.write_u32::<LE>(len_u32(t.shape().len(), "rank")?)?;
        for &e in t.shape() {
            out.write_u32::<LE>(len_u32(e, "extent")?)?;
        }
        for &v in t.data() {
            out.write_f32::<LE>(v as f32)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_exact_vec<R: Read>(input: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    input.read_exact(&mut buf)?;
    Ok(buf)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("truncated file".into())
    } else {
        Error::Io(e)
    }
}

pub fn read<R: Read>(mut input: R) -> Result<Model> {
    let magic = read_exact_vec(&mut input, 4).map_err(|_| Error::Checkpoint("truncated header".into()))?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = input.read_u32::<LE>().map_err(truncated)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg_len = input.read_u32::<LE>().map_err(truncated)?;
    if cfg_len > MAX_CONFIG {
        return Err(Error::Checkpoint(format!("config block of {cfg_len} bytes")));
    }
    let cfg_bytes = read_exact_vec(&mut input, cfg_len as usize).map_err(|_| Error::Checkpoint("truncated config".into()))?;
    let cfg_text = String::from_utf8(cfg_bytes).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let config = ModelConfig::from_text(&cfg_text)?;

    let count = input.read_u32::<LE>().map_err(truncated)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = input.read_u32::<LE>().map_err(truncated)?;
        if name_len == 0 || name_len > MAX_NAME {
            return Err(Error::Checkpoint(format!("bad name length {name_len}")));
        }
        let name = String::from_utf8(read_exact_vec(&mut input, name_len as usize)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = input.read_u32::<LE>().map_err(truncated)?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("{name}: bad rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(input.read_u32::<LE>().map_err(truncated)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| n > 0 && n <= 1 << 28)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: bad shape {shape:?}")))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(input.read_f32::<LE>().map_err(truncated)? as f64);
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        if store.id(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        store.insert(name, t)?;
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Model::from_parts(config, store)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write(model, std::io::BufWriter::new(file))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let file = std::fs::File::open(path)?;
    read(std::io::BufReader::new(file))
}
