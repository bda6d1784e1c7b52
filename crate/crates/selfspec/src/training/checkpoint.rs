//! Self-describing binary checkpoint: magic + version, the embedded model
//! config as JSON, then every named weight tensor with shape metadata.
//! Weights are stored as raw little-endian f32 bits so a save/load round
//! trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::backbone::Backbone;
use crate::config::ModelConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SSPC";
const VERSION: u32 = 1;

pub fn save_checkpoint(backbone: &Backbone, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg_json = serde_json::to_vec(backbone.config())
        .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
    w.write_all(&(cfg_json.len() as u64).to_le_bytes())?;
    w.write_all(&cfg_json)?;
    let tensors = backbone.layout().tensors(backbone.config());
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, shape, range) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(shape.len() as u8).to_le_bytes())?;
        for dim in &shape {
            w.write_all(&(*dim as u64).to_le_bytes())?;
        }
        for &value in &backbone.params()[range] {
            w.write_all(&value.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated checkpoint file".into()))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn load_checkpoint(path: &Path) -> Result<Backbone> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let mut vb = [0u8; 4];
    read_exact(&mut r, &mut vb)?;
    let version = u32::from_le_bytes(vb);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let cfg_len = read_u64(&mut r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    read_exact(&mut r, &mut cfg_bytes)?;
    let cfg: ModelConfig = serde_json::from_slice(&cfg_bytes)
        .map_err(|e| Error::Checkpoint(format!("config parse: {e}")))?;
    cfg.validate()?;
    let layout = crate::backbone::params::ParamLayout::new(&cfg);
    let expected = layout.tensors(&cfg);
    let n_tensors = read_u64(&mut r)? as usize;
    if n_tensors != expected.len() {
        return Err(Error::Checkpoint(format!(
            "tensor count {} does not match config ({})",
            n_tensors,
            expected.len()
        )));
    }
    let mut params = vec![0.0f32; layout.n_params];
    for (name, shape, range) in expected {
        let mut nb = [0u8; 2];
        read_exact(&mut r, &mut nb)?;
        let mut name_bytes = vec![0u8; u16::from_le_bytes(nb) as usize];
        read_exact(&mut r, &mut name_bytes)?;
        let got_name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if got_name != name {
            return Err(Error::Checkpoint(format!(
                "expected tensor {name}, found {got_name}"
            )));
        }
        let mut nd = [0u8; 1];
        read_exact(&mut r, &mut nd)?;
        if nd[0] as usize != shape.len() {
            return Err(Error::Checkpoint(format!("tensor {name}: rank mismatch")));
        }
        for want in &shape {
            let got = read_u64(&mut r)? as usize;
            if got != *want {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape mismatch ({got} vs {want})"
                )));
            }
        }
        let mut raw = vec![0u8; (range.end - range.start) * 4];
        read_exact(&mut r, &mut raw)?;
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            params[range.start + i] = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Backbone::from_parts(cfg, params)
}
