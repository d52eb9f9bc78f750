//! `model.bin`: architecture manifest plus named parameter arrays.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic            8 bytes  "GMTLMODL"
//! version          u32      (currently 1)
//! manifest length  u32
//! manifest         UTF-8 TOML: [model] config and [grouping]
//! tensor count     u32
//! per tensor:
//!   name length    u32
//!   name           UTF-8
//!   rank           u32
//!   dims           rank × u64
//!   values         numel × f64
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::AttributeGrouping;
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tape::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GMTLMODL";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    model: ModelConfig,
    grouping: AttributeGrouping,
}

pub fn write_model<T: Scalar>(w: &mut impl Write, model: &Model, params: &ParamSet<T>) -> Result<()> {
    model.check_params(params)?;
    let manifest = toml::to_string(&Manifest {
        model: model.config().clone(),
        grouping: model.grouping().clone(),
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&MODEL_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(manifest.len() as u32).to_le_bytes())?;
    w.write_all(manifest.as_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, len: usize) -> Result<String> {
    let mut b = vec![0; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format("invalid UTF-8 in model file".into()))
}

/// Reads a model, rejecting unknown versions and parameters whose names or
/// shapes disagree with the stored architecture.
pub fn read_model<T: Scalar>(r: &mut impl Read) -> Result<(Model, ParamSet<T>)> {
    let mut magic = [0; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model file".into()));
    }
    let version = read_u32(r)?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported model file version {version}")));
    }
    let len = read_u32(r)? as usize;
    let manifest: Manifest =
        toml::from_str(&read_string(r, len)?).map_err(|e| Error::Format(e.to_string()))?;
    let model = Model::new(manifest.model, manifest.grouping)?;
    let count = read_u32(r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let name = read_string(r, name_len)?;
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    let params = ParamSet::new(entries)?;
    model.check_params(&params)?;
    Ok((model, params))
}

pub fn save_model<T: Scalar>(path: impl AsRef<Path>, model: &Model, params: &ParamSet<T>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_model(&mut w, model, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<(Model, ParamSet<T>)> {
    read_model(&mut BufReader::new(fs::File::open(path)?))
}
