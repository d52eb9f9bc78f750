//! Dataset directory: `samples.bin` plus the generating spec in `spec.toml`.
//!
//! `samples.bin` layout, all integers and floats little-endian:
//!
//! | field    | type        |
//! |----------|-------------|
//! | magic    | `b"GMTLDATA"` |
//! | version  | u32 = 1     |
//! | count    | u64         |
//! | channels, height, width | 3 × u32 |
//! | labels per sample | u32 |
//! | per sample: pixels | `C·H·W` × f64 |
//! | per sample: labels | `K` × u8 (0/1) |

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, Sample, SyntheticSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SAMPLES_FILE: &str = "samples.bin";
pub const SPEC_FILE: &str = "spec.toml";
const MAGIC: &[u8; 8] = b"GMTLDATA";
const VERSION: u32 = 1;

pub fn save_dataset<T: Scalar>(dir: impl AsRef<Path>, data: &Dataset<T>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join(SPEC_FILE), data.spec.to_toml())?;
    let mut w = BufWriter::new(fs::File::create(dir.join(SAMPLES_FILE))?);
    let [c, h, wd] = data.spec.image_shape();
    let k = data.spec.grouping.num_attributes();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(data.samples.len() as u64).to_le_bytes())?;
    for d in [c, h, wd, k] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for s in &data.samples {
        for v in s.image.data() {
            w.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
        w.write_all(&s.labels)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_dataset<T: Scalar>(dir: impl AsRef<Path>) -> Result<Dataset<T>> {
    let dir = dir.as_ref();
    let spec = SyntheticSpec::load(&fs::read_to_string(dir.join(SPEC_FILE))?)?;
    let mut r = BufReader::new(fs::File::open(dir.join(SAMPLES_FILE))?);
    let mut magic = [0; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a sample container".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported sample container version {version}")));
    }
    let mut nb = [0; 8];
    r.read_exact(&mut nb)?;
    let count = u64::from_le_bytes(nb) as usize;
    let dims = [read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?].map(|d| d as usize);
    let k = read_u32(&mut r)? as usize;
    if dims != spec.image_shape() || k != spec.grouping.num_attributes() {
        return Err(Error::Format(format!(
            "container holds {dims:?} images with {k} labels; spec says {:?} with {}",
            spec.image_shape(),
            spec.grouping.num_attributes()
        )));
    }
    let numel: usize = dims.iter().product();
    let mut pix = vec![0u8; numel * 8];
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut pix)?;
        let values = pix
            .chunks_exact(8)
            .map(|b| T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect();
        let mut labels = vec![0u8; k];
        r.read_exact(&mut labels)?;
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Format("label byte is not 0 or 1".into()));
        }
        samples.push(Sample {
            image: Tensor::new(dims.to_vec(), values)?,
            labels,
        });
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format("trailing bytes after the last sample".into()));
    }
    Ok(Dataset { spec, samples })
}
