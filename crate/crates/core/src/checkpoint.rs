//! Binary model container.
//!
//! Layout: the magic bytes `TRNL`, a little-endian `u32` version, a `u32`
//! header length, a JSON header, then the raw little-endian body. The body
//! holds, for planes XY, XZ, YZ in turn, the LL band followed by
//! LH, HL, HH of every level from coarse to fine (each band row-major HWC),
//! then every MLP layer's weights (input-major) and bias, density layers
//! before color layers.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldConfig, MlpWeights};
use crate::geom::Aabb;
use crate::triplane::TriNeRFLet;
use crate::wavelet::{FilterKind, WaveletPyramid};

pub const MAGIC: &[u8; 4] = b"TRNL";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub n_ll: usize,
    pub levels: usize,
    pub channels: usize,
    pub filter: FilterKind,
    pub bbox: Aabb,
    pub field: FieldConfig,
    pub dtype: Dtype,
}

pub fn write_to<W: Write>(model: &TriNeRFLet, mut w: W, dtype: Dtype) -> Result<()> {
    let header = Header {
        n_ll: model.n_ll(),
        levels: model.depth(),
        channels: model.channels(),
        filter: model.filter(),
        bbox: model.bbox(),
        field: model.mlp().config,
        dtype,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut body = Vec::new();
    for slice in body_slices(model) {
        for &v in slice {
            match dtype {
                Dtype::F32 => body.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => body.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    w.write_all(&body)?;
    Ok(())
}

fn body_slices(model: &TriNeRFLet) -> Vec<&[f64]> {
    let mut out: Vec<&[f64]> = Vec::new();
    for p in model.pyramids() {
        out.extend(p.slices());
    }
    out.extend(model.mlp().slices());
    out
}

pub fn read_from<R: Read>(mut r: R) -> Result<TriNeRFLet> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    read_exact(&mut r, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    read_exact(&mut r, &mut word, "header length")?;
    let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
    read_exact(&mut r, &mut json, "header")?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    if header.n_ll == 0 || header.channels == 0 {
        return Err(Error::Checkpoint("header has empty planes".into()));
    }
    let mut pyramids: [WaveletPyramid; 3] = std::array::from_fn(|_| {
        WaveletPyramid::zeros(header.n_ll, header.channels, header.levels, header.filter)
    });
    let mut mlp = MlpWeights::zeros(header.field, 3 * header.channels);
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    let total: usize = pyramids.iter().map(|p| p.coefficient_count()).sum::<usize>() + mlp.param_count();
    let expected = total * header.dtype.size();
    if body.len() != expected {
        return Err(Error::Checkpoint(format!(
            "body has {} bytes, header implies {expected}",
            body.len()
        )));
    }
    let mut values = body.chunks_exact(header.dtype.size()).map(|b| match header.dtype {
        Dtype::F32 => f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
        Dtype::F64 => f64::from_le_bytes(b.try_into().expect("8 bytes")),
    });
    let mut fill = |dst: &mut [f64]| {
        for d in dst.iter_mut() {
            *d = values.next().expect("length checked");
        }
    };
    for p in &mut pyramids {
        fill(p.ll.data_mut());
        for l in &mut p.levels {
            for b in l.bands_mut() {
                fill(b.data_mut());
            }
        }
    }
    for s in mlp.slices_mut() {
        fill(s);
    }
    TriNeRFLet::from_parts(pyramids, header.bbox, mlp).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint while reading {what}: {e}")))
}

pub fn save(model: &TriNeRFLet, path: &Path, dtype: Dtype) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_to(model, &mut w, dtype)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TriNeRFLet> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    read_from(std::io::BufReader::new(file))
}
