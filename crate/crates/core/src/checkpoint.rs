//! Binary model container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "DADU" version
//! levels base_channels dense_layers growth(0 = default) num_classes
//! input_channels supervision_paths attention(0/1)
//! param_count  { name_len name shape[4] f32 values }*
//! buffer_count { name_len name channels f32 mean[channels] f32 var[channels] }*
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{DaduModel, ModelConfig};
use crate::tensor::Real;

pub const MAGIC: &[u8; 4] = b"DADU";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

fn put_values<T: Real>(out: &mut Vec<u8>, values: &[T]) {
    for v in values {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u32()?;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))
    }

    fn values<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| T::from_f64_lossy(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect())
    }
}

pub fn to_bytes<T: Real>(model: &DaduModel<T>) -> Result<Vec<u8>> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    for v in [
        cfg.levels,
        cfg.base_channels,
        cfg.dense_layers_per_block,
        cfg.growth_rate.unwrap_or(0),
        cfg.num_classes,
        cfg.input_channels,
        cfg.supervision_paths,
        cfg.attention as usize,
    ] {
        put_u32(&mut out, v)?;
    }
    put_u32(&mut out, model.parameters().len())?;
    for p in model.parameters().iter() {
        put_name(&mut out, &p.name)?;
        for d in p.value.shape().dims() {
            put_u32(&mut out, d)?;
        }
        put_values(&mut out, p.value.values());
    }
    put_u32(&mut out, model.buffers().len())?;
    for (name, stats) in model.buffers() {
        put_name(&mut out, name)?;
        put_u32(&mut out, stats.mean.len())?;
        put_values(&mut out, &stats.mean);
        put_values(&mut out, &stats.var);
    }
    Ok(out)
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<DaduModel<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a DADU checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut f = [0usize; 8];
    for v in &mut f {
        *v = r.u32()?;
    }
    let config = ModelConfig {
        levels: f[0],
        base_channels: f[1],
        dense_layers_per_block: f[2],
        growth_rate: (f[3] != 0).then_some(f[3]),
        num_classes: f[4],
        input_channels: f[5],
        supervision_paths: f[6],
        attention: match f[7] {
            0 => false,
            1 => true,
            v => return Err(Error::Checkpoint(format!("attention flag {v}"))),
        },
    };
    let mut model = DaduModel::<T>::new(config, 0)?;

    let count = r.u32()?;
    if count != model.parameters().len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, configuration has {}",
            model.parameters().len()
        )));
    }
    for p in model.parameters_mut().iter_mut() {
        let name = r.name()?;
        if name != p.name {
            return Err(Error::Checkpoint(format!("expected `{}`, found `{name}`", p.name)));
        }
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let shape = p.value.shape();
        if dims != shape.dims() {
            return Err(Error::Checkpoint(format!(
                "`{name}` stored as {dims:?}, expected {shape}"
            )));
        }
        let values = r.values::<T>(shape.len())?;
        p.value.values_mut().copy_from_slice(&values);
    }

    let count = r.u32()?;
    if count != model.buffers().len() {
        return Err(Error::Checkpoint(format!(
            "{count} running-statistics records stored, configuration has {}",
            model.buffers().len()
        )));
    }
    for (name, stats) in model.buffers_mut() {
        let stored = r.name()?;
        if &stored != name {
            return Err(Error::Checkpoint(format!("expected `{name}`, found `{stored}`")));
        }
        let c = r.u32()?;
        if c != stats.mean.len() {
            return Err(Error::Checkpoint(format!("`{name}` has {c} channels")));
        }
        stats.mean = r.values(c)?;
        stats.var = r.values(c)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(model)
}

pub fn save<T: Real>(model: &DaduModel<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<DaduModel<T>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::Missing(path.to_path_buf()))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    from_bytes(&bytes)
}
