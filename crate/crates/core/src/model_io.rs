//! `LGMM` model files.
//!
//! Layout (little-endian): magic `LGMM`, u16 version, the architecture
//! (u8 mode, u32 gap, u32 horizons, u32 embedding dim, u32 layers, u32
//! heads, u32 feed-forward dim, u32 kernel, u8 stage count + u32 widths,
//! 3 × u32 target dims, u8 plane count + u8 plane codes), then the
//! parameter table: u32 count and per parameter a u16 name length, the
//! UTF-8 name `plane/param`, u8 rank, u32 dims and f64 values.

use std::fs;
use std::path::Path;

use crate::aggregator::Mode;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PlaneModel};
use crate::multiplane::{RiskModel, TriPlaneModel};
use crate::numerics::{ParamStore, Tensor};
use crate::volume::Plane;

pub const MODEL_MAGIC: &[u8; 4] = b"LGMM";
pub const MODEL_VERSION: u16 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::contract(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn model_to_bytes(model: &RiskModel) -> Result<Vec<u8>> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.push(cfg.mode.code());
    for v in [
        cfg.gap,
        cfg.horizons,
        cfg.encoder.embed_dim(),
        cfg.layers,
        cfg.heads,
        cfg.ffn_dim,
        cfg.encoder.kernel,
    ] {
        put_u32(&mut out, v)?;
    }
    out.push(u8::try_from(cfg.encoder.widths.len()).map_err(|_| Error::contract("too many stages"))?);
    for &w in &cfg.encoder.widths {
        put_u32(&mut out, w)?;
    }
    for d in cfg.target_dims {
        put_u32(&mut out, d)?;
    }
    let planes = model.plane_models();
    out.push(planes.len() as u8);
    out.extend(planes.iter().map(|m| m.plane().code()));

    let count: usize = planes.iter().map(|m| m.store().len()).sum();
    put_u32(&mut out, count)?;
    for m in planes {
        for (_, name, tensor) in m.store().iter() {
            let full = format!("{}/{name}", m.plane());
            let len = u16::try_from(full.len()).map_err(|_| Error::contract(format!("name `{full}` too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(full.as_bytes());
            out.push(tensor.rank() as u8);
            for &d in tensor.dims() {
                put_u32(&mut out, d)?;
            }
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<RiskModel> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
        return Err(r.fail("missing LGMM magic"));
    }
    r.pos = 4;
    let version = r.u16("version")?;
    if version != MODEL_VERSION {
        r.pos -= 2;
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let code = r.u8("mode")?;
    let mode = Mode::from_code(code).ok_or_else(|| {
        r.pos -= 1;
        r.fail(format!("unknown mode code {code}"))
    })?;
    let gap = r.u32("gap")?;
    let horizons = r.u32("horizons")?;
    let embed = r.u32("embedding dim")?;
    let layers = r.u32("layers")?;
    let heads = r.u32("heads")?;
    let ffn_dim = r.u32("feed-forward dim")?;
    let kernel = r.u32("kernel")?;
    let stages = r.u8("stage count")? as usize;
    let widths = (0..stages).map(|_| r.u32("stage width")).collect::<Result<Vec<_>>>()?;
    let target_dims = [r.u32("target dims")?, r.u32("target dims")?, r.u32("target dims")?];
    let config = ModelConfig {
        encoder: EncoderConfig { widths, kernel },
        layers,
        heads,
        ffn_dim,
        horizons,
        mode,
        gap,
        target_dims,
    };
    if config.encoder.embed_dim() != embed {
        return Err(r.fail(format!(
            "embedding dim {embed} disagrees with final stage width {}",
            config.encoder.embed_dim()
        )));
    }
    let plane_count = r.u8("plane count")? as usize;
    let mut planes = Vec::with_capacity(plane_count);
    for _ in 0..plane_count {
        let code = r.u8("plane code")?;
        let plane = Plane::from_code(code).ok_or_else(|| r.fail(format!("unknown plane code {code}")))?;
        if planes.contains(&plane) {
            return Err(r.fail(format!("plane {plane} listed twice")));
        }
        planes.push(plane);
    }
    if plane_count != 1 && plane_count != 3 {
        return Err(r.fail(format!("{plane_count} planes; expected 1 or 3")));
    }

    let mut stores: Vec<ParamStore> = planes.iter().map(|_| ParamStore::new()).collect();
    let count = r.u32("parameter count")?;
    for _ in 0..count {
        let start = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| Error::Format {
            offset: start as u64 + 2,
            detail: "parameter name is not UTF-8".into(),
        })?;
        let (plane, local) = name
            .split_once('/')
            .and_then(|(p, rest)| Some((p.parse::<Plane>().ok()?, rest)))
            .ok_or_else(|| Error::Format {
                offset: start as u64,
                detail: format!("parameter `{name}` lacks a plane prefix"),
            })?;
        let slot = planes.iter().position(|&p| p == plane).ok_or_else(|| Error::Format {
            offset: start as u64,
            detail: format!("parameter `{name}` belongs to an undeclared plane"),
        })?;
        let rank = r.u8("rank")? as usize;
        let dims = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= (bytes.len() - r.pos) / 8)
            .ok_or_else(|| r.fail(format!("parameter `{name}` dims {dims:?} exceed the file")))?;
        let data = (0..numel).map(|_| r.f64("values")).collect::<Result<Vec<_>>>()?;
        let tensor = Tensor::new(dims, data).map_err(|e| Error::Format {
            offset: start as u64,
            detail: e.to_string(),
        })?;
        if stores[slot].find(local).is_some() {
            return Err(Error::Format {
                offset: start as u64,
                detail: format!("duplicate parameter `{name}`"),
            });
        }
        stores[slot].add(local, tensor);
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let models = planes
        .into_iter()
        .zip(stores)
        .map(|(plane, store)| PlaneModel::from_store(&config, plane, store))
        .collect::<Result<Vec<_>>>()?;
    if models.len() == 1 {
        Ok(RiskModel::Single(models.into_iter().next().unwrap()))
    } else {
        Ok(RiskModel::Tri(TriPlaneModel::from_planes(models)?))
    }
}

pub fn save_model(model: &RiskModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<RiskModel> {
    let path = path.as_ref();
    model_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                widths: vec![2, 4],
                kernel: 3,
            },
            layers: 1,
            heads: 2,
            ffn_dim: 8,
            horizons: 3,
            mode: Mode::Logo,
            gap: 2,
            target_dims: [6, 8, 8],
        }
    }

    #[test]
    fn single_and_tri_plane_round_trip() {
        let single = RiskModel::Single(PlaneModel::new(&config(), Plane::Sagittal, 4).unwrap());
        let bytes = model_to_bytes(&single).unwrap();
        assert_eq!(model_from_bytes(&bytes).unwrap(), single);
        let tri = RiskModel::Tri(TriPlaneModel::new(&config(), 4).unwrap());
        let bytes = model_to_bytes(&tri).unwrap();
        assert_eq!(model_from_bytes(&bytes).unwrap(), tri);
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let single = RiskModel::Single(PlaneModel::new(&config(), Plane::Axial, 4).unwrap());
        let bytes = model_to_bytes(&single).unwrap();
        assert!(matches!(model_from_bytes(b"LGMR\x01\x00"), Err(Error::Format { offset: 0, .. })));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(model_from_bytes(cut), Err(Error::Format { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            model_from_bytes(&extra),
            Err(Error::Format { offset, .. }) if offset == bytes.len() as u64
        ));
        let mut bad_version = bytes;
        bad_version[4] = 9;
        assert!(matches!(model_from_bytes(&bad_version), Err(Error::Format { offset: 4, .. })));
    }
}
