//! Flat parameter files.
//!
//! Layout: an 8-byte little-endian header length, a JSON header of that many
//! bytes, then every tensor's values in little-endian order. Offsets in the
//! header are relative to the start of the data section.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Architecture, Model, VariantConfig};
use crate::error::{Error, Result};
use crate::params::{Builder, ParamStore};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MANIFEST_FORMAT: &str = "s2a-params";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub trainable: bool,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub dtype: DType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<VariantConfig>,
    pub tensors: Vec<TensorEntry>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn write_manifest<T: Scalar, W: Write>(store: &ParamStore<T>, config: Option<&VariantConfig>, mut out: W) -> Result<()> {
    let mut data = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for (_, name, entry) in store.iter() {
        let offset = data.len() as u64;
        for &v in entry.tensor.data() {
            v.write_le(&mut data);
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: entry.tensor.shape().to_vec(),
            dtype: T::DTYPE,
            trainable: entry.trainable,
            offset,
            nbytes: data.len() as u64 - offset,
        });
    }
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.to_string(),
        version: MANIFEST_VERSION,
        dtype: T::DTYPE,
        config: config.cloned(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| format_err(e.to_string()))?;
    let io = |e: std::io::Error| format_err(e.to_string());
    out.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&json).map_err(io)?;
    out.write_all(&data).map_err(io)?;
    Ok(())
}

pub fn read_manifest<T: Scalar, R: Read>(mut input: R) -> Result<(ParamStore<T>, ManifestHeader)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(|e| format_err(e.to_string()))?;
    let len_bytes: [u8; 8] = bytes.get(..8).and_then(|b| b.try_into().ok()).ok_or_else(|| format_err("truncated header length"))?;
    let header_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| format_err("header length too large"))?;
    let body = &bytes[8..];
    let json = body.get(..header_len).ok_or_else(|| format_err("truncated header"))?;
    let header: ManifestHeader = serde_json::from_slice(json).map_err(|e| format_err(format!("bad header: {e}")))?;
    if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
        return Err(format_err(format!("unsupported manifest {} v{}", header.format, header.version)));
    }
    if header.dtype != T::DTYPE {
        return Err(format_err(format!("manifest holds {} values, expected {}", header.dtype, T::DTYPE)));
    }
    let data = &body[header_len..];
    let width = T::DTYPE.size_in_bytes();
    let mut store = ParamStore::new();
    for e in &header.tensors {
        let numel: usize = e.shape.iter().product();
        if e.dtype != T::DTYPE || e.nbytes != (numel * width) as u64 {
            return Err(format_err(format!("{}: size or dtype disagrees with shape {:?}", e.name, e.shape)));
        }
        let start = usize::try_from(e.offset).map_err(|_| format_err("offset too large"))?;
        let raw = data.get(start..start + numel * width).ok_or_else(|| format_err(format!("{}: data out of bounds", e.name)))?;
        let values = raw.chunks_exact(width).map(T::read_le).collect();
        store.insert(&e.name, Tensor::new(&e.shape, values)?, e.trainable)?;
    }
    Ok((store, header))
}

impl<T: Scalar> Model<T> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path.as_ref()).map_err(|e| format_err(e.to_string()))?;
        let mut w = std::io::BufWriter::new(file);
        write_manifest(&self.store, Some(self.config()), &mut w)?;
        w.flush().map_err(|e| format_err(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref()).map_err(|e| format_err(e.to_string()))?;
        let (store, header) = read_manifest(std::io::BufReader::new(file))?;
        let config = header.config.ok_or_else(|| format_err("manifest carries no model config"))?;
        Self::from_store(&config, store)
    }

    /// Attaches `store` to the architecture of `config` after checking that
    /// names, shapes and trainability line up.
    pub fn from_store(config: &VariantConfig, store: ParamStore<T>) -> Result<Self> {
        let mut layout = ParamStore::<T>::new();
        let arch = Architecture::build(&mut Builder::new(&mut layout, 0), config)?;
        if layout.len() != store.len() {
            return Err(format_err(format!("expected {} tensors, found {}", layout.len(), store.len())));
        }
        for ((_, a, ea), (_, b, eb)) in layout.iter().zip(store.iter()) {
            if a != b || ea.tensor.shape() != eb.tensor.shape() || ea.trainable != eb.trainable {
                return Err(format_err(format!("tensor {b} {:?} does not match {a} {:?}", eb.tensor.shape(), ea.tensor.shape())));
            }
        }
        Ok(Self { arch, store })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::build_variant;

    fn bits<T: Scalar>(s: &ParamStore<T>) -> Vec<Vec<u8>> {
        s.iter()
            .map(|(_, _, e)| {
                let mut b = Vec::new();
                e.tensor.data().iter().for_each(|v| v.write_le(&mut b));
                b
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let model = build_variant::<f32>(&VariantConfig::toy([1, 1, 1, 1], 5), 3).unwrap();
        let mut buf = Vec::new();
        write_manifest(&model.store, Some(model.config()), &mut buf).unwrap();
        let (store, header) = read_manifest::<f32, _>(buf.as_slice()).unwrap();
        assert_eq!(bits(&store), bits(&model.store));
        let back = Model::from_store(header.config.as_ref().unwrap(), store).unwrap();
        assert_eq!(back.param_count(), model.param_count());
    }

    #[test]
    fn dtype_mismatch_and_truncation_rejected() {
        let model = build_variant::<f64>(&VariantConfig::toy([1, 0, 0, 0], 2), 0).unwrap();
        let mut buf = Vec::new();
        write_manifest(&model.store, None, &mut buf).unwrap();
        assert!(matches!(read_manifest::<f32, _>(buf.as_slice()), Err(Error::Format(_))));
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_manifest::<f64, _>(buf.as_slice()), Err(Error::Format(_))));
    }
}
