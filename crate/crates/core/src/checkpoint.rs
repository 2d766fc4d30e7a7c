//! Versioned binary checkpoints.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! b"QDPTCKPT" | u32 version | u64 header length | header JSON | f64 payload
//! ```
//!
//! The header lists every tensor (name, shape, element offset) in name order,
//! the model config, quantizer records `(bits, mode)` and free-form metadata.
//! All floating-point values (weights, adapter scales, quantizer ranges) live
//! in the payload, so a checkpoint round-trips bit-exactly and two runs with
//! the same inputs produce identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::QuadapterParams;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, QuantizedView, ToyTransformer};
use crate::quant::{QuantMode, QuantizerState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"QDPTCKPT";
pub const VERSION: u32 = 1;

const ADAPTER_PREFIX: &str = "adapter/";
const QUANT_PREFIX: &str = "quant/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ToyTransformer,
    pub view: Option<QuantizedView>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct QuantRecord {
    bits: u32,
    mode: QuantMode,
    observed: bool,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    weight_bits: Option<u32>,
    tensors: Vec<TensorEntry>,
    quantizers: BTreeMap<String, QuantRecord>,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: ToyTransformer, view: Option<QuantizedView>) -> Self {
        Self { model, view, metadata: BTreeMap::new() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: BTreeMap<String, Tensor> = self.model.params.clone();
        let mut quantizers = BTreeMap::new();
        if let Some(view) = &self.view {
            for (site, p) in &view.adapters {
                tensors.insert(format!("{ADAPTER_PREFIX}{site}"), p.as_tensor());
            }
            for (site, q) in &view.act {
                tensors.insert(format!("{QUANT_PREFIX}{site}"), Tensor::vector(vec![q.theta_min, q.theta_max]));
                quantizers.insert(
                    site.clone(),
                    QuantRecord { bits: q.bits, mode: q.mode, observed: q.observed, frozen: q.frozen },
                );
            }
        }
        let mut entries = Vec::with_capacity(tensors.len());
        let mut payload = Vec::new();
        let mut offset = 0;
        for (name, t) in &tensors {
            entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
            offset += t.len();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            config: self.model.config.clone(),
            weight_bits: self.view.as_ref().map(|v| v.weight_bits),
            tensors: entries,
            quantizers,
            metadata: self.metadata.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])?;
        let payload = &bytes[header_end..];
        if !payload.len().is_multiple_of(8) {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();

        let mut params = BTreeMap::new();
        let mut adapters = BTreeMap::new();
        let mut ranges: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let data = values.get(e.offset..e.offset + n).ok_or_else(|| bad("tensor outside payload"))?.to_vec();
            let t = Tensor::new(&e.shape, data)?;
            if let Some(site) = e.name.strip_prefix(ADAPTER_PREFIX) {
                adapters.insert(site.to_string(), QuadapterParams { alpha: t.into_data() });
            } else if let Some(site) = e.name.strip_prefix(QUANT_PREFIX) {
                ranges.insert(site.to_string(), (t.data()[0], t.data()[1]));
            } else {
                params.insert(e.name, t);
            }
        }
        header.config.validate()?;
        let model = ToyTransformer { config: header.config, params };
        let view = match header.weight_bits {
            None => None,
            Some(weight_bits) => {
                let mut act = BTreeMap::new();
                for (site, rec) in header.quantizers {
                    let (theta_min, theta_max) =
                        ranges.remove(&site).ok_or_else(|| Error::Checkpoint(format!("missing range for {site}")))?;
                    act.insert(
                        site,
                        QuantizerState { theta_min, theta_max, bits: rec.bits, mode: rec.mode, observed: rec.observed, frozen: rec.frozen },
                    );
                }
                Some(QuantizedView { weight_bits, adapters, act })
            }
        };
        Ok(Self { model, view, metadata: header.metadata })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
