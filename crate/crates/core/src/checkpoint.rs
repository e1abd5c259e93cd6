//! Binary checkpoint container.
//!
//! ```text
//! "LFCK"              4 bytes magic
//! version             u32 little-endian
//! header_len          u64 little-endian
//! header              header_len bytes of UTF-8 JSON
//! payload             raw little-endian tensor data
//! ```
//!
//! The header carries the model and tokenizer config and a tensor directory
//! (name, dtype, shape, byte offset and length into the payload). Dense
//! tensors are stored as `f32`/`f64`. Quantized tensors (`q4`/`q8`) store
//! their packed codes followed by the per-block scales and then offsets, all
//! `f64`. Adapter files use the same layout, restricted to the adapter
//! factors and the classification head.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{AdapterSpec, LoraAdapter};
use crate::model::{ModelConfig, Param, TransformerModel, Weight};
use crate::numerics::{DType, Element, Tensor};
use crate::quant::{Bits, QuantizedMatrix};
use crate::tokenizer::ByteTokenizer;

pub const MAGIC: &[u8; 4] = b"LFCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Model,
    Adapters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoredDType {
    F32,
    F64,
    Q4,
    Q8,
}

impl From<DType> for StoredDType {
    fn from(d: DType) -> Self {
        match d {
            DType::F32 => StoredDType::F32,
            DType::F64 => StoredDType::F64,
        }
    }
}

impl From<Bits> for StoredDType {
    fn from(b: Bits) -> Self {
        match b {
            Bits::Four => StoredDType::Q4,
            Bits::Eight => StoredDType::Q8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: StoredDType,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
    pub trainable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: CheckpointKind,
    pub config: ModelConfig,
    pub tokenizer: ByteTokenizer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_spec: Option<AdapterSpec>,
    pub tensors: Vec<TensorEntry>,
}

impl Header {
    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

struct Writer {
    entries: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self {
            entries: Vec::new(),
            payload: Vec::new(),
        }
    }

    fn dense<T: Element>(&mut self, name: &str, t: &Tensor<T>, trainable: bool) {
        let offset = self.payload.len();
        for &v in t.data() {
            v.write_le(&mut self.payload);
        }
        self.entries.push(TensorEntry {
            name: name.to_string(),
            dtype: T::DTYPE.into(),
            shape: t.shape().to_vec(),
            offset,
            length: self.payload.len() - offset,
            trainable,
            block_size: None,
        });
    }

    fn quantized(&mut self, name: &str, q: &QuantizedMatrix, trainable: bool) {
        let offset = self.payload.len();
        self.payload.extend_from_slice(q.codes());
        for v in q.scales().iter().chain(q.offsets()) {
            self.payload.extend_from_slice(&v.to_le_bytes());
        }
        self.entries.push(TensorEntry {
            name: name.to_string(),
            dtype: q.bits().into(),
            shape: q.shape().to_vec(),
            offset,
            length: self.payload.len() - offset,
            trainable,
            block_size: Some(q.block_size()),
        });
    }

    fn weight<T: Element>(&mut self, name: &str, p: &Param<T>) {
        match &p.weight {
            Weight::Dense(t) => self.dense(name, t, p.trainable),
            Weight::Quantized(q) => self.quantized(name, q, p.trainable),
        }
    }

    fn finish(self, header_base: Header) -> Result<Vec<u8>> {
        let header = Header {
            tensors: self.entries,
            ..header_base
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }
}

/// Splits a container into its header and payload.
pub fn parse_container(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not an LFCK checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if header_len > body.len() {
        return Err(Error::Format("header runs past end of file".into()));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let payload = &body[header_len..];
    for t in &header.tensors {
        if t.offset.checked_add(t.length).is_none_or(|end| end > payload.len()) {
            return Err(Error::Format(format!("{} runs past end of payload", t.name)));
        }
    }
    Ok((header, payload))
}

pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    let bytes = read(path.as_ref())?;
    Ok(parse_container(&bytes)?.0)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn decode_dense<T: Element>(entry: &TensorEntry, raw: &[u8]) -> Result<Tensor<T>> {
    let width = match entry.dtype {
        StoredDType::F32 => 4,
        StoredDType::F64 => 8,
        _ => unreachable!("dense dtype"),
    };
    let n: usize = entry.shape.iter().product();
    if raw.len() != n * width {
        return Err(Error::Format(format!(
            "{}: {} bytes for {n} values",
            entry.name,
            raw.len()
        )));
    }
    let data = raw
        .chunks_exact(width)
        .map(|c| match entry.dtype {
            StoredDType::F32 => T::from_f64_lossy(f64::from(f32::read_le(c))),
            _ => T::from_f64_lossy(f64::read_le(c)),
        })
        .collect();
    Tensor::new(entry.shape.clone(), data)
}

fn decode_weight<T: Element>(entry: &TensorEntry, raw: &[u8]) -> Result<Weight<T>> {
    match entry.dtype {
        StoredDType::F32 | StoredDType::F64 => Ok(Weight::Dense(decode_dense(entry, raw)?)),
        StoredDType::Q4 | StoredDType::Q8 => {
            let bits = if entry.dtype == StoredDType::Q4 {
                Bits::Four
            } else {
                Bits::Eight
            };
            let block_size = entry
                .block_size
                .ok_or_else(|| Error::Format(format!("{}: missing block_size", entry.name)))?;
            let n: usize = entry.shape.iter().product();
            let n_blocks = n.div_ceil(block_size.max(1));
            let code_len = match bits {
                Bits::Four => n.div_ceil(2),
                Bits::Eight => n,
            };
            if raw.len() != code_len + 16 * n_blocks {
                return Err(Error::Format(format!(
                    "{}: {} bytes do not match {n} codes in {n_blocks} blocks",
                    entry.name,
                    raw.len()
                )));
            }
            let floats: Vec<f64> = raw[code_len..].chunks_exact(8).map(f64::read_le).collect();
            let q = QuantizedMatrix::from_parts(
                entry.shape.clone(),
                bits,
                block_size,
                raw[..code_len].to_vec(),
                floats[..n_blocks].to_vec(),
                floats[n_blocks..].to_vec(),
            )?;
            Ok(Weight::Quantized(q))
        }
    }
}

fn slice<'a>(payload: &'a [u8], e: &TensorEntry) -> &'a [u8] {
    &payload[e.offset..e.offset + e.length]
}

/// Serializes a model's base tensors. Models with live adapters must be
/// merged first or saved with [`adapters_to_bytes`].
pub fn model_to_bytes<T: Element>(model: &TransformerModel<T>) -> Result<Vec<u8>> {
    if !model.adapters().is_empty() {
        return Err(Error::State(
            "model has unmerged adapters; merge them or save an adapter checkpoint".into(),
        ));
    }
    let mut w = Writer::new();
    for (name, p) in model.params() {
        w.weight(name, p);
    }
    w.finish(Header {
        kind: CheckpointKind::Model,
        config: model.config().clone(),
        tokenizer: *model.tokenizer(),
        adapter_spec: None,
        tensors: Vec::new(),
    })
}

pub fn model_from_bytes<T: Element>(bytes: &[u8]) -> Result<TransformerModel<T>> {
    let (header, payload) = parse_container(bytes)?;
    if header.kind != CheckpointKind::Model {
        return Err(Error::Format("expected a model checkpoint, found adapters".into()));
    }
    let mut params = BTreeMap::new();
    for e in &header.tensors {
        params.insert(
            e.name.clone(),
            Param {
                weight: decode_weight(e, slice(payload, e))?,
                trainable: e.trainable,
                decay: true,
            },
        );
    }
    TransformerModel::from_parts(header.config, header.tokenizer, params)
}

pub fn save_model<T: Element>(path: impl AsRef<Path>, model: &TransformerModel<T>) -> Result<()> {
    write(path.as_ref(), &model_to_bytes(model)?)
}

pub fn load_model<T: Element>(path: impl AsRef<Path>) -> Result<TransformerModel<T>> {
    model_from_bytes(&read(path.as_ref())?)
}

/// Serializes only the trained state: every adapter's factors plus the
/// classification head.
pub fn adapters_to_bytes<T: Element>(model: &TransformerModel<T>, spec: &AdapterSpec) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    for a in model.adapters().values() {
        w.dense(&a.a_name(), &a.a, true);
        w.dense(&a.b_name(), &a.b, true);
    }
    for name in model.head_names() {
        w.weight(name, model.param(name)?);
    }
    w.finish(Header {
        kind: CheckpointKind::Adapters,
        config: model.config().clone(),
        tokenizer: *model.tokenizer(),
        adapter_spec: Some(spec.clone()),
        tensors: Vec::new(),
    })
}

/// Attaches adapters (and the trained head) from an adapter checkpoint to
/// `base`. Every name and shape must line up; all mismatches are reported
/// together.
pub fn adapters_from_bytes<T: Element>(
    bytes: &[u8],
    mut base: TransformerModel<T>,
) -> Result<(TransformerModel<T>, AdapterSpec)> {
    let (header, payload) = parse_container(bytes)?;
    if header.kind != CheckpointKind::Adapters {
        return Err(Error::Format("expected an adapter checkpoint, found a model".into()));
    }
    let spec = header
        .adapter_spec
        .clone()
        .ok_or_else(|| Error::Format("adapter checkpoint without adapter spec".into()))?;

    let mut problems = Vec::new();
    let mut heads = Vec::new();
    let mut factors: BTreeMap<String, (Option<Tensor<T>>, Option<Tensor<T>>)> = BTreeMap::new();
    for e in &header.tensors {
        let raw = slice(payload, e);
        if let Some(target) = e.name.strip_suffix(".lora_a") {
            factors.entry(target.to_string()).or_default().0 = Some(decode_dense(e, raw)?);
        } else if let Some(target) = e.name.strip_suffix(".lora_b") {
            factors.entry(target.to_string()).or_default().1 = Some(decode_dense(e, raw)?);
        } else {
            match base.params().get(&e.name) {
                None => problems.push(format!("{}: not present in base", e.name)),
                Some(p) if p.weight.shape() != e.shape.as_slice() => problems.push(format!(
                    "{}: checkpoint shape {:?}, base shape {:?}",
                    e.name,
                    e.shape,
                    p.weight.shape()
                )),
                Some(_) => heads.push((e.name.clone(), decode_weight::<T>(e, raw)?)),
            }
        }
    }
    for name in base.head_names() {
        if header.entry(name).is_none() {
            problems.push(format!("{name}: missing from adapter checkpoint"));
        }
    }
    let mut adapters = Vec::new();
    for (target, pair) in factors {
        match pair {
            (Some(a), Some(b)) => match LoraAdapter::new(target.clone(), a, b, spec.alpha) {
                Ok(ad) => adapters.push(ad),
                Err(e) => problems.push(format!("{target}: {e}")),
            },
            _ => problems.push(format!("{target}: adapter factor missing")),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Mismatch(problems));
    }

    base.freeze_all();
    base.set_adapters(adapters)?;
    for (name, weight) in heads {
        let p = base.param_mut(&name)?;
        p.weight = weight;
        p.trainable = true;
    }
    Ok((base, spec))
}

pub fn save_adapters<T: Element>(
    path: impl AsRef<Path>,
    model: &TransformerModel<T>,
    spec: &AdapterSpec,
) -> Result<()> {
    write(path.as_ref(), &adapters_to_bytes(model, spec)?)
}

pub fn load_adapters<T: Element>(
    path: impl AsRef<Path>,
    base: TransformerModel<T>,
) -> Result<(TransformerModel<T>, AdapterSpec)> {
    adapters_from_bytes(&read(path.as_ref())?, base)
}
