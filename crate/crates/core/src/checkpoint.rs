//! The `DSEG1` tensor container: magic, little-endian u64 header length, a
//! JSON header, then a contiguous little-endian payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{BnRunningStats, DType, Float, Tensor};

pub const MAGIC: &[u8; 5] = b"DSEG1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Little-endian element bytes.
    pub bytes: Vec<u8>,
}

impl NamedTensor {
    pub fn from_floats<T: Float>(name: impl Into<String>, shape: Vec<usize>, data: &[T]) -> Self {
        Self {
            name: name.into(),
            dtype: T::DTYPE,
            shape,
            bytes: T::to_le_bytes_vec(data),
        }
    }

    pub fn from_u64(name: impl Into<String>, data: &[u64]) -> Self {
        Self {
            name: name.into(),
            dtype: DType::U64,
            shape: vec![data.len()],
            bytes: data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    /// Element values, converted between float widths when needed.
    pub fn to_floats<T: Float>(&self) -> Result<Vec<T>> {
        match self.dtype {
            DType::F32 => Ok(f32::from_le_bytes_slice(&self.bytes).into_iter().map(|v| T::of(v as f64)).collect()),
            DType::F64 => Ok(f64::from_le_bytes_slice(&self.bytes).into_iter().map(T::of).collect()),
            DType::U64 => Err(Error::Checkpoint(format!("`{}` holds integers, not floats", self.name))),
        }
    }

    pub fn to_u64(&self) -> Result<Vec<u64>> {
        if self.dtype != DType::U64 {
            return Err(Error::Checkpoint(format!("`{}` does not hold integers", self.name)));
        }
        Ok(self
            .bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    pub fn to_tensor<T: Float>(&self) -> Result<Tensor<T>> {
        Tensor::new(self.shape.clone(), self.to_floats()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    metadata: Value,
    tensors: Vec<TensorEntry>,
}

/// Metadata plus named tensors, in the order they are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub metadata: Value,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn new(metadata: Value) -> Self {
        Self {
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Checkpoint(format!("duplicate tensor `{}`", t.name)));
            }
            let expected = t.shape.iter().product::<usize>() * t.dtype.size_bytes();
            if expected != t.bytes.len() {
                return Err(Error::Checkpoint(format!("`{}`: {} bytes for shape {:?}", t.name, t.bytes.len(), t.shape)));
            }
            entries.push(TensorEntry {
                name: t.name.clone(),
                dtype: t.dtype,
                shape: t.shape.clone(),
                byte_offset: offset,
                byte_length: t.bytes.len() as u64,
            });
            offset += t.bytes.len() as u64;
        }
        let header = serde_json::to_vec(&Header {
            version: FORMAT_VERSION,
            metadata: self.metadata.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("missing DSEG1 magic"));
        }
        let len_at = MAGIC.len();
        let header_len = u64::from_le_bytes(bytes[len_at..len_at + 8].try_into().expect("8 bytes")) as usize;
        let header_end = (len_at + 8)
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[len_at + 8..header_end])?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
        }
        let payload = &bytes[header_end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let start = e.byte_offset as usize;
            let end = start
                .checked_add(e.byte_length as usize)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| Error::Checkpoint(format!("`{}` runs past the payload", e.name)))?;
            if e.shape.iter().product::<usize>() * e.dtype.size_bytes() != e.byte_length as usize {
                return Err(Error::Checkpoint(format!("`{}` length does not match its shape", e.name)));
            }
            tensors.push(NamedTensor {
                name: e.name,
                dtype: e.dtype,
                shape: e.shape,
                bytes: payload[start..end].to_vec(),
            });
        }
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    /// Writes through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn bn_tensors<T: Float>(layer: &str, stats: &BnRunningStats<T>) -> [NamedTensor; 3] {
    let c = stats.channels();
    [
        NamedTensor::from_floats(format!("{layer}/running_mean"), vec![c], &stats.running_mean),
        NamedTensor::from_floats(format!("{layer}/running_var"), vec![c], &stats.running_var),
        NamedTensor::from_u64(format!("{layer}/num_batches_tracked"), &[stats.num_batches_tracked]),
    ]
}

/// Model weights and BN buffers; the model config goes under `metadata.model`.
pub fn model_container<T: Float>(model: &Model<T>, mut metadata: BTreeMap<String, Value>) -> Result<Container> {
    metadata.insert("model".into(), serde_json::to_value(model.config())?);
    let mut c = Container::new(Value::Object(metadata.into_iter().collect()));
    for p in model.params.iter() {
        c.tensors.push(NamedTensor::from_floats(p.name.clone(), p.value.shape().to_vec(), p.value.data()));
    }
    for (layer, bn) in model.bn_layers() {
        c.tensors.extend(bn_tensors(layer, &bn.stats));
    }
    Ok(c)
}

pub fn save_model<T: Float>(path: &Path, model: &Model<T>, metadata: BTreeMap<String, Value>) -> Result<()> {
    model_container(model, metadata)?.save(path)
}

pub fn model_from_container<T: Float>(c: &Container) -> Result<Model<T>> {
    let config: ModelConfig = serde_json::from_value(
        c.metadata
            .get("model")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("metadata has no model config".into()))?,
    )?;
    let mut model = Model::<T>::build_two_stream(&config, 0)?;
    let mut state = model.state();
    for (name, value) in state.params.iter_mut() {
        let t = c.get(name)?.to_tensor::<T>()?;
        if t.shape() != value.shape() {
            return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, expected {:?}", t.shape(), value.shape())));
        }
        *value = t;
    }
    for (layer, stats) in state.bn.iter_mut() {
        let mean = c.get(&format!("{layer}/running_mean"))?.to_floats::<T>()?;
        let var = c.get(&format!("{layer}/running_var"))?.to_floats::<T>()?;
        let tracked = c.get(&format!("{layer}/num_batches_tracked"))?.to_u64()?;
        if mean.len() != stats.channels() || var.len() != stats.channels() || tracked.len() != 1 {
            return Err(Error::Checkpoint(format!("BN `{layer}` buffers do not match the model")));
        }
        stats.running_mean = mean;
        stats.running_var = var;
        stats.num_batches_tracked = tracked[0];
    }
    model.load_state(&state)?;
    Ok(model)
}

pub fn load_model<T: Float>(path: &Path) -> Result<(Model<T>, Value)> {
    let c = Container::load(path)?;
    let model = model_from_container(&c)?;
    Ok((model, c.metadata))
}
