//! Checkpoint serialization. Wire format, all integers little-endian:
//!
//! ```text
//! magic  "VOEN"          4 bytes
//! version u32            (currently 1)
//! stage   u8             0 = pretrain, 1 = siamese, 2 = temporal
//! seed    u64
//! count   u32            number of tensors
//! per tensor:
//!   name_len u16, name UTF-8,
//!   precision u8 (4 = f32, 8 = f64),
//!   rank u8, dims rank x u32,
//!   data: raw little-endian scalars
//! ```
//!
//! Save -> load roundtrips are bit-exact, including batch-norm running
//! statistics. Decode errors carry the byte offset they occurred at.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{EnhancerConfig, EnhancerParams, KERNEL};
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"VOEN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageTag {
    Pretrain,
    Siamese,
    Temporal,
}

impl StageTag {
    pub fn code(self) -> u8 {
        match self {
            StageTag::Pretrain => 0,
            StageTag::Siamese => 1,
            StageTag::Temporal => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(StageTag::Pretrain),
            1 => Some(StageTag::Siamese),
            2 => Some(StageTag::Temporal),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StageTag::Pretrain => "pretrain",
            StageTag::Siamese => "siamese",
            StageTag::Temporal => "temporal",
        }
    }
}

impl std::fmt::Display for StageTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub stage: StageTag,
    pub seed: u64,
    pub params: EnhancerParams<T>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Digest over the architecture (tensor names, precision and shapes);
    /// derived from the table rather than stored in the file.
    pub fn config_digest(&self) -> String {
        let mut bytes = Vec::new();
        for (name, shape, _) in self.params.named_tensors() {
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(T::PRECISION_CODE);
            for d in shape {
                bytes.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        crate::data::sha256_hex(&bytes)
    }
}

pub fn save_checkpoint<T: Scalar>(
    params: &EnhancerParams<T>,
    stage: StageTag,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(stage.code());
    buf.extend_from_slice(&seed.to_le_bytes());
    let tensors = params.named_tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(T::PRECISION_CODE);
        buf.push(shape.len() as u8);
        for d in &shape {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint: reading {what} at offset {} needs {} bytes but the file holds {}",
                self.offset,
                self.offset + n,
                self.bytes.len()
            )));
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        let mut arr = [0u8; 8];
        arr.copy_from_slice(b);
        Ok(u64::from_le_bytes(arr))
    }
}

/// Raw named tensor table plus header fields.
struct RawCheckpoint<T: Scalar> {
    stage: StageTag,
    seed: u64,
    tensors: BTreeMap<String, (Vec<usize>, Vec<T>)>,
}

fn read_raw<T: Scalar>(path: &Path) -> Result<RawCheckpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        offset: 0,
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:02x?} at offset 0 (expected \"VOEN\")"
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (supported: {VERSION})"
        )));
    }
    let stage_code = r.u8("stage tag")?;
    let stage = StageTag::from_code(stage_code).ok_or_else(|| {
        Error::Format(format!("unknown stage tag {stage_code} at offset 8"))
    })?;
    let seed = r.u64("seed")?;
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for i in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name_off = r.offset;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| {
                Error::Format(format!(
                    "tensor {i}: name at offset {name_off} is not valid UTF-8"
                ))
            })?
            .to_string();
        let precision = r.u8("precision code")?;
        if precision != T::PRECISION_CODE {
            return Err(Error::Format(format!(
                "tensor \"{name}\": precision code {precision} does not match the requested {}-bit load",
                T::PRECISION_CODE as usize * 8
            )));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let width = T::PRECISION_CODE as usize;
        let data_bytes = r.take(n * width, "tensor data")?;
        let data = data_bytes
            .chunks_exact(width)
            .map(T::from_le_slice)
            .collect();
        if tensors.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Format(format!("duplicate tensor \"{name}\"")));
        }
    }
    if r.offset != bytes.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} trailing bytes after offset {}",
            bytes.len() - r.offset,
            r.offset
        )));
    }
    Ok(RawCheckpoint {
        stage,
        seed,
        tensors,
    })
}

fn take_tensor<T: Scalar>(
    tensors: &mut BTreeMap<String, (Vec<usize>, Vec<T>)>,
    name: &str,
    shape: &[usize],
) -> Result<Vec<T>> {
    let (got_shape, data) = tensors
        .remove(name)
        .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor \"{name}\"")))?;
    if got_shape != shape {
        return Err(Error::Format(format!(
            "tensor \"{name}\": shape {got_shape:?} does not match expected {shape:?}"
        )));
    }
    Ok(data)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let mut raw = read_raw::<T>(path)?;

    // Architecture recovery: widths from the encoder conv shapes,
    // recurrence from the presence of LSTM tensors.
    let widths_of = |raw: &RawCheckpoint<T>, name: &str| -> Result<usize> {
        let (shape, _) = raw
            .tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor \"{name}\"")))?;
        if shape.len() != 4 {
            return Err(Error::Format(format!(
                "tensor \"{name}\": expected a rank-4 convolution weight, got rank {}",
                shape.len()
            )));
        }
        Ok(shape[0])
    };
    let widths = [
        widths_of(&raw, "enc0.conv.weight")?,
        widths_of(&raw, "enc1.conv.weight")?,
        widths_of(&raw, "enc2.conv.weight")?,
    ];
    let recurrent = raw.tensors.contains_key("lstm0.w_i");
    let config = EnhancerConfig { widths, recurrent };

    // Build a zero-filled skeleton and fill every tensor from the table.
    let mut params = EnhancerParams::<T>::init(&config, raw.seed)?;
    for p in params.learnable_mut() {
        p.data = take_tensor(&mut raw.tensors, &p.name.clone(), &p.shape)?;
    }
    for (i, block) in params.encoder.iter_mut().enumerate() {
        let ch = block.bn.running.mean.len();
        block.bn.running.mean =
            take_tensor(&mut raw.tensors, &format!("enc{i}.bn.running_mean"), &[ch])?;
        block.bn.running.var =
            take_tensor(&mut raw.tensors, &format!("enc{i}.bn.running_var"), &[ch])?;
    }
    for (i, block) in params.decoder.iter_mut().enumerate() {
        let ch = block.bn.running.mean.len();
        block.bn.running.mean =
            take_tensor(&mut raw.tensors, &format!("dec{i}.bn.running_mean"), &[ch])?;
        block.bn.running.var =
            take_tensor(&mut raw.tensors, &format!("dec{i}.bn.running_var"), &[ch])?;
    }
    if let Some(name) = raw.tensors.keys().next() {
        return Err(Error::Format(format!(
            "checkpoint holds unexpected tensor \"{name}\""
        )));
    }

    // Sanity: merge head must be the 2-channel 1x1 convolution.
    if params.merge.weight.shape != vec![1, 2, 1, 1] {
        return Err(Error::Format(format!(
            "merge weight shape {:?} is not [1,2,1,1]",
            params.merge.weight.shape
        )));
    }
    for block in &params.encoder {
        if block.conv.weight.shape[2] != KERNEL {
            return Err(Error::Format(
                "encoder kernels must be 5x5 in this format version".into(),
            ));
        }
    }

    Ok(Checkpoint {
        stage: raw.stage,
        seed: raw.seed,
        params,
    })
}

/// Seed and tag recorded in a checkpoint, used by `Param`-independent
/// callers (e.g. report metadata).
pub fn peek_stage(path: &Path) -> Result<(StageTag, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        offset: 0,
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (supported: {VERSION})"
        )));
    }
    let stage_code = r.u8("stage tag")?;
    let stage = StageTag::from_code(stage_code)
        .ok_or_else(|| Error::Format(format!("unknown stage tag {stage_code}")))?;
    let seed = r.u64("seed")?;
    Ok((stage, seed))
}
