//! Checkpoint archive.
//!
//! A checkpoint is an uncompressed tar file with three members:
//!
//! | member                 | content                                             |
//! |------------------------|-----------------------------------------------------|
//! | `meta.json`            | format version, training config, step, epoch, seed  |
//! | `params.safetensors`   | every model variable, keyed by its dotted name      |
//! | `optimizer.safetensors`| Adam moments, `generator.*` and `discriminator.*`   |
//!
//! The sampler state is implied by `(seed, step)`: batch `step` is drawn
//! from a generator keyed on exactly those two numbers.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, View};
use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::tensor_bytes;

pub const FORMAT_VERSION: u32 = 1;
const META: &str = "meta.json";
const PARAMS: &str = "params.safetensors";
const OPTIMIZER: &str = "optimizer.safetensors";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: TrainConfig,
    /// Optimizer steps completed; the next batch is drawn for this step.
    pub step: u64,
    /// Epochs completed.
    pub epoch: u64,
    pub seed: u64,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Vec<(String, Tensor)>,
}

struct Bytes {
    dtype: Dtype,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl Bytes {
    fn new(t: &Tensor) -> Result<Self> {
        Ok(Self {
            dtype: Dtype::try_from(t.kind())?,
            shape: t.size().iter().map(|&d| d as usize).collect(),
            data: tensor_bytes(t),
        })
    }
}

impl View for &Bytes {
    fn dtype(&self) -> Dtype {
        self.dtype
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.data)
    }
    fn data_len(&self) -> usize {
        self.data.len()
    }
}

fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let owned: Vec<(String, Bytes)> = tensors
        .iter()
        .map(|(n, t)| Ok((n.clone(), Bytes::new(t)?)))
        .collect::<Result<_>>()?;
    let views: Vec<(&str, &Bytes)> = owned.iter().map(|(n, b)| (n.as_str(), b)).collect();
    safetensors::serialize(views, &None).map_err(|e| Error::Checkpoint(format!("safetensors: {e}")))
}

fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(format!("safetensors: {e}")))?;
    let mut out: Vec<(String, Tensor)> = st
        .tensors()
        .into_iter()
        .map(|(name, view)| Ok((name, Tensor::try_from(view)?)))
        .collect::<Result<_>>()?;
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

fn append(builder: &mut tar::Builder<Vec<u8>>, name: &str, data: &[u8]) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_cksum();
    builder
        .append_data(&mut header, name, data)
        .map_err(|e| Error::Checkpoint(format!("writing `{name}`: {e}")))
}

impl Checkpoint {
    /// Archive bytes; identical inputs give identical bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = tar::Builder::new(Vec::new());
        append(&mut b, META, serde_json::to_string_pretty(&self.meta)?.as_bytes())?;
        append(&mut b, PARAMS, &encode(&self.params)?)?;
        append(&mut b, OPTIMIZER, &encode(&self.optimizer)?)?;
        b.into_inner().map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut members: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        let mut archive = tar::Archive::new(bytes);
        let entries = archive
            .entries()
            .map_err(|e| Error::Checkpoint(format!("not a checkpoint archive: {e}")))?;
        for entry in entries {
            let mut entry = entry.map_err(|e| Error::Checkpoint(e.to_string()))?;
            let name = entry
                .path()
                .map_err(|e| Error::Checkpoint(e.to_string()))?
                .to_string_lossy()
                .into_owned();
            let mut data = Vec::new();
            entry
                .read_to_end(&mut data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            members.insert(name, data);
        }
        let member = |name: &str| {
            members
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("archive lacks `{name}`")))
        };
        let meta: CheckpointMeta = serde_json::from_slice(member(META)?)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                meta.format_version
            )));
        }
        Ok(Self {
            meta,
            params: decode(member(PARAMS)?)?,
            optimizer: decode(member(OPTIMIZER)?)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
