//! Binary checkpoint format.
//!
//! ```text
//! "MPDC" | version: u32 LE | header_len: u32 LE | header: JSON (header_len bytes) | payload
//! ```
//!
//! The payload is every tensor listed in `header.tensors`, in that order, as
//! little-endian `f32`. Its byte length must equal `sum(4 * product(shape))`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{NetworkSpec, Role};
use crate::data::Normalization;
use crate::error::{CheckpointError, Error, Result};
use crate::network::Network;
use crate::rng::RngState;
use crate::train::SchedulePosition;

pub const MAGIC: [u8; 4] = *b"MPDC";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchNormSettings {
    pub momentum: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub spec: NetworkSpec,
    pub role: Role,
    pub normalization: Normalization,
    pub class_weights: Vec<f64>,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub schedule_position: SchedulePosition,
    pub batchnorm: BatchNormSettings,
    pub tensors: Vec<TensorEntry>,
}

/// Weights plus everything needed to run inference or continue bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub normalization: Normalization,
    pub class_weights: Vec<f64>,
    pub epoch: usize,
    pub rng: RngState,
    pub schedule_position: SchedulePosition,
}

impl Checkpoint {
    /// A checkpoint of an untrained network, with identity normalization and unit class weights.
    pub fn fresh(network: Network<f32>) -> Self {
        let classes = network.num_classes();
        Checkpoint {
            network,
            normalization: Normalization::IDENTITY,
            class_weights: vec![1.0; classes],
            epoch: 0,
            rng: RngState::new(0),
            schedule_position: SchedulePosition::default(),
        }
    }

    pub fn role(&self) -> Role {
        self.network.spec().role
    }

    fn header(&self) -> CheckpointHeader {
        let (momentum, epsilon) = self.network.batchnorm_settings();
        CheckpointHeader {
            spec: self.network.spec().clone(),
            role: self.role(),
            normalization: self.normalization.clone(),
            class_weights: self.class_weights.clone(),
            epoch: self.epoch,
            rng: self.rng,
            schedule_position: self.schedule_position.clone(),
            batchnorm: BatchNormSettings { momentum, epsilon },
            tensors: self
                .network
                .named_tensors()
                .into_iter()
                .map(|(name, _, t)| TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let tensors = self.network.named_tensors();
        let payload: usize = tensors.iter().map(|(_, _, t)| 4 * t.len()).sum();
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, t) in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic {
                found: bytes[..bytes.len().min(4)].to_vec(),
            }
            .into());
        }
        if bytes.len() < PREAMBLE {
            return Err(truncated(PREAMBLE, bytes.len()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                found: version,
                supported: VERSION,
            }
            .into());
        }
        let header_end = PREAMBLE + word(8) as usize;
        if bytes.len() < header_end {
            return Err(truncated(header_end, bytes.len()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[PREAMBLE..header_end])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;

        let declared: usize = header.tensors.iter().map(|t| 4 * t.shape.iter().product::<usize>()).sum();
        let actual = bytes.len() - header_end;
        if actual < declared {
            return Err(truncated(header_end + declared, bytes.len()));
        }
        if actual > declared {
            return Err(CheckpointError::PayloadMismatch { declared, actual }.into());
        }

        if header.role != header.spec.role {
            return Err(CheckpointError::Header(format!(
                "role {} disagrees with the network spec ({})",
                header.role, header.spec.role
            ))
            .into());
        }
        header.normalization.validate()?;
        let mut network = Network::<f32>::zeros(header.spec.clone()).map_err(header_error)?;
        network
            .set_batchnorm(header.batchnorm.momentum, header.batchnorm.epsilon)
            .map_err(header_error)?;
        if header.class_weights.len() != network.num_classes() {
            return Err(CheckpointError::Header(format!(
                "{} class weights for a {}-class network",
                header.class_weights.len(),
                network.num_classes()
            ))
            .into());
        }
        let expected: Vec<(String, Vec<usize>)> = network
            .named_tensors()
            .into_iter()
            .map(|(n, _, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != header.tensors.len() {
            return Err(CheckpointError::Header(format!(
                "header lists {} tensors, the network has {}",
                header.tensors.len(),
                expected.len()
            ))
            .into());
        }
        let mut offset = header_end;
        for ((entry, (name, shape)), target) in header.tensors.iter().zip(&expected).zip(network.tensors_mut()) {
            if entry.name != *name || entry.shape != *shape {
                return Err(CheckpointError::Tensor {
                    name: entry.name.clone(),
                    reason: format!("expected {name} with shape {shape:?}, found shape {:?}", entry.shape),
                }
                .into());
            }
            for v in target.data_mut() {
                *v = f32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"));
                offset += 4;
            }
        }
        Ok(Checkpoint {
            network,
            normalization: header.normalization,
            class_weights: header.class_weights,
            epoch: header.epoch,
            rng: header.rng,
            schedule_position: header.schedule_position,
        })
    }
}

fn truncated(needed: usize, available: usize) -> Error {
    CheckpointError::Truncated { needed, available }.into()
}

fn header_error(e: Error) -> Error {
    CheckpointError::Header(e.to_string()).into()
}

/// Write via a temporary file in the same directory, then rename over `path`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
