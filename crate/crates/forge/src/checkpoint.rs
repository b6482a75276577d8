//! Model checkpoints: `FORGECKP`, a little-endian `u64` header length, a JSON
//! header, then every parameter as little-endian `f32` in header order.

use std::io::{Read, Write};
use std::path::Path;

use forge_core::models::{Component, ComponentSet, ModelConfig, ModelState};
use forge_core::Tensor;
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 8] = b"FORGECKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint does not match its config: {0}")]
    Layout(String),
    #[error(transparent)]
    Core(#[from] forge_core::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in `f32` elements.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentEntry {
    pub component: Component,
    pub trainable: bool,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub version: u32,
    pub config: ModelConfig,
    pub components: Vec<ComponentEntry>,
    /// Total blob length in `f32` elements.
    pub blob_len: u64,
}

pub fn header_of(state: &ModelState<f32>) -> Header {
    let mut offset = 0u64;
    let components = Component::ALL
        .iter()
        .map(|&c| {
            let tensors = state
                .layout(c)
                .into_iter()
                .map(|(name, shape)| {
                    let e = TensorEntry {
                        name,
                        offset,
                        shape: shape.clone(),
                    };
                    offset += shape.iter().product::<usize>() as u64;
                    e
                })
                .collect();
            ComponentEntry {
                component: c,
                trainable: state.trainable.contains(c),
                tensors,
            }
        })
        .collect();
    Header {
        version: FORMAT_VERSION,
        config: state.config.clone(),
        components,
        blob_len: offset,
    }
}

pub fn to_bytes(state: &ModelState<f32>) -> Result<Vec<u8>, CheckpointError> {
    let header = serde_json::to_vec(&header_of(state))?;
    let mut out = Vec::with_capacity(16 + header.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for c in Component::ALL {
        state.visit(c, &mut |_, t| {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        });
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelState<f32>, CheckpointError> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > r.len() {
        return Err(CheckpointError::Layout("header runs past the end of the file".into()));
    }
    let header: Header = serde_json::from_slice(&r[..len])?;
    if header.version != FORMAT_VERSION {
        return Err(CheckpointError::Version(header.version));
    }
    let blob = &r[len..];
    if blob.len() as u64 != header.blob_len * 4 {
        return Err(CheckpointError::Layout(format!(
            "blob holds {} bytes, header declares {} floats",
            blob.len(),
            header.blob_len
        )));
    }
    // Shapes come from the config; the header must agree with them exactly.
    let mut state = ModelState::<f32>::new(header.config.clone(), 0)?;
    let expected = header_of(&state);
    let mut trainable = ComponentSet::EMPTY;
    for (got, want) in header.components.iter().zip(&expected.components) {
        if got.component != want.component || got.tensors != want.tensors {
            return Err(CheckpointError::Layout(format!(
                "component {} differs from the layout implied by its config",
                want.component.name()
            )));
        }
        if got.trainable {
            trainable.insert(got.component);
        }
    }
    if header.components.len() != expected.components.len() {
        return Err(CheckpointError::Layout("wrong number of components".into()));
    }
    let mut offset = 0usize;
    for c in Component::ALL {
        state.visit_mut(c, &mut |_, t: &mut Tensor<f32>| {
            for v in t.data_mut() {
                let b = &blob[offset * 4..offset * 4 + 4];
                *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                offset += 1;
            }
        });
    }
    state.trainable = trainable;
    Ok(state)
}

pub fn save(state: &ModelState<f32>, path: &Path) -> Result<(), CheckpointError> {
    let bytes = to_bytes(state)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelState<f32>, CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}
