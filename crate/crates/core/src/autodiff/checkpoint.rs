//! Versioned binary checkpoints.
//!
//! Layout (all integers `u32`, all floats `f32`, little-endian):
//!
//! ```text
//! magic      8 bytes  "ADVSEGCK"
//! version    u32      currently 1
//! kind       u32      1 = segmentation model, 2 = decoder
//! n_int      u32      followed by n_int u32 metadata values
//! n_float    u32      followed by n_float f32 metadata values
//! n_tensor   u32      followed by n_tensor records:
//!     rows   u32
//!     cols   u32
//!     flags  u32      bit 0 = frozen
//!     data   rows*cols f32, row-major
//! ```
//!
//! The meaning of the metadata values depends on `kind`; see the `save`
//! methods of the model types.

use std::fs;
use std::path::Path;

use super::net::{Dense, FeatureRecipe, ParamTensor, Parameterized, SegModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ADVSEGCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum CheckpointKind {
    Segmentation = 1,
    Decoder = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub ints: Vec<u32>,
    pub floats: Vec<f32>,
    pub tensors: Vec<ParamTensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let mut put = |v: u32| out.extend_from_slice(&v.to_le_bytes());
        put(VERSION);
        put(self.kind as u32);
        put(self.ints.len() as u32);
        for &i in &self.ints {
            put(i);
        }
        put(self.floats.len() as u32);
        for &f in &self.floats {
            put(f.to_bits());
        }
        put(self.tensors.len() as u32);
        for t in &self.tensors {
            put(t.rows as u32);
            put(t.cols as u32);
            put(u32::from(t.frozen));
            for &v in &t.data {
                put(v.to_bits());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |m: &str| Error::Format {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint (bad magic)"));
        }
        let mut pos = 8;
        let mut word = || -> Result<u32> {
            let w = bytes
                .get(pos..pos + 4)
                .ok_or_else(|| fail("truncated checkpoint"))?;
            pos += 4;
            Ok(u32::from_le_bytes(w.try_into().unwrap()))
        };
        let version = word()?;
        if version != VERSION {
            return Err(fail(&format!("unsupported checkpoint version {version}")));
        }
        let kind = match word()? {
            1 => CheckpointKind::Segmentation,
            2 => CheckpointKind::Decoder,
            k => return Err(fail(&format!("unknown checkpoint kind {k}"))),
        };
        let n_int = word()? as usize;
        let ints = (0..n_int).map(|_| word()).collect::<Result<Vec<_>>>()?;
        let n_float = word()? as usize;
        let floats = (0..n_float)
            .map(|_| word().map(f32::from_bits))
            .collect::<Result<Vec<_>>>()?;
        let n_tensor = word()? as usize;
        let mut tensors = Vec::with_capacity(n_tensor);
        for _ in 0..n_tensor {
            let rows = word()? as usize;
            let cols = word()? as usize;
            let flags = word()?;
            let data = (0..rows * cols)
                .map(|_| word().map(f32::from_bits))
                .collect::<Result<Vec<_>>>()?;
            tensors.push(ParamTensor {
                rows,
                cols,
                data,
                frozen: flags & 1 == 1,
            });
        }
        if word().is_ok() {
            return Err(fail("trailing bytes after last tensor"));
        }
        Ok(Self {
            kind,
            ints,
            floats,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn expect_kind(&self, kind: CheckpointKind, path: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("expected {kind:?} checkpoint, found {:?}", self.kind),
            });
        }
        Ok(())
    }
}

/// Segmentation checkpoints carry ints `[num_classes, knn]` and floats
/// `[coord_scale]`; tensors alternate weight, bias per layer.
impl SegModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::Segmentation,
            ints: vec![self.num_classes as u32, self.recipe.knn as u32],
            floats: vec![self.recipe.coord_scale as f32],
            tensors: self.params().into_iter().cloned().collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self> {
        ck.expect_kind(CheckpointKind::Segmentation, path)?;
        let bad = |m: &str| Error::Format {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        if ck.ints.len() != 2 || ck.floats.len() != 1 {
            return Err(bad("segmentation metadata has the wrong length"));
        }
        if ck.tensors.is_empty() || ck.tensors.len() % 2 != 0 {
            return Err(bad("segmentation tensors must come in weight/bias pairs"));
        }
        let layers = ck
            .tensors
            .chunks(2)
            .map(|wb| Dense {
                weight: wb[0].clone(),
                bias: wb[1].clone(),
            })
            .collect();
        let model = SegModel {
            layers,
            num_classes: ck.ints[0] as usize,
            recipe: FeatureRecipe {
                knn: ck.ints[1] as usize,
                coord_scale: ck.floats[0] as f64,
            },
        };
        model.validate().map_err(|e| bad(&e.to_string()))?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}
