//! Saving and loading trained parameters.
//!
//! Two formats, chosen by file extension: `.json` is human-readable, anything
//! else is binary (`DIRECKP1`, a little-endian `u32` header length, a JSON
//! header, then every parameter as a little-endian `f64`). Both round-trip
//! `f64` parameters bit for bit.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"DIRECKP1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub seed: u64,
    /// Epoch the parameters were taken from (0 before training).
    pub epoch: usize,
    pub blocks: Vec<BlockRecord>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, seed: u64, epoch: usize) -> Self {
        let blocks = model
            .blocks()
            .iter()
            .map(|b| BlockRecord {
                name: b.name.to_string(),
                rows: b.shape.0,
                cols: b.shape.1,
                values: b.data.iter().map(|x| x.as_f64()).collect(),
            })
            .collect();
        Self {
            spec: model.spec(),
            seed,
            epoch,
            blocks,
        }
    }

    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        let mut model = Model::<T>::zeros(&self.spec)?;
        let mut targets = model.blocks_mut();
        if targets.len() != self.blocks.len() {
            return Err(Error::Checkpoint(format!(
                "{} blocks stored, {} expected by {}",
                self.blocks.len(),
                targets.len(),
                self.spec.kind
            )));
        }
        for (dst, src) in targets.iter_mut().zip(&self.blocks) {
            if dst.name != src.name || dst.shape != (src.rows, src.cols) {
                return Err(Error::Checkpoint(format!(
                    "block {} {}x{} does not match expected {} {:?}",
                    src.name, src.rows, src.cols, dst.name, dst.shape
                )));
            }
            if src.values.len() != dst.data.len() {
                return Err(Error::Checkpoint(format!(
                    "block {} has {} values, expected {}",
                    src.name,
                    src.values.len(),
                    dst.data.len()
                )));
            }
            for (d, &s) in dst.data.iter_mut().zip(&src.values) {
                *d = T::lit(s);
            }
        }
        drop(targets);
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if is_json(path) {
            fs::write(path, serde_json::to_vec_pretty(self)?)?;
            return Ok(());
        }
        let header = Checkpoint {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockRecord { values: Vec::new(), ..b.clone() })
                .collect(),
            ..self.clone()
        };
        let header = serde_json::to_vec(&header)?;
        let len = u32::try_from(header.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
        let mut out = Vec::with_capacity(12 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&header);
        for b in &self.blocks {
            for v in &b.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if is_json(path) {
            return Ok(serde_json::from_slice(&fs::read(path)?)?);
        }
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let truncated = || Error::Checkpoint(format!("{} is truncated", path.display()));
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header = bytes.get(12..12 + len).ok_or_else(truncated)?;
        let mut ckpt: Checkpoint = serde_json::from_slice(header)?;
        let mut rest = &bytes[12 + len..];
        for b in &mut ckpt.blocks {
            let n = b.rows * b.cols;
            let chunk = rest.get(..n * 8).ok_or_else(truncated)?;
            b.values = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            rest = &rest[n * 8..];
        }
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} has {} trailing bytes", path.display(), rest.len())));
        }
        Ok(ckpt)
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

impl<T: Scalar> Model<T> {
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        Checkpoint::load(path)?.to_model()
    }

    pub fn save_checkpoint(&self, path: &Path, seed: u64, epoch: usize) -> Result<()> {
        Checkpoint::from_model(self, seed, epoch).save(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelKind, ModelSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(kind: ModelKind) -> ModelSpec {
        let mut s = ModelSpec::new(kind, 4, 3, 2, 5);
        s.hidden = 6;
        s.exposures = 4;
        s
    }

    #[test]
    fn round_trips_bit_exactly_in_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in ModelKind::all() {
            let model = Model::<f64>::init(&small(kind), &mut rng).unwrap();
            for name in ["m.json", "m.ckpt"] {
                let path = dir.path().join(name);
                model.save_checkpoint(&path, 9, 2).unwrap();
                let back = Model::<f64>::from_checkpoint(&path).unwrap();
                let a: Vec<u64> = model.flatten().iter().map(|x| x.to_bits()).collect();
                let b: Vec<u64> = back.flatten().iter().map(|x| x.to_bits()).collect();
                assert_eq!(a, b, "{kind} via {name}");
                assert_eq!(model.spec(), back.spec());
            }
        }
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"hello").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::<f64>::init(&small(ModelKind::Dire { two_matrix: false }), &mut rng).unwrap();
        model.save_checkpoint(&path, 0, 0).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::<f64>::init(&small(ModelKind::Ff), &mut rng).unwrap();
        let mut ckpt = Checkpoint::from_model(&model, 0, 0);
        ckpt.blocks[3].rows += 1;
        assert!(matches!(ckpt.to_model::<f64>(), Err(Error::Checkpoint(_))));
    }
}
