use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

/// Index of a parameter tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors. Registration order is the serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn shapes(&self) -> Vec<ParamShape> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| ParamShape {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
}

/// On-disk model: an 8-byte little-endian header length, a JSON header,
/// then every parameter as little-endian `f32` in registration order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub architecture: serde_json::Value,
    pub seed: u64,
    pub params: Vec<ParamShape>,
}

impl Checkpoint {
    pub fn save(path: &Path, architecture: serde_json::Value, seed: u64, params: &ParamSet) -> Result<()> {
        let header = Checkpoint {
            architecture,
            seed,
            params: params.shapes(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + 4 * params.count());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &params.tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Checkpoint, ParamSet)> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 8 {
            return Err(NnError::Checkpoint("file too short".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = bytes
            .get(8..8 + hlen)
            .ok_or_else(|| NnError::Checkpoint("truncated header".into()))?;
        let header: Checkpoint = serde_json::from_slice(body)?;
        let mut blob = &bytes[8 + hlen..];
        let mut set = ParamSet::new();
        for p in &header.params {
            let n: usize = p.shape.iter().product();
            if blob.len() < 4 * n {
                return Err(NnError::Checkpoint(format!("parameter blob ends inside `{}`", p.name)));
            }
            let data = blob[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            blob = &blob[4 * n..];
            set.add(p.name.clone(), Tensor::new(p.shape.clone(), data)?);
        }
        if !blob.is_empty() {
            return Err(NnError::Checkpoint(format!(
                "{} trailing bytes after parameters",
                blob.len()
            )));
        }
        Ok((header, set))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_f32_exact() {
        let mut set = ParamSet::new();
        set.add("w", Tensor::new(vec![2, 2], vec![0.1, -2.5, 3.0, 1e-3]).unwrap());
        set.add("b", Tensor::zeros(vec![3]));
        let dir = std::env::temp_dir().join(format!("centro-nn-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        Checkpoint::save(&path, serde_json::json!({"kind": "test"}), 7, &set).unwrap();
        let (h, back) = Checkpoint::load(&path).unwrap();
        assert_eq!(h.seed, 7);
        assert_eq!(h.architecture["kind"], "test");
        assert_eq!(back.shapes(), set.shapes());
        for id in set.ids() {
            for (a, b) in set.get(id).data().iter().zip(back.get(id).data()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
        std::fs::remove_dir_all(dir).ok();
    }
}
