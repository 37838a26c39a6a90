//! Single-file checkpoints.
//!
//! Layout: the magic bytes `GNCK`, a little-endian `u32` manifest length,
//! the JSON manifest, then every tensor's little-endian `f64` values in
//! row-major order. The manifest lists each tensor's name, dtype, shape,
//! byte offset (relative to the end of the manifest) and byte length.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::params::Params;
use crate::training::{TrainConfig, Variant};

pub const MAGIC: &[u8; 4] = b"GNCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Params,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub variant: Variant,
    pub step: usize,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    variant: Variant,
    step: usize,
    seed: u64,
    net: NetConfig,
    train: TrainConfig,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut data = Vec::new();
        for (name, arr) in self.params.iter() {
            let offset = data.len();
            for v in arr.as_standard_layout().iter() {
                data.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: name.to_string(),
                dtype: "f64".into(),
                shape: arr.shape().to_vec(),
                offset,
                nbytes: data.len() - offset,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            variant: self.variant,
            step: self.step,
            seed: self.seed,
            net: self.net.clone(),
            train: self.train.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        let mut out = Vec::with_capacity(8 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
        let bad = |m: String| Error::format(origin, m);
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let json = bytes
            .get(8..8 + len)
            .ok_or_else(|| bad(format!("manifest of {len} bytes is truncated")))?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", manifest.format_version)));
        }
        let data = &bytes[8 + len..];
        let mut params = Params::new();
        for t in &manifest.tensors {
            if t.dtype != "f64" {
                return Err(bad(format!("tensor {}: unsupported dtype {}", t.name, t.dtype)));
            }
            let count: usize = t.shape.iter().product();
            if t.nbytes != 8 * count {
                return Err(bad(format!("tensor {}: {} bytes for shape {:?}", t.name, t.nbytes, t.shape)));
            }
            let raw = data
                .get(t.offset..t.offset + t.nbytes)
                .ok_or_else(|| bad(format!("tensor {}: data truncated", t.name)))?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), values).map_err(|e| bad(format!("tensor {}: {e}", t.name)))?;
            params.insert(t.name.clone(), arr);
        }
        Ok(Checkpoint {
            params,
            net: manifest.net,
            train: manifest.train,
            variant: manifest.variant,
            step: manifest.step,
            seed: manifest.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let net = NetConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = init_params(&net, &mut rng, true).unwrap();
        // Values that do not survive a decimal round trip.
        params.get_mut("u2.conv1.bias").unwrap().mapv_inplace(|_| 0.1 + 0.2);
        params.get_mut("u1.conv3.bias").unwrap().fill(f64::MIN_POSITIVE / 3.0);
        Checkpoint {
            params,
            net,
            train: TrainConfig::default(),
            variant: Variant::TwoU,
            step: 17,
            seed: 99,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.gnck");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.variant, Variant::TwoU);
        assert_eq!((back.step, back.seed), (17, 99));
        assert_eq!(back.net, ck.net);
        assert_eq!(back.train, ck.train);
        for ((na, a), (nb, b)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()), "{na}");
        }
    }

    #[test]
    fn corrupt_files_are_rejected_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.gnck");
        std::fs::write(&path, b"NOPE").unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("bad.gnck") && err.contains("magic"), "{err}");
        let mut bytes = sample().to_bytes().unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&path, &bytes).unwrap();
        assert!(Checkpoint::load(&path).unwrap_err().to_string().contains("truncated"));
    }
}
