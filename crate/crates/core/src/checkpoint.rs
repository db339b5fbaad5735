//! Portable checkpoint files: named little-endian f64 arrays with shapes.
//!
//! Layout: magic `TWMLCKPT`, u32 version, u32 metadata length, metadata
//! JSON, u32 array count, then per array: u32 name length, UTF-8 name,
//! u32 rank, u64 per dimension, and the values.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::FileFormatError;
use crate::nn::Mlp;
use crate::policy::PolicyNet;
use crate::vehicle::ScenarioKind;

pub const MAGIC: &[u8; 8] = b"TWMLCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub scenario: ScenarioKind,
    pub obs_len: usize,
    pub hidden_units: usize,
    pub num_layers: usize,
    /// Agent-steps consumed by the policy when saved.
    pub step: u64,
    /// Policy index (race slot; 0 for intersection).
    pub policy: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<NamedArray>,
}

fn mlp_arrays(prefix: &str, m: &Mlp, out: &mut Vec<NamedArray>) {
    let sizes = m.sizes();
    let mut off = 0;
    for (l, w) in sizes.windows(2).enumerate() {
        let (i, o) = (w[0], w[1]);
        out.push(NamedArray {
            name: format!("{prefix}.{l}.weight"),
            shape: vec![i, o],
            data: m.params[off..off + i * o].to_vec(),
        });
        off += i * o;
        out.push(NamedArray {
            name: format!("{prefix}.{l}.bias"),
            shape: vec![o],
            data: m.params[off..off + o].to_vec(),
        });
        off += o;
    }
}

fn fill_mlp(prefix: &str, m: &mut Mlp, arrays: &[NamedArray]) -> Result<(), FileFormatError> {
    let sizes = m.sizes().to_vec();
    let mut off = 0;
    for (l, w) in sizes.windows(2).enumerate() {
        for (suffix, shape) in [("weight", vec![w[0], w[1]]), ("bias", vec![w[1]])] {
            let name = format!("{prefix}.{l}.{suffix}");
            let a = arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| FileFormatError::Invalid(format!("checkpoint lacks array `{name}`")))?;
            if a.shape != shape {
                return Err(FileFormatError::Invalid(format!("`{name}` has shape {:?}, expected {shape:?}", a.shape)));
            }
            m.params[off..off + a.data.len()].copy_from_slice(&a.data);
            off += a.data.len();
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_policy(net: &PolicyNet, step: u64, policy: usize) -> Self {
        let (hidden_units, num_layers) = net.hidden();
        let mut arrays = Vec::new();
        mlp_arrays("actor", &net.actor, &mut arrays);
        mlp_arrays("critic", &net.critic, &mut arrays);
        Self {
            meta: CheckpointMeta {
                scenario: net.scenario,
                obs_len: net.obs_len(),
                hidden_units,
                num_layers,
                step,
                policy,
            },
            arrays,
        }
    }

    pub fn to_policy(&self) -> Result<PolicyNet, FileFormatError> {
        let m = &self.meta;
        let mut net = PolicyNet::zeros(m.obs_len, m.scenario, m.hidden_units, m.num_layers);
        fill_mlp("actor", &mut net.actor, &self.arrays)?;
        fill_mlp("critic", &mut net.critic, &self.arrays)?;
        Ok(net)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), FileFormatError> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| FileFormatError::Invalid(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for a in &self.arrays {
            w.write_all(&(a.name.len() as u32).to_le_bytes())?;
            w.write_all(a.name.as_bytes())?;
            w.write_all(&(a.shape.len() as u32).to_le_bytes())?;
            for d in &a.shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(8 * a.data.len());
            for v in &a.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, FileFormatError> {
        fn u32_of<R: Read>(r: &mut R) -> Result<u32, FileFormatError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        fn bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>, FileFormatError> {
            if n > 1 << 30 {
                return Err(FileFormatError::Invalid(format!("implausible length {n}")));
            }
            let mut b = vec![0u8; n];
            r.read_exact(&mut b)?;
            Ok(b)
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(FileFormatError::Invalid("not a checkpoint file (bad magic)".into()));
        }
        let version = u32_of(&mut r)?;
        if version != VERSION {
            return Err(FileFormatError::Invalid(format!("unsupported checkpoint version {version}")));
        }
        let n = u32_of(&mut r)? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(&bytes(&mut r, n)?).map_err(|e| FileFormatError::Invalid(format!("checkpoint metadata: {e}")))?;
        let count = u32_of(&mut r)?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let n = u32_of(&mut r)? as usize;
            let name = String::from_utf8(bytes(&mut r, n)?).map_err(|e| FileFormatError::Invalid(e.to_string()))?;
            let rank = u32_of(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let len: usize = shape.iter().product();
            let raw = bytes(&mut r, 8 * len)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            arrays.push(NamedArray { name, shape, data });
        }
        Ok(Self { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<(), FileFormatError> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, FileFormatError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Load a policy network from a checkpoint file.
pub fn load_policy(path: &Path) -> Result<PolicyNet, FileFormatError> {
    Checkpoint::load(path)?.to_policy()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn roundtrip_is_exact() {
        let mut rng = crate::SimRng::seed_from_u64(9);
        let net = PolicyNet::new(14, ScenarioKind::Coop, 16, 3, &mut rng);
        let ck = Checkpoint::from_policy(&net, 1234, 0);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_policy().unwrap(), net);
        assert_eq!(&buf[..8], MAGIC);
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        let net = PolicyNet::zeros(4, ScenarioKind::Race, 3, 1);
        let mut buf = Vec::new();
        Checkpoint::from_policy(&net, 0, 1).write_to(&mut buf).unwrap();
        assert!(Checkpoint::read_from(&buf[..buf.len() - 3]).is_err());
        assert!(Checkpoint::read_from(&b"NOTACKPTxxxxxxxx"[..]).is_err());
    }
}
