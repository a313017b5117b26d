//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"SCNC"  u32 version  u64 iteration  u8 stage
//! repeated until EOF:
//!   u32 name_len  name (UTF-8)  u32 n  u32 c  u32 h  u32 w  f32 values[n*c*h*w]
//! ```
//!
//! Besides the network parameters a checkpoint carries the optimizer
//! moments (`adam.*`) and the network configuration (`meta.network`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matching::{ShiftConvConfig, ShiftVariant};
use crate::network::{CostVolumeKind, Network, NetworkConfig};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

use super::optim::Adam;

pub const MAGIC: &[u8; 4] = b"SCNC";
pub const VERSION: u32 = 1;
const META_NETWORK: &str = "meta.network";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    /// Training stage that produced the checkpoint (1 or 2).
    pub stage: u8,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn encode_network(cfg: &NetworkConfig) -> Tensor<f32> {
    let mut v = vec![1.0, cfg.image_channels as f32];
    v.extend(cfg.feat_channels.iter().map(|&c| c as f32));
    v.push(cfg.redir_channels as f32);
    v.extend(cfg.encode_channels.iter().map(|&c| c as f32));
    v.extend(cfg.decode_channels.iter().map(|&c| c as f32));
    let s = &cfg.shift;
    v.push(s.maxdisp as f32);
    v.push(s.clue_filters as f32);
    v.push(match s.variant {
        ShiftVariant::ConvPerScaleThenConcat => 0.0,
        ShiftVariant::ConcatAllThenConv => 1.0,
    });
    v.push(s.both_directions as u8 as f32);
    v.push(s.share_weights as u8 as f32);
    v.push(match cfg.cost_volume {
        CostVolumeKind::ShiftConv => 0.0,
        CostVolumeKind::Correlation => 1.0,
    });
    v.push(cfg.refine_enabled as u8 as f32);
    v.push(cfg.small_map_scale as f32);
    let n = v.len();
    Tensor::from_vec(Shape::new(1, 1, 1, n), v).expect("length matches")
}

fn decode_network(t: &Tensor<f32>) -> Result<NetworkConfig> {
    let bad = || Error::Checkpoint(format!("malformed `{META_NETWORK}` record"));
    let v = t.data();
    if v.len() != 25 || v[0] != 1.0 || v.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
        return Err(bad());
    }
    let u: Vec<usize> = v.iter().map(|&x| x as usize).collect();
    let flag = |x: usize| match x {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(bad()),
    };
    let cfg = NetworkConfig {
        image_channels: u[1],
        feat_channels: [u[2], u[3], u[4], u[5]],
        redir_channels: u[6],
        encode_channels: [u[7], u[8], u[9], u[10]],
        decode_channels: [u[11], u[12], u[13], u[14], u[15], u[16]],
        shift: ShiftConvConfig {
            maxdisp: u[17],
            clue_filters: u[18],
            variant: if flag(u[19])? {
                ShiftVariant::ConcatAllThenConv
            } else {
                ShiftVariant::ConvPerScaleThenConcat
            },
            both_directions: flag(u[20])?,
            share_weights: flag(u[21])?,
        },
        cost_volume: if flag(u[22])? {
            CostVolumeKind::Correlation
        } else {
            CostVolumeKind::ShiftConv
        },
        refine_enabled: flag(u[23])?,
        small_map_scale: u[24],
    };
    cfg.validate().map_err(|e| Error::Checkpoint(format!("stored network config: {e}")))?;
    Ok(cfg)
}

impl Checkpoint {
    pub fn new(
        iteration: u64,
        stage: u8,
        cfg: &NetworkConfig,
        params: &ParamStore<f32>,
        adam: &Adam,
    ) -> Result<Self> {
        let mut tensors: BTreeMap<String, Tensor<f32>> =
            params.iter().map(|(k, t)| (k.clone(), t.clone())).collect();
        tensors.extend(adam.to_tensors(params)?);
        tensors.insert(META_NETWORK.to_string(), encode_network(cfg));
        Ok(Checkpoint {
            iteration,
            stage,
            tensors,
        })
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        let t = self
            .tensors
            .get(META_NETWORK)
            .ok_or_else(|| Error::Checkpoint(format!("missing `{META_NETWORK}` record")))?;
        decode_network(t)
    }

    /// Network parameters checked against the stored configuration.
    pub fn params(&self) -> Result<ParamStore<f32>> {
        let cfg = self.network_config()?;
        let mut p = ParamStore::new();
        for (k, t) in &self.tensors {
            if !k.starts_with("adam.") && !k.starts_with("meta.") {
                p.insert(k.clone(), t.clone());
            }
        }
        p.check_layout(&cfg.shapes())?;
        Ok(p)
    }

    /// Network ready for inference. Refinement is switched off for stage-1
    /// checkpoints since its parameters are still at their initial values.
    pub fn network(&self) -> Result<Network<f32>> {
        let mut cfg = self.network_config()?;
        cfg.refine_enabled &= self.stage >= 2;
        Network::from_params(cfg, self.params()?)
    }

    pub fn optimizer(&self, params: &ParamStore<f32>) -> Result<Adam> {
        Adam::from_tensors(self.tensors.iter(), params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.push(self.stage);
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for e in t.shape().0 {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let iteration = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let stage = r.take(1)?[0];
        let mut tensors = BTreeMap::new();
        while r.pos < bytes.len() {
            let at = r.pos;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint(format!("record at byte {at}: name is not UTF-8")))?
                .to_string();
            let named = |e: Error| match e {
                Error::Checkpoint(m) => Error::Checkpoint(format!("record `{name}`: {m}")),
                other => other,
            };
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32().map_err(named)? as usize;
            }
            let shape = Shape(dims);
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&c| c <= bytes.len())
                .ok_or_else(|| Error::Checkpoint(format!("record `{name}`: implausible shape {shape}")))?;
            let raw = r.take(count * 4).map_err(named)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if tensors.insert(name.clone(), Tensor::from_vec(shape, data)?).is_some() {
                return Err(Error::Checkpoint(format!("duplicate record `{name}`")));
            }
        }
        Ok(Checkpoint {
            iteration,
            stage,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let cfg = NetworkConfig::tiny();
        let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        Checkpoint::new(42, 1, &cfg, &params, &Adam::new()).unwrap()
    }

    #[test]
    fn bytes_roundtrip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.network_config().unwrap(), NetworkConfig::tiny());
        assert_eq!(back.params().unwrap().len(), NetworkConfig::tiny().layout().len());
    }

    #[test]
    fn network_config_roundtrip_variants() {
        let mut cfg = NetworkConfig::desk();
        cfg.shift.variant = ShiftVariant::ConcatAllThenConv;
        cfg.cost_volume = CostVolumeKind::Correlation;
        cfg.refine_enabled = false;
        cfg.small_map_scale = 8;
        assert_eq!(decode_network(&encode_network(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn truncation_and_magic_errors() {
        let b = sample().to_bytes();
        let err = Checkpoint::from_bytes(&b[..b.len() - 1]).unwrap_err();
        // records are written in name order, so the last one is `shift.bank0.w`
        assert!(err.to_string().contains("shift.bank0.w"), "{err}");
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_parameter_is_named() {
        let mut c = sample();
        c.tensors.remove("refine.conv3.w");
        let err = c.params().unwrap_err().to_string();
        assert!(err.contains("refine.conv3.w"), "{err}");
    }
}
