//! Binary checkpoints.
//!
//! ```text
//! "FBNC" | version u32 | fingerprint [32] | count u32 |
//!   count x (name_len u16 | name | ndim u8 | dims u32... | f32 payload) |
//! crc32 u32 of everything before it
//! ```
//!
//! All integers and floats are little-endian. Non-float state (the network
//! description, counters, RNG position) is stored in tensors whose elements
//! are exact small integers.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{FeedbackNet, FeedbackNetSpec};
use crate::tensor::tape::RunningStats;
use crate::tensor::{Rng, Sgd};

pub const MAGIC: &[u8; 4] = b"FBNC";
pub const VERSION: u32 = 1;

const SPEC_KEY: &str = "meta.spec";
const EPOCH_KEY: &str = "meta.epoch";
const RNG_KEY: &str = "meta.rng";
const VELOCITY_PREFIX: &str = "opt.velocity.";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: [u8; 32],
    pub tensors: Vec<NamedTensor>,
}

/// SHA-256 of the canonical network description.
pub fn fingerprint(spec: &FeedbackNetSpec) -> [u8; 32] {
    Sha256::digest(spec.to_text().as_bytes()).into()
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks tensor `{name}`")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Checkpoint(format!("tensor name of {} bytes is too long", name.len())))?;
            let ndim = u8::try_from(t.shape.len())
                .map_err(|_| Error::Checkpoint(format!("`{}` has too many dimensions", t.name)))?;
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Checkpoint(format!("`{}`: shape and payload disagree", t.name)));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(ndim);
            for &d in &t.shape {
                let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("`{}`: dimension too large", t.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format(0, "bad magic; not a checkpoint file"));
        }
        let version = r.u32("format version")?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported format version {version}")));
        }
        let fingerprint: [u8; 32] = r.take(32, "fingerprint")?.try_into().expect("32 bytes");
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::format(at + 2, "tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.take(1, "ndim")?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4).map(|_| n))
                .ok_or_else(|| Error::format(at, format!("`{name}`: dimensions overflow")))?;
            let payload = r.take(numel * 4, "tensor payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        let body_end = r.pos;
        let stored = r.u32("checksum")?;
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes after the checksum"));
        }
        let actual = crc32fast::hash(&bytes[..body_end]);
        if stored != actual {
            return Err(Error::format(
                body_end,
                format!("checksum mismatch (stored {stored:08x}, computed {actual:08x})"),
            ));
        }
        Ok(Checkpoint { fingerprint, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::decode(&std::fs::read(path)?)
    }

    /// Network description stored in the checkpoint, checked against the
    /// fingerprint.
    pub fn spec(&self) -> Result<FeedbackNetSpec> {
        let bytes = small_ints(self.require(SPEC_KEY)?)?
            .into_iter()
            .map(|v| u8::try_from(v).map_err(|_| Error::Checkpoint("corrupt network description".into())))
            .collect::<Result<Vec<u8>>>()?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Checkpoint("network description is not UTF-8".into()))?;
        let spec = FeedbackNetSpec::from_text(&text)?;
        if fingerprint(&spec) != self.fingerprint {
            return Err(Error::Checkpoint("stored description does not match the fingerprint".into()));
        }
        Ok(spec)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn int_tensor(name: impl Into<String>, values: Vec<u32>) -> NamedTensor {
    NamedTensor {
        name: name.into(),
        shape: vec![values.len()],
        data: values.into_iter().map(|v| v as f32).collect(),
    }
}

fn small_ints(t: &NamedTensor) -> Result<Vec<u32>> {
    t.data
        .iter()
        .map(|&v| {
            if (0.0..=65535.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u32)
            } else {
                Err(Error::Checkpoint(format!("`{}` holds a non-integer value {v}", t.name)))
            }
        })
        .collect()
}

/// Wide integers split into 16-bit limbs, least significant first, so each
/// limb is exact in an `f32`.
fn limbs(value: u128, count: usize) -> Vec<u32> {
    (0..count).map(|i| ((value >> (16 * i)) & 0xFFFF) as u32).collect()
}

fn from_limbs(t: &NamedTensor) -> Result<u128> {
    Ok(small_ints(t)?
        .iter()
        .enumerate()
        .fold(0u128, |acc, (i, &l)| acc | (u128::from(l) << (16 * i))))
}

/// Everything needed to resume training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: FeedbackNet<f32>,
    pub optimizer: Sgd<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Stream used for batch order and augmentation.
    pub rng: Rng,
}

impl TrainState {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let net = &self.net;
        let spec_text = net.spec.to_text();
        let mut tensors = vec![
            int_tensor(SPEC_KEY, spec_text.bytes().map(u32::from).collect()),
            int_tensor(EPOCH_KEY, limbs(self.epoch as u128, 4)),
            int_tensor(
                RNG_KEY,
                limbs(u128::from(self.rng.seed()), 4)
                    .into_iter()
                    .chain(limbs(self.rng.position(), 8))
                    .collect(),
            ),
        ];
        for (name, t) in net.params.iter() {
            tensors.push(NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            });
        }
        for (_, layer) in net.conv_layers() {
            let base = layer_name(net, layer.weight);
            for (t, s) in layer.stats.iter().enumerate() {
                let c = s.mean.len();
                tensors.push(NamedTensor {
                    name: format!("{base}.bn.running_mean.{t}"),
                    shape: vec![c],
                    data: s.mean.clone(),
                });
                tensors.push(NamedTensor {
                    name: format!("{base}.bn.running_var.{t}"),
                    shape: vec![c],
                    data: s.var.clone(),
                });
                tensors.push(int_tensor(format!("{base}.bn.updates.{t}"), limbs(u128::from(s.updates), 4)));
            }
        }
        for (id, v) in net.params.ids().zip(self.optimizer.velocities()) {
            tensors.push(NamedTensor {
                name: format!("{VELOCITY_PREFIX}{}", net.params.name(id)),
                shape: net.params.get(id).shape().to_vec(),
                data: v.clone(),
            });
        }
        Checkpoint {
            fingerprint: fingerprint(&net.spec),
            tensors,
        }
    }

    /// Rebuilds the network described by the checkpoint and loads every
    /// stored tensor into it.
    pub fn from_checkpoint(ckpt: &Checkpoint, momentum: f64, weight_decay: f64) -> Result<Self> {
        let spec = ckpt.spec()?;
        let net = FeedbackNet::new(spec, 0)?;
        let mut state = TrainState {
            net,
            optimizer: Sgd::new(momentum, weight_decay),
            epoch: 0,
            rng: Rng::new(0),
        };
        state.restore(ckpt)?;
        Ok(state)
    }

    /// Overwrites this state with the checkpoint's contents. The
    /// architecture fingerprints must agree.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.fingerprint != fingerprint(&self.net.spec) {
            return Err(Error::Checkpoint(
                "architecture fingerprint mismatch: the checkpoint was written by a different network".into(),
            ));
        }
        let mut known = std::collections::HashSet::new();
        known.extend([SPEC_KEY, EPOCH_KEY, RNG_KEY].map(String::from));

        let ids: Vec<_> = self.net.params.ids().collect();
        for &id in &ids {
            let name = self.net.params.name(id).to_string();
            let t = ckpt.require(&name)?;
            let param = self.net.params.get_mut(id);
            if t.shape != param.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?} in the checkpoint but {:?} in the network",
                    t.shape,
                    param.shape()
                )));
            }
            param.data_mut().copy_from_slice(&t.data);
            param.grad = None;
            known.insert(name);
        }

        let bases: Vec<String> = self
            .net
            .conv_layers()
            .iter()
            .map(|(_, l)| layer_name(&self.net, l.weight))
            .collect();
        for (layer, base) in self.net.conv_layers_mut().into_iter().zip(bases) {
            layer.stats.clear();
            for t in 0.. {
                let Some(mean) = ckpt.get(&format!("{base}.bn.running_mean.{t}")) else { break };
                let var = ckpt.require(&format!("{base}.bn.running_var.{t}"))?;
                let updates = ckpt.require(&format!("{base}.bn.updates.{t}"))?;
                if var.data.len() != mean.data.len() {
                    return Err(Error::Checkpoint(format!("`{}`: length mismatch", var.name)));
                }
                layer.stats.push(RunningStats {
                    mean: mean.data.clone(),
                    var: var.data.clone(),
                    updates: from_limbs(updates)? as u64,
                });
                known.extend([mean.name.clone(), var.name.clone(), updates.name.clone()]);
            }
        }

        let mut velocities = Vec::new();
        for &id in &ids {
            let name = format!("{VELOCITY_PREFIX}{}", self.net.params.name(id));
            match ckpt.get(&name) {
                Some(v) if v.data.len() == self.net.params.get(id).numel() => {
                    velocities.push(v.data.clone());
                    known.insert(name);
                }
                Some(_) => return Err(Error::Checkpoint(format!("`{name}`: length mismatch"))),
                None => break,
            }
        }
        if !velocities.is_empty() && velocities.len() != ids.len() {
            return Err(Error::Checkpoint("optimizer state covers only some parameters".into()));
        }
        self.optimizer.set_velocities(velocities);

        self.epoch = from_limbs(ckpt.require(EPOCH_KEY)?)? as usize;
        let rng = ckpt.require(RNG_KEY)?;
        if rng.data.len() != 12 {
            return Err(Error::Checkpoint("malformed RNG state".into()));
        }
        let (seed, pos) = rng.data.split_at(4);
        let seed = from_limbs(&NamedTensor { data: seed.to_vec(), ..rng.clone() })? as u64;
        let pos = from_limbs(&NamedTensor { data: pos.to_vec(), ..rng.clone() })?;
        self.rng = Rng::from_state(seed, pos);

        if let Some(extra) = ckpt.tensors.iter().find(|t| !known.contains(&t.name)) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{}`", extra.name)));
        }
        Ok(())
    }
}

fn layer_name(net: &FeedbackNet<f32>, weight: crate::tensor::ParamId) -> String {
    let name = net.params.name(weight);
    name.strip_suffix(".weight").unwrap_or(name).to_string()
}
