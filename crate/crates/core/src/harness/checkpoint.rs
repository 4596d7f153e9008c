//! `MTCK` checkpoints: named little-endian `f64` tensors.
//!
//! Layout: magic, `u32` version, `u32` tensor count, then per tensor
//! `u32` name length, name bytes, `u32` ndim, `u64` dims, `f64` data.
//! Model parameters come first under their own names, followed by
//! `adam.m.<name>`, `adam.v.<name>`, `meta.step` and `meta.config` (the
//! training config as JSON, one byte per element).

use std::fs;
use std::path::Path;

use super::optim::AdamW;
use super::train::{TrainConfig, Trained};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"MTCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_trained(t: &Trained) -> Self {
        let mut tensors = Vec::new();
        for (_, name, p) in t.store.iter() {
            tensors.push((name.to_string(), Tensor::new(p.shape(), p.data().to_vec()).expect("same shape")));
        }
        for (prefix, moments) in [("adam.m.", &t.optim.m), ("adam.v.", &t.optim.v)] {
            for ((_, name, _), m) in t.store.iter().zip(moments.iter()) {
                tensors.push((format!("{prefix}{name}"), m.clone()));
            }
        }
        tensors.push(("meta.step".into(), Tensor::scalar(t.optim.step as f64)));
        let json = t.config.to_json().into_bytes();
        let n = json.len();
        tensors.push((
            "meta.config".into(),
            Tensor::new(&[n], json.into_iter().map(f64::from).collect()).expect("1-d"),
        ));
        Self {
            version: VERSION,
            tensors,
        }
    }

    fn find(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))
    }

    pub fn config(&self) -> Result<TrainConfig> {
        let bytes = self
            .find("meta.config")?
            .data()
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(Error::format("checkpoint", "meta.config holds a non-byte value"))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        let text = String::from_utf8(bytes).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        TrainConfig::from_json(&text)
    }

    pub fn step(&self) -> Result<u64> {
        let v = self.find("meta.step")?.data()[0];
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::format("checkpoint", format!("bad step {v}")));
        }
        Ok(v as u64)
    }

    /// Rebuilds the model from the config echo and overwrites every parameter
    /// and moment with the stored values.
    pub fn restore(&self) -> Result<Trained> {
        let config = self.config()?;
        let mut t = Trained::init(&config)?;
        let expected = 3 * t.store.len() + 2;
        if self.tensors.len() != expected {
            return Err(Error::format(
                "checkpoint",
                format!("{} tensors, model expects {expected}", self.tensors.len()),
            ));
        }
        let ids: Vec<_> = t.store.ids().collect();
        let mut optim = AdamW::new(&t.store, config.weight_decay);
        for (k, id) in ids.into_iter().enumerate() {
            let name = t.store.name(id).to_string();
            let copy = |dst: &mut Tensor, src_name: &str| -> Result<()> {
                let src = self.find(src_name)?;
                if src.shape() != dst.shape() {
                    return Err(Error::format(
                        "checkpoint",
                        format!("{src_name} has shape {:?}, model expects {:?}", src.shape(), dst.shape()),
                    ));
                }
                dst.data_mut().copy_from_slice(src.data());
                Ok(())
            };
            copy(t.store.get_mut(id), &name)?;
            copy(&mut optim.m[k], &format!("adam.m.{name}"))?;
            copy(&mut optim.v[k], &format!("adam.v.{name}"))?;
        }
        optim.step = self.step()?;
        t.optim = optim;
        Ok(t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("checkpoint", "missing MTCK magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::format("checkpoint", format!("tensor {name} overruns the file")))?;
            let data = r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(Error::format("checkpoint", format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { version, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format("checkpoint", "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::TrackData;
    use crate::harness::synth::{synth_sequence, SynthConfig};
    use crate::harness::train::train;
    use crate::numerics::Graph;

    fn trained() -> (Trained, TrackData) {
        let cfg = TrainConfig {
            d_model: 8,
            d_inner: 16,
            d_state: 2,
            head_hidden: 4,
            steps: 2,
            batch_size: 1,
            log_every: 0,
            ..TrainConfig::default()
        };
        let seq = synth_sequence(&SynthConfig {
            frames: 5,
            ..SynthConfig::default()
        })
        .unwrap();
        let d = TrackData::new(seq, &cfg.model()).unwrap();
        (train(&cfg, std::slice::from_ref(&d)).unwrap(), d)
    }

    #[test]
    fn round_trip_restores_bitwise_forward() {
        let (t, d) = trained();
        let ck = Checkpoint::from_trained(&t);
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        let r = back.restore().unwrap();
        assert_eq!(r.config, t.config);
        assert_eq!(r.optim, t.optim);
        let w = TrackData::window(&t.model.cfg, &d.seq.gt[2]).unwrap();
        let input = d.input(2, &w).unwrap();
        let run = |t: &Trained| {
            let mut g = Graph::new();
            let out = t.model.forward(&mut g, &t.store, &input, &mut t.model.new_state()).unwrap();
            g.value(out.head.score).to_vec()
        };
        let (a, b) = (run(&t), run(&r));
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn header_layout() {
        let (t, _) = trained();
        let bytes = Checkpoint::from_trained(&t).encode();
        assert_eq!(&bytes[..4], b"MTCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(count, 3 * t.store.len() + 2);
        let first = t.store.name(t.store.ids().next().unwrap());
        let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[16..16 + len], first.as_bytes());
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let (t, _) = trained();
        let bytes = Checkpoint::from_trained(&t).encode();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        let mut trailing = bytes.clone();
        trailing.push(0);
        for b in [&bad_magic[..], &bytes[..bytes.len() - 3], &trailing[..], &[]] {
            assert!(matches!(Checkpoint::decode(b), Err(Error::Format { .. })));
        }
        let mut ck = Checkpoint::from_trained(&t);
        ck.tensors.remove(0);
        assert!(matches!(ck.restore(), Err(Error::Format { .. })));
    }
}
