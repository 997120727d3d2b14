//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SPG1" | version u32 | variant u8 (0 base, 1 dropout chain, 2 depth chain)
//! T u32 | D u32 | V u32
//! n_params u64, then per parameter:
//!     name_len u64 | name bytes | rank u64 | dims u64 x rank | values f64 x numel
//! n_sections u64, then per section:
//!     key_len u64 | key bytes | payload_len u64 | payload bytes
//! ```
//!
//! Sections appear in a fixed order: `arch` and `trp` (JSON), `optimizer`
//! (binary moments), `rng` and `progress` (JSON), `config` (echo text).
//! Absent parts are simply left out.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{OptimizerHyper, OptimizerKind, OptimizerState, ParamStore, RngStream, Tensor};
use crate::error::{Result, SpgError};
use crate::io::{ByteReader, ByteWriter};
use crate::trp::{ArchSpec, SpgModel, TrpConfig, TrpVariant};

pub const MAGIC: &[u8; 4] = b"SPG1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub counter: u64,
}

impl RngState {
    pub fn of(rng: &RngStream) -> Self {
        RngState {
            seed: rng.seed(),
            stream: rng.stream(),
            counter: rng.counter(),
        }
    }

    pub fn reopen(&self) -> RngStream {
        RngStream::at(self.seed, self.stream, self.counter)
    }
}

/// Position in the training schedule: `batch` batches of epoch `epoch` are done.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub batch: usize,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchSpec,
    pub trp: Option<TrpConfig>,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<RngState>,
    pub progress: Option<Progress>,
    pub config_echo: String,
}

impl Checkpoint {
    pub fn from_model(model: &SpgModel) -> Self {
        Checkpoint {
            arch: model.arch().clone(),
            trp: model.trp().cloned(),
            params: model.store().clone(),
            optimizer: None,
            rng: None,
            progress: None,
            config_echo: String::new(),
        }
    }

    pub fn model(&self) -> Result<SpgModel> {
        SpgModel::with_params(self.arch.clone(), self.trp.clone(), self.params.clone())
    }

    pub fn variant_tag(&self) -> u8 {
        match self.trp.as_ref().map(|t| &t.variant) {
            None => 0,
            Some(TrpVariant::HpoDropout { .. }) => 1,
            Some(TrpVariant::NasDepth { .. }) => 2,
        }
    }

    pub fn is_stripped(&self) -> bool {
        self.trp.is_none()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u8(self.variant_tag());
        let depth = self.trp.as_ref().map_or(0, |t| t.depth);
        for v in [depth, self.arch.width(), self.arch.classes] {
            w.u32(u32::try_from(v).map_err(|_| SpgError::Format("header field exceeds u32".into()))?);
        }
        w.u64(self.params.len() as u64);
        for (name, t) in self.params.iter() {
            w.blob(name.as_bytes());
            w.u64(t.rank() as u64);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data());
        }

        let mut sections: Vec<(&str, Vec<u8>)> = vec![("arch", serde_json::to_vec(&self.arch)?)];
        if let Some(trp) = &self.trp {
            sections.push(("trp", serde_json::to_vec(trp)?));
        }
        if let Some(opt) = &self.optimizer {
            sections.push(("optimizer", encode_optimizer(opt)));
        }
        if let Some(rng) = &self.rng {
            sections.push(("rng", serde_json::to_vec(rng)?));
        }
        if let Some(p) = &self.progress {
            sections.push(("progress", serde_json::to_vec(p)?));
        }
        sections.push(("config", self.config_echo.as_bytes().to_vec()));
        w.u64(sections.len() as u64);
        for (key, payload) in sections {
            w.blob(key.as_bytes());
            w.blob(&payload);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(SpgError::Format(format!("bad magic {magic:?}, expected \"SPG1\"")));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(SpgError::Format(format!(
                "checkpoint format version {version} is not supported (this build reads {FORMAT_VERSION})"
            )));
        }
        let tag = r.u8()?;
        let (depth, width, classes) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);

        let n = r.usize()?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = String::from_utf8(r.blob()?.to_vec())
                .map_err(|_| SpgError::Format("parameter name is not UTF-8".into()))?;
            let rank = r.usize()?;
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| SpgError::Format("parameter size overflow".into()))?;
            let t = Tensor::new(shape, r.f64s(numel)?).map_err(|e| SpgError::Format(e.to_string()))?;
            params.add(name, t).map_err(|e| SpgError::Format(e.to_string()))?;
        }

        let mut arch = None;
        let mut trp = None;
        let mut optimizer = None;
        let mut rng = None;
        let mut progress = None;
        let mut config_echo = String::new();
        let sections = r.usize()?;
        for _ in 0..sections {
            let key = r.blob()?;
            let payload = r.blob()?;
            match key {
                b"arch" => arch = Some(serde_json::from_slice::<ArchSpec>(payload)?),
                b"trp" => trp = Some(serde_json::from_slice::<TrpConfig>(payload)?),
                b"optimizer" => optimizer = Some(decode_optimizer(payload)?),
                b"rng" => rng = Some(serde_json::from_slice(payload)?),
                b"progress" => progress = Some(serde_json::from_slice(payload)?),
                b"config" => {
                    config_echo = String::from_utf8(payload.to_vec())
                        .map_err(|_| SpgError::Format("config echo is not UTF-8".into()))?
                }
                other => {
                    return Err(SpgError::Format(format!(
                        "unknown section {}",
                        String::from_utf8_lossy(other)
                    )))
                }
            }
        }
        r.expect_end()?;

        let arch = arch.ok_or_else(|| SpgError::Format("missing arch section".into()))?;
        let ckpt = Checkpoint {
            arch,
            trp,
            params,
            optimizer,
            rng,
            progress,
            config_echo,
        };
        let header_depth = ckpt.trp.as_ref().map_or(0, |t| t.depth);
        if tag != ckpt.variant_tag() || depth != header_depth || width != ckpt.arch.width() || classes != ckpt.arch.classes {
            return Err(SpgError::Format(format!(
                "header (variant {tag}, T={depth}, D={width}, V={classes}) disagrees with the stored architecture"
            )));
        }
        // rebuilding the model validates names and shapes
        ckpt.model().map_err(|e| SpgError::Format(e.to_string()))?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| SpgError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SpgError::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn encode_optimizer(opt: &OptimizerState) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u8(match opt.kind {
        OptimizerKind::Sgd => 0,
        OptimizerKind::AdamW => 1,
    });
    let h = opt.hyper;
    w.f64s(&[h.lr, h.beta1, h.beta2, h.eps, h.weight_decay]);
    w.u64(opt.step);
    w.u64(opt.first_moment.len() as u64);
    for (m, v) in opt.first_moment.iter().zip(&opt.second_moment) {
        w.u64(m.len() as u64);
        w.f64s(m);
        w.f64s(v);
    }
    w.finish()
}

fn decode_optimizer(bytes: &[u8]) -> Result<OptimizerState> {
    let mut r = ByteReader::new(bytes);
    let kind = match r.u8()? {
        0 => OptimizerKind::Sgd,
        1 => OptimizerKind::AdamW,
        k => return Err(SpgError::Format(format!("unknown optimizer tag {k}"))),
    };
    let h = r.f64s(5)?;
    let hyper = OptimizerHyper {
        lr: h[0],
        beta1: h[1],
        beta2: h[2],
        eps: h[3],
        weight_decay: h[4],
    };
    let step = r.u64()?;
    let n = r.usize()?;
    let mut first_moment = Vec::with_capacity(n);
    let mut second_moment = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.usize()?;
        first_moment.push(r.f64s(len)?);
        second_moment.push(r.f64s(len)?);
    }
    r.expect_end()?;
    Ok(OptimizerState {
        kind,
        hyper,
        step,
        first_moment,
        second_moment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::TaskSpec;

    fn sample() -> Checkpoint {
        let spec = TaskSpec::pattern_preset(0);
        let mut model = SpgModel::new(spec.reference_arch(), 1).unwrap();
        model.attach(TrpConfig::hpo(vec![0.2, 0.1], 32, 12).unwrap(), 2).unwrap();
        let mut c = Checkpoint::from_model(&model);
        c.optimizer = Some(OptimizerState::new(OptimizerKind::AdamW, OptimizerHyper::default(), model.store()));
        c.rng = Some(RngState {
            seed: 1,
            stream: 1,
            counter: 77,
        });
        c.progress = Some(Progress {
            epoch: 2,
            batch: 3,
            steps: 40,
        });
        c.config_echo = "[run]\nseed = 1\n".into();
        c
    }

    #[test]
    fn byte_identical_round_trip() {
        let c = sample();
        let a = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), a);
    }

    #[test]
    fn wrong_magic_and_version() {
        let mut a = sample().to_bytes().unwrap();
        a[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&a), Err(SpgError::Format(_))));
        let mut b = sample().to_bytes().unwrap();
        b[4] = 9;
        let err = Checkpoint::from_bytes(&b).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn truncation_detected() {
        let a = sample().to_bytes().unwrap();
        for cut in [3, 20, a.len() / 2, a.len() - 1] {
            assert!(Checkpoint::from_bytes(&a[..cut]).is_err());
        }
    }

    #[test]
    fn stripped_variant_tag() {
        let c = sample();
        let stripped = Checkpoint::from_model(&c.model().unwrap().strip().unwrap());
        assert_eq!(stripped.variant_tag(), 0);
        assert_eq!(c.variant_tag(), 1);
        let bytes = stripped.to_bytes().unwrap();
        assert_eq!(bytes[8], 0);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), stripped);
    }
}
