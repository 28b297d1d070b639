//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "MSGATCKP"
//! version      u32
//! component    u8       0 = Y, 1 = U, 2 = V, 255 = joint
//! qp           u32      training QP, 0 when mixed
//! config_len   u32
//! config       config_len bytes of JSON
//! count        u32      number of tensors
//! count times:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   rows       u32
//!   cols       u32
//!   data       rows * cols f32 values, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::diffcore::{ParamSet, Tensor2};
use crate::error::{Error, Result};
use crate::model::{Component, ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MSGATCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

const JOINT_TAG: u8 = 255;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams<f32>,
    /// `None` for a joint model.
    pub component: Option<Component>,
    /// QP of the training data, `None` for mixed-QP training.
    pub qp: Option<u32>,
}

impl Checkpoint {
    /// Fails unless the checkpoint restores `component`.
    pub fn expect_component(&self, component: Component) -> Result<()> {
        match self.component {
            Some(c) if c == component => Ok(()),
            Some(c) => Err(Error::Checkpoint(format!(
                "component mismatch: checkpoint restores {c}, used for {component}"
            ))),
            None => Err(Error::Checkpoint(format!(
                "component mismatch: checkpoint is a joint model, used for {component}"
            ))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.model.validate()?;
        if self.model.config.joint != self.component.is_none() {
            return Err(Error::Checkpoint("component tag disagrees with the model's joint flag".into()));
        }
        let config = serde_json::to_vec(&self.model.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.component.map_or(JOINT_TAG, |c| c.index() as u8));
        out.extend_from_slice(&self.qp.unwrap_or(0).to_le_bytes());
        put_len(&mut out, config.len())?;
        out.extend_from_slice(&config);
        put_len(&mut out, self.model.params.len())?;
        for (name, t) in &self.model.params {
            put_len(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_len(&mut out, t.rows())?;
            put_len(&mut out, t.cols())?;
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let component = match r.take(1)?[0] {
            JOINT_TAG => None,
            t if (t as usize) < 3 => Some(Component::ALL[t as usize]),
            t => return Err(Error::Checkpoint(format!("corrupt file: unknown component tag {t}"))),
        };
        let qp = Some(r.u32()?).filter(|&q| q != 0);
        let len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("corrupt file: bad config: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("corrupt file: tensor name is not UTF-8".into()))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let size = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Checkpoint("corrupt file: tensor too large".into()))?;
            let data = r
                .take(size)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(name, Tensor2::from_vec(rows, cols, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("corrupt file: trailing bytes".into()));
        }
        let model = ModelParams { config, params };
        model
            .validate()
            .map_err(|e| Error::Checkpoint(format!("corrupt file: {e}")))?;
        if model.config.joint != component.is_none() {
            return Err(Error::Checkpoint("corrupt file: component tag disagrees with config".into()));
        }
        Ok(Checkpoint { model, component, qp })
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} does not fit in u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("corrupt file: truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn sample() -> Checkpoint {
        let mut model: ModelParams<f32> = build_model(&ModelConfig::tiny()).unwrap();
        model.randomize_output_layer(1);
        Checkpoint {
            model,
            component: Some(Component::U),
            qp: Some(46),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        for (name, t) in &ck.model.params {
            let b = &back.model.params[name];
            assert!(t.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 4, 8, 12, 13, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Checkpoint(_)), "{err}");
        }
    }

    #[test]
    fn version_and_component_checks() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let msg = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(msg.contains("version 7"), "{msg}");

        let ck = sample();
        assert!(ck.expect_component(Component::U).is_ok());
        let msg = ck.expect_component(Component::Y).unwrap_err().to_string();
        assert!(msg.contains("mismatch"));
    }
}
