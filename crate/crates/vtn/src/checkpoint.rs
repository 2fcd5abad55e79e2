//! `VTNCKPT1` checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "VTNCKPT1"
//! version  u32
//! epoch    u32
//! config   u32 length + UTF-8 JSON
//! params   u32 count, then per entry:
//!            u32 name length + UTF-8 name, u8 trainable,
//!            u32 rank, rank × u32 dims, Π dims × f32
//! history  u32 count, then per epoch:
//!            u32 epoch, 6 × f64 (train task/cons/accuracy, test task/cons/accuracy)
//! ```
//!
//! Test metrics are NaN for epochs run without a test split.

use std::path::Path;

use vtn_core::model::Model;
use vtn_core::train::FitRecord;
use vtn_core::{Real, Tensor};

use crate::error::{AppError, Result};

pub const MAGIC: &[u8; 8] = b"VTNCKPT1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: u32,
    pub train_task: f64,
    pub train_cons: f64,
    pub train_accuracy: f64,
    pub test_task: f64,
    pub test_cons: f64,
    pub test_accuracy: f64,
}

impl From<&FitRecord> for HistoryRow {
    fn from(r: &FitRecord) -> Self {
        let (tt, tc, ta) = r
            .test
            .as_ref()
            .map_or((f64::NAN, f64::NAN, f64::NAN), |t| (t.task_loss, t.cons_loss, t.accuracy));
        HistoryRow {
            epoch: r.train.epoch as u32,
            train_task: r.train.task_loss,
            train_cons: r.train.cons_loss,
            train_accuracy: r.train.accuracy,
            test_task: tt,
            test_cons: tc,
            test_accuracy: ta,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    /// Epochs completed when the snapshot was taken.
    pub epoch: u32,
    /// Run configuration JSON, kept verbatim.
    pub config: String,
    pub params: Vec<ParamRecord>,
    pub history: Vec<HistoryRow>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("malformed checkpoint at byte {offset}: {kind}")]
pub struct CheckpointError {
    pub offset: usize,
    pub kind: ErrorKind,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ErrorKind {
    #[error("bad magic, expected \"VTNCKPT1\"")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated: {needed} more bytes needed for {what}")]
    Truncated { needed: usize, what: &'static str },
    #[error("{0} is not valid UTF-8")]
    BadUtf8(&'static str),
    #[error("tensor of shape {0:?} is too large")]
    BadShape(Vec<usize>),
    #[error("{0} unexpected trailing bytes")]
    Trailing(usize),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, kind: ErrorKind) -> std::result::Result<T, CheckpointError> {
        Err(CheckpointError { offset: self.pos, kind })
    }

    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        let left = self.buf.len() - self.pos;
        if n > left {
            return self.fail(ErrorKind::Truncated { needed: n - left, what });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &'static str) -> std::result::Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &'static str) -> std::result::Result<String, CheckpointError> {
        let len = self.u32(what)? as usize;
        let start = self.pos;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CheckpointError {
            offset: start,
            kind: ErrorKind::BadUtf8(what),
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    /// Snapshot of every parameter and buffer of `model`, stored as f32.
    pub fn from_model<R: Real>(model: &Model<R>, config: String, epoch: usize, history: &[FitRecord]) -> Self {
        Checkpoint {
            version: VERSION,
            epoch: epoch as u32,
            config,
            params: model
                .store
                .iter()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    trainable: p.trainable,
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().iter().map(|v| v.as_f64() as f32).collect(),
                })
                .collect(),
            history: history.iter().map(HistoryRow::from).collect(),
        }
    }

    /// Loads the parameter table into `model`; names and shapes must match.
    pub fn apply_to<R: Real>(&self, model: &mut Model<R>) -> vtn_core::Result<()> {
        let table: Vec<(String, Tensor<R>)> = self
            .params
            .iter()
            .map(|p| {
                let data = p.data.iter().map(|&v| R::from_f64(v as f64)).collect();
                Tensor::new(&p.shape, data).map(|t| (p.name.clone(), t))
            })
            .collect::<vtn_core::Result<_>>()?;
        model.store.load_from(&table)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.version);
        put_u32(&mut out, self.epoch);
        put_str(&mut out, &self.config);
        put_u32(&mut out, self.params.len() as u32);
        for p in &self.params {
            put_str(&mut out, &p.name);
            out.push(p.trainable as u8);
            put_u32(&mut out, p.shape.len() as u32);
            for &d in &p.shape {
                put_u32(&mut out, d as u32);
            }
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_u32(&mut out, self.history.len() as u32);
        for h in &self.history {
            put_u32(&mut out, h.epoch);
            for v in [h.train_task, h.train_cons, h.train_accuracy, h.test_task, h.test_cons, h.test_accuracy] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic").ok() != Some(MAGIC.as_slice()) {
            return Err(CheckpointError {
                offset: 0,
                kind: ErrorKind::BadMagic,
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            r.pos -= 4;
            return r.fail(ErrorKind::UnsupportedVersion(version));
        }
        let epoch = r.u32("epoch")?;
        let config = r.string("config")?;
        let count = r.u32("parameter count")?;
        let mut params = Vec::new();
        for _ in 0..count {
            let name = r.string("parameter name")?;
            let trainable = r.u8("trainable flag")? != 0;
            let rank = r.u32("rank")? as usize;
            let dims_at = r.pos;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4).map(|_| n));
            let Some(len) = len else {
                return Err(CheckpointError {
                    offset: dims_at,
                    kind: ErrorKind::BadShape(shape),
                });
            };
            let bytes = r.take(len * 4, "parameter data")?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            params.push(ParamRecord {
                name,
                trainable,
                shape,
                data,
            });
        }
        let rows = r.u32("history length")?;
        let mut history = Vec::new();
        for _ in 0..rows {
            history.push(HistoryRow {
                epoch: r.u32("history epoch")?,
                train_task: r.f64("history")?,
                train_cons: r.f64("history")?,
                train_accuracy: r.f64("history")?,
                test_task: r.f64("history")?,
                test_cons: r.f64("history")?,
                test_accuracy: r.f64("history")?,
            });
        }
        if r.pos != buf.len() {
            return r.fail(ErrorKind::Trailing(buf.len() - r.pos));
        }
        Ok(Checkpoint {
            version,
            epoch,
            config,
            params,
            history,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| AppError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|source| AppError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            version: VERSION,
            epoch: 2,
            config: "{\"schema_version\": 1}".into(),
            params: vec![
                ParamRecord {
                    name: "a.w".into(),
                    trainable: true,
                    shape: vec![2, 3],
                    data: vec![0.5, -1.0, f32::MIN_POSITIVE, 3.25, -0.0, 7.0],
                },
                ParamRecord {
                    name: "a.running_var".into(),
                    trainable: false,
                    shape: vec![1],
                    data: vec![1.0],
                },
            ],
            history: vec![HistoryRow {
                epoch: 0,
                train_task: 2.3,
                train_cons: 0.1,
                train_accuracy: 0.25,
                test_task: f64::NAN,
                test_cons: f64::NAN,
                test_accuracy: f64::NAN,
            }],
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let bytes = sample().to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.params, sample().params);
    }

    #[test]
    fn every_truncation_is_a_parse_error() {
        let bytes = sample().to_bytes();
        for n in 0..bytes.len() {
            let err = Checkpoint::from_bytes(&bytes[..n]).unwrap_err();
            assert!(err.offset <= n, "offset {} beyond {n}", err.offset);
            if n >= 8 {
                assert!(matches!(err.kind, ErrorKind::Truncated { .. }), "{n}: {err}");
            }
        }
    }

    #[test]
    fn bad_magic_and_version_are_located() {
        let mut bytes = sample().to_bytes();
        bytes[3] = b'X';
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap_err().kind, ErrorKind::BadMagic);
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert_eq!(err, CheckpointError { offset: 8, kind: ErrorKind::UnsupportedVersion(9) });
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = sample().to_bytes();
        let end = bytes.len();
        bytes.push(0);
        assert_eq!(
            Checkpoint::from_bytes(&bytes).unwrap_err(),
            CheckpointError { offset: end, kind: ErrorKind::Trailing(1) }
        );
    }

    #[test]
    fn absurd_shape_rejected_without_allocating() {
        let mut c = sample();
        c.params.truncate(1);
        c.params[0].shape = vec![u32::MAX as usize, u32::MAX as usize, 4];
        c.params[0].data.clear();
        let err = Checkpoint::from_bytes(&c.to_bytes()).unwrap_err();
        assert!(matches!(err.kind, ErrorKind::BadShape(_) | ErrorKind::Truncated { .. }), "{err}");
    }
}
