//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic, a u32 tensor count, then per tensor a u32 name
//! length, the UTF-8 name, a u32 rank, u32 dims and little-endian f32 data.
//! A JSON trailer with configs and progress follows, closed by its u64 length.
//! All integers are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EpochMetrics, TrainConfig};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CAMMAC01";

const CURRENT: &str = "current.";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    /// u128 does not survive JSON numbers, so it travels as a decimal string.
    pub word_pos: String,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos().to_string(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().unwrap_or(0));
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResumeState {
    pub params: ModelParams<f32>,
    pub adam_m: Vec<Tensor<f32>>,
    pub adam_v: Vec<Tensor<f32>>,
    pub step: u64,
    pub rng: RngState,
    pub next_epoch: usize,
    pub since_best: usize,
    pub stopped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Best-validation parameters, or the initial ones before any epoch.
    pub params: ModelParams<f32>,
    /// Epoch that produced `params`.
    pub epoch: Option<usize>,
    pub val_acc: f64,
    pub metrics: Vec<EpochMetrics>,
    pub resume: Option<ResumeState>,
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    model: ModelConfig,
    train: TrainConfig,
    epoch: Option<usize>,
    val_acc: f64,
    metrics: Vec<EpochMetrics>,
    resume: Option<ResumeTrailer>,
}

#[derive(Serialize, Deserialize)]
struct ResumeTrailer {
    step: u64,
    rng: RngState,
    next_epoch: usize,
    since_best: usize,
    stopped: bool,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn write_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, &Tensor<f32>)> =
        ck.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    if let Some(r) = &ck.resume {
        for (n, t) in r.params.iter() {
            tensors.push((format!("{CURRENT}{n}"), t));
        }
        for ((n, m), v) in ck.params.names().iter().zip(&r.adam_m).zip(&r.adam_v) {
            tensors.push((format!("{ADAM_M}{n}"), m));
            tensors.push((format!("{ADAM_V}{n}"), v));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, tensors.len())?;
    for (n, t) in &tensors {
        put_tensor(&mut out, n, t)?;
    }
    let trailer = Trailer {
        model: ck.model.clone(),
        train: ck.train.clone(),
        epoch: ck.epoch,
        val_acc: ck.val_acc,
        metrics: ck.metrics.clone(),
        resume: ck.resume.as_ref().map(|r| ResumeTrailer {
            step: r.step,
            rng: r.rng.clone(),
            next_epoch: r.next_epoch,
            since_best: r.since_best,
            stopped: r.stopped,
        }),
    };
    let json = serde_json::to_vec(&trailer).map_err(|e| Error::Format(e.to_string()))?;
    out.extend_from_slice(&json);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Format(format!("truncated tensor section at byte {}", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let footer = bytes.len() - 8;
    let json_len = u64::from_le_bytes(bytes[footer..].try_into().expect("8 bytes"));
    let json_start = usize::try_from(json_len)
        .ok()
        .and_then(|l| footer.checked_sub(l))
        .filter(|&s| s >= MAGIC.len() + 4)
        .ok_or_else(|| Error::Format("truncated checkpoint: trailer length exceeds file".into()))?;
    let trailer: Trailer = serde_json::from_slice(&bytes[json_start..footer])
        .map_err(|e| Error::Format(format!("bad trailer: {e}")))?;
    trailer.model.validate()?;

    let mut r = Reader {
        buf: &bytes[..json_start],
        pos: MAGIC.len(),
    };
    let count = r.u32()?;
    let mut best = Vec::new();
    let mut current = Vec::new();
    let mut adam_m = Vec::new();
    let mut adam_v = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let data = r
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data)?;
        if let Some(n) = name.strip_prefix(CURRENT) {
            current.push((n.to_string(), t));
        } else if let Some(n) = name.strip_prefix(ADAM_M) {
            adam_m.push((n.to_string(), t));
        } else if let Some(n) = name.strip_prefix(ADAM_V) {
            adam_v.push((n.to_string(), t));
        } else {
            best.push((name, t));
        }
    }
    if r.pos != json_start {
        return Err(Error::Format(format!(
            "shape table ends at byte {} but the trailer starts at {json_start}",
            r.pos
        )));
    }

    let params = ModelParams::from_named(&trailer.model, best)?;
    let resume = match trailer.resume {
        None => None,
        Some(rt) => {
            let order = |v: Vec<(String, Tensor<f32>)>, what: &str| -> Result<Vec<Tensor<f32>>> {
                let p = ModelParams::from_named(&trailer.model, v)
                    .map_err(|e| Error::Format(format!("{what} state: {e}")))?;
                Ok(p.tensors().to_vec())
            };
            Some(ResumeState {
                params: ModelParams::from_named(&trailer.model, current)?,
                adam_m: order(adam_m, "adam.m")?,
                adam_v: order(adam_v, "adam.v")?,
                step: rt.step,
                rng: rt.rng,
                next_epoch: rt.next_epoch,
                since_best: rt.since_best,
                stopped: rt.stopped,
            })
        }
    };
    Ok(Checkpoint {
        model: trailer.model,
        train: trailer.train,
        params,
        epoch: trailer.epoch,
        val_acc: trailer.val_acc,
        metrics: trailer.metrics,
        resume,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(ck)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&fs::read(path)?)
}
