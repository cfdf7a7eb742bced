//! On-disk formats: JSON for datasets, translations and metrics, and a
//! little-endian binary layout for checkpoints (see `docs/checkpoint-format.md`).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::eval::AlignmentReport;
use super::hand::{Dataset, ToyHandSpec};
use super::train::{Checkpoint, CheckpointMeta, LossRecord};
use crate::error::{Error, Result};
use crate::geometry::GraspConfig;
use crate::nets::{param_count, Activation, NetParams, OptimState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GBRIDGE\0";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DATASET_VERSION: u32 = 1;
pub const TRANSLATION_VERSION: u32 = 1;
pub const METRICS_VERSION: u32 = 1;

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    #[serde(rename = "content")]
    body: T,
}

fn to_json<T: Serialize>(format: &str, version: u32, body: &T) -> Result<Vec<u8>> {
    let env = Envelope {
        format: format.to_string(),
        version,
        body,
    };
    let mut out = serde_json::to_vec_pretty(&env)?;
    out.push(b'\n');
    Ok(out)
}

fn from_json<T: DeserializeOwned>(bytes: &[u8], format: &str, version: u32) -> Result<T> {
    let header: Header = serde_json::from_slice(bytes)?;
    if header.format != format {
        return Err(Error::Format {
            offset: 0,
            reason: format!("expected a '{format}' file, found '{}'", header.format),
        });
    }
    if header.version != version {
        return Err(Error::Format {
            offset: 0,
            reason: format!("unsupported {format} version {} (this build reads {version})", header.version),
        });
    }
    let env: Envelope<T> = serde_json::from_slice(bytes)?;
    Ok(env.body)
}

/// Writes through a temporary sibling so a failed write leaves no partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn dataset_to_json(ds: &Dataset) -> Result<Vec<u8>> {
    to_json("graspbridge-dataset", DATASET_VERSION, ds)
}

pub fn dataset_from_json(bytes: &[u8]) -> Result<Dataset> {
    from_json(bytes, "graspbridge-dataset", DATASET_VERSION)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_atomic(path, &dataset_to_json(ds)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_json(&fs::read(path)?)
}

/// Output of a translation run: decoded configs for the target hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Translation {
    pub hand: ToyHandSpec,
    pub configs: Vec<GraspConfig>,
    pub steps: usize,
    pub seed: u64,
    pub t_min: f64,
    pub checkpoint_fingerprint: String,
}

pub fn save_translation(path: &Path, tr: &Translation) -> Result<()> {
    write_atomic(path, &to_json("graspbridge-translation", TRANSLATION_VERSION, tr)?)
}

pub fn load_translation(path: &Path) -> Result<Translation> {
    from_json(&fs::read(path)?, "graspbridge-translation", TRANSLATION_VERSION)
}

pub fn metrics_to_json(m: &AlignmentReport) -> Result<Vec<u8>> {
    to_json("graspbridge-metrics", METRICS_VERSION, m)
}

pub fn save_metrics(path: &Path, m: &AlignmentReport) -> Result<()> {
    write_atomic(path, &metrics_to_json(m)?)
}

pub fn load_metrics(path: &Path) -> Result<AlignmentReport> {
    from_json(&fs::read(path)?, "graspbridge-metrics", METRICS_VERSION)
}

pub fn save_config<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("step,loss,flow_loss,score_loss,eps,sinkhorn_iters,grad_norm\n");
    for r in log {
        s.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{},{:e}\n",
            r.step, r.loss, r.flow_loss, r.score_loss, r.eps, r.sinkhorn_iters, r.grad_norm
        ));
    }
    s
}

pub fn checkpoint_to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let nets = [&ck.v, &ck.s];
    if !ck.optim.shapes_match(&nets) {
        return Err(Error::Shape("optimizer buffers do not match the networks".into()));
    }
    if ck.v.activation != ck.s.activation {
        return Err(Error::Config("both networks must share one activation".into()));
    }
    let meta = serde_json::to_vec(&ck.meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(ck.v.activation.tag());
    out.push(nets.len() as u8);
    for n in nets {
        out.extend_from_slice(&(n.sizes.len() as u32).to_le_bytes());
        for &s in &n.sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
    }
    out.extend_from_slice(&ck.optim.step.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    for (k, n) in nets.iter().enumerate() {
        for block in [&n.params, &ck.optim.m[k], &ck.optim.v[k], &ck.optim.ema[k]] {
            for x in block.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.fail("array length overflows"))?, what)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "not a checkpoint file (bad magic)".into(),
        });
    }
    let at = r.pos;
    let version = r.u32("format version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: at as u64,
            reason: format!("unsupported checkpoint version {version}"),
        });
    }
    let at = r.pos;
    let tag = r.u8("activation tag")?;
    let activation = Activation::from_tag(tag).ok_or_else(|| Error::Format {
        offset: at as u64,
        reason: format!("unknown activation tag {tag}"),
    })?;
    let at = r.pos;
    let n_nets = r.u8("network count")?;
    if n_nets != 2 {
        return Err(Error::Format {
            offset: at as u64,
            reason: format!("expected 2 networks, found {n_nets}"),
        });
    }
    let mut sizes = Vec::new();
    for _ in 0..n_nets {
        let at = r.pos;
        let n = r.u32("layer count")? as usize;
        if !(2..=64).contains(&n) {
            return Err(Error::Format {
                offset: at as u64,
                reason: format!("implausible layer count {n}"),
            });
        }
        let mut s = Vec::with_capacity(n);
        for _ in 0..n {
            s.push(r.u32("layer size")? as usize);
        }
        if s.contains(&0) {
            return Err(r.fail("zero layer size"));
        }
        sizes.push(s);
    }
    let step = r.u64("step count")?;
    let meta_len = r.u64("metadata length")? as usize;
    let at = r.pos;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| Error::Format {
        offset: at as u64,
        reason: format!("metadata: {e}"),
    })?;
    let mut nets = Vec::new();
    let (mut m, mut v, mut ema) = (Vec::new(), Vec::new(), Vec::new());
    for s in sizes {
        let p = param_count(&s);
        let params = r.f64s(p, "parameters")?;
        m.push(r.f64s(p, "first moments")?);
        v.push(r.f64s(p, "second moments")?);
        ema.push(r.f64s(p, "EMA parameters")?);
        nets.push(NetParams::from_parts(s, activation, params)?);
    }
    if r.pos != buf.len() {
        return Err(r.fail(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let s_net = nets.pop().unwrap();
    let v_net = nets.pop().unwrap();
    Ok(Checkpoint {
        optim: OptimState {
            step,
            m,
            v,
            ema,
            config: meta.optim,
        },
        v: v_net,
        s: s_net,
        meta,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint_to_bytes(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&fs::read(path)?)
}
