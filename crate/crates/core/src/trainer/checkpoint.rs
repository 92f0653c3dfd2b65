//! Single-file checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"VXCK"
//! u32     format version
//! u8      parameter precision (0 = f32, 1 = f64)
//! u64     step
//! u32     number of text entries, then per entry: str key, str value
//! u32     number of tensors, then per tensor:
//!           str name, u8 dtype (0 = f32, 1 = f64), u32 rows, u32 cols,
//!           rows·cols values, row-major
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8. Tensor names carry a
//! namespace: `param/`, `buffer/`, `adam_m/`, `adam_v/`, `history/loss`.
//! Parameters and buffers use the archive precision; optimizer moments and
//! the loss history are always f64.

use std::path::Path;

use super::{AdamState, Precision};
use crate::autograd::Mat;
use crate::config::FlatConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"VXCK";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub params: ParamStore,
    pub optimizer: AdamState,
    /// Model and training configuration snapshot.
    pub config: FlatConfig,
    pub loss_history: Vec<f64>,
    pub precision: Precision,
}

impl Checkpoint {
    /// An untrained checkpoint wrapping freshly initialized parameters.
    pub fn from_params(params: ParamStore, config: FlatConfig) -> Self {
        Checkpoint {
            step: 0,
            params,
            optimizer: AdamState::default(),
            config,
            loss_history: Vec::new(),
            precision: Precision::F64,
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, name: &str, m: &Mat, precision: Precision) {
        self.str(name);
        self.u8(match precision {
            Precision::F32 => 0,
            Precision::F64 => 1,
        });
        self.u32(m.nrows() as u32);
        self.u32(m.ncols() as u32);
        for &v in m.iter() {
            match precision {
                Precision::F32 => self.0.extend_from_slice(&(v as f32).to_le_bytes()),
                Precision::F64 => self.0.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
    fn tensor(&mut self) -> Result<(String, Mat)> {
        let name = self.str()?;
        let dtype = self.u8()?;
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format(format!("tensor `{name}` has an absurd shape")))?;
        let values: Vec<f64> = match dtype {
            0 => self.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            1 => self.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            other => return Err(Error::Format(format!("tensor `{name}` has unknown dtype {other}"))),
        };
        let m = Mat::from_shape_vec((rows, cols), values).expect("length checked");
        Ok((name, m))
    }
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u8(match c.precision {
        Precision::F32 => 0,
        Precision::F64 => 1,
    });
    w.u64(c.step as u64);
    let mut text: Vec<(String, String)> = c.config.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    text.push(("optimizer.t".into(), c.optimizer.t.to_string()));
    w.u32(text.len() as u32);
    for (k, v) in &text {
        w.str(k);
        w.str(v);
    }
    let count = c.params.params().len()
        + c.params.buffers().len()
        + c.optimizer.m.len()
        + c.optimizer.v.len()
        + 1;
    w.u32(count as u32);
    for (name, m) in c.params.params() {
        w.tensor(&format!("param/{name}"), m, c.precision);
    }
    for (name, m) in c.params.buffers() {
        w.tensor(&format!("buffer/{name}"), m, c.precision);
    }
    for (name, m) in &c.optimizer.m {
        w.tensor(&format!("adam_m/{name}"), m, Precision::F64);
    }
    for (name, m) in &c.optimizer.v {
        w.tensor(&format!("adam_v/{name}"), m, Precision::F64);
    }
    let hist = Mat::from_shape_vec((1, c.loss_history.len()), c.loss_history.clone()).unwrap();
    w.tensor("history/loss", &hist, Precision::F64);
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint format version {version}, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let precision = match r.u8()? {
        0 => Precision::F32,
        1 => Precision::F64,
        other => return Err(Error::Format(format!("unknown precision tag {other}"))),
    };
    let step = r.u64()? as usize;
    let mut config = FlatConfig::new();
    let mut optimizer = AdamState::default();
    for _ in 0..r.u32()? {
        let (k, v) = (r.str()?, r.str()?);
        if k == "optimizer.t" {
            optimizer.t = v.parse().map_err(|_| Error::Format("bad optimizer step".into()))?;
        } else {
            config.set(k, v);
        }
    }
    let mut params = ParamStore::new();
    let mut loss_history = Vec::new();
    for _ in 0..r.u32()? {
        let (name, m) = r.tensor()?;
        let (ns, rest) = name
            .split_once('/')
            .ok_or_else(|| Error::Format(format!("tensor `{name}` has no namespace")))?;
        match ns {
            "param" => params.insert(rest, m),
            "buffer" => params.insert_buffer(rest, m),
            "adam_m" => {
                optimizer.m.insert(rest.to_string(), m);
            }
            "adam_v" => {
                optimizer.v.insert(rest.to_string(), m);
            }
            "history" => loss_history = m.into_raw_vec_and_offset().0,
            other => return Err(Error::Format(format!("unknown tensor namespace `{other}`"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint { step, params, optimizer, config, loss_history, precision })
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, encode_checkpoint(c))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
