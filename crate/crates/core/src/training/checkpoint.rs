//! Binary checkpoint format.
//!
//! `"PAAN"`, `u16` version, `u8` dtype tag, `u32` record count, then records of
//! `u8` kind, `u32`-prefixed name and `u64`-prefixed payload, all little-endian,
//! closed by the SHA-256 of everything before it.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{BnStats, ParamStore, Parameter};
use crate::error::{Error, Result};
use crate::scalar::{DType, Real};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"PAAN";
pub const VERSION: u16 = 1;
const DIGEST_LEN: usize = 32;

const KIND_CONFIG: u8 = 1;
const KIND_COUNTERS: u8 = 2;
const KIND_PARAM: u8 = 3;
const KIND_STATS: u8 = 4;
const KIND_MOMENTUM: u8 = 5;
const KIND_RNG: u8 = 6;

/// Precision a checkpoint file was written in, read from its header.
pub fn stored_dtype(bytes: &[u8]) -> Result<DType> {
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    DType::from_tag(bytes[6]).ok_or_else(|| Error::Format(format!("unknown precision tag {}", bytes[6])))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: String,
    pub epoch: u64,
    pub step: u64,
    /// Parameters (values, freeze flags, masks) and batch-norm statistics.
    pub store: ParamStore<T>,
    pub momentum: Vec<(String, Tensor<T>)>,
    pub rng: RngState,
}

struct Writer {
    buf: Vec<u8>,
    records: u32,
}

impl Writer {
    fn new<T: Real>() -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(T::DTYPE.tag());
        buf.extend_from_slice(&0u32.to_le_bytes());
        Self { buf, records: 0 }
    }

    fn record(&mut self, kind: u8, name: &str, payload: &[u8]) {
        self.buf.push(kind);
        self.buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(name.as_bytes());
        self.buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(payload);
        self.records += 1;
    }

    fn finish(mut self) -> Vec<u8> {
        self.buf[7..11].copy_from_slice(&self.records.to_le_bytes());
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

fn put_tensor<T: Real>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn param_payload<T: Real>(p: &Parameter<T>) -> Vec<u8> {
    let mut out = vec![p.frozen as u8, p.learn_mask.is_some() as u8];
    put_tensor(&mut out, &p.value);
    if let Some(mask) = &p.learn_mask {
        out.extend(mask.iter().map(|&m| m as u8));
    }
    out
}

fn stats_payload<T: Real>(s: &BnStats<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(s.mean.len() as u32).to_le_bytes());
    out.extend_from_slice(&s.tracked.to_le_bytes());
    for &v in s.mean.iter().chain(&s.var) {
        v.write_le(&mut out);
    }
    out
}

fn write_state<T: Real>(w: &mut Writer, store: &ParamStore<T>, prefix: &str) {
    for p in store.params().iter().filter(|p| p.name.starts_with(prefix)) {
        w.record(KIND_PARAM, &p.name, &param_payload(p));
    }
    for s in store.all_stats().iter().filter(|s| s.name.starts_with(prefix)) {
        w.record(KIND_STATS, &s.name, &stats_payload(s));
    }
}

/// Serialized parameters and statistics whose names start with `prefix`.
pub fn segment_bytes<T: Real>(store: &ParamStore<T>, prefix: &str) -> Vec<u8> {
    let mut w = Writer::new::<T>();
    write_state(&mut w, store, prefix);
    w.finish()
}

/// Serialized backbone parameters and statistics.
pub fn backbone_bytes<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    segment_bytes(store, crate::backbone::PREFIX)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Format("truncated file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    fn scalars<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = self.take(n.checked_mul(T::BYTES).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
    }

    fn tensor<T: Real>(&mut self) -> Result<Tensor<T>> {
        let shape = [self.u32()? as usize, self.u32()? as usize, self.u32()? as usize, self.u32()? as usize];
        let data = self.scalars(numel(shape))?;
        Tensor::from_vec(shape, data)
    }

    fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new::<T>();
        w.record(KIND_CONFIG, "config", self.config.as_bytes());
        let mut counters = Vec::new();
        counters.extend_from_slice(&self.epoch.to_le_bytes());
        counters.extend_from_slice(&self.step.to_le_bytes());
        w.record(KIND_COUNTERS, "counters", &counters);
        write_state(&mut w, &self.store, "");
        for (name, v) in &self.momentum {
            let mut payload = Vec::new();
            put_tensor(&mut payload, v);
            w.record(KIND_MOMENTUM, name, &payload);
        }
        let mut rng = Vec::new();
        rng.extend_from_slice(&self.rng.seed);
        rng.extend_from_slice(&self.rng.stream.to_le_bytes());
        rng.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.record(KIND_RNG, "rng", &rng);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 + 2 + 1 + 4;
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        if bytes.len() < HEADER + DIGEST_LEN {
            return Err(Error::Format("truncated file".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        if bytes[6] != T::DTYPE.tag() {
            return Err(Error::Format(format!(
                "stored precision tag {} does not match requested {:?}",
                bytes[6],
                T::DTYPE
            )));
        }
        let body = &bytes[..bytes.len() - DIGEST_LEN];
        let mut r = Reader { data: body, pos: 7 };
        let count = r.u32()?;
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let kind = r.u8()?;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?
                .to_string();
            let len = r.u64()? as usize;
            records.push((kind, name, r.take(len)?));
        }
        if !r.done() {
            return Err(Error::Format("trailing bytes after records".into()));
        }
        if Sha256::digest(body).as_slice() != &bytes[bytes.len() - DIGEST_LEN..] {
            return Err(Error::Checksum);
        }

        let mut config = None;
        let mut counters = None;
        let mut rng = None;
        let mut store = ParamStore::new();
        let mut momentum = Vec::new();
        for (kind, name, payload) in records {
            let mut p = Reader { data: payload, pos: 0 };
            match kind {
                KIND_CONFIG => {
                    config = Some(
                        String::from_utf8(p.take(payload.len())?.to_vec()).map_err(|_| Error::Format("config is not UTF-8".into()))?,
                    )
                }
                KIND_COUNTERS => counters = Some((p.u64()?, p.u64()?)),
                KIND_PARAM => {
                    let frozen = p.u8()? != 0;
                    let has_mask = p.u8()? != 0;
                    let value = p.tensor()?;
                    let n = value.numel();
                    let mut param = Parameter::new(name, value);
                    param.frozen = frozen;
                    if has_mask {
                        param.learn_mask = Some(p.take(n)?.iter().map(|&b| b != 0).collect());
                    }
                    store.add(param);
                }
                KIND_STATS => {
                    let c = p.u32()? as usize;
                    let tracked = p.u64()?;
                    let mean = p.scalars(c)?;
                    let var = p.scalars(c)?;
                    store.add_stats(BnStats {
                        name,
                        mean,
                        var,
                        tracked,
                    });
                }
                KIND_MOMENTUM => momentum.push((name, p.tensor()?)),
                KIND_RNG => {
                    let seed: [u8; 32] = p.take(32)?.try_into().expect("32 bytes");
                    rng = Some(RngState {
                        seed,
                        stream: p.u64()?,
                        word_pos: p.u128()?,
                    });
                }
                other => return Err(Error::Format(format!("unknown record kind {other}"))),
            }
            if !p.done() {
                return Err(Error::Format("record payload has trailing bytes".into()));
            }
        }
        let missing = |what: &str| Error::Format(format!("missing {what} record"));
        let (epoch, step) = counters.ok_or_else(|| missing("counters"))?;
        Ok(Self {
            config: config.ok_or_else(|| missing("config"))?,
            epoch,
            step,
            store,
            momentum,
            rng: rng.ok_or_else(|| missing("rng"))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copy parameter values, flags, masks and statistics into a store with the
    /// same layout.
    pub fn apply_to(&self, store: &mut ParamStore<T>) -> Result<()> {
        if store.params().len() != self.store.params().len() || store.all_stats().len() != self.store.all_stats().len()
        {
            return Err(Error::Format("checkpoint does not match the model layout".into()));
        }
        for src in self.store.params() {
            store.load_value(&src.name, src.value.clone())?;
            let id = store.find(&src.name).expect("loaded above");
            let dst = store.get_mut(id);
            dst.frozen = src.frozen;
            dst.learn_mask = src.learn_mask.clone();
            dst.grad = None;
        }
        for (dst, src) in store.all_stats_mut().iter_mut().zip(self.store.all_stats()) {
            if dst.name != src.name || dst.mean.len() != src.mean.len() {
                return Err(Error::Format(format!("statistics `{}` do not match the model", src.name)));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}
