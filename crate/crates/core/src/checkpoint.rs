//! Little-endian binary checkpoints.
//!
//! ```text
//! "MPLC" u32 version
//! u32 len, header bytes (sorted key=value lines)
//! u32 count, then per tensor: u32 name_len, name, u8 dtype, u32 rank, u64 extents.., raw values
//! u64 optimizer step, u32 count, moment tensors in the same record form
//! u64 epoch
//! rng: 32-byte seed, u64 stream, u128 word position
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{elem_size, DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"MPLC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
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
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub header: String,
    pub params: Vec<(String, Tensor<F>)>,
    pub step: u64,
    pub moments: Vec<(String, Tensor<F>)>,
    pub epoch: u64,
    pub rng: RngState,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensors<F: Real>(out: &mut Vec<u8>, ts: &[(String, Tensor<F>)]) {
    put_u32(out, ts.len() as u32);
    for (name, t) in ts {
        put_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        out.push(F::DTYPE.tag());
        put_u32(out, t.rank() as u32);
        for &e in t.shape() {
            put_u64(out, e as u64);
        }
        for &v in t.data() {
            v.write_le(out);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensors<F: Real>(&mut self) -> Result<Vec<(String, Tensor<F>)>> {
        let n = self.u32()?;
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let len = self.u32()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let tag = self.take(1)?[0];
            match DType::from_tag(tag) {
                Some(d) if d == F::DTYPE => {}
                _ => return Err(Error::Format(format!("{name}: dtype tag {tag} does not match {:?}", F::DTYPE))),
            }
            let rank = self.u32()? as usize;
            let shape = (0..rank)
                .map(|_| self.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = self.take(count * elem_size::<F>())?;
            let data = raw.chunks_exact(elem_size::<F>()).map(F::read_le).collect();
            out.push((name, Tensor::new(&shape, data)?));
        }
        Ok(out)
    }
}

impl<F: Real> Checkpoint<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.header.len() as u32);
        out.extend_from_slice(self.header.as_bytes());
        put_tensors(&mut out, &self.params);
        put_u64(&mut out, self.step);
        put_tensors(&mut out, &self.moments);
        put_u64(&mut out, self.epoch);
        out.extend_from_slice(&self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header = String::from_utf8(r.take(hlen)?.to_vec())
            .map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let params = r.tensors()?;
        let step = r.u64()?;
        let moments = r.tensors()?;
        let epoch = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            header,
            params,
            step,
            moments,
            epoch,
            rng: RngState { seed, stream, word_pos },
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|_| Error::Dependency(path.to_path_buf()))?;
        Self::from_bytes(&bytes)
    }

    /// Value of a `key=value` header line.
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header
            .lines()
            .find_map(|l| l.split_once('=').filter(|(k, _)| *k == key).map(|(_, v)| v))
    }

    /// Copies stored parameters into `store`; names and shapes must match exactly.
    pub fn restore_params(&self, store: &mut ParamStore<F>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            store.set(id, t.clone())?;
        }
        Ok(())
    }
}

pub fn snapshot_params<F: Real>(store: &ParamStore<F>) -> Vec<(String, Tensor<F>)> {
    store.iter().map(|p| (p.name.clone(), (*p.value).clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn sample() -> Checkpoint<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        rng.set_stream(3);
        rng.next_u64();
        Checkpoint {
            header: "a=1\nb=two\n".into(),
            params: vec![("w".into(), Tensor::from_f64(&[2, 2], &[1.0, -2.0, 0.5, 3.25]).unwrap())],
            step: 7,
            moments: vec![("m/w".into(), Tensor::zeros(&[2, 2])), ("v/w".into(), Tensor::full(&[2, 2], 0.25))],
            epoch: 2,
            rng: RngState::capture(&rng),
        }
    }

    #[test]
    fn byte_exact_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.header_value("b"), Some("two"));
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        a.set_stream(2);
        a.next_u32();
        let mut b = RngState::capture(&a).restore();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
    }
}
