//! Binary checkpoint container.
//!
//! Layout (all integers u32 little-endian, floats f64 little-endian):
//!
//! ```text
//! "FMNCKPT1"
//! meta_len, meta bytes (UTF-8 `key = value` lines)
//! record_count
//! per record: name_len, name, rank, dims[rank], values[prod(dims)]
//! ```

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FMNCKPT1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    /// Ordered `key = value` metadata (architecture, critic, trainer state).
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn write_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let mut meta = String::new();
    for (k, v) in &ck.meta {
        meta.push_str(k);
        meta.push_str(" = ");
        meta.push_str(v);
        meta.push('\n');
    }
    put_u32(&mut out, meta.len());
    out.extend_from_slice(meta.as_bytes());
    put_u32(&mut out, ck.tensors.len());
    for (name, t) in &ck.tensors {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("truncated {what}: need {n} bytes, have {}", self.remaining()),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| Error::Format {
            offset: self.pos,
            message: format!("{what} length overflows"),
        })?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        let at = self.pos;
        let m = self.take(8, "magic")?;
        if m != magic {
            return Err(Error::Format {
                offset: at,
                message: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(m),
                    String::from_utf8_lossy(magic)
                ),
            });
        }
        Ok(())
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        let at = self.pos;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format {
            offset: at,
            message: format!("{what} is not UTF-8"),
        })
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let meta_len = r.u32("metadata length")?;
    let meta_at = r.pos();
    let meta_text = r.utf8(meta_len, "metadata")?;
    let mut meta = Vec::new();
    for line in meta_text.lines() {
        let (k, v) = line.split_once(" = ").ok_or_else(|| Error::Format {
            offset: meta_at,
            message: format!("metadata line without ` = `: {line:?}"),
        })?;
        meta.push((k.to_string(), v.to_string()));
    }
    let count = r.u32("record count")?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32("name length")?;
        let name = r.utf8(name_len, "name")?;
        let rank = r.u32("rank")?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("dim")?);
        }
        let n: usize = shape.iter().product();
        let data = r.f64s(n, "values")?;
        tensors.push((name, Tensor::new(shape, data).expect("length checked")));
    }
    if r.remaining() != 0 {
        return Err(Error::Format {
            offset: r.pos(),
            message: format!("{} trailing bytes", r.remaining()),
        });
    }
    Ok(Checkpoint { meta, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            meta: vec![("d_z".into(), "2".into()), ("activation".into(), "tanh".into())],
            tensors: vec![
                (
                    "enc.0.w".into(),
                    Tensor::matrix(2, 3, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -7.25]),
                ),
                ("s".into(), Tensor::scalar(0.1)),
            ],
        }
    }

    #[test]
    fn layout_starts_with_magic() {
        let b = write_checkpoint(&sample());
        assert_eq!(&b[..8], b"FMNCKPT1");
    }

    #[test]
    fn truncated_is_clean_error() {
        let b = write_checkpoint(&sample());
        for cut in [0, 5, 12, b.len() - 1] {
            assert!(matches!(read_checkpoint(&b[..cut]), Err(Error::Format { .. })));
        }
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(vals in proptest::collection::vec(any::<f64>(), 0..40), name in "[a-z.]{1,12}") {
            let n = vals.len();
            let ck = Checkpoint {
                meta: vec![("k".into(), "v".into())],
                tensors: vec![(name, Tensor::vector(vals))],
            };
            let bytes = write_checkpoint(&ck);
            let back = read_checkpoint(&bytes).unwrap();
            prop_assert_eq!(write_checkpoint(&back), bytes);
            let (a, b) = (&ck.tensors[0].1, &back.tensors[0].1);
            prop_assert_eq!(a.shape(), b.shape());
            for i in 0..n {
                prop_assert_eq!(a.data()[i].to_bits(), b.data()[i].to_bits());
            }
        }
    }
}
