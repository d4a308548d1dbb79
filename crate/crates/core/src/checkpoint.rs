//! Binary parameter file.
//!
//! Layout: the magic `HGNT1`, then one record per parameter in store order
//! (name length, UTF-8 name, rank, extents, then the values; integers are
//! `u64` and values `f64`, all little-endian), then a little-endian FNV-1a
//! 64 checksum of every record byte (magic excluded).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::hash::Hasher;

use fnv::FnvHasher;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 5] = b"HGNT1";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC.len() + 16 + store.numel() * 8 + store.len() * 64);
    out.extend_from_slice(MAGIC);
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a(&out[MAGIC.len()..]);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible {what} {v}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("missing HGNT1 magic".into()));
    }
    let body = &bytes[MAGIC.len()..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    let actual = fnv1a(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {stored:016x}, computed {actual:016x}"
        )));
    }
    let mut r = Reader { buf: body, pos: 0 };
    let mut store = ParamStore::new();
    while r.pos < body.len() {
        let n = r.len("name length")?;
        let name = String::from_utf8(r.take(n, "name")?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = r.len("rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len("extent")?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::Checkpoint(format!("shape of {name} overflows")))?;
        let raw = r.take(numel.saturating_mul(8), "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        store
            .insert(name.clone(), t)
            .map_err(|_| Error::Checkpoint(format!("duplicate parameter {name}")))?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.insert("b.w", Tensor::normal(&[3, 2, 3], 1.0, &mut rng)).unwrap();
        s.insert("a", Tensor::new(&[1], alloc::vec![-0.0]).unwrap()).unwrap();
        s.insert("γ", Tensor::full(&[2], f64::MIN_POSITIVE)).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let bytes = encode(&s);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.names().collect::<Vec<_>>(), ["b.w", "a", "γ"]);
        for ((_, x), (_, y)) in s.iter().zip(back.iter()) {
            assert_eq!(x.shape(), y.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
        }
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn layout() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::new(&[1], alloc::vec![1.5]).unwrap()).unwrap();
        let b = encode(&s);
        assert_eq!(&b[..5], b"HGNT1");
        assert_eq!(&b[5..13], &1u64.to_le_bytes());
        assert_eq!(b[13], b'x');
        assert_eq!(&b[14..22], &1u64.to_le_bytes());
        assert_eq!(&b[22..30], &1u64.to_le_bytes());
        assert_eq!(&b[30..38], &1.5f64.to_le_bytes());
        assert_eq!(b.len(), 46);
        // FNV-1a 64 of the record bytes
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &byte in &b[5..38] {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        assert_eq!(&b[38..], &h.to_le_bytes());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&store());
        for i in [0, 7, 40, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))), "byte {i}");
        }
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(b"HGNT").is_err());
    }
}
