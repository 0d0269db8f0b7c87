//! Binary tensor (`XTEN`) and weight-container (`XWTS`) formats.
//!
//! `XTEN`: magic, rank (u32 LE), each extent (u32 LE), dtype byte
//! (1 = f32, 2 = f64), row-major little-endian scalars.
//!
//! `XWTS`: magic, then records `{name length u32 LE, UTF-8 name, XTEN tensor}`
//! until end of input.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"XTEN";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"XWTS";

/// A decoded tensor of either on-disk precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    /// Converts to working precision.
    pub fn into_f32(self) -> Tensor<f32> {
        match self {
            AnyTensor::F32(t) => t,
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode_tensor<T: Element>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out.push(T::DTYPE.code());
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "unexpected end of data at byte {} (wanted {} more)",
                self.pos, n
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn read_tensor(cur: &mut Cursor<'_>) -> Result<AnyTensor> {
    if cur.take(4)? != TENSOR_MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    let rank = cur.u32()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(cur.u32()? as usize);
    }
    let code = cur.take(1)?[0];
    let dtype =
        DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format("tensor extent overflow".into()))?;
    let raw = cur.take(count * dtype.size())?;
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(Tensor::new(
            &shape,
            raw.chunks_exact(4).map(f32::read_le).collect(),
        )?),
        DType::F64 => AnyTensor::F64(Tensor::new(
            &shape,
            raw.chunks_exact(8).map(f64::read_le).collect(),
        )?),
    })
}

pub fn decode_tensor(bytes: &[u8]) -> Result<AnyTensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    let t = read_tensor(&mut cur)?;
    if !cur.at_end() {
        return Err(Error::Format("trailing bytes after tensor".into()));
    }
    Ok(t)
}

pub fn write_tensor<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf);
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<AnyTensor> {
    decode_tensor(&fs::read(path)?)
}

pub fn encode_weights<'a>(
    records: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor(t, &mut out);
    }
    out
}

/// Decodes a weight container, keeping record order.
pub fn decode_weights(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != WEIGHTS_MAGIC {
        return Err(Error::Format("bad weight container magic".into()));
    }
    let mut records = Vec::new();
    while !cur.at_end() {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_string();
        if records.iter().any(|(n, _): &(String, _)| *n == name) {
            return Err(Error::Format(format!("duplicate record `{name}`")));
        }
        let t = read_tensor(&mut cur)?.into_f32();
        records.push((name, t));
    }
    Ok(records)
}

/// Hex SHA-256 over the manifest bytes followed by the weight bytes.
pub fn model_hash(manifest: &[u8], weights: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(manifest);
    h.update(weights);
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(&[2], vec![1.0f32, -2.0]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf);
        let mut expected = b"XTEN".to_vec();
        expected.extend_from_slice(&[1, 0, 0, 0, 2, 0, 0, 0, 1]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn f64_and_scalar() {
        let t = Tensor::<f64>::scalar(0.25);
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf);
        assert_eq!(buf.len(), 4 + 4 + 1 + 8);
        assert_eq!(decode_tensor(&buf).unwrap(), AnyTensor::F64(t));
    }

    #[test]
    fn rejects_truncated_and_bad_magic() {
        let t = Tensor::new(&[3], vec![1.0f32, 2., 3.]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf);
        assert!(matches!(decode_tensor(&buf[..buf.len() - 1]), Err(Error::Format(_))));
        buf[0] = b'Y';
        assert!(matches!(decode_tensor(&buf), Err(Error::Format(_))));
    }

    #[test]
    fn weights_container() {
        let a = Tensor::new(&[1, 2], vec![1.0f32, 2.0]).unwrap();
        let b = Tensor::<f32>::zeros(&[0]);
        let bytes = encode_weights([("a.kernel", &a), ("b", &b)]);
        let back = decode_weights(&bytes).unwrap();
        assert_eq!(back, vec![("a.kernel".to_string(), a), ("b".to_string(), b)]);
        assert!(decode_weights(b"XWTX").is_err());
    }

    #[test]
    fn hash_changes_with_content() {
        let h1 = model_hash(b"{}", b"XWTS");
        assert_eq!(h1, model_hash(b"{}", b"XWTS"));
        assert_ne!(h1, model_hash(b"{}", b"XWTS\0"));
        assert_eq!(h1.len(), 64);
    }

    proptest! {
        #[test]
        fn tensor_round_trip(
            shape in prop::collection::vec(0usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let mut r = crate::rng::XorShift64Star::new(seed);
            let data: Vec<f32> = (0..n).map(|_| r.uniform(-10.0, 10.0) as f32).collect();
            let t = Tensor::new(&shape, data).unwrap();
            let mut buf = Vec::new();
            encode_tensor(&t, &mut buf);
            prop_assert_eq!(decode_tensor(&buf).unwrap(), AnyTensor::F32(t));
        }
    }
}
