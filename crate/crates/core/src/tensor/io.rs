//! `.ten` tensor files.
//!
//! Layout (all little-endian): magic `XTEN`, `u32` version (1), `u8` dtype code
//! (0 = f32, 1 = f64), `u8` rank, `rank` x `u32` dims, then the raw scalars in
//! row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const TEN_MAGIC: &[u8; 4] = b"XTEN";
pub const TEN_VERSION: u32 = 1;

/// A tensor read from disk in whatever precision it was stored in.
#[derive(Clone, Debug, PartialEq)]
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

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested precision (exact when it already matches).
    pub fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode_ten<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::format("tensor", "rank exceeds 255"));
    }
    out.extend_from_slice(TEN_MAGIC);
    out.extend_from_slice(&TEN_VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::format("tensor", "dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(t.numel() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::format("tensor", format!("truncated stream: {e}")))?;
    Ok(buf)
}

fn read_scalars<T: Scalar, R: Read>(r: &mut R, shape: &[usize]) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    let width = T::DTYPE.size();
    let raw = read_exact(r, numel * width)?;
    let data = raw.chunks_exact(width).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| Error::format("tensor", e.to_string()))
}

pub fn decode_ten<R: Read>(r: &mut R) -> Result<AnyTensor> {
    let magic = read_exact(r, 4)?;
    if magic != TEN_MAGIC {
        return Err(Error::format("tensor", format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_exact(r, 4)?.try_into().expect("4 bytes"));
    if version != TEN_VERSION {
        return Err(Error::format("tensor", format!("unsupported version {version}")));
    }
    let head = read_exact(r, 2)?;
    let dtype = DType::from_code(head[0])
        .ok_or_else(|| Error::format("tensor", format!("unknown dtype code {}", head[0])))?;
    let rank = head[1] as usize;
    let dims = read_exact(r, 4 * rank)?;
    let shape: Vec<usize> = dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(read_scalars(r, &shape)?),
        DType::F64 => AnyTensor::F64(read_scalars(r, &shape)?),
    })
}

pub fn save_ten<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    encode_ten(t, &mut buf)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&buf)?;
    f.flush()?;
    Ok(())
}

pub fn load_ten(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let mut f = BufReader::new(File::open(path)?);
    decode_ten(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes_are_exact() {
        let t = Tensor::<f32>::new(&[2, 1], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        encode_ten(&t, &mut buf).unwrap();
        let mut want = b"XTEN".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&[0, 2]);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::<f64>::ones(&[3]);
        let mut buf = Vec::new();
        encode_ten(&t, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'Y';
        assert!(decode_ten(&mut bad.as_slice()).is_err());
        let cut = &buf[..buf.len() - 1];
        assert!(decode_ten(&mut &cut[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shape in proptest::collection::vec(1usize..4, 1..5),
            seed in any::<u64>(),
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::<f32>::uniform(&shape, -1e3, 1e3, &mut rng);
            let b = Tensor::<f64>::uniform(&shape, -1e3, 1e3, &mut rng);
            let mut buf = Vec::new();
            encode_ten(&a, &mut buf).unwrap();
            encode_ten(&b, &mut buf).unwrap();
            let mut r = buf.as_slice();
            prop_assert_eq!(decode_ten(&mut r).unwrap(), AnyTensor::F32(a));
            prop_assert_eq!(decode_ten(&mut r).unwrap(), AnyTensor::F64(b));
        }
    }
}
