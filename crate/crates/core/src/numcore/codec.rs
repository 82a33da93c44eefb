//! Binary tensor encoding.
//!
//! Layout: `u32` rank, `rank × u32` dims, then the values row-major. All
//! integers and values are little-endian. The canonical value type is `f32`;
//! the `f64` variant exists for float64 checkpoints.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use super::Tensor;

/// Storage precision for parameters and encoded tensors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn tag(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Precision::F32),
            1 => Some(Precision::F64),
            _ => None,
        }
    }

    /// Rounds a tensor so that encoding it at this precision is lossless.
    pub fn quantize(self, t: &mut Tensor) {
        if self == Precision::F32 {
            t.round_to_f32();
        }
    }
}

const MAX_RANK: u32 = 8;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, precision: Precision) -> io::Result<()> {
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    match precision {
        Precision::F32 => {
            for &x in t.data() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        Precision::F64 => {
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * (1 + t.rank() + t.numel()));
    write_tensor(&mut out, t, Precision::F32).expect("writing to a Vec cannot fail");
    out
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one tensor. Truncation surfaces as `UnexpectedEof`, malformed
/// headers as `InvalidData`.
pub fn read_tensor<R: Read>(r: &mut R, precision: Precision) -> io::Result<Tensor> {
    let rank = read_u32(r)?;
    if rank == 0 || rank > MAX_RANK {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("bad tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0 && n < (1 << 31))
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, format!("bad tensor shape {shape:?}")))?;
    let mut data = Vec::with_capacity(n);
    match precision {
        Precision::F32 => {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            data.extend(buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64));
        }
        Precision::F64 => {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            data.extend(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())));
        }
    }
    Tensor::new(shape, data).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::from_rows(&[[1.0, 2.0, 3.0]]);
        let bytes = encode_tensor(&t);
        assert_eq!(&bytes[..4], &2u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 12);
    }

    #[test]
    fn truncation_is_eof() {
        let bytes = encode_tensor(&Tensor::ones(&[4, 4]));
        let err = read_tensor(&mut &bytes[..bytes.len() - 3], Precision::F32).unwrap_err();
        assert_eq!(err.kind(), io::ErrorKind::UnexpectedEof);
    }

    proptest! {
        #[test]
        fn round_trip_f32_representable(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let mut x = seed;
            let data: Vec<f64> = (0..rows * cols).map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((x >> 40) as f32 / 1024.0 - 4096.0) as f64
            }).collect();
            let t = Tensor::new(vec![rows, cols], data).unwrap();
            let back = read_tensor(&mut encode_tensor(&t).as_slice(), Precision::F32).unwrap();
            prop_assert_eq!(back, t.clone());

            let mut buf = Vec::new();
            write_tensor(&mut buf, &t, Precision::F64).unwrap();
            prop_assert_eq!(read_tensor(&mut buf.as_slice(), Precision::F64).unwrap(), t);
        }
    }
}
