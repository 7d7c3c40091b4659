//! `OGT1` tensor dump format: magic `OGT1`, little-endian `u32` rank,
//! `rank × u64` dims, `u8` precision tag (0 = single, 1 = double), then the
//! little-endian payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tensor::{Element, Precision, Tensor};

pub const MAGIC: &[u8; 4] = b"OGT1";

pub fn encode<F: Element>(t: &Tensor<F>) -> Vec<u8> {
    let mut out =
        Vec::with_capacity(4 + 4 + 8 * t.rank() + 1 + t.numel() * F::PRECISION.byte_width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(F::PRECISION.tag());
    for &v in t.elems() {
        v.write_le(&mut out);
    }
    out
}

pub fn write_tensor<F: Element>(w: &mut impl Write, t: &Tensor<F>) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

/// Reads one tensor, converting its payload to `F` if the stored precision differs.
pub fn read_tensor<F: Element>(r: &mut impl Read) -> Result<Tensor<F>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let rank = u32::from_le_bytes(u32b) as usize;
    if rank > crate::numerics::tensor::MAX_RANK {
        return Err(Error::Format(format!("rank {rank} too large")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b)?;
        dims.push(
            usize::try_from(u64::from_le_bytes(u64b))
                .map_err(|_| Error::Format("dim overflow".into()))?,
        );
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let precision = Precision::from_tag(tag[0])
        .ok_or_else(|| Error::Format(format!("precision tag {}", tag[0])))?;
    let n: usize = dims.iter().product();
    let width = precision.byte_width();
    let mut payload = vec![0u8; n * width];
    r.read_exact(&mut payload)?;
    let elems: Vec<F> = match precision {
        Precision::Single => payload
            .chunks_exact(4)
            .map(|b| F::lit(f32::read_le(b) as f64))
            .collect(),
        Precision::Double => payload
            .chunks_exact(8)
            .map(|b| F::lit(f64::read_le(b)))
            .collect(),
    };
    Tensor::new(dims, elems).map_err(|e| Error::Format(e.to_string()))
}

pub fn decode<F: Element>(bytes: &[u8]) -> Result<Tensor<F>> {
    let mut cursor = bytes;
    read_tensor(&mut cursor)
}

pub fn save<F: Element>(path: impl AsRef<Path>, t: &Tensor<F>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load<F: Element>(path: impl AsRef<Path>) -> Result<Tensor<F>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new([2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"OGT1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..24], &1u64.to_le_bytes());
        assert_eq!(b[24], 0);
        assert_eq!(&b[25..29], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 33);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode::<f64>(b"OGT2\0\0\0\0").is_err());
        let mut b = encode(&Tensor::<f64>::scalar(1.0));
        b.truncate(b.len() - 1);
        assert!(decode::<f64>(&b).is_err());
    }

    #[test]
    fn single_widens_exactly() {
        let t = Tensor::<f32>::new([3], vec![0.1, 1e-30, -7.0]).unwrap();
        let back: Tensor<f64> = decode(&encode(&t)).unwrap();
        assert_eq!(back, t.cast::<f64>());
    }

    proptest! {
        #[test]
        fn double_round_trip(dims in prop::collection::vec(1usize..4, 0..=5), seed in any::<u64>()) {
            let mut rng = crate::numerics::Rng::new(seed);
            let t: Tensor<f64> = rng.normal_tensor(&dims, 3.0).unwrap();
            let back: Tensor<f64> = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
