//! The `FVT1` container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0..4   magic "FVT1"
//! 4      version (1)
//! 5      dtype (1 = float32)
//! 6      rank (1 or 3)
//! 7      flags (bit 0: values declared nonnegative)
//! 8..    rank x u32 dims
//! ..     row-major float32 payload, (height, width, channels) for rank 3
//! ```
//!
//! Values live in memory as `f64` and are rounded to `f32` on write; anything
//! read from disk is exactly representable, so read/write cycles are
//! bit-exact.

use std::fs;
use std::path::Path;

use super::{FeatureMap, GlobalVector, Tensor};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 4] = b"FVT1";
pub const VERSION: u8 = 1;
const DTYPE_F32: u8 = 1;
const FLAG_NONNEGATIVE: u8 = 0b1;
/// Bytes before the dims array.
pub const HEADER_FIXED_LEN: usize = 8;

pub fn encode(tensor: &Tensor) -> Result<Vec<u8>> {
    let (dims, data, nonneg): (Vec<usize>, &[f64], bool) = match tensor {
        Tensor::Vector(v) => (vec![v.data().len()], v.data(), v.is_nonnegative()),
        Tensor::Map(m) => (
            vec![m.height(), m.width(), m.channels()],
            m.data(),
            m.is_nonnegative(),
        ),
    };
    let mut out = Vec::with_capacity(HEADER_FIXED_LEN + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(dims.len() as u8);
    out.push(if nonneg { FLAG_NONNEGATIVE } else { 0 });
    for &d in &dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::Shape(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for (i, &v) in data.iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::Data(format!(
                "value {v} at index {i} is not representable as float32"
            )));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing FVT1 magic".into()));
    }
    if bytes.len() < HEADER_FIXED_LEN {
        return Err(Error::Corrupt(format!(
            "header truncated at {} bytes",
            bytes.len()
        )));
    }
    let (version, dtype, rank, flags) = (bytes[4], bytes[5], bytes[6], bytes[7]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype {dtype}")));
    }
    if rank != 1 && rank != 3 {
        return Err(Error::Format(format!("unsupported rank {rank}")));
    }
    if flags & !FLAG_NONNEGATIVE != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#010b}")));
    }
    let rank = rank as usize;
    let dims_end = HEADER_FIXED_LEN + 4 * rank;
    if bytes.len() < dims_end {
        return Err(Error::Corrupt("dims truncated".into()));
    }
    let dims: Vec<usize> = bytes[HEADER_FIXED_LEN..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    if dims.contains(&0) {
        return Err(Error::Corrupt(format!("zero dimension in {dims:?}")));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Corrupt(format!("dims {dims:?} overflow")))?;
    let payload = &bytes[dims_end..];
    let expected = count
        .checked_mul(4)
        .ok_or_else(|| Error::Corrupt(format!("dims {dims:?} overflow")))?;
    if payload.len() != expected {
        return Err(Error::Corrupt(format!(
            "shape {dims:?} needs {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let nonneg = flags & FLAG_NONNEGATIVE != 0;
    let tensor = if rank == 1 {
        let v = GlobalVector::new(data, "")?;
        Tensor::Vector(if nonneg { v.declare_nonnegative()? } else { v })
    } else {
        let m = FeatureMap::new(dims[0], dims[1], dims[2], data)?;
        Tensor::Map(if nonneg { m.declare_nonnegative()? } else { m })
    };
    Ok(tensor)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_tensor(tensor: &Tensor, path: &Path) -> Result<()> {
    write_atomic(path, &encode(tensor)?)
}

/// Reads a rank-3 tensor, failing on rank 1.
pub fn read_map(path: &Path) -> Result<FeatureMap> {
    match read_tensor(path)? {
        Tensor::Map(m) => Ok(m),
        Tensor::Vector(_) => Err(Error::Shape(format!(
            "{}: expected a rank-3 tensor, found rank 1",
            path.display()
        ))),
    }
}

/// Reads a rank-1 tensor, failing on rank 3.
pub fn read_vector(path: &Path) -> Result<GlobalVector> {
    match read_tensor(path)? {
        Tensor::Vector(v) => Ok(v),
        Tensor::Map(_) => Err(Error::Shape(format!(
            "{}: expected a rank-1 tensor, found rank 3",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vector_round_trip() {
        let v = GlobalVector::new(vec![1.0, 2.0, 3.0, 4.0], "").unwrap();
        let bytes = encode(&v.clone().into()).unwrap();
        assert_eq!(bytes.len(), HEADER_FIXED_LEN + 4 + 16);
        assert_eq!(decode(&bytes).unwrap(), Tensor::Vector(v));
    }

    #[test]
    fn map_file_size_matches_format_arithmetic() {
        let m = FeatureMap::new(2, 2, 3, (0..12).map(f64::from).collect()).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("m.fvt");
        write_tensor(&m.clone().into(), &path).unwrap();
        let len = fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(len, HEADER_FIXED_LEN + 12 + 4 * 12);
        assert_eq!(read_map(&path).unwrap(), m);
        assert!(matches!(read_vector(&path), Err(Error::Shape(_))));
    }

    #[test]
    fn truncated_payload_is_corruption() {
        let m = FeatureMap::new(2, 2, 3, vec![0.5; 12]).unwrap();
        let bytes = encode(&m.into()).unwrap();
        for cut in [bytes.len() - 1, bytes.len() - 4, 21, 9] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::Corrupt(_))),
                "cut at {cut}"
            );
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Corrupt(_))));
    }

    #[test]
    fn header_fields_are_checked() {
        let v = GlobalVector::new(vec![1.0], "").unwrap();
        let good = encode(&v.into()).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[5] = 2;
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[6] = 2;
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut bad = good;
        bad[7] = 0b10;
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn nonfinite_and_flag_violations_are_data_errors() {
        let v = GlobalVector::new(vec![1.0, 2.0], "").unwrap();
        let mut bytes = encode(&v.into()).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Data(_))));
        bytes[n - 4..].copy_from_slice(&(-1.0f32).to_le_bytes());
        assert!(decode(&bytes).is_ok());
        bytes[7] = 1;
        assert!(matches!(decode(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn overflowing_value_rejected_on_write() {
        let v = GlobalVector::new(vec![1e300], "").unwrap();
        assert!(matches!(encode(&v.into()), Err(Error::Data(_))));
    }

    #[test]
    fn zero_dim_is_corruption() {
        let mut bytes = Vec::from(&MAGIC[..]);
        bytes.extend_from_slice(&[1, 1, 1, 0]);
        bytes.extend_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Corrupt(_))));
    }

    proptest! {
        #[test]
        fn random_maps_round_trip_bit_exact(
            h in 1usize..8, w in 1usize..8, c in 1usize..6,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..h * w * c)
                .map(|_| rng.random_range(-1e3f32..1e3) as f64)
                .collect();
            let m = FeatureMap::new(h, w, c, data).unwrap();
            let back = decode(&encode(&m.clone().into()).unwrap()).unwrap();
            let Tensor::Map(back) = back else { panic!("rank changed") };
            prop_assert!(back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back, m);
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode(&bytes);
        }

        #[test]
        fn valid_header_with_garbage_tail_never_panics(
            rank in prop_oneof![Just(1u8), Just(3u8), any::<u8>()],
            flags in any::<u8>(),
            tail in proptest::collection::vec(any::<u8>(), 0..80),
        ) {
            let mut bytes = Vec::from(&MAGIC[..]);
            bytes.extend_from_slice(&[1, 1, rank, flags]);
            bytes.extend_from_slice(&tail);
            let _ = decode(&bytes);
        }
    }
}
