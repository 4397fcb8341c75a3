//! The `SFT1` binary tensor format.
//!
//! Layout: magic `SFT1`, `u32` LE rank, `rank` x `u32` LE extents, then the
//! row-major elements as `f64` LE.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, SftError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SFT1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn write<W: Write>(mut w: W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&encode(t))
}

/// Decodes one tensor from `bytes`. `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let fail = |offset: usize, msg: &str| SftError::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.to_string(),
    };
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if bytes.len() < pos + n {
            return Err(fail(pos, &format!("truncated tensor: expected {what}")));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(4, "magic")? != MAGIC {
        return Err(fail(0, "bad magic, expected SFT1"));
    }
    let rank = u32::from_le_bytes(take(4, "rank")?.try_into().unwrap()) as usize;
    if rank == 0 {
        return Err(fail(4, "rank must be positive"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let e = u32::from_le_bytes(take(4, "extent")?.try_into().unwrap()) as usize;
        if e == 0 {
            return Err(fail(pos - 4, "zero extent"));
        }
        shape.push(e);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| fail(8, "extent product overflows"))?;
    let body = take(
        numel.checked_mul(8).ok_or_else(|| fail(8, "tensor too large"))?,
        "element data",
    )?;
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if pos != bytes.len() {
        return Err(fail(pos, "trailing bytes after tensor"));
    }
    Tensor::new(shape, data)
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| SftError::io(path, e))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| SftError::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"SFT1");
        assert_eq!(&b[4..8], &[2, 0, 0, 0]);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..16], &[1, 0, 0, 0]);
        assert_eq!(&b[16..24], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 32);
    }

    #[test]
    fn bad_magic_and_truncation_report_offsets() {
        let p = Path::new("x.sft1");
        let mut b = encode(&Tensor::zeros(&[3]));
        b[0] = b'X';
        let err = decode(&b, p).unwrap_err().to_string();
        assert!(err.contains("bad magic") && err.contains("offset 0"), "{err}");

        let b = encode(&Tensor::zeros(&[3]));
        let err = decode(&b[..20], p).unwrap_err().to_string();
        assert!(err.contains("truncated") && err.contains("offset 12"), "{err}");
        assert!(err.contains("x.sft1"));
    }

    proptest! {
        #[test]
        fn roundtrip(shape in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::uniform(&shape, 1e3, &mut rng);
            let back = decode(&encode(&t), Path::new("mem")).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
