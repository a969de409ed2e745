//! Tensor serialization: `"TNSR"` magic, u32 rank, u32 dims, then
//! little-endian f32 payload. Checkpoints concatenate these records.

use std::io::{Read, Write};

use super::{Real, Tensor};

const MAGIC: &[u8; 4] = b"TNSR";

#[derive(Debug, thiserror::Error)]
pub enum TensorIoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected TNSR")]
    BadMagic,
    #[error("header dims inconsistent with payload")]
    BadHeader,
}

pub fn write_tensor<S: Real, W: Write>(w: &mut W, t: &Tensor<S>) -> Result<(), TensorIoError> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor<f32>, TensorIoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorIoError::BadMagic);
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank > 8 {
        return Err(TensorIoError::BadHeader);
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u32buf)?;
        shape.push(u32::from_le_bytes(u32buf) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut u32buf)?;
        data.push(f32::from_le_bytes(u32buf));
    }
    Ok(Tensor::new(shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let t = Tensor::<f32>::rand_uniform(
            &[2, 3, 4],
            -5.0,
            5.0,
            &mut ChaCha8Rng::seed_from_u64(11),
        );
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"TNSR");
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x80\x3f";
        assert!(matches!(
            read_tensor(&mut buf.as_slice()),
            Err(TensorIoError::BadMagic)
        ));
    }
}
