//! Tensor wire format: little-endian header (rank, extents as u64) followed
//! by the raw doubles. Shared by checkpoints, corpus files and reference
//! inputs.

use super::Tensor;
use crate::error::{Error, Result};
use std::io::{Read, Write};

pub fn write_tensor<W: Write>(out: &mut W, t: &Tensor) -> Result<()> {
    out.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &e in t.shape() {
        out.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(input: &mut R) -> Result<Tensor> {
    let rank = read_u64(input)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel = 1usize;
    for _ in 0..rank {
        let e = read_u64(input)? as usize;
        numel = numel
            .checked_mul(e)
            .ok_or_else(|| Error::Format("tensor extent overflow".into()))?;
        shape.push(e);
    }
    let mut data = vec![0.0; numel];
    let mut buf = [0u8; 8];
    for v in data.iter_mut() {
        input.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Tensor::new(shape, data)
}

pub(crate) fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_little_endian() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[0..8], &2u64.to_le_bytes()); // rank
        assert_eq!(&buf[8..16], &2u64.to_le_bytes()); // extents
        assert_eq!(&buf[16..24], &1u64.to_le_bytes());
        assert_eq!(&buf[24..32], &1.0f64.to_le_bytes());
        assert_eq!(&buf[32..40], &(-2.5f64).to_le_bytes());
    }

    proptest! {
        #[test]
        fn round_trip_preserves_shape_and_bits(
            rows in 1usize..6,
            cols in 1usize..6,
            seed in any::<u64>(),
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::randn(&[rows, cols], 3.0, &mut rng);
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
