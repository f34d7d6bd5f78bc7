//! Parameter checkpoint serialization.
//!
//! Layout: magic `M2SW`, u32 tensor count, then per tensor
//! (u16 name length, name bytes, u32 rows, u32 cols, rows*cols f32 values),
//! all little-endian. Values are stored as f32; loading widens back to f64.

use super::matrix::Matrix;
use super::{NumError, Result};
use std::io::{Read, Write};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"M2SW";

/// Writes named tensors in the given order.
pub fn save_checkpoint<W: Write>(out: &mut W, tensors: &[(String, &Matrix)]) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    let count = u32::try_from(tensors.len())
        .map_err(|_| NumError::InvalidArgument("too many tensors".into()))?;
    out.write_all(&count.to_le_bytes())?;
    for (name, m) in tensors {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len())
            .map_err(|_| NumError::InvalidArgument(format!("tensor name too long: {name}")))?;
        out.write_all(&name_len.to_le_bytes())?;
        out.write_all(name_bytes)?;
        out.write_all(&(m.rows() as u32).to_le_bytes())?;
        out.write_all(&(m.cols() as u32).to_le_bytes())?;
        for &v in m.data() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a checkpoint back as (name, matrix) pairs in file order.
pub fn load_checkpoint<R: Read>(input: &mut R) -> Result<Vec<(String, Matrix)>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NumError::CheckpointFormat(format!(
            "bad magic {:?}, expected {:?}",
            magic, CHECKPOINT_MAGIC
        )));
    }
    let count = read_u32(input)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(input)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        input.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| NumError::CheckpointFormat("tensor name is not UTF-8".into()))?;
        let rows = read_u32(input)? as usize;
        let cols = read_u32(input)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 4];
        for _ in 0..rows * cols {
            input.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        tensors.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    Ok(tensors)
}

fn read_u16<R: Read>(input: &mut R) -> Result<u16> {
    let mut buf = [0u8; 2];
    input.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trips_f32_valued_tensors_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let rows = rng.gen_range(1..6);
            let cols = rng.gen_range(1..6);
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| rng.gen::<f32>() as f64 * 4.0 - 2.0)
                .map(|v| v as f32 as f64)
                .collect();
            let m = Matrix::from_vec(rows, cols, data).unwrap();
            let tensors = vec![("mir.memory".to_string(), &m)];
            let mut bytes = Vec::new();
            save_checkpoint(&mut bytes, &tensors).unwrap();
            let loaded = load_checkpoint(&mut bytes.as_slice()).unwrap();
            assert_eq!(loaded.len(), 1);
            assert_eq!(loaded[0].0, "mir.memory");
            assert_eq!(loaded[0].1, m);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"XXXX\x00\x00\x00\x00".to_vec();
        assert!(matches!(
            load_checkpoint(&mut bytes.as_slice()),
            Err(NumError::CheckpointFormat(_))
        ));
    }

    #[test]
    fn truncated_file_is_an_io_error() {
        let m = Matrix::zeros(2, 2);
        let mut bytes = Vec::new();
        save_checkpoint(&mut bytes, &[("t".into(), &m)]).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(load_checkpoint(&mut bytes.as_slice()).is_err());
    }
}
