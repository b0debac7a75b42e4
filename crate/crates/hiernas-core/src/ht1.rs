//! "HT1" binary tensor file format.
//!
//! Layout: magic bytes `HT1\0`, u32 rank, u32 dims[rank], then the payload as
//! little-endian f32 in row-major order. Used for feature-map dumps and
//! dataset storage.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"HT1\0";

pub fn write<W: Write>(mut w: W, tensor: &Tensor) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&(tensor.shape.len() as u32).to_le_bytes())?;
    for &d in &tensor.shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in &tensor.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad HT1 magic {:?}", magic)));
    }
    let rank = read_u32(&mut r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible HT1 rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(&mut r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(shape, data)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_file(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write(&mut w, tensor)?;
    w.flush()?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Tensor> {
    read(BufReader::new(File::open(path)?))
}

/// Incremental writer for dumps whose leading dimension is known up front.
/// `push` appends one row of `row_len` values; `finish` checks the count.
pub struct StreamWriter<W: Write> {
    inner: W,
    rows_expected: usize,
    rows_written: usize,
    row_len: usize,
}

impl<W: Write> StreamWriter<W> {
    pub fn new(mut inner: W, rows: usize, row_len: usize) -> Result<Self> {
        inner.write_all(&MAGIC)?;
        inner.write_all(&2u32.to_le_bytes())?;
        inner.write_all(&(rows as u32).to_le_bytes())?;
        inner.write_all(&(row_len as u32).to_le_bytes())?;
        Ok(StreamWriter { inner, rows_expected: rows, rows_written: 0, row_len })
    }

    pub fn push(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.row_len {
            return Err(Error::Format(format!(
                "HT1 stream row has {} values, expected {}",
                row.len(),
                self.row_len
            )));
        }
        if self.rows_written == self.rows_expected {
            return Err(Error::Format("HT1 stream already full".into()));
        }
        for &v in row {
            self.inner.write_all(&v.to_le_bytes())?;
        }
        self.rows_written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.rows_written != self.rows_expected {
            return Err(Error::Format(format!(
                "HT1 stream closed after {} of {} rows",
                self.rows_written, self.rows_expected
            )));
        }
        self.inner.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_bytes() {
        let t = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write(&mut buf, &t).unwrap();
        let expect: Vec<u8> = [
            b"HT1\0".to_vec(),
            1u32.to_le_bytes().to_vec(),
            2u32.to_le_bytes().to_vec(),
            1.0f32.to_le_bytes().to_vec(),
            (-2.0f32).to_le_bytes().to_vec(),
        ]
        .concat();
        assert_eq!(buf, expect);
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"XT1\0\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x80\x3f".to_vec();
        assert!(read(&buf[..]).is_err());
    }

    #[test]
    fn stream_writer_matches_batch_write() {
        let rows = vec![vec![1.0f32, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let mut streamed = Vec::new();
        let mut sw = StreamWriter::new(&mut streamed, 3, 2).unwrap();
        for r in &rows {
            sw.push(r).unwrap();
        }
        sw.finish().unwrap();

        let t = Tensor::new(vec![3, 2], rows.concat()).unwrap();
        let mut batch = Vec::new();
        write(&mut batch, &t).unwrap();
        assert_eq!(streamed, batch);
    }

    proptest! {
        #[test]
        fn roundtrip_bit_exact(
            dims in proptest::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let numel: usize = dims.iter().product();
            let data: Vec<f32> = (0..numel).map(|_| rng.random_range(-1e6f32..1e6)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let mut buf = Vec::new();
            write(&mut buf, &t).unwrap();
            let back = read(&buf[..]).unwrap();
            prop_assert_eq!(back.shape, t.shape);
            prop_assert_eq!(
                back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
