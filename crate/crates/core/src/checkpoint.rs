//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MXPH"  u32 version
//! repeated until EOF:
//!     u32 name_len  name_len bytes UTF-8 name
//!     u64 rows  u64 cols  rows*cols f64 values (row-major)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 4] = b"MXPH";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Matrix)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for (name, m) in tensors {
        let bytes = name.as_bytes();
        let len = u32::try_from(bytes.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(m.rows() as u64).to_le_bytes())?;
        w.write_all(&(m.cols() as u64).to_le_bytes())?;
        for v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Matrix)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(cur.array()?);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let len = u32::from_le_bytes(cur.array()?) as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_owned();
        let rows = u64::from_le_bytes(cur.array()?) as usize;
        let cols = u64::from_le_bytes(cur.array()?) as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} too large")))?;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(f64::from_le_bytes(cur.array()?));
        }
        let m = Matrix::new(rows, cols, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, m));
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, tensors: &[(String, Matrix)]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_tensors(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Matrix)>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    read_tensors(std::io::BufReader::new(file))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("ab".into(), Matrix::scalar(1.5))]).unwrap();
        assert_eq!(&buf[..4], b"MXPH");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), FORMAT_VERSION);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(&buf[12..14], b"ab");
        assert_eq!(buf.len(), 14 + 16 + 8);
    }

    #[test]
    fn truncated_and_corrupt_inputs_fail() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("x".into(), Matrix::ones(2, 2))]).unwrap();
        assert!(read_tensors(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'Z';
        assert!(read_tensors(&bad[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            entries in proptest::collection::vec(
                ("[a-z/0-9]{1,12}", 1usize..5, 1usize..5, any::<u64>()),
                0..5,
            )
        ) {
            let tensors: Vec<(String, Matrix)> = entries
                .into_iter()
                .map(|(name, r, c, bits)| {
                    let m = Matrix::from_fn(r, c, |i, j| f64::from_bits(bits.rotate_left((i * 7 + j) as u32)));
                    (name, m)
                })
                .collect();
            let mut buf = Vec::new();
            write_tensors(&mut buf, &tensors).unwrap();
            let back = read_tensors(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for ((n1, m1), (n2, m2)) in tensors.iter().zip(&back) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(m1.shape(), m2.shape());
                for (a, b) in m1.data().iter().zip(m2.data()) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }
}
