//! PACTBLOB tensor file format.
//!
//! Layout: 8-byte magic `PACTBLOB`, u32 version (=1), u32 rank,
//! rank x u64 extents, then little-endian f32 values in row-major order.
//! Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PACTBLOB";
pub const VERSION: u32 = 1;

pub fn write_tensor_blob(t: &Tensor, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(t.rank() as u32).to_le_bytes()).map_err(io)?;
    for &ext in t.shape() {
        w.write_all(&(ext as u64).to_le_bytes()).map_err(io)?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn read_tensor_blob(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut offset = 0u64;
    let format_err = |offset: u64, reason: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        reason,
    };
    let mut read_exact = |buf: &mut [u8], offset: &mut u64, what: &str| -> Result<()> {
        r.read_exact(buf).map_err(|_| {
            format_err(*offset, format!("truncated while reading {what}"))
        })?;
        *offset += buf.len() as u64;
        Ok(())
    };

    let mut magic = [0u8; 8];
    read_exact(&mut magic, &mut offset, "magic")?;
    if &magic != MAGIC {
        return Err(format_err(0, format!("bad magic {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    read_exact(&mut u32buf, &mut offset, "version")?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(format_err(8, format!("unsupported version {version}")));
    }
    read_exact(&mut u32buf, &mut offset, "rank")?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank > 8 {
        return Err(format_err(12, format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut u64buf = [0u8; 8];
    for i in 0..rank {
        read_exact(&mut u64buf, &mut offset, "extent")?;
        let ext = u64::from_le_bytes(u64buf) as usize;
        if ext == 0 {
            return Err(format_err(offset - 8, format!("zero extent at dim {i}")));
        }
        shape.push(ext);
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    let mut f32buf = [0u8; 4];
    for _ in 0..count {
        read_exact(&mut f32buf, &mut offset, "payload")?;
        data.push(f32::from_le_bytes(f32buf));
    }
    // trailing bytes are a format error too
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io(path, e))? != 0 {
        return Err(format_err(offset, "trailing bytes after payload".into()));
    }
    Tensor::from_vec(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn roundtrip_is_bit_exact_for_all_ranks() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rng_from(1, 0);
        let shapes: [&[usize]; 5] = [&[], &[7], &[3, 4], &[2, 3, 4], &[2, 2, 3, 2]];
        for (i, shape) in shapes.iter().enumerate() {
            let t = Tensor::randn(shape, 2.0, &mut rng);
            let path = dir.path().join(format!("t{i}.bin"));
            write_tensor_blob(&t, &path).unwrap();
            let back = read_tensor_blob(&path).unwrap();
            assert_eq!(t.shape(), back.shape());
            for (a, b) in t.data().iter().zip(back.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.bin");
        let t = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_tensor_blob(&t, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 6]).unwrap();
        let err = read_tensor_blob(&path).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert!(offset > 0),
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOTABLOBxxxxxxxxxxxx").unwrap();
        assert!(matches!(
            read_tensor_blob(&path),
            Err(Error::Format { .. })
        ));
    }
}
