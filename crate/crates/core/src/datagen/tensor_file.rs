use std::io::{self, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DCLT";

/// Writes `[c][h][w]` f32 data: magic, three u32 dims, then values, all little-endian.
pub fn write_tensor(path: &Path, shape: (usize, usize, usize), data: &[f32]) -> io::Result<()> {
    let (c, h, w) = shape;
    if data.len() != c * h * w {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "tensor length does not match shape"));
    }
    let mut buf = Vec::with_capacity(16 + 4 * data.len());
    buf.extend_from_slice(MAGIC);
    for d in [c, h, w] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)
}

pub fn read_tensor(path: &Path) -> io::Result<((usize, usize, usize), Vec<f32>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {m}", path.display()));
    if buf.len() < 16 || &buf[..4] != MAGIC {
        return Err(bad("not a tensor file"));
    }
    let dim = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let shape = (dim(0), dim(1), dim(2));
    let n = shape.0 * shape.1 * shape.2;
    if buf.len() != 16 + 4 * n {
        return Err(bad("length does not match header"));
    }
    let data = buf[16..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    Ok((shape, data))
}
