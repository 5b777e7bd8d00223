//! "SPDE" tensor frames: magic `SPDE`, u32 version, u64 rows, u32 dim, then
//! `rows × dim` little-endian f32 values in row-major order. A file holds one
//! frame or, for model weights, several frames back to back.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use spade_core::Matrix;

use crate::error::{Result, SpadeError};

pub const MAGIC: [u8; 4] = *b"SPDE";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Self {
        assert_eq!(rows * dim, data.len(), "tensor shape");
        Self { rows, dim, data }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self::new(m.rows(), m.cols(), m.as_slice().iter().map(|&v| v as f32).collect())
    }

    /// A `1 × n` frame.
    pub fn from_row(v: &[f64]) -> Self {
        Self::new(1, v.len(), v.iter().map(|&x| x as f32).collect())
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.rows, self.dim, self.data.iter().map(|&v| f64::from(v)).collect())
            .expect("tensor shape")
    }

    pub fn to_row(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

pub fn write_frame<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rows as u64).to_le_bytes())?;
    let dim = u32::try_from(t.dim).map_err(|_| std::io::Error::new(ErrorKind::InvalidInput, "dim exceeds u32"))?;
    w.write_all(&dim.to_le_bytes())?;
    for v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads the next frame, or `None` at a clean end of input.
pub fn read_frame<R: Read>(r: &mut R, path: &Path) -> Result<Option<Tensor>> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(SpadeError::tensor(path, "truncated frame header")),
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(SpadeError::io(path, e)),
        }
    }
    if header[..4] != MAGIC {
        return Err(SpadeError::tensor(path, "bad magic, expected \"SPDE\""));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(SpadeError::tensor(path, format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(header[8..16].try_into().unwrap());
    let dim = u32::from_le_bytes(header[16..20].try_into().unwrap());
    let len = usize::try_from(rows)
        .ok()
        .and_then(|rows| rows.checked_mul(dim as usize))
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| SpadeError::tensor(path, format!("frame of {rows} × {dim} is too large")))?;
    let mut bytes = vec![0u8; len * 4];
    r.read_exact(&mut bytes).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => SpadeError::tensor(path, format!("truncated payload for {rows} × {dim}")),
        _ => SpadeError::io(path, e),
    })?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Some(Tensor::new(rows as usize, dim as usize, data)))
}

pub fn write_tensors(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let file = File::create(path).map_err(|e| SpadeError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in tensors {
        write_frame(&mut w, t).map_err(|e| SpadeError::io(path, e))?;
    }
    w.flush().map_err(|e| SpadeError::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<Tensor>> {
    let file = File::open(path).map_err(|e| SpadeError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut out = Vec::new();
    while let Some(t) = read_frame(&mut r, path)? {
        out.push(t);
    }
    Ok(out)
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    write_tensors(path, std::slice::from_ref(tensor))
}

/// Reads a file that must hold exactly one frame.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut frames = read_tensors(path)?;
    match frames.len() {
        1 => Ok(frames.pop().unwrap()),
        n => Err(SpadeError::tensor(path, format!("expected one frame, found {n}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &Tensor::new(2, 1, vec![1.0, -2.5])).unwrap();
        assert_eq!(&buf[..4], b"SPDE");
        assert_eq!(buf[4..8], [1, 0, 0, 0]);
        assert_eq!(buf[8..16], [2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(buf[16..20], [1, 0, 0, 0]);
        assert_eq!(buf[20..24], 1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 28);
    }

    #[test]
    fn frames_round_trip_and_reject_damage() {
        let p = Path::new("mem");
        let a = Tensor::new(2, 3, vec![0.0, 1.0, f32::MIN_POSITIVE, -0.0, 7.5, 1e30]);
        let b = Tensor::new(0, 4, vec![]);
        let mut buf = Vec::new();
        write_frame(&mut buf, &a).unwrap();
        write_frame(&mut buf, &b).unwrap();
        let mut r = &buf[..];
        assert_eq!(read_frame(&mut r, p).unwrap().unwrap(), a);
        assert_eq!(read_frame(&mut r, p).unwrap().unwrap(), b);
        assert!(read_frame(&mut r, p).unwrap().is_none());

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_frame(&mut &bad[..], p).is_err());
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(read_frame(&mut &bad[..], p).is_err());
        assert!(read_frame(&mut &buf[..30], p).is_err());
        assert!(read_frame(&mut &buf[..10], p).is_err());
    }
}
