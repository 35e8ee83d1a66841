//! Binary tensor (`.qt`) and compressed map (`.smfm`) files.
//!
//! `.qt`:   "QTSR" | 0x01 | int_bits u8 | frac_bits u8 | rank u8 | rank x u32 dims | i16 values
//! `.smfm`: "SMFM" | 0x01 | int_bits u8 | frac_bits u8 | C u32 | H u32 | W u32 | nnz u32
//!          | ceil(C*H*W/8) SM bytes | nnz x i16 values
//!
//! All integers are little-endian.

use std::fs;
use std::path::Path;

use crate::codec::SparseFeatureMap;
use crate::error::{Error, Result};
use crate::fxp::{checked_product, QFormat, QTensor, MAX_RANK};

pub const QT_MAGIC: &[u8; 4] = b"QTSR";
pub const SMFM_MAGIC: &[u8; 4] = b"SMFM";
pub const VERSION: u8 = 0x01;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if left < n {
            return Err(Error::Truncated {
                offset: self.buf.len(),
                expected: n - left,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i16s(&mut self, n: usize) -> Result<Vec<i16>> {
        let bytes = n
            .checked_mul(2)
            .ok_or_else(|| Error::malformed(self.pos, "value count overflows"))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]))
            .collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<QFormat> {
        let m = self.take(4)?;
        if m != magic {
            return Err(Error::malformed(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(m),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let at = self.pos;
        let v = self.u8()?;
        if v != VERSION {
            return Err(Error::malformed(at, format!("unsupported version {v:#04x}")));
        }
        let at = self.pos;
        let i = self.u8()?;
        let f = self.u8()?;
        QFormat::new(i, f).map_err(|e| Error::malformed(at, e.to_string()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::malformed(
                self.pos,
                format!("trailing data: {} unexpected bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn qt_to_bytes(t: &QTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 2 * t.len());
    out.extend_from_slice(QT_MAGIC);
    out.push(VERSION);
    out.push(t.fmt().int_bits());
    out.push(t.fmt().frac_bits());
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn qt_from_bytes(buf: &[u8]) -> Result<QTensor> {
    let mut r = Reader { buf, pos: 0 };
    let fmt = r.header(QT_MAGIC)?;
    let at = r.pos;
    let rank = r.u8()? as usize;
    if !(1..=MAX_RANK).contains(&rank) {
        return Err(Error::malformed(at, format!("rank {rank} not in 1..={MAX_RANK}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u32()? as usize);
    }
    let n = checked_product(&dims).map_err(|e| Error::malformed(at, e.to_string()))?;
    let data = r.i16s(n)?;
    r.finish()?;
    QTensor::new(dims, fmt, data)
}

pub fn smfm_to_bytes(s: &SparseFeatureMap) -> Vec<u8> {
    let (c, h, w) = s.dims();
    let sm = s.sm_bytes();
    let mut out = Vec::with_capacity(23 + sm.len() + 2 * s.nnz());
    out.extend_from_slice(SMFM_MAGIC);
    out.push(VERSION);
    out.push(s.fmt().int_bits());
    out.push(s.fmt().frac_bits());
    for d in [c, h, w, s.nnz()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&sm);
    for &v in s.nzvl() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn smfm_from_bytes(buf: &[u8]) -> Result<SparseFeatureMap> {
    let mut r = Reader { buf, pos: 0 };
    let fmt = r.header(SMFM_MAGIC)?;
    let dims_at = r.pos;
    let c = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let nnz = r.u32()? as usize;
    let pixels = checked_product(&[c, h, w]).map_err(|e| Error::malformed(dims_at, e.to_string()))?;
    if nnz > pixels {
        return Err(Error::malformed(dims_at + 12, format!("nnz {nnz} exceeds {pixels} pixels")));
    }
    let sm_at = r.pos;
    let sm_bytes = r.take(pixels.div_ceil(8))?;
    let mut sm = vec![0u64; pixels.div_ceil(64)];
    for (i, &b) in sm_bytes.iter().enumerate() {
        sm[i / 8] |= (b as u64) << (8 * (i % 8));
    }
    let values_at = r.pos;
    let nzvl = r.i16s(nnz)?;
    r.finish()?;
    if let Some(i) = nzvl.iter().position(|&v| v == 0) {
        return Err(Error::malformed(values_at + 2 * i, "zero value in non-zero value list"));
    }
    SparseFeatureMap::from_parts((c, h, w), fmt, sm, nzvl).map_err(|e| match e {
        Error::MalformedStream { msg, .. } => Error::malformed(sm_at, msg),
        other => other,
    })
}

pub fn read_qt(path: &Path) -> Result<QTensor> {
    qt_from_bytes(&read_file(path)?)
}

pub fn read_smfm(path: &Path) -> Result<SparseFeatureMap> {
    smfm_from_bytes(&read_file(path)?)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
        _ => Error::Io(e),
    })
}

/// Writes via a temporary file in the same directory and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}
