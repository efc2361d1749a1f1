//! Little-endian helpers for the binary artifact formats.

use std::io::{self, Read, Write};

pub(crate) fn write_magic(w: &mut impl Write, magic: &[u8; 8], version: u32) -> io::Result<()> {
    w.write_all(magic)?;
    write_u32(w, version)
}

/// Reads and checks the magic bytes, returning the stored version.
pub(crate) fn read_magic(r: &mut impl Read, magic: &[u8; 8]) -> io::Result<u32> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    if &buf != magic {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!(
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&buf)
            ),
        ));
    }
    read_u32(r)
}

pub(crate) fn write_u8(w: &mut impl Write, v: u8) -> io::Result<()> {
    w.write_all(&[v])
}

pub(crate) fn read_u8(r: &mut impl Read) -> io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn write_f64(w: &mut impl Write, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn read_f64(r: &mut impl Read) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Length-prefixed f64 slice.
pub(crate) fn write_f64s(w: &mut impl Write, v: &[f64]) -> io::Result<()> {
    write_u64(w, v.len() as u64)?;
    for &x in v {
        write_f64(w, x)?;
    }
    Ok(())
}

pub(crate) fn read_f64s(r: &mut impl Read) -> io::Result<Vec<f64>> {
    let n = read_len(r)?;
    (0..n).map(|_| read_f64(r)).collect()
}

/// Length-prefixed UTF-8 string.
pub(crate) fn write_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    write_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())
}

pub(crate) fn read_str(r: &mut impl Read) -> io::Result<String> {
    let n = read_len(r)?;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

pub(crate) fn write_u32s(w: &mut impl Write, v: &[u32]) -> io::Result<()> {
    write_u64(w, v.len() as u64)?;
    for &x in v {
        write_u32(w, x)?;
    }
    Ok(())
}

pub(crate) fn read_u32s(r: &mut impl Read) -> io::Result<Vec<u32>> {
    let n = read_len(r)?;
    (0..n).map(|_| read_u32(r)).collect()
}

fn read_len(r: &mut impl Read) -> io::Result<usize> {
    let n = read_u64(r)?;
    if n > (1 << 32) {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("implausible length {n}"),
        ));
    }
    Ok(n as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixed_record() {
        let mut buf = Vec::new();
        write_magic(&mut buf, b"TESTMAGI", 3).unwrap();
        write_f64s(&mut buf, &[1.5, -0.0, f64::MAX]).unwrap();
        write_str(&mut buf, "q-7").unwrap();
        let mut r = buf.as_slice();
        assert_eq!(read_magic(&mut r, b"TESTMAGI").unwrap(), 3);
        assert_eq!(read_f64s(&mut r).unwrap(), vec![1.5, -0.0, f64::MAX]);
        assert_eq!(read_str(&mut r).unwrap(), "q-7");
        assert!(r.is_empty());
    }

    #[test]
    fn wrong_magic() {
        let mut buf = Vec::new();
        write_magic(&mut buf, b"AAAAAAAA", 1).unwrap();
        assert!(read_magic(&mut buf.as_slice(), b"BBBBBBBB").is_err());
    }
}
