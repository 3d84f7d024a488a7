//! Binary PGM (`P5`, 8-bit) reading and writing.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PgmError {
    #[error("not a binary PGM file")]
    Magic,
    #[error("bad PGM header")]
    Header,
    #[error("only 8-bit PGM is supported (maxval {0})")]
    Depth(usize),
    #[error("PGM data has {found} bytes, header says {expected}")]
    Length { expected: usize, found: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn is_pgm(bytes: &[u8]) -> bool {
    bytes.starts_with(b"P5")
}

pub fn parse(bytes: &[u8]) -> Result<Gray, PgmError> {
    if !is_pgm(bytes) {
        return Err(PgmError::Magic);
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(PgmError::Header)?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PgmError::Header);
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(PgmError::Depth(maxval));
    }
    let data = &bytes[pos + 1..];
    if data.len() != width * height {
        return Err(PgmError::Length { expected: width * height, found: data.len() });
    }
    Ok(Gray { width, height, pixels: data.to_vec() })
}

pub fn write(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}
