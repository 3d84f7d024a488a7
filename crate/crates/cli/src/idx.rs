//! IDX containers as used by the MNIST distribution.
//!
//! Big-endian throughout: a 4-byte magic (`0x00000803` for a stack of
//! images, `0x00000801` for labels), one 4-byte size per dimension, then the
//! raw unsigned bytes.

use thiserror::Error;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("file too short for an IDX header")]
    Short,
    #[error("magic {found:#010x}, expected {expected:#010x}")]
    Magic { found: u32, expected: u32 },
    #[error("header promises {expected} data bytes, file has {found}")]
    Length { expected: usize, found: usize },
    #[error("index {index} out of range for {count} items")]
    Index { index: usize, count: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl IdxImages {
    pub fn parse(bytes: &[u8]) -> Result<Self, IdxError> {
        let (dims, data) = parse(bytes, IMAGES_MAGIC, 3)?;
        Ok(Self { count: dims[0], rows: dims[1], cols: dims[2], data: data.to_vec() })
    }

    pub fn image(&self, index: usize) -> Result<&[u8], IdxError> {
        if index >= self.count {
            return Err(IdxError::Index { index, count: self.count });
        }
        let size = self.rows * self.cols;
        Ok(&self.data[index * size..(index + 1) * size])
    }
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    let (_, data) = parse(bytes, LABELS_MAGIC, 1)?;
    Ok(data.to_vec())
}

fn parse(bytes: &[u8], magic: u32, rank: usize) -> Result<(Vec<usize>, &[u8]), IdxError> {
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(IdxError::Short);
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    if word(0) != magic {
        return Err(IdxError::Magic { found: word(0), expected: magic });
    }
    let dims: Vec<usize> = (1..=rank).map(|i| word(i) as usize).collect();
    let expected = dims.iter().product::<usize>();
    let data = &bytes[header..];
    if data.len() != expected {
        return Err(IdxError::Length { expected, found: data.len() });
    }
    Ok((dims, data))
}
