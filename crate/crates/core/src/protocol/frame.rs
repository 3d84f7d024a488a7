//! Message framing.
//!
//! A frame is a 4-byte big-endian payload length, a 1-byte type tag and the
//! payload. Inside payloads, counts and lengths are 4-byte big-endian
//! integers, a big integer is a length followed by its big-endian magnitude,
//! and strings are length-prefixed UTF-8.
//!
//! | tag | message       | payload                                         |
//! |-----|---------------|-------------------------------------------------|
//! | 1   | HELLO         | model id, N, g                                  |
//! | 2   | INFER_REQUEST | rank, dims, cell count, cells                   |
//! | 3   | SIGN_REQUEST  | cell count, cells                               |
//! | 4   | SIGN_RESPONSE | bit count, bits packed 8 per byte, LSB first    |
//! | 5   | RESULT        | cell count, cells, decimal scale string         |
//! | 6   | ERROR         | 1-byte code, UTF-8 detail (rest of the payload) |

use std::fmt;
use std::io::{self, Read, Write};

use num_bigint::BigUint;
use thiserror::Error;

pub const DEFAULT_MAX_FRAME: usize = 64 << 20;

pub const TAG_HELLO: u8 = 0x01;
pub const TAG_INFER_REQUEST: u8 = 0x02;
pub const TAG_SIGN_REQUEST: u8 = 0x03;
pub const TAG_SIGN_RESPONSE: u8 = 0x04;
pub const TAG_RESULT: u8 = 0x05;
pub const TAG_ERROR: u8 = 0x06;

const HEADER: usize = 5;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("connection closed")]
    Closed,
    #[error("stream ended inside a frame ({got} of {need} bytes)")]
    Incomplete { got: usize, need: usize },
    #[error("frame of {len} bytes exceeds the {max}-byte limit")]
    TooLarge { len: usize, max: usize },
    #[error("unknown message tag {0:#04x}")]
    UnknownTag(u8),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum ErrorCode {
    UnknownModel = 1,
    BadResponse = 2,
    OverflowConfig = 3,
    BadRequest = 4,
    Protocol = 5,
    Internal = 6,
}

impl ErrorCode {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            1 => Self::UnknownModel,
            2 => Self::BadResponse,
            3 => Self::OverflowConfig,
            4 => Self::BadRequest,
            5 => Self::Protocol,
            6 => Self::Internal,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::UnknownModel => "unknown_model",
            Self::BadResponse => "bad_response",
            Self::OverflowConfig => "overflow_config",
            Self::BadRequest => "bad_request",
            Self::Protocol => "protocol",
            Self::Internal => "internal",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    Hello { model_id: String, n: BigUint, g: BigUint },
    InferRequest { shape: Vec<u32>, cells: Vec<BigUint> },
    SignRequest { cells: Vec<BigUint> },
    SignResponse { bits: Vec<bool> },
    Result { cells: Vec<BigUint>, scale: String },
    Error { code: ErrorCode, detail: String },
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::Hello { .. } => TAG_HELLO,
            Message::InferRequest { .. } => TAG_INFER_REQUEST,
            Message::SignRequest { .. } => TAG_SIGN_REQUEST,
            Message::SignResponse { .. } => TAG_SIGN_RESPONSE,
            Message::Result { .. } => TAG_RESULT,
            Message::Error { .. } => TAG_ERROR,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "HELLO",
            Message::InferRequest { .. } => "INFER_REQUEST",
            Message::SignRequest { .. } => "SIGN_REQUEST",
            Message::SignResponse { .. } => "SIGN_RESPONSE",
            Message::Result { .. } => "RESULT",
            Message::Error { .. } => "ERROR",
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Message::Hello { model_id, n, g } => {
                put_str(&mut out, model_id);
                put_big(&mut out, n);
                put_big(&mut out, g);
            }
            Message::InferRequest { shape, cells } => {
                put_u32(&mut out, shape.len() as u32);
                for &d in shape {
                    put_u32(&mut out, d);
                }
                put_cells(&mut out, cells);
            }
            Message::SignRequest { cells } => put_cells(&mut out, cells),
            Message::SignResponse { bits } => {
                put_u32(&mut out, bits.len() as u32);
                out.extend(pack_bits(bits));
            }
            Message::Result { cells, scale } => {
                put_cells(&mut out, cells);
                put_str(&mut out, scale);
            }
            Message::Error { code, detail } => {
                out.push(*code as u8);
                out.extend_from_slice(detail.as_bytes());
            }
        }
        out
    }

    fn from_payload(tag: u8, payload: &[u8]) -> Result<Self, FrameError> {
        let mut r = Cursor { buf: payload, pos: 0 };
        let msg = match tag {
            TAG_HELLO => Message::Hello { model_id: r.string()?, n: r.big()?, g: r.big()? },
            TAG_INFER_REQUEST => {
                let rank = r.u32()? as usize;
                let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
                Message::InferRequest { shape, cells: r.cells()? }
            }
            TAG_SIGN_REQUEST => Message::SignRequest { cells: r.cells()? },
            TAG_SIGN_RESPONSE => {
                let count = r.u32()? as usize;
                let packed = r.take(count.div_ceil(8))?;
                let bits = unpack_bits(packed, count)?;
                Message::SignResponse { bits }
            }
            TAG_RESULT => Message::Result { cells: r.cells()?, scale: r.string()? },
            TAG_ERROR => {
                let b = r.take(1)?[0];
                let code = ErrorCode::from_byte(b)
                    .ok_or_else(|| FrameError::Malformed(format!("unknown error code {b}")))?;
                let rest = r.take(payload.len() - 1)?;
                let detail = String::from_utf8(rest.to_vec())
                    .map_err(|_| FrameError::Malformed("error detail is not UTF-8".into()))?;
                Message::Error { code, detail }
            }
            other => return Err(FrameError::UnknownTag(other)),
        };
        if r.pos != payload.len() {
            return Err(FrameError::Malformed(format!(
                "{} trailing bytes after {}",
                payload.len() - r.pos,
                msg.name()
            )));
        }
        Ok(msg)
    }
}

/// The complete frame for `msg`.
pub fn encode(msg: &Message) -> Vec<u8> {
    let payload = msg.payload();
    let mut out = Vec::with_capacity(HEADER + payload.len());
    put_u32(&mut out, payload.len() as u32);
    out.push(msg.tag());
    out.extend(payload);
    out
}

/// Decodes one frame from the front of `buf`, returning the message and the
/// number of bytes consumed.
pub fn decode(buf: &[u8], max_frame: usize) -> Result<(Message, usize), FrameError> {
    if buf.len() < HEADER {
        return Err(FrameError::Incomplete { got: buf.len(), need: HEADER });
    }
    let len = u32::from_be_bytes(buf[..4].try_into().expect("4 bytes")) as usize;
    if len > max_frame {
        return Err(FrameError::TooLarge { len, max: max_frame });
    }
    let total = HEADER + len;
    if buf.len() < total {
        return Err(FrameError::Incomplete { got: buf.len(), need: total });
    }
    Ok((Message::from_payload(buf[4], &buf[HEADER..total])?, total))
}

pub fn write_message<W: Write + ?Sized>(w: &mut W, msg: &Message) -> Result<(), FrameError> {
    w.write_all(&encode(msg))?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. A stream that ends before the first byte is
/// [`FrameError::Closed`]; one that ends later is [`FrameError::Incomplete`].
pub fn read_message<R: Read + ?Sized>(r: &mut R, max_frame: usize) -> Result<Message, FrameError> {
    let mut header = [0u8; HEADER];
    let got = read_full(r, &mut header)?;
    if got == 0 {
        return Err(FrameError::Closed);
    }
    if got < HEADER {
        return Err(FrameError::Incomplete { got, need: HEADER });
    }
    let len = u32::from_be_bytes(header[..4].try_into().expect("4 bytes")) as usize;
    if len > max_frame {
        return Err(FrameError::TooLarge { len, max: max_frame });
    }
    let mut payload = vec![0u8; len];
    let got = read_full(r, &mut payload)?;
    if got < len {
        return Err(FrameError::Incomplete { got: HEADER + got, need: HEADER + len });
    }
    Message::from_payload(header[4], &payload)
}

fn read_full<R: Read + ?Sized>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        out[i / 8] |= 1 << (i % 8);
    }
    out
}

/// Inverse of [`pack_bits`]; padding bits must be zero.
pub fn unpack_bits(packed: &[u8], count: usize) -> Result<Vec<bool>, FrameError> {
    if packed.len() != count.div_ceil(8) {
        return Err(FrameError::Malformed(format!("{} bytes cannot hold {count} bits", packed.len())));
    }
    if !count.is_multiple_of(8) && packed[count / 8] >> (count % 8) != 0 {
        return Err(FrameError::Malformed("nonzero padding bits".into()));
    }
    Ok((0..count).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_big(out: &mut Vec<u8>, v: &BigUint) {
    let bytes = if v.bits() == 0 { Vec::new() } else { v.to_bytes_be() };
    put_u32(out, bytes.len() as u32);
    out.extend(bytes);
}

fn put_cells(out: &mut Vec<u8>, cells: &[BigUint]) {
    put_u32(out, cells.len() as u32);
    for c in cells {
        put_big(out, c);
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FrameError> {
        if self.buf.len() - self.pos < n {
            return Err(FrameError::Malformed(format!(
                "field of {n} bytes runs past the payload end"
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FrameError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn big(&mut self) -> Result<BigUint, FrameError> {
        let len = self.u32()? as usize;
        Ok(BigUint::from_bytes_be(self.take(len)?))
    }

    fn string(&mut self) -> Result<String, FrameError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| FrameError::Malformed("string is not UTF-8".into()))
    }

    fn cells(&mut self) -> Result<Vec<BigUint>, FrameError> {
        let count = self.u32()? as usize;
        // each cell needs at least its 4-byte length
        if count > (self.buf.len() - self.pos) / 4 {
            return Err(FrameError::Malformed(format!("{count} cells cannot fit the payload")));
        }
        (0..count).map(|_| self.big()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sign_response_layout() {
        let frame = encode(&Message::SignResponse { bits: vec![true, false, true] });
        assert_eq!(frame, vec![0, 0, 0, 5, TAG_SIGN_RESPONSE, 0, 0, 0, 3, 0b0000_0101]);
    }

    #[test]
    fn big_integer_layout() {
        let frame = encode(&Message::SignRequest {
            cells: vec![BigUint::from(0x0102u32), BigUint::from(0u32)],
        });
        assert_eq!(
            frame,
            vec![0, 0, 0, 14, TAG_SIGN_REQUEST, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 0, 0, 0, 0]
        );
    }

    #[test]
    fn error_layout() {
        let frame = encode(&Message::Error { code: ErrorCode::UnknownModel, detail: "x".into() });
        assert_eq!(frame, vec![0, 0, 0, 2, TAG_ERROR, 1, b'x']);
    }

    #[test]
    fn truncated_stream_is_incomplete() {
        let frame = encode(&Message::Hello {
            model_id: "toy".into(),
            n: BigUint::from(35u32),
            g: BigUint::from(36u32),
        });
        for cut in 1..frame.len() {
            let err = read_message(&mut &frame[..cut], DEFAULT_MAX_FRAME).unwrap_err();
            assert!(matches!(err, FrameError::Incomplete { .. }), "cut {cut}: {err}");
            assert!(matches!(decode(&frame[..cut], DEFAULT_MAX_FRAME), Err(FrameError::Incomplete { .. })));
        }
        assert!(matches!(read_message(&mut &[][..], DEFAULT_MAX_FRAME), Err(FrameError::Closed)));
    }

    #[test]
    fn oversized_and_unknown() {
        let header = [0xff, 0xff, 0xff, 0xff, TAG_RESULT];
        assert!(matches!(
            read_message(&mut &header[..], DEFAULT_MAX_FRAME),
            Err(FrameError::TooLarge { .. })
        ));
        let frame = encode(&Message::SignResponse { bits: vec![] });
        assert!(matches!(read_message(&mut &frame[..], 3), Err(FrameError::TooLarge { len: 4, max: 3 })));
        let bogus = [0, 0, 0, 0, 0x7f];
        assert!(matches!(decode(&bogus, DEFAULT_MAX_FRAME), Err(FrameError::UnknownTag(0x7f))));
    }

    #[test]
    fn malformed_payloads() {
        // cell count larger than the payload
        let bad = [0, 0, 0, 4, TAG_SIGN_REQUEST, 0, 0, 0, 9];
        assert!(matches!(decode(&bad, DEFAULT_MAX_FRAME), Err(FrameError::Malformed(_))));
        // nonzero padding bit
        let bad = [0, 0, 0, 5, TAG_SIGN_RESPONSE, 0, 0, 0, 3, 0b1000_0101];
        assert!(matches!(decode(&bad, DEFAULT_MAX_FRAME), Err(FrameError::Malformed(_))));
        // trailing byte
        let mut frame = encode(&Message::SignRequest { cells: vec![] });
        frame[3] += 1;
        frame.push(0);
        assert!(matches!(decode(&frame, DEFAULT_MAX_FRAME), Err(FrameError::Malformed(_))));
        // unknown error code
        let bad = [0, 0, 0, 1, TAG_ERROR, 99];
        assert!(matches!(decode(&bad, DEFAULT_MAX_FRAME), Err(FrameError::Malformed(_))));
    }

    fn big() -> impl Strategy<Value = BigUint> {
        proptest::collection::vec(any::<u8>(), 0..40).prop_map(|b| BigUint::from_bytes_be(&b))
    }

    fn cells() -> impl Strategy<Value = Vec<BigUint>> {
        proptest::collection::vec(big(), 0..12)
    }

    fn code() -> impl Strategy<Value = ErrorCode> {
        (1u8..=6).prop_map(|b| ErrorCode::from_byte(b).unwrap())
    }

    fn message() -> impl Strategy<Value = Message> {
        prop_oneof![
            (".{0,16}", big(), big()).prop_map(|(model_id, n, g)| Message::Hello { model_id, n, g }),
            (proptest::collection::vec(any::<u32>(), 0..4), cells())
                .prop_map(|(shape, cells)| Message::InferRequest { shape, cells }),
            cells().prop_map(|cells| Message::SignRequest { cells }),
            proptest::collection::vec(any::<bool>(), 0..70)
                .prop_map(|bits| Message::SignResponse { bits }),
            (cells(), "[0-9]{1,30}").prop_map(|(cells, scale)| Message::Result { cells, scale }),
            (code(), ".{0,20}").prop_map(|(code, detail)| Message::Error { code, detail }),
        ]
    }

    proptest! {
        #[test]
        fn roundtrip(msgs in proptest::collection::vec(message(), 1..5)) {
            let mut stream = Vec::new();
            for m in &msgs {
                write_message(&mut stream, m).unwrap();
            }
            let mut r = &stream[..];
            for m in &msgs {
                prop_assert_eq!(&read_message(&mut r, DEFAULT_MAX_FRAME).unwrap(), m);
            }
            prop_assert!(matches!(read_message(&mut r, DEFAULT_MAX_FRAME), Err(FrameError::Closed)));

            let (first, used) = decode(&stream, DEFAULT_MAX_FRAME).unwrap();
            prop_assert_eq!(&first, &msgs[0]);
            prop_assert_eq!(used, encode(&msgs[0]).len());
        }
    }
}
