//! Wire format for symbol blocks and classification replies.
//!
//! Request frame, all integers little-endian:
//!
//! ```text
//! "EWIR" | version u8 | flags u8 | B u32 | [h.re f32, h.im f32] | B×re f32 | B×im f32 | crc32 u32
//! ```
//!
//! `h` is present when flag bit 0 is set; other flag bits are reserved.
//! The checksum covers every preceding byte.
//!
//! Reply frame: `"EWIR" | type u8 | 5 × (class u16, prob f32) | crc32 u32`.

use num_complex::{Complex, Complex64};
use thiserror::Error;

use crate::codec::ComplexSymbolBlock;

pub const MAGIC: &[u8; 4] = b"EWIR";
pub const VERSION: u8 = 1;
pub const FLAG_GAIN: u8 = 0b0000_0001;
pub const MAX_SYMBOLS: u32 = 1 << 24;
pub const HEADER_LEN: usize = 10;
pub const TOP_K: usize = 5;
pub const REPLY_LEN: usize = 4 + 1 + TOP_K * 6 + 4;
pub const REPLY_PREDICTION: u8 = 0x10;
pub const REPLY_ERROR: u8 = 0x11;
/// Class slot value for unused reply entries.
pub const NO_CLASS: u16 = u16::MAX;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("bad magic {0:02x?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("reserved flag bits set: {0:#04x}")]
    ReservedFlags(u8),
    #[error("symbol count {0} exceeds {MAX_SYMBOLS}")]
    TooLarge(u32),
    #[error("symbol count must be positive")]
    Empty,
    #[error("checksum mismatch: frame says {stated:#010x}, computed {computed:#010x}")]
    Crc { stated: u32, computed: u32 },
    #[error("unknown reply type {0:#04x}")]
    BadReplyType(u8),
    #[error("frame carries {got} symbols, receiver expects {expected}")]
    SymbolCount { expected: usize, got: u32 },
}

impl FrameError {
    /// Numeric reason carried in error replies.
    pub fn code(&self) -> u16 {
        match self {
            FrameError::BadMagic(_) => 1,
            FrameError::BadVersion(_) => 2,
            FrameError::ReservedFlags(_) => 3,
            FrameError::TooLarge(_) => 4,
            FrameError::Empty => 5,
            FrameError::Crc { .. } => 6,
            FrameError::BadReplyType(_) => 7,
            FrameError::SymbolCount { .. } => 8,
        }
    }
}

/// Reason codes for error replies that are not framing failures.
pub const ERR_SINGULAR: u16 = 16;
pub const ERR_INTERNAL: u16 = 17;

#[derive(Clone, Debug, PartialEq)]
pub struct SymbolFrame {
    pub block: ComplexSymbolBlock<f32>,
    pub gain: Option<Complex<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Decoded<T> {
    /// A complete item and the number of bytes it occupied.
    Complete(T, usize),
    /// At least this many bytes in total are needed.
    NeedMore(usize),
}

pub fn frame_len(symbols: usize, with_gain: bool) -> usize {
    HEADER_LEN + if with_gain { 8 } else { 0 } + 8 * symbols + 4
}

pub fn encode_frame(block: &ComplexSymbolBlock<f32>, gain: Option<Complex64>) -> Vec<u8> {
    let b = block.len();
    assert!(b as u64 <= MAX_SYMBOLS as u64, "symbol block too large for a frame");
    let mut out = Vec::with_capacity(frame_len(b, gain.is_some()));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(if gain.is_some() { FLAG_GAIN } else { 0 });
    out.extend_from_slice(&(b as u32).to_le_bytes());
    if let Some(h) = gain {
        out.extend_from_slice(&(h.re as f32).to_le_bytes());
        out.extend_from_slice(&(h.im as f32).to_le_bytes());
    }
    for z in &block.symbols {
        out.extend_from_slice(&z.re.to_le_bytes());
    }
    for z in &block.symbols {
        out.extend_from_slice(&z.im.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Symbol count of a request frame whose header is already buffered.
pub fn peek_symbols(bytes: &[u8]) -> Option<u32> {
    (bytes.len() >= HEADER_LEN && bytes[..4] == MAGIC[..]).then(|| u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")))
}

fn f32_at(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn check_magic(bytes: &[u8]) -> Result<(), FrameError> {
    let n = bytes.len().min(4);
    if bytes[..n] != MAGIC[..n] {
        return Err(FrameError::BadMagic(bytes[..n].to_vec()));
    }
    Ok(())
}

fn check_crc(frame: &[u8]) -> Result<(), FrameError> {
    let body = frame.len() - 4;
    let stated = u32::from_le_bytes(frame[body..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&frame[..body]);
    if stated != computed {
        return Err(FrameError::Crc { stated, computed });
    }
    Ok(())
}

/// Decodes one request frame from the start of `bytes`. `power` is
/// attached to the block as metadata.
pub fn decode_frame(bytes: &[u8], power: f64) -> Result<Decoded<SymbolFrame>, FrameError> {
    check_magic(bytes)?;
    if bytes.len() >= 5 && bytes[4] != VERSION {
        return Err(FrameError::BadVersion(bytes[4]));
    }
    if bytes.len() >= 6 && bytes[5] & !FLAG_GAIN != 0 {
        return Err(FrameError::ReservedFlags(bytes[5]));
    }
    if bytes.len() < HEADER_LEN {
        return Ok(Decoded::NeedMore(HEADER_LEN));
    }
    let with_gain = bytes[5] & FLAG_GAIN != 0;
    let b = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes"));
    if b == 0 {
        return Err(FrameError::Empty);
    }
    if b > MAX_SYMBOLS {
        return Err(FrameError::TooLarge(b));
    }
    let b = b as usize;
    let len = frame_len(b, with_gain);
    if bytes.len() < len {
        return Ok(Decoded::NeedMore(len));
    }
    let frame = &bytes[..len];
    check_crc(frame)?;
    let mut at = HEADER_LEN;
    let gain = with_gain.then(|| {
        let h = Complex::new(f32_at(frame, at), f32_at(frame, at + 4));
        at += 8;
        h
    });
    let symbols = (0..b)
        .map(|i| Complex::new(f32_at(frame, at + 4 * i), f32_at(frame, at + 4 * (b + i))))
        .collect();
    Ok(Decoded::Complete(
        SymbolFrame {
            block: ComplexSymbolBlock::new(symbols, power),
            gain,
        },
        len,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Reply {
    /// Up to five `(class, probability)` pairs, most likely first.
    Prediction(Vec<(u16, f32)>),
    Error(u16),
}

pub fn encode_reply(reply: &Reply) -> Vec<u8> {
    let mut out = Vec::with_capacity(REPLY_LEN);
    out.extend_from_slice(MAGIC);
    let slots: Vec<(u16, f32)> = match reply {
        Reply::Prediction(top) => {
            out.push(REPLY_PREDICTION);
            top.iter().copied().take(TOP_K).collect()
        }
        Reply::Error(code) => {
            out.push(REPLY_ERROR);
            vec![(*code, 0.0)]
        }
    };
    for i in 0..TOP_K {
        let (c, p) = slots.get(i).copied().unwrap_or((NO_CLASS, 0.0));
        out.extend_from_slice(&c.to_le_bytes());
        out.extend_from_slice(&p.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_reply(bytes: &[u8]) -> Result<Decoded<Reply>, FrameError> {
    check_magic(bytes)?;
    if bytes.len() >= 5 && !matches!(bytes[4], REPLY_PREDICTION | REPLY_ERROR) {
        return Err(FrameError::BadReplyType(bytes[4]));
    }
    if bytes.len() < REPLY_LEN {
        return Ok(Decoded::NeedMore(REPLY_LEN));
    }
    let frame = &bytes[..REPLY_LEN];
    check_crc(frame)?;
    let slots: Vec<(u16, f32)> = (0..TOP_K)
        .map(|i| {
            let at = 5 + 6 * i;
            (u16::from_le_bytes([frame[at], frame[at + 1]]), f32_at(frame, at + 2))
        })
        .collect();
    let reply = if frame[4] == REPLY_ERROR {
        Reply::Error(slots[0].0)
    } else {
        Reply::Prediction(slots.into_iter().filter(|&(c, _)| c != NO_CLASS).collect())
    };
    Ok(Decoded::Complete(reply, REPLY_LEN))
}

/// Offset of the next possible frame start after a framing error at the
/// start of `buf`: the next occurrence of the magic (or of a prefix of it at
/// the very end), never 0.
pub fn resync_offset(buf: &[u8]) -> usize {
    (1..buf.len())
        .find(|&i| {
            let n = (buf.len() - i).min(4);
            buf[i..i + n] == MAGIC[..n]
        })
        .unwrap_or(buf.len().max(1))
}
