//! Canonical binary encoding for every digested or signed object.
//!
//! Layout rules:
//!
//! - fields are written in declaration order with no framing of their own;
//! - integers are fixed-width big-endian;
//! - `f64` values are their IEEE-754 bit pattern, big-endian;
//! - strings are UTF-8 behind a 4-byte big-endian length;
//! - lists carry a 4-byte big-endian element count;
//! - enum discriminants are a single byte.
//!
//! Decoding is strict: unknown tags, non-0/1 booleans, invalid UTF-8 and
//! trailing bytes are all rejected, so `decode` followed by `encode` is the
//! identity on every accepted input.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unexpected end of input at offset {offset} (wanted {wanted} bytes)")]
    Truncated { offset: usize, wanted: usize },
    #[error("invalid {what} tag {tag:#04x} at offset {offset}")]
    BadTag { what: &'static str, tag: u8, offset: usize },
    #[error("invalid UTF-8 string at offset {offset}")]
    BadUtf8 { offset: usize },
    #[error("{count} trailing bytes after value")]
    TrailingBytes { count: usize },
    #[error("invalid value: {0}")]
    Invalid(&'static str),
}

#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_bits().to_be_bytes());
        self
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(v as u8)
    }

    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.len_prefix(s.len());
        self.raw(s.as_bytes())
    }

    pub fn list<T: Canonical>(&mut self, items: &[T]) -> &mut Self {
        self.len_prefix(items.len());
        for item in items {
            item.encode(self);
        }
        self
    }

    pub fn value<T: Canonical>(&mut self, v: &T) -> &mut Self {
        v.encode(self);
        self
    }

    fn len_prefix(&mut self, len: usize) {
        let len = u32::try_from(len).expect("canonical length exceeds u32");
        self.u32(len);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(DecodeError::Truncated {
                offset: self.pos,
                wanted: n,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn bool(&mut self) -> Result<bool, DecodeError> {
        let offset = self.pos;
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            tag => Err(DecodeError::BadTag {
                what: "bool",
                tag,
                offset,
            }),
        }
    }

    pub fn str(&mut self) -> Result<String, DecodeError> {
        let len = self.u32()? as usize;
        let offset = self.pos;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| DecodeError::BadUtf8 { offset })
    }

    pub fn list<T: Canonical>(&mut self) -> Result<Vec<T>, DecodeError> {
        let count = self.u32()? as usize;
        // Every element occupies at least one byte, so a count larger than
        // the remaining input is necessarily corrupt.
        if count > self.remaining() {
            return Err(DecodeError::Truncated {
                offset: self.pos,
                wanted: count,
            });
        }
        (0..count).map(|_| T::decode(self)).collect()
    }

    pub fn value<T: Canonical>(&mut self) -> Result<T, DecodeError> {
        T::decode(self)
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        match self.remaining() {
            0 => Ok(()),
            count => Err(DecodeError::TrailingBytes { count }),
        }
    }
}

/// A type with a normative byte encoding.
pub trait Canonical: Sized {
    fn encode(&self, enc: &mut Encoder);

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError>;

    fn to_canonical_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.finish()
    }

    /// Decodes a complete buffer, rejecting trailing bytes.
    fn from_canonical_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(bytes);
        let v = Self::decode(&mut dec)?;
        dec.finish()?;
        Ok(v)
    }
}

impl Canonical for u32 {
    fn encode(&self, enc: &mut Encoder) {
        enc.u32(*self);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        dec.u32()
    }
}

impl Canonical for String {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(self);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        dec.str()
    }
}
