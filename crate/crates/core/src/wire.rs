//! Canonical byte encoding: length-prefixed field concatenation in
//! table order, integers as 8-byte big-endian. Every signature in the
//! protocol is over these bytes, so the encoding is normative.

use crate::crypto::{Address, Digest, Signature, ADDRESS_LEN, DIGEST_LEN, SIGNATURE_LEN};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum WireError {
    #[error("unexpected end of input")]
    Truncated,
    #[error("trailing bytes after message")]
    TrailingBytes,
    #[error("length prefix out of range")]
    BadLength,
    #[error("invalid field value")]
    BadValue,
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn address(&mut self, a: &Address) {
        self.buf.extend_from_slice(a.as_bytes());
    }

    pub fn digest(&mut self, d: &Digest) {
        self.buf.extend_from_slice(d.as_bytes());
    }

    pub fn signature(&mut self, s: &Signature) {
        self.buf.extend_from_slice(&s.bytes);
        self.address(&s.signer);
    }

    /// Variable-length field: 8-byte big-endian length then bytes.
    pub fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.data.len() - self.pos < n {
            return Err(WireError::Truncated);
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn address(&mut self) -> Result<Address, WireError> {
        let raw = self.take(ADDRESS_LEN)?;
        Ok(Address(raw.try_into().unwrap()))
    }

    pub fn digest(&mut self) -> Result<Digest, WireError> {
        let raw = self.take(DIGEST_LEN)?;
        Ok(Digest(raw.try_into().unwrap()))
    }

    pub fn signature(&mut self) -> Result<Signature, WireError> {
        let bytes: [u8; SIGNATURE_LEN] = self.take(SIGNATURE_LEN)?.try_into().unwrap();
        let signer = self.address()?;
        Ok(Signature { bytes, signer })
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], WireError> {
        let len = self.u64()?;
        let len = usize::try_from(len).map_err(|_| WireError::BadLength)?;
        if len > self.data.len() - self.pos {
            return Err(WireError::BadLength);
        }
        self.take(len)
    }

    pub fn done(&self) -> Result<(), WireError> {
        if self.pos == self.data.len() {
            Ok(())
        } else {
            Err(WireError::TrailingBytes)
        }
    }
}

/// Decodable message types; `decode` consumes exactly one value.
pub trait WireCodec: Sized {
    fn encode_into(&self, w: &mut Writer);
    fn decode_from(r: &mut Reader) -> Result<Self, WireError>;

    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_into(&mut w);
        w.finish()
    }

    fn decode(data: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(data);
        let v = Self::decode_from(&mut r)?;
        r.done()?;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integers_are_big_endian() {
        let mut w = Writer::new();
        w.u64(0x0102030405060708);
        assert_eq!(w.finish(), vec![1, 2, 3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn truncated_input_errors() {
        let mut r = Reader::new(&[0, 1, 2]);
        assert_eq!(r.u64().unwrap_err(), WireError::Truncated);
    }

    #[test]
    fn oversized_length_prefix_rejected() {
        let mut w = Writer::new();
        w.u64(u64::MAX);
        let buf = w.finish();
        let mut r = Reader::new(&buf);
        assert_eq!(r.bytes().unwrap_err(), WireError::BadLength);
    }

    #[test]
    fn bytes_roundtrip() {
        let mut w = Writer::new();
        w.bytes(b"hello");
        w.u32(7);
        let buf = w.finish();
        let mut r = Reader::new(&buf);
        assert_eq!(r.bytes().unwrap(), b"hello");
        assert_eq!(r.u32().unwrap(), 7);
        assert!(r.done().is_ok());
    }
}
