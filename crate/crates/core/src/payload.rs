//! Tagged, length-prefixed wire format for everything exchanged in a round.
//!
//! Frame: `tag u8 | body_len u64 | body`, all integers little-endian.
//!
//! | tag | body |
//! |-----|------|
//! | 0 dense     | `len u32`, `len × f32` |
//! | 1 quantized | `len u32`, `segments u32`, per segment `(len u32, scale f64, zero_point f32)`, `ceil(len/2)` code bytes |
//! | 2 sparse    | `len u32`, `reference_round u32`, `count u32`, `count × u32` indices, `count × f32` values |
//! | 3 encrypted | `len u32`, `count u32`, per ciphertext `bytes u32` then the ciphertext wire form |

use std::io::{self, Write};

use crate::compression::{QuantSegment, QuantizedPayload, SparsePayload};
use crate::error::{Error, Result};
use crate::he::{self, Ciphertext, HeParams};

pub const FRAME_HEADER_BYTES: usize = 1 + 8;
pub const QUANT_SEGMENT_BYTES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PayloadTag {
    Dense = 0,
    Quantized = 1,
    Sparse = 2,
    Encrypted = 3,
}

impl PayloadTag {
    pub fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => Self::Dense,
            1 => Self::Quantized,
            2 => Self::Sparse,
            3 => Self::Encrypted,
            _ => return Err(Error::format(format!("unknown payload tag {b}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Dense => "dense",
            Self::Quantized => "quantized",
            Self::Sparse => "sparse",
            Self::Encrypted => "encrypted",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncryptedPayload {
    /// Number of plaintext values spread over the ciphertexts.
    pub len: usize,
    pub ciphertexts: Vec<Ciphertext>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Dense(Vec<f32>),
    Quantized(QuantizedPayload),
    Sparse(SparsePayload),
    Encrypted(EncryptedPayload),
}

/// `io::Write` sink that only counts bytes.
#[derive(Debug, Default)]
pub struct CountingWriter {
    pub bytes: u64,
}

impl Write for CountingWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.bytes += buf.len() as u64;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

fn u32_field(v: usize, what: &str) -> io::Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, format!("{what} {v} exceeds u32")))
}

fn write_words<W: Write, T: Copy>(w: &mut W, vals: &[T], to_le: impl Fn(T) -> [u8; 4]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(4 * vals.len().min(16384));
    for chunk in vals.chunks(16384) {
        buf.clear();
        for &v in chunk {
            buf.extend_from_slice(&to_le(v));
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

impl Payload {
    /// Top-k upload, or the full vector when the sparse frame would be larger.
    /// Short vectors and k near 50% are the cases where that happens.
    pub fn sparse_or_dense(sparse: SparsePayload, current: &[f32]) -> Payload {
        let sparse = Payload::Sparse(sparse);
        let dense_len = (FRAME_HEADER_BYTES + 4 + 4 * current.len()) as u64;
        if sparse.serialized_len() <= dense_len {
            sparse
        } else {
            Payload::Dense(current.to_vec())
        }
    }

    pub fn tag(&self) -> PayloadTag {
        match self {
            Payload::Dense(_) => PayloadTag::Dense,
            Payload::Quantized(_) => PayloadTag::Quantized,
            Payload::Sparse(_) => PayloadTag::Sparse,
            Payload::Encrypted(_) => PayloadTag::Encrypted,
        }
    }

    fn write_body<W: Write>(&self, w: &mut W) -> io::Result<()> {
        match self {
            Payload::Dense(v) => {
                w.write_all(&u32_field(v.len(), "dense length")?)?;
                write_words(w, v, f32::to_le_bytes)
            }
            Payload::Quantized(q) => {
                w.write_all(&u32_field(q.len, "quantized length")?)?;
                w.write_all(&u32_field(q.segments.len(), "segment count")?)?;
                for seg in &q.segments {
                    w.write_all(&u32_field(seg.len, "segment length")?)?;
                    w.write_all(&seg.scale.to_le_bytes())?;
                    w.write_all(&seg.zero_point.to_le_bytes())?;
                }
                w.write_all(&q.codes)
            }
            Payload::Sparse(s) => {
                w.write_all(&u32_field(s.len, "sparse length")?)?;
                w.write_all(&s.reference_round.to_le_bytes())?;
                w.write_all(&u32_field(s.indices.len(), "sparse count")?)?;
                write_words(w, &s.indices, u32::to_le_bytes)?;
                write_words(w, &s.values, f32::to_le_bytes)
            }
            Payload::Encrypted(e) => {
                w.write_all(&u32_field(e.len, "encrypted length")?)?;
                w.write_all(&u32_field(e.ciphertexts.len(), "ciphertext count")?)?;
                for ct in &e.ciphertexts {
                    w.write_all(&u32_field(ct.serialized_len(), "ciphertext size")?)?;
                    he::write_ciphertext(ct, w)?;
                }
                Ok(())
            }
        }
    }

    pub fn body_len(&self) -> u64 {
        let mut counter = CountingWriter::default();
        self.write_body(&mut counter).expect("payload fields fit the wire format");
        counter.bytes
    }

    /// Exact framed size, computed by running the serializer into a
    /// [`CountingWriter`].
    pub fn serialized_len(&self) -> u64 {
        FRAME_HEADER_BYTES as u64 + self.body_len()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&[self.tag() as u8])?;
        w.write_all(&self.body_len().to_le_bytes())?;
        self.write_body(w)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len() as usize);
        self.write_to(&mut out).expect("payload fields fit the wire format");
        out
    }

    /// Parses one frame. `he` is required for encrypted payloads.
    pub fn from_bytes(bytes: &[u8], he: Option<&HeParams>) -> Result<Payload> {
        if bytes.len() < FRAME_HEADER_BYTES {
            return Err(Error::format("payload shorter than its frame header"));
        }
        let tag = PayloadTag::from_byte(bytes[0])?;
        let body_len = u64::from_le_bytes(bytes[1..9].try_into().unwrap());
        let body = &bytes[FRAME_HEADER_BYTES..];
        if body.len() as u64 != body_len {
            return Err(Error::format(format!(
                "frame declares {body_len} body bytes, found {}",
                body.len()
            )));
        }
        let mut r = Reader { buf: body, at: 0 };
        let payload = match tag {
            PayloadTag::Dense => {
                let len = r.u32()? as usize;
                Payload::Dense(r.f32s(len)?)
            }
            PayloadTag::Quantized => {
                let len = r.u32()? as usize;
                let nseg = r.u32()? as usize;
                let mut segments = Vec::with_capacity(nseg.min(r.remaining() / QUANT_SEGMENT_BYTES));
                for _ in 0..nseg {
                    let seg_len = r.u32()? as usize;
                    let scale = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
                    let zero_point = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
                    if !(scale.is_finite() && scale >= 0.0 && zero_point.is_finite()) {
                        return Err(Error::format("quantized segment has invalid scale or zero point"));
                    }
                    segments.push(QuantSegment { len: seg_len, scale, zero_point });
                }
                if segments.iter().map(|s| s.len).sum::<usize>() != len {
                    return Err(Error::format("quantized segment lengths do not sum to the length"));
                }
                let codes = r.take(len.div_ceil(2))?.to_vec();
                Payload::Quantized(QuantizedPayload { len, segments, codes })
            }
            PayloadTag::Sparse => {
                let len = r.u32()? as usize;
                let reference_round = r.u32()?;
                let count = r.u32()? as usize;
                let indices = r.u32s(count)?;
                let values = r.f32s(count)?;
                if indices.windows(2).any(|w| w[0] >= w[1]) || indices.last().is_some_and(|&i| i as usize >= len) {
                    return Err(Error::format("sparse indices must be strictly increasing and in range"));
                }
                Payload::Sparse(SparsePayload { len, reference_round, indices, values })
            }
            PayloadTag::Encrypted => {
                let params = he.ok_or_else(|| Error::format("encrypted payload needs HE parameters"))?;
                let len = r.u32()? as usize;
                let count = r.u32()? as usize;
                if count != he::chunk_count(len, params) {
                    return Err(Error::format(format!("{count} ciphertexts cannot hold {len} values")));
                }
                let mut ciphertexts = Vec::with_capacity(count);
                for _ in 0..count {
                    let n = r.u32()? as usize;
                    ciphertexts.push(he::deserialize(r.take(n)?, params)?);
                }
                Payload::Encrypted(EncryptedPayload { len, ciphertexts })
            }
        };
        if r.remaining() != 0 {
            return Err(Error::format(format!("{} trailing bytes in payload body", r.remaining())));
        }
        Ok(payload)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.at
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(format!(
                "payload truncated: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format("count overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format("count overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }
}
