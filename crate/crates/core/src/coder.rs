//! Byte-oriented range coder over 16-bit CDF tables, and the bitstream
//! container.
//!
//! The coder keeps a 64-bit `low` with carry propagation through a cached
//! byte and a 32-bit `range`, renormalizing a byte at a time whenever the
//! range drops below `2^24`. The first byte the encoder produces is always
//! zero and is not stored.

use crate::entropy::{escape_table, CdfTable, CDF_BITS, SUPPORT_MAX, SUPPORT_MIN};
use crate::error::{Error, Result};
use crate::scheduler::Order;
use crate::weights::Reader;

const TOP: u32 = 1 << 24;

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Codes the interval `[start, start + freq)` out of `2^16`.
    pub fn encode(&mut self, start: u32, freq: u32) {
        debug_assert!(freq > 0 && start + freq <= 1 << CDF_BITS);
        let r = self.range >> CDF_BITS;
        self.low += u64::from(r) * u64::from(start);
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Codes value `v` with `table`, escaping to the uniform table when `v`
    /// lies outside the table's window.
    pub fn encode_symbol(&mut self, table: &CdfTable, v: i32) -> Result<()> {
        let off = i64::from(v) - i64::from(table.lo);
        if off >= 0 && (off as usize) < table.regular() {
            let (s, f) = table.range(off as usize);
            self.encode(s, f);
            return Ok(());
        }
        if !table.escape || !(SUPPORT_MIN..=SUPPORT_MAX).contains(&v) {
            let hi = if table.escape { SUPPORT_MAX } else { table.lo + table.regular() as i32 - 1 };
            let lo = if table.escape { SUPPORT_MIN } else { table.lo };
            return Err(Error::SymbolOutOfSupport { value: v, lo, hi });
        }
        let (s, f) = table.range(table.n_symbols() - 1);
        self.encode(s, f);
        let (s, f) = escape_table().range((v - SUPPORT_MIN) as usize);
        self.encode(s, f);
        Ok(())
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out.remove(0);
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            bytes,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | u32::from(d.next()?);
        }
        Ok(d)
    }

    fn next(&mut self) -> Result<u8> {
        let b = *self.bytes.get(self.pos).ok_or(Error::Truncated)?;
        self.pos += 1;
        Ok(b)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn decode_symbol(&mut self, table: &CdfTable) -> Result<i32> {
        let i = self.decode_entry(table)?;
        if i < table.regular() {
            return Ok(table.lo + i as i32);
        }
        let j = self.decode_entry(escape_table())?;
        Ok(SUPPORT_MIN + j as i32)
    }

    fn decode_entry(&mut self, table: &CdfTable) -> Result<usize> {
        let r = self.range >> CDF_BITS;
        let target = self.code / r;
        if target >= 1 << CDF_BITS {
            return Err(Error::Corrupt("range coder state out of bounds".into()));
        }
        let i = table.lookup(target);
        let (start, freq) = table.range(i);
        self.code -= r * start;
        self.range = r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | u32::from(self.next()?);
            self.range <<= 8;
        }
        Ok(i)
    }
}

/// Codes `symbols[i]` with `cdfs[i]`.
pub fn encode_symbols(symbols: &[i32], cdfs: &[CdfTable]) -> Result<Vec<u8>> {
    if symbols.len() != cdfs.len() {
        return Err(Error::shape(
            "encode_symbols",
            format!("{} symbols, {} tables", symbols.len(), cdfs.len()),
        ));
    }
    let mut enc = RangeEncoder::new();
    for (&s, t) in symbols.iter().zip(cdfs) {
        enc.encode_symbol(t, s)?;
    }
    Ok(enc.finish())
}

pub fn decode_symbols(bytes: &[u8], cdfs: &[CdfTable]) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes)?;
    cdfs.iter().map(|t| dec.decode_symbol(t)).collect()
}

pub const STREAM_MAGIC: &[u8; 4] = b"SCWB";
pub const STREAM_VERSION: u32 = 1;

/// Stream header. All integers little-endian:
///
/// ```text
/// "SCWB" | u32 version | u32 height | u32 width | u32 padded_height | u32 padded_width
/// u32 M | u32 n_cs | u32 K | u32 L | u32 k_m | u8 order (0 sfo, 1 cfo) | u8 sfg
/// 32-byte SHA-256 of the weights file
/// ```
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub height: u32,
    pub width: u32,
    pub padded_height: u32,
    pub padded_width: u32,
    pub m: u32,
    pub n_cs: u32,
    pub k: u32,
    pub layers: u32,
    pub k_m: u32,
    pub order: Order,
    pub sfg: bool,
    pub weights_digest: [u8; 32],
}

impl Header {
    pub const LEN: usize = 4 + 4 * 10 + 2 + 32;

    pub fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(STREAM_MAGIC);
        for v in [
            STREAM_VERSION,
            self.height,
            self.width,
            self.padded_height,
            self.padded_width,
            self.m,
            self.n_cs,
            self.k,
            self.layers,
            self.k_m,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(match self.order {
            Order::Sfo => 0,
            Order::Cfo => 1,
        });
        out.push(u8::from(self.sfg));
        out.extend_from_slice(&self.weights_digest);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self> {
        if r.take(4)? != STREAM_MAGIC {
            return Err(Error::Corrupt("not a bitstream (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != STREAM_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mut f = [0u32; 9];
        for v in &mut f {
            *v = r.u32()?;
        }
        let order = match r.u8()? {
            0 => Order::Sfo,
            1 => Order::Cfo,
            o => return Err(Error::Corrupt(format!("unknown order code {o}"))),
        };
        let sfg = match r.u8()? {
            0 => false,
            1 => true,
            s => return Err(Error::Corrupt(format!("bad sfg flag {s}"))),
        };
        let weights_digest = r.take(32)?.try_into().unwrap();
        Ok(Self {
            height: f[0],
            width: f[1],
            padded_height: f[2],
            padded_width: f[3],
            m: f[4],
            n_cs: f[5],
            k: f[6],
            layers: f[7],
            k_m: f[8],
            order,
            sfg,
            weights_digest,
        })
    }
}

/// Header followed by one range-coded payload: all hyper-latent symbols,
/// then the latent group by group in coding order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Header::LEN + self.payload.len());
        self.header.write(&mut out);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let header = Header::read(&mut r)?;
        Ok(Self {
            header,
            payload: r.rest().to_vec(),
        })
    }
}
