//! Range asymmetric numeral system coder over frozen integer CDF tables.
//!
//! 32-bit state, 16-bit renormalization words, 16-bit probability precision.
//! Every table carries an escape symbol; values outside a table's range are
//! sent as the escape followed by bypass-coded raw bits.

use crate::error::{Error, Result};

pub const PRECISION: u32 = 16;
const TOTAL: u32 = 1 << PRECISION;
const STATE_LOW: u32 = 1 << 16;
/// Bits used to send the length of an escaped value.
const ESCAPE_LENGTH_BITS: u32 = 6;

/// Integer frequencies for the contiguous symbols `offset..offset+len` plus a
/// trailing escape symbol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    offset: i64,
    /// `cdf[i]..cdf[i + 1]` is symbol `i`; the last interval is the escape.
    cdf: Vec<u32>,
}

impl CdfTable {
    /// Quantize `pmf` (for values `offset..`) and an escape mass to 16-bit
    /// frequencies, each at least 1, summing to `2^16`.
    pub fn from_pmf(offset: i64, pmf: &[f64], escape: f64) -> Result<Self> {
        let n = pmf.len() + 1;
        if n as u32 > TOTAL {
            return Err(Error::Parameter(format!("{n} symbols exceed the coder precision")));
        }
        let mut freq: Vec<i64> = pmf
            .iter()
            .chain(std::iter::once(&escape))
            .map(|&p| ((p.max(0.0) * f64::from(TOTAL)).round() as i64).max(1))
            .collect();
        let mut excess: i64 = freq.iter().sum::<i64>() - i64::from(TOTAL);
        while excess != 0 {
            let largest = argmax(&freq);
            if excess < 0 {
                freq[largest] -= excess;
                excess = 0;
            } else {
                let take = excess.min(freq[largest] - 1);
                if take == 0 {
                    return Err(Error::Parameter("cannot fit frequencies into the coder precision".into()));
                }
                freq[largest] -= take;
                excess -= take;
            }
        }
        let mut cdf = Vec::with_capacity(n + 1);
        let mut acc = 0u32;
        cdf.push(0);
        for f in freq {
            acc += f as u32;
            cdf.push(acc);
        }
        Ok(Self { offset, cdf })
    }

    /// Number of in-range symbols (escape excluded).
    pub fn len(&self) -> usize {
        self.cdf.len() - 2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn offset(&self) -> i64 {
        self.offset
    }

    /// Frequency of value `v`, or of the escape when out of range.
    pub fn frequency(&self, v: i64) -> u32 {
        let i = self.index(v).unwrap_or(self.len());
        self.cdf[i + 1] - self.cdf[i]
    }

    fn index(&self, v: i64) -> Option<usize> {
        let i = v.checked_sub(self.offset)?;
        (i >= 0 && (i as usize) < self.len()).then_some(i as usize)
    }

    fn interval(&self, i: usize) -> (u32, u32) {
        (self.cdf[i], self.cdf[i + 1] - self.cdf[i])
    }

    fn lookup(&self, slot: u32) -> usize {
        self.cdf.partition_point(|&c| c <= slot) - 1
    }
}

/// Largest entry, ties resolved to the lowest index.
fn argmax(v: &[i64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Collects symbols in forward order and encodes them in reverse on finish.
#[derive(Default)]
pub struct Encoder {
    ops: Vec<(u32, u32)>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Queue `v` under `table`, escaping when out of range.
    pub fn put(&mut self, table: &CdfTable, v: i64) {
        match table.index(v) {
            Some(i) => self.ops.push(table.interval(i)),
            None => {
                self.ops.push(table.interval(table.len()));
                let folded = if v < table.offset {
                    2 * (table.offset - v - 1) as u64 + 1
                } else {
                    2 * (v - table.offset - table.len() as i64) as u64
                };
                let nbits = 64 - folded.leading_zeros();
                self.put_bits(u64::from(nbits), ESCAPE_LENGTH_BITS);
                let mut rest = nbits;
                while rest > 0 {
                    let chunk = rest.min(16);
                    rest -= chunk;
                    self.put_bits((folded >> rest) & ((1 << chunk) - 1), chunk);
                }
            }
        }
    }

    /// Uniformly coded `bits`-wide value (`bits <= 16`).
    fn put_bits(&mut self, value: u64, bits: u32) {
        let freq = 1u32 << (PRECISION - bits);
        self.ops.push(((value as u32) << (PRECISION - bits), freq));
    }

    pub fn finish(self) -> Vec<u8> {
        if self.ops.is_empty() {
            return Vec::new();
        }
        let mut words: Vec<u16> = Vec::new();
        let mut x = STATE_LOW;
        for &(start, freq) in self.ops.iter().rev() {
            let x_max = (u64::from(STATE_LOW >> PRECISION) << 16) * u64::from(freq);
            while u64::from(x) >= x_max {
                words.push(x as u16);
                x >>= 16;
            }
            x = ((x / freq) << PRECISION) + (x % freq) + start;
        }
        words.push(x as u16);
        words.push((x >> 16) as u16);
        words.reverse();
        words.iter().flat_map(|w| w.to_le_bytes()).collect()
    }
}

pub struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    x: u32,
    started: bool,
}

impl<'a> Decoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0, x: 0, started: false }
    }

    fn word(&mut self) -> Result<u32> {
        let b = self.bytes.get(self.pos..self.pos + 2).ok_or_else(|| Error::Corrupt("stream ended early".into()))?;
        self.pos += 2;
        Ok(u32::from(u16::from_le_bytes([b[0], b[1]])))
    }

    fn start(&mut self) -> Result<()> {
        if !self.started {
            let hi = self.word()?;
            let lo = self.word()?;
            self.x = (hi << 16) | lo;
            self.started = true;
        }
        Ok(())
    }

    fn advance(&mut self, start: u32, freq: u32) -> Result<()> {
        self.x = freq * (self.x >> PRECISION) + (self.x & (TOTAL - 1)) - start;
        while self.x < STATE_LOW {
            self.x = (self.x << 16) | self.word()?;
        }
        Ok(())
    }

    pub fn get(&mut self, table: &CdfTable) -> Result<i64> {
        self.start()?;
        let i = table.lookup(self.x & (TOTAL - 1));
        let (start, freq) = table.interval(i);
        self.advance(start, freq)?;
        if i < table.len() {
            return Ok(table.offset + i as i64);
        }
        let nbits = self.get_bits(ESCAPE_LENGTH_BITS)? as u32;
        let mut folded = 0u64;
        let mut rest = nbits;
        while rest > 0 {
            let chunk = rest.min(16);
            rest -= chunk;
            folded = (folded << chunk) | self.get_bits(chunk)?;
        }
        let d = (folded / 2) as i64;
        Ok(if folded % 2 == 1 { table.offset - 1 - d } else { table.offset + table.len() as i64 + d })
    }

    fn get_bits(&mut self, bits: u32) -> Result<u64> {
        let shift = PRECISION - bits;
        let value = (self.x & (TOTAL - 1)) >> shift;
        self.advance(value << shift, 1 << shift)?;
        Ok(u64::from(value))
    }

    /// Every word consumed and the state back at its initial value.
    pub fn finish(self) -> Result<()> {
        let clean = if self.started { self.x == STATE_LOW && self.pos == self.bytes.len() } else { self.bytes.is_empty() };
        if clean {
            Ok(())
        } else {
            Err(Error::Corrupt("trailing data or inconsistent coder state".into()))
        }
    }
}
