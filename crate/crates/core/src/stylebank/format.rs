//! Binary bank file, little-endian throughout:
//!
//! ```text
//! magic "A3DB" | version u32 | z_bin f32 | beta f32 x3 | crop u32 x3 | client count u32
//! per client:  id u32 | bin count u32
//!   per bin:   index i32 | style count u32
//!     per style: z' f32 | block dims u32 x3 | block f32 x (product of dims)
//! ```

use std::collections::BTreeMap;

use ndarray::Array3;

use super::{RegisteredStyle, StyleBank};
use crate::error::{Error, Result};
use crate::spectral::StyleSpectrum;

pub const BANK_MAGIC: &[u8; 4] = b"A3DB";
pub const BANK_VERSION: u32 = 1;
pub const BANK_HEADER_LEN: usize = 40;
const CLIENT_RECORD_LEN: usize = 8;
const BIN_RECORD_LEN: usize = 8;
const STYLE_RECORD_LEN: usize = 16;

pub fn serialize_bank(bank: &StyleBank) -> Vec<u8> {
    let mut out = Vec::with_capacity(bank_size_bytes(bank));
    out.extend_from_slice(BANK_MAGIC);
    out.extend_from_slice(&BANK_VERSION.to_le_bytes());
    out.extend_from_slice(&bank.bin_size.to_le_bytes());
    for b in bank.beta {
        out.extend_from_slice(&b.to_le_bytes());
    }
    for c in bank.crop_size {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    out.extend_from_slice(&(bank.entries.len() as u32).to_le_bytes());
    for (client, bins) in &bank.entries {
        out.extend_from_slice(&client.to_le_bytes());
        out.extend_from_slice(&(bins.len() as u32).to_le_bytes());
        for (bin, styles) in bins {
            out.extend_from_slice(&bin.to_le_bytes());
            out.extend_from_slice(&(styles.len() as u32).to_le_bytes());
            for s in styles {
                out.extend_from_slice(&s.slice_score.to_le_bytes());
                for d in s.style.block.shape() {
                    out.extend_from_slice(&(*d as u32).to_le_bytes());
                }
                for v in s.style.block.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

/// Exact length of [`serialize_bank`]'s output, without serializing.
pub fn bank_size_bytes(bank: &StyleBank) -> usize {
    let block_bytes = 4 * bank.block_shape().iter().product::<usize>();
    BANK_HEADER_LEN
        + bank
            .entries
            .values()
            .map(|bins| {
                CLIENT_RECORD_LEN
                    + bins
                        .values()
                        .map(|styles| BIN_RECORD_LEN + styles.len() * (STYLE_RECORD_LEN + block_bytes))
                        .sum::<usize>()
            })
            .sum::<usize>()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("bank truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Parses a bank; any inconsistency is a format error, never a partial bank.
pub fn deserialize_bank(bytes: &[u8]) -> Result<StyleBank> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != BANK_MAGIC {
        return Err(format_err("bad bank magic"));
    }
    let version = r.u32()?;
    if version != BANK_VERSION {
        return Err(format_err(format!("unsupported bank version {version}")));
    }
    let bin_size = r.f32()?;
    let beta = [r.f32()?, r.f32()?, r.f32()?];
    let crop_size = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let mut bank = StyleBank::new(bin_size, beta, crop_size).map_err(|e| format_err(format!("bad bank header: {e}")))?;
    let expected_block = bank.block_shape();
    let block_len: usize = expected_block.iter().product();

    let n_clients = r.u32()?;
    let mut entries = BTreeMap::new();
    for _ in 0..n_clients {
        let client = r.u32()?;
        let n_bins = r.u32()?;
        let mut bins = BTreeMap::new();
        for _ in 0..n_bins {
            let bin = r.i32()?;
            let n_styles = r.u32()? as usize;
            if n_styles.saturating_mul(STYLE_RECORD_LEN + 4 * block_len) > r.remaining() {
                return Err(format_err("bank truncated inside a bin"));
            }
            let mut styles = Vec::with_capacity(n_styles);
            for _ in 0..n_styles {
                let slice_score = r.f32()?;
                let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
                if dims != expected_block {
                    return Err(format_err(format!("style block {dims:?}, expected {expected_block:?}")));
                }
                if bank.bin_index(slice_score) != bin {
                    return Err(format_err(format!("style with slice score {slice_score} filed under bin {bin}")));
                }
                let payload = r.take(4 * block_len)?;
                let values: Vec<f32> = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let block = Array3::from_shape_vec(dims, values).map_err(|e| format_err(e.to_string()))?;
                styles.push(RegisteredStyle {
                    slice_score,
                    style: StyleSpectrum { block, beta, source_shape: crop_size },
                });
            }
            if bins.insert(bin, styles).is_some() {
                return Err(format_err(format!("duplicate bin {bin} for client {client}")));
            }
        }
        if entries.insert(client, bins).is_some() {
            return Err(format_err(format!("duplicate client {client}")));
        }
    }
    if r.remaining() != 0 {
        return Err(format_err(format!("{} trailing bytes after bank", r.remaining())));
    }
    bank.entries = entries;
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::DEFAULT_BETA;
    use proptest::prelude::*;

    fn style(bank: &StyleBank, v: f32) -> StyleSpectrum {
        StyleSpectrum { block: Array3::from_elem(bank.block_shape(), v), beta: bank.beta(), source_shape: bank.crop_size() }
    }

    #[test]
    fn empty_bank_is_header_only() {
        let bank = StyleBank::new(10.0, DEFAULT_BETA, [32; 3]).unwrap();
        let bytes = serialize_bank(&bank);
        assert_eq!(bytes.len(), BANK_HEADER_LEN);
        assert_eq!(bank_size_bytes(&bank), BANK_HEADER_LEN);
        assert_eq!(deserialize_bank(&bytes).unwrap(), bank);
    }

    #[test]
    fn single_style_size() {
        let mut bank = StyleBank::new(10.0, DEFAULT_BETA, [32; 3]).unwrap();
        bank.insert(0, 42.0, style(&bank, 1.5)).unwrap();
        // header + client record + bin record + style record + 3 f32
        assert_eq!(bank_size_bytes(&bank), 40 + 8 + 8 + 16 + 12);
        assert_eq!(serialize_bank(&bank).len(), 84);
        bank.insert(0, 42.0, style(&bank, 1.5)).unwrap();
        assert_eq!(bank_size_bytes(&bank), 84 + 28);
    }

    #[test]
    fn layout_is_little_endian() {
        let mut bank = StyleBank::new(10.0, DEFAULT_BETA, [32; 3]).unwrap();
        bank.insert(7, -5.0, style(&bank, 2.0)).unwrap();
        let b = serialize_bank(&bank);
        assert_eq!(&b[0..4], b"A3DB");
        assert_eq!(f32::from_le_bytes(b[8..12].try_into().unwrap()), 10.0);
        assert_eq!(u32::from_le_bytes(b[36..40].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[40..44].try_into().unwrap()), 7);
        assert_eq!(i32::from_le_bytes(b[48..52].try_into().unwrap()), -1);
        assert_eq!(f32::from_le_bytes(b[80..84].try_into().unwrap()), 2.0);
    }

    #[test]
    fn malformed_payloads() {
        let mut bank = StyleBank::new(10.0, DEFAULT_BETA, [32; 3]).unwrap();
        bank.insert(0, 42.0, style(&bank, 1.5)).unwrap();
        bank.insert(1, 12.0, style(&bank, 2.5)).unwrap();
        let bytes = serialize_bank(&bank);
        for cut in [0, 3, 39, 40, 50, bytes.len() - 1] {
            assert!(matches!(deserialize_bank(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'B';
        assert!(matches!(deserialize_bank(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(deserialize_bank(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(deserialize_bank(&bad), Err(Error::Format(_))));
        // huge style count must not allocate or panic
        let mut bad = bytes.clone();
        bad[52..56].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(deserialize_bank(&bad), Err(Error::Format(_))));
        // slice score inconsistent with its bin
        let mut bad = bytes;
        bad[56..60].copy_from_slice(&95.0f32.to_le_bytes());
        assert!(matches!(deserialize_bank(&bad), Err(Error::Format(_))));
    }

    fn arb_bank() -> impl Strategy<Value = StyleBank> {
        let style = (0.0f32..100.0, prop::collection::vec(0.0f32..1e6, 3));
        let client = (0u32..20, prop::collection::vec(style, 0..6));
        (1.0f32..30.0, prop::collection::vec(client, 0..5)).prop_map(|(bin, clients)| {
            let mut bank = StyleBank::new(bin, DEFAULT_BETA, [32, 32, 32]).unwrap();
            for (c, styles) in clients {
                bank.add_client(c);
                for (z, v) in styles {
                    let block = Array3::from_shape_vec((1, 1, 3), v).unwrap();
                    let s = StyleSpectrum { block, beta: DEFAULT_BETA, source_shape: [32; 3] };
                    bank.insert(c, z, s).unwrap();
                }
            }
            bank
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(bank in arb_bank()) {
            let bytes = serialize_bank(&bank);
            prop_assert_eq!(bytes.len(), bank_size_bytes(&bank));
            let back = deserialize_bank(&bytes).unwrap();
            prop_assert_eq!(serialize_bank(&back), bytes);
            prop_assert_eq!(back, bank);
        }
    }
}
