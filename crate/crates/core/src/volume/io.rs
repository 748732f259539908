//! On-disk volume format.
//!
//! A 64-byte little-endian header followed by the voxel payload in `(h, w, d)`
//! row-major order:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "A3DV"
//!      4     4  version (u32)
//!      8    12  H, W, D (u32 each)
//!     20    12  spacing sh, sw, sd (f32 each, mm)
//!     32     8  z_min, z_max (f32 each)
//!     40    24  zero padding
//! ```
//!
//! Volume files carry f32 voxels; label sidecars use the same header with a
//! u8 payload.

use std::io::{Read, Write};

use ndarray::Array3;

use super::Volume;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"A3DV";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Header {
    shape: [usize; 3],
    spacing: [f32; 3],
    z_extent: (f32, f32),
}

fn encode_header(h: &Header) -> [u8; HEADER_LEN] {
    let mut buf = [0u8; HEADER_LEN];
    buf[0..4].copy_from_slice(MAGIC);
    buf[4..8].copy_from_slice(&VERSION.to_le_bytes());
    for (i, n) in h.shape.iter().enumerate() {
        buf[8 + 4 * i..12 + 4 * i].copy_from_slice(&(*n as u32).to_le_bytes());
    }
    for (i, s) in h.spacing.iter().enumerate() {
        buf[20 + 4 * i..24 + 4 * i].copy_from_slice(&s.to_le_bytes());
    }
    buf[32..36].copy_from_slice(&h.z_extent.0.to_le_bytes());
    buf[36..40].copy_from_slice(&h.z_extent.1.to_le_bytes());
    buf
}

fn read_exact_or_format<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

fn decode_header<R: Read>(r: &mut R) -> Result<Header> {
    let mut buf = [0u8; HEADER_LEN];
    read_exact_or_format(r, &mut buf, "volume header")?;
    if &buf[0..4] != MAGIC {
        return Err(Error::Format(format!("bad volume magic {:?}", &buf[0..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported volume version {version}")));
    }
    Ok(Header {
        shape: [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize],
        spacing: [f32_at(20), f32_at(24), f32_at(28)],
        z_extent: (f32_at(32), f32_at(36)),
    })
}

fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Format("trailing bytes after volume payload".into())),
    }
}

pub fn write_volume<W: Write>(w: &mut W, v: &Volume) -> Result<()> {
    let header = Header { shape: v.shape(), spacing: v.spacing(), z_extent: v.z_extent() };
    w.write_all(&encode_header(&header))?;
    let mut payload = Vec::with_capacity(v.data().len() * 4);
    for x in v.data().iter() {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_volume<R: Read>(r: &mut R) -> Result<Volume> {
    let h = decode_header(r)?;
    let n: usize = h.shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    read_exact_or_format(r, &mut payload, "volume payload")?;
    expect_eof(r)?;
    let voxels: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data = Array3::from_shape_vec(h.shape, voxels).map_err(|e| Error::Format(e.to_string()))?;
    Volume::new(data, h.spacing, h.z_extent).map_err(|e| Error::Format(e.to_string()))
}

/// Writes a label map with the header of `like` (shape must match).
pub fn write_labels<W: Write>(w: &mut W, labels: &Array3<u8>, like: &Volume) -> Result<()> {
    if labels.shape() != like.data().shape() {
        return Err(Error::InvalidArgument("label shape differs from volume shape".into()));
    }
    let header = Header { shape: like.shape(), spacing: like.spacing(), z_extent: like.z_extent() };
    w.write_all(&encode_header(&header))?;
    let payload: Vec<u8> = labels.iter().copied().collect();
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_labels<R: Read>(r: &mut R) -> Result<Array3<u8>> {
    let h = decode_header(r)?;
    let n: usize = h.shape.iter().product();
    let mut payload = vec![0u8; n];
    read_exact_or_format(r, &mut payload, "label payload")?;
    expect_eof(r)?;
    Array3::from_shape_vec(h.shape, payload).map_err(|e| Error::Format(e.to_string()))
}
