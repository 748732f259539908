//! Model checkpoints: `"A3DM"`, version u32, class count u32, parameter
//! count u64, then the parameters as little-endian f32.

use std::io::{Read, Write};

use super::SegModel;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"A3DM";
const VERSION: u32 = 1;
pub const CHECKPOINT_HEADER_LEN: usize = 20;

pub fn checkpoint_size_bytes(model: &SegModel) -> usize {
    CHECKPOINT_HEADER_LEN + 4 * model.params().len()
}

pub fn write_checkpoint<W: Write>(w: &mut W, model: &SegModel) -> Result<()> {
    let mut buf = Vec::with_capacity(checkpoint_size_bytes(model));
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.num_classes() as u32).to_le_bytes());
    buf.extend_from_slice(&(model.params().len() as u64).to_le_bytes());
    for p in model.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<SegModel> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < CHECKPOINT_HEADER_LEN {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let classes = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let payload = &bytes[CHECKPOINT_HEADER_LEN..];
    if payload.len() as u64 != count.saturating_mul(4) {
        return Err(Error::Format(format!("checkpoint declares {count} parameters, payload has {} bytes", payload.len())));
    }
    let params = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    SegModel::from_params(classes, params).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_size() {
        let m = SegModel::init(6, 9);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m).unwrap();
        assert_eq!(buf.len(), checkpoint_size_bytes(&m));
        assert_eq!(&buf[0..4], b"A3DM");
        assert_eq!(read_checkpoint(&mut buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn rejects_malformed() {
        let m = SegModel::init(3, 1);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m).unwrap();
        assert!(read_checkpoint(&mut &buf[..buf.len() - 4]).is_err());
        assert!(read_checkpoint(&mut &buf[..10]).is_err());
        let mut bad = buf.clone();
        bad[8] = 4; // class count no longer matches parameter count
        assert!(read_checkpoint(&mut bad.as_slice()).is_err());
    }
}
