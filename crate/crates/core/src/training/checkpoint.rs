//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! bytes 0..4  magic "DMIL"
//! u32         format version (currently 1)
//! u32         input feature dimension
//! u32         hidden dimension
//! u8          variant tag (0 cls-det-rs, 1 cls-det, 2 db-baseline,
//!             3 max-region)
//! u32         region-selection size k
//! u32         tensor count
//! per tensor: u64 element count, then that many f64 values
//! ```
//!
//! Tensors appear in the fixed order of [`ModelParams::tensors`]. The
//! round trip is bit-exact.

use std::path::Path;

use crate::model::{ModelParams, Variant};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"DMIL";
const VERSION: u32 = 1;

fn variant_tag(v: Variant) -> u8 {
    match v {
        Variant::ClsDetRs => 0,
        Variant::ClsDet => 1,
        Variant::DbBaseline => 2,
        Variant::MaxRegion => 3,
    }
}

fn variant_from_tag(tag: u8) -> Option<Variant> {
    match tag {
        0 => Some(Variant::ClsDetRs),
        1 => Some(Variant::ClsDet),
        2 => Some(Variant::DbBaseline),
        3 => Some(Variant::MaxRegion),
        _ => None,
    }
}

/// Serializes the parameters to the checkpoint byte layout.
pub fn checkpoint_bytes(params: &ModelParams) -> Vec<u8> {
    let tensors = params.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.d_in() as u32).to_le_bytes());
    out.extend_from_slice(&(params.d_h() as u32).to_le_bytes());
    out.push(variant_tag(params.variant));
    out.extend_from_slice(&(params.k as u32).to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (_, t) in tensors {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Parses the checkpoint byte layout back into parameters.
pub fn params_from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let d_in = r.u32()? as usize;
    let d_h = r.u32()? as usize;
    let variant =
        variant_from_tag(r.u8()?).ok_or_else(|| Error::Checkpoint("unknown variant tag".into()))?;
    let k = r.u32()? as usize;
    let n_tensors = r.u32()? as usize;

    let mut params = ModelParams::zeros(variant, k, d_in, d_h);
    let expected = params.tensors().len();
    if n_tensors != expected {
        return Err(Error::Checkpoint(format!(
            "{n_tensors} tensors for variant {}, expected {expected}",
            variant.name()
        )));
    }
    for (name, slot) in params.tensors_mut() {
        let len = r.u64()? as usize;
        if len != slot.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has {len} elements, expected {}",
                slot.len()
            )));
        }
        for v in slot.iter_mut() {
            *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let bytes = std::fs::read(path)?;
    params_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    fn random_params(variant: Variant, seed: u64) -> ModelParams {
        let mut rng = Prng::from_seed(seed);
        let mut p = ModelParams::zeros(variant, 7, 5, 4);
        for (_, t) in p.tensors_mut() {
            for v in t {
                *v = rng.normal();
            }
        }
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for variant in Variant::ALL {
            let params = random_params(variant, 31);
            let bytes = checkpoint_bytes(&params);
            let back = params_from_bytes(&bytes).unwrap();
            assert_eq!(params, back);
            assert_eq!(bytes, checkpoint_bytes(&back));
        }
    }

    #[test]
    fn max_region_checkpoint_has_no_detection_tensors() {
        let params = random_params(Variant::MaxRegion, 8);
        let bytes = checkpoint_bytes(&params);
        let back = params_from_bytes(&bytes).unwrap();
        assert!(back.det_w.is_none());
        assert!(back.det_b.is_none());
        let names: Vec<&str> = back.tensors().iter().map(|(n, _)| *n).collect();
        assert_eq!(names, ["shared_w", "shared_b", "cls_w", "cls_b"]);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let params = random_params(Variant::ClsDet, 1);
        let mut bytes = checkpoint_bytes(&params);
        bytes[0] = b'X';
        assert!(matches!(
            params_from_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn truncation_is_rejected() {
        let params = random_params(Variant::ClsDet, 1);
        let bytes = checkpoint_bytes(&params);
        assert!(params_from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
