//! Binary checkpoint format.
//!
//! ```text
//! "SPLF" | u32 version = 1 | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 rank | u32 extents… | f32 values…
//! ```
//! All integers and values are little-endian. Besides the parameters a file
//! carries `meta.config` (the architecture, as integers) and may carry
//! optimizer/RNG state under the `adam.`, `rng.` and `train.` prefixes.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::fsutil::write_atomic;
use crate::numerics::Tensor;

use super::{param_layout, SpliifConfig, SpliifParams};

pub const MAGIC: &[u8; 4] = b"SPLF";
pub const VERSION: u32 = 1;
pub const CONFIG_TENSOR: &str = "meta.config";
const STATE_PREFIXES: [&str; 4] = ["meta.", "adam.", "rng.", "train."];

pub type NamedTensor = (String, Tensor<f32>);

pub fn encode_tensors(tensors: &[(&str, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Input(format!("tensor name `{name}` is too long")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Input(format!("tensor `{name}` has too many axes")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e)
                .map_err(|_| Error::Input(format!("tensor `{name}` extent {e} overflows u32")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.bytes.len() < n {
            return Err(FormatError::Truncated);
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<NamedTensor>, FormatError> {
    let mut r = Reader { bytes };
    if r.take(4).map_err(|_| FormatError::BadMagic)? != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| FormatError::Tensor {
                name: "<invalid utf-8>".into(),
                reason: "name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.bytes.len()))
            .ok_or(FormatError::Truncated)?;
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| FormatError::Tensor {
            name: name.clone(),
            reason: e.to_string(),
        })?;
        out.push((name, t));
    }
    if !r.bytes.is_empty() {
        return Err(FormatError::Tensor {
            name: "<trailer>".into(),
            reason: format!("{} unexpected trailing bytes", r.bytes.len()),
        });
    }
    Ok(out)
}

pub fn read_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_tensors(&bytes)?)
}

/// Parameters plus the embedded configuration, in checkpoint order.
pub fn checkpoint_tensors(params: &SpliifParams, config: &SpliifConfig) -> Vec<NamedTensor> {
    let mut out: Vec<NamedTensor> = params
        .leaves()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let words = config.to_words();
    out.push((
        CONFIG_TENSOR.into(),
        Tensor::new([words.len()], words).expect("rank-1 config tensor"),
    ));
    out
}

pub fn save_checkpoint(params: &SpliifParams, config: &SpliifConfig, path: &Path) -> Result<()> {
    params.shapes_match(config)?;
    let tensors = checkpoint_tensors(params, config);
    let refs: Vec<(&str, &Tensor<f32>)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_atomic(path, &encode_tensors(&refs)?)
}

/// Extracts and validates the parameters for `config` from decoded tensors.
/// Every parameter's shape is checked against the configuration and errors
/// name the first offending tensor.
pub fn params_from_tensors(tensors: &[NamedTensor], config: &SpliifConfig) -> Result<SpliifParams> {
    config.validate()?;
    let mut seen = HashSet::new();
    for (name, _) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(FormatError::Tensor {
                name: name.clone(),
                reason: "appears twice".into(),
            }
            .into());
        }
    }
    let layout = param_layout(config);
    let known: HashSet<&str> = layout.iter().map(|(n, _)| n.as_str()).collect();
    if let Some((name, _)) = tensors
        .iter()
        .find(|(n, _)| !known.contains(n.as_str()) && !STATE_PREFIXES.iter().any(|p| n.starts_with(p)))
    {
        return Err(FormatError::Tensor {
            name: name.clone(),
            reason: "is not a parameter of this configuration".into(),
        }
        .into());
    }
    let mut ordered = Vec::with_capacity(layout.len());
    for (name, shape) in &layout {
        let Some((_, t)) = tensors.iter().find(|(n, _)| n == name) else {
            return Err(FormatError::Tensor {
                name: name.clone(),
                reason: "is missing".into(),
            }
            .into());
        };
        if t.shape() != shape.as_slice() {
            return Err(FormatError::Tensor {
                name: name.clone(),
                reason: format!("has shape {:?}, configuration needs {shape:?}", t.shape()),
            }
            .into());
        }
        ordered.push(t.clone());
    }
    if let Some((_, meta)) = tensors.iter().find(|(n, _)| n == CONFIG_TENSOR) {
        let stored = SpliifConfig::from_words(meta.data());
        let matches = stored.is_some_and(|s| {
            let mut a = s.to_words();
            let mut b = config.to_words();
            // epsilon is stored in single precision
            a.pop();
            b.pop();
            a == b && (s.idw_epsilon as f32) == (config.idw_epsilon as f32)
        });
        if !matches {
            return Err(FormatError::Tensor {
                name: CONFIG_TENSOR.into(),
                reason: "embedded configuration differs from the requested one".into(),
            }
            .into());
        }
    }
    SpliifParams::from_tensors(config, ordered)
}

/// The architecture embedded in a checkpoint file.
pub fn embedded_config(tensors: &[NamedTensor]) -> Option<SpliifConfig> {
    tensors
        .iter()
        .find(|(n, _)| n == CONFIG_TENSOR)
        .and_then(|(_, t)| SpliifConfig::from_words(t.data()))
}

pub fn load_checkpoint(path: &Path, config: &SpliifConfig) -> Result<SpliifParams> {
    params_from_tensors(&read_tensors(path)?, config)
}

/// Packs integers into exactly representable 16-bit chunks stored as `f32`.
pub fn pack_u64s(values: &[u64]) -> Tensor<f32> {
    let data: Vec<f32> = values
        .iter()
        .flat_map(|v| (0..4).map(move |i| ((v >> (16 * i)) & 0xFFFF) as f32))
        .collect();
    Tensor::new([data.len()], data).expect("rank-1 tensor")
}

pub fn unpack_u64s(t: &Tensor<f32>) -> Option<Vec<u64>> {
    if !t.len().is_multiple_of(4) {
        return None;
    }
    t.data()
        .chunks_exact(4)
        .map(|c| {
            c.iter().enumerate().try_fold(0u64, |acc, (i, &w)| {
                ((0.0..=65535.0).contains(&w) && w.fract() == 0.0).then(|| acc | ((w as u64) << (16 * i)))
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn params(config: &SpliifConfig) -> SpliifParams {
        SpliifParams::init(config, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let c = SpliifConfig::desk();
        let p = params(&c);
        let a = dir.path().join("a.splf");
        let b = dir.path().join("b.splf");
        save_checkpoint(&p, &c, &a).unwrap();
        let loaded = load_checkpoint(&a, &c).unwrap();
        assert_eq!(loaded, p);
        save_checkpoint(&loaded, &c, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new([2], vec![1.0f32, -2.0]).unwrap();
        let bytes = encode_tensors(&[("ab", &t)]).unwrap();
        let mut want = b"SPLF".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(2u16.to_le_bytes());
        want.extend(b"ab");
        want.push(1);
        want.extend(2u32.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let c = SpliifConfig::desk();
        let t = checkpoint_tensors(&params(&c), &c);
        let refs: Vec<_> = t.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let bytes = encode_tensors(&refs).unwrap();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_tensors(&bytes[..cut]), Err(FormatError::Truncated | FormatError::BadMagic)));
        }
    }

    #[test]
    fn magic_and_version_are_checked() {
        assert!(matches!(decode_tensors(b"XXXX\x01\0\0\0\0\0\0\0"), Err(FormatError::BadMagic)));
        assert!(matches!(decode_tensors(b"SPLF\x02\0\0\0\0\0\0\0"), Err(FormatError::BadVersion(2))));
        assert!(decode_tensors(b"SPLF\x01\0\0\0\0\0\0\0").unwrap().is_empty());
    }

    #[test]
    fn latent_width_mismatch_names_first_projection_weight() {
        let dir = tempfile::tempdir().unwrap();
        let wide = SpliifConfig::default();
        let path = dir.path().join("wide.splf");
        save_checkpoint(&params(&wide), &wide, &path).unwrap();
        let narrow = SpliifConfig { c_l: 32, ..wide };
        let err = load_checkpoint(&path, &narrow).unwrap_err();
        match err {
            Error::Format(FormatError::Tensor { name, .. }) => assert_eq!(name, "proj_mlp.0.weight"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn integer_packing_round_trips() {
        let v = vec![0, 1, u64::MAX, 0xDEAD_BEEF_1234_5678];
        assert_eq!(unpack_u64s(&pack_u64s(&v)).unwrap(), v);
    }
}
