//! Binary model checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      "BSEG1"
//! version    u16
//! config     u32 input_channels, u32 num_classes, u32 stages, u32 features,
//!            u8 dropout variant, f32 dropout_p, u64 seed
//! u32        parameter count, then per parameter:
//!            u16 name length, name, u8 rank, u32 extents[rank], f32 values
//! u32        batch-norm count, then per layer:
//!            u16 name length, name, u32 channels, f32 mean[channels], f32 var[channels]
//! ```
//!
//! Gradients and momentum buffers are not stored.

use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{DropoutVariant, ModelConfig, SegModel};

pub const MAGIC: &[u8; 5] = b"BSEG1";
pub const VERSION: u16 = 1;

/// Bytes before the first parameter block: magic, version, config, count.
pub const HEADER_BYTES: usize = 5 + 2 + (4 * 4 + 1 + 4 + 8) + 4;

/// Upper bound on width-like config fields accepted from a file.
const MAX_WIDTH: usize = 1 << 12;

/// Exact encoded size of a model, from its parameter and batch-norm inventory.
pub fn encoded_size(model: &SegModel) -> usize {
    let params: usize = model
        .params()
        .iter()
        .map(|p| 2 + p.name.len() + 1 + 4 * p.value.rank() + 4 * p.value.len())
        .sum();
    let norms: usize = model
        .norm_layers()
        .map(|(name, bn)| 2 + name.len() + 4 + 8 * bn.channels)
        .sum();
    HEADER_BYTES + params + 4 + norms
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    put_u16(out, name.len() as u16);
    out.extend_from_slice(name.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(model: &SegModel) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::with_capacity(encoded_size(model));
    out.extend_from_slice(MAGIC);
    put_u16(&mut out, VERSION);
    put_u32(&mut out, cfg.input_channels);
    put_u32(&mut out, cfg.num_classes);
    put_u32(&mut out, cfg.stages);
    put_u32(&mut out, cfg.features);
    out.push(cfg.dropout_variant.code());
    out.extend_from_slice(&cfg.dropout_p.to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());

    put_u32(&mut out, model.params().len());
    for p in model.params().iter() {
        put_name(&mut out, &p.name);
        out.push(p.value.rank() as u8);
        for &e in p.value.shape() {
            put_u32(&mut out, e);
        }
        put_f32s(&mut out, p.value.data());
    }
    put_u32(&mut out, model.num_norm_layers());
    for (name, bn) in model.norm_layers() {
        put_name(&mut out, &name);
        put_u32(&mut out, bn.channels);
        put_f32s(&mut out, &bn.running_mean);
        put_f32s(&mut out, &bn.running_var);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(self.bytes.len()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or(CheckpointError::Truncated(self.bytes.len()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn name(&mut self) -> Result<&'a str, CheckpointError> {
        let len = self.u16()? as usize;
        std::str::from_utf8(self.take(len)?)
            .map_err(|_| CheckpointError::Invalid("tensor name is not UTF-8".into()))
    }
}

fn read_config(r: &mut Reader) -> Result<ModelConfig, CheckpointError> {
    let input_channels = r.u32()?;
    let num_classes = r.u32()?;
    let stages = r.u32()?;
    let features = r.u32()?;
    let code = r.u8()?;
    let dropout_variant = DropoutVariant::from_code(code)
        .ok_or_else(|| CheckpointError::Invalid(format!("unknown dropout variant code {code}")))?;
    let dropout_p = r.f32()?;
    let seed = r.u64()?;
    let cfg = ModelConfig {
        input_channels,
        num_classes,
        stages,
        features,
        dropout_variant,
        dropout_p,
        seed,
    };
    cfg.validate()
        .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    if input_channels > MAX_WIDTH || features > MAX_WIDTH {
        return Err(CheckpointError::Invalid(
            "layer widths are implausibly large".into(),
        ));
    }
    Ok(cfg)
}

pub fn decode(bytes: &[u8]) -> Result<SegModel> {
    decode_inner(bytes).map_err(Error::from)
}

fn decode_inner(bytes: &[u8]) -> Result<SegModel, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let cfg = read_config(&mut r)?;
    // refuse to allocate a model the file cannot possibly hold
    if cfg.parameter_count().saturating_mul(4) > bytes.len() {
        return Err(CheckpointError::Truncated(bytes.len()));
    }
    let mut model = SegModel::new(&cfg).map_err(|e| CheckpointError::Invalid(e.to_string()))?;

    let count = r.u32()?;
    if count != model.params().len() {
        return Err(CheckpointError::Invalid(format!(
            "{count} parameter blocks, config implies {}",
            model.params().len()
        )));
    }
    for p in model.params_mut().iter_mut() {
        let name = r.name()?;
        if name != p.name {
            return Err(CheckpointError::Invalid(format!(
                "expected parameter `{}`, found `{name}`",
                p.name
            )));
        }
        let rank = r.u8()? as usize;
        let found = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        if found != p.value.shape() {
            return Err(CheckpointError::Extent {
                name: p.name.clone(),
                expected: p.value.shape().to_vec(),
                found,
            });
        }
        let values = r.f32s(p.value.len())?;
        p.value.data_mut().copy_from_slice(&values);
    }

    let norms = r.u32()?;
    if norms != model.num_norm_layers() {
        return Err(CheckpointError::Invalid(format!(
            "{norms} batch-norm blocks, config implies {}",
            model.num_norm_layers()
        )));
    }
    let names: Vec<String> = model.norm_layers().map(|(n, _)| n).collect();
    for (bn, expected) in model.norm_layers_mut().zip(names) {
        let name = r.name()?;
        if name != expected {
            return Err(CheckpointError::Invalid(format!(
                "expected batch norm `{expected}`, found `{name}`"
            )));
        }
        let channels = r.u32()?;
        if channels != bn.channels {
            return Err(CheckpointError::Extent {
                name: expected,
                expected: vec![bn.channels],
                found: vec![channels],
            });
        }
        bn.running_mean = r.f32s(channels)?;
        bn.running_var = r.f32s(channels)?;
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Invalid(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &SegModel, path: impl AsRef<Path>) -> Result<()> {
    crate::io::pnm::write(path.as_ref(), &encode(model))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SegModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn small() -> SegModel {
        let mut m = SegModel::new(&ModelConfig {
            stages: 2,
            features: 4,
            num_classes: 3,
            seed: 9,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut rng = Rng::new(1);
        for bn in m.norm_layers_mut() {
            bn.running_mean.iter_mut().for_each(|v| *v = rng.normal());
            bn.running_var.iter_mut().for_each(|v| *v = rng.uniform());
        }
        m
    }

    fn checkpoint_error(bytes: &[u8]) -> CheckpointError {
        match decode(bytes) {
            Err(Error::Checkpoint(e)) => e,
            other => panic!("expected a checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn save_load_save_is_identical() {
        let m = small();
        let bytes = encode(&m);
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
        for (a, b) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn default_model_size_formula() {
        let m = SegModel::new(&ModelConfig::default()).unwrap();
        // 4+4 convs and a classifier: 2 blocks each (weight rank 4, bias rank 1),
        // 8 gamma/beta pairs (rank 1), 8 running-stat blocks of 64 channels
        let name_bytes: usize = m.params().iter().map(|p| p.name.len()).sum::<usize>()
            + m.norm_layers().map(|(n, _)| n.len()).sum::<usize>();
        let param_blocks = 9 * (3 + 4 * 4) + 9 * (3 + 4) + 16 * (3 + 4);
        let norm_blocks = 8 * (2 + 4 + 8 * 64);
        let expected = HEADER_BYTES + 4 * 263_620 + param_blocks + 4 + norm_blocks + name_bytes;
        assert_eq!(encode(&m).len(), expected);
        assert_eq!(encoded_size(&m), expected);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = encode(&small());
        bytes[0] = b'X';
        assert_eq!(checkpoint_error(&bytes), CheckpointError::BadMagic);
        assert_eq!(checkpoint_error(b"BS"), CheckpointError::BadMagic);
    }

    #[test]
    fn wrong_version() {
        let mut bytes = encode(&small());
        bytes[5] = 9;
        assert_eq!(checkpoint_error(&bytes), CheckpointError::Version(9));
    }

    #[test]
    fn truncation() {
        let bytes = encode(&small());
        for cut in [7, 30, HEADER_BYTES + 3, bytes.len() - 1] {
            assert!(
                matches!(
                    checkpoint_error(&bytes[..cut]),
                    CheckpointError::Truncated(_)
                ),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn extent_mismatch() {
        let bytes = encode(&small());
        // the first extent of the first parameter (`enc1.conv.weight`, [4,3,3,3])
        let at = HEADER_BYTES + 2 + "enc1.conv.weight".len() + 1;
        let mut bad = bytes.clone();
        bad[at] = 5;
        assert!(matches!(
            checkpoint_error(&bad),
            CheckpointError::Extent { ref name, .. } if name == "enc1.conv.weight"
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode(&small());
        bytes.push(0);
        assert!(matches!(
            checkpoint_error(&bytes),
            CheckpointError::Invalid(_)
        ));
    }

    #[test]
    fn huge_config_does_not_allocate() {
        let mut bytes = encode(&small());
        // features field
        bytes[7 + 12..7 + 16].copy_from_slice(&4000u32.to_le_bytes());
        assert!(matches!(
            checkpoint_error(&bytes),
            CheckpointError::Truncated(_)
        ));
    }
}
