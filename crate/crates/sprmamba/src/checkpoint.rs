//! Model checkpoint container: a config echo plus named parameter blobs.
//!
//! ```text
//! magic   "SPRC"            4 bytes
//! version u32 = 1           little-endian
//! cfg_len u32               bytes of key=value config text (utf-8)
//! cfg     cfg_len bytes
//! count   u32               number of parameters
//! per parameter:
//!   name_len u32, name bytes
//!   ndim     u32, dims u64 * ndim
//!   data     f32 * prod(dims), little-endian
//! ```
//!
//! Values are stored in single precision; loading a checkpoint reproduces
//! eval-mode outputs bit-identically because both loads see the same
//! quantized values.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::NdArray;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPRC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = model.config.to_kv();
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(cfg.as_bytes())?;
    w.write_all(&(model.params().len() as u32).to_le_bytes())?;
    for entry in model.params().iter() {
        let name = entry.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = entry.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in entry.value.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut r = BufReader::new(File::open(path)?);
    let mut offset = 0usize;
    let mut take = |buf: &mut [u8], what: &str| -> Result<()> {
        r.read_exact(buf).map_err(|_| {
            Error::Format(format!(
                "{}: truncated {what} at offset {offset}",
                path.display()
            ))
        })?;
        offset += buf.len();
        Ok(())
    };

    let mut magic = [0u8; 4];
    take(&mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "{}: not a checkpoint (magic {magic:?})",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    take(&mut u32buf, "version")?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    take(&mut u32buf, "config length")?;
    let cfg_len = u32::from_le_bytes(u32buf) as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    take(&mut cfg_bytes, "config text")?;
    let cfg_text = String::from_utf8(cfg_bytes)
        .map_err(|_| Error::Format(format!("{}: config text is not utf-8", path.display())))?;
    let config = ModelConfig::from_kv(&cfg_text)?;
    let mut model = Model::new(config)?;

    take(&mut u32buf, "parameter count")?;
    let count = u32::from_le_bytes(u32buf) as usize;
    if count != model.params().len() {
        return Err(Error::Format(format!(
            "{}: {count} parameter blobs for a model with {}",
            path.display(),
            model.params().len()
        )));
    }
    let index: HashMap<String, usize> = model
        .params()
        .iter()
        .enumerate()
        .map(|(i, e)| (e.name.clone(), i))
        .collect();
    let mut seen = vec![false; count];
    let mut u64buf = [0u8; 8];
    for _ in 0..count {
        take(&mut u32buf, "name length")?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        take(&mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format(format!("{}: parameter name is not utf-8", path.display())))?;
        take(&mut u32buf, "ndim")?;
        let ndim = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            take(&mut u64buf, "dimension")?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut f32buf = [0u8; 4];
        for _ in 0..numel {
            take(&mut f32buf, "parameter data")?;
            data.push(f32::from_le_bytes(f32buf) as f64);
        }
        let &idx = index.get(&name).ok_or_else(|| {
            Error::Format(format!("{}: unknown parameter '{name}'", path.display()))
        })?;
        let id = crate::graph::ParamId(idx);
        if model.params().value(id).shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "{}: parameter '{name}' has shape {shape:?}, expected {:?}",
                path.display(),
                model.params().value(id).shape()
            )));
        }
        model.params_mut().entry_mut(id).value = NdArray::new(shape, data)?;
        seen[idx] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::Format(format!(
            "{}: parameter '{}' missing from checkpoint",
            path.display(),
            model.params().entry(crate::graph::ParamId(missing)).name
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvMode;
    use crate::srtm::BranchMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            stage1_dim: 8,
            refine_dim: 8,
            layers_per_stage: 1,
            stages: 2,
            num_classes: 3,
            window_size: 4,
            longrange_stride: 4,
            dropout: 0.0,
            causal: false,
            state_dim: 4,
            lambda_expand: 2,
            conv_mode: ConvMode::Dilated,
            branch_mode: BranchMode::Full,
            seed: 5,
        }
    }

    #[test]
    fn save_load_reproduces_eval_outputs_bit_identically() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::new(tiny_config()).unwrap();
        save_checkpoint(&model, &path).unwrap();

        let loaded1 = load_checkpoint(&path).unwrap();
        let loaded2 = load_checkpoint(&path).unwrap();
        assert_eq!(loaded1.config, model.config);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = NdArray::new(vec![12, 6], (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let a = loaded1.forward_eval(&f, None).unwrap();
        let b = loaded2.forward_eval(&f, None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.probs.data(), y.probs.data());
        }

        // Re-saving the loaded model reproduces the file byte for byte.
        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(&loaded1, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::new(tiny_config()).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_checkpoint_names_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::new(tiny_config()).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("offset"), "{err}");
    }
}
