//! Checkpoint format: magic "MNEM", u32 version, a JSON-encoded model config
//! block, then named parameter tensors as little-endian f32 data. Parameters
//! are written in visit order, so identical training runs produce
//! byte-identical files.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use mnemcap_core::{Error, Result};

use crate::net::{ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Mat;

const MAGIC: &[u8; 4] = b"MNEM";
const VERSION: u32 = 1;

pub fn save_checkpoint<S: Scalar>(
    config: &ModelConfig,
    params: &ModelParams<S>,
    path: &Path,
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config_json =
        serde_json::to_vec(config).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(&(config_json.len() as u32).to_le_bytes())?;
    w.write_all(&config_json)?;
    let mut names: Vec<(String, usize, usize)> = Vec::new();
    params.for_each_tensor(|name, t| names.push((name.to_string(), t.rows, t.cols)));
    w.write_all(&(names.len() as u32).to_le_bytes())?;
    let mut result = Ok(());
    let w_ref = &mut w;
    params.for_each_tensor(|name, t| {
        if result.is_err() {
            return;
        }
        result = (|| -> Result<()> {
            let name_bytes = name.as_bytes();
            w_ref.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
            w_ref.write_all(name_bytes)?;
            w_ref.write_all(&(t.rows as u32).to_le_bytes())?;
            w_ref.write_all(&(t.cols as u32).to_le_bytes())?;
            for v in &t.data {
                w_ref.write_all(&(v.to_f64() as f32).to_le_bytes())?;
            }
            Ok(())
        })();
    });
    result?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(ModelConfig, ModelParams<S>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    r.read_exact(&mut u32buf)?;
    let config_len = u32::from_le_bytes(u32buf) as usize;
    let mut config_json = vec![0u8; config_len];
    r.read_exact(&mut config_json)?;
    let config: ModelConfig =
        serde_json::from_slice(&config_json).map_err(|e| Error::Format(e.to_string()))?;
    r.read_exact(&mut u32buf)?;
    let n_tensors = u32::from_le_bytes(u32buf) as usize;

    let mut tensors: std::collections::HashMap<String, Mat<S>> = std::collections::HashMap::new();
    for _ in 0..n_tensors {
        let mut u16buf = [0u8; 2];
        r.read_exact(&mut u16buf)?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        r.read_exact(&mut u32buf)?;
        let rows = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)?;
        let cols = u32::from_le_bytes(u32buf) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut u32buf)?;
            data.push(S::from_f64(f32::from_le_bytes(u32buf) as f64));
        }
        tensors.insert(name, Mat { rows, cols, data });
    }

    // Rebuild the parameter structure from the config, then fill by name.
    let model = crate::net::Model::<S>::new(config.clone())?;
    let mut params = model.init_params(0);
    let mut missing = Vec::new();
    params.for_each_tensor_mut(|name, t| match tensors.remove(name) {
        Some(loaded) if (loaded.rows, loaded.cols) == (t.rows, t.cols) => *t = loaded,
        Some(loaded) => missing.push(format!(
            "{name}: shape ({}, {}) vs expected ({}, {})",
            loaded.rows, loaded.cols, t.rows, t.cols
        )),
        None => missing.push(format!("{name}: absent")),
    });
    if !missing.is_empty() {
        return Err(Error::Format(format!("checkpoint tensors do not match config: {}", missing.join("; "))));
    }
    if !tensors.is_empty() {
        let extra: Vec<String> = tensors.keys().cloned().collect();
        return Err(Error::Format(format!("checkpoint has extra tensors: {}", extra.join(", "))));
    }
    Ok((config, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Arch, BlockKind, Model};

    fn config() -> ModelConfig {
        ModelConfig {
            arch: Arch::DecoderPrefix,
            block: BlockKind::DynamicConv,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            conv_kernel: 3,
            d_img: 4,
            vocab_size: 365,
            max_len: 16,
            dropout: 0.0,
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mnem");
        let model = Model::<f32>::new(config()).unwrap();
        let params = model.init_params(5);
        save_checkpoint(&model.config, &params, &path).unwrap();
        let (loaded_config, loaded) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded_config, model.config);
        assert_eq!(loaded, params);
    }

    #[test]
    fn identical_runs_write_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.mnem");
        let b = dir.path().join("b.mnem");
        let model = Model::<f32>::new(config()).unwrap();
        save_checkpoint(&model.config, &model.init_params(9), &a).unwrap();
        save_checkpoint(&model.config, &model.init_params(9), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mnem");
        std::fs::write(&path, b"XXXX").unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Format(_))));
    }
}
