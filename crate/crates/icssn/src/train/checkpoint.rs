//! Checkpoint persistence: a self-describing binary tensor file plus a JSON
//! metadata sidecar, both written atomically (temp file + rename).

use crate::nn::Params;
use crate::{IcssnError, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// File magic for the tensor container (version byte at the end).
const MAGIC: &[u8; 8] = b"ICSSNCK1";

/// Everything recorded about a checkpoint besides the tensors themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `"classification"` or `"segmentation"`.
    pub branch: String,
    /// Algorithm round the checkpoint was produced in (1-based).
    pub round: usize,
    /// `"warmup"` (frozen encoder) or `"joint"`.
    pub phase: String,
    /// Epoch the retained (best-validation) weights come from.
    pub epoch: usize,
    /// Hash of the run configuration, for provenance checks on resume.
    pub config_hash: String,
    /// Validation metrics of the retained weights.
    pub val_metrics: BTreeMap<String, f64>,
}

/// A parameter store paired with its provenance.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: Params,
    pub meta: CheckpointMeta,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

fn bad(path: &Path, details: impl Into<String>) -> IcssnError {
    IcssnError::Checkpoint {
        path: path.display().to_string(),
        details: details.into(),
    }
}

/// Writes `bytes` to `path` atomically: the data lands in a sibling temp
/// file first and is renamed into place, so a crash never leaves a
/// half-written checkpoint under the final name.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn encode_params(params: &Params) -> Vec<u8> {
    let entries: Vec<(&str, &crate::nn::Param)> = params.iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, param) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(u8::from(param.trainable));
        let shape = param.value.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in param.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(bad(self.path, "truncated tensor file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn decode_params(bytes: &[u8], path: &Path) -> Result<Params> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(bad(path, "wrong magic: not an ICSSN checkpoint"));
    }
    let count = r.u64()?;
    let mut params = Params::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| bad(path, "parameter name is not UTF-8"))?
            .to_string();
        let trainable = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(bad(path, format!("bad trainable flag {other}"))),
        };
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        let value = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| bad(path, format!("tensor `{name}`: {e}")))?;
        params.declare(&name, value, trainable);
    }
    if r.pos != bytes.len() {
        return Err(bad(path, "trailing bytes after the declared tensors"));
    }
    Ok(params)
}

/// Saves `ckpt` as `<path>` (tensors) and `<path>.json` (metadata).
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_atomic(path, &encode_params(&ckpt.params))?;
    write_atomic(&meta_path(path), serde_json::to_string_pretty(&ckpt.meta)?.as_bytes())?;
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| bad(path, e.to_string()))?
        .read_to_end(&mut bytes)?;
    let params = decode_params(&bytes, path)?;
    let meta_file = meta_path(path);
    let meta: CheckpointMeta = serde_json::from_str(
        &fs::read_to_string(&meta_file).map_err(|e| bad(&meta_file, e.to_string()))?,
    )?;
    Ok(Checkpoint { params, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn sample_checkpoint() -> Checkpoint {
        let mut params = Params::new();
        params.declare("encoder/w", arr2(&[[1.5, -2.0], [0.0, 3.25]]).into_dyn(), true);
        params.declare("encoder/bn/running_var", arr1(&[1.0, 0.5]).into_dyn(), false);
        params.declare("head/b", arr1(&[0.125]).into_dyn(), true);
        let mut val_metrics = BTreeMap::new();
        val_metrics.insert("val_loss".to_string(), 0.25);
        val_metrics.insert("miou".to_string(), 0.8125);
        Checkpoint {
            params,
            meta: CheckpointMeta {
                branch: "segmentation".into(),
                round: 2,
                phase: "joint".into(),
                epoch: 7,
                config_hash: "abc123".into(),
                val_metrics,
            },
        }
    }

    #[test]
    fn roundtrip_preserves_tensors_flags_order_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_checkpoint();
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        let orig: Vec<_> = ckpt.params.iter().map(|(n, _)| n.to_string()).collect();
        let back: Vec<_> = loaded.params.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(orig, back, "declaration order survives");
        for (name, param) in ckpt.params.iter() {
            assert_eq!(&param.value, loaded.params.get(name));
            assert_eq!(param.trainable, loaded.params.get_param(name).trainable);
        }
        assert_eq!(loaded.meta, ckpt.meta);
        assert_eq!(ckpt.params.hash_prefix(""), loaded.params.hash_prefix(""));
    }

    #[test]
    fn overwriting_is_atomic_and_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_checkpoint();
        save_checkpoint(&path, &ckpt).unwrap();
        save_checkpoint(&path, &ckpt).unwrap();
        let names: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert!(names.iter().all(|n| !n.ends_with(".tmp")), "{names:?}");
        assert_eq!(names.len(), 2, "tensor file plus metadata sidecar");
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample_checkpoint()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(IcssnError::Checkpoint { .. })
        ));
    }

    #[test]
    fn truncation_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample_checkpoint()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(IcssnError::Checkpoint { .. })
        ));
    }

    #[test]
    fn missing_file_reports_its_path() {
        let err = load_checkpoint(Path::new("/nonexistent/model.ckpt")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/model.ckpt"));
    }
}
