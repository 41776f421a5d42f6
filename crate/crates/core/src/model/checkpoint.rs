//! Single-file checkpoints.
//!
//! Layout:
//!
//! ```text
//! u8      format version (currently 1)
//! u32 LE  header length in bytes
//! [u8]    JSON header: {"config", "step", "seed", "params": [{"name", "rows", "cols"}]}
//! f64 LE  parameter blocks, row-major, in declaration order
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::transformer::Model;
use super::{ModelConfig, ModelError};

pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub params: Vec<ParamEntry>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(model: &Model, step: u64, out: &mut W) -> Result<(), ModelError> {
    let named = model.weights.named_tensors();
    let header = CheckpointHeader {
        config: model.config().clone(),
        step,
        seed: model.config().seed,
        params: named
            .iter()
            .map(|(name, p)| ParamEntry { name: name.clone(), rows: p.tensor.rows, cols: p.tensor.cols })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    let len = u32::try_from(json.len()).map_err(|_| bad("header too large"))?;
    let mut buf = Vec::with_capacity(5 + json.len() + 8 * model.param_count());
    buf.push(CHECKPOINT_VERSION);
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, p) in &named {
        for v in &p.tensor.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(|e| ModelError::Io(e.to_string()))
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<(Model, CheckpointHeader), ModelError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(|e| ModelError::Io(e.to_string()))?;
    let (&version, rest) = bytes.split_first().ok_or_else(|| bad("empty file"))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    if rest.len() < 4 {
        return Err(bad("truncated header length"));
    }
    let len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
    let rest = &rest[4..];
    if rest.len() < len {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&rest[..len]).map_err(|e| bad(e.to_string()))?;
    let mut body = &rest[len..];

    let mut model = Model::new(header.config.clone())?;
    let expected: Vec<ParamEntry> = model
        .weights
        .named_tensors()
        .iter()
        .map(|(name, p)| ParamEntry { name: name.clone(), rows: p.tensor.rows, cols: p.tensor.cols })
        .collect();
    if expected != header.params {
        return Err(bad("parameter manifest does not match the configuration"));
    }
    for (_, t) in model.weights.tensors_mut() {
        let need = 8 * t.data.len();
        if body.len() < need {
            return Err(bad("truncated parameter data"));
        }
        for (v, chunk) in t.data.iter_mut().zip(body[..need].chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        body = &body[need..];
    }
    if !body.is_empty() {
        return Err(bad(format!("{} trailing bytes", body.len())));
    }
    Ok((model, header))
}

pub fn save_checkpoint(model: &Model, step: u64, path: &Path) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    write_checkpoint(model, step, &mut buf)?;
    fs::write(path, buf).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointHeader), ModelError> {
    let mut f = fs::File::open(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
    read_checkpoint(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn round_trip_restores_weights() {
        let mut cfg = ModelConfig::toy();
        cfg.seed = 3;
        let mut model = build_model(&cfg).unwrap();
        model.weights.lm_head.data[5] = 1.2345;
        let mut buf = Vec::new();
        write_checkpoint(&model, 17, &mut buf).unwrap();
        assert_eq!(buf[0], CHECKPOINT_VERSION);
        let (back, header) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(header.step, 17);
        assert_eq!(header.seed, 3);
        assert_eq!(back, model);
    }

    #[test]
    fn layout_is_little_endian_after_header() {
        let model = build_model(&ModelConfig::toy()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, 0, &mut buf).unwrap();
        let len = u32::from_le_bytes(buf[1..5].try_into().unwrap()) as usize;
        let first = f64::from_le_bytes(buf[5 + len..13 + len].try_into().unwrap());
        assert_eq!(first, model.weights.embed.data[0]);
        assert_eq!(buf.len(), 5 + len + 8 * model.param_count());
    }

    #[test]
    fn rejects_bad_version_and_truncation() {
        let model = build_model(&ModelConfig::toy()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&model, 0, &mut buf).unwrap();
        let mut wrong = buf.clone();
        wrong[0] = 9;
        assert!(matches!(read_checkpoint(&mut wrong.as_slice()), Err(ModelError::Checkpoint(_))));
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
