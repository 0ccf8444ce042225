//! Binary checkpoint files.
//!
//! Layout: magic, format version, model and tensor counts; a shape table
//! (rows, cols per tensor); every value as little-endian `f32`; one state
//! byte per parameter; then a length-prefixed JSON echo of the configuration,
//! feature spec, progress marker and random-stream positions.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CsmfError, Result};
use crate::numerics::{RngPosition, RngStream};
use crate::pipeline::{Checkpoint, PipelineConfig, Progress, Role, RoleModel};
use crate::stagenet::{ParamState, ParameterStore};
use crate::towers::{FeatureSpec, ModelConfig, TwoTowerModel};

const MAGIC: &[u8; 8] = b"CSMFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Echo {
    config: PipelineConfig,
    features: FeatureSpec,
    progress: Progress,
    models: Vec<(Role, ModelConfig)>,
    rng: Vec<(String, RngPosition)>,
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let tensors: Vec<_> = ckpt.models.iter().flat_map(|m| m.model.tensors()).collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.models.len() as u32).to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        out.extend_from_slice(&(t.values.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.values.cols() as u32).to_le_bytes());
    }
    for t in &tensors {
        for &v in t.values.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for t in &tensors {
        out.extend(t.states().iter().map(|s| s.to_byte()));
    }
    let echo = Echo {
        config: ckpt.config.clone(),
        features: ckpt.features.clone(),
        progress: ckpt.progress,
        models: ckpt.models.iter().map(|m| (m.role, m.model.config.clone())).collect(),
        rng: ckpt.rng.clone(),
    };
    let json = serde_json::to_vec(&echo).map_err(|e| CsmfError::Data(format!("checkpoint echo: {e}")))?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CsmfError::Incompatible("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CsmfError::Incompatible("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CsmfError::Incompatible(format!(
            "checkpoint format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let n_models = r.u32()? as usize;
    let n_tensors = r.u32()? as usize;
    let mut shapes = Vec::with_capacity(n_tensors.min(1 << 16));
    for _ in 0..n_tensors {
        shapes.push((r.u32()? as usize, r.u32()? as usize));
    }
    let total: usize = shapes.iter().map(|(a, b)| a * b).sum();
    let values: Vec<f64> = r
        .take(total * 4)?
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    let states: Vec<ParamState> = r
        .take(total)?
        .iter()
        .map(|&b| ParamState::from_byte(b).ok_or_else(|| CsmfError::Incompatible(format!("bad state byte {b}"))))
        .collect::<Result<_>>()?;
    let json_len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let echo: Echo = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| CsmfError::Incompatible(format!("checkpoint echo: {e}")))?;
    if r.pos != buf.len() {
        return Err(CsmfError::Incompatible("trailing bytes after checkpoint".into()));
    }
    if echo.models.len() != n_models {
        return Err(CsmfError::Incompatible("model count disagrees with echo".into()));
    }

    let mut models = Vec::new();
    let mut shape_iter = shapes.iter();
    let mut offset = 0;
    for (role, model_cfg) in echo.models {
        // the scaffold fixes shapes, targets and structural zeros
        let mut model = TwoTowerModel::new(model_cfg, echo.features.clone(), &mut RngStream::new(0))?;
        for t in model.tensors_mut() {
            let shape = shape_iter.next().ok_or_else(|| CsmfError::Incompatible("too few tensors".into()))?;
            if *shape != (t.values.rows(), t.values.cols()) {
                return Err(CsmfError::Incompatible(format!("tensor shape {shape:?} does not match the model")));
            }
            for i in 0..t.len() {
                let (v, s) = (values[offset + i], states[offset + i]);
                if (s == ParamState::StructuralZero) != (t.state(i) == ParamState::StructuralZero) {
                    return Err(CsmfError::Incompatible("structural zeros do not match the layout".into()));
                }
                t.set_value(i, v);
                t.set_state(i, s);
            }
            offset += t.len();
        }
        model.check_zero_states()?;
        models.push(RoleModel { role, model });
    }
    if shape_iter.next().is_some() {
        return Err(CsmfError::Incompatible("too many tensors".into()));
    }
    Ok(Checkpoint { config: echo.config, features: echo.features, progress: echo.progress, models, rng: echo.rng })
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(ckpt)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}
