//! Binary model checkpoints.
//!
//! Layout: `b"GLCK"`, `u32` format version, `u64` header length, a JSON
//! header describing layers and parameter shapes, then every parameter and
//! running statistic as little-endian `f64` in graph order. All integers are
//! little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, ModelError, ModelGraph, Objective, Param, Result, Role, RunningStats, VbConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GLCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    layer: usize,
    name: String,
    role: Role,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    input_dim: usize,
    layers: Vec<LayerSpec>,
    params: Vec<ParamHeader>,
    running: Vec<usize>,
    vb: Option<VbConfig>,
    #[serde(default)]
    objective: Objective,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(model: &ModelGraph, mut out: W) -> Result<()> {
    let header = Header {
        input_dim: model.input_dim,
        layers: model.layers.clone(),
        params: model
            .params
            .iter()
            .map(|p| ParamHeader {
                layer: p.layer,
                name: p.name.clone(),
                role: p.role,
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        running: model.running.iter().map(|r| r.layer).collect(),
        vb: model.vb,
        objective: model.objective,
    };
    let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let blobs = model
        .params
        .iter()
        .map(|p| &p.value)
        .chain(model.running.iter().flat_map(|r| [&r.mean, &r.var]));
    for t in blobs {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_tensor<R: Read>(input: &mut R, shape: Vec<usize>) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    input
        .read_exact(&mut bytes)
        .map_err(|_| bad("parameter data truncated"))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ModelGraph> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word).map_err(|_| bad("file too short"))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len).map_err(|_| bad("file too short"))?;
    let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| bad("header too large"))?;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json).map_err(|_| bad("header truncated"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;

    let mut params = Vec::with_capacity(header.params.len());
    for p in header.params {
        let value = read_tensor(&mut input, p.shape)?;
        params.push(Param {
            layer: p.layer,
            name: p.name,
            role: p.role,
            value,
        });
    }
    let mut running = Vec::with_capacity(header.running.len());
    for layer in header.running {
        let width = header
            .layers
            .get(layer)
            .ok_or_else(|| bad(format!("running stats for missing layer {layer}")))?
            .width;
        let mean = read_tensor(&mut input, vec![width])?;
        let var = read_tensor(&mut input, vec![width])?;
        running.push(RunningStats { layer, mean, var });
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after parameter data"));
    }
    for p in &params {
        if p.layer >= header.layers.len() || !p.value.is_finite() {
            return Err(bad(format!("invalid parameter {}.{}", p.layer, p.name)));
        }
    }
    Ok(ModelGraph {
        input_dim: header.input_dim,
        layers: header.layers,
        params,
        running,
        vb: header.vb,
        objective: header.objective,
    })
}

pub fn save_checkpoint(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelGraph> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
