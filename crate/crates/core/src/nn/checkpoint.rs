//! Versioned JSON checkpoints for instance sets.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Instance, InstanceKind, InstanceSet, Layer, MlpParams};
use crate::error::{Error, Result};
use crate::io::{read_to_string, to_json_string, write_atomic};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    rows: usize,
    cols: usize,
    /// Row-major weights. `null` stands for a non-finite value.
    w: Vec<Option<f64>>,
    b: Vec<Option<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    seed: u64,
    layers: Vec<LayerRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    anchor: Option<Vec<LayerRecord>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointRecord {
    version: u32,
    kind: InstanceKind,
    #[serde(rename = "K")]
    k: usize,
    input_dim: usize,
    output_dim: usize,
    hidden_sizes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base_id: Option<String>,
    instances: Vec<InstanceRecord>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

fn encode(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn layers_to_records(p: &MlpParams) -> Vec<LayerRecord> {
    p.layers()
        .iter()
        .map(|l| LayerRecord {
            rows: l.out_dim(),
            cols: l.in_dim(),
            w: l.weights.iter().map(|&v| encode(v)).collect(),
            b: l.bias.iter().map(|&v| encode(v)).collect(),
        })
        .collect()
}

pub fn checkpoint_json(set: &InstanceSet) -> String {
    let first = &set.instances()[0].params;
    let rec = CheckpointRecord {
        version: CHECKPOINT_VERSION,
        kind: set.kind(),
        k: set.len(),
        input_dim: first.input_dim(),
        output_dim: first.output_dim(),
        hidden_sizes: first.hidden_sizes(),
        temperature: set.temperature(),
        base_id: set.base_id().map(str::to_owned),
        instances: set
            .instances()
            .iter()
            .map(|i| InstanceRecord {
                seed: i.seed,
                layers: layers_to_records(&i.params),
                anchor: i.anchor.as_ref().map(layers_to_records),
            })
            .collect(),
    };
    let mut s = to_json_string(&rec, false);
    s.push('\n');
    s
}

pub fn save_checkpoint(set: &InstanceSet, path: &Path) -> Result<()> {
    write_atomic(path, checkpoint_json(set).as_bytes())
}

/// Loads and validates a checkpoint. Non-finite weights are rejected as
/// malformed.
pub fn load_checkpoint(path: &Path) -> Result<InstanceSet> {
    let text = read_to_string(path)?;
    parse_checkpoint(&text, path, true)
}

/// Like [`load_checkpoint`] but keeps non-finite weights, so diagnostics can
/// report them.
pub fn load_checkpoint_unvalidated(path: &Path) -> Result<InstanceSet> {
    let text = read_to_string(path)?;
    parse_checkpoint(&text, path, false)
}

pub(crate) fn parse_checkpoint(text: &str, path: &Path, require_finite: bool) -> Result<InstanceSet> {
    let malformed = |reason: String| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let probe: VersionProbe = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    if probe.version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: probe.version,
        });
    }
    let rec: CheckpointRecord = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    if rec.k != rec.instances.len() {
        return Err(Error::ShapeInconsistency(format!(
            "K = {} but {} instances stored",
            rec.k,
            rec.instances.len()
        )));
    }
    let decode_layers = |records: Vec<LayerRecord>| -> Result<MlpParams> {
        let mut layers = Vec::with_capacity(records.len());
        for (i, l) in records.into_iter().enumerate() {
            if l.w.len() != l.rows * l.cols || l.b.len() != l.rows {
                return Err(Error::ShapeInconsistency(format!(
                    "layer {i}: {}x{} declared but {} weights and {} biases stored",
                    l.rows,
                    l.cols,
                    l.w.len(),
                    l.b.len()
                )));
            }
            let nonfinite = l.w.iter().chain(&l.b).any(|v| v.is_none());
            if require_finite && nonfinite {
                return Err(malformed(format!("layer {i}: non-finite parameter")));
            }
            let w: Vec<f64> = l.w.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect();
            let b: Vec<f64> = l.b.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect();
            let weights = Array2::from_shape_vec((l.rows, l.cols), w).expect("length checked");
            layers.push(Layer::new(weights, Array1::from(b))?);
        }
        MlpParams::new_unchecked_values(layers)
    };
    let mut instances = Vec::with_capacity(rec.instances.len());
    for (k, inst) in rec.instances.into_iter().enumerate() {
        let params = decode_layers(inst.layers)?;
        if params.input_dim() != rec.input_dim
            || params.output_dim() != rec.output_dim
            || params.hidden_sizes() != rec.hidden_sizes
        {
            return Err(Error::ShapeInconsistency(format!(
                "instance {k} does not match the declared input/hidden/output sizes"
            )));
        }
        let anchor = inst.anchor.map(decode_layers).transpose()?;
        instances.push(Instance {
            params,
            seed: inst.seed,
            anchor,
        });
    }
    InstanceSet::new(rec.kind, instances)?
        .with_base_id(rec.base_id)
        .with_temperature(rec.temperature)
}
