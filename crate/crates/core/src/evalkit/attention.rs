use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::graph::softmax_into;
use crate::tensor::Graph;
use crate::traj::{DecisionModel, TrajectoryBatch};

/// Sharpening temperature for heatmaps.
pub const EXPORT_TEMPERATURE: f32 = 0.1;

/// Head-averaged attention of one layer for one window, `seq × seq`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMaps {
    pub seq: usize,
    /// Mean of the model's own attention probabilities over heads.
    pub mean: Vec<f32>,
    /// Mean over heads of `softmax(scores / temperature)` under the same mask.
    pub tempered: Vec<f32>,
}

/// Captures attention for window `sample` of `batch`. Entries above the
/// diagonal and at padded keys are exactly zero in both maps.
pub fn attention_export(model: &DecisionModel, batch: &TrajectoryBatch, sample: usize, temperature: f32) -> Result<Vec<LayerMaps>> {
    if sample >= batch.batch {
        return Err(Error::Contract(format!("sample {sample} of a batch of {}", batch.batch)));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, batch, true, None)?;
    let record = fwd.attention.expect("capture requested");
    let mask = batch.token_mask();
    let seq = 3 * batch.context;
    let valid = &mask[sample * seq..(sample + 1) * seq];
    let mut out = Vec::with_capacity(record.layers.len());
    for layer in &record.layers {
        let mean = layer.head_mean(sample);
        let mut tempered = vec![0.0f32; seq * seq];
        let mut logits = Vec::with_capacity(seq);
        let mut probs = Vec::with_capacity(seq);
        for h in 0..layer.heads {
            let scores = layer.head_scores(sample, h);
            for i in 0..seq {
                let keys: Vec<usize> = (0..=i).filter(|&j| j == i || valid[j]).collect();
                logits.clear();
                logits.extend(keys.iter().map(|&j| scores[i * seq + j] / temperature));
                probs.resize(keys.len(), 0.0);
                softmax_into(&logits, &mut probs);
                for (&j, p) in keys.iter().zip(&probs) {
                    tempered[i * seq + j] += p / layer.heads as f32;
                }
            }
        }
        out.push(LayerMaps { seq, mean, tempered });
    }
    Ok(out)
}

fn csv(m: &[f32], seq: usize) -> String {
    let mut s = String::new();
    for row in m.chunks(seq) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Binary 8-bit grayscale image, each matrix cell drawn as a `cell × cell` block.
fn pgm(m: &[f32], seq: usize, cell: usize) -> Vec<u8> {
    let side = seq * cell;
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    for i in 0..side {
        for j in 0..side {
            let v = m[(i / cell) * seq + j / cell];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Writes `layer{i}.csv`, `layer{i}.pgm` (raw maps) and `layer{i}_t.csv`,
/// `layer{i}_t.pgm` (tempered maps) into `dir`; returns the written paths.
pub fn write_attention(dir: &Path, maps: &[LayerMaps]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (i, m) in maps.iter().enumerate() {
        for (suffix, data) in [("", &m.mean), ("_t", &m.tempered)] {
            let c = dir.join(format!("layer{i}{suffix}.csv"));
            fs::write(&c, csv(data, m.seq)).map_err(|e| Error::io(&c, e))?;
            let p = dir.join(format!("layer{i}{suffix}.pgm"));
            fs::write(&p, pgm(data, m.seq, 8)).map_err(|e| Error::io(&p, e))?;
            written.extend([c, p]);
        }
    }
    Ok(written)
}
