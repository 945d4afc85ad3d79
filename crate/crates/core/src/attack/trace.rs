use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{AttackError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Loss fell below the stop threshold.
    Converged,
    /// No improvement for the stall limit.
    Stalled,
    MaxIters,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Converged => "converged",
            Self::Stalled => "stalled",
            Self::MaxIters => "max_iters",
        }
    }
}

/// Per-iteration record of an attack run.
///
/// `norms[t][j]` and `cosines[t][j]` belong to layer `layers[j]` at
/// iteration `t`; cosines compare the dummy gradient with the victim
/// gradient of that layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub layers: Vec<usize>,
    pub loss: Vec<f64>,
    pub norms: Vec<Vec<f64>>,
    pub cosines: Vec<Vec<f64>>,
    pub iterations: usize,
    pub termination: Option<Termination>,
}

impl AttackTrace {
    pub fn new(layers: Vec<usize>) -> Self {
        Self {
            layers,
            ..Self::default()
        }
    }

    pub(crate) fn push(&mut self, loss: f64, norms: Vec<f64>, cosines: Vec<f64>) {
        self.loss.push(loss);
        self.norms.push(norms);
        self.cosines.push(cosines);
        self.iterations += 1;
    }

    /// Running minimum of the loss series.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.loss
            .iter()
            .scan(f64::INFINITY, |best, &l| {
                *best = best.min(l);
                Some(*best)
            })
            .collect()
    }

    /// Index of `layer` in the per-iteration rows.
    pub fn column(&self, layer: usize) -> Option<usize> {
        self.layers.iter().position(|&l| l == layer)
    }

    pub fn cosine_series(&self, layer: usize) -> Option<Vec<f64>> {
        let j = self.column(layer)?;
        Some(self.cosines.iter().map(|row| row[j]).collect())
    }

    pub fn norm_series(&self, layer: usize) -> Option<Vec<f64>> {
        let j = self.column(layer)?;
        Some(self.norms.iter().map(|row| row[j]).collect())
    }

    fn check(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(AttackError::EmptyTrace);
        }
        let width = self.layers.len();
        let lengths_ok = self.loss.len() == self.iterations
            && self.norms.len() == self.iterations
            && self.cosines.len() == self.iterations
            && self.norms.iter().chain(&self.cosines).all(|r| r.len() == width);
        if lengths_ok {
            Ok(())
        } else {
            Err(AttackError::TraceShape)
        }
    }

    /// Long-format CSV: one row per iteration and layer.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "iter,loss,layer_id,grad_norm,cos_sim")?;
        for (t, loss) in self.loss.iter().enumerate() {
            for (j, layer) in self.layers.iter().enumerate() {
                writeln!(out, "{},{:e},{},{:e},{:e}", t + 1, loss, layer, self.norms[t][j], self.cosines[t][j])?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub mean_norm: f64,
    pub final_norm: f64,
    pub mean_cos: f64,
    pub final_cos: f64,
}

pub fn grad_diagnostics(trace: &AttackTrace) -> Result<Vec<LayerDiagnostics>> {
    trace.check()?;
    let n = trace.iterations as f64;
    let last = trace.iterations - 1;
    Ok(trace
        .layers
        .iter()
        .enumerate()
        .map(|(j, &layer)| LayerDiagnostics {
            layer,
            mean_norm: trace.norms.iter().map(|r| r[j]).sum::<f64>() / n,
            final_norm: trace.norms[last][j],
            mean_cos: trace.cosines.iter().map(|r| r[j]).sum::<f64>() / n,
            final_cos: trace.cosines[last][j],
        })
        .collect())
}
