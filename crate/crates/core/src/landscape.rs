//! Two-dimensional loss slices through one layer's weights.
//!
//! Two random directions shaped like the layer's `W` are drawn, each column is
//! rescaled to the norm of the matching column of `W`, and the second
//! direction is made orthogonal to the first. Cell `(i, j)` holds the layer's
//! loss with weights `W + αᵢ·D₁ + βⱼ·D₂`, evaluated on that layer's inputs with
//! every earlier layer frozen.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{calibrate_state, evaluate, LossSpec, LossState};
use crate::model::TrainedModel;
use crate::network::{layer_forward, DenseLayer};
use crate::rng::SplitMix64;
use crate::tensor::Matrix;

/// How the loss state is obtained at each grid point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateMode {
    /// Refit center and radius on the perturbed layer's output.
    #[default]
    Recalibrate,
    /// Keep the state stored in the model.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub layer_index: usize,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `values[i][j]` is the loss at `(alphas[i], betas[j])`.
    pub values: Matrix,
    pub direction_seed: u64,
    pub radius: f64,
    pub mode: StateMode,
    pub spec: LossSpec,
    pub model_seed: u64,
    pub samples: usize,
}

impl LandscapeGrid {
    pub fn center_value(&self) -> f64 {
        let mid = self.alphas.len() / 2;
        self.values.get(mid, self.betas.len() / 2)
    }
}

/// `steps` evenly spaced coordinates on `[-radius, radius]` with an exact 0
/// in the middle.
pub fn coordinates(radius: f64, steps: usize) -> Vec<f64> {
    let mid = (steps / 2) as f64;
    (0..steps).map(|i| radius * (i as f64 - mid) / mid).collect()
}

/// The two perturbation directions for `w`.
pub fn directions(w: &Matrix, seed: u64) -> (Matrix, Matrix) {
    let mut rng = SplitMix64::new(seed);
    let d1 = filter_normalized(w, &mut rng);
    let d2 = filter_normalized(w, &mut rng);
    let norm1 = d1.dot(&d1).expect("same shape");
    let d2 = if norm1 > 0.0 {
        let k = d1.dot(&d2).expect("same shape") / norm1;
        d2.sub(&d1.scale(k)).expect("same shape")
    } else {
        d2
    };
    (d1, d2)
}

fn filter_normalized(w: &Matrix, rng: &mut SplitMix64) -> Matrix {
    let (p, q) = w.shape();
    let raw = Matrix::from_fn(p, q, |_, _| rng.normal());
    let col_norm = |m: &Matrix, j: usize| (0..p).map(|i| m.get(i, j).powi(2)).sum::<f64>().sqrt();
    let scale: Vec<f64> = (0..q)
        .map(|j| {
            let d = col_norm(&raw, j);
            if d > 0.0 {
                col_norm(w, j) / d
            } else {
                0.0
            }
        })
        .collect();
    Matrix::from_fn(p, q, |i, j| raw.get(i, j) * scale[j])
}

/// Loss surface of layer `layer` (0-based) around the trained weights.
/// `data` is network input in the model's feature space.
pub fn compute_landscape(
    model: &TrainedModel,
    layer: usize,
    data: &Matrix,
    grid_radius: f64,
    steps: usize,
    direction_seed: u64,
    mode: StateMode,
) -> Result<LandscapeGrid> {
    let depth = model.network.depth();
    if layer >= depth {
        return Err(Error::LayerIndex { index: layer, layers: depth });
    }
    if steps < 3 || steps % 2 == 0 {
        return Err(Error::config(format!("steps must be odd and at least 3, got {steps}")));
    }
    if !(grid_radius >= 0.0 && grid_radius.is_finite()) {
        return Err(Error::config(format!("grid radius must be finite and non-negative, got {grid_radius}")));
    }
    let frozen: Option<&LossState> = match mode {
        StateMode::Recalibrate => None,
        StateMode::Frozen => Some(model.layer_states.get(layer).ok_or(Error::Uncalibrated)?),
    };

    let mut input = data.clone();
    for l in &model.network.layers[..layer] {
        input = layer_forward(l, &input)?;
    }
    let base = &model.network.layers[layer];
    let (d1, d2) = directions(&base.w, direction_seed);
    let alphas = coordinates(grid_radius, steps);
    let betas = alphas.clone();

    let mut values = Vec::with_capacity(steps * steps);
    for &a in &alphas {
        for &b in &betas {
            let w: Vec<f64> = base
                .w
                .as_slice()
                .iter()
                .zip(d1.as_slice().iter().zip(d2.as_slice()))
                .map(|(w, (x, y))| w + a * x + b * y)
                .collect();
            let layer_ab = DenseLayer::new(Matrix::from_vec(base.w.rows(), base.w.cols(), w)?, base.b.clone())?;
            let h = layer_forward(&layer_ab, &input)?;
            let loss = match frozen {
                Some(st) => evaluate(&h, &model.spec, st)?.total,
                None => evaluate(&h, &model.spec, &calibrate_state(&h, &model.spec)?)?.total,
            };
            if !loss.is_finite() {
                return Err(Error::Format(format!("non-finite loss at alpha {a}, beta {b}")));
            }
            values.push(loss);
        }
    }
    Ok(LandscapeGrid {
        layer_index: layer,
        alphas,
        betas,
        values: Matrix::from_vec(steps, steps, values)?,
        direction_seed,
        radius: grid_radius,
        mode,
        spec: model.spec,
        model_seed: model.seed,
        samples: data.rows(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeSidecar {
    pub layer_index: usize,
    pub loss: LossSpec,
    pub model_seed: u64,
    pub direction_seed: u64,
    pub radius: f64,
    pub steps: usize,
    pub state_mode: StateMode,
    pub samples: usize,
    pub center_loss: f64,
    pub directions: String,
}

/// Default file name for a layer's surface.
pub fn landscape_file_name(layer: usize) -> String {
    format!("landscape_layer{layer}.csv")
}

/// Writes `alpha,beta,loss` rows (alphas outer, betas inner) to `path` and a
/// JSON sidecar next to it. Returns the sidecar path.
pub fn export_landscape(grid: &LandscapeGrid, path: &Path) -> Result<PathBuf> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "alpha,beta,loss")?;
    for (i, a) in grid.alphas.iter().enumerate() {
        for (j, b) in grid.betas.iter().enumerate() {
            writeln!(out, "{a:?},{b:?},{:?}", grid.values.get(i, j))?;
        }
    }
    out.flush()?;
    let sidecar = LandscapeSidecar {
        layer_index: grid.layer_index,
        loss: grid.spec,
        model_seed: grid.model_seed,
        direction_seed: grid.direction_seed,
        radius: grid.radius,
        steps: grid.alphas.len(),
        state_mode: grid.mode,
        samples: grid.samples,
        center_loss: grid.center_value(),
        directions: "two Gaussian directions from SplitMix64(direction_seed), each column rescaled to the norm of \
                     the matching weight column, second made Frobenius-orthogonal to the first; earlier layers frozen"
            .to_string(),
    };
    let side_path = path.with_extension("json");
    std::fs::write(&side_path, serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(side_path)
}
