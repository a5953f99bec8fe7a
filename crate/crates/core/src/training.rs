//! Forward-forward and backpropagation training with plain SGD.
//!
//! Both regimes fit each loss state on the current batch, hold it fixed while
//! differentiating, and step with `W ← W − (λ/n)·∂L/∂W` where `n` is the batch
//! size. Forward-forward updates layer `l` as soon as its own loss is known and
//! feeds the updated layer's output to layer `l + 1`; backpropagation takes the
//! loss at the last layer and updates every layer once per batch.

use std::borrow::Cow;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{calibrate_state, distance_scores, evaluate, LossSpec, LossState};
use crate::model::TrainedModel;
use crate::network::{forward_all, layer_forward, DenseLayer, Network};
use crate::rng::SplitMix64;
use crate::scoring::calibrate;
use crate::tensor::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "ff")]
    ForwardForward,
    #[serde(rename = "bp")]
    Backprop,
}

impl Regime {
    pub const ALL: [Regime; 2] = [Regime::ForwardForward, Regime::Backprop];

    pub fn key(self) -> &'static str {
        match self {
            Regime::ForwardForward => "ff",
            Regime::Backprop => "bp",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ff" | "forward_forward" | "forward-forward" => Ok(Regime::ForwardForward),
            "bp" | "backprop" | "backpropagation" => Ok(Regime::Backprop),
            _ => Err(Error::config(format!("unknown regime `{s}` (expected ff or bp)"))),
        }
    }
}

/// Where the backprop loss is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BpLoss {
    #[default]
    FinalLayer,
    /// Sum of every layer's loss (ablation).
    SumLayers,
}

/// What forward-forward feeds to the next layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfFeed {
    /// The output recomputed with the freshly updated weights.
    #[default]
    PostUpdate,
    /// The output computed before the update.
    PreUpdate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub learning_rate: f64,
    pub epochs_max: usize,
    /// `None` trains on the full batch.
    pub batch_size: Option<usize>,
    pub patience: usize,
    /// Threshold fraction used for calibration.
    pub nu: f64,
    /// Initialization and batch-shuffling seed.
    pub seed: u64,
    pub bp_loss: BpLoss,
    pub ff_feed: FfFeed,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::ForwardForward,
            learning_rate: 0.01,
            epochs_max: 200,
            batch_size: None,
            patience: 10,
            nu: 0.05,
            seed: 1,
            bp_loss: BpLoss::FinalLayer,
            ff_feed: FfFeed::PostUpdate,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs_max == 0 {
            return Err(Error::config("epochs_max must be at least 1"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if !(self.nu > 0.0 && self.nu < 1.0) {
            return Err(Error::config(format!("nu must lie in (0, 1), got {}", self.nu)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Final-layer loss summed over the epoch's batches, taken before each update.
    pub train_loss_curve: Vec<f64>,
    /// Final-layer loss on the validation split after each epoch (NaN without one).
    pub valid_loss_curve: Vec<f64>,
    pub stopped_early: bool,
    /// Loss of every layer on the full training split after training, with
    /// states fitted on that split.
    pub layer_train_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_train_loss(&self) -> f64 {
        *self.layer_train_losses.last().unwrap_or(&f64::NAN)
    }

    /// `epoch,train_loss,valid_loss`, epochs counted from 1.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "epoch,train_loss,valid_loss")?;
        for (e, (t, v)) in self.train_loss_curve.iter().zip(&self.valid_loss_curve).enumerate() {
            writeln!(out, "{},{:?},{:?}", e + 1, t, v)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Training and (optional) validation features.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a Matrix,
    pub valid: Option<&'a Matrix>,
}

impl<'a> TrainData<'a> {
    pub fn new(train: &'a Matrix, valid: &'a Matrix) -> Self {
        TrainData {
            train,
            valid: (valid.rows() > 0).then_some(valid),
        }
    }

    pub fn train_only(train: &'a Matrix) -> Self {
        TrainData { train, valid: None }
    }
}

/// `W ← W − (λ/n)·grad_w`, `b ← b − (λ/n)·grad_b`.
pub fn sgd_step(layer: &mut DenseLayer, grad_w: &Matrix, grad_b: &Vector, lr: f64, n: usize) -> Result<()> {
    if grad_w.shape() != layer.w.shape() {
        return Err(Error::Shape {
            op: "sgd_step",
            left: layer.w.shape(),
            right: grad_w.shape(),
        });
    }
    if grad_b.len() != layer.b.len() {
        return Err(Error::Shape {
            op: "sgd_step",
            left: (1, layer.b.len()),
            right: (1, grad_b.len()),
        });
    }
    let step = lr / n as f64;
    let w: Vec<f64> = layer
        .w
        .as_slice()
        .iter()
        .zip(grad_w.as_slice())
        .map(|(w, g)| w - step * g)
        .collect();
    layer.w = Matrix::from_vec(layer.w.rows(), layer.w.cols(), w)?;
    layer.b = Vector::new(layer.b.iter().zip(grad_b.iter()).map(|(b, g)| b - step * g).collect());
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub grad_w: Matrix,
    pub grad_b: Vector,
    pub grad_x: Matrix,
}

/// Gradients of a layer's parameters and input given `grad_h = ∂L/∂h` at its
/// post-ReLU output. Units with a non-positive pre-activation pass nothing.
pub fn layer_grads(layer: &DenseLayer, x: &Matrix, grad_h: &Matrix) -> Result<LayerGrads> {
    let h = layer_forward(layer, x)?;
    let (gw, gb, gx) = grads_from_output(layer, x, &h, grad_h, true)?;
    Ok(LayerGrads {
        grad_w: gw,
        grad_b: gb,
        grad_x: gx.expect("requested"),
    })
}

// `h > 0` exactly where the pre-activation is positive, so the mask is read
// off the stored output.
fn grads_from_output(
    layer: &DenseLayer,
    x: &Matrix,
    h: &Matrix,
    grad_h: &Matrix,
    want_x: bool,
) -> Result<(Matrix, Vector, Option<Matrix>)> {
    if grad_h.shape() != h.shape() || x.rows() != h.rows() || x.cols() != layer.inputs() {
        return Err(Error::Shape {
            op: "layer_grads",
            left: x.shape(),
            right: grad_h.shape(),
        });
    }
    let masked: Vec<f64> = grad_h
        .as_slice()
        .iter()
        .zip(h.as_slice())
        .map(|(&g, &o)| if o > 0.0 { g } else { 0.0 })
        .collect();
    let masked = Matrix::from_vec(h.rows(), h.cols(), masked)?;
    let grad_w = x.t_matmul(&masked)?;
    let grad_b = masked.col_sums();
    let grad_x = if want_x { Some(masked.matmul_t(&layer.w)?) } else { None };
    Ok((grad_w, grad_b, grad_x))
}

fn non_finite(layer: usize) -> Error {
    Error::NonFinite { epoch: 0, layer }
}

/// One forward-forward update of a single layer: forward, fit the state,
/// evaluate, step. Only this layer's parameters and input are visible here.
/// Returns the loss and the pre-update output.
pub fn ff_layer_update(layer: &mut DenseLayer, input: &Matrix, spec: &LossSpec, lr: f64) -> Result<(f64, Matrix)> {
    let h = layer_forward(layer, input)?;
    let state = calibrate_state(&h, spec)?;
    let ev = evaluate(&h, spec, &state)?;
    if !ev.total.is_finite() {
        return Err(non_finite(0));
    }
    let (gw, gb, _) = grads_from_output(layer, input, &h, &ev.grad_h, false)?;
    sgd_step(layer, &gw, &gb, lr, input.rows())?;
    if !layer.is_finite() {
        return Err(non_finite(0));
    }
    Ok((ev.total, h))
}

/// What one forward-forward batch step saw.
#[derive(Debug, Clone, PartialEq)]
pub struct FfTrace {
    /// Pre-update loss of each layer.
    pub layer_losses: Vec<f64>,
    /// The input handed to each layer.
    pub inputs: Vec<Matrix>,
}

/// Forward-forward step on one batch, layer by layer.
pub fn ff_step(net: &mut Network, x: &Matrix, spec: &LossSpec, lr: f64, feed: FfFeed) -> Result<FfTrace> {
    let depth = net.depth();
    let mut layer_losses = Vec::with_capacity(depth);
    let mut inputs = Vec::with_capacity(depth);
    let mut input = x.clone();
    for (l, layer) in net.layers.iter_mut().enumerate() {
        let (loss, h_pre) = ff_layer_update(layer, &input, spec, lr).map_err(|e| match e {
            Error::NonFinite { .. } => non_finite(l),
            other => other,
        })?;
        layer_losses.push(loss);
        let next = if l + 1 == depth {
            h_pre
        } else {
            match feed {
                FfFeed::PostUpdate => layer_forward(layer, &input)?,
                FfFeed::PreUpdate => h_pre,
            }
        };
        inputs.push(std::mem::replace(&mut input, next));
    }
    Ok(FfTrace { layer_losses, inputs })
}

/// Backprop step on one batch. Returns the final-layer loss.
pub fn bp_step(net: &mut Network, x: &Matrix, spec: &LossSpec, lr: f64, mode: BpLoss) -> Result<f64> {
    let acts = forward_all(net, x)?;
    let depth = net.depth();
    let states = fit_states(&acts, spec, mode)?;
    let (grads, final_loss) = backward(net, x, &acts, spec, &states, mode)?;
    if !final_loss.is_finite() {
        return Err(non_finite(depth - 1));
    }
    for (l, (layer, (gw, gb))) in net.layers.iter_mut().zip(grads).enumerate() {
        sgd_step(layer, &gw, &gb, lr, x.rows())?;
        if !layer.is_finite() {
            return Err(non_finite(l));
        }
    }
    Ok(final_loss)
}

/// States the backprop objective reads: every layer for `SumLayers`, only the
/// last otherwise (earlier entries are `None`).
fn fit_states(acts: &[Matrix], spec: &LossSpec, mode: BpLoss) -> Result<Vec<Option<LossState>>> {
    let depth = acts.len();
    acts.iter()
        .enumerate()
        .map(|(l, h)| {
            if l + 1 == depth || mode == BpLoss::SumLayers {
                calibrate_state(h, spec).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

type ParamGrads = Vec<(Matrix, Vector)>;

fn backward(
    net: &Network,
    x: &Matrix,
    acts: &[Matrix],
    spec: &LossSpec,
    states: &[Option<LossState>],
    mode: BpLoss,
) -> Result<(ParamGrads, f64)> {
    let depth = net.depth();
    let mut grads: Vec<Option<(Matrix, Vector)>> = vec![None; depth];
    let last = evaluate(&acts[depth - 1], spec, states[depth - 1].as_ref().expect("fitted"))?;
    let final_loss = last.total;
    let mut grad_h = last.grad_h;
    for l in (0..depth).rev() {
        let input = if l == 0 { x } else { &acts[l - 1] };
        let (gw, gb, gx) = grads_from_output(&net.layers[l], input, &acts[l], &grad_h, l > 0)?;
        grads[l] = Some((gw, gb));
        if let Some(gx) = gx {
            grad_h = match (mode, &states[l - 1]) {
                (BpLoss::SumLayers, Some(st)) => {
                    let ev = evaluate(&acts[l - 1], spec, st)?;
                    if !ev.total.is_finite() {
                        return Err(non_finite(l - 1));
                    }
                    gx.add(&ev.grad_h)?
                }
                _ => gx,
            };
        }
    }
    Ok((grads.into_iter().map(|g| g.expect("filled")).collect(), final_loss))
}

/// Backprop objective with every state held fixed. `states` holds one entry
/// per layer; only the last is read in `FinalLayer` mode.
pub fn network_loss(net: &Network, x: &Matrix, spec: &LossSpec, states: &[LossState], mode: BpLoss) -> Result<f64> {
    let acts = forward_all(net, x)?;
    check_state_count(net, states)?;
    let mut total = evaluate(&acts[net.depth() - 1], spec, &states[net.depth() - 1])?.total;
    if mode == BpLoss::SumLayers {
        for (h, st) in acts.iter().zip(states).take(net.depth() - 1) {
            total += evaluate(h, spec, st)?.total;
        }
    }
    Ok(total)
}

/// Analytic parameter gradients of [`network_loss`], layer by layer.
pub fn network_gradients(
    net: &Network,
    x: &Matrix,
    spec: &LossSpec,
    states: &[LossState],
    mode: BpLoss,
) -> Result<Vec<(Matrix, Vector)>> {
    check_state_count(net, states)?;
    let acts = forward_all(net, x)?;
    let states: Vec<Option<LossState>> = states.iter().cloned().map(Some).collect();
    Ok(backward(net, x, &acts, spec, &states, mode)?.0)
}

fn check_state_count(net: &Network, states: &[LossState]) -> Result<()> {
    if states.len() != net.depth() {
        return Err(Error::Length(states.len(), net.depth()));
    }
    Ok(())
}

/// True iff the first minimum of `valid_losses` lies more than `patience`
/// entries before the last one.
pub fn early_stop_check(valid_losses: &[f64], patience: usize) -> bool {
    let Some(best) = first_argmin(valid_losses) else {
        return false;
    };
    valid_losses.len() - 1 - best > patience
}

fn first_argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.map_or(true, |b| *v < values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Final-layer loss of the frozen network on `x`, with the state fitted on `x`.
pub fn frozen_loss(net: &Network, x: &Matrix, spec: &LossSpec) -> Result<f64> {
    let acts = forward_all(net, x)?;
    let h = acts.last().expect("non-empty network");
    let state = calibrate_state(h, spec)?;
    Ok(evaluate(h, spec, &state)?.total)
}

pub fn train(net: Network, data: TrainData<'_>, spec: &LossSpec, cfg: &TrainConfig) -> Result<(TrainedModel, TrainReport)> {
    match cfg.regime {
        Regime::ForwardForward => train_ff(net, data, spec, cfg),
        Regime::Backprop => train_bp(net, data, spec, cfg),
    }
}

pub fn train_ff(net: Network, data: TrainData<'_>, spec: &LossSpec, cfg: &TrainConfig) -> Result<(TrainedModel, TrainReport)> {
    if cfg.regime != Regime::ForwardForward {
        return Err(Error::config("train_ff called with a non-forward-forward config"));
    }
    run(net, data, spec, cfg, |net, xb| {
        let trace = ff_step(net, xb, spec, cfg.learning_rate, cfg.ff_feed)?;
        Ok(*trace.layer_losses.last().expect("non-empty network"))
    })
}

pub fn train_bp(net: Network, data: TrainData<'_>, spec: &LossSpec, cfg: &TrainConfig) -> Result<(TrainedModel, TrainReport)> {
    if cfg.regime != Regime::Backprop {
        return Err(Error::config("train_bp called with a non-backprop config"));
    }
    run(net, data, spec, cfg, |net, xb| bp_step(net, xb, spec, cfg.learning_rate, cfg.bp_loss))
}

const SHUFFLE_SALT: u64 = 0x5EED_0F_BA7C_4E5;

fn run(
    mut net: Network,
    data: TrainData<'_>,
    spec: &LossSpec,
    cfg: &TrainConfig,
    mut step: impl FnMut(&mut Network, &Matrix) -> Result<f64>,
) -> Result<(TrainedModel, TrainReport)> {
    cfg.validate()?;
    spec.validate()?;
    net.validate()?;
    let x = data.train;
    for m in std::iter::once(x).chain(data.valid) {
        if m.cols() != net.input_width() {
            return Err(Error::Shape {
                op: "training data",
                left: m.shape(),
                right: (1, net.input_width()),
            });
        }
    }
    let n = x.rows();
    if n == 0 {
        return Err(Error::EmptyBatch("training split"));
    }
    let batch = cfg.batch_size.unwrap_or(n).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SplitMix64::new(cfg.seed ^ SHUFFLE_SALT);
    let last_layer = net.depth() - 1;

    let mut train_curve = Vec::with_capacity(cfg.epochs_max);
    let mut valid_curve = Vec::with_capacity(cfg.epochs_max);
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs_max {
        let tag = |e: Error| match e {
            Error::NonFinite { layer, .. } => Error::NonFinite { epoch, layer },
            other => other,
        };
        let mut epoch_loss = 0.0;
        if batch < n {
            rng.shuffle(&mut order);
        }
        for chunk in order.chunks(batch) {
            let xb: Cow<'_, Matrix> = if batch == n {
                Cow::Borrowed(x)
            } else {
                Cow::Owned(x.select_rows(chunk))
            };
            epoch_loss += step(&mut net, &xb).map_err(tag)?;
        }
        train_curve.push(epoch_loss);
        match data.valid {
            Some(v) => {
                let vl = frozen_loss(&net, v, spec)?;
                if !vl.is_finite() {
                    return Err(Error::NonFinite { epoch, layer: last_layer });
                }
                valid_curve.push(vl);
                if epoch < cfg.epochs_max && early_stop_check(&valid_curve, cfg.patience) {
                    stopped_early = true;
                    break;
                }
            }
            None => valid_curve.push(f64::NAN),
        }
        log::trace!("epoch {epoch}: train {epoch_loss:e}");
    }

    let (model, layer_train_losses) = finalize(net, x, spec, cfg)?;
    let report = TrainReport {
        epochs_run: train_curve.len(),
        train_loss_curve: train_curve,
        valid_loss_curve: valid_curve,
        stopped_early,
        layer_train_losses,
    };
    Ok((model, report))
}

/// Fits every layer's state on the full training split, records each layer's
/// loss there, and calibrates the threshold on the final layer's distances.
fn finalize(net: Network, x: &Matrix, spec: &LossSpec, cfg: &TrainConfig) -> Result<(TrainedModel, Vec<f64>)> {
    let acts = forward_all(&net, x)?;
    let mut states = Vec::with_capacity(acts.len());
    let mut losses = Vec::with_capacity(acts.len());
    for h in &acts {
        let st = calibrate_state(h, spec)?;
        losses.push(evaluate(h, spec, &st)?.total);
        states.push(st);
    }
    let distances = distance_scores(acts.last().expect("non-empty"), spec, states.last().expect("non-empty"))?;
    let calibration = calibrate(&distances, cfg.nu)?;
    let mut model = TrainedModel::new(net, *spec, cfg.seed);
    model.layer_states = states;
    model.calibration = Some(calibration);
    model.train = Some(cfg.clone());
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{relative_error, LossKind};
    use crate::network::init_network;
    use proptest::prelude::*;

    fn blob(seed: u64, n: usize, p: usize) -> Matrix {
        let mut rng = SplitMix64::new(seed);
        Matrix::from_fn(n, p, |_, _| rng.normal())
    }

    fn cfg(regime: Regime) -> TrainConfig {
        TrainConfig {
            regime,
            epochs_max: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sgd_examples() {
        let mut l = DenseLayer::new(Matrix::from_rows(&[[1.0]]), Vector::new(vec![0.0])).unwrap();
        sgd_step(&mut l, &Matrix::from_rows(&[[0.5]]), &Vector::new(vec![0.0]), 0.1, 1).unwrap();
        assert_eq!(l.w.as_slice(), &[0.95]);

        let net = init_network(&[3, 4], 2).unwrap();
        let mut l = net.layers[0].clone();
        let before = l.clone();
        sgd_step(&mut l, &blob(1, 3, 4), &Vector::new(vec![1.0; 4]), 0.0, 5).unwrap();
        assert_eq!(l, before);
        sgd_step(&mut l, &Matrix::zeros(3, 4), &Vector::zeros(4), 0.3, 5).unwrap();
        assert_eq!(l, before);
        assert!(sgd_step(&mut l, &Matrix::zeros(4, 3), &Vector::zeros(4), 0.3, 5).is_err());
    }

    #[test]
    fn layer_grads_examples() {
        let net = init_network(&[3, 4], 2).unwrap();
        let x = blob(3, 5, 3);
        let g = layer_grads(&net.layers[0], &x, &Matrix::zeros(5, 4)).unwrap();
        assert!(g.grad_w.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.grad_b.iter().all(|&v| v == 0.0));
        assert!(g.grad_x.as_slice().iter().all(|&v| v == 0.0));

        let dead = DenseLayer::new(Matrix::zeros(3, 4), Vector::new(vec![-1.0; 4])).unwrap();
        let g = layer_grads(&dead, &x, &blob(4, 5, 4)).unwrap();
        assert!(g.grad_w.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.grad_x.as_slice().iter().all(|&v| v == 0.0));

        assert!(layer_grads(&net.layers[0], &x, &Matrix::zeros(5, 3)).is_err());
    }

    /// Finite-difference oracle on a single layer with a fixed state.
    #[test]
    fn layer_grads_match_finite_differences() {
        let spec = LossSpec::new(LossKind::LsSvdd);
        let mut layer = init_network(&[3, 4], 11).unwrap().layers.remove(0);
        layer.b = Vector::new(vec![0.3, 0.2, 0.25, 0.4]);
        let x = blob(5, 6, 3);
        let h = layer_forward(&layer, &x).unwrap();
        let state = calibrate_state(&h, &spec).unwrap();
        let loss = |l: &DenseLayer| evaluate(&layer_forward(l, &x).unwrap(), &spec, &state).unwrap().total;
        let ev = evaluate(&h, &spec, &state).unwrap();
        let g = layer_grads(&layer, &x, &ev.grad_h).unwrap();
        let eps = 1e-5;
        for idx in 0..12 {
            let (i, j) = (idx / 4, idx % 4);
            let bump = |d: f64| {
                let mut l = layer.clone();
                let mut w = l.w.clone().into_vec();
                w[idx] += d;
                l.w = Matrix::from_vec(3, 4, w).unwrap();
                loss(&l)
            };
            let numeric = (bump(eps) - bump(-eps)) / (2.0 * eps);
            assert!(relative_error(g.grad_w.get(i, j), numeric) < 1e-5, "w[{i},{j}]");
        }
        for j in 0..4 {
            let bump = |d: f64| {
                let mut l = layer.clone();
                let mut b = l.b.clone().into_vec();
                b[j] += d;
                l.b = Vector::new(b);
                loss(&l)
            };
            let numeric = (bump(eps) - bump(-eps)) / (2.0 * eps);
            assert!(relative_error(g.grad_b[j], numeric) < 1e-5, "b[{j}]");
        }
    }

    #[test]
    fn early_stop_rule() {
        assert!(!early_stop_check(&[5.0, 4.0, 3.0, 2.0, 1.0], 1));
        // best three entries back is not more than a patience of three
        assert!(!early_stop_check(&[1.0, 2.0, 2.0, 2.0], 3));
        assert!(early_stop_check(&[1.0, 2.0, 2.0, 2.0, 2.0], 3));
        assert!(!early_stop_check(&[3.0, 2.0, 2.5, 1.9, 2.2, 2.2], 2));
        assert!(early_stop_check(&[3.0, 2.0, 2.5, 1.9, 2.2, 2.2, 2.3], 2));
        // ties do not count as improvement
        assert!(early_stop_check(&[1.0, 1.0, 1.0], 1));
        assert!(!early_stop_check(&[], 1));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { epochs_max: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: Some(0), ..TrainConfig::default() },
            TrainConfig { patience: 0, ..TrainConfig::default() },
            TrainConfig { nu: 1.0, ..TrainConfig::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        assert_eq!("bp".parse::<Regime>().unwrap(), Regime::Backprop);
        assert!("xx".parse::<Regime>().is_err());
    }

    #[test]
    fn regime_mismatch_rejected() {
        let net = init_network(&[3, 2], 1).unwrap();
        let x = blob(1, 10, 3);
        let spec = LossSpec::new(LossKind::HbSvdd);
        assert!(train_ff(net.clone(), TrainData::train_only(&x), &spec, &cfg(Regime::Backprop)).is_err());
        assert!(train_bp(net, TrainData::train_only(&x), &spec, &cfg(Regime::ForwardForward)).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        // the config forbids λ = 0, so drive the step functions directly
        let spec = LossSpec::new(LossKind::Goodness);
        let x = blob(2, 12, 4);
        let init = init_network(&[4, 5, 3], 4).unwrap();
        let mut ff = init.clone();
        let mut bp = init.clone();
        for _ in 0..3 {
            ff_step(&mut ff, &x, &spec, 0.0, FfFeed::PostUpdate).unwrap();
            bp_step(&mut bp, &x, &spec, 0.0, BpLoss::FinalLayer).unwrap();
        }
        assert_eq!(ff, init);
        assert_eq!(bp, init);
    }

    #[test]
    fn single_layer_regimes_agree_bitwise() {
        let x = blob(7, 30, 4);
        let v = blob(8, 10, 4);
        for (k, kind) in LossKind::ALL.into_iter().enumerate() {
            let spec = LossSpec::new(kind);
            let net = init_network(&[4, 6], 100 + k as u64).unwrap();
            let mut c = cfg(Regime::ForwardForward);
            c.batch_size = Some(7);
            c.learning_rate = 0.05;
            let (ff, ffr) = train_ff(net.clone(), TrainData::new(&x, &v), &spec, &c).unwrap();
            c.regime = Regime::Backprop;
            let (bp, bpr) = train_bp(net, TrainData::new(&x, &v), &spec, &c).unwrap();
            assert_eq!(ff.network, bp.network, "{kind}");
            assert_eq!(ffr.train_loss_curve, bpr.train_loss_curve);
        }
    }

    #[test]
    fn ff_feeds_post_update_output() {
        let spec = LossSpec::new(LossKind::HbSvdd);
        let x = blob(3, 16, 4);
        let init = init_network(&[4, 5, 3], 9).unwrap();
        let mut net = init.clone();
        let trace = ff_step(&mut net, &x, &spec, 0.1, FfFeed::PostUpdate).unwrap();
        assert_eq!(trace.inputs[0], x);
        assert_eq!(trace.inputs[1], layer_forward(&net.layers[0], &x).unwrap());
        assert_ne!(trace.inputs[1], layer_forward(&init.layers[0], &x).unwrap());

        let mut net = init.clone();
        let trace = ff_step(&mut net, &x, &spec, 0.1, FfFeed::PreUpdate).unwrap();
        assert_eq!(trace.inputs[1], layer_forward(&init.layers[0], &x).unwrap());
    }

    #[test]
    fn ff_first_layer_ignores_later_layers() {
        let spec = LossSpec::new(LossKind::LsSvdd);
        let x = blob(3, 20, 4);
        let a = init_network(&[4, 5, 3], 1).unwrap();
        let mut b = a.clone();
        b.layers[1] = init_network(&[5, 3], 99).unwrap().layers.remove(0);
        let mut c = TrainConfig {
            epochs_max: 1,
            batch_size: Some(6),
            ..TrainConfig::default()
        };
        c.learning_rate = 0.05;
        let (ma, _) = train_ff(a, TrainData::train_only(&x), &spec, &c).unwrap();
        let (mb, _) = train_ff(b, TrainData::train_only(&x), &spec, &c).unwrap();
        assert_eq!(ma.network.layers[0], mb.network.layers[0]);
        assert_ne!(ma.network.layers[1], mb.network.layers[1]);
    }

    #[test]
    fn training_is_deterministic_and_calibrated() {
        let x = blob(1, 40, 4);
        let v = blob(2, 15, 4);
        for regime in Regime::ALL {
            let spec = LossSpec::new(LossKind::GoodnessAdjusted);
            let net = init_network(&[4, 8, 8], 5).unwrap();
            let a = train(net.clone(), TrainData::new(&x, &v), &spec, &cfg(regime)).unwrap();
            let b = train(net, TrainData::new(&x, &v), &spec, &cfg(regime)).unwrap();
            assert_eq!(a, b);
            let (model, report) = a;
            assert_eq!(report.train_loss_curve.len(), report.epochs_run);
            assert_eq!(report.valid_loss_curve.len(), report.epochs_run);
            assert_eq!(model.layer_states.len(), 2);
            assert!(model.calibration.is_some());
        }
    }

    #[test]
    fn flat_validation_stops_early() {
        // all-dead network: every loss is constant, so the first epoch stays best
        let mut net = init_network(&[4, 3], 1).unwrap();
        net.layers[0].b = Vector::new(vec![-100.0; 3]);
        let x = blob(1, 20, 4);
        let v = blob(2, 10, 4);
        let c = TrainConfig {
            regime: Regime::Backprop,
            epochs_max: 50,
            patience: 3,
            ..TrainConfig::default()
        };
        let (_, report) = train_bp(net, TrainData::new(&x, &v), &LossSpec::new(LossKind::Goodness), &c).unwrap();
        assert!(report.stopped_early);
        assert_eq!(report.epochs_run, 5);
        assert!(report.epochs_run < c.epochs_max);
    }

    #[test]
    fn divergence_names_epoch_and_layer() {
        let net = init_network(&[4, 6, 6], 2).unwrap();
        let x = blob(1, 20, 4).scale(1e3);
        let c = TrainConfig {
            regime: Regime::Backprop,
            learning_rate: 1e6,
            epochs_max: 50,
            ..TrainConfig::default()
        };
        let err = train_bp(net, TrainData::train_only(&x), &LossSpec::new(LossKind::LsSvdd), &c).unwrap_err();
        match err {
            Error::NonFinite { epoch, .. } => assert!(epoch >= 1),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn report_csv_has_one_line_per_epoch() {
        let x = blob(1, 20, 4);
        let v = blob(2, 10, 4);
        let (_, report) = train(
            init_network(&[4, 3], 1).unwrap(),
            TrainData::new(&x, &v),
            &LossSpec::new(LossKind::HbSvdd),
            &cfg(Regime::ForwardForward),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.csv");
        report.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().next(), Some("epoch,train_loss,valid_loss"));
        assert_eq!(text.lines().count(), report.epochs_run + 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn sum_layers_reduces_to_final_for_one_layer(seed in any::<u64>(), k in 0usize..5) {
            let spec = LossSpec::new(LossKind::ALL[k]);
            let net = init_network(&[3, 4], seed).unwrap();
            let x = blob(seed ^ 1, 9, 3);
            let mut a = net.clone();
            let mut b = net;
            bp_step(&mut a, &x, &spec, 0.02, BpLoss::FinalLayer).unwrap();
            bp_step(&mut b, &x, &spec, 0.02, BpLoss::SumLayers).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn one_layer_step_equivalence(seed in any::<u64>(), k in 0usize..5, n in 2usize..20) {
            let spec = LossSpec::new(LossKind::ALL[k]);
            let net = init_network(&[4, 5], seed).unwrap();
            let x = blob(seed.wrapping_mul(3), n, 4);
            let mut a = net.clone();
            let mut b = net;
            let fl = ff_step(&mut a, &x, &spec, 0.03, FfFeed::PostUpdate).unwrap();
            let bl = bp_step(&mut b, &x, &spec, 0.03, BpLoss::FinalLayer).unwrap();
            prop_assert_eq!(fl.layer_losses[0].to_bits(), bl.to_bits());
            prop_assert_eq!(a, b);
        }
    }
}
