//! Training loop and forecast metrics: Adam with bias correction, MAE
//! loss over shuffled mini-batches, best-validation snapshotting, and
//! the standard accuracy metrics on the denormalized scale.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{Normalizer, TargetMode, WindowSample};
use crate::model::{mae_loss, LightCtsModel, ModelError};
use crate::tensor::{Gradients, Tape, Tensor, TensorError, Var};
use crate::ConfigError;

/// Entries with |truth| at or below this are left out of MAPE.
pub const MAPE_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{which} window set is empty")]
    EmptyWindows { which: &'static str },
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error("validation loss became non-finite at epoch {epoch}")]
    NanValidation { epoch: usize },
    #[error("optimizer state holds {state} tensors, update got {got}")]
    StateMismatch { state: usize, got: usize },
    #[error("parameter {index} has shape {param:?}, gradient has {grad:?}")]
    GradShapeMismatch {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global L2-norm ceiling for each batch gradient.
    pub grad_clip: Option<f64>,
    /// Stop after this many epochs without a new best validation MAE.
    pub patience: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(ConfigError(format!(
                "learning rate {} must be finite and >= 0",
                self.lr
            )));
        }
        if self.epochs == 0 {
            return Err(ConfigError("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ConfigError("batch_size must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(ConfigError(format!(
                    "grad_clip {c} must be finite and > 0"
                )));
            }
        }
        if self.patience == Some(0) {
            return Err(ConfigError("patience must be >= 1 when set".into()));
        }
        Ok(())
    }
}

/// Adam moment buffers, one pair per parameter tensor in registration
/// order.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shapes: &[Vec<usize>]) -> AdamState {
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_model(model: &LightCtsModel) -> AdamState {
        let mut shapes = Vec::new();
        model.visit_params(&mut |t| shapes.push(t.shape().to_vec()));
        AdamState::new(&shapes)
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    fn update_tensor(&mut self, index: usize, param: &mut Tensor, grad: &Tensor, lr: f64) {
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let m = self.m[index].data_mut();
        let v = self.v[index].data_mut();
        for (i, p) in param.data_mut().iter_mut().enumerate() {
            let g = grad.data()[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// One Adam update over aligned parameter and gradient slices.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(TrainError::StateMismatch {
            state: state.m.len(),
            got: params.len().max(grads.len()),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(TrainError::GradShapeMismatch {
                index: i,
                param: p.shape().to_vec(),
                grad: g.shape().to_vec(),
            });
        }
    }
    state.t += 1;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        state.update_tensor(i, p, g, lr);
    }
    Ok(())
}

/// Scales all gradients by `clip / norm` when their global L2 norm
/// exceeds `clip`.
pub fn clip_global_norm(grads: &mut [Tensor], clip: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for &x in g.data() {
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > clip {
        let s = clip / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

// Pulls gradient tensors out of a backward pass in registration order;
// parameters a loss did not touch fall back to zero.
fn collect_grads(tape: &Tape, grads: &Gradients, vars: &[Var]) -> Vec<Tensor> {
    vars.iter()
        .map(|&v| match grads.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape()),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameter snapshot with the lowest validation MAE.
    pub model: LightCtsModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

/// Mean window MAE under the current parameters, forward passes only.
pub fn mean_window_mae(
    model: &LightCtsModel,
    windows: &[WindowSample],
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for w in windows {
        let mut tape = Tape::new();
        let x = tape.leaf(w.history.clone(), false);
        let t = tape.leaf(w.target.clone(), false);
        let bound = model.bind(&mut tape, false);
        let pred = model.forward(&mut tape, &bound, x)?;
        let loss = mae_loss(&mut tape, pred, t)?;
        total += tape.value(loss).item();
    }
    Ok(total / windows.len() as f64)
}

/// Runs the optimization loop: shuffled mini-batches each epoch, MAE
/// loss averaged over the batch, one Adam step per batch, and the
/// best-validation parameter snapshot kept aside. Deterministic for a
/// fixed seed.
pub fn train(
    mut model: LightCtsModel,
    train_windows: &[WindowSample],
    val_windows: &[WindowSample],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_windows.is_empty() {
        return Err(TrainError::EmptyWindows { which: "train" });
    }
    if val_windows.is_empty() {
        return Err(TrainError::EmptyWindows { which: "validation" });
    }

    let mut adam = AdamState::for_model(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, LightCtsModel, usize)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let vars = bound.vars();
            let mut acc: Option<Var> = None;
            for &wi in chunk {
                let w = &train_windows[wi];
                let x = tape.leaf(w.history.clone(), false);
                let t = tape.leaf(w.target.clone(), false);
                let pred = model.forward(&mut tape, &bound, x)?;
                let loss = mae_loss(&mut tape, pred, t)?;
                acc = Some(match acc {
                    None => loss,
                    Some(a) => tape.add(a, loss)?,
                });
            }
            let batch_loss = tape.scale(acc.expect("chunks are nonempty"), 1.0 / chunk.len() as f64)?;
            let loss_val = tape.value(batch_loss).item();
            if !loss_val.is_finite() {
                return Err(TrainError::NanLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            loss_sum += loss_val;
            n_batches += 1;

            let grads = tape.backward(batch_loss)?;
            let mut grad_tensors = collect_grads(&tape, &grads, &vars);
            if let Some(clip) = config.grad_clip {
                clip_global_norm(&mut grad_tensors, clip);
            }
            adam.t += 1;
            let mut index = 0;
            model.visit_params_mut(&mut |p| {
                adam.update_tensor(index, p, &grad_tensors[index], config.lr);
                index += 1;
            });
        }
        let train_mae = loss_sum / n_batches as f64;
        let val_mae = mean_window_mae(&model, val_windows)?;
        if !val_mae.is_finite() {
            return Err(TrainError::NanValidation { epoch });
        }
        history.push(EpochStats {
            epoch,
            train_mae,
            val_mae,
        });
        let improved = best.as_ref().map_or(true, |(b, _, _)| val_mae < *b);
        if improved {
            best = Some((val_mae, model.clone(), epoch));
        }
        if let Some(patience) = config.patience {
            let best_epoch = best.as_ref().map(|(_, _, e)| *e).unwrap_or(epoch);
            if epoch - best_epoch >= patience {
                break;
            }
        }
    }

    let (best_val_mae, best_model, best_epoch) = best.expect("epochs >= 1");
    Ok(TrainOutcome {
        model: best_model,
        history,
        best_epoch,
        best_val_mae,
    })
}

// ── metrics ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonMetrics {
    /// 1-based forecast step this row describes.
    pub horizon: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    /// Multi-step only; excludes entries with |truth| <= MAPE_FLOOR.
    pub mape: Option<f64>,
    /// Single-step only: sqrt(sum e^2 / sum (truth - mean)^2).
    pub rrse: Option<f64>,
    /// Single-step only: mean per-column Pearson correlation.
    pub corr: Option<f64>,
    /// Multi-step only: one row per forecast step (matrix column).
    pub per_horizon: Option<Vec<HorizonMetrics>>,
}

fn mae_rmse_mape(pred: &[f64], truth: &[f64]) -> (f64, f64, f64) {
    let n = pred.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut ape_sum = 0.0;
    let mut ape_n = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        let e = p - t;
        abs_sum += e.abs();
        sq_sum += e * e;
        if t.abs() > MAPE_FLOOR {
            ape_sum += (e / t).abs();
            ape_n += 1;
        }
    }
    let mape = if ape_n == 0 { 0.0 } else { ape_sum / ape_n as f64 };
    (abs_sum / n, (sq_sum / n).sqrt(), mape)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        // A flat sequence carries no correlation signal; count it as 0
        // rather than poisoning the mean with NaN.
        0.0
    } else {
        cov / (va.sqrt() * vb.sqrt())
    }
}

/// Scores a stacked forecast matrix against the truth on the
/// denormalized scale. Multi-step matrices are `[rows, horizons]` and
/// get MAE/RMSE/MAPE plus a per-horizon breakdown; single-step matrices
/// are `[steps, series]` and get MAE/RMSE plus RRSE and CORR.
pub fn evaluate(
    pred: &Tensor,
    truth: &Tensor,
    mode: TargetMode,
) -> Result<MetricReport, TrainError> {
    if pred.shape() != truth.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "evaluate",
            lhs: pred.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        }
        .into());
    }
    if pred.rank() != 2 || pred.numel() == 0 {
        return Err(TensorError::Invalid {
            op: "evaluate",
            msg: format!("expected a nonempty 2-D matrix, got {:?}", pred.shape()),
        }
        .into());
    }
    let (rows, cols) = (pred.shape()[0], pred.shape()[1]);
    let (mae, rmse, mape) = mae_rmse_mape(pred.data(), truth.data());

    let report = match mode {
        TargetMode::MultiStep => {
            let mut per_horizon = Vec::with_capacity(cols);
            for h in 0..cols {
                let p: Vec<f64> = (0..rows).map(|r| pred.at(&[r, h])).collect();
                let t: Vec<f64> = (0..rows).map(|r| truth.at(&[r, h])).collect();
                let (mae, rmse, mape) = mae_rmse_mape(&p, &t);
                per_horizon.push(HorizonMetrics {
                    horizon: h + 1,
                    mae,
                    rmse,
                    mape,
                });
            }
            MetricReport {
                mae,
                rmse,
                mape: Some(mape),
                rrse: None,
                corr: None,
                per_horizon: Some(per_horizon),
            }
        }
        TargetMode::SingleStep => {
            let t_mean = truth.data().iter().sum::<f64>() / truth.numel() as f64;
            let denom: f64 = truth.data().iter().map(|&t| (t - t_mean) * (t - t_mean)).sum();
            if denom == 0.0 {
                return Err(TrainError::UndefinedMetric(
                    "truth is constant everywhere, so RRSE and CORR have zero denominators"
                        .into(),
                ));
            }
            let sq_err: f64 = pred
                .data()
                .iter()
                .zip(truth.data())
                .map(|(&p, &t)| (p - t) * (p - t))
                .sum();
            let rrse = (sq_err / denom).sqrt();
            let mut corr_sum = 0.0;
            for c in 0..cols {
                let p: Vec<f64> = (0..rows).map(|r| pred.at(&[r, c])).collect();
                let t: Vec<f64> = (0..rows).map(|r| truth.at(&[r, c])).collect();
                corr_sum += pearson(&p, &t);
            }
            MetricReport {
                mae,
                rmse,
                mape: None,
                rrse: Some(rrse),
                corr: Some(corr_sum / cols as f64),
                per_horizon: None,
            }
        }
    };
    Ok(report)
}

/// Runs the model over a window set and stacks denormalized forecasts
/// and truths into the matrix layout `evaluate` expects: multi-step
/// rows are (window, series) pairs over horizon columns; single-step
/// rows are windows over series columns.
pub fn forecast_matrix(
    model: &LightCtsModel,
    windows: &[WindowSample],
    normalizer: &Normalizer,
) -> Result<(Tensor, Tensor), TrainError> {
    if windows.is_empty() {
        return Err(TrainError::EmptyWindows { which: "evaluation" });
    }
    let n = model.config().n_nodes;
    let mode = model.config().mode;
    let l = model.config().out_len();
    let (rows, cols) = match mode {
        TargetMode::MultiStep => (windows.len() * n, l),
        TargetMode::SingleStep => (windows.len(), n),
    };
    let mut pred = Tensor::zeros(&[rows, cols]);
    let mut truth = Tensor::zeros(&[rows, cols]);
    for (s, w) in windows.iter().enumerate() {
        let mut tape = Tape::new();
        let x = tape.leaf(w.history.clone(), false);
        let bound = model.bind(&mut tape, false);
        let y = model.forward(&mut tape, &bound, x)?;
        let y = tape.value(y);
        for i in 0..n {
            for j in 0..l {
                let p = normalizer.denormalize_value(0, y.at(&[i, j]));
                let t = normalizer.denormalize_value(0, w.target.at(&[i, j]));
                let (r, c) = match mode {
                    TargetMode::MultiStep => (s * n + i, j),
                    TargetMode::SingleStep => (s, i),
                };
                let off = pred.offset(&[r, c]);
                pred.data_mut()[off] = p;
                truth.data_mut()[off] = t;
            }
        }
    }
    Ok((pred, truth))
}
