//! Adam, the MSE training loop with early stopping, and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::ModelConfig;
use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::model::{AsgMamba, ForwardOptions};
use crate::params::{Bound, Params};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            decoupled: true,
        }
    }
}

impl AdamConfig {
    pub fn from_model_config(c: &ModelConfig) -> Self {
        AdamConfig {
            lr: c.train.lr,
            weight_decay: c.train.weight_decay,
            decoupled: c.train.decoupled_weight_decay,
            ..Default::default()
        }
    }
}

/// First and second moments per parameter, in parameter order.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

/// One Adam update. With decoupled decay
/// `θ ← θ − lr·m̂/(√v̂ + eps) − lr·wd·θ`; otherwise `wd·θ` is added to the
/// gradient before the moments.
pub fn adam_step(
    params: &mut Params,
    grads: &[(String, Tensor)],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::invalid(
            "adam_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    for (name, g) in grads {
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient {} at {name}[{i}]",
                g.data()[i]
            )));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, ((name, theta), (gname, g))) in params.iter_mut().zip(grads).enumerate() {
        if name != gname || theta.shape() != g.shape() {
            return Err(Error::invalid(
                "adam_step",
                format!("gradient {gname} {:?} does not match {name} {:?}", g.shape(), theta.shape()),
            ));
        }
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, th) in theta.data_mut().iter_mut().enumerate() {
            let mut gi = g.data()[i];
            if !cfg.decoupled {
                gi += cfg.weight_decay * *th;
            }
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            let decay = if cfg.decoupled { cfg.lr * cfg.weight_decay * *th } else { 0.0 };
            *th -= cfg.lr * mh / (vh.sqrt() + cfg.eps) + decay;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the validation loss has failed to improve for `patience`
/// consecutive epochs.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    stale: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
            epoch: 0,
        }
    }

    pub fn update(&mut self, val_loss: f64) -> StopDecision {
        let epoch = self.epoch;
        self.epoch += 1;
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub seed: u64,
    pub epochs: Vec<EpochLoss>,
    /// Mean loss of each optimizer step.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
    /// Largest `|Σ softmax(w_scale) − 1|` seen after any step.
    pub max_fusion_error: f64,
}

/// `mean((pred − target)²)` on the tape.
fn mse_loss(tape: &mut Tape, pred: crate::tape::Var, target: &Tensor) -> Result<crate::tape::Var> {
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step(
    model: &mut AsgMamba,
    x: &Tensor,
    y: &Tensor,
    state: &mut AdamState,
    adam: &AdamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &model.params, true);
    let f = model.forward(&mut tape, &bound, x, &ForwardOptions::train(), rng)?;
    let loss = mse_loss(&mut tape, f.output, y)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numerical(format!(
            "training loss became {value} at step {}",
            state.step + 1
        )));
    }
    tape.backward(loss)?;
    let grads = bound.grads(&tape);
    drop(tape);
    adam_step(&mut model.params, &grads, state, adam)?;
    Ok(value)
}

/// Trains with shuffled mini-batches (last partial batch kept), keeping
/// the parameters of the best validation epoch.
pub fn train(model: &mut AsgMamba, train: &WindowedDataset, val: &WindowedDataset, seed: u64) -> Result<TrainRun> {
    if train.is_empty() {
        return Err(Error::Data("training split has no windows".into()));
    }
    let cfg = model.config.train.clone();
    let adam = AdamConfig::from_model_config(&model.config);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut state = AdamState::default();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.params.clone();
    let mut run = TrainRun {
        seed,
        epochs: Vec::new(),
        step_losses: Vec::new(),
        best_epoch: 0,
        best_val: f64::INFINITY,
        stopped_early: false,
        max_fusion_error: 0.0,
    };
    if val.is_empty() {
        log::warn!("validation split has no windows; early stopping uses the training loss");
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk);
            let loss = train_step(model, &x, &y, &mut state, &adam, &mut dropout_rng)?;
            total += loss * chunk.len() as f64;
            run.step_losses.push(loss);
            let sum: f64 = model.fusion_weights().iter().sum();
            run.max_fusion_error = run.max_fusion_error.max((sum - 1.0).abs());
        }
        let train_loss = total / train.len() as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            evaluate(model, val)?.mse
        };
        log::info!("epoch {}: train {train_loss:.6} val {val_loss:.6}", epoch + 1);
        run.epochs.push(EpochLoss {
            epoch: epoch + 1,
            train_loss,
            val_loss,
        });
        match stopper.update(val_loss) {
            StopDecision::Improved => {
                best = model.params.clone();
                run.best_epoch = epoch + 1;
                run.best_val = val_loss;
            }
            StopDecision::Continue => {}
            StopDecision::Stop => {
                run.stopped_early = true;
                break;
            }
        }
    }
    model.params = best;
    Ok(run)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub horizon_mse: Vec<f64>,
    pub horizon_mae: Vec<f64>,
    /// `(mse, mae)` after undoing the dataset standardization.
    pub raw: Option<(f64, f64)>,
    pub windows: usize,
}

pub fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len().max(1) as f64
}

pub fn mae(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len().max(1) as f64
}

/// Windows per evaluation batch.
pub const EVAL_BATCH: usize = 64;

/// Thread count from `ASGM_THREADS`, defaulting to one.
pub fn thread_count() -> usize {
    std::env::var("ASGM_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

#[derive(Default)]
struct Sums {
    se: Vec<f64>,
    ae: Vec<f64>,
    raw_se: f64,
    raw_ae: f64,
}

/// Scores `predict` over every window of `ds` on the standardized scale.
/// Batches may run on up to `ASGM_THREADS` threads; partial sums are
/// combined in batch order so the result does not depend on the count.
pub fn evaluate_with<F>(ds: &WindowedDataset, predict: F) -> Result<Metrics>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    if ds.is_empty() {
        return Err(Error::Data(format!("{} split has no windows", ds.split.name())));
    }
    let (t, m) = (ds.horizon, ds.variates());
    let idx: Vec<usize> = (0..ds.len()).collect();
    let batches: Vec<&[usize]> = idx.chunks(EVAL_BATCH).collect();
    let run = |chunk: &&[usize]| -> Result<Sums> {
        let (x, y) = ds.batch(chunk);
        let p = predict(&x)?;
        if p.shape() != y.shape() {
            return Err(Error::shape("evaluate", p.shape(), y.shape()));
        }
        let mut s = Sums {
            se: vec![0.0; t],
            ae: vec![0.0; t],
            ..Default::default()
        };
        let mut p_raw = p.data().to_vec();
        let mut y_raw = y.data().to_vec();
        ds.scaler.inverse(&mut p_raw);
        ds.scaler.inverse(&mut y_raw);
        for (i, (pv, yv)) in p.data().iter().zip(y.data()).enumerate() {
            let h = (i / m) % t;
            s.se[h] += (pv - yv).powi(2);
            s.ae[h] += (pv - yv).abs();
            s.raw_se += (p_raw[i] - y_raw[i]).powi(2);
            s.raw_ae += (p_raw[i] - y_raw[i]).abs();
        }
        Ok(s)
    };
    let threads = thread_count();
    let parts: Vec<Result<Sums>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::invalid("evaluate", e.to_string()))?;
        pool.install(|| batches.par_iter().map(run).collect())
    } else {
        batches.iter().map(run).collect()
    };
    let mut total = Sums {
        se: vec![0.0; t],
        ae: vec![0.0; t],
        ..Default::default()
    };
    for part in parts {
        let part = part?;
        for h in 0..t {
            total.se[h] += part.se[h];
            total.ae[h] += part.ae[h];
        }
        total.raw_se += part.raw_se;
        total.raw_ae += part.raw_ae;
    }
    let per_h = (ds.len() * m) as f64;
    let n = per_h * t as f64;
    let metrics = Metrics {
        mse: total.se.iter().sum::<f64>() / n,
        mae: total.ae.iter().sum::<f64>() / n,
        horizon_mse: total.se.iter().map(|v| v / per_h).collect(),
        horizon_mae: total.ae.iter().map(|v| v / per_h).collect(),
        raw: Some((total.raw_se / n, total.raw_ae / n)),
        windows: ds.len(),
    };
    if !metrics.mse.is_finite() {
        return Err(Error::Numerical(format!("evaluation MSE is {}", metrics.mse)));
    }
    Ok(metrics)
}

pub fn evaluate(model: &AsgMamba, ds: &WindowedDataset) -> Result<Metrics> {
    evaluate_with(ds, |x| model.predict(x))
}

/// Last-value forecast for a `[B, L, M]` batch.
pub fn naive_predict(x: &Tensor, horizon: usize) -> Result<Tensor> {
    let [b, l, m] = *x.shape() else {
        return Err(Error::invalid("naive_predict", "expected [B, L, M]"));
    };
    let mut out = Vec::with_capacity(b * horizon * m);
    for bi in 0..b {
        let last = &x.data()[(bi * l + l - 1) * m..(bi * l + l) * m];
        for _ in 0..horizon {
            out.extend_from_slice(last);
        }
    }
    Tensor::new(vec![b, horizon, m], out)
}

pub fn evaluate_naive(ds: &WindowedDataset) -> Result<Metrics> {
    evaluate_with(ds, |x| naive_predict(x, ds.horizon))
}

/// Mean gate value over every patch of every branch, per variate, across
/// the first `max_windows` windows of `ds`.
pub fn gate_by_variate(model: &AsgMamba, ds: &WindowedDataset, max_windows: usize) -> Result<Vec<f64>> {
    let m = ds.variates();
    let mut sum = vec![0.0; m];
    let mut count = vec![0usize; m];
    let idx: Vec<usize> = (0..ds.len().min(max_windows)).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = ds.batch(chunk);
        let opts = ForwardOptions {
            trace: true,
            ..ForwardOptions::eval()
        };
        let (_, traces, variates) = model.predict_traced(&x, opts)?;
        for tr in &traces {
            for (row, g) in tr.mean_gate().iter().enumerate() {
                let v = variates[row / tr.count];
                sum[v] += g;
                count[v] += 1;
            }
        }
    }
    Ok(sum.iter().zip(&count).map(|(s, &c)| s / c.max(1) as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> Params {
        let mut p = Params::new();
        p.insert("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn first_step_with_unit_gradient() {
        let mut p = one_param(0.0);
        let mut s = AdamState::default();
        let g = vec![("w".to_string(), Tensor::scalar(1.0))];
        adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
        let want = -1e-3 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = one_param(2.0);
        let mut s = AdamState::default();
        let g = vec![("w".to_string(), Tensor::scalar(0.0))];
        adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
        assert!((p.get("w").unwrap().data()[0] - (2.0 - 1e-3 * 1e-5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = one_param(0.0);
        let g = vec![("w".to_string(), Tensor::scalar(f64::NAN))];
        let err = adam_step(&mut p, &g, &mut AdamState::default(), &AdamConfig::default());
        assert!(err.unwrap_err().to_string().contains("w"));
    }

    #[test]
    fn early_stopping_scripted() {
        let mut es = EarlyStopping::new(2);
        let seq = [1.0, 0.9, 0.95, 0.91, 0.8];
        let got: Vec<_> = seq.iter().map(|&v| es.update(v)).collect();
        use StopDecision::*;
        assert_eq!(got, vec![Improved, Improved, Continue, Stop, Improved]);
        assert_eq!(es.best_epoch, Some(4));
    }

    #[test]
    fn metric_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[0.0, 2.0]), 0.5);
        assert_eq!(mae(&[1.0, 2.0], &[0.0, 2.0]), 0.5);
        assert_eq!(mse(&[3.0], &[3.0]), 0.0);
    }

    #[test]
    fn naive_batch() {
        let x = Tensor::from_fn(vec![2, 3, 1], |i| i as f64);
        let y = naive_predict(&x, 2).unwrap();
        assert_eq!(y.data(), &[2.0, 2.0, 5.0, 5.0]);
    }
}
