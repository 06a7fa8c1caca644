//! Shared oracles for the integration tests.
#![allow(dead_code)]

use asgmamba::tape::{Tape, Var};
use asgmamba::{ModelConfig, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

/// The small configuration used for end-to-end gradient checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        lookback: 32,
        horizon: 8,
        variates: 2,
        d_model: 8,
        patch_sizes: vec![8, 16],
        d_state: 4,
        ..ModelConfig::default()
    }
}

/// `|a − n| / max(|a|, |n|, floor)`, maximized over elements.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Analytic gradients of `f` with respect to every input, from one
/// backward pass.
pub fn analytic_grads<F>(inputs: &[Tensor], f: &F) -> Vec<Tensor>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect()
}

fn eval_scalar<F>(inputs: &[Tensor], f: &F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = f(&mut tape, &vars).unwrap();
    tape.value(loss).data()[0]
}

/// Central finite differences `(f(x + h) − f(x − h)) / 2h` per element.
pub fn numeric_grads<F>(inputs: &[Tensor], f: &F, h: f64) -> Vec<Tensor>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].shape().to_vec());
        for i in 0..inputs[k].numel() {
            let x0 = work[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let up = eval_scalar(&work, f);
            work[k].data_mut()[i] = x0 - h;
            let down = eval_scalar(&work, f);
            work[k].data_mut()[i] = x0;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Worst relative disagreement between analytic and central-difference
/// gradients over all inputs.
pub fn grad_check<F>(inputs: &[Tensor], f: F, h: f64, floor: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let a = analytic_grads(inputs, &f);
    let n = numeric_grads(inputs, &f, h);
    a.iter()
        .zip(&n)
        .map(|(a, n)| max_rel_err(a.data(), n.data(), floor))
        .fold(0.0, f64::max)
}

/// Reduces any tensor to a scalar with fixed random weights so every
/// output element contributes a distinct gradient.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut r = rng(seed);
    let w = tape.constant(rand_tensor(&mut r, &shape, 1.0));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// One-sided power spectrum by the O(P²) DFT definition.
pub fn dft_power(x: &[f64]) -> Vec<f64> {
    let p = x.len();
    (0..=p / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in x.iter().enumerate() {
                let th = -2.0 * std::f64::consts::PI * (k * t) as f64 / p as f64;
                re += v * th.cos();
                im += v * th.sin();
            }
            re * re + im * im
        })
        .collect()
}

/// Band shares: bin `k` belongs to the first band `b` (1-based) whose upper
/// edge `b·nyq/K` is at least `k`.
pub fn band_oracle(x: &[f64], k_freq: usize) -> Vec<f64> {
    let power = dft_power(x);
    let nyq = (power.len() - 1) as f64;
    let mut bands = vec![0.0; k_freq];
    for (k, p) in power.iter().enumerate() {
        let b = (1..=k_freq)
            .find(|&b| k as f64 <= b as f64 * nyq / k_freq as f64 + 1e-12)
            .unwrap();
        bands[b - 1] += p;
    }
    let total: f64 = bands.iter().sum();
    if total == 0.0 {
        return vec![1.0 / k_freq as f64; k_freq];
    }
    bands.iter().map(|b| b / total).collect()
}

/// O(steps²) unroll of `y_t = Σ_{s≤t} C_t · (Π_{s<r≤t} Ā_r) B̄x_s + D x_t` for
/// one sequence. Shapes: `abar`, `bx` `[steps, di, ds]`; `c` `[steps, ds]`.
pub fn unroll_scan(abar: &Tensor, bx: &Tensor, c: &Tensor, d: &[f64], x: &Tensor) -> Vec<f64> {
    let (steps, di, ds) = (abar.shape()[0], abar.shape()[1], abar.shape()[2]);
    let mut y = vec![0.0; steps * di];
    for t in 0..steps {
        for i in 0..di {
            let mut acc = d[i] * x.at(&[t, i]);
            for j in 0..ds {
                for s in 0..=t {
                    let mut prod = 1.0;
                    for r in s + 1..=t {
                        prod *= abar.at(&[r, i, j]);
                    }
                    acc += c.at(&[t, j]) * prod * bx.at(&[s, i, j]);
                }
            }
            y[t * di + i] = acc;
        }
    }
    y
}
