//! Forward-pass scaling benchmark over look-back lengths.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::AsgMamba;
use crate::tensor::{memory, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub lookback: usize,
    /// Wall time of each timed repetition, milliseconds.
    pub timings_ms: Vec<f64>,
    pub median_ms: f64,
    /// Allocation high-water mark of one forward pass above the
    /// pre-forward baseline.
    pub peak_bytes: usize,
    /// `median(L) / median(previous L)`.
    pub time_ratio: Option<f64>,
    pub peak_ratio: Option<f64>,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Times eval-mode forward passes of `batch` windows for every look-back in
/// `lengths` (ascending, each at least the largest patch). One untimed
/// warm-up pass precedes the `reps` timed ones.
pub fn benchmark_scaling(
    config: &ModelConfig,
    lengths: &[usize],
    reps: usize,
    batch: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if reps == 0 || batch == 0 {
        return Err(Error::invalid("bench", "reps and batch must be positive"));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("bench", "lengths must be strictly ascending"));
    }
    let mut rows: Vec<BenchRow> = Vec::with_capacity(lengths.len());
    for &l in lengths {
        if l < config.max_patch() {
            return Err(Error::invalid(
                "bench",
                format!("look-back {l} is shorter than patch {}", config.max_patch()),
            ));
        }
        let cfg = ModelConfig {
            lookback: l,
            ..config.clone()
        };
        let model = AsgMamba::new(cfg.clone(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(vec![batch, l, cfg.variates], |_| StandardNormal.sample(&mut rng));
        model.predict(&x)?;
        let mut timings = Vec::with_capacity(reps);
        let mut peak = 0;
        for _ in 0..reps {
            let base = memory::current_bytes();
            memory::reset_peak();
            let start = Instant::now();
            let y = model.predict(&x)?;
            timings.push(start.elapsed().as_secs_f64() * 1e3);
            peak = peak.max(memory::peak_bytes().saturating_sub(base));
            drop(y);
        }
        let med = median(&timings);
        let prev = rows.last();
        rows.push(BenchRow {
            lookback: l,
            median_ms: med,
            time_ratio: prev.map(|p| med / p.median_ms),
            peak_ratio: prev.map(|p| peak as f64 / p.peak_bytes.max(1) as f64),
            timings_ms: timings,
            peak_bytes: peak,
        });
        log::info!("bench L={l}: median {med:.3} ms, peak {peak} bytes");
    }
    Ok(rows)
}
