//! Patch-level spectral descriptors and the gate they drive.
//!
//! Each patch is transformed with a radix-2 real FFT, its power spectrum is
//! summed into `k_freq` equal-width bands up to Nyquist, and the band
//! shares feed a bottleneck MLP whose sigmoid output scales the normalized
//! patch embedding. Descriptors are computed from data values only and are
//! recorded on the tape as constants.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Band-energy shares of one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralDescriptor(pub Vec<f64>);

impl SpectralDescriptor {
    pub fn shares(&self) -> &[f64] {
        &self.0
    }
}

/// Angle `-2πk/n` as `(cos, sin)`, exact on quarter turns.
fn twiddle(k: usize, n: usize) -> (f64, f64) {
    if (4 * k).is_multiple_of(n) {
        return match (4 * k / n) % 4 {
            0 => (1.0, 0.0),
            1 => (0.0, -1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, 1.0),
        };
    }
    let theta = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
    (theta.cos(), theta.sin())
}

/// In-place iterative radix-2 decimation-in-time FFT.
fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let (wr, wi) = twiddle(k, len);
                let (p, q) = (start + k, start + k + half);
                let tr = wr * re[q] - wi * im[q];
                let ti = wr * im[q] + wi * re[q];
                re[q] = re[p] - tr;
                im[q] = im[p] - ti;
                re[p] += tr;
                im[p] += ti;
            }
        }
        len *= 2;
    }
}

/// One-sided power spectrum `|X_k|²` for `k = 0..=P/2`.
pub fn rfft_power(patch: &[f64]) -> Result<Vec<f64>> {
    let n = patch.len();
    if n < 2 || !n.is_power_of_two() {
        return Err(Error::invalid(
            "rfft_power",
            format!("patch length {n} is not a power of two >= 2"),
        ));
    }
    let mut re = patch.to_vec();
    let mut im = vec![0.0; n];
    fft_in_place(&mut re, &mut im);
    Ok((0..=n / 2).map(|k| re[k] * re[k] + im[k] * im[k]).collect())
}

/// Zero-based band of bin `k` when `nyquist` is the Nyquist bin index:
/// bin 0 joins the lowest band, others go to `ceil(k_freq·k/nyquist)`.
pub fn band_of(k: usize, nyquist: usize, k_freq: usize) -> usize {
    if k == 0 || nyquist == 0 {
        return 0;
    }
    let b = (k_freq * k).div_ceil(nyquist);
    b.clamp(1, k_freq) - 1
}

/// Sums the one-sided power spectrum into `k_freq` bands and returns each
/// band's share of the total. A silent patch maps to the uniform vector.
pub fn band_aggregate(power: &[f64], k_freq: usize) -> Result<SpectralDescriptor> {
    if k_freq < 1 {
        return Err(Error::invalid("band_aggregate", "k_freq must be at least 1"));
    }
    if power.is_empty() {
        return Err(Error::invalid("band_aggregate", "empty spectrum"));
    }
    if let Some(p) = power.iter().find(|p| p.is_nan() || **p < 0.0) {
        return Err(Error::invalid("band_aggregate", format!("negative power {p}")));
    }
    let nyquist = power.len() - 1;
    let mut bands = vec![0.0; k_freq];
    for (k, p) in power.iter().enumerate() {
        bands[band_of(k, nyquist, k_freq)] += p;
    }
    let total: f64 = bands.iter().sum();
    if total == 0.0 {
        return Ok(SpectralDescriptor(vec![1.0 / k_freq as f64; k_freq]));
    }
    bands.iter_mut().for_each(|b| *b /= total);
    Ok(SpectralDescriptor(bands))
}

pub fn descriptor(patch: &[f64], k_freq: usize) -> Result<SpectralDescriptor> {
    band_aggregate(&rfft_power(patch)?, k_freq)
}

/// Descriptors for every row of a `[rows, P]` patch matrix -> `[rows, k_freq]`.
pub fn descriptors(patches: &Tensor, k_freq: usize) -> Result<Tensor> {
    let p = *patches
        .shape()
        .last()
        .ok_or_else(|| Error::invalid("descriptors", "rank 0 input"))?;
    let rows = patches.numel() / p.max(1);
    let mut out = Vec::with_capacity(rows * k_freq);
    for r in 0..rows {
        out.extend(descriptor(&patches.data()[r * p..(r + 1) * p], k_freq)?.0);
    }
    Tensor::new(vec![rows, k_freq], out)
}

/// Bottleneck MLP weights: `k_freq -> hidden -> d_model`.
#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Hidden width of the gate MLP (reduction ratio 4).
pub fn gate_hidden(d_model: usize) -> usize {
    (d_model / 4).max(1)
}

/// `G = sigmoid(W2 · relu(W1 · v + b1) + b2)` per row of `v_spec`.
pub fn gate_mlp(tape: &mut Tape, v_spec: Var, p: &GateParams) -> Result<Var> {
    let h = tape.linear(v_spec, p.w1, Some(p.b1))?;
    let h = tape.relu(h);
    let z = tape.linear(h, p.w2, Some(p.b2))?;
    Ok(tape.sigmoid(z))
}

/// `LayerNorm(z_in) ⊙ G`, or `z_in ⊙ G` when `norm` is `None`.
pub fn apply_gate(tape: &mut Tape, z_in: Var, gate: Var, norm: Option<(Var, Var)>) -> Result<Var> {
    if tape.shape(z_in) != tape.shape(gate) {
        return Err(Error::shape("apply_gate", tape.shape(z_in), tape.shape(gate)));
    }
    let z = match norm {
        Some((g, b)) => tape.layernorm(z_in, Some(g), Some(b))?,
        None => z_in,
    };
    tape.mul(z, gate)
}
