//! Selective state-space block.
//!
//! Tokens are patches. Per token the block computes input-dependent
//! `(Δ, B, C)`, discretizes the diagonal dynamics with zero-order hold
//! (`Ā = exp(Δ·A)`, input term `Δ·B·x`), and runs the linear recurrence
//! over the token axis. Cost is linear in the token count.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{Bound, Params};
use crate::tape::{SelectiveScanInputs, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaDims {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub d_conv: usize,
}

impl MambaDims {
    pub fn new(d_model: usize, expand: usize, d_state: usize, d_conv: usize) -> Self {
        MambaDims {
            d_model,
            d_inner: expand * d_model,
            d_state,
            d_conv,
        }
    }

    /// Scalar parameter count of one block.
    pub fn param_count(&self) -> usize {
        let (d, di, ds, dc) = (self.d_model, self.d_inner, self.d_state, self.d_conv);
        2 * di * d + dc * di + di + 2 * ds * di + di * di + di + di * ds + di + d * di
    }
}

/// Tape handles of one block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct MambaParams {
    /// `[2·d_inner, d_model]`; rows `0..d_inner` feed the scan, the rest the gate.
    pub w_in: Var,
    /// `[d_conv, d_inner]`
    pub conv_w: Var,
    pub conv_b: Var,
    /// `[d_state, d_inner]`
    pub w_b: Var,
    pub w_c: Var,
    /// `[d_inner, d_inner]`, one step size per inner channel.
    pub w_dt: Var,
    pub b_dt: Var,
    /// `[d_inner, d_state]`, `A = -exp(A_log)`.
    pub a_log: Var,
    pub d_skip: Var,
    /// `[d_model, d_inner]`
    pub w_out: Var,
}

const NAMES: [&str; 10] = [
    "W_in", "conv_w", "conv_b", "W_B", "W_C", "W_dt", "b_dt", "A_log", "D_skip", "W_out",
];

impl MambaParams {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        let v = |n: &str| bound.var(&format!("{prefix}.{n}"));
        Ok(MambaParams {
            w_in: v(NAMES[0])?,
            conv_w: v(NAMES[1])?,
            conv_b: v(NAMES[2])?,
            w_b: v(NAMES[3])?,
            w_c: v(NAMES[4])?,
            w_dt: v(NAMES[5])?,
            b_dt: v(NAMES[6])?,
            a_log: v(NAMES[7])?,
            d_skip: v(NAMES[8])?,
            w_out: v(NAMES[9])?,
        })
    }
}

pub(crate) fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// `U(-1/√fan_in, 1/√fan_in)` matrix of shape `[rows, fan_in]`.
pub(crate) fn uniform_fan_in<R: Rng + ?Sized>(rng: &mut R, rows: usize, fan_in: usize) -> Tensor {
    uniform(rng, vec![rows, fan_in], 1.0 / (fan_in.max(1) as f64).sqrt())
}

/// Inserts freshly initialized block parameters under `prefix`.
///
/// `A_log[i, j] = ln(j + 1)` so `A` spans `-1 … -d_state`; the step-size
/// bias is the inverse softplus of a log-uniform draw in `[1e-3, 1e-1]`;
/// the skip starts at one.
pub fn init_mamba<R: Rng + ?Sized>(params: &mut Params, prefix: &str, dims: &MambaDims, rng: &mut R) {
    let (d, di, ds, dc) = (dims.d_model, dims.d_inner, dims.d_state, dims.d_conv);
    let p = |n: &str| format!("{prefix}.{n}");
    params.insert(p("W_in"), uniform_fan_in(rng, 2 * di, d));
    // depthwise: fan-in is the kernel width
    let conv_bound = 1.0 / (dc.max(1) as f64).sqrt();
    params.insert(p("conv_w"), uniform(rng, vec![dc, di], conv_bound));
    params.insert(p("conv_b"), uniform(rng, vec![di], conv_bound));
    params.insert(p("W_B"), uniform_fan_in(rng, ds, di));
    params.insert(p("W_C"), uniform_fan_in(rng, ds, di));
    let w_dt = uniform_fan_in(rng, di, di);
    params.insert(p("W_dt"), w_dt);
    let log_dt = Uniform::new(1e-3f64.ln(), 1e-1f64.ln()).expect("range");
    let b_dt = Tensor::from_fn(vec![di], |_| {
        let dt = log_dt.sample(rng).exp();
        // softplus⁻¹(dt)
        dt + (-(-dt).exp_m1()).ln()
    });
    params.insert(p("b_dt"), b_dt);
    params.insert(
        p("A_log"),
        Tensor::from_fn(vec![di, ds], |k| ((k % ds) as f64 + 1.0).ln()),
    );
    params.insert(p("D_skip"), Tensor::ones(vec![di]));
    params.insert(p("W_out"), uniform_fan_in(rng, d, di));
}

/// Input-dependent `(Δ, B, C)` for rows of `x: [rows, d_inner]`.
pub fn ssm_parameters(tape: &mut Tape, x: Var, p: &MambaParams) -> Result<(Var, Var, Var)> {
    let dt = tape.linear(x, p.w_dt, Some(p.b_dt))?;
    let delta = tape.softplus(dt);
    let b = tape.linear(x, p.w_b, None)?;
    let c = tape.linear(x, p.w_c, None)?;
    Ok((delta, b, c))
}

/// Zero-order-hold discretization for one sequence.
///
/// `delta`, `x`: `[steps, d_inner]`; `a`: `[d_inner, d_state]` (the
/// continuous, negative diagonal); `b`: `[steps, d_state]`. Returns `Ā` and
/// `B̄x`, each `[steps, d_inner, d_state]`.
pub fn discretize(delta: &Tensor, a: &Tensor, b: &Tensor, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let [steps, di] = *delta.shape() else {
        return Err(Error::invalid("discretize", "delta must be [steps, d_inner]"));
    };
    let [adi, ds] = *a.shape() else {
        return Err(Error::invalid("discretize", "A must be [d_inner, d_state]"));
    };
    if adi != di || b.shape() != [steps, ds] || x.shape() != delta.shape() {
        return Err(Error::shape("discretize", delta.shape(), b.shape()));
    }
    let mut abar = Vec::with_capacity(steps * di * ds);
    let mut bx = Vec::with_capacity(steps * di * ds);
    for t in 0..steps {
        for i in 0..di {
            let dt = delta.data()[t * di + i];
            let u = x.data()[t * di + i];
            for j in 0..ds {
                abar.push((dt * a.data()[i * ds + j]).exp());
                bx.push(dt * b.data()[t * ds + j] * u);
            }
        }
    }
    Ok((
        Tensor::new(vec![steps, di, ds], abar)?,
        Tensor::new(vec![steps, di, ds], bx)?,
    ))
}

/// `h_t = Ā_t h_{t-1} + B̄x_t`, `y_t = C_t · h_t + D ⊙ x_t` from `h_0 = 0`,
/// evaluated with the linear recurrence kernel.
pub fn selective_scan_values(
    abar: &Tensor,
    bx: &Tensor,
    c: &Tensor,
    d_skip: &Tensor,
    x: &Tensor,
) -> Result<Tensor> {
    let [steps, di, ds] = *abar.shape() else {
        return Err(Error::invalid("selective_scan", "Ā must be [steps, d_inner, d_state]"));
    };
    if bx.shape() != abar.shape()
        || c.shape() != [steps, ds]
        || d_skip.shape() != [di]
        || x.shape() != [steps, di]
    {
        return Err(Error::shape("selective_scan", abar.shape(), c.shape()));
    }
    let mut h = vec![0.0; abar.numel()];
    kernels::scan_forward(abar.data(), bx.data(), &vec![0.0; di * ds], di * ds, &mut h);
    let mut y = vec![0.0; steps * di];
    for t in 0..steps {
        for i in 0..di {
            let hs = &h[(t * di + i) * ds..(t * di + i + 1) * ds];
            let cs = &c.data()[t * ds..(t + 1) * ds];
            y[t * di + i] =
                hs.iter().zip(cs).map(|(p, q)| p * q).sum::<f64>() + d_skip.data()[i] * x.data()[t * di + i];
        }
    }
    Tensor::new(vec![steps, di], y)
}

/// Differentiable selective scan of one sequence built from the
/// discretization, recurrence and readout primitives. `u`, `delta`:
/// `[steps, d_inner]`; `a`: `[d_inner, d_state]`; `b`, `c`: `[steps, d_state]`.
pub fn selective_scan_composed(
    tape: &mut Tape,
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d_skip: Var,
) -> Result<Var> {
    let [steps, di] = *tape.shape(u) else {
        return Err(Error::invalid("selective_scan", "u must be [steps, d_inner]"));
    };
    let ds = tape.shape(a)[1];
    let abar = tape.ssm_decay(delta, a)?;
    let bx = tape.ssm_input(delta, b, u)?;
    let h0 = tape.constant(Tensor::zeros(vec![di, ds]));
    let h = tape.linear_recurrence_scan(abar, bx, h0)?;
    let y = tape.ssm_readout(h, c)?;
    let skip = tape.expand(d_skip, steps);
    let skip = tape.mul(skip, u)?;
    tape.add(y, skip)
}

/// One selective SSM block over `seqs` sequences of `steps` tokens.
///
/// `z` is `[seqs · steps, d_model]`; returns the same shape. The residual
/// connection is left to the caller.
pub fn mamba_block(
    tape: &mut Tape,
    z: Var,
    seqs: usize,
    p: &MambaParams,
    dims: &MambaDims,
) -> Result<Var> {
    let rows = tape.shape(z)[0];
    if rows == 0 || seqs == 0 || !rows.is_multiple_of(seqs) {
        return Err(Error::invalid(
            "mamba_block",
            format!("{rows} rows do not split into {seqs} sequences"),
        ));
    }
    let steps = rows / seqs;
    let di = dims.d_inner;
    let xz = tape.linear(z, p.w_in, None)?;
    let x = tape.slice(xz, 1, 0, di)?;
    let gate = tape.slice(xz, 1, di, 2 * di)?;

    let x = tape.reshape(x, vec![seqs, steps, di])?;
    let x = tape.causal_conv1d(x, p.conv_w)?;
    let bias = tape.expand(p.conv_b, rows);
    let bias = tape.reshape(bias, vec![seqs, steps, di])?;
    let x = tape.add(x, bias)?;
    let x = tape.silu(x);

    let x_rows = tape.reshape(x, vec![rows, di])?;
    let (delta, b, c) = ssm_parameters(tape, x_rows, p)?;
    let neg = tape.exp(p.a_log);
    let a = tape.scale(neg, -1.0);
    let delta = tape.reshape(delta, vec![seqs, steps, di])?;
    let b = tape.reshape(b, vec![seqs, steps, dims.d_state])?;
    let c = tape.reshape(c, vec![seqs, steps, dims.d_state])?;
    let y = tape.selective_scan(SelectiveScanInputs {
        u: x,
        delta,
        a,
        b,
        c,
        d: p.d_skip,
    })?;
    let y = tape.reshape(y, vec![rows, di])?;
    let g = tape.silu(gate);
    let y = tape.mul(y, g)?;
    tape.linear(y, p.w_out, None)
}
