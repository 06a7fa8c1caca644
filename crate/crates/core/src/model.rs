//! Multi-scale spectrally gated state-space forecaster.
//!
//! Forward pass: instance normalization, channel-independent reshape, one
//! branch per patch size (patch, embed, add context, spectral gate, SSM
//! blocks, flatten head), softmax fusion of the branch forecasts, inverse
//! reshape and inverse normalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{ModelConfig, Residual};
use crate::error::{Error, Result};
use crate::params::{Bound, Params};
use crate::patch::{add_context, ScalePatchConfig};
use crate::spectral::{self, gate_hidden, GateParams};
use crate::ssm::{self, init_mamba, mamba_block, MambaDims, MambaParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const REVIN_EPS: f64 = 1e-5;

/// Per-sequence look-back statistics, indexed `b·M + m`.
#[derive(Clone, Debug, PartialEq)]
pub struct RevinStats {
    pub mean: Vec<f64>,
    /// `sqrt(var + eps)`
    pub std: Vec<f64>,
    pub batch: usize,
    pub variates: usize,
}

fn dims3(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, l, m] => Ok((b, l, m)),
        _ => Err(Error::invalid(op, format!("expected a [B, L, M] tensor, got {:?}", x.shape()))),
    }
}

/// Statistics of each `(b, m)` column of `x: [B, L, M]`.
pub fn revin_stats(x: &Tensor) -> Result<RevinStats> {
    let (b, l, m) = dims3("revin", x)?;
    if l == 0 {
        return Err(Error::invalid("revin", "empty look-back window"));
    }
    let mut mean = vec![0.0; b * m];
    let mut std = vec![0.0; b * m];
    for bi in 0..b {
        for mi in 0..m {
            let col = (0..l).map(|t| x.data()[(bi * l + t) * m + mi]);
            let mu = col.clone().sum::<f64>() / l as f64;
            let var = col.map(|v| (v - mu).powi(2)).sum::<f64>() / l as f64;
            mean[bi * m + mi] = mu;
            std[bi * m + mi] = (var + REVIN_EPS).sqrt();
        }
    }
    Ok(RevinStats {
        mean,
        std,
        batch: b,
        variates: m,
    })
}

/// `(x − μ)/√(σ² + ε)`, then `γ·x̂ + β` per variate when an affine is given.
pub fn revin_normalize(x: &Tensor, affine: Option<(&[f64], &[f64])>) -> Result<(Tensor, RevinStats)> {
    let st = revin_stats(x)?;
    let (_, l, m) = dims3("revin", x)?;
    check_affine(affine, m)?;
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (bi, mi) = (i / (l * m), i % m);
        let s = bi * m + mi;
        *v = (*v - st.mean[s]) / st.std[s];
        if let Some((g, b)) = affine {
            *v = g[mi] * *v + b[mi];
        }
    }
    Ok((out, st))
}

/// Inverts the affine, then restores `μ` and `σ` on `y: [B, T, M]`.
pub fn revin_denormalize(y: &Tensor, st: &RevinStats, affine: Option<(&[f64], &[f64])>) -> Result<Tensor> {
    let (b, t, m) = dims3("revin_denormalize", y)?;
    if b != st.batch || m != st.variates {
        return Err(Error::shape(
            "revin_denormalize",
            y.shape(),
            &[st.batch, t, st.variates],
        ));
    }
    check_affine(affine, m)?;
    if let Some((g, _)) = affine {
        if let Some(i) = g.iter().position(|&v| v == 0.0) {
            return Err(Error::Numerical(format!("revin.gamma[{i}] is zero; cannot denormalize")));
        }
    }
    let mut out = y.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (bi, mi) = (i / (t * m), i % m);
        let s = bi * m + mi;
        if let Some((g, b)) = affine {
            *v = (*v - b[mi]) / g[mi];
        }
        *v = *v * st.std[s] + st.mean[s];
    }
    Ok(out)
}

fn check_affine(affine: Option<(&[f64], &[f64])>, m: usize) -> Result<()> {
    match affine {
        Some((g, b)) if g.len() != m || b.len() != m => {
            Err(Error::shape("revin", &[g.len(), b.len()], &[m, m]))
        }
        _ => Ok(()),
    }
}

/// `[B, L, M] -> [B·M, L]`; sequence `b·M + m` carries variate `m`.
pub fn ci_reshape(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (b, l, m) = dims3("ci_reshape", x)?;
    let mut out = Vec::with_capacity(x.numel());
    for bi in 0..b {
        for mi in 0..m {
            out.extend((0..l).map(|t| x.data()[(bi * l + t) * m + mi]));
        }
    }
    let variates = (0..b * m).map(|s| s % m).collect();
    Ok((Tensor::new(vec![b * m, l], out)?, variates))
}

/// `[B·M, T] -> [B, T, M]`.
pub fn ci_inverse(y: &Tensor, batch: usize, variates: usize) -> Result<Tensor> {
    let [s, t] = *y.shape() else {
        return Err(Error::invalid("ci_inverse", "expected [B·M, T]"));
    };
    if s != batch * variates {
        return Err(Error::shape("ci_inverse", y.shape(), &[batch * variates, t]));
    }
    let mut out = vec![0.0; y.numel()];
    for (seq, row) in y.data().chunks(t.max(1)).enumerate() {
        let (bi, mi) = (seq / variates, seq % variates);
        for (ti, v) in row.iter().enumerate() {
            out[(bi * t + ti) * variates + mi] = *v;
        }
    }
    Tensor::new(vec![batch, t, variates], out)
}

/// `softmax(w)`.
pub fn fusion_weights(w: &[f64]) -> Vec<f64> {
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `Σ_k softmax(w)_k · y_k`; a single branch passes through unchanged.
pub fn fuse_scales(ys: &[Tensor], w: &[f64]) -> Result<Tensor> {
    let first = ys.first().ok_or_else(|| Error::invalid("fuse_scales", "no branch outputs"))?;
    if ys.len() == 1 {
        return Ok(first.clone());
    }
    if w.len() != ys.len() {
        return Err(Error::shape("fuse_scales", &[ys.len()], &[w.len()]));
    }
    let a = fusion_weights(w);
    let mut out = Tensor::zeros(first.shape().to_vec());
    for (y, ak) in ys.iter().zip(&a) {
        if y.shape() != first.shape() {
            return Err(Error::shape("fuse_scales", y.shape(), first.shape()));
        }
        for (o, v) in out.data_mut().iter_mut().zip(y.data()) {
            *o += ak * v;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub train: bool,
    /// Replace every gate with this constant.
    pub gate_override: Option<f64>,
    /// Keep per-branch descriptors and gate values.
    pub trace: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions::default()
    }

    pub fn train() -> Self {
        ForwardOptions {
            train: true,
            ..Default::default()
        }
    }
}

/// Gate activity of one branch for one forward pass.
#[derive(Clone, Debug)]
pub struct BranchTrace {
    pub patch: usize,
    pub count: usize,
    /// `[S·N, K]` band shares, row `s·N + n`.
    pub descriptors: Tensor,
    /// `[S·N, D]` gate values.
    pub gate: Tensor,
}

impl BranchTrace {
    /// Mean gate of each patch row.
    pub fn mean_gate(&self) -> Vec<f64> {
        let d = self.gate.shape()[1];
        self.gate
            .data()
            .chunks(d)
            .map(|r| r.iter().sum::<f64>() / d as f64)
            .collect()
    }
}

pub struct Forward {
    /// `[B, T, M]` forecast on the input's scale.
    pub output: Var,
    /// Branch forecasts `[B·M, T]` before fusion, in patch-size order.
    pub branch_outputs: Vec<Var>,
    /// `softmax(w_scale)`, absent for a single branch.
    pub fusion: Option<Var>,
    pub traces: Vec<BranchTrace>,
    /// Variate of each sequence.
    pub variates: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct AsgMamba {
    pub config: ModelConfig,
    pub params: Params,
    geoms: Vec<ScalePatchConfig>,
    dims: MambaDims,
}

fn normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

fn branch(p: usize) -> String {
    format!("branch{p}")
}

fn block_prefix(p: usize, layer: usize, part: &str) -> String {
    if layer == 0 {
        format!("branch{p}.{part}")
    } else {
        format!("branch{p}.{part}{layer}")
    }
}

impl AsgMamba {
    /// Freshly initialized model; parameter values depend only on
    /// `config` and `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let (geoms, dims) = Self::geometry(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let (d, m, k, t) = (config.d_model, config.variates, config.k_freq, config.horizon);
        params.insert("shared.E_node", normal(&mut rng, vec![m, d], 0.02));
        if config.revin_affine {
            params.insert("revin.gamma", Tensor::ones(vec![m]));
            params.insert("revin.beta", Tensor::zeros(vec![m]));
        }
        if geoms.len() > 1 {
            params.insert("fusion.w_scale", Tensor::zeros(vec![geoms.len()]));
        }
        for g in &geoms {
            let pre = branch(g.patch);
            let bound = 1.0 / (g.patch as f64).sqrt();
            params.insert(format!("{pre}.W_emb"), ssm::uniform_fan_in(&mut rng, d, g.patch));
            params.insert(format!("{pre}.b_emb"), ssm::uniform(&mut rng, vec![d], bound));
            params.insert(format!("{pre}.E_pos"), normal(&mut rng, vec![g.count, d], 0.02));
            if !config.no_spectral_gating {
                let h = gate_hidden(d);
                params.insert(format!("{pre}.gate.W_g1"), ssm::uniform_fan_in(&mut rng, h, k));
                let b1 = 1.0 / (k as f64).sqrt();
                params.insert(format!("{pre}.gate.b_g1"), ssm::uniform(&mut rng, vec![h], b1));
                params.insert(format!("{pre}.gate.W_g2"), ssm::uniform_fan_in(&mut rng, d, h));
                let b2 = 1.0 / (h as f64).sqrt();
                params.insert(format!("{pre}.gate.b_g2"), ssm::uniform(&mut rng, vec![d], b2));
            }
            for layer in 0..config.depth {
                if layer > 0 || config.gate_prenorm {
                    let norm = block_prefix(g.patch, layer, "norm");
                    params.insert(format!("{norm}.gamma"), Tensor::ones(vec![d]));
                    params.insert(format!("{norm}.beta"), Tensor::zeros(vec![d]));
                }
                init_mamba(&mut params, &block_prefix(g.patch, layer, "mamba"), &dims, &mut rng);
            }
            params.insert(format!("{pre}.head.W"), ssm::uniform_fan_in(&mut rng, t, g.count * d));
            let hb = 1.0 / ((g.count * d) as f64).sqrt();
            params.insert(format!("{pre}.head.b"), ssm::uniform(&mut rng, vec![t], hb));
        }
        Ok(AsgMamba {
            config,
            params,
            geoms,
            dims,
        })
    }

    /// Wraps existing parameters, checking names and shapes against a
    /// fresh initialization of the same config.
    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        let reference = AsgMamba::new(config, 0)?;
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(extra) = params.names().iter().find(|n| reference.params.get(n).is_none()) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        // keep the reference ordering
        let mut ordered = Params::new();
        for name in reference.params.names() {
            ordered.insert(name.clone(), params.get(name).expect("checked").clone());
        }
        Ok(AsgMamba {
            params: ordered,
            ..reference
        })
    }

    fn geometry(config: &ModelConfig) -> Result<(Vec<ScalePatchConfig>, MambaDims)> {
        config.validate()?;
        let geoms = config
            .patch_sizes
            .iter()
            .map(|&p| ScalePatchConfig::new(config.lookback, p, config.d_model, !config.no_overlap))
            .collect::<Result<Vec<_>>>()?;
        let dims = MambaDims::new(config.d_model, config.expand, config.d_state, config.d_conv);
        Ok((geoms, dims))
    }

    pub fn branches(&self) -> &[ScalePatchConfig] {
        &self.geoms
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Records a forward pass of `x: [B, L, M]` on `tape`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: &Tensor,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let (b, l, m) = dims3("forward", x)?;
        if l != cfg.lookback || m != cfg.variates {
            return Err(Error::shape("forward", x.shape(), &[b, cfg.lookback, cfg.variates]));
        }
        if b == 0 {
            return Err(Error::invalid("forward", "empty batch"));
        }
        if !x.is_finite() {
            return Err(Error::Data("input window contains non-finite values".into()));
        }
        let (xn, stats) = revin_normalize(x, None)?;
        let (seqs_t, variates) = ci_reshape(&xn)?;
        let s = seqs_t.shape()[0];
        let mut seqs = tape.constant(seqs_t);
        let affine = if cfg.revin_affine {
            let g = bound.var("revin.gamma")?;
            let bb = bound.var("revin.beta")?;
            let g_seq = per_sequence(tape, g, l, &variates)?;
            let b_seq = per_sequence(tape, bb, l, &variates)?;
            seqs = tape.mul(seqs, g_seq)?;
            seqs = tape.add(seqs, b_seq)?;
            Some((g, bb))
        } else {
            None
        };

        let e_node = bound.var("shared.E_node")?;
        let mut outs = Vec::with_capacity(self.geoms.len());
        let mut traces = Vec::new();
        for g in &self.geoms {
            let (y, trace) = self.branch_forward(tape, bound, seqs, e_node, &variates, g, opts, rng)?;
            outs.push(y);
            traces.extend(trace);
        }

        let (fused, fusion) = if outs.len() == 1 {
            (outs[0], None)
        } else {
            let w = bound.var("fusion.w_scale")?;
            let a = tape.softmax(w, 0)?;
            let mut acc: Option<Var> = None;
            for (k, &y) in outs.iter().enumerate() {
                let ak = tape.slice(a, 0, k, k + 1)?;
                let term = tape.mul_scalar(y, ak)?;
                acc = Some(match acc {
                    Some(prev) => tape.add(prev, term)?,
                    None => term,
                });
            }
            (acc.expect("at least two branches"), Some(a))
        };

        let t = cfg.horizon;
        let mut y = fused;
        if let Some((g, bb)) = affine {
            if let Some(i) = tape.value(g).data().iter().position(|&v| v == 0.0) {
                return Err(Error::Numerical(format!(
                    "revin.gamma[{i}] is zero; cannot denormalize"
                )));
            }
            let b_seq = per_sequence(tape, bb, t, &variates)?;
            let g_seq = per_sequence(tape, g, t, &variates)?;
            y = tape.sub(y, b_seq)?;
            y = tape.div(y, g_seq)?;
        }
        let scale = Tensor::from_fn(vec![s, t], |i| stats.std[i / t]);
        let shift = Tensor::from_fn(vec![s, t], |i| stats.mean[i / t]);
        let scale = tape.constant(scale);
        let shift = tape.constant(shift);
        y = tape.mul(y, scale)?;
        y = tape.add(y, shift)?;
        let y = tape.reshape(y, vec![b, m, t])?;
        let output = tape.permute(y, &[0, 2, 1])?;
        Ok(Forward {
            output,
            branch_outputs: outs,
            fusion,
            traces,
            variates,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn branch_forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        seqs: Var,
        e_node: Var,
        variates: &[usize],
        g: &ScalePatchConfig,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<(Var, Option<BranchTrace>)> {
        let cfg = &self.config;
        let pre = branch(g.patch);
        let p = |n: &str| bound.var(&format!("{pre}.{n}"));
        let s = variates.len();
        let (n, d) = (g.count, cfg.d_model);
        let rows = s * n;

        let patches = tape.unfold(seqs, g.patch, g.stride)?;
        let patches = tape.reshape(patches, vec![rows, g.patch])?;
        let z_raw = tape.linear(patches, p("W_emb")?, Some(p("b_emb")?))?;
        let z_in = add_context(tape, z_raw, p("E_pos")?, e_node, variates)?;

        let descriptors = spectral::descriptors(tape.value(patches), cfg.k_freq)?;
        let gate = match opts.gate_override {
            Some(c) => tape.constant(Tensor::full(vec![rows, d], c)),
            None if cfg.no_spectral_gating => tape.constant(Tensor::ones(vec![rows, d])),
            None => {
                let v = if cfg.plain_gating {
                    Tensor::full(vec![rows, cfg.k_freq], 1.0 / cfg.k_freq as f64)
                } else {
                    descriptors.clone()
                };
                let v = tape.constant(v);
                let gp = GateParams {
                    w1: p("gate.W_g1")?,
                    b1: p("gate.b_g1")?,
                    w2: p("gate.W_g2")?,
                    b2: p("gate.b_g2")?,
                };
                spectral::gate_mlp(tape, v, &gp)?
            }
        };
        let trace = opts.trace.then(|| BranchTrace {
            patch: g.patch,
            count: n,
            descriptors,
            gate: tape.value(gate).clone(),
        });
        let norm = if cfg.gate_prenorm {
            Some((p("norm.gamma")?, p("norm.beta")?))
        } else {
            None
        };
        let z_gated = spectral::apply_gate(tape, z_in, gate, norm)?;

        let mut h = match cfg.residual {
            Residual::Input => z_in,
            Residual::Gated => z_gated,
        };
        let mut x = z_gated;
        for layer in 0..cfg.depth {
            if layer > 0 {
                let norm = block_prefix(g.patch, layer, "norm");
                let gm = bound.var(&format!("{norm}.gamma"))?;
                let bt = bound.var(&format!("{norm}.beta"))?;
                x = tape.layernorm(h, Some(gm), Some(bt))?;
            }
            let mp = MambaParams::bind(bound, &block_prefix(g.patch, layer, "mamba"))?;
            let out = mamba_block(tape, x, s, &mp, &self.dims)?;
            let out = tape.dropout(out, cfg.dropout, opts.train, rng)?;
            h = tape.add(out, h)?;
        }

        let flat = tape.reshape(h, vec![s, n * d])?;
        let y = tape.linear(flat, p("head.W")?, Some(p("head.b")?))?;
        Ok((y, trace))
    }

    /// Eval-mode forecast `[B, L, M] -> [B, T, M]`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.predict_traced(x, ForwardOptions::eval())?.0)
    }

    /// Eval-mode forecast plus whatever `opts` asks to keep.
    pub fn predict_traced(&self, x: &Tensor, opts: ForwardOptions) -> Result<(Tensor, Vec<BranchTrace>, Vec<usize>)> {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &self.params, false);
        let opts = ForwardOptions { train: false, ..opts };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = self.forward(&mut tape, &bound, x, &opts, &mut rng)?;
        Ok((tape.value(f.output).clone(), f.traces, f.variates))
    }

    /// Current `softmax(w_scale)`; `[1.0]` for a single branch.
    pub fn fusion_weights(&self) -> Vec<f64> {
        match self.params.get("fusion.w_scale") {
            Some(w) => fusion_weights(w.data()),
            None => vec![1.0],
        }
    }
}

/// Broadcasts a per-variate vector `[M]` to `[S, len]` rows by sequence.
fn per_sequence(tape: &mut Tape, v: Var, len: usize, variates: &[usize]) -> Result<Var> {
    let e = tape.expand(v, len);
    let e = tape.transpose(e)?;
    tape.index_rows(e, variates)
}
