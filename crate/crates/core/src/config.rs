//! Model and training configuration with a flat `key = value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::SplitSpec;
use crate::error::{Error, Result};

/// Where the block residual is taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Residual {
    /// `H = Dropout(Mamba(Z_gated)) + Z_in`.
    Input,
    /// `H = Dropout(Mamba(Z_gated)) + Z_gated`.
    Gated,
}

impl FromStr for Residual {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(Residual::Input),
            "gated" => Ok(Residual::Gated),
            _ => Err(Error::Config(format!("residual must be input|gated, got {s}"))),
        }
    }
}

impl Residual {
    fn as_str(self) -> &'static str {
        match self {
            Residual::Input => "input",
            Residual::Gated => "gated",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Decoupled (AdamW-style) decay; otherwise `wd·θ` is added to the gradient.
    pub decoupled_weight_decay: bool,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub split: SplitSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-5,
            decoupled_weight_decay: true,
            batch_size: 32,
            max_epochs: 10,
            patience: 5,
            split: SplitSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub variates: usize,
    pub d_model: usize,
    pub patch_sizes: Vec<usize>,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    pub dropout: f64,
    pub k_freq: usize,
    pub depth: usize,
    /// Gate fixed at one.
    pub no_spectral_gating: bool,
    /// Stride equals patch length.
    pub no_overlap: bool,
    /// Gate MLP fed a constant vector instead of band shares.
    pub plain_gating: bool,
    pub revin_affine: bool,
    /// LayerNorm before the gate product.
    pub gate_prenorm: bool,
    pub residual: Residual,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lookback: 96,
            horizon: 96,
            variates: 7,
            d_model: 128,
            patch_sizes: vec![8, 16, 32],
            d_state: 16,
            d_conv: 4,
            expand: 2,
            dropout: 0.1,
            k_freq: 3,
            depth: 1,
            no_spectral_gating: false,
            no_overlap: false,
            plain_gating: false,
            revin_affine: true,
            gate_prenorm: true,
            residual: Residual::Input,
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value for {key}: {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean for {key}: {value:?}"))),
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_sizes.is_empty() {
            return bad("patch_sizes is empty".into());
        }
        for &p in &self.patch_sizes {
            if p < 2 || !p.is_power_of_two() {
                return bad(format!("patch size {p} must be a power of two >= 2"));
            }
            if p > self.lookback {
                return bad(format!("branch{p}: look-back {} is shorter than the patch", self.lookback));
            }
        }
        let mut sorted = self.patch_sizes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.patch_sizes.len() {
            return bad("duplicate patch sizes".into());
        }
        if self.horizon == 0 || self.variates == 0 || self.d_model == 0 {
            return bad("horizon, variates and d_model must be positive".into());
        }
        if self.d_state == 0 || self.d_conv == 0 || self.expand == 0 || self.depth == 0 {
            return bad("d_state, d_conv, expand and depth must be positive".into());
        }
        if self.k_freq == 0 {
            return bad("k_freq must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.lr.is_nan() || t.lr <= 0.0 || t.weight_decay < 0.0 {
            return bad("batch_size and lr must be positive, weight_decay non-negative".into());
        }
        Ok(())
    }

    pub fn max_patch(&self) -> usize {
        self.patch_sizes.iter().copied().max().unwrap_or(0)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key.trim();
        match k {
            "lookback" => self.lookback = parse(k, value)?,
            "horizon" => self.horizon = parse(k, value)?,
            "variates" => self.variates = parse(k, value)?,
            "d_model" => self.d_model = parse(k, value)?,
            "patch_sizes" => {
                self.patch_sizes = value
                    .split(',')
                    .map(|p| parse(k, p))
                    .collect::<Result<_>>()?
            }
            "d_state" => self.d_state = parse(k, value)?,
            "d_conv" => self.d_conv = parse(k, value)?,
            "expand" => self.expand = parse(k, value)?,
            "dropout" => self.dropout = parse(k, value)?,
            "k_freq" => self.k_freq = parse(k, value)?,
            "depth" => self.depth = parse(k, value)?,
            "no_spectral_gating" => self.no_spectral_gating = parse_bool(k, value)?,
            "no_overlap" => self.no_overlap = parse_bool(k, value)?,
            "plain_gating" => self.plain_gating = parse_bool(k, value)?,
            "revin_affine" => self.revin_affine = parse_bool(k, value)?,
            "gate_prenorm" => self.gate_prenorm = parse_bool(k, value)?,
            "residual" => self.residual = value.trim().parse()?,
            "lr" => self.train.lr = parse(k, value)?,
            "weight_decay" => self.train.weight_decay = parse(k, value)?,
            "decoupled_weight_decay" => self.train.decoupled_weight_decay = parse_bool(k, value)?,
            "batch_size" => self.train.batch_size = parse(k, value)?,
            "max_epochs" => self.train.max_epochs = parse(k, value)?,
            "patience" => self.train.patience = parse(k, value)?,
            "split" => self.train.split = value.trim().parse()?,
            _ => return Err(Error::Config(format!("unknown config key {k:?}"))),
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let sizes: Vec<String> = self.patch_sizes.iter().map(|p| p.to_string()).collect();
        vec![
            ("lookback", self.lookback.to_string()),
            ("horizon", self.horizon.to_string()),
            ("variates", self.variates.to_string()),
            ("d_model", self.d_model.to_string()),
            ("patch_sizes", sizes.join(",")),
            ("d_state", self.d_state.to_string()),
            ("d_conv", self.d_conv.to_string()),
            ("expand", self.expand.to_string()),
            ("dropout", self.dropout.to_string()),
            ("k_freq", self.k_freq.to_string()),
            ("depth", self.depth.to_string()),
            ("no_spectral_gating", self.no_spectral_gating.to_string()),
            ("no_overlap", self.no_overlap.to_string()),
            ("plain_gating", self.plain_gating.to_string()),
            ("revin_affine", self.revin_affine.to_string()),
            ("gate_prenorm", self.gate_prenorm.to_string()),
            ("residual", self.residual.as_str().to_string()),
            ("lr", t.lr.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("decoupled_weight_decay", t.decoupled_weight_decay.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("patience", t.patience.to_string()),
            ("split", t.split.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Parses `key = value` lines over the defaults. Unknown keys are
    /// returned rather than rejected so callers can layer their own keys.
    pub fn from_text_lenient(text: &str) -> Result<(Self, Vec<(String, String)>)> {
        let mut cfg = ModelConfig::default();
        let mut rest = Vec::new();
        for (k, v) in parse_kv(text)? {
            match cfg.set(&k, &v) {
                Ok(()) => {}
                Err(Error::Config(m)) if m.starts_with("unknown config key") => rest.push((k, v)),
                Err(e) => return Err(e),
            }
        }
        Ok((cfg, rest))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (cfg, rest) = Self::from_text_lenient(text)?;
        if let Some((k, _)) = rest.first() {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
        Ok(cfg)
    }
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoSpectralGating,
    SingleScale,
    NoOverlap,
    PlainGating,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoSpectralGating,
        Variant::SingleScale,
        Variant::NoOverlap,
        Variant::PlainGating,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSpectralGating => "no_spectral_gating",
            Variant::SingleScale => "single_scale",
            Variant::NoOverlap => "no_overlap",
            Variant::PlainGating => "plain_gating",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant {s:?}; valid: {}", names.join(", ")))
            })
    }
}

/// Returns `config` modified for the named ablation variant.
pub fn ablate(config: &ModelConfig, variant: &str) -> Result<ModelConfig> {
    let v: Variant = variant.parse()?;
    Ok(apply_variant(config, v))
}

pub fn apply_variant(config: &ModelConfig, v: Variant) -> ModelConfig {
    let mut c = config.clone();
    match v {
        Variant::Full => {}
        Variant::NoSpectralGating => c.no_spectral_gating = true,
        Variant::SingleScale => c.patch_sizes = vec![16],
        Variant::NoOverlap => c.no_overlap = true,
        Variant::PlainGating => c.plain_gating = true,
    }
    c
}
