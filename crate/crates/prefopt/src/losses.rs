//! Scalar loss algebra for pairwise preference optimization.
//!
//! Three losses share one numerical core, the stable softplus:
//!
//! ```text
//! lmpo:   L = softplus(log h − d),   d = β·avg_w − β·avg_l − λ·m̄
//! simpo:  L = softplus(γ − β·avg_w + β·avg_l)          (averaged log-probs)
//! dpo:    L = softplus(−β·[(Σ_w − Σ_w^ref) − (Σ_l − Σ_l^ref)])  (totals)
//! ```
//!
//! `m̄` is the (optionally z-score-normalized) pair margin. The raw margin is
//! `(1 − p_w) · g(Δ)` with `Δ = p_w − p_l` and four interchangeable shapes
//! for `g`; the per-sequence probabilities `p` come from average log-probs,
//! optionally rescaled by the pair's relative length before exponentiation:
//!
//! ```text
//! p_y = exp(avg_lp_y · (len_w + len_l) / (2·len_y))     (length norm on)
//! ```
//!
//! The home-field intercept `h` is stored as `log h` so the loss can be
//! evaluated without ever exponentiating it.

use std::fmt;
use std::str::FromStr;

use crate::data::PreferenceRecord;
use crate::policy::BigramPolicy;
use crate::{Error, Result};

/// Numerically stable `1 / (1 + exp(−x))`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(1 + exp(z))`, exact for very large `|z|`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// The four margin shapes `g(Δ)`; all are paired with the `(1 − p_w)`
/// confidence factor and all equal their value at `Δ = 0` times `(1 − p_w)`
/// when the pair is tied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginVariant {
    /// `g(Δ) = 1 − Δ⁵` (the default).
    Power5,
    /// `g(Δ) = (1/α)·log((1 − Δ)/(1 + Δ)) + 0.5`, `Δ` clamped away from ±1.
    Log,
    /// `g(Δ) = 1 − Δ³`.
    Cube,
    /// `g(Δ) = 1/(1 + exp(Δ/temp))`, decreasing in the gap.
    Sigmoid,
}

impl MarginVariant {
    pub const ALL: [MarginVariant; 4] = [
        MarginVariant::Power5,
        MarginVariant::Log,
        MarginVariant::Cube,
        MarginVariant::Sigmoid,
    ];
}

impl fmt::Display for MarginVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MarginVariant::Power5 => "power5",
            MarginVariant::Log => "log",
            MarginVariant::Cube => "cube",
            MarginVariant::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for MarginVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "power5" => Ok(MarginVariant::Power5),
            "log" => Ok(MarginVariant::Log),
            "cube" => Ok(MarginVariant::Cube),
            "sigmoid" => Ok(MarginVariant::Sigmoid),
            other => Err(Error::InvalidInput(format!(
                "unknown margin variant {other:?} (expected power5, log, cube, or sigmoid)"
            ))),
        }
    }
}

/// Hyperparameters of the home-field loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LmpoConfig {
    /// Reward scale β.
    pub beta: f64,
    /// Log of the home-field intercept h.
    pub log_h: f64,
    /// Margin weight λ.
    pub lambda: f64,
    pub margin_variant: MarginVariant,
    /// α of the log margin variant.
    pub log_alpha: f64,
    /// Temperature of the sigmoid margin variant.
    pub sigmoid_temp: f64,
    /// Rescale margin probabilities by relative pair length.
    pub use_avg_len_norm: bool,
    /// Z-score-normalize margins with running batch statistics.
    pub use_zscore: bool,
}

impl LmpoConfig {
    fn with_preset_values(beta: f64, log_h: f64, lambda: f64) -> Self {
        LmpoConfig {
            beta,
            log_h,
            lambda,
            margin_variant: MarginVariant::Power5,
            log_alpha: 2.0,
            sigmoid_temp: 1.0,
            use_avg_len_norm: true,
            use_zscore: true,
        }
    }

    pub fn mistral_base() -> Self {
        Self::with_preset_values(2.0, 1.6, 1.0)
    }

    pub fn mistral_instruct() -> Self {
        Self::with_preset_values(2.5, 0.25, 0.2)
    }

    pub fn llama3_base() -> Self {
        Self::with_preset_values(2.0, 1.0, 0.2)
    }

    pub fn llama3_instruct() -> Self {
        Self::with_preset_values(2.5, 1.4, 0.2)
    }

    pub const PRESET_NAMES: [&'static str; 4] = [
        "mistral-base",
        "mistral-instruct",
        "llama3-base",
        "llama3-instruct",
    ];

    /// Looks up a named hyperparameter preset.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "mistral-base" => Some(Self::mistral_base()),
            "mistral-instruct" => Some(Self::mistral_instruct()),
            "llama3-base" => Some(Self::llama3_base()),
            "llama3-instruct" => Some(Self::llama3_instruct()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidInput(format!(
                "beta must be a positive finite number, got {}",
                self.beta
            )));
        }
        if !self.log_h.is_finite() {
            return Err(Error::InvalidInput(format!(
                "log_h must be finite, got {}",
                self.log_h
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidInput(format!(
                "lambda must be a nonnegative finite number, got {}",
                self.lambda
            )));
        }
        if !(self.log_alpha > 0.0) || !self.log_alpha.is_finite() {
            return Err(Error::InvalidInput(format!(
                "log_alpha must be a positive finite number, got {}",
                self.log_alpha
            )));
        }
        if !(self.sigmoid_temp > 0.0) || !self.sigmoid_temp.is_finite() {
            return Err(Error::InvalidInput(format!(
                "sigmoid_temp must be a positive finite number, got {}",
                self.sigmoid_temp
            )));
        }
        Ok(())
    }
}

impl Default for LmpoConfig {
    fn default() -> Self {
        Self::mistral_base()
    }
}

/// Hyperparameters of the reference-free baseline with a fixed target margin.
#[derive(Debug, Clone, PartialEq)]
pub struct SimpoConfig {
    pub beta: f64,
    /// Target reward margin γ.
    pub gamma_target: f64,
}

impl SimpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidInput(format!(
                "beta must be a positive finite number, got {}",
                self.beta
            )));
        }
        if !(self.gamma_target >= 0.0) || !self.gamma_target.is_finite() {
            return Err(Error::InvalidInput(format!(
                "gamma_target must be a nonnegative finite number, got {}",
                self.gamma_target
            )));
        }
        Ok(())
    }
}

impl Default for SimpoConfig {
    fn default() -> Self {
        SimpoConfig {
            beta: 2.0,
            gamma_target: 0.0,
        }
    }
}

/// Hyperparameters of the reference-anchored baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoConfig {
    pub beta: f64,
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidInput(format!(
                "beta must be a positive finite number, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig { beta: 2.0 }
    }
}

/// Which loss a run optimizes, with its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LossConfig {
    Lmpo(LmpoConfig),
    Simpo(SimpoConfig),
    Dpo(DpoConfig),
}

impl LossConfig {
    pub fn label(&self) -> &'static str {
        match self {
            LossConfig::Lmpo(_) => "lmpo",
            LossConfig::Simpo(_) => "simpo",
            LossConfig::Dpo(_) => "dpo",
        }
    }

    /// Whether this loss scores pairs under a frozen reference policy.
    pub fn needs_reference(&self) -> bool {
        matches!(self, LossConfig::Dpo(_))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LossConfig::Lmpo(c) => c.validate(),
            LossConfig::Simpo(c) => c.validate(),
            LossConfig::Dpo(c) => c.validate(),
        }
    }
}

/// Everything the losses need to know about one scored pair: average and
/// total log-probs under the trained policy, optional totals under a frozen
/// reference, and the two response lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub avg_lp_w: f64,
    pub avg_lp_l: f64,
    pub sum_lp_w: f64,
    pub sum_lp_l: f64,
    pub ref_sum_lp_w: Option<f64>,
    pub ref_sum_lp_l: Option<f64>,
    pub len_w: usize,
    pub len_l: usize,
}

impl ScoredPair {
    /// Scores a record under `policy` alone (no reference).
    pub fn from_policy(policy: &BigramPolicy, rec: &PreferenceRecord) -> Result<Self> {
        let sum_lp_w = policy.seq_logprob(&rec.prompt, &rec.chosen)?;
        let sum_lp_l = policy.seq_logprob(&rec.prompt, &rec.rejected)?;
        let len_w = rec.chosen.len();
        let len_l = rec.rejected.len();
        Ok(ScoredPair {
            avg_lp_w: sum_lp_w / len_w as f64,
            avg_lp_l: sum_lp_l / len_l as f64,
            sum_lp_w,
            sum_lp_l,
            ref_sum_lp_w: None,
            ref_sum_lp_l: None,
            len_w,
            len_l,
        })
    }

    /// Scores a record under `policy` and a frozen `reference`.
    pub fn with_reference(
        policy: &BigramPolicy,
        reference: &BigramPolicy,
        rec: &PreferenceRecord,
    ) -> Result<Self> {
        let mut pair = Self::from_policy(policy, rec)?;
        pair.ref_sum_lp_w = Some(reference.seq_logprob(&rec.prompt, &rec.chosen)?);
        pair.ref_sum_lp_l = Some(reference.seq_logprob(&rec.prompt, &rec.rejected)?);
        Ok(pair)
    }
}

/// Relative-length scale `(len_w + len_l) / (2·len_y)` applied to the
/// average log-prob of the response with length `len_y`.
pub fn length_scale(len_w: usize, len_l: usize, len_y: usize) -> Result<f64> {
    if len_w == 0 || len_l == 0 || len_y == 0 {
        return Err(Error::InvalidInput(
            "length_scale requires positive lengths".to_string(),
        ));
    }
    Ok((len_w + len_l) as f64 / (2.0 * len_y as f64))
}

/// Sequence probability `exp(avg_lp · scale)`; underflow clamps to 0.
pub fn scaled_prob(avg_lp: f64, scale: f64) -> f64 {
    (avg_lp * scale).exp()
}

/// `(1 − p_w)·(1 − Δ⁵)`.
pub fn margin_power5(p_w: f64, p_l: f64) -> f64 {
    (1.0 - p_w) * (1.0 - (p_w - p_l).powi(5))
}

/// `(1 − p_w)·(1 − Δ³)`.
pub fn margin_cube(p_w: f64, p_l: f64) -> f64 {
    (1.0 - p_w) * (1.0 - (p_w - p_l).powi(3))
}

/// How far the log variant's `Δ` stays away from its ±1 poles.
pub const LOG_MARGIN_CLAMP: f64 = 1e-6;

/// `(1 − p_w)·((1/α)·log((1 − Δ)/(1 + Δ)) + 0.5)`, `Δ` clamped to keep the
/// logarithm finite. The only variant that can go negative.
pub fn margin_log(p_w: f64, p_l: f64, log_alpha: f64) -> f64 {
    let delta = (p_w - p_l).clamp(-1.0 + LOG_MARGIN_CLAMP, 1.0 - LOG_MARGIN_CLAMP);
    (1.0 - p_w) * (((1.0 - delta) / (1.0 + delta)).ln() / log_alpha + 0.5)
}

/// `(1 − p_w)·1/(1 + exp(Δ/temp))`: the factor *decreases* as the gap grows.
pub fn margin_sigmoid(p_w: f64, p_l: f64, sigmoid_temp: f64) -> f64 {
    (1.0 - p_w) * sigmoid(-(p_w - p_l) / sigmoid_temp)
}

/// The two length scales `(s_w, s_l)` a pair's margin probabilities use
/// under the configured normalization.
pub(crate) fn margin_scales(pair: &ScoredPair, cfg: &LmpoConfig) -> (f64, f64) {
    if cfg.use_avg_len_norm {
        let sum = (pair.len_w + pair.len_l) as f64;
        (
            sum / (2.0 * pair.len_w as f64),
            sum / (2.0 * pair.len_l as f64),
        )
    } else {
        (1.0, 1.0)
    }
}

/// Margin probabilities `(p_w, p_l)` for a pair under the configured length
/// normalization.
pub(crate) fn margin_probs(pair: &ScoredPair, cfg: &LmpoConfig) -> (f64, f64) {
    let (s_w, s_l) = margin_scales(pair, cfg);
    (
        scaled_prob(pair.avg_lp_w, s_w),
        scaled_prob(pair.avg_lp_l, s_l),
    )
}

/// Raw (un-normalized) margin of a pair under the configured variant and
/// length normalization.
pub fn pair_margin(pair: &ScoredPair, cfg: &LmpoConfig) -> f64 {
    let (p_w, p_l) = margin_probs(pair, cfg);
    match cfg.margin_variant {
        MarginVariant::Power5 => margin_power5(p_w, p_l),
        MarginVariant::Log => margin_log(p_w, p_l, cfg.log_alpha),
        MarginVariant::Cube => margin_cube(p_w, p_l),
        MarginVariant::Sigmoid => margin_sigmoid(p_w, p_l, cfg.sigmoid_temp),
    }
}

/// The scalar the home-field loss squashes: `β·avg_w − β·avg_l − λ·m̄`.
pub fn lmpo_d(pair: &ScoredPair, m_bar: f64, cfg: &LmpoConfig) -> f64 {
    cfg.beta * pair.avg_lp_w - cfg.beta * pair.avg_lp_l - cfg.lambda * m_bar
}

/// `−log(1/(1 + h·e^{−d})) = softplus(log h − d)`.
pub fn lmpo_loss(d: f64, log_h: f64) -> f64 {
    softplus(log_h - d)
}

/// `−log σ(β·avg_w − β·avg_l − γ)`.
pub fn simpo_loss(pair: &ScoredPair, cfg: &SimpoConfig) -> f64 {
    lmpo_loss(
        cfg.beta * pair.avg_lp_w - cfg.beta * pair.avg_lp_l - cfg.gamma_target,
        0.0,
    )
}

/// `−log σ(β·[(Σ_w − Σ_w^ref) − (Σ_l − Σ_l^ref)])` over *total* log-probs.
pub fn dpo_loss(pair: &ScoredPair, cfg: &DpoConfig) -> Result<f64> {
    let (ref_w, ref_l) = match (pair.ref_sum_lp_w, pair.ref_sum_lp_l) {
        (Some(w), Some(l)) => (w, l),
        _ => return Err(Error::MissingReference),
    };
    let d = cfg.beta * ((pair.sum_lp_w - ref_w) - (pair.sum_lp_l - ref_l));
    Ok(lmpo_loss(d, 0.0))
}
