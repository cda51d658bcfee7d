//! Hand-assembled analytic gradients of every loss, and the
//! finite-difference oracle that certifies them.
//!
//! Every loss here has the shape `L = softplus(t − d(θ))` for a constant
//! intercept `t`, so the whole gradient is one scalar coefficient times
//! `∇d`:
//!
//! ```text
//! ∇L = (σ(d − t) − 1) · ∇d,        σ(d − t) − 1 ∈ (−1, 0)
//! ```
//!
//! For the home-field loss, `∇d` unrolls through the margin chain with the
//! running statistics *detached* (their derivative is taken to be zero):
//!
//! ```text
//! ∇d = (β/|y_w|)·∇Σ_w − (β/|y_l|)·∇Σ_l − (λ/b)·∇m
//! ∇m = c_w·∇p_w + c_l·∇p_l,   c_w = −g + (1−p_w)·g′,   c_l = −(1−p_w)·g′
//! ∇p_y = p_y · s_y · ∇avg_y                  (s_y = its length scale)
//! ```
//!
//! where `b` is the running std when z-scoring is on, else 1, and `g, g′`
//! are the margin shape and its derivative in `Δ = p_w − p_l`. Collecting
//! terms, `∇d` is a two-coefficient combination of the two raw sequence
//! gradients — every loss funnels through [`combine_pair_grad`], which is
//! what makes the `λ = 0` home-field gradient *bit-identical* to the
//! `γ = 0` baseline's.
//!
//! The oracle is plain central differencing of the scalar loss with the
//! normalizer state frozen, so analytic and numeric differentiate exactly
//! the same function.

use std::fmt;

use crate::data::PreferenceRecord;
use crate::losses::{
    dpo_loss, lmpo_d, lmpo_loss, margin_scales, pair_margin, scaled_prob, sigmoid, simpo_loss,
    DpoConfig, LmpoConfig, LossConfig, MarginVariant, ScoredPair, SimpoConfig, LOG_MARGIN_CLAMP,
};
use crate::normstate::EmaNormState;
use crate::policy::{BigramPolicy, GradTable};
use crate::{Error, Result};

/// `∂/∂d softplus(log_h − d) = σ(d − log_h) − 1`; always in (−1, 0).
///
/// Computed as the equal `−σ(log_h − d)`, which keeps the saturated tail's
/// tiny magnitude instead of rounding it to zero — a pair the loss has
/// given up on still nudges the parameters.
pub fn dloss_dd(d: f64, log_h: f64) -> f64 {
    -sigmoid(log_h - d)
}

/// The margin chain coefficients `(c_w, c_l)` for a variant at the given
/// probabilities: `∇m = c_w·∇p_w + c_l·∇p_l`.
fn variant_coeffs(
    p_w: f64,
    p_l: f64,
    variant: MarginVariant,
    log_alpha: f64,
    sigmoid_temp: f64,
) -> (f64, f64) {
    let delta = p_w - p_l;
    let (g, g_prime) = match variant {
        MarginVariant::Power5 => (1.0 - delta.powi(5), -5.0 * delta.powi(4)),
        MarginVariant::Cube => (1.0 - delta.powi(3), -3.0 * delta.powi(2)),
        MarginVariant::Log => {
            let clamped = delta.clamp(-1.0 + LOG_MARGIN_CLAMP, 1.0 - LOG_MARGIN_CLAMP);
            let g = ((1.0 - clamped) / (1.0 + clamped)).ln() / log_alpha + 0.5;
            // Saturated clamp ⇒ the variant is locally constant in Δ.
            let g_prime = if delta.abs() < 1.0 - LOG_MARGIN_CLAMP {
                -2.0 / (log_alpha * (1.0 - clamped * clamped))
            } else {
                0.0
            };
            (g, g_prime)
        }
        MarginVariant::Sigmoid => {
            let s = sigmoid(-delta / sigmoid_temp);
            (s, -s * (1.0 - s) / sigmoid_temp)
        }
    };
    (-g + (1.0 - p_w) * g_prime, -(1.0 - p_w) * g_prime)
}

fn margin_grad(c_w: f64, c_l: f64, grad_p_w: &GradTable, grad_p_l: &GradTable) -> GradTable {
    assert_eq!(
        grad_p_w.vocab_size(),
        grad_p_l.vocab_size(),
        "gradient tables must share a vocabulary size"
    );
    let values = grad_p_w
        .values()
        .iter()
        .zip(grad_p_l.values())
        .map(|(gw, gl)| c_w * gw + c_l * gl)
        .collect();
    GradTable::from_values(grad_p_w.vocab_size(), values)
}

/// `∇m` for the default variant: `−(1 − Δ⁵)·∇p_w − 5(1−p_w)Δ⁴·(∇p_w − ∇p_l)`.
pub fn grad_margin_power5(
    p_w: f64,
    p_l: f64,
    grad_p_w: &GradTable,
    grad_p_l: &GradTable,
) -> GradTable {
    let (c_w, c_l) = variant_coeffs(p_w, p_l, MarginVariant::Power5, 1.0, 1.0);
    margin_grad(c_w, c_l, grad_p_w, grad_p_l)
}

/// `∇m` for the cube variant.
pub fn grad_margin_cube(
    p_w: f64,
    p_l: f64,
    grad_p_w: &GradTable,
    grad_p_l: &GradTable,
) -> GradTable {
    let (c_w, c_l) = variant_coeffs(p_w, p_l, MarginVariant::Cube, 1.0, 1.0);
    margin_grad(c_w, c_l, grad_p_w, grad_p_l)
}

/// `∇m` for the log variant (zero slope where the Δ clamp saturates).
pub fn grad_margin_log(
    p_w: f64,
    p_l: f64,
    log_alpha: f64,
    grad_p_w: &GradTable,
    grad_p_l: &GradTable,
) -> GradTable {
    let (c_w, c_l) = variant_coeffs(p_w, p_l, MarginVariant::Log, log_alpha, 1.0);
    margin_grad(c_w, c_l, grad_p_w, grad_p_l)
}

/// `∇m` for the sigmoid variant.
pub fn grad_margin_sigmoid(
    p_w: f64,
    p_l: f64,
    sigmoid_temp: f64,
    grad_p_w: &GradTable,
    grad_p_l: &GradTable,
) -> GradTable {
    let (c_w, c_l) = variant_coeffs(p_w, p_l, MarginVariant::Sigmoid, 1.0, sigmoid_temp);
    margin_grad(c_w, c_l, grad_p_w, grad_p_l)
}

/// `∇p = p · scale · ∇avg_lp` — the exact chain rule through
/// `p = exp(avg_lp · scale)`.
pub fn grad_scaled_prob(p: f64, scale: f64, grad_avg_lp: &GradTable) -> GradTable {
    let values = grad_avg_lp.values().iter().map(|g| p * scale * g).collect();
    GradTable::from_values(grad_avg_lp.vocab_size(), values)
}

/// `coeff · (a·∇Σ_w + b·∇Σ_l)`, the single assembly point every loss's
/// gradient goes through.
pub fn combine_pair_grad(
    coeff: f64,
    a: f64,
    grad_seq_w: &GradTable,
    b: f64,
    grad_seq_l: &GradTable,
) -> GradTable {
    assert_eq!(
        grad_seq_w.vocab_size(),
        grad_seq_l.vocab_size(),
        "gradient tables must share a vocabulary size"
    );
    let values = grad_seq_w
        .values()
        .iter()
        .zip(grad_seq_l.values())
        .map(|(gw, gl)| coeff * (a * gw + b * gl))
        .collect();
    GradTable::from_values(grad_seq_w.vocab_size(), values)
}

/// A record scored under the policy, bundled with the raw sequence
/// log-prob gradients both responses contribute.
#[derive(Debug, Clone)]
pub struct ScoredPairGrads {
    pub scored: ScoredPair,
    pub grad_seq_w: GradTable,
    pub grad_seq_l: GradTable,
}

/// Scores a record and its sequence gradients; `reference` is only needed
/// for the reference-anchored loss.
pub fn score_pair(
    policy: &BigramPolicy,
    reference: Option<&BigramPolicy>,
    rec: &PreferenceRecord,
) -> Result<ScoredPairGrads> {
    let scored = match reference {
        Some(r) => ScoredPair::with_reference(policy, r, rec)?,
        None => ScoredPair::from_policy(policy, rec)?,
    };
    Ok(ScoredPairGrads {
        scored,
        grad_seq_w: policy.grad_seq_logprob(&rec.prompt, &rec.chosen)?,
        grad_seq_l: policy.grad_seq_logprob(&rec.prompt, &rec.rejected)?,
    })
}

/// One pair's loss, gradient, and (for the home-field loss) the raw and
/// normalized margins that entered it.
#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub loss: f64,
    pub grad: GradTable,
    pub margin_raw: Option<f64>,
    pub margin_norm: Option<f64>,
}

/// The home-field margin terms `(m_raw, m̄, 1/b)` under the z-score switch;
/// requires an initialized state when z-scoring is on.
fn lmpo_margin_terms(
    pair: &ScoredPair,
    cfg: &LmpoConfig,
    state: Option<&EmaNormState>,
) -> Result<(f64, f64, f64)> {
    let m_raw = pair_margin(pair, cfg);
    if cfg.use_zscore {
        let state = state.ok_or(Error::UninitializedNorm)?;
        Ok((m_raw, state.normalize(m_raw)?, state.inv_std()?))
    } else {
        Ok((m_raw, m_raw, 1.0))
    }
}

/// Loss and analytic gradient for one scored pair.
pub fn pair_outcome(
    sg: &ScoredPairGrads,
    loss: &LossConfig,
    state: Option<&EmaNormState>,
) -> Result<PairOutcome> {
    let pair = &sg.scored;
    match loss {
        LossConfig::Lmpo(cfg) => {
            let (m_raw, m_bar, inv_std) = lmpo_margin_terms(pair, cfg, state)?;
            let d = lmpo_d(pair, m_bar, cfg);
            let coeff = dloss_dd(d, cfg.log_h);
            let len_w = pair.len_w as f64;
            let len_l = pair.len_l as f64;
            let mut a = cfg.beta / len_w;
            let mut b = -(cfg.beta / len_l);
            // λ = 0 skips the margin chain entirely, leaving a and b exactly
            // the baseline coefficients (the λ-free path must share bits).
            if cfg.lambda != 0.0 {
                let (s_w, s_l) = margin_scales(pair, cfg);
                let p_w = scaled_prob(pair.avg_lp_w, s_w);
                let p_l = scaled_prob(pair.avg_lp_l, s_l);
                let (c_w, c_l) = variant_coeffs(
                    p_w,
                    p_l,
                    cfg.margin_variant,
                    cfg.log_alpha,
                    cfg.sigmoid_temp,
                );
                a -= cfg.lambda * inv_std * c_w * p_w * s_w / len_w;
                b -= cfg.lambda * inv_std * c_l * p_l * s_l / len_l;
            }
            Ok(PairOutcome {
                loss: lmpo_loss(d, cfg.log_h),
                grad: combine_pair_grad(coeff, a, &sg.grad_seq_w, b, &sg.grad_seq_l),
                margin_raw: Some(m_raw),
                margin_norm: Some(m_bar),
            })
        }
        LossConfig::Simpo(cfg) => {
            let d = cfg.beta * pair.avg_lp_w - cfg.beta * pair.avg_lp_l - cfg.gamma_target;
            let coeff = dloss_dd(d, 0.0);
            let a = cfg.beta / pair.len_w as f64;
            let b = -(cfg.beta / pair.len_l as f64);
            Ok(PairOutcome {
                loss: lmpo_loss(d, 0.0),
                grad: combine_pair_grad(coeff, a, &sg.grad_seq_w, b, &sg.grad_seq_l),
                margin_raw: None,
                margin_norm: None,
            })
        }
        LossConfig::Dpo(cfg) => {
            let loss = dpo_loss(pair, cfg)?;
            let ref_w = pair.ref_sum_lp_w.expect("checked by dpo_loss");
            let ref_l = pair.ref_sum_lp_l.expect("checked by dpo_loss");
            let v = cfg.beta * ((pair.sum_lp_w - ref_w) - (pair.sum_lp_l - ref_l));
            // The frozen reference contributes no gradient; only the two
            // total-log-prob terms survive, unnormalized by length.
            let coeff = dloss_dd(v, 0.0);
            Ok(PairOutcome {
                loss,
                grad: combine_pair_grad(coeff, cfg.beta, &sg.grad_seq_w, -cfg.beta, &sg.grad_seq_l),
                margin_raw: None,
                margin_norm: None,
            })
        }
    }
}

/// Scalar loss of one record without building gradient tables — this is the
/// function the finite-difference oracle probes.
pub fn loss_value(
    policy: &BigramPolicy,
    reference: Option<&BigramPolicy>,
    rec: &PreferenceRecord,
    loss: &LossConfig,
    state: Option<&EmaNormState>,
) -> Result<f64> {
    let pair = match reference {
        Some(r) => ScoredPair::with_reference(policy, r, rec)?,
        None => ScoredPair::from_policy(policy, rec)?,
    };
    match loss {
        LossConfig::Lmpo(cfg) => {
            let (_, m_bar, _) = lmpo_margin_terms(&pair, cfg, state)?;
            Ok(lmpo_loss(lmpo_d(&pair, m_bar, cfg), cfg.log_h))
        }
        LossConfig::Simpo(cfg) => Ok(simpo_loss(&pair, cfg)),
        LossConfig::Dpo(cfg) => dpo_loss(&pair, cfg),
    }
}

/// Full analytic home-field gradient for one record.
pub fn assemble_lmpo_grad(
    policy: &BigramPolicy,
    rec: &PreferenceRecord,
    cfg: &LmpoConfig,
    state: Option<&EmaNormState>,
) -> Result<GradTable> {
    let sg = score_pair(policy, None, rec)?;
    Ok(pair_outcome(&sg, &LossConfig::Lmpo(cfg.clone()), state)?.grad)
}

/// Full analytic gradient of the reference-free baseline for one record.
pub fn assemble_simpo_grad(
    policy: &BigramPolicy,
    rec: &PreferenceRecord,
    cfg: &SimpoConfig,
) -> Result<GradTable> {
    let sg = score_pair(policy, None, rec)?;
    Ok(pair_outcome(&sg, &LossConfig::Simpo(cfg.clone()), None)?.grad)
}

/// Full analytic gradient of the reference-anchored baseline for one record.
pub fn assemble_dpo_grad(
    policy: &BigramPolicy,
    reference: &BigramPolicy,
    rec: &PreferenceRecord,
    cfg: &DpoConfig,
) -> Result<GradTable> {
    let sg = score_pair(policy, Some(reference), rec)?;
    Ok(pair_outcome(&sg, &LossConfig::Dpo(cfg.clone()), None)?.grad)
}

/// Central-difference gradient `(f(θ+he) − f(θ−he)) / 2h` of an arbitrary
/// scalar function of the policy, one parameter at a time.
pub fn finite_diff_grad<F>(policy: &BigramPolicy, step: f64, mut f: F) -> Result<GradTable>
where
    F: FnMut(&BigramPolicy) -> Result<f64>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidInput(format!(
            "finite-difference step must be a positive finite number, got {step}"
        )));
    }
    let mut probe = policy.clone();
    let n = probe.logits().len();
    let mut values = vec![0.0; n];
    for (idx, slot) in values.iter_mut().enumerate() {
        let original = probe.logits()[idx];
        probe.logits_mut()[idx] = original + step;
        let plus = f(&probe)?;
        probe.logits_mut()[idx] = original - step;
        let minus = f(&probe)?;
        probe.logits_mut()[idx] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                what: format!("finite-difference probe at parameter {idx}"),
            });
        }
        *slot = (plus - minus) / (2.0 * step);
    }
    Ok(GradTable::from_values(policy.vocab_size(), values))
}

/// Worst-case disagreement between an analytic gradient and its oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub n_params_checked: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "max_abs_err={:e} max_rel_err={:e} n={}",
            self.max_abs_err, self.max_rel_err, self.n_params_checked
        )
    }
}

/// Entrywise comparison with relative error `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn compare_grad_tables(analytic: &GradTable, numeric: &GradTable) -> GradReport {
    assert_eq!(
        analytic.vocab_size(),
        numeric.vocab_size(),
        "gradient tables must share a vocabulary size"
    );
    let mut max_abs_err: f64 = 0.0;
    let mut max_rel_err: f64 = 0.0;
    for (a, n) in analytic.values().iter().zip(numeric.values()) {
        let abs = (a - n).abs();
        max_abs_err = max_abs_err.max(abs);
        max_rel_err = max_rel_err.max(abs / a.abs().max(n.abs()).max(1e-12));
    }
    GradReport {
        max_abs_err,
        max_rel_err,
        n_params_checked: analytic.n_params(),
        analytic_norm: analytic.l2_norm(),
        numeric_norm: numeric.l2_norm(),
    }
}

/// Certifies the analytic mean-batch gradient of `loss` against the oracle
/// on a sample of records, with the normalizer state frozen throughout.
pub fn grad_check(
    policy: &BigramPolicy,
    reference: Option<&BigramPolicy>,
    sample: &[PreferenceRecord],
    loss: &LossConfig,
    state: Option<&EmaNormState>,
    step: f64,
) -> Result<GradReport> {
    if sample.is_empty() {
        return Err(Error::InvalidInput(
            "gradient check requires a non-empty sample".to_string(),
        ));
    }
    let n = sample.len() as f64;
    let mut analytic = GradTable::zeros(policy.vocab_size());
    for rec in sample {
        let sg = score_pair(policy, reference, rec)?;
        analytic.scaled_add(1.0 / n, &pair_outcome(&sg, loss, state)?.grad);
    }
    let numeric = finite_diff_grad(policy, step, |probe| {
        let mut total = 0.0;
        for rec in sample {
            total += loss_value(probe, reference, rec, loss, state)?;
        }
        Ok(total / n)
    })?;
    Ok(compare_grad_tables(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::margin_probs;
    use crate::policy::TokenSeq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    const FD_STEP: f64 = 1e-5;

    fn rand_policy(vocab: usize, rng: &mut ChaCha8Rng) -> BigramPolicy {
        let logits = (0..vocab * vocab).map(|_| rng.sample(StandardNormal)).collect();
        BigramPolicy::from_logits(vocab, logits).unwrap()
    }

    fn rand_rec(vocab: usize, rng: &mut ChaCha8Rng) -> PreferenceRecord {
        let lens = [
            rng.random_range(1..=3usize),
            rng.random_range(1..=8),
            rng.random_range(1..=8),
        ];
        let mut seq = |len: usize| {
            TokenSeq::new((0..len).map(|_| rng.random_range(0..vocab as u32)).collect())
        };
        PreferenceRecord {
            prompt: seq(lens[0]),
            chosen: seq(lens[1]),
            rejected: seq(lens[2]),
        }
    }

    fn rand_state(rng: &mut ChaCha8Rng) -> EmaNormState {
        let mut state = EmaNormState::default();
        for _ in 0..3 {
            let batch: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            state.update(&batch).unwrap();
        }
        state
    }

    fn rand_lmpo_cfg(rng: &mut ChaCha8Rng, variant: MarginVariant) -> LmpoConfig {
        LmpoConfig {
            beta: rng.random_range(0.5..2.5),
            log_h: rng.random_range(-1.0..2.0),
            lambda: rng.random_range(0.05..2.0),
            margin_variant: variant,
            log_alpha: rng.random_range(0.5..4.0),
            sigmoid_temp: rng.random_range(0.3..3.0),
            use_avg_len_norm: true,
            use_zscore: true,
        }
    }

    #[test]
    fn dloss_dd_examples() {
        assert_eq!(dloss_dd(0.0, 0.0), -0.5);
        assert_eq!(dloss_dd(1.7, 1.7), -0.5);
        assert!((dloss_dd(3.0, 0.0) - (-1.0 / (1.0 + 3.0f64.exp()))).abs() < 1e-15);
        assert!((dloss_dd(3.0, 0.0) - (-0.047426)).abs() < 1e-6);
        // Deep saturation stays strictly negative rather than rounding to 0.
        assert!(dloss_dd(700.0, 0.0) < 0.0);
        assert!(dloss_dd(700.0, 0.0) > -1e-300);
    }

    #[test]
    fn dloss_dd_matches_numeric_derivative_on_a_grid() {
        let h = 1e-6;
        for di in -20..=20 {
            let d = di as f64 * 0.5;
            for li in -4..=4 {
                let log_h = li as f64 * 0.5;
                let numeric = (lmpo_loss(d + h, log_h) - lmpo_loss(d - h, log_h)) / (2.0 * h);
                let analytic = dloss_dd(d, log_h);
                assert!(
                    (numeric - analytic).abs() <= 1e-8,
                    "d={d} log_h={log_h}: analytic {analytic}, numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn grad_margin_power5_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let gw = rand_policy(3, &mut rng)
            .grad_seq_logprob(&TokenSeq::new(vec![0]), &TokenSeq::new(vec![1, 2]))
            .unwrap();
        let gl = rand_policy(3, &mut rng)
            .grad_seq_logprob(&TokenSeq::new(vec![0]), &TokenSeq::new(vec![2]))
            .unwrap();
        // Δ = 0: the Δ⁴ term dies, leaving exactly −∇p_w.
        let tied = grad_margin_power5(0.4, 0.4, &gw, &gl);
        for (out, g) in tied.values().iter().zip(gw.values()) {
            assert!((out - (-g)).abs() < 1e-15);
        }
        // p_w = 1: the (1 − p_w) factor kills the second term.
        let sure = grad_margin_power5(1.0, 0.25, &gw, &gl);
        let factor = -(1.0 - 0.75f64.powi(5));
        for (out, g) in sure.values().iter().zip(gw.values()) {
            assert!((out - factor * g).abs() < 1e-15);
        }
    }

    #[test]
    fn grad_scaled_prob_is_the_advertised_multiple() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let p = rand_policy(3, &mut rng);
        let g = p
            .grad_seq_logprob(&TokenSeq::new(vec![1]), &TokenSeq::new(vec![0, 2]))
            .unwrap();
        let zero = grad_scaled_prob(0.0, 2.0, &g);
        assert!(zero.values().iter().all(|&v| v == 0.0));
        let half = grad_scaled_prob(0.5, 1.0, &g);
        for (out, src) in half.values().iter().zip(g.values()) {
            assert_eq!(*out, 0.5 * src);
        }
    }

    /// The margin chain alone (no loss on top): analytic ∇(pair_margin)
    /// against central differences, for every variant and both switches.
    #[test]
    fn margin_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for variant in MarginVariant::ALL {
            for use_len_norm in [false, true] {
                let policy = rand_policy(4, &mut rng);
                let rec = rand_rec(4, &mut rng);
                let cfg = LmpoConfig {
                    use_avg_len_norm: use_len_norm,
                    use_zscore: false,
                    ..rand_lmpo_cfg(&mut rng, variant)
                };
                let sg = score_pair(&policy, None, &rec).unwrap();
                let (s_w, s_l) = margin_scales(&sg.scored, &cfg);
                let (p_w, p_l) = margin_probs(&sg.scored, &cfg);
                let to_avg = |g: &GradTable, len: usize| {
                    let mut avg = g.clone();
                    avg.scale(1.0 / len as f64);
                    avg
                };
                let gp_w = grad_scaled_prob(p_w, s_w, &to_avg(&sg.grad_seq_w, sg.scored.len_w));
                let gp_l = grad_scaled_prob(p_l, s_l, &to_avg(&sg.grad_seq_l, sg.scored.len_l));
                let analytic = match variant {
                    MarginVariant::Power5 => grad_margin_power5(p_w, p_l, &gp_w, &gp_l),
                    MarginVariant::Log => grad_margin_log(p_w, p_l, cfg.log_alpha, &gp_w, &gp_l),
                    MarginVariant::Cube => grad_margin_cube(p_w, p_l, &gp_w, &gp_l),
                    MarginVariant::Sigmoid => {
                        grad_margin_sigmoid(p_w, p_l, cfg.sigmoid_temp, &gp_w, &gp_l)
                    }
                };
                let numeric = finite_diff_grad(&policy, FD_STEP, |probe| {
                    Ok(pair_margin(&ScoredPair::from_policy(probe, &rec)?, &cfg))
                })
                .unwrap();
                let report = compare_grad_tables(&analytic, &numeric);
                assert!(
                    report.max_rel_err <= 1e-6,
                    "variant {variant:?}, len_norm {use_len_norm}: {report}"
                );
            }
        }
    }

    /// The full home-field chain for every variant × switch combination.
    #[test]
    fn lmpo_grad_matches_the_oracle_across_variants_and_switches() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for variant in MarginVariant::ALL {
            for use_len_norm in [false, true] {
                for use_zscore in [false, true] {
                    let policy = rand_policy(4, &mut rng);
                    let sample: Vec<_> = (0..3).map(|_| rand_rec(4, &mut rng)).collect();
                    let cfg = LmpoConfig {
                        use_avg_len_norm: use_len_norm,
                        use_zscore,
                        ..rand_lmpo_cfg(&mut rng, variant)
                    };
                    let state = rand_state(&mut rng);
                    let report = grad_check(
                        &policy,
                        None,
                        &sample,
                        &LossConfig::Lmpo(cfg),
                        Some(&state),
                        FD_STEP,
                    )
                    .unwrap();
                    assert!(
                        report.max_rel_err <= 1e-5,
                        "variant {variant:?}, len_norm {use_len_norm}, zscore {use_zscore}: {report}"
                    );
                }
            }
        }
    }

    #[test]
    fn baseline_grads_match_the_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let policy = rand_policy(5, &mut rng);
        let reference = rand_policy(5, &mut rng);
        let sample: Vec<_> = (0..4).map(|_| rand_rec(5, &mut rng)).collect();
        let simpo = LossConfig::Simpo(SimpoConfig {
            beta: 1.7,
            gamma_target: 0.4,
        });
        let report = grad_check(&policy, None, &sample, &simpo, None, FD_STEP).unwrap();
        assert!(report.max_rel_err <= 1e-5, "simpo: {report}");
        let dpo = LossConfig::Dpo(DpoConfig { beta: 1.3 });
        let report = grad_check(&policy, Some(&reference), &sample, &dpo, None, FD_STEP).unwrap();
        assert!(report.max_rel_err <= 1e-5, "dpo: {report}");
        assert_eq!(report.n_params_checked, 25);
    }

    #[test]
    fn dpo_gradient_at_the_reference_uses_coefficient_minus_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let policy = rand_policy(4, &mut rng);
        let rec = rand_rec(4, &mut rng);
        let cfg = DpoConfig { beta: 2.0 };
        // π_θ = π_ref: the inner term vanishes and the coefficient is σ(0) − 1.
        let grad = assemble_dpo_grad(&policy, &policy, &rec, &cfg).unwrap();
        let gw = policy.grad_seq_logprob(&rec.prompt, &rec.chosen).unwrap();
        let gl = policy.grad_seq_logprob(&rec.prompt, &rec.rejected).unwrap();
        let expected = combine_pair_grad(-0.5, cfg.beta, &gw, -cfg.beta, &gl);
        for (a, e) in grad.values().iter().zip(expected.values()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_zero_gradient_shares_bits_with_the_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..10 {
            let policy = rand_policy(4, &mut rng);
            let rec = rand_rec(4, &mut rng);
            let beta = rng.random_range(0.5..2.5);
            let lmpo_cfg = LmpoConfig {
                beta,
                log_h: 0.0,
                lambda: 0.0,
                use_avg_len_norm: false,
                use_zscore: false,
                ..LmpoConfig::default()
            };
            let simpo_cfg = SimpoConfig {
                beta,
                gamma_target: 0.0,
            };
            let a = assemble_lmpo_grad(&policy, &rec, &lmpo_cfg, None).unwrap();
            let b = assemble_simpo_grad(&policy, &rec, &simpo_cfg).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            let la = loss_value(&policy, None, &rec, &LossConfig::Lmpo(lmpo_cfg), None).unwrap();
            let lb = loss_value(&policy, None, &rec, &LossConfig::Simpo(simpo_cfg), None).unwrap();
            assert_eq!(la.to_bits(), lb.to_bits());
        }
    }

    #[test]
    fn descent_on_the_lambda_free_loss_widens_the_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let mut policy = rand_policy(4, &mut rng);
        let rec = PreferenceRecord {
            prompt: TokenSeq::new(vec![1]),
            chosen: TokenSeq::new(vec![2, 3, 0]),
            rejected: TokenSeq::new(vec![3, 3, 1, 0]),
        };
        let cfg = LmpoConfig {
            lambda: 0.0,
            use_zscore: false,
            ..LmpoConfig::default()
        };
        let before = ScoredPair::from_policy(&policy, &rec).unwrap();
        let grad = assemble_lmpo_grad(&policy, &rec, &cfg, None).unwrap();
        policy.gradient_step(&grad, 0.05);
        let after = ScoredPair::from_policy(&policy, &rec).unwrap();
        // The coefficient is negative and d's layout pushes chosen up,
        // rejected down.
        assert!(after.avg_lp_w > before.avg_lp_w);
        assert!(after.avg_lp_l < before.avg_lp_l);
    }

    #[test]
    fn symmetric_pair_gradient_is_margin_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let policy = rand_policy(4, &mut rng);
        let resp = TokenSeq::new(vec![2, 1, 0]);
        let rec = PreferenceRecord {
            prompt: TokenSeq::new(vec![3]),
            chosen: resp.clone(),
            rejected: resp,
        };
        // λ = 0 and y_w = y_l: the two log-prob terms cancel exactly.
        let cfg = LmpoConfig {
            lambda: 0.0,
            use_zscore: false,
            ..LmpoConfig::default()
        };
        let grad = assemble_lmpo_grad(&policy, &rec, &cfg, None).unwrap();
        assert!(grad.max_abs() < 1e-15);
        // λ > 0: only the margin chain survives; the oracle still agrees.
        let cfg = LmpoConfig {
            lambda: 1.0,
            use_zscore: false,
            ..LmpoConfig::default()
        };
        let report = grad_check(
            &policy,
            None,
            std::slice::from_ref(&rec),
            &LossConfig::Lmpo(cfg),
            None,
            FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "{report}");
    }

    #[test]
    fn finite_diff_is_exact_on_linear_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let policy = rand_policy(3, &mut rng);
        let coeffs: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) * 0.37).collect();
        let numeric = finite_diff_grad(&policy, FD_STEP, |p| {
            Ok(p.logits().iter().zip(&coeffs).map(|(t, c)| t * c).sum())
        })
        .unwrap();
        for (n, c) in numeric.values().iter().zip(&coeffs) {
            assert!((n - c).abs() < 1e-9, "numeric {n} vs coefficient {c}");
        }
    }

    #[test]
    fn oracle_step_sizes_are_self_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let policy = rand_policy(4, &mut rng);
        let sample: Vec<_> = (0..2).map(|_| rand_rec(4, &mut rng)).collect();
        let cfg = rand_lmpo_cfg(&mut rng, MarginVariant::Power5);
        let state = rand_state(&mut rng);
        let loss = LossConfig::Lmpo(cfg);
        for step in [1e-4, 1e-5, 1e-6] {
            let report =
                grad_check(&policy, None, &sample, &loss, Some(&state), step).unwrap();
            assert!(report.max_rel_err <= 1e-5, "step {step}: {report}");
        }
    }

    #[test]
    fn corrupted_analytic_gradient_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let policy = rand_policy(4, &mut rng);
        let sample: Vec<_> = (0..3).map(|_| rand_rec(4, &mut rng)).collect();
        let cfg = rand_lmpo_cfg(&mut rng, MarginVariant::Power5);
        let loss = LossConfig::Lmpo(LmpoConfig {
            use_zscore: false,
            ..cfg
        });
        let n = sample.len() as f64;
        let mut analytic = GradTable::zeros(4);
        for rec in &sample {
            let sg = score_pair(&policy, None, rec).unwrap();
            analytic.scaled_add(1.0 / n, &pair_outcome(&sg, &loss, None).unwrap().grad);
        }
        // Corrupt one entry the way a dropped chain-rule factor would.
        let mut corrupted = analytic.clone();
        let broken = GradTable::from_values(4, {
            let mut v = vec![0.0; 16];
            v[5] = 0.05;
            v
        });
        corrupted.scaled_add(1.0, &broken);
        let numeric = finite_diff_grad(&policy, FD_STEP, |probe| {
            let mut total = 0.0;
            for rec in &sample {
                total += loss_value(probe, None, rec, &loss, None)?;
            }
            Ok(total / n)
        })
        .unwrap();
        assert!(compare_grad_tables(&analytic, &numeric).max_rel_err <= 1e-5);
        assert!(compare_grad_tables(&corrupted, &numeric).max_rel_err > 1e-2);
    }

    #[test]
    fn zscore_without_a_state_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let policy = rand_policy(3, &mut rng);
        let rec = rand_rec(3, &mut rng);
        let cfg = LmpoConfig::default();
        assert!(matches!(
            assemble_lmpo_grad(&policy, &rec, &cfg, None),
            Err(Error::UninitializedNorm)
        ));
        let uninit = EmaNormState::default();
        assert!(matches!(
            assemble_lmpo_grad(&policy, &rec, &cfg, Some(&uninit)),
            Err(Error::UninitializedNorm)
        ));
    }

    #[test]
    fn grad_check_rejects_an_empty_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let policy = rand_policy(3, &mut rng);
        assert!(grad_check(
            &policy,
            None,
            &[],
            &LossConfig::Simpo(SimpoConfig::default()),
            None,
            FD_STEP
        )
        .is_err());
    }

    #[test]
    fn report_line_has_the_contract_shape() {
        let report = GradReport {
            max_abs_err: 1.25e-9,
            max_rel_err: 3.5e-7,
            n_params_checked: 16,
            analytic_norm: 1.0,
            numeric_norm: 1.0,
        };
        assert_eq!(
            report.to_string(),
            "max_abs_err=1.25e-9 max_rel_err=3.5e-7 n=16"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn dloss_dd_stays_in_the_open_unit_interval(
            d in -30.0..30.0f64,
            log_h in -5.0..5.0f64,
        ) {
            let v = dloss_dd(d, log_h);
            prop_assert!(v > -1.0 && v < 0.0);
        }

        #[test]
        fn margin_coefficients_match_scalar_finite_differences(
            p_w in 0.01..0.99f64,
            p_l in 0.01..0.99f64,
            alpha in 0.5..4.0f64,
            temp in 0.3..3.0f64,
        ) {
            // c_w and c_l are ∂m/∂p_w and ∂m/∂p_l; check them against
            // central differences of the scalar margin functions.
            use crate::losses::{margin_cube, margin_log, margin_power5, margin_sigmoid};
            let h = 1e-6;
            let cases: [(MarginVariant, Box<dyn Fn(f64, f64) -> f64>); 4] = [
                (MarginVariant::Power5, Box::new(margin_power5)),
                (MarginVariant::Cube, Box::new(margin_cube)),
                (MarginVariant::Log, Box::new(move |w, l| margin_log(w, l, alpha))),
                (MarginVariant::Sigmoid, Box::new(move |w, l| margin_sigmoid(w, l, temp))),
            ];
            for (variant, f) in cases {
                let (c_w, c_l) = variant_coeffs(p_w, p_l, variant, alpha, temp);
                let num_w = (f(p_w + h, p_l) - f(p_w - h, p_l)) / (2.0 * h);
                let num_l = (f(p_w, p_l + h) - f(p_w, p_l - h)) / (2.0 * h);
                prop_assert!((c_w - num_w).abs() < 1e-6, "{variant:?} c_w {c_w} vs {num_w}");
                prop_assert!((c_l - num_l).abs() < 1e-6, "{variant:?} c_l {c_l} vs {num_l}");
            }
        }
    }
}
