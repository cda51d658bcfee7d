//! Tabular bigram policy: the sole trainable object.
//!
//! The policy is a dense `V × V` table of logits; row `c` parameterizes the
//! categorical distribution over the next token given previous token `c`. A
//! prompt enters scoring only through its last token, which seeds the context
//! chain:
//!
//! ```text
//! log π(y | x) = Σ_t log softmax(logits[c_{t-1}])[y_t],    c_0 = last token of x
//! ```
//!
//! Token id [`END_TOKEN`] is reserved as the end-of-sequence marker for
//! [`BigramPolicy::sample`]; scoring treats it as an ordinary token, so given
//! responses need not end with it.
//!
//! All arithmetic is double precision: the finite-difference tolerances used
//! to certify gradients live below `1e-5` and would drown in `f32` noise.

use rand::Rng;

use crate::{Error, Result};

/// Reserved end-of-sequence token id; sampling stops after emitting it.
pub const END_TOKEN: u32 = 0;

/// An ordered sequence of token ids (a prompt or a response).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    tokens: Vec<u32>,
}

impl TokenSeq {
    pub fn new(tokens: Vec<u32>) -> Self {
        TokenSeq { tokens }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn last(&self) -> Option<u32> {
        self.tokens.last().copied()
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(tokens: Vec<u32>) -> Self {
        TokenSeq::new(tokens)
    }
}

/// The gradient of a scalar with respect to every policy logit; same shape as
/// the logit table.
///
/// For the gradient of any single-token log-probability, the row of the
/// active context sums to 0 (softmax gradient identity), so tables built from
/// such terms have zero row sums up to rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTable {
    vocab_size: usize,
    values: Vec<f64>,
}

impl GradTable {
    pub fn zeros(vocab_size: usize) -> Self {
        GradTable {
            vocab_size,
            values: vec![0.0; vocab_size * vocab_size],
        }
    }

    /// Builds a table from row-major values; panics on a shape mismatch.
    pub fn from_values(vocab_size: usize, values: Vec<f64>) -> Self {
        assert_eq!(
            values.len(),
            vocab_size * vocab_size,
            "gradient table needs exactly V² values"
        );
        GradTable { vocab_size, values }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Number of entries, i.e. `V²`.
    pub fn n_params(&self) -> usize {
        self.values.len()
    }

    pub fn value(&self, ctx: u32, tok: u32) -> f64 {
        self.values[ctx as usize * self.vocab_size + tok as usize]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, ctx: u32) -> &[f64] {
        let start = ctx as usize * self.vocab_size;
        &self.values[start..start + self.vocab_size]
    }

    /// `self += coeff * other`, entrywise.
    pub fn scaled_add(&mut self, coeff: f64, other: &GradTable) {
        assert_eq!(
            self.vocab_size, other.vocab_size,
            "gradient tables must share a vocabulary size"
        );
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            *dst += coeff * src;
        }
    }

    pub fn scale(&mut self, coeff: f64) {
        for v in &mut self.values {
            *v *= coeff;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// A `V × V` table of next-token logits, trained by gradient descent.
#[derive(Debug, Clone, PartialEq)]
pub struct BigramPolicy {
    vocab_size: usize,
    logits: Vec<f64>,
}

impl BigramPolicy {
    /// The all-zero (uniform) policy.
    pub fn zeros(vocab_size: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::InvalidInput(format!(
                "vocabulary size must be at least 2, got {vocab_size}"
            )));
        }
        Ok(BigramPolicy {
            vocab_size,
            logits: vec![0.0; vocab_size * vocab_size],
        })
    }

    /// Builds a policy from a row-major `V × V` logit table.
    pub fn from_logits(vocab_size: usize, logits: Vec<f64>) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::InvalidInput(format!(
                "vocabulary size must be at least 2, got {vocab_size}"
            )));
        }
        if logits.len() != vocab_size * vocab_size {
            return Err(Error::InvalidInput(format!(
                "expected {} logits for vocabulary of {}, got {}",
                vocab_size * vocab_size,
                vocab_size,
                logits.len()
            )));
        }
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                what: "logit table entry".to_string(),
            });
        }
        Ok(BigramPolicy { vocab_size, logits })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Mutable access to the raw logits, used by finite-difference probing
    /// and by tests that construct specific tables in place.
    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn row(&self, ctx: u32) -> &[f64] {
        let start = ctx as usize * self.vocab_size;
        &self.logits[start..start + self.vocab_size]
    }

    /// Log-probabilities of every next token given context `ctx`, via the
    /// max-subtracted (overflow-free) log-softmax.
    pub fn log_softmax_row(&self, ctx: u32) -> Vec<f64> {
        let row = self.row(ctx);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        row.iter().map(|&v| v - lse).collect()
    }

    fn check_tokens(&self, seq: &TokenSeq) -> Result<()> {
        for &t in seq.tokens() {
            if t as usize >= self.vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: self.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn check_pair(&self, prompt: &TokenSeq, response: &TokenSeq) -> Result<()> {
        if prompt.is_empty() {
            return Err(Error::InvalidInput(
                "prompt must be non-empty: its last token is the initial context".to_string(),
            ));
        }
        if response.is_empty() {
            return Err(Error::InvalidInput(
                "response must be non-empty".to_string(),
            ));
        }
        self.check_tokens(prompt)?;
        self.check_tokens(response)
    }

    /// Total log-probability `log π(response | prompt)`; always ≤ 0.
    pub fn seq_logprob(&self, prompt: &TokenSeq, response: &TokenSeq) -> Result<f64> {
        self.check_pair(prompt, response)?;
        let mut ctx = prompt.last().expect("prompt checked non-empty");
        let mut total = 0.0;
        for &tok in response.tokens() {
            let logp = self.log_softmax_row(ctx);
            total += logp[tok as usize];
            ctx = tok;
        }
        Ok(total)
    }

    /// Per-token average `log π(response | prompt) / |response|`.
    pub fn avg_logprob(&self, prompt: &TokenSeq, response: &TokenSeq) -> Result<f64> {
        Ok(self.seq_logprob(prompt, response)? / response.len() as f64)
    }

    /// Analytic gradient of [`seq_logprob`](Self::seq_logprob) with respect
    /// to every logit: each step with context `c` and observed token `v`
    /// adds `one_hot(v) − softmax(logits[c])` to row `c`.
    pub fn grad_seq_logprob(&self, prompt: &TokenSeq, response: &TokenSeq) -> Result<GradTable> {
        self.check_pair(prompt, response)?;
        let mut grad = GradTable::zeros(self.vocab_size);
        let mut ctx = prompt.last().expect("prompt checked non-empty");
        for &tok in response.tokens() {
            let logp = self.log_softmax_row(ctx);
            let row_start = ctx as usize * self.vocab_size;
            for (v, lp) in logp.iter().enumerate() {
                grad.values[row_start + v] -= lp.exp();
            }
            grad.values[row_start + tok as usize] += 1.0;
            ctx = tok;
        }
        Ok(grad)
    }

    /// Ancestral sampling from the bigram conditional, starting at the last
    /// prompt token. Stops after emitting [`END_TOKEN`] or reaching
    /// `max_len`; the end token, if emitted, is included in the result, so
    /// the returned length is always in `1..=max_len`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        prompt: &TokenSeq,
        max_len: usize,
        rng: &mut R,
    ) -> Result<TokenSeq> {
        if max_len == 0 {
            return Err(Error::InvalidInput(
                "sampling requires max_len ≥ 1".to_string(),
            ));
        }
        if prompt.is_empty() {
            return Err(Error::InvalidInput(
                "prompt must be non-empty: its last token is the initial context".to_string(),
            ));
        }
        self.check_tokens(prompt)?;
        let mut ctx = prompt.last().expect("prompt checked non-empty");
        let mut out = Vec::new();
        for _ in 0..max_len {
            let tok = self.sample_token(ctx, rng);
            out.push(tok);
            if tok == END_TOKEN {
                break;
            }
            ctx = tok;
        }
        Ok(TokenSeq::new(out))
    }

    fn sample_token<R: Rng + ?Sized>(&self, ctx: u32, rng: &mut R) -> u32 {
        let logp = self.log_softmax_row(ctx);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (v, lp) in logp.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                return v as u32;
            }
        }
        // Rounding can leave acc a hair under 1; fall back to the last token.
        (self.vocab_size - 1) as u32
    }

    /// One gradient-descent update: `logits -= lr * grad`.
    pub fn gradient_step(&mut self, grad: &GradTable, lr: f64) {
        assert_eq!(
            self.vocab_size,
            grad.vocab_size(),
            "gradient table must match the policy's vocabulary size"
        );
        for (dst, g) in self.logits.iter_mut().zip(grad.values()) {
            *dst -= lr * g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(tokens: &[u32]) -> TokenSeq {
        TokenSeq::new(tokens.to_vec())
    }

    #[test]
    fn uniform_policy_scores_minus_log_v_per_token() {
        let p = BigramPolicy::zeros(2).unwrap();
        let lp = p.seq_logprob(&seq(&[0]), &seq(&[1, 0, 1])).unwrap();
        assert!((lp - (-3.0 * 2f64.ln())).abs() < 1e-12, "got {lp}");

        let p4 = BigramPolicy::zeros(4).unwrap();
        let lp4 = p4.seq_logprob(&seq(&[2]), &seq(&[3])).unwrap();
        assert!((lp4 - (-(4f64.ln()))).abs() < 1e-12);
    }

    #[test]
    fn seq_logprob_matches_direct_softmax_arithmetic() {
        // Row 0 logits (2, 0): P(0 | 0) = e² / (e² + 1), so a one-token
        // response (0) after a prompt ending in 0 scores 2 − ln(e² + 1).
        let mut p = BigramPolicy::zeros(2).unwrap();
        p.logits_mut()[0] = 2.0;
        let lp = p.seq_logprob(&seq(&[0]), &seq(&[0])).unwrap();
        let expected = 2.0 - (2f64.exp() + 1.0).ln();
        assert!((lp - expected).abs() < 1e-12);
        assert!((lp - (-0.126928)).abs() < 1e-6);
    }

    #[test]
    fn seq_logprob_two_step_known_rows() {
        // Both rows (0, ln 3): P(token 1) = 3/4 from either context, so the
        // response (1, 1) scores 2·ln(3/4).
        let ln3 = 3f64.ln();
        let p = BigramPolicy::from_logits(2, vec![0.0, ln3, 0.0, ln3]).unwrap();
        let lp = p.seq_logprob(&seq(&[0]), &seq(&[1, 1])).unwrap();
        assert!((lp - 2.0 * 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn avg_logprob_divides_by_length() {
        let p = BigramPolicy::zeros(2).unwrap();
        let avg = p.avg_logprob(&seq(&[0]), &seq(&[1, 0, 1])).unwrap();
        assert!((avg - (-(2f64.ln()))).abs() < 1e-12);
        // Uniform policy: average is −log V regardless of length.
        for len in 1..6 {
            let resp = seq(&vec![1; len]);
            let a = p.avg_logprob(&seq(&[0]), &resp).unwrap();
            assert!((a - (-(2f64.ln()))).abs() < 1e-12);
        }
        // Length-1 response: average equals the total.
        let one = p.seq_logprob(&seq(&[0]), &seq(&[1])).unwrap();
        assert_eq!(one, p.avg_logprob(&seq(&[0]), &seq(&[1])).unwrap());
    }

    #[test]
    fn seq_logprob_rejects_bad_input() {
        let p = BigramPolicy::zeros(4).unwrap();
        assert!(matches!(
            p.seq_logprob(&seq(&[1]), &seq(&[4])),
            Err(Error::TokenOutOfRange { token: 4, vocab: 4 })
        ));
        assert!(matches!(
            p.seq_logprob(&seq(&[]), &seq(&[1])),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            p.seq_logprob(&seq(&[1]), &seq(&[])),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn from_logits_validates_shape_and_finiteness() {
        assert!(BigramPolicy::from_logits(2, vec![0.0; 3]).is_err());
        assert!(BigramPolicy::from_logits(1, vec![0.0]).is_err());
        assert!(matches!(
            BigramPolicy::from_logits(2, vec![0.0, f64::NAN, 0.0, 0.0]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn grad_one_step_at_uniform_is_half_minus_half() {
        // One step, context 0, observed token 0, uniform policy:
        // one_hot(0) − (0.5, 0.5) = (0.5, −0.5).
        let p = BigramPolicy::zeros(2).unwrap();
        let g = p.grad_seq_logprob(&seq(&[0]), &seq(&[0])).unwrap();
        assert!((g.value(0, 0) - 0.5).abs() < 1e-12);
        assert!((g.value(0, 1) + 0.5).abs() < 1e-12);
        assert_eq!(g.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn grad_rows_sum_to_zero() {
        let p = BigramPolicy::from_logits(3, vec![0.3, -1.2, 0.7, 2.0, 0.0, -0.5, 0.1, 0.1, 0.9])
            .unwrap();
        let g = p
            .grad_seq_logprob(&seq(&[2]), &seq(&[0, 1, 1, 2, 0]))
            .unwrap();
        for ctx in 0..3 {
            let s: f64 = g.row(ctx).iter().sum();
            assert!(s.abs() < 1e-12, "row {ctx} sums to {s}");
        }
    }

    #[test]
    fn grad_matches_central_finite_differences() {
        let p = BigramPolicy::from_logits(
            4,
            vec![
                0.5, -0.3, 1.1, 0.0, -0.7, 0.2, 0.2, -1.5, 0.9, 0.4, -0.6, 0.3, 0.0, 1.3, -0.2,
                0.8,
            ],
        )
        .unwrap();
        let prompt = seq(&[3]);
        let response = seq(&[0, 2, 2, 1, 3, 0]);
        let analytic = p.grad_seq_logprob(&prompt, &response).unwrap();
        let h = 1e-5;
        for idx in 0..16 {
            let mut plus = p.clone();
            plus.logits_mut()[idx] += h;
            let mut minus = p.clone();
            minus.logits_mut()[idx] -= h;
            let numeric = (plus.seq_logprob(&prompt, &response).unwrap()
                - minus.seq_logprob(&prompt, &response).unwrap())
                / (2.0 * h);
            let a = analytic.values()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            assert!(rel <= 1e-7, "entry {idx}: analytic {a}, numeric {numeric}");
        }
    }

    #[test]
    fn sample_stops_on_forced_end_token() {
        // Row entries push all mass onto token 0 from every context.
        let mut p = BigramPolicy::zeros(3).unwrap();
        for ctx in 0..3u32 {
            p.logits_mut()[ctx as usize * 3] = 50.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = p.sample(&seq(&[1]), 20, &mut rng).unwrap();
        assert_eq!(s.tokens(), &[END_TOKEN]);
    }

    #[test]
    fn sample_respects_max_len_cap() {
        // All mass on token 1: the end token never fires.
        let mut p = BigramPolicy::zeros(3).unwrap();
        for ctx in 0..3u32 {
            p.logits_mut()[ctx as usize * 3 + 1] = 50.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = p.sample(&seq(&[0]), 7, &mut rng).unwrap();
        assert_eq!(s.len(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s1 = p.sample(&seq(&[0]), 1, &mut rng).unwrap();
        assert_eq!(s1.len(), 1);
    }

    #[test]
    fn sample_is_deterministic_per_seed() {
        let p = BigramPolicy::from_logits(3, vec![0.1, 0.4, -0.3, 0.9, -1.0, 0.0, 0.2, 0.2, 0.2])
            .unwrap();
        let a = p
            .sample(&seq(&[2]), 16, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let b = p
            .sample(&seq(&[2]), 16, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            p.sample(&seq(&[2]), 0, &mut ChaCha8Rng::seed_from_u64(9)),
            Err(Error::InvalidInput(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn row_probabilities_sum_to_one(
            logits in proptest::collection::vec(-6.0..6.0f64, 9),
            ctx in 0u32..3,
        ) {
            let p = BigramPolicy::from_logits(3, logits).unwrap();
            let total: f64 = p.log_softmax_row(ctx).iter().map(|lp| lp.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn seq_logprob_is_nonpositive(
            logits in proptest::collection::vec(-6.0..6.0f64, 9),
            tokens in proptest::collection::vec(0u32..3, 1..8),
            start in 0u32..3,
        ) {
            let p = BigramPolicy::from_logits(3, logits).unwrap();
            let lp = p.seq_logprob(&TokenSeq::new(vec![start]), &TokenSeq::new(tokens)).unwrap();
            prop_assert!(lp <= 0.0);
        }

        #[test]
        fn grad_row_sums_vanish_on_random_instances(
            logits in proptest::collection::vec(-4.0..4.0f64, 16),
            tokens in proptest::collection::vec(0u32..4, 1..10),
            start in 0u32..4,
        ) {
            let p = BigramPolicy::from_logits(4, logits).unwrap();
            let g = p.grad_seq_logprob(&TokenSeq::new(vec![start]), &TokenSeq::new(tokens)).unwrap();
            for ctx in 0..4 {
                let s: f64 = g.row(ctx).iter().sum();
                prop_assert!(s.abs() < 1e-9);
            }
        }
    }
}
