//! Running Z-score normalization of the pair margin.
//!
//! Mean and std are exponential moving averages over *batch* statistics,
//! updated once per training step and treated as constants by the gradient
//! (hard stop-gradient):
//!
//! ```text
//! a_{t+1} = γ·a_t + (1 − γ)·μ_batch        (population μ, σ)
//! b_{t+1} = max(γ·b_t + (1 − γ)·σ_batch, ε)
//! m̄ = (m − a) / b,        dm̄/dm = 1/b exactly
//! ```
//!
//! The first batch initializes the state directly (no zero-bias warmup), so
//! the very first normalized batch is already centered. The std floor `ε`
//! keeps constant-margin batches from dividing by zero.

use crate::{Error, Result};

pub const DEFAULT_DECAY: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// EMA mean/std of batch margins, with stop-gradient semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaNormState {
    ema_mean: f64,
    ema_std: f64,
    ema_decay: f64,
    epsilon: f64,
    initialized: bool,
    step: u64,
}

impl EmaNormState {
    pub fn new(ema_decay: f64, epsilon: f64) -> Result<Self> {
        if !(ema_decay > 0.0 && ema_decay < 1.0) {
            return Err(Error::InvalidInput(format!(
                "EMA decay must lie strictly inside (0, 1), got {ema_decay}"
            )));
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidInput(format!(
                "std floor must be a positive finite number, got {epsilon}"
            )));
        }
        Ok(EmaNormState {
            ema_mean: 0.0,
            ema_std: 0.0,
            ema_decay,
            epsilon,
            initialized: false,
            step: 0,
        })
    }

    /// Reconstructs a previously serialized state (e.g. from a checkpoint).
    pub fn from_parts(ema_mean: f64, ema_std: f64, ema_decay: f64, step: u64) -> Result<Self> {
        let mut state = Self::new(ema_decay, DEFAULT_EPSILON)?;
        if !ema_mean.is_finite() || !ema_std.is_finite() {
            return Err(Error::NonFinite {
                what: "normalizer statistics".to_string(),
            });
        }
        if ema_std < state.epsilon {
            return Err(Error::InvalidInput(format!(
                "serialized ema_std {ema_std} is below the floor {}",
                state.epsilon
            )));
        }
        state.ema_mean = ema_mean;
        state.ema_std = ema_std;
        state.initialized = true;
        state.step = step;
        Ok(state)
    }

    /// Folds one batch of raw margins into the running statistics.
    pub fn update(&mut self, batch_margins: &[f64]) -> Result<()> {
        if batch_margins.is_empty() {
            return Err(Error::InvalidInput(
                "normalizer update requires a non-empty batch".to_string(),
            ));
        }
        if !batch_margins.iter().all(|m| m.is_finite()) {
            return Err(Error::NonFinite {
                what: "batch margin".to_string(),
            });
        }
        let n = batch_margins.len() as f64;
        let mean = batch_margins.iter().sum::<f64>() / n;
        let var = batch_margins.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if self.initialized {
            self.ema_mean = self.ema_decay * self.ema_mean + (1.0 - self.ema_decay) * mean;
            self.ema_std = self.ema_decay * self.ema_std + (1.0 - self.ema_decay) * std;
        } else {
            self.ema_mean = mean;
            self.ema_std = std;
            self.initialized = true;
        }
        self.ema_std = self.ema_std.max(self.epsilon);
        self.step += 1;
        Ok(())
    }

    /// `(m − mean)/std`; the statistics are detached, so the derivative with
    /// respect to `m` is exactly [`inv_std`](Self::inv_std).
    pub fn normalize(&self, m: f64) -> Result<f64> {
        if !self.initialized {
            return Err(Error::UninitializedNorm);
        }
        Ok((m - self.ema_mean) / self.ema_std)
    }

    /// The slope `1/ema_std` of [`normalize`](Self::normalize).
    pub fn inv_std(&self) -> Result<f64> {
        if !self.initialized {
            return Err(Error::UninitializedNorm);
        }
        Ok(1.0 / self.ema_std)
    }

    pub fn mean(&self) -> f64 {
        self.ema_mean
    }

    pub fn std(&self) -> f64 {
        self.ema_std
    }

    pub fn decay(&self) -> f64 {
        self.ema_decay
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }
}

impl Default for EmaNormState {
    fn default() -> Self {
        Self::new(DEFAULT_DECAY, DEFAULT_EPSILON).expect("default constants are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_batch_initializes_to_population_statistics() {
        let mut s = EmaNormState::default();
        assert!(!s.is_initialized());
        s.update(&[0.2, 0.4]).unwrap();
        assert!(s.is_initialized());
        assert!((s.mean() - 0.3).abs() < 1e-12);
        assert!((s.std() - 0.1).abs() < 1e-12);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn later_batches_blend_with_decay() {
        // From (mean 0, std 1), a batch with μ = 1, σ = 1 at decay 0.9
        // moves the mean to 0.1 and leaves the std at 1.
        let mut s = EmaNormState::from_parts(0.0, 1.0, 0.9, 1).unwrap();
        s.update(&[0.0, 2.0]).unwrap();
        assert!((s.mean() - 0.1).abs() < 1e-12);
        assert!((s.std() - 1.0).abs() < 1e-12);
        assert_eq!(s.step(), 2);
    }

    #[test]
    fn constant_first_batch_floors_the_std() {
        let mut s = EmaNormState::default();
        s.update(&[0.7, 0.7, 0.7]).unwrap();
        assert_eq!(s.std(), DEFAULT_EPSILON);
        assert!((s.mean() - 0.7).abs() < 1e-12);
        // normalize stays finite right at the floor.
        assert!(s.normalize(0.8).unwrap().is_finite());
    }

    #[test]
    fn update_rejects_bad_batches() {
        let mut s = EmaNormState::default();
        assert!(matches!(s.update(&[]), Err(Error::InvalidInput(_))));
        assert!(matches!(
            s.update(&[0.1, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn normalize_examples() {
        let s = EmaNormState::from_parts(0.3, 0.1, 0.9, 5).unwrap();
        assert_eq!(s.normalize(0.3).unwrap(), 0.0);
        assert!((s.normalize(0.4).unwrap() - 1.0).abs() < 1e-12);
        assert!((s.inv_std().unwrap() - 10.0).abs() < 1e-9);
        let uninit = EmaNormState::default();
        assert!(matches!(uninit.normalize(0.5), Err(Error::UninitializedNorm)));
        assert!(matches!(uninit.inv_std(), Err(Error::UninitializedNorm)));
    }

    #[test]
    fn identical_batches_converge_geometrically() {
        let batch = [0.1, 0.5, 0.9];
        let mean = 0.5;
        let mut s = EmaNormState::from_parts(3.0, 2.0, 0.9, 1).unwrap();
        let mut prev_gap = (s.mean() - mean).abs();
        for _ in 0..200 {
            s.update(&batch).unwrap();
            let gap = (s.mean() - mean).abs();
            assert!(gap <= prev_gap * 0.9 + 1e-15);
            prev_gap = gap;
        }
        assert!((s.mean() - mean).abs() < 1e-8);
        assert!(s.normalize(mean).unwrap().abs() < 1e-7);
        let batch_std = (batch.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!((s.std() - batch_std).abs() < 1e-8);
    }

    #[test]
    fn invalid_constructor_arguments_are_rejected() {
        assert!(EmaNormState::new(0.0, 1e-8).is_err());
        assert!(EmaNormState::new(1.0, 1e-8).is_err());
        assert!(EmaNormState::new(0.9, 0.0).is_err());
        assert!(EmaNormState::from_parts(0.0, 0.0, 0.9, 1).is_err());
        assert!(EmaNormState::from_parts(f64::NAN, 1.0, 0.9, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn normalize_is_translation_invariant(
            mean in -5.0..5.0f64,
            std in 0.01..4.0f64,
            m in -5.0..5.0f64,
            c in -10.0..10.0f64,
        ) {
            let s = EmaNormState::from_parts(mean, std, 0.9, 1).unwrap();
            let shifted = EmaNormState::from_parts(mean + c, std, 0.9, 1).unwrap();
            let a = s.normalize(m).unwrap();
            let b = shifted.normalize(m + c).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn normalize_preserves_margin_order(
            mean in -5.0..5.0f64,
            std in 0.01..4.0f64,
            m1 in -5.0..5.0f64,
            gap in 1e-9..5.0f64,
        ) {
            let s = EmaNormState::from_parts(mean, std, 0.9, 1).unwrap();
            prop_assert!(s.normalize(m1 + gap).unwrap() > s.normalize(m1).unwrap());
        }

        #[test]
        fn std_never_drops_below_the_floor(
            batches in proptest::collection::vec(
                proptest::collection::vec(-2.0..2.0f64, 1..6), 1..20),
            decay in 0.05..0.95f64,
        ) {
            let mut s = EmaNormState::new(decay, DEFAULT_EPSILON).unwrap();
            for (i, batch) in batches.iter().enumerate() {
                s.update(batch).unwrap();
                prop_assert!(s.std() >= DEFAULT_EPSILON);
                prop_assert_eq!(s.step(), i as u64 + 1);
            }
        }
    }
}
