//! Warmup-stable-decay learning rate, batch-size ramp, annealing switches
//! and compute scaling advisors.
//!
//! The decay phase uses an inverse-proportional curve in the normalised
//! decay progress `tau`:
//!
//! ```text
//! lr(tau) = peak / (1 + (1 / final_ratio - 1) * tau)
//! ```
//!
//! which equals `peak` at `tau = 0` and `final_ratio * peak` at `tau = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchRamp {
    pub start_tokens: u64,
    pub end_tokens: u64,
    /// Tokens seen over which the batch grows linearly.
    pub ramp_tokens: u64,
    pub seq_len: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub decay_fraction: f64,
    pub final_ratio: f64,
    pub batch_ramp: BatchRamp,
    pub wd_main: f64,
    pub wd_anneal: f64,
    pub mtp_alpha_main: f64,
    pub mtp_alpha_anneal: f64,
}

impl Default for BatchRamp {
    fn default() -> Self {
        ScheduleConfig::default().batch_ramp
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::reference(DEFAULT_TOTAL_STEPS)
    }
}

pub const DEFAULT_TOTAL_STEPS: u64 = 100_000;

impl ScheduleConfig {
    /// Published 7B recipe; the batch ramp goes from 1M to 2M tokens over the
    /// first half of the token budget implied by `total_steps` at 2M tokens.
    pub fn reference(total_steps: u64) -> Self {
        Self {
            peak_lr: 2e-4,
            warmup_steps: 2000,
            total_steps,
            decay_fraction: 0.10,
            final_ratio: 0.10,
            batch_ramp: BatchRamp {
                start_tokens: 1 << 20,
                end_tokens: 2 << 20,
                ramp_tokens: total_steps.saturating_mul(1 << 20),
                seq_len: 4096,
            },
            wd_main: 0.1,
            wd_anneal: 0.033,
            mtp_alpha_main: 0.2,
            mtp_alpha_anneal: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return fail(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if !(self.final_ratio > 0.0 && self.final_ratio <= 1.0) {
            return fail(format!("final_ratio {} outside (0, 1]", self.final_ratio));
        }
        if !(self.decay_fraction > 0.0 && self.decay_fraction < 1.0) {
            return fail(format!("decay_fraction {} outside (0, 1)", self.decay_fraction));
        }
        if (self.warmup_steps as f64) >= (1.0 - self.decay_fraction) * self.total_steps as f64 {
            return fail(format!(
                "warmup_steps {} must be below the stable/decay split at {} of {} steps",
                self.warmup_steps,
                1.0 - self.decay_fraction,
                self.total_steps
            ));
        }
        if self.decay_start() >= self.total_steps {
            return fail("decay phase is empty".into());
        }
        let r = &self.batch_ramp;
        if r.seq_len == 0 || r.start_tokens < r.seq_len || r.end_tokens < r.start_tokens {
            return fail("batch ramp needs seq_len <= start_tokens <= end_tokens".into());
        }
        Ok(())
    }

    /// First step of the decay (annealing) phase.
    pub fn decay_start(&self) -> u64 {
        if self.total_steps == 0 {
            return 0;
        }
        let decay_steps = (self.decay_fraction * self.total_steps as f64).round() as u64;
        self.total_steps - decay_steps.clamp(1, self.total_steps)
    }

    pub fn phase(&self, step: u64) -> Phase {
        if step < self.warmup_steps {
            Phase::Warmup
        } else if step <= self.decay_start() {
            Phase::Stable
        } else {
            Phase::Decay
        }
    }

    /// Evaluates one phase's formula at a (possibly fractional) step. The
    /// schedule itself selects the phase with [`Self::phase`].
    pub fn phase_lr(&self, phase: Phase, t: f64) -> f64 {
        match phase {
            Phase::Warmup => self.peak_lr * t / self.warmup_steps as f64,
            Phase::Stable => self.peak_lr,
            Phase::Decay => {
                let start = self.decay_start() as f64;
                let tau = (t - start) / (self.total_steps as f64 - start);
                self.peak_lr / (1.0 + (1.0 / self.final_ratio - 1.0) * tau)
            }
        }
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::invalid(format!("step {step} beyond total_steps {}", self.total_steps)));
        }
        Ok(self.phase_lr(self.phase(step), step as f64))
    }

    pub fn batch_size_at(&self, tokens_seen: u64) -> u64 {
        let r = &self.batch_ramp;
        let raw = if tokens_seen >= r.ramp_tokens || r.ramp_tokens == 0 {
            r.end_tokens as f64
        } else {
            let f = tokens_seen as f64 / r.ramp_tokens as f64;
            r.start_tokens as f64 + f * (r.end_tokens - r.start_tokens) as f64
        };
        let rounded = (raw as u64 / r.seq_len) * r.seq_len;
        rounded.max(r.seq_len)
    }

    pub fn stage_at(&self, step: u64) -> AnnealStage {
        if step < self.decay_start() {
            AnnealStage::Main
        } else {
            AnnealStage::Anneal
        }
    }

    /// `(weight_decay, mtp_alpha)` for a stage.
    pub fn anneal_params(&self, stage: AnnealStage) -> (f64, f64) {
        match stage {
            AnnealStage::Main => (self.wd_main, self.mtp_alpha_main),
            AnnealStage::Anneal => (self.wd_anneal, self.mtp_alpha_anneal),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Stable,
    Decay,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnealStage {
    Main,
    Anneal,
}

impl std::str::FromStr for AnnealStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "main" => Ok(AnnealStage::Main),
            "anneal" => Ok(AnnealStage::Anneal),
            other => Err(Error::invalid(format!("unknown stage {other:?}"))),
        }
    }
}

pub const LR_COMPUTE_EXPONENT: f64 = -0.125;
pub const VOCAB_COMPUTE_EXPONENT: f64 = 0.42;

/// Compute ratio between two runs with compute proportional to params x tokens.
pub fn compute_ratio(params_from: f64, tokens_from: f64, params_to: f64, tokens_to: f64) -> Result<f64> {
    let from = params_from * tokens_from;
    let to = params_to * tokens_to;
    if !(from > 0.0 && to > 0.0 && from.is_finite() && to.is_finite()) {
        return Err(Error::invalid("parameter and token counts must be positive"));
    }
    Ok(to / from)
}

/// Optimal learning rate multiplier, `ratio^-0.125`.
pub fn lr_scale_factor(compute_ratio: f64) -> Result<f64> {
    positive(compute_ratio)?;
    Ok(compute_ratio.powf(LR_COMPUTE_EXPONENT))
}

/// Non-vocabulary parameter growth, `ratio^0.42`.
pub fn vocab_scale_factor(compute_ratio: f64) -> Result<f64> {
    positive(compute_ratio)?;
    Ok(compute_ratio.powf(VOCAB_COMPUTE_EXPONENT))
}

fn positive(r: f64) -> Result<()> {
    if r > 0.0 && r.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("compute ratio {r} must be positive")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_origin_and_peak() {
        let c = ScheduleConfig::reference(100_000);
        c.validate().unwrap();
        assert_eq!(c.lr_at(0).unwrap(), 0.0);
        assert_eq!(c.lr_at(2000).unwrap(), 2.0e-4);
        assert_eq!(c.lr_at(50_000).unwrap(), 2.0e-4);
    }

    #[test]
    fn decay_endpoint_and_midpoint() {
        let c = ScheduleConfig::reference(100_000);
        let end = c.lr_at(100_000).unwrap();
        assert!((end - 2.0e-5).abs() <= 1e-12 * 2.0e-5);
        // tau = 0.5 -> peak / 5.5
        assert_eq!(c.decay_start(), 90_000);
        let mid = c.lr_at(95_000).unwrap();
        assert!((mid - 3.636_363_636_363_636e-5).abs() < 1e-18);
    }

    #[test]
    fn out_of_range_step() {
        assert!(ScheduleConfig::reference(100_000).lr_at(100_001).is_err());
    }

    #[test]
    fn validation() {
        let mut c = ScheduleConfig::reference(2000);
        assert!(c.validate().is_err());
        c = ScheduleConfig::reference(100_000);
        c.final_ratio = 0.0;
        assert!(c.validate().is_err());
        c.final_ratio = 0.1;
        c.decay_fraction = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn batch_ramp() {
        let mut c = ScheduleConfig::reference(100_000);
        c.batch_ramp = BatchRamp { start_tokens: 1_000_000, end_tokens: 2_000_000, ramp_tokens: 1_000_000_000, seq_len: 4096 };
        assert_eq!(c.batch_size_at(0), 1_000_000 / 4096 * 4096);
        assert_eq!(c.batch_size_at(1_000_000_000), 2_000_000 / 4096 * 4096);
        assert_eq!(c.batch_size_at(u64::MAX), 2_000_000 / 4096 * 4096);
        // midpoint 1.5M -> 366 windows
        assert_eq!(c.batch_size_at(500_000_000), 366 * 4096);
    }

    #[test]
    fn anneal_switches() {
        let c = ScheduleConfig::reference(100_000);
        assert_eq!(c.anneal_params(AnnealStage::Main), (0.1, 0.2));
        assert_eq!(c.anneal_params(AnnealStage::Anneal), (0.033, 0.1));
        assert_eq!(c.stage_at(89_999), AnnealStage::Main);
        assert_eq!(c.stage_at(90_000), AnnealStage::Anneal);
        let mut custom = c;
        custom.wd_anneal = 0.01;
        custom.mtp_alpha_anneal = 0.05;
        assert_eq!(custom.anneal_params(AnnealStage::Anneal), (0.01, 0.05));
    }

    #[test]
    fn advisors() {
        assert_eq!(lr_scale_factor(1.0).unwrap(), 1.0);
        assert_eq!(vocab_scale_factor(1.0).unwrap(), 1.0);
        let r = compute_ratio(1.8e9, 1e11, 7e9, 2e12).unwrap();
        assert!((r - 77.777_777_777_777_78).abs() < 1e-9);
        assert!((lr_scale_factor(r).unwrap() - 0.57).abs() <= 0.02);
        assert!((vocab_scale_factor(r).unwrap() - 6.3).abs() <= 0.15);
        assert!((lr_scale_factor(2.0).unwrap() - 0.917_004_043_204_671_2).abs() < 1e-12);
        assert!((vocab_scale_factor(10.0).unwrap() - 2.630_267_991_895_382).abs() < 1e-12);
        assert!(lr_scale_factor(0.0).is_err());
        assert!(vocab_scale_factor(-1.0).is_err());
    }
}
