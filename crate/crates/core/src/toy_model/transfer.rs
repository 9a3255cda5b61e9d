//! Synthetic bilingual transfer probe.
//!
//! Two "languages" share one set of words: word `w` is token `first_word + w`
//! in the high-resource language and `first_word + words + w` in the
//! low-resource one. Every sequence holds high-resource filler, one passage
//! and that passage's low-resource translation in the next document. Under
//! full causal attention the translation can be read off the preceding
//! passage; under document-local attention it cannot. Held-out sequences use
//! fresh passages.

use std::collections::BTreeMap;

use serde::Serialize;

use super::train::{evaluate_by_language, train, OptimizerConfig, TrainOptions};
use super::{ModelConfig, Parameters};
use crate::corpus::{Document, LanguageTag};
use crate::error::{Error, Result};
use crate::packer::{pack_ordered, PackedSequence, PackerConfig};
use crate::rng::{streams, CounterRng};
use crate::schedule::{BatchRamp, ScheduleConfig};
use crate::xlda_mask::MaskPolicy;

pub const HIGH: &str = "hi";
pub const LOW: &str = "lo";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransferSpec {
    pub model: ModelConfig,
    pub seq_len: usize,
    pub steps: u64,
    pub batch_sequences: usize,
    /// Share of each sequence taken by the low-resource translation.
    pub low_share: f64,
    pub words: u32,
    pub first_word: u32,
    pub train_sequences: usize,
    pub eval_sequences: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub policies: [MaskPolicy; 2],
    pub seed: u64,
}

impl Default for TransferSpec {
    fn default() -> Self {
        Self {
            model: ModelConfig { n_layers: 2, d_model: 32, d_ff: 64, n_heads: 4, vocab_size: 64, ..Default::default() },
            seq_len: 64,
            steps: 3000,
            batch_sequences: 4,
            low_share: 0.1,
            words: 30,
            first_word: 2,
            train_sequences: 1024,
            eval_sequences: 64,
            peak_lr: 3e-3,
            warmup_steps: 100,
            policies: [MaskPolicy::XldaFullCausal, MaskPolicy::IntraDocumentCausal],
            seed: 0,
        }
    }
}

impl TransferSpec {
    fn passage_len(&self) -> usize {
        (self.low_share * self.seq_len as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let p = self.passage_len();
        if p < 2 || 2 * p >= self.seq_len {
            return Err(Error::invalid(format!("low_share {} leaves no room for a passage pair", self.low_share)));
        }
        if self.words == 0 || self.first_word == 0 || self.first_word + 2 * self.words > self.model.vocab_size as u32 {
            return Err(Error::invalid(format!(
                "{} words from token {} do not fit twice in vocabulary {}",
                self.words, self.first_word, self.model.vocab_size
            )));
        }
        if self.steps > 0 && (self.batch_sequences == 0 || self.train_sequences == 0) {
            return Err(Error::invalid("a nonzero budget needs training sequences and a batch size"));
        }
        if self.eval_sequences == 0 {
            return Err(Error::invalid("no held-out sequences"));
        }
        if self.steps > 0 && (self.warmup_steps as f64) >= 0.9 * self.steps as f64 {
            return Err(Error::invalid(format!("budget of {} steps is too small for {} warmup steps", self.steps, self.warmup_steps)));
        }
        Ok(())
    }

    pub fn budget_tokens(&self) -> u64 {
        self.steps * (self.batch_sequences * self.seq_len) as u64
    }

    fn schedule(&self) -> ScheduleConfig {
        let batch = (self.batch_sequences * self.seq_len) as u64;
        ScheduleConfig {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            decay_fraction: 0.1,
            final_ratio: 0.1,
            batch_ramp: BatchRamp { start_tokens: batch, end_tokens: batch, ramp_tokens: 0, seq_len: self.seq_len as u64 },
            wd_main: 0.1,
            wd_anneal: 0.033,
            mtp_alpha_main: self.model.mtp_alpha,
            mtp_alpha_anneal: self.model.mtp_alpha / 2.0,
        }
    }

    /// Sequences `first..first + n` of the synthetic stream.
    fn sequences(&self, first: usize, n: usize) -> Result<Vec<PackedSequence>> {
        let hi = LanguageTag::new(HIGH)?;
        let lo = LanguageTag::new(LOW)?;
        let p = self.passage_len();
        let mut docs = Vec::new();
        for s in first..first + n {
            let mut rng = CounterRng::new(crate::rng::derive_seed(self.seed, streams::SYNTHETIC, s as u64), streams::SYNTHETIC);
            let word = |rng: &mut CounterRng| rng.next_below(self.words as u64) as u32;
            let mut filler = self.seq_len - 2 * p;
            let mut k = 0;
            while filler > 0 {
                let len = (2 + rng.next_below(14) as usize).min(filler);
                let toks = (0..len).map(|_| self.first_word + word(&mut rng)).collect();
                docs.push(Document::new(format!("s{s}f{k}"), hi.clone(), toks, None)?);
                filler -= len;
                k += 1;
            }
            let passage: Vec<u32> = (0..p).map(|_| word(&mut rng)).collect();
            let src = passage.iter().map(|w| self.first_word + w).collect();
            let tgt = passage.iter().map(|w| self.first_word + self.words + w).collect();
            docs.push(Document::new(format!("s{s}a"), hi.clone(), src, None)?);
            docs.push(Document::new(format!("s{s}b"), lo.clone(), tgt, None)?);
        }
        let seqs = pack_ordered(&docs, &PackerConfig::with_seq_len(self.seq_len))?;
        debug_assert_eq!(seqs.len(), n);
        Ok(seqs)
    }
}

/// Held-out next-token loss per language, for each policy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransferReport {
    pub budget_tokens: u64,
    pub steps: u64,
    pub policies: Vec<String>,
    /// `loss[policy][language]`, in the order of `policies`.
    pub loss: Vec<BTreeMap<String, f64>>,
    pub initial_loss: Vec<BTreeMap<String, f64>>,
}

impl TransferReport {
    pub fn held_out(&self, policy: MaskPolicy, lang: &str) -> Option<f64> {
        let i = self.policies.iter().position(|p| p == policy.short_name())?;
        self.loss[i].get(lang).copied()
    }
}

/// Trains one model per policy from the same initialisation on the same
/// sequences and evaluates each on held-out data under its own policy.
pub fn transfer_experiment(spec: &TransferSpec) -> Result<TransferReport> {
    spec.validate()?;
    let train_data = if spec.steps > 0 { spec.sequences(0, spec.train_sequences)? } else { Vec::new() };
    let eval_data = spec.sequences(spec.train_sequences, spec.eval_sequences)?;
    let init = Parameters::init(&spec.model)?;
    let mut loss = Vec::new();
    let mut initial_loss = Vec::new();
    for &policy in &spec.policies {
        initial_loss.push(evaluate_by_language(&init, &eval_data, policy)?);
        let opts = TrainOptions { schedule: spec.schedule(), optimizer: OptimizerConfig::default(), policy };
        let (trained, _) = train(init.clone(), &train_data, &opts)?;
        loss.push(evaluate_by_language(&trained, &eval_data, policy)?);
    }
    Ok(TransferReport {
        budget_tokens: spec.budget_tokens(),
        steps: spec.steps,
        policies: spec.policies.iter().map(|p| p.short_name().to_owned()).collect(),
        loss,
        initial_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TransferSpec {
        TransferSpec {
            model: ModelConfig { n_layers: 1, d_model: 8, d_ff: 16, n_heads: 2, vocab_size: 64, ..Default::default() },
            steps: 20,
            warmup_steps: 2,
            train_sequences: 8,
            eval_sequences: 4,
            ..Default::default()
        }
    }

    #[test]
    fn zero_budget_gives_initial_losses() {
        let r = transfer_experiment(&TransferSpec { steps: 0, ..small() }).unwrap();
        assert_eq!(r.loss, r.initial_loss);
    }

    #[test]
    fn swapping_policies_swaps_columns() {
        let a = transfer_experiment(&small()).unwrap();
        let mut spec = small();
        spec.policies.reverse();
        let b = transfer_experiment(&spec).unwrap();
        assert_eq!(a.loss[0], b.loss[1]);
        assert_eq!(a.loss[1], b.loss[0]);
        assert_eq!(a.held_out(MaskPolicy::XldaFullCausal, LOW), b.held_out(MaskPolicy::XldaFullCausal, LOW));
    }

    #[test]
    fn sequences_have_the_designed_layout() {
        let spec = TransferSpec::default();
        let seqs = spec.sequences(0, 3).unwrap();
        for s in &seqs {
            assert_eq!(s.pad_start, 64);
            let last = &s.spans[s.spans.len() - 1];
            assert_eq!(last.lang.code(), LOW);
            assert_eq!(last.len(), 6);
            let prev = &s.spans[s.spans.len() - 2];
            for (a, b) in s.tokens[prev.start..prev.end].iter().zip(&s.tokens[last.start..last.end]) {
                assert_eq!(a + 30, *b);
            }
        }
    }

    #[test]
    fn infeasible_budget() {
        assert!(transfer_experiment(&TransferSpec { low_share: 0.6, ..small() }).is_err());
        assert!(transfer_experiment(&TransferSpec { steps: 5, warmup_steps: 10, ..small() }).is_err());
        assert!(transfer_experiment(&TransferSpec { batch_sequences: 0, ..small() }).is_err());
    }
}
