use std::ops::Range;

use serde::Serialize;

use super::model::{batch_loss, batch_loss_and_grad, Example, LossConfig};
use super::{ModelConfig, Parameters};
use crate::corpus::{Document, LanguageTag};
use crate::error::Result;
use crate::packer::{pack_ordered, PackedSequence, PackerConfig};
use crate::rng::{streams, CounterRng};
use crate::xlda_mask::{MaskPolicy, MaskSpec};

/// The numeric gradient is the Richardson combination of central
/// differences at `h` and `2h`, which cancels the `h^2` truncation term.
/// Plain central differences at `h` are reported alongside.
///
/// Relative errors are taken against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so that coordinates with vanishing gradient are judged on absolute error.
/// The floor sits above the cancellation noise of the difference quotient
/// (about `f64::EPSILON * loss / h`, i.e. 1e-11).
pub const REL_FLOOR: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub seq_len: usize,
    pub policy: MaskPolicy,
    pub mtp_alpha: f64,
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig { n_layers: 2, d_model: 8, d_ff: 12, n_heads: 2, vocab_size: 16, ..Default::default() },
            seq_len: 10,
            policy: MaskPolicy::CrossLingualBridge,
            mtp_alpha: 0.2,
            samples_per_tensor: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_rel_error_central: f64,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub parameter_count: usize,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub max_rel_error_central: f64,
    pub passed: bool,
    pub tensors: Vec<TensorCheck>,
}

pub(crate) fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Two sequences with spans in two languages and trailing padding, so that
/// every mask branch and both label tracks contribute.
fn probe_batch(cfg: &GradCheckConfig) -> Result<Vec<PackedSequence>> {
    let mut rng = CounterRng::new(cfg.seed, streams::GRAD_CHECK);
    let vocab = cfg.model.vocab_size as u64;
    let langs = [LanguageTag::new("en")?, LanguageTag::new("ko")?];
    let lens = [4, 3, 2, 5, 3, cfg.seq_len.saturating_sub(8).max(1)];
    let mut docs = Vec::new();
    for (i, &len) in lens.iter().enumerate() {
        let toks = (0..len).map(|_| 1 + rng.next_below(vocab - 1) as u32).collect();
        docs.push(Document::new(format!("g{i}"), langs[i % 2].clone(), toks, None)?);
    }
    pack_ordered(&docs, &PackerConfig::with_seq_len(cfg.seq_len))
}

/// Central-difference check of one parameter slice at up to `samples`
/// random coordinates. An empty slice is skipped with a note.
pub fn check_slice(
    params: &Parameters,
    batch: &[Example<'_>],
    loss_cfg: &LossConfig,
    name: &str,
    range: Range<usize>,
    samples: usize,
    rng: &mut CounterRng,
) -> Result<TensorCheck> {
    if range.is_empty() || samples == 0 {
        return Ok(TensorCheck { name: name.to_owned(), checked: 0, max_rel_error: 0.0, max_rel_error_central: 0.0, note: Some("empty slice, skipped".into()) });
    }
    let (_, grad) = batch_loss_and_grad(params, batch, loss_cfg)?;
    let mut work = params.clone();
    let (mut worst, mut worst_central) = (0.0f64, 0.0f64);
    let n = samples.min(range.len());
    for _ in 0..n {
        let i = range.start + rng.next_below(range.len() as u64) as usize;
        let x = params.data[i];
        let h = FD_STEP * x.abs().max(1.0);
        let mut central = |h: f64| -> Result<f64> {
            work.data[i] = x + h;
            let up = batch_loss(&work, batch, loss_cfg)?.total;
            work.data[i] = x - h;
            let down = batch_loss(&work, batch, loss_cfg)?.total;
            work.data[i] = x;
            Ok((up - down) / (2.0 * h))
        };
        let d1 = central(h)?;
        let d2 = central(2.0 * h)?;
        worst = worst.max(rel_error(grad[i], (4.0 * d1 - d2) / 3.0));
        worst_central = worst_central.max(rel_error(grad[i], d1));
    }
    Ok(TensorCheck { name: name.to_owned(), checked: n, max_rel_error: worst, max_rel_error_central: worst_central, note: None })
}

/// Checks every named tensor of a freshly initialised model.
pub fn grad_check(cfg: &GradCheckConfig, tolerance: f64) -> Result<GradCheckReport> {
    let params = Parameters::init(&cfg.model)?;
    let seqs = probe_batch(cfg)?;
    let masks = seqs.iter().map(|s| MaskSpec::for_sequence(cfg.policy, s)).collect::<Result<Vec<_>>>()?;
    let batch: Vec<Example<'_>> = seqs
        .iter()
        .zip(&masks)
        .map(|(s, m)| Example { tokens: &s.tokens, ntp_labels: &s.ntp_labels, mtp_labels: &s.mtp_labels, mask: m })
        .collect();
    let loss_cfg = LossConfig::new(cfg.mtp_alpha);
    let mut rng = CounterRng::new(cfg.seed ^ 0x5eed, streams::GRAD_CHECK);
    let mut tensors = Vec::new();
    for t in &params.layout.tensors {
        tensors.push(check_slice(&params, &batch, &loss_cfg, &t.name, t.range.clone(), cfg.samples_per_tensor, &mut rng)?);
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    let max_rel_error_central = tensors.iter().map(|t| t.max_rel_error_central).fold(0.0, f64::max);
    Ok(GradCheckReport {
        parameter_count: params.len(),
        tolerance,
        max_rel_error,
        max_rel_error_central,
        passed: max_rel_error < tolerance,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_model_passes() {
        let cfg = GradCheckConfig::default();
        let r = grad_check(&cfg, 1e-6).unwrap();
        assert!(r.parameter_count <= 5000, "{}", r.parameter_count);
        assert!(r.passed, "{:#?}", r.tensors);
        assert!(r.tensors.iter().any(|t| t.name.starts_with("mtp.") && t.checked > 0));
    }

    #[test]
    fn ntp_only_passes() {
        let cfg = GradCheckConfig { mtp_alpha: 0.0, policy: MaskPolicy::IntraDocumentCausal, ..Default::default() };
        assert!(grad_check(&cfg, 1e-6).unwrap().passed);
    }

    #[test]
    fn empty_slice_is_skipped() {
        let cfg = GradCheckConfig::default();
        let params = Parameters::init(&cfg.model).unwrap();
        let mut rng = CounterRng::new(0, streams::GRAD_CHECK);
        let t = check_slice(&params, &[], &LossConfig::new(0.2), "none", 3..3, 4, &mut rng).unwrap();
        assert_eq!(t.checked, 0);
        assert!(t.note.is_some());
    }
}
