use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::model::{batch_loss_and_grad, forward, Example, LossConfig};
use super::ops::log_sum_exp;
use super::{Parameters, TensorKind};
use crate::error::{Error, Result};
use crate::packer::{PackedSequence, IGNORE_LABEL};
use crate::schedule::ScheduleConfig;
use crate::xlda_mask::{MaskPolicy, MaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, grad_clip: Some(1.0) }
    }
}

/// Everything the loop needs besides parameters and data. The number of
/// steps is `schedule.total_steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub policy: MaskPolicy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: u64,
    pub lr: f64,
    pub batch_tokens: u64,
    pub loss_ntp: f64,
    pub loss_mtp: f64,
    pub loss_total: f64,
}

/// AdamW over a packed dataset, one row of metrics per step.
///
/// Batches are drawn cyclically from `data`; the batch size follows the
/// schedule's token ramp (at least one sequence). Weight decay and the MTP
/// weight switch at the annealing boundary. Norm gains are not decayed.
/// Returns [`Error::Diverged`] as soon as a loss is non-finite.
pub fn train(mut params: Parameters, data: &[PackedSequence], opts: &TrainOptions) -> Result<(Parameters, Vec<MetricRow>)> {
    let sched = &opts.schedule;
    if sched.total_steps == 0 {
        return Ok((params, Vec::new()));
    }
    sched.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("no training sequences"));
    }
    let seq_len = data[0].seq_len();
    if let Some(s) = data.iter().find(|s| s.seq_len() != seq_len) {
        return Err(Error::Shape(format!("mixed sequence lengths {seq_len} and {}", s.seq_len())));
    }
    let masks = data.iter().map(|s| MaskSpec::for_sequence(opts.policy, s)).collect::<Result<Vec<_>>>()?;

    let decays: Vec<bool> = {
        let mut v = vec![false; params.len()];
        for t in &params.layout.tensors {
            if matches!(t.kind, TensorKind::Matrix { .. }) {
                v[t.range.clone()].fill(true);
            }
        }
        v
    };
    let opt = &opts.optimizer;
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut cursor = 0usize;
    let mut tokens_seen = 0u64;
    let mut log = Vec::with_capacity(sched.total_steps as usize);

    for step in 0..sched.total_steps {
        let lr = sched.lr_at(step)?;
        let (wd, alpha) = sched.anneal_params(sched.stage_at(step));
        let n_seq = ((sched.batch_size_at(tokens_seen) / seq_len as u64) as usize).max(1);
        let batch: Vec<Example<'_>> = (0..n_seq)
            .map(|i| {
                let j = (cursor + i) % data.len();
                let s = &data[j];
                Example { tokens: &s.tokens, ntp_labels: &s.ntp_labels, mtp_labels: &s.mtp_labels, mask: &masks[j] }
            })
            .collect();
        cursor = (cursor + n_seq) % data.len();
        let batch_tokens = (n_seq * seq_len) as u64;
        tokens_seen += batch_tokens;

        let (parts, mut grad) = batch_loss_and_grad(&params, &batch, &LossConfig::new(alpha))?;
        if !parts.total.is_finite() {
            return Err(Error::Diverged { step, loss: parts.total });
        }
        if let Some(clip) = opt.grad_clip {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                let s = clip / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        let t = (step + 1) as i32;
        let bc1 = 1.0 - opt.beta1.powi(t);
        let bc2 = 1.0 - opt.beta2.powi(t);
        for i in 0..params.data.len() {
            let g = grad[i];
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
            let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + opt.eps);
            let decay = if decays[i] { wd * params.data[i] } else { 0.0 };
            params.data[i] -= lr * (update + decay);
        }
        log.push(MetricRow { step, lr, batch_tokens, loss_ntp: parts.ntp, loss_mtp: parts.mtp, loss_total: parts.total });
    }
    if !params.is_finite() {
        return Err(Error::Diverged { step: sched.total_steps, loss: f64::NAN });
    }
    Ok((params, log))
}

/// Mean next-token cross-entropy per language, attributing each labelled
/// position to the span that contains it.
pub fn evaluate_by_language(params: &Parameters, data: &[PackedSequence], policy: MaskPolicy) -> Result<BTreeMap<String, f64>> {
    let vocab = params.config.vocab_size;
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for seq in data {
        let mask = MaskSpec::for_sequence(policy, seq)?;
        let out = forward(params, &seq.tokens, &mask)?;
        for span in &seq.spans {
            let entry = acc.entry(span.lang.code().to_owned()).or_default();
            for t in span.start..span.end {
                let lab = seq.ntp_labels[t];
                if lab == IGNORE_LABEL {
                    continue;
                }
                if lab as usize >= vocab {
                    return Err(Error::invalid(format!("label {lab} outside vocabulary of {vocab}")));
                }
                let row = out.ntp_row(t);
                entry.0 += log_sum_exp(row) - row[lab as usize];
                entry.1 += 1;
            }
        }
    }
    Ok(acc.into_iter().filter(|(_, (_, n))| *n > 0).map(|(k, (s, n))| (k, s / n as f64)).collect())
}

pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[MetricRow]) -> std::io::Result<()> {
    writeln!(out, "step,lr,batch_tokens,loss_ntp,loss_mtp,loss_total")?;
    for r in rows {
        writeln!(out, "{},{:e},{},{},{},{}", r.step, r.lr, r.batch_tokens, r.loss_ntp, r.loss_mtp, r.loss_total)?;
    }
    Ok(())
}
