//! Desk-scale decoder-only transformer in f64 with a hand-written backward
//! pass.
//!
//! Each block wraps both sublayers in RMSNorm on the way in and on the way
//! out (peri-norm):
//!
//! ```text
//! h   = x + post_attn(attn(pre_attn(x)))
//! out = h + post_ffn(swiglu(pre_ffn(h)))
//! ```
//!
//! Attention uses rotary position embeddings and consumes a [`MaskSpec`].
//! Next-token logits come from the final trunk state; the second-next-token
//! (MTP) head is one extra block stacked on the trunk output. Both heads
//! project through the transposed input embedding.
//!
//! [`MaskSpec`]: crate::xlda_mask::MaskSpec

mod grad_check;
mod model;
mod ops;
mod train;
mod transfer;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, CounterRng};

pub use grad_check::{grad_check, GradCheckConfig, GradCheckReport, TensorCheck};
pub use model::{
    batch_loss_and_grad, forward, forward_traced, loss, Example, ForwardOutput, LossConfig, LossParts,
};
pub use train::{evaluate_by_language, train, write_metrics_csv, MetricRow, OptimizerConfig, TrainOptions};
pub use transfer::{transfer_experiment, TransferReport, TransferSpec, HIGH as TRANSFER_HIGH, LOW as TRANSFER_LOW};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub rope_theta: f64,
    pub mtp_alpha: f64,
    pub norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            d_ff: 64,
            n_heads: 4,
            vocab_size: 64,
            rope_theta: 100_000.0,
            mtp_alpha: 0.2,
            norm_eps: 1e-6,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Full-size 7B shape; never instantiated here, only validated.
    pub fn reference_7b() -> Self {
        Self {
            n_layers: 32,
            d_model: 4096,
            d_ff: 11_008,
            n_heads: 32,
            vocab_size: 128_256,
            rope_theta: 100_000.0,
            mtp_alpha: 0.2,
            norm_eps: 1e-6,
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = |m: String| Err(Error::Shape(m));
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 || self.vocab_size == 0 {
            return shape("all dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return shape(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.head_dim() % 2 != 0 {
            return shape(format!("head dimension {} must be even for rotary pairs", self.head_dim()));
        }
        if !(self.rope_theta > 0.0) {
            return Err(Error::invalid("rope_theta must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mtp_alpha) {
            return Err(Error::invalid("mtp_alpha outside [0, 1]"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::invalid("norm_eps must be positive"));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        ParamLayout::new(self).total
    }
}

/// Offsets of one block's tensors inside the flat parameter buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct BlockLayout {
    pub attn_pre: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub attn_post: Range<usize>,
    pub ffn_pre: Range<usize>,
    pub w_gate: Range<usize>,
    pub w_up: Range<usize>,
    pub w_down: Range<usize>,
    pub ffn_post: Range<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    /// Projection or embedding; weight-decayed.
    Matrix { fan_in: usize },
    /// RMSNorm gain; initialised to one, not decayed.
    Gain,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub range: Range<usize>,
    pub kind: TensorKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub(crate) embed: Range<usize>,
    /// Trunk blocks followed by the MTP block.
    pub(crate) blocks: Vec<BlockLayout>,
    pub(crate) final_norm: Range<usize>,
    pub(crate) mtp_final_norm: Range<usize>,
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut add = |name: String, len: usize, kind: TensorKind| {
            let r = offset..offset + len;
            offset += len;
            tensors.push(TensorInfo { name, range: r.clone(), kind });
            r
        };
        let embed = add("embed".into(), v * d, TensorKind::Matrix { fan_in: d });
        let mut blocks = Vec::new();
        for b in 0..=cfg.n_layers {
            let p = if b == cfg.n_layers { "mtp".to_owned() } else { format!("layer{b}") };
            let m = |fan_in| TensorKind::Matrix { fan_in };
            blocks.push(BlockLayout {
                attn_pre: add(format!("{p}.attn_pre_norm"), d, TensorKind::Gain),
                wq: add(format!("{p}.wq"), d * d, m(d)),
                wk: add(format!("{p}.wk"), d * d, m(d)),
                wv: add(format!("{p}.wv"), d * d, m(d)),
                wo: add(format!("{p}.wo"), d * d, m(d)),
                attn_post: add(format!("{p}.attn_post_norm"), d, TensorKind::Gain),
                ffn_pre: add(format!("{p}.ffn_pre_norm"), d, TensorKind::Gain),
                w_gate: add(format!("{p}.w_gate"), d * f, m(d)),
                w_up: add(format!("{p}.w_up"), d * f, m(d)),
                w_down: add(format!("{p}.w_down"), f * d, m(f)),
                ffn_post: add(format!("{p}.ffn_post_norm"), d, TensorKind::Gain),
            });
        }
        let final_norm = add("final_norm".into(), d, TensorKind::Gain);
        let mtp_final_norm = add("mtp_final_norm".into(), d, TensorKind::Gain);
        Self { embed, blocks, final_norm, mtp_final_norm, tensors, total: offset }
    }
}

/// All weights in one flat buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub data: Vec<f64>,
}

impl Parameters {
    /// Gains start at one; projections are Gaussian with variance 1/fan_in.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        let mut data = vec![0.0; layout.total];
        let mut rng = CounterRng::new(config.seed, streams::INIT);
        for t in &layout.tensors {
            match t.kind {
                TensorKind::Gain => data[t.range.clone()].fill(1.0),
                TensorKind::Matrix { fan_in } => {
                    let std = (1.0 / fan_in as f64).sqrt();
                    for x in &mut data[t.range.clone()] {
                        *x = rng.next_gaussian() * std;
                    }
                }
            }
        }
        Ok(Self { config: config.clone(), layout, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.tensors.iter().find(|t| t.name == name).map(|t| &self.data[t.range.clone()])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Order-sensitive digest of the raw bits, for reproducibility checks.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        self.data.iter().for_each(|x| bytes.extend_from_slice(&x.to_bits().to_le_bytes()));
        crate::rng::fnv1a64(&bytes)
    }

    pub(crate) fn slice(&self, r: &Range<usize>) -> &[f64] {
        &self.data[r.clone()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig { seed: 5, ..Default::default() };
        let a = Parameters::init(&cfg).unwrap();
        let b = Parameters::init(&cfg).unwrap();
        assert_eq!(a.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        let c = Parameters::init(&ModelConfig { seed: 6, ..Default::default() }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn shape_errors() {
        let bad = ModelConfig { d_model: 8, n_heads: 3, ..Default::default() };
        assert!(matches!(Parameters::init(&bad), Err(Error::Shape(_))));
        let odd_head = ModelConfig { d_model: 6, n_heads: 2, ..Default::default() };
        assert!(matches!(odd_head.validate(), Err(Error::Shape(_))));
    }

    #[test]
    fn reference_shape_is_valid() {
        let cfg = ModelConfig::reference_7b();
        cfg.validate().unwrap();
        assert_eq!(cfg.head_dim(), 128);
    }

    #[test]
    fn layout_is_contiguous() {
        let cfg = ModelConfig::default();
        let layout = ParamLayout::new(&cfg);
        let mut cursor = 0;
        for t in &layout.tensors {
            assert_eq!(t.range.start, cursor);
            cursor = t.range.end;
        }
        assert_eq!(cursor, layout.total);
        assert_eq!(layout.blocks.len(), cfg.n_layers + 1);
        let p = Parameters::init(&cfg).unwrap();
        assert!(p.tensor("final_norm").unwrap().iter().all(|&g| g == 1.0));
        assert!(p.tensor("mtp.wq").is_some());
    }
}
