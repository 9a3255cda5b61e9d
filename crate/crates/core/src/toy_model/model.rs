use rayon::prelude::*;

use super::ops::{
    add_at_b, dot, linear_backward, log_sum_exp, matmul, matmul_bt, rms_norm, rms_norm_backward, silu, silu_grad,
    NormCache, Rope,
};
use super::{BlockLayout, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::packer::IGNORE_LABEL;
use crate::xlda_mask::MaskSpec;

/// Logits of both heads, row-major `[seq_len x vocab]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub seq_len: usize,
    pub vocab: usize,
    pub ntp_logits: Vec<f64>,
    pub mtp_logits: Vec<f64>,
}

impl ForwardOutput {
    pub fn ntp_row(&self, t: usize) -> &[f64] {
        &self.ntp_logits[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn mtp_row(&self, t: usize) -> &[f64] {
        &self.mtp_logits[t * self.vocab..(t + 1) * self.vocab]
    }
}

/// One training sequence with its mask.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub tokens: &'a [u32],
    pub ntp_labels: &'a [u32],
    pub mtp_labels: &'a [u32],
    pub mask: &'a MaskSpec,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub mtp_alpha: f64,
    pub ignore_label: u32,
}

impl LossConfig {
    pub fn new(mtp_alpha: f64) -> Self {
        Self { mtp_alpha, ignore_label: IGNORE_LABEL }
    }
}

/// Mean cross-entropies over labelled positions and their combination
/// `ntp + alpha * mtp`. A track with no labelled positions contributes 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub ntp: f64,
    pub mtp: f64,
    pub total: f64,
    pub ntp_count: usize,
    pub mtp_count: usize,
}

struct AttnCache {
    input: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `[head][q][k]`, zero where the mask blocks the pair.
    probs: Vec<f64>,
    o: Vec<f64>,
}

struct FfnCache {
    input: Vec<f64>,
    gate: Vec<f64>,
    up: Vec<f64>,
    act: Vec<f64>,
}

struct BlockCache {
    pre_attn: NormCache,
    attn: AttnCache,
    post_attn: NormCache,
    pre_ffn: NormCache,
    ffn: FfnCache,
    post_ffn: NormCache,
}

struct Cache {
    blocks: Vec<BlockCache>,
    final_norm: NormCache,
    final_out: Vec<f64>,
    mtp_norm: NormCache,
    mtp_out: Vec<f64>,
}

struct Ctx<'a> {
    p: &'a Parameters,
    cfg: &'a ModelConfig,
    len: usize,
    rope: Rope,
    rows: Vec<Vec<(usize, usize)>>,
}

impl<'a> Ctx<'a> {
    fn new(p: &'a Parameters, tokens: &[u32], mask: &MaskSpec) -> Result<Self> {
        let cfg = &p.config;
        if mask.seq_len() != tokens.len() {
            return Err(Error::Shape(format!("mask length {} vs {} tokens", mask.seq_len(), tokens.len())));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::invalid(format!("token id {t} outside vocabulary of {}", cfg.vocab_size)));
        }
        let len = tokens.len();
        Ok(Self {
            p,
            cfg,
            len,
            rope: Rope::new(len, cfg.head_dim(), cfg.rope_theta),
            rows: (0..len).map(|q| mask.row_ranges(q)).collect(),
        })
    }

    fn attn_forward(&self, b: &BlockLayout, x: Vec<f64>) -> (Vec<f64>, AttnCache) {
        let (d, l) = (self.cfg.d_model, self.len);
        let (nh, hd) = (self.cfg.n_heads, self.cfg.head_dim());
        let mut q = matmul(&x, self.p.slice(&b.wq), l, d, d);
        let mut k = matmul(&x, self.p.slice(&b.wk), l, d, d);
        let v = matmul(&x, self.p.slice(&b.wv), l, d, d);
        self.rope.apply(&mut q, d, false);
        self.rope.apply(&mut k, d, false);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut probs = vec![0.0; nh * l * l];
        let mut o = vec![0.0; l * d];
        let mut scores = vec![0.0; l];
        for h in 0..nh {
            let off = h * hd;
            for qi in 0..l {
                let ranges = &self.rows[qi];
                if ranges.is_empty() {
                    continue;
                }
                let qv = &q[qi * d + off..qi * d + off + hd];
                let mut max = f64::NEG_INFINITY;
                for &(a, e) in ranges {
                    for ki in a..e {
                        let s = dot(qv, &k[ki * d + off..ki * d + off + hd]) * scale;
                        scores[ki] = s;
                        max = max.max(s);
                    }
                }
                let mut sum = 0.0;
                for &(a, e) in ranges {
                    for ki in a..e {
                        let w = (scores[ki] - max).exp();
                        scores[ki] = w;
                        sum += w;
                    }
                }
                let prow = &mut probs[(h * l + qi) * l..(h * l + qi + 1) * l];
                let orow = &mut o[qi * d + off..qi * d + off + hd];
                for &(a, e) in ranges {
                    for ki in a..e {
                        let w = scores[ki] / sum;
                        prow[ki] = w;
                        for (ov, &vv) in orow.iter_mut().zip(&v[ki * d + off..ki * d + off + hd]) {
                            *ov += w * vv;
                        }
                    }
                }
            }
        }
        let out = matmul(&o, self.p.slice(&b.wo), l, d, d);
        (out, AttnCache { input: x, q, k, v, probs, o })
    }

    fn attn_backward(&self, b: &BlockLayout, c: &AttnCache, dout: &[f64], g: &mut [f64]) -> Vec<f64> {
        let (d, l) = (self.cfg.d_model, self.len);
        let (nh, hd) = (self.cfg.n_heads, self.cfg.head_dim());
        let d_o = linear_backward(&c.o, self.p.slice(&b.wo), dout, &mut g[b.wo.clone()], l, d, d);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = vec![0.0; l * d];
        let mut dk = vec![0.0; l * d];
        let mut dv = vec![0.0; l * d];
        let mut dp = vec![0.0; l];
        for h in 0..nh {
            let off = h * hd;
            for qi in 0..l {
                let ranges = &self.rows[qi];
                if ranges.is_empty() {
                    continue;
                }
                let prow = &c.probs[(h * l + qi) * l..(h * l + qi + 1) * l];
                let dorow = &d_o[qi * d + off..qi * d + off + hd];
                let mut weighted = 0.0;
                for &(a, e) in ranges {
                    for ki in a..e {
                        let v = dot(dorow, &c.v[ki * d + off..ki * d + off + hd]);
                        dp[ki] = v;
                        weighted += prow[ki] * v;
                        for (dvv, &g) in dv[ki * d + off..ki * d + off + hd].iter_mut().zip(dorow) {
                            *dvv += prow[ki] * g;
                        }
                    }
                }
                for &(a, e) in ranges {
                    for ki in a..e {
                        let ds = prow[ki] * (dp[ki] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for j in 0..hd {
                            dq[qi * d + off + j] += ds * c.k[ki * d + off + j];
                            dk[ki * d + off + j] += ds * c.q[qi * d + off + j];
                        }
                    }
                }
            }
        }
        self.rope.apply(&mut dq, d, true);
        self.rope.apply(&mut dk, d, true);
        let mut dx = linear_backward(&c.input, self.p.slice(&b.wq), &dq, &mut g[b.wq.clone()], l, d, d);
        let dxk = linear_backward(&c.input, self.p.slice(&b.wk), &dk, &mut g[b.wk.clone()], l, d, d);
        let dxv = linear_backward(&c.input, self.p.slice(&b.wv), &dv, &mut g[b.wv.clone()], l, d, d);
        for ((a, b), c) in dx.iter_mut().zip(dxk).zip(dxv) {
            *a += b + c;
        }
        dx
    }

    fn ffn_forward(&self, b: &BlockLayout, x: Vec<f64>) -> (Vec<f64>, FfnCache) {
        let (d, f, l) = (self.cfg.d_model, self.cfg.d_ff, self.len);
        let gate = matmul(&x, self.p.slice(&b.w_gate), l, d, f);
        let up = matmul(&x, self.p.slice(&b.w_up), l, d, f);
        let act: Vec<f64> = gate.iter().zip(&up).map(|(&a, &u)| silu(a) * u).collect();
        let out = matmul(&act, self.p.slice(&b.w_down), l, f, d);
        (out, FfnCache { input: x, gate, up, act })
    }

    fn ffn_backward(&self, b: &BlockLayout, c: &FfnCache, dout: &[f64], g: &mut [f64]) -> Vec<f64> {
        let (d, f, l) = (self.cfg.d_model, self.cfg.d_ff, self.len);
        let dact = linear_backward(&c.act, self.p.slice(&b.w_down), dout, &mut g[b.w_down.clone()], l, f, d);
        let dgate: Vec<f64> = (0..l * f).map(|i| dact[i] * c.up[i] * silu_grad(c.gate[i])).collect();
        let dup: Vec<f64> = (0..l * f).map(|i| dact[i] * silu(c.gate[i])).collect();
        let mut dx = linear_backward(&c.input, self.p.slice(&b.w_gate), &dgate, &mut g[b.w_gate.clone()], l, d, f);
        let dxu = linear_backward(&c.input, self.p.slice(&b.w_up), &dup, &mut g[b.w_up.clone()], l, d, f);
        dx.iter_mut().zip(dxu).for_each(|(a, b)| *a += b);
        dx
    }

    fn block_forward(&self, b: &BlockLayout, x: &[f64]) -> (Vec<f64>, BlockCache) {
        let (d, eps) = (self.cfg.d_model, self.cfg.norm_eps);
        let (n1, pre_attn) = rms_norm(x, self.p.slice(&b.attn_pre), d, eps);
        let (a, attn) = self.attn_forward(b, n1);
        let (n2, post_attn) = rms_norm(&a, self.p.slice(&b.attn_post), d, eps);
        let h: Vec<f64> = x.iter().zip(&n2).map(|(a, b)| a + b).collect();
        let (n3, pre_ffn) = rms_norm(&h, self.p.slice(&b.ffn_pre), d, eps);
        let (f, ffn) = self.ffn_forward(b, n3);
        let (n4, post_ffn) = rms_norm(&f, self.p.slice(&b.ffn_post), d, eps);
        let out = h.iter().zip(&n4).map(|(a, b)| a + b).collect();
        (out, BlockCache { pre_attn, attn, post_attn, pre_ffn, ffn, post_ffn })
    }

    fn block_backward(&self, b: &BlockLayout, c: &BlockCache, dout: &[f64], g: &mut [f64]) -> Vec<f64> {
        let d = self.cfg.d_model;
        let mut dh = dout.to_vec();
        let df = rms_norm_backward(dout, self.p.slice(&b.ffn_post), &c.post_ffn, &mut g[b.ffn_post.clone()], d);
        let dn3 = self.ffn_backward(b, &c.ffn, &df, g);
        let t = rms_norm_backward(&dn3, self.p.slice(&b.ffn_pre), &c.pre_ffn, &mut g[b.ffn_pre.clone()], d);
        dh.iter_mut().zip(t).for_each(|(a, b)| *a += b);
        let mut dx = dh.clone();
        let da = rms_norm_backward(&dh, self.p.slice(&b.attn_post), &c.post_attn, &mut g[b.attn_post.clone()], d);
        let dn1 = self.attn_backward(b, &c.attn, &da, g);
        let t = rms_norm_backward(&dn1, self.p.slice(&b.attn_pre), &c.pre_attn, &mut g[b.attn_pre.clone()], d);
        dx.iter_mut().zip(t).for_each(|(a, b)| *a += b);
        dx
    }

    fn forward(&self, tokens: &[u32]) -> (ForwardOutput, Cache) {
        let (d, v, l, eps) = (self.cfg.d_model, self.cfg.vocab_size, self.len, self.cfg.norm_eps);
        let layout = &self.p.layout;
        let embed = self.p.slice(&layout.embed);
        let mut x = Vec::with_capacity(l * d);
        for &t in tokens {
            x.extend_from_slice(&embed[t as usize * d..(t as usize + 1) * d]);
        }
        let n_trunk = self.cfg.n_layers;
        let mut blocks = Vec::with_capacity(n_trunk + 1);
        for b in &layout.blocks[..n_trunk] {
            let (y, c) = self.block_forward(b, &x);
            blocks.push(c);
            x = y;
        }
        let (final_out, final_norm) = rms_norm(&x, self.p.slice(&layout.final_norm), d, eps);
        let ntp_logits = matmul_bt(&final_out, embed, l, d, v);
        let (m, mc) = self.block_forward(&layout.blocks[n_trunk], &x);
        blocks.push(mc);
        let (mtp_out, mtp_norm) = rms_norm(&m, self.p.slice(&layout.mtp_final_norm), d, eps);
        let mtp_logits = matmul_bt(&mtp_out, embed, l, d, v);
        (
            ForwardOutput { seq_len: l, vocab: v, ntp_logits, mtp_logits },
            Cache { blocks, final_norm, final_out, mtp_norm, mtp_out },
        )
    }

    /// `dntp`/`dmtp` are gradients w.r.t. the logits.
    fn backward(&self, tokens: &[u32], cache: &Cache, dntp: &[f64], dmtp: &[f64], g: &mut [f64]) {
        let (d, v, l) = (self.cfg.d_model, self.cfg.vocab_size, self.len);
        let layout = &self.p.layout;
        let embed = self.p.slice(&layout.embed);
        let n_trunk = self.cfg.n_layers;

        // logits = y . E^T
        add_at_b(&mut g[layout.embed.clone()], dntp, &cache.final_out, l, v, d);
        add_at_b(&mut g[layout.embed.clone()], dmtp, &cache.mtp_out, l, v, d);
        let dy = matmul(dntp, embed, l, v, d);
        let dym = matmul(dmtp, embed, l, v, d);

        let fnorm = self.p.slice(&layout.final_norm);
        let mut dx = rms_norm_backward(&dy, fnorm, &cache.final_norm, &mut g[layout.final_norm.clone()], d);
        let mnorm = self.p.slice(&layout.mtp_final_norm);
        let dm = rms_norm_backward(&dym, mnorm, &cache.mtp_norm, &mut g[layout.mtp_final_norm.clone()], d);
        let from_mtp = self.block_backward(&layout.blocks[n_trunk], &cache.blocks[n_trunk], &dm, g);
        dx.iter_mut().zip(from_mtp).for_each(|(a, b)| *a += b);

        for i in (0..n_trunk).rev() {
            dx = self.block_backward(&layout.blocks[i], &cache.blocks[i], &dx, g);
        }
        let ge = &mut g[layout.embed.clone()];
        for (pos, &t) in tokens.iter().enumerate() {
            let row = &mut ge[t as usize * d..(t as usize + 1) * d];
            row.iter_mut().zip(&dx[pos * d..(pos + 1) * d]).for_each(|(a, b)| *a += b);
        }
    }
}

/// Runs both heads on one sequence.
pub fn forward(params: &Parameters, tokens: &[u32], mask: &MaskSpec) -> Result<ForwardOutput> {
    let ctx = Ctx::new(params, tokens, mask)?;
    Ok(ctx.forward(tokens).0)
}

/// Forward pass that also returns attention probabilities per block
/// (trunk blocks first, MTP block last), each `[head][q][k]`.
pub fn forward_traced(params: &Parameters, tokens: &[u32], mask: &MaskSpec) -> Result<(ForwardOutput, Vec<Vec<f64>>)> {
    let ctx = Ctx::new(params, tokens, mask)?;
    let (out, cache) = ctx.forward(tokens);
    Ok((out, cache.blocks.into_iter().map(|b| b.attn.probs).collect()))
}

fn ce_sum(logits: &[f64], labels: &[u32], vocab: usize, ignore: u32) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for (t, &lab) in labels.iter().enumerate() {
        if lab == ignore {
            continue;
        }
        let row = &logits[t * vocab..(t + 1) * vocab];
        sum += log_sum_exp(row) - row[lab as usize];
        n += 1;
    }
    (sum, n)
}

fn combine(ntp_sum: f64, ntp_n: usize, mtp_sum: f64, mtp_n: usize, alpha: f64) -> Result<LossParts> {
    if ntp_n == 0 && mtp_n == 0 {
        return Err(Error::EmptyLossSupport);
    }
    let ntp = if ntp_n > 0 { ntp_sum / ntp_n as f64 } else { 0.0 };
    let mtp = if mtp_n > 0 { mtp_sum / mtp_n as f64 } else { 0.0 };
    Ok(LossParts { ntp, mtp, total: ntp + alpha * mtp, ntp_count: ntp_n, mtp_count: mtp_n })
}

fn check_labels(labels: &[u32], seq_len: usize, vocab: usize, ignore: u32) -> Result<()> {
    if labels.len() != seq_len {
        return Err(Error::Shape(format!("{} labels for {seq_len} positions", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l != ignore && l as usize >= vocab) {
        return Err(Error::invalid(format!("label {l} outside vocabulary of {vocab}")));
    }
    Ok(())
}

/// `mean CE(ntp) + alpha * mean CE(mtp)` over non-ignored positions.
pub fn loss(output: &ForwardOutput, ntp_labels: &[u32], mtp_labels: &[u32], cfg: &LossConfig) -> Result<LossParts> {
    check_labels(ntp_labels, output.seq_len, output.vocab, cfg.ignore_label)?;
    check_labels(mtp_labels, output.seq_len, output.vocab, cfg.ignore_label)?;
    let (ns, nn) = ce_sum(&output.ntp_logits, ntp_labels, output.vocab, cfg.ignore_label);
    let (ms, mn) = ce_sum(&output.mtp_logits, mtp_labels, output.vocab, cfg.ignore_label);
    combine(ns, nn, ms, mn, cfg.mtp_alpha)
}

/// Softmax-minus-one-hot, scaled by `weight`, at labelled rows.
fn ce_grad(logits: &[f64], labels: &[u32], vocab: usize, ignore: u32, weight: f64) -> Vec<f64> {
    let mut g = vec![0.0; logits.len()];
    if weight == 0.0 {
        return g;
    }
    for (t, &lab) in labels.iter().enumerate() {
        if lab == ignore {
            continue;
        }
        let row = &logits[t * vocab..(t + 1) * vocab];
        let lse = log_sum_exp(row);
        let grow = &mut g[t * vocab..(t + 1) * vocab];
        for (gv, &z) in grow.iter_mut().zip(row) {
            *gv = (z - lse).exp() * weight;
        }
        grow[lab as usize] -= weight;
    }
    g
}

/// Loss over a batch (token-level means pooled across sequences) and its
/// gradient. Per-sequence work runs on the current rayon pool; gradients
/// are summed in sequence order, so the result does not depend on the
/// number of threads.
pub fn batch_loss_and_grad(params: &Parameters, batch: &[Example<'_>], cfg: &LossConfig) -> Result<(LossParts, Vec<f64>)> {
    let vocab = params.config.vocab_size;
    let count = |labels: &[u32]| labels.iter().filter(|&&l| l != cfg.ignore_label).count();
    let ntp_n: usize = batch.iter().map(|e| count(e.ntp_labels)).sum();
    let mtp_n: usize = batch.iter().map(|e| count(e.mtp_labels)).sum();
    if ntp_n == 0 && mtp_n == 0 {
        return Err(Error::EmptyLossSupport);
    }
    let w_ntp = if ntp_n > 0 { 1.0 / ntp_n as f64 } else { 0.0 };
    let w_mtp = if mtp_n > 0 { cfg.mtp_alpha / mtp_n as f64 } else { 0.0 };

    let per_seq: Vec<Result<(f64, f64, Vec<f64>)>> = batch
        .par_iter()
        .map(|ex| {
            let ctx = Ctx::new(params, ex.tokens, ex.mask)?;
            check_labels(ex.ntp_labels, ctx.len, vocab, cfg.ignore_label)?;
            check_labels(ex.mtp_labels, ctx.len, vocab, cfg.ignore_label)?;
            let (out, cache) = ctx.forward(ex.tokens);
            let (ns, _) = ce_sum(&out.ntp_logits, ex.ntp_labels, vocab, cfg.ignore_label);
            let (ms, _) = ce_sum(&out.mtp_logits, ex.mtp_labels, vocab, cfg.ignore_label);
            let dntp = ce_grad(&out.ntp_logits, ex.ntp_labels, vocab, cfg.ignore_label, w_ntp);
            let dmtp = ce_grad(&out.mtp_logits, ex.mtp_labels, vocab, cfg.ignore_label, w_mtp);
            let mut g = vec![0.0; params.len()];
            ctx.backward(ex.tokens, &cache, &dntp, &dmtp, &mut g);
            Ok((ns, ms, g))
        })
        .collect();

    let mut grad = vec![0.0; params.len()];
    let (mut ns, mut ms) = (0.0, 0.0);
    for r in per_seq {
        let (a, b, g) = r?;
        ns += a;
        ms += b;
        grad.iter_mut().zip(g).for_each(|(x, y)| *x += y);
    }
    Ok((combine(ns, ntp_n, ms, mtp_n, cfg.mtp_alpha)?, grad))
}

/// Loss only; the same quantity [`batch_loss_and_grad`] differentiates.
pub(crate) fn batch_loss(params: &Parameters, batch: &[Example<'_>], cfg: &LossConfig) -> Result<LossParts> {
    let vocab = params.config.vocab_size;
    let (mut ns, mut nn, mut ms, mut mn) = (0.0, 0, 0.0, 0);
    for ex in batch {
        let out = forward(params, ex.tokens, ex.mask)?;
        let a = ce_sum(&out.ntp_logits, ex.ntp_labels, vocab, cfg.ignore_label);
        let b = ce_sum(&out.mtp_logits, ex.mtp_labels, vocab, cfg.ignore_label);
        ns += a.0;
        nn += a.1;
        ms += b.0;
        mn += b.1;
    }
    combine(ns, nn, ms, mn, cfg.mtp_alpha)
}
