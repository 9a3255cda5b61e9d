//! Attention masks over packed sequences.
//!
//! A [`MaskSpec`] keeps only span boundaries; dense matrices are a debug view.
//! Causality and padding are enforced under every policy:
//!
//! - `XldaFullCausal`: plain causal attention over the whole packed window,
//!   across document and language boundaries.
//! - `IntraDocumentCausal`: causal attention within the same span only.
//! - `CrossLingualBridge`: within the same span, or across spans of different
//!   languages; same-language neighbours stay isolated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packer::{check_tiling, DocSpan, PackedSequence};

pub const DEFAULT_DENSE_CAP: usize = 8192;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    #[default]
    XldaFullCausal,
    IntraDocumentCausal,
    CrossLingualBridge,
}

impl MaskPolicy {
    pub const ALL: [MaskPolicy; 3] =
        [MaskPolicy::XldaFullCausal, MaskPolicy::IntraDocumentCausal, MaskPolicy::CrossLingualBridge];

    pub fn short_name(self) -> &'static str {
        match self {
            MaskPolicy::XldaFullCausal => "xlda",
            MaskPolicy::IntraDocumentCausal => "intra",
            MaskPolicy::CrossLingualBridge => "bridge",
        }
    }

    /// Whether two distinct spans `q_span > k_span` may attend.
    fn cross_span(self, q_lang: u32, k_lang: u32) -> bool {
        match self {
            MaskPolicy::XldaFullCausal => true,
            MaskPolicy::IntraDocumentCausal => false,
            MaskPolicy::CrossLingualBridge => q_lang != k_lang,
        }
    }
}

impl std::str::FromStr for MaskPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xlda" | "xlda_full_causal" => Ok(MaskPolicy::XldaFullCausal),
            "intra" | "intra_document_causal" => Ok(MaskPolicy::IntraDocumentCausal),
            "bridge" | "cross_lingual_bridge" => Ok(MaskPolicy::CrossLingualBridge),
            other => Err(Error::invalid(format!("unknown mask policy {other:?}"))),
        }
    }
}

impl std::fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short_name())
    }
}

/// One span boundary as the mask sees it: end offset and a language id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpan {
    pub start: usize,
    pub end: usize,
    pub lang: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    policy: MaskPolicy,
    spans: Vec<MaskSpan>,
    pad_start: usize,
    seq_len: usize,
}

impl MaskSpec {
    /// Validates that spans tile `[0, pad_start)`.
    pub fn new(policy: MaskPolicy, spans: Vec<MaskSpan>, pad_start: usize, seq_len: usize) -> Result<Self> {
        if pad_start > seq_len {
            return Err(Error::invalid(format!("pad_start {pad_start} beyond seq_len {seq_len}")));
        }
        let mut cursor = 0;
        for s in &spans {
            if s.start != cursor || s.end <= s.start {
                return Err(Error::invalid(format!("span [{}, {}) breaks tiling at {cursor}", s.start, s.end)));
            }
            cursor = s.end;
        }
        if cursor != pad_start {
            return Err(Error::invalid(format!("spans end at {cursor}, pad_start is {pad_start}")));
        }
        Ok(Self { policy, spans, pad_start, seq_len })
    }

    /// Builds from span lengths and per-span language ids; no padding beyond
    /// the last span unless `seq_len` is larger.
    pub fn from_lengths(policy: MaskPolicy, lengths: &[usize], langs: &[u32], seq_len: usize) -> Result<Self> {
        if lengths.len() != langs.len() {
            return Err(Error::invalid("lengths and langs differ in length"));
        }
        let mut spans = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for (&n, &lang) in lengths.iter().zip(langs) {
            spans.push(MaskSpan { start, end: start + n, lang });
            start += n;
        }
        Self::new(policy, spans, start, seq_len)
    }

    pub fn from_doc_spans(policy: MaskPolicy, spans: &[DocSpan], pad_start: usize, seq_len: usize) -> Result<Self> {
        check_tiling(spans, pad_start, seq_len)?;
        let mut codes: Vec<&str> = Vec::new();
        let spans = spans
            .iter()
            .map(|s| {
                let code = s.lang.code();
                let lang = match codes.iter().position(|c| *c == code) {
                    Some(i) => i,
                    None => {
                        codes.push(code);
                        codes.len() - 1
                    }
                } as u32;
                MaskSpan { start: s.start, end: s.end, lang }
            })
            .collect();
        Self::new(policy, spans, pad_start, seq_len)
    }

    pub fn for_sequence(policy: MaskPolicy, seq: &PackedSequence) -> Result<Self> {
        Self::from_doc_spans(policy, &seq.spans, seq.pad_start, seq.seq_len())
    }

    pub fn policy(&self) -> MaskPolicy {
        self.policy
    }

    pub fn with_policy(&self, policy: MaskPolicy) -> Self {
        Self { policy, ..self.clone() }
    }

    pub fn spans(&self) -> &[MaskSpan] {
        &self.spans
    }

    pub fn pad_start(&self) -> usize {
        self.pad_start
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Index of the span holding `pos`; `pos` must be below `pad_start`.
    pub fn span_index(&self, pos: usize) -> usize {
        self.spans.partition_point(|s| s.end <= pos)
    }

    pub fn is_allowed(&self, q: usize, k: usize) -> Result<bool> {
        if q >= self.seq_len || k >= self.seq_len {
            return Err(Error::OutOfRange { q, k, seq_len: self.seq_len });
        }
        Ok(self.allowed_unchecked(q, k))
    }

    /// [`Self::is_allowed`] without the range check.
    #[inline]
    pub fn allowed_unchecked(&self, q: usize, k: usize) -> bool {
        if k > q || q >= self.pad_start {
            return false;
        }
        let (sq, sk) = (self.span_index(q), self.span_index(k));
        sq == sk || self.policy.cross_span(self.spans[sq].lang, self.spans[sk].lang)
    }

    /// Allowed keys of query row `q` as half-open ranges, ascending.
    pub fn row_ranges(&self, q: usize) -> Vec<(usize, usize)> {
        if q >= self.pad_start {
            return Vec::new();
        }
        let sq = self.span_index(q);
        let own = self.spans[sq];
        let mut out: Vec<(usize, usize)> = Vec::new();
        for s in &self.spans[..sq] {
            if self.policy.cross_span(own.lang, s.lang) {
                match out.last_mut() {
                    Some(last) if last.1 == s.start => last.1 = s.end,
                    _ => out.push((s.start, s.end)),
                }
            }
        }
        match out.last_mut() {
            Some(last) if last.1 == own.start => last.1 = q + 1,
            _ => out.push((own.start, q + 1)),
        }
        out
    }

    pub fn materialize_dense(&self, seq_len: usize) -> Result<DenseMask> {
        self.materialize_dense_capped(seq_len, DEFAULT_DENSE_CAP, false)
    }

    pub fn materialize_dense_capped(&self, seq_len: usize, cap: usize, force: bool) -> Result<DenseMask> {
        if seq_len != self.seq_len {
            return Err(Error::invalid(format!("seq_len {seq_len} does not match mask length {}", self.seq_len)));
        }
        if seq_len > cap && !force {
            return Err(Error::invalid(format!("dense mask of {seq_len}x{seq_len} exceeds cap {cap}; force to override")));
        }
        let mut cells = vec![false; seq_len * seq_len];
        for q in 0..seq_len {
            for (a, b) in self.row_ranges(q) {
                cells[q * seq_len + a..q * seq_len + b].fill(true);
            }
        }
        Ok(DenseMask { n: seq_len, cells })
    }

    /// Number of allowed (q, k) pairs, from span arithmetic alone.
    pub fn allowed_pair_count(&self) -> u64 {
        let mut total = 0u64;
        for (i, qs) in self.spans.iter().enumerate() {
            let nq = (qs.end - qs.start) as u64;
            total += nq * (nq + 1) / 2;
            for ks in &self.spans[..i] {
                if self.policy.cross_span(qs.lang, ks.lang) {
                    total += nq * (ks.end - ks.start) as u64;
                }
            }
        }
        total
    }

    /// Human-readable span listing.
    pub fn describe(&self) -> String {
        let mut s = format!("policy {} seq_len {} pad_start {}\n", self.policy, self.seq_len, self.pad_start);
        for (i, sp) in self.spans.iter().enumerate() {
            s.push_str(&format!("span {i}: [{}, {}) lang {}\n", sp.start, sp.end, sp.lang));
        }
        s.push_str(&format!("allowed pairs {}\n", self.allowed_pair_count()));
        s
    }
}

/// Row-major boolean matrix, `cells[q * n + k]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseMask {
    pub n: usize,
    pub cells: Vec<bool>,
}

impl DenseMask {
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.cells[q * self.n + k]
    }

    pub fn count(&self) -> u64 {
        self.cells.iter().filter(|c| **c).count() as u64
    }

    /// Plain PBM (P1): 1 for allowed, 0 for blocked.
    pub fn to_pbm(&self) -> String {
        let mut out = format!("P1\n{} {}\n", self.n, self.n);
        for row in self.cells.chunks(self.n.max(1)) {
            let line: Vec<&str> = row.iter().map(|&c| if c { "1" } else { "0" }).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}
