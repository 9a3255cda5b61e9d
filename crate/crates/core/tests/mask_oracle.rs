//! Span-based masks against a dense construction written directly from the
//! policy definitions, over every segmentation of short sequences.

use xlda_core::xlda_mask::{MaskPolicy, MaskSpan, MaskSpec};

/// Per-position (doc, lang) labels, `None` for padding.
fn labels(lengths: &[usize], langs: &[u32], seq_len: usize) -> Vec<Option<(usize, u32)>> {
    let mut out = Vec::new();
    for (d, (&n, &l)) in lengths.iter().zip(langs).enumerate() {
        out.extend(std::iter::repeat_n(Some((d, l)), n));
    }
    out.resize(seq_len, None);
    out
}

fn brute(policy: MaskPolicy, lab: &[Option<(usize, u32)>]) -> Vec<bool> {
    let n = lab.len();
    let mut cells = vec![false; n * n];
    for q in 0..n {
        for k in 0..=q {
            let (Some((dq, lq)), Some((dk, lk))) = (lab[q], lab[k]) else { continue };
            cells[q * n + k] = match policy {
                MaskPolicy::XldaFullCausal => true,
                MaskPolicy::IntraDocumentCausal => dq == dk,
                MaskPolicy::CrossLingualBridge => dq == dk || lq != lk,
            };
        }
    }
    cells
}

/// All compositions of `n` into positive parts.
fn compositions(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for mask in 0u32..(1 << (n - 1)) {
        let mut parts = Vec::new();
        let mut len = 1;
        for bit in 0..n - 1 {
            if mask & (1 << bit) != 0 {
                parts.push(len);
                len = 1;
            } else {
                len += 1;
            }
        }
        parts.push(len);
        out.push(parts);
    }
    out
}

/// Restricted growth strings: every way of assigning `k` spans to languages
/// up to renaming.
fn language_patterns(k: usize) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new()];
    for _ in 0..k {
        let mut next = Vec::new();
        for p in &out {
            let max = p.iter().copied().max().map_or(0, |m| m + 1);
            for l in 0..=max {
                let mut q = p.clone();
                q.push(l);
                next.push(q);
            }
        }
        out = next;
    }
    out
}

fn check(policy: MaskPolicy, lengths: &[usize], langs: &[u32], seq_len: usize) {
    let spec = MaskSpec::from_lengths(policy, lengths, langs, seq_len).unwrap();
    let want = brute(policy, &labels(lengths, langs, seq_len));
    let dense = spec.materialize_dense(seq_len).unwrap();
    for q in 0..seq_len {
        for k in 0..seq_len {
            let w = want[q * seq_len + k];
            assert_eq!(spec.is_allowed(q, k).unwrap(), w, "{policy} {lengths:?} {langs:?} ({q},{k})");
            assert_eq!(dense.get(q, k), w);
        }
    }
    assert_eq!(spec.allowed_pair_count(), want.iter().filter(|&&c| c).count() as u64);
}

#[test]
fn exhaustive_segmentations_up_to_twelve() {
    for seq_len in 1..=12 {
        for content in 0..=seq_len {
            for lengths in compositions(content) {
                let k = lengths.len();
                let mut patterns = vec![vec![0; k], (0..k as u32).collect(), (0..k as u32).map(|i| i % 2).collect()];
                if k <= 6 {
                    patterns = language_patterns(k);
                }
                for langs in &patterns {
                    for policy in MaskPolicy::ALL {
                        check(policy, &lengths, langs, seq_len);
                    }
                }
            }
        }
    }
}

#[test]
fn out_of_range_queries_error() {
    let spec = MaskSpec::new(MaskPolicy::XldaFullCausal, vec![MaskSpan { start: 0, end: 3, lang: 0 }], 3, 4).unwrap();
    assert!(spec.is_allowed(4, 0).is_err());
    assert!(spec.is_allowed(0, 4).is_err());
    assert!(!spec.is_allowed(3, 3).unwrap());
}
