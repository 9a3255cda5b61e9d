//! Fixtures shared by the benchmarks in `benches/`.

use xlda_core::packer::{pack_ordered, queues_from_documents};
use xlda_core::rng::CounterRng;
use xlda_core::{CorpusStats, Document, LanguageTag, MaskPolicy, MaskSpec, PackedSequence, PackerConfig};

const LANGS: [&str; 4] = ["en", "ko", "ja", "code"];

/// Random documents over four languages, deterministic in `seed`.
pub fn corpus(n_docs: usize, mean_len: u64, vocab: u32, seed: u64) -> Vec<Document> {
    let mut rng = CounterRng::new(seed, 0);
    (0..n_docs)
        .map(|i| {
            let len = 1 + rng.next_below(2 * mean_len) as usize;
            let tokens = (0..len).map(|_| 1 + rng.next_below(vocab as u64 - 1) as u32).collect();
            Document::new(format!("d{i}"), LanguageTag::new(LANGS[i % LANGS.len()]).unwrap(), tokens, None).unwrap()
        })
        .collect()
}

pub fn stats(docs: &[Document]) -> CorpusStats {
    CorpusStats::from_documents(docs)
}

pub fn queues(docs: &[Document]) -> std::collections::BTreeMap<String, std::collections::VecDeque<Document>> {
    queues_from_documents(docs.to_vec())
}

/// A packed sequence of `seq_len` tokens holding documents of roughly `mean_len`.
pub fn sequence(seq_len: usize, mean_len: u64, vocab: u32) -> PackedSequence {
    let docs = corpus(4 * seq_len / mean_len as usize + 4, mean_len, vocab, 7);
    pack_ordered(&docs, &PackerConfig::with_seq_len(seq_len)).unwrap().remove(0)
}

pub fn mask(policy: MaskPolicy, seq_len: usize, mean_len: u64) -> MaskSpec {
    MaskSpec::for_sequence(policy, &sequence(seq_len, mean_len, 1000)).unwrap()
}
