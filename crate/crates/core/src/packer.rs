//! Fixed-length sequence packing.
//!
//! Documents are pulled from per-language queues: the language of every next
//! document is drawn from the sampler's distribution (restricted to queues
//! that still hold data), and each sequence is filled greedily until it is
//! full. A sequence whose constraint flag is set must contain at least two
//! languages; when its first piece would fill the whole window it is cut one
//! token short and the next document is drawn from a different language.
//!
//! Documents that overflow the end of a sequence either continue at the start
//! of the next sequence ([`SplitPolicy::SplitAcrossSequences`]) or lose their
//! tail ([`SplitPolicy::DropTailDoc`]). The remainder of a constraint cut goes
//! back to the front of its language queue.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, LanguageTag};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, fnv1a64, streams, CounterRng};
use crate::sampler::{constraint_flag, LanguageDistribution, SamplerConfig};

pub const DEFAULT_SEQ_LEN: usize = 4096;
pub const MIN_SEQ_LEN: usize = 8;
pub const IGNORE_LABEL: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    #[default]
    SplitAcrossSequences,
    DropTailDoc,
}

impl std::str::FromStr for SplitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split" | "split_across_sequences" => Ok(SplitPolicy::SplitAcrossSequences),
            "drop" | "drop_tail_doc" => Ok(SplitPolicy::DropTailDoc),
            other => Err(Error::invalid(format!("unknown split policy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PackerConfig {
    pub seq_len: usize,
    pub split_policy: SplitPolicy,
    pub pad_token: u32,
    pub ignore_label: u32,
    pub cross_doc_labels: bool,
}

impl Default for PackerConfig {
    fn default() -> Self {
        Self {
            seq_len: DEFAULT_SEQ_LEN,
            split_policy: SplitPolicy::default(),
            pad_token: 0,
            ignore_label: IGNORE_LABEL,
            cross_doc_labels: false,
        }
    }
}

impl PackerConfig {
    pub fn with_seq_len(seq_len: usize) -> Self {
        Self { seq_len, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len < MIN_SEQ_LEN {
            return Err(Error::invalid(format!("seq_len {} below minimum {MIN_SEQ_LEN}", self.seq_len)));
        }
        if u32::try_from(self.seq_len).is_err() {
            return Err(Error::invalid("seq_len does not fit in u32"));
        }
        Ok(())
    }
}

/// A contiguous run of one document inside a packed sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocSpan {
    pub start: usize,
    pub end: usize,
    pub lang: LanguageTag,
    pub doc_id: String,
    pub doc_hash: u64,
    /// Which fragment of the source document this is, counting from 0.
    pub piece_index: u32,
}

impl DocSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub tokens: Vec<u32>,
    pub spans: Vec<DocSpan>,
    pub ntp_labels: Vec<u32>,
    pub mtp_labels: Vec<u32>,
    pub pad_start: usize,
    /// Whether this sequence was required to be cross-lingual. Not stored
    /// in the binary format.
    pub cross_lingual_required: bool,
}

impl PackedSequence {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn languages(&self) -> BTreeSet<&str> {
        self.spans.iter().map(|s| s.lang.code()).collect()
    }

    /// Spans sorted, non-overlapping and exactly covering `[0, pad_start)`.
    pub fn check_tiling(&self) -> Result<()> {
        check_tiling(&self.spans, self.pad_start, self.tokens.len())
    }
}

pub(crate) fn check_tiling(spans: &[DocSpan], pad_start: usize, seq_len: usize) -> Result<()> {
    if pad_start > seq_len {
        return Err(Error::invalid(format!("pad_start {pad_start} beyond seq_len {seq_len}")));
    }
    let mut cursor = 0;
    for s in spans {
        if s.start != cursor || s.end <= s.start {
            return Err(Error::invalid(format!("span [{}, {}) breaks tiling at {cursor}", s.start, s.end)));
        }
        cursor = s.end;
    }
    if cursor != pad_start {
        return Err(Error::invalid(format!("spans end at {cursor}, pad_start is {pad_start}")));
    }
    Ok(())
}

/// Next-token and second-next-token targets for one sequence.
pub fn make_labels(tokens: &[u32], spans: &[DocSpan], pad_start: usize, config: &PackerConfig) -> (Vec<u32>, Vec<u32>) {
    let n = tokens.len();
    let ign = config.ignore_label;
    let mut span_of = vec![usize::MAX; n];
    for (i, s) in spans.iter().enumerate() {
        span_of[s.start..s.end].fill(i);
    }
    let target = |t: usize, ahead: usize| -> u32 {
        let u = t + ahead;
        if t >= pad_start || u >= pad_start {
            return ign;
        }
        if !config.cross_doc_labels && span_of[t] != span_of[u] {
            return ign;
        }
        tokens[u]
    };
    let ntp = (0..n).map(|t| target(t, 1)).collect();
    let mtp = (0..n).map(|t| target(t, 2)).collect();
    (ntp, mtp)
}

/// Counters describing what happened to the input.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackReport {
    pub sequences: u64,
    pub multilingual_sequences: u64,
    pub constrained_sequences: u64,
    pub consumed_tokens: u64,
    pub padding_tokens: u64,
    /// Tail tokens discarded under `drop_tail_doc`.
    pub dropped_tokens: u64,
    pub dropped_pieces: u64,
    /// Tokens still queued when packing stopped.
    pub leftover_tokens: u64,
    /// Packing ended because a constrained sequence had only one language left.
    pub stopped_by_constraint: bool,
}

#[derive(Clone, Debug)]
struct Pending {
    doc: Document,
    offset: usize,
    piece: u32,
}

impl Pending {
    fn remaining(&self) -> usize {
        self.doc.tokens.len() - self.offset
    }
}

/// Streaming packer; an iterator of [`PackedSequence`]s.
pub struct Packer {
    config: PackerConfig,
    sampler: SamplerConfig,
    dist: LanguageDistribution,
    queues: BTreeMap<String, VecDeque<Pending>>,
    carry: Option<Pending>,
    seq_index: u64,
    report: PackReport,
    done: bool,
    with_labels: bool,
}

/// Groups documents into per-language queues, preserving order.
pub fn queues_from_documents(docs: impl IntoIterator<Item = Document>) -> BTreeMap<String, VecDeque<Document>> {
    let mut queues: BTreeMap<String, VecDeque<Document>> = BTreeMap::new();
    for d in docs {
        queues.entry(d.lang.code().to_owned()).or_default().push_back(d);
    }
    queues
}

/// Starts packing. Errors when the config is invalid or when sequences may
/// be constrained (`rho > 0`) but fewer than two languages can be drawn.
pub fn pack_stream(
    queues: BTreeMap<String, VecDeque<Document>>,
    sampler: &SamplerConfig,
    dist: &LanguageDistribution,
    config: &PackerConfig,
) -> Result<Packer> {
    config.validate()?;
    sampler.validate()?;
    let queues: BTreeMap<String, VecDeque<Pending>> = queues
        .into_iter()
        .map(|(l, q)| (l, q.into_iter().map(|doc| Pending { doc, offset: 0, piece: 0 }).collect()))
        .collect();
    let mut packer = Packer {
        config: config.clone(),
        sampler: sampler.clone(),
        dist: dist.clone(),
        queues,
        carry: None,
        seq_index: 0,
        report: PackReport::default(),
        done: false,
        with_labels: true,
    };
    let usable = packer.usable_languages();
    if usable.is_empty() {
        packer.done = true;
        packer.report.leftover_tokens = packer.queued_tokens();
        return Ok(packer);
    }
    if sampler.rho > 0.0 && usable.len() < 2 {
        return Err(Error::ConstraintInfeasible(format!(
            "rho = {} requires sequences with at least two languages, but only {:?} is available",
            sampler.rho,
            usable.iter().next().unwrap()
        )));
    }
    Ok(packer)
}

impl Packer {
    pub fn report(&self) -> &PackReport {
        &self.report
    }

    /// Skips label computation; [`pack_all`] fills labels in parallel.
    fn without_labels(mut self) -> Self {
        self.with_labels = false;
        self
    }

    fn queued_tokens(&self) -> u64 {
        let q: usize = self.queues.values().flat_map(|q| q.iter()).map(Pending::remaining).sum();
        (q + self.carry.as_ref().map_or(0, Pending::remaining)) as u64
    }

    /// Languages with positive probability and queued data.
    fn usable_languages(&self) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = self
            .queues
            .iter()
            .filter(|(l, q)| !q.is_empty() && self.dist.prob(l) > 0.0)
            .map(|(l, _)| l.clone())
            .collect();
        if let Some(c) = &self.carry {
            out.insert(c.doc.lang.code().to_owned());
        }
        out
    }

    fn draw(&mut self, rng: &mut CounterRng, exclude: Option<&str>) -> Option<Pending> {
        let u = rng.next_unit();
        let queues = &self.queues;
        let lang = self
            .dist
            .sample_where(u, |l| Some(l) != exclude && queues.get(l).is_some_and(|q| !q.is_empty()))?
            .to_owned();
        self.queues.get_mut(&lang).and_then(VecDeque::pop_front)
    }

    fn finish(&mut self) {
        self.done = true;
        self.report.leftover_tokens = self.queued_tokens();
    }

    fn build_next(&mut self) -> Option<PackedSequence> {
        if self.done {
            return None;
        }
        let usable = self.usable_languages();
        if usable.is_empty() {
            self.finish();
            return None;
        }
        let required = constraint_flag(&self.sampler, self.seq_index);
        if required && usable.len() < 2 {
            self.report.stopped_by_constraint = true;
            self.finish();
            return None;
        }

        let len = self.config.seq_len;
        let mut rng = CounterRng::new(
            derive_seed(self.sampler.seed, streams::LANGUAGE_DRAWS, self.seq_index),
            streams::LANGUAGE_DRAWS,
        );
        let mut tokens = Vec::with_capacity(len);
        let mut spans: Vec<DocSpan> = Vec::new();
        let mut first_lang: Option<String> = None;
        let mut mixed = false;

        while tokens.len() < len {
            let single_lang = if mixed { None } else { first_lang.clone() };
            let exclude = if required { single_lang.as_deref() } else { None };
            let next = match self.carry.take() {
                Some(c) if exclude.is_none_or(|x| x != c.doc.lang.code()) => Some(c),
                Some(c) => {
                    // Cannot happen: the carry is only consumed first.
                    self.carry = Some(c);
                    self.draw(&mut rng, exclude)
                }
                None => self.draw(&mut rng, exclude),
            };
            let Some(mut piece) = next else { break };

            let room = len - tokens.len();
            let cut_for_constraint = required && spans.is_empty() && piece.remaining() >= len;
            let cap = if cut_for_constraint { len - 1 } else { room };
            let take = piece.remaining().min(cap);

            let start = tokens.len();
            tokens.extend_from_slice(&piece.doc.tokens[piece.offset..piece.offset + take]);
            let code = piece.doc.lang.code().to_owned();
            match &first_lang {
                None => first_lang = Some(code),
                Some(f) if *f != code => mixed = true,
                _ => {}
            }
            spans.push(DocSpan {
                start,
                end: tokens.len(),
                lang: piece.doc.lang.clone(),
                doc_hash: fnv1a64(piece.doc.id.as_bytes()),
                doc_id: piece.doc.id.clone(),
                piece_index: piece.piece,
            });
            self.report.consumed_tokens += take as u64;

            if take < piece.remaining() {
                piece.offset += take;
                piece.piece += 1;
                match self.config.split_policy {
                    SplitPolicy::DropTailDoc => {
                        self.report.dropped_tokens += piece.remaining() as u64;
                        self.report.dropped_pieces += 1;
                    }
                    SplitPolicy::SplitAcrossSequences if cut_for_constraint => {
                        let lang = piece.doc.lang.code().to_owned();
                        self.queues.entry(lang).or_default().push_front(piece);
                    }
                    SplitPolicy::SplitAcrossSequences => self.carry = Some(piece),
                }
            }
        }

        let pad_start = tokens.len();
        tokens.resize(len, self.config.pad_token);
        let (ntp_labels, mtp_labels) = if self.with_labels {
            make_labels(&tokens, &spans, pad_start, &self.config)
        } else {
            (Vec::new(), Vec::new())
        };
        self.report.sequences += 1;
        self.report.padding_tokens += (len - pad_start) as u64;
        self.report.constrained_sequences += u64::from(required);
        self.report.multilingual_sequences += u64::from(mixed);
        self.seq_index += 1;
        Some(PackedSequence { tokens, spans, ntp_labels, mtp_labels, pad_start, cross_lingual_required: required })
    }
}

impl Iterator for Packer {
    type Item = PackedSequence;

    fn next(&mut self) -> Option<PackedSequence> {
        self.build_next()
    }
}

/// Packs everything, computing label tracks on the current rayon pool.
/// Output is identical for any number of threads.
pub fn pack_all(
    queues: BTreeMap<String, VecDeque<Document>>,
    sampler: &SamplerConfig,
    dist: &LanguageDistribution,
    config: &PackerConfig,
) -> Result<(Vec<PackedSequence>, PackReport)> {
    let mut packer = pack_stream(queues, sampler, dist, config)?.without_labels();
    let mut seqs: Vec<PackedSequence> = packer.by_ref().collect();
    seqs.par_iter_mut().for_each(|s| {
        let (ntp, mtp) = make_labels(&s.tokens, &s.spans, s.pad_start, config);
        s.ntp_labels = ntp;
        s.mtp_labels = mtp;
    });
    Ok((seqs, packer.report.clone()))
}

/// Packs an explicit document order with no sampling, filling each sequence
/// greedily. Used for synthetic experiments where adjacency is designed.
pub fn pack_ordered(docs: &[Document], config: &PackerConfig) -> Result<Vec<PackedSequence>> {
    config.validate()?;
    let len = config.seq_len;
    let mut out = Vec::new();
    let mut tokens = Vec::with_capacity(len);
    let mut spans = Vec::new();
    let flush = |tokens: &mut Vec<u32>, spans: &mut Vec<DocSpan>, out: &mut Vec<PackedSequence>| {
        let pad_start = tokens.len();
        tokens.resize(len, config.pad_token);
        let (ntp, mtp) = make_labels(tokens, spans, pad_start, config);
        out.push(PackedSequence {
            tokens: std::mem::take(tokens),
            spans: std::mem::take(spans),
            ntp_labels: ntp,
            mtp_labels: mtp,
            pad_start,
            cross_lingual_required: false,
        });
    };
    for doc in docs {
        let mut offset = 0;
        let mut piece = 0;
        while offset < doc.tokens.len() {
            let take = (doc.tokens.len() - offset).min(len - tokens.len());
            let start = tokens.len();
            tokens.extend_from_slice(&doc.tokens[offset..offset + take]);
            spans.push(DocSpan {
                start,
                end: tokens.len(),
                lang: doc.lang.clone(),
                doc_id: doc.id.clone(),
                doc_hash: fnv1a64(doc.id.as_bytes()),
                piece_index: piece,
            });
            offset += take;
            piece += 1;
            if tokens.len() == len {
                flush(&mut tokens, &mut spans, &mut out);
            }
            if offset < doc.tokens.len() && config.split_policy == SplitPolicy::DropTailDoc {
                break;
            }
        }
    }
    if !tokens.is_empty() {
        flush(&mut tokens, &mut spans, &mut out);
    }
    Ok(out)
}

// Packed binary format (little endian):
//   header: b"XLDA", version u32, seq_len u32, count u64
//   record: tokens u32 x seq_len, pad_start u32, span_count u32,
//           spans (start u32, end u32, lang_idx u16, doc_hash u64) x span_count,
//           ntp u32 x seq_len, mtp u32 x seq_len
// The language table lives in a sidecar text file, one `idx<TAB>code` per line.

pub const MAGIC: [u8; 4] = *b"XLDA";
pub const FORMAT_VERSION: u32 = 1;

/// Contents of a packed file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedFile {
    pub seq_len: usize,
    pub langs: Vec<String>,
    pub sequences: Vec<PackedSequence>,
}

impl PackedFile {
    /// Builds the language table from the codes present, sorted.
    pub fn new(seq_len: usize, sequences: Vec<PackedSequence>) -> Self {
        let langs: BTreeSet<String> =
            sequences.iter().flat_map(|s| s.spans.iter().map(|sp| sp.lang.code().to_owned())).collect();
        Self { seq_len, langs: langs.into_iter().collect(), sequences }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".langs");
    path.with_file_name(name)
}

pub fn encode<W: Write>(mut w: W, file: &PackedFile) -> Result<()> {
    let io = |e: std::io::Error| Error::Format(e.to_string());
    let lang_idx: BTreeMap<&str, u16> = file
        .langs
        .iter()
        .enumerate()
        .map(|(i, l)| Ok((l.as_str(), u16::try_from(i).map_err(|_| Error::Format("too many languages".into()))?)))
        .collect::<Result<_>>()?;
    let seq_len = u32::try_from(file.seq_len).map_err(|_| Error::Format("seq_len exceeds u32".into()))?;
    w.write_all(&MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&seq_len.to_le_bytes()).map_err(io)?;
    w.write_all(&(file.sequences.len() as u64).to_le_bytes()).map_err(io)?;
    let mut buf = Vec::new();
    for s in &file.sequences {
        if s.tokens.len() != file.seq_len || s.ntp_labels.len() != file.seq_len || s.mtp_labels.len() != file.seq_len {
            return Err(Error::Format("sequence length differs from header seq_len".into()));
        }
        buf.clear();
        s.tokens.iter().for_each(|t| buf.extend_from_slice(&t.to_le_bytes()));
        buf.extend_from_slice(&(s.pad_start as u32).to_le_bytes());
        buf.extend_from_slice(&(s.spans.len() as u32).to_le_bytes());
        for sp in &s.spans {
            let idx = *lang_idx
                .get(sp.lang.code())
                .ok_or_else(|| Error::Format(format!("language {:?} missing from table", sp.lang.code())))?;
            buf.extend_from_slice(&(sp.start as u32).to_le_bytes());
            buf.extend_from_slice(&(sp.end as u32).to_le_bytes());
            buf.extend_from_slice(&idx.to_le_bytes());
            buf.extend_from_slice(&sp.doc_hash.to_le_bytes());
        }
        s.ntp_labels.iter().for_each(|t| buf.extend_from_slice(&t.to_le_bytes()));
        s.mtp_labels.iter().for_each(|t| buf.extend_from_slice(&t.to_le_bytes()));
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated file: {e}")))?;
        Ok(b)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn u32_vec(&mut self, n: usize) -> Result<Vec<u32>> {
        let mut raw = vec![0u8; n * 4];
        self.inner.read_exact(&mut raw).map_err(|e| Error::Format(format!("truncated file: {e}")))?;
        Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

/// Decodes a packed stream. Document ids are not stored; decoded spans carry
/// `#<hash>` ids and piece index 0.
pub fn decode<R: Read>(r: R, langs: &[String]) -> Result<PackedFile> {
    let mut r = Reader { inner: r };
    if r.bytes::<4>()? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let seq_len = r.u32()? as usize;
    let count = r.u64()?;
    let tags: Vec<LanguageTag> = langs.iter().map(|l| LanguageTag::new(l)).collect::<Result<_>>()?;
    let mut sequences = Vec::with_capacity(count.min(1 << 20) as usize);
    for i in 0..count {
        let tokens = r.u32_vec(seq_len)?;
        let pad_start = r.u32()? as usize;
        let span_count = r.u32()? as usize;
        if span_count > seq_len {
            return Err(Error::Format(format!("record {i}: {span_count} spans for seq_len {seq_len}")));
        }
        let mut spans = Vec::with_capacity(span_count);
        for _ in 0..span_count {
            let start = r.u32()? as usize;
            let end = r.u32()? as usize;
            let idx = r.u16()? as usize;
            let doc_hash = r.u64()?;
            let lang = tags
                .get(idx)
                .cloned()
                .ok_or_else(|| Error::Format(format!("record {i}: language index {idx} not in table")))?;
            spans.push(DocSpan { start, end, lang, doc_id: format!("#{doc_hash:016x}"), doc_hash, piece_index: 0 });
        }
        check_tiling(&spans, pad_start, seq_len).map_err(|e| Error::Format(format!("record {i}: {e}")))?;
        let ntp_labels = r.u32_vec(seq_len)?;
        let mtp_labels = r.u32_vec(seq_len)?;
        sequences.push(PackedSequence {
            tokens,
            spans,
            ntp_labels,
            mtp_labels,
            pad_start,
            cross_lingual_required: false,
        });
    }
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest).map_err(|e| Error::Format(e.to_string()))? != 0 {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok(PackedFile { seq_len, langs: langs.to_vec(), sequences })
}

pub fn write_sidecar<W: Write>(mut w: W, langs: &[String]) -> std::io::Result<()> {
    for (i, l) in langs.iter().enumerate() {
        writeln!(w, "{i}\t{l}")?;
    }
    w.flush()
}

pub fn read_sidecar<R: BufRead>(r: R) -> Result<Vec<String>> {
    let mut langs = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Format(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let (idx, code) =
            line.split_once('\t').ok_or_else(|| Error::Format(format!("sidecar line {}: expected idx<TAB>code", n + 1)))?;
        let idx: usize = idx.parse().map_err(|_| Error::Format(format!("sidecar line {}: bad index", n + 1)))?;
        if idx != langs.len() {
            return Err(Error::Format(format!("sidecar line {}: index {idx} out of order", n + 1)));
        }
        langs.push(code.to_owned());
    }
    Ok(langs)
}

/// Writes `path` and its `.langs` sidecar.
pub fn write_packed_file(path: &Path, file: &PackedFile) -> Result<()> {
    let create = |p: &Path| File::create(p).map_err(|source| Error::Io { path: p.to_owned(), source });
    encode(BufWriter::new(create(path)?), file)?;
    let side = sidecar_path(path);
    write_sidecar(BufWriter::new(create(&side)?), &file.langs).map_err(|source| Error::Io { path: side, source })
}

pub fn read_packed_file(path: &Path) -> Result<PackedFile> {
    let open = |p: &Path| File::open(p).map_err(|source| Error::Io { path: p.to_owned(), source });
    let langs = read_sidecar(BufReader::new(open(&sidecar_path(path))?))?;
    decode(BufReader::new(open(path)?), &langs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusStats;
    use crate::sampler::language_distribution;

    fn doc(id: &str, lang: &str, len: usize, base: u32) -> Document {
        Document::new(id, LanguageTag::new(lang).unwrap(), (0..len as u32).map(|t| base + t).collect(), None).unwrap()
    }

    fn setup(docs: Vec<Document>, rho: f64, seed: u64) -> (BTreeMap<String, VecDeque<Document>>, SamplerConfig, LanguageDistribution) {
        let stats = CorpusStats::from_documents(&docs);
        let langs: Vec<&str> = stats.languages.keys().map(String::as_str).collect();
        let cfg = SamplerConfig::proportional(&langs, rho, seed).unwrap();
        let dist = language_distribution(&cfg, &stats).unwrap();
        (queues_from_documents(docs), cfg, dist)
    }

    #[test]
    fn split_example() {
        // Lengths [3, 4, 2] into a window of 5, scaled by two to respect the
        // minimum window of 8: [6, 8, 4] into 10.
        let (q, s, d) = setup(vec![doc("a", "en", 6, 10), doc("b", "en", 8, 20), doc("c", "en", 4, 30)], 0.0, 1);
        let (seqs, report) = pack_all(q, &s, &d, &PackerConfig::with_seq_len(10)).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].pad_start, 10);
        assert_eq!(seqs[1].pad_start, 8);
        assert_eq!(report.consumed_tokens, 18);
        assert_eq!(seqs[1].spans[0].doc_id, "b");
        assert_eq!(seqs[1].spans[0].piece_index, 1);
        assert_eq!(&seqs[1].tokens[..4], &[24, 25, 26, 27]);
        assert_eq!((seqs[1].spans[1].start, seqs[1].spans[1].end), (4, 8));
        for s in &seqs {
            s.check_tiling().unwrap();
        }
    }

    #[test]
    fn exact_fit() {
        let (q, s, d) = setup(vec![doc("a", "en", 8, 1)], 0.0, 1);
        let (seqs, _) = pack_all(q, &s, &d, &PackerConfig::with_seq_len(8)).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].spans.len(), 1);
        assert_eq!((seqs[0].spans[0].start, seqs[0].spans[0].end), (0, 8));
        assert_eq!(seqs[0].pad_start, 8);
    }

    #[test]
    fn drop_policy_counts_tails() {
        let (q, s, d) = setup(vec![doc("a", "en", 6, 1), doc("b", "en", 6, 100)], 0.0, 1);
        let cfg = PackerConfig { seq_len: 8, split_policy: SplitPolicy::DropTailDoc, ..Default::default() };
        let (seqs, report) = pack_all(q, &s, &d, &cfg).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(report.consumed_tokens, 8);
        assert_eq!(report.dropped_tokens, 4);
        assert_eq!(report.dropped_pieces, 1);
    }

    #[test]
    fn single_language_with_rho_is_infeasible() {
        let (q, s, d) = setup(vec![doc("a", "en", 6, 1)], 1.0, 1);
        assert!(matches!(pack_stream(q, &s, &d, &PackerConfig::with_seq_len(8)), Err(Error::ConstraintInfeasible(_))));
    }

    #[test]
    fn empty_input_is_empty_stream() {
        let s = SamplerConfig::proportional(&["en"], 1.0, 1).unwrap();
        let d = LanguageDistribution::from_probs([("en".to_owned(), 1.0)].into()).unwrap();
        let mut p = pack_stream(BTreeMap::new(), &s, &d, &PackerConfig::with_seq_len(8)).unwrap();
        assert!(p.next().is_none());
    }

    #[test]
    fn rho_one_forces_two_languages() {
        let mut docs = Vec::new();
        for i in 0..40 {
            docs.push(doc(&format!("en{i}"), "en", 3 + i % 17, 1000));
        }
        for i in 0..40 {
            docs.push(doc(&format!("ko{i}"), "ko", 2 + i % 5, 2000));
        }
        let (q, s, d) = setup(docs, 1.0, 5);
        let (seqs, report) = pack_all(q, &s, &d, &PackerConfig::with_seq_len(16)).unwrap();
        assert!(!seqs.is_empty());
        for s in &seqs {
            assert!(s.languages().len() >= 2, "{:?}", s.spans);
            s.check_tiling().unwrap();
        }
        assert_eq!(report.multilingual_sequences, report.sequences);
    }

    #[test]
    fn long_first_document_is_cut_for_constraint() {
        let (q, s, d) = setup(vec![doc("a", "en", 30, 1), doc("b", "ko", 3, 100)], 1.0, 2);
        let (seqs, report) = pack_all(q, &s, &d, &PackerConfig::with_seq_len(8)).unwrap();
        for s in &seqs {
            assert!(s.languages().len() >= 2);
        }
        // Once ko runs out, the remaining en tokens cannot be packed.
        assert!(report.stopped_by_constraint);
        assert_eq!(report.consumed_tokens + report.leftover_tokens, 33);
    }

    #[test]
    fn labels_single_span() {
        let spans = vec![span(0, 4, "en")];
        let cfg = PackerConfig::default();
        let (ntp, mtp) = make_labels(&[1, 2, 3, 4], &spans, 4, &cfg);
        assert_eq!(ntp, [2, 3, 4, IGNORE_LABEL]);
        assert_eq!(mtp, [3, 4, IGNORE_LABEL, IGNORE_LABEL]);
    }

    #[test]
    fn labels_stop_at_document_boundary() {
        let spans = vec![span(0, 2, "en"), span(2, 4, "ko")];
        let cfg = PackerConfig::default();
        let (ntp, mtp) = make_labels(&[1, 2, 3, 4], &spans, 4, &cfg);
        assert_eq!(ntp, [2, IGNORE_LABEL, 4, IGNORE_LABEL]);
        assert_eq!(mtp, [IGNORE_LABEL; 4]);
        let cross = PackerConfig { cross_doc_labels: true, ..Default::default() };
        let (ntp, mtp) = make_labels(&[1, 2, 3, 4], &spans, 4, &cross);
        assert_eq!(ntp, [2, 3, 4, IGNORE_LABEL]);
        assert_eq!(mtp, [3, 4, IGNORE_LABEL, IGNORE_LABEL]);
    }

    #[test]
    fn labels_padding_tail() {
        let spans = vec![span(0, 2, "en")];
        let (ntp, mtp) = make_labels(&[1, 2, 0, 0, 0], &spans, 2, &PackerConfig { cross_doc_labels: true, ..Default::default() });
        assert_eq!(ntp, [2, IGNORE_LABEL, IGNORE_LABEL, IGNORE_LABEL, IGNORE_LABEL]);
        assert!(mtp.iter().all(|&l| l == IGNORE_LABEL));
    }

    fn span(start: usize, end: usize, lang: &str) -> DocSpan {
        DocSpan {
            start,
            end,
            lang: LanguageTag::new(lang).unwrap(),
            doc_id: format!("{lang}{start}"),
            doc_hash: 0,
            piece_index: 0,
        }
    }

    #[test]
    fn binary_roundtrip_and_layout() {
        let (q, s, d) = setup(vec![doc("a", "en", 5, 1), doc("b", "ko", 7, 50)], 1.0, 3);
        let (seqs, _) = pack_all(q, &s, &d, &PackerConfig::with_seq_len(8)).unwrap();
        let file = PackedFile::new(8, seqs);
        let mut buf = Vec::new();
        encode(&mut buf, &file).unwrap();
        assert_eq!(&buf[..4], b"XLDA");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 8);
        assert_eq!(u64::from_le_bytes(buf[12..20].try_into().unwrap()), file.sequences.len() as u64);
        let spans: usize = file.sequences.iter().map(|s| s.spans.len()).sum();
        assert_eq!(buf.len(), 20 + file.sequences.len() * (8 * 4 * 3 + 8) + spans * 18);

        let back = decode(&buf[..], &file.langs).unwrap();
        assert_eq!(back.sequences.len(), file.sequences.len());
        for (a, b) in back.sequences.iter().zip(&file.sequences) {
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.ntp_labels, b.ntp_labels);
            assert_eq!(a.mtp_labels, b.mtp_labels);
            assert_eq!(a.pad_start, b.pad_start);
            let strip = |s: &DocSpan| (s.start, s.end, s.lang.code().to_owned(), s.doc_hash);
            assert_eq!(a.spans.iter().map(strip).collect::<Vec<_>>(), b.spans.iter().map(strip).collect::<Vec<_>>());
        }
        let mut again = Vec::new();
        encode(&mut again, &back).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn decode_rejects_corruption() {
        assert!(decode(&b"XLDB\x01\0\0\0"[..], &[]).is_err());
        let file = PackedFile::new(8, vec![]);
        let mut buf = Vec::new();
        encode(&mut buf, &file).unwrap();
        buf.push(0);
        assert!(decode(&buf[..], &[]).is_err());
    }

    #[test]
    fn sidecar_roundtrip() {
        let langs = vec!["en".to_owned(), "ko".to_owned()];
        let mut buf = Vec::new();
        write_sidecar(&mut buf, &langs).unwrap();
        assert_eq!(std::str::from_utf8(&buf).unwrap(), "0\ten\n1\tko\n");
        assert_eq!(read_sidecar(&buf[..]).unwrap(), langs);
        assert_eq!(sidecar_path(Path::new("/tmp/x.bin")), Path::new("/tmp/x.bin.langs"));
    }

    #[test]
    fn ordered_packing() {
        let docs = vec![doc("a", "en", 3, 1), doc("b", "ko", 7, 10), doc("c", "en", 2, 20)];
        let seqs = pack_ordered(&docs, &PackerConfig::with_seq_len(8)).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].spans.len(), 2);
        assert_eq!(seqs[1].spans[0].piece_index, 1);
        assert_eq!(seqs[1].pad_start, 4);
    }
}
