//! Language-tagged documents and their line-delimited record format.
//!
//! One JSON object per line:
//!
//! ```text
//! {"id":"d1","lang":"ko","tokens":[5,9,2],"score":3.5}
//! {"id":"d2","lang":"en","text":"raw text, tokenized by a caller callback"}
//! ```
//!
//! Field names are configurable through [`Schema`].

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Coarse class of a language, used to pick filter presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LanguageClass {
    English,
    Multilingual,
    MathCode,
}

impl LanguageClass {
    /// Default class for a language code: `en` is English, `math`/`code`
    /// (and `code-*` style tags) are math/code, everything else multilingual.
    pub fn infer(code: &str) -> Self {
        match code {
            "en" => LanguageClass::English,
            "math" | "code" => LanguageClass::MathCode,
            c if c.starts_with("code") || c.starts_with("math") => LanguageClass::MathCode,
            _ => LanguageClass::Multilingual,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LanguageClass::English => "english",
            LanguageClass::Multilingual => "multilingual",
            LanguageClass::MathCode => "math_code",
        }
    }
}

impl std::str::FromStr for LanguageClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "english" => Ok(LanguageClass::English),
            "multilingual" => Ok(LanguageClass::Multilingual),
            "math_code" => Ok(LanguageClass::MathCode),
            other => Err(Error::invalid(format!("unknown language class {other:?}"))),
        }
    }
}

impl fmt::Display for LanguageClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LanguageTag {
    code: String,
    class: LanguageClass,
}

impl LanguageTag {
    pub const MAX_CODE_LEN: usize = 8;

    /// Validated tag with the class inferred from the code.
    pub fn new(code: &str) -> Result<Self> {
        Self::with_class(code, LanguageClass::infer(code))
    }

    pub fn with_class(code: &str, class: LanguageClass) -> Result<Self> {
        if code.is_empty() {
            return Err(Error::invalid("empty language tag"));
        }
        if code.len() > Self::MAX_CODE_LEN {
            return Err(Error::invalid(format!(
                "language tag {code:?} longer than {} characters",
                Self::MAX_CODE_LEN
            )));
        }
        if code.chars().any(|c| c.is_uppercase()) {
            return Err(Error::invalid(format!("language tag {code:?} is not lowercase")));
        }
        Ok(Self { code: code.to_owned(), class })
    }

    pub fn code(&self) -> &str {
        &self.code
    }

    pub fn class(&self) -> LanguageClass {
        self.class
    }
}

impl fmt::Display for LanguageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub lang: LanguageTag,
    pub tokens: Vec<u32>,
    pub score: Option<f64>,
}

impl Document {
    pub const MAX_SCORE: f64 = 5.0;

    pub fn new(id: impl Into<String>, lang: LanguageTag, tokens: Vec<u32>, score: Option<f64>) -> Result<Self> {
        let doc = Self { id: id.into(), lang, tokens, score };
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::invalid("empty document id"));
        }
        if self.tokens.is_empty() {
            return Err(Error::invalid(format!("document {:?} has no tokens", self.id)));
        }
        if let Some(s) = self.score {
            if !(0.0..=Self::MAX_SCORE).contains(&s) {
                return Err(Error::invalid(format!("score {s} of {:?} outside [0, 5]", self.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Field names of the record format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub id: String,
    pub lang: String,
    pub tokens: String,
    pub text: String,
    pub score: String,
    /// Optional explicit language class; inferred from the code when absent.
    pub class: String,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            id: "id".into(),
            lang: "lang".into(),
            tokens: "tokens".into(),
            text: "text".into(),
            score: "score".into(),
            class: "class".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    #[default]
    FailFast,
    SkipAndCount,
}

#[derive(Clone, Debug, Default)]
pub struct IngestOptions {
    pub schema: Schema,
    pub on_error: ErrorMode,
}

/// Caller-supplied tokenizer for records that carry raw text.
pub type Tokenizer<'a> = &'a (dyn Fn(&str) -> Vec<u32> + Sync);

/// A malformed line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for RecordError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// Streaming reader over a record file. Lines are numbered from 1; blank
/// lines are ignored.
pub struct Ingest<'a, R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    schema: Schema,
    tokenizer: Option<Tokenizer<'a>>,
}

impl<'a, R: BufRead> Ingest<'a, R> {
    pub fn new(reader: R, schema: Schema, tokenizer: Option<Tokenizer<'a>>) -> Self {
        Self { lines: reader.lines(), line_no: 0, schema, tokenizer }
    }
}

impl<'a> Ingest<'a, BufReader<File>> {
    pub fn open(path: &Path, schema: Schema, tokenizer: Option<Tokenizer<'a>>) -> Result<Self> {
        let file = File::open(path).map_err(|source| Error::Io { path: path.to_owned(), source })?;
        Ok(Self::new(BufReader::new(file), schema, tokenizer))
    }
}

impl<R: BufRead> Iterator for Ingest<'_, R> {
    type Item = std::result::Result<Document, RecordError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(RecordError { line: self.line_no, message: e.to_string() })),
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(
                parse_record(&line, &self.schema, self.tokenizer)
                    .map_err(|message| RecordError { line: self.line_no, message }),
            );
        }
    }
}

fn parse_record(line: &str, schema: &Schema, tokenizer: Option<Tokenizer<'_>>) -> std::result::Result<Document, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("malformed record: {e}"))?;
    let obj = value.as_object().ok_or("record is not an object")?;

    let id = match obj.get(&schema.id) {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        Some(Value::String(_)) => return Err("empty document id".into()),
        Some(_) => return Err(format!("field {:?} is not a string", schema.id)),
        None => return Err(format!("missing field {:?}", schema.id)),
    };
    let code = match obj.get(&schema.lang) {
        Some(Value::String(s)) => s.as_str(),
        Some(_) => return Err(format!("field {:?} is not a string", schema.lang)),
        None => return Err(format!("missing field {:?}", schema.lang)),
    };
    let class = match obj.get(&schema.class) {
        Some(Value::String(c)) => c.parse::<LanguageClass>().map_err(|e| e.to_string())?,
        Some(Value::Null) | None => LanguageClass::infer(code),
        Some(_) => return Err(format!("field {:?} is not a string", schema.class)),
    };
    let lang = LanguageTag::with_class(code, class).map_err(|e| e.to_string())?;

    let tokens = match (obj.get(&schema.tokens), obj.get(&schema.text)) {
        (Some(Value::Array(items)), _) => items
            .iter()
            .map(|v| {
                v.as_u64()
                    .and_then(|t| u32::try_from(t).ok())
                    .ok_or_else(|| format!("token {v} is not a u32 id"))
            })
            .collect::<std::result::Result<Vec<u32>, String>>()?,
        (Some(_), _) => return Err(format!("field {:?} is not an array", schema.tokens)),
        (None, Some(Value::String(text))) => match tokenizer {
            Some(tok) => tok(text),
            None => return Err("raw text record but no tokenizer supplied".into()),
        },
        (None, Some(_)) => return Err(format!("field {:?} is not a string", schema.text)),
        (None, None) => return Err(format!("record has neither {:?} nor {:?}", schema.tokens, schema.text)),
    };

    let score = match obj.get(&schema.score) {
        Some(Value::Number(n)) => Some(n.as_f64().ok_or("score is not finite")?),
        Some(Value::Null) | None => None,
        Some(_) => return Err(format!("field {:?} is not a number", schema.score)),
    };

    Document::new(id, lang, tokens, score).map_err(|e| e.to_string())
}

/// Result of reading a whole file.
#[derive(Clone, Debug, Default)]
pub struct IngestOutcome {
    pub documents: Vec<Document>,
    /// Lines skipped under [`ErrorMode::SkipAndCount`].
    pub errors: Vec<RecordError>,
}

/// Reads every record of `path`. Malformed lines either abort (fail-fast) or
/// are collected; duplicate ids always abort.
pub fn ingest(path: &Path, options: &IngestOptions, tokenizer: Option<Tokenizer<'_>>) -> Result<IngestOutcome> {
    let reader = Ingest::open(path, options.schema.clone(), tokenizer)?;
    collect(reader, options.on_error)
}

/// Same as [`ingest`] over any buffered reader.
pub fn ingest_reader<R: BufRead>(
    reader: R,
    options: &IngestOptions,
    tokenizer: Option<Tokenizer<'_>>,
) -> Result<IngestOutcome> {
    collect(Ingest::new(reader, options.schema.clone(), tokenizer), options.on_error)
}

fn collect<I>(records: I, mode: ErrorMode) -> Result<IngestOutcome>
where
    I: Iterator<Item = std::result::Result<Document, RecordError>>,
{
    let mut out = IngestOutcome::default();
    let mut seen = HashSet::new();
    for record in records {
        match record {
            Ok(doc) => {
                if !seen.insert(doc.id.clone()) {
                    return Err(Error::DuplicateId(doc.id));
                }
                out.documents.push(doc);
            }
            Err(e) => match mode {
                ErrorMode::FailFast => return Err(Error::Record { line: e.line, message: e.message }),
                ErrorMode::SkipAndCount => out.errors.push(e),
            },
        }
    }
    Ok(out)
}

/// Ingests shards in parallel and merges them in the order given. Error
/// records keep their per-shard line numbers.
pub fn ingest_shards(
    paths: &[PathBuf],
    options: &IngestOptions,
    tokenizer: Option<Tokenizer<'_>>,
) -> Result<Vec<(PathBuf, IngestOutcome)>> {
    let per_shard: Vec<Result<IngestOutcome>> =
        paths.par_iter().map(|p| ingest(p, options, tokenizer)).collect();
    let mut seen = HashSet::new();
    let mut merged = Vec::with_capacity(paths.len());
    for (path, outcome) in paths.iter().zip(per_shard) {
        let outcome = outcome?;
        for doc in &outcome.documents {
            if !seen.insert(doc.id.clone()) {
                return Err(Error::DuplicateId(doc.id.clone()));
            }
        }
        merged.push((path.clone(), outcome));
    }
    Ok(merged)
}

/// Writes documents back in the record format (token form).
pub fn write_records<W: Write>(mut out: W, docs: &[Document], schema: &Schema) -> std::io::Result<()> {
    for doc in docs {
        let mut obj = Map::new();
        obj.insert(schema.id.clone(), Value::String(doc.id.clone()));
        obj.insert(schema.lang.clone(), Value::String(doc.lang.code().to_owned()));
        if doc.lang.class() != LanguageClass::infer(doc.lang.code()) {
            obj.insert(schema.class.clone(), Value::String(doc.lang.class().as_str().to_owned()));
        }
        obj.insert(schema.tokens.clone(), Value::from(doc.tokens.clone()));
        if let Some(s) = doc.score {
            obj.insert(schema.score.clone(), Value::from(s));
        }
        serde_json::to_writer(&mut out, &Value::Object(obj))?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageCounts {
    pub documents: u64,
    pub tokens: u64,
}

/// Per-language document and token counts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub languages: BTreeMap<String, LanguageCounts>,
    pub total_documents: u64,
    pub total_tokens: u64,
}

impl CorpusStats {
    pub fn from_documents<'a, I: IntoIterator<Item = &'a Document>>(docs: I) -> Self {
        let mut stats = Self::default();
        for doc in docs {
            stats.add(doc.lang.code(), doc.len() as u64);
        }
        stats
    }

    pub fn add(&mut self, lang: &str, tokens: u64) {
        let entry = self.languages.entry(lang.to_owned()).or_default();
        entry.documents += 1;
        entry.tokens += tokens;
        self.total_documents += 1;
        self.total_tokens += tokens;
    }

    /// |D_l|, the token count of one language.
    pub fn tokens(&self, lang: &str) -> u64 {
        self.languages.get(lang).map_or(0, |c| c.tokens)
    }

    /// Per-language token counts must add up to the total.
    pub fn is_consistent(&self) -> bool {
        self.languages.values().map(|c| c.tokens).sum::<u64>() == self.total_tokens
            && self.languages.values().map(|c| c.documents).sum::<u64>() == self.total_documents
    }
}

/// UTF-8 byte tokenizer: every byte is its own id. Useful for smoke tests
/// and for raw-text records when no real tokenizer is wired in.
pub fn byte_tokenizer(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn read(text: &str, mode: ErrorMode) -> Result<IngestOutcome> {
        let opts = IngestOptions { on_error: mode, ..Default::default() };
        ingest_reader(Cursor::new(text.to_owned()), &opts, None)
    }

    #[test]
    fn parses_token_record() {
        let out = read(r#"{"id":"d1","lang":"ko","tokens":[5,9,2]}"#, ErrorMode::FailFast).unwrap();
        let d = &out.documents[0];
        assert_eq!(d.id, "d1");
        assert_eq!(d.lang.code(), "ko");
        assert_eq!(d.lang.class(), LanguageClass::Multilingual);
        assert_eq!(d.tokens, vec![5, 9, 2]);
        assert_eq!(d.score, None);
    }

    #[test]
    fn empty_language_tag_is_rejected() {
        let err = read(r#"{"id":"d1","lang":"","tokens":[1]}"#, ErrorMode::FailFast).unwrap_err();
        assert_eq!(err.to_string(), "line 1: empty language tag");
    }

    #[test]
    fn tag_rules() {
        assert!(LanguageTag::new("EN").is_err());
        assert!(LanguageTag::new("abcdefghi").is_err());
        assert!(LanguageTag::new("abcdefgh").is_ok());
        assert_eq!(LanguageTag::new("code").unwrap().class(), LanguageClass::MathCode);
        assert_eq!(LanguageTag::new("en").unwrap().class(), LanguageClass::English);
    }

    #[test]
    fn skip_mode_counts_bad_lines() {
        let text = "{\"id\":\"a\",\"lang\":\"en\",\"tokens\":[1]}\n\
                    not json\n\
                    \n\
                    {\"id\":\"b\",\"lang\":\"en\",\"tokens\":[]}\n\
                    {\"id\":\"c\",\"lang\":\"en\",\"tokens\":[1],\"score\":7}\n\
                    {\"id\":\"d\",\"lang\":\"en\",\"tokens\":[-1]}\n\
                    {\"id\":\"e\",\"lang\":\"en\",\"tokens\":[3],\"score\":2.5}\n";
        let out = read(text, ErrorMode::SkipAndCount).unwrap();
        assert_eq!(out.documents.iter().map(|d| d.id.as_str()).collect::<Vec<_>>(), ["a", "e"]);
        assert_eq!(out.errors.iter().map(|e| e.line).collect::<Vec<_>>(), [2, 4, 5, 6]);
        assert!(read(text, ErrorMode::FailFast).is_err());
    }

    #[test]
    fn duplicate_ids_fail_even_when_skipping() {
        let text = "{\"id\":\"a\",\"lang\":\"en\",\"tokens\":[1]}\n{\"id\":\"a\",\"lang\":\"ko\",\"tokens\":[2]}\n";
        assert!(matches!(read(text, ErrorMode::SkipAndCount), Err(Error::DuplicateId(id)) if id == "a"));
    }

    #[test]
    fn text_records_need_tokenizer() {
        let line = r#"{"id":"t","lang":"en","text":"hi"}"#;
        assert!(read(line, ErrorMode::FailFast).is_err());
        let opts = IngestOptions::default();
        let tok: Tokenizer<'_> = &byte_tokenizer;
        let out = ingest_reader(Cursor::new(line), &opts, Some(tok)).unwrap();
        assert_eq!(out.documents[0].tokens, vec![104, 105]);
    }

    #[test]
    fn custom_schema() {
        let opts = IngestOptions {
            schema: Schema { id: "doc".into(), lang: "language".into(), tokens: "ids".into(), ..Default::default() },
            ..Default::default()
        };
        let out = ingest_reader(Cursor::new(r#"{"doc":"x","language":"ja","ids":[4]}"#), &opts, None).unwrap();
        assert_eq!(out.documents[0].lang.code(), "ja");
    }

    #[test]
    fn stats_arithmetic() {
        let en = LanguageTag::new("en").unwrap();
        let ko = LanguageTag::new("ko").unwrap();
        let docs = vec![
            Document::new("a", en.clone(), vec![1, 2, 3], None).unwrap(),
            Document::new("b", en, vec![1, 2, 3, 4], None).unwrap(),
            Document::new("c", ko, vec![1; 5], None).unwrap(),
        ];
        let s = CorpusStats::from_documents(&docs);
        assert_eq!(s.tokens("en"), 7);
        assert_eq!(s.tokens("ko"), 5);
        assert_eq!(s.total_tokens, 12);
        assert!(s.is_consistent());
        assert_eq!(CorpusStats::from_documents(&[]), CorpusStats::default());
    }

    #[test]
    fn write_then_read_preserves_documents() {
        let docs = vec![
            Document::new("a", LanguageTag::new("en").unwrap(), vec![1, 2], Some(4.5)).unwrap(),
            Document::new("b", LanguageTag::with_class("xx", LanguageClass::MathCode).unwrap(), vec![7], None)
                .unwrap(),
        ];
        let mut buf = Vec::new();
        write_records(&mut buf, &docs, &Schema::default()).unwrap();
        let back = read(std::str::from_utf8(&buf).unwrap(), ErrorMode::FailFast).unwrap();
        assert_eq!(back.documents, docs);
    }
}
