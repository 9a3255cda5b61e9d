//! Cross-lingual prediction consistency over parallel items.
//!
//! Given per-item correctness in a source language (E) and a target language
//! (K), reports the conditional rates used to judge transfer:
//!
//! - `E(T)->K(T)`: P(target correct | source correct)
//! - `E(F)->K(T)`: P(target correct | source wrong)
//! - `K(F)->E(T)`: P(source correct | target wrong)
//!
//! A conditional whose conditioning set is empty is `None` ("undefined").

use std::collections::HashSet;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionPair {
    pub item_id: String,
    pub src_correct: bool,
    pub tgt_correct: bool,
}

impl PredictionPair {
    pub fn new(item_id: impl Into<String>, src_correct: bool, tgt_correct: bool) -> Self {
        Self { item_id: item_id.into(), src_correct, tgt_correct }
    }

    pub fn swapped(&self) -> Self {
        Self { item_id: self.item_id.clone(), src_correct: self.tgt_correct, tgt_correct: self.src_correct }
    }
}

/// 2x2 contingency counts; `tf` is source true, target false.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tt: u64,
    pub tf: u64,
    pub ft: u64,
    pub ff: u64,
}

impl Counts {
    pub fn add(&mut self, p: &PredictionPair) {
        match (p.src_correct, p.tgt_correct) {
            (true, true) => self.tt += 1,
            (true, false) => self.tf += 1,
            (false, true) => self.ft += 1,
            (false, false) => self.ff += 1,
        }
    }

    /// Associative merge of partial counts.
    pub fn merge(self, o: Counts) -> Counts {
        Counts { tt: self.tt + o.tt, tf: self.tf + o.tf, ft: self.ft + o.ft, ff: self.ff + o.ff }
    }

    pub fn total(&self) -> u64 {
        self.tt + self.tf + self.ft + self.ff
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub items: u64,
    pub counts: Counts,
    #[serde(rename = "E(T)->K(T)")]
    pub e_t_k_t: Option<f64>,
    #[serde(rename = "K(F)->E(T)")]
    pub k_f_e_t: Option<f64>,
    #[serde(rename = "E(F)->K(T)")]
    pub e_f_k_t: Option<f64>,
    #[serde(rename = "K(T)->E(T)")]
    pub k_t_e_t: Option<f64>,
    pub src_accuracy: f64,
    pub tgt_accuracy: f64,
}

impl ConsistencyReport {
    pub fn from_counts(c: Counts) -> Result<Self> {
        let n = c.total();
        if n == 0 {
            return Err(Error::invalid("no prediction pairs"));
        }
        Ok(Self {
            items: n,
            counts: c,
            e_t_k_t: ratio(c.tt, c.tt + c.tf),
            k_f_e_t: ratio(c.tf, c.tf + c.ff),
            e_f_k_t: ratio(c.ft, c.ft + c.ff),
            k_t_e_t: ratio(c.tt, c.tt + c.ft),
            src_accuracy: (c.tt + c.tf) as f64 / n as f64,
            tgt_accuracy: (c.tt + c.ft) as f64 / n as f64,
        })
    }

    /// Text table in the column order E(T)->K(T), K(F)->E(T), E(F)->K(T).
    pub fn to_text(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "undefined".to_owned(), |x| format!("{x:.4}"));
        format!(
            "{:<8} {:>12} {:>12} {:>12}\n{:<8} {:>12} {:>12} {:>12}\nsource accuracy {:.4}, target accuracy {:.4}\n",
            "items",
            "E(T)->K(T)",
            "K(F)->E(T)",
            "E(F)->K(T)",
            self.items,
            f(self.e_t_k_t),
            f(self.k_f_e_t),
            f(self.e_f_k_t),
            self.src_accuracy,
            self.tgt_accuracy,
        )
    }
}

pub fn consistency_metrics(pairs: &[PredictionPair]) -> Result<ConsistencyReport> {
    let mut c = Counts::default();
    pairs.iter().for_each(|p| c.add(p));
    ConsistencyReport::from_counts(c)
}

#[derive(Deserialize)]
struct PairRecord {
    item_id: Option<String>,
    src_correct: Option<bool>,
    tgt_correct: Option<bool>,
}

/// Reads `{item_id, src_correct, tgt_correct}` lines. Records missing either
/// language and duplicate ids are rejected.
pub fn read_pairs<R: BufRead>(r: R) -> Result<Vec<PredictionPair>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let rec_err = |message: String| Error::Record { line: line_no, message };
        let line = line.map_err(|e| rec_err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line).map_err(|e| rec_err(format!("malformed record: {e}")))?;
        let id = rec.item_id.ok_or_else(|| rec_err("missing item_id".into()))?;
        let (Some(src), Some(tgt)) = (rec.src_correct, rec.tgt_correct) else {
            return Err(rec_err(format!("item {id:?} is not answered in both languages")));
        };
        if !seen.insert(id.clone()) {
            return Err(rec_err(format!("duplicate item_id {id:?}")));
        }
        out.push(PredictionPair::new(id, src, tgt));
    }
    Ok(out)
}
