//! Quantile quality filtering.
//!
//! Scores come from an external quality model on a 0-5 scale. Each language
//! keeps its own top fraction; the fraction depends on the training stage and
//! on the language class.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, LanguageClass};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Anneal,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "anneal" => Ok(Stage::Anneal),
            other => Err(Error::invalid(format!("unknown stage {other:?}"))),
        }
    }
}

pub const DEFAULT_BINARIZE_THRESHOLD: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub keep_fraction: f64,
    pub binarize_threshold: f64,
    pub stage: Stage,
}

impl FilterSpec {
    pub fn new(keep_fraction: f64, stage: Stage) -> Result<Self> {
        let spec = Self { keep_fraction, binarize_threshold: DEFAULT_BINARIZE_THRESHOLD, stage };
        spec.validate()?;
        Ok(spec)
    }

    pub fn preset(stage: Stage, class: LanguageClass) -> Result<Self> {
        Self::new(stage_preset(stage, class)?, stage)
    }

    pub fn validate(&self) -> Result<()> {
        validate_fraction(self.keep_fraction)
    }
}

fn validate_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("keep fraction {f} outside (0, 1]")))
    }
}

/// Published keep fractions. Math/code data is filtered like the
/// non-English pool.
pub fn stage_preset(stage: Stage, class: LanguageClass) -> Result<f64> {
    Ok(match (stage, class) {
        (Stage::Pretrain, LanguageClass::English) => 0.80,
        (Stage::Pretrain, LanguageClass::Multilingual | LanguageClass::MathCode) => 0.50,
        (Stage::Anneal, LanguageClass::English) => 0.20,
        (Stage::Anneal, LanguageClass::Multilingual | LanguageClass::MathCode) => 0.10,
    })
}

/// Number of documents retained out of `n`.
pub fn retained_count(n: usize, keep_fraction: f64) -> usize {
    // Guard against 0.3 * 10 = 3.0000000000000004 rounding up to 4.
    let exact = keep_fraction * n as f64;
    let rounded = exact.round();
    let k = if (exact - rounded).abs() <= 1e-9 * exact.max(1.0) { rounded } else { exact.ceil() };
    (k as usize).min(n)
}

/// Keeps the top `ceil(keep_fraction * n)` documents by score, ties broken
/// by ascending id. Retained documents are returned in input order.
pub fn quantile_filter(docs: &[Document], keep_fraction: f64) -> Result<Vec<Document>> {
    validate_fraction(keep_fraction)?;
    let unscored: Vec<String> = docs.iter().filter(|d| d.score.is_none()).map(|d| d.id.clone()).collect();
    if !unscored.is_empty() {
        return Err(Error::Unscored(unscored));
    }
    let k = retained_count(docs.len(), keep_fraction);
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.sort_by(|&a, &b| rank_order(&docs[a], &docs[b]));
    let mut keep = vec![false; docs.len()];
    for &i in &order[..k] {
        keep[i] = true;
    }
    Ok(docs.iter().zip(keep).filter(|(_, k)| *k).map(|(d, _)| d.clone()).collect())
}

/// Best first: higher score, then smaller id.
fn rank_order(a: &Document, b: &Document) -> Ordering {
    let (sa, sb) = (a.score.unwrap_or(f64::NEG_INFINITY), b.score.unwrap_or(f64::NEG_INFINITY));
    sb.total_cmp(&sa).then_with(|| a.id.cmp(&b.id))
}

/// Filters each language separately. The fraction is `keep_override` when
/// given, otherwise the stage preset for each document's language class.
/// Output keeps input order.
pub fn filter_by_language(docs: &[Document], stage: Stage, keep_override: Option<f64>) -> Result<Vec<Document>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, d) in docs.iter().enumerate() {
        groups.entry(d.lang.code()).or_default().push(i);
    }
    let mut keep = vec![false; docs.len()];
    for indices in groups.values() {
        let group: Vec<Document> = indices.iter().map(|&i| docs[i].clone()).collect();
        let fraction = match keep_override {
            Some(f) => f,
            None => stage_preset(stage, group[0].lang.class())?,
        };
        let retained = quantile_filter(&group, fraction)?;
        let mut r = retained.iter().peekable();
        for (&i, d) in indices.iter().zip(&group) {
            if r.peek().is_some_and(|x| x.id == d.id) {
                keep[i] = true;
                r.next();
            }
        }
    }
    Ok(docs.iter().zip(keep).filter(|(_, k)| *k).map(|(d, _)| d.clone()).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
}

/// Positive iff `score >= threshold` (default threshold 3).
pub fn binarize(score: f64) -> Result<Label> {
    binarize_at(score, DEFAULT_BINARIZE_THRESHOLD)
}

pub fn binarize_at(score: f64, threshold: f64) -> Result<Label> {
    if !(0.0..=Document::MAX_SCORE).contains(&score) {
        return Err(Error::invalid(format!("score {score} outside [0, 5]")));
    }
    Ok(if score >= threshold { Label::Positive } else { Label::Negative })
}
