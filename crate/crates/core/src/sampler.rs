//! Language sampling distribution and cross-lingual constraint flags.
//!
//! The probability of drawing language `l` interpolates between its natural
//! share of the corpus and an upsampling prior:
//!
//! ```text
//! P(l) = alpha * |D_l| / sum_j |D_j| + (1 - alpha) * beta_l
//! ```
//!
//! `rho` is the per-sequence probability that a packed sequence is forced to
//! hold documents from at least two languages.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusStats, LanguageClass};
use crate::error::{Error, Result};
use crate::rng::{streams, CounterRng};

pub const SUM_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub alpha_temp: f64,
    pub beta: BTreeMap<String, f64>,
    pub rho: f64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(alpha_temp: f64, beta: BTreeMap<String, f64>, rho: f64, seed: u64) -> Result<Self> {
        let cfg = Self { alpha_temp, beta, rho, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Size-proportional sampling (`alpha = 1`), uniform prior.
    pub fn proportional(languages: &[&str], rho: f64, seed: u64) -> Result<Self> {
        let n = languages.len().max(1) as f64;
        let beta = languages.iter().map(|l| ((*l).to_owned(), 1.0 / n)).collect();
        Self::new(1.0, beta, rho, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_temp) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha_temp)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::invalid(format!("rho {} outside [0, 1]", self.rho)));
        }
        if let Some((l, b)) = self.beta.iter().find(|(_, b)| !(**b >= 0.0 && b.is_finite())) {
            return Err(Error::invalid(format!("beta[{l}] = {b} is negative")));
        }
        let sum: f64 = self.beta.values().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::invalid(format!("beta sums to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Parses `en=0.2,ko=0.6,...`.
pub fn parse_beta(text: &str) -> Result<BTreeMap<String, f64>> {
    let mut beta = BTreeMap::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("beta entry {part:?} is not lang=value")))?;
        let v: f64 = v.trim().parse().map_err(|_| Error::invalid(format!("beta value {v:?} is not a number")))?;
        if beta.insert(k.trim().to_owned(), v).is_some() {
            return Err(Error::invalid(format!("beta lists {k:?} twice")));
        }
    }
    Ok(beta)
}

/// Categorical distribution over language codes, in code order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageDistribution {
    probs: BTreeMap<String, f64>,
}

impl LanguageDistribution {
    pub fn from_probs(probs: BTreeMap<String, f64>) -> Result<Self> {
        if probs.values().any(|p| !(*p >= 0.0 && p.is_finite())) {
            return Err(Error::invalid("negative or non-finite probability"));
        }
        let sum: f64 = probs.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("probabilities sum to {sum}")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &BTreeMap<String, f64> {
        &self.probs
    }

    pub fn prob(&self, lang: &str) -> f64 {
        self.probs.get(lang).copied().unwrap_or(0.0)
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.probs.keys().map(String::as_str)
    }

    /// Inverse-CDF draw over the languages accepted by `allow`, renormalised.
    /// Returns `None` when no allowed language has positive mass.
    pub fn sample_where(&self, u: f64, mut allow: impl FnMut(&str) -> bool) -> Option<&str> {
        let allowed: Vec<(&str, f64)> =
            self.probs.iter().filter(|(l, p)| **p > 0.0 && allow(l)).map(|(l, p)| (l.as_str(), *p)).collect();
        let total: f64 = allowed.iter().map(|(_, p)| p).sum();
        if allowed.is_empty() || total <= 0.0 {
            return None;
        }
        let target = u * total;
        let mut acc = 0.0;
        for &(l, p) in &allowed {
            acc += p;
            if target < acc {
                return Some(l);
            }
        }
        allowed.last().map(|(l, _)| *l)
    }

    pub fn sample(&self, u: f64) -> Option<&str> {
        self.sample_where(u, |_| true)
    }
}

/// Evaluates the interpolated sampling probability for every language.
pub fn language_distribution(config: &SamplerConfig, stats: &CorpusStats) -> Result<LanguageDistribution> {
    config.validate()?;
    if stats.total_tokens == 0 {
        return Err(Error::invalid("empty corpus: total size is zero"));
    }
    if let Some(l) = stats.languages.keys().find(|l| !config.beta.contains_key(*l)) {
        return Err(Error::invalid(format!("language {l:?} has no beta entry")));
    }
    if let Some(l) = config.beta.keys().find(|l| !stats.languages.contains_key(*l)) {
        return Err(Error::invalid(format!("beta names {l:?}, which is absent from the corpus")));
    }
    let total = stats.total_tokens as f64;
    let a = config.alpha_temp;
    let probs = config
        .beta
        .iter()
        .map(|(l, &b)| {
            let natural = stats.tokens(l) as f64 / total;
            (l.clone(), a * natural + (1.0 - a) * b)
        })
        .collect();
    Ok(LanguageDistribution { probs })
}

/// The `index`-th language draw of the config's seed.
pub fn draw_language<'d>(config: &SamplerConfig, dist: &'d LanguageDistribution, index: u64) -> &'d str {
    let mut rng = CounterRng::new(config.seed, streams::LANGUAGE_DRAWS);
    dist.sample(rng.unit_at(index)).expect("distribution has positive mass")
}

/// Convenience: `n` consecutive draws starting at index 0.
pub fn draw_languages<'d>(config: &SamplerConfig, dist: &'d LanguageDistribution, n: usize) -> Vec<&'d str> {
    let mut rng = CounterRng::new(config.seed, streams::LANGUAGE_DRAWS);
    (0..n).map(|_| dist.sample(rng.next_unit()).expect("distribution has positive mass")).collect()
}

/// Whether sequence `index` must be cross-lingual: an independent
/// Bernoulli(rho) draw.
pub fn constraint_flag(config: &SamplerConfig, index: u64) -> bool {
    CounterRng::new(config.seed, streams::CONSTRAINT_FLAGS).unit_at(index) < config.rho
}

pub fn constraint_flags(config: &SamplerConfig, n_sequences: usize) -> Vec<bool> {
    let mut rng = CounterRng::new(config.seed, streams::CONSTRAINT_FLAGS);
    (0..n_sequences).map(|_| rng.next_unit() < config.rho).collect()
}

/// Target token share per language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixturePlan {
    pub shares: BTreeMap<String, f64>,
}

/// Multilingual volume multiplier applied when entering the annealing stage.
pub const ANNEAL_MULTILINGUAL_BOOST: f64 = 3.0;

impl MixturePlan {
    pub fn from_distribution(dist: &LanguageDistribution) -> Self {
        Self { shares: dist.probs.clone() }
    }

    /// Builds a plan from unnormalised weights, e.g. `8.5 : 1 : 0.5`.
    pub fn from_ratio(weights: &[(&str, f64)]) -> Result<Self> {
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        if total <= 0.0 || weights.iter().any(|(_, w)| *w < 0.0) {
            return Err(Error::invalid("mixture weights must be non-negative with positive sum"));
        }
        Ok(Self { shares: weights.iter().map(|(l, w)| ((*l).to_owned(), w / total)).collect() })
    }

    /// Scales the share of every language whose class matches by `factor`
    /// and renormalises.
    pub fn boost_class(&self, class: LanguageClass, factor: f64) -> Result<Self> {
        if !(factor >= 0.0 && factor.is_finite()) {
            return Err(Error::invalid(format!("boost factor {factor} must be non-negative")));
        }
        let weights: Vec<(&str, f64)> = self
            .shares
            .iter()
            .map(|(l, s)| (l.as_str(), if LanguageClass::infer(l) == class { s * factor } else { *s }))
            .collect();
        Self::from_ratio(&weights)
    }

    /// The annealing-stage plan: multilingual volume tripled.
    pub fn anneal(&self) -> Result<Self> {
        self.boost_class(LanguageClass::Multilingual, ANNEAL_MULTILINGUAL_BOOST)
    }

    /// Per-language report against the corpus' natural shares.
    pub fn report(&self, stats: &CorpusStats, token_budget: Option<u64>) -> Vec<MixtureRow> {
        let total = stats.total_tokens.max(1) as f64;
        self.shares
            .iter()
            .map(|(l, &share)| {
                let natural = stats.tokens(l) as f64 / total;
                let available = stats.tokens(l);
                let target_tokens = token_budget.map(|b| (share * b as f64).round() as u64);
                MixtureRow {
                    lang: l.clone(),
                    natural_share: natural,
                    target_share: share,
                    upsampling: if natural > 0.0 { share / natural } else { f64::INFINITY },
                    target_tokens,
                    epochs: target_tokens.map(|t| if available > 0 { t as f64 / available as f64 } else { f64::INFINITY }),
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MixtureRow {
    pub lang: String,
    pub natural_share: f64,
    pub target_share: f64,
    /// target / natural share.
    pub upsampling: f64,
    pub target_tokens: Option<u64>,
    /// Passes over the available tokens needed to hit the target.
    pub epochs: Option<f64>,
}
