//! Lexical category proportions with a two-proportion z-test, and the
//! smoothed depression score over interval groups of a history.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{group_by_interval, Post, UserHistory, SECONDS_PER_DAY};
use crate::embedding::Provider;
use crate::error::{Error, Result};
use crate::screening::{ScoredRecord, Screener};
use crate::stream::{final_queue, RiskModel};

const BUILTIN_LEXICON: &str = include_str!("../data/lexicon_open.jsonl");

/// Word categories. An entry ending in `*` matches any token with that
/// prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    categories: BTreeMap<String, Vec<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LexiconLine {
    category: String,
    words: Vec<String>,
}

impl Lexicon {
    pub fn new(categories: BTreeMap<String, Vec<String>>) -> Result<Self> {
        let mut clean = BTreeMap::new();
        for (name, words) in categories {
            if name.trim().is_empty() {
                return Err(Error::Config("lexicon category name is empty".into()));
            }
            let mut entries = Vec::with_capacity(words.len());
            for w in words {
                let w = w.trim().to_lowercase();
                if w.is_empty() || w == "*" {
                    return Err(Error::Config(format!("empty entry in lexicon category {name:?}")));
                }
                entries.push(w);
            }
            clean.insert(name, entries);
        }
        if clean.is_empty() {
            return Err(Error::Config("lexicon has no categories".into()));
        }
        Ok(Self { categories: clean })
    }

    /// Line-delimited `{category, words}` records. Repeated categories merge.
    pub fn parse(data: &str) -> Result<Self> {
        let mut categories: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (i, line) in data.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: LexiconLine = serde_json::from_str(line)
                .map_err(|e| Error::Config(format!("lexicon line {}: {e}", i + 1)))?;
            categories.entry(rec.category).or_default().extend(rec.words);
        }
        Self::new(categories)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// The bundled open lexicon with categories `i`, `negemo` and `health`.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_LEXICON).expect("bundled lexicon is valid")
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.categories.keys().map(String::as_str)
    }

    pub fn matches(&self, category: &str, token: &str) -> Result<bool> {
        let entries = self
            .categories
            .get(category)
            .ok_or_else(|| Error::Config(format!("unknown lexicon category {category:?}")))?;
        Ok(entries.iter().any(|e| match e.strip_suffix('*') {
            Some(prefix) => token.starts_with(prefix),
            None => token == e,
        }))
    }
}

/// Lowercase runs of alphabetic characters.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphabetic())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub matches: usize,
    pub total_tokens: usize,
    pub proportion: f64,
}

/// Share of word tokens across the posts (title and body) that fall in the
/// category.
pub fn category_proportion<'a>(
    posts: impl IntoIterator<Item = &'a Post>,
    lexicon: &Lexicon,
    category: &str,
) -> Result<Proportion> {
    lexicon.matches(category, "")?;
    let (mut matches, mut total) = (0, 0);
    for post in posts {
        for tok in word_tokens(&post.encoder_text()) {
            total += 1;
            if lexicon.matches(category, &tok)? {
                matches += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::InvalidInput("no word tokens to count".into()));
    }
    Ok(Proportion {
        matches,
        total_tokens: total,
        proportion: matches as f64 / total as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProportionTest {
    pub x1: u64,
    pub n1: u64,
    pub x2: u64,
    pub n2: u64,
    pub p1: f64,
    pub p2: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Standard normal upper tail `1 - Φ(x)`.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Two-sided z-test for equal proportions with the pooled standard error.
pub fn two_proportion_z(x1: u64, n1: u64, x2: u64, n2: u64) -> Result<ProportionTest> {
    if n1 == 0 || n2 == 0 || x1 > n1 || x2 > n2 {
        return Err(Error::InvalidInput(format!(
            "invalid counts {x1}/{n1} vs {x2}/{n2}"
        )));
    }
    let (p1, p2) = (x1 as f64 / n1 as f64, x2 as f64 / n2 as f64);
    let pooled = (x1 + x2) as f64 / (n1 + n2) as f64;
    let (z, p_value) = if pooled == 0.0 || pooled == 1.0 {
        (0.0, 1.0)
    } else {
        let se = (pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
        let z = (p1 - p2) / se;
        (z, (2.0 * normal_sf(z.abs())).min(1.0))
    };
    Ok(ProportionTest {
        x1,
        n1,
        x2,
        n2,
        p1,
        p2,
        z,
        p_value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexicalComparison {
    pub category: String,
    pub selected: Proportion,
    pub unselected: Proportion,
    pub test: ProportionTest,
}

/// Compares a category's share in selected versus non-selected posts.
pub fn compare_selected(records: &[ScoredRecord], lexicon: &Lexicon, category: &str) -> Result<LexicalComparison> {
    let (sel, unsel): (Vec<Post>, Vec<Post>) = {
        let (a, b): (Vec<&ScoredRecord>, Vec<&ScoredRecord>) = records.iter().partition(|r| r.selected);
        (a.into_iter().map(ScoredRecord::post).collect(), b.into_iter().map(ScoredRecord::post).collect())
    };
    let selected = category_proportion(&sel, lexicon, category)?;
    let unselected = category_proportion(&unsel, lexicon, category)?;
    let test = two_proportion_z(
        selected.matches as u64,
        selected.total_tokens as u64,
        unselected.matches as u64,
        unselected.total_tokens as u64,
    )?;
    Ok(LexicalComparison {
        category: category.to_string(),
        selected,
        unselected,
        test,
    })
}

/// Which probability enters the smoothing recurrence at step `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingVariant {
    /// `s_i = α s_{i-1} + (1-α) pr_{i-1}`.
    #[default]
    Previous,
    /// `s_i = α s_{i-1} + (1-α) pr_i`.
    Current,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePoint {
    pub group_start: i64,
    pub pr: f64,
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub groups: Vec<ScorePoint>,
}

/// Weight on the previous score for a gap of `days` between groups:
/// `0.5 (28 - t) / 27`, clamped to `[0, 0.5]`.
pub fn smoothing_alpha(days: f64) -> f64 {
    (0.5 * (28.0 - days) / 27.0).clamp(0.0, 0.5)
}

pub fn smooth_scores(probs: &[(i64, f64)], variant: SmoothingVariant) -> Result<ScoreSeries> {
    let mut groups: Vec<ScorePoint> = Vec::with_capacity(probs.len());
    for (i, &(t, pr)) in probs.iter().enumerate() {
        if !pr.is_finite() {
            return Err(Error::NonFinite(format!("probability {pr} at group {}", i + 1)));
        }
        let s = match groups.last() {
            None => pr,
            Some(prev) => {
                if t <= prev.group_start {
                    return Err(Error::InvalidInput(format!(
                        "group timestamps must increase (group {})",
                        i + 1
                    )));
                }
                let alpha = smoothing_alpha((t - prev.group_start) as f64 / SECONDS_PER_DAY as f64);
                let input = match variant {
                    SmoothingVariant::Previous => prev.pr,
                    SmoothingVariant::Current => pr,
                };
                alpha * prev.s + (1.0 - alpha) * input
            }
        };
        groups.push(ScorePoint { group_start: t, pr, s });
    }
    Ok(ScoreSeries { groups })
}

/// Groups a history into `interval_days` windows, predicts each window from
/// its top-`k` posts and smooths the resulting probabilities.
pub fn depression_curve(
    history: &UserHistory,
    model: &dyn RiskModel,
    screener: &Screener,
    provider: &Provider,
    k: usize,
    interval_days: u32,
    variant: SmoothingVariant,
) -> Result<ScoreSeries> {
    let mut probs = Vec::new();
    for group in group_by_interval(history, interval_days)? {
        let scored = screener.score_posts(&group.posts, provider)?;
        let queue = final_queue(scored, k)?;
        probs.push((group.start, model.probability(&queue)?));
    }
    smooth_scores(&probs, variant)
}
