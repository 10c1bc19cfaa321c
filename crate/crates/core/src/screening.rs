//! Risky post screening: a post's risk is its highest cosine similarity to
//! any template, and the best-matching templates are its diagnostic bases.

use serde::{Deserialize, Serialize};

use crate::corpus::{Post, Split, UserHistory};
use crate::embedding::{cosine, EmbeddingVector, Provider};
use crate::error::{Error, Result};
use crate::templates::TemplateSet;

pub const DEFAULT_BASES: usize = 3;

/// Anything carrying a screening risk. The evolving queue is generic over it.
pub trait Risky {
    fn risk(&self) -> f64;
}

impl Risky for f64 {
    fn risk(&self) -> f64 {
        *self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    pub id: String,
    pub dimension: String,
    pub sim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPost {
    pub post: Post,
    /// Equal to `bases[0].sim`.
    pub risk: f64,
    /// Descending similarity; ties keep template-set order.
    pub bases: Vec<Basis>,
    pub embedding: EmbeddingVector,
}

impl Risky for ScoredPost {
    fn risk(&self) -> f64 {
        self.risk
    }
}

/// A template set with its embeddings computed once.
#[derive(Debug, Clone)]
pub struct Screener {
    set: TemplateSet,
    template_vectors: Vec<EmbeddingVector>,
    num_bases: usize,
}

impl Screener {
    pub fn new(set: TemplateSet, provider: &Provider) -> Result<Self> {
        Self::with_bases(set, provider, DEFAULT_BASES)
    }

    pub fn with_bases(set: TemplateSet, provider: &Provider, num_bases: usize) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::Config("template set must not be empty".into()));
        }
        let texts: Vec<&str> = set.iter().map(|t| t.text.as_str()).collect();
        let template_vectors = provider.embed_batch(&texts)?;
        Ok(Self {
            set,
            template_vectors,
            num_bases: num_bases.max(1),
        })
    }

    pub fn set(&self) -> &TemplateSet {
        &self.set
    }

    pub fn template_vectors(&self) -> &[EmbeddingVector] {
        &self.template_vectors
    }

    /// Scores an already-embedded post.
    pub fn score_embedded(&self, post: Post, embedding: EmbeddingVector) -> Result<ScoredPost> {
        let mut sims: Vec<(usize, f64)> = self
            .template_vectors
            .iter()
            .enumerate()
            .map(|(i, t)| cosine(&embedding, t).map(|s| (i, s)))
            .collect::<Result<_>>()?;
        // Stable sort keeps template order among equal similarities.
        sims.sort_by(|a, b| b.1.total_cmp(&a.1));
        let templates = self.set.templates();
        let bases: Vec<Basis> = sims
            .iter()
            .take(self.num_bases)
            .map(|&(i, sim)| Basis {
                id: templates[i].id.clone(),
                dimension: templates[i].dimension.clone(),
                sim,
            })
            .collect();
        Ok(ScoredPost {
            post,
            risk: bases[0].sim,
            bases,
            embedding,
        })
    }

    pub fn score_post(&self, post: &Post, provider: &Provider) -> Result<ScoredPost> {
        let embedding = provider.embed(&post.encoder_text())?;
        self.score_embedded(post.clone(), embedding)
    }

    /// Scores posts with a single batched embedding call.
    pub fn score_posts(&self, posts: &[Post], provider: &Provider) -> Result<Vec<ScoredPost>> {
        if posts.is_empty() {
            return Ok(Vec::new());
        }
        let texts: Vec<String> = posts.iter().map(Post::encoder_text).collect();
        let vectors = provider.embed_batch(&texts)?;
        posts
            .iter()
            .zip(vectors)
            .map(|(p, v)| self.score_embedded(p.clone(), v))
            .collect()
    }

    /// At most `k` highest-risk posts of the history, in chronological order.
    pub fn select_top_k(
        &self,
        history: &UserHistory,
        k: usize,
        provider: &Provider,
    ) -> Result<Vec<ScoredPost>> {
        let scored = self.score_posts(&history.posts, provider)?;
        Ok(take_top_k(scored, k))
    }
}

/// Indices of the `k` highest risks, returned in ascending index order.
///
/// Items are ranked by `(risk, index)` descending, so among equal risks the
/// later item wins.
pub fn top_k_indices<T: Risky>(items: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        items[b]
            .risk()
            .total_cmp(&items[a].risk())
            .then_with(|| b.cmp(&a))
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Keeps the top `k` of chronologically ordered items, chronologically.
pub fn take_top_k<T: Risky>(items: Vec<T>, k: usize) -> Vec<T> {
    let keep = top_k_indices(&items, k);
    let mut keep = keep.into_iter().peekable();
    items
        .into_iter()
        .enumerate()
        .filter_map(|(i, item)| {
            if keep.peek() == Some(&i) {
                keep.next();
                Some(item)
            } else {
                None
            }
        })
        .collect()
}

pub fn score_post(post: &Post, set: &TemplateSet, provider: &Provider) -> Result<ScoredPost> {
    Screener::new(set.clone(), provider)?.score_post(post, provider)
}

pub fn select_top_k(
    history: &UserHistory,
    k: usize,
    set: &TemplateSet,
    provider: &Provider,
) -> Result<Vec<ScoredPost>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    Screener::new(set.clone(), provider)?.select_top_k(history, k, provider)
}

/// One line of a screening output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub user_id: String,
    pub post_id: String,
    pub timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub risk: f64,
    /// Whether the post is among the user's top-k.
    pub selected: bool,
    pub bases: Vec<Basis>,
}

impl ScoredRecord {
    pub fn post(&self) -> Post {
        Post {
            user_id: self.user_id.clone(),
            post_id: self.post_id.clone(),
            timestamp: self.timestamp,
            title: self.title.clone(),
            text: self.text.clone(),
        }
    }
}

/// Screens a whole history: every post scored, the top `k` flagged.
pub fn screen_history(
    screener: &Screener,
    history: &UserHistory,
    split: Option<Split>,
    k: usize,
    provider: &Provider,
) -> Result<Vec<ScoredRecord>> {
    let scored = screener.score_posts(&history.posts, provider)?;
    let selected = top_k_indices(&scored, k);
    let mut sel = selected.into_iter().peekable();
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let is_selected = sel.peek() == Some(&i);
            if is_selected {
                sel.next();
            }
            ScoredRecord {
                user_id: s.post.user_id,
                post_id: s.post.post_id,
                timestamp: s.post.timestamp,
                title: s.post.title,
                text: s.post.text,
                label: history.label,
                split,
                risk: s.risk,
                selected: is_selected,
                bases: s.bases,
            }
        })
        .collect())
}
