//! Online detection over a post stream: the evolving queue of risky posts,
//! inference gated on queue changes, and irrevocable alerts.

use serde::{Deserialize, Serialize};

use crate::corpus::UserHistory;
use crate::embedding::{EmbeddingVector, Provider};
use crate::error::{Error, Result};
use crate::han::{predict_prob, ModelParams, UserBatch};
use crate::screening::{Risky, ScoredPost, Screener};

/// Bounded, chronologically ordered buffer of the riskiest posts seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolvingQueue<T> {
    capacity: usize,
    entries: Vec<T>,
    /// Index of the earliest entry holding the minimum risk.
    min_index: Option<usize>,
}

impl<T: Risky> EvolvingQueue<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("queue capacity must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            entries: Vec::with_capacity(capacity),
            min_index: None,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<T> {
        self.entries
    }

    pub fn min_risk(&self) -> Option<f64> {
        self.min_index.map(|i| self.entries[i].risk())
    }

    /// Offers the next post of the stream. Returns whether the queue changed.
    ///
    /// A post is appended while there is room. Once full, a post less risky
    /// than the current minimum is rejected; otherwise the earliest
    /// minimum-risk entry is evicted. Arrivals are chronological, so
    /// appending keeps the entries in time order.
    pub fn update(&mut self, item: T) -> bool {
        if self.is_full() {
            let min = self.min_index.expect("full queue has a minimum");
            if item.risk() < self.entries[min].risk() {
                return false;
            }
            self.entries.remove(min);
        }
        self.entries.push(item);
        self.refresh_min();
        true
    }

    fn refresh_min(&mut self) {
        let mut best: Option<usize> = None;
        for (i, e) in self.entries.iter().enumerate() {
            if best.map_or(true, |b| e.risk() < self.entries[b].risk()) {
                best = Some(i);
            }
        }
        self.min_index = best;
    }
}

/// Anything that maps the current queue to a depression probability.
pub trait RiskModel {
    fn probability(&self, queue: &[ScoredPost]) -> Result<f64>;
}

impl RiskModel for ModelParams {
    fn probability(&self, queue: &[ScoredPost]) -> Result<f64> {
        let rows: Vec<&[f64]> = queue.iter().map(|p| p.embedding.values()).collect();
        let mut batch = UserBatch::new(self.config.embed_dim, self.config.max_posts);
        batch.push_user(&rows, None)?;
        Ok(predict_prob(&batch, self)?[0])
    }
}

impl<F> RiskModel for F
where
    F: Fn(&[ScoredPost]) -> Result<f64>,
{
    fn probability(&self, queue: &[ScoredPost]) -> Result<f64> {
        self(queue)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    /// 1-based count of posts seen when the inference ran.
    pub post_index: usize,
    pub probability: f64,
}

/// Per-user detector: the queue plus alert and inference bookkeeping.
#[derive(Debug, Clone)]
pub struct DetectorState {
    pub queue: EvolvingQueue<ScoredPost>,
    pub alerted: bool,
    pub alert_post_index: Option<usize>,
    pub posts_seen: usize,
    pub inferences: usize,
    pub prob_trace: Vec<TracePoint>,
}

impl DetectorState {
    pub fn new(capacity: usize) -> Result<Self> {
        Ok(Self {
            queue: EvolvingQueue::new(capacity)?,
            alerted: false,
            alert_post_index: None,
            posts_seen: 0,
            inferences: 0,
            prob_trace: Vec::new(),
        })
    }

    /// Feeds one scored post. Inference runs only when the queue changes; an
    /// alert is raised when the probability exceeds `threshold`.
    pub fn process_post(&mut self, post: ScoredPost, model: &dyn RiskModel, threshold: f64) -> Result<()> {
        if self.alerted {
            return Err(Error::InvalidInput("user already alerted; stream is frozen".into()));
        }
        self.posts_seen += 1;
        if !self.queue.update(post) {
            return Ok(());
        }
        let probability = model.probability(self.queue.entries())?;
        if !probability.is_finite() {
            return Err(Error::NonFinite(format!("model returned {probability}")));
        }
        self.inferences += 1;
        self.prob_trace.push(TracePoint {
            post_index: self.posts_seen,
            probability,
        });
        if probability > threshold {
            self.alerted = true;
            self.alert_post_index = Some(self.posts_seen);
        }
        Ok(())
    }

    pub fn last_probability(&self) -> Option<f64> {
        self.prob_trace.last().map(|t| t.probability)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub user_id: String,
    pub alerted: bool,
    pub alert_post_index: Option<usize>,
    pub final_probability: f64,
    pub posts_seen: usize,
    pub inferences: usize,
}

/// Probability trace of one user, kept for offline threshold sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTrace {
    pub user_id: String,
    pub total_posts: usize,
    pub trace: Vec<TracePoint>,
}

impl UserTrace {
    /// The decision a live run at `threshold` would have produced, given
    /// that the trace extends at least to that alert.
    pub fn decision_at(&self, threshold: f64) -> Decision {
        let alert = self.trace.iter().position(|t| t.probability > threshold);
        let (inferences, last) = match alert {
            Some(i) => (i + 1, Some(self.trace[i])),
            None => (self.trace.len(), self.trace.last().copied()),
        };
        let alert_post_index = alert.map(|i| self.trace[i].post_index);
        Decision {
            user_id: self.user_id.clone(),
            alerted: alert.is_some(),
            alert_post_index,
            final_probability: last.map_or(NEUTRAL_PROBABILITY, |t| t.probability),
            posts_seen: alert_post_index.unwrap_or(self.total_posts),
            inferences,
        }
    }
}

/// Reported when no inference ever ran.
pub const NEUTRAL_PROBABILITY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamOptions {
    pub capacity: usize,
    pub threshold: f64,
    /// Keep scoring and inferring after an alert, for the trace only. The
    /// decision is unaffected.
    pub trace_after_alert: bool,
}

impl StreamOptions {
    pub fn new(capacity: usize, threshold: f64) -> Self {
        Self {
            capacity,
            threshold,
            trace_after_alert: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} is outside (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutcome {
    pub decision: Decision,
    pub trace: UserTrace,
}

/// Streams a history post by post: each arriving post is embedded and
/// scored, then folded into the detector. Stops at the alert unless
/// `trace_after_alert` is set.
pub fn run_stream_with(
    history: &UserHistory,
    model: &dyn RiskModel,
    screener: &Screener,
    provider: &Provider,
    options: &StreamOptions,
) -> Result<StreamOutcome> {
    options.validate()?;
    let wrap = |i: usize, e: Error| Error::Stream {
        user_id: history.user_id.clone(),
        post_index: i + 1,
        source: Box::new(e),
    };
    let mut state = DetectorState::new(options.capacity)?;
    let mut shadow: Option<(EvolvingQueue<ScoredPost>, Vec<TracePoint>)> = None;

    for (i, post) in history.posts.iter().enumerate() {
        if let Some((queue, trace)) = shadow.as_mut() {
            let scored = screener.score_post(post, provider).map_err(|e| wrap(i, e))?;
            if queue.update(scored) {
                let probability = model.probability(queue.entries()).map_err(|e| wrap(i, e))?;
                trace.push(TracePoint {
                    post_index: i + 1,
                    probability,
                });
            }
            continue;
        }
        let scored = screener.score_post(post, provider).map_err(|e| wrap(i, e))?;
        state.process_post(scored, model, options.threshold).map_err(|e| wrap(i, e))?;
        if state.alerted {
            if !options.trace_after_alert {
                break;
            }
            shadow = Some((state.queue.clone(), Vec::new()));
        }
    }

    let decision = Decision {
        user_id: history.user_id.clone(),
        alerted: state.alerted,
        alert_post_index: state.alert_post_index,
        final_probability: state.last_probability().unwrap_or(NEUTRAL_PROBABILITY),
        posts_seen: state.posts_seen,
        inferences: state.inferences,
    };
    let mut trace = state.prob_trace;
    if let Some((_, extra)) = shadow {
        trace.extend(extra);
    }
    Ok(StreamOutcome {
        decision,
        trace: UserTrace {
            user_id: history.user_id.clone(),
            total_posts: history.posts.len(),
            trace,
        },
    })
}

pub fn run_stream(
    history: &UserHistory,
    model: &dyn RiskModel,
    screener: &Screener,
    provider: &Provider,
    k: usize,
    threshold: f64,
) -> Result<Decision> {
    Ok(run_stream_with(history, model, screener, provider, &StreamOptions::new(k, threshold))?.decision)
}

/// Share of seen posts that triggered an inference.
pub fn inference_fraction(decisions: &[Decision]) -> Result<f64> {
    let seen: usize = decisions.iter().map(|d| d.posts_seen).sum();
    if seen == 0 {
        return Err(Error::InvalidInput("no posts were seen".into()));
    }
    let inferences: usize = decisions.iter().map(|d| d.inferences).sum();
    Ok(inferences as f64 / seen as f64)
}

/// Queue contents after streaming the whole list without alerting, used to
/// build training inputs that match what the detector sees.
pub fn final_queue<T: Risky>(items: impl IntoIterator<Item = T>, capacity: usize) -> Result<Vec<T>> {
    let mut queue = EvolvingQueue::new(capacity)?;
    for item in items {
        queue.update(item);
    }
    Ok(queue.into_entries())
}

/// Embeddings of a queue in order, the model's input rows.
pub fn queue_embeddings(queue: &[ScoredPost]) -> Vec<EmbeddingVector> {
    queue.iter().map(|p| p.embedding.clone()).collect()
}
