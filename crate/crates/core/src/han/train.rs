use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{loss_and_grad, UserBatch};
use super::params::{ModelConfig, ModelParams};
use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};

/// One user's selected post embeddings (chronological) and label.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub user_id: String,
    pub posts: Vec<EmbeddingVector>,
    pub label: u8,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: ModelParams,
    /// Mean training loss of each epoch, measured before each batch update.
    pub epoch_losses: Vec<f64>,
}

/// Adam moments, one buffer per parameter tensor in canonical order.
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn update(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        let c = params.config.clone();
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        let grads = grads.named_tensors();
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        params.visit_mut(|_, p| {
            let (m, v, g) = (&mut ms[idx], &mut vs[idx], &grads[idx].1.data);
            for i in 0..p.data.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= c.learning_rate * mhat / (vhat.sqrt() + c.adam_eps);
            }
            idx += 1;
        });
    }
}

fn build_batch(config: &ModelConfig, examples: &[&TrainingExample]) -> Result<UserBatch> {
    let mut batch = UserBatch::new(config.embed_dim, config.max_posts);
    for ex in examples {
        let rows: Vec<&[f64]> = ex.posts.iter().map(EmbeddingVector::values).collect();
        batch
            .push_user(&rows, Some(f64::from(ex.label)))
            .map_err(|e| Error::Shape(format!("user {:?}: {e}", ex.user_id)))?;
    }
    Ok(batch)
}

/// Minibatch Adam on mean binary cross-entropy. Deterministic given
/// `config.seed`.
pub fn train(examples: &[TrainingExample], config: &ModelConfig) -> Result<TrainReport> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidInput("no training examples".into()));
    }
    for ex in examples {
        if ex.posts.is_empty() {
            return Err(Error::InvalidInput(format!("user {:?} has no posts", ex.user_id)));
        }
        if ex.label > 1 {
            return Err(Error::InvalidInput(format!("user {:?} has label {}", ex.user_id, ex.label)));
        }
    }

    let mut params = ModelParams::init(config)?;
    let mut adam = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let members: Vec<&TrainingExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let batch = build_batch(config, &members)?;
            let (loss, grads) = loss_and_grad(&batch, &params)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFinite(format!(
                    "training diverged at epoch {epoch}, batch {bi} (loss {loss}); try a lower learning rate"
                )));
            }
            total += loss * members.len() as f64;
            adam.update(&mut params, &grads);
        }
        epoch_losses.push(total / examples.len() as f64);
    }
    Ok(TrainReport { params, epoch_losses })
}

// Keeps the shuffle stream distinct from the initialization stream.
const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4521;
