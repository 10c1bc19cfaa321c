//! Central finite-difference check of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{loss, loss_and_grad, UserBatch};
use super::params::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error. Entries whose gradient is
/// smaller than this (some are exactly zero, e.g. the pooling bias, since
/// softmax ignores a shared shift) are judged on absolute error, where
/// central differences at this step are accurate to about 1e-10.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor holding the worst entry.
    pub worst_tensor: String,
    pub entries_checked: usize,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// A small random configuration suitable for exhaustive checking.
pub fn random_small_config(seed: u64) -> ModelConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_heads = [1, 2, 4][rng.gen_range(0..3)];
    let model_dim = num_heads * rng.gen_range(2..=4);
    ModelConfig {
        embed_dim: rng.gen_range(3..=8),
        num_layers: rng.gen_range(1..=2),
        num_heads,
        model_dim,
        ff_dim: rng.gen_range(2..=12),
        max_posts: rng.gen_range(2..=4),
        seed,
        ..ModelConfig::default()
    }
}

/// Random parameters (every group perturbed away from its initializer) and
/// a 3-user batch with full, partial and single-post masks.
fn fixture(config: &ModelConfig) -> Result<(ModelParams, UserBatch)> {
    let mut params = ModelParams::init(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x6772_6164));
    params.visit_mut(|name, t| {
        let gain = name.ends_with("gain");
        for v in t.data.iter_mut() {
            *v = if gain {
                rng.gen_range(0.5..1.5)
            } else {
                *v + rng.gen_range(-0.2..0.2)
            };
        }
    });

    let k = config.max_posts;
    let mut batch = UserBatch::new(config.embed_dim, k);
    let counts = [k, (k / 2).max(1), 1];
    for (u, &n) in counts.iter().enumerate() {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..config.embed_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        batch.push_user(&rows, Some((u % 2) as f64))?;
    }
    Ok((params, batch))
}

/// Compares the analytic gradient of the mean BCE against central
/// differences for every parameter entry.
pub fn grad_check(config: &ModelConfig, tolerance: f64) -> Result<GradCheckReport> {
    if config.model_dim > 16 || config.max_posts > 4 {
        return Err(Error::Config(
            "gradient checking is limited to model_dim <= 16 and max_posts <= 4".into(),
        ));
    }
    let (params, batch) = fixture(config)?;
    let (_, grads) = loss_and_grad(&batch, &params)?;
    let analytic: Vec<(String, Vec<f64>)> = grads
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.data.clone()))
        .collect();

    let mut probe = params.clone();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (ti, (name, grad)) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let numeric = {
                let original = probe.tensors_mut()[ti].data[i];
                probe.tensors_mut()[ti].data[i] = original + FD_STEP;
                let plus = loss(&batch, &probe)?;
                probe.tensors_mut()[ti].data[i] = original - FD_STEP;
                let minus = loss(&batch, &probe)?;
                probe.tensors_mut()[ti].data[i] = original;
                (plus - minus) / (2.0 * FD_STEP)
            };
            let err = relative_error(a, numeric);
            if err > worst.0 || !err.is_finite() {
                worst = (err, name.clone());
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_tensor: worst.1,
        entries_checked: checked,
        passed: worst.0 <= tolerance,
    })
}
