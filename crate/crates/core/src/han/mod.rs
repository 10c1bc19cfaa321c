//! Hierarchical attentional classifier over a user's selected posts.
//!
//! Frozen post embeddings are projected to the model width, offset by
//! learned positional embeddings and passed through pre-norm transformer
//! blocks. An attentional pooling layer (`alpha_k = softmax_k(w . p'_k + b)`)
//! collapses the contextual post representations into one user vector, and a
//! linear sigmoid head produces the depression probability.

mod gradcheck;
mod linalg;
mod model;
mod params;
mod train;

pub use gradcheck::{grad_check, random_small_config, relative_error, GradCheckReport, FD_STEP, REL_ERROR_FLOOR};
pub use linalg::sigmoid;
pub use model::{
    attention_pool, loss, loss_and_grad, predict, predict_prob, user_encode, Prediction, UserBatch,
};
pub use params::{LayerParams, ModelConfig, ModelParams, Tensor, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub use train::{train, TrainReport, TrainingExample};

/// Default alert threshold on the predicted probability.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(layers: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: 5,
            num_layers: layers,
            num_heads: 2,
            model_dim: 4,
            ff_dim: 6,
            max_posts: 3,
            seed: 11,
            ..ModelConfig::default()
        }
    }

    fn random_rows(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    fn batch_of(config: &ModelConfig, users: &[Vec<Vec<f64>>]) -> UserBatch {
        let mut b = UserBatch::new(config.embed_dim, config.max_posts);
        for u in users {
            b.push_user(u, None).unwrap();
        }
        b
    }

    #[test]
    fn encode_shape_and_masking() {
        let c = tiny_config(2);
        let p = ModelParams::init(&c).unwrap();
        let b = batch_of(&c, &[random_rows(3, 5, 1), random_rows(1, 5, 2)]);
        let reps = user_encode(&b, &p).unwrap();
        assert_eq!(reps.len(), 2 * 3 * 4);
        assert!(reps[(3 + 1) * 4..].iter().all(|v| *v == 0.0));
        assert!(reps[12..16].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn zero_layers_is_projection_plus_positions() {
        let c = tiny_config(0);
        let p = ModelParams::init(&c).unwrap();
        let rows = random_rows(2, 5, 3);
        let reps = user_encode(&batch_of(&c, std::slice::from_ref(&rows)), &p).unwrap();
        for (slot, row) in rows.iter().enumerate() {
            for j in 0..4 {
                let mut expect = p.proj_b.data[j] + p.positions.data[slot * 4 + j];
                for (i, x) in row.iter().enumerate() {
                    expect += x * p.proj_w.data[i * 4 + j];
                }
                assert!((reps[slot * 4 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn swapping_posts_changes_output() {
        let c = tiny_config(1);
        let p = ModelParams::init(&c).unwrap();
        let rows = random_rows(3, 5, 4);
        let swapped = vec![rows[1].clone(), rows[0].clone(), rows[2].clone()];
        let a = predict_prob(&batch_of(&c, &[rows]), &p).unwrap();
        let b = predict_prob(&batch_of(&c, &[swapped]), &p).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn pooling_identities() {
        let c = tiny_config(1);
        let p = ModelParams::init(&c).unwrap();
        let reps = [0.3, -0.1, 0.5, 0.2, 9.0, 9.0, 9.0, 9.0, 0.0, 0.0, 0.0, 0.0];

        let (u, a) = attention_pool(&reps, &[true, false, false], &p).unwrap();
        assert_eq!(a, [1.0, 0.0, 0.0]);
        assert_eq!(u, &reps[..4]);

        let same = [0.3, -0.1, 0.5, 0.2, 0.3, -0.1, 0.5, 0.2, 1.0, 1.0, 1.0, 1.0];
        let (_, a) = attention_pool(&same, &[true, true, false], &p).unwrap();
        assert_eq!(a, [0.5, 0.5, 0.0]);

        let (_, a) = attention_pool(&reps, &[true, true, true], &p).unwrap();
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(a.iter().all(|&x| x > 0.0));

        assert!(attention_pool(&reps, &[false, false, false], &p).is_err());
        assert!(attention_pool(&reps[..8], &[true, true, true], &p).is_err());
    }

    #[test]
    fn zero_head_gives_half() {
        let c = tiny_config(1);
        let mut p = ModelParams::init(&c).unwrap();
        p.cls_w.data.iter_mut().for_each(|w| *w = 0.0);
        let probs = predict_prob(&batch_of(&c, &[random_rows(2, 5, 5), random_rows(3, 5, 6)]), &p).unwrap();
        assert_eq!(probs, [0.5, 0.5]);
    }

    #[test]
    fn padding_content_is_ignored() {
        let c = tiny_config(2);
        let p = ModelParams::init(&c).unwrap();
        let mut b = batch_of(&c, &[random_rows(2, 5, 7)]);
        let before = predict(&b, &p).unwrap();
        for v in &mut b.embeddings[2 * 5..] {
            *v = 1e6;
        }
        assert_eq!(predict(&b, &p).unwrap(), before);
        b.embeddings[14] = f64::NAN;
        assert_eq!(predict(&b, &p).unwrap(), before);
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let c = tiny_config(1);
        let p = ModelParams::init(&c).unwrap();
        let mut wrong = UserBatch::new(4, 3);
        wrong.push_user(&[vec![0.0; 4]], None).unwrap();
        assert!(predict_prob(&wrong, &p).is_err());
        let mut b = batch_of(&c, &[random_rows(1, 5, 8)]);
        b.embeddings[0] = f64::INFINITY;
        assert!(matches!(predict_prob(&b, &p), Err(crate::Error::NonFinite(_))));
        let mut too_many = UserBatch::new(5, 3);
        assert!(too_many.push_user(&random_rows(4, 5, 9), None).is_err());
        assert!(too_many.push_user::<Vec<f64>>(&[], None).is_err());
    }

    /// Straight-line scalar evaluation of a one-layer model on two posts,
    /// written independently of the batched kernels.
    #[allow(clippy::needless_range_loop)]
    fn scalar_forward(p: &ModelParams, posts: &[Vec<f64>]) -> f64 {
        let c = &p.config;
        let (d, e, f, heads) = (c.model_dim, c.embed_dim, c.ff_dim, c.num_heads);
        let dh = d / heads;
        let at = |t: &Tensor, r: usize, col: usize, cols: usize| t.data[r * cols + col];
        let n = posts.len();
        let mut x = vec![vec![0.0; d]; n];
        for k in 0..n {
            for j in 0..d {
                let mut s = p.proj_b.data[j] + at(&p.positions, k, j, d);
                for i in 0..e {
                    s += posts[k][i] * at(&p.proj_w, i, j, d);
                }
                x[k][j] = s;
            }
        }
        let norm = |v: &Vec<f64>, g: &Tensor, b: &Tensor| -> Vec<f64> {
            let mean: f64 = v.iter().sum::<f64>() / d as f64;
            let var: f64 = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / d as f64;
            (0..d).map(|j| g.data[j] * (v[j] - mean) / (var + 1e-5).sqrt() + b.data[j]).collect()
        };
        let affine = |v: &Vec<f64>, w: &Tensor, b: &Tensor, out: usize| -> Vec<f64> {
            (0..out)
                .map(|j| b.data[j] + (0..v.len()).map(|i| v[i] * w.data[i * out + j]).sum::<f64>())
                .collect()
        };
        for l in &p.layers {
            let a: Vec<Vec<f64>> = x.iter().map(|r| norm(r, &l.ln1_gain, &l.ln1_bias)).collect();
            let q: Vec<Vec<f64>> = a.iter().map(|r| affine(r, &l.wq, &l.bq, d)).collect();
            let kk: Vec<Vec<f64>> = a.iter().map(|r| affine(r, &l.wk, &l.bk, d)).collect();
            let v: Vec<Vec<f64>> = a.iter().map(|r| affine(r, &l.wv, &l.bv, d)).collect();
            let mut o = vec![vec![0.0; d]; n];
            for h in 0..heads {
                for i in 0..n {
                    let scores: Vec<f64> = (0..n)
                        .map(|j| (0..dh).map(|t| q[i][h * dh + t] * kk[j][h * dh + t]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let z: f64 = scores.iter().map(|s| s.exp()).sum();
                    for j in 0..n {
                        for t in 0..dh {
                            o[i][h * dh + t] += scores[j].exp() / z * v[j][h * dh + t];
                        }
                    }
                }
            }
            let hres: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let proj = affine(&o[i], &l.wo, &l.bo, d);
                    (0..d).map(|j| x[i][j] + proj[j]).collect()
                })
                .collect();
            x = hres
                .iter()
                .map(|hr| {
                    let cn = norm(hr, &l.ln2_gain, &l.ln2_bias);
                    let g: Vec<f64> = affine(&cn, &l.ff1_w, &l.ff1_b, f)
                        .iter()
                        .map(|&z| 0.5 * z * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z.powi(3))).tanh()))
                        .collect();
                    let f2 = affine(&g, &l.ff2_w, &l.ff2_b, d);
                    (0..d).map(|j| hr[j] + f2[j]).collect()
                })
                .collect();
        }
        let scores: Vec<f64> = x
            .iter()
            .map(|r| (0..d).map(|j| r[j] * p.pool_w.data[j]).sum::<f64>() + p.pool_b.data[0])
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let u: Vec<f64> = (0..d).map(|j| (0..n).map(|k| scores[k].exp() / z * x[k][j]).sum()).collect();
        let logit: f64 = (0..d).map(|j| u[j] * p.cls_w.data[j]).sum::<f64>() + p.cls_b.data[0];
        1.0 / (1.0 + (-logit).exp())
    }

    #[test]
    fn matches_scalar_recomputation() {
        let c = ModelConfig {
            embed_dim: 4,
            num_layers: 1,
            num_heads: 2,
            model_dim: 4,
            ff_dim: 4,
            max_posts: 2,
            seed: 21,
            ..ModelConfig::default()
        };
        let mut p = ModelParams::init(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        p.visit_mut(|_, t| t.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3)));
        let posts = random_rows(2, 4, 10);
        let got = predict_prob(&batch_of(&c, std::slice::from_ref(&posts)), &p).unwrap()[0];
        let expect = scalar_forward(&p, &posts);
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let report = grad_check(&random_small_config(0), 1e-4).unwrap();
        assert!(report.passed, "{report:?}");
        let pooling_only = ModelConfig {
            num_layers: 0,
            ..random_small_config(1)
        };
        let report = grad_check(&pooling_only, 1e-6).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(grad_check(&ModelConfig::default(), 1e-4).is_err());
    }

    #[test]
    fn save_load_is_bit_exact() {
        let c = tiny_config(2);
        let p = ModelParams::init(&c).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = ModelParams::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
        let b = batch_of(&c, &[random_rows(3, 5, 12)]);
        let (a, bb) = (predict_prob(&b, &p).unwrap(), predict_prob(&b, &q).unwrap());
        assert_eq!(a[0].to_bits(), bb[0].to_bits());

        let mut corrupt = buf.clone();
        let last = corrupt.len() - 1;
        corrupt[last] ^= 1;
        assert!(ModelParams::read_from(&mut corrupt.as_slice()).is_err());
        assert!(ModelParams::read_from(&mut &b"not a model"[..]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { num_heads: 3, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { max_posts: 0, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::full_size(384).validate().is_ok());
        let parsed: ModelConfig = serde_json::from_str(r#"{"model_dim": 32, "num_heads": 2}"#).unwrap();
        assert_eq!(parsed.ff_dim, 128);
    }
}
