//! Forward and backward passes of the user encoder, attentional pooling and
//! classifier head.
//!
//! Each user is processed on the compacted sequence of its unmasked posts;
//! positional embeddings are indexed by the original slot. This is the same
//! computation as an additive `-inf` key mask, and masked slots never enter
//! any arithmetic, so padding contents cannot affect outputs.

use super::linalg::{
    add_assign, add_at_b, add_col_sums, bce_with_logit, dot, gelu, gelu_grad, linear, matmul_bt,
    sigmoid, softmax, softmax_backward,
};
use super::params::{LayerParams, ModelParams};
use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Post embeddings for a batch of users, padded to `max_posts` slots.
#[derive(Debug, Clone, PartialEq)]
pub struct UserBatch {
    pub embed_dim: usize,
    pub max_posts: usize,
    /// `batch × max_posts × embed_dim`, row-major.
    pub embeddings: Vec<f64>,
    /// `batch × max_posts`; true marks a real post.
    pub mask: Vec<bool>,
    /// One 0/1 target per user; empty for inference-only batches.
    pub labels: Vec<f64>,
}

impl UserBatch {
    pub fn new(embed_dim: usize, max_posts: usize) -> Self {
        Self {
            embed_dim,
            max_posts,
            embeddings: Vec::new(),
            mask: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// Appends one user's posts (at most `max_posts`, chronological) padded
    /// with masked zero slots.
    pub fn push_user<V: AsRef<[f64]>>(&mut self, posts: &[V], label: Option<f64>) -> Result<()> {
        if posts.is_empty() {
            return Err(Error::Shape("a user needs at least one post".into()));
        }
        if posts.len() > self.max_posts {
            return Err(Error::Shape(format!(
                "{} posts exceed max_posts {}",
                posts.len(),
                self.max_posts
            )));
        }
        if !self.is_empty() && label.is_some() == self.labels.is_empty() {
            return Err(Error::Shape("either every user or no user carries a label".into()));
        }
        for p in posts {
            let p = p.as_ref();
            if p.len() != self.embed_dim {
                return Err(Error::Shape(format!(
                    "post embedding has dim {}, expected {}",
                    p.len(),
                    self.embed_dim
                )));
            }
            self.embeddings.extend_from_slice(p);
            self.mask.push(true);
        }
        for _ in posts.len()..self.max_posts {
            self.embeddings.extend(std::iter::repeat(0.0).take(self.embed_dim));
            self.mask.push(false);
        }
        if let Some(l) = label {
            self.labels.push(l);
        }
        Ok(())
    }

    pub fn from_vectors(users: &[Vec<EmbeddingVector>], labels: Option<&[f64]>, max_posts: usize) -> Result<Self> {
        let embed_dim = users
            .iter()
            .flat_map(|u| u.first())
            .map(EmbeddingVector::dim)
            .next()
            .ok_or_else(|| Error::Shape("empty batch".into()))?;
        let mut batch = Self::new(embed_dim, max_posts);
        for (i, u) in users.iter().enumerate() {
            let rows: Vec<&[f64]> = u.iter().map(EmbeddingVector::values).collect();
            batch.push_user(&rows, labels.map(|l| l[i]))?;
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.mask.len() / self.max_posts.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn user_mask(&self, b: usize) -> &[bool] {
        &self.mask[b * self.max_posts..(b + 1) * self.max_posts]
    }

    fn user_slot(&self, b: usize, slot: usize) -> &[f64] {
        let start = (b * self.max_posts + slot) * self.embed_dim;
        &self.embeddings[start..start + self.embed_dim]
    }

    fn validate(&self, params: &ModelParams) -> Result<()> {
        let c = &params.config;
        if self.embed_dim != c.embed_dim || self.max_posts != c.max_posts {
            return Err(Error::Shape(format!(
                "batch is {}x{} (posts x dim), model expects {}x{}",
                self.max_posts, self.embed_dim, c.max_posts, c.embed_dim
            )));
        }
        if self.embeddings.len() != self.mask.len() * self.embed_dim {
            return Err(Error::Shape("embedding buffer does not match mask".into()));
        }
        if !self.labels.is_empty() && self.labels.len() != self.len() {
            return Err(Error::Shape("labels do not match batch size".into()));
        }
        for b in 0..self.len() {
            let mask = self.user_mask(b);
            if !mask.iter().any(|&m| m) {
                return Err(Error::Shape(format!("user {b} has no unmasked post")));
            }
            for (slot, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
                if self.user_slot(b, slot).iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("embedding of user {b}, slot {slot}")));
                }
            }
        }
        Ok(())
    }

    /// Unmasked slot indices and their embeddings, concatenated.
    fn compact(&self, b: usize) -> (Vec<usize>, Vec<f64>) {
        let slots: Vec<usize> = self
            .user_mask(b)
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        let mut rows = Vec::with_capacity(slots.len() * self.embed_dim);
        for &s in &slots {
            rows.extend_from_slice(self.user_slot(b, s));
        }
        (slots, rows)
    }
}

struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, LnCache) {
    let m = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; m];
    for i in 0..m {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = inv;
        for j in 0..d {
            let xh = (row[j] - mean) * inv;
            xhat[i * d + j] = xh;
            y[i * d + j] = gain[j] * xh + bias[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns dL/dx and accumulates the gain/bias gradients.
fn layer_norm_backward(
    dy: &[f64],
    cache: &LnCache,
    d: usize,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let m = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    for i in 0..m {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            let dxh = dyr[j] * gain[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        for j in 0..d {
            let dxh = dyr[j] * gain[j];
            dx[i * d + j] = cache.inv_std[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    dx
}

struct LayerCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per head, `m × m` attention probabilities.
    attn: Vec<Vec<f64>>,
    o: Vec<f64>,
    ln2: LnCache,
    c: Vec<f64>,
    f1: Vec<f64>,
    g: Vec<f64>,
}

/// Everything the backward pass needs for one user.
pub(crate) struct UserForward {
    slots: Vec<usize>,
    inputs: Vec<f64>,
    layers: Vec<LayerCache>,
    /// Contextual representations, `m × model_dim`.
    pub reps: Vec<f64>,
    pub alpha: Vec<f64>,
    pub user_vec: Vec<f64>,
    pub logit: f64,
}

fn layer_forward(lp: &LayerParams, x: &[f64], m: usize, d: usize, heads: usize, ff: usize) -> (Vec<f64>, LayerCache) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (a, ln1) = layer_norm(x, d, &lp.ln1_gain.data, &lp.ln1_bias.data);
    let q = linear(&a, m, d, &lp.wq.data, &lp.bq.data);
    let k = linear(&a, m, d, &lp.wk.data, &lp.bk.data);
    let v = linear(&a, m, d, &lp.wv.data, &lp.bv.data);

    let mut o = vec![0.0; m * d];
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let off = h * dh;
        let mut probs = vec![0.0; m * m];
        for i in 0..m {
            let qi = &q[i * d + off..i * d + off + dh];
            let row = &mut probs[i * m..(i + 1) * m];
            for (j, r) in row.iter_mut().enumerate() {
                *r = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
            }
            softmax(row);
            let oi = &mut o[i * d + off..i * d + off + dh];
            for (j, &p) in row.iter().enumerate() {
                for (ov, vv) in oi.iter_mut().zip(&v[j * d + off..j * d + off + dh]) {
                    *ov += p * vv;
                }
            }
        }
        attn.push(probs);
    }
    let attn_out = linear(&o, m, d, &lp.wo.data, &lp.bo.data);
    let mut hres = x.to_vec();
    add_assign(&mut hres, &attn_out);

    let (c, ln2) = layer_norm(&hres, d, &lp.ln2_gain.data, &lp.ln2_bias.data);
    let f1 = linear(&c, m, d, &lp.ff1_w.data, &lp.ff1_b.data);
    let g: Vec<f64> = f1.iter().map(|&z| gelu(z)).collect();
    let f2 = linear(&g, m, ff, &lp.ff2_w.data, &lp.ff2_b.data);
    let mut out = hres;
    add_assign(&mut out, &f2);
    (
        out,
        LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            attn,
            o,
            ln2,
            c,
            f1,
            g,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn layer_backward(
    lp: &LayerParams,
    gp: &mut LayerParams,
    cache: &LayerCache,
    dout: &[f64],
    m: usize,
    d: usize,
    heads: usize,
    ff: usize,
) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // out = h + ff2(gelu(ff1(ln2(h))))
    let df2 = dout;
    add_at_b(&mut gp.ff2_w.data, &cache.g, m, ff, df2, d);
    add_col_sums(&mut gp.ff2_b.data, df2, d);
    let dg = matmul_bt(df2, m, d, &lp.ff2_w.data, ff);
    let df1: Vec<f64> = dg.iter().zip(&cache.f1).map(|(g, &z)| g * gelu_grad(z)).collect();
    add_at_b(&mut gp.ff1_w.data, &cache.c, m, d, &df1, ff);
    add_col_sums(&mut gp.ff1_b.data, &df1, ff);
    let dc = matmul_bt(&df1, m, ff, &lp.ff1_w.data, d);
    let mut dh_res = layer_norm_backward(
        &dc,
        &cache.ln2,
        d,
        &lp.ln2_gain.data,
        &mut gp.ln2_gain.data,
        &mut gp.ln2_bias.data,
    );
    add_assign(&mut dh_res, dout);

    // h = x + wo(attention(q, k, v))
    let dattn = &dh_res;
    add_at_b(&mut gp.wo.data, &cache.o, m, d, dattn, d);
    add_col_sums(&mut gp.bo.data, dattn, d);
    let d_o = matmul_bt(dattn, m, d, &lp.wo.data, d);

    let mut dq = vec![0.0; m * d];
    let mut dk = vec![0.0; m * d];
    let mut dv = vec![0.0; m * d];
    for h in 0..heads {
        let off = h * dh;
        let probs = &cache.attn[h];
        for i in 0..m {
            let doi = &d_o[i * d + off..i * d + off + dh];
            let prow = &probs[i * m..(i + 1) * m];
            let dprow: Vec<f64> = (0..m)
                .map(|j| dot(doi, &cache.v[j * d + off..j * d + off + dh]))
                .collect();
            for (j, &p) in prow.iter().enumerate() {
                for (dvv, &g) in dv[j * d + off..j * d + off + dh].iter_mut().zip(doi) {
                    *dvv += p * g;
                }
            }
            let ds = softmax_backward(prow, &dprow);
            let qi = &cache.q[i * d + off..i * d + off + dh];
            for (j, &s) in ds.iter().enumerate() {
                let s = s * scale;
                if s == 0.0 {
                    continue;
                }
                for t in 0..dh {
                    dq[i * d + off + t] += s * cache.k[j * d + off + t];
                    dk[j * d + off + t] += s * qi[t];
                }
            }
        }
    }

    let mut da = vec![0.0; m * d];
    project_backward(&lp.wq.data, &mut gp.wq.data, &mut gp.bq.data, &cache.a, &dq, m, d, &mut da);
    project_backward(&lp.wk.data, &mut gp.wk.data, &mut gp.bk.data, &cache.a, &dk, m, d, &mut da);
    project_backward(&lp.wv.data, &mut gp.wv.data, &mut gp.bv.data, &cache.a, &dv, m, d, &mut da);

    let mut dx = layer_norm_backward(
        &da,
        &cache.ln1,
        d,
        &lp.ln1_gain.data,
        &mut gp.ln1_gain.data,
        &mut gp.ln1_bias.data,
    );
    add_assign(&mut dx, &dh_res);
    dx
}

/// Backward of `y = x·w + b` for a square `d×d` projection; adds dL/dx
/// into `dx`.
#[allow(clippy::too_many_arguments)]
fn project_backward(
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    x: &[f64],
    dy: &[f64],
    m: usize,
    d: usize,
    dx: &mut [f64],
) {
    add_at_b(dw, x, m, d, dy, d);
    add_col_sums(db, dy, d);
    add_assign(dx, &matmul_bt(dy, m, d, w, d));
}

pub(crate) fn forward_user(params: &ModelParams, slots: Vec<usize>, inputs: Vec<f64>) -> UserForward {
    let c = &params.config;
    let (m, d, e) = (slots.len(), c.model_dim, c.embed_dim);
    let mut x = linear(&inputs, m, e, &params.proj_w.data, &params.proj_b.data);
    for (i, &s) in slots.iter().enumerate() {
        add_assign(&mut x[i * d..(i + 1) * d], &params.positions.data[s * d..(s + 1) * d]);
    }
    let mut layers = Vec::with_capacity(params.layers.len());
    for lp in &params.layers {
        let (next, cache) = layer_forward(lp, &x, m, d, c.num_heads, c.ff_dim);
        layers.push(cache);
        x = next;
    }

    let (user_vec, alpha) = pool(&x, d, &params.pool_w.data, params.pool_b.data[0]);
    let logit = dot(&user_vec, &params.cls_w.data) + params.cls_b.data[0];
    UserForward {
        slots,
        inputs,
        layers,
        reps: x,
        alpha,
        user_vec,
        logit,
    }
}

/// Softmax attention over the rows of `reps` (`m × d`).
fn pool(reps: &[f64], d: usize, w: &[f64], b: f64) -> (Vec<f64>, Vec<f64>) {
    let mut alpha: Vec<f64> = reps.chunks_exact(d).map(|r| dot(r, w) + b).collect();
    softmax(&mut alpha);
    let mut u = vec![0.0; d];
    for (row, &a) in reps.chunks_exact(d).zip(&alpha) {
        for (uv, rv) in u.iter_mut().zip(row) {
            *uv += a * rv;
        }
    }
    (u, alpha)
}

/// Accumulates `dlogit`-scaled gradients of one user's logit into `grads`.
pub(crate) fn backward_user(params: &ModelParams, fwd: &UserForward, dlogit: f64, grads: &mut ModelParams) {
    let c = &params.config;
    let (m, d, e) = (fwd.slots.len(), c.model_dim, c.embed_dim);

    for (g, u) in grads.cls_w.data.iter_mut().zip(&fwd.user_vec) {
        *g += dlogit * u;
    }
    grads.cls_b.data[0] += dlogit;
    let du: Vec<f64> = params.cls_w.data.iter().map(|w| dlogit * w).collect();

    // u = sum_k alpha_k p_k, alpha = softmax(p_k . w + b)
    let mut dreps = vec![0.0; m * d];
    let dalpha: Vec<f64> = fwd.reps.chunks_exact(d).map(|r| dot(r, &du)).collect();
    let dscore = softmax_backward(&fwd.alpha, &dalpha);
    for k in 0..m {
        let row = &fwd.reps[k * d..(k + 1) * d];
        let drow = &mut dreps[k * d..(k + 1) * d];
        for j in 0..d {
            drow[j] += fwd.alpha[k] * du[j] + dscore[k] * params.pool_w.data[j];
            grads.pool_w.data[j] += dscore[k] * row[j];
        }
        grads.pool_b.data[0] += dscore[k];
    }

    let mut dx = dreps;
    for (l, cache) in fwd.layers.iter().enumerate().rev() {
        dx = layer_backward(&params.layers[l], &mut grads.layers[l], cache, &dx, m, d, c.num_heads, c.ff_dim);
    }

    add_at_b(&mut grads.proj_w.data, &fwd.inputs, m, e, &dx, d);
    add_col_sums(&mut grads.proj_b.data, &dx, d);
    for (i, &s) in fwd.slots.iter().enumerate() {
        add_assign(&mut grads.positions.data[s * d..(s + 1) * d], &dx[i * d..(i + 1) * d]);
    }
}

/// Contextual representations, `batch × max_posts × model_dim`, with masked
/// slots zeroed.
pub fn user_encode(batch: &UserBatch, params: &ModelParams) -> Result<Vec<f64>> {
    batch.validate(params)?;
    let (k, d) = (batch.max_posts, params.config.model_dim);
    let mut out = vec![0.0; batch.len() * k * d];
    for b in 0..batch.len() {
        let (slots, inputs) = batch.compact(b);
        let fwd = forward_user(params, slots, inputs);
        for (i, &s) in fwd.slots.iter().enumerate() {
            let dst = (b * k + s) * d;
            out[dst..dst + d].copy_from_slice(&fwd.reps[i * d..(i + 1) * d]);
        }
    }
    Ok(out)
}

/// Attentional pooling of one user's `max_posts × model_dim` representations.
/// Returns the user vector and per-slot weights (zero on masked slots).
pub fn attention_pool(reps: &[f64], mask: &[bool], params: &ModelParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = params.config.model_dim;
    if reps.len() != mask.len() * d {
        return Err(Error::Shape(format!(
            "{} values for {} slots of dim {d}",
            reps.len(),
            mask.len()
        )));
    }
    let slots: Vec<usize> = mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect();
    if slots.is_empty() {
        return Err(Error::Shape("attention pooling needs at least one unmasked slot".into()));
    }
    let mut compact = Vec::with_capacity(slots.len() * d);
    for &s in &slots {
        compact.extend_from_slice(&reps[s * d..(s + 1) * d]);
    }
    let (u, a) = pool(&compact, d, &params.pool_w.data, params.pool_b.data[0]);
    let mut alpha = vec![0.0; mask.len()];
    for (&s, &w) in slots.iter().zip(&a) {
        alpha[s] = w;
    }
    Ok((u, alpha))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probability: f64,
    /// Attention weight per slot; zero on padding.
    pub attention: Vec<f64>,
}

pub fn predict(batch: &UserBatch, params: &ModelParams) -> Result<Vec<Prediction>> {
    batch.validate(params)?;
    Ok((0..batch.len())
        .map(|b| {
            let (slots, inputs) = batch.compact(b);
            let fwd = forward_user(params, slots, inputs);
            let mut attention = vec![0.0; batch.max_posts];
            for (&s, &a) in fwd.slots.iter().zip(&fwd.alpha) {
                attention[s] = a;
            }
            Prediction {
                probability: sigmoid(fwd.logit),
                attention,
            }
        })
        .collect())
}

/// `sigmoid(w · u + c)` per user.
pub fn predict_prob(batch: &UserBatch, params: &ModelParams) -> Result<Vec<f64>> {
    Ok(predict(batch, params)?.into_iter().map(|p| p.probability).collect())
}

/// Mean binary cross-entropy over the batch and its gradient.
pub fn loss_and_grad(batch: &UserBatch, params: &ModelParams) -> Result<(f64, ModelParams)> {
    batch.validate(params)?;
    if batch.labels.len() != batch.len() || batch.is_empty() {
        return Err(Error::Shape("training batch needs one label per user".into()));
    }
    let n = batch.len() as f64;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for b in 0..batch.len() {
        let (slots, inputs) = batch.compact(b);
        let fwd = forward_user(params, slots, inputs);
        let y = batch.labels[b];
        loss += bce_with_logit(fwd.logit, y);
        let dlogit = (sigmoid(fwd.logit) - y) / n;
        backward_user(params, &fwd, dlogit, &mut grads);
    }
    Ok((loss / n, grads))
}

/// Mean binary cross-entropy without gradients.
pub fn loss(batch: &UserBatch, params: &ModelParams) -> Result<f64> {
    batch.validate(params)?;
    if batch.labels.len() != batch.len() || batch.is_empty() {
        return Err(Error::Shape("loss needs one label per user".into()));
    }
    let mut total = 0.0;
    for b in 0..batch.len() {
        let (slots, inputs) = batch.compact(b);
        let fwd = forward_user(params, slots, inputs);
        total += bce_with_logit(fwd.logit, batch.labels[b]);
    }
    Ok(total / batch.len() as f64)
}
