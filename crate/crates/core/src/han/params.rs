use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Model and training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Dimension of the incoming post embeddings.
    pub embed_dim: usize,
    /// Transformer blocks; 0 leaves only projection, positions and pooling.
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    /// Queue capacity K: the number of post slots per user.
    pub max_posts: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 384,
            num_layers: 2,
            num_heads: 4,
            model_dim: 64,
            ff_dim: 128,
            max_posts: 16,
            seed: 0,
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl ModelConfig {
    /// The 4-layer, 8-head user encoder of the full-size setting.
    pub fn full_size(embed_dim: usize) -> Self {
        Self {
            embed_dim,
            num_layers: 4,
            num_heads: 8,
            model_dim: 256,
            ff_dim: 1024,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.embed_dim == 0 || self.model_dim == 0 || self.ff_dim == 0 {
            return fail("embed_dim, model_dim and ff_dim must be positive");
        }
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return fail("num_heads must be positive and divide model_dim");
        }
        if self.max_posts == 0 {
            return fail("max_posts must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return fail("adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            shape: shape.to_vec(),
            data: (0..shape.iter().product())
                .map(|_| rng.gen_range(-bound..=bound))
                .collect(),
        }
    }

    /// Glorot-uniform initialization for an `[fan_in, fan_out]` matrix.
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::uniform(&[fan_in, fan_out], bound, rng)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ff1_w: Tensor,
    pub ff1_b: Tensor,
    pub ff2_w: Tensor,
    pub ff2_b: Tensor,
}

impl LayerParams {
    fn init(d: usize, ff: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1_gain: Tensor::filled(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            wq: Tensor::glorot(d, d, rng),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::glorot(d, d, rng),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::glorot(d, d, rng),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::glorot(d, d, rng),
            bo: Tensor::zeros(&[d]),
            ln2_gain: Tensor::filled(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            ff1_w: Tensor::glorot(d, ff, rng),
            ff1_b: Tensor::zeros(&[ff]),
            ff2_w: Tensor::glorot(ff, d, rng),
            ff2_b: Tensor::zeros(&[d]),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("ff1_w", &self.ff1_w),
            ("ff1_b", &self.ff1_b),
            ("ff2_w", &self.ff2_w),
            ("ff2_b", &self.ff2_b),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 16] {
        [
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("ff1_w", &mut self.ff1_w),
            ("ff1_b", &mut self.ff1_b),
            ("ff2_w", &mut self.ff2_w),
            ("ff2_b", &mut self.ff2_b),
        ]
    }
}

/// Every learned tensor of the model. Gradients use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `[embed_dim, model_dim]`
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    /// `[max_posts, model_dim]`
    pub positions: Tensor,
    pub layers: Vec<LayerParams>,
    /// Attention-pooling scoring vector, `[model_dim]`.
    pub pool_w: Tensor,
    pub pool_b: Tensor,
    pub cls_w: Tensor,
    pub cls_b: Tensor,
}

impl ModelParams {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.model_dim;
        let proj_w = Tensor::glorot(config.embed_dim, d, &mut rng);
        let positions = Tensor::uniform(&[config.max_posts, d], 0.1, &mut rng);
        let layers = (0..config.num_layers)
            .map(|_| LayerParams::init(d, config.ff_dim, &mut rng))
            .collect();
        let vec_bound = (3.0 / d as f64).sqrt();
        let pool_w = Tensor::uniform(&[d], vec_bound, &mut rng);
        let cls_w = Tensor::uniform(&[d], vec_bound, &mut rng);
        Ok(Self {
            config: config.clone(),
            proj_w,
            proj_b: Tensor::zeros(&[d]),
            positions,
            layers,
            pool_w,
            pool_b: Tensor::zeros(&[1]),
            cls_w,
            cls_b: Tensor::zeros(&[1]),
        })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(|_, t| t.data.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    /// Tensors in canonical order with stable names such as `layer1.wq`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("proj_w".to_string(), &self.proj_w),
            ("proj_b".to_string(), &self.proj_b),
            ("positions".to_string(), &self.positions),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.named() {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("pool_w".into(), &self.pool_w));
        out.push(("pool_b".into(), &self.pool_b));
        out.push(("cls_w".into(), &self.cls_w));
        out.push(("cls_b".into(), &self.cls_b));
        out
    }

    /// Mutable tensors in canonical order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.proj_w, &mut self.proj_b, &mut self.positions];
        for layer in &mut self.layers {
            out.extend(layer.named_mut().into_iter().map(|(_, t)| t));
        }
        out.extend([&mut self.pool_w, &mut self.pool_b, &mut self.cls_w, &mut self.cls_b]);
        out
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("proj_w", &mut self.proj_w);
        f("proj_b", &mut self.proj_b);
        f("positions", &mut self.positions);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.named_mut() {
                f(&format!("layer{i}.{name}"), t);
            }
        }
        f("pool_w", &mut self.pool_w);
        f("pool_b", &mut self.pool_b);
        f("cls_w", &mut self.cls_w);
        f("cls_b", &mut self.cls_b);
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Writes the model container: magic, little-endian header length, JSON
    /// header, then every tensor as little-endian `f64` in canonical order.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let tensors = self.named_tensors();
        let mut payload = Vec::with_capacity(self.num_parameters() * 8);
        for (_, t) in &tensors {
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = ModelHeader {
            format_version: MODEL_FORMAT_VERSION,
            config: self.config.clone(),
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
            checksum: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header)?;
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |m: String| Error::ModelFormat(m);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(bad("not a model file (bad magic)".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len);
        if len > 1 << 24 {
            return Err(bad(format!("header length {len} is implausible")));
        }
        let mut header = vec![0u8; len as usize];
        r.read_exact(&mut header)?;
        let header: ModelHeader = serde_json::from_slice(&header)?;
        if header.format_version != MODEL_FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if hex::encode(Sha256::digest(&payload)) != header.checksum {
            return Err(bad("checksum mismatch".into()));
        }

        let mut params = ModelParams::init(&header.config)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape.clone()))
            .collect();
        let listed: Vec<(String, Vec<usize>)> =
            header.tensors.into_iter().map(|t| (t.name, t.shape)).collect();
        if expected != listed {
            return Err(bad("tensor listing does not match the configuration".into()));
        }
        let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if payload.len() != total * 8 {
            return Err(bad(format!("expected {} payload bytes, found {}", total * 8, payload.len())));
        }
        let mut chunks = payload.chunks_exact(8);
        params.visit_mut(|_, t| {
            for v in t.data.iter_mut() {
                let bytes: [u8; 8] = chunks.next().expect("length checked").try_into().expect("8 bytes");
                *v = f64::from_le_bytes(bytes);
            }
        });
        Ok(params)
    }
}

pub const MODEL_MAGIC: &[u8; 8] = b"RQHAN\0\0\x01";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    checksum: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}
