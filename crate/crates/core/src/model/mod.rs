//! Mini residual CNN with per-block embeddings, a projection to the final
//! embedding and a single-logit sigmoid head.
//!
//! Each block downsamples with a stride-2 3×3 convolution `d`, then computes
//! `relu(norm(conv(relu(norm(conv(d))))) + d)`. The per-block embedding is
//! the global average pool of that post-ReLU output.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{
    ops, sigmoid, Graph, NumericsError, ParamStore, Scalar, Tensor, Var,
};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError, Stage, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub base_channels: usize,
    pub embedding_dim: usize,
    pub input_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 4,
            base_channels: 16,
            embedding_dim: 64,
            input_size: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_blocks == 0 {
            return Err(ModelError::Config("num_blocks must be >= 1".into()));
        }
        if self.embedding_dim < 2 {
            return Err(ModelError::Config("embedding_dim must be >= 2".into()));
        }
        if self.base_channels == 0 {
            return Err(ModelError::Config("base_channels must be >= 1".into()));
        }
        if self.num_blocks >= usize::BITS as usize
            || self.input_size == 0
            || self.input_size % (1usize << self.num_blocks) != 0
        {
            return Err(ModelError::Config(format!(
                "input_size {} must be divisible by 2^num_blocks = 2^{}",
                self.input_size, self.num_blocks
            )));
        }
        Ok(())
    }

    /// Output channels of block `i` (channels double per block).
    pub fn block_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    /// Side length of block `i`'s output map.
    pub fn block_resolution(&self, i: usize) -> usize {
        self.input_size >> (i + 1)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("bad input: {0}")]
    Input(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Embeddings produced by one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockEmbeddings<T = f32> {
    pub per_block: Vec<Vec<T>>,
    pub final_embedding: Vec<T>,
}

pub mod names {
    pub fn down_weight(i: usize) -> String {
        format!("block{i}.down.weight")
    }
    pub fn down_bias(i: usize) -> String {
        format!("block{i}.down.bias")
    }
    pub fn conv_weight(i: usize, j: usize) -> String {
        format!("block{i}.conv{j}.weight")
    }
    pub fn norm_gamma(i: usize, j: usize) -> String {
        format!("block{i}.norm{j}.gamma")
    }
    pub fn norm_beta(i: usize, j: usize) -> String {
        format!("block{i}.norm{j}.beta")
    }
    pub const PROJ_WEIGHT: &str = "proj.weight";
    pub const PROJ_BIAS: &str = "proj.bias";
    pub const HEAD_WEIGHT: &str = "head.weight";
    pub const HEAD_BIAS: &str = "head.bias";

    pub fn block_prefix(i: usize) -> String {
        format!("block{i}.")
    }
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound) as f32)
}

/// Builds a freshly initialised model: Kaiming-uniform (fan-in) weights,
/// zero biases, unit norm scales, all drawn from `config.seed`.
pub fn build_model(config: &ModelConfig) -> Result<Model<f32>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut p = ParamStore::new();
    let mut c_in = 1;
    for i in 0..config.num_blocks {
        let c = config.block_channels(i);
        p.insert(names::down_weight(i), kaiming_uniform(&mut rng, &[c, c_in, 3, 3], c_in * 9))?;
        p.insert(names::down_bias(i), Tensor::zeros(&[c]))?;
        for j in 1..=2 {
            p.insert(names::conv_weight(i, j), kaiming_uniform(&mut rng, &[c, c, 3, 3], c * 9))?;
            p.insert(names::norm_gamma(i, j), Tensor::full(&[c], 1.0))?;
            p.insert(names::norm_beta(i, j), Tensor::zeros(&[c]))?;
        }
        c_in = c;
    }
    let d = config.embedding_dim;
    p.insert(names::PROJ_WEIGHT, kaiming_uniform(&mut rng, &[d, c_in], c_in))?;
    p.insert(names::PROJ_BIAS, Tensor::zeros(&[d]))?;
    p.insert(names::HEAD_WEIGHT, kaiming_uniform(&mut rng, &[1, d], d))?;
    p.insert(names::HEAD_BIAS, Tensor::zeros(&[1]))?;
    Ok(Model { config: config.clone(), params: p })
}

fn param<'a, T: Scalar>(g: &mut Graph<'a, T>, params: &'a ParamStore<T>, name: &str) -> Result<Var, NumericsError> {
    let (stored, t) = params
        .entry(name)
        .ok_or_else(|| NumericsError::Contract(format!("missing parameter `{name}`")))?;
    Ok(g.param(stored, t))
}

/// Records block `i` applied to `x`; returns the block's post-ReLU output.
pub fn block_graph<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    params: &'a ParamStore<T>,
    i: usize,
    x: Var,
) -> Result<Var, NumericsError> {
    let dw = param(g, params, &names::down_weight(i))?;
    let db = param(g, params, &names::down_bias(i))?;
    let d = g.conv2d(x, dw, db, 1, 2)?;
    let mut h = d;
    for j in 1..=2 {
        let w = param(g, params, &names::conv_weight(i, j))?;
        let gm = param(g, params, &names::norm_gamma(i, j))?;
        let bt = param(g, params, &names::norm_beta(i, j))?;
        h = g.conv2d_unbiased(h, w, 1, 1)?;
        h = g.channel_norm(h, gm, bt)?;
        if j == 1 {
            h = g.relu(h);
        }
    }
    let sum = g.add(h, d)?;
    Ok(g.relu(sum))
}

/// Graph handles produced by [`embed_graph`].
pub struct EmbedVars {
    pub block_outputs: Vec<Var>,
    pub block_embeddings: Vec<Var>,
    pub final_embedding: Var,
}

pub fn embed_graph<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    params: &'a ParamStore<T>,
    config: &ModelConfig,
    x: Var,
) -> Result<EmbedVars, NumericsError> {
    let mut h = x;
    let mut block_outputs = Vec::with_capacity(config.num_blocks);
    let mut block_embeddings = Vec::with_capacity(config.num_blocks);
    for i in 0..config.num_blocks {
        h = block_graph(g, params, i, h)?;
        block_outputs.push(h);
        block_embeddings.push(g.global_avg_pool(h)?);
    }
    let pw = param(g, params, names::PROJ_WEIGHT)?;
    let pb = param(g, params, names::PROJ_BIAS)?;
    let last = *block_embeddings.last().expect("num_blocks >= 1");
    let final_embedding = g.linear(last, pw, pb)?;
    Ok(EmbedVars {
        block_outputs,
        block_embeddings,
        final_embedding,
    })
}

/// Head logit (pre-sigmoid) for an embedding node.
pub fn head_graph<'a, T: Scalar>(g: &mut Graph<'a, T>, params: &'a ParamStore<T>, embedding: Var) -> Result<Var, NumericsError> {
    let hw = param(g, params, names::HEAD_WEIGHT)?;
    let hb = param(g, params, names::HEAD_BIAS)?;
    g.linear(embedding, hw, hb)
}

impl<T: Scalar> Model<T> {
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn check_patch(&self, patch: &Tensor<T>) -> Result<(), ModelError> {
        let s = self.config.input_size;
        if patch.shape() != [1, s, s] {
            return Err(ModelError::Input(format!(
                "patch must be [1,{s},{s}], got {:?}",
                patch.shape()
            )));
        }
        Ok(())
    }

    /// Per-block pooled embeddings and the projected final embedding.
    pub fn forward_embed(&self, patch: &Tensor<T>) -> Result<BlockEmbeddings<T>, ModelError> {
        self.check_patch(patch)?;
        let mut g = Graph::new();
        let x = g.input_ref(patch);
        let vars = embed_graph(&mut g, &self.params, &self.config, x)?;
        Ok(BlockEmbeddings {
            per_block: vars
                .block_embeddings
                .iter()
                .map(|&v| g.value(v).data().to_vec())
                .collect(),
            final_embedding: g.value(vars.final_embedding).data().to_vec(),
        })
    }

    /// Head logit for a final embedding.
    pub fn head_logit(&self, final_embedding: &[T]) -> Result<T, ModelError> {
        let w = self.params.get(names::HEAD_WEIGHT).ok_or_else(|| ModelError::Input("missing head".into()))?;
        let b = self.params.get(names::HEAD_BIAS).ok_or_else(|| ModelError::Input("missing head".into()))?;
        let y = ops::linear_forward(&Tensor::from_vec(final_embedding.to_vec()), w, b)?;
        Ok(y.data()[0])
    }

    /// Positive-class probability `σ(head(final_embedding))`.
    pub fn forward_classify(&self, patch: &Tensor<T>) -> Result<T, ModelError> {
        let emb = self.forward_embed(patch)?;
        Ok(sigmoid(self.head_logit(&emb.final_embedding)?))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_values()
    }
}
