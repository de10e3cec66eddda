//! The six compared CTR models built from shared parts: a sparse linear
//! term, FM factors, a pooled embedding layer and an MLP, with optional
//! per-user memory concatenated onto the MLP input.

pub mod embedding;
pub mod linear;
pub mod mlp;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use embedding::{embed_instance, EmbeddingTable};
pub use linear::{fm_score, lr_score, wide_deep_logit, LinearParameters};
pub use mlp::{mlp_backward, mlp_forward, DenseLayer, MlpCache, MlpGradients, MlpParameters};

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::memory::UserMemoryStore;
use crate::numeric::{sigmoid, DenseVector};
use crate::train::Adagrad;

/// Stream tags for the per-key initialization generators.
pub const EMBEDDING_STREAM: u64 = 1;
pub const FACTOR_STREAM: u64 = 2;

/// Uniform half-width used for embedding and FM factor initialization.
pub const EMBEDDING_INIT_SCALE: f64 = 0.01;

/// ChaCha8 keyed by `seed`, on stream `tag << 48 | key`. The MLP draws from
/// stream 0 of the same seed.
pub(crate) fn feature_rng(seed: u64, tag: u64, key: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 48) | (key & ((1 << 48) - 1)));
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Lr,
    Fm,
    Dnn,
    Wd,
    MaDnn,
    MaWd,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Lr,
        ModelKind::Fm,
        ModelKind::Dnn,
        ModelKind::Wd,
        ModelKind::MaDnn,
        ModelKind::MaWd,
    ];

    pub fn has_memory(self) -> bool {
        matches!(self, ModelKind::MaDnn | ModelKind::MaWd)
    }

    pub fn has_linear(self) -> bool {
        matches!(
            self,
            ModelKind::Lr | ModelKind::Fm | ModelKind::Wd | ModelKind::MaWd
        )
    }

    pub fn has_factors(self) -> bool {
        self == ModelKind::Fm
    }

    pub fn has_deep(self) -> bool {
        matches!(
            self,
            ModelKind::Dnn | ModelKind::Wd | ModelKind::MaDnn | ModelKind::MaWd
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lr => "lr",
            ModelKind::Fm => "fm",
            ModelKind::Dnn => "dnn",
            ModelKind::Wd => "wd",
            ModelKind::MaDnn => "ma-dnn",
            ModelKind::MaWd => "ma-wd",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            ModelKind::Lr => 0,
            ModelKind::Fm => 1,
            ModelKind::Dnn => 2,
            ModelKind::Wd => 3,
            ModelKind::MaDnn => 4,
            ModelKind::MaWd => 5,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.code() == code)
            .ok_or_else(|| Error::Config(format!("unknown model code {code}")))
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown model {s:?}; valid kinds: lr, fm, dnn, wd, ma-dnn, ma-wd"
                ))
            })
    }
}

/// Dimensions needed to build parameters for a model kind.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelShape {
    pub num_fields: usize,
    pub embedding_dim: usize,
    pub layer_dims: Vec<usize>,
    pub memory_dim: usize,
}

impl ModelShape {
    pub fn deep_input_dim(&self, kind: ModelKind) -> usize {
        let x = self.num_fields * self.embedding_dim;
        if kind.has_memory() {
            x + 2 * self.memory_dim
        } else {
            x
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub linear: Option<LinearParameters>,
    pub factors: Option<EmbeddingTable>,
    pub embeddings: Option<EmbeddingTable>,
    pub mlp: Option<MlpParameters>,
}

impl ModelParams {
    pub fn init(kind: ModelKind, shape: &ModelShape, seed: u64) -> Result<Self> {
        if shape.embedding_dim == 0 || shape.num_fields == 0 {
            return Err(Error::Config(
                "embedding_dim and num_fields must be >= 1".into(),
            ));
        }
        let deep = kind.has_deep();
        if deep && (shape.layer_dims.is_empty() || shape.layer_dims.contains(&0)) {
            return Err(Error::Config(
                "layer dims must be non-empty and positive".into(),
            ));
        }
        if kind.has_memory() && shape.layer_dims.last() != Some(&shape.memory_dim) {
            return Err(Error::Config(format!(
                "memory_dim {} must equal the last layer width {:?}",
                shape.memory_dim,
                shape.layer_dims.last()
            )));
        }
        let mlp = if deep {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Some(MlpParameters::glorot(
                shape.deep_input_dim(kind),
                &shape.layer_dims,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(ModelParams {
            kind,
            linear: kind.has_linear().then(LinearParameters::new),
            factors: kind.has_factors().then(|| {
                EmbeddingTable::new(
                    shape.embedding_dim,
                    EMBEDDING_INIT_SCALE,
                    seed,
                    FACTOR_STREAM,
                )
            }),
            embeddings: deep.then(|| {
                EmbeddingTable::new(
                    shape.embedding_dim,
                    EMBEDDING_INIT_SCALE,
                    seed,
                    EMBEDDING_STREAM,
                )
            }),
            mlp,
        })
    }

    pub fn memory_dim(&self) -> Option<usize> {
        self.kind
            .has_memory()
            .then(|| self.mlp.as_ref().map(MlpParameters::output_dim))
            .flatten()
    }

    fn expect_linear(&self) -> Result<&LinearParameters> {
        self.linear
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} model lacks linear parameters", self.kind)))
    }

    fn expect_deep(&self) -> Result<(&EmbeddingTable, &MlpParameters)> {
        match (&self.embeddings, &self.mlp) {
            (Some(e), Some(m)) => Ok((e, m)),
            _ => Err(Error::Config(format!(
                "{} model lacks deep parameters",
                self.kind
            ))),
        }
    }

    pub fn apply_adagrad(&mut self, grads: &ModelGradients, scale: f64, opt: &Adagrad) {
        if let Some(linear) = &mut self.linear {
            linear.apply_adagrad(&grads.linear, grads.bias, scale, opt);
        }
        if let Some(factors) = &mut self.factors {
            factors.apply_adagrad(&grads.factors, scale, opt);
        }
        if let Some(emb) = &mut self.embeddings {
            emb.apply_adagrad(&grads.embeddings, scale, opt);
        }
        if let (Some(mlp), Some(g)) = (&mut self.mlp, &grads.mlp) {
            mlp.apply_adagrad(g, scale, opt);
        }
    }
}

/// `v = x ++ m_like ++ m_dislike` for memory-bearing kinds, `v = x` otherwise.
pub fn assemble_input(
    kind: ModelKind,
    x: DenseVector,
    memory: Option<(&[f64], &[f64])>,
) -> Result<DenseVector> {
    match (kind.has_memory(), memory) {
        (true, Some((like, dislike))) => Ok(DenseVector::concat(&[&x, like, dislike])),
        (false, None) => Ok(x),
        (true, None) => Err(Error::Config(format!("{kind} requires user memory input"))),
        (false, Some(_)) => Err(Error::Config(format!(
            "{kind} has no memory input but memory was supplied"
        ))),
    }
}

/// Everything one forward pass produces that backprop needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub kind: ModelKind,
    /// Distinct active features, for the linear and FM terms.
    pub active: Vec<u64>,
    /// Per-field feature lists that fed each pooled embedding slot.
    pub field_features: Vec<Vec<u64>>,
    pub x_len: usize,
    pub deep: Option<MlpCache>,
    pub factor_sums: Vec<f64>,
    pub wide_logit: f64,
    pub logit: f64,
    pub y_hat: f64,
}

impl ForwardCache {
    /// Output of the last hidden layer, for deep kinds.
    pub fn z_last(&self) -> Option<&DenseVector> {
        self.deep.as_ref().map(MlpCache::z_last)
    }

    pub fn v(&self) -> Option<&DenseVector> {
        self.deep.as_ref().map(|d| &d.input)
    }
}

/// Forward pass with explicitly supplied memory vectors.
pub fn forward(
    params: &ModelParams,
    instance: &Instance,
    memory: Option<(&[f64], &[f64])>,
) -> Result<ForwardCache> {
    let kind = params.kind;
    let active = if kind.has_linear() {
        instance.active_features()
    } else {
        Vec::new()
    };
    let mut wide_logit = 0.0;
    let mut factor_sums = Vec::new();
    if kind.has_linear() {
        wide_logit = linear::linear_logit(&active, params.expect_linear()?);
    }
    if let Some(factors) = &params.factors {
        wide_logit += linear::fm_interaction(&active, factors);
        factor_sums = linear::factor_sums(&active, factors);
    }

    let mut field_features = Vec::new();
    let mut x_len = 0;
    let deep = if kind.has_deep() {
        let (emb, mlp) = params.expect_deep()?;
        let x = embed_instance(instance, emb);
        x_len = x.len();
        field_features = embedding::field_features(instance);
        let v = assemble_input(kind, x, memory)?;
        Some(mlp_forward(v, mlp)?)
    } else {
        if memory.is_some() {
            return Err(Error::Config(format!("{kind} does not read user memory")));
        }
        None
    };

    let logit = wide_logit + deep.as_ref().map_or(0.0, |d| d.logit);
    Ok(ForwardCache {
        kind,
        active,
        field_features,
        x_len,
        deep,
        factor_sums,
        wide_logit,
        logit,
        y_hat: sigmoid(logit),
    })
}

/// Scores one instance. Memory-bearing kinds read the user's vectors (zeros
/// for unseen users); the store is never modified.
pub fn predict(
    params: &ModelParams,
    instance: &Instance,
    memory: &UserMemoryStore,
) -> Result<(f64, ForwardCache)> {
    let cache = if params.kind.has_memory() {
        let (like, dislike) = memory.read(instance.user_id);
        forward(params, instance, Some((&like, &dislike)))?
    } else {
        forward(params, instance, None)?
    };
    Ok((cache.y_hat, cache))
}

/// Sparse and dense gradient sums for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub linear: HashMap<u64, f64>,
    pub bias: f64,
    pub factors: HashMap<u64, Vec<f64>>,
    pub embeddings: HashMap<u64, Vec<f64>>,
    pub mlp: Option<MlpGradients>,
}

impl ModelGradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        ModelGradients {
            linear: HashMap::new(),
            bias: 0.0,
            factors: HashMap::new(),
            embeddings: HashMap::new(),
            mlp: params.mlp.as_ref().map(MlpGradients::zeros_like),
        }
    }
}

/// Gradient of the loss w.r.t. the memory input slice of `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryInputGrad {
    pub like: Vec<f64>,
    pub dislike: Vec<f64>,
}

/// Adds `dloss_dlogit * d(logit)/d(theta)` into `grads`. For memory-bearing
/// kinds also returns the gradient w.r.t. the memory positions of `v`.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    dloss_dlogit: f64,
    grads: &mut ModelGradients,
) -> Result<Option<MemoryInputGrad>> {
    if cache.kind != params.kind {
        return Err(Error::Config(format!(
            "cache from {} used with {} parameters",
            cache.kind, params.kind
        )));
    }
    if params.kind.has_linear() {
        for &i in &cache.active {
            *grads.linear.entry(i).or_insert(0.0) += dloss_dlogit;
        }
        grads.bias += dloss_dlogit;
    }
    if let Some(factors) = &params.factors {
        let k = factors.dim();
        for &i in &cache.active {
            let vi = factors.get(i);
            let g = grads.factors.entry(i).or_insert_with(|| vec![0.0; k]);
            for d in 0..k {
                g[d] += dloss_dlogit * (cache.factor_sums[d] - vi[d]);
            }
        }
    }
    let (Some(deep), Some(mlp)) = (&cache.deep, &params.mlp) else {
        return Ok(None);
    };
    let emb = params
        .embeddings
        .as_ref()
        .expect("deep kinds carry embeddings");
    let mlp_grads = grads
        .mlp
        .get_or_insert_with(|| MlpGradients::zeros_like(mlp));
    let dv = mlp::mlp_backward_into(deep, mlp, dloss_dlogit, mlp_grads)?;
    embedding::accumulate_embedding_grads(
        &cache.field_features,
        &dv[..cache.x_len],
        emb.dim(),
        &mut grads.embeddings,
    );
    if !params.kind.has_memory() {
        return Ok(None);
    }
    let d = (dv.len() - cache.x_len) / 2;
    Ok(Some(MemoryInputGrad {
        like: dv[cache.x_len..cache.x_len + d].to_vec(),
        dislike: dv[cache.x_len + d..].to_vec(),
    }))
}
