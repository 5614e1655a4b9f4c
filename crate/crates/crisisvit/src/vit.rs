//! ViT-style encoder: patch embedding, pre-norm transformer blocks, and an
//! optional linear classification head driven by the class token.

use ndarray::{Array2, Array3, Array4, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ParamSet, ParameterCheckpoint, CHECKPOINT_FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Tensor};
use crate::images::ImageTensorBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

/// Full architectural description of a backbone plus head.
///
/// `num_classes == 0` means a headless encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub activation: Activation,
    pub num_classes: usize,
}

impl ModelConfig {
    /// The standard base configuration: 12 layers, 768 hidden size.
    pub fn vit_base(num_classes: usize) -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            depth: 12,
            hidden_dim: 768,
            num_heads: 12,
            mlp_ratio: 4.0,
            activation: Activation::Relu,
            num_classes,
        }
    }

    /// A small configuration for desk-scale runs and tests.
    pub fn tiny(num_classes: usize) -> Self {
        ModelConfig {
            image_size: 16,
            patch_size: 8,
            channels: 3,
            depth: 2,
            hidden_dim: 32,
            num_heads: 4,
            mlp_ratio: 4.0,
            activation: Activation::Relu,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 {
            return Err(Error::config(
                "patch_size",
                "image_size and patch_size must be positive",
            ));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "image_size",
                format!(
                    "image_size {} not divisible by patch_size {}",
                    self.image_size, self.patch_size
                ),
            ));
        }
        if self.hidden_dim == 0
            || self.num_heads == 0
            || !self.hidden_dim.is_multiple_of(self.num_heads)
        {
            return Err(Error::config(
                "hidden_dim",
                format!(
                    "hidden_dim {} not divisible by num_heads {}",
                    self.hidden_dim, self.num_heads
                ),
            ));
        }
        if self.depth < 1 {
            return Err(Error::config("depth", "depth must be at least 1"));
        }
        if self.channels == 0 {
            return Err(Error::config("channels", "channels must be positive"));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::config("mlp_ratio", "mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Sequence length including the class token.
    pub fn num_tokens(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_dim(&self) -> usize {
        (self.hidden_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn headless(&self) -> ModelConfig {
        ModelConfig {
            num_classes: 0,
            ..self.clone()
        }
    }

    pub fn with_classes(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            num_classes,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(name: impl Into<String>, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: shape.to_vec(),
        init,
    }
}

/// Transformer block parameter specs shared by the encoder and the
/// reconstruction decoder; `prefix` is e.g. `"blocks.0"`.
pub(crate) fn block_param_specs(prefix: &str, width: usize, mlp: usize) -> Vec<ParamSpec> {
    vec![
        spec(format!("{prefix}.norm1.weight"), &[width], Init::Ones),
        spec(format!("{prefix}.norm1.bias"), &[width], Init::Zeros),
        spec(
            format!("{prefix}.attn.qkv.weight"),
            &[width, 3 * width],
            Init::Normal(0.02),
        ),
        spec(format!("{prefix}.attn.qkv.bias"), &[3 * width], Init::Zeros),
        spec(
            format!("{prefix}.attn.proj.weight"),
            &[width, width],
            Init::Normal(0.02),
        ),
        spec(format!("{prefix}.attn.proj.bias"), &[width], Init::Zeros),
        spec(format!("{prefix}.norm2.weight"), &[width], Init::Ones),
        spec(format!("{prefix}.norm2.bias"), &[width], Init::Zeros),
        spec(
            format!("{prefix}.mlp.fc1.weight"),
            &[width, mlp],
            Init::Normal(0.02),
        ),
        spec(format!("{prefix}.mlp.fc1.bias"), &[mlp], Init::Zeros),
        spec(
            format!("{prefix}.mlp.fc2.weight"),
            &[mlp, width],
            Init::Normal(0.02),
        ),
        spec(format!("{prefix}.mlp.fc2.bias"), &[width], Init::Zeros),
    ]
}

/// The exact parameter tree a [`ModelConfig`] determines, in canonical order.
pub fn expected_param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let h = config.hidden_dim;
    let mut specs = vec![
        spec(
            "patch_embed.weight",
            &[config.patch_dim(), h],
            Init::Normal(0.02),
        ),
        spec("patch_embed.bias", &[h], Init::Zeros),
        spec("cls_token", &[1, 1, h], Init::Normal(0.02)),
        spec(
            "pos_embed",
            &[1, config.num_tokens(), h],
            Init::Normal(0.02),
        ),
    ];
    for i in 0..config.depth {
        specs.extend(block_param_specs(
            &format!("blocks.{i}"),
            h,
            config.mlp_dim(),
        ));
    }
    specs.push(spec("norm.weight", &[h], Init::Ones));
    specs.push(spec("norm.bias", &[h], Init::Zeros));
    if config.num_classes > 0 {
        specs.push(spec(
            "head.weight",
            &[h, config.num_classes],
            Init::Normal(0.02),
        ));
        specs.push(spec("head.bias", &[config.num_classes], Init::Zeros));
    }
    specs
}

/// Names of parameters that belong to the classification head.
pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

pub(crate) fn init_tensor(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Normal(std) => {
            let dist = rand_distr::Normal::new(0.0, std).expect("valid normal");
            (0..n).map(|_| dist.sample(rng)).collect()
        }
    };
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data")
}

pub(crate) fn init_params(specs: &[ParamSpec], seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for s in specs {
        params.insert(s.name.clone(), init_tensor(&s.shape, s.init, &mut rng));
    }
    params
}

/// Build a freshly initialized model. Initialization is deterministic in
/// `(config, seed)`; provenance starts empty and records training stages as
/// they are applied.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ParameterCheckpoint> {
    config.validate()?;
    let params = init_params(&expected_param_specs(config), seed);
    Ok(ParameterCheckpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model_config: config.clone(),
        params,
        provenance: Vec::new(),
    })
}

/// Replace (or attach) the classification head, copying every encoder
/// parameter verbatim and appending a head-replacement provenance record.
pub fn replace_head(
    checkpoint: &ParameterCheckpoint,
    new_num_classes: usize,
    seed: u64,
) -> Result<ParameterCheckpoint> {
    checkpoint.validate()?;
    let new_config = checkpoint.model_config.with_classes(new_num_classes);
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in expected_param_specs(&new_config) {
        if is_head_param(&s.name) {
            params.insert(s.name.clone(), init_tensor(&s.shape, s.init, &mut rng));
        } else {
            params.insert(s.name.clone(), checkpoint.params.get(&s.name)?.clone());
        }
    }
    let mut provenance = checkpoint.provenance.clone();
    provenance.push(crate::checkpoint::ProvenanceRecord::head_replacement(
        new_num_classes,
        seed,
    ));
    Ok(ParameterCheckpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model_config: new_config,
        params,
        provenance,
    })
}

/// Flatten `(b, c, s, s)` pixels into `(b, patches, patch_dim)` rows.
/// Patches are enumerated row-major over the grid; within a patch the
/// layout is channel-major then row-major, matching `patch_dim()`.
pub fn patchify(pixels: &Array4<f64>, config: &ModelConfig) -> Result<Array3<f64>> {
    let (b, c, hgt, wid) = (
        pixels.shape()[0],
        pixels.shape()[1],
        pixels.shape()[2],
        pixels.shape()[3],
    );
    if c != config.channels || hgt != config.image_size || wid != config.image_size {
        return Err(Error::Dimension(format!(
            "batch of shape {:?} does not match model input ({}, {}, {})",
            pixels.shape(),
            config.channels,
            config.image_size,
            config.image_size
        )));
    }
    if b == 0 {
        return Err(Error::Data("empty image batch".into()));
    }
    let ps = config.patch_size;
    let grid = config.grid_side();
    let mut out = Array3::<f64>::zeros((b, config.num_patches(), config.patch_dim()));
    for bi in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                let patch = gy * grid + gx;
                let mut k = 0;
                for ci in 0..c {
                    for py in 0..ps {
                        for px in 0..ps {
                            out[[bi, patch, k]] = pixels[[bi, ci, gy * ps + py, gx * ps + px]];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Node handles for every model parameter inserted into a graph, in the
/// canonical spec order.
pub struct ParamNodes {
    pub names: Vec<String>,
    pub ids: Vec<NodeId>,
}

impl ParamNodes {
    pub fn id(&self, name: &str) -> NodeId {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.ids[idx]
    }
}

pub(crate) fn insert_params(g: &mut Graph, params: &ParamSet, requires_grad: bool) -> ParamNodes {
    let mut names = Vec::new();
    let mut ids = Vec::new();
    for (name, value) in params.iter() {
        names.push(name.clone());
        ids.push(g.leaf(value.clone(), requires_grad));
    }
    ParamNodes { names, ids }
}

pub(crate) fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// One pre-norm transformer block over `(b, t, width)` tokens.
pub(crate) fn transformer_block(
    g: &mut Graph,
    x: NodeId,
    p: &ParamNodes,
    prefix: &str,
    width: usize,
    num_heads: usize,
    activation: Activation,
) -> Result<NodeId> {
    let (b, t) = {
        let s = g.value(x).shape();
        (s[0], s[1])
    };
    let head_dim = width / num_heads;

    let ln1 = g.layer_norm(
        x,
        p.id(&format!("{prefix}.norm1.weight")),
        p.id(&format!("{prefix}.norm1.bias")),
        1e-6,
    )?;
    let qkv = linear(
        g,
        ln1,
        p.id(&format!("{prefix}.attn.qkv.weight")),
        p.id(&format!("{prefix}.attn.qkv.bias")),
    )?;
    // (b, t, 3w) -> (3, b, heads, t, head_dim)
    let qkv = g.reshape(qkv, &[b, t, 3, num_heads, head_dim])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let q = g.index_select(qkv, 0, &[0])?;
    let k = g.index_select(qkv, 0, &[1])?;
    let v = g.index_select(qkv, 0, &[2])?;
    let q = g.reshape(q, &[b * num_heads, t, head_dim])?;
    let k = g.reshape(k, &[b * num_heads, t, head_dim])?;
    let v = g.reshape(v, &[b * num_heads, t, head_dim])?;

    let kt = g.permute(k, &[0, 2, 1])?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (head_dim as f64).sqrt());
    let attn = g.softmax(scores);
    let ctx = g.matmul(attn, v)?;
    let ctx = g.reshape(ctx, &[b, num_heads, t, head_dim])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, t, width])?;
    let proj = linear(
        g,
        ctx,
        p.id(&format!("{prefix}.attn.proj.weight")),
        p.id(&format!("{prefix}.attn.proj.bias")),
    )?;
    let x = g.add(x, proj)?;

    let ln2 = g.layer_norm(
        x,
        p.id(&format!("{prefix}.norm2.weight")),
        p.id(&format!("{prefix}.norm2.bias")),
        1e-6,
    )?;
    let h1 = linear(
        g,
        ln2,
        p.id(&format!("{prefix}.mlp.fc1.weight")),
        p.id(&format!("{prefix}.mlp.fc1.bias")),
    )?;
    let act = match activation {
        Activation::Relu => g.relu(h1),
        Activation::Gelu => g.gelu(h1),
    };
    let h2 = linear(
        g,
        act,
        p.id(&format!("{prefix}.mlp.fc2.weight")),
        p.id(&format!("{prefix}.mlp.fc2.bias")),
    )?;
    g.add(x, h2)
}

/// Encoder forward over a full patch grid: returns normalized token
/// embeddings `(b, 1 + patches, hidden)`.
pub(crate) fn encoder_tokens(
    g: &mut Graph,
    p: &ParamNodes,
    config: &ModelConfig,
    patches: Array3<f64>,
) -> Result<NodeId> {
    let b = patches.shape()[0];
    let patch_tokens = {
        let leaf = g.leaf(patches.into_dyn(), false);
        linear(
            g,
            leaf,
            p.id("patch_embed.weight"),
            p.id("patch_embed.bias"),
        )?
    };
    let cls = g.broadcast_to(p.id("cls_token"), &[b, 1, config.hidden_dim])?;
    let tokens = g.concat(&[cls, patch_tokens], 1)?;
    let mut x = g.add(tokens, p.id("pos_embed"))?;
    for i in 0..config.depth {
        x = transformer_block(
            g,
            x,
            p,
            &format!("blocks.{i}"),
            config.hidden_dim,
            config.num_heads,
            config.activation,
        )?;
    }
    g.layer_norm(x, p.id("norm.weight"), p.id("norm.bias"), 1e-6)
}

/// Class-token logits `(b, num_classes)`; requires a head.
pub(crate) fn classifier_logits(
    g: &mut Graph,
    p: &ParamNodes,
    config: &ModelConfig,
    tokens: NodeId,
) -> Result<NodeId> {
    if config.num_classes == 0 {
        return Err(Error::Usage(
            "model is a headless encoder; attach a head before classifying".into(),
        ));
    }
    let b = g.value(tokens).shape()[0];
    let cls = g.index_select(tokens, 1, &[0])?;
    let cls = g.reshape(cls, &[b, config.hidden_dim])?;
    linear(g, cls, p.id("head.weight"), p.id("head.bias"))
}

/// Graph pieces for one supervised training step.
pub struct ClassifierGraph {
    pub graph: Graph,
    pub params: ParamNodes,
    pub loss: NodeId,
}

/// Build the forward graph and cross-entropy loss for one labeled batch;
/// parameters are inserted with gradients enabled, in checkpoint order.
pub fn build_classifier_loss(
    checkpoint: &ParameterCheckpoint,
    pixels: &Array4<f64>,
    labels: &[usize],
    label_smoothing: f64,
) -> Result<ClassifierGraph> {
    let config = &checkpoint.model_config;
    let patches = patchify(pixels, config)?;
    let mut g = Graph::new();
    let p = insert_params(&mut g, &checkpoint.params, true);
    let tokens = encoder_tokens(&mut g, &p, config, patches)?;
    let logits = classifier_logits(&mut g, &p, config, tokens)?;
    let loss = g.cross_entropy(logits, labels, label_smoothing)?;
    Ok(ClassifierGraph {
        graph: g,
        params: p,
        loss,
    })
}

/// Token embeddings for a batch (inference; no gradients retained).
pub fn forward_tokens(
    checkpoint: &ParameterCheckpoint,
    batch: &ImageTensorBatch,
) -> Result<Array3<f64>> {
    let config = &checkpoint.model_config;
    let patches = patchify(&batch.pixels, config)?;
    let mut g = Graph::new();
    let p = insert_params(&mut g, &checkpoint.params, false);
    let tokens = encoder_tokens(&mut g, &p, config, patches)?;
    Ok(g.value(tokens)
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("token tensor is 3-d")
        .to_owned())
}

/// Per-class logits for a batch.
pub fn forward_logits(
    checkpoint: &ParameterCheckpoint,
    batch: &ImageTensorBatch,
) -> Result<Array2<f64>> {
    let config = &checkpoint.model_config;
    let patches = patchify(&batch.pixels, config)?;
    let mut g = Graph::new();
    let p = insert_params(&mut g, &checkpoint.params, false);
    let tokens = encoder_tokens(&mut g, &p, config, patches)?;
    let logits = classifier_logits(&mut g, &p, config, tokens)?;
    Ok(g.value(logits)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("logits are 2-d")
        .to_owned())
}

/// Per-class probability rows (softmax over head logits). Each row is
/// nonnegative and sums to one; the argmax is the predicted class.
pub fn forward_classify(
    checkpoint: &ParameterCheckpoint,
    batch: &ImageTensorBatch,
) -> Result<Array2<f64>> {
    let logits = forward_logits(checkpoint, batch)?;
    let mut probs = logits;
    for mut row in probs.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    Ok(probs)
}

pub fn argmax_row(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
