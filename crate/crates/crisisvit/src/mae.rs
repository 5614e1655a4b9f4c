//! Self-supervised pre-training by masked patch reconstruction: hide a
//! random fraction of patches, encode only the visible remainder, and
//! train a lightweight decoder to reconstruct the hidden patches.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    ParamSet, ParameterCheckpoint, ProvenanceRecord, CHECKPOINT_FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::images::{ImageProvider, Normalization};
use crate::ledger::{LedgerEvent, RunLedger};
use crate::trainer::{
    batches, epoch_order, AdamState, OptimizerKind, OptimizerSettings, TrainSchedule,
};
use crate::vit::{
    block_param_specs, expected_param_specs, init_params, insert_params, linear, patchify,
    transformer_block, ModelConfig, ParamNodes, ParamSpec,
};

/// Per-image masking decision: which patch indices are hidden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub total_patches: usize,
    /// Sorted, unique indices in `[0, total_patches)`.
    pub masked_indices: Vec<usize>,
    pub mask_ratio: f64,
}

impl MaskPlan {
    pub fn num_masked(&self) -> usize {
        self.masked_indices.len()
    }

    pub fn num_visible(&self) -> usize {
        self.total_patches - self.masked_indices.len()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        let masked: std::collections::HashSet<usize> =
            self.masked_indices.iter().copied().collect();
        (0..self.total_patches)
            .filter(|i| !masked.contains(i))
            .collect()
    }

    pub fn is_masked(&self, patch: usize) -> bool {
        self.masked_indices.binary_search(&patch).is_ok()
    }

    pub fn validate(&self) -> Result<()> {
        let expected = (self.mask_ratio * self.total_patches as f64).round() as usize;
        if self.masked_indices.len() != expected {
            return Err(Error::Integrity(format!(
                "mask plan has {} masked indices, expected round({} x {}) = {}",
                self.masked_indices.len(),
                self.mask_ratio,
                self.total_patches,
                expected
            )));
        }
        if self.masked_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Integrity("masked indices not sorted unique".into()));
        }
        if self
            .masked_indices
            .last()
            .is_some_and(|&i| i >= self.total_patches)
        {
            return Err(Error::Integrity("masked index out of range".into()));
        }
        Ok(())
    }
}

/// Uniform-without-replacement mask: exactly `round(ratio x total)` indices,
/// deterministic in `seed`.
pub fn sample_mask(total_patches: usize, mask_ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::config(
            "mask_ratio",
            format!("must be in (0, 1), got {mask_ratio}"),
        ));
    }
    if total_patches == 0 {
        return Err(Error::config("total_patches", "must be positive"));
    }
    let k = (mask_ratio * total_patches as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // partial Fisher-Yates: the first k slots end up a uniform k-subset
    let mut pool: Vec<usize> = (0..total_patches).collect();
    for i in 0..k.min(total_patches.saturating_sub(1)) {
        let j = rng.random_range(i..total_patches);
        pool.swap(i, j);
    }
    let mut masked: Vec<usize> = pool[..k].to_vec();
    masked.sort_unstable();
    Ok(MaskPlan {
        total_patches,
        masked_indices: masked,
        mask_ratio,
    })
}

/// Mean squared error over masked patches only. `predicted` and `target`
/// both cover every patch as `(total_patches, patch_dim)` rows; rows at
/// visible indices contribute nothing.
pub fn reconstruction_loss(
    predicted: &Array2<f64>,
    target: &Array2<f64>,
    plan: &MaskPlan,
) -> Result<f64> {
    if predicted.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs target {:?}",
            predicted.shape(),
            target.shape()
        )));
    }
    if predicted.shape()[0] != plan.total_patches {
        return Err(Error::Dimension(format!(
            "{} patch rows but plan covers {}",
            predicted.shape()[0],
            plan.total_patches
        )));
    }
    plan.validate()?;
    if plan.masked_indices.is_empty() {
        return Err(Error::Data("mask plan has no masked patches".into()));
    }
    let d = predicted.shape()[1];
    let mut total = 0.0;
    for &p in &plan.masked_indices {
        for j in 0..d {
            let diff = predicted[[p, j]] - target[[p, j]];
            total += diff * diff;
        }
    }
    Ok(total / (plan.masked_indices.len() * d) as f64)
}

/// Configuration for one self-supervised pre-training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslTrainConfig {
    pub mask_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub decoder_depth: usize,
    pub decoder_dim: usize,
    pub warmup_fraction: f64,
    /// Abort the stage when more than this fraction of requested images
    /// fails to decode.
    pub max_undecodable_fraction: f64,
}

impl Default for SslTrainConfig {
    fn default() -> Self {
        SslTrainConfig {
            mask_ratio: 0.75,
            epochs: 400,
            batch_size: 1024,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1.5e-4,
            weight_decay: 0.0,
            seed: 0,
            decoder_depth: 4,
            decoder_dim: 256,
            warmup_fraction: 0.05,
            max_undecodable_fraction: 0.05,
        }
    }
}

impl SslTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config("mask_ratio", "must be in (0, 1)"));
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.decoder_depth < 1 || self.decoder_dim == 0 {
            return Err(Error::config(
                "decoder_depth",
                "decoder must be non-trivial",
            ));
        }
        if !(0.0..=1.0).contains(&self.max_undecodable_fraction) {
            return Err(Error::config(
                "max_undecodable_fraction",
                "must be in [0, 1]",
            ));
        }
        Ok(())
    }
}

/// Largest head count `h <= encoder heads` that divides the decoder width.
fn decoder_heads(config: &ModelConfig, decoder_dim: usize) -> usize {
    (1..=config.num_heads)
        .rev()
        .find(|h| decoder_dim.is_multiple_of(*h))
        .unwrap_or(1)
}

fn decoder_param_specs(
    config: &ModelConfig,
    decoder_depth: usize,
    decoder_dim: usize,
) -> Vec<ParamSpec> {
    use crate::vit::Init;
    let mut specs = vec![
        ParamSpec {
            name: "decoder.proj.weight".into(),
            shape: vec![config.hidden_dim, decoder_dim],
            init: Init::Normal(0.02),
        },
        ParamSpec {
            name: "decoder.proj.bias".into(),
            shape: vec![decoder_dim],
            init: Init::Zeros,
        },
        ParamSpec {
            name: "decoder.mask_token".into(),
            shape: vec![decoder_dim],
            init: Init::Normal(0.02),
        },
        ParamSpec {
            name: "decoder.pos_embed".into(),
            shape: vec![1, config.num_patches(), decoder_dim],
            init: Init::Normal(0.02),
        },
    ];
    let mlp = (decoder_dim as f64 * config.mlp_ratio).round() as usize;
    for i in 0..decoder_depth {
        specs.extend(block_param_specs(
            &format!("decoder.blocks.{i}"),
            decoder_dim,
            mlp,
        ));
    }
    specs.push(ParamSpec {
        name: "decoder.norm.weight".into(),
        shape: vec![decoder_dim],
        init: Init::Ones,
    });
    specs.push(ParamSpec {
        name: "decoder.norm.bias".into(),
        shape: vec![decoder_dim],
        init: Init::Zeros,
    });
    specs.push(ParamSpec {
        name: "decoder.pred.weight".into(),
        shape: vec![decoder_dim, config.patch_dim()],
        init: Init::Normal(0.02),
    });
    specs.push(ParamSpec {
        name: "decoder.pred.bias".into(),
        shape: vec![config.patch_dim()],
        init: Init::Zeros,
    });
    specs
}

/// Normalize each patch row to zero mean / unit variance; these are the
/// reconstruction targets.
fn per_patch_targets(patches: &Array3<f64>) -> Array3<f64> {
    let mut out = patches.clone();
    let d = out.shape()[2] as f64;
    for mut img in out.axis_iter_mut(Axis(0)) {
        for mut row in img.axis_iter_mut(Axis(0)) {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let r = 1.0 / (var + 1e-6).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
        }
    }
    out
}

pub(crate) struct MaeStep {
    pub graph: Graph,
    pub params: ParamNodes,
    pub loss: NodeId,
    /// Token count actually fed to the encoder (1 + visible patches).
    pub encoder_seq_len: usize,
}

/// Build the masked-reconstruction graph for one batch. Only visible
/// patches enter the encoder; the decoder sees the full grid with mask
/// tokens at hidden positions.
pub(crate) fn build_mae_step(
    config: &ModelConfig,
    params: &ParamSet,
    patches: &Array3<f64>,
    plans: &[MaskPlan],
) -> Result<MaeStep> {
    let b = patches.shape()[0];
    let total = config.num_patches();
    if plans.len() != b {
        return Err(Error::Dimension("one mask plan per image required".into()));
    }
    for plan in plans {
        plan.validate()?;
        if plan.total_patches != total {
            return Err(Error::Dimension(format!(
                "mask plan covers {} patches, model has {}",
                plan.total_patches, total
            )));
        }
    }
    let visible: Vec<Vec<usize>> = plans.iter().map(|p| p.visible_indices()).collect();
    let num_visible = visible[0].len();
    if num_visible == 0 {
        return Err(Error::Data("mask leaves no visible patches".into()));
    }
    let targets = per_patch_targets(patches);
    let mask: Vec<Vec<bool>> = plans
        .iter()
        .map(|p| (0..total).map(|i| p.is_masked(i)).collect())
        .collect();

    let mut g = Graph::new();
    let p = insert_params(&mut g, params, true);

    // encoder over visible tokens only
    let patch_leaf = g.leaf(patches.clone().into_dyn(), false);
    let embedded = linear(
        &mut g,
        patch_leaf,
        p.id("patch_embed.weight"),
        p.id("patch_embed.bias"),
    )?;
    let pos_patches = g.index_select(p.id("pos_embed"), 1, &(1..=total).collect::<Vec<_>>())?;
    let embedded = g.add(embedded, pos_patches)?;
    let visible_tokens = g.gather_rows(embedded, &visible)?;
    let cls_pos = g.index_select(p.id("pos_embed"), 1, &[0])?;
    let cls = g.add(p.id("cls_token"), cls_pos)?;
    let cls = g.broadcast_to(cls, &[b, 1, config.hidden_dim])?;
    let mut x = g.concat(&[cls, visible_tokens], 1)?;
    let encoder_seq_len = g.value(x).shape()[1];
    for i in 0..config.depth {
        x = transformer_block(
            &mut g,
            x,
            &p,
            &format!("blocks.{i}"),
            config.hidden_dim,
            config.num_heads,
            config.activation,
        )?;
    }
    let encoded = g.layer_norm(x, p.id("norm.weight"), p.id("norm.bias"), 1e-6)?;

    // decoder over the full grid
    let decoder_dim = g.value(p.id("decoder.proj.bias")).shape()[0];
    let patch_tokens = g.index_select(encoded, 1, &(1..=num_visible).collect::<Vec<_>>())?;
    let projected = linear(
        &mut g,
        patch_tokens,
        p.id("decoder.proj.weight"),
        p.id("decoder.proj.bias"),
    )?;
    let full = g.scatter_rows(projected, p.id("decoder.mask_token"), &visible, total)?;
    let mut d = g.add(full, p.id("decoder.pos_embed"))?;
    let dec_depth = p
        .names
        .iter()
        .filter(|n| n.starts_with("decoder.blocks.") && n.ends_with(".norm1.weight"))
        .count();
    let dec_heads = decoder_heads(config, decoder_dim);
    for i in 0..dec_depth {
        d = transformer_block(
            &mut g,
            d,
            &p,
            &format!("decoder.blocks.{i}"),
            decoder_dim,
            dec_heads,
            config.activation,
        )?;
    }
    let d = g.layer_norm(
        d,
        p.id("decoder.norm.weight"),
        p.id("decoder.norm.bias"),
        1e-6,
    )?;
    let pred = linear(
        &mut g,
        d,
        p.id("decoder.pred.weight"),
        p.id("decoder.pred.bias"),
    )?;
    let loss = g.masked_mse(pred, targets.into_dyn(), &mask)?;

    Ok(MaeStep {
        graph: g,
        params: p,
        loss,
        encoder_seq_len,
    })
}

/// Report of one self-supervised stage.
#[derive(Debug, Clone)]
pub struct SslReport {
    pub epoch_losses: Vec<f64>,
    pub skipped_images: usize,
    /// Encoder sequence length observed on every step (1 + visible).
    pub encoder_seq_len: usize,
}

/// Run self-supervised pre-training from a blank encoder.
pub fn pretrain_ssl(
    split: &[String],
    model_config: &ModelConfig,
    ssl: &SslTrainConfig,
    provider: &dyn ImageProvider,
    normalization: &Normalization,
    ledger: &RunLedger,
    dataset: &str,
) -> Result<(ParameterCheckpoint, SslReport)> {
    let encoder = crate::vit::build_model(&model_config.headless(), ssl.seed)?;
    pretrain_ssl_from(
        encoder,
        split,
        ssl,
        provider,
        normalization,
        ledger,
        dataset,
    )
}

/// Continue self-supervised pre-training from an existing encoder
/// checkpoint (any head is dropped first).
pub fn pretrain_ssl_from(
    base: ParameterCheckpoint,
    split: &[String],
    ssl: &SslTrainConfig,
    provider: &dyn ImageProvider,
    normalization: &Normalization,
    ledger: &RunLedger,
    dataset: &str,
) -> Result<(ParameterCheckpoint, SslReport)> {
    ssl.validate()?;
    if split.is_empty() {
        return Err(Error::Data("self-supervised split is empty".into()));
    }
    base.validate()?;
    let config = base.model_config.headless();
    normalization.validate(config.channels)?;

    // encoder weights carry over; any head is dropped; decoder is fresh
    let mut params = ParamSet::new();
    for spec in expected_param_specs(&config) {
        params.insert(spec.name.clone(), base.params.get(&spec.name)?.clone());
    }
    let decoder_specs = decoder_param_specs(&config, ssl.decoder_depth, ssl.decoder_dim);
    let decoder_params = init_params(&decoder_specs, ssl.seed.wrapping_add(1));
    for (name, value) in decoder_params.iter() {
        params.insert(name.clone(), value.clone());
    }

    let schedule = TrainSchedule {
        learning_rate: ssl.learning_rate,
        warmup_fraction: ssl.warmup_fraction,
        ..TrainSchedule::default()
    };
    let settings = OptimizerSettings {
        weight_decay: ssl.weight_decay,
        ..OptimizerSettings::default()
    };
    let mut adam = AdamState::new(&params, settings);

    let steps_per_epoch = split.len().div_ceil(ssl.batch_size);
    let total_steps = steps_per_epoch * ssl.epochs;
    let start = std::time::Instant::now();
    let mut epoch_losses = Vec::with_capacity(ssl.epochs);
    let mut skipped = 0usize;
    let mut attempted = 0usize;
    let mut seq_len_seen = 0usize;
    let mut global_step = 0usize;

    ledger.append(LedgerEvent::StageStart {
        stage: format!("ssl:{dataset}"),
        fingerprint: String::new(),
    })?;

    for epoch in 0..ssl.epochs {
        let order = epoch_order(split.len(), ssl.seed, epoch);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for (step, batch_idx) in batches(&order, ssl.batch_size).into_iter().enumerate() {
            let mut images = Vec::with_capacity(batch_idx.len());
            for &i in &batch_idx {
                attempted += 1;
                match provider.load(&split[i]) {
                    Ok(img) => images.push((split[i].clone(), img)),
                    Err(Error::Data(_)) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            if attempted > 0
                && skipped as f64 / attempted as f64 > ssl.max_undecodable_fraction
                && skipped > 0
            {
                return Err(Error::Data(format!(
                    "{skipped} of {attempted} images undecodable, above the configured threshold"
                )));
            }
            if images.is_empty() {
                continue;
            }
            let batch =
                crate::images::ImageTensorBatch::from_images(images, normalization.clone())?;
            let patches = patchify(&batch.pixels, &config)?;
            let plans: Vec<MaskPlan> = (0..batch.len())
                .map(|i| {
                    let mask_seed = ssl
                        .seed
                        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                        .wrapping_add((epoch as u64) << 40)
                        .wrapping_add((step as u64) << 20)
                        .wrapping_add(i as u64);
                    sample_mask(config.num_patches(), ssl.mask_ratio, mask_seed)
                })
                .collect::<Result<_>>()?;
            let mae = build_mae_step(&config, &params, &patches, &plans)?;
            seq_len_seen = mae.encoder_seq_len;
            let loss_value = mae.graph.value(mae.loss).iter().next().copied().unwrap();
            let mut grads = mae.graph.backward(mae.loss)?;
            let mut grad_vec: Vec<Option<crate::graph::Tensor>> =
                mae.params.ids.iter().map(|&id| grads.take(id)).collect();
            let lr = schedule.lr_at(global_step, total_steps);
            adam.step(&mut params, &mut grad_vec, lr, schedule.grad_clip);
            global_step += 1;
            epoch_loss += loss_value;
            epoch_steps += 1;
        }
        if epoch_steps == 0 {
            return Err(Error::Data("no decodable images in split".into()));
        }
        let mean_loss = epoch_loss / epoch_steps as f64;
        epoch_losses.push(mean_loss);
        ledger.append(LedgerEvent::EpochMetric {
            stage: format!("ssl:{dataset}"),
            epoch,
            step: global_step,
            loss: mean_loss,
            accuracy: None,
            wall_time: start.elapsed().as_secs_f64(),
        })?;
    }

    // keep the encoder, drop the decoder
    let mut encoder_params = ParamSet::new();
    for spec in expected_param_specs(&config) {
        encoder_params.insert(spec.name.clone(), params.get(&spec.name)?.clone());
    }
    let mut provenance = base.provenance.clone();
    provenance.push(
        ProvenanceRecord::stage(dataset, "self_supervised", ssl.epochs, ssl.seed)
            .with_normalization(normalization.clone())
            .with_detail(format!("mask_ratio={}", ssl.mask_ratio)),
    );
    let checkpoint = ParameterCheckpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model_config: config,
        params: encoder_params,
        provenance,
    };
    ledger.append(LedgerEvent::StageFinish {
        stage: format!("ssl:{dataset}"),
        fingerprint: String::new(),
        checkpoint_digest: checkpoint.digest()?,
        wall_time: start.elapsed().as_secs_f64(),
    })?;
    Ok((
        checkpoint,
        SslReport {
            epoch_losses,
            skipped_images: skipped,
            encoder_seq_len: seq_len_seen,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::images::MemoryImageProvider;
    use ndarray::Array2;

    #[test]
    fn mask_cardinality_is_exact() {
        let plan = sample_mask(196, 0.75, 1).unwrap();
        assert_eq!(plan.num_masked(), 147);
        assert_eq!(plan.num_visible(), 49);
        plan.validate().unwrap();
    }

    #[test]
    fn mask_ratio_bounds_enforced() {
        assert!(matches!(
            sample_mask(196, 1.0, 0),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            sample_mask(196, 0.0, 0),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            sample_mask(196, -0.5, 0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn mask_is_deterministic_in_seed() {
        assert_eq!(
            sample_mask(64, 0.5, 9).unwrap(),
            sample_mask(64, 0.5, 9).unwrap()
        );
        assert_ne!(
            sample_mask(64, 0.5, 9).unwrap().masked_indices,
            sample_mask(64, 0.5, 10).unwrap().masked_indices
        );
    }

    #[test]
    fn mask_uniform_over_seeds() {
        // total=4, ratio=0.5: each index should be masked in ~5000 of 10000 draws
        let mut counts = [0usize; 4];
        for seed in 0..10_000u64 {
            for &i in &sample_mask(4, 0.5, seed).unwrap().masked_indices {
                counts[i] += 1;
            }
        }
        for &c in &counts {
            assert!(
                (c as i64 - 5000).abs() <= 300,
                "index frequency {c} outside 5000 +- 300"
            );
        }
    }

    #[test]
    fn loss_zero_when_prediction_matches() {
        let plan = sample_mask(8, 0.5, 3).unwrap();
        let target = Array2::from_shape_fn((8, 6), |(i, j)| (i * 6 + j) as f64);
        let loss = reconstruction_loss(&target, &target, &plan).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn loss_ignores_visible_perturbations() {
        let plan = sample_mask(8, 0.5, 3).unwrap();
        let pred = Array2::from_shape_fn((8, 6), |(i, j)| ((i + j) as f64).sin());
        let target = Array2::from_shape_fn((8, 6), |(i, j)| ((i * j) as f64).cos());
        let base = reconstruction_loss(&pred, &target, &plan).unwrap();
        let mut perturbed = target.clone();
        for v in plan.visible_indices() {
            for j in 0..6 {
                perturbed[[v, j]] += 17.5;
            }
        }
        let after = reconstruction_loss(&pred, &perturbed, &plan).unwrap();
        assert_eq!(base, after);
    }

    #[test]
    fn loss_hand_computed_value() {
        // 2 patches, 1 masked, elementwise error 2 on a 4-element patch -> 4.0
        let plan = MaskPlan {
            total_patches: 2,
            masked_indices: vec![1],
            mask_ratio: 0.5,
        };
        plan.validate().unwrap();
        let pred = Array2::from_elem((2, 4), 2.0);
        let target = Array2::zeros((2, 4));
        let loss = reconstruction_loss(&pred, &target, &plan).unwrap();
        assert_eq!(loss, 4.0);
    }

    #[test]
    fn loss_shape_mismatch_is_dimension_error() {
        let plan = sample_mask(4, 0.5, 0).unwrap();
        let pred = Array2::zeros((4, 6));
        let target = Array2::zeros((4, 5));
        assert!(matches!(
            reconstruction_loss(&pred, &target, &plan),
            Err(Error::Dimension(_))
        ));
    }

    fn toy_split(n: usize, size: usize) -> (Vec<String>, MemoryImageProvider) {
        let mut provider = MemoryImageProvider::new();
        let mut refs = Vec::new();
        for i in 0..n {
            let img = ndarray::Array3::from_shape_fn((3, size, size), |(c, y, x)| {
                (0.3 * (i as f64 + 1.0) * ((c + 1) as f64) + 0.1 * (y as f64) - 0.05 * (x as f64))
                    .sin()
            });
            let key = format!("img{i}");
            provider.insert(key.clone(), img);
            refs.push(key);
        }
        (refs, provider)
    }

    #[test]
    fn ssl_empty_split_is_data_error() {
        let config = ModelConfig::tiny(0);
        let (_, provider) = toy_split(1, 16);
        let out = pretrain_ssl(
            &[],
            &config,
            &SslTrainConfig {
                epochs: 1,
                batch_size: 4,
                ..SslTrainConfig::default()
            },
            &provider,
            &Normalization::unit(),
            &RunLedger::disabled(),
            "toy",
        );
        assert!(matches!(out, Err(Error::Data(_))));
    }

    #[test]
    fn ssl_zero_epochs_is_config_error() {
        let config = ModelConfig::tiny(0);
        let (refs, provider) = toy_split(4, 16);
        let out = pretrain_ssl(
            &refs,
            &config,
            &SslTrainConfig {
                epochs: 0,
                batch_size: 4,
                ..SslTrainConfig::default()
            },
            &provider,
            &Normalization::unit(),
            &RunLedger::disabled(),
            "toy",
        );
        assert!(matches!(out, Err(Error::Config { .. })));
    }

    #[test]
    fn ssl_is_deterministic() {
        let config = ModelConfig::tiny(0);
        let (refs, provider) = toy_split(8, 16);
        let ssl = SslTrainConfig {
            epochs: 2,
            batch_size: 4,
            decoder_depth: 1,
            decoder_dim: 16,
            seed: 5,
            ..SslTrainConfig::default()
        };
        let norm = Normalization::unit();
        let ledger = RunLedger::disabled();
        let (a, ra) = pretrain_ssl(&refs, &config, &ssl, &provider, &norm, &ledger, "toy").unwrap();
        let (b, rb) = pretrain_ssl(&refs, &config, &ssl, &provider, &norm, &ledger, "toy").unwrap();
        assert!((ra.epoch_losses.last().unwrap() - rb.epoch_losses.last().unwrap()).abs() < 1e-6);
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
    }

    #[test]
    fn encoder_sees_only_visible_tokens() {
        let config = ModelConfig::tiny(0);
        let (refs, provider) = toy_split(4, 16);
        let ssl = SslTrainConfig {
            epochs: 1,
            batch_size: 4,
            mask_ratio: 0.75,
            decoder_depth: 1,
            decoder_dim: 16,
            ..SslTrainConfig::default()
        };
        let (ckpt, report) = pretrain_ssl(
            &refs,
            &config,
            &ssl,
            &provider,
            &Normalization::unit(),
            &RunLedger::disabled(),
            "toy",
        )
        .unwrap();
        // 4 patches, ratio 0.75 -> 3 masked, 1 visible, plus the class token
        assert_eq!(report.encoder_seq_len, 2);
        assert_eq!(ckpt.model_config.num_classes, 0);
        ckpt.validate().unwrap();
        assert_eq!(ckpt.provenance.len(), 1);
        assert_eq!(ckpt.provenance[0].strategy, "self_supervised");
    }

    #[test]
    fn undecodable_images_counted_and_thresholded() {
        let config = ModelConfig::tiny(0);
        let (mut refs, provider) = toy_split(6, 16);
        refs.push("missing-a".into());
        refs.push("missing-b".into());
        let lenient = SslTrainConfig {
            epochs: 1,
            batch_size: 8,
            decoder_depth: 1,
            decoder_dim: 16,
            max_undecodable_fraction: 0.5,
            ..SslTrainConfig::default()
        };
        let (_, report) = pretrain_ssl(
            &refs,
            &config,
            &lenient,
            &provider,
            &Normalization::unit(),
            &RunLedger::disabled(),
            "toy",
        )
        .unwrap();
        assert_eq!(report.skipped_images, 2);

        let strict = SslTrainConfig {
            max_undecodable_fraction: 0.1,
            ..lenient
        };
        let out = pretrain_ssl(
            &refs,
            &config,
            &strict,
            &provider,
            &Normalization::unit(),
            &RunLedger::disabled(),
            "toy",
        );
        assert!(matches!(out, Err(Error::Data(_))));
    }
}
