//! ConvMixer-style isotropic classifier with a swappable patch embedding
//! and classifier head over a freezable backbone.
//!
//! The forward pass is: patch embedding (strided conv, kernel = stride =
//! patch size) -> GELU -> norm, then `depth` times [depthwise conv ->
//! GELU -> norm, residual add; pointwise conv -> GELU -> norm], then
//! global average pooling and an affine head. The embedding, its adjacent
//! norm, and the head travel together as a swappable pair; everything
//! between them is the backbone.

pub mod checkpoint;

use thiserror::Error;

use crate::rng::{fnv1a64, stream};
use crate::tensor::tape::{GradTape, ValueId};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config: {0}")]
    Config(String),
    #[error("pair does not fit the model: {0}")]
    PairMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub depth: usize,
    pub patch_size: usize,
    pub kernel_size: usize,
    pub num_classes: usize,
    pub image_side: usize,
}

impl ModelConfig {
    /// Desk-scale default: small enough to pre-train on one CPU core in
    /// minutes while keeping the isotropic patch-embedding architecture.
    pub fn desk_default() -> Self {
        Self {
            hidden_dim: 64,
            depth: 4,
            patch_size: 4,
            kernel_size: 5,
            num_classes: 10,
            image_side: 32,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_dim == 0 || self.depth == 0 || self.num_classes == 0 {
            return Err(ModelError::Config(format!(
                "hidden_dim, depth and num_classes must be positive, got {self:?}"
            )));
        }
        if self.patch_size == 0 || self.image_side % self.patch_size != 0 {
            return Err(ModelError::Config(format!(
                "image side {} must be a positive multiple of patch size {}",
                self.image_side, self.patch_size
            )));
        }
        if self.kernel_size == 0 {
            return Err(ModelError::Config("kernel_size must be positive".into()));
        }
        Ok(())
    }

    /// Patches per image side.
    pub fn grid(&self) -> usize {
        self.image_side / self.patch_size
    }
}

/// Scale/shift plus running statistics for one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<F: Scalar = f32> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
}

/// Momentum for running-statistic updates.
pub const STATS_MOMENTUM: f64 = 0.9;

impl<F: Scalar> NormParams<F> {
    fn fresh(channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[channels], F::ONE),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], F::ONE),
        }
    }

    /// Fold freshly observed batch statistics into the running averages.
    pub fn update_running(&mut self, mean: &Tensor<F>, var: &Tensor<F>) {
        let keep = F::from_f64(STATS_MOMENTUM);
        let take = F::from_f64(1.0 - STATS_MOMENTUM);
        for (r, &m) in self.running_mean.as_mut_slice().iter_mut().zip(mean.as_slice()) {
            *r = *r * keep + m * take;
        }
        for (r, &v) in self.running_var.as_mut_slice().iter_mut().zip(var.as_slice()) {
            *r = *r * keep + v * take;
        }
    }

    fn to_f64(&self) -> NormParams<f64> {
        NormParams {
            gamma: self.gamma.to_f64(),
            beta: self.beta.to_f64(),
            running_mean: self.running_mean.to_f64(),
            running_var: self.running_var.to_f64(),
        }
    }
}

/// Strided-conv patch embedding plus its adjacent norm (the norm
/// co-adapts with the embedding during fine-tuning, so it travels with it).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedding<F: Scalar = f32> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub norm: NormParams<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<F: Scalar = f32> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

/// One fine-tuned (embedding, head) pair, tagged with the pool index of
/// the key it was trained under (1-based; 0 = pre-trained plain pair).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingHeadPair<F: Scalar = f32> {
    pub key_id: usize,
    pub embedding: PatchEmbedding<F>,
    pub head: ClassifierHead<F>,
}

impl<F: Scalar> EmbeddingHeadPair<F> {
    pub fn to_f64(&self) -> EmbeddingHeadPair<f64> {
        EmbeddingHeadPair {
            key_id: self.key_id,
            embedding: PatchEmbedding {
                weight: self.embedding.weight.to_f64(),
                bias: self.embedding.bias.to_f64(),
                norm: self.embedding.norm.to_f64(),
            },
            head: ClassifierHead {
                weight: self.head.weight.to_f64(),
                bias: self.head.bias.to_f64(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixerBlock<F: Scalar = f32> {
    pub dw_weight: Tensor<F>,
    pub dw_bias: Tensor<F>,
    pub norm1: NormParams<F>,
    pub pw_weight: Tensor<F>,
    pub pw_bias: Tensor<F>,
    pub norm2: NormParams<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<F: Scalar = f32> {
    pub blocks: Vec<MixerBlock<F>>,
}

impl<F: Scalar> Backbone<F> {
    pub fn to_f64(&self) -> Backbone<f64> {
        Backbone {
            blocks: self
                .blocks
                .iter()
                .map(|b| MixerBlock {
                    dw_weight: b.dw_weight.to_f64(),
                    dw_bias: b.dw_bias.to_f64(),
                    norm1: b.norm1.to_f64(),
                    pw_weight: b.pw_weight.to_f64(),
                    pw_bias: b.pw_bias.to_f64(),
                    norm2: b.norm2.to_f64(),
                })
                .collect(),
        }
    }
}

/// Full classifier: frozen-able backbone plus the currently attached pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F: Scalar = f32> {
    pub config: ModelConfig,
    pub backbone: Backbone<F>,
    pub pair: EmbeddingHeadPair<F>,
}

/// Which parameters train and which statistics the norms use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Everything trains; all norms use batch statistics.
    Pretrain,
    /// Only the pair trains; the embedding norm re-estimates its
    /// statistics while backbone norms keep their stored ones unless
    /// `reestimate_backbone_stats` is set.
    Finetune { reestimate_backbone_stats: bool },
    /// Inference: nothing trains, all norms use stored statistics.
    Eval,
}

/// Where a training-mode norm lives, for routing running-stat updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormSite {
    Embedding,
    BlockNorm1(usize),
    BlockNorm2(usize),
}

pub struct StatUpdate<F: Scalar = f32> {
    pub site: NormSite,
    pub mean: Tensor<F>,
    pub var: Tensor<F>,
}

pub struct ForwardPass<F: Scalar = f32> {
    pub logits: ValueId,
    /// (parameter name, tape leaf) for every parameter that trains in
    /// this phase, in visiting order.
    pub trainable: Vec<(String, ValueId)>,
    /// Batch statistics observed by training-mode norms.
    pub stat_updates: Vec<StatUpdate<F>>,
}

/// Initialize a model deterministically from a seed: uniform fan-in
/// scaling for convolution and affine parameters, norm scale 1 / shift 0.
pub fn init_model<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<F>, ModelError> {
    config.validate()?;
    let mut rng = stream(seed, "model-init");
    let d = config.hidden_dim;
    let p = config.patch_size;
    let k = config.kernel_size;

    let mut uniform = |shape: &[usize], fan_in: usize| -> Tensor<F> {
        let limit = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| F::from_f64(rng.range_f64(-limit, limit)))
            .collect();
        Tensor::from_vec(shape, data).expect("sized")
    };

    let embedding = PatchEmbedding {
        weight: uniform(&[d, 3, p, p], 3 * p * p),
        bias: uniform(&[d], 3 * p * p),
        norm: NormParams::fresh(d),
    };
    let blocks = (0..config.depth)
        .map(|_| MixerBlock {
            dw_weight: uniform(&[d, k, k], k * k),
            dw_bias: uniform(&[d], k * k),
            norm1: NormParams::fresh(d),
            pw_weight: uniform(&[d, d], d),
            pw_bias: uniform(&[d], d),
            norm2: NormParams::fresh(d),
        })
        .collect();
    let head = ClassifierHead {
        weight: uniform(&[config.num_classes, d], d),
        bias: uniform(&[config.num_classes], d),
    };

    Ok(Model {
        config: config.clone(),
        backbone: Backbone { blocks },
        pair: EmbeddingHeadPair {
            key_id: 0,
            embedding,
            head,
        },
    })
}

impl<F: Scalar> Model<F> {
    pub fn to_f64(&self) -> Model<f64> {
        Model {
            config: self.config.clone(),
            backbone: self.backbone.to_f64(),
            pair: self.pair.to_f64(),
        }
    }

    /// Attach a different pair, returning the previous one. The backbone
    /// is untouched.
    pub fn swap_pair(&mut self, pair: EmbeddingHeadPair<F>) -> Result<EmbeddingHeadPair<F>, ModelError> {
        check_pair_dims(&self.config, &pair)?;
        Ok(std::mem::replace(&mut self.pair, pair))
    }

    /// Forward on this model's own pair.
    pub fn forward(
        &self,
        tape: &mut GradTape<F>,
        input: ValueId,
        phase: Phase,
    ) -> Result<ForwardPass<F>, ModelError> {
        forward_parts(&self.config, &self.backbone, &self.pair, tape, input, phase)
    }

    /// Fold observed batch statistics back into the owning norm layers.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<F>]) {
        for u in updates {
            let norm = match u.site {
                NormSite::Embedding => &mut self.pair.embedding.norm,
                NormSite::BlockNorm1(i) => &mut self.backbone.blocks[i].norm1,
                NormSite::BlockNorm2(i) => &mut self.backbone.blocks[i].norm2,
            };
            norm.update_running(&u.mean, &u.var);
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(ParamGroup, &str, &Tensor<F>)) {
        let pair = &self.pair;
        f(ParamGroup::Pair, "embed.weight", &pair.embedding.weight);
        f(ParamGroup::Pair, "embed.bias", &pair.embedding.bias);
        f(ParamGroup::Pair, "embed.norm.gamma", &pair.embedding.norm.gamma);
        f(ParamGroup::Pair, "embed.norm.beta", &pair.embedding.norm.beta);
        for (i, b) in self.backbone.blocks.iter().enumerate() {
            f(ParamGroup::Backbone, &format!("block{i}.dw.weight"), &b.dw_weight);
            f(ParamGroup::Backbone, &format!("block{i}.dw.bias"), &b.dw_bias);
            f(ParamGroup::Backbone, &format!("block{i}.norm1.gamma"), &b.norm1.gamma);
            f(ParamGroup::Backbone, &format!("block{i}.norm1.beta"), &b.norm1.beta);
            f(ParamGroup::Backbone, &format!("block{i}.pw.weight"), &b.pw_weight);
            f(ParamGroup::Backbone, &format!("block{i}.pw.bias"), &b.pw_bias);
            f(ParamGroup::Backbone, &format!("block{i}.norm2.gamma"), &b.norm2.gamma);
            f(ParamGroup::Backbone, &format!("block{i}.norm2.beta"), &b.norm2.beta);
        }
        f(ParamGroup::Pair, "head.weight", &pair.head.weight);
        f(ParamGroup::Pair, "head.bias", &pair.head.bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamGroup, &str, &mut Tensor<F>)) {
        let pair = &mut self.pair;
        f(ParamGroup::Pair, "embed.weight", &mut pair.embedding.weight);
        f(ParamGroup::Pair, "embed.bias", &mut pair.embedding.bias);
        f(ParamGroup::Pair, "embed.norm.gamma", &mut pair.embedding.norm.gamma);
        f(ParamGroup::Pair, "embed.norm.beta", &mut pair.embedding.norm.beta);
        for (i, b) in self.backbone.blocks.iter_mut().enumerate() {
            f(ParamGroup::Backbone, &format!("block{i}.dw.weight"), &mut b.dw_weight);
            f(ParamGroup::Backbone, &format!("block{i}.dw.bias"), &mut b.dw_bias);
            f(ParamGroup::Backbone, &format!("block{i}.norm1.gamma"), &mut b.norm1.gamma);
            f(ParamGroup::Backbone, &format!("block{i}.norm1.beta"), &mut b.norm1.beta);
            f(ParamGroup::Backbone, &format!("block{i}.pw.weight"), &mut b.pw_weight);
            f(ParamGroup::Backbone, &format!("block{i}.pw.bias"), &mut b.pw_bias);
            f(ParamGroup::Backbone, &format!("block{i}.norm2.gamma"), &mut b.norm2.gamma);
            f(ParamGroup::Backbone, &format!("block{i}.norm2.beta"), &mut b.norm2.beta);
        }
        f(ParamGroup::Pair, "head.weight", &mut pair.head.weight);
        f(ParamGroup::Pair, "head.bias", &mut pair.head.bias);
    }

    pub fn visit_buffers(&self, f: &mut dyn FnMut(ParamGroup, &str, &Tensor<F>)) {
        let pair = &self.pair;
        f(ParamGroup::Pair, "embed.norm.running_mean", &pair.embedding.norm.running_mean);
        f(ParamGroup::Pair, "embed.norm.running_var", &pair.embedding.norm.running_var);
        for (i, b) in self.backbone.blocks.iter().enumerate() {
            f(ParamGroup::Backbone, &format!("block{i}.norm1.running_mean"), &b.norm1.running_mean);
            f(ParamGroup::Backbone, &format!("block{i}.norm1.running_var"), &b.norm1.running_var);
            f(ParamGroup::Backbone, &format!("block{i}.norm2.running_mean"), &b.norm2.running_mean);
            f(ParamGroup::Backbone, &format!("block{i}.norm2.running_var"), &b.norm2.running_var);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Pair,
}

pub(crate) fn check_pair_dims<F: Scalar>(
    config: &ModelConfig,
    pair: &EmbeddingHeadPair<F>,
) -> Result<(), ModelError> {
    let (d, p, c) = (config.hidden_dim, config.patch_size, config.num_classes);
    let e = &pair.embedding;
    if e.weight.shape() != [d, 3, p, p]
        || e.bias.shape() != [d]
        || e.norm.gamma.shape() != [d]
        || e.norm.beta.shape() != [d]
        || e.norm.running_mean.shape() != [d]
        || e.norm.running_var.shape() != [d]
    {
        return Err(ModelError::PairMismatch(format!(
            "embedding shapes (weight {:?}) do not match hidden_dim {d}, patch {p}",
            e.weight.shape()
        )));
    }
    if pair.head.weight.shape() != [c, d] || pair.head.bias.shape() != [c] {
        return Err(ModelError::PairMismatch(format!(
            "head shapes (weight {:?}) do not match {c} classes over {d} features",
            pair.head.weight.shape()
        )));
    }
    Ok(())
}

/// Forward pass over explicit parts, so callers can pair any backbone
/// with any dimensionally compatible (embedding, head) pair.
pub fn forward_parts<F: Scalar>(
    config: &ModelConfig,
    backbone: &Backbone<F>,
    pair: &EmbeddingHeadPair<F>,
    tape: &mut GradTape<F>,
    input: ValueId,
    phase: Phase,
) -> Result<ForwardPass<F>, ModelError> {
    let shape = tape.value(input).shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != config.image_side || shape[3] != config.image_side {
        return Err(ModelError::Tensor(TensorError::Shape {
            op: "forward",
            detail: format!(
                "input {shape:?}, expected (B, 3, {0}, {0})",
                config.image_side
            ),
        }));
    }
    if backbone.blocks.len() != config.depth {
        return Err(ModelError::Config(format!(
            "backbone has {} blocks, config says {}",
            backbone.blocks.len(),
            config.depth
        )));
    }
    check_pair_dims(config, pair)?;

    let (pair_trains, backbone_trains) = match phase {
        Phase::Pretrain => (true, true),
        Phase::Finetune { .. } => (true, false),
        Phase::Eval => (false, false),
    };
    let (embed_stats_batch, backbone_stats_batch) = match phase {
        Phase::Pretrain => (true, true),
        Phase::Finetune {
            reestimate_backbone_stats,
        } => (true, reestimate_backbone_stats),
        Phase::Eval => (false, false),
    };

    let mut trainable = Vec::new();
    let mut stat_updates = Vec::new();

    let reg = |tape: &mut GradTape<F>, trains: bool, name: String, t: &Tensor<F>, sink: &mut Vec<(String, ValueId)>| {
        if trains {
            let id = tape.leaf(t.clone());
            sink.push((name, id));
            id
        } else {
            tape.constant(t.clone())
        }
    };

    // a norm layer in batch-stats or stored-stats mode
    let norm_layer = |tape: &mut GradTape<F>,
                          x: ValueId,
                          norm: &NormParams<F>,
                          site: NormSite,
                          prefix: &str,
                          trains: bool,
                          batch_stats: bool,
                          trainable: &mut Vec<(String, ValueId)>,
                          stat_updates: &mut Vec<StatUpdate<F>>|
     -> Result<ValueId, ModelError> {
        let g = reg(tape, trains, format!("{prefix}.gamma"), &norm.gamma, trainable);
        let b = reg(tape, trains, format!("{prefix}.beta"), &norm.beta, trainable);
        if batch_stats {
            let (y, stats) = tape.norm_train(x, g, b)?;
            stat_updates.push(StatUpdate {
                site,
                mean: stats.mean,
                var: stats.var,
            });
            Ok(y)
        } else {
            Ok(tape.norm_eval(x, g, b, &norm.running_mean, &norm.running_var)?)
        }
    };

    // patch embedding
    let ew = reg(tape, pair_trains, "embed.weight".into(), &pair.embedding.weight, &mut trainable);
    let eb = reg(tape, pair_trains, "embed.bias".into(), &pair.embedding.bias, &mut trainable);
    let mut h = tape.patch_conv(input, ew, eb)?;
    h = tape.gelu(h)?;
    h = norm_layer(
        tape,
        h,
        &pair.embedding.norm,
        NormSite::Embedding,
        "embed.norm",
        pair_trains,
        embed_stats_batch,
        &mut trainable,
        &mut stat_updates,
    )?;

    for (i, block) in backbone.blocks.iter().enumerate() {
        let dw = reg(tape, backbone_trains, format!("block{i}.dw.weight"), &block.dw_weight, &mut trainable);
        let db = reg(tape, backbone_trains, format!("block{i}.dw.bias"), &block.dw_bias, &mut trainable);
        let mut t = tape.depthwise_conv(h, dw, db)?;
        t = tape.gelu(t)?;
        t = norm_layer(
            tape,
            t,
            &block.norm1,
            NormSite::BlockNorm1(i),
            &format!("block{i}.norm1"),
            backbone_trains,
            backbone_stats_batch,
            &mut trainable,
            &mut stat_updates,
        )?;
        h = tape.add(h, t)?;

        let pw = reg(tape, backbone_trains, format!("block{i}.pw.weight"), &block.pw_weight, &mut trainable);
        let pb = reg(tape, backbone_trains, format!("block{i}.pw.bias"), &block.pw_bias, &mut trainable);
        let mut u = tape.pointwise_conv(h, pw, pb)?;
        u = tape.gelu(u)?;
        h = norm_layer(
            tape,
            u,
            &block.norm2,
            NormSite::BlockNorm2(i),
            &format!("block{i}.norm2"),
            backbone_trains,
            backbone_stats_batch,
            &mut trainable,
            &mut stat_updates,
        )?;
    }

    let pooled = tape.global_avg_pool(h)?;
    let hw = reg(tape, pair_trains, "head.weight".into(), &pair.head.weight, &mut trainable);
    let hb = reg(tape, pair_trains, "head.bias".into(), &pair.head.bias, &mut trainable);
    let logits = tape.affine(pooled, hw, hb)?;

    Ok(ForwardPass {
        logits,
        trainable,
        stat_updates,
    })
}

/// Predicted class per row: the lowest index among the maxima.
pub fn argmax_rows<F: Scalar>(logits: &Tensor<F>) -> Vec<usize> {
    let (bs, c) = (logits.shape()[0], logits.shape()[1]);
    let ls = logits.as_slice();
    (0..bs)
        .map(|n| {
            let row = &ls[n * c..(n + 1) * c];
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn checksum_entries<F: Scalar>(hash: &mut u64, name: &str, t: &Tensor<F>) {
    let mut bytes = Vec::with_capacity(name.len() + t.numel() * 8);
    bytes.extend_from_slice(name.as_bytes());
    for v in t.as_slice() {
        bytes.extend_from_slice(&v.to_f64().to_bits().to_le_bytes());
    }
    *hash ^= fnv1a64(&bytes).rotate_left((name.len() % 63) as u32);
}

/// Order-independent digest of all backbone parameters and statistics.
/// Swapping pairs or fine-tuning with a frozen backbone must not change it.
pub fn backbone_checksum<F: Scalar>(model: &Model<F>) -> u64 {
    let mut h = 0u64;
    model.visit_params(&mut |g, name, t| {
        if g == ParamGroup::Backbone {
            checksum_entries(&mut h, name, t);
        }
    });
    model.visit_buffers(&mut |g, name, t| {
        if g == ParamGroup::Backbone {
            checksum_entries(&mut h, name, t);
        }
    });
    h
}

/// Digest of one pair's parameters and statistics.
pub fn pair_checksum<F: Scalar>(pair: &EmbeddingHeadPair<F>) -> u64 {
    let mut h = 0u64;
    checksum_entries(&mut h, "embed.weight", &pair.embedding.weight);
    checksum_entries(&mut h, "embed.bias", &pair.embedding.bias);
    checksum_entries(&mut h, "embed.norm.gamma", &pair.embedding.norm.gamma);
    checksum_entries(&mut h, "embed.norm.beta", &pair.embedding.norm.beta);
    checksum_entries(&mut h, "embed.norm.running_mean", &pair.embedding.norm.running_mean);
    checksum_entries(&mut h, "embed.norm.running_var", &pair.embedding.norm.running_var);
    checksum_entries(&mut h, "head.weight", &pair.head.weight);
    checksum_entries(&mut h, "head.bias", &pair.head.bias);
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::check::finite_diff_max_rel_err;
    use crate::transform::{BlockPermutation, SecretKey};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            depth: 2,
            patch_size: 4,
            kernel_size: 3,
            num_classes: 4,
            image_side: 16,
        }
    }

    fn random_batch(config: &ModelConfig, bs: usize, seed: u64) -> Tensor<f64> {
        let mut rng = stream(seed, "batch");
        let n = bs * 3 * config.image_side * config.image_side;
        Tensor::from_vec(
            &[bs, 3, config.image_side, config.image_side],
            (0..n).map(|_| rng.unit_f64()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk_default().validate().is_ok());
        let mut bad = ModelConfig::desk_default();
        bad.image_side = 30;
        assert!(bad.validate().is_err());
        bad = ModelConfig::desk_default();
        bad.depth = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = tiny_config();
        let a: Model<f32> = init_model(&cfg, 9).unwrap();
        let b: Model<f32> = init_model(&cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(backbone_checksum(&a), backbone_checksum(&b));
        let c: Model<f32> = init_model(&cfg, 10).unwrap();
        assert_ne!(backbone_checksum(&a), backbone_checksum(&c));
        // norm scales start at exactly one
        assert!(a
            .pair
            .embedding
            .norm
            .gamma
            .as_slice()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn forward_shape_and_zero_head() {
        let cfg = tiny_config();
        let mut model: Model<f64> = init_model(&cfg, 1).unwrap();
        let mut tape = GradTape::new();
        let x = tape.constant(random_batch(&cfg, 1, 2));
        let pass = model.forward(&mut tape, x, Phase::Eval).unwrap();
        assert_eq!(tape.value(pass.logits).shape(), &[1, cfg.num_classes]);

        // zero head weight: logits all equal to the head bias
        model.pair.head.weight = Tensor::zeros(&[cfg.num_classes, cfg.hidden_dim]);
        let mut tape = GradTape::new();
        let x = tape.constant(random_batch(&cfg, 2, 3));
        let pass = model.forward(&mut tape, x, Phase::Eval).unwrap();
        let logits = tape.value(pass.logits);
        for n in 0..2 {
            for k in 0..cfg.num_classes {
                let got = logits.as_slice()[n * cfg.num_classes + k];
                let want = model.pair.head.bias.as_slice()[k];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eval_mode_has_no_batch_coupling() {
        let cfg = tiny_config();
        let model: Model<f64> = init_model(&cfg, 4).unwrap();
        let batch = random_batch(&cfg, 3, 5);
        let img = cfg.image_side * cfg.image_side * 3;

        // permuted batch order -> identically permuted logits
        let order = [2usize, 0, 1];
        let mut permuted = Tensor::<f64>::zeros(batch.shape());
        for (dst, &src) in order.iter().enumerate() {
            permuted.as_mut_slice()[dst * img..(dst + 1) * img]
                .copy_from_slice(&batch.as_slice()[src * img..(src + 1) * img]);
        }

        let run = |b: &Tensor<f64>| {
            let mut tape = GradTape::new();
            let x = tape.constant(b.clone());
            let pass = model.forward(&mut tape, x, Phase::Eval).unwrap();
            tape.value(pass.logits).clone()
        };
        let base = run(&batch);
        let perm = run(&permuted);
        for (dst, &src) in order.iter().enumerate() {
            for k in 0..cfg.num_classes {
                assert_eq!(
                    perm.as_slice()[dst * cfg.num_classes + k],
                    base.as_slice()[src * cfg.num_classes + k]
                );
            }
        }
    }

    #[test]
    fn swap_pair_is_reversible_and_leaves_backbone_alone() {
        let cfg = tiny_config();
        let mut model: Model<f32> = init_model(&cfg, 6).unwrap();
        let other: Model<f32> = init_model(&cfg, 7).unwrap();
        let backbone_before = backbone_checksum(&model);
        let x32 = random_batch(&cfg, 1, 8).to_f32();

        let run = |m: &Model<f32>| {
            let mut tape = GradTape::new();
            let x = tape.constant(x32.clone());
            let pass = m.forward(&mut tape, x, Phase::Eval).unwrap();
            tape.value(pass.logits).clone()
        };

        let base = run(&model);
        let original = model.swap_pair(other.pair.clone()).unwrap();
        assert_eq!(backbone_checksum(&model), backbone_before);
        let swapped = run(&model);
        assert_ne!(base, swapped, "differently initialized pair gave identical logits");
        // identity swap: back to the original pair restores outputs bit-exactly
        model.swap_pair(original).unwrap();
        assert_eq!(run(&model), base);

        // dimension mismatch is rejected
        let mut bad_cfg = cfg.clone();
        bad_cfg.hidden_dim = 12;
        let bad: Model<f32> = init_model(&bad_cfg, 1).unwrap();
        assert!(matches!(
            model.swap_pair(bad.pair),
            Err(ModelError::PairMismatch(_))
        ));
    }

    #[test]
    fn finetune_phase_trains_only_the_pair() {
        let cfg = tiny_config();
        let model: Model<f64> = init_model(&cfg, 11).unwrap();
        let mut tape = GradTape::new();
        let x = tape.constant(random_batch(&cfg, 2, 12));
        let pass = model
            .forward(&mut tape, x, Phase::Finetune { reestimate_backbone_stats: false })
            .unwrap();
        let names: Vec<&str> = pass.trainable.iter().map(|(n, _)| n.as_str()).collect();
        assert!(names.iter().all(|n| n.starts_with("embed.") || n.starts_with("head.")));
        assert_eq!(names.len(), 6);
        // only the embedding norm re-estimates statistics
        assert_eq!(pass.stat_updates.len(), 1);
        assert!(matches!(pass.stat_updates[0].site, NormSite::Embedding));

        // gradients exist for every trainable parameter
        let loss = tape.softmax_cross_entropy(pass.logits, &[0, 1]).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (name, id) in &pass.trainable {
            assert!(grads.get(*id).is_some(), "no gradient for {name}");
        }
    }

    #[test]
    fn patch_alignment_shuffle_stays_inside_embedding_columns() {
        // with block size = patch size, zeroing one patch of x changes only
        // that patch's embedding column, shuffled or not
        let cfg = tiny_config();
        let model: Model<f64> = init_model(&cfg, 13).unwrap();
        let perm = BlockPermutation::derive(SecretKey(99), cfg.patch_size);
        let batch = random_batch(&cfg, 1, 14);

        let embed = |b: &Tensor<f64>| {
            let mut tape = GradTape::new();
            let x = tape.constant(b.clone());
            let sh = tape.permute_pixels(x, &perm).unwrap();
            let w = tape.constant(model.pair.embedding.weight.clone());
            let bias = tape.constant(model.pair.embedding.bias.clone());
            let e = tape.patch_conv(sh, w, bias).unwrap();
            tape.value(e).clone()
        };

        let base = embed(&batch);
        // zero out patch (1, 2)
        let mut poked = batch.clone();
        let side = cfg.image_side;
        for c in 0..3 {
            for dy in 0..cfg.patch_size {
                for dx in 0..cfg.patch_size {
                    let y = cfg.patch_size + dy;
                    let x = 2 * cfg.patch_size + dx;
                    poked.as_mut_slice()[(c * side + y) * side + x] = 0.0;
                }
            }
        }
        let poked_out = embed(&poked);
        let grid = cfg.grid();
        let mut changed_cols = Vec::new();
        for i in 0..grid {
            for j in 0..grid {
                let mut changed = false;
                for d in 0..cfg.hidden_dim {
                    let idx = (d * grid + i) * grid + j;
                    if (base.as_slice()[idx] - poked_out.as_slice()[idx]).abs() > 1e-12 {
                        changed = true;
                    }
                }
                if changed {
                    changed_cols.push((i, j));
                }
            }
        }
        assert_eq!(changed_cols, vec![(1, 2)]);
    }

    #[test]
    fn end_to_end_gradient_check_tiny_model() {
        // input gradients of the full model against central differences
        let cfg = tiny_config();
        let model: Model<f64> = init_model(&cfg, 15).unwrap();
        let batch = random_batch(&cfg, 2, 16);
        let labels = vec![1usize, 3];

        let mut tape = GradTape::new();
        let x = tape.leaf(batch.clone());
        let pass = model.forward(&mut tape, x, Phase::Eval).unwrap();
        let loss = tape.softmax_cross_entropy(pass.logits, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(x).unwrap().clone();

        let mut eval = |b: &Tensor<f64>| {
            let mut tape = GradTape::new();
            let x = tape.constant(b.clone());
            let pass = model.forward(&mut tape, x, Phase::Eval).unwrap();
            let loss = tape.softmax_cross_entropy(pass.logits, &labels).unwrap();
            tape.value(loss).item()
        };
        let err = finite_diff_max_rel_err(&mut eval, &batch, &analytic, 1e-4);
        assert!(err < 1e-4, "end-to-end input gradient error {err}");
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_index() {
        let logits = Tensor::<f32>::from_vec(&[2, 3], vec![1.0, 1.0, 0.5, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&logits), vec![0, 1]);
    }
}
