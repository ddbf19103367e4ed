//! Defense pipeline: pre-train the plain backbone, fine-tune one
//! (embedding, head) pair per secret key on encrypted images with the
//! backbone frozen, and serve randomized key-pool inference.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use thiserror::Error;

use crate::data::{images_to_batch, DataError, Dataset};
use crate::kv::KvFile;
use crate::model::checkpoint;
use crate::model::{
    argmax_rows, backbone_checksum, forward_parts, init_model, Backbone, EmbeddingHeadPair, Model,
    ModelConfig, ModelError, Phase,
};
use crate::rng::{indexed_stream, stream, SplitMix64};
use crate::tensor::tape::{GradTape, ValueId};
use crate::tensor::{Tensor, TensorError};
use crate::transform::{
    read_key_file, shuffle_image, write_key_file, BlockPermutation, Image, SecretKey,
    TransformError,
};

pub const MANIFEST_FILE: &str = "defense.manifest";

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("duplicate key {0} in pool")]
    DuplicateKey(SecretKey),
    #[error("key pool is empty")]
    EmptyPool,
    #[error("key index {index} out of range 1..={n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("block size {block_size} does not match patch size {patch_size} (override to proceed)")]
    BlockMismatch { block_size: usize, patch_size: usize },
    #[error("dataset images are {got}px, model expects {want}px")]
    ImageSide { got: usize, want: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// SGD-with-momentum training settings. Momentum 0.9 is the normative
/// optimizer choice for both pre-training and fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
    /// Re-estimate backbone norm statistics during fine-tuning instead of
    /// keeping the pre-trained ones frozen.
    pub reestimate_backbone_stats: bool,
}

impl TrainConfig {
    pub fn desk_default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 10,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            reestimate_backbone_stats: false,
        }
    }

    /// Sanity bounds for configs coming from the CLI. Library entry
    /// points deliberately tolerate degenerate values (zero epochs, zero
    /// learning rate) because tests use them as fixed points.
    pub fn validate(&self) -> Result<(), DefenseError> {
        if self.learning_rate <= 0.0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(DefenseError::Manifest(format!(
                "learning_rate, epochs and batch_size must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

struct Sgd {
    lr: f32,
    momentum: f32,
    weight_decay: f32,
    velocity: HashMap<String, Tensor<f32>>,
}

impl Sgd {
    fn new(config: &TrainConfig) -> Self {
        Self {
            lr: config.learning_rate,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            velocity: HashMap::new(),
        }
    }

    fn step(&mut self, model: &mut Model<f32>, mut grads: HashMap<String, Tensor<f32>>) {
        model.visit_params_mut(&mut |_, name, param| {
            let Some(grad) = grads.remove(name) else { return };
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            let vs = v.as_mut_slice();
            let ps = param.as_mut_slice();
            for ((vi, pi), &gi) in vs.iter_mut().zip(ps.iter_mut()).zip(grad.as_slice()) {
                let g = gi + self.weight_decay * *pi;
                *vi = self.momentum * *vi + g;
                *pi -= self.lr * *vi;
            }
        });
        debug_assert!(grads.is_empty(), "gradients for unknown parameters: {:?}", grads.keys());
    }
}

pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

/// One pass of mini-batch SGD. `transform` shuffles every image before
/// normalization (fine-tuning on encrypted images); batch order comes
/// from a named substream of the config seed, so runs replay exactly.
fn train_epochs(
    model: &mut Model<f32>,
    data: &Dataset,
    phase: Phase,
    transform: Option<&BlockPermutation>,
    config: &TrainConfig,
    stream_label: &str,
) -> Result<TrainLog, DefenseError> {
    if data.is_empty() {
        return Err(DataError::EmptySelection("training on an empty dataset".into()).into());
    }
    let side = model.config.image_side;
    if data.images[0].height() != side || data.images[0].width() != side {
        return Err(DefenseError::ImageSide {
            got: data.images[0].height(),
            want: side,
        });
    }

    let mut sgd = Sgd::new(config);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut order_rng = stream(config.seed, &format!("{stream_label}/batch-order"));
    let mut log = TrainLog {
        epoch_losses: Vec::with_capacity(config.epochs),
    };

    for _ in 0..config.epochs {
        order_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = match transform {
                Some(perm) => {
                    let shuffled: Vec<Image> = chunk
                        .iter()
                        .map(|&i| shuffle_image(&data.images[i], perm))
                        .collect::<Result<_, _>>()?;
                    let refs: Vec<&Image> = shuffled.iter().collect();
                    images_to_batch(&refs)
                }
                None => {
                    let refs: Vec<&Image> = chunk.iter().map(|&i| &data.images[i]).collect();
                    images_to_batch(&refs)
                }
            };
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();

            let mut tape = GradTape::new();
            let x = tape.constant(batch);
            let pass = model.forward(&mut tape, x, phase)?;
            let loss = tape.softmax_cross_entropy(pass.logits, &labels)?;
            loss_sum += tape.value(loss).item() as f64;
            batches += 1;

            let grads = tape.backward(loss)?;
            let updates: HashMap<String, Tensor<f32>> = pass
                .trainable
                .iter()
                .map(|(name, id)| (name.clone(), grads.get_or_zeros(&tape, *id)))
                .collect();
            sgd.step(model, updates);
            model.apply_stat_updates(&pass.stat_updates);
        }
        log.epoch_losses.push(loss_sum / batches.max(1) as f64);
    }
    Ok(log)
}

pub struct PretrainOutcome {
    pub model: Model<f32>,
    pub log: TrainLog,
    /// Eval-mode accuracy on the training set after the last epoch.
    pub train_accuracy: f64,
}

/// Train the plain model on plain images; every parameter group trains.
pub fn pretrain_backbone(
    config: &ModelConfig,
    data: &Dataset,
    train: &TrainConfig,
) -> Result<PretrainOutcome, DefenseError> {
    if data.is_empty() {
        return Err(DataError::EmptySelection("pretraining on an empty dataset".into()).into());
    }
    let mut model = init_model::<f32>(config, train.seed)?;
    let log = train_epochs(&mut model, data, Phase::Pretrain, None, train, "pretrain")?;
    let train_accuracy = model_accuracy(&model, data, train.batch_size)?;
    Ok(PretrainOutcome {
        model,
        log,
        train_accuracy,
    })
}

/// Fine-tune a fresh copy of the pre-trained (embedding, head) pair on
/// images encrypted under `key`, with the backbone frozen. Returns the
/// pair stamped with `key_id`; the backbone is untouched.
pub fn finetune_pair(
    pretrained: &Model<f32>,
    key: SecretKey,
    key_id: usize,
    block_size: usize,
    data: &Dataset,
    train: &TrainConfig,
) -> Result<EmbeddingHeadPair<f32>, DefenseError> {
    let perm = BlockPermutation::derive(key, block_size);
    let mut work = pretrained.clone();
    work.pair.key_id = key_id;
    let before = backbone_checksum(&work);
    train_epochs(
        &mut work,
        data,
        Phase::Finetune {
            reestimate_backbone_stats: train.reestimate_backbone_stats,
        },
        Some(&perm),
        train,
        &format!("finetune/{key_id}/{}", key.seed()),
    )?;
    if !train.reestimate_backbone_stats {
        debug_assert_eq!(before, backbone_checksum(&work), "backbone changed during fine-tuning");
    }
    let _ = before;
    Ok(work.pair)
}

/// One (key, permutation, pair) triple of the pool.
#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub key: SecretKey,
    pub permutation: BlockPermutation,
    pub pair: EmbeddingHeadPair<f32>,
}

/// Backbone plus N keyed pairs and the inference-time key sampler.
pub struct DefendedClassifier {
    config: ModelConfig,
    block_size: usize,
    backbone: Backbone<f32>,
    pool: Vec<PoolEntry>,
    sampler_seed: u64,
    sampler: Mutex<SplitMix64>,
}

#[derive(Debug, Clone)]
pub struct DefenseBuildOptions {
    /// Defaults to the model's patch size; any other value needs
    /// `allow_block_mismatch`.
    pub block_size: Option<usize>,
    pub allow_block_mismatch: bool,
    pub sampler_seed: u64,
}

impl Default for DefenseBuildOptions {
    fn default() -> Self {
        Self {
            block_size: None,
            allow_block_mismatch: false,
            sampler_seed: 0x5EED,
        }
    }
}

/// Fine-tune one pair per key and assemble the defended classifier.
pub fn build_defense(
    pretrained: &Model<f32>,
    keys: &[SecretKey],
    data: &Dataset,
    train: &TrainConfig,
    options: &DefenseBuildOptions,
) -> Result<DefendedClassifier, DefenseError> {
    if keys.is_empty() {
        return Err(DefenseError::EmptyPool);
    }
    for (i, k) in keys.iter().enumerate() {
        if keys[..i].contains(k) {
            return Err(DefenseError::DuplicateKey(*k));
        }
    }
    let block_size = options.block_size.unwrap_or(pretrained.config.patch_size);
    if block_size != pretrained.config.patch_size && !options.allow_block_mismatch {
        return Err(DefenseError::BlockMismatch {
            block_size,
            patch_size: pretrained.config.patch_size,
        });
    }

    let mut pool = Vec::with_capacity(keys.len());
    for (i, &key) in keys.iter().enumerate() {
        let pair = finetune_pair(pretrained, key, i + 1, block_size, data, train)?;
        pool.push(PoolEntry {
            key,
            permutation: BlockPermutation::derive(key, block_size),
            pair,
        });
    }
    Ok(DefendedClassifier::assemble(
        pretrained.config.clone(),
        block_size,
        pretrained.backbone.clone(),
        pool,
        options.sampler_seed,
    ))
}

impl DefendedClassifier {
    pub fn assemble(
        config: ModelConfig,
        block_size: usize,
        backbone: Backbone<f32>,
        pool: Vec<PoolEntry>,
        sampler_seed: u64,
    ) -> Self {
        Self {
            config,
            block_size,
            backbone,
            pool,
            sampler_seed,
            sampler: Mutex::new(stream(sampler_seed, "key-sampler")),
        }
    }

    pub fn pool_size(&self) -> usize {
        self.pool.len()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn backbone(&self) -> &Backbone<f32> {
        &self.backbone
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.pool
    }

    pub fn sampler_seed(&self) -> u64 {
        self.sampler_seed
    }

    pub fn contains_key(&self, key: SecretKey) -> bool {
        self.pool.iter().any(|e| e.key == key)
    }

    pub fn backbone_checksum(&self) -> u64 {
        let probe = Model {
            config: self.config.clone(),
            backbone: self.backbone.clone(),
            pair: self.pool[0].pair.clone(),
        };
        backbone_checksum(&probe)
    }

    /// Rewind the sampler stream to its seed, for replaying draws.
    pub fn reset_sampler(&self) {
        *self.sampler.lock().expect("sampler") = stream(self.sampler_seed, "key-sampler");
    }

    /// Draw the next key index (1-based) from the classifier's stream.
    pub fn sample_key_index(&self) -> usize {
        let mut rng = self.sampler.lock().expect("sampler");
        rng.below(self.pool.len() as u64) as usize + 1
    }

    /// Randomized inference: sample a key uniformly, shuffle, classify.
    /// Returns the label and the 1-based index of the key used.
    pub fn defended_predict(&self, image: &Image) -> Result<(usize, usize), DefenseError> {
        let index = self.sample_key_index();
        let logits = self.predict_with_key(image, index)?;
        Ok((argmax_rows(&logits)[0], index))
    }

    /// Deterministic inference under the pool key `index` (1-based).
    pub fn predict_with_key(&self, image: &Image, index: usize) -> Result<Tensor<f32>, DefenseError> {
        let labels = self.predict_batch_with_key(&[image], index)?;
        Ok(labels)
    }

    /// Logits for a batch of images under one forced key.
    pub fn predict_batch_with_key(
        &self,
        images: &[&Image],
        index: usize,
    ) -> Result<Tensor<f32>, DefenseError> {
        let entry = self.entry(index)?;
        let shuffled: Vec<Image> = images
            .iter()
            .map(|img| shuffle_image(img, &entry.permutation))
            .collect::<Result<_, _>>()?;
        let refs: Vec<&Image> = shuffled.iter().collect();
        let mut tape = GradTape::new();
        let x = tape.constant(images_to_batch(&refs));
        let pass = forward_parts(&self.config, &self.backbone, &entry.pair, &mut tape, x, Phase::Eval)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Keyed forward on an existing tape over a normalized input value;
    /// used by attacks that differentiate through the shuffle.
    pub fn logits_on_tape(
        &self,
        tape: &mut GradTape<f32>,
        x: ValueId,
        index: usize,
    ) -> Result<ValueId, DefenseError> {
        let entry = self.entry(index)?;
        let shuffled = tape.permute_pixels(x, &entry.permutation)?;
        let pass = forward_parts(
            &self.config,
            &self.backbone,
            &entry.pair,
            tape,
            shuffled,
            Phase::Eval,
        )?;
        Ok(pass.logits)
    }

    /// Logits under a forced key for an already-normalized (B, 3, H, W)
    /// batch in [0, 1]; adversarial examples are evaluated in float space
    /// without quantizing through u8.
    pub fn logits_for_batch_tensor(
        &self,
        batch: &Tensor<f32>,
        index: usize,
    ) -> Result<Tensor<f32>, DefenseError> {
        let mut tape = GradTape::new();
        let x = tape.constant(batch.clone());
        let logits = self.logits_on_tape(&mut tape, x, index)?;
        Ok(tape.value(logits).clone())
    }

    pub fn entry(&self, index: usize) -> Result<&PoolEntry, DefenseError> {
        if index == 0 || index > self.pool.len() {
            return Err(DefenseError::IndexOutOfRange {
                index,
                n: self.pool.len(),
            });
        }
        Ok(&self.pool[index - 1])
    }

    /// Accuracy with a forced key over a dataset, batched.
    pub fn accuracy_with_key(&self, data: &Dataset, index: usize, batch: usize) -> Result<f64, DefenseError> {
        if data.is_empty() {
            return Err(DataError::EmptySelection("accuracy of an empty dataset".into()).into());
        }
        let mut correct = 0usize;
        for chunk in (0..data.len()).collect::<Vec<_>>().chunks(batch.max(1)) {
            let refs: Vec<&Image> = chunk.iter().map(|&i| &data.images[i]).collect();
            let logits = self.predict_batch_with_key(&refs, index)?;
            for (row, &i) in argmax_rows(&logits).iter().zip(chunk) {
                if *row == data.labels[i] {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Mean forced-key accuracy over the whole pool (the deterministic
    /// expectation of randomized inference).
    pub fn accuracy_expectation(&self, data: &Dataset, batch: usize) -> Result<f64, DefenseError> {
        let mut sum = 0.0;
        for index in 1..=self.pool.len() {
            sum += self.accuracy_with_key(data, index, batch)?;
        }
        Ok(sum / self.pool.len() as f64)
    }

    /// Single-draw randomized accuracy with one key sampled per image
    /// from a named substream of `seed` (scheduling-independent).
    pub fn accuracy_single_draw(&self, data: &Dataset, seed: u64, batch: usize) -> Result<f64, DefenseError> {
        if data.is_empty() {
            return Err(DataError::EmptySelection("accuracy of an empty dataset".into()).into());
        }
        let n = self.pool.len() as u64;
        let draws: Vec<usize> = (0..data.len())
            .map(|i| indexed_stream(seed, "single-draw", i as u64).below(n) as usize + 1)
            .collect();
        let mut correct = 0usize;
        for index in 1..=self.pool.len() {
            let rows: Vec<usize> = (0..data.len()).filter(|&i| draws[i] == index).collect();
            if rows.is_empty() {
                continue;
            }
            for chunk in rows.chunks(batch.max(1)) {
                let refs: Vec<&Image> = chunk.iter().map(|&i| &data.images[i]).collect();
                let logits = self.predict_batch_with_key(&refs, index)?;
                for (row, &i) in argmax_rows(&logits).iter().zip(chunk) {
                    if *row == data.labels[i] {
                        correct += 1;
                    }
                }
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Accuracy when images are transformed with an arbitrary key but
    /// classified with pool pair `pair_index`; `transform_key` need not be
    /// in the pool. This is the wrong-key probe.
    pub fn accuracy_pair_with_transform(
        &self,
        data: &Dataset,
        pair_index: usize,
        transform_key: SecretKey,
        batch: usize,
    ) -> Result<f64, DefenseError> {
        if data.is_empty() {
            return Err(DataError::EmptySelection("accuracy of an empty dataset".into()).into());
        }
        let entry = self.entry(pair_index)?;
        let perm = BlockPermutation::derive(transform_key, self.block_size);
        let mut correct = 0usize;
        for chunk in (0..data.len()).collect::<Vec<_>>().chunks(batch.max(1)) {
            let shuffled: Vec<Image> = chunk
                .iter()
                .map(|&i| shuffle_image(&data.images[i], &perm))
                .collect::<Result<_, _>>()?;
            let refs: Vec<&Image> = shuffled.iter().collect();
            let mut tape = GradTape::new();
            let x = tape.constant(images_to_batch(&refs));
            let pass = forward_parts(&self.config, &self.backbone, &entry.pair, &mut tape, x, Phase::Eval)?;
            for (row, &i) in argmax_rows(tape.value(pass.logits)).iter().zip(chunk) {
                if *row == data.labels[i] {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Persist as a manifest plus config, key file, backbone and pair
    /// checkpoints in `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<(), DefenseError> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save_config(&dir.join("config"), &self.config)?;
        let keys: Vec<SecretKey> = self.pool.iter().map(|e| e.key).collect();
        write_key_file(&dir.join("keys.txt"), &keys)?;
        checkpoint::save_backbone(&dir.join("backbone.bin"), &self.backbone)?;
        let mut kv = KvFile::new();
        kv.push("config", "config");
        kv.push("block_size", self.block_size);
        kv.push("n", self.pool.len());
        kv.push("key_file", "keys.txt");
        kv.push("backbone", "backbone.bin");
        for entry in &self.pool {
            let name = format!("pair_{}.bin", entry.pair.key_id);
            checkpoint::save_pair(&dir.join(&name), &entry.pair)?;
            kv.push("pair", &name);
        }
        kv.push("sampler_seed", self.sampler_seed);
        kv.write(&dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    /// Load a defense from its manifest (a `defense.manifest` path or the
    /// directory containing one).
    pub fn load(path: &Path) -> Result<Self, DefenseError> {
        let manifest_path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let dir = manifest_path
            .parent()
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."));
        let kv = KvFile::read(&manifest_path).map_err(DefenseError::Manifest)?;
        let req = |key: &str| -> Result<String, DefenseError> {
            kv.require(key).map(str::to_string).map_err(DefenseError::Manifest)
        };
        let config = checkpoint::load_config(&dir.join(req("config")?))?;
        let block_size: usize = kv.parse_req("block_size").map_err(DefenseError::Manifest)?;
        let n: usize = kv.parse_req("n").map_err(DefenseError::Manifest)?;
        let sampler_seed: u64 = kv.parse_req("sampler_seed").map_err(DefenseError::Manifest)?;
        let keys = read_key_file(&dir.join(req("key_file")?))?;
        if keys.len() != n {
            return Err(DefenseError::Manifest(format!(
                "manifest says n = {n} but the key file holds {} keys",
                keys.len()
            )));
        }
        let pair_files = kv.get_all("pair");
        if pair_files.len() != n {
            return Err(DefenseError::Manifest(format!(
                "manifest says n = {n} but lists {} pairs",
                pair_files.len()
            )));
        }
        let backbone = checkpoint::load_backbone(&dir.join(req("backbone")?), &config)?;
        let mut pool = Vec::with_capacity(n);
        for (i, (&key, file)) in keys.iter().zip(&pair_files).enumerate() {
            let pair = checkpoint::load_pair(&dir.join(file), &config)?;
            if pair.key_id != i + 1 {
                return Err(DefenseError::Manifest(format!(
                    "{file}: key_id {} does not match pool position {}",
                    pair.key_id,
                    i + 1
                )));
            }
            pool.push(PoolEntry {
                key,
                permutation: BlockPermutation::derive(key, block_size),
                pair,
            });
        }
        if pool.is_empty() {
            return Err(DefenseError::EmptyPool);
        }
        Ok(Self::assemble(config, block_size, backbone, pool, sampler_seed))
    }
}

/// Eval-mode accuracy of a plain model over a dataset, batched.
pub fn model_accuracy(model: &Model<f32>, data: &Dataset, batch: usize) -> Result<f64, DefenseError> {
    if data.is_empty() {
        return Err(DataError::EmptySelection("accuracy of an empty dataset".into()).into());
    }
    let mut correct = 0usize;
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(batch.max(1)) {
        let refs: Vec<&Image> = chunk.iter().map(|&i| &data.images[i]).collect();
        let mut tape = GradTape::new();
        let x = tape.constant(images_to_batch(&refs));
        let pass = model.forward(&mut tape, x, Phase::Eval)?;
        for (row, &i) in argmax_rows(tape.value(pass.logits)).iter().zip(chunk) {
            if *row == data.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Eval-mode prediction of a plain model for one image.
pub fn model_predict(model: &Model<f32>, image: &Image) -> Result<usize, DefenseError> {
    let mut tape = GradTape::new();
    let x = tape.constant(images_to_batch(&[image]));
    let pass = model.forward(&mut tape, x, Phase::Eval)?;
    Ok(argmax_rows(tape.value(pass.logits))[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthesize_dataset;

    fn micro_config() -> ModelConfig {
        ModelConfig {
            hidden_dim: 12,
            depth: 2,
            patch_size: 4,
            kernel_size: 3,
            num_classes: 10,
            image_side: 16,
        }
    }

    fn micro_train(epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.02,
            epochs,
            batch_size: 16,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 77,
            reestimate_backbone_stats: false,
        }
    }

    #[test]
    fn pretrain_beats_chance_and_is_deterministic() {
        let data = synthesize_dataset(600, 16, 5);
        let cfg = micro_config();
        let mut train = micro_train(1);
        train.learning_rate = 0.05;
        let out = pretrain_backbone(&cfg, &data, &train).unwrap();
        assert!(
            out.train_accuracy > 0.1,
            "one epoch should beat 10-class chance, got {}",
            out.train_accuracy
        );
        let again = pretrain_backbone(&cfg, &data, &train).unwrap();
        assert_eq!(out.model, again.model);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let data = synthesize_dataset(40, 16, 6);
        let cfg = micro_config();
        let init: Model<f32> = init_model(&cfg, 77).unwrap();
        let mut train = micro_train(1);
        train.learning_rate = 0.0;
        let out = pretrain_backbone(&cfg, &data, &train).unwrap();
        // parameters unchanged; only running statistics move
        let mut same = true;
        out.model.visit_params(&mut |_, name, t| {
            let mut orig = None;
            init.visit_params(&mut |_, n2, t2| {
                if n2 == name {
                    orig = Some(t2.clone());
                }
            });
            if orig.as_ref() != Some(t) {
                same = false;
            }
        });
        assert!(same, "zero learning rate moved parameters");
    }

    #[test]
    fn finetune_freezes_backbone_and_zero_epochs_is_identity() {
        let data = synthesize_dataset(60, 16, 7);
        let cfg = micro_config();
        let out = pretrain_backbone(&cfg, &data, &micro_train(1)).unwrap();
        let before = backbone_checksum(&out.model);

        let pair = finetune_pair(&out.model, SecretKey(11), 1, 4, &data, &micro_train(2)).unwrap();
        assert_eq!(backbone_checksum(&out.model), before);
        assert_eq!(pair.key_id, 1);
        assert_ne!(pair.embedding.weight, out.model.pair.embedding.weight);

        let frozen = finetune_pair(&out.model, SecretKey(11), 3, 4, &data, &micro_train(0)).unwrap();
        assert_eq!(frozen.embedding, out.model.pair.embedding);
        assert_eq!(frozen.head, out.model.pair.head);
        assert_eq!(frozen.key_id, 3);
    }

    #[test]
    fn build_defense_checks_keys_and_block_size() {
        let data = synthesize_dataset(30, 16, 8);
        let cfg = micro_config();
        let out = pretrain_backbone(&cfg, &data, &micro_train(1)).unwrap();

        assert!(matches!(
            build_defense(&out.model, &[], &data, &micro_train(0), &Default::default()),
            Err(DefenseError::EmptyPool)
        ));
        assert!(matches!(
            build_defense(
                &out.model,
                &[SecretKey(1), SecretKey(1)],
                &data,
                &micro_train(0),
                &Default::default()
            ),
            Err(DefenseError::DuplicateKey(SecretKey(1)))
        ));
        let mismatched = DefenseBuildOptions {
            block_size: Some(2),
            ..Default::default()
        };
        assert!(matches!(
            build_defense(&out.model, &[SecretKey(1)], &data, &micro_train(0), &mismatched),
            Err(DefenseError::BlockMismatch { block_size: 2, patch_size: 4 })
        ));
        let overridden = DefenseBuildOptions {
            block_size: Some(2),
            allow_block_mismatch: true,
            ..Default::default()
        };
        let d = build_defense(&out.model, &[SecretKey(1)], &data, &micro_train(0), &overridden).unwrap();
        assert_eq!(d.block_size(), 2);
    }

    #[test]
    fn pool_pairs_differ_and_backbone_survives() {
        let data = synthesize_dataset(60, 16, 9);
        let cfg = micro_config();
        let out = pretrain_backbone(&cfg, &data, &micro_train(1)).unwrap();
        let before = backbone_checksum(&out.model);
        let keys = [SecretKey(100), SecretKey(200), SecretKey(300)];
        let defense =
            build_defense(&out.model, &keys, &data, &micro_train(1), &Default::default()).unwrap();
        assert_eq!(defense.pool_size(), 3);
        assert_eq!(defense.backbone_checksum(), before);
        let sums: Vec<u64> = defense
            .entries()
            .iter()
            .map(|e| crate::model::pair_checksum(&e.pair))
            .collect();
        assert_ne!(sums[0], sums[1]);
        assert_ne!(sums[1], sums[2]);
        for (i, e) in defense.entries().iter().enumerate() {
            assert_eq!(e.pair.key_id, i + 1);
        }
    }

    #[test]
    fn single_key_pool_predicts_deterministically() {
        let data = synthesize_dataset(20, 16, 10);
        let cfg = micro_config();
        let out = pretrain_backbone(&cfg, &data, &micro_train(1)).unwrap();
        let defense =
            build_defense(&out.model, &[SecretKey(5)], &data, &micro_train(0), &Default::default())
                .unwrap();
        for img in &data.images[..5] {
            let (label, index) = defense.defended_predict(img).unwrap();
            assert_eq!(index, 1);
            let logits = defense.predict_with_key(img, 1).unwrap();
            assert_eq!(label, argmax_rows(&logits)[0]);
        }
        assert!(matches!(
            defense.predict_with_key(&data.images[0], 0),
            Err(DefenseError::IndexOutOfRange { index: 0, n: 1 })
        ));
        assert!(matches!(
            defense.predict_with_key(&data.images[0], 2),
            Err(DefenseError::IndexOutOfRange { index: 2, n: 1 })
        ));
    }

    #[test]
    fn sampler_is_reproducible_and_forced_draws_match() {
        let data = synthesize_dataset(30, 16, 11);
        let cfg = micro_config();
        let out = pretrain_backbone(&cfg, &data, &micro_train(1)).unwrap();
        let keys = [SecretKey(1), SecretKey(2), SecretKey(3)];
        let defense =
            build_defense(&out.model, &keys, &data, &micro_train(0), &Default::default()).unwrap();

        let draws: Vec<usize> = (0..20).map(|_| defense.sample_key_index()).collect();
        defense.reset_sampler();
        let replay: Vec<usize> = (0..20).map(|_| defense.sample_key_index()).collect();
        assert_eq!(draws, replay);
        assert!(draws.iter().all(|&i| (1..=3).contains(&i)));

        // a defended prediction equals the forced prediction of its draw
        defense.reset_sampler();
        for img in &data.images[..6] {
            let (label, index) = defense.defended_predict(img).unwrap();
            let forced = argmax_rows(&defense.predict_with_key(img, index).unwrap())[0];
            assert_eq!(label, forced);
        }
    }

    #[test]
    fn defense_roundtrips_through_manifest() {
        let data = synthesize_dataset(30, 16, 12);
        let cfg = micro_config();
        let out = pretrain_backbone(&cfg, &data, &micro_train(1)).unwrap();
        let keys = [SecretKey(21), SecretKey(22)];
        let defense =
            build_defense(&out.model, &keys, &data, &micro_train(1), &Default::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        defense.save_dir(dir.path()).unwrap();

        let loaded = DefendedClassifier::load(dir.path()).unwrap();
        assert_eq!(loaded.pool_size(), 2);
        assert_eq!(loaded.block_size(), defense.block_size());
        assert_eq!(loaded.sampler_seed(), defense.sampler_seed());
        assert_eq!(loaded.backbone_checksum(), defense.backbone_checksum());
        for (a, b) in loaded.entries().iter().zip(defense.entries()) {
            assert_eq!(a.key, b.key);
            assert_eq!(a.pair, b.pair);
            assert_eq!(a.permutation, b.permutation);
        }
        // logits agree bit-exactly after the roundtrip
        let img = &data.images[0];
        assert_eq!(
            loaded.predict_with_key(img, 1).unwrap(),
            defense.predict_with_key(img, 1).unwrap()
        );
    }
}
