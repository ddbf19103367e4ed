//! Checkpoint container and config sidecar.
//!
//! Binary layout: magic bytes `KSNET1`, then for each named parameter:
//! name length (u32 LE), UTF-8 name, rank (u32 LE), dims (u32 LE each),
//! raw 32-bit little-endian floats. Running statistics are stored as
//! ordinary named entries. The config sidecar is a `key = value` text
//! file.

use std::io::{Read, Write};
use std::path::Path;

use crate::kv::KvFile;
use crate::tensor::Tensor;

use super::{
    Backbone, ClassifierHead, EmbeddingHeadPair, MixerBlock, Model, ModelConfig, ModelError,
    NormParams, ParamGroup,
};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"KSNET1";

pub fn write_checkpoint(path: &Path, entries: &[(String, &Tensor<f32>)]) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        let shape = tensor.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let err = |msg: String| ModelError::Checkpoint(format!("{}: {msg}", path.display()));

    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(err("bad magic, not a KSNET1 checkpoint".into()));
    }
    let mut pos = CHECKPOINT_MAGIC.len();
    let take_u32 = |pos: &mut usize| -> Result<u32, ModelError> {
        if *pos + 4 > bytes.len() {
            return Err(err(format!("truncated at byte {pos:?}")));
        }
        let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().expect("4 bytes"));
        *pos += 4;
        Ok(v)
    };

    let mut entries = Vec::new();
    while pos < bytes.len() {
        let name_len = take_u32(&mut pos)? as usize;
        if pos + name_len > bytes.len() {
            return Err(err("truncated name".into()));
        }
        let name = std::str::from_utf8(&bytes[pos..pos + name_len])
            .map_err(|_| err("name is not UTF-8".into()))?
            .to_string();
        pos += name_len;
        let rank = take_u32(&mut pos)? as usize;
        if rank == 0 || rank > 4 {
            return Err(err(format!("entry {name}: rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u32(&mut pos)? as usize);
        }
        let numel: usize = shape.iter().product();
        if pos + numel * 4 > bytes.len() {
            return Err(err(format!("entry {name}: truncated data")));
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            data.push(f32::from_le_bytes(
                bytes[pos + i * 4..pos + i * 4 + 4].try_into().expect("4 bytes"),
            ));
        }
        pos += numel * 4;
        entries.push((
            name,
            Tensor::from_vec(&shape, data).map_err(|e| err(e.to_string()))?,
        ));
    }
    Ok(entries)
}

struct EntryMap {
    entries: Vec<(String, Tensor<f32>)>,
    path: String,
}

impl EntryMap {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<f32>, ModelError> {
        let idx = self
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| {
                ModelError::Checkpoint(format!("{}: missing entry {name}", self.path))
            })?;
        let (_, t) = self.entries.swap_remove(idx);
        if t.shape() != shape {
            return Err(ModelError::Checkpoint(format!(
                "{}: entry {name} has shape {:?}, expected {shape:?}",
                self.path,
                t.shape()
            )));
        }
        Ok(t)
    }

    fn finish(self) -> Result<(), ModelError> {
        if let Some((name, _)) = self.entries.first() {
            return Err(ModelError::Checkpoint(format!(
                "{}: unexpected extra entry {name}",
                self.path
            )));
        }
        Ok(())
    }
}

fn norm_entries<'a>(prefix: &str, norm: &'a NormParams<f32>, out: &mut Vec<(String, &'a Tensor<f32>)>) {
    out.push((format!("{prefix}.gamma"), &norm.gamma));
    out.push((format!("{prefix}.beta"), &norm.beta));
    out.push((format!("{prefix}.running_mean"), &norm.running_mean));
    out.push((format!("{prefix}.running_var"), &norm.running_var));
}

fn take_norm(map: &mut EntryMap, prefix: &str, channels: usize) -> Result<NormParams<f32>, ModelError> {
    Ok(NormParams {
        gamma: map.take(&format!("{prefix}.gamma"), &[channels])?,
        beta: map.take(&format!("{prefix}.beta"), &[channels])?,
        running_mean: map.take(&format!("{prefix}.running_mean"), &[channels])?,
        running_var: map.take(&format!("{prefix}.running_var"), &[channels])?,
    })
}

pub fn save_backbone(path: &Path, backbone: &Backbone<f32>) -> Result<(), ModelError> {
    let mut entries = Vec::new();
    for (i, b) in backbone.blocks.iter().enumerate() {
        entries.push((format!("block{i}.dw.weight"), &b.dw_weight));
        entries.push((format!("block{i}.dw.bias"), &b.dw_bias));
        norm_entries(&format!("block{i}.norm1"), &b.norm1, &mut entries);
        entries.push((format!("block{i}.pw.weight"), &b.pw_weight));
        entries.push((format!("block{i}.pw.bias"), &b.pw_bias));
        norm_entries(&format!("block{i}.norm2"), &b.norm2, &mut entries);
    }
    write_checkpoint(path, &entries)
}

pub fn load_backbone(path: &Path, config: &ModelConfig) -> Result<Backbone<f32>, ModelError> {
    let mut map = EntryMap {
        entries: read_checkpoint(path)?,
        path: path.display().to_string(),
    };
    let (d, k) = (config.hidden_dim, config.kernel_size);
    let mut blocks = Vec::with_capacity(config.depth);
    for i in 0..config.depth {
        blocks.push(MixerBlock {
            dw_weight: map.take(&format!("block{i}.dw.weight"), &[d, k, k])?,
            dw_bias: map.take(&format!("block{i}.dw.bias"), &[d])?,
            norm1: take_norm(&mut map, &format!("block{i}.norm1"), d)?,
            pw_weight: map.take(&format!("block{i}.pw.weight"), &[d, d])?,
            pw_bias: map.take(&format!("block{i}.pw.bias"), &[d])?,
            norm2: take_norm(&mut map, &format!("block{i}.norm2"), d)?,
        });
    }
    map.finish()?;
    Ok(Backbone { blocks })
}

pub fn save_pair(path: &Path, pair: &EmbeddingHeadPair<f32>) -> Result<(), ModelError> {
    let key_id = Tensor::from_vec(&[1], vec![pair.key_id as f32]).expect("sized");
    let mut entries = vec![
        ("key_id".to_string(), &key_id),
        ("embed.weight".to_string(), &pair.embedding.weight),
        ("embed.bias".to_string(), &pair.embedding.bias),
    ];
    norm_entries("embed.norm", &pair.embedding.norm, &mut entries);
    entries.push(("head.weight".to_string(), &pair.head.weight));
    entries.push(("head.bias".to_string(), &pair.head.bias));
    write_checkpoint(path, &entries)
}

pub fn load_pair(path: &Path, config: &ModelConfig) -> Result<EmbeddingHeadPair<f32>, ModelError> {
    let mut map = EntryMap {
        entries: read_checkpoint(path)?,
        path: path.display().to_string(),
    };
    let (d, p, c) = (config.hidden_dim, config.patch_size, config.num_classes);
    let key_id = map.take("key_id", &[1])?.item() as usize;
    let pair = EmbeddingHeadPair {
        key_id,
        embedding: super::PatchEmbedding {
            weight: map.take("embed.weight", &[d, 3, p, p])?,
            bias: map.take("embed.bias", &[d])?,
            norm: take_norm(&mut map, "embed.norm", d)?,
        },
        head: ClassifierHead {
            weight: map.take("head.weight", &[c, d])?,
            bias: map.take("head.bias", &[c])?,
        },
    };
    map.finish()?;
    Ok(pair)
}

pub fn save_config(path: &Path, config: &ModelConfig) -> Result<(), ModelError> {
    let mut kv = KvFile::new();
    kv.push("hidden_dim", config.hidden_dim);
    kv.push("depth", config.depth);
    kv.push("patch_size", config.patch_size);
    kv.push("kernel_size", config.kernel_size);
    kv.push("num_classes", config.num_classes);
    kv.push("image_side", config.image_side);
    kv.write(path)?;
    Ok(())
}

pub fn load_config(path: &Path) -> Result<ModelConfig, ModelError> {
    let kv = KvFile::read(path).map_err(ModelError::Checkpoint)?;
    let get = |key| -> Result<usize, ModelError> {
        kv.parse_req(key).map_err(ModelError::Checkpoint)
    };
    let config = ModelConfig {
        hidden_dim: get("hidden_dim")?,
        depth: get("depth")?,
        patch_size: get("patch_size")?,
        kernel_size: get("kernel_size")?,
        num_classes: get("num_classes")?,
        image_side: get("image_side")?,
    };
    config.validate()?;
    Ok(config)
}

impl Model<f32> {
    /// Persist as `config`, `backbone.bin` and `pair_<key_id>.bin` in `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<(), ModelError> {
        std::fs::create_dir_all(dir)?;
        save_config(&dir.join("config"), &self.config)?;
        save_backbone(&dir.join("backbone.bin"), &self.backbone)?;
        save_pair(&dir.join(format!("pair_{}.bin", self.pair.key_id)), &self.pair)?;
        Ok(())
    }

    /// Load a model saved by [`Model::save_dir`]; `pair_id` selects which
    /// pair checkpoint to attach.
    pub fn load_dir(dir: &Path, pair_id: usize) -> Result<Self, ModelError> {
        let config = load_config(&dir.join("config"))?;
        let backbone = load_backbone(&dir.join("backbone.bin"), &config)?;
        let pair = load_pair(&dir.join(format!("pair_{pair_id}.bin")), &config)?;
        super::check_pair_dims(&config, &pair)?;
        Ok(Model {
            config,
            backbone,
            pair,
        })
    }
}

/// Collect (name, tensor) pairs of a whole model, params and buffers, for
/// tests that want a flat view.
pub fn model_entries(model: &Model<f32>) -> Vec<(String, Tensor<f32>, ParamGroup)> {
    let mut all = Vec::new();
    model.visit_params(&mut |g, name, t| all.push((name.to_string(), t.clone(), g)));
    model.visit_buffers(&mut |g, name, t| all.push((name.to_string(), t.clone(), g)));
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn tiny() -> ModelConfig {
        ModelConfig {
            hidden_dim: 6,
            depth: 2,
            patch_size: 2,
            kernel_size: 3,
            num_classes: 3,
            image_side: 8,
        }
    }

    #[test]
    fn model_roundtrips_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let model: Model<f32> = init_model(&tiny(), 42).unwrap();
        model.save_dir(dir.path()).unwrap();
        let loaded = Model::load_dir(dir.path(), 0).unwrap();
        assert_eq!(loaded, model);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTNET-something").unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(ModelError::Checkpoint(_))
        ));
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model: Model<f32> = init_model(&tiny(), 1).unwrap();
        let path = dir.path().join("pair.bin");
        save_pair(&path, &model.pair).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_pair(&path, &tiny()),
            Err(ModelError::Checkpoint(_))
        ));
    }

    #[test]
    fn wrong_shape_entry_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model: Model<f32> = init_model(&tiny(), 1).unwrap();
        let path = dir.path().join("pair.bin");
        save_pair(&path, &model.pair).unwrap();
        let mut other = tiny();
        other.hidden_dim = 8;
        assert!(matches!(
            load_pair(&path, &other),
            Err(ModelError::Checkpoint(_))
        ));
    }

    #[test]
    fn config_sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config");
        save_config(&path, &tiny()).unwrap();
        assert_eq!(load_config(&path).unwrap(), tiny());
    }
}
