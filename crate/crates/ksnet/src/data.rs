//! Dataset container, synthesis, and accuracy.
//!
//! On disk a dataset is a directory holding `images.bin` (magic `KSIMG1`,
//! then count/height/width/channels as u32 LE, then raw u8 pixels
//! channel-major per image) and `labels.txt` (one integer per line,
//! parallel to the images).

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::rng::{indexed_stream, SplitMix64};
use crate::tensor::Tensor;
use crate::transform::{encrypt_images, Image, SecretKey, TransformError, CHANNELS};

pub const CONTAINER_MAGIC: &[u8; 6] = b"KSIMG1";
pub const IMAGES_FILE: &str = "images.bin";
pub const LABELS_FILE: &str = "labels.txt";

/// Classes produced by [`synthesize_dataset`].
pub const SYNTH_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("format: {0}")]
    Format(String),
    #[error("labels: {0}")]
    Label(String),
    #[error("empty selection: {0}")]
    EmptySelection(String),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Labeled image set; images all share one geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn max_label(&self) -> Option<usize> {
        self.labels.iter().copied().max()
    }

    /// Shuffle every image with the single permutation derived from
    /// `(key, block_size)`; labels and order are unchanged. Atomic: the
    /// first offending image fails the whole call.
    pub fn encrypt(&self, key: SecretKey, block_size: usize) -> Result<Dataset, DataError> {
        Ok(Dataset {
            images: encrypt_images(&self.images, key, block_size)?,
            labels: self.labels.clone(),
        })
    }

    /// Subset by indices, cloning rows.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Normalize one image to a (1, 3, H, W) tensor in [0, 1].
pub fn image_to_batch(image: &Image) -> Tensor<f32> {
    let (h, w) = (image.height(), image.width());
    let data = image.as_slice().iter().map(|&p| f32::from(p) / 255.0).collect();
    Tensor::from_vec(&[1, CHANNELS, h, w], data).expect("sized")
}

/// Normalize a set of images to a (B, 3, H, W) tensor in [0, 1].
pub fn images_to_batch(images: &[&Image]) -> Tensor<f32> {
    let (h, w) = (images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
    for img in images {
        data.extend(img.as_slice().iter().map(|&p| f32::from(p) / 255.0));
    }
    Tensor::from_vec(&[images.len(), CHANNELS, h, w], data).expect("sized")
}

/// Quantize a normalized (1, 3, H, W) tensor back to a u8 image.
pub fn batch_to_image(batch: &Tensor<f32>) -> Image {
    let s = batch.shape();
    assert_eq!(s[0], 1, "batch_to_image expects a single image");
    let (h, w) = (s[2], s[3]);
    let data = batch
        .as_slice()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Image::new(h, w, data)
}

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<(), DataError> {
    if dataset.images.len() != dataset.labels.len() {
        return Err(DataError::Label(format!(
            "{} images but {} labels",
            dataset.images.len(),
            dataset.labels.len()
        )));
    }
    std::fs::create_dir_all(dir)?;
    let (h, w) = dataset
        .images
        .first()
        .map(|i| (i.height(), i.width()))
        .unwrap_or((0, 0));
    for (i, img) in dataset.images.iter().enumerate() {
        if img.height() != h || img.width() != w {
            return Err(DataError::Format(format!(
                "image {i} is {}x{}, first image is {h}x{w}",
                img.height(),
                img.width()
            )));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CONTAINER_MAGIC);
    buf.extend_from_slice(&(dataset.images.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(CHANNELS as u32).to_le_bytes());
    for img in &dataset.images {
        buf.extend_from_slice(img.as_slice());
    }
    std::fs::File::create(dir.join(IMAGES_FILE))?.write_all(&buf)?;

    let mut labels = String::new();
    for &l in &dataset.labels {
        labels.push_str(&l.to_string());
        labels.push('\n');
    }
    std::fs::write(dir.join(LABELS_FILE), labels)?;
    Ok(())
}

/// Load a bare KSIMG1 container (no labels).
pub fn load_images_file(img_path: &Path) -> Result<Vec<Image>, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(img_path)?.read_to_end(&mut bytes)?;
    let header = CONTAINER_MAGIC.len() + 16;
    if bytes.len() < header || &bytes[..CONTAINER_MAGIC.len()] != CONTAINER_MAGIC {
        return Err(DataError::Format(format!(
            "{}: missing or bad KSIMG1 header",
            img_path.display()
        )));
    }
    let u32_at = |off: usize| {
        u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize
    };
    let count = u32_at(6);
    let h = u32_at(10);
    let w = u32_at(14);
    let c = u32_at(18);
    if c != CHANNELS {
        return Err(DataError::Format(format!(
            "{}: {c} channels, expected {CHANNELS}",
            img_path.display()
        )));
    }
    let expected = header + count * c * h * w;
    if bytes.len() != expected {
        return Err(DataError::Format(format!(
            "{}: body is {} bytes, header implies {expected}",
            img_path.display(),
            bytes.len()
        )));
    }
    let stride = c * h * w;
    Ok((0..count)
        .map(|i| Image::new(h, w, bytes[header + i * stride..header + (i + 1) * stride].to_vec()))
        .collect())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let images = load_images_file(&dir.join(IMAGES_FILE))?;

    let labels_path = dir.join(LABELS_FILE);
    let text = std::fs::read_to_string(&labels_path)?;
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let l: usize = line.trim().parse().map_err(|_| {
            DataError::Label(format!(
                "{}: line {} is not a label: {line:?}",
                labels_path.display(),
                lineno + 1
            ))
        })?;
        labels.push(l);
    }
    if labels.len() != images.len() {
        return Err(DataError::Label(format!(
            "{} labels for {} images",
            labels.len(),
            images.len()
        )));
    }
    Ok(Dataset { images, labels })
}

/// Reject labels outside `[0, num_classes)`.
pub fn validate_labels(dataset: &Dataset, num_classes: usize) -> Result<(), DataError> {
    if let Some((i, &l)) = dataset
        .labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l >= num_classes)
    {
        return Err(DataError::Label(format!(
            "label {l} at row {i} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

/// Fraction of the dataset the predictor classifies correctly.
pub fn accuracy(
    dataset: &Dataset,
    mut predict: impl FnMut(&Image) -> usize,
) -> Result<f64, DataError> {
    if dataset.is_empty() {
        return Err(DataError::EmptySelection("accuracy of an empty dataset".into()));
    }
    let correct = dataset
        .images
        .iter()
        .zip(&dataset.labels)
        .filter(|(img, &l)| predict(img) == l)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

// The six stripe hues are the permutations of one value multiset, so all
// classes share identical per-block value histograms and total luminance;
// the only class signal is which channel each value lands in, plus where
// inside a block each value sits. Both are exactly what a wrong keyed
// permutation scrambles.
const HUE_BASE: [u8; 3] = [165, 120, 75];
const HUE_PERMS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [2, 0, 1],
    [1, 2, 0],
    [2, 1, 0],
];
/// Class -> unordered pair of stripe hues.
const CLASS_PAIRS: [(usize, usize); SYNTH_CLASSES] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 4),
    (4, 5),
    (0, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (0, 4),
];

const BACKGROUND_MEAN: f64 = 120.0;
const PIXEL_NOISE: f64 = 45.0;
const BRIGHTNESS_JITTER: f64 = 18.0;

fn hue_value(hue: usize, channel: usize) -> f64 {
    f64::from(HUE_BASE[HUE_PERMS[hue][channel]])
}

#[derive(Clone, Copy)]
enum ShapeKind {
    Rectangle,
    Ellipse,
    Diamond,
}

/// One image: a two-hue striped shape over textured gray. Geometry,
/// stripe phase and brightness are drawn independently of the class.
fn synthesize_image(side: usize, class: usize, rng: &mut SplitMix64) -> Image {
    let (hue_a, hue_b) = CLASS_PAIRS[class];
    let kind = match rng.below(3) {
        0 => ShapeKind::Rectangle,
        1 => ShapeKind::Ellipse,
        _ => ShapeKind::Diamond,
    };
    let s = side as f64;
    let rx = rng.range_f64(0.22 * s, 0.42 * s);
    let ry = rng.range_f64(0.22 * s, 0.42 * s);
    let cx = rng.range_f64(0.3 * s, 0.7 * s);
    let cy = rng.range_f64(0.3 * s, 0.7 * s);
    let phase = rng.below(2) as usize;
    let brightness = rng.range_f64(-BRIGHTNESS_JITTER, BRIGHTNESS_JITTER);

    let mut img = Image::zeros(side, side);
    for y in 0..side {
        for x in 0..side {
            let dx = (x as f64 - cx) / rx;
            let dy = (y as f64 - cy) / ry;
            let inside = match kind {
                ShapeKind::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
                ShapeKind::Ellipse => dx * dx + dy * dy <= 1.0,
                ShapeKind::Diamond => dx.abs() + dy.abs() <= 1.0,
            };
            if inside {
                let hue = if (y + phase) % 2 == 0 { hue_a } else { hue_b };
                for c in 0..CHANNELS {
                    let v = hue_value(hue, c)
                        + rng.range_f64(-PIXEL_NOISE, PIXEL_NOISE)
                        + brightness;
                    img.set(c, y, x, v.clamp(0.0, 255.0) as u8);
                }
            } else {
                // gray texture: all channels share the pixel's value, so
                // the background carries no channel information
                let v = BACKGROUND_MEAN + rng.range_f64(-PIXEL_NOISE, PIXEL_NOISE) + brightness;
                let q = v.clamp(0.0, 255.0) as u8;
                for c in 0..CHANNELS {
                    img.set(c, y, x, q);
                }
            }
        }
    }
    img
}

/// Deterministic 10-class synthetic set: striped colored shapes on
/// textured gray, balanced labels in round-robin order.
pub fn synthesize_dataset(count: usize, side: usize, seed: u64) -> Dataset {
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % SYNTH_CLASSES;
        let mut rng = indexed_stream(seed, "synthesize", i as u64);
        images.push(synthesize_image(side, class, &mut rng));
        labels.push(class);
    }
    Dataset { images, labels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn synthetic_dataset_is_deterministic_and_balanced() {
        let a = synthesize_dataset(40, 32, 7);
        let b = synthesize_dataset(40, 32, 7);
        assert_eq!(a, b);
        for class in 0..SYNTH_CLASSES {
            assert_eq!(a.labels.iter().filter(|&&l| l == class).count(), 4);
        }
        let c = synthesize_dataset(40, 32, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn hues_share_one_value_multiset() {
        for hue in 0..6 {
            let mut values: Vec<u8> = (0..3).map(|c| hue_value(hue, c) as u8).collect();
            values.sort_unstable();
            let mut base = HUE_BASE;
            base.sort_unstable();
            assert_eq!(values, base);
        }
        // all class pairs are distinct and use distinct hue sets
        for (i, a) in CLASS_PAIRS.iter().enumerate() {
            for b in &CLASS_PAIRS[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn container_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthesize_dataset(12, 16, 3);
        save_dataset(dir.path(), &ds).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, ds);
        // file-level determinism
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(dir2.path(), &ds).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join(IMAGES_FILE)).unwrap(),
            std::fs::read(dir2.path().join(IMAGES_FILE)).unwrap()
        );
    }

    #[test]
    fn truncated_body_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthesize_dataset(2, 8, 3);
        save_dataset(dir.path(), &ds).unwrap();
        let path = dir.path().join(IMAGES_FILE);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        match load_dataset(dir.path()) {
            Err(DataError::Format(msg)) => {
                assert!(msg.contains("bytes"), "message should name byte counts: {msg}")
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn label_mismatches_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthesize_dataset(4, 8, 3);
        save_dataset(dir.path(), &ds).unwrap();
        std::fs::write(dir.path().join(LABELS_FILE), "0\n1\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DataError::Label(_))));

        let ds = load_dataset_or_die(dir);
        assert!(validate_labels(&ds, 2).is_err());
        assert!(validate_labels(&ds, 10).is_ok());
    }

    fn load_dataset_or_die(dir: tempfile::TempDir) -> Dataset {
        std::fs::write(dir.path().join(LABELS_FILE), "0\n1\n2\n3\n").unwrap();
        load_dataset(dir.path()).unwrap()
    }

    #[test]
    fn accuracy_oracle_and_constant_predictor() {
        let ds = synthesize_dataset(20, 8, 1);
        let labels = ds.labels.clone();
        let mut i = 0;
        let oracle = accuracy(&ds, |_| {
            let l = labels[i];
            i += 1;
            l
        })
        .unwrap();
        assert_eq!(oracle, 1.0);
        let constant = accuracy(&ds, |_| 0).unwrap();
        assert!((constant - 0.1).abs() < 1e-9);
        let empty = Dataset {
            images: vec![],
            labels: vec![],
        };
        assert!(matches!(
            accuracy(&empty, |_| 0),
            Err(DataError::EmptySelection(_))
        ));
    }

    #[test]
    fn normalization_commutes_with_shuffling() {
        // moving values never changes them, so shuffle-then-normalize
        // equals normalize-then-shuffle
        use crate::transform::{shuffle_image, BlockPermutation};
        let mut rng = stream(5, "commute");
        let ds = synthesize_dataset(3, 16, 9);
        let perm = BlockPermutation::derive(SecretKey(rng.next_u64()), 4);
        for img in &ds.images {
            let a = image_to_batch(&shuffle_image(img, &perm).unwrap());
            let mut tape = crate::tensor::tape::GradTape::<f32>::new();
            let x = tape.constant(image_to_batch(img));
            let b = tape.permute_pixels(x, &perm).unwrap();
            assert_eq!(a, *tape.value(b));
        }
    }

    #[test]
    fn quantization_roundtrip() {
        let ds = synthesize_dataset(2, 8, 11);
        for img in &ds.images {
            assert_eq!(&batch_to_image(&image_to_batch(img)), img);
        }
    }
}
