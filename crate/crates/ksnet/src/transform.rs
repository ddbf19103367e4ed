//! Keyed block-wise pixel shuffling.
//!
//! An image is divided into non-overlapping `M x M` blocks. Each block is
//! flattened to a vector of `3M^2` values (channel-major: all of channel 0
//! row by row, then channel 1, then channel 2), permuted by a single keyed
//! permutation `v` so that `out[k] = in[v[k]]`, and reshaped back in place.
//! The same permutation is used for every block of every image encrypted
//! under one key.
//!
//! The permutation is derived from the 64-bit key by seeding a splitmix64
//! generator and running a Fisher-Yates shuffle of the identity sequence,
//! iterating `i` from `3M^2 - 1` down to `1` and swapping index `i` with
//! index `next_u64() mod (i + 1)`. This construction is normative:
//! independent implementations must produce bit-identical permutations.

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::rng::SplitMix64;

/// Number of image channels. The transform is defined for RGB images only.
pub const CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("image dimensions {height}x{width} are not divisible by block size {block_size}")]
    Dimension {
        height: usize,
        width: usize,
        block_size: usize,
    },
    #[error("image {index} has dimensions {height}x{width}, not divisible by block size {block_size}")]
    DatasetDimension {
        index: usize,
        height: usize,
        width: usize,
        block_size: usize,
    },
    #[error("permutation of length {len} does not match 3*{block_size}^2")]
    Length { len: usize, block_size: usize },
    #[error("permutation entries are not a bijection (first problem at position {position})")]
    NotBijective { position: usize },
    #[error("key file: {0}")]
    KeyFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 64-bit secret seed. Equal seeds always derive equal permutations for a
/// given block size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SecretKey(pub u64);

impl SecretKey {
    pub fn seed(self) -> u64 {
        self.0
    }
}

impl std::fmt::Display for SecretKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A bijection on `{0, .., 3M^2 - 1}` together with its inverse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPermutation {
    block_size: usize,
    forward: Vec<u32>,
    inverse: Vec<u32>,
}

impl BlockPermutation {
    /// Derive the permutation for `key` at block size `block_size` using
    /// the normative splitmix64 + Fisher-Yates construction.
    pub fn derive(key: SecretKey, block_size: usize) -> Self {
        assert!(block_size >= 1, "block size must be at least 1");
        let n = CHANNELS * block_size * block_size;
        let mut forward: Vec<u32> = (0..n as u32).collect();
        let mut rng = SplitMix64::new(key.seed());
        for i in (1..n).rev() {
            let j = rng.below(i as u64 + 1) as usize;
            forward.swap(i, j);
        }
        Self::with_forward(block_size, forward)
    }

    pub fn identity(block_size: usize) -> Self {
        let n = CHANNELS * block_size * block_size;
        Self::with_forward(block_size, (0..n as u32).collect())
    }

    /// Build from explicit 0-based entries, validating the bijection.
    pub fn from_entries(block_size: usize, entries: Vec<u32>) -> Result<Self, TransformError> {
        let n = CHANNELS * block_size * block_size;
        if entries.len() != n {
            return Err(TransformError::Length {
                len: entries.len(),
                block_size,
            });
        }
        let mut seen = vec![false; n];
        for (pos, &e) in entries.iter().enumerate() {
            if (e as usize) >= n || seen[e as usize] {
                return Err(TransformError::NotBijective { position: pos });
            }
            seen[e as usize] = true;
        }
        Ok(Self::with_forward(block_size, entries))
    }

    fn with_forward(block_size: usize, forward: Vec<u32>) -> Self {
        let mut inverse = vec![0u32; forward.len()];
        for (k, &v) in forward.iter().enumerate() {
            inverse[v as usize] = k as u32;
        }
        Self {
            block_size,
            forward,
            inverse,
        }
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// The permutation entries: output slot `k` takes input slot `entries()[k]`.
    pub fn entries(&self) -> &[u32] {
        &self.forward
    }

    pub fn inverse_entries(&self) -> &[u32] {
        &self.inverse
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(k, &v)| k as u32 == v)
    }
}

/// RGB image with unsigned 8-bit pixels stored channel-major
/// (plane 0 fully, then plane 1, then plane 2; row-major inside a plane).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), CHANNELS * height * width, "pixel count mismatch");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0; CHANNELS * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: u8) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.data
    }

    /// 256-bin histogram over all channels; the shuffle must preserve it.
    pub fn histogram(&self) -> [u64; 256] {
        let mut h = [0u64; 256];
        for &p in &self.data {
            h[p as usize] += 1;
        }
        h
    }
}

fn check_dims(height: usize, width: usize, block_size: usize) -> Result<(), TransformError> {
    if block_size == 0 || height % block_size != 0 || width % block_size != 0 {
        return Err(TransformError::Dimension {
            height,
            width,
            block_size,
        });
    }
    Ok(())
}

/// Permute every block of a channel-major plane buffer. Works for any
/// copyable element type so the same routine serves u8 images and float
/// tensors. `entries` must come from a [`BlockPermutation`] of matching
/// block size; dims must already be validated.
pub(crate) fn permute_planes<T: Copy>(
    src: &[T],
    dst: &mut [T],
    height: usize,
    width: usize,
    block_size: usize,
    entries: &[u32],
) {
    let m = block_size;
    let m2 = m * m;
    let plane = height * width;
    debug_assert_eq!(entries.len(), CHANNELS * m2);
    debug_assert_eq!(src.len(), CHANNELS * plane);
    debug_assert_eq!(dst.len(), CHANNELS * plane);
    // absolute offset of flatten slot k within a block anchored at (y0, x0)
    // flatten: k = c*M^2 + r*M + col
    let mut slot_offset = vec![0usize; CHANNELS * m2];
    for c in 0..CHANNELS {
        for r in 0..m {
            for col in 0..m {
                slot_offset[c * m2 + r * m + col] = c * plane + r * width + col;
            }
        }
    }
    for by in 0..height / m {
        for bx in 0..width / m {
            let anchor = by * m * width + bx * m;
            for (k, &v) in entries.iter().enumerate() {
                dst[anchor + slot_offset[k]] = src[anchor + slot_offset[v as usize]];
            }
        }
    }
}

/// Shuffle an image block-wise: `out[k] = in[v[k]]` inside every block.
pub fn shuffle_image(image: &Image, perm: &BlockPermutation) -> Result<Image, TransformError> {
    check_dims(image.height, image.width, perm.block_size)?;
    let mut out = vec![0u8; image.data.len()];
    permute_planes(
        &image.data,
        &mut out,
        image.height,
        image.width,
        perm.block_size,
        perm.entries(),
    );
    Ok(Image::new(image.height, image.width, out))
}

/// Inverse of [`shuffle_image`]: `unshuffle(shuffle(x, p), p) == x` bit-exact.
pub fn unshuffle_image(image: &Image, perm: &BlockPermutation) -> Result<Image, TransformError> {
    check_dims(image.height, image.width, perm.block_size)?;
    let mut out = vec![0u8; image.data.len()];
    permute_planes(
        &image.data,
        &mut out,
        image.height,
        image.width,
        perm.block_size,
        perm.inverse_entries(),
    );
    Ok(Image::new(image.height, image.width, out))
}

/// Encrypt a set of images under one key: every image is shuffled with the
/// single permutation derived from `(key, block_size)`. Fails on the first
/// offending image without producing partial output.
pub fn encrypt_images(
    images: &[Image],
    key: SecretKey,
    block_size: usize,
) -> Result<Vec<Image>, TransformError> {
    for (index, img) in images.iter().enumerate() {
        if check_dims(img.height, img.width, block_size).is_err() {
            return Err(TransformError::DatasetDimension {
                index,
                height: img.height,
                width: img.width,
                block_size,
            });
        }
    }
    let perm = BlockPermutation::derive(key, block_size);
    Ok(images
        .par_iter()
        .map(|img| shuffle_image(img, &perm).expect("dims validated"))
        .collect())
}

/// Read a key file: one decimal unsigned 64-bit integer per line, line `i`
/// holding key `K_i`. Blank lines are rejected so indices stay unambiguous.
pub fn read_key_file(path: &Path) -> Result<Vec<SecretKey>, TransformError> {
    let text = std::fs::read_to_string(path)?;
    let mut keys = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        let seed: u64 = trimmed.parse().map_err(|_| {
            TransformError::KeyFile(format!(
                "{}: line {} is not an unsigned 64-bit integer: {:?}",
                path.display(),
                lineno + 1,
                line
            ))
        })?;
        keys.push(SecretKey(seed));
    }
    if keys.is_empty() {
        return Err(TransformError::KeyFile(format!(
            "{}: no keys found",
            path.display()
        )));
    }
    Ok(keys)
}

pub fn write_key_file(path: &Path, keys: &[SecretKey]) -> Result<(), TransformError> {
    let mut text = String::new();
    for k in keys {
        text.push_str(&k.seed().to_string());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn random_image(rng: &mut SplitMix64, h: usize, w: usize) -> Image {
        let data = (0..CHANNELS * h * w)
            .map(|_| (rng.next_u64() & 0xFF) as u8)
            .collect();
        Image::new(h, w, data)
    }

    #[test]
    fn normative_vector_seed_42_block_2() {
        // Frozen before the implementation existed, by tracing splitmix64
        // and the descending Fisher-Yates swaps by hand.
        let perm = BlockPermutation::derive(SecretKey(42), 2);
        assert_eq!(perm.entries(), &[9, 6, 7, 10, 3, 11, 4, 2, 0, 8, 5, 1]);
    }

    #[test]
    fn normative_vectors_more_seeds() {
        assert_eq!(
            BlockPermutation::derive(SecretKey(42), 1).entries(),
            &[0, 2, 1]
        );
        assert_eq!(
            BlockPermutation::derive(SecretKey(7), 2).entries(),
            &[10, 11, 5, 1, 7, 4, 8, 2, 9, 6, 0, 3]
        );
        assert_eq!(
            BlockPermutation::derive(SecretKey(0), 1).entries(),
            &[2, 0, 1]
        );
    }

    #[test]
    fn derived_permutation_is_bijective_for_many_seeds() {
        let mut rng = stream(0xB10C, "bijectivity");
        for m in [1usize, 2, 4, 7] {
            for _ in 0..100 {
                let key = SecretKey(rng.next_u64());
                let perm = BlockPermutation::derive(key, m);
                assert_eq!(perm.len(), 3 * m * m);
                let mut sorted: Vec<u32> = perm.entries().to_vec();
                sorted.sort_unstable();
                let identity: Vec<u32> = (0..(3 * m * m) as u32).collect();
                assert_eq!(sorted, identity);
            }
        }
    }

    #[test]
    fn block_1_permutation_is_one_of_six() {
        // 3M^2 = 3 for M = 1; any seed must yield one of the 6 bijections.
        for seed in 0..20 {
            let p = BlockPermutation::derive(SecretKey(seed), 1);
            let mut s = p.entries().to_vec();
            s.sort_unstable();
            assert_eq!(s, vec![0, 1, 2]);
        }
    }

    #[test]
    fn identity_permutation_is_noop() {
        let mut rng = stream(1, "identity");
        let img = random_image(&mut rng, 8, 8);
        let out = shuffle_image(&img, &BlockPermutation::identity(4)).unwrap();
        assert_eq!(out, img);
        let back = unshuffle_image(&img, &BlockPermutation::identity(4)).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn single_block_reversal_reads_out_in_reverse_flatten_order() {
        // 2x2 image, one block, entries reversed: out[k] = in[11 - k].
        // Flatten order is channel-major, so in[0] = (c0,r0,c0) .. in[11] = (c2,r1,c1).
        let data: Vec<u8> = (0..12).collect();
        let img = Image::new(2, 2, data);
        let rev = BlockPermutation::from_entries(2, (0..12u32).rev().collect()).unwrap();
        let out = shuffle_image(&img, &rev).unwrap();
        let expected: Vec<u8> = (0..12u8).rev().collect();
        assert_eq!(out.as_slice(), &expected[..]);
        let back = unshuffle_image(&out, &rev).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn two_block_images_permute_blocks_independently() {
        // 2x4 image with M=2: two blocks side by side; each block must be
        // permuted with the same entries, never mixing across blocks.
        let mut img = Image::zeros(2, 4);
        for c in 0..CHANNELS {
            for y in 0..2 {
                for x in 0..4 {
                    let v = if x < 2 { 10 } else { 200 };
                    img.set(c, y, x, v + (c * 2 + y) as u8);
                }
            }
        }
        let perm = BlockPermutation::derive(SecretKey(99), 2);
        let out = shuffle_image(&img, &perm).unwrap();
        for c in 0..CHANNELS {
            for y in 0..2 {
                for x in 0..4 {
                    let v = out.get(c, y, x);
                    if x < 2 {
                        assert!(v < 20, "left block leaked right-block pixels");
                    } else {
                        assert!(v >= 200, "right block leaked left-block pixels");
                    }
                }
            }
        }
    }

    #[test]
    fn roundtrip_and_histogram_on_random_images() {
        let mut rng = stream(2, "roundtrip");
        for m in [2usize, 4, 7] {
            for _ in 0..30 {
                let img = random_image(&mut rng, 2 * m, 3 * m);
                let perm = BlockPermutation::derive(SecretKey(rng.next_u64()), m);
                let enc = shuffle_image(&img, &perm).unwrap();
                assert_eq!(enc.histogram(), img.histogram());
                let dec = unshuffle_image(&enc, &perm).unwrap();
                assert_eq!(dec, img);
            }
        }
    }

    #[test]
    fn dimension_error_on_indivisible_images() {
        let img = Image::zeros(6, 6);
        let perm = BlockPermutation::derive(SecretKey(1), 4);
        match shuffle_image(&img, &perm) {
            Err(TransformError::Dimension {
                height: 6,
                width: 6,
                block_size: 4,
            }) => {}
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn key_sensitivity_distinct_seeds_distinct_permutations() {
        let mut rng = stream(3, "sensitivity");
        let mut collisions = 0;
        for _ in 0..1000 {
            let a = SecretKey(rng.next_u64());
            let b = SecretKey(rng.next_u64());
            if a == b {
                continue;
            }
            let pa = BlockPermutation::derive(a, 4);
            let pb = BlockPermutation::derive(b, 4);
            if pa.entries() == pb.entries() {
                collisions += 1;
            }
        }
        assert!(collisions <= 1, "too many permutation collisions: {collisions}");
    }

    #[test]
    fn encrypt_images_is_pointwise_and_atomic() {
        let mut rng = stream(4, "dataset");
        let images: Vec<Image> = (0..5).map(|_| random_image(&mut rng, 8, 8)).collect();
        let key = SecretKey(77);
        let enc = encrypt_images(&images, key, 4).unwrap();
        let perm = BlockPermutation::derive(key, 4);
        for (e, x) in enc.iter().zip(&images) {
            assert_eq!(e, &shuffle_image(x, &perm).unwrap());
        }

        let empty: Vec<Image> = Vec::new();
        assert!(encrypt_images(&empty, key, 4).unwrap().is_empty());

        let mut bad = images.clone();
        bad.insert(2, random_image(&mut rng, 6, 8));
        match encrypt_images(&bad, key, 4) {
            Err(TransformError::DatasetDimension { index: 2, .. }) => {}
            other => panic!("expected dataset dimension error, got {other:?}"),
        }
    }

    #[test]
    fn two_keys_differ_on_every_image() {
        let mut rng = stream(5, "two-keys");
        let images: Vec<Image> = (0..4).map(|_| random_image(&mut rng, 8, 8)).collect();
        for _ in 0..10 {
            let a = SecretKey(rng.next_u64());
            let b = SecretKey(rng.next_u64());
            if a == b {
                continue;
            }
            let ea = encrypt_images(&images, a, 4).unwrap();
            let eb = encrypt_images(&images, b, 4).unwrap();
            for (x, y) in ea.iter().zip(&eb) {
                assert_ne!(x, y);
            }
        }
    }

    #[test]
    fn key_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("keys.txt");
        let keys = vec![SecretKey(0), SecretKey(u64::MAX), SecretKey(42)];
        write_key_file(&path, &keys).unwrap();
        assert_eq!(read_key_file(&path).unwrap(), keys);

        std::fs::write(&path, "12\nnot-a-key\n").unwrap();
        assert!(matches!(
            read_key_file(&path),
            Err(TransformError::KeyFile(_))
        ));
    }
}
