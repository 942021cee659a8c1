//! Deterministic construction of incomplete-modality samples.
//!
//! Text loses whole words, images lose whole square patches. Which items are
//! dropped is decided by a generator seeded from `(global seed, sample id)`,
//! so the result for a sample never depends on which other samples are
//! processed or in what order.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{Image, Sample};
use crate::error::{Error, Result};

/// Word and patch missing rates, in integer percent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MissingRates {
    pub text_rate: u8,
    pub image_rate: u8,
}

impl MissingRates {
    pub const COMPLETE: MissingRates = MissingRates {
        text_rate: 0,
        image_rate: 0,
    };

    pub fn new(text_rate: u8, image_rate: u8) -> Result<Self> {
        let rates = Self {
            text_rate,
            image_rate,
        };
        rates.validate()?;
        Ok(rates)
    }

    pub fn validate(&self) -> Result<()> {
        if self.text_rate > 100 || self.image_rate > 100 {
            return Err(Error::invalid(format!(
                "missing rates must lie in [0,100], got text={} image={}",
                self.text_rate, self.image_rate
            )));
        }
        Ok(())
    }

    /// True when both rates sit on the 25-point lattice and their sum is at most 100.
    pub fn is_grid_scenario(&self) -> bool {
        self.text_rate.is_multiple_of(25)
            && self.image_rate.is_multiple_of(25)
            && u16::from(self.text_rate) + u16::from(self.image_rate) <= 100
    }

    pub fn total(&self) -> u16 {
        u16::from(self.text_rate) + u16::from(self.image_rate)
    }

    pub fn is_complete(&self) -> bool {
        self.text_rate == 0 && self.image_rate == 0
    }

    /// File/directory tag such as `t25_i75`.
    pub fn tag(&self) -> String {
        format!("t{}_i{}", self.text_rate, self.image_rate)
    }

    pub fn parse_tag(tag: &str) -> Option<Self> {
        let rest = tag.strip_prefix('t')?;
        let (t, i) = rest.split_once("_i")?;
        Self::new(t.parse().ok()?, i.parse().ok()?).ok()
    }
}

impl fmt::Display for MissingRates {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "text {}% / image {}%", self.text_rate, self.image_rate)
    }
}

/// Number of items left after dropping `rate` percent of `count`: `floor(count·(1−rate/100))`.
pub fn survivors(count: usize, rate: u8) -> usize {
    count * (100 - usize::from(rate.min(100))) / 100
}

/// Per-sample generator seed derived from the global seed, the stream name and the sample id.
pub fn sample_seed(global_seed: u64, stream: &str, sample_id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update((stream.len() as u64).to_le_bytes());
    hasher.update(stream.as_bytes());
    hasher.update(sample_id.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

fn choose_removed(count: usize, rate: u8, seed: u64, stream: &str, sample_id: &str) -> Vec<usize> {
    let removed = count - survivors(count, rate);
    if removed == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, stream, sample_id));
    let mut picked = index::sample(&mut rng, count, removed).into_vec();
    picked.sort_unstable();
    picked
}

/// Removes `rate` percent of the words. Returns the surviving words in their
/// original order together with the sorted removed positions.
pub fn mask_text(tokens: &[String], rate: u8, seed: u64, sample_id: &str) -> Result<(Vec<String>, Vec<usize>)> {
    if tokens.is_empty() {
        return Err(Error::invalid(format!("sample {sample_id}: cannot mask an empty token list")));
    }
    MissingRates::new(rate, 0)?;
    let removed = choose_removed(tokens.len(), rate, seed, "text", sample_id);
    Ok((drop_words(tokens, &removed), removed))
}

fn drop_words(tokens: &[String], removed: &[usize]) -> Vec<String> {
    let mut next = removed.iter().peekable();
    tokens
        .iter()
        .enumerate()
        .filter(|(i, _)| {
            if next.peek() == Some(&i) {
                next.next();
                false
            } else {
                true
            }
        })
        .map(|(_, t)| t.clone())
        .collect()
}

/// Number of patches per side, validating divisibility.
pub fn patch_grid_side(image: &Image, patch_size: usize) -> Result<usize> {
    if patch_size == 0 || !image.height.is_multiple_of(patch_size) || !image.width.is_multiple_of(patch_size) {
        return Err(Error::invalid(format!(
            "image {}x{} is not divisible into {patch_size}x{patch_size} patches",
            image.height, image.width
        )));
    }
    if image.height != image.width {
        return Err(Error::invalid(format!(
            "image must be square for an n x n patch grid, got {}x{}",
            image.height, image.width
        )));
    }
    Ok(image.height / patch_size)
}

/// Zero-fills `rate` percent of the image's patches. Patch `k` covers rows
/// `(k / n)·p ..` and columns `(k % n)·p ..` of an `n×n` grid.
pub fn mask_image_patches(
    image: &Image,
    patch_size: usize,
    rate: u8,
    seed: u64,
    sample_id: &str,
) -> Result<(Image, Vec<usize>)> {
    let side = patch_grid_side(image, patch_size)?;
    MissingRates::new(0, rate)?;
    let masked = choose_removed(side * side, rate, seed, "image", sample_id);
    let mut out = image.clone();
    zero_patches(&mut out, patch_size, &masked);
    Ok((out, masked))
}

fn zero_patches(image: &mut Image, patch_size: usize, patches: &[usize]) {
    let side = image.width / patch_size;
    let channels = image.channels;
    let row_stride = image.width * channels;
    for &k in patches {
        let (pr, pc) = (k / side, k % side);
        for y in pr * patch_size..(pr + 1) * patch_size {
            let start = y * row_stride + pc * patch_size * channels;
            image.data[start..start + patch_size * channels].fill(0);
        }
    }
}

/// The 15 evaluation scenarios: every `(r_t, r_v)` on the 25-point lattice with
/// `r_t + r_v ∈ {25, 50, 75, 100}`, ordered by descending total then ascending
/// text rate, followed by the complete pair `(0, 0)`.
pub fn scenario_grid() -> Vec<MissingRates> {
    let mut grid = Vec::with_capacity(15);
    for total in [100u8, 75, 50, 25] {
        for text in (0..=total).step_by(25) {
            grid.push(MissingRates {
                text_rate: text,
                image_rate: total - text,
            });
        }
    }
    grid.push(MissingRates::COMPLETE);
    grid
}

/// Which words and patches were removed from one sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub sample_id: String,
    pub text_rate: u8,
    pub image_rate: u8,
    pub seed: u64,
    pub removed_word_indices: Vec<usize>,
    pub masked_patch_indices: Vec<usize>,
}

impl MaskSpec {
    pub fn rates(&self) -> MissingRates {
        MissingRates {
            text_rate: self.text_rate,
            image_rate: self.image_rate,
        }
    }

    fn validate_indices(&self) -> std::result::Result<(), String> {
        self.rates().validate().map_err(|e| e.to_string())?;
        for (name, idx) in [
            ("removed_word_indices", &self.removed_word_indices),
            ("masked_patch_indices", &self.masked_patch_indices),
        ] {
            if let Some(w) = idx.windows(2).find(|w| w[0] >= w[1]) {
                return Err(if w[0] == w[1] {
                    format!("{name} contains duplicate index {}", w[0])
                } else {
                    format!("{name} is not sorted ({} before {})", w[0], w[1])
                });
            }
        }
        Ok(())
    }

    /// Checks the index sets against the sample's actual word and patch counts.
    pub fn check_against(&self, words: usize, patches: usize) -> Result<()> {
        self.validate_indices().map_err(Error::InvalidInput)?;
        let expect_words = words - survivors(words, self.text_rate);
        let expect_patches = patches - survivors(patches, self.image_rate);
        if self.removed_word_indices.len() != expect_words
            || self.removed_word_indices.last().is_some_and(|&i| i >= words)
        {
            return Err(Error::invalid(format!(
                "mask for {}: expected {expect_words} removed words out of {words}",
                self.sample_id
            )));
        }
        if self.masked_patch_indices.len() != expect_patches
            || self.masked_patch_indices.last().is_some_and(|&i| i >= patches)
        {
            return Err(Error::invalid(format!(
                "mask for {}: expected {expect_patches} masked patches out of {patches}",
                self.sample_id
            )));
        }
        Ok(())
    }
}

/// Draws the mask for one sample.
pub fn build_mask(sample: &Sample, rates: MissingRates, seed: u64, patch_size: usize) -> Result<MaskSpec> {
    rates.validate()?;
    if sample.text.is_empty() {
        return Err(Error::invalid(format!("sample {} has no words", sample.id)));
    }
    let side = patch_grid_side(&sample.image, patch_size)?;
    Ok(MaskSpec {
        sample_id: sample.id.clone(),
        text_rate: rates.text_rate,
        image_rate: rates.image_rate,
        seed,
        removed_word_indices: choose_removed(sample.text.len(), rates.text_rate, seed, "text", &sample.id),
        masked_patch_indices: choose_removed(side * side, rates.image_rate, seed, "image", &sample.id),
    })
}

pub fn build_masks(samples: &[Sample], rates: MissingRates, seed: u64, patch_size: usize) -> Result<Vec<MaskSpec>> {
    samples.iter().map(|s| build_mask(s, rates, seed, patch_size)).collect()
}

/// Produces the corrupted view of `sample` described by `spec`.
pub fn apply_mask(sample: &Sample, spec: &MaskSpec, patch_size: usize) -> Result<Sample> {
    if spec.sample_id != sample.id {
        return Err(Error::invalid(format!(
            "mask for {} applied to sample {}",
            spec.sample_id, sample.id
        )));
    }
    let side = patch_grid_side(&sample.image, patch_size)?;
    spec.check_against(sample.text.len(), side * side)?;
    let mut image = sample.image.clone();
    zero_patches(&mut image, patch_size, &spec.masked_patch_indices);
    Ok(Sample {
        id: sample.id.clone(),
        text: drop_words(&sample.text, &spec.removed_word_indices),
        image,
        label: sample.label,
    })
}

/// Pairs every sample with its mask (matched by id) and applies it.
pub fn apply_masks(samples: &[Sample], masks: &[MaskSpec], patch_size: usize) -> Result<Vec<Sample>> {
    let by_id: std::collections::HashMap<&str, &MaskSpec> =
        masks.iter().map(|m| (m.sample_id.as_str(), m)).collect();
    samples
        .iter()
        .map(|s| {
            let spec = by_id
                .get(s.id.as_str())
                .ok_or_else(|| Error::invalid(format!("no mask for sample {}", s.id)))?;
            apply_mask(s, spec, patch_size)
        })
        .collect()
}

/// Writes one JSON record per line.
pub fn save_masks(specs: &[MaskSpec], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for spec in specs {
        let line = serde_json::to_string(spec).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_masks(path: &Path) -> Result<Vec<MaskSpec>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut specs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let spec: MaskSpec = serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        spec.validate_indices().map_err(|m| Error::parse(path, i + 1, m))?;
        specs.push(spec);
    }
    Ok(specs)
}
