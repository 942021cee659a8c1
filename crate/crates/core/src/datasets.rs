//! Image-text samples: manifest I/O, integrity checks and the synthetic
//! generator used for desk-scale experiments.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use image::imageops::FilterType;
use image::{ImageFormat, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REAL: u8 = 0;
pub const FAKE: u8 = 1;

/// Channels-last 8-bit pixel grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "pixel buffer of {} bytes does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0; height * width * channels],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    fn from_rgb(img: RgbImage) -> Self {
        let (w, h) = img.dimensions();
        Self {
            height: h as usize,
            width: w as usize,
            channels: 3,
            data: img.into_raw(),
        }
    }

    fn to_rgb(&self) -> Result<RgbImage> {
        if self.channels != 3 {
            return Err(Error::invalid("only RGB images can be encoded"));
        }
        RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .ok_or_else(|| Error::invalid("pixel buffer size mismatch"))
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb()?
            .write_to(&mut buf, ImageFormat::Png)
            .map_err(|e| Error::invalid(e.to_string()))?;
        Ok(buf.into_inner())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(Self::from_rgb(img.to_rgb8()))
    }

    /// Resizes to `side×side` unless already that size.
    pub fn resized_square(self, side: usize) -> Result<Self> {
        if self.height == side && self.width == side {
            return Ok(self);
        }
        let rgb = self.to_rgb()?;
        let out = image::imageops::resize(&rgb, side as u32, side as u32, FilterType::Triangle);
        Ok(Self::from_rgb(out))
    }
}

/// One news item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub text: Vec<String>,
    pub image: Image,
    /// 0 = real, 1 = fake.
    pub label: u8,
}

/// Whitespace tokenisation used for manifests.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    text: String,
    image: String,
    label: i64,
}

const INLINE_PREFIX: &str = "data:image/png;base64,";

/// Reads a line-delimited manifest of `{id, text, image, label}` records.
/// `image` is either a path relative to the manifest or an inline
/// `data:image/png;base64,` URI. Images are resized to `image_side`.
pub fn load_manifest(path: &Path, image_side: usize) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        let at = |msg: String| Error::parse(path, lineno, format!("record {}: {msg}", rec.id));
        if !seen.insert(rec.id.clone()) {
            return Err(at("duplicate id".into()));
        }
        let label = match rec.label {
            0 => REAL,
            1 => FAKE,
            other => return Err(at(format!("label {other} is not 0 or 1"))),
        };
        let text = tokenize(&rec.text);
        if text.is_empty() {
            return Err(at("empty text".into()));
        }
        let image = load_image_field(&rec.image, &base).map_err(|e| at(e.to_string()))?;
        let image = image.resized_square(image_side).map_err(|e| at(e.to_string()))?;
        samples.push(Sample {
            id: rec.id,
            text,
            image,
            label,
        });
    }
    Ok(samples)
}

fn load_image_field(field: &str, base: &Path) -> Result<Image> {
    if let Some(b64) = field.strip_prefix(INLINE_PREFIX) {
        let bytes = BASE64.decode(b64).map_err(|e| Error::invalid(format!("bad base64 image: {e}")))?;
        return Image::decode(&bytes);
    }
    let p: PathBuf = base.join(field);
    let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
    Image::decode(&bytes)
}

/// Writes samples with inline PNG images.
pub fn write_manifest(samples: &[Sample], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in samples {
        let rec = ManifestRecord {
            id: s.id.clone(),
            text: s.text.join(" "),
            image: format!("{INLINE_PREFIX}{}", BASE64.encode(s.image.to_png_bytes()?)),
            label: i64::from(s.label),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ManifestSummary {
    pub samples: usize,
    pub real: usize,
    pub fake: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub image_side: usize,
}

pub fn summarize(samples: &[Sample]) -> ManifestSummary {
    let fake = samples.iter().filter(|s| s.label == FAKE).count();
    ManifestSummary {
        samples: samples.len(),
        real: samples.len() - fake,
        fake,
        min_words: samples.iter().map(|s| s.text.len()).min().unwrap_or(0),
        max_words: samples.iter().map(|s| s.text.len()).max().unwrap_or(0),
        image_side: samples.first().map(|s| s.image.height).unwrap_or(0),
    }
}

/// Seeded split into `(train, test)`; the test part takes `round(n·test_fraction)` samples.
pub fn split(samples: &[Sample], test_fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((samples.len() as f64) * test_fraction).round() as usize;
    let (test_idx, train_idx) = order.split_at(n_test);
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| samples[i].clone()).collect::<Vec<_>>()
    };
    (pick(train_idx), pick(test_idx))
}

/// Knobs of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    pub seed: u64,
    /// In `[0,1]`: how densely each modality carries class cues.
    pub separation: f64,
    /// In `[0,1]`: each cue comes from the wrong class with probability `noise/2`.
    pub noise: f64,
    pub image_side: usize,
    pub patch_size: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            seed: 7,
            separation: 0.8,
            noise: 0.4,
            image_side: 32,
            patch_size: 8,
        }
    }
}

pub const KEYWORDS_PER_CLASS: usize = 24;
pub const FILLER_WORDS: usize = 300;

pub fn keyword(class: u8, i: usize) -> String {
    if class == REAL {
        format!("verified{i}")
    } else {
        format!("rumor{i}")
    }
}

/// Class palette for cue patches.
pub const CUE_COLORS: [[u8; 3]; 2] = [[40, 170, 150], [200, 60, 150]];

fn cue_probability(separation: f64) -> f64 {
    0.15 + 0.35 * separation.clamp(0.0, 1.0)
}

/// `generate_synthetic_with` with a 32×32 image and 8×8 patches.
pub fn generate_synthetic(n: usize, seed: u64, separation: f64, noise: f64) -> Result<Vec<Sample>> {
    generate_synthetic_with(&SyntheticConfig {
        n,
        seed,
        separation,
        noise,
        ..SyntheticConfig::default()
    })
}

/// Balanced binary dataset. Text is 8–20 words mixing filler words with
/// class keywords; images are grids of background patches and class-coloured
/// striped cue patches. Every sample carries at least one cue per modality.
pub fn generate_synthetic_with(cfg: &SyntheticConfig) -> Result<Vec<Sample>> {
    if cfg.n < 4 || !cfg.n.is_multiple_of(2) {
        return Err(Error::invalid(format!("synthetic n must be even and >= 4, got {}", cfg.n)));
    }
    if cfg.patch_size == 0 || !cfg.image_side.is_multiple_of(cfg.patch_size) {
        return Err(Error::invalid("image side must be divisible by the patch size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p_cue = cue_probability(cfg.separation);
    let p_flip = cfg.noise.clamp(0.0, 1.0) / 2.0;
    let mut labels: Vec<u8> = (0..cfg.n).map(|i| (i % 2) as u8).collect();
    labels.shuffle(&mut rng);

    let samples = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let cue_class = |rng: &mut ChaCha8Rng| if rng.random_bool(p_flip) { 1 - label } else { label };

            let len = rng.random_range(8..=20);
            let forced = rng.random_range(0..len);
            let text = (0..len)
                .map(|pos| {
                    if pos == forced || rng.random_bool(p_cue) {
                        let c = cue_class(&mut rng);
                        keyword(c, rng.random_range(0..KEYWORDS_PER_CLASS))
                    } else {
                        format!("w{}", rng.random_range(0..FILLER_WORDS))
                    }
                })
                .collect();

            let side = cfg.image_side / cfg.patch_size;
            let patches = side * side;
            let forced = rng.random_range(0..patches);
            let mut image = Image::zeros(cfg.image_side, cfg.image_side, 3);
            let jitter = (cfg.noise.clamp(0.0, 1.0) * 40.0) as i32;
            for k in 0..patches {
                let cue = if k == forced || rng.random_bool(p_cue) {
                    Some(cue_class(&mut rng))
                } else {
                    None
                };
                let base: [i32; 3] = match cue {
                    Some(c) => CUE_COLORS[c as usize].map(i32::from),
                    None => {
                        let g = rng.random_range(70..190);
                        [g + rng.random_range(-15..=15), g, g + rng.random_range(-15..=15)]
                    }
                };
                let (pr, pc) = (k / side, k % side);
                for dy in 0..cfg.patch_size {
                    for dx in 0..cfg.patch_size {
                        // cue stripes: horizontal for class 0, vertical for class 1
                        let stripe = match cue {
                            Some(0) => (dy / 2) % 2 == 0,
                            Some(_) => (dx / 2) % 2 == 0,
                            None => false,
                        };
                        let shade = if stripe { 30 } else { 0 };
                        let (y, x) = (pr * cfg.patch_size + dy, pc * cfg.patch_size + dx);
                        let o = (y * cfg.image_side + x) * 3;
                        for ch in 0..3 {
                            let j = if jitter > 0 { rng.random_range(-jitter..=jitter) } else { 0 };
                            image.data[o + ch] = (base[ch] + shade + j).clamp(1, 255) as u8;
                        }
                    }
                }
            }
            Sample {
                id: format!("syn-{:05}", i),
                text,
                image,
                label,
            }
        })
        .collect();
    Ok(samples)
}

/// Majority vote over class keywords; `None` on a tie (including no keywords).
pub fn keyword_rule(words: &[String]) -> Option<u8> {
    let (mut real, mut fake) = (0usize, 0usize);
    for w in words {
        if w.starts_with("verified") {
            real += 1;
        } else if w.starts_with("rumor") {
            fake += 1;
        }
    }
    match real.cmp(&fake) {
        std::cmp::Ordering::Greater => Some(REAL),
        std::cmp::Ordering::Less => Some(FAKE),
        std::cmp::Ordering::Equal => None,
    }
}

/// Majority vote over patches whose mean colour is closest to a cue colour.
pub fn color_rule(image: &Image, patch_size: usize) -> Option<u8> {
    let side = image.width / patch_size;
    let mut votes = [0usize; 2];
    for k in 0..side * side {
        let (pr, pc) = (k / side, k % side);
        let mut mean = [0f64; 3];
        for dy in 0..patch_size {
            for dx in 0..patch_size {
                let px = image.pixel(pr * patch_size + dy, pc * patch_size + dx);
                for c in 0..3 {
                    mean[c] += f64::from(px[c]);
                }
            }
        }
        let area = (patch_size * patch_size) as f64;
        mean.iter_mut().for_each(|m| *m /= area);
        let dist = |col: [u8; 3]| -> f64 { (0..3).map(|c| (mean[c] - f64::from(col[c]) - 15.0).powi(2)).sum() };
        let d0 = dist(CUE_COLORS[0]);
        let d1 = dist(CUE_COLORS[1]);
        // background greys sit far from both palettes; the threshold only admits cue patches
        if d0.min(d1) < 40.0 * 40.0 {
            votes[usize::from(d1 < d0)] += 1;
        }
    }
    match votes[0].cmp(&votes[1]) {
        std::cmp::Ordering::Greater => Some(REAL),
        std::cmp::Ordering::Less => Some(FAKE),
        std::cmp::Ordering::Equal => None,
    }
}

/// Accuracy of a fixed rule where ties count as half-correct.
pub fn rule_accuracy(samples: &[Sample], rule: impl Fn(&Sample) -> Option<u8>) -> f64 {
    let score: f64 = samples
        .iter()
        .map(|s| match rule(s) {
            Some(p) if p == s.label => 1.0,
            Some(_) => 0.0,
            None => 0.5,
        })
        .sum();
    score / samples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = generate_synthetic(200, 7, 0.8, 0.4).unwrap();
        let b = generate_synthetic(200, 7, 0.8, 0.4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|s| s.label == FAKE).count(), 100);
        assert!(a.iter().all(|s| (8..=20).contains(&s.text.len())));
    }

    #[test]
    fn noiseless_keywords_are_perfect() {
        let data = generate_synthetic(400, 3, 0.5, 0.0).unwrap();
        assert_eq!(rule_accuracy(&data, |s| keyword_rule(&s.text)), 1.0);
        assert_eq!(rule_accuracy(&data, |s| color_rule(&s.image, 8)), 1.0);
    }

    #[test]
    fn bad_sizes_rejected() {
        assert!(generate_synthetic(3, 1, 0.5, 0.1).is_err());
        assert!(generate_synthetic(7, 1, 0.5, 0.1).is_err());
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let data = generate_synthetic(100, 1, 0.5, 0.1).unwrap();
        let (tr, te) = split(&data, 0.2, 9);
        assert_eq!((tr.len(), te.len()), (80, 20));
        let ids: HashSet<_> = tr.iter().map(|s| &s.id).collect();
        assert!(te.iter().all(|s| !ids.contains(&s.id)));
        assert_eq!(split(&data, 0.2, 9), (tr, te));
    }

    fn write_lines(dir: &Path, lines: &[String]) -> PathBuf {
        let p = dir.join("manifest.jsonl");
        std::fs::write(&p, lines.join("\n")).unwrap();
        p
    }

    fn record(id: &str, label: i64, img: &Image) -> String {
        format!(
            r#"{{"id":"{id}","text":"a b c","image":"{INLINE_PREFIX}{}","label":{label}}}"#,
            BASE64.encode(img.to_png_bytes().unwrap())
        )
    }

    #[test]
    fn manifest_loads_and_resizes() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(2, 2, 3, vec![10; 12]).unwrap();
        let path = write_lines(dir.path(), &[record("a", 0, &img), record("b", 1, &img), record("c", 0, &img)]);
        let samples = load_manifest(&path, 224).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!((samples[0].image.height, samples[0].image.width), (224, 224));
    }

    #[test]
    fn manifest_image_path_is_relative_to_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(4, 4, 3, vec![99; 48]).unwrap();
        std::fs::write(dir.path().join("x.png"), img.to_png_bytes().unwrap()).unwrap();
        let path = write_lines(dir.path(), &[r#"{"id":"a","text":"hello world","image":"x.png","label":1}"#.into()]);
        let s = load_manifest(&path, 4).unwrap();
        assert_eq!(s[0].image, img);
        assert_eq!(s[0].text, vec!["hello", "world"]);
    }

    #[test]
    fn duplicate_id_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(2, 2, 3, vec![10; 12]).unwrap();
        let path = write_lines(dir.path(), &[record("dup", 0, &img), record("dup", 1, &img)]);
        let err = load_manifest(&path, 2).unwrap_err().to_string();
        assert!(err.contains("dup") && err.contains("duplicate"), "{err}");
    }

    #[test]
    fn bad_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(2, 2, 3, vec![10; 12]).unwrap();
        let path = write_lines(dir.path(), &[record("a", 2, &img)]);
        assert!(matches!(load_manifest(&path, 2), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn missing_image_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(dir.path(), &[r#"{"id":"a","text":"t","image":"nope.png","label":1}"#.into()]);
        let err = load_manifest(&path, 2).unwrap_err().to_string();
        assert!(err.contains("record a"), "{err}");
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_synthetic(6, 2, 0.7, 0.3).unwrap();
        let path = dir.path().join("syn.jsonl");
        write_manifest(&data, &path).unwrap();
        assert_eq!(load_manifest(&path, 32).unwrap(), data);
    }
}
