//! Experiment configuration: TOML file with `model`, `loss`, `train` and
//! `data` sections, `key=value` overrides and a stable content hash.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corruption::MissingRates;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Toy,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backend: Backend,
    /// Feature width shared by both encoders.
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    pub fusion_layers: usize,
    pub adapter_hidden: usize,
    /// Residual ratio of the incomplete-modality adapters.
    pub alpha: f64,
    /// Output width of the contrastive projection heads.
    pub proj_dim: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Toy,
            d: 64,
            layers: 2,
            heads: 4,
            ffn_hidden: 128,
            vocab_size: 4096,
            fusion_layers: 1,
            adapter_hidden: 16,
            alpha: 0.2,
            proj_dim: 32,
            dropout: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda_c: f64,
    pub lambda_m: f64,
    pub include_positive_in_denominator: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda_c: 1.0,
            lambda_m: 0.5,
            include_positive_in_denominator: false,
        }
    }
}

/// Ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Toggle {
    #[serde(rename = "drop_Lc_h")]
    DropLcText,
    #[serde(rename = "drop_Lc_r")]
    DropLcImage,
    #[serde(rename = "drop_Lc_f")]
    DropLcFusion,
    #[serde(rename = "drop_Lm_h")]
    DropLmText,
    #[serde(rename = "drop_Lm_r")]
    DropLmImage,
    #[serde(rename = "drop_Lm_f")]
    DropLmFusion,
    #[serde(rename = "drop_adapters")]
    DropAdapters,
    #[serde(rename = "drop_weighting")]
    DropWeighting,
    #[serde(rename = "vanilla_mcl")]
    VanillaMcl,
}

impl Toggle {
    pub const ALL: [Toggle; 9] = [
        Toggle::DropLcText,
        Toggle::DropLcImage,
        Toggle::DropLcFusion,
        Toggle::DropLmText,
        Toggle::DropLmImage,
        Toggle::DropLmFusion,
        Toggle::DropAdapters,
        Toggle::DropWeighting,
        Toggle::VanillaMcl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Toggle::DropLcText => "drop_Lc_h",
            Toggle::DropLcImage => "drop_Lc_r",
            Toggle::DropLcFusion => "drop_Lc_f",
            Toggle::DropLmText => "drop_Lm_h",
            Toggle::DropLmImage => "drop_Lm_r",
            Toggle::DropLmFusion => "drop_Lm_f",
            Toggle::DropAdapters => "drop_adapters",
            Toggle::DropWeighting => "drop_weighting",
            Toggle::VanillaMcl => "vanilla_mcl",
        }
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Toggle::DropLcText => "w/o L_c^h",
            Toggle::DropLcImage => "w/o L_c^r",
            Toggle::DropLcFusion => "w/o L_c^f",
            Toggle::DropLmText => "w/o L_m^h",
            Toggle::DropLmImage => "w/o L_m^r",
            Toggle::DropLmFusion => "w/o L_m^f",
            Toggle::DropAdapters => "w/o A",
            Toggle::DropWeighting => "w/o Weight",
            Toggle::VanillaMcl => "w/o MML, w/ MCL",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.iter().map(|t| t.name()).collect::<Vec<_>>().join(", ")
    }
}

impl FromStr for Toggle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation toggle '{s}' (valid: {})", Self::valid_names())))
    }
}

impl fmt::Display for Toggle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Human-readable label for a toggle set, e.g. `w/o MML` for all three contrastive drops.
pub fn toggle_set_label(set: &BTreeSet<Toggle>) -> String {
    if set.is_empty() {
        return "MMLNet".to_string();
    }
    let lm: BTreeSet<_> = [Toggle::DropLmText, Toggle::DropLmImage, Toggle::DropLmFusion].into();
    let lc: BTreeSet<_> = [Toggle::DropLcText, Toggle::DropLcImage, Toggle::DropLcFusion].into();
    let mut parts = Vec::new();
    let mut rest = set.clone();
    if lm.is_subset(set) {
        parts.push("w/o MML".to_string());
        rest.retain(|t| !lm.contains(t));
    }
    if lc.is_subset(set) {
        parts.push("w/o L_c".to_string());
        rest.retain(|t| !lc.contains(t));
    }
    parts.extend(rest.iter().map(|t| t.label().to_string()));
    parts.join(", ")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_main: f64,
    pub lr_encoder: f64,
    pub weight_decay: f64,
    /// Global-norm gradient clipping; off when absent.
    pub grad_clip: Option<f64>,
    pub val_fraction: f64,
    pub ablation: BTreeSet<Toggle>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            epochs: 15,
            batch_size: 16,
            lr_main: 1e-4,
            lr_encoder: 3e-6,
            weight_decay: 0.005,
            grad_clip: None,
            val_fraction: 0.1,
            ablation: BTreeSet::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub text_rate: u8,
    pub image_rate: u8,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_side: 224,
            patch_size: 32,
            text_rate: 0,
            image_rate: 0,
        }
    }
}

impl DataConfig {
    pub fn rates(&self) -> MissingRates {
        MissingRates {
            text_rate: self.text_rate,
            image_rate: self.image_rate,
        }
    }

    pub fn patches(&self) -> usize {
        let side = self.image_side / self.patch_size;
        side * side
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    pub fn rates(&self) -> MissingRates {
        self.data.rates()
    }

    pub fn set_rates(&mut self, rates: MissingRates) {
        self.data.text_rate = rates.text_rate;
        self.data.image_rate = rates.image_rate;
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.d == 0 || m.heads == 0 || !m.d.is_multiple_of(m.heads) {
            return bad(format!("model.d={} must be a positive multiple of model.heads={}", m.d, m.heads));
        }
        if m.vocab_size == 0 || m.ffn_hidden == 0 || m.adapter_hidden == 0 || m.proj_dim == 0 {
            return bad("model widths must be positive".into());
        }
        if !(0.0..=1.0).contains(&m.alpha) {
            return bad(format!("model.alpha={} must lie in [0,1]", m.alpha));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return bad(format!("model.dropout={} must lie in [0,1)", m.dropout));
        }
        let l = &self.loss;
        if l.tau.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return bad(format!("loss.tau={} must be positive", l.tau));
        }
        if l.lambda_c < 0.0 || l.lambda_m < 0.0 || l.lambda_c.is_nan() || l.lambda_m.is_nan() {
            return bad("loss weights must be nonnegative".into());
        }
        let t = &self.train;
        if t.batch_size < 2 {
            return bad(format!("train.batch_size={} must be at least 2", t.batch_size));
        }
        if t.lr_main < 0.0 || t.lr_encoder < 0.0 || t.weight_decay < 0.0 {
            return bad("learning rates and weight decay must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&t.val_fraction) {
            return bad(format!("train.val_fraction={} must lie in [0,1)", t.val_fraction));
        }
        let d = &self.data;
        if d.patch_size == 0 || !d.image_side.is_multiple_of(d.patch_size) {
            return bad(format!(
                "data.image_side={} must be divisible by data.patch_size={}",
                d.image_side, d.patch_size
            ));
        }
        d.rates().validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `key=value` overrides. Keys are `section.field` or a bare field
    /// name when it is unique across sections. Values use TOML syntax; bare
    /// words are taken as strings, and comma lists are accepted for `ablation`.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{item}' is not key=value")))?;
            let (section, field) = resolve_key(&root, key.trim())?;
            let table = root
                .get_mut(&section)
                .and_then(toml::Value::as_table_mut)
                .expect("resolved section exists");
            let value = parse_override_value(raw.trim(), table.get(&field));
            table.insert(field, value);
        }
        let cfg: Self = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex digest of the canonical JSON form; independent of field order in the source file.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_value(self).expect("config serialises");
        let text = serde_json::to_string(&canonical).expect("json value serialises");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

const SECTIONS: [&str; 4] = ["model", "loss", "train", "data"];

fn resolve_key(root: &toml::Value, key: &str) -> Result<(String, String)> {
    if let Some((section, field)) = key.split_once('.') {
        let known = root
            .get(section)
            .and_then(toml::Value::as_table)
            .is_some_and(|t| t.contains_key(field) || is_optional_field(section, field));
        if known {
            return Ok((section.to_string(), field.to_string()));
        }
        return Err(Error::Config(format!("unknown config key '{key}'")));
    }
    let hits: Vec<_> = SECTIONS
        .iter()
        .filter(|s| {
            root.get(**s)
                .and_then(toml::Value::as_table)
                .is_some_and(|t| t.contains_key(key) || is_optional_field(s, key))
        })
        .collect();
    match hits.as_slice() {
        [one] => Ok((one.to_string(), key.to_string())),
        [] => Err(Error::Config(format!("unknown config key '{key}'"))),
        _ => Err(Error::Config(format!("ambiguous config key '{key}', qualify it with a section"))),
    }
}

// Option fields are omitted from the serialised table when unset.
fn is_optional_field(section: &str, field: &str) -> bool {
    section == "train" && field == "grad_clip"
}

fn parse_override_value(raw: &str, current: Option<&toml::Value>) -> toml::Value {
    if let Some(toml::Value::Array(_)) = current {
        if !raw.starts_with('[') {
            let items = raw
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| toml::Value::String(s.to_string()))
                .collect();
            return toml::Value::Array(items);
        }
    }
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
