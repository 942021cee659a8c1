//! Trained model persistence.
//!
//! File layout: the magic line, a little-endian `u64` header length, a JSON
//! header (config, config hash, epoch, parameter names and shapes) and then
//! every parameter's values as little-endian `f64` in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Toggle};
use crate::datasets::Sample;
use crate::encoders::FeatureProvider;
use crate::error::{Error, Result};
use crate::model::{ExpertBundle, MmlNet};
use crate::params::{ParamGroup, ParamStore};

const MAGIC: &[u8] = b"MMLNET-CHECKPOINT v1\n";

/// A model together with the configuration that produced it.
#[derive(Debug)]
pub struct TrainedModel {
    pub config: ExperimentConfig,
    pub net: MmlNet,
    pub store: ParamStore,
    /// Number of completed epochs behind these parameters.
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ExperimentConfig,
    config_hash: String,
    seed: u64,
    epoch: usize,
    params: Vec<ParamHeader>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    group: ParamGroup,
    rows: usize,
    cols: usize,
}

impl TrainedModel {
    /// Freshly initialised model for `config` (toy backend), seeded by `train.seed`.
    pub fn init(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (net, store) = MmlNet::new(&config.model, config.data.patch_size, config.train.seed)?;
        Ok(Self::finish(config, net, store))
    }

    pub fn init_with_provider(config: &ExperimentConfig, provider: Arc<dyn FeatureProvider>) -> Result<Self> {
        config.validate()?;
        let (net, store) = MmlNet::with_provider(&config.model, config.data.patch_size, provider, config.train.seed)?;
        Ok(Self::finish(config, net, store))
    }

    fn finish(config: &ExperimentConfig, mut net: MmlNet, store: ParamStore) -> Self {
        if config.train.ablation.contains(&Toggle::DropAdapters) {
            net.set_alpha(0.0);
        }
        Self {
            config: config.clone(),
            net,
            store,
            epoch: 0,
        }
    }

    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn forward(&self, sample: &Sample) -> Result<ExpertBundle> {
        self.net.forward(&self.store, sample)
    }

    /// Deep copy of the parameters; the structure is rebuilt from the config.
    pub fn snapshot(&self) -> Result<Self> {
        let mut copy = match &self.net.backbone {
            crate::model::Backbone::Toy { .. } => Self::init(&self.config)?,
            crate::model::Backbone::External(p) => Self::init_with_provider(&self.config, p.clone())?,
        };
        copy.store = self.store.clone();
        copy.epoch = self.epoch;
        Ok(copy)
    }

    /// True when every parameter matches bit for bit.
    pub fn same_parameters(&self, other: &TrainedModel) -> bool {
        self.store.len() == other.store.len()
            && self
                .store
                .iter()
                .zip(other.store.iter())
                .all(|((_, a), (_, b))| a.name == b.name && a.value == b.value)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            seed: self.config.train.seed,
            epoch: self.epoch,
            params: self
                .store
                .iter()
                .map(|(_, p)| ParamHeader {
                    name: p.name.clone(),
                    group: p.group,
                    rows: p.value.nrows(),
                    cols: p.value.ncols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut buf = Vec::with_capacity(MAGIC.len() + 8 + json.len() + self.store.num_scalars() * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, p) in self.store.iter() {
            for v in p.value.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Loads a toy-backend checkpoint. With `expected_hash`, a checkpoint
    /// written under a different config is refused.
    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        Self::load_inner(path, expected_hash, None)
    }

    pub fn load_with_provider(path: &Path, expected_hash: Option<&str>, provider: Arc<dyn FeatureProvider>) -> Result<Self> {
        Self::load_inner(path, expected_hash, Some(provider))
    }

    fn load_inner(path: &Path, expected_hash: Option<&str>, provider: Option<Arc<dyn FeatureProvider>>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if !bytes.starts_with(MAGIC) {
            return Err(bad("not a checkpoint file"));
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 8 {
            return Err(bad("truncated header"));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        if rest.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&rest[..len]).map_err(|e| bad(&e.to_string()))?;
        let actual = header.config.hash();
        if actual != header.config_hash {
            return Err(bad("stored config hash does not match stored config"));
        }
        if let Some(expected) = expected_hash {
            if expected != actual {
                return Err(Error::Checkpoint(format!(
                    "{}: config hash {actual} differs from expected {expected}",
                    path.display()
                )));
            }
        }
        let mut model = match provider {
            Some(p) => Self::init_with_provider(&header.config, p)?,
            None => Self::init(&header.config)?,
        };
        if model.store.len() != header.params.len() {
            return Err(bad("parameter count does not match the model built from its config"));
        }
        let mut data = &rest[len..];
        for ph in &header.params {
            let id = model
                .store
                .id(&ph.name)
                .ok_or_else(|| bad(&format!("unknown parameter {}", ph.name)))?;
            let value = model.store.value_mut(id);
            if value.dim() != (ph.rows, ph.cols) {
                return Err(bad(&format!("shape mismatch for {}", ph.name)));
            }
            let need = ph.rows * ph.cols * 8;
            if data.len() < need {
                return Err(bad("truncated parameter data"));
            }
            for (v, chunk) in value.iter_mut().zip(data[..need].chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            data = &data[need..];
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after parameter data"));
        }
        model.epoch = header.epoch;
        Ok(model)
    }
}
