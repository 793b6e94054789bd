use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Classifier, ContextNet, ContextNetConfig, DiscriminatorConfig, Encoder, EncoderConfig, PredictionHeads};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Target,
    Teacher,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Source => "source",
            Role::Target => "target",
            Role::Teacher => "teacher",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "source" => Some(Role::Source),
            "target" => Some(Role::Target),
            "teacher" => Some(Role::Teacher),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Time steps `K` per input window.
    pub input_length: usize,
    pub num_classes: usize,
    pub encoder: EncoderConfig,
    pub context: ContextNetConfig,
    pub discriminator: DiscriminatorConfig,
    /// Future offsets predicted during pretraining; defaults to `min(4, K′/4)`.
    #[serde(default)]
    pub horizon: Option<usize>,
}

impl ModelConfig {
    /// Feature sequence length `K′`.
    pub fn feature_len(&self) -> Result<usize> {
        let min = self.encoder.min_input_len();
        match self.encoder.output_len(self.input_length) {
            Some(l) if l >= 2 => Ok(l),
            _ => Err(Error::InputTooShort {
                got: self.input_length,
                min,
            }),
        }
    }

    pub fn horizon(&self) -> Result<usize> {
        let len = self.feature_len()?;
        Ok(self.horizon.unwrap_or_else(|| (len / 4).clamp(1, 4)))
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.discriminator.validate()?;
        let len = self.feature_len()?;
        let width = self.encoder.output_channels();
        if self.context.input_dim != width {
            return Err(Error::Config(format!(
                "context input_dim {} must equal the encoder output width {width}",
                self.context.input_dim
            )));
        }
        if self.discriminator.input_channels != width {
            return Err(Error::Config(format!(
                "discriminator input_channels {} must equal the encoder output width {width}",
                self.discriminator.input_channels
            )));
        }
        let horizon = self.horizon()?;
        if horizon == 0 || horizon >= len {
            return Err(Error::Config(format!("horizon {horizon} needs 1 ≤ K_h < K′ = {len}")));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        Ok(())
    }
}

/// Encoder, context net, prediction heads and classifier of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub role: Role,
    config: ModelConfig,
    pub encoder: Encoder,
    pub context: ContextNet,
    pub heads: PredictionHeads,
    pub classifier: Classifier,
    /// Optimizer steps taken so far.
    pub step: u64,
}

const SUBNETS: [&str; 4] = ["encoder", "context", "heads", "classifier"];

impl ModelBundle {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "init/model");
        let encoder = Encoder::new(config.encoder.clone(), &mut rng)?;
        let context = ContextNet::new(config.context.clone(), &mut rng)?;
        let width = config.encoder.output_channels();
        let heads = PredictionHeads::new(config.horizon()?, config.context.hidden_dim, width, &mut rng)?;
        let classifier = Classifier::new(width, config.num_classes, &mut rng)?;
        Ok(Self {
            role: Role::Source,
            config,
            encoder,
            context,
            heads,
            classifier,
            step: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// A copy under another role with every sub-network unfrozen.
    pub fn with_role(&self, role: Role) -> Self {
        let mut b = self.clone();
        b.role = role;
        b.set_frozen(false);
        b
    }

    pub fn stores(&self) -> [&ParamStore; 4] {
        [
            self.encoder.store(),
            self.context.store(),
            self.heads.store(),
            self.classifier.store(),
        ]
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore; 4] {
        [
            self.encoder.store_mut(),
            self.context.store_mut(),
            self.heads.store_mut(),
            self.classifier.store_mut(),
        ]
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for s in self.stores_mut() {
            s.set_frozen(frozen);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.stores().iter().all(|s| s.is_frozen())
    }

    /// Eval-mode class logits for a `[B, M, K]` batch.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.encoder.encode(x)?;
        self.classifier.logits(&h)
    }

    /// Writes `manifest.txt` plus one parameter blob per sub-network.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, store) in SUBNETS.iter().zip(self.stores()) {
            let path = dir.join(format!("{name}.bin"));
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            store
                .write_blob(BufWriter::new(file))
                .map_err(|e| Error::io(&path, e))?;
        }
        let config = serde_json::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        let manifest = format!(
            "format = tsda-checkpoint-1\nrole = {}\nstep = {}\nblobs = {}\nconfig = {config}\n",
            self.role.as_str(),
            self.step,
            SUBNETS.map(|n| format!("{n}.bin")).join(" "),
        );
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.txt");
        if !path.exists() {
            return Err(Error::MissingInput {
                what: format!("checkpoint manifest {}", path.display()),
                hint: "produce it with `tsda pretrain`".into(),
            });
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |detail: String| Error::Format {
            what: "checkpoint manifest",
            path: path.clone(),
            detail,
        };
        let mut role = None;
        let mut step = 0;
        let mut config = None;
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            match k.trim() {
                "role" => role = Some(Role::parse(v.trim()).ok_or_else(|| bad(format!("unknown role {v}")))?),
                "step" => step = v.trim().parse().map_err(|_| bad(format!("bad step {v}")))?,
                "config" => {
                    config = Some(serde_json::from_str::<ModelConfig>(v.trim()).map_err(|e| bad(e.to_string()))?)
                }
                _ => {}
            }
        }
        let config = config.ok_or_else(|| bad("missing config".into()))?;
        let mut bundle = Self::new(config, 0)?;
        bundle.role = role.ok_or_else(|| bad("missing role".into()))?;
        bundle.step = step;
        for (name, store) in SUBNETS.iter().zip(bundle.stores_mut()) {
            let path = dir.join(format!("{name}.bin"));
            let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let loaded = ParamStore::read_blob(*name, BufReader::new(file)).map_err(|detail| Error::Format {
                what: "parameter blob",
                path: path.clone(),
                detail,
            })?;
            store.load_values(&loaded)?;
        }
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::presets::ArchPreset;

    #[test]
    fn checkpoint_round_trip() {
        let mut b = ModelBundle::new(ArchPreset::Synthetic.model(1, 3), 7).unwrap();
        b.role = Role::Teacher;
        b.step = 42;
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        assert_eq!(ModelBundle::load(dir.path()).unwrap(), b);
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            ModelBundle::load(empty.path()),
            Err(Error::MissingInput { .. })
        ));
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let mut cfg = ArchPreset::Synthetic.model(1, 3);
        cfg.context.input_dim += 1;
        assert!(matches!(ModelBundle::new(cfg, 0), Err(Error::Config(_))));
    }
}
