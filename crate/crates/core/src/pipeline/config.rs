use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::AttackConfig;
use crate::corpus::CorpusParams;
use crate::error::{Error, Result};
use crate::lm::{ModelConfig, TrainSchedule};
use crate::unlearn::{Method, MethodSpec, Regularizer};

/// A method run with a file-safe name; the name defaults to the spec label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedMethod {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub spec: MethodSpec,
}

impl NamedMethod {
    pub fn new(spec: MethodSpec) -> Self {
        NamedMethod { name: None, spec }
    }

    pub fn named(name: &str, spec: MethodSpec) -> Self {
        NamedMethod { name: Some(name.to_string()), spec }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.spec.label())
    }
}

/// Everything that determines an experiment. Per-seed stage seeds are the
/// configured seeds offset by the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub known_fraction: f64,
    pub seeds: Vec<u64>,
    /// Core-set size in percent of the forget set.
    pub coreset_percent: f64,
    /// Restrict gradient association scores to blocks producing layers
    /// at or above this one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_mask_from_layer: Option<usize>,
    /// Output root; not part of the digest.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub corpus: CorpusParams,
    pub model: ModelConfig,
    /// Pre-finetuning model on the retain set (also the retrain baseline).
    pub base_train: TrainSchedule,
    /// Continued training of the base model on forget ∪ retain.
    pub target_train: TrainSchedule,
    pub attack: AttackConfig,
    pub methods: Vec<NamedMethod>,
}

pub fn desk_base_schedule() -> TrainSchedule {
    TrainSchedule { lr: 2e-3, epochs: 10, batch_size: 4, cosine: true, warmup_steps: 20, ..Default::default() }
}

pub fn desk_target_schedule() -> TrainSchedule {
    TrainSchedule { lr: 2e-3, epochs: 60, batch_size: 4, cosine: true, warmup_steps: 20, ..Default::default() }
}

/// Default method sweep with desk-scale hyperparameters.
pub fn desk_methods() -> Vec<NamedMethod> {
    let m = |method: Method| MethodSpec::new(method);
    let mut out: Vec<NamedMethod> = vec![
        m(Method::GA),
        m(Method::GA).with_regularizer(Regularizer::Gdr),
        m(Method::GA).with_regularizer(Regularizer::Klr),
        m(Method::NPO),
        m(Method::NPO).with_regularizer(Regularizer::Gdr),
        m(Method::DPO),
        m(Method::RMU),
        m(Method::TaskVector),
        m(Method::RL),
        m(Method::RM),
        m(Method::IDK),
        m(Method::WHP),
        m(Method::RAU),
    ]
    .into_iter()
    .map(NamedMethod::new)
    .collect();
    for nm in &mut out {
        crate::pipeline::tune_desk(&mut nm.spec);
    }
    out
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            known_fraction: 0.2,
            seeds: vec![0, 1, 2],
            coreset_percent: 10.0,
            grad_mask_from_layer: None,
            output_dir: None,
            corpus: CorpusParams::default(),
            model: ModelConfig::default(),
            base_train: desk_base_schedule(),
            target_train: desk_target_schedule(),
            attack: AttackConfig::default(),
            methods: desk_methods(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.base_train.validate()?;
        self.target_train.validate()?;
        if !(self.known_fraction > 0.0 && self.known_fraction <= 1.0) {
            return Err(Error::Config(format!("known_fraction {} outside (0, 1]", self.known_fraction)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(self.coreset_percent > 0.0 && self.coreset_percent <= 100.0) {
            return Err(Error::Config(format!("coreset_percent {} outside (0, 100]", self.coreset_percent)));
        }
        if self.attack.icl_k == 0 {
            return Err(Error::Config("attack.icl_k must be at least 1".into()));
        }
        if self.attack.ft_size > self.corpus.n_forget {
            return Err(Error::Config(format!("attack.ft_size {} exceeds n_forget", self.attack.ft_size)));
        }
        let mut labels: Vec<String> = self.methods.iter().map(NamedMethod::label).collect();
        for l in &labels {
            if l.is_empty() || !l.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c)) {
                return Err(Error::Config(format!("method name {l:?} is not file-safe")));
            }
            if ["target", "retrain", "base"].contains(&l.as_str()) {
                return Err(Error::Config(format!("method name {l:?} is reserved")));
            }
        }
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate method name {:?}; set `name`", w[0])));
        }
        for m in &self.methods {
            m.spec.validate(self.model.n_layers)?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form without `output_dir`, hex.
    pub fn digest(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = None;
        Ok(hex::encode(Sha256::digest(c.to_toml()?.as_bytes())))
    }

    pub fn method(&self, name: &str) -> Result<&NamedMethod> {
        self.methods
            .iter()
            .find(|m| m.label() == name)
            .ok_or_else(|| Error::Config(format!("no method named {name:?} in the config")))
    }

    /// Concrete stage parameters for one run seed.
    pub fn plan(&self, seed: u64) -> SeedPlan {
        let off = |s: u64| s.wrapping_add(seed);
        SeedPlan {
            seed,
            corpus: CorpusParams { seed: off(self.corpus.seed), ..self.corpus.clone() },
            model: ModelConfig { seed: off(self.model.seed), ..self.model.clone() },
            base_train: TrainSchedule { seed: off(self.base_train.seed), ..self.base_train.clone() },
            target_train: TrainSchedule { seed: off(self.target_train.seed), ..self.target_train.clone() },
            split_seed: seed,
            known_fraction: self.known_fraction,
            attack: AttackConfig { seed: off(self.attack.seed), ..self.attack.clone() },
        }
    }

    /// The method spec with its seed offset for `seed`.
    pub fn method_for_seed(&self, m: &NamedMethod, seed: u64) -> MethodSpec {
        let mut s = m.spec.clone();
        s.hyper.seed = s.hyper.seed.wrapping_add(seed);
        s
    }
}

/// Parameters of every stage for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub seed: u64,
    pub corpus: CorpusParams,
    pub model: ModelConfig,
    pub base_train: TrainSchedule,
    pub target_train: TrainSchedule,
    pub split_seed: u64,
    pub known_fraction: f64,
    pub attack: AttackConfig,
}
