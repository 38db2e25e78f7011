use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ga")]
    GA,
    #[serde(rename = "npo")]
    NPO,
    #[serde(rename = "dpo")]
    DPO,
    #[serde(rename = "rmu")]
    RMU,
    #[serde(rename = "task_vector")]
    TaskVector,
    #[serde(rename = "rl")]
    RL,
    #[serde(rename = "rm")]
    RM,
    #[serde(rename = "idk")]
    IDK,
    #[serde(rename = "whp")]
    WHP,
    #[serde(rename = "rau")]
    RAU,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::GA,
        Method::NPO,
        Method::DPO,
        Method::RMU,
        Method::TaskVector,
        Method::RL,
        Method::RM,
        Method::IDK,
        Method::WHP,
        Method::RAU,
    ];

    /// Methods that change the training objective (as opposed to relabeling
    /// the forget set).
    pub fn is_training_pipeline(self) -> bool {
        !matches!(self, Method::RL | Method::RM | Method::IDK | Method::WHP)
    }

    /// Methods that specify an alternative output.
    pub fn is_targeted(self) -> bool {
        matches!(self, Method::DPO | Method::RL | Method::RM | Method::IDK | Method::WHP)
    }

    pub fn is_representation_based(self) -> bool {
        matches!(self, Method::RMU | Method::RAU)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::GA => "GA",
            Method::NPO => "NPO",
            Method::DPO => "DPO",
            Method::RMU => "RMU",
            Method::TaskVector => "TaskVector",
            Method::RL => "RL",
            Method::RM => "RM",
            Method::IDK => "IDK",
            Method::WHP => "WHP",
            Method::RAU => "RAU",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    #[default]
    None,
    Gdr,
    Klr,
}

/// Hyperparameters; each method reads the fields it needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// NPO / DPO inverse temperature.
    pub beta: f64,
    /// WHP interpolation strength, or RMU retain weight.
    pub alpha: f64,
    /// Task-vector scale.
    pub lambda: f64,
    /// RMU control-vector scale.
    pub c: f64,
    /// RMU target layer (1-based hidden layer).
    pub rmu_layer: usize,
    /// RAU first anchored layer.
    pub rau_start_layer: usize,
    /// Per-layer RAU weights for layers `l0..=L`; uniform when absent.
    pub rau_weights: Option<Vec<f64>>,
    pub lambda_unlearn: f64,
    pub lambda_retain: f64,
    /// Weight of the GDR / KLR term.
    pub reg_weight: f64,
    /// Epochs used to build the reinforced model (task vector, WHP).
    pub reinforce_epochs: usize,
    /// Fraction of the retain set held out for regularizers.
    pub retain_fraction: f64,
    pub seed: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            lr: 1e-4,
            epochs: 5,
            batch_size: 8,
            beta: 0.1,
            alpha: 1.0,
            lambda: 1.0,
            c: 20.0,
            rmu_layer: 3,
            rau_start_layer: 3,
            rau_weights: None,
            lambda_unlearn: 1.0,
            lambda_retain: 1.0,
            reg_weight: 1.0,
            reinforce_epochs: 10,
            retain_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Method, regularizer and hyperparameters: fully determines one
/// unlearning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub method: Method,
    #[serde(default)]
    pub regularizer: Regularizer,
    #[serde(default)]
    pub hyper: Hyper,
}

impl MethodSpec {
    pub fn new(method: Method) -> Self {
        MethodSpec { method, regularizer: Regularizer::None, hyper: Hyper::default() }
    }

    pub fn with_regularizer(mut self, r: Regularizer) -> Self {
        self.regularizer = r;
        self
    }

    /// Display label such as `GA_GDR`.
    pub fn label(&self) -> String {
        match self.regularizer {
            Regularizer::None => self.method.name().to_string(),
            Regularizer::Gdr => format!("{}_GDR", self.method.name()),
            Regularizer::Klr => format!("{}_KLR", self.method.name()),
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let h = &self.hyper;
        let bad = |m: String| Err(Error::Config(format!("{}: {m}", self.label())));
        if !(h.lr >= 0.0 && h.lr.is_finite()) || h.batch_size == 0 {
            return bad("lr must be non-negative and batch_size positive".into());
        }
        match self.method {
            Method::NPO | Method::DPO if !(h.beta > 0.0) => return bad(format!("beta {} must be positive", h.beta)),
            Method::WHP if !(0.0..=1.0).contains(&h.alpha) => {
                return bad(format!("alpha {} outside [0, 1]", h.alpha))
            }
            Method::RMU if !(1..=n_layers).contains(&h.rmu_layer) => {
                return bad(format!("rmu_layer {} outside [1, {n_layers}]", h.rmu_layer))
            }
            Method::RMU if h.alpha < 0.0 => return bad("alpha must be non-negative".into()),
            Method::RAU => {
                if !(1..=n_layers).contains(&h.rau_start_layer) {
                    return bad(format!("rau_start_layer {} outside [1, {n_layers}]", h.rau_start_layer));
                }
                if let Some(w) = &h.rau_weights {
                    if w.len() != n_layers + 1 - h.rau_start_layer {
                        return bad(format!("rau_weights needs {} entries", n_layers + 1 - h.rau_start_layer));
                    }
                }
            }
            Method::TaskVector if h.lambda < 0.0 => return bad(format!("lambda {} must be >= 0", h.lambda)),
            _ => {}
        }
        if self.regularizer == Regularizer::Klr && !self.method.is_training_pipeline() {
            return bad("KLR acts on the loss and only pairs with training-pipeline methods".into());
        }
        if self.regularizer != Regularizer::None && self.method == Method::TaskVector {
            return bad("task-vector editing has no loss to regularize".into());
        }
        if !(h.retain_fraction > 0.0 && h.retain_fraction <= 1.0) {
            return bad(format!("retain_fraction {} outside (0, 1]", h.retain_fraction));
        }
        Ok(())
    }
}
