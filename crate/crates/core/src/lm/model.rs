use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{load_checkpoint, save_checkpoint, write_atomic, ParamStore, Real, Tape, Tensor, Var};

use super::ModelConfig;

/// Indices of one pre-norm block's tensors inside the [`ParamStore`].
#[derive(Clone, Debug)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc_w: usize,
    fc_b: usize,
    out_w: usize,
    out_b: usize,
}

/// Name → index resolution for the transformer's parameters.
#[derive(Clone, Debug)]
pub struct Layout {
    tok: usize,
    pos: usize,
    blocks: Vec<BlockIdx>,
    lnf_g: usize,
    lnf_b: usize,
    head: usize,
}

/// Parameter-name prefix of block `i` (0-based). Block `i` produces hidden
/// layer `i + 1`.
pub fn block_prefix(i: usize) -> String {
    format!("blocks.{i:02}")
}

/// Hidden layer (1-based) whose output a parameter name feeds, or `None`
/// for embeddings and the output head.
pub fn block_layer_of(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("blocks.")?;
    rest.get(..2)?.parse::<usize>().ok().map(|i| i + 1)
}

fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, v, f) = (cfg.d_model, cfg.vocab_size, cfg.d_ff());
    let mut out = vec![
        ("embed.tok".to_string(), vec![v, d]),
        ("embed.pos".to_string(), vec![cfg.max_seq_len, d]),
        ("ln_f.bias".to_string(), vec![d]),
        ("ln_f.weight".to_string(), vec![d]),
        ("head.weight".to_string(), vec![d, v]),
    ];
    for i in 0..cfg.n_layers {
        let p = block_prefix(i);
        out.extend([
            (format!("{p}.ln1.bias"), vec![d]),
            (format!("{p}.ln1.weight"), vec![d]),
            (format!("{p}.attn.qkv.weight"), vec![d, 3 * d]),
            (format!("{p}.attn.qkv.bias"), vec![3 * d]),
            (format!("{p}.attn.proj.weight"), vec![d, d]),
            (format!("{p}.attn.proj.bias"), vec![d]),
            (format!("{p}.ln2.bias"), vec![d]),
            (format!("{p}.ln2.weight"), vec![d]),
            (format!("{p}.mlp.fc.weight"), vec![d, f]),
            (format!("{p}.mlp.fc.bias"), vec![f]),
            (format!("{p}.mlp.proj.weight"), vec![f, d]),
            (format!("{p}.mlp.proj.bias"), vec![d]),
        ]);
    }
    out
}

impl Layout {
    pub fn resolve<T: Real>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        let idx = |name: &str| {
            store.index_of(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
        };
        for (name, shape) in param_shapes(cfg) {
            let t = store.get(&name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
        }
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                let p = block_prefix(i);
                Ok(BlockIdx {
                    ln1_g: idx(&format!("{p}.ln1.weight"))?,
                    ln1_b: idx(&format!("{p}.ln1.bias"))?,
                    qkv_w: idx(&format!("{p}.attn.qkv.weight"))?,
                    qkv_b: idx(&format!("{p}.attn.qkv.bias"))?,
                    proj_w: idx(&format!("{p}.attn.proj.weight"))?,
                    proj_b: idx(&format!("{p}.attn.proj.bias"))?,
                    ln2_g: idx(&format!("{p}.ln2.weight"))?,
                    ln2_b: idx(&format!("{p}.ln2.bias"))?,
                    fc_w: idx(&format!("{p}.mlp.fc.weight"))?,
                    fc_b: idx(&format!("{p}.mlp.fc.bias"))?,
                    out_w: idx(&format!("{p}.mlp.proj.weight"))?,
                    out_b: idx(&format!("{p}.mlp.proj.bias"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if store.num_tensors() != 5 + 12 * cfg.n_layers {
            return Err(Error::Config("unexpected extra parameters".into()));
        }
        Ok(Layout {
            tok: idx("embed.tok")?,
            pos: idx("embed.pos")?,
            blocks,
            lnf_g: idx("ln_f.weight")?,
            lnf_b: idx("ln_f.bias")?,
            head: idx("head.weight")?,
        })
    }
}

/// Tape handles produced by one forward pass.
pub struct ForwardVars {
    /// `[T, vocab]`
    pub logits: Var,
    /// Residual stream after the embedding (index 0) and after each block.
    pub hidden: Vec<Var>,
}

/// Records a forward pass of `tokens` on `tape`, whose parameter leaves
/// must come from a store with this config's layout.
pub fn forward_on_tape<T: Real>(
    tape: &mut Tape<'_, T>,
    cfg: &ModelConfig,
    layout: &Layout,
    tokens: &[u32],
) -> Result<ForwardVars> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::Overlong { len: tokens.len(), max: cfg.max_seq_len });
    }
    if let Some(bad) = tokens.iter().find(|t| **t as usize >= cfg.vocab_size) {
        return Err(Error::InvalidArgument(format!("token {bad} outside vocabulary")));
    }
    let ids: Vec<usize> = tokens.iter().map(|t| *t as usize).collect();
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let tok = tape.gather(tape.param(layout.tok), &ids);
    let pos = tape.gather(tape.param(layout.pos), &positions);
    let mut x = tape.add(tok, pos);
    let mut hidden = Vec::with_capacity(cfg.n_layers + 1);
    hidden.push(x);
    for b in &layout.blocks {
        let p = |i: usize| tape.param(i);
        let (g1, b1, qw, qb, pw, pb) = (p(b.ln1_g), p(b.ln1_b), p(b.qkv_w), p(b.qkv_b), p(b.proj_w), p(b.proj_b));
        let (g2, b2, fw, fb, ow, ob) = (p(b.ln2_g), p(b.ln2_b), p(b.fc_w), p(b.fc_b), p(b.out_w), p(b.out_b));

        let a = tape.layer_norm(x, g1, b1);
        let qkv = tape.matmul(a, qw);
        let qkv = tape.add_bias(qkv, qb);
        let att = tape.causal_attention(qkv, cfg.n_heads);
        let o = tape.matmul(att, pw);
        let o = tape.add_bias(o, pb);
        x = tape.add(x, o);

        let h = tape.layer_norm(x, g2, b2);
        let h = tape.matmul(h, fw);
        let h = tape.add_bias(h, fb);
        let h = tape.gelu(h);
        let h = tape.matmul(h, ow);
        let h = tape.add_bias(h, ob);
        x = tape.add(x, h);
        hidden.push(x);
    }
    let xf = tape.layer_norm(x, tape.param(layout.lnf_g), tape.param(layout.lnf_b));
    let logits = tape.matmul(xf, tape.param(layout.head));
    Ok(ForwardVars { logits, hidden })
}

/// Logits and per-layer hidden states of one inference pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[T, vocab]`
    pub logits: Tensor<f32>,
    /// `L + 1` matrices of shape `[T, d_model]`.
    pub hidden: Vec<Tensor<f32>>,
}

/// Decoder-only transformer: config plus parameters.
#[derive(Clone, Debug)]
pub struct LmModel {
    config: ModelConfig,
    params: ParamStore<f32>,
    layout: Layout,
}

impl PartialEq for LmModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl LmModel {
    /// Fresh model: N(0, 0.02) weights, residual output projections scaled
    /// by `1/sqrt(2L)`, zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut map = BTreeMap::new();
        for (name, shape) in param_shapes(config) {
            let n: usize = shape.iter().product();
            let vals: Vec<f32> = if name.ends_with(".bias") {
                vec![0.0; n]
            } else if name.contains("ln") && name.ends_with(".weight") {
                vec![1.0; n]
            } else {
                let s = if name.ends_with("attn.proj.weight") || name.ends_with("mlp.proj.weight") {
                    resid_std
                } else {
                    std
                };
                let dist = Normal::new(0.0, s).expect("valid std");
                (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
            };
            map.insert(name, Tensor::new(shape, vals)?);
        }
        Self::from_params(config.clone(), ParamStore::new(map))
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&config, &params)?;
        Ok(LmModel { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_layers(&self) -> usize {
        self.config.n_layers
    }

    /// Replaces the parameters with `params` of the same layout.
    pub fn with_params(&self, params: ParamStore<f32>) -> Result<Self> {
        if !self.params.same_layout(&params) {
            return Err(Error::Shape("parameter layout differs from model".into()));
        }
        Ok(LmModel { config: self.config.clone(), params, layout: self.layout.clone() })
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    /// Digest of the parameters (names, shapes, values).
    pub fn digest(&self) -> String {
        self.params.digest()
    }

    /// Inference forward pass.
    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardOutput> {
        let mut tape = Tape::with_params(&self.params, false);
        let fv = forward_on_tape(&mut tape, &self.config, &self.layout, tokens)?;
        Ok(ForwardOutput {
            logits: tape.value(fv.logits).clone(),
            hidden: fv.hidden.iter().map(|h| tape.value(*h).clone()).collect(),
        })
    }

    /// Checkpoint plus a `<path>.config.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(&self.config)?;
        write_atomic(&config_sidecar(path), &json)?;
        save_checkpoint(path, &self.config.digest(), &self.params)
    }

    /// Loads a checkpoint written by [`save`](Self::save), checking that the
    /// stored digest matches the sidecar config.
    pub fn load(path: &Path) -> Result<Self> {
        let config: ModelConfig = serde_json::from_slice(&fs::read(config_sidecar(path))?)?;
        let template = LmModel::init(&config)?;
        let (digest, params) = load_checkpoint(path, &template.params)?;
        if digest != config.digest() {
            return Err(Error::Checkpoint(format!("{} was written for a different config", path.display())));
        }
        LmModel::from_params(config, params)
    }
}

pub fn config_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}
