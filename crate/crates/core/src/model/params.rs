use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::attention::{AttentionParams, Linear};
use crate::error::{Error, Result};
use crate::tensor::checkpoint::{read_checkpoint, write_checkpoint};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
}

/// Name, shape and initializer of one learnable tensor.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

fn push_linear(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![fan_in, fan_out],
        init: Init::Xavier,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![fan_out],
        init: Init::Zeros,
    });
}

fn push_norm(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.gamma"),
        shape: vec![d],
        init: Init::Ones,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.beta"),
        shape: vec![d],
        init: Init::Zeros,
    });
}

fn push_attention(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    for proj in ["q", "k", "v", "o"] {
        push_linear(out, &format!("{prefix}.{proj}"), d, d);
    }
}

fn push_block(out: &mut Vec<ParamSpec>, prefix: &str, first: &str, second: &str, cfg: &ModelConfig) {
    let d = cfg.d_model;
    push_norm(out, &format!("{prefix}.norm1"), d);
    push_attention(out, &format!("{prefix}.{first}"), d);
    push_norm(out, &format!("{prefix}.norm2"), d);
    push_attention(out, &format!("{prefix}.{second}"), d);
    push_norm(out, &format!("{prefix}.norm3"), d);
    push_linear(out, &format!("{prefix}.ff.fc1"), d, d * cfg.ff_mult);
    push_linear(out, &format!("{prefix}.ff.fc2"), d * cfg.ff_mult, d);
}

/// Every learnable tensor of the model, in a stable order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut out = Vec::new();
    push_linear(&mut out, "patch", cfg.patch_size * cfg.patch_size * cfg.channels, d);
    out.push(ParamSpec {
        name: "label_embed.weight".into(),
        shape: vec![cfg.num_classes, d],
        init: Init::Xavier,
    });
    for s in 1..=cfg.scales {
        if s > 1 {
            push_linear(&mut out, &format!("scale{s}.merge"), cfg.gamma * cfg.gamma * d, d);
        }
        for b in 1..=cfg.blocks_per_scale {
            push_block(&mut out, &format!("scale{s}.enc{b}"), "spatial", "temporal", cfg);
        }
        push_norm(&mut out, &format!("scale{s}.enc_norm"), d);
        for b in 1..=cfg.blocks_per_scale {
            push_block(&mut out, &format!("scale{s}.dec{b}"), "self_attn", "cross_attn", cfg);
        }
    }
    push_norm(&mut out, "head_norm", d);
    push_linear(&mut out, "head", d, cfg.num_classes);
    out
}

/// All learnable weights keyed by parameter path.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Deterministic initialization from `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in param_specs(cfg) {
            let tensor = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::ones(&spec.shape),
                Init::Xavier => {
                    let (fan_in, fan_out) = (spec.shape[0], spec.shape[1]);
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Tensor::from_fn(&spec.shape, |_| rng.gen_range(-bound..bound))
                }
            };
            tensors.insert(spec.name, tensor);
        }
        Ok(Self { tensors })
    }

    pub fn from_named(named: impl IntoIterator<Item = (String, Tensor)>) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (name, t) in named {
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Param {
                    name,
                    msg: "duplicate parameter name".into(),
                });
            }
        }
        Ok(Self { tensors })
    }

    /// Total number of learnable scalars.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Checks that names and shapes match `cfg` exactly.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = param_specs(cfg);
        for spec in &specs {
            let t = self.tensors.get(&spec.name).ok_or_else(|| Error::Param {
                name: spec.name.clone(),
                msg: "missing from checkpoint".into(),
            })?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Param {
                    name: spec.name.clone(),
                    msg: format!("shape {:?}, expected {:?}", t.shape(), spec.shape),
                });
            }
        }
        if self.tensors.len() != specs.len() {
            let known: std::collections::BTreeSet<_> = specs.iter().map(|s| s.name.as_str()).collect();
            let extra = self
                .tensors
                .keys()
                .find(|k| !known.contains(k.as_str()))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Param {
                name: extra,
                msg: "not part of this model configuration".into(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        write_checkpoint(file, self.iter())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = BufReader::new(File::open(path)?);
        Self::from_named(read_checkpoint(file)?)
    }

    /// Records every tensor in `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Parameters recorded in a graph, addressed by name.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Binds graph nodes under parameter names.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Param {
            name: name.to_string(),
            msg: "not bound".into(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn linear(&self, prefix: &str) -> Result<Linear> {
        Ok(Linear {
            weight: self.var(&format!("{prefix}.weight"))?,
            bias: Some(self.var(&format!("{prefix}.bias"))?),
        })
    }

    pub fn attention(&self, prefix: &str) -> Result<AttentionParams> {
        Ok(AttentionParams {
            query: self.linear(&format!("{prefix}.q"))?,
            key: self.linear(&format!("{prefix}.k"))?,
            value: self.linear(&format!("{prefix}.v"))?,
            output: self.linear(&format!("{prefix}.o"))?,
        })
    }

    pub fn norm(&self, prefix: &str) -> Result<(Var, Var)> {
        Ok((
            self.var(&format!("{prefix}.gamma"))?,
            self.var(&format!("{prefix}.beta"))?,
        ))
    }
}
