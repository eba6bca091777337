//! Learnable weights of the token encoder, context predictor and token
//! decoder, stored as one ordered list of named tensors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::{CInit, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{BlockParams, EmbeddingParams, NormParams};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Handles to every parameter, generic over the handle type: `usize` indexes
/// into [`ModelParams`], `Var` refers to a bound tape leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamIndex<H> {
    pub embed: EmbeddingParams<H>,
    pub encoder: Vec<BlockParams<H>>,
    pub predictor: Vec<BlockParams<H>>,
    pub predictor_norm: Option<NormParams<H>>,
    pub c_init: Option<H>,
    pub decoder: Vec<BlockParams<H>>,
    pub final_norm: NormParams<H>,
    pub head: Option<H>,
}

impl<H: Copy> ParamIndex<H> {
    pub fn map<U>(&self, mut f: impl FnMut(H) -> U) -> ParamIndex<U> {
        ParamIndex {
            embed: EmbeddingParams {
                token: f(self.embed.token),
                position: f(self.embed.position),
            },
            encoder: self.encoder.iter().map(|b| b.map(&mut f)).collect(),
            predictor: self.predictor.iter().map(|b| b.map(&mut f)).collect(),
            predictor_norm: self.predictor_norm.map(|n| n.map(&mut f)),
            c_init: self.c_init.map(&mut f),
            decoder: self.decoder.iter().map(|b| b.map(&mut f)).collect(),
            final_norm: self.final_norm.map(&mut f),
            head: self.head.map(&mut f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: ParamIndex<usize>,
}

/// Parameters bound to a tape for one forward pass.
pub struct BoundParams {
    pub vars: Vec<Var>,
    pub index: ParamIndex<Var>,
}

impl BoundParams {
    /// Gradients in parameter order; zeros where nothing flowed.
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| tape.grad_tensor(v)).collect()
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

struct Builder<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    /// `(seed, init_std)`; `None` builds an all-zero skeleton.
    rng: Option<(u64, f64)>,
}

/// Independent stream per parameter name, so a tensor's initial value does
/// not depend on which other tensors the configuration contains.
fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

impl<T: Scalar> Builder<T> {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let n: usize = shape.iter().product();
        let data = match (init, self.rng) {
            (Init::Normal(std), Some((seed, _))) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                let mut rng = tensor_rng(seed, &name);
                (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
            }
            (Init::Ones, _) => vec![T::one(); n],
            _ => vec![T::zero(); n],
        };
        self.names.push(name);
        self.tensors.push(Tensor::new(shape, data).expect("shape"));
        self.tensors.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormParams<usize> {
        NormParams {
            gain: self.add(format!("{prefix}.gain"), vec![d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), vec![d], Init::Zeros),
        }
    }

    fn block(&mut self, prefix: &str, d: usize, stack_depth: usize) -> BlockParams<usize> {
        let std = self.rng.as_ref().map(|(_, s)| *s).unwrap_or(0.0);
        let resid_std = std / (2.0 * stack_depth.max(1) as f64).sqrt();
        let w = Init::Normal(std);
        let wr = Init::Normal(resid_std);
        BlockParams {
            ln1: self.norm(&format!("{prefix}.ln1"), d),
            w_q: self.add(format!("{prefix}.attn.w_q"), vec![d, d], w),
            w_k: self.add(format!("{prefix}.attn.w_k"), vec![d, d], w),
            w_v: self.add(format!("{prefix}.attn.w_v"), vec![d, d], w),
            w_o: self.add(format!("{prefix}.attn.w_o"), vec![d, d], wr),
            ln2: self.norm(&format!("{prefix}.ln2"), d),
            w_fc: self.add(format!("{prefix}.mlp.w_fc"), vec![d, 4 * d], w),
            b_fc: self.add(format!("{prefix}.mlp.b_fc"), vec![4 * d], Init::Zeros),
            w_proj: self.add(format!("{prefix}.mlp.w_proj"), vec![4 * d, d], wr),
            b_proj: self.add(format!("{prefix}.mlp.b_proj"), vec![d], Init::Zeros),
        }
    }
}

fn build<T: Scalar>(config: &ModelConfig, seeded: bool) -> (Vec<String>, Vec<Tensor<T>>, ParamIndex<usize>) {
    let d = config.d_model;
    let mut b = Builder {
        names: Vec::new(),
        tensors: Vec::new(),
        rng: seeded.then_some((config.seed, config.init_std)),
    };
    let w = Init::Normal(config.init_std);
    let embed = EmbeddingParams {
        token: b.add("embed.token".into(), vec![config.vocab_size, d], w),
        position: b.add("embed.position".into(), vec![config.max_seq_len, d], w),
    };
    let backbone = config.backbone_layers();
    let encoder = (0..config.n_enc_layers)
        .map(|i| b.block(&format!("encoder.{i}"), d, backbone))
        .collect();
    let ctx_layers = config.effective_ctx_layers();
    let predictor = (0..ctx_layers)
        .map(|i| b.block(&format!("predictor.{i}"), d, ctx_layers))
        .collect();
    let predictor_norm = (ctx_layers > 0).then(|| b.norm("predictor.norm", d));
    let c_init = (config.is_contextlm() && config.c_init == CInit::Learned)
        .then(|| b.add("c_init".into(), vec![1, d], w));
    let decoder = (0..config.n_dec_layers)
        .map(|i| b.block(&format!("decoder.{i}"), d, backbone))
        .collect();
    let final_norm = b.norm("final_norm", d);
    let head = (!config.tie_embeddings).then(|| b.add("head".into(), vec![d, config.vocab_size], w));
    let index = ParamIndex {
        embed,
        encoder,
        predictor,
        predictor_norm,
        c_init,
        decoder,
        final_norm,
        head,
    };
    (b.names, b.tensors, index)
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters: weights `N(0, init_std)`, residual output projections
    /// scaled by `1/√(2·depth)`, layer-norm gains one, biases zero.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (names, tensors, index) = build(config, true);
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
            index,
        })
    }

    /// All-zero parameters with the layout `config` instantiates.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (names, tensors, index) = build(config, false);
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
            index,
        })
    }

    /// Reassembles parameters from named tensors, checking that names and
    /// shapes match what `config` instantiates.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (names, expected, index) = build::<T>(config, false);
        if named.len() != names.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, found {}",
                names.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), (want_name, want)) in named.into_iter().zip(names.iter().zip(&expected)) {
            if &name != want_name || t.shape() != want.shape() {
                return Err(Error::Contract(format!(
                    "parameter `{name}` {:?} does not match expected `{want_name}` {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn index(&self) -> &ParamIndex<usize> {
        &self.index
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> BoundParams {
        let vars: Vec<Var> = self.tensors.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect();
        let index = self.index.map(|i| vars[i]);
        BoundParams { vars, index }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Same weights under a different config that instantiates a subset or
    /// superset of tensors; shared names are copied, the rest freshly
    /// initialised from `config.seed`.
    pub fn transplant(&self, config: &ModelConfig) -> Result<ModelParams<T>> {
        let mut out = ModelParams::<T>::init(config)?;
        for (name, t) in self.iter() {
            if let Some(dst) = out.get_mut(name) {
                if dst.shape() == t.shape() {
                    *dst = t.clone();
                }
            }
        }
        Ok(out)
    }
}

/// Whether decoupled weight decay applies: matrices only, never layer-norm
/// gains/biases, MLP biases, the position table or a learned `c_init`.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".gain")
        || name.ends_with(".bias")
        || name.ends_with(".b_fc")
        || name.ends_with(".b_proj")
        || name == "embed.position"
        || name == "c_init")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Mode;

    #[test]
    fn shared_tensors_initialize_identically_across_modes() {
        let ctx = ModelConfig::tiny();
        let base = ModelConfig {
            mode: Mode::Baseline,
            ..ctx.clone()
        };
        let a = ModelParams::<f64>::init(&ctx).unwrap();
        let b = ModelParams::<f64>::init(&base).unwrap();
        for (name, t) in b.iter() {
            assert_eq!(a.get(name).unwrap().data(), t.data(), "{name}");
        }
    }

    #[test]
    fn init_is_seeded() {
        let c = ModelConfig::tiny();
        let a = ModelParams::<f32>::init(&c).unwrap();
        let b = ModelParams::<f32>::init(&c).unwrap();
        assert_eq!(a, b);
        let other = ModelParams::<f32>::init(&ModelConfig { seed: 1, ..c }).unwrap();
        assert_ne!(a.tensors()[0], other.tensors()[0]);
    }

    #[test]
    fn baseline_has_no_predictor() {
        let c = ModelConfig {
            mode: Mode::Baseline,
            ..ModelConfig::tiny()
        };
        let p = ModelParams::<f32>::init(&c).unwrap();
        assert!(p.names().iter().all(|n| !n.starts_with("predictor")));
        assert!(p.index().predictor_norm.is_none());
    }

    #[test]
    fn untied_head_and_learned_init() {
        let c = ModelConfig {
            tie_embeddings: false,
            c_init: CInit::Learned,
            ..ModelConfig::tiny()
        };
        let p = ModelParams::<f64>::init(&c).unwrap();
        assert_eq!(p.get("head").unwrap().shape(), &[8, 16]);
        assert_eq!(p.get("c_init").unwrap().shape(), &[1, 8]);
    }

    #[test]
    fn from_named_round_trip() {
        let c = ModelConfig::tiny();
        let p = ModelParams::<f64>::init(&c).unwrap();
        let named = p.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        assert_eq!(ModelParams::from_named(&c, named).unwrap(), p);
        let mut bad: Vec<_> = p.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        bad.swap(0, 1);
        assert!(ModelParams::from_named(&c, bad).is_err());
    }

    #[test]
    fn decay_mask() {
        assert!(decays("decoder.0.attn.w_q"));
        assert!(decays("embed.token"));
        assert!(!decays("decoder.0.ln1.gain"));
        assert!(!decays("final_norm.bias"));
        assert!(!decays("decoder.1.mlp.b_fc"));
        assert!(!decays("embed.position"));
    }
}
