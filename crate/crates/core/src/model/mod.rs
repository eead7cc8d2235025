//! Decoder-only transformer language model.
//!
//! Pre-norm blocks `x + attn(LN(x))`, `x + mlp(LN(x))` with a ReLU MLP,
//! learned absolute position embeddings, a final layer norm and an untied
//! (optionally tied) output projection.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointError, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{multi_head_attention, AttentionError, AttentionParams, AttentionSpec, AttnProbe};
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

pub use crate::attention::causal_mask;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub attention: AttentionSpec,
    pub tie_embeddings: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d_model: 128,
            heads: 4,
            mlp_hidden: 512,
            vocab_size: 256,
            max_seq_len: 128,
            attention: AttentionSpec::default(),
            tie_embeddings: false,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn head_size(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.layers == 0 || self.d_model == 0 || self.mlp_hidden == 0 {
            return bad("layers, d_model and mlp_hidden must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        if self.d_model < 2 {
            return bad("d_model must be at least 2 for layer norm".into());
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2".into());
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be at least 2".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std must be positive, got {}", self.init_std));
        }
        self.attention.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<P> {
    pub gain: P,
    pub bias: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<P> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<P> {
    pub attn_norm: NormParams<P>,
    pub attn: AttentionParams<P>,
    pub mlp_norm: NormParams<P>,
    pub mlp: MlpParams<P>,
}

/// Every weight of the model. `P` is [`Tensor`] for stored values (and
/// gradients or optimizer moments of the same layout) and [`Var`] once
/// recorded on a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<P> {
    pub tok_emb: P,
    pub pos_emb: P,
    pub layers: Vec<LayerParams<P>>,
    pub final_norm: NormParams<P>,
    /// `None` when the output projection is tied to `tok_emb`.
    pub lm_head: Option<P>,
}

impl<P> NormParams<P> {
    fn map_named<'a, Q>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a P) -> Q) -> NormParams<Q> {
        NormParams {
            gain: f(&format!("{prefix}gain"), &self.gain),
            bias: f(&format!("{prefix}bias"), &self.bias),
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&format!("{prefix}gain"), &mut self.gain);
        f(&format!("{prefix}bias"), &mut self.bias);
    }
}

impl<P> ModelParams<P> {
    /// Maps every tensor in canonical order, passing its dotted name.
    pub fn map_named<'a, Q>(&'a self, mut f: impl FnMut(&str, &'a P) -> Q) -> ModelParams<Q> {
        let f = &mut f;
        ModelParams {
            tok_emb: f("tok_emb", &self.tok_emb),
            pos_emb: f("pos_emb", &self.pos_emb),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| LayerParams {
                    attn_norm: l.attn_norm.map_named(&format!("layers.{i}.attn_norm."), f),
                    attn: l.attn.map_named(&format!("layers.{i}.attn."), f),
                    mlp_norm: l.mlp_norm.map_named(&format!("layers.{i}.mlp_norm."), f),
                    mlp: MlpParams {
                        w1: f(&format!("layers.{i}.mlp.w1"), &l.mlp.w1),
                        b1: f(&format!("layers.{i}.mlp.b1"), &l.mlp.b1),
                        w2: f(&format!("layers.{i}.mlp.w2"), &l.mlp.w2),
                        b2: f(&format!("layers.{i}.mlp.b2"), &l.mlp.b2),
                    },
                })
                .collect(),
            final_norm: self.final_norm.map_named("final_norm.", f),
            lm_head: self.lm_head.as_ref().map(|p| f("lm_head", p)),
        }
    }

    pub fn map<'a, Q>(&'a self, mut f: impl FnMut(&'a P) -> Q) -> ModelParams<Q> {
        self.map_named(|_, p| f(p))
    }

    /// Visits every tensor mutably, in the same order as [`Self::map_named`].
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut P)) {
        let f = &mut f;
        f("tok_emb", &mut self.tok_emb);
        f("pos_emb", &mut self.pos_emb);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.attn_norm.for_each_mut(&format!("layers.{i}.attn_norm."), f);
            l.attn.for_each_mut(&format!("layers.{i}.attn."), f);
            l.mlp_norm.for_each_mut(&format!("layers.{i}.mlp_norm."), f);
            f(&format!("layers.{i}.mlp.w1"), &mut l.mlp.w1);
            f(&format!("layers.{i}.mlp.b1"), &mut l.mlp.b1);
            f(&format!("layers.{i}.mlp.w2"), &mut l.mlp.w2);
            f(&format!("layers.{i}.mlp.b2"), &mut l.mlp.b2);
        }
        self.final_norm.for_each_mut("final_norm.", f);
        if let Some(p) = &mut self.lm_head {
            f("lm_head", p);
        }
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.map_named(|name, p| out.push((name.to_string(), p)));
        out
    }
}

impl<T: Scalar> ModelParams<Tensor<T>> {
    pub fn zeros_like(&self) -> Self {
        self.map(|t| Tensor::zeros(t.shape().to_vec()))
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every tensor as a parameter leaf of `g`.
    pub fn record(&self, g: &mut Graph<T>) -> ModelParams<Var> {
        self.map(|t| g.param(t.clone()))
    }

    /// Global L2 norm over all tensors.
    pub fn l2_norm(&self) -> f64 {
        self.named()
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .map(|x| {
                let v = x.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<Tensor<U>> {
        self.map(Tensor::cast)
    }
}

/// Attention probabilities of one map of one head of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerProbe {
    pub layer: usize,
    pub probe: AttnProbe,
}

/// Output of [`Model::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[N, vocab]`
    pub logits: Var,
    pub probes: Vec<LayerProbe>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    /// Gaussian init with std `init_std`; the attention output projection and
    /// the second MLP matrix use `init_std / sqrt(2 layers)`. Norm gains start
    /// at one and every bias at zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |rows: usize, cols: usize, std: f64| -> Tensor<T> {
            let dist = Normal::new(0.0, std).expect("positive std");
            let data = (0..rows * cols).map(|_| T::lit(dist.sample(&mut rng))).collect();
            Tensor::new([rows, cols], data).expect("shape matches length")
        };
        let c = &config;
        let (d, std) = (c.d_model, c.init_std);
        let out_std = std / (2.0 * c.layers as f64).sqrt();
        let norm = || NormParams {
            gain: Tensor::ones([d]),
            bias: Tensor::zeros([d]),
        };
        let tok_emb = normal(c.vocab_size, d, std);
        let pos_emb = normal(c.max_seq_len, d, std);
        let mut layers = Vec::with_capacity(c.layers);
        for _ in 0..c.layers {
            let attn = AttentionParams::init(d, c.head_size(), &c.attention, &mut normal, std, out_std);
            let mlp = MlpParams {
                w1: normal(d, c.mlp_hidden, std),
                b1: Tensor::zeros([c.mlp_hidden]),
                w2: normal(c.mlp_hidden, d, out_std),
                b2: Tensor::zeros([d]),
            };
            layers.push(LayerParams {
                attn_norm: norm(),
                attn,
                mlp_norm: norm(),
                mlp,
            });
        }
        let lm_head = (!c.tie_embeddings).then(|| normal(d, c.vocab_size, std));
        let params = ModelParams {
            tok_emb,
            pos_emb,
            layers,
            final_norm: norm(),
            lm_head,
        };
        Ok(Self { config, params })
    }

    /// Checks that `params` has exactly the layout `config` implies.
    pub fn from_parts(config: ModelConfig, params: ModelParams<Tensor<T>>) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        let want = reference.params.named();
        let got = params.named();
        if want.len() != got.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, got {}",
                want.len(),
                got.len()
            )));
        }
        for ((wn, wt), (gn, gt)) in want.iter().zip(&got) {
            if wn != gn || wt.shape() != gt.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {gn} {:?} does not match expected {wn} {:?}",
                    gt.shape(),
                    wt.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let c = &self.config;
        if tokens.is_empty() || tokens.len() > c.max_seq_len {
            return Err(ModelError::Input(format!(
                "sequence length {} outside 1..={}",
                tokens.len(),
                c.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(ModelError::Input(format!("token {t} outside vocabulary of {}", c.vocab_size)));
        }
        Ok(())
    }

    /// Records the forward pass over `tokens` using parameters already on `g`.
    pub fn forward(&self, g: &mut Graph<T>, params: &ModelParams<Var>, tokens: &[usize]) -> Result<Forward> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let n = tokens.len();
        let positions: Vec<usize> = (0..n).collect();
        let tok = g.gather_rows(params.tok_emb, tokens)?;
        let pos = g.gather_rows(params.pos_emb, &positions)?;
        let mut x = g.add(tok, pos)?;
        let mut probes = Vec::new();
        for (layer, lp) in params.layers.iter().enumerate() {
            let (y, layer_probes) = transformer_layer(g, x, lp, c)?;
            x = y;
            probes.extend(layer_probes.into_iter().map(|probe| LayerProbe { layer, probe }));
        }
        let h = g.layer_norm(x, params.final_norm.gain, params.final_norm.bias, T::lit(LAYER_NORM_EPS))?;
        let logits = match params.lm_head {
            Some(w) => g.matmul(h, w)?,
            None => g.matmul_nt(h, params.tok_emb)?,
        };
        Ok(Forward { logits, probes })
    }

    /// Mean next-token cross-entropy over positions `0..N-1`.
    pub fn loss(g: &mut Graph<T>, logits: Var, tokens: &[usize]) -> Result<Var> {
        if tokens.len() < 2 {
            return Err(ModelError::Input("need at least 2 tokens for a next-token loss".into()));
        }
        let targets: Vec<Option<usize>> = tokens[1..].iter().map(|&t| Some(t)).chain([None]).collect();
        Ok(g.cross_entropy(logits, &targets)?)
    }

    /// Loss and `[N, vocab]` logits, without gradients.
    pub fn forward_loss(&self, tokens: &[usize]) -> Result<(T, Tensor<T>)> {
        let mut g = Graph::new();
        let params = self.params.map(|t| g.constant(t.clone()));
        let fwd = self.forward(&mut g, &params, tokens)?;
        let loss = Self::loss(&mut g, fwd.logits, tokens)?;
        Ok((g.value(loss).data()[0], g.value(fwd.logits).clone()))
    }

    /// Logits only; works for a single token too.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let params = self.params.map(|t| g.constant(t.clone()));
        let fwd = self.forward(&mut g, &params, tokens)?;
        Ok(g.value(fwd.logits).clone())
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grads(&self, tokens: &[usize]) -> Result<(T, ModelParams<Tensor<T>>)> {
        self.loss_and_grads_in(&mut Graph::new(), tokens)
    }

    /// As [`Self::loss_and_grads`] on a caller-supplied (e.g. fault-injected)
    /// graph.
    pub fn loss_and_grads_in(&self, g: &mut Graph<T>, tokens: &[usize]) -> Result<(T, ModelParams<Tensor<T>>)> {
        let params = self.params.record(g);
        let fwd = self.forward(g, &params, tokens)?;
        let loss = Self::loss(g, fwd.logits, tokens)?;
        let mut grads = g.backward(loss)?;
        let out = params.map(|v| grads.remove(*v).expect("every recorded param has a gradient"));
        Ok((g.value(loss).data()[0], out))
    }
}

/// One pre-norm block: `x + attn(LN(x))` then `x + mlp(LN(x))`.
pub fn transformer_layer<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    lp: &LayerParams<Var>,
    config: &ModelConfig,
) -> Result<(Var, Vec<AttnProbe>)> {
    let eps = T::lit(LAYER_NORM_EPS);
    let h = g.layer_norm(x, lp.attn_norm.gain, lp.attn_norm.bias, eps)?;
    let attn = multi_head_attention(g, h, &lp.attn, config.heads, &config.attention)?;
    let x = g.add(x, attn.out)?;
    let h = g.layer_norm(x, lp.mlp_norm.gain, lp.mlp_norm.bias, eps)?;
    let z = g.matmul(h, lp.mlp.w1)?;
    let z = g.add_row(z, lp.mlp.b1)?;
    let z = g.relu(z)?;
    let z = g.matmul(z, lp.mlp.w2)?;
    let z = g.add_row(z, lp.mlp.b2)?;
    Ok((g.add(x, z)?, attn.probes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Variant;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            mlp_hidden: 16,
            vocab_size: 11,
            max_seq_len: 6,
            attention: AttentionSpec::new(variant),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::<f32>::init(tiny(Variant::Laser), 3).unwrap();
        let b = Model::<f32>::init(tiny(Variant::Laser), 3).unwrap();
        let c = Model::<f32>::init(tiny(Variant::Laser), 4).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn parameter_layout() {
        let m = Model::<f64>::init(tiny(Variant::Diff), 0).unwrap();
        let names: Vec<String> = m.params.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "tok_emb");
        assert!(names.contains(&"layers.1.attn.lambda".to_string()));
        assert_eq!(names.last().unwrap(), "lm_head");
        let d = 8;
        let per_layer = 4 * d * d + 2 * d * d + 1 + 4 * d + 2 * d * 16 + 16 + d;
        assert_eq!(m.params.num_params(), 11 * d + 6 * d + 2 * per_layer + 2 * d + d * 11);

        let mut tied = tiny(Variant::Standard);
        tied.tie_embeddings = true;
        assert!(Model::<f64>::init(tied, 0).unwrap().params.lm_head.is_none());
    }

    #[test]
    fn output_projection_init_is_scaled() {
        let mut c = tiny(Variant::Standard);
        c.d_model = 64;
        c.mlp_hidden = 256;
        c.heads = 4;
        c.layers = 8;
        let m = Model::<f64>::init(c, 1).unwrap();
        let std = |t: &Tensor<f64>| (t.data().iter().map(|x| x * x).sum::<f64>() / t.numel() as f64).sqrt();
        let wo = std(&m.params.layers[0].attn.w_o);
        let wq = std(&m.params.layers[0].attn.w_q);
        assert!((wq - 0.02).abs() < 0.002, "{wq}");
        assert!((wo - 0.02 / 4.0).abs() < 0.0005, "{wo}");
    }

    #[test]
    fn shapes_and_input_checks() {
        let m = Model::<f64>::init(tiny(Variant::Laser), 0).unwrap();
        let (loss, logits) = m.forward_loss(&[1, 2, 3]).unwrap();
        assert_eq!(logits.shape(), &[3, 11]);
        // Near-uniform predictions at init.
        assert!((loss - 11f64.ln()).abs() < 0.1);
        assert!(m.forward_loss(&[1]).is_err());
        assert_eq!(m.logits(&[1]).unwrap().shape(), &[1, 11]);
        assert!(m.forward_loss(&[1, 11]).is_err());
        assert!(m.forward_loss(&[0; 7]).is_err());
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut c = tiny(Variant::Standard);
        c.heads = 3;
        assert!(Model::<f64>::init(c, 0).is_err());
        let mut c = tiny(Variant::Diff);
        c.attention.per_dim_temp = true;
        assert!(Model::<f64>::init(c, 0).is_err());
    }

    #[test]
    fn gradients_cover_every_parameter() {
        let m = Model::<f64>::init(tiny(Variant::DiffLaser), 0).unwrap();
        let (loss, grads) = m.loss_and_grads(&[4, 1, 7, 7, 0]).unwrap();
        assert!(loss.is_finite());
        let named = grads.named();
        assert_eq!(named.len(), m.params.named().len());
        assert!(grads.l2_norm() > 0.0);
        // pos_emb rows past the sequence get nothing.
        assert!(grads.pos_emb.row(5).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn from_parts_checks_layout() {
        let m = Model::<f64>::init(tiny(Variant::Standard), 0).unwrap();
        assert!(Model::from_parts(m.config.clone(), m.params.clone()).is_ok());
        let other = Model::<f64>::init(tiny(Variant::Diff), 0).unwrap();
        assert!(Model::from_parts(m.config.clone(), other.params).is_err());
    }
}
