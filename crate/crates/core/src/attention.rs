//! Attention variants over a recorded [`Graph`].
//!
//! Every variant shares the same logit construction,
//! `Q D K^T / (tau * sqrt(s))` with optional layer-normalized queries/keys
//! and an optional per-dimension temperature `D = diag(softplus(p))`, and
//! differs only in how the attention probabilities are applied to the
//! values:
//!
//! * standard: `A V`
//! * LASER: `log(A exp(V))`, evaluated as `log(A exp(V - m)) + m` with `m`
//!   the stopped column maximum of `V` rounded up to a multiple of `ln 2`,
//!   so `exp` never overflows
//! * naive LASER: `log(A exp(V))` evaluated literally (may overflow)
//! * diff / diff-LASER: the difference of two such terms built from two
//!   query/key projections, the second weighted by a learnable `lambda`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{pow2_ceil_shift, Graph, Scalar, Tensor, TensorError, Unary, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Standard,
    Laser,
    LaserNaive,
    Diff,
    DiffLaser,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Standard,
        Variant::Laser,
        Variant::LaserNaive,
        Variant::Diff,
        Variant::DiffLaser,
    ];

    pub fn is_diff(self) -> bool {
        matches!(self, Variant::Diff | Variant::DiffLaser)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::Laser => "laser",
            Variant::LaserNaive => "laser_naive",
            Variant::Diff => "diff",
            Variant::DiffLaser => "diff_laser",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = AttentionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| AttentionError::Config(format!("unknown attention variant `{s}`")))
    }
}

/// How attention probabilities are applied to the values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueTransform {
    Linear,
    /// `log(A exp(V - m)) + m`, `m` the stopped column max of `V`.
    Laser,
    /// `log(A exp(V))` without shifting.
    LaserNaive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionSpec {
    pub variant: Variant,
    /// Temperature; logits are divided by `tau * sqrt(head_size)`.
    pub tau: f64,
    /// Trainable per-dimension temperature `p` (one per head dimension).
    pub per_dim_temp: bool,
    /// Layer-normalize queries and keys before the logit product.
    pub qk_norm: bool,
    pub causal: bool,
    /// Initial value of the learnable `lambda` of the diff variants.
    pub lambda_init: f64,
}

impl Default for AttentionSpec {
    fn default() -> Self {
        Self {
            variant: Variant::Standard,
            tau: 1.0,
            per_dim_temp: false,
            qk_norm: false,
            causal: true,
            lambda_init: 0.5,
        }
    }
}

impl AttentionSpec {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AttentionError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(AttentionError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if (self.per_dim_temp || self.qk_norm) && !matches!(self.variant, Variant::Standard | Variant::Laser) {
            return Err(AttentionError::Config(format!(
                "per-dim temperature and qk-norm only compose with standard or laser, not {}",
                self.variant.name()
            )));
        }
        if !self.lambda_init.is_finite() {
            return Err(AttentionError::Config("lambda_init must be finite".into()));
        }
        Ok(())
    }

    pub fn transform(&self) -> ValueTransform {
        match self.variant {
            Variant::Standard | Variant::Diff => ValueTransform::Linear,
            Variant::Laser | Variant::DiffLaser => ValueTransform::Laser,
            Variant::LaserNaive => ValueTransform::LaserNaive,
        }
    }
}

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid attention config: {0}")]
    Config(String),
    #[error("{op} cannot run a `{got}` spec")]
    WrongVariant { op: &'static str, got: &'static str },
    #[error("mask does not match a causal spec")]
    MaskMismatch,
}

pub type Result<T, E = AttentionError> = std::result::Result<T, E>;

/// Queries, keys and values shaped `[N, heads, head_size]`.
#[derive(Debug, Clone)]
pub struct AttentionInputs<T> {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    /// Additive `N x N` mask of `0` / `-inf`, shared by every head.
    pub mask: Option<Tensor<T>>,
}

/// Two query/key projections sharing one value tensor.
#[derive(Debug, Clone)]
pub struct DualInputs<T> {
    pub q1: Var,
    pub k1: Var,
    pub q2: Var,
    pub k2: Var,
    pub v: Var,
    pub mask: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QkNormParams<P> {
    pub q_gain: P,
    pub q_bias: P,
    pub k_gain: P,
    pub k_bias: P,
}

/// Logit modifiers that carry trainable state.
#[derive(Debug, Clone, Copy, Default)]
pub struct Modifiers<'a> {
    /// `p` of `D = diag(softplus(p))`, length `head_size`.
    pub per_dim_temp: Option<Var>,
    pub qk_norm: Option<&'a QkNormParams<Var>>,
}

/// One recorded attention-probability matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnProbe {
    pub head: usize,
    /// `0` for the single map of standard/LASER, `0`/`1` for the two maps of
    /// the diff variants.
    pub map: usize,
    pub probs: Var,
}

pub const QK_NORM_EPS: f64 = 1e-6;

fn check_variant(spec: &AttentionSpec, op: &'static str, allowed: &[Variant]) -> Result<()> {
    if allowed.contains(&spec.variant) {
        Ok(())
    } else {
        Err(AttentionError::WrongVariant {
            op,
            got: spec.variant.name(),
        })
    }
}

fn dims3<T: Scalar>(g: &Graph<T>, v: Var) -> Result<(usize, usize, usize)> {
    match g.shape(v) {
        [n, h, s] => Ok((*n, *h, *s)),
        other => Err(TensorError::Rank {
            expected: 3,
            shape: other.to_vec(),
        }
        .into()),
    }
}

/// Lower-triangular additive mask: `0` where `i >= j`, `-inf` above the
/// diagonal.
pub fn causal_mask<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::from_fn([n, n], |i| if i[0] >= i[1] { T::zero() } else { T::neg_infinity() })
}

fn is_causal_mask<T: Scalar>(m: &Tensor<T>) -> bool {
    let Ok((n, c)) = m.dims2() else { return false };
    n == c
        && m.data().iter().enumerate().all(|(idx, &v)| {
            let (i, j) = (idx / n, idx % n);
            if i >= j {
                v == T::zero()
            } else {
                v == T::neg_infinity()
            }
        })
}

fn check_mask<T: Scalar>(mask: Option<&Tensor<T>>, n: usize, causal: bool) -> Result<()> {
    if let Some(m) = mask {
        if m.shape() != [n, n] {
            return Err(TensorError::ShapeMismatch {
                op: "attention mask",
                lhs: vec![n, n],
                rhs: m.shape().to_vec(),
            }
            .into());
        }
    }
    if causal {
        match mask {
            Some(m) if is_causal_mask(m) => {}
            _ => return Err(AttentionError::MaskMismatch),
        }
    }
    Ok(())
}

/// `Q D K^T / (tau sqrt(s))` for one head, `q` and `k` shaped `[N, s]`.
pub fn head_logits<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    spec: &AttentionSpec,
    mods: Modifiers<'_>,
) -> Result<Var> {
    let (_, s) = g.value(q).dims2()?;
    let (mut q, mut k) = (q, k);
    if let Some(p) = mods.qk_norm {
        let eps = T::lit(QK_NORM_EPS);
        q = g.layer_norm(q, p.q_gain, p.q_bias, eps)?;
        k = g.layer_norm(k, p.k_gain, p.k_bias, eps)?;
    }
    if let Some(p) = mods.per_dim_temp {
        let d = g.softplus(p)?;
        q = g.mul_row(q, d)?;
    }
    // Scaling q rather than the N x N logits is the same product, cheaper.
    let scale = T::one() / (T::lit(spec.tau) * T::from_usize(s).unwrap().sqrt());
    let q = g.scale(q, scale)?;
    Ok(g.matmul_nt(q, k)?)
}

/// Applies already-normalized attention probabilities `[N, N]` to values
/// `[N, s]`.
pub fn apply_probs<T: Scalar>(g: &mut Graph<T>, probs: Var, v: Var, transform: ValueTransform) -> Result<Var> {
    Ok(match transform {
        ValueTransform::Linear => g.matmul(probs, v)?,
        ValueTransform::Laser => {
            // The column max is rounded up to a multiple of ln 2 so that a
            // change of shift is an exact power-of-two rescaling. Rows that
            // cannot see the row holding the max then stay bit-identical.
            let m = g.column_max_stopped(v)?;
            let shifts: Vec<i64> = g.value(m).data().iter().map(|&x| pow2_ceil_shift(x)).collect();
            let e = g.exp_pow2_shifted(v, &shifts)?;
            let weighted = g.matmul(probs, e)?;
            g.log_pow2_unshifted(weighted, &shifts)?
        }
        ValueTransform::LaserNaive => {
            let e = g.exp(v)?;
            let weighted = g.matmul(probs, e)?;
            g.unary(weighted, Unary::LogUnchecked)?
        }
    })
}

/// Softmax over (masked) logits followed by [`apply_probs`]. Returns the
/// output and the probability node.
pub fn attend_from_logits<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    v: Var,
    mask: Option<&Tensor<T>>,
    transform: ValueTransform,
) -> Result<(Var, Var)> {
    let probs = g.row_softmax(logits, mask)?;
    Ok((apply_probs(g, probs, v, transform)?, probs))
}

fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
    let (n, h, s) = dims3(g, x)?;
    let flat = g.reshape(x, [n, h * s])?;
    (0..h).map(|i| Ok(g.slice_cols(flat, i * s, s)?)).collect()
}

fn merge_heads<T: Scalar>(g: &mut Graph<T>, heads: &[Var], n: usize, s: usize) -> Result<Var> {
    let flat = g.concat_cols(heads)?;
    Ok(g.reshape(flat, [n, heads.len(), s])?)
}

fn single_map<T: Scalar>(
    g: &mut Graph<T>,
    inp: &AttentionInputs<T>,
    spec: &AttentionSpec,
    mods: Modifiers<'_>,
    transform: ValueTransform,
    probes: &mut Vec<AttnProbe>,
) -> Result<Var> {
    let (n, h, s) = dims3(g, inp.q)?;
    for other in [inp.k, inp.v] {
        if g.shape(other) != [n, h, s] {
            return Err(TensorError::ShapeMismatch {
                op: "attention inputs",
                lhs: vec![n, h, s],
                rhs: g.shape(other).to_vec(),
            }
            .into());
        }
    }
    check_mask(inp.mask.as_ref(), n, spec.causal)?;
    let (qs, ks, vs) = (split_heads(g, inp.q)?, split_heads(g, inp.k)?, split_heads(g, inp.v)?);
    let mut outs = Vec::with_capacity(h);
    for head in 0..h {
        let logits = head_logits(g, qs[head], ks[head], spec, mods)?;
        let (o, probs) = attend_from_logits(g, logits, vs[head], inp.mask.as_ref(), transform)?;
        probes.push(AttnProbe { head, map: 0, probs });
        outs.push(o);
    }
    merge_heads(g, &outs, n, s)
}

/// `softmax(mask + Q K^T / (tau sqrt(s))) V` per head.
pub fn standard_attention<T: Scalar>(
    g: &mut Graph<T>,
    inp: &AttentionInputs<T>,
    spec: &AttentionSpec,
    mods: Modifiers<'_>,
) -> Result<Var> {
    check_variant(spec, "standard_attention", &[Variant::Standard])?;
    single_map(g, inp, spec, mods, ValueTransform::Linear, &mut Vec::new())
}

/// LASER attention `log(softmax(...) exp(V))` with the column-max shift.
pub fn laser_attention<T: Scalar>(
    g: &mut Graph<T>,
    inp: &AttentionInputs<T>,
    spec: &AttentionSpec,
    mods: Modifiers<'_>,
) -> Result<Var> {
    check_variant(spec, "laser_attention", &[Variant::Laser])?;
    single_map(g, inp, spec, mods, ValueTransform::Laser, &mut Vec::new())
}

/// LASER evaluated literally; overflow shows up as non-finite output rather
/// than an error.
pub fn laser_attention_naive<T: Scalar>(
    g: &mut Graph<T>,
    inp: &AttentionInputs<T>,
    spec: &AttentionSpec,
) -> Result<Var> {
    single_map(g, inp, spec, Modifiers::default(), ValueTransform::LaserNaive, &mut Vec::new())
}

fn dual_maps<T: Scalar>(
    g: &mut Graph<T>,
    inp: &DualInputs<T>,
    lambda: Var,
    transform: ValueTransform,
    spec: &AttentionSpec,
    probes: &mut Vec<AttnProbe>,
) -> Result<Var> {
    let (n, h, s) = dims3(g, inp.q1)?;
    for other in [inp.k1, inp.q2, inp.k2, inp.v] {
        if g.shape(other) != [n, h, s] {
            return Err(TensorError::ShapeMismatch {
                op: "diff attention inputs",
                lhs: vec![n, h, s],
                rhs: g.shape(other).to_vec(),
            }
            .into());
        }
    }
    check_mask(inp.mask.as_ref(), n, spec.causal)?;
    let q1 = split_heads(g, inp.q1)?;
    let k1 = split_heads(g, inp.k1)?;
    let q2 = split_heads(g, inp.q2)?;
    let k2 = split_heads(g, inp.k2)?;
    let vs = split_heads(g, inp.v)?;
    let mask = inp.mask.as_ref();
    let mut outs = Vec::with_capacity(h);
    for head in 0..h {
        let l1 = head_logits(g, q1[head], k1[head], spec, Modifiers::default())?;
        let l2 = head_logits(g, q2[head], k2[head], spec, Modifiers::default())?;
        let (t1, p1) = attend_from_logits(g, l1, vs[head], mask, transform)?;
        let (t2, p2) = attend_from_logits(g, l2, vs[head], mask, transform)?;
        probes.push(AttnProbe { head, map: 0, probs: p1 });
        probes.push(AttnProbe { head, map: 1, probs: p2 });
        let weighted = g.scale_by(t2, lambda)?;
        outs.push(g.sub(t1, weighted)?);
    }
    merge_heads(g, &outs, n, s)
}

/// Difference of two attention maps over shared values: `T1 - lambda T2`,
/// where each term is standard attention or (with `laser_mode`) LASER.
pub fn diff_attention<T: Scalar>(
    g: &mut Graph<T>,
    inp: &DualInputs<T>,
    lambda: Var,
    laser_mode: bool,
    spec: &AttentionSpec,
) -> Result<Var> {
    let transform = if laser_mode {
        ValueTransform::Laser
    } else {
        ValueTransform::Linear
    };
    dual_maps(g, inp, lambda, transform, spec, &mut Vec::new())
}

/// Weights of one multi-head attention block. `P` is [`Tensor`] for stored
/// parameters and [`Var`] once they are recorded on a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<P> {
    pub w_q: P,
    pub w_k: P,
    pub w_v: P,
    pub w_o: P,
    /// Second query/key projection and `lambda` of the diff variants.
    pub diff: Option<DiffParams<P>>,
    pub per_dim_temp: Option<P>,
    pub qk_norm: Option<QkNormParams<P>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffParams<P> {
    pub w_q2: P,
    pub w_k2: P,
    pub lambda: P,
}

impl<P> AttentionParams<P> {
    /// Maps every tensor in canonical order, passing its dotted name.
    pub fn map_named<'a, Q>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a P) -> Q) -> AttentionParams<Q> {
        let name = |n: &str| format!("{prefix}{n}");
        AttentionParams {
            w_q: f(&name("w_q"), &self.w_q),
            w_k: f(&name("w_k"), &self.w_k),
            w_v: f(&name("w_v"), &self.w_v),
            w_o: f(&name("w_o"), &self.w_o),
            diff: self.diff.as_ref().map(|d| DiffParams {
                w_q2: f(&name("w_q2"), &d.w_q2),
                w_k2: f(&name("w_k2"), &d.w_k2),
                lambda: f(&name("lambda"), &d.lambda),
            }),
            per_dim_temp: self.per_dim_temp.as_ref().map(|p| f(&name("per_dim_temp"), p)),
            qk_norm: self.qk_norm.as_ref().map(|p| QkNormParams {
                q_gain: f(&name("q_norm.gain"), &p.q_gain),
                q_bias: f(&name("q_norm.bias"), &p.q_bias),
                k_gain: f(&name("k_norm.gain"), &p.k_gain),
                k_bias: f(&name("k_norm.bias"), &p.k_bias),
            }),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        let name = |n: &str| format!("{prefix}{n}");
        f(&name("w_q"), &mut self.w_q);
        f(&name("w_k"), &mut self.w_k);
        f(&name("w_v"), &mut self.w_v);
        f(&name("w_o"), &mut self.w_o);
        if let Some(d) = &mut self.diff {
            f(&name("w_q2"), &mut d.w_q2);
            f(&name("w_k2"), &mut d.w_k2);
            f(&name("lambda"), &mut d.lambda);
        }
        if let Some(p) = &mut self.per_dim_temp {
            f(&name("per_dim_temp"), p);
        }
        if let Some(p) = &mut self.qk_norm {
            f(&name("q_norm.gain"), &mut p.q_gain);
            f(&name("q_norm.bias"), &mut p.q_bias);
            f(&name("k_norm.gain"), &mut p.k_gain);
            f(&name("k_norm.bias"), &mut p.k_bias);
        }
    }
}

/// Initial `p` such that `softplus(p) = 1`, so a fresh per-dim temperature
/// starts out as plain scaled dot-product attention.
pub fn per_dim_temp_init() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

impl<T: Scalar> AttentionParams<Tensor<T>> {
    /// Fresh parameters: projections drawn by `normal(rows, cols, std)`,
    /// `w_o` with `out_std`, modifiers at their neutral values.
    pub fn init(
        d_model: usize,
        head_size: usize,
        spec: &AttentionSpec,
        mut normal: impl FnMut(usize, usize, f64) -> Tensor<T>,
        std: f64,
        out_std: f64,
    ) -> Self {
        let d = d_model;
        AttentionParams {
            w_q: normal(d, d, std),
            w_k: normal(d, d, std),
            w_v: normal(d, d, std),
            w_o: normal(d, d, out_std),
            diff: spec.variant.is_diff().then(|| DiffParams {
                w_q2: normal(d, d, std),
                w_k2: normal(d, d, std),
                lambda: Tensor::scalar(T::lit(spec.lambda_init)),
            }),
            per_dim_temp: spec
                .per_dim_temp
                .then(|| Tensor::full([head_size], T::lit(per_dim_temp_init()))),
            qk_norm: spec.qk_norm.then(|| QkNormParams {
                q_gain: Tensor::ones([head_size]),
                q_bias: Tensor::zeros([head_size]),
                k_gain: Tensor::ones([head_size]),
                k_bias: Tensor::zeros([head_size]),
            }),
        }
    }
}

/// Result of [`multi_head_attention`]: the `[N, d]` output and every
/// recorded attention-probability matrix.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub out: Var,
    pub probes: Vec<AttnProbe>,
}

/// Projects `x` (`[N, d]`) into `heads` query/key/value heads, applies the
/// spec's attention per head, concatenates and projects with `W_O`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    params: &AttentionParams<Var>,
    heads: usize,
    spec: &AttentionSpec,
) -> Result<AttentionOutput> {
    spec.validate()?;
    let (n, d) = g.value(x).dims2()?;
    if heads == 0 || d % heads != 0 {
        return Err(AttentionError::Config(format!(
            "model dim {d} is not divisible into {heads} heads"
        )));
    }
    let s = d / heads;
    let mask = spec.causal.then(|| causal_mask::<T>(n));
    let project = |g: &mut Graph<T>, w: Var| -> Result<Var> {
        let p = g.matmul(x, w)?;
        Ok(g.reshape(p, [n, heads, s])?)
    };
    let q = project(g, params.w_q)?;
    let k = project(g, params.w_k)?;
    let v = project(g, params.w_v)?;
    let mut probes = Vec::new();
    let attended = if spec.variant.is_diff() {
        let diff = params
            .diff
            .as_ref()
            .ok_or_else(|| AttentionError::Config("diff variant needs a second projection".into()))?;
        let inp = DualInputs {
            q1: q,
            k1: k,
            q2: project(g, diff.w_q2)?,
            k2: project(g, diff.w_k2)?,
            v,
            mask,
        };
        dual_maps(g, &inp, diff.lambda, spec.transform(), spec, &mut probes)?
    } else {
        let inp = AttentionInputs { q, k, v, mask };
        let mods = Modifiers {
            per_dim_temp: params.per_dim_temp,
            qk_norm: params.qk_norm.as_ref(),
        };
        single_map(g, &inp, spec, mods, spec.transform(), &mut probes)?
    };
    let flat = g.reshape(attended, [n, d])?;
    let out = g.matmul(flat, params.w_o)?;
    Ok(AttentionOutput { out, probes })
}
