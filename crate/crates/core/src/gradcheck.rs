//! Gradient-check suites: every differentiable graph op, the attention
//! variants and full models against central finite differences, plus the
//! closed-form softmax and two-token Jacobians against autodiff.

use std::error::Error;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{laser_jacobian_element_2x1, softmax_jacobian, standard_jacobian_element_2x1};
use crate::attention::{apply_probs, causal_mask, multi_head_attention, AttentionParams, AttentionSpec, ValueTransform, Variant};
use crate::model::{Model, ModelConfig};
use crate::tensor::{finite_difference_gradient, max_abs_diff, max_rel_err_floored, Fault, Graph, Tensor, Var};

type BuildResult = std::result::Result<Var, Box<dyn Error + Send + Sync>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Ops,
    Attention,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Ops, Scope::Attention, Scope::Model];
}

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
pub const OPS_TOL: f64 = 1e-6;
pub const ATTENTION_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-5;
pub const JACOBIAN_TOL: f64 = 1e-12;
pub const CLOSED_FORM_TOL: f64 = 1e-10;
/// Relative errors are taken against at least this fraction of the largest
/// gradient entry in the same check.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub scope: Scope,
    /// What `observed` measures, e.g. `max_rel_err`.
    pub metric: String,
    pub tolerance: f64,
    /// `NaN` when the check could not be evaluated (serialized as `null`).
    pub observed: Option<f64>,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub fault: Option<String>,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Backward-pass defect injected into every analytic gradient.
    pub fault: Option<Fault>,
}

fn graph(fault: Option<Fault>) -> Graph<f64> {
    fault.map_or_else(Graph::new, Graph::with_fault)
}

/// Fixed, non-uniform cotangent so that every output element matters.
fn probe_weights(shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), {
        let mut k = 0usize;
        move |_| {
            k += 1;
            (1.7 * k as f64 + 0.3).sin()
        }
    })
}

fn weighted_sum(g: &mut Graph<f64>, y: Var) -> BuildResult {
    let w = g.constant(probe_weights(g.shape(y)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p)?)
}

fn record(name: impl Into<String>, scope: Scope, metric: &str, tolerance: f64, outcome: std::result::Result<f64, String>) -> CheckResult {
    let (observed, detail) = match outcome {
        Ok(x) => (x, None),
        Err(e) => (f64::NAN, Some(e)),
    };
    CheckResult {
        name: name.into(),
        scope,
        metric: metric.into(),
        tolerance,
        observed: observed.is_finite().then_some(observed),
        passed: observed <= tolerance,
        detail,
    }
}

/// Per-tensor normwise relative errors of `analytic` against `fd`, with the
/// denominator floored at [`REL_FLOOR`] times the largest entry of either.
fn floored_errors(pairs: &[(&Tensor<f64>, Tensor<f64>)]) -> Vec<f64> {
    let global = pairs
        .iter()
        .map(|(a, b)| a.max_abs().max(b.max_abs()))
        .fold(0.0, f64::max);
    pairs.iter().map(|(a, b)| max_rel_err_floored(a, b, REL_FLOOR * global)).collect()
}

/// Largest normwise relative error between backward() and central
/// differences, over every input of `build`.
pub fn compare_with_fd(
    inputs: &[Tensor<f64>],
    fault: Option<Fault>,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> BuildResult,
) -> std::result::Result<f64, String> {
    let mut g = graph(fault);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).map_err(|e| e.to_string())?;
    let grads = g.backward(out).map_err(|e| e.to_string())?;
    let mut pairs = Vec::with_capacity(inputs.len());
    for (i, x) in inputs.iter().enumerate() {
        let f = |xi: &Tensor<f64>| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| g.constant(if j == i { xi.clone() } else { t.clone() }))
                .collect();
            match build(&mut g, &vars) {
                Ok(v) => g.value(v).data()[0],
                Err(_) => f64::NAN,
            }
        };
        pairs.push((grads.wrt(vars[i]), finite_difference_gradient(f, x, FD_STEP)));
    }
    let errs = floored_errors(&pairs);
    if let Some(i) = errs.iter().position(|e| e.is_nan()) {
        return Err(format!("input {i}: non-finite gradient"));
    }
    Ok(errs.into_iter().fold(0.0, f64::max))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values in `[0.2, 1.5]` with a random sign, keeping ReLU away from its kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.2..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

type OpBuild = fn(&mut Graph<f64>, &[Var]) -> BuildResult;

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, OpBuild)> {
    let mut u = |shape: &[usize]| uniform(rng, shape, -1.0, 1.0);
    let a34 = u(&[3, 4]);
    let b34 = u(&[3, 4]);
    let b42 = u(&[4, 2]);
    let b24 = u(&[2, 4]);
    let row4 = u(&[4]);
    let s = u(&[1]);
    let x35 = u(&[3, 5]);
    let gain = u(&[5]);
    let bias = u(&[5]);
    let logits44 = u(&[4, 4]);
    let table = u(&[5, 3]);
    let logits36 = u(&[3, 6]);
    let pos = uniform(rng, &[3, 4], 0.5, 2.0);
    let kinky = off_zero(rng, &[3, 4]);
    let big = uniform(rng, &[3, 4], -3.0, 3.0);
    vec![
        ("matmul", vec![a34.clone(), b42], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("matmul_nt", vec![a34.clone(), b24], |g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("transpose", vec![a34.clone()], |g, v| {
            let y = g.transpose(v[0])?;
            weighted_sum(g, y)
        }),
        ("add", vec![a34.clone(), b34.clone()], |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("sub", vec![a34.clone(), b34.clone()], |g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("mul", vec![a34.clone(), b34.clone()], |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("add_row", vec![a34.clone(), row4.clone()], |g, v| {
            let y = g.add_row(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("sub_row", vec![a34.clone(), row4.clone()], |g, v| {
            let y = g.sub_row(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("mul_row", vec![a34.clone(), row4], |g, v| {
            let y = g.mul_row(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("scale", vec![a34.clone()], |g, v| {
            let y = g.scale(v[0], -1.7)?;
            weighted_sum(g, y)
        }),
        ("scale_by", vec![a34.clone(), s], |g, v| {
            let y = g.scale_by(v[0], v[1])?;
            weighted_sum(g, y)
        }),
        ("exp", vec![big.clone()], |g, v| {
            let y = g.exp(v[0])?;
            weighted_sum(g, y)
        }),
        ("log", vec![pos.clone()], |g, v| {
            let y = g.log(v[0])?;
            weighted_sum(g, y)
        }),
        ("sigmoid", vec![big.clone()], |g, v| {
            let y = g.sigmoid(v[0])?;
            weighted_sum(g, y)
        }),
        ("softplus", vec![big.clone()], |g, v| {
            let y = g.softplus(v[0])?;
            weighted_sum(g, y)
        }),
        ("relu", vec![kinky], |g, v| {
            let y = g.relu(v[0])?;
            weighted_sum(g, y)
        }),
        ("row_softmax", vec![logits44.clone()], |g, v| {
            let y = g.row_softmax(v[0], Some(&causal_mask(4)))?;
            weighted_sum(g, y)
        }),
        ("exp_pow2_shifted", vec![big], |g, v| {
            let y = g.exp_pow2_shifted(v[0], &[3, -1, 0, 7])?;
            weighted_sum(g, y)
        }),
        ("log_pow2_unshifted", vec![pos], |g, v| {
            let y = g.log_pow2_unshifted(v[0], &[3, -1, 0, 7])?;
            weighted_sum(g, y)
        }),
        ("layer_norm", vec![x35, gain, bias], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
            weighted_sum(g, y)
        }),
        ("slice_cols", vec![a34.clone()], |g, v| {
            let y = g.slice_cols(v[0], 1, 2)?;
            weighted_sum(g, y)
        }),
        ("concat_cols", vec![a34.clone(), b34], |g, v| {
            let y = g.concat_cols(&[v[1], v[0]])?;
            weighted_sum(g, y)
        }),
        ("reshape", vec![a34.clone()], |g, v| {
            let y = g.reshape(v[0], [2, 6])?;
            weighted_sum(g, y)
        }),
        ("gather_rows", vec![table], |g, v| {
            let y = g.gather_rows(v[0], &[4, 0, 4, 2])?;
            weighted_sum(g, y)
        }),
        ("cross_entropy", vec![logits36], |g, v| Ok(g.cross_entropy(v[0], &[Some(5), None, Some(0)])?)),
        ("sum", vec![a34.clone()], |g, v| Ok(g.sum(v[0])?)),
        ("mean", vec![a34], |g, v| Ok(g.mean(v[0])?)),
    ]
}

/// Largest `|J_autodiff - J_closed|` over random rows of length `2..=max_n`.
pub fn softmax_jacobian_check(rng: &mut ChaCha8Rng, rows: usize, max_n: usize, fault: Option<Fault>) -> std::result::Result<f64, String> {
    let mut worst = 0.0f64;
    for _ in 0..rows {
        let n = rng.random_range(2..=max_n);
        let logits = uniform(rng, &[1, n], -4.0, 4.0);
        let mut g = graph(fault);
        let x = g.param(logits);
        let a = g.row_softmax(x, None).map_err(|e| e.to_string())?;
        let probs = g.value(a).data().to_vec();
        let closed = softmax_jacobian(&probs).map_err(|e| e.to_string())?;
        // Row i of the autodiff Jacobian is the pullback of basis vector e_i.
        let mut auto = Vec::with_capacity(n * n);
        for i in 0..n {
            let e = Tensor::from_fn([1, n], |ij| if ij[1] == i { 1.0 } else { 0.0 });
            let grads = g.vjp(a, e).map_err(|e| e.to_string())?;
            auto.extend_from_slice(grads.wrt(x).data());
        }
        let auto = Tensor::new([n, n], auto).expect("n x n entries");
        worst = worst.max(max_abs_diff(&closed, &auto));
    }
    Ok(worst)
}

/// `d o_1 / d logit_11` of the two-token, one-dimensional instance by
/// autodiff.
pub fn two_token_autodiff(delta: f64, v1: f64, v2: f64, transform: ValueTransform, fault: Option<Fault>) -> std::result::Result<f64, String> {
    let mut g = graph(fault);
    let logits = g.param(Tensor::new([1, 2], vec![delta, 0.0]).unwrap());
    let v = g.constant(Tensor::new([2, 1], vec![v1, v2]).unwrap());
    let run = |g: &mut Graph<f64>| -> BuildResult {
        let p = g.row_softmax(logits, None)?;
        Ok(apply_probs(g, p, v, transform)?)
    };
    let o = run(&mut g).map_err(|e| e.to_string())?;
    let grads = g.backward(o).map_err(|e| e.to_string())?;
    Ok(grads.wrt(logits).data()[0])
}

/// Largest `|closed form - autodiff|` over an `n x n` grid of
/// `(delta, v1 - v2)` in `[-10, 10]^2`.
pub fn two_token_grid_check(n: usize, laser: bool, fault: Option<Fault>) -> std::result::Result<f64, String> {
    let mut worst = 0.0f64;
    let at = |i: usize| -10.0 + 20.0 * i as f64 / (n - 1) as f64;
    for i in 0..n {
        for j in 0..n {
            let (delta, gap) = (at(i), at(j));
            let (v1, v2) = (0.37 + gap, 0.37);
            let (closed, transform) = if laser {
                (laser_jacobian_element_2x1(delta, v1, v2), ValueTransform::Laser)
            } else {
                (standard_jacobian_element_2x1(delta, v1, v2), ValueTransform::Linear)
            };
            let auto = two_token_autodiff(delta, v1, v2, transform, fault)?;
            worst = worst.max((closed - auto).abs());
        }
    }
    Ok(worst)
}

fn ops_suite(rng: &mut ChaCha8Rng, fault: Option<Fault>) -> Vec<CheckResult> {
    let mut out: Vec<CheckResult> = op_cases(rng)
        .into_iter()
        .map(|(name, inputs, build)| record(name, Scope::Ops, "max_rel_err", OPS_TOL, compare_with_fd(&inputs, fault, build)))
        .collect();

    // The stopped column max must contribute nothing to any gradient.
    let x = uniform(rng, &[3, 4], -1.0, 1.0);
    let stopped = (|| -> std::result::Result<f64, Box<dyn Error + Send + Sync>> {
        let mut g = graph(fault);
        let xv = g.param(x.clone());
        let m = g.column_max_stopped(xv)?;
        let y = g.sub_row(xv, m)?;
        let loss = weighted_sum(&mut g, y)?;
        let grads = g.backward(loss)?;
        Ok(max_abs_diff(grads.wrt(xv), &probe_weights(&[3, 4])))
    })()
    .map_err(|e| e.to_string());
    out.push(record("column_max_stopped", Scope::Ops, "max_abs_err", 0.0, stopped));

    let jac = softmax_jacobian_check(rng, 20, 8, fault);
    out.push(record("softmax_jacobian", Scope::Ops, "max_abs_err", JACOBIAN_TOL, jac));
    out
}

/// Attention specs covered by the attention and model suites.
pub fn spec_cases() -> Vec<(&'static str, AttentionSpec)> {
    let with = |variant, f: fn(&mut AttentionSpec)| {
        let mut s = AttentionSpec::new(variant);
        f(&mut s);
        s
    };
    vec![
        ("standard", AttentionSpec::new(Variant::Standard)),
        ("laser", AttentionSpec::new(Variant::Laser)),
        ("laser_naive", AttentionSpec::new(Variant::LaserNaive)),
        ("standard+temp", with(Variant::Standard, |s| s.tau = 2.5)),
        ("laser+temp", with(Variant::Laser, |s| s.tau = 2.5)),
        ("standard+per_dim_temp", with(Variant::Standard, |s| s.per_dim_temp = true)),
        ("laser+per_dim_temp", with(Variant::Laser, |s| s.per_dim_temp = true)),
        ("standard+qk_norm", with(Variant::Standard, |s| s.qk_norm = true)),
        ("laser+qk_norm", with(Variant::Laser, |s| s.qk_norm = true)),
        ("diff", AttentionSpec::new(Variant::Diff)),
        ("diff_laser", AttentionSpec::new(Variant::DiffLaser)),
    ]
}

/// Moves every parameter away from its neutral init so that no gradient is
/// trivially structured.
fn jitter(rng: &mut ChaCha8Rng, t: &mut Tensor<f64>, amount: f64) {
    t.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-amount..amount));
}

fn attention_suite(rng: &mut ChaCha8Rng, fault: Option<Fault>) -> Vec<CheckResult> {
    let (n, d, heads) = (4, 8, 2);
    let mut out = Vec::new();
    for (label, spec) in spec_cases() {
        let mut params = AttentionParams::<Tensor<f64>>::init(d, d / heads, &spec, |r, c, _| Tensor::zeros([r, c]), 0.0, 0.0);
        params.for_each_mut("", &mut |_, t| jitter(rng, t, 0.6));
        let x = uniform(rng, &[n, d], -1.0, 1.0);
        let mut inputs = vec![x];
        params.for_each_mut("", &mut |_, t| inputs.push(t.clone()));
        let template = params.clone();
        let result = compare_with_fd(&inputs, fault, |g, vars| {
            let mut it = vars[1..].iter();
            let p = template.map_named("", &mut |_, _| *it.next().expect("one var per tensor"));
            let y = multi_head_attention(g, vars[0], &p, heads, &spec)?;
            weighted_sum(g, y.out)
        });
        out.push(record(format!("multi_head_attention/{label}"), Scope::Attention, "max_rel_err", ATTENTION_TOL, result));
    }
    out.push(record(
        "standard_jacobian_element_2x1",
        Scope::Attention,
        "max_abs_err",
        CLOSED_FORM_TOL,
        two_token_grid_check(9, false, fault),
    ));
    out.push(record(
        "laser_jacobian_element_2x1",
        Scope::Attention,
        "max_abs_err",
        CLOSED_FORM_TOL,
        two_token_grid_check(9, true, fault),
    ));
    out
}

/// Two layers, width 8, two heads, length 4, vocabulary 11, with a wide
/// init so that every gradient is far from zero.
pub fn gradcheck_model_config(spec: AttentionSpec) -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        mlp_hidden: 16,
        vocab_size: 11,
        max_seq_len: 4,
        attention: spec,
        tie_embeddings: false,
        init_std: 0.4,
    }
}

/// Per-tensor normwise relative error between model gradients and finite
/// differences; returns the worst tensor's name and error.
pub fn model_fd_check(model: &Model<f64>, tokens: &[usize], fault: Option<Fault>) -> std::result::Result<(String, f64), String> {
    let (_, grads) = model.loss_and_grads_in(&mut graph(fault), tokens).map_err(|e| e.to_string())?;
    let grads = grads.named();
    let mut pairs = Vec::with_capacity(grads.len());
    for (i, (_, analytic)) in grads.iter().enumerate() {
        let base = model.params.named()[i].1.clone();
        let f = |t: &Tensor<f64>| {
            let mut m = model.clone();
            let mut k = 0;
            m.params.for_each_mut(|_, p| {
                if k == i {
                    *p = t.clone();
                }
                k += 1;
            });
            m.forward_loss(tokens).map(|r| r.0).unwrap_or(f64::NAN)
        };
        pairs.push((*analytic, finite_difference_gradient(f, &base, FD_STEP)));
    }
    let mut worst = (String::new(), 0.0f64);
    for ((name, _), err) in grads.iter().zip(floored_errors(&pairs)) {
        if err.is_nan() {
            return Err(format!("{name}: non-finite gradient"));
        }
        if err > worst.1 || worst.0.is_empty() {
            worst = (name.clone(), err);
        }
    }
    Ok(worst)
}

fn model_suite(rng: &mut ChaCha8Rng, fault: Option<Fault>) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for (label, spec) in spec_cases() {
        let seed = rng.random::<u64>();
        let tokens: Vec<usize> = (0..4).map(|_| rng.random_range(0..11)).collect();
        let result = Model::<f64>::init(gradcheck_model_config(spec), seed)
            .map_err(|e| e.to_string())
            .and_then(|mut m| {
                m.params.for_each_mut(|_, t| jitter(rng, t, 0.1));
                model_fd_check(&m, &tokens, fault)
            });
        let (detail, observed) = match result {
            Ok((name, e)) => (Some(format!("worst tensor: {name}")), Ok(e)),
            Err(e) => (None, Err(e)),
        };
        let mut r = record(format!("model/{label}"), Scope::Model, "max_rel_err", MODEL_TOL, observed);
        r.detail = r.detail.or(detail);
        out.push(r);
    }
    out
}

pub fn run_gradcheck(scopes: &[Scope], options: GradcheckOptions) -> GradcheckReport {
    let mut checks = Vec::new();
    for &scope in Scope::ALL.iter().filter(|s| scopes.contains(s)) {
        // Each suite draws from its own stream so that selecting a subset of
        // scopes does not change the inputs of the others.
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        rng.set_stream(scope as u64);
        checks.extend(match scope {
            Scope::Ops => ops_suite(&mut rng, options.fault),
            Scope::Attention => attention_suite(&mut rng, options.fault),
            Scope::Model => model_suite(&mut rng, options.fault),
        });
    }
    GradcheckReport {
        seed: options.seed,
        fault: options.fault.map(|f| format!("{f:?}")),
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}
