//! Softmax saturation diagnostics: Jacobians, closed-form sensitivities of
//! the two-token instance, log-sum-exp bounds, attention-probability
//! histograms and power-law fits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{causal_mask, laser_attention, laser_attention_naive, AttentionError, AttentionInputs, AttentionSpec, Modifiers, Variant};
use crate::model::{Model, ModelError};
use crate::tensor::{max_rel_err, DType, Graph, Scalar, Tensor};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("internal consistency check failed: {0}")]
    Consistency(String),
    #[error("no attention probabilities to report")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

pub type Result<T, E = AnalysisError> = std::result::Result<T, E>;

/// Tolerance on `sum(a) = 1` accepted by [`softmax_jacobian`].
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// `diag(a) - a a^T` for a probability vector `a`.
pub fn softmax_jacobian(a: &[f64]) -> Result<Tensor<f64>> {
    if a.is_empty() {
        return Err(AnalysisError::Contract("empty probability vector".into()));
    }
    if let Some(x) = a.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
        return Err(AnalysisError::Contract(format!("probability {x} outside [0, 1]")));
    }
    let total: f64 = a.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(AnalysisError::Contract(format!("probabilities sum to {total}, not 1")));
    }
    let n = a.len();
    Ok(Tensor::from_fn([n, n], |ij| {
        let (i, j) = (ij[0], ij[1]);
        let diag = if i == j { a[i] } else { 0.0 };
        diag - a[i] * a[j]
    }))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `d o_1 / d logit_11` of standard attention over two tokens with scalar
/// values: `(v1 - v2) s (1 - s)`, `s = sigmoid(delta)`, `delta` the logit
/// difference `logit_11 - logit_12`.
pub fn standard_jacobian_element_2x1(delta: f64, v1: f64, v2: f64) -> f64 {
    (v1 - v2) * sigmoid(delta) * sigmoid(-delta)
}

/// The same derivative for LASER, `o_1 = log(s e^v1 + (1 - s) e^v2)`:
/// `(e^v1 - e^v2) s (1 - s) / (s (e^v1 - e^v2) + e^v2)`, evaluated with both
/// exponents shifted by `max(v1, v2)`.
pub fn laser_jacobian_element_2x1(delta: f64, v1: f64, v2: f64) -> f64 {
    let m = v1.max(v2);
    let (e1, e2) = ((v1 - m).exp(), (v2 - m).exp());
    let (s, t) = (sigmoid(delta), sigmoid(-delta));
    (e1 - e2) * s * t / (s * (e1 - e2) + e2)
}

/// Bounds of a weighted log-sum-exp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LseBounds {
    pub lower: f64,
    pub value: f64,
    pub upper: f64,
}

/// Absolute slack (relative to the magnitude of the max) allowed when checking
/// `lower <= value <= upper`.
pub const LSE_SLACK: f64 = 1e-12;

/// Evaluates `log sum_i exp(x_i + w_i)` together with its bounds `max` and
/// `max + log N'`, where `N'` counts entries whose log-weight is not `-inf`.
pub fn logsumexp_bound_check(x: &[f64], log_weights: &[f64]) -> Result<LseBounds> {
    if x.len() != log_weights.len() {
        return Err(AnalysisError::Contract(format!(
            "{} values but {} log-weights",
            x.len(),
            log_weights.len()
        )));
    }
    let mut z = Vec::with_capacity(x.len());
    for (&xi, &wi) in x.iter().zip(log_weights) {
        if wi == f64::NEG_INFINITY {
            continue;
        }
        if !xi.is_finite() || !wi.is_finite() {
            return Err(AnalysisError::Contract(format!("non-finite input ({xi}, {wi})")));
        }
        z.push(xi + wi);
    }
    if z.is_empty() {
        return Err(AnalysisError::Contract("no visible entries".into()));
    }
    let lower = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|&v| (v - lower).exp()).sum();
    let value = lower + sum.ln();
    let upper = lower + (z.len() as f64).ln();
    let slack = LSE_SLACK * lower.abs().max(1.0);
    if !(lower <= value + slack && value <= upper + slack) {
        return Err(AnalysisError::Consistency(format!(
            "log-sum-exp {value} escapes [{lower}, {upper}]"
        )));
    }
    Ok(LseBounds { lower, value, upper })
}

/// Default saturation thresholds.
pub const DEFAULT_THRESHOLDS: [f64; 2] = [1e-7, 1e-3];

/// Bucket edges `1e-12, 1e-11, ..., 1`. Bucket 0 collects values below
/// `1e-12`; bucket `i` covers `[edge[i-1], edge[i])`, and the last one also
/// takes the value `1`.
pub fn bucket_edges() -> Vec<f64> {
    (0..=12).map(|k| 10f64.powi(k - 12)).collect()
}

/// Threshold list with the defaults first and extras appended, deduplicated
/// and sorted.
pub fn thresholds_with_defaults(extra: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = DEFAULT_THRESHOLDS.iter().chain(extra).copied().collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFraction {
    pub threshold: f64,
    pub fraction: f64,
}

/// Counts of attention probabilities. Merging two histograms over the same
/// thresholds is associative, so partial results can be combined in any
/// grouping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbHistogram {
    pub thresholds: Vec<f64>,
    pub below: Vec<u64>,
    pub bucket_edges: Vec<f64>,
    pub bucket_counts: Vec<u64>,
    pub total: u64,
}

impl ProbHistogram {
    pub fn new(thresholds: &[f64]) -> Self {
        let edges = bucket_edges();
        Self {
            thresholds: thresholds.to_vec(),
            below: vec![0; thresholds.len()],
            bucket_counts: vec![0; edges.len()],
            bucket_edges: edges,
            total: 0,
        }
    }

    pub fn add(&mut self, p: f64) {
        let idx = self.bucket_edges.partition_point(|&e| e <= p).min(self.bucket_counts.len() - 1);
        self.bucket_counts[idx] += 1;
        for (count, &t) in self.below.iter_mut().zip(&self.thresholds) {
            if p < t {
                *count += 1;
            }
        }
        self.total += 1;
    }

    pub fn merge(&mut self, other: &ProbHistogram) {
        assert_eq!(self.thresholds, other.thresholds, "merging histograms over different thresholds");
        for (a, b) in self.below.iter_mut().zip(&other.below) {
            *a += b;
        }
        for (a, b) in self.bucket_counts.iter_mut().zip(&other.bucket_counts) {
            *a += b;
        }
        self.total += other.total;
    }

    pub fn fractions_below(&self) -> Vec<ThresholdFraction> {
        self.thresholds
            .iter()
            .zip(&self.below)
            .map(|(&threshold, &c)| ThresholdFraction {
                threshold,
                fraction: if self.total == 0 { 0.0 } else { c as f64 / self.total as f64 },
            })
            .collect()
    }
}

/// One attention-probability matrix, with the additive mask it was computed
/// under (`-inf` marks hidden entries).
#[derive(Debug, Clone, Copy)]
pub struct ProbMap<'a, T: Scalar> {
    pub probs: &'a Tensor<T>,
    pub mask: Option<&'a Tensor<T>>,
}

/// Row-sum tolerance for histogram inputs; loose enough for `f32` maps.
pub const ROW_SUM_TOL: f64 = 1e-4;

fn visible_rows<T: Scalar>(map: ProbMap<'_, T>) -> Result<Vec<Vec<f64>>> {
    let (r, c) = map
        .probs
        .dims2()
        .map_err(|e| AnalysisError::Contract(e.to_string()))?;
    if let Some(m) = map.mask {
        if m.shape() != map.probs.shape() {
            return Err(AnalysisError::Contract("mask shape differs from probabilities".into()));
        }
    }
    let mut rows = Vec::with_capacity(r);
    for i in 0..r {
        let p = map.probs.row(i);
        let row: Vec<f64> = (0..c)
            .filter(|&j| map.mask.map_or(true, |m| m.row(i)[j] != T::neg_infinity()))
            .map(|j| p[j].to_f64().unwrap_or(f64::NAN))
            .collect();
        let total: f64 = row.iter().sum();
        if !((total - 1.0).abs() <= ROW_SUM_TOL) {
            return Err(AnalysisError::Contract(format!("row {i} sums to {total}")));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Histogram of attention probabilities over a stream of maps.
///
/// With `exclude_masked`, entries hidden by a map's mask are not counted;
/// otherwise they enter as zeros.
pub fn attention_prob_histogram<'a, T: Scalar>(
    maps: impl IntoIterator<Item = ProbMap<'a, T>>,
    thresholds: &[f64],
    exclude_masked: bool,
) -> Result<ProbHistogram> {
    let mut hist = ProbHistogram::new(thresholds);
    for map in maps {
        let rows = visible_rows(map)?;
        for row in &rows {
            row.iter().for_each(|&p| hist.add(p));
        }
        if !exclude_masked {
            let hidden = map.probs.numel() - rows.iter().map(Vec::len).sum::<usize>();
            (0..hidden).for_each(|_| hist.add(0.0));
        }
    }
    if hist.total == 0 {
        return Err(AnalysisError::Empty);
    }
    Ok(hist)
}

/// Statistics of one attention map (`map` is 0, or 1 for the second map of
/// the diff variants) aggregated over a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapStats {
    pub layer: usize,
    pub head: usize,
    pub map: usize,
    pub fraction_below: Vec<ThresholdFraction>,
    pub histogram: ProbHistogram,
    /// Mean Frobenius norm of the per-row softmax Jacobians.
    pub jacobian_norm_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationReport {
    pub thresholds: Vec<f64>,
    pub exclude_masked: bool,
    pub sequences: usize,
    pub sequence_len: usize,
    pub fraction_below: Vec<ThresholdFraction>,
    pub histogram: ProbHistogram,
    pub jacobian_norm_mean: f64,
    pub maps: Vec<MapStats>,
}

fn jacobian_frobenius(row: &[f64]) -> Result<f64> {
    // Renormalize away f32 rounding so the contract check sees a proper
    // distribution.
    let total: f64 = row.iter().sum();
    let a: Vec<f64> = row.iter().map(|p| p / total).collect();
    Ok(softmax_jacobian(&a)?.l2_norm())
}

/// Runs `model` over each sequence in `batch`, recording every attention map,
/// and aggregates probabilities and Jacobian norms per layer, head and map.
pub fn saturation_report<T: Scalar>(
    model: &Model<T>,
    batch: &[Vec<usize>],
    thresholds: &[f64],
    exclude_masked: bool,
) -> Result<SaturationReport> {
    if batch.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mut per_map: Vec<((usize, usize, usize), ProbHistogram, f64, usize)> = Vec::new();
    for tokens in batch {
        let mut g = Graph::<T>::new();
        let params = model.params.map(|t| g.constant(t.clone()));
        let fwd = model.forward(&mut g, &params, tokens)?;
        let mask = model.config.attention.causal.then(|| causal_mask::<T>(tokens.len()));
        for lp in &fwd.probes {
            let key = (lp.layer, lp.probe.head, lp.probe.map);
            let idx = match per_map.iter().position(|(k, ..)| *k == key) {
                Some(i) => i,
                None => {
                    per_map.push((key, ProbHistogram::new(thresholds), 0.0, 0));
                    per_map.len() - 1
                }
            };
            let map = ProbMap {
                probs: g.value(lp.probe.probs),
                mask: mask.as_ref(),
            };
            let hist = attention_prob_histogram([map], thresholds, exclude_masked)?;
            let entry = &mut per_map[idx];
            entry.1.merge(&hist);
            for row in visible_rows(map)? {
                entry.2 += jacobian_frobenius(&row)?;
                entry.3 += 1;
            }
        }
    }
    per_map.sort_by_key(|(k, ..)| *k);
    let mut overall = ProbHistogram::new(thresholds);
    let (mut norm_sum, mut rows) = (0.0, 0usize);
    let maps = per_map
        .into_iter()
        .map(|((layer, head, map), histogram, sum, count)| {
            overall.merge(&histogram);
            norm_sum += sum;
            rows += count;
            MapStats {
                layer,
                head,
                map,
                fraction_below: histogram.fractions_below(),
                histogram,
                jacobian_norm_mean: sum / count.max(1) as f64,
            }
        })
        .collect();
    if overall.total == 0 {
        return Err(AnalysisError::Empty);
    }
    Ok(SaturationReport {
        thresholds: thresholds.to_vec(),
        exclude_masked,
        sequences: batch.len(),
        sequence_len: batch.iter().map(Vec::len).max().unwrap_or(0),
        fraction_below: overall.fractions_below(),
        histogram: overall,
        jacobian_norm_mean: norm_sum / rows.max(1) as f64,
        maps,
    })
}

/// `loss ~ a n^b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub b: f64,
    pub rms_log_residual: f64,
}

/// Least squares on `log loss = log a + b log n`.
pub fn power_law_fit(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 2 {
        return Err(AnalysisError::Contract(format!("need at least 2 points, got {}", points.len())));
    }
    if let Some((n, l)) = points.iter().find(|(n, l)| !(*n > 0.0 && *l > 0.0 && n.is_finite() && l.is_finite())) {
        return Err(AnalysisError::Contract(format!("point ({n}, {l}) is not positive and finite")));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let k = points.len() as f64;
    let (xm, ym) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxx: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    if sxx == 0.0 {
        return Err(AnalysisError::Contract("all parameter counts are equal".into()));
    }
    let b = sxy / sxx;
    let log_a = ym - b * xm;
    let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - log_a - b * x).powi(2)).sum();
    Ok(PowerLawFit {
        a: log_a.exp(),
        b,
        rms_log_residual: (rss / k).sqrt(),
    })
}

/// One head of causal attention inputs, each shaped `[N, 1, s]`.
#[derive(Debug, Clone)]
pub struct HeadInputs {
    pub q: Tensor<f64>,
    pub k: Tensor<f64>,
    pub v: Tensor<f64>,
}

impl HeadInputs {
    /// Queries and keys uniform in `[-1, 1]`, values uniform in
    /// `[0.9 scale, scale]`. Every value then sits within 10% of the scale,
    /// so whether `exp(v)` overflows is decided by the scale alone.
    pub fn overflow_probe(n: usize, s: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |lo: f64, hi: f64| Tensor::from_fn([n, 1, s], |_| rng.random_range(lo..hi));
        let (q, k) = (u(-1.0, 1.0), u(-1.0, 1.0));
        let v = u(0.9 * scale, scale);
        Self { q, k, v }
    }

    /// Rounds every entry through `T`, so that a reference computed in `f64`
    /// sees exactly the inputs a `T` run sees.
    pub fn rounded<T: Scalar>(&self) -> Self {
        let r = |t: &Tensor<f64>| t.cast::<T>().cast::<f64>();
        Self {
            q: r(&self.q),
            k: r(&self.k),
            v: r(&self.v),
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.q.shape()[0], self.q.shape()[2])
    }

    /// Causal attention probabilities `[N, N]` in `f64`.
    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        let (n, s) = self.dims();
        let scale = 1.0 / (s as f64).sqrt();
        (0..n)
            .map(|i| {
                let logits: Vec<f64> = (0..=i)
                    .map(|j| (0..s).map(|c| self.q.data()[i * s + c] * self.k.data()[j * s + c]).sum::<f64>() * scale)
                    .collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                let mut row: Vec<f64> = e.iter().map(|x| x / z).collect();
                row.resize(n, 0.0);
                row
            })
            .collect()
    }
}

/// LASER output of one causal head evaluated directly in `f64`:
/// `log(sum_j a_ij exp(v_jc))`, with no shift when `shifted` is false and
/// with the per-output maximum of the visible values factored out otherwise.
pub fn laser_reference(inp: &HeadInputs, shifted: bool) -> Tensor<f64> {
    let (n, s) = inp.dims();
    let a = inp.probabilities();
    let v = inp.v.data();
    Tensor::from_fn([n, 1, s], |idx| {
        let (i, c) = (idx[0], idx[2]);
        let m = if shifted {
            (0..=i).map(|j| v[j * s + c]).fold(f64::NEG_INFINITY, f64::max)
        } else {
            0.0
        };
        let sum: f64 = (0..=i).map(|j| a[i][j] * (v[j * s + c] - m).exp()).sum();
        m + sum.ln()
    })
}

/// `(naive, tricked)` LASER outputs of one causal head computed in `T`.
pub fn laser_pair<T: Scalar>(inp: &HeadInputs) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let (n, _) = inp.dims();
    let mut g = Graph::<T>::new();
    let spec = AttentionSpec::new(Variant::Laser);
    let inputs = AttentionInputs {
        q: g.constant(inp.q.cast()),
        k: g.constant(inp.k.cast()),
        v: g.constant(inp.v.cast()),
        mask: Some(causal_mask(n)),
    };
    let naive = laser_attention_naive(&mut g, &inputs, &spec)?;
    let tricked = laser_attention(&mut g, &inputs, &spec, Modifiers::default())?;
    Ok((g.value(naive).cast(), g.value(tricked).cast()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverflowReport {
    pub dtype: DType,
    pub scale: f64,
    pub seed: u64,
    pub seq_len: usize,
    pub head_size: usize,
    pub naive_finite: bool,
    pub tricked_finite: bool,
    /// Deviations from the shifted `f64` reference; `None` when the output
    /// is not finite.
    pub naive_max_abs_dev: Option<f64>,
    pub tricked_max_abs_dev: Option<f64>,
    pub naive_rel_err: Option<f64>,
    pub tricked_rel_err: Option<f64>,
}

/// Runs naive and tricked LASER on identical inputs at the given value scale
/// and compares both to the shifted `f64` reference.
pub fn overflow_demo(dtype: DType, scale: f64, seed: u64, seq_len: usize, head_size: usize) -> Result<OverflowReport> {
    if !(scale.is_finite() && scale > 0.0) || seq_len == 0 || head_size == 0 {
        return Err(AnalysisError::Contract(format!(
            "need a positive finite scale and non-empty shape, got scale {scale}, {seq_len} x {head_size}"
        )));
    }
    let raw = HeadInputs::overflow_probe(seq_len, head_size, scale, seed);
    let (inp, (naive, tricked)) = match dtype {
        DType::F32 => (raw.rounded::<f32>(), laser_pair::<f32>(&raw.rounded::<f32>())?),
        DType::F64 => (raw.clone(), laser_pair::<f64>(&raw)?),
    };
    let reference = laser_reference(&inp, true);
    let dev = |t: &Tensor<f64>| {
        t.is_finite().then(|| {
            let abs = crate::tensor::max_abs_diff(t, &reference);
            (abs, max_rel_err(t, &reference))
        })
    };
    let (nd, td) = (dev(&naive), dev(&tricked));
    Ok(OverflowReport {
        dtype,
        scale,
        seed,
        seq_len,
        head_size,
        naive_finite: naive.is_finite(),
        tricked_finite: tricked.is_finite(),
        naive_max_abs_dev: nd.map(|d| d.0),
        tricked_max_abs_dev: td.map(|d| d.0),
        naive_rel_err: nd.map(|d| d.1),
        tricked_rel_err: td.map(|d| d.1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobian_examples() {
        let j = softmax_jacobian(&[0.5, 0.5]).unwrap();
        assert_eq!(j.data(), &[0.25, -0.25, -0.25, 0.25]);
        let j = softmax_jacobian(&[0.0, 1.0, 0.0]).unwrap();
        assert!(j.data().iter().all(|&x| x == 0.0));
        assert!(softmax_jacobian(&[0.5, 0.6]).is_err());
        assert!(softmax_jacobian(&[-0.5, 1.5]).is_err());
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(standard_jacobian_element_2x1(0.0, 1.0, 0.0), 0.25);
        assert_eq!(standard_jacobian_element_2x1(3.0, 2.0, 2.0), 0.0);
        assert_eq!(laser_jacobian_element_2x1(-4.0, 7.0, 7.0), 0.0);
        // Large values do not overflow.
        let x = laser_jacobian_element_2x1(1.0, 1000.0, 960.0);
        assert!((x - sigmoid(-1.0)).abs() < 1e-6);
    }

    #[test]
    fn lse_examples() {
        let b = logsumexp_bound_check(&[2.0; 5], &[0.0; 5]).unwrap();
        assert_eq!(b.value, b.upper);
        assert_eq!(b.lower, 2.0);
        let b = logsumexp_bound_check(&[3.5], &[0.0]).unwrap();
        assert_eq!((b.lower, b.value, b.upper), (3.5, 3.5, 3.5));
        let b = logsumexp_bound_check(&[1.0, 100.0], &[0.0, f64::NEG_INFINITY]).unwrap();
        assert_eq!(b.upper, 1.0);
        assert!(logsumexp_bound_check(&[1.0], &[f64::NEG_INFINITY]).is_err());
    }

    #[test]
    fn uniform_histogram() {
        let p = Tensor::<f64>::full([100, 100], 0.01);
        let h = attention_prob_histogram([ProbMap { probs: &p, mask: None }], &[1e-3, 1e-1], true).unwrap();
        let f = h.fractions_below();
        assert_eq!(f[0].fraction, 0.0);
        assert_eq!(f[1].fraction, 1.0);
        assert_eq!(h.bucket_counts[11], 10_000);
        assert!(attention_prob_histogram::<f64>([], &[1e-3], true).is_err());
    }

    #[test]
    fn bucket_boundaries() {
        let mut h = ProbHistogram::new(&[]);
        for p in [0.0, 1e-13, 1e-12, 0.5, 1.0] {
            h.add(p);
        }
        assert_eq!(h.bucket_counts[0], 2);
        assert_eq!(h.bucket_counts[1], 1);
        assert_eq!(h.bucket_counts[12], 2);
        assert_eq!(h.bucket_counts.iter().sum::<u64>(), h.total);
    }

    #[test]
    fn overflow_examples() {
        let r = overflow_demo(DType::F32, 100.0, 0, 8, 4).unwrap();
        assert!(!r.naive_finite && r.tricked_finite);
        let r = overflow_demo(DType::F32, 1.0, 0, 8, 4).unwrap();
        assert!(r.naive_finite && r.tricked_finite);
        assert!(r.tricked_max_abs_dev.unwrap() <= 1e-6 && r.naive_max_abs_dev.unwrap() <= 1e-6);
        let r = overflow_demo(DType::F64, 800.0, 0, 8, 4).unwrap();
        assert!(!r.naive_finite && r.tricked_finite);
        assert!(overflow_demo(DType::F64, 0.0, 0, 8, 4).is_err());
    }

    #[test]
    fn power_law_exact() {
        let pts: Vec<(f64, f64)> = [1e3, 1e4, 3e5, 2e6].iter().map(|&n| (n, 2.0 * f64::powf(n, -0.5))).collect();
        let fit = power_law_fit(&pts).unwrap();
        assert!((fit.a - 2.0).abs() < 1e-10 && (fit.b + 0.5).abs() < 1e-12);
        assert!(fit.rms_log_residual <= 1e-12);
        assert!(power_law_fit(&pts[..1]).is_err());
        assert!(power_law_fit(&[(1.0, 1.0), (1.0, 2.0)]).is_err());
        assert!(power_law_fit(&[(1.0, 1.0), (0.0, 2.0)]).is_err());
    }
}
