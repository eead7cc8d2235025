use laser_core::analysis::{
    attention_prob_histogram, power_law_fit, saturation_report, softmax_jacobian, ProbMap,
};
use laser_core::model::{causal_mask, Model, ModelConfig};
use laser_core::{AttentionSpec, Tensor, Variant};
use proptest::prelude::*;

/// Normal equations of `y = c + b x` solved by Cramer's rule on raw sums.
fn cramer_fit(points: &[(f64, f64)]) -> (f64, f64) {
    let k = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(n, l) in points {
        let (x, y) = (n.ln(), l.ln());
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let det = k * sxx - sx * sx;
    let c = (sy * sxx - sx * sxy) / det;
    let b = (k * sxy - sx * sy) / det;
    (c.exp(), b)
}

proptest! {
    #[test]
    fn power_law_matches_normal_equations(
        noise in prop::collection::vec(-0.2f64..0.2, 3..12),
        a in 0.5f64..50.0,
        b in -0.6f64..-0.01,
    ) {
        let points: Vec<(f64, f64)> = noise
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let n = 1e4 * 3f64.powi(i as i32);
                (n, a * n.powf(b) * e.exp())
            })
            .collect();
        let fit = power_law_fit(&points).unwrap();
        let (oa, ob) = cramer_fit(&points);
        prop_assert!((fit.b - ob).abs() <= 1e-9 * ob.abs().max(1.0), "{} vs {}", fit.b, ob);
        prop_assert!((fit.a - oa).abs() <= 1e-8 * oa, "{} vs {}", fit.a, oa);
    }

    /// Row sums of the softmax Jacobian vanish and it is symmetric.
    #[test]
    fn jacobian_rows_sum_to_zero(logits in prop::collection::vec(-8.0f64..8.0, 1..20)) {
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let a: Vec<f64> = e.iter().map(|x| x / z).collect();
        let j = softmax_jacobian(&a).unwrap();
        let n = a.len();
        for i in 0..n {
            prop_assert!(j.row(i).iter().sum::<f64>().abs() < 1e-15);
            for k in 0..n {
                prop_assert_eq!(j.at(&[i, k]), j.at(&[k, i]));
            }
        }
    }
}

#[test]
fn histogram_hand_count() {
    // Causal 3x3 map: rows [1], [0.85, 0.15], [3e-9, 0.5, 0.5 - 3e-9].
    let probs = Tensor::new([3, 3], vec![1.0, 0.0, 0.0, 0.85, 0.15, 0.0, 3e-9, 0.5, 0.5 - 3e-9]).unwrap();
    let mask = causal_mask::<f64>(3);
    let map = ProbMap { probs: &probs, mask: Some(&mask) };
    let h = attention_prob_histogram([map], &[1e-7, 0.2], true).unwrap();
    assert_eq!(h.total, 6);
    assert_eq!(h.below, vec![1, 2]);
    // 3e-9 lands in [1e-9, 1e-8); 0.15 in [1e-1, 1); 1.0 joins the last bucket.
    let mut expect = vec![0u64; 13];
    expect[4] = 1;
    expect[12] = 5;
    assert_eq!(h.bucket_counts, expect);

    let h = attention_prob_histogram([map], &[1e-7, 0.2], false).unwrap();
    assert_eq!(h.total, 9);
    assert_eq!(h.below, vec![4, 5]);
    assert_eq!(h.bucket_counts[0], 3);
}

fn uniform_attention_model(variant: Variant, n: usize) -> Model<f64> {
    let config = ModelConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        mlp_hidden: 8,
        vocab_size: 7,
        max_seq_len: n,
        attention: AttentionSpec::new(variant),
        tie_embeddings: true,
        init_std: 0.3,
    };
    let mut model = Model::init(config, 5).unwrap();
    // Zero query weights make every logit zero, so each row is uniform over
    // the visible prefix.
    model.params.for_each_mut(|name, t| {
        if name.ends_with("w_q") || name.ends_with("w_q2") {
            *t = Tensor::zeros(t.shape().to_vec());
        }
    });
    model
}

#[test]
fn saturation_of_uniform_attention() {
    let n = 4;
    for variant in [Variant::Standard, Variant::DiffLaser] {
        let model = uniform_attention_model(variant, n);
        let batch = vec![vec![0, 3, 6, 1], vec![2, 2, 5, 4]];
        let r = saturation_report(&model, &batch, &[0.3], true).unwrap();
        let maps = if variant.is_diff() { 2 } else { 1 };
        assert_eq!(r.maps.len(), 2 * 2 * maps);
        // Visible entries: 1, 1/2 x2, 1/3 x3, 1/4 x4; four lie below 0.3.
        assert_eq!(r.fraction_below[0].fraction, 0.4);
        // Uniform row over m entries has Jacobian Frobenius norm sqrt(m-1)/m.
        let expect = (1..=n).map(|m| ((m - 1) as f64).sqrt() / m as f64).sum::<f64>() / n as f64;
        assert!((r.jacobian_norm_mean - expect).abs() < 1e-12, "{} vs {expect}", r.jacobian_norm_mean);

        let r = saturation_report(&model, &batch, &[0.3], false).unwrap();
        assert_eq!(r.fraction_below[0].fraction, 10.0 / 16.0);
    }
}

#[test]
fn single_token_attention_has_zero_jacobian() {
    let model = uniform_attention_model(Variant::Laser, 4);
    let r = saturation_report(&model, &[vec![3], vec![5]], &[1e-7], true).unwrap();
    assert_eq!(r.jacobian_norm_mean, 0.0);
    assert_eq!(r.histogram.bucket_counts[12], r.histogram.total);
}
