//! Scalar losses and activations shared by the graph ops and the agents.

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of probability `p` against label `y`.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let pos = p.max(PROB_FLOOR).ln();
    let neg = (1.0 - p).max(PROB_FLOOR).ln();
    -(y * pos + (1.0 - y) * neg)
}

/// Derivative of [`bce_loss`] with respect to `p`; zero where the clamp is active.
pub(crate) fn bce_grad(p: f64, y: f64) -> f64 {
    let mut g = 0.0;
    if p > PROB_FLOOR {
        g -= y / p;
    }
    if 1.0 - p > PROB_FLOOR {
        g += (1.0 - y) / (1.0 - p);
    }
    g
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy_loss(logits: &[f64], target: usize) -> f64 {
    log_sum_exp(logits) - logits[target]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn bce_reference_points() {
        assert_abs_diff_eq!(bce_loss(0.5, 1.0), 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(bce_loss(0.9, 0.0), -(0.1f64.ln()), epsilon = 1e-12);
        assert!(bce_loss(1.0 - 1e-10, 1.0) < 1e-9);
        assert!(bce_loss(0.0, 1.0).is_finite());
        assert!(bce_loss(1.0, 0.0).is_finite());
    }

    #[test]
    fn cross_entropy_reference_points() {
        assert_abs_diff_eq!(cross_entropy_loss(&[0.0; 12], 3), 12f64.ln(), epsilon = 1e-12);
        let mut logits = vec![0.0; 12];
        logits[5] = 20.0;
        assert!(cross_entropy_loss(&logits, 5) < 1e-6);
    }

    proptest! {
        #[test]
        fn cross_entropy_matches_naive(logits in prop::collection::vec(-8.0f64..8.0, 2..16), t in 0usize..16) {
            let t = t % logits.len();
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            let naive = -(logits[t].exp() / z).ln();
            prop_assert!((cross_entropy_loss(&logits, t) - naive).abs() < 1e-9);
        }

        #[test]
        fn softmax_is_a_simplex(xs in prop::collection::vec(-50.0f64..50.0, 1..20)) {
            let p = softmax(&xs);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn sigmoid_is_strictly_inside_unit_interval(x in -30.0f64..30.0) {
            let s = sigmoid(x);
            prop_assert!(s > 0.0 && s < 1.0);
        }
    }
}
