use rand::seq::index::sample;

use crate::rng::{stream, Purpose};

/// Denominator floor of the relative error.
const FLOOR: f64 = 1e-7;

/// Largest relative error between `analytic` and central differences of
/// `loss` at `x`, over at most `max_coords` coordinates picked by `seed`.
/// The relative error is `|a - n| / max(|a|, |n|, 1e-7)`.
pub fn finite_diff_check(
    mut loss: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    step: f64,
    max_coords: usize,
    seed: u64,
) -> f64 {
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let coords: Vec<usize> = if x.len() <= max_coords {
        (0..x.len()).collect()
    } else {
        let mut c = sample(&mut stream(seed, Purpose::Init), x.len(), max_coords).into_vec();
        c.sort_unstable();
        c
    };
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in coords {
        probe[i] = x[i] + step;
        let up = loss(&probe);
        probe[i] = x[i] - step;
        let down = loss(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max(err);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth(v: &[f64]) -> f64 {
        v.iter()
            .enumerate()
            .map(|(i, x)| (x * (i + 1) as f64).sin() + x.powi(3))
            .sum()
    }

    fn smooth_grad(v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(i, x)| (i + 1) as f64 * (x * (i + 1) as f64).cos() + 3.0 * x * x)
            .collect()
    }

    #[test]
    fn empty_parameter_set_has_zero_error() {
        assert_eq!(finite_diff_check(|_| 1.0, &[], &[], 1e-6, 200, 0), 0.0);
    }

    #[test]
    fn deterministic_and_shrinking_with_step() {
        let x: Vec<f64> = (0..300).map(|i| (i as f64 * 0.017).cos()).collect();
        let g = smooth_grad(&x);
        let a = finite_diff_check(smooth, &x, &g, 1e-4, 200, 9);
        let b = finite_diff_check(smooth, &x, &g, 1e-4, 200, 9);
        assert_eq!(a, b);
        let fine = finite_diff_check(smooth, &x, &g, 1e-6, 200, 9);
        assert!(fine < a, "{fine} vs {a}");
        assert!(fine < 1e-6);
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = vec![0.3, -0.2];
        let mut g = smooth_grad(&x);
        g[1] *= 1.1;
        assert!(finite_diff_check(smooth, &x, &g, 1e-6, 200, 0) > 0.05);
    }
}
