//! Monte-Carlo utilities for the update-count and concentration analyses.

use crate::seed;
use rand::Rng;

/// Simulates `trials` independent runs of T Bernoulli(p) selection events
/// and returns each run's update count N(T).
pub fn simulate_update_counts(p: f64, t: usize, trials: usize, seed_value: u64) -> Vec<u64> {
    crate::parallel::par_collect(trials, |i| {
        let mut rng = seed::rng(seed_value, "bernoulli-trial", i as u64);
        let mut n = 0u64;
        for _ in 0..t {
            if rng.gen::<f64>() < p {
                n += 1;
            }
        }
        n
    })
}

/// The multiplicative-deviation tail bound exp(−δ²·T·p / 2) for
/// Pr(N(T) ≤ (1−δ)·T·p).
pub fn chernoff_bound(p: f64, t: usize, delta: f64) -> f64 {
    (-delta * delta * t as f64 * p / 2.0).exp()
}

/// Counts trials violating the lower-tail event N ≤ (1−δ)·T·p.
pub fn count_tail_events(counts: &[u64], p: f64, t: usize, delta: f64) -> usize {
    let threshold = (1.0 - delta) * t as f64 * p;
    counts.iter().filter(|&&n| (n as f64) <= threshold).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn update_counts_concentrate_on_tp() {
        let t = 1000;
        let p = 0.5;
        let counts = simulate_update_counts(p, t, 300, 77);
        let mean = counts.iter().sum::<u64>() as f64 / counts.len() as f64;
        let sigma = (p * (1.0 - p) * t as f64).sqrt();
        assert!((mean - t as f64 * p).abs() < 3.0 * sigma / (counts.len() as f64).sqrt() * 3.0);
    }

    #[test]
    fn bound_value_matches_closed_form() {
        // δ=0.3, T=1000, p=0.5 → exp(−22.5) ≈ 1.7e−10.
        let b = chernoff_bound(0.5, 1000, 0.3);
        assert!((b - (-22.5f64).exp()).abs() < 1e-18);
        assert!(b < 2e-10);
    }
}
