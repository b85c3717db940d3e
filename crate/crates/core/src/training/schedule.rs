//! Cosine annealing, stepped once per epoch.

use std::f64::consts::PI;

/// `lr_min + (lr0 - lr_min) * (1 + cos(pi * t / t_max)) / 2`.
///
/// The closed form is used without reducing `t` modulo `t_max`: the rate
/// reaches `lr_min` at `t = t_max` and climbs back to `lr0` at `2 t_max`,
/// so the cycle restarts with period `2 t_max`.
pub fn cosine_lr(t: usize, lr0: f64, t_max: usize, lr_min: f64) -> f64 {
    assert!(t_max > 0, "t_max must be positive");
    lr_min + (lr0 - lr_min) * (1.0 + (PI * t as f64 / t_max as f64).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hits_the_anchor_points() {
        assert_eq!(cosine_lr(0, 1e-4, 32, 0.0), 1e-4);
        assert!(cosine_lr(32, 1e-4, 32, 0.0).abs() < 1e-20);
        assert!((cosine_lr(16, 1e-4, 32, 0.0) - 5e-5).abs() < 1e-18);
        assert!((cosine_lr(16, 1e-3, 32, 1e-5) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert!((cosine_lr(64, 1e-4, 32, 0.0) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn decreases_monotonically_over_the_first_half_cycle() {
        let lrs: Vec<f64> = (0..=32).map(|t| cosine_lr(t, 1e-4, 32, 1e-6)).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
        assert!(lrs.iter().all(|&l| (1e-6..=1e-4).contains(&l)));
    }
}
