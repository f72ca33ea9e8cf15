//! Differentiable tanh ranking and the squared ranking losses built on it.
//!
//! Ranks are descending: rank 1 belongs to the largest value. The smooth
//! rank of element `j` is
//!
//! ```text
//! y'_j = q + 1 - sum_s (0.5 * tanh(d * (v_j - v_s)) + 0.5)
//! ```
//!
//! where `s` runs over all `q` elements, `j` included. The self term always
//! contributes 0.5, so a perfectly separated vector saturates at
//! `y'_j = rank_j + 0.5` and a perfectly aligned loss bottoms out at `0.25 q`.

use crate::error::{check_len, CamrlError, Result};

/// Values to be ranked together with their desired (descending) ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct RankInstance {
    pub values: Vec<f64>,
    pub target_ranks: Vec<usize>,
    /// Sharpness of the tanh steps.
    pub d: f64,
}

impl RankInstance {
    pub fn new(values: Vec<f64>, target_ranks: Vec<usize>, d: f64) -> Result<Self> {
        check_len(values.len(), target_ranks.len())?;
        let q = values.len();
        if q == 0 {
            return Err(CamrlError::InvalidArgument("empty rank instance".into()));
        }
        if !(d >= 0.0) {
            return Err(CamrlError::InvalidArgument(format!("sharpness d must be >= 0, got {d}")));
        }
        if let Some(&bad) = target_ranks.iter().find(|&&r| r == 0 || r > q) {
            return Err(CamrlError::InvalidArgument(format!(
                "target rank {bad} outside 1..={q}"
            )));
        }
        Ok(Self {
            values,
            target_ranks,
            d,
        })
    }

    pub fn loss(&self) -> f64 {
        rank_loss_raw(&self.values, &self.target_ranks, self.d)
    }

    pub fn grad(&self) -> Vec<f64> {
        rank_loss_grad_raw(&self.values, &self.target_ranks, self.d)
    }
}

pub fn smooth_rank(values: &[f64], d: f64) -> Vec<f64> {
    let q = values.len() as f64;
    values
        .iter()
        .map(|&vj| {
            let steps: f64 = values
                .iter()
                .map(|&vs| 0.5 * (d * (vj - vs)).tanh() + 0.5)
                .sum();
            q + 1.0 - steps
        })
        .collect()
}

/// Descending ordinal ranking; ties go to the lower index first.
pub fn hard_rank(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; values.len()];
    for (pos, &idx) in order.iter().enumerate() {
        ranks[idx] = pos + 1;
    }
    ranks
}

/// Ascending ordinal ranking (rank 1 = smallest); ties go to the lower index first.
pub fn ascending_rank(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0; values.len()];
    for (pos, &idx) in order.iter().enumerate() {
        ranks[idx] = pos + 1;
    }
    ranks
}

pub fn rank_loss(inst: &RankInstance) -> f64 {
    inst.loss()
}

pub fn rank_loss_grad(inst: &RankInstance) -> Vec<f64> {
    inst.grad()
}

/// `sum_j (target_j - y'_j)^2` without validating the instance.
pub(crate) fn rank_loss_raw(values: &[f64], targets: &[usize], d: f64) -> f64 {
    smooth_rank(values, d)
        .iter()
        .zip(targets)
        .map(|(y, &t)| {
            let r = t as f64 - y;
            r * r
        })
        .sum()
}

pub(crate) fn rank_loss_grad_raw(values: &[f64], targets: &[usize], d: f64) -> Vec<f64> {
    let q = values.len();
    let y = smooth_rank(values, d);
    // residual_j = dL/dy'_j
    let residual: Vec<f64> = y
        .iter()
        .zip(targets)
        .map(|(yj, &t)| 2.0 * (yj - t as f64))
        .collect();
    // dy'_j/dv_k = -d/2 * (delta_jk * sum_s sech2(v_k - v_s) - sech2(v_j - v_k))
    let mut grad = vec![0.0; q];
    for k in 0..q {
        let mut own = 0.0;
        let mut cross = 0.0;
        for j in 0..q {
            let t = (d * (values[k] - values[j])).tanh();
            let sech2 = 1.0 - t * t;
            own += sech2;
            cross += residual[j] * sech2;
        }
        grad[k] = -0.5 * d * (residual[k] * own - cross);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::finite_diff_grad;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // tanh(4) = 0.99932929973906704...
    const TANH4: f64 = 0.999_329_299_739_067;

    #[test]
    fn smooth_rank_examples() {
        assert_eq!(smooth_rank(&[0.3], 200.0), vec![1.5]);
        assert_eq!(smooth_rank(&[0.1, 0.1], 200.0), vec![2.0, 2.0]);
        let y = smooth_rank(&[0.03, 0.01], 200.0);
        let expected = [2.0 - 0.5 * TANH4, 2.0 + 0.5 * TANH4];
        assert!((y[0] - expected[0]).abs() < 1e-12);
        assert!((y[1] - expected[1]).abs() < 1e-12);
        assert!((y[0] - 1.50034).abs() < 1e-5 && (y[1] - 2.49966).abs() < 1e-5);
    }

    #[test]
    fn hard_rank_examples() {
        assert_eq!(hard_rank(&[5.0, 1.0, 9.0]), vec![2, 3, 1]);
        assert_eq!(hard_rank(&[7.0, 7.0]), vec![1, 2]);
        assert_eq!(ascending_rank(&[5.0, 1.0, 9.0]), vec![2, 1, 3]);
        assert_eq!(ascending_rank(&[4.0, 4.0]), vec![1, 2]);
    }

    #[test]
    fn hard_rank_matches_argsort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let q = rng.gen_range(1..12);
            let v: Vec<f64> = (0..q).map(|_| rng.gen_range(-5.0..5.0)).collect();
            // count of strictly larger elements + 1 equals the rank for distinct values
            let oracle: Vec<usize> = v
                .iter()
                .map(|x| v.iter().filter(|y| *y > x).count() + 1)
                .collect();
            assert_eq!(hard_rank(&v), oracle);
        }
    }

    #[test]
    fn rank_loss_examples() {
        let inst = RankInstance::new(vec![0.03, 0.01], vec![1, 2], 200.0).unwrap();
        // y' = (2 - tanh4 / 2, 2 + tanh4 / 2)
        let delta = 0.5 * (1.0 - TANH4);
        let expected = (0.5 + delta).powi(2) + (0.5 - delta).powi(2);
        assert!((inst.loss() - expected).abs() < 1e-12);
        assert!((inst.loss() - 0.5000002).abs() < 1e-7);

        // d = 0: every y' = q + 1 - q/2
        let inst = RankInstance::new(vec![0.4, -1.0, 2.0], vec![1, 2, 3], 0.0).unwrap();
        let flat = 3.0 + 1.0 - 1.5;
        let closed: f64 = [1.0, 2.0, 3.0].iter().map(|j: &f64| (j - flat).powi(2)).sum();
        assert!((inst.loss() - closed).abs() < 1e-12);
        assert!(inst.grad().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn saturated_aligned_loss_hits_floor() {
        let v = vec![0.9, 0.5, 0.1, -0.3];
        let inst = RankInstance::new(v.clone(), hard_rank(&v), 200.0).unwrap();
        assert!((inst.loss() - 0.25 * 4.0).abs() < 1e-3);
    }

    #[test]
    fn equal_values_give_antisymmetric_gradient() {
        let inst = RankInstance::new(vec![0.02, 0.02], vec![1, 2], 200.0).unwrap();
        let g = inst.grad();
        assert!((g[0] + g[1]).abs() < 1e-9);
        assert!(g[0] < 0.0, "moving the rank-1 element up must reduce the loss");
    }

    #[test]
    fn invalid_instances_rejected() {
        assert!(RankInstance::new(vec![], vec![], 1.0).is_err());
        assert!(RankInstance::new(vec![1.0], vec![2], 1.0).is_err());
        assert!(RankInstance::new(vec![1.0], vec![1], -1.0).is_err());
        assert!(RankInstance::new(vec![1.0, 2.0], vec![1], 1.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let q = rng.gen_range(1..8);
            let d = [0.5, 5.0, 50.0, 200.0][rng.gen_range(0..4)];
            let values: Vec<f64> = (0..q).map(|_| rng.gen_range(0.0..0.05)).collect();
            let targets: Vec<usize> = (0..q).map(|_| rng.gen_range(1..=q)).collect();
            let inst = RankInstance::new(values.clone(), targets.clone(), d).unwrap();
            let g = inst.grad();
            let fd = finite_diff_grad(|v| rank_loss_raw(v, &targets, d), &values, 1e-7);
            for (a, b) in g.iter().zip(&fd) {
                let tol = 1e-5 * a.abs().max(b.abs()) + 1e-6;
                assert!((a - b).abs() <= tol, "{a} vs {b} (d={d})");
            }
        }
    }

    proptest! {
        #[test]
        fn smooth_rank_reverses_value_order(
            values in prop::collection::vec(-1.0f64..1.0, 2..8),
            d in 0.1f64..300.0,
        ) {
            let y = smooth_rank(&values, d);
            for i in 0..values.len() {
                for j in 0..values.len() {
                    if values[i] > values[j] {
                        prop_assert!(y[i] < y[j]);
                    }
                }
            }
        }

        #[test]
        fn smooth_rank_is_shift_invariant(
            values in prop::collection::vec(-1.0f64..1.0, 1..8),
            shift in -2.0f64..2.0,
        ) {
            // exact when the shifted differences are exact, which holds for
            // dyadic grid values
            let grid: Vec<f64> = values.iter().map(|v| (v * 1024.0).round() / 1024.0).collect();
            let c = (shift * 16.0).round() / 16.0;
            let shifted: Vec<f64> = grid.iter().map(|v| v + c).collect();
            prop_assert_eq!(smooth_rank(&grid, 200.0), smooth_rank(&shifted, 200.0));
        }

        #[test]
        fn rank_loss_nonnegative(
            values in prop::collection::vec(-1.0f64..1.0, 1..8),
            d in 0.0f64..300.0,
        ) {
            let q = values.len();
            let targets: Vec<usize> = (1..=q).rev().collect();
            prop_assert!(rank_loss_raw(&values, &targets, d) >= 0.0);
        }
    }
}
