//! Constrained minimization over the nonnegative L1 ball
//! `{x >= 0, |x|_1 <= radius}`.
//!
//! [`fw_vanilla`] is the production path (Frank-Wolfe with the open-loop
//! step `2 / (m + 2)`); [`pgd`] is kept as a comparison baseline.

use serde::{Deserialize, Serialize};

use crate::error::{CamrlError, Result};
use crate::numcore::{all_finite, dot};

/// Feasibility tolerance on the L1 budget.
pub const FEASIBILITY_TOL: f64 = 1e-12;

pub const DEFAULT_PGD_STEP: f64 = 0.01;

/// A differentiable objective handed to the solvers.
pub trait Objective {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
}

/// Adapts a pair of closures into an [`Objective`].
pub struct FnObjective<F, G> {
    pub f: F,
    pub grad: G,
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn value(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (self.grad)(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibleSet {
    radius: f64,
}

impl FeasibleSet {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius < 0.5) {
            return Err(CamrlError::InvalidArgument(format!(
                "radius must lie in (0, 0.5), got {radius}"
            )));
        }
        Ok(Self { radius })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        is_feasible(x, self.radius)
    }
}

pub fn is_feasible(x: &[f64], radius: f64) -> bool {
    x.iter().all(|&v| v >= 0.0) && x.iter().sum::<f64>() <= radius + FEASIBILITY_TOL
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub objective: f64,
    pub fw_gap: f64,
    pub l1_norm: f64,
}

/// Per-iteration history of one solve. `initial` describes `x0`; `records`
/// holds one entry per iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace {
    pub initial: IterRecord,
    pub records: Vec<IterRecord>,
    /// Iterate with the lowest objective seen, `x0` included.
    pub best: Vec<f64>,
    pub best_objective: f64,
}

impl SolverTrace {
    /// Running minimum of the FW gap, starting from the initial point.
    pub fn best_gap_sequence(&self) -> Vec<f64> {
        let mut best = self.initial.fw_gap;
        self.records
            .iter()
            .map(|r| {
                best = best.min(r.fw_gap);
                best
            })
            .collect()
    }

    pub fn final_best_gap(&self) -> f64 {
        self.best_gap_sequence()
            .last()
            .copied()
            .unwrap_or(self.initial.fw_gap)
    }

    /// CSV with columns `iter,objective,fw_gap,l1_norm`; row 0 is the start point.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,objective,fw_gap,l1_norm\n");
        for r in std::iter::once(&self.initial).chain(&self.records) {
            out.push_str(&format!("{},{},{},{}\n", r.iter, r.objective, r.fw_gap, r.l1_norm));
        }
        out
    }
}

/// Linear minimization oracle: the vertex of the feasible set minimizing
/// `<gradient, s>`. The vertices are `0` and `radius * e_i`.
pub fn lmo(gradient: &[f64], radius: f64) -> Vec<f64> {
    let mut s = vec![0.0; gradient.len()];
    let mut best: Option<(usize, f64)> = None;
    for (i, &g) in gradient.iter().enumerate() {
        if best.is_none_or(|(_, b)| g < b) {
            best = Some((i, g));
        }
    }
    if let Some((i, g)) = best {
        if g < 0.0 {
            s[i] = radius;
        }
    }
    s
}

/// `max_{s feasible} <gradient, x - s> = <gradient, x> - radius * min(0, min_i g_i)`.
pub fn fw_gap(gradient: &[f64], x: &[f64], radius: f64) -> Result<f64> {
    if gradient.len() != x.len() {
        return Err(CamrlError::DimensionMismatch {
            expected: x.len(),
            got: gradient.len(),
        });
    }
    if !is_feasible(x, radius) {
        return Err(CamrlError::Infeasible(format!(
            "point with L1 norm {} outside radius {radius}",
            x.iter().sum::<f64>()
        )));
    }
    let min_g = gradient.iter().cloned().fold(0.0, f64::min);
    Ok(dot(gradient, x) - radius * min_g)
}

/// Euclidean projection onto `{x >= 0, |x|_1 <= radius}`.
pub fn project_box_l1(x: &[f64], radius: f64) -> Vec<f64> {
    let clamped: Vec<f64> = x.iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if total <= radius {
        return clamped;
    }
    // simplex projection: largest rho with u_rho > (cumsum_rho - radius) / rho
    let mut sorted = clamped.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - radius) / (j + 1) as f64;
        if u - candidate > 0.0 {
            tau = candidate;
        }
    }
    clamped.into_iter().map(|v| (v - tau).max(0.0)).collect()
}

fn evaluate<O: Objective + ?Sized>(obj: &O, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let value = obj.value(x);
    let grad = obj.gradient(x);
    if !value.is_finite() || !all_finite(&grad) {
        return Err(CamrlError::Numerical(format!(
            "non-finite objective or gradient at x = {x:?} (f = {value})"
        )));
    }
    Ok((value, grad))
}

fn check_start(x0: &[f64], radius: f64, m_max: usize) -> Result<()> {
    if !is_feasible(x0, radius) {
        return Err(CamrlError::Infeasible(format!("start point {x0:?} violates radius {radius}")));
    }
    if m_max == 0 {
        return Err(CamrlError::InvalidArgument("solver needs at least one iteration".into()));
    }
    Ok(())
}

/// Shared driver: `step` maps `(iteration, x, gradient)` to the next iterate.
fn run_solver<O, S>(obj: &O, x0: &[f64], radius: f64, m_max: usize, mut step: S) -> Result<SolverTrace>
where
    O: Objective + ?Sized,
    S: FnMut(usize, &[f64], &[f64]) -> Vec<f64>,
{
    check_start(x0, radius, m_max)?;
    let mut x = x0.to_vec();
    let (mut value, mut grad) = evaluate(obj, &x)?;
    let initial = IterRecord {
        iter: 0,
        objective: value,
        fw_gap: fw_gap(&grad, &x, radius)?,
        l1_norm: x.iter().sum(),
    };
    let mut best = x.clone();
    let mut best_objective = value;
    let mut records = Vec::with_capacity(m_max);
    for m in 0..m_max {
        x = step(m, &x, &grad);
        (value, grad) = evaluate(obj, &x)?;
        records.push(IterRecord {
            iter: m + 1,
            objective: value,
            fw_gap: fw_gap(&grad, &x, radius)?,
            l1_norm: x.iter().sum(),
        });
        if value < best_objective {
            best_objective = value;
            best.clone_from(&x);
        }
    }
    Ok(SolverTrace {
        initial,
        records,
        best,
        best_objective,
    })
}

/// Vanilla Frank-Wolfe: `x <- x + gamma_m (lmo(grad) - x)` with `gamma_m = 2 / (m + 2)`.
pub fn fw_vanilla<O: Objective + ?Sized>(
    obj: &O,
    x0: &[f64],
    radius: f64,
    m_max: usize,
) -> Result<SolverTrace> {
    run_solver(obj, x0, radius, m_max, |m, x, grad| {
        let s = lmo(grad, radius);
        let gamma = 2.0 / (m as f64 + 2.0);
        x.iter()
            .zip(&s)
            .map(|(&xi, &si)| ((1.0 - gamma) * xi + gamma * si).max(0.0))
            .collect()
    })
}

/// Projected gradient descent with a fixed step.
pub fn pgd<O: Objective + ?Sized>(
    obj: &O,
    x0: &[f64],
    radius: f64,
    step: f64,
    m_max: usize,
) -> Result<SolverTrace> {
    if !(step > 0.0) {
        return Err(CamrlError::InvalidArgument(format!("step must be positive, got {step}")));
    }
    run_solver(obj, x0, radius, m_max, |_, x, grad| {
        let moved: Vec<f64> = x.iter().zip(grad).map(|(xi, gi)| xi - step * gi).collect();
        project_box_l1(&moved, radius)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear(c: Vec<f64>) -> impl Objective {
        let c2 = c.clone();
        FnObjective {
            f: move |x: &[f64]| dot(&c, x),
            grad: move |_: &[f64]| c2.clone(),
        }
    }

    fn vertices(n: usize, r: f64) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; n]];
        for i in 0..n {
            let mut v = vec![0.0; n];
            v[i] = r;
            out.push(v);
        }
        out
    }

    /// Brute-force projection by grid search over the feasible set.
    fn grid_projection(x: &[f64], r: f64, step: f64) -> Vec<f64> {
        let n = (r / step).round() as usize;
        let mut best = (f64::INFINITY, vec![0.0; x.len()]);
        let mut idx = vec![0usize; x.len()];
        loop {
            if idx.iter().sum::<usize>() <= n {
                let p: Vec<f64> = idx.iter().map(|&i| i as f64 * step).collect();
                let d: f64 = p.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 {
                    best = (d, p);
                }
            }
            let mut k = 0;
            loop {
                if k == idx.len() {
                    return best.1;
                }
                idx[k] += 1;
                if idx[k] <= n {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }

    #[test]
    fn feasible_set_bounds() {
        assert!(FeasibleSet::new(0.05).is_ok());
        assert!(FeasibleSet::new(0.5).is_err());
        assert!(FeasibleSet::new(0.0).is_err());
        let set = FeasibleSet::new(0.05).unwrap();
        assert!(set.contains(&[0.02, 0.03]));
        assert!(!set.contains(&[0.02, 0.04]));
        assert!(!set.contains(&[-0.001, 0.0]));
    }

    #[test]
    fn lmo_examples() {
        assert_eq!(lmo(&[1.0, 2.0, 3.0], 0.05), vec![0.0; 3]);
        assert_eq!(lmo(&[-1.0, 2.0, -3.0], 0.05), vec![0.0, 0.0, 0.05]);
        assert_eq!(lmo(&[-2.0, -2.0], 0.05), vec![0.05, 0.0]);
    }

    #[test]
    fn lmo_matches_vertex_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.gen_range(1..9);
            let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s = lmo(&g, 0.05);
            let best = vertices(n, 0.05)
                .into_iter()
                .map(|v| dot(&g, &v))
                .fold(f64::INFINITY, f64::min);
            assert!((dot(&g, &s) - best).abs() < 1e-15);
        }
    }

    #[test]
    fn fw_gap_examples() {
        assert!((fw_gap(&[-1.0, 2.0, -3.0], &[0.0; 3], 0.05).unwrap() - 0.15).abs() < 1e-15);
        assert!((fw_gap(&[1.0, 1.0, 1.0], &[0.05, 0.0, 0.0], 0.05).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(fw_gap(&[0.0, 0.0], &[0.01, 0.02], 0.05).unwrap(), 0.0);
        assert!(matches!(
            fw_gap(&[1.0, 1.0], &[0.04, 0.04], 0.05),
            Err(CamrlError::Infeasible(_))
        ));
    }

    #[test]
    fn fw_gap_matches_vertex_maximization() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let n = rng.gen_range(1..7);
            let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = project_box_l1(&(0..n).map(|_| rng.gen_range(0.0..0.04)).collect::<Vec<_>>(), 0.05);
            let brute = vertices(n, 0.05)
                .iter()
                .map(|s| dot(&g, &x) - dot(&g, s))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((fw_gap(&g, &x, 0.05).unwrap() - brute).abs() < 1e-15);
        }
    }

    #[test]
    fn fw_on_linear_objective_reaches_vertex() {
        let trace = fw_vanilla(&linear(vec![-1.0, 1.0]), &[0.0, 0.0], 0.05, 20).unwrap();
        assert!((trace.best[0] - 0.05).abs() < 1e-15 && trace.best[1] == 0.0);
        assert_eq!(trace.records[0].fw_gap, 0.0);
        assert!((trace.best_objective + 0.05).abs() < 1e-15);
    }

    #[test]
    fn fw_stays_at_optimal_origin() {
        let obj = FnObjective {
            f: |x: &[f64]| dot(x, x),
            grad: |x: &[f64]| x.iter().map(|v| 2.0 * v).collect(),
        };
        let trace = fw_vanilla(&obj, &[0.0, 0.0, 0.0], 0.05, 10).unwrap();
        assert!(trace.records.iter().all(|r| r.fw_gap == 0.0 && r.l1_norm == 0.0));
        assert_eq!(trace.records.len(), 10);
    }

    #[test]
    fn fw_convex_quadratic_gap_shrinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let n = 5;
            let target: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.05..0.05)).collect();
            let t2 = target.clone();
            let obj = FnObjective {
                f: move |x: &[f64]| x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum(),
                grad: move |x: &[f64]| x.iter().zip(&t2).map(|(a, b)| 2.0 * (a - b)).collect(),
            };
            let trace = fw_vanilla(&obj, &vec![0.0; n], 0.05, 200).unwrap();
            let seq = trace.best_gap_sequence();
            assert!(seq.windows(2).all(|w| w[1] <= w[0]));
            assert!(trace.final_best_gap() <= 1e-2 * trace.initial.fw_gap.max(1e-300));
            for r in &trace.records {
                assert!(r.l1_norm <= 0.05 + FEASIBILITY_TOL);
            }
        }
    }

    #[test]
    fn fw_aborts_on_nan() {
        let obj = FnObjective {
            f: |_: &[f64]| f64::NAN,
            grad: |x: &[f64]| vec![0.0; x.len()],
        };
        assert!(matches!(fw_vanilla(&obj, &[0.0], 0.05, 3), Err(CamrlError::Numerical(_))));
        assert!(matches!(pgd(&obj, &[0.0], 0.05, 0.01, 3), Err(CamrlError::Numerical(_))));
    }

    #[test]
    fn solvers_reject_bad_start() {
        let obj = linear(vec![1.0, 1.0]);
        assert!(fw_vanilla(&obj, &[0.1, 0.0], 0.05, 3).is_err());
        assert!(fw_vanilla(&obj, &[0.0, 0.0], 0.05, 0).is_err());
        assert!(pgd(&obj, &[0.0, 0.0], 0.05, 0.0, 3).is_err());
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_box_l1(&[0.01, 0.02], 0.05), vec![0.01, 0.02]);
        let p = project_box_l1(&[-1.0, 0.3], 0.05);
        assert_eq!(p[0], 0.0);
        assert!((p[1] - 0.05).abs() < 1e-15);
        let p = project_box_l1(&[0.04, 0.04], 0.05);
        assert!((p[0] - 0.025).abs() < 1e-15 && (p[1] - 0.025).abs() < 1e-15);
    }

    #[test]
    fn projection_matches_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.gen_range(1..=3);
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.05..0.08)).collect();
            let p = project_box_l1(&x, 0.05);
            let g = grid_projection(&x, 0.05, 1e-3);
            let dist: f64 = p.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(dist <= 2e-3, "{x:?}: {p:?} vs {g:?}");
            assert!(is_feasible(&p, 0.05));
        }
    }

    #[test]
    fn pgd_examples() {
        let zero = FnObjective {
            f: |_: &[f64]| 1.0,
            grad: |x: &[f64]| vec![0.0; x.len()],
        };
        let trace = pgd(&zero, &[0.01, 0.02], 0.05, 0.01, 5).unwrap();
        assert!(trace.records.iter().all(|r| (r.l1_norm - 0.03).abs() < 1e-15));
        assert_eq!(trace.best, vec![0.01, 0.02]);

        let trace = pgd(&linear(vec![-1.0, 1.0]), &[0.0, 0.0], 0.05, 1.0, 1).unwrap();
        assert_eq!(trace.records.len(), 1);
        assert!((trace.best[0] - 0.05).abs() < 1e-15 && trace.best[1] == 0.0);
    }

    #[test]
    fn pgd_descends_on_convex_quadratic() {
        let obj = FnObjective {
            f: |x: &[f64]| (x[0] - 0.1).powi(2) + 2.0 * (x[1] - 0.02).powi(2),
            grad: |x: &[f64]| vec![2.0 * (x[0] - 0.1), 4.0 * (x[1] - 0.02)],
        };
        let trace = pgd(&obj, &[0.0, 0.0], 0.05, 0.1, 100).unwrap();
        let objs: Vec<f64> = std::iter::once(trace.initial.objective)
            .chain(trace.records.iter().map(|r| r.objective))
            .collect();
        assert!(objs.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn trace_csv_layout() {
        let trace = fw_vanilla(&linear(vec![-1.0, 1.0]), &[0.0, 0.0], 0.05, 2).unwrap();
        let csv = trace.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "iter,objective,fw_gap,l1_norm");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,"));
    }
}
