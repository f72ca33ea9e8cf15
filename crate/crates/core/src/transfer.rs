//! The asymmetric transfer matrix and the composite objective optimized over
//! one of its rows.
//!
//! `B[s][t]` weights task `s`'s parameters in the target of task `t`; row `t`
//! without its diagonal (`b_t^o`, the outgoing transfers of task `t`) is the
//! variable the Frank-Wolfe step optimizes.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, CamrlError, Result};
use crate::numcore::{cosine_similarity, dot, norm_sq};
use crate::ranking::{ascending_rank, hard_rank, rank_loss_grad_raw, rank_loss_raw};
use crate::solver::{is_feasible, Objective, FEASIBILITY_TOL};
use crate::tasks::{evaluate, GridTask, TaskTrainer};

/// Number of random pair draws per mutual-evaluation round.
pub const MUTUAL_EVAL_PAIRS: usize = 3;

/// States sampled for the embedding-distance similarity.
pub const EMBEDDING_SAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    n: usize,
    data: Vec<f64>,
}

impl TransferMatrix {
    pub fn identity(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(CamrlError::InvalidArgument("transfer matrix needs at least one task".into()));
        }
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Ok(Self { n, data })
    }

    pub fn from_rows(n: usize, data: Vec<f64>) -> Result<Self> {
        check_len(n * n, data.len())?;
        if n == 0 {
            return Err(CamrlError::InvalidArgument("transfer matrix needs at least one task".into()));
        }
        Ok(Self { n, data })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n + col]
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.n..(t + 1) * self.n]
    }

    /// `b_t^o`: row `t` with the diagonal removed.
    pub fn outgoing_row(&self, t: usize) -> Vec<f64> {
        self.row(t)
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != t)
            .map(|(_, &v)| v)
            .collect()
    }

    /// Writes `b` back into row `t`, leaving the diagonal untouched.
    pub fn set_outgoing_row(&mut self, t: usize, b: &[f64]) -> Result<()> {
        check_len(self.n - 1, b.len())?;
        let n = self.n;
        let row = &mut self.data[t * n..(t + 1) * n];
        for (k, &v) in b.iter().enumerate() {
            row[task_of_column(t, k)] = v;
        }
        Ok(())
    }

    /// Checks unit diagonal, nonnegative off-diagonal entries, and the
    /// per-row off-diagonal L1 budget.
    pub fn validate(&self, radius: f64) -> Result<()> {
        for t in 0..self.n {
            if self.get(t, t) != 1.0 {
                return Err(CamrlError::Infeasible(format!("diagonal entry {t} is {}", self.get(t, t))));
            }
            let b = self.outgoing_row(t);
            if !is_feasible(&b, radius) {
                return Err(CamrlError::Infeasible(format!(
                    "row {t} off-diagonal {b:?} violates radius {radius}"
                )));
            }
        }
        Ok(())
    }

    /// Appends a task with no incoming or outgoing transfers.
    pub fn extend_for_new_task(&self) -> TransferMatrix {
        let n = self.n + 1;
        let mut data = vec![0.0; n * n];
        for r in 0..self.n {
            data[r * n..r * n + self.n].copy_from_slice(self.row(r));
        }
        data[n * n - 1] = 1.0;
        TransferMatrix { n, data }
    }
}

pub fn init_transfer(n: usize) -> Result<TransferMatrix> {
    TransferMatrix::identity(n)
}

pub fn outgoing_row(b: &TransferMatrix, t: usize) -> Vec<f64> {
    b.outgoing_row(t)
}

pub fn extend_for_new_task(b: &TransferMatrix) -> TransferMatrix {
    b.extend_for_new_task()
}

/// Task index of position `k` in `b_t^o`.
pub fn task_of_column(t: usize, k: usize) -> usize {
    if k < t {
        k
    } else {
        k + 1
    }
}

/// Position of task `j != t` in `b_t^o`.
pub fn column_of_task(t: usize, j: usize) -> usize {
    debug_assert_ne!(t, j);
    if j < t {
        j
    } else {
        j - 1
    }
}

fn default_a() -> f64 {
    1000.0
}
fn default_b() -> f64 {
    1.0 / 40.0
}
fn default_c() -> f64 {
    2.0
}
fn default_d() -> f64 {
    200.0
}
fn default_mu() -> f64 {
    0.01
}
fn default_radius() -> f64 {
    0.05
}
fn default_epsilon() -> f64 {
    0.01
}
fn default_k() -> usize {
    10
}
fn default_warmup() -> usize {
    5
}
fn default_fw_iters() -> usize {
    50
}
fn default_eval_episodes() -> usize {
    20
}

/// Algorithm coefficients. Defaults are the published settings where they
/// exist (`a, b, c, d, mu1, mu2, radius, epsilon`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    /// Epoch scale of the time-decay term.
    #[serde(default = "default_a")]
    pub a: f64,
    /// Scale applied to the normalized policy loss.
    #[serde(default = "default_b")]
    pub b: f64,
    /// Half-width, in standard deviations, of the reward-dispersion interval.
    #[serde(default = "default_c")]
    pub c: f64,
    /// Sharpness of the tanh ranking.
    #[serde(default = "default_d")]
    pub d: f64,
    #[serde(default = "default_mu")]
    pub mu1: f64,
    #[serde(default = "default_mu")]
    pub mu2: f64,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_k")]
    pub episodes_per_epoch: usize,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_fw_iters")]
    pub fw_iters: usize,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            a: default_a(),
            b: default_b(),
            c: default_c(),
            d: default_d(),
            mu1: default_mu(),
            mu2: default_mu(),
            radius: default_radius(),
            epsilon: default_epsilon(),
            episodes_per_epoch: default_k(),
            warmup_epochs: default_warmup(),
            fw_iters: default_fw_iters(),
            eval_episodes: default_eval_episodes(),
        }
    }
}

impl HyperConfig {
    /// `a`, `b` may be infinite (ablations); `c`, `d`, `mu*` may be zero.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(CamrlError::Config(what.to_string()));
        if !(self.a > 0.0) || !(self.b > 0.0) {
            return bad("a and b must be positive");
        }
        if !(self.c >= 0.0 && self.c.is_finite()) || !(self.d >= 0.0 && self.d.is_finite()) {
            return bad("c and d must be finite and nonnegative");
        }
        if !(self.mu1 >= 0.0 && self.mu1.is_finite()) || !(self.mu2 >= 0.0 && self.mu2.is_finite()) {
            return bad("mu1 and mu2 must be finite and nonnegative");
        }
        if !(self.radius > 0.0 && self.radius < 0.5) {
            return bad("radius must lie in (0, 0.5)");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if self.episodes_per_epoch == 0 || self.fw_iters == 0 || self.eval_episodes == 0 {
            return bad("episodes_per_epoch, fw_iters and eval_episodes must be >= 1");
        }
        if self.warmup_epochs == 0 {
            return bad("warmup_epochs must be >= 1 (the mode indicator needs history)");
        }
        Ok(())
    }
}

/// Cross-task evaluation results: `pm[s][t]` is the mean reward of the
/// network trained for task `s` when run on task `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutualEval {
    n: usize,
    pm: Vec<Option<f64>>,
    last_updated: Vec<Option<usize>>,
}

impl MutualEval {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            pm: vec![None; n * n],
            last_updated: vec![None; n * n],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, s: usize, t: usize) -> Option<f64> {
        self.pm[s * self.n + t]
    }

    pub fn last_updated(&self, s: usize, t: usize) -> Option<usize> {
        self.last_updated[s * self.n + t]
    }

    pub fn set(&mut self, s: usize, t: usize, value: f64, epoch: usize) {
        self.pm[s * self.n + t] = Some(value);
        self.last_updated[s * self.n + t] = Some(epoch);
    }

    /// Row-major PM with unset entries as `None`.
    pub fn pm(&self) -> &[Option<f64>] {
        &self.pm
    }

    pub fn pr(&self) -> Vec<usize> {
        performance_rank_matrix(self)
    }

    /// Draws `pairs` random ordered-distinct task pairs `(i, j)` and records
    /// `eval(i, j)` and `eval(j, i)`. Entries not drawn keep their values.
    pub fn update_with<R, F>(&mut self, rng: &mut R, pairs: usize, epoch: usize, mut eval: F) -> Vec<(usize, usize)>
    where
        R: Rng + ?Sized,
        F: FnMut(usize, usize, &mut R) -> f64,
    {
        let mut drawn = Vec::new();
        if self.n < 2 {
            return drawn;
        }
        for _ in 0..pairs {
            let i = rng.gen_range(0..self.n);
            let mut j = rng.gen_range(0..self.n - 1);
            if j >= i {
                j += 1;
            }
            let p_ij = eval(i, j, rng);
            let p_ji = eval(j, i, rng);
            self.set(i, j, p_ij, epoch);
            self.set(j, i, p_ji, epoch);
            drawn.push((i, j));
        }
        drawn
    }

    pub fn extend_for_new_task(&self) -> MutualEval {
        let n = self.n + 1;
        let mut out = MutualEval::new(n);
        for s in 0..self.n {
            for t in 0..self.n {
                out.pm[s * n + t] = self.get(s, t);
                out.last_updated[s * n + t] = self.last_updated(s, t);
            }
        }
        out
    }
}

/// Three random pair draws; each evaluates network `i` on task `j` and vice
/// versa with greedy actions over `eval_episodes` episodes.
pub fn mutual_eval_update<R: Rng + ?Sized>(
    trainers: &[TaskTrainer],
    tasks: &[GridTask],
    mutual: &mut MutualEval,
    rng: &mut R,
    hp: &HyperConfig,
    epoch: usize,
) -> Vec<(usize, usize)> {
    mutual.update_with(rng, MUTUAL_EVAL_PAIRS, epoch, |i, j, rng| {
        evaluate(&trainers[i], &tasks[j], hp.eval_episodes, rng)
    })
}

/// Column-wise ascending ranks of PM (bigger rank = better performance);
/// unset entries rank lowest, ties go to the lower row index first.
pub fn performance_rank_matrix(mutual: &MutualEval) -> Vec<usize> {
    let n = mutual.n;
    let mut pr = vec![0; n * n];
    for t in 0..n {
        let column: Vec<f64> = (0..n)
            .map(|s| mutual.get(s, t).unwrap_or(f64::NEG_INFINITY))
            .collect();
        for (s, r) in ascending_rank(&column).into_iter().enumerate() {
            pr[s * n + t] = r;
        }
    }
    pr
}

/// Policy losses of the other tasks and the descending rank of every loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossVector {
    pub others: Vec<f64>,
    pub rank1: Vec<usize>,
}

/// Largest loss gets rank 1, so the hardest tasks are paired with the
/// largest transfer entries.
pub fn loss_vector(policy_losses: &[f64], t: usize) -> LossVector {
    let others = policy_losses
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != t)
        .map(|(_, &v)| v)
        .collect();
    LossVector {
        others,
        rank1: hard_rank(policy_losses),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityMeasure {
    /// Cosine similarity of flattened critic parameters.
    CriticCosine,
    /// Negative RMS distance of actor embeddings over sampled states.
    EmbeddingDistance,
}

/// Similarity of every task to task `t` and its descending rank.
pub fn similarity_vector<R: Rng + ?Sized>(
    trainers: &[TaskTrainer],
    t: usize,
    measure: SimilarityMeasure,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let sims = match measure {
        SimilarityMeasure::CriticCosine => {
            let own = trainers[t].critic.as_flat();
            trainers
                .iter()
                .map(|tr| cosine_similarity(tr.critic.as_flat(), own))
                .collect::<Result<Vec<_>>>()?
        }
        SimilarityMeasure::EmbeddingDistance => {
            let obs_dim = trainers[t].actor.in_dim();
            let states: Vec<Vec<f64>> = (0..EMBEDDING_SAMPLES)
                .map(|_| (0..obs_dim).map(|_| rng.gen::<f64>()).collect())
                .collect();
            let own = trainers[t].embedding(&states)?;
            trainers
                .iter()
                .map(|tr| {
                    let other = tr.embedding(&states)?;
                    let mean_sq: f64 = own
                        .iter()
                        .zip(&other)
                        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
                        .sum::<f64>()
                        / states.len() as f64;
                    Ok(-mean_sq.sqrt())
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let rank2 = hard_rank(&sims);
    Ok((sims, rank2))
}

/// Training order within the current curriculum cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    /// `pi`: tasks trained so far this cycle, in order.
    pub order: Vec<usize>,
    /// `U`: tasks not yet trained this cycle.
    pub untrained: BTreeSet<usize>,
}

impl CurriculumState {
    pub fn new(n: usize) -> Self {
        Self {
            order: Vec::new(),
            untrained: (0..n).collect(),
        }
    }

    pub fn reset(&mut self, n: usize) {
        *self = Self::new(n);
    }

    pub fn mark_trained(&mut self, t: usize) {
        if self.untrained.remove(&t) {
            self.order.push(t);
        }
    }

    pub fn add_task(&mut self, t: usize) {
        self.untrained.insert(t);
    }
}

/// Prior difficulty information: `ranks[i] = Some(r)` with `r = 1` the task
/// with the best public performance (the easiest).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PriorKnowledge {
    pub ranks: Vec<Option<usize>>,
}

impl PriorKnowledge {
    pub fn present(&self) -> Vec<usize> {
        self.ranks
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.map(|_| i))
            .collect()
    }
}

/// Everything the composite objective for task `t` needs, snapshotted so the
/// solver sees a read-only function of `b_t^o`.
#[derive(Debug, Clone)]
pub struct CompositeProblem {
    pub t: usize,
    pub n_tasks: usize,
    pub policy_loss: f64,
    pub other_losses: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu1: f64,
    pub mu2: f64,
    pub d: f64,
    /// `w_t`, flattened.
    pub weights: Vec<f64>,
    /// One entry per `s` in `U - t`.
    pub couplings: Vec<Coupling>,
    /// Expectation-1 ranking: positions in `b` and their target ranks.
    pub eval_rank: Option<SubRanking>,
    pub rank1: Vec<usize>,
    pub rank2: Vec<usize>,
    pub prior: Option<SubRanking>,
}

/// Residual `w_s - sum_{j<i} B[pi(j)][s] w_pi(j)` for an untrained task `s`.
#[derive(Debug, Clone)]
pub struct Coupling {
    /// Position of task `s` in `b_t^o`.
    pub column: usize,
    pub base: Vec<f64>,
    base_dot_w: f64,
    base_norm_sq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubRanking {
    pub columns: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Inputs for [`CompositeProblem::build`].
pub struct CompositeInputs<'a> {
    pub t: usize,
    pub b: &'a TransferMatrix,
    /// Flattened parameters of every task.
    pub weights: &'a [Vec<f64>],
    pub policy_losses: &'a [f64],
    pub mutual: &'a MutualEval,
    pub rank2: &'a [usize],
    pub curriculum: &'a CurriculumState,
    pub hp: &'a HyperConfig,
    pub lambda: &'a [f64],
    pub prior: Option<&'a PriorKnowledge>,
}

impl CompositeProblem {
    pub fn build(inp: &CompositeInputs<'_>) -> Result<Self> {
        let n = inp.b.size();
        let t = inp.t;
        if t >= n {
            return Err(CamrlError::InvalidArgument(format!("task {t} out of range for {n} tasks")));
        }
        check_len(n, inp.weights.len())?;
        check_len(n, inp.policy_losses.len())?;
        check_len(n, inp.rank2.len())?;
        let prior = match inp.prior {
            Some(p) => {
                check_len(n, p.ranks.len())?;
                prior_sub_ranking(p, t)
            }
            None => None,
        };
        let expected_lambda = if inp.prior.is_some() { 6 } else { 5 };
        check_len(expected_lambda, inp.lambda.len())?;

        let losses = loss_vector(inp.policy_losses, t);
        let w_t = inp.weights[t].clone();
        let couplings = inp
            .curriculum
            .untrained
            .iter()
            .filter(|&&s| s != t)
            .map(|&s| {
                let mut base = inp.weights[s].clone();
                for &j in &inp.curriculum.order {
                    let coef = inp.b.get(j, s);
                    if coef != 0.0 {
                        crate::numcore::axpy(-coef, &inp.weights[j], &mut base);
                    }
                }
                Coupling::new(column_of_task(t, s), base, &w_t)
            })
            .collect::<Result<Vec<_>>>()?;

        let evaluated: Vec<(usize, f64)> = (0..n)
            .filter(|&i| i != t)
            .filter_map(|i| inp.mutual.get(t, i).map(|p| (column_of_task(t, i), p)))
            .collect();
        let eval_rank = if evaluated.is_empty() {
            None
        } else {
            let p: Vec<f64> = evaluated.iter().map(|&(_, p)| p).collect();
            Some(SubRanking {
                columns: evaluated.iter().map(|&(c, _)| c).collect(),
                targets: hard_rank(&p),
            })
        };

        Ok(Self {
            t,
            n_tasks: n,
            policy_loss: inp.policy_losses[t],
            other_losses: losses.others,
            lambda: inp.lambda.to_vec(),
            mu1: inp.hp.mu1,
            mu2: inp.hp.mu2,
            d: inp.hp.d,
            weights: w_t,
            couplings,
            eval_rank,
            rank1: losses.rank1,
            rank2: inp.rank2.to_vec(),
            prior,
        })
    }

    pub fn dim(&self) -> usize {
        self.n_tasks - 1
    }

    fn check_point(&self, b: &[f64]) -> Result<()> {
        check_len(self.dim(), b.len())?;
        if b.iter().any(|&v| v < 0.0) {
            return Err(CamrlError::Infeasible(format!("negative transfer entry in {b:?}")));
        }
        Ok(())
    }

    /// Full row `B[t][*]` with the unit diagonal reinserted.
    fn full_row(&self, b: &[f64]) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.n_tasks);
        row.extend_from_slice(&b[..self.t]);
        row.push(1.0);
        row.extend_from_slice(&b[self.t..]);
        row
    }

    fn sub_values(sub: &SubRanking, b: &[f64]) -> Vec<f64> {
        sub.columns.iter().map(|&c| b[c]).collect()
    }

    /// Unweighted terms, in order: loss coupling, parameter coupling,
    /// evaluation ranking, difficulty ranking, similarity ranking and (if
    /// present) the prior-knowledge ranking.
    pub fn terms(&self, b: &[f64]) -> Vec<f64> {
        let l1: f64 = b.iter().sum();
        let t0 = (1.0 + self.mu1 * l1) * self.policy_loss - self.mu2 * dot(b, &self.other_losses);
        let t1: f64 = self.couplings.iter().map(|c| c.residual_sq(b[c.column], &self.weights)).sum();
        let t2 = self
            .eval_rank
            .as_ref()
            .map_or(0.0, |sub| rank_loss_raw(&Self::sub_values(sub, b), &sub.targets, self.d));
        let row = self.full_row(b);
        let t3 = rank_loss_raw(&row, &self.rank1, self.d);
        let t4 = rank_loss_raw(&row, &self.rank2, self.d);
        let mut out = vec![t0, t1, t2, t3, t4];
        if self.lambda.len() == 6 {
            out.push(
                self.prior
                    .as_ref()
                    .map_or(0.0, |sub| rank_loss_raw(&Self::sub_values(sub, b), &sub.targets, self.d)),
            );
        }
        out
    }

    pub fn objective(&self, b: &[f64]) -> Result<f64> {
        self.check_point(b)?;
        Ok(self.objective_unchecked(b))
    }

    pub fn gradient(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check_point(b)?;
        Ok(self.gradient_unchecked(b))
    }

    fn objective_unchecked(&self, b: &[f64]) -> f64 {
        self.terms(b).iter().zip(&self.lambda).map(|(t, l)| t * l).sum()
    }

    fn gradient_unchecked(&self, b: &[f64]) -> Vec<f64> {
        let lam = &self.lambda;
        let mut grad: Vec<f64> = self
            .other_losses
            .iter()
            .map(|&l| lam[0] * (self.mu1 * self.policy_loss - self.mu2 * l))
            .collect();
        if lam[1] != 0.0 {
            for c in &self.couplings {
                grad[c.column] += lam[1] * c.residual_sq_grad(b[c.column], &self.weights);
            }
        }
        if lam[2] != 0.0 {
            if let Some(sub) = &self.eval_rank {
                let g = rank_loss_grad_raw(&Self::sub_values(sub, b), &sub.targets, self.d);
                for (&col, gv) in sub.columns.iter().zip(g) {
                    grad[col] += lam[2] * gv;
                }
            }
        }
        if lam[3] != 0.0 || lam[4] != 0.0 {
            let row = self.full_row(b);
            let g3 = rank_loss_grad_raw(&row, &self.rank1, self.d);
            let g4 = rank_loss_grad_raw(&row, &self.rank2, self.d);
            for (k, g) in grad.iter_mut().enumerate() {
                let j = task_of_column(self.t, k);
                *g += lam[3] * g3[j] + lam[4] * g4[j];
            }
        }
        if lam.len() == 6 && lam[5] != 0.0 {
            if let Some(sub) = &self.prior {
                let g = rank_loss_grad_raw(&Self::sub_values(sub, b), &sub.targets, self.d);
                for (&col, gv) in sub.columns.iter().zip(g) {
                    grad[col] += lam[5] * gv;
                }
            }
        }
        grad
    }

    /// Weight on `L(w_t)` in the objective: `lambda0 (1 + mu1 |b|_1)`.
    pub fn policy_loss_weight(&self, b: &[f64]) -> f64 {
        self.lambda[0] * (1.0 + self.mu1 * b.iter().sum::<f64>())
    }

    /// Gradient of the parameter-coupling term with respect to `w_t`:
    /// `lambda1 * sum_s -2 B_ts (base_s - B_ts w_t)`.
    pub fn coupling_grad_wrt_weights(&self, b: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.weights.len()];
        for c in &self.couplings {
            let coef = b[c.column];
            if coef == 0.0 {
                continue;
            }
            for ((g, base), w) in grad.iter_mut().zip(&c.base).zip(&self.weights) {
                *g += -2.0 * self.lambda[1] * coef * (base - coef * w);
            }
        }
        grad
    }
}

impl Coupling {
    fn new(column: usize, base: Vec<f64>, w_t: &[f64]) -> Result<Self> {
        check_len(w_t.len(), base.len())?;
        Ok(Self {
            column,
            base_dot_w: dot(&base, w_t),
            base_norm_sq: norm_sq(&base),
            base,
        })
    }

    /// `|base - coef * w|^2` expanded around the cached products.
    fn residual_sq(&self, coef: f64, w: &[f64]) -> f64 {
        self.base_norm_sq - 2.0 * coef * self.base_dot_w + coef * coef * norm_sq(w)
    }

    fn residual_sq_grad(&self, coef: f64, w: &[f64]) -> f64 {
        -2.0 * self.base_dot_w + 2.0 * coef * norm_sq(w)
    }
}

impl Objective for CompositeProblem {
    fn value(&self, x: &[f64]) -> f64 {
        self.objective_unchecked(x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.gradient_unchecked(x)
    }
}

pub fn composite_objective(problem: &CompositeProblem, b: &[f64], radius: f64) -> Result<f64> {
    if !is_feasible(b, radius) {
        return Err(CamrlError::Infeasible(format!("b = {b:?} outside radius {radius}")));
    }
    problem.objective(b)
}

pub fn composite_gradient(problem: &CompositeProblem, b: &[f64], radius: f64) -> Result<Vec<f64>> {
    if !is_feasible(b, radius) {
        return Err(CamrlError::Infeasible(format!("b = {b:?} outside radius {radius}")));
    }
    problem.gradient(b)
}

/// Prior ranks of the tasks other than `t`, renormalized to `1..=q` and
/// flipped so the easiest task gets the largest target (smallest transfer).
fn prior_sub_ranking(prior: &PriorKnowledge, t: usize) -> Option<SubRanking> {
    let present: Vec<usize> = prior.present().into_iter().filter(|&i| i != t).collect();
    if present.len() < 2 {
        return None;
    }
    let ranks: Vec<f64> = present.iter().map(|&i| prior.ranks[i].unwrap() as f64).collect();
    let q = present.len();
    // ascending_rank: 1 = easiest
    let targets = ascending_rank(&ranks).into_iter().map(|r| q + 1 - r).collect();
    Some(SubRanking {
        columns: present.iter().map(|&i| column_of_task(t, i)).collect(),
        targets,
    })
}

/// Ranking loss pushing smaller transfers toward tasks with better public
/// performance. `row` is `b_t^o`; returns 0 with fewer than two priors.
pub fn prior_knowledge_loss(prior: &PriorKnowledge, t: usize, row: &[f64], d: f64) -> Result<f64> {
    check_len(prior.ranks.len(), row.len() + 1)?;
    Ok(prior_sub_ranking(prior, t).map_or(0.0, |sub| {
        rank_loss_raw(&CompositeProblem::sub_values(&sub, row), &sub.targets, d)
    }))
}

pub fn prior_knowledge_loss_grad(prior: &PriorKnowledge, t: usize, row: &[f64], d: f64) -> Result<Vec<f64>> {
    check_len(prior.ranks.len(), row.len() + 1)?;
    let mut grad = vec![0.0; row.len()];
    if let Some(sub) = prior_sub_ranking(prior, t) {
        let g = rank_loss_grad_raw(&CompositeProblem::sub_values(&sub, row), &sub.targets, d);
        for (&c, v) in sub.columns.iter().zip(g) {
            grad[c] = v;
        }
    }
    Ok(grad)
}

/// Writes an optimized `b_t^o` back and re-checks the row budget.
pub fn write_back(b: &mut TransferMatrix, t: usize, row: &[f64], radius: f64) -> Result<()> {
    if !is_feasible(row, radius) {
        return Err(CamrlError::Infeasible(format!(
            "optimized row {row:?} has L1 {} > {radius} + {FEASIBILITY_TOL}",
            row.iter().sum::<f64>()
        )));
    }
    b.set_outgoing_row(t, row)
}

/// A synthetic composite problem with `n_tasks` tasks and `dim`-dimensional
/// weights, plus its feasible start point. Used by the solver benchmark.
pub fn random_problem<R: Rng + ?Sized>(rng: &mut R, n_tasks: usize, dim: usize) -> Result<(CompositeProblem, Vec<f64>)> {
    if n_tasks < 2 || dim == 0 {
        return Err(CamrlError::InvalidArgument(format!(
            "need at least 2 tasks and dim >= 1, got {n_tasks} and {dim}"
        )));
    }
    let hp = HyperConfig::default();
    let mut b = TransferMatrix::identity(n_tasks)?;
    for r in 0..n_tasks {
        let raw: Vec<f64> = (0..n_tasks - 1).map(|_| rng.gen_range(0.0..0.02)).collect();
        b.set_outgoing_row(r, &crate::solver::project_box_l1(&raw, hp.radius))?;
    }
    let weights: Vec<Vec<f64>> = (0..n_tasks)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let losses: Vec<f64> = (0..n_tasks).map(|_| rng.gen_range(-3.0..1.0)).collect();
    let mut mutual = MutualEval::new(n_tasks);
    for s in 0..n_tasks {
        for t in 0..n_tasks {
            if s != t && rng.gen_bool(0.7) {
                mutual.set(s, t, rng.gen_range(-1.0..1.0), 0);
            }
        }
    }
    let sims: Vec<f64> = (0..n_tasks).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut curriculum = CurriculumState::new(n_tasks);
    for _ in 0..rng.gen_range(0..n_tasks) {
        let pick = *curriculum
            .untrained
            .iter()
            .nth(rng.gen_range(0..curriculum.untrained.len()))
            .expect("nonempty");
        curriculum.mark_trained(pick);
    }
    let t = *curriculum
        .untrained
        .iter()
        .nth(rng.gen_range(0..curriculum.untrained.len()))
        .expect("nonempty");
    let lambda: Vec<f64> = (0..5).map(|_| rng.gen_range(0.01..2.0)).collect();
    let rank2 = hard_rank(&sims);
    let problem = CompositeProblem::build(&CompositeInputs {
        t,
        b: &b,
        weights: &weights,
        policy_losses: &losses,
        mutual: &mutual,
        rank2: &rank2,
        curriculum: &curriculum,
        hp: &hp,
        lambda: &lambda,
        prior: None,
    })?;
    Ok((problem, b.outgoing_row(t)))
}
