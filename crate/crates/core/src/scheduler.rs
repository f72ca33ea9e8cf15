//! Epoch loop: warmup, the mode indicator, curriculum task selection,
//! transfer-matrix updates and loss-weight adjustment.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CamrlError, Result};
use crate::solver::fw_vanilla;
use crate::tasks::{evaluate, train_step, ExtraGradient, GridTask, NetConfig, StepStats, TaskTrainer};
use crate::transfer::{
    extend_for_new_task, init_transfer, mutual_eval_update, performance_rank_matrix, similarity_vector, write_back,
    CompositeInputs, CompositeProblem, CurriculumState, HyperConfig, MutualEval, PriorKnowledge, SimilarityMeasure,
    TransferMatrix,
};

/// Weight of the composite objective in a curriculum task's training loss.
pub const OBJECTIVE_BLEND: f64 = 0.01;

const STREAM_SUITE: u64 = 1;
const STREAM_SCHEDULER: u64 = 2;
const STREAM_MUTUAL: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_SIMILARITY: u64 = 5;
const STREAM_TASK_BASE: u64 = 100;

/// Named sub-stream of the master seed.
pub fn sub_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed for the task-suite generator derived from the master seed.
pub fn suite_seed(seed: u64) -> u64 {
    sub_stream(seed, STREAM_SUITE).next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Parallel,
    Curriculum,
}

/// Which side of the `u < I_mul` draw selects curriculum training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImulBranch {
    /// `u < I_mul` selects curriculum training.
    #[default]
    Prose,
    /// `u < I_mul` selects parallel training.
    PaperAlgorithm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImulTerms {
    pub term_i: f64,
    pub term_ii: f64,
    pub term_iii: f64,
    pub imul: f64,
}

/// Histories the scheduler keeps across epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochState {
    /// Completed epochs.
    pub n: usize,
    /// Policy loss of each task, one entry per epoch the task trained.
    pub loss_history: Vec<Vec<f64>>,
    /// Greedy evaluation reward of each task, one entry per epoch.
    pub reward_history: Vec<Vec<f64>>,
    /// Values of each composite-objective term, one entry per curriculum epoch.
    pub term_history: Vec<Vec<f64>>,
    pub mode_log: Vec<Mode>,
    pub curriculum: CurriculumState,
}

impl EpochState {
    pub fn new(n_tasks: usize, n_terms: usize) -> Self {
        Self {
            n: 0,
            loss_history: vec![Vec::new(); n_tasks],
            reward_history: vec![Vec::new(); n_tasks],
            term_history: vec![Vec::new(); n_terms],
            mode_log: Vec::new(),
            curriculum: CurriculumState::new(n_tasks),
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.loss_history.len()
    }

    /// Latest policy loss of every task; tasks that never trained report 0.
    pub fn latest_losses(&self) -> Vec<f64> {
        self.loss_history.iter().map(|h| h.last().copied().unwrap_or(0.0)).collect()
    }
}

/// Loss weights and the standard errors they were derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperState {
    pub lambda: Vec<f64>,
    pub sigma: Vec<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Sample standard deviation over `sqrt(n)`; zero below two samples.
pub fn standard_error(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// `lambda_0 = 1 / (2 sigma_0^2 + eps)`, `lambda_i = 1 / (4 sigma_i^2 + eps)`.
pub fn update_lambdas(term_history: &[Vec<f64>], epsilon: f64) -> HyperState {
    let sigma: Vec<f64> = term_history.iter().map(|h| standard_error(h)).collect();
    let lambda = sigma
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let k = if i == 0 { 2.0 } else { 4.0 };
            1.0 / (k * s * s + epsilon)
        })
        .collect();
    HyperState { lambda, sigma }
}

/// Mean over tasks of the last policy loss z-scored against that task's
/// earlier losses. Tasks with no earlier history or zero spread contribute 0.
pub fn normalized_loss(loss_history: &[Vec<f64>]) -> f64 {
    let z: Vec<f64> = loss_history
        .iter()
        .filter(|h| !h.is_empty())
        .map(|h| {
            let (last, prior) = h.split_last().expect("nonempty");
            if prior.is_empty() {
                return 0.0;
            }
            let sd = population_std(prior);
            if sd > 0.0 {
                (last - mean(prior)) / sd
            } else {
                0.0
            }
        })
        .collect();
    if z.is_empty() {
        0.0
    } else {
        mean(&z)
    }
}

/// Fraction of `rewards` strictly outside `mean +- c * std` (population std).
pub fn dispersion_fraction(rewards: &[f64], c: f64) -> f64 {
    let m = mean(rewards);
    let half = c * population_std(rewards);
    let outside = rewards.iter().filter(|&&r| r < m - half || r > m + half).count();
    outside as f64 / rewards.len() as f64
}

/// The mode indicator. `weights` multiply the three terms (defaults are 1/3).
pub fn compute_imul(state: &EpochState, hp: &HyperConfig, weights: &[f64; 3]) -> Result<ImulTerms> {
    let last_rewards: Vec<f64> = state.reward_history.iter().filter_map(|h| h.last().copied()).collect();
    if last_rewards.is_empty() || last_rewards.len() != state.n_tasks() {
        return Err(CamrlError::InvalidArgument(
            "mode indicator needs at least one evaluated epoch for every task".into(),
        ));
    }
    let term_i = (-(state.n as f64) / hp.a).exp();
    let exponent = normalized_loss(&state.loss_history) * hp.b;
    // b = inf with a zero normalized loss: take the limit along L_nor = 0
    let exponent = if exponent.is_nan() { 0.0 } else { exponent };
    let term_ii = (-exponent).exp().min(1.0);
    let term_iii = dispersion_fraction(&last_rewards, hp.c);
    let imul = weights[0] * term_i + weights[1] * term_ii + weights[2] * term_iii;
    Ok(ImulTerms {
        term_i,
        term_ii,
        term_iii,
        imul,
    })
}

pub fn switch_mode(imul: f64, u: f64, branch: ImulBranch) -> Mode {
    let below = u < imul;
    match (branch, below) {
        (ImulBranch::Prose, true) | (ImulBranch::PaperAlgorithm, false) => Mode::Curriculum,
        _ => Mode::Parallel,
    }
}

/// Lowest objective wins; ties go to the lowest task index.
pub fn argmin_task(candidates: &[(usize, f64)]) -> Option<(usize, f64)> {
    candidates.iter().copied().fold(None, |best, (t, v)| match best {
        Some((bt, bv)) if bv < v || (bv == v && bt < t) => Some((bt, bv)),
        _ => Some((t, v)),
    })
}

/// Ablation switches. At most one mode override may be set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Always train in curriculum mode after warmup.
    pub disable_mode_switch: bool,
    /// Always train in parallel mode (the single-task baseline).
    pub force_parallel: bool,
    pub a_infinite: bool,
    pub b_infinite: bool,
    pub c_zero: bool,
    pub d_zero: bool,
    pub no_lambda2: bool,
    pub no_lambda3: bool,
    pub no_lambda4: bool,
    /// Fixed loss weights instead of automatic adjustment.
    pub freeze_lambda: Option<Vec<f64>>,
}

/// Effect of [`AblationFlags`] on the scheduler.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Controls {
    pub mode_override: Option<Mode>,
    pub zeroed_lambdas: Vec<usize>,
    pub frozen_lambda: Option<Vec<f64>>,
}

pub fn ablation_controls(hp: &HyperConfig, flags: &AblationFlags) -> Result<(HyperConfig, Controls)> {
    if flags.disable_mode_switch && flags.force_parallel {
        return Err(CamrlError::Config(
            "disable_mode_switch and force_parallel cannot both be set".into(),
        ));
    }
    let mut hp = hp.clone();
    if flags.a_infinite {
        hp.a = f64::INFINITY;
    }
    if flags.b_infinite {
        hp.b = f64::INFINITY;
    }
    if flags.c_zero {
        hp.c = 0.0;
    }
    if flags.d_zero {
        hp.d = 0.0;
    }
    let mode_override = if flags.disable_mode_switch {
        Some(Mode::Curriculum)
    } else if flags.force_parallel {
        Some(Mode::Parallel)
    } else {
        None
    };
    let zeroed_lambdas = [(flags.no_lambda2, 2), (flags.no_lambda3, 3), (flags.no_lambda4, 4)]
        .into_iter()
        .filter_map(|(on, i)| on.then_some(i))
        .collect();
    if let Some(l) = &flags.freeze_lambda {
        if l.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(CamrlError::Config("frozen lambdas must be finite and nonnegative".into()));
        }
    }
    Ok((
        hp,
        Controls {
            mode_override,
            zeroed_lambdas,
            frozen_lambda: flags.freeze_lambda.clone(),
        },
    ))
}

/// Everything that parameterizes a training run apart from the task list.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub hp: HyperConfig,
    pub learning_rate: f64,
    pub net: NetConfig,
    pub flags: AblationFlags,
    pub imul_branch: ImulBranch,
    pub imul_weights: [f64; 3],
    pub similarity: SimilarityMeasure,
    pub prior: Option<PriorKnowledge>,
}

impl Settings {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            hp: HyperConfig::default(),
            learning_rate: crate::tasks::DEFAULT_LEARNING_RATE,
            net: NetConfig::default(),
            flags: AblationFlags::default(),
            imul_branch: ImulBranch::default(),
            imul_weights: [1.0 / 3.0; 3],
            similarity: SimilarityMeasure::CriticCosine,
            prior: None,
        }
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mode: Mode,
    pub warmup: bool,
    pub imul: Option<ImulTerms>,
    pub u: Option<f64>,
    pub selected_task: Option<usize>,
    pub objective: Option<f64>,
    pub fw_gap: Option<f64>,
    pub terms: Option<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub policy_loss: Vec<f64>,
    pub eval_reward: Vec<f64>,
    /// Row-major transfer matrix.
    pub b: Vec<f64>,
    /// Row-major performance ranks.
    pub pr: Vec<usize>,
}

/// A training run in progress.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub tasks: Vec<GridTask>,
    pub trainers: Vec<TaskTrainer>,
    pub b: TransferMatrix,
    pub mutual: MutualEval,
    pub state: EpochState,
    pub hyper: HyperState,
    pub settings: Settings,
    hp: HyperConfig,
    controls: Controls,
    sched_rng: ChaCha8Rng,
    mutual_rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    sim_rng: ChaCha8Rng,
}

impl Experiment {
    pub fn new(settings: Settings, tasks: Vec<GridTask>) -> Result<Self> {
        settings.hp.validate()?;
        if tasks.is_empty() {
            return Err(CamrlError::Config("at least one task is required".into()));
        }
        for t in &tasks {
            t.validate()?;
        }
        if !(settings.learning_rate >= 0.0 && settings.learning_rate.is_finite()) {
            return Err(CamrlError::Config("learning_rate must be finite and nonnegative".into()));
        }
        if settings.imul_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(CamrlError::Config("imul weights must be finite and nonnegative".into()));
        }
        let n = tasks.len();
        if let Some(p) = &settings.prior {
            validate_prior(p, n)?;
        }
        let (hp, controls) = ablation_controls(&settings.hp, &settings.flags)?;
        let n_terms = if settings.prior.is_some() { 6 } else { 5 };
        if let Some(l) = &controls.frozen_lambda {
            if l.len() != n_terms {
                return Err(CamrlError::Config(format!(
                    "freeze_lambda needs {n_terms} entries, got {}",
                    l.len()
                )));
            }
        }
        let trainers = (0..n)
            .map(|t| {
                TaskTrainer::new(
                    &settings.net,
                    settings.learning_rate,
                    sub_stream(settings.seed, STREAM_TASK_BASE + t as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let state = EpochState::new(n, n_terms);
        let mut exp = Self {
            tasks,
            trainers,
            b: init_transfer(n)?,
            mutual: MutualEval::new(n),
            state,
            hyper: HyperState {
                lambda: Vec::new(),
                sigma: Vec::new(),
            },
            hp,
            controls,
            sched_rng: sub_stream(settings.seed, STREAM_SCHEDULER),
            mutual_rng: sub_stream(settings.seed, STREAM_MUTUAL),
            eval_rng: sub_stream(settings.seed, STREAM_EVAL),
            sim_rng: sub_stream(settings.seed, STREAM_SIMILARITY),
            settings,
        };
        exp.refresh_lambdas();
        Ok(exp)
    }

    /// Effective coefficients after ablation overrides.
    pub fn hyper_config(&self) -> &HyperConfig {
        &self.hp
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    fn refresh_lambdas(&mut self) {
        let mut hs = update_lambdas(&self.state.term_history, self.hp.epsilon);
        if let Some(l) = &self.controls.frozen_lambda {
            hs.lambda = l.clone();
        }
        for &i in &self.controls.zeroed_lambdas {
            hs.lambda[i] = 0.0;
        }
        self.hyper = hs;
    }

    fn problem_for(&mut self, t: usize) -> Result<CompositeProblem> {
        let (_, rank2) = similarity_vector(&self.trainers, t, self.settings.similarity, &mut self.sim_rng)?;
        let weights: Vec<Vec<f64>> = self.trainers.iter().map(|tr| tr.weights()).collect();
        let losses = self.state.latest_losses();
        CompositeProblem::build(&CompositeInputs {
            t,
            b: &self.b,
            weights: &weights,
            policy_losses: &losses,
            mutual: &self.mutual,
            rank2: &rank2,
            curriculum: &self.state.curriculum,
            hp: &self.hp,
            lambda: &self.hyper.lambda,
            prior: self.settings.prior.as_ref(),
        })
    }

    /// Untrained task with the smallest objective at its current outgoing
    /// row. Starts a new cycle when every task has trained.
    pub fn select_next_task(&mut self) -> Result<(usize, f64)> {
        if self.state.curriculum.untrained.is_empty() {
            self.state.curriculum.reset(self.n_tasks());
        }
        let candidates: Vec<usize> = self.state.curriculum.untrained.iter().copied().collect();
        let mut scored = Vec::with_capacity(candidates.len());
        for t in candidates {
            let p = self.problem_for(t)?;
            scored.push((t, p.objective(&self.b.outgoing_row(t))?));
        }
        Ok(argmin_task(&scored).expect("nonempty candidate set"))
    }

    fn decide_mode(&mut self, warmup: bool) -> Result<(Mode, Option<ImulTerms>, Option<f64>)> {
        if warmup {
            return Ok((Mode::Parallel, None, None));
        }
        let terms = compute_imul(&self.state, &self.hp, &self.settings.imul_weights)?;
        // always drawn so that overrides leave the stream aligned
        let u: f64 = self.sched_rng.gen();
        let mode = self
            .controls
            .mode_override
            .unwrap_or_else(|| switch_mode(terms.imul, u, self.settings.imul_branch));
        Ok((mode, Some(terms), Some(u)))
    }

    /// One epoch; the first `warmup_epochs` epochs are parallel.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.state.n;
        let warmup = epoch < self.hp.warmup_epochs;
        let (mode, imul, u) = self.decide_mode(warmup)?;
        let k = self.hp.episodes_per_epoch;
        let mut selected = None;
        let mut objective = None;
        let mut fw_gap = None;
        let mut terms = None;
        match mode {
            Mode::Parallel => {
                let stats: Vec<StepStats> = self
                    .trainers
                    .par_iter_mut()
                    .zip(self.tasks.par_iter())
                    .map(|(tr, task)| train_step(tr, task, k, None))
                    .collect::<Result<_>>()?;
                for (h, s) in self.state.loss_history.iter_mut().zip(&stats) {
                    h.push(s.policy_loss);
                }
            }
            Mode::Curriculum => {
                let (t, _) = self.select_next_task()?;
                let problem = self.problem_for(t)?;
                let extra = if problem.dim() == 0 {
                    None
                } else {
                    let x0 = self.b.outgoing_row(t);
                    let trace = fw_vanilla(&problem, &x0, self.hp.radius, self.hp.fw_iters)?;
                    write_back(&mut self.b, t, &trace.best, self.hp.radius)?;
                    let tv = problem.terms(&trace.best);
                    for (h, v) in self.state.term_history.iter_mut().zip(&tv) {
                        h.push(*v);
                    }
                    objective = Some(trace.best_objective);
                    fw_gap = Some(trace.final_best_gap());
                    terms = Some(tv);
                    let mut grad = problem.coupling_grad_wrt_weights(&trace.best);
                    grad.iter_mut().for_each(|g| *g *= OBJECTIVE_BLEND);
                    Some(ExtraGradient {
                        policy_loss_scale: OBJECTIVE_BLEND * problem.policy_loss_weight(&trace.best),
                        grad,
                    })
                };
                let s = train_step(&mut self.trainers[t], &self.tasks[t], k, extra.as_ref())?;
                self.state.loss_history[t].push(s.policy_loss);
                self.state.curriculum.mark_trained(t);
                selected = Some(t);
            }
        }
        let eval: Vec<f64> = (0..self.n_tasks())
            .map(|t| evaluate(&self.trainers[t], &self.tasks[t], self.hp.eval_episodes, &mut self.eval_rng))
            .collect();
        for (t, r) in eval.iter().enumerate() {
            self.state.reward_history[t].push(*r);
            self.mutual.set(t, t, *r, epoch);
        }
        mutual_eval_update(&self.trainers, &self.tasks, &mut self.mutual, &mut self.mutual_rng, &self.hp, epoch);
        self.refresh_lambdas();
        self.state.mode_log.push(mode);
        self.state.n += 1;
        Ok(EpochRecord {
            epoch,
            mode,
            warmup,
            imul,
            u,
            selected_task: selected,
            objective,
            fw_gap,
            terms,
            lambda: self.hyper.lambda.clone(),
            policy_loss: self.state.latest_losses(),
            eval_reward: eval,
            b: self.b.as_slice().to_vec(),
            pr: performance_rank_matrix(&self.mutual),
        })
    }

    /// Whatever is left of the warmup, then `epochs` further main-loop
    /// epochs. `sink` sees every record.
    pub fn run<F>(&mut self, epochs: usize, mut sink: F) -> Result<()>
    where
        F: FnMut(&EpochRecord) -> Result<()>,
    {
        let total = self.state.n.max(self.hp.warmup_epochs) + epochs;
        while self.state.n < total {
            let rec = self.run_epoch()?;
            sink(&rec)?;
        }
        Ok(())
    }

    /// Adds a task without touching the existing trainers. The new trainer
    /// takes one epoch of its own so that its loss and reward histories are
    /// populated before the next mode decision.
    pub fn add_task(&mut self, task: GridTask) -> Result<()> {
        task.validate()?;
        let t = self.n_tasks();
        let mut trainer = TaskTrainer::new(
            &self.settings.net,
            self.settings.learning_rate,
            sub_stream(self.settings.seed, STREAM_TASK_BASE + t as u64),
        )?;
        let s = train_step(&mut trainer, &task, self.hp.episodes_per_epoch, None)?;
        let r = evaluate(&trainer, &task, self.hp.eval_episodes, &mut self.eval_rng);
        self.b = extend_for_new_task(&self.b);
        self.mutual = self.mutual.extend_for_new_task();
        self.mutual.set(t, t, r, self.state.n);
        self.state.loss_history.push(vec![s.policy_loss]);
        self.state.reward_history.push(vec![r]);
        self.state.curriculum.add_task(t);
        if let Some(p) = &mut self.settings.prior {
            p.ranks.push(None);
        }
        self.tasks.push(task);
        self.trainers.push(trainer);
        Ok(())
    }
}

fn validate_prior(p: &PriorKnowledge, n: usize) -> Result<()> {
    if p.ranks.len() != n {
        return Err(CamrlError::Config(format!(
            "prior ranks cover {} tasks, suite has {n}",
            p.ranks.len()
        )));
    }
    let mut present: Vec<usize> = p.ranks.iter().flatten().copied().collect();
    present.sort_unstable();
    if present.iter().enumerate().any(|(i, &r)| r != i + 1) {
        return Err(CamrlError::Config("present prior ranks must be a permutation of 1..q".into()));
    }
    Ok(())
}
