//! Seeded gridworld tasks of graded difficulty and a tiny actor-critic.
//!
//! Every task shares one observation encoding, the normalized
//! `(x, y, goal_x, goal_y)` vector, so all trainers have identical
//! parameter shapes and can be coupled through the transfer matrix.

use std::collections::{BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CamrlError, Result};
use crate::numcore::{axpy, mlp_backward, mlp_forward, softmax, MlpGrads, MlpParams};

pub const OBS_DIM: usize = 4;
pub const NUM_ACTIONS: usize = 4;
pub const DISCOUNT: f64 = 0.99;
/// Multiplies environment rewards in the critic target. Acts as the inverse
/// entropy temperature of the `log pi - Q` policy loss.
pub const REWARD_SCALE: f64 = 30.0;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

pub type Cell = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Easy,
    Medium,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTask {
    pub name: String,
    pub tier: Tier,
    pub width: usize,
    pub height: usize,
    pub start: Cell,
    pub goal: Cell,
    pub obstacles: BTreeSet<Cell>,
    pub step_reward: f64,
    pub goal_reward: f64,
    pub slip_prob: f64,
    pub max_steps: usize,
}

impl GridTask {
    /// An obstacle-free deterministic grid with the default rewards.
    pub fn open(width: usize, height: usize, start: Cell, goal: Cell, max_steps: usize) -> Result<Self> {
        let task = Self {
            name: format!("open-{width}x{height}"),
            tier: Tier::Easy,
            width,
            height,
            start,
            goal,
            obstacles: BTreeSet::new(),
            step_reward: -0.01,
            goal_reward: 1.0,
            slip_prob: 0.0,
            max_steps,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CamrlError::InvalidArgument(m));
        if self.width < 2 || self.height < 2 {
            return bad(format!("grid {}x{} too small", self.width, self.height));
        }
        let inside = |c: Cell| c.0 < self.width && c.1 < self.height;
        if !inside(self.start) || !inside(self.goal) {
            return bad("start or goal outside the grid".into());
        }
        if self.start == self.goal {
            return bad("start equals goal".into());
        }
        if self.obstacles.contains(&self.start) || self.obstacles.contains(&self.goal) {
            return bad("start or goal is an obstacle".into());
        }
        if !(0.0..1.0).contains(&self.slip_prob) {
            return bad(format!("slip_prob {} outside [0, 1)", self.slip_prob));
        }
        Ok(())
    }

    pub fn observation(&self, cell: Cell) -> [f64; OBS_DIM] {
        let sx = (self.width - 1) as f64;
        let sy = (self.height - 1) as f64;
        [
            cell.0 as f64 / sx,
            cell.1 as f64 / sy,
            self.goal.0 as f64 / sx,
            self.goal.1 as f64 / sy,
        ]
    }

    /// Deterministic move; walls and obstacles leave the agent in place.
    /// Actions: 0 = up, 1 = down, 2 = left, 3 = right.
    pub fn move_from(&self, cell: Cell, action: usize) -> Cell {
        let (x, y) = cell;
        let next = match action {
            0 if y > 0 => (x, y - 1),
            1 if y + 1 < self.height => (x, y + 1),
            2 if x > 0 => (x - 1, y),
            3 if x + 1 < self.width => (x + 1, y),
            _ => cell,
        };
        if self.obstacles.contains(&next) {
            cell
        } else {
            next
        }
    }

    /// One environment step: `(next cell, reward, reached goal)`.
    pub fn step<R: Rng + ?Sized>(&self, cell: Cell, action: usize, rng: &mut R) -> (Cell, f64, bool) {
        let action = if self.slip_prob > 0.0 && rng.gen::<f64>() < self.slip_prob {
            rng.gen_range(0..NUM_ACTIONS)
        } else {
            action
        };
        let next = self.move_from(cell, action);
        let done = next == self.goal;
        let reward = self.step_reward + if done { self.goal_reward } else { 0.0 };
        (next, reward, done)
    }

    /// Shortest path length from start to goal, if reachable.
    pub fn shortest_path(&self) -> Option<usize> {
        let mut dist = vec![usize::MAX; self.width * self.height];
        let idx = |c: Cell| c.1 * self.width + c.0;
        let mut queue = VecDeque::from([self.start]);
        dist[idx(self.start)] = 0;
        while let Some(c) = queue.pop_front() {
            if c == self.goal {
                return Some(dist[idx(c)]);
            }
            for a in 0..NUM_ACTIONS {
                let n = self.move_from(c, a);
                if dist[idx(n)] == usize::MAX {
                    dist[idx(n)] = dist[idx(c)] + 1;
                    queue.push_back(n);
                }
            }
        }
        None
    }
}

/// One difficulty tier of a generated suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierSpec {
    pub tier: Tier,
    pub count: usize,
    pub size: usize,
    #[serde(default)]
    pub obstacles: usize,
    #[serde(default)]
    pub slip_prob: f64,
    /// Defaults to `4 * size` when absent.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub tiers: Vec<TierSpec>,
}

impl Default for SuiteSpec {
    /// Two 4x4 open grids, two 6x6 grids with obstacles, two slippery 8x8 grids.
    fn default() -> Self {
        Self {
            tiers: vec![
                TierSpec {
                    tier: Tier::Easy,
                    count: 2,
                    size: 4,
                    obstacles: 0,
                    slip_prob: 0.0,
                    max_steps: None,
                },
                TierSpec {
                    tier: Tier::Medium,
                    count: 2,
                    size: 6,
                    obstacles: 5,
                    slip_prob: 0.0,
                    max_steps: None,
                },
                TierSpec {
                    tier: Tier::Hard,
                    count: 2,
                    size: 8,
                    obstacles: 0,
                    slip_prob: 0.1,
                    max_steps: None,
                },
            ],
        }
    }
}

impl SuiteSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CamrlError::Config(m));
        if self.tiers.iter().map(|t| t.count).sum::<usize>() == 0 {
            return bad("task suite is empty".into());
        }
        for t in &self.tiers {
            if t.size < 2 {
                return bad(format!("tier {:?}: size must be >= 2", t.tier));
            }
            if t.obstacles + 2 > t.size * t.size / 2 {
                return bad(format!("tier {:?}: too many obstacles for a {}x{} grid", t.tier, t.size, t.size));
            }
            if !(0.0..1.0).contains(&t.slip_prob) {
                return bad(format!("tier {:?}: slip_prob must lie in [0, 1)", t.tier));
            }
            if t.max_steps == Some(0) {
                return bad(format!("tier {:?}: max_steps must be >= 1", t.tier));
            }
        }
        Ok(())
    }
}

/// Deterministic suite for `seed`. Start and goal are at least `size - 1`
/// apart, and obstacles never cut the goal off from the start.
pub fn make_task_suite(seed: u64, spec: &SuiteSpec) -> Result<Vec<GridTask>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::new();
    for tier in &spec.tiers {
        for k in 0..tier.count {
            let n = tier.size;
            let task = loop {
                let start = (rng.gen_range(0..n), rng.gen_range(0..n));
                let goal = (rng.gen_range(0..n), rng.gen_range(0..n));
                if start.0.abs_diff(goal.0) + start.1.abs_diff(goal.1) < n - 1 {
                    continue;
                }
                let mut obstacles = BTreeSet::new();
                while obstacles.len() < tier.obstacles {
                    let c = (rng.gen_range(0..n), rng.gen_range(0..n));
                    if c != start && c != goal {
                        obstacles.insert(c);
                    }
                }
                let task = GridTask {
                    name: format!("{:?}-{}", tier.tier, k).to_lowercase(),
                    tier: tier.tier,
                    width: n,
                    height: n,
                    start,
                    goal,
                    obstacles,
                    step_reward: -0.01,
                    goal_reward: 1.0,
                    slip_prob: tier.slip_prob,
                    max_steps: tier.max_steps.unwrap_or(4 * n),
                };
                if task.shortest_path().is_some() {
                    break task;
                }
            };
            task.validate()?;
            tasks.push(task);
        }
    }
    Ok(tasks)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: [f64; OBS_DIM],
    pub action: usize,
    pub reward: f64,
    pub next_obs: [f64; OBS_DIM],
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    pub total_reward: f64,
}

/// Hidden widths of the actor and critic networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: [usize; 2],
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { hidden: [16, 16] }
    }
}

/// Per-task actor-critic. The actor maps observations to action logits;
/// the critic maps `observation ++ one_hot(action)` to a scalar Q value.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskTrainer {
    pub actor: MlpParams,
    pub critic: MlpParams,
    pub learning_rate: f64,
    pub reward_scale: f64,
    pub rng: ChaCha8Rng,
    pub opt: Adam,
}

/// Adam moments over the flattened `actor ++ critic` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    steps: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            steps: 0,
        }
    }

    /// Returns the parameter delta for gradient `g`.
    fn step(&mut self, g: &[f64], lr: f64) -> Vec<f64> {
        self.steps = self.steps.saturating_add(1);
        let c1 = 1.0 - ADAM_BETA1.powi(self.steps);
        let c2 = 1.0 - ADAM_BETA2.powi(self.steps);
        g.iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(&gi, (m, v))| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gi;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gi * gi;
                -lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS)
            })
            .collect()
    }
}

/// Extra gradient applied in curriculum mode: the trainer minimizes
/// `L(w_t) + 0.01 * objective`, so the actor's policy-loss gradient is scaled
/// by `1 + policy_loss_scale` and `grad` (over the flattened `w_t`) is added
/// once per episode.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtraGradient {
    pub policy_loss_scale: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub policy_loss: f64,
    pub mean_reward: f64,
}

impl TaskTrainer {
    pub fn new(net: &NetConfig, learning_rate: f64, mut rng: ChaCha8Rng) -> Result<Self> {
        let [h1, h2] = net.hidden;
        let actor = MlpParams::glorot_uniform(&[OBS_DIM, h1, h2, NUM_ACTIONS], &mut rng)?;
        let critic = MlpParams::glorot_uniform(&[OBS_DIM + NUM_ACTIONS, h1, h2, 1], &mut rng)?;
        let opt = Adam::new(actor.len() + critic.len());
        Ok(Self {
            actor,
            critic,
            learning_rate,
            reward_scale: REWARD_SCALE,
            rng,
            opt,
        })
    }

    /// `w_t`: actor parameters followed by critic parameters.
    pub fn weights(&self) -> Vec<f64> {
        let mut w = self.actor.as_flat().to_vec();
        w.extend_from_slice(self.critic.as_flat());
        w
    }

    pub fn weight_dim(&self) -> usize {
        self.actor.len() + self.critic.len()
    }

    pub fn set_weights(&mut self, w: &[f64]) -> Result<()> {
        crate::error::check_len(self.weight_dim(), w.len())?;
        let (a, c) = w.split_at(self.actor.len());
        self.actor.as_flat_mut().copy_from_slice(a);
        self.critic.as_flat_mut().copy_from_slice(c);
        Ok(())
    }

    pub fn action_probs(&self, obs: &[f64]) -> Vec<f64> {
        let (logits, _) = mlp_forward(&self.actor, obs).expect("observation width matches actor");
        softmax(&logits)
    }

    pub fn q_values(&self, obs: &[f64]) -> Vec<f64> {
        (0..NUM_ACTIONS).map(|a| self.q_value(obs, a)).collect()
    }

    pub fn q_value(&self, obs: &[f64], action: usize) -> f64 {
        let input = critic_input(obs, action);
        mlp_forward(&self.critic, &input).expect("critic input width").0[0]
    }

    pub fn greedy_action(&self, obs: &[f64]) -> usize {
        let (logits, _) = mlp_forward(&self.actor, obs).expect("observation width matches actor");
        argmax(&logits)
    }

    pub fn embedding(&self, states: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        states
            .iter()
            .map(|s| mlp_forward(&self.actor, s).map(|(_, hidden)| hidden))
            .collect()
    }

    /// Actor gradient of `sum_a pi(a|s) (log pi(a|s) - Q(s, a))`, the
    /// expectation of the sampled policy loss over the current policy.
    fn actor_grad(&self, obs: &[f64]) -> MlpGrads {
        let probs = self.action_probs(obs);
        let q = self.q_values(obs);
        let per_action: Vec<f64> = probs
            .iter()
            .zip(&q)
            .map(|(p, qa)| p.max(f64::MIN_POSITIVE).ln() - qa)
            .collect();
        let expected: f64 = probs.iter().zip(&per_action).map(|(p, v)| p * v).sum();
        let logit_grad: Vec<f64> = probs
            .iter()
            .zip(&per_action)
            .map(|(p, v)| p * (v - expected))
            .collect();
        mlp_backward(&self.actor, obs, &logit_grad).expect("actor shapes")
    }

    /// Gradient of `0.5 (Q(s, a) - target)^2` where the target bootstraps on
    /// the expected next-state value under the current policy.
    fn critic_grad(&self, tr: &Transition) -> MlpGrads {
        let next_value = if tr.done {
            0.0
        } else {
            let probs = self.action_probs(&tr.next_obs);
            let q = self.q_values(&tr.next_obs);
            probs.iter().zip(&q).map(|(p, qa)| p * qa).sum()
        };
        let target = self.reward_scale * tr.reward + DISCOUNT * next_value;
        let input = critic_input(&tr.obs, tr.action);
        let q = mlp_forward(&self.critic, &input).expect("critic input width").0[0];
        mlp_backward(&self.critic, &input, &[q - target]).expect("critic shapes")
    }
}

fn critic_input(obs: &[f64], action: usize) -> [f64; OBS_DIM + NUM_ACTIONS] {
    let mut input = [0.0; OBS_DIM + NUM_ACTIONS];
    input[..OBS_DIM].copy_from_slice(obs);
    input[OBS_DIM + action] = 1.0;
    input
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn rollout<R, P>(task: &GridTask, rng: &mut R, mut policy: P) -> Episode
where
    R: Rng + ?Sized,
    P: FnMut(&[f64], &mut R) -> usize,
{
    let mut ep = Episode::default();
    let mut cell = task.start;
    for _ in 0..task.max_steps {
        let obs = task.observation(cell);
        let action = policy(&obs, rng);
        let (next, reward, done) = task.step(cell, action, rng);
        ep.total_reward += reward;
        ep.transitions.push(Transition {
            obs,
            action,
            reward,
            next_obs: task.observation(next),
            done,
        });
        cell = next;
        if done {
            break;
        }
    }
    ep
}

/// Samples actions from the actor's softmax policy.
pub fn run_episode<R: Rng + ?Sized>(trainer: &TaskTrainer, task: &GridTask, rng: &mut R) -> Episode {
    rollout(task, rng, |obs, rng| sample_categorical(&trainer.action_probs(obs), rng))
}

/// Mean over all transitions of `log pi(a|s) - Q(s, a)`.
pub fn policy_loss(trainer: &TaskTrainer, episodes: &[Episode]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for tr in episodes.iter().flat_map(|e| &e.transitions) {
        let p = trainer.action_probs(&tr.obs)[tr.action];
        total += p.max(f64::MIN_POSITIVE).ln() - trainer.q_value(&tr.obs, tr.action);
        count += 1;
    }
    if count == 0 {
        return Err(CamrlError::InvalidArgument("policy loss of an empty batch".into()));
    }
    Ok(total / count as f64)
}

/// Collects `episodes` episodes, updating critic and actor after each one
/// transition by transition. The reported loss is measured on each episode
/// before that episode's updates.
pub fn train_step(
    trainer: &mut TaskTrainer,
    task: &GridTask,
    episodes: usize,
    extra: Option<&ExtraGradient>,
) -> Result<StepStats> {
    if episodes == 0 {
        return Err(CamrlError::InvalidArgument("train_step needs at least one episode".into()));
    }
    let mut rng = trainer.rng.clone();
    let lr = trainer.learning_rate;
    let actor_scale = 1.0 + extra.map_or(0.0, |e| e.policy_loss_scale);
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut reward_sum = 0.0;
    for _ in 0..episodes {
        let ep = run_episode(trainer, task, &mut rng);
        reward_sum += ep.total_reward;
        if !ep.transitions.is_empty() {
            loss_sum += policy_loss(trainer, std::slice::from_ref(&ep))? * ep.transitions.len() as f64;
            loss_count += ep.transitions.len();
        }
        if lr == 0.0 {
            continue;
        }
        let n_steps = ep.transitions.len();
        if n_steps == 0 {
            continue;
        }
        for tr in &ep.transitions {
            let mut g = trainer.actor_grad(&tr.obs).into_flat();
            g.iter_mut().for_each(|v| *v *= actor_scale);
            g.extend_from_slice(trainer.critic_grad(tr).as_flat());
            if let Some(e) = extra {
                // spread over the episode so the blend enters once per episode
                axpy(1.0 / n_steps as f64, &e.grad, &mut g);
            }
            let delta = trainer.opt.step(&g, lr);
            let mut w = trainer.weights();
            axpy(1.0, &delta, &mut w);
            trainer.set_weights(&w)?;
        }
        if !crate::numcore::all_finite(trainer.actor.as_flat()) || !crate::numcore::all_finite(trainer.critic.as_flat()) {
            return Err(CamrlError::Numerical(format!("non-finite parameters while training {}", task.name)));
        }
    }
    trainer.rng = rng;
    Ok(StepStats {
        policy_loss: if loss_count > 0 { loss_sum / loss_count as f64 } else { 0.0 },
        mean_reward: reward_sum / episodes as f64,
    })
}

/// Mean total reward over `n_episodes` greedy episodes; no learning.
pub fn evaluate<R: Rng + ?Sized>(trainer: &TaskTrainer, task: &GridTask, n_episodes: usize, rng: &mut R) -> f64 {
    assert!(n_episodes >= 1, "evaluation needs at least one episode");
    let total: f64 = (0..n_episodes)
        .map(|_| rollout(task, rng, |obs, _| trainer.greedy_action(obs)).total_reward)
        .sum();
    total / n_episodes as f64
}
