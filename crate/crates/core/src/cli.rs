//! Run configuration, metrics output, solver benchmark and ranking demo
//! behind the `camrl` binary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CamrlError, Result};
use crate::ranking::smooth_rank;
use crate::scheduler::{suite_seed, AblationFlags, EpochRecord, Experiment, ImulBranch, Mode, Settings};
use crate::solver::{fw_vanilla, pgd, SolverTrace, DEFAULT_PGD_STEP};
use crate::tasks::{make_task_suite, NetConfig, SuiteSpec, DEFAULT_LEARNING_RATE};
use crate::transfer::{random_problem, HyperConfig, PriorKnowledge, SimilarityMeasure};

/// Overrides the configured output directory when set.
pub const OUTPUT_DIR_ENV: &str = "CAMRL_OUTPUT_DIR";

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const FINAL_STATE_FILE: &str = "final_state.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

fn default_learning_rate() -> f64 {
    DEFAULT_LEARNING_RATE
}

fn default_epochs() -> usize {
    300
}

fn default_imul_weights() -> [f64; 3] {
    [1.0 / 3.0; 3]
}

fn default_similarity() -> SimilarityMeasure {
    SimilarityMeasure::CriticCosine
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("camrl-out")
}

/// A complete run description. Every field has a default, so `{}` is a
/// valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub suite: SuiteSpec,
    #[serde(default)]
    pub hyper: HyperConfig,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Epochs after warmup.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub flags: AblationFlags,
    #[serde(default)]
    pub imul_branch: ImulBranch,
    #[serde(default = "default_imul_weights")]
    pub imul_weights: [f64; 3],
    #[serde(default = "default_similarity")]
    pub similarity: SimilarityMeasure,
    #[serde(default)]
    pub prior: Option<PriorKnowledge>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            suite: SuiteSpec::default(),
            hyper: HyperConfig::default(),
            learning_rate: default_learning_rate(),
            epochs: default_epochs(),
            net: NetConfig::default(),
            flags: AblationFlags::default(),
            imul_branch: ImulBranch::default(),
            imul_weights: default_imul_weights(),
            similarity: default_similarity(),
            prior: None,
            output_dir: default_output_dir(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CamrlError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn settings(&self) -> Settings {
        Settings {
            seed: self.seed,
            hp: self.hyper.clone(),
            learning_rate: self.learning_rate,
            net: self.net.clone(),
            flags: self.flags.clone(),
            imul_branch: self.imul_branch,
            imul_weights: self.imul_weights,
            similarity: self.similarity,
            prior: self.prior.clone(),
        }
    }

    /// Checks everything that can be checked without training.
    pub fn validate(&self) -> Result<()> {
        if self.net.hidden.contains(&0) {
            return Err(CamrlError::Config("hidden widths must be >= 1".into()));
        }
        self.experiment().map(|_| ())
    }

    /// Builds the task suite and an untrained experiment.
    pub fn experiment(&self) -> Result<Experiment> {
        let tasks = make_task_suite(suite_seed(self.seed), &self.suite)?;
        Experiment::new(self.settings(), tasks)
    }
}

/// Output directory with `override_dir` taking precedence over the
/// environment, and the environment over the config.
pub fn resolve_output_dir(cfg: &RunConfig, override_dir: Option<&Path>) -> PathBuf {
    if let Some(d) = override_dir {
        return d.to_path_buf();
    }
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(d) if !d.is_empty() => PathBuf::from(d),
        _ => cfg.output_dir.clone(),
    }
}

pub fn exit_code(err: &CamrlError) -> i32 {
    match err {
        CamrlError::Config(_) | CamrlError::Json(_) => EXIT_CONFIG,
        CamrlError::Numerical(_) | CamrlError::Infeasible(_) => EXIT_NUMERICAL,
        CamrlError::Io(_) => EXIT_IO,
        CamrlError::DimensionMismatch { .. } | CamrlError::InvalidArgument(_) => EXIT_RUNTIME,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: usize,
    pub name: String,
    pub tier: String,
    pub final_eval_reward: f64,
    pub final_policy_loss: f64,
    pub curriculum_selections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalState {
    pub seed: u64,
    pub epochs_run: usize,
    pub parallel_epochs: usize,
    pub curriculum_epochs: usize,
    pub n_tasks: usize,
    pub b: Vec<f64>,
    pub pr: Vec<usize>,
    pub lambda: Vec<f64>,
    pub sigma: Vec<f64>,
    pub tasks: Vec<TaskSummary>,
}

impl FinalState {
    pub fn mean_eval_reward(&self) -> f64 {
        self.tasks.iter().map(|t| t.final_eval_reward).sum::<f64>() / self.tasks.len() as f64
    }
}

/// Runs `cfg` to completion, feeding every record to `sink`.
pub fn run_experiment<F>(cfg: &RunConfig, sink: F) -> Result<(Experiment, FinalState)>
where
    F: FnMut(&EpochRecord) -> Result<()>,
{
    let mut exp = cfg.experiment()?;
    let mut selections = vec![0usize; exp.n_tasks()];
    let mut last: Option<EpochRecord> = None;
    let mut sink = sink;
    exp.run(cfg.epochs, |r| {
        if let Some(t) = r.selected_task {
            selections[t] += 1;
        }
        sink(r)?;
        last = Some(r.clone());
        Ok(())
    })?;
    let last = last.ok_or_else(|| CamrlError::Config("run produced no epochs".into()))?;
    let tasks = exp
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| TaskSummary {
            task: i,
            name: t.name.clone(),
            tier: format!("{:?}", t.tier).to_lowercase(),
            final_eval_reward: last.eval_reward[i],
            final_policy_loss: last.policy_loss[i],
            curriculum_selections: selections[i],
        })
        .collect();
    let parallel = exp.state.mode_log.iter().filter(|&&m| m == Mode::Parallel).count();
    let state = FinalState {
        seed: cfg.seed,
        epochs_run: exp.state.mode_log.len(),
        parallel_epochs: parallel,
        curriculum_epochs: exp.state.mode_log.len() - parallel,
        n_tasks: exp.n_tasks(),
        b: exp.b.as_slice().to_vec(),
        pr: exp.mutual.pr(),
        lambda: exp.hyper.lambda.clone(),
        sigma: exp.hyper.sigma.clone(),
        tasks,
    };
    Ok((exp, state))
}

pub fn summary_csv(state: &FinalState) -> String {
    let mut out = String::from("task,name,tier,final_eval_reward,final_policy_loss,curriculum_selections\n");
    for t in &state.tasks {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            t.task, t.name, t.tier, t.final_eval_reward, t.final_policy_loss, t.curriculum_selections
        ));
    }
    out
}

/// Runs `cfg` and writes the metrics stream, summary table and final state
/// into `out_dir`. Nothing is written if the config is invalid.
pub fn run_to_dir(cfg: &RunConfig, out_dir: &Path) -> Result<FinalState> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut metrics = BufWriter::new(File::create(out_dir.join(METRICS_FILE))?);
    let (_, state) = run_experiment(cfg, |r| {
        serde_json::to_writer(&mut metrics, r)?;
        metrics.write_all(b"\n")?;
        Ok(())
    })?;
    metrics.flush()?;
    fs::write(out_dir.join(SUMMARY_FILE), summary_csv(&state))?;
    fs::write(out_dir.join(FINAL_STATE_FILE), serde_json::to_string_pretty(&state)?)?;
    Ok(state)
}

/// Parses a metrics stream back into records.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(CamrlError::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub instance: usize,
    pub fw_objective: f64,
    pub pgd_objective: f64,
    pub fw_best_gap: f64,
}

impl BenchRow {
    pub fn fw_wins_or_ties(&self) -> bool {
        self.fw_objective <= self.pgd_objective + 1e-6
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub fw_traces: Vec<SolverTrace>,
    pub pgd_traces: Vec<SolverTrace>,
}

impl BenchReport {
    pub fn fw_wins(&self) -> usize {
        self.rows.iter().filter(|r| r.fw_wins_or_ties()).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("instance,fw_objective,pgd_objective,fw_best_gap,fw_wins\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.instance,
                r.fw_objective,
                r.pgd_objective,
                r.fw_best_gap,
                r.fw_wins_or_ties() as u8
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchOptions {
    pub n_tasks: usize,
    pub dim: usize,
    pub pgd_step: f64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            n_tasks: 8,
            dim: 16,
            pgd_step: DEFAULT_PGD_STEP,
        }
    }
}

/// Runs FW and PGD with the same iteration budget on random composite
/// problems, both from the problem's current row.
pub fn solve_bench(instances: usize, iters: usize, seed: u64, opts: BenchOptions) -> Result<BenchReport> {
    if instances == 0 {
        return Err(CamrlError::InvalidArgument("instances must be >= 1".into()));
    }
    let radius = HyperConfig::default().radius;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = BenchReport {
        rows: Vec::with_capacity(instances),
        fw_traces: Vec::with_capacity(instances),
        pgd_traces: Vec::with_capacity(instances),
    };
    for i in 0..instances {
        let (problem, x0) = random_problem(&mut rng, opts.n_tasks, opts.dim)?;
        let fw = fw_vanilla(&problem, &x0, radius, iters)?;
        let pg = pgd(&problem, &x0, radius, opts.pgd_step, iters)?;
        report.rows.push(BenchRow {
            instance: i,
            fw_objective: fw.best_objective,
            pgd_objective: pg.best_objective,
            fw_best_gap: fw.final_best_gap(),
        });
        report.fw_traces.push(fw);
        report.pgd_traces.push(pg);
    }
    Ok(report)
}

/// Smooth ranks of `values`, one row per sharpness in `ds`.
pub fn rank_demo(values: &[f64], ds: &[f64]) -> Result<Vec<Vec<f64>>> {
    if values.is_empty() {
        return Err(CamrlError::InvalidArgument("values must be nonempty".into()));
    }
    if values.iter().chain(ds).any(|v| !v.is_finite()) {
        return Err(CamrlError::InvalidArgument("values and d must be finite".into()));
    }
    Ok(ds.iter().map(|&d| smooth_rank(values, d)).collect())
}

pub fn rank_demo_csv(values: &[f64], ds: &[f64], rows: &[Vec<f64>]) -> String {
    let mut out = String::from("d");
    for j in 0..values.len() {
        out.push_str(&format!(",y{j}"));
    }
    out.push('\n');
    for (d, row) in ds.iter().zip(rows) {
        out.push_str(&d.to_string());
        for y in row {
            out.push_str(&format!(",{y}"));
        }
        out.push('\n');
    }
    out
}
