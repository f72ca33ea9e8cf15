use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use camrl::cli::{
    exit_code, rank_demo, rank_demo_csv, resolve_output_dir, run_to_dir, solve_bench, BenchOptions, RunConfig,
    EXIT_OK,
};
use camrl::solver::DEFAULT_PGD_STEP;
use camrl::Result;

#[derive(Parser)]
#[command(name = "camrl", version, about = "Curriculum-aware multi-task RL on grid worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a task suite and write metrics.
    Run {
        /// JSON run config. Omit to use the defaults.
        config: Option<PathBuf>,
        /// Overrides both the config and CAMRL_OUTPUT_DIR.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare Frank-Wolfe and projected gradient on random transfer problems.
    SolveBench {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        tasks: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = DEFAULT_PGD_STEP)]
        pgd_step: f64,
        /// Directory for per-instance solver traces.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Print smooth ranks of VALUES for each sharpness in --d.
    RankDemo {
        #[arg(required = true, value_delimiter = ',', allow_negative_numbers = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 1.0, 10.0, 50.0, 200.0])]
        d: Vec<f64>,
    },
    /// Print the default run config.
    DefaultConfig,
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run {
            config,
            output_dir,
            seed,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = resolve_output_dir(&cfg, output_dir.as_deref());
            let state = run_to_dir(&cfg, &dir)?;
            println!(
                "{} epochs ({} parallel, {} curriculum); mean final eval reward {:.4}; output in {}",
                state.epochs_run,
                state.parallel_epochs,
                state.curriculum_epochs,
                state.mean_eval_reward(),
                dir.display()
            );
        }
        Command::SolveBench {
            instances,
            iters,
            seed,
            tasks,
            dim,
            pgd_step,
            traces,
        } => {
            let opts = BenchOptions {
                n_tasks: tasks,
                dim,
                pgd_step,
            };
            let report = solve_bench(instances, iters, seed, opts)?;
            print!("{}", report.to_csv());
            eprintln!("fw wins or ties on {}/{}", report.fw_wins(), instances);
            if let Some(dir) = traces {
                fs::create_dir_all(&dir)?;
                for (i, (fw, pg)) in report.fw_traces.iter().zip(&report.pgd_traces).enumerate() {
                    fs::write(dir.join(format!("fw_{i}.csv")), fw.to_csv())?;
                    fs::write(dir.join(format!("pgd_{i}.csv")), pg.to_csv())?;
                }
            }
        }
        Command::RankDemo { values, d } => {
            let rows = rank_demo(&values, &d)?;
            print!("{}", rank_demo_csv(&values, &d, &rows));
        }
        Command::DefaultConfig => println!("{}", RunConfig::default().to_json()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("camrl: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
