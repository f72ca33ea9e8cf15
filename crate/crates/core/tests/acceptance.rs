//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.
//!
//! The training comparisons share one set of runs (5 seeds x 4 variants),
//! computed once on first use.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use camrl::cli::{solve_bench, BenchOptions, RunConfig};
use camrl::numcore::{mlp_backward, mlp_forward, MlpParams};
use camrl::ranking::{hard_rank, rank_loss_grad, smooth_rank, RankInstance};
use camrl::scheduler::{
    compute_imul, dispersion_fraction, update_lambdas, EpochRecord, EpochState, Experiment,
};
use camrl::solver::{fw_vanilla, project_box_l1};
use camrl::tasks::{make_task_suite, SuiteSpec, Tier};
use camrl::transfer::{
    extend_for_new_task, init_transfer, random_problem, CompositeInputs, CompositeProblem, CurriculumState,
    HyperConfig, MutualEval, TransferMatrix,
};

const SEEDS: u64 = 5;

fn verdict(id: u32, what: &str, ok: bool, detail: String) {
    println!("{} {id:02} {what}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{what}: {detail}");
}

/// Fourth-order central difference.
fn fd_grad<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let mut at = |dx: f64| {
                p[i] = x[i] + dx;
                let v = f(&p);
                p[i] = x[i];
                v
            };
            (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
        })
        .collect()
}

fn grad_close(a: &[f64], b: &[f64]) -> Option<String> {
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let err = (x - y).abs();
        if err > (1e-5 * x.abs().max(y.abs())).max(1e-8) {
            return Some(format!("component {i}: analytic {x} vs numeric {y}"));
        }
    }
    None
}

fn random_feasible(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..radius / 2.0)).collect();
    project_box_l1(&raw, radius)
}

#[test]
fn gradients_match_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = Vec::new();
    let per_kind = 200;

    for _ in 0..per_kind {
        let depth = rng.gen_range(1..=3);
        let mut dims = vec![rng.gen_range(1..=6)];
        for _ in 0..depth {
            dims.push(rng.gen_range(1..=6));
        }
        let params = MlpParams::random_uniform(&dims, 1.0, &mut rng).unwrap();
        let input: Vec<f64> = (0..dims[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out_grad: Vec<f64> = (0..*dims.last().unwrap()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let analytic = mlp_backward(&params, &input, &out_grad).unwrap();
        let numeric = fd_grad(
            |w| {
                let p = MlpParams::from_flat(&dims, w.to_vec()).unwrap();
                let out = mlp_forward(&p, &input).unwrap().0;
                out.iter().zip(&out_grad).map(|(o, g)| o * g).sum()
            },
            params.as_flat(),
            1e-5,
        );
        if let Some(e) = grad_close(analytic.as_flat(), &numeric) {
            failures.push(format!("mlp {dims:?}: {e}"));
        }
    }

    for _ in 0..per_kind {
        let q = rng.gen_range(2..=8);
        let d = [0.5, 5.0, 20.0, 200.0][rng.gen_range(0..4)];
        let values: Vec<f64> = (0..q).map(|_| rng.gen_range(0.0..0.05)).collect();
        let mut targets: Vec<usize> = (1..=q).collect();
        targets.shuffle(&mut rng);
        let inst = RankInstance::new(values.clone(), targets.clone(), d).unwrap();
        let numeric = fd_grad(
            |v| RankInstance::new(v.to_vec(), targets.clone(), d).unwrap().loss(),
            &values,
            1e-4 / d.max(1.0),
        );
        if let Some(e) = grad_close(&rank_loss_grad(&inst), &numeric) {
            failures.push(format!("rank q={q} d={d}: {e}"));
        }
    }

    for _ in 0..per_kind {
        let n = rng.gen_range(2..=8);
        let dim = rng.gen_range(1..=12);
        let (mut p, _) = random_problem(&mut rng, n, dim).unwrap();
        p.d = [1.0, 20.0, 200.0][rng.gen_range(0..3)];
        let b = random_feasible(&mut rng, n - 1, 0.05);
        let analytic = p.gradient(&b).unwrap();
        let h = 1e-4 / p.d.max(1.0);
        // b can sit on the boundary, so the stencil uses the unchecked value
        let numeric = fd_grad(|x| camrl::solver::Objective::value(&p, x), &b, h);
        if let Some(e) = grad_close(&analytic, &numeric) {
            failures.push(format!("composite n={n} d={}: {e}", p.d));
        }
    }

    let elapsed = start.elapsed();
    verdict(
        1,
        "gradient suite",
        failures.is_empty() && elapsed < Duration::from_secs(30),
        format!(
            "{} of {} instances disagree, {:.1?}{}",
            failures.len(),
            3 * per_kind,
            elapsed,
            failures.iter().map(|f| format!("; {f}")).collect::<String>()
        ),
    );
}

struct Run {
    records: Vec<EpochRecord>,
    exp: Experiment,
}

impl Run {
    fn final_rewards(&self) -> &[f64] {
        &self.records.last().unwrap().eval_reward
    }

    fn mean_final_reward(&self) -> f64 {
        let r = self.final_rewards();
        r.iter().sum::<f64>() / r.len() as f64
    }
}

struct SeedRuns {
    full: Run,
    parallel: Run,
    no_switch: Run,
    d_zero: Run,
}

struct Campaign {
    seeds: Vec<SeedRuns>,
    full_elapsed: Duration,
    total_elapsed: Duration,
}

fn run_config(cfg: &RunConfig) -> Run {
    let mut exp = cfg.experiment().unwrap();
    let mut records = Vec::new();
    exp.run(cfg.epochs, |r| {
        records.push(r.clone());
        Ok(())
    })
    .unwrap();
    Run { records, exp }
}

fn campaign() -> &'static Campaign {
    static C: OnceLock<Campaign> = OnceLock::new();
    C.get_or_init(|| {
        let start = Instant::now();
        let mut full_elapsed = Duration::ZERO;
        let seeds = (0..SEEDS)
            .map(|seed| {
                let base = RunConfig {
                    seed,
                    ..RunConfig::default()
                };
                let t = Instant::now();
                let full = run_config(&base);
                let mut cfg = base.clone();
                cfg.flags.force_parallel = true;
                let parallel = run_config(&cfg);
                full_elapsed += t.elapsed();
                let mut cfg = base.clone();
                cfg.flags.disable_mode_switch = true;
                let no_switch = run_config(&cfg);
                let mut cfg = base.clone();
                cfg.flags.d_zero = true;
                let d_zero = run_config(&cfg);
                SeedRuns {
                    full,
                    parallel,
                    no_switch,
                    d_zero,
                }
            })
            .collect();
        Campaign {
            seeds,
            full_elapsed,
            total_elapsed: start.elapsed(),
        }
    })
}

#[test]
fn transfer_matrix_stays_feasible_over_default_run() {
    let c = campaign();
    let run = &c.seeds[0].full;
    let n = run.exp.n_tasks();
    let mut worst = 0.0f64;
    let mut bad = 0;
    for r in &run.records {
        let b = TransferMatrix::from_rows(n, r.b.clone()).unwrap();
        if b.validate(0.05).is_err() {
            bad += 1;
        }
        for s in 0..n {
            let off: f64 = (0..n).filter(|&t| t != s).map(|t| b.get(s, t)).sum();
            worst = worst.max(off - 0.05);
            worst = worst.max((b.get(s, s) - 1.0).abs());
            for t in 0..n {
                worst = worst.max(-b.get(s, t));
            }
        }
    }
    verdict(
        2,
        "transfer matrix feasibility",
        bad == 0 && worst <= 1e-12 && run.records.len() == 305,
        format!(
            "{} records, {bad} invalid, worst violation {worst:.3e}",
            run.records.len()
        ),
    );
}

#[test]
fn frank_wolfe_converges_on_composite_instances() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut problems = Vec::new();
    for i in 0..20 {
        let (p, x0) = random_problem(&mut rng, 8, 16).unwrap();
        let trace = fw_vanilla(&p, &x0, 0.05, 200).unwrap();
        let seq = trace.best_gap_sequence();
        let monotone = seq.windows(2).all(|w| w[1] <= w[0]);
        let init = trace.initial.fw_gap;
        let fin = trace.final_best_gap();
        if !monotone || fin > 1e-2 * init {
            problems.push(format!("instance {i}: monotone={monotone} gap {init:.3e} -> {fin:.3e}"));
        }

        let mut convex = p.clone();
        for l in &mut convex.lambda[2..] {
            *l = 0.0;
        }
        let trace = fw_vanilla(&convex, &x0, 0.05, 200).unwrap();
        let seq = trace.best_gap_sequence();
        let c = seq[9] * 11.0;
        // gaps that reach zero only do so up to rounding
        if let Some(m) = (10..=200).find(|&m| seq[m - 1] > c / (m as f64 + 1.0) + 1e-12) {
            problems.push(format!(
                "convex instance {i}: best gap {:.3e} at m={m} above {:.3e}",
                seq[m - 1],
                c / (m as f64 + 1.0)
            ));
        }
    }
    let elapsed = start.elapsed();
    verdict(
        3,
        "Frank-Wolfe convergence",
        problems.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} problems, {elapsed:.1?}{}",
            problems.len(),
            problems.iter().map(|p| format!("; {p}")).collect::<String>()
        ),
    );
}

#[test]
fn frank_wolfe_beats_projected_gradient() {
    let report = solve_bench(50, 200, 7, BenchOptions::default()).unwrap();
    let wins = report.fw_wins();
    verdict(
        4,
        "solver comparison",
        wins * 10 >= 6 * 50,
        format!("FW wins or ties on {wins}/50"),
    );
}

#[test]
fn ranking_saturates_and_flattens() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 100 {
        let q = rng.gen_range(2..=10);
        let values: Vec<f64> = (0..q).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let separated = (0..q).all(|i| (0..i).all(|j| (values[i] - values[j]).abs() >= 0.02));
        if !separated {
            continue;
        }
        done += 1;
        let y = smooth_rank(&values, 200.0);
        for (yj, r) in y.iter().zip(hard_rank(&values)) {
            worst = worst.max((yj - (r as f64 + 0.5)).abs());
        }
    }
    let mut flat = true;
    for _ in 0..100 {
        let q = rng.gen_range(2..=10);
        let values: Vec<f64> = (0..q).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut targets: Vec<usize> = (1..=q).collect();
        targets.shuffle(&mut rng);
        let inst = RankInstance::new(values, targets, 0.0).unwrap();
        flat &= rank_loss_grad(&inst).iter().all(|&g| g == 0.0);
    }
    verdict(
        5,
        "ranking saturation",
        worst <= 1e-3 && flat,
        format!("max |y' - (rank + 0.5)| = {worst:.3e}; d = 0 gradient exactly zero: {flat}"),
    );
}

fn oracle_sigma(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    var.sqrt() / n.sqrt()
}

#[test]
fn lambda_update_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let hist: Vec<Vec<f64>> = (0..5)
            .map(|_| {
                let len = rng.gen_range(0..20);
                let scale = 10f64.powi(rng.gen_range(-3..2));
                (0..len).map(|_| rng.gen_range(-scale..scale)).collect()
            })
            .collect();
        let hs = update_lambdas(&hist, 0.01);
        for (i, h) in hist.iter().enumerate() {
            let s = oracle_sigma(h);
            let expected = if i == 0 {
                1.0 / (2.0 * s * s + 0.01)
            } else {
                1.0 / (4.0 * s * s + 0.01)
            };
            worst = worst.max((hs.lambda[i] - expected).abs() / expected);
        }
    }
    let edge = update_lambdas(&[vec![], vec![2.5], vec![1.0, 1.0, 1.0], vec![], vec![]], 0.01);
    let edge_ok = edge.lambda.iter().all(|&l| l == 100.0);
    verdict(
        6,
        "lambda formula",
        worst <= 1e-14 && edge_ok,
        format!("max relative error {worst:.2e}; sigma = 0 gives 100: {edge_ok}"),
    );
}

#[test]
fn ranking_term_recovers_target_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut hits = 0;
    for _ in 0..100 {
        let q = rng.gen_range(2..=6);
        let n = q + 1;
        let t = rng.gen_range(0..n);
        let mut mutual = MutualEval::new(n);
        for i in (0..n).filter(|&i| i != t) {
            mutual.set(t, i, rng.gen_range(0.0..1.0), 0);
        }
        let p = CompositeProblem::build(&CompositeInputs {
            t,
            b: &init_transfer(n).unwrap(),
            weights: &vec![vec![0.0; 2]; n],
            policy_losses: &vec![0.0; n],
            mutual: &mutual,
            rank2: &(1..=n).collect::<Vec<_>>(),
            curriculum: &CurriculumState::new(n),
            hp: &HyperConfig::default(),
            lambda: &[0.0, 0.0, 1.0, 0.0, 0.0],
            prior: None,
        })
        .unwrap();
        let trace = fw_vanilla(&p, &vec![0.0; q], 0.05, 200).unwrap();
        let sub = p.eval_rank.as_ref().unwrap();
        let vals: Vec<f64> = sub.columns.iter().map(|&c| trace.best[c]).collect();
        if hard_rank(&vals) == sub.targets {
            hits += 1;
        }
    }
    verdict(7, "ranking alignment", hits >= 95, format!("{hits}/100 orderings recovered"));
}

#[test]
fn imul_terms_are_probabilities() {
    let c = campaign();
    let mut checked = 0;
    let mut bad = 0;
    for s in &c.seeds {
        for r in s.full.records.iter().chain(&s.no_switch.records).chain(&s.d_zero.records) {
            if r.warmup {
                continue;
            }
            match r.imul {
                Some(t) => {
                    checked += 1;
                    if ![t.term_i, t.term_ii, t.term_iii, t.imul].iter().all(|v| (0.0..=1.0).contains(v)) {
                        bad += 1;
                    }
                }
                None => bad += 1,
            }
        }
    }
    let hp = HyperConfig::default();
    let mut st = EpochState::new(2, 5);
    st.n = 1000;
    st.reward_history = vec![vec![0.0], vec![0.0]];
    st.loss_history = vec![vec![1.0], vec![1.0]];
    let term_i = compute_imul(&st, &hp, &[1.0 / 3.0; 3]).unwrap().term_i;
    let mut rewards = vec![0.0; 10];
    rewards[9] = 1.0;
    let term_iii = dispersion_fraction(&rewards, 2.0);
    let worked = term_i == (-1.0f64).exp() && term_iii == 0.1;
    verdict(
        8,
        "I_mul bounds",
        bad == 0 && checked > 0 && worked,
        format!("{checked} records checked, {bad} out of range; term_i {term_i}, term_iii {term_iii}"),
    );
}

fn hard_tasks(run: &Run) -> Vec<usize> {
    run.exp
        .tasks
        .iter()
        .enumerate()
        .filter(|(_, t)| t.tier == Tier::Hard)
        .map(|(i, _)| i)
        .collect()
}

#[test]
fn curriculum_matches_or_beats_parallel_baseline() {
    let c = campaign();
    let n = c.seeds.len() as f64;
    let camrl = c.seeds.iter().map(|s| s.full.mean_final_reward()).sum::<f64>() / n;
    let base = c.seeds.iter().map(|s| s.parallel.mean_final_reward()).sum::<f64>() / n;
    let hard_wins = c
        .seeds
        .iter()
        .filter(|s| {
            hard_tasks(&s.full)
                .iter()
                .any(|&i| s.full.final_rewards()[i] > s.parallel.final_rewards()[i])
        })
        .count();
    let per_seed: Vec<String> = c
        .seeds
        .iter()
        .map(|s| format!("{:.3}/{:.3}", s.full.mean_final_reward(), s.parallel.mean_final_reward()))
        .collect();
    verdict(
        9,
        "end-to-end vs parallel baseline",
        camrl >= base && hard_wins >= 3 && c.full_elapsed < Duration::from_secs(600),
        format!(
            "mean final reward {camrl:.4} vs {base:.4}; hard-task win on {hard_wins}/5 seeds; per seed {}; \
             CAMRL+baseline time {:.0?} (all variants {:.0?})",
            per_seed.join(" "),
            c.full_elapsed,
            c.total_elapsed
        ),
    );
}

#[test]
fn ablations_reduce_reward() {
    let c = campaign();
    let worse = |pick: fn(&SeedRuns) -> &Run| {
        c.seeds
            .iter()
            .filter(|s| pick(s).mean_final_reward() < s.full.mean_final_reward())
            .count()
    };
    let no_switch = worse(|s| &s.no_switch);
    let d_zero = worse(|s| &s.d_zero);
    verdict(
        10,
        "ablation direction",
        no_switch >= 3 && d_zero >= 3,
        format!("below full run on {no_switch}/5 seeds without mode switch, {d_zero}/5 with d = 0"),
    );
}

#[test]
fn small_performance_rank_has_small_transfer() {
    let c = campaign();
    let mut low_sum = 0.0;
    let mut all_sum = 0.0;
    for s in &c.seeds {
        let r = s.full.records.last().unwrap();
        let n = s.full.exp.n_tasks();
        let (mut low, mut nlow, mut all, mut nall) = (0.0, 0, 0.0, 0);
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                let v = r.b[i * n + j];
                all += v;
                nall += 1;
                if r.pr[i * n + j] <= 2 {
                    low += v;
                    nlow += 1;
                }
            }
        }
        low_sum += if nlow > 0 { low / nlow as f64 } else { 0.0 };
        all_sum += all / nall as f64;
    }
    let k = c.seeds.len() as f64;
    let (low, all) = (low_sum / k, all_sum / k);
    verdict(
        11,
        "B vs PR correspondence",
        low <= all,
        format!("mean (B - I) where PR <= 2: {low:.4e}; over all off-diagonal: {all:.4e}"),
    );
}

#[test]
fn new_task_extends_without_reinitializing() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut block_ok = true;
    let mut valid = true;
    for n in 1..8 {
        let mut b = init_transfer(n).unwrap();
        for t in 0..n {
            b.set_outgoing_row(t, &random_feasible(&mut rng, n - 1, 0.05)).unwrap();
        }
        let e = extend_for_new_task(&b);
        valid &= e.validate(0.05).is_ok() && e.size() == n + 1;
        for s in 0..n {
            for t in 0..n {
                block_ok &= e.get(s, t).to_bits() == b.get(s, t).to_bits();
            }
        }
    }

    let suite = make_task_suite(3, &SuiteSpec::default()).unwrap();
    let cfg = RunConfig::default();
    let mut settings = cfg.settings();
    settings.hp.episodes_per_epoch = 3;
    settings.hp.eval_episodes = 3;
    let mut exp = Experiment::new(settings, suite[..5].to_vec()).unwrap();
    exp.run(10, |_| Ok(())).unwrap();
    let trainers = exp.trainers.clone();
    let b_before = exp.b.clone();
    exp.add_task(suite[5].clone()).unwrap();
    let kept = exp.trainers[..5] == trainers[..];
    let mut b_kept = exp.b.validate(0.05).is_ok();
    for s in 0..5 {
        for t in 0..5 {
            b_kept &= exp.b.get(s, t).to_bits() == b_before.get(s, t).to_bits();
        }
    }
    let mut resumed = 0;
    let ran = exp
        .run(5, |r| {
            resumed += 1;
            assert_eq!(r.eval_reward.len(), 6);
            Ok(())
        })
        .is_ok();
    verdict(
        12,
        "new-task extension",
        block_ok && valid && kept && b_kept && ran && resumed == 5,
        format!(
            "block preserved {block_ok}, invariants {valid}, trainers kept {kept}, \
             live B preserved {b_kept}, resumed epochs {resumed}"
        ),
    );
}
