//! `gflow-lab`: experiment harness for the GFlowNet laboratory.
//!
//! Subcommands: `sweep` (the six-curve generalization experiment), `length`
//! (length-threshold hiding with heatmap output), `certify` (stability and
//! bound suites on enumerable DAGs), and `eval` (recompute metrics from a
//! checkpoint). Exit codes: 0 success, 1 config error, 2 runtime failure,
//! 3 certification failure.

mod config;
mod dagfile;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use config::{loss_name, ConfigError, ExperimentConfig, MaskKind, MaskedSet};
use gflow_core::eval::{exact_terminal_distribution, jsd, normalized_reward};
use gflow_core::graph::PointedDag;
use gflow_core::hypergrid::{build_grid, AccessLog, GridSpec, ModeRegion, RewardTable};
use gflow_core::parallel;
use gflow_core::policy::{load_checkpoint, save_checkpoint, Parametrization, TabularPolicy};
use gflow_core::report::{
    bound_reports_csv, fmt_g17, matrix_from_distribution, render_bound_table, write_matrix_csv,
    write_pgm,
};
use gflow_core::theory::{
    beyond_iid_check, exact_minimizer, stability_check, tv_lemma_check, BoundReport,
};
use gflow_core::trainer::{train_seed, TrainingTrace};

const EXIT_OK: i32 = 0;
const EXIT_CONFIG: i32 = 1;
const EXIT_RUNTIME: i32 = 2;
const EXIT_CERTIFY: i32 = 3;

const ENUMERATION_CAP: usize = 10_000_000;

#[derive(Parser)]
#[command(name = "gflow-lab", version, about = "GFlowNet generalization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the generalization sweep: each loss with and without the mask.
    Sweep {
        /// Flat key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Parallel worker cap (0 = all cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// key=value overrides applied after the file.
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train under a length-threshold mask and emit heatmaps.
    Length {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Numerically certify the stability and bound inequalities.
    Certify {
        /// Grid side for the built-in test environment.
        #[arg(long, default_value_t = 4)]
        grid: usize,
        /// Number of sum-preserving reward perturbations.
        #[arg(long, default_value_t = 100)]
        perturbations: usize,
        /// Number of randomized TV-lemma triples.
        #[arg(long, default_value_t = 1000)]
        lemma_triples: usize,
        /// Perturbation magnitude bound.
        #[arg(long, default_value_t = 0.01)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Custom DAG file instead of the grid.
        #[arg(long)]
        dag: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Negative control: mis-scale the TV lemma and expect a failure.
        #[arg(long, hide = true)]
        self_test_bug: bool,
    },
    /// Recompute the exact JSD and heatmaps from a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Sweep {
            config,
            jobs,
            overrides,
        } => build_config(config.as_deref(), &overrides, jobs).and_then(|c| cmd_sweep(&c)),
        Command::Length {
            config,
            jobs,
            overrides,
        } => build_config(config.as_deref(), &overrides, jobs).and_then(|c| cmd_length(&c)),
        Command::Certify {
            grid,
            perturbations,
            lemma_triples,
            epsilon,
            seed,
            dag,
            out,
            self_test_bug,
        } => cmd_certify(
            grid,
            perturbations,
            lemma_triples,
            epsilon,
            seed,
            dag.as_deref(),
            out,
            self_test_bug,
        ),
        Command::Eval { checkpoint, out } => cmd_eval(&checkpoint, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("gflow-lab: {}", e.message);
            e.code
        }
    }
}

struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn config(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: msg.into(),
        }
    }

    fn runtime(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: msg.into(),
        }
    }

    fn certify(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_CERTIFY,
            message: msg.into(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::config(e.0)
    }
}

fn build_config(
    file: Option<&Path>,
    overrides: &[String],
    jobs: Option<usize>,
) -> Result<ExperimentConfig, CliError> {
    let mut config = ExperimentConfig::build(file, overrides)?;
    if let Some(j) = jobs {
        config.jobs = j;
    }
    init_thread_pool(config.jobs);
    Ok(config)
}

#[cfg(feature = "parallel")]
fn init_thread_pool(jobs: usize) {
    if jobs > 0 {
        // Ignore the error if a pool already exists (tests share a process).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
}

#[cfg(not(feature = "parallel"))]
fn init_thread_pool(jobs: usize) {
    if jobs > 0 {
        eprintln!("gflow-lab: built without the parallel feature; --jobs ignored");
    }
}

fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))
}

/// One training cell of the sweep: a loss, with or without the mask.
struct Cell {
    loss: Parametrization,
    masked: bool,
    traces: Vec<TrainingTrace>,
    access: Option<AccessLog>,
}

fn run_cells(
    config: &ExperimentConfig,
    spec: &GridSpec,
    losses: &[Parametrization],
    masked_options: &[bool],
) -> Result<Vec<Cell>, CliError> {
    let mask = config.mask(spec)?;
    if masked_options.contains(&true) && mask.is_none() {
        return Err(CliError::config(
            "masked runs requested but the mask is empty (mask_kind=none or hidden_count=0)",
        ));
    }
    let dag = build_grid(spec);
    let table = RewardTable::from_grid(spec);

    struct Job {
        cell_idx: usize,
        seed: u64,
    }

    let mut cells: Vec<(Parametrization, bool, Option<AccessLog>)> = Vec::new();
    let mut jobs: Vec<Job> = Vec::new();
    for &loss in losses {
        for &m in masked_options {
            let access = m.then(|| AccessLog::new(spec.state_count() + 1));
            let cell_idx = cells.len();
            cells.push((loss, m, access));
            for &seed in &config.seeds {
                jobs.push(Job { cell_idx, seed });
            }
        }
    }

    let train_configs: Vec<_> = cells
        .iter()
        .map(|(loss, m, _)| {
            config.train_config(spec, *loss, if *m { mask.clone() } else { None })
        })
        .collect();

    let results = parallel::run_all(jobs, |job| {
        let tc = &train_configs[job.cell_idx];
        let access = cells[job.cell_idx].2.as_ref();
        (
            job.cell_idx,
            train_seed(tc, job.seed, &dag, &table, access),
        )
    });

    let mut out: Vec<Cell> = cells
        .iter()
        .map(|(loss, m, _)| Cell {
            loss: *loss,
            masked: *m,
            traces: Vec::new(),
            access: None,
        })
        .collect();
    for (cell_idx, result) in results {
        let trace = result.map_err(|e| CliError::runtime(format!("training failed: {e}")))?;
        if let Some(i) = trace.aborted_at {
            return Err(CliError::runtime(format!(
                "non-finite loss aborted seed {} at iteration {i} ({} {})",
                trace.seed,
                loss_name(out[cell_idx].loss),
                if out[cell_idx].masked { "masked" } else { "unmasked" },
            )));
        }
        out[cell_idx].traces.push(trace);
    }
    for (cell, (_, _, access)) in out.iter_mut().zip(cells) {
        cell.access = access;
        // parallel::run_all preserves job order, so traces are in seed order.
        debug_assert_eq!(cell.traces.len(), config.seeds.len());
    }

    // Reward-access firewall: masked cells must never have read a hidden
    // reward.
    if let Some(mask) = &mask {
        for cell in &out {
            if let Some(access) = &cell.access {
                let leaked = access.hidden_reads(mask);
                if leaked > 0 {
                    return Err(CliError::runtime(format!(
                        "firewall violation: {leaked} hidden-reward reads in {} masked run",
                        loss_name(cell.loss)
                    )));
                }
            }
        }
    }
    Ok(out)
}

fn cmd_sweep(config: &ExperimentConfig) -> Result<(), CliError> {
    let spec = config.grid_spec()?;
    if config.mask_kind == MaskKind::None && config.masked != MaskedSet::UnmaskedOnly {
        return Err(CliError::config(
            "sweep needs a mask; set mask_kind=random (or masked=unmasked)",
        ));
    }
    let masked_options: Vec<bool> = match config.masked {
        MaskedSet::Both => vec![true, false],
        MaskedSet::MaskedOnly => vec![true],
        MaskedSet::UnmaskedOnly => vec![false],
    };
    ensure_out_dir(&config.out_dir)?;
    let cells = run_cells(config, &spec, &config.losses, &masked_options)?;

    // curves.csv: one row per (loss, masked, seed, eval point).
    let mut curves = String::from("loss,masked,seed,iteration,jsd,train_loss\n");
    for cell in &cells {
        for trace in &cell.traces {
            for p in &trace.points {
                curves.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    loss_name(cell.loss),
                    cell.masked,
                    trace.seed,
                    p.iteration,
                    fmt_g17(p.jsd),
                    fmt_g17(p.train_loss_mean),
                ));
            }
        }
    }
    write_text(&config.out_dir.join("curves.csv"), &curves)?;

    // summary.csv: per-curve seed means at every shared eval iteration.
    let mut summary = String::from("loss,masked,iteration,mean_jsd,mean_train_loss\n");
    for cell in &cells {
        let mut by_iter: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
        for trace in &cell.traces {
            for p in &trace.points {
                let e = by_iter.entry(p.iteration).or_insert((0.0, 0.0, 0));
                e.0 += p.jsd;
                e.1 += p.train_loss_mean;
                e.2 += 1;
            }
        }
        for (iter, (jsd_sum, loss_sum, count)) in by_iter {
            summary.push_str(&format!(
                "{},{},{},{},{}\n",
                loss_name(cell.loss),
                cell.masked,
                iter,
                fmt_g17(jsd_sum / count as f64),
                fmt_g17(loss_sum / count as f64),
            ));
        }
    }
    write_text(&config.out_dir.join("summary.csv"), &summary)?;

    for cell in &cells {
        for trace in &cell.traces {
            let name = format!(
                "ckpt_{}_{}_seed{}.txt",
                loss_name(cell.loss),
                if cell.masked { "masked" } else { "unmasked" },
                trace.seed
            );
            save_checkpoint(&config.out_dir.join(name), &trace.policy, &spec)
                .map_err(|e| CliError::runtime(format!("checkpoint: {e}")))?;
        }
    }

    println!("sweep complete: {} curves over {} seeds", cells.len(), config.seeds.len());
    for cell in &cells {
        let final_mean: f64 = cell
            .traces
            .iter()
            .map(TrainingTrace::final_jsd)
            .sum::<f64>()
            / cell.traces.len() as f64;
        println!(
            "  {}{}: final mean JSD {:.6}",
            loss_name(cell.loss),
            if cell.masked { "" } else { "_whm" },
            final_mean
        );
    }
    println!("wrote {}", config.out_dir.join("curves.csv").display());
    Ok(())
}

fn cmd_length(config: &ExperimentConfig) -> Result<(), CliError> {
    if config.mask_kind != MaskKind::Length {
        return Err(CliError::config(
            "the length command needs mask_kind=length (set max_len as the threshold)",
        ));
    }
    let spec = config.grid_spec()?;
    ensure_out_dir(&config.out_dir)?;
    let cells = run_cells(config, &spec, &[config.loss], &[true])?;
    let cell = &cells[0];
    let mask = config.mask(&spec)?.expect("length mask");

    let dag = build_grid(&spec);
    let table = RewardTable::from_grid(&spec);
    let target = normalized_reward(&table);

    // Mean learned terminal distribution across seeds.
    let per_seed: Vec<_> = cell
        .traces
        .iter()
        .map(|t| exact_terminal_distribution(&dag, &t.policy))
        .collect();
    let n_terminals = target.probs().len();
    let mut mean = vec![0.0f64; n_terminals];
    for dist in &per_seed {
        for (m, p) in mean.iter_mut().zip(dist.probs()) {
            *m += p / per_seed.len() as f64;
        }
    }
    let mean_dist = gflow_core::eval::TerminalDistribution::new(target.states().to_vec(), mean);

    write_matrix_csv(
        &config.out_dir.join("learned_mean.csv"),
        &matrix_from_distribution(&mean_dist, &spec),
    )
    .map_err(|e| CliError::runtime(format!("write: {e}")))?;
    write_pgm(
        &config.out_dir.join("learned_mean.pgm"),
        &matrix_from_distribution(&mean_dist, &spec),
    )
    .map_err(|e| CliError::runtime(format!("write: {e}")))?;
    write_matrix_csv(
        &config.out_dir.join("target.csv"),
        &matrix_from_distribution(&target, &spec),
    )
    .map_err(|e| CliError::runtime(format!("write: {e}")))?;
    write_pgm(
        &config.out_dir.join("target.pgm"),
        &matrix_from_distribution(&target, &spec),
    )
    .map_err(|e| CliError::runtime(format!("write: {e}")))?;
    for trace in &cell.traces {
        save_checkpoint(
            &config.out_dir.join(format!("ckpt_length_seed{}.txt", trace.seed)),
            &trace.policy,
            &spec,
        )
        .map_err(|e| CliError::runtime(format!("checkpoint: {e}")))?;
    }

    // Hidden-region mass and per-mode-cell reconstruction report.
    let hidden_mass_learned: f64 = mask
        .iter_hidden()
        .filter_map(|s| mean_dist.prob_of(s))
        .sum();
    let hidden_mass_ideal: f64 = mask.iter_hidden().filter_map(|s| target.prob_of(s)).sum();
    let mut hidden_mode_cells = 0usize;
    let mut reconstructed = 0usize;
    for region in spec.modes() {
        for a in region.a_lo..=region.a_hi {
            for b in region.b_lo..=region.b_hi {
                let s = spec.idx(a, b);
                if mask.is_hidden(s) {
                    hidden_mode_cells += 1;
                    let learned = mean_dist.prob_of(s).unwrap_or(0.0);
                    let ideal = target.prob_of(s).unwrap_or(0.0);
                    if learned >= 0.5 * ideal {
                        reconstructed += 1;
                    }
                }
            }
        }
    }
    let final_mean_jsd: f64 = cell
        .traces
        .iter()
        .map(TrainingTrace::final_jsd)
        .sum::<f64>()
        / cell.traces.len() as f64;

    let mut report = String::new();
    report.push_str(&format!(
        "length mask: max_len = {}, hidden states = {}\n",
        config.max_len,
        mask.hidden_count()
    ));
    report.push_str(&format!("loss = {}\n", loss_name(config.loss)));
    report.push_str(&format!("final mean JSD = {}\n", fmt_g17(final_mean_jsd)));
    report.push_str(&format!(
        "hidden-region mass: learned = {}, ideal = {}\n",
        fmt_g17(hidden_mass_learned),
        fmt_g17(hidden_mass_ideal)
    ));
    report.push_str(&format!(
        "hidden mode cells at >= 50% of ideal mass: {reconstructed} of {hidden_mode_cells}\n"
    ));
    write_text(&config.out_dir.join("report.txt"), &report)?;
    print!("{report}");
    println!("wrote heatmaps to {}", config.out_dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_certify(
    grid: usize,
    perturbations: usize,
    lemma_triples: usize,
    epsilon: f64,
    seed: u64,
    dag_file: Option<&Path>,
    out: Option<PathBuf>,
    self_test_bug: bool,
) -> Result<(), CliError> {
    use rand::{Rng, SeedableRng};
    let (dag, table, grid_spec): (PointedDag, RewardTable, Option<GridSpec>) = match dag_file {
        Some(path) => {
            let (dag, table) = dagfile::load_dag_file(path)?;
            (dag, table, None)
        }
        None => {
            let spec = certify_grid_spec(grid)?;
            let dag = build_grid(&spec);
            let table = RewardTable::from_grid(&spec);
            (dag, table, Some(spec))
        }
    };

    let mut reports: Vec<BoundReport> = Vec::new();

    // Stability suite.
    let stability = stability_check(&dag, &table, epsilon, perturbations, seed, ENUMERATION_CAP)
        .map_err(|e| CliError::runtime(format!("stability: {e}")))?;
    let stab_pass = stability.iter().filter(|r| r.pass).count();
    let max_ratio = stability.iter().map(BoundReport::ratio).fold(0.0, f64::max);
    println!(
        "stability: {stab_pass}/{} perturbations PASS (max lhs/rhs = {max_ratio:.4})",
        stability.len()
    );
    reports.extend(stability);

    // TV-lemma suite over the DAG's trajectory space.
    let trajs = dag
        .enumerate_trajectories_capped(ENUMERATION_CAP)
        .map_err(|e| CliError::runtime(format!("enumeration: {e}")))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut lemma_pass = 0usize;
    for k in 0..lemma_triples {
        let n = trajs.len();
        let p = random_simplex(&mut rng, n);
        let q = random_simplex(&mut rng, n);
        let h: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut r = tv_lemma_check(&h, &p, &q)
            .map_err(|e| CliError::runtime(format!("tv lemma: {e}")))?;
        r.name = format!("tv-lemma[{k}]");
        if r.pass {
            lemma_pass += 1;
        }
        reports.push(r);
    }
    println!("tv-lemma: {lemma_pass}/{lemma_triples} triples PASS");

    // Beyond-i.i.d. chain: at the exact minimizer and at random policies.
    let minimizer = exact_minimizer(&dag, &table, ENUMERATION_CAP)
        .map_err(|e| CliError::runtime(format!("minimizer: {e}")))?;
    let log_z = minimizer.z.ln();
    let mut chain_reports = Vec::new();
    let chain = beyond_iid_check(&dag, &table, &minimizer.policy, log_z, ENUMERATION_CAP)
        .map_err(|e| CliError::runtime(format!("beyond-iid: {e}")))?;
    for (i, r) in chain.all().into_iter().enumerate() {
        let mut r = r.clone();
        r.name = format!("{} @ minimizer", ["jensen", "pinsker", "beyond-iid"][i]);
        chain_reports.push(r);
    }
    for s in 0..3u64 {
        let policy = TabularPolicy::random(&dag, seed.wrapping_add(s));
        let chain = beyond_iid_check(&dag, &table, &policy, log_z, ENUMERATION_CAP)
            .map_err(|e| CliError::runtime(format!("beyond-iid: {e}")))?;
        for (i, r) in chain.all().into_iter().enumerate() {
            let mut r = r.clone();
            r.name = format!(
                "{} @ random policy {s}",
                ["jensen", "pinsker", "beyond-iid"][i]
            );
            chain_reports.push(r);
        }
    }
    if let Some(spec) = &grid_spec {
        let mut mlp = gflow_core::policy::GridPolicy::new(
            spec.n(),
            gflow_core::policy::PolicyConfig {
                width: 16,
                ..Default::default()
            },
        );
        mlp.init_random(seed);
        let chain = beyond_iid_check(&dag, &table, &mlp, log_z, ENUMERATION_CAP)
            .map_err(|e| CliError::runtime(format!("beyond-iid: {e}")))?;
        for (i, r) in chain.all().into_iter().enumerate() {
            let mut r = r.clone();
            r.name = format!("{} @ random MLP", ["jensen", "pinsker", "beyond-iid"][i]);
            chain_reports.push(r);
        }
    }
    println!("{}", render_bound_table(&chain_reports.iter().collect::<Vec<_>>()));
    reports.extend(chain_reports);

    // Negative control: a deliberately mis-scaled TV bound must fail.
    if self_test_bug {
        let h = [0.0, 1.0];
        let p = [1.0, 0.0];
        let q = [0.0, 1.0];
        let honest = tv_lemma_check(&h, &p, &q)
            .map_err(|e| CliError::runtime(format!("tv lemma: {e}")))?;
        let bugged = BoundReport::new(
            "tv-lemma (self-test: tv mis-scaled by 0.25)",
            honest.lhs,
            honest.rhs * 0.25,
            Some("h=[0,1], P=delta_0, Q=delta_1".into()),
            1e-9,
        );
        println!("{}", render_bound_table(&[&bugged]));
        reports.push(bugged);
    }

    if let Some(dir) = out.or_else(|| {
        std::env::var_os("GFLOW_LAB_OUT").map(PathBuf::from)
    }) {
        ensure_out_dir(&dir)?;
        let all: Vec<&BoundReport> = reports.iter().collect();
        write_text(&dir.join("certify.csv"), &bound_reports_csv(&all))?;
        println!("wrote {}", dir.join("certify.csv").display());
    }

    let failures: Vec<&BoundReport> = reports.iter().filter(|r| !r.pass).collect();
    if failures.is_empty() {
        println!("certification: all {} checks PASS", reports.len());
        Ok(())
    } else {
        println!("{}", render_bound_table(&failures));
        Err(CliError::certify(format!(
            "{} of {} checks FAILED",
            failures.len(),
            reports.len()
        )))
    }
}

fn cmd_eval(checkpoint: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let (policy, spec) = load_checkpoint(checkpoint)
        .map_err(|e| CliError::config(format!("checkpoint: {e}")))?;
    let dag = build_grid(&spec);
    let table = RewardTable::from_grid(&spec);
    let dist = exact_terminal_distribution(&dag, &policy);
    let target = normalized_reward(&table);
    let div = jsd(&dist, &target).map_err(|e| CliError::runtime(format!("jsd: {e}")))?;
    println!("checkpoint: {}", checkpoint.display());
    println!("grid: {0}x{0}, {1} modes", spec.n(), spec.modes().len());
    println!("jsd = {}", fmt_g17(div));
    if let Some(dir) = out.or_else(|| std::env::var_os("GFLOW_LAB_OUT").map(PathBuf::from)) {
        ensure_out_dir(&dir)?;
        write_matrix_csv(&dir.join("learned.csv"), &matrix_from_distribution(&dist, &spec))
            .map_err(|e| CliError::runtime(format!("write: {e}")))?;
        write_pgm(&dir.join("learned.pgm"), &matrix_from_distribution(&dist, &spec))
            .map_err(|e| CliError::runtime(format!("write: {e}")))?;
        write_pgm(&dir.join("target.pgm"), &matrix_from_distribution(&target, &spec))
            .map_err(|e| CliError::runtime(format!("write: {e}")))?;
        println!("wrote heatmaps to {}", dir.display());
    }
    Ok(())
}

/// Small grids get two 1x1 mode regions so certification rewards are
/// heterogeneous; N >= 8 uses the standard nine-mode lattice.
fn certify_grid_spec(n: usize) -> Result<GridSpec, CliError> {
    if n >= 8 {
        return GridSpec::with_default_modes(n).map_err(|e| CliError::config(format!("{e}")));
    }
    if n < 3 {
        return GridSpec::plain(n).map_err(|e| CliError::config(format!("{e}")));
    }
    GridSpec::new(
        n,
        vec![
            ModeRegion {
                a_lo: 1,
                a_hi: 1,
                b_lo: 1,
                b_hi: 1,
            },
            ModeRegion {
                a_lo: n - 1,
                a_hi: n - 1,
                b_lo: n - 2,
                b_hi: n - 2,
            },
        ],
    )
    .map_err(|e| CliError::config(format!("{e}")))
}

fn random_simplex(rng: &mut rand_chacha::ChaCha8Rng, k: usize) -> Vec<f64> {
    use rand::Rng;
    let mut v: Vec<f64> = (0..k)
        .map(|_| -rng.random::<f64>().max(1e-300).ln())
        .collect();
    let t: f64 = v.iter().sum();
    for x in &mut v {
        *x /= t;
    }
    v
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}
