use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use serde_json::json;

use lkz::{builtin_problem_ids, problem_by_id, verify_problem, FrechetOrder};
use lkz_cli::{classical_twin, loping_savings, resolve_output_dir, run_experiment, ExperimentSpec};

#[derive(Parser)]
#[command(
    name = "lkz",
    about = "Loping and embedded Landweber-Kaczmarz regularization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config: one CSV trace per
    /// (noise, seed) pair plus a summary.json in the output directory.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the operator verification suite on a bundled problem.
    Verify {
        #[arg(long)]
        problem: String,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// List the bundled problem identifiers.
    ListProblems,
    /// Compare adjoint-evaluation counts of the loping run against the
    /// classical iteration over the same cycles; writes savings.json.
    Savings {
        #[arg(long)]
        config: PathBuf,
    },
}

fn cmd_run(config: PathBuf) -> Result<ExitCode> {
    let spec = ExperimentSpec::from_file(&config)?;
    let summary = run_experiment(spec)?;
    for row in &summary.rows {
        println!(
            "{} {} seed {:>3}: n*={:>6} ({}), err={:.6e}, ratio={}, adjoints={}, {:.3}s -> {}",
            row.solver,
            row.noise_label,
            row.seed,
            row.n_star,
            row.reason,
            row.terminal_error_to_exact,
            row.terminal_max_residual_ratio
                .map(|r| format!("{r:.4}"))
                .unwrap_or_else(|| "n/a".to_string()),
            row.adjoint_evals,
            row.wall_time_s,
            row.trace_file,
        );
    }
    if summary.invariant_violations.is_empty() {
        println!("all post-hoc invariants hold ({} runs)", summary.rows.len());
        Ok(ExitCode::SUCCESS)
    } else {
        for v in &summary.invariant_violations {
            eprintln!("invariant violation: {v}");
        }
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_verify(problem_id: &str, seed: u64) -> Result<ExitCode> {
    let problem = problem_by_id(problem_id)?;
    let reports = verify_problem(&problem, seed)?;
    let mut all_ok = true;
    for r in &reports {
        all_ok &= r.conforms();
        let order = match r.frechet_order {
            FrechetOrder::Exact => json!("exact"),
            FrechetOrder::Slope(s) => json!(s),
        };
        println!(
            "{}",
            json!({
                "problem": problem.id,
                "block": r.block_index,
                "adjoint_error": r.adjoint_error,
                "frechet_order": order,
                "norm_estimate": r.norm_estimate,
                "eta_estimate": r.eta_estimate,
                "ball_radius": r.ball_radius,
                "conforms": r.conforms(),
            })
        );
    }
    println!(
        "{}",
        json!({
            "problem": problem.id,
            "eta_cert": problem.eta_cert,
            "kern_holds": problem.kern_holds,
            "blocks": reports.len(),
            "all_conform": all_ok,
        })
    );
    Ok(if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_savings(config: PathBuf) -> Result<ExitCode> {
    let spec = ExperimentSpec::from_file(&config)?;
    let twin = classical_twin(&spec);
    let report = loping_savings(&spec, &twin)?;
    let out_dir = resolve_output_dir(&spec.output_dir);
    std::fs::create_dir_all(&out_dir)?;
    let path = out_dir.join("savings.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    for row in &report.rows {
        println!(
            "{} seed {:>3}: {} cycles, adjoints {} (loping) vs {} (classical), final cycle skips {}",
            row.noise_label,
            row.seed,
            row.cycles,
            row.llk_adjoint_evals,
            row.classical_adjoint_evals,
            row.final_cycle_skips,
        );
    }
    println!("savings report written to {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config } => cmd_run(config),
        Command::Verify { problem, seed } => cmd_verify(&problem, seed),
        Command::ListProblems => {
            for id in builtin_problem_ids() {
                println!("{id}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Savings { config } => cmd_savings(config),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
