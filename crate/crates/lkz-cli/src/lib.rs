//! Experiment harness for the Landweber-Kaczmarz solver family.
//!
//! An experiment is described by a JSON config (see [`ExperimentSpec`]),
//! names a bundled problem and a solver, and sweeps noise levels and seeds.
//! Each run writes one CSV trace file; the experiment writes a JSON summary
//! and re-validates the solver guarantees from the traces alone.
//!
//! Numeric config fields may be written as decimal strings ("1e-2") so the
//! files stay portable across tooling that cannot round-trip JSON numbers;
//! plain JSON numbers are accepted too.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use lkz::{
    add_noise, average_components, check_tau, problem_by_id, run_classical_lk,
    run_classical_lk_for_cycles, run_elk, run_landweber, run_llk, ElkPhase, ElkStepRecord,
    EmbeddedConfig, Epsilon, LambdaChoice, NoisySample, SolverConfig, StepRecord, StopReason,
    TestProblem,
};

/// Environment variable that overrides the root of `output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "LKZ_OUTPUT_ROOT";

/// Exact header of every trace file.
pub const TRACE_HEADER: [&str; 8] = [
    "n",
    "phase",
    "active_index",
    "omega",
    "residual_norm",
    "threshold",
    "error_to_exact",
    "adjoint_evals_cum",
];

mod flex {
    //! Numeric fields that accept both JSON numbers and decimal strings.

    use serde::de::{Deserializer, Error, Visitor};
    use serde::Deserialize;

    pub(crate) struct FlexF64(pub f64);

    impl<'de> Deserialize<'de> for FlexF64 {
        fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
            struct V;
            impl Visitor<'_> for V {
                type Value = FlexF64;

                fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                    f.write_str("a number or a decimal string")
                }

                fn visit_f64<E: Error>(self, v: f64) -> Result<FlexF64, E> {
                    Ok(FlexF64(v))
                }

                fn visit_i64<E: Error>(self, v: i64) -> Result<FlexF64, E> {
                    Ok(FlexF64(v as f64))
                }

                fn visit_u64<E: Error>(self, v: u64) -> Result<FlexF64, E> {
                    Ok(FlexF64(v as f64))
                }

                fn visit_str<E: Error>(self, v: &str) -> Result<FlexF64, E> {
                    v.trim()
                        .parse::<f64>()
                        .map(FlexF64)
                        .map_err(|_| E::custom(format!("not a decimal number: '{v}'")))
                }
            }
            d.deserialize_any(V)
        }
    }

    pub(crate) fn f64_flex<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        FlexF64::deserialize(d).map(|x| x.0)
    }

    pub(crate) fn opt_f64_flex<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Option::<FlexF64>::deserialize(d).map(|x| x.map(|v| v.0))
    }

    pub(crate) fn opt_vec_f64_flex<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<Option<Vec<f64>>, D::Error> {
        Option::<Vec<FlexF64>>::deserialize(d)
            .map(|x| x.map(|v| v.into_iter().map(|e| e.0).collect()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Llk,
    ClassicalLk,
    Landweber,
    Elk,
}

impl SolverKind {
    pub fn name(&self) -> &'static str {
        match self {
            SolverKind::Llk => "llk",
            SolverKind::ClassicalLk => "classical_lk",
            SolverKind::Landweber => "landweber",
            SolverKind::Elk => "elk",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    Exact,
    Half,
}

/// Balancing noise-proxy choice: `"identity"` or `{"scaled": "0.5"}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsilonSpec {
    Identity,
    Scaled(f64),
}

impl<'de> Deserialize<'de> for EpsilonSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Name(String),
            Scaled {
                #[serde(deserialize_with = "flex::f64_flex")]
                scaled: f64,
            },
        }
        match Raw::deserialize(d)? {
            Raw::Name(name) if name == "identity" => Ok(EpsilonSpec::Identity),
            Raw::Name(name) => Err(serde::de::Error::custom(format!(
                "unknown epsilon '{name}', expected \"identity\" or {{\"scaled\": c}}"
            ))),
            Raw::Scaled { scaled } => Ok(EpsilonSpec::Scaled(scaled)),
        }
    }
}

impl EpsilonSpec {
    fn to_epsilon(self) -> Epsilon {
        match self {
            EpsilonSpec::Identity => Epsilon::Identity,
            EpsilonSpec::Scaled(c) => Epsilon::Scaled(c),
        }
    }
}

/// One experiment: a problem, a solver, a noise sweep, seeds, output paths.
///
/// Exactly one of `deltas` (per-equation levels for a single setting) or
/// `delta_ladder` (uniform levels, one setting per entry) must be present.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub problem_id: String,
    pub solver: SolverKind,
    #[serde(deserialize_with = "flex::f64_flex")]
    pub tau: f64,
    #[serde(default, deserialize_with = "flex::opt_vec_f64_flex")]
    pub deltas: Option<Vec<f64>>,
    #[serde(default, deserialize_with = "flex::opt_vec_f64_flex")]
    pub delta_ladder: Option<Vec<f64>>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub lambda_mode: Option<LambdaMode>,
    #[serde(default)]
    pub epsilon: Option<EpsilonSpec>,
    #[serde(default)]
    pub max_cycles: Option<usize>,
    #[serde(default, deserialize_with = "flex::opt_f64_flex")]
    pub fill: Option<f64>,
    pub output_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// A single noise setting of the sweep.
#[derive(Debug, Clone)]
pub struct NoiseSetting {
    pub label: String,
    pub deltas: Vec<f64>,
}

/// Spec with the problem built, the sweep expanded, and paths resolved.
pub struct ResolvedExperiment {
    pub spec: ExperimentSpec,
    pub problem: TestProblem,
    pub settings: Vec<NoiseSetting>,
    pub fill: f64,
    pub max_cycles: usize,
    pub output_dir: PathBuf,
}

/// Applies the output-root override: when the environment variable is set,
/// `output_dir` is re-rooted under it (absolute paths lose their leading
/// separator first).
pub fn resolve_output_dir(configured: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => {
            let relative = configured
                .strip_prefix("/")
                .unwrap_or(configured)
                .to_path_buf();
            PathBuf::from(root).join(relative)
        }
        None => configured.to_path_buf(),
    }
}

pub fn resolve(spec: ExperimentSpec) -> Result<ResolvedExperiment> {
    let problem = problem_by_id(&spec.problem_id)?;
    let n = problem.n_blocks();
    let settings = match (&spec.deltas, &spec.delta_ladder) {
        (Some(deltas), None) => {
            if deltas.len() != n {
                bail!(
                    "deltas has {} entries but problem '{}' has {} equations",
                    deltas.len(),
                    spec.problem_id,
                    n
                );
            }
            vec![NoiseSetting {
                label: "dx".to_string(),
                deltas: deltas.clone(),
            }]
        }
        (None, Some(ladder)) => ladder
            .iter()
            .enumerate()
            .map(|(i, &d)| NoiseSetting {
                label: format!("d{i}"),
                deltas: vec![d; n],
            })
            .collect(),
        _ => bail!("config must set exactly one of 'deltas' or 'delta_ladder'"),
    };
    if settings.iter().any(|s| s.deltas.iter().any(|d| *d < 0.0 || !d.is_finite())) {
        bail!("noise levels must be finite and non-negative");
    }
    if spec.seeds.is_empty() {
        bail!("seeds must not be empty");
    }
    let infimum = check_tau(problem.eta_cert)?;
    if !(spec.tau > infimum) {
        bail!(
            "tau = {} inadmissible for problem '{}': its cone constant {} requires tau > {}",
            spec.tau,
            spec.problem_id,
            problem.eta_cert,
            infimum
        );
    }
    let fill = spec.fill.unwrap_or(lkz::problems::DEFAULT_FILL);
    if !(fill > 0.0 && fill < 1.0) {
        bail!("fill must lie strictly between 0 and 1, got {fill}");
    }
    let max_cycles = spec.max_cycles.unwrap_or(10_000);
    let output_dir = resolve_output_dir(&spec.output_dir);
    Ok(ResolvedExperiment {
        problem,
        settings,
        fill,
        max_cycles,
        output_dir,
        spec,
    })
}

/// One row of a trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub n: usize,
    pub phase: &'static str,
    pub active_index: i64,
    pub omega: bool,
    pub residual_norm: f64,
    pub threshold: f64,
    pub error_to_exact: Option<f64>,
    pub adjoint_evals_cum: u64,
}

fn trace_rows_from_lk(trace: &[StepRecord], phase: &'static str) -> Vec<TraceRow> {
    trace
        .iter()
        .map(|r| TraceRow {
            n: r.n,
            phase,
            active_index: r.active_index,
            omega: r.omega,
            residual_norm: r.residual_norm,
            threshold: r.threshold,
            error_to_exact: r.error_to_ref,
            adjoint_evals_cum: r.adjoint_evals_cum,
        })
        .collect()
}

fn trace_rows_from_elk(trace: &[ElkStepRecord]) -> Vec<TraceRow> {
    trace
        .iter()
        .map(|r| TraceRow {
            n: r.n,
            phase: match r.phase {
                ElkPhase::Embedding => "embed",
                ElkPhase::Balancing => "balance",
            },
            active_index: -1,
            omega: r.omega,
            residual_norm: r.statistic,
            threshold: r.threshold,
            error_to_exact: r.error_to_ref,
            adjoint_evals_cum: r.adjoint_evals_cum,
        })
        .collect()
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .with_context(|| format!("creating trace file {}", path.display()))?;
    writer.write_record(TRACE_HEADER)?;
    for row in rows {
        writer.write_record([
            row.n.to_string(),
            row.phase.to_string(),
            row.active_index.to_string(),
            (row.omega as u8).to_string(),
            row.residual_norm.to_string(),
            row.threshold.to_string(),
            row.error_to_exact.map(|e| e.to_string()).unwrap_or_default(),
            row.adjoint_evals_cum.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("opening trace file {}", path.display()))?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != TRACE_HEADER {
        bail!("unexpected trace header {header:?} in {}", path.display());
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let phase = match &record[1] {
            "full" => "full",
            "embed" => "embed",
            "balance" => "balance",
            other => bail!("unknown phase '{other}' in {}", path.display()),
        };
        rows.push(TraceRow {
            n: record[0].parse()?,
            phase,
            active_index: record[2].parse()?,
            omega: &record[3] == "1",
            residual_norm: record[4].parse()?,
            threshold: record[5].parse()?,
            error_to_exact: if record[6].is_empty() {
                None
            } else {
                Some(record[6].parse()?)
            },
            adjoint_evals_cum: record[7].parse()?,
        });
    }
    Ok(rows)
}

fn reason_name(reason: StopReason) -> &'static str {
    match reason {
        StopReason::StationaryCycle => "stationary_cycle",
        StopReason::Discrepancy => "discrepancy",
        StopReason::MaxCycles => "max_cycles",
    }
}

/// One summary row per run.
#[derive(Debug, Clone, Serialize)]
pub struct RunRow {
    pub solver: String,
    pub problem_id: String,
    pub noise_label: String,
    pub seed: u64,
    pub delta_max: f64,
    pub n_star: usize,
    pub reason: String,
    pub terminal_error_to_exact: f64,
    /// Largest terminal residual relative to its threshold; `None` when a
    /// zero noise level makes the ratio unbounded.
    pub terminal_max_residual_ratio: Option<f64>,
    pub adjoint_evals: u64,
    pub wall_time_s: f64,
    pub trace_file: String,
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub problem_id: String,
    pub solver: String,
    pub tau: f64,
    pub rows: Vec<RunRow>,
    pub invariant_violations: Vec<String>,
}

fn ratio(residual: f64, threshold: f64) -> Option<f64> {
    if residual == 0.0 {
        Some(0.0)
    } else if threshold > 0.0 {
        Some(residual / threshold)
    } else {
        None
    }
}

struct RunArtifacts {
    row: RunRow,
}

fn solver_config(problem: &TestProblem, tau: f64, max_cycles: usize) -> Result<SolverConfig> {
    Ok(SolverConfig::new(tau, problem.eta_cert)?
        .with_max_cycles(max_cycles)
        .with_trust_radius(problem.rho)
        .with_reference(problem.x_exact.clone()))
}

fn embedded_config(
    resolved: &ResolvedExperiment,
    problem: &TestProblem,
) -> Result<EmbeddedConfig> {
    let lambda = match resolved.spec.lambda_mode.unwrap_or(LambdaMode::Exact) {
        LambdaMode::Exact => LambdaChoice::Exact,
        LambdaMode::Half => LambdaChoice::Half,
    };
    let epsilon = resolved
        .spec
        .epsilon
        .unwrap_or(EpsilonSpec::Identity)
        .to_epsilon();
    Ok(EmbeddedConfig::new(resolved.spec.tau)?
        .with_lambda(lambda)
        .with_epsilon(epsilon)
        .with_max_cycles(resolved.max_cycles)
        .with_trust_radius(problem.rho)
        .with_reference(problem.x_exact.clone()))
}

fn execute_run(
    resolved: &ResolvedExperiment,
    setting: &NoiseSetting,
    seed: u64,
) -> Result<RunArtifacts> {
    let problem = &resolved.problem;
    let sample: NoisySample = add_noise(problem, &setting.deltas, resolved.fill, seed)?;
    let tau = resolved.spec.tau;
    let started = Instant::now();
    let (reason, n_star, rows, terminal_error, max_ratio, evals) = match resolved.spec.solver {
        SolverKind::Llk | SolverKind::ClassicalLk => {
            let config = solver_config(problem, tau, resolved.max_cycles)?;
            let run = if resolved.spec.solver == SolverKind::Llk {
                run_llk(&problem.system, &problem.x0, &sample.data, &sample.noise, &config)?
            } else {
                run_classical_lk(&problem.system, &problem.x0, &sample.data, &sample.noise, &config)?
            };
            let rows = trace_rows_from_lk(&run.trace, "full");
            let terminal_error = run.final_iterate.dist(&problem.x_exact);
            let max_ratio = (0..problem.n_blocks())
                .map(|i| {
                    let r = problem
                        .system
                        .block(i)
                        .apply(&run.final_iterate)
                        .dist(&sample.data[i]);
                    ratio(r, tau * sample.noise.delta(i))
                })
                .try_fold(0.0f64, |acc, r| r.map(|r| acc.max(r)));
            let evals = rows.last().map_or(0, |r| r.adjoint_evals_cum);
            (run.reason, run.termination_index, rows, terminal_error, max_ratio, evals)
        }
        SolverKind::Landweber => {
            let config = solver_config(problem, tau, resolved.max_cycles)?;
            let run = run_landweber(&problem.system, &problem.x0, &sample.data, &sample.noise, &config)?;
            let rows = trace_rows_from_lk(&run.trace, "full");
            let terminal_error = run.final_iterate.dist(&problem.x_exact);
            let last = run.trace.last();
            let max_ratio = last.and_then(|r| {
                let stacked_threshold = tau * sample.noise.stacked_level();
                ratio(r.residual_norm, stacked_threshold)
            });
            let evals = rows.last().map_or(0, |r| r.adjoint_evals_cum);
            (run.reason, run.termination_index, rows, terminal_error, max_ratio, evals)
        }
        SolverKind::Elk => {
            let config = embedded_config(resolved, problem)?;
            let run = run_elk(&problem.system, &problem.x0, &sample.data, &sample.noise, &config)?;
            let rows = trace_rows_from_elk(&run.trace);
            let terminal_error = average_components(&run.final_iterate).dist(&problem.x_exact);
            // The embedded weights compare every equation against the
            // largest level, so the ratio does too.
            let threshold = tau * sample.noise.delta_max();
            let max_ratio = (0..problem.n_blocks())
                .map(|i| {
                    let r = problem
                        .system
                        .block(i)
                        .apply(run.final_iterate.component(i))
                        .dist(&sample.data[i]);
                    ratio(r, threshold)
                })
                .try_fold(0.0f64, |acc, r| r.map(|r| acc.max(r)));
            let evals = rows.last().map_or(0, |r| r.adjoint_evals_cum);
            (run.reason, run.termination_index, rows, terminal_error, max_ratio, evals)
        }
    };
    let wall_time_s = started.elapsed().as_secs_f64();
    let trace_file = format!(
        "trace-{}-{}-s{}.csv",
        resolved.spec.solver.name(),
        setting.label,
        seed
    );
    write_trace(&resolved.output_dir.join(&trace_file), &rows)?;
    Ok(RunArtifacts {
        row: RunRow {
            solver: resolved.spec.solver.name().to_string(),
            problem_id: resolved.spec.problem_id.clone(),
            noise_label: setting.label.clone(),
            seed,
            delta_max: sample.noise.delta_max(),
            n_star,
            reason: reason_name(reason).to_string(),
            terminal_error_to_exact: terminal_error,
            terminal_max_residual_ratio: max_ratio,
            adjoint_evals: evals,
            wall_time_s,
            trace_file,
        },
    })
}

/// Post-hoc checks computed from the written traces alone.
fn validate_from_traces(
    solver: SolverKind,
    n_blocks: usize,
    row: &RunRow,
    output_dir: &Path,
) -> Result<Vec<String>> {
    let mut violations = Vec::new();
    let rows = read_trace(&output_dir.join(&row.trace_file))?;
    let tag = format!("{} {} seed {}", row.solver, row.noise_label, row.seed);
    for pair in rows.windows(2) {
        if pair[1].adjoint_evals_cum < pair[0].adjoint_evals_cum {
            violations.push(format!("{tag}: adjoint counter decreased"));
        }
    }
    if row.reason == "stationary_cycle" {
        match solver {
            SolverKind::Llk => {
                if row.n_star % n_blocks != 0 {
                    violations.push(format!("{tag}: n_star {} not a multiple of N", row.n_star));
                }
                if rows.len() < n_blocks {
                    violations.push(format!("{tag}: trace shorter than one cycle"));
                } else {
                    for r in &rows[rows.len() - n_blocks..] {
                        if r.omega {
                            violations.push(format!("{tag}: active weight in stationary cycle"));
                        }
                        if r.residual_norm > r.threshold {
                            violations
                                .push(format!("{tag}: terminal residual above its threshold"));
                        }
                    }
                }
            }
            SolverKind::Elk => {
                let last_two = rows.len().checked_sub(2).map(|k| &rows[k..]);
                match last_two {
                    Some([embed, balance]) => {
                        if embed.omega || balance.omega {
                            violations.push(format!("{tag}: active weight at stationary stop"));
                        }
                        if embed.residual_norm > embed.threshold
                            || balance.residual_norm > balance.threshold
                        {
                            violations.push(format!("{tag}: terminal statistic above threshold"));
                        }
                    }
                    _ => violations.push(format!("{tag}: embedded trace too short")),
                }
            }
            _ => {}
        }
        if let Some(r) = row.terminal_max_residual_ratio {
            if r > 1.0 {
                violations.push(format!("{tag}: terminal residual ratio {r} > 1"));
            }
        } else {
            violations.push(format!("{tag}: stationary run lacks a residual ratio"));
        }
    }
    // Loping weights must agree with the strict threshold comparison.
    for r in &rows {
        if r.phase == "full" && solver == SolverKind::Llk {
            let expected = r.residual_norm > r.threshold;
            if r.omega != expected {
                violations.push(format!("{tag}: weight disagrees with threshold at step {}", r.n));
            }
        }
    }
    Ok(violations)
}

/// Runs every (noise setting, seed) pair of the experiment, writes traces
/// and `summary.json`, and returns the summary with any post-hoc invariant
/// violations.
pub fn run_experiment(spec: ExperimentSpec) -> Result<Summary> {
    let resolved = resolve(spec)?;
    fs::create_dir_all(&resolved.output_dir).with_context(|| {
        format!("creating output directory {}", resolved.output_dir.display())
    })?;
    let pairs: Vec<(usize, u64)> = resolved
        .settings
        .iter()
        .enumerate()
        .flat_map(|(i, _)| resolved.spec.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let artifacts: Vec<RunArtifacts> = pairs
        .par_iter()
        .map(|&(setting_index, seed)| {
            execute_run(&resolved, &resolved.settings[setting_index], seed)
        })
        .collect::<Result<_>>()?;
    let mut violations = Vec::new();
    for artifact in &artifacts {
        violations.extend(validate_from_traces(
            resolved.spec.solver,
            resolved.problem.n_blocks(),
            &artifact.row,
            &resolved.output_dir,
        )?);
    }
    let summary = Summary {
        problem_id: resolved.spec.problem_id.clone(),
        solver: resolved.spec.solver.name().to_string(),
        tau: resolved.spec.tau,
        rows: artifacts.into_iter().map(|a| a.row).collect(),
        invariant_violations: violations,
    };
    let summary_path = resolved.output_dir.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)
        .with_context(|| format!("writing {}", summary_path.display()))?;
    Ok(summary)
}

/// Per-run loping savings against the classical per-cycle cost.
#[derive(Debug, Serialize)]
pub struct SavingsRow {
    pub noise_label: String,
    pub seed: u64,
    pub delta_max: f64,
    pub cycles: usize,
    pub llk_adjoint_evals: u64,
    pub classical_adjoint_evals: u64,
    pub llk_evals_per_cycle: Vec<u64>,
    pub classical_evals_per_cycle: Vec<u64>,
    /// Skipped updates in the final cycle of the loping run.
    pub final_cycle_skips: usize,
}

#[derive(Debug, Serialize)]
pub struct SavingsReport {
    pub problem_id: String,
    pub tau: f64,
    pub rows: Vec<SavingsRow>,
}

fn per_cycle_evals(trace: &[StepRecord], n_blocks: usize) -> Vec<u64> {
    trace
        .chunks(n_blocks)
        .map(|cycle| cycle.iter().map(|r| r.omega as u64).sum())
        .collect()
}

/// Compares adjoint-evaluation counts of a loping run against the classical
/// iteration driven for the same number of cycles on the same data.
///
/// The two specs must describe the same sweep; only the solver differs.
pub fn loping_savings(
    llk_spec: &ExperimentSpec,
    classical_spec: &ExperimentSpec,
) -> Result<SavingsReport> {
    if llk_spec.solver != SolverKind::Llk {
        bail!("savings: first spec must use the llk solver");
    }
    if classical_spec.solver != SolverKind::ClassicalLk {
        bail!("savings: second spec must use the classical_lk solver");
    }
    if llk_spec.problem_id != classical_spec.problem_id
        || llk_spec.tau != classical_spec.tau
        || llk_spec.seeds != classical_spec.seeds
        || llk_spec.deltas != classical_spec.deltas
        || llk_spec.delta_ladder != classical_spec.delta_ladder
        || llk_spec.fill != classical_spec.fill
    {
        bail!("savings: the two specs must agree on problem, tau, noise and seeds");
    }
    let resolved = resolve(llk_spec.clone())?;
    let problem = &resolved.problem;
    let n = problem.n_blocks();
    let mut rows = Vec::new();
    for setting in &resolved.settings {
        for &seed in &resolved.spec.seeds {
            let sample = add_noise(problem, &setting.deltas, resolved.fill, seed)?;
            let config = solver_config(problem, resolved.spec.tau, resolved.max_cycles)?;
            let llk = run_llk(&problem.system, &problem.x0, &sample.data, &sample.noise, &config)?;
            let cycles = llk.trace.len() / n;
            let classical = run_classical_lk_for_cycles(
                &problem.system,
                &problem.x0,
                &sample.data,
                &sample.noise,
                &config,
                cycles,
            )?;
            let llk_per_cycle = per_cycle_evals(&llk.trace, n);
            let classical_per_cycle = per_cycle_evals(&classical.trace, n);
            let final_cycle_skips = llk
                .trace
                .rchunks(n)
                .next()
                .map_or(0, |cycle| cycle.iter().filter(|r| !r.omega).count());
            rows.push(SavingsRow {
                noise_label: setting.label.clone(),
                seed,
                delta_max: sample.noise.delta_max(),
                cycles,
                llk_adjoint_evals: llk_per_cycle.iter().sum(),
                classical_adjoint_evals: classical_per_cycle.iter().sum(),
                llk_evals_per_cycle: llk_per_cycle,
                classical_evals_per_cycle: classical_per_cycle,
                final_cycle_skips,
            });
        }
    }
    Ok(SavingsReport {
        problem_id: resolved.spec.problem_id.clone(),
        tau: resolved.spec.tau,
        rows,
    })
}

/// Derives the classical twin of a loping spec for the savings comparison.
pub fn classical_twin(llk_spec: &ExperimentSpec) -> ExperimentSpec {
    let mut twin = llk_spec.clone();
    twin.solver = SolverKind::ClassicalLk;
    twin
}
