//! `qsc` — command-line driver for the verification engine.
//!
//! Exit codes: 0 when every requested check passes (or the command is purely
//! informational), 1 when a check fails, 2 on hard errors (bad input, missing
//! files, infeasible configuration).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use qsc_core::fock::{ModelSpace, WeightTriple};
use qsc_core::io::{
    self, basis_dump_csv, defect_csv, measure_from_json, process_from_csv,
    quadruple_to_descriptor, regularity_csv, ModelDescriptor, QuadrupleDescriptor,
};
use qsc_core::martingale::{measure_from_integrands, regularity_estimate, RadonMeasureEstimate};
use qsc_core::qsi::{adaptedness_check, preset_quadruple, qs_integrate, QuadruplePreset};
use qsc_core::represent::{extract_blocks, require_representation_hypothesis};
use qsc_core::scenario::{convergence_study, load_config, run_config};

#[derive(Parser)]
#[command(
    name = "qsc",
    version,
    about = "Verification driver for quantum stochastic integrals on a truncated symmetric tensor space"
)]
struct Cli {
    /// Master seed for every randomized draw.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// Directory for file artifacts (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every scenario in a configuration and report each check.
    Run {
        /// Scenario configuration (JSON).
        config: PathBuf,
        /// Evaluate scenarios on a thread pool; report order is unchanged.
        #[arg(long)]
        parallel: bool,
    },
    /// Basis inspection.
    Basis {
        #[command(subcommand)]
        what: BasisCmd,
    },
    /// Integrate a quadruple of adapted integrands and dump the process.
    Integrate {
        /// Model descriptor (JSON).
        #[arg(long)]
        model: PathBuf,
        /// Quadruple descriptor (JSON); operator file references resolve
        /// relative to it.
        #[arg(long, conflicts_with = "preset")]
        quadruple: Option<PathBuf>,
        /// Named integrand preset (`creation_1`, `annihilation_1`,
        /// `conservation_ij`, `time`, `mixed`) instead of a descriptor file.
        #[arg(long)]
        preset: Option<String>,
        /// Incoming weight triple `p1,p2,p3` attached to the integrands.
        #[arg(long, value_parser = parse_weights, default_value = "0,0,0")]
        p: WeightTriple,
    },
    /// Recover the integrand quadruple of a dumped process from its increments.
    Extract {
        /// Model descriptor (JSON).
        #[arg(long)]
        model: PathBuf,
        /// Process dump (CSV: time_index,row,col,re,im).
        #[arg(long)]
        process: PathBuf,
        /// Incoming weight triple `p1,p2,p3`.
        #[arg(long, value_parser = parse_weights, default_value = "0,0,0")]
        p: WeightTriple,
        /// Outgoing weight triple `p1,p2,p3`; `p - q` must be componentwise
        /// nonnegative.
        #[arg(long, value_parser = parse_weights, default_value = "0,0,0")]
        q: WeightTriple,
    },
    /// Check the two-sided increment bound of a dumped process.
    Regularity {
        /// Model descriptor (JSON).
        #[arg(long)]
        model: PathBuf,
        /// Process dump (CSV: time_index,row,col,re,im).
        #[arg(long)]
        process: PathBuf,
        #[arg(long, value_parser = parse_weights, default_value = "0,0,0")]
        p: WeightTriple,
        #[arg(long, value_parser = parse_weights, default_value = "0,0,0")]
        q: WeightTriple,
        /// Dominating measure (JSON); defaults to the density recovered from
        /// the extracted integrands.
        #[arg(long)]
        measure: Option<PathBuf>,
    },
    /// Re-run one scenario's refinement metric over a grid list and fit the
    /// error order.
    Convergence {
        /// Scenario configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Scenario name inside the configuration.
        #[arg(long)]
        scenario: String,
        /// Comma-separated slice counts; defaults to the scenario's `grids`.
        #[arg(long, value_delimiter = ',')]
        grids: Vec<usize>,
    },
}

#[derive(Subcommand)]
enum BasisCmd {
    /// Print the graded basis as CSV: index, initial slot, mode occupations.
    Dump {
        /// Model descriptor (JSON).
        #[arg(long)]
        model: PathBuf,
    },
}

fn parse_weights(s: &str) -> Result<WeightTriple, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated numbers, got {s:?}"));
    }
    let mut v = [0.0f64; 3];
    for (slot, part) in v.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| format!("bad weight component {part:?}"))?;
    }
    Ok(WeightTriple::new(v[0], v[1], v[2]))
}

fn load_model(path: &Path) -> Result<Arc<ModelSpace>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading model descriptor {}", path.display()))?;
    let desc = ModelDescriptor::from_json(&text)?;
    Ok(desc.build(io::default_budget())?)
}

fn ensure_out(out: &Option<PathBuf>) -> Result<Option<PathBuf>> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        return Ok(Some(dir.clone()));
    }
    Ok(None)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    let out = ensure_out(&cli.out)?;
    let budget = io::default_budget();
    match cli.cmd {
        Cmd::Run { config, parallel } => cmd_run(&config, cli.seed, parallel, budget, out),
        Cmd::Basis { what: BasisCmd::Dump { model } } => cmd_basis_dump(&model, out),
        Cmd::Integrate { model, quadruple, preset, p } => {
            cmd_integrate(&model, quadruple.as_deref(), preset.as_deref(), p, out)
        }
        Cmd::Extract { model, process, p, q } => cmd_extract(&model, &process, p, q, out),
        Cmd::Regularity { model, process, p, q, measure } => {
            cmd_regularity(&model, &process, p, q, measure.as_deref(), out)
        }
        Cmd::Convergence { config, scenario, grids } => {
            cmd_convergence(&config, &scenario, &grids, cli.seed, budget, out)
        }
    }
}

fn cmd_run(
    config: &Path,
    seed: u64,
    parallel: bool,
    budget: usize,
    out: Option<PathBuf>,
) -> Result<bool> {
    let cfg = load_config(config)
        .with_context(|| format!("loading configuration {}", config.display()))?;
    let base = config.parent().unwrap_or_else(|| Path::new("."));
    let results = run_config(&cfg, base, budget, seed, parallel)?;
    let mut checks = 0usize;
    let mut failed = 0usize;
    for (name, report) in &results {
        let verdict = if report.all_pass() { "PASS" } else { "FAIL" };
        println!("== scenario {name} [{verdict}] ==");
        print!("{}", report.render_table());
        println!();
        checks += report.lines.len();
        failed += report.failures();
    }
    let scenarios_passed = results.iter().filter(|(_, r)| r.all_pass()).count();
    println!(
        "{scenarios_passed}/{} scenarios passed; {checks} checks, {failed} failed",
        results.len()
    );
    if let Some(dir) = out {
        let entries: Vec<serde_json::Value> = results
            .iter()
            .map(|(name, report)| {
                serde_json::json!({
                    "scenario": name,
                    "pass": report.all_pass(),
                    "lines": serde_json::to_value(report)
                        .expect("report serialization cannot fail")["lines"],
                })
            })
            .collect();
        let doc = serde_json::json!({ "seed": seed, "scenarios": entries });
        let path = dir.join("report.json");
        fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")?;
        println!("report written to {}", path.display());
    }
    Ok(failed == 0)
}

fn cmd_basis_dump(model: &Path, out: Option<PathBuf>) -> Result<bool> {
    let model = load_model(model)?;
    let csv = basis_dump_csv(&model);
    print!("{csv}");
    if let Some(dir) = out {
        fs::write(dir.join("basis.csv"), &csv)?;
    }
    Ok(true)
}

fn cmd_integrate(
    model_path: &Path,
    quadruple: Option<&Path>,
    preset: Option<&str>,
    p: WeightTriple,
    out: Option<PathBuf>,
) -> Result<bool> {
    let model = load_model(model_path)?;
    let quad = match (quadruple, preset) {
        (Some(path), None) => {
            let desc = QuadrupleDescriptor::from_json(
                &fs::read_to_string(path)
                    .with_context(|| format!("reading quadruple descriptor {}", path.display()))?,
            )?;
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            desc.resolve(&model, base, Some(p))?
        }
        (None, Some(name)) => {
            let preset = QuadruplePreset::parse(name)
                .with_context(|| format!("unknown integrand preset {name:?}"))?;
            preset_quadruple(&model, preset, p)
        }
        _ => anyhow::bail!("pass exactly one of --quadruple or --preset"),
    };
    let sample = qs_integrate(&quad)?;
    let ad = adaptedness_check(&sample)?;
    eprintln!(
        "grid: {} slices of {:.6e}; basis dimension {}",
        model.grid.slices,
        model.dt(),
        model.dim()
    );
    eprintln!(
        "adaptedness below ceiling: {:.6e}; future-increment commutators: {:.6e}",
        ad.max_masked_residual, ad.max_commutator_residual
    );
    let csv = io::process_to_csv(&sample);
    match out {
        Some(dir) => {
            fs::write(dir.join("process.csv"), &csv)?;
            eprintln!("process.csv written to {}", dir.display());
        }
        None => print!("{csv}"),
    }
    Ok(true)
}

fn cmd_extract(
    model_path: &Path,
    process: &Path,
    p: WeightTriple,
    q: WeightTriple,
    out: Option<PathBuf>,
) -> Result<bool> {
    require_representation_hypothesis(&p, &q)?;
    let model = load_model(model_path)?;
    let text = fs::read_to_string(process)
        .with_context(|| format!("reading process dump {}", process.display()))?;
    let sample = process_from_csv(&model, &text)?;
    let ex = extract_blocks(&sample, p, q)?;

    // cross-validation: integrate the recovered quadruple and compare paths
    let reint = qs_integrate(&ex.quad)?;
    let mut residual = 0.0f64;
    for (a, b) in reint.ops.iter().zip(&sample.ops) {
        residual = residual.max(a.sub(b)?.max_abs());
    }
    println!(
        "grid: {} slices of {:.6e}; basis dimension {}",
        model.grid.slices,
        model.dt(),
        model.dim()
    );
    println!("max increment read-back defect:   {:.6e}", ex.max_defect());
    println!("...restricted below the ceiling:  {:.6e}", ex.max_defect_masked());
    println!("re-integration residual:          {:.6e}", residual);

    if let Some(dir) = out {
        let desc = quadruple_to_descriptor(&ex.quad, &dir)?;
        fs::write(dir.join("quadruple.json"), desc.to_json() + "\n")?;
        fs::write(dir.join("defect.csv"), defect_csv(&ex))?;
        println!("quadruple.json and defect.csv written to {}", dir.display());
    }
    Ok(true)
}

fn cmd_regularity(
    model_path: &Path,
    process: &Path,
    p: WeightTriple,
    q: WeightTriple,
    measure: Option<&Path>,
    out: Option<PathBuf>,
) -> Result<bool> {
    let model = load_model(model_path)?;
    let text = fs::read_to_string(process)
        .with_context(|| format!("reading process dump {}", process.display()))?;
    let sample = process_from_csv(&model, &text)?;
    let measure: RadonMeasureEstimate = match measure {
        Some(path) => measure_from_json(
            &fs::read_to_string(path)
                .with_context(|| format!("reading measure {}", path.display()))?,
        )?,
        None => {
            require_representation_hypothesis(&p, &q)?;
            let ex = extract_blocks(&sample, p, q)?;
            measure_from_integrands(&ex.quad, &p, &q)?.estimate
        }
    };
    let report = regularity_estimate(&sample, &p, &q, &measure, true)?;
    let csv = regularity_csv(&report);
    print!("{csv}");
    println!(
        "max forward excess {:.6e}, max adjoint excess {:.6e}, pass: {}",
        report.max_forward_excess, report.max_adjoint_excess, report.pass
    );
    if let Some(dir) = out {
        fs::write(dir.join("regularity.csv"), &csv)?;
    }
    Ok(report.pass)
}

fn cmd_convergence(
    config: &Path,
    scenario: &str,
    grids: &[usize],
    seed: u64,
    budget: usize,
    out: Option<PathBuf>,
) -> Result<bool> {
    let cfg = load_config(config)
        .with_context(|| format!("loading configuration {}", config.display()))?;
    let base = config.parent().unwrap_or_else(|| Path::new("."));
    let spec = cfg
        .scenarios
        .iter()
        .find(|s| s.name == scenario)
        .with_context(|| format!("no scenario named {scenario:?} in the configuration"))?;
    let grids = if grids.is_empty() { spec.grids.clone() } else { grids.to_vec() };
    let study = convergence_study(&cfg, spec, &grids, base, budget, seed)?;
    println!("{:>8} {:>14} {:>14}", "slices", "dt", "error");
    for ((n, dt), err) in study.slices.iter().zip(&study.dts).zip(&study.errors) {
        println!("{n:>8} {dt:>14.6e} {err:>14.6e}");
    }
    match study.order {
        Some(order) => {
            let flag = if study.monotone { "" } else { "  (non-monotone)" };
            println!("fitted order: {order:.3}{flag}");
        }
        None => println!("errors at machine precision on every grid (exact)"),
    }
    if let Some(dir) = out {
        fs::write(
            dir.join("convergence.json"),
            serde_json::to_string_pretty(&study)? + "\n",
        )?;
    }
    Ok(true)
}
