//! Command-line front end: experiment files, subcommands and result files.
//!
//! Every subcommand writes versioned CSV files plus a `manifest.json` with
//! the full experiment, its hash and the seeds used, so a run can be
//! replayed with `--manifest`.

pub mod config;
pub mod experiment;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::closed_form::{ClosedForm, PrecodingPlan, PrivateScheme, Transmission};
use crate::error::{Error, Result};
use crate::montecarlo::{self, UatFTerms};
use crate::optimize::{build_maxmin_problem, default_instant, optimal_rho_for_plan, robust_common_precoding, TraceEvent};
use crate::scenario::Scenario;

pub use config::{parse_config, parse_spec, ExperimentSpec, SchemeSpec, Sweep, WeightsMode};
pub use experiment::{build_plan, run_experiment, Manifest, ResultRow, Tracer};

use experiment::{aggregate_csv, csv_text, mc_seed, results_csv, sha256_hex, write_outputs};

#[derive(Debug, Parser)]
#[command(name = "cfmimo", version, about = "Cell-free massive MIMO downlink with rate splitting")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Experiment file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the base topology seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Monte Carlo realizations (overrides the file).
    #[arg(long, global = true)]
    pub mc: Option<usize>,
    /// Print optimisation traces as JSON lines on stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    /// Replays the experiment recorded in a manifest.
    #[arg(long, global = true, conflicts_with_all = ["config", "seed", "mc"])]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Channel-estimation NMSE per UE and AP.
    Nmse,
    /// Closed-form spectral efficiencies at the base configuration.
    Se,
    /// Closed forms against Monte Carlo estimates.
    Validate,
    /// Power-split search for every rate-splitting scheme.
    RhoOpt,
    /// Max-min common precoding.
    Robust {
        /// Fixed power split; searched when absent.
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Full experiment over the configured sweep.
    Sweep,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Nmse => "nmse",
            Self::Se => "se",
            Self::Validate => "validate",
            Self::RhoOpt => "rho-opt",
            Self::Robust { .. } => "robust",
            Self::Sweep => "sweep",
        }
    }
}

/// Loads the experiment from `--config` or `--manifest` and applies overrides.
pub fn load_spec(global: &GlobalArgs, command: &str) -> Result<(ExperimentSpec, Option<Manifest>)> {
    if let Some(path) = &global.manifest {
        let m = Manifest::load(path)?;
        if m.command != command {
            return Err(Error::InvalidConfig(format!("manifest records `{}`, not `{command}`", m.command)));
        }
        return Ok((m.spec.clone(), Some(m)));
    }
    let path = global.config.as_ref().ok_or_else(|| Error::InvalidConfig("--config or --manifest is required".into()))?;
    let mut spec = parse_config(path)?;
    if let Some(seed) = global.seed {
        spec.base.seed = seed;
    }
    if let Some(mc) = global.mc {
        spec.mc_realizations = mc;
    }
    spec.validate()?;
    Ok((spec, None))
}

fn output_dir(global: &GlobalArgs, spec: &ExperimentSpec) -> PathBuf {
    global
        .out
        .clone()
        .or_else(|| spec.output_path.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"))
}

/// Runs a parsed command line and returns the text for stdout.
pub fn run(cli: &Cli) -> Result<String> {
    let name = cli.command.name();
    let (spec, manifest) = load_spec(&cli.global, name)?;
    let tracer = Tracer { enabled: cli.global.verbose };
    let files = match &cli.command {
        Command::Nmse => vec![("nmse.csv", nmse_csv(&spec)?)],
        Command::Se => {
            let spec = ExperimentSpec { sweep: Sweep::None, ..spec.clone() };
            let rows = run_experiment(&spec, tracer)?;
            vec![("se.csv", results_csv(&rows))]
        }
        Command::Validate => {
            let (summary, terms) = validate_csv(&spec)?;
            vec![("validate.csv", summary), ("terms.csv", terms)]
        }
        Command::RhoOpt => vec![("rho_opt.csv", rho_opt_csv(&spec, tracer)?)],
        Command::Robust { rho } => {
            let (summary, weights) = robust_csv(&spec, *rho, tracer)?;
            vec![("robust.csv", summary), ("robust_weights.csv", weights)]
        }
        Command::Sweep => {
            let rows = run_experiment(&spec, tracer)?;
            vec![("results.csv", results_csv(&rows)), ("aggregate.csv", aggregate_csv(&rows))]
        }
    };
    let dir = output_dir(&cli.global, &spec);
    let written = write_outputs(&dir, name, &spec, &files)?;
    let mut out = String::new();
    for (file, hash) in &written.outputs {
        out.push_str(&format!("wrote {} (sha256 {hash})\n", dir.join(file).display()));
    }
    if let Some(m) = manifest {
        let mismatched: Vec<&str> = m
            .outputs
            .iter()
            .filter(|(f, h)| written.outputs.iter().all(|(g, k)| g != f || k != h))
            .map(|(f, _)| f.as_str())
            .collect();
        if !mismatched.is_empty() {
            return Err(Error::InvalidConfig(format!("replay differs from the manifest in {}", mismatched.join(", "))));
        }
        out.push_str("replay matches the manifest byte for byte\n");
    }
    Ok(out)
}

/// Scenario of every (sweep point, repetition) pair, in stable order.
fn scenarios(spec: &ExperimentSpec, with_sweep: bool) -> Vec<(config::SweepPoint, usize, Result<Scenario>)> {
    let points = if with_sweep { spec.sweep.points() } else { Sweep::None.points() };
    let jobs: Vec<(config::SweepPoint, usize)> =
        points.iter().flat_map(|&p| (0..spec.repetitions).map(move |r| (p, r))).collect();
    jobs.into_par_iter()
        .map(|(p, r)| {
            let mut c = p.apply(&spec.base);
            c.seed = spec.repetition_seed(r);
            (p, r, Scenario::build(&c))
        })
        .collect()
}

const NMSE_COLUMNS: &str = "sweep,sweep_value,repetition,seed,k,l,nmse_mmse,nmse_ls";

fn nmse_csv(spec: &ExperimentSpec) -> Result<String> {
    let mut lines = Vec::new();
    for (p, r, s) in scenarios(spec, true) {
        let s = s?;
        for k in 0..s.stats.num_ues {
            for l in 0..s.stats.num_aps {
                lines.push(format!(
                    "{},{},{r},{},{k},{l},{},{}",
                    p.kind, p.value, s.config.seed, s.stats.nmse_mmse[(k, l)], s.stats.nmse_ls[(k, l)]
                ));
            }
        }
    }
    Ok(csv_text(NMSE_COLUMNS, lines))
}

const VALIDATE_COLUMNS: &str = "scheme,repetition,seed,rho,n,k,stream,closed_form,monte_carlo,stderr,rel_err";

/// Instants compared by `validate`: start, five symbols in, and end of the data phase.
pub fn validation_instants(lambda: usize, tau_c: usize) -> Vec<usize> {
    let mut v = vec![lambda, (lambda + 5).min(tau_c), tau_c];
    v.dedup();
    v
}

const TERM_COLUMNS: &str = "scheme,repetition,n,k,index,term,estimate,stderr";

/// Term-level rows of one instant: desired-signal means per `(k, l)` split
/// into real and imaginary parts, interference moments per `(k, i)` and the
/// common interference per `k`.
fn term_lines(tag: &str, r: usize, t: &UatFTerms) -> Vec<String> {
    let mut out = Vec::new();
    let n = t.n;
    for (k, row) in t.ds_private.iter().enumerate() {
        for (l, v) in row.iter().enumerate() {
            let se = t.ds_private_stderr[k][l];
            out.push(format!("{tag},{r},{n},{k},{l},ds_private_re,{},{se}", v.re));
            out.push(format!("{tag},{r},{n},{k},{l},ds_private_im,{},{se}", v.im));
            let (c, se) = (t.ds_common[k][l], t.ds_common_stderr[k][l]);
            out.push(format!("{tag},{r},{n},{k},{l},ds_common_re,{},{se}", c.re));
            out.push(format!("{tag},{r},{n},{k},{l},ds_common_im,{},{se}", c.im));
        }
        for (i, v) in t.int_private[k].iter().enumerate() {
            out.push(format!("{tag},{r},{n},{k},{i},int_private,{v},{}", t.int_private_stderr[k][i]));
        }
        out.push(format!("{tag},{r},{n},{k},,int_common,{},{}", t.int_common[k], t.int_common_stderr[k]));
    }
    out
}

fn validate_csv(spec: &ExperimentSpec) -> Result<(String, String)> {
    if spec.mc_realizations == 0 {
        return Err(Error::InvalidConfig("validate needs Monte Carlo realizations (--mc N)".into()));
    }
    let mut lines = Vec::new();
    let mut terms = Vec::new();
    for (_, r, s) in scenarios(spec, false) {
        let s = s?;
        let seed = mc_seed(spec, r);
        let instants = validation_instants(s.lambda(), s.config.tau_c);
        for scheme in &spec.schemes {
            let built = build_plan(&s, scheme, None, spec, seed, Tracer::default(), "")?;
            let plan = &built.plan;
            let report = montecarlo::run(&s, plan, spec.mc_realizations, seed, &instants)?;
            let cf = if plan.private_scheme == PrivateScheme::DuMmse { None } else { Some(ClosedForm::new(&s, plan)?) };
            for at in &report.instants {
                terms.extend(term_lines(&scheme.tag(), r, &at.terms));
            }
            for &n in &instants {
                for (stream, common) in [("private", false), ("common", true)] {
                    let mc = report.sinr(n, common, plan.transmission).expect("instant evaluated");
                    let exact = match &cf {
                        Some(c) if common => Some(c.common_sinr(n)?),
                        Some(c) => Some(c.private_sinr(n)?),
                        None => None,
                    };
                    for (k, est) in mc.iter().enumerate() {
                        let x = exact.as_ref().map(|e| e[k]);
                        let rel = x.filter(|&x| x != 0.0).map(|x| est.value / x - 1.0);
                        lines.push(format!(
                            "{},{r},{},{},{n},{k},{stream},{},{},{},{}",
                            scheme.tag(),
                            s.config.seed,
                            plan.rho,
                            opt(x),
                            est.value,
                            est.stderr,
                            opt(rel)
                        ));
                    }
                }
            }
        }
    }
    Ok((csv_text(VALIDATE_COLUMNS, lines), csv_text(TERM_COLUMNS, terms)))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

const RHO_COLUMNS: &str = "scheme,repetition,seed,rho,sse,sse_rho0,sse_rho1,evaluations";

fn rho_opt_csv(spec: &ExperimentSpec, tracer: Tracer) -> Result<String> {
    let mut lines = Vec::new();
    for (_, r, s) in scenarios(spec, false) {
        let s = s?;
        for scheme in spec.schemes.iter().filter(|x| x.rs && x.private != PrivateScheme::DuMmse) {
            let base = PrecodingPlan::simple(&s, scheme.private, scheme.transmission, 0.0)?;
            let context = format!("{} rep={r}", scheme.tag());
            let mut sink = |e: &TraceEvent| tracer.emit(&context, e);
            let res = optimal_rho_for_plan(&s, &base, spec.rho_tolerance, Some(&mut sink))?;
            let sse0 = crate::closed_form::sum_se_value(&s, &base)?;
            let sse1 = crate::closed_form::sum_se_value(&s, &base.with_rho(&s, 1.0)?)?;
            lines.push(format!("{},{r},{},{},{},{sse0},{sse1},{}", scheme.tag(), s.config.seed, res.rho, res.sse, res.evaluations));
        }
    }
    Ok(csv_text(RHO_COLUMNS, lines))
}

const ROBUST_COLUMNS: &str =
    "scheme,repetition,seed,rho,n,t_min,t_max,min_sinr,baseline_min_sinr,iterations,converged,min_common_se,baseline_min_common_se";
const WEIGHT_COLUMNS: &str = "scheme,repetition,k,l,weight";

fn robust_csv(spec: &ExperimentSpec, rho: Option<f64>, tracer: Tracer) -> Result<(String, String)> {
    let mut summary = Vec::new();
    let mut weights = Vec::new();
    for (_, r, s) in scenarios(spec, false) {
        let s = s?;
        for scheme in spec.schemes.iter().filter(|x| x.private == PrivateScheme::DuMr && x.transmission == Transmission::Coherent) {
            let context = format!("{} rep={r}", scheme.tag());
            let base = PrecodingPlan::simple(&s, scheme.private, scheme.transmission, 0.0)?;
            let rho = match rho {
                Some(x) => x,
                None => {
                    let mut sink = |e: &TraceEvent| tracer.emit(&context, e);
                    optimal_rho_for_plan(&s, &base, spec.rho_tolerance, Some(&mut sink))?.rho
                }
            };
            if rho == 0.0 {
                return Err(Error::InvalidConfig(format!("{}: the power split is 0, so there is no common stream", scheme.tag())));
            }
            let n = spec.maxmin_instant.unwrap_or_else(|| default_instant(&s));
            let problem = build_maxmin_problem(&s, rho, n)?;
            let mut sink = |e: &TraceEvent| tracer.emit(&context, e);
            let res = robust_common_precoding(&problem, None, spec.bisection_tolerance, Some(&mut sink))?;
            let simple = base.with_rho(&s, rho)?;
            let robust = res.plan(&s, &simple)?;
            let se_robust = crate::closed_form::evaluate(&s, &robust)?.se_common;
            let se_simple = crate::closed_form::evaluate(&s, &simple)?.se_common;
            summary.push(format!(
                "{},{r},{},{rho},{n},{},{},{},{},{},{},{se_robust},{se_simple}",
                scheme.tag(),
                s.config.seed,
                res.t_min,
                res.t_max,
                res.min_sinr,
                res.baseline_min_sinr,
                res.iterations,
                res.converged
            ));
            for l in 0..s.stats.num_aps {
                for k in 0..s.stats.num_ues {
                    weights.push(format!("{},{r},{k},{l},{}", scheme.tag(), res.weights[(k, l)]));
                }
            }
        }
    }
    Ok((csv_text(ROBUST_COLUMNS, summary), csv_text(WEIGHT_COLUMNS, weights)))
}

/// Hash of a file on disk, for replay checks in scripts and tests.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    Ok(sha256_hex(&bytes))
}
