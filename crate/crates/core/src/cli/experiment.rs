//! Experiment orchestration and tabular output.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::closed_form::{evaluate, PrecodingPlan, PrivateScheme, SeReport};
use crate::error::{Error, Result};
use crate::montecarlo::{mc_evaluate, mmse_plan};
use crate::optimize::{
    build_maxmin_problem, default_instant, optimal_rho_for_plan, robust_common_precoding, RhoResult, RobustResult,
    TraceEvent,
};
use crate::scenario::Scenario;

use super::config::{ExperimentSpec, SchemeSpec, SweepPoint, WeightsMode};

/// Version tag written in the first line of every CSV file.
pub const CSV_VERSION: &str = "cfmimo-csv v1";
pub const MANIFEST_VERSION: u32 = 1;

/// Seed offset separating Monte Carlo streams from topology draws.
const MC_STREAM: u64 = 0x4d43_5f53_5452_4541;

/// Monte Carlo seed of repetition `r`.
pub fn mc_seed(spec: &ExperimentSpec, r: usize) -> u64 {
    spec.repetition_seed(r) ^ MC_STREAM
}

/// Optional JSON-lines trace printer.
#[derive(Debug, Clone, Copy, Default)]
pub struct Tracer {
    pub enabled: bool,
}

impl Tracer {
    pub(crate) fn emit(&self, context: &str, event: &TraceEvent) {
        if self.enabled {
            let line = serde_json::json!({ "context": context, "trace": event });
            eprintln!("{line}");
        }
    }
}

/// A precoding plan together with how it was obtained.
#[derive(Debug, Clone)]
pub struct BuiltPlan {
    pub plan: PrecodingPlan,
    pub rho_search: Option<RhoResult>,
    pub robust: Option<RobustResult>,
}

/// Builds the plan of `scheme`: power split from `rho` or the binary search,
/// then simple or max-min common weights.
pub fn build_plan(
    scenario: &Scenario,
    scheme: &SchemeSpec,
    rho: Option<f64>,
    spec: &ExperimentSpec,
    mc_seed: u64,
    tracer: Tracer,
    context: &str,
) -> Result<BuiltPlan> {
    let (kk, ll) = (scenario.stats.num_ues, scenario.stats.num_aps);
    let ones = DMatrix::from_element(kk, ll, 1.0);
    let mmse = scheme.private == PrivateScheme::DuMmse;
    let mut rho_search = None;
    let rho = match (scheme.rs, rho) {
        (false, _) => 0.0,
        (true, Some(r)) => r,
        (true, None) if mmse => {
            return Err(Error::Unsupported("the power-split search needs closed forms; give a rho sweep for DU-MMSE".into()))
        }
        (true, None) => {
            let base = PrecodingPlan::simple(scenario, scheme.private, scheme.transmission, 0.0)?;
            let mut sink = |e: &TraceEvent| tracer.emit(context, e);
            let r = optimal_rho_for_plan(scenario, &base, spec.rho_tolerance, Some(&mut sink))?;
            rho_search = Some(r);
            r.rho
        }
    };
    let mut robust = None;
    let weights = match scheme.common_weights {
        WeightsMode::Simple => ones,
        WeightsMode::Robust if scheme.private != PrivateScheme::DuMr => {
            return Err(Error::Unsupported("robust common weights are designed for DU-MR private precoding".into()))
        }
        WeightsMode::Robust if rho == 0.0 => ones,
        WeightsMode::Robust => {
            let n = spec.maxmin_instant.unwrap_or_else(|| default_instant(scenario));
            let problem = build_maxmin_problem(scenario, rho, n)?;
            let mut sink = |e: &TraceEvent| tracer.emit(context, e);
            let r = robust_common_precoding(&problem, None, spec.bisection_tolerance, Some(&mut sink))?;
            let w = r.weights.clone();
            robust = Some(r);
            w
        }
    };
    let plan = if mmse {
        if spec.mc_realizations == 0 {
            return Err(Error::Unsupported("DU-MMSE needs Monte Carlo realizations".into()));
        }
        mmse_plan(scenario, scheme.transmission, rho, weights, spec.mc_realizations, mc_seed)?
    } else if let Some(r) = &robust {
        let base = PrecodingPlan::simple(scenario, scheme.private, scheme.transmission, rho)?;
        r.plan(scenario, &base)?
    } else {
        PrecodingPlan::new(
            scenario,
            scheme.private,
            scheme.transmission,
            rho,
            weights,
            crate::closed_form::PrivateNormalization::Uniform,
        )?
    };
    Ok(BuiltPlan { plan, rho_search, robust })
}

/// One CSV row of a sweep: a UE of one (point, scheme, repetition), or a
/// failure marker with `k` empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub point: usize,
    pub sweep: &'static str,
    pub sweep_value: f64,
    pub scheme_index: usize,
    pub scheme: String,
    pub repetition: usize,
    pub seed: u64,
    pub k: Option<usize>,
    pub rho: Option<f64>,
    pub cf: Option<UeSe>,
    pub mc: Option<UeSe>,
    pub status: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UeSe {
    pub se_private: f64,
    pub se_common: f64,
    pub se_common_min: f64,
    pub sum_se: f64,
}

impl UeSe {
    fn from_report(r: &SeReport, k: usize) -> Self {
        Self { se_private: r.se_private[k], se_common: r.se_common_per_ue[k], se_common_min: r.se_common, sum_se: r.sum_se }
    }
}

pub const RESULT_COLUMNS: &str =
    "sweep,sweep_value,scheme,repetition,seed,k,rho,se_private,se_common,se_common_min,sum_se,mc_se_private,mc_se_common,mc_se_common_min,mc_sum_se,status";

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ResultRow {
    fn sort_key(&self) -> (usize, usize, usize, usize) {
        (self.point, self.scheme_index, self.repetition, self.k.map_or(0, |k| k + 1))
    }

    fn csv(&self) -> String {
        let se = |s: &Option<UeSe>| match s {
            Some(s) => format!("{},{},{},{}", s.se_private, s.se_common, s.se_common_min, s.sum_se),
            None => ",,,".to_string(),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.sweep,
            self.sweep_value,
            self.scheme,
            self.repetition,
            self.seed,
            opt(self.k),
            opt(self.rho),
            se(&self.cf),
            se(&self.mc),
            self.status
        )
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

fn failure(base: &ResultRow, e: &Error) -> ResultRow {
    ResultRow { k: None, cf: None, mc: None, status: format!("error:{}", e.kind()), ..base.clone() }
}

fn run_scheme(
    scenario: &Scenario,
    spec: &ExperimentSpec,
    point: &SweepPoint,
    scheme: &SchemeSpec,
    rep: usize,
    tracer: Tracer,
) -> Result<(f64, Option<SeReport>, Option<SeReport>)> {
    let seed = mc_seed(spec, rep);
    let context = format!("{}={} {} rep={rep}", point.kind, point.value, scheme.tag());
    let built = build_plan(scenario, scheme, point.rho(), spec, seed, tracer, &context)?;
    let cf = if scheme.private == PrivateScheme::DuMmse { None } else { Some(evaluate(scenario, &built.plan)?) };
    let mc = if spec.mc_realizations > 0 { Some(mc_evaluate(scenario, &built.plan, spec.mc_realizations, seed)?) } else { None };
    Ok((built.plan.rho, cf, mc))
}

/// Runs every (sweep point, repetition) job in parallel and returns the rows
/// in a stable order. Failures become tagged rows; the run continues.
pub fn run_experiment(spec: &ExperimentSpec, tracer: Tracer) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let points = spec.sweep.points();
    let jobs: Vec<(usize, usize)> = (0..points.len()).flat_map(|p| (0..spec.repetitions).map(move |r| (p, r))).collect();
    let mut rows: Vec<ResultRow> = jobs
        .par_iter()
        .flat_map_iter(|&(p, rep)| {
            let point = points[p];
            let mut config = point.apply(&spec.base);
            config.seed = spec.repetition_seed(rep);
            let scenario = Scenario::build(&config);
            let mut out = Vec::new();
            for (si, scheme) in spec.schemes.iter().enumerate() {
                let base = ResultRow {
                    point: p,
                    sweep: point.kind,
                    sweep_value: point.value,
                    scheme_index: si,
                    scheme: scheme.tag(),
                    repetition: rep,
                    seed: config.seed,
                    k: None,
                    rho: None,
                    cf: None,
                    mc: None,
                    status: "ok".into(),
                };
                let result = match &scenario {
                    Ok(s) => run_scheme(s, spec, &point, scheme, rep, tracer),
                    Err(e) => {
                        out.push(failure(&base, e));
                        continue;
                    }
                };
                match result {
                    Ok((rho, cf, mc)) => {
                        for k in 0..config.num_ues {
                            out.push(ResultRow {
                                k: Some(k),
                                rho: Some(rho),
                                cf: cf.as_ref().map(|r| UeSe::from_report(r, k)),
                                mc: mc.as_ref().map(|r| UeSe::from_report(r, k)),
                                ..base.clone()
                            });
                        }
                    }
                    Err(e) => out.push(failure(&base, &e)),
                }
            }
            out
        })
        .collect();
    rows.sort_by_key(|r| r.sort_key());
    Ok(rows)
}

/// Versioned CSV text with a header comment line.
pub fn csv_text(columns: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut s = format!("# {CSV_VERSION}\n{columns}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    csv_text(RESULT_COLUMNS, rows.iter().map(ResultRow::csv))
}

pub const AGGREGATE_COLUMNS: &str = "sweep,sweep_value,scheme,repetitions_ok,mean_rho,mean_sum_se,mean_mc_sum_se";

/// Per (point, scheme) averages of the sum SE over successful repetitions.
pub fn aggregate_csv(rows: &[ResultRow]) -> String {
    let mut lines = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        let (p, s) = (rows[i].point, rows[i].scheme_index);
        let mut j = i;
        while j < rows.len() && rows[j].point == p && rows[j].scheme_index == s {
            j += 1;
        }
        // One entry per repetition, taken from its first UE row.
        let firsts: Vec<&ResultRow> = rows[i..j].iter().filter(|r| r.is_ok() && r.k == Some(0)).collect();
        let n = firsts.len();
        let mean = |f: &dyn Fn(&ResultRow) -> Option<f64>| -> Option<f64> {
            let v: Vec<f64> = firsts.iter().filter_map(|r| f(r)).collect();
            (!v.is_empty() && v.len() == n).then(|| v.iter().sum::<f64>() / n as f64)
        };
        let r = &rows[i];
        lines.push(format!(
            "{},{},{},{},{},{},{}",
            r.sweep,
            r.sweep_value,
            r.scheme,
            n,
            opt(mean(&|r| r.rho)),
            opt(mean(&|r| r.cf.map(|c| c.sum_se))),
            opt(mean(&|r| r.mc.map(|c| c.sum_se)))
        ));
        i = j;
    }
    csv_text(AGGREGATE_COLUMNS, lines)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON form of an experiment.
pub fn spec_hash(spec: &ExperimentSpec) -> Result<String> {
    let json = serde_json::to_vec(spec).map_err(|e| Error::Serialize(e.to_string()))?;
    Ok(sha256_hex(&json))
}

/// Everything needed to replay a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub command: String,
    pub config_hash: String,
    pub topology_seeds: Vec<u64>,
    pub monte_carlo_seeds: Vec<u64>,
    /// Output file name and SHA-256 of its contents.
    pub outputs: Vec<(String, String)>,
    pub spec: ExperimentSpec,
}

impl Manifest {
    pub fn new(command: &str, spec: &ExperimentSpec, outputs: Vec<(String, String)>) -> Result<Self> {
        Ok(Self {
            version: MANIFEST_VERSION,
            command: command.to_string(),
            config_hash: spec_hash(spec)?,
            topology_seeds: (0..spec.repetitions).map(|r| spec.repetition_seed(r)).collect(),
            monte_carlo_seeds: (0..spec.repetitions).map(|r| mc_seed(spec, r)).collect(),
            outputs,
            spec: spec.clone(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Parse(format!("unsupported manifest version {}", m.version)));
        }
        let hash = spec_hash(&m.spec)?;
        if hash != m.config_hash {
            return Err(Error::Parse(format!("manifest config hash {} does not match its spec ({hash})", m.config_hash)));
        }
        Ok(m)
    }
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.display().to_string(), source })?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    Ok(path)
}

/// Writes a set of named outputs plus `manifest.json`.
pub fn write_outputs(dir: &Path, command: &str, spec: &ExperimentSpec, files: &[(&str, String)]) -> Result<Manifest> {
    let mut hashes = Vec::new();
    for (name, contents) in files {
        write_file(dir, name, contents)?;
        hashes.push((name.to_string(), sha256_hex(contents.as_bytes())));
    }
    let manifest = Manifest::new(command, spec, hashes)?;
    let mut json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serialize(e.to_string()))?;
    json.push('\n');
    write_file(dir, "manifest.json", &json)?;
    Ok(manifest)
}
