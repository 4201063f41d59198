//! Command-line surface.

use crate::energy::{capacity_vs_cutoff, EnergyGraph};
use crate::error::{Error, Result};
use crate::laakso::{occupation_rows, LaaksoModel, LaaksoPoint, ModelJson, PointJson, QuotientGraph, DEFAULT_PAIR_BUDGET};
use crate::scaling::{
    derive_gb, format_rational, pow2, BranchingProfile, DyadicProfile, ExponentBounds, ProfileFile, Role,
};
use crate::tree::{TreeModel, DEFAULT_BUDGET};
use crate::verify::{item_rng, run_suite, sig12, SuiteConfig};
use clap::{Args, Parser, Subcommand};
use num_bigint::BigInt;
use num_rational::BigRational;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "lgb", version, about = "Laakso-type spaces from volume and walk-dimension profiles")]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Size budget for model construction.
    #[arg(long, global = true)]
    pub budget: Option<usize>,
    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Derive the gluing and branching profiles from (Φ, Ψ, p).
    Synth(SynthArgs),
    #[command(subcommand)]
    Tree(TreeCommand),
    #[command(subcommand)]
    Laakso(LaaksoCommand),
    #[command(subcommand)]
    Energy(EnergyCommand),
    #[command(subcommand)]
    Verify(VerifyCommand),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Volume exponent of Φ(r) = r^dh.
    #[arg(long, requires = "beta", conflicts_with_all = ["phi", "psi"])]
    pub dh: Option<f64>,
    /// Walk exponent of Ψ(r) = r^beta.
    #[arg(long, requires = "dh")]
    pub beta: Option<f64>,
    #[arg(long, requires = "psi")]
    pub phi: Option<PathBuf>,
    #[arg(long, requires = "phi")]
    pub psi: Option<PathBuf>,
    #[arg(long)]
    pub p: f64,
    /// Level range `lo,hi` for power laws.
    #[arg(long, default_value = "-4,10", value_parser = parse_pair)]
    pub range: (i32, i32),
    /// Admissibility constant.
    #[arg(long, default_value_t = 1.0)]
    pub c: f64,
}

#[derive(Debug, Subcommand)]
pub enum TreeCommand {
    /// Build the finite tree for a branching profile.
    Build {
        /// Branching profile, or the output of `synth`.
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_parser = parse_pair)]
        window: (i32, i32),
    },
}

#[derive(Debug, Subcommand)]
pub enum LaaksoCommand {
    /// Write a model bundle from the output of `synth`.
    Build {
        #[arg(long)]
        gb: PathBuf,
        #[arg(long, value_parser = parse_pair)]
        window: (i32, i32),
    },
    /// Closed-form distance between two points.
    Dist(PairArgs),
    /// Geodesic description between two points.
    Geo {
        #[command(flatten)]
        pair: PairArgs,
        /// Include the tree walk and its copies.
        #[arg(long)]
        emit_path: bool,
    },
    /// Sample the pencil of geodesics and write occupation rows as CSV.
    Pencil {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
    },
}

#[derive(Debug, Args)]
pub struct PairArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Point as JSON, e.g. `{"u": {"0": 1}, "t": 3}`.
    #[arg(long)]
    pub x: String,
    #[arg(long)]
    pub y: String,
    /// Compare with breadth-first search on the quotient graph.
    #[arg(long)]
    pub check: bool,
}

#[derive(Debug, Subcommand)]
pub enum EnergyCommand {
    /// Capacity of a ball against the complement of its dilate.
    Capacity {
        #[arg(long)]
        model: PathBuf,
        /// `x,r` with `x` a node index or point JSON.
        #[arg(long)]
        ball: String,
        #[arg(long, default_value_t = 256.0)]
        factor: f64,
        #[arg(long, default_value_t = 2.0)]
        p: f64,
    },
}

#[derive(Debug, Subcommand)]
pub enum VerifyCommand {
    /// Run the verification suite.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_pair(s: &str) -> std::result::Result<(i32, i32), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `a,b`, got `{s}`"))?;
    let a = a.trim().parse().map_err(|e| format!("{a}: {e}"))?;
    let b = b.trim().parse().map_err(|e| format!("{b}: {e}"))?;
    Ok((a, b))
}

/// Output of `synth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbFile {
    pub p: f64,
    pub g: ProfileFile,
    pub b: ProfileFile,
    pub g_slack: f64,
    pub b_slack: f64,
    pub g_bounds: ExponentBounds,
    pub b_bounds: ExponentBounds,
}

impl GbFile {
    pub fn profiles(&self) -> Result<(BranchingProfile, BranchingProfile)> {
        Ok((BranchingProfile::from_file(&self.g)?, BranchingProfile::from_file(&self.b)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceJson {
    pub kind: crate::laakso::GeodesicKind,
    pub units: u64,
    /// Metric distance as an exact rational.
    pub distance: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_units: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionJson {
    pub vertex: usize,
    pub level: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeodesicJson {
    #[serde(flatten)]
    pub distance: DistanceJson,
    pub inversion_points: Vec<InversionJson>,
    pub segments: Vec<PointJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vertices: Option<Vec<usize>>,
    /// Copy carrying each edge of the walk.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub copies: Option<Vec<BTreeMap<i32, u32>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityJson {
    pub value: f64,
    pub lower_bound: f64,
    pub iterations: usize,
    pub residual: f64,
    pub cutoff_energy: f64,
    pub normalized: f64,
    pub effective_factor: f64,
    pub truncated: bool,
}

/// Exit status of a completed command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    CheckFailed,
}

impl Outcome {
    pub fn code(self) -> i32 {
        match self {
            Outcome::Pass => 0,
            Outcome::CheckFailed => 1,
        }
    }
}

/// Exit code for an error: 1 for failed checks, 2 for bad input.
pub fn error_code(e: &Error) -> i32 {
    match e {
        Error::NotAdmissible(_) | Error::HypothesisViolated { .. } | Error::NoConvergence { .. } | Error::Disconnected(..) => 1,
        _ => 2,
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Invalid(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                stdout.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

fn emit_json<T: Serialize>(out: &Option<PathBuf>, value: &T) -> Result<()> {
    emit(out, &serde_json::to_string_pretty(value)?)
}

fn load_model(path: &Path, budget: Option<usize>) -> Result<LaaksoModel> {
    let json: ModelJson = read_json(path)?;
    LaaksoModel::from_json(&json, budget.unwrap_or(DEFAULT_PAIR_BUDGET))
}

fn parse_point(model: &LaaksoModel, s: &str) -> Result<LaaksoPoint> {
    let json: PointJson = serde_json::from_str(s)?;
    let p = model.point_from_json(&json)?;
    Ok(model.canonicalize(p))
}

fn metric(model: &LaaksoModel, units: u64) -> String {
    format_rational(&(pow2(model.m as i64 - 1) * BigRational::from_integer(BigInt::from(units))))
}

fn distance_json(model: &LaaksoModel, pair: &PairArgs, x: &LaaksoPoint, y: &LaaksoPoint) -> Result<DistanceJson> {
    let (units, kind) = model.distance(x, y)?;
    let oracle_units = if pair.check {
        let qg = QuotientGraph::build(model)?;
        Some(qg.oracle_distance(qg.node_of(model, x), qg.node_of(model, y))?)
    } else {
        None
    };
    Ok(DistanceJson { kind, units, distance: metric(model, units), oracle_units })
}

/// Runs a parsed invocation.
pub fn run(cli: Cli) -> Result<Outcome> {
    let out = &cli.out;
    match cli.command {
        Command::Synth(a) => {
            let (phi, psi) = match (a.dh, a.beta, &a.phi, &a.psi) {
                (Some(dh), Some(beta), _, _) => {
                    (DyadicProfile::power_law(dh, a.range.0, a.range.1)?, DyadicProfile::power_law(beta, a.range.0, a.range.1)?)
                }
                (_, _, Some(phi), Some(psi)) => (
                    DyadicProfile::from_file(&read_json(phi)?)?,
                    DyadicProfile::from_file(&read_json(psi)?)?,
                ),
                _ => return Err(Error::Invalid("give --dh and --beta, or --phi and --psi".into())),
            };
            let gb = derive_gb(&phi, &psi, a.p, a.c)?;
            let file = GbFile {
                p: a.p,
                g: gb.g.profile.to_file(),
                b: gb.b.profile.to_file(),
                g_slack: sig12(gb.g.slack),
                b_slack: sig12(gb.b.slack),
                g_bounds: gb.g_bounds,
                b_bounds: gb.b_bounds,
            };
            emit_json(out, &file)?;
            Ok(Outcome::Pass)
        }
        Command::Tree(TreeCommand::Build { b, window }) => {
            let value: serde_json::Value = read_json(&b)?;
            let file: ProfileFile = match value.get("b") {
                Some(inner) => serde_json::from_value(inner.clone())?,
                None => serde_json::from_value(value)?,
            };
            if file.role != Role::Branching {
                return Err(Error::InvalidProfile("tree build needs a branching profile".into()));
            }
            let prof = BranchingProfile::from_file(&file)?;
            let tree = TreeModel::build(&prof, window.0, window.1, cli.budget.unwrap_or(DEFAULT_BUDGET))?;
            emit_json(out, &tree.to_json())?;
            Ok(Outcome::Pass)
        }
        Command::Laakso(cmd) => run_laakso(cmd, out, cli.budget, cli.seed),
        Command::Energy(EnergyCommand::Capacity { model, ball, factor, p }) => {
            let model = load_model(&model, cli.budget)?;
            let qg = QuotientGraph::build(&model)?;
            let (x, r) = ball
                .rsplit_once(',')
                .ok_or_else(|| Error::Invalid(format!("--ball expects `x,r`, got `{ball}`")))?;
            let r: f64 = r.trim().parse().map_err(|_| Error::Invalid(format!("bad radius `{r}`")))?;
            let x = match x.trim().parse::<usize>() {
                Ok(node) if node < qg.num_nodes() => qg.rep_point(&model, node),
                Ok(node) => return Err(Error::Invalid(format!("node {node} out of range"))),
                Err(_) => parse_point(&model, x)?,
            };
            let graph = EnergyGraph::from_quotient(&qg);
            let cmp = capacity_vs_cutoff(&model, &qg, &graph, &x, r, p, factor)?;
            let json = CapacityJson {
                value: sig12(cmp.capacity.value),
                lower_bound: sig12(cmp.capacity.lower_bound),
                iterations: cmp.capacity.iterations,
                residual: sig12(cmp.capacity.residual),
                cutoff_energy: sig12(cmp.cutoff_energy),
                normalized: sig12(cmp.normalized),
                effective_factor: sig12(cmp.effective_factor),
                truncated: cmp.truncated,
            };
            emit_json(out, &json)?;
            Ok(if cmp.capacity.value <= cmp.cutoff_energy { Outcome::Pass } else { Outcome::CheckFailed })
        }
        Command::Verify(VerifyCommand::Run { config }) => {
            let mut cfg: SuiteConfig = read_json(&config)?;
            if let Some(b) = cli.budget {
                cfg.node_budget = b;
            }
            let base = config.parent().map(Path::to_path_buf).unwrap_or_default();
            let report = run_suite(&cfg, &base)?;
            emit_json(out, &report)?;
            for c in &report.checks {
                eprintln!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(if report.pass { Outcome::Pass } else { Outcome::CheckFailed })
        }
    }
}

fn run_laakso(cmd: LaaksoCommand, out: &Option<PathBuf>, budget: Option<usize>, seed: u64) -> Result<Outcome> {
    match cmd {
        LaaksoCommand::Build { gb, window } => {
            let file: GbFile = read_json(&gb)?;
            let (g, b) = file.profiles()?;
            let model = LaaksoModel::build(&g, &b, window.0, window.1, budget.unwrap_or(DEFAULT_PAIR_BUDGET))?;
            emit_json(out, &model.to_json())?;
            Ok(Outcome::Pass)
        }
        LaaksoCommand::Dist(pair) => {
            let model = load_model(&pair.model, budget)?;
            let (x, y) = (parse_point(&model, &pair.x)?, parse_point(&model, &pair.y)?);
            let d = distance_json(&model, &pair, &x, &y)?;
            emit_json(out, &d)?;
            Ok(if d.oracle_units.map_or(true, |o| o == d.units) { Outcome::Pass } else { Outcome::CheckFailed })
        }
        LaaksoCommand::Geo { pair, emit_path } => {
            let model = load_model(&pair.model, budget)?;
            let (x, y) = (parse_point(&model, &pair.x)?, parse_point(&model, &pair.y)?);
            let geo = model.geodesic(&x, &y)?;
            let d = distance_json(&model, &pair, &x, &y)?;
            let ok = d.oracle_units.map_or(true, |o| o == d.units) && d.units == geo.total_length;
            let json = GeodesicJson {
                distance: d,
                inversion_points: geo.inversion_points.iter().map(|&(vertex, level)| InversionJson { vertex, level }).collect(),
                segments: geo
                    .segments
                    .iter()
                    .map(|s| model.point_to_json(&LaaksoPoint { u: s.u.clone(), t: *s.path.last().unwrap_or(&x.t) }))
                    .collect(),
                vertices: emit_path.then(|| geo.walk.vertices.clone()),
                copies: emit_path.then(|| {
                    geo.walk
                        .copies
                        .iter()
                        .map(|u| model.point_to_json(&LaaksoPoint { u: u.clone(), t: 0 }).u)
                        .collect()
                }),
            };
            emit_json(out, &json)?;
            Ok(if ok { Outcome::Pass } else { Outcome::CheckFailed })
        }
        LaaksoCommand::Pencil { pair, samples } => {
            if samples == 0 {
                return Err(Error::Invalid("--samples must be at least 1".into()));
            }
            let model = load_model(&pair.model, budget)?;
            let qg = QuotientGraph::build(&model)?;
            let (x, y) = (parse_point(&model, &pair.x)?, parse_point(&model, &pair.y)?);
            let base = model.geodesic(&x, &y)?;
            let mut paths = Vec::with_capacity(samples);
            let mut exact = true;
            for i in 0..samples {
                let w = model.sample_pencil(&base, &mut item_rng(seed, 10, i as u64));
                exact &= w.copies.len() as u64 == base.total_length;
                paths.push(qg.walk_nodes(&model, &w, &x, &y)?);
            }
            let rows = occupation_rows(&model, &paths, base.total_length)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            if rows.is_empty() {
                w.write_record(["step", "time", "level", "max_count", "samples", "normalized"])
                    .map_err(|e| Error::Invalid(e.to_string()))?;
            }
            for r in &rows {
                let mut r = r.clone();
                r.time = sig12(r.time);
                r.normalized = sig12(r.normalized);
                w.serialize(r).map_err(|e| Error::Invalid(e.to_string()))?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
            emit(out, &String::from_utf8_lossy(&bytes))?;
            Ok(if exact { Outcome::Pass } else { Outcome::CheckFailed })
        }
    }
}

/// Parses `args` and runs them, returning the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(o) => o.code(),
        Err(e) => {
            eprintln!("error: {e}");
            error_code(&e)
        }
    }
}
