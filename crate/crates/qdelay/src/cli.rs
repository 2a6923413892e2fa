//! Command-line front end.
//!
//! Five subcommands tie the library into reproducible runs: `certify`
//! searches for a stability certificate and writes it to disk, `sweep-delay`
//! probes the largest certifiable delay on a grid, `simulate` integrates
//! sample paths and writes CSV summaries, `reduce` exports the planar form
//! of a spin model as a system file, and `verify-cert` re-checks a written
//! certificate in exact arithmetic.
//!
//! Every run that produces files also writes a manifest — a sorted
//! `key=value` listing of all resolved parameters and seeds — so any output
//! can be regenerated byte-for-byte. Exit codes are a stable contract:
//! `0` success/certified, `1` malformed input, `2` valid-but-negative
//! outcome (no certificate, failed verification).

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use num_traits::Zero;
use rayon::prelude::*;

use crate::certifier::{
    self, certify, max_certified_delay, parse_decimal_rational, rational_text,
    read_stability_certificate, read_system_file, verify_stability_certificate,
    write_delay_sweep_csv, write_stability_certificate, write_system_file, CertifyOutcome,
    DecisionTemplate, DelaySystem, InvarianceStatus, SystemOptions,
};
use crate::poly::Rational;
use crate::quantum::{
    make_spin_operators, project_state, reduce_spin_half, DensityMatrix, SmeModel, SpinTarget,
};
use crate::simulator::{
    ensemble, simulate_reduced_path, simulate_sme_path, write_ensemble_csv, write_observable_csv,
    InitialHistory, SimConfig,
};

/// Parse the given arguments (without the program name) and execute one
/// subcommand, returning the process exit code.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> i32 {
    init_workers();
    let argv = std::iter::once("qdelay".to_string()).chain(args);
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests arrive as "errors" but are
            // successful displays; real parse failures are input errors.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Certify(args) => cmd_certify(args),
        Command::SweepDelay(args) => cmd_sweep_delay(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Reduce(args) => cmd_reduce(args),
        Command::VerifyCert(args) => cmd_verify_cert(args),
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

/// Honor `QDELAY_WORKERS` for the global worker pool. Ignored when unset,
/// unparsable, or when a pool already exists (repeated in-process calls).
fn init_workers() {
    if let Ok(raw) = std::env::var("QDELAY_WORKERS") {
        if let Ok(n) = raw.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

#[derive(Parser)]
#[command(
    name = "qdelay",
    about = "Stability certificates and sample paths for delayed feedback systems",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for a stability certificate and write it to a file.
    Certify(CertifyArgs),
    /// Probe delays on a grid and report the largest certified prefix.
    SweepDelay(SweepDelayArgs),
    /// Integrate sample paths and write trajectory and ensemble CSVs.
    Simulate(SimulateArgs),
    /// Write the planar reduction of a spin model as a system file.
    Reduce(ReduceArgs),
    /// Re-verify a written certificate in exact arithmetic.
    VerifyCert(VerifyCertArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TargetArg {
    Up,
    Down,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum HistoryStateArg {
    Up,
    Down,
    Mixed,
}

/// Where the model comes from: the published experiment, a parameterized
/// built-in spin system, or a system file.
#[derive(Args)]
struct SourceArgs {
    /// The published spin-1/2 experiment: k=(1,4), η=9/10, τ=3/10,
    /// target `up`, history at the opposite pole.
    #[arg(long)]
    paper: bool,
    /// Built-in N-level spin model (N=2 supports reduction/certification).
    #[arg(long, value_name = "N", conflicts_with = "paper", requires_all = ["k", "eta"])]
    spin: Option<usize>,
    /// Feedback gains, exact decimals or rationals.
    #[arg(long, num_args = 2, value_names = ["K1", "K2"], requires = "spin")]
    k: Option<Vec<String>>,
    /// Measurement efficiency in (0, 1].
    #[arg(long, requires = "spin")]
    eta: Option<String>,
    /// Target eigenstate (default: up).
    #[arg(long, value_enum, requires = "spin")]
    target: Option<TargetArg>,
    /// Load a reduced system from a system file instead.
    #[arg(
        long,
        value_name = "FILE",
        conflicts_with_all = ["paper", "spin", "k", "eta", "target"]
    )]
    system: Option<PathBuf>,
}

/// Decision-polynomial degrees; unset fields keep the source's defaults.
#[derive(Args)]
struct TemplateArgs {
    /// Even degree of the V0 candidate.
    #[arg(long, value_name = "DEG")]
    v0_degree: Option<u32>,
    /// Even degree of the V1 candidate.
    #[arg(long, value_name = "DEG")]
    v1_degree: Option<u32>,
    /// Even degree of the domain multipliers.
    #[arg(long, value_name = "DEG")]
    multiplier_degree: Option<u32>,
    /// Positive-definiteness margin for R and T.
    #[arg(long, value_name = "EPS")]
    epsilon: Option<String>,
}

#[derive(Args)]
struct CertifyArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    template: TemplateArgs,
    /// Feedback delay (exact decimal or rational).
    #[arg(long, value_name = "TAU")]
    tau: Option<String>,
    /// Certificate output path.
    #[arg(long, default_value = "certificate.txt")]
    out: PathBuf,
    /// Manifest path (default: output path with a `.manifest` extension).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct SweepDelayArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    template: TemplateArgs,
    /// Largest delay to probe.
    #[arg(long, value_name = "TAU")]
    tau_max: String,
    /// Grid spacing between probes.
    #[arg(long, default_value = "1/20")]
    tol: String,
    /// Sweep CSV output path.
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
    /// Manifest path (default: output path with a `.manifest` extension).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Integration step.
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// Final simulated time.
    #[arg(long, default_value_t = 15.0)]
    horizon: f64,
    /// Feedback delay (exact decimal or rational).
    #[arg(long, value_name = "TAU")]
    tau: Option<String>,
    /// Seed for every random draw; nothing is ambient.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ensemble size.
    #[arg(long, default_value_t = 1)]
    paths: usize,
    /// Integrate the planar reduced form instead of the full filter.
    #[arg(long)]
    reduced: bool,
    /// Constant initial history for reduced runs: comma-separated
    /// coordinates.
    #[arg(long, value_name = "V1,V2,…")]
    history: Option<String>,
    /// Constant initial history for filter runs (or, projected, for
    /// reduced spin runs).
    #[arg(long, value_enum)]
    history_state: Option<HistoryStateArg>,
    /// Zero the diffusion (reduced runs only): the deterministic
    /// sanity-check configuration.
    #[arg(long)]
    suppress_diffusion: bool,
    /// Output prefix: writes `<prefix>-paths.csv`, `<prefix>-ensemble.csv`
    /// and `<prefix>.manifest`.
    #[arg(long, default_value = "sim")]
    out_prefix: String,
    /// Manifest path override.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct ReduceArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    template: TemplateArgs,
    /// Feedback delay recorded in the system file.
    #[arg(long, value_name = "TAU")]
    tau: Option<String>,
    /// System file output path.
    #[arg(long, default_value = "system.txt")]
    out: PathBuf,
    /// Manifest path (default: output path with a `.manifest` extension).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyCertArgs {
    /// Certificate file to verify.
    #[arg(long, value_name = "FILE")]
    cert: PathBuf,
    /// Optional system file the certificate must match.
    #[arg(long, value_name = "FILE")]
    system: Option<PathBuf>,
}

fn rat(p: i64, q: i64) -> Rational {
    Rational::new(p.into(), q.into())
}

/// Read a file with the path prefixed onto any error.
fn read_file(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

/// Parse a flag value as an exact rational, naming the flag on failure.
fn parse_flag_rational(flag: &str, text: &str) -> Result<Rational, String> {
    parse_decimal_rational(text).map_err(|e| format!("{flag}: {e}"))
}

/// Build the built-in spin model a source describes and record its resolved
/// parameters. Returns the model together with its target pole.
fn spin_model(
    source: &SourceArgs,
    manifest: &mut BTreeMap<String, String>,
) -> Result<(SmeModel, SpinTarget), String> {
    if source.paper {
        manifest.insert("source".into(), "paper".into());
        manifest.insert("n".into(), "2".into());
        manifest.insert("k1".into(), "1/1".into());
        manifest.insert("k2".into(), "4/1".into());
        manifest.insert("eta".into(), "9/10".into());
        manifest.insert("target".into(), "up".into());
        let model = SmeModel::spin_half(SpinTarget::Up, rat(9, 10), (rat(1, 1), rat(4, 1)))
            .map_err(|e| e.to_string())?;
        return Ok((model, SpinTarget::Up));
    }
    let n = source
        .spin
        .ok_or("pass one of --paper, --spin N, or --system FILE")?;
    let k = source.k.as_ref().expect("clap enforces --k with --spin");
    let k1 = parse_flag_rational("--k", &k[0])?;
    let k2 = parse_flag_rational("--k", &k[1])?;
    let eta = parse_flag_rational(
        "--eta",
        source.eta.as_ref().expect("clap enforces --eta with --spin"),
    )?;
    let target = match source.target.unwrap_or(TargetArg::Up) {
        TargetArg::Up => SpinTarget::Up,
        TargetArg::Down => SpinTarget::Down,
    };
    manifest.insert("source".into(), "spin".into());
    manifest.insert("n".into(), n.to_string());
    manifest.insert("k1".into(), rational_text(&k1));
    manifest.insert("k2".into(), rational_text(&k2));
    manifest.insert("eta".into(), rational_text(&eta));
    manifest.insert(
        "target".into(),
        match target {
            SpinTarget::Up => "up".into(),
            SpinTarget::Down => "down".into(),
        },
    );
    let ops = make_spin_operators(n).map_err(|e| e.to_string())?;
    let projector = target.projector(n).map_err(|e| e.to_string())?;
    let model = SmeModel::new(ops, eta, projector, (k1, k2)).map_err(|e| e.to_string())?;
    Ok((model, target))
}

/// Resolve the delay: the flag wins, the paper preset supplies 3/10, and
/// otherwise the given fallback (if any) applies.
fn resolve_tau(
    flag: &Option<String>,
    paper: bool,
    fallback: Option<Rational>,
) -> Result<Rational, String> {
    match flag {
        Some(text) => {
            let tau = parse_flag_rational("--tau", text)?;
            if tau < Rational::zero() {
                return Err("--tau: the delay cannot be negative".into());
            }
            Ok(tau)
        }
        None if paper => Ok(rat(3, 10)),
        None => fallback.ok_or_else(|| "--tau is required with --spin".into()),
    }
}

/// Apply template-flag overrides on top of a base template.
fn resolve_template(
    base: DecisionTemplate,
    args: &TemplateArgs,
) -> Result<DecisionTemplate, String> {
    let epsilon = match &args.epsilon {
        Some(text) => parse_flag_rational("--epsilon", text)?,
        None => base.epsilon,
    };
    Ok(DecisionTemplate {
        v0_degree: args.v0_degree.unwrap_or(base.v0_degree),
        v1_degree: args.v1_degree.unwrap_or(base.v1_degree),
        multiplier_degree: args.multiplier_degree.unwrap_or(base.multiplier_degree),
        epsilon,
    })
}

/// Resolve a source into a certifiable system plus a decision template.
/// `fallback_tau` substitutes for a missing `--tau` on spin sources (the
/// delay sweep probes its own grid, so any valid value does).
fn resolve_certifiable(
    source: &SourceArgs,
    tau_flag: &Option<String>,
    template_args: &TemplateArgs,
    fallback_tau: Option<Rational>,
    manifest: &mut BTreeMap<String, String>,
) -> Result<(DelaySystem, DecisionTemplate), String> {
    if let Some(path) = &source.system {
        manifest.insert("source".into(), format!("file:{}", path.display()));
        let text = read_file(path)?;
        let (mut system, base) = read_system_file(&text).map_err(|e| e.to_string())?;
        if let Some(text) = tau_flag {
            let tau = parse_flag_rational("--tau", text)?;
            system = system.with_tau(tau).map_err(|e| e.to_string())?;
        }
        manifest.insert("tau".into(), rational_text(system.tau()));
        let template = resolve_template(base, template_args)?;
        Ok((system, template))
    } else {
        let (model, _) = spin_model(source, manifest)?;
        let tau = resolve_tau(tau_flag, source.paper, fallback_tau)?;
        manifest.insert("tau".into(), rational_text(&tau));
        let system = reduce_spin_half(&model, tau).map_err(|e| e.to_string())?;
        let template = resolve_template(DecisionTemplate::default(), template_args)?;
        Ok((system, template))
    }
}

fn insert_template(manifest: &mut BTreeMap<String, String>, template: &DecisionTemplate) {
    manifest.insert("v0_degree".into(), template.v0_degree.to_string());
    manifest.insert("v1_degree".into(), template.v1_degree.to_string());
    manifest.insert(
        "multiplier_degree".into(),
        template.multiplier_degree.to_string(),
    );
    manifest.insert("epsilon".into(), rational_text(&template.epsilon));
}

/// The manifest's byte content: fixed header, then sorted `key=value`
/// lines.
fn manifest_text(entries: &BTreeMap<String, String>) -> String {
    let mut out = String::from("qdelay-manifest v1\n");
    for (k, v) in entries {
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    out
}

fn write_manifest(path: &Path, entries: &BTreeMap<String, String>) -> Result<(), String> {
    fs::write(path, manifest_text(entries)).map_err(|e| format!("{}: {e}", path.display()))
}

fn manifest_path(explicit: Option<PathBuf>, primary_out: &Path) -> PathBuf {
    explicit.unwrap_or_else(|| primary_out.with_extension("manifest"))
}

fn create_out(path: &Path) -> Result<io::BufWriter<fs::File>, String> {
    fs::File::create(path)
        .map(io::BufWriter::new)
        .map_err(|e| format!("{}: {e}", path.display()))
}

fn cmd_certify(args: CertifyArgs) -> Result<i32, String> {
    let mut manifest = BTreeMap::new();
    manifest.insert("command".into(), "certify".into());
    let (system, template) =
        resolve_certifiable(&args.source, &args.tau, &args.template, None, &mut manifest)?;
    insert_template(&mut manifest, &template);
    manifest.insert("out".into(), args.out.display().to_string());
    for w in system.warnings() {
        eprintln!("warning: {w}");
    }

    let outcome = certify(&system, &template).map_err(|e| e.to_string())?;
    let man_path = manifest_path(args.manifest, &args.out);
    match outcome {
        CertifyOutcome::Certified(cert) => {
            let mut out = create_out(&args.out)?;
            write_stability_certificate(&mut out, &cert).map_err(|e| e.to_string())?;
            out.flush().map_err(|e| e.to_string())?;
            write_manifest(&man_path, &manifest)?;
            println!(
                "certified at tau {} (system {})",
                rational_text(cert.tau()),
                &cert.fingerprint[..12]
            );
            println!("wrote {} and {}", args.out.display(), man_path.display());
            Ok(0)
        }
        CertifyOutcome::Unknown(diag) => {
            write_manifest(&man_path, &manifest)?;
            eprintln!(
                "no certificate found ({:?} after {} iterations): {}",
                diag.status, diag.iterations, diag.message
            );
            Ok(2)
        }
    }
}

fn cmd_sweep_delay(args: SweepDelayArgs) -> Result<i32, String> {
    let mut manifest = BTreeMap::new();
    manifest.insert("command".into(), "sweep-delay".into());
    let (system, template) = resolve_certifiable(
        &args.source,
        &None,
        &args.template,
        Some(Rational::zero()),
        &mut manifest,
    )?;
    // The sweep probes its own delay grid; the construction delay above is
    // a placeholder, so drop it from the record.
    manifest.remove("tau");
    let tau_max = parse_flag_rational("--tau-max", &args.tau_max)?;
    let tol = parse_flag_rational("--tol", &args.tol)?;
    insert_template(&mut manifest, &template);
    manifest.insert("tau_max".into(), rational_text(&tau_max));
    manifest.insert("tol".into(), rational_text(&tol));
    manifest.insert("out".into(), args.out.display().to_string());

    let sweep = max_certified_delay(&system, &template, &tau_max, &tol).map_err(|e| e.to_string())?;
    let mut out = create_out(&args.out)?;
    write_delay_sweep_csv(&mut out, &sweep).map_err(|e| e.to_string())?;
    out.flush().map_err(|e| e.to_string())?;
    let man_path = manifest_path(args.manifest, &args.out);
    write_manifest(&man_path, &manifest)?;

    for tau in &sweep.noncontiguous {
        eprintln!(
            "warning: tau {} certified above the first failure",
            rational_text(tau)
        );
    }
    println!("wrote {} and {}", args.out.display(), man_path.display());
    match &sweep.max_tau {
        Some(tau) => {
            println!("largest certified delay: {}", rational_text(tau));
            Ok(0)
        }
        None => {
            eprintln!("no probed delay certified");
            Ok(2)
        }
    }
}

fn cmd_reduce(args: ReduceArgs) -> Result<i32, String> {
    if args.source.system.is_some() {
        return Err("reduce takes a built-in model (--paper or --spin), not a system file".into());
    }
    let mut manifest = BTreeMap::new();
    manifest.insert("command".into(), "reduce".into());
    let (model, _) = spin_model(&args.source, &mut manifest)?;
    let tau = resolve_tau(&args.tau, args.source.paper, None)?;
    manifest.insert("tau".into(), rational_text(&tau));
    let system = reduce_spin_half(&model, tau).map_err(|e| e.to_string())?;
    let template = resolve_template(DecisionTemplate::default(), &args.template)?;
    insert_template(&mut manifest, &template);
    manifest.insert("out".into(), args.out.display().to_string());

    let mut out = create_out(&args.out)?;
    write_system_file(&mut out, &system, &template).map_err(|e| e.to_string())?;
    out.flush().map_err(|e| e.to_string())?;
    let man_path = manifest_path(args.manifest, &args.out);
    write_manifest(&man_path, &manifest)?;
    println!("system fingerprint {}", certifier::fingerprint(&system));
    println!("wrote {} and {}", args.out.display(), man_path.display());
    Ok(0)
}

/// Reduced-run observable: the first coordinate is the target distance in
/// the spin reduction's coordinates; file systems report their convergence
/// measure instead.
#[derive(Clone, Copy)]
enum ReducedObs {
    Dist,
    VStar,
}

/// What `simulate` resolved to run.
enum Job {
    Reduced {
        system: DelaySystem,
        history: Vec<f64>,
        obs: ReducedObs,
    },
    Sme {
        model: SmeModel,
        history: DensityMatrix,
    },
}

/// Rebuild a system with its diffusion scale zeroed (the deterministic
/// sanity-check variant). Boundedness carries over; domain invariance of
/// the altered dynamics is the caller's claim, as for any hand-edited
/// system.
fn suppress_diffusion(system: &DelaySystem) -> Result<DelaySystem, String> {
    let mut spec = system.spec().clone();
    spec.diffusion_scale_sq = Rational::zero();
    DelaySystem::with_options(
        spec,
        &SystemOptions {
            bound: system.bound().clone(),
            invariance: InvarianceStatus::Asserted,
            ..SystemOptions::default()
        },
    )
    .map_err(|e| e.to_string())
}

fn parse_history_vector(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|tok| {
            let tok = tok.trim();
            tok.parse::<f64>()
                .map_err(|_| format!("--history: invalid coordinate '{tok}'"))
        })
        .collect()
}

fn history_state(arg: HistoryStateArg, n: usize) -> Result<DensityMatrix, String> {
    let state = match arg {
        HistoryStateArg::Up => DensityMatrix::basis_projector(n, 0),
        HistoryStateArg::Down => DensityMatrix::basis_projector(n, n - 1),
        HistoryStateArg::Mixed => DensityMatrix::maximally_mixed(n),
    };
    state.map_err(|e| e.to_string())
}

fn history_state_name(arg: HistoryStateArg) -> &'static str {
    match arg {
        HistoryStateArg::Up => "up",
        HistoryStateArg::Down => "down",
        HistoryStateArg::Mixed => "mixed",
    }
}

fn float_text(v: f64) -> String {
    format!("{v:.16e}")
}

fn cmd_simulate(args: SimulateArgs) -> Result<i32, String> {
    let mut manifest = BTreeMap::new();
    manifest.insert("command".into(), "simulate".into());

    let reduced_mode = args.reduced || args.source.system.is_some();
    if args.suppress_diffusion && !reduced_mode {
        return Err("--suppress-diffusion applies to reduced-form runs only".into());
    }
    if args.history.is_some() && !reduced_mode {
        return Err("--history takes planar coordinates; use --history-state for filter runs".into());
    }
    if args.history_state.is_some() && args.source.system.is_some() {
        return Err("--history-state needs a spin model; give --history V1,V2,… instead".into());
    }

    // Resolve the model/system, the delay, and the constant history.
    let (tau, job) = if let Some(path) = &args.source.system {
        manifest.insert("source".into(), format!("file:{}", path.display()));
        let text = read_file(path)?;
        let (system, _) = read_system_file(&text).map_err(|e| e.to_string())?;
        let system = if args.suppress_diffusion {
            suppress_diffusion(&system)?
        } else {
            system
        };
        let tau = resolve_tau(&args.tau, false, Some(system.tau().clone()))?;
        let history = args
            .history
            .as_deref()
            .ok_or("--history V1,…,Vn is required with --system")?;
        let history = parse_history_vector(history)?;
        let job = Job::Reduced {
            system,
            history,
            obs: ReducedObs::VStar,
        };
        (tau, job)
    } else {
        let (model, target) = spin_model(&args.source, &mut manifest)?;
        let tau = resolve_tau(&args.tau, args.source.paper, None)?;
        if reduced_mode {
            let system = reduce_spin_half(&model, tau.clone()).map_err(|e| e.to_string())?;
            let system = if args.suppress_diffusion {
                suppress_diffusion(&system)?
            } else {
                system
            };
            let history = match (&args.history, args.history_state) {
                (Some(text), _) => parse_history_vector(text)?,
                (None, Some(state)) => {
                    let rho = history_state(state, 2)?;
                    let (x, _) = project_state(&rho, target).map_err(|e| e.to_string())?;
                    vec![x[0], x[1]]
                }
                (None, None) if args.source.paper => vec![1.0, 0.0],
                (None, None) => {
                    return Err("give --history V1,V2 or --history-state for the initial segment"
                        .into())
                }
            };
            let job = Job::Reduced {
                system,
                history,
                obs: ReducedObs::Dist,
            };
            (tau, job)
        } else {
            let n = model.ops().n();
            let state = match args.history_state {
                Some(state) => history_state(state, n)?,
                None if args.source.paper => history_state(HistoryStateArg::Down, 2)?,
                None => return Err("give --history-state up|down|mixed for the initial state".into()),
            };
            (tau, Job::Sme {
                model,
                history: state,
            })
        }
    };

    let config = SimConfig {
        dt: args.dt,
        horizon: args.horizon,
        tau: certifier::rational_to_f64(&tau),
        seed: args.seed,
        paths: args.paths,
        initial_history: match &job {
            Job::Reduced { history, .. } => InitialHistory::Constant(history.clone()),
            Job::Sme { history, .. } => InitialHistory::ConstantState(history.clone()),
        },
    };

    manifest.insert("dt".into(), float_text(args.dt));
    manifest.insert("horizon".into(), float_text(args.horizon));
    manifest.insert("tau".into(), rational_text(&tau));
    manifest.insert("seed".into(), args.seed.to_string());
    manifest.insert("paths".into(), args.paths.to_string());
    manifest.insert("reduced".into(), reduced_mode.to_string());
    manifest.insert(
        "suppress_diffusion".into(),
        args.suppress_diffusion.to_string(),
    );
    match &job {
        Job::Reduced { history, .. } => {
            let text: Vec<String> = history.iter().map(|v| float_text(*v)).collect();
            manifest.insert("history".into(), text.join(","));
        }
        Job::Sme { .. } => {
            let name = args
                .history_state
                .map(history_state_name)
                .unwrap_or("down");
            manifest.insert("history_state".into(), name.to_string());
        }
    }

    // Integrate every path, collecting one observable series per path.
    let (times, series, obs_name) = match &job {
        Job::Reduced { system, obs, .. } => {
            let times = simulate_reduced_path(system, &config, 0)
                .map_err(|e| e.to_string())?
                .times;
            let series: Vec<(u64, Vec<f64>)> = (0..config.paths as u64)
                .into_par_iter()
                .map(|path| {
                    let traj =
                        simulate_reduced_path(system, &config, path).map_err(|e| e.to_string())?;
                    let values = traj
                        .states
                        .iter()
                        .map(|state| match obs {
                            ReducedObs::Dist => Ok(state[0]),
                            ReducedObs::VStar => system
                                .v_star()
                                .evaluate(state)
                                .map_err(|e| e.to_string()),
                        })
                        .collect::<Result<Vec<f64>, String>>()?;
                    Ok((path, values))
                })
                .collect::<Result<_, String>>()?;
            let name = match obs {
                ReducedObs::Dist => "dist",
                ReducedObs::VStar => "v_star",
            };
            (times, series, name)
        }
        Job::Sme { model, .. } => {
            let times = simulate_sme_path(model, &config, 0)
                .map_err(|e| e.to_string())?
                .times;
            let series: Vec<(u64, Vec<f64>)> = (0..config.paths as u64)
                .into_par_iter()
                .map(|path| {
                    let traj =
                        simulate_sme_path(model, &config, path).map_err(|e| e.to_string())?;
                    let values = traj
                        .states
                        .iter()
                        .map(|state| {
                            state.distance_to(model.target()).map_err(|e| e.to_string())
                        })
                        .collect::<Result<Vec<f64>, String>>()?;
                    Ok((path, values))
                })
                .collect::<Result<_, String>>()?;
            (times, series, "dist")
        }
    };
    let stats = ensemble(
        |_, path| Ok(series[path as usize].1.clone()),
        config.paths,
        config.seed,
    )
    .map_err(|e| e.to_string())?;

    let paths_csv = PathBuf::from(format!("{}-paths.csv", args.out_prefix));
    let ensemble_csv = PathBuf::from(format!("{}-ensemble.csv", args.out_prefix));
    let man_path = args
        .manifest
        .unwrap_or_else(|| PathBuf::from(format!("{}.manifest", args.out_prefix)));
    manifest.insert("paths_csv".into(), paths_csv.display().to_string());
    manifest.insert("ensemble_csv".into(), ensemble_csv.display().to_string());

    let mut out = create_out(&paths_csv)?;
    write_observable_csv(&mut out, obs_name, &times, &series).map_err(|e| e.to_string())?;
    out.flush().map_err(|e| e.to_string())?;
    let mut out = create_out(&ensemble_csv)?;
    write_ensemble_csv(&mut out, &times, &stats).map_err(|e| e.to_string())?;
    out.flush().map_err(|e| e.to_string())?;
    write_manifest(&man_path, &manifest)?;

    let last_mean = stats.mean.last().copied().unwrap_or(f64::NAN);
    println!(
        "wrote {}, {} and {}",
        paths_csv.display(),
        ensemble_csv.display(),
        man_path.display()
    );
    println!("final mean {obs_name}: {last_mean:.6}");
    Ok(0)
}

fn cmd_verify_cert(args: VerifyCertArgs) -> Result<i32, String> {
    let text = read_file(&args.cert)?;
    let cert = read_stability_certificate(&text).map_err(|e| e.to_string())?;
    println!("certificate {} (system {})", args.cert.display(), &cert.fingerprint[..12]);
    if let Some(path) = &args.system {
        let (system, _) = read_system_file(&read_file(path)?).map_err(|e| e.to_string())?;
        if certifier::fingerprint(&system) != cert.fingerprint {
            eprintln!(
                "certificate does not match {}: fingerprints differ",
                path.display()
            );
            return Ok(2);
        }
    }
    match verify_stability_certificate(&cert) {
        Ok(report) if report.pass => {
            println!(
                "verification passed; residual coefficient norm {:e}",
                certifier::rational_to_f64(&report.residual_inf_norm)
            );
            Ok(0)
        }
        Ok(report) => {
            for failure in &report.failures {
                eprintln!("verification failure: {failure}");
            }
            Ok(2)
        }
        Err(e) => {
            // The file parsed but its pieces do not assemble into a
            // checkable identity — a broken certificate, not broken input.
            eprintln!("verification failure: {e}");
            Ok(2)
        }
    }
}
