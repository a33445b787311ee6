//! Command-line front end: simulate → track/baseline → learn → evaluate.
//!
//! Every command writes its outputs into `--out` together with a
//! `manifest.json` recording the command, seed, the effective configuration
//! and its SHA-256, and SHA-256 digests of every input and output file.
//! Rerunning the recorded command reproduces the outputs bit for bit,
//! regardless of `--threads`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::baseline::{baseline_track, DEFAULT_TAU};
use crate::config::{load_parameters, load_scenario, Parameters};
use crate::error::{Error, Result};
use crate::evaluation::{score, DEFAULT_GATE};
use crate::learning::{em_run, EmConfig, LearnSet};
use crate::model::{
    read_detection_log, read_ground_truth, read_track_report, write_detection_log, write_ground_truth,
    write_provenance, write_track_report, DetectionLog,
};
use crate::parallel::with_threads;
use crate::rbpf::{run_filter, FilterConfig};
use crate::simulator::simulate;

#[derive(Debug, Parser)]
#[command(name = "jumptrack", version, about = "Track semi-static objects and learn their dynamics")]
pub struct Cli {
    /// Worker thread cap (0 = all cores); does not change results.
    #[arg(long, global = true, env = "JUMPTRACK_THREADS", default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate detections, ground truth and provenance from a scenario.
    Simulate(SimulateArgs),
    /// Run the particle filter over a detection log.
    Track(TrackArgs),
    /// Learn dynamics parameters by EM.
    Learn(LearnArgs),
    /// Score a track report against ground truth.
    Evaluate(EvaluateArgs),
    /// Run the threshold baseline tracker.
    Baseline(BaselineArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Parameter file; built-in defaults when omitted.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Overrides the scenario's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the parameter file's particle count.
    #[arg(long)]
    pub particles: Option<usize>,
    /// Number of locations; read from the detection log header when omitted.
    #[arg(long)]
    pub locations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[command(flatten)]
    pub filter: FilterArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LearnArgs {
    #[command(flatten)]
    pub filter: FilterArgs,
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    /// Comma-separated subset of p_jump,sigma_q,r_f, or "all".
    #[arg(long, default_value = "all")]
    pub learn: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Match gate in meters; repeat for a sweep.
    #[arg(long = "gate")]
    pub gates: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    /// Same-location match radius; 3·σ_r of the parameters when omitted.
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 success, 1 usage error, 2 data error, 3 numerical failure.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let threads = cli.threads;
    match with_threads(threads, move || run(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Track(a) => cmd_track(&a),
        Command::Learn(a) => cmd_learn(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Baseline(a) => cmd_baseline(&a),
    }
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let mut scn = load_scenario(&a.scenario)?;
    if let Some(seed) = a.seed {
        scn.seed = seed;
    }
    let params = load_params(a.params.as_deref())?;
    let sim = simulate(&scn, &params)?;
    create_dir(&a.out)?;
    let detections = a.out.join("detections.jsonl");
    let truth = a.out.join("truth.jsonl");
    let provenance = a.out.join("provenance.jsonl");
    write_detection_log(&detections, &sim.frames, Some(scn.n_locations))?;
    write_ground_truth(&sim.truth, &truth)?;
    write_provenance(&sim.provenance, &provenance)?;
    let config = json!({
        "scenario": serde_json::to_value(&scn).map_err(json_err)?,
        "params": params_value(&params)?,
    });
    write_manifest(
        &a.out,
        "simulate",
        scn.seed,
        config,
        &[&a.scenario],
        &[&detections, &truth, &provenance],
    )
}

pub fn cmd_track(a: &TrackArgs) -> Result<()> {
    let (log, cfg) = filter_setup(&a.filter)?;
    let (report, state) = run_filter(&log.frames, &cfg)?;
    create_dir(&a.out)?;
    let report_path = a.out.join("report.jsonl");
    let likelihood_path = a.out.join("likelihood.json");
    let counts_path = a.out.join("counts.csv");
    write_track_report(&report, &report_path)?;
    let likelihood = json!({
        "expected_log_likelihood": state.expected_log_likelihood(),
        "log_normalizers": state.log_normalizers,
    });
    write_text(&likelihood_path, &pretty(&likelihood)?)?;
    let mut counts = String::from("k,location,n_targets\n");
    for s in &report {
        counts.push_str(&format!("{},{},{}\n", s.k, s.location, s.n_targets));
    }
    write_text(&counts_path, &counts)?;
    let config = json!({
        "params": params_value(&cfg.params)?,
        "n_locations": cfg.n_locations,
    });
    write_manifest(
        &a.out,
        "track",
        cfg.seed,
        config,
        &input_paths(&a.filter),
        &[&report_path, &likelihood_path, &counts_path],
    )
}

pub fn cmd_learn(a: &LearnArgs) -> Result<()> {
    let learn = LearnSet::parse(&a.learn)?;
    let (log, fcfg) = filter_setup(&a.filter)?;
    let cfg = EmConfig::new(a.iters, learn, fcfg.n_locations, fcfg.seed);
    let report = em_run(&log.frames, &fcfg.params, &cfg)?;
    create_dir(&a.out)?;
    let json_path = a.out.join("em_report.json");
    let csv_path = a.out.join("em_report.csv");
    let params_path = a.out.join("learned_params.json");
    report.write_json(&json_path)?;
    write_text(&csv_path, &report.to_csv())?;
    write_text(&params_path, &report.final_params.to_canonical_json())?;
    let config = json!({
        "params": params_value(&fcfg.params)?,
        "n_locations": fcfg.n_locations,
        "iters": a.iters,
        "learn": a.learn,
    });
    write_manifest(
        &a.out,
        "learn",
        fcfg.seed,
        config,
        &input_paths(&a.filter),
        &[&json_path, &csv_path, &params_path],
    )
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let report = read_track_report(&a.report)?;
    let truth = read_ground_truth(&a.truth)?;
    let gates = if a.gates.is_empty() { vec![DEFAULT_GATE] } else { a.gates.clone() };
    let mut metrics = Vec::with_capacity(gates.len());
    let mut gates_csv =
        String::from("gate,mota,motp,miss_rate,fp_rate,mismatch_rate,n_fp,n_fn,n_mm,n_k,n_matches\n");
    let mut steps_csv = String::new();
    for (i, &gate) in gates.iter().enumerate() {
        let ev = score(&report, &truth, gate)?;
        let s = &ev.score;
        gates_csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            gate,
            s.mota,
            s.motp,
            s.miss_rate,
            s.fp_rate,
            s.mismatch_rate,
            s.counts.n_fp,
            s.counts.n_fn,
            s.counts.n_mm,
            s.counts.n_k,
            s.counts.n_matches
        ));
        for (j, line) in ev.steps_csv().lines().enumerate() {
            if j == 0 {
                if i == 0 {
                    steps_csv.push_str(&format!("gate,{line}\n"));
                }
            } else {
                steps_csv.push_str(&format!("{gate},{line}\n"));
            }
        }
        metrics.push(ev.score);
    }
    create_dir(&a.out)?;
    let metrics_path = a.out.join("metrics.json");
    let gates_path = a.out.join("gates.csv");
    let steps_path = a.out.join("steps.csv");
    write_text(&metrics_path, &pretty(&serde_json::to_value(&metrics).map_err(json_err)?)?)?;
    write_text(&gates_path, &gates_csv)?;
    write_text(&steps_path, &steps_csv)?;
    write_manifest(
        &a.out,
        "evaluate",
        0,
        json!({ "gates": gates }),
        &[&a.report, &a.truth],
        &[&metrics_path, &gates_path, &steps_path],
    )
}

pub fn cmd_baseline(a: &BaselineArgs) -> Result<()> {
    let params = load_params(a.params.as_deref())?;
    let log = read_detection_log(&a.detections)?;
    let radius = a.radius.unwrap_or(3.0 * params.sigma_r);
    let report = baseline_track(&log.frames, a.tau, radius)?;
    create_dir(&a.out)?;
    let report_path = a.out.join("report.jsonl");
    write_track_report(&report, &report_path)?;
    let mut inputs: Vec<&Path> = vec![&a.detections];
    inputs.extend(a.params.as_deref());
    write_manifest(
        &a.out,
        "baseline",
        0,
        json!({ "tau": a.tau, "radius": radius }),
        &inputs,
        &[&report_path],
    )
}

fn filter_setup(a: &FilterArgs) -> Result<(DetectionLog, FilterConfig)> {
    let mut params = load_params(a.params.as_deref())?;
    if let Some(n) = a.particles {
        params.n_particles = n;
        params.validate()?;
    }
    let log = read_detection_log(&a.detections)?;
    let n_locations = match a.locations.or(log.n_locations) {
        Some(n) => n,
        None => {
            let n = log.n_locations();
            log::warn!(
                "{}: no location count in header; assuming {n} from the observed locations",
                a.detections.display()
            );
            n
        }
    };
    if n_locations == 0 {
        return Err(Error::Data("number of locations must be at least 1".into()));
    }
    let cfg = FilterConfig::new(params, n_locations, a.seed);
    Ok((log, cfg))
}

fn input_paths(a: &FilterArgs) -> Vec<&Path> {
    let mut v: Vec<&Path> = vec![&a.detections];
    v.extend(a.params.as_deref());
    v
}

fn load_params(path: Option<&Path>) -> Result<Parameters> {
    match path {
        Some(p) => load_parameters(p),
        None => Ok(Parameters::default()),
    }
}

fn params_value(params: &Parameters) -> Result<Value> {
    serde_json::from_str(&params.to_canonical_json()).map_err(json_err)
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Data(format!("serialization failed: {e}"))
}

fn pretty(v: &Value) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(json_err)?;
    s.push('\n');
    Ok(s)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn file_entry(path: &Path) -> Result<Value> {
    Ok(json!({ "path": path.display().to_string(), "sha256": file_sha256(path)? }))
}

fn write_manifest(out: &Path, command: &str, seed: u64, config: Value, inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
    let canonical = serde_json::to_string(&config).map_err(json_err)?;
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config_sha256": hex::encode(Sha256::digest(canonical.as_bytes())),
        "config": config,
        "inputs": inputs.iter().map(|p| file_entry(p)).collect::<Result<Vec<_>>>()?,
        "outputs": outputs
            .iter()
            .map(|p| {
                Ok(json!({
                    "file": p.file_name().map(|f| f.to_string_lossy().into_owned()),
                    "sha256": file_sha256(p)?,
                }))
            })
            .collect::<Result<Vec<_>>>()?,
    });
    write_text(&out.join("manifest.json"), &pretty(&manifest)?)
}
