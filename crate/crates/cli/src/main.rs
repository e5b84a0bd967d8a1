//! `dualveto` command-line interface.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use dualveto::dataset::{load_cohort, write_cohort, Cohort, ColumnMap};
use dualveto::metrics::{render_table, PenaltyMatrix, PenaltyPreset};
use dualveto::pipeline::{
    ablate, evaluate, evaluation_records, fit, kappa_scenarios, load_decisions, read_provenance,
    render_scenarios, sweep, triage, write_ablation, write_decisions, write_provenance, write_scenarios,
    Artifact, Error, PipelineConfig, SweepGrid, SweepWriter, TriageSummary,
};
use dualveto::policy::PolicyKind;
use dualveto::synth::{generate, write_truth, SynthConfig};

#[derive(Parser)]
#[command(name = "dualveto", version, about = "Dual-veto selective classification: fit, triage, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit temperatures, conformal scores and the geometric model on the val split.
    Fit(FitArgs),
    /// Apply a fitted artifact to the test split.
    Triage(TriageArgs),
    /// Compute the metrics report for a decisions file.
    Evaluate(EvaluateArgs),
    /// Evaluate a grid of alpha, inertia threshold and distance percentile.
    Sweep(SweepArgs),
    /// Compare the four deferral policies.
    Ablate(AblateArgs),
    /// Risk-Kappa under every named penalty scenario.
    KappaScenarios(EvaluateArgs),
    /// Generate a synthetic cohort with a ground-truth sidecar.
    Synth(SynthArgs),
}

#[derive(Args, Default)]
struct Tunables {
    /// JSON run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    percentile: Option<f64>,
    #[arg(long)]
    inertia: Option<f64>,
    #[arg(long)]
    min_cluster_size: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    /// hybrid, aleatoric_only, epistemic_only or standard_uncertainty.
    #[arg(long)]
    policy: Option<PolicyKind>,
    /// Preset name or JSON file with a 2x3 matrix.
    #[arg(long)]
    penalties: Option<String>,
    #[arg(long)]
    n_boot: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ece_bins: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// Artifact path to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    tun: Tunables,
}

#[derive(Args)]
struct TriageArgs {
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long)]
    artifact: Option<PathBuf>,
    /// Decisions CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    tun: Tunables,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long)]
    decisions: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    tun: Tunables,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long)]
    artifact: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated alphas (default: the configured alpha).
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    inertias: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    percentiles: Option<Vec<f64>>,
    #[command(flatten)]
    tun: Tunables,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long)]
    artifact: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    tun: Tunables,
}

#[derive(Args)]
struct SynthArgs {
    /// Cohort CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth CSV (default: `<out>` with a `.truth.csv` suffix).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// JSON synthetic config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    n_members: Option<usize>,
    #[arg(long)]
    ood_fraction: Option<f64>,
    #[arg(long)]
    miscalibration_factor: Option<f64>,
}

/// Paths that may come from the config file as well as from flags.
#[derive(Default)]
struct Paths {
    cohort: Option<PathBuf>,
    artifact: Option<PathBuf>,
    decisions: Option<PathBuf>,
    out: Option<PathBuf>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn read_json(path: &Path) -> Result<Value, Error> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn penalty_value(spec: &Value) -> Result<Value, Error> {
    match spec {
        Value::String(s) => Ok(serde_json::to_value(resolve_penalties(s)?).expect("matrix serializes")),
        Value::Array(_) => Ok(json!({ "w": spec })),
        other => Ok(other.clone()),
    }
}

/// A preset name, or a JSON file holding `{"w": [[..],[..]]}` or the bare matrix.
fn resolve_penalties(spec: &str) -> Result<PenaltyMatrix, Error> {
    if let Ok(p) = spec.parse::<PenaltyPreset>() {
        return Ok(p.matrix());
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(config_err(format!("`{spec}` is neither a penalty preset nor a file")));
    }
    let v = penalty_value(&read_json(path)?)?;
    serde_json::from_value(v).map_err(|e| config_err(format!("penalty matrix: {e}")))
}

/// Overlays `file` keys onto `base`; path keys are split off into `paths`.
fn merge_config(base: &PipelineConfig, file: Option<&Path>, paths: &mut Paths) -> Result<PipelineConfig, Error> {
    let Some(file) = file else { return Ok(base.clone()) };
    let mut value = serde_json::to_value(base).expect("config serializes");
    let Value::Object(overlay) = read_json(file)? else {
        return Err(config_err("config file must hold a JSON object"));
    };
    let target: &mut Map<String, Value> = value.as_object_mut().expect("object");
    for (k, v) in overlay {
        let take_path = |v: &Value| {
            v.as_str()
                .map(PathBuf::from)
                .ok_or_else(|| config_err(format!("`{k}` must be a string")))
        };
        match k.as_str() {
            "cohort" => paths.cohort = Some(take_path(&v)?),
            "artifact" => paths.artifact = Some(take_path(&v)?),
            "decisions" => paths.decisions = Some(take_path(&v)?),
            "out" => paths.out = Some(take_path(&v)?),
            "penalties" => {
                target.insert(k, penalty_value(&v)?);
            }
            _ => {
                target.insert(k, v);
            }
        }
    }
    serde_json::from_value(value).map_err(|e| config_err(format!("{}: {e}", file.display())))
}

/// Effective config: `base` (defaults or a stored config), then the config
/// file, then flags.
fn effective(base: &PipelineConfig, tun: &Tunables, paths: &mut Paths) -> Result<PipelineConfig, Error> {
    let mut cfg = merge_config(base, tun.config.as_deref(), paths)?;
    if let Some(v) = tun.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = tun.percentile {
        cfg.percentile = v;
    }
    if let Some(v) = tun.inertia {
        cfg.inertia_threshold = v;
    }
    if let Some(v) = tun.min_cluster_size {
        cfg.min_cluster_size = Some(v);
    }
    if let Some(v) = tun.k_max {
        cfg.k_max = v;
    }
    if let Some(v) = tun.policy {
        cfg.policy = v;
    }
    if let Some(v) = &tun.penalties {
        cfg.penalties = resolve_penalties(v)?;
    }
    if let Some(v) = tun.n_boot {
        cfg.n_boot = v;
    }
    if let Some(v) = tun.seed {
        cfg.seed = v;
    }
    if let Some(v) = tun.ece_bins {
        cfg.ece_bins = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn flag_over(flag: &Option<PathBuf>, file: Option<PathBuf>, name: &str) -> Result<PathBuf, Error> {
    flag.clone()
        .or(file)
        .ok_or_else(|| config_err(format!("--{name} is required")))
}

/// Writes through `f` to `path`, or to stdout when `path` is `None`.
fn with_output<F>(path: Option<&Path>, f: F) -> Result<(), Error>
where
    F: FnOnce(&mut dyn Write) -> Result<(), Error>,
{
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            f(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            f(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn load(path: &Path) -> Result<Cohort, Error> {
    Ok(load_cohort(path, &ColumnMap::default())?)
}

fn cmd_fit(a: FitArgs) -> Result<(), Error> {
    let mut paths = Paths::default();
    let cfg = effective(&PipelineConfig::default(), &a.tun, &mut paths)?;
    let cohort = load(&flag_over(&a.cohort, paths.cohort, "cohort")?)?;
    let out = flag_over(&a.out, paths.out.or(paths.artifact), "out")?;
    let artifact = fit(&cohort, &cfg)?;
    artifact.save(&out)?;
    if let Some(g) = &artifact.calibration.geometry {
        eprintln!(
            "fit: temperatures={:?} k=({}, {}) shrinkage={:.4} tau=({:.4}, {:.4}) fingerprint={}",
            artifact.calibration.temperature_values(),
            g.k(0),
            g.k(1),
            g.shrinkage,
            g.thresholds[0],
            g.thresholds[1],
            artifact.fingerprint
        );
    }
    Ok(())
}

/// Loads the artifact and applies the file and flags on top of its config.
fn artifact_and_config(
    artifact: &Option<PathBuf>,
    tun: &Tunables,
    paths: &mut Paths,
) -> Result<(Artifact, PipelineConfig), Error> {
    // the artifact path itself may come from the config file
    let mut probe = Paths::default();
    merge_config(&PipelineConfig::default(), tun.config.as_deref(), &mut probe)?;
    let art = Artifact::load(flag_over(artifact, probe.artifact, "artifact")?)?;
    let cfg = effective(&art.config, tun, paths)?;
    Ok((art, cfg))
}

fn cmd_triage(a: TriageArgs) -> Result<(), Error> {
    let mut paths = Paths::default();
    let (art, cfg) = artifact_and_config(&a.artifact, &a.tun, &mut paths)?;
    let cohort = load(&flag_over(&a.cohort, paths.cohort, "cohort")?)?;
    let decisions = triage(&cohort, &art, &cfg)?;
    with_output(a.out.as_deref().or(paths.out.as_deref()), |w| write_decisions(&decisions, &cfg, w))?;
    eprintln!("triage [{}]: {}", cfg.policy, TriageSummary::of(&decisions));
    Ok(())
}

/// Base config for commands reading a decisions file: its provenance line.
fn decisions_base(path: &Path) -> Result<PipelineConfig, Error> {
    match read_provenance(path)? {
        Some(text) => serde_json::from_str(&text).map_err(|e| config_err(format!("decisions provenance: {e}"))),
        None => Ok(PipelineConfig::default()),
    }
}

fn decisions_inputs(a: &EvaluateArgs) -> Result<(Cohort, Vec<(String, dualveto::policy::TriageDecision)>, PipelineConfig, Paths), Error> {
    let mut probe = Paths::default();
    merge_config(&PipelineConfig::default(), a.tun.config.as_deref(), &mut probe)?;
    let dec_path = flag_over(&a.decisions, probe.decisions, "decisions")?;
    let mut paths = Paths::default();
    let cfg = effective(&decisions_base(&dec_path)?, &a.tun, &mut paths)?;
    let cohort = load(&flag_over(&a.cohort, paths.cohort.clone(), "cohort")?)?;
    let decisions = load_decisions(&dec_path)?;
    Ok((cohort, decisions, cfg, paths))
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), Error> {
    let (cohort, decisions, cfg, paths) = decisions_inputs(&a)?;
    let report = evaluate(&cohort, &decisions, &cfg)?;
    let doc = json!({ "config": &cfg, "report": &report });
    with_output(a.out.as_deref().or(paths.out.as_deref()), |w| {
        serde_json::to_writer_pretty(&mut *w, &doc).map_err(|e| config_err(e.to_string()))?;
        writeln!(w)?;
        Ok(())
    })?;
    eprint!("{}", render_table(&[(cfg.policy.display_name().to_string(), &report)]));
    for warning in &report.warnings {
        eprintln!("warning: {warning}");
    }
    Ok(())
}

fn cmd_kappa(a: EvaluateArgs) -> Result<(), Error> {
    let (cohort, decisions, cfg, paths) = decisions_inputs(&a)?;
    let records = evaluation_records(&cohort, &decisions)?;
    let rows = kappa_scenarios(&records, cfg.n_boot, cfg.seed);
    with_output(a.out.as_deref().or(paths.out.as_deref()), |w| write_scenarios(&rows, &cfg.to_json(), w))?;
    eprint!("{}", render_scenarios(&rows));
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<(), Error> {
    let mut paths = Paths::default();
    let (art, cfg) = artifact_and_config(&a.artifact, &a.tun, &mut paths)?;
    let cohort = load(&flag_over(&a.cohort, paths.cohort, "cohort")?)?;
    let mut grid = SweepGrid::standard(cfg.alpha);
    if let Some(v) = &a.alphas {
        grid.alphas = v.clone();
    }
    if let Some(v) = &a.inertias {
        grid.inertia_thresholds = v.clone();
    }
    if let Some(v) = &a.percentiles {
        grid.percentiles = v.clone();
    }
    let mut failed = 0;
    with_output(a.out.as_deref().or(paths.out.as_deref()), |w| {
        let mut writer = SweepWriter::new(w, &cfg)?;
        let rows = sweep(&cohort, &art, &cfg, &grid, |row| writer.write(row))?;
        failed = rows.iter().filter(|r| r.status != "ok").count();
        Ok(())
    })?;
    eprintln!("sweep: {} grid points, {failed} failed", grid.len());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<(), Error> {
    let mut paths = Paths::default();
    let (art, cfg) = artifact_and_config(&a.artifact, &a.tun, &mut paths)?;
    let cohort = load(&flag_over(&a.cohort, paths.cohort, "cohort")?)?;
    let rows = ablate(&cohort, &art, &cfg)?;
    with_output(a.out.as_deref().or(paths.out.as_deref()), |w| write_ablation(&rows, &cfg, w))?;
    let labelled: Vec<(String, &_)> = rows.iter().map(|(k, r)| (k.display_name().to_string(), r)).collect();
    eprint!("{}", render_table(&labelled));
    Ok(())
}

fn truth_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "cohort".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.truth.csv"))
}

fn cmd_synth(a: SynthArgs) -> Result<(), Error> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => serde_json::from_value(read_json(p)?).map_err(|e| config_err(format!("{}: {e}", p.display())))?,
        None => SynthConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.d {
        cfg.d = v;
    }
    if let Some(v) = a.n_members {
        cfg.n_members = v;
    }
    if let Some(v) = a.ood_fraction {
        cfg.ood_fraction = v;
    }
    if let Some(v) = a.miscalibration_factor {
        cfg.miscalibration_factor = v;
    }
    let out = generate(&cfg)?;
    let provenance = serde_json::to_string(&cfg).expect("synth config serializes");
    with_output(Some(&a.out), |w| {
        write_provenance(&mut *w, &provenance)?;
        write_cohort(&out.cohort, w, &ColumnMap::default())?;
        Ok(())
    })?;
    let truth = a.truth.clone().unwrap_or_else(|| truth_path(&a.out));
    with_output(Some(&truth), |w| Ok(write_truth(&out.truth, w)?))?;
    eprintln!(
        "synth: {} ids x {} members written to {} (ground truth: {})",
        out.truth.len(),
        cfg.n_members,
        a.out.display(),
        truth.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Triage(a) => cmd_triage(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::KappaScenarios(a) => cmd_kappa(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
