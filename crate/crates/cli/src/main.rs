use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use opebench::data::{load_dataset, save_dataset, ActionGrid, Dataset, TreatmentAxis, DEFAULT_BINS, DEFAULT_GAMMA};
use opebench::diagnostics::{
    audit_weights, matched_sequences, u_curve, Aggregation, MatchedSequenceStats, UCurveOptions, WeightAudit,
    DEFAULT_ESS_FLOOR,
};
use opebench::estimators::{model_based_estimate, EstimatorKind, EstimatorOptions, Flag, OffPolicyData};
use opebench::harness::{emit_report, run_experiment, ExperimentSpec};
use opebench::policies::{
    estimate_behavior_policy, fit_mdp, greedy_policy, value_iteration, MdpModel, PlanningOptions, QFunction,
    TabularPolicy, UnvisitedConvention, DEFAULT_SMOOTHING,
};
use opebench::representation::{
    discretize, fit_dose_bins_with, fit_kmeans, ClusterModel, DiscretizedDataset, DoseBins, KMeansOptions,
};
use opebench::simulator::{build_ground_truth, sample_dataset, GroundTruth, Scenario, SimConfig};

#[derive(Parser)]
#[command(name = "opebench", version, about = "Off-policy evaluation workbench for observational treatment data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a cohort from a simulator scenario or config file.
    Simulate(SimulateArgs),
    /// Fit k-means states and dose bins to a cohort.
    Cluster(ClusterArgs),
    /// Fit a tabular model and learn a greedy policy from an annotated cohort.
    Learn(LearnArgs),
    /// Estimate a policy's value from logged data.
    Evaluate(EvaluateArgs),
    /// Audit importance weights and matched sequences.
    Diagnose(DiagnoseArgs),
    /// Mortality against recommended-minus-administered dose.
    Ucurve(UcurveArgs),
    /// Run a replicated experiment from a JSON spec.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario name or path to a simulator config JSON.
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the ground truth (model, behavior policy, dose bins).
    #[arg(long)]
    truth_out: Option<PathBuf>,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 300)]
    max_iter: usize,
    /// Dose bins per treatment axis, including the zero-dose bin.
    #[arg(long, default_value_t = DEFAULT_BINS)]
    dose_bins: usize,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out_model: PathBuf,
    /// Also write the cohort annotated with states and action bins.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// How to turn a cohort into states and actions.
#[derive(Args)]
struct DiscretizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Representation written by `cluster`; without it the cohort must
    /// already carry state ids and action bins.
    #[arg(long)]
    representation: Option<PathBuf>,
    /// Action grid of an annotated cohort as FLUIDxVASO, e.g. 5x5.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<ActionGrid>,
    /// Number of states of an annotated cohort.
    #[arg(long)]
    states: Option<usize>,
}

#[derive(Args)]
struct LearnArgs {
    #[command(flatten)]
    data: DiscretizeArgs,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    /// Sweeps to plan over; required when gamma is 1.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value = "alive")]
    unvisited: UnvisitedConvention,
    #[arg(long, default_value_t = 100.0)]
    terminal_reward: f64,
    #[arg(long)]
    out_policy: PathBuf,
    #[arg(long)]
    out_model: PathBuf,
    /// Also write the optimal action values, usable as a critic.
    #[arg(long)]
    out_q: Option<PathBuf>,
    /// Also write the smoothed empirical behavior policy.
    #[arg(long)]
    out_behavior: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SMOOTHING)]
    smoothing: f64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DiscretizeArgs,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    behavior: PathBuf,
    /// Action values for the doubly robust estimators.
    #[arg(long)]
    critic: Option<PathBuf>,
    /// Fitted model for the model-based estimate.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    /// Planning horizon for the model-based estimate when gamma is 1.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "is,pdis,wis,wpdis,dr,wdr,mb")]
    estimators: Vec<EstimatorKind>,
    #[arg(long, default_value_t = DEFAULT_ESS_FLOOR)]
    ess_floor: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ReportFormat {
    Json,
    Csv,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DiscretizeArgs,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    behavior: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ESS_FLOOR)]
    ess_floor: usize,
    #[arg(long)]
    report: PathBuf,
    /// Defaults to the report's extension.
    #[arg(long, value_enum)]
    format: Option<ReportFormat>,
}

#[derive(Args)]
struct UcurveArgs {
    #[command(flatten)]
    data: DiscretizeArgs,
    #[arg(long)]
    policy: PathBuf,
    /// Number of deviation bins.
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[arg(long)]
    axis: TreatmentAxis,
    /// Ground truth whose dose bins give the recommended doses. Falls back
    /// to the representation, then to quantile bins fitted to the cohort.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// One point per step instead of one per patient.
    #[arg(long)]
    per_step: bool,
    /// Half-width of a symmetric deviation range.
    #[arg(long)]
    range: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Output of `cluster`.
#[derive(Serialize, Deserialize)]
struct RepresentationFile {
    clusters: ClusterModel,
    dose_bins: DoseBins,
}

#[derive(Serialize)]
struct EstimateOut {
    estimator: EstimatorKind,
    value: f64,
    ess: Option<f64>,
    n_nonzero: Option<usize>,
    flags: Vec<Flag>,
}

#[derive(Serialize)]
struct DiagnosisOut {
    weights: WeightAudit,
    /// Only for deterministic policies.
    matched: Option<MatchedSequenceStats>,
    support_violation: bool,
}

fn parse_grid(s: &str) -> Result<ActionGrid, String> {
    let (f, v) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected FLUIDxVASO, got `{s}`"))?;
    let parse = |p: &str| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}"));
    let grid = ActionGrid {
        fluid_bins: parse(f)?,
        vaso_bins: parse(v)?,
    };
    if grid.fluid_bins == 0 || grid.vaso_bins == 0 {
        return Err("grid sizes must be positive".into());
    }
    Ok(grid)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading {}", path.display()))
}

fn inferred_grid(ds: &Dataset) -> ActionGrid {
    let (mut f, mut v) = (1, 1);
    for a in ds.steps().filter_map(|s| s.action) {
        f = f.max(a.fluid_bin + 1);
        v = v.max(a.vaso_bin + 1);
    }
    ActionGrid {
        fluid_bins: f,
        vaso_bins: v,
    }
}

impl DiscretizeArgs {
    /// `policy`, when given, supplies the state count and checks the
    /// action count of an annotated cohort.
    fn load(&self, policy: Option<&TabularPolicy>) -> Result<DiscretizedDataset> {
        let ds = load(&self.input)?;
        if let Some(path) = &self.representation {
            let rep: RepresentationFile = read_json(path)?;
            return Ok(discretize(&ds, &rep.clusters, &rep.dose_bins)?);
        }
        let grid = self.grid.unwrap_or_else(|| inferred_grid(&ds));
        if let Some(p) = policy {
            if p.n_actions() != grid.n_actions() {
                bail!(
                    "policy has {} actions but the cohort's grid is {}x{}; pass --grid",
                    p.n_actions(),
                    grid.fluid_bins,
                    grid.vaso_bins
                );
            }
        }
        let dd = match self.states.or(policy.map(TabularPolicy::n_states)) {
            Some(n) => DiscretizedDataset::from_annotated(ds, n, grid)?,
            None => DiscretizedDataset::from_annotated_infer(ds, grid)?,
        };
        Ok(dd)
    }
}

fn planning(gamma: f64, tol: f64, horizon: Option<usize>) -> PlanningOptions {
    PlanningOptions {
        tol,
        horizon,
        ..PlanningOptions::discounted(gamma)
    }
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let path = Path::new(&args.scenario);
    let config: SimConfig = if path.is_file() {
        read_json(path)?
    } else {
        opebench::simulator::scenario(args.scenario.parse::<Scenario>()?)
    };
    let gt = build_ground_truth(&config)?;
    let ds = sample_dataset(&gt, args.n, args.seed)?;
    save_dataset(&ds, &args.out)?;
    if let Some(truth) = &args.truth_out {
        write_json(truth, &gt)?;
    }
    eprintln!(
        "wrote {} trajectories ({} steps) to {}",
        ds.len(),
        ds.n_steps(),
        args.out.display()
    );
    Ok(())
}

fn cluster(args: ClusterArgs) -> Result<()> {
    let ds = load(&args.input)?;
    let points: Vec<&[f64]> = ds.steps().map(|s| s.obs.values()).collect();
    let opts = KMeansOptions {
        tol: args.tol,
        max_iter: args.max_iter,
        ..KMeansOptions::new(args.k, args.seed)
    };
    let clusters = fit_kmeans(&points, &opts)?;
    let dose_bins = fit_dose_bins_with(&ds, args.dose_bins)?;
    for w in dose_bins.warnings() {
        eprintln!("warning: {w}");
    }
    if !clusters.converged() {
        eprintln!("warning: k-means stopped after {} iterations without converging", clusters.iterations());
    }
    if let Some(out) = &args.out {
        save_dataset(discretize(&ds, &clusters, &dose_bins)?.dataset(), out)?;
    }
    eprintln!("k = {}, inertia = {:.6}", clusters.k(), clusters.inertia());
    write_json(&args.out_model, &RepresentationFile { clusters, dose_bins })
}

fn learn(args: LearnArgs) -> Result<()> {
    let dd = args.data.load(None)?;
    let mdp = fit_mdp(&dd, args.terminal_reward, args.unvisited)?;
    let q = value_iteration(&mdp, &planning(args.gamma, args.tol, args.horizon))?;
    let policy = greedy_policy(&q);
    write_json(&args.out_policy, &policy)?;
    write_json(&args.out_model, &mdp)?;
    if let Some(path) = &args.out_q {
        write_json(path, &q)?;
    }
    if let Some(path) = &args.out_behavior {
        write_json(path, &estimate_behavior_policy(&dd, args.smoothing)?)?;
    }
    eprintln!("learned a policy over {} states and {} actions", policy.n_states(), policy.n_actions());
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let target: TabularPolicy = read_json(&args.policy)?;
    let behavior: TabularPolicy = read_json(&args.behavior)?;
    let dd = args.data.load(Some(&target))?;
    let critic: Option<QFunction> = args.critic.as_deref().map(read_json).transpose()?;
    let model: Option<MdpModel> = args.model.as_deref().map(read_json).transpose()?;
    let opts = EstimatorOptions {
        gamma: args.gamma,
        ess_floor: args.ess_floor,
    };
    let data = OffPolicyData::new(&dd, &target, &behavior, opts)?;
    let mut out = Vec::with_capacity(args.estimators.len());
    for &kind in &args.estimators {
        let result = match kind {
            EstimatorKind::Mb => {
                let Some(mdp) = &model else { bail!("the mb estimator needs --model") };
                let plan = planning(args.gamma, 1e-10, args.horizon);
                model_based_estimate(mdp, &target, &plan, Some(&dd.dataset().fingerprint()))?
            }
            _ => data.estimate(kind, critic.as_ref())?,
        };
        if result.has(Flag::AllWeightsZero) {
            eprintln!("WARNING: {kind}: every importance weight is zero; the reported 0 is not an estimate");
        }
        println!("{:>6} {:>12.4}  {}", kind.to_string(), result.value, flag_list(&result.flags));
        out.push(EstimateOut {
            estimator: kind,
            value: result.value,
            ess: result.ess,
            n_nonzero: result.n_nonzero,
            flags: result.flags.into_iter().collect(),
        });
    }
    write_json(&args.out, &out)
}

fn flag_list<'a>(flags: impl IntoIterator<Item = &'a Flag>) -> String {
    flags.into_iter().map(Flag::to_string).collect::<Vec<_>>().join(" ")
}

fn diagnose(args: DiagnoseArgs) -> Result<()> {
    let target: TabularPolicy = read_json(&args.policy)?;
    let behavior: TabularPolicy = read_json(&args.behavior)?;
    let dd = args.data.load(Some(&target))?;
    let opts = EstimatorOptions {
        ess_floor: args.ess_floor,
        ..EstimatorOptions::default()
    };
    let data = OffPolicyData::new(&dd, &target, &behavior, opts)?;
    let diagnosis = DiagnosisOut {
        weights: audit_weights(data.weights(), args.ess_floor)?,
        matched: if target.is_deterministic() { Some(matched_sequences(&dd, &target)?) } else { None },
        support_violation: data.flags().contains(&Flag::SupportViolation),
    };
    let w = &diagnosis.weights;
    if w.n_nonzero == 0 {
        eprintln!("WARNING: no logged trajectory has a nonzero weight under this policy");
    }
    eprintln!(
        "nonzero weights {}/{}, Kish ESS {:.1}, max weight {:.3e}",
        w.n_nonzero, w.n_total, w.ess_kish, w.max_weight
    );
    let format = args.format.unwrap_or(match args.report.extension().and_then(|e| e.to_str()) {
        Some("csv") => ReportFormat::Csv,
        _ => ReportFormat::Json,
    });
    match format {
        ReportFormat::Json => write_json(&args.report, &diagnosis),
        ReportFormat::Csv => write_diagnosis_csv(&args.report, &diagnosis),
    }
}

fn write_diagnosis_csv(path: &Path, d: &DiagnosisOut) -> Result<()> {
    let w = &d.weights;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    let mut rows = vec![
        ("n_total", w.n_total.to_string()),
        ("n_nonzero", w.n_nonzero.to_string()),
        ("ess_count", w.ess_count.to_string()),
        ("ess_kish", w.ess_kish.to_string()),
        ("max_weight", w.max_weight.to_string()),
        ("mean_length_total", w.mean_length_total.to_string()),
        ("mean_length_nonzero", opt(w.mean_length_nonzero)),
        ("low_ess", w.low_ess.to_string()),
        ("support_violation", d.support_violation.to_string()),
    ];
    if let Some(m) = &d.matched {
        rows.push(("n_matching", m.n_matching.to_string()));
        rows.push(("mean_length_matching", opt(m.mean_length_matching)));
    }
    let mut text = String::from("metric,value\n");
    for (k, v) in rows {
        text.push_str(&format!("{k},{v}\n"));
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ucurve(args: UcurveArgs) -> Result<()> {
    let policy: TabularPolicy = read_json(&args.policy)?;
    let dd = args.data.load(Some(&policy))?;
    let bins = match (&args.truth, &args.data.representation) {
        (Some(path), _) => read_json::<GroundTruth>(path)?.dose_bins,
        (None, Some(path)) => read_json::<RepresentationFile>(path)?.dose_bins,
        (None, None) => fit_dose_bins_with(dd.dataset(), DEFAULT_BINS)?,
    };
    let opts = UCurveOptions {
        aggregation: if args.per_step { Aggregation::PerStep } else { Aggregation::PerPatient },
        range: args.range,
        ..UCurveOptions::new(args.bins)
    };
    let curve = u_curve(&dd, &policy, &bins, args.axis, &opts)?;
    let mut text = String::from("bin_low,bin_high,count,mortality\n");
    for b in &curve.bins {
        let m = b.mortality.map(|m| m.to_string()).unwrap_or_default();
        text.push_str(&format!("{},{},{},{m}\n", b.low, b.high, b.count));
    }
    fs::write(&args.out, text).with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!("{} patients, U-shaped: {}", curve.n_included, curve.is_u_shaped());
    Ok(())
}

fn experiment(args: ExperimentArgs) -> Result<()> {
    let spec: ExperimentSpec = read_json(&args.spec)?;
    let report = run_experiment(&spec)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    emit_report(&report, &args.out_dir)?;
    eprintln!(
        "{}: {} records, {} summary rows in {}",
        report.name,
        report.records.len(),
        report.summary.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate(a) => simulate(a),
        Command::Cluster(a) => cluster(a),
        Command::Learn(a) => learn(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Ucurve(a) => ucurve(a),
        Command::Experiment(a) => experiment(a),
    }
}
