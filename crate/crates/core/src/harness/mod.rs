//! Replicated evaluation experiments.
//!
//! One run of an [`ExperimentSpec`] loops over horizons, replicates and
//! representation sizes. Each task draws or loads a cohort, splits it into
//! train and test, fits a representation, behavior policy and model on
//! train, and scores every requested policy with every requested estimator
//! on test. Simulated sources also get the policy's exact value.
//!
//! Tasks run on a local thread pool and are merged in task order; every
//! random draw comes from a seed derived from the spec seed and the task
//! coordinates, so the report does not depend on the thread count.

mod report;

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{load_dataset, partition, ActionGrid, DataError, Dataset, DEFAULT_BINS, DEFAULT_GAMMA};
use crate::diagnostics::{audit_weights, matched_sequences, DiagnosticsError, DEFAULT_ESS_FLOOR};
use crate::estimators::{model_based_estimate, EstimatorError, EstimatorKind, EstimatorOptions, OffPolicyData};
use crate::policies::{
    baseline_policy, estimate_behavior_policy, evaluate_policy, fit_mdp, greedy_policy, value_iteration, BaselineKind,
    PlanningOptions, PolicyError, TabularPolicy, UnvisitedConvention, DEFAULT_SMOOTHING,
};
use crate::representation::{
    discretize, fit_dose_bins_with, fit_kmeans, step_agreement, ClusterModel, DiscretizedDataset, DoseBins,
    KMeansOptions, RepresentationError,
};
use crate::simulator::{build_ground_truth, sample_dataset, scenario, GroundTruth, Scenario, SimConfig, SimError};

pub use report::{emit_report, summarize, SummaryRow};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment spec: {0}")]
    Spec(String),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Representation(#[from] RepresentationError),

    #[error(transparent)]
    Policy(#[from] PolicyError),

    #[error(transparent)]
    Estimator(#[from] EstimatorError),

    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),

    #[error(transparent)]
    Simulator(#[from] SimError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Scenario { scenario: Scenario, n_patients: usize },
    Simulated { config: SimConfig, n_patients: usize },
    /// A JSONL cohort; replicates differ only in the train/test split.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Representation {
    /// Use the `state_id` and bin annotations already in the data.
    Provided,
    /// K-means states, one run per entry of `k`.
    Kmeans { k: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Greedy in the optimal action values of the train model.
    Learned,
    /// The behavior policy estimated on train.
    Behavior,
    Random,
    NoAction,
    /// Most frequent train action in each state.
    MostCommon,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Learned,
        PolicyKind::Behavior,
        PolicyKind::Random,
        PolicyKind::NoAction,
        PolicyKind::MostCommon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Learned => "learned",
            PolicyKind::Behavior => "behavior",
            PolicyKind::Random => "random",
            PolicyKind::NoAction => "no-action",
            PolicyKind::MostCommon => "most-common",
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == key || p.name().replace('-', "") == key)
            .ok_or_else(|| format!("unknown policy `{s}` (expected learned|behavior|random|no-action|most-common)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementSpec {
    pub k: usize,
    /// One pipeline run per k-means seed.
    pub seeds: Vec<u64>,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_one() -> usize {
    1
}
fn default_train_frac() -> f64 {
    0.8
}
fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}
fn default_policies() -> Vec<PolicyKind> {
    PolicyKind::ALL.to_vec()
}
fn default_estimators() -> Vec<EstimatorKind> {
    EstimatorKind::ALL.to_vec()
}
fn default_smoothing() -> f64 {
    DEFAULT_SMOOTHING
}
fn default_ess_floor() -> usize {
    DEFAULT_ESS_FLOOR
}
fn default_n_bins() -> usize {
    DEFAULT_BINS
}
fn default_truth_draws() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub source: DataSource,
    pub representation: Representation,
    #[serde(default = "default_one")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Episode caps to sweep for simulated sources; empty keeps the
    /// source's own.
    #[serde(default)]
    pub horizons: Vec<usize>,
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyKind>,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub unvisited: UnvisitedConvention,
    #[serde(default = "default_smoothing")]
    pub smoothing: f64,
    #[serde(default = "default_ess_floor")]
    pub ess_floor: usize,
    /// Dose bins per axis, counting the zero bin, for file sources.
    #[serde(default = "default_n_bins")]
    pub n_bins: usize,
    /// Observations drawn per true state when scoring k-means policies
    /// against the simulator.
    #[serde(default = "default_truth_draws")]
    pub truth_draws: usize,
    #[serde(default)]
    pub agreement: Option<AgreementSpec>,
    /// Worker threads; falls back to `OPEBENCH_THREADS`, then all cores.
    #[serde(default)]
    pub threads: Option<usize>,
}

impl ExperimentSpec {
    pub fn new(source: DataSource, representation: Representation) -> Self {
        Self {
            name: default_name(),
            source,
            representation,
            replicates: 1,
            seed: 0,
            train_frac: default_train_frac(),
            gamma: DEFAULT_GAMMA,
            horizons: vec![],
            policies: default_policies(),
            estimators: default_estimators(),
            unvisited: UnvisitedConvention::default(),
            smoothing: DEFAULT_SMOOTHING,
            ess_floor: DEFAULT_ESS_FLOOR,
            n_bins: DEFAULT_BINS,
            truth_draws: default_truth_draws(),
            agreement: None,
            threads: None,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Spec(m.into()));
        if self.replicates == 0 {
            return bad("replicates must be at least 1");
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return bad("train_frac must lie in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if let Representation::Kmeans { k } = &self.representation {
            if k.is_empty() || k.contains(&0) {
                return bad("kmeans needs at least one positive k");
            }
        }
        if let Some(a) = &self.agreement {
            if a.seeds.len() < 2 || a.k == 0 {
                return bad("agreement needs k > 0 and at least two seeds");
            }
        }
        match &self.source {
            DataSource::File { .. } if !self.horizons.is_empty() => bad("horizon sweeps need a simulated source"),
            DataSource::Scenario { n_patients, .. } | DataSource::Simulated { n_patients, .. } if *n_patients < 2 => {
                bad("n_patients must be at least 2")
            }
            _ if self.horizons.contains(&0) => bad("horizons must be positive"),
            _ => Ok(()),
        }
    }
}

/// One estimate of one policy in one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub replicate: usize,
    pub horizon: Option<usize>,
    pub k: Option<usize>,
    pub policy: PolicyKind,
    pub estimator: EstimatorKind,
    pub value: f64,
    /// Exact value under the simulator, when there is one.
    pub true_value: Option<f64>,
    pub n_test: usize,
    pub n_nonzero: Option<usize>,
    pub ess: Option<f64>,
    /// Trajectories matching a deterministic policy at every step.
    pub n_matching: Option<usize>,
    pub mean_length_matching: Option<f64>,
    pub mean_length_total: f64,
    /// Flag names joined with `|`.
    pub flags: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub k: usize,
    pub seeds: Vec<u64>,
    /// Pairwise per-step agreement; the diagonal is 1.
    pub matrix: Vec<Vec<f64>>,
    pub mean_pairwise: f64,
    /// Agreement of each later run with the first.
    pub versus_first: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub spec: ExperimentSpec,
    pub records: Vec<EstimateRecord>,
    pub summary: Vec<SummaryRow>,
    pub agreement: Option<AgreementReport>,
    pub warnings: Vec<String>,
}

// ── Seeds ───────────────────────────────────────────────────────────────

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy)]
enum Salt {
    Sample = 1,
    Split = 2,
    Cluster = 3,
    Truth = 4,
}

/// Seed for one purpose within one `(horizon index, replicate)` cell.
fn derive_seed(base: u64, cell: usize, salt: Salt) -> u64 {
    splitmix(base ^ splitmix((cell as u64) << 3 | salt as u64))
}

// ── Data preparation ────────────────────────────────────────────────────

/// The cohort and, for simulated sources, its ground truth.
struct Cohort {
    data: Dataset,
    truth: Option<GroundTruth>,
}

fn source_config(source: &DataSource) -> Option<SimConfig> {
    match source {
        DataSource::Scenario { scenario: s, .. } => Some(scenario(*s)),
        DataSource::Simulated { config, .. } => Some(config.clone()),
        DataSource::File { .. } => None,
    }
}

fn n_patients(source: &DataSource) -> usize {
    match source {
        DataSource::Scenario { n_patients, .. } | DataSource::Simulated { n_patients, .. } => *n_patients,
        DataSource::File { .. } => 0,
    }
}

/// A representation fitted on train and applied to both halves.
struct Fitted {
    train: DiscretizedDataset,
    test: DiscretizedDataset,
    clusters: Option<ClusterModel>,
}

/// Smallest grid holding every annotated action.
fn grid_of(sets: &[&Dataset]) -> ActionGrid {
    let (mut f, mut v) = (0, 0);
    for a in sets.iter().flat_map(|ds| ds.steps()).filter_map(|s| s.action) {
        f = f.max(a.fluid_bin + 1);
        v = v.max(a.vaso_bin + 1);
    }
    ActionGrid {
        fluid_bins: f.max(1),
        vaso_bins: v.max(1),
    }
}

fn fit_representation(
    train: Dataset,
    test: Dataset,
    k: Option<usize>,
    cluster_seed: u64,
    truth: Option<&GroundTruth>,
    n_bins: usize,
    warnings: &mut Vec<String>,
) -> Result<Fitted, HarnessError> {
    match k {
        None => {
            let (n_states, grid) = match truth {
                Some(gt) => (gt.config.n_logged_states(), gt.config.grid()),
                None => {
                    let n_states = [&train, &test]
                        .iter()
                        .flat_map(|ds| ds.steps())
                        .filter_map(|s| s.state_id)
                        .max()
                        .map_or(0, |m| m + 1);
                    (n_states, grid_of(&[&train, &test]))
                }
            };
            Ok(Fitted {
                train: DiscretizedDataset::from_annotated(train, n_states, grid)?,
                test: DiscretizedDataset::from_annotated(test, n_states, grid)?,
                clusters: None,
            })
        }
        Some(k) => {
            let bins: DoseBins = match truth {
                Some(gt) => gt.dose_bins.clone(),
                None => fit_dose_bins_with(&train, n_bins)?,
            };
            warnings.extend(bins.warnings().iter().cloned());
            let points: Vec<&[f64]> = train.steps().map(|s| s.obs.values()).collect();
            let cm = fit_kmeans(&points, &KMeansOptions::new(k, cluster_seed))?;
            if !cm.converged() {
                warnings.push(format!("k-means with k={k} seed={cluster_seed} stopped before converging"));
            }
            Ok(Fitted {
                train: discretize(&train, &cm, &bins)?,
                test: discretize(&test, &cm, &bins)?,
                clusters: Some(cm),
            })
        }
    }
}

fn planning(gamma: f64, dd: &DiscretizedDataset) -> PlanningOptions {
    if gamma < 1.0 {
        PlanningOptions::discounted(gamma)
    } else {
        let longest = dd.episodes().map(|e| e.len()).max().unwrap_or(1);
        PlanningOptions::finite_horizon(gamma, longest)
    }
}

/// Greedy policy in the optimal values of the model fitted on `dd`.
fn learn(dd: &DiscretizedDataset, spec: &ExperimentSpec, terminal_reward: f64) -> Result<TabularPolicy, HarnessError> {
    let mdp = fit_mdp(dd, terminal_reward, spec.unvisited)?;
    let q = value_iteration(&mdp, &planning(spec.gamma, dd))?;
    Ok(greedy_policy(&q))
}

// ── Tasks ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
struct Task {
    horizon_index: usize,
    horizon: Option<usize>,
    replicate: usize,
    k: Option<usize>,
}

struct TaskOutput {
    records: Vec<EstimateRecord>,
    warnings: Vec<String>,
}

struct Context<'a> {
    spec: &'a ExperimentSpec,
    /// One ground truth per horizon for simulated sources.
    truths: Vec<Option<GroundTruth>>,
    file: Option<Dataset>,
}

impl Context<'_> {
    fn cell(&self, task: &Task) -> usize {
        task.horizon_index * self.spec.replicates + task.replicate
    }

    fn cohort(&self, task: &Task) -> Result<Cohort, HarnessError> {
        let truth = self.truths[task.horizon_index].clone();
        let data = match (&truth, &self.file) {
            (Some(gt), _) => sample_dataset(
                gt,
                n_patients(&self.spec.source),
                derive_seed(self.spec.seed, self.cell(task), Salt::Sample),
            )?,
            (None, Some(ds)) => ds.clone(),
            (None, None) => unreachable!("a source is either simulated or a file"),
        };
        Ok(Cohort { data, truth })
    }

    fn terminal_reward(&self, data: &Dataset) -> f64 {
        match &self.truths[0] {
            Some(gt) => gt.config.terminal_reward,
            None => data
                .trajectories()
                .iter()
                .filter_map(|t| t.steps.last())
                .map(|s| s.reward.abs())
                .fold(0.0, f64::max),
        }
    }

    fn run(&self, task: &Task) -> Result<TaskOutput, HarnessError> {
        let spec = self.spec;
        let cell = self.cell(task);
        let mut warnings = Vec::new();
        let Cohort { data, truth } = self.cohort(task)?;
        let reward = self.terminal_reward(&data);
        let (train, test) = partition(&data, spec.train_frac, derive_seed(spec.seed, cell, Salt::Split))?;
        let cluster_seed = derive_seed(spec.seed, cell, Salt::Cluster);
        let fitted = fit_representation(train, test, task.k, cluster_seed, truth.as_ref(), spec.n_bins, &mut warnings)?;
        let (s_n, a_n) = (fitted.train.n_states(), fitted.train.n_actions());

        let behavior_train = estimate_behavior_policy(&fitted.train, spec.smoothing)?;
        let behavior_test = estimate_behavior_policy(&fitted.test, spec.smoothing)?;
        let mdp = fit_mdp(&fitted.train, reward, spec.unvisited)?;
        let opts = planning(spec.gamma, &fitted.train);
        let learned = greedy_policy(&value_iteration(&mdp, &opts)?);
        let est_opts = EstimatorOptions {
            gamma: spec.gamma,
            ess_floor: spec.ess_floor,
        };
        let test_fingerprint = fitted.test.dataset().fingerprint();

        let mut records = Vec::new();
        for &kind in &spec.policies {
            let target = match kind {
                PolicyKind::Learned => learned.clone(),
                PolicyKind::Behavior => behavior_train.clone(),
                PolicyKind::Random => baseline_policy(BaselineKind::Random, s_n, a_n)?,
                PolicyKind::NoAction => baseline_policy(BaselineKind::NoAction, s_n, a_n)?,
                PolicyKind::MostCommon => baseline_policy(BaselineKind::MostCommon(&behavior_train), s_n, a_n)?,
            };
            let true_value = match &truth {
                None => None,
                Some(gt) => {
                    let lifted = match &fitted.clusters {
                        None => gt.lift(&target)?,
                        Some(cm) => gt.lift_through_observations(
                            &target,
                            |o| cm.assign(o).expect("simulated observations match the clustering"),
                            spec.truth_draws,
                            derive_seed(spec.seed, cell, Salt::Truth),
                        )?,
                    };
                    Some(gt.exact_value(&lifted, spec.gamma, gt.config.horizon_max)?)
                }
            };
            let critic = evaluate_policy(&mdp, &target, &opts)?.q;
            let opd = OffPolicyData::new(&fitted.test, &target, &behavior_test, est_opts)?;
            let audit = audit_weights(opd.weights(), spec.ess_floor)?;
            let matched = if target.is_deterministic() {
                Some(matched_sequences(&fitted.test, &target)?)
            } else {
                None
            };
            for &estimator in &spec.estimators {
                let result = if estimator == EstimatorKind::Mb {
                    model_based_estimate(&mdp, &target, &opts, Some(&test_fingerprint))?
                } else {
                    opd.estimate(estimator, Some(&critic))?
                };
                records.push(EstimateRecord {
                    replicate: task.replicate,
                    horizon: task.horizon,
                    k: task.k,
                    policy: kind,
                    estimator,
                    value: result.value,
                    true_value,
                    n_test: fitted.test.len(),
                    n_nonzero: result.n_nonzero,
                    ess: result.ess,
                    n_matching: matched.map(|m| m.n_matching),
                    mean_length_matching: matched.and_then(|m| m.mean_length_matching),
                    mean_length_total: audit.mean_length_total,
                    flags: result.flags.iter().map(|f| f.to_string()).collect::<Vec<_>>().join("|"),
                });
            }
        }
        Ok(TaskOutput { records, warnings })
    }

    fn agreement(&self, a: &AgreementSpec) -> Result<AgreementReport, HarnessError> {
        let spec = self.spec;
        let task = Task {
            horizon_index: 0,
            horizon: None,
            replicate: 0,
            k: Some(a.k),
        };
        let Cohort { data, truth } = self.cohort(&task)?;
        let reward = self.terminal_reward(&data);
        let (train, test) = partition(&data, spec.train_frac, derive_seed(spec.seed, 0, Salt::Split))?;
        let runs = a
            .seeds
            .par_iter()
            .map(|&seed| {
                let mut ignored = Vec::new();
                let fitted =
                    fit_representation(train.clone(), test.clone(), Some(a.k), seed, truth.as_ref(), spec.n_bins, &mut ignored)?;
                let policy = learn(&fitted.train, spec, reward)?;
                Ok((fitted.clusters.expect("k-means representation"), policy))
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        let n = runs.len();
        let mut matrix = vec![vec![1.0; n]; n];
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let v = step_agreement(&test, (&runs[i].0, &runs[i].1), (&runs[j].0, &runs[j].1))?;
                matrix[i][j] = v;
                matrix[j][i] = v;
                pairs.push(v);
            }
        }
        Ok(AgreementReport {
            k: a.k,
            seeds: a.seeds.clone(),
            versus_first: matrix[0][1..].to_vec(),
            mean_pairwise: crate::stats::mean(&pairs),
            matrix,
        })
    }
}

fn thread_count(spec: &ExperimentSpec) -> usize {
    spec.threads
        .or_else(|| std::env::var("OPEBENCH_THREADS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0)
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport, HarnessError> {
    spec.validate()?;
    let base = source_config(&spec.source);
    let horizons: Vec<Option<usize>> = if spec.horizons.is_empty() {
        vec![None]
    } else {
        spec.horizons.iter().copied().map(Some).collect()
    };
    let truths = horizons
        .iter()
        .map(|h| match &base {
            None => Ok(None),
            Some(cfg) => {
                let mut cfg = cfg.clone();
                if let Some(h) = h {
                    cfg.horizon_max = *h;
                }
                build_ground_truth(&cfg).map(Some)
            }
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    let file = match &spec.source {
        DataSource::File { path } => Some(load_dataset(path)?),
        _ => None,
    };
    let ctx = Context { spec, truths, file };

    let ks: Vec<Option<usize>> = match &spec.representation {
        Representation::Provided => vec![None],
        Representation::Kmeans { k } => k.iter().copied().map(Some).collect(),
    };
    let mut tasks = Vec::new();
    for (horizon_index, &horizon) in horizons.iter().enumerate() {
        for replicate in 0..spec.replicates {
            for &k in &ks {
                tasks.push(Task {
                    horizon_index,
                    horizon,
                    replicate,
                    k,
                });
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(spec))
        .build()
        .map_err(|e| HarnessError::ThreadPool(e.to_string()))?;
    let (outputs, agreement) = pool.install(|| {
        let outputs: Vec<Result<TaskOutput, HarnessError>> = tasks.par_iter().map(|t| ctx.run(t)).collect();
        let agreement = spec.agreement.as_ref().map(|a| ctx.agreement(a)).transpose();
        (outputs, agreement)
    });

    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for out in outputs {
        let out = out?;
        records.extend(out.records);
        for w in out.warnings {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
    }
    let mut recorded = spec.clone();
    recorded.threads = None;
    Ok(ExperimentReport {
        name: spec.name.clone(),
        spec: recorded,
        summary: summarize(&records),
        records,
        agreement: agreement?,
        warnings,
    })
}
