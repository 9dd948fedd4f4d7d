//! State and action abstractions.
//!
//! States come from seeded k-means over standardized observations; actions
//! come from per-axis dose bins (bin 0 for no dose, quantile bins for the
//! rest). [`discretize`] applies both and yields a [`DiscretizedDataset`],
//! the input of every tabular method downstream.

pub mod agreement;
pub mod dose_bins;
pub mod kmeans;

use thiserror::Error;

use crate::data::{ActionGrid, Dataset, Trajectory};

pub use agreement::{policy_agreement, step_agreement};
pub use dose_bins::{fit_dose_bins, fit_dose_bins_with, AxisBins, DoseBins};
pub use kmeans::{fit_kmeans, ClusterModel, KMeansOptions};

#[derive(Debug, Error)]
pub enum RepresentationError {
    #[error("k = {k} exceeds the {n} observations")]
    TooFewObservations { k: usize, n: usize },

    #[error("only {distinct} distinct observations for k = {k}")]
    TooFewDistinct { k: usize, distinct: usize },

    #[error("all observations are identical; k must be 1")]
    AllIdentical,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("observation has {found} features, model expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("{axis} dose {dose} cannot be binned: {reason}")]
    Dose { axis: String, dose: f64, reason: String },

    #[error("invalid dose bins: {0}")]
    InvalidBins(String),

    #[error("invalid cluster model: {0}")]
    InvalidModel(String),

    #[error("trajectory `{id}` step {step}: {message}")]
    Annotation { id: String, step: usize, message: String },

    #[error("policy shapes differ: {0}")]
    ShapeMismatch(String),

    #[error("visit weights sum to zero")]
    ZeroWeight,

    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

/// A dataset in which every step carries a state id and a binned action.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedDataset {
    dataset: Dataset,
    n_states: usize,
    grid: ActionGrid,
    states: Vec<Vec<usize>>,
    actions: Vec<Vec<usize>>,
}

/// Borrowed view of one discretized trajectory.
#[derive(Debug, Clone, Copy)]
pub struct Episode<'a> {
    pub trajectory: &'a Trajectory,
    pub states: &'a [usize],
    pub actions: &'a [usize],
}

impl<'a> Episode<'a> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

impl DiscretizedDataset {
    /// Wraps a dataset whose steps are already annotated, checking every
    /// state id against `n_states` and every action against `grid`.
    pub fn from_annotated(dataset: Dataset, n_states: usize, grid: ActionGrid) -> Result<Self, RepresentationError> {
        let mut states = Vec::with_capacity(dataset.len());
        let mut actions = Vec::with_capacity(dataset.len());
        for traj in dataset.trajectories() {
            let mut s_row = Vec::with_capacity(traj.len());
            let mut a_row = Vec::with_capacity(traj.len());
            for (t, step) in traj.steps.iter().enumerate() {
                let fail = |message: String| RepresentationError::Annotation {
                    id: traj.id.clone(),
                    step: t,
                    message,
                };
                let s = step.state_id.ok_or_else(|| fail("missing state_id".into()))?;
                if s >= n_states {
                    return Err(fail(format!("state_id {s} outside 0..{n_states}")));
                }
                let a = step.action.ok_or_else(|| fail("missing fluid_bin/vaso_bin".into()))?;
                if !grid.contains(a) {
                    return Err(fail(format!(
                        "action ({}, {}) outside the {}x{} grid",
                        a.fluid_bin, a.vaso_bin, grid.fluid_bins, grid.vaso_bins
                    )));
                }
                s_row.push(s);
                a_row.push(grid.encode(a));
            }
            states.push(s_row);
            actions.push(a_row);
        }
        Ok(Self {
            dataset,
            n_states,
            grid,
            states,
            actions,
        })
    }

    /// Like [`from_annotated`](Self::from_annotated) with `n_states` taken as
    /// one more than the largest state id present.
    pub fn from_annotated_infer(dataset: Dataset, grid: ActionGrid) -> Result<Self, RepresentationError> {
        let n_states = dataset.steps().filter_map(|s| s.state_id).max().map_or(0, |m| m + 1);
        Self::from_annotated(dataset, n_states, grid)
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.grid.n_actions()
    }

    pub fn grid(&self) -> ActionGrid {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    pub fn episode(&self, i: usize) -> Episode<'_> {
        Episode {
            trajectory: &self.dataset.trajectories()[i],
            states: &self.states[i],
            actions: &self.actions[i],
        }
    }

    pub fn episodes(&self) -> impl ExactSizeIterator<Item = Episode<'_>> + '_ {
        (0..self.len()).map(|i| self.episode(i))
    }

    /// Visit count of each state over all logged steps.
    pub fn state_visits(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.n_states];
        for &s in self.states.iter().flatten() {
            counts[s] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            dataset: self.dataset.subset(indices),
            n_states: self.n_states,
            grid: self.grid,
            states: indices.iter().map(|&i| self.states[i].clone()).collect(),
            actions: indices.iter().map(|&i| self.actions[i].clone()).collect(),
        }
    }
}

/// Annotates every step with its cluster and dose bins. Existing
/// annotations are overwritten, so applying the same fit twice is a no-op.
pub fn discretize(ds: &Dataset, cm: &ClusterModel, db: &DoseBins) -> Result<DiscretizedDataset, RepresentationError> {
    let mut trajectories = ds.trajectories().to_vec();
    for traj in &mut trajectories {
        for step in &mut traj.steps {
            step.state_id = Some(cm.assign(step.obs.values())?);
            step.action = Some(db.assign(step.raw_action)?);
        }
    }
    DiscretizedDataset::from_annotated(ds.with_trajectories(trajectories), cm.k(), db.grid())
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{io, DiscreteAction, Outcome, RawAction, RewardScheme, Step};

    fn raw_dataset() -> Dataset {
        let mk = |id: &str, doses: &[(f64, f64)], outcome: Outcome| {
            let last = doses.len() - 1;
            Trajectory {
                id: id.into(),
                outcome,
                steps: doses
                    .iter()
                    .enumerate()
                    .map(|(t, &(f, v))| {
                        let r = if t == last { RewardScheme::default().terminal_for(outcome) } else { 0.0 };
                        Step::new(vec![f, v + t as f64], RawAction { fluid: f, vaso: v }, r)
                    })
                    .collect(),
            }
        };
        Dataset::new(
            vec![
                mk("a", &[(0.0, 0.0), (1.0, 0.5), (2.0, 0.0)], Outcome::Survived),
                mk("b", &[(3.0, 1.0), (4.0, 2.0), (0.0, 3.0)], Outcome::Died),
                mk("c", &[(5.0, 4.0), (6.0, 0.0), (7.0, 5.0), (8.0, 6.0)], Outcome::Survived),
                mk("d", &[(0.0, 0.0)], Outcome::Died),
            ],
            vec![],
            RewardScheme::default(),
        )
        .unwrap()
    }

    fn fitted(ds: &Dataset) -> (ClusterModel, DoseBins) {
        let obs: Vec<&[f64]> = ds.steps().map(|s| s.obs.values()).collect();
        let cm = fit_kmeans(&obs, &KMeansOptions::new(3, 1)).unwrap();
        (cm, fit_dose_bins(ds).unwrap())
    }

    #[test]
    fn every_step_annotated_in_range() {
        let ds = raw_dataset();
        let (cm, db) = fitted(&ds);
        let dd = discretize(&ds, &cm, &db).unwrap();
        assert_eq!(dd.n_states(), 3);
        for ep in dd.episodes() {
            assert!(ep.states.iter().all(|&s| s < 3));
            assert!(ep.actions.iter().all(|&a| a < 25));
        }
        assert_eq!(dd.episode(3).actions, &[0]);
        assert_eq!(dd.state_visits().iter().sum::<u64>(), ds.n_steps() as u64);
    }

    #[test]
    fn idempotent() {
        let ds = raw_dataset();
        let (cm, db) = fitted(&ds);
        let once = discretize(&ds, &cm, &db).unwrap();
        let twice = discretize(once.dataset(), &cm, &db).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn annotations_survive_jsonl_round_trip() {
        let ds = raw_dataset();
        let (cm, db) = fitted(&ds);
        let dd = discretize(&ds, &cm, &db).unwrap();
        let mut buf = Vec::new();
        io::write_dataset(dd.dataset(), &mut buf).unwrap();
        let back = io::read_dataset(std::io::Cursor::new(&buf), RewardScheme::default()).unwrap();
        let dd2 = DiscretizedDataset::from_annotated(back, 3, db.grid()).unwrap();
        for (a, b) in dd.episodes().zip(dd2.episodes()) {
            assert_eq!(a.states, b.states);
            assert_eq!(a.actions, b.actions);
        }
        let mut buf2 = Vec::new();
        io::write_dataset(dd2.dataset(), &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn from_annotated_rejects_missing_or_out_of_range() {
        let ds = raw_dataset();
        assert!(matches!(
            DiscretizedDataset::from_annotated(ds.clone(), 3, ActionGrid::default()),
            Err(RepresentationError::Annotation { .. })
        ));
        let dd = testing::annotated(&[(&[0, 2], &[0, 1])], 3, 2);
        let err = DiscretizedDataset::from_annotated(dd.dataset().clone(), 2, dd.grid()).unwrap_err();
        assert!(err.to_string().contains("state_id 2"), "{err}");
        let narrow = ActionGrid {
            fluid_bins: 1,
            vaso_bins: 1,
        };
        assert!(DiscretizedDataset::from_annotated(dd.dataset().clone(), 3, narrow).is_err());
        let inferred = DiscretizedDataset::from_annotated_infer(dd.dataset().clone(), dd.grid()).unwrap();
        assert_eq!(inferred.n_states(), 3);
        assert_eq!(
            inferred.grid().decode(inferred.episode(0).actions[1]),
            DiscreteAction {
                fluid_bin: 1,
                vaso_bin: 0
            }
        );
    }
}
