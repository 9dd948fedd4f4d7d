//! JSONL trajectory files: one trajectory object per line.
//!
//! ```text
//! {"id":"p0","outcome":"died","steps":[{"obs":[0.1,2.0],"fluid_dose":0.0,"vaso_dose":0.0,"reward":-100.0}]}
//! ```
//!
//! Steps may additionally carry `state_id`, `fluid_bin` and `vaso_bin` once
//! discretized. The writer emits keys in exactly this order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, DiscreteAction, Observation, Outcome, RawAction, RewardScheme, Step, Trajectory};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireTrajectory {
    id: String,
    outcome: Outcome,
    steps: Vec<WireStep>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireStep {
    obs: Vec<f64>,
    fluid_dose: f64,
    vaso_dose: f64,
    reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    state_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fluid_bin: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vaso_bin: Option<usize>,
}

impl WireTrajectory {
    fn into_trajectory(self, line: usize) -> Result<Trajectory, DataError> {
        let steps = self
            .steps
            .into_iter()
            .enumerate()
            .map(|(t, s)| {
                let action = match (s.fluid_bin, s.vaso_bin) {
                    (Some(fluid_bin), Some(vaso_bin)) => Some(DiscreteAction { fluid_bin, vaso_bin }),
                    (None, None) => None,
                    _ => {
                        return Err(DataError::Schema {
                            line,
                            message: format!("step {t}: `fluid_bin` and `vaso_bin` must appear together"),
                        })
                    }
                };
                Ok(Step {
                    obs: Observation(s.obs),
                    raw_action: RawAction {
                        fluid: s.fluid_dose,
                        vaso: s.vaso_dose,
                    },
                    reward: s.reward,
                    state_id: s.state_id,
                    action,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Trajectory {
            id: self.id,
            outcome: self.outcome,
            steps,
        })
    }

    fn from_trajectory(t: &Trajectory) -> Self {
        Self {
            id: t.id.clone(),
            outcome: t.outcome,
            steps: t
                .steps
                .iter()
                .map(|s| WireStep {
                    obs: s.obs.0.clone(),
                    fluid_dose: s.raw_action.fluid,
                    vaso_dose: s.raw_action.vaso,
                    reward: s.reward,
                    state_id: s.state_id,
                    fluid_bin: s.action.map(|a| a.fluid_bin),
                    vaso_bin: s.action.map(|a| a.vaso_bin),
                })
                .collect(),
        }
    }
}

/// Loads a JSONL dataset under the default strict reward scheme.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    load_dataset_with(path, RewardScheme::default())
}

pub fn load_dataset_with(path: impl AsRef<Path>, scheme: RewardScheme) -> Result<Dataset, DataError> {
    let reader = BufReader::new(File::open(path)?);
    read_dataset(reader, scheme)
}

pub(crate) fn read_dataset(reader: impl BufRead, scheme: RewardScheme) -> Result<Dataset, DataError> {
    let mut trajectories = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireTrajectory = serde_json::from_str(&line).map_err(|e| DataError::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        let traj = wire.into_trajectory(line_no)?;
        // Validate per line so errors carry the line number.
        let dim = trajectories
            .first()
            .and_then(|t: &Trajectory| t.steps.first())
            .map(|s| s.obs.dim());
        if let Some(dim) = dim {
            if let Some((t, s)) = traj.steps.iter().enumerate().find(|(_, s)| s.obs.dim() != dim) {
                return Err(DataError::Schema {
                    line: line_no,
                    message: format!("step {t}: field `obs` has {} features, expected {dim}", s.obs.dim()),
                });
            }
        }
        let own_dim = traj.steps.first().map_or(0, |s| s.obs.dim());
        super::validate_trajectory(&traj, dim.unwrap_or(own_dim), scheme).map_err(|e| DataError::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        trajectories.push(traj);
    }
    if trajectories.is_empty() {
        return Err(DataError::Empty);
    }
    Dataset::new(trajectories, vec![], scheme)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset(ds, &mut out)?;
    out.flush()?;
    Ok(())
}

pub(crate) fn write_dataset(ds: &Dataset, out: &mut impl Write) -> Result<(), DataError> {
    for t in ds.trajectories() {
        let line = serde_json::to_string(&WireTrajectory::from_trajectory(t)).map_err(std::io::Error::other)?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    const GOLDEN: &str = concat!(
        r#"{"id":"p0","outcome":"died","steps":[{"obs":[0.5,-1.25],"fluid_dose":0.0,"vaso_dose":0.0,"reward":-100.0}]}"#,
        "\n",
        r#"{"id":"p1","outcome":"survived","steps":[{"obs":[1.0,2.0],"fluid_dose":120.5,"vaso_dose":0.0,"reward":0.0},{"obs":[0.0,3.5],"fluid_dose":0.0,"vaso_dose":0.08,"reward":100.0}]}"#,
        "\n",
    );

    fn read(text: &str) -> Result<Dataset, DataError> {
        read_dataset(Cursor::new(text), RewardScheme::default())
    }

    #[test]
    fn empty_file_is_an_error() {
        let err = read("").unwrap_err();
        assert_eq!(err.to_string(), "no trajectories");
        assert!(matches!(read("\n  \n"), Err(DataError::Empty)));
    }

    #[test]
    fn single_record() {
        let ds = read(GOLDEN.lines().next().unwrap()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(super::super::cohort_stats(&ds).unwrap().mortality, 1.0);
    }

    #[test]
    fn golden_round_trip_is_byte_identical() {
        let ds = read(GOLDEN).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), GOLDEN);
    }

    #[test]
    fn annotated_round_trip() {
        let text = concat!(
            r#"{"id":"a","outcome":"survived","steps":[{"obs":[1.0],"fluid_dose":2.0,"vaso_dose":0.0,"reward":100.0,"state_id":4,"fluid_bin":1,"vaso_bin":0}]}"#,
            "\n"
        );
        let ds = read(text).unwrap();
        let step = &ds.trajectories()[0].steps[0];
        assert_eq!(step.state_id, Some(4));
        assert_eq!(step.action, Some(DiscreteAction { fluid_bin: 1, vaso_bin: 0 }));
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), text);
    }

    #[test]
    fn schema_errors_name_line_and_field() {
        let text = format!(
            "{}\n{}\n",
            GOLDEN.lines().next().unwrap(),
            r#"{"id":"p1","steps":[]}"#
        );
        let err = read(&text).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("outcome"), "{err}");
    }

    #[test]
    fn reward_violation_reports_line() {
        let text = r#"{"id":"x","outcome":"survived","steps":[{"obs":[1.0],"fluid_dose":0.0,"vaso_dose":0.0,"reward":-100.0}]}"#;
        let err = read(text).unwrap_err().to_string();
        assert!(err.starts_with("line 1"), "{err}");
        let dense = read_dataset(Cursor::new(text), RewardScheme::dense());
        assert!(dense.is_ok());
    }

    #[test]
    fn dimension_mismatch_across_lines() {
        let text = concat!(
            r#"{"id":"a","outcome":"died","steps":[{"obs":[1.0],"fluid_dose":0.0,"vaso_dose":0.0,"reward":-100.0}]}"#,
            "\n",
            r#"{"id":"b","outcome":"died","steps":[{"obs":[1.0,2.0],"fluid_dose":0.0,"vaso_dose":0.0,"reward":-100.0}]}"#,
        );
        let err = read(text).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("obs"), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, GOLDEN).unwrap();
        let ds = load_dataset(&p).unwrap();
        let q = dir.path().join("e.jsonl");
        save_dataset(&ds, &q).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    }
}
