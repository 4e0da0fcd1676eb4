//! Supervised dataset generation and persistence.

use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{solve_bvp, SolverConfig, SupervisedSample, Trajectory, SIGN_CONVENTION};
use crate::error::{Error, Result};
use crate::game::{CaseId, GameModel, GameSpec, TypePair};
use crate::rng::substream;
use crate::table::Table;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const SAMPLES_TABLE: &str = "samples";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub type_pair: TypePair,
    pub index: usize,
    pub attempt: usize,
    pub initial_state: Vec<f64>,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub attempts: usize,
    pub failures: Vec<FailureRecord>,
}

impl DatasetReport {
    pub fn failure_fraction(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.failures.len() as f64 / self.attempts as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub case: CaseId,
    pub trajectories: Vec<Trajectory>,
    pub samples: Vec<SupervisedSample>,
    pub report: DatasetReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub case: CaseId,
    pub type_pairs: Vec<TypePair>,
    pub n_traj_per_pair: usize,
    pub seed: u64,
    pub solver: SolverConfig,
    pub sign_convention: String,
    pub n_trajectories: usize,
    pub n_samples: usize,
    pub attempts: usize,
    pub failures: usize,
}

/// Solve from a fresh initial state until one converges. Returns the
/// trajectory and the failures met on the way.
pub fn solve_with_resampling(
    spec: &GameSpec,
    tp: TypePair,
    seed: u64,
    label: &str,
    indices: &[u64],
    cfg: &SolverConfig,
    accept: impl Fn(&Trajectory) -> bool,
) -> (Option<Trajectory>, Vec<FailureRecord>, usize) {
    let mut failures = Vec::new();
    for attempt in 0..cfg.max_attempts {
        let mut idx = indices.to_vec();
        idx.push(attempt as u64);
        let mut rng = substream(seed, label, &idx);
        let x0 = spec.sample_gt(&mut rng);
        let reason = match solve_bvp(spec, tp, &x0, 0.0, cfg) {
            Ok(traj) if accept(&traj) => return (Some(traj), failures, attempt + 1),
            Ok(_) => "rejected by filter".to_string(),
            Err(e) => e.reason,
        };
        warn!("{label} {tp} index {indices:?} attempt {attempt}: {reason}");
        failures.push(FailureRecord {
            type_pair: tp,
            index: *indices.last().unwrap_or(&0) as usize,
            attempt,
            initial_state: x0,
            reason,
        });
    }
    (None, failures, cfg.max_attempts)
}

/// `n_traj` converged trajectories per type pair, initial states uniform over
/// the ground-truth boxes, `t0 = 0`.
pub fn generate_dataset(
    spec: &GameSpec,
    type_pairs: &[TypePair],
    n_traj: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<Dataset> {
    if n_traj == 0 {
        return Err(Error::Config("n_traj must be at least 1".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..type_pairs.len())
        .flat_map(|p| (0..n_traj).map(move |i| (p, i)))
        .collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(p, i)| {
            solve_with_resampling(spec, type_pairs[p], seed, "datagen", &[p as u64, i as u64], cfg, |_| {
                true
            })
        })
        .collect();

    let mut report = DatasetReport::default();
    let mut trajectories = Vec::with_capacity(jobs.len());
    let mut exhausted = 0;
    for (traj, fails, attempts) in results {
        report.attempts += attempts;
        report.failures.extend(fails);
        match traj {
            Some(t) => trajectories.push(t),
            None => exhausted += 1,
        }
    }
    if exhausted > 0 || report.failure_fraction() > cfg.max_fail_fraction {
        return Err(Error::Numerical(format!(
            "dataset generation aborted: {} of {} solves failed ({} requests exhausted {} attempts); first failure: {}",
            report.failures.len(),
            report.attempts,
            exhausted,
            cfg.max_attempts,
            report.failures.first().map(|f| f.reason.as_str()).unwrap_or("-")
        )));
    }
    let samples = trajectories.iter().flat_map(|t| t.samples()).collect();
    Ok(Dataset {
        case: spec.case,
        trajectories,
        samples,
        report,
    })
}

pub fn sample_columns(joint_dim: usize) -> Vec<String> {
    let mut c = vec!["t".to_string()];
    c.extend((0..joint_dim).map(|i| format!("x{i}")));
    c.push("value".into());
    c.extend((0..joint_dim).map(|i| format!("dvdx{i}")));
    c.push("theta_self".into());
    c.push("theta_other".into());
    c
}

pub fn samples_to_table(samples: &[SupervisedSample], joint_dim: usize) -> Table {
    let mut t = Table::new(sample_columns(joint_dim));
    let mut row = Vec::with_capacity(2 * joint_dim + 4);
    for s in samples {
        row.clear();
        row.push(s.t);
        row.extend_from_slice(&s.joint_state);
        row.push(s.value);
        row.extend_from_slice(&s.costate);
        row.extend_from_slice(&s.type_pair.as_array());
        t.push_row(&row);
    }
    t
}

pub fn samples_from_table(t: &Table, joint_dim: usize) -> Result<Vec<SupervisedSample>> {
    if t.columns != sample_columns(joint_dim) {
        return Err(Error::Artifact("sample table columns do not match the case".into()));
    }
    t.rows()
        .map(|r| {
            let d = joint_dim;
            Ok(SupervisedSample {
                t: r[0],
                joint_state: r[1..1 + d].to_vec(),
                value: r[1 + d],
                costate: r[2 + d..2 + 2 * d].to_vec(),
                type_pair: TypePair::new(r[2 + 2 * d], r[3 + 2 * d])?,
            })
        })
        .collect()
}

impl Dataset {
    pub fn meta(&self, type_pairs: &[TypePair], n_traj: usize, seed: u64, cfg: &SolverConfig) -> DatasetMeta {
        DatasetMeta {
            format_version: DATASET_FORMAT_VERSION,
            case: self.case,
            type_pairs: type_pairs.to_vec(),
            n_traj_per_pair: n_traj,
            seed,
            solver: cfg.clone(),
            sign_convention: SIGN_CONVENTION.into(),
            n_trajectories: self.trajectories.len(),
            n_samples: self.samples.len(),
            attempts: self.report.attempts,
            failures: self.report.failures.len(),
        }
    }

    /// Writes `meta.json`, the samples table and `failures.json`.
    pub fn write(&self, dir: &Path, meta: &DatasetMeta) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let joint_dim = GameSpec::new(self.case).joint_dim();
        samples_to_table(&self.samples, joint_dim).write(dir, SAMPLES_TABLE)?;
        let m = dir.join("meta.json");
        fs::write(&m, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&m, e))?;
        let f = dir.join("failures.json");
        fs::write(&f, serde_json::to_string_pretty(&self.report.failures)?).map_err(|e| Error::io(&f, e))?;
        Ok(())
    }
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let m = dir.join("meta.json");
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?)?;
    if meta.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Artifact(format!(
            "dataset format version {} unsupported",
            meta.format_version
        )));
    }
    if meta.sign_convention != SIGN_CONVENTION {
        return Err(Error::Artifact(format!(
            "dataset sign convention '{}' unsupported",
            meta.sign_convention
        )));
    }
    Ok(meta)
}

/// Reads the supervised samples of a dataset directory, checking the case.
pub fn read_samples(dir: &Path, case: CaseId) -> Result<Vec<SupervisedSample>> {
    let meta = read_meta(dir)?;
    if meta.case != case {
        return Err(Error::Artifact(format!(
            "dataset is for case {}, expected {case}",
            meta.case
        )));
    }
    let t = Table::read(dir, SAMPLES_TABLE)?;
    samples_from_table(&t, GameSpec::new(case).joint_dim())
}

/// Node count of a trajectory started at `t0 = 0`.
pub fn nodes_per_trajectory(spec: &GameSpec, dt: f64) -> usize {
    (spec.horizon() / dt).round() as usize + 1
}
