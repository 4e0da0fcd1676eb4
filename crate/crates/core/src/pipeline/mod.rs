//! Stage commands behind the `hno` binary. Each stage writes into its own
//! subdirectory of the configured output directory together with a
//! `manifest.json`.
//!
//! Layout under `output_dir`:
//! - `dataset/`: samples table, `meta.json`, `failures.json`, optional
//!   `pinn_pool` table
//! - `train/`: periodic checkpoints, `final.bin`, `train_log.jsonl`,
//!   `run.json`
//! - `eval/`: `report.csv`, `heatmap.json`, `testset.csv`, `budget.csv`
//! - `ntk/`: `ntk.csv`, `ratios.csv`

pub mod config;
pub mod manifest;
pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bvp::dataset::{generate_dataset, read_meta, read_samples};
use crate::error::{Error, Result};
use crate::game::GameSpec;
use crate::ntk::{ntk_matrix, ratio_table, sample_points, write_ntk_csv, write_ratios_csv};
use crate::operator::{Activation, Operator};
use crate::rollout::{
    build_test_set, heatmap, heatmap_matrices, read_report_csv, write_report_csv, Controller, TestSet,
};
use crate::table::Table;
use crate::training::{train, Mode, TrainData};

pub use config::PipelineConfig;
pub use manifest::{read_manifest, verify_manifest, DirLock, Manifest};

use manifest::{hash_files, unix_now, write_manifest, Parent};

pub const PINN_POOL_TABLE: &str = "pinn_pool";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

struct Stage {
    name: &'static str,
    started: u64,
    clock: Instant,
}

impl Stage {
    fn begin(name: &'static str) -> Stage {
        info!("stage {name} started");
        Stage {
            name,
            started: unix_now(),
            clock: Instant::now(),
        }
    }

    fn finish(
        self,
        cfg: &PipelineConfig,
        dir: &Path,
        outputs: &[&str],
        parents: Vec<Parent>,
        extra: serde_json::Value,
    ) -> Result<Manifest> {
        let m = Manifest {
            stage: self.name.into(),
            tool_version: TOOL_VERSION.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            parents,
            outputs: hash_files(dir, outputs)?,
            started_unix: self.started,
            finished_unix: unix_now(),
            wall_time_s: self.clock.elapsed().as_secs_f64(),
            extra,
        };
        write_manifest(dir, &m)?;
        info!("stage {} finished in {:.1} s", self.name, m.wall_time_s);
        Ok(m)
    }
}

/// Ground-truth trajectories for every training pair, plus the PDE-point
/// pool in HNO mode.
pub fn cmd_datagen(cfg: &PipelineConfig) -> Result<PathBuf> {
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let stage = Stage::begin("datagen");
    let dir = cfg.output_dir.join("dataset");
    let spec = cfg.spec()?;
    let pairs = cfg.training_pairs()?;
    let per_pair = cfg.n_traj_per_pair()?;
    let seed = cfg.stage_seed("datagen");
    let ds = generate_dataset(&spec, &pairs, per_pair, seed, &cfg.solver)?;
    ds.write(&dir, &ds.meta(&pairs, per_pair, seed, &cfg.solver))?;
    let mut outputs = vec!["samples.bin", "samples.schema.json", "meta.json", "failures.json"];
    let n_pool = cfg.pinn_pool_size()?;
    if n_pool > 0 {
        let pool = crate::training::sample_pinn_pool(&spec, n_pool, seed);
        let mut t = Table::new((0..spec.joint_dim()).map(|j| format!("x{j}")).collect());
        for x in &pool {
            t.push_row(x);
        }
        t.write(&dir, PINN_POOL_TABLE)?;
        outputs.extend(["pinn_pool.bin", "pinn_pool.schema.json"]);
    } else {
        for f in ["pinn_pool.bin", "pinn_pool.schema.json"] {
            let _ = fs::remove_file(dir.join(f));
        }
    }
    let extra = serde_json::json!({
        "n_trajectories": ds.trajectories.len(),
        "n_samples": ds.samples.len(),
        "pinn_pool": n_pool,
        "attempts": ds.report.attempts,
        "failures": ds.report.failures.len(),
    });
    stage.finish(cfg, &dir, &outputs, vec![], extra)?;
    Ok(dir)
}

/// PDE-point pool of a dataset directory (empty when absent).
pub fn read_pinn_pool(dir: &Path, spec: &GameSpec) -> Result<Vec<Vec<f64>>> {
    if !dir.join(format!("{PINN_POOL_TABLE}.bin")).exists() {
        return Ok(Vec::new());
    }
    let t = Table::read(dir, PINN_POOL_TABLE)?;
    if t.n_cols() != spec.joint_dim() {
        return Err(Error::Artifact(format!(
            "PDE-point pool has {} columns, case {} needs {}",
            t.n_cols(),
            spec.case,
            spec.joint_dim()
        )));
    }
    Ok(t.rows().map(<[f64]>::to_vec).collect())
}

#[derive(Serialize, Deserialize, PartialEq)]
struct RunStamp {
    train_hash: String,
    dataset_outputs: String,
}

/// Hash of the settings that shape training (not evaluation).
fn train_hash(cfg: &PipelineConfig) -> String {
    let v = serde_json::json!({
        "case": cfg.case,
        "mode": cfg.mode,
        "activation": cfg.activation,
        "seed": cfg.seed,
        "game": cfg.game,
        "operator": cfg.operator,
        "train": cfg.train,
    });
    hex::encode(Sha256::digest(serde_json::to_vec(&v).expect("json")))
}

/// Trains on a dataset directory; resumes from the latest checkpoint of an
/// earlier run with the same training settings.
pub fn cmd_train(cfg: &PipelineConfig, dataset_dir: &Path) -> Result<PathBuf> {
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let stage = Stage::begin("train");
    let spec = cfg.spec()?;
    let meta = read_meta(dataset_dir)?;
    if meta.case != cfg.case {
        return Err(Error::Artifact(format!(
            "dataset is for case {}, config for {}",
            meta.case, cfg.case
        )));
    }
    let parent = verify_manifest(dataset_dir)?;
    let samples = read_samples(dataset_dir, cfg.case)?;
    let pool = read_pinn_pool(dataset_dir, &spec)?;
    if cfg.mode == Mode::Hno && cfg.train.refine_iters > 0 && pool.is_empty() {
        return Err(Error::Artifact(format!(
            "dataset {} has no PDE-point pool; regenerate it with mode = \"hno\"",
            dataset_dir.display()
        )));
    }
    let dir = cfg.output_dir.join("train");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let stamp = RunStamp {
        train_hash: train_hash(cfg),
        dataset_outputs: parent.outputs_digest(),
    };
    let stamp_path = dir.join("run.json");
    if stamp_path.exists() {
        let old: RunStamp =
            serde_json::from_str(&fs::read_to_string(&stamp_path).map_err(|e| Error::io(&stamp_path, e))?)?;
        if old != stamp {
            return Err(Error::Artifact(format!(
                "{} holds a run with different training settings or data; use a fresh output_dir",
                dir.display()
            )));
        }
    }
    fs::write(&stamp_path, serde_json::to_string_pretty(&stamp)?).map_err(|e| Error::io(&stamp_path, e))?;

    let data = TrainData {
        supervised: &samples,
        pinn_pool: &pool,
        type_pairs: &meta.type_pairs,
    };
    let out = train(
        &spec,
        &cfg.operator,
        &cfg.train,
        &data,
        cfg.stage_seed("train"),
        Some(&dir),
    )?;
    let last = out.log.last().map(|r| serde_json::to_value(&r.terms)).transpose()?;
    let extra = serde_json::json!({
        "dataset_dir": dataset_dir,
        "iterations": cfg.train.total_iters(),
        "mode": cfg.mode,
        "activation": cfg.activation,
        "final_terms": last,
    });
    stage.finish(cfg, &dir, &["final.bin"], vec![parent.as_parent(dataset_dir)], extra)?;
    Ok(dir.join("final.bin"))
}

/// Default display name of a checkpoint: the run directory above `train/`.
pub fn model_name(ckpt: &Path) -> String {
    ckpt.parent()
        .and_then(Path::parent)
        .and_then(Path::file_name)
        .and_then(|s| s.to_str())
        .unwrap_or("model")
        .to_string()
}

fn load_for(cfg: &PipelineConfig, spec: &GameSpec, path: &Path) -> Result<Operator> {
    let op = Operator::load(path, cfg.case)?;
    if op.spec != *spec {
        return Err(Error::Artifact(format!(
            "checkpoint {} was trained on different game constants",
            path.display()
        )));
    }
    Ok(op)
}

fn write_testsets(path: &Path, sets: &[TestSet]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))?;
    let d = sets
        .first()
        .map_or(0, |s| s.trajectories.first().map_or(0, |t| t.states[0].len()));
    let mut head = vec!["theta1".to_string(), "theta2".into(), "index".into()];
    head.extend((0..d).map(|j| format!("x{j}")));
    let res = (|| -> std::result::Result<(), csv::Error> {
        w.write_record(&head)?;
        for s in sets {
            let [a, b] = s.type_pair.as_array();
            for (i, x) in s.initial_states().iter().enumerate() {
                let mut row = vec![a.to_string(), b.to_string(), i.to_string()];
                row.extend(x.iter().map(|v| format!("{v:?}")));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    })();
    res.map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))
}

/// Wall time of a stage directory and of its datagen parent, if recorded.
fn budget_row(ckpt: &Path) -> (Option<f64>, Option<f64>) {
    let Some(train_dir) = ckpt.parent() else {
        return (None, None);
    };
    let Ok(m) = read_manifest(train_dir) else {
        return (None, None);
    };
    let data = m
        .parents
        .iter()
        .find(|p| p.stage == "datagen")
        .and_then(|p| read_manifest(&p.dir).ok())
        .map(|d| d.wall_time_s);
    (data, Some(m.wall_time_s))
}

/// Closed-loop evaluation of named checkpoints over the type grid on a
/// shared test set.
pub fn cmd_eval(cfg: &PipelineConfig, models: &[(String, PathBuf)]) -> Result<PathBuf> {
    if models.is_empty() {
        return Err(Error::Config("eval needs at least one checkpoint".into()));
    }
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let stage = Stage::begin("eval");
    let spec = cfg.spec()?;
    let ops: Vec<Operator> = models
        .iter()
        .map(|(_, p)| load_for(cfg, &spec, p))
        .collect::<Result<_>>()?;
    let seed = cfg.stage_seed("eval");
    let sets: Vec<TestSet> = cfg
        .grid()?
        .into_iter()
        .map(|tp| build_test_set(&spec, tp, cfg.rollout.n_test, seed, &cfg.solver))
        .collect::<Result<_>>()?;
    let named: Vec<(&str, &dyn Controller)> = models
        .iter()
        .zip(&ops)
        .map(|((n, _), op)| (n.as_str(), op as &dyn Controller))
        .collect();
    let cells = heatmap(&named, &spec, &sets, &cfg.training_pairs()?, &cfg.rollout)?;

    let dir = cfg.output_dir.join("eval");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_report_csv(&dir.join("report.csv"), &cells)?;
    let hm = dir.join("heatmap.json");
    fs::write(&hm, serde_json::to_string_pretty(&heatmap_matrices(&cells))?).map_err(|e| Error::io(&hm, e))?;
    write_testsets(&dir.join("testset.csv"), &sets)?;

    let mut budget = String::from("model,datagen_s,train_s,total_s\n");
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.3}"));
    let mut parents = Vec::new();
    for (name, path) in models {
        let (d, t) = budget_row(path);
        let total = d.zip(t).map(|(a, b)| a + b);
        budget.push_str(&format!("{name},{},{},{}\n", fmt(d), fmt(t), fmt(total)));
        if let Some(train_dir) = path.parent() {
            if let Ok(m) = read_manifest(train_dir) {
                parents.push(m.as_parent(train_dir));
            }
        }
    }
    let bp = dir.join("budget.csv");
    fs::write(&bp, budget).map_err(|e| Error::io(&bp, e))?;

    let extra = serde_json::json!({
        "models": models.iter().map(|(n, p)| serde_json::json!({"name": n, "checkpoint": p})).collect::<Vec<_>>(),
        "n_test": cfg.rollout.n_test,
    });
    stage.finish(
        cfg,
        &dir,
        &["report.csv", "heatmap.json", "testset.csv"],
        parents,
        extra,
    )?;
    Ok(dir)
}

/// Kernel condition numbers of one checkpoint per activation on shared
/// point samples from the dataset, and the ratio table when tanh, sin and
/// relu are all present.
pub fn cmd_ntk(cfg: &PipelineConfig, checkpoints: &[PathBuf], dataset_dir: &Path) -> Result<PathBuf> {
    if checkpoints.is_empty() {
        return Err(Error::Config("ntk needs at least one checkpoint".into()));
    }
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let stage = Stage::begin("ntk");
    let spec = cfg.spec()?;
    let ops: Vec<Operator> = checkpoints
        .iter()
        .map(|p| load_for(cfg, &spec, p))
        .collect::<Result<_>>()?;
    let mut acts: Vec<Activation> = ops.iter().map(|o| o.activation).collect();
    acts.sort_by_key(|a| a.as_str());
    acts.dedup();
    if acts.len() != ops.len() {
        return Err(Error::Config("ntk takes at most one checkpoint per activation".into()));
    }
    let samples = read_samples(dataset_dir, cfg.case)?;
    let seed = cfg.stage_seed("ntk");
    let pairs = cfg.training_pairs()?;
    let mut results = Vec::new();
    for op in &ops {
        for &tp in &pairs {
            let pts = sample_points(&samples, tp, cfg.ntk.m, seed)?;
            let r = ntk_matrix(op, tp, &pts, seed)?;
            info!(
                "ntk {} {tp}: kappa {:e}{}",
                op.activation,
                r.kappa,
                if r.floored { " (floored)" } else { "" }
            );
            results.push(r);
        }
    }
    let dir = cfg.output_dir.join("ntk");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_ntk_csv(&dir.join("ntk.csv"), &results)?;
    let mut outputs = vec!["ntk.csv"];
    if acts.len() == 3 {
        write_ratios_csv(&dir.join("ratios.csv"), &ratio_table(&results, &pairs)?)?;
        outputs.push("ratios.csv");
    } else {
        warn!("ratios need tanh, sin and relu checkpoints; writing kappa only");
        let _ = fs::remove_file(dir.join("ratios.csv"));
    }
    let mut parents = vec![verify_manifest(dataset_dir)?.as_parent(dataset_dir)];
    for p in checkpoints {
        if let Some(d) = p.parent() {
            if let Ok(m) = read_manifest(d) {
                parents.push(m.as_parent(d));
            }
        }
    }
    stage.finish(cfg, &dir, &outputs, parents, serde_json::json!({ "m": cfg.ntk.m }))?;
    Ok(dir)
}

/// Heatmap matrices and an annotated SVG from a report file.
pub fn cmd_plot(report: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let cells = read_report_csv(report)?;
    if cells.is_empty() {
        return Err(Error::Artifact(format!("{} has no cells", report.display())));
    }
    let mats = heatmap_matrices(&cells);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let json = out_dir.join("heatmap.json");
    fs::write(&json, serde_json::to_string_pretty(&mats)?).map_err(|e| Error::io(&json, e))?;
    let svg = out_dir.join("heatmap.svg");
    fs::write(&svg, plot::render_svg(&mats)).map_err(|e| Error::io(&svg, e))?;
    Ok(vec![json, svg])
}
