//! Pretraining and curriculum refinement of the operator.

pub mod loss;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bvp::SupervisedSample;
use crate::error::{Error, Result};
use crate::game::{CaseId, GameSpec, TypePair};
use crate::operator::{load_checkpoint, save_checkpoint, Operator, OperatorConfig};
use crate::rng::substream;

pub use loss::{
    hji_residual, hji_residual_from_gradients, loss_and_grad, Batches, BoundaryPoint, LossTerms, LossWeights, Mode,
    PinnPoint,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Set from the top-level run mode, not from the train table.
    #[serde(skip)]
    pub mode: Mode,
    /// Fixed Adam step size; when absent, 2e-5 for the narrow road and
    /// 1e-4 otherwise.
    pub learning_rate: Option<f64>,
    pub batch_supervised: usize,
    pub batch_pinn: usize,
    pub batch_boundary: usize,
    /// HNO supervised-only phase.
    pub pretrain_iters: usize,
    /// HNO full-loss phase with the expanding time window.
    pub refine_iters: usize,
    /// SNO supervised iterations.
    pub sno_iters: usize,
    pub weights: LossWeights,
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Lower clamp that keeps adaptive slopes positive.
    pub slope_min: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Fixed multiplier on the operator output; when absent, the mean
    /// absolute supervised value.
    pub output_scale: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Hno,
            learning_rate: None,
            batch_supervised: 256,
            batch_pinn: 256,
            batch_boundary: 256,
            pretrain_iters: 100_000,
            refine_iters: 200_000,
            sno_iters: 200_000,
            weights: LossWeights::default(),
            checkpoint_every: 10_000,
            log_every: 100,
            slope_min: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            output_scale: None,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate_for(&self, case: CaseId) -> f64 {
        self.learning_rate.unwrap_or(match case {
            CaseId::NarrowRoad => 2e-5,
            _ => 1e-4,
        })
    }

    pub fn total_iters(&self) -> usize {
        match self.mode {
            Mode::Hno => self.pretrain_iters + self.refine_iters,
            Mode::Sno => self.sno_iters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_supervised == 0 || self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::Config("batch sizes and intervals must be positive".into()));
        }
        if self.mode == Mode::Hno && self.refine_iters > 0 && (self.batch_pinn == 0 || self.batch_boundary == 0) {
            return Err(Error::Config(
                "HNO refinement needs positive PDE and boundary batch sizes".into(),
            ));
        }
        if self.learning_rate.is_some_and(|lr| !(lr > 0.0)) || self.output_scale.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::Config("learning rate and output scale must be positive".into()));
        }
        Ok(())
    }

    /// Time window `[t_lo, T]` at a global iteration. Pretraining and SNO
    /// report the full horizon.
    pub fn window(&self, iter: usize, horizon: f64) -> (f64, f64) {
        if self.mode == Mode::Hno && iter >= self.pretrain_iters && self.refine_iters > 0 {
            let r = (iter - self.pretrain_iters) as f64 / self.refine_iters as f64;
            (horizon * (1.0 - r).max(0.0), horizon)
        } else {
            (0.0, horizon)
        }
    }
}

/// Uniform absolute-order joint states over the PDE-point boxes.
pub fn sample_pinn_pool(spec: &GameSpec, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = substream(seed, "pinn_pool", &[]);
    (0..n).map(|_| spec.sample_hj(&mut rng)).collect()
}

/// Same distribution as the PDE pool on its own substream. Training reuses
/// the PDE pool at `t = T`; this exists for callers that want them apart.
pub fn sample_boundary_pool(spec: &GameSpec, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = substream(seed, "boundary_pool", &[]);
    (0..n).map(|_| spec.sample_hj(&mut rng)).collect()
}

pub struct TrainData<'a> {
    pub supervised: &'a [SupervisedSample],
    pub pinn_pool: &'a [Vec<f64>],
    pub type_pairs: &'a [TypePair],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub phase: String,
    pub terms: LossTerms,
    pub t_lo: f64,
    pub t_hi: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub operator: Operator,
    pub log: Vec<LogRecord>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    fn update(&mut self, params: &mut [f64], g: &[f64], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let b1 = cfg.adam_beta1;
        let b2 = cfg.adam_beta2;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.adam_eps);
        }
    }
}

/// Draws the batches of one iteration from its own substream.
pub fn draw_batches<'a>(
    spec: &GameSpec,
    cfg: &TrainConfig,
    data: &TrainData<'a>,
    seed: u64,
    iter: usize,
) -> Batches<'a> {
    let mut rng = substream(seed, "train", &[iter as u64]);
    let mut b = Batches::default();
    let ns = data.supervised.len();
    if ns > 0 {
        b.supervised = (0..cfg.batch_supervised)
            .map(|_| &data.supervised[rng.random_range(0..ns)])
            .collect();
    }
    let full = cfg.mode == Mode::Hno && iter >= cfg.pretrain_iters;
    if full && !data.pinn_pool.is_empty() {
        let (lo, hi) = cfg.window(iter, spec.horizon);
        let np = data.pinn_pool.len();
        let npairs = data.type_pairs.len();
        b.pinn = (0..cfg.batch_pinn)
            .map(|_| PinnPoint {
                joint_state: data.pinn_pool[rng.random_range(0..np)].clone(),
                t: if hi > lo { rng.random_range(lo..=hi) } else { hi },
                type_pair: data.type_pairs[rng.random_range(0..npairs)],
            })
            .collect();
        b.boundary = (0..cfg.batch_boundary)
            .map(|_| BoundaryPoint {
                joint_state: data.pinn_pool[rng.random_range(0..np)].clone(),
                type_pair: data.type_pairs[rng.random_range(0..npairs)],
            })
            .collect();
    }
    b
}

fn checkpoint_path(dir: &Path, iter: usize) -> PathBuf {
    dir.join(format!("ckpt_{iter:08}.bin"))
}

/// Latest periodic checkpoint in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(usize, PathBuf)>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best = None;
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let name = p.file_name().and_then(|s| s.to_str()).unwrap_or("");
        if let Some(it) = name
            .strip_prefix("ckpt_")
            .and_then(|s| s.strip_suffix(".bin"))
            .and_then(|s| s.parse::<usize>().ok())
        {
            if best.as_ref().is_none_or(|(b, _)| it > *b) {
                best = Some((it, p));
            }
        }
    }
    Ok(best)
}

#[derive(Serialize, Deserialize)]
struct TrainState {
    iteration: usize,
    adam_step: u64,
    mode: Mode,
    seed: u64,
}

fn read_log(path: &Path, upto: usize) -> Result<Vec<LogRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: LogRecord = serde_json::from_str(line)?;
        if r.iter < upto {
            out.push(r);
        }
    }
    Ok(out)
}

fn write_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut s = String::new();
    for r in log {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Trains an operator. With `out_dir`, writes periodic checkpoints, a
/// JSON-lines log and `final.bin`, and resumes from the latest checkpoint
/// found there. Iteration `k` always draws its batches from substream
/// `("train", k)`, so a resumed run continues exactly as an uninterrupted
/// one would.
pub fn train(
    spec: &GameSpec,
    op_cfg: &OperatorConfig,
    cfg: &TrainConfig,
    data: &TrainData,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.supervised.is_empty() {
        return Err(Error::Config("training needs supervised samples".into()));
    }
    if cfg.mode == Mode::Hno && cfg.refine_iters > 0 && (data.pinn_pool.is_empty() || data.type_pairs.is_empty()) {
        return Err(Error::Config(
            "HNO refinement needs a PDE-point pool and type pairs".into(),
        ));
    }
    let lr = cfg.learning_rate_for(spec.case);
    let total = cfg.total_iters();

    let mut start = 0;
    let mut log = Vec::new();
    let (mut op, mut adam) = match out_dir.map(latest_checkpoint).transpose()?.flatten() {
        Some((it, path)) => {
            let ck = load_checkpoint(&path)?;
            let st: TrainState = serde_json::from_value(ck.extra.clone())
                .map_err(|e| Error::Artifact(format!("checkpoint {} has no training state: {e}", path.display())))?;
            if st.mode != cfg.mode || st.seed != seed || ck.operator.spec != *spec {
                return Err(Error::Artifact(format!(
                    "checkpoint {} belongs to a different run (mode, seed or game)",
                    path.display()
                )));
            }
            info!("resuming from {} at iteration {it}", path.display());
            start = st.iteration;
            log = read_log(&out_dir.unwrap().join("train_log.jsonl"), start)?;
            let m = ck.blocks.get("adam_m").cloned();
            let v = ck.blocks.get("adam_v").cloned();
            let (Some(m), Some(v)) = (m, v) else {
                return Err(Error::Artifact("checkpoint lacks optimizer state".into()));
            };
            (
                ck.operator,
                Adam {
                    m,
                    v,
                    step: st.adam_step,
                },
            )
        }
        None => {
            let mut rng = substream(seed, "init", &[]);
            let mut op = Operator::new(spec, op_cfg, &mut rng)?;
            op.output_scale = cfg.output_scale.unwrap_or_else(|| {
                let m = data.supervised.iter().map(|s| s.value.abs()).sum::<f64>() / data.supervised.len() as f64;
                if m > 0.0 {
                    m
                } else {
                    1.0
                }
            });
            let n = op.n_params();
            (
                op,
                Adam {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    step: 0,
                },
            )
        }
    };
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let save = |op: &Operator, adam: &Adam, iter: usize, path: &Path| -> Result<()> {
        let st = TrainState {
            iteration: iter,
            adam_step: adam.step,
            mode: cfg.mode,
            seed,
        };
        save_checkpoint(
            path,
            op,
            &[("adam_m", &adam.m), ("adam_v", &adam.v)],
            &serde_json::to_value(st)?,
        )
    };

    let clock = Instant::now();
    let mut last_good: Option<PathBuf> = out_dir.and_then(|d| latest_checkpoint(d).ok().flatten().map(|x| x.1));
    let mut grad = vec![0.0; op.n_params()];
    let slopes = op.slope_range();
    for iter in start..total {
        let batches = draw_batches(spec, cfg, data, seed, iter);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let terms = match loss_and_grad(&op, &batches, &cfg.weights, cfg.mode, Some(&mut grad)) {
            Ok(t) => t,
            Err(Error::Numerical(_)) => {
                return Err(Error::Diverged {
                    iter,
                    last_good: last_good.clone(),
                })
            }
            Err(e) => return Err(e),
        };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                iter,
                last_good: last_good.clone(),
            });
        }
        if iter % cfg.log_every == 0 || iter + 1 == total {
            let (t_lo, t_hi) = cfg.window(iter, spec.horizon);
            let phase = match cfg.mode {
                Mode::Sno => "sno",
                Mode::Hno if iter < cfg.pretrain_iters => "pretrain",
                Mode::Hno => "refine",
            };
            log.push(LogRecord {
                iter,
                phase: phase.into(),
                terms,
                t_lo,
                t_hi,
                wall_time: clock.elapsed().as_secs_f64(),
            });
        }
        adam.update(&mut op.params, &grad, lr, cfg);
        for i in slopes.clone() {
            op.params[i] = op.params[i].max(cfg.slope_min);
        }
        if let Some(d) = out_dir {
            if (iter + 1) % cfg.checkpoint_every == 0 {
                let p = checkpoint_path(d, iter + 1);
                save(&op, &adam, iter + 1, &p)?;
                write_log(&d.join("train_log.jsonl"), &log)?;
                last_good = Some(p);
            }
        }
    }
    op.check_finite()?;
    if let Some(d) = out_dir {
        save(&op, &adam, total, &d.join("final.bin"))?;
        write_log(&d.join("train_log.jsonl"), &log)?;
    }
    Ok(TrainOutcome { operator: op, log })
}

/// Log records as JSON lines (for callers that keep the log in memory).
pub fn log_to_jsonl(log: &[LogRecord], mut w: impl Write) -> Result<()> {
    for r in log {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io("<log>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
