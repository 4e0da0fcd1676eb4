//! Closed-loop rollouts, collision counting and the type-grid heatmap.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bvp::dataset::solve_with_resampling;
use crate::bvp::{SolverConfig, Trajectory};
use crate::error::{Error, Result};
use crate::game::{swap_players, GameModel, GameSpec, TypePair, MAX_STATE_DIM};
use crate::operator::{Normalizer, Operator};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Euler,
    Rk4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub dt: f64,
    pub integrator: Integrator,
    /// Test initial states per grid cell.
    pub n_test: usize,
    /// Width fraction by which a state may leave the PDE-point boxes before
    /// the rollout is declared diverged.
    pub guard_band: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            dt: 0.1,
            integrator: Integrator::Rk4,
            n_test: 600,
            guard_band: 0.2,
        }
    }
}

impl RolloutConfig {
    /// Number of steps over the horizon; errors unless `dt` divides it.
    pub fn steps(&self, horizon: f64) -> Result<usize> {
        let r = horizon / self.dt;
        if !(self.dt > 0.0) || (r - r.round()).abs() > 1e-9 * r.max(1.0) || r.round() < 1.0 {
            return Err(Error::Config(format!(
                "rollout dt {} does not divide the horizon {horizon}",
                self.dt
            )));
        }
        if self.n_test == 0 || !(self.guard_band >= 0.0) {
            return Err(Error::Config(
                "rollout n_test must be positive and guard_band non-negative".into(),
            ));
        }
        Ok(r.round() as usize)
    }
}

/// Supplies each player's value gradient over its own ego-first joint
/// state; controls follow from the Hamiltonian maximizer.
pub trait Controller: Sync {
    fn value_gradients(&self, xj: &[f64], t: f64, tp: TypePair) -> Result<[Vec<f64>; 2]>;
}

impl Controller for Operator {
    fn value_gradients(&self, xj: &[f64], t: f64, tp: TypePair) -> Result<[Vec<f64>; 2]> {
        let a = self.value_and_gradient(xj, t, tp)?;
        let b = self.value_and_gradient(&swap_players(xj), t, tp.swapped())?;
        Ok([a.grad_x, b.grad_x])
    }
}

/// Replays stored costates of solved trajectories, cubic in time through
/// the four nearest grid nodes. Of several trajectories, the one whose state at the node at
/// or before `t` is nearest to the query is used, so one controller serves
/// a whole test set.
pub struct GroundTruthController<'a> {
    pub trajectories: Vec<&'a Trajectory>,
}

impl Controller for GroundTruthController<'_> {
    fn value_gradients(&self, xj: &[f64], t: f64, _tp: TypePair) -> Result<[Vec<f64>; 2]> {
        // Nearest path by its interpolated state at t, so queries between
        // nodes do not compare against a stale node.
        let mut best: Option<(f64, &Trajectory, Vec<(usize, f64)>)> = None;
        for tr in &self.trajectories {
            if tr.is_empty() || t < tr.times[0] - 1e-9 || t > tr.times[tr.len() - 1] + 1e-9 {
                continue;
            }
            let stencil = lagrange_stencil(&tr.times, t);
            let d: f64 = xj
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let s: f64 = stencil.iter().map(|&(a, w)| w * tr.states[a][i]).sum();
                    (s - x) * (s - x)
                })
                .sum();
            if best.as_ref().is_none_or(|b| d < b.0) {
                best = Some((d, tr, stencil));
            }
        }
        let (_, tr, stencil) =
            best.ok_or_else(|| Error::Config(format!("ground-truth controller does not cover t = {t}")))?;
        let blend = |p: usize| -> Vec<f64> {
            let mut v = vec![0.0; tr.costates[stencil[0].0][p].len()];
            for &(a, w) in &stencil {
                for (dst, g) in v.iter_mut().zip(&tr.costates[a][p]) {
                    *dst += w * g;
                }
            }
            v
        };
        Ok([blend(0), swap_players(&blend(1))])
    }
}

/// Cubic Lagrange nodes and weights around `t` (fewer on short paths).
fn lagrange_stencil(times: &[f64], t: f64) -> Vec<(usize, f64)> {
    let k = times.partition_point(|s| *s <= t + 1e-9).saturating_sub(1);
    let lo = k.saturating_sub(1).min(times.len().saturating_sub(4));
    let nodes: Vec<usize> = (lo..(lo + 4).min(times.len())).collect();
    nodes
        .iter()
        .map(|&a| {
            let w = nodes
                .iter()
                .filter(|&&b| b != a)
                .map(|&b| (t - times[b]) / (times[a] - times[b]))
                .product();
            (a, w)
        })
        .collect()
}

/// Index of the first state at or below the collision threshold.
pub fn first_collision(spec: &GameSpec, tp: TypePair, states: &[Vec<f64>]) -> Option<usize> {
    let eta = spec.collision_threshold(tp);
    states.iter().position(|x| spec.distance(x) <= eta)
}

/// Per-step controls of both players from the controller, absolute order.
fn controls(spec: &GameSpec, ctrl: &dyn Controller, xj: &[f64], t: f64, tp: TypePair) -> Result<[Vec<f64>; 2]> {
    let n = spec.state_dim();
    let g = ctrl.value_gradients(xj, t, tp)?;
    let mut out: [Vec<f64>; 2] = Default::default();
    for i in 0..2 {
        let mut lam = [0.0; MAX_STATE_DIM];
        for j in 0..n {
            lam[j] = -g[i][j];
        }
        out[i] = spec.maximize(&lam[..n])?.control.to_vec();
    }
    Ok(out)
}

fn joint_rate(spec: &GameSpec, x: &[f64], u: &[Vec<f64>; 2], out: &mut [f64]) {
    let n = spec.state_dim();
    spec.dynamics(&x[..n], &u[0], &mut out[..n]);
    spec.dynamics(&x[n..], &u[1], &mut out[n..]);
}

fn step(spec: &GameSpec, x: &[f64], u: &[Vec<f64>; 2], h: f64, integrator: Integrator) -> Vec<f64> {
    let d = x.len();
    let mut k1 = vec![0.0; d];
    joint_rate(spec, x, u, &mut k1);
    match integrator {
        Integrator::Euler => x.iter().zip(&k1).map(|(a, b)| a + h * b).collect(),
        Integrator::Rk4 => {
            let stage = |k: &[f64], c: f64| -> Vec<f64> { x.iter().zip(k).map(|(a, b)| a + c * b).collect() };
            let mut k2 = vec![0.0; d];
            joint_rate(spec, &stage(&k1, 0.5 * h), u, &mut k2);
            let mut k3 = vec![0.0; d];
            joint_rate(spec, &stage(&k2, 0.5 * h), u, &mut k3);
            let mut k4 = vec![0.0; d];
            joint_rate(spec, &stage(&k3, h), u, &mut k4);
            (0..d)
                .map(|j| x[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]))
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Distance at or below the threshold at some visited node.
    pub collided: bool,
    /// Left the guard band (or the controller failed); counts as unsafe.
    pub diverged: bool,
    pub min_distance: f64,
}

impl Rollout {
    pub fn is_unsafe(&self) -> bool {
        self.collided || self.diverged
    }
}

/// Drives both players with their controller-derived controls from `x0`
/// (absolute order, `t = 0`), holding controls constant over each step.
pub fn closed_loop_rollout(
    ctrl: &dyn Controller,
    spec: &GameSpec,
    tp: TypePair,
    x0: &[f64],
    cfg: &RolloutConfig,
) -> Result<Rollout> {
    let steps = cfg.steps(spec.horizon)?;
    if x0.len() != spec.joint_dim() {
        return Err(Error::Config(format!(
            "initial state has {} entries, expected {}",
            x0.len(),
            spec.joint_dim()
        )));
    }
    let guard = Normalizer::for_spec(spec);
    let eta = spec.collision_threshold(tp);
    let mut r = Rollout {
        times: vec![0.0],
        states: vec![x0.to_vec()],
        collided: false,
        diverged: false,
        min_distance: spec.distance(x0),
    };
    r.collided = r.min_distance <= eta;
    let mut x = x0.to_vec();
    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        let u = match controls(spec, ctrl, &x, t, tp) {
            Ok(u) => u,
            Err(Error::Numerical(_)) => {
                r.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        x = step(spec, &x, &u, cfg.dt, cfg.integrator);
        let t1 = (k + 1) as f64 * cfg.dt;
        let mut probe = x.clone();
        probe.push(t1);
        if x.iter().any(|v| !v.is_finite()) || !guard.contains_inflated(&probe, cfg.guard_band) {
            r.diverged = true;
            break;
        }
        let d = spec.distance(&x);
        r.min_distance = r.min_distance.min(d);
        r.collided |= d <= eta;
        r.times.push(t1);
        r.states.push(x.clone());
    }
    Ok(r)
}

/// Collision-free ground-truth paths for one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSet {
    pub type_pair: TypePair,
    pub trajectories: Vec<Trajectory>,
}

impl TestSet {
    pub fn initial_states(&self) -> Vec<Vec<f64>> {
        self.trajectories.iter().map(|t| t.states[0].clone()).collect()
    }
}

/// Attempts per test-set index. Large thresholds on the narrow road reject
/// most head-on starts, so this is well above the dataset budget.
pub const TEST_SET_MAX_ATTEMPTS: usize = 400;

/// Lowest accepted fraction of solved-and-filtered attempts over a cell.
pub const MIN_TEST_ACCEPTANCE: f64 = 0.01;

/// `n` initial states whose equilibrium paths stay farther apart than the
/// threshold, each index on its own substream of `(seed, "test_set", cell)`.
/// Fails when some index exhausts its attempts or when the cell's overall
/// acceptance falls below [`MIN_TEST_ACCEPTANCE`].
pub fn build_test_set(spec: &GameSpec, tp: TypePair, n: usize, seed: u64, cfg: &SolverConfig) -> Result<TestSet> {
    if n == 0 {
        return Err(Error::Config("test set size must be at least 1".into()));
    }
    let eta = spec.collision_threshold(tp);
    let key = tp.key();
    let cfg = &SolverConfig {
        max_attempts: cfg.max_attempts.max(TEST_SET_MAX_ATTEMPTS),
        ..cfg.clone()
    };
    let results: Vec<_> = (0..n)
        .into_par_iter()
        .map(|i| {
            solve_with_resampling(spec, tp, seed, "test_set", &[key.0, key.1, i as u64], cfg, |tr| {
                tr.min_distance(spec) > eta
            })
        })
        .collect();
    let mut trajectories = Vec::with_capacity(n);
    let mut attempts = 0;
    let mut rejected = 0;
    let mut exhausted = None;
    for (i, (tr, failures, a)) in results.into_iter().enumerate() {
        attempts += a;
        rejected += failures.iter().filter(|f| f.reason == "rejected by filter").count();
        match tr {
            Some(t) => trajectories.push(t),
            None => exhausted = exhausted.or(Some(i)),
        }
    }
    let acceptance = trajectories.len() as f64 / attempts as f64;
    if exhausted.is_some() || acceptance < MIN_TEST_ACCEPTANCE {
        let what = exhausted.map_or_else(
            || format!("acceptance {acceptance:.4} below {MIN_TEST_ACCEPTANCE}"),
            |i| {
                format!(
                    "index {i} found no collision-free path in {} attempts",
                    cfg.max_attempts
                )
            },
        );
        return Err(Error::Numerical(format!(
            "test set {tp}: {what}; {attempts} attempts, {} accepted, {rejected} rejected by the filter, {} unsolved",
            trajectories.len(),
            attempts - trajectories.len() - rejected
        )));
    }
    log::info!("test set {tp}: {n} states accepted from {attempts} attempts");
    Ok(TestSet {
        type_pair: tp,
        trajectories,
    })
}

/// The integer type grid `{1..5}²`, row-major in `θ1`.
pub fn default_grid() -> Vec<TypePair> {
    let mut g = Vec::with_capacity(25);
    for a in 1..=5 {
        for b in 1..=5 {
            g.push(TypePair::new(a as f64, b as f64).unwrap());
        }
    }
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub model: String,
    pub theta1: f64,
    pub theta2: f64,
    pub seen: bool,
    pub n_gt: usize,
    pub n_pred: usize,
    /// `n_pred / n_gt`.
    pub col_rate: f64,
}

impl CellReport {
    pub fn percent(&self) -> f64 {
        100.0 * self.col_rate
    }
}

/// Rolls every model out from every test state of every cell. Cells follow
/// the order of `test_sets`, models the order of `models`.
pub fn heatmap(
    models: &[(&str, &dyn Controller)],
    spec: &GameSpec,
    test_sets: &[TestSet],
    seen: &[TypePair],
    cfg: &RolloutConfig,
) -> Result<Vec<CellReport>> {
    let mut out = Vec::new();
    for (name, ctrl) in models {
        for ts in test_sets {
            if ts.trajectories.is_empty() {
                return Err(Error::Config(format!("empty test set for {}", ts.type_pair)));
            }
            let flags: Vec<bool> = ts
                .trajectories
                .par_iter()
                .map(|tr| Ok(closed_loop_rollout(*ctrl, spec, ts.type_pair, &tr.states[0], cfg)?.is_unsafe()))
                .collect::<Result<_>>()?;
            let n_pred = flags.iter().filter(|f| **f).count();
            let [t1, t2] = ts.type_pair.as_array();
            out.push(CellReport {
                model: name.to_string(),
                theta1: t1,
                theta2: t2,
                seen: seen.contains(&ts.type_pair),
                n_gt: flags.len(),
                n_pred,
                col_rate: n_pred as f64 / flags.len() as f64,
            });
        }
    }
    Ok(out)
}

pub fn write_report_csv(path: &Path, cells: &[CellReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))?;
    w.write_record(["model", "theta1", "theta2", "seen_flag", "n_gt", "n_pred", "col_rate"])
        .and_then(|_| {
            for c in cells {
                w.write_record([
                    c.model.clone(),
                    c.theta1.to_string(),
                    c.theta2.to_string(),
                    (c.seen as u8).to_string(),
                    c.n_gt.to_string(),
                    c.n_pred.to_string(),
                    c.col_rate.to_string(),
                ])?;
            }
            w.flush().map_err(csv::Error::from)
        })
        .map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))
}

pub fn read_report_csv(path: &Path) -> Result<Vec<CellReport>> {
    let bad = |e: &dyn fmt::Display| Error::Artifact(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(&e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(&e))?;
        if rec.len() != 7 {
            return Err(bad(&format!("expected 7 columns, found {}", rec.len())));
        }
        let f = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(&e));
        let u = |i: usize| rec[i].parse::<usize>().map_err(|e| bad(&e));
        let cell = CellReport {
            model: rec[0].to_string(),
            theta1: f(1)?,
            theta2: f(2)?,
            seen: u(3)? != 0,
            n_gt: u(4)?,
            n_pred: u(5)?,
            col_rate: f(6)?,
        };
        if cell.n_gt == 0 || cell.n_pred > cell.n_gt {
            return Err(bad(&"cell counts out of range"));
        }
        out.push(cell);
    }
    Ok(out)
}

/// Matrix form of one model's cells: `percent[i][j]` for
/// `theta1 = thetas1[i]`, `theta2 = thetas2[j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMatrix {
    pub model: String,
    pub thetas1: Vec<f64>,
    pub thetas2: Vec<f64>,
    pub percent: Vec<Vec<Option<f64>>>,
    pub seen: Vec<[f64; 2]>,
}

fn sorted_unique(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// One matrix per model, in order of first appearance.
pub fn heatmap_matrices(cells: &[CellReport]) -> Vec<HeatmapMatrix> {
    let mut models: Vec<&str> = Vec::new();
    for c in cells {
        if !models.contains(&c.model.as_str()) {
            models.push(&c.model);
        }
    }
    models
        .into_iter()
        .map(|m| {
            let own: Vec<&CellReport> = cells.iter().filter(|c| c.model == m).collect();
            let thetas1 = sorted_unique(own.iter().map(|c| c.theta1).collect());
            let thetas2 = sorted_unique(own.iter().map(|c| c.theta2).collect());
            let mut percent = vec![vec![None; thetas2.len()]; thetas1.len()];
            let mut seen = Vec::new();
            for c in &own {
                let i = thetas1.iter().position(|t| *t == c.theta1).unwrap();
                let j = thetas2.iter().position(|t| *t == c.theta2).unwrap();
                percent[i][j] = Some(c.percent());
                if c.seen {
                    seen.push([c.theta1, c.theta2]);
                }
            }
            HeatmapMatrix {
                model: m.to_string(),
                thetas1,
                thetas2,
                percent,
                seen,
            }
        })
        .collect()
}
