//! Equilibrium trajectories from the coupled Pontryagin boundary-value
//! problem, and the supervised dataset built from them.

pub mod dataset;
pub mod lqr;
pub mod pmp;
pub mod rk;
mod shooting;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::game::{swap_players, Control, GameModel, GameSpec, Slot, TypePair};

pub use dataset::{generate_dataset, Dataset, DatasetReport};

/// Tag recorded with every dataset and checkpoint. Values are costs-to-go;
/// stored costates are their joint-state gradients, the negation of the
/// Pontryagin multipliers.
pub const SIGN_CONVENTION: &str = "cost_to_go/grad_value";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Maximum scaled boundary residual.
    pub tol: f64,
    /// Continuation restarts after the direct attempt.
    pub max_restarts: usize,
    pub segments: usize,
    pub atol: f64,
    pub rtol: f64,
    pub max_newton_iters: usize,
    /// First rung of the penalty ladder.
    pub penalty_start: f64,
    pub penalty_steps: usize,
    /// Output grid step, seconds.
    pub dt: f64,
    /// Dataset generation aborts above this failure fraction.
    pub max_fail_fraction: f64,
    /// Attempts per requested trajectory before giving up.
    pub max_attempts: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-6,
            max_restarts: 2,
            segments: 8,
            atol: 1e-8,
            rtol: 1e-8,
            max_newton_iters: 40,
            penalty_start: 1e2,
            penalty_steps: 3,
            dt: 0.1,
            max_fail_fraction: 0.5,
            max_attempts: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveFailure {
    pub reason: String,
    pub attempts: usize,
    pub residual: f64,
}

impl SolveFailure {
    pub fn new(reason: impl Into<String>, attempts: usize, residual: f64) -> Self {
        SolveFailure {
            reason: reason.into(),
            attempts,
            residual,
        }
    }
}

impl fmt::Display for SolveFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BVP solve failed after {} attempt(s): {}",
            self.attempts, self.reason
        )
    }
}

impl std::error::Error for SolveFailure {}

/// A converged equilibrium path on the output grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// Absolute-order joint states `[x1, x2]`.
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<[Control; 2]>,
    /// Per player, the gradient of its cost-to-go with respect to the
    /// absolute-order joint state.
    pub costates: Vec<[Vec<f64>; 2]>,
    /// Per player cost-to-go `V_i(t)`.
    pub cost_to_go: Vec<[f64; 2]>,
    /// Absolute-order types (first player's type first).
    pub type_pair: TypePair,
    pub converged: bool,
    pub solver_residual: f64,
}

/// One ego-ordered supervised sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedSample {
    pub joint_state: Vec<f64>,
    pub t: f64,
    pub value: f64,
    /// Gradient of the value w.r.t. the ego-first joint state.
    pub costate: Vec<f64>,
    pub type_pair: TypePair,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Two ego-ordered samples per node, first player then second.
    pub fn samples(&self) -> Vec<SupervisedSample> {
        let mut out = Vec::with_capacity(2 * self.len());
        for k in 0..self.len() {
            let x = &self.states[k];
            out.push(SupervisedSample {
                joint_state: x.clone(),
                t: self.times[k],
                value: self.cost_to_go[k][0],
                costate: self.costates[k][0].clone(),
                type_pair: self.type_pair,
            });
            out.push(SupervisedSample {
                joint_state: swap_players(x),
                t: self.times[k],
                value: self.cost_to_go[k][1],
                costate: swap_players(&self.costates[k][1]),
                type_pair: self.type_pair.swapped(),
            });
        }
        out
    }

    pub fn min_distance(&self, game: &GameSpec) -> f64 {
        self.states
            .iter()
            .map(|x| game.distance(x))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_penalty(&self, game: &GameSpec) -> f64 {
        self.states
            .iter()
            .map(|x| game.penalty(self.type_pair, x))
            .fold(0.0, f64::max)
    }
}

/// Solve the coupled Pontryagin BVP from `x0` (absolute order) at `t0`.
pub fn solve_bvp<G: GameModel + Clone>(
    game: &G,
    tp: TypePair,
    x0: &[f64],
    t0: f64,
    cfg: &SolverConfig,
) -> Result<Trajectory, SolveFailure> {
    let n = game.state_dim();
    if x0.len() != 2 * n {
        return Err(SolveFailure::new(
            format!("initial state has length {}, expected {}", x0.len(), 2 * n),
            0,
            f64::NAN,
        ));
    }
    if !(0.0..=game.horizon()).contains(&t0) {
        return Err(SolveFailure::new(
            format!("start time {t0} outside [0, T]"),
            0,
            f64::NAN,
        ));
    }
    let sol = shooting::solve_nodes(game, tp, x0, t0, cfg)?;
    let sys = pmp::PmpSystem::new(game, tp);
    let core = sys.core_len();
    let last = sol.nodes.last().expect("at least one node");
    let terminal = [
        shooting::terminal_gradient(game, &last[..n], Slot::First).0,
        shooting::terminal_gradient(game, &last[n..2 * n], Slot::Second).0,
    ];
    let total = [last[core], last[core + 1]];

    let mut traj = Trajectory {
        times: sol.times.clone(),
        states: Vec::with_capacity(sol.nodes.len()),
        controls: Vec::with_capacity(sol.nodes.len()),
        costates: Vec::with_capacity(sol.nodes.len()),
        cost_to_go: Vec::with_capacity(sol.nodes.len()),
        type_pair: tp,
        converged: true,
        solver_residual: sol.residual,
    };
    for y in &sol.nodes {
        traj.states.push(sys.state(y).to_vec());
        let u = sys
            .controls(y)
            .map_err(|e| SolveFailure::new(e.to_string(), 1, sol.residual))?;
        traj.controls.push(u);
        let grad = |slot| sys.costate(y, slot).iter().map(|v| -v).collect::<Vec<f64>>();
        traj.costates.push([grad(Slot::First), grad(Slot::Second)]);
        traj.cost_to_go
            .push([total[0] - y[core] + terminal[0], total[1] - y[core + 1] + terminal[1]]);
    }
    Ok(traj)
}

/// Central difference of each player's cost-to-go at node `k` with step
/// `delta`, taken by integrating the Pontryagin system a short way either
/// side of the node. Unlike differencing on the output grid, this resolves
/// penalty spikes shorter than the grid step.
pub fn value_rate<G: GameModel>(game: &G, traj: &Trajectory, k: usize, delta: f64) -> crate::Result<[f64; 2]> {
    let sys = pmp::PmpSystem::new(game, traj.type_pair);
    let n = sys.n();
    let core = sys.core_len();
    let mut y = vec![0.0; sys.aug_len()];
    y[..2 * n].copy_from_slice(&traj.states[k]);
    for p in 0..2 {
        for (dst, g) in y[2 * n * (1 + p)..2 * n * (2 + p)].iter_mut().zip(&traj.costates[k][p]) {
            *dst = -g;
        }
    }
    let substeps = 16;
    let advance = |h: f64| -> crate::Result<Vec<f64>> {
        let mut z = y.clone();
        let mut err = None;
        for _ in 0..substeps {
            z = rk::rk4_step(
                |a: &[f64], d: &mut [f64]| {
                    if let Err(e) = sys.rhs(a, d) {
                        err = Some(e);
                    }
                },
                &z,
                h / substeps as f64,
            );
        }
        match err {
            Some(e) => Err(e),
            None => Ok(z),
        }
    };
    let fwd = advance(delta)?;
    let bwd = advance(-delta)?;
    // V(t) = const − J(t), so dV/dt = −dJ/dt.
    Ok([
        -(fwd[core] - bwd[core]) / (2.0 * delta),
        -(fwd[core + 1] - bwd[core + 1]) / (2.0 * delta),
    ])
}

/// Instantaneous cost `l_i + c_i` of each player at node `k`.
pub fn running_cost(game: &GameSpec, traj: &Trajectory, k: usize) -> [f64; 2] {
    let x = &traj.states[k];
    [
        game.running_loss(&traj.controls[k][0]) + game.penalty(traj.type_pair, x),
        game.running_loss(&traj.controls[k][1]) + game.penalty(traj.type_pair.swapped(), &swap_players(x)),
    ]
}

#[cfg(test)]
mod tests;
