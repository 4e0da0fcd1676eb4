//! Damped-Newton multiple shooting for the coupled Pontryagin BVP.
//!
//! Unknowns are the initial costates of both players plus the full
//! `[x, λ1, λ2]` vector at every interior segment boundary. Residuals are
//! segment continuity and the terminal costate condition. The Jacobian is
//! built segment by segment with forward differences of the fixed-mesh
//! replay of each segment, so it is the exact derivative of a smooth map.

use nalgebra::{DMatrix, DVector};

use super::pmp::PmpSystem;
use super::rk::{self, Mesh, Tolerances};
use super::{SolveFailure, SolverConfig};
use crate::game::{GameModel, Slot, TypePair};

/// Converged node values of one solve: the augmented vector at every grid
/// node, with running costs accumulated from the first node.
pub(crate) struct NodeSolution {
    pub times: Vec<f64>,
    pub nodes: Vec<Vec<f64>>,
    pub residual: f64,
}

struct Shooting<'a, G: GameModel> {
    sys: PmpSystem<'a, G>,
    times: Vec<f64>,
    /// Node indices of segment boundaries, `bounds[0] = 0`, last = K.
    bounds: Vec<usize>,
    x0: &'a [f64],
    tol: Tolerances,
}

impl<'a, G: GameModel> Shooting<'a, G> {
    fn new(game: &'a G, tp: TypePair, x0: &'a [f64], times: Vec<f64>, cfg: &SolverConfig) -> Self {
        let k = times.len() - 1;
        let m = cfg.segments.clamp(1, k.max(1));
        let bounds = (0..=m).map(|j| (j * k + m / 2) / m).collect::<Vec<_>>();
        Shooting {
            sys: PmpSystem::new(game, tp),
            times,
            bounds,
            x0,
            tol: Tolerances {
                atol: cfg.atol,
                rtol: cfg.rtol,
                ..Tolerances::default()
            },
        }
    }

    fn n(&self) -> usize {
        self.sys.n()
    }

    fn segments(&self) -> usize {
        self.bounds.len() - 1
    }

    fn seg_vars(&self, m: usize) -> (usize, usize) {
        let n = self.n();
        if m == 0 {
            (0, 4 * n)
        } else {
            (4 * n + (m - 1) * 6 * n, 6 * n)
        }
    }

    fn n_unknowns(&self) -> usize {
        4 * self.n() + (self.segments() - 1) * 6 * self.n()
    }

    fn seg_start(&self, m: usize, z: &[f64]) -> Vec<f64> {
        let n2 = 2 * self.n();
        let mut y = vec![0.0; self.sys.aug_len()];
        let (off, len) = self.seg_vars(m);
        if m == 0 {
            y[..n2].copy_from_slice(self.x0);
            y[n2..n2 + len].copy_from_slice(&z[off..off + len]);
        } else {
            y[..len].copy_from_slice(&z[off..off + len]);
        }
        y
    }

    fn seg_outputs(&self, m: usize) -> &[f64] {
        &self.times[self.bounds[m] + 1..=self.bounds[m + 1]]
    }

    fn rhs(&self) -> impl Fn(f64, &[f64], &mut [f64]) -> crate::Result<()> + '_ {
        move |_t, y, dy| self.sys.rhs(y, dy)
    }

    fn integrate_segment(&self, m: usize, y0: &[f64], mesh: Option<&Mesh>) -> crate::Result<(Vec<Vec<f64>>, Mesh)> {
        let f = self.rhs();
        let t0 = self.times[self.bounds[m]];
        match mesh {
            None => rk::integrate(&f, t0, y0, self.seg_outputs(m), self.tol),
            Some(mesh) => Ok((rk::replay(&f, t0, y0, mesh)?, mesh.clone())),
        }
    }

    /// Rows contributed by the end of segment `m`.
    fn seg_rows(&self, m: usize, end: &[f64], out: &mut [f64]) {
        let core = self.sys.core_len();
        if m + 1 < self.segments() {
            out[..core].copy_from_slice(&end[..core]);
        } else {
            self.sys.terminal_residual(end, out);
        }
    }

    fn row_range(&self, m: usize) -> (usize, usize) {
        let core = self.sys.core_len();
        if m + 1 < self.segments() {
            (m * core, core)
        } else {
            (m * core, 4 * self.n())
        }
    }

    /// Residual and scaled max-norm for unknowns `z`.
    fn residual(
        &self,
        z: &[f64],
        meshes: Option<&[Mesh]>,
    ) -> crate::Result<(Vec<f64>, f64, Vec<Mesh>, Vec<Vec<Vec<f64>>>)> {
        let nu = self.n_unknowns();
        let mut f = vec![0.0; nu];
        let mut scaled = 0.0f64;
        let mut used = Vec::with_capacity(self.segments());
        let mut all = Vec::with_capacity(self.segments());
        for m in 0..self.segments() {
            let y0 = self.seg_start(m, z);
            let (ys, mesh) = self.integrate_segment(m, &y0, meshes.map(|ms| &ms[m]))?;
            let end = ys.last().expect("segment has at least one output");
            let (r0, len) = self.row_range(m);
            self.seg_rows(m, end, &mut f[r0..r0 + len]);
            if m + 1 < self.segments() {
                let next = self.seg_start(m + 1, z);
                for i in 0..len {
                    f[r0 + i] -= next[i];
                }
            }
            for i in 0..len {
                let refv = if m + 1 < self.segments() { end[i] } else { 0.0 };
                scaled = scaled.max(f[r0 + i].abs() / (1.0 + refv.abs()));
            }
            used.push(mesh);
            all.push(ys);
        }
        Ok((f, scaled, used, all))
    }

    fn jacobian(&self, z: &[f64], meshes: &[Mesh], base_ends: &[Vec<f64>]) -> crate::Result<DMatrix<f64>> {
        let nu = self.n_unknowns();
        let core = self.sys.core_len();
        let mut jac = DMatrix::<f64>::zeros(nu, nu);
        let mut base_rows = vec![0.0; core];
        let mut rows = vec![0.0; core];
        for m in 0..self.segments() {
            let (c0, nvars) = self.seg_vars(m);
            let (r0, nrows) = self.row_range(m);
            self.seg_rows(m, &base_ends[m], &mut base_rows);
            let y0 = self.seg_start(m, z);
            let first = if m == 0 { 2 * self.n() } else { 0 };
            for j in 0..nvars {
                let mut yp = y0.clone();
                let h = 1e-7 * (1.0 + yp[first + j].abs());
                yp[first + j] += h;
                let ys = rk::replay(&self.rhs(), self.times[self.bounds[m]], &yp, &meshes[m])?;
                self.seg_rows(m, ys.last().expect("segment output"), &mut rows);
                for i in 0..nrows {
                    jac[(r0 + i, c0 + j)] = (rows[i] - base_rows[i]) / h;
                }
            }
            if m > 0 {
                let (pr0, _) = self.row_range(m - 1);
                for i in 0..core {
                    jac[(pr0 + i, c0 + i)] = -1.0;
                }
            }
        }
        Ok(jac)
    }

    /// Damped Newton from `z`. Returns the converged unknowns and residual.
    fn newton(&mut self, mut z: Vec<f64>, cfg: &SolverConfig) -> Result<(Vec<f64>, f64), String> {
        let merit = |f: &[f64]| f.iter().map(|v| v * v).sum::<f64>();
        for _ in 0..cfg.max_newton_iters {
            let (f, scaled, meshes, all) = self.residual(&z, None).map_err(|e| e.to_string())?;
            if scaled <= cfg.tol {
                return Ok((z, scaled));
            }
            let ends: Vec<Vec<f64>> = all.iter().map(|ys| ys.last().unwrap().clone()).collect();
            let jac = self.jacobian(&z, &meshes, &ends).map_err(|e| e.to_string())?;
            let rhs = DVector::from_iterator(f.len(), f.iter().map(|v| -v));
            let step = jac
                .lu()
                .solve(&rhs)
                .ok_or_else(|| "singular shooting Jacobian".to_string())?;
            if step.iter().any(|v| !v.is_finite()) {
                return Err("non-finite Newton step".into());
            }
            let phi0 = merit(&f);
            let mut alpha = 1.0;
            let mut accepted = false;
            while alpha >= 1.0 / 1024.0 {
                let trial: Vec<f64> = z.iter().zip(step.iter()).map(|(a, d)| a + alpha * d).collect();
                // Evaluate the trial adaptively: the replayed mesh may be too
                // coarse for a large step.
                if let Ok((ft, st, _, _)) = self.residual(&trial, None) {
                    let phi = merit(&ft);
                    if phi.is_finite() && (phi <= (1.0 - 1e-4 * alpha) * phi0 || st <= cfg.tol) {
                        z = trial;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                // Close to tolerance the residual is dominated by integration
                // error; tighten and keep going.
                if scaled < 1e3 * cfg.tol && self.tol.rtol > 1e-12 {
                    self.tol.atol *= 1e-2;
                    self.tol.rtol *= 1e-2;
                    continue;
                }
                return Err(format!("line search failed at residual {scaled:.3e}"));
            }
        }
        let (_, scaled, _, _) = self.residual(&z, None).map_err(|e| e.to_string())?;
        if scaled <= cfg.tol {
            Ok((z, scaled))
        } else {
            Err(format!(
                "no convergence in {} Newton iterations (residual {scaled:.3e})",
                cfg.max_newton_iters
            ))
        }
    }

    /// Unknown vector sampled from full node values (length K+1).
    fn pack(&self, nodes: &[Vec<f64>]) -> Vec<f64> {
        let n = self.n();
        let core = self.sys.core_len();
        let mut z = Vec::with_capacity(self.n_unknowns());
        z.extend_from_slice(&nodes[0][2 * n..core]);
        for m in 1..self.segments() {
            z.extend_from_slice(&nodes[self.bounds[m]][..core]);
        }
        z
    }

    /// Initial guess: states from a zero-costate rollout, zero costates.
    fn rollout_guess(&self) -> crate::Result<Vec<Vec<f64>>> {
        let n = self.n();
        let n2 = 2 * n;
        let game = self.sys.game;
        let zero = vec![0.0; n];
        let u = game.maximize(&zero)?.control;
        let f = |_t: f64, y: &[f64], dy: &mut [f64]| -> crate::Result<()> {
            game.dynamics(&y[..n], &u, &mut dy[..n]);
            game.dynamics(&y[n..n2], &u, &mut dy[n..n2]);
            Ok(())
        };
        let (ys, _) = rk::integrate(&f, self.times[0], self.x0, &self.times[1..], self.tol)?;
        let mut nodes = Vec::with_capacity(self.times.len());
        for x in std::iter::once(self.x0.to_vec()).chain(ys) {
            let mut y = vec![0.0; self.sys.aug_len()];
            y[..n2].copy_from_slice(&x);
            nodes.push(y);
        }
        Ok(nodes)
    }

    /// Adaptive pass over converged unknowns, returning node values with
    /// running costs accumulated from the first node.
    fn nodes(&self, z: &[f64], residual: f64) -> crate::Result<NodeSolution> {
        let core = self.sys.core_len();
        let mut nodes = vec![self.seg_start(0, z)];
        let mut acc = [0.0; 2];
        for m in 0..self.segments() {
            let y0 = self.seg_start(m, z);
            let (ys, _) = self.integrate_segment(m, &y0, None)?;
            for y in &ys {
                let mut v = y.clone();
                v[core] += acc[0];
                v[core + 1] += acc[1];
                nodes.push(v);
            }
            let last = nodes.last().expect("node");
            acc = [last[core], last[core + 1]];
        }
        Ok(NodeSolution {
            times: self.times.clone(),
            nodes,
            residual,
        })
    }
}

/// Geometric penalty ladder ending at `target`.
fn penalty_ladder(start: f64, target: f64, steps: usize) -> Vec<f64> {
    if steps <= 1 || target <= start || start <= 0.0 {
        return vec![target];
    }
    let r = (target / start).powf(1.0 / (steps - 1) as f64);
    let mut v: Vec<f64> = (0..steps).map(|i| start * r.powi(i as i32)).collect();
    *v.last_mut().unwrap() = target;
    v
}

fn grid(t0: f64, horizon: f64, dt: f64) -> Result<Vec<f64>, SolveFailure> {
    let span = horizon - t0;
    let k = (span / dt).round();
    if span < -1e-12 || (k * dt - span).abs() > 1e-9 {
        return Err(SolveFailure::new(
            format!("start time {t0} is not on the {dt} s grid ending at {horizon}"),
            0,
            f64::NAN,
        ));
    }
    let k = k as usize;
    let mut times: Vec<f64> = (0..=k).map(|i| horizon - (k - i) as f64 * dt).collect();
    times[0] = t0;
    Ok(times)
}

fn run_ladder<G: GameModel + Clone>(
    game: &G,
    tp: TypePair,
    x0: &[f64],
    times: &[f64],
    cfg: &SolverConfig,
    guess: Option<&[Vec<f64>]>,
    warm: bool,
) -> Result<NodeSolution, String> {
    let target = game.penalty_scale();
    let ladder = if warm {
        vec![target]
    } else {
        penalty_ladder(cfg.penalty_start, target, cfg.penalty_steps)
    };
    let mut g = game.clone();
    let mut z: Option<Vec<f64>> = None;
    let mut last = None;
    for b in ladder {
        g.set_penalty_scale(b);
        let mut sh = Shooting::new(&g, tp, x0, times.to_vec(), cfg);
        let init = match (&z, guess) {
            (Some(z), _) => z.clone(),
            (None, Some(nodes)) => sh.pack(nodes),
            (None, None) => sh.pack(&sh.rollout_guess().map_err(|e| e.to_string())?),
        };
        let (zz, res) = sh.newton(init, cfg)?;
        last = Some(sh.nodes(&zz, res).map_err(|e| e.to_string())?);
        z = Some(zz);
    }
    Ok(last.expect("ladder has at least one stage"))
}

/// Resample node values from one grid onto another by relative position.
fn stretch(prev: &[Vec<f64>], k_new: usize, x0: &[f64]) -> Vec<Vec<f64>> {
    let k_prev = prev.len() - 1;
    let mut out: Vec<Vec<f64>> = (0..=k_new)
        .map(|k| {
            let j = if k_new == 0 {
                0
            } else {
                ((k as f64 / k_new as f64) * k_prev as f64).round() as usize
            };
            prev[j.min(k_prev)].clone()
        })
        .collect();
    out[0][..x0.len()].copy_from_slice(x0);
    out
}

pub(crate) fn solve_nodes<G: GameModel + Clone>(
    game: &G,
    tp: TypePair,
    x0: &[f64],
    t0: f64,
    cfg: &SolverConfig,
) -> Result<NodeSolution, SolveFailure> {
    let horizon = game.horizon();
    let times = grid(t0, horizon, cfg.dt)?;
    let k = times.len() - 1;
    if k == 0 {
        // Degenerate: only the terminal node.
        let sys = PmpSystem::new(game, tp);
        let n = sys.n();
        let mut y = vec![0.0; sys.aug_len()];
        y[..2 * n].copy_from_slice(x0);
        let mut r = vec![0.0; 4 * n];
        sys.terminal_residual(&y, &mut r);
        // λ(T) = −∇g: the residual evaluated at λ = 0 is +∇g.
        for i in 0..4 * n {
            y[2 * n + i] = -r[i];
        }
        return Ok(NodeSolution {
            times,
            nodes: vec![y],
            residual: 0.0,
        });
    }

    let mut reasons = Vec::new();
    match run_ladder(game, tp, x0, &times, cfg, None, false) {
        Ok(sol) => return Ok(sol),
        Err(e) => reasons.push(format!("direct: {e}")),
    }
    for restart in 1..=cfg.max_restarts {
        let stages = 1usize << (restart + 1);
        let mut prev: Option<NodeSolution> = None;
        let mut failed = None;
        for s in 1..=stages {
            let ks = ((k * s) as f64 / stages as f64).round().max(1.0) as usize;
            if prev.as_ref().is_some_and(|p| p.times.len() - 1 >= ks) {
                continue;
            }
            let sub_times: Vec<f64> = if ks == k {
                times.clone()
            } else {
                (0..=ks).map(|i| horizon - (ks - i) as f64 * cfg.dt).collect()
            };
            let result = match &prev {
                None => run_ladder(game, tp, x0, &sub_times, cfg, None, false),
                Some(p) => {
                    let guess = stretch(&p.nodes, ks, x0);
                    run_ladder(game, tp, x0, &sub_times, cfg, Some(&guess), true)
                        .or_else(|_| run_ladder(game, tp, x0, &sub_times, cfg, Some(&guess), false))
                }
            };
            match result {
                Ok(sol) => prev = Some(sol),
                Err(e) => {
                    failed = Some(format!("horizon ladder {restart}, stage {s}/{stages}: {e}"));
                    break;
                }
            }
        }
        match (failed, prev) {
            (None, Some(sol)) if sol.times.len() == times.len() => return Ok(sol),
            (Some(e), _) => reasons.push(e),
            _ => reasons.push(format!("horizon ladder {restart} did not reach the full horizon")),
        }
    }
    Err(SolveFailure::new(reasons.join("; "), cfg.max_restarts + 1, f64::NAN))
}

/// Helper for callers that need the own-block terminal gradient.
pub(crate) fn terminal_gradient<G: GameModel + ?Sized>(game: &G, x: &[f64], slot: Slot) -> (f64, Vec<f64>) {
    let mut g = vec![0.0; game.state_dim()];
    let v = game.terminal_grad(x, slot, &mut g);
    (v, g)
}
