//! HJI residual and the hybrid loss with its parameter gradient.

use serde::{Deserialize, Serialize};

use crate::bvp::SupervisedSample;
use crate::error::{Error, Result};
use crate::game::{swap_players, GameModel, GameSpec, Maximizer, Slot, TypePair, MAX_STATE_DIM};
use crate::operator::{BranchEval, Operator, PointEval};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Hno,
    Sno,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Hno => "hno",
            Mode::Sno => "sno",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hno" => Ok(Mode::Hno),
            "sno" => Ok(Mode::Sno),
            _ => Err(Error::Config(format!("unknown mode '{s}' (hno, sno)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            c1: 100.0,
            c2: 100.0,
            c3: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.c1 > 0.0 && self.c2 > 0.0 && self.c3 > 0.0 {
            Ok(())
        } else {
            Err(Error::Config("loss weights c1, c2, c3 must be positive".into()))
        }
    }
}

/// A PDE point: absolute-order joint state, time, absolute-order types.
#[derive(Clone, Debug, PartialEq)]
pub struct PinnPoint {
    pub joint_state: Vec<f64>,
    pub t: f64,
    pub type_pair: TypePair,
}

/// A terminal point (t = T implied).
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryPoint {
    pub joint_state: Vec<f64>,
    pub type_pair: TypePair,
}

#[derive(Clone, Debug, Default)]
pub struct Batches<'a> {
    pub supervised: Vec<&'a SupervisedSample>,
    pub pinn: Vec<PinnPoint>,
    pub boundary: Vec<BoundaryPoint>,
}

/// Unweighted term means and the weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// Σ over players of mean |HJI residual|.
    pub hji: f64,
    /// Σ over players of mean |ϑ̂(x, T) − g|.
    pub boundary: f64,
    /// Mean |ϑ̂ − V| over supervised samples.
    pub value: f64,
    /// Mean ‖∇ϑ̂ − ∇V‖₁ over supervised samples.
    pub costate: f64,
    pub total: f64,
}

/// Residual of one player and what its adjoint needs.
#[derive(Clone, Debug)]
pub struct ResidualParts {
    pub residual: f64,
    /// Joint dynamics under both players' controls, ego first.
    pub flow: Vec<f64>,
    /// The other player's control law at this point.
    pub other: Maximizer,
    /// `∂ residual / ∂ u_other`.
    pub other_control_grad: Vec<f64>,
}

/// HJI residual `∂tϑ + ∇ϑᵀF + l(u_ego) + c` of the ego player, with each
/// control from the maximizer applied to the negated own-block gradient of
/// that player's value.
///
/// `grad_ego` is the ego value gradient over the ego-first joint state;
/// `grad_other` is the other player's value gradient in its own ego-first
/// order.
pub fn hji_residual_from_gradients(
    spec: &GameSpec,
    tp: TypePair,
    x: &[f64],
    grad_t: f64,
    grad_ego: &[f64],
    grad_other: &[f64],
) -> Result<ResidualParts> {
    let n = spec.state_dim();
    if grad_ego.iter().chain(grad_other).any(|g| !g.is_finite()) || !grad_t.is_finite() {
        return Err(Error::Numerical("non-finite value gradient in HJI residual".into()));
    }
    let mut lam = [0.0; MAX_STATE_DIM];
    for j in 0..n {
        lam[j] = -grad_ego[j];
    }
    let mine = spec.maximize(&lam[..n])?;
    for j in 0..n {
        lam[j] = -grad_other[j];
    }
    let other = spec.maximize(&lam[..n])?;
    let mut flow = vec![0.0; 2 * n];
    spec.dynamics(&x[..n], &mine.control, &mut flow[..n]);
    spec.dynamics(&x[n..], &other.control, &mut flow[n..]);
    let residual = grad_t
        + grad_ego.iter().zip(&flow).map(|(a, b)| a * b).sum::<f64>()
        + spec.running_loss(&mine.control)
        + spec.penalty(tp, x);
    let mut other_control_grad = vec![0.0; other.control.len()];
    spec.dynamics_control_vjp(&x[n..], &other.control, &grad_ego[n..], &mut other_control_grad);
    Ok(ResidualParts {
        residual,
        flow,
        other,
        other_control_grad,
    })
}

/// Both players' HJI residuals at a PDE point, from the operator.
pub fn hji_residual(op: &Operator, point: &PinnPoint) -> Result<[f64; 2]> {
    let spec = &op.spec;
    let views = [
        (point.joint_state.clone(), point.type_pair),
        (swap_players(&point.joint_state), point.type_pair.swapped()),
    ];
    let mut vg = Vec::with_capacity(2);
    for (x, tp) in &views {
        vg.push(op.value_and_gradient(x, point.t, *tp)?);
    }
    let mut out = [0.0; 2];
    for i in 0..2 {
        let (x, tp) = &views[i];
        out[i] = hji_residual_from_gradients(spec, *tp, x, vg[i].grad_t, &vg[i].grad_x, &vg[1 - i].grad_x)?.residual;
    }
    Ok(out)
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Branch evaluations shared by all points with the same type pair, with
/// the cotangent accumulated on their coefficients.
struct BranchCache<'o> {
    op: &'o Operator,
    entries: Vec<(BranchEval, Vec<f64>)>,
}

impl<'o> BranchCache<'o> {
    fn new(op: &'o Operator) -> Self {
        BranchCache {
            op,
            entries: Vec::new(),
        }
    }

    fn index(&mut self, tp: TypePair) -> Result<usize> {
        if let Some(i) = self.entries.iter().position(|e| e.0.type_pair == tp) {
            return Ok(i);
        }
        self.entries.push((self.op.branch_eval(tp)?, vec![0.0; self.op.q]));
        Ok(self.entries.len() - 1)
    }

    fn flush(self, grad: &mut [f64]) {
        for (br, bar) in &self.entries {
            if bar.iter().any(|v| *v != 0.0) {
                self.op.branch_backward(br, bar, grad);
            }
        }
    }
}

/// Hybrid loss on one set of batches. In SNO mode, or
/// when `pinn` and `boundary` are empty, only the supervised terms enter.
/// With `grad`, the parameter gradient is accumulated into it.
pub fn loss_and_grad(
    op: &Operator,
    batches: &Batches,
    w: &LossWeights,
    mode: Mode,
    mut grad: Option<&mut [f64]>,
) -> Result<LossTerms> {
    let spec = &op.spec;
    let n = spec.state_dim();
    let mut cache = BranchCache::new(op);
    let mut terms = LossTerms::default();
    let want = grad.is_some();
    if batches.supervised.is_empty() && (mode == Mode::Sno || (batches.pinn.is_empty() && batches.boundary.is_empty()))
    {
        return Err(Error::Config("empty training batch".into()));
    }

    if !batches.supervised.is_empty() {
        let inv = 1.0 / batches.supervised.len() as f64;
        for s in &batches.supervised {
            let bi = cache.index(s.type_pair)?;
            let pe = op.point_eval(&cache.entries[bi].0, &s.joint_state, s.t, true)?;
            let e = pe.value - s.value;
            terms.value += e.abs() * inv;
            let mut gbar = vec![0.0; 2 * n + 1];
            for j in 0..2 * n {
                let d = pe.grad[j] - s.costate[j];
                terms.costate += d.abs() * inv;
                gbar[j] = w.c3 * inv * sign(d);
            }
            if let Some(g) = grad.as_deref_mut() {
                let (br, bar) = &mut cache.entries[bi];
                op.point_backward(br, &pe, w.c2 * inv * sign(e), Some(&gbar), g, bar);
            }
        }
    }

    if mode == Mode::Hno && !batches.pinn.is_empty() {
        let inv = 1.0 / batches.pinn.len() as f64;
        for p in &batches.pinn {
            let xs = [p.joint_state.clone(), swap_players(&p.joint_state)];
            let tps = [p.type_pair, p.type_pair.swapped()];
            let mut evals: Vec<(usize, PointEval)> = Vec::with_capacity(2);
            for v in 0..2 {
                let bi = cache.index(tps[v])?;
                evals.push((bi, op.point_eval(&cache.entries[bi].0, &xs[v], p.t, true)?));
            }
            let mut gbar = [vec![0.0; 2 * n + 1], vec![0.0; 2 * n + 1]];
            for i in 0..2 {
                let o = 1 - i;
                let ge = &evals[i].1.grad;
                let go = &evals[o].1.grad;
                let parts = hji_residual_from_gradients(spec, tps[i], &xs[i], ge[2 * n], &ge[..2 * n], &go[..2 * n])?;
                terms.hji += parts.residual.abs() * inv;
                if want {
                    let s = sign(parts.residual) * inv;
                    // Own control: stationary (or at a bound), so only the
                    // explicit dependence on ∇ϑ remains.
                    for j in 0..2 * n {
                        gbar[i][j] += s * parts.flow[j];
                    }
                    gbar[i][2 * n] += s;
                    // Other control through its own value gradient; the
                    // maximizer reads −∇ϑ.
                    for (c, &(idx, du)) in parts.other.sensitivity.iter().enumerate() {
                        gbar[o][idx] -= s * parts.other_control_grad[c] * du;
                    }
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                for v in 0..2 {
                    let (bi, pe) = &evals[v];
                    let (br, bar) = &mut cache.entries[*bi];
                    op.point_backward(br, pe, 0.0, Some(&gbar[v]), g, bar);
                }
            }
        }
    }

    if mode == Mode::Hno && !batches.boundary.is_empty() {
        let inv = 1.0 / batches.boundary.len() as f64;
        let horizon = spec.horizon();
        for b in &batches.boundary {
            let xs = [b.joint_state.clone(), swap_players(&b.joint_state)];
            let tps = [b.type_pair, b.type_pair.swapped()];
            for (v, slot) in [Slot::First, Slot::Second].into_iter().enumerate() {
                let bi = cache.index(tps[v])?;
                let pe = op.point_eval(&cache.entries[bi].0, &xs[v], horizon, false)?;
                let target = spec.terminal_loss(&xs[v][..n], slot);
                let e = pe.value - target;
                terms.boundary += e.abs() * inv;
                if let Some(g) = grad.as_deref_mut() {
                    let (br, bar) = &mut cache.entries[bi];
                    op.point_backward(br, &pe, w.c1 * inv * sign(e), None, g, bar);
                }
            }
        }
    }

    terms.total = terms.hji + w.c1 * terms.boundary + w.c2 * terms.value + w.c3 * terms.costate;
    if let Some(g) = grad {
        cache.flush(g);
    }
    if !terms.total.is_finite() {
        return Err(Error::Numerical("non-finite loss".into()));
    }
    Ok(terms)
}
