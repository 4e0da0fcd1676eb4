//! Decoupled double-integrator game with quadratic costs and no collision
//! penalty. Each player's problem is an independent LQR whose value is
//! `xᵀ P(t) x` with `P` from the Riccati equation, which makes it a closed
//! form reference for the shooting solver.

use arrayvec::ArrayVec;

use crate::error::{Error, Result};
use crate::game::{Control, GameModel, Maximizer, Slot, TypePair};

#[derive(Clone, Debug, PartialEq)]
pub struct DoubleIntegratorLqr {
    pub horizon: f64,
    /// Weight on u².
    pub r: f64,
    /// Terminal weights on p² and v².
    pub qf: [f64; 2],
    /// Kept only so the solver's penalty ladder has something to scale.
    pub penalty_scale: f64,
}

impl Default for DoubleIntegratorLqr {
    fn default() -> Self {
        DoubleIntegratorLqr {
            horizon: 3.0,
            r: 1.0,
            qf: [1.0, 1.0],
            penalty_scale: 0.0,
        }
    }
}

impl DoubleIntegratorLqr {
    /// `P(t)` by backward RK4 on the Riccati ODE
    /// `−Ṗ = AᵀP + PA − P B R⁻¹ Bᵀ P`, with `A = [[0,1],[0,0]]`, `B = [0,1]ᵀ`.
    pub fn riccati(&self, t: f64, steps_per_second: usize) -> [[f64; 2]; 2] {
        let rhs = |p: [f64; 3]| -> [f64; 3] {
            // p = (P11, P12, P22); returns dP/dτ with τ = T − t.
            let (p11, p12, p22) = (p[0], p[1], p[2]);
            [
                -p12 * p12 / self.r,
                p11 - p12 * p22 / self.r,
                2.0 * p12 - p22 * p22 / self.r,
            ]
        };
        let tau = self.horizon - t;
        let n = ((tau * steps_per_second as f64).ceil() as usize).max(1);
        let h = tau / n as f64;
        let mut p = [self.qf[0], 0.0, self.qf[1]];
        for _ in 0..n {
            let add = |a: [f64; 3], b: [f64; 3], s: f64| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]];
            let k1 = rhs(p);
            let k2 = rhs(add(p, k1, 0.5 * h));
            let k3 = rhs(add(p, k2, 0.5 * h));
            let k4 = rhs(add(p, k3, h));
            for i in 0..3 {
                p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        [[p[0], p[1]], [p[1], p[2]]]
    }
}

impl GameModel for DoubleIntegratorLqr {
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn penalty_scale(&self) -> f64 {
        self.penalty_scale
    }
    fn set_penalty_scale(&mut self, b: f64) {
        self.penalty_scale = b;
    }
    fn dynamics(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = x[1];
        out[1] = u[0];
    }
    fn dynamics_state_vjp(&self, _x: &[f64], _u: &[f64], lam: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = lam[0];
    }
    fn dynamics_control_vjp(&self, _x: &[f64], _u: &[f64], lam: &[f64], out: &mut [f64]) {
        out[0] = lam[1];
    }
    fn running_loss(&self, u: &[f64]) -> f64 {
        self.r * u[0] * u[0]
    }
    fn penalty(&self, _tp: TypePair, _xj: &[f64]) -> f64 {
        0.0
    }
    fn penalty_grad(&self, _tp: TypePair, _xj: &[f64], out: &mut [f64]) -> f64 {
        out.iter_mut().for_each(|v| *v = 0.0);
        0.0
    }
    fn terminal_loss(&self, x: &[f64], _slot: Slot) -> f64 {
        self.qf[0] * x[0] * x[0] + self.qf[1] * x[1] * x[1]
    }
    fn terminal_grad(&self, x: &[f64], slot: Slot, out: &mut [f64]) -> f64 {
        out[0] = 2.0 * self.qf[0] * x[0];
        out[1] = 2.0 * self.qf[1] * x[1];
        self.terminal_loss(x, slot)
    }
    fn maximize(&self, lam: &[f64]) -> Result<Maximizer> {
        if !lam[1].is_finite() {
            return Err(Error::Numerical("non-finite costate".into()));
        }
        let mut control = Control::new();
        control.push(lam[1] / (2.0 * self.r));
        let mut sensitivity = ArrayVec::new();
        sensitivity.push((1, 0.5 / self.r));
        Ok(Maximizer { control, sensitivity })
    }
}
