//! Coupled two-player Pontryagin system.
//!
//! Augmented vector layout, all blocks in absolute player order:
//! `[x1, x2 | λ1 (joint) | λ2 (joint) | J1, J2]`, where `J_i` accumulates
//! the running cost `l_i + c_i`. Costates follow the Pontryagin sign pattern
//! (`λ_i = −∇ϑ_i`, the value being a cost-to-go).

use crate::error::Result;
use crate::game::{swap_players, Control, GameModel, Slot, TypePair, MAX_STATE_DIM};

pub struct PmpSystem<'a, G: GameModel + ?Sized> {
    pub game: &'a G,
    /// Absolute-order types: `theta_self` belongs to the first player.
    pub types: TypePair,
}

impl<'a, G: GameModel + ?Sized> PmpSystem<'a, G> {
    pub fn new(game: &'a G, types: TypePair) -> Self {
        PmpSystem { game, types }
    }

    pub fn n(&self) -> usize {
        self.game.state_dim()
    }

    /// Length of `[x, λ1, λ2]`.
    pub fn core_len(&self) -> usize {
        6 * self.n()
    }

    pub fn aug_len(&self) -> usize {
        self.core_len() + 2
    }

    pub fn state<'b>(&self, y: &'b [f64]) -> &'b [f64] {
        &y[..2 * self.n()]
    }

    pub fn costate<'b>(&self, y: &'b [f64], slot: Slot) -> &'b [f64] {
        let n2 = 2 * self.n();
        let off = n2 * (1 + slot.index());
        &y[off..off + n2]
    }

    /// Penalties of both players and their joint-state gradients (absolute order).
    pub fn penalties(&self, x: &[f64], g1: &mut [f64], g2: &mut [f64]) -> (f64, f64) {
        let c1 = self.game.penalty_grad(self.types, x, g1);
        let sx = swap_players(x);
        let mut tmp = [0.0; 2 * MAX_STATE_DIM];
        let nj = x.len();
        let c2 = self.game.penalty_grad(self.types.swapped(), &sx, &mut tmp[..nj]);
        let n = nj / 2;
        g2[..n].copy_from_slice(&tmp[n..nj]);
        g2[n..nj].copy_from_slice(&tmp[..n]);
        (c1, c2)
    }

    /// Equilibrium controls implied by the costates in `y`.
    pub fn controls(&self, y: &[f64]) -> Result<[Control; 2]> {
        let n = self.n();
        let u1 = self.game.maximize(&self.costate(y, Slot::First)[..n])?.control;
        let u2 = self.game.maximize(&self.costate(y, Slot::Second)[n..])?.control;
        Ok([u1, u2])
    }

    /// Right-hand side of the augmented system.
    pub fn rhs(&self, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let n = self.n();
        let n2 = 2 * n;
        let [u1, u2] = self.controls(y)?;
        let x = &y[..n2];
        let (x1, x2) = (&x[..n], &x[n..]);
        self.game.dynamics(x1, &u1, &mut dy[..n]);
        self.game.dynamics(x2, &u2, &mut dy[n..n2]);

        let mut gc = [[0.0; 2 * MAX_STATE_DIM]; 2];
        let [ref mut gc1, ref mut gc2] = gc;
        let (c1, c2) = self.penalties(x, &mut gc1[..n2], &mut gc2[..n2]);
        for (p, gcp) in [(0usize, &gc[0]), (1, &gc[1])] {
            let lam = &y[n2 * (1 + p)..n2 * (2 + p)];
            let off = n2 * (1 + p);
            let (d_own, d_oth) = dy[off..off + n2].split_at_mut(n);
            self.game.dynamics_state_vjp(x1, &u1, &lam[..n], d_own);
            self.game.dynamics_state_vjp(x2, &u2, &lam[n..], d_oth);
            for i in 0..n2 {
                dy[off + i] = -dy[off + i] + gcp[i];
            }
        }
        dy[3 * n2] = self.game.running_loss(&u1) + c1;
        dy[3 * n2 + 1] = self.game.running_loss(&u2) + c2;
        if dy.iter().any(|v| !v.is_finite()) {
            return Err(crate::Error::Numerical("non-finite Pontryagin right-hand side".into()));
        }
        Ok(())
    }

    /// Player Hamiltonian `λᵀF(x, u) − l(u_i) − c_i(x)` at fixed controls.
    pub fn hamiltonian(&self, slot: Slot, x: &[f64], lam: &[f64], u: &[Control; 2]) -> f64 {
        let n = self.n();
        let mut f = [0.0; 2 * MAX_STATE_DIM];
        self.game.dynamics(&x[..n], &u[0], &mut f[..n]);
        self.game.dynamics(&x[n..], &u[1], &mut f[n..2 * n]);
        let c = match slot {
            Slot::First => self.game.penalty(self.types, x),
            Slot::Second => self.game.penalty(self.types.swapped(), &swap_players(x)),
        };
        f[..2 * n].iter().zip(lam).map(|(a, b)| a * b).sum::<f64>() - self.game.running_loss(&u[slot.index()]) - c
    }

    /// Terminal costate residual `λ_i(T) + ∇g_i` for both players, written
    /// into `out` (length `4n`).
    pub fn terminal_residual(&self, y: &[f64], out: &mut [f64]) {
        let n = self.n();
        let n2 = 2 * n;
        let mut g = [0.0; MAX_STATE_DIM];
        for slot in [Slot::First, Slot::Second] {
            let p = slot.index();
            let lam = self.costate(y, slot);
            let xo = &y[p * n..(p + 1) * n];
            self.game.terminal_grad(xo, slot, &mut g[..n]);
            for i in 0..n2 {
                let own = i / n == p;
                let dg = if own { g[i % n] } else { 0.0 };
                out[p * n2 + i] = lam[i] + dg;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{CaseId, GameOverrides, GameSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tp(a: f64, b: f64) -> TypePair {
        TypePair::new(a, b).unwrap()
    }

    #[test]
    fn costate_rhs_is_negative_hamiltonian_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in [CaseId::NarrowRoad, CaseId::LaneChange, CaseId::Drone] {
            let g = GameSpec::new(case);
            let sys = PmpSystem::new(&g, tp(2.0, 4.0));
            let n = g.state_dim();
            for _ in 0..20 {
                let mut y = vec![0.0; sys.aug_len()];
                // Put players close so the penalty gradient is active.
                let mut x = g.sample_gt(&mut rng);
                if case == CaseId::NarrowRoad {
                    x[n] = g.road_length - x[0] + rng.random_range(-2.0..2.0);
                }
                y[..2 * n].copy_from_slice(&x);
                for v in &mut y[2 * n..6 * n] {
                    *v = rng.random_range(-50.0..50.0);
                }
                let mut dy = vec![0.0; sys.aug_len()];
                sys.rhs(&y, &mut dy).unwrap();
                let u = sys.controls(&y).unwrap();
                for slot in [Slot::First, Slot::Second] {
                    let lam = sys.costate(&y, slot).to_vec();
                    let off = 2 * n * (1 + slot.index());
                    for i in 0..2 * n {
                        let h = 1e-6;
                        let mut xp = x.clone();
                        let mut xm = x.clone();
                        xp[i] += h;
                        xm[i] -= h;
                        let hp = sys.hamiltonian(slot, &xp, &lam, &u);
                        let hm = sys.hamiltonian(slot, &xm, &lam, &u);
                        let fd = -(hp - hm) / (2.0 * h);
                        let a = dy[off + i];
                        let noise = 1e-15 * (1.0 + hp.abs()) / h;
                        let tol = 1e-5 * a.abs().max(fd.abs()) + noise;
                        assert!((a - fd).abs() <= tol, "{case} {slot:?} {i}: {a} vs {fd}");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_costates_give_zero_cost_controls() {
        let g = GameSpec::new(CaseId::NarrowRoad);
        let sys = PmpSystem::new(&g, tp(1.0, 1.0));
        let mut y = vec![0.0; sys.aug_len()];
        y[..8].copy_from_slice(&[15.0, 4.0, 0.0, 20.0, 15.0, 1.0, 0.0, 20.0]);
        let u = sys.controls(&y).unwrap();
        assert_eq!(u[0].as_slice(), &[0.0, 0.0]);
        let mut dy = vec![0.0; sys.aug_len()];
        sys.rhs(&y, &mut dy).unwrap();
        assert_eq!(&dy[..8], &[20.0, 0.0, 0.0, 0.0, 20.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn no_penalty_means_no_cross_coupling() {
        let o = GameOverrides {
            penalty_scale: Some(0.0),
            ..Default::default()
        };
        let g = GameSpec::with_overrides(CaseId::NarrowRoad, &o).unwrap();
        let sys = PmpSystem::new(&g, tp(1.0, 1.0));
        let mut y = vec![0.0; sys.aug_len()];
        y[..8].copy_from_slice(&[15.0, 4.0, 0.1, 20.0, 30.0, 1.0, -0.1, 22.0]);
        // Own blocks nonzero, cross blocks zero.
        y[8..12].copy_from_slice(&[1.0, -2.0, 30.0, 4.0]);
        y[20..24].copy_from_slice(&[-1.0, 2.0, -30.0, 5.0]);
        let mut dy = vec![0.0; sys.aug_len()];
        sys.rhs(&y, &mut dy).unwrap();
        assert!(dy[12..16].iter().all(|v| *v == 0.0));
        assert!(dy[16..20].iter().all(|v| *v == 0.0));
    }
}
