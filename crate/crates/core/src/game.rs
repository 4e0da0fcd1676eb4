//! Case-study games: unicycle narrow-road and double-lane-change scenarios and
//! the two-drone scenario.
//!
//! Joint states are always ego-first: `[x_self, x_other]`. Every function
//! that reads a joint state takes a flat slice of length `2 * state_dim`.
//! Costates passed to [`GameModel::maximize`] use the sign pattern of the
//! Pontryagin conditions, i.e. they are the *negative* gradient of the
//! cost-to-go.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use arrayvec::ArrayVec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_STATE_DIM: usize = 6;
pub const MAX_CONTROL_DIM: usize = 3;

/// Gravitational acceleration used by the drone model, m/s².
pub const GRAVITY: f64 = 9.81;

pub type Control = ArrayVec<f64, MAX_CONTROL_DIM>;

/// Player type θ ∈ [1, 5].
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct PlayerType(f64);

impl PlayerType {
    pub const MIN: f64 = 1.0;
    pub const MAX: f64 = 5.0;

    pub fn new(theta: f64) -> Result<Self> {
        if theta.is_finite() && (Self::MIN..=Self::MAX).contains(&theta) {
            Ok(PlayerType(theta))
        } else {
            Err(Error::Config(format!(
                "player type {theta} outside [{}, {}]",
                Self::MIN,
                Self::MAX
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for PlayerType {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        PlayerType::new(v)
    }
}

impl From<PlayerType> for f64 {
    fn from(t: PlayerType) -> f64 {
        t.0
    }
}

/// Ego-first pair of player types.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypePair {
    pub theta_self: PlayerType,
    pub theta_other: PlayerType,
}

impl TypePair {
    pub fn new(theta_self: f64, theta_other: f64) -> Result<Self> {
        Ok(TypePair {
            theta_self: PlayerType::new(theta_self)?,
            theta_other: PlayerType::new(theta_other)?,
        })
    }

    pub fn swapped(self) -> Self {
        TypePair {
            theta_self: self.theta_other,
            theta_other: self.theta_self,
        }
    }

    pub fn as_array(self) -> [f64; 2] {
        [self.theta_self.value(), self.theta_other.value()]
    }

    /// Bit-exact key, usable for grouping samples by type pair.
    pub fn key(self) -> (u64, u64) {
        (self.theta_self.value().to_bits(), self.theta_other.value().to_bits())
    }
}

impl fmt::Display for TypePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.theta_self.value(), self.theta_other.value())
    }
}

/// The four corner pairs used for training.
pub fn default_training_pairs() -> Vec<TypePair> {
    [(1.0, 1.0), (1.0, 5.0), (5.0, 1.0), (5.0, 5.0)]
        .iter()
        .map(|&(a, b)| TypePair::new(a, b).expect("corner types are valid"))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseId {
    NarrowRoad,
    LaneChange,
    Drone,
}

impl CaseId {
    pub fn as_str(self) -> &'static str {
        match self {
            CaseId::NarrowRoad => "narrow_road",
            CaseId::LaneChange => "lane_change",
            CaseId::Drone => "drone",
        }
    }
}

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CaseId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "narrow_road" | "case1" | "1" => Ok(CaseId::NarrowRoad),
            "lane_change" | "case2" | "2" => Ok(CaseId::LaneChange),
            "drone" | "case3" | "3" => Ok(CaseId::Drone),
            other => Err(Error::Config(format!("unknown case id '{other}'"))),
        }
    }
}

/// Which player a terminal loss belongs to. Only the lane-change case
/// distinguishes the two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    First,
    Second,
}

impl Slot {
    pub fn index(self) -> usize {
        match self {
            Slot::First => 0,
            Slot::Second => 1,
        }
    }

    pub fn other(self) -> Slot {
        match self {
            Slot::First => Slot::Second,
            Slot::Second => Slot::First,
        }
    }
}

impl TryFrom<i64> for Slot {
    type Error = Error;
    fn try_from(v: i64) -> Result<Self> {
        match v {
            1 => Ok(Slot::First),
            2 => Ok(Slot::Second),
            _ => Err(Error::Config(format!("player slot must be 1 or 2, got {v}"))),
        }
    }
}

/// Per-component `[lo, hi]` intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds(pub Vec<[f64; 2]>);

impl ControlBounds {
    pub fn contains(&self, u: &[f64]) -> bool {
        u.len() == self.0.len() && u.iter().zip(&self.0).all(|(&v, &[lo, hi])| v >= lo && v <= hi)
    }
}

/// Axis-aligned box of per-dimension intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleBox(pub Vec<[f64; 2]>);

impl SampleBox {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.0
            .iter()
            .map(|&[lo, hi]| lo + (hi - lo) * rng.random::<f64>())
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.0).all(|(&v, &[lo, hi])| v >= lo && v <= hi)
    }

    /// Componentwise hull of two boxes.
    pub fn union(&self, other: &SampleBox) -> SampleBox {
        SampleBox(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| [a[0].min(b[0]), a[1].max(b[1])])
                .collect(),
        )
    }

    /// Box grown by `frac` of its width on both sides.
    pub fn inflate(&self, frac: f64) -> SampleBox {
        SampleBox(
            self.0
                .iter()
                .map(|&[lo, hi]| {
                    let w = (hi - lo) * frac;
                    [lo - w, hi + w]
                })
                .collect(),
        )
    }
}

/// Output of the closed-form Hamiltonian maximizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Maximizer {
    pub control: Control,
    /// For each control component: the costate index it depends on and
    /// `d u_c / d costate[index]` (zero when the bound is active).
    pub sensitivity: ArrayVec<(usize, f64), MAX_CONTROL_DIM>,
}

/// Everything the Pontryagin solver, the loss and the rollout need from a
/// game. Implemented by [`GameSpec`]; tests plug in auxiliary games.
pub trait GameModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn horizon(&self) -> f64;
    fn penalty_scale(&self) -> f64;
    fn set_penalty_scale(&mut self, b: f64);

    fn dynamics(&self, x: &[f64], u: &[f64], out: &mut [f64]);
    /// `out = (∂f/∂x)ᵀ lam`
    fn dynamics_state_vjp(&self, x: &[f64], u: &[f64], lam: &[f64], out: &mut [f64]);
    /// `out = (∂f/∂u)ᵀ lam`
    fn dynamics_control_vjp(&self, x: &[f64], u: &[f64], lam: &[f64], out: &mut [f64]);

    fn running_loss(&self, u: &[f64]) -> f64;

    /// Collision penalty on an ego-first joint state.
    fn penalty(&self, tp: TypePair, xj: &[f64]) -> f64;
    /// Writes the joint-state gradient of the penalty, returns its value.
    fn penalty_grad(&self, tp: TypePair, xj: &[f64], out: &mut [f64]) -> f64;

    fn terminal_loss(&self, x: &[f64], slot: Slot) -> f64;
    /// Writes the own-state gradient of the terminal loss, returns its value.
    fn terminal_grad(&self, x: &[f64], slot: Slot, out: &mut [f64]) -> f64;

    fn maximize(&self, costate_own: &[f64]) -> Result<Maximizer>;
}

/// Optional overrides for [`GameSpec`] constants.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameOverrides {
    pub horizon: Option<f64>,
    pub penalty_scale: Option<f64>,
    pub penalty_shape: Option<f64>,
    pub k_omega: Option<f64>,
    pub k_psi: Option<f64>,
    pub k_phi: Option<f64>,
    pub mu: Option<f64>,
    pub v_bar: Option<f64>,
    pub p_bar_y: Option<[f64; 2]>,
    pub road_length: Option<f64>,
    pub offset_xy: Option<[f64; 2]>,
    pub threshold_base: Option<f64>,
}

/// One case study with all constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameSpec {
    pub case: CaseId,
    pub horizon: f64,
    pub control_bounds: ControlBounds,
    /// b
    pub penalty_scale: f64,
    /// γ
    pub penalty_shape: f64,
    /// Weight on ω² (unicycle cases).
    pub k_omega: f64,
    /// Terminal heading weight (lane change) or roll weight (drone).
    pub k_psi: f64,
    /// Pitch weight (drone).
    pub k_phi: f64,
    pub mu: f64,
    pub v_bar: f64,
    /// Lane targets for the first and second player.
    pub p_bar_y: [f64; 2],
    /// R, the mirrored road length in the narrow-road case.
    pub road_length: f64,
    /// (R_x, R_y), the mirror offsets of the drone case.
    pub offset_xy: [f64; 2],
    pub threshold_base: f64,
    /// Ground-truth sampling boxes per player.
    pub gt_boxes: [SampleBox; 2],
    /// PDE-point sampling boxes per player.
    pub hj_boxes: [SampleBox; 2],
}

fn unicycle_box(px: [f64; 2], py: [f64; 2], psi: [f64; 2], v: [f64; 2]) -> SampleBox {
    SampleBox(vec![px, py, psi, v])
}

impl GameSpec {
    pub fn new(case: CaseId) -> Self {
        let deg = PI / 180.0;
        match case {
            CaseId::NarrowRoad => {
                let gt = unicycle_box([15.0, 20.0], [3.25, 4.75], [-deg, deg], [18.0, 25.0]);
                let hj = unicycle_box([15.0, 95.0], [0.0, 8.0], [-0.2, 0.2], [18.0, 29.0]);
                GameSpec {
                    case,
                    horizon: 3.0,
                    control_bounds: ControlBounds(vec![[-1.0, 1.0], [-5.0, 10.0]]),
                    penalty_scale: 1e4,
                    penalty_shape: 5.0,
                    k_omega: 100.0,
                    k_psi: 0.0,
                    k_phi: 0.0,
                    mu: 1e-6,
                    v_bar: 18.0,
                    p_bar_y: [4.0, 4.0],
                    road_length: 70.0,
                    offset_xy: [0.0, 0.0],
                    threshold_base: 1.25,
                    gt_boxes: [gt.clone(), gt],
                    hj_boxes: [hj.clone(), hj],
                }
            }
            CaseId::LaneChange => GameSpec {
                case,
                horizon: 4.0,
                control_bounds: ControlBounds(vec![[-1.0, 1.0], [-5.0, 10.0]]),
                penalty_scale: 1e4,
                penalty_shape: 5.0,
                k_omega: 100.0,
                k_psi: 100.0,
                k_phi: 0.0,
                mu: 1e-6,
                v_bar: 18.0,
                p_bar_y: [6.0, 2.0],
                road_length: 0.0,
                offset_xy: [0.0, 0.0],
                threshold_base: 2.25,
                gt_boxes: [
                    unicycle_box([0.0, 3.0], [1.25, 2.75], [-deg, deg], [18.0, 25.0]),
                    unicycle_box([0.0, 3.0], [5.25, 6.75], [-deg, deg], [18.0, 25.0]),
                ],
                hj_boxes: [
                    unicycle_box([0.0, 90.0], [0.0, 6.0], [-0.17, 0.15], [17.0, 26.0]),
                    unicycle_box([0.0, 90.0], [2.0, 8.0], [-0.15, 0.17], [17.0, 26.0]),
                ],
            },
            CaseId::Drone => {
                let gt = SampleBox(vec![
                    [0.0, 1.0],
                    [0.0, 1.0],
                    [-0.1, 0.1],
                    [2.0, 4.0],
                    [2.0, 4.0],
                    [0.0, 0.1],
                ]);
                let hj = SampleBox(vec![
                    [0.0, 15.5],
                    [0.0, 15.5],
                    [-2.2, 2.5],
                    [0.3, 4.5],
                    [0.3, 4.5],
                    [-2.0, 2.2],
                ]);
                GameSpec {
                    case,
                    horizon: 4.0,
                    control_bounds: ControlBounds(vec![[-0.05, 0.05], [-0.05, 0.05], [7.81, 11.81]]),
                    penalty_scale: 1e4,
                    penalty_shape: 5.0,
                    k_omega: 0.0,
                    k_psi: 100.0,
                    k_phi: 100.0,
                    mu: 1e-6,
                    v_bar: 0.0,
                    p_bar_y: [0.0, 0.0],
                    road_length: 0.0,
                    offset_xy: [5.0, 5.0],
                    threshold_base: 0.5,
                    gt_boxes: [gt.clone(), gt],
                    hj_boxes: [hj.clone(), hj],
                }
            }
        }
    }

    pub fn with_overrides(case: CaseId, o: &GameOverrides) -> Result<Self> {
        let mut s = GameSpec::new(case);
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = o.$f { s.$f = v; } )* };
        }
        set!(
            horizon,
            penalty_scale,
            penalty_shape,
            k_omega,
            k_psi,
            k_phi,
            mu,
            v_bar,
            p_bar_y,
            road_length,
            offset_xy,
            threshold_base
        );
        if !(s.horizon > 0.0) || !(s.penalty_shape > 0.0) || s.penalty_scale < 0.0 {
            return Err(Error::Config(
                "horizon and penalty shape must be positive, penalty scale non-negative".into(),
            ));
        }
        Ok(s)
    }

    pub fn joint_dim(&self) -> usize {
        2 * self.state_dim()
    }

    /// Uniform sample of an absolute-order joint state from the ground-truth boxes.
    pub fn sample_gt<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut x = self.gt_boxes[0].sample(rng);
        x.extend(self.gt_boxes[1].sample(rng));
        x
    }

    /// Uniform sample of an absolute-order joint state from the PDE-point boxes.
    pub fn sample_hj<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut x = self.hj_boxes[0].sample(rng);
        x.extend(self.hj_boxes[1].sample(rng));
        x
    }

    /// Relative position whose norm is the inter-player distance.
    pub fn relative_position(&self, xj: &[f64]) -> ArrayVec<f64, 3> {
        let n = self.state_dim();
        let (a, b) = (&xj[..n], &xj[n..]);
        let mut r = ArrayVec::new();
        match self.case {
            CaseId::NarrowRoad => {
                r.push((self.road_length - b[0]) - a[0]);
                r.push(b[1] - a[1]);
            }
            CaseId::LaneChange => {
                r.push(b[0] - a[0]);
                r.push(b[1] - a[1]);
            }
            CaseId::Drone => {
                r.push((self.offset_xy[0] - b[0]) - a[0]);
                r.push((self.offset_xy[1] - b[1]) - a[1]);
                r.push(b[2] - a[2]);
            }
        }
        r
    }

    pub fn distance(&self, xj: &[f64]) -> f64 {
        self.relative_position(xj).iter().map(|d| d * d).sum::<f64>().sqrt()
    }

    /// Distance and its joint-state gradient (zero at coincident positions).
    pub fn distance_grad(&self, xj: &[f64], out: &mut [f64]) -> f64 {
        let n = self.state_dim();
        out.iter_mut().for_each(|v| *v = 0.0);
        let r = self.relative_position(xj);
        let s = r.iter().map(|d| d * d).sum::<f64>().sqrt();
        if s == 0.0 {
            return 0.0;
        }
        let g: ArrayVec<f64, 3> = r.iter().map(|d| d / s).collect();
        match self.case {
            CaseId::NarrowRoad => {
                out[0] = -g[0];
                out[n] = -g[0];
                out[1] = -g[1];
                out[n + 1] = g[1];
            }
            CaseId::LaneChange => {
                out[0] = -g[0];
                out[n] = g[0];
                out[1] = -g[1];
                out[n + 1] = g[1];
            }
            CaseId::Drone => {
                out[0] = -g[0];
                out[n] = -g[0];
                out[1] = -g[1];
                out[n + 1] = -g[1];
                out[2] = -g[2];
                out[n + 2] = g[2];
            }
        }
        s
    }

    /// η(θ) = 0.1(θ₁+θ₂) + 0.05·min(θ₁,θ₂) + base.
    pub fn collision_threshold(&self, tp: TypePair) -> f64 {
        let (a, b) = (tp.theta_self.value(), tp.theta_other.value());
        0.1 * (a + b) + 0.05 * a.min(b) + self.threshold_base
    }

    /// Largest threshold over the type space.
    pub fn max_threshold(&self) -> f64 {
        0.1 * 2.0 * PlayerType::MAX + 0.05 * PlayerType::MAX + self.threshold_base
    }

    /// Sigmoid penalty as a function of the distance.
    pub fn penalty_at_distance(&self, tp: TypePair, s: f64) -> f64 {
        let z = self.penalty_shape * (self.collision_threshold(tp) - s);
        self.penalty_scale * sigmoid(z)
    }

    /// 1 iff the joint state violates the constraint (boundary inclusive).
    pub fn constraint_indicator(&self, tp: TypePair, xj: &[f64]) -> u8 {
        u8::from(self.distance(xj) <= self.collision_threshold(tp))
    }

    /// Player state of a given slot from an ego-first joint state.
    pub fn player<'a>(&self, xj: &'a [f64], slot: Slot) -> &'a [f64] {
        let n = self.state_dim();
        &xj[slot.index() * n..(slot.index() + 1) * n]
    }

    fn clip(&self, c: usize, v: f64) -> (f64, bool) {
        let [lo, hi] = self.control_bounds.0[c];
        if v <= lo {
            (lo, false)
        } else if v >= hi {
            (hi, false)
        } else {
            (v, true)
        }
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Swap the two player blocks of a joint vector (state or costate).
pub fn swap_players(v: &[f64]) -> Vec<f64> {
    let n = v.len() / 2;
    let mut out = Vec::with_capacity(v.len());
    out.extend_from_slice(&v[n..]);
    out.extend_from_slice(&v[..n]);
    out
}

impl GameModel for GameSpec {
    fn state_dim(&self) -> usize {
        match self.case {
            CaseId::NarrowRoad | CaseId::LaneChange => 4,
            CaseId::Drone => 6,
        }
    }

    fn control_dim(&self) -> usize {
        match self.case {
            CaseId::NarrowRoad | CaseId::LaneChange => 2,
            CaseId::Drone => 3,
        }
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
        match self.case {
            CaseId::NarrowRoad | CaseId::LaneChange => {
                let (psi, v) = (x[2], x[3]);
                out[0] = v * psi.cos();
                out[1] = v * psi.sin();
                out[2] = u[0];
                out[3] = u[1];
            }
            CaseId::Drone => {
                out[0] = x[3];
                out[1] = x[4];
                out[2] = x[5];
                out[3] = GRAVITY * u[0].tan();
                out[4] = -GRAVITY * u[1].tan();
                out[5] = u[2] - GRAVITY;
            }
        }
    }

    fn dynamics_state_vjp(&self, x: &[f64], _u: &[f64], lam: &[f64], out: &mut [f64]) {
        match self.case {
            CaseId::NarrowRoad | CaseId::LaneChange => {
                let (s, c) = x[2].sin_cos();
                let v = x[3];
                out[0] = 0.0;
                out[1] = 0.0;
                out[2] = -v * s * lam[0] + v * c * lam[1];
                out[3] = c * lam[0] + s * lam[1];
            }
            CaseId::Drone => {
                out[..3].iter_mut().for_each(|o| *o = 0.0);
                out[3] = lam[0];
                out[4] = lam[1];
                out[5] = lam[2];
            }
        }
    }

    fn dynamics_control_vjp(&self, _x: &[f64], u: &[f64], lam: &[f64], out: &mut [f64]) {
        match self.case {
            CaseId::NarrowRoad | CaseId::LaneChange => {
                out[0] = lam[2];
                out[1] = lam[3];
            }
            CaseId::Drone => {
                let sec2 = |a: f64| 1.0 / (a.cos() * a.cos());
                out[0] = GRAVITY * sec2(u[0]) * lam[3];
                out[1] = -GRAVITY * sec2(u[1]) * lam[4];
                out[2] = lam[5];
            }
        }
    }

    fn running_loss(&self, u: &[f64]) -> f64 {
        match self.case {
            CaseId::NarrowRoad | CaseId::LaneChange => self.k_omega * u[0] * u[0] + u[1] * u[1],
            CaseId::Drone => {
                let (tp, tf) = (u[0].tan(), u[1].tan());
                let dt = u[2] - GRAVITY;
                self.k_psi * tp * tp + self.k_phi * tf * tf + dt * dt
            }
        }
    }

    fn penalty(&self, tp: TypePair, xj: &[f64]) -> f64 {
        self.penalty_at_distance(tp, self.distance(xj))
    }

    fn penalty_grad(&self, tp: TypePair, xj: &[f64], out: &mut [f64]) -> f64 {
        let s = self.distance_grad(xj, out);
        let z = self.penalty_shape * (self.collision_threshold(tp) - s);
        let (sp, sm) = (sigmoid(z), sigmoid(-z));
        let dc_ds = -self.penalty_scale * self.penalty_shape * sp * sm;
        out.iter_mut().for_each(|g| *g *= dc_ds);
        self.penalty_scale * sp
    }

    fn terminal_loss(&self, x: &[f64], slot: Slot) -> f64 {
        match self.case {
            CaseId::NarrowRoad => {
                let (dv, dy) = (x[3] - self.v_bar, x[1] - self.p_bar_y[slot.index()]);
                -self.mu * x[0] + dv * dv + dy * dy
            }
            CaseId::LaneChange => {
                let (dv, dy) = (x[3] - self.v_bar, x[1] - self.p_bar_y[slot.index()]);
                -self.mu * x[0] + dy * dy + dv * dv + self.k_psi * x[2] * x[2]
            }
            CaseId::Drone => -self.mu * x[0] - self.mu * x[1] + x[2..6].iter().map(|v| v * v).sum::<f64>(),
        }
    }

    fn terminal_grad(&self, x: &[f64], slot: Slot, out: &mut [f64]) -> f64 {
        match self.case {
            CaseId::NarrowRoad | CaseId::LaneChange => {
                out[0] = -self.mu;
                out[1] = 2.0 * (x[1] - self.p_bar_y[slot.index()]);
                out[2] = if self.case == CaseId::LaneChange {
                    2.0 * self.k_psi * x[2]
                } else {
                    0.0
                };
                out[3] = 2.0 * (x[3] - self.v_bar);
            }
            CaseId::Drone => {
                out[0] = -self.mu;
                out[1] = -self.mu;
                for i in 2..6 {
                    out[i] = 2.0 * x[i];
                }
            }
        }
        self.terminal_loss(x, slot)
    }

    fn maximize(&self, lam: &[f64]) -> Result<Maximizer> {
        if lam.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite costate in Hamiltonian maximizer".into()));
        }
        let mut control = Control::new();
        let mut sensitivity = ArrayVec::new();
        match self.case {
            CaseId::NarrowRoad | CaseId::LaneChange => {
                let (w, free_w) = self.clip(0, lam[2] / (2.0 * self.k_omega));
                let (a, free_a) = self.clip(1, lam[3] / 2.0);
                control.push(w);
                control.push(a);
                sensitivity.push((2, if free_w { 0.5 / self.k_omega } else { 0.0 }));
                sensitivity.push((3, if free_a { 0.5 } else { 0.0 }));
            }
            CaseId::Drone => {
                // tan is monotone on the roll/pitch bounds, so the stationary
                // point in tan-space clipped to the bounds is the maximizer.
                let sr = lam[3] * GRAVITY / (2.0 * self.k_psi);
                let sp = -lam[4] * GRAVITY / (2.0 * self.k_phi);
                let (roll, free_r) = self.clip(0, sr.atan());
                let (pitch, free_p) = self.clip(1, sp.atan());
                let (thrust, free_t) = self.clip(2, GRAVITY + lam[5] / 2.0);
                control.push(roll);
                control.push(pitch);
                control.push(thrust);
                let dr = GRAVITY / (2.0 * self.k_psi) / (1.0 + sr * sr);
                let dp = -GRAVITY / (2.0 * self.k_phi) / (1.0 + sp * sp);
                sensitivity.push((3, if free_r { dr } else { 0.0 }));
                sensitivity.push((4, if free_p { dp } else { 0.0 }));
                sensitivity.push((5, if free_t { 0.5 } else { 0.0 }));
            }
        }
        Ok(Maximizer { control, sensitivity })
    }
}

/// Objective maximized by the Hamiltonian maximizer, `λᵀf(x,u) − l(u)`.
pub fn hamiltonian_objective<G: GameModel + ?Sized>(game: &G, x: &[f64], u: &[f64], lam: &[f64]) -> f64 {
    let mut f = [0.0; MAX_STATE_DIM];
    let n = game.state_dim();
    game.dynamics(x, u, &mut f[..n]);
    f[..n].iter().zip(lam).map(|(a, b)| a * b).sum::<f64>() - game.running_loss(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tp(a: f64, b: f64) -> TypePair {
        TypePair::new(a, b).unwrap()
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], h: f64, tol: f64) {
        // Roundoff floor of a central difference on f.
        let noise = 1e-15 * (1.0 + f(x).abs()) / h;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let scale = fd.abs().max(grad[i].abs());
            if scale < 1e-12 {
                continue;
            }
            assert!(
                (fd - grad[i]).abs() <= tol * scale + noise,
                "component {i}: fd {fd} vs analytic {}",
                grad[i]
            );
        }
    }

    #[test]
    fn dynamics_examples() {
        let g1 = GameSpec::new(CaseId::NarrowRoad);
        let mut out = [0.0; 4];
        g1.dynamics(&[0.0, 0.0, 0.0, 18.0], &[0.0, 0.0], &mut out);
        assert_eq!(out, [18.0, 0.0, 0.0, 0.0]);

        g1.dynamics(&[0.0, 0.0, PI / 2.0, 10.0], &[0.5, 2.0], &mut out);
        assert!(out[0].abs() < 1e-12);
        assert!((out[1] - 10.0).abs() < 1e-12);
        assert_eq!(&out[2..], &[0.5, 2.0]);

        // Finite difference of a short RK4 step agrees with the RHS.
        let x0 = [0.0, 0.0, PI / 2.0, 10.0];
        let h = 1e-6;
        let mut k = [0.0; 4];
        let mut x1 = x0;
        g1.dynamics(&x0, &[0.5, 2.0], &mut k);
        for i in 0..4 {
            x1[i] += h * k[i];
        }
        for i in 0..4 {
            assert!(((x1[i] - x0[i]) / h - out[i]).abs() < 1e-6);
        }

        let g3 = GameSpec::new(CaseId::Drone);
        let x = [1.0, 2.0, 3.0, 0.4, -0.5, 0.6];
        let mut out = [0.0; 6];
        g3.dynamics(&x, &[0.0, 0.0, GRAVITY], &mut out);
        assert_eq!(out, [0.4, -0.5, 0.6, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn instantaneous_loss_examples() {
        let g1 = GameSpec::new(CaseId::NarrowRoad);
        assert_eq!(g1.running_loss(&[0.0, 0.0]), 0.0);
        assert_eq!(g1.running_loss(&[1.0, 2.0]), 104.0);
        let g3 = GameSpec::new(CaseId::Drone);
        let expected = 100.0 * 0.05f64.tan().powi(2);
        let got = g3.running_loss(&[0.05, 0.0, GRAVITY]);
        assert!((got - expected).abs() < 1e-14);
        assert!((got - 0.25042).abs() < 1e-5);
    }

    #[test]
    fn distance_examples() {
        let g1 = GameSpec::new(CaseId::NarrowRoad);
        assert_eq!(g1.distance(&[35.0, 4.0, 0.0, 18.0, 35.0, 4.0, 0.0, 18.0]), 0.0);
        assert_eq!(g1.distance(&[30.0, 4.0, 0.0, 18.0, 35.0, 4.0, 0.0, 18.0]), 5.0);
        let g2 = GameSpec::new(CaseId::LaneChange);
        assert_eq!(g2.distance(&[0.0, 2.0, 0.0, 18.0, 3.0, 6.0, 0.0, 18.0]), 5.0);
        // Mirrored distance is symmetric under swapping the players.
        let g3 = GameSpec::new(CaseId::Drone);
        let xj = [0.3, 0.7, 0.1, 3.0, 2.0, 0.0, 1.0, 0.2, -0.1, 2.5, 3.5, 0.05];
        assert!((g3.distance(&xj) - g3.distance(&swap_players(&xj))).abs() < 1e-14);
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(GameSpec::new(CaseId::NarrowRoad).collision_threshold(tp(1.0, 1.0)), 1.5);
        assert_eq!(GameSpec::new(CaseId::LaneChange).collision_threshold(tp(1.0, 1.0)), 2.5);
        assert_eq!(GameSpec::new(CaseId::Drone).collision_threshold(tp(5.0, 5.0)), 1.75);
    }

    #[test]
    fn penalty_examples() {
        let g = GameSpec::new(CaseId::NarrowRoad);
        let t = tp(2.0, 3.0);
        let eta = g.collision_threshold(t);
        assert_eq!(g.penalty_at_distance(t, eta), 5000.0);
        assert!(g.penalty_at_distance(t, eta + 10.0) < 1e-17);
        let oracle = 10000.0 / (1.0 + (-10.0f64).exp());
        assert!((g.penalty_at_distance(t, eta - 2.0) - oracle).abs() < 1e-9);
        assert!((oracle - 9999.546).abs() < 1e-3);
    }

    #[test]
    fn terminal_loss_examples() {
        let g1 = GameSpec::new(CaseId::NarrowRoad);
        assert!((g1.terminal_loss(&[70.0, 4.0, 0.3, 18.0], Slot::First) + 7.0e-5).abs() < 1e-18);
        let g2 = GameSpec::new(CaseId::LaneChange);
        assert_eq!(g2.terminal_loss(&[0.0, 6.0, 0.0, 18.0], Slot::First), 0.0);
        assert_eq!(g2.terminal_loss(&[0.0, 2.0, 0.0, 18.0], Slot::Second), 0.0);
        let g3 = GameSpec::new(CaseId::Drone);
        let got = g3.terminal_loss(&[10.0, 10.0, 0.0, 0.0, 0.0, 0.0], Slot::First);
        assert!((got - (-1e-6 * 20.0)).abs() < 1e-18);
        assert!(Slot::try_from(3).is_err());
    }

    #[test]
    fn indicator_examples() {
        let g = GameSpec::new(CaseId::NarrowRoad);
        let t = tp(1.0, 1.0);
        let at = |s: f64| [70.0 - 35.0 - s, 4.0, 0.0, 18.0, 35.0, 4.0, 0.0, 18.0];
        assert_eq!(g.constraint_indicator(t, &at(0.0)), 1);
        assert_eq!(g.constraint_indicator(t, &at(10.0)), 0);
        assert_eq!(g.distance(&at(1.5)), 1.5);
        assert_eq!(g.constraint_indicator(t, &at(1.5)), 1);
        assert_eq!(g.penalty(t, &at(1.5)), g.penalty_scale / 2.0);
    }

    #[test]
    fn maximizer_examples() {
        let g1 = GameSpec::new(CaseId::NarrowRoad);
        let m = g1.maximize(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(m.control.as_slice(), &[0.0, 0.0]);
        let m = g1.maximize(&[0.0, 0.0, 400.0, -20.0]).unwrap();
        assert_eq!(m.control.as_slice(), &[1.0, -5.0]);
        assert_eq!(m.sensitivity.as_slice(), &[(2, 0.0), (3, 0.0)]);
        let g3 = GameSpec::new(CaseId::Drone);
        let m = g3.maximize(&[0.0; 6]).unwrap();
        assert_eq!(m.control[2], GRAVITY);
        assert!(g1.maximize(&[0.0, 0.0, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in [CaseId::NarrowRoad, CaseId::LaneChange, CaseId::Drone] {
            let g = GameSpec::new(case);
            let n = g.state_dim();
            for _ in 0..50 {
                let x = g.hj_boxes[0].sample(&mut rng);
                let mut grad = vec![0.0; n];
                for slot in [Slot::First, Slot::Second] {
                    g.terminal_grad(&x, slot, &mut grad);
                    fd_check(|y| g.terminal_loss(y, slot), &x, &grad, 1e-5, 1e-5);
                }
                // Dynamics: (∂f/∂x)ᵀλ and (∂f/∂u)ᵀλ against FD of λᵀf.
                let lam: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
                let u: Vec<f64> = g
                    .control_bounds
                    .0
                    .iter()
                    .map(|&[lo, hi]| rng.random_range(lo..hi))
                    .collect();
                let lf = |x: &[f64], u: &[f64]| {
                    let mut f = vec![0.0; n];
                    g.dynamics(x, u, &mut f);
                    f.iter().zip(&lam).map(|(a, b)| a * b).sum::<f64>()
                };
                g.dynamics_state_vjp(&x, &u, &lam, &mut grad);
                fd_check(|y| lf(y, &u), &x, &grad, 1e-5, 1e-5);
                let mut gu = vec![0.0; u.len()];
                g.dynamics_control_vjp(&x, &u, &lam, &mut gu);
                fd_check(|v| lf(&x, v), &u, &gu, 1e-6, 1e-5);
            }
        }
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in [CaseId::NarrowRoad, CaseId::LaneChange, CaseId::Drone] {
            let g = GameSpec::new(case);
            let t = tp(rng.random_range(1.0..5.0), rng.random_range(1.0..5.0));
            let nj = g.joint_dim();
            let mut checked = 0;
            while checked < 50 {
                // Place the players near the threshold so the sigmoid is active.
                let mut xj = g.sample_gt(&mut rng);
                let off = (g.collision_threshold(t) + rng.random_range(-1.5..1.5)).max(0.1);
                let r = g.relative_position(&xj);
                let s = g.distance(&xj);
                if s == 0.0 {
                    continue;
                }
                let shift = off / s;
                // Move the other player along the relative vector to set S = off.
                let n = g.state_dim();
                match case {
                    CaseId::NarrowRoad => {
                        xj[n] = g.road_length - xj[0] - r[0] * shift;
                        xj[n + 1] = xj[1] + r[1] * shift;
                    }
                    CaseId::LaneChange => {
                        xj[n] = xj[0] + r[0] * shift;
                        xj[n + 1] = xj[1] + r[1] * shift;
                    }
                    CaseId::Drone => {
                        xj[n] = g.offset_xy[0] - xj[0] - r[0] * shift;
                        xj[n + 1] = g.offset_xy[1] - xj[1] - r[1] * shift;
                        xj[n + 2] = xj[2] + r[2] * shift;
                    }
                }
                assert!((g.distance(&xj) - off).abs() < 1e-9);
                let mut grad = vec![0.0; nj];
                g.penalty_grad(t, &xj, &mut grad);
                fd_check(|y| g.penalty(t, y), &xj, &grad, 1e-5, 1e-5);
                checked += 1;
            }
        }
    }

    #[test]
    fn penalty_strictly_decreasing_in_distance() {
        let g = GameSpec::new(CaseId::LaneChange);
        let t = tp(3.0, 2.0);
        let mut prev = f64::INFINITY;
        for i in 0..400 {
            let s = i as f64 * 0.01;
            let c = g.penalty_at_distance(t, s);
            assert!(c < prev);
            prev = c;
        }
    }

    #[test]
    fn box_sampling_stays_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in [CaseId::NarrowRoad, CaseId::LaneChange, CaseId::Drone] {
            let g = GameSpec::new(case);
            for _ in 0..100 {
                let x = g.sample_hj(&mut rng);
                assert!(g.hj_boxes[0].contains(&x[..g.state_dim()]));
                assert!(g.hj_boxes[1].contains(&x[g.state_dim()..]));
            }
        }
    }

    #[test]
    fn overrides_apply() {
        let o = GameOverrides {
            penalty_scale: Some(0.0),
            ..Default::default()
        };
        let g = GameSpec::with_overrides(CaseId::NarrowRoad, &o).unwrap();
        assert_eq!(g.penalty_scale, 0.0);
        assert_eq!(g.horizon, 3.0);
        assert!("case9".parse::<CaseId>().is_err());
    }

    proptest::proptest! {
        #[test]
        fn threshold_is_symmetric(a in 1.0f64..=5.0, b in 1.0f64..=5.0) {
            for case in [CaseId::NarrowRoad, CaseId::LaneChange, CaseId::Drone] {
                let g = GameSpec::new(case);
                proptest::prop_assert_eq!(
                    g.collision_threshold(tp(a, b)),
                    g.collision_threshold(tp(b, a))
                );
            }
        }
    }
}
