//! Relative-position lattice and the Boolean constraint field on it.

use arrayvec::ArrayVec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{CaseId, GameModel, GameSpec, TypePair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeAxis {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub n_points: usize,
}

impl LatticeAxis {
    pub fn coordinate(&self, i: usize) -> f64 {
        if self.n_points == 1 {
            0.5 * (self.lo + self.hi)
        } else {
            self.lo + (self.hi - self.lo) * i as f64 / (self.n_points - 1) as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub case: CaseId,
    pub axes: Vec<LatticeAxis>,
}

impl Lattice {
    /// Grid over relative position covering 1.2 times the largest threshold
    /// on each side: 30×30 for the planar cases, 12×12×12 for the drones.
    pub fn default_for(spec: &GameSpec) -> Lattice {
        let half = 1.2 * spec.max_threshold();
        let (names, n): (&[&str], usize) = match spec.case {
            CaseId::NarrowRoad | CaseId::LaneChange => (&["dx", "dy"], 30),
            CaseId::Drone => (&["dx", "dy", "dz"], 12),
        };
        Lattice::uniform(spec.case, names, half, n)
    }

    pub fn uniform(case: CaseId, names: &[&str], half: f64, n: usize) -> Lattice {
        Lattice {
            case,
            axes: names
                .iter()
                .map(|s| LatticeAxis {
                    name: s.to_string(),
                    lo: -half,
                    hi: half,
                    n_points: n,
                })
                .collect(),
        }
    }

    /// L, the node count.
    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.n_points).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Node `j` in row-major order (last axis fastest).
    pub fn node(&self, mut j: usize) -> ArrayVec<f64, 3> {
        let mut out = ArrayVec::from([0.0; 3]);
        out.truncate(self.axes.len());
        for (k, axis) in self.axes.iter().enumerate().rev() {
            out[k] = axis.coordinate(j % axis.n_points);
            j /= axis.n_points;
        }
        out
    }
}

/// An ego-first joint state whose relative position is `r`.
pub fn representative_state(spec: &GameSpec, r: &[f64]) -> Vec<f64> {
    let n = spec.state_dim();
    let mut x = vec![0.0; 2 * n];
    match spec.case {
        CaseId::NarrowRoad => {
            x[n] = spec.road_length - r[0];
            x[n + 1] = r[1];
        }
        CaseId::LaneChange => {
            x[n] = r[0];
            x[n + 1] = r[1];
        }
        CaseId::Drone => {
            x[n] = spec.offset_xy[0] - r[0];
            x[n + 1] = spec.offset_xy[1] - r[1];
            x[n + 2] = r[2];
        }
    }
    x
}

/// a(X, θ): the constraint indicator at every lattice node, as 0.0 / 1.0.
pub fn build_branch_input(spec: &GameSpec, tp: TypePair, lattice: &Lattice) -> Result<Vec<f64>> {
    if lattice.case != spec.case {
        return Err(Error::Config(format!(
            "lattice is for case {}, game is {}",
            lattice.case, spec.case
        )));
    }
    Ok((0..lattice.len())
        .map(|j| {
            let x = representative_state(spec, &lattice.node(j));
            f64::from(spec.constraint_indicator(tp, &x))
        })
        .collect())
}
