//! Branch-trunk operator `ϑ̂(x, t, θ) = s · Σ_k b_k(a(X, θ)) t_k(x, t)`.
//!
//! The branch sees the Boolean constraint field on the lattice, the trunk
//! sees the normalized ego-first joint state and time. `s` is a fixed output
//! scale chosen from the training values (1 by default).

pub mod checkpoint;
pub mod lattice;
pub mod mlp;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{GameModel, GameSpec, TypePair};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use lattice::{build_branch_input, Lattice, LatticeAxis};
pub use mlp::{Activation, MlpLayout, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorConfig {
    /// Set from the top-level run activation, not from the operator table.
    #[serde(skip)]
    pub activation: Activation,
    /// Number of basis functions.
    pub q: usize,
    pub width: usize,
    pub depth: usize,
    pub slope_init: f64,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        OperatorConfig {
            activation: Activation::Tanh,
            q: 64,
            width: 64,
            depth: 3,
            slope_init: 0.1,
        }
    }
}

impl OperatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q == 0 || self.width == 0 || self.depth == 0 || !(self.slope_init > 0.0) {
            return Err(Error::Config(
                "operator q, width, depth and slope_init must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-dimension affine map of `[lo, hi]` onto `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Normalizer {
    /// Covers both players' ground-truth and PDE-point boxes in either slot,
    /// and `[0, T]` for the last (time) coordinate.
    pub fn for_spec(spec: &GameSpec) -> Normalizer {
        let b = spec.gt_boxes[0]
            .union(&spec.gt_boxes[1])
            .union(&spec.hj_boxes[0])
            .union(&spec.hj_boxes[1]);
        let mut lo: Vec<f64> = b.0.iter().map(|r| r[0]).collect();
        let mut hi: Vec<f64> = b.0.iter().map(|r| r[1]).collect();
        lo.extend_from_within(..);
        hi.extend_from_within(..);
        lo.push(0.0);
        hi.push(spec.horizon());
        Normalizer { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// `d normalized / d physical` per dimension.
    pub fn gain(&self, j: usize) -> f64 {
        2.0 / (self.hi[j] - self.lo[j])
    }

    pub fn normalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(j, x)| (x - self.lo[j]) * self.gain(j) - 1.0)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(j, v)| self.lo[j] + (v + 1.0) * 0.5 * (self.hi[j] - self.lo[j]))
            .collect()
    }

    /// The physical box inflated by `frac` of its width on each side.
    pub fn contains_inflated(&self, v: &[f64], frac: f64) -> bool {
        v.iter().enumerate().all(|(j, x)| {
            let w = self.hi[j] - self.lo[j];
            *x >= self.lo[j] - frac * w && *x <= self.hi[j] + frac * w
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueAndGradient {
    pub value: f64,
    /// Physical units, ego-first joint-state order.
    pub grad_x: Vec<f64>,
    pub grad_t: f64,
}

/// Branch coefficients for one type pair.
#[derive(Clone, Debug)]
pub struct BranchEval {
    pub type_pair: TypePair,
    pub tape: Tape,
}

impl BranchEval {
    pub fn coefficients(&self) -> &[f64] {
        &self.tape.out
    }
}

/// Trunk evaluation at one point, with the operator value and (optionally)
/// its physical gradient over `(x, t)`.
#[derive(Clone, Debug)]
pub struct PointEval {
    pub value: f64,
    /// `[∂x..., ∂t]`, empty when evaluated without gradient.
    pub grad: Vec<f64>,
    tape: Tape,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Operator {
    pub spec: GameSpec,
    pub activation: Activation,
    pub q: usize,
    pub lattice: Lattice,
    pub normalizer: Normalizer,
    pub output_scale: f64,
    pub branch: MlpLayout,
    pub trunk: MlpLayout,
    /// Branch weights, trunk weights, branch slopes, trunk slopes.
    pub params: Vec<f64>,
}

impl Operator {
    /// Xavier-normal weights, zero biases, slopes at `slope_init`.
    pub fn new<R: Rng + ?Sized>(spec: &GameSpec, cfg: &OperatorConfig, rng: &mut R) -> Result<Operator> {
        cfg.validate()?;
        let lattice = Lattice::default_for(spec);
        let normalizer = Normalizer::for_spec(spec);
        let mut op = Operator::with_layout(spec, cfg, lattice, normalizer);
        let mut params = vec![0.0; op.params.len()];
        for layout in [&op.branch, &op.trunk] {
            for l in 0..layout.n_layers() {
                let (wo, _, ni, no) = layout.layer(l);
                let std = (2.0 / (ni + no) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("positive std");
                for w in &mut params[wo..wo + ni * no] {
                    *w = dist.sample(rng);
                }
            }
            for s in 0..layout.n_hidden() {
                params[layout.slope_offset + s] = cfg.slope_init;
            }
        }
        op.params = params;
        Ok(op)
    }

    /// Zero parameters with the layout implied by `cfg`.
    pub fn with_layout(spec: &GameSpec, cfg: &OperatorConfig, lattice: Lattice, normalizer: Normalizer) -> Operator {
        let mut bs = vec![lattice.len()];
        bs.extend(std::iter::repeat_n(cfg.width, cfg.depth));
        bs.push(cfg.q);
        let mut ts = vec![normalizer.dim()];
        ts.extend(std::iter::repeat_n(cfg.width, cfg.depth));
        ts.push(cfg.q);
        let nb: usize = bs.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let nt: usize = ts.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let branch = MlpLayout {
            sizes: bs,
            offset: 0,
            slope_offset: nb + nt,
        };
        let trunk = MlpLayout {
            sizes: ts,
            offset: nb,
            slope_offset: nb + nt + cfg.depth,
        };
        Operator {
            spec: spec.clone(),
            activation: cfg.activation,
            q: cfg.q,
            lattice,
            normalizer,
            output_scale: 1.0,
            branch,
            trunk,
            params: vec![0.0; nb + nt + 2 * cfg.depth],
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Indices of the adaptive slopes in the flat vector.
    pub fn slope_range(&self) -> std::ops::Range<usize> {
        self.branch.slope_offset..self.params.len()
    }

    /// Trunk input dimension `2n + 1`.
    pub fn input_dim(&self) -> usize {
        self.normalizer.dim()
    }

    pub fn branch_eval(&self, tp: TypePair) -> Result<BranchEval> {
        let a = build_branch_input(&self.spec, tp, &self.lattice)?;
        Ok(BranchEval {
            type_pair: tp,
            tape: mlp::forward(&self.branch, &self.params, self.activation, &a, 0),
        })
    }

    fn trunk_input(&self, xj: &[f64], t: f64) -> Result<Vec<f64>> {
        if xj.len() + 1 != self.input_dim() {
            return Err(Error::Config(format!(
                "joint state has length {}, operator expects {}",
                xj.len(),
                self.input_dim() - 1
            )));
        }
        let mut v = xj.to_vec();
        v.push(t);
        Ok(self.normalizer.normalize(&v))
    }

    pub fn point_eval(&self, br: &BranchEval, xj: &[f64], t: f64, with_grad: bool) -> Result<PointEval> {
        let z = self.trunk_input(xj, t)?;
        let d = if with_grad { z.len() } else { 0 };
        let tape = mlp::forward(&self.trunk, &self.params, self.activation, &z, d);
        let b = br.coefficients();
        let q = self.q;
        let value = self.output_scale * b.iter().zip(&tape.out).map(|(a, c)| a * c).sum::<f64>();
        let grad: Vec<f64> = (0..d)
            .map(|j| {
                let tj = &tape.out_tangents[j * q..(j + 1) * q];
                self.output_scale * self.normalizer.gain(j) * b.iter().zip(tj).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect();
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite operator output".into()));
        }
        Ok(PointEval { value, grad, tape })
    }

    /// Reverse pass of one point evaluation: adds the trunk parameter
    /// gradient of `value_bar·value + grad_bar·grad` into `grad` and the
    /// cotangent of the branch coefficients into `branch_bar`.
    pub fn point_backward(
        &self,
        br: &BranchEval,
        pe: &PointEval,
        value_bar: f64,
        grad_bar: Option<&[f64]>,
        grad: &mut [f64],
        branch_bar: &mut [f64],
    ) {
        let q = self.q;
        let s = self.output_scale;
        let b = br.coefficients();
        let dirs = pe.tape.dirs;
        let out_bar: Vec<f64> = b.iter().map(|bk| s * value_bar * bk).collect();
        let mut tan_bar = vec![0.0; dirs * q];
        for (k, bb) in branch_bar.iter_mut().enumerate() {
            *bb += s * value_bar * pe.tape.out[k];
        }
        if let Some(gb) = grad_bar {
            for j in 0..dirs {
                let w = s * gb[j] * self.normalizer.gain(j);
                if w == 0.0 {
                    continue;
                }
                for k in 0..q {
                    tan_bar[j * q + k] = w * b[k];
                    branch_bar[k] += w * pe.tape.out_tangents[j * q + k];
                }
            }
        }
        mlp::backward(
            &self.trunk,
            &self.params,
            self.activation,
            &pe.tape,
            &out_bar,
            &tan_bar,
            grad,
        );
    }

    pub fn branch_backward(&self, br: &BranchEval, branch_bar: &[f64], grad: &mut [f64]) {
        mlp::backward(
            &self.branch,
            &self.params,
            self.activation,
            &br.tape,
            branch_bar,
            &[],
            grad,
        );
    }

    pub fn forward(&self, xj: &[f64], t: f64, tp: TypePair) -> Result<f64> {
        let br = self.branch_eval(tp)?;
        Ok(self.point_eval(&br, xj, t, false)?.value)
    }

    pub fn value_and_gradient(&self, xj: &[f64], t: f64, tp: TypePair) -> Result<ValueAndGradient> {
        let br = self.branch_eval(tp)?;
        let mut pe = self.point_eval(&br, xj, t, true)?;
        let grad_t = pe.grad.pop().expect("time component");
        Ok(ValueAndGradient {
            value: pe.value,
            grad_x: pe.grad,
            grad_t,
        })
    }

    /// Gradient of the output with respect to every parameter.
    pub fn parameter_gradient(&self, br: &BranchEval, xj: &[f64], t: f64) -> Result<Vec<f64>> {
        let pe = self.point_eval(br, xj, t, false)?;
        let mut g = vec![0.0; self.n_params()];
        let mut bb = vec![0.0; self.q];
        self.point_backward(br, &pe, 1.0, None, &mut g, &mut bb);
        self.branch_backward(br, &bb, &mut g);
        Ok(g)
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.params.iter().all(|p| p.is_finite()) && self.output_scale.is_finite() {
            Ok(())
        } else {
            Err(Error::Numerical("non-finite operator parameters".into()))
        }
    }
}

#[cfg(test)]
mod tests;
