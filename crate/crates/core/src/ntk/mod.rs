//! Empirical neural tangent kernel of a trained operator.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bvp::SupervisedSample;
use crate::error::{Error, Result};
use crate::game::TypePair;
use crate::operator::{Activation, Operator};
use crate::rng::substream;

/// Eigenvalues at or below this are replaced by it before dividing.
pub const LAMBDA_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NtkConfig {
    /// Kernel points per type pair.
    pub m: usize,
}

impl Default for NtkConfig {
    fn default() -> Self {
        NtkConfig { m: 200 }
    }
}

/// A kernel point: ego-first joint state and time.
#[derive(Clone, Debug, PartialEq)]
pub struct NtkPoint {
    pub joint_state: Vec<f64>,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NtkResult {
    pub activation: Activation,
    pub type_pair: TypePair,
    pub seed: u64,
    pub m: usize,
    /// Row-major `m × m`.
    pub kernel: Vec<f64>,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    pub lambda_max: f64,
    /// Smallest eigenvalue as computed, before flooring.
    pub lambda_min: f64,
    pub kappa: f64,
    /// The smallest eigenvalue was floored, or lies within round-off of
    /// zero (`≤ m·ε·λ_max`), so κ reflects round-off rather than the
    /// kernel.
    pub floored: bool,
}

impl NtkResult {
    pub fn is_psd(&self, tol: f64) -> bool {
        self.lambda_min >= -tol * self.lambda_max
    }
}

/// `m` supervised samples of one type pair, drawn without replacement on
/// substream `(seed, "ntk", [θ1 bits, θ2 bits])`.
pub fn sample_points(samples: &[SupervisedSample], tp: TypePair, m: usize, seed: u64) -> Result<Vec<NtkPoint>> {
    let pool: Vec<&SupervisedSample> = samples.iter().filter(|s| s.type_pair == tp).collect();
    if m == 0 || pool.len() < m {
        return Err(Error::Config(format!(
            "NTK needs {m} samples of type pair {tp}, dataset has {}",
            pool.len()
        )));
    }
    let key = tp.key();
    let mut rng = substream(seed, "ntk", &[key.0, key.1]);
    let mut idx = sample(&mut rng, pool.len(), m).into_vec();
    idx.sort_unstable();
    Ok(idx
        .into_iter()
        .map(|i| NtkPoint {
            joint_state: pool[i].joint_state.clone(),
            t: pool[i].t,
        })
        .collect())
}

/// Parameter Jacobian of the output, one row per point.
pub fn jacobian(op: &Operator, tp: TypePair, points: &[NtkPoint]) -> Result<DMatrix<f64>> {
    let br = op.branch_eval(tp)?;
    let rows: Vec<Vec<f64>> = points
        .par_iter()
        .map(|p| op.parameter_gradient(&br, &p.joint_state, p.t))
        .collect::<Result<_>>()?;
    let n = op.n_params();
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite parameter Jacobian".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]))
}

/// `K = J Jᵀ` with its spectrum and condition number.
pub fn ntk_matrix(op: &Operator, tp: TypePair, points: &[NtkPoint], seed: u64) -> Result<NtkResult> {
    if points.is_empty() {
        return Err(Error::Config("NTK needs at least one point".into()));
    }
    let j = jacobian(op, tp, points)?;
    let k = &j * j.transpose();
    let m = points.len();
    let sym = DMatrix::from_fn(m, m, |a, b| 0.5 * (k[(a, b)] + k[(b, a)]));
    let mut eig: Vec<f64> = SymmetricEigen::new(sym.clone()).eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let lambda_max = eig[0];
    let lambda_min = eig[m - 1];
    let floored = lambda_min <= LAMBDA_FLOOR || lambda_min <= m as f64 * f64::EPSILON * lambda_max;
    let kappa = if m == 1 {
        1.0
    } else {
        lambda_max / lambda_min.max(LAMBDA_FLOOR)
    };
    Ok(NtkResult {
        activation: op.activation,
        type_pair: tp,
        seed,
        m,
        kernel: (0..m)
            .flat_map(|a| (0..m).map(move |b| (a, b)))
            .map(|(a, b)| sym[(a, b)])
            .collect(),
        eigenvalues: eig,
        lambda_max,
        lambda_min,
        kappa,
        floored: floored && m > 1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub theta1: f64,
    pub theta2: f64,
    /// κ(tanh) / κ(sin)
    pub r1: f64,
    /// κ(tanh) / κ(relu)
    pub r2: f64,
}

/// Ratios per type pair from results that share point samples. Needs one
/// result per activation for every pair.
pub fn ratio_table(results: &[NtkResult], pairs: &[TypePair]) -> Result<Vec<RatioRow>> {
    let find = |a: Activation, tp: TypePair| {
        results
            .iter()
            .find(|r| r.activation == a && r.type_pair == tp)
            .map(|r| r.kappa)
            .ok_or_else(|| Error::Artifact(format!("no {a} NTK result for type pair {tp}")))
    };
    pairs
        .iter()
        .map(|&tp| {
            let t = find(Activation::Tanh, tp)?;
            let [theta1, theta2] = tp.as_array();
            Ok(RatioRow {
                theta1,
                theta2,
                r1: t / find(Activation::Sin, tp)?,
                r2: t / find(Activation::Relu, tp)?,
            })
        })
        .collect()
}

/// Reference ratios from full-budget lane-change training, `(θ1, θ2, r1, r2)`.
pub const REFERENCE_RATIOS: [(f64, f64, f64, f64); 4] = [
    (1.0, 1.0, 1.97e-3, 1.40e-10),
    (1.0, 5.0, 4.53e-3, 1.43e-10),
    (5.0, 1.0, 5.98e-5, 2.37e-9),
    (5.0, 5.0, 1.98e-4, 1.41e-8),
];

fn csv_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Artifact(format!("{}: {e}", path.display()))
}

/// `activation, theta1, theta2, kappa, floored_flag, lambda_max, lambda_min, m, seed`
pub fn write_ntk_csv(path: &Path, results: &[NtkResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record([
        "activation",
        "theta1",
        "theta2",
        "kappa",
        "floored_flag",
        "lambda_max",
        "lambda_min",
        "m",
        "seed",
    ])
    .map_err(|e| csv_err(path, e))?;
    for r in results {
        let [a, b] = r.type_pair.as_array();
        w.write_record([
            r.activation.to_string(),
            a.to_string(),
            b.to_string(),
            format!("{:?}", r.kappa),
            (r.floored as u8).to_string(),
            format!("{:?}", r.lambda_max),
            format!("{:?}", r.lambda_min),
            r.m.to_string(),
            r.seed.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| csv_err(path, e))
}

/// Rows of `ntk.csv` as `(activation, θ1, θ2, κ, floored)`.
pub fn read_ntk_csv(path: &Path) -> Result<Vec<(Activation, f64, f64, f64, bool)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != 9 {
            return Err(csv_err(path, format!("expected 9 columns, found {}", rec.len())));
        }
        let f = |i: usize| rec[i].parse::<f64>().map_err(|e| csv_err(path, e));
        out.push((rec[0].parse::<Activation>()?, f(1)?, f(2)?, f(3)?, &rec[4] == "1"));
    }
    Ok(out)
}

/// `theta1, theta2, r1, r2, ref_r1, ref_r2`; reference columns are empty
/// for pairs without a reference value.
pub fn write_ratios_csv(path: &Path, rows: &[RatioRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["theta1", "theta2", "r1", "r2", "ref_r1", "ref_r2"])
        .map_err(|e| csv_err(path, e))?;
    for r in rows {
        let reference = REFERENCE_RATIOS.iter().find(|x| x.0 == r.theta1 && x.1 == r.theta2);
        let (a, b) = reference.map_or((String::new(), String::new()), |x| {
            (format!("{:?}", x.2), format!("{:?}", x.3))
        });
        w.write_record([
            r.theta1.to_string(),
            r.theta2.to_string(),
            format!("{:?}", r.r1),
            format!("{:?}", r.r2),
            a,
            b,
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| csv_err(path, e))
}

pub fn read_ratios_csv(path: &Path) -> Result<Vec<RatioRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != 6 {
            return Err(csv_err(path, format!("expected 6 columns, found {}", rec.len())));
        }
        let f = |i: usize| rec[i].parse::<f64>().map_err(|e| csv_err(path, e));
        out.push(RatioRow {
            theta1: f(0)?,
            theta2: f(1)?,
            r1: f(2)?,
            r2: f(3)?,
        });
    }
    Ok(out)
}
