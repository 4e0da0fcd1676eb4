//! Dormand–Prince 5(4) integrator.
//!
//! Steps are clamped so that every requested output time is hit exactly.
//! The accepted step sequence is returned as a [`Mesh`]; replaying a mesh
//! turns the integrator into a fixed-step map that is smooth in the initial
//! condition, which the shooting Jacobian relies on.

use crate::error::{Error, Result};

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
const B: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Accepted steps; `true` marks a step that ends on an output time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh(pub Vec<(f64, bool)>);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    pub atol: f64,
    pub rtol: f64,
    pub max_steps: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            atol: 1e-8,
            rtol: 1e-8,
            max_steps: 200_000,
        }
    }
}

/// Right-hand side `f(t, y, dy)`; returning an error aborts integration.
pub trait OdeRhs {
    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()>;
}

impl<F: Fn(f64, &[f64], &mut [f64]) -> Result<()>> OdeRhs for F {
    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        self(t, y, dy)
    }
}

struct Work {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    y5: Vec<f64>,
}

impl Work {
    fn new(n: usize) -> Self {
        Work {
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
            y5: vec![0.0; n],
        }
    }
}

/// One DP step from `(t, y)` with `k[0] = f(t, y)` already filled. Leaves the
/// 5th-order solution in `w.y5` and `f(t+h, y5)` in `w.k[6]`.
fn dp_step<F: OdeRhs + ?Sized>(f: &F, t: f64, y: &[f64], h: f64, w: &mut Work) -> Result<()> {
    let n = y.len();
    let rows: [&[f64]; 5] = [&A2, &A3, &A4, &A5, &A6];
    for (s, row) in rows.iter().enumerate() {
        for i in 0..n {
            let mut acc = 0.0;
            for (j, a) in row.iter().enumerate() {
                acc += a * w.k[j][i];
            }
            w.tmp[i] = y[i] + h * acc;
        }
        let (head, tail) = w.k.split_at_mut(s + 1);
        let _ = head;
        f.eval(t + C[s + 1] * h, &w.tmp, &mut tail[0])?;
    }
    for i in 0..n {
        let mut acc = 0.0;
        for (j, b) in B.iter().enumerate() {
            acc += b * w.k[j][i];
        }
        w.y5[i] = y[i] + h * acc;
    }
    let (head, tail) = w.k.split_at_mut(6);
    let _ = head;
    f.eval(t + h, &w.y5, &mut tail[0])
}

fn check_finite(y: &[f64]) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical("non-finite state during integration".into()))
    }
}

/// Integrate adaptively from `(t0, y0)`, returning the state at each time of
/// `outputs` (strictly increasing, all `> t0`) and the accepted mesh.
pub fn integrate<F: OdeRhs + ?Sized>(
    f: &F,
    t0: f64,
    y0: &[f64],
    outputs: &[f64],
    tol: Tolerances,
) -> Result<(Vec<Vec<f64>>, Mesh)> {
    let n = y0.len();
    let mut w = Work::new(n);
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut out = Vec::with_capacity(outputs.len());
    let mut mesh = Mesh::default();
    if outputs.is_empty() {
        return Ok((out, mesh));
    }
    f.eval(t, &y, &mut w.k[0])?;
    check_finite(&w.k[0])?;

    // Initial step from the derivative scale.
    let scale = |v: &[f64], i: usize| tol.atol + tol.rtol * v[i].abs();
    let d0 = (0..n).map(|i| (y[i] / scale(&y, i)).powi(2)).sum::<f64>() / n as f64;
    let d1 = (0..n).map(|i| (w.k[0][i] / scale(&y, i)).powi(2)).sum::<f64>() / n as f64;
    let span = outputs[outputs.len() - 1] - t0;
    let mut h = if d0 < 1e-10 || d1 < 1e-10 {
        1e-6
    } else {
        0.01 * (d0 / d1).sqrt()
    }
    .min(span);

    let mut next = 0;
    let mut steps = 0;
    while next < outputs.len() {
        let target = outputs[next];
        let remaining = target - t;
        let hits = h >= remaining * (1.0 - 1e-12);
        let step = if hits { remaining } else { h };
        steps += 1;
        if steps > tol.max_steps {
            return Err(Error::Numerical("step limit exceeded during integration".into()));
        }
        if step <= 1e-14 * t.abs().max(1.0) {
            return Err(Error::Numerical("step size underflow during integration".into()));
        }
        let trial = dp_step(f, t, &y, step, &mut w);
        let err = match trial {
            Ok(()) => {
                let mut acc = 0.0;
                for i in 0..n {
                    let mut e = 0.0;
                    for (j, c) in E.iter().enumerate() {
                        e += c * w.k[j][i];
                    }
                    let sc = tol.atol + tol.rtol * y[i].abs().max(w.y5[i].abs());
                    acc += (step * e / sc).powi(2);
                }
                (acc / n as f64).sqrt()
            }
            Err(_) => f64::INFINITY,
        };
        if err.is_finite() && err <= 1.0 {
            t = if hits { target } else { t + step };
            std::mem::swap(&mut y, &mut w.y5);
            w.k.swap(0, 6);
            mesh.0.push((step, hits));
            if hits {
                out.push(y.clone());
                next += 1;
            }
            let fac = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            // Keep the free step size when this step was shortened to land on an output.
            if !hits || step >= h {
                h = step * fac;
            }
        } else {
            let fac = if err.is_finite() {
                (0.9 * err.powf(-0.2)).clamp(0.1, 0.9)
            } else {
                0.25
            };
            h = step * fac;
        }
    }
    Ok((out, mesh))
}

/// Replay a recorded mesh with fixed steps.
pub fn replay<F: OdeRhs + ?Sized>(f: &F, t0: f64, y0: &[f64], mesh: &Mesh) -> Result<Vec<Vec<f64>>> {
    let n = y0.len();
    let mut w = Work::new(n);
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut out = Vec::new();
    f.eval(t, &y, &mut w.k[0])?;
    for &(h, hit) in &mesh.0 {
        dp_step(f, t, &y, h, &mut w)?;
        t += h;
        std::mem::swap(&mut y, &mut w.y5);
        w.k.swap(0, 6);
        check_finite(&y)?;
        if hit {
            out.push(y.clone());
        }
    }
    Ok(out)
}

/// One classical RK4 step with the right-hand side held at a fixed control.
pub fn rk4_step<F: FnMut(&[f64], &mut [f64])>(mut f: F, y: &[f64], h: f64) -> Vec<f64> {
    let n = y.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    f(y, &mut k1);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    f(&tmp, &mut k2);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    f(&tmp, &mut k3);
    for i in 0..n {
        tmp[i] = y[i] + h * k3[i];
    }
    f(&tmp, &mut k4);
    (0..n)
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}
