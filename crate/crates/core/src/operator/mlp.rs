//! Fully connected networks over a flat parameter vector, with forward-mode
//! input tangents and a reverse pass through both the outputs and the
//! tangents.
//!
//! Hidden layers compute `y = σ(α (W h + b))` with `α = 10 s` and one
//! trainable slope `s` per layer; the output layer is affine. Weights are
//! row-major `(n_out, n_in)`, each layer stored as `W` then `b`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SLOPE_GAIN: f64 = 10.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Sin,
    /// Derivative taken as 0 at exactly 0.
    Relu,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sin => "sin",
            Activation::Relu => "relu",
        }
    }

    /// `(σ, σ', σ'')` at `a`.
    #[inline]
    pub fn eval(self, a: f64) -> (f64, f64, f64) {
        match self {
            Activation::Tanh => {
                let y = a.tanh();
                let d = 1.0 - y * y;
                (y, d, -2.0 * y * d)
            }
            Activation::Sin => {
                let (s, c) = a.sin_cos();
                (s, c, -s)
            }
            Activation::Relu => {
                if a > 0.0 {
                    (a, 1.0, 0.0)
                } else {
                    (0.0, 0.0, 0.0)
                }
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "sin" => Ok(Activation::Sin),
            "relu" => Ok(Activation::Relu),
            _ => Err(Error::Config(format!("unknown activation '{s}' (tanh, sin, relu)"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpLayout {
    /// `[n_in, hidden..., n_out]`
    pub sizes: Vec<usize>,
    /// Start of the weights in the flat vector.
    pub offset: usize,
    /// Start of this network's hidden-layer slopes.
    pub slope_offset: usize,
}

impl MlpLayout {
    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn n_hidden(&self) -> usize {
        self.sizes.len() - 2
    }

    pub fn n_weights(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// `(weight offset, bias offset, n_in, n_out)` of layer `l`.
    pub fn layer(&self, l: usize) -> (usize, usize, usize, usize) {
        let mut off = self.offset;
        for w in self.sizes.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        let (ni, no) = (self.sizes[l], self.sizes[l + 1]);
        (off, off + ni * no, ni, no)
    }
}

/// Values kept from a forward pass for the reverse pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    /// Directions carried (0 for a plain forward pass).
    pub dirs: usize,
    /// Layer inputs `h_l`.
    inputs: Vec<Vec<f64>>,
    /// Layer input tangents, `dirs × n_in` row-major.
    input_tangents: Vec<Vec<f64>>,
    /// Hidden-layer pre-activations `p = W h + b` (before the slope).
    pre: Vec<Vec<f64>>,
    pre_tangents: Vec<Vec<f64>>,
    pub out: Vec<f64>,
    /// `dirs × n_out`
    pub out_tangents: Vec<f64>,
}

#[inline]
fn affine(w: &[f64], b: &[f64], h: &[f64], out: &mut [f64]) {
    let ni = h.len();
    for (j, o) in out.iter_mut().enumerate() {
        let row = &w[j * ni..(j + 1) * ni];
        *o = b[j] + row.iter().zip(h).map(|(a, c)| a * c).sum::<f64>();
    }
}

#[inline]
fn linear(w: &[f64], h: &[f64], out: &mut [f64]) {
    let ni = h.len();
    for (j, o) in out.iter_mut().enumerate() {
        let row = &w[j * ni..(j + 1) * ni];
        *o = row.iter().zip(h).map(|(a, c)| a * c).sum::<f64>();
    }
}

/// `out += Wᵀ v`
#[inline]
fn transpose_acc(w: &[f64], v: &[f64], out: &mut [f64]) {
    let ni = out.len();
    for (j, &vj) in v.iter().enumerate() {
        if vj == 0.0 {
            continue;
        }
        let row = &w[j * ni..(j + 1) * ni];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * vj;
        }
    }
}

/// `G += v hᵀ`
#[inline]
fn outer_acc(g: &mut [f64], v: &[f64], h: &[f64]) {
    let ni = h.len();
    for (j, &vj) in v.iter().enumerate() {
        if vj == 0.0 {
            continue;
        }
        let row = &mut g[j * ni..(j + 1) * ni];
        for (o, a) in row.iter_mut().zip(h) {
            *o += vj * a;
        }
    }
}

/// Forward pass. With `dirs > 0` the tangents of the outputs along the first
/// `dirs` input coordinates are carried as well.
pub fn forward(layout: &MlpLayout, params: &[f64], act: Activation, x: &[f64], dirs: usize) -> Tape {
    let nl = layout.n_layers();
    let mut tape = Tape {
        dirs,
        ..Tape::default()
    };
    let mut h = x.to_vec();
    let mut ht = vec![0.0; dirs * x.len()];
    for d in 0..dirs {
        ht[d * x.len() + d] = 1.0;
    }
    for l in 0..nl {
        let (wo, bo, ni, no) = layout.layer(l);
        let w = &params[wo..wo + ni * no];
        let b = &params[bo..bo + no];
        let mut p = vec![0.0; no];
        affine(w, b, &h, &mut p);
        let mut pt = vec![0.0; dirs * no];
        for d in 0..dirs {
            linear(w, &ht[d * ni..(d + 1) * ni], &mut pt[d * no..(d + 1) * no]);
        }
        if l + 1 == nl {
            tape.inputs.push(h);
            tape.input_tangents.push(ht);
            tape.out = p;
            tape.out_tangents = pt;
            break;
        }
        let alpha = SLOPE_GAIN * params[layout.slope_offset + l];
        let mut y = vec![0.0; no];
        let mut yt = vec![0.0; dirs * no];
        for j in 0..no {
            let (s, ds, _) = act.eval(alpha * p[j]);
            y[j] = s;
            for d in 0..dirs {
                yt[d * no + j] = ds * alpha * pt[d * no + j];
            }
        }
        tape.inputs.push(std::mem::replace(&mut h, y));
        tape.input_tangents.push(std::mem::replace(&mut ht, yt));
        tape.pre.push(p);
        tape.pre_tangents.push(pt);
    }
    tape
}

/// Reverse pass: accumulates into `grad` the parameter gradient of
/// `Σ out_bar·out + Σ tan_bar·out_tangents`.
pub fn backward(
    layout: &MlpLayout,
    params: &[f64],
    act: Activation,
    tape: &Tape,
    out_bar: &[f64],
    tan_bar: &[f64],
    grad: &mut [f64],
) {
    let dirs = tape.dirs;
    let nl = layout.n_layers();
    let mut ybar = out_bar.to_vec();
    let mut ytbar = if dirs > 0 { tan_bar.to_vec() } else { Vec::new() };
    for l in (0..nl).rev() {
        let (wo, bo, ni, no) = layout.layer(l);
        let w = &params[wo..wo + ni * no];
        // Seeds on p and its tangents.
        let (pbar, ptbar) = if l + 1 == nl {
            (std::mem::take(&mut ybar), std::mem::take(&mut ytbar))
        } else {
            let so = layout.slope_offset + l;
            let alpha = SLOPE_GAIN * params[so];
            let p = &tape.pre[l];
            let pt = &tape.pre_tangents[l];
            let mut pbar = vec![0.0; no];
            let mut ptbar = vec![0.0; dirs * no];
            let mut alpha_bar = 0.0;
            for j in 0..no {
                let (_, ds, dds) = act.eval(alpha * p[j]);
                let mut abar = ybar[j] * ds;
                for d in 0..dirs {
                    let yb = ytbar[d * no + j];
                    let ptv = pt[d * no + j];
                    abar += yb * dds * alpha * ptv;
                    ptbar[d * no + j] = yb * ds * alpha;
                    alpha_bar += yb * ds * ptv;
                }
                alpha_bar += abar * p[j];
                pbar[j] = alpha * abar;
            }
            grad[so] += SLOPE_GAIN * alpha_bar;
            (pbar, ptbar)
        };
        let h = &tape.inputs[l];
        let ht = &tape.input_tangents[l];
        outer_acc(&mut grad[wo..wo + ni * no], &pbar, h);
        for d in 0..dirs {
            outer_acc(
                &mut grad[wo..wo + ni * no],
                &ptbar[d * no..(d + 1) * no],
                &ht[d * ni..(d + 1) * ni],
            );
        }
        for (g, v) in grad[bo..bo + no].iter_mut().zip(&pbar) {
            *g += v;
        }
        if l > 0 {
            ybar = vec![0.0; ni];
            transpose_acc(w, &pbar, &mut ybar);
            ytbar = vec![0.0; dirs * ni];
            for d in 0..dirs {
                transpose_acc(w, &ptbar[d * no..(d + 1) * no], &mut ytbar[d * ni..(d + 1) * ni]);
            }
        }
    }
}
