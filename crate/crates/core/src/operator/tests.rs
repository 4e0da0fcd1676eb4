use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::game::{CaseId, PlayerType};

fn tp(a: f64, b: f64) -> TypePair {
    TypePair::new(a, b).unwrap()
}

fn random_operator(case: CaseId, act: Activation, seed: u64) -> Operator {
    let spec = GameSpec::new(case);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = OperatorConfig {
        activation: act,
        ..OperatorConfig::default()
    };
    let mut op = Operator::new(&spec, &cfg, &mut rng).unwrap();
    for i in op.slope_range() {
        op.params[i] = rng.random_range(0.05..0.2);
    }
    // Non-zero biases so every code path carries weight.
    for layout in [op.branch.clone(), op.trunk.clone()] {
        for l in 0..layout.n_layers() {
            let (_, bo, _, no) = layout.layer(l);
            for b in &mut op.params[bo..bo + no] {
                *b = rng.random_range(-0.1..0.1);
            }
        }
    }
    op
}

fn random_input(op: &Operator, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64, TypePair) {
    let z: Vec<f64> = (0..op.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut v = op.normalizer.denormalize(&z);
    let t = v.pop().unwrap();
    let pair = tp(rng.random_range(1.0..=5.0), rng.random_range(1.0..=5.0));
    (v, t, pair)
}

fn small_config(q: usize, act: Activation) -> OperatorConfig {
    OperatorConfig {
        activation: act,
        q,
        width: 4,
        depth: 3,
        slope_init: 0.1,
    }
}

#[test]
fn constant_stub_is_the_product_of_biases() {
    let spec = GameSpec::new(CaseId::NarrowRoad);
    let mut op = Operator::with_layout(
        &spec,
        &small_config(1, Activation::Tanh),
        Lattice::default_for(&spec),
        Normalizer::for_spec(&spec),
    );
    let (_, bb, _, _) = op.branch.layer(3);
    let (_, tb, _, _) = op.trunk.layer(3);
    op.params[bb] = 2.0;
    op.params[tb] = 3.0;
    let x = [20.0, 4.0, 0.0, 18.0, 20.0, 4.0, 0.0, 18.0];
    assert_eq!(op.forward(&x, 1.0, tp(1.0, 1.0)).unwrap(), 6.0);
    let vg = op.value_and_gradient(&x, 1.0, tp(3.0, 2.0)).unwrap();
    assert!(vg.grad_x.iter().all(|g| *g == 0.0));
    assert_eq!(vg.grad_t, 0.0);
}

#[test]
fn one_hot_branch_selects_a_trunk_basis() {
    let mut op = random_operator(CaseId::LaneChange, Activation::Sin, 4);
    let (wo, bo, ni, no) = op.branch.layer(3);
    op.params[wo..wo + ni * no].iter_mut().for_each(|w| *w = 0.0);
    op.params[bo..bo + no].iter_mut().for_each(|w| *w = 0.0);
    let k = 17;
    op.params[bo + k] = 1.0;
    let x = [10.0, 2.0, 0.05, 20.0, 12.0, 6.0, -0.05, 21.0];
    let z = op.trunk_input(&x, 2.0).unwrap();
    let trunk = mlp::forward(&op.trunk, &op.params, op.activation, &z, 0);
    assert_eq!(op.forward(&x, 2.0, tp(2.0, 4.0)).unwrap(), trunk.out[k]);
}

/// Straight-line re-implementation of both subnetworks.
fn reference_forward(op: &Operator, x: &[f64], t: f64, pair: TypePair) -> f64 {
    fn net(layout: &MlpLayout, p: &[f64], act: Activation, input: Vec<f64>) -> Vec<f64> {
        let mut h = input;
        let nl = layout.sizes.len() - 1;
        let mut off = layout.offset;
        for l in 0..nl {
            let (ni, no) = (layout.sizes[l], layout.sizes[l + 1]);
            let w = &p[off..off + ni * no];
            let b = &p[off + ni * no..off + ni * no + no];
            off += ni * no + no;
            let mut y = vec![0.0; no];
            for j in 0..no {
                let mut z = b[j];
                for i in 0..ni {
                    z += w[j * ni + i] * h[i];
                }
                y[j] = if l + 1 < nl {
                    let a = 10.0 * p[layout.slope_offset + l] * z;
                    match act {
                        Activation::Tanh => a.tanh(),
                        Activation::Sin => a.sin(),
                        Activation::Relu => a.max(0.0),
                    }
                } else {
                    z
                };
            }
            h = y;
        }
        h
    }
    let eta = op.spec.collision_threshold(pair);
    let bits: Vec<f64> = (0..op.lattice.len())
        .map(|j| {
            let r = op.lattice.node(j);
            let s = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if s <= eta {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let mut z = Vec::new();
    for (j, v) in x.iter().chain(std::iter::once(&t)).enumerate() {
        let (lo, hi) = (op.normalizer.lo[j], op.normalizer.hi[j]);
        z.push(2.0 * (v - lo) / (hi - lo) - 1.0);
    }
    let b = net(&op.branch, &op.params, op.activation, bits);
    let tr = net(&op.trunk, &op.params, op.activation, z);
    op.output_scale * b.iter().zip(&tr).map(|(a, c)| a * c).sum::<f64>()
}

#[test]
fn forward_matches_reference_implementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in [CaseId::NarrowRoad, CaseId::LaneChange, CaseId::Drone] {
        for act in [Activation::Tanh, Activation::Sin, Activation::Relu] {
            let mut op = random_operator(case, act, rng.random());
            op.output_scale = 3.5;
            for _ in 0..5 {
                let (x, t, pair) = random_input(&op, &mut rng);
                let a = op.forward(&x, t, pair).unwrap();
                let b = reference_forward(&op, &x, t, pair);
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{case} {act}: {a} vs {b}");
            }
        }
    }
}

/// Central differences in normalized units with step `h`, returned in
/// physical units.
pub(crate) fn fd_gradient(op: &Operator, x: &[f64], t: f64, pair: TypePair, h: f64) -> Vec<f64> {
    let mut v = x.to_vec();
    v.push(t);
    (0..v.len())
        .map(|j| {
            let step = h / op.normalizer.gain(j);
            let mut p = v.clone();
            let mut m = v.clone();
            p[j] += step;
            m[j] -= step;
            let n = v.len() - 1;
            let fp = op.forward(&p[..n], p[n], pair).unwrap();
            let fm = op.forward(&m[..n], m[n], pair).unwrap();
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in [CaseId::NarrowRoad, CaseId::LaneChange, CaseId::Drone] {
        for act in [Activation::Tanh, Activation::Sin] {
            let op = random_operator(case, act, rng.random());
            for _ in 0..20 {
                let (x, t, pair) = random_input(&op, &mut rng);
                let vg = op.value_and_gradient(&x, t, pair).unwrap();
                let fd = fd_gradient(&op, &x, t, pair, 1e-4);
                let an: Vec<f64> = vg.grad_x.iter().chain(std::iter::once(&vg.grad_t)).copied().collect();
                for j in 0..an.len() {
                    // Compare in normalized units so components are on one scale.
                    let g = op.normalizer.gain(j);
                    let (a, f) = (an[j] / g, fd[j] / g);
                    let noise = 1e-12 * (1.0 + vg.value.abs());
                    assert!((a - f).abs() <= 1e-5 * a.abs() + noise, "{case} {act} {j}: {a} vs {f}");
                }
            }
        }
    }
}

#[test]
fn linear_trunk_gradient_is_the_product_of_weights() {
    // relu with every hidden pre-activation positive is affine.
    let spec = GameSpec::new(CaseId::NarrowRoad);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut op = Operator::new(&spec, &small_config(3, Activation::Relu), &mut rng).unwrap();
    for l in 0..3 {
        let (wo, bo, ni, no) = op.trunk.layer(l);
        for w in &mut op.params[wo..wo + ni * no] {
            *w = rng.random_range(0.0..0.3);
        }
        for b in &mut op.params[bo..bo + no] {
            *b = 5.0;
        }
    }
    let x = [30.0, 4.0, 0.1, 20.0, 40.0, 3.0, -0.1, 22.0];
    let vg = op.value_and_gradient(&x, 1.5, tp(1.0, 2.0)).unwrap();
    let b = op.branch_eval(tp(1.0, 2.0)).unwrap().coefficients().to_vec();
    // Row vector bᵀ W4 (α3 W3) (α2 W2) (α1 W1).
    let mut row = b;
    for l in (0..4).rev() {
        let (wo, _, ni, no) = op.trunk.layer(l);
        let mut next = vec![0.0; ni];
        for j in 0..no {
            for i in 0..ni {
                next[i] += row[j] * op.params[wo + j * ni + i];
            }
        }
        row = next;
    }
    let slope_prod: f64 = (0..3).map(|l| 10.0 * op.params[op.trunk.slope_offset + l]).product();
    for j in 0..8 {
        let expect = op.output_scale * slope_prod * row[j] * op.normalizer.gain(j);
        assert!((vg.grad_x[j] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut op = random_operator(CaseId::Drone, Activation::Sin, 11);
    op.output_scale = 123.25;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("op.ckpt");
    save_checkpoint(
        &path,
        &op,
        &[("adam_m", &[1.0, 2.0])],
        &serde_json::json!({"iteration": 7}),
    )
    .unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.operator, op);
    assert_eq!(ck.blocks["adam_m"], vec![1.0, 2.0]);
    assert_eq!(ck.extra["iteration"], 7);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let (x, t, pair) = random_input(&op, &mut rng);
        assert_eq!(
            op.forward(&x, t, pair).unwrap().to_bits(),
            ck.operator.forward(&x, t, pair).unwrap().to_bits()
        );
    }
    assert!(matches!(
        Operator::load(&path, CaseId::NarrowRoad),
        Err(Error::Artifact(_))
    ));
    assert!(Operator::load(&path, CaseId::Drone).is_ok());
}

#[test]
fn legacy_and_corrupt_checkpoints_are_rejected() {
    let op = random_operator(CaseId::NarrowRoad, Activation::Tanh, 13);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("op.ckpt");
    op.save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[8..12].copy_from_slice(&0u32.to_le_bytes());
    assert!(matches!(
        checkpoint::decode(&bytes),
        Err(Error::Version {
            found: 0,
            expected: CHECKPOINT_VERSION
        })
    ));
    let good = std::fs::read(&path).unwrap();
    assert!(matches!(
        checkpoint::decode(&good[..good.len() - 8]),
        Err(Error::Artifact(_))
    ));
    assert!(matches!(
        checkpoint::decode(b"not a checkpoint at all"),
        Err(Error::Artifact(_))
    ));
}

#[test]
fn normalizer_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for case in [CaseId::NarrowRoad, CaseId::LaneChange, CaseId::Drone] {
        let n = Normalizer::for_spec(&GameSpec::new(case));
        for _ in 0..50 {
            let v: Vec<f64> = (0..n.dim()).map(|j| rng.random_range(n.lo[j]..n.hi[j])).collect();
            let back = n.denormalize(&n.normalize(&v));
            for (a, b) in v.iter().zip(&back) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
    }
}

#[test]
fn normalizer_covers_sampling_boxes_and_horizon() {
    for case in [CaseId::NarrowRoad, CaseId::LaneChange, CaseId::Drone] {
        let spec = GameSpec::new(case);
        let n = Normalizer::for_spec(&spec);
        let d = spec.state_dim();
        for b in spec.gt_boxes.iter().chain(&spec.hj_boxes) {
            for (j, r) in b.0.iter().enumerate() {
                for slot in 0..2 {
                    assert!(n.lo[slot * d + j] <= r[0] && n.hi[slot * d + j] >= r[1]);
                }
            }
        }
        assert_eq!((n.lo[2 * d], n.hi[2 * d]), (0.0, spec.horizon));
    }
}

#[test]
fn swapped_types_share_a_branch_input() {
    let spec = GameSpec::new(CaseId::NarrowRoad);
    let lat = Lattice::default_for(&spec);
    let a = build_branch_input(&spec, tp(1.0, 4.0), &lat).unwrap();
    let b = build_branch_input(&spec, tp(4.0, 1.0), &lat).unwrap();
    assert_eq!(a, b);
    let c = build_branch_input(&spec, tp(PlayerType::MAX, 4.0), &lat).unwrap();
    assert_ne!(a, c);
}

#[test]
fn wrong_input_length_is_rejected() {
    let op = random_operator(CaseId::NarrowRoad, Activation::Tanh, 15);
    assert!(op.forward(&[0.0; 12], 0.0, tp(1.0, 1.0)).is_err());
}
