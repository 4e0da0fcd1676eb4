use super::*;
use crate::bvp::{solve_bvp, value_rate, SolverConfig, Trajectory};
use crate::game::{swap_players, GameModel, Slot};
use crate::operator::Activation;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tp(a: f64, b: f64) -> TypePair {
    TypePair::new(a, b).unwrap()
}

fn small_cfg() -> OperatorConfig {
    OperatorConfig {
        activation: Activation::Tanh,
        q: 16,
        width: 16,
        depth: 3,
        slope_init: 0.1,
    }
}

fn small_operator(case: CaseId, seed: u64) -> Operator {
    let spec = GameSpec::new(case);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut op = Operator::new(&spec, &small_cfg(), &mut rng).unwrap();
    // Nonzero biases so no term sits exactly on a kink.
    for p in op.params.iter_mut() {
        if *p == 0.0 {
            *p = rng.random_range(-0.1..0.1);
        }
    }
    op.output_scale = 3.0;
    op
}

fn case1_trajectory() -> Trajectory {
    let spec = GameSpec::new(CaseId::NarrowRoad);
    let x0 = [16.0, 4.2, 0.05, 18.5, 18.0, 4.6, -0.02, 19.0];
    solve_bvp(&spec, tp(2.0, 4.0), &x0, 0.0, &SolverConfig::default()).unwrap()
}

fn random_pinn(spec: &GameSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<PinnPoint> {
    (0..n)
        .map(|_| PinnPoint {
            joint_state: spec.sample_hj(rng),
            t: rng.random_range(0.0..spec.horizon),
            type_pair: tp(rng.random_range(1.0..5.0), rng.random_range(1.0..5.0)),
        })
        .collect()
}

#[test]
fn residual_vanishes_on_ground_truth() {
    let spec = GameSpec::new(CaseId::NarrowRoad);
    let traj = case1_trajectory();
    let mut worst: f64 = 0.0;
    for k in 0..traj.len() - 1 {
        let x = &traj.states[k];
        let rate = value_rate(&spec, &traj, k, 1e-5).unwrap();
        let g = [traj.costates[k][0].clone(), swap_players(&traj.costates[k][1])];
        let xs = [x.clone(), swap_players(x)];
        let tps = [traj.type_pair, traj.type_pair.swapped()];
        for i in 0..2 {
            // ∂tV along the path minus the transport part gives ∂V/∂t.
            let mut flow = vec![0.0; x.len()];
            let n = spec.state_dim();
            let u = &traj.controls[k];
            spec.dynamics(&xs[i][..n], &u[i], &mut flow[..n]);
            spec.dynamics(&xs[i][n..], &u[1 - i], &mut flow[n..]);
            let transport: f64 = g[i].iter().zip(&flow).map(|(a, b)| a * b).sum();
            let r = hji_residual_from_gradients(&spec, tps[i], &xs[i], rate[i] - transport, &g[i], &g[1 - i])
                .unwrap()
                .residual;
            worst = worst.max(r.abs());
        }
    }
    assert!(worst <= 1e-2, "worst ground-truth residual {worst}");
}

#[test]
fn zero_operator_far_apart_has_zero_residual() {
    let mut op = small_operator(CaseId::LaneChange, 1);
    op.params.iter_mut().for_each(|p| *p = 0.0);
    let point = PinnPoint {
        joint_state: vec![0.0, 6.0, 0.0, 15.0, 60.0, 2.0, 0.0, 15.0],
        t: 1.0,
        type_pair: tp(1.0, 1.0),
    };
    let r = hji_residual(&op, &point).unwrap();
    assert!(r[0].abs() < 1e-10 && r[1].abs() < 1e-10, "{r:?}");
}

#[test]
fn supervised_value_error_example() {
    let op = small_operator(CaseId::NarrowRoad, 2);
    let pair = tp(1.0, 3.0);
    let x = op.spec.sample_gt(&mut ChaCha8Rng::seed_from_u64(5));
    let vg = op.value_and_gradient(&x, 1.0, pair).unwrap();
    let s = SupervisedSample {
        joint_state: x,
        t: 1.0,
        value: vg.value - 2.0,
        costate: vg.grad_x.clone(),
        type_pair: pair,
    };
    let b = Batches {
        supervised: vec![&s],
        ..Default::default()
    };
    let w = LossWeights {
        c1: 1.0,
        c2: 1.0,
        c3: 1.0,
    };
    let terms = loss_and_grad(&op, &b, &w, Mode::Sno, None).unwrap();
    assert!((terms.total - 2.0).abs() < 1e-12, "{terms:?}");
    assert_eq!(terms.costate, 0.0);

    let exact = SupervisedSample {
        value: vg.value,
        ..s.clone()
    };
    let b = Batches {
        supervised: vec![&exact],
        ..Default::default()
    };
    assert_eq!(loss_and_grad(&op, &b, &w, Mode::Sno, None).unwrap().total, 0.0);
}

#[test]
fn sno_ignores_physics_terms() {
    let op = small_operator(CaseId::NarrowRoad, 3);
    let traj = case1_trajectory();
    let samples = traj.samples();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pinn = random_pinn(&op.spec, 8, &mut rng);
    let boundary: Vec<BoundaryPoint> = pinn
        .iter()
        .map(|p| BoundaryPoint {
            joint_state: p.joint_state.clone(),
            type_pair: p.type_pair,
        })
        .collect();
    let w = LossWeights::default();
    let sup: Vec<&SupervisedSample> = samples.iter().take(6).collect();
    let full = Batches {
        supervised: sup.clone(),
        pinn: pinn.clone(),
        boundary: boundary.clone(),
    };
    let only = Batches {
        supervised: sup,
        ..Default::default()
    };
    let mut g_full = vec![0.0; op.n_params()];
    let mut g_only = vec![0.0; op.n_params()];
    let a = loss_and_grad(&op, &full, &w, Mode::Sno, Some(&mut g_full)).unwrap();
    let b = loss_and_grad(&op, &only, &w, Mode::Sno, Some(&mut g_only)).unwrap();
    assert_eq!(a, b);
    assert_eq!(g_full, g_only);
    assert_eq!(a.total, w.c2 * a.value + w.c3 * a.costate);

    let h = loss_and_grad(&op, &full, &w, Mode::Hno, None).unwrap();
    assert!(h.hji > 0.0 && h.boundary > 0.0);
    assert_eq!(h.value, a.value);
    assert_eq!(h.costate, a.costate);
    assert!((h.total - (h.hji + w.c1 * h.boundary + w.c2 * h.value + w.c3 * h.costate)).abs() < 1e-9 * h.total);

    // Doubling C1 leaves the residual term alone.
    let w2 = LossWeights {
        c1: 2.0 * w.c1,
        ..w.clone()
    };
    let h2 = loss_and_grad(&op, &full, &w2, Mode::Hno, None).unwrap();
    assert_eq!(h2.hji, h.hji);
    assert!((h2.total - h.total - w.c1 * h.boundary).abs() < 1e-9 * h2.total);
}

#[test]
fn boundary_targets_use_each_players_terminal_loss() {
    let mut op = small_operator(CaseId::LaneChange, 6);
    op.params.iter_mut().for_each(|p| *p = 0.0);
    let x = op.spec.sample_hj(&mut ChaCha8Rng::seed_from_u64(2));
    let b = Batches {
        boundary: vec![BoundaryPoint {
            joint_state: x.clone(),
            type_pair: tp(2.0, 2.0),
        }],
        ..Default::default()
    };
    let t = loss_and_grad(&op, &b, &LossWeights::default(), Mode::Hno, None).unwrap();
    let n = op.spec.state_dim();
    let g1 = op.spec.terminal_loss(&x[..n], Slot::First);
    let g2 = op.spec.terminal_loss(&x[n..], Slot::Second);
    assert!(
        (t.boundary - (g1.abs() + g2.abs())).abs() < 1e-12,
        "{} vs {}",
        t.boundary,
        g1 + g2
    );
}

#[test]
fn loss_scales_with_shared_weight() {
    let op = small_operator(CaseId::Drone, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = &op.spec;
    let samples: Vec<SupervisedSample> = (0..4)
        .map(|_| SupervisedSample {
            joint_state: spec.sample_gt(&mut rng),
            t: rng.random_range(0.0..spec.horizon),
            value: rng.random_range(0.0..10.0),
            costate: (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
            type_pair: tp(2.0, 3.0),
        })
        .collect();
    let b = Batches {
        supervised: samples.iter().collect(),
        pinn: random_pinn(spec, 4, &mut rng),
        boundary: vec![],
    };
    let w = |c: f64| LossWeights { c1: c, c2: c, c3: c };
    let a = loss_and_grad(&op, &b, &w(1.0), Mode::Hno, None).unwrap();
    let c = loss_and_grad(&op, &b, &w(3.0), Mode::Hno, None).unwrap();
    let sup_a = a.total - a.hji;
    let sup_c = c.total - c.hji;
    assert!((sup_c - 3.0 * sup_a).abs() < 1e-9 * sup_c);
}

fn check_parameter_gradient(case: CaseId, act: Activation, seed: u64) {
    let mut op = small_operator(case, seed);
    op.activation = act;
    let spec = op.spec.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let n = spec.joint_dim();
    let samples: Vec<SupervisedSample> = (0..2)
        .map(|_| SupervisedSample {
            joint_state: spec.sample_gt(&mut rng),
            t: rng.random_range(0.0..spec.horizon),
            value: rng.random_range(0.0..10.0),
            costate: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            type_pair: tp(rng.random_range(1.0..5.0), rng.random_range(1.0..5.0)),
        })
        .collect();
    let pinn = random_pinn(&spec, 2, &mut rng);
    let boundary = random_pinn(&spec, 2, &mut rng)
        .into_iter()
        .map(|p| BoundaryPoint {
            joint_state: p.joint_state,
            type_pair: p.type_pair,
        })
        .collect();
    let b = Batches {
        supervised: samples.iter().collect(),
        pinn,
        boundary,
    };
    let w = LossWeights::default();
    let mut g = vec![0.0; op.n_params()];
    loss_and_grad(&op, &b, &w, Mode::Hno, Some(&mut g)).unwrap();

    let h = 1e-6;
    let mut checked = 0;
    let mut bad = Vec::new();
    for i in 0..op.n_params() {
        if rng.random::<f64>() > 0.01 && !op.slope_range().contains(&i) {
            continue;
        }
        let mut p = op.clone();
        p.params[i] += h;
        let fp = loss_and_grad(&p, &b, &w, Mode::Hno, None).unwrap().total;
        p.params[i] -= 2.0 * h;
        let fm = loss_and_grad(&p, &b, &w, Mode::Hno, None).unwrap().total;
        let fd = (fp - fm) / (2.0 * h);
        checked += 1;
        if (fd - g[i]).abs() > 1e-3 * g[i].abs().max(fd.abs()).max(1e-2) {
            bad.push((i, g[i], fd));
        }
    }
    assert!(checked > 20);
    // A central difference straddling a kink of |·| or a control clip is
    // allowed to disagree on a couple of entries.
    assert!(
        bad.len() <= checked / 50,
        "{case} {act}: {} of {checked} mismatched: {bad:?}",
        bad.len()
    );
}

#[test]
fn parameter_gradient_matches_finite_differences() {
    check_parameter_gradient(CaseId::NarrowRoad, Activation::Tanh, 11);
    check_parameter_gradient(CaseId::LaneChange, Activation::Sin, 12);
    check_parameter_gradient(CaseId::Drone, Activation::Tanh, 13);
}

#[test]
fn curriculum_window() {
    let cfg = TrainConfig {
        pretrain_iters: 10,
        refine_iters: 20,
        ..Default::default()
    };
    assert_eq!(cfg.window(0, 3.0), (0.0, 3.0));
    assert_eq!(cfg.window(10, 3.0), (3.0, 3.0));
    assert_eq!(cfg.window(30, 3.0), (0.0, 3.0));
    let mut prev = f64::INFINITY;
    for it in 10..30 {
        let (lo, hi) = cfg.window(it, 3.0);
        assert!(lo <= prev && hi == 3.0 && lo >= 0.0);
        prev = lo;
    }
}

#[test]
fn pools_stay_inside_sampling_boxes() {
    for case in [CaseId::NarrowRoad, CaseId::LaneChange, CaseId::Drone] {
        let spec = GameSpec::new(case);
        let a = sample_pinn_pool(&spec, 200, 3);
        assert_eq!(a, sample_pinn_pool(&spec, 200, 3));
        assert_ne!(a, sample_pinn_pool(&spec, 200, 4));
        assert_ne!(a, sample_boundary_pool(&spec, 200, 3));
        let n = spec.state_dim();
        for x in &a {
            assert!(spec.hj_boxes[0].contains(&x[..n]) && spec.hj_boxes[1].contains(&x[n..]));
        }
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = TrainConfig {
        weights: LossWeights {
            c1: 0.0,
            c2: 1.0,
            c3: 1.0,
        },
        ..Default::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let bad = TrainConfig {
        learning_rate: Some(-1.0),
        ..Default::default()
    };
    assert!(bad.validate().is_err());
    assert_eq!(TrainConfig::default().learning_rate_for(CaseId::NarrowRoad), 2e-5);
    assert_eq!(TrainConfig::default().learning_rate_for(CaseId::Drone), 1e-4);
    assert_eq!("SNO".parse::<Mode>().unwrap(), Mode::Sno);
    assert!("pinn".parse::<Mode>().is_err());
}

struct Fixture {
    spec: GameSpec,
    samples: Vec<SupervisedSample>,
    pool: Vec<Vec<f64>>,
    pairs: Vec<TypePair>,
}

fn fixture() -> Fixture {
    let spec = GameSpec::new(CaseId::NarrowRoad);
    let traj = case1_trajectory();
    Fixture {
        pool: sample_pinn_pool(&spec, 50, 1),
        spec,
        samples: traj.samples(),
        pairs: vec![traj.type_pair],
    }
}

fn tiny_train_cfg(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        learning_rate: Some(1e-3),
        batch_supervised: 4,
        batch_pinn: 4,
        batch_boundary: 4,
        pretrain_iters: 10,
        refine_iters: 10,
        sno_iters: 20,
        checkpoint_every: 10,
        log_every: 1,
        ..Default::default()
    }
}

#[test]
fn training_is_deterministic_and_resumable() {
    let f = fixture();
    let data = TrainData {
        supervised: &f.samples,
        pinn_pool: &f.pool,
        type_pairs: &f.pairs,
    };
    let cfg = tiny_train_cfg(Mode::Hno);
    let a = train(&f.spec, &small_cfg(), &cfg, &data, 5, None).unwrap();
    let b = train(&f.spec, &small_cfg(), &cfg, &data, 5, None).unwrap();
    assert_eq!(a.operator.params, b.operator.params);
    let terms = |o: &TrainOutcome| o.log.iter().map(|r| r.terms.clone()).collect::<Vec<_>>();
    assert_eq!(terms(&a), terms(&b));
    assert_eq!(a.log.len(), 20);
    assert_eq!(a.log[10].phase, "refine");
    assert_eq!(a.log[10].t_lo, f.spec.horizon);

    let root = tempfile::tempdir().unwrap();
    let full = root.path().join("full");
    let c = train(&f.spec, &small_cfg(), &cfg, &data, 5, Some(&full)).unwrap();
    assert_eq!(c.operator.params, a.operator.params);

    // Interrupted after the first checkpoint, then resumed.
    let part = root.path().join("part");
    fs::create_dir_all(&part).unwrap();
    fs::copy(full.join("ckpt_00000010.bin"), part.join("ckpt_00000010.bin")).unwrap();
    fs::copy(full.join("train_log.jsonl"), part.join("train_log.jsonl")).unwrap();
    let d = train(&f.spec, &small_cfg(), &cfg, &data, 5, Some(&part)).unwrap();
    assert_eq!(d.operator.params, a.operator.params);
    assert_eq!(terms(&d)[10..], terms(&a)[10..]);
    assert_eq!(d.log.len(), 20);
    let fin = Operator::load(&part.join("final.bin"), CaseId::NarrowRoad).unwrap();
    assert_eq!(fin.params, a.operator.params);

    // A different seed may not reuse the checkpoint.
    assert!(matches!(
        train(&f.spec, &small_cfg(), &cfg, &data, 6, Some(&part)),
        Err(Error::Artifact(_))
    ));
}

#[test]
fn sno_training_logs_supervised_terms_only() {
    let f = fixture();
    let data = TrainData {
        supervised: &f.samples,
        pinn_pool: &[],
        type_pairs: &f.pairs,
    };
    let out = train(&f.spec, &small_cfg(), &tiny_train_cfg(Mode::Sno), &data, 1, None).unwrap();
    assert_eq!(out.log.len(), 20);
    assert!(out
        .log
        .iter()
        .all(|r| r.phase == "sno" && r.terms.hji == 0.0 && r.terms.boundary == 0.0));
}

#[test]
fn slopes_respect_lower_clamp() {
    let f = fixture();
    let data = TrainData {
        supervised: &f.samples,
        pinn_pool: &f.pool,
        type_pairs: &f.pairs,
    };
    let cfg = TrainConfig {
        learning_rate: Some(0.5),
        slope_min: 0.05,
        ..tiny_train_cfg(Mode::Sno)
    };
    let out = train(&f.spec, &small_cfg(), &cfg, &data, 1, None).unwrap();
    assert!(out.operator.slope_range().all(|i| out.operator.params[i] >= 0.05));
}

#[test]
fn overfits_a_handful_of_samples() {
    let mut spec = GameSpec::new(CaseId::NarrowRoad);
    spec.p_bar_y = [1.0, 7.0];
    let x0 = [16.0, 1.0, 0.0, 20.0, 17.0, 7.0, 0.0, 21.0];
    let traj = solve_bvp(&spec, tp(1.0, 1.0), &x0, 0.0, &SolverConfig::default()).unwrap();
    let samples: Vec<SupervisedSample> = traj.samples().into_iter().step_by(6).take(10).collect();
    let data = TrainData {
        supervised: &samples,
        pinn_pool: &[],
        type_pairs: &[],
    };
    let cfg = TrainConfig {
        mode: Mode::Sno,
        learning_rate: Some(3e-4),
        batch_supervised: 10,
        sno_iters: 4000,
        log_every: 100,
        weights: LossWeights {
            c1: 1.0,
            c2: 1.0,
            c3: 1e-6,
        },
        ..Default::default()
    };
    let out = train(&spec, &small_cfg(), &cfg, &data, 2, None).unwrap();
    let worst = samples
        .iter()
        .map(|s| (out.operator.forward(&s.joint_state, s.t, s.type_pair).unwrap() - s.value).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-2, "worst value error {worst}");
}
