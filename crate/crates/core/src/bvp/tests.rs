use super::lqr::DoubleIntegratorLqr;
use super::*;
use crate::game::{CaseId, GameSpec};
use crate::rng::substream;

fn tp(a: f64, b: f64) -> TypePair {
    TypePair::new(a, b).unwrap()
}

#[test]
fn lqr_matches_riccati() {
    let game = DoubleIntegratorLqr::default();
    let cfg = SolverConfig::default();
    let x0 = [1.0, -0.5, -2.0, 0.8];
    let traj = solve_bvp(&game, tp(1.0, 1.0), &x0, 0.0, &cfg).unwrap();
    assert_eq!(traj.len(), 31);
    for (k, t) in traj.times.iter().enumerate() {
        let p = game.riccati(*t, 10_000);
        for slot in 0..2 {
            let x = &traj.states[k][2 * slot..2 * slot + 2];
            let v = p[0][0] * x[0] * x[0] + 2.0 * p[0][1] * x[0] * x[1] + p[1][1] * x[1] * x[1];
            let rel = (traj.cost_to_go[k][slot] - v).abs() / v.abs().max(1e-12);
            assert!(rel < 1e-3, "t={t} slot={slot}: {} vs {v}", traj.cost_to_go[k][slot]);
            let g = [
                2.0 * (p[0][0] * x[0] + p[0][1] * x[1]),
                2.0 * (p[0][1] * x[0] + p[1][1] * x[1]),
            ];
            for i in 0..2 {
                let got = traj.costates[k][slot][2 * slot + i];
                assert!(
                    (got - g[i]).abs() <= 1e-3 * g[i].abs().max(1e-6),
                    "grad {i}: {got} vs {}",
                    g[i]
                );
            }
        }
    }
}

#[test]
fn degenerate_start_at_horizon() {
    let spec = GameSpec::new(CaseId::NarrowRoad);
    let x0 = [60.0, 4.0, 0.0, 18.0, 5.0, 4.5, 0.0, 19.0];
    let traj = solve_bvp(&spec, tp(1.0, 1.0), &x0, 3.0, &SolverConfig::default()).unwrap();
    assert_eq!(traj.len(), 1);
    assert_eq!(traj.cost_to_go[0][0], spec.terminal_loss(&x0[..4], Slot::First));
    assert_eq!(traj.cost_to_go[0][1], spec.terminal_loss(&x0[4..], Slot::Second));
}

#[test]
fn narrow_road_offset_lanes_is_penalty_free() {
    let mut spec = GameSpec::new(CaseId::NarrowRoad);
    // Lanes 6 m apart: far outside any threshold.
    spec.p_bar_y = [1.0, 7.0];
    let x0 = [16.0, 1.0, 0.0, 20.0, 17.0, 7.0, 0.0, 21.0];
    let traj = solve_bvp(&spec, tp(5.0, 5.0), &x0, 0.0, &SolverConfig::default()).unwrap();
    assert!(traj.max_penalty(&spec) < 1.0);
    assert!(traj.solver_residual <= 1e-6);
}

#[test]
fn narrow_road_solves_and_satisfies_terminal_condition() {
    let spec = GameSpec::new(CaseId::NarrowRoad);
    let cfg = SolverConfig::default();
    let mut rng = substream(0, "bvp-test", &[]);
    let x0 = spec.sample_gt(&mut rng);
    let traj = solve_bvp(&spec, tp(1.0, 1.0), &x0, 0.0, &cfg).unwrap();
    assert_eq!(traj.len(), 31);
    let last = traj.len() - 1;
    for slot in [Slot::First, Slot::Second] {
        let p = slot.index();
        let xs = &traj.states[last][4 * p..4 * p + 4];
        let (g, grad) = shooting::terminal_gradient(&spec, xs, slot);
        assert!((traj.cost_to_go[last][p] - g).abs() < 1e-12);
        for i in 0..8 {
            let own = if i / 4 == p { grad[i % 4] } else { 0.0 };
            assert!(
                (traj.costates[last][p][i] - own).abs() <= 1e-6,
                "{:?}",
                traj.costates[last][p]
            );
        }
    }
}

#[test]
fn resolving_from_a_mid_node_reproduces_the_tail() {
    let spec = GameSpec::new(CaseId::NarrowRoad);
    let cfg = SolverConfig::default();
    let mut rng = substream(4, "bvp-test", &[]);
    let x0 = spec.sample_gt(&mut rng);
    let traj = solve_bvp(&spec, tp(1.0, 5.0), &x0, 0.0, &cfg).unwrap();
    let k = 12;
    let tail = solve_bvp(&spec, tp(1.0, 5.0), &traj.states[k], traj.times[k], &cfg).unwrap();
    assert_eq!(tail.len(), traj.len() - k);
    for j in 0..tail.len() {
        for p in 0..2 {
            let a = tail.cost_to_go[j][p];
            let b = traj.cost_to_go[k + j][p];
            assert!(
                (a - b).abs() <= 1e-3 * b.abs().max(1.0),
                "node {j} player {p}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn value_decreases_at_the_running_cost_rate() {
    let spec = GameSpec::new(CaseId::LaneChange);
    let cfg = SolverConfig::default();
    let mut rng = substream(5, "bvp-test", &[]);
    let x0 = spec.sample_gt(&mut rng);
    let traj = solve_bvp(&spec, tp(5.0, 1.0), &x0, 0.0, &cfg).unwrap();
    for k in 1..traj.len() - 1 {
        let rate = value_rate(&spec, &traj, k, 1e-4).unwrap();
        let cost = running_cost(&spec, &traj, k);
        for p in 0..2 {
            assert!(
                (rate[p] + cost[p]).abs() <= 1e-2 * cost[p].abs(),
                "node {k}: {} vs {}",
                rate[p],
                -cost[p]
            );
        }
    }
}

#[test]
fn dataset_counts_round_trip_and_determinism() {
    let spec = GameSpec::new(CaseId::NarrowRoad);
    let cfg = SolverConfig::default();
    let pairs = [tp(1.0, 1.0), tp(5.0, 1.0)];
    let a = generate_dataset(&spec, &pairs, 1, 9, &cfg).unwrap();
    assert_eq!(a.trajectories.len(), 2);
    assert_eq!(a.samples.len(), 2 * 62);
    assert_eq!(a.samples[1].type_pair, tp(1.0, 1.0).swapped());
    assert_eq!(a.samples[62].type_pair, tp(5.0, 1.0));
    assert_eq!(a.samples[63].type_pair, tp(1.0, 5.0));

    let dir = tempfile::tempdir().unwrap();
    let meta = a.meta(&pairs, 1, 9, &cfg);
    a.write(dir.path(), &meta).unwrap();
    let back = dataset::read_samples(dir.path(), CaseId::NarrowRoad).unwrap();
    assert_eq!(back, a.samples);
    assert!(dataset::read_samples(dir.path(), CaseId::Drone).is_err());

    let b = generate_dataset(&spec, &pairs, 1, 9, &cfg).unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    b.write(dir_b.path(), &meta).unwrap();
    for f in ["samples.bin", "samples.schema.json", "meta.json"] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(dir_b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn lane_change_and_drone_emit_41_nodes() {
    let cfg = SolverConfig::default();
    for case in [CaseId::LaneChange, CaseId::Drone] {
        let spec = GameSpec::new(case);
        let d = generate_dataset(&spec, &[tp(1.0, 1.0)], 1, 2, &cfg).unwrap();
        assert_eq!(d.samples.len(), 82, "{case}");
    }
}

#[test]
fn sample_values_match_stored_terminal_loss() {
    let spec = GameSpec::new(CaseId::Drone);
    let d = generate_dataset(&spec, &[tp(1.0, 5.0)], 1, 3, &SolverConfig::default()).unwrap();
    let t = &d.trajectories[0];
    let last = t.len() - 1;
    assert_eq!(
        t.cost_to_go[last][0],
        spec.terminal_loss(&t.states[last][..6], Slot::First)
    );
    assert_eq!(
        t.cost_to_go[last][1],
        spec.terminal_loss(&t.states[last][6..], Slot::Second)
    );
}
