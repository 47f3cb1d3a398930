"""Closed-loop simulation, drift detection, and the enrichment loops.

The double integrator is the workhorse: its free-time solves are fast and a
zero-order-hold replay of a solution is reproduced exactly by the simulator,
so tracking assertions can be tight.
"""

from dataclasses import replace

import numpy as np
import pytest

from reachtime import dynamics as dyn
from reachtime import sampling as smp
from reachtime.data import Dataset
from reachtime.dynamics import running_cost
from reachtime.freetime import FreeTimeSettings, solve_free_time
from reachtime.policy import MlpPolicy, QrnetPolicy, ReplayPolicy, TrainConfig
from reachtime.lqr import BlendSchedule, Saturation, build_riccati_table

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def fast_ft(dt=0.01):
    return FreeTimeSettings(dt=dt, schedule=(30, 60), t_f_init=0.6)


@pytest.fixture(scope="module")
def di_world():
    model = dyn.double_integrator()
    cost = dyn.reach_cost(model, np.array([0.5]))
    ft = fast_ft()
    roots, data = [], Dataset()
    for i, x0 in enumerate((np.array([-0.4, 0.3]), np.array([0.6, -0.2]))):
        free = solve_free_time(model, cost, x0, settings=ft)
        assert free.converged
        roots.append(smp.LabeledSolve.from_free_time(f"root{i}", x0, free))
        data.add_trajectory(f"root{i}", free.solution.states,
                            free.solution.controls, free.t_f)
    return model, cost, ft, roots, data


class ZeroPolicy:
    def __init__(self, m=1):
        self.m = m

    def control(self, X, t=0.0):
        X = np.atleast_2d(np.asarray(X))
        return np.zeros((X.shape[0], self.m))


# -- simulator --------------------------------------------------------------------


def test_rk4_error_drops_eightfold_per_halving():
    """Fourth-order convergence of the closed-loop integrator on a smooth
    torque program; the ideal error ratio per halving is 16."""
    arm = dyn.planar_arm()
    cost = dyn.reach_cost(arm, np.array([0.4, -0.3]))
    u_f = np.asarray(cost.u_f)

    class SmoothDrive:
        def control(self, X, t=0.0):
            X = np.atleast_2d(np.asarray(X))
            u = u_f + 0.5 * np.array([np.sin(2 * np.pi * t),
                                      np.cos(2 * np.pi * t)])
            return np.broadcast_to(u, (X.shape[0], 2)).copy()

    x0 = np.array([0.3, -0.5, 0.0, 0.0])

    def final_state(dt):
        s = smp.IvpSettings(dt_sim=dt, horizon=1.0, success_radius=1e-12)
        tr = smp.simulate_ivp(arm, cost, SmoothDrive(), x0, s)
        assert not tr.diverged
        return tr.states[-1]

    ref = final_state(1.25e-4)
    e_coarse = np.linalg.norm(final_state(2e-3) - ref)
    e_fine = np.linalg.norm(final_state(1e-3) - ref)
    assert e_fine > 0
    assert e_coarse / e_fine >= 8.0


def test_replay_of_solution_tracks_it(di_world):
    model, cost, ft, roots, _ = di_world
    root = roots[0]
    pol = ReplayPolicy(times=root.times[:-1], controls=root.controls,
                       u_hold=np.asarray(cost.u_f))
    tr = smp.simulate_ivp(model, cost, pol, root.x0,
                          smp.IvpSettings(dt_sim=1e-3, horizon=2.0,
                                          success_radius=1e-3))
    assert not tr.diverged
    assert tr.first_hit is not None
    assert abs(tr.first_hit - root.t_f) <= 0.1 * root.t_f
    # simulation knots that coincide with solver knots agree to round-off
    idx = np.round(root.times / 1e-3).astype(int)
    assert np.abs(tr.states[idx] - root.states).max() <= 1e-10
    us_ext = np.vstack([root.controls, root.controls[-1:]])
    L = running_cost(model, cost, root.states, us_ext)
    optimal = float(_trapezoid(L, dx=root.times[1] - root.times[0]))
    assert tr.realized_cost == pytest.approx(optimal, rel=0.05)


def test_start_at_target_hits_immediately(di_world):
    model, cost, _, _, _ = di_world
    x_f = np.asarray(cost.x_f)
    tr = smp.simulate_ivp(model, cost, ZeroPolicy(), x_f,
                          smp.IvpSettings(dt_sim=1e-3, horizon=0.1,
                                          success_radius=1e-3))
    assert tr.first_hit == 0.0
    assert tr.realized_cost == 0.0
    assert not tr.diverged


def test_divergence_truncates_at_last_finite_knot(di_world):
    model, cost, _, _, _ = di_world

    class CubicKick:
        def control(self, X, t=0.0):
            X = np.atleast_2d(np.asarray(X))
            return X[:, :1] ** 3

    tr = smp.simulate_ivp(model, cost, CubicKick(), np.array([3.0, 0.0]),
                          smp.IvpSettings(dt_sim=1e-3, horizon=2.0,
                                          success_radius=1e-3))
    assert tr.diverged
    assert tr.first_hit is None and tr.realized_cost is None
    assert tr.states.shape[0] < 2001
    assert np.all(np.isfinite(tr.states))
    assert np.all(np.isfinite(tr.controls))
    assert tr.times.shape[0] == tr.states.shape[0] == tr.controls.shape[0]


def test_batch_matches_single_rollouts(di_world):
    model, cost, _, _, _ = di_world

    class RowwisePd:
        """Per-row arithmetic so batch and single runs agree bitwise."""

        def control(self, X, t=0.0):
            X = np.atleast_2d(np.asarray(X, dtype=float))
            rows = [np.array([0.0 - 2.0 * (x[0] - 0.5) - 3.0 * x[1]])
                    for x in X]
            return np.stack(rows)

    X0 = np.array([[-0.4, 0.3], [0.6, -0.2], [0.5, 0.0]])
    settings = smp.IvpSettings(dt_sim=2e-3, horizon=0.5, success_radius=1e-3)
    batch = smp.simulate_ivp_batch(model, cost, RowwisePd(), X0, settings)
    for i in range(3):
        single = smp.simulate_ivp(model, cost, RowwisePd(), X0[i], settings)
        assert np.array_equal(batch[i].states, single.states)
        assert np.array_equal(batch[i].controls, single.controls)
        assert batch[i].first_hit == single.first_hit


# -- resample detection -----------------------------------------------------------


def synthetic_traj(times, states):
    return smp.IvpTrajectory(times=np.asarray(times, dtype=float),
                             states=np.asarray(states, dtype=float),
                             controls=np.zeros((len(times), 1)),
                             first_hit=None, realized_cost=None,
                             diverged=False)


def test_resample_event_on_linear_drift():
    """Deviation d(t) = 2t against a threshold of 1 must fire at the first
    knot past t = 0.5."""
    dt = 0.01
    times = np.arange(0.0, 2.0 + 1e-12, dt)
    states = np.zeros((times.size, 2))
    states[:, 0] = 2.0 * times
    traj = synthetic_traj(times, states)
    root = smp.LabeledSolve("r", np.zeros(2), 2.0,
                            times=np.array([0.0, 2.0]),
                            states=np.zeros((2, 2)),
                            controls=np.zeros((1, 1)))
    ev = smp.find_resample_state(traj, root, x_f=np.zeros(2), tau=1.0)
    assert ev is not None
    assert ev.index == 51
    assert ev.time == pytest.approx(0.51, abs=1e-9)
    assert ev.deviation == pytest.approx(1.02, abs=1e-9)
    assert np.array_equal(ev.state, states[51])
    # every knot before the event is within the threshold
    assert np.all(np.abs(states[:51, 0]) <= 1.0 + 1e-12)


def test_resample_none_when_within_threshold():
    times = np.arange(0.0, 1.0, 0.05)
    traj = synthetic_traj(times, np.outer(2.0 * times, [1.0, 0.0]))
    root = smp.LabeledSolve("r", np.zeros(2), 1.0,
                            times=np.array([0.0, 1.0]),
                            states=np.array([[0.0, 0.0], [2.0, 0.0]]),
                            controls=np.zeros((1, 1)))
    # rollout equals the interpolated reference, so any threshold passes
    assert smp.find_resample_state(traj, root, np.array([2.0, 0.0]),
                                   tau=1e-9) is None


def test_resample_reference_holds_target_past_horizon():
    dt = 0.05
    times = np.arange(0.0, 1.5 + 1e-12, dt)
    x1 = np.minimum(2.0 * times, 1.0) + np.maximum(times - 0.5, 0.0)
    traj = synthetic_traj(times, np.stack([x1, np.zeros_like(x1)], axis=1))
    root = smp.LabeledSolve("r", np.zeros(2), 0.5,
                            times=np.array([0.0, 0.5]),
                            states=np.array([[0.0, 0.0], [1.0, 0.0]]),
                            controls=np.zeros((1, 1)))
    ev = smp.find_resample_state(traj, root, np.array([1.0, 0.0]), tau=0.4)
    assert ev is not None
    # drift past the root horizon is measured against x_f, crossing 0.4 at t=0.9
    assert ev.time == pytest.approx(0.95, abs=1e-9)


def test_resample_rejects_bad_threshold():
    traj = synthetic_traj([0.0], np.zeros((1, 2)))
    root = smp.LabeledSolve("r", np.zeros(2), 1.0, np.array([0.0, 1.0]),
                            np.zeros((2, 2)), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        smp.find_resample_state(traj, root, np.zeros(2), tau=0.0)


# -- enrichment loops --------------------------------------------------------------


def small_cfg():
    return TrainConfig(epochs=4, batch_size=64, val_every=2)


def art_settings(n_iterations=2, tau=0.25, mode="union"):
    return smp.ArtSettings(
        tau=tau, n_iterations=n_iterations, mode=mode,
        ivp=smp.IvpSettings(dt_sim=5e-3, horizon=1.0, success_radius=1e-3))


def test_art_run_enriches_dataset_and_is_deterministic(di_world):
    model, cost, ft, roots, data = di_world

    def run():
        return smp.ivp_art_run(model, cost, roots, data, data.arrays(),
                               None, small_cfg(), ft, art_settings(),
                               seed=7, arch="mlp")

    res1, res2 = run(), run()
    # the barely-trained net drifts away from both optimal rollouts
    assert sum(o.n_events for o in res1.outcomes) >= 1
    sizes = [len(d) for d in res1.datasets]
    assert sizes == sorted(sizes)
    assert len(res1.datasets[-1]) > len(res1.datasets[0])
    assert len(res1.policies) == 3
    assert res1.ensemble.members == res1.policies[1:]
    # new trajectories carry lineage back to their root
    new_ids = set(res1.datasets[-1].lineage) - set(data.lineage)
    assert new_ids
    for tid in new_ids:
        meta = res1.datasets[-1].lineage[tid]
        assert meta.root_id in data.lineage
        assert meta.t_start > 0.0

    assert res1.outcomes == res2.outcomes
    for p1, p2 in zip(res1.policies, res2.policies):
        for w1, w2 in zip(p1.net.weights, p2.net.weights):
            assert np.array_equal(w1, w2)


def test_art_run_with_qrnet_architecture(di_world):
    model, cost, ft, roots, data = di_world
    table = build_riccati_table(model, cost, horizon=0.8, delta=2e-3)
    parts = (table, BlendSchedule(), Saturation.from_cost(cost))
    res = smp.ivp_art_run(model, cost, roots, data, data.arrays(), parts,
                          small_cfg(), ft, art_settings(n_iterations=1),
                          seed=3, arch="qrnet")
    assert isinstance(res.policies[0], QrnetPolicy)
    assert res.policies[0].time_net is not None
    # the trained policy keeps the exact terminal identity
    x_f = np.asarray(cost.x_f)
    u_f = np.asarray(cost.u_f)
    for pol in res.policies:
        assert np.abs(pol.control(x_f, tf_override=0.0) - u_f).max() <= 1e-12


def test_art_perfect_policy_finds_no_events(di_world, monkeypatch):
    model, cost, ft, roots, data = di_world
    replay = ReplayPolicy(times=roots[0].times[:-1],
                          controls=roots[0].controls,
                          u_hold=np.asarray(cost.u_f))
    monkeypatch.setattr(smp, "train_policy", lambda *a, **k: replay)
    res = smp.ivp_art_run(model, cost, roots[:1], data, data.arrays(),
                          None, small_cfg(), ft, art_settings(tau=0.5),
                          seed=0, arch="mlp")
    assert all(o.n_events == 0 for o in res.outcomes)
    assert all(len(d) == len(data) for d in res.datasets)


def test_art_all_label_failures_raise(di_world, monkeypatch):
    model, cost, ft, roots, data = di_world
    monkeypatch.setattr(smp, "train_policy",
                        lambda *a, **k: ZeroPolicy(m=1))
    monkeypatch.setattr(smp, "label_state", lambda *a, **k: None)
    with pytest.raises(smp.EnrichmentError, match="labelling solves failed"):
        smp.ivp_art_run(model, cost, roots, data, data.arrays(), None,
                        small_cfg(), ft, art_settings(n_iterations=1),
                        seed=0, arch="mlp")


def test_art_replacement_mode_evicts_superseded_tails(di_world):
    model, cost, ft, roots, data = di_world
    res = smp.ivp_art_run(model, cost, roots, data, data.arrays(), None,
                          small_cfg(), ft,
                          art_settings(n_iterations=1, mode="replacement"),
                          seed=7, arch="mlp")
    final = res.datasets[-1]
    new_ids = set(final.lineage) - set(data.lineage)
    assert new_ids
    for tid in new_ids:
        meta = final.lineage[tid]
        for rec in final.records:
            rec_meta = final.lineage[rec.traj_id]
            if rec_meta.root_id == meta.root_id and rec.traj_id != tid:
                assert final.absolute_time(rec) < meta.t_start - 1e-12


def test_dagger_samples_quarter_points(di_world):
    model, cost, ft, roots, data = di_world
    res = smp.dagger_run(model, cost, roots, data, data.arrays(), None,
                         small_cfg(), ft, art_settings(n_iterations=1),
                         seed=11, arch="mlp")
    out = res.outcomes[0]
    assert out.n_events == 4            # two roots, two sample times each
    assert out.n_labeled >= 3           # double-integrator solves are robust
    final = res.datasets[-1]
    new_metas = [final.lineage[tid] for tid in
                 set(final.lineage) - set(data.lineage)]
    dt_sim = art_settings().ivp.dt_sim
    for meta in new_metas:
        root = next(r for r in roots if r.traj_id == meta.root_id)
        gaps = [abs(meta.t_start - f * root.t_f) for f in (0.25, 0.75)]
        assert min(gaps) <= dt_sim / 2 + 1e-12


def test_artifacts_written_when_out_dir_given(di_world, tmp_path):
    model, cost, ft, roots, data = di_world
    smp.ivp_art_run(model, cost, roots, data, data.arrays(), None,
                    small_cfg(), ft, art_settings(n_iterations=1),
                    seed=7, arch="mlp", out_dir=str(tmp_path))
    names = {p.name for p in tmp_path.iterdir()}
    assert {"policy_0.json", "policy_1.json",
            "samples_1.ndjson", "labels_1.ndjson"} <= names


def test_warm_started_labeling_matches_root_when_sampled_on_it(di_world):
    """Labelling the root's own state at a knot must reproduce the tail:
    same remaining horizon up to grid rounding."""
    model, cost, ft, roots, _ = di_world
    root = roots[0]
    k = 10
    t_sample = root.times[k]
    free = smp.label_state(model, cost, root, t_sample, root.states[k], ft)
    assert free is not None
    assert abs(free.t_f - (root.t_f - t_sample)) <= 2 * ft.dt + 1e-12


def test_settings_validation():
    with pytest.raises(ValueError):
        smp.IvpSettings(dt_sim=0.0)
    with pytest.raises(ValueError):
        smp.IvpSettings(horizon=-1.0)
    with pytest.raises(ValueError):
        smp.ArtSettings(tau=0.0)
    with pytest.raises(ValueError):
        smp.ArtSettings(mode="both")
    with pytest.raises(ValueError):
        smp.ArtSettings(n_iterations=0)


def test_derived_seeds_are_stable_and_distinct():
    a = smp.derived_seed(7, 1, 0)
    assert a == smp.derived_seed(7, 1, 0)
    others = {smp.derived_seed(7, i, r) for i in range(4) for r in range(2)}
    assert len(others) == 8
    assert smp.derived_seed(8, 1, 0) != a
