"""Closed-loop simulation and policy-driven dataset enrichment.

The enhanced-sampling loop rolls the current policy out from every training
start state, finds the first simulation knot where the rollout drifts farther
than a threshold from that start's optimal trajectory, re-solves from exactly
those drift states (warm-started from the original solution's tail), adds the
new optimal trajectories to the dataset, and retrains from scratch.  The
baseline loop labels states at fixed fractions of each trajectory's optimal
horizon instead, whether or not the rollout drifted.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, write_ndjson
from .ddp import SolveDivergedError
from .dynamics import CostSpec, ModelSpec, running_cost, vector_field
from .freetime import FreeTimeSettings, solve_free_time
from .policy import (
    EnsemblePolicy,
    MlpPolicy,
    QrnetPolicy,
    TrainConfig,
    save_checkpoint,
    train_control_net,
    train_time_net,
)

_trapezoid = getattr(np, "trapezoid", None) or np.trapz

__all__ = [
    "ArtSettings",
    "EnrichmentResult",
    "IterationOutcome",
    "IvpSettings",
    "IvpTrajectory",
    "LabeledSolve",
    "ResampleEvent",
    "dagger_run",
    "find_resample_state",
    "ivp_art_run",
    "simulate_ivp",
    "simulate_ivp_batch",
]


@dataclass(frozen=True)
class IvpSettings:
    dt_sim: float = 1e-3
    horizon: float = 2.0
    success_radius: float = 1e-3

    def __post_init__(self):
        if self.dt_sim <= 0 or self.horizon <= 0 or self.success_radius <= 0:
            raise ValueError("simulation settings must be positive")


@dataclass
class IvpTrajectory:
    times: np.ndarray       # (K,)
    states: np.ndarray      # (K, n)
    controls: np.ndarray    # (K, m) control applied at each knot
    first_hit: float | None
    realized_cost: float | None
    diverged: bool


@dataclass
class LabeledSolve:
    """An optimal open-loop solution kept around as a labelling source."""

    traj_id: str
    x0: np.ndarray
    t_f: float
    times: np.ndarray       # (N+1,)
    states: np.ndarray      # (N+1, n)
    controls: np.ndarray    # (N, m)

    @classmethod
    def from_free_time(cls, traj_id, x0, free):
        sol = free.solution
        return cls(traj_id=traj_id, x0=np.asarray(x0, dtype=float),
                   t_f=free.t_f, times=sol.times.copy(),
                   states=sol.states.copy(), controls=sol.controls.copy())


def write_roots(roots, path):
    """One labelling source per line; floats round-trip bitwise via repr."""
    with open(path, "w") as fh:
        for r in roots:
            fh.write(json.dumps({
                "traj_id": r.traj_id, "x0": r.x0.tolist(), "t_f": r.t_f,
                "times": r.times.tolist(), "states": r.states.tolist(),
                "controls": r.controls.tolist()}) + "\n")


def read_roots(path):
    roots = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            roots.append(LabeledSolve(
                traj_id=d["traj_id"],
                x0=np.asarray(d["x0"], dtype=float), t_f=float(d["t_f"]),
                times=np.asarray(d["times"], dtype=float),
                states=np.asarray(d["states"], dtype=float),
                controls=np.asarray(d["controls"], dtype=float)))
    return roots


@dataclass(frozen=True)
class ResampleEvent:
    index: int
    time: float
    state: np.ndarray
    deviation: float


def simulate_ivp_batch(model: ModelSpec, cost: CostSpec, policy, X0,
                       settings: IvpSettings | None = None):
    """Closed-loop RK4 rollouts; the control is re-evaluated at every stage.

    Returns one IvpTrajectory per row of X0.  Trajectories that go non-finite
    are truncated at their last finite knot and flagged diverged.
    """
    settings = settings or IvpSettings()
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    n_traj, n = X0.shape
    dt = settings.dt_sim
    n_steps = int(round(settings.horizon / dt))
    x_f = np.asarray(cost.x_f)

    states = np.empty((n_traj, n_steps + 1, n))
    controls = np.empty((n_traj, n_steps + 1, len(cost.u_f)))
    u_f = np.asarray(cost.u_f)
    x = X0.copy()

    def safe_vf(X, U):
        # diverged rows are recorded raw but must not reach the dynamics,
        # which reject non-finite inputs; park them at the target instead
        Xs = np.where(np.isfinite(X), X, x_f[None, :])
        Us = np.where(np.isfinite(U), U, u_f[None, :])
        return vector_field(model, Xs, Us)

    with np.errstate(all="ignore"):
        for k in range(n_steps + 1):
            t = k * dt
            u = np.atleast_2d(policy.control(x, t))
            states[:, k] = x
            controls[:, k] = u
            if k == n_steps:
                break
            k1 = safe_vf(x, u)
            x2 = x + 0.5 * dt * k1
            k2 = safe_vf(x2, np.atleast_2d(policy.control(x2, t + 0.5 * dt)))
            x3 = x + 0.5 * dt * k2
            k3 = safe_vf(x3, np.atleast_2d(policy.control(x3, t + 0.5 * dt)))
            x4 = x + dt * k3
            # The final stage samples the control from inside the step, not
            # at its right endpoint: a zero-order-hold replay whose cells end
            # exactly at step boundaries must contribute its OWN cell's value
            # there, or every cell crossing injects an O(du*dt) kick.  The
            # backed-off time changes a time-smooth policy's stage value at
            # the 1e-12*dt level, far below integrator error.
            u4 = np.atleast_2d(policy.control(x4, t + dt * (1.0 - 1e-9)))
            k4 = safe_vf(x4, u4)
            x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    times = np.arange(n_steps + 1) * dt
    out = []
    for i in range(n_traj):
        finite = np.all(np.isfinite(states[i]), axis=1) \
            & np.all(np.isfinite(controls[i]), axis=1)
        if finite.all():
            stop, diverged = n_steps + 1, False
        else:
            stop, diverged = int(np.argmin(finite)), True
        st = states[i, :stop].copy()
        ct = controls[i, :stop].copy()
        tm = times[:stop].copy()
        dist = np.linalg.norm(st - x_f, axis=1)
        hits = np.nonzero(dist <= settings.success_radius)[0]
        if hits.size:
            hit = int(hits[0])
            first_hit = float(tm[hit])
            stage = running_cost(model, cost, st[:hit + 1], ct[:hit + 1])
            realized = float(_trapezoid(stage, dx=dt)) if hit > 0 else 0.0
        else:
            first_hit, realized = None, None
        out.append(IvpTrajectory(times=tm, states=st, controls=ct,
                                 first_hit=first_hit, realized_cost=realized,
                                 diverged=diverged))
    return out


def simulate_ivp(model, cost, policy, x0, settings=None) -> IvpTrajectory:
    return simulate_ivp_batch(model, cost, policy, np.asarray(x0)[None, :],
                              settings)[0]


def find_resample_state(traj: IvpTrajectory, root: LabeledSolve, x_f,
                        tau: float) -> ResampleEvent | None:
    """Earliest simulation knot whose state deviates more than tau from the
    root's optimal trajectory (held at x_f past its horizon)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    x_f = np.asarray(x_f, dtype=float)
    ref = np.stack([
        np.interp(traj.times, root.times, root.states[:, j], right=float(x_f[j]))
        for j in range(root.states.shape[1])
    ], axis=1)
    dev = np.linalg.norm(traj.states - ref, axis=1)
    idx = np.nonzero(dev > tau)[0]
    if idx.size == 0:
        return None
    i = int(idx[0])
    return ResampleEvent(index=i, time=float(traj.times[i]),
                         state=traj.states[i].copy(), deviation=float(dev[i]))


# -- enrichment loops ------------------------------------------------------------


@dataclass(frozen=True)
class ArtSettings:
    tau: float = 1.0
    n_iterations: int = 6
    mode: str = "union"
    ivp: IvpSettings = field(default_factory=IvpSettings)

    def __post_init__(self):
        if self.tau <= 0 or self.n_iterations < 1:
            raise ValueError("tau and n_iterations must be positive")
        if self.mode not in ("union", "replacement"):
            raise ValueError("mode must be 'union' or 'replacement'")


@dataclass
class IterationOutcome:
    iteration: int
    n_events: int
    n_labeled: int
    n_failed: int
    dataset_size: int


@dataclass
class EnrichmentResult:
    policies: list                 # trained policy per iteration, 0..K
    ensemble: EnsemblePolicy       # mean of iterations 1..K
    datasets: list                 # Dataset per iteration, 0..K
    outcomes: list                 # IterationOutcome per iteration 1..K


class EnrichmentError(RuntimeError):
    """Raised when an enrichment iteration cannot label any of its states."""


def derived_seed(base_seed: int, *key) -> int:
    """Deterministic child seed for one training role of one iteration."""
    ss = np.random.SeedSequence(entropy=int(base_seed), spawn_key=tuple(key))
    return int(ss.generate_state(1)[0])


def train_policy(arch, dataset: Dataset, val_arrays, lqr_parts,
                 base_config: TrainConfig, base_seed: int, iteration: int):
    """Fresh-initialization fit of the requested architecture on a dataset."""
    X, U, tf = dataset.arrays()
    c_cfg = replace(base_config, seed=derived_seed(base_seed, iteration, 0))
    Xv, Uv, tfv = val_arrays
    if arch == "mlp":
        res = train_control_net((X, U, tf), (Xv, Uv, tfv), c_cfg,
                                policy_parts=None)
        return MlpPolicy(net=res.params)
    if arch != "qrnet":
        raise ValueError(f"unknown architecture {arch!r}")
    table, blend, sat = lqr_parts
    res = train_control_net((X, U, tf), (Xv, Uv, tfv), c_cfg,
                            policy_parts=lqr_parts)
    t_cfg = replace(base_config, seed=derived_seed(base_seed, iteration, 1))
    t_res = train_time_net((X, tf), (Xv, tfv), t_cfg)
    return QrnetPolicy(control_net=res.params, time_net=t_res.params,
                       table=table, blend=blend, sat=sat)


def label_state(model, cost, root: LabeledSolve, t_sample, x_sample,
                ft_settings: FreeTimeSettings):
    """Warm-started optimal re-solve from a state visited at time t_sample.

    The horizon guess is the root's remaining time and the control guess is
    the tail of the root's own optimal sequence.  Returns None on failure.
    """
    dt = ft_settings.dt
    guess_tf = max(root.t_f - t_sample, 4.0 * dt)
    dt_root = root.t_f / root.controls.shape[0]
    k0 = min(int(np.floor(t_sample / dt_root)), root.controls.shape[0] - 1)
    tail = root.controls[k0:]
    try:
        free = solve_free_time(
            model, cost, x_sample,
            settings=replace(ft_settings, t_f_init=guess_tf),
            initial_controls=tail)
    except (SolveDivergedError, FloatingPointError):
        return None
    if not (free.converged and free.solution.converged):
        return None
    return free


def _write_samples(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def _enrichment_loop(model, cost, roots, initial_data, val_arrays, lqr_parts,
                     train_config, ft_settings, art, base_seed, arch,
                     out_dir, sample_fn, mode):
    """Common skeleton of both enrichment strategies.

    sample_fn(iteration, root, trajectory) yields (time, state) pairs to
    label; mode decides how freshly labelled records enter the dataset.
    """
    x0s = np.vstack([r.x0 for r in roots])
    data = initial_data.copy()
    policy = train_policy(arch, data, val_arrays, lqr_parts, train_config,
                          base_seed, iteration=0)
    policies = [policy]
    datasets = [data]
    outcomes = []
    if out_dir is not None:
        save_checkpoint(policy, f"{out_dir}/policy_0.json",
                        meta={"iteration": 0, "seed": base_seed})

    for k in range(1, art.n_iterations + 1):
        trajs = simulate_ivp_batch(model, cost, policies[-1], x0s, art.ivp)
        requests = []
        for root, traj in zip(roots, trajs):
            for t_sample, x_sample in sample_fn(k, root, traj):
                requests.append((root, t_sample, x_sample))

        new_data = Dataset()
        cuts = {}
        n_failed = 0
        for j, (root, t_sample, x_sample) in enumerate(requests):
            free = label_state(model, cost, root, t_sample, x_sample,
                               ft_settings)
            if free is None:
                n_failed += 1
                continue
            child = f"{root.traj_id}/i{k}e{j}"
            new_data.add_trajectory(child, free.solution.states,
                                    free.solution.controls, free.t_f,
                                    root_id=root.traj_id, t_start=t_sample)
            cuts[root.traj_id] = t_sample
        if requests and n_failed == len(requests):
            raise EnrichmentError(
                f"iteration {k}: all {len(requests)} labelling solves failed")

        if mode == "replacement":
            data = data.merge_replacement(new_data, cuts)
        else:
            data = data.merge_union(new_data)
        policy = train_policy(arch, data, val_arrays, lqr_parts, train_config,
                              base_seed, iteration=k)
        policies.append(policy)
        datasets.append(data)
        outcomes.append(IterationOutcome(
            iteration=k, n_events=len(requests),
            n_labeled=len(requests) - n_failed, n_failed=n_failed,
            dataset_size=len(data)))

        if out_dir is not None:
            _write_samples(f"{out_dir}/samples_{k}.ndjson", [
                {"root": root.traj_id, "time": t_sample,
                 "x": [float(v) for v in x_sample]}
                for root, t_sample, x_sample in requests])
            write_ndjson(new_data, f"{out_dir}/labels_{k}.ndjson")
            save_checkpoint(policy, f"{out_dir}/policy_{k}.json",
                            meta={"iteration": k, "seed": base_seed})

    return EnrichmentResult(policies=policies,
                            ensemble=EnsemblePolicy(members=policies[1:]),
                            datasets=datasets, outcomes=outcomes)


def ivp_art_run(model, cost, roots, initial_data, val_arrays, lqr_parts,
                train_config, ft_settings, art: ArtSettings, seed: int,
                arch: str = "qrnet", out_dir=None) -> EnrichmentResult:
    """Enhanced sampling with automatic resampling times.

    New states are the first simulation knots that deviate more than tau from
    each root's optimal trajectory; rollouts that never deviate contribute
    nothing that iteration.
    """
    x_f = np.asarray(cost.x_f)

    def sample_fn(_k, root, traj):
        event = find_resample_state(traj, root, x_f, art.tau)
        if event is None:
            return []
        return [(event.time, event.state)]

    return _enrichment_loop(model, cost, roots, initial_data, val_arrays,
                            lqr_parts, train_config, ft_settings, art,
                            seed, arch, out_dir, sample_fn, art.mode)


def dagger_run(model, cost, roots, initial_data, val_arrays, lqr_parts,
               train_config, ft_settings, art: ArtSettings, seed: int,
               arch: str = "qrnet", out_dir=None) -> EnrichmentResult:
    """Baseline enrichment: label the rollout states at 25% and 75% of each
    root's optimal horizon, whether or not the rollout deviates."""

    def sample_fn(_k, root, traj):
        dt = traj.times[1] - traj.times[0] if traj.times.size > 1 else 0.0
        out = []
        for frac in (0.25, 0.75):
            t_sample = frac * root.t_f
            if dt <= 0.0:
                continue
            idx = int(round(t_sample / dt))
            if idx >= traj.states.shape[0]:
                continue   # rollout truncated before the sample time
            out.append((float(traj.times[idx]), traj.states[idx].copy()))
        return out

    return _enrichment_loop(model, cost, roots, initial_data, val_arrays,
                            lqr_parts, train_config, ft_settings, art,
                            seed, arch, out_dir, sample_fn, mode="union")
