"""Experiment orchestration: configuration, dataset generation, policy
evaluation, benchmark runs, and plot-data emission.

Everything here is glue around the solver and training modules; the one
substantive convention is how optimal reference costs are computed for the
cost-ratio metric (see replay_reference_costs).
"""

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .ddp import DdpSettings, SolveDivergedError
from .dynamics import (
    CostSpec,
    ModelSpec,
    double_integrator,
    planar_arm,
    reach_cost,
)
from .freetime import FreeTimeSettings, solve_free_time
from .lqr import BlendSchedule, Saturation, build_riccati_table
from .policy import ReplayPolicy, TrainConfig
from .sampling import (
    ArtSettings,
    IvpSettings,
    LabeledSolve,
    dagger_run,
    derived_seed,
    ivp_art_run,
    simulate_ivp_batch,
)

__all__ = [
    "BenchmarkResult",
    "ExperimentConfig",
    "GenerationReport",
    "LqrConfig",
    "Metrics",
    "RunConfig",
    "config_from_dict",
    "cost_ratio_cdf",
    "default_benchmark_config",
    "evaluate_policy",
    "generate_dataset",
    "load_config",
    "parallel_map",
    "replay_reference_costs",
    "run_benchmark",
    "sample_initial_states",
    "write_cdf_csv",
    "write_metrics_csv",
]

WORKERS_ENV_VAR = "REACHTIME_WORKERS"


# -- configuration ----------------------------------------------------------------


def _take(section: dict, allowed, where: str) -> dict:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ValueError(f"unknown {where} keys: {sorted(unknown)}")
    return dict(section)


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "planar_arm"
    dof: int = 2
    masses: tuple | None = None
    lengths: tuple | None = None
    gravity: float = 9.81
    damping: tuple | None = None

    def build(self) -> ModelSpec:
        if self.kind == "double_integrator":
            return double_integrator()
        if self.kind == "planar_arm":
            return planar_arm(dof=self.dof, masses=self.masses,
                              lengths=self.lengths, gravity=self.gravity,
                              damping=self.damping)
        raise ValueError(f"unknown model kind {self.kind!r}")


@dataclass(frozen=True)
class CostConfig:
    q_f: tuple = (0.4, -0.3)
    r_time: float = 100.0
    r_control: float = 0.025
    r_accel: float = 0.005
    r_terminal: float = 2.5e5

    def build(self, model: ModelSpec) -> CostSpec:
        return reach_cost(model, np.asarray(self.q_f, dtype=float),
                          r_time=self.r_time, r_control=self.r_control,
                          r_accel=self.r_accel, r_terminal=self.r_terminal)


@dataclass(frozen=True)
class LqrConfig:
    horizon: float = 0.8
    delta: float = 5e-4
    t_low: float = 0.08
    t_high: float = 0.8
    eps_edge: float = 1e-5
    u_min: float = -2000.0
    u_max: float = 2000.0

    def build(self, model: ModelSpec, cost: CostSpec):
        table = build_riccati_table(model, cost, horizon=self.horizon,
                                    delta=self.delta)
        blend = BlendSchedule(t_low=self.t_low, t_high=self.t_high,
                              eps_edge=self.eps_edge)
        sat = Saturation.from_cost(cost, u_min=self.u_min, u_max=self.u_max)
        return table, blend, sat


@dataclass(frozen=True)
class SamplingConfig:
    tau: float = 0.5
    n_iterations: int = 3
    mode: str = "union"
    dt_sim: float = 1e-3
    sim_horizon: float = 2.0
    success_radius: float = 1e-3

    def ivp(self) -> IvpSettings:
        return IvpSettings(dt_sim=self.dt_sim, horizon=self.sim_horizon,
                           success_radius=self.success_radius)

    def art(self) -> ArtSettings:
        return ArtSettings(tau=self.tau, n_iterations=self.n_iterations,
                           mode=self.mode, ivp=self.ivp())


@dataclass(frozen=True)
class ExperimentConfig:
    q_center: tuple = (0.4, -0.3)
    cube_side: float = 1.0
    n_train: int = 100
    n_val: int = 30
    n_test: int = 100
    seed: int = 0
    seeds: tuple = (0, 1, 2)
    test_seed: int = 1234


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    cost: CostConfig = field(default_factory=CostConfig)
    freetime: FreeTimeSettings = field(default_factory=FreeTimeSettings)
    lqr: LqrConfig = field(default_factory=LqrConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)


_FREETIME_KEYS = {
    "t_f0": "t_f_init",
    "alpha": "step_scale",
    "eps": "gradient_tol",
    "eps0": "switch_tol",
    "dt": "dt",
    "max_outer": "max_outer",
    "schedule": "schedule",
}


def _freetime_from_dict(d: dict) -> FreeTimeSettings:
    d = _take(d, set(_FREETIME_KEYS) | {"ddp"}, "freetime")
    kwargs = {}
    for key, value in d.items():
        if key == "ddp":
            kwargs["ddp"] = DdpSettings(**_take(
                value, {f.name for f in DdpSettings.__dataclass_fields__.values()},
                "ddp"))
        elif key == "schedule":
            kwargs["schedule"] = tuple(int(n) for n in value)
        else:
            kwargs[_FREETIME_KEYS[key]] = value
    return FreeTimeSettings(**kwargs)


def _section(cls, d: dict, where: str, tuples=()):
    d = _take(d, {f for f in cls.__dataclass_fields__}, where)
    for key in tuples:
        if key in d and d[key] is not None:
            d[key] = tuple(d[key])
    return cls(**d)


def config_from_dict(d: dict) -> RunConfig:
    d = _take(d, {f for f in RunConfig.__dataclass_fields__}, "config")
    out = {}
    if "model" in d:
        out["model"] = _section(ModelConfig, d["model"], "model",
                                tuples=("masses", "lengths", "damping"))
    if "cost" in d:
        out["cost"] = _section(CostConfig, d["cost"], "cost", tuples=("q_f",))
    if "freetime" in d:
        out["freetime"] = _freetime_from_dict(d["freetime"])
    if "lqr" in d:
        out["lqr"] = _section(LqrConfig, d["lqr"], "lqr")
    if "training" in d:
        out["training"] = _section(TrainConfig, d["training"], "training")
    if "sampling" in d:
        out["sampling"] = _section(SamplingConfig, d["sampling"], "sampling")
    if "experiment" in d:
        out["experiment"] = _section(ExperimentConfig, d["experiment"],
                                     "experiment",
                                     tuples=("q_center", "seeds"))
    return RunConfig(**out)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def default_benchmark_config() -> RunConfig:
    """The 2-link benchmark: coarse solver grid, three enrichment rounds."""
    return RunConfig(
        freetime=FreeTimeSettings(dt=0.01, schedule=(30, 60, 120)),
        training=TrainConfig(epochs=150, batch_size=1024, val_every=10),
    )


# -- initial states and dataset generation ----------------------------------------


def sample_initial_states(q_center, cube_side, count, seed) -> np.ndarray:
    """Configurations uniform in the cube around q_center, zero velocities."""
    if count <= 0:
        raise ValueError("count must be positive")
    q_center = np.asarray(q_center, dtype=float)
    dof = q_center.shape[0]
    rng = np.random.default_rng(seed)
    q = q_center + cube_side * (rng.random((count, dof)) - 0.5)
    return np.hstack([q, np.zeros((count, dof))])


@dataclass
class GenerationReport:
    n_states: int
    n_converged: int
    failures: list               # dicts {index, reason}
    max_t_f: float

    @property
    def convergence_rate(self) -> float:
        return self.n_converged / self.n_states if self.n_states else 0.0

    def to_dict(self):
        return {"n_states": self.n_states, "n_converged": self.n_converged,
                "convergence_rate": self.convergence_rate,
                "max_t_f": self.max_t_f, "failures": self.failures}


def _solve_one(args):
    model, cost, x0, settings = args
    try:
        free = solve_free_time(model, cost, x0, settings=settings)
    except SolveDivergedError as err:
        return None, f"diverged at level {err.level}"
    except FloatingPointError as err:
        return None, f"floating point error: {err}"
    if not free.converged:
        return None, "outer iteration cap reached"
    if not free.solution.converged:
        return None, "final march unconverged"
    return free, None


def parallel_map(fn, items, workers=1):
    """Order-preserving map, fanned out to processes when workers > 1."""
    env = os.environ.get(WORKERS_ENV_VAR)
    if env:
        workers = int(env)
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=1))


def generate_dataset(model, cost, states, settings: FreeTimeSettings,
                     id_prefix="traj", workers=1):
    """One free-time solve per initial state.

    Converged solutions contribute every control knot as a training record;
    failures land in the report, never raise.  Returns the dataset, the
    surviving solutions as labelling roots, and the report.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    results = parallel_map(_solve_one,
                           [(model, cost, x0, settings) for x0 in states],
                           workers=workers)
    data, roots, failures = Dataset(), [], []
    max_t_f = 0.0
    for i, (free, reason) in enumerate(results):
        if free is None:
            failures.append({"index": i, "reason": reason})
            continue
        tid = f"{id_prefix}{i}"
        data.add_trajectory(tid, free.solution.states, free.solution.controls,
                            free.t_f)
        roots.append(LabeledSolve.from_free_time(tid, states[i], free))
        max_t_f = max(max_t_f, free.t_f)
    report = GenerationReport(n_states=states.shape[0],
                              n_converged=len(roots),
                              failures=failures, max_t_f=max_t_f)
    return data, roots, report


# -- evaluation --------------------------------------------------------------------


@dataclass
class Metrics:
    success_rate: float
    ratios: np.ndarray        # capped, one per test state
    raw_ratios: np.ndarray    # uncapped (failures still 10.0)
    mean_ratio: float
    std_ratio: float
    n_fail: int
    n_diverged: int


FAIL_RATIO = 10.0
SUCCESS_RATIO_CAP = 5.0


def replay_reference_costs(model, cost, roots, settings: IvpSettings):
    """Reference cost per root: the realized cost of replaying its own
    optimal control on the evaluation grid.

    Evaluating the reference with the same integrator, step size, and
    truncation rule as the policies keeps the cost ratio a like-for-like
    comparison; integrating the two sides on different grids skews ratios by
    the quadrature mismatch.  A root whose replay misses the target ball
    gets nan and should be excluded by the caller.
    """
    refs = np.full(len(roots), np.nan)
    for i, root in enumerate(roots):
        pol = ReplayPolicy(times=root.times[:-1], controls=root.controls,
                           u_hold=np.asarray(cost.u_f))
        tr = simulate_ivp_batch(model, cost, pol, root.x0[None, :],
                                settings)[0]
        if tr.first_hit is not None:
            refs[i] = tr.realized_cost
    return refs


def evaluate_policy(model, cost, policy, test_states, settings: IvpSettings,
                    optimal_costs) -> Metrics:
    """Closed-loop rollout metrics against precomputed reference costs.

    success iff the rollout enters the target ball within the horizon;
    failures score the flat penalty ratio, successes are capped above.
    """
    test_states = np.atleast_2d(np.asarray(test_states, dtype=float))
    optimal_costs = np.asarray(optimal_costs, dtype=float)
    if optimal_costs.shape[0] != test_states.shape[0]:
        raise ValueError("one optimal cost per test state is required")
    if not np.all(np.isfinite(optimal_costs)) or np.any(optimal_costs <= 0):
        raise ValueError("optimal costs must be finite and positive")

    trajs = simulate_ivp_batch(model, cost, policy, test_states, settings)
    raw = np.empty(len(trajs))
    capped = np.empty(len(trajs))
    n_fail = n_diverged = 0
    for i, tr in enumerate(trajs):
        n_diverged += int(tr.diverged)
        if tr.first_hit is None:
            raw[i] = capped[i] = FAIL_RATIO
            n_fail += 1
            continue
        r = tr.realized_cost / optimal_costs[i]
        if abs(r - 1.0) < 1e-9:
            r = 1.0    # snap float noise so a self-replay scores exactly 1
        raw[i] = r
        capped[i] = min(r, SUCCESS_RATIO_CAP)
    n = len(trajs)
    return Metrics(success_rate=(n - n_fail) / n, ratios=capped,
                   raw_ratios=raw, mean_ratio=float(np.mean(capped)),
                   std_ratio=float(np.std(capped)), n_fail=n_fail,
                   n_diverged=n_diverged)


def cost_ratio_cdf(ratios):
    """Right-continuous empirical CDF as (ratio, cumulative fraction) rows."""
    ratios = np.asarray(ratios, dtype=float)
    if ratios.size == 0:
        raise ValueError("need at least one ratio")
    xs = np.sort(ratios)
    fracs = np.searchsorted(xs, xs, side="right") / xs.size
    return xs, fracs


def write_cdf_csv(ratios, path):
    xs, fracs = cost_ratio_cdf(ratios)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ratio", "cumulative_fraction"])
        for x, f in zip(xs, fracs):
            writer.writerow([repr(float(x)), repr(float(f))])


METRICS_COLUMNS = ["iteration", "strategy", "seed", "success_rate",
                   "mean_ratio", "std_ratio", "n_fail", "n_diverged"]


def metrics_row(iteration, strategy, seed, metrics: Metrics) -> dict:
    return {
        "iteration": iteration,
        "strategy": strategy,
        "seed": seed,
        "success_rate": repr(float(metrics.success_rate)),
        "mean_ratio": repr(float(metrics.mean_ratio)),
        "std_ratio": repr(float(metrics.std_ratio)),
        "n_fail": metrics.n_fail,
        "n_diverged": metrics.n_diverged,
    }


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# -- benchmark ---------------------------------------------------------------------


@dataclass
class StrategyOutcome:
    seed: int
    strategy: str
    per_iteration: list       # Metrics for policy 0..K
    ensemble: Metrics


@dataclass
class BenchmarkResult:
    rows: list                 # metrics CSV rows in write order
    outcomes: list             # StrategyOutcome per (seed, strategy)
    test_report: GenerationReport
    train_reports: dict        # seed -> GenerationReport


def run_benchmark(config: RunConfig, out_dir=None, workers=1,
                  strategies=("ivp-art", "dagger", "mlp-art")):
    """Full scaled experiment: per seed, generate data, run each enrichment
    strategy, and evaluate every iteration's policy plus the ensemble on a
    shared held-out test set.

    Deterministic for a fixed config: per-seed randomness is derived from
    the seed alone and the test set from the experiment's test_seed.
    """
    exp = config.experiment
    model = config.model.build()
    cost = config.cost.build(model)
    lqr_parts = config.lqr.build(model, cost)
    art = config.sampling.art()

    test_states = sample_initial_states(exp.q_center, exp.cube_side,
                                        exp.n_test, exp.test_seed)
    _, test_roots, test_report = generate_dataset(
        model, cost, test_states, config.freetime, id_prefix="test",
        workers=workers)

    rows, outcomes, train_reports = [], [], {}
    for seed in exp.seeds:
        train_states = sample_initial_states(exp.q_center, exp.cube_side,
                                             exp.n_train,
                                             derived_seed(seed, 100, 0))
        val_states = sample_initial_states(exp.q_center, exp.cube_side,
                                           exp.n_val,
                                           derived_seed(seed, 100, 1))
        train_data, train_roots, train_report = generate_dataset(
            model, cost, train_states, config.freetime,
            id_prefix=f"s{seed}t", workers=workers)
        val_data, _, _ = generate_dataset(
            model, cost, val_states, config.freetime,
            id_prefix=f"s{seed}v", workers=workers)
        train_reports[seed] = train_report
        if not train_roots or not len(val_data):
            raise RuntimeError(f"seed {seed}: no usable training data")

        # evaluation horizon scales with the observed optimal horizons
        eval_settings = replace(config.sampling.ivp(),
                                horizon=1.5 * train_report.max_t_f)
        kept = [i for i, root in enumerate(test_roots)
                if root.t_f <= eval_settings.horizon]
        roots_kept = [test_roots[i] for i in kept]
        refs = replay_reference_costs(model, cost, roots_kept, eval_settings)
        ok = np.isfinite(refs)
        eval_roots = [r for r, good in zip(roots_kept, ok) if good]
        eval_states = np.vstack([r.x0 for r in eval_roots])
        eval_refs = refs[ok]

        for strategy in strategies:
            runner = dagger_run if strategy == "dagger" else ivp_art_run
            arch = "mlp" if strategy == "mlp-art" else "qrnet"
            sub_dir = None
            if out_dir is not None:
                sub_dir = os.path.join(out_dir, f"seed{seed}", strategy)
                os.makedirs(sub_dir, exist_ok=True)
            result = runner(model, cost, train_roots, train_data,
                            val_data.arrays(), lqr_parts, config.training,
                            config.freetime, art, seed=seed, arch=arch,
                            out_dir=sub_dir)
            per_iter = []
            for k, policy in enumerate(result.policies):
                m = evaluate_policy(model, cost, policy, eval_states,
                                    eval_settings, eval_refs)
                per_iter.append(m)
                rows.append(metrics_row(k, strategy, seed, m))
            m_ens = evaluate_policy(model, cost, result.ensemble,
                                    eval_states, eval_settings, eval_refs)
            rows.append(metrics_row("ensemble", strategy, seed, m_ens))
            outcomes.append(StrategyOutcome(seed=seed, strategy=strategy,
                                            per_iteration=per_iter,
                                            ensemble=m_ens))
            if sub_dir is not None:
                write_cdf_csv(m_ens.ratios,
                              os.path.join(sub_dir, "ensemble_cdf.csv"))

    if out_dir is not None:
        write_metrics_csv(rows, os.path.join(out_dir, "metrics.csv"))
        with open(os.path.join(out_dir, "reports.json"), "w") as fh:
            json.dump({
                "test": test_report.to_dict(),
                "train": {str(s): r.to_dict()
                          for s, r in train_reports.items()},
            }, fh, indent=2)
    return BenchmarkResult(rows=rows, outcomes=outcomes,
                           test_report=test_report,
                           train_reports=train_reports)


def plot_cdf(ratios_by_label: dict, path):
    """Cost-ratio CDF curves to a PNG; data-only work stays in cost_ratio_cdf."""
    plot_cdf_points({label: cost_ratio_cdf(ratios)
                     for label, ratios in ratios_by_label.items()}, path)


def plot_cdf_points(points_by_label: dict, path):
    """Same picture from precomputed (ratios, fractions) CDF points, so saved
    CDF files can be re-plotted without the raw ratios."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (xs, fracs) in points_by_label.items():
        ax.step(np.concatenate([[1.0], xs]),
                np.concatenate([[0.0], fracs]),
                where="post", label=label)
    ax.set_xlabel("cost ratio")
    ax.set_ylabel("fraction of trajectories")
    ax.set_xlim(left=1.0)
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
