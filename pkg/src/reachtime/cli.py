"""Command-line front end.

Subcommands cover the pipeline stages: gen-data labels initial states with
free-time solves, train fits one policy, ivp-art / dagger run the enrichment
loops, eval scores a saved policy closed-loop, plot renders saved CDF files,
and oracle runs the independent correctness suite.  All randomness flows from
the experiment seed; --seed overrides the config value.
"""

import argparse
import csv
import json
import os
from dataclasses import replace
from pathlib import Path

import numpy as np

from .harness import (
    WORKERS_ENV_VAR,
    default_benchmark_config,
    evaluate_policy,
    generate_dataset,
    load_config,
    plot_cdf_points,
    replay_reference_costs,
    sample_initial_states,
    write_cdf_csv,
)
from .data import read_ndjson, write_ndjson
from .oracles import run_oracle_suite
from .policy import EnsemblePolicy, load_checkpoint, save_checkpoint
from .sampling import (
    dagger_run,
    derived_seed,
    ivp_art_run,
    read_roots,
    write_roots,
)


def _resolve_config(args):
    cfg = load_config(args.config) if args.config else default_benchmark_config()
    if args.seed is not None:
        cfg = replace(cfg, experiment=replace(cfg.experiment, seed=args.seed))
    return cfg


def _out_dir(args, command) -> Path:
    out = Path(args.out) if args.out else Path("runs") / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _workers(args) -> int:
    env = os.environ.get(WORKERS_ENV_VAR)
    if env is not None:
        return max(1, int(env))
    return max(1, args.workers)


def _generate_split(cfg, model, cost, workers):
    exp = cfg.experiment
    train_states = sample_initial_states(exp.q_center, exp.cube_side,
                                         exp.n_train,
                                         derived_seed(exp.seed, 100, 0))
    val_states = sample_initial_states(exp.q_center, exp.cube_side, exp.n_val,
                                       derived_seed(exp.seed, 100, 1))
    train = generate_dataset(model, cost, train_states, cfg.freetime,
                             id_prefix="train", workers=workers)
    val = generate_dataset(model, cost, val_states, cfg.freetime,
                           id_prefix="val", workers=workers)
    return train, val


def _report_line(split, report) -> str:
    return (f"{split}: {report.n_converged}/{report.n_states} converged"
            f" (max t_f {report.max_t_f:.3f} s)")


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    model = cfg.model.build()
    cost = cfg.cost.build(model)
    out = _out_dir(args, "gen-data")
    (train_data, train_roots, train_rep), (val_data, _, val_rep) = \
        _generate_split(cfg, model, cost, _workers(args))
    write_ndjson(train_data, out / "train.ndjson")
    write_roots(train_roots, out / "train_roots.ndjson")
    write_ndjson(val_data, out / "val.ndjson")
    with open(out / "report.json", "w") as fh:
        json.dump({"train": train_rep.to_dict(), "val": val_rep.to_dict()},
                  fh, indent=2)
    print(_report_line("train", train_rep))
    print(_report_line("val", val_rep))
    print(f"wrote {out}")
    return 0


def _load_split(args, cfg, model, cost):
    """Dataset triple from --data if given, freshly generated otherwise."""
    if args.data:
        data = Path(args.data)
        train_data = read_ndjson(data / "train.ndjson")
        val_data = read_ndjson(data / "val.ndjson")
        roots = read_roots(data / "train_roots.ndjson")
        return train_data, val_data, roots
    (train_data, roots, train_rep), (val_data, _, val_rep) = \
        _generate_split(cfg, model, cost, _workers(args))
    print(_report_line("train", train_rep))
    print(_report_line("val", val_rep))
    return train_data, val_data, roots


def cmd_train(args) -> int:
    from .sampling import train_policy

    cfg = _resolve_config(args)
    model = cfg.model.build()
    cost = cfg.cost.build(model)
    out = _out_dir(args, "train")
    train_data, val_data, _ = _load_split(args, cfg, model, cost)
    lqr_parts = cfg.lqr.build(model, cost) if args.arch == "qrnet" else None
    policy = train_policy(args.arch, train_data, val_data.arrays(), lqr_parts,
                          cfg.training, cfg.experiment.seed, 0)
    path = out / "policy.json"
    save_checkpoint(policy, path,
                    meta={"arch": args.arch, "seed": cfg.experiment.seed})
    print(f"trained {args.arch} on {len(train_data.records)} records"
          f" -> {path}")
    return 0


def _cmd_enrich(args, runner, name) -> int:
    cfg = _resolve_config(args)
    model = cfg.model.build()
    cost = cfg.cost.build(model)
    out = _out_dir(args, name)
    train_data, val_data, roots = _load_split(args, cfg, model, cost)
    lqr_parts = cfg.lqr.build(model, cost)
    result = runner(model, cost, roots, train_data, val_data.arrays(),
                    lqr_parts, cfg.training, cfg.freetime, cfg.sampling.art(),
                    seed=cfg.experiment.seed, arch=args.arch,
                    out_dir=str(out))
    for o in result.outcomes:
        print(f"iteration {o.iteration}: {o.n_events} events,"
              f" {o.n_labeled} labeled, {o.n_failed} failed,"
              f" dataset size {o.dataset_size}")
    with open(out / "outcomes.json", "w") as fh:
        json.dump([{"iteration": o.iteration, "n_events": o.n_events,
                    "n_labeled": o.n_labeled, "n_failed": o.n_failed,
                    "dataset_size": o.dataset_size}
                   for o in result.outcomes], fh, indent=2)
    print(f"wrote {out}")
    return 0


def cmd_ivp_art(args) -> int:
    return _cmd_enrich(args, ivp_art_run, "ivp-art")


def cmd_dagger(args) -> int:
    return _cmd_enrich(args, dagger_run, "dagger")


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    model = cfg.model.build()
    cost = cfg.cost.build(model)
    exp = cfg.experiment
    out = _out_dir(args, "eval")
    members = [load_checkpoint(p) for p in args.policy]
    policy = members[0] if len(members) == 1 else EnsemblePolicy(members)
    test_states = sample_initial_states(exp.q_center, exp.cube_side,
                                        exp.n_test, exp.test_seed)
    _, roots, report = generate_dataset(model, cost, test_states,
                                        cfg.freetime, id_prefix="test",
                                        workers=_workers(args))
    ivp = cfg.sampling.ivp()
    refs = replay_reference_costs(model, cost, roots, ivp)
    keep = np.isfinite(refs)
    states = np.array([r.x0 for r in roots])[keep]
    if states.shape[0] == 0:
        print("no test state produced a usable reference cost")
        return 1
    metrics = evaluate_policy(model, cost, policy, states, ivp, refs[keep])
    with open(out / "metrics.json", "w") as fh:
        json.dump({"n_states": int(states.shape[0]),
                   "success_rate": metrics.success_rate,
                   "mean_ratio": metrics.mean_ratio,
                   "std_ratio": metrics.std_ratio,
                   "n_fail": metrics.n_fail,
                   "n_diverged": metrics.n_diverged,
                   "ratios": list(metrics.ratios)}, fh, indent=2)
    write_cdf_csv(metrics.ratios, out / "cdf.csv")
    print(f"{states.shape[0]} states ({report.n_converged}/{report.n_states}"
          f" references converged): success {metrics.success_rate:.3f},"
          f" mean ratio {metrics.mean_ratio:.3f}"
          f" +- {metrics.std_ratio:.3f}")
    return 0


def _read_cdf_csv(path):
    xs, fracs = [], []
    with open(path) as fh:
        for row in csv.DictReader(fh):
            xs.append(float(row["ratio"]))
            fracs.append(float(row["cumulative_fraction"]))
    return np.asarray(xs), np.asarray(fracs)


def cmd_plot(args) -> int:
    out = _out_dir(args, "plot")
    stems = [Path(p).stem for p in args.files]
    points = {}
    for p, stem in zip(args.files, stems):
        label = stem if stems.count(stem) == 1 else str(p)
        points[label] = _read_cdf_csv(p)
    path = out / "cdf.png"
    plot_cdf_points(points, path)
    print(f"wrote {path}")
    return 0


def cmd_oracle(args) -> int:
    report = run_oracle_suite()
    for line in report.lines():
        print(line)
    if args.out:
        out = _out_dir(args, "oracle")
        with open(out / "oracle_report.json", "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, default=None,
                        help="override the experiment seed")
    common.add_argument("--out", help="output directory (default runs/<cmd>)")
    common.add_argument("--workers", type=int, default=1,
                        help=f"solver fan-out; {WORKERS_ENV_VAR} overrides")

    parser = argparse.ArgumentParser(
        prog="reachtime",
        description="free terminal time optimal control and policy learning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common],
                       help="label sampled initial states with solves")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common],
                       help="fit one policy to a labeled dataset")
    p.add_argument("--data", help="gen-data output directory")
    p.add_argument("--arch", choices=("qrnet", "mlp"), default="qrnet")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ivp-art", parents=[common],
                       help="enhanced sampling with automatic resample times")
    p.add_argument("--data", help="gen-data output directory")
    p.add_argument("--arch", choices=("qrnet", "mlp"), default="qrnet")
    p.set_defaults(func=cmd_ivp_art)

    p = sub.add_parser("dagger", parents=[common],
                       help="fixed-fraction relabeling baseline")
    p.add_argument("--data", help="gen-data output directory")
    p.add_argument("--arch", choices=("qrnet", "mlp"), default="qrnet")
    p.set_defaults(func=cmd_dagger)

    p = sub.add_parser("eval", parents=[common],
                       help="closed-loop metrics for saved policies")
    p.add_argument("--policy", nargs="+", required=True,
                   help="checkpoint path(s); several form an ensemble")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", parents=[common],
                       help="render saved CDF files to a PNG")
    p.add_argument("files", nargs="+", help="cdf CSV paths")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("oracle", parents=[common],
                       help="independent correctness suite")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
