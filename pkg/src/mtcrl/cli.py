"""Command-line entry point: ``mtcrl {train,eval-robustness,eval-compress,eval-predict,tc-oracle,report}``.

Exit codes: 0 success, 2 usage error, 3 data or contract error, 4 numerical fault.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import fcntl
import hashlib
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import ContractError, DomainError, ShapeError
from .checkpoint import CheckpointError
from .envs import REGISTRY, SimulationFault
from .evaluation import (KINDS, PREDICTION_HORIZONS, REPORT_COLUMNS, ar1_bound_estimate, ar1_covariance,
                         compress_trajectory, evaluate_policy, gaussian_tc_analytic, load_models,
                         normalize_scores, read_trajectories, robustness_sweep, t_step_prediction_error)
from .models import ALGOS
from .objective import TrainingFault
from .rng import stream
from .trainer import TrainConfig, checkpoint_config, fmt, run

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# observation-noise and mass grids are the standard robustness levels; action-noise and
# distractor grids are our own choice
DEFAULT_LEVELS = {
    "obs": (0.02, 0.04, 0.06, 0.08, 0.1),
    "act": (0.1, 0.2, 0.3, 0.4, 0.5),
    "mass": (0.25, 0.5, 0.75, 1.25, 1.5, 1.75),
    "distract": (1, 2, 4, 8),
}
IDENTITY_LEVEL = {"obs": 0.0, "act": 0.0, "mass": 1.0, "distract": 0}


class UsageError(Exception):
    pass


class _Formatter(argparse.HelpFormatter):
    # fixed width so help text and the generated reference do not depend on the terminal
    def __init__(self, prog):
        super().__init__(prog, width=100)


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("formatter_class", _Formatter)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _float_list(text: str) -> list[float]:
    items = [t for t in text.split(",") if t.strip()]
    if not items:
        raise argparse.ArgumentTypeError("expected a non-empty comma-separated list")
    try:
        return [float(t) for t in items]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _int_list(text: str) -> list[int]:
    vals = _float_list(text)
    if any(v != int(v) for v in vals):
        raise argparse.ArgumentTypeError("expected integers")
    return [int(v) for v in vals]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mtcrl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train an agent and write checkpoints, metrics and a manifest")
    t.add_argument("--env", required=True, choices=sorted(REGISTRY))
    t.add_argument("--algo", choices=ALGOS, help="default: mtc")
    t.add_argument("--steps", type=int, help="total environment steps")
    t.add_argument("--seed", type=int)
    t.add_argument("--ip", type=float, help="constraint level on the bound")
    t.add_argument("--m", type=float, help="bound mixing coefficient")
    t.add_argument("--history", type=int, help="window length H")
    t.add_argument("--config", type=Path, help="flat key=value file; flags override it")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")
    t.add_argument("--out", type=Path, required=True)

    r = sub.add_parser("eval-robustness", help="evaluate a checkpoint under a perturbation grid")
    r.add_argument("--ckpt", type=Path, required=True)
    r.add_argument("--noise-kind", choices=KINDS, required=True)
    r.add_argument("--levels", type=_float_list, help="comma-separated; defaults to the standard grid")
    r.add_argument("--seeds", type=_int_list, default=[0])
    r.add_argument("--episodes", type=int, default=30)
    r.add_argument("--method", help="label for the report rows (default: the checkpoint's algo)")
    r.add_argument("--env", choices=sorted(REGISTRY), help="default: the env the checkpoint was trained on")
    r.add_argument("--horizon", type=int, default=1000)
    r.add_argument("--out", type=Path, required=True)

    c = sub.add_parser("eval-compress", help="compressed sizes of evaluation trajectories")
    c.add_argument("--ckpt", type=Path, required=True)
    c.add_argument("--episodes", type=int, default=30)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--method")
    c.add_argument("--env", choices=sorted(REGISTRY))
    c.add_argument("--horizon", type=int, default=1000)
    c.add_argument("--out", type=Path, required=True)

    e = sub.add_parser("eval-predict", help="held-out t-step action prediction NLL")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", type=Path)
    src.add_argument("--trajectories", type=Path, help="binary trajectory dump")
    e.add_argument("--t", type=_int_list, default=list(PREDICTION_HORIZONS))
    e.add_argument("--episodes", type=int, default=30)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--fit-steps", type=int, default=2000)
    e.add_argument("--method")
    e.add_argument("--env", choices=sorted(REGISTRY))
    e.add_argument("--horizon", type=int, default=1000)
    e.add_argument("--out", type=Path, required=True)

    o = sub.add_parser("tc-oracle", help="AR(1) Gaussian chain: analytic TC vs Monte-Carlo bound")
    o.add_argument("--rho", type=float, required=True)
    o.add_argument("--n", type=int, required=True)
    o.add_argument("--samples", type=int, default=1_000_000)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out", type=Path)

    rep = sub.add_parser("report", help="merge robustness CSVs and normalise scores")
    rep.add_argument("--inputs", type=Path, nargs="+", required=True)
    rep.add_argument("--normalize", action="store_true")
    rep.add_argument("--horizon", type=int, default=1000)
    rep.add_argument("--out", type=Path, required=True)
    return p


# -- plumbing ----------------------------------------------------------------------------------

def code_version() -> str:
    """Package version plus a digest of the installed sources."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def write_manifest(out: Path, command: str, entries: dict) -> None:
    """Flat key=value text; the timestamp sits alone on the last line."""
    lines = [f"command={command}", f"code_version={code_version()}"]
    lines += [f"{k}={_manifest_value(v)}" for k, v in sorted(entries.items())]
    lines.append(f"timestamp={datetime.datetime.now(datetime.timezone.utc).isoformat()}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def _manifest_value(v) -> str:
    if isinstance(v, float):
        return fmt(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_manifest_value(x) for x in v)
    return str(v)


@contextmanager
def output_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / ".lock", "w") as fh:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise ContractError(f"{out} is in use by another mtcrl process") from None
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def read_config_file(path: Path) -> dict:
    entries = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        entries[k.strip()] = v.strip()
    return entries


def write_rows(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row[c]) if isinstance(row[c], float) else row[c] for c in columns])


def _checkpoint_env(args, ckpt_path: Path) -> str:
    env = args.env or checkpoint_config(ckpt_path).get("env")
    if env is None:
        raise UsageError("--env is required: the checkpoint does not record its environment")
    return env


# -- commands --------------------------------------------------------------------------------

def cmd_train(args) -> int:
    values = read_config_file(args.config) if args.config else {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    flags = {"env": args.env, "algo": args.algo, "total_steps": args.steps, "seed": args.seed,
             "ip": args.ip, "m": args.m, "history": args.history}
    values.update({k: v for k, v in flags.items() if v is not None})
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown config keys {unknown}; valid: {sorted(known)}")
    try:
        config = TrainConfig.from_dict(values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    with output_lock(args.out):
        result = run(config, args.out, resume=args.resume)
        modules = [name for name, _ in result_modules(result.final_checkpoint)]
        write_manifest(args.out, "train", {**config.to_dict(), "m_effective": config.m_effective,
                                           "regularized": config.regularized, "modules": modules})
    return EXIT_OK


def result_modules(path: Path):
    models = load_models(path)
    return [(name, m) for name, m in models._children.items()]


def _grid(kind: str, levels) -> list:
    levels = list(DEFAULT_LEVELS[kind] if levels is None else levels)
    ident = IDENTITY_LEVEL[kind]
    if ident not in levels:
        levels = [ident] + levels
    return [(kind, lv) for lv in levels]


def cmd_eval_robustness(args) -> int:
    if args.episodes < 0:
        raise UsageError("--episodes must be non-negative")
    env = _checkpoint_env(args, args.ckpt)
    models = load_models(args.ckpt)
    method = args.method or models.algo
    with output_lock(args.out):
        grid = _grid(args.noise_kind, args.levels)
        rows = normalize_scores(robustness_sweep(models, env, grid, args.seeds, args.episodes,
                                                 method=method, horizon=args.horizon), args.horizon)
        write_rows(args.out / "robustness.csv", REPORT_COLUMNS, rows)
        write_manifest(args.out, "eval-robustness", {"ckpt": args.ckpt, "noise_kind": args.noise_kind,
                                                     "levels": [lv for _, lv in grid], "seeds": args.seeds,
                                                     "episodes": args.episodes, "method": method, "env": env})
    return EXIT_OK


def cmd_eval_compress(args) -> int:
    env = _checkpoint_env(args, args.ckpt)
    models = load_models(args.ckpt)
    method = args.method or models.algo
    with output_lock(args.out):
        res = evaluate_policy(models, env, args.episodes, seed=args.seed, horizon=args.horizon)
        rows = [dict(method=method, task=env, seed=args.seed, episode=i, steps=len(tr),
                     bytes=compress_trajectory(tr), episode_return=float(ret))
                for i, (tr, ret) in enumerate(zip(res.trajectories, res.returns))]
        write_rows(args.out / "compress.csv", ("method", "task", "seed", "episode", "steps", "bytes",
                                               "episode_return"), rows)
        write_manifest(args.out, "eval-compress", {"ckpt": args.ckpt, "episodes": args.episodes,
                                                   "seed": args.seed, "method": method, "env": env,
                                                   "compressor": "bz2", "precision": 1})
    return EXIT_OK


def cmd_eval_predict(args) -> int:
    if args.ckpt is not None:
        env = _checkpoint_env(args, args.ckpt)
        models = load_models(args.ckpt)
        method = args.method or models.algo
        trajs = evaluate_policy(models, env, args.episodes, seed=args.seed, horizon=args.horizon).trajectories
    else:
        trajs = read_trajectories(args.trajectories)
        env = trajs[0].env_id if trajs else (args.env or "")
        method = args.method or "unknown"
    if not trajs:
        raise ContractError("no trajectories to fit")
    shortest = min(len(tr) for tr in trajs)
    bad = [t for t in args.t if t >= shortest]
    if bad:
        raise UsageError(f"--t {bad} must be smaller than the trajectory length {shortest}")
    with output_lock(args.out):
        rows = [dict(method=method, task=env, t=t,
                     nll=t_step_prediction_error(trajs, t, steps=args.fit_steps, seed=args.seed))
                for t in args.t]
        write_rows(args.out / "predict.csv", ("method", "task", "t", "nll"), rows)
        write_manifest(args.out, "eval-predict", {"source": args.ckpt or args.trajectories, "t": args.t,
                                                  "episodes": args.episodes, "seed": args.seed,
                                                  "fit_steps": args.fit_steps, "method": method})
    return EXIT_OK


def cmd_tc_oracle(args) -> int:
    if args.n < 2 or args.samples < 2:
        raise UsageError("--n and --samples must be at least 2")
    tc = gaussian_tc_analytic(ar1_covariance(args.rho, args.n))
    est, se = ar1_bound_estimate(args.rho, args.n, args.samples, stream(args.seed, "tc-oracle"))
    print(f"analytic_tc={fmt(tc)} bound_estimate={fmt(est)} standard_error={fmt(se)}")
    if args.out is not None:
        with output_lock(args.out):
            write_rows(args.out / "tc_oracle.csv", ("rho", "n", "samples", "analytic_tc", "bound_estimate",
                                                    "standard_error"),
                       [dict(rho=float(args.rho), n=args.n, samples=args.samples, analytic_tc=tc,
                             bound_estimate=est, standard_error=se)])
            write_manifest(args.out, "tc-oracle", {"rho": args.rho, "n": args.n, "samples": args.samples,
                                                   "seed": args.seed})
    return EXIT_OK


def read_report(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise ContractError(f"{path}: header {reader.fieldnames} is not {list(REPORT_COLUMNS)}")
        rows = []
        for row in reader:
            row["level"] = float(row["level"])
            for k in ("mean_return", "ci90", "normalized_score"):
                row[k] = float(row[k])
            rows.append(row)
    return rows


def cmd_report(args) -> int:
    rows = [r for path in args.inputs for r in read_report(path)]
    if args.normalize:
        rows = normalize_scores(rows, args.horizon)
    rows.sort(key=lambda r: (r["task"], r["perturbation"], r["level"], r["seed"], r["method"]))
    with output_lock(args.out):
        write_rows(args.out / "report.csv", REPORT_COLUMNS, rows)
        summary = {}
        for r in rows:
            if r["seed"] == "all":
                summary.setdefault((r["method"], r["task"], r["perturbation"]), []).append(r["normalized_score"])
        agg = [dict(method=m, task=t, perturbation=k, mean_normalized_score=float(np.mean(v)))
               for (m, t, k), v in sorted(summary.items())]
        write_rows(args.out / "summary.csv", ("method", "task", "perturbation", "mean_normalized_score"), agg)
        write_manifest(args.out, "report", {"inputs": [str(p) for p in args.inputs], "normalize": args.normalize})
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval-robustness": cmd_eval_robustness, "eval-compress": cmd_eval_compress,
            "eval-predict": cmd_eval_predict, "tc-oracle": cmd_tc_oracle, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingFault, SimulationFault, FloatingPointError) as exc:
        print(f"numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractError, CheckpointError, DomainError, ShapeError, FileNotFoundError, KeyError,
            ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def render_reference() -> str:
    """Markdown reference of every subcommand's flags and every config key."""
    parser = build_parser()
    out = ["# mtcrl command reference", "", "Generated from the argument parser; do not edit by hand.", ""]
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    helps = {a.dest: a.help for a in sub._choices_actions}
    for name, sp in sub.choices.items():
        out += [f"## `mtcrl {name}`", "", helps.get(name) or "", "", "```", sp.format_usage().strip(), "```", ""]
        out += ["| flag | default | help |", "|---|---|---|"]
        for a in sp._actions:
            if not a.option_strings or a.dest == "help":
                continue
            flag = ", ".join(a.option_strings)
            if a.choices:
                flag += " {" + ",".join(map(str, a.choices)) + "}"
            default = "required" if a.required else ("" if a.default in (None, [], False) else a.default)
            out.append(f"| `{flag}` | {default} | {a.help or ''} |")
        out.append("")
    out += ["## Run config keys (`--config` file or `--set KEY=VALUE`)", "", "| key | default |", "|---|---|"]
    for f in dataclasses.fields(TrainConfig):
        default = f.default if f.default is not dataclasses.MISSING else ""
        out.append(f"| `{f.name}` | {default} |")
    return "\n".join(out) + "\n"


if __name__ == "__main__":
    sys.exit(main())
