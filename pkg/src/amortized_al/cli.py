"""Command-line entry point: ``train``, ``deploy``, ``report``, ``selftest``."""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .benchmarks import DATA_ENV, PROBLEM_NAMES, DataFormatError, get_problem
from .deploy import METHODS, ALTrace, deploy
from .evalreport import ReportError, build_report
from .fit import FitError
from .kernel_gp import FactorizationError
from .policy import CheckpointError, file_sha256, load_checkpoint
from .trainer import ConfigError, NonFiniteLossError, TrainConfig, select_best, train

log = logging.getLogger("amortized_al")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
MANIFEST = "manifest.json"


def parse_seeds(text: str) -> list[int]:
    """``"0,1,2"``, ``"0..4"`` (inclusive) or a mix of both."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError("no seeds given")
    return seeds


def _code_version() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
            cwd=Path(__file__).parent, timeout=5,
        )
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out_dir: Path, command: str, argv: list[str], **fields) -> Path:
    manifest = {
        "command": command,
        "argv": argv,
        "code_version": _code_version(),
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        **fields,
    }
    path = Path(out_dir) / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# -- train --------------------------------------------------------------------


def _train_one(args):
    config, out, seed = args
    record = train(config, out, seed)
    record.policy = None
    return record


def cmd_train(args, argv) -> int:
    config = TrainConfig.from_toml(args.config)
    if args.steps is not None:
        config.steps = args.steps
        config.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = _map(_train_one, [(config, out, s) for s in args.seeds], args.jobs)
    best = select_best(records)
    link = out / "best"
    if link.is_symlink() or link.exists():
        link.unlink()
    target = best.final_checkpoint
    link.symlink_to(target.relative_to(out))
    hashes = {str(Path(r.final_checkpoint).relative_to(out)): file_sha256(r.final_checkpoint) for r in records}
    write_manifest(
        out, "train", argv,
        config=config.to_dict(), config_path=str(args.config), seeds=args.seeds,
        checkpoint_sha256=hashes,
        best={"seed": best.seed, "checkpoint": str(target.relative_to(out)), "last10_mean": best.last10_mean},
        runs={r.seed: {"last10_mean": r.last10_mean, "dir": f"run_{r.seed}"} for r in records},
        outputs=[f"run_{s}" for s in args.seeds] + ["best"],
    )
    print(f"best seed {best.seed} (last-10-epoch mean loss {best.last10_mean:.5f}) -> {link}")
    return EXIT_OK


# -- deploy -------------------------------------------------------------------


def _deploy_one(args):
    method, problem_name, data_dir, variant, ckpt, T, n_init, seed, out = args
    problem = get_problem(problem_name, data_dir, variant)
    policy = sha = None
    if method == "policy":
        policy = load_checkpoint(ckpt)
        sha = file_sha256(ckpt)
    trace = deploy(method, problem, T, n_init, seed, policy=policy, checkpoint_sha256=sha)
    if problem_name == "branin":
        trace.config["branin_variant"] = variant
    path = Path(out) / problem_name / method / f"seed_{seed}.json"
    trace.save(path, problem)
    return str(path)


def cmd_deploy(args, argv) -> int:
    if args.method == "policy" and not args.ckpt:
        raise _ArgError("--method policy requires --ckpt")
    problem = get_problem(args.problem, args.data_dir, args.branin_variant)
    T = args.T if args.T is not None else (10 if problem.dim == 1 else 20)
    ckpt = str(Path(args.ckpt).resolve()) if args.ckpt else None
    if ckpt:
        policy = load_checkpoint(ckpt)
        if policy.dim != problem.dim:
            raise _ArgError(f"checkpoint is {policy.dim}-D but problem {args.problem!r} is {problem.dim}-D")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(args.method, args.problem, args.data_dir, args.branin_variant, ckpt, T, args.n_init, s, out)
            for s in args.seeds]
    paths = _map(_deploy_one, jobs, args.jobs)
    sub = out / args.problem / args.method
    write_manifest(
        sub, "deploy", argv,
        method=args.method, problem=args.problem, branin_variant=args.branin_variant,
        T=T, n_init=args.n_init, seeds=args.seeds, checkpoint=ckpt,
        checkpoint_sha256=file_sha256(ckpt) if ckpt else None,
        data_dir=args.data_dir, outputs=[str(Path(p).relative_to(sub)) for p in paths],
    )
    print(f"wrote {len(paths)} trace(s) under {sub}")
    return EXIT_OK


# -- report -------------------------------------------------------------------


def load_traces(root) -> list[ALTrace]:
    paths = sorted(p for p in Path(root).rglob("*.json") if p.name != MANIFEST)
    if not paths:
        raise ReportError(f"no trace files under {root}")
    return [ALTrace.load(p) for p in paths]


def cmd_report(args, argv) -> int:
    traces = load_traces(args.traces)
    problems = {}
    for tr in traces:
        if tr.problem not in problems:
            variant = tr.config.get("branin_variant", "standard")
            problems[tr.problem] = get_problem(tr.problem, args.data_dir, variant)
    out = Path(args.out)
    rows = build_report(traces, problems, out, plots=not args.no_plots)
    write_manifest(
        out, "report", argv, traces=str(args.traces), data_dir=args.data_dir,
        n_traces=len(traces), outputs=["report.csv"] + ([] if args.no_plots else sorted(f"{p}.png" for p in problems)),
    )
    for r in rows:
        star = "*" if r.star else " "
        print(f"{r.problem:>11} {r.method:>8} rmse {r.rmse_mean:.4f} +- {r.rmse_se:.4f}{star} "
              f"time {r.time_mean_ms:9.1f} ms  p={r.p_vs_random:.4g}")
    return EXIT_OK


def cmd_selftest(args, argv) -> int:
    from .selftest import run_selftest

    return EXIT_OK if run_selftest() else EXIT_NUMERICAL


class _ArgError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="amortized-al", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train policies on simulated GP functions")
    t.add_argument("--config", required=True, type=Path)
    t.add_argument("--seeds", type=parse_seeds, default=[0], help="e.g. 0,1,2 or 0..4")
    t.add_argument("--seed", dest="seeds", type=lambda s: [int(s)], help="single seed")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, help="override the configured step count")
    t.add_argument("--jobs", type=int, default=1)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("deploy", help="run active learning on a benchmark problem")
    d.add_argument("--method", required=True, choices=METHODS)
    d.add_argument("--problem", required=True, choices=PROBLEM_NAMES)
    d.add_argument("--ckpt")
    d.add_argument("--seeds", type=parse_seeds, default=parse_seeds("0..4"))
    d.add_argument("--T", type=int, help="queries per run (default 10 in 1-D, 20 in 2-D)")
    d.add_argument("--n-init", type=int, default=1)
    d.add_argument("--out", required=True)
    d.add_argument("--data-dir", default=os.environ.get(DATA_ENV))
    d.add_argument("--branin-variant", choices=("standard", "printed"), default="standard")
    d.add_argument("--jobs", type=int, default=1)
    d.set_defaults(func=cmd_deploy)

    r = sub.add_parser("report", help="fit GPs on traces, compute RMSE and significance")
    r.add_argument("--traces", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--data-dir", default=os.environ.get(DATA_ENV))
    r.add_argument("--no-plots", action="store_true")
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("selftest", help="run the built-in numerical oracle checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except (ConfigError, _ArgError, ReportError, DataFormatError, CheckpointError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FactorizationError, NonFiniteLossError, FitError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
