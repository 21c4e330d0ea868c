"""``critgen`` command line: ingest, train, evaluate, report.

Exit status is 0 on success, 2 on usage errors and 3 on data errors.
Diagnostics go to standard error; results go to files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from contextlib import ExitStack
from dataclasses import asdict
from pathlib import Path

from . import highd
from .experiments import ARMS, Evaluation, RunSettings, evaluate, run_arm
from .llm import LlmEndpoint, MockLlmServer
from .ppo import PolicyParams
from .report import build_report
from .risk import RiskParams, RssParams
from .scenario import DatabaseError, ValidationError, load_database

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"critgen: {msg}", file=sys.stderr)


# ---------------------------------------------------------------- manifests

DEFAULT_MANIFEST = {
    "seed": 0,
    "arm": "baseline",
    "train_count": 50,
    "test_count": 10,
    "synthetic": None,
    "settings": RunSettings().to_dict(),
    "risk": asdict(RiskParams()),
}


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = dict(base)
    for key, value in update.items():
        if key not in base:
            raise UsageError(f"unknown manifest key {where + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_manifest(path) -> dict:
    """Defaults overlaid with the file at ``path`` (if any). Unknown keys are usage errors."""
    manifest = json.loads(json.dumps(DEFAULT_MANIFEST))
    if path is None:
        return manifest
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold an object")
    return _merge(manifest, data)


def risk_from(data: dict) -> RiskParams:
    data = dict(data)
    rss = RssParams(**data.pop("rss", {}))
    return RiskParams(rss=rss, **data)


def _apply_flags(manifest: dict, args) -> dict:
    m = json.loads(json.dumps(manifest))
    for flag, key in (("seed", "seed"), ("arm", "arm"), ("train_count", "train_count"),
                      ("test_count", "test_count"), ("synthetic", "synthetic")):
        value = getattr(args, flag, None)
        if value is not None:
            m[key] = value
    for flag in ("epochs", "episodes_per_config", "total_steps", "eval_runs", "max_steps"):
        value = getattr(args, flag, None)
        if value is not None:
            m["settings"][flag] = value
    for flag in ("ttc_threshold", "r_threshold"):
        value = getattr(args, flag, None)
        if value is not None:
            m["risk"][flag] = value
    return m


# ---------------------------------------------------------------- commands

def _synthetic_database(count: int, seed: int, out_path: Path) -> highd.IngestReport:
    with tempfile.TemporaryDirectory() as tmp:
        paths = highd.synthetic_recordings(tmp, count, seed)
        return highd.build_database(paths, out_path, rng_seed=seed)


def cmd_ingest(args) -> int:
    if not args.recordings and not args.synthetic:
        raise UsageError("ingest needs recording files or --synthetic N")
    out = Path(args.out)
    db_path = out if out.suffix == ".json" else out / "database.json"
    db_path.parent.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    tmp_path = db_path.with_name(db_path.name + ".partial")
    with tempfile.TemporaryDirectory() as tmp:
        paths = [Path(p) for p in args.recordings]
        if args.synthetic:
            paths += highd.synthetic_recordings(tmp, args.synthetic, seed)
        report = highd.build_database(paths, tmp_path, rng_seed=seed)
    for status in report.statuses:
        _err(f"{'ok  ' if status.ok else 'FAIL'} {status.path}: {status.message}")
    if report.failures and not args.skip_bad:
        tmp_path.unlink(missing_ok=True)
        raise DataError(f"{len(report.failures)} file(s) failed to parse; rerun with --skip-bad to keep the rest")
    os.replace(tmp_path, db_path)
    _err(f"wrote {report.count} configurations to {db_path}")
    return EXIT_OK


def _load(path, what: str):
    try:
        return load_database(path)
    except FileNotFoundError:
        raise DataError(f"{what} not found: {path}") from None
    except (DatabaseError, ValidationError) as exc:
        raise DataError(f"{what} {path}: {exc}") from None


def cmd_train(args) -> int:
    manifest = _apply_flags(load_manifest(args.config), args)
    if manifest["arm"] not in ARMS:
        raise UsageError(f"arm must be one of {ARMS}")
    try:
        settings = RunSettings.from_dict(manifest["settings"])
        risk = risk_from(manifest["risk"])
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"bad run settings: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = int(manifest["seed"])

    if args.db:
        configs = _load(args.db, "database")
    elif manifest["synthetic"]:
        db_path = out / "database.json"
        _synthetic_database(int(manifest["synthetic"]), seed, db_path)
        configs = _load(db_path, "database")
    else:
        raise UsageError("train needs --db or --synthetic N")
    n_train, n_test = int(manifest["train_count"]), int(manifest["test_count"])
    if len(configs) < n_train:
        raise DataError(f"database has {len(configs)} configurations, {n_train} needed for training")
    train, test = configs[:n_train], configs[n_train:n_train + n_test]

    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    with ExitStack() as stack:
        llm = None
        if manifest["arm"] == "llm":
            if args.mock_llm:
                llm = stack.enter_context(MockLlmServer()).endpoint()
            else:
                try:
                    llm = LlmEndpoint.from_env()
                except KeyError as exc:
                    raise UsageError(f"the llm arm needs --mock-llm or {exc.args[0]}") from None
        result = run_arm(manifest["arm"], train, test, settings, seed, llm, risk)
    paths = result.write(out)
    for name, path in sorted(paths.items()):
        _err(f"{name}: {path}")
    return EXIT_OK


def evaluation_table(ev: Evaluation) -> str:
    lines = ["config_id\tepisodes\tmean_reward\tmean_length\tcrashes"]
    for row in ev.per_config():
        lines.append(f"{row['config_id']}\t{row['episodes']}\t{row['mean_reward']!r}\t"
                     f"{row['mean_length']!r}\t{row['crashes']}")
    lines.append(f"all\t{len(ev.rows)}\t{ev.mean_reward!r}\t{ev.mean_length!r}\t{ev.crashes}")
    return "\n".join(lines) + "\n"


def cmd_evaluate(args) -> int:
    manifest = _apply_flags(load_manifest(args.config), args)
    try:
        params = PolicyParams.load(args.policy)
    except FileNotFoundError:
        raise DataError(f"policy not found: {args.policy}") from None
    except (KeyError, ValueError, OSError) as exc:
        raise DataError(f"policy {args.policy} is unreadable ({exc})") from None
    configs = _load(args.db, "test database")
    runs = args.runs if args.runs is not None else manifest["settings"]["eval_runs"]
    ev = evaluate(params, configs, runs, int(manifest["seed"]), int(manifest["settings"]["max_steps"]),
                  risk_from(manifest["risk"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "evaluation.jsonl", "w") as fp:
        for row in ev.rows:
            fp.write(json.dumps(row, sort_keys=True) + "\n")
    (out / "evaluation.tsv").write_text(evaluation_table(ev))
    s = ev.summary()
    _err(f"{s['episodes']} episodes: mean reward {s['mean_reward']:.3f}, "
         f"mean length {s['mean_length']:.2f}, crashes {s['crashes']}")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        written = build_report(args.logs, args.out)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    for path in written:
        _err(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--config", help="run manifest (JSON); flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=out_default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="critgen", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build a scenario database from trajectory recordings")
    p.add_argument("recordings", nargs="*", help="NN_tracks.csv files (companion meta files alongside)")
    _common(p, "database.json")
    p.add_argument("--synthetic", type=int, metavar="N", help="add N generated recordings")
    p.add_argument("--skip-bad", action="store_true", help="write the database even if some files fail")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train one arm and write its logs and policy")
    p.add_argument("--db", help="scenario database; train and test configs are taken in order")
    _common(p, "runs")
    p.add_argument("--arm", choices=ARMS)
    p.add_argument("--synthetic", type=int, metavar="N", help="generate an N-configuration database instead of --db")
    p.add_argument("--mock-llm", action="store_true", help="serve the llm arm from a local mock")
    p.add_argument("--train-count", type=int)
    p.add_argument("--test-count", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--episodes-per-config", type=int)
    p.add_argument("--total-steps", type=int)
    p.add_argument("--eval-runs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--ttc-threshold", type=float)
    p.add_argument("--r-threshold", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="greedy evaluation of a saved policy")
    p.add_argument("--policy", required=True)
    p.add_argument("--db", required=True, help="test configurations")
    p.add_argument("--runs", type=int, help="runs per configuration")
    _common(p, "evaluation")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--ttc-threshold", type=float)
    p.add_argument("--r-threshold", type=float)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="loss and histogram tables plus an SVG from run logs")
    p.add_argument("--logs", required=True)
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        _err(str(exc))
        return EXIT_USAGE
    except (DataError, highd.ParseError) as exc:
        _err(str(exc))
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
