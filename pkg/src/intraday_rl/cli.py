"""Command-line entry point: ``intraday-rl {synth,train,evaluate,ablate,report}``.

Every command writes a ``manifest.json`` into its output directory recording
the effective configuration, content hashes of the inputs, and the paths and
hashes of everything it produced. Artifact paths are relative to the output
directory so that manifests compare equal across checkouts.

Environment overrides: ``INTRADAY_RL_OUT`` (default output directory) and
``INTRADAY_RL_THREADS`` (rollout threads).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, evaluation, reporting
from .features import FEATURE_NAMES
from .market_data import (PATTERNS, VOL_SHAPES, SyntheticConfig, TradingDay, clean_and_segment,
                          generate_synthetic, load_csv, rolling_splits, write_csv)
from .ppo import Checkpoint, PpoConfig, evaluate_policy, read_config_file, train_roll

logger = logging.getLogger("intraday_rl")

ENV_OUT = "INTRADAY_RL_OUT"
ENV_THREADS = "INTRADAY_RL_THREADS"
SPLIT_DEFAULTS = {"train_months": 11, "val_months": 1, "test_months": 4,
                  "min_daily_volume": 1000.0}
WARMUP_DAYS = 5


class UsageError(Exception):
    pass


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict[str, str]
    seed: int | None
    artifacts: dict[str, str] = field(default_factory=dict)
    tool_version: str = __version__

    def identifier(self) -> str:
        body = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(body).hexdigest()[:16]

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def record(self, out: Path, paths: Sequence[Path]) -> None:
        for p in paths:
            self.artifacts[str(Path(p).relative_to(out))] = sha256_file(p)

    def write(self, out: Path) -> Path:
        path = out / "manifest.json"
        if path.exists():
            raise UsageError(f"{path} already exists; manifests are never overwritten")
        path.write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


# -- shared helpers -----------------------------------------------------------

def _out_dir(args) -> Path:
    out = args.out or os.environ.get(ENV_OUT)
    if not out:
        raise UsageError(f"no output directory: pass --out or set {ENV_OUT}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if (out / "manifest.json").exists():
        raise UsageError(f"{out} already holds a run manifest; choose a fresh directory")
    return out


def _asset_name(path: str) -> str:
    return Path(path).stem


def _load_days(paths: Sequence[str], min_daily_volume: float) -> dict[str, list[TradingDay]]:
    assets = {}
    for p in paths:
        name = _asset_name(p)
        if name in assets:
            raise UsageError(f"duplicate asset name {name!r}")
        assets[name] = clean_and_segment(load_csv(p), min_daily_volume)
    return assets


def _fingerprints(paths: Sequence[str | Path]) -> dict[str, str]:
    return {Path(p).name: sha256_file(p) for p in paths}


def _effective_config(args) -> tuple[PpoConfig, dict]:
    """Flag > config file > default, for PPO and split settings."""
    from_file = read_config_file(args.config) if getattr(args, "config", None) else {}
    split = dict(SPLIT_DEFAULTS)
    ppo_values = {}
    for key, raw in from_file.items():
        name = key.replace("-", "_")
        if name in split:
            split[name] = type(SPLIT_DEFAULTS[name])(raw)
        else:
            ppo_values[name] = raw
    env_threads = os.environ.get(ENV_THREADS)
    if env_threads and "threads" not in ppo_values:
        ppo_values["threads"] = env_threads
    for f in dataclasses.fields(PpoConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            ppo_values[f.name] = flag
    for name in split:
        flag = getattr(args, name, None)
        if flag is not None:
            split[name] = flag
    try:
        return PpoConfig.from_mapping(ppo_values), split
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value configuration file")
    g = p.add_argument_group("PPO settings (override the config file)")
    for f in dataclasses.fields(PpoConfig):
        flag = "--" + f.name.replace("_", "-")
        default = f.default
        if isinstance(default, bool):
            g.add_argument(flag, dest=f.name, type=_parse_bool, default=None, metavar="BOOL")
        elif isinstance(default, tuple):
            g.add_argument(flag, dest=f.name, type=_parse_ints, default=None, metavar="H1,H2")
        else:
            g.add_argument(flag, dest=f.name, type=type(default), default=None)
    s = p.add_argument_group("walk-forward split")
    for name, default in SPLIT_DEFAULTS.items():
        s.add_argument("--" + name.replace("_", "-"), dest=name, type=type(default), default=None)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _parse_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _splits(days: list[TradingDay], split_cfg: dict):
    return rolling_splits(days, train_months=split_cfg["train_months"] + split_cfg["val_months"],
                          test_months=split_cfg["test_months"], val_months=split_cfg["val_months"])


# -- synth --------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = _out_dir(args)
    try:
        cfg = SyntheticConfig(n_days=args.days, seed=args.seed, base_price=args.base_price,
                              daily_vol=args.daily_vol, intraday_vol_shape=args.vol_shape,
                              planted_pattern=args.pattern, pattern_strength=args.strength,
                              start_date=date.fromisoformat(args.start_date))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    names = args.assets or ["asset"]
    paths = []
    for k, name in enumerate(names):
        asset_cfg = dataclasses.replace(cfg, seed=cfg.seed + k)
        paths.append(write_csv(generate_synthetic(asset_cfg), out / f"{name}.csv"))
    config = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg) if f.name != "session"}
    config["start_date"] = cfg.start_date.isoformat()
    config["assets"] = names
    manifest = RunManifest("synth", config, {}, cfg.seed)
    manifest.record(out, paths)
    manifest.write(out)
    print(f"wrote {len(paths)} file(s) to {out}")
    return 0


# -- train --------------------------------------------------------------------

def cmd_train(args) -> int:
    out = _out_dir(args)
    config, split_cfg = _effective_config(args)
    assets = _load_days(args.data, split_cfg["min_daily_volume"])
    produced = []
    for name, days in assets.items():
        rolls = _splits(days, split_cfg)
        if not rolls:
            raise UsageError(f"{name}: not enough history for a single roll")
        if args.max_rolls is not None:
            rolls = rolls[:args.max_rolls]
        for k, split in enumerate(rolls):
            logger.info("%s roll %d: %d train, %d val, %d test days", name, k,
                        len(split.train_days), len(split.val_days), len(split.test_days))
            report, ckpt = train_roll(split, config)
            ckpt.meta["asset"] = name
            ckpt.meta["roll"] = k
            ckpt.meta["test_start"] = split.test_days[0].date.isoformat()
            ckpt.meta["test_end"] = split.test_days[-1].date.isoformat()
            base = out / name / f"roll_{k:02d}"
            produced.append(ckpt.save(base.with_suffix(".ckpt")))
            produced.append(report.write_log(base.with_name(base.name + "_train_log.csv")))
            print(f"{name} roll {k}: best epoch {report.best_epoch}, "
                  f"stopped at {report.stopping_epoch}")
    full = {"ppo": config.as_dict(), "split": split_cfg, "max_rolls": args.max_rolls}
    manifest = RunManifest("train", full, _fingerprints(args.data), config.seed)
    manifest.record(out, produced)
    manifest.write(out)
    return 0


# -- evaluate / ablate --------------------------------------------------------

@dataclass
class AssetRun:
    name: str
    checkpoints: list[Checkpoint]
    test_blocks: list[list[TradingDay]]
    warmups: list[list[TradingDay]]
    history: list[TradingDay]
    days: list[TradingDay]


def _load_runs(run_dir: Path, assets: dict[str, list[TradingDay]]) -> list[AssetRun]:
    runs = []
    for name in sorted(assets):
        files = sorted((run_dir / name).glob("roll_*.ckpt"))
        if not files:
            raise UsageError(f"no checkpoints for asset {name!r} under {run_dir}")
        days = assets[name]
        index = {d.date: i for i, d in enumerate(days)}
        cks, blocks, warms = [], [], []
        for f in files:
            try:
                ck = Checkpoint.load(f)
            except ValueError as exc:
                raise UsageError(str(exc)) from exc
            lo = date.fromisoformat(ck.meta["test_start"])
            hi = date.fromisoformat(ck.meta["test_end"])
            block = [d for d in days if lo <= d.date <= hi]
            if not block:
                raise UsageError(f"{f}: test window {lo}..{hi} not present in the data")
            i0 = index[block[0].date]
            cks.append(ck)
            blocks.append(block)
            warms.append(days[max(0, i0 - WARMUP_DAYS):i0])
        i0 = index[blocks[0][0].date]
        runs.append(AssetRun(name, cks, blocks, warms,
                             days[max(0, i0 - evaluation.MOMENTUM_HISTORY):i0], days))
    return runs


def _parse_groups(specs: Sequence[str], names: Sequence[str]) -> dict[str, list[str]]:
    groups = {}
    for spec in specs or ():
        if "=" not in spec:
            raise UsageError(f"group {spec!r} must look like NAME=asset1,asset2")
        label, members = spec.split("=", 1)
        members = [m for m in members.split(",") if m]
        unknown = [m for m in members if m not in names]
        if unknown:
            raise UsageError(f"group {label}: unknown assets {unknown}")
        groups[label] = members
    if not groups and len(names) > 1:
        groups["all"] = list(names)
    return groups


def evaluate_runs(runs: list[AssetRun], commission_bp: float | None):
    """Per-asset strategy series, benchmark series and trades."""
    results = {}
    for run in runs:
        episodes = []
        for ck, block, warm in zip(run.checkpoints, run.test_blocks, run.warmups):
            episodes += evaluate_policy(ck, block, commission_bp, warm).episodes
        cbp = run.checkpoints[0].commission_bp if commission_bp is None else commission_bp
        test_days = [d for block in run.test_blocks for d in block]
        series = {"drl": evaluation.strategy_returns(episodes, cbp)}
        for kind in evaluation.BENCHMARKS:
            if kind == "momentum" and len(run.history) < evaluation.MOMENTUM_HISTORY:
                logger.warning("%s: too little history for the momentum benchmark", run.name)
                continue
            series[kind] = evaluation.benchmarks(test_days, kind, cbp, run.history)
        trades = [t for ep in episodes for t in ep.trades]
        results[run.name] = (series, trades)
    return results


def _write_series(out: Path, label: str, name: str, s: evaluation.ReturnSeries) -> Path:
    stamps = np.datetime_as_string(s.timestamps.astype("datetime64[s]"), unit="s")
    rows = [[stamps[i] + "Z", str(s.dates[i]), s.returns[i]] for i in range(len(s))]
    return reporting.write_table(out / "series" / f"{label}__{name}.csv",
                                 ["timestamp", "date", "return"], rows)


def _write_trades(out: Path, label: str, trades) -> Path:
    rows = [[t.side, t.entry_step, t.entry_price, t.exit_step, t.exit_price, t.net_return]
            for t in trades]
    return reporting.write_table(out / "series" / f"{label}__trades.csv",
                                 ["side", "entry_step", "entry_price", "exit_step", "exit_price",
                                  "net_return"], rows)


def build_report(out: Path, results: dict, groups: dict[str, list[str]], manifest_id: str,
                 ablation=None) -> list[Path]:
    """Emit the full report bundle from per-asset series and trades."""
    paths = []
    metric_rows = {}
    trade_rows = {}
    for name, (series, trades) in results.items():
        for kind, s in series.items():
            metric_rows[f"{name}:{kind}"] = evaluation.metrics(s.daily_returns())
        paths += reporting.write_pnl(out, name, series)
        trade_rows[name] = evaluation.trade_stats(trades)
        paths += reporting.write_intraday(out, name, evaluation.intraday_profiles(trades))
    for label, members in groups.items():
        kinds = set.intersection(*(set(results[m][0]) for m in members))
        port = {}
        for kind in [k for k in ("drl",) + evaluation.BENCHMARKS if k in kinds]:
            try:
                port[kind] = evaluation.portfolio([results[m][0][kind] for m in members])
            except ValueError as exc:
                raise UsageError(f"portfolio {label}: {exc}") from exc
            metric_rows[f"portfolio_{label}:{kind}"] = evaluation.metrics(port[kind].daily_returns())
        paths += reporting.write_pnl(out, f"portfolio_{label}", port)
        all_trades = [t for m in members for t in results[m][1]]
        trade_rows[f"portfolio_{label}"] = evaluation.trade_stats(all_trades)
        paths += reporting.write_intraday(out, f"portfolio_{label}",
                                          evaluation.intraday_profiles(all_trades))
    paths += reporting.write_metrics(out, metric_rows, manifest_id)
    paths.append(reporting.write_trade_stats(out, trade_rows))
    if ablation is not None:
        ab_results, assets = ablation
        paths += reporting.write_ablation(out, ab_results, assets)
    return paths


def _ablation(runs: list[AssetRun], commission_bp: float | None):
    jobs = []
    for run in runs:
        for ck, block, warm in zip(run.checkpoints, run.test_blocks, run.warmups):
            jobs.append((ck, block, warm))
    if any(len(run.checkpoints) > 1 for run in runs):
        # importance is averaged over assets; with several rolls each roll counts as one run
        logger.info("ablation averages over %d asset-roll runs", len(jobs))
    labels = [f"{run.name}_roll{k:02d}" if len(run.checkpoints) > 1 else run.name
              for run in runs for k in range(len(run.checkpoints))]
    return evaluation.feature_importance(jobs, FEATURE_NAMES, commission_bp), labels


def _evaluate_common(args, with_report: bool, ablate: bool) -> int:
    out = _out_dir(args)
    run_dir = Path(args.run)
    if not run_dir.is_dir():
        raise UsageError(f"run directory {run_dir} does not exist")
    assets = _load_days(args.data, args.min_daily_volume)
    runs = _load_runs(run_dir, assets)
    ckpt_files = sorted(run_dir.glob("*/roll_*.ckpt"))
    inputs = _fingerprints(args.data)
    inputs.update({str(p.relative_to(run_dir)): sha256_file(p) for p in ckpt_files})
    config = {"commission_bp": args.commission_bp, "groups": args.group or [],
              "ablate_features": ablate, "min_daily_volume": args.min_daily_volume}
    manifest = RunManifest("evaluate" if with_report else "ablate", config, inputs, None)
    manifest_id = hashlib.sha256(
        json.dumps({"config": config, "inputs": inputs}, sort_keys=True).encode()).hexdigest()[:16]

    paths = []
    if with_report:
        groups = _parse_groups(args.group, [r.name for r in runs])
        results = evaluate_runs(runs, args.commission_bp)
        for name, (series, trades) in results.items():
            for kind, s in series.items():
                paths.append(_write_series(out, name, kind, s))
            paths.append(_write_trades(out, name, trades))
        ablation = _ablation(runs, args.commission_bp) if ablate else None
        paths += build_report(out, results, groups, manifest_id, ablation)
    else:
        ab_results, labels = _ablation(runs, args.commission_bp)
        paths += reporting.write_ablation(out, ab_results, labels)
    manifest.record(out, paths)
    manifest.write(out)
    print(f"wrote {len(paths)} artifact(s) to {out}")
    return 0


def cmd_evaluate(args) -> int:
    return _evaluate_common(args, True, args.ablate_features)


def cmd_ablate(args) -> int:
    return _evaluate_common(args, False, True)


# -- report -------------------------------------------------------------------

def _read_series(path: Path) -> evaluation.ReturnSeries:
    import pandas as pd

    df = pd.read_csv(path, dtype={"date": str}, float_precision="round_trip")
    stamps = np.array([np.datetime64(s.rstrip("Z"), "ns") for s in df["timestamp"]])
    dates = np.array([date.fromisoformat(d) for d in df["date"]], dtype=object)
    return evaluation.ReturnSeries(stamps, df["return"].to_numpy(dtype=float), dates)


def _read_trades(path: Path):
    import pandas as pd

    from .environment import TradeRecord

    df = pd.read_csv(path, float_precision="round_trip")
    return [TradeRecord(int(r.side), int(r.entry_step), float(r.entry_price), int(r.exit_step),
                        float(r.exit_price), float(r.net_return)) for r in df.itertuples()]


def cmd_report(args) -> int:
    """Rebuild the report bundle from the series saved by ``evaluate``."""
    out = _out_dir(args)
    src = Path(args.results) / "series"
    if not src.is_dir():
        raise UsageError(f"{src} not found; run `evaluate` first")
    results: dict = {}
    files = sorted(src.glob("*.csv"))
    for f in files:
        asset, kind = f.stem.split("__", 1)
        entry = results.setdefault(asset, ({}, []))
        if kind == "trades":
            entry[1].extend(_read_trades(f))
        else:
            entry[0][kind] = _read_series(f)
    for series, _ in results.values():
        if "drl" in series:
            series.update({"drl": series.pop("drl"),
                           **{k: series.pop(k) for k in evaluation.BENCHMARKS if k in series}})
    groups = _parse_groups(args.group, sorted(results))
    inputs = {f"series/{f.name}": sha256_file(f) for f in files}
    config = {"groups": args.group or []}
    manifest = RunManifest("report", config, inputs, None)
    manifest_id = hashlib.sha256(
        json.dumps({"config": config, "inputs": inputs}, sort_keys=True).encode()).hexdigest()[:16]
    paths = build_report(out, results, groups, manifest_id)
    manifest.record(out, paths)
    manifest.write(out)
    print(f"wrote {len(paths)} artifact(s) to {out}")
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="intraday-rl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic minute-bar CSV files")
    p.add_argument("--days", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pattern", choices=PATTERNS, default="none")
    p.add_argument("--strength", type=float, default=0.0, help="planted pattern strength per bar")
    p.add_argument("--base-price", type=float, default=100.0)
    p.add_argument("--daily-vol", type=float, default=0.01)
    p.add_argument("--vol-shape", choices=VOL_SHAPES, default="flat")
    p.add_argument("--start-date", default="2012-01-02")
    p.add_argument("--assets", nargs="+", help="asset names; one file each (seed + index)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="walk-forward PPO training")
    p.add_argument("--data", nargs="+", required=True, help="asset CSV files")
    p.add_argument("--max-rolls", type=int, default=None, help="train only the first K rolls")
    p.add_argument("--out")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, text in (("evaluate", cmd_evaluate, "evaluate checkpoints and write reports"),
                             ("ablate", cmd_ablate, "feature-importance ablation only")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--run", required=True, help="output directory of `train`")
        p.add_argument("--data", nargs="+", required=True)
        p.add_argument("--commission-bp", type=float, default=None,
                       help="override the commission stored in the checkpoints")
        p.add_argument("--min-daily-volume", type=float, default=SPLIT_DEFAULTS["min_daily_volume"])
        p.add_argument("--out")
        if name == "evaluate":
            p.add_argument("--group", action="append", metavar="NAME=A,B",
                           help="equal-weight portfolio of assets (repeatable)")
            p.add_argument("--ablate-features", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="rebuild reports from saved evaluation series")
    p.add_argument("--results", required=True, help="output directory of `evaluate`")
    p.add_argument("--group", action="append", metavar="NAME=A,B")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
