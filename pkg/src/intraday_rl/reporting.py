"""Report bundle writers: CSV/JSON tables and deterministic SVG plots."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import AblationResult, IntradayProfile, MetricsReport, ReturnSeries, TradeStats

NA_TEXT = "NA"


def _cell(x) -> str:
    if isinstance(x, (float, np.floating)):
        return NA_TEXT if math.isnan(x) else repr(float(x))
    return str(x)


def _json_value(x):
    if isinstance(x, (float, np.floating)):
        return None if math.isnan(x) else float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


def write_table(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(x) for x in row])
    return path


def write_json(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "intraday-rl"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def _save_svg(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    _pyplot().close(fig)
    return path


def write_metrics(out: Path, reports: dict[str, MetricsReport], manifest_id: str) -> list[Path]:
    names = list(reports)
    fields = list(next(iter(reports.values())).as_dict()) if reports else []
    rows = [[n] + [reports[n].as_dict()[f] for f in fields] for n in names]
    payload = {"manifest": manifest_id,
               "strategies": {n: {k: _json_value(v) for k, v in reports[n].as_dict().items()}
                              for n in names}}
    return [write_table(out / "metrics.csv", ["strategy"] + fields, rows),
            write_json(out / "metrics.json", payload)]


def write_pnl(out: Path, label: str, curves: dict[str, ReturnSeries]) -> list[Path]:
    """Daily cumulative-return table and line plot for one asset or portfolio."""
    dates = None
    columns = {}
    for name, series in curves.items():
        d, r = series.daily()
        if dates is None:
            dates = d
        elif len(d) != len(dates) or any(a != b for a, b in zip(d, dates)):
            raise ValueError(f"{label}: strategy {name} covers different days")
        columns[name] = np.cumprod(1.0 + r) - 1.0
    rows = [[str(dates[i])] + [columns[n][i] for n in columns] for i in range(len(dates))]
    csv_path = write_table(out / f"pnl_{label}.csv", ["date"] + list(columns), rows)

    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(8, 4))
    x = np.arange(len(dates))
    for name, values in columns.items():
        ax.plot(x, values, label=name, linewidth=1.0)
    step = max(1, len(dates) // 6)
    ax.set_xticks(x[::step])
    ax.set_xticklabels([str(d) for d in dates[::step]], rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("cumulative return")
    ax.set_title(label)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return [csv_path, _save_svg(fig, out / f"pnl_{label}.svg")]


def write_trade_stats(out: Path, stats: dict[str, TradeStats]) -> Path:
    fields = list(TradeStats.__dataclass_fields__)
    rows = [[n] + [s.as_dict()[f] for f in fields] for n, s in stats.items()]
    return write_table(out / "trade_stats.csv", ["asset"] + fields, rows)


def write_intraday(out: Path, label: str, profile: IntradayProfile) -> list[Path]:
    rows = list(zip(profile.labels, profile.pct_trades, profile.mean_duration))
    csv_path = write_table(out / f"intraday_{label}.csv", ["bucket", "pct_trades", "mean_duration"],
                           rows)
    plt = _pyplot()
    fig, (a1, a2) = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
    x = np.arange(len(profile.labels))
    a1.bar(x, profile.pct_trades)
    a1.set_ylabel("% of trades")
    a2.bar(x, np.nan_to_num(profile.mean_duration))
    a2.set_ylabel("mean duration (min)")
    a2.set_xticks(x)
    a2.set_xticklabels(profile.labels, rotation=90, fontsize=7)
    a1.set_title(label)
    fig.tight_layout()
    return [csv_path, _save_svg(fig, out / f"intraday_{label}.svg")]


def write_ablation(out: Path, results: Sequence[AblationResult], assets: Sequence[str]) -> list[Path]:
    header = ["feature", "importance"] + [f"sharpe_zeroed_{a}" for a in assets]
    rows = [[r.feature, r.importance] + list(r.per_asset_sharpe) for r in results]
    csv_path = write_table(out / "ablation.csv", header, rows)
    ranked = sorted(results, key=lambda r: -np.nan_to_num(r.importance, nan=-np.inf))
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    y = np.arange(len(ranked))
    ax.barh(y, [np.nan_to_num(r.importance) for r in ranked])
    ax.set_yticks(y)
    ax.set_yticklabels([r.feature for r in ranked], fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("Sharpe decrease when zeroed")
    fig.tight_layout()
    return [csv_path, _save_svg(fig, out / "ablation.svg")]
