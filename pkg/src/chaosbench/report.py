"""Summary tables rebuilt from the persisted per-trajectory CSVs only."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .evaluation import MODEL_ORDER, bin_and_wins, percentile, read_per_trajectory, summarize, write_json
from .models.registry import DISPLAY

STATISTIC_NAMES = {"dp": "E(0)", "ks": "sigma^2", "kf": "<E>"}
RESERVED = {"data", "ae", "ablation", "diagnostics", "report"}


class ReportError(ValueError):
    pass


def discover(root: Path) -> dict:
    """model -> {seed: csv path} for every evaluated model under ``root``."""
    found: dict = {}
    for csv_path in sorted(Path(root).glob("*/seed*/per_trajectory.csv")):
        model = csv_path.parent.parent.name
        if model in RESERVED:
            continue
        seed = int(csv_path.parent.name[4:])
        found.setdefault(model, {})[seed] = csv_path
    return found


def build_summary(tables: dict, benchmark: str = "") -> dict:
    """``tables`` maps model -> seed -> per-trajectory columns."""
    if not tables:
        raise ReportError("no models to report")
    models = [m for m in MODEL_ORDER if m in tables] + sorted(m for m in tables if m not in MODEL_ORDER)
    out: dict = {"benchmark": benchmark, "percentile": "linear interpolation", "models": {}, "wins": {}}
    for m in models:
        full = np.concatenate([tables[m][s]["full_mse"] for s in sorted(tables[m])])
        early = np.concatenate([tables[m][s]["early_mse"] for s in sorted(tables[m])])
        out["models"][m] = {
            "full": summarize(full), "early": summarize(early),
            "per_seed_median_full": {str(s): percentile(tables[m][s]["full_mse"], 50) for s in sorted(tables[m])},
        }
    seeds = sorted(set.intersection(*(set(tables[m]) for m in models)))
    counts = {m: np.zeros(3, dtype=int) for m in models}
    totals = np.zeros(3, dtype=int)
    for s in seeds:
        ref = tables[models[0]][s]
        if ref["regime_stat"].size < 3:
            continue
        mse = {m: tables[m][s]["full_mse"] for m in models}
        binning = bin_and_wins(mse, ref["regime_stat"], STATISTIC_NAMES.get(benchmark, ""), order=models)
        for m in models:
            counts[m] += np.array(binning.win_counts[m])
        totals += np.bincount(binning.bins, minlength=3)
    out["wins"] = {
        "statistic": STATISTIC_NAMES.get(benchmark, ""),
        "bin_sizes": totals.tolist(),
        "fractions": {m: (counts[m] / np.maximum(totals, 1)).tolist() for m in models},
        "counts": {m: counts[m].tolist() for m in models},
    }
    return out


def format_tables(summary: dict) -> str:
    def fmt(x):
        return "inf" if x is None or not np.isfinite(x) else f"{x:.4e}"

    lines = [f"benchmark: {summary.get('benchmark', '')}", ""]
    head = f"{'model':<12}" + "".join(f"{h:>13}" for h in ("full mean", "full median", "full P90",
                                                            "early mean", "early median", "early P90", "diverged"))
    lines += [head, "-" * len(head)]
    for m, row in summary["models"].items():
        f, e = row["full"], row["early"]
        vals = [f["mean"], f["median"], f["p90"], e["mean"], e["median"], e["p90"]]
        lines.append(f"{DISPLAY.get(m, m):<12}" + "".join(f"{fmt(v):>13}" for v in vals) + f"{f['n_diverged']:>13d}")
    w = summary["wins"]
    lines += ["", f"win fractions by tercile of {w['statistic']} (bin sizes {w['bin_sizes']})"]
    head = f"{'model':<12}" + "".join(f"{h:>10}" for h in ("low", "medium", "high"))
    lines += [head, "-" * len(head)]
    for m, fr in w["fractions"].items():
        lines.append(f"{DISPLAY.get(m, m):<12}" + "".join(f"{x:>10.3f}" for x in fr))
    return "\n".join(lines) + "\n"


def load_tables(root: Path, models=None, seeds=None) -> dict:
    found = discover(root)
    if models is not None:
        missing = [m for m in models if m not in found]
        if missing:
            raise ReportError(f"missing evaluation outputs for {missing}")
        found = {m: found[m] for m in models}
    tables = {}
    for m, by_seed in found.items():
        chosen = {s: p for s, p in by_seed.items() if seeds is None or s in seeds}
        if not chosen:
            raise ReportError(f"no evaluated seeds for {m}")
        tables[m] = {s: read_per_trajectory(p) for s, p in chosen.items()}
    return tables


def write_report(root, out_dir, models=None, seeds=None, benchmark: str = "") -> dict:
    if models is not None and len(models) == 0:
        raise ReportError("no models to report")
    summary = build_summary(load_tables(Path(root), models, seeds), benchmark)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "summary.json", summary)
    (out / "tables.txt").write_text(format_tables(summary))
    return summary


def report(artifact_dir, models=None) -> dict:
    """Summary tables for a benchmark directory; writes ``report/`` inside it."""
    root = Path(artifact_dir)
    bench = root.name if root.name in STATISTIC_NAMES else ""
    return write_report(root, root / "report", models, None, bench)
